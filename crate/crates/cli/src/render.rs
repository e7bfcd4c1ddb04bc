//! Color-mapped PPM rasters and small SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dmil::{Error, Result};

const PALETTE: [[u8; 3]; 12] = [
    [34, 139, 34],
    [189, 183, 107],
    [154, 205, 50],
    [72, 209, 204],
    [255, 215, 0],
    [220, 20, 60],
    [210, 180, 140],
    [30, 144, 255],
    [148, 0, 211],
    [255, 140, 0],
    [128, 128, 128],
    [0, 0, 0],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Binary PPM of a `side x side` class map.
pub fn write_label_ppm(path: &Path, labels: &[u16], side: usize) -> Result<()> {
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    for &y in labels {
        bytes.extend_from_slice(&class_color(y as usize));
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn legend_svg(names: &[String]) -> String {
    let h = 20 * names.len() + 10;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"220\" height=\"{h}\">\n");
    for (i, name) in names.iter().enumerate() {
        let y = 5 + 20 * i;
        let _ = writeln!(
            s,
            "  <rect x=\"5\" y=\"{y}\" width=\"16\" height=\"16\" fill=\"{}\" stroke=\"black\"/>\n  <text x=\"28\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>",
            hex(class_color(i)),
            y + 13,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart of percentages.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (bar, gap, top, plot) = (40usize, 20usize, 40usize, 200.0);
    let w = 60 + labels.len() * (bar + gap);
    let h = top + plot as usize + 50;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>",
        w / 2,
        escape(title)
    );
    let base = top as f64 + plot;
    let _ = writeln!(
        s,
        "  <line x1=\"40\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>",
        w - 10
    );
    for tick in [0, 25, 50, 75, 100] {
        let y = base - plot * tick as f64 / 100.0;
        let _ = writeln!(
            s,
            "  <text x=\"35\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{tick}</text>",
            y + 4.0
        );
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = 50 + i * (bar + gap);
        let bh = plot * v.clamp(0.0, 100.0) / 100.0;
        let _ = writeln!(
            s,
            "  <rect x=\"{x}\" y=\"{:.2}\" width=\"{bar}\" height=\"{bh:.2}\" fill=\"{}\"/>\n  <text x=\"{}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{v:.1}</text>\n  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            base - bh,
            hex(class_color(7)),
            x + bar / 2,
            base - bh - 4.0,
            x + bar / 2,
            base as usize + 18,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

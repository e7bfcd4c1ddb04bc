//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dmil::evalx::{evaluate, predict_hr, ConfusionMatrix};
use dmil::scenegen::{SceneGenConfig, SceneSet};
use dmil::train::{
    final_config, replicate_and_select, tune_kind, write_replicate_log, write_trial_log,
    ExperimentData, ModelKind, Network, SearchSpace, TrainConfig, TuneSplit,
};
use dmil::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::render::{bar_chart_svg, legend_svg, write_label_ppm};

/// Everything a tuning run needs, resolved from the command line.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub data: PathBuf,
    pub kinds: Vec<ModelKind>,
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// `key=value` overrides of the base training config.
    pub overrides: Vec<String>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Creates `dir`, refusing to reuse a non-empty one without `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let used = fs::read_dir(dir).map_err(|e| io(dir, e))?.next().is_some();
        if used && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Validates the manifest before reading any scene.
pub fn load_dataset(dir: &Path) -> Result<SceneSet> {
    let m = SceneSet::read_manifest(dir)?;
    info!(
        "dataset {}: {} classes, splits {:?}",
        dir.display(),
        m.classes,
        m.splits.keys().collect::<Vec<_>>()
    );
    SceneSet::load(dir)
}

pub fn gen_data(
    config_path: Option<&Path>,
    overrides: &[String],
    out: &Path,
    seed: u64,
    force: bool,
) -> Result<()> {
    let cfg: SceneGenConfig =
        config::load(config_path, Some(&SceneGenConfig::default()), overrides)?;
    cfg.validate()?;
    let set = SceneSet::generate(&cfg, seed)?;
    set.write(out, force)?;
    for (name, split) in &set.manifest.splits {
        info!("{name}: {} tiles, {} bags", split.scenes.len(), split.bags);
    }
    Ok(())
}

/// The base config of one kind: defaults, then the file, then overrides,
/// with `beta` and `r` present exactly when the kind uses them.
fn base_config(
    kind: ModelKind,
    space: &SearchSpace,
    path: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let default = TrainConfig::new(kind, space.lr[0], space.weight_decay[0], None, None);
    let mut cfg: TrainConfig = config::load(path, Some(&default), overrides)?;
    cfg.kind = kind;
    cfg.beta = kind.is_dmil().then(|| cfg.beta.unwrap_or(0.5));
    cfg.r = (kind == ModelKind::Lse).then(|| cfg.r.unwrap_or(1.0));
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct TuneSummary {
    kind: ModelKind,
    tune_split: TuneSplit,
    trials: usize,
    seed: u64,
    best_trial: usize,
    tune_aa: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn tune(
    spec: &ExperimentSpec,
    split: TuneSplit,
    base: Option<&Path>,
    space_path: Option<&Path>,
    jobs: usize,
    force: bool,
) -> Result<()> {
    let space: SearchSpace = config::load(space_path, Some(&SearchSpace::default()), &[])?;
    space.validate()?;
    let bases = spec
        .kinds
        .iter()
        .map(|&k| base_config(k, &space, base, &spec.overrides))
        .collect::<Result<Vec<_>>>()?;
    let set = load_dataset(&spec.data)?;
    let data = ExperimentData::new(&set, split)?;
    info!(
        "tuning on {} bags, scoring on {} bags ({split})",
        data.tune_bags().len(),
        data.score_bags().len()
    );
    for (kind, base) in spec.kinds.iter().zip(&bases) {
        let dir = spec.out.join(kind.name());
        prepare_out(&dir, force)?;
        let start = Instant::now();
        let outcome = match tune_kind(
            &data,
            *kind,
            Some(base),
            &space,
            spec.trials,
            spec.seed,
            jobs,
        ) {
            Err(Error::SearchExhausted { trials, log }) => {
                write_trial_log(&dir.join("trials.csv"), &log)?;
                return Err(Error::SearchExhausted { trials, log });
            }
            other => other?,
        };
        write_trial_log(&dir.join("trials.csv"), &outcome.log)?;
        write_json(&dir.join("config.json"), &final_config(&outcome.best))?;
        write_json(
            &dir.join("tune.json"),
            &TuneSummary {
                kind: *kind,
                tune_split: split,
                trials: spec.trials,
                seed: spec.seed,
                best_trial: outcome.best_trial,
                tune_aa: outcome.log[outcome.best_trial].tune_aa,
            },
        )?;
        info!(
            "{kind}: best trial {} of {} in {:.1}s",
            outcome.best_trial,
            spec.trials,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    data_dir: &Path,
    config_path: &Path,
    overrides: &[String],
    replicates: usize,
    split: TuneSplit,
    out: &Path,
    jobs: usize,
    force: bool,
) -> Result<()> {
    let cfg: TrainConfig = config::load(Some(config_path), None, overrides)?;
    cfg.validate()?;
    let set = load_dataset(data_dir)?;
    let data = ExperimentData::new(&set, split)?;
    prepare_out(out, force)?;
    let start = Instant::now();
    let sel = replicate_and_select(&cfg, &data.final_data(), data.test_bags(), replicates, jobs)?;
    sel.network.save(&out.join("checkpoint.json"))?;
    write_json(&out.join("config.json"), &cfg)?;
    write_replicate_log(&out.join("replicates.csv"), &sel.records, sel.chosen)?;
    let path = out.join("history.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["epoch", "risk"]).map_err(csv_err(&path))?;
    for r in &sel.history {
        w.write_record([r.epoch.to_string(), format!("{:e}", r.risk)])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    info!(
        "{}: kept replicate {} of {replicates} in {:.1}s",
        cfg.kind,
        sel.chosen,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Metrics of one evaluated checkpoint, as written by `eval` and read by
/// `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub kind: ModelKind,
    pub split: String,
    pub pa: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub aa: f64,
    pub miou: f64,
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|i| format!("class {i}")).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_confusion(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let c = cm.classes();
    let mut w = csv_writer(path)?;
    let mut header = vec!["reference".to_string()];
    header.extend((0..c).map(|j| format!("pred_{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..c {
        let mut row = vec![i.to_string()];
        row.extend((0..c).map(|j| cm.get(i, j).to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub fn eval(
    data_dir: &Path,
    checkpoint: &Path,
    split: &str,
    patches: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    let net = Network::load(checkpoint)?;
    let set = load_dataset(data_dir)?;
    if net.classes() != set.classes() || net.config().model.in_channels != set.channels() {
        return Err(Error::Data(format!(
            "checkpoint expects {} classes and {} channels, dataset has {} and {}",
            net.classes(),
            net.config().model.in_channels,
            set.classes(),
            set.channels()
        )));
    }
    let tiles = set.scenes(split)?.len();
    let bags = set.bags(split, 0..tiles)?;
    prepare_out(out, force)?;
    let (cm, m) = evaluate(&net, &bags)?;
    info!(
        "{} on {split}: AA {:.2}%, mIoU {:.2}%",
        net.config().kind,
        m.aa * 100.0,
        m.miou * 100.0
    );

    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["class", "pa", "iou"])
        .map_err(csv_err(&path))?;
    for (i, (pa, iou)) in m.pa.iter().zip(&m.iou).enumerate() {
        w.write_record([i.to_string(), opt(*pa), opt(*iou)])
            .map_err(csv_err(&path))?;
    }
    w.write_record(["mean".to_string(), opt(Some(m.aa)), opt(Some(m.miou))])
        .map_err(csv_err(&path))?;
    w.flush().map_err(|e| io(&path, e))?;
    write_confusion(&out.join("confusion.csv"), &cm)?;
    write_json(
        &out.join("metrics.json"),
        &EvalSummary {
            kind: net.config().kind,
            split: split.to_string(),
            pa: m.pa.clone(),
            iou: m.iou.clone(),
            aa: m.aa,
            miou: m.miou,
        },
    )?;
    write_text(
        &out.join("legend.svg"),
        &legend_svg(&class_names(set.classes())),
    )?;

    let rasters = out.join("rasters");
    fs::create_dir_all(&rasters).map_err(|e| io(&rasters, e))?;
    let path = rasters.join("patches.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["patch", "lr_label", "pixel_accuracy"])
        .map_err(csv_err(&path))?;
    for (i, bag) in bags.iter().take(patches).enumerate() {
        let pred = predict_hr(&net, bag)?;
        let reference = bag.hr_reference_for_eval();
        write_label_ppm(
            &rasters.join(format!("patch_{i:04}_pred.ppm")),
            &pred,
            bag.side(),
        )?;
        write_label_ppm(
            &rasters.join(format!("patch_{i:04}_ref.ppm")),
            reference,
            bag.side(),
        )?;
        let hits = pred.iter().zip(reference).filter(|(a, b)| a == b).count();
        w.write_record([
            i.to_string(),
            bag.lr_label().to_string(),
            format!("{:.6}", hits as f64 / pred.len() as f64),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| io(&path, e))
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: dir.to_path_buf(),
                what: "report input directory".into(),
            },
            _ => io(dir, e),
        })?
        .map(|e| e.map(|e| e.path()).map_err(|err| io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_summaries(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(p);
        }
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default()
}

/// Merges every `metrics.json` below `input` into one table, one row per
/// evaluated model in kind order.
pub fn report(input: &Path, out: &Path, force: bool) -> Result<()> {
    let mut paths = Vec::new();
    find_summaries(input, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::MissingArtifact {
            path: input.join("**/metrics.json"),
            what: "evaluation results; run eval first".into(),
        });
    }
    let mut rows = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
        let s: EvalSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let name = p
            .parent()
            .and_then(|d| d.strip_prefix(input).ok())
            .map(|d| d.display().to_string())
            .filter(|d| !d.is_empty())
            .unwrap_or_else(|| ".".into());
        rows.push((s, name));
    }
    let classes = rows[0].0.pa.len();
    if rows.iter().any(|(s, _)| s.pa.len() != classes) {
        return Err(Error::Data(
            "evaluations disagree on the number of classes".into(),
        ));
    }
    rows.sort_by(|a, b| a.0.kind.cmp(&b.0.kind).then_with(|| a.1.cmp(&b.1)));
    prepare_out(out, force)?;

    let path = out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["model".to_string(), "source".to_string()];
    header.extend((0..classes).map(|i| format!("pa_{i}")));
    header.extend(["AA".to_string(), "mIoU".to_string()]);
    w.write_record(&header).map_err(csv_err(&path))?;
    for (s, name) in &rows {
        let mut rec = vec![s.kind.title().to_string(), name.clone()];
        rec.extend(
            s.pa.iter()
                .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()),
        );
        rec.extend([pct(Some(s.aa)), pct(Some(s.miou))]);
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| io(&path, e))?;

    let labels: Vec<String> = if rows
        .iter()
        .map(|r| r.0.kind)
        .collect::<std::collections::BTreeSet<_>>()
        .len()
        == rows.len()
    {
        rows.iter()
            .map(|(s, _)| s.kind.title().to_string())
            .collect()
    } else {
        rows.iter()
            .map(|(s, n)| format!("{} ({n})", s.kind.title()))
            .collect()
    };
    let aa: Vec<f64> = rows.iter().map(|(s, _)| s.aa * 100.0).collect();
    let miou: Vec<f64> = rows.iter().map(|(s, _)| s.miou * 100.0).collect();
    write_text(&out.join("aa.svg"), &bar_chart_svg("AA (%)", &labels, &aa))?;
    write_text(
        &out.join("miou.svg"),
        &bar_chart_svg("mIoU (%)", &labels, &miou),
    )?;
    info!(
        "report over {} evaluations written to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

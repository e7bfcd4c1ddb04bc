//! MIL pooling operators and the multi-class DMIL head.
//!
//! Pooling is done at the embedding level: the K pixel embeddings of a bag
//! are aggregated into a bag embedding which is then scored with the same
//! linear classifiers that score individual pixels. Fixed operators (max,
//! mean, log-sum-exp) yield one bag embedding shared by all classes; the
//! attention operators keep one attention layer per class and therefore
//! produce C class-specific bag embeddings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{uniform_init, BoundParams, ParamId, ParamStore, PixelClassifierBank};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum PoolingKind {
    Max,
    Mean,
    /// `(1/r) log(mean(exp(r h)))`; mean as `r -> 0`, max as `r -> inf`.
    Lse {
        r: f64,
    },
    Attention,
    GatedAttention,
    /// Gated attention with GeLU on both branches.
    GeluGatedAttention,
}

impl PoolingKind {
    pub fn is_attention(self) -> bool {
        self.attention_variant().is_some()
    }

    pub fn attention_variant(self) -> Option<AttentionVariant> {
        match self {
            PoolingKind::Attention => Some(AttentionVariant::Plain),
            PoolingKind::GatedAttention => Some(AttentionVariant::Gated),
            PoolingKind::GeluGatedAttention => Some(AttentionVariant::GeluGated),
            _ => None,
        }
    }

    pub fn validate(self) -> Result<()> {
        if let PoolingKind::Lse { r } = self {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!(
                    "log-sum-exp pooling needs r > 0, got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// `w . tanh(V h)`
    Plain,
    /// `w . (tanh(V h) * sigm(U h))`
    Gated,
    /// `w . (gelu(V h) * gelu(U h))`
    GeluGated,
}

impl AttentionVariant {
    pub fn is_gated(self) -> bool {
        !matches!(self, AttentionVariant::Plain)
    }
}

/// Mean, max or log-sum-exp of the rows of `h: [K, M]`, giving `[M]`.
pub fn pool_fixed(tape: &mut Tape, kind: PoolingKind, h: Var) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "pool_fixed",
            lhs: shape,
            rhs: vec![],
        });
    }
    if shape[0] == 0 {
        return Err(Error::data("cannot pool an empty bag"));
    }
    kind.validate()?;
    match kind {
        PoolingKind::Max => tape.max(h, Some(0)),
        PoolingKind::Mean => tape.mean(h, Some(0)),
        PoolingKind::Lse { r } => {
            // z = s + (1/r) log mean exp(r h - r s), with s the per-feature
            // maximum held constant; the shift cancels exactly.
            let rh = tape.scale(h, r)?;
            let peak = tape.max(rh, Some(0))?;
            let peak = tape.detach(peak);
            let shifted = tape.sub(rh, peak)?;
            let e = tape.exp(shifted)?;
            let m = tape.mean(e, Some(0))?;
            let l = tape.log(m)?;
            let l = tape.add(l, peak)?;
            tape.scale(l, 1.0 / r)
        }
        _ => Err(Error::config(format!(
            "{kind:?} is not a fixed pooling operator"
        ))),
    }
}

/// Per-class attention parameters, stored stacked for a single matmul.
///
/// Column block `i` (width `L`) of `V: [M, C*L]` is `V_i^T`; likewise for
/// `U`. `w: [C*L]` holds the `w_i` back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    variant: AttentionVariant,
    classes: usize,
    hidden: usize,
    embed_dim: usize,
    v: ParamId,
    u: Option<ParamId>,
    w: ParamId,
}

/// Tape handles for the attention layers of `n` classes.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub v: Var,
    pub u: Option<Var>,
    pub w: Var,
    pub classes: usize,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn init(
        variant: AttentionVariant,
        embed_dim: usize,
        hidden: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 || classes == 0 {
            return Err(Error::config("attention layer needs positive M, L and C"));
        }
        let width = classes * hidden;
        let v = store.add(
            "attention.v",
            uniform_init(rng, &[embed_dim, width], embed_dim),
        );
        let u = variant.is_gated().then(|| {
            store.add(
                "attention.u",
                uniform_init(rng, &[embed_dim, width], embed_dim),
            )
        });
        let w = store.add("attention.w", uniform_init(rng, &[width], hidden));
        Ok(AttentionParams {
            variant,
            classes,
            hidden,
            embed_dim,
            v,
            u,
            w,
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bind(&self, params: &BoundParams) -> AttentionVars {
        AttentionVars {
            v: params.var(self.v),
            u: self.u.map(|u| params.var(u)),
            w: params.var(self.w),
            classes: self.classes,
            hidden: self.hidden,
        }
    }

    /// The `(w_i, V_i, U_i)` triple of one class, with `V_i, U_i: [L, M]`.
    pub fn class_triple(
        &self,
        store: &ParamStore,
        class: usize,
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let (m, l) = (self.embed_dim, self.hidden);
        let block = |id: ParamId| {
            let full = store.get(id);
            let width = self.classes * l;
            let mut out = Vec::with_capacity(l * m);
            for row in 0..l {
                for col in 0..m {
                    out.push(full.data()[col * width + class * l + row]);
                }
            }
            Tensor::matrix(l, m, out).expect("block shape")
        };
        let w = Tensor::vector(store.get(self.w).data()[class * l..(class + 1) * l].to_vec());
        (w, block(self.v), self.u.map(block))
    }
}

/// Attention weights `[K, n]` for the `n` class layers in `attn`; column
/// `i` sums to one over the K instances.
pub fn attention_weights_all(
    tape: &mut Tape,
    variant: AttentionVariant,
    h: Var,
    attn: &AttentionVars,
) -> Result<Var> {
    let hs = tape.value(h).shape().to_vec();
    let vs = tape.value(attn.v).shape().to_vec();
    let width = attn.classes * attn.hidden;
    if hs.len() != 2 || vs != [hs[1], width] || tape.value(attn.w).shape() != [width] {
        return Err(Error::ShapeMismatch {
            op: "attention_weights",
            lhs: hs,
            rhs: vs,
        });
    }
    if hs[0] == 0 {
        return Err(Error::data("cannot pool an empty bag"));
    }
    let k = hs[0];
    let proj_v = tape.matmul(h, attn.v)?;
    let hidden = match variant {
        AttentionVariant::Plain => tape.tanh(proj_v)?,
        AttentionVariant::Gated | AttentionVariant::GeluGated => {
            let u = attn
                .u
                .ok_or_else(|| Error::config("gated attention needs U parameters"))?;
            if tape.value(u).shape() != vs.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "attention_weights",
                    lhs: vs,
                    rhs: tape.value(u).shape().to_vec(),
                });
            }
            let proj_u = tape.matmul(h, u)?;
            let (a, b) = if variant == AttentionVariant::Gated {
                (tape.tanh(proj_v)?, tape.sigmoid(proj_u)?)
            } else {
                (tape.gelu(proj_v)?, tape.gelu(proj_u)?)
            };
            tape.mul(a, b)?
        }
    };
    let weighted = tape.mul(hidden, attn.w)?;
    let grouped = tape.reshape(weighted, &[k, attn.classes, attn.hidden])?;
    let logits = tape.sum(grouped, Some(2))?;
    tape.softmax(logits, 0)
}

/// Attention weights `[K]` of a single class layer given as `(w, V, U)` with
/// `w: [L]` and `V, U: [L, M]`.
pub fn attention_weights(
    tape: &mut Tape,
    variant: AttentionVariant,
    h: Var,
    w: Var,
    v: Var,
    u: Option<Var>,
) -> Result<Var> {
    let hidden = tape.value(w).numel();
    let vt = tape.transpose(v)?;
    let ut = match u {
        Some(u) => Some(tape.transpose(u)?),
        None => None,
    };
    let attn = AttentionVars {
        v: vt,
        u: ut,
        w,
        classes: 1,
        hidden,
    };
    let a = attention_weights_all(tape, variant, h, &attn)?;
    let k = tape.value(a).shape()[0];
    tape.reshape(a, &[k])
}

/// Result of [`dmil_forward`].
#[derive(Clone, Copy, Debug)]
pub struct DmilOutput {
    /// `[C]` bag-level class scores.
    pub bag_scores: Var,
    /// `[K, C]` pixel-level class scores.
    pub pixel_scores: Var,
    /// `[C, K]` attention weights, attention variants only.
    pub alphas: Option<Var>,
}

/// Bag and pixel scores of one bag of embeddings `h: [K, M]`.
pub fn dmil_forward(
    tape: &mut Tape,
    h: Var,
    kind: PoolingKind,
    attn: Option<&AttentionVars>,
    bank: &PixelClassifierBank,
    params: &BoundParams,
) -> Result<DmilOutput> {
    let pixel_scores = bank.pixel_scores(tape, params, h)?;
    match kind.attention_variant() {
        Some(variant) => {
            let attn = attn.ok_or_else(|| {
                Error::config(format!("{kind:?} pooling needs attention parameters"))
            })?;
            if attn.classes != bank.classes() {
                return Err(Error::config("attention layers must match the class count"));
            }
            let alpha = attention_weights_all(tape, variant, h, attn)?;
            let alpha_t = tape.transpose(alpha)?;
            let z = tape.matmul(alpha_t, h)?;
            let bag_scores = bank.diagonal_scores(tape, params, z)?;
            Ok(DmilOutput {
                bag_scores,
                pixel_scores,
                alphas: Some(alpha_t),
            })
        }
        None => {
            let z = pool_fixed(tape, kind, h)?;
            let m = tape.value(z).numel();
            let z = tape.reshape(z, &[1, m])?;
            let s = bank.pixel_scores(tape, params, z)?;
            let bag_scores = tape.reshape(s, &[bank.classes()])?;
            Ok(DmilOutput {
                bag_scores,
                pixel_scores,
                alphas: None,
            })
        }
    }
}

/// Softmax of a score vector.
pub fn bag_posterior(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain {
            op: "bag_posterior",
            detail: "non-finite score".into(),
        });
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn pooled(kind: PoolingKind, h: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let z = pool_fixed(&mut tape, kind, hv).unwrap();
        tape.value(z).data().to_vec()
    }

    #[test]
    fn mean_of_identical_rows_is_the_row() {
        let row = [0.5, -2.0, 3.25];
        let h = Tensor::matrix(3, 3, row.repeat(3)).unwrap();
        assert_eq!(pooled(PoolingKind::Mean, &h), row);
    }

    #[test]
    fn lse_hand_value() {
        let h = Tensor::matrix(2, 1, vec![0.0, 3f64.ln()]).unwrap();
        let z = pooled(PoolingKind::Lse { r: 1.0 }, &h);
        assert!((z[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lse_small_r_approaches_mean() {
        let h = rand_matrix(20, 5, 3);
        let z = pooled(PoolingKind::Lse { r: 1e-6 }, &h);
        let m = pooled(PoolingKind::Mean, &h);
        for (a, b) in z.iter().zip(&m) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_bag_and_bad_r_rejected() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(pool_fixed(&mut tape, PoolingKind::Mean, h).is_err());
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            pool_fixed(&mut tape, PoolingKind::Lse { r: 0.0 }, h),
            Err(Error::Config(_))
        ));
        assert!(pool_fixed(&mut tape, PoolingKind::Lse { r: -1.0 }, h).is_err());
    }

    #[test]
    fn single_instance_attention_is_one() {
        for variant in [
            AttentionVariant::Plain,
            AttentionVariant::Gated,
            AttentionVariant::GeluGated,
        ] {
            let mut tape = Tape::new();
            let h = tape.constant(rand_matrix(1, 4, 1));
            let w = tape.constant(Tensor::vector(vec![3.0, -1.0, 2.0]));
            let v = tape.constant(rand_matrix(3, 4, 2));
            let u = tape.constant(rand_matrix(3, 4, 3));
            let a = attention_weights(&mut tape, variant, h, w, v, variant.is_gated().then_some(u))
                .unwrap();
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn zero_v_gives_uniform_weights() {
        let mut tape = Tape::new();
        let h = tape.constant(rand_matrix(5, 4, 1));
        let w = tape.constant(Tensor::vector(vec![3.0, -1.0, 2.0]));
        let v = tape.constant(Tensor::zeros(&[3, 4]));
        let a = attention_weights(&mut tape, AttentionVariant::Plain, h, w, v, None).unwrap();
        for x in tape.value(a).data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_instances_get_equal_weight() {
        let mut h = rand_matrix(4, 3, 7);
        let first: Vec<f64> = h.data()[..3].to_vec();
        h.data_mut()[6..9].copy_from_slice(&first);
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let v = tape.constant(rand_matrix(2, 3, 8));
        let u = tape.constant(rand_matrix(2, 3, 9));
        let a =
            attention_weights(&mut tape, AttentionVariant::GeluGated, hv, w, v, Some(u)).unwrap();
        let a = tape.value(a).data();
        assert_eq!(a[0], a[2]);
    }

    #[test]
    fn attention_dimension_mismatch() {
        let mut tape = Tape::new();
        let h = tape.constant(rand_matrix(5, 4, 1));
        let w = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let v = tape.constant(rand_matrix(2, 3, 2));
        assert!(matches!(
            attention_weights(&mut tape, AttentionVariant::Plain, h, w, v, None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn posterior_examples() {
        let p = bag_posterior(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let u = bag_posterior(&[2.0; 4]).unwrap();
        assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let shifted = bag_posterior(&[3f64.ln() + 40.0, 40.0]).unwrap();
        assert!((shifted[0] - p[0]).abs() < 1e-15);
        assert!(bag_posterior(&[f64::NAN, 0.0]).is_err());
    }
}

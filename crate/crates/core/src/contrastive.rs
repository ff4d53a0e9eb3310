//! In-batch contrastive objectives between text, node and summary embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_rows, row_cross_entropy, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Initial log logit scale, `ln(1 / 0.07)`.
pub fn initial_temperature() -> f32 {
    (1.0f32 / 0.07).ln()
}

/// Upper bound on `exp(τ)`.
pub const MAX_LOGIT_SCALE: f32 = 100.0;

/// Clamps the stored `τ` so that `exp(τ) <= 100`.
pub fn clamp_temperature<T: Scalar>(store: &mut ParamStore<T>, tau: ParamId) {
    let cap = T::lit((MAX_LOGIT_SCALE as f64).ln());
    for v in store.get_mut(tau).value.data_mut() {
        if *v > cap {
            *v = cap;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    TextNode,
    TextSummary,
    NodeSummary,
}

/// Square similarity matrix whose diagonal holds the matching pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBatch {
    pub matrix: Tensor,
    pub kind: PairKind,
}

impl SimilarityBatch {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets `0..n`.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn transposed(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
            kind: self.kind,
        }
    }
}

/// Cosine similarities of the rows of `a` and `b`, scaled by `exp(tau)`.
pub fn similarity_matrix(a: &Tensor, b: &Tensor, tau: f32, kind: PairKind) -> Result<SimilarityBatch> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::LengthMismatch {
            left: a.rows(),
            right: b.rows(),
        });
    }
    if a.is_empty() {
        return Err(Error::Config("similarity of an empty batch".into()));
    }
    let (na, nb) = (l2_normalize_rows(a), l2_normalize_rows(b));
    let scale = tau.exp();
    let matrix = na.matmul(&nb.transpose())?.map(|v| v * scale);
    Ok(SimilarityBatch { matrix, kind })
}

/// Symmetric N-pair loss: the mean of row-wise and column-wise cross-entropy
/// with the diagonal as targets.
pub fn npair_loss(batch: &SimilarityBatch) -> Result<f32> {
    let labels = batch.labels();
    let rows = row_cross_entropy::<f64>(&batch.matrix.cast(), &labels)?;
    let cols = row_cross_entropy::<f64>(&batch.matrix.transpose().cast(), &labels)?;
    Ok((0.5 * (rows + cols)) as f32)
}

/// `l1 + lambda (l2 + l3)`.
pub fn total_loss(l1: f32, l2: f32, l3: f32, lambda: f32) -> Result<f32> {
    check_lambda(lambda as f64)?;
    Ok(l1 + lambda * (l2 + l3))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be positive, got {lambda}")))
    }
}

/// Which of the three loss terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossMask {
    pub text_node: bool,
    pub text_summary: bool,
    pub node_summary: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        text_node: true,
        text_summary: true,
        node_summary: true,
    };

    pub fn terms(&self) -> [bool; 3] {
        [self.text_node, self.text_summary, self.node_summary]
    }
}

impl FromStr for LossMask {
    type Err = Error;

    /// Comma-separated subset of `L1`, `L2`, `L3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = LossMask {
            text_node: false,
            text_summary: false,
            node_summary: false,
        };
        for part in s.split([',', '+', ' ']).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "L1" => m.text_node = true,
                "L2" => m.text_summary = true,
                "L3" => m.node_summary = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?}; expected L1, L2 or L3"))),
            }
        }
        if m.terms().iter().all(|t| !t) {
            return Err(Error::Config("loss mask selects no terms".into()));
        }
        Ok(m)
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .terms()
            .iter()
            .zip(["L1", "L2", "L3"])
            .filter(|(on, _)| **on)
            .map(|(_, n)| n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl TryFrom<String> for LossMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossMask> for String {
    fn from(m: LossMask) -> Self {
        m.to_string()
    }
}

/// Scaled cosine logits on the tape; `tau` is a `1 x 1` variable.
pub fn similarity_logits<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: Var) -> Result<Var> {
    let na = tape.l2_normalize_rows(a);
    let nb = tape.l2_normalize_rows(b);
    let nbt = tape.transpose(nb);
    let cos = tape.matmul(na, nbt)?;
    let scale = tape.exp(tau);
    Ok(tape.mul_scalar(cos, scale)?)
}

/// Symmetric N-pair loss of a square logit matrix on the tape.
pub fn npair_loss_var<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let n = tape.value(logits).rows();
    let labels: Vec<usize> = (0..n).collect();
    let rows = tape.cross_entropy(logits, &labels)?;
    let t = tape.transpose(logits);
    let cols = tape.cross_entropy(t, &labels)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, T::lit(0.5)))
}

/// Loss terms of one batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub text_node: Var,
    pub text_summary: Var,
    pub node_summary: Var,
    pub total: Var,
}

/// All three pairings of text (`t`), node (`z`) and summary (`s`)
/// embeddings and their masked combination `[L1] + lambda ([L2] + [L3])`.
pub fn batch_losses<T: Scalar>(
    tape: &mut Tape<T>,
    t: Var,
    z: Var,
    s: Var,
    tau: Var,
    lambda: f64,
    mask: LossMask,
) -> Result<BatchLosses> {
    check_lambda(lambda)?;
    let l1 = similarity_logits(tape, z, t, tau)?;
    let l1 = npair_loss_var(tape, l1)?;
    let l2 = similarity_logits(tape, t, s, tau)?;
    let l2 = npair_loss_var(tape, l2)?;
    let l3 = similarity_logits(tape, z, s, tau)?;
    let l3 = npair_loss_var(tape, l3)?;
    let mut summary_terms = Vec::new();
    if mask.text_summary {
        summary_terms.push(l2);
    }
    if mask.node_summary {
        summary_terms.push(l3);
    }
    let summary = match summary_terms.as_slice() {
        [] => None,
        [one] => Some(tape.scale(*one, T::lit(lambda))),
        [a, b] => {
            let sum = tape.add(*a, *b)?;
            Some(tape.scale(sum, T::lit(lambda)))
        }
        _ => unreachable!(),
    };
    let total = match (mask.text_node, summary) {
        (true, Some(s)) => tape.add(l1, s)?,
        (true, None) => l1,
        (false, Some(s)) => s,
        (false, None) => return Err(Error::Config("loss mask selects no terms".into())),
    };
    Ok(BatchLosses {
        text_node: l1,
        text_summary: l2,
        node_summary: l3,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::check_param_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn batch(matrix: Tensor) -> SimilarityBatch {
        SimilarityBatch {
            matrix,
            kind: PairKind::TextNode,
        }
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let a = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let s = similarity_matrix(&a, &a, 0.0, PairKind::TextNode).unwrap();
        assert_eq!(s.matrix, a);
    }

    #[test]
    fn temperature_scales_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(4, 3, &mut rng), random(4, 3, &mut rng));
        let s0 = similarity_matrix(&a, &b, 0.0, PairKind::TextSummary).unwrap();
        let s2 = similarity_matrix(&a, &b, 2f32.ln(), PairKind::TextSummary).unwrap();
        for (x, y) in s0.matrix.data().iter().zip(s2.matrix.data()) {
            assert!((2.0 * x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_pairwise_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(6, 4, &mut rng), random(6, 4, &mut rng));
        let tau = 0.7f32;
        let s = similarity_matrix(&a, &b, tau, PairKind::NodeSummary).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (x, y) = (a.row(i), b.row(j));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| (*p as f64) * (*q as f64)).sum();
                let nx: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let ny: f64 = y.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let oracle = dot / (nx * ny) * (tau as f64).exp();
                assert!((s.matrix.at(i, j) as f64 - oracle).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_mismatched_and_empty_inputs() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(similarity_matrix(&a, &b, 0.0, PairKind::TextNode).is_err());
    }

    #[test]
    fn loss_identities() {
        assert_eq!(npair_loss(&batch(Tensor::scalar(3.0))).unwrap(), 0.0);
        let l = npair_loss(&batch(Tensor::zeros(&[4, 4]))).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        let eye = Tensor::from_fn(4, 4, |i, j| if i == j { 20.0 } else { 0.0 });
        assert!(npair_loss(&batch(eye)).unwrap() < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 3.0, 0.1).unwrap() - 1.5).abs() < 1e-6);
        assert_eq!(total_loss(1.0, 0.0, 0.0, 10.0).unwrap(), 1.0);
        assert!(total_loss(1.0, 0.0, 0.0, 0.0).is_err());
        assert!(total_loss(1.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn loss_mask_parsing() {
        assert_eq!("L1,L2,L3".parse::<LossMask>().unwrap(), LossMask::ALL);
        let m: LossMask = "l2+L3".parse().unwrap();
        assert_eq!(m.terms(), [false, true, true]);
        assert_eq!(m.to_string(), "L2,L3");
        assert!("L4".parse::<LossMask>().is_err());
        assert!("".parse::<LossMask>().is_err());
    }

    #[test]
    fn masked_total_matches_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, z, s) = (random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng));
        for mask in ["L1", "L2", "L3", "L1,L2", "L2,L3", "L1,L3", "L1,L2,L3"] {
            let mask: LossMask = mask.parse().unwrap();
            let mut tape = Tape::new();
            let (tv, zv, sv) = (tape.leaf(t.clone()), tape.leaf(z.clone()), tape.leaf(s.clone()));
            let tau = tape.leaf(Tensor::scalar(0.5));
            let l = batch_losses(&mut tape, tv, zv, sv, tau, 0.1, mask).unwrap();
            let [a, b, c] = [l.text_node, l.text_summary, l.node_summary].map(|v| tape.value(v).item());
            let terms = mask.terms();
            let expected = if terms[0] { a } else { 0.0 } + 0.1 * (if terms[1] { b } else { 0.0 } + if terms[2] { c } else { 0.0 });
            assert!((tape.value(l.total).item() - expected).abs() < 1e-6);
            let direct = npair_loss(&similarity_matrix(&z, &t, 0.5, PairKind::TextNode).unwrap()).unwrap();
            assert!((a - direct).abs() < 1e-5);
        }
    }

    #[test]
    fn temperature_clamp() {
        let mut store = ParamStore::<f32>::new();
        let tau = store.add("tau", Tensor::scalar(10.0));
        clamp_temperature(&mut store, tau);
        assert!((store.value(tau).item().exp() - 100.0).abs() < 1e-3);
        assert!((initial_temperature().exp() - 1.0 / 0.07).abs() < 1e-4);
    }

    #[test]
    fn gradients_of_every_term_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let t = store.add("t", random(5, 6, &mut rng).cast());
        let z = store.add("z", random(5, 6, &mut rng).cast());
        let s = store.add("s", random(5, 6, &mut rng).cast());
        let tau = store.add("tau", Tensor::scalar(0.8));
        for mask in ["L1", "L2", "L3", "L1,L2,L3"] {
            let mask: LossMask = mask.parse().unwrap();
            let checks = check_param_gradients(
                &store,
                |tape, st| {
                    let (tv, zv, sv, tauv) = (tape.param(st, t), tape.param(st, z), tape.param(st, s), tape.param(st, tau));
                    batch_losses(tape, tv, zv, sv, tauv, 0.3, mask).unwrap().total
                },
                1e-4,
                100,
                0,
            );
            for c in checks {
                assert!(c.max_relative_error(1e-6) < 1e-4, "{} under {mask}", c.name);
            }
        }
    }

    #[test]
    fn random_unit_vectors_give_about_ln_n() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(32, 64, &mut rng), random(32, 64, &mut rng));
            total += npair_loss(&similarity_matrix(&a, &b, 0.0, PairKind::TextNode).unwrap()).unwrap();
        }
        let mean = total / 10.0;
        assert!((mean / 32f32.ln() - 1.0).abs() < 0.15, "mean loss {mean}");
    }

    proptest! {
        #[test]
        fn transpose_invariance(data in proptest::collection::vec(-5.0f32..5.0, 16)) {
            let m = Tensor::new(vec![4, 4], data).unwrap();
            let b = batch(m);
            prop_assert_eq!(npair_loss(&b).unwrap(), npair_loss(&b.transposed()).unwrap());
            prop_assert!(npair_loss(&b).unwrap() >= 0.0);
        }

        #[test]
        fn positive_row_scaling_leaves_similarity_unchanged(seed in 0u64..1000, c in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
            let s = similarity_matrix(&a, &b, 0.3, PairKind::TextNode).unwrap();
            let scaled = similarity_matrix(&a.map(|v| v * c), &b, 0.3, PairKind::TextNode).unwrap();
            for (x, y) in s.matrix.data().iter().zip(scaled.matrix.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

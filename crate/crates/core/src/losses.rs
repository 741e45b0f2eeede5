//! Identity, label and reconstruction consistency losses and their
//! weighted sum.
//!
//! Embedding matrices are `[M, C]`: one row per pixel, one column per
//! embedding channel.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError, Var, STABILITY_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Scale of the label term.
    pub alpha: f64,
    /// Scale of the reconstruction term.
    pub beta: f64,
    /// Off-diagonal balance inside the identity term.
    pub lambda: f64,
    /// Temperature of the label term.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            lambda: 0.005,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(format!(
                "loss weights must be non-negative (alpha {}, beta {}, lambda {})",
                self.alpha, self.beta, self.lambda
            ));
        }
        if !(self.tau > 0.0) {
            return Err(format!("temperature tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Loss settings carried in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Encoder layer whose projection feeds the label term.
    pub label_layer: usize,
    /// Layers entering the identity term; empty means all.
    pub identity_layers: Vec<usize>,
    pub recon_reduction: Reduction,
    /// Subtract the per-column mean before correlating.
    pub center_embeddings: bool,
    /// Pixels sampled per class for the label term.
    pub sample_budget: usize,
    pub weight_mu: f64,
    pub weight_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            label_layer: 1,
            identity_layers: Vec::new(),
            recon_reduction: Reduction::Mean,
            center_embeddings: false,
            sample_budget: crate::sampler::DEFAULT_BUDGET,
            weight_mu: crate::sampler::DEFAULT_MU,
            weight_epsilon: crate::sampler::DEFAULT_EPSILON,
        }
    }
}

fn check_matrix(op: &'static str, z: Var<'_>) -> Result<(usize, usize)> {
    match z.shape()[..] {
        [m, c] if m >= 1 && c >= 1 => Ok((m, c)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected an [M, C] embedding matrix, got {:?}", z.shape()),
        }),
    }
}

/// `C_ij = Σ_m Z_mi Z'_mj / (‖Z_·i‖ ‖Z'_·j‖ + δ)`.
pub fn cross_correlation<'g>(z: Var<'g>, zp: Var<'g>, center: bool) -> Result<Var<'g>> {
    check_matrix("cross_correlation", z)?;
    if z.shape() != zp.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_correlation",
            lhs: z.shape(),
            rhs: zp.shape(),
        });
    }
    let (z, zp) = if center {
        (z.sub(z.mean_axes(&[0], true)?)?, zp.sub(zp.mean_axes(&[0], true)?)?)
    } else {
        (z, zp)
    };
    let num = z.t()?.matmul(zp)?;
    let den = z.l2_norm(0)?.t()?.matmul(zp.l2_norm(0)?)?.add_scalar(STABILITY_EPS);
    num.div(den)
}

/// `Σ_l [Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²]` over the given matrices.
pub fn identity_loss<'g>(correlations: &[Var<'g>], lambda: f64) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for &c in correlations {
        let n = match c.shape()[..] {
            [a, b] if a == b => a,
            _ => {
                return Err(TensorError::Invalid {
                    op: "identity_loss",
                    msg: format!("correlation matrix must be square, got {:?}", c.shape()),
                })
            }
        };
        let g = c.graph();
        let eye = g.constant(Tensor::eye(n));
        let off_mask = (0..n * n).map(|k| if k % (n + 1) == 0 { 0.0 } else { 1.0 }).collect();
        let off = g.constant(Tensor::new(vec![n, n], off_mask)?);
        let on_diag = c.sub(eye)?.square().mul(eye)?.sum();
        let off_diag = c.square().mul(off)?.sum().mul_scalar(lambda);
        let term = on_diag.add(off_diag)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or(TensorError::Invalid {
        op: "identity_loss",
        msg: "no correlation matrices".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Negative,
    Excluded,
}

/// Pairwise relation between two lists of sampled pixel labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    pub labels1: Vec<u8>,
    pub labels2: Vec<u8>,
    pub entries: Vec<Relation>,
}

impl RelationMatrix {
    pub fn rows(&self) -> usize {
        self.labels1.len()
    }

    pub fn cols(&self) -> usize {
        self.labels2.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Relation {
        self.entries[i * self.cols() + j]
    }

    pub fn count(&self, r: Relation) -> usize {
        self.entries.iter().filter(|&&e| e == r).count()
    }

    pub fn transpose(&self) -> RelationMatrix {
        build_relation_matrix(&self.labels2, &self.labels1)
    }

    fn mask(&self, keep: impl Fn(Relation) -> bool) -> Vec<bool> {
        self.entries.iter().map(|&e| keep(e)).collect()
    }
}

pub fn relation(a: u8, b: u8) -> Relation {
    match (a, b) {
        (0, 0) => Relation::Excluded,
        (a, b) if a == b => Relation::Positive,
        _ => Relation::Negative,
    }
}

pub fn build_relation_matrix(labels1: &[u8], labels2: &[u8]) -> RelationMatrix {
    let entries = labels1
        .iter()
        .flat_map(|&a| labels2.iter().map(move |&b| relation(a, b)))
        .collect();
    RelationMatrix {
        labels1: labels1.to_vec(),
        labels2: labels2.to_vec(),
        entries,
    }
}

/// Label loss from precomputed `[N1, N2]` logits. `None` when `a` has no
/// positive pair.
pub fn label_loss_from_logits<'g>(logits: Var<'g>, a: &RelationMatrix) -> Result<Option<Var<'g>>> {
    if logits.shape() != [a.rows(), a.cols()] {
        return Err(TensorError::ShapeMismatch {
            op: "label_loss",
            lhs: logits.shape(),
            rhs: vec![a.rows(), a.cols()],
        });
    }
    if a.count(Relation::Positive) == 0 {
        return Ok(None);
    }
    let all = logits.masked_logsumexp(&a.mask(|r| r != Relation::Excluded))?;
    let pos = logits.masked_logsumexp(&a.mask(|r| r == Relation::Positive))?;
    Ok(Some(all.sub(pos)?))
}

/// Cross-patch pairwise cosine similarities of the rows of `z1` and `z2`.
pub fn pairwise_cosine<'g>(z1: Var<'g>, z2: Var<'g>) -> Result<Var<'g>> {
    let (_, c1) = check_matrix("pairwise_cosine", z1)?;
    let (_, c2) = check_matrix("pairwise_cosine", z2)?;
    if c1 != c2 {
        return Err(TensorError::ShapeMismatch {
            op: "pairwise_cosine",
            lhs: z1.shape(),
            rhs: z2.shape(),
        });
    }
    let dot = z1.matmul(z2.t()?)?;
    let den = z1.l2_norm(1)?.matmul(z2.l2_norm(1)?.t()?)?.add_scalar(STABILITY_EPS);
    dot.div(den)
}

/// `−log(Σ_POS exp(cos/τ) / Σ_{POS∪NEG} exp(cos/τ))` over cross-patch
/// pairs. `None` (skip) when no pair is positive.
pub fn label_loss<'g>(z1: Var<'g>, z2: Var<'g>, a: &RelationMatrix, tau: f64) -> Result<Option<Var<'g>>> {
    let logits = pairwise_cosine(z1, z2)?.mul_scalar(1.0 / tau);
    label_loss_from_logits(logits, a)
}

/// Squared reconstruction error, averaged or summed over voxels.
pub fn recon_loss<'g>(p: Var<'g>, p_hat: Var<'g>, reduction: Reduction) -> Result<Var<'g>> {
    if p.shape() != p_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            lhs: p.shape(),
            rhs: p_hat.shape(),
        });
    }
    let sq = p.sub(p_hat)?.square();
    Ok(match reduction {
        Reduction::Mean => sq.mean(),
        Reduction::Sum => sq.sum(),
    })
}

/// `identity + α·label + β·recon`; a skipped label term counts as 0.
pub fn mixcl_loss<'g>(identity: Var<'g>, label: Option<Var<'g>>, recon: Var<'g>, w: &LossWeights) -> Result<Var<'g>> {
    let mut total = identity.add(recon.mul_scalar(w.beta))?;
    if let Some(l) = label {
        total = total.add(l.mul_scalar(w.alpha))?;
    }
    Ok(total)
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub identity: f64,
    pub label: f64,
    pub recon: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.identity + w.alpha * self.label + w.beta * self.recon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::label_loss_enumerated;
    use crate::tensor::{gradient_check, Graph};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn corr(z: Tensor, zp: Tensor) -> Tensor {
        let g = Graph::new();
        let c = cross_correlation(g.constant(z), g.constant(zp), false).unwrap();
        (*c.value()).clone()
    }

    #[test]
    fn correlation_of_identity() {
        let c = corr(Tensor::eye(2), Tensor::eye(2));
        for (a, b) in c.data().iter().zip(Tensor::eye(2).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 2.0 * STABILITY_EPS);
        }
    }

    #[test]
    fn correlation_of_negated() {
        let z = mat(3, 2, &[1.0, -2.0, 0.5, 3.0, 2.0, 1.0]);
        let c = corr(z.clone(), z.map(|v| -v));
        assert_abs_diff_eq!(c.at(&[0, 0]), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.at(&[1, 1]), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_hand_example() {
        let c = corr(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]), Tensor::eye(2));
        assert_abs_diff_eq!(c.at(&[0, 0]), 1.0 / 10f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.at(&[0, 1]), 3.0 / 10f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.at(&[1, 0]), 2.0 / 20f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.at(&[1, 1]), 4.0 / 20f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.at(&[0, 0]), 0.31623, epsilon = 1e-5);
        assert_abs_diff_eq!(c.at(&[0, 1]), 0.94868, epsilon = 1e-5);
        assert_abs_diff_eq!(c.at(&[1, 0]), 0.44721, epsilon = 1e-5);
        assert_abs_diff_eq!(c.at(&[1, 1]), 0.89443, epsilon = 1e-5);
    }

    #[test]
    fn correlation_rejects_mismatch() {
        let g = Graph::new();
        let r = cross_correlation(g.constant(Tensor::eye(2)), g.constant(Tensor::eye(3)), false);
        assert!(matches!(r, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn centering_removes_column_means() {
        let z = mat(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 7.0]);
        let g = Graph::new();
        let c = cross_correlation(g.constant(z.clone()), g.constant(z), true).unwrap();
        assert_abs_diff_eq!(c.value().at(&[0, 0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.value().at(&[0, 1]), 3f64.sqrt() / 2.0, epsilon = 1e-12);
    }

    fn id_loss(c: &[f64], n: usize, lambda: f64) -> f64 {
        let g = Graph::new();
        identity_loss(&[g.constant(mat(n, n, c))], lambda).unwrap().item()
    }

    #[test]
    fn identity_loss_examples() {
        assert_eq!(id_loss(&[1.0, 0.0, 0.0, 1.0], 2, 0.005), 0.0);
        assert_abs_diff_eq!(id_loss(&[1.0, 0.5, 0.5, 1.0], 2, 0.005), 0.0025, epsilon = 1e-15);
        assert_eq!(id_loss(&[0.0; 4], 2, 0.005), 2.0);
    }

    #[test]
    fn identity_loss_sums_layers() {
        let g = Graph::new();
        let a = g.constant(mat(2, 2, &[0.0; 4]));
        let b = g.constant(mat(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]));
        assert_abs_diff_eq!(identity_loss(&[a, b], 0.005).unwrap().item(), 2.0025, epsilon = 1e-15);
        assert!(identity_loss(&[], 0.005).is_err());
    }

    #[test]
    fn relation_examples() {
        use Relation::*;
        assert_eq!(build_relation_matrix(&[1, 0], &[1, 2]).entries, vec![Positive, Negative, Negative, Negative]);
        assert_eq!(build_relation_matrix(&[0], &[0]).entries, vec![Excluded]);
        assert_eq!(build_relation_matrix(&[5, 5], &[5, 5]).count(Positive), 4);
    }

    fn ll(z1: Tensor, z2: Tensor, l1: &[u8], l2: &[u8], tau: f64) -> Option<f64> {
        let g = Graph::new();
        label_loss(g.constant(z1), g.constant(z2), &build_relation_matrix(l1, l2), tau)
            .unwrap()
            .map(|v| v.item())
    }

    #[test]
    fn label_loss_all_positive_is_zero() {
        let z1 = mat(2, 3, &[0.1, 0.4, -1.0, 2.0, 0.3, 0.0]);
        let z2 = mat(3, 3, &[1.0, 0.0, 0.5, -0.2, 0.3, 0.9, 0.0, 1.0, 1.0]);
        assert_eq!(ll(z1, z2, &[3, 3], &[3, 3, 3], 0.1), Some(0.0));
    }

    #[test]
    fn label_loss_scalar_example() {
        let z1 = mat(1, 2, &[1.0, 0.0]);
        let z2 = mat(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let v = ll(z1, z2, &[1], &[1, 2], 0.1).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + (-10f64).exp())).ln();
        assert_abs_diff_eq!(v, expect, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 2.06e-9, epsilon = 1e-11);
    }

    #[test]
    fn label_loss_skips_without_positives() {
        let z = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ll(z.clone(), z, &[0, 1], &[2, 0], 0.1), None);
    }

    #[test]
    fn excluded_logits_do_not_matter() {
        let a = build_relation_matrix(&[0, 1, 0], &[0, 1]);
        let base = [0.3, -0.2, 0.8, 1.5, -0.7, 0.1];
        let g = Graph::new();
        let l0 = label_loss_from_logits(g.constant(mat(3, 2, &base)), &a).unwrap().unwrap().item();
        let mut moved = base;
        moved[0] = 40.0;
        moved[4] = -9.0;
        let l1 = label_loss_from_logits(g.constant(mat(3, 2, &moved)), &a).unwrap().unwrap().item();
        assert_eq!(l0, l1);
    }

    #[test]
    fn recon_examples() {
        let g = Graph::new();
        let p = g.constant(Tensor::from_slice(&[1.0, 2.0]));
        let z = g.constant(Tensor::from_slice(&[0.0, 0.0]));
        assert_eq!(recon_loss(p, p, Reduction::Mean).unwrap().item(), 0.0);
        assert_eq!(recon_loss(p, z, Reduction::Mean).unwrap().item(), 2.5);
        assert_eq!(recon_loss(p, z, Reduction::Sum).unwrap().item(), 5.0);
        let p7 = p.add_scalar(7.0);
        let z7 = z.add_scalar(7.0);
        assert_eq!(recon_loss(p7, z7, Reduction::Mean).unwrap().item(), 2.5);
        let three = g.constant(Tensor::from_slice(&[0.0; 3]));
        assert!(recon_loss(p, three, Reduction::Mean).is_err());
    }

    #[test]
    fn mixcl_examples() {
        let g = Graph::new();
        let w = LossWeights::default();
        let s = |v: f64| g.constant(Tensor::scalar(v));
        assert_eq!(mixcl_loss(s(0.0), Some(s(0.0)), s(0.0), &w).unwrap().item(), 0.0);
        assert_abs_diff_eq!(mixcl_loss(s(1.0), Some(s(1.0)), s(1.0), &w).unwrap().item(), 1.02, epsilon = 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        assert_eq!(mixcl_loss(s(0.7), Some(s(3.0)), s(5.0), &zero).unwrap().item(), 0.7);
        assert_abs_diff_eq!(
            LossParts {
                identity: 1.0,
                label: 1.0,
                recon: 1.0
            }
            .total(&w),
            1.02,
            epsilon = 1e-15
        );
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
    }

    fn matrix(m: usize, c: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, m * c).prop_map(move |v| mat(m, c, &v))
    }

    fn labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..3, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn correlation_bounded_and_scale_invariant(
            z in matrix(5, 3),
            zp in matrix(5, 3),
            s in prop::collection::vec(0.1f64..10.0, 6),
        ) {
            let c = corr(z.clone(), zp.clone());
            prop_assert!(c.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
            let scale = |t: &Tensor, f: &[f64]| {
                let mut o = t.clone();
                for (i, v) in o.data_mut().iter_mut().enumerate() {
                    *v *= f[i % 3];
                }
                o
            };
            let c2 = corr(scale(&z, &s[..3]), scale(&zp, &s[3..]));
            for (a, b) in c.data().iter().zip(c2.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let g = Graph::new();
            let l1 = identity_loss(&[g.constant(c)], 0.005).unwrap().item();
            let l2 = identity_loss(&[g.constant(c2)], 0.005).unwrap().item();
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-8);
        }

        #[test]
        fn label_loss_matches_enumeration(
            n1 in 1usize..=4,
            n2 in 1usize..=4,
            seed in any::<u64>(),
            l1 in labels(4),
            l2 in labels(4),
        ) {
            use rand::Rng;
            let mut rng = crate::rng::RngStream::new(seed, 0);
            let rows = |n: usize, rng: &mut crate::rng::RngStream| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
            };
            let z1 = rows(n1, &mut rng);
            let z2 = rows(n2, &mut rng);
            let flat = |r: &Vec<Vec<f64>>| mat(r.len(), 3, &r.concat());
            let got = ll(flat(&z1), flat(&z2), &l1[..n1], &l2[..n2], 0.1);
            let want = label_loss_enumerated(&z1, &z2, &l1[..n1], &l2[..n2], 0.1);
            match (got, want) {
                (Some(a), Some(b)) => {
                    prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
                    prop_assert!(a >= 0.0);
                }
                (None, None) => {}
                other => prop_assert!(false, "skip mismatch {:?}", other),
            }
        }

        #[test]
        fn label_loss_scale_invariant_per_pixel(
            z1 in matrix(3, 4),
            z2 in matrix(3, 4),
            row in 0usize..3,
            s in 0.1f64..10.0,
        ) {
            let l1 = [1, 0, 2];
            let l2 = [1, 2, 0];
            let base = ll(z1.clone(), z2.clone(), &l1, &l2, 0.1).unwrap();
            let mut scaled = z1.clone();
            for c in 0..4 {
                scaled.data_mut()[row * 4 + c] *= s;
            }
            let moved = ll(scaled, z2, &l1, &l2, 0.1).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn relation_transposes(l1 in labels(4), l2 in labels(3)) {
            let a = build_relation_matrix(&l1, &l2);
            let t = a.transpose();
            for i in 0..4 {
                for j in 0..3 {
                    prop_assert_eq!(a.get(i, j), t.get(j, i));
                }
            }
        }

        #[test]
        fn loss_gradients_match_finite_differences(z in matrix(4, 3), zp in matrix(4, 3), center in any::<bool>()) {
            let a = build_relation_matrix(&[1, 0, 2, 1], &[1, 2, 0, 0]);
            let rep = gradient_check(
                |_, v| {
                    let c = cross_correlation(v[0], v[1], center)?;
                    let id = identity_loss(&[c], 0.005)?;
                    let lab = label_loss(v[0], v[1], &a, 0.1)?;
                    let rec = recon_loss(v[0], v[1], Reduction::Mean)?;
                    mixcl_loss(id, lab, rec, &LossWeights { alpha: 1.0, beta: 1.0, ..Default::default() })
                },
                &[z, zp],
                1e-5,
                1e-3,
            )
            .unwrap();
            prop_assert!(rep.max_rel_error < 1e-4, "{}", rep.max_rel_error);
        }
    }
}

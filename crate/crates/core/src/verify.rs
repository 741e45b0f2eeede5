//! Verification suites: gradient checks for every loss and the oracle
//! comparisons run by `mixcl oracle-check`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::LabelMap;
use crate::losses::{
    build_relation_matrix, cross_correlation, identity_loss, label_loss, mixcl_loss, recon_loss, LossWeights,
    Reduction, Relation,
};
use crate::oracles::{brute_force_distance, label_loss_enumerated};
use crate::rng::RngStream;
use crate::sampler::{
    distance_to_boundary, sample_pixels, weight, DistanceMap, WeightMap, DEFAULT_EPSILON, DEFAULT_MU,
};
use crate::tensor::{gradient_check, Graph, Result, Tensor, STABILITY_EPS};
use crate::augment::auxiliary_source;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn normal(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("sizes agree")
}

/// Worst gradient error of one loss over a batch of random trials.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    /// `[rows, cols]` of the embeddings in the worst trial.
    pub worst_shape: [usize; 2],
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub const LOSS_NAMES: [&str; 4] = ["identity_loss", "label_loss", "recon_loss", "mixcl_loss"];

/// Central-difference checks of every loss on embeddings of random size up
/// to `64 × 16`.
pub fn grad_check_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (k, &name) in LOSS_NAMES.iter().enumerate() {
        let mut rng = RngStream::new(seed, k as u64);
        let mut worst = 0.0f64;
        let mut worst_shape = [0, 0];
        for _ in 0..trials {
            let n = rng.random_range(2..=64);
            let c = rng.random_range(2..=16);
            let inputs = [normal(n, c, &mut rng), normal(n, c, &mut rng)];
            let mut labels = || -> Vec<u8> { (0..n).map(|_| rng.random_range(0..3u8)).collect() };
            let (mut l1, l2) = (labels(), labels());
            l1[0] = 1;
            let mut l2 = l2;
            l2[0] = 1;
            let a = build_relation_matrix(&l1, &l2);
            let w = LossWeights::default();
            let report = match name {
                "identity_loss" => gradient_check(
                    |_, v| identity_loss(&[cross_correlation(v[0], v[1], false)?], w.lambda),
                    &inputs,
                    GRAD_STEP,
                    GRAD_FLOOR,
                )?,
                "label_loss" => gradient_check(
                    |_, v| Ok(label_loss(v[0], v[1], &a, w.tau)?.expect("a positive pair exists")),
                    &inputs,
                    GRAD_STEP,
                    GRAD_FLOOR,
                )?,
                "recon_loss" => gradient_check(
                    |_, v| recon_loss(v[0], v[1], Reduction::Mean),
                    &inputs,
                    GRAD_STEP,
                    GRAD_FLOOR,
                )?,
                _ => gradient_check(
                    |_, v| {
                        let id = identity_loss(&[cross_correlation(v[0], v[1], false)?], w.lambda)?;
                        let lab = label_loss(v[0], v[1], &a, w.tau)?;
                        let rec = recon_loss(v[0], v[1], Reduction::Mean)?;
                        mixcl_loss(id, lab, rec, &w)
                    },
                    &inputs,
                    GRAD_STEP,
                    GRAD_FLOOR,
                )?,
            };
            if report.max_rel_error >= worst {
                worst = report.max_rel_error;
                worst_shape = [n, c];
            }
        }
        rows.push(GradCheckRow {
            loss: name,
            trials,
            max_rel_error: worst,
            worst_shape,
        });
    }
    Ok(rows)
}

/// Result of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub summary: String,
    /// Replayable description of the first failing case.
    pub failure: Option<String>,
}

impl OracleOutcome {
    fn pass(name: &'static str, summary: String) -> Self {
        Self {
            name,
            passed: true,
            summary,
            failure: None,
        }
    }

    fn fail(name: &'static str, summary: String, case: String) -> Self {
        Self {
            name,
            passed: false,
            summary,
            failure: Some(case),
        }
    }
}

pub const ORACLE_NAMES: [&str; 7] = [
    "distance-transform",
    "label-loss",
    "cross-correlation",
    "weight-map",
    "sampling",
    "auxiliary-ratio",
    "exclusion",
];

/// Runs one oracle by name; `None` for an unknown name.
pub fn run_oracle(name: &str, seed: u64) -> Option<OracleOutcome> {
    Some(match name {
        "distance-transform" => check_distance_transform(200, 8, seed, distance_to_boundary),
        "label-loss" => check_label_loss(seed),
        "cross-correlation" => check_cross_correlation(),
        "weight-map" => check_weight_map(),
        "sampling" => check_sampling_frequencies(100_000, seed),
        "auxiliary-ratio" => check_auxiliary_ratio(10_000, seed),
        "exclusion" => check_exclusion(seed),
        _ => return None,
    })
}

/// Random label map whose extent per axis lies in `1..=max_extent`, built
/// from a few boxes over a random background.
pub fn random_label_map(max_extent: usize, rng: &mut RngStream) -> LabelMap {
    let d = [
        rng.random_range(1..=max_extent),
        rng.random_range(1..=max_extent),
        rng.random_range(1..=max_extent),
    ];
    let mut l = LabelMap::zeros(d);
    if rng.random_bool(0.3) {
        for v in l.data_mut() {
            *v = rng.random_range(0..3);
        }
        return l;
    }
    for _ in 0..rng.random_range(0..4) {
        let label = rng.random_range(1..4);
        let lo: Vec<usize> = d.iter().map(|&e| rng.random_range(0..e)).collect();
        let hi: Vec<usize> = d.iter().zip(&lo).map(|(&e, &a)| rng.random_range(a..e) + 1).collect();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    l.set(x, y, z, label);
                }
            }
        }
    }
    l
}

/// Text form of a label map: a dims line followed by the labels in
/// row-major order.
pub fn serialize_label_map(l: &LabelMap) -> String {
    let d = l.dims();
    let mut s = format!("dims = [{}, {}, {}]\nlabels = [", d[0], d[1], d[2]);
    for (i, v) in l.data().iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{v}");
    }
    s.push_str("]\n");
    s
}

/// Compares `edt` against the brute-force scan on `cases` random maps and
/// names the first voxel that differs.
pub fn check_distance_transform(
    cases: usize,
    max_extent: usize,
    seed: u64,
    edt: impl Fn(&LabelMap) -> DistanceMap,
) -> OracleOutcome {
    const NAME: &str = "distance-transform";
    let mut rng = RngStream::new(seed, 100);
    let mut voxels = 0;
    for case in 0..cases {
        let l = random_label_map(max_extent, &mut rng);
        let fast = edt(&l);
        let slow = brute_force_distance(&l);
        let d = l.dims();
        for (i, (a, b)) in fast.data.iter().zip(&slow.data).enumerate() {
            if a != b {
                let v = [i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]];
                let summary = format!(
                    "case {case}: voxel ({}, {}, {}) has distance {a}, brute force gives {b}",
                    v[0], v[1], v[2]
                );
                let replay = format!("# {summary}\n{}", serialize_label_map(&l));
                return OracleOutcome::fail(NAME, summary, replay);
            }
        }
        voxels += slow.data.len();
    }
    OracleOutcome::pass(NAME, format!("{cases} maps, {voxels} voxels, all equal"))
}

/// Distance transform with an injected off-by-one at the first interior
/// voxel. Exists to show that the oracle catches such faults.
pub fn off_by_one_distance(l: &LabelMap) -> DistanceMap {
    let mut d = distance_to_boundary(l);
    if let Some(v) = d.data.iter_mut().find(|v| **v > 0.0) {
        *v += 1.0;
    }
    d
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

/// Graph label loss against pair enumeration for every labelling of up to
/// 4 × 4 pixels over labels {0, 1, 2}.
pub fn check_label_loss(seed: u64) -> OracleOutcome {
    const NAME: &str = "label-loss";
    let mut rng = RngStream::new(seed, 101);
    let tau = LossWeights::default().tau;
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n1 in 1..=4usize {
        for n2 in 1..=4usize {
            let total = 3usize.pow((n1 + n2) as u32);
            for code in 0..total {
                let mut c = code;
                let mut digit = || {
                    let v = (c % 3) as u8;
                    c /= 3;
                    v
                };
                let l1: Vec<u8> = (0..n1).map(|_| digit()).collect();
                let l2: Vec<u8> = (0..n2).map(|_| digit()).collect();
                let z1 = normal(n1, 4, &mut rng);
                let z2 = normal(n2, 4, &mut rng);
                let g = Graph::new();
                let a = build_relation_matrix(&l1, &l2);
                let fast = label_loss(g.constant(z1.clone()), g.constant(z2.clone()), &a, tau)
                    .expect("shapes agree")
                    .map(|v| v.item());
                let slow = label_loss_enumerated(&rows_of(&z1), &rows_of(&z2), &l1, &l2, tau);
                let err = match (fast, slow) {
                    (Some(f), Some(s)) => (f - s).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                worst = worst.max(err);
                cases += 1;
                if err >= 1e-12 {
                    let summary = format!("labels {l1:?} x {l2:?}: graph {fast:?}, enumeration {slow:?}");
                    let replay = format!(
                        "# {summary}\ntau = {tau}\nlabels1 = {l1:?}\nlabels2 = {l2:?}\nz1 = {:?}\nz2 = {:?}\n",
                        z1.data(),
                        z2.data()
                    );
                    return OracleOutcome::fail(NAME, summary, replay);
                }
            }
        }
    }
    OracleOutcome::pass(NAME, format!("{cases} labellings, max abs error {worst:.2e}"))
}

/// Hand-evaluable 2×2 cross-correlation cases as `(z, z', [(numerator,
/// norm product)])`; the expected entry is `numerator / (norms + δ)`.
pub fn correlation_cases() -> Vec<([f64; 4], [f64; 4], [(f64, f64); 4])> {
    let r10 = 10f64.sqrt();
    let r20 = 20f64.sqrt();
    vec![
        ([1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0], [(1.0, 1.0), (0.0, 1.0), (0.0, 1.0), (1.0, 1.0)]),
        ([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 1.0], [(1.0, r10), (3.0, r10), (2.0, r20), (4.0, r20)]),
        (
            [1.0, 2.0, 3.0, 4.0],
            [-1.0, -2.0, -3.0, -4.0],
            [(-10.0, 10.0), (-14.0, r10 * r20), (-14.0, r10 * r20), (-20.0, 20.0)],
        ),
        ([1.0, 1.0, 1.0, -1.0], [1.0, 1.0, 1.0, -1.0], [(2.0, 2.0), (0.0, 2.0), (0.0, 2.0), (2.0, 2.0)]),
    ]
}

pub fn check_cross_correlation() -> OracleOutcome {
    const NAME: &str = "cross-correlation";
    let mut worst = 0.0f64;
    for (z, zp, parts) in correlation_cases() {
        let want: Vec<f64> = parts.iter().map(|(n, d)| n / (d + STABILITY_EPS)).collect();
        let g = Graph::new();
        let c = cross_correlation(
            g.constant(Tensor::new(vec![2, 2], z.to_vec()).expect("2x2")),
            g.constant(Tensor::new(vec![2, 2], zp.to_vec()).expect("2x2")),
            false,
        )
        .expect("shapes agree");
        for (got, w) in c.value().data().iter().zip(&want) {
            let err = (got - w).abs();
            worst = worst.max(err);
            if err >= 1e-12 {
                let summary = format!("z = {z:?}, z' = {zp:?}: got {:?}, expected {want:?}", c.value().data());
                return OracleOutcome::fail(NAME, summary.clone(), summary);
            }
        }
    }
    OracleOutcome::pass(NAME, format!("{} cases, max abs error {worst:.2e}", correlation_cases().len()))
}

/// Location of the maximum of the default weight curve on a grid of step
/// `step` over `[0, 4μ]`.
pub fn weight_argmax(step: f64) -> f64 {
    let n = (4.0 * DEFAULT_MU / step) as usize;
    (0..=n)
        .map(|i| i as f64 * step)
        .max_by(|a, b| weight(*a, DEFAULT_MU, DEFAULT_EPSILON).total_cmp(&weight(*b, DEFAULT_MU, DEFAULT_EPSILON)))
        .expect("grid is non-empty")
}

pub fn check_weight_map() -> OracleOutcome {
    const NAME: &str = "weight-map";
    let (mu, eps) = (DEFAULT_MU, DEFAULT_EPSILON);
    let closed = |d: f64| 0.5 * d.sqrt() * (-d / mu).exp() + eps;
    let at0 = weight(0.0, mu, eps);
    let at1 = weight(1.0, mu, eps);
    let at16 = weight(16.0, mu, eps);
    let peak = weight_argmax(1e-3);
    let ok = at0 == eps
        && (at1 - closed(1.0)).abs() < 1e-6
        && (at16 - closed(16.0)).abs() < 1e-6
        && (at1 - 0.49125).abs() < 5e-6
        && (at16 - 0.32068).abs() < 1e-5
        && (peak - mu / 2.0).abs() < 1e-3;
    let summary = format!("W(0) = {at0}, W(1) = {at1:.7}, W(16) = {at16:.7}, argmax {peak:.3}");
    if ok {
        OracleOutcome::pass(NAME, summary)
    } else {
        OracleOutcome::fail(NAME, summary.clone(), summary)
    }
}

/// Single-draw selection frequencies against normalised weights, as the L1
/// distance per class.
pub fn sampling_l1(draws: usize, seed: u64) -> Vec<(u8, f64)> {
    let l = LabelMap::new([4, 4, 1], vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 2, 2]).expect("16 labels");
    let weights: Vec<f64> = (0..16).map(|i| 0.05 + 0.1 * (i % 5) as f64 + 0.02 * i as f64).collect();
    let w = WeightMap {
        dims: l.dims(),
        data: weights.clone(),
        mu: DEFAULT_MU,
        epsilon: DEFAULT_EPSILON,
    };
    let mut counts = vec![0usize; 16];
    let mut rng = RngStream::new(seed, 102);
    for _ in 0..draws {
        for c in sample_pixels(&w, &l, 1, &mut rng).classes {
            let p = c.coords[0];
            counts[p[0] * 4 + p[1] + p[2]] += 1;
        }
    }
    l.classes()
        .into_iter()
        .map(|c| {
            let members: Vec<usize> = (0..16).filter(|&i| l.data()[i] == c).collect();
            let total: f64 = members.iter().map(|&i| weights[i]).sum();
            let l1 = members
                .iter()
                .map(|&i| (counts[i] as f64 / draws as f64 - weights[i] / total).abs())
                .sum();
            (c, l1)
        })
        .collect()
}

pub fn check_sampling_frequencies(draws: usize, seed: u64) -> OracleOutcome {
    const NAME: &str = "sampling";
    let l1 = sampling_l1(draws, seed);
    let worst = l1.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    let summary = format!(
        "{draws} draws, per-class L1 {}",
        l1.iter().map(|(c, v)| format!("{c}: {v:.4}")).collect::<Vec<_>>().join(", ")
    );
    if worst < 0.05 {
        OracleOutcome::pass(NAME, summary)
    } else {
        OracleOutcome::fail(NAME, summary.clone(), format!("seed = {seed}\ndraws = {draws}\n# {summary}\n"))
    }
}

/// Share of auxiliary draws that reuse the anchor volume.
pub fn auxiliary_same_fraction(draws: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 103);
    let n = 6;
    let same = (0..draws)
        .filter(|_| {
            let anchor = rng.random_range(0..n);
            auxiliary_source(anchor, n, 0.5, &mut rng) == anchor
        })
        .count();
    same as f64 / draws as f64
}

pub fn check_auxiliary_ratio(draws: usize, seed: u64) -> OracleOutcome {
    const NAME: &str = "auxiliary-ratio";
    let f = auxiliary_same_fraction(draws, seed);
    let summary = format!("{draws} draws, same-volume fraction {f:.4}");
    if (f - 0.5).abs() <= 0.02 {
        OracleOutcome::pass(NAME, summary)
    } else {
        OracleOutcome::fail(NAME, summary.clone(), format!("seed = {seed}\ndraws = {draws}\n# {summary}\n"))
    }
}

/// Largest change of the label loss when rows that take part only in
/// excluded pairs are replaced with fresh random values.
pub fn exclusion_change(trials: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 104);
    let tau = LossWeights::default().tau;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n1 = rng.random_range(2..=8);
        let n2 = rng.random_range(2..=8);
        let mut l1: Vec<u8> = (0..n1).map(|_| rng.random_range(0..3)).collect();
        let mut l2: Vec<u8> = (0..n2).map(|_| rng.random_range(0..3)).collect();
        l1[0] = 1;
        l2[0] = 1;
        l1[1] = 0;
        if l2.iter().all(|&v| v != 0) {
            l2[1] = 0;
        }
        let a = build_relation_matrix(&l1, &l2);
        let only_excluded = |row: bool, i: usize| {
            let n = if row { a.cols() } else { a.rows() };
            (0..n).all(|j| {
                let r = if row { a.get(i, j) } else { a.get(j, i) };
                r == Relation::Excluded
            })
        };
        let z1 = normal(n1, 5, &mut rng);
        let z2 = normal(n2, 5, &mut rng);
        let mut y1 = z1.clone();
        let mut y2 = z2.clone();
        for i in 0..n1 {
            if only_excluded(true, i) {
                for v in &mut y1.data_mut()[i * 5..(i + 1) * 5] {
                    *v = rng.sample::<f64, _>(StandardNormal) * 3.0;
                }
            }
        }
        for j in 0..n2 {
            if only_excluded(false, j) {
                for v in &mut y2.data_mut()[j * 5..(j + 1) * 5] {
                    *v = rng.sample::<f64, _>(StandardNormal) * 3.0;
                }
            }
        }
        let eval = |x1: &Tensor, x2: &Tensor| {
            let g = Graph::new();
            label_loss(g.constant(x1.clone()), g.constant(x2.clone()), &a, tau)
                .expect("shapes agree")
                .map_or(f64::NAN, |v| v.item())
        };
        worst = worst.max((eval(&z1, &z2) - eval(&y1, &y2)).abs());
    }
    worst
}

pub fn check_exclusion(seed: u64) -> OracleOutcome {
    const NAME: &str = "exclusion";
    let change = exclusion_change(500, seed);
    let summary = format!("500 trials, largest change {change:e}");
    if change == 0.0 {
        OracleOutcome::pass(NAME, summary)
    } else {
        OracleOutcome::fail(NAME, summary.clone(), format!("seed = {seed}\n# {summary}\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_oracle_passes() {
        for name in ORACLE_NAMES {
            let o = run_oracle(name, 0).unwrap();
            assert!(o.passed, "{name}: {}", o.summary);
        }
        assert!(run_oracle("nope", 0).is_none());
    }

    #[test]
    fn mutation_is_caught_and_named() {
        let o = check_distance_transform(20, 8, 0, off_by_one_distance);
        assert!(!o.passed);
        assert!(o.summary.contains("voxel ("), "{}", o.summary);
        assert!(o.failure.unwrap().contains("labels = ["));
    }

    #[test]
    fn small_grad_suite_passes() {
        for row in grad_check_suite(2, 1).unwrap() {
            assert!(row.passed(), "{row:?}");
        }
    }
}

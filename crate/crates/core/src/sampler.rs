//! Boundary-distance weight map and budgeted per-class pixel sampling for
//! the label-consistency loss.
//!
//! A voxel is a *boundary* voxel of its label when one of its 6-neighbours
//! carries a different label or when it lies on a face of the grid. The
//! distance map holds, for every voxel, the Euclidean distance (voxel units)
//! to the nearest boundary voxel of its own label; boundary voxels get 0.
//! The sampling weight is `W = ½·√D·exp(−D/μ) + ε`.

use rand::Rng;

use crate::data::{Dims, LabelMap};
use crate::rng::RngStream;

pub const DEFAULT_MU: f64 = 8.0;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub dims: Dims,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub dims: Dims,
    pub data: Vec<f64>,
    pub mu: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSample {
    pub label: u8,
    pub coords: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSample {
    pub classes: Vec<ClassSample>,
    pub budget: usize,
}

impl PixelSample {
    /// Linear voxel indices of all sampled coordinates, class by class.
    pub fn linear_indices(&self, dims: Dims) -> Vec<usize> {
        self.classes
            .iter()
            .flat_map(|c| c.coords.iter().map(move |p| (p[0] * dims[1] + p[1]) * dims[2] + p[2]))
            .collect()
    }

    /// Label of each entry of [`Self::linear_indices`].
    pub fn labels(&self) -> Vec<u8> {
        self.classes
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.label, c.coords.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.coords.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn is_boundary(s: &LabelMap, x: usize, y: usize, z: usize) -> bool {
    let d = s.dims();
    if x == 0 || y == 0 || z == 0 || x + 1 == d[0] || y + 1 == d[1] || z + 1 == d[2] {
        return true;
    }
    let v = s.get(x, y, z);
    s.get(x - 1, y, z) != v
        || s.get(x + 1, y, z) != v
        || s.get(x, y - 1, z) != v
        || s.get(x, y + 1, z) != v
        || s.get(x, y, z - 1) != v
        || s.get(x, y, z + 1) != v
}

/// One pass of the lower-envelope squared distance transform along a line.
/// Infinite entries contribute no parabola.
fn edt_line(f: &[f64], v: &mut [usize], zb: &mut [f64], out: &mut [f64]) {
    let sq = |q: usize| (q * q) as f64;
    let mut k: isize = -1;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while k >= 0 {
            let p = v[k as usize];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
            if s <= zb[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k as usize] = q;
        zb[k as usize] = if k == 0 { f64::NEG_INFINITY } else { s };
        zb[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zb[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance to the nearest `seed` voxel, by three
/// separable lower-envelope passes.
fn squared_edt(dims: Dims, seed: &[bool]) -> Vec<f64> {
    let mut g: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let maxn = *dims.iter().max().unwrap_or(&1);
    let (mut f, mut out) = (vec![0.0; maxn], vec![0.0; maxn]);
    let (mut v, mut zb) = (vec![0usize; maxn], vec![0.0; maxn + 1]);
    let stride = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * stride[others[0]] + j * stride[others[1]];
                for q in 0..n {
                    f[q] = g[base + q * stride[axis]];
                }
                edt_line(&f[..n], &mut v[..n], &mut zb[..n + 1], &mut out[..n]);
                for q in 0..n {
                    g[base + q * stride[axis]] = out[q];
                }
            }
        }
    }
    g
}

/// Distance of every voxel to the nearest boundary voxel of its own label.
pub fn distance_to_boundary(s: &LabelMap) -> DistanceMap {
    let dims = s.dims();
    let n = s.data().len();
    let mut result = vec![0.0; n];
    let mut boundary = vec![false; n];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                boundary[(x * dims[1] + y) * dims[2] + z] = is_boundary(s, x, y, z);
            }
        }
    }
    for label in s.classes() {
        let seed: Vec<bool> = s
            .data()
            .iter()
            .zip(&boundary)
            .map(|(&l, &b)| b && l == label)
            .collect();
        let sq = squared_edt(dims, &seed);
        for (i, &l) in s.data().iter().enumerate() {
            if l == label {
                result[i] = sq[i].sqrt();
            }
        }
    }
    DistanceMap { dims, data: result }
}

/// `½·√D·exp(−D/μ) + ε` for a single distance.
pub fn weight(d: f64, mu: f64, epsilon: f64) -> f64 {
    0.5 * d.sqrt() * (-d / mu).exp() + epsilon
}

pub fn weight_map(d: &DistanceMap, mu: f64, epsilon: f64) -> WeightMap {
    assert!(mu > 0.0 && epsilon >= 0.0, "weight map needs mu > 0 and epsilon >= 0");
    WeightMap {
        dims: d.dims,
        data: d.data.iter().map(|&v| weight(v, mu, epsilon)).collect(),
        mu,
        epsilon,
    }
}

/// Draws up to `budget` voxels per class present in `s`, without
/// replacement, with probability proportional to `w` within the class.
///
/// Uses exponential keys `ln(u)/w`: the `budget` largest keys form a
/// sequential weighted draw without replacement.
pub fn sample_pixels(w: &WeightMap, s: &LabelMap, budget: usize, rng: &mut RngStream) -> PixelSample {
    assert!(budget >= 1, "sampling budget must be at least 1");
    assert_eq!(w.dims, s.dims(), "weight map and label map disagree in shape");
    let dims = s.dims();
    let coord = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
    let mut classes = Vec::new();
    for label in s.classes() {
        let members: Vec<usize> = (0..s.data().len()).filter(|&i| s.data()[i] == label).collect();
        let chosen: Vec<usize> = if members.len() <= budget {
            members
        } else {
            let mut keyed: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| {
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    (u.ln() / w.data[i], i)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut top: Vec<usize> = keyed[..budget].iter().map(|&(_, i)| i).collect();
            top.sort_unstable();
            top
        };
        classes.push(ClassSample {
            label,
            coords: chosen.into_iter().map(coord).collect(),
        });
    }
    PixelSample { classes, budget }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::brute_force_distance;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn map_from(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u8) -> LabelMap {
        let mut l = LabelMap::zeros(dims);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    l.set(x, y, z, f(x, y, z));
                }
            }
        }
        l
    }

    #[test]
    fn uniform_cube_center() {
        let d = distance_to_boundary(&LabelMap::zeros([5, 5, 5]));
        assert_eq!(d.data[(2 * 5 + 2) * 5 + 2], 2.0);
        assert_eq!(d.data[0], 0.0);
    }

    #[test]
    fn neighbour_of_other_label_is_zero() {
        let l = map_from([7, 7, 7], |x, _, _| u8::from(x >= 4));
        let d = distance_to_boundary(&l);
        assert_eq!(d.data[(3 * 7 + 3) * 7 + 3], 0.0);
        assert_eq!(d.data[(4 * 7 + 3) * 7 + 3], 0.0);
        assert_eq!(d.data[(2 * 7 + 3) * 7 + 3], 1.0);
    }

    #[test]
    fn run_along_one_axis_matches_oracle() {
        let l = map_from([1, 1, 4], |_, _, z| u8::from(z == 3));
        assert_eq!(distance_to_boundary(&l), brute_force_distance(&l));
    }

    #[test]
    fn weight_values() {
        assert_eq!(weight(0.0, 8.0, 0.05), 0.05);
        assert_abs_diff_eq!(weight(1.0, 8.0, 0.05), 0.5 * (-0.125f64).exp() + 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(weight(1.0, 8.0, 0.05), 0.49125, epsilon = 1e-5);
        assert_abs_diff_eq!(weight(16.0, 8.0, 0.05), 0.32068, epsilon = 1e-5);
        assert!(weight(1.0, 8.0, 0.05) > weight(16.0, 8.0, 0.05));
    }

    #[test]
    fn small_class_fully_selected() {
        let l = map_from([6, 6, 6], |x, y, z| u8::from(x == 2 && y == 2 && z < 3));
        let w = weight_map(&distance_to_boundary(&l), 8.0, 0.05);
        let s = sample_pixels(&w, &l, 4, &mut RngStream::new(1, 0));
        let c = s.classes.iter().find(|c| c.label == 1).unwrap();
        assert_eq!(c.coords, vec![[2, 2, 0], [2, 2, 1], [2, 2, 2]]);
        assert_eq!(s.classes.iter().find(|c| c.label == 0).unwrap().coords.len(), 4);
    }

    #[test]
    fn weighted_pair_ratio() {
        let l = map_from([1, 1, 2], |_, _, _| 1);
        let w = WeightMap {
            dims: [1, 1, 2],
            data: vec![0.05, 0.45],
            mu: 8.0,
            epsilon: 0.05,
        };
        let mut rng = RngStream::new(3, 0);
        let trials = 100_000;
        let first = (0..trials)
            .filter(|_| sample_pixels(&w, &l, 1, &mut rng).classes[0].coords[0] == [0, 0, 0])
            .count();
        let frac = first as f64 / trials as f64;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
    }

    #[test]
    fn uniform_weights_sample_uniformly() {
        let l = LabelMap::zeros([2, 2, 5]);
        let w = WeightMap {
            dims: [2, 2, 5],
            data: vec![0.3; 20],
            mu: 8.0,
            epsilon: 0.05,
        };
        let mut rng = RngStream::new(5, 0);
        let mut counts = [0usize; 20];
        let trials = 100_000;
        for _ in 0..trials {
            for p in &sample_pixels(&w, &l, 3, &mut rng).classes[0].coords {
                counts[(p[0] * 2 + p[1]) * 5 + p[2]] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let l1: f64 = counts.iter().map(|&c| (c as f64 / total as f64 - 0.05).abs()).sum();
        assert!(l1 < 0.05, "{l1}");
    }

    #[test]
    fn weight_peak_at_half_mu() {
        let grid: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.005).collect();
        let best = grid
            .iter()
            .cloned()
            .max_by(|a, b| weight(*a, 8.0, 0.05).total_cmp(&weight(*b, 8.0, 0.05)))
            .unwrap();
        assert_abs_diff_eq!(best, 4.0, epsilon = 0.005);
        for pair in grid.windows(2) {
            let (a, b) = (weight(pair[0], 8.0, 0.05), weight(pair[1], 8.0, 0.05));
            if pair[1] <= 4.0 {
                assert!(b > a);
            } else if pair[0] >= 4.0 {
                assert!(b < a);
            }
        }
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(
            dims in prop::array::uniform3(1usize..=8),
            seed in any::<u64>(),
            classes in 1u8..4,
        ) {
            let mut rng = RngStream::new(seed, 0);
            let l = map_from(dims, |_, _, _| rng.random_range(0..classes));
            prop_assert_eq!(distance_to_boundary(&l), brute_force_distance(&l));
        }

        #[test]
        fn samples_are_unique_and_correctly_labelled(seed in any::<u64>(), budget in 1usize..20) {
            let mut rng = RngStream::new(seed, 1);
            let l = map_from([6, 5, 4], |x, y, _| if x > 2 { 1 } else if y > 3 { 2 } else { 0 });
            let w = weight_map(&distance_to_boundary(&l), 8.0, 0.05);
            let s = sample_pixels(&w, &l, budget, &mut rng);
            for c in &s.classes {
                prop_assert!(c.coords.len() <= budget);
                let mut seen = std::collections::HashSet::new();
                for p in &c.coords {
                    prop_assert!(seen.insert(*p));
                    prop_assert_eq!(l.get(p[0], p[1], p[2]), c.label);
                }
            }
        }

        #[test]
        fn weights_bounded(d in 0.0f64..1000.0) {
            let v = weight(d, 8.0, 0.05);
            prop_assert!(v >= 0.05);
            prop_assert!(v <= 0.5 * 4f64.sqrt() * (-0.5f64).exp() + 0.05 + 1e-15);
        }
    }
}

//! Slow reference implementations used to cross-check the fast paths.

use crate::data::LabelMap;
use crate::sampler::{is_boundary, DistanceMap};

/// Exhaustive distance to the nearest same-label boundary voxel.
pub fn brute_force_distance(s: &LabelMap) -> DistanceMap {
    let d = s.dims();
    let mut seeds: Vec<([usize; 3], u8)> = Vec::new();
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                if is_boundary(s, x, y, z) {
                    seeds.push(([x, y, z], s.get(x, y, z)));
                }
            }
        }
    }
    let mut data = Vec::with_capacity(s.data().len());
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let label = s.get(x, y, z);
                let best = seeds
                    .iter()
                    .filter(|(_, l)| *l == label)
                    .map(|(p, _)| {
                        let dx = p[0] as i64 - x as i64;
                        let dy = p[1] as i64 - y as i64;
                        let dz = p[2] as i64 - z as i64;
                        dx * dx + dy * dy + dz * dz
                    })
                    .min()
                    .expect("every label has a boundary voxel on a finite grid");
                data.push((best as f64).sqrt());
            }
        }
    }
    DistanceMap { dims: d, data }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + crate::tensor::STABILITY_EPS)
}

/// Label loss by explicit enumeration of every cross-patch pair, with no
/// matrix algebra and no max-subtraction. `None` when no pair is positive.
pub fn label_loss_enumerated(z1: &[Vec<f64>], z2: &[Vec<f64>], l1: &[u8], l2: &[u8], tau: f64) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut positives = 0;
    for (i, a) in z1.iter().enumerate() {
        for (j, b) in z2.iter().enumerate() {
            if l1[i] == 0 && l2[j] == 0 {
                continue;
            }
            let e = (cosine(a, b) / tau).exp();
            den += e;
            if l1[i] == l2[j] {
                num += e;
                positives += 1;
            }
        }
    }
    (positives > 0).then(|| -(num / den).ln())
}

//! Boundary distances, the sampling weight curve and a budgeted draw on a
//! small two-organ label map.

use mixcl::data::LabelMap;
use mixcl::rng::RngStream;
use mixcl::sampler::{distance_to_boundary, sample_pixels, weight, weight_map, DEFAULT_EPSILON, DEFAULT_MU};

fn main() {
    let mut l = LabelMap::zeros([24, 24, 24]);
    for x in 0..24 {
        for y in 0..24 {
            for z in 0..24 {
                let r2 = |c: [f64; 3]| (0..3).map(|a| ([x, y, z][a] as f64 - c[a]).powi(2)).sum::<f64>();
                if r2([8.0, 12.0, 12.0]) < 36.0 {
                    l.set(x, y, z, 1);
                } else if r2([17.0, 12.0, 12.0]) < 16.0 {
                    l.set(x, y, z, 2);
                }
            }
        }
    }
    for d in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
        println!("W({d:>4}) = {:.5}", weight(d, DEFAULT_MU, DEFAULT_EPSILON));
    }
    let dist = distance_to_boundary(&l);
    let w = weight_map(&dist, DEFAULT_MU, DEFAULT_EPSILON);
    let s = sample_pixels(&w, &l, 16, &mut RngStream::new(0, 0));
    for c in &s.classes {
        let mean_d: f64 = c
            .coords
            .iter()
            .map(|p| dist.data[(p[0] * 24 + p[1]) * 24 + p[2]])
            .sum::<f64>()
            / c.coords.len() as f64;
        println!("label {}: {} of {} voxels drawn, mean boundary distance {mean_d:.2}", c.label, c.coords.len(), l.count(c.label));
    }
}

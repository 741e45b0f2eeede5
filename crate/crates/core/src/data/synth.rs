//! Synthetic stand-in for a pooled multi-dataset CT corpus.
//!
//! Each case is smooth low-frequency texture plus soft-edged ellipsoidal
//! "organs". A dataset labels only its own organ classes; organ types that
//! belong to other datasets may still appear in its images, unlabeled.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{io, linear_index, Case, DataError, DatasetManifest, Dims, LabelMap, Result, Volume};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub name: String,
    /// Intensity offset over the background texture, in HU.
    pub intensity: f64,
    /// Semi-axis range in voxels.
    pub radius: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub volumes: usize,
    pub classes: Vec<OrganSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub extent: Dims,
    pub spacing: [f64; 3],
    pub patch_extent: usize,
    /// Peak amplitude of the background texture (HU).
    pub texture_amplitude: f64,
    /// Coarse control points per axis of the texture.
    pub texture_grid: usize,
    pub noise_sigma: f64,
    /// Edge softness relative to the organ radius.
    pub softness: f64,
    /// Chance that each foreign organ type appears (unlabeled) in a case.
    pub distractor_probability: f64,
    pub datasets: Vec<DatasetSpec>,
}

fn organ(name: &str, intensity: f64, lo: f64, hi: f64) -> OrganSpec {
    OrganSpec {
        name: name.into(),
        intensity,
        radius: [lo, hi],
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            extent: [32, 32, 32],
            spacing: super::DEFAULT_SPACING,
            patch_extent: 16,
            texture_amplitude: 40.0,
            texture_grid: 6,
            noise_sigma: 15.0,
            softness: 0.08,
            distractor_probability: 0.5,
            datasets: vec![
                DatasetSpec {
                    id: "bright".into(),
                    volumes: 6,
                    classes: vec![organ("organ_bright", 120.0, 4.0, 8.0)],
                },
                DatasetSpec {
                    id: "mixed".into(),
                    volumes: 6,
                    classes: vec![organ("organ_dark", -90.0, 4.0, 7.0), organ("organ_small", 60.0, 2.5, 4.0)],
                },
                DatasetSpec {
                    id: "target".into(),
                    volumes: 10,
                    classes: vec![organ("organ_target", 70.0, 4.0, 8.0)],
                },
            ],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e < 2 * self.patch_extent) {
            return Err(DataError::ExtentTooSmall {
                extent: self.extent,
                patch: self.patch_extent,
            });
        }
        if self.datasets.len() < 2 {
            return Err(DataError::Invariant("a corpus needs at least two datasets".into()));
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for d in &self.datasets {
            if d.classes.is_empty() || d.classes.len() > 255 {
                return Err(DataError::Invariant(format!("dataset '{}' needs 1..=255 classes", d.id)));
            }
            for c in &d.classes {
                if c.name == "background" {
                    return Err(DataError::Invariant(format!("dataset '{}' redefines background", d.id)));
                }
                if let Some(first) = owner.insert(&c.name, &d.id) {
                    return Err(DataError::OverlappingVocabulary {
                        label: c.name.clone(),
                        first: first.into(),
                        second: d.id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.id == id)
    }
}

/// One painted ellipsoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub class_name: String,
    /// Label written for it (0 for foreign distractors).
    pub label: u8,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaseLayout {
    pub placements: Vec<Placement>,
}

fn smooth_texture(cfg: &CorpusConfig, rng: &mut RngStream) -> Vec<f64> {
    let g = cfg.texture_grid.max(2);
    let coarse: Vec<f64> = (0..g * g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = cfg.extent;
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let c = i as f64 * (g - 1) as f64 / (n.max(2) - 1) as f64;
                let lo = (c.floor() as usize).min(g - 2);
                (lo, lo + 1, c - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(e[0]), axis(e[1]), axis(e[2]));
    let at = |x, y, z| coarse[(x * g + y) * g + z];
    let mut out = Vec::with_capacity(e.iter().product());
    for &(x0, x1, tx) in &ax {
        for &(y0, y1, ty) in &ay {
            for &(z0, z1, tz) in &az {
                let mut acc = 0.0;
                for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                    for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                        for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                            acc += wx * wy * wz * at(xi, yi, zi);
                        }
                    }
                }
                out.push(cfg.texture_amplitude * acc);
            }
        }
    }
    out
}

fn place(spec: &OrganSpec, label: u8, extent: Dims, rng: &mut RngStream) -> Placement {
    let radii = [0, 1, 2].map(|_| rng.random_range(spec.radius[0]..=spec.radius[1]));
    let margin = spec.radius[1] + 1.0;
    let center = [0, 1, 2].map(|a| {
        let hi = (extent[a] as f64 - 1.0 - margin).max(margin);
        rng.random_range(margin..=hi)
    });
    Placement {
        class_name: spec.name.clone(),
        label,
        center,
        radii,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    }
}

fn paint(p: &Placement, intensity: f64, cfg: &CorpusConfig, image: &mut [f64], labels: &mut LabelMap) {
    let e = cfg.extent;
    let (s, c) = p.angle.sin_cos();
    let reach = p.radii.iter().cloned().fold(0.0, f64::max) * (1.0 + 6.0 * cfg.softness) + 1.0;
    let range = |a: usize| {
        let lo = (p.center[a] - reach).floor().max(0.0) as usize;
        let hi = ((p.center[a] + reach).ceil() as usize).min(e[a] - 1);
        lo..=hi
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let d = [x as f64 - p.center[0], y as f64 - p.center[1], z as f64 - p.center[2]];
                let u = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
                let r = (0..3).map(|a| (u[a] / p.radii[a]).powi(2)).sum::<f64>().sqrt();
                let soft = 1.0 / (1.0 + ((r - 1.0) / cfg.softness).exp());
                image[linear_index(e, x, y, z)] += intensity * soft;
                if r <= 1.0 && p.label != 0 {
                    labels.set(x, y, z, p.label);
                }
            }
        }
    }
}

/// Generates case `case` of dataset `dataset` (index into `cfg.datasets`).
/// Pure in `(cfg, seed, dataset, case)`.
pub fn synthesize_case(
    cfg: &CorpusConfig,
    seed: u64,
    dataset: usize,
    case: usize,
) -> Result<(Volume, LabelMap, CaseLayout)> {
    let spec = &cfg.datasets[dataset];
    let mut rng = RngStream::keyed(seed, dataset as u64 + 1, case as u64);
    let mut image = smooth_texture(cfg, &mut rng);
    let mut labels = LabelMap::zeros(cfg.extent);
    let mut layout = CaseLayout::default();

    // foreign organ types first, unlabeled
    for (j, other) in cfg.datasets.iter().enumerate() {
        if j == dataset {
            continue;
        }
        for class in &other.classes {
            if rng.random_bool(cfg.distractor_probability) {
                let p = place(class, 0, cfg.extent, &mut rng);
                let gain = class.intensity * rng.random_range(0.9..1.1);
                paint(&p, gain, cfg, &mut image, &mut labels);
                layout.placements.push(p);
            }
        }
    }
    for (k, class) in spec.classes.iter().enumerate() {
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            let p = place(class, (k + 1) as u8, cfg.extent, &mut rng);
            let gain = class.intensity * rng.random_range(0.9..1.1);
            paint(&p, gain, cfg, &mut image, &mut labels);
            layout.placements.push(p);
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| DataError::Invariant(e.to_string()))?;
    let data = image.iter().map(|&v| (v + noise.sample(&mut rng)) as f32).collect();
    let volume = Volume::new(cfg.extent, cfg.spacing, [0.0; 3], data)?;
    Ok((volume, labels, layout))
}

/// Writes every dataset of `cfg` under `out_dir/<id>/` with a
/// `manifest.toml` each, and returns the manifests.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut manifests = Vec::with_capacity(cfg.datasets.len());
    for (di, spec) in cfg.datasets.iter().enumerate() {
        let dir = out_dir.join(&spec.id);
        fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut vocab = vec!["background".to_string()];
        vocab.extend(spec.classes.iter().map(|c| c.name.clone()));
        let mut cases = Vec::with_capacity(spec.volumes);
        for ci in 0..spec.volumes {
            let (v, l, _) = synthesize_case(cfg, seed, di, ci)?;
            let case = Case {
                volume: format!("case_{ci:03}_img.mxv").into(),
                labelmap: format!("case_{ci:03}_seg.mxv").into(),
            };
            io::save_volume(&v, None, &[], dir.join(&case.volume))?;
            io::save_labelmap(&l, v.spacing(), v.origin(), &vocab, dir.join(&case.labelmap))?;
            cases.push(case);
        }
        let manifest = DatasetManifest {
            id: spec.id.clone(),
            seed,
            labels: vocab,
            cases,
            root: dir.clone(),
        };
        manifest.save(dir.join("manifest.toml"))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            extent: [32, 32, 32],
            datasets: vec![
                DatasetSpec {
                    id: "a".into(),
                    volumes: 3,
                    classes: vec![organ("sphere_x", 120.0, 3.0, 5.0)],
                },
                DatasetSpec {
                    id: "b".into(),
                    volumes: 3,
                    classes: vec![organ("sphere_y", -80.0, 3.0, 5.0)],
                },
            ],
            distractor_probability: 1.0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn overlapping_vocabularies_rejected() {
        let mut cfg = small();
        cfg.datasets[1].classes[0].name = "sphere_x".into();
        assert!(matches!(cfg.validate(), Err(DataError::OverlappingVocabulary { .. })));
    }

    #[test]
    fn small_extent_rejected() {
        let mut cfg = small();
        cfg.extent = [31, 40, 40];
        assert!(matches!(cfg.validate(), Err(DataError::ExtentTooSmall { .. })));
    }

    #[test]
    fn single_class_maps_are_binary() {
        let cfg = small();
        for ci in 0..3 {
            let (_, l, _) = synthesize_case(&cfg, 7, 0, ci).unwrap();
            assert_eq!(l.classes(), vec![0, 1]);
        }
    }

    #[test]
    fn foreign_organs_present_but_unlabeled() {
        let cfg = small();
        for ci in 0..3 {
            let (v, l, layout) = synthesize_case(&cfg, 7, 0, ci).unwrap();
            let foreign: Vec<_> = layout.placements.iter().filter(|p| p.class_name == "sphere_y").collect();
            assert!(!foreign.is_empty());
            for p in foreign {
                assert_eq!(p.label, 0);
                let c = p.center.map(|x| x.round() as usize);
                // dark structure in the image; label map only knows sphere_x
                let mut mean = 0.0;
                for d in 0..27 {
                    mean += v.get(c[0] + d / 9 - 1, c[1] + (d / 3) % 3 - 1, c[2] + d % 3 - 1) / 27.0;
                }
                assert!(mean < -15.0, "{mean}");
                assert_ne!(l.get(c[0], c[1], c[2]), 2);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = synthesize_case(&cfg, 11, 1, 2).unwrap();
        let b = synthesize_case(&cfg, 11, 1, 2).unwrap();
        assert_eq!(a, b);
        let c = synthesize_case(&cfg, 12, 1, 2).unwrap();
        assert_ne!(a.0, c.0);
    }
}

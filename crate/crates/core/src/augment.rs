//! Patch extraction, paired views for pre-training, auxiliary-patch
//! selection and fine-tuning augmentation.
//!
//! Every operation is a pure function of its inputs and the [`RngStream`]
//! it is handed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, prepare_case, DataError, DatasetManifest, Dims, LabelMap, Volume};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A cropped image/label pair together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Shape `[H, W, D]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub dataset: String,
    pub volume: usize,
    pub offset: [usize; 3],
}

impl Patch {
    pub fn new(image: Tensor, labels: LabelMap) -> data::Result<Self> {
        if image.shape() != labels.dims() {
            return Err(DataError::Invariant(format!(
                "patch image shape {:?} differs from label shape {:?}",
                image.shape(),
                labels.dims()
            )));
        }
        Ok(Self {
            image,
            labels,
            dataset: String::new(),
            volume: 0,
            offset: [0; 3],
        })
    }

    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    fn with_image(&self, image: Vec<f64>) -> Patch {
        Patch {
            image: Tensor::from_parts(self.image.shape().to_vec(), image),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub affine_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub max_translation: f64,
    pub elastic_prob: f64,
    pub elastic_grid: usize,
    pub elastic_max: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            affine_prob: 0.5,
            max_rotation_deg: 10.0,
            scale_range: [0.9, 1.1],
            max_translation: 2.0,
            elastic_prob: 0.5,
            elastic_grid: 4,
            elastic_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    pub shift_prob: f64,
    pub shift_max: f64,
    pub gamma_prob: f64,
    pub gamma_range: [f64; 2],
    pub smooth_prob: f64,
    pub smooth_sigma: [f64; 2],
    pub noise_prob: f64,
    pub noise_sigma_max: f64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            shift_prob: 0.2,
            shift_max: 0.1,
            gamma_prob: 0.2,
            gamma_range: [0.7, 1.5],
            smooth_prob: 0.2,
            smooth_sigma: [0.5, 1.0],
            noise_prob: 0.2,
            noise_sigma_max: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneAugmentConfig {
    pub rot90_prob: f64,
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
    pub shift_prob: f64,
    pub shift_max: f64,
}

impl Default for FinetuneAugmentConfig {
    fn default() -> Self {
        Self {
            rot90_prob: 0.2,
            flip_prob: 0.2,
            scale_prob: 0.2,
            scale_range: [0.9, 1.1],
            shift_prob: 0.2,
            shift_max: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub spatial: SpatialConfig,
    pub intensity: IntensityConfig,
    /// Probability that the auxiliary patch comes from the anchor's volume.
    pub auxiliary_same_prob: f64,
    pub finetune: FinetuneAugmentConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            spatial: SpatialConfig::default(),
            intensity: IntensityConfig::default(),
            auxiliary_same_prob: 0.5,
            finetune: FinetuneAugmentConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// Every random transform switched off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.spatial.affine_prob = 0.0;
        c.spatial.elastic_prob = 0.0;
        c.intensity.shift_prob = 0.0;
        c.intensity.gamma_prob = 0.0;
        c.intensity.smooth_prob = 0.0;
        c.intensity.noise_prob = 0.0;
        c.finetune.rot90_prob = 0.0;
        c.finetune.flip_prob = 0.0;
        c.finetune.scale_prob = 0.0;
        c.finetune.shift_prob = 0.0;
        c
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("spatial.affine_prob", self.spatial.affine_prob),
            ("spatial.elastic_prob", self.spatial.elastic_prob),
            ("intensity.shift_prob", self.intensity.shift_prob),
            ("intensity.gamma_prob", self.intensity.gamma_prob),
            ("intensity.smooth_prob", self.intensity.smooth_prob),
            ("intensity.noise_prob", self.intensity.noise_prob),
            ("auxiliary_same_prob", self.auxiliary_same_prob),
            ("finetune.rot90_prob", self.finetune.rot90_prob),
            ("finetune.flip_prob", self.finetune.flip_prob),
            ("finetune.scale_prob", self.finetune.scale_prob),
            ("finetune.shift_prob", self.finetune.shift_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("augment.{name} = {p} is not a probability"));
            }
        }
        let ranges = [
            ("spatial.scale_range", self.spatial.scale_range),
            ("intensity.gamma_range", self.intensity.gamma_range),
            ("intensity.smooth_sigma", self.intensity.smooth_sigma),
            ("finetune.scale_range", self.finetune.scale_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(format!("augment.{name} = [{lo}, {hi}] must satisfy 0 < lo <= hi"));
            }
        }
        if self.spatial.elastic_grid < 2 {
            return Err("augment.spatial.elastic_grid must be at least 2".into());
        }
        Ok(())
    }
}

/// A dataset held in memory after preprocessing.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub id: String,
    pub class_count: usize,
    pub cases: Vec<(Volume, LabelMap)>,
}

impl LoadedDataset {
    /// Loads and preprocesses every case of a manifest.
    pub fn from_manifest(m: &DatasetManifest) -> data::Result<Self> {
        let mut cases = Vec::with_capacity(m.len());
        for i in 0..m.len() {
            let (v, l) = m.load_case(i)?;
            cases.push(prepare_case(&v, &l)?);
        }
        Ok(Self {
            id: m.id.clone(),
            class_count: m.class_count(),
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Random crop of case `volume`, tagged with its source.
    pub fn crop(&self, volume: usize, size: Dims, rng: &mut RngStream) -> data::Result<Patch> {
        let (v, l) = &self.cases[volume];
        let mut p = crop_patch(v, l, size, rng)?;
        p.dataset = self.id.clone();
        p.volume = volume;
        Ok(p)
    }
}

fn index(d: Dims, p: [usize; 3]) -> usize {
    (p[0] * d[1] + p[1]) * d[2] + p[2]
}

fn remap<T: Copy>(src: &[T], sd: Dims, od: Dims, f: impl Fn([usize; 3]) -> [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(od.iter().product());
    for x in 0..od[0] {
        for y in 0..od[1] {
            for z in 0..od[2] {
                out.push(src[index(sd, f([x, y, z]))]);
            }
        }
    }
    out
}

/// Axis-aligned crop at a uniformly random valid offset.
pub fn crop_patch(v: &Volume, s: &LabelMap, size: Dims, rng: &mut RngStream) -> data::Result<Patch> {
    let ext = v.dims();
    if (0..3).any(|a| size[a] == 0 || size[a] > ext[a]) {
        return Err(DataError::PatchTooLarge { extent: ext, patch: size });
    }
    if s.dims() != ext {
        return Err(DataError::Invariant(format!(
            "label shape {:?} differs from volume shape {ext:?}",
            s.dims()
        )));
    }
    let mut off = [0; 3];
    for a in 0..3 {
        off[a] = rng.random_range(0..=ext[a] - size[a]);
    }
    let shifted = |p: [usize; 3]| [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
    let image = remap(v.data(), ext, size, shifted).into_iter().map(f64::from).collect();
    let labels = LabelMap::new(size, remap(s.data(), ext, size, shifted))?;
    let mut p = Patch::new(Tensor::from_parts(size.to_vec(), image), labels)?;
    p.offset = off;
    Ok(p)
}

/// Inverse mapping from output voxel to source coordinate, built from an
/// optional affine part and an optional coarse-grid displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    pub dims: Dims,
    /// `(matrix, translation)`, applied about the patch centre.
    pub affine: Option<([[f64; 3]; 3], [f64; 3])>,
    /// Control-grid size and displacement vectors, x-major.
    pub elastic: Option<(usize, Vec<[f64; 3]>)>,
}

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

impl Warp {
    pub fn identity(dims: Dims) -> Self {
        Self {
            dims,
            affine: None,
            elastic: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.affine.is_none() && self.elastic.is_none()
    }

    /// Draws a warp; both coin flips and all parameters are always consumed
    /// from `rng`.
    pub fn draw(cfg: &SpatialConfig, dims: Dims, rng: &mut RngStream) -> Self {
        let use_affine = rng.random_bool(cfg.affine_prob);
        let use_elastic = rng.random_bool(cfg.elastic_prob);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut axis = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = axis.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        axis.iter_mut().for_each(|a| *a /= n);
        let max_angle = cfg.max_rotation_deg.to_radians();
        let angle = rng.random_range(-max_angle..=max_angle);
        let scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        let tr = cfg.max_translation;
        let t = [
            rng.random_range(-tr..=tr),
            rng.random_range(-tr..=tr),
            rng.random_range(-tr..=tr),
        ];
        let mut m = rotation(axis, angle);
        m.iter_mut().flatten().for_each(|v| *v /= scale);
        let g = cfg.elastic_grid;
        let e = cfg.elastic_max;
        let disp: Vec<[f64; 3]> = (0..g * g * g)
            .map(|_| {
                [
                    rng.random_range(-e..=e),
                    rng.random_range(-e..=e),
                    rng.random_range(-e..=e),
                ]
            })
            .collect();
        Self {
            dims,
            affine: use_affine.then_some((m, t)),
            elastic: use_elastic.then_some((g, disp)),
        }
    }

    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let Some((g, disp)) = &self.elastic else {
            return [0.0; 3];
        };
        let g = *g;
        let mut lo = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let c = if self.dims[a] > 1 {
                p[a] * (g - 1) as f64 / (self.dims[a] - 1) as f64
            } else {
                0.0
            };
            let c = c.clamp(0.0, (g - 1) as f64);
            lo[a] = (c.floor() as usize).min(g - 2);
            fr[a] = c - lo[a] as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut q = [0; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                q[a] = lo[a] + bit;
                w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
            }
            let d = disp[(q[0] * g + q[1]) * g + q[2]];
            for a in 0..3 {
                out[a] += w * d[a];
            }
        }
        out
    }

    /// Source coordinate sampled for output voxel `p`.
    pub fn source(&self, p: [usize; 3]) -> [f64; 3] {
        let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
        let mut s = pf;
        if let Some((m, t)) = &self.affine {
            let c = [
                (self.dims[0] - 1) as f64 / 2.0,
                (self.dims[1] - 1) as f64 / 2.0,
                (self.dims[2] - 1) as f64 / 2.0,
            ];
            let r = [pf[0] - c[0], pf[1] - c[1], pf[2] - c[2]];
            for a in 0..3 {
                s[a] = c[a] + m[a][0] * r[0] + m[a][1] * r[1] + m[a][2] * r[2] + t[a];
            }
        }
        let d = self.displacement(pf);
        [s[0] + d[0], s[1] + d[1], s[2] + d[2]]
    }
}

fn trilinear(data: &[f64], d: Dims, s: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut fr = [0.0; 3];
    for a in 0..3 {
        let c = s[a].clamp(0.0, (d[a] - 1) as f64);
        lo[a] = c.floor() as usize;
        hi[a] = (lo[a] + 1).min(d[a] - 1);
        fr[a] = c - lo[a] as f64;
    }
    let at = |x, y, z| data[index(d, [x, y, z])];
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let c00 = lerp(at(lo[0], lo[1], lo[2]), at(lo[0], lo[1], hi[2]), fr[2]);
    let c01 = lerp(at(lo[0], hi[1], lo[2]), at(lo[0], hi[1], hi[2]), fr[2]);
    let c10 = lerp(at(hi[0], lo[1], lo[2]), at(hi[0], lo[1], hi[2]), fr[2]);
    let c11 = lerp(at(hi[0], hi[1], lo[2]), at(hi[0], hi[1], hi[2]), fr[2]);
    lerp(lerp(c00, c01, fr[1]), lerp(c10, c11, fr[1]), fr[0])
}

fn nearest(s: [f64; 3], d: Dims) -> [usize; 3] {
    let mut q = [0; 3];
    for a in 0..3 {
        q[a] = s[a].round().clamp(0.0, (d[a] - 1) as f64) as usize;
    }
    q
}

/// Warps the image trilinearly and the labels by nearest neighbour, both
/// through the same field. Samples outside the patch take the edge value.
pub fn apply_warp(p: &Patch, w: &Warp) -> Patch {
    let d = p.dims();
    assert_eq!(d, w.dims, "warp drawn for a different patch shape");
    if w.is_identity() {
        return p.clone();
    }
    let n: usize = d.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let s = w.source([x, y, z]);
                image.push(trilinear(p.image.data(), d, s));
                labels.push(p.labels.data()[index(d, nearest(s, d))]);
            }
        }
    }
    Patch {
        image: Tensor::from_parts(d.to_vec(), image),
        labels: LabelMap::new(d, labels).expect("shape preserved"),
        ..p.clone()
    }
}

/// Random affine and elastic warp, each with its configured probability.
pub fn spatial_augment(p: &Patch, cfg: &SpatialConfig, rng: &mut RngStream) -> Patch {
    apply_warp(p, &Warp::draw(cfg, p.dims(), rng))
}

pub fn gamma(image: &[f64], g: f64) -> Vec<f64> {
    if g == 1.0 {
        return image.to_vec();
    }
    image.iter().map(|&x| x.max(0.0).powf(g)).collect()
}

/// Separable Gaussian blur with radius `ceil(3σ)` and edge replication.
pub fn gaussian_smooth(image: &[f64], d: Dims, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut cur = image.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let p = [x, y, z];
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] as isize + j as isize - r).clamp(0, d[axis] as isize - 1) as usize;
                        acc += w * cur[index(d, q)];
                    }
                    next[index(d, p)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// One draw of the intensity distortions: gamma, shift, smoothing, noise.
pub fn distort(image: &Tensor, cfg: &IntensityConfig, rng: &mut RngStream) -> Tensor {
    let d: Dims = image.shape().try_into().expect("patch image is 3-D");
    let mut x = image.data().to_vec();
    if rng.random_bool(cfg.gamma_prob) {
        let g = rng.random_range(cfg.gamma_range[0]..=cfg.gamma_range[1]);
        x = gamma(&x, g);
    }
    if rng.random_bool(cfg.shift_prob) {
        let s = rng.random_range(-cfg.shift_max..=cfg.shift_max);
        x.iter_mut().for_each(|v| *v += s);
    }
    if rng.random_bool(cfg.smooth_prob) {
        let s = rng.random_range(cfg.smooth_sigma[0]..=cfg.smooth_sigma[1]);
        x = gaussian_smooth(&x, d, s);
    }
    if rng.random_bool(cfg.noise_prob) {
        let s = rng.random_range(0.0..=cfg.noise_sigma_max);
        let n = Normal::new(0.0, s).expect("non-negative noise sigma");
        x.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    Tensor::from_parts(image.shape().to_vec(), x)
}

/// Two independent intensity draws of the same patch. Labels are shared.
pub fn make_views(p: &Patch, cfg: &IntensityConfig, rng: &mut RngStream) -> (Patch, Patch) {
    let a = distort(&p.image, cfg, rng);
    let b = distort(&p.image, cfg, rng);
    (
        Patch { image: a, ..p.clone() },
        Patch { image: b, ..p.clone() },
    )
}

/// Volume index for the auxiliary patch: the anchor's own volume with
/// probability `same_prob`, otherwise a different one chosen uniformly.
pub fn auxiliary_source(anchor: usize, n: usize, same_prob: f64, rng: &mut RngStream) -> usize {
    if n < 2 {
        log::info!("dataset has a single volume; auxiliary patch taken from the same volume");
        return anchor;
    }
    if rng.random_bool(same_prob) {
        anchor
    } else {
        let k = rng.random_range(0..n - 1);
        if k >= anchor {
            k + 1
        } else {
            k
        }
    }
}

/// Crops the auxiliary patch `P2` from the anchor's dataset.
pub fn pick_auxiliary(
    p1: &Patch,
    ds: &LoadedDataset,
    same_prob: f64,
    rng: &mut RngStream,
) -> data::Result<Patch> {
    if p1.dataset != ds.id {
        return Err(DataError::Invariant(format!(
            "anchor patch comes from '{}' but auxiliary dataset is '{}'",
            p1.dataset, ds.id
        )));
    }
    let v = auxiliary_source(p1.volume, ds.len(), same_prob, rng);
    ds.crop(v, p1.dims(), rng)
}

/// Rotates by `k` quarter turns in the plane of axes `(a, b)`.
pub fn rot90(p: &Patch, a: usize, b: usize, k: usize) -> Patch {
    assert!(a < 3 && b < 3 && a != b, "rotation plane needs two distinct axes");
    let mut cur = p.clone();
    for _ in 0..k % 4 {
        let sd = cur.dims();
        let mut od = sd;
        od.swap(a, b);
        let f = |o: [usize; 3]| {
            let mut s = o;
            s[a] = o[b];
            s[b] = sd[b] - 1 - o[a];
            s
        };
        let image = remap(cur.image.data(), sd, od, f);
        let labels = remap(cur.labels.data(), sd, od, f);
        cur = Patch {
            image: Tensor::from_parts(od.to_vec(), image),
            labels: LabelMap::new(od, labels).expect("rotated shape"),
            ..cur
        };
    }
    cur
}

pub fn flip(p: &Patch, axis: usize) -> Patch {
    let d = p.dims();
    let f = |o: [usize; 3]| {
        let mut s = o;
        s[axis] = d[axis] - 1 - o[axis];
        s
    };
    Patch {
        image: Tensor::from_parts(d.to_vec(), remap(p.image.data(), d, d, f)),
        labels: LabelMap::new(d, remap(p.labels.data(), d, d, f)).expect("same shape"),
        ..p.clone()
    }
}

/// Quarter-turn rotation, per-axis flips and intensity scale/shift, each
/// with its configured probability. Rotations only use square planes.
pub fn finetune_augment(p: &Patch, cfg: &FinetuneAugmentConfig, rng: &mut RngStream) -> Patch {
    let mut out = p.clone();
    if rng.random_bool(cfg.rot90_prob) {
        let (a, b) = [(0, 1), (0, 2), (1, 2)][rng.random_range(0..3)];
        let k = rng.random_range(1..4);
        let d = out.dims();
        if d[a] == d[b] {
            out = rot90(&out, a, b, k);
        }
    }
    for axis in 0..3 {
        if rng.random_bool(cfg.flip_prob) {
            out = flip(&out, axis);
        }
    }
    if rng.random_bool(cfg.scale_prob) {
        let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        out = out.with_image(out.image.data().iter().map(|v| v * s).collect());
    }
    if rng.random_bool(cfg.shift_prob) {
        let s = rng.random_range(-cfg.shift_max..=cfg.shift_max);
        out = out.with_image(out.image.data().iter().map(|v| v + s).collect());
    }
    out
}

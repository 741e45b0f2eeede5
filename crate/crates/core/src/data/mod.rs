//! Volumes, label maps, their on-disk format, preprocessing, and the
//! synthetic multi-dataset corpus.

mod io;
mod manifest;
mod preprocess;
mod synth;

pub use io::{load_labelmap, load_volume, save_labelmap, save_volume, FORMAT_MAGIC};
pub use manifest::{Case, DatasetManifest};
pub use preprocess::{clip_scale_intensity, prepare_case, resample_labels, resample_volume, DEFAULT_SPACING};
pub use synth::{
    generate_synthetic_corpus, synthesize_case, CaseLayout, CorpusConfig, DatasetSpec, OrganSpec, Placement,
};

use std::path::PathBuf;

use thiserror::Error;

pub type Dims = [usize; 3];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header at byte {offset}: {msg}")]
    MalformedHeader { path: PathBuf, offset: usize, msg: String },
    #[error("{path}: payload size mismatch, expected {expected} bytes but found {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("label '{label}' appears in both dataset '{first}' and dataset '{second}'")]
    OverlappingVocabulary {
        label: String,
        first: String,
        second: String,
    },
    #[error("volume extent {extent:?} is smaller than twice the patch extent {patch}")]
    ExtentTooSmall { extent: Dims, patch: usize },
    #[error("volume extent {extent:?} cannot hold a patch of extent {patch:?}")]
    PatchTooLarge { extent: Dims, patch: Dims },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Dense scalar grid with physical spacing and origin (millimetres).
/// Storage is x-major with z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(DataError::Invariant(format!("volume shape {dims:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DataError::Invariant(format!("spacing {spacing:?} must be positive")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(DataError::Invariant(format!(
                "shape {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, [0.0; 3], vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Integer segmentation aligned with a [`Volume`]; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || dims.iter().product::<usize>() != data.len() {
            return Err(DataError::Invariant(format!(
                "label map shape {dims:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    /// Sorted distinct label values.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Nearest-neighbour subsampling by an integer factor (voxel `i` of the
    /// result is voxel `factor * i` of the input).
    pub fn subsample(&self, factor: usize) -> LabelMap {
        let d = self.dims.map(|n| n.div_ceil(factor));
        let mut out = LabelMap::zeros(d);
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    out.set(x, y, z, self.get(x * factor, y * factor, z * factor));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_invariants() {
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 0, 2], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7]).is_err());
    }

    #[test]
    fn subsample_takes_even_voxels() {
        let mut l = LabelMap::zeros([4, 4, 4]);
        l.set(2, 0, 2, 3);
        l.set(1, 1, 1, 5);
        let s = l.subsample(2);
        assert_eq!(s.dims(), [2, 2, 2]);
        assert_eq!(s.get(1, 0, 1), 3);
        assert_eq!(s.count(5), 0);
    }
}

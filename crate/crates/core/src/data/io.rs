//! Volume file format: text header of `key: value` lines, a blank line, then
//! a little-endian payload (f32 intensities, optionally followed by u8
//! labels; or u8 labels alone for label-map files).
//!
//! ```text
//! mixvol 1
//! kind: volume
//! shape: 48 48 48
//! spacing: 1.5 1.5 2
//! origin: 0 0 0
//! scalar: f32le
//! labels: u8
//! label.0: background
//! label.1: organ_a
//!
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use super::{DataError, Dims, LabelMap, Result, Volume};

pub const FORMAT_MAGIC: &str = "mixvol 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Volume,
    LabelMap,
}

struct Decoded {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    volume: Option<Vec<f32>>,
    labels: Option<Vec<u8>>,
    vocabulary: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt3<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn header(kind: Kind, dims: Dims, spacing: [f64; 3], origin: [f64; 3], with_labels: bool, vocab: &[String]) -> String {
    let mut h = format!("{FORMAT_MAGIC}\n");
    h += match kind {
        Kind::Volume => "kind: volume\n",
        Kind::LabelMap => "kind: labelmap\n",
    };
    h += &format!("shape: {}\n", fmt3(&dims));
    h += &format!("spacing: {}\n", fmt3(&spacing));
    h += &format!("origin: {}\n", fmt3(&origin));
    match kind {
        Kind::Volume => {
            h += "scalar: f32le\n";
            h += if with_labels { "labels: u8\n" } else { "labels: none\n" };
        }
        Kind::LabelMap => h += "scalar: u8\n",
    }
    for (i, name) in vocab.iter().enumerate() {
        h += &format!("label.{i}: {name}\n");
    }
    h.push('\n');
    h
}

/// Writes a volume, optionally with an embedded label map.
pub fn save_volume(volume: &Volume, labels: Option<&LabelMap>, vocab: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.dims() != volume.dims() {
            return Err(DataError::Invariant(format!(
                "label map shape {:?} differs from volume shape {:?}",
                l.dims(),
                volume.dims()
            )));
        }
    }
    let mut bytes = header(
        Kind::Volume,
        volume.dims(),
        volume.spacing(),
        volume.origin(),
        labels.is_some(),
        vocab,
    )
    .into_bytes();
    bytes.reserve(volume.data().len() * 5);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        bytes.extend_from_slice(l.data());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_labelmap(
    labels: &LabelMap,
    spacing: [f64; 3],
    origin: [f64; 3],
    vocab: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = header(Kind::LabelMap, labels.dims(), spacing, origin, true, vocab).into_bytes();
    bytes.extend_from_slice(labels.data());
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<(Volume, Option<LabelMap>)> {
    let path = path.as_ref();
    let (kind, d) = decode(path)?;
    if kind != Kind::Volume {
        return Err(DataError::MalformedHeader {
            path: path.to_path_buf(),
            offset: FORMAT_MAGIC.len() + 1,
            msg: "expected kind 'volume', found 'labelmap'".into(),
        });
    }
    let volume = Volume::new(d.dims, d.spacing, d.origin, d.volume.unwrap_or_default())?;
    let labels = d.labels.map(|l| LabelMap::new(d.dims, l)).transpose()?;
    Ok((volume, labels))
}

/// Loads a label map from either a label-map file or a volume file with
/// embedded labels.
pub fn load_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (_, d) = decode(path)?;
    match d.labels {
        Some(l) => LabelMap::new(d.dims, l),
        None => Err(DataError::Invariant(format!("{} carries no labels", path.display()))),
    }
}

/// Reads only the vocabulary lines of a file header.
pub(crate) fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    Ok(decode(path)?.1.vocabulary)
}

fn parse3<T: std::str::FromStr>(s: &str) -> Option<[T; 3]> {
    let v: Vec<T> = s.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    <[T; 3]>::try_from(v).ok()
}

fn decode(path: &Path) -> Result<(Kind, Decoded)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |offset: usize, msg: String| DataError::MalformedHeader {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed(bytes.len(), "no blank line terminating the header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|e| malformed(e.valid_up_to(), "header is not UTF-8".into()))?;

    let mut offset = 0;
    let mut lines = text.split('\n');
    if lines.next() != Some(FORMAT_MAGIC) {
        return Err(malformed(0, format!("missing '{FORMAT_MAGIC}' magic line")));
    }
    offset += FORMAT_MAGIC.len() + 1;

    let mut kind = None;
    let mut dims = None;
    let mut spacing = None;
    let mut origin = Some([0.0; 3]);
    let mut scalar = None;
    let mut with_labels = false;
    let mut vocab: Vec<(usize, String)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| malformed(offset, format!("expected 'key: value', found '{line}'")))?;
        let value = value.trim();
        match key.trim() {
            "kind" => {
                kind = Some(match value {
                    "volume" => Kind::Volume,
                    "labelmap" => Kind::LabelMap,
                    other => return Err(malformed(offset, format!("unknown kind '{other}'"))),
                })
            }
            "shape" => dims = Some(parse3::<usize>(value).ok_or_else(|| malformed(offset, format!("bad shape '{value}'")))?),
            "spacing" => {
                spacing = Some(parse3::<f64>(value).ok_or_else(|| malformed(offset, format!("bad spacing '{value}'")))?)
            }
            "origin" => {
                origin = Some(parse3::<f64>(value).ok_or_else(|| malformed(offset, format!("bad origin '{value}'")))?)
            }
            "scalar" => scalar = Some(value.to_string()),
            "labels" => {
                with_labels = match value {
                    "u8" => true,
                    "none" => false,
                    other => return Err(malformed(offset, format!("unknown label type '{other}'"))),
                }
            }
            k if k.starts_with("label.") => {
                let id = k["label.".len()..]
                    .parse()
                    .map_err(|_| malformed(offset, format!("bad label id in '{k}'")))?;
                vocab.push((id, value.to_string()));
            }
            other => return Err(malformed(offset, format!("unknown key '{other}'"))),
        }
        offset += line.len() + 1;
    }
    let kind = kind.ok_or_else(|| malformed(offset, "missing 'kind'".into()))?;
    let dims = dims.ok_or_else(|| malformed(offset, "missing 'shape'".into()))?;
    let spacing = spacing.ok_or_else(|| malformed(offset, "missing 'spacing'".into()))?;
    let origin = origin.expect("defaulted");
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(DataError::Invariant(format!(
            "{}: spacing {spacing:?} must be positive",
            path.display()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(DataError::Invariant(format!("{}: shape {dims:?} has an empty axis", path.display())));
    }
    let expected_scalar = if kind == Kind::Volume { "f32le" } else { "u8" };
    if scalar.as_deref() != Some(expected_scalar) {
        return Err(malformed(offset, format!("expected scalar '{expected_scalar}', found {scalar:?}")));
    }
    vocab.sort();
    if vocab.iter().enumerate().any(|(i, (id, _))| *id != i) {
        return Err(malformed(offset, "label ids must be dense from 0".into()));
    }

    let n: usize = dims.iter().product();
    let payload = &bytes[end + 2..];
    let expected = match kind {
        Kind::Volume => n * 4 + if with_labels { n } else { 0 },
        Kind::LabelMap => n,
    };
    if payload.len() != expected {
        return Err(DataError::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let (volume, labels) = match kind {
        Kind::Volume => {
            let v = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            (Some(v), with_labels.then(|| payload[n * 4..].to_vec()))
        }
        Kind::LabelMap => (None, Some(payload.to_vec())),
    };
    Ok((
        kind,
        Decoded {
            dims,
            spacing,
            origin,
            volume,
            labels,
            vocabulary: vocab.into_iter().map(|(_, n)| n).collect(),
        },
    ))
}

use super::{linear_index, Dims, LabelMap, Result, Volume};

/// Target voxel spacing (mm) every case is brought to before training.
pub const DEFAULT_SPACING: [f64; 3] = [1.5, 1.5, 2.0];

fn resampled_dims(dims: Dims, from: [f64; 3], to: [f64; 3]) -> Dims {
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = ((dims[i] as f64 * from[i] / to[i]).round() as usize).max(1);
    }
    out
}

/// Source coordinate (in input voxel units) of output voxel `i` along one axis.
fn source_coord(i: usize, from: f64, to: f64, n_in: usize) -> f64 {
    (i as f64 * to / from).min((n_in - 1) as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact for a == b
    a + t * (b - a)
}

/// Trilinear resampling to `target` spacing. The new extent per axis is
/// `round(extent * spacing / target)`, at least 1; voxel 0 stays anchored at
/// the origin.
pub fn resample_volume(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(super::DataError::Invariant(format!("target spacing {target:?} must be positive")));
    }
    let dims = v.dims();
    if v.spacing() == target {
        return Ok(v.clone());
    }
    let nd = resampled_dims(dims, v.spacing(), target);
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..nd[a])
            .map(|i| {
                let c = source_coord(i, v.spacing()[a], target[a], dims[a]);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(dims[a] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let get = |x, y, z| v.data()[linear_index(dims, x, y, z)] as f64;
    let mut out = Vec::with_capacity(nd.iter().product());
    for &(x0, x1, tx) in &ax {
        for &(y0, y1, ty) in &ay {
            for &(z0, z1, tz) in &az {
                let c00 = lerp(get(x0, y0, z0), get(x0, y0, z1), tz);
                let c01 = lerp(get(x0, y1, z0), get(x0, y1, z1), tz);
                let c10 = lerp(get(x1, y0, z0), get(x1, y0, z1), tz);
                let c11 = lerp(get(x1, y1, z0), get(x1, y1, z1), tz);
                let c0 = lerp(c00, c01, ty);
                let c1 = lerp(c10, c11, ty);
                out.push(lerp(c0, c1, tx) as f32);
            }
        }
    }
    Volume::new(nd, target, v.origin(), out)
}

/// Nearest-neighbour resampling of a label map between spacings.
pub fn resample_labels(l: &LabelMap, from: [f64; 3], target: [f64; 3]) -> LabelMap {
    let dims = l.dims();
    let nd = resampled_dims(dims, from, target);
    let near = |i: usize, a: usize| source_coord(i, from[a], target[a], dims[a]).round() as usize;
    let mut out = LabelMap::zeros(nd);
    for x in 0..nd[0] {
        for y in 0..nd[1] {
            for z in 0..nd[2] {
                out.set(x, y, z, l.get(near(x, 0), near(y, 1), near(z, 2)));
            }
        }
    }
    out
}

/// Clamps intensities to `[lo, hi]` and maps that window affinely onto `[0, 1]`.
pub fn clip_scale_intensity(v: &Volume, lo: f64, hi: f64) -> Volume {
    assert!(lo < hi, "intensity window [{lo}, {hi}] is empty");
    let mut out = v.clone();
    for x in out.data_mut() {
        let c = (*x as f64).clamp(lo, hi);
        *x = ((c - lo) / (hi - lo)) as f32;
    }
    out
}

/// Standard preprocessing: resample to [`DEFAULT_SPACING`] and window to
/// `[-150, 250]`.
pub fn prepare_case(v: &Volume, l: &LabelMap) -> Result<(Volume, LabelMap)> {
    let labels = if v.spacing() == DEFAULT_SPACING {
        l.clone()
    } else {
        resample_labels(l, v.spacing(), DEFAULT_SPACING)
    };
    let vol = resample_volume(v, DEFAULT_SPACING)?;
    Ok((clip_scale_intensity(&vol, -150.0, 250.0), labels))
}

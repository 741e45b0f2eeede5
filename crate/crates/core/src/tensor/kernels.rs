//! Raw numeric kernels behind the graph operations. All loops are sequential
//! with a fixed accumulation order, so results are bit-reproducible.

use super::{strides, Tensor};

/// Maps each output element of a broadcast to the flat index of an operand.
pub(crate) fn broadcast_index_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let n = out.len();
    let pad = n - operand.len();
    let ostr = strides(operand);
    // effective stride per output dim (0 on broadcast dims)
    let eff: Vec<usize> = (0..n)
        .map(|i| {
            if i < pad || operand[i - pad] == 1 {
                0
            } else {
                ostr[i - pad]
            }
        })
        .collect();
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(out_shape.to_vec(), data);
    }
    let ma = broadcast_index_map(out_shape, a.shape());
    let mb = broadcast_index_map(out_shape, b.shape());
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::from_parts(out_shape.to_vec(), data)
}

/// Sums a gradient of broadcast shape back down to `target` shape.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let map = broadcast_index_map(grad.shape(), target);
    let mut out = vec![0.0; target.iter().product()];
    for (&i, &g) in map.iter().zip(grad.data()) {
        out[i] += g;
    }
    Tensor::from_parts(target.to_vec(), out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose2(a: &Tensor) -> Tensor {
    permute(a, &[1, 0])
}

pub(crate) fn permute(a: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = a.shape();
    let in_str = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let n = out_shape.len();
    let total = a.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(a.data()[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += src_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_str[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Sums over `axes`, keeping them as extent-1 dimensions.
pub(crate) fn sum_keepdim(a: &Tensor, axes: &[usize]) -> Tensor {
    let out_shape: Vec<usize> = a
        .shape()
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let map = broadcast_index_map(a.shape(), &out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    for (&i, &v) in map.iter().zip(a.data()) {
        out[i] += v;
    }
    Tensor::from_parts(out_shape, out)
}

/// Mean over `axes` (kept as extent 1), accumulated relative to the first
/// element of each group so constant groups reduce exactly.
pub(crate) fn mean_keepdim(a: &Tensor, axes: &[usize]) -> Tensor {
    let out_shape: Vec<usize> = a
        .shape()
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let n = (a.numel() / out_shape.iter().product::<usize>()) as f64;
    let map = broadcast_index_map(a.shape(), &out_shape);
    let size: usize = out_shape.iter().product();
    let mut reference = vec![f64::NAN; size];
    let mut acc = vec![0.0; size];
    for (&i, &v) in map.iter().zip(a.data()) {
        if reference[i].is_nan() {
            reference[i] = v;
        }
        acc[i] += v - reference[i];
    }
    let out = reference.iter().zip(&acc).map(|(r, s)| r + s / n).collect();
    Tensor::from_parts(out_shape, out)
}

/// Geometry of a 3-D convolution over `[B, C, X, Y, Z]` tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    /// Output index range along one axis for kernel tap `kk`, with the
    /// matching first input index.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let n_in = self.inp[axis] as isize;
        let n_out = self.out[axis] as isize;
        let kk = kk as isize;
        // need 0 <= o*s + kk - p < n_in
        let lo = ((p - kk) + s - 1).div_euclid(s).max(0);
        let hi = ((n_in - 1 - kk + p).div_euclid(s) + 1).min(n_out);
        if hi <= lo {
            return (0, 0, 0);
        }
        (lo as usize, hi as usize, (lo * s + kk - p) as usize)
    }
}

/// Visits every (output row, input row) pair touched by one kernel tap.
/// `f(out_offset, in_offset, len)` covers `len` consecutive z-positions.
fn for_each_tap_row(g: &ConvGeom, kx: usize, ky: usize, kz: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (xlo, xhi, ix0) = g.valid(0, kx);
    let (ylo, yhi, iy0) = g.valid(1, ky);
    let (zlo, zhi, iz0) = g.valid(2, kz);
    if xhi == 0 || yhi == 0 || zhi == 0 {
        return;
    }
    let [_, iny, inz] = g.inp;
    let [_, oy, oz] = g.out;
    let len = zhi - zlo;
    for (n, ox) in (xlo..xhi).enumerate() {
        let ix = ix0 + n * g.stride;
        for (m, oyy) in (ylo..yhi).enumerate() {
            let iy = iy0 + m * g.stride;
            f((ox * oy + oyy) * oz + zlo, (ix * iny + iy) * inz + iz0, len);
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, k3) = (g.in_vol(), g.out_vol(), g.k * g.k * g.k);
    let mut out = vec![0.0; g.batch * g.cout * ov];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * ov..(b * g.cout + co + 1) * ov];
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * iv..(b * g.cin + ci + 1) * iv];
                for t in 0..k3 {
                    let wv = w[(co * g.cin + ci) * k3 + t];
                    if wv == 0.0 {
                        continue;
                    }
                    let (kx, ky, kz) = (t / (g.k * g.k), (t / g.k) % g.k, t % g.k);
                    for_each_tap_row(g, kx, ky, kz, |oo, io, len| {
                        if g.stride == 1 {
                            for (ov, &iv) in o[oo..oo + len].iter_mut().zip(&xin[io..io + len]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for n in 0..len {
                                o[oo + n] += wv * xin[io + n * g.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. its input and kernel.
pub(crate) fn conv3d_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (iv, ov, k3) = (g.in_vol(), g.out_vol(), g.k * g.k * g.k);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * ov..(b * g.cout + co + 1) * ov];
            for ci in 0..g.cin {
                let base = (b * g.cin + ci) * iv;
                for t in 0..k3 {
                    let widx = (co * g.cin + ci) * k3 + t;
                    let wv = w[widx];
                    let (kx, ky, kz) = (t / (g.k * g.k), (t / g.k) % g.k, t % g.k);
                    let mut acc = 0.0;
                    for_each_tap_row(g, kx, ky, kz, |oo, io, len| {
                        for n in 0..len {
                            let xi = base + io + n * g.stride;
                            acc += go[oo + n] * x[xi];
                            gx[xi] += wv * go[oo + n];
                        }
                    });
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Transposed convolution with kernel `k` and stride `k` (non-overlapping
/// taps). Kernel layout `[Cin, Cout, k, k, k]`.
pub(crate) fn conv_transpose3d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (iv, ov, k) = (g.in_vol(), g.out_vol(), g.k);
    let k3 = k * k * k;
    let [nx, ny, nz] = g.inp;
    let [_, oy, oz] = g.out;
    let mut out = vec![0.0; g.batch * g.cout * ov];
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let xin = &x[(b * g.cin + ci) * iv..(b * g.cin + ci + 1) * iv];
            for co in 0..g.cout {
                let o = &mut out[(b * g.cout + co) * ov..(b * g.cout + co + 1) * ov];
                for t in 0..k3 {
                    let wv = w[(ci * g.cout + co) * k3 + t];
                    let (kx, ky, kz) = (t / (k * k), (t / k) % k, t % k);
                    for ix in 0..nx {
                        for iy in 0..ny {
                            let orow = ((ix * g.stride + kx) * oy + iy * g.stride + ky) * oz + kz;
                            let irow = (ix * ny + iy) * nz;
                            for iz in 0..nz {
                                o[orow + iz * g.stride] += wv * xin[irow + iz];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (iv, ov, k) = (g.in_vol(), g.out_vol(), g.k);
    let k3 = k * k * k;
    let [nx, ny, nz] = g.inp;
    let [_, oy, oz] = g.out;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let xbase = (b * g.cin + ci) * iv;
            for co in 0..g.cout {
                let go = &gout[(b * g.cout + co) * ov..(b * g.cout + co + 1) * ov];
                for t in 0..k3 {
                    let widx = (ci * g.cout + co) * k3 + t;
                    let wv = w[widx];
                    let (kx, ky, kz) = (t / (k * k), (t / k) % k, t % k);
                    let mut acc = 0.0;
                    for ix in 0..nx {
                        for iy in 0..ny {
                            let orow = ((ix * g.stride + kx) * oy + iy * g.stride + ky) * oz + kz;
                            let irow = xbase + (ix * ny + iy) * nz;
                            for iz in 0..nz {
                                let gv = go[orow + iz * g.stride];
                                acc += gv * x[irow + iz];
                                gx[irow + iz] += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Per-(item, channel) normalization over all trailing dimensions.
/// Returns the normalized values and the inverse standard deviations.
pub(crate) fn instance_norm_forward(x: &[f64], groups: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / groups;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * n..(gi + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[gi * n..(gi + 1) * n].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward(xhat: &[f64], inv_std: &[f64], gout: &[f64]) -> Vec<f64> {
    let groups = inv_std.len();
    let n = xhat.len() / groups;
    let mut gx = vec![0.0; xhat.len()];
    for gi in 0..groups {
        let r = gi * n..(gi + 1) * n;
        let (xh, go) = (&xhat[r.clone()], &gout[r.clone()]);
        let mg = go.iter().sum::<f64>() / n as f64;
        let mgx = go.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for ((o, &g), &h) in gx[r].iter_mut().zip(go).zip(xh) {
            *o = inv_std[gi] * (g - mg - h * mgx);
        }
    }
    gx
}

/// Log-softmax along `axis`.
pub(crate) fn log_softmax(a: &Tensor, axis: usize) -> Tensor {
    let shape = a.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let d = a.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mx = (0..len).map(|c| d[base + c * inner]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..len).map(|c| (d[base + c * inner] - mx).exp()).sum::<f64>().ln();
            for c in 0..len {
                out[base + c * inner] = d[base + c * inner] - lse;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn log_softmax_backward(out: &Tensor, gout: &Tensor, axis: usize) -> Tensor {
    let shape = out.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let (y, g) = (out.data(), gout.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let gs: f64 = (0..len).map(|c| g[base + c * inner]).sum();
            for c in 0..len {
                let k = base + c * inner;
                gx[k] = g[k] - y[k].exp() * gs;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_map_broadcasts_rows() {
        assert_eq!(broadcast_index_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_transposes() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = transpose2(&a);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn conv_valid_range_with_padding() {
        let g = ConvGeom {
            batch: 1,
            cin: 1,
            cout: 1,
            k: 3,
            stride: 1,
            pad: 1,
            inp: [4, 4, 4],
            out: [4, 4, 4],
        };
        assert_eq!(g.valid(0, 0), (1, 4, 0));
        assert_eq!(g.valid(0, 1), (0, 4, 0));
        assert_eq!(g.valid(0, 2), (0, 3, 1));
    }
}

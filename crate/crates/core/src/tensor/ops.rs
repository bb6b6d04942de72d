use rayon::prelude::*;

use super::{DType, Tensor};
use crate::error::{shape_err, Result};

/// `c = a·b + beta·c` for row-major operands, optionally reading `a`/`b` transposed.
///
/// `a` is logically `m×k`, `b` is `k×n` and `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent addressed by
    // the (rows, cols, strides) triples handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Four-tap bilinear stencil with zero padding outside `[0, w-1] × [0, h-1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bilinear {
    /// Flat plane offsets of (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1); `usize::MAX` when outside.
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    pub fx: f64,
    pub fy: f64,
}

impl Bilinear {
    #[inline]
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        let fx = x - xf;
        let fy = y - yf;
        let (x0, y0) = (xf as i64, yf as i64);
        let at = |xi: i64, yi: i64| {
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                yi as usize * w + xi as usize
            } else {
                usize::MAX
            }
        };
        Bilinear {
            idx: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
            weight: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            fx,
            fy,
        }
    }

    #[inline]
    pub fn corner(&self, plane: &[f64], k: usize) -> f64 {
        let i = self.idx[k];
        if i == usize::MAX {
            0.0
        } else {
            plane[i]
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            let i = self.idx[k];
            if i != usize::MAX {
                acc += self.weight[k] * plane[i];
            }
        }
        acc
    }

    /// Partial derivatives of the sample w.r.t. the x and y coordinates.
    #[inline]
    pub fn grad_xy(&self, plane: &[f64]) -> (f64, f64) {
        let v = [
            self.corner(plane, 0),
            self.corner(plane, 1),
            self.corner(plane, 2),
            self.corner(plane, 3),
        ];
        self.grad_from_corners(v)
    }

    #[inline]
    pub fn grad_from_corners(&self, v: [f64; 4]) -> (f64, f64) {
        let dx = (1.0 - self.fy) * (v[1] - v[0]) + self.fy * (v[3] - v[2]);
        let dy = (1.0 - self.fx) * (v[2] - v[0]) + self.fx * (v[3] - v[1]);
        (dx, dy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            let i = self.idx[k];
            if i != usize::MAX {
                plane[i] += self.weight[k] * g;
            }
        }
    }
}

/// Bilinear interpolation of a 2-D `H×W` field at `(x, y)` points (x indexes columns).
/// Neighbours outside the grid contribute zero.
pub fn bilinear_sample(src: &Tensor, coords: &[(f64, f64)]) -> Result<Tensor> {
    src.expect_ndim(2, "bilinear_sample source")?;
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let plane = src.data();
    let out = coords
        .iter()
        .map(|&(x, y)| Bilinear::new(x, y, h, w).sample(plane))
        .collect();
    Tensor::from_parts(src.dtype(), vec![coords.len()], out).ensure_finite("bilinear_sample")
}

/// Gradient of [`bilinear_sample`] w.r.t. the source field and the coordinates.
pub fn bilinear_sample_backward(
    src: &Tensor,
    coords: &[(f64, f64)],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    src.expect_ndim(2, "bilinear_sample source")?;
    if grad_out.numel() != coords.len() {
        return Err(shape_err!(
            "bilinear_sample_backward: {} grads for {} coords",
            grad_out.numel(),
            coords.len()
        ));
    }
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut gsrc = Tensor::zeros(src.shape());
    let mut gcoords = Vec::with_capacity(coords.len());
    for (&(x, y), &g) in coords.iter().zip(grad_out.data()) {
        let b = Bilinear::new(x, y, h, w);
        b.scatter(gsrc.data_mut(), g);
        let (dx, dy) = b.grad_xy(src.data());
        gcoords.push((g * dx, g * dy));
    }
    Ok((gsrc, gcoords))
}

fn pool_dims(shape: &[usize], k: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("avg_pool2d needs at least 2 dims, got {shape:?}"));
    }
    if k == 0 {
        return Err(shape_err!("avg_pool2d kernel must be positive"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h % k != 0 || w % k != 0 {
        return Err(shape_err!(
            "avg_pool2d: {h}×{w} is not divisible by kernel {k}"
        ));
    }
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// Non-overlapping `k×k` mean over the trailing two dimensions.
pub fn avg_pool2d(src: &Tensor, k: usize) -> Result<Tensor> {
    let (planes, h, w) = pool_dims(src.shape(), k)?;
    if k == 1 {
        return Ok(src.clone());
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; planes * oh * ow];
    let norm = 1.0 / (k * k) as f64;
    out.par_chunks_mut(oh * ow)
        .zip(src.data().par_chunks(h * w))
        .for_each(|(dst, plane)| pool_plane(plane, dst, h, w, k, norm));
    let mut shape = src.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok(Tensor::from_parts(src.dtype(), shape, out))
}

#[inline]
fn pool_plane(plane: &[f64], dst: &mut [f64], h: usize, w: usize, k: usize, norm: f64) {
    let ow = w / k;
    for oy in 0..h / k {
        let row = &mut dst[oy * ow..(oy + 1) * ow];
        for dy in 0..k {
            let src_row = &plane[(oy * k + dy) * w..(oy * k + dy + 1) * w];
            for (ox, acc) in row.iter_mut().enumerate() {
                let cell = &src_row[ox * k..ox * k + k];
                *acc += cell.iter().sum::<f64>();
            }
        }
        row.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Accumulates the [`avg_pool2d`] adjoint of `grad_out` into `grad_in`.
pub fn avg_pool2d_backward_into(grad_out: &Tensor, k: usize, grad_in: &mut Tensor) -> Result<()> {
    let (planes, h, w) = pool_dims(grad_in.shape(), k)?;
    let (oh, ow) = (h / k, w / k);
    if grad_out.numel() != planes * oh * ow {
        return Err(shape_err!(
            "avg_pool2d_backward: grad {:?} does not match input {:?}",
            grad_out.shape(),
            grad_in.shape()
        ));
    }
    let norm = 1.0 / (k * k) as f64;
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(oh * ow))
        .for_each(|(gi, go)| {
            for y in 0..h {
                let go_row = &go[(y / k) * ow..(y / k + 1) * ow];
                let gi_row = &mut gi[y * w..(y + 1) * w];
                for (x, v) in gi_row.iter_mut().enumerate() {
                    *v += go_row[x / k] * norm;
                }
            }
        });
    Ok(())
}

fn conv_dims(src: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    src.expect_ndim(3, "conv2d input")?;
    kernel.expect_ndim(4, "conv2d kernel")?;
    let (cin, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (cout, kcin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(shape_err!(
            "conv2d: kernel expects {kcin} input channels, input has {cin}"
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err!("conv2d: same padding needs odd kernel, got {kh}×{kw}"));
    }
    Ok((cin, h, w, cout, kh, kw))
}

/// Unrolls `src` into a `(cin·kh·kw) × (h·w)` patch matrix with zero same-padding.
fn im2col(src: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut col = vec![0.0; cin * kh * kw * hw];
    col.par_chunks_mut(hw).enumerate().for_each(|(row, dst)| {
        let ci = row / (kh * kw);
        let dy = (row / kw) % kh;
        let dx = row % kw;
        let plane = &src[ci * hw..(ci + 1) * hw];
        for y in 0..h {
            let sy = y as isize + dy as isize - ph as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
            let dst_row = &mut dst[y * w..(y + 1) * w];
            let shift = dx as isize - pw as isize;
            let x_lo = (-shift).max(0) as usize;
            let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
            for x in x_lo..x_hi {
                dst_row[x] = src_row[(x as isize + shift) as usize];
            }
        }
    });
    col
}

/// Adjoint of [`im2col`], accumulating into `dst`.
fn col2im_add(col: &[f64], dst: &mut [f64], h: usize, w: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    dst.par_chunks_mut(hw).enumerate().for_each(|(ci, plane)| {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let src = &col[row * hw..(row + 1) * hw];
                let shift = dx as isize - pw as isize;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &src[y * w..(y + 1) * w];
                    for x in x_lo..x_hi {
                        prow[(x as isize + shift) as usize] += crow[x];
                    }
                }
            }
        }
    });
}

/// Stride-1, zero same-padded cross-correlation of a `Cin×H×W` input with a
/// `Cout×Cin×kh×kw` kernel (odd extents), plus an optional per-channel bias.
pub fn conv2d(src: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cin, h, w, cout, kh, kw) = conv_dims(src, kernel)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let hw = h * w;
    let kk = cin * kh * kw;
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(hw).zip(b.data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if kh == 1 && kw == 1 {
        gemm(cout, kk, hw, kernel.data(), false, src.data(), false, beta, &mut out);
    } else {
        let col = im2col(src.data(), cin, h, w, kh, kw);
        gemm(cout, kk, hw, kernel.data(), false, &col, false, beta, &mut out);
    }
    let dtype = src.dtype().promote(kernel.dtype());
    Ok(Tensor::from_parts(dtype, vec![cout, h, w], out))
}

pub struct Conv2dGrads {
    pub src: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Tensor,
}

/// Adjoint of [`conv2d`]. Input and kernel gradients are only formed when requested.
pub fn conv2d_backward(
    src: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    want_src: bool,
    want_kernel: bool,
) -> Result<Conv2dGrads> {
    let (cin, h, w, cout, kh, kw) = conv_dims(src, kernel)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err!(
            "conv2d_backward: grad {:?} for output {:?}",
            grad_out.shape(),
            [cout, h, w]
        ));
    }
    let hw = h * w;
    let kk = cin * kh * kw;
    let pointwise = kh == 1 && kw == 1;
    let col = if want_kernel && !pointwise {
        Some(im2col(src.data(), cin, h, w, kh, kw))
    } else {
        None
    };
    let gkernel = want_kernel.then(|| {
        let mut g = vec![0.0; cout * kk];
        let patches = col.as_deref().unwrap_or(src.data());
        gemm(cout, hw, kk, grad_out.data(), false, patches, true, 0.0, &mut g);
        Tensor::from_parts(DType::F64, kernel.shape().to_vec(), g)
    });
    let gsrc = want_src.then(|| {
        if pointwise {
            let mut g = vec![0.0; cin * hw];
            gemm(cin, cout, hw, kernel.data(), true, grad_out.data(), false, 0.0, &mut g);
            Tensor::from_parts(DType::F64, vec![cin, h, w], g)
        } else {
            let mut gcol = vec![0.0; kk * hw];
            gemm(kk, cout, hw, kernel.data(), true, grad_out.data(), false, 0.0, &mut gcol);
            let mut g = vec![0.0; cin * hw];
            col2im_add(&gcol, &mut g, h, w, kh, kw);
            Tensor::from_parts(DType::F64, vec![cin, h, w], g)
        }
    });
    let gbias = grad_out
        .data()
        .chunks(hw)
        .map(|row| row.iter().sum())
        .collect();
    Ok(Conv2dGrads {
        src: gsrc,
        kernel: gkernel,
        bias: Tensor::from_parts(DType::F64, vec![cout], gbias),
    })
}

/// Per-position linear map: `src` is `Cin×...` (any trailing extents), `weights`
/// is `Cout×Cin`, `bias` is `Cout`.
pub fn fully_connected(src: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    weights.expect_ndim(2, "fully_connected weights")?;
    let (cout, cin) = (weights.shape()[0], weights.shape()[1]);
    let (&c, rest) = src
        .shape()
        .split_first()
        .ok_or_else(|| shape_err!("fully_connected on a scalar"))?;
    if c != cin {
        return Err(shape_err!(
            "fully_connected: weights expect {cin} input channels, input has {c}"
        ));
    }
    let n: usize = rest.iter().product();
    let mut out = vec![0.0; cout * n];
    let mut beta = 0.0;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("fully_connected bias {:?} for {cout} outputs", b.shape()));
        }
        for (row, &bv) in out.chunks_mut(n.max(1)).zip(b.data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        beta = 1.0;
    }
    gemm(cout, cin, n, weights.data(), false, src.data(), false, beta, &mut out);
    let mut shape = vec![cout];
    shape.extend_from_slice(rest);
    Ok(Tensor::from_parts(src.dtype().promote(weights.dtype()), shape, out))
}

/// Separable bilinear resampling table for one axis (half-pixel centres, edge clamped).
#[derive(Debug, Clone)]
pub(crate) struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let mut lo = Vec::with_capacity(dst_len);
        let mut hi = Vec::with_capacity(dst_len);
        let mut frac = Vec::with_capacity(dst_len);
        for i in 0..dst_len {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let l = s.floor() as usize;
            lo.push(l);
            hi.push((l + 1).min(src_len - 1));
            frac.push(s - l as f64);
        }
        ResizeAxis { lo, hi, frac }
    }
}

/// Bilinear resize of a `C×h×w` tensor to `C×out_h×out_w`.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    src.expect_ndim(3, "resize_bilinear input")?;
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == 0 || w == 0 {
        return Err(shape_err!("resize_bilinear of empty plane"));
    }
    let ay = ResizeAxis::new(h, out_h);
    let ax = ResizeAxis::new(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for (dst, plane) in out.chunks_mut(out_h * out_w).zip(src.data().chunks(h * w)) {
        for y in 0..out_h {
            let (r0, r1, fy) = (ay.lo[y] * w, ay.hi[y] * w, ay.frac[y]);
            for x in 0..out_w {
                let (c0, c1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                let top = (1.0 - fx) * plane[r0 + c0] + fx * plane[r0 + c1];
                let bot = (1.0 - fx) * plane[r1 + c0] + fx * plane[r1 + c1];
                dst[y * out_w + x] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Ok(Tensor::from_parts(src.dtype(), vec![c, out_h, out_w], out))
}

/// Adjoint of [`resize_bilinear`] for an input of extent `h×w`.
pub fn resize_bilinear_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    grad_out.expect_ndim(3, "resize_bilinear grad")?;
    let (c, out_h, out_w) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let ay = ResizeAxis::new(h, out_h);
    let ax = ResizeAxis::new(w, out_w);
    let mut gin = vec![0.0; c * h * w];
    for (plane, go) in gin.chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for y in 0..out_h {
            let (r0, r1, fy) = (ay.lo[y] * w, ay.hi[y] * w, ay.frac[y]);
            for x in 0..out_w {
                let (c0, c1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                let g = go[y * out_w + x];
                plane[r0 + c0] += (1.0 - fy) * (1.0 - fx) * g;
                plane[r0 + c1] += (1.0 - fy) * fx * g;
                plane[r1 + c0] += fy * (1.0 - fx) * g;
                plane[r1 + c1] += fy * fx * g;
            }
        }
    }
    Ok(Tensor::from_parts(DType::F64, vec![c, h, w], gin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn bilinear_constant_and_ramp() {
        let ones = Tensor::new(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(bilinear_sample(&ones, &[(0.5, 0.5)]).unwrap().data(), &[1.0]);
        let ramp = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&ramp, &[(0.5, 0.0)]).unwrap().data(), &[0.5]);
    }

    #[test]
    fn bilinear_matches_scalar_four_tap_formula() {
        let src = random(&[4, 4], 7);
        let (x, y) = (1.25, 2.75);
        // Explicit 4-tap formula, written out by hand for this coordinate.
        let v = |r: usize, c: usize| src.at(&[r, c]);
        let expected = 0.75 * 0.25 * v(2, 1)
            + 0.25 * 0.25 * v(2, 2)
            + 0.75 * 0.75 * v(3, 1)
            + 0.25 * 0.75 * v(3, 2);
        let got = bilinear_sample(&src, &[(x, y)]).unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn bilinear_zero_pads_outside() {
        let ones = Tensor::full(&[3, 3], 1.0);
        let v = bilinear_sample(&ones, &[(-0.5, 1.0), (2.5, 2.5), (10.0, 0.0)]).unwrap();
        assert_eq!(v.data(), &[0.5, 0.25, 0.0]);
    }

    #[test]
    fn bilinear_rejects_non_2d() {
        assert!(bilinear_sample(&Tensor::zeros(&[1, 2, 2]), &[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn pooling_cases() {
        let src = random(&[3, 4, 4], 1);
        assert!(avg_pool2d(&src, 1).unwrap().bit_eq(&src));
        let t = Tensor::new(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(avg_pool2d(&t, 2).unwrap().data(), &[4.0]);
        assert!(avg_pool2d(&Tensor::zeros(&[6, 5]), 2).is_err());
    }

    #[test]
    fn pooling_matches_windowed_mean_oracle() {
        let ramp = Tensor::from_fn(&[8, 8], |i| i as f64);
        let got = avg_pool2d(&ramp, 4).unwrap();
        assert_eq!(got.shape(), &[2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for y in oy * 4..oy * 4 + 4 {
                    for x in ox * 4..ox * 4 + 4 {
                        s += ramp.at(&[y, x]);
                    }
                }
                assert_eq!(got.at(&[oy, ox]), s / 16.0);
            }
        }
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let x = random(&[2, 8, 8], 3);
        let g = random(&[2, 4, 4], 4);
        let y = avg_pool2d(&x, 2).unwrap();
        let mut gx = Tensor::zeros(&[2, 8, 8]);
        avg_pool2d_backward_into(&g, 2, &mut gx).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn naive_conv(src: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let (cin, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let mut out = Tensor::zeros(&[cout, h, w]);
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - (kh / 2) as isize;
                                let sx = x as isize + dx as isize - (kw / 2) as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += k.at(&[co, ci, dy, dx])
                                        * src.at(&[ci, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, y, x], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_and_box_kernels() {
        let src = random(&[1, 5, 5], 2);
        let mut ident = Tensor::zeros(&[1, 1, 3, 3]);
        ident.set(&[0, 0, 1, 1], 1.0);
        assert!(conv2d(&src, &ident, None).unwrap().bit_eq(&src));

        let c = Tensor::full(&[1, 5, 5], 0.7);
        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&c, &ones, None).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert!((out.at(&[0, y, x]) - 6.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (kh, cin, cout) in [(3, 2, 3), (1, 4, 2), (7, 2, 2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let src = Tensor::from_fn(&[cin, 5, 5], |_| rng.random_range(-1.0..1.0));
            let k = Tensor::from_fn(&[cout, cin, kh, kh], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn(&[cout], |_| rng.random_range(-1.0..1.0));
            let got = conv2d(&src, &k, Some(&b)).unwrap();
            let want = naive_conv(&src, &k, &b);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let src = random(&[3, 6, 5], 5);
        let k = random(&[2, 3, 3, 3], 6);
        let g = random(&[2, 6, 5], 7);
        let y = conv2d(&src, &k, None).unwrap();
        let grads = conv2d_backward(&src, &k, &g, true, true).unwrap();
        let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
        // <conv(x), g> is bilinear in (x, k): both adjoints reproduce it.
        let lhs = dot(&y, &g);
        assert!((lhs - dot(&src, grads.src.as_ref().unwrap())).abs() < 1e-10);
        assert!((lhs - dot(&k, grads.kernel.as_ref().unwrap())).abs() < 1e-10);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let src = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&src, &k, None), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn fully_connected_is_per_pixel_matvec() {
        let src = random(&[3, 2, 2], 8);
        let w = random(&[2, 3], 9);
        let b = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        let out = fully_connected(&src, &w, Some(&b)).unwrap();
        for p in 0..4 {
            for o in 0..2 {
                let want: f64 = b.data()[o]
                    + (0..3).map(|i| w.at(&[o, i]) * src.data()[i * 4 + p]).sum::<f64>();
                assert!((out.data()[o * 4 + p] - want).abs() < 1e-14);
            }
        }
        assert!(fully_connected(&Tensor::zeros(&[2, 2, 2]), &w, None).is_err());
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = random(&[2, 3, 4], 10);
        let g = random(&[2, 6, 8], 11);
        let y = resize_bilinear(&x, 6, 8).unwrap();
        let gx = resize_bilinear_backward(&g, 3, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Learnable 2-D Gaussian uncertainty over correspondence maps.
//!
//! Each source pixel gets a diagonal Gaussian `(E_μ, E_c)` over target
//! coordinates. Its truncated, scaled density `M` reweights the correlation
//! volume as `C ← C·(1 + M)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::correlation::{
    accumulate_geometry, channel_to_pixel, lookup_rows, lookup_rows_backward, pixel_to_channel, CellDelta,
    CorrPyramid, SampleGrid, LEVELS,
};
use crate::error::{shape_err, Error, Result};
use crate::geometry::expect_coords;
use crate::nn::Conv;
use crate::tensor::Tensor;

pub const ALPHA: f64 = 5.0;
pub const BETA: f64 = 0.05;
pub const MASK_SCALE: f64 = 3.0;
pub const NORM_EPS: f64 = 1e-5;

/// `round((H + W) / 16)`, at least 1.
pub fn truncation_radius(h: usize, w: usize) -> usize {
    (((h + w) as f64) / 16.0).round().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Density multiplier `s`.
    pub scale: f64,
    /// Chebyshev truncation radius `r₁` in grid cells.
    pub radius: usize,
}

impl MaskParams {
    pub fn for_grid(h: usize, w: usize) -> Self {
        MaskParams {
            scale: MASK_SCALE,
            radius: truncation_radius(h, w),
        }
    }
}

/// Density and its partials w.r.t. the mean and the two variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityGrad {
    pub value: f64,
    pub d_mu: (f64, f64),
    pub d_c: (f64, f64),
}

#[inline]
pub(crate) fn density_grad(mu: (f64, f64), c: (f64, f64), p: (f64, f64)) -> DensityGrad {
    let (dx, dy) = (p.0 - mu.0, p.1 - mu.1);
    let value = (-0.5 * (dx * dx / c.0 + dy * dy / c.1)).exp() / (2.0 * PI * (c.0 * c.1).sqrt());
    DensityGrad {
        value,
        d_mu: (value * dx / c.0, value * dy / c.1),
        d_c: (
            value / (2.0 * c.0) * (dx * dx / c.0 - 1.0),
            value / (2.0 * c.1) * (dy * dy / c.1 - 1.0),
        ),
    }
}

/// Diagonal-covariance Gaussian density at `p`.
pub fn density(mu: (f64, f64), c: (f64, f64), p: (f64, f64)) -> Result<f64> {
    if !(c.0 > 0.0 && c.1 > 0.0) {
        return Err(Error::Contract(format!("covariance must be positive, got {c:?}")));
    }
    Ok(density_grad(mu, c, p).value)
}

fn check_field(e_mu: &Tensor, e_c: &Tensor) -> Result<(usize, usize)> {
    e_mu.expect_ndim(3, "E_mu")?;
    let (h, w) = (e_mu.shape()[1], e_mu.shape()[2]);
    expect_coords(e_mu, h, w)?;
    expect_coords(e_c, h, w)?;
    if !e_mu.is_finite() || !e_c.is_finite() {
        return Err(Error::NonFinite("the Gaussian field".into()));
    }
    if let Some(bad) = e_c.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Contract(format!("covariance must be positive, found {bad}")));
    }
    Ok((h, w))
}

fn anchors(e_mu: &Tensor) -> Vec<(i64, i64)> {
    let hw = e_mu.numel() / 2;
    (0..hw)
        .map(|p| (e_mu.data()[p].round() as i64, e_mu.data()[hw + p].round() as i64))
        .collect()
}

#[inline]
fn pixel_params(e_mu: &[f64], e_c: &[f64], hw: usize, p: usize) -> ((f64, f64), (f64, f64)) {
    ((e_mu[p], e_mu[hw + p]), (e_c[p], e_c[hw + p]))
}

/// Dense truncated mask: `s·density` on the `(2r₁+1)²` integer cells around
/// `round(E_μ)`, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    pub params: MaskParams,
    pub anchors: Vec<(i64, i64)>,
    /// `HW × (2r₁+1)²`, window cell `(dx, dy)` at `(dy+r₁)(2r₁+1) + dx+r₁`.
    pub values: Tensor,
}

impl GaussianMask {
    pub fn window(&self) -> usize {
        2 * self.params.radius + 1
    }

    /// Mask value of pixel `p` at target cell `(x, y)`.
    pub fn at(&self, p: usize, x: i64, y: i64) -> f64 {
        let r = self.params.radius as i64;
        let (ax, ay) = self.anchors[p];
        let (dx, dy) = (x - ax, y - ay);
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        let n = self.window();
        self.values.data()[p * n * n + ((dy + r) as usize) * n + (dx + r) as usize]
    }
}

pub fn build_mask(e_mu: &Tensor, e_c: &Tensor, params: MaskParams) -> Result<GaussianMask> {
    let (h, w) = check_field(e_mu, e_c)?;
    let hw = h * w;
    let anchors = anchors(e_mu);
    let n = 2 * params.radius + 1;
    let r = params.radius as i64;
    let mut values = vec![0.0; hw * n * n];
    values.par_chunks_mut(n * n).enumerate().for_each(|(p, win)| {
        let (mu, c) = pixel_params(e_mu.data(), e_c.data(), hw, p);
        let (ax, ay) = anchors[p];
        for dy in -r..=r {
            for dx in -r..=r {
                let q = ((ax + dx) as f64, (ay + dy) as f64);
                win[((dy + r) * n as i64 + dx + r) as usize] = params.scale * density_grad(mu, c, q).value;
            }
        }
    });
    Ok(GaussianMask {
        params,
        anchors,
        values: Tensor::new(&[hw, n * n], values)?,
    })
}

/// `C[p, q] ← C[p, q]·(1 + M[p, q])` on a `H×W×H×W` volume.
pub fn apply_mask(volume: &Tensor, mask: &GaussianMask) -> Result<Tensor> {
    volume.expect_ndim(4, "correlation volume")?;
    let (h, w) = (volume.shape()[2], volume.shape()[3]);
    let hw = h * w;
    if volume.shape()[0] * volume.shape()[1] != mask.anchors.len() {
        return Err(shape_err!("mask covers {} pixels, volume {:?}", mask.anchors.len(), volume.shape()));
    }
    let mut out = volume.clone();
    let r = mask.params.radius as i64;
    out.data_mut().par_chunks_mut(hw).enumerate().for_each(|(p, row)| {
        let (ax, ay) = mask.anchors[p];
        for y in (ay - r).max(0)..=(ay + r).min(h as i64 - 1) {
            for x in (ax - r).max(0)..=(ax + r).min(w as i64 - 1) {
                row[y as usize * w + x as usize] *= 1.0 + mask.at(p, x, y);
            }
        }
    });
    Ok(out)
}

/// Continuous mask for on-the-fly sampling: the factor `1 + s·density` is
/// evaluated at the exact sample position, truncated to the same window.
#[derive(Debug, Clone)]
pub struct ContinuousMask {
    e_mu: Tensor,
    e_c: Tensor,
    anchors: Vec<(i64, i64)>,
    params: MaskParams,
}

/// Mask factor and its partials w.r.t. the pixel's Gaussian parameters.
pub(crate) struct FactorGrad {
    pub factor: f64,
    pub d_mu: (f64, f64),
    pub d_c: (f64, f64),
}

impl ContinuousMask {
    pub fn new(e_mu: Tensor, e_c: Tensor, params: MaskParams) -> Result<Self> {
        check_field(&e_mu, &e_c)?;
        let anchors = anchors(&e_mu);
        Ok(ContinuousMask {
            e_mu,
            e_c,
            anchors,
            params,
        })
    }

    #[inline]
    fn inside(&self, p: usize, x: f64, y: f64) -> bool {
        let (ax, ay) = self.anchors[p];
        let r = self.params.radius as f64;
        (x - ax as f64).abs() <= r && (y - ay as f64).abs() <= r
    }

    #[inline]
    pub fn factor(&self, p: usize, x: f64, y: f64) -> f64 {
        if !self.inside(p, x, y) {
            return 1.0;
        }
        let hw = self.anchors.len();
        let (mu, c) = pixel_params(self.e_mu.data(), self.e_c.data(), hw, p);
        1.0 + self.params.scale * density_grad(mu, c, (x, y)).value
    }

    #[inline]
    pub(crate) fn factor_grad(&self, p: usize, x: f64, y: f64) -> FactorGrad {
        if !self.inside(p, x, y) {
            return FactorGrad {
                factor: 1.0,
                d_mu: (0.0, 0.0),
                d_c: (0.0, 0.0),
            };
        }
        let hw = self.anchors.len();
        let (mu, c) = pixel_params(self.e_mu.data(), self.e_c.data(), hw, p);
        let g = density_grad(mu, c, (x, y));
        let s = self.params.scale;
        FactorGrad {
            factor: 1.0 + s * g.value,
            d_mu: (s * g.d_mu.0, s * g.d_mu.1),
            d_c: (s * g.d_c.0, s * g.d_c.1),
        }
    }
}

/// Per-pixel layout of the masked-minus-unmasked pooled corrections.
///
/// At level `l` the window touches at most `(2r₁ >> l) + 2` pooled cells per
/// axis; each pixel stores a dense block of that size per level, anchored at
/// the pooled cell holding the window's top-left corner.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    h: usize,
    w: usize,
    params: MaskParams,
    anchors: Vec<(i64, i64)>,
    side: [usize; LEVELS],
    start: [usize; LEVELS],
    width: usize,
}

impl WindowLayout {
    fn new(h: usize, w: usize, params: MaskParams, anchors: Vec<(i64, i64)>) -> Self {
        let mut side = [0; LEVELS];
        let mut start = [0; LEVELS];
        let mut width = 0;
        for l in 0..LEVELS {
            side[l] = ((2 * params.radius) >> l) + 2;
            start[l] = width;
            width += side[l] * side[l];
        }
        WindowLayout {
            h,
            w,
            params,
            anchors,
            side,
            start,
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn origin(&self, p: usize, l: usize) -> (i64, i64) {
        let r = self.params.radius as i64;
        let (ax, ay) = self.anchors[p];
        ((ax - r).div_euclid(1 << l), (ay - r).div_euclid(1 << l))
    }

    #[inline]
    fn slot_of(&self, p: usize, l: usize, qx: i64, qy: i64) -> Option<usize> {
        let (ox, oy) = self.origin(p, l);
        let (bx, by) = (qx - ox, qy - oy);
        let side = self.side[l] as i64;
        (bx >= 0 && by >= 0 && bx < side && by < side)
            .then(|| self.start[l] + (by * side + bx) as usize)
    }

    /// In-grid window cells of pixel `p` as `(x, y)`.
    fn cells(&self, p: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.params.radius as i64;
        let (ax, ay) = self.anchors[p];
        let (h, w) = (self.h as i64, self.w as i64);
        ((ay - r).max(0)..=(ay + r).min(h - 1)).flat_map(move |y| {
            ((ax - r).max(0)..=(ax + r).min(w - 1)).map(move |x| (x as usize, y as usize))
        })
    }
}

struct DeltaView<'a> {
    layout: &'a WindowLayout,
    data: &'a [f64],
}

impl CellDelta for DeltaView<'_> {
    fn data(&self) -> &[f64] {
        self.data
    }

    fn width(&self) -> usize {
        self.layout.width
    }

    #[inline]
    fn window(&self, p: usize, l: usize) -> (usize, i64, i64, usize) {
        let (ox, oy) = self.layout.origin(p, l);
        (self.layout.start[l], ox, oy, self.layout.side[l])
    }
}

/// Pooled corrections `mean_{cell ∈ block} C[p, cell]·M[p, cell]` per level.
fn window_delta(pyr: &CorrPyramid, layout: &WindowLayout, e_mu: &Tensor, e_c: &Tensor) -> Vec<f64> {
    let (h, w) = (layout.h, layout.w);
    let hw = h * w;
    let vol = pyr.level(0).data();
    let s = layout.params.scale;
    let mut out = vec![0.0; hw * layout.width];
    out.par_chunks_mut(layout.width).enumerate().for_each(|(p, row)| {
        let (mu, c) = pixel_params(e_mu.data(), e_c.data(), hw, p);
        let vrow = &vol[p * hw..(p + 1) * hw];
        for (x, y) in layout.cells(p) {
            let v = vrow[y * w + x] * s * density_grad(mu, c, (x as f64, y as f64)).value;
            for l in 0..LEVELS {
                let slot = layout
                    .slot_of(p, l, (x >> l) as i64, (y >> l) as i64)
                    .expect("window cell inside its own footprint");
                row[slot] += v / (1usize << (2 * l)) as f64;
            }
        }
    });
    out
}

/// Learned Gaussian encoder: a shared per-pixel layer with GeLU, then one
/// head for the expectation residual and one for the raw covariance.
#[derive(Debug, Clone, Copy)]
pub struct GaussianEncoder {
    pub shared: Conv,
    pub residual: Conv,
    pub covariance: Conv,
}

impl GaussianEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize) -> Result<Self> {
        let c2 = 2 * channels;
        Ok(GaussianEncoder {
            shared: Conv::new(store, rng, &format!("{prefix}.f_gs"), c2, c2, 1, 1.0)?,
            residual: Conv::new(store, rng, &format!("{prefix}.f_r"), c2, 2, 1, 0.1)?,
            covariance: Conv::new(store, rng, &format!("{prefix}.f_c"), c2, 2, 1, 1.0)?,
        })
    }

    /// `(E_r, raw E_c)`, both `2×H×W`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, f_i: Var, f_j: Var) -> Result<(Var, Var)> {
        if tape.value(f_i).shape() != tape.value(f_j).shape() {
            return Err(shape_err!(
                "feature maps differ: {:?} vs {:?}",
                tape.value(f_i).shape(),
                tape.value(f_j).shape()
            ));
        }
        let x = tape.cat_channels(&[f_i, f_j])?;
        let z = self.shared.forward(tape, store, x)?;
        let z = tape.gelu(z);
        let e_r = self.residual.forward(tape, store, z)?;
        let e_c = self.covariance.forward(tape, store, z)?;
        Ok((e_r, e_c))
    }

    /// Full field: `E_μ = grid + E_r`, `E_c = α·sigmoid(Norm_corr(raw)) + β`.
    pub fn field(&self, tape: &mut Tape, store: &ParamStore, f_i: Var, f_j: Var) -> Result<(Var, Var)> {
        let (h, w) = (tape.value(f_i).shape()[1], tape.value(f_i).shape()[2]);
        let (e_r, raw) = self.encode(tape, store, f_i, f_j)?;
        let base = tape.constant(crate::geometry::grid_coords(h, w));
        let e_mu = tape.add(base, e_r)?;
        let e_c = tape.normalize_covariance(raw)?;
        Ok((e_mu, e_c))
    }
}

/// Pure form of the covariance normalisation.
pub fn normalize_covariance(raw: &Tensor) -> Result<Tensor> {
    let (z, _) = crate::autodiff::norm_corr(raw, NORM_EPS)?;
    Ok(z.map(|v| bounded(ALPHA * crate::autodiff::sigmoid(v) + BETA)))
}

/// Keeps `α·σ + β` strictly inside `(β, α+β)` when `σ` rounds to 0 or 1.
#[inline]
fn bounded(v: f64) -> f64 {
    if v <= BETA {
        BETA.next_up()
    } else if v >= ALPHA + BETA {
        (ALPHA + BETA).next_down()
    } else {
        v
    }
}

impl Tape {
    /// `α·sigmoid(Norm_corr(raw)) + β` over spatial positions per channel.
    pub fn normalize_covariance(&mut self, raw: Var) -> Result<Var> {
        let z = self.norm_corr(raw, NORM_EPS)?;
        let value = self.value(z).map(|v| bounded(ALPHA * crate::autodiff::sigmoid(v) + BETA));
        Ok(self.push("scaled_sigmoid", value, &[z], move |ctx| {
            let (g, z) = (ctx.grad.data(), ctx.input(0).data());
            let acc = ctx.grad_mut(0);
            for ((a, &g), &z) in acc.data_mut().iter_mut().zip(g).zip(z) {
                let s = crate::autodiff::sigmoid(z);
                *a += g * ALPHA * s * (1.0 - s);
            }
            Ok(())
        }))
    }

    /// Dense masked volume `C·(1 + M)`; gradients reach the volume, `E_μ` and `E_c`.
    pub fn gaussian_mask_volume(&mut self, volume: Var, e_mu: Var, e_c: Var, params: MaskParams) -> Result<Var> {
        let mask = build_mask(self.value(e_mu), self.value(e_c), params)?;
        let value = apply_mask(self.value(volume), &mask)?;
        let anchors = Arc::new(mask.anchors);
        Ok(self.push("gaussian_mask_volume", value, &[volume, e_mu, e_c], move |ctx| {
            let (vol, mu, cov) = (ctx.input(0), ctx.input(1), ctx.input(2));
            let (h, w) = (vol.shape()[2], vol.shape()[3]);
            let hw = h * w;
            let g = ctx.grad.data();
            let layout = WindowLayout::new(h, w, params, anchors.as_ref().clone());
            // per pixel: d mu (2), d c (2)
            let mut gp = vec![0.0; hw * 4];
            let want_vol = ctx.wants(0);
            let mut gvol = if want_vol { g.to_vec() } else { Vec::new() };
            gp.par_chunks_mut(4).enumerate().for_each(|(p, out)| {
                let (m, c) = pixel_params(mu.data(), cov.data(), hw, p);
                for (x, y) in layout.cells(p) {
                    let q = p * hw + y * w + x;
                    let d = density_grad(m, c, (x as f64, y as f64));
                    let gm = g[q] * vol.data()[q] * params.scale;
                    out[0] += gm * d.d_mu.0;
                    out[1] += gm * d.d_mu.1;
                    out[2] += gm * d.d_c.0;
                    out[3] += gm * d.d_c.1;
                }
            });
            if want_vol {
                gvol.par_chunks_mut(hw).enumerate().for_each(|(p, row)| {
                    let (m, c) = pixel_params(mu.data(), cov.data(), hw, p);
                    for (x, y) in layout.cells(p) {
                        row[y * w + x] *= 1.0 + params.scale * density_grad(m, c, (x as f64, y as f64)).value;
                    }
                });
                ctx.accumulate(0, Tensor::new(vol.shape(), gvol)?);
            }
            let (mut gmu, mut gc) = (vec![0.0; 2 * hw], vec![0.0; 2 * hw]);
            for p in 0..hw {
                gmu[p] = gp[4 * p];
                gmu[hw + p] = gp[4 * p + 1];
                gc[p] = gp[4 * p + 2];
                gc[hw + p] = gp[4 * p + 3];
            }
            ctx.accumulate(1, Tensor::new(&[2, h, w], gmu)?);
            ctx.accumulate(2, Tensor::new(&[2, h, w], gc)?);
            Ok(())
        }))
    }

    /// Masked-minus-unmasked pooled corrections for a constant pyramid; the
    /// value is `HW × layout.width()`. Feed it to [`Tape::corr_lookup_masked`].
    pub fn gaussian_window_delta(
        &mut self,
        pyr: &Arc<CorrPyramid>,
        e_mu: Var,
        e_c: Var,
        params: MaskParams,
    ) -> Result<(Var, Arc<WindowLayout>)> {
        let (h, w) = check_field(self.value(e_mu), self.value(e_c))?;
        if (pyr.height(), pyr.width()) != (h, w) {
            return Err(shape_err!("pyramid {}×{} vs field {h}×{w}", pyr.height(), pyr.width()));
        }
        let layout = Arc::new(WindowLayout::new(h, w, params, anchors(self.value(e_mu))));
        let data = window_delta(pyr, &layout, self.value(e_mu), self.value(e_c));
        let value = Tensor::new(&[h * w, layout.width], data)?;
        let (pyr2, lay2) = (Arc::clone(pyr), Arc::clone(&layout));
        let var = self.push("gaussian_window_delta", value, &[e_mu, e_c], move |ctx| {
            let (mu, cov) = (ctx.input(0), ctx.input(1));
            let hw = h * w;
            let g = ctx.grad.data();
            let vol = pyr2.level(0).data();
            let lay = &lay2;
            let mut gp = vec![0.0; hw * 4];
            gp.par_chunks_mut(4).enumerate().for_each(|(p, out)| {
                let (m, c) = pixel_params(mu.data(), cov.data(), hw, p);
                let grow = &g[p * lay.width..(p + 1) * lay.width];
                for (x, y) in lay.cells(p) {
                    let mut gv = 0.0;
                    for l in 0..LEVELS {
                        let slot = lay.slot_of(p, l, (x >> l) as i64, (y >> l) as i64).expect("in footprint");
                        gv += grow[slot] / (1usize << (2 * l)) as f64;
                    }
                    if gv == 0.0 {
                        continue;
                    }
                    let gm = gv * vol[p * hw + y * w + x] * params.scale;
                    let d = density_grad(m, c, (x as f64, y as f64));
                    out[0] += gm * d.d_mu.0;
                    out[1] += gm * d.d_mu.1;
                    out[2] += gm * d.d_c.0;
                    out[3] += gm * d.d_c.1;
                }
            });
            let (mut gmu, mut gc) = (vec![0.0; 2 * hw], vec![0.0; 2 * hw]);
            for p in 0..hw {
                gmu[p] = gp[4 * p];
                gmu[hw + p] = gp[4 * p + 1];
                gc[p] = gp[4 * p + 2];
                gc[hw + p] = gp[4 * p + 3];
            }
            ctx.accumulate(0, Tensor::new(&[2, h, w], gmu)?);
            ctx.accumulate(1, Tensor::new(&[2, h, w], gc)?);
            Ok(())
        });
        Ok((var, layout))
    }

    /// Lookup on a constant pyramid, optionally corrected by a Gaussian window
    /// delta so that it samples the pyramid of the masked volume.
    pub fn corr_lookup_masked(
        &mut self,
        pyr: &Arc<CorrPyramid>,
        delta: Option<(Var, &Arc<WindowLayout>)>,
        coords: Var,
        offsets: Option<&[Var]>,
        r: usize,
    ) -> Result<Var> {
        let (h, w) = (pyr.height(), pyr.width());
        let off: Option<Vec<Tensor>> = offsets.map(|o| o.iter().map(|&v| self.value(v).clone()).collect());
        let value = {
            let grid = SampleGrid::new(h, w, r, self.value(coords), off.as_ref().map(|o| o.iter().collect()))?;
            let rows = match delta {
                Some((d, lay)) => {
                    let view = DeltaView {
                        layout: lay,
                        data: self.value(d).data(),
                    };
                    lookup_rows(pyr.levels(), &grid, Some(&view))
                }
                None => lookup_rows(pyr.levels(), &grid, None),
            };
            let n = grid.width_out();
            Tensor::new(&[n, h, w], pixel_to_channel(&rows, h * w, n))?.ensure_finite("masked lookup")?
        };
        let mut inputs = vec![coords];
        let has_off = offsets.is_some();
        inputs.extend(offsets.into_iter().flatten());
        if let Some((d, _)) = delta {
            inputs.push(d);
        }
        let pyr2 = Arc::clone(pyr);
        let lay2 = delta.map(|(_, l)| Arc::clone(l));
        Ok(self.push("corr_lookup_masked", value, &inputs, move |ctx| {
            let off: Option<Vec<&Tensor>> = has_off.then(|| (0..LEVELS).map(|l| ctx.input(1 + l)).collect());
            let grid = SampleGrid::new(h, w, r, ctx.input(0), off)?;
            let taps = grid.taps;
            let n = grid.width_out();
            let grad_rows = channel_to_pixel(ctx.grad.data(), h * w, n);
            let d_at = 1 + if has_off { LEVELS } else { 0 };
            let (geo, dgrad) = match &lay2 {
                Some(lay) => {
                    let view = DeltaView {
                        layout: lay,
                        data: ctx.input(d_at).data(),
                    };
                    let (geo, _, dg) = lookup_rows_backward(pyr2.levels(), &grid, &grad_rows, false, Some(&view));
                    (geo, dg)
                }
                None => {
                    let (geo, _, _) = lookup_rows_backward(pyr2.levels(), &grid, &grad_rows, false, None);
                    (geo, None)
                }
            };
            drop(grid);
            if let (Some(dg), Some(lay)) = (dgrad, &lay2) {
                ctx.accumulate(d_at, Tensor::new(&[h * w, lay.width], dg)?);
            }
            accumulate_geometry(ctx, 0, geo, h, w, taps)
        }))
    }
}

//! All-pairs correlation volumes, their pooled pyramid and windowed lookups.
//!
//! Two equivalent ways to produce the lookup tensor are provided. The
//! materialized path builds the `H×W×H×W` volume once and pools it; the
//! on-the-fly path pools only the target features and forms each sampled
//! correlation as an inner product with a bilinearly interpolated feature
//! vector. Pooling and bilinear interpolation are both linear, so the two
//! agree up to rounding.
//!
//! Coordinates are `2×H×W` (channel 0 = x, channel 1 = y). Offsets for one
//! level are `2T×H×W` with `T = (2r+1)²`; channel `2k` shifts tap `k` in x and
//! `2k+1` in y. Tap `k` sits at integer offset `(k mod (2r+1) - r, k div (2r+1) - r)`.
//! Lookup output is `(LEVELS·T)×H×W`, level-major.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gaussian::{ContinuousMask, MaskParams};
use crate::geometry::expect_coords;
use crate::tensor::{self, gemm, Bilinear, Tensor};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrPath {
    #[default]
    Materialized,
    Onthefly,
}

impl CorrPath {
    pub fn name(self) -> &'static str {
        match self {
            CorrPath::Materialized => "materialized",
            CorrPath::Onthefly => "onthefly",
        }
    }
}

impl std::str::FromStr for CorrPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "materialized" => Ok(CorrPath::Materialized),
            "onthefly" | "on-the-fly" => Ok(CorrPath::Onthefly),
            other => Err(Error::Config(format!("unknown correlation path {other:?}"))),
        }
    }
}

pub fn num_taps(r: usize) -> usize {
    (2 * r + 1) * (2 * r + 1)
}

/// Integer `(dx, dy)` of tap `k` in a radius-`r` window.
#[inline]
pub fn tap_offset(k: usize, r: usize) -> (f64, f64) {
    let n = 2 * r + 1;
    ((k % n) as f64 - r as f64, (k / n) as f64 - r as f64)
}

#[inline]
fn level_scale(l: usize) -> f64 {
    0.5f64.powi(l as i32)
}

/// Multiply-accumulate counts from the complexity analysis: `C·(HW)²` to
/// materialize one volume, `C·HW·(2r+1)²` to sample one level on the fly.
pub fn mac_estimate(path: CorrPath, h: usize, w: usize, c: usize, r: usize) -> f64 {
    let hw = (h * w) as f64;
    match path {
        CorrPath::Materialized => c as f64 * hw * hw,
        CorrPath::Onthefly => c as f64 * hw * num_taps(r) as f64,
    }
}

fn check_pair(f_i: &Tensor, f_j: &Tensor) -> Result<(usize, usize, usize)> {
    f_i.expect_ndim(3, "source features")?;
    if f_i.shape() != f_j.shape() {
        return Err(shape_err!(
            "feature maps differ: {:?} vs {:?}",
            f_i.shape(),
            f_j.shape()
        ));
    }
    Ok((f_i.shape()[0], f_i.shape()[1], f_i.shape()[2]))
}

fn check_levels(h: usize, w: usize) -> Result<()> {
    let k = 1 << (LEVELS - 1);
    if h % k != 0 || w % k != 0 {
        return Err(shape_err!(
            "grid {h}×{w} must be divisible by {k} for a {LEVELS}-level pyramid"
        ));
    }
    Ok(())
}

/// `C[u,v,x,y] = Σ_c f_i[c,u,v]·f_j[c,x,y] / √C`, shaped `H×W×H×W`.
pub fn build_volume(f_i: &Tensor, f_j: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_pair(f_i, f_j)?;
    let hw = h * w;
    let mut out = vec![0.0; hw * hw];
    gemm(hw, c, hw, f_i.data(), true, f_j.data(), false, 0.0, &mut out);
    let s = 1.0 / (c as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= s);
    Ok(Tensor::from_parts(f_i.dtype().promote(f_j.dtype()), vec![h, w, h, w], out))
}

/// Pools the trailing two dims of a volume with kernels `1, 2, 4, 8`.
pub fn pool_volume(volume: &Tensor) -> Result<Vec<Tensor>> {
    volume.expect_ndim(4, "correlation volume")?;
    check_levels(volume.shape()[2], volume.shape()[3])?;
    (0..LEVELS)
        .map(|l| tensor::avg_pool2d(volume, 1 << l))
        .collect()
}

/// Pools `C×H×W` target features with kernels `1, 2, 4, 8`.
pub fn pool_features(f_j: &Tensor) -> Result<Vec<Tensor>> {
    f_j.expect_ndim(3, "target features")?;
    check_levels(f_j.shape()[1], f_j.shape()[2])?;
    (0..LEVELS).map(|l| tensor::avg_pool2d(f_j, 1 << l)).collect()
}

/// Materialized pyramid; constant w.r.t. the tape.
#[derive(Debug, Clone)]
pub struct CorrPyramid {
    levels: Vec<Tensor>,
}

impl CorrPyramid {
    pub fn build(f_i: &Tensor, f_j: &Tensor) -> Result<Self> {
        let volume = build_volume(f_i, f_j)?;
        check_levels(volume.shape()[2], volume.shape()[3])?;
        let mut levels = vec![volume];
        for l in 1..LEVELS {
            levels.push(tensor::avg_pool2d(&levels[0], 1 << l)?);
        }
        Ok(CorrPyramid { levels })
    }

    pub fn from_volume(volume: &Tensor) -> Result<Self> {
        Ok(CorrPyramid {
            levels: pool_volume(volume)?,
        })
    }

    pub fn from_levels(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(shape_err!("pyramid needs {LEVELS} levels, got {}", levels.len()));
        }
        Ok(CorrPyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn height(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.levels[0].shape()[1]
    }
}

/// Where each tap of each pixel is sampled.
pub(crate) struct SampleGrid<'a> {
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub taps: usize,
    coords: &'a [f64],
    /// Pixel-major `[HW, LEVELS, 2T]`.
    offsets: Option<Vec<f64>>,
}

impl<'a> SampleGrid<'a> {
    pub fn new(
        h: usize,
        w: usize,
        r: usize,
        coords: &'a Tensor,
        offsets: Option<Vec<&'a Tensor>>,
    ) -> Result<Self> {
        expect_coords(coords, h, w)?;
        let taps = num_taps(r);
        if let Some(off) = &offsets {
            if off.len() != LEVELS {
                return Err(shape_err!("need offsets for {LEVELS} levels, got {}", off.len()));
            }
            for o in off {
                if o.shape() != [2 * taps, h, w] {
                    return Err(shape_err!(
                        "offsets must be {}×{h}×{w}, got {:?}",
                        2 * taps,
                        o.shape()
                    ));
                }
            }
        }
        let hw = h * w;
        let offsets = offsets.map(|off| {
            let n = 2 * taps;
            let mut pm = vec![0.0; hw * LEVELS * n];
            for (l, o) in off.iter().enumerate() {
                let o = o.data();
                for c in 0..n {
                    let src = &o[c * hw..(c + 1) * hw];
                    for (p, &v) in src.iter().enumerate() {
                        pm[(p * LEVELS + l) * n + c] = v;
                    }
                }
            }
            pm
        });
        Ok(SampleGrid {
            h,
            w,
            r,
            taps,
            coords: coords.data(),
            offsets,
        })
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn width_out(&self) -> usize {
        LEVELS * self.taps
    }

    /// Level-`l` sample position of tap `k` for pixel `p`.
    #[inline]
    pub fn point(&self, p: usize, l: usize, k: usize) -> (f64, f64) {
        let hw = self.hw();
        let s = level_scale(l);
        let (i, j) = tap_offset(k, self.r);
        let mut x = self.coords[p] * s + i;
        let mut y = self.coords[hw + p] * s + j;
        if let Some(off) = &self.offsets {
            let o = (p * LEVELS + l) * 2 * self.taps + 2 * k;
            x += off[o];
            y += off[o + 1];
        }
        (x, y)
    }

    pub fn has_offsets(&self) -> bool {
        self.offsets.is_some()
    }

    /// Per-pixel backward row: `[dcx, dcy]`, then `(dox, doy)` per level and tap when offset.
    fn geo_stride(&self) -> usize {
        2 + if self.has_offsets() { 2 * LEVELS * self.taps } else { 0 }
    }
}

/// Per-pixel `[n]` rows to a channel-major `n×HW` buffer.
pub(crate) fn pixel_to_channel(rows: &[f64], hw: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for p in 0..hw {
        for k in 0..n {
            out[k * hw + p] = rows[p * n + k];
        }
    }
    out
}

pub(crate) fn channel_to_pixel(data: &[f64], hw: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for k in 0..n {
        for p in 0..hw {
            out[p * n + k] = data[k * hw + p];
        }
    }
    out
}

/// Gradients of a lookup w.r.t. its coordinates and per-level offsets.
pub(crate) struct GeomGrads {
    pub coords: Vec<f64>,
    pub offsets: Option<Vec<Vec<f64>>>,
}

impl GeomGrads {
    /// Assembles channel-major gradients from per-pixel rows of
    /// `[dcx, dcy, (dox, doy) per level and tap]`.
    pub fn from_rows(rows: &[f64], grid: &SampleGrid) -> Self {
        let hw = grid.hw();
        let stride = grid.geo_stride();
        let mut coords = vec![0.0; 2 * hw];
        for p in 0..hw {
            coords[p] = rows[p * stride];
            coords[hw + p] = rows[p * stride + 1];
        }
        let offsets = grid.has_offsets().then(|| {
            (0..LEVELS)
                .map(|l| {
                    let n = 2 * grid.taps;
                    let mut o = vec![0.0; n * hw];
                    for p in 0..hw {
                        let base = p * stride + 2 + l * n;
                        for c in 0..n {
                            o[c * hw + p] = rows[base + c];
                        }
                    }
                    o
                })
                .collect()
        });
        GeomGrads { coords, offsets }
    }
}

/// Fixed-range (no `offsets`) or deformable lookup on a materialized pyramid.
pub fn lookup(levels: &[Tensor], coords: &Tensor, offsets: Option<&[Tensor]>, r: usize) -> Result<Tensor> {
    let (h, w) = check_pyramid(levels)?;
    let grid = SampleGrid::new(h, w, r, coords, offsets.map(|o| o.iter().collect()))?;
    let rows = lookup_rows(levels, &grid, None);
    let n = grid.width_out();
    Tensor::new(&[n, h, w], pixel_to_channel(&rows, grid.hw(), n))?.ensure_finite("corr lookup")
}

fn check_pyramid(levels: &[Tensor]) -> Result<(usize, usize)> {
    if levels.len() != LEVELS {
        return Err(shape_err!("pyramid needs {LEVELS} levels, got {}", levels.len()));
    }
    let (h, w) = (levels[0].shape()[0], levels[0].shape()[1]);
    for (l, t) in levels.iter().enumerate() {
        if t.shape() != [h, w, h >> l, w >> l] {
            return Err(shape_err!("pyramid level {l} has shape {:?}", t.shape()));
        }
    }
    Ok((h, w))
}

/// Per-pixel additive corrections on a square window of pooled cells, used
/// by the fused Gaussian mask.
pub(crate) trait CellDelta: Sync {
    /// Flat per-pixel rows, `width` entries each.
    fn data(&self) -> &[f64];
    fn width(&self) -> usize;
    /// `(start, origin x, origin y, side)` of pixel `p`'s level-`l` window.
    fn window(&self, p: usize, l: usize) -> (usize, i64, i64, usize);
}

/// One pixel's level-`l` plane plus its optional correction window.
struct LevelView<'a> {
    plane: &'a [f64],
    hl: i64,
    wl: i64,
    delta: Option<(&'a [f64], i64, i64, i64)>,
    /// Offset of the window inside the pixel's delta row.
    start: usize,
}

impl<'a> LevelView<'a> {
    fn new(levels: &'a [Tensor], grid: &SampleGrid, p: usize, l: usize, delta: Option<&'a dyn CellDelta>) -> Self {
        let (hl, wl) = (grid.h >> l, grid.w >> l);
        let plane = &levels[l].data()[p * hl * wl..(p + 1) * hl * wl];
        let (delta, start) = match delta {
            Some(d) => {
                let (start, ox, oy, side) = d.window(p, l);
                let row = &d.data()[p * d.width()..(p + 1) * d.width()];
                (Some((&row[start..start + side * side], ox, oy, side as i64)), start)
            }
            None => (None, 0),
        };
        LevelView {
            plane,
            hl: hl as i64,
            wl: wl as i64,
            delta,
            start,
        }
    }

    #[inline]
    fn inside(&self, qx: i64, qy: i64) -> bool {
        qx >= 0 && qy >= 0 && qx < self.wl && qy < self.hl
    }

    /// Window slot of an in-grid cell.
    #[inline]
    fn slot(&self, qx: i64, qy: i64) -> Option<usize> {
        let (_, ox, oy, side) = self.delta?;
        let (bx, by) = (qx - ox, qy - oy);
        (bx >= 0 && by >= 0 && bx < side && by < side).then(|| (by * side + bx) as usize)
    }

    #[inline]
    fn cell(&self, qx: i64, qy: i64) -> f64 {
        if !self.inside(qx, qy) {
            return 0.0;
        }
        let v = self.plane[(qy * self.wl + qx) as usize];
        if let Some((d, ox, oy, side)) = self.delta {
            let (bx, by) = (qx - ox, qy - oy);
            if bx >= 0 && by >= 0 && bx < side && by < side {
                return v + d[(by * side + bx) as usize];
            }
        }
        v
    }

    #[inline]
    fn corners(&self, x0: i64, y0: i64) -> [f64; 4] {
        if x0 >= 0 && y0 >= 0 && x0 + 1 < self.wl && y0 + 1 < self.hl {
            let wl = self.wl as usize;
            let i = y0 as usize * wl + x0 as usize;
            let mut c = [self.plane[i], self.plane[i + 1], self.plane[i + wl], self.plane[i + wl + 1]];
            if let Some((d, ox, oy, side)) = self.delta {
                let (bx, by) = (x0 - ox, y0 - oy);
                if bx >= 0 && by >= 0 && bx + 1 < side && by + 1 < side {
                    let s = side as usize;
                    let j = by as usize * s + bx as usize;
                    c[0] += d[j];
                    c[1] += d[j + 1];
                    c[2] += d[j + s];
                    c[3] += d[j + s + 1];
                } else if bx >= -1 && by >= -1 && bx < side && by < side {
                    c[0] = self.cell(x0, y0);
                    c[1] = self.cell(x0 + 1, y0);
                    c[2] = self.cell(x0, y0 + 1);
                    c[3] = self.cell(x0 + 1, y0 + 1);
                }
            }
            c
        } else if x0 < -1 || y0 < -1 || x0 >= self.wl || y0 >= self.hl {
            [0.0; 4]
        } else {
            [
                self.cell(x0, y0),
                self.cell(x0 + 1, y0),
                self.cell(x0, y0 + 1),
                self.cell(x0 + 1, y0 + 1),
            ]
        }
    }
}

/// `x.floor()` as an integer without a libm call on baseline x86-64.
#[inline]
pub(crate) fn floor_i64(x: f64) -> i64 {
    let t = x as i64;
    if (t as f64) > x {
        t - 1
    } else {
        t
    }
}

impl LevelView<'_> {
    /// Adds `g` times the bilinear weights onto the window slots of in-grid corners.
    #[inline]
    fn scatter_delta(&self, b: &Lerp, g: f64, window: &mut [f64]) {
        let Some((_, ox, oy, side)) = self.delta else {
            return;
        };
        let w = b.weights();
        let (bx, by) = (b.x0 - ox, b.y0 - oy);
        let grid_ok = b.x0 >= 0 && b.y0 >= 0 && b.x0 + 1 < self.wl && b.y0 + 1 < self.hl;
        if grid_ok && bx >= 0 && by >= 0 && bx + 1 < side && by + 1 < side {
            let s = side as usize;
            let j = by as usize * s + bx as usize;
            window[j] += g * w[0];
            window[j + 1] += g * w[1];
            window[j + s] += g * w[2];
            window[j + s + 1] += g * w[3];
        } else if bx >= -1 && by >= -1 && bx < side && by < side {
            for (c, (qx, qy)) in quad(b.x0, b.y0).into_iter().enumerate() {
                if self.inside(qx, qy) {
                    if let Some(slot) = self.slot(qx, qy) {
                        window[slot] += g * w[c];
                    }
                }
            }
        }
    }
}

#[inline]
fn quad(x0: i64, y0: i64) -> [(i64, i64); 4] {
    [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
}

/// Bilinear weights at a point, corners ordered as in [`quad`].
#[derive(Clone, Copy)]
struct Lerp {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

impl Lerp {
    #[inline]
    fn new(x: f64, y: f64) -> Self {
        let (x0, y0) = (floor_i64(x), floor_i64(y));
        Lerp {
            x0,
            y0,
            fx: x - x0 as f64,
            fy: y - y0 as f64,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    #[inline]
    fn value(&self, v: [f64; 4]) -> f64 {
        let w = self.weights();
        let mut acc = 0.0;
        for k in 0..4 {
            acc += w[k] * v[k];
        }
        acc
    }

    #[inline]
    fn grad(&self, v: [f64; 4]) -> (f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let dx = (1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]);
        let dy = (1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]);
        (dx, dy)
    }
}

impl SampleGrid<'_> {
    fn tap_table(&self) -> Vec<(f64, f64)> {
        (0..self.taps).map(|k| tap_offset(k, self.r)).collect()
    }

    /// Sample positions of all taps of pixel `p` at level `l`; matches [`SampleGrid::point`].
    #[inline]
    fn points<'s>(&'s self, table: &'s [(f64, f64)], p: usize, l: usize) -> impl Iterator<Item = (f64, f64)> + 's {
        let hw = self.hw();
        let s = level_scale(l);
        let (cx, cy) = (self.coords[p], self.coords[hw + p]);
        let off = self
            .offsets
            .as_ref()
            .map(|o| &o[(p * LEVELS + l) * 2 * self.taps..(p * LEVELS + l + 1) * 2 * self.taps]);
        table.iter().enumerate().map(move |(k, &(i, j))| {
            let mut x = cx * s + i;
            let mut y = cy * s + j;
            if let Some(o) = off {
                x += o[2 * k];
                y += o[2 * k + 1];
            }
            (x, y)
        })
    }
}

/// Pixel-major lookup rows `[HW, LEVELS·T]`.
pub(crate) fn lookup_rows(levels: &[Tensor], grid: &SampleGrid, delta: Option<&dyn CellDelta>) -> Vec<f64> {
    let n = grid.width_out();
    let table = grid.tap_table();
    let mut rows = vec![0.0; grid.hw() * n];
    rows.par_chunks_mut(n).with_min_len(32).enumerate().for_each(|(p, row)| {
        for l in 0..LEVELS {
            let view = LevelView::new(levels, grid, p, l, delta);
            let out = &mut row[l * grid.taps..(l + 1) * grid.taps];
            for (o, (x, y)) in out.iter_mut().zip(grid.points(&table, p, l)) {
                let b = Lerp::new(x, y);
                *o = b.value(view.corners(b.x0, b.y0));
            }
        }
    });
    rows
}

/// Backward of [`lookup_rows`]: geometry gradients, plus either dense level
/// gradients or per-pixel delta-row gradients.
pub(crate) fn lookup_rows_backward(
    levels: &[Tensor],
    grid: &SampleGrid,
    grad_rows: &[f64],
    want_levels: bool,
    delta: Option<&dyn CellDelta>,
) -> (GeomGrads, Option<Vec<Vec<f64>>>, Option<Vec<f64>>) {
    let n = grid.width_out();
    let hw = grid.hw();
    let taps = grid.taps;
    let table = grid.tap_table();
    let stride = grid.geo_stride();
    let has_off = grid.has_offsets();
    let mut geo = vec![0.0; hw * stride];
    let delta_width = delta.map(|d| d.width()).unwrap_or(0);
    let mut dgrad = vec![0.0; hw * delta_width];
    let body = |p: usize, g_row: &mut [f64], d_row: &mut [f64]| {
        let gin = &grad_rows[p * n..(p + 1) * n];
        for l in 0..LEVELS {
            let view = LevelView::new(levels, grid, p, l, delta);
            let s = level_scale(l);
            for (k, (x, y)) in grid.points(&table, p, l).enumerate() {
                let g = gin[l * taps + k];
                if g == 0.0 {
                    continue;
                }
                let b = Lerp::new(x, y);
                let (dx, dy) = b.grad(view.corners(b.x0, b.y0));
                g_row[0] += g * dx * s;
                g_row[1] += g * dy * s;
                if has_off {
                    let o = 2 + l * 2 * taps + 2 * k;
                    g_row[o] = g * dx;
                    g_row[o + 1] = g * dy;
                }
                if view.delta.is_some() {
                    view.scatter_delta(&b, g, &mut d_row[view.start..]);
                }
            }
        }
    };
    if delta_width > 0 {
        geo.par_chunks_mut(stride)
            .zip(dgrad.par_chunks_mut(delta_width))
            .with_min_len(32)
            .enumerate()
            .for_each(|(p, (g_row, d_row))| body(p, g_row, d_row));
    } else {
        geo.par_chunks_mut(stride)
            .with_min_len(32)
            .enumerate()
            .for_each(|(p, g_row)| body(p, g_row, &mut []));
    }
    let level_grads = want_levels.then(|| {
        levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                let plane = (grid.h >> l) * (grid.w >> l);
                let mut gl = vec![0.0; level.numel()];
                gl.par_chunks_mut(plane).enumerate().for_each(|(p, acc)| {
                    let gin = &grad_rows[p * n..(p + 1) * n];
                    for k in 0..grid.taps {
                        let g = gin[l * grid.taps + k];
                        if g != 0.0 {
                            let (x, y) = grid.point(p, l, k);
                            Bilinear::new(x, y, grid.h >> l, grid.w >> l).scatter(acc, g);
                        }
                    }
                });
                gl
            })
            .collect()
    });
    (
        GeomGrads::from_rows(&geo, grid),
        level_grads,
        (delta_width > 0).then_some(dgrad),
    )
}

/// On-the-fly lookup from `f_i` and the pooled target features, optionally
/// weighted by the continuous Gaussian mask.
pub fn lookup_onthefly(
    f_i: &Tensor,
    fj_levels: &[Tensor],
    coords: &Tensor,
    offsets: Option<&[Tensor]>,
    r: usize,
    mask: Option<&ContinuousMask>,
) -> Result<Tensor> {
    let (c, h, w) = check_pooled(f_i, fj_levels)?;
    let grid = SampleGrid::new(h, w, r, coords, offsets.map(|o| o.iter().collect()))?;
    let fi_t = channel_to_pixel(f_i.data(), h * w, c);
    let fj_t: Vec<Vec<f64>> = fj_levels
        .iter()
        .enumerate()
        .map(|(l, t)| channel_to_pixel(t.data(), (h >> l) * (w >> l), c))
        .collect();
    let rows = onthefly_rows(&fi_t, &fj_t, c, &grid, mask);
    let n = grid.width_out();
    Tensor::new(&[n, h, w], pixel_to_channel(&rows, grid.hw(), n))?.ensure_finite("on-the-fly lookup")
}

fn check_pooled(f_i: &Tensor, fj_levels: &[Tensor]) -> Result<(usize, usize, usize)> {
    f_i.expect_ndim(3, "source features")?;
    let (c, h, w) = (f_i.shape()[0], f_i.shape()[1], f_i.shape()[2]);
    check_levels(h, w)?;
    if fj_levels.len() != LEVELS {
        return Err(shape_err!("need {LEVELS} pooled target maps, got {}", fj_levels.len()));
    }
    for (l, t) in fj_levels.iter().enumerate() {
        if t.shape() != [c, h >> l, w >> l] {
            return Err(shape_err!(
                "pooled target level {l} must be {c}×{}×{}, got {:?}",
                h >> l,
                w >> l,
                t.shape()
            ));
        }
    }
    Ok((c, h, w))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-resolution position represented by a level-`l` coordinate: the centre
/// of the pooled cell's footprint.
#[inline]
pub(crate) fn level_to_full(v: f64, l: usize) -> f64 {
    let k = (1usize << l) as f64;
    k * v + (k - 1.0) / 2.0
}

fn onthefly_rows(
    fi_t: &[f64],
    fj_t: &[Vec<f64>],
    c: usize,
    grid: &SampleGrid,
    mask: Option<&ContinuousMask>,
) -> Vec<f64> {
    let n = grid.width_out();
    let inv = 1.0 / (c as f64).sqrt();
    let mut rows = vec![0.0; grid.hw() * n];
    rows.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let fi = &fi_t[p * c..(p + 1) * c];
        for (l, fj) in fj_t.iter().enumerate() {
            let (hl, wl) = (grid.h >> l, grid.w >> l);
            for k in 0..grid.taps {
                let (x, y) = grid.point(p, l, k);
                let b = Bilinear::new(x, y, hl, wl);
                let mut v = 0.0;
                for q in 0..4 {
                    let i = b.idx[q];
                    if i != usize::MAX {
                        v += b.weight[q] * dot(fi, &fj[i * c..(i + 1) * c]);
                    }
                }
                v *= inv;
                if let Some(m) = mask {
                    v *= m.factor(p, level_to_full(x, l), level_to_full(y, l));
                }
                row[l * grid.taps + k] = v;
            }
        }
    });
    rows
}

struct OntheflyGrads {
    fi: Vec<f64>,
    fj: Vec<Vec<f64>>,
    geo: GeomGrads,
    mask: Option<(Vec<f64>, Vec<f64>)>,
}

fn onthefly_backward(
    fi_t: &[f64],
    fj_t: &[Vec<f64>],
    c: usize,
    grid: &SampleGrid,
    mask: Option<&ContinuousMask>,
    grad_rows: &[f64],
    want_fj: bool,
) -> OntheflyGrads {
    let n = grid.width_out();
    let hw = grid.hw();
    let inv = 1.0 / (c as f64).sqrt();
    let stride = grid.geo_stride();
    // per pixel: [fi grad (c) | geometry (stride) | e_mu (2) | e_c (2)]
    let width = c + stride + 4;
    let mut per_pixel = vec![0.0; hw * width];
    per_pixel.par_chunks_mut(width).enumerate().for_each(|(p, out)| {
        let fi = &fi_t[p * c..(p + 1) * c];
        let gin = &grad_rows[p * n..(p + 1) * n];
        let (gfi, rest) = out.split_at_mut(c);
        let (geo, gm) = rest.split_at_mut(stride);
        for (l, fj) in fj_t.iter().enumerate() {
            let (hl, wl) = (grid.h >> l, grid.w >> l);
            let s = level_scale(l);
            let kscale = (1usize << l) as f64;
            for k in 0..grid.taps {
                let g = gin[l * grid.taps + k];
                if g == 0.0 {
                    continue;
                }
                let (x, y) = grid.point(p, l, k);
                let b = Bilinear::new(x, y, hl, wl);
                let mut dots = [0.0; 4];
                for q in 0..4 {
                    let i = b.idx[q];
                    if i != usize::MAX {
                        dots[q] = dot(fi, &fj[i * c..(i + 1) * c]);
                    }
                }
                let raw = (0..4).map(|q| b.weight[q] * dots[q]).sum::<f64>() * inv;
                let (mut gx, mut gy);
                let graw = match mask {
                    Some(m) => {
                        let mg = m.factor_grad(p, level_to_full(x, l), level_to_full(y, l));
                        gm[0] += g * raw * mg.d_mu.0;
                        gm[1] += g * raw * mg.d_mu.1;
                        gm[2] += g * raw * mg.d_c.0;
                        gm[3] += g * raw * mg.d_c.1;
                        // d factor / d sample = -d factor / d mu, chained through level_to_full
                        gx = -g * raw * mg.d_mu.0 * kscale;
                        gy = -g * raw * mg.d_mu.1 * kscale;
                        g * mg.factor
                    }
                    None => {
                        gx = 0.0;
                        gy = 0.0;
                        g
                    }
                };
                let (dx, dy) = b.grad_from_corners(dots);
                gx += graw * dx * inv;
                gy += graw * dy * inv;
                geo[0] += gx * s;
                geo[1] += gy * s;
                if stride > 2 {
                    let o = 2 + l * 2 * grid.taps + 2 * k;
                    geo[o] += gx;
                    geo[o + 1] += gy;
                }
                for q in 0..4 {
                    let i = b.idx[q];
                    if i != usize::MAX {
                        let wq = graw * b.weight[q] * inv;
                        let fjv = &fj[i * c..(i + 1) * c];
                        gfi.iter_mut().zip(fjv).for_each(|(a, v)| *a += wq * v);
                    }
                }
            }
        }
    });
    // target-feature scatter crosses pixels; kept serial for a fixed order
    let fj_grads = if want_fj {
        fj_t.iter()
            .enumerate()
            .map(|(l, fj)| {
                let (hl, wl) = (grid.h >> l, grid.w >> l);
                let mut acc = vec![0.0; fj.len()];
                for p in 0..hw {
                    let fi = &fi_t[p * c..(p + 1) * c];
                    let gin = &grad_rows[p * n..(p + 1) * n];
                    for k in 0..grid.taps {
                        let g = gin[l * grid.taps + k];
                        if g == 0.0 {
                            continue;
                        }
                        let (x, y) = grid.point(p, l, k);
                        let graw = match mask {
                            Some(m) => g * m.factor(p, level_to_full(x, l), level_to_full(y, l)),
                            None => g,
                        };
                        let b = Bilinear::new(x, y, hl, wl);
                        for q in 0..4 {
                            let i = b.idx[q];
                            if i != usize::MAX {
                                let wq = graw * b.weight[q] * inv;
                                acc[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(fi)
                                    .for_each(|(a, v)| *a += wq * v);
                            }
                        }
                    }
                }
                pixel_to_channel(&acc, hl * wl, c)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut fi = vec![0.0; hw * c];
    let mut geo_rows = vec![0.0; hw * stride];
    let mut g_mu = vec![0.0; 2 * hw];
    let mut g_c = vec![0.0; 2 * hw];
    for p in 0..hw {
        let row = &per_pixel[p * width..(p + 1) * width];
        for ch in 0..c {
            fi[ch * hw + p] = row[ch];
        }
        geo_rows[p * stride..(p + 1) * stride].copy_from_slice(&row[c..c + stride]);
        g_mu[p] = row[c + stride];
        g_mu[hw + p] = row[c + stride + 1];
        g_c[p] = row[c + stride + 2];
        g_c[hw + p] = row[c + stride + 3];
    }
    OntheflyGrads {
        fi,
        fj: fj_grads,
        geo: GeomGrads::from_rows(&geo_rows, grid),
        mask: mask.map(|_| (g_mu, g_c)),
    }
}

fn tensors_of(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| tape.value(v).clone()).collect()
}

impl Tape {
    /// Differentiable [`build_volume`].
    pub fn corr_volume(&mut self, f_i: Var, f_j: Var) -> Result<Var> {
        let value = build_volume(self.value(f_i), self.value(f_j))?;
        let (c, h, w) = check_pair(self.value(f_i), self.value(f_j))?;
        Ok(self.push("corr_volume", value, &[f_i, f_j], move |ctx| {
            let hw = h * w;
            let s = 1.0 / (c as f64).sqrt();
            let g = ctx.grad.data();
            if ctx.wants(0) {
                // dF_i[c, p] = s Σ_q F_j[c, q] G[p, q]
                let fj = ctx.input(1).data();
                let mut d = vec![0.0; c * hw];
                gemm(c, hw, hw, fj, false, g, true, 0.0, &mut d);
                let acc = ctx.grad_mut(0);
                acc.data_mut().iter_mut().zip(&d).for_each(|(a, v)| *a += s * v);
            }
            if ctx.wants(1) {
                let fi = ctx.input(0).data();
                let mut d = vec![0.0; c * hw];
                gemm(c, hw, hw, fi, false, g, false, 0.0, &mut d);
                let acc = ctx.grad_mut(1);
                acc.data_mut().iter_mut().zip(&d).for_each(|(a, v)| *a += s * v);
            }
            Ok(())
        }))
    }

    /// Pooled pyramid of a volume node.
    pub fn corr_pyramid(&mut self, volume: Var) -> Result<Vec<Var>> {
        (0..LEVELS).map(|l| self.avg_pool2d(volume, 1 << l)).collect()
    }

    /// Lookup on a materialized pyramid held on the tape.
    pub fn corr_lookup(&mut self, levels: &[Var], coords: Var, offsets: Option<&[Var]>, r: usize) -> Result<Var> {
        let lv = tensors_of(self, levels);
        let off = offsets.map(|o| tensors_of(self, o));
        let value = lookup(&lv, self.value(coords), off.as_deref(), r)?;
        let mut inputs = levels.to_vec();
        inputs.push(coords);
        inputs.extend(offsets.into_iter().flatten());
        let has_off = offsets.is_some();
        Ok(self.push("corr_lookup", value, &inputs, move |ctx| {
            let levels: Vec<Tensor> = (0..LEVELS).map(|l| ctx.input(l).clone()).collect();
            let coords = ctx.input(LEVELS);
            let off: Option<Vec<&Tensor>> = has_off.then(|| (0..LEVELS).map(|l| ctx.input(LEVELS + 1 + l)).collect());
            let (h, w) = (levels[0].shape()[0], levels[0].shape()[1]);
            let grid = SampleGrid::new(h, w, r, coords, off)?;
            let n = grid.width_out();
            let grad_rows = channel_to_pixel(ctx.grad.data(), grid.hw(), n);
            let want_levels = (0..LEVELS).any(|l| ctx.wants(l));
            let (geo, lg, _) = lookup_rows_backward(&levels, &grid, &grad_rows, want_levels, None);
            if let Some(lg) = lg {
                for (l, g) in lg.into_iter().enumerate() {
                    if ctx.wants(l) {
                        let shape = ctx.input(l).shape().to_vec();
                        ctx.accumulate(l, Tensor::new(&shape, g)?);
                    }
                }
            }
            accumulate_geometry(ctx, LEVELS, geo, h, w, grid.taps)
        }))
    }

    /// On-the-fly lookup from source features and pooled target features,
    /// optionally weighted by the continuous Gaussian mask `(E_μ, E_c)`.
    #[allow(clippy::too_many_arguments)]
    pub fn corr_lookup_onthefly(
        &mut self,
        f_i: Var,
        fj_levels: &[Var],
        coords: Var,
        offsets: Option<&[Var]>,
        r: usize,
        mask: Option<(Var, Var, MaskParams)>,
    ) -> Result<Var> {
        let fj = tensors_of(self, fj_levels);
        let off = offsets.map(|o| tensors_of(self, o));
        let cmask = match mask {
            Some((mu, cov, params)) => Some(ContinuousMask::new(
                self.value(mu).clone(),
                self.value(cov).clone(),
                params,
            )?),
            None => None,
        };
        let value = lookup_onthefly(self.value(f_i), &fj, self.value(coords), off.as_deref(), r, cmask.as_ref())?;
        let mut inputs = vec![f_i];
        inputs.extend_from_slice(fj_levels);
        inputs.push(coords);
        let has_off = offsets.is_some();
        inputs.extend(offsets.into_iter().flatten());
        if let Some((mu, cov, _)) = mask {
            inputs.push(mu);
            inputs.push(cov);
        }
        let cmask = Arc::new(cmask);
        Ok(self.push("corr_lookup_onthefly", value, &inputs, move |ctx| {
            let f_i = ctx.input(0);
            let (c, h, w) = (f_i.shape()[0], f_i.shape()[1], f_i.shape()[2]);
            let coords = ctx.input(1 + LEVELS);
            let off: Option<Vec<&Tensor>> = has_off.then(|| (0..LEVELS).map(|l| ctx.input(2 + LEVELS + l)).collect());
            let grid = SampleGrid::new(h, w, r, coords, off)?;
            let fi_t = channel_to_pixel(f_i.data(), h * w, c);
            let fj_t: Vec<Vec<f64>> = (0..LEVELS)
                .map(|l| channel_to_pixel(ctx.input(1 + l).data(), (h >> l) * (w >> l), c))
                .collect();
            let n = grid.width_out();
            let grad_rows = channel_to_pixel(ctx.grad.data(), grid.hw(), n);
            let want_fj = (0..LEVELS).any(|l| ctx.wants(1 + l));
            let grads = onthefly_backward(&fi_t, &fj_t, c, &grid, cmask.as_ref().as_ref(), &grad_rows, want_fj);
            let taps = grid.taps;
            drop(grid);
            ctx.accumulate(0, Tensor::new(&[c, h, w], grads.fi)?);
            for (l, g) in grads.fj.into_iter().enumerate() {
                ctx.accumulate(1 + l, Tensor::new(&[c, h >> l, w >> l], g)?);
            }
            let mask_at = 2 + LEVELS + if has_off { LEVELS } else { 0 };
            if let Some((gmu, gc)) = grads.mask {
                ctx.accumulate(mask_at, Tensor::new(&[2, h, w], gmu)?);
                ctx.accumulate(mask_at + 1, Tensor::new(&[2, h, w], gc)?);
            }
            accumulate_geometry(ctx, 1 + LEVELS, grads.geo, h, w, taps)
        }))
    }
}

/// Adds coordinate gradients to input `at` and offset gradients to the
/// `LEVELS` inputs following it.
pub(crate) fn accumulate_geometry(
    ctx: &mut crate::autodiff::GradCtx<'_>,
    at: usize,
    geo: GeomGrads,
    h: usize,
    w: usize,
    taps: usize,
) -> Result<()> {
    ctx.accumulate(at, Tensor::new(&[2, h, w], geo.coords)?);
    if let Some(off) = geo.offsets {
        for (l, g) in off.into_iter().enumerate() {
            ctx.accumulate(at + 1 + l, Tensor::new(&[2 * taps, h, w], g)?);
        }
    }
    Ok(())
}

/// True when no sample point lies within `margin` of a bilinear cell edge,
/// so that central differences do not straddle a kink.
pub(crate) fn kink_free(coords: &Tensor, offsets: Option<&[Tensor]>, r: usize, margin: f64) -> bool {
    let (h, w) = (coords.shape()[1], coords.shape()[2]);
    let grid = SampleGrid::new(h, w, r, coords, offsets.map(|o| o.iter().collect())).unwrap();
    let near = |v: f64| (v - v.round()).abs() < margin;
    (0..h * w).all(|p| {
        (0..LEVELS).all(|l| {
            (0..grid.taps).all(|k| {
                let (x, y) = grid.point(p, l, k);
                !near(x) && !near(y)
            })
        })
    })
}

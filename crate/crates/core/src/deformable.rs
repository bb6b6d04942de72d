//! Learned per-tap sampling offsets for the correlation lookup.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, ParamStore, Tape, Var};
use crate::correlation::{lookup, num_taps, LEVELS};
use crate::error::{shape_err, Result};
use crate::gaussian::NORM_EPS;
use crate::nn::Conv;
use crate::tensor::Tensor;

/// Offset scale: `tanh` output is multiplied by this.
pub const TAU: f64 = 4.0;

/// Top-scale and residual offset decoders, both `1×1` over `[f_i, f_j]`.
#[derive(Debug, Clone, Copy)]
pub struct OffsetDecoder {
    pub top: Conv,
    pub residual: Conv,
    pub r: usize,
}

impl OffsetDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize, r: usize) -> Result<Self> {
        let (cin, cout) = (2 * channels, 2 * num_taps(r));
        Ok(OffsetDecoder {
            top: Conv::new(store, rng, &format!("{prefix}.f_ofs"), cin, cout, 1, 1.0)?,
            residual: Conv::new(store, rng, &format!("{prefix}.f_res"), cin, cout, 1, 1.0)?,
            r,
        })
    }

    /// `(Δ_top, Δ_res)`, each `2T×H×W` with entries in `[-τ, τ]`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, f_i: Var, f_j: Var) -> Result<(Var, Var)> {
        let (a, b) = (tape.value(f_i).shape().to_vec(), tape.value(f_j).shape().to_vec());
        if a != b || a.len() != 3 {
            return Err(shape_err!("decode_offsets: {a:?} vs {b:?}"));
        }
        let (h, w) = (a[1], a[2]);
        if h < 2 || w < 2 {
            return Err(shape_err!("decode_offsets: grid {h}x{w} too small to pool"));
        }
        let x = tape.cat_channels(&[f_i, f_j])?;
        let top = self.top.forward(tape, store, x)?;
        let top = squash(tape, top)?;
        let half = tape.avg_pool2d(x, 2)?;
        let res = self.residual.forward(tape, store, half)?;
        let res = tape.resize_bilinear(res, h, w)?;
        let res = squash(tape, res)?;
        Ok((top, res))
    }

    /// Per-level offsets `Δ^s = (Δ_top + Δ_res) / 2^s`.
    pub fn level_offsets(&self, tape: &mut Tape, store: &ParamStore, f_i: Var, f_j: Var) -> Result<Vec<Var>> {
        let (top, res) = self.decode(tape, store, f_i, f_j)?;
        (0..LEVELS).map(|s| compose_scale_offsets(tape, top, res, s)).collect()
    }
}

fn squash(tape: &mut Tape, x: Var) -> Result<Var> {
    let z = tape.norm_corr(x, NORM_EPS)?;
    let t = tape.tanh(z);
    Ok(tape.scale(t, TAU))
}

pub fn compose_scale_offsets(tape: &mut Tape, top: Var, res: Var, s: usize) -> Result<Var> {
    let sum = tape.add(top, res)?;
    Ok(tape.scale(sum, 1.0 / (1u32 << s) as f64))
}

/// Pure `(Δ_top + Δ_res) / 2^s`.
pub fn scale_offsets(top: &Tensor, res: &Tensor, s: usize) -> Result<Tensor> {
    let d = (1u32 << s) as f64;
    top.zip_map(res, |a, b| (a + b) / d)
}

/// Population variance over the taps of each level, averaged over levels.
pub fn tap_variance(fixed: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, t) = check_lookup(fixed, r)?;
    let hw = h * w;
    let d = fixed.data();
    let mut out = vec![0.0; hw];
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for l in 0..LEVELS {
            let vals = (0..t).map(|k| d[(l * t + k) * hw + p]);
            let mean = vals.clone().sum::<f64>() / t as f64;
            acc += vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        }
        *o = acc / LEVELS as f64;
    }
    Tensor::new(&[h, w], out)
}

/// `sigmoid(tap_variance)`, one gate per pixel.
pub fn gate(fixed: &Tensor, r: usize) -> Result<Tensor> {
    Ok(tap_variance(fixed, r)?.map(sigmoid))
}

fn check_lookup(fixed: &Tensor, r: usize) -> Result<(usize, usize, usize)> {
    let t = num_taps(r);
    let s = fixed.shape();
    if s.len() != 3 || s[0] != LEVELS * t {
        return Err(shape_err!("fixed lookup must be [{}, H, W], got {s:?}", LEVELS * t));
    }
    Ok((s[1], s[2], t))
}

/// Deformable lookup on a materialized pyramid; zero offsets give the fixed lookup.
pub fn deformable_lookup(levels: &[Tensor], coords: &Tensor, offsets: &[Tensor], r: usize) -> Result<Tensor> {
    lookup(levels, coords, Some(offsets), r)
}

impl Tape {
    /// Gate plane `[1, H, W]` from a fixed-range lookup node.
    pub fn uncertainty_gate(&mut self, fixed: Var, r: usize) -> Result<Var> {
        let (h, w, t) = check_lookup(self.value(fixed), r)?;
        let value = gate(self.value(fixed), r)?.into_reshaped(&[1, h, w])?;
        Ok(self.push("uncertainty_gate", value, &[fixed], move |ctx| {
            let hw = h * w;
            let (x, g, s) = (ctx.input(0).data(), ctx.grad.data(), ctx.out.data());
            let mut dx = vec![0.0; x.len()];
            for p in 0..hw {
                let coef = g[p] * s[p] * (1.0 - s[p]) * 2.0 / (LEVELS * t) as f64;
                for l in 0..LEVELS {
                    let mean = (0..t).map(|k| x[(l * t + k) * hw + p]).sum::<f64>() / t as f64;
                    for k in 0..t {
                        let i = (l * t + k) * hw + p;
                        dx[i] = coef * (x[i] - mean);
                    }
                }
            }
            ctx.accumulate(0, Tensor::new(ctx.input(0).shape(), dx)?);
            Ok(())
        }))
    }

    /// Multiplies every level's offsets by the pixel gate.
    pub fn gate_offsets(&mut self, offsets: &[Var], gate: Var) -> Result<Vec<Var>> {
        offsets.iter().map(|&o| self.mul_plane(o, gate)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::correlation::{kink_free, pool_volume, tap_offset};
    use crate::geometry::grid_coords;
    use crate::tensor::Bilinear;
    use rand::{Rng, SeedableRng};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-a..a))
    }

    #[test]
    fn zero_weights_give_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(0);
        let dec = OffsetDecoder::new(&mut store, &mut rng, "d", 3, 1).unwrap();
        dec.top.zero(&mut store);
        dec.residual.zero(&mut store);
        let mut tape = Tape::new();
        let fi = tape.var(rand_t(&mut rng, &[3, 6, 8], 1.0));
        let fj = tape.var(rand_t(&mut rng, &[3, 6, 8], 1.0));
        let (top, res) = dec.decode(&mut tape, &store, fi, fj).unwrap();
        assert_eq!(tape.value(top).max_abs(), 0.0);
        assert_eq!(tape.value(res).max_abs(), 0.0);
        assert_eq!(tape.value(top).shape(), &[18, 6, 8]);
    }

    #[test]
    fn offsets_are_bounded_by_tau() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new(0);
            let dec = OffsetDecoder::new(&mut store, &mut rng, "d", 4, 2).unwrap();
            // large weights push tanh into saturation
            for id in store.ids().collect::<Vec<_>>() {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 50.0);
            }
            let mut tape = Tape::new();
            let fi = tape.var(rand_t(&mut rng, &[4, 8, 10], 3.0));
            let fj = tape.var(rand_t(&mut rng, &[4, 8, 10], 3.0));
            let (top, res) = dec.decode(&mut tape, &store, fi, fj).unwrap();
            assert!(tape.value(top).max_abs() <= TAU);
            assert!(tape.value(res).max_abs() <= TAU);
        }
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(0);
        let dec = OffsetDecoder::new(&mut store, &mut rng, "d", 3, 1).unwrap();
        let mut tape = Tape::new();
        let fi = tape.var(Tensor::zeros(&[3, 6, 8]));
        let fj = tape.var(Tensor::zeros(&[3, 6, 6]));
        assert!(matches!(dec.decode(&mut tape, &store, fi, fj), Err(crate::Error::Shape(_))));
    }

    fn standardize_tanh(v: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        v.iter().map(|x| ((x - m) / (var + NORM_EPS).sqrt()).tanh() * TAU).collect()
    }

    #[test]
    fn top_offsets_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (c, h, w, r) = (3, 4, 6, 1);
        let mut store = ParamStore::new(0);
        let dec = OffsetDecoder::new(&mut store, &mut rng, "d", c, r).unwrap();
        let fi = rand_t(&mut rng, &[c, h, w], 1.0);
        let fj = rand_t(&mut rng, &[c, h, w], 1.0);
        let mut tape = Tape::new();
        let (vi, vj) = (tape.var(fi.clone()), tape.var(fj.clone()));
        let (top, _) = dec.decode(&mut tape, &store, vi, vj).unwrap();
        let wt = store.value(dec.top.weight);
        let b = store.value(dec.top.bias);
        for o in 0..2 * num_taps(r) {
            let pre: Vec<f64> = (0..h * w)
                .map(|p| {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        acc += wt.at(&[o, ci, 0, 0]) * fi.data()[ci * h * w + p];
                        acc += wt.at(&[o, c + ci, 0, 0]) * fj.data()[ci * h * w + p];
                    }
                    acc
                })
                .collect();
            let want = standardize_tanh(&pre);
            for p in 0..h * w {
                let got = tape.value(top).data()[o * h * w + p];
                assert!((got - want[p]).abs() < 1e-12, "{o} {p}: {got} vs {}", want[p]);
            }
        }
    }

    #[test]
    fn scale_composition_is_elementwise() {
        let top = Tensor::new(&[1, 1, 2], vec![3.0, -1.0]).unwrap();
        let res = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(scale_offsets(&top, &res, 0).unwrap().data(), &[4.0, 0.0]);
        assert_eq!(scale_offsets(&top, &res, 3).unwrap().data(), &[0.5, 0.0]);
        let z = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(scale_offsets(&z, &z, 2).unwrap().max_abs(), 0.0);
        let mut tape = Tape::new();
        let (a, b) = (tape.var(top), tape.var(res));
        let d = compose_scale_offsets(&mut tape, a, b, 3).unwrap();
        assert_eq!(tape.value(d).data(), &[0.5, 0.0]);
    }

    #[test]
    fn gate_is_half_on_constant_taps() {
        let r = 1;
        let fixed = Tensor::full(&[LEVELS * num_taps(r), 3, 4], 0.7);
        let g = gate(&fixed, r).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = 2;
        let t = num_taps(r);
        let fixed = rand_t(&mut rng, &[LEVELS * t, 5, 3], 2.0);
        let var = tap_variance(&fixed, r).unwrap();
        for p in 0..15 {
            let mut acc = 0.0;
            for l in 0..LEVELS {
                let v: Vec<f64> = (0..t).map(|k| fixed.data()[(l * t + k) * 15 + p]).collect();
                let m = v.iter().sum::<f64>() / t as f64;
                acc += v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / t as f64;
            }
            assert!((var.data()[p] - acc / LEVELS as f64).abs() < 1e-12);
        }
        // large spread saturates the gate
        let big = fixed.map(|v| v * 1e3);
        assert!(gate(&big, r).unwrap().data().iter().all(|&g| g > 0.999));
    }

    #[test]
    fn gate_increases_with_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = 1;
        let base = rand_t(&mut rng, &[LEVELS * num_taps(r), 4, 4], 1.0);
        let mut last = gate(&base.map(|_| 0.0), r).unwrap();
        for k in 1..20 {
            let g = gate(&base.map(|v| v * k as f64 * 0.1), r).unwrap();
            assert!(g.data().iter().zip(last.data()).all(|(a, b)| a > b));
            last = g;
        }
    }

    #[test]
    fn zero_offsets_reduce_to_fixed_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (h, w, r) = (16, 16, 2);
        let levels = pool_volume(&rand_t(&mut rng, &[h, w, h, w], 1.0)).unwrap();
        let coords = grid_coords(h, w).map(|v| v + rng.random_range(-2.0..2.0));
        let zero = vec![Tensor::zeros(&[2 * num_taps(r), h, w]); LEVELS];
        let a = deformable_lookup(&levels, &coords, &zero, r).unwrap();
        let b = lookup(&levels, &coords, None, r).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn unit_offsets_shift_the_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (h, w, r) = (16, 16, 1);
        let levels = pool_volume(&rand_t(&mut rng, &[h, w, h, w], 1.0)).unwrap();
        let coords = grid_coords(h, w);
        let t = num_taps(r);
        let shift: Vec<Tensor> = (0..LEVELS)
            .map(|_| Tensor::from_fn(&[2 * t, h, w], |i| if (i / (h * w)) % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        let a = deformable_lookup(&levels, &coords, &shift, r).unwrap();
        let b = lookup(&levels, &coords, None, r).unwrap();
        // level 0 only: at coarser levels a one-cell shift is not a coordinate shift of 1
        let mut moved = coords.clone();
        for p in 0..h * w {
            moved.data_mut()[p] += 1.0;
        }
        let c = lookup(&levels, &moved, None, r).unwrap();
        let n = t * h * w;
        assert_eq!(&a.data()[..n], &c.data()[..n]);
        assert_ne!(&a.data()[..n], &b.data()[..n]);
    }

    #[test]
    fn deformed_lookup_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (h, w, r) = (16, 16, 1);
        let t = num_taps(r);
        let levels = pool_volume(&rand_t(&mut rng, &[h, w, h, w], 1.0)).unwrap();
        let coords = grid_coords(h, w).map(|v| v + rng.random_range(-1.5..1.5));
        let offs: Vec<Tensor> = (0..LEVELS).map(|_| rand_t(&mut rng, &[2 * t, h, w], 2.0)).collect();
        let out = deformable_lookup(&levels, &coords, &offs, r).unwrap();
        let hw = h * w;
        for p in (0..hw).step_by(7) {
            for (l, lv) in levels.iter().enumerate() {
                let (hl, wl) = (h >> l, w >> l);
                let plane = &lv.data()[p * hl * wl..(p + 1) * hl * wl];
                let sc = 1.0 / (1 << l) as f64;
                for k in 0..t {
                    let (dx, dy) = tap_offset(k, r);
                    let x = coords.data()[p] * sc + dx + offs[l].data()[2 * k * hw + p];
                    let y = coords.data()[hw + p] * sc + dy + offs[l].data()[(2 * k + 1) * hw + p];
                    // plain four-corner sum with zero padding
                    let (x0, y0) = (x.floor(), y.floor());
                    let mut want = 0.0;
                    for (cx, cy, wgt) in [
                        (x0, y0, (1.0 - (x - x0)) * (1.0 - (y - y0))),
                        (x0 + 1.0, y0, (x - x0) * (1.0 - (y - y0))),
                        (x0, y0 + 1.0, (1.0 - (x - x0)) * (y - y0)),
                        (x0 + 1.0, y0 + 1.0, (x - x0) * (y - y0)),
                    ] {
                        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < wl && (cy as usize) < hl {
                            want += wgt * plane[cy as usize * wl + cx as usize];
                        }
                    }
                    let got = out.data()[(l * t + k) * hw + p];
                    assert!((got - want).abs() < 1e-12, "p{p} l{l} k{k}");
                    assert!((got - Bilinear::new(x, y, hl, wl).sample(plane)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_gradient_passes_fd_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = 1;
            let x = rand_t(&mut rng, &[LEVELS * num_taps(r), 3, 3], 1.0);
            let wts = rand_t(&mut rng, &[1, 3, 3], 1.0);
            let f = |t: &mut Tape, v: Var| {
                let g = t.uncertainty_gate(v, r)?;
                let c = t.constant(wts.clone());
                let m = t.mul(g, c)?;
                Ok(t.sum(m))
            };
            let rep = fd_check(f, &x, 1e-6).unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
        }
    }

    /// decode → gate → deformable lookup, differentiated w.r.t. the features.
    #[test]
    fn decode_gate_lookup_chain_passes_fd_check() {
        let (c, h, w, r) = (2, 8, 8, 1);
        let t = num_taps(r);
        let mut passed = 0;
        let mut seed = 0;
        while passed < 10 {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParamStore::new(0);
            let dec = OffsetDecoder::new(&mut store, &mut rng, "d", c, r).unwrap();
            let fi = rand_t(&mut rng, &[c, h, w], 1.0);
            let fj = rand_t(&mut rng, &[c, h, w], 1.0);
            let vol = crate::correlation::build_volume(&fi, &fj).unwrap();
            let levels = pool_volume(&vol).unwrap();
            let coords = grid_coords(h, w).map(|v| v + rng.random_range(-1.0..1.0));
            let fixed = lookup(&levels, &coords, None, r).unwrap();
            let wts = rand_t(&mut rng, &[LEVELS * t, h, w], 1.0);
            // skip draws whose deformed samples sit on a cell edge
            let mut probe = Tape::new();
            let (a, b) = (probe.var(fi.clone()), probe.var(fj.clone()));
            let offs = dec.level_offsets(&mut probe, &store, a, b).unwrap();
            let gv = probe.constant(gate(&fixed, r).unwrap().into_reshaped(&[1, h, w]).unwrap());
            let go = probe.gate_offsets(&offs, gv).unwrap();
            let vals: Vec<Tensor> = go.iter().map(|&v| probe.value(v).clone()).collect();
            if !kink_free(&coords, Some(&vals), r, 1e-4) {
                continue;
            }
            let f = |tp: &mut Tape, x: Var| {
                let a = tp.narrow_channels(x, 0, c)?;
                let b = tp.narrow_channels(x, c, c)?;
                let offs = dec.level_offsets(tp, &store, a, b)?;
                let lv: Vec<Var> = levels.iter().map(|l| tp.constant(l.clone())).collect();
                let cv = tp.constant(coords.clone());
                let fixed = tp.corr_lookup(&lv, cv, None, r)?;
                let g = tp.uncertainty_gate(fixed, r)?;
                let go = tp.gate_offsets(&offs, g)?;
                let out = tp.corr_lookup(&lv, cv, Some(&go), r)?;
                let wv = tp.constant(wts.clone());
                let m = tp.mul(out, wv)?;
                Ok(tp.sum(m))
            };
            let x = Tensor::cat_channels(&[&fi, &fj]).unwrap();
            let rep = fd_check(f, &x, 1e-6).unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
            passed += 1;
        }
    }
}

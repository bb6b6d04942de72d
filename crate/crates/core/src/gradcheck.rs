//! Registry of finite-difference checks: one case per differentiable tape op
//! plus the composed unrolled pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{fd_check, fd_check_params, FdReport, ParamStore, Tape, Var};
use crate::correlation::{build_volume, kink_free, lookup, num_taps, pool_volume, CorrPath, CorrPyramid, LEVELS};
use crate::deformable::{gate, OffsetDecoder};
use crate::error::{Error, Result};
use crate::gaussian::MaskParams;
use crate::geometry::{derive_seed, generate_scene, grid_coords, reproject_on_tape, Camera, PoseSE3, SceneConfig, SceneSample};
use crate::losses::{flow_loss, LossWeights};
use crate::model::{Ablation, Model, ModelConfig};
use crate::temporal::{OperatorDims, UpdateOperator, GRID, KNOT_STEP, NUM_BASES};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;
/// Redraw budget for cases that must keep sample points off bilinear cell edges.
const MAX_DRAWS: usize = 500;

pub struct CheckCase {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(&mut ChaCha8Rng) -> Result<FdReport>,
}

impl CheckCase {
    pub fn run(&self, seed: u64) -> Result<FdReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name_hash(self.name)));
        (self.run)(&mut rng)
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub op: String,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_error: Option<f64>,
    pub checked: usize,
    pub passed: bool,
    pub error: Option<String>,
}

/// Runs every case (or those whose name contains `filter`) for `seeds`
/// consecutive seeds from `base_seed`, streaming one record per run.
pub fn run_gradcheck(
    seeds: usize,
    base_seed: u64,
    filter: Option<&str>,
    mut sink: impl FnMut(&CheckRecord),
) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    for case in registry().iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))) {
        for s in 0..seeds as u64 {
            let seed = base_seed + s;
            let rec = match case.run(seed) {
                Ok(rep) => CheckRecord {
                    op: case.name.into(),
                    seed,
                    tolerance: case.tolerance,
                    max_rel_error: Some(rep.max_rel_error),
                    checked: rep.checked,
                    passed: rep.max_rel_error <= case.tolerance,
                    error: None,
                },
                Err(e) => CheckRecord {
                    op: case.name.into(),
                    seed,
                    tolerance: case.tolerance,
                    max_rel_error: None,
                    checked: 0,
                    passed: false,
                    error: Some(e.to_string()),
                },
            };
            sink(&rec);
            out.push(rec);
        }
    }
    out
}

pub fn registry() -> Vec<CheckCase> {
    let op = |name, run| CheckCase {
        name,
        tolerance: OP_TOL,
        run,
    };
    vec![
        op("add", |rng| binary(rng, |t, a, b| t.add(a, b))),
        op("sub", |rng| binary(rng, |t, a, b| t.sub(a, b))),
        op("mul", |rng| binary(rng, |t, a, b| t.mul(a, b))),
        op("scale", |rng| unary(rng, -2.0, 2.0, |t, x| Ok(t.scale(x, -1.7)))),
        op("add_scalar", |rng| unary(rng, -2.0, 2.0, |t, x| Ok(t.add_scalar(x, 0.3)))),
        op("one_minus", |rng| unary(rng, -2.0, 2.0, |t, x| Ok(t.one_minus(x)))),
        op("sigmoid", |rng| unary(rng, -4.0, 4.0, |t, x| Ok(t.sigmoid(x)))),
        op("tanh", |rng| unary(rng, -3.0, 3.0, |t, x| Ok(t.tanh(x)))),
        op("gelu", |rng| unary(rng, -3.0, 3.0, |t, x| Ok(t.gelu(x)))),
        op("relu", |rng| unary_off_zero(rng, |t, x| Ok(t.relu(x)))),
        op("exp", |rng| unary(rng, -2.0, 2.0, |t, x| Ok(t.exp(x)))),
        op("ln", |rng| unary(rng, 0.2, 3.0, |t, x| Ok(t.ln(x)))),
        op("square", |rng| unary(rng, -2.0, 2.0, |t, x| Ok(t.square(x)))),
        op("abs", |rng| unary_off_zero(rng, |t, x| Ok(t.abs(x)))),
        op("sum", |rng| {
            let x = uniform(rng, &[3, 4], -1.0, 1.0);
            fd_check(|t, v| {
                let s = t.sum(v);
                Ok(t.square(s))
            }, &x, STEP)
        }),
        op("weighted_sum", |rng| {
            let xs = [uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)];
            let w = uniform(rng, &[2, 3], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let s = t.weighted_sum(&[(v[0], 0.7), (v[1], -1.3)])?;
                weighted(t, s, &w)
            })
        }),
        op("cat_channels", |rng| {
            let xs = [uniform(rng, &[2, 3, 3], -1.0, 1.0), uniform(rng, &[1, 3, 3], -1.0, 1.0)];
            let w = uniform(rng, &[3, 3, 3], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let c = t.cat_channels(v)?;
                weighted(t, c, &w)
            })
        }),
        op("narrow_channels", |rng| {
            let x = uniform(rng, &[4, 3, 3], -1.0, 1.0);
            let w = uniform(rng, &[2, 3, 3], -1.0, 1.0);
            fd_check(|t, v| {
                let n = t.narrow_channels(v, 1, 2)?;
                weighted(t, n, &w)
            }, &x, STEP)
        }),
        op("reshape", |rng| {
            let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let w = uniform(rng, &[6, 4], -1.0, 1.0);
            fd_check(|t, v| {
                let r = t.reshape(v, &[6, 4])?;
                weighted(t, r, &w)
            }, &x, STEP)
        }),
        op("mul_plane", |rng| {
            let xs = [uniform(rng, &[3, 4, 5], -1.0, 1.0), uniform(rng, &[1, 4, 5], -1.0, 1.0)];
            let w = uniform(rng, &[3, 4, 5], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let m = t.mul_plane(v[0], v[1])?;
                weighted(t, m, &w)
            })
        }),
        op("conv2d", |rng| {
            let xs = [
                uniform(rng, &[2, 5, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ];
            let w = uniform(rng, &[3, 5, 6], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]))?;
                weighted(t, y, &w)
            })
        }),
        op("fully_connected", |rng| {
            let xs = [
                uniform(rng, &[3, 4, 2], -1.0, 1.0),
                uniform(rng, &[2, 3], -1.0, 1.0),
                uniform(rng, &[2], -1.0, 1.0),
            ];
            let w = uniform(rng, &[2, 4, 2], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let y = t.fully_connected(v[0], v[1], Some(v[2]))?;
                weighted(t, y, &w)
            })
        }),
        op("avg_pool2d", |rng| {
            let x = uniform(rng, &[2, 8, 4], -1.0, 1.0);
            let w = uniform(rng, &[2, 2, 1], -1.0, 1.0);
            fd_check(|t, v| {
                let y = t.avg_pool2d(v, 4)?;
                weighted(t, y, &w)
            }, &x, STEP)
        }),
        op("resize_bilinear", |rng| {
            let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let w = uniform(rng, &[2, 6, 8], -1.0, 1.0);
            fd_check(|t, v| {
                let y = t.resize_bilinear(v, 6, 8)?;
                weighted(t, y, &w)
            }, &x, STEP)
        }),
        op("norm_corr", |rng| {
            let x = uniform(rng, &[2, 4, 4], -2.0, 2.0);
            let w = uniform(rng, &[2, 4, 4], -1.0, 1.0);
            fd_check(|t, v| {
                let y = t.norm_corr(v, 1e-5)?;
                weighted(t, y, &w)
            }, &x, STEP)
        }),
        op("scaled_sigmoid", |rng| {
            let x = uniform(rng, &[2, 5, 5], -2.0, 2.0);
            let w = uniform(rng, &[2, 5, 5], -1.0, 1.0);
            fd_check(|t, v| {
                let c = t.normalize_covariance(v)?;
                weighted(t, c, &w)
            }, &x, STEP)
        }),
        op("reproject", reproject_case),
        op("corr_volume", |rng| {
            let xs = [uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 3, 4], -1.0, 1.0)];
            let w = uniform(rng, &[3, 4, 3, 4], -1.0, 1.0);
            each_input(&xs, |t, v| {
                let vol = t.corr_volume(v[0], v[1])?;
                weighted(t, vol, &w)
            })
        }),
        op("corr_lookup", corr_lookup_case),
        op("corr_lookup_onthefly", onthefly_case),
        op("gaussian_mask_volume", mask_volume_case),
        op("corr_lookup_masked", masked_lookup_case),
        op("uncertainty_gate", |rng| {
            let r = 1;
            let x = uniform(rng, &[LEVELS * num_taps(r), 3, 3], -1.0, 1.0);
            let w = uniform(rng, &[1, 3, 3], -1.0, 1.0);
            fd_check(|t, v| {
                let g = t.uncertainty_gate(v, r)?;
                weighted(t, g, &w)
            }, &x, STEP)
        }),
        op("deformable_chain", deformable_case),
        op("kan_activation", kan_case),
        op("update_operator", operator_case),
        op("self_loss", |rng| {
            let p = uniform(rng, &[2, 3, 4], -2.0, 2.0);
            let xs = [uniform(rng, &[2, 3, 4], -2.0, 2.0), uniform(rng, &[2, 3, 4], 1.0, 3.0)];
            each_input(&xs, |t, v| t.self_loss(v[0], v[1], &p))
        }),
        op("flow_loss", |rng| {
            let gt = uniform(rng, &[2, 3, 3], -2.0, 2.0);
            let valid: Vec<bool> = (0..9).map(|i| i != 4).collect();
            // estimates kept away from the L1 kink at the ground truth
            let x = Tensor::from_fn(&[6, 3, 3], |i| {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                gt.data()[i % 18] + s * rng.random_range(0.05..1.0)
            });
            fd_check(|t, v| {
                let est: Vec<Var> = (0..3).map(|k| t.narrow_channels(v, 2 * k, 2)).collect::<Result<_>>()?;
                flow_loss(t, &est, &gt, &valid, 0.9)
            }, &x, STEP)
        }),
        CheckCase {
            name: "pipeline",
            tolerance: COMPOSED_TOL,
            run: pipeline_case,
        },
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted(t: &mut Tape, v: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let m = t.mul(v, wv)?;
    Ok(t.sum(m))
}

fn worst(a: Option<FdReport>, b: FdReport) -> FdReport {
    match a {
        Some(a) => {
            let checked = a.checked + b.checked;
            let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
            w.checked = checked;
            w
        }
        None => b,
    }
}

/// Checks `f` w.r.t. each input in turn, the others held constant.
fn each_input(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<FdReport> {
    let mut acc = None;
    for k in 0..inputs.len() {
        let rep = fd_check(
            |t, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| if j == k { v } else { t.constant(x.clone()) })
                    .collect();
                f(t, &vars)
            },
            &inputs[k],
            STEP,
        )?;
        acc = Some(worst(acc, rep));
    }
    Ok(acc.expect("at least one input"))
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<FdReport> {
    let x = uniform(rng, &[3, 4], lo, hi);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    fd_check(|t, v| {
        let y = op(t, v)?;
        weighted(t, y, &w)
    }, &x, STEP)
}

fn unary_off_zero(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<FdReport> {
    let x = Tensor::from_fn(&[3, 4], |_| {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        s * rng.random_range(0.05..2.0)
    });
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    fd_check(|t, v| {
        let y = op(t, v)?;
        weighted(t, y, &w)
    }, &x, STEP)
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<FdReport> {
    let xs = [uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)];
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    let separate = each_input(&xs, |t, v| {
        let y = op(t, v[0], v[1])?;
        weighted(t, y, &w)
    })?;
    // both operands on the same node
    let shared = fd_check(|t, v| {
        let y = op(t, v, v)?;
        weighted(t, y, &w)
    }, &xs[0], STEP)?;
    Ok(worst(Some(separate), shared))
}

fn offsets(rng: &mut ChaCha8Rng, r: usize, h: usize, w: usize, amp: f64) -> Vec<Tensor> {
    (0..LEVELS).map(|_| uniform(rng, &[2 * num_taps(r), h, w], -amp, amp)).collect()
}

/// Coordinates and offsets with every sample point clear of cell edges.
fn kink_free_draw(rng: &mut ChaCha8Rng, r: usize, h: usize, w: usize, with_offsets: bool) -> Result<(Tensor, Vec<Tensor>)> {
    for _ in 0..MAX_DRAWS {
        let c = grid_coords(h, w).map(|v| v + rng.random_range(-2.0..2.0));
        let o = offsets(rng, r, h, w, 1.0);
        if kink_free(&c, with_offsets.then_some(o.as_slice()), r, 1e-4) {
            return Ok((c, o));
        }
    }
    Err(Error::Oracle("no kink-free draw".into()))
}

fn reproject_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (h, w) = (5, 6);
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let t = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let pose = PoseSE3::from_axis_angle(axis, rng.random_range(-0.3..0.3), t)?;
    let cam = Camera::for_grid(h, w);
    let d = uniform(rng, &[h, w], 0.2, 1.0);
    let wts = uniform(rng, &[2, h, w], -1.0, 1.0);
    fd_check(|tp, v| {
        let (c, _) = reproject_on_tape(tp, v, &pose, &cam)?;
        weighted(tp, c, &wts)
    }, &d, STEP)
}

fn corr_lookup_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (h, w, r) = (8, 8, 1);
    let vol = uniform(rng, &[h, w, h, w], -1.0, 1.0);
    let (coords, offs) = kink_free_draw(rng, r, h, w, true)?;
    let wts = uniform(rng, &[LEVELS * num_taps(r), h, w], -1.0, 1.0);
    let mut inputs = vec![vol, coords];
    inputs.extend(offs);
    each_input(&inputs, |t, v| {
        let levels = t.corr_pyramid(v[0])?;
        let out = t.corr_lookup(&levels, v[1], Some(&v[2..]), r)?;
        weighted(t, out, &wts)
    })
}

fn onthefly_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (c, h, w, r) = (3, 8, 8, 1);
    let fi = uniform(rng, &[c, h, w], -1.0, 1.0);
    let fj = uniform(rng, &[c, h, w], -1.0, 1.0);
    let (coords, offs) = kink_free_draw(rng, r, h, w, true)?;
    let wts = uniform(rng, &[LEVELS * num_taps(r), h, w], -1.0, 1.0);
    let mut inputs = vec![fi, fj, coords];
    inputs.extend(offs);
    each_input(&inputs, |t, v| {
        let levels: Vec<Var> = (0..LEVELS).map(|l| t.avg_pool2d(v[1], 1 << l)).collect::<Result<_>>()?;
        let out = t.corr_lookup_onthefly(v[0], &levels, v[2], Some(&v[3..]), r, None)?;
        weighted(t, out, &wts)
    })
}

/// Mask centres kept away from half-integers so the rounded window is stable under the step.
fn mask_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor, Tensor) {
    let mu = grid_coords(h, w).map(|v| v + rng.random_range(-1.3..-0.7));
    let cov = uniform(rng, &[2, h, w], 0.3, 3.0);
    (mu, cov)
}

fn mask_volume_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (h, w) = (6, 6);
    let vol = uniform(rng, &[h, w, h, w], -1.0, 1.0);
    let (mu, cov) = mask_field(rng, h, w);
    let wts = uniform(rng, &[h, w, h, w], -1.0, 1.0);
    let params = MaskParams { scale: 3.0, radius: 2 };
    each_input(&[vol, mu, cov], |t, v| {
        let out = t.gaussian_mask_volume(v[0], v[1], v[2], params)?;
        weighted(t, out, &wts)
    })
}

/// Fused window corrections feeding a deformable masked lookup, plus the
/// continuous mask of the on-the-fly path.
fn masked_lookup_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (c, h, w, r) = (3, 8, 8, 1);
    let fi = uniform(rng, &[c, h, w], -1.0, 1.0);
    let fj = uniform(rng, &[c, h, w], -1.0, 1.0);
    let pyr = Arc::new(CorrPyramid::build(&fi, &fj)?);
    let (mu, cov) = mask_field(rng, h, w);
    let (coords, offs) = kink_free_draw(rng, r, h, w, true)?;
    let wts = uniform(rng, &[LEVELS * num_taps(r), h, w], -1.0, 1.0);
    let params = MaskParams { scale: 3.0, radius: 2 };
    let mut inputs = vec![mu.clone(), cov.clone(), coords.clone()];
    inputs.extend(offs.iter().cloned());
    let fused = each_input(&inputs, |t, v| {
        let (d, lay) = t.gaussian_window_delta(&pyr, v[0], v[1], params)?;
        let out = t.corr_lookup_masked(&pyr, Some((d, &lay)), v[2], Some(&v[3..]), r)?;
        weighted(t, out, &wts)
    })?;
    let continuous = each_input(&[mu, cov], |t, v| {
        let a = t.constant(fi.clone());
        let b = t.constant(fj.clone());
        let cc = t.constant(coords.clone());
        let levels: Vec<Var> = (0..LEVELS).map(|l| t.avg_pool2d(b, 1 << l)).collect::<Result<_>>()?;
        let out = t.corr_lookup_onthefly(a, &levels, cc, None, r, Some((v[0], v[1], params)))?;
        weighted(t, out, &wts)
    })?;
    Ok(worst(Some(fused), continuous))
}

/// decode → gate → deformable lookup, w.r.t. the features.
fn deformable_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (c, h, w, r) = (2, 8, 8, 1);
    for _ in 0..MAX_DRAWS {
        let mut store = ParamStore::new(0);
        let dec = OffsetDecoder::new(&mut store, rng, "d", c, r)?;
        let fi = uniform(rng, &[c, h, w], -1.0, 1.0);
        let fj = uniform(rng, &[c, h, w], -1.0, 1.0);
        let levels = pool_volume(&build_volume(&fi, &fj)?)?;
        let coords = grid_coords(h, w).map(|v| v + rng.random_range(-1.0..1.0));
        let fixed = lookup(&levels, &coords, None, r)?;
        let wts = uniform(rng, &[LEVELS * num_taps(r), h, w], -1.0, 1.0);
        let mut probe = Tape::new();
        let (a, b) = (probe.var(fi.clone()), probe.var(fj.clone()));
        let offs = dec.level_offsets(&mut probe, &store, a, b)?;
        let gv = probe.constant(gate(&fixed, r)?.into_reshaped(&[1, h, w])?);
        let go = probe.gate_offsets(&offs, gv)?;
        let vals: Vec<Tensor> = go.iter().map(|&v| probe.value(v).clone()).collect();
        if !kink_free(&coords, Some(&vals), r, 1e-4) || !kink_free(&coords, None, r, 1e-4) {
            continue;
        }
        let x = Tensor::cat_channels(&[&fi, &fj])?;
        return fd_check(
            |tp, x| {
                let a = tp.narrow_channels(x, 0, c)?;
                let b = tp.narrow_channels(x, c, c)?;
                let offs = dec.level_offsets(tp, &store, a, b)?;
                let lv: Vec<Var> = levels.iter().map(|l| tp.constant(l.clone())).collect();
                let cv = tp.constant(coords.clone());
                let fixed = tp.corr_lookup(&lv, cv, None, r)?;
                let g = tp.uncertainty_gate(fixed, r)?;
                let go = tp.gate_offsets(&offs, g)?;
                let out = tp.corr_lookup(&lv, cv, Some(&go), r)?;
                weighted(tp, out, &wts)
            },
            &x,
            STEP,
        );
    }
    Err(Error::Oracle("no kink-free draw".into()))
}

fn kan_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let c = 2;
    let mut store = ParamStore::new(0);
    let base = store.add("base", uniform(rng, &[c], -1.0, 1.0))?;
    let coef = store.add("coef", uniform(rng, &[c, NUM_BASES], -1.0, 1.0))?;
    let wts = uniform(rng, &[c, 3, 3], -1.0, 1.0);
    // off the knots, plus a few clamped entries
    let u = Tensor::from_fn(&[c, 3, 3], |i| {
        if i % 7 == 3 {
            return rng.random_range(1.2..2.0);
        }
        let k = rng.random_range(0..GRID) as f64;
        -1.0 + (k + rng.random_range(0.1..0.9)) * KNOT_STEP
    });
    let loss = |t: &mut Tape, s: &ParamStore, uu: Var| {
        let (b, cf) = (t.param(s, base), t.param(s, coef));
        let a = t.kan_activation(uu, b, cf)?;
        weighted(t, a, &wts)
    };
    let input = fd_check(|t, v| loss(t, &store, v), &u, STEP)?;
    let params = fd_check_params(
        &store,
        |t, s| {
            let uu = t.constant(u.clone());
            loss(t, s, uu)
        },
        STEP,
        0,
    )?;
    Ok(worst(Some(input), params))
}

/// One update step (encoders, KAN-bias GRU, flow head) w.r.t. its parameters and inputs.
fn operator_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (hh, ww) = (6, 6);
    let dims = OperatorDims {
        hidden: 3,
        context: 2,
        corr: 3,
        flow: 2,
        head: 3,
    };
    let mut store = ParamStore::new(0);
    let op = UpdateOperator::new(&mut store, rng, "u", 4, dims)?;
    let h0 = uniform(rng, &[dims.hidden, hh, ww], -0.9, 0.9);
    let l = uniform(rng, &[4, hh, ww], -1.0, 1.0);
    let fl = uniform(rng, &[2, hh, ww], -2.0, 2.0);
    let cx = uniform(rng, &[dims.context, hh, ww], -1.0, 1.0);
    let wts = uniform(rng, &[2, hh, ww], -1.0, 1.0);
    let step = |t: &mut Tape, s: &ParamStore, v: &[Var]| {
        let (h1, dflow) = op.step(t, s, v[0], v[1], v[2], v[3], true)?;
        let m = weighted(t, dflow, &wts)?;
        let hs = t.sum(h1);
        t.add(m, hs)
    };
    let inputs = [h0, l, fl, cx];
    let params = fd_check_params(
        &store,
        |t, s| {
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            step(t, s, &v)
        },
        STEP,
        6,
    )?;
    let wrt_inputs = each_input(&inputs, |t, v| step(t, &store, v))?;
    Ok(worst(Some(params), wrt_inputs))
}

pub fn tiny_model_config(path: CorrPath) -> ModelConfig {
    ModelConfig {
        channels: 4,
        radius: 1,
        mask: MaskParams::for_grid(8, 8),
        dims: OperatorDims {
            hidden: 3,
            context: 2,
            corr: 3,
            flow: 2,
            head: 3,
        },
        iterations: 8,
        path,
    }
}

pub fn tiny_scene(seed: u64) -> Result<SceneSample> {
    let cfg = SceneConfig {
        height: 8,
        width: 8,
        channels: 4,
        max_flow: 2.0,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed)
}

/// Every offset and gate path is active, so every sample point must stay
/// clear of bilinear cell edges along the whole trajectory, and every
/// estimate clear of the L1 kink at the ground truth.
fn trajectory_is_kink_free(model: &Model, store: &ParamStore, s: &SceneSample) -> Result<bool> {
    let mut tape = Tape::new();
    let fw = model.forward(&mut tape, store, &s.f_i, &s.f_j, Ablation::default())?;
    let (h, w) = (s.f_i.shape()[1], s.f_i.shape()[2]);
    let grid = grid_coords(h, w);
    let r = model.cfg.radius;
    let mut flow = Tensor::zeros(&[2, h, w]);
    for (t, f) in fw.flows.iter().enumerate() {
        let coords = flow.zip_map(&grid, |a, b| a + b)?;
        let g = tape.value(fw.gates[t]);
        let n = g.numel();
        let gated: Vec<Tensor> = fw
            .offsets
            .iter()
            .map(|&o| Tensor::from_fn(tape.value(o).shape(), |i| tape.value(o).data()[i] * g.data()[i % n]))
            .collect();
        // the first fixed lookup sits on the integer grid but does not move
        if (t > 0 && !kink_free(&coords, None, r, 1e-5)) || !kink_free(&coords, Some(&gated), r, 1e-5) {
            return Ok(false);
        }
        flow = tape.value(*f).clone();
        let hw = h * w;
        let near_gt = (0..2 * hw).any(|i| s.valid[i % hw] && (flow.data()[i] - s.flow.data()[i]).abs() < 1e-4);
        if near_gt {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Full 8-iteration loss w.r.t. a spread of entries of every parameter.
fn pipeline_case(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    for _ in 0..MAX_DRAWS {
        let s = tiny_scene(rng.random())?;
        let mut store = ParamStore::new(0);
        let model = Model::new(&mut store, rng.random(), tiny_model_config(CorrPath::Materialized))?;
        // a livelier head moves samples off the integer grid after the first step
        store
            .value_mut(model.update.head2.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 10.0);
        if !trajectory_is_kink_free(&model, &store, &s)? {
            continue;
        }
        // the self-loss target is a constant of the step, so pin it at the base point
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &store, &s.f_i, &s.f_j, Ablation::default())?;
        let last = tape.value(*fw.flows.last().expect("iterations")).clone();
        let target = last.zip_map(&grid_coords(8, 8), |a, b| a + b)?;
        let w = LossWeights::default();
        return fd_check_params(
            &store,
            |t, st| {
                let l = model.loss_with_target(t, st, &s.f_i, &s.f_j, &s.flow, &s.valid, Ablation::default(), &w, Some(&target))?;
                Ok(l.total)
            },
            STEP,
            3,
        );
    }
    Err(Error::Oracle("no kink-free trajectory".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        let recs = run_gradcheck(2, 0, None, |_| {});
        let failed: Vec<&CheckRecord> = recs.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert_eq!(recs.len(), 2 * registry().len());
    }

    #[test]
    fn names_are_unique_and_cover_the_tape_ops() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for op in ["conv2d", "corr_lookup_masked", "kan_activation", "self_loss", "pipeline"] {
            assert!(names.contains(&op));
        }
    }

    #[test]
    fn filter_selects_cases_and_records_serialise() {
        let recs = run_gradcheck(1, 5, Some("tanh"), |_| {});
        assert_eq!(recs.len(), 1);
        let json = serde_json::to_string(&recs[0]).unwrap();
        assert!(json.contains("\"op\":\"tanh\""));
        assert!(json.contains("\"max_rel_error\""));
    }
}

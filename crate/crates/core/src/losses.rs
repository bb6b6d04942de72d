//! Flow supervision, the self-supervised uncertainty loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Loss weights. `lambda_flow` and `lambda_self` scale the two in-scope terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda_flow: f64,
    pub lambda_self: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.9,
            lambda_flow: 0.05,
            lambda_self: 0.08,
        }
    }
}

/// Weight of estimate `t` (0-based) out of `n`: `γ^(n-1-t)`.
pub fn iteration_weight(gamma: f64, t: usize, n: usize) -> f64 {
    gamma.powi((n - 1 - t) as i32)
}

fn check_flow(est: &Tensor, gt: &Tensor, valid: &[bool]) -> Result<usize> {
    let s = gt.shape();
    if s.len() != 3 || s[0] != 2 || est.shape() != s || valid.len() != s[1] * s[2] {
        return Err(shape_err!(
            "flow estimate {:?} vs ground truth {:?} with {} mask entries",
            est.shape(),
            s,
            valid.len()
        ));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Contract("flow loss needs at least one valid pixel".into()));
    }
    Ok(n)
}

fn mask_tensor(valid: &[bool], h: usize, w: usize) -> Tensor {
    let plane: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[2, h, w], [plane.clone(), plane].concat()).expect("mask shape")
}

/// `Σ_t γ^(n-1-t) · mean over valid pixels of |f̂_t - gt|₁`.
pub fn flow_loss(tape: &mut Tape, estimates: &[Var], gt: &Tensor, valid: &[bool], gamma: f64) -> Result<Var> {
    if estimates.is_empty() {
        return Err(Error::Contract("flow loss needs at least one estimate".into()));
    }
    let mut count = 0;
    for &e in estimates {
        count = check_flow(tape.value(e), gt, valid)?;
    }
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    let g = tape.constant(gt.clone());
    let m = tape.constant(mask_tensor(valid, h, w));
    let n = estimates.len();
    let mut terms = Vec::with_capacity(n);
    for (t, &e) in estimates.iter().enumerate() {
        let d = tape.sub(e, g)?;
        let a = tape.abs(d);
        let a = tape.mul(a, m)?;
        let s = tape.sum(a);
        terms.push((s, iteration_weight(gamma, t, n) / count as f64));
    }
    tape.weighted_sum(&terms)
}

/// Pure flow loss, for oracles and reports.
pub fn flow_loss_value(estimates: &[Tensor], gt: &Tensor, valid: &[bool], gamma: f64) -> Result<f64> {
    let n = estimates.len();
    let mut total = 0.0;
    for (t, e) in estimates.iter().enumerate() {
        let count = check_flow(e, gt, valid)?;
        let hw = valid.len();
        let mut s = 0.0;
        for (p, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
            s += (e.data()[p] - gt.data()[p]).abs() + (e.data()[hw + p] - gt.data()[hw + p]).abs();
        }
        total += iteration_weight(gamma, t, n) * s / count as f64;
    }
    Ok(total)
}

/// Mean Euclidean end-point error over valid pixels.
pub fn epe(flow: &Tensor, gt: &Tensor, valid: &[bool]) -> Result<f64> {
    let count = check_flow(flow, gt, valid)?;
    let hw = valid.len();
    let (f, g) = (flow.data(), gt.data());
    let s: f64 = (0..hw)
        .filter(|&p| valid[p])
        .map(|p| (f[p] - g[p]).hypot(f[hw + p] - g[hw + p]))
        .sum();
    Ok(s / count as f64)
}

fn check_self(e_mu: &Tensor, e_c: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
    let s = e_mu.shape();
    if s.len() != 3 || s[0] != 2 || e_c.shape() != s || target.shape() != s {
        return Err(shape_err!(
            "self loss: E_mu {:?}, E_c {:?}, target {:?}",
            s,
            e_c.shape(),
            target.shape()
        ));
    }
    if e_c.data().iter().any(|&c| c <= 0.0) {
        return Err(Error::Contract("self loss needs positive covariance".into()));
    }
    Ok((s[1], s[2]))
}

/// `Σ_p ρ²_p / (2·H·W·det_p) + mean_p ½·ln det_p`, `det_p = c_x·c_y`.
pub fn self_loss_value(e_mu: &Tensor, e_c: &Tensor, target: &Tensor) -> Result<f64> {
    let (h, w) = check_self(e_mu, e_c, target)?;
    let hw = h * w;
    let (m, c, p) = (e_mu.data(), e_c.data(), target.data());
    let mut res = 0.0;
    let mut logdet = 0.0;
    for i in 0..hw {
        let det = c[i] * c[hw + i];
        let rho2 = (m[i] - p[i]).powi(2) + (m[hw + i] - p[hw + i]).powi(2);
        res += rho2 / (2.0 * hw as f64 * det);
        logdet += 0.5 * det.ln();
    }
    Ok(res + logdet / hw as f64)
}

impl Tape {
    /// Self-supervised loss; `target` is a plain tensor, so no gradient can reach it.
    pub fn self_loss(&mut self, e_mu: Var, e_c: Var, target: &Tensor) -> Result<Var> {
        let v = self_loss_value(self.value(e_mu), self.value(e_c), target)?;
        let target = target.clone();
        Ok(self.push("self_loss", Tensor::scalar(v), &[e_mu, e_c], move |ctx| {
            let g = ctx.grad.data()[0];
            let (m, c, p) = (ctx.input(0).data(), ctx.input(1).data(), target.data());
            let hw = m.len() / 2;
            let n = hw as f64;
            let mut dm = vec![0.0; 2 * hw];
            let mut dc = vec![0.0; 2 * hw];
            for i in 0..hw {
                let (cx, cy) = (c[i], c[hw + i]);
                let det = cx * cy;
                let (rx, ry) = (m[i] - p[i], m[hw + i] - p[hw + i]);
                let rho2 = rx * rx + ry * ry;
                dm[i] = g * rx / (n * det);
                dm[hw + i] = g * ry / (n * det);
                let k = (1.0 - rho2 / det) / (2.0 * n);
                dc[i] = g * k / cx;
                dc[hw + i] = g * k / cy;
            }
            let shape = ctx.input(0).shape().to_vec();
            if ctx.wants(0) {
                ctx.accumulate(0, Tensor::new(&shape, dm)?);
            }
            if ctx.wants(1) {
                ctx.accumulate(1, Tensor::new(&shape, dc)?);
            }
            Ok(())
        }))
    }

    /// `λ_flow·L_flow + λ_self·L_self`; a missing self term counts as zero.
    pub fn total_loss(&mut self, l_flow: Var, l_self: Option<Var>, weights: &LossWeights) -> Result<Var> {
        let mut terms = vec![(l_flow, weights.lambda_flow)];
        terms.extend(l_self.map(|l| (l, weights.lambda_self)));
        self.weighted_sum(&terms)
    }
}

/// Pure weighted total.
pub fn total_loss_value(l_flow: f64, l_self: f64, weights: &LossWeights) -> f64 {
    weights.lambda_flow * l_flow + weights.lambda_self * l_self
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-a..a))
    }

    #[test]
    fn exact_estimates_have_zero_flow_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = rand_t(&mut rng, &[2, 3, 4], 3.0);
        let valid = vec![true; 12];
        let mut tape = Tape::new();
        let est: Vec<Var> = (0..8).map(|_| tape.var(gt.clone())).collect();
        let l = flow_loss(&mut tape, &est, &gt, &valid, 0.9).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn unit_error_costs_the_iteration_weight() {
        let gt = Tensor::zeros(&[2, 2, 3]);
        let valid = vec![true; 6];
        for t in 0..8 {
            let est: Vec<Tensor> = (0..8)
                .map(|k| {
                    let mut e = gt.clone();
                    if k == t {
                        e.data_mut()[..6].fill(1.0);
                    }
                    e
                })
                .collect();
            let v = flow_loss_value(&est, &gt, &valid, 0.9).unwrap();
            assert!((v - 0.9f64.powi(7 - t as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn flow_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (h, w) = (4, 5);
        let gt = rand_t(&mut rng, &[2, h, w], 3.0);
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        let est: Vec<Tensor> = (0..8).map(|_| rand_t(&mut rng, &[2, h, w], 3.0)).collect();
        let mut want = 0.0;
        let n = valid.iter().filter(|&&v| v).count() as f64;
        for (t, e) in est.iter().enumerate() {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if valid[y * w + x] {
                        for c in 0..2 {
                            s += (e.at(&[c, y, x]) - gt.at(&[c, y, x])).abs();
                        }
                    }
                }
            }
            want += 0.9f64.powi(7 - t as i32) * s / n;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = est.iter().map(|e| tape.var(e.clone())).collect();
        let l = flow_loss(&mut tape, &vars, &gt, &valid, 0.9).unwrap();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
        assert!((flow_loss_value(&est, &gt, &valid, 0.9).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let gt = Tensor::zeros(&[2, 2, 2]);
        let mut tape = Tape::new();
        let e = tape.var(gt.clone());
        assert!(matches!(
            flow_loss(&mut tape, &[e], &gt, &[false; 4], 0.9),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn epe_of_unit_shift_is_one() {
        let gt = Tensor::zeros(&[2, 3, 3]);
        let mut f = gt.clone();
        f.data_mut()[..9].fill(0.6);
        f.data_mut()[9..].fill(0.8);
        assert!((epe(&f, &gt, &[true; 9]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn self_loss_vanishes_at_alignment_with_unit_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_t(&mut rng, &[2, 4, 4], 5.0);
        let c = Tensor::full(&[2, 4, 4], 1.0);
        assert_eq!(self_loss_value(&p, &c, &p).unwrap(), 0.0);
    }

    #[test]
    fn target_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let mu = tape.var(rand_t(&mut rng, &[2, 3, 3], 2.0));
        let c = tape.var(rand_t(&mut rng, &[2, 3, 3], 1.0).map(|v| v + 2.0));
        let p = tape.var(rand_t(&mut rng, &[2, 3, 3], 2.0));
        let target = tape.stop_gradient(p);
        let tv = tape.value(target).clone();
        let l = tape.self_loss(mu, c, &tv).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(&tape, p).max_abs(), 0.0);
        assert!(g.wrt(&tape, mu).max_abs() > 0.0);
    }

    #[test]
    fn mean_gradient_vanishes_only_at_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_t(&mut rng, &[2, 3, 3], 2.0);
        let c = rand_t(&mut rng, &[2, 3, 3], 1.0).map(|v| v + 2.0);
        let grad_at = |mu: &Tensor| {
            let mut tape = Tape::new();
            let m = tape.var(mu.clone());
            let cv = tape.constant(c.clone());
            let l = tape.self_loss(m, cv, &p).unwrap();
            tape.backward(l).unwrap().wrt(&tape, m)
        };
        assert_eq!(grad_at(&p).max_abs(), 0.0);
        for _ in 0..20 {
            let mu = p.zip_map(&rand_t(&mut rng, &[2, 3, 3], 1.0), |a, b| a + b).unwrap();
            let g = grad_at(&mu);
            // each entry is zero exactly where that component is aligned
            for i in 0..18 {
                assert_eq!(g.data()[i] == 0.0, mu.data()[i] == p.data()[i]);
            }
        }
    }

    /// Golden-section minimiser over `ln det` of the per-pixel loss.
    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    }

    #[test]
    fn optimal_determinant_equals_squared_residual() {
        let (h, w) = (3, 4);
        let hw = (h * w) as f64;
        for rho2 in [0.1, 0.5, 2.0, 7.5] {
            // one pixel's share of the loss as a function of its determinant
            let f = |ln_det: f64| {
                let det = ln_det.exp();
                rho2 / (2.0 * hw * det) + 0.5 * ln_det / hw
            };
            let det = golden_min(f, -10.0, 10.0).exp();
            assert!((det - rho2).abs() < 1e-6 * rho2, "{det} vs {rho2}");
        }
    }

    #[test]
    fn self_loss_gradient_passes_fd_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let p = rand_t(&mut rng, &[2, 3, 4], 2.0);
            let x = Tensor::cat_channels(&[
                &rand_t(&mut rng, &[2, 3, 4], 2.0),
                &rand_t(&mut rng, &[2, 3, 4], 1.0).map(|v| v + 2.0),
            ])
            .unwrap();
            let f = |t: &mut Tape, v: Var| {
                let m = t.narrow_channels(v, 0, 2)?;
                let c = t.narrow_channels(v, 2, 2)?;
                t.self_loss(m, c, &p)
            };
            let rep = fd_check(f, &x, 1e-6).unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn flow_loss_gradient_passes_fd_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let gt = rand_t(&mut rng, &[2, 3, 3], 2.0);
            let valid: Vec<bool> = (0..9).map(|i| i != 4).collect();
            let x = rand_t(&mut rng, &[6, 3, 3], 2.0);
            let f = |t: &mut Tape, v: Var| {
                let est: Vec<Var> = (0..3).map(|k| t.narrow_channels(v, 2 * k, 2)).collect::<Result<_>>()?;
                flow_loss(t, &est, &gt, &valid, 0.9)
            };
            let rep = fd_check(f, &x, 1e-6).unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn total_loss_uses_the_configured_weights() {
        let w = LossWeights::default();
        assert!((total_loss_value(1.0, 1.0, &w) - 0.13).abs() < 1e-15);
        assert_eq!(total_loss_value(0.0, 0.0, &w), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mut tape = Tape::new();
            let (va, vb) = (tape.var(Tensor::scalar(a)), tape.var(Tensor::scalar(b)));
            let t = tape.total_loss(va, Some(vb), &w).unwrap();
            assert_eq!(tape.value(t).item().unwrap(), total_loss_value(a, b, &w));
            let g = tape.backward(t).unwrap();
            assert_eq!(g.wrt(&tape, va).item().unwrap(), 0.05);
            assert_eq!(g.wrt(&tape, vb).item().unwrap(), 0.08);
        }
    }
}

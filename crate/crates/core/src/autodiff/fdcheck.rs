//! Central finite-difference oracle for tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks every coordinate of `x`. `f` must build a scalar loss from the input node.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    fd_check_coords(f, x, h, &all)
}

/// Like [`fd_check`] but only perturbs the listed flat coordinates.
pub fn fd_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = x.cast(DType::F64);
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv)?;
    let base = tape.value(loss).item()?;
    if !base.is_finite() {
        return Err(Error::Oracle(format!("loss is not finite at the base point: {base}")));
    }
    let analytic = tape.backward(loss)?.wrt(&tape, xv);
    drop(tape);

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let l = f(&mut t, v)?;
        let y = t.value(l).item()?;
        if !y.is_finite() {
            return Err(Error::Oracle(format!("loss is not finite under perturbation: {y}")));
        }
        Ok(y)
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Oracle(format!("coordinate {i} out of range {}", x.numel())));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks parameter gradients. At most `per_param` evenly spaced entries of
/// each parameter are perturbed (`0` means all). `worst_index` is a flat
/// index over the concatenated parameters in store order.
pub fn fd_check_params<F>(store: &ParamStore, f: F, h: f64, per_param: usize) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut s = store.clone();
    s.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &s)?;
    if !tape.value(loss).item()?.is_finite() {
        return Err(Error::Oracle("loss is not finite at the base point".into()));
    }
    let grads = tape.backward(loss)?;
    s.accumulate(&tape, &grads);
    drop(tape);

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, st)?;
        let y = t.value(l).item()?;
        if !y.is_finite() {
            return Err(Error::Oracle(format!("loss is not finite under perturbation: {y}")));
        }
        Ok(y)
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut flat = 0;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).numel();
        let picks: Vec<usize> = if per_param == 0 || per_param >= n {
            (0..n).collect()
        } else {
            (0..per_param).map(|k| k * n / per_param).collect()
        };
        for i in picks {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = s.grad(id).data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = flat + i;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
        flat += n;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let rep = fd_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 4);
    }

    #[test]
    fn non_finite_loss_is_an_oracle_error() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let res = fd_check(
            |t, v| {
                let l = t.ln(v);
                Ok(t.sum(l))
            },
            &x,
            1e-6,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn parameter_check_sees_repeated_leaves() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", Tensor::new(&[2], vec![0.3, -0.7]).unwrap()).unwrap();
        // the same parameter read twice must sum both contributions
        let rep = fd_check_params(
            &store,
            |t, s| {
                let a = t.param(s, id);
                let b = t.param(s, id);
                let p = t.mul(a, b)?;
                Ok(t.sum(p))
            },
            1e-6,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 2);
    }

    #[test]
    fn detects_a_wrong_adjoint() {
        // d/dx of x·stop_gradient(x) reported as x instead of 2x.
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let rep = fd_check(
            |t, v| {
                let s = t.stop_gradient(v);
                let p = t.mul(v, s)?;
                Ok(t.sum(p))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error > 0.4);
    }
}

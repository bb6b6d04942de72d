use super::{GradCtx, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{self, DType, Tensor};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn add_scaled(acc: &mut Tensor, src: &[f64], scale: f64) {
    acc.data_mut()
        .iter_mut()
        .zip(src)
        .for_each(|(a, &b)| *a += scale * b);
}

/// Per-channel spatial standardisation `(x - mean) / sqrt(var + eps)` of a `C×...` tensor.
pub fn norm_corr(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (&c, rest) = x
        .shape()
        .split_first()
        .ok_or_else(|| shape_err!("norm_corr on a scalar"))?;
    let n: usize = rest.iter().product();
    if n == 0 {
        return Err(shape_err!("norm_corr over an empty spatial extent"));
    }
    let mut out = vec![0.0; c * n];
    let mut inv_std = Vec::with_capacity(c);
    for (dst, src) in out.chunks_mut(n).zip(x.data().chunks(n)) {
        // shifted by the first sample so that constant input centres to exact zeros
        let shift = src[0];
        let mean = shift + src.iter().map(|v| v - shift).sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((Tensor::from_parts(x.dtype(), x.shape().to_vec(), out), inv_std))
}

impl Tape {
    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value, &[a], move |ctx: &mut GradCtx| {
            let x = ctx.input(0);
            let y = ctx.out;
            let g: Vec<f64> = ctx
                .grad
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            add_scaled(ctx.grad_mut(0), &g, 1.0);
            Ok(())
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push("add", value, &[a, b], |ctx| {
            for k in 0..2 {
                if ctx.wants(k) {
                    let g = ctx.grad;
                    add_scaled(ctx.grad_mut(k), g.data(), 1.0);
                }
            }
            Ok(())
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push("sub", value, &[a, b], |ctx| {
            let g = ctx.grad;
            if ctx.wants(0) {
                add_scaled(ctx.grad_mut(0), g.data(), 1.0);
            }
            if ctx.wants(1) {
                add_scaled(ctx.grad_mut(1), g.data(), -1.0);
            }
            Ok(())
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push("mul", value, &[a, b], |ctx| {
            let g = ctx.grad.data();
            for (k, other) in [(0, 1), (1, 0)] {
                if ctx.wants(k) {
                    let o = ctx.input(other).data();
                    let acc = ctx.grad_mut(k);
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.iter().zip(o))
                        .for_each(|(a, (&g, &o))| *a += g * o);
                }
            }
            Ok(())
        }))
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, &[a], move |ctx| {
            let g = ctx.grad;
            add_scaled(ctx.grad_mut(0), g.data(), c);
            Ok(())
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, &[a], |ctx| {
            let g = ctx.grad;
            add_scaled(ctx.grad_mut(0), g.data(), 1.0);
            Ok(())
        })
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 - x);
        self.push("one_minus", value, &[a], |ctx| {
            let g = ctx.grad;
            add_scaled(ctx.grad_mut(0), g.data(), -1.0);
            Ok(())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary("gelu", a, gelu, |x, _| gelu_grad(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary("ln", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary("abs", a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, &[a], |ctx| {
            let g = ctx.grad.data()[0];
            ctx.grad_mut(0).data_mut().iter_mut().for_each(|v| *v += g);
            Ok(())
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Σ_k w_k · v_k over scalar (or equally shaped) nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| shape_err!("weighted_sum of nothing"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("weighted_sum: {:?} vs {:?}", t.shape(), shape));
            }
            out.iter_mut().zip(t.data()).for_each(|(o, x)| *o += w * x);
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            "weighted_sum",
            Tensor::from_parts(DType::F64, shape, out),
            &inputs,
            move |ctx| {
                let g = ctx.grad;
                for (k, &w) in weights.iter().enumerate() {
                    if ctx.wants(k) {
                        add_scaled(ctx.grad_mut(k), g.data(), w);
                    }
                }
                Ok(())
            },
        ))
    }

    pub fn cat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::cat_channels(&values)?;
        let sizes: Vec<usize> = values.iter().map(|t| t.numel()).collect();
        Ok(self.push("cat_channels", value, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut start = 0;
            for (k, &len) in sizes.iter().enumerate() {
                if ctx.wants(k) {
                    add_scaled(ctx.grad_mut(k), &g[start..start + len], 1.0);
                }
                start += len;
            }
            Ok(())
        }))
    }

    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow_channels(start, len)?;
        let plane: usize = value.shape()[1..].iter().product();
        Ok(self.push("narrow_channels", value, &[a], move |ctx| {
            let g = ctx.grad;
            let acc = ctx.grad_mut(0);
            acc.data_mut()[start * plane..(start + len) * plane]
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
            Ok(())
        }))
    }

    /// Multiplies every channel of a `C×H×W` node by a shared `H×W` (or `1×H×W`) field.
    pub fn mul_plane(&mut self, a: Var, plane: Var) -> Result<Var> {
        let (x, p) = (self.value(a), self.value(plane));
        let n = p.numel();
        if x.ndim() < 1 || x.numel() % n.max(1) != 0 || x.shape()[1..].iter().product::<usize>() != n {
            return Err(shape_err!("mul_plane: {:?} by plane {:?}", x.shape(), p.shape()));
        }
        let mut out = x.data().to_vec();
        out.chunks_mut(n)
            .for_each(|ch| ch.iter_mut().zip(p.data()).for_each(|(v, s)| *v *= s));
        let value = Tensor::from_parts(x.dtype(), x.shape().to_vec(), out);
        Ok(self.push("mul_plane", value, &[a, plane], move |ctx| {
            let g = ctx.grad.data();
            let (x, p) = (ctx.input(0), ctx.input(1));
            if ctx.wants(0) {
                let acc = ctx.grad_mut(0);
                acc.data_mut()
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .for_each(|(a, g)| {
                        a.iter_mut()
                            .zip(g.iter().zip(p.data()))
                            .for_each(|(a, (g, s))| *a += g * s)
                    });
            }
            if ctx.wants(1) {
                let acc = ctx.grad_mut(1);
                for (g, x) in g.chunks(n).zip(x.data().chunks(n)) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(a, (g, x))| *a += g * x);
                }
            }
            Ok(())
        }))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push("conv2d", value, &inputs, |ctx| {
            let grads = tensor::conv2d_backward(
                ctx.input(0),
                ctx.input(1),
                ctx.grad,
                ctx.wants(0),
                ctx.wants(1),
            )?;
            if let Some(g) = grads.src {
                ctx.accumulate(0, g);
            }
            if let Some(g) = grads.kernel {
                ctx.accumulate(1, g);
            }
            if ctx.inputs.len() > 2 {
                ctx.accumulate(2, grads.bias);
            }
            Ok(())
        }))
    }

    pub fn fully_connected(&mut self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let w = self.value(weights);
        // A per-position linear map is a 1×1 convolution over a flattened grid.
        let cin = xs.first().copied().unwrap_or(0);
        let n: usize = xs.iter().skip(1).product();
        let value = tensor::fully_connected(self.value(x), w, bias.map(|b| self.value(b)))?;
        let cout = w.shape()[0];
        let mut inputs = vec![x, weights];
        inputs.extend(bias);
        Ok(self.push("fully_connected", value, &inputs, move |ctx| {
            let x3 = ctx.input(0).reshape(&[cin, 1, n])?;
            let k4 = ctx.input(1).reshape(&[cout, cin, 1, 1])?;
            let g3 = ctx.grad.reshape(&[cout, 1, n])?;
            let grads = tensor::conv2d_backward(&x3, &k4, &g3, ctx.wants(0), ctx.wants(1))?;
            if let Some(g) = grads.src {
                ctx.accumulate(0, g);
            }
            if let Some(g) = grads.kernel {
                ctx.accumulate(1, g);
            }
            if ctx.inputs.len() > 2 {
                ctx.accumulate(2, grads.bias);
            }
            Ok(())
        }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = tensor::avg_pool2d(self.value(x), k)?;
        Ok(self.push("avg_pool2d", value, &[x], move |ctx| {
            let g = ctx.grad;
            tensor::avg_pool2d_backward_into(g, k, ctx.grad_mut(0))
        }))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = tensor::resize_bilinear(self.value(x), out_h, out_w)?;
        let (h, w) = (self.value(x).shape()[1], self.value(x).shape()[2]);
        Ok(self.push("resize_bilinear", value, &[x], move |ctx| {
            let g = tensor::resize_bilinear_backward(ctx.grad, h, w)?;
            ctx.accumulate(0, g);
            Ok(())
        }))
    }

    /// Per-channel standardisation over all trailing (spatial) positions.
    pub fn norm_corr(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = norm_corr(self.value(x), eps)?;
        let n = value.numel() / inv_std.len().max(1);
        Ok(self.push("norm_corr", value, &[x], move |ctx| {
            // y = (x - m)·s, s = (v + eps)^-1/2  =>  dx = s·(g - mean(g) - y·mean(g·y))
            let y = ctx.out.data();
            let g = ctx.grad.data();
            let mut dx = vec![0.0; y.len()];
            for (c, &s) in inv_std.iter().enumerate() {
                let (yc, gc) = (&y[c * n..(c + 1) * n], &g[c * n..(c + 1) * n]);
                let mg = gc.iter().sum::<f64>() / n as f64;
                let mgy = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for ((d, &gi), &yi) in dx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(yc) {
                    *d = s * (gi - mg - yi * mgy);
                }
            }
            add_scaled(ctx.grad_mut(0), &dx, 1.0);
            Ok(())
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
    }

    /// Contracts `node` with fixed random weights so every output entry matters.
    fn project(tape: &mut Tape, node: Var, seed: u64) -> Var {
        let w = random(tape.value(node).shape(), seed ^ 0xabc);
        let wv = tape.constant(w);
        let p = tape.mul(node, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn elementwise_ops_pass_fd_check() {
        type Build = fn(&mut Tape, Var) -> Var;
        let cases: [(&str, Build); 8] = [
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("gelu", |t, x| t.gelu(x)),
            ("exp", |t, x| t.exp(x)),
            ("square", |t, x| t.square(x)),
            ("scale", |t, x| t.scale(x, -0.7)),
            ("one_minus", |t, x| t.one_minus(x)),
            ("add_scalar", |t, x| t.add_scalar(x, 2.0)),
        ];
        for seed in 0..10 {
            for (name, build) in cases {
                let x = random(&[2, 3, 3], seed);
                let rep = fd_check(
                    |t, v| {
                        let y = build(t, v);
                        Ok(project(t, y, seed))
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(rep.max_rel_error <= 1e-5, "{name} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn norm_corr_forward_and_gradient() {
        let x = random(&[3, 4, 5], 4);
        let (y, _) = norm_corr(&x, 1e-5).unwrap();
        for c in 0..3 {
            let ch = &y.data()[c * 20..(c + 1) * 20];
            let mean = ch.iter().sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-12);
        }
        let constant = Tensor::full(&[2, 3, 3], 4.2);
        assert!(norm_corr(&constant, 1e-5).unwrap().0.data().iter().all(|&v| v == 0.0));

        for seed in 0..10 {
            let x = random(&[2, 4, 4], seed);
            let rep = fd_check(
                |t, v| {
                    let y = t.norm_corr(v, 1e-5)?;
                    Ok(project(t, y, seed))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_error <= 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn structural_ops_pass_fd_check() {
        for seed in 0..10 {
            let x = random(&[3, 4, 4], seed);
            let k = random(&[2, 3, 3, 3], seed + 100);
            let b = random(&[2], seed + 200);
            let w = random(&[2, 3], seed + 300);
            let conv = fd_check(
                |t, v| {
                    let kv = t.constant(k.clone());
                    let bv = t.constant(b.clone());
                    let y = t.conv2d(v, kv, Some(bv))?;
                    Ok(project(t, y, seed))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(conv.max_rel_error <= 1e-5, "conv/x {conv:?}");
            let conv_k = fd_check(
                |t, kv| {
                    let xv = t.constant(x.clone());
                    let y = t.conv2d(xv, kv, None)?;
                    Ok(project(t, y, seed))
                },
                &k,
                1e-6,
            )
            .unwrap();
            assert!(conv_k.max_rel_error <= 1e-5, "conv/k {conv_k:?}");
            let fc = fd_check(
                |t, wv| {
                    let xv = t.constant(x.clone());
                    let y = t.fully_connected(xv, wv, None)?;
                    Ok(project(t, y, seed))
                },
                &w,
                1e-6,
            )
            .unwrap();
            assert!(fc.max_rel_error <= 1e-5, "fc {fc:?}");
            let plane = random(&[1, 4, 4], seed + 400);
            let pooled = fd_check(
                |t, v| {
                    let y = t.avg_pool2d(v, 2)?;
                    let z = t.resize_bilinear(y, 4, 4)?;
                    let n = t.narrow_channels(z, 1, 2)?;
                    let c = t.cat_channels(&[n, v])?;
                    let pv = t.constant(plane.clone());
                    let m = t.mul_plane(c, pv)?;
                    Ok(project(t, m, seed))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(pooled.max_rel_error <= 1e-5, "pool/resize/cat {pooled:?}");
            let gate = fd_check(
                |t, pv| {
                    let xv = t.constant(x.clone());
                    let m = t.mul_plane(xv, pv)?;
                    Ok(project(t, m, seed))
                },
                &plane,
                1e-6,
            )
            .unwrap();
            assert!(gate.max_rel_error <= 1e-5, "mul_plane/plane {gate:?}");
        }
    }
}

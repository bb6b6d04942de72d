//! Recurrent update operator: a conv-GRU whose gates take KAN-predicted biases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::Conv;
use crate::tensor::Tensor;

/// Spline intervals on `[-1, 1]`.
pub const GRID: usize = 8;
/// Cubic B-spline coefficients per channel.
pub const NUM_BASES: usize = GRID + 3;
pub const KNOT_STEP: f64 = 2.0 / GRID as f64;

/// Knot `t_j = -1 + (j - 3)·h` of the uniform extended grid, `j ∈ 0..=GRID+6`.
pub fn knot(j: usize) -> f64 {
    -1.0 + (j as f64 - 3.0) * KNOT_STEP
}

/// Nonzero cubic bases at `u` (clamped to `[-1, 1]`): first index, values
/// and derivatives w.r.t. `u`. Derivatives vanish outside the grid.
pub fn spline_basis(u: f64) -> (usize, [f64; 4], [f64; 4]) {
    let x = u.clamp(-1.0, 1.0);
    let pos = (x + 1.0) / KNOT_STEP;
    let i = (pos.floor() as usize).min(GRID - 1);
    let s = pos - i as f64;
    let (s2, s3) = (s * s, s * s * s);
    let m = 1.0 - s;
    let vals = [
        m * m * m / 6.0,
        (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
        (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
        s3 / 6.0,
    ];
    let mut ders = [0.0; 4];
    if u > -1.0 && u < 1.0 {
        ders = [
            -m * m / 2.0,
            (3.0 * s2 - 4.0 * s) / 2.0,
            (-3.0 * s2 + 2.0 * s + 1.0) / 2.0,
            s2 / 2.0,
        ]
        .map(|d| d / KNOT_STEP);
    }
    (i, vals, ders)
}

/// Per-channel `φ_c(u) = base_c·u + Σ_j coef_{c,j}·B_j(clamp(u))`.
pub fn kan_activation(u: &Tensor, base: &Tensor, coef: &Tensor) -> Result<Tensor> {
    let c = check_kan(u, base, coef)?;
    let n = u.numel() / c;
    let mut out = u.data().to_vec();
    for (ch, plane) in out.chunks_mut(n).enumerate() {
        let cf = &coef.data()[ch * NUM_BASES..(ch + 1) * NUM_BASES];
        for v in plane.iter_mut() {
            let (i, b, _) = spline_basis(*v);
            *v = base.data()[ch] * *v + (0..4).map(|k| cf[i + k] * b[k]).sum::<f64>();
        }
    }
    Tensor::new(u.shape(), out)
}

fn check_kan(u: &Tensor, base: &Tensor, coef: &Tensor) -> Result<usize> {
    let c = u.shape().first().copied().unwrap_or(0);
    if u.ndim() < 2 || base.shape() != [c] || coef.shape() != [c, NUM_BASES] {
        return Err(shape_err!(
            "kan: input {:?}, base {:?}, coef {:?}",
            u.shape(),
            base.shape(),
            coef.shape()
        ));
    }
    Ok(c)
}

impl Tape {
    pub fn kan_activation(&mut self, u: Var, base: Var, coef: Var) -> Result<Var> {
        let value = kan_activation(self.value(u), self.value(base), self.value(coef))?;
        Ok(self.push("kan_activation", value, &[u, base, coef], |ctx| {
            let (u, base, coef) = (ctx.input(0), ctx.input(1), ctx.input(2));
            let c = base.numel();
            let n = u.numel() / c;
            let g = ctx.grad.data();
            let mut du = vec![0.0; u.numel()];
            let mut db = vec![0.0; c];
            let mut dc = vec![0.0; c * NUM_BASES];
            for ch in 0..c {
                let cf = &coef.data()[ch * NUM_BASES..(ch + 1) * NUM_BASES];
                let bw = base.data()[ch];
                for p in ch * n..(ch + 1) * n {
                    let x = u.data()[p];
                    let (i, b, d) = spline_basis(x);
                    du[p] = g[p] * (bw + (0..4).map(|k| cf[i + k] * d[k]).sum::<f64>());
                    db[ch] += g[p] * x;
                    for k in 0..4 {
                        dc[ch * NUM_BASES + i + k] += g[p] * b[k];
                    }
                }
            }
            let shape = u.shape().to_vec();
            if ctx.wants(0) {
                ctx.accumulate(0, Tensor::new(&shape, du)?);
            }
            if ctx.wants(1) {
                ctx.accumulate(1, Tensor::new(&[c], db)?);
            }
            if ctx.wants(2) {
                ctx.accumulate(2, Tensor::new(&[c, NUM_BASES], dc)?);
            }
            Ok(())
        }))
    }
}

/// One KAN head: per-channel spline activation followed by a bias-free mixing matrix.
#[derive(Debug, Clone, Copy)]
pub struct KanHead {
    pub base: ParamId,
    pub coef: ParamId,
    pub mix: ParamId,
}

impl KanHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Result<Self> {
        let bound = 1.0 / (c as f64).sqrt();
        let base = Tensor::from_fn(&[c], |_| rng.random_range(-0.1..0.1));
        let coef = Tensor::from_fn(&[c, NUM_BASES], |_| rng.random_range(-0.1..0.1));
        let mix = Tensor::from_fn(&[c, c], |_| rng.random_range(-bound..bound));
        Ok(KanHead {
            base: store.add(format!("{name}.base"), base)?,
            coef: store.add(format!("{name}.coef"), coef)?,
            mix: store.add(format!("{name}.mix"), mix)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let (b, c, m) = (
            tape.param(store, self.base),
            tape.param(store, self.coef),
            tape.param(store, self.mix),
        );
        let a = tape.kan_activation(u, b, c)?;
        tape.fully_connected(a, m, None)
    }
}

/// `b = KAN(sigmoid(conv1×1(h)) ∗ h)`, with independent heads for z, r and o.
#[derive(Debug, Clone, Copy)]
pub struct KanBias {
    pub gate: Conv,
    pub heads: [KanHead; 3],
}

impl KanBias {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(KanBias {
            gate: Conv::new(store, rng, &format!("{prefix}.gate"), hidden, hidden, 1, 1.0)?,
            heads: [
                KanHead::new(store, rng, &format!("{prefix}.z"), hidden)?,
                KanHead::new(store, rng, &format!("{prefix}.r"), hidden)?,
                KanHead::new(store, rng, &format!("{prefix}.o"), hidden)?,
            ],
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<[Var; 3]> {
        let g = self.gate.forward(tape, store, h)?;
        let g = tape.sigmoid(g);
        let u = tape.mul(g, h)?;
        Ok([
            self.heads[0].forward(tape, store, u)?,
            self.heads[1].forward(tape, store, u)?,
            self.heads[2].forward(tape, store, u)?,
        ])
    }

    /// Zeroes every spline coefficient and base weight, so the biases vanish.
    pub fn zero(&self, store: &mut ParamStore) {
        for head in &self.heads {
            store.value_mut(head.base).data_mut().fill(0.0);
            store.value_mut(head.coef).data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGru {
    pub z: Conv,
    pub r: Conv,
    pub o: Conv,
    pub kan: KanBias,
    pub hidden: usize,
}

impl ConvGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, hidden: usize, input: usize) -> Result<Self> {
        let cin = hidden + input;
        Ok(ConvGru {
            z: Conv::new(store, rng, &format!("{prefix}.conv_z"), cin, hidden, 3, 1.0)?,
            r: Conv::new(store, rng, &format!("{prefix}.conv_r"), cin, hidden, 3, 1.0)?,
            o: Conv::new(store, rng, &format!("{prefix}.conv_o"), cin, hidden, 3, 1.0)?,
            kan: KanBias::new(store, rng, &format!("{prefix}.kan"), hidden)?,
            hidden,
        })
    }

    /// `h_t = (1 - z)∗h + z∗o`; the KAN biases are skipped when `use_kan` is false.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var, use_kan: bool) -> Result<Var> {
        let hs = tape.value(h).shape().to_vec();
        let xs = tape.value(x).shape().to_vec();
        if hs.len() != 3 || hs[0] != self.hidden || xs.len() != 3 || xs[1..] != hs[1..] {
            return Err(shape_err!("gru_step: hidden {hs:?}, input {xs:?}"));
        }
        let bias = if use_kan {
            Some(self.kan.forward(tape, store, h)?)
        } else {
            None
        };
        let with_bias = |tape: &mut Tape, v: Var, k: usize| match bias {
            Some(b) => tape.add(v, b[k]),
            None => Ok(v),
        };
        let hx = tape.cat_channels(&[h, x])?;
        let z = self.z.forward(tape, store, hx)?;
        let z = with_bias(tape, z, 0)?;
        let z = tape.sigmoid(z);
        let r = self.r.forward(tape, store, hx)?;
        let r = with_bias(tape, r, 1)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhx = tape.cat_channels(&[rh, x])?;
        let o = self.o.forward(tape, store, rhx)?;
        let o = with_bias(tape, o, 2)?;
        let o = tape.tanh(o);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, h)?;
        let b = tape.mul(z, o)?;
        tape.add(a, b)
    }
}

/// Channel widths of the update operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorDims {
    pub hidden: usize,
    pub context: usize,
    pub corr: usize,
    pub flow: usize,
    pub head: usize,
}

impl OperatorDims {
    pub fn gru_input(&self) -> usize {
        self.corr + self.flow + self.context
    }
}

/// `h_0 = tanh` of the first `hidden` channels of a `1×1` conv of the source
/// features; the remaining channels (after ReLU) are the context.
#[derive(Debug, Clone, Copy)]
pub struct ContextNet {
    pub conv: Conv,
    pub hidden: usize,
    pub context: usize,
}

impl ContextNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, channels: usize, dims: OperatorDims) -> Result<Self> {
        Ok(ContextNet {
            conv: Conv::new(store, rng, &format!("{prefix}.cnet"), channels, dims.hidden + dims.context, 1, 1.0)?,
            hidden: dims.hidden,
            context: dims.context,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_i: Var) -> Result<(Var, Var)> {
        let z = self.conv.forward(tape, store, f_i)?;
        let h = tape.narrow_channels(z, 0, self.hidden)?;
        let h = tape.tanh(h);
        let c = tape.narrow_channels(z, self.hidden, self.context)?;
        Ok((h, tape.relu(c)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateOperator {
    pub corr1: Conv,
    pub corr2: Conv,
    pub flow1: Conv,
    pub flow2: Conv,
    pub gru: ConvGru,
    pub head1: Conv,
    pub head2: Conv,
    pub dims: OperatorDims,
}

impl UpdateOperator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        lookup_channels: usize,
        dims: OperatorDims,
    ) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(UpdateOperator {
            corr1: Conv::new(store, rng, &p("corr1"), lookup_channels, dims.corr, 1, 1.0)?,
            corr2: Conv::new(store, rng, &p("corr2"), dims.corr, dims.corr, 3, 1.0)?,
            flow1: Conv::new(store, rng, &p("flow1"), 2, dims.flow, 7, 1.0)?,
            flow2: Conv::new(store, rng, &p("flow2"), dims.flow, dims.flow, 3, 1.0)?,
            gru: ConvGru::new(store, rng, &p("gru"), dims.hidden, dims.gru_input())?,
            head1: Conv::new(store, rng, &p("head1"), dims.hidden, dims.head, 3, 1.0)?,
            head2: Conv::new(store, rng, &p("head2"), dims.head, 2, 3, 0.1)?,
            dims,
        })
    }

    /// Input encoding `x_t = [enc(L), enc(flow), context]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, lookup: Var, flow: Var, context: Var) -> Result<Var> {
        let c = self.corr1.forward(tape, store, lookup)?;
        let c = tape.relu(c);
        let c = self.corr2.forward(tape, store, c)?;
        let c = tape.relu(c);
        let f = self.flow1.forward(tape, store, flow)?;
        let f = tape.relu(f);
        let f = self.flow2.forward(tape, store, f)?;
        let f = tape.relu(f);
        tape.cat_channels(&[c, f, context])
    }

    /// One refinement: `(h_t, Δflow)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        lookup: Var,
        flow: Var,
        context: Var,
        use_kan: bool,
    ) -> Result<(Var, Var)> {
        let x = self.encode(tape, store, lookup, flow, context)?;
        let h = self.gru.step(tape, store, h, x, use_kan)?;
        let d = self.head1.forward(tape, store, h)?;
        let d = tape.relu(d);
        let d = self.head2.forward(tape, store, d)?;
        Ok((h, d))
    }
}

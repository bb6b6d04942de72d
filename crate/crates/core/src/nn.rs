//! Parameterised layers over the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Same-padded convolution with bias; `k = 1` is a per-pixel linear map.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    /// Weights uniform in `±gain/√fan_in`, bias uniform in `±1/√fan_in`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan = ((cin * k * k) as f64).sqrt();
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| uniform(rng, gain / fan));
        let b = Tensor::from_fn(&[cout], |_| uniform(rng, 1.0 / fan));
        Ok(Conv {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            cin,
            cout,
            k,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        if self.k == 1 {
            let wv = tape.reshape(w, &[self.cout, self.cin])?;
            tape.fully_connected(x, wv, Some(b))
        } else {
            tape.conv2d(x, w, Some(b))
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

impl Tape {
    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(v).reshape(shape)?;
        let orig = self.value(v).shape().to_vec();
        Ok(self.push("reshape", value, &[v], move |ctx| {
            let g = ctx.grad.reshape(&orig)?;
            ctx.accumulate(0, g);
            Ok(())
        }))
    }
}

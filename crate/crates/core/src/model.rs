//! The composed pipeline: Gaussian field, masked correlation, deformable
//! lookup and the unrolled update operator.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::correlation::{num_taps, pool_features, CorrPath, CorrPyramid, LEVELS};
use crate::deformable::OffsetDecoder;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianEncoder, MaskParams};
use crate::geometry::grid_coords;
use crate::losses::{flow_loss, LossWeights};
use crate::temporal::{ContextNet, OperatorDims, UpdateOperator};
use crate::tensor::{DType, Tensor};

/// Which parts of the pipeline are active. All three off gives the plain
/// fixed-range conv-GRU baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub lgu: bool,
    pub deform: bool,
    pub kan: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            lgu: true,
            deform: true,
            kan: true,
        }
    }
}

impl Ablation {
    pub fn baseline() -> Self {
        Ablation {
            lgu: false,
            deform: false,
            kan: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub radius: usize,
    pub mask: MaskParams,
    pub dims: OperatorDims,
    pub iterations: usize,
    pub path: CorrPath,
}

#[derive(Debug, Clone, Copy)]
pub struct Model {
    pub gaussian: GaussianEncoder,
    pub offsets: OffsetDecoder,
    pub context: ContextNet,
    pub update: UpdateOperator,
    pub cfg: ModelConfig,
}

/// Everything the forward pass exposes for losses and dumps.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Flow after each iteration, `2×H×W`.
    pub flows: Vec<Var>,
    pub e_mu: Option<Var>,
    pub e_c: Option<Var>,
    /// Per-iteration gate planes, empty without deformation.
    pub gates: Vec<Var>,
    /// Ungated per-level offsets.
    pub offsets: Vec<Var>,
}

/// Loss nodes of one sample.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub total: Var,
    pub l_flow: Var,
    pub l_self: Option<Var>,
    pub forward: Forward,
}

impl Model {
    /// Registers all parameters in `store`, initialised from `seed`.
    pub fn new(store: &mut ParamStore, seed: u64, cfg: ModelConfig) -> Result<Self> {
        if cfg.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        Ok(Model {
            gaussian: GaussianEncoder::new(store, &mut rng, "gauss", c)?,
            offsets: OffsetDecoder::new(store, &mut rng, "deform", c, cfg.radius)?,
            context: ContextNet::new(store, &mut rng, "context", c, cfg.dims)?,
            update: UpdateOperator::new(store, &mut rng, "update", LEVELS * num_taps(cfg.radius), cfg.dims)?,
            cfg,
        })
    }

    /// Unrolled forward pass on one feature pair; features are constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_i: &Tensor,
        f_j: &Tensor,
        ablation: Ablation,
    ) -> Result<Forward> {
        if f_i.ndim() != 3 || f_i.shape() != f_j.shape() || f_i.shape()[0] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "features {:?} / {:?}, model expects {} channels",
                f_i.shape(),
                f_j.shape(),
                self.cfg.channels
            )));
        }
        let (h, w) = (f_i.shape()[1], f_i.shape()[2]);
        let r = self.cfg.radius;
        let vi = tape.constant(f_i.clone());
        let vj = tape.constant(f_j.clone());

        let (e_mu, e_c) = if ablation.lgu {
            let (m, c) = self.gaussian.field(tape, store, vi, vj)?;
            (Some(m), Some(c))
        } else {
            (None, None)
        };
        let offsets = if ablation.deform {
            self.offsets.level_offsets(tape, store, vi, vj)?
        } else {
            Vec::new()
        };
        let (mut hidden, context) = self.context.forward(tape, store, vi)?;

        let mut corr = Corr::new(tape, self.cfg, f_i, f_j, vi, e_mu.zip(e_c))?;
        let grid = grid_coords(h, w).cast(f_i.dtype());
        let mut flow = tape.constant(Tensor::zeros(&[2, h, w]).cast(f_i.dtype()));
        let mut flows = Vec::with_capacity(self.cfg.iterations);
        let mut gates = Vec::new();
        let base = tape.constant(grid);
        for _ in 0..self.cfg.iterations {
            let coords = tape.add(base, flow)?;
            let fixed = corr.lookup(tape, coords, None, r)?;
            let sampled = if ablation.deform {
                let gate = tape.uncertainty_gate(fixed, r)?;
                let gated = tape.gate_offsets(&offsets, gate)?;
                gates.push(gate);
                corr.lookup(tape, coords, Some(&gated), r)?
            } else {
                fixed
            };
            let (h2, delta) = self
                .update
                .step(tape, store, hidden, sampled, flow, context, ablation.kan)?;
            hidden = h2;
            flow = tape.add(flow, delta)?;
            flows.push(flow);
        }
        Ok(Forward {
            flows,
            e_mu,
            e_c,
            gates,
            offsets,
        })
    }

    /// Weighted training loss on one sample. The self-supervision target is
    /// the final estimate's correspondence, cut from the graph.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_i: &Tensor,
        f_j: &Tensor,
        gt: &Tensor,
        valid: &[bool],
        ablation: Ablation,
        weights: &LossWeights,
    ) -> Result<SampleLoss> {
        self.loss_with_target(tape, store, f_i, f_j, gt, valid, ablation, weights, None)
    }

    /// As [`Model::loss`], with an explicit self-supervision target.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_target(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_i: &Tensor,
        f_j: &Tensor,
        gt: &Tensor,
        valid: &[bool],
        ablation: Ablation,
        weights: &LossWeights,
        target: Option<&Tensor>,
    ) -> Result<SampleLoss> {
        let fw = self.forward(tape, store, f_i, f_j, ablation)?;
        let l_flow = flow_loss(tape, &fw.flows, gt, valid, weights.gamma)?;
        let l_self = match (fw.e_mu, fw.e_c) {
            (Some(mu), Some(c)) if target.is_some() => Some(tape.self_loss(mu, c, target.unwrap())?),
            (Some(mu), Some(c)) => {
                let last = *fw.flows.last().expect("at least one iteration");
                let (h, w) = (gt.shape()[1], gt.shape()[2]);
                let target = tape.value(last).zip_map(&grid_coords(h, w), |f, g| f + g)?;
                Some(tape.self_loss(mu, c, &target)?)
            }
            _ => None,
        };
        let total = tape.total_loss(l_flow, l_self, weights)?;
        Ok(SampleLoss {
            total,
            l_flow,
            l_self,
            forward: fw,
        })
    }

    /// Rounds every parameter to `dtype`.
    pub fn cast_params(store: &mut ParamStore, dtype: DType) {
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value(id).cast(dtype);
            *store.value_mut(id) = v;
        }
    }
}

/// Per-sample correlation source for either computation path.
enum Corr {
    Materialized {
        pyr: Arc<CorrPyramid>,
        delta: Option<(Var, Arc<crate::gaussian::WindowLayout>)>,
    },
    Onthefly {
        f_i: Var,
        fj_levels: Vec<Var>,
        mask: Option<(Var, Var, MaskParams)>,
    },
}

impl Corr {
    fn new(
        tape: &mut Tape,
        cfg: ModelConfig,
        f_i: &Tensor,
        f_j: &Tensor,
        vi: Var,
        field: Option<(Var, Var)>,
    ) -> Result<Self> {
        match cfg.path {
            CorrPath::Materialized => {
                let pyr = Arc::new(CorrPyramid::build(f_i, f_j)?);
                let delta = match field {
                    Some((mu, c)) => {
                        let (d, lay) = tape.gaussian_window_delta(&pyr, mu, c, cfg.mask)?;
                        Some((d, lay))
                    }
                    None => None,
                };
                Ok(Corr::Materialized { pyr, delta })
            }
            CorrPath::Onthefly => {
                let fj_levels = pool_features(f_j)?
                    .into_iter()
                    .map(|t| tape.constant(t))
                    .collect();
                Ok(Corr::Onthefly {
                    f_i: vi,
                    fj_levels,
                    mask: field.map(|(mu, c)| (mu, c, cfg.mask)),
                })
            }
        }
    }

    fn lookup(&mut self, tape: &mut Tape, coords: Var, offsets: Option<&[Var]>, r: usize) -> Result<Var> {
        match self {
            Corr::Materialized { pyr, delta } => {
                let d = delta.as_ref().map(|(v, l)| (*v, l));
                tape.corr_lookup_masked(pyr, d, coords, offsets, r)
            }
            Corr::Onthefly { f_i, fj_levels, mask } => {
                tape.corr_lookup_onthefly(*f_i, fj_levels, coords, offsets, r, *mask)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{tiny_model_config as tiny_config, tiny_scene};

    fn scene(seed: u64) -> crate::geometry::SceneSample {
        tiny_scene(seed).unwrap()
    }

    #[test]
    fn produces_one_estimate_per_iteration() {
        let mut store = ParamStore::new(0);
        let model = Model::new(&mut store, 1, tiny_config(CorrPath::Materialized)).unwrap();
        let s = scene(1);
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &store, &s.f_i, &s.f_j, Ablation::default()).unwrap();
        assert_eq!(fw.flows.len(), 8);
        assert_eq!(fw.gates.len(), 8);
        assert_eq!(fw.offsets.len(), LEVELS);
        for f in &fw.flows {
            assert_eq!(tape.value(*f).shape(), &[2, 8, 8]);
        }
    }

    #[test]
    fn paths_agree_without_the_mask() {
        let s = scene(2);
        let mut store = ParamStore::new(0);
        let a = Model::new(&mut store, 2, tiny_config(CorrPath::Materialized)).unwrap();
        let b = Model {
            cfg: tiny_config(CorrPath::Onthefly),
            ..a
        };
        let abl = Ablation {
            lgu: false,
            ..Ablation::default()
        };
        let mut ta = Tape::new();
        let fa = a.forward(&mut ta, &store, &s.f_i, &s.f_j, abl).unwrap();
        let mut tb = Tape::new();
        let fb = b.forward(&mut tb, &store, &s.f_i, &s.f_j, abl).unwrap();
        let (la, lb) = (fa.flows.last().unwrap(), fb.flows.last().unwrap());
        assert!(ta.value(*la).max_abs_diff(tb.value(*lb)).unwrap() < 1e-9);
    }

    #[test]
    fn lgu_off_drops_the_self_term() {
        let s = scene(3);
        let mut store = ParamStore::new(0);
        let m = Model::new(&mut store, 3, tiny_config(CorrPath::Materialized)).unwrap();
        let mut tape = Tape::new();
        let l = m
            .loss(&mut tape, &store, &s.f_i, &s.f_j, &s.flow, &s.valid, Ablation::baseline(), &LossWeights::default())
            .unwrap();
        assert!(l.l_self.is_none());
        assert!(l.forward.gates.is_empty());
        let lf = tape.value(l.l_flow).item().unwrap();
        assert!((tape.value(l.total).item().unwrap() - 0.05 * lf).abs() < 1e-15);
    }
}

//! Toy unrolled training on synthetic scenes, and held-out evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, save_checkpoint, Adam, ParamStore, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{derive_seed, generate_corpus, SceneSample};
use crate::losses::{epe, LossWeights};
use crate::model::{Ablation, Model};
use crate::tensor::{DType, Tensor};

/// One line of the training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_flow: f64,
    pub l_self: f64,
    pub total: f64,
    pub epe: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl LossReport {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &LossReport) -> bool {
        let bits = |r: &LossReport| {
            [r.l_flow, r.l_self, r.total, r.epe, r.lr].map(f64::to_bits)
        };
        self.step == other.step && bits(self) == bits(other)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub dtype: DType,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Checkpoints and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainOptions {
            steps: cfg.steps,
            batch: cfg.batch,
            lr: cfg.lr,
            clip: cfg.clip,
            weights: cfg.loss_weights(),
            ablation: cfg.ablation(),
            dtype: cfg.dtype,
            seed: cfg.seed,
            checkpoint_every: cfg.checkpoint_every,
            out_dir: Some(cfg.out_dir.clone()),
        }
    }
}

/// Training and held-out splits, drawn from disjoint seed streams.
pub fn corpus_splits(cfg: &RunConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let scene = cfg.scene_config();
    let train = generate_corpus(&scene, cfg.corpus_size, derive_seed(cfg.seed, 0))?;
    let heldout = generate_corpus(&scene, cfg.heldout_size, derive_seed(cfg.seed, 1))?;
    Ok((train, heldout))
}

struct SampleOut {
    grads: Vec<Tensor>,
    l_flow: f64,
    l_self: f64,
    total: f64,
    epe: f64,
}

fn cast_sample(s: &SceneSample, dtype: DType) -> (Tensor, Tensor) {
    (s.f_i.cast(dtype), s.f_j.cast(dtype))
}

fn run_sample(model: &Model, store: &ParamStore, s: &SceneSample, opts: &TrainOptions) -> Result<SampleOut> {
    let (f_i, f_j) = cast_sample(s, opts.dtype);
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, store, &f_i, &f_j, &s.flow, &s.valid, opts.ablation, &opts.weights)?;
    let total = tape.value(loss.total).item()?;
    let l_flow = tape.value(loss.l_flow).item()?;
    let l_self = match loss.l_self {
        Some(v) => tape.value(v).item()?,
        None => 0.0,
    };
    let last = tape.value(*loss.forward.flows.last().expect("iterations > 0"));
    let e = epe(last, &s.flow, &s.valid)?;
    let g = tape.backward(loss.total)?;
    let mut grads: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
    for (var, id) in tape.param_leaves() {
        if let Some(t) = g.get(var) {
            grads[id.index()]
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    Ok(SampleOut {
        grads,
        l_flow,
        l_self,
        total,
        epe: e,
    })
}

fn dump_batch(dir: &Path, step: usize, batch: &[&SceneSample]) -> Result<PathBuf> {
    let root = dir.join(format!("abort_step_{step}"));
    for s in batch {
        s.export(root.join(format!("scene_{}", s.seed)))?;
    }
    Ok(root)
}

/// Dumps the offending batch and builds the abort error.
fn abort(opts: &TrainOptions, step: usize, batch: &[&SceneSample], what: &str) -> Result<Error> {
    let dump = match &opts.out_dir {
        Some(d) => dump_batch(d, step, batch)?.display().to_string(),
        None => "not written".into(),
    };
    let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
    Ok(Error::NonFinite(format!(
        "training step {step}: {what} on scenes {seeds:?}; batch dump {dump}"
    )))
}

/// Deterministic visiting order: a fresh seeded shuffle per epoch.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch));
    order.shuffle(&mut rng);
    order
}

/// Runs `opts.steps` Adam steps, calling `sink` after each.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    corpus: &[SceneSample],
    opts: &TrainOptions,
    mut sink: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    if corpus.is_empty() || opts.batch == 0 {
        return Err(Error::Contract("training needs a non-empty corpus and batch".into()));
    }
    Model::cast_params(store, opts.dtype);
    let mut adam = Adam::new(store, opts.lr);
    let mut reports = Vec::with_capacity(opts.steps);
    let mut cursor = 0;
    let mut epoch = 0;
    let mut order = epoch_order(corpus.len(), opts.seed, epoch);
    for step in 0..opts.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(corpus.len(), opts.seed, epoch);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let frozen: &ParamStore = store;
        let outs: Vec<Result<SampleOut>> = batch.par_iter().map(|s| run_sample(model, frozen, s, opts)).collect();
        let outs: Vec<SampleOut> = match outs.into_iter().collect::<Result<_>>() {
            Ok(o) => o,
            Err(Error::NonFinite(what)) => return Err(abort(opts, step, &batch, &what)?),
            Err(e) => return Err(e),
        };
        let n = outs.len() as f64;
        let mean = |f: fn(&SampleOut) -> f64| outs.iter().map(f).sum::<f64>() / n;
        let report = LossReport {
            step,
            l_flow: mean(|o| o.l_flow),
            l_self: mean(|o| o.l_self),
            total: mean(|o| o.total),
            epe: mean(|o| o.epe),
            lr: opts.lr,
            wall_ms: 0.0,
        };
        let grads_finite = outs.iter().all(|o| o.grads.iter().all(Tensor::is_finite));
        if !report.total.is_finite() || !grads_finite {
            let what = format!("loss {}", report.total);
            return Err(abort(opts, step, &batch, &what)?);
        }
        store.zero_grad();
        for o in &outs {
            for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(&o.grads) {
                store
                    .grad_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b / n);
            }
        }
        clip_grad_norm(store, opts.clip);
        adam.step(store);
        if let Some(id) = store.ids().find(|&id| !store.value(id).is_finite()) {
            let what = format!("parameter {} after the update", store.name(id));
            return Err(abort(opts, step, &batch, &what)?);
        }
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
                save_checkpoint(store, dir.join(format!("checkpoint_{:06}", step + 1)))?;
            }
        }
        let report = LossReport {
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ..report
        };
        sink(&report);
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub samples: usize,
    pub mean_epe: f64,
    /// EPE of a zero-flow prediction on the same samples.
    pub zero_flow_epe: f64,
    pub per_sample: Vec<f64>,
}

/// Mean final-iteration EPE over `samples`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[SceneSample],
    ablation: Ablation,
    dtype: DType,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let per_sample: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let (f_i, f_j) = cast_sample(s, dtype);
            let mut tape = Tape::new();
            let fw = model.forward(&mut tape, store, &f_i, &f_j, ablation)?;
            epe(tape.value(*fw.flows.last().expect("iterations > 0")), &s.flow, &s.valid)
        })
        .collect::<Result<_>>()?;
    let zero: Vec<f64> = samples
        .iter()
        .map(|s| epe(&Tensor::zeros(s.flow.shape()), &s.flow, &s.valid))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    Ok(EvalReport {
        ablation,
        samples: samples.len(),
        mean_epe: per_sample.iter().sum::<f64>() / n,
        zero_flow_epe: zero.iter().sum::<f64>() / n,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrPath;
    use crate::gaussian::MaskParams;
    use crate::geometry::SceneConfig;
    use crate::model::ModelConfig;
    use crate::temporal::OperatorDims;

    fn small() -> (Model, ParamStore, Vec<SceneSample>) {
        let scene = SceneConfig {
            height: 8,
            width: 8,
            channels: 4,
            max_flow: 2.0,
            ..SceneConfig::default()
        };
        let corpus = generate_corpus(&scene, 5, 9).unwrap();
        let cfg = ModelConfig {
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
            path: CorrPath::Materialized,
        };
        let mut store = ParamStore::new(4);
        let model = Model::new(&mut store, 4, cfg).unwrap();
        (model, store, corpus)
    }

    fn opts(steps: usize, lr: f64) -> TrainOptions {
        TrainOptions {
            steps,
            batch: 2,
            lr,
            clip: 1.0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            dtype: DType::F64,
            seed: 3,
            checkpoint_every: 0,
            out_dir: None,
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_bit_identical() {
        let (model, mut store, corpus) = small();
        let before = store.clone();
        train(&model, &mut store, &corpus, &opts(4, 0.0), |_| {}).unwrap();
        for id in store.ids() {
            assert!(store.value(id).bit_eq(before.value(id)));
        }
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let (model, store, corpus) = small();
        let run = || {
            let mut s = store.clone();
            train(&model, &mut s, &corpus, &opts(6, 1e-3), |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 6);
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_values(y)));
        assert!(a.iter().all(|r| r.total.is_finite() && r.epe >= 0.0));
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let mut o = epoch_order(7, 1, 0);
        o.sort();
        assert_eq!(o, (0..7).collect::<Vec<_>>());
        assert_ne!(epoch_order(50, 1, 0), epoch_order(50, 1, 1));
    }

    #[test]
    fn non_finite_loss_aborts_with_a_dump() {
        let (model, mut store, corpus) = small();
        let id = store.id("update.head2.bias").unwrap();
        store.value_mut(id).data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..opts(2, 1e-3)
        };
        let err = train(&model, &mut store, &corpus, &o, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(dir.path().join("abort_step_0").is_dir());
    }

    #[test]
    fn checkpoints_are_written_on_schedule() {
        let (model, mut store, corpus) = small();
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions {
            checkpoint_every: 2,
            out_dir: Some(dir.path().to_path_buf()),
            ..opts(4, 1e-3)
        };
        train(&model, &mut store, &corpus, &o, |_| {}).unwrap();
        let back = crate::autodiff::load_checkpoint(dir.path().join("checkpoint_000004")).unwrap();
        for id in store.ids() {
            let other = back.id(store.name(id)).unwrap();
            assert!(back.value(other).bit_eq(store.value(id)));
        }
        assert!(dir.path().join("checkpoint_000002").is_dir());
    }

    #[test]
    fn evaluation_reports_zero_flow_baseline() {
        let (model, store, corpus) = small();
        let r = evaluate(&model, &store, &corpus, Ablation::default(), DType::F64).unwrap();
        assert_eq!(r.samples, 5);
        assert!(r.mean_epe.is_finite() && r.zero_flow_epe > 0.0);
    }
}

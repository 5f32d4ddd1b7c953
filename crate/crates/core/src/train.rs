//! Training and evaluation of one LOSO fold.
//!
//! Only `train.` tensors are updated, with AdamW (decoupled weight decay) and
//! a per-epoch cosine schedule. Per-sample gradients of a batch may be
//! computed in parallel; they are always summed in batch order, so results do
//! not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dssa::DssaMode;
use crate::encoders::{patchify, sample_frame_indices, SampleMode};
use crate::error::{Result, ScptError};
use crate::harness::{binary_metrics, mean_std, Fold, Metrics, Sample, SampleKey, Target};
use crate::losses::{LossReport, LossWeights, Normalization};
use crate::model::{pooled_subspace, ClipInput, ForwardOptions, ForwardOutput, ModelConfig, ScptModel, SubspaceMode, Targets};
use crate::params::{ParamId, ParamStore};
use crate::signal_tfr::TfrPipeline;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Schedule::Cosine),
            "constant" => Some(Schedule::Constant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        }
    }

    /// Learning rate for epoch `e` of `epochs`; cosine reaches zero at `e = epochs`.
    pub fn lr(self, base: f64, e: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / epochs.max(1) as f64).cos()),
            Schedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub norm: Normalization,
    pub target: Target,
    pub seed: u64,
    pub backbone_seed: u64,
    /// Path used for validation and testing.
    pub eval_mode: DssaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 100,
            batch_size: 32,
            schedule: Schedule::Cosine,
            weights: LossWeights::valence(),
            norm: Normalization::Mean,
            target: Target::Valence,
            seed: 0,
            backbone_seed: 0,
            eval_mode: DssaMode::InvariantInference,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ScptError::InvalidArgument(format!("lr = {} must be > 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(ScptError::InvalidArgument("weight decay must be >= 0 and batch size >= 1".into()));
        }
        LossWeights::new(self.weights.lambda1, self.weights.lambda2, self.weights.lambda3)?;
        Ok(())
    }
}

/// A clip ready for the model: every frame patchified plus its TFR image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    pub frames: Vec<Matrix>,
    pub tfr: Option<Matrix>,
    pub valence: usize,
    pub arousal: usize,
    pub key: SampleKey,
}

impl PreparedClip {
    pub fn label(&self, target: Target) -> usize {
        match target {
            Target::Valence => self.valence,
            Target::Arousal => self.arousal,
        }
    }

    /// Picks `T` frames.
    pub fn input(&self, t: usize, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<ClipInput> {
        let idx = sample_frame_indices(self.frames.len(), t, mode, rng)?;
        Ok(ClipInput { patches: idx.into_iter().map(|i| self.frames[i].clone()).collect(), tfr: self.tfr.clone() })
    }
}

/// The TFR chain with the output size of `config`.
pub fn tfr_pipeline_for(config: &ModelConfig) -> TfrPipeline {
    TfrPipeline { out_rows: config.tfr_size, out_cols: config.tfr_size, ..TfrPipeline::default() }
}

pub fn prepare_clips(clips: &[Sample], config: &ModelConfig, pipeline: &TfrPipeline) -> Result<Vec<PreparedClip>> {
    let prepare = |s: &Sample| -> Result<PreparedClip> {
        if (s.frames.channels, s.frames.height, s.frames.width) != (config.channels, config.frame_size, config.frame_size) {
            return Err(ScptError::shape(format!(
                "frames are {}x{}x{}, the model expects {}x{}x{}",
                s.frames.channels, s.frames.height, s.frames.width, config.channels, config.frame_size, config.frame_size
            )));
        }
        let frames = s
            .frames
            .frames
            .iter()
            .map(|f| patchify(f, config.frame_size, config.frame_size, config.patch))
            .collect::<Result<Vec<_>>>()?;
        let tfr = if config.use_mcp { Some(pipeline.run(&s.waveform)?.values) } else { None };
        Ok(PreparedClip {
            frames,
            tfr,
            valence: s.label(Target::Valence),
            arousal: s.label(Target::Arousal),
            key: SampleKey { subject_id: s.subject_id, trial_id: s.trial_id },
        })
    };
    #[cfg(feature = "parallel")]
    let out = clips.par_iter().map(prepare).collect();
    #[cfg(not(feature = "parallel"))]
    let out = clips.iter().map(prepare).collect();
    out
}

/// AdamW over the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    ids: Vec<ParamId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let ids = store.trainable_ids();
        let zeros = |id: &ParamId| {
            let s = store.get(*id).shape();
            Matrix::zeros(s.0, s.1)
        };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// `grads` is indexed by parameter slot.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads[id.index()].as_ref() else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data()[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub task: f64,
    pub specific: f64,
    pub orth: f64,
    pub sub: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (`None` if nothing was trained).
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(mix)
}

fn map_ordered<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(ids: &[usize], f: F) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        ids.par_iter().map(|&i| f(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ids.iter().map(|&i| f(i)).collect()
    }
}

/// Trains `model` in place on one fold and restores the best-validation parameters.
pub fn train_fold(
    model: &mut ScptModel,
    data: &[PreparedClip],
    fold: &Fold,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let keys: Vec<SampleKey> = data.iter().map(|c| c.key).collect();
    let subjects = fold.train_subjects(&keys);
    if model.config.use_dssa && model.num_subjects != subjects.len() {
        return Err(ScptError::shape(format!(
            "subject head has {} outputs, the fold has {} training subjects",
            model.num_subjects,
            subjects.len()
        )));
    }
    let subject_index = |sid: usize| subjects.binary_search(&sid).ok();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = fold.train_ids.clone();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Matrix>)> = None;
    let trainable = model.store.trainable_ids();
    let t = model.config.frames_per_clip;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = batch
                .iter()
                .map(|&i| data[i].input(t, SampleMode::Train, &mut sample_rng(cfg.seed, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let pooled = if model.config.use_dssa && model.config.subspace_mode == SubspaceMode::Batch {
                let m: &ScptModel = model;
                let shared = map_ordered(&(0..batch.len()).collect::<Vec<_>>(), |k| {
                    Ok(m.forward(&inputs[k], &ForwardOptions::inference(DssaMode::Train))?.shared_last)
                })?;
                let rows: Vec<&Matrix> = shared.iter().flatten().collect();
                Some(vec![pooled_subspace(&rows, model.config.subspace_rank)?])
            } else {
                None
            };
            let m: &ScptModel = model;
            let results: Vec<(LossReport, Vec<Option<Matrix>>)> = map_ordered(&(0..batch.len()).collect::<Vec<_>>(), |k| {
                let clip = &data[batch[k]];
                let opts = ForwardOptions {
                    mode: DssaMode::Train,
                    track: true,
                    subspaces: pooled.as_deref(),
                    targets: Some(Targets { label: clip.label(cfg.target), subject: subject_index(clip.key.subject_id) }),
                    weights: cfg.weights,
                    norm: cfg.norm,
                    record_kinks: false,
                };
                let out = m.forward(&inputs[k], &opts)?;
                Ok((out.report.expect("targets were given"), out.grads))
            })
            .map_err(|e| match e {
                ScptError::NonFinite(what) => ScptError::NonFiniteLoss { epoch, step, detail: what.to_string() },
                other => other,
            })?;

            let mut grad: Vec<Option<Matrix>> = vec![None; model.store.len()];
            for (report, grads) in &results {
                if !report.total.is_finite() {
                    return Err(ScptError::NonFiniteLoss { epoch, step, detail: format!("{report:?}") });
                }
                for (v, s) in sums.iter_mut().zip([report.task, report.specific, report.orth, report.sub, report.total]) {
                    *v += s;
                }
                for &id in &trainable {
                    let g = grads[id.index()].as_ref().expect("trainable gradient");
                    match &mut grad[id.index()] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad.iter_mut().flatten() {
                g.scale_assign(inv);
                if !g.is_finite() {
                    return Err(ScptError::NonFiniteLoss { epoch, step, detail: "non-finite gradient".into() });
                }
            }
            opt.step(&mut model.store, &grad, lr);
        }
        let n = order.len().max(1) as f64;
        let val = if fold.val_ids.is_empty() {
            None
        } else {
            Some(evaluate(model, data, &fold.val_ids, cfg.target, cfg.eval_mode)?.0)
        };
        let log = EpochLog {
            epoch,
            lr,
            task: sums[0] / n,
            specific: sums[1] / n,
            orth: sums[2] / n,
            sub: sums[3] / n,
            total: sums[4] / n,
            val_accuracy: val.map_or(f64::NAN, |m| m.accuracy),
            val_f1: val.map_or(f64::NAN, |m| m.f1),
        };
        on_epoch(&log);
        let score = val.map_or(f64::NEG_INFINITY, |m| m.accuracy);
        if best.as_ref().is_none_or(|b| score > b.1) || val.is_none() {
            best = Some((epoch, score, trainable.iter().map(|&id| model.store.get(id).clone()).collect()));
        }
        logs.push(log);
    }
    let (best_epoch, best_val_accuracy) = match best {
        Some((e, acc, snapshot)) => {
            for (&id, value) in trainable.iter().zip(snapshot) {
                *model.store.get_mut(id) = value;
            }
            (Some(e), acc)
        }
        None => (None, f64::NAN),
    };
    Ok(TrainOutcome { logs, best_epoch, best_val_accuracy })
}

/// Inference outputs for `ids` (centre frames). In batch subspace mode the
/// emotion subspace is pooled over the whole set.
pub fn forward_all(model: &ScptModel, data: &[PreparedClip], ids: &[usize], mode: DssaMode) -> Result<Vec<ForwardOutput>> {
    let t = model.config.frames_per_clip;
    let inputs = ids
        .iter()
        .map(|&i| data[i].input(t, SampleMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..ids.len()).collect();
    let pooled = if model.config.use_dssa && model.config.subspace_mode == SubspaceMode::Batch && !ids.is_empty() {
        let shared = map_ordered(&all, |k| Ok(model.forward(&inputs[k], &ForwardOptions::inference(mode))?.shared_last))?;
        let rows: Vec<&Matrix> = shared.iter().flatten().collect();
        Some(vec![pooled_subspace(&rows, model.config.subspace_rank)?])
    } else {
        None
    };
    map_ordered(&all, |k| {
        let opts = ForwardOptions { subspaces: pooled.as_deref(), ..ForwardOptions::inference(mode) };
        model.forward(&inputs[k], &opts)
    })
}

/// Class predictions and logits for `ids` (centre frames).
pub fn predict(model: &ScptModel, data: &[PreparedClip], ids: &[usize], mode: DssaMode) -> Result<Vec<(usize, Matrix)>> {
    Ok(forward_all(model, data, ids, mode)?
        .into_iter()
        .map(|out| {
            let l = out.logits;
            let pred = (0..l.cols()).fold(0, |b, c| if l[(0, c)] > l[(0, b)] { c } else { b });
            (pred, l)
        })
        .collect())
}

pub fn evaluate(model: &ScptModel, data: &[PreparedClip], ids: &[usize], target: Target, mode: DssaMode) -> Result<(Metrics, Vec<usize>)> {
    if ids.is_empty() {
        return Err(ScptError::EmptyEvalSet);
    }
    let preds: Vec<usize> = predict(model, data, ids, mode)?.into_iter().map(|(p, _)| p).collect();
    let labels: Vec<usize> = ids.iter().map(|&i| data[i].label(target)).collect();
    Ok((binary_metrics(&preds, &labels)?, preds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subject: usize,
    pub test: Metrics,
    pub outcome: TrainOutcome,
}

/// Fresh model for fold `index`: shared backbone, trainable parts seeded by `seed + index`.
pub fn init_fold_model(config: &ModelConfig, cfg: &TrainConfig, data: &[PreparedClip], fold: &Fold, index: usize) -> Result<ScptModel> {
    let keys: Vec<SampleKey> = data.iter().map(|c| c.key).collect();
    let subjects = fold.train_subjects(&keys).len();
    ScptModel::init(config, subjects.max(1), cfg.backbone_seed, cfg.seed.wrapping_add(index as u64))
}

pub fn run_fold(
    config: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PreparedClip],
    fold: &Fold,
    index: usize,
    backbone: Option<&ParamStore>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ScptModel, FoldResult)> {
    let mut model = init_fold_model(config, cfg, data, fold, index)?;
    if let Some(b) = backbone {
        model.load_backbone(b)?;
    }
    let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(index as u64), ..cfg.clone() };
    let outcome = train_fold(&mut model, data, fold, &fold_cfg, on_epoch)?;
    let (test, _) = evaluate(&model, data, &fold.test_ids, cfg.target, cfg.eval_mode)?;
    Ok((model, FoldResult { fold: index, test_subject: fold.test_subject, test, outcome }))
}

/// Mean ± std of per-subject accuracy and F1.
pub fn summarize(results: &[FoldResult]) -> ((f64, f64), (f64, f64)) {
    let acc: Vec<f64> = results.iter().map(|r| r.test.accuracy).collect();
    let f1: Vec<f64> = results.iter().map(|r| r.test.f1).collect();
    (mean_std(&acc), mean_std(&f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_loso, segment_trial, synth_dataset_with, SynthConfig};

    fn tiny_data(c: f64) -> (Vec<PreparedClip>, Vec<SampleKey>) {
        let cfg = SynthConfig { trial_seconds: 10.0, ..Default::default() };
        let trials = synth_dataset_with(&cfg, 3, 3, c, 1).unwrap();
        let clips: Vec<Sample> = trials.iter().flat_map(|t| segment_trial(t, 5.0).unwrap()).collect();
        let mc = ModelConfig::tiny();
        let data = prepare_clips(&clips, &mc, &tfr_pipeline_for(&mc)).unwrap();
        let keys = data.iter().map(|c| c.key).collect();
        (data, keys)
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(Schedule::Cosine.lr(1.0, 0, 10), 1.0);
        assert!((Schedule::Cosine.lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(Schedule::Cosine.lr(1.0, 10, 10).abs() < 1e-15);
        assert_eq!(Schedule::Constant.lr(0.3, 7, 10), 0.3);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("train.w", Matrix::from_rows(&[&[1.0, -2.0]])).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, &[Some(Matrix::from_rows(&[&[0.5, -3.0]]))], 0.1);
        let p = store.get(id);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-7 && (p[(0, 1)] + 1.9).abs() < 1e-7);
        let mut opt = AdamW::new(&store, 0.5);
        let before = store.get(id).clone();
        opt.step(&mut store, &[Some(Matrix::zeros(1, 2))], 0.1);
        assert!(store.get(id).max_abs_diff(&before.scale(0.95)) < 1e-15);
    }

    #[test]
    fn zero_epochs_keeps_init_and_freeze_contract() {
        let (data, keys) = tiny_data(0.5);
        let plan = build_loso(&keys, 0).unwrap();
        let mc = ModelConfig::tiny();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let fold = &plan.folds[0];
        let init = init_fold_model(&mc, &tc, &data, fold, 0).unwrap();
        let (trained, _) = run_fold(&mc, &tc, &data, fold, 0, None, |_| {}).unwrap();
        assert_eq!(trained, init);

        let tc = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, ..Default::default() };
        let (trained, res) = run_fold(&mc, &tc, &data, fold, 0, None, |_| {}).unwrap();
        assert_eq!(res.outcome.logs.len(), 2);
        for (id, e) in init.store.iter() {
            if e.trainable() {
                continue;
            }
            assert_eq!(trained.store.get(id), &e.value, "{}", e.name);
        }
        let (again, res2) = run_fold(&mc, &tc, &data, fold, 0, None, |_| {}).unwrap();
        assert_eq!(again, trained);
        assert_eq!(res2, res);
    }
}

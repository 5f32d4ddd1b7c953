//! Synthetic multimodal data, trial segmentation, label binarisation,
//! leave-one-subject-out folds and classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::FrameClip;
use crate::error::{Result, ScptError};
use crate::signal_tfr::Waveform;
use crate::tensor::Matrix;

/// One trial or clip: frames, pulse waveform, self-reported scores and identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: FrameClip,
    /// Frame rate of `frames`.
    pub fps: f64,
    pub waveform: Waveform,
    pub valence_score: f64,
    pub arousal_score: f64,
    pub subject_id: usize,
    pub trial_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Target {
    #[default]
    Valence,
    Arousal,
}

impl Target {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "valence" => Some(Target::Valence),
            "arousal" => Some(Target::Arousal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Valence => "valence",
            Target::Arousal => "arousal",
        }
    }
}

impl Sample {
    pub fn score(&self, target: Target) -> f64 {
        match target {
            Target::Valence => self.valence_score,
            Target::Arousal => self.arousal_score,
        }
    }

    pub fn label(&self, target: Target) -> usize {
        binarize_label(self.score(target), LABEL_THRESHOLD)
    }
}

pub const LABEL_THRESHOLD: f64 = 5.0;

/// 1 above the threshold, 0 at or below it.
pub fn binarize_label(score: f64, threshold: f64) -> usize {
    usize::from(score > threshold)
}

/// Shape of the generated trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub trial_seconds: f64,
    pub sample_rate_hz: f64,
    pub fps: f64,
    pub frame_size: usize,
    pub channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { trial_seconds: 30.0, sample_rate_hz: 128.0, fps: 1.0, frame_size: 32, channels: 3 }
    }
}

pub const HIGH_AROUSAL_HZ: (f64, f64) = (1.3, 1.8);
pub const LOW_AROUSAL_HZ: (f64, f64) = (0.9, 1.2);

struct SubjectTraits {
    drift_amp: f64,
    drift_hz: f64,
    drift_phase: f64,
    noise: f64,
    tint: [f64; 3],
    valence_bias: f64,
    arousal_bias: f64,
}

impl SubjectTraits {
    fn draw(rng: &mut impl Rng) -> Self {
        SubjectTraits {
            drift_amp: rng.random_range(0.5..1.5),
            drift_hz: rng.random_range(0.08..0.3),
            drift_phase: rng.random_range(0.0..2.0 * PI),
            noise: rng.random_range(0.2..0.6),
            tint: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            valence_bias: rng.random_range(-1.0..1.0),
            arousal_bias: rng.random_range(-1.0..1.0),
        }
    }
}

/// Base pulse-noise level present at every confound strength.
const BASE_NOISE: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.05;
const MOTIF_CONTRAST: f64 = 0.15;
/// Trial-to-trial spread of how strongly valence shows in the face.
const TRIAL_JITTER: f64 = 0.05;
/// Per-subject resting expression, in motif contrast units at `c = 1`.
const RESTING_OFFSET: f64 = 0.05;
const AROUSAL_CUE: f64 = 0.04;

fn class_score(high: bool, rng: &mut impl Rng) -> f64 {
    if high {
        // (5, 9]: the open end at 5 is measure-zero, excluded explicitly.
        loop {
            let s = rng.random_range(5.0..=9.0);
            if s > 5.0 {
                return s;
            }
        }
    } else {
        rng.random_range(1.0..=5.0)
    }
}

/// Generates `num_subjects × trials_per_subject` trials.
///
/// Arousal sets the pulse rate and a faint central cue in the frames. Valence
/// sets the signed brightness of one diagonal pair of quadrants, in
/// proportion to how far the rating is from the threshold and with some
/// trial-to-trial jitter, so ratings near 5 are ambiguous. `confound_strength`
/// scales everything subject-specific: pulse drift and extra noise, a colour
/// tint, a resting expression offset, and a skew of the label priors.
pub fn synth_dataset(num_subjects: usize, trials_per_subject: usize, confound_strength: f64, seed: u64) -> Result<Vec<Sample>> {
    synth_dataset_with(&SynthConfig::default(), num_subjects, trials_per_subject, confound_strength, seed)
}

pub fn synth_dataset_with(cfg: &SynthConfig, num_subjects: usize, trials_per_subject: usize, confound_strength: f64, seed: u64) -> Result<Vec<Sample>> {
    if num_subjects < 3 {
        return Err(ScptError::TooFewSubjects(num_subjects));
    }
    if !(confound_strength.is_finite() && confound_strength >= 0.0) {
        return Err(ScptError::InvalidArgument(format!("confound strength {confound_strength} must be >= 0")));
    }
    if cfg.channels != 3 || cfg.frame_size < 4 || cfg.fps <= 0.0 || cfg.trial_seconds <= 0.0 {
        return Err(ScptError::InvalidArgument("synthetic frames need 3 channels, side >= 4 and positive rates".into()));
    }
    let c = confound_strength;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<SubjectTraits> = (0..num_subjects).map(|_| SubjectTraits::draw(&mut rng)).collect();
    let n = (cfg.trial_seconds * cfg.sample_rate_hz).round() as usize;
    let num_frames = ((cfg.trial_seconds * cfg.fps).round() as usize).max(1);
    let side = cfg.frame_size;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(num_subjects * trials_per_subject);
    for (sid, traits) in subjects.iter().enumerate() {
        for trial in 0..trials_per_subject {
            let p_val = (0.5 + 0.4 * (c * traits.valence_bias).clamp(-1.0, 1.0)).clamp(0.05, 0.95);
            let p_aro = (0.5 + 0.4 * (c * traits.arousal_bias).clamp(-1.0, 1.0)).clamp(0.05, 0.95);
            let high_val = rng.random_bool(p_val);
            let high_aro = rng.random_bool(p_aro);
            let valence_score = class_score(high_val, &mut rng);
            let arousal_score = class_score(high_aro, &mut rng);

            let band = if high_aro { HIGH_AROUSAL_HZ } else { LOW_AROUSAL_HZ };
            let hr = rng.random_range(band.0..band.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            let sigma = BASE_NOISE + c * traits.noise;
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / cfg.sample_rate_hz;
                    (2.0 * PI * hr * t + phase).sin()
                        + c * traits.drift_amp * (2.0 * PI * traits.drift_hz * t + traits.drift_phase).sin()
                        + sigma * unit.sample(&mut rng)
                })
                .collect();
            let waveform = Waveform::new(samples, cfg.sample_rate_hz)?;

            let expressed = MOTIF_CONTRAST * (valence_score - 5.0) / 4.0
                + TRIAL_JITTER * unit.sample(&mut rng)
                + c * RESTING_OFFSET * traits.valence_bias;
            let half = side / 2;
            let (lo, hi) = (side / 4, side - side / 4);
            let frames = (0..num_frames)
                .map(|_| {
                    let contrast = expressed * rng.random_range(0.7..1.3);
                    let mut m = Matrix::zeros(3, side * side);
                    for ch in 0..3 {
                        for y in 0..side {
                            for x in 0..side {
                                let diagonal = (y < half) == (x < half);
                                let sign = if diagonal { 1.0 } else { -1.0 };
                                let centre = (lo..hi).contains(&y) && (lo..hi).contains(&x);
                                let cue = if centre { if high_aro { AROUSAL_CUE } else { -AROUSAL_CUE } } else { 0.0 };
                                let v = 0.5 + sign * contrast + cue + c * traits.tint[ch] + PIXEL_NOISE * unit.sample(&mut rng);
                                m[(ch, y * side + x)] = v.clamp(0.0, 1.0);
                            }
                        }
                    }
                    m
                })
                .collect();
            out.push(Sample {
                frames: FrameClip::new(frames, 3, side, side)?,
                fps: cfg.fps,
                waveform,
                valence_score,
                arousal_score,
                subject_id: sid,
                trial_id: trial,
            });
        }
    }
    Ok(out)
}

/// Splits a trial into non-overlapping clips; a trailing remainder shorter
/// than one clip is dropped.
pub fn segment_trial(s: &Sample, clip_seconds: f64) -> Result<Vec<Sample>> {
    let duration = s.waveform.duration_s();
    if !(clip_seconds.is_finite() && clip_seconds > 0.0) {
        return Err(ScptError::InvalidArgument(format!("clip length {clip_seconds} must be positive")));
    }
    if clip_seconds > duration + 1e-9 {
        return Err(ScptError::ClipTooLong { clip_s: clip_seconds, trial_s: duration });
    }
    let count = ((duration / clip_seconds) + 1e-9).floor() as usize;
    let fs = s.waveform.sample_rate_hz();
    let per_clip = (clip_seconds * fs).round() as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * per_clip;
        let end = (start + per_clip).min(s.waveform.samples().len());
        let waveform = s.waveform.slice(start, end)?;
        let (t0, t1) = (k as f64 * clip_seconds, (k + 1) as f64 * clip_seconds);
        let frames: Vec<Matrix> = s
            .frames
            .frames
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let t = *i as f64 / s.fps;
                t >= t0 - 1e-9 && t < t1 - 1e-9
            })
            .map(|(_, f)| f.clone())
            .collect();
        if frames.is_empty() {
            return Err(ScptError::EmptyClip);
        }
        out.push(Sample {
            frames: FrameClip::new(frames, s.frames.channels, s.frames.height, s.frames.width)?,
            fps: s.fps,
            waveform,
            valence_score: s.valence_score,
            arousal_score: s.arousal_score,
            subject_id: s.subject_id,
            trial_id: s.trial_id,
        });
    }
    Ok(out)
}

/// Identity of a sample for the fold bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub subject_id: usize,
    pub trial_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub test_subject: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Fold {
    /// Training subjects in ascending order; position = subject-head label.
    pub fn train_subjects(&self, keys: &[SampleKey]) -> Vec<usize> {
        let set: BTreeSet<usize> = self.train_ids.iter().map(|&i| keys[i].subject_id).collect();
        set.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LosoPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

pub const VAL_FRACTION: f64 = 0.2;

/// One fold per subject. The rest is split about 80/20 into train and
/// validation by whole trials, so clips of a trial never straddle the split.
pub fn build_loso(keys: &[SampleKey], seed: u64) -> Result<LosoPlan> {
    let subjects: BTreeSet<usize> = keys.iter().map(|k| k.subject_id).collect();
    if subjects.len() < 3 {
        return Err(ScptError::TooFewSubjects(subjects.len()));
    }
    let mut folds = Vec::with_capacity(subjects.len());
    for (fi, &test_subject) in subjects.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fi as u64));
        let mut groups: BTreeMap<SampleKey, Vec<usize>> = BTreeMap::new();
        let mut test_ids = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if k.subject_id == test_subject {
                test_ids.push(i);
            } else {
                groups.entry(*k).or_default().push(i);
            }
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut rng);
        let total: usize = groups.iter().map(Vec::len).sum();
        let target = total as f64 * VAL_FRACTION;
        let (mut train_ids, mut val_ids) = (Vec::new(), Vec::new());
        for g in groups {
            let now = val_ids.len() as f64;
            if ((now + g.len() as f64) - target).abs() < (now - target).abs() {
                val_ids.extend(g);
            } else {
                train_ids.extend(g);
            }
        }
        train_ids.sort_unstable();
        val_ids.sort_unstable();
        folds.push(Fold { test_subject, train_ids, val_ids, test_ids });
    }
    Ok(LosoPlan { folds, seed })
}

/// Accuracy and binary F1 with class 1 as positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub count: usize,
}

/// F1 is 0 when nothing is predicted positive.
pub fn binary_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(ScptError::EmptyEvalSet);
    }
    if predictions.len() != labels.len() {
        return Err(ScptError::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        correct += usize::from(p == y);
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let f1 = if tp + fp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    Ok(Metrics { accuracy: correct as f64 / predictions.len() as f64, f1, count: predictions.len() })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

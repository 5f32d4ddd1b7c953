//! Run configuration as INI-style text.
//!
//! ```text
//! # comment
//! [model]
//! profile = tiny        ; optional, must come first in [model]
//! layers = 2
//! [loss]
//! lambda1 = 0.2
//! ```
//!
//! Every key is optional. `[model]` starts from the `default` profile (or the
//! one named by `profile`), `[tfr]` from the standard Morse chain, `[train]`
//! from the optimiser defaults, and the `[loss]` weights from the target's
//! preset (valence 0.2/0.1/0.6, arousal 0.1/0.1/0.6). Unknown sections and
//! keys are errors.

use std::collections::BTreeMap;

use crate::dssa::DssaMode;
use crate::error::{Result, ScptError};
use crate::harness::Target;
use crate::losses::{LossWeights, Normalization};
use crate::model::{ModelConfig, SubspaceMode};
use crate::signal_tfr::{Morse, TfrPipeline, MIN_FREQ_HZ};
use crate::train::{Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IniEntry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits text into entries. Every line must be blank, a comment (`#` or
/// `;`), a `[section]` header or `key = value` inside a section.
pub fn parse_ini(text: &str) -> Result<Vec<IniEntry>> {
    let mut section: Option<String> = None;
    let mut out: Vec<IniEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split([';', '#']).next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        if let Some(name) = t.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ScptError::Config { line, msg: format!("bad section header `{t}`") })?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = t.split_once('=').ok_or(ScptError::Config { line, msg: format!("expected `key = value`, found `{t}`") })?;
        let sec = section.clone().ok_or(ScptError::Config { line, msg: "key outside of any section".into() })?;
        let (key, value) = (k.trim().to_string(), v.trim().to_string());
        if key.is_empty() {
            return Err(ScptError::Config { line, msg: "empty key".into() });
        }
        if out.iter().any(|e| e.section == sec && e.key == key) {
            return Err(ScptError::Config { line, msg: format!("duplicate key `{key}` in [{sec}]") });
        }
        out.push(IniEntry { section: sec, key, value, line });
    }
    Ok(out)
}

pub type IniMap = BTreeMap<(String, String), String>;

pub fn ini_map(entries: &[IniEntry]) -> IniMap {
    entries.iter().map(|e| ((e.section.clone(), e.key.clone()), e.value.clone())).collect()
}

const SECTIONS: [&str; 5] = ["model", "tfr", "train", "data", "loss"];

/// Writes entries grouped by section in canonical order, keys in the given order.
pub fn format_ini(entries: &[(String, String, String)]) -> String {
    let mut out = String::new();
    let mut order: Vec<&str> = SECTIONS.to_vec();
    for (s, _, _) in entries {
        if !order.contains(&s.as_str()) {
            order.push(s);
        }
    }
    for sec in order {
        let keys: Vec<_> = entries.iter().filter(|(s, _, _)| s == sec).collect();
        if keys.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("[{sec}]\n"));
        for (_, k, v) in keys {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

/// Spectral front end; the output size comes from `model.tfr_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfrSettings {
    pub gamma: f64,
    pub beta: f64,
    pub voices_per_octave: usize,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
}

impl Default for TfrSettings {
    fn default() -> Self {
        let p = TfrPipeline::default();
        TfrSettings {
            gamma: p.morse.gamma,
            beta: p.morse.beta,
            voices_per_octave: p.voices_per_octave,
            f_lo_hz: p.f_lo_hz,
            f_hi_hz: p.f_hi_hz,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub clip_seconds: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clip_seconds: 5.0, split_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tfr: TfrSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn eval_mode_str(m: DssaMode) -> &'static str {
    match m {
        DssaMode::Train => "train_path",
        DssaMode::InvariantInference => "invariant",
    }
}

pub fn parse_eval_mode(s: &str) -> Option<DssaMode> {
    match s {
        "train_path" => Some(DssaMode::Train),
        "invariant" => Some(DssaMode::InvariantInference),
        _ => None,
    }
}

fn subspace_mode_str(m: SubspaceMode) -> &'static str {
    match m {
        SubspaceMode::PerSample => "per_sample",
        SubspaceMode::Batch => "batch",
    }
}

struct Field<'a> {
    entry: &'a IniEntry,
}

impl Field<'_> {
    fn err(&self, msg: impl std::fmt::Display) -> ScptError {
        ScptError::Config { line: self.entry.line, msg: format!("[{}] {}: {msg}", self.entry.section, self.entry.key) }
    }

    fn num<T: std::str::FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.entry.value.parse::<T>().map_err(|e| self.err(format!("`{}`: {e}", self.entry.value)))
    }

    fn flag(&self) -> Result<bool> {
        match self.entry.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("`{v}` is not true/false"))),
        }
    }

    fn pick<T>(&self, parse: impl Fn(&str) -> Option<T>, allowed: &str) -> Result<T> {
        parse(&self.entry.value).ok_or_else(|| self.err(format!("`{}` is not one of {allowed}", self.entry.value)))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_ini(text)?)
    }

    pub fn from_entries(entries: &[IniEntry]) -> Result<Self> {
        for e in entries {
            if !SECTIONS.contains(&e.section.as_str()) {
                return Err(ScptError::Config { line: e.line, msg: format!("unknown section [{}]", e.section) });
            }
        }
        let mut model = ModelConfig::default();
        let model_entries: Vec<&IniEntry> = entries.iter().filter(|e| e.section == "model").collect();
        if let Some(p) = model_entries.iter().find(|e| e.key == "profile") {
            if model_entries[0].key != "profile" {
                return Err(ScptError::Config { line: p.line, msg: "`profile` must be the first key in [model]".into() });
            }
            model = ModelConfig::profile(&p.value).ok_or_else(|| Field { entry: p }.err("expected tiny, default or full"))?;
        }
        let mut cfg = RunConfig { model, ..Default::default() };
        // Target first, since it picks the loss presets.
        if let Some(e) = entries.iter().find(|e| e.section == "train" && e.key == "target") {
            cfg.train.target = Field { entry: e }.pick(Target::parse, "valence, arousal")?;
        }
        cfg.train.weights = match cfg.train.target {
            Target::Valence => LossWeights::valence(),
            Target::Arousal => LossWeights::arousal(),
        };
        for e in entries {
            cfg.apply(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, e: &IniEntry) -> Result<()> {
        let f = Field { entry: e };
        let (m, t, tr, d) = (&mut self.model, &mut self.tfr, &mut self.train, &mut self.data);
        match (e.section.as_str(), e.key.as_str()) {
            ("model", "profile") => {}
            ("model", "layers") => m.layers = f.num()?,
            ("model", "dim") => m.dim = f.num()?,
            ("model", "heads") => m.heads = f.num()?,
            ("model", "mlp_hidden") => m.mlp_hidden = f.num()?,
            ("model", "channels") => m.channels = f.num()?,
            ("model", "frame_size") => m.frame_size = f.num()?,
            ("model", "patch") => m.patch = f.num()?,
            ("model", "frames_per_clip") => m.frames_per_clip = f.num()?,
            ("model", "tfr_size") => m.tfr_size = f.num()?,
            ("model", "physio_stem") => m.physio.stem = f.num()?,
            ("model", "physio_blocks") => {
                let v: Vec<usize> = e
                    .value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|err| f.err(err))?;
                m.physio.blocks = v.try_into().map_err(|_| f.err("expected three comma-separated widths"))?;
            }
            ("model", "prompt_latent") => m.prompt_latent = f.num()?,
            ("model", "adapter_rank") => m.adapter_rank = f.num()?,
            ("model", "adapter_scale") => m.adapter_scale = f.num()?,
            ("model", "subspace_rank") => m.subspace_rank = f.num()?,
            ("model", "specific_hidden") => m.specific_hidden = f.num()?,
            ("model", "classes") => m.classes = f.num()?,
            ("model", "use_mcp") => m.use_mcp = f.flag()?,
            ("model", "use_dssa") => m.use_dssa = f.flag()?,
            ("model", "pos_every_layer") => m.pos_every_layer = f.flag()?,
            ("model", "subspace_mode") => {
                m.subspace_mode = f.pick(
                    |s| match s {
                        "per_sample" => Some(SubspaceMode::PerSample),
                        "batch" => Some(SubspaceMode::Batch),
                        _ => None,
                    },
                    "per_sample, batch",
                )?
            }
            ("tfr", "gamma") => t.gamma = f.num()?,
            ("tfr", "beta") => t.beta = f.num()?,
            ("tfr", "voices_per_octave") => t.voices_per_octave = f.num()?,
            ("tfr", "f_lo_hz") => t.f_lo_hz = f.num()?,
            ("tfr", "f_hi_hz") => t.f_hi_hz = f.num()?,
            ("train", "lr") => tr.lr = f.num()?,
            ("train", "weight_decay") => tr.weight_decay = f.num()?,
            ("train", "epochs") => tr.epochs = f.num()?,
            ("train", "batch_size") => tr.batch_size = f.num()?,
            ("train", "schedule") => tr.schedule = f.pick(Schedule::parse, "cosine, constant")?,
            ("train", "target") => {}
            ("train", "seed") => tr.seed = f.num()?,
            ("train", "backbone_seed") => tr.backbone_seed = f.num()?,
            ("train", "eval_mode") => tr.eval_mode = f.pick(parse_eval_mode, "train_path, invariant")?,
            ("data", "clip_seconds") => d.clip_seconds = f.num()?,
            ("data", "split_seed") => d.split_seed = f.num()?,
            ("loss", "lambda1") => tr.weights.lambda1 = f.num()?,
            ("loss", "lambda2") => tr.weights.lambda2 = f.num()?,
            ("loss", "lambda3") => tr.weights.lambda3 = f.num()?,
            ("loss", "normalization") => tr.norm = f.pick(Normalization::parse, "sum, mean")?,
            _ => return Err(f.err("unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let t = &self.tfr;
        let ok = t.gamma > 0.0 && t.beta > 0.0 && t.voices_per_octave > 0 && t.f_lo_hz >= MIN_FREQ_HZ && t.f_hi_hz > t.f_lo_hz;
        if !ok {
            return Err(ScptError::InvalidArgument(format!("invalid TFR settings {t:?}")));
        }
        if !(self.data.clip_seconds.is_finite() && self.data.clip_seconds > 0.0) {
            return Err(ScptError::InvalidArgument(format!("clip length {} must be > 0", self.data.clip_seconds)));
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String, String)> {
        let (m, t, tr, d) = (&self.model, &self.tfr, &self.train, &self.data);
        let b = m.physio.blocks;
        let kv: Vec<(&str, &str, String)> = vec![
            ("model", "layers", m.layers.to_string()),
            ("model", "dim", m.dim.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "mlp_hidden", m.mlp_hidden.to_string()),
            ("model", "channels", m.channels.to_string()),
            ("model", "frame_size", m.frame_size.to_string()),
            ("model", "patch", m.patch.to_string()),
            ("model", "frames_per_clip", m.frames_per_clip.to_string()),
            ("model", "tfr_size", m.tfr_size.to_string()),
            ("model", "physio_stem", m.physio.stem.to_string()),
            ("model", "physio_blocks", format!("{},{},{}", b[0], b[1], b[2])),
            ("model", "prompt_latent", m.prompt_latent.to_string()),
            ("model", "adapter_rank", m.adapter_rank.to_string()),
            ("model", "adapter_scale", m.adapter_scale.to_string()),
            ("model", "subspace_rank", m.subspace_rank.to_string()),
            ("model", "specific_hidden", m.specific_hidden.to_string()),
            ("model", "classes", m.classes.to_string()),
            ("model", "use_mcp", m.use_mcp.to_string()),
            ("model", "use_dssa", m.use_dssa.to_string()),
            ("model", "pos_every_layer", m.pos_every_layer.to_string()),
            ("model", "subspace_mode", subspace_mode_str(m.subspace_mode).to_string()),
            ("tfr", "gamma", t.gamma.to_string()),
            ("tfr", "beta", t.beta.to_string()),
            ("tfr", "voices_per_octave", t.voices_per_octave.to_string()),
            ("tfr", "f_lo_hz", t.f_lo_hz.to_string()),
            ("tfr", "f_hi_hz", t.f_hi_hz.to_string()),
            ("train", "lr", tr.lr.to_string()),
            ("train", "weight_decay", tr.weight_decay.to_string()),
            ("train", "epochs", tr.epochs.to_string()),
            ("train", "batch_size", tr.batch_size.to_string()),
            ("train", "schedule", tr.schedule.as_str().to_string()),
            ("train", "target", tr.target.as_str().to_string()),
            ("train", "seed", tr.seed.to_string()),
            ("train", "backbone_seed", tr.backbone_seed.to_string()),
            ("train", "eval_mode", eval_mode_str(tr.eval_mode).to_string()),
            ("data", "clip_seconds", d.clip_seconds.to_string()),
            ("data", "split_seed", d.split_seed.to_string()),
            ("loss", "lambda1", tr.weights.lambda1.to_string()),
            ("loss", "lambda2", tr.weights.lambda2.to_string()),
            ("loss", "lambda3", tr.weights.lambda3.to_string()),
            ("loss", "normalization", tr.norm.as_str().to_string()),
        ];
        kv.into_iter().map(|(s, k, v)| (s.to_string(), k.to_string(), v)).collect()
    }

    pub fn to_ini(&self) -> String {
        format_ini(&self.entries())
    }

    pub fn tfr_pipeline(&self) -> TfrPipeline {
        TfrPipeline {
            morse: Morse { gamma: self.tfr.gamma, beta: self.tfr.beta },
            voices_per_octave: self.tfr.voices_per_octave,
            f_lo_hz: self.tfr.f_lo_hz,
            f_hi_hz: self.tfr.f_hi_hz,
            out_rows: self.model.tfr_size,
            out_cols: self.model.tfr_size,
        }
    }
}

//! The assembled network: frozen transformer, facial and rPPG token paths,
//! per-layer prompter and adapters, subspace projection and the two heads.
//!
//! One sample is a clip of `T` frames plus one TFR image. Every frame runs
//! through the layers with its own prompt sequence; the rPPG tokens `P⁰` are
//! shared. The emotion head sees the mean over frames of the projected class
//! features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dssa::{check_rank, dssa_block_graph, truncated_svd, DssaLayer, DssaMode, SubspaceFactors};
use crate::encoders::{patchify, physio_encoder_graph, physio_grid_side, vit_layer_forward, vit_layer_graph, PhysioEncoder, PhysioPlan, TokenSequence, VitLayer};
use crate::error::{Result, ScptError};
use crate::losses::{orthogonality_graph, sparsity_graph, LossReport, LossWeights, Normalization};
use crate::mcp::{mcp_generate_graph, McpLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SubspaceMode {
    /// One SVD per frame of each sample.
    #[default]
    PerSample,
    /// One SVD over the stacked rows of a whole batch.
    Batch,
}

impl SubspaceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_sample" => Some(SubspaceMode::PerSample),
            "batch" => Some(SubspaceMode::Batch),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubspaceMode::PerSample => "per_sample",
            SubspaceMode::Batch => "batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub channels: usize,
    pub frame_size: usize,
    pub patch: usize,
    pub frames_per_clip: usize,
    pub tfr_size: usize,
    pub physio: PhysioPlan,
    pub prompt_latent: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub subspace_rank: usize,
    pub specific_hidden: usize,
    pub classes: usize,
    pub use_mcp: bool,
    pub use_dssa: bool,
    pub pos_every_layer: bool,
    pub subspace_mode: SubspaceMode,
}

impl Default for ModelConfig {
    /// Desk-scale profile: 4 layers of width 64 on 32×32 frames.
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            mlp_hidden: 256,
            channels: 3,
            frame_size: 32,
            patch: 8,
            frames_per_clip: 4,
            tfr_size: 64,
            physio: PhysioPlan { stem: 16, blocks: [32, 64, 64] },
            prompt_latent: 32,
            adapter_rank: 8,
            adapter_scale: 0.1,
            subspace_rank: 16,
            specific_hidden: 16,
            classes: 2,
            use_mcp: true,
            use_dssa: true,
            pos_every_layer: true,
            subspace_mode: SubspaceMode::PerSample,
        }
    }
}

impl ModelConfig {
    /// Smallest useful model: `L = 2`, `D = 8`, `N = 4`, `T = 2`.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
            frame_size: 32,
            patch: 16,
            frames_per_clip: 2,
            tfr_size: 32,
            physio: PhysioPlan { stem: 4, blocks: [4, 8, 8] },
            prompt_latent: 4,
            adapter_rank: 2,
            subspace_rank: 2,
            specific_hidden: 2,
            ..Self::default()
        }
    }

    /// Full-size shapes (224×224 inputs, 12 layers of width 768).
    pub fn full() -> Self {
        ModelConfig {
            layers: 12,
            dim: 768,
            heads: 12,
            mlp_hidden: 3072,
            frame_size: 224,
            patch: 16,
            frames_per_clip: 8,
            tfr_size: 224,
            physio: PhysioPlan { stem: 16, blocks: [32, 64, 64] },
            prompt_latent: 384,
            specific_hidden: 192,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "default" => Some(Self::default()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.frame_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Width of the emotion head's input.
    pub fn head_input(&self) -> usize {
        if self.use_dssa {
            self.subspace_rank
        } else {
            self.dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScptError::InvalidArgument(m));
        if self.layers == 0 || self.dim < 2 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("need L >= 1 and D divisible by heads (D = {}, heads = {})", self.dim, self.heads));
        }
        if self.patch == 0 || self.frame_size % self.patch != 0 || self.channels == 0 {
            return bad(format!("frame size {} not divisible by patch {}", self.frame_size, self.patch));
        }
        if self.frames_per_clip == 0 || self.classes < 2 || self.mlp_hidden == 0 {
            return bad("T >= 1, classes >= 2 and a non-empty MLP are required".into());
        }
        if self.use_mcp {
            let side = physio_grid_side(self.tfr_size);
            if self.tfr_size < 16 || side * side != self.num_patches() {
                return bad(format!(
                    "TFR size {} gives a {side}x{side} rPPG grid, but frames give {} patches",
                    self.tfr_size,
                    self.num_patches()
                ));
            }
            if self.prompt_latent == 0 {
                return bad("prompt latent width must be >= 1".into());
            }
        }
        if self.use_dssa {
            check_rank(self.dim, self.adapter_rank)?;
            let max = self.num_patches().min(self.dim);
            if self.subspace_rank == 0 || self.subspace_rank > max {
                return Err(ScptError::RankOutOfRange { rank: self.subspace_rank, max });
            }
            if self.specific_hidden == 0 || !self.adapter_scale.is_finite() {
                return bad("specific hidden width must be >= 1 and the adapter scale finite".into());
            }
        }
        Ok(())
    }
}

/// Where every tensor lives. `T` is a [`ParamId`] or a [`Var`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout<T> {
    pub cls: T,
    pub pos: T,
    pub layers: Vec<VitLayer<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub face_w: T,
    pub face_b: T,
    pub physio: Option<PhysioEncoder<T>>,
    pub rppg_w: Option<T>,
    pub rppg_b: Option<T>,
    pub mcp: Vec<McpLayer<T>>,
    pub dssa: Vec<DssaLayer<T>>,
    pub emo_w: T,
    pub emo_b: T,
    pub sub_w: Option<T>,
    pub sub_b: Option<T>,
}

impl<T> Layout<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Layout<U> {
        Layout {
            cls: f(&self.cls),
            pos: f(&self.pos),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
            face_w: f(&self.face_w),
            face_b: f(&self.face_b),
            physio: self.physio.as_ref().map(|p| p.map(&mut f)),
            rppg_w: self.rppg_w.as_ref().map(&mut f),
            rppg_b: self.rppg_b.as_ref().map(&mut f),
            mcp: self.mcp.iter().map(|l| l.map(&mut f)).collect(),
            dssa: self.dssa.iter().map(|l| l.map(&mut f)).collect(),
            emo_w: f(&self.emo_w),
            emo_b: f(&self.emo_b),
            sub_w: self.sub_w.as_ref().map(&mut f),
            sub_b: self.sub_b.as_ref().map(&mut f),
        }
    }
}

/// Model input: `T` patchified frames (`N×(C·p·p)`) and one square TFR image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    pub patches: Vec<Matrix>,
    pub tfr: Option<Matrix>,
}

impl ClipInput {
    /// Patchifies `C×(H·W)` frames for `config`.
    pub fn from_frames(frames: &[Matrix], tfr: Option<Matrix>, config: &ModelConfig) -> Result<Self> {
        let patches = frames
            .iter()
            .map(|f| patchify(f, config.frame_size, config.frame_size, config.patch))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipInput { patches, tfr })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Targets {
    pub label: usize,
    /// Index into the training-subject label space; `None` drops the subject term.
    pub subject: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<'s> {
    pub mode: DssaMode,
    /// Records gradients for every trainable tensor.
    pub track: bool,
    /// Fixed emotion subspaces, one per frame or a single shared one.
    pub subspaces: Option<&'s [SubspaceFactors]>,
    pub targets: Option<Targets>,
    pub weights: LossWeights,
    pub norm: Normalization,
    /// Fills [`ForwardOutput::kink_pattern`].
    pub record_kinks: bool,
}

impl ForwardOptions<'_> {
    pub fn inference(mode: DssaMode) -> Self {
        ForwardOptions {
            mode,
            track: false,
            subspaces: None,
            targets: None,
            weights: LossWeights::zero(),
            norm: Normalization::Mean,
            record_kinks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Frame-averaged head input.
    pub head_input: Matrix,
    /// Final-norm class feature per frame.
    pub cls_features: Vec<Matrix>,
    /// Patch rows leaving the last layer, per frame.
    pub patch_tokens: Vec<Matrix>,
    /// `Γ_shared^L` per frame (empty without adapters).
    pub shared_last: Vec<Matrix>,
    /// Shared correction of the class row entering the last layer, per frame.
    pub cls_shared: Vec<Matrix>,
    pub subspaces: Vec<SubspaceFactors>,
    pub report: Option<LossReport>,
    /// Gradient per parameter slot; `Some` only for trainable tensors when tracking.
    pub grads: Vec<Option<Matrix>>,
    pub kink_pattern: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScptModel {
    pub config: ModelConfig,
    pub num_subjects: usize,
    pub store: ParamStore,
    pub layout: Layout<ParamId>,
}

const INIT_STD: f64 = 0.02;

fn layer_prefix(kind: &str, l: usize) -> String {
    format!("{kind}.layer{l}")
}

impl ScptModel {
    /// Seeds the frozen backbone from `backbone_seed` and the trainable parts from `seed`.
    pub fn init(config: &ModelConfig, num_subjects: usize, backbone_seed: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.use_dssa && num_subjects == 0 {
            return Err(ScptError::InvalidArgument("subject head needs at least one subject".into()));
        }
        let (d, n) = (config.dim, config.num_patches());
        let mut store = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(backbone_seed);
        let cls = store.insert("frozen.backbone.cls", Matrix::randn(1, d, INIT_STD, &mut brng))?;
        let pos = store.insert("frozen.backbone.pos", Matrix::randn(n + 1, d, INIT_STD, &mut brng))?;
        let layers = (0..config.layers)
            .map(|l| VitLayer::init(&mut store, &layer_prefix("frozen.backbone", l), d, config.mlp_hidden, &mut brng))
            .collect::<Result<Vec<_>>>()?;
        let norm_g = store.insert("frozen.backbone.norm.g", Matrix::filled(1, d, 1.0))?;
        let norm_b = store.insert("frozen.backbone.norm.b", Matrix::zeros(1, d))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pl = config.patch_len();
        let face_w = store.insert("train.face_embed.w", Matrix::randn(pl, d, 1.0 / (pl as f64).sqrt(), &mut rng))?;
        let face_b = store.insert("train.face_embed.b", Matrix::zeros(1, d))?;
        let (physio, rppg_w, rppg_b, mcp) = if config.use_mcp {
            let physio = config.physio.init(&mut store, "train.physio", d, &mut rng)?;
            let w = store.insert("train.rppg_embed.w", Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng))?;
            let b = store.insert("train.rppg_embed.b", Matrix::zeros(1, d))?;
            let mcp = (0..config.layers)
                .map(|l| McpLayer::init(&mut store, &layer_prefix("train.mcp", l), d, config.prompt_latent, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (Some(physio), Some(w), Some(b), mcp)
        } else {
            (None, None, None, Vec::new())
        };
        let dssa = if config.use_dssa {
            (0..config.layers)
                .map(|l| {
                    let p = layer_prefix("train.dssa", l);
                    DssaLayer::init(&mut store, &p, d, config.adapter_rank, config.specific_hidden, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let hi = config.head_input();
        let emo_w = store.insert("train.head.emo.w", Matrix::randn(hi, config.classes, 1.0 / (hi as f64).sqrt(), &mut rng))?;
        let emo_b = store.insert("train.head.emo.b", Matrix::zeros(1, config.classes))?;
        let (sub_w, sub_b) = if config.use_dssa {
            let w = store.insert("train.head.sub.w", Matrix::randn(d, num_subjects, 1.0 / (d as f64).sqrt(), &mut rng))?;
            let b = store.insert("train.head.sub.b", Matrix::zeros(1, num_subjects))?;
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        let layout = Layout {
            cls,
            pos,
            layers,
            norm_g,
            norm_b,
            face_w,
            face_b,
            physio,
            rppg_w,
            rppg_b,
            mcp,
            dssa,
            emo_w,
            emo_b,
            sub_w,
            sub_b,
        };
        Ok(ScptModel { config: config.clone(), num_subjects, store, layout })
    }

    /// Rebuilds a model around a loaded store, checking every expected tensor.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.dim, config.num_patches());
        let num_subjects = if config.use_dssa { store.get(store.id("train.head.sub.w")?).cols() } else { 0 };
        let s = &store;
        let layout = Layout {
            cls: s.expect("frozen.backbone.cls", 1, d)?,
            pos: s.expect("frozen.backbone.pos", n + 1, d)?,
            layers: (0..config.layers)
                .map(|l| VitLayer::locate(s, &layer_prefix("frozen.backbone", l), d, config.mlp_hidden))
                .collect::<Result<Vec<_>>>()?,
            norm_g: s.expect("frozen.backbone.norm.g", 1, d)?,
            norm_b: s.expect("frozen.backbone.norm.b", 1, d)?,
            face_w: s.expect("train.face_embed.w", config.patch_len(), d)?,
            face_b: s.expect("train.face_embed.b", 1, d)?,
            physio: config.use_mcp.then(|| config.physio.locate(s, "train.physio", d)).transpose()?,
            rppg_w: config.use_mcp.then(|| s.expect("train.rppg_embed.w", d, d)).transpose()?,
            rppg_b: config.use_mcp.then(|| s.expect("train.rppg_embed.b", 1, d)).transpose()?,
            mcp: if config.use_mcp {
                (0..config.layers)
                    .map(|l| McpLayer::locate(s, &layer_prefix("train.mcp", l), d, config.prompt_latent))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            },
            dssa: if config.use_dssa {
                (0..config.layers)
                    .map(|l| DssaLayer::locate(s, &layer_prefix("train.dssa", l), d, config.adapter_rank, config.specific_hidden))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            },
            emo_w: s.expect("train.head.emo.w", config.head_input(), config.classes)?,
            emo_b: s.expect("train.head.emo.b", 1, config.classes)?,
            sub_w: config.use_dssa.then(|| s.expect("train.head.sub.w", d, num_subjects)).transpose()?,
            sub_b: config.use_dssa.then(|| s.expect("train.head.sub.b", 1, num_subjects)).transpose()?,
        };
        if store.len() != count_slots(&layout) {
            return Err(ScptError::CorruptFile(format!(
                "checkpoint holds {} tensors, the configuration expects {}",
                store.len(),
                count_slots(&layout)
            )));
        }
        Ok(ScptModel { config: config.clone(), num_subjects, store, layout })
    }

    /// Replaces the frozen tensors with those of `other` (names and shapes must match).
    pub fn load_backbone(&mut self, other: &ParamStore) -> Result<usize> {
        self.store.overwrite_from(other, |n| n.starts_with(crate::params::FROZEN_PREFIX))
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        self.store.get(id)
    }

    fn check_input(&self, input: &ClipInput) -> Result<()> {
        let c = &self.config;
        if input.patches.is_empty() {
            return Err(ScptError::EmptyClip);
        }
        for p in &input.patches {
            if p.shape() != (c.num_patches(), c.patch_len()) {
                return Err(ScptError::shape(format!(
                    "frame patches {:?}, expected ({}, {})",
                    p.shape(),
                    c.num_patches(),
                    c.patch_len()
                )));
            }
            if !p.is_finite() {
                return Err(ScptError::NonFiniteInput);
            }
        }
        if c.use_mcp {
            match &input.tfr {
                Some(t) if t.shape() == (c.tfr_size, c.tfr_size) && t.is_finite() => {}
                Some(t) => return Err(ScptError::shape(format!("TFR {:?}, expected {}x{}", t.shape(), c.tfr_size, c.tfr_size))),
                None => return Err(ScptError::shape("the prompter needs a TFR image".to_string())),
            }
        }
        Ok(())
    }

    /// Full forward pass, with losses when `targets` are given and gradients when `track` is set.
    pub fn forward(&self, input: &ClipInput, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let c = &self.config;
        if let Some(t) = opts.targets {
            if t.label >= c.classes {
                return Err(ScptError::InvalidLabel { label: t.label, classes: c.classes });
            }
            if let Some(s) = t.subject {
                if s >= self.num_subjects {
                    return Err(ScptError::InvalidLabel { label: s, classes: self.num_subjects });
                }
            }
        }
        if let Some(fixed) = opts.subspaces {
            if fixed.len() != 1 && fixed.len() != input.patches.len() {
                return Err(ScptError::shape(format!("{} fixed subspaces for {} frames", fixed.len(), input.patches.len())));
            }
        }

        let mut g = Graph::new();
        let slots: Vec<Var> = self.store.iter().map(|(_, e)| g.param(&e.value, opts.track && e.trainable())).collect();
        let p = self.layout.map(|id| slots[id.index()]);
        let training = opts.mode == DssaMode::Train;
        let want_sub = training && opts.targets.is_some_and(|t| t.subject.is_some()) && c.use_dssa;

        let prompt0 = match (&p.physio, &input.tfr) {
            (Some(phys), Some(tfr)) if c.use_mcp => {
                let t = g.constant(tfr.clone());
                let (feat, _) = physio_encoder_graph(&mut g, t, c.tfr_size, phys);
                let tokens = g.transpose(feat);
                Some(g.linear(tokens, p.rppg_w.unwrap(), p.rppg_b.unwrap()))
            }
            _ => None,
        };

        let mut head_inputs = Vec::new();
        let mut cls_vars = Vec::new();
        let mut patch_vars = Vec::new();
        let mut shared_last = Vec::new();
        let mut cls_shared = Vec::new();
        let mut subspaces = Vec::new();
        let mut sparsity_terms = Vec::new();
        let mut orth_terms = Vec::new();
        let mut spec_cls = Vec::new();
        let mut per_layer_l1 = vec![Vec::new(); c.layers];
        let mut per_layer_orth = vec![Vec::new(); c.layers];

        for (t, patches) in input.patches.iter().enumerate() {
            let x = g.constant(patches.clone());
            let mut h = g.linear(x, p.face_w, p.face_b);
            let mut cls = p.cls;
            let mut prompt = prompt0;
            let mut shared = Vec::with_capacity(c.layers);
            let mut specific = Vec::with_capacity(c.layers);
            for l in 0..c.layers {
                let xl = match prompt {
                    Some(prev) => {
                        let next = mcp_generate_graph(&mut g, h, prev, &p.mcp[l]);
                        prompt = Some(next);
                        g.add(h, next)
                    }
                    None => h,
                };
                let pos = (c.pos_every_layer || l == 0).then_some(p.pos);
                if c.use_dssa {
                    let out = dssa_block_graph(&mut g, cls, xl, pos, &p.layers[l], c.heads, &p.dssa[l], c.adapter_scale, opts.mode);
                    if l + 1 == c.layers {
                        cls_shared.push(g.value(out.shared_cls).clone());
                        if want_sub {
                            spec_cls.push(out.specific_cls.expect("train mode"));
                        }
                    }
                    cls = out.cls;
                    h = out.patches;
                    shared.push(out.shared);
                    if let Some(s) = out.specific {
                        specific.push(s);
                    }
                } else {
                    let seq = g.concat_rows(&[cls, xl]);
                    let seq = match pos {
                        Some(pv) => g.add(seq, pv),
                        None => seq,
                    };
                    let e = vit_layer_graph(&mut g, seq, &p.layers[l], c.heads).out;
                    let n = g.value(e).rows();
                    cls = g.slice_rows(e, 0, 1);
                    h = g.slice_rows(e, 1, n);
                }
            }
            let feat = g.layer_norm_rows(cls, p.norm_g, p.norm_b);
            cls_vars.push(feat);
            patch_vars.push(h);
            if c.use_dssa {
                let last = *shared.last().unwrap();
                let factors = match opts.subspaces {
                    Some(fixed) => fixed[if fixed.len() == 1 { 0 } else { t }].clone(),
                    None => truncated_svd(g.value(last), c.subspace_rank)?,
                };
                let v = g.constant(factors.v.clone());
                head_inputs.push(g.matmul(feat, v));
                shared_last.push(g.value(last).clone());
                subspaces.push(factors);
                if training && opts.targets.is_some() {
                    let l1 = sparsity_graph(&mut g, &specific, opts.norm);
                    let or = orthogonality_graph(&mut g, &shared, &specific, opts.norm);
                    for l in 0..c.layers {
                        per_layer_l1[l].push(g.scalar(l1[l]));
                        per_layer_orth[l].push(g.scalar(or[l]));
                    }
                    sparsity_terms.push(g.mean_of(&l1));
                    orth_terms.push(g.mean_of(&or));
                }
            } else {
                head_inputs.push(feat);
            }
        }

        let z = g.mean_of(&head_inputs);
        let logits = g.linear(z, p.emo_w, p.emo_b);
        if !g.value(logits).is_finite() {
            return Err(ScptError::NonFinite("logits"));
        }

        let mut report = None;
        let mut grads = Vec::new();
        if let Some(targets) = opts.targets {
            let task = g.cross_entropy(logits, targets.label);
            let mut total = task;
            let (mut spec_v, mut orth_v, mut sub_v) = (0.0, 0.0, 0.0);
            if !sparsity_terms.is_empty() {
                let s = g.mean_of(&sparsity_terms);
                let o = g.mean_of(&orth_terms);
                spec_v = g.scalar(s);
                orth_v = g.scalar(o);
                let ws = g.scale(s, opts.weights.lambda1);
                let wo = g.scale(o, opts.weights.lambda2);
                total = g.add_all(&[total, ws, wo]);
            }
            if want_sub {
                let feat = g.mean_of(&spec_cls);
                let sl = g.linear(feat, p.sub_w.unwrap(), p.sub_b.unwrap());
                let sub = g.cross_entropy(sl, targets.subject.unwrap());
                sub_v = g.scalar(sub);
                let ws = g.scale(sub, opts.weights.lambda3);
                total = g.add(total, ws);
            }
            let total_v = g.scalar(total);
            if !total_v.is_finite() {
                return Err(ScptError::NonFinite("loss"));
            }
            let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            report = Some(LossReport {
                task: g.scalar(task),
                specific: spec_v,
                orth: orth_v,
                sub: sub_v,
                total: total_v,
                specific_per_layer: per_layer_l1.iter().map(mean).collect(),
                orth_per_layer: per_layer_orth.iter().map(mean).collect(),
            });
            if opts.track {
                let mut gr = g.backward(total);
                grads = self
                    .store
                    .iter()
                    .map(|(id, e)| {
                        if e.trainable() {
                            Some(gr.take(slots[id.index()]).unwrap_or_else(|| Matrix::zeros(e.value.rows(), e.value.cols())))
                        } else {
                            None
                        }
                    })
                    .collect();
            }
        }

        let kink_pattern = if opts.record_kinks { g.kink_pattern() } else { Vec::new() };
        Ok(ForwardOutput {
            kink_pattern,
            logits: g.value(logits).clone(),
            head_input: g.value(z).clone(),
            cls_features: cls_vars.iter().map(|&v| g.value(v).clone()).collect(),
            patch_tokens: patch_vars.iter().map(|&v| g.value(v).clone()).collect(),
            shared_last,
            cls_shared,
            subspaces,
            report,
            grads,
        })
    }

    /// Plain frozen-backbone pass over the facial tokens of one frame, no
    /// prompts or adapters. Returns the token sequence after every layer.
    pub fn backbone_reference(&self, patches: &Matrix) -> Result<Vec<TokenSequence>> {
        let c = &self.config;
        let tokens = patches.matmul(self.value(self.layout.face_w));
        let bias = self.value(self.layout.face_b);
        let tokens = Matrix::from_fn(tokens.rows(), tokens.cols(), |r, k| tokens[(r, k)] + bias[(0, k)]);
        let pos = self.value(self.layout.pos);
        let mut seq = TokenSequence::with_class(self.value(self.layout.cls).clone(), tokens);
        let mut out = Vec::with_capacity(c.layers);
        for (l, ids) in self.layout.layers.iter().enumerate() {
            let layer = ids.map(|&id| self.value(id).clone());
            let input = if c.pos_every_layer || l == 0 {
                let s = seq.stacked().add(pos);
                TokenSequence::with_class(s.rows_range(0, 1), s.rows_range(1, s.rows()))
            } else {
                seq.clone()
            };
            seq = vit_layer_forward(&input, &layer, c.heads)?.0;
            out.push(seq.clone());
        }
        Ok(out)
    }
}

fn count_slots(layout: &Layout<ParamId>) -> usize {
    let mut n = 0;
    layout.map(|_| n += 1);
    n
}

/// One SVD over the stacked `Γ_shared^L` rows of a batch.
pub fn pooled_subspace(shared: &[&Matrix], rank: usize) -> Result<SubspaceFactors> {
    let stacked = Matrix::vstack(shared);
    truncated_svd(&stacked, rank)
}

//! Frame sampling, patch embedding, the physiological ResNet encoder and the
//! frozen transformer layers.
//!
//! Graph builders (`*_graph`) take [`Var`] bundles so the same code serves
//! training, finite-difference checks and the plain value-level entry points.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Result, ScptError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// `T` frames of a clip, each stored as a `C×(H·W)` matrix with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub frames: Vec<Matrix>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameClip {
    pub fn new(frames: Vec<Matrix>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(ScptError::EmptyClip);
        }
        for f in &frames {
            if f.shape() != (channels, height * width) {
                return Err(ScptError::shape(format!("frame {:?} vs {channels}x{height}x{width}", f.shape())));
            }
            if !f.is_finite() {
                return Err(ScptError::NonFiniteInput);
            }
        }
        Ok(FrameClip { frames, channels, height, width })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Indices of `t` frames drawn from a clip of `len` frames.
///
/// The clip is split into `t` equal segments; eval mode takes each segment's
/// centre `⌊(2i+1)·len/(2t)⌋`, train mode a uniform index inside it. Clips
/// shorter than `t` are padded by repeating the last frame.
pub fn sample_frame_indices(len: usize, t: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(ScptError::EmptyClip);
    }
    if t == 0 {
        return Err(ScptError::InvalidArgument("frame count T must be at least 1".into()));
    }
    if len < t {
        return Ok((0..t).map(|i| i.min(len - 1)).collect());
    }
    Ok((0..t)
        .map(|i| match mode {
            SampleMode::Eval => (2 * i + 1) * len / (2 * t),
            SampleMode::Train => {
                let lo = i * len / t;
                let hi = (i + 1) * len / t;
                rng.random_range(lo..hi)
            }
        })
        .collect())
}

pub fn sample_frames(video_frames: &[Matrix], t: usize, mode: SampleMode, rng: &mut impl Rng, channels: usize, height: usize, width: usize) -> Result<FrameClip> {
    let idx = sample_frame_indices(video_frames.len(), t, mode, rng)?;
    FrameClip::new(idx.into_iter().map(|i| video_frames[i].clone()).collect(), channels, height, width)
}

/// Rearranges a `C×(H·W)` image into `N×(C·p·p)` patch rows in raster order.
pub fn patchify(x: &Matrix, height: usize, width: usize, patch: usize) -> Result<Matrix> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(ScptError::shape(format!("{height}x{width} is not divisible by patch {patch}")));
    }
    if x.cols() != height * width {
        return Err(ScptError::shape(format!("image has {} pixels, expected {}", x.cols(), height * width)));
    }
    let (gh, gw) = (height / patch, width / patch);
    let c = x.rows();
    let mut out = Matrix::zeros(gh * gw, c * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for ch in 0..c {
                let plane = x.row(ch);
                for dy in 0..patch {
                    let base = (py * patch + dy) * width + px * patch;
                    row[k..k + patch].copy_from_slice(&plane[base..base + patch]);
                    k += patch;
                }
            }
        }
    }
    Ok(out)
}

/// Linear patch embedding: `patchify(x)·W + b`, giving `N×D` tokens.
pub fn patch_embed(x: &Matrix, height: usize, width: usize, patch: usize, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let patches = patchify(x, height, width, patch)?;
    if weight.rows() != patches.cols() || bias.shape() != (1, weight.cols()) {
        return Err(ScptError::shape(format!(
            "patch embedding weight {:?}/bias {:?} for patch length {}",
            weight.shape(),
            bias.shape(),
            patches.cols()
        )));
    }
    let mut g = Graph::new();
    let (p, w, b) = (g.constant(patches), g.param(weight, false), g.param(bias, false));
    let out = g.linear(p, w, b);
    Ok(g.value(out).clone())
}

/// Tokens plus an optional class row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub class_token: Option<Matrix>,
    pub tokens: Matrix,
}

impl TokenSequence {
    pub fn with_class(class_token: Matrix, tokens: Matrix) -> Self {
        TokenSequence { class_token: Some(class_token), tokens }
    }

    pub fn patches_only(tokens: Matrix) -> Self {
        TokenSequence { class_token: None, tokens }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Class row (if any) stacked above the patch rows.
    pub fn stacked(&self) -> Matrix {
        match &self.class_token {
            Some(c) => Matrix::vstack(&[c, &self.tokens]),
            None => self.tokens.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer layer

/// One pre-norm transformer block. `T` is a [`ParamId`], [`Var`] or [`Matrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct VitLayer<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> VitLayer<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> VitLayer<U> {
        VitLayer {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

impl VitLayer<ParamId> {
    const FIELDS: [&'static str; 16] = [
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
        "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ];

    fn shapes(dim: usize, hidden: usize) -> [(usize, usize); 16] {
        let (d, h) = (dim, hidden);
        [(1, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (1, d), (1, d), (d, h), (1, h), (h, d), (1, d)]
    }

    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let shapes = Self::shapes(dim, hidden);
        let mut ids = Vec::with_capacity(16);
        for (field, &(r, c)) in Self::FIELDS.iter().zip(&shapes) {
            let value = if field.ends_with(".g") {
                Matrix::filled(r, c, 1.0)
            } else if r == 1 {
                Matrix::randn(r, c, 0.02, rng)
            } else {
                Matrix::randn(r, c, 1.0 / (r as f64).sqrt(), rng)
            };
            ids.push(store.insert(format!("{prefix}.{field}"), value)?);
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn locate(store: &ParamStore, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        let shapes = Self::shapes(dim, hidden);
        let ids = Self::FIELDS
            .iter()
            .zip(&shapes)
            .map(|(field, &(r, c))| store.expect(&format!("{prefix}.{field}"), r, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        VitLayer {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            bq: ids[3],
            wk: ids[4],
            bk: ids[5],
            wv: ids[6],
            bv: ids[7],
            wo: ids[8],
            bo: ids[9],
            ln2_g: ids[10],
            ln2_b: ids[11],
            w1: ids[12],
            b1: ids[13],
            w2: ids[14],
            b2: ids[15],
        }
    }
}

/// Output of a transformer block, with the per-head attention matrices.
pub struct VitLayerOut {
    pub out: Var,
    pub attention: Vec<Var>,
}

pub fn vit_layer_graph(g: &mut Graph<'_>, x: Var, p: &VitLayer<Var>, heads: usize) -> VitLayerOut {
    let d = g.value(x).cols();
    let head_dim = d / heads;
    let h = g.layer_norm_rows(x, p.ln1_g, p.ln1_b);
    let q = g.linear(h, p.wq, p.bq);
    let k = g.linear(h, p.wk, p.bk);
    let v = g.linear(h, p.wv, p.bv);
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (s, e) = (hd * head_dim, (hd + 1) * head_dim);
        let (qh, kh, vh) = (g.slice_cols(q, s, e), g.slice_cols(k, s, e), g.slice_cols(v, s, e));
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let a = g.softmax_rows(scores);
        attention.push(a);
        outs.push(g.matmul(a, vh));
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let attn = g.linear(o, p.wo, p.bo);
    let x1 = g.add(x, attn);
    let h2 = g.layer_norm_rows(x1, p.ln2_g, p.ln2_b);
    let m = g.linear(h2, p.w1, p.b1);
    let m = g.gelu(m);
    let m = g.linear(m, p.w2, p.b2);
    let out = g.add(x1, m);
    VitLayerOut { out, attention }
}

/// Runs one transformer block on `(N+1)×D` tokens (class row included).
///
/// Returns the output sequence and the per-head attention matrices.
pub fn vit_layer_forward(x: &TokenSequence, layer: &VitLayer<Matrix>, heads: usize) -> Result<(TokenSequence, Vec<Matrix>)> {
    let d = x.dim();
    if heads == 0 || d % heads != 0 {
        return Err(ScptError::shape(format!("width {d} not divisible into {heads} heads")));
    }
    if layer.wq.shape() != (d, d) || layer.ln1_g.shape() != (1, d) || layer.w1.rows() != d || layer.w2.cols() != d {
        return Err(ScptError::shape(format!("layer weights do not match width {d}")));
    }
    if x.class_token.as_ref().is_some_and(|c| c.shape() != (1, d)) {
        return Err(ScptError::shape("class token width".to_string()));
    }
    let mut g = Graph::new();
    let vars = layer.map(|m| g.param(m, false));
    let input = g.constant(x.stacked());
    let out = vit_layer_graph(&mut g, input, &vars, heads);
    let full = g.value(out.out).clone();
    let attention = out.attention.iter().map(|&a| g.value(a).clone()).collect();
    let seq = match x.class_token {
        Some(_) => TokenSequence::with_class(full.rows_range(0, 1), full.rows_range(1, full.rows())),
        None => TokenSequence::patches_only(full),
    };
    Ok((seq, attention))
}

// ---------------------------------------------------------------------------
// Physiological encoder

/// Residual block: conv3×3(stride 2)–norm–ReLU–conv3×3–norm, plus a strided 1×1 skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: T,
    pub norm1_g: T,
    pub norm1_b: T,
    pub conv2: T,
    pub norm2_g: T,
    pub norm2_b: T,
    pub skip: T,
}

impl<T> ResBlock<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> ResBlock<U> {
        ResBlock {
            conv1: f(&self.conv1),
            norm1_g: f(&self.norm1_g),
            norm1_b: f(&self.norm1_b),
            conv2: f(&self.conv2),
            norm2_g: f(&self.norm2_g),
            norm2_b: f(&self.norm2_b),
            skip: f(&self.skip),
        }
    }
}

/// Stem conv plus three residual blocks and a 1×1 projection to the token width.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysioEncoder<T> {
    pub stem: T,
    pub stem_g: T,
    pub stem_b: T,
    pub blocks: Vec<ResBlock<T>>,
    pub proj: T,
}

impl<T> PhysioEncoder<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> PhysioEncoder<U> {
        PhysioEncoder {
            stem: f(&self.stem),
            stem_g: f(&self.stem_g),
            stem_b: f(&self.stem_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            proj: f(&self.proj),
        }
    }
}

/// Channel plan of the physiological encoder: stem width and three block widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhysioPlan {
    pub stem: usize,
    pub blocks: [usize; 3],
}

/// Input replication: the single-channel TFR is fed as three identical channels.
pub const PHYSIO_IN_CHANNELS: usize = 3;

impl PhysioPlan {
    fn shapes(&self, dim: usize) -> Vec<(String, (usize, usize))> {
        let mut v = vec![
            ("stem.w".to_string(), (self.stem, PHYSIO_IN_CHANNELS * 9)),
            ("stem.norm.g".to_string(), (self.stem, 1)),
            ("stem.norm.b".to_string(), (self.stem, 1)),
        ];
        let mut cin = self.stem;
        for (i, &cout) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.conv1.w"), (cout, cin * 9)));
            v.push((format!("block{i}.norm1.g"), (cout, 1)));
            v.push((format!("block{i}.norm1.b"), (cout, 1)));
            v.push((format!("block{i}.conv2.w"), (cout, cout * 9)));
            v.push((format!("block{i}.norm2.g"), (cout, 1)));
            v.push((format!("block{i}.norm2.b"), (cout, 1)));
            v.push((format!("block{i}.skip.w"), (cout, cin)));
            cin = cout;
        }
        v.push(("proj.w".to_string(), (dim, cin)));
        v
    }

    fn assemble(ids: &[ParamId]) -> PhysioEncoder<ParamId> {
        let blocks = (0..3)
            .map(|i| {
                let b = &ids[3 + 7 * i..3 + 7 * (i + 1)];
                ResBlock { conv1: b[0], norm1_g: b[1], norm1_b: b[2], conv2: b[3], norm2_g: b[4], norm2_b: b[5], skip: b[6] }
            })
            .collect();
        PhysioEncoder { stem: ids[0], stem_g: ids[1], stem_b: ids[2], blocks, proj: ids[24] }
    }

    /// He-normal conv kernels, unit norm gains except the second norm of each
    /// block, which starts at zero so every block begins as its skip path.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<PhysioEncoder<ParamId>> {
        let mut ids = Vec::new();
        for (name, (r, c)) in self.shapes(dim) {
            let value = if name.ends_with("norm2.g") || name.ends_with(".b") {
                Matrix::zeros(r, c)
            } else if name.ends_with(".g") {
                Matrix::filled(r, c, 1.0)
            } else {
                Matrix::randn(r, c, (2.0 / c as f64).sqrt(), rng)
            };
            ids.push(store.insert(format!("{prefix}.{name}"), value)?);
        }
        Ok(Self::assemble(&ids))
    }

    pub fn locate(&self, store: &ParamStore, prefix: &str, dim: usize) -> Result<PhysioEncoder<ParamId>> {
        let ids = self
            .shapes(dim)
            .into_iter()
            .map(|(name, (r, c))| store.expect(&format!("{prefix}.{name}"), r, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(&ids))
    }
}

/// Output spatial side of the encoder for a square input of side `size`:
/// stride-2 stem and three stride-2 blocks.
pub fn physio_grid_side(size: usize) -> usize {
    let mut s = size;
    for _ in 0..4 {
        s = (s - 1) / 2 + 1;
    }
    s
}

/// Runs the encoder on a `size×size` TFR. Returns a `D×(h'·w')` feature map and its side.
pub fn physio_encoder_graph(g: &mut Graph<'_>, tfr: Var, size: usize, p: &PhysioEncoder<Var>) -> (Var, usize) {
    let single = g.value(tfr);
    assert_eq!(single.shape(), (size, size));
    let flat = Matrix::from_vec(1, size * size, single.data().to_vec());
    let rep = Matrix::vstack(&vec![&flat; PHYSIO_IN_CHANNELS]);
    let x = g.constant(rep);

    let stem_out = g.value(p.stem).rows();
    let geom = ConvGeom { channels: PHYSIO_IN_CHANNELS, height: size, width: size, kernel: 3, stride: 2, pad: 1 };
    let mut side = geom.out_height();
    let y = g.conv2d(x, p.stem, geom);
    let y = g.sample_norm(y, p.stem_g, p.stem_b);
    let mut x = g.relu(y);
    let mut cin = stem_out;
    for b in &p.blocks {
        let cout = g.value(b.conv1).rows();
        let g1 = ConvGeom { channels: cin, height: side, width: side, kernel: 3, stride: 2, pad: 1 };
        let next = g1.out_height();
        let y = g.conv2d(x, b.conv1, g1);
        let y = g.sample_norm(y, b.norm1_g, b.norm1_b);
        let y = g.relu(y);
        let g2 = ConvGeom { channels: cout, height: next, width: next, kernel: 3, stride: 1, pad: 1 };
        let y = g.conv2d(y, b.conv2, g2);
        let y = g.sample_norm(y, b.norm2_g, b.norm2_b);
        let gs = ConvGeom { channels: cin, height: side, width: side, kernel: 1, stride: 2, pad: 0 };
        let skip = g.conv2d(x, b.skip, gs);
        let sum = g.add(y, skip);
        x = g.relu(sum);
        side = next;
        cin = cout;
    }
    (g.matmul(p.proj, x), side)
}

/// Value-level encoder: TFR grid → `D×h'×w'` feature map (as `D×(h'·w')`).
pub fn physio_encode(tfr: &Matrix, p: &PhysioEncoder<Matrix>) -> Result<(Matrix, usize)> {
    let size = tfr.rows();
    if tfr.cols() != size || size < 16 {
        return Err(ScptError::shape(format!("physio encoder needs a square input of side ≥ 16, got {:?}", tfr.shape())));
    }
    if p.stem.cols() != PHYSIO_IN_CHANNELS * 9 {
        return Err(ScptError::shape("stem kernel width".to_string()));
    }
    let mut g = Graph::new();
    let vars = p.map(|m| g.param(m, false));
    let x = g.constant(tfr.clone());
    let (out, side) = physio_encoder_graph(&mut g, x, size, &vars);
    Ok((g.value(out).clone(), side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn eval_sampling_identity_and_centres() {
        let mut r = rng();
        assert_eq!(sample_frame_indices(16, 16, SampleMode::Eval, &mut r).unwrap(), (0..16).collect::<Vec<_>>());
        let odd: Vec<usize> = (0..16).map(|i| 2 * i + 1).collect();
        assert_eq!(sample_frame_indices(32, 16, SampleMode::Eval, &mut r).unwrap(), odd);
        assert_eq!(sample_frame_indices(4, 8, SampleMode::Eval, &mut r).unwrap(), vec![0, 1, 2, 3, 3, 3, 3, 3]);
        assert!(matches!(sample_frame_indices(0, 4, SampleMode::Eval, &mut r), Err(ScptError::EmptyClip)));
    }

    #[test]
    fn train_sampling_stays_in_segments() {
        let mut r = rng();
        for _ in 0..50 {
            let idx = sample_frame_indices(37, 5, SampleMode::Train, &mut r).unwrap();
            for (i, &k) in idx.iter().enumerate() {
                assert!(k >= i * 37 / 5 && k < (i + 1) * 37 / 5);
            }
        }
        let a = sample_frame_indices(40, 8, SampleMode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_frame_indices(40, 8, SampleMode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patch_counts_and_zero_input() {
        let x = Matrix::zeros(3, 32 * 32);
        let w = Matrix::randn(3 * 16 * 16, 8, 1.0, &mut rng());
        let t = patch_embed(&x, 32, 32, 16, &w, &Matrix::zeros(1, 8)).unwrap();
        assert_eq!(t.shape(), (4, 8));
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(patch_embed(&Matrix::zeros(3, 30 * 30), 30, 30, 16, &w, &Matrix::zeros(1, 8)).is_err());
    }

    #[test]
    fn one_hot_patch_selects_weight_row() {
        // 1 channel, 4x4 image, patch 2: pixel (2, 1) lies in patch (1, 0) at offset dy=0, dx=1.
        let mut x = Matrix::zeros(1, 16);
        x[(0, 2 * 4 + 1)] = 1.0;
        let w = Matrix::from_fn(4, 3, |r, c| (10 * r + c) as f64);
        let t = patch_embed(&x, 4, 4, 2, &w, &Matrix::zeros(1, 3)).unwrap();
        assert_eq!(t.row(2), w.row(1));
        for r in [0, 1, 3] {
            assert!(t.row(r).iter().all(|&v| v == 0.0));
        }
    }

    fn random_layer(d: usize, hidden: usize, seed: u64) -> VitLayer<Matrix> {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ids = VitLayer::init(&mut store, "frozen.l", d, hidden, &mut r).unwrap();
        ids.map(|&id| store.get(id).clone())
    }

    #[test]
    fn vit_layer_shape_and_softmax_rows() {
        let layer = random_layer(8, 16, 2);
        let mut r = rng();
        let x = TokenSequence::with_class(Matrix::randn(1, 8, 1.0, &mut r), Matrix::randn(4, 8, 1.0, &mut r));
        let (y, attn) = vit_layer_forward(&x, &layer, 2).unwrap();
        assert_eq!(y.tokens.shape(), (4, 8));
        assert_eq!(y.class_token.unwrap().shape(), (1, 8));
        assert_eq!(attn.len(), 2);
        for a in attn {
            for rr in 0..a.rows() {
                assert!((a.row(rr).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(vit_layer_forward(&x, &layer, 3).is_err());
    }

    #[test]
    fn vit_layer_hand_evaluation() {
        // Single token, single head, width 2. Attention over one key is 1, so
        // attn = LN(x)·Wv·Wo; the MLP uses hidden width 1.
        let m = |rows: &[&[f64]]| Matrix::from_rows(rows);
        let layer = VitLayer {
            ln1_g: m(&[&[1.0, 1.0]]),
            ln1_b: m(&[&[0.0, 0.0]]),
            wq: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            bq: m(&[&[0.0, 0.0]]),
            wk: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            bk: m(&[&[0.0, 0.0]]),
            wv: m(&[&[2.0, 0.0], &[0.0, 1.0]]),
            bv: m(&[&[0.0, 0.5]]),
            wo: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            bo: m(&[&[0.0, 0.0]]),
            ln2_g: m(&[&[1.0, 1.0]]),
            ln2_b: m(&[&[0.0, 0.0]]),
            w1: m(&[&[1.0], &[0.0]]),
            b1: m(&[&[0.0]]),
            w2: m(&[&[1.0, -1.0]]),
            b2: m(&[&[0.0, 0.0]]),
        };
        let x = TokenSequence::patches_only(m(&[&[3.0, 1.0]]));
        let (y, _) = vit_layer_forward(&x, &layer, 1).unwrap();

        // Hand evaluation.
        let eps = crate::autodiff::LAYER_NORM_EPS;
        let ln = |a: f64, b: f64| {
            let mean = (a + b) / 2.0;
            let var = ((a - mean).powi(2) + (b - mean).powi(2)) / 2.0;
            let s = (var + eps).sqrt();
            ((a - mean) / s, (b - mean) / s)
        };
        let (h0, h1) = ln(3.0, 1.0);
        let attn = (2.0 * h0, h1 + 0.5);
        let x1 = (3.0 + attn.0, 1.0 + attn.1);
        let (n0, _) = ln(x1.0, x1.1);
        let act = crate::autodiff::gelu(n0);
        let expected = [x1.0 + act, x1.1 - act];
        assert!((y.tokens[(0, 0)] - expected[0]).abs() < 1e-12);
        assert!((y.tokens[(0, 1)] - expected[1]).abs() < 1e-12);
    }

    fn plan_encoder(plan: PhysioPlan, dim: usize, seed: u64) -> PhysioEncoder<Matrix> {
        let mut store = ParamStore::new();
        let ids = plan.init(&mut store, "train.physio", dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ids.map(|&id| store.get(id).clone())
    }

    #[test]
    fn physio_zero_input_zero_output_and_determinism() {
        let enc = plan_encoder(PhysioPlan { stem: 4, blocks: [4, 8, 8] }, 8, 3);
        let (z, side) = physio_encode(&Matrix::zeros(32, 32), &enc).unwrap();
        assert_eq!(side, 2);
        assert_eq!(z.shape(), (8, 4));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let tfr = Matrix::randn(32, 32, 1.0, &mut rng());
        let (a, _) = physio_encode(&tfr, &enc).unwrap();
        let (b, _) = physio_encode(&tfr, &enc).unwrap();
        assert_eq!(a, b);
        assert!(physio_encode(&Matrix::zeros(32, 31), &enc).is_err());
    }

    #[test]
    fn physio_full_size_input_gives_14x14_grid() {
        assert_eq!(physio_grid_side(224), 14);
        assert_eq!(physio_grid_side(32), 2);
        assert_eq!(physio_grid_side(64), 4);
        let enc = plan_encoder(PhysioPlan { stem: 2, blocks: [2, 2, 2] }, 4, 5);
        let (out, side) = physio_encode(&Matrix::filled(224, 224, 0.5), &enc).unwrap();
        assert_eq!(side, 14);
        assert_eq!(out.shape(), (4, 196));
    }
}

//! Modality-complementary prompts.
//!
//! Layer `l` turns the previous layer's facial patch tokens and the previous
//! prompt into a new prompt through single-head cross-attention in a shared
//! `d'`-wide space (facial tokens query, prompts supply keys and values). The
//! update is residual and its output projection starts at zero, so an
//! untrained prompter simply carries `P⁰ = H_R⁰` forward.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoders::TokenSequence;
use crate::error::{Result, ScptError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub prompt: Matrix,
    pub layer_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McpLayer<T> {
    pub ln_f_g: T,
    pub ln_f_b: T,
    pub ln_p_g: T,
    pub ln_p_b: T,
    pub w_f: T,
    pub w_p: T,
    pub w_o: T,
    pub b_o: T,
}

impl<T> McpLayer<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> McpLayer<U> {
        McpLayer {
            ln_f_g: f(&self.ln_f_g),
            ln_f_b: f(&self.ln_f_b),
            ln_p_g: f(&self.ln_p_g),
            ln_p_b: f(&self.ln_p_b),
            w_f: f(&self.w_f),
            w_p: f(&self.w_p),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
        }
    }
}

const FIELDS: [&str; 8] = ["ln_f.g", "ln_f.b", "ln_p.g", "ln_p.b", "w_f", "w_p", "w_o", "b_o"];

fn shapes(dim: usize, latent: usize) -> [(usize, usize); 8] {
    [(1, dim), (1, dim), (1, dim), (1, dim), (dim, latent), (dim, latent), (latent, dim), (1, dim)]
}

fn assemble(ids: &[ParamId]) -> McpLayer<ParamId> {
    McpLayer {
        ln_f_g: ids[0],
        ln_f_b: ids[1],
        ln_p_g: ids[2],
        ln_p_b: ids[3],
        w_f: ids[4],
        w_p: ids[5],
        w_o: ids[6],
        b_o: ids[7],
    }
}

impl McpLayer<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, latent: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut ids = Vec::with_capacity(FIELDS.len());
        for (field, &(r, c)) in FIELDS.iter().zip(&shapes(dim, latent)) {
            let value = match *field {
                "ln_f.g" | "ln_p.g" => Matrix::filled(r, c, 1.0),
                "w_f" | "w_p" => Matrix::randn(r, c, 1.0 / (r as f64).sqrt(), rng),
                _ => Matrix::zeros(r, c),
            };
            ids.push(store.insert(format!("{prefix}.{field}"), value)?);
        }
        Ok(assemble(&ids))
    }

    pub fn locate(store: &ParamStore, prefix: &str, dim: usize, latent: usize) -> Result<Self> {
        let ids = FIELDS
            .iter()
            .zip(&shapes(dim, latent))
            .map(|(field, &(r, c))| store.expect(&format!("{prefix}.{field}"), r, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(&ids))
    }
}

/// `P^l = P^{l-1} + Attn(Q = LN(H_F)·W_f, K = V = LN(P^{l-1})·W_p)·W_o + b_o`
pub fn mcp_generate_graph(g: &mut Graph<'_>, facial: Var, prev: Var, p: &McpLayer<Var>) -> Var {
    let latent = g.value(p.w_f).cols();
    let hf = g.layer_norm_rows(facial, p.ln_f_g, p.ln_f_b);
    let q = g.matmul(hf, p.w_f);
    let hp = g.layer_norm_rows(prev, p.ln_p_g, p.ln_p_b);
    let kv = g.matmul(hp, p.w_p);
    let scores = g.matmul_t(q, kv);
    let scores = g.scale(scores, 1.0 / (latent as f64).sqrt());
    let attn = g.softmax_rows(scores);
    let mixed = g.matmul(attn, kv);
    let delta = g.linear(mixed, p.w_o, p.b_o);
    g.add(prev, delta)
}

/// `P⁰ = H_R⁰`; the rPPG token grid must match the facial token grid.
pub fn mcp_init(rppg_tokens: &Matrix, facial_shape: (usize, usize)) -> Result<PromptState> {
    if rppg_tokens.shape() != facial_shape {
        return Err(ScptError::shape(format!(
            "rPPG tokens {:?} vs facial tokens {:?}",
            rppg_tokens.shape(),
            facial_shape
        )));
    }
    Ok(PromptState { prompt: rppg_tokens.clone(), layer_index: 0 })
}

pub fn mcp_generate(facial_tokens: &Matrix, prev: &PromptState, params: &McpLayer<Matrix>, layer: usize) -> Result<PromptState> {
    if layer == 0 || prev.layer_index != layer - 1 {
        return Err(ScptError::InvalidArgument(format!(
            "prompt state is at layer {}, cannot generate layer {layer}",
            prev.layer_index
        )));
    }
    let (n, d) = facial_tokens.shape();
    if prev.prompt.shape() != (n, d) || params.w_f.rows() != d || params.w_o.cols() != d {
        return Err(ScptError::shape(format!(
            "facial {:?}, prompt {:?}, w_f {:?}",
            facial_tokens.shape(),
            prev.prompt.shape(),
            params.w_f.shape()
        )));
    }
    let mut g = Graph::new();
    let vars = params.map(|m| g.param(m, false));
    let f = g.constant(facial_tokens.clone());
    let p = g.constant(prev.prompt.clone());
    let out = mcp_generate_graph(&mut g, f, p, &vars);
    let prompt = g.value(out).clone();
    if !prompt.is_finite() {
        return Err(ScptError::NonFinite("mcp_generate"));
    }
    Ok(PromptState { prompt, layer_index: layer })
}

/// `(H^{l-1})' = H^{l-1} + P^l` on patch rows; the class row is left alone.
pub fn inject(h: &TokenSequence, p: &PromptState) -> Result<TokenSequence> {
    if h.tokens.shape() != p.prompt.shape() {
        return Err(ScptError::shape(format!("tokens {:?} vs prompt {:?}", h.tokens.shape(), p.prompt.shape())));
    }
    Ok(TokenSequence { class_token: h.class_token.clone(), tokens: h.tokens.add(&p.prompt) })
}

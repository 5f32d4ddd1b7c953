//! Training objective: task cross-entropy, L1 sparsity on the specific
//! corrections, shared/specific orthogonality and subject supervision.
//!
//! `Normalization::Mean` divides each layer's L1 term by `N·D` and each
//! orthogonality term by `N²`; `Sum` uses the raw norms.

use crate::autodiff::{log_sum_exp, Graph, Var};
use crate::error::{Result, ScptError};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    Sum,
    #[default]
    Mean,
}

impl Normalization {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Normalization::Sum),
            "mean" => Some(Normalization::Mean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Sum => "sum",
            Normalization::Mean => "mean",
        }
    }

    fn l1_divisor(self, rows: usize, cols: usize) -> f64 {
        match self {
            Normalization::Sum => 1.0,
            Normalization::Mean => (rows * cols) as f64,
        }
    }

    fn orth_divisor(self, rows: usize) -> f64 {
        match self {
            Normalization::Sum => 1.0,
            Normalization::Mean => (rows * rows) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ScptError::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(LossWeights { lambda1, lambda2, lambda3 })
    }

    pub fn zero() -> Self {
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }
    }

    /// Tuned values for the valence target.
    pub fn valence() -> Self {
        LossWeights { lambda1: 0.2, lambda2: 0.1, lambda3: 0.6 }
    }

    /// Tuned values for the arousal target.
    pub fn arousal() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 0.1, lambda3: 0.6 }
    }
}

/// Raw component values before weighting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub task: f64,
    pub specific: f64,
    pub orth: f64,
    pub sub: f64,
    pub specific_per_layer: Vec<f64>,
    pub orth_per_layer: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub task: f64,
    pub specific: f64,
    pub orth: f64,
    pub sub: f64,
    pub total: f64,
    pub specific_per_layer: Vec<f64>,
    pub orth_per_layer: Vec<f64>,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(ScptError::InvalidLabel { label, classes });
    }
    Ok(())
}

/// `−log softmax(logits)[y]` for a `1×K` row.
pub fn task_loss(logits: &Matrix, y: usize) -> Result<f64> {
    if logits.rows() != 1 || logits.cols() == 0 {
        return Err(ScptError::shape(format!("logits must be a 1×K row, got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(ScptError::NonFinite("logits"));
    }
    check_label(y, logits.cols())?;
    Ok(log_sum_exp(logits.data()) - logits.data()[y])
}

/// `(1/L)·Σ_l ‖Γ_specific^l‖₁`, per-layer normalised.
pub fn specific_sparsity_per_layer(corrections: &[Matrix], norm: Normalization) -> Vec<f64> {
    corrections.iter().map(|m| m.abs_sum() / norm.l1_divisor(m.rows(), m.cols())).collect()
}

pub fn specific_sparsity_loss(corrections: &[Matrix], norm: Normalization) -> f64 {
    mean(&specific_sparsity_per_layer(corrections, norm))
}

pub fn orthogonality_per_layer(shared: &[Matrix], specific: &[Matrix], norm: Normalization) -> Result<Vec<f64>> {
    if shared.len() != specific.len() {
        return Err(ScptError::shape(format!("{} shared vs {} specific layers", shared.len(), specific.len())));
    }
    shared
        .iter()
        .zip(specific)
        .map(|(s, p)| {
            if s.shape() != p.shape() {
                return Err(ScptError::shape(format!("shared {:?} vs specific {:?}", s.shape(), p.shape())));
            }
            Ok(s.matmul_t(p).frobenius_sq() / norm.orth_divisor(s.rows()))
        })
        .collect()
}

/// `(1/L)·Σ_l ‖Γ_shared^l (Γ_specific^l)ᵀ‖_F²`
pub fn orthogonality_loss(shared: &[Matrix], specific: &[Matrix], norm: Normalization) -> Result<f64> {
    Ok(mean(&orthogonality_per_layer(shared, specific, norm)?))
}

/// Cross-entropy of the linear subject head `x·W + b` against `y_sub`.
pub fn subject_loss(specific_cls: &Matrix, weight: &Matrix, bias: &Matrix, y_sub: usize) -> Result<f64> {
    if specific_cls.rows() != 1 || weight.rows() != specific_cls.cols() || bias.shape() != (1, weight.cols()) {
        return Err(ScptError::shape(format!(
            "feature {:?}, head {:?} + {:?}",
            specific_cls.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    check_label(y_sub, weight.cols())?;
    task_loss(&specific_cls.matmul(weight).add(bias), y_sub)
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    let parts = [("task", c.task), ("specific", c.specific), ("orth", c.orth), ("sub", c.sub)];
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(ScptError::NonFinite(name));
        }
        debug_assert!(v >= 0.0, "{name} loss is negative: {v}");
    }
    Ok(LossReport {
        task: c.task,
        specific: c.specific,
        orth: c.orth,
        sub: c.sub,
        total: c.task + w.lambda1 * c.specific + w.lambda2 * c.orth + w.lambda3 * c.sub,
        specific_per_layer: c.specific_per_layer.clone(),
        orth_per_layer: c.orth_per_layer.clone(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-layer normalised L1 nodes; their mean is the sparsity loss.
pub fn sparsity_graph(g: &mut Graph<'_>, corrections: &[Var], norm: Normalization) -> Vec<Var> {
    corrections
        .iter()
        .map(|&c| {
            let (r, k) = g.value(c).shape();
            let s = g.sum_abs(c);
            g.scale(s, 1.0 / norm.l1_divisor(r, k))
        })
        .collect()
}

pub fn orthogonality_graph(g: &mut Graph<'_>, shared: &[Var], specific: &[Var], norm: Normalization) -> Vec<Var> {
    shared
        .iter()
        .zip(specific)
        .map(|(&s, &p)| {
            let rows = g.value(s).rows();
            let prod = g.matmul_t(s, p);
            let f = g.sum_sq(prod);
            g.scale(f, 1.0 / norm.orth_divisor(rows))
        })
        .collect()
}

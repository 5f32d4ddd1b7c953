//! Decoupled shared/specific adapters and the emotion subspace.
//!
//! Each adapted layer adds `s·Γ(X)` to the frozen block's outputs, class row
//! included, with `Γ = Γ_shared + Γ_specific`: a rank-`R` product `X·A·Bᵀ`
//! and a two-layer ReLU MLP. In invariant inference the specific branch is
//! not evaluated.
//!
//! The classifier reads the class feature projected on the leading right
//! singular vectors of the final-layer shared correction. Those vectors are
//! treated as constants by the gradient.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoders::{vit_layer_graph, TokenSequence, VitLayer};
use crate::error::{Result, ScptError};
use crate::linalg::thin_svd;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DssaMode {
    Train,
    InvariantInference,
}

/// Per-layer adapter: shared factors `A, B` (`D×R`) and the specific MLP `D→d_h→D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DssaLayer<T> {
    pub a: T,
    pub b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> DssaLayer<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> DssaLayer<U> {
        DssaLayer { a: f(&self.a), b: f(&self.b), w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

const FIELDS: [&str; 6] = ["shared.a", "shared.b", "specific.w1", "specific.b1", "specific.w2", "specific.b2"];

fn shapes(dim: usize, rank: usize, hidden: usize) -> [(usize, usize); 6] {
    [(dim, rank), (dim, rank), (dim, hidden), (1, hidden), (hidden, dim), (1, dim)]
}

fn assemble(ids: &[ParamId]) -> DssaLayer<ParamId> {
    DssaLayer { a: ids[0], b: ids[1], w1: ids[2], b1: ids[3], w2: ids[4], b2: ids[5] }
}

/// `R < D/2` keeps the shared branch genuinely low rank.
pub fn check_rank(dim: usize, rank: usize) -> Result<()> {
    if rank == 0 || 2 * rank >= dim {
        return Err(ScptError::InvalidArgument(format!("adapter rank {rank} must satisfy 1 <= R < D/2 (D = {dim})")));
    }
    Ok(())
}

impl DssaLayer<ParamId> {
    /// `A` Gaussian, `B` zero; MLP first layer He-normal, second layer zero.
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rank: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(dim, rank)?;
        let mut ids = Vec::with_capacity(FIELDS.len());
        for (field, &(r, c)) in FIELDS.iter().zip(&shapes(dim, rank, hidden)) {
            let value = match *field {
                "shared.a" => Matrix::randn(r, c, 1.0 / (r as f64).sqrt(), rng),
                "specific.w1" => Matrix::randn(r, c, (2.0 / r as f64).sqrt(), rng),
                _ => Matrix::zeros(r, c),
            };
            ids.push(store.insert(format!("{prefix}.{field}"), value)?);
        }
        Ok(assemble(&ids))
    }

    pub fn locate(store: &ParamStore, prefix: &str, dim: usize, rank: usize, hidden: usize) -> Result<Self> {
        let ids = FIELDS
            .iter()
            .zip(&shapes(dim, rank, hidden))
            .map(|(field, &(r, c))| store.expect(&format!("{prefix}.{field}"), r, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(&ids))
    }
}

pub fn shared_correction_graph(g: &mut Graph<'_>, x: Var, a: Var, b: Var) -> Var {
    let xa = g.matmul(x, a);
    g.matmul_t(xa, b)
}

pub fn specific_correction_graph(g: &mut Graph<'_>, x: Var, p: &DssaLayer<Var>) -> Var {
    let h = g.linear(x, p.w1, p.b1);
    let h = g.relu(h);
    g.linear(h, p.w2, p.b2)
}

/// `X·A·Bᵀ`
pub fn shared_correction(x: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != x.cols() || b.rows() != x.cols() || a.cols() != b.cols() {
        return Err(ScptError::shape(format!("X {:?}, A {:?}, B {:?}", x.shape(), a.shape(), b.shape())));
    }
    Ok(x.matmul(a).matmul_t(b))
}

/// Row-wise `ReLU(x·W₁ + b₁)·W₂ + b₂`.
pub fn specific_correction(x: &Matrix, p: &DssaLayer<Matrix>) -> Result<Matrix> {
    let d = x.cols();
    let h = p.w1.cols();
    if p.w1.rows() != d || p.b1.shape() != (1, h) || p.w2.shape() != (h, d) || p.b2.shape() != (1, d) {
        return Err(ScptError::shape(format!("MLP weights do not fit width {d}")));
    }
    let mut g = Graph::new();
    let vars = p.map(|m| g.param(m, false));
    let xv = g.constant(x.clone());
    let out = specific_correction_graph(&mut g, xv, &vars);
    Ok(g.value(out).clone())
}

/// Nodes produced by one adapted layer. `shared` and `specific` are the
/// patch-row corrections; the `_cls` fields are their class rows.
pub struct DssaBlockOut {
    pub cls: Var,
    pub patches: Var,
    pub shared: Var,
    pub specific: Option<Var>,
    pub shared_cls: Var,
    pub specific_cls: Option<Var>,
}

/// `X^{l+1} = E^l([x_cls, X] + X_pos) + s·Γ^l([x_cls, X])`
#[allow(clippy::too_many_arguments)]
pub fn dssa_block_graph(
    g: &mut Graph<'_>,
    cls: Var,
    x: Var,
    pos: Option<Var>,
    layer: &VitLayer<Var>,
    heads: usize,
    adapter: &DssaLayer<Var>,
    scale: f64,
    mode: DssaMode,
) -> DssaBlockOut {
    let n = g.value(x).rows();
    let tokens = g.concat_rows(&[cls, x]);
    let seq = match pos {
        Some(p) => g.add(tokens, p),
        None => tokens,
    };
    let e = vit_layer_graph(g, seq, layer, heads).out;
    let shared = shared_correction_graph(g, tokens, adapter.a, adapter.b);
    let (gamma, specific) = match mode {
        DssaMode::Train => {
            let sp = specific_correction_graph(g, tokens, adapter);
            (g.add(shared, sp), Some(sp))
        }
        DssaMode::InvariantInference => (shared, None),
    };
    let scaled = g.scale(gamma, scale);
    let out = g.add(e, scaled);
    DssaBlockOut {
        cls: g.slice_rows(out, 0, 1),
        patches: g.slice_rows(out, 1, n + 1),
        shared: g.slice_rows(shared, 1, n + 1),
        specific: specific.map(|v| g.slice_rows(v, 1, n + 1)),
        shared_cls: g.slice_rows(shared, 0, 1),
        specific_cls: specific.map(|v| g.slice_rows(v, 0, 1)),
    }
}

/// Value-level adapted layer. `x` carries the class row and the (prompted) patch rows.
#[allow(clippy::too_many_arguments)]
pub fn dssa_forward(
    x: &TokenSequence,
    layer: &VitLayer<Matrix>,
    heads: usize,
    pos: Option<&Matrix>,
    adapter: &DssaLayer<Matrix>,
    scale: f64,
    mode: DssaMode,
) -> Result<TokenSequence> {
    let cls = x.class_token.as_ref().ok_or_else(|| ScptError::shape("adapted layer needs a class row"))?;
    let (n, d) = x.tokens.shape();
    if cls.shape() != (1, d) || adapter.a.rows() != d || pos.is_some_and(|p| p.shape() != (n + 1, d)) {
        return Err(ScptError::shape(format!("tokens {:?} do not fit the adapter/positions", x.tokens.shape())));
    }
    if heads == 0 || d % heads != 0 || layer.wq.shape() != (d, d) {
        return Err(ScptError::shape(format!("layer does not fit width {d} with {heads} heads")));
    }
    let mut g = Graph::new();
    let lv = layer.map(|m| g.param(m, false));
    let av = adapter.map(|m| g.param(m, false));
    let c = g.constant(cls.clone());
    let t = g.constant(x.tokens.clone());
    let p = pos.map(|m| g.param(m, false));
    let out = dssa_block_graph(&mut g, c, t, p, &lv, heads, &av, scale, mode);
    Ok(TokenSequence::with_class(g.value(out.cls).clone(), g.value(out.patches).clone()))
}

/// Rank-`S` truncated SVD factors `U_s Σ_s V_sᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SubspaceFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_s Σ_s V_sᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }

    /// Canonical-basis factors with zero spectrum.
    pub fn canonical(rows: usize, cols: usize, rank: usize) -> Self {
        SubspaceFactors {
            u: Matrix::from_fn(rows, rank, |r, c| if r == c { 1.0 } else { 0.0 }),
            sigma: vec![0.0; rank],
            v: Matrix::from_fn(cols, rank, |r, c| if r == c { 1.0 } else { 0.0 }),
        }
    }
}

/// Below this leading singular value the matrix is treated as zero.
pub const SVD_ZERO_THRESHOLD: f64 = 1e-12;

/// Best rank-`S` approximation factors of an `N×D` matrix.
///
/// Each column of `V_s` is signed so its largest-magnitude entry is positive
/// (the paired `U_s` column flips with it). A numerically zero matrix yields
/// a zero spectrum and canonical basis columns.
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<SubspaceFactors> {
    let (rows, cols) = m.shape();
    let max = rows.min(cols);
    if rank == 0 || rank > max {
        return Err(ScptError::RankOutOfRange { rank, max });
    }
    if !m.is_finite() {
        return Err(ScptError::NonFinite("truncated_svd input"));
    }
    let full = thin_svd(m);
    if full.sigma[0] < SVD_ZERO_THRESHOLD {
        return Ok(SubspaceFactors::canonical(rows, cols, rank));
    }
    let mut u = full.u.cols_range(0, rank);
    let mut v = full.v.cols_range(0, rank);
    for c in 0..rank {
        let col = v.col(c);
        let lead = col.iter().cloned().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            for r in 0..cols {
                v[(r, c)] = -v[(r, c)];
            }
            for r in 0..rows {
                u[(r, c)] = -u[(r, c)];
            }
        }
    }
    Ok(SubspaceFactors { u, sigma: full.sigma[..rank].to_vec(), v })
}

/// `cls·V_s`, a `1×S` row.
pub fn emotion_project(cls_feature: &Matrix, f: &SubspaceFactors) -> Result<Matrix> {
    if cls_feature.rows() != 1 || cls_feature.cols() != f.v.rows() {
        return Err(ScptError::shape(format!("class feature {:?} vs V_s {:?}", cls_feature.shape(), f.v.shape())));
    }
    Ok(cls_feature.matmul(&f.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn fresh_adapter(dim: usize, rank: usize, hidden: usize, seed: u64) -> DssaLayer<Matrix> {
        let mut store = ParamStore::new();
        let ids = DssaLayer::init(&mut store, "train.dssa.layer0", dim, rank, hidden, &mut rng(seed)).unwrap();
        ids.map(|&id| store.get(id).clone())
    }

    fn fresh_layer(dim: usize, seed: u64) -> VitLayer<Matrix> {
        let mut store = ParamStore::new();
        let ids = VitLayer::init(&mut store, "frozen.layer0", dim, 2 * dim, &mut rng(seed)).unwrap();
        ids.map(|&id| store.get(id).clone())
    }

    #[test]
    fn shared_correction_examples() {
        let x = Matrix::randn(4, 8, 1.0, &mut rng(1));
        let a = Matrix::randn(8, 2, 1.0, &mut rng(2));
        assert!(shared_correction(&x, &a, &Matrix::zeros(8, 2)).unwrap().data().iter().all(|&v| v == 0.0));

        let d = 3;
        let e = |i: usize| Matrix::from_fn(d, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let out = shared_correction(&Matrix::identity(d), &e(0), &e(1)).unwrap();
        assert_eq!(out, Matrix::from_fn(d, d, |r, c| if (r, c) == (0, 1) { 1.0 } else { 0.0 }));
        assert!(shared_correction(&x, &Matrix::zeros(7, 2), &Matrix::zeros(8, 2)).is_err());
    }

    #[test]
    fn shared_correction_rank_bound() {
        let mut r = rng(3);
        let x = Matrix::randn(16, 12, 1.0, &mut r);
        let a = Matrix::randn(12, 3, 1.0, &mut r);
        let b = Matrix::randn(12, 3, 1.0, &mut r);
        let s = thin_svd(&shared_correction(&x, &a, &b).unwrap());
        assert!(s.sigma[3] < 1e-10 * s.sigma[0]);
    }

    #[test]
    fn specific_correction_examples() {
        let x = Matrix::randn(5, 8, 1.0, &mut rng(4));
        let init = fresh_adapter(8, 2, 2, 5);
        let out = specific_correction(&x, &init).unwrap();
        assert_eq!(out.shape(), (5, 8));
        assert!(out.data().iter().all(|&v| v == 0.0));

        // d_h = 1, D = 2, single token.
        let m = |rows: &[&[f64]]| Matrix::from_rows(rows);
        let p = DssaLayer {
            a: Matrix::zeros(2, 1),
            b: Matrix::zeros(2, 1),
            w1: m(&[&[0.5], &[-1.0]]),
            b1: m(&[&[0.25]]),
            w2: m(&[&[2.0, -3.0]]),
            b2: m(&[&[0.1, 0.0]]),
        };
        let out = specific_correction(&m(&[&[2.0, 0.5]]), &p).unwrap();
        let h = (0.5f64 * 2.0 - 0.5 + 0.25).max(0.0);
        assert!((out[(0, 0)] - (2.0 * h + 0.1)).abs() < 1e-15);
        assert!((out[(0, 1)] - (-3.0 * h)).abs() < 1e-15);
    }

    #[test]
    fn rank_constraint_enforced() {
        let mut store = ParamStore::new();
        assert!(DssaLayer::init(&mut store, "train.x", 8, 4, 2, &mut rng(0)).is_err());
        assert!(DssaLayer::init(&mut store, "train.y", 8, 3, 2, &mut rng(0)).is_ok());
    }

    fn sample_input(seed: u64) -> TokenSequence {
        let mut r = rng(seed);
        TokenSequence::with_class(Matrix::randn(1, 8, 1.0, &mut r), Matrix::randn(4, 8, 1.0, &mut r))
    }

    fn trained_adapter(seed: u64) -> DssaLayer<Matrix> {
        let mut r = rng(seed);
        DssaLayer {
            a: Matrix::randn(8, 2, 0.5, &mut r),
            b: Matrix::randn(8, 2, 0.5, &mut r),
            w1: Matrix::randn(8, 2, 0.5, &mut r),
            b1: Matrix::randn(1, 2, 0.5, &mut r),
            w2: Matrix::randn(2, 8, 0.5, &mut r),
            b2: Matrix::randn(1, 8, 0.5, &mut r),
        }
    }

    #[test]
    fn zero_scale_and_init_match_plain_layer() {
        let layer = fresh_layer(8, 11);
        let x = sample_input(12);
        let (plain, _) = crate::encoders::vit_layer_forward(&x, &layer, 2).unwrap();
        let trained = trained_adapter(13);
        let s0 = dssa_forward(&x, &layer, 2, None, &trained, 0.0, DssaMode::Train).unwrap();
        assert_eq!(s0, plain);
        let init = fresh_adapter(8, 2, 2, 14);
        for scale in [0.1, 1.0, 7.5] {
            assert_eq!(dssa_forward(&x, &layer, 2, None, &init, scale, DssaMode::Train).unwrap(), plain);
        }
    }

    #[test]
    fn modes_differ_by_scaled_specific_branch() {
        let layer = fresh_layer(8, 21);
        let x = sample_input(22);
        let adapter = trained_adapter(23);
        let s = 0.1;
        let train = dssa_forward(&x, &layer, 2, None, &adapter, s, DssaMode::Train).unwrap();
        let inv = dssa_forward(&x, &layer, 2, None, &adapter, s, DssaMode::InvariantInference).unwrap();
        let spec = specific_correction(&x.tokens, &adapter).unwrap().scale(s);
        assert!(train.tokens.sub(&inv.tokens).max_abs_diff(&spec) < 1e-12);
        let cls = x.class_token.as_ref().unwrap();
        let spec_cls = specific_correction(cls, &adapter).unwrap().scale(s);
        let (tc, ic) = (train.class_token.unwrap(), inv.class_token.unwrap());
        assert!(tc.sub(&ic).max_abs_diff(&spec_cls) < 1e-12);
    }

    #[test]
    fn invariant_mode_ignores_specific_weights() {
        let layer = fresh_layer(8, 31);
        let x = sample_input(32);
        let adapter = trained_adapter(33);
        let mut perturbed = adapter.clone();
        perturbed.w1 = perturbed.w1.add(&Matrix::randn(8, 2, 1.0, &mut rng(34)));
        perturbed.w2 = perturbed.w2.add(&Matrix::randn(2, 8, 1.0, &mut rng(35)));
        let a = dssa_forward(&x, &layer, 2, None, &adapter, 0.1, DssaMode::InvariantInference).unwrap();
        let b = dssa_forward(&x, &layer, 2, None, &perturbed, 0.1, DssaMode::InvariantInference).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svd_diag_example() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let f = truncated_svd(&m, 1).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-14);
        assert!(f.v.max_abs_diff(&Matrix::from_rows(&[&[1.0], &[0.0]])) < 1e-14);
    }

    #[test]
    fn svd_identity_and_zero() {
        for s in 1..=4 {
            let f = truncated_svd(&Matrix::identity(4), s).unwrap();
            assert!(f.sigma.iter().all(|&x| (x - 1.0).abs() < 1e-14));
            assert!(f.v.t_matmul(&f.v).max_abs_diff(&Matrix::identity(s)) < 1e-14);
        }
        let z = truncated_svd(&Matrix::zeros(3, 5), 2).unwrap();
        assert_eq!(z, SubspaceFactors::canonical(3, 5, 2));
        assert!(matches!(truncated_svd(&Matrix::zeros(3, 5), 4), Err(ScptError::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&Matrix::zeros(3, 5), 0), Err(ScptError::RankOutOfRange { .. })));
    }

    #[test]
    fn svd_sign_convention() {
        let m = Matrix::randn(6, 5, 1.0, &mut rng(41));
        let f = truncated_svd(&m, 5).unwrap();
        for c in 0..5 {
            let col = f.v.col(c);
            let lead = col.iter().cloned().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(lead > 0.0);
        }
        assert!(f.reconstruct().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn column_swap_permutes_v_rows() {
        let m = Matrix::randn(8, 6, 1.0, &mut rng(42));
        let swapped = Matrix::from_fn(8, 6, |r, c| match c {
            1 => m[(r, 4)],
            4 => m[(r, 1)],
            _ => m[(r, c)],
        });
        let (a, b) = (truncated_svd(&m, 3).unwrap(), truncated_svd(&swapped, 3).unwrap());
        for k in 0..3 {
            assert!((a.sigma[k] - b.sigma[k]).abs() < 1e-12);
            for r in 0..6 {
                let r2 = match r {
                    1 => 4,
                    4 => 1,
                    _ => r,
                };
                assert!((a.v[(r, k)] - b.v[(r2, k)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cls = Matrix::from_rows(&[&[1.0, -2.0, 3.0, 4.0]]);
        let canon = SubspaceFactors::canonical(3, 4, 2);
        assert_eq!(emotion_project(&cls, &canon).unwrap(), Matrix::from_rows(&[&[1.0, -2.0]]));
        assert!(emotion_project(&Matrix::zeros(1, 4), &canon).unwrap().data().iter().all(|&v| v == 0.0));

        let m = Matrix::randn(5, 4, 1.0, &mut rng(43));
        let f = truncated_svd(&m, 2).unwrap();
        let p = emotion_project(&cls, &f).unwrap();
        for k in 0..2 {
            let direct: f64 = (0..4).map(|i| cls[(0, i)] * f.v[(i, k)]).sum();
            assert!((p[(0, k)] - direct).abs() < 1e-14);
        }
        assert!(emotion_project(&Matrix::zeros(1, 3), &f).is_err());
    }

    proptest! {
        #[test]
        fn eckart_young_monotone(seed in 0u64..500) {
            let m = Matrix::randn(8, 16, 1.0, &mut rng(seed));
            let mut prev = f64::INFINITY;
            for s in 1..=8 {
                let f = truncated_svd(&m, s).unwrap();
                let err = m.sub(&f.reconstruct()).frobenius();
                prop_assert!(err <= prev + 1e-12);
                prop_assert!(f.v.t_matmul(&f.v).max_abs_diff(&Matrix::identity(s)) < 1e-10);
                prop_assert!(f.u.t_matmul(&f.u).max_abs_diff(&Matrix::identity(s)) < 1e-10);
                prev = err;
            }
            prop_assert!(prev < 1e-6);
        }
    }
}

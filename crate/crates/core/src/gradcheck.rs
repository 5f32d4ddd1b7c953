//! Finite-difference check of the analytic gradients of the total loss.
//!
//! The model is moved away from its zero-initialised branches first, so every
//! term of the objective has a non-trivial gradient. Finite differences reuse
//! the emotion subspaces of the base point, which is exactly the function the
//! stop-gradient backward pass differentiates. Entries whose perturbation
//! crosses a ReLU or L1 kink are not comparable and are resampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dssa::DssaMode;
use crate::error::{Result, ScptError};
use crate::losses::{LossWeights, Normalization};
use crate::model::{ClipInput, ForwardOptions, ModelConfig, ScptModel, Targets};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub max_entries: usize,
    /// Std of the noise added to every trainable tensor before checking.
    pub perturb: f64,
    pub weights: LossWeights,
    pub norm: Normalization,
    pub subjects: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            step: 1e-4,
            floor: 1e-6,
            max_entries: 64,
            perturb: 0.1,
            weights: LossWeights::valence(),
            norm: Normalization::Mean,
            subjects: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.tensors.iter().all(|t| t.checked > 0)
    }
}

/// Random clip and TFR for `config`.
pub fn random_input(config: &ModelConfig, rng: &mut impl Rng) -> ClipInput {
    let n = config.num_patches();
    let patches = (0..config.frames_per_clip)
        .map(|_| Matrix::from_fn(n, config.patch_len(), |_, _| rng.random::<f64>()))
        .collect();
    let tfr = Matrix::from_fn(config.tfr_size, config.tfr_size, |_, _| rng.random::<f64>());
    ClipInput { patches, tfr: config.use_mcp.then_some(tfr) }
}

pub fn gradcheck(config: &ModelConfig, gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut model = ScptModel::init(config, gc.subjects, gc.seed ^ 0x5eed, gc.seed)?;
    for id in model.store.trainable_ids() {
        let m = model.store.get_mut(id);
        let noise = Matrix::randn(m.rows(), m.cols(), gc.perturb, &mut rng);
        m.add_assign(&noise);
    }
    let input = random_input(config, &mut rng);
    let targets = Targets { label: rng.random_range(0..config.classes), subject: Some(rng.random_range(0..gc.subjects)) };
    let base_opts = ForwardOptions {
        mode: DssaMode::Train,
        track: true,
        subspaces: None,
        targets: Some(targets),
        weights: gc.weights,
        norm: gc.norm,
        record_kinks: true,
    };
    let base = model.forward(&input, &base_opts)?;
    let loss = base.report.as_ref().map(|r| r.total).unwrap_or(f64::NAN);
    let fixed = base.subspaces.clone();
    let probe_opts = ForwardOptions {
        track: false,
        subspaces: if fixed.is_empty() { None } else { Some(&fixed) },
        ..base_opts.clone()
    };

    let mut tensors = Vec::new();
    let h = gc.step;
    for id in model.store.trainable_ids() {
        let analytic = base.grads[id.index()].clone().ok_or(ScptError::NonFinite("missing gradient"))?;
        let len = analytic.len();
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut check = TensorCheck {
            name: model.store.entry(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &k in &order {
            if check.checked == gc.max_entries {
                break;
            }
            let orig = model.store.get(id).data()[k];
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (slot, offset) in [2.0, 1.0, -1.0, -2.0].iter().enumerate() {
                model.store.get_mut(id).data_mut()[k] = orig + offset * h;
                let out = model.forward(&input, &probe_opts)?;
                smooth &= out.kink_pattern == base.kink_pattern;
                values[slot] = out.report.map(|r| r.total).unwrap_or(f64::NAN);
            }
            model.store.get_mut(id).data_mut()[k] = orig;
            if !smooth {
                check.skipped += 1;
                continue;
            }
            // Fourth-order central difference.
            let numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * h);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(gc.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { tensors, max_rel_err, loss })
}

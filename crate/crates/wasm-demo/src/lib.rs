//! Browser bindings for a few core operations.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use scpt_core::analysis::cumulative_explained_variance;
use scpt_core::linalg::thin_svd;
use scpt_core::signal_tfr::{Morse, TfrPipeline, Waveform};
use scpt_core::Matrix;

const SAMPLE_RATE_HZ: f64 = 128.0;

fn js_err(e: scpt_core::ScptError) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major image with its axes.
#[wasm_bindgen]
pub struct Scalogram {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    ridge_hz: f64,
}

#[wasm_bindgen]
impl Scalogram {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Values in `[0, 1]`, lowest frequency first.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ridge_hz(&self) -> f64 {
        self.ridge_hz
    }
}

/// Scalogram of a noisy pulse-like tone whose rate glides from `f_start_hz` to `f_end_hz`.
#[wasm_bindgen]
pub fn scalogram(f_start_hz: f64, f_end_hz: f64, noise: f64, seconds: f64, size: usize, seed: u64) -> Result<Scalogram, JsError> {
    let n = (seconds * SAMPLE_RATE_HZ).round() as usize;
    let jitter = Matrix::randn(1, n.max(1), noise.max(0.0), &mut ChaCha8Rng::seed_from_u64(seed));
    let mut phase = 0.0;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let f = f_start_hz + (f_end_hz - f_start_hz) * i as f64 / n as f64;
            phase += 2.0 * PI * f / SAMPLE_RATE_HZ;
            phase.sin() + jitter[(0, i)]
        })
        .collect();
    let wave = Waveform::new(samples, SAMPLE_RATE_HZ).map_err(js_err)?;
    let pipeline = TfrPipeline { out_rows: size, out_cols: size, ..TfrPipeline::default() };
    let img = pipeline.run(&wave).map_err(js_err)?;
    Ok(Scalogram { rows: img.rows(), cols: img.cols(), ridge_hz: img.ridge_frequency(), values: img.values.data().to_vec() })
}

/// Frequency-domain Morse window sampled at `points` values of ω in `(0, omega_max]`.
#[wasm_bindgen]
pub fn morse_window(gamma: f64, beta: f64, omega_max: f64, points: usize) -> Vec<f64> {
    let m = Morse { gamma, beta };
    (1..=points).map(|i| m.window(omega_max * i as f64 / points as f64)).collect()
}

/// Peak radian frequency of the Morse window.
#[wasm_bindgen]
pub fn morse_peak(gamma: f64, beta: f64) -> f64 {
    Morse { gamma, beta }.peak_frequency()
}

/// Singular values followed by cumulative explained variance for a random
/// `rows × cols` matrix of rank `rank` plus Gaussian noise.
#[wasm_bindgen]
pub fn subspace_spectrum(rows: usize, cols: usize, rank: usize, noise: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if rows == 0 || cols == 0 {
        return Err(JsError::new("matrix must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = Matrix::randn(rows, rank.max(1), 1.0, &mut rng);
    let right = Matrix::randn(rank.max(1), cols, 1.0, &mut rng);
    let mut m = if rank == 0 { Matrix::zeros(rows, cols) } else { left.matmul(&right) };
    m.add_assign(&Matrix::randn(rows, cols, noise.max(0.0), &mut rng));
    let sigma = thin_svd(&m).sigma;
    let cev = cumulative_explained_variance(&sigma).map_err(js_err)?;
    Ok(sigma.into_iter().chain(cev).collect())
}

//! Pulse waveform → time–frequency image.
//!
//! The scalogram is computed with an analytic Morse wavelet applied in the
//! frequency domain, then cropped to the cardiac band, resized for the
//! physiological encoder and min–max normalised.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, ScptError};
use crate::tensor::Matrix;

/// Lowest centre frequency of the logarithmic scale grid.
pub const MIN_FREQ_HZ: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(ScptError::InvalidArgument(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(ScptError::NonFiniteInput);
        }
        if samples.len() < 2 {
            return Err(ScptError::TooShort(samples.len()));
        }
        Ok(Waveform { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn scaled(&self, k: f64) -> Waveform {
        Waveform { samples: self.samples.iter().map(|s| s * k).collect(), sample_rate_hz: self.sample_rate_hz }
    }

    /// Sub-range `[start, end)` of samples.
    pub fn slice(&self, start: usize, end: usize) -> Result<Waveform> {
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate_hz)
    }
}

/// Magnitude grid, one row per centre frequency (ascending), one column per sample time.
#[derive(Clone, Debug, PartialEq)]
pub struct TfrImage {
    pub values: Matrix,
    pub freq_axis_hz: Vec<f64>,
    pub time_axis_s: Vec<f64>,
}

impl TfrImage {
    pub fn new(values: Matrix, freq_axis_hz: Vec<f64>, time_axis_s: Vec<f64>) -> Result<Self> {
        if values.rows() != freq_axis_hz.len() || values.cols() != time_axis_s.len() {
            return Err(ScptError::shape(format!(
                "TFR values {:?} vs axes ({}, {})",
                values.shape(),
                freq_axis_hz.len(),
                time_axis_s.len()
            )));
        }
        if !values.is_finite() || values.data().iter().any(|&v| v < 0.0) {
            return Err(ScptError::NonFiniteInput);
        }
        Ok(TfrImage { values, freq_axis_hz, time_axis_s })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// Mean magnitude of each row over time.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows()).map(|r| self.values.row(r).iter().sum::<f64>() / self.cols() as f64).collect()
    }

    /// Centre frequency of the row with the largest time-averaged magnitude.
    pub fn ridge_frequency(&self) -> f64 {
        let means = self.row_means();
        let (best, _) = means
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
        self.freq_axis_hz[best]
    }
}

/// Analytic Morse wavelet parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Morse {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for Morse {
    fn default() -> Self {
        Morse { gamma: 3.0, beta: 20.0 }
    }
}

impl Morse {
    /// Radian frequency at which the window peaks.
    pub fn peak_frequency(&self) -> f64 {
        (self.beta / self.gamma).powf(1.0 / self.gamma)
    }

    /// Frequency-domain window `a·ω^β·exp(−ω^γ)`, peak-normalised to 1 and zero for `ω ≤ 0`.
    pub fn window(&self, omega: f64) -> f64 {
        if omega <= 0.0 {
            return 0.0;
        }
        let log_norm = (self.beta / self.gamma) * (1.0 + self.gamma.ln() - self.beta.ln());
        (log_norm + self.beta * omega.ln() - omega.powf(self.gamma)).exp()
    }
}

/// Log-spaced centre frequencies from [`MIN_FREQ_HZ`] up to (excluding) Nyquist.
pub fn log_frequency_grid(sample_rate_hz: f64, voices_per_octave: usize) -> Vec<f64> {
    let nyquist = sample_rate_hz / 2.0;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let f = MIN_FREQ_HZ * 2f64.powf(k as f64 / voices_per_octave as f64);
        if f >= nyquist {
            break;
        }
        out.push(f);
        k += 1;
    }
    out
}

/// Continuous wavelet transform magnitude with an analytic Morse wavelet.
pub fn morse_cwt(w: &Waveform, gamma: f64, beta: f64, voices_per_octave: usize) -> Result<TfrImage> {
    if !(gamma > 0.0 && beta > 0.0) || voices_per_octave == 0 {
        return Err(ScptError::InvalidArgument(format!(
            "morse parameters gamma={gamma}, beta={beta}, voices={voices_per_octave}"
        )));
    }
    let morse = Morse { gamma, beta };
    let n = w.samples.len();
    let nfft = n.next_power_of_two();
    let fs = w.sample_rate_hz;
    let freqs = log_frequency_grid(fs, voices_per_octave);
    if freqs.is_empty() {
        return Err(ScptError::InvalidArgument(format!("sample rate {fs} Hz leaves no frequencies above {MIN_FREQ_HZ} Hz")));
    }

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);

    let mut spectrum: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    spectrum.resize(nfft, Complex::new(0.0, 0.0));
    fwd.process(&mut spectrum);

    let omega_peak = morse.peak_frequency();
    let mut values = Matrix::zeros(freqs.len(), n);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for (row, &f) in freqs.iter().enumerate() {
        let scale = omega_peak / (2.0 * PI * f / fs);
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k <= nfft / 2 {
                let omega = 2.0 * PI * k as f64 / nfft as f64;
                spectrum[k] * morse.window(scale * omega)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        inv.process(&mut buf);
        let out = values.row_mut(row);
        for (o, b) in out.iter_mut().zip(&buf[..n]) {
            *o = b.norm() / nfft as f64;
        }
    }
    let time_axis = (0..n).map(|j| j as f64 / fs).collect();
    TfrImage::new(values, freqs, time_axis)
}

/// Keeps rows whose centre frequency lies in `[f_lo_hz, f_hi_hz]`.
pub fn band_crop(t: &TfrImage, f_lo_hz: f64, f_hi_hz: f64) -> Result<TfrImage> {
    if f_lo_hz.partial_cmp(&f_hi_hz) != Some(std::cmp::Ordering::Less) {
        return Err(ScptError::InvalidArgument(format!("band [{f_lo_hz}, {f_hi_hz}] is empty")));
    }
    let keep: Vec<usize> =
        (0..t.rows()).filter(|&r| t.freq_axis_hz[r] >= f_lo_hz && t.freq_axis_hz[r] <= f_hi_hz).collect();
    if keep.is_empty() {
        return Err(ScptError::EmptyBand { lo: f_lo_hz, hi: f_hi_hz });
    }
    let rows: Vec<Matrix> = keep.iter().map(|&r| t.values.rows_range(r, r + 1)).collect();
    let refs: Vec<&Matrix> = rows.iter().collect();
    Ok(TfrImage {
        values: Matrix::vstack(&refs),
        freq_axis_hz: keep.iter().map(|&r| t.freq_axis_hz[r]).collect(),
        time_axis_s: t.time_axis_s.clone(),
    })
}

/// Source coordinate for an output index under the half-pixel (align-corners = false) convention.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

fn clamped_taps(x: f64, in_len: usize) -> (usize, usize, f64) {
    let x = x.clamp(0.0, (in_len - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, x - i0 as f64)
}

/// Axis values are interpolated without clamping so that upsampled axes stay strictly monotone.
fn resample_axis(axis: &[f64], out_len: usize) -> Vec<f64> {
    let n = axis.len();
    if n == 1 {
        return vec![axis[0]; out_len];
    }
    (0..out_len)
        .map(|d| {
            let x = source_coord(d, n, out_len);
            let i0 = (x.floor().max(0.0) as usize).min(n - 2);
            let frac = x - i0 as f64;
            axis[i0] + frac * (axis[i0 + 1] - axis[i0])
        })
        .collect()
}

pub fn resize_bilinear(t: &TfrImage, out_rows: usize, out_cols: usize) -> Result<TfrImage> {
    if out_rows == 0 || out_cols == 0 {
        return Err(ScptError::InvalidArgument(format!("resize target {out_rows}x{out_cols}")));
    }
    let (in_r, in_c) = t.values.shape();
    if (in_r, in_c) == (out_rows, out_cols) {
        return Ok(t.clone());
    }
    let col_taps: Vec<_> = (0..out_cols).map(|c| clamped_taps(source_coord(c, in_c, out_cols), in_c)).collect();
    let mut values = Matrix::zeros(out_rows, out_cols);
    for r in 0..out_rows {
        let (r0, r1, fr) = clamped_taps(source_coord(r, in_r, out_rows), in_r);
        let (top, bottom) = (t.values.row(r0), t.values.row(r1));
        for (c, &(c0, c1, fc)) in col_taps.iter().enumerate() {
            let upper = top[c0] + fc * (top[c1] - top[c0]);
            let lower = bottom[c0] + fc * (bottom[c1] - bottom[c0]);
            values[(r, c)] = upper + fr * (lower - upper);
        }
    }
    Ok(TfrImage {
        values,
        freq_axis_hz: resample_axis(&t.freq_axis_hz, out_rows),
        time_axis_s: resample_axis(&t.time_axis_s, out_cols),
    })
}

/// Per-image min–max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize_tfr(t: &TfrImage) -> TfrImage {
    let (lo, hi) = t
        .values
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if hi > lo {
        let span = hi - lo;
        t.values.map(|v| (v - lo) / span)
    } else {
        Matrix::zeros(t.rows(), t.cols())
    };
    TfrImage { values, freq_axis_hz: t.freq_axis_hz.clone(), time_axis_s: t.time_axis_s.clone() }
}

/// The full waveform-to-encoder-input chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TfrPipeline {
    pub morse: Morse,
    pub voices_per_octave: usize,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl Default for TfrPipeline {
    fn default() -> Self {
        TfrPipeline {
            morse: Morse::default(),
            voices_per_octave: 16,
            f_lo_hz: MIN_FREQ_HZ,
            f_hi_hz: 5.0,
            out_rows: 224,
            out_cols: 224,
        }
    }
}

impl TfrPipeline {
    pub fn run(&self, w: &Waveform) -> Result<TfrImage> {
        let raw = morse_cwt(w, self.morse.gamma, self.morse.beta, self.voices_per_octave)?;
        let cropped = band_crop(&raw, self.f_lo_hz, self.f_hi_hz)?;
        let resized = resize_bilinear(&cropped, self.out_rows, self.out_cols)?;
        Ok(normalize_tfr(&resized))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(f: f64, fs: f64, seconds: f64, phase: f64) -> Waveform {
        let n = (fs * seconds) as usize;
        Waveform::new((0..n).map(|i| (2.0 * PI * f * i as f64 / fs + phase).sin()).collect(), fs).unwrap()
    }

    fn tfr_with_axis(freqs: &[f64]) -> TfrImage {
        let values = Matrix::from_fn(freqs.len(), 3, |r, c| (r * 3 + c) as f64);
        TfrImage::new(values, freqs.to_vec(), vec![0.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn waveform_validation() {
        assert!(matches!(Waveform::new(vec![1.0], 10.0), Err(ScptError::TooShort(1))));
        assert!(matches!(Waveform::new(vec![1.0, f64::NAN], 10.0), Err(ScptError::NonFiniteInput)));
        assert!(matches!(Waveform::new(vec![1.0, f64::INFINITY], 10.0), Err(ScptError::NonFiniteInput)));
        assert!(Waveform::new(vec![1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn morse_window_peaks_at_one() {
        let m = Morse::default();
        let wp = m.peak_frequency();
        assert!((m.window(wp) - 1.0).abs() < 1e-12);
        assert!(m.window(wp * 0.99) < 1.0 && m.window(wp * 1.01) < 1.0);
        assert_eq!(m.window(0.0), 0.0);
        assert_eq!(m.window(-1.0), 0.0);
    }

    #[test]
    fn frequency_grid_spans_band() {
        let g = log_frequency_grid(128.0, 16);
        assert_eq!(g[0], MIN_FREQ_HZ);
        assert!(*g.last().unwrap() < 64.0);
        assert!(g.last().unwrap() * 2f64.powf(1.0 / 16.0) >= 64.0 - 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sinusoid_ridge_near_tone() {
        let w = sine(1.2, 128.0, 30.0, 0.3);
        let t = morse_cwt(&w, 3.0, 20.0, 16).unwrap();
        let ridge = t.ridge_frequency();
        assert!((ridge / 1.2).log2().abs() <= 1.0 / 16.0, "ridge {ridge}");
    }

    #[test]
    fn dc_is_rejected_except_edge_leakage() {
        // The analytic window is zero at DC, so a constant only excites the
        // scales through its (zero-padded) edges.
        let fs = 128.0;
        let n = 128 * 30;
        let dc = band_crop(&morse_cwt(&Waveform::new(vec![1.0; n], fs).unwrap(), 3.0, 20.0, 16).unwrap(), MIN_FREQ_HZ, 5.0).unwrap();
        let tone = band_crop(&morse_cwt(&sine(1.2, fs, 30.0, 0.0), 3.0, 20.0, 16).unwrap(), MIN_FREQ_HZ, 5.0).unwrap();
        let dc_peak = dc.row_means().into_iter().fold(0.0, f64::max);
        let tone_peak = tone.row_means().into_iter().fold(0.0, f64::max);
        assert!(dc_peak < 0.25 * tone_peak, "dc {dc_peak} vs tone {tone_peak}");
        let mid = n / 2;
        for (r, &f) in dc.freq_axis_hz.iter().enumerate() {
            if f >= 0.5 {
                assert!(dc.values[(r, mid)] < 1e-3, "row {f} Hz leaks {}", dc.values[(r, mid)]);
            }
        }
    }

    #[test]
    fn zero_waveform_gives_zero_tfr() {
        let w = Waveform::new(vec![0.0; 256], 64.0).unwrap();
        let t = morse_cwt(&w, 3.0, 20.0, 8).unwrap();
        assert!(t.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cwt_rejects_bad_parameters() {
        let w = sine(1.0, 32.0, 2.0, 0.0);
        assert!(morse_cwt(&w, 0.0, 20.0, 16).is_err());
        assert!(morse_cwt(&w, 3.0, -1.0, 16).is_err());
        assert!(morse_cwt(&w, 3.0, 20.0, 0).is_err());
    }

    #[test]
    fn band_crop_selection_rule() {
        let t = tfr_with_axis(&[0.5, 2.0, 4.0, 8.0]);
        let c = band_crop(&t, 0.0, 5.0).unwrap();
        assert_eq!(c.freq_axis_hz, vec![0.5, 2.0, 4.0]);
        assert_eq!(c.values, t.values.rows_range(0, 3));
        assert_eq!(band_crop(&t, 0.5, 8.0).unwrap(), t);
        assert!(matches!(band_crop(&t, 100.0, 200.0), Err(ScptError::EmptyBand { .. })));
        assert!(band_crop(&t, 5.0, 5.0).is_err());
    }

    #[test]
    fn bilinear_hand_value() {
        let t = TfrImage::new(Matrix::from_rows(&[&[0.0, 1.0], &[2.0, 3.0]]), vec![1.0, 2.0], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 3, 3).unwrap();
        assert!((r.values[(1, 1)] - 1.5).abs() < 1e-15);
        assert_eq!(r.values[(0, 0)], 0.0);
        assert_eq!(r.values[(2, 2)], 3.0);
        assert!(r.freq_axis_hz.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let t = tfr_with_axis(&[1.0, 2.0, 3.0]);
        assert_eq!(resize_bilinear(&t, 3, 3).unwrap(), t);
        let c = TfrImage::new(Matrix::filled(3, 5, 0.7), vec![1.0, 2.0, 3.0], (0..5).map(f64::from).collect()).unwrap();
        for &(r, k) in &[(1, 1), (7, 2), (16, 16)] {
            let out = resize_bilinear(&c, r, k).unwrap();
            assert!(out.values.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
            assert_eq!(out.freq_axis_hz.len(), r);
            assert_eq!(out.time_axis_s.len(), k);
        }
        assert!(resize_bilinear(&c, 0, 4).is_err());
    }

    #[test]
    fn normalize_examples() {
        let one = TfrImage::new(Matrix::from_rows(&[&[0.0, 10.0]]), vec![1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(normalize_tfr(&one).values, Matrix::from_rows(&[&[0.0, 1.0]]));
        let t = TfrImage::new(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 5.0]]), vec![1.0, 2.0], vec![0.0, 1.0]).unwrap();
        let n = normalize_tfr(&t);
        assert!(n.values.max_abs_diff(&Matrix::from_rows(&[&[0.0, 0.25], &[0.5, 1.0]])) < 1e-15);
        let c = TfrImage::new(Matrix::filled(2, 2, 4.0), vec![1.0, 2.0], vec![0.0, 1.0]).unwrap();
        assert!(normalize_tfr(&c).values.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn cwt_is_homogeneous(k in 0.01f64..50.0, f in 0.3f64..6.0, seed in 0u64..1000) {
            let phase = seed as f64 * 0.01;
            let w = sine(f, 32.0, 8.0, phase);
            let a = morse_cwt(&w, 3.0, 20.0, 8).unwrap();
            let b = morse_cwt(&w.scaled(k), 3.0, 20.0, 8).unwrap();
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                prop_assert!((x * k - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn normalize_bounds_and_idempotence(vals in proptest::collection::vec(0.0f64..100.0, 6)) {
            let t = TfrImage::new(Matrix::from_vec(2, 3, vals), vec![1.0, 2.0], vec![0.0, 1.0, 2.0]).unwrap();
            let n = normalize_tfr(&t);
            prop_assert!(n.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (lo, hi) = n.values.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if hi > lo {
                prop_assert!(normalize_tfr(&n).values.max_abs_diff(&n.values) <= 1e-12);
            }
        }

        #[test]
        fn nested_crops_compose(a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let t = tfr_with_axis(&[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
            let (inner_lo, inner_hi) = (0.5 + a.min(b), 0.6 + a.max(b));
            let outer = band_crop(&t, 0.25, 4.5).unwrap();
            let nested = band_crop(&outer, inner_lo, inner_hi);
            let direct = band_crop(&t, inner_lo, inner_hi);
            match (nested, direct) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "nested and direct crops disagree"),
            }
        }
    }
}

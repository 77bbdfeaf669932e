//! Real-input FFT/iFFT, complex arithmetic, and the O(L log L) all-lags
//! circular cross-correlation kernel.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries
//! the 1/n factor. The engine is an iterative mixed-radix (Stockham
//! autosort) FFT that supports arbitrary lengths; prime factors fall back
//! to a direct O(p^2) butterfly.

use crate::error::{LiftError, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// A complex number stored as (re, im) f64 pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    /// sqrt(re^2 + im^2)
    pub fn amplitude(self) -> f64 {
        (self.re * self.re + self.im * self.im).sqrt()
    }

    /// atan2(im, re)
    pub fn phase(self) -> f64 {
        self.im.atan2(self.re)
    }

    pub fn scale(self, r: f64) -> Self {
        Self::new(self.re * r, self.im * r)
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, rhs: Complex) -> Complex {
        Complex::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl AddAssign for Complex {
    fn add_assign(&mut self, rhs: Complex) {
        self.re += rhs.re;
        self.im += rhs.im;
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, rhs: Complex) -> Complex {
        Complex::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, rhs: Complex) -> Complex {
        Complex::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}

impl Neg for Complex {
    type Output = Complex;
    fn neg(self) -> Complex {
        Complex::new(-self.re, -self.im)
    }
}

/// Half spectrum of a real signal of length `n`: bins 0..=floor(n/2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    bins: Vec<Complex>,
    n: usize,
}

impl Spectrum {
    /// Builds a spectrum from explicit bins; `bins.len()` must be floor(n/2)+1.
    pub fn from_bins(bins: Vec<Complex>, n: usize) -> Result<Self> {
        if bins.len() != n / 2 + 1 {
            return Err(LiftError::ShapeMismatch(format!(
                "spectrum for length {} needs {} bins, got {}",
                n,
                n / 2 + 1,
                bins.len()
            )));
        }
        Ok(Self { bins, n })
    }

    /// Original signal length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of retained bins, floor(n/2)+1.
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bins(&self) -> &[Complex] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex] {
        &mut self.bins
    }

    pub fn bin(&self, f: usize) -> Complex {
        self.bins[f]
    }
}

fn factorize(mut n: usize) -> Vec<usize> {
    let mut factors = Vec::new();
    let mut d = 2;
    while d * d <= n {
        while n.is_multiple_of(d) {
            factors.push(d);
            n /= d;
        }
        d += 1;
    }
    if n > 1 {
        factors.push(n);
    }
    factors
}

/// In-place-style complex transform. `sign` is -1 for the forward transform
/// and +1 for the (unnormalized) inverse. Stockham autosort: no bit/digit
/// reversal pass is needed.
fn fft_engine(input: &[Complex], sign: f64) -> Vec<Complex> {
    let n = input.len();
    if n <= 1 {
        return input.to_vec();
    }
    let mut a = input.to_vec();
    let mut b = vec![Complex::ZERO; n];
    let mut m = 1usize; // sub-sequences produced so far
    let mut l = n; // remaining sub-transform length
    for p in factorize(n) {
        let lp = l / p;
        // Per-stage twiddle tables: w_l[s] = e^{sign*i*2*pi*s/l}.
        let w_l: Vec<Complex> = (0..l)
            .map(|s| {
                let (sin, cos) = (sign * TAU * s as f64 / l as f64).sin_cos();
                Complex::new(cos, sin)
            })
            .collect();
        let w_p: Vec<Complex> = (0..p).map(|s| w_l[s * lp]).collect();
        for q in 0..p {
            for j in 0..lp {
                let wl = w_l[(j * q) % l];
                for k in 0..m {
                    let mut acc = Complex::ZERO;
                    for r in 0..p {
                        acc += a[k + m * (j + r * lp)] * w_p[(r * q) % p];
                    }
                    b[k + m * q + m * p * j] = wl * acc;
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
        m *= p;
        l = lp;
    }
    a
}

/// Forward complex DFT, unnormalized: X_f = sum_l x_l e^{-i 2 pi f l / n}.
pub(crate) fn fft_complex(x: &[Complex]) -> Vec<Complex> {
    fft_engine(x, -1.0)
}

/// Inverse complex DFT without the 1/n factor.
pub(crate) fn ifft_complex_raw(x: &[Complex]) -> Vec<Complex> {
    fft_engine(x, 1.0)
}

/// Forward transform of a real signal; returns the floor(n/2)+1 half spectrum.
///
/// The DC bin is exactly real and, for even n, so is the Nyquist bin.
pub fn rfft(x: &[f64]) -> Result<Spectrum> {
    let n = x.len();
    if n < 2 {
        return Err(LiftError::InvalidInput(format!(
            "rfft needs length >= 2, got {n}"
        )));
    }
    let input: Vec<Complex> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let full = fft_complex(&input);
    let half = n / 2 + 1;
    let mut bins: Vec<Complex> = full[..half].to_vec();
    bins[0].im = 0.0;
    if n.is_multiple_of(2) {
        bins[half - 1].im = 0.0;
    }
    Ok(Spectrum { bins, n })
}

/// Inverse transform back to a length-n real signal; carries the 1/n factor.
///
/// The missing half of the spectrum is reconstructed by conjugate symmetry;
/// imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft(s: &Spectrum, n: usize) -> Result<Vec<f64>> {
    let half = n / 2 + 1;
    if s.bins.len() != half {
        return Err(LiftError::ShapeMismatch(format!(
            "irfft: spectrum has {} bins but length {} needs {}",
            s.bins.len(),
            n,
            half
        )));
    }
    let mut full = vec![Complex::ZERO; n];
    full[0] = Complex::new(s.bins[0].re, 0.0);
    let interior_end = if n.is_multiple_of(2) { half - 1 } else { half };
    for f in 1..interior_end {
        full[f] = s.bins[f];
        full[n - f] = s.bins[f].conj();
    }
    if n.is_multiple_of(2) {
        full[n / 2] = Complex::new(s.bins[half - 1].re, 0.0);
    }
    let t = ifft_complex_raw(&full);
    let inv_n = 1.0 / n as f64;
    let out: Vec<f64> = t.iter().map(|c| c.re * inv_n).collect();
    #[cfg(debug_assertions)]
    {
        let scale = out.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let residue = t.iter().fold(0.0f64, |m, c| m.max((c.im * inv_n).abs()));
        debug_assert!(
            residue < 1e-9 * scale.max(1.0),
            "imaginary residue {residue} after inverse transform"
        );
    }
    Ok(out)
}

/// Adjoint of `rfft` as a real-linear map R^n -> R^{2*half}:
/// maps a cotangent spectrum back to a length-n real cotangent.
pub fn rfft_adjoint(grad: &Spectrum, n: usize) -> Result<Vec<f64>> {
    let half = n / 2 + 1;
    if grad.bins.len() != half {
        return Err(LiftError::ShapeMismatch(format!(
            "rfft_adjoint: {} bins vs expected {}",
            grad.bins.len(),
            half
        )));
    }
    // Forward clamps DC/Nyquist imaginary parts, so their cotangents are dead.
    let mut padded = vec![Complex::ZERO; n];
    padded[0] = Complex::new(grad.bins[0].re, 0.0);
    let interior_end = if n.is_multiple_of(2) { half - 1 } else { half };
    padded[1..interior_end].copy_from_slice(&grad.bins[1..interior_end]);
    if n.is_multiple_of(2) {
        padded[n / 2] = Complex::new(grad.bins[half - 1].re, 0.0);
    }
    let t = ifft_complex_raw(&padded);
    Ok(t.iter().map(|c| c.re).collect())
}

/// Adjoint of `irfft`: maps a time-domain cotangent to a spectrum cotangent.
pub fn irfft_adjoint(grad: &[f64]) -> Result<Spectrum> {
    let n = grad.len();
    let mut s = rfft(grad)?;
    let inv_n = 1.0 / n as f64;
    let half = s.bins.len();
    let interior_end = if n.is_multiple_of(2) { half - 1 } else { half };
    s.bins[0] = Complex::new(s.bins[0].re * inv_n, 0.0);
    for f in 1..interior_end {
        s.bins[f] = s.bins[f].scale(2.0 * inv_n);
    }
    if n.is_multiple_of(2) {
        s.bins[half - 1] = Complex::new(s.bins[half - 1].re * inv_n, 0.0);
    }
    Ok(s)
}

const XCORR_MEAN_TOL: f64 = 1e-6;
const XCORR_STD_TOL: f64 = 1e-3;

fn check_normalized(x: &[f64], name: &str) -> Result<()> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if mean.abs() > XCORR_MEAN_TOL || (std - 1.0).abs() > XCORR_STD_TOL {
        return Err(LiftError::Precondition(format!(
            "{name} is not normalized (mean {mean:.3e}, std {std:.6})"
        )));
    }
    Ok(())
}

/// Correlation product in the frequency domain. Both spectra must come from
/// length-n signals; the caller owns normalization checks.
pub(crate) fn xcorr_from_spectra(v: &Spectrum, u: &Spectrum, n: usize) -> Result<Vec<f64>> {
    let prod: Vec<Complex> = v
        .bins
        .iter()
        .zip(&u.bins)
        .map(|(a, b)| *a * b.conj())
        .collect();
    let prod = Spectrum { bins: prod, n };
    let mut r = irfft(&prod, n)?;
    let inv_n = 1.0 / n as f64;
    for v in &mut r {
        *v *= inv_n;
    }
    Ok(r)
}

/// Circular cross-correlation at every lag.
///
/// For zero-mean unit-variance inputs, `R[d] = (1/L) * sum_l u[(l-d) mod L] * v[l]`,
/// so |R[d]| <= 1 up to rounding. `v` is the (lagging) target, `u` the candidate
/// leading series.
pub fn cross_correlation_all_lags(v_norm: &[f64], u_norm: &[f64]) -> Result<Vec<f64>> {
    if v_norm.len() != u_norm.len() {
        return Err(LiftError::ShapeMismatch(format!(
            "cross-correlation inputs differ in length: {} vs {}",
            v_norm.len(),
            u_norm.len()
        )));
    }
    check_normalized(v_norm, "v")?;
    check_normalized(u_norm, "u")?;
    let n = v_norm.len();
    let vs = rfft(v_norm)?;
    let us = rfft(u_norm)?;
    xcorr_from_spectra(&vs, &us, n)
}

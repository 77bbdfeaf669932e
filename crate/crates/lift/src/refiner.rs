//! Lead-aware refinement: target-oriented segments, per-channel state
//! estimation, a state-mixture filter factory producing 2K+1 real
//! frequency-domain filters, and the complex-linear frequency mixer that
//! merges target and indicator spectra into refined predictions.

use crate::error::{LiftError, Result};
use crate::lead::LeadSet;
use crate::mat::Mat;
use crate::spectral::{irfft, rfft, Complex, Spectrum};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which lookback the state head sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[derive(Default)]
pub enum StateInput {
    Raw,
    #[default]
    Normalized,
}


/// K x H matrix of shift-aligned, sign-corrected indicator rows for one
/// target channel; invalid lead slots are zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSegment {
    pub rows: Vec<Vec<f64>>,
}

/// Per-channel state probabilities (positive, summing to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct StateProbs {
    pub probs: Vec<f64>,
}

/// The 2K+1 real frequency filters for one channel: K indicator filters,
/// K difference filters, and one filter over the target's own spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub u_filters: Mat,
    pub d_filters: Mat,
    pub v_filter: Vec<f64>,
}

/// All trainable refiner tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerParams {
    /// Intrinsic state logits, C x N.
    pub p0: Mat,
    /// State head, N x L plus bias.
    pub state_w: Mat,
    pub state_b: Vec<f64>,
    /// Per-state filter factory: N matrices of (2K+1)F x K plus biases.
    pub factory_w: Vec<Mat>,
    pub factory_b: Vec<Vec<f64>>,
    /// Complex mixer, F x 3F plus bias, stored as (re, im) real pairs.
    pub mixer_w_re: Mat,
    pub mixer_w_im: Mat,
    pub mixer_b_re: Vec<f64>,
    pub mixer_b_im: Vec<f64>,
}

impl RefinerParams {
    /// Pass-through initialization: the refiner starts as the identity on
    /// preliminary predictions. Factory biases encode r_V = 1 and
    /// r_U = r_Delta = 0; the mixer is [I | 0 | 0] with zero bias; state
    /// weights and intrinsic logits are zero. Factory weights for the
    /// indicator and difference filters are small random to break the
    /// symmetry between states; the rows feeding r_V stay zero so the
    /// identity is exact at initialization.
    pub fn passthrough_init(
        channels: usize,
        lookback: usize,
        horizon: usize,
        k: usize,
        states: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let f = horizon / 2 + 1;
        let filter_rows = (2 * k + 1) * f;
        let factory_w = (0..states)
            .map(|_| {
                Mat::from_fn(filter_rows, k, |row, _| {
                    if row >= 2 * k * f {
                        0.0
                    } else {
                        0.01 * gauss(rng)
                    }
                })
            })
            .collect();
        let factory_b = (0..states)
            .map(|_| {
                (0..filter_rows)
                    .map(|row| if row >= 2 * k * f { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            p0: Mat::zeros(channels, states),
            state_w: Mat::zeros(states, lookback),
            state_b: vec![0.0; states],
            factory_w,
            factory_b,
            mixer_w_re: Mat::from_fn(f, 3 * f, |r, c| if r == c { 1.0 } else { 0.0 }),
            mixer_w_im: Mat::zeros(f, 3 * f),
            mixer_b_re: vec![0.0; f],
            mixer_b_im: vec![0.0; f],
        }
    }

    pub fn states(&self) -> usize {
        self.state_w.rows()
    }

    pub fn freq_bins(&self) -> usize {
        self.mixer_b_re.len()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Builds the target-oriented segment for channel `target`.
///
/// Row k realigns indicator i by its leading step d: for d >= H the row is
/// observed history `x[t+1-d ..= t+H-d]`; for d < H the d observed values
/// `x[t+1-d ..= t]` are concatenated with the backbone's predictions
/// `x_hat[t+1 ..= t+H-d]`. Negatively correlated rows are negated.
pub fn build_segment(
    target: usize,
    lookback_norm: &[Vec<f64>],
    preds_norm: &[Vec<f64>],
    leads: &LeadSet,
) -> Result<TargetSegment> {
    if leads.target != target {
        return Err(LiftError::InvalidInput(format!(
            "lead set is for channel {}, not {}",
            leads.target, target
        )));
    }
    let l = lookback_norm
        .first()
        .map(|r| r.len())
        .ok_or_else(|| LiftError::InvalidInput("empty lookback".into()))?;
    let h = preds_norm
        .first()
        .map(|r| r.len())
        .ok_or_else(|| LiftError::InvalidInput("empty predictions".into()))?;
    if h > l {
        return Err(LiftError::UnsupportedConfiguration(format!(
            "horizon {h} exceeds lookback {l}; the observed prefix of a shifted row must exist"
        )));
    }
    let mut rows = Vec::with_capacity(leads.entries.len());
    for entry in &leads.entries {
        if !entry.valid {
            rows.push(vec![0.0; h]);
            continue;
        }
        let d = entry.step;
        if d == 0 || d > l - 2 {
            return Err(LiftError::InvalidInput(format!(
                "leading step {d} outside [1, {}]",
                l - 2
            )));
        }
        let history = &lookback_norm[entry.indicator];
        let observed = d.min(h);
        let mut row = Vec::with_capacity(h);
        // x[t+1-d] sits at lookback index L-d.
        row.extend_from_slice(&history[l - d..l - d + observed]);
        if d < h {
            row.extend_from_slice(&preds_norm[entry.indicator][..h - d]);
        }
        if entry.sign < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        rows.push(row);
    }
    Ok(TargetSegment { rows })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

pub(crate) fn state_logits(lookback_row: &[f64], channel: usize, params: &RefinerParams) -> Vec<f64> {
    let mut logits = params.state_w.matvec(lookback_row);
    for (n, logit) in logits.iter_mut().enumerate() {
        *logit += params.p0.get(channel, n) + params.state_b[n];
    }
    logits
}

/// softmax(P0[channel] + state_w . lookback_row + state_b)
pub fn estimate_state(
    lookback_row: &[f64],
    channel: usize,
    params: &RefinerParams,
) -> StateProbs {
    StateProbs {
        probs: softmax(&state_logits(lookback_row, channel, params)),
    }
}

/// Flat (2K+1)F filter vector of the state-n head: factory_w[n] . coeffs + b.
pub(crate) fn factory_head(params: &RefinerParams, n: usize, norm_coeffs: &[f64]) -> Vec<f64> {
    let mut head = params.factory_w[n].matvec(norm_coeffs);
    for (v, b) in head.iter_mut().zip(&params.factory_b[n]) {
        *v += b;
    }
    head
}

/// Mixes the per-state factory heads by the state probabilities and splits
/// the flat filter vector into the 2K+1 filters.
pub fn make_filters(
    norm_coeffs: &[f64],
    state: &StateProbs,
    params: &RefinerParams,
) -> FilterBank {
    let k = norm_coeffs.len();
    let f = params.freq_bins();
    let mut flat = vec![0.0; (2 * k + 1) * f];
    for (n, &p) in state.probs.iter().enumerate() {
        for (dst, src) in flat.iter_mut().zip(factory_head(params, n, norm_coeffs)) {
            *dst += p * src;
        }
    }
    split_filters(&flat, k, f)
}

pub(crate) fn split_filters(flat: &[f64], k: usize, f: usize) -> FilterBank {
    FilterBank {
        u_filters: Mat::from_fn(k, f, |r, c| flat[r * f + c]),
        d_filters: Mat::from_fn(k, f, |r, c| flat[(k + r) * f + c]),
        v_filter: flat[2 * k * f..(2 * k + 1) * f].to_vec(),
    }
}

/// Intermediates of one `refine` evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RefineCache {
    pub v: Spectrum,
    pub u: Vec<Spectrum>,
    /// Mixer input [filtered V || sum filtered U || sum filtered Delta].
    pub mix_in: Vec<Complex>,
    /// Mixer output after the DC/Nyquist reality clamp.
    pub z: Vec<Complex>,
}

/// Refines one channel's normalized predictions by filtering and mixing
/// frequency components of its shift-aligned indicators.
pub fn refine(
    preds_norm_row: &[f64],
    segment: &TargetSegment,
    bank: &FilterBank,
    params: &RefinerParams,
) -> Vec<f64> {
    refine_cached(preds_norm_row, segment, bank, params).0
}

pub fn refine_cached(
    preds_norm_row: &[f64],
    segment: &TargetSegment,
    bank: &FilterBank,
    params: &RefinerParams,
) -> (Vec<f64>, RefineCache) {
    let h = preds_norm_row.len();
    let f = h / 2 + 1;
    debug_assert_eq!(f, params.freq_bins());
    let v = rfft(preds_norm_row).expect("horizon length >= 2");
    let u: Vec<Spectrum> = segment
        .rows
        .iter()
        .map(|row| rfft(row).expect("segment rows share the horizon length"))
        .collect();

    let mut mix_in = vec![Complex::ZERO; 3 * f];
    for (i, slot) in mix_in.iter_mut().take(f).enumerate() {
        *slot = v.bin(i).scale(bank.v_filter[i]);
    }
    for (k, uk) in u.iter().enumerate() {
        let ru = bank.u_filters.row(k);
        let rd = bank.d_filters.row(k);
        for i in 0..f {
            let delta = uk.bin(i) - v.bin(i);
            mix_in[f + i] += uk.bin(i).scale(ru[i]);
            mix_in[2 * f + i] += delta.scale(rd[i]);
        }
    }

    let mut z = Vec::with_capacity(f);
    for row in 0..f {
        let wre = params.mixer_w_re.row(row);
        let wim = params.mixer_w_im.row(row);
        let mut acc = Complex::new(params.mixer_b_re[row], params.mixer_b_im[row]);
        for (c, x) in mix_in.iter().enumerate() {
            acc += Complex::new(wre[c], wim[c]) * *x;
        }
        z.push(acc);
    }
    // Reality clamp: the retained bins must extend conjugate-symmetrically.
    z[0].im = 0.0;
    if h.is_multiple_of(2) {
        z[f - 1].im = 0.0;
    }
    let spectrum = Spectrum::from_bins(z.clone(), h).expect("F bins by construction");
    let out = irfft(&spectrum, h).expect("consistent spectrum");
    (out, RefineCache { v, u, mix_in, z })
}

//! Lead estimation: per target channel, find the K leading indicators,
//! their leading steps, correlation signs, and softmax-normalized
//! coefficients. Estimations over a dataset can be precomputed once into an
//! immutable cache.

use crate::data::Dataset;
use crate::error::{LiftError, Result};
use crate::normalize;
use crate::spectral::{rfft, xcorr_from_spectra, Spectrum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const CACHE_FORMAT_VERSION: u32 = 1;

/// Row statistics beyond which a channel counts as degenerate for lead
/// estimation: a properly normalized row has mean 0 and unit std, while a
/// channel floored by the normalization eps does not.
const MEAN_TOL: f64 = 1e-6;
const STD_TOL: f64 = 1e-3;

/// One selected leading indicator for a target channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadEntry {
    /// Indicator channel index.
    pub indicator: usize,
    /// Leading step, in [1, L-2] for valid entries.
    pub step: usize,
    /// |R| at the selected step, unclamped (can exceed 1 by rounding).
    pub raw_abs_corr: f64,
    /// Sign of R at the selected step, +1.0 or -1.0.
    pub sign: f64,
    /// False for padded slots when fewer than K candidates qualify.
    pub valid: bool,
}

impl LeadEntry {
    fn padding() -> Self {
        Self {
            indicator: 0,
            step: 1,
            raw_abs_corr: 0.0,
            sign: 1.0,
            valid: false,
        }
    }
}

/// The K leading indicators of one target channel, sorted by descending
/// `raw_abs_corr`, plus their normalized coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadSet {
    pub target: usize,
    pub entries: Vec<LeadEntry>,
    /// Softmax-normalized coefficients; 0 for invalid slots. The softmax
    /// denominator includes the target's own current-evolution term exp(1).
    pub norm_coeffs: Vec<f64>,
}

impl LeadSet {
    /// Builds a set from candidates already sorted by descending
    /// `raw_abs_corr` (ties broken by ascending indicator index), padding
    /// with invalid slots up to `k`.
    pub fn new(target: usize, mut entries: Vec<LeadEntry>, k: usize) -> Self {
        debug_assert!(entries.len() <= k);
        debug_assert!(entries
            .windows(2)
            .all(|w| w[0].raw_abs_corr >= w[1].raw_abs_corr));
        while entries.len() < k {
            entries.push(LeadEntry::padding());
        }
        let norm_coeffs = softmax_coeffs(&entries);
        Self {
            target,
            entries,
            norm_coeffs,
        }
    }

    pub fn all_invalid(target: usize, k: usize) -> Self {
        Self::new(target, Vec::new(), k)
    }

    pub fn has_valid(&self) -> bool {
        self.entries.iter().any(|e| e.valid)
    }
}

/// Coefficients exp(|R*|) / (exp(1) + sum over valid exp(|R*|)); |R*| is
/// clamped to [0, 1] here, while entries keep the unclamped value.
fn softmax_coeffs(entries: &[LeadEntry]) -> Vec<f64> {
    let denom: f64 = std::f64::consts::E
        + entries
            .iter()
            .filter(|e| e.valid)
            .map(|e| e.raw_abs_corr.clamp(0.0, 1.0).exp())
            .sum::<f64>();
    entries
        .iter()
        .map(|e| {
            if e.valid {
                e.raw_abs_corr.clamp(0.0, 1.0).exp() / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Result of the constrained argmax over an all-lags correlation array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub step: usize,
    pub abs_corr: f64,
    pub sign: f64,
}

/// Peaks whose |R| differ by no more than this are treated as tied, so the
/// smallest step wins. Self-correlations have exactly mirrored peak pairs
/// (|R[d]| = |R[L-d]|) that FFT rounding would otherwise break arbitrarily.
const PEAK_TIE_EPS: f64 = 1e-12;

/// Finds the step in [1, L-2] with maximal |R| subject to the local-peak
/// condition |R[t-1]| < |R[t]| > |R[t+1]|; ties (within 1e-12) break to the
/// smallest step.
///
/// The peak condition guards against boundary aliasing: a true lag beyond
/// L-1 would otherwise masquerade as L-1 through a monotone tail.
pub fn peak_argmax(r: &[f64]) -> Result<Option<Peak>> {
    let l = r.len();
    if l < 3 {
        return Err(LiftError::InvalidInput(format!(
            "peak search needs at least 3 lags, got {l}"
        )));
    }
    let mut best: Option<Peak> = None;
    for t in 1..=l - 2 {
        let (prev, cur, next) = (r[t - 1].abs(), r[t].abs(), r[t + 1].abs());
        if prev < cur && cur > next {
            let better = match &best {
                None => true,
                Some(b) => cur > b.abs_corr + PEAK_TIE_EPS,
            };
            if better {
                best = Some(Peak {
                    step: t,
                    abs_corr: cur,
                    sign: if r[t] >= 0.0 { 1.0 } else { -1.0 },
                });
            }
        }
    }
    Ok(best)
}

fn row_is_degenerate(row: &[f64]) -> bool {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    mean.abs() > MEAN_TOL || (var.sqrt() - 1.0).abs() > STD_TOL
}

/// Estimates the K leading indicators of every channel from a normalized
/// C x L lookback window.
///
/// Channels whose window is degenerate (constant before normalization) are
/// excluded as indicators and receive an all-invalid set as targets. The
/// target's own channel participates as a candidate; the step range [1, L-2]
/// keeps step 0 for the softmax self term.
pub fn estimate_leads(window_norm: &[Vec<f64>], k: usize) -> Result<Vec<LeadSet>> {
    let c = window_norm.len();
    if c == 0 || k == 0 {
        return Err(LiftError::InvalidInput(
            "estimate_leads needs C >= 1 and K >= 1".into(),
        ));
    }
    let l = window_norm[0].len();
    if l < 3 {
        return Err(LiftError::InvalidInput(format!(
            "lookback length {l} too short for lead estimation"
        )));
    }
    if window_norm.iter().any(|row| row.len() != l) {
        return Err(LiftError::ShapeMismatch("ragged lookback window".into()));
    }
    let degenerate: Vec<bool> = window_norm.iter().map(|r| row_is_degenerate(r)).collect();
    let spectra: Vec<Option<Spectrum>> = window_norm
        .iter()
        .zip(&degenerate)
        .map(|(row, &bad)| if bad { None } else { Some(rfft(row).unwrap()) })
        .collect();

    let sets: Result<Vec<LeadSet>> = (0..c)
        .into_par_iter()
        .map(|target| {
            if degenerate[target] {
                return Ok(LeadSet::all_invalid(target, k));
            }
            let v_spec = spectra[target].as_ref().unwrap();
            let mut candidates: Vec<LeadEntry> = Vec::new();
            for (indicator, u_spec) in spectra.iter().enumerate() {
                let Some(u_spec) = u_spec else { continue };
                let r = xcorr_from_spectra(v_spec, u_spec, l)?;
                if let Some(peak) = peak_argmax(&r)? {
                    candidates.push(LeadEntry {
                        indicator,
                        step: peak.step,
                        raw_abs_corr: peak.abs_corr,
                        sign: peak.sign,
                        valid: true,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.raw_abs_corr
                    .partial_cmp(&a.raw_abs_corr)
                    .unwrap()
                    .then(a.indicator.cmp(&b.indicator))
            });
            candidates.truncate(k);
            Ok(LeadSet::new(target, candidates, k))
        })
        .collect();
    sets
}

/// Immutable store of lead estimations keyed by the window start index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadCache {
    pub format_version: u32,
    pub lookback: usize,
    pub k: usize,
    pub stride: usize,
    pub dataset_fingerprint: String,
    pub channels: usize,
    pub count: usize,
    sets: BTreeMap<usize, Vec<LeadSet>>,
}

impl LeadCache {
    pub fn get(&self, start: usize) -> Option<&[LeadSet]> {
        self.sets.get(&start).map(|v| v.as_slice())
    }

    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        self.sets.keys().copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::data::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path, dataset: &Dataset) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cache: LeadCache = serde_json::from_slice(&bytes)?;
        if cache.format_version != CACHE_FORMAT_VERSION {
            return Err(LiftError::StaleCache(format!(
                "cache format {} != {}",
                cache.format_version, CACHE_FORMAT_VERSION
            )));
        }
        if cache.dataset_fingerprint != dataset.fingerprint() {
            return Err(LiftError::StaleCache(format!(
                "cache fingerprint {} does not match dataset {}",
                cache.dataset_fingerprint,
                dataset.fingerprint()
            )));
        }
        Ok(cache)
    }

    /// Human-readable CSV of all valid entries:
    /// t, target, rank, indicator, step, abs_corr, sign, norm_coeff.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,target,rank,indicator,step,abs_corr,sign,norm_coeff")?;
        for (t, sets) in &self.sets {
            for set in sets {
                for (rank, entry) in set.entries.iter().enumerate() {
                    if !entry.valid {
                        continue;
                    }
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        t,
                        set.target,
                        rank + 1,
                        entry.indicator,
                        entry.step,
                        entry.raw_abs_corr,
                        entry.sign as i64,
                        set.norm_coeffs[rank]
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Per-(target, indicator) occurrence counts over all cached windows.
    pub fn pair_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for sets in self.sets.values() {
            for set in sets {
                for entry in set.entries.iter().filter(|e| e.valid) {
                    *counts.entry((set.target, entry.indicator)).or_insert(0) += 1;
                }
            }
        }
        counts
    }
}

/// Precomputes lead estimations for every window start in `range` at the
/// given stride. Windows are normalized per channel before estimation.
pub fn precompute_leads(
    dataset: &Dataset,
    range: std::ops::Range<usize>,
    lookback: usize,
    k: usize,
    stride: usize,
) -> Result<LeadCache> {
    if stride == 0 {
        return Err(LiftError::InvalidInput("stride must be >= 1".into()));
    }
    if range.end > dataset.len() || range.len() < lookback {
        return Err(LiftError::InvalidInput(format!(
            "range {:?} cannot hold a lookback of {} in a dataset of length {}",
            range,
            lookback,
            dataset.len()
        )));
    }
    let starts: Vec<usize> = (range.start..=range.end - lookback).step_by(stride).collect();
    let per_start: Result<Vec<(usize, Vec<LeadSet>)>> = starts
        .par_iter()
        .map(|&start| {
            let window = dataset.window(start, lookback);
            let stats = normalize::fit(&window)?;
            let norm = normalize::apply(&window, &stats)?;
            Ok((start, estimate_leads(&norm, k)?))
        })
        .collect();
    let sets: BTreeMap<usize, Vec<LeadSet>> = per_start?.into_iter().collect();
    Ok(LeadCache {
        format_version: CACHE_FORMAT_VERSION,
        lookback,
        k,
        stride,
        dataset_fingerprint: dataset.fingerprint().to_string(),
        channels: dataset.channels(),
        count: sets.len(),
        sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalize_row(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        x.iter().map(|v| (v - mean) / std).collect()
    }

    /// Exhaustive-scan oracle for the constrained argmax.
    fn peak_oracle(r: &[f64]) -> Option<Peak> {
        let mut best: Option<Peak> = None;
        for t in 1..r.len() - 1 {
            if r[t - 1].abs() < r[t].abs() && r[t].abs() > r[t + 1].abs() {
                let cand = Peak {
                    step: t,
                    abs_corr: r[t].abs(),
                    sign: if r[t] >= 0.0 { 1.0 } else { -1.0 },
                };
                best = match best {
                    None => Some(cand),
                    Some(b) if cand.abs_corr > b.abs_corr => Some(cand),
                    Some(b) => Some(b),
                };
            }
        }
        best
    }

    #[test]
    fn unique_interior_peak() {
        let r = [1.0, 0.2, -0.9, 0.3, 0.1];
        let p = peak_argmax(&r).unwrap().unwrap();
        assert_eq!((p.step, p.abs_corr, p.sign), (2, 0.9, -1.0));
    }

    #[test]
    fn monotone_array_has_no_peak() {
        let r: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert!(peak_argmax(&r).unwrap().is_none());
    }

    #[test]
    fn equal_peaks_break_to_smallest_step() {
        let r = [1.0, 0.5, 0.8, 0.5, -0.8, 0.5];
        let p = peak_argmax(&r).unwrap().unwrap();
        assert_eq!((p.step, p.abs_corr, p.sign), (2, 0.8, 1.0));
        assert_eq!(Some(p), peak_oracle(&r));
    }

    #[test]
    fn peak_argmax_needs_three_lags() {
        assert!(matches!(
            peak_argmax(&[1.0, 0.5]),
            Err(LiftError::InvalidInput(_))
        ));
    }

    #[test]
    fn matches_exhaustive_scan_on_random_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let l = rng.gen_range(3..40);
            let r: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(peak_argmax(&r).unwrap(), peak_oracle(&r));
        }
    }

    fn planted_window(l: usize, step: usize, sign: f64, seed: u64) -> Vec<Vec<f64>> {
        // Channel 1 is an exact circular copy of channel 0, delayed by `step`.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = (0..l).map(|i| sign * base[(i + l - step) % l]).collect();
        vec![normalize_row(&base), normalize_row(&shifted)]
    }

    #[test]
    fn recovers_planted_circular_lag() {
        let window = planted_window(64, 3, 1.0, 9);
        let sets = estimate_leads(&window, 2).unwrap();
        let top = &sets[1].entries[0];
        assert!(top.valid);
        assert_eq!(top.indicator, 0);
        assert_eq!(top.step, 3);
        assert!((top.raw_abs_corr - 1.0).abs() < 1e-9);
        assert_eq!(top.sign, 1.0);
    }

    #[test]
    fn negative_copy_flips_sign_only() {
        let pos = estimate_leads(&planted_window(64, 3, 1.0, 9), 1).unwrap();
        let neg = estimate_leads(&planted_window(64, 3, -1.0, 9), 1).unwrap();
        let (p, n) = (&pos[1].entries[0], &neg[1].entries[0]);
        assert_eq!(n.sign, -1.0);
        assert_eq!(n.step, p.step);
        assert!((n.raw_abs_corr - p.raw_abs_corr).abs() < 1e-9);
    }

    #[test]
    fn perfect_single_indicator_coefficient_is_half() {
        // K = 1 with |R*| = 1: coeff = e / (e + e) = 0.5.
        let window = planted_window(64, 3, 1.0, 13);
        let sets = estimate_leads(&window, 1).unwrap();
        assert!((sets[1].norm_coeffs[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn degenerate_channel_is_excluded_everywhere() {
        let mut window = planted_window(32, 2, 1.0, 17);
        window.push(vec![0.0; 32]); // constant channel, normalized to zeros
        let sets = estimate_leads(&window, 3).unwrap();
        assert!(!sets[2].has_valid());
        for set in &sets[..2] {
            for e in set.entries.iter().filter(|e| e.valid) {
                assert_ne!(e.indicator, 2);
            }
        }
    }

    #[test]
    fn under_supply_pads_with_invalid_slots() {
        let window = planted_window(32, 2, 1.0, 21);
        let sets = estimate_leads(&window, 5).unwrap();
        let set = &sets[1];
        assert_eq!(set.entries.len(), 5);
        let n_valid = set.entries.iter().filter(|e| e.valid).count();
        assert!(n_valid < 5);
        for (e, &coeff) in set.entries.iter().zip(&set.norm_coeffs) {
            if !e.valid {
                assert_eq!(e.raw_abs_corr, 0.0);
                assert_eq!(e.sign, 1.0);
                assert_eq!(coeff, 0.0);
            }
        }
    }

    #[test]
    fn joint_circular_shift_preserves_selected_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let l = 48;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| normalize_row(&(0..l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let offset = 11;
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| (0..l).map(|i| row[(i + offset) % l]).collect())
            .collect();
        let a = estimate_leads(&rows, 2).unwrap();
        let b = estimate_leads(&shifted, 2).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (ea, eb) in sa.entries.iter().zip(&sb.entries) {
                assert_eq!(ea.valid, eb.valid);
                if ea.valid {
                    assert_eq!(ea.indicator, eb.indicator);
                    assert_eq!(ea.step, eb.step);
                    assert!((ea.raw_abs_corr - eb.raw_abs_corr).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn affine_transforms_leave_estimation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let l = 48;
        let raw: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let norm = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| normalize_row(r)).collect()
        };
        let base = estimate_leads(&norm(&raw), 2).unwrap();
        let transformed: Vec<Vec<f64>> = raw
            .iter()
            .enumerate()
            .map(|(c, row)| row.iter().map(|v| 3.5 * v + c as f64).collect())
            .collect();
        let scaled = estimate_leads(&norm(&transformed), 2).unwrap();
        // Steps and indicator indices are bit-identical; coefficients agree
        // to rounding because the inputs are renormalized.
        for (sa, sb) in base.iter().zip(&scaled) {
            for ((ea, eb), (ca, cb)) in sa
                .entries
                .iter()
                .zip(&sb.entries)
                .zip(sa.norm_coeffs.iter().zip(&sb.norm_coeffs))
            {
                assert_eq!((ea.indicator, ea.step, ea.valid), (eb.indicator, eb.step, eb.valid));
                assert_eq!(ea.sign, eb.sign);
                assert!((ca - cb).abs() < 1e-9);
            }
        }
        // Negative scale on one channel flips only that indicator's sign.
        let mut flipped_raw = raw.clone();
        for v in &mut flipped_raw[0] {
            *v *= -2.0;
        }
        let flipped = estimate_leads(&norm(&flipped_raw), 2).unwrap();
        for (sa, sb) in base.iter().zip(&flipped) {
            for (ea, eb) in sa.entries.iter().zip(&sb.entries) {
                assert_eq!(ea.valid, eb.valid);
                if ea.valid {
                    assert_eq!(ea.indicator, eb.indicator);
                    assert_eq!(ea.step, eb.step);
                    assert!((ea.raw_abs_corr - eb.raw_abs_corr).abs() < 1e-9);
                    // Sign flips when exactly one side of the pair was negated.
                    let flips = (ea.indicator == 0) != (sa.target == 0);
                    let want = if flips { -ea.sign } else { ea.sign };
                    assert_eq!(eb.sign, want);
                }
            }
        }
    }

    #[test]
    fn planted_lead_recovery_rate_with_noise() {
        // Reduced-scale version of the recovery property; the acceptance
        // suite runs the full 500-window experiment.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (l, step) = (96, 9);
        let mut hits = 0;
        let total = 60;
        for _ in 0..total {
            let t = l + step + 10;
            let mut leader = vec![0.0f64; t];
            let (p1, p2) = (rng.gen_range(6.0..15.0), rng.gen_range(17.0..40.0));
            let (ph1, ph2) = (rng.gen_range(0.0..TAU_F), rng.gen_range(0.0..TAU_F));
            let mut ar = 0.0;
            for (i, v) in leader.iter_mut().enumerate() {
                ar = 0.7 * ar + rng.gen_range(-1.0..1.0);
                *v = (TAU_F * i as f64 / p1 + ph1).sin()
                    + 0.8 * (TAU_F * i as f64 / p2 + ph2).sin()
                    + 0.6 * ar;
            }
            let lagged: Vec<f64> = (0..t)
                .map(|i| {
                    let src = if i >= step { leader[i - step] } else { 0.0 };
                    src + 0.05 * rng.gen_range(-1.0..1.0)
                })
                .collect();
            let window = vec![
                normalize_row(&leader[t - l..]),
                normalize_row(&lagged[t - l..]),
            ];
            let sets = estimate_leads(&window, 1).unwrap();
            let top = &sets[1].entries[0];
            if top.valid && top.indicator == 0 && top.step == step {
                hits += 1;
            }
        }
        assert!(hits * 100 >= total * 90, "recovered {hits}/{total}");
    }

    const TAU_F: f64 = std::f64::consts::TAU;

    proptest! {
        #[test]
        fn softmax_identity_for_all_valid_sets(
            raws in prop::collection::vec(0.0f64..1.0, 1..8)
        ) {
            let mut sorted = raws.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let entries: Vec<LeadEntry> = sorted
                .iter()
                .enumerate()
                .map(|(i, &r)| LeadEntry {
                    indicator: i,
                    step: 1,
                    raw_abs_corr: r,
                    sign: 1.0,
                    valid: true,
                })
                .collect();
            let k = entries.len();
            let set = LeadSet::new(0, entries, k);
            let sum: f64 = set.norm_coeffs.iter().sum();
            let e = std::f64::consts::E;
            let self_term = e / (e + sorted.iter().map(|r| r.exp()).sum::<f64>());
            prop_assert!((sum + self_term - 1.0).abs() < 1e-12);
            for c in &set.norm_coeffs {
                prop_assert!(*c > 0.0 && *c < 1.0);
            }
            prop_assert!(sum < 1.0);
        }
    }
}

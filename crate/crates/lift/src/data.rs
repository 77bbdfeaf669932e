//! Dataset ingestion, chronological splitting, window enumeration, and a
//! planted-lead synthetic generator with ground truth.

use crate::error::{LiftError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;
use std::path::Path;

/// An immutable T x C panel of real values with channel names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Channel-major storage: `by_channel[c][t]`.
    by_channel: Vec<Vec<f64>>,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
    fingerprint: String,
}

impl Dataset {
    /// Builds a dataset from C channel rows of equal length T >= 2.
    pub fn from_channels(by_channel: Vec<Vec<f64>>, channel_names: Vec<String>) -> Result<Self> {
        if by_channel.is_empty() || by_channel[0].len() < 2 {
            return Err(LiftError::InvalidInput(
                "dataset needs at least one channel and T >= 2".into(),
            ));
        }
        let t = by_channel[0].len();
        if by_channel.iter().any(|ch| ch.len() != t) {
            return Err(LiftError::ShapeMismatch("ragged channel lengths".into()));
        }
        if by_channel.len() != channel_names.len() {
            return Err(LiftError::ShapeMismatch(
                "channel name count does not match channel count".into(),
            ));
        }
        if by_channel.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LiftError::InvalidInput(
                "dataset contains non-finite values".into(),
            ));
        }
        let fingerprint = fingerprint_of(&by_channel, &channel_names);
        Ok(Self {
            by_channel,
            channel_names,
            timestamps: None,
            fingerprint,
        })
    }

    /// Number of time steps T.
    pub fn len(&self) -> usize {
        self.by_channel[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of channels C.
    pub fn channels(&self) -> usize {
        self.by_channel.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.by_channel[c]
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.by_channel[c][t]
    }

    /// SHA-256 over the parsed payload (channel names plus values in time
    /// order); identical content yields an identical fingerprint.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// C x `len` slice of all channels starting at time `start`.
    pub fn window(&self, start: usize, len: usize) -> Vec<Vec<f64>> {
        self.by_channel
            .iter()
            .map(|ch| ch[start..start + len].to_vec())
            .collect()
    }
}

fn fingerprint_of(by_channel: &[Vec<f64>], names: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((by_channel.len() as u64).to_le_bytes());
    hasher.update((by_channel[0].len() as u64).to_le_bytes());
    for name in names {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
    }
    // Time-major traversal matches the on-disk row order.
    for t in 0..by_channel[0].len() {
        for ch in by_channel {
            hasher.update(ch[t].to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Policy for empty or non-numeric (NaN) cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NanPolicy {
    /// Fail with the row/column location (default).
    Reject,
    /// Repeat the previous row's value; a gap in the first row still fails.
    ForwardFill,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub nan_policy: NanPolicy,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            nan_policy: NanPolicy::Reject,
        }
    }
}

/// Loads a UTF-8 CSV with a header row of channel names. A first column
/// named `date` or `timestamp` (case-insensitive) is kept as metadata.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| LiftError::Io(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| LiftError::Io(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(LiftError::Parse {
            row: 1,
            col: 1,
            message: "empty header row".into(),
        });
    }
    let first = headers[0].to_ascii_lowercase();
    let has_time_col = first == "date" || first == "timestamp";
    let first_data_col = usize::from(has_time_col);
    let channel_names: Vec<String> = headers[first_data_col..].to_vec();
    if channel_names.is_empty() {
        return Err(LiftError::Parse {
            row: 1,
            col: 1,
            message: "no data columns after the timestamp column".into(),
        });
    }

    let mut by_channel: Vec<Vec<f64>> = vec![Vec::new(); channel_names.len()];
    let mut timestamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based file line, after the header
        let record = record.map_err(|e| LiftError::Parse {
            row,
            col: 1,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(LiftError::Parse {
                row,
                col: record.len().max(1),
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        if has_time_col {
            timestamps.push(record[0].to_string());
        }
        for (c, field) in record.iter().skip(first_data_col).enumerate() {
            let col = first_data_col + c + 1;
            let trimmed = field.trim();
            let parsed: Option<f64> = if trimmed.is_empty() {
                None
            } else {
                match trimmed.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    Ok(_) => None,
                    Err(_) => {
                        return Err(LiftError::Parse {
                            row,
                            col,
                            message: format!("non-numeric cell {trimmed:?}"),
                        })
                    }
                }
            };
            let value = match (parsed, options.nan_policy) {
                (Some(v), _) => v,
                (None, NanPolicy::Reject) => {
                    return Err(LiftError::Parse {
                        row,
                        col,
                        message: "missing or non-finite cell".into(),
                    })
                }
                (None, NanPolicy::ForwardFill) => {
                    *by_channel[c].last().ok_or(LiftError::Parse {
                        row,
                        col,
                        message: "gap in the first data row cannot be forward-filled".into(),
                    })?
                }
            };
            by_channel[c].push(value);
        }
    }
    let mut dataset = Dataset::from_channels(by_channel, channel_names)?;
    if has_time_col {
        dataset.timestamps = Some(timestamps);
    }
    Ok(dataset)
}

/// Contiguous chronological train/validation/test ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 7:1:2 chronological split: floor(0.7 T), floor(0.1 T), remainder.
pub fn split(dataset: &Dataset) -> Result<Splits> {
    let t = dataset.len();
    if t < 10 {
        return Err(LiftError::InvalidInput(format!(
            "split needs T >= 10, got {t}"
        )));
    }
    let n_train = t * 7 / 10;
    let n_val = t / 10;
    Ok(Splits {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..t,
    })
}

/// One forecasting instance: a raw C x L lookback ending at `start + L - 1`
/// and the raw C x H horizon that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub lookback: Vec<Vec<f64>>,
    pub horizon: Vec<Vec<f64>>,
}

/// Lookback start indices of every window whose horizon fits in `range`.
///
/// With `strict` off (the default), lookbacks may reach back before
/// `range.start` into earlier data, down to index 0.
pub fn window_starts(
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    strict: bool,
) -> Vec<usize> {
    if stride == 0 || lookback == 0 || horizon == 0 {
        return Vec::new();
    }
    let lo = if strict {
        range.start
    } else {
        range.start.saturating_sub(lookback.saturating_sub(1))
    };
    let hi_excl = range.end.saturating_sub(lookback + horizon - 1);
    if lo >= hi_excl {
        return Vec::new();
    }
    (lo..hi_excl).step_by(stride).collect()
}

pub fn extract_window(dataset: &Dataset, start: usize, lookback: usize, horizon: usize) -> Window {
    Window {
        start,
        lookback: dataset.window(start, lookback),
        horizon: dataset.window(start + lookback, horizon),
    }
}

/// Iterates the windows of `range` in chronological order.
pub fn windows<'a>(
    dataset: &'a Dataset,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    strict: bool,
) -> impl Iterator<Item = Window> + 'a {
    window_starts(range, lookback, horizon, stride, strict)
        .into_iter()
        .map(move |s| extract_window(dataset, s, lookback, horizon))
}

/// One planted lead-lag relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLead {
    pub lagged: usize,
    pub leader: usize,
    pub step: usize,
    pub sign: f64,
    pub weight: f64,
}

/// Recipe for a synthetic panel: leader channels are independent sums of
/// sinusoids with random phases plus AR(1) noise, lagged channels are
/// weighted, signed, delayed copies plus relative observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub len: usize,
    pub pairs: Vec<PlantedLead>,
    /// Observation noise on lagged channels, relative to their signal std.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_sinusoids")]
    pub sinusoids: usize,
    #[serde(default = "default_ar_coeff")]
    pub ar_coeff: f64,
    #[serde(default = "default_ar_std")]
    pub ar_std: f64,
}

fn default_sinusoids() -> usize {
    3
}
// Short AR memory keeps window statistics locally stable, which the
// correlation estimator relies on.
fn default_ar_coeff() -> f64 {
    0.3
}
fn default_ar_std() -> f64 {
    0.8
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.len < 2 {
            return Err(LiftError::InvalidInput(
                "synthetic spec needs channels >= 1 and len >= 2".into(),
            ));
        }
        for pair in &self.pairs {
            if pair.lagged >= self.channels || pair.leader >= self.channels {
                return Err(LiftError::InvalidInput(format!(
                    "pair {pair:?} references a channel out of range"
                )));
            }
            if pair.lagged == pair.leader {
                return Err(LiftError::InvalidInput(
                    "a channel cannot lead itself".into(),
                ));
            }
            if pair.step == 0 {
                return Err(LiftError::InvalidInput("leading step must be >= 1".into()));
            }
            if pair.step * 4 >= self.len {
                return Err(LiftError::InvalidInput(format!(
                    "leading step {} too large for length {} (must be < T/4)",
                    pair.step, self.len
                )));
            }
            if pair.sign != 1.0 && pair.sign != -1.0 {
                return Err(LiftError::InvalidInput("sign must be +1 or -1".into()));
            }
        }
        Ok(())
    }
}

const AR_BURN_IN: usize = 200;

/// A leader's base signal, generated with enough pre-history to serve the
/// largest planted delay.
fn base_signal(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, pad: usize) -> Vec<f64> {
    let total = spec.len + pad;
    // Periods are drawn from disjoint bands so no two components of a
    // channel beat slowly against each other, and stay well below typical
    // window lengths; continuous values avoid exact periodicity. Slow
    // beats or long periods would destabilize per-window statistics.
    let comps: Vec<(f64, f64, f64)> = (0..spec.sinusoids)
        .map(|i| {
            let lo = 5.0 * 1.7f64.powi(i as i32);
            (
                rng.gen_range(0.4..0.8),
                rng.gen_range(lo..1.6 * lo),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let innovation = spec.ar_std * (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt();
    let mut ar = 0.0;
    for _ in 0..AR_BURN_IN {
        ar = spec.ar_coeff * ar + innovation * gauss(rng);
    }
    (0..total)
        .map(|i| {
            ar = spec.ar_coeff * ar + innovation * gauss(rng);
            let t = i as f64;
            comps
                .iter()
                .map(|(a, p, ph)| a * (std::f64::consts::TAU * t / p + ph).sin())
                .sum::<f64>()
                + ar
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a synthetic dataset together with its exact planted lead map.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Vec<PlantedLead>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pad = spec.pairs.iter().map(|p| p.step).max().unwrap_or(0);
    let lagged: std::collections::BTreeSet<usize> =
        spec.pairs.iter().map(|p| p.lagged).collect();

    // Base signals first, in channel order, so the stream layout is stable.
    let bases: Vec<Option<Vec<f64>>> = (0..spec.channels)
        .map(|c| {
            if lagged.contains(&c) {
                None
            } else {
                Some(base_signal(spec, &mut rng, pad))
            }
        })
        .collect();

    let mut by_channel: Vec<Vec<f64>> = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        if let Some(base) = &bases[c] {
            by_channel.push(base[pad..].to_vec());
        } else {
            let mut signal = vec![0.0f64; spec.len];
            for pair in spec.pairs.iter().filter(|p| p.lagged == c) {
                let leader = bases[pair.leader].as_ref().ok_or_else(|| {
                    LiftError::InvalidInput(format!(
                        "channel {} is both lagged and a leader's source",
                        pair.leader
                    ))
                })?;
                for (t, v) in signal.iter_mut().enumerate() {
                    *v += pair.weight * pair.sign * leader[pad + t - pair.step];
                }
            }
            if spec.noise > 0.0 {
                let n = signal.len() as f64;
                let mean = signal.iter().sum::<f64>() / n;
                let std =
                    (signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                for v in &mut signal {
                    *v += spec.noise * std * gauss(&mut rng);
                }
            }
            by_channel.push(signal);
        }
    }
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    let dataset = Dataset::from_channels(by_channel, names)?;
    Ok((dataset, spec.pairs.clone()))
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_temp("a,b\n1.0,2.0\n3.0,4.5\n");
        let d = load_csv(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!((d.len(), d.channels()), (2, 2));
        assert_eq!(d.value(1, 1), 4.5);
        assert_eq!(d.channel_names(), ["a", "b"]);
    }

    #[test]
    fn detects_timestamp_column() {
        let f = write_temp("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n");
        let d = load_csv(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(d.channels(), 2);
        assert_eq!(d.timestamps.as_ref().unwrap()[1], "2020-01-02");
    }

    #[test]
    fn fingerprint_is_deterministic() {
        let f = write_temp("a,b\n1,2\n3,4\n");
        let d1 = load_csv(f.path(), &LoadOptions::default()).unwrap();
        let d2 = load_csv(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(d1.fingerprint(), d2.fingerprint());
    }

    #[test]
    fn ragged_and_non_numeric_rows_report_location() {
        let f = write_temp("a,b\n1,2\n3\n");
        match load_csv(f.path(), &LoadOptions::default()) {
            Err(LiftError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_temp("a,b\n1,2\n3,oops\n");
        match load_csv(f.path(), &LoadOptions::default()) {
            Err(LiftError::Parse { row, col, .. }) => assert_eq!((row, col), (3, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nan_policies() {
        let f = write_temp("a,b\n1,2\n,4\n");
        assert!(load_csv(f.path(), &LoadOptions::default()).is_err());
        let opts = LoadOptions {
            nan_policy: NanPolicy::ForwardFill,
            ..LoadOptions::default()
        };
        let d = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.value(1, 0), 1.0);
    }

    #[test]
    fn split_ratios() {
        let channels = vec![(0..100).map(|v| v as f64).collect::<Vec<_>>()];
        let d = Dataset::from_channels(channels, vec!["a".into()]).unwrap();
        let s = split(&d).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 70..80);
        assert_eq!(s.test, 80..100);

        let channels = vec![(0..10).map(|v| v as f64).collect::<Vec<_>>()];
        let d = Dataset::from_channels(channels, vec!["a".into()]).unwrap();
        let s = split(&d).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        // Disjoint cover of [0, T), in order.
        assert_eq!(s.train.end, s.val.start);
        assert_eq!(s.val.end, s.test.start);
        assert_eq!(s.test.end, 10);
    }

    #[test]
    fn window_counting() {
        assert_eq!(window_starts(0..100, 24, 8, 1, true).len(), 69);
        assert_eq!(window_starts(0..100, 24, 8, 100, true).len(), 1);
        assert!(window_starts(0..20, 24, 8, 1, true).is_empty());
    }

    #[test]
    fn relaxed_boundaries_reach_back() {
        let strict = window_starts(50..100, 24, 8, 1, true);
        let relaxed = window_starts(50..100, 24, 8, 1, false);
        assert_eq!(strict[0], 50);
        assert_eq!(relaxed[0], 50 - 23);
        assert_eq!(strict.last(), relaxed.last());
    }

    #[test]
    fn windows_reproduce_source_slices() {
        let channels: Vec<Vec<f64>> = (0..2)
            .map(|c| (0..40).map(|t| (c * 100 + t) as f64).collect())
            .collect();
        let d = Dataset::from_channels(channels, vec!["a".into(), "b".into()]).unwrap();
        for w in windows(&d, 0..40, 6, 3, 4, true) {
            for c in 0..2 {
                let joined: Vec<f64> = w.lookback[c]
                    .iter()
                    .chain(&w.horizon[c])
                    .copied()
                    .collect();
                assert_eq!(joined, d.channel(c)[w.start..w.start + 9].to_vec());
            }
        }
    }

    #[test]
    fn noiseless_pair_is_exact_delay() {
        let spec = SyntheticSpec {
            channels: 2,
            len: 200,
            pairs: vec![PlantedLead {
                lagged: 1,
                leader: 0,
                step: 5,
                sign: 1.0,
                weight: 1.0,
            }],
            noise: 0.0,
            seed: 7,
            sinusoids: 3,
            ar_coeff: 0.7,
            ar_std: 0.8,
        };
        let (d, truth) = gen_synthetic(&spec).unwrap();
        assert_eq!(truth.len(), 1);
        for t in 5..d.len() {
            assert_eq!(d.value(t, 1), d.value(t - 5, 0));
        }
        // Negative sign mirrors the delayed leader.
        let mut neg = spec.clone();
        neg.pairs[0].sign = -1.0;
        let (dn, _) = gen_synthetic(&neg).unwrap();
        for t in 5..dn.len() {
            assert_eq!(dn.value(t, 1), -dn.value(t - 5, 0));
        }
    }

    #[test]
    fn generation_is_seeded_deterministic() {
        let spec = SyntheticSpec {
            channels: 3,
            len: 64,
            pairs: vec![PlantedLead {
                lagged: 2,
                leader: 0,
                step: 4,
                sign: 1.0,
                weight: 1.0,
            }],
            noise: 0.05,
            seed: 42,
            sinusoids: 3,
            ar_coeff: 0.7,
            ar_std: 0.8,
        };
        let (a, _) = gen_synthetic(&spec).unwrap();
        let (b, _) = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let spec = SyntheticSpec {
            channels: 2,
            len: 40,
            pairs: vec![PlantedLead {
                lagged: 1,
                leader: 0,
                step: 10,
                sign: 1.0,
                weight: 1.0,
            }],
            noise: 0.0,
            seed: 0,
            sinusoids: 3,
            ar_coeff: 0.7,
            ar_std: 0.8,
        };
        assert!(matches!(
            gen_synthetic(&spec),
            Err(LiftError::InvalidInput(_))
        ));
    }
}

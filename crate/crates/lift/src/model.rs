//! The forecasting pipeline: backbone -> instance normalization -> lead
//! lookup -> target-oriented shifts -> refinement -> denormalization, plus
//! the shared-weight linear backbone and model checkpointing.

use crate::data::write_atomic;
use crate::error::{LiftError, Result};
use crate::lead::LeadSet;
use crate::mat::Mat;
use crate::normalize::{self, NormStats};
use crate::refiner::{
    build_segment, estimate_state, make_filters, refine_cached, FilterBank, RefineCache,
    RefinerParams, StateInput, StateProbs, TargetSegment,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A preliminary forecaster: maps a normalized C x L lookback to normalized
/// C x H predictions.
pub trait Backbone {
    fn forecast(&self, lookback_norm: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    fn lookback_len(&self) -> usize;
    fn horizon_len(&self) -> usize;
    /// True when each channel is predicted from its own history only.
    fn channel_independent(&self) -> bool;
}

/// Linear layer backbone. By default one H x L weight matrix plus bias is
/// shared across all channels; per-channel weights are available for
/// ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBackbone {
    /// One matrix when shared, C matrices otherwise.
    pub w: Vec<Mat>,
    pub b: Vec<Vec<f64>>,
    pub shared: bool,
}

impl LinearBackbone {
    /// Persistence initialization: every horizon step predicts the last
    /// observed value.
    pub fn init(lookback: usize, horizon: usize, channels: usize, shared: bool) -> Self {
        let persistence = Mat::from_fn(horizon, lookback, |_, c| {
            if c == lookback - 1 {
                1.0
            } else {
                0.0
            }
        });
        let copies = if shared { 1 } else { channels };
        Self {
            w: vec![persistence; copies],
            b: vec![vec![0.0; horizon]; copies],
            shared,
        }
    }

    pub fn weights_for(&self, channel: usize) -> (&Mat, &[f64]) {
        let idx = if self.shared { 0 } else { channel };
        (&self.w[idx], &self.b[idx])
    }

    pub fn weight_index(&self, channel: usize) -> usize {
        if self.shared {
            0
        } else {
            channel
        }
    }
}

impl Backbone for LinearBackbone {
    fn forecast(&self, lookback_norm: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        lookback_norm
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let (w, b) = self.weights_for(c);
                if row.len() != w.cols() {
                    return Err(LiftError::ShapeMismatch(format!(
                        "lookback row of {} vs weights for {}",
                        row.len(),
                        w.cols()
                    )));
                }
                Ok(linear_forecast_row(w, b, row))
            })
            .collect()
    }

    fn lookback_len(&self) -> usize {
        self.w[0].cols()
    }

    fn horizon_len(&self) -> usize {
        self.w[0].rows()
    }

    fn channel_independent(&self) -> bool {
        true
    }
}

/// w . row + b for one channel.
pub fn linear_forecast_row(w: &Mat, b: &[f64], row: &[f64]) -> Vec<f64> {
    let mut out = w.matvec(row);
    for (o, bias) in out.iter_mut().zip(b) {
        *o += bias;
    }
    out
}

/// Shared-weight linear forecast across all channels.
pub fn linear_forecast(lookback_norm: &[Vec<f64>], w: &Mat, b: &[f64]) -> Vec<Vec<f64>> {
    lookback_norm
        .iter()
        .map(|row| linear_forecast_row(w, b, row))
        .collect()
}

/// Shape and behavior hyperparameters shared by all submodules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub k: usize,
    pub states: usize,
    pub state_input: StateInput,
    pub grad_through_shift: bool,
    pub per_channel_backbone: bool,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.k == 0 || self.states == 0 {
            return Err(LiftError::InvalidInput(
                "channels, K, and states must all be >= 1".into(),
            ));
        }
        if self.lookback < 3 {
            return Err(LiftError::InvalidInput("lookback must be >= 3".into()));
        }
        if self.horizon < 2 {
            return Err(LiftError::InvalidInput("horizon must be >= 2".into()));
        }
        if self.horizon > self.lookback {
            return Err(LiftError::UnsupportedConfiguration(format!(
                "horizon {} exceeds lookback {}",
                self.horizon, self.lookback
            )));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.horizon / 2 + 1
    }
}

/// Trained artifact: the backbone, the refiner tensors, and the shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftModel {
    pub hyper: Hyper,
    pub backbone: LinearBackbone,
    pub refiner: RefinerParams,
}

impl LiftModel {
    /// Fresh model at pass-through initialization: the refiner is the
    /// identity on preliminary predictions.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = LinearBackbone::init(
            hyper.lookback,
            hyper.horizon,
            hyper.channels,
            !hyper.per_channel_backbone,
        );
        let refiner = RefinerParams::passthrough_init(
            hyper.channels,
            hyper.lookback,
            hyper.horizon,
            hyper.k,
            hyper.states,
            &mut rng,
        );
        Ok(Self {
            hyper,
            backbone,
            refiner,
        })
    }

    /// Runs the full pipeline on one raw lookback window. `leads` must have
    /// been estimated on the normalized version of this window (fresh or
    /// from a cache entry for the same start).
    pub fn forward(&self, raw_lookback: &[Vec<f64>], leads: &[LeadSet]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_full(raw_lookback, leads, None, None)?.out_raw)
    }

    /// Denormalized backbone predictions alone (no refinement).
    pub fn backbone_forward(&self, raw_lookback: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let stats = normalize::fit(raw_lookback)?;
        let x_norm = normalize::apply(raw_lookback, &stats)?;
        let preds_norm = self.backbone.forecast(&x_norm)?;
        normalize::invert(&preds_norm, &stats)
    }

    /// Full pipeline with every intermediate value recorded for the
    /// backward pass. `preds_override` substitutes precomputed normalized
    /// backbone predictions (frozen-backbone training); `segment_preds`
    /// pins the predictions consumed by target-oriented shifts only, which
    /// is the objective trained when shift gradients are detached.
    pub fn forward_full(
        &self,
        raw_lookback: &[Vec<f64>],
        leads: &[LeadSet],
        preds_override: Option<&[Vec<f64>]>,
        segment_preds: Option<&[Vec<f64>]>,
    ) -> Result<ForwardCache> {
        match preds_override {
            Some(preds) => forward_with(
                &PinnedBackbone {
                    preds,
                    lookback: self.hyper.lookback,
                    horizon: self.hyper.horizon,
                },
                &self.refiner,
                &self.hyper,
                raw_lookback,
                leads,
                segment_preds,
            ),
            None => forward_with(
                &self.backbone,
                &self.refiner,
                &self.hyper,
                raw_lookback,
                leads,
                segment_preds,
            ),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let container = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.clone(),
        };
        write_atomic(path, &serde_json::to_vec(&container)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let container: Checkpoint = serde_json::from_slice(&bytes)?;
        if container.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(LiftError::InvalidInput(format!(
                "checkpoint format {} != {}",
                container.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        container.model.hyper.validate()?;
        Ok(container.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: LiftModel,
}

/// Serves precomputed predictions through the backbone interface, so the
/// frozen-backbone path runs the exact same pipeline.
struct PinnedBackbone<'a> {
    preds: &'a [Vec<f64>],
    lookback: usize,
    horizon: usize,
}

impl Backbone for PinnedBackbone<'_> {
    fn forecast(&self, _lookback_norm: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.preds.to_vec())
    }

    fn lookback_len(&self) -> usize {
        self.lookback
    }

    fn horizon_len(&self) -> usize {
        self.horizon
    }

    fn channel_independent(&self) -> bool {
        true
    }
}

/// The six-step pipeline over any backbone implementation: fit statistics,
/// normalize, forecast, shift, refine, denormalize. `segment_preds`
/// optionally pins the predictions consumed by the shifts.
pub fn forward_with<B: Backbone + ?Sized>(
    backbone: &B,
    refiner: &RefinerParams,
    hyper: &Hyper,
    raw_lookback: &[Vec<f64>],
    leads: &[LeadSet],
    segment_preds: Option<&[Vec<f64>]>,
) -> Result<ForwardCache> {
    let c = hyper.channels;
    if raw_lookback.len() != c || leads.len() != c {
        return Err(LiftError::ShapeMismatch(format!(
            "expected {} channels, got lookback {} and leads {}",
            c,
            raw_lookback.len(),
            leads.len()
        )));
    }
    let stats = normalize::fit(raw_lookback)?;
    let x_norm = normalize::apply(raw_lookback, &stats)?;
    let preds_norm = backbone.forecast(&x_norm)?;
    if preds_norm.len() != c || preds_norm.iter().any(|r| r.len() != hyper.horizon) {
        return Err(LiftError::ShapeMismatch(
            "backbone predictions are not C x H".into(),
        ));
    }
    let seg_preds = segment_preds.unwrap_or(&preds_norm);

    let mut per_channel = Vec::with_capacity(c);
    let mut out_norm = Vec::with_capacity(c);
    for j in 0..c {
        let segment = build_segment(j, &x_norm, seg_preds, &leads[j])?;
        let state_input_row = match hyper.state_input {
            StateInput::Raw => &raw_lookback[j],
            StateInput::Normalized => &x_norm[j],
        };
        let state = estimate_state(state_input_row, j, refiner);
        let bank = make_filters(&leads[j].norm_coeffs, &state, refiner);
        let (refined, refine_cache) = refine_cached(&preds_norm[j], &segment, &bank, refiner);
        out_norm.push(refined);
        per_channel.push(ChannelCache {
            segment,
            state,
            bank,
            refine: refine_cache,
        });
    }
    let out_raw = normalize::invert(&out_norm, &stats)?;
    Ok(ForwardCache {
        stats,
        x_norm,
        preds_norm,
        per_channel,
        out_norm,
        out_raw,
    })
}

/// Per-channel intermediates of one pipeline evaluation.
#[derive(Debug, Clone)]
pub struct ChannelCache {
    pub segment: TargetSegment,
    pub state: StateProbs,
    pub bank: FilterBank,
    pub refine: RefineCache,
}

/// All intermediates of one pipeline evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stats: NormStats,
    pub x_norm: Vec<Vec<f64>>,
    pub preds_norm: Vec<Vec<f64>>,
    pub per_channel: Vec<ChannelCache>,
    pub out_norm: Vec<Vec<f64>>,
    pub out_raw: Vec<Vec<f64>>,
}

//! Operator surface: synthesize data, inspect leads, train, evaluate,
//! predict, and run gradient checks. All machine-readable outputs are CSV
//! or JSON and are written atomically into the output directory.

use crate::config::RunConfig;
use crate::data::{
    self, extract_window, gen_synthetic, load_csv, split, window_starts, Dataset, LoadOptions,
    PlantedLead, SyntheticSpec,
};
use crate::error::{LiftError, Result};
use crate::lead::{estimate_leads, precompute_leads, LeadCache};
use crate::model::{Hyper, LiftModel};
use crate::normalize;
use crate::training::{
    self, gradient_check, train_backbone_only, train_with_grid, BatchSample, GradFlags,
    StopReason, TrainReport, GRADCHECK_REL_TOL, GRADCHECK_STEP,
};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "lift",
    about = "Lead-lag aware refinement of multivariate time series forecasts"
)]
pub struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set lr=0.01 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Random seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap; 1 forces serial execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (defaults to $LIFT_OUT or ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-lead synthetic dataset plus its ground truth.
    Synth {
        /// Synthetic spec file (key = value plus repeated `pair = ...` lines).
        #[arg(long)]
        spec: PathBuf,
    },
    /// Precompute lead estimations over a dataset split.
    Leads {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lookback: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// train | val | test | all
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model per the configuration.
    Train,
    /// Evaluate a checkpoint on a split, backbone-only vs refined.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated horizon prefixes to score (default: the model's H).
        #[arg(long)]
        horizons: Option<String>,
    },
    /// Predict one window and emit preliminary and refined values.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Window start index (the lookback covers [t, t+L)).
        #[arg(long)]
        t: usize,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck,
}

/// Runs a parsed command line; the returned error maps to the exit code.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            LiftError::InvalidInput(format!("--set expects KEY=VALUE, got {assignment:?}"))
        })?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(out) = cli.out {
        config.out = out;
    } else if cli.config.is_none() && config.out == *"out" {
        if let Ok(dir) = std::env::var("LIFT_OUT") {
            if !dir.is_empty() {
                config.out = PathBuf::from(dir);
            }
        }
    }
    if let Some(threads) = config.threads {
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    std::fs::create_dir_all(&config.out)?;
    data::write_atomic(
        &config.out.join("resolved_config.txt"),
        config.render().as_bytes(),
    )?;

    match cli.command {
        Command::Synth { spec } => cmd_synth(&config, &spec),
        Command::Leads {
            dataset,
            lookback,
            k,
            stride,
            split,
        } => cmd_leads(&config, dataset, lookback, k, stride, &split),
        Command::Train => cmd_train(&config),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            horizons,
        } => cmd_eval(&config, checkpoint, dataset, &split, horizons),
        Command::Predict {
            checkpoint,
            dataset,
            t,
        } => cmd_predict(&config, checkpoint, dataset, t),
        Command::Gradcheck => cmd_gradcheck(&config),
    }
}

/// Parses the synthetic spec format: scalar keys plus repeated
/// `pair = lagged,leader,step,sign,weight` lines.
pub fn parse_synth_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LiftError::Io(format!("{}: {e}", path.display())))?;
    let mut spec = SyntheticSpec {
        channels: 0,
        len: 0,
        pairs: Vec::new(),
        noise: 0.0,
        seed: 0,
        sinusoids: 3,
        ar_coeff: 0.7,
        ar_std: 0.8,
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| LiftError::Parse {
            row: i + 1,
            col: 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: String| LiftError::Parse {
            row: i + 1,
            col: 1,
            message: msg,
        };
        match key {
            "channels" => spec.channels = value.parse().map_err(|_| bad(value.into()))?,
            "len" => spec.len = value.parse().map_err(|_| bad(value.into()))?,
            "noise" => spec.noise = value.parse().map_err(|_| bad(value.into()))?,
            "seed" => spec.seed = value.parse().map_err(|_| bad(value.into()))?,
            "sinusoids" => spec.sinusoids = value.parse().map_err(|_| bad(value.into()))?,
            "ar_coeff" => spec.ar_coeff = value.parse().map_err(|_| bad(value.into()))?,
            "ar_std" => spec.ar_std = value.parse().map_err(|_| bad(value.into()))?,
            "pair" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 5 {
                    return Err(bad(format!(
                        "pair expects lagged,leader,step,sign,weight, got {value:?}"
                    )));
                }
                spec.pairs.push(PlantedLead {
                    lagged: parts[0].parse().map_err(|_| bad(parts[0].into()))?,
                    leader: parts[1].parse().map_err(|_| bad(parts[1].into()))?,
                    step: parts[2].parse().map_err(|_| bad(parts[2].into()))?,
                    sign: parts[3].parse().map_err(|_| bad(parts[3].into()))?,
                    weight: parts[4].parse().map_err(|_| bad(parts[4].into()))?,
                });
            }
            other => return Err(bad(format!("unknown spec key {other:?}"))),
        }
    }
    Ok(spec)
}

fn cmd_synth(config: &RunConfig, spec_path: &Path) -> Result<()> {
    let spec = parse_synth_spec(spec_path)?;
    let (dataset, truth) = gen_synthetic(&spec)?;
    let mut csv = String::new();
    csv.push_str(&dataset.channel_names().join(","));
    csv.push('\n');
    for t in 0..dataset.len() {
        for c in 0..dataset.channels() {
            if c > 0 {
                csv.push(',');
            }
            let _ = write!(csv, "{}", dataset.value(t, c));
        }
        csv.push('\n');
    }
    let data_path = config.out.join("dataset.csv");
    data::write_atomic(&data_path, csv.as_bytes())?;
    let truth_json = serde_json::to_vec_pretty(&serde_json::json!({
        "spec": spec,
        "planted": truth,
    }))?;
    data::write_atomic(&config.out.join("truth.json"), &truth_json)?;
    println!(
        "wrote {} ({} x {}) and truth.json",
        data_path.display(),
        dataset.len(),
        dataset.channels()
    );
    Ok(())
}

fn load_dataset(config: &RunConfig, flag: Option<PathBuf>) -> Result<Dataset> {
    let path = flag
        .or_else(|| config.dataset.clone())
        .ok_or_else(|| LiftError::InvalidInput("no dataset path configured".into()))?;
    load_csv(&path, &LoadOptions::default())
}

fn split_range(dataset: &Dataset, name: &str) -> Result<std::ops::Range<usize>> {
    if name == "all" {
        return Ok(0..dataset.len());
    }
    let s = split(dataset)?;
    match name {
        "train" => Ok(s.train),
        "val" => Ok(s.val),
        "test" => Ok(s.test),
        other => Err(LiftError::InvalidInput(format!(
            "unknown split {other:?}; use train | val | test | all"
        ))),
    }
}

fn cmd_leads(
    config: &RunConfig,
    dataset_flag: Option<PathBuf>,
    lookback: Option<usize>,
    k: Option<usize>,
    stride: Option<usize>,
    split_name: &str,
) -> Result<()> {
    let dataset = load_dataset(config, dataset_flag)?;
    let lookback = lookback.unwrap_or(config.train.lookback);
    let k = k.unwrap_or(config.train.k);
    let stride = stride.unwrap_or(config.train.stride);
    let range = split_range(&dataset, split_name)?;
    let cache = precompute_leads(&dataset, range, lookback, k, stride)?;

    let cache_path = config
        .cache
        .clone()
        .unwrap_or_else(|| config.out.join("leads_cache.json"));
    cache.save(&cache_path)?;

    let mut csv = Vec::new();
    cache.write_csv(&mut csv)?;
    data::write_atomic(&config.out.join("leads.csv"), &csv)?;

    let mut counts = String::from("target,indicator,count\n");
    for ((target, indicator), count) in cache.pair_counts() {
        let _ = writeln!(counts, "{target},{indicator},{count}");
    }
    data::write_atomic(&config.out.join("lead_counts.csv"), counts.as_bytes())?;

    for (c, name) in dataset.channel_names().iter().enumerate() {
        let ch = dataset.channel(c);
        if ch.iter().all(|&v| v == ch[0]) {
            eprintln!("warning: channel {c} ({name}) is constant; excluded from leads");
        }
    }
    println!(
        "cached {} windows (L={}, K={}, stride={}) to {}",
        cache.count,
        cache.lookback,
        cache.k,
        cache.stride,
        cache_path.display()
    );
    Ok(())
}

fn build_or_load_cache(
    config: &RunConfig,
    dataset: &Dataset,
    range: std::ops::Range<usize>,
) -> Result<LeadCache> {
    let path = config
        .cache
        .clone()
        .unwrap_or_else(|| config.out.join("leads_cache.json"));
    if path.exists() {
        let cache = LeadCache::load(&path, dataset)?;
        if cache.lookback == config.train.lookback
            && cache.k == config.train.k
            && cache.stride == config.train.stride
        {
            return Ok(cache);
        }
        return Err(LiftError::StaleCache(format!(
            "{} was built with L={}, K={}, stride={}; configured L={}, K={}, stride={}",
            path.display(),
            cache.lookback,
            cache.k,
            cache.stride,
            config.train.lookback,
            config.train.k,
            config.train.stride
        )));
    }
    let cache = precompute_leads(
        dataset,
        range,
        config.train.lookback,
        config.train.k,
        config.train.stride,
    )?;
    cache.save(&path)?;
    Ok(cache)
}

fn epoch_log_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_mse,train_mae,val_mse,val_mae,lr,seconds\n");
    for e in &report.log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            e.epoch, e.train_mse, e.train_mae, e.val_mse, e.val_mae, e.lr, e.seconds
        );
    }
    s
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(config, None)?;
    let splits = split(&dataset)?;
    let cache = build_or_load_cache(config, &dataset, splits.train.clone())?;
    let hyper = Hyper {
        channels: dataset.channels(),
        lookback: config.train.lookback,
        horizon: config.train.horizon,
        k: config.train.k,
        states: config.train.states,
        state_input: config.state_input,
        grad_through_shift: config.train.grad_through_shift,
        per_channel_backbone: config.per_channel_backbone,
    };
    let model = match &config.init_checkpoint {
        Some(path) => {
            let m = LiftModel::load(path)?;
            if m.hyper != hyper {
                return Err(LiftError::InvalidInput(
                    "init_checkpoint hyperparameters differ from the configuration".into(),
                ));
            }
            m
        }
        None => LiftModel::init(hyper, config.train.seed)?,
    };
    let report = train_with_grid(
        &model,
        &dataset,
        &splits,
        &cache,
        &config.train,
        config.strict_boundaries,
    )?;

    let checkpoint_path = config
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.out.join("checkpoint.json"));
    report.model.save(&checkpoint_path)?;
    data::write_atomic(&config.out.join("epochs.csv"), epoch_log_csv(&report).as_bytes())?;

    match &report.stop {
        StopReason::Diverged { epoch, detail } => {
            eprintln!(
                "training diverged at epoch {epoch} ({detail}); last good checkpoint kept at {}",
                checkpoint_path.display()
            );
            Err(LiftError::TrainingDiverged {
                epoch: *epoch,
                detail: detail.clone(),
            })
        }
        stop => {
            println!(
                "trained {} epochs ({}), best val MSE {:.6}, checkpoint {}",
                report.log.len(),
                match stop {
                    StopReason::EarlyStopped { epoch } => format!("early stop at {epoch}"),
                    _ => "completed".into(),
                },
                report.best_val_mse,
                checkpoint_path.display()
            );
            Ok(())
        }
    }
}

fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset_flag: Option<PathBuf>,
    split_name: &str,
    horizons: Option<String>,
) -> Result<()> {
    let checkpoint_path = checkpoint
        .or_else(|| config.checkpoint.clone())
        .unwrap_or_else(|| config.out.join("checkpoint.json"));
    let model = LiftModel::load(&checkpoint_path)?;
    let dataset = load_dataset(config, dataset_flag)?;
    if dataset.channels() != model.hyper.channels {
        return Err(LiftError::ShapeMismatch(format!(
            "model expects {} channels, dataset has {}",
            model.hyper.channels,
            dataset.channels()
        )));
    }
    let range = split_range(&dataset, split_name)?;
    let h = model.hyper.horizon;
    let horizons: Vec<usize> = match horizons {
        None => vec![h],
        Some(spec) => {
            let parsed: Result<Vec<usize>> = spec
                .split(',')
                .map(|v| {
                    v.trim().parse::<usize>().map_err(|_| {
                        LiftError::InvalidInput(format!("bad horizon {v:?} in --horizons"))
                    })
                })
                .collect();
            let parsed = parsed?;
            if parsed.iter().any(|&x| x == 0 || x > h) {
                return Err(LiftError::InvalidInput(format!(
                    "horizons must lie in [1, {h}]"
                )));
            }
            parsed
        }
    };

    let starts = window_starts(
        range,
        model.hyper.lookback,
        h,
        1,
        config.strict_boundaries,
    );
    if starts.is_empty() {
        return Err(LiftError::InvalidInput(
            "split holds no complete windows".into(),
        ));
    }
    use rayon::prelude::*;
    type Panel = Vec<Vec<f64>>;
    let per_window: Result<Vec<(Panel, Panel, Panel)>> = starts
        .par_iter()
        .map(|&s| {
            let w = extract_window(&dataset, s, model.hyper.lookback, h);
            let stats = normalize::fit(&w.lookback)?;
            let norm = normalize::apply(&w.lookback, &stats)?;
            let leads = estimate_leads(&norm, model.hyper.k)?;
            let refined = model.forward(&w.lookback, &leads)?;
            let plain = model.backbone_forward(&w.lookback)?;
            Ok((refined, plain, w.horizon))
        })
        .collect();
    let per_window = per_window?;

    let truncate = |rows: &[Vec<f64>], n: usize| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r[..n].to_vec()).collect()
    };
    let mut table = String::from(
        "split,horizon,windows,backbone_mse,backbone_mae,refined_mse,refined_mae\n",
    );
    for &hz in &horizons {
        let (mut bm, mut ba, mut rm, mut ra) = (0.0, 0.0, 0.0, 0.0);
        for (refined, plain, truth) in &per_window {
            let t = truncate(truth, hz);
            bm += training::mse(&truncate(plain, hz), &t)?;
            ba += training::mae(&truncate(plain, hz), &t)?;
            rm += training::mse(&truncate(refined, hz), &t)?;
            ra += training::mae(&truncate(refined, hz), &t)?;
        }
        let n = per_window.len() as f64;
        let _ = writeln!(
            table,
            "{split_name},{hz},{},{},{},{},{}",
            per_window.len(),
            bm / n,
            ba / n,
            rm / n,
            ra / n
        );
        println!(
            "{split_name} H={hz}: backbone MSE {:.6} MAE {:.6} | refined MSE {:.6} MAE {:.6}",
            bm / n,
            ba / n,
            rm / n,
            ra / n
        );
    }
    data::write_atomic(&config.out.join("metrics.csv"), table.as_bytes())?;
    Ok(())
}

fn cmd_predict(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset_flag: Option<PathBuf>,
    t: usize,
) -> Result<()> {
    let checkpoint_path = checkpoint
        .or_else(|| config.checkpoint.clone())
        .unwrap_or_else(|| config.out.join("checkpoint.json"));
    let model = LiftModel::load(&checkpoint_path)?;
    let dataset = load_dataset(config, dataset_flag)?;
    let (l, h) = (model.hyper.lookback, model.hyper.horizon);
    if t + l > dataset.len() {
        return Err(LiftError::InvalidInput(format!(
            "window start {t} needs {l} observations but the dataset has {}",
            dataset.len()
        )));
    }
    let lookback = dataset.window(t, l);
    let stats = normalize::fit(&lookback)?;
    let norm = normalize::apply(&lookback, &stats)?;
    let leads = estimate_leads(&norm, model.hyper.k)?;
    let refined = model.forward(&lookback, &leads)?;
    let plain = model.backbone_forward(&lookback)?;

    let mut csv = String::from("channel,name,step,preliminary,refined\n");
    for c in 0..dataset.channels() {
        for i in 0..h {
            let _ = writeln!(
                csv,
                "{c},{},{},{},{}",
                dataset.channel_names()[c],
                i + 1,
                plain[c][i],
                refined[c][i]
            );
        }
    }
    let path = config.out.join("predictions.csv");
    data::write_atomic(&path, csv.as_bytes())?;
    println!("wrote {} (window start {t})", path.display());
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<()> {
    let (c, l, h) = (4usize, config.train.lookback.min(16), config.train.horizon.min(8));
    let hyper = Hyper {
        channels: c,
        lookback: l,
        horizon: h.min(l),
        k: config.train.k.min(2),
        states: config.train.states.min(2),
        state_input: config.state_input,
        grad_through_shift: config.train.grad_through_shift,
        per_channel_backbone: config.per_channel_backbone,
    };
    let mut model = LiftModel::init(hyper.clone(), config.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed);
    for (_, tensor) in
        training::tensor_slices_mut(&mut model.backbone, &mut model.refiner, true)
    {
        for v in tensor {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
    let panel: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..hyper.lookback + hyper.horizon)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect()
        })
        .collect();
    let lookback: Vec<Vec<f64>> = panel.iter().map(|r| r[..hyper.lookback].to_vec()).collect();
    let truth: Vec<Vec<f64>> = panel.iter().map(|r| r[hyper.lookback..].to_vec()).collect();
    let stats = normalize::fit(&lookback)?;
    let norm = normalize::apply(&lookback, &stats)?;
    let leads = estimate_leads(&norm, hyper.k)?;
    let batch = [BatchSample {
        lookback: &lookback,
        truth: &truth,
        leads: &leads,
        preds_override: None,
    }];

    let mut csv = String::from("mode,shift_grad,tensor,max_rel_err,analytic,numeric,pass\n");
    let mut all_pass = true;
    for frozen in [false, true] {
        for through in [false, true] {
            let flags = GradFlags {
                frozen_backbone: frozen,
                grad_through_shift: through,
            };
            let checks = gradient_check(&model, &batch, flags, GRADCHECK_STEP)?;
            for check in checks {
                let pass = check.passed(GRADCHECK_REL_TOL);
                all_pass &= pass;
                let mode = if frozen { "frozen" } else { "joint" };
                let _ = writeln!(
                    csv,
                    "{mode},{through},{},{:.3e},{},{},{}",
                    check.name, check.max_rel_err, check.analytic, check.numeric, pass
                );
                println!(
                    "{mode:6} shift={through:5} {:24} worst rel err {:.3e} [{}]",
                    check.name,
                    check.max_rel_err,
                    if pass { "pass" } else { "FAIL" }
                );
            }
        }
    }
    data::write_atomic(&config.out.join("gradcheck.csv"), csv.as_bytes())?;
    if all_pass {
        println!("all gradient checks passed (tolerance {GRADCHECK_REL_TOL})");
        Ok(())
    } else {
        Err(LiftError::TrainingDiverged {
            epoch: 0,
            detail: "gradient check failed".into(),
        })
    }
}

/// Maps an error to the process exit code:
/// 1 usage, 2 data, 3 numeric divergence.
pub fn exit_code(err: &LiftError) -> i32 {
    match err {
        LiftError::InvalidInput(_) | LiftError::UnsupportedConfiguration(_) => 1,
        LiftError::TrainingDiverged { .. } => 3,
        _ => 2,
    }
}

/// Baseline used by evaluations: the same training loop with the refiner
/// left untouched (exposed for tests and scripts).
pub fn train_backbone_baseline(
    model: &LiftModel,
    dataset: &Dataset,
    splits: &crate::data::Splits,
    config: &crate::training::TrainConfig,
    strict: bool,
) -> Result<TrainReport> {
    train_backbone_only(model.clone(), dataset, splits, config, strict)
}

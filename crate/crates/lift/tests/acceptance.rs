//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `cargo test --test acceptance -- --nocapture`).

use lift::data::{extract_window, gen_synthetic, split, window_starts, PlantedLead, SyntheticSpec};
use lift::lead::{estimate_leads, LeadEntry, LeadSet};
use lift::model::{Hyper, LiftModel};
use lift::normalize;
use lift::refiner::StateInput;
use lift::spectral::{cross_correlation_all_lags, irfft, rfft};
use lift::training::{
    gradient_check, mse, train, train_backbone_only, BatchSample, GradFlags, TrainConfig,
    TrainMode, GRADCHECK_REL_TOL, GRADCHECK_STEP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn normalize_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - mean) / std).collect()
}

#[test]
fn oracle_equivalence_cross_correlation() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l = rng.gen_range(8..=128);
        let v = normalize_row(&(0..l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let u = normalize_row(&(0..l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let fast = cross_correlation_all_lags(&v, &u).unwrap();
        for d in 0..l {
            let slow: f64 =
                (0..l).map(|i| u[(i + l - d) % l] * v[i]).sum::<f64>() / l as f64;
            worst = worst.max((fast[d] - slow).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        "oracle equivalence",
        worst < 1e-9 && secs < 10.0,
        &format!("worst |fast - brute| = {worst:.2e} over 200 instances in {secs:.2}s"),
    );
}

fn recovery_spec(noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        channels: 10,
        len: 5000,
        pairs: (0..5)
            .map(|i| PlantedLead {
                lagged: 5 + i,
                leader: i,
                step: [4, 7, 10, 13, 16][i],
                sign: if i % 2 == 0 { 1.0 } else { -1.0 },
                weight: 1.0,
            })
            .collect(),
        noise,
        seed,
        sinusoids: 3,
        ar_coeff: 0.7,
        ar_std: 0.8,
    }
}

fn recovery_rate(noise: f64) -> f64 {
    let l = 128usize;
    let (dataset, truth) = gen_synthetic(&recovery_spec(noise, 77)).unwrap();
    let stride = (dataset.len() - l) / 500;
    let starts: Vec<usize> = (0..500).map(|i| i * stride).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for &s in &starts {
        let window = dataset.window(s, l);
        let stats = normalize::fit(&window).unwrap();
        let norm = normalize::apply(&window, &stats).unwrap();
        let sets = estimate_leads(&norm, 4).unwrap();
        for pair in &truth {
            total += 1;
            let top = &sets[pair.lagged].entries[0];
            if top.valid && top.indicator == pair.leader && top.step == pair.step {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

#[test]
fn planted_lead_recovery() {
    let noisy = recovery_rate(0.05);
    let clean = recovery_rate(0.0);
    report(
        "planted-lead recovery",
        noisy >= 0.95 && clean == 1.0,
        &format!("rank-1 exact-step rate: {noisy:.4} at sigma=0.05, {clean:.4} at sigma=0"),
    );
}

#[test]
fn peak_constraint_guard() {
    let l = 32usize;
    let step = l + 2;
    let mut violations = 0usize;
    for seed in 0..100u64 {
        let spec = SyntheticSpec {
            channels: 2,
            len: 200,
            pairs: vec![PlantedLead {
                lagged: 1,
                leader: 0,
                step,
                sign: 1.0,
                weight: 1.0,
            }],
            noise: 0.0,
            seed,
            sinusoids: 3,
            ar_coeff: 0.7,
            ar_std: 0.8,
        };
        let (dataset, _) = gen_synthetic(&spec).unwrap();
        let start = dataset.len() - l;
        let window = dataset.window(start, l);
        let stats = normalize::fit(&window).unwrap();
        let norm = normalize::apply(&window, &stats).unwrap();
        let r = cross_correlation_all_lags(&norm[1], &norm[0]).unwrap();
        if let Some(peak) = lift::lead::peak_argmax(&r).unwrap() {
            let interior = peak.step >= 1
                && peak.step <= l - 2
                && r[peak.step - 1].abs() < r[peak.step].abs()
                && r[peak.step].abs() > r[peak.step + 1].abs();
            if peak.step == l - 1 || !interior {
                violations += 1;
            }
        }
    }
    report(
        "peak-constraint guard",
        violations == 0,
        &format!("{violations}/100 seeds returned a boundary or non-peak step"),
    );
}

/// Leads covering both shift branches (step < H and step >= H), a negative
/// sign, and an invalid padded slot.
fn crafted_leads(c: usize, l: usize, h: usize, k: usize) -> Vec<LeadSet> {
    (0..c)
        .map(|j| {
            let mut entries = vec![LeadEntry {
                indicator: (j + 1) % c,
                step: 3,
                raw_abs_corr: 0.8,
                sign: if j % 2 == 0 { 1.0 } else { -1.0 },
                valid: true,
            }];
            if k > 1 {
                entries.push(LeadEntry {
                    indicator: (j + 2) % c,
                    step: (h + 1).min(l - 2),
                    raw_abs_corr: 0.5,
                    sign: 1.0,
                    valid: true,
                });
            }
            LeadSet::new(j, entries, k)
        })
        .collect()
}

#[test]
fn gradient_verification() {
    let started = Instant::now();
    let (c, l, h, k, n) = (4usize, 16usize, 8usize, 2usize, 2usize);
    let hyper = Hyper {
        channels: c,
        lookback: l,
        horizon: h,
        k,
        states: n,
        state_input: StateInput::Normalized,
        grad_through_shift: false,
        per_channel_backbone: false,
    };
    let mut worst = 0.0f64;
    let mut worst_at = String::from("none above the absolute floor");
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let mut model = LiftModel::init(hyper.clone(), seed).unwrap();
        for (_, tensor) in
            lift::training::tensor_slices_mut(&mut model.backbone, &mut model.refiner, true)
        {
            for v in tensor {
                *v += 0.05 * rng.gen_range(-1.0f64..1.0);
            }
        }
        let panel: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..l + h).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let lookback: Vec<Vec<f64>> = panel.iter().map(|r| r[..l].to_vec()).collect();
        let truth: Vec<Vec<f64>> = panel.iter().map(|r| r[l..].to_vec()).collect();
        let leads = crafted_leads(c, l, h, k);
        let batch = [BatchSample {
            lookback: &lookback,
            truth: &truth,
            leads: &leads,
            preds_override: None,
        }];
        for frozen in [false, true] {
            for through in [false, true] {
                let flags = GradFlags {
                    frozen_backbone: frozen,
                    grad_through_shift: through,
                };
                for check in gradient_check(&model, &batch, flags, GRADCHECK_STEP).unwrap() {
                    if check.max_rel_err > worst {
                        worst = check.max_rel_err;
                        worst_at = format!(
                            "{} (seed {seed}, frozen={frozen}, shift={through})",
                            check.name
                        );
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        "gradient verification",
        worst <= GRADCHECK_REL_TOL && secs < 60.0,
        &format!("worst relative error {worst:.2e} at {worst_at}; {secs:.1}s for 20 seeds x 4 settings"),
    );
}

#[test]
fn pass_through_identity() {
    let hyper = Hyper {
        channels: 6,
        lookback: 32,
        horizon: 12,
        k: 3,
        states: 2,
        state_input: StateInput::Normalized,
        grad_through_shift: false,
        per_channel_backbone: false,
    };
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31_000 + seed);
        let model = LiftModel::init(hyper.clone(), seed).unwrap();
        let raw: Vec<Vec<f64>> = (0..hyper.channels)
            .map(|_| (0..hyper.lookback).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let stats = normalize::fit(&raw).unwrap();
        let norm = normalize::apply(&raw, &stats).unwrap();
        let leads = estimate_leads(&norm, hyper.k).unwrap();
        let refined = model.forward(&raw, &leads).unwrap();
        let plain = model.backbone_forward(&raw).unwrap();
        for (a, b) in refined.iter().flatten().zip(plain.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        "pass-through identity",
        worst < 1e-9,
        &format!("max |refined - backbone| = {worst:.2e} over 50 seeds"),
    );
}

#[test]
fn end_to_end_improvement() {
    let (l, h, k, n) = (128usize, 24usize, 4usize, 2usize);
    let hyper = Hyper {
        channels: 10,
        lookback: l,
        horizon: h,
        k,
        states: n,
        state_input: StateInput::Normalized,
        grad_through_shift: false,
        per_channel_backbone: false,
    };
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let run_started = Instant::now();
        let spec = SyntheticSpec {
            channels: 10,
            len: 5000,
            pairs: (0..5)
                .map(|i| PlantedLead {
                    lagged: 5 + i,
                    leader: i,
                    step: [4, 8, 12, 16, 20][i],
                    sign: if i % 2 == 0 { 1.0 } else { -1.0 },
                    weight: 1.0,
                })
                .collect(),
            noise: 0.05,
            seed: 1000 + seed,
            sinusoids: 3,
            ar_coeff: 0.7,
            ar_std: 0.8,
        };
        let (dataset, _) = gen_synthetic(&spec).unwrap();
        let splits = split(&dataset).unwrap();
        let cache =
            lift::lead::precompute_leads(&dataset, splits.train.clone(), l, k, 2).unwrap();
        let config = TrainConfig {
            lr: 1e-3,
            epochs: 15,
            batch_size: 32,
            seed,
            mode: TrainMode::Joint,
            pretrain_epochs: 0,
            k,
            states: n,
            lookback: l,
            horizon: h,
            stride: 2,
            grad_through_shift: false,
            patience: 5,
            lr_grid: None,
        };
        let init = LiftModel::init(hyper.clone(), seed).unwrap();
        let refined_report =
            train(init.clone(), &dataset, &splits, &cache, &config, false).unwrap();
        let baseline_report =
            train_backbone_only(init.clone(), &dataset, &splits, &config, false).unwrap();

        let starts = window_starts(splits.test.clone(), l, h, 2, false);
        let (mut refined_mse, mut baseline_mse) = (0.0, 0.0);
        for &s in &starts {
            let w = extract_window(&dataset, s, l, h);
            let stats = normalize::fit(&w.lookback).unwrap();
            let norm = normalize::apply(&w.lookback, &stats).unwrap();
            let leads = estimate_leads(&norm, k).unwrap();
            let refined = refined_report.model.forward(&w.lookback, &leads).unwrap();
            let plain = baseline_report.model.backbone_forward(&w.lookback).unwrap();
            refined_mse += mse(&refined, &w.horizon).unwrap();
            baseline_mse += mse(&plain, &w.horizon).unwrap();
        }
        let ratio = refined_mse / baseline_mse;
        let secs = run_started.elapsed().as_secs_f64();
        println!("  seed {seed}: test MSE ratio {ratio:.4} in {secs:.1}s");
        assert!(secs < 300.0, "run exceeded the 5-minute budget: {secs:.1}s");
        ratios.push(ratio);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[2];
    report(
        "end-to-end improvement",
        median <= 0.90,
        &format!("median refined/backbone test MSE ratio {median:.4} over 5 seeds"),
    );
}

#[test]
fn normalization_and_spectral_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut worst_norm = 0.0f64;
    let mut worst_fft = 0.0f64;
    let mut worst_parseval = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(1..6);
        let l = rng.gen_range(4..96);
        let window: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..l).map(|_| rng.gen_range(-50.0..50.0)).collect())
            .collect();
        let stats = normalize::fit(&window).unwrap();
        let back =
            normalize::invert(&normalize::apply(&window, &stats).unwrap(), &stats).unwrap();
        for (a, b) in window.iter().flatten().zip(back.iter().flatten()) {
            worst_norm = worst_norm.max((a - b).abs() / a.abs().max(1.0));
        }

        let x = &window[0];
        let s = rfft(x).unwrap();
        let rt = irfft(&s, l).unwrap();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&rt) {
            worst_fft = worst_fft.max((a - b).abs() / scale);
        }
        let time: f64 = x.iter().map(|v| v * v).sum();
        let mut freq = s.bin(0).amplitude().powi(2);
        let interior_end = if l % 2 == 0 { s.len() - 1 } else { s.len() };
        for f in 1..interior_end {
            freq += 2.0 * s.bin(f).amplitude().powi(2);
        }
        if l % 2 == 0 {
            freq += s.bin(s.len() - 1).amplitude().powi(2);
        }
        freq /= l as f64;
        worst_parseval = worst_parseval.max((time - freq).abs() / time.abs().max(1.0));
    }
    report(
        "normalization and spectral round trips",
        worst_norm < 1e-12 && worst_fft < 1e-12 && worst_parseval < 1e-9,
        &format!(
            "norm round-trip {worst_norm:.2e}, fft round-trip {worst_fft:.2e}, parseval {worst_parseval:.2e}"
        ),
    );
}

#[test]
fn train_determinism() {
    let (l, h, k, n) = (24usize, 8usize, 2usize, 2usize);
    let spec = SyntheticSpec {
        channels: 4,
        len: 400,
        pairs: vec![PlantedLead {
            lagged: 2,
            leader: 0,
            step: 5,
            sign: 1.0,
            weight: 1.0,
        }],
        noise: 0.05,
        seed: 11,
        sinusoids: 3,
        ar_coeff: 0.7,
        ar_std: 0.8,
    };
    let (dataset, _) = gen_synthetic(&spec).unwrap();
    let splits = split(&dataset).unwrap();
    let cache = lift::lead::precompute_leads(&dataset, splits.train.clone(), l, k, 1).unwrap();
    let hyper = Hyper {
        channels: 4,
        lookback: l,
        horizon: h,
        k,
        states: n,
        state_input: StateInput::Normalized,
        grad_through_shift: false,
        per_channel_backbone: false,
    };
    let config = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        batch_size: 16,
        seed: 42,
        mode: TrainMode::Joint,
        pretrain_epochs: 0,
        k,
        states: n,
        lookback: l,
        horizon: h,
        stride: 1,
        grad_through_shift: false,
        patience: 5,
        lr_grid: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for run in 0..2 {
        let model = LiftModel::init(hyper.clone(), config.seed).unwrap();
        let report = train(model, &dataset, &splits, &cache, &config, false).unwrap();
        let path = dir.path().join(format!("ckpt{run}.json"));
        report.model.save(&path).unwrap();
        paths.push(path);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    report(
        "train determinism",
        a == b,
        &format!("checkpoints are byte-identical ({} bytes)", a.len()),
    );
}

#[test]
fn softmax_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..9);
        let mut raws: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        raws.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let entries: Vec<LeadEntry> = raws
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
        let set = LeadSet::new(0, entries, k);
        let sum: f64 = set.norm_coeffs.iter().sum();
        let e = std::f64::consts::E;
        let self_term = e / (e + raws.iter().map(|r| r.exp()).sum::<f64>());
        worst = worst.max((sum + self_term - 1.0).abs());
    }
    report(
        "softmax identity",
        worst < 1e-12,
        &format!("max |sum + self-term - 1| = {worst:.2e} over 1000 vectors"),
    );
}

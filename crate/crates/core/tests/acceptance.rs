//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rewind_guard::baselines::{evaluate_detectors, Detector, EvalOptions};
use rewind_guard::checkpoint::{build_database, fit_pca, kde_log_density, select_template, silverman_bandwidth, CheckpointDatabase};
use rewind_guard::cli::{run_bench, BenchConfig};
use rewind_guard::conformal::{collect_scores, cp_threshold, cp_threshold_scores, replay_tide, trimmed_frames, CalibrationCorpus};
use rewind_guard::harness::{parse_disturbances, scripted_annotations, EpisodeRun, Harness, ScenarioConfig};
use rewind_guard::tide::compute_tide;
use rewind_guard::tracker::Guard;
use rewind_guard::types::{ActionChunk, AggregatedPlan, EpisodeRecord, StdConvention};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    check(elapsed.as_secs_f64() < limit_s, format!("{detail}; {:.2} s (limit {limit_s} s)", elapsed.as_secs_f64()))
}

fn records(runs: Vec<EpisodeRun>) -> Vec<EpisodeRecord> {
    runs.into_iter().map(|r| r.record).collect()
}

/// Threshold and checkpoint database from `n` nominal episodes.
fn calibrate(cfg: &ScenarioConfig, seed: u64, n: usize) -> (f64, CheckpointDatabase) {
    let runs = Harness::new(cfg.clone()).unwrap().generate(seed, n).unwrap();
    let anns: Vec<_> = runs.iter().map(|r| scripted_annotations(&r.task, &r.record).unwrap()).collect();
    let recs = records(runs);
    let q_hat = cp_threshold(&collect_scores(&recs, &cfg.guard).unwrap(), cfg.guard.alpha).unwrap().q_hat;
    (q_hat, build_database(&recs, &anns, &cfg.guard).unwrap())
}

/// Trimmed valid TIDE values from consecutive nominal episodes, cut to `n`.
fn nominal_frames(h: &Harness, seed: u64, n: usize) -> Vec<f64> {
    let cfg = &h.config().guard;
    let mut out = Vec::with_capacity(n);
    let mut index = 0;
    while out.len() < n {
        let rec = h.run(seed, index, None).unwrap().record;
        let tide = replay_tide(&rec, cfg).unwrap();
        out.extend(trimmed_frames(rec.len(), cfg.trim_delta).filter(|&i| tide[i].valid).map(|i| tide[i].value));
        index += 1;
    }
    out.truncate(n);
    out
}

fn coverage() -> Outcome {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.guard.alpha = 0.05;
    let h = Harness::new(cfg).unwrap();
    let cal = nominal_frames(&h, 103, 2000);
    let held = nominal_frames(&h, 203, 2000);
    let q_hat = cp_threshold_scores(&cal, 0.05).unwrap();
    let rate = held.iter().filter(|&&v| v > q_hat).count() as f64 / held.len() as f64;
    let bound = 0.05 + 3.0 * (0.05f64 / 2000.0).sqrt();
    check(rate <= bound, format!("held-out flag rate {rate:.4} <= {bound:.4}"))
        .and_then(|d| within(start.elapsed(), 30.0, d))
}

fn cp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..500 {
        let n = rng.gen_range(1..=400);
        // Small integer scores make ties common.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..50) as f64 * 0.5).collect();
        let a = rng.gen_range(1..1000u64);
        let alpha = a as f64 / 1000.0;
        // ceil((n + 1)(1 - a/1000)) in integers.
        let k = ((n as u64 + 1) * (1000 - a)).div_ceil(1000) as usize;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let expected = if k > n { f64::INFINITY } else { sorted[k.max(1) - 1] };
        let got = cp_threshold_scores(&scores, alpha).unwrap();
        if got != expected {
            return Err(format!("trial {trial}: n = {n}, alpha = {alpha}: got {got}, oracle {expected}"));
        }
        let corpus = CalibrationCorpus::from_scores(scores).unwrap();
        if cp_threshold(&corpus, alpha).unwrap().q_hat != expected {
            return Err(format!("trial {trial}: corpus path disagrees"));
        }
    }
    Ok("500 random (corpus, alpha) pairs match the sorted order statistic exactly".into())
}

fn tide_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (b, t, d) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let p: Array3<f64> = Array3::from_shape_simple_fn((b, t, d), || rng.gen_range(-5.0..5.0));
        let c: Array3<f64> = Array3::from_shape_simple_fn((b, t, d), || rng.gen_range(-5.0..5.0));
        let mut sum = 0.0;
        for i in 0..b {
            for j in 0..t {
                for k in 0..d {
                    sum += (p[[i, j, k]] - c[[i, j, k]]).powi(2);
                }
            }
        }
        let oracle = sum / (b * t * d) as f64;
        let got = compute_tide(&AggregatedPlan::full(p, 0).unwrap(), &ActionChunk::new(c).unwrap()).unwrap();
        if !got.valid {
            return Err("full plan reported an invalid score".into());
        }
        worst = worst.max((got.value - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    check(worst <= 1e-12, format!("200 tensor pairs, worst relative error {worst:.2e}"))
}

fn temporal_consistency() -> Outcome {
    let start = Instant::now();
    let mut quiet = ScenarioConfig::default();
    quiet.noise_sigma = 0.0;
    let bound = quiet.lipschitz.powi(2) * quiet.speed.powi(2);
    let h = Harness::new(quiet.clone()).unwrap();
    let mut max_tide: f64 = 0.0;
    for index in 0..20 {
        let rec = h.run(4, index, None).unwrap().record;
        for s in replay_tide(&rec, &quiet.guard).unwrap().into_iter().filter(|s| s.valid) {
            max_tide = max_tide.max(s.value);
        }
    }
    if max_tide > bound {
        return Err(format!("noiseless TIDE reached {max_tide:e} > L^2 eps^2 = {bound:e}"));
    }

    // Threshold from the default (noisy) harness.
    let noisy = ScenarioConfig::default();
    let recs = records(Harness::new(noisy.clone()).unwrap().generate(1, 100).unwrap());
    let q_hat = cp_threshold(&collect_scores(&recs, &noisy.guard).unwrap(), noisy.guard.alpha).unwrap().q_hat;

    quiet.disturbances = parse_disturbances("state_jump@wp0+30,mag=0.5").unwrap();
    let hj = Harness::new(quiet.clone()).unwrap();
    let mut min_jump = f64::INFINITY;
    for index in 0..10 {
        let run = hj.run(4, index, None).unwrap();
        let fired = run.fired.first().ok_or("jump never fired")?.0;
        let tide = replay_tide(&run.record, &quiet.guard).unwrap();
        let first = (0..run.record.len())
            .find(|&i| run.record.steps[i].t >= fired && tide[i].valid)
            .ok_or("no valid frame after the jump")?;
        min_jump = min_jump.min(tide[first].value);
    }
    check(
        min_jump > q_hat,
        format!("noiseless max TIDE {max_tide:.2e} <= {bound:.0e}; first post-jump TIDE >= {min_jump:.3} > q_hat {q_hat:.3e}"),
    )
    .and_then(|d| within(start.elapsed(), 5.0, d))
}

fn detection_quality() -> Outcome {
    let start = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.guard.alpha = 2e-4;
    let calibration = records(Harness::new(cfg.clone()).unwrap().generate(11, 400).unwrap());

    // Deployment sees a shifted appearance that leaves the task unchanged.
    let mut deploy = cfg.clone();
    deploy.appearance_drift = 0.2;
    let mut eval = records(Harness::new(deploy.clone()).unwrap().generate(21, 50).unwrap());
    deploy.disturbances = parse_disturbances("state_jump@wp0+30").unwrap();
    eval.extend(records(Harness::new(deploy).unwrap().generate(22, 50).unwrap()));

    let reports = evaluate_detectors(&calibration, &eval, &cfg.guard, &EvalOptions::default()).unwrap();
    let acc = |d: Detector| reports.iter().find(|r| r.detector == d).unwrap().metrics.balanced_accuracy;
    let (tide, maha, clus) = (acc(Detector::Tide), acc(Detector::Mahalanobis), acc(Detector::Clusters));
    let summary: Vec<String> = reports
        .iter()
        .map(|r| format!("{} TPR {:.2} TNR {:.2} Acc {:.3}", r.detector, r.metrics.tpr, r.metrics.tnr, r.metrics.balanced_accuracy))
        .collect();
    check(tide >= 0.95 && tide > maha && tide > clus, summary.join("; "))
        .and_then(|d| within(start.elapsed(), 120.0, d))
}

/// Three-waypoint scenario whose jump holds the robot off course.
fn perturbed_scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.guard.settle_window = 20;
    cfg
}

fn recovery_uplift() -> Outcome {
    let start = Instant::now();
    let base = perturbed_scenario();
    let (q_hat, db) = calibrate(&base, 1, 100);
    let mut cfg = base;
    cfg.disturbances = parse_disturbances("state_jump@wp0+30,mag=0.5").unwrap();
    let h = Harness::new(cfg.clone()).unwrap();
    let (mut on, mut off) = (0, 0);
    for index in 0..40 {
        off += h.run(5, index, None).unwrap().succeeded() as usize;
        let mut guard = Guard::new(cfg.guard.clone(), db.clone(), q_hat, 1, 2).unwrap();
        on += h.run(5, index, Some(&mut guard)).unwrap().succeeded() as usize;
    }
    check(off * 4 <= 40 && on * 4 >= 3 * 40, format!("guard off {off}/40, guard on {on}/40"))
        .and_then(|d| within(start.elapsed(), 120.0, d))
}

fn repeated_disturbance() -> Outcome {
    let mut base = ScenarioConfig::default();
    base.start = [0.1, 0.15];
    base.waypoints = vec![[0.35, 0.2], [0.6, 0.3], [0.8, 0.5], [0.75, 0.8]];
    let (q_hat, db) = calibrate(&base, 1, 60);
    let mut cfg = base;
    cfg.disturbances =
        parse_disturbances("object_reset@wp2+25,to=1,mag=0.07;object_reset@wp2+25,to=0,mag=0.07").unwrap();
    let h = Harness::new(cfg.clone()).unwrap();
    let mut lines = Vec::new();
    for index in 0..20 {
        let mut guard = Guard::new(cfg.guard.clone(), db.clone(), q_hat, 1, 2).unwrap();
        let run = h.run(3, index, Some(&mut guard)).unwrap();
        if run.fired.len() != 2 {
            return Err(format!("episode {index}: {} disturbances fired", run.fired.len()));
        }
        // The recovery answering each disturbance.
        let answers: Vec<_> = run
            .fired
            .iter()
            .map(|(t, _)| run.recoveries.iter().find(|r| r.t >= *t))
            .collect::<Option<Vec<_>>>()
            .ok_or(format!("episode {index}: a disturbance went unanswered"))?;
        let (first, second) = (answers[0], answers[1]);
        if std::ptr::eq(first, second) || second.t_star > first.t_star || !run.succeeded() {
            return Err(format!(
                "episode {index}: recoveries at t* = {} then {}, success {}",
                first.t_star,
                second.t_star,
                run.succeeded()
            ));
        }
        lines.push((first.slot, second.slot));
    }
    Ok(format!("20/20 episodes recovered twice with non-increasing t*; slots {:?}", lines[0]))
}

fn kde_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (e, d) = (rng.gen_range(1..=50), rng.gen_range(1..=8));
        let pts = Array2::from_shape_simple_fn((e, d), || rng.sample::<f64, _>(StandardNormal));
        let q = Array1::from_shape_simple_fn(d, || rng.gen_range(-2.0..2.0));
        let h = rng.gen_range(0.3..3.0);
        let mut acc = 0.0;
        for p in pts.outer_iter() {
            let sq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += (2.0 * PI * h * h).powf(-(d as f64) / 2.0) * (-sq / (2.0 * h * h)).exp();
        }
        let naive = (acc / e as f64).ln();
        worst = worst.max((kde_log_density(pts.view(), h, q.view()).unwrap() - naive).abs());
    }
    if worst > 1e-10 {
        return Err(format!("log-density error {worst:e}"));
    }

    for trial in 0..100 {
        let (e, d) = (rng.gen_range(2..=50), rng.gen_range(1..=32));
        let cloud = Array2::from_shape_simple_fn((e, d), || rng.sample::<f64, _>(StandardNormal));
        let pca = fit_pca(cloud.view(), 0.95).unwrap();
        let z = pca.project_rows(cloud.view()).unwrap();
        let h = silverman_bandwidth(z.view(), StdConvention::Sample).unwrap();
        // Exhaustive argmax, first index on ties.
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..e {
            let mut acc = 0.0;
            for j in 0..e {
                let sq: f64 = (0..z.ncols()).map(|c| (z[[i, c]] - z[[j, c]]).powi(2)).sum();
                acc += (-sq / (2.0 * h * h)).exp();
            }
            if acc > best.1 {
                best = (i, acc);
            }
        }
        let got = select_template(cloud.view(), 0.95, StdConvention::Sample).unwrap();
        if got != best.0 {
            return Err(format!("trial {trial} (E = {e}, d = {d}): selected {got}, brute force {}", best.0));
        }
    }
    Ok(format!("KDE worst log error {worst:.1e}; 100 template selections match brute force"))
}

fn overhead() -> Outcome {
    let report = run_bench(&BenchConfig::default()).unwrap();
    let t = report.total;
    check(
        t.mean < 1e-3,
        format!(
            "K = 10, d = 64, T = 16, D = 14: total {:.2e} +- {:.1e} s per step (tide {:.1e}, cos {:.1e}, slots {:.1e})",
            t.mean, t.std, report.tide.mean, report.cosine.mean, report.bookkeeping.mean
        ),
    )
}

fn neutrality() -> Outcome {
    let cfg = ScenarioConfig::default();
    let (q_hat, db) = calibrate(&cfg, 1, 100);
    let h = Harness::new(cfg.clone()).unwrap();
    for index in 0..20 {
        let mut guard = Guard::new(cfg.guard.clone(), db.clone(), q_hat, 1, 2).unwrap();
        let guarded = h.run(9, index, Some(&mut guard)).unwrap();
        let bare = h.run(9, index, None).unwrap();
        let same = guarded.actions().zip(bare.actions()).all(|(a, b)| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same || guarded.record.len() != bare.record.len() {
            return Err(format!("episode {index}: traces differ ({} recoveries)", guarded.recoveries.len()));
        }
    }
    Ok("20/20 action traces bit-identical".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("conformal coverage", coverage),
        ("conformal order-statistic oracle", cp_oracle),
        ("TIDE oracle", tide_oracle),
        ("temporal consistency bound", temporal_consistency),
        ("detection quality", detection_quality),
        ("recovery uplift", recovery_uplift),
        ("repeated-disturbance resilience", repeated_disturbance),
        ("KDE and template oracles", kde_oracles),
        ("monitoring overhead", overhead),
        ("guard neutrality", neutrality),
    ];
    let mut failed = Vec::new();
    println!();
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                println!("[{:>2}] FAIL {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

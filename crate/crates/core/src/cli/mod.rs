//! Pipeline commands behind the `rewind-guard` binary.
//!
//! Each command reads and writes plain files, writes a [`RunManifest`] into
//! its output directory and is deterministic given its seed and
//! configuration.

mod bench;
mod manifest;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baselines::{evaluate_detectors, write_report_csv, Detector, DetectorReport, EvalOptions};
use crate::checkpoint::{build_database, CheckpointDatabase};
use crate::conformal::{collect_scores, cp_threshold, Threshold};
use crate::error::{Error, Result};
use crate::harness::{scripted_annotations, EpisodeRun, Harness, ScenarioConfig};
use crate::tracker::{csv_error, write_telemetry_csv, Guard};
use crate::types::{load_annotations, load_episode_dir, save_annotations, save_episode, GuardConfig, Outcome};

pub use bench::{run_bench, write_bench_csv, BenchConfig, BenchReport, StageStats};
pub use manifest::{config_digest, digest_path, sha256_file, ArtifactRef, RunManifest, ARTIFACT_FORMAT, MANIFEST_FILE};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const DATABASE_FILE: &str = "database.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const TELEMETRY_DIR: &str = "telemetry";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub episodes: usize,
    pub successes: usize,
    pub recoveries: usize,
}

fn episode_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn write_outcomes(path: &Path, runs: &[EpisodeRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["episode", "outcome", "failure_onset", "steps", "recoveries", "disturbances"])
        .map_err(|e| csv_error(path, e))?;
    for r in runs {
        let fired: Vec<String> = r.fired.iter().map(|(t, d)| format!("{d}|t={t}")).collect();
        w.write_record([
            r.record.id.clone(),
            match r.record.outcome {
                Outcome::Success => "success".into(),
                Outcome::Failure => "failure".into(),
            },
            r.record.failure_onset.map_or(String::new(), |t| t.to_string()),
            r.record.len().to_string(),
            r.recoveries.len().to_string(),
            fired.join(";"),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summarize(runs: &[EpisodeRun]) -> RunSummary {
    RunSummary {
        episodes: runs.len(),
        successes: runs.iter().filter(|r| r.succeeded()).count(),
        recoveries: runs.iter().map(|r| r.recoveries.len()).sum(),
    }
}

/// Writes episode files, an outcome table and annotations for every
/// episode that reached all of its waypoints.
pub fn cmd_generate(cfg: &ScenarioConfig, n: usize, seed: u64, out: &Path) -> Result<RunSummary> {
    let harness = Harness::new(cfg.clone())?;
    let runs = harness.generate(seed, n)?;
    let mut annotations = Vec::new();
    for r in &runs {
        save_episode(&r.record, &episode_path(out, &r.record.id))?;
        if r.succeeded() {
            annotations.push(scripted_annotations(&r.task, &r.record)?);
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_annotations(&annotations, &out.join(ANNOTATIONS_FILE))?;
    write_outcomes(&out.join(OUTCOMES_FILE), &runs)?;
    RunManifest::new("generate", cfg, vec![seed])?.output(out)?.write(out)?;
    let summary = summarize(&runs);
    log::info!("generated {} episodes ({} successful) in {}", summary.episodes, summary.successes, out.display());
    Ok(summary)
}

/// Calibrates the failure threshold from successful episodes.
pub fn cmd_calibrate(episodes: &Path, guard: &GuardConfig, out: &Path) -> Result<Threshold> {
    guard.validate()?;
    let records = load_episode_dir(episodes)?;
    let corpus = collect_scores(&records, guard)?;
    let threshold = cp_threshold(&corpus, guard.alpha)?;
    let path = out.join(THRESHOLD_FILE);
    threshold.save(&path)?;
    RunManifest::new("calibrate", guard, vec![])?.input(episodes)?.output(&path)?.write(out)?;
    log::info!("q_hat = {:e} from {} frames at alpha = {}", threshold.q_hat, threshold.n, threshold.alpha);
    Ok(threshold)
}

/// Builds the checkpoint database from annotated successful episodes.
pub fn cmd_build_db(episodes: &Path, annotations: &Path, guard: &GuardConfig, out: &Path) -> Result<CheckpointDatabase> {
    guard.validate()?;
    let records = load_episode_dir(episodes)?;
    let anns = load_annotations(annotations)?;
    let db = build_database(&records, &anns, guard)?;
    let path = out.join(DATABASE_FILE);
    db.save(&path)?;
    RunManifest::new("build-db", guard, vec![])?.input(episodes)?.input(annotations)?.output(&path)?.write(out)?;
    log::info!("database with {} slots written to {}", db.num_slots(), path.display());
    Ok(db)
}

/// Artifacts that attach a guard to `cmd_run`.
#[derive(Debug, Clone)]
pub struct GuardArtifacts {
    pub threshold: PathBuf,
    pub database: PathBuf,
    /// `false` monitors and logs telemetry without intervening.
    pub intervene: bool,
}

/// Runs scenario episodes, optionally guarded, and writes episodes,
/// per-episode telemetry and outcomes.
pub fn cmd_run(cfg: &ScenarioConfig, guard: Option<&GuardArtifacts>, n: usize, seed: u64, out: &Path) -> Result<RunSummary> {
    let harness = Harness::new(cfg.clone())?;
    let loaded = match guard {
        Some(g) => Some((Threshold::load(&g.threshold)?, CheckpointDatabase::load(&g.database)?, g.intervene)),
        None => None,
    };
    let mut runs = Vec::with_capacity(n);
    for index in 0..n {
        let run = match &loaded {
            Some((threshold, db, intervene)) => {
                let mut g = Guard::new(cfg.guard.clone(), db.clone(), threshold.q_hat, 1, 2)?.with_intervention(*intervene);
                let run = harness.run(seed, index, Some(&mut g))?;
                let path = out.join(TELEMETRY_DIR).join(format!("{}.csv", run.record.id));
                write_telemetry_csv(&path, db.num_slots(), &run.telemetry)?;
                run
            }
            None => harness.run(seed, index, None)?,
        };
        save_episode(&run.record, &episode_path(out, &run.record.id))?;
        runs.push(run);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_outcomes(&out.join(OUTCOMES_FILE), &runs)?;
    let mut manifest = RunManifest::new("run", cfg, vec![seed])?;
    if let Some(g) = guard {
        manifest = manifest.input(&g.threshold)?.input(&g.database)?;
    }
    manifest.output(out)?.write(out)?;
    let summary = summarize(&runs);
    log::info!(
        "{} / {} episodes succeeded, {} recoveries",
        summary.successes,
        summary.episodes,
        summary.recoveries
    );
    Ok(summary)
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    guard: &'a GuardConfig,
    detectors: Vec<&'static str>,
    clusters: usize,
    scenario: &'a str,
}

/// Scores labelled episodes with each detector and writes `metrics.csv`.
///
/// `calibration` holds successful episodes: the first half (in file order)
/// fits the baselines, the second half sets every threshold.
pub fn cmd_eval(
    calibration: &Path,
    episodes: &Path,
    guard: &GuardConfig,
    opts: &EvalOptions,
    out: &Path,
) -> Result<Vec<DetectorReport>> {
    let cal = load_episode_dir(calibration)?;
    let eval = load_episode_dir(episodes)?;
    let reports = evaluate_detectors(&cal, &eval, guard, opts)?;
    let path = out.join(METRICS_FILE);
    write_report_csv(&path, &reports)?;
    let digest_cfg = EvalConfig {
        guard,
        detectors: opts.detectors.iter().map(|d| Detector::name(*d)).collect(),
        clusters: opts.clusters,
        scenario: &opts.scenario,
    };
    RunManifest::new("eval", &digest_cfg, vec![opts.seed])?
        .input(calibration)?
        .input(episodes)?
        .output(&path)?
        .write(out)?;
    Ok(reports)
}

pub fn cmd_bench(cfg: &BenchConfig, out: &Path) -> Result<BenchReport> {
    let report = run_bench(cfg)?;
    let path = out.join(BENCH_FILE);
    write_bench_csv(&path, &report)?;
    RunManifest::new("bench", cfg, vec![cfg.seed])?.output(&path)?.write(out)?;
    Ok(report)
}

//! Command implementations. Each returns `CliResult<()>` (or a value the
//! binary turns into an exit code); all output paths are created as needed.

use std::path::Path;

use fedema_core::numerics::finite_diff_gradient;
use fedema_core::orchestrator::run_experiment;
use fedema_core::scenegen::{self, GeneratorConfig, PhaseParams};
use fedema_core::segnet::{backward, objective, RegSign};
use fedema_core::seeding::derive_seed;
use fedema_core::{Batch, ExperimentConfig, ModelConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{config_hash, RunConfigFile};
use crate::csvout::{ablation_csv, metrics_csv, AblationRow};
use crate::{CliError, CliResult};

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn say(quiet: bool, line: &str) {
    if !quiet {
        println!("{line}");
    }
}

/// Runs one experiment and writes report.json, metrics.csv, and model.fema
/// into `out_dir`.
pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> CliResult<()> {
    let mut file = RunConfigFile::load(config_path)?;
    if let Some(seed) = seed_override {
        file.experiment.seed = seed;
    }
    run_into(&file.experiment, out_dir, quiet)
}

fn run_into(config: &ExperimentConfig, out_dir: &Path, quiet: bool) -> CliResult<()> {
    ensure_dir(out_dir)?;
    let output = run_experiment(config.clone())?;
    let report_json = serde_json::to_string_pretty(&output.report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("report.json"), report_json)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&output.report))?;
    let meta = CheckpointMeta {
        round: config.rounds,
        algorithm: config.algorithm.tag().to_string(),
        config_hash: config_hash(config),
    };
    save_checkpoint(&out_dir.join("model.fema"), &output.final_model, &meta)?;
    if let Some(last) = output.report.records.last() {
        say(
            quiet,
            &format!(
                "{}: {} rounds, final miou {:.4}, mean objective {:.4}",
                config.algorithm.tag(),
                config.rounds,
                last.ema_current.miou,
                last.mean_objective
            ),
        );
    }
    Ok(())
}

/// Sweeps one hyperparameter axis. Each value runs in its own subdirectory;
/// failures are reported and skipped so one bad cell does not lose the sweep.
pub fn cmd_ablate(
    config_path: &Path,
    out_dir: &Path,
    axis: &str,
    values: &[String],
    seed_override: Option<u64>,
    quiet: bool,
) -> CliResult<()> {
    if values.is_empty() {
        return Err(CliError::Config("ablation needs at least one value".into()));
    }
    let mut file = RunConfigFile::load(config_path)?;
    if let Some(seed) = seed_override {
        file.experiment.seed = seed;
    }
    ensure_dir(out_dir)?;

    let mut rows = Vec::new();
    let mut failures = 0usize;
    for value in values {
        let mut config = file.experiment.clone();
        match axis {
            "lambda" => {
                config.lambda = value
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad lambda value {value:?}")))?;
            }
            "window" => {
                config.window = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("bad window value {value:?}")))?,
                );
                config.beta = None;
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown ablation axis {other:?} (expected lambda or window)"
                )))
            }
        }
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;

        let cell_dir = out_dir.join(format!("{axis}_{value}"));
        match run_experiment(config.clone()) {
            Ok(output) => {
                ensure_dir(&cell_dir)?;
                let report_json = serde_json::to_string_pretty(&output.report)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                std::fs::write(cell_dir.join("report.json"), report_json)?;
                std::fs::write(cell_dir.join("metrics.csv"), metrics_csv(&output.report))?;
                rows.push(AblationRow::from_report(
                    axis,
                    value,
                    config.seed,
                    &output.report,
                ));
                say(
                    quiet,
                    &format!(
                        "{axis}={value}: rounds to threshold {}",
                        output.report.rounds_to_threshold
                    ),
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{axis}={value}: failed: {e}");
            }
        }
    }
    std::fs::write(out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    if rows.is_empty() {
        return Err(CliError::Runtime(format!(
            "all {failures} ablation cells failed"
        )));
    }
    Ok(())
}

/// Compares the analytic gradient against central finite differences on
/// random scene batches and returns the worst relative error seen.
/// `corrupt` perturbs one analytic coordinate and exists so tests can prove
/// the check actually fails on wrong gradients.
pub fn gradcheck_max_rel_err(base_seed: u64, corrupt: bool) -> CliResult<f64> {
    let gen = GeneratorConfig::default();
    let model = ModelConfig {
        feature_dim: gen.feature_dim,
        hidden_dim: 6,
        class_count: gen.class_count,
    };
    let mut worst: f64 = 0.0;
    for draw in 0..5u64 {
        let seed = derive_seed(base_seed, "gradcheck", draw, 0);
        let phase = PhaseParams::for_phase(&gen, (draw % 3) as usize, seed)?;
        let scenes = scenegen::generate_scenes(&gen, &phase, draw << 16, 2, seed);
        let refs: Vec<&_> = scenes.iter().collect();
        let batch: Batch = scenegen::batch_from_scenes(&refs, &model)?;
        let params = {
            let init = model.init_params(seed ^ 0x5a5a);
            // Small random jitter so we never test at a symmetric point.
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xa5a5);
            let jittered: Vec<f64> = init
                .iter()
                .map(|v| v + rng.random_range(-0.05..0.05))
                .collect();
            fedema_core::ParamVector::new(jittered)?
        };
        for &lambda in &[0.0, 0.002, 0.01] {
            for &sign in &[RegSign::Plus, RegSign::Minus] {
                let mut analytic = backward(&model, &params, &batch, lambda, sign)?;
                if corrupt {
                    let mut raw = analytic.into_vec();
                    raw[0] += 0.5;
                    analytic = fedema_core::ParamVector::new(raw)?;
                }
                let numeric = finite_diff_gradient(
                    |p| objective(&model, p, &batch, lambda, sign).expect("objective"),
                    &params,
                    1e-5,
                )?;
                let diff_sq: f64 = analytic
                    .iter()
                    .zip(numeric.iter())
                    .map(|(a, n)| (a - n) * (a - n))
                    .sum();
                let scale = numeric.norm_sq().sqrt().max(1e-8);
                worst = worst.max(diff_sq.sqrt() / scale);
            }
        }
    }
    Ok(worst)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Prints the worst relative error; returns whether it is within tolerance.
pub fn cmd_gradcheck(seed: u64, quiet: bool) -> CliResult<bool> {
    let worst = gradcheck_max_rel_err(seed, false)?;
    say(quiet, &format!("gradcheck max relative error: {worst:e}"));
    Ok(worst <= GRADCHECK_TOLERANCE)
}

/// Generates one phase worth of scenes and writes the binary + manifest pair.
pub fn cmd_export_scenes(
    out_dir: &Path,
    phase: usize,
    count: usize,
    seed: u64,
    quiet: bool,
) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Config("scene count must be > 0".into()));
    }
    ensure_dir(out_dir)?;
    let gen = GeneratorConfig::default();
    let params = PhaseParams::for_phase(&gen, phase, seed)?;
    let scenes = scenegen::generate_scenes(&gen, &params, 0, count, derive_seed(seed, "export", phase as u64, 0));
    let binary = out_dir.join("scenes.fscn");
    let manifest = out_dir.join("scenes.manifest.json");
    scenegen::export_scenes(&gen, &scenes, &binary, &manifest)?;
    say(
        quiet,
        &format!("wrote {count} scenes to {}", binary.display()),
    );
    Ok(())
}

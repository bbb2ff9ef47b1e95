//! `run` subcommand: execute every replicate seed, persist results.json,
//! estimates.csv, and metrics.csv.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::driver::{run_outer, RunRecord};

use super::config::{bundled_config, ExperimentConfig};
use super::{fnv1a_hex, CliError};

/// Versioned on-disk document holding the full run set plus the effective
/// config so the experiment can be replayed bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema_version: u32,
    pub package_version: String,
    pub config: Value,
    pub config_hash: String,
    pub problem_hash: String,
    pub runs: Vec<RunRecord>,
}

/// Execute the `run` subcommand. Returns the process exit code:
/// 0 success, 1 config error, 2 runtime divergence (partial outputs flushed).
pub fn cmd_run(
    config_path: &str,
    sets: &[String],
    seed_list: Option<&str>,
    out_dir: Option<&Path>,
) -> i32 {
    match run_impl(config_path, sets, seed_list, out_dir) {
        Ok(diverged) => {
            if diverged {
                eprintln!("warning: at least one replicate diverged; outputs carry the marker");
                2
            } else {
                0
            }
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn run_impl(
    config_path: &str,
    sets: &[String],
    seed_list: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<bool, CliError> {
    let text = load_config_text(config_path)?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    for set in sets {
        apply_override(&mut value, set)?;
    }
    if let Some(seeds) = seed_list {
        let parsed: Result<Vec<u64>, _> =
            seeds.split(',').map(|s| s.trim().parse::<u64>()).collect();
        let parsed =
            parsed.map_err(|e| CliError::Config(format!("bad --seed-list entry: {e}")))?;
        value["replicates"]["seeds"] = serde_json::json!(parsed);
    }
    let canonical = serde_json::to_string(&value)?;
    let config = ExperimentConfig::from_json(&canonical)?;

    let problem = config.build_problem();
    let outer_cfg = config.build_outer_config(problem.input_dim())?;

    let runs: Vec<RunRecord> = config
        .replicates
        .seeds
        .par_iter()
        .map(|&seed| {
            run_outer(&problem, &outer_cfg, seed).unwrap_or_else(|err| RunRecord {
                master_seed: seed,
                variant: outer_cfg.variant,
                iterations: Vec::new(),
                diverged: Some(err.to_string()),
                stopped_by_tolerance: false,
            })
        })
        .collect();
    let diverged = runs.iter().any(|r| r.diverged.is_some());

    let directory: PathBuf =
        out_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&config.output.directory));
    fs::create_dir_all(&directory)?;

    let document = ResultsDocument {
        schema_version: 1,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::from_str(&canonical)?,
        config_hash: fnv1a_hex(canonical.as_bytes()),
        problem_hash: fnv1a_hex(serde_json::to_string(&value["problem"])?.as_bytes()),
        runs,
    };

    if config.output.formats.iter().any(|f| f == "json") {
        let json = serde_json::to_string_pretty(&document)?;
        fs::write(directory.join("results.json"), json)?;
    }
    if config.output.formats.iter().any(|f| f == "csv") {
        write_metrics_csv(&directory.join("metrics.csv"), &document.runs)?;
        write_estimates_csv(&directory.join("estimates.csv"), &problem, &document.runs)?;
    }
    Ok(diverged)
}

fn load_config_text(config_path: &str) -> Result<String, CliError> {
    let path = Path::new(config_path);
    if path.exists() {
        return Ok(fs::read_to_string(path)?);
    }
    if let Some(text) = bundled_config(config_path) {
        return Ok(text.to_string());
    }
    Err(CliError::Config(format!(
        "config {config_path:?} not found (not a file, and not a bundled config name)"
    )))
}

/// Apply one `--set key.path=value` override to the raw config document.
fn apply_override(value: &mut Value, set: &str) -> Result<(), CliError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value, got {set:?}")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if i + 1 == segments.len() {
            cursor[segment] = parsed;
            return Ok(());
        }
        cursor = cursor
            .get_mut(segment)
            .ok_or_else(|| CliError::Config(format!("unknown config path {path:?}")))?;
    }
    unreachable!("split never yields an empty iterator")
}

fn float_field(v: f64) -> String {
    // shortest round-trip formatting keeps the CSV byte-stable
    format!("{v}")
}

fn write_metrics_csv(path: &Path, runs: &[RunRecord]) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    writer.write_record([
        "seed",
        "outer_iteration",
        "l2_error",
        "avg_width",
        "off_support_norm",
        "misfit",
        "diverged",
    ])?;
    for run in runs {
        for row in &run.iterations {
            writer.write_record([
                run.master_seed.to_string(),
                row.outer_index.to_string(),
                row.l2_error.map(float_field).unwrap_or_default(),
                float_field(row.avg_width),
                row.off_support_norm.map(float_field).unwrap_or_default(),
                float_field(row.misfit),
                String::new(),
            ])?;
        }
        if let Some(reason) = &run.diverged {
            writer.write_record([
                run.master_seed.to_string(),
                run.iterations.len().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("diverged: {reason}"),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn write_estimates_csv(
    path: &Path,
    problem: &crate::model::InverseProblem,
    runs: &[RunRecord],
) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    writer.write_record([
        "seed",
        "outer_iteration",
        "component",
        "truth",
        "estimate",
        "lower",
        "upper",
    ])?;
    for run in runs {
        for row in &run.iterations {
            for (i, &estimate) in row.estimate.iter().enumerate() {
                writer.write_record([
                    run.master_seed.to_string(),
                    row.outer_index.to_string(),
                    i.to_string(),
                    problem
                        .truth
                        .as_ref()
                        .map(|t| float_field(t[i]))
                        .unwrap_or_default(),
                    float_field(estimate),
                    float_field(row.lower[i]),
                    float_field(row.upper[i]),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_keys() {
        let mut v = serde_json::json!({"solver": {"r": 1.0}, "problem": {"seed": 0}});
        apply_override(&mut v, "solver.r=0.5").unwrap();
        assert_eq!(v["solver"]["r"], serde_json::json!(0.5));
        apply_override(&mut v, "problem.seed=9").unwrap();
        assert_eq!(v["problem"]["seed"], serde_json::json!(9));
        assert!(apply_override(&mut v, "nosuch.key=1").is_err());
        assert!(apply_override(&mut v, "bare").is_err());
    }

    #[test]
    fn float_fields_round_trip() {
        assert_eq!(float_field(0.1), "0.1");
        assert_eq!(float_field(1.0), "1");
        let v: f64 = float_field(std::f64::consts::PI).parse().unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }
}

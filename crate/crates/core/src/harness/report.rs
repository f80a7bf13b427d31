use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{run_experiment, ExperimentConfig, ExperimentReport, ExperimentResult};
use crate::numerics::{Precision, Scalar};
use crate::search::write_similarity_csv;

/// Where a run landed and what it reported.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: ExperimentReport,
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename, so
/// readers never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes every artifact of `result` into `<out_root>/<config hash>-s<seed>`.
pub fn emit_report<T: Scalar>(result: &ExperimentResult<T>, out_root: &Path) -> Result<PathBuf> {
    let report = &result.report;
    let dir = out_root.join(format!("{}-s{}", report.config_hash, report.seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let put = |name: &str, bytes: &[u8]| write_atomic(&dir.join(name), bytes);

    put("report.json", serde_json::to_string_pretty(report)?.as_bytes())?;
    put("plan.json", result.model.plan().to_json().as_bytes())?;
    put("plan_events.jsonl", result.events.to_json_lines().as_bytes())?;
    put("config.toml", result.config.to_toml().as_bytes())?;
    put(
        "similarity_superweight.csv",
        &csv_bytes(|b| write_similarity_csv(b, &result.superweight_similarities))?,
    )?;
    put(
        "similarity_coefficient.csv",
        &csv_bytes(|b| write_similarity_csv(b, &result.coefficient_similarities))?,
    )?;
    put("anytime.csv", &csv_bytes(|b| report.anytime.write_csv(b))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda", "accuracy", "loss"])?;
    for p in report.interpolation.iter().flatten() {
        w.write_record([format!("{:?}", p.lambda), format!("{:?}", p.accuracy), format!("{:?}", p.loss)])?;
    }
    put("interpolation.csv", &w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "epoch", "lr", "loss"])?;
    for h in &report.history {
        w.write_record([h.phase.clone(), h.epoch.to_string(), format!("{:?}", h.lr), format!("{:?}", h.loss)])?;
    }
    put("history.csv", &w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["member_id", "layers", "macs", "test_top1", "test_nll", "test_ece"])?;
    for (spec, m) in result.model.members().iter().zip(&report.test.members) {
        w.write_record([
            m.member_id.to_string(),
            spec.layers.len().to_string(),
            spec.macs().to_string(),
            format!("{:?}", m.top1),
            format!("{:?}", m.nll),
            format!("{:?}", m.ece),
        ])?;
    }
    put("members.csv", &w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?)?;

    let extra = serde_json::json!({ "config": result.config, "dataset": result.config.dataset });
    put("checkpoint.swn", &result.model.to_checkpoint(extra)?.encode()?)?;
    Ok(dir)
}

/// Runs `config` at its configured precision and writes the artifacts.
pub fn run_and_emit(config: &ExperimentConfig, out_root: &Path) -> Result<RunSummary> {
    fn go<T: Scalar>(config: &ExperimentConfig, out_root: &Path) -> Result<RunSummary> {
        let result = run_experiment::<T>(config)?;
        let dir = emit_report(&result, out_root)?;
        Ok(RunSummary {
            dir,
            report: result.report,
        })
    }
    match config.precision {
        Precision::F32 => go::<f32>(config, out_root),
        Precision::F64 => go::<f64>(config, out_root),
    }
}

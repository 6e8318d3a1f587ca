//! Report writers: a flat CSV (condition, metric, value, n) and a JSON
//! mirror of the full stability report.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::StabilityReport;

fn fmt(v: f64) -> String {
    // full precision, deterministic
    format!("{v:.12}")
}

/// Flat CSV: one row per (condition, metric). Model-level facts go under the
/// pseudo-condition `_model`.
pub fn to_csv(report: &StabilityReport) -> String {
    let mut out = String::from("condition,metric,value,n\n");
    for (cond, s) in &report.per_condition {
        out.push_str(&format!("{cond},miou,{},{}\n", fmt(s.miou), s.n));
        out.push_str(&format!("{cond},mbiou,{},{}\n", fmt(s.mbiou), s.n));
        out.push_str(&format!("{cond},msf,{},{}\n", fmt(s.msf), s.n));
        if let Some(a) = s.alpha1_mean {
            out.push_str(&format!("{cond},alpha1_mean,{},{}\n", fmt(a), s.n));
        }
    }
    if let (Some(a), Some(b)) = (report.adapter_params, report.base_params) {
        out.push_str(&format!("_model,adapter_params,{a},1\n"));
        out.push_str(&format!("_model,base_params,{b},1\n"));
        out.push_str(&format!("_model,adapter_fraction,{},1\n", fmt(a as f64 / b as f64)));
    }
    out.push_str(&format!("_model,skipped_images,{},1\n", report.skipped_images));
    out
}

pub fn write_csv(path: &Path, report: &StabilityReport) -> Result<()> {
    std::fs::write(path, to_csv(report)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn to_json(report: &StabilityReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn write_json(path: &Path, report: &StabilityReport) -> Result<()> {
    std::fs::write(path, to_json(report)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json(path: &Path) -> Result<StabilityReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { what: "stability report", detail: e.to_string() })
}

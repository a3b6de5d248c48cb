//! Metrics reports: RMSE, median absolute error, and the CDF samples per
//! (estimator, case, SNR) group, serialized as JSON or CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelCase;
use crate::classical::EstimatorKind;
use crate::error::{Result, ToaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub estimator: EstimatorKind,
    pub case: ChannelCase,
    pub snr_db: f32,
    pub count: usize,
    pub rmse_ns: f64,
    pub median_abs_ns: f64,
    /// Sorted absolute errors in ns (the empirical CDF support).
    pub cdf_ns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    pub entries: Vec<MetricsEntry>,
}

/// Aggregate absolute errors (ns) into one report entry.
pub fn entry_from_errors(
    estimator: EstimatorKind,
    case: ChannelCase,
    snr_db: f32,
    mut abs_errors_ns: Vec<f64>,
) -> MetricsEntry {
    abs_errors_ns.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = abs_errors_ns.len();
    let rmse_ns = (abs_errors_ns.iter().map(|e| e * e).sum::<f64>() / count as f64).sqrt();
    let median_abs_ns = if count % 2 == 1 {
        abs_errors_ns[count / 2]
    } else {
        0.5 * (abs_errors_ns[count / 2 - 1] + abs_errors_ns[count / 2])
    };
    MetricsEntry {
        estimator,
        case,
        snr_db,
        count,
        rmse_ns,
        median_abs_ns,
        cdf_ns: abs_errors_ns,
    }
}

pub fn to_json(report: &MetricsReport) -> Vec<u8> {
    serde_json::to_vec(report).expect("report serialization cannot fail")
}

pub fn from_json(bytes: &[u8]) -> Result<MetricsReport> {
    serde_json::from_slice(bytes).map_err(|e| ToaError::Format {
        offset: e.column() as u64,
        message: format!("invalid report JSON: {e}"),
    })
}

pub fn to_csv(report: &MetricsReport) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&format!(
        "# seed={} config_hash={}\n",
        report.metadata.seed, report.metadata.config_hash
    ));
    out.push_str("estimator,case,snr_db,count,rmse_ns,median_abs_ns,cdf_ns\n");
    for e in &report.entries {
        let cdf = e
            .cdf_ns
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.estimator, e.case, e.snr_db, e.count, e.rmse_ns, e.median_abs_ns, cdf
        ));
    }
    out.into_bytes()
}

pub fn from_csv(bytes: &[u8]) -> Result<MetricsReport> {
    let text = std::str::from_utf8(bytes).map_err(|e| ToaError::Format {
        offset: e.valid_up_to() as u64,
        message: "report CSV is not UTF-8".into(),
    })?;
    let mut offset = 0u64;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ToaError::Format {
        offset: 0,
        message: "empty report".into(),
    })?;
    let meta = header
        .strip_prefix("# ")
        .ok_or_else(|| ToaError::Format {
            offset: 0,
            message: "missing metadata comment line".into(),
        })?;
    let mut seed = None;
    let mut config_hash = None;
    for part in meta.split_whitespace() {
        if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        } else if let Some(v) = part.strip_prefix("config_hash=") {
            config_hash = Some(v.to_string());
        }
    }
    let (Some(seed), Some(config_hash)) = (seed, config_hash) else {
        return Err(ToaError::Format {
            offset: 0,
            message: "metadata line must carry seed= and config_hash=".into(),
        });
    };
    offset += header.len() as u64 + 1;
    let columns = lines.next().ok_or_else(|| ToaError::Format {
        offset,
        message: "missing column header".into(),
    })?;
    offset += columns.len() as u64 + 1;

    let mut entries = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(7, ',').collect();
        if fields.len() != 7 {
            return Err(ToaError::Format {
                offset,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| ToaError::Format {
            offset,
            message: format!("invalid {what} in row {line:?}"),
        };
        entries.push(MetricsEntry {
            estimator: fields[0].parse().map_err(|_| bad("estimator"))?,
            case: fields[1].parse().map_err(|_| bad("case"))?,
            snr_db: fields[2].parse().map_err(|_| bad("snr"))?,
            count: fields[3].parse().map_err(|_| bad("count"))?,
            rmse_ns: fields[4].parse().map_err(|_| bad("rmse"))?,
            median_abs_ns: fields[5].parse().map_err(|_| bad("median"))?,
            cdf_ns: if fields[6].is_empty() {
                Vec::new()
            } else {
                fields[6]
                    .split(';')
                    .map(|v| v.parse::<f64>().map_err(|_| bad("cdf value")))
                    .collect::<Result<_>>()?
            },
        });
        offset += line.len() as u64 + 1;
    }
    Ok(MetricsReport {
        metadata: ReportMetadata { seed, config_hash },
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = ToaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(ToaError::Argument(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn write_file(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => to_json(report),
        ReportFormat::Csv => to_csv(report),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

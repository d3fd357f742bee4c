use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result, RunConfig};
use crate::vcrd::{MetricRecord, WeightLogRow};

pub const METRICS_HEADER: &str =
    "iteration,lv_skl,lv_srkl,total,mean_w_teacher,mean_w_student,f_parity,f_atten,f_amp,eval_acc,ms";

pub const WEIGHTS_HEADER: &str = "iteration,prompt,position,prefix,r_s,r_t,weight";

pub fn format_record(r: &MetricRecord) -> String {
    let eval = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.lv_skl,
        r.lv_srkl,
        r.total,
        r.mean_w_teacher,
        r.mean_w_student,
        r.f_parity,
        r.f_atten,
        r.f_amp,
        eval,
        r.ms
    )
}

/// Append-only CSV; every row is written whole and flushed.
fn append_line(file: &mut File, path: &Path, line: &str) -> Result<()> {
    let mut buf = String::with_capacity(line.len() + 1);
    buf.push_str(line);
    buf.push('\n');
    file.write_all(buf.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| HarnessError::io(path, e))
}

fn create(path: &Path, header: &str) -> Result<File> {
    let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    append_line(&mut file, path, header)?;
    Ok(file)
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: create(path, METRICS_HEADER)?,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        append_line(&mut self.file, &self.path, &format_record(record))
    }
}

pub struct WeightsWriter {
    file: File,
    path: PathBuf,
}

impl WeightsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: create(path, WEIGHTS_HEADER)?,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, rows: &[WeightLogRow]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let body: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.iteration,
                    r.prompt,
                    r.position,
                    r.prefix,
                    opt(r.r_s),
                    opt(r.r_t),
                    r.weight
                )
            })
            .collect();
        append_line(&mut self.file, &self.path, &body.join("\n"))
    }
}

/// Content hash of the full config, git-style short hex.
pub fn run_id(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    hex::encode(&digest[..6])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalMetrics {
    pub iterations: usize,
    pub lv_skl: Option<f64>,
    pub lv_srkl: Option<f64>,
    pub total: Option<f64>,
    pub initial_eval_acc: f64,
    pub final_eval_acc: f64,
    pub teacher_probe_acc: f64,
    pub student_sft_probe_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    /// Divergences are in nats.
    pub units: String,
    pub config: BTreeMap<String, String>,
    pub terminal: TerminalMetrics,
}

impl Summary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Json(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }
}

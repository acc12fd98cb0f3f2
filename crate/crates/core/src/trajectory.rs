//! Trajectory persistence in tab-separated or JSON-lines form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KernelId, PullRecord, StrategyId};
use crate::orchestrator::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Tsv,
    Jsonl,
}

impl TrajectoryFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Tsv => "tsv",
            Self::Jsonl => "jsonl",
        }
    }
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub best_kernel_id: KernelId,
    pub best_latency: f64,
    pub initial_latency: f64,
    pub rounds: usize,
    pub pool_size: usize,
    pub optimal_value: Option<f64>,
}

impl TrajectorySummary {
    pub fn of(result: &RunResult) -> Self {
        Self {
            best_kernel_id: result.best_kernel_id,
            best_latency: result.best_latency,
            initial_latency: result.initial_latency,
            rounds: result.trajectory.len(),
            pool_size: result.pool.len(),
            optimal_value: result.optimal_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub summary: TrajectorySummary,
    pub records: Vec<PullRecord>,
}

const TSV_COLUMNS: [&str; 9] = [
    "round",
    "kernel_id",
    "strategy_id",
    "cluster",
    "ucb_score",
    "reward",
    "child_id",
    "child_valid",
    "child_latency",
];

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Renders a trajectory. Floats use shortest round-trip formatting, so
/// loading reproduces every field exactly.
pub fn render_trajectory(summary: &TrajectorySummary, records: &[PullRecord], format: TrajectoryFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        TrajectoryFormat::Tsv => {
            let _ = writeln!(out, "# best_kernel_id={}", summary.best_kernel_id.0);
            let _ = writeln!(out, "# best_latency={}", summary.best_latency);
            let _ = writeln!(out, "# initial_latency={}", summary.initial_latency);
            let _ = writeln!(out, "# rounds={}", summary.rounds);
            let _ = writeln!(out, "# pool_size={}", summary.pool_size);
            let _ = writeln!(out, "# optimal_value={}", opt(summary.optimal_value));
            out.push_str(&TSV_COLUMNS.join("\t"));
            out.push('\n');
            for r in records {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.round,
                    r.kernel_id.0,
                    r.strategy_id.0,
                    r.cluster,
                    r.ucb_score,
                    r.reward,
                    opt(r.child_id.map(|k| k.0)),
                    r.child_valid,
                    opt(r.child_latency)
                );
            }
        }
        TrajectoryFormat::Jsonl => {
            let mut line = |v: serde_json::Result<String>| -> Result<()> {
                out.push_str(&v.map_err(|e| Error::Parse(e.to_string()))?);
                out.push('\n');
                Ok(())
            };
            line(serde_json::to_string(summary))?;
            for r in records {
                line(serde_json::to_string(r))?;
            }
        }
    }
    Ok(out)
}

pub fn export_trajectory(result: &RunResult, destination: &Path, format: &str) -> Result<()> {
    let format: TrajectoryFormat = format.parse()?;
    let text = render_trajectory(&TrajectorySummary::of(result), &result.trajectory, format)?;
    std::fs::write(destination, text)?;
    Ok(())
}

fn field<T: FromStr>(line: usize, name: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} {value:?}")))
}

fn opt_field<T: FromStr>(line: usize, name: &str, value: &str) -> Result<Option<T>> {
    if value == "-" {
        Ok(None)
    } else {
        field(line, name, value).map(Some)
    }
}

fn parse_tsv(text: &str) -> Result<Trajectory> {
    let mut meta = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(kv) = line.strip_prefix("# ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {n}: expected key=value")))?;
            meta.insert(k.to_string(), v.to_string());
            continue;
        }
        if !saw_header {
            if line.split('\t').ne(TSV_COLUMNS) {
                return Err(Error::Parse(format!("line {n}: unexpected column header")));
            }
            saw_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != TSV_COLUMNS.len() {
            return Err(Error::Parse(format!("line {n}: expected {} columns", TSV_COLUMNS.len())));
        }
        records.push(PullRecord {
            round: field(n, "round", cols[0])?,
            kernel_id: KernelId(field(n, "kernel_id", cols[1])?),
            strategy_id: StrategyId(field(n, "strategy_id", cols[2])?),
            cluster: field(n, "cluster", cols[3])?,
            ucb_score: field(n, "ucb_score", cols[4])?,
            reward: field(n, "reward", cols[5])?,
            child_id: opt_field(n, "child_id", cols[6])?.map(KernelId),
            child_valid: field(n, "child_valid", cols[7])?,
            child_latency: opt_field(n, "child_latency", cols[8])?,
        });
    }
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("summary is missing {k}")))
    };
    let summary = TrajectorySummary {
        best_kernel_id: KernelId(field(0, "best_kernel_id", get("best_kernel_id")?)?),
        best_latency: field(0, "best_latency", get("best_latency")?)?,
        initial_latency: field(0, "initial_latency", get("initial_latency")?)?,
        rounds: field(0, "rounds", get("rounds")?)?,
        pool_size: field(0, "pool_size", get("pool_size")?)?,
        optimal_value: opt_field(0, "optimal_value", get("optimal_value")?)?,
    };
    Ok(Trajectory { summary, records })
}

fn parse_jsonl(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let parse_err = |e: serde_json::Error| Error::Parse(e.to_string());
    let summary = serde_json::from_str(lines.next().ok_or(Error::Empty("trajectory file"))?)
        .map_err(parse_err)?;
    let records = lines
        .map(|l| serde_json::from_str(l).map_err(parse_err))
        .collect::<Result<_>>()?;
    Ok(Trajectory { summary, records })
}

/// Parses either export format, detected from the first character.
pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    match text.trim_start().chars().next() {
        Some('#') => parse_tsv(text),
        Some('{') => parse_jsonl(text),
        _ => Err(Error::Parse("not a trajectory export".into())),
    }
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

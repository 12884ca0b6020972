//! Run artifacts: CSV tables, the run manifest, a text summary and SVG plots.
//!
//! Tables are the source of truth. Everything else in a run directory is
//! rendered from them, so regenerating a report never needs the model.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{MetricTriple, NbtConvention, SuccessMatrix};
use crate::tasksuite::hex_prefix;
use crate::trainer::{LifelongRunConfig, Mode, RunOutcome, TaskReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "success_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "token_ledger.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CURVE_FILE: &str = "success_curve.svg";
pub const BARS_FILE: &str = "token_bars.svg";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT_FILE: &str = "mu_fwt.svg";
pub const MANIFEST_VERSION: u32 = 1;

pub const MATRIX_HEADER: [&str; 6] = [
    "run_hash",
    "after_position",
    "after_task",
    "eval_position",
    "eval_task",
    "success",
];
pub const METRICS_HEADER: [&str; 6] = ["run_hash", "metric", "position", "task", "value", "convention"];
pub const LEDGER_HEADER: [&str; 15] = [
    "run_hash",
    "position",
    "task",
    "instruction",
    "selected_tokens",
    "shared_tokens",
    "specific_tokens",
    "trainable_tokens",
    "cumulative_used",
    "max_layer_shared",
    "fwt_one_epoch",
    "diagonal",
    "final_loss",
    "steps",
    "frozen_grad_max",
];
pub const SWEEP_HEADER: [&str; 8] = [
    "sweep_hash",
    "parameter",
    "setting",
    "run_hash",
    "fwt",
    "nbt",
    "auc",
    "fwt_one_epoch",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("table {table}: {message}")]
    Table { table: &'static str, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file} does not belong to run {expected}: {message}")]
    Integrity {
        file: String,
        expected: String,
        message: String,
    },
    #[error("missing {0}")]
    Missing(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex_prefix(&Sha256::digest(bytes), 64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub run_hash: String,
    pub after_position: usize,
    pub after_task: usize,
    pub eval_position: usize,
    pub eval_task: usize,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_hash: String,
    pub metric: String,
    pub position: Option<usize>,
    pub task: Option<usize>,
    pub value: f64,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub run_hash: String,
    pub position: usize,
    pub task: usize,
    pub instruction: String,
    pub selected_tokens: usize,
    pub shared_tokens: usize,
    pub specific_tokens: usize,
    pub trainable_tokens: usize,
    pub cumulative_used: usize,
    pub max_layer_shared: usize,
    pub fwt_one_epoch: f64,
    pub diagonal: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub frozen_grad_max: f64,
}

impl LedgerRow {
    pub fn new(run_hash: &str, r: &TaskReport) -> Self {
        Self {
            run_hash: run_hash.into(),
            position: r.position,
            task: r.task,
            instruction: r.instruction.clone(),
            selected_tokens: r.selected_tokens,
            shared_tokens: r.shared_tokens,
            specific_tokens: r.specific_tokens,
            trainable_tokens: r.trainable_tokens,
            cumulative_used: r.cumulative_used,
            max_layer_shared: r.max_layer_shared,
            fwt_one_epoch: r.fwt_one_epoch,
            diagonal: r.diagonal,
            final_loss: r.final_loss,
            steps: r.steps,
            frozen_grad_max: r.frozen_grad_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_hash: String,
    pub parameter: String,
    pub setting: String,
    pub run_hash: String,
    pub fwt: f64,
    pub nbt: Option<f64>,
    pub auc: f64,
    pub fwt_one_epoch: f64,
}

/// The three tables of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTables {
    pub matrix: Vec<MatrixRow>,
    pub metrics: Vec<MetricRow>,
    pub ledger: Vec<LedgerRow>,
}

pub fn mean_one_epoch_fwt(reports: &[TaskReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.fwt_one_epoch).sum::<f64>() / reports.len() as f64
}

fn convention_name(c: NbtConvention) -> &'static str {
    match c {
        NbtConvention::ExcludeLast => "exclude-last",
        NbtConvention::ZeroLast => "zero-last",
    }
}

impl RunTables {
    pub fn from_outcome(outcome: &RunOutcome) -> Self {
        let hash = outcome.config_hash.as_str();
        let order = &outcome.order;
        let mut matrix = Vec::new();
        for (i, row) in outcome.matrix.rows().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(success) = *v {
                    matrix.push(MatrixRow {
                        run_hash: hash.into(),
                        after_position: i,
                        after_task: order[i],
                        eval_position: j,
                        eval_task: order[j],
                        success,
                    });
                }
            }
        }
        let m = &outcome.metrics;
        let conv = convention_name(m.convention);
        let row = |metric: &str, position: Option<usize>, value: f64| MetricRow {
            run_hash: hash.into(),
            metric: metric.into(),
            position,
            task: position.map(|p| order[p]),
            value,
            convention: conv.into(),
        };
        let mut metrics = vec![row("fwt", None, m.fwt)];
        if let Some(nbt) = m.nbt {
            metrics.push(row("nbt", None, nbt));
        }
        metrics.push(row("auc", None, m.auc));
        metrics.push(row("fwt_one_epoch", None, mean_one_epoch_fwt(&outcome.reports)));
        metrics.extend(
            m.nbt_per_task
                .iter()
                .enumerate()
                .map(|(p, &v)| row("nbt_task", Some(p), v)),
        );
        metrics.extend(
            m.auc_per_task
                .iter()
                .enumerate()
                .map(|(p, &v)| row("auc_task", Some(p), v)),
        );
        let ledger = outcome.reports.iter().map(|r| LedgerRow::new(hash, r)).collect();
        Self {
            matrix,
            metrics,
            ledger,
        }
    }

    pub fn run_hash(&self) -> Option<&str> {
        self.matrix.first().map(|r| r.run_hash.as_str())
    }

    pub fn success_matrix(&self) -> Result<SuccessMatrix, ReportError> {
        let n = self
            .matrix
            .iter()
            .map(|r| r.after_position.saturating_add(1))
            .max()
            .unwrap_or(0);
        if n.checked_add(1).and_then(|m| m.checked_mul(n)).map(|t| t / 2) != Some(self.matrix.len()) {
            return Err(table_err(
                "success_matrix",
                format!("{} entries do not fill a {n}-task triangle", self.matrix.len()),
            ));
        }
        let mut m = SuccessMatrix::new(n);
        for r in &self.matrix {
            m.set(r.after_position, r.eval_position, r.success)
                .map_err(|e| table_err("success_matrix", e))?;
        }
        m.check_complete().map_err(|e| table_err("success_matrix", e))?;
        Ok(m)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == name && r.position.is_none())
            .map(|r| r.value)
    }

    /// Training order recovered from the matrix diagonal.
    pub fn order(&self) -> Vec<usize> {
        let mut diag: Vec<&MatrixRow> = self
            .matrix
            .iter()
            .filter(|r| r.after_position == r.eval_position)
            .collect();
        diag.sort_by_key(|r| r.after_position);
        diag.iter().map(|r| r.after_task).collect()
    }
}

fn table_err(table: &'static str, e: impl std::fmt::Display) -> ReportError {
    ReportError::Table {
        table,
        message: e.to_string(),
    }
}

fn write_csv<T: Serialize>(table: &'static str, header: &[&str], rows: &[T]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| table_err(table, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| table_err(table, e))?;
    }
    w.into_inner().map_err(|e| table_err(table, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(
    table: &'static str,
    header: &[&str],
    bytes: &[u8],
) -> Result<Vec<T>, ReportError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let found = r.headers().map_err(|e| table_err(table, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(table_err(
            table,
            format!(
                "header `{}` is not `{}`",
                found.iter().collect::<Vec<_>>().join(","),
                header.join(",")
            ),
        ));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| table_err(table, e)))
        .collect()
}

pub fn matrix_csv(rows: &[MatrixRow]) -> Result<Vec<u8>, ReportError> {
    write_csv("success_matrix", &MATRIX_HEADER, rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>, ReportError> {
    write_csv("metrics", &METRICS_HEADER, rows)
}

pub fn ledger_csv(rows: &[LedgerRow]) -> Result<Vec<u8>, ReportError> {
    write_csv("token_ledger", &LEDGER_HEADER, rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, ReportError> {
    write_csv("sweep", &SWEEP_HEADER, rows)
}

pub fn parse_matrix_csv(bytes: &[u8]) -> Result<Vec<MatrixRow>, ReportError> {
    let rows: Vec<MatrixRow> = read_csv("success_matrix", &MATRIX_HEADER, bytes)?;
    for r in &rows {
        if r.eval_position > r.after_position || !(0.0..=1.0).contains(&r.success) {
            return Err(table_err("success_matrix", format!("bad entry {r:?}")));
        }
    }
    Ok(rows)
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricRow>, ReportError> {
    let rows: Vec<MetricRow> = read_csv("metrics", &METRICS_HEADER, bytes)?;
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(table_err("metrics", format!("non-finite value for {}", r.metric)));
    }
    Ok(rows)
}

pub fn parse_ledger_csv(bytes: &[u8]) -> Result<Vec<LedgerRow>, ReportError> {
    read_csv("token_ledger", &LEDGER_HEADER, bytes)
}

pub fn parse_sweep_csv(bytes: &[u8]) -> Result<Vec<SweepRow>, ReportError> {
    read_csv("sweep", &SWEEP_HEADER, bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub config: LifelongRunConfig,
    /// The effective configuration in config-file syntax.
    pub effective_config: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub nbt_convention: String,
    /// Stored tables and the checkpoint with their digests.
    pub files: Vec<ManifestFile>,
    /// Files rendered from the tables.
    pub rendered: Vec<String>,
}

impl RunManifest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ReportError> {
        let m: RunManifest = serde_json::from_slice(bytes).map_err(|e| ReportError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(ReportError::Manifest(format!(
                "version {}, expected {MANIFEST_VERSION}",
                m.version
            )));
        }
        Ok(m)
    }
}

/// Human-readable summary of one run.
pub fn render_summary(tables: &RunTables) -> Result<String, ReportError> {
    let matrix = tables.success_matrix()?;
    let order = tables.order();
    let hash = tables.run_hash().unwrap_or("");
    let mut s = String::new();
    let conv = tables.metrics.first().map(|r| r.convention.as_str()).unwrap_or("");
    let _ = writeln!(s, "run {hash}");
    let _ = writeln!(s, "training order: {order:?}");
    let _ = writeln!(s, "nbt convention: {conv}");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "success matrix (row: after training position, column: evaluated position)"
    );
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:.3}", v.unwrap_or(f64::NAN))).collect();
        let _ = writeln!(s, "  {}", cells.join(" "));
    }
    let _ = writeln!(s);
    for name in ["fwt", "nbt", "auc", "fwt_one_epoch"] {
        if let Some(v) = tables.metric(name) {
            let _ = writeln!(s, "{name:<14} {v:.6}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "pos task shared specific trainable cum_used diag  one_epoch instruction"
    );
    for r in &tables.ledger {
        let _ = writeln!(
            s,
            "{:>3} {:>4} {:>6} {:>8} {:>9} {:>8} {:.3} {:.3}     {}",
            r.position,
            r.task,
            r.shared_tokens,
            r.specific_tokens,
            r.trainable_tokens,
            r.cumulative_used,
            r.diagonal,
            r.fwt_one_epoch,
            r.instruction
        );
    }
    let total: usize = tables.ledger.iter().map(|r| r.trainable_tokens).sum();
    let _ = writeln!(s, "cumulative trainable tokens: {total}");
    Ok(s)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Minimal plotting frame: a fixed-size canvas with linear axes.
struct Frame {
    svg: String,
    x: (f64, f64),
    y: (f64, f64),
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

impl Frame {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let mut f = Self { svg, x, y };
        let (x0, y0) = (LEFT, H - BOTTOM);
        let _ = writeln!(
            f.svg,
            r#"<path d="M{x0} {TOP} L{x0} {y0} L{} {y0}" stroke="black" fill="none"/>"#,
            W - RIGHT
        );
        for k in 0..=4 {
            let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
            let py = f.py(v);
            let _ = writeln!(
                f.svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                py + 4.0,
                trim(v)
            );
            let _ = writeln!(f.svg, r##"<path d="M{x0} {py} L{} {py}" stroke="#ddd"/>"##, W - RIGHT);
        }
        let _ = writeln!(
            f.svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            f.svg,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            (TOP + y0) / 2.0,
            (TOP + y0) / 2.0,
            escape(ylabel)
        );
        f
    }

    fn px(&self, v: f64) -> f64 {
        let span = if self.x.1 > self.x.0 { self.x.1 - self.x.0 } else { 1.0 };
        round(LEFT + (v - self.x.0) / span * (W - LEFT - RIGHT))
    }

    fn py(&self, v: f64) -> f64 {
        let span = if self.y.1 > self.y.0 { self.y.1 - self.y.0 } else { 1.0 };
        round(H - BOTTOM - (v - self.y.0) / span * (H - TOP - BOTTOM))
    }

    fn x_tick(&mut self, v: f64, label: &str) {
        let px = self.px(v);
        let _ = writeln!(
            self.svg,
            r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }

    fn line(&mut self, points: &[(f64, f64)], color: &str, width: f64, label: &str, slot: usize) {
        let d: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{} {}", if k == 0 { "M" } else { "L" }, self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(
            self.svg,
            r#"<path d="{}" stroke="{color}" stroke-width="{width}" fill="none"/>"#,
            d.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                self.svg,
                r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#,
                self.px(x),
                self.py(y)
            );
        }
        self.legend(color, label, slot);
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, color: &str) {
        let (a, b) = (self.px(x0), self.px(x1));
        let (top, bottom) = (self.py(y1), self.py(y0));
        let _ = writeln!(
            self.svg,
            r#"<rect x="{a}" y="{top}" width="{}" height="{}" fill="{color}"/>"#,
            round(b - a),
            round(bottom - top)
        );
    }

    fn legend(&mut self, color: &str, label: &str, slot: usize) {
        let y = TOP + 14.0 * slot as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            self.svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            x + 14.0,
            y,
            escape(label)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn round(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn trim(v: f64) -> String {
    format!("{}", (v * 1000.0).round() / 1000.0)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Success rate of every task over the course of training, one line per task
/// plus the mean over the tasks seen so far.
pub fn render_success_curve(tables: &RunTables) -> Result<String, ReportError> {
    let matrix = tables.success_matrix()?;
    let order = tables.order();
    let n = matrix.size();
    let mut f = Frame::new(
        "Success rate over the task sequence",
        "tasks trained",
        "success rate",
        (1.0, n.max(2) as f64),
        (0.0, 1.0),
    );
    for k in 0..n {
        f.x_tick((k + 1) as f64, &(k + 1).to_string());
    }
    let mut mean = Vec::with_capacity(n);
    for (i, row) in matrix.rows().iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.unwrap_or(0.0)).sum();
        mean.push(((i + 1) as f64, sum / row.len() as f64));
    }
    f.line(&mean, "black", 2.5, "mean so far", 0);
    for j in 0..n {
        let points: Vec<(f64, f64)> = (j..n)
            .map(|i| ((i + 1) as f64, matrix.get(i, j).unwrap_or(0.0)))
            .collect();
        f.line(
            &points,
            PALETTE[j % PALETTE.len()],
            1.0,
            &format!("task {}", order[j]),
            j + 1,
        );
    }
    Ok(f.finish())
}

/// Per-task token bars: trainable rows stacked on the reused (shared) rows.
pub fn render_token_bars(tables: &RunTables) -> String {
    let n = tables.ledger.len();
    let top = tables
        .ledger
        .iter()
        .map(|r| r.selected_tokens.max(r.trainable_tokens))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut f = Frame::new(
        "Tokens per task",
        "task (training order)",
        "tokens",
        (0.0, n.max(1) as f64),
        (0.0, top),
    );
    for (k, r) in tables.ledger.iter().enumerate() {
        let (x0, x1) = (k as f64 + 0.15, k as f64 + 0.85);
        let reused = r.selected_tokens.saturating_sub(r.trainable_tokens) as f64;
        f.rect(x0, x1, 0.0, reused, "#9ecae1");
        f.rect(x0, x1, reused, reused + r.trainable_tokens as f64, "#e6550d");
        f.x_tick(k as f64 + 0.5, &r.task.to_string());
    }
    f.legend("#e6550d", "trainable", 0);
    f.legend("#9ecae1", "reused", 1);
    f.finish()
}

/// FWT, NBT and AUC against μ for a sweep.
pub fn render_mu_plot(rows: &[SweepRow]) -> String {
    let mut pts: Vec<(f64, &SweepRow)> = rows
        .iter()
        .filter_map(|r| r.setting.parse::<f64>().ok().map(|m| (m, r)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pts.first().map(|p| p.0).unwrap_or(0.0).min(0.0);
    let hi = pts.last().map(|p| p.0).unwrap_or(1.0).max(1.0);
    let ymin = pts.iter().filter_map(|p| p.1.nbt).fold(0.0, f64::min);
    let mut f = Frame::new(
        "Metrics against the sharing ratio",
        "mu",
        "metric",
        (lo, hi),
        (ymin, 1.0),
    );
    for (m, _) in &pts {
        f.x_tick(*m, &trim(*m));
    }
    let fwt: Vec<(f64, f64)> = pts.iter().map(|(m, r)| (*m, r.fwt)).collect();
    let auc: Vec<(f64, f64)> = pts.iter().map(|(m, r)| (*m, r.auc)).collect();
    let nbt: Vec<(f64, f64)> = pts.iter().filter_map(|(m, r)| r.nbt.map(|v| (*m, v))).collect();
    f.line(&fwt, PALETTE[0], 2.0, "FWT", 0);
    f.line(&nbt, PALETTE[3], 2.0, "NBT", 1);
    f.line(&auc, PALETTE[2], 2.0, "AUC", 2);
    f.finish()
}

/// Files rendered from the tables, by name.
pub fn render_all(tables: &RunTables) -> Result<Vec<(&'static str, String)>, ReportError> {
    Ok(vec![
        (SUMMARY_FILE, render_summary(tables)?),
        (CURVE_FILE, render_success_curve(tables)?),
        (BARS_FILE, render_token_bars(tables)),
    ])
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), ReportError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, ReportError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(ReportError::Missing(path.display().to_string()));
    }
    fs::read(&path).map_err(io_err(&path))
}

/// Everything needed to materialize a finished run on disk.
pub struct RunArtifacts<'a> {
    pub outcome: &'a RunOutcome,
    pub config: &'a LifelongRunConfig,
    pub effective_config: String,
    pub checkpoint: Vec<u8>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Writes a run into `root/<hash>`. The directory is assembled under a
/// temporary name and moved into place, so a failure leaves nothing behind.
pub fn write_run(root: &Path, artifacts: &RunArtifacts<'_>) -> Result<PathBuf, ReportError> {
    let outcome = artifacts.outcome;
    let hash = &outcome.config_hash;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let staging = tempfile::Builder::new()
        .prefix(&format!(".{hash}-"))
        .tempdir_in(root)
        .map_err(io_err(root))?;
    let dir = staging.path();
    let tables = RunTables::from_outcome(outcome);
    let stored = [
        (MATRIX_FILE, matrix_csv(&tables.matrix)?),
        (METRICS_FILE, metrics_csv(&tables.metrics)?),
        (LEDGER_FILE, ledger_csv(&tables.ledger)?),
        (CHECKPOINT_FILE, artifacts.checkpoint.clone()),
    ];
    let mut files = Vec::new();
    for (name, bytes) in &stored {
        write_file(dir, name, bytes)?;
        files.push(ManifestFile {
            path: (*name).into(),
            sha256: digest(bytes),
        });
    }
    let rendered = render_all(&tables)?;
    for (name, text) in &rendered {
        write_file(dir, name, text.as_bytes())?;
    }
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        hash: hash.clone(),
        seed: artifacts.config.seed,
        mode: artifacts.config.mode,
        config: artifacts.config.clone(),
        effective_config: artifacts.effective_config.clone(),
        started_unix: artifacts.started_unix,
        finished_unix: artifacts.finished_unix,
        nbt_convention: artifacts.config.nbt_convention.describe().into(),
        files,
        rendered: rendered.iter().map(|(n, _)| (*n).to_string()).collect(),
    };
    write_file(dir, MANIFEST_FILE, &manifest.encode())?;

    let target = root.join(hash);
    if target.exists() {
        fs::remove_dir_all(&target).map_err(io_err(&target))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &target).map_err(io_err(&target))?;
    Ok(target)
}

/// Loads and integrity-checks the tables of a run directory.
pub fn load_run(dir: &Path) -> Result<(RunManifest, RunTables), ReportError> {
    let manifest = RunManifest::decode(&read_file(dir, MANIFEST_FILE)?)?;
    let integrity = |file: &str, message: String| ReportError::Integrity {
        file: file.into(),
        expected: manifest.hash.clone(),
        message,
    };
    if manifest.config.hash() != manifest.hash {
        return Err(integrity(MANIFEST_FILE, "config snapshot hashes differently".into()));
    }
    for name in [MATRIX_FILE, METRICS_FILE, LEDGER_FILE] {
        if !manifest.files.iter().any(|f| f.path == name) {
            return Err(ReportError::Missing(format!("{name} in manifest")));
        }
    }
    let mut bytes = std::collections::BTreeMap::new();
    for f in manifest.files.iter().filter(|f| f.path != CHECKPOINT_FILE) {
        bytes.insert(f.path.as_str(), read_file(dir, &f.path)?);
    }
    for f in manifest.files.iter().filter(|f| f.path != CHECKPOINT_FILE) {
        if digest(&bytes[f.path.as_str()]) != f.sha256 {
            return Err(integrity(&f.path, "content digest differs from the manifest".into()));
        }
    }
    let tables = RunTables {
        matrix: parse_matrix_csv(&bytes[MATRIX_FILE])?,
        metrics: parse_metrics_csv(&bytes[METRICS_FILE])?,
        ledger: parse_ledger_csv(&bytes[LEDGER_FILE])?,
    };
    let hashes = tables
        .matrix
        .iter()
        .map(|r| (MATRIX_FILE, &r.run_hash))
        .chain(tables.metrics.iter().map(|r| (METRICS_FILE, &r.run_hash)))
        .chain(tables.ledger.iter().map(|r| (LEDGER_FILE, &r.run_hash)));
    for (file, h) in hashes {
        if *h != manifest.hash {
            return Err(integrity(file, format!("row tagged with run {h}")));
        }
    }
    Ok((manifest, tables))
}

/// Re-renders the summary and plots of a run directory from its tables.
pub fn regenerate(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let (_, tables) = load_run(dir)?;
    let mut written = Vec::new();
    for (name, text) in render_all(&tables)? {
        write_file(dir, name, text.as_bytes())?;
        written.push(dir.join(name));
    }
    Ok(written)
}

impl SweepRow {
    pub fn new(sweep_hash: &str, parameter: &str, setting: String, outcome: &RunOutcome) -> Self {
        let MetricTriple { fwt, nbt, auc, .. } = outcome.metrics;
        Self {
            sweep_hash: sweep_hash.into(),
            parameter: parameter.into(),
            setting,
            run_hash: outcome.config_hash.clone(),
            fwt,
            nbt,
            auc,
            fwt_one_epoch: mean_one_epoch_fwt(&outcome.reports),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tables() -> RunTables {
        let h = "abc".to_string();
        let order = [2usize, 0, 1];
        let vals = [vec![0.9], vec![0.8, 0.7], vec![0.8, 0.7, 0.6]];
        let mut matrix = Vec::new();
        for (i, row) in vals.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                matrix.push(MatrixRow {
                    run_hash: h.clone(),
                    after_position: i,
                    after_task: order[i],
                    eval_position: j,
                    eval_task: order[j],
                    success: v,
                });
            }
        }
        let metrics = vec![MetricRow {
            run_hash: h.clone(),
            metric: "fwt".into(),
            position: None,
            task: None,
            value: 0.7333333333333334,
            convention: "exclude-last".into(),
        }];
        let ledger = (0..3)
            .map(|p| LedgerRow {
                run_hash: h.clone(),
                position: p,
                task: order[p],
                instruction: "push the red block, to the \"left\"".into(),
                selected_tokens: 20,
                shared_tokens: 5 * p,
                specific_tokens: 20 - 5 * p,
                trainable_tokens: 20 - 5 * p,
                cumulative_used: 20 + 15 * p,
                max_layer_shared: p,
                fwt_one_epoch: 0.1,
                diagonal: vals[p][p],
                final_loss: 1e-3,
                steps: 10,
                frozen_grad_max: 0.0,
            })
            .collect();
        RunTables {
            matrix,
            metrics,
            ledger,
        }
    }

    #[test]
    fn tables_round_trip() {
        let t = tables();
        assert_eq!(parse_matrix_csv(&matrix_csv(&t.matrix).unwrap()).unwrap(), t.matrix);
        assert_eq!(parse_metrics_csv(&metrics_csv(&t.metrics).unwrap()).unwrap(), t.metrics);
        assert_eq!(parse_ledger_csv(&ledger_csv(&t.ledger).unwrap()).unwrap(), t.ledger);
        let text = String::from_utf8(matrix_csv(&t.matrix).unwrap()).unwrap();
        assert!(text.starts_with("run_hash,after_position,after_task,eval_position,eval_task,success\n"));
        assert!(text.contains("abc,1,0,0,2,0.8\n"));
        let metrics = String::from_utf8(metrics_csv(&t.metrics).unwrap()).unwrap();
        assert!(metrics.contains("abc,fwt,,,0.7333333333333334,exclude-last\n"));
    }

    #[test]
    fn recovered_matrix_and_order() {
        let t = tables();
        assert_eq!(t.order(), vec![2, 0, 1]);
        let m = t.success_matrix().unwrap();
        assert_eq!(m.get(2, 1), Some(0.7));
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse_matrix_csv(b"a,b\n1,2\n").is_err());
        assert!(parse_matrix_csv(
            b"run_hash,after_position,after_task,eval_position,eval_task,success\nx,0,0,1,0,0.5\n"
        )
        .is_err());
    }

    #[test]
    fn renders_are_deterministic() {
        let t = tables();
        let a = render_all(&t).unwrap();
        let b = render_all(&t).unwrap();
        assert_eq!(a, b);
        let curve = &a[1].1;
        assert!(curve.starts_with("<svg"));
        assert!(curve.contains("task 2"));
        assert!(a[0].1.contains("fwt            0.733333"));
    }

    proptest! {
        #[test]
        fn parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = parse_matrix_csv(&bytes);
            let _ = parse_metrics_csv(&bytes);
            let _ = parse_ledger_csv(&bytes);
            let _ = parse_sweep_csv(&bytes);
        }
    }
}

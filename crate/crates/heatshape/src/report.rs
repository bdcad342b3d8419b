//! Run artifacts: tables, structured results, control snapshots, and plot
//! scripts.
//!
//! Every emitted file carries the configuration hash in a leading comment
//! (or a `config_hash` field for structured documents), tables are
//! self-describing (the header row names each column's unit), and all
//! numbers are written with Rust's shortest-round-trip float formatting so
//! identical runs produce byte-identical files.

use crate::studies::{ObstructionTable, SweepTable};
use crate::synth::{SynthesizedControl, VerificationReport};
use crate::dual::DualReport;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write artifact {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize result document: {0}")]
    Json(#[from] serde_json::Error),
}

/// Deterministic float formatting (shortest round-trip representation).
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Compresses the active index set `{i : values[i] > threshold}` into sorted
/// inclusive ranges, serialized as `lo-hi` joined by `;` (empty set: `-`).
pub fn index_ranges(values: &[f64], threshold: f64) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=values.len() {
        let active = i < values.len() && values[i] > threshold;
        match (start, active) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                parts.push(if s + 1 == i {
                    format!("{s}")
                } else {
                    format!("{s}-{}", i - 1)
                });
                start = None;
            }
            _ => {}
        }
    }
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.join(";")
    }
}

/// Writes artifacts of one run into a directory, stamping the config hash
/// into every file.
pub struct ArtifactWriter {
    dir: PathBuf,
    hash: String,
    log_lines: Vec<String>,
    /// Paths written so far (relative names).
    pub written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, config_hash: &str) -> Result<Self, ReportError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: config_hash.to_string(),
            log_lines: Vec::new(),
            written: Vec::new(),
        })
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log_lines.push(line.into());
    }

    fn write_file(&mut self, name: &str, contents: &str) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path)
            .map_err(|source| ReportError::Io { path: path.clone(), source })?;
        f.write_all(contents.as_bytes())
            .map_err(|source| ReportError::Io { path: path.clone(), source })?;
        self.written.push(PathBuf::from(name));
        Ok(path)
    }

    /// CSV table: hash comment, header row (column names carry units in
    /// brackets), then rows.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf, ReportError> {
        let mut out = format!("# config-hash: {}\n", self.hash);
        out.push_str(&header.join(","));
        out.push('\n');
        for row in rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        self.write_file(name, &out)
    }

    /// Structured result document (JSON with an injected `config_hash`).
    pub fn write_json(
        &mut self,
        name: &str,
        value: serde_json::Value,
    ) -> Result<PathBuf, ReportError> {
        let mut doc = serde_json::Map::new();
        doc.insert("config_hash".to_string(), self.hash.clone().into());
        match value {
            serde_json::Value::Object(map) => doc.extend(map),
            other => {
                doc.insert("result".to_string(), other);
            }
        }
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
        self.write_file(name, &format!("{text}\n"))
    }

    /// Plain-text gnuplot script plotting columns of a CSV written earlier.
    pub fn write_plot_script(
        &mut self,
        name: &str,
        csv_name: &str,
        title: &str,
        plots: &[(usize, usize, &str)],
        logscale_y: bool,
    ) -> Result<PathBuf, ReportError> {
        let mut s = String::new();
        s.push_str(&format!("# config-hash: {}\n", self.hash));
        s.push_str("# gnuplot script; run: gnuplot <this file>\n");
        s.push_str("set datafile separator \",\"\n");
        s.push_str("set datafile commentschars \"#\"\n");
        s.push_str(&format!("set title \"{title}\"\n"));
        s.push_str("set key autotitle columnhead\n");
        s.push_str("set grid\n");
        if logscale_y {
            s.push_str("set logscale y\n");
        }
        s.push_str(&format!(
            "set output \"{}.png\"\nset terminal pngcairo size 900,600\n",
            name.trim_end_matches(".gp")
        ));
        let specs: Vec<String> = plots
            .iter()
            .map(|(x, y, label)| {
                format!("\"{csv_name}\" using {x}:{y} with linespoints title \"{label}\"")
            })
            .collect();
        s.push_str(&format!("plot {}\n", specs.join(", \\\n     ")));
        self.write_file(name, &s)
    }

    /// Flushes the run log.
    pub fn finish(&mut self) -> Result<PathBuf, ReportError> {
        let mut out = format!("# config-hash: {}\n", self.hash);
        for l in &self.log_lines {
            out.push_str(l);
            out.push('\n');
        }
        self.write_file("run.log", &out)
    }
}

/// Builds the sweep table CSV rows.
pub fn sweep_rows(table: &SweepTable) -> Vec<Vec<String>> {
    table
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.t),
                fmt_f64(r.amplitude),
                fmt_f64(r.j_star),
                r.gap.map(fmt_f64).unwrap_or_else(|| "undefined".into()),
                r.relative_gap.map(fmt_f64).unwrap_or_else(|| "undefined".into()),
                fmt_f64(r.residual_over_eps),
                fmt_f64(r.lower_bound),
                fmt_f64(r.margin),
                r.evals.to_string(),
                (r.diverged as u8).to_string(),
                (r.under_resolved as u8).to_string(),
            ]
        })
        .collect()
}

pub const SWEEP_HEADER: &[&str] = &[
    "T[time]",
    "amplitude_M[state/time]",
    "J_star[state^2]",
    "gap[state^2]",
    "relative_gap[1]",
    "residual_over_eps[1]",
    "lower_bound[state/time]",
    "margin[state/time]",
    "evals[count]",
    "diverged[bool]",
    "under_resolved[bool]",
];

/// Builds the per-time-node control snapshot rows: active set (u = M̄) and
/// plateau set as index ranges, shape volume per node.
pub fn control_snapshot_rows(synth: &SynthesizedControl) -> Vec<Vec<String>> {
    let m = synth.amplitude;
    let nodes = synth.control.time_grid().nodes();
    synth
        .control
        .fields()
        .iter()
        .zip(nodes)
        .zip(&synth.volume_per_cell)
        .map(|((f, t), vol)| {
            let on = index_ranges(f.values().as_slice().unwrap(), m * (1.0 - 1e-9));
            let frac_threshold = m * 1e-9;
            let any = index_ranges(f.values().as_slice().unwrap(), frac_threshold);
            vec![fmt_f64(t), on, any, fmt_f64(*vol)]
        })
        .collect()
}

pub const SNAPSHOT_HEADER: &[&str] = &[
    "t[time]",
    "full_amplitude_nodes[index-ranges]",
    "support_nodes[index-ranges]",
    "shape_volume[length]",
];

/// Structured result document for a synth run.
pub fn synth_document(
    rep: &DualReport,
    synth: &SynthesizedControl,
    ver: &VerificationReport,
    eps: f64,
) -> serde_json::Value {
    serde_json::json!({
        "amplitude_M": rep.h_star,
        "J_star": rep.j_star,
        "duality_gap": rep.gap,
        "relative_gap": rep.relative_gap(),
        "epsilon": eps,
        "residual": ver.residual,
        "residual_over_eps": ver.residual_over_eps,
        "best_residual": rep.best_residual,
        "min_state": ver.min_state,
        "sup_control": ver.sup_control,
        "volume_excess": ver.volume_excess,
        "bang_bang_defect": ver.bang_bang_defect,
        "max_plateau_nodes": ver.max_plateau_nodes,
        "fenchel_defect": ver.fenchel_defect,
        "primal_value": ver.primal_value,
        "evals": rep.evals,
        "converged": rep.converged,
        "diverged": rep.diverged,
        "under_resolved": rep.under_resolved,
        "trivial": rep.trivial,
        "plateau_nodes_per_cell_max": synth.plateau_nodes_per_cell.iter().max(),
    })
}

/// Obstruction table CSV rows (restricted rows then the unrestricted row).
pub fn obstruction_rows(table: &ObstructionTable) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = table
        .restricted
        .iter()
        .map(|r| {
            vec![
                "restricted".to_string(),
                fmt_f64(r.t),
                fmt_f64(r.best_residual_over_eps),
                fmt_f64(r.amplitude),
                (r.diverged as u8).to_string(),
                fmt_f64(r.j_final),
            ]
        })
        .collect();
    let u = &table.unrestricted;
    rows.push(vec![
        "unrestricted".to_string(),
        fmt_f64(u.t),
        fmt_f64(u.best_residual_over_eps),
        fmt_f64(u.amplitude),
        (u.diverged as u8).to_string(),
        fmt_f64(u.j_final),
    ]);
    rows
}

pub const OBSTRUCTION_HEADER: &[&str] = &[
    "mode[label]",
    "T[time]",
    "best_residual_over_eps[1]",
    "amplitude_M[state/time]",
    "diverged[bool]",
    "J_final[state^2]",
];

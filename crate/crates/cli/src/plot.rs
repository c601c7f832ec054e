//! Plot data: one tab-separated file per series plus a `.columns` sidecar
//! naming each column. No rendering.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use spde_core::fpe::FpeReport;
use spde_core::harness::{ExperimentReport, Series};

/// Lowercase alphanumerics, dots and dashes, for file names.
fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn write_series(dir: &Path, s: &Series) -> io::Result<PathBuf> {
    let stem = slug(&s.name);
    let mut body = String::new();
    for row in &s.rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        body.push_str(&cells.join("\t"));
        body.push('\n');
    }
    let mut header = format!("# {}\n# {} rows, tab-separated, no header line\n", s.name, s.rows.len());
    for (i, c) in s.columns.iter().enumerate() {
        header.push_str(&format!("{}\t{c}\n", i + 1));
    }
    let path = dir.join(format!("{stem}.tsv"));
    fs::write(&path, body)?;
    fs::write(dir.join(format!("{stem}.columns")), header)?;
    Ok(path)
}

pub struct Emitted {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Writes every series of `report`, and the residuals of any FPE checks,
/// into `dir`. `ladder` is the configured
/// α ladder; when it is empty no per-α series can exist and a warning says so.
pub fn emit_plot_data(report: &ExperimentReport, ladder: &[f64], dir: &Path) -> io::Result<Emitted> {
    fs::create_dir_all(dir)?;
    let mut out = Emitted {
        files: Vec::new(),
        warnings: Vec::new(),
    };
    if ladder.is_empty() {
        out.warnings.push("alpha ladder is empty: no per-alpha series written".into());
    }
    for s in &report.series {
        if ladder.is_empty() && s.name.contains("alpha") {
            continue;
        }
        out.files.push(write_series(dir, s)?);
    }
    for f in &report.fpe {
        out.files.extend(emit_fpe(f, dir)?);
    }
    Ok(out)
}

/// One file per test function: residual against time.
pub fn emit_fpe(report: &FpeReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for id in report.test_functions() {
        let mut s = Series {
            name: format!("fpe alpha={} {id}", report.alpha),
            columns: ["t", "residual_re", "residual_im", "stderr", "budget"]
                .iter()
                .map(|c| c.to_string())
                .collect(),
            rows: Vec::new(),
        };
        for r in report.rows.iter().filter(|r| r.test_function == id) {
            s.rows.push(vec![r.t, r.residual.re, r.residual.im, r.stderr, r.budget]);
        }
        files.push(write_series(dir, &s)?);
    }
    Ok(files)
}

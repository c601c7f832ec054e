//! Runs one experiment and maps its outcome to an exit status.
//!
//! | status                         | exit |
//! |--------------------------------|------|
//! | report passes                  | 0    |
//! | report fails, config or IO error | 1  |
//! | report invalid (blow-up excess) | 2   |
//!
//! A report is stored in the archive before any exit status other than a
//! config error is returned.

use std::path::{Path, PathBuf};

use spde_core::harness::archive::{persist_record, persist_report, Archive};
use spde_core::harness::{run, run_simulate, Experiment, ExperimentReport, Status};

use crate::config::RunConfig;
use crate::plot::emit_plot_data;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

const DEFAULT_ARCHIVE: &str = "spde-archive";

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Flag or environment value; beats the config file.
    pub archive: Option<PathBuf>,
    pub emit_plots: bool,
}

pub fn exit_code(status: Status) -> i32 {
    match status {
        Status::Pass => EXIT_PASS,
        Status::Fail => EXIT_FAIL,
        Status::Invalid => EXIT_INVALID,
    }
}

fn error(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_FAIL
}

/// Runs `name`, stores the report and returns the exit status.
pub fn dispatch(name: Experiment, config: &RunConfig, overrides: &Overrides) -> i32 {
    let mut spec = match config.spec(name) {
        Ok(s) => s,
        Err(e) => return error(format!("config {e}")),
    };
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = overrides.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => return error(e),
    };
    let result = pool.install(|| {
        if name == Experiment::Simulate {
            run_simulate(&spec)
        } else {
            run(&spec).map(|r| (r, None))
        }
    });
    let (report, record) = match result {
        Ok(r) => r,
        Err(e) => return error(e),
    };

    let root = overrides
        .archive
        .clone()
        .or_else(|| config.output.archive.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ARCHIVE));
    let echo = config.echo(&spec);
    let stored = Archive::open(&root).and_then(|archive| {
        let id = persist_report(&archive, &spec, &report, &[("config.toml", echo.as_bytes())])?;
        if let Some(rec) = &record {
            persist_record(&archive, &spec, rec)?;
        }
        Ok(archive.run_dir(&id))
    });
    let run_dir = match stored {
        Ok(d) => d,
        Err(e) => {
            print!("{}", report.to_text());
            return error(e);
        }
    };
    print!("{}", report.to_text());
    println!("stored in {}", run_dir.display());

    if overrides.emit_plots || config.output.emit_plots {
        let dir = config.output.plot_dir.clone().unwrap_or_else(|| run_dir.join("plots"));
        if let Err(e) = emit(&report, &spec.alpha_ladder, &dir) {
            return error(format!("plot data: {e}"));
        }
    }
    exit_code(report.status)
}

fn emit(report: &ExperimentReport, ladder: &[f64], dir: &Path) -> std::io::Result<()> {
    let out = emit_plot_data(report, ladder, dir)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} plot data files in {}", out.files.len(), dir.display());
    Ok(())
}

//! Experiment driver: manifests in, tensors, metrics and summaries out.

pub mod manifest;
mod run;

use std::path::{Path, PathBuf};

use codenoise::metrics::{read_rows, MetricRow};
use codenoise::report::{summarize, write_plot_data};

pub use manifest::{Mode, RunManifest};
pub use run::{run, Overrides, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        source: codenoise::Error,
    },

    #[error(transparent)]
    Core(#[from] codenoise::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(codenoise::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

/// Reads metric CSVs, writes `summary.txt` and plot data into `out`, and
/// returns the summary text.
pub fn report(csvs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    if csvs.is_empty() {
        return Err(CliError::Config("no CSV files given".into()));
    }
    let mut rows: Vec<MetricRow> = Vec::new();
    for path in csvs {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
        let mut more = read_rows(file).map_err(|source| CliError::Input {
            path: path.clone(),
            source,
        })?;
        rows.append(&mut more);
    }
    let text = summarize(&rows)?.to_text();
    std::fs::create_dir_all(out)?;
    write_plot_data(out, &rows)?;
    std::fs::write(out.join("summary.txt"), &text)?;
    Ok(text)
}

//! File formats, run configuration and the batch commands built on them.
//!
//! Every file starts with a format tag and version; loaders reject
//! anything else. All writes go to a temporary file that is renamed into
//! place.

mod commands;
mod config;
mod files;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{
    band_entry, cmd_eval, cmd_ipm_generate, cmd_sample, cmd_train, cmd_warmstart, EvalMetrics, GeneratedFile,
    HistogramSummary, TrainSummary, WarmstartSummary,
};
pub use config::{
    EvalSection, IpmSection, KappaSweep, NetSizes, RunConfig, SampleSection, WarmstartSection, SEED_ENV,
};
pub use files::{
    load_checkpoint, load_samples, load_trace, save_checkpoint, save_samples, save_trace, Checkpoint, SampleFile,
    TraceFile, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, SAMPLE_FORMAT, SAMPLE_VERSION, TRACE_FORMAT, TRACE_VERSION,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("{path}: unsupported format {found:?}, expected {expected:?}")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Ipm(#[from] crate::ipm::IpmError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `contents` to a sibling temporary file, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Shortest text that parses back to exactly `v`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn fmt_list(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 1.0, -2.5e-300, 1e300, std::f64::consts::PI, 6.283185307179586] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_list(&[1.0, 0.5]), "1.0,0.5");
    }
}

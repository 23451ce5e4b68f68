//! Sample and trace CSV files and JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fmt_f64, fmt_list, io_err, write_atomic, IoError};
use crate::autodiff::Tensor;
use crate::net::{NetConfig, NetParams};
use crate::points::PointSet;
use crate::trainer::{AdamState, SourceBox, TrainConfig};

pub const SAMPLE_FORMAT: &str = "deepparticle-samples";
pub const SAMPLE_VERSION: u32 = 1;
pub const TRACE_FORMAT: &str = "deepparticle-trace";
pub const TRACE_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "deepparticle-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Points tagged with a parameter vector and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub eta: Vec<f64>,
    /// Extra `key=value` header lines in file order.
    pub meta: Vec<(String, String)>,
    pub points: PointSet,
}

impl SampleFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Whether the header declares the points to live on `[0, 2π)^d`.
    pub fn is_torus(&self) -> bool {
        self.meta("domain") == Some("torus")
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn check_tag(path: &Path, first: Option<&str>, format: &str, version: u32) -> Result<(), IoError> {
    let expected = format!("# {format} v{version}");
    match first {
        Some(l) if l.trim_end() == expected => Ok(()),
        other => Err(IoError::Version {
            path: path.to_path_buf(),
            found: other.unwrap_or("").trim_end().to_string(),
            expected,
        }),
    }
}

fn parse_list(path: &Path, line: usize, s: &str) -> Result<Vec<f64>, IoError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format_err(path, line, format!("bad number {t:?}")))
        })
        .collect()
}

fn header_line(path: &Path, line: usize, text: &str) -> Result<(String, String), IoError> {
    let body = text.trim_start_matches('#').trim();
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| format_err(path, line, format!("header line without '=': {text:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn save_samples(path: &Path, file: &SampleFile) -> Result<(), IoError> {
    let mut out = format!("# {SAMPLE_FORMAT} v{SAMPLE_VERSION}\n");
    out += &format!("# d={}\n# n={}\n# eta={}\n", file.points.dim(), file.points.len(), fmt_list(&file.eta));
    for (k, v) in &file.meta {
        out += &format!("# {k}={v}\n");
    }
    for row in file.points.rows() {
        out += &fmt_list(row);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_samples(path: &Path) -> Result<SampleFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    check_tag(path, lines.next().map(|(_, l)| l), SAMPLE_FORMAT, SAMPLE_VERSION)?;
    let (mut d, mut n, mut eta) = (None, None, None);
    let mut meta = Vec::new();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, l) in lines {
        let line = i + 1;
        if l.starts_with('#') {
            if rows > 0 {
                return Err(format_err(path, line, "header line after data"));
            }
            let (k, v) = header_line(path, line, l)?;
            match k.as_str() {
                "d" => d = Some(v.parse::<usize>().map_err(|_| format_err(path, line, "bad d"))?),
                "n" => n = Some(v.parse::<usize>().map_err(|_| format_err(path, line, "bad n"))?),
                "eta" => eta = Some(parse_list(path, line, &v)?),
                _ => meta.push((k, v)),
            }
            continue;
        }
        if l.trim().is_empty() {
            continue;
        }
        let d = d.ok_or_else(|| format_err(path, line, "data before the d header"))?;
        let vals = parse_list(path, line, l)?;
        if vals.len() != d {
            return Err(format_err(path, line, format!("expected {d} coordinates, found {}", vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    let d = d.ok_or_else(|| format_err(path, 0, "missing d header"))?;
    let n = n.ok_or_else(|| format_err(path, 0, "missing n header"))?;
    let eta = eta.ok_or_else(|| format_err(path, 0, "missing eta header"))?;
    if d == 0 {
        return Err(format_err(path, 0, "d must be positive"));
    }
    if rows != n {
        return Err(format_err(path, 0, format!("header says n={n}, found {rows} rows")));
    }
    let file = SampleFile {
        eta,
        meta,
        points: PointSet::new(d, data).expect("rows checked"),
    };
    if file.is_torus() {
        let tau = std::f64::consts::TAU;
        if let Some(v) = file.points.data().iter().find(|v| !(0.0..tau).contains(*v)) {
            return Err(format_err(path, 0, format!("torus coordinate {v} outside [0, 2π)")));
        }
    }
    Ok(file)
}

/// A table of named numeric columns with header metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TraceFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn save_trace(path: &Path, trace: &TraceFile) -> Result<(), IoError> {
    let mut out = format!("# {TRACE_FORMAT} v{TRACE_VERSION}\n");
    for (k, v) in &trace.meta {
        out += &format!("# {k}={v}\n");
    }
    out += &trace.columns.join(",");
    out.push('\n');
    for row in &trace.rows {
        out += &row
            .iter()
            .map(|v| if v.fract() == 0.0 && v.abs() < 1e15 { format!("{}", *v as i64) } else { fmt_f64(*v) })
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_trace(path: &Path) -> Result<TraceFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    check_tag(path, lines.next().map(|(_, l)| l), TRACE_FORMAT, TRACE_VERSION)?;
    let mut meta = Vec::new();
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        if l.starts_with('#') {
            meta.push(header_line(path, line, l)?);
        } else if l.trim().is_empty() {
            continue;
        } else if let Some(cols) = &columns {
            let vals = parse_list(path, line, l)?;
            if vals.len() != cols.len() {
                return Err(format_err(path, line, format!("expected {} columns, found {}", cols.len(), vals.len())));
            }
            rows.push(vals);
        } else {
            columns = Some(l.split(',').map(|c| c.trim().to_string()).collect());
        }
    }
    Ok(TraceFile {
        meta,
        columns: columns.ok_or_else(|| format_err(path, 0, "missing column header"))?,
        rows,
    })
}

/// Trained parameters plus everything needed to sample or resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub source: SourceBox,
    /// Next mini-batch and step within it.
    pub batch: usize,
    pub step: usize,
    pub adam: Option<AdamState>,
    pub train: Option<TrainConfig>,
    /// Parameter values seen in training.
    pub etas: Vec<Vec<f64>>,
}

impl Checkpoint {
    /// An untrained checkpoint holding `params`.
    pub fn from_params(params: NetParams, source: SourceBox) -> Self {
        Self {
            params,
            source,
            batch: 0,
            step: 0,
            adam: None,
            train: None,
            etas: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamDoc {
    t: u64,
    m: BTreeMap<String, TensorDoc>,
    v: BTreeMap<String, TensorDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CursorDoc {
    batch: usize,
    step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    net: NetConfig,
    source: SourceBox,
    cursor: CursorDoc,
    etas: Vec<Vec<f64>>,
    train: Option<TrainConfig>,
    params: BTreeMap<String, TensorDoc>,
    adam: Option<AdamDoc>,
}

fn tensors_doc(p: &NetParams) -> BTreeMap<String, TensorDoc> {
    p.iter()
        .map(|(s, t)| {
            (
                s.name.clone(),
                TensorDoc {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect()
}

fn params_from_doc(
    path: &Path,
    config: NetConfig,
    mut doc: BTreeMap<String, TensorDoc>,
) -> Result<NetParams, IoError> {
    let p = NetParams::from_named(config, |spec| {
        doc.remove(&spec.name).and_then(|t| Tensor::new(t.shape, t.data).ok())
    })?;
    if let Some(extra) = doc.keys().next() {
        return Err(format_err(path, 0, format!("unknown tensor {extra:?}")));
    }
    Ok(p)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), IoError> {
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        net: *ck.params.config(),
        source: ck.source,
        cursor: CursorDoc {
            batch: ck.batch,
            step: ck.step,
        },
        etas: ck.etas.clone(),
        train: ck.train.clone(),
        params: tensors_doc(&ck.params),
        adam: ck.adam.as_ref().map(|a| AdamDoc {
            t: a.t,
            m: tensors_doc(&a.m),
            v: tensors_doc(&a.v),
        }),
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let json_err = |source| IoError::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let format = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
    let version = value.get("version").and_then(|v| v.as_u64());
    if format != CHECKPOINT_FORMAT || version != Some(CHECKPOINT_VERSION as u64) {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            found: format!("{format} v{}", version.map_or("?".into(), |v| v.to_string())),
            expected: format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"),
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(value).map_err(json_err)?;
    let params = params_from_doc(path, doc.net, doc.params)?;
    let adam = match doc.adam {
        Some(a) => Some(AdamState {
            t: a.t,
            m: params_from_doc(path, doc.net, a.m)?,
            v: params_from_doc(path, doc.net, a.v)?,
        }),
        None => None,
    };
    Ok(Checkpoint {
        params,
        source: doc.source,
        batch: doc.cursor.batch,
        step: doc.cursor.step,
        adam,
        train: doc.train,
        etas: doc.etas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_file() -> SampleFile {
        SampleFile {
            eta: vec![0.25],
            meta: vec![("domain".into(), "torus".into()), ("flow".into(), "cellular2d".into())],
            points: PointSet::new(2, vec![0.1, 6.2, 3.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let f = sample_file();
        save_samples(&p, &f).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# deepparticle-samples v1\n# d=2\n# n=2\n# eta=0.25\n"));
        assert_eq!(load_samples(&p).unwrap(), f);
    }

    #[test]
    fn sample_loader_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "# deepparticle-samples v2\n# d=1\n# n=0\n# eta=1\n").unwrap();
        assert!(matches!(load_samples(&p), Err(IoError::Version { .. })));
        fs::write(&p, "# deepparticle-samples v1\n# d=1\n# n=2\n# eta=1\n0.5\n").unwrap();
        assert!(matches!(load_samples(&p), Err(IoError::Format { .. })));
        fs::write(&p, "# deepparticle-samples v1\n# d=2\n# n=1\n# eta=1\n0.5\n").unwrap();
        assert!(matches!(load_samples(&p), Err(IoError::Format { line: 5, .. })));
        fs::write(&p, "# deepparticle-samples v1\n# d=1\n# n=1\n# eta=1\n# domain=torus\n7.0\n").unwrap();
        assert!(load_samples(&p).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = TraceFile {
            meta: vec![("kind".into(), "ipm".into())],
            columns: vec!["generation".into(), "lambda".into()],
            rows: vec![vec![1.0, 1.25], vec![2.0, 0.1]],
        };
        save_trace(&p, &t).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("generation,lambda\n1,1.25\n2,0.1\n"));
        assert_eq!(load_trace(&p).unwrap(), t);
        assert_eq!(t.column("lambda").unwrap(), vec![1.25, 0.1]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = NetConfig::new(2, 1).with_size(6, 5);
        let params = net::init_params(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ck = Checkpoint::from_params(params.clone(), SourceBox::torus());
        ck.adam = Some(AdamState::new(cfg));
        ck.batch = 2;
        ck.etas = vec![vec![0.25], vec![0.125]];
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let x = PointSet::new(2, vec![0.3, 1.7, 5.0, 2.2]).unwrap();
        let a = net::forward(&params, &x, &[0.2]).unwrap();
        let b = net::forward(&back.params, &x, &[0.2]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"format": "deepparticle-checkpoint", "version": 9}"#).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(matches!(err, IoError::Version { .. }), "{err}");
        assert!(err.to_string().contains("v9"));
    }
}

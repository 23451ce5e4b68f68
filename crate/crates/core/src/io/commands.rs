//! The batch commands: particle generation, training, sampling,
//! evaluation and warm-start comparison.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::files::{
    load_checkpoint, load_samples, load_trace, save_checkpoint, save_samples, save_trace, Checkpoint, SampleFile,
    TraceFile,
};
use super::{fmt_f64, fmt_list, write_atomic, IoError};
use crate::ipm::{self, run_ipm, uniform_positions};
use crate::net::{self, NetError};
use crate::points::PointSet;
use crate::rng;
use crate::stats::{self, Histogram2d};
use crate::trainer::{
    initial_params, train_from, AdamState, DataDictionary, SourceBox, TrainState, TraceRow,
};
use crate::transport::{self, lp_round, normalized_frobenius, IpmOptions, LpRoundConfig, TransportPlan};

const TAG_SAMPLE: u64 = 0x5A3E;
const TAG_EVAL: u64 = 0xE7A1;

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn ipm_meta(cfg: &ipm::IpmConfig) -> Vec<(String, String)> {
    vec![
        kv("flow", cfg.flow.kind),
        kv("kappa", fmt_f64(cfg.pot.kappa)),
        kv("alpha", fmt_f64(cfg.pot.alpha)),
        kv("e", fmt_list(&cfg.pot.e)),
        kv("generations", cfg.generations),
        kv("n0", cfg.n0),
        kv("dt", fmt_f64(cfg.dt)),
        kv("t_final", fmt_f64(cfg.t_final)),
        kv("seed", cfg.seed),
    ]
}

/// Paths written for one κ by [`cmd_ipm_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFile {
    pub kappa: f64,
    pub samples: PathBuf,
    pub trace: PathBuf,
    pub lambda: f64,
}

/// Runs the particle method for every κ of the sweep and writes
/// `samples_k{i}.csv` and `lambda_k{i}.csv` into `out_dir`.
pub fn cmd_ipm_generate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<GeneratedFile>, IoError> {
    let kappas = cfg.ipm.kappa_values();
    if kappas.is_empty() {
        return Err(IoError::Config("no kappa values to run".into()));
    }
    let mut out = Vec::with_capacity(kappas.len());
    for (i, &kappa) in kappas.iter().enumerate() {
        let ic = cfg.ipm.ipm_config(kappa, cfg.ipm.generations, cfg.ipm.seed);
        ic.validate()?;
        let res = run_ipm(&ic, None)?;
        let mut meta = vec![kv("domain", "torus"), kv("source", "ipm")];
        meta.extend(ipm_meta(&ic));
        meta.push(kv("lambda", fmt_f64(res.lambda())));
        let samples = out_dir.join(format!("samples_k{}.csv", i + 1));
        save_samples(
            &samples,
            &SampleFile {
                eta: vec![kappa],
                meta: meta.clone(),
                points: res.final_positions.clone(),
            },
        )?;
        let trace = out_dir.join(format!("lambda_k{}.csv", i + 1));
        let mut tmeta = vec![kv("kind", "ipm")];
        tmeta.extend(ipm_meta(&ic));
        save_trace(
            &trace,
            &TraceFile {
                meta: tmeta,
                columns: vec!["generation".into(), "e_gen".into(), "lambda".into()],
                rows: res
                    .e_gen
                    .iter()
                    .zip(&res.lambda_trace)
                    .enumerate()
                    .map(|(g, (e, l))| vec![(g + 1) as f64, *e, *l])
                    .collect(),
            },
        )?;
        log::info!("kappa = {kappa}: lambda = {}", res.lambda());
        out.push(GeneratedFile {
            kappa,
            samples,
            trace,
            lambda: res.lambda(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    /// Rows in the trace file, including any from before a resume.
    pub steps: usize,
    pub finished: bool,
    pub final_loss: Option<f64>,
    /// Pre-optimizations that stopped at the round cap.
    pub capped_preopts: usize,
}

fn trace_file(rows: &[TraceRow], n_eta: usize, meta: Vec<(String, String)>) -> TraceFile {
    let mut columns = vec!["step".to_string(), "batch".into(), "loss".into()];
    columns.extend((1..=n_eta).map(|r| format!("norm_{r}")));
    TraceFile {
        meta,
        columns,
        rows: rows
            .iter()
            .map(|r| {
                let mut v = vec![r.step as f64, r.batch as f64, r.loss];
                v.extend(&r.plan_norms);
                v
            })
            .collect(),
    }
}

fn rows_from_trace(t: &TraceFile) -> Vec<TraceRow> {
    t.rows
        .iter()
        .map(|r| TraceRow {
            step: r[0] as usize,
            batch: r[1] as usize,
            loss: r[2],
            plan_norms: r[3..].to_vec(),
        })
        .collect()
}

/// Trains on the given sample files, writing `checkpoint.json` and
/// `trace.csv` to `out_dir`. With `resume`, continues from that
/// checkpoint's cursor and keeps the earlier trace rows.
pub fn cmd_train(
    cfg: &RunConfig,
    sample_files: &[PathBuf],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, IoError> {
    if sample_files.is_empty() {
        return Err(IoError::Config("no sample files given".into()));
    }
    let pools = sample_files
        .iter()
        .map(|p| load_samples(p).map(|f| (f.eta, f.points)))
        .collect::<Result<Vec<_>, _>>()?;
    let etas: Vec<Vec<f64>> = pools.iter().map(|(e, _)| e.clone()).collect();
    let dict = DataDictionary::new(cfg.source, pools)?;
    let net_config = cfg.net.config(dict.dim(), dict.eta_dim());
    let tc = &cfg.train;
    let ck_path = out_dir.join("checkpoint.json");
    let trace_path = out_dir.join("trace.csv");

    let (state, mut rows) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if *ck.params.config() != net_config {
                return Err(IoError::Mismatch(format!(
                    "checkpoint network {:?} differs from the configured {:?}",
                    ck.params.config(),
                    net_config
                )));
            }
            let adam = ck.adam.unwrap_or_else(|| AdamState::new(net_config));
            let state = TrainState {
                params: ck.params,
                adam,
                batch: ck.batch,
                step: ck.step,
            };
            let start = state.global_step(tc);
            let earlier = if trace_path.exists() {
                rows_from_trace(&load_trace(&trace_path)?)
                    .into_iter()
                    .filter(|r| r.step < start)
                    .collect()
            } else {
                Vec::new()
            };
            (state, earlier)
        }
        None => (TrainState::fresh(initial_params(net_config, tc.seed)?), Vec::new()),
    };
    let meta = vec![kv("kind", "train"), kv("n", tc.n), kv("n_eta", tc.n_eta), kv("seed", tc.seed)];
    let write_all = |state: &TrainState, rows: &[TraceRow]| -> Result<(), IoError> {
        save_checkpoint(
            &ck_path,
            &Checkpoint {
                params: state.params.clone(),
                source: cfg.source,
                batch: state.batch,
                step: state.step,
                adam: Some(state.adam.clone()),
                train: Some(tc.clone()),
                etas: etas.clone(),
            },
        )?;
        save_trace(&trace_path, &trace_file(rows, tc.n_eta, meta.clone()))
    };

    let mut failure = None;
    let mut new_rows = Vec::new();
    let outcome = train_from(tc, &dict, state, |view| {
        new_rows.push(view.row.clone());
        let done = view.row.step + 1;
        if done % 100 == 0 {
            log::info!("step {done}: batch {}, loss {:.6}", view.row.batch, view.row.loss);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let all: Vec<TraceRow> = rows.iter().chain(&new_rows).cloned().collect();
            if let Err(e) = write_all(view.state, &all) {
                failure = Some(e);
                return ControlFlow::Break(());
            }
        }
        if cfg.stop_after.is_some_and(|s| done >= s) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    rows.extend(new_rows);
    write_all(&outcome.state, &rows)?;
    Ok(TrainSummary {
        checkpoint: ck_path,
        trace: trace_path,
        steps: rows.len(),
        finished: outcome.state.is_finished(tc),
        final_loss: rows.last().map(|r| r.loss),
        capped_preopts: outcome.preopt.iter().filter(|(_, _, r)| r.capped).count(),
    })
}

/// `count` source points on the checkpoint's source box, drawn from the
/// same stream as the particle method's uniform start for `seed`.
fn source_points(source: &SourceBox, count: usize, d: usize, seed: u64) -> PointSet {
    let mut x = uniform_positions(count, d, seed);
    let scale = (source.hi - source.lo) / std::f64::consts::TAU;
    x.data_mut().iter_mut().for_each(|v| *v = source.lo + *v * scale);
    x
}

/// Pushes `count` fresh source samples through the network at `eta`.
pub fn cmd_sample(
    checkpoint: &Path,
    eta: &[f64],
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<SampleFile, IoError> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = *ck.params.config();
    if eta.len() != cfg.d_eta {
        return Err(NetError::EtaDim {
            expected: cfg.d_eta,
            got: eta.len(),
        }
        .into());
    }
    let x = source_points(&ck.source, count, cfg.d, rng_seed(seed, TAG_SAMPLE));
    let points = net::forward(&ck.params, &x, eta)?;
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let file = SampleFile {
        eta: eta.to_vec(),
        meta: vec![
            kv("source", "network"),
            kv("checkpoint", name),
            kv("seed", seed),
            kv("source_lo", fmt_f64(ck.source.lo)),
            kv("source_hi", fmt_f64(ck.source.hi)),
        ],
        points,
    };
    save_samples(out, &file)?;
    Ok(file)
}

fn rng_seed(seed: u64, tag: u64) -> u64 {
    use rand::Rng;
    rng::stream(seed, &[tag]).random()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramSummary {
    pub max_mass: f64,
    /// Cells holding more than `1/n` of the points.
    pub support: usize,
    pub outside: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub format: &'static str,
    pub version: u32,
    pub d: usize,
    pub n_generated: usize,
    pub n_reference: usize,
    pub n_subsample: usize,
    pub w2_plan: f64,
    pub lp_rounds: usize,
    pub plan_norm: f64,
    pub w2_exact_1d: Option<f64>,
    pub ks_1d: Option<f64>,
    pub nbins: usize,
    pub axes: [usize; 2],
    pub range_lo: [f64; 2],
    pub range_hi: [f64; 2],
    pub generated: HistogramSummary,
    pub reference: HistogramSummary,
}

fn subsample(points: &PointSet, n: usize, rng: &mut rng::Stream) -> Result<PointSet, IoError> {
    if n == points.len() {
        return Ok(points.clone());
    }
    Ok(points.select(&transport::sample_indices(points.len(), n, rng)?))
}

/// Bin counts along one axis, as a single histogram row.
fn histogram_1d(values: &[f64], nbins: usize, lo: f64, hi: f64) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; nbins];
    let mut outside = 0;
    for &v in values {
        if v >= lo && v <= hi {
            let b = (((v - lo) / (hi - lo)) * nbins as f64).floor() as usize;
            counts[b.min(nbins - 1)] += 1;
        } else {
            outside += 1;
        }
    }
    (counts, outside)
}

fn summarize(counts: &[u64], outside: u64) -> HistogramSummary {
    let total = counts.iter().sum::<u64>() + outside;
    let t = total.max(1) as f64;
    HistogramSummary {
        max_mass: counts.iter().copied().max().unwrap_or(0) as f64 / t,
        support: counts.iter().filter(|&&c| c as f64 / t > 1.0 / t).count(),
        outside,
    }
}

fn write_histogram(path: &Path, rows: &[&[u64]], meta: &[(String, String)]) -> Result<(), IoError> {
    let mut out = String::from("# deepparticle-histogram v1\n");
    for (k, v) in meta {
        out += &format!("# {k}={v}\n");
    }
    for row in rows {
        out += &row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Compares a generated sample file with a reference one and writes the
/// metrics JSON to `out` plus `<stem>_hist_generated.csv` and
/// `<stem>_hist_reference.csv` beside it.
pub fn cmd_eval(cfg: &RunConfig, generated: &Path, reference: &Path, out: &Path) -> Result<EvalMetrics, IoError> {
    let ev = &cfg.eval;
    let gen = load_samples(generated)?;
    let rf = load_samples(reference)?;
    let d = gen.points.dim();
    if rf.points.dim() != d {
        return Err(IoError::Mismatch(format!(
            "generated points have dimension {d}, reference points {}",
            rf.points.dim()
        )));
    }
    if gen.points.is_empty() || rf.points.is_empty() {
        return Err(IoError::Mismatch("empty sample file".into()));
    }
    if ev.nbins == 0 || ev.max_points == 0 || ev.lp_m == 0 {
        return Err(IoError::Config("eval.nbins, eval.max_points and eval.lp_m must be positive".into()));
    }

    let n = gen.points.len().min(rf.points.len()).min(ev.max_points);
    let mut rng = rng::stream(ev.seed, &[TAG_EVAL]);
    let f = subsample(&gen.points, n, &mut rng)?;
    let y = subsample(&rf.points, n, &mut rng)?;
    let mut plan = TransportPlan::uniform(n);
    let lp = LpRoundConfig {
        m: ev.lp_m.min(n),
        pivot_fraction: 0.5,
        ipm: IpmOptions::default(),
    };
    let mut rounds = 0;
    let mut last = normalized_frobenius(&plan);
    while rounds < ev.lp_round_cap && n > 1 {
        let chunk = n.min(ev.lp_round_cap - rounds);
        for _ in 0..chunk {
            lp_round(&mut plan, &f, &y, &lp, &mut rng)?;
        }
        rounds += chunk;
        let norm = normalized_frobenius(&plan);
        if (norm - last).abs() < ev.norm_tol {
            break;
        }
        last = norm;
    }
    let w2_plan = transport::w2_estimate(&plan, &f, &y)?;

    let (w2_exact_1d, ks_1d) = if d == 1 {
        (
            Some(stats::w2_sorted_1d(f.data(), y.data())?),
            Some(stats::ks_two_sample(gen.points.data(), rf.points.data())?),
        )
    } else {
        (None, None)
    };

    let axes = if d == 1 { [0, 0] } else { ev.axes };
    if axes.iter().any(|&a| a >= d) {
        return Err(IoError::Config(format!("eval.axes {axes:?} out of range for dimension {d}")));
    }
    let torus = gen.is_torus() || rf.is_torus();
    let (lo, hi) = match ev.range {
        Some([a, b]) => ([a, a], [b, b]),
        None if torus => ([0.0; 2], [std::f64::consts::TAU; 2]),
        None => {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for p in gen.points.rows().chain(rf.points.rows()) {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[axes[k]]);
                    hi[k] = hi[k].max(p[axes[k]]);
                }
            }
            for k in 0..2 {
                if hi[k] <= lo[k] {
                    hi[k] = lo[k] + 1.0;
                }
            }
            (lo, hi)
        }
    };
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    let dir = out.parent().unwrap_or(Path::new(""));
    let mut summaries = Vec::new();
    for (label, file) in [("generated", &gen), ("reference", &rf)] {
        let mut meta = vec![
            kv("nbins", ev.nbins),
            kv("axes", format!("{},{}", axes[0], axes[1])),
            kv("lo", fmt_list(&lo)),
            kv("hi", fmt_list(&hi)),
        ];
        let path = dir.join(format!("{stem}_hist_{label}.csv"));
        if d == 1 {
            let (counts, outside) = histogram_1d(file.points.data(), ev.nbins, lo[0], hi[0]);
            meta.push(kv("outside", outside));
            write_histogram(&path, &[&counts], &meta)?;
            summaries.push(summarize(&counts, outside));
        } else {
            let h = Histogram2d::new(&file.points, (axes[0], axes[1]), ev.nbins, lo, hi)?;
            meta.push(kv("outside", h.outside));
            let rows: Vec<&[u64]> = h.counts.chunks(ev.nbins).collect();
            write_histogram(&path, &rows, &meta)?;
            summaries.push(summarize(&h.counts, h.outside));
        }
    }
    let reference = summaries.pop().expect("two summaries");
    let generated = summaries.pop().expect("two summaries");
    let metrics = EvalMetrics {
        format: "deepparticle-metrics",
        version: 1,
        d,
        n_generated: gen.points.len(),
        n_reference: rf.points.len(),
        n_subsample: n,
        w2_plan,
        lp_rounds: rounds,
        plan_norm: normalized_frobenius(&plan),
        w2_exact_1d,
        ks_1d,
        nbins: ev.nbins,
        axes,
        range_lo: lo,
        range_hi: hi,
        generated,
        reference,
    };
    let mut text = serde_json::to_string_pretty(&metrics).expect("serializable");
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    Ok(metrics)
}

/// First 1-based generation from which the trace stays within
/// `±band·|final|` of its final value.
pub fn band_entry(trace: &[f64], band: f64) -> usize {
    let Some(&last) = trace.last() else {
        return 0;
    };
    let tol = band * last.abs();
    let mut entry = trace.len();
    for (g, v) in trace.iter().enumerate().rev() {
        if (v - last).abs() <= tol {
            entry = g + 1;
        } else {
            break;
        }
    }
    entry
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmstartSummary {
    pub lambda_warm: Vec<f64>,
    pub lambda_cold: Vec<f64>,
    pub warm_entry: usize,
    pub cold_entry: usize,
}

/// Runs the particle method from network samples and from the uniform
/// start with the same dynamics seed and writes both λ traces to `out`.
pub fn cmd_warmstart(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<WarmstartSummary, IoError> {
    let ck = load_checkpoint(checkpoint)?;
    let ws = &cfg.warmstart;
    let nc = *ck.params.config();
    if nc.d != cfg.ipm.d {
        return Err(IoError::Mismatch(format!(
            "checkpoint has d = {}, flow has d = {}",
            nc.d, cfg.ipm.d
        )));
    }
    let ic = cfg.ipm.ipm_config(ws.kappa, ws.generations, ws.seed);
    ic.validate()?;
    let x = source_points(&ck.source, ic.n0, nc.d, ws.seed);
    let mut warm_init = net::forward(&ck.params, &x, &ws.eta())?;
    warm_init.data_mut().iter_mut().for_each(|v| *v = ipm::wrap(*v));
    let warm = run_ipm(&ic, Some(&warm_init))?;
    let cold = run_ipm(&ic, None)?;
    let warm_entry = band_entry(&warm.lambda_trace, ws.band);
    let cold_entry = band_entry(&cold.lambda_trace, ws.band);
    let mut meta = vec![kv("kind", "warmstart")];
    meta.extend(ipm_meta(&ic));
    meta.push(kv("eta", fmt_list(&ws.eta())));
    meta.push(kv("band", fmt_f64(ws.band)));
    meta.push(kv("warm_entry", warm_entry));
    meta.push(kv("cold_entry", cold_entry));
    save_trace(
        out,
        &TraceFile {
            meta,
            columns: vec!["generation".into(), "lambda_warm".into(), "lambda_cold".into()],
            rows: warm
                .lambda_trace
                .iter()
                .zip(&cold.lambda_trace)
                .enumerate()
                .map(|(g, (w, c))| vec![(g + 1) as f64, *w, *c])
                .collect(),
        },
    )?;
    Ok(WarmstartSummary {
        lambda_warm: warm.lambda_trace,
        lambda_cold: cold.lambda_trace,
        warm_entry,
        cold_entry,
    })
}

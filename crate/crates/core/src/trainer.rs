//! Training loop: Adam updates of the network alternate with mini-batch LP
//! refinement of one transport plan per parameter value.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, batch,
//! step, r)`, so a run is reproducible and the per-η work can run on
//! separate threads without changing results.

use std::ops::ControlFlow;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{self, NetConfig, NetError, NetParams, NetPass, ParamKind};
use crate::points::PointSet;
use crate::rng;
use crate::transport::{
    self, lp_round, normalized_frobenius, IpmOptions, LpRoundConfig, TransportError, TransportPlan,
};

const TAG_INIT: u64 = 0x1A17;
const TAG_BATCH: u64 = 0xBA7C;
const TAG_PREOPT: u64 = 0x9E0B;
const TAG_LP: u64 = 0x1B57;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid data dictionary: {0}")]
    Data(String),
    #[error("target pool for eta = {eta:?} has {available} unused samples, batch needs {needed}")]
    PoolExhausted {
        eta: Vec<f64>,
        available: usize,
        needed: usize,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Optional step decay: the rate is multiplied by `factor` every `every`
/// gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Samples per parameter value per mini-batch.
    pub n: usize,
    pub n_eta: usize,
    pub n_dict: usize,
    pub steps_per_batch: usize,
    /// LP rounds per parameter value after each gradient step.
    pub n_lp: usize,
    /// Sub-problem size.
    pub m: usize,
    /// Normalized Frobenius norm that plan pre-optimization must reach.
    pub tol: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pivot_fraction: f64,
    pub preopt_cap: usize,
    pub seed: u64,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_eta: 8,
            n_dict: 5,
            steps_per_batch: 10_000,
            n_lp: 10,
            m: 25,
            tol: 0.7,
            lr: 0.002,
            weight_decay: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pivot_fraction: 0.5,
            preopt_cap: 5000,
            seed: 0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        for (name, v) in [
            ("n", self.n),
            ("n_eta", self.n_eta),
            ("n_dict", self.n_dict),
            ("steps_per_batch", self.steps_per_batch),
            ("n_lp", self.n_lp),
            ("m", self.m),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.m > self.n {
            return bad(format!("m = {} exceeds n = {}", self.m, self.n));
        }
        let floor = 1.0 / (self.n as f64).sqrt();
        if !(self.tol > floor && self.tol <= 1.0) {
            return bad(format!("tol = {} must lie in ({floor}, 1]", self.tol));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pivot_fraction) {
            return bad(format!("pivot_fraction = {} must lie in [0, 1]", self.pivot_fraction));
        }
        if let Some(decay) = self.lr_decay {
            if decay.every == 0 || !(decay.factor > 0.0 && decay.factor <= 1.0) {
                return bad("lr_decay needs every > 0 and factor in (0, 1]".into());
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.n_dict * self.steps_per_batch
    }

    /// Learning rate in effect at the 0-based global step.
    pub fn lr_at(&self, global_step: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((global_step / d.every) as i32),
            None => self.lr,
        }
    }

    pub fn adam(&self, global_step: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(global_step),
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lp_round_config(&self) -> LpRoundConfig {
        LpRoundConfig {
            m: self.m,
            pivot_fraction: self.pivot_fraction,
            ipm: IpmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments with the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: NetConfig) -> Self {
        Self {
            m: NetParams::zeros(config),
            v: NetParams::zeros(config),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay on weight
/// tensors only.
pub fn adam_step(state: &mut AdamState, params: &mut NetParams, grads: &NetParams, cfg: &AdamConfig) {
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powf(state.t as f64);
    let c2 = 1.0 - cfg.beta2.powf(state.t as f64);
    let kinds: Vec<ParamKind> = params.specs().iter().map(|s| s.kind).collect();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((p, g), m), v), kind) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(m_all.iter_mut())
        .zip(v_all.iter_mut())
        .zip(kinds)
    {
        let decay = if kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *p);
        }
    }
}

/// Axis-aligned cube `[lo, hi)^d` from which source points are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceBox {
    pub lo: f64,
    pub hi: f64,
}

impl SourceBox {
    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn torus() -> Self {
        Self {
            lo: 0.0,
            hi: std::f64::consts::TAU,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi {
            Ok(())
        } else {
            Err(TrainError::Data(format!("empty source box [{}, {})", self.lo, self.hi)))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> PointSet {
        let data = (0..n * d).map(|_| rng.random_range(self.lo..self.hi)).collect();
        PointSet::new(d, data).expect("d > 0")
    }
}

#[derive(Debug, Clone)]
struct Pool {
    eta: Vec<f64>,
    points: PointSet,
    unused: Vec<usize>,
}

/// Target pools, one per parameter value, plus the source box.
#[derive(Debug, Clone)]
pub struct DataDictionary {
    source: SourceBox,
    pools: Vec<Pool>,
}

impl DataDictionary {
    pub fn new(source: SourceBox, pools: Vec<(Vec<f64>, PointSet)>) -> Result<Self, TrainError> {
        source.validate()?;
        let Some((eta0, pts0)) = pools.first() else {
            return Err(TrainError::Data("no parameter values".into()));
        };
        let (d, d_eta) = (pts0.dim(), eta0.len());
        for (eta, pts) in &pools {
            if pts.dim() != d || eta.len() != d_eta {
                return Err(TrainError::Data(format!(
                    "pool for eta = {eta:?} has dimension {} / eta length {}, expected {d} / {d_eta}",
                    pts.dim(),
                    eta.len()
                )));
            }
            if pts.data().iter().chain(eta).any(|v| !v.is_finite()) {
                return Err(TrainError::Data(format!("non-finite value in pool for eta = {eta:?}")));
            }
        }
        Ok(Self {
            source,
            pools: pools
                .into_iter()
                .map(|(eta, points)| Pool {
                    unused: (0..points.len()).collect(),
                    eta,
                    points,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pools[0].points.dim()
    }

    pub fn eta_dim(&self) -> usize {
        self.pools[0].eta.len()
    }

    pub fn source(&self) -> SourceBox {
        self.source
    }

    pub fn eta(&self, r: usize) -> &[f64] {
        &self.pools[r].eta
    }

    pub fn pool(&self, r: usize) -> &PointSet {
        &self.pools[r].points
    }

    /// Targets of pool `r` not yet handed out.
    pub fn remaining(&self, r: usize) -> usize {
        self.pools[r].unused.len()
    }
}

/// Sources, targets and parameter value of one group in a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub x: PointSet,
    pub y: PointSet,
    pub eta: Vec<f64>,
}

/// Draws `n` unused targets from pool `r` without replacement and `n`
/// fresh uniform sources.
pub fn draw_minibatch<R: Rng + ?Sized>(
    dict: &mut DataDictionary,
    r: usize,
    n: usize,
    rng: &mut R,
) -> Result<MiniBatch, TrainError> {
    let d = dict.dim();
    let source = dict.source;
    let pool = dict
        .pools
        .get_mut(r)
        .ok_or_else(|| TrainError::Data(format!("no pool with index {r}")))?;
    if pool.unused.len() < n {
        return Err(TrainError::PoolExhausted {
            eta: pool.eta.clone(),
            available: pool.unused.len(),
            needed: n,
        });
    }
    let mut picks = index::sample(rng, pool.unused.len(), n).into_vec();
    let chosen: Vec<usize> = picks.iter().map(|&p| pool.unused[p]).collect();
    picks.sort_unstable_by(|a, b| b.cmp(a));
    for p in picks {
        pool.unused.swap_remove(p);
    }
    let y = pool.points.select(&chosen);
    let eta = pool.eta.clone();
    let x = source.sample(n, d, rng);
    Ok(MiniBatch { x, y, eta })
}

/// Result of [`pre_optimize_plan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreoptReport {
    pub rounds: usize,
    pub capped: bool,
    pub norm: f64,
}

/// LP rounds until the plan's normalized Frobenius norm reaches `tol`, or
/// `cap` rounds have run.
pub fn pre_optimize_plan<R: Rng + ?Sized>(
    plan: &mut TransportPlan,
    f: &PointSet,
    y: &PointSet,
    lp: &LpRoundConfig,
    tol: f64,
    cap: usize,
    rng: &mut R,
) -> Result<PreoptReport, TrainError> {
    let mut rounds = 0;
    loop {
        let norm = normalized_frobenius(plan);
        if norm >= tol {
            return Ok(PreoptReport {
                rounds,
                capped: false,
                norm,
            });
        }
        if rounds >= cap {
            log::warn!("plan pre-optimization stopped at the cap of {cap} rounds with norm {norm:.4} < {tol}");
            return Ok(PreoptReport {
                rounds,
                capped: true,
                norm,
            });
        }
        lp_round(plan, f, y, lp, rng)?;
        rounds += 1;
    }
}

/// `Σ_ij γ_ij |f(x_i; η) − y_j|²` and its parameter gradient for one group.
pub fn transport_loss(
    params: &NetParams,
    batch: &MiniBatch,
    plan: &TransportPlan,
) -> Result<(f64, NetParams), TrainError> {
    let mut pass = NetPass::new(*params.config(), &batch.x, &batch.eta)?;
    let f = pass.forward(params)?;
    let (p, g) = transport::transport_loss_grad(plan, &f, &batch.y)?;
    Ok((p, pass.backward(&g)?))
}

/// Loss value of one group without gradients.
pub fn transport_loss_value(params: &NetParams, batch: &MiniBatch, plan: &TransportPlan) -> Result<f64, TrainError> {
    let f = net::forward(params, &batch.x, &batch.eta)?;
    Ok(transport::plan_objective(plan, &f, &batch.y)?)
}

/// One trace row, written after the step's LP rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 0-based global gradient step.
    pub step: usize,
    pub batch: usize,
    /// `sqrt(P / (n_eta·N))` at the parameters before this step's update.
    pub loss: f64,
    /// Normalized Frobenius norm of each plan after the step.
    pub plan_norms: Vec<f64>,
}

/// Where training resumes: the parameters, optimizer state and the next
/// step to execute.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    pub adam: AdamState,
    pub batch: usize,
    /// Next step within `batch`.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(params: NetParams) -> Self {
        let adam = AdamState::new(*params.config());
        Self {
            params,
            adam,
            batch: 0,
            step: 0,
        }
    }

    pub fn global_step(&self, cfg: &TrainConfig) -> usize {
        self.batch * cfg.steps_per_batch + self.step
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.batch >= cfg.n_dict
    }
}

/// What the observer sees after each step.
pub struct StepView<'a> {
    pub row: &'a TraceRow,
    pub state: &'a TrainState,
    pub plans: Vec<&'a TransportPlan>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    /// Pre-optimization reports as `(batch, r, report)`.
    pub preopt: Vec<(usize, usize, PreoptReport)>,
    /// LP rounds that fell back to their starting block.
    pub degraded_rounds: usize,
}

/// Randomly initialized parameters for `seed`.
pub fn initial_params(net_config: NetConfig, seed: u64) -> Result<NetParams, TrainError> {
    Ok(net::init_params(net_config, &mut rng::stream(seed, &[TAG_INIT]))?)
}

/// Runs all mini-batches from fresh parameters.
pub fn train(
    cfg: &TrainConfig,
    dict: &DataDictionary,
    net_config: NetConfig,
) -> Result<(NetParams, Vec<TraceRow>), TrainError> {
    let state = TrainState::fresh(initial_params(net_config, cfg.seed)?);
    let out = train_from(cfg, dict, state, |_| ControlFlow::Continue(()))?;
    Ok((out.state.params, out.trace))
}

struct Group {
    batch: MiniBatch,
    pass: NetPass,
    f: PointSet,
    plan: TransportPlan,
}

fn check_setup(cfg: &TrainConfig, dict: &DataDictionary, net_config: &NetConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    net_config.validate()?;
    if dict.len() != cfg.n_eta {
        return Err(TrainError::Config(format!(
            "n_eta = {} but the dictionary holds {} parameter values",
            cfg.n_eta,
            dict.len()
        )));
    }
    if dict.dim() != net_config.d || dict.eta_dim() != net_config.d_eta {
        return Err(TrainError::Config(format!(
            "data has d = {}, d_eta = {}; network expects {} / {}",
            dict.dim(),
            dict.eta_dim(),
            net_config.d,
            net_config.d_eta
        )));
    }
    let need = cfg.n * cfg.n_dict;
    for r in 0..dict.len() {
        if dict.remaining(r) < need {
            return Err(TrainError::PoolExhausted {
                eta: dict.eta(r).to_vec(),
                available: dict.remaining(r),
                needed: need,
            });
        }
    }
    Ok(())
}

/// Runs from `state` until all mini-batches are done or `observer` breaks.
///
/// The returned state is a valid resume point. Resuming at a batch
/// boundary reproduces an uninterrupted run exactly; resuming mid-batch
/// rebuilds that batch's plans by pre-optimization, since plans are not
/// part of the state.
pub fn train_from(
    cfg: &TrainConfig,
    dict: &DataDictionary,
    mut state: TrainState,
    mut observer: impl FnMut(&StepView) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    let net_config = *state.params.config();
    check_setup(cfg, dict, &net_config)?;
    let mut dict = dict.clone();
    // Replay earlier draws so pools hold exactly what they would have.
    for b in 0..state.batch.min(cfg.n_dict) {
        for r in 0..cfg.n_eta {
            draw_minibatch(&mut dict, r, cfg.n, &mut rng::stream(cfg.seed, &[TAG_BATCH, b as u64, r as u64]))?;
        }
    }
    let lp = cfg.lp_round_config();
    let mut trace = Vec::new();
    let mut preopt = Vec::new();
    let mut degraded_rounds = 0;

    while state.batch < cfg.n_dict {
        let b = state.batch;
        let mut groups = (0..cfg.n_eta)
            .map(|r| {
                let mut rng = rng::stream(cfg.seed, &[TAG_BATCH, b as u64, r as u64]);
                let batch = draw_minibatch(&mut dict, r, cfg.n, &mut rng)?;
                let mut pass = NetPass::new(net_config, &batch.x, &batch.eta)?;
                let f = pass.forward(&state.params)?;
                Ok(Group {
                    plan: TransportPlan::uniform(cfg.n),
                    batch,
                    pass,
                    f,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        if b > 0 || state.step > 0 {
            let reports = groups
                .par_iter_mut()
                .enumerate()
                .map(|(r, g)| {
                    let mut rng = rng::stream(cfg.seed, &[TAG_PREOPT, b as u64, r as u64, state.step as u64]);
                    pre_optimize_plan(&mut g.plan, &g.f, &g.batch.y, &lp, cfg.tol, cfg.preopt_cap, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            preopt.extend(reports.into_iter().enumerate().map(|(r, rep)| (b, r, rep)));
        }

        while state.step < cfg.steps_per_batch {
            let global = state.global_step(cfg);
            let parts = groups
                .par_iter_mut()
                .map(|g| {
                    let (p, og) = transport::transport_loss_grad(&g.plan, &g.f, &g.batch.y)?;
                    Ok((p, g.pass.backward(&og)?))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut total = 0.0;
            let mut grads = NetParams::zeros(net_config);
            for (p, g) in &parts {
                total += p;
                grads.accumulate(g);
            }
            adam_step(&mut state.adam, &mut state.params, &grads, &cfg.adam(global));
            if !state.params.is_finite() {
                return Err(TrainError::Net(NetError::BadParameter(format!(
                    "non-finite parameters after step {global}"
                ))));
            }

            let params = &state.params;
            let degraded = groups
                .par_iter_mut()
                .enumerate()
                .map(|(r, g)| {
                    g.f = g.pass.forward(params)?;
                    let mut rng = rng::stream(cfg.seed, &[TAG_LP, global as u64, r as u64]);
                    let mut degraded = 0;
                    for _ in 0..cfg.n_lp {
                        degraded += lp_round(&mut g.plan, &g.f, &g.batch.y, &lp, &mut rng)?.degraded as usize;
                    }
                    Ok(degraded)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            degraded_rounds += degraded.iter().sum::<usize>();

            let row = TraceRow {
                step: global,
                batch: b,
                loss: (total.max(0.0) / (cfg.n_eta * cfg.n) as f64).sqrt(),
                plan_norms: groups.iter().map(|g| normalized_frobenius(&g.plan)).collect(),
            };
            state.step += 1;
            if state.step == cfg.steps_per_batch {
                state.step = 0;
                state.batch += 1;
            }
            let view = StepView {
                row: &row,
                state: &state,
                plans: groups.iter().map(|g| &g.plan).collect(),
            };
            let flow = observer(&view);
            trace.push(row);
            if flow.is_break() {
                return Ok(TrainOutcome {
                    state,
                    trace,
                    preopt,
                    degraded_rounds,
                });
            }
            if state.step == 0 {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        trace,
        preopt,
        degraded_rounds,
    })
}

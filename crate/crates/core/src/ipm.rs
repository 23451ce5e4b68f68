//! Genetic interacting particle method for the principal eigenvalue of the
//! time-periodic KPP operator on the `2π`-torus.
//!
//! Each generation runs `m = T/dt` substeps. A substep moves every particle
//! by one Euler–Maruyama step of `dX = (2αe + v) ds + √(2κ) dW`, weighs the
//! moved particles by the fitness `exp(c·dt)` with `c = κα² + α v·e + 1`,
//! records the log of the mean fitness and resamples multinomially. Both
//! the drift and the fitness use the reversed time `T − i·dt`.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::PointSet;
use crate::rng;

const TAG_INIT: u64 = 0x1417;
const TAG_DYNAMICS: u64 = 0xD11A;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IpmError {
    #[error("{flow} flow lives in {expected} dimensions, got {got}")]
    FlowDim {
        flow: FlowKind,
        expected: usize,
        got: usize,
    },
    #[error("point has dimension {got}, expected {expected}")]
    PointDim { expected: usize, got: usize },
    #[error("direction e must be a unit vector (|e| = {0})")]
    NotUnit(f64),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("resampling weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("front speed needs at least one (alpha, lambda) pair")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Zero,
    Cellular2d,
    Kolmogorov3d,
}

impl FlowKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Zero => "zero",
            FlowKind::Cellular2d => "cellular2d",
            FlowKind::Kolmogorov3d => "kolmogorov3d",
        }
    }

    /// The dimension the flow is defined in, if fixed.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            FlowKind::Zero => None,
            FlowKind::Cellular2d => Some(2),
            FlowKind::Kolmogorov3d => Some(3),
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FlowKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(FlowKind::Zero),
            "cellular2d" => Ok(FlowKind::Cellular2d),
            "kolmogorov3d" => Ok(FlowKind::Kolmogorov3d),
            other => Err(format!("unknown flow `{other}` (zero, cellular2d, kolmogorov3d)")),
        }
    }
}

/// A velocity field together with its spatial dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub d: usize,
}

impl FlowSpec {
    pub fn new(kind: FlowKind, d: usize) -> Result<Self, IpmError> {
        let spec = Self { kind, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), IpmError> {
        match self.kind.fixed_dim() {
            Some(expected) if expected != self.d => Err(IpmError::FlowDim {
                flow: self.kind,
                expected,
                got: self.d,
            }),
            _ if self.d == 0 => Err(IpmError::Param("dimension must be at least 1".into())),
            _ => Ok(()),
        }
    }

    fn velocity_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.kind {
            FlowKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            FlowKind::Cellular2d => {
                out[0] = -x[0].sin() * x[1].cos();
                out[1] = x[0].cos() * x[1].sin();
            }
            FlowKind::Kolmogorov3d => {
                let s = (2.0 * PI * t).sin();
                out[0] = (x[2] + s).sin();
                out[1] = (x[0] + s).sin();
                out[2] = (x[1] + s).sin();
            }
        }
    }

    /// `v·e` without allocating.
    fn velocity_dot(&self, t: f64, x: &[f64], e: &[f64]) -> f64 {
        match self.kind {
            FlowKind::Zero => 0.0,
            FlowKind::Cellular2d => -x[0].sin() * x[1].cos() * e[0] + x[0].cos() * x[1].sin() * e[1],
            FlowKind::Kolmogorov3d => {
                let s = (2.0 * PI * t).sin();
                (x[2] + s).sin() * e[0] + (x[0] + s).sin() * e[1] + (x[1] + s).sin() * e[2]
            }
        }
    }
}

/// The velocity field at time `t` and point `x`.
pub fn velocity(flow: &FlowSpec, t: f64, x: &[f64]) -> Result<Vec<f64>, IpmError> {
    flow.validate()?;
    if x.len() != flow.d {
        return Err(IpmError::PointDim {
            expected: flow.d,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; flow.d];
    flow.velocity_into(t, x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialParams {
    pub kappa: f64,
    pub alpha: f64,
    pub e: Vec<f64>,
}

impl PotentialParams {
    /// Tilt `alpha` along the first coordinate axis.
    pub fn along_first_axis(kappa: f64, alpha: f64, d: usize) -> Self {
        let mut e = vec![0.0; d];
        if d > 0 {
            e[0] = 1.0;
        }
        Self { kappa, alpha, e }
    }

    /// `κ = 0` is accepted and gives deterministic drift-only motion.
    pub fn validate(&self, d: usize) -> Result<(), IpmError> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(IpmError::Param(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(IpmError::Param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.e.len() != d {
            return Err(IpmError::PointDim {
                expected: d,
                got: self.e.len(),
            });
        }
        let norm = self.e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(IpmError::NotUnit(norm));
        }
        Ok(())
    }
}

/// `κα² + α v·e + 1`.
pub fn potential(flow: &FlowSpec, pot: &PotentialParams, t: f64, x: &[f64]) -> Result<f64, IpmError> {
    flow.validate()?;
    pot.validate(flow.d)?;
    if x.len() != flow.d {
        return Err(IpmError::PointDim {
            expected: flow.d,
            got: x.len(),
        });
    }
    Ok(potential_unchecked(flow, pot, t, x))
}

fn potential_unchecked(flow: &FlowSpec, pot: &PotentialParams, t: f64, x: &[f64]) -> f64 {
    pot.kappa * pot.alpha * pot.alpha + pot.alpha * flow.velocity_dot(t, x, &pot.e) + 1.0
}

/// Maps a coordinate into `[0, 2π)`.
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn check_positions(flow: &FlowSpec, positions: &PointSet) -> Result<(), IpmError> {
    if positions.dim() != flow.d {
        return Err(IpmError::PointDim {
            expected: flow.d,
            got: positions.dim(),
        });
    }
    Ok(())
}

/// One Euler–Maruyama step at time `t_eval`, in place, followed by wrapping.
pub fn em_step<R: Rng + ?Sized>(
    positions: &mut PointSet,
    flow: &FlowSpec,
    pot: &PotentialParams,
    t_eval: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(), IpmError> {
    flow.validate()?;
    pot.validate(flow.d)?;
    check_positions(flow, positions)?;
    if !(dt > 0.0) {
        return Err(IpmError::Param(format!("dt must be positive, got {dt}")));
    }
    let noise = (2.0 * pot.kappa * dt).sqrt();
    let mut v = vec![0.0; flow.d];
    let tilt: Vec<f64> = pot.e.iter().map(|e| 2.0 * pot.alpha * e).collect();
    for x in positions.data_mut().chunks_exact_mut(flow.d) {
        flow.velocity_into(t_eval, x, &mut v);
        for k in 0..x.len() {
            let xi: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            x[k] = wrap(x[k] + (tilt[k] + v[k]) * dt + noise * xi);
        }
    }
    Ok(())
}

/// Normalized resampling weights and `(1/dt)·ln(mean fitness)`, computed
/// with the largest exponent factored out.
pub fn fitness_weights(
    positions: &PointSet,
    flow: &FlowSpec,
    pot: &PotentialParams,
    t_eval: f64,
    dt: f64,
) -> Result<(Vec<f64>, f64), IpmError> {
    flow.validate()?;
    pot.validate(flow.d)?;
    check_positions(flow, positions)?;
    if !(dt > 0.0) {
        return Err(IpmError::Param(format!("dt must be positive, got {dt}")));
    }
    if positions.is_empty() {
        return Err(IpmError::Param("empty ensemble".into()));
    }
    let c: Vec<f64> = positions.rows().map(|x| potential_unchecked(flow, pot, t_eval, x)).collect();
    let cmax = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = c.iter().map(|ci| ((ci - cmax) * dt).exp()).collect();
    let sum: f64 = w.iter().sum();
    let log_mean = cmax + (sum / w.len() as f64).ln() / dt;
    w.iter_mut().for_each(|v| *v /= sum);
    Ok((w, log_mean))
}

/// Multinomial resampling by inverting the cumulative weights at sorted
/// uniform variates.
pub fn resample<R: Rng + ?Sized>(
    positions: &PointSet,
    weights: &[f64],
    rng: &mut R,
) -> Result<PointSet, IpmError> {
    let n = positions.len();
    if weights.len() != n {
        return Err(IpmError::Param(format!("{} weights for {n} particles", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(IpmError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(IpmError::BadWeights);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
    let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * total).collect();
    u.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(positions.data().len());
    let mut j = 0;
    let mut cum = weights[0];
    for target in u {
        while cum <= target && j < last_positive {
            j += 1;
            cum += weights[j];
        }
        out.extend_from_slice(positions.row(j));
    }
    Ok(PointSet::new(positions.dim(), out).expect("rows of the input dimension"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpmConfig {
    pub n0: usize,
    pub generations: usize,
    pub dt: f64,
    /// Life span `T` of one generation.
    pub t_final: f64,
    pub flow: FlowSpec,
    pub pot: PotentialParams,
    pub seed: u64,
}

impl IpmConfig {
    /// Substeps per generation, `T/dt`.
    pub fn substeps(&self) -> Result<usize, IpmError> {
        if !(self.dt > 0.0 && self.t_final > 0.0) {
            return Err(IpmError::Param("dt and T must be positive".into()));
        }
        let m = (self.t_final / self.dt).round();
        if m < 1.0 || (m * self.dt - self.t_final).abs() > 1e-9 * self.t_final {
            return Err(IpmError::Param(format!(
                "T/dt = {} is not a positive integer",
                self.t_final / self.dt
            )));
        }
        Ok(m as usize)
    }

    pub fn validate(&self) -> Result<usize, IpmError> {
        self.flow.validate()?;
        self.pot.validate(self.flow.d)?;
        if self.n0 == 0 {
            return Err(IpmError::Param("n0 must be at least 1".into()));
        }
        if self.generations == 0 {
            return Err(IpmError::Param("generations must be at least 1".into()));
        }
        self.substeps()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmResult {
    /// `E_{g,i}` for every generation and substep.
    pub e_step: Vec<Vec<f64>>,
    /// Per-generation means of `E_{g,i}`.
    pub e_gen: Vec<f64>,
    /// Running mean of `e_gen`; the last entry is the eigenvalue estimate.
    pub lambda_trace: Vec<f64>,
    pub final_positions: PointSet,
}

impl IpmResult {
    pub fn lambda(&self) -> f64 {
        *self.lambda_trace.last().expect("at least one generation")
    }
}

/// Uniform samples on `[0, 2π)^d` from the initial-position stream of `seed`.
pub fn uniform_positions(n: usize, d: usize, seed: u64) -> PointSet {
    let mut rng = rng::stream(seed, &[TAG_INIT]);
    PointSet::new(d, (0..n * d).map(|_| wrap(rng.random::<f64>() * TAU)).collect()).expect("d > 0")
}

/// Runs the particle method. Without `init` particles start uniform on the
/// torus; with it they start at the given (wrapped) positions. Initial
/// positions and dynamics draw from separate streams, so warm and cold
/// runs with the same seed share their dynamics noise.
pub fn run_ipm(config: &IpmConfig, init: Option<&PointSet>) -> Result<IpmResult, IpmError> {
    run_ipm_with(config, init, |_, _| {})
}

/// As [`run_ipm`], calling `on_generation(g, λ_g)` after each generation.
pub fn run_ipm_with(
    config: &IpmConfig,
    init: Option<&PointSet>,
    mut on_generation: impl FnMut(usize, f64),
) -> Result<IpmResult, IpmError> {
    let m = config.validate()?;
    let d = config.flow.d;
    let mut positions = match init {
        Some(p) => {
            check_positions(&config.flow, p)?;
            if p.len() != config.n0 {
                return Err(IpmError::Param(format!(
                    "warm start has {} particles, config expects {}",
                    p.len(),
                    config.n0
                )));
            }
            let mut p = p.clone();
            p.data_mut().iter_mut().for_each(|v| *v = wrap(*v));
            p
        }
        None => uniform_positions(config.n0, d, config.seed),
    };
    let mut rng = rng::stream(config.seed, &[TAG_DYNAMICS]);
    let mut e_step = Vec::with_capacity(config.generations);
    let mut e_gen = Vec::with_capacity(config.generations);
    let mut lambda_trace = Vec::with_capacity(config.generations);
    let mut running = 0.0;
    for g in 0..config.generations {
        let mut row = Vec::with_capacity(m);
        for i in 0..m {
            let t_eval = config.t_final - i as f64 * config.dt;
            em_step(&mut positions, &config.flow, &config.pot, t_eval, config.dt, &mut rng)?;
            let (w, log_mean) = fitness_weights(&positions, &config.flow, &config.pot, t_eval, config.dt)?;
            row.push(log_mean);
            positions = resample(&positions, &w, &mut rng)?;
        }
        let mean = row.iter().sum::<f64>() / m as f64;
        running += mean;
        e_gen.push(mean);
        lambda_trace.push(running / (g + 1) as f64);
        e_step.push(row);
        on_generation(g, running / (g + 1) as f64);
    }
    Ok(IpmResult {
        e_step,
        e_gen,
        lambda_trace,
        final_positions: positions,
    })
}

/// `min λ(α)/α` over the supplied grid.
pub fn front_speed(pairs: &[(f64, f64)]) -> Result<f64, IpmError> {
    if pairs.is_empty() {
        return Err(IpmError::EmptyGrid);
    }
    let mut best = f64::INFINITY;
    for &(alpha, lambda) in pairs {
        if !(alpha > 0.0) || !lambda.is_finite() {
            return Err(IpmError::Param(format!("need alpha > 0 and finite lambda, got ({alpha}, {lambda})")));
        }
        best = best.min(lambda / alpha);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cellular() -> FlowSpec {
        FlowSpec::new(FlowKind::Cellular2d, 2).unwrap()
    }

    fn zero(d: usize) -> FlowSpec {
        FlowSpec::new(FlowKind::Zero, d).unwrap()
    }

    #[test]
    fn velocity_examples() {
        assert_eq!(velocity(&cellular(), 0.3, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let v = velocity(&cellular(), 0.0, &[PI / 2.0, 0.0]).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        let k = FlowSpec::new(FlowKind::Kolmogorov3d, 3).unwrap();
        assert_eq!(velocity(&k, 0.0, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(velocity(&cellular(), 0.0, &[0.0; 3]).is_err());
        assert!(FlowSpec::new(FlowKind::Cellular2d, 3).is_err());
    }

    #[test]
    fn kolmogorov_is_time_and_space_periodic() {
        let k = FlowSpec::new(FlowKind::Kolmogorov3d, 3).unwrap();
        let x = [0.3, 1.7, -2.2];
        let a = velocity(&k, 0.37, &x).unwrap();
        let b = velocity(&k, 1.37, &[x[0] + TAU, x[1], x[2] - TAU]).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_examples() {
        let p0 = PotentialParams::along_first_axis(0.7, 0.0, 2);
        assert_eq!(potential(&cellular(), &p0, 0.1, &[0.4, 1.1]).unwrap(), 1.0);
        let p = PotentialParams::along_first_axis(0.25, 1.0, 2);
        assert_eq!(potential(&zero(2), &p, 0.0, &[0.4, 1.1]).unwrap(), 1.25);
        let c = potential(&cellular(), &p, 0.9, &[PI / 2.0, 0.0]).unwrap();
        assert!((c - 0.25).abs() < 1e-15);
        let bad = PotentialParams {
            kappa: 0.1,
            alpha: 1.0,
            e: vec![1.0, 1.0],
        };
        assert!(matches!(bad.validate(2), Err(IpmError::NotUnit(_))));
    }

    #[test]
    fn wrap_stays_in_fundamental_domain() {
        assert_eq!(wrap(-1e-18), 0.0);
        assert_eq!(wrap(TAU), 0.0);
        assert!((wrap(-1.0) - (TAU - 1.0)).abs() < 1e-15);
        assert!(wrap(7.0 * TAU + 0.5) < TAU);
    }

    #[test]
    fn deterministic_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = PointSet::new(2, vec![0.5, 1.0, 6.0, 3.0]).unwrap();
        let mut x = start.clone();
        let p = PotentialParams::along_first_axis(0.0, 1.0, 2);
        em_step(&mut x, &zero(2), &p, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(x.row(0), &[1.5, 1.0]);
        assert!((x.row(1)[0] - (7.0 - TAU)).abs() < 1e-15);
        let still = PotentialParams::along_first_axis(0.0, 0.0, 2);
        let mut y = start.clone();
        em_step(&mut y, &zero(2), &still, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(y, start);
    }

    #[test]
    fn step_moments_match_drift_and_diffusion() {
        let n = 100_000;
        let dt = 2f64.powi(-8);
        let kappa = 0.25;
        let p = PotentialParams::along_first_axis(kappa, 1.0, 2);
        let mut x = PointSet::new(2, [3.0, 3.0].repeat(n)).unwrap();
        em_step(&mut x, &zero(2), &p, 1.0, dt, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let var_expect = 2.0 * kappa * dt;
        for (k, drift) in [(0, 2.0 * dt), (1, 0.0)] {
            let col = x.column(k);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / var_expect - 1.0).abs() < 0.05, "variance {var}");
            // Five standard errors of the mean.
            assert!((mean - 3.0 - drift).abs() < 5.0 * (var_expect / n as f64).sqrt());
        }
    }

    #[test]
    fn fitness_examples() {
        let pts = PointSet::new(2, vec![0.1, 0.2, 1.0, 2.0, 4.0, 5.0]).unwrap();
        let p = PotentialParams::along_first_axis(0.25, 1.0, 2);
        let (w, lm) = fitness_weights(&pts, &zero(2), &p, 1.0, 2f64.powi(-8)).unwrap();
        assert_eq!(lm, 1.25);
        assert!(w.iter().all(|&v| v == 1.0 / 3.0));
        let p0 = PotentialParams::along_first_axis(0.25, 0.0, 2);
        let (_, lm) = fitness_weights(&pts, &cellular(), &p0, 1.0, 0.1).unwrap();
        assert_eq!(lm, 1.0);
    }

    #[test]
    fn fitness_ratio_two_gives_one_third_two_thirds() {
        // Cellular flow, α=1, κ=0, e=(1,0): c = 1 − sin x1 cos x2.
        // At (0,0) c=1; at (−π/2, 0) c=2. With dt = ln 2 the fitness
        // ratio is exactly e^{ln 2} = 2.
        let dt = 2f64.ln();
        let pts = PointSet::new(2, vec![0.0, 0.0, -PI / 2.0, 0.0]).unwrap();
        let p = PotentialParams::along_first_axis(0.0, 1.0, 2);
        let (w, lm) = fitness_weights(&pts, &cellular(), &p, 0.0, dt).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
        let expect = (1.5f64 * 2.0).ln() / dt;
        assert!((lm - expect).abs() < 1e-13);
    }

    #[test]
    fn fitness_survives_huge_exponents() {
        let pts = PointSet::new(1, vec![0.0, 1.0]).unwrap();
        let p = PotentialParams::along_first_axis(1e6, 1e3, 1);
        let (w, lm) = fitness_weights(&pts, &zero(1), &p, 0.0, 10.0).unwrap();
        assert!(lm.is_finite() && w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn resample_point_mass() {
        let pts = PointSet::new(1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resample(&pts, &[0.0, 0.0, 1.0, 0.0], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.data(), &[2.0; 4]);
        assert!(resample(&pts, &[0.0; 4], &mut ChaCha8Rng::seed_from_u64(3)).is_err());
        let a = resample(&pts, &[0.1, 0.2, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = resample(&pts, &[0.1, 0.2, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    /// Chi-square survival function.
    fn chi2_sf(stat: f64, dof: usize) -> f64 {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
    }

    #[test]
    fn uniform_resampling_counts_are_multinomial() {
        let n = 50;
        let pts = PointSet::new(1, (0..n).map(f64::from).collect()).unwrap();
        let w = vec![1.0 / n as f64; n as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = 200;
        let mut counts = vec![0usize; n as usize];
        for _ in 0..trials {
            for v in resample(&pts, &w, &mut rng).unwrap().data() {
                counts[*v as usize] += 1;
            }
        }
        let expect = trials as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2_sf(stat, n as usize - 1) > 1e-3, "chi2 {stat}");
    }

    fn config(flow: FlowSpec, kappa: f64, alpha: f64, n0: usize, g: usize, dt: f64) -> IpmConfig {
        IpmConfig {
            n0,
            generations: g,
            dt,
            t_final: 1.0,
            pot: PotentialParams::along_first_axis(kappa, alpha, flow.d),
            flow,
            seed: 11,
        }
    }

    #[test]
    fn constant_potential_is_exact() {
        let cfg = config(zero(2), 0.25, 1.0, 500, 3, 2f64.powi(-5));
        let res = run_ipm(&cfg, None).unwrap();
        assert!(res.e_step.iter().flatten().all(|&e| (e - 1.25).abs() <= 1e-12));
        assert!((res.lambda() - 1.25).abs() <= 1e-12);
        assert_eq!(res.e_step.len(), 3);
        assert_eq!(res.e_step[0].len(), 32);
        assert_eq!(res.final_positions.len(), 500);
    }

    #[test]
    fn trace_is_running_mean() {
        let cfg = config(cellular(), 0.25, 1.0, 300, 5, 2f64.powi(-4));
        let res = run_ipm(&cfg, None).unwrap();
        for g in 0..5 {
            let mean = res.e_gen[..=g].iter().sum::<f64>() / (g + 1) as f64;
            assert!((res.lambda_trace[g] - mean).abs() < 1e-12);
        }
        assert!(res.final_positions.data().iter().all(|&v| (0.0..TAU).contains(&v)));
    }

    #[test]
    fn seed_determinism() {
        let cfg = config(cellular(), 0.125, 1.0, 200, 2, 2f64.powi(-4));
        assert_eq!(run_ipm(&cfg, None).unwrap(), run_ipm(&cfg, None).unwrap());
        let other = IpmConfig { seed: 12, ..cfg.clone() };
        assert_ne!(run_ipm(&cfg, None).unwrap().final_positions, run_ipm(&other, None).unwrap().final_positions);
    }

    #[test]
    fn warm_start_shares_dynamics_noise() {
        // From identical starting points the warm run must reproduce the
        // cold run exactly.
        let cfg = config(cellular(), 0.125, 1.0, 200, 2, 2f64.powi(-4));
        let init = uniform_positions(200, 2, cfg.seed);
        assert_eq!(run_ipm(&cfg, Some(&init)).unwrap(), run_ipm(&cfg, None).unwrap());
        assert!(run_ipm(&cfg, Some(&PointSet::zeros(10, 2))).is_err());
    }

    #[test]
    fn zero_tilt_keeps_uniform_distribution() {
        let n0 = 4000;
        let cfg = IpmConfig {
            t_final: 0.25,
            ..config(zero(2), 1.0, 0.0, n0, 1, 2f64.powi(-4))
        };
        let res = run_ipm(&cfg, None).unwrap();
        let expect = n0 as f64 / 16.0;
        for k in 0..2 {
            let mut bins = [0usize; 16];
            for v in res.final_positions.column(k) {
                bins[((v / TAU * 16.0) as usize).min(15)] += 1;
            }
            for b in bins {
                assert!((b as f64 - expect).abs() <= 4.0 * expect.sqrt(), "bin {b}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(zero(1), 0.25, 1.0, 10, 1, 0.3);
        assert!(cfg.validate().is_err());
        cfg.dt = 0.25;
        assert_eq!(cfg.validate().unwrap(), 4);
        cfg.generations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn front_speed_examples() {
        let kappa = 0.25;
        let pairs: Vec<(f64, f64)> = [0.5, 1.0, 2.0].iter().map(|&a| (a, kappa * a * a + 1.0)).collect();
        assert_eq!(front_speed(&pairs).unwrap(), 1.0);
        assert_eq!(front_speed(&[(1.0, 3.5)]).unwrap(), 3.5);
        assert!(front_speed(&[]).is_err());
        assert!(front_speed(&[(0.0, 1.0)]).is_err());
        // Refining the grid approaches 2√κ from above.
        let fine: Vec<(f64, f64)> = (1..=400).map(|i| i as f64 * 0.01).map(|a| (a, kappa * a * a + 1.0)).collect();
        let c = front_speed(&fine).unwrap();
        assert!(c >= 2.0 * kappa.sqrt() - 1e-12 && c - 2.0 * kappa.sqrt() < 1e-4);
    }
}

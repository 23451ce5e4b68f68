//! Run configuration: defaults, then the seed environment variable, then a
//! JSON file, then `section.key value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{io_err, IoError};
use crate::ipm::{FlowKind, FlowSpec, IpmConfig, PotentialParams};
use crate::net::NetConfig;
use crate::trainer::{SourceBox, TrainConfig};

/// Environment variable that replaces the default of every `seed` key.
pub const SEED_ENV: &str = "DEEPPARTICLE_SEED";

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Network size; input and parameter dimensions come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSizes {
    pub width: usize,
    pub depth: usize,
    pub parnet_width: usize,
    pub conditioned_layers: usize,
}

impl Default for NetSizes {
    fn default() -> Self {
        let n = NetConfig::new(1, 1);
        Self {
            width: n.width,
            depth: n.depth,
            parnet_width: n.parnet_width,
            conditioned_layers: n.conditioned_layers,
        }
    }
}

impl NetSizes {
    pub fn config(&self, d: usize, d_eta: usize) -> NetConfig {
        NetConfig {
            d,
            d_eta,
            width: self.width,
            depth: self.depth,
            parnet_width: self.parnet_width,
            conditioned_layers: self.conditioned_layers,
        }
    }
}

/// `κ_i = 2^(−p0 − dp·(i−1))` for `i = 1..=count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaSweep {
    pub p0: f64,
    pub dp: f64,
    pub count: usize,
}

impl Default for KappaSweep {
    fn default() -> Self {
        Self {
            p0: 2.0,
            dp: 0.25,
            count: 8,
        }
    }
}

impl KappaSweep {
    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| (-self.p0 - self.dp * i as f64).exp2()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpmSection {
    pub flow: FlowKind,
    pub d: usize,
    pub n0: usize,
    pub generations: usize,
    pub dt: f64,
    pub t_final: f64,
    pub alpha: f64,
    /// Unit direction of the front; the first axis when absent.
    pub e: Option<Vec<f64>>,
    /// Explicit κ values; when empty the sweep is used.
    pub kappas: Vec<f64>,
    pub sweep: KappaSweep,
    pub seed: u64,
}

impl Default for IpmSection {
    fn default() -> Self {
        Self {
            flow: FlowKind::Cellular2d,
            d: 2,
            n0: 40_000,
            generations: 2048,
            dt: (-8f64).exp2(),
            t_final: 1.0,
            alpha: 1.0,
            e: None,
            kappas: Vec::new(),
            sweep: KappaSweep::default(),
            seed: 0,
        }
    }
}

impl IpmSection {
    pub fn kappa_values(&self) -> Vec<f64> {
        if self.kappas.is_empty() {
            self.sweep.values()
        } else {
            self.kappas.clone()
        }
    }

    pub fn ipm_config(&self, kappa: f64, generations: usize, seed: u64) -> IpmConfig {
        let pot = match &self.e {
            Some(e) => PotentialParams {
                kappa,
                alpha: self.alpha,
                e: e.clone(),
            },
            None => PotentialParams::along_first_axis(kappa, self.alpha, self.d),
        };
        IpmConfig {
            n0: self.n0,
            generations,
            dt: self.dt,
            t_final: self.t_final,
            flow: FlowSpec {
                kind: self.flow,
                d: self.d,
            },
            pot,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub eta: Vec<f64>,
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            eta: vec![0.0625],
            count: 40_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Largest subsample used for the plan-based W₂ estimate.
    pub max_points: usize,
    pub lp_m: usize,
    pub lp_round_cap: usize,
    /// Stop once the plan norm moves less than this over one window of
    /// `n` rounds.
    pub norm_tol: f64,
    pub nbins: usize,
    pub axes: [usize; 2],
    /// Histogram range per axis; the torus for torus data, otherwise the
    /// data range.
    pub range: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_points: 2000,
            lp_m: 25,
            lp_round_cap: 100_000,
            norm_tol: 1e-4,
            nbins: 64,
            axes: [0, 1],
            range: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartSection {
    pub kappa: f64,
    /// Network parameter value; `[kappa]` when absent.
    pub eta: Option<Vec<f64>>,
    pub generations: usize,
    /// Relative half-width of the band around each trace's final value.
    pub band: f64,
    pub seed: u64,
}

impl Default for WarmstartSection {
    fn default() -> Self {
        Self {
            kappa: 0.0625,
            eta: None,
            generations: 256,
            band: 0.05,
            seed: 0,
        }
    }
}

impl WarmstartSection {
    pub fn eta(&self) -> Vec<f64> {
        self.eta.clone().unwrap_or_else(|| vec![self.kappa])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub net: NetSizes,
    pub train: TrainConfig,
    /// Box the network's source samples are drawn from.
    pub source: SourceBox,
    /// Write a checkpoint every this many steps; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Stop training (with a checkpoint) once this global step is reached.
    pub stop_after: Option<usize>,
    pub ipm: IpmSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub warmstart: WarmstartSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            net: NetSizes::default(),
            train: TrainConfig::default(),
            source: SourceBox::torus(),
            checkpoint_every: 0,
            stop_after: None,
            ipm: IpmSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            warmstart: WarmstartSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> IoError {
    IoError::Config(msg.into())
}

fn set_seeds(v: &mut Value, seed: u64) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if k == "seed" {
                    *child = Value::from(seed);
                } else {
                    set_seeds(child, seed);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|c| set_seeds(c, seed)),
        _ => {}
    }
}

/// Overlays `top` onto `base`; nested objects merge, anything else replaces.
fn merge(base: &mut Value, top: Value, path: &str) -> Result<(), IoError> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(config_err(format!("unknown key {sub:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parses an override value against the type of the value it replaces.
fn parse_override(current: &Value, raw: &str) -> Value {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let wants_list = current.is_array() || (current.is_null() && raw.contains(','));
    match parsed {
        Value::Array(_) => parsed,
        Value::String(s) if wants_list && s.contains(',') => Value::Array(
            s.split(',')
                .map(|t| serde_json::from_str(t.trim()).unwrap_or_else(|_| Value::String(t.trim().to_string())))
                .collect(),
        ),
        other if current.is_array() => Value::Array(vec![other]),
        other => other,
    }
}

impl RunConfig {
    /// Layers defaults, `DEEPPARTICLE_SEED` (passed in as `env_seed`), the
    /// optional file and the `(key, value)` overrides, in that order.
    pub fn resolve(
        env_seed: Option<&str>,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, IoError> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("serializable");
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            set_seeds(&mut v, seed);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let doc: Value = serde_json::from_str(&text).map_err(|source| IoError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            if let Some(ver) = doc.get("version") {
                if ver.as_u64() != Some(RUN_CONFIG_VERSION as u64) {
                    return Err(IoError::Version {
                        path: path.to_path_buf(),
                        found: ver.to_string(),
                        expected: RUN_CONFIG_VERSION.to_string(),
                    });
                }
            }
            if !doc.is_object() {
                return Err(config_err(format!("{} is not a JSON object", path.display())));
            }
            merge(&mut v, doc, "")?;
        }
        for (key, raw) in overrides {
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| config_err(format!("unknown key {key:?}")))?;
            }
            *slot = parse_override(slot, raw);
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| config_err(format!("invalid configuration: {e}")))?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(config_err(format!("unsupported config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    /// Parses `--section.key value` (or `--section.key=value`) pairs.
    pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, IoError> {
        let mut out = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let key = a
                .strip_prefix("--")
                .ok_or_else(|| config_err(format!("expected --key, found {a:?}")))?;
            match key.split_once('=') {
                Some((k, v)) => out.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| config_err(format!("--{key} needs a value")))?;
                    out.push((key.to_string(), v.clone()));
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_and_sweep() {
        let cfg = RunConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let ks = cfg.ipm.kappa_values();
        assert_eq!(ks.len(), 8);
        assert_eq!(ks[0], 0.25);
        assert!((ks[7] - (-3.75f64).exp2()).abs() < 1e-15);
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.5, "seed": 9}, "ipm": {"flow": "zero"}}"#).unwrap();
        let cfg = RunConfig::resolve(Some("42"), Some(&p), &[s("train.lr", "0.25"), s("sample.eta", "0.1")]).unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.ipm.seed, 42);
        assert_eq!(cfg.sample.seed, 42);
        assert_eq!(cfg.ipm.flow, FlowKind::Zero);
        assert_eq!(cfg.sample.eta, vec![0.1]);
    }

    #[test]
    fn list_and_option_overrides() {
        let cfg = RunConfig::resolve(
            None,
            None,
            &[s("ipm.e", "0,1"), s("ipm.kappas", "[0.5,0.25]"), s("stop_after", "10"), s("eval.axes", "1,2")],
        )
        .unwrap();
        assert_eq!(cfg.ipm.e, Some(vec![0.0, 1.0]));
        assert_eq!(cfg.ipm.kappa_values(), vec![0.5, 0.25]);
        assert_eq!(cfg.stop_after, Some(10));
        assert_eq!(cfg.eval.axes, [1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, None, &[s("train.bogus", "1")]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"ipm": {"kapa": 1}}"#).unwrap();
        let err = RunConfig::resolve(None, Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("ipm.kapa"), "{err}");
        std::fs::write(&p, r#"{"version": 2}"#).unwrap();
        assert!(matches!(RunConfig::resolve(None, Some(&p), &[]), Err(IoError::Version { .. })));
        assert!(RunConfig::resolve(Some("x"), None, &[]).is_err());
        assert!(RunConfig::resolve(None, None, &[s("ipm.flow", "vortex")]).is_err());
    }

    #[test]
    fn override_argument_parsing() {
        let args: Vec<String> = ["--train.lr", "0.1", "--seed=3"].iter().map(|a| a.to_string()).collect();
        assert_eq!(
            RunConfig::parse_overrides(&args).unwrap(),
            vec![s("train.lr", "0.1"), s("seed", "3")]
        );
        assert!(RunConfig::parse_overrides(&["--x".to_string()]).is_err());
        assert!(RunConfig::parse_overrides(&["x".to_string()]).is_err());
    }

    #[test]
    fn serialized_config_resolves_to_itself() {
        let mut cfg = RunConfig::default();
        cfg.train.n = 123;
        cfg.ipm.e = Some(vec![0.0, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::resolve(None, Some(&p), &[]).unwrap(), cfg);
    }
}

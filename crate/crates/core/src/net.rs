//! The parameter-conditioned network `f(x; η)`.
//!
//! A stack of sigmoid layers of fixed width receives `[x; η]`. Up to three
//! companion layers run alongside the first three main layers; their weight
//! matrices and bias vectors are produced from `η` by small generator
//! networks ("par-nets"). Skip connections feed `h_{k-2}` into layer `k`
//! from layer 4 on, and a trainable linear bypass adds `B·x + c` to the
//! final linear layer.
//!
//! Forward layout (σ is the logistic sigmoid):
//!
//! ```text
//! h1 = σ(A1·[x;η] + b1)            g1 = σ(W1(η)·pad(x) + c1(η))
//! h2 = σ(A2·(h1+g1) + b2)          g2 = σ(W2(η)·h1 + c2(η))
//! h3 = σ(A3·(h2+g2) + b3)          g3 = σ(W3(η)·h2 + c3(η))
//! h4 = σ(A4·(h3+g3+h2) + b4)
//! hk = σ(Ak·(h(k-1)+h(k-2)) + bk)  for 5 ≤ k < depth
//! f  = A_depth·(h(depth-1)+h(depth-2)) + b_depth + B·x + c
//! ```
//!
//! Each generated tensor is computed once per `η` group, never per sample.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use crate::points::PointSet;

/// Rows per forward chunk; bounds the memory held by one graph evaluation.
const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("physical parameter has dimension {got}, network expects {expected}")]
    EtaDim { expected: usize, got: usize },
    #[error("input points have dimension {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("conditioned layer {k} does not exist (network has {available})")]
    NoSuchLayer { k: usize, available: usize },
    #[error("parameter `{0}` is missing or has the wrong shape")]
    BadParameter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn default_width() -> usize {
    20
}
fn default_depth() -> usize {
    12
}
fn default_parnet_width() -> usize {
    10
}
fn default_conditioned() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub d: usize,
    pub d_eta: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_parnet_width")]
    pub parnet_width: usize,
    #[serde(default = "default_conditioned")]
    pub conditioned_layers: usize,
}

impl NetConfig {
    /// Default architecture: width 20, depth 12, generator width 10, three
    /// conditioned layers.
    pub fn new(d: usize, d_eta: usize) -> Self {
        Self {
            d,
            d_eta,
            width: default_width(),
            depth: default_depth(),
            parnet_width: default_parnet_width(),
            conditioned_layers: default_conditioned(),
        }
    }

    pub fn with_size(mut self, width: usize, depth: usize) -> Self {
        self.width = width;
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: &str| Err(NetError::Config(m.to_string()));
        if self.d == 0 {
            return fail("d must be at least 1");
        }
        if self.d_eta == 0 {
            return fail("d_eta must be at least 1");
        }
        if self.width == 0 {
            return fail("width must be at least 1");
        }
        if self.depth < 4 {
            return fail("depth must be at least 4");
        }
        if self.parnet_width == 0 {
            return fail("parnet_width must be at least 1");
        }
        if self.conditioned_layers > 3 {
            return fail("at most 3 conditioned layers are supported");
        }
        if self.conditioned_layers >= 1 && self.d > self.width {
            return fail("d must not exceed width when the first companion layer is present");
        }
        Ok(())
    }

    /// Every trainable tensor, in a fixed order determined by the config.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, de, w, pw) = (self.d, self.d_eta, self.width, self.parnet_width);
        let mut specs = Vec::new();
        for k in 1..=self.depth {
            let (rows, cols) = match k {
                1 => (w, d + de),
                k if k == self.depth => (d, w),
                _ => (w, w),
            };
            specs.push(ParamSpec::weight(format!("layer{k}.weight"), vec![rows, cols], cols));
            specs.push(ParamSpec::bias(format!("layer{k}.bias"), vec![rows]));
        }
        specs.push(ParamSpec::weight("bypass.weight".into(), vec![d, d], d));
        specs.push(ParamSpec::bias("bypass.bias".into(), vec![d]));
        for k in 1..=self.conditioned_layers {
            for (part, rows) in [("weight", w), ("bias", 1)] {
                let p = format!("cond{k}.{part}");
                specs.push(ParamSpec::weight(format!("{p}.g1.weight"), vec![w, de, pw], de));
                specs.push(ParamSpec::bias(format!("{p}.g1.bias"), vec![w, rows, pw]));
                specs.push(ParamSpec::weight(format!("{p}.g2.weight"), vec![w, pw, pw], pw));
                specs.push(ParamSpec::bias(format!("{p}.g2.bias"), vec![w, rows, pw]));
                specs.push(ParamSpec::weight(format!("{p}.g3.weight"), vec![w, pw, 1], pw));
                specs.push(ParamSpec::bias(format!("{p}.g3.bias"), vec![w, rows, 1]));
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Contraction length the tensor multiplies; sets the init bound.
    pub fan_in: usize,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            kind: ParamKind::Weight,
            fan_in,
        }
    }

    fn bias(name: String, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            kind: ParamKind::Bias,
            fan_in: 0,
        }
    }
}

/// All trainable tensors of a network, aligned with [`NetConfig::param_specs`].
///
/// The same container holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    config: NetConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl NetParams {
    pub fn zeros(config: NetConfig) -> Self {
        let specs = config.param_specs();
        let tensors = specs.iter().map(|s| Tensor::zeros(s.shape.clone())).collect();
        Self {
            config,
            specs,
            tensors,
        }
    }

    /// Assembles parameters from named tensors; every spec must be present
    /// with the right shape.
    pub fn from_named(
        config: NetConfig,
        mut lookup: impl FnMut(&ParamSpec) -> Option<Tensor>,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let specs = config.param_specs();
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            match lookup(spec) {
                Some(t) if t.shape() == spec.shape.as_slice() && t.is_finite() => tensors.push(t),
                _ => return Err(NetError::BadParameter(spec.name.clone())),
            }
        }
        Ok(Self {
            config,
            specs,
            tensors,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &NetParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn bind(&self, bindings: &mut Bindings) {
        for (spec, t) in self.iter() {
            bindings.insert(spec.name.clone(), t.clone());
        }
    }
}

/// Random initialization: weights uniform on `±sqrt(1/fan_in)`, biases zero,
/// bypass weight the identity.
pub fn init_params<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<NetParams, NetError> {
    config.validate()?;
    let mut params = NetParams::zeros(config);
    for (spec, tensor) in params.specs.iter().zip(params.tensors.iter_mut()) {
        if spec.name == "bypass.weight" {
            for i in 0..config.d {
                tensor.data_mut()[i * config.d + i] = 1.0;
            }
        } else if spec.kind == ParamKind::Weight {
            let bound = (1.0 / spec.fan_in as f64).sqrt();
            for v in tensor.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }
    Ok(params)
}

/// Node handles of one generated companion layer.
struct Generated {
    weight: NodeId,
    bias: NodeId,
}

fn add_generator(g: &mut Graph, prefix: &str, tile: NodeId) -> NodeId {
    let mut h = tile;
    for stage in 1..=3 {
        let w = g.parameter(format!("{prefix}.g{stage}.weight"));
        let b = g.parameter(format!("{prefix}.g{stage}.bias"));
        let c = g.batched_contract(h, w);
        let a = g.add(c, b);
        // The last generator stage is linear.
        h = if stage < 3 { g.sigmoid(a) } else { a };
    }
    g.label(h, prefix.to_string());
    h
}

fn add_companion(g: &mut Graph, k: usize, tile_w: NodeId, tile_b: NodeId) -> Generated {
    Generated {
        weight: add_generator(g, &format!("cond{k}.weight"), tile_w),
        bias: add_generator(g, &format!("cond{k}.bias"), tile_b),
    }
}

fn main_layer(g: &mut Graph, k: usize, input: NodeId) -> NodeId {
    let w = g.parameter(format!("layer{k}.weight"));
    let b = g.parameter(format!("layer{k}.bias"));
    let a = g.affine(w, input, Some(b));
    g.label(a, format!("layer{k}"));
    a
}

/// Builds the full network graph. Leaves: `x`, `x_eta`, `x_pad`, `tile_w`,
/// `tile_b` and every parameter name.
fn build_graph(cfg: &NetConfig) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x");
    let x_eta = g.input("x_eta");
    let (x_pad, tile_w, tile_b) = if cfg.conditioned_layers > 0 {
        (Some(g.input("x_pad")), Some(g.input("tile_w")), Some(g.input("tile_b")))
    } else {
        (None, None, None)
    };
    let companions: Vec<Generated> = (1..=cfg.conditioned_layers)
        .map(|k| add_companion(&mut g, k, tile_w.expect("present"), tile_b.expect("present")))
        .collect();
    let companion = |g: &mut Graph, k: usize, input: NodeId| -> Option<NodeId> {
        companions.get(k - 1).map(|c| {
            let a = g.affine(c.weight, input, Some(c.bias));
            g.label(a, format!("layer{k}_2"));
            g.sigmoid(a)
        })
    };

    // h[k] holds the activated output of main layer k (index 0 unused).
    let mut h: Vec<NodeId> = Vec::with_capacity(cfg.depth);
    let a1 = main_layer(&mut g, 1, x_eta);
    h.push(a1); // placeholder for index 0
    h.push(g.sigmoid(a1));
    let g1 = x_pad.and_then(|xp| companion(&mut g, 1, xp));
    let g2 = companion(&mut g, 2, h[1]);

    let mut out_main = None;
    let mut g3 = None;
    for k in 2..=cfg.depth {
        let u = match k {
            2 => g1.map_or(h[1], |c| g.add(h[1], c)),
            3 => g2.map_or(h[2], |c| g.add(h[2], c)),
            4 => {
                let s = g3.map_or(h[3], |c| g.add(h[3], c));
                g.add(s, h[2])
            }
            _ => g.add(h[k - 1], h[k - 2]),
        };
        if k == 3 {
            g3 = companion(&mut g, 3, h[2]);
        }
        let a = main_layer(&mut g, k, u);
        if k < cfg.depth {
            h.push(g.sigmoid(a));
        } else {
            out_main = Some(a);
        }
    }
    let bw = g.parameter("bypass.weight");
    let bb = g.parameter("bypass.bias");
    let bypass = g.affine(bw, x, Some(bb));
    g.label(bypass, "bypass");
    let out = g.add(out_main.expect("depth >= 4"), bypass);
    g.set_output(out);
    g
}

fn tile_eta(eta: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols * eta.len());
    for _ in 0..rows * cols {
        data.extend_from_slice(eta);
    }
    Tensor::new(vec![rows, cols, eta.len()], data).expect("consistent")
}

fn check_inputs(cfg: &NetConfig, x: &PointSet, eta: &[f64]) -> Result<(), NetError> {
    if eta.len() != cfg.d_eta {
        return Err(NetError::EtaDim {
            expected: cfg.d_eta,
            got: eta.len(),
        });
    }
    if x.dim() != cfg.d {
        return Err(NetError::InputDim {
            expected: cfg.d,
            got: x.dim(),
        });
    }
    Ok(())
}

/// A reusable evaluation of the network on one `(X, η)` group.
///
/// Input-side tensors are built once; [`NetPass::forward`] rebinds the
/// parameters and [`NetPass::backward`] reuses the stored forward values.
#[derive(Debug, Clone)]
pub struct NetPass {
    config: NetConfig,
    graph: Graph,
    bindings: Bindings,
    rows: usize,
}

impl NetPass {
    pub fn new(config: NetConfig, x: &PointSet, eta: &[f64]) -> Result<Self, NetError> {
        config.validate()?;
        check_inputs(&config, x, eta)?;
        let (d, w) = (config.d, config.width);
        let n = x.len();
        let mut bindings = Bindings::new();
        bindings.insert("x", Tensor::new(vec![n, d], x.data().to_vec())?);
        let mut x_eta = Vec::with_capacity(n * (d + eta.len()));
        for r in x.rows() {
            x_eta.extend_from_slice(r);
            x_eta.extend_from_slice(eta);
        }
        bindings.insert("x_eta", Tensor::new(vec![n, d + eta.len()], x_eta)?);
        if config.conditioned_layers > 0 {
            let mut pad = vec![0.0; n * w];
            for (i, r) in x.rows().enumerate() {
                pad[i * w..i * w + d].copy_from_slice(r);
            }
            bindings.insert("x_pad", Tensor::new(vec![n, w], pad)?);
            bindings.insert("tile_w", tile_eta(eta, w, w));
            bindings.insert("tile_b", tile_eta(eta, w, 1));
        }
        Ok(Self {
            config,
            graph: build_graph(&config),
            bindings,
            rows: n,
        })
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.graph.set_checked(checked);
    }

    pub fn forward(&mut self, params: &NetParams) -> Result<PointSet, NetError> {
        if params.config != self.config {
            return Err(NetError::Config("parameters belong to a different network".into()));
        }
        params.bind(&mut self.bindings);
        let out = self.graph.forward(&self.bindings)?;
        Ok(PointSet::new(self.config.d, out.data().to_vec()).expect("output is rows×d"))
    }

    /// Gradients of `Σ_i ⟨output_grad_i, f(x_i)⟩` at the parameters of the
    /// most recent forward.
    pub fn backward(&mut self, output_grad: &PointSet) -> Result<NetParams, NetError> {
        if output_grad.dim() != self.config.d || output_grad.len() != self.rows {
            return Err(NetError::InputDim {
                expected: self.config.d,
                got: output_grad.dim(),
            });
        }
        let adj = Tensor::new(vec![self.rows, self.config.d], output_grad.data().to_vec())?;
        let mut grads = self.graph.backward(&adj)?;
        NetParams::from_named(self.config, |spec| grads.remove(&spec.name))
    }
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK_ROWS).max(1)).map(move |c| c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n))
}

fn row_range(x: &PointSet, r: std::ops::Range<usize>) -> PointSet {
    let d = x.dim();
    PointSet::new(d, x.data()[r.start * d..r.end * d].to_vec()).expect("aligned")
}

/// Evaluates `f(X; η)` row by row.
pub fn forward(params: &NetParams, x: &PointSet, eta: &[f64]) -> Result<PointSet, NetError> {
    check_inputs(&params.config, x, eta)?;
    let mut out = Vec::with_capacity(x.data().len());
    for r in chunks(x.len()) {
        let mut pass = NetPass::new(params.config, &row_range(x, r), eta)?;
        out.extend(pass.forward(params)?.into_data());
    }
    Ok(PointSet::new(params.config.d, out).expect("rows×d"))
}

/// Outputs and parameter gradients of `Σ_i ⟨output_grad_i, f(x_i; η)⟩`.
pub fn forward_backward(
    params: &NetParams,
    x: &PointSet,
    eta: &[f64],
    output_grad: &PointSet,
) -> Result<(PointSet, NetParams), NetError> {
    check_inputs(&params.config, x, eta)?;
    if output_grad.len() != x.len() || output_grad.dim() != x.dim() {
        return Err(NetError::InputDim {
            expected: x.dim(),
            got: output_grad.dim(),
        });
    }
    let mut out = Vec::with_capacity(x.data().len());
    let mut total = NetParams::zeros(params.config);
    for r in chunks(x.len()) {
        let mut pass = NetPass::new(params.config, &row_range(x, r.clone()), eta)?;
        out.extend(pass.forward(params)?.into_data());
        total.accumulate(&pass.backward(&row_range(output_grad, r))?);
    }
    Ok((PointSet::new(params.config.d, out).expect("rows×d"), total))
}

/// The generated weight (`width×width`) and bias (`width`) of companion
/// layer `k` (1-based) for the given `η`.
pub fn generate_conditioned_layer(
    params: &NetParams,
    k: usize,
    eta: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), NetError> {
    let cfg = params.config;
    if k == 0 || k > cfg.conditioned_layers {
        return Err(NetError::NoSuchLayer {
            k,
            available: cfg.conditioned_layers,
        });
    }
    if eta.len() != cfg.d_eta {
        return Err(NetError::EtaDim {
            expected: cfg.d_eta,
            got: eta.len(),
        });
    }
    let mut g = Graph::new();
    let tw = g.input("tile_w");
    let tb = g.input("tile_b");
    let gen = add_companion(&mut g, k, tw, tb);
    let mut b = Bindings::new();
    b.insert("tile_w", tile_eta(eta, cfg.width, cfg.width));
    b.insert("tile_b", tile_eta(eta, cfg.width, 1));
    params.bind(&mut b);
    g.forward(&b)?;
    let w = g.value(gen.weight).expect("evaluated").data();
    let weight = w.chunks_exact(cfg.width).map(<[f64]>::to_vec).collect();
    let bias = g.value(gen.bias).expect("evaluated").data().to_vec();
    Ok((weight, bias))
}

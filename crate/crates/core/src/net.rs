//! The cross-scale attention MIL network.
//!
//! For a bag of `n` locations with per-scale features `X_s` (`n×D`):
//!
//! * encoder: `H_s = relu(X_s·A + c)`, one `(A, c)` shared by all scales or
//!   one per scale
//! * scale attention: `logit_s = act(H_s·Vᵀ)·W`, softmax over scales per row
//! * fusion: `Σ_s a_s ⊙ H_s`, the plain mean, or the column concatenation
//! * gated pooling: `e = (tanh(F·V_cᵀ) ⊙ sigmoid(F·U_cᵀ))·w_c`,
//!   `b = softmax(e)` over the bag, `z = bᵀ·F`
//! * classifier: `softmax(z·C + d)` over two classes

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::toydata::Scale;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_ATT_DIM: usize = 32;
/// Probability floor inside the NLL loss.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Cs,
    Mean,
    Concat,
}

impl FusionMode {
    pub fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Self::Cs),
            1 => Some(Self::Mean),
            2 => Some(Self::Concat),
            _ => None,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cs => "cs",
            Self::Mean => "mean",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(Self::Cs),
            "mean" => Ok(Self::Mean),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?} (cs|mean|concat)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            _ => Err(Error::Config(format!("unknown activation {s:?} (relu|tanh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub mode: FusionMode,
    pub activation: Activation,
    pub shared: bool,
    pub in_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    /// Scales fed to the network, in order. One entry gives a single-scale
    /// model.
    pub scales: Vec<Scale>,
    pub bag_size: usize,
}

impl NetConfig {
    pub fn new(in_dim: usize, scales: Vec<Scale>) -> Self {
        Self {
            mode: FusionMode::Cs,
            activation: Activation::Relu,
            shared: true,
            in_dim,
            hidden: DEFAULT_HIDDEN,
            att_dim: DEFAULT_ATT_DIM,
            scales,
            bag_size: crate::bagging::DEFAULT_BAG_SIZE,
        }
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    fn n_encoders(&self) -> usize {
        if self.shared {
            1
        } else {
            self.n_scales()
        }
    }

    /// Width of the fused representation.
    pub fn fused_dim(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.n_scales() * self.hidden,
            _ => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.in_dim == 0 || self.hidden == 0 || self.att_dim == 0 || self.bag_size == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let mut s = self.scales.clone();
        s.sort();
        s.dedup();
        if s.len() != self.scales.len() {
            return Err(Error::Config("scales must be distinct".into()));
        }
        Ok(())
    }

    /// Parameter tensor names and shapes, in the canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, l, m, lf) = (self.in_dim, self.hidden, self.att_dim, self.fused_dim());
        let mut out = Vec::new();
        for j in 0..self.n_encoders() {
            out.push((format!("enc{j}.weight"), vec![d, l]));
            out.push((format!("enc{j}.bias"), vec![l]));
        }
        if self.mode == FusionMode::Cs {
            out.push(("att.v".into(), vec![m, l]));
            out.push(("att.w".into(), vec![m, 1]));
        }
        out.push(("pool.v".into(), vec![m, lf]));
        out.push(("pool.u".into(), vec![m, lf]));
        out.push(("pool.w".into(), vec![m, 1]));
        out.push(("cls.weight".into(), vec![lf, 2]));
        out.push(("cls.bias".into(), vec![2]));
        out
    }

    fn to_tensors(&self) -> (Tensor, Tensor) {
        let act = match self.activation {
            Activation::Relu => 0.0,
            Activation::Tanh => 1.0,
        };
        let cfg = vec![
            self.mode.code() as f64,
            act,
            self.shared as u8 as f64,
            self.in_dim as f64,
            self.hidden as f64,
            self.att_dim as f64,
            self.n_scales() as f64,
            self.bag_size as f64,
        ];
        let scales = self.scales.iter().map(|s| s.index() as f64).collect();
        (Tensor::vector(cfg), Tensor::vector(scales))
    }

    fn from_tensors(cfg: &Tensor, scales: &Tensor) -> Result<Self> {
        let c = cfg.data();
        let bad = |m: &str| Error::Data(format!("checkpoint config: {m}"));
        if c.len() != 8 || c.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(bad("expected 8 nonnegative integer codes"));
        }
        let mode = FusionMode::from_code(c[0]).ok_or_else(|| bad("unknown fusion code"))?;
        let activation = match c[1] as i64 {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => return Err(bad("unknown activation code")),
        };
        let scales = scales
            .data()
            .iter()
            .map(|&v| match v as i64 {
                0 => Ok(Scale::X20),
                1 => Ok(Scale::X10),
                2 => Ok(Scale::X5),
                _ => Err(bad("unknown scale index")),
            })
            .collect::<Result<Vec<_>>>()?;
        if scales.len() != c[6] as usize {
            return Err(bad("scale count disagrees with scale list"));
        }
        let cfg = Self {
            mode,
            activation,
            shared: c[2] != 0.0,
            in_dim: c[3] as usize,
            hidden: c[4] as usize,
            att_dim: c[5] as usize,
            scales,
            bag_size: c[7] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-bag record of the attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// `n × S`, row-major: scale attention of every instance.
    pub scale_attention: Vec<f64>,
    pub n_scales: usize,
    /// Pooling weight of every instance.
    pub instance_weights: Vec<f64>,
    pub logits: [f64; 2],
    /// Class probabilities.
    pub probs: [f64; 2],
}

impl ForwardTrace {
    pub fn attention(&self, i: usize) -> &[f64] {
        &self.scale_attention[i * self.n_scales..(i + 1) * self.n_scales]
    }

    pub fn positive_prob(&self) -> f64 {
        self.probs[1]
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub encoded: Vec<Var>,
    /// `n×S` attention, `None` when the fusion bypasses it.
    pub scale_attention: Option<Var>,
    pub fused: Var,
    /// `1×n` pooling weights.
    pub instance_weights: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsMilParams {
    pub config: NetConfig,
    /// In [`NetConfig::layout`] order.
    pub tensors: Vec<Tensor>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl CsMilParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    Tensor::zeros(shape.clone())
                } else if name.starts_with("enc") || name == "cls.weight" {
                    // stored as in×out
                    glorot(&mut rng, shape, shape[0], shape[1])
                } else {
                    // stored as out×in
                    glorot(&mut rng, shape, shape[1], shape[0])
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let pos = self.config.layout().iter().position(|(n, _)| n == name)?;
        self.tensors.get(pos)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let pos = self.config.layout().iter().position(|(n, _)| n == name)?;
        self.tensors.get_mut(pos)
    }

    /// Records every parameter as a trainable leaf, in layout order.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Per-scale input matrices for a bag: `inputs[s]` is `n×D`.
    pub fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        let cfg = &self.config;
        if inputs.len() != cfg.n_scales() {
            return Err(Error::Data(format!(
                "network expects {} scales, got {}",
                cfg.n_scales(),
                inputs.len()
            )));
        }
        let (n, d) = inputs[0].dims2();
        if n == 0 {
            return Err(Error::Data("empty bag".into()));
        }
        for x in inputs {
            if x.dims2() != (n, cfg.in_dim) {
                return Err(TensorError::ShapeMismatch {
                    op: "bag input",
                    left: x.shape().to_vec(),
                    right: vec![n, cfg.in_dim],
                }
                .into());
            }
        }
        debug_assert_eq!(d, cfg.in_dim);
        Ok(n)
    }

    /// Full forward pass with fresh parameter leaves on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<(Vec<Var>, ForwardVars)> {
        self.check_inputs(inputs)?;
        let pv = self.record(tape);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let fv = forward_vars(&self.config, tape, &pv, &xs)?;
        Ok((pv, fv))
    }

    /// Inference on one bag.
    pub fn forward_bag(&self, inputs: &[Tensor]) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let (_, fv) = self.forward_on(&mut tape, inputs)?;
        Ok(trace_of(&self.config, &tape, &fv))
    }

    /// Loss and gradients (layout order) for one labeled bag.
    pub fn loss_and_grads(&self, inputs: &[Tensor], label: u8) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (pv, fv) = self.forward_on(&mut tape, inputs)?;
        let loss = tape.nll(fv.probs, label as usize, NLL_FLOOR)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = pv
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, grads))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (cfg, scales) = self.config.to_tensors();
        c.insert("config", cfg);
        c.insert("scales", scales);
        for ((name, _), t) in self.config.layout().iter().zip(&self.tensors) {
            c.insert(name.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = NetConfig::from_tensors(c.require("config")?, c.require("scales")?)?;
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = c.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t.clone());
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Shared-encoder output for one scale.
pub fn ms_encode(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
    let h = tape.matmul(x, weight)?;
    let h = tape.add_bias(h, bias)?;
    Ok(tape.relu(h))
}

/// `n×S` softmax attention over the scales.
pub fn cross_scale_attention(
    tape: &mut Tape,
    encoded: &[Var],
    v: Var,
    w: Var,
    act: Activation,
) -> Result<Var, TensorError> {
    let mut logits = Vec::with_capacity(encoded.len());
    for &h in encoded {
        let z = tape.matmul_bt(h, v)?;
        let z = match act {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
        };
        logits.push(tape.matmul(z, w)?);
    }
    let logits = tape.concat_cols(&logits)?;
    Ok(tape.softmax(logits))
}

pub fn fuse(
    tape: &mut Tape,
    encoded: &[Var],
    attention: Option<Var>,
    mode: FusionMode,
) -> Result<Var, TensorError> {
    match mode {
        FusionMode::Cs => {
            let a = attention.ok_or(TensorError::Invalid {
                op: "fuse",
                msg: "cross-scale fusion needs attention".into(),
            })?;
            let mut acc: Option<Var> = None;
            for (s, &h) in encoded.iter().enumerate() {
                let col = tape.column(a, s)?;
                let term = tape.mul_col(h, col)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
            Ok(acc.unwrap())
        }
        FusionMode::Mean => {
            let mut acc = encoded[0];
            for &h in &encoded[1..] {
                acc = tape.add(acc, h)?;
            }
            Ok(tape.scale(acc, 1.0 / encoded.len() as f64))
        }
        FusionMode::Concat => tape.concat_cols(encoded),
    }
}

/// Gated attention pooling followed by the two-way classifier. Returns
/// `(b as 1×n, logits, probs)`.
pub fn pool_and_classify(
    tape: &mut Tape,
    fused: Var,
    pool: [Var; 3],
    cls: [Var; 2],
) -> Result<(Var, Var, Var), TensorError> {
    let [vc, uc, wc] = pool;
    let t = tape.matmul_bt(fused, vc)?;
    let t = tape.tanh(t);
    let g = tape.matmul_bt(fused, uc)?;
    let g = tape.sigmoid(g);
    let tg = tape.mul(t, g)?;
    let e = tape.matmul(tg, wc)?;
    let e = tape.transpose(e);
    let b = tape.softmax(e);
    let z = tape.matmul(b, fused)?;
    let logits = tape.matmul(z, cls[0])?;
    let logits = tape.add_bias(logits, cls[1])?;
    let probs = tape.softmax(logits);
    Ok((b, logits, probs))
}

/// Forward pass from already-recorded parameter and input handles.
pub fn forward_vars(
    cfg: &NetConfig,
    tape: &mut Tape,
    params: &[Var],
    inputs: &[Var],
) -> Result<ForwardVars, TensorError> {
    let mut p = params.iter().copied();
    let mut next = || {
        p.next().ok_or(TensorError::Invalid {
            op: "forward",
            msg: "too few parameter handles".into(),
        })
    };
    let mut enc = Vec::new();
    for _ in 0..cfg.n_encoders() {
        enc.push((next()?, next()?));
    }
    let encoded = inputs
        .iter()
        .enumerate()
        .map(|(s, &x)| {
            let (w, b) = enc[if cfg.shared { 0 } else { s }];
            ms_encode(tape, x, w, b)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scale_attention = if cfg.mode == FusionMode::Cs {
        let (v, w) = (next()?, next()?);
        Some(cross_scale_attention(tape, &encoded, v, w, cfg.activation)?)
    } else {
        None
    };
    let fused = fuse(tape, &encoded, scale_attention, cfg.mode)?;
    let pool = [next()?, next()?, next()?];
    let cls = [next()?, next()?];
    let (instance_weights, logits, probs) = pool_and_classify(tape, fused, pool, cls)?;
    Ok(ForwardVars {
        encoded,
        scale_attention,
        fused,
        instance_weights,
        logits,
        probs,
    })
}

/// Reads the attention record of a finished forward pass. Fusions that skip
/// attention report the fixed `1/S` weighting they imply.
pub fn trace_of(cfg: &NetConfig, tape: &Tape, fv: &ForwardVars) -> ForwardTrace {
    let b = tape.value(fv.instance_weights).data().to_vec();
    let s = cfg.n_scales();
    let scale_attention = match fv.scale_attention {
        Some(a) => tape.value(a).data().to_vec(),
        None => vec![1.0 / s as f64; b.len() * s],
    };
    let l = tape.value(fv.logits).data();
    let p = tape.value(fv.probs).data();
    ForwardTrace {
        scale_attention,
        n_scales: s,
        instance_weights: b,
        logits: [l[0], l[1]],
        probs: [p[0], p[1]],
    }
}

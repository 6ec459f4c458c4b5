//! Parameterized layers: named parameter maps, initialization, and the
//! linear / conv / batch-norm forwards used by the backbone.

use crate::error::{Error, Result};
use crate::tensor::tape::{BatchStats, Tape, Var};
use crate::tensor::{Element, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named tensor; running statistics are stored non-trainable.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor<f32>,
    pub trainable: bool,
}

/// Ordered map of parameters. Insertion order is the canonical order used by
/// checkpoints, bindings, and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct LayerParams {
    entries: IndexMap<String, Param>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f32>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Graph(format!("duplicate parameter name {name}")));
        }
        self.entries
            .insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Folds fresh batch statistics into the stored running estimates with
    /// momentum `BN_MOMENTUM`; the variance estimate is unbiased.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<f32>)]) -> Result<()> {
        for (name, stats) in updates {
            let mom = BN_MOMENTUM as f32;
            let m = stats.count as f32;
            let mean = self.get_mut(&format!("{name}.running_mean"))?;
            for (r, &b) in mean.value.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            let var = self.get_mut(&format!("{name}.running_var"))?;
            for (r, &b) in var.value.data_mut().iter_mut().zip(&stats.var_biased) {
                let unbiased = b * m / (m - 1.0);
                *r = (1.0 - mom) * *r + mom * unbiased;
            }
        }
        Ok(())
    }
}

/// Map from parameter name to its leaf on a specific tape.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    /// Binds every parameter as a leaf, cast to the tape's element type.
    /// With `trainable` false (evaluation) nothing collects gradients.
    pub fn from_params<T: Element>(
        tape: &mut Tape<T>,
        params: &LayerParams,
        trainable: bool,
    ) -> Binding {
        let mut vars = IndexMap::new();
        for (name, p) in params.iter() {
            let leaf = tape.leaf(p.value.cast(), trainable && p.trainable);
            vars.insert(name.to_string(), leaf);
        }
        Binding { vars }
    }

    /// Pairs pre-made leaves with parameter names, in `params` order; used by
    /// gradient checking, where the caller owns the leaves.
    pub fn from_vars(params: &LayerParams, vars: &[Var]) -> Result<Binding> {
        if vars.len() != params.len() {
            return Err(Error::Graph(format!(
                "{} vars for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        let map = params
            .iter()
            .map(|(n, _)| n.to_string())
            .zip(vars.iter().copied())
            .collect();
        Ok(Binding { vars: map })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unbound parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Forward-pass context: the tape, the mode, and batch-norm statistics
/// collected for the caller to fold into running estimates.
pub struct FwdCtx<'t, T: Element> {
    pub tape: &'t mut Tape<T>,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'t, T: Element> FwdCtx<'t, T> {
    pub fn new(tape: &'t mut Tape<T>, mode: Mode) -> Self {
        FwdCtx {
            tape,
            mode,
            bn_updates: Vec::new(),
        }
    }
}

/// Normal(0, sqrt(2/fan_in)) init, sampled in f64 for portability of the
/// stream, then cast.
pub fn kaiming_init(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming_init: fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let shape = shape.into();
    let numel = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data)
}

/// Registers a conv weight `{name}.weight` of shape `[out_c, in_c, k, k]`.
pub fn add_conv(
    params: &mut LayerParams,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let w = kaiming_init(vec![out_c, in_c, k, k], in_c * k * k, rng)?;
    params.insert(&format!("{name}.weight"), w, true)
}

/// Registers `{name}.gamma/.beta` (trainable) and running stats (frozen).
pub fn add_batchnorm(params: &mut LayerParams, name: &str, channels: usize) -> Result<()> {
    params.insert(&format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0), true)?;
    params.insert(&format!("{name}.beta"), Tensor::zeros(vec![channels]), true)?;
    params.insert(
        &format!("{name}.running_mean"),
        Tensor::zeros(vec![channels]),
        false,
    )?;
    params.insert(
        &format!("{name}.running_var"),
        Tensor::filled(vec![channels], 1.0),
        false,
    )
}

/// Registers `{name}.weight` `[out_d, in_d]` and optionally `{name}.bias`.
pub fn add_linear(
    params: &mut LayerParams,
    name: &str,
    in_d: usize,
    out_d: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let w = kaiming_init(vec![out_d, in_d], in_d, rng)?;
    params.insert(&format!("{name}.weight"), w, true)?;
    if bias {
        params.insert(&format!("{name}.bias"), Tensor::zeros(vec![out_d]), true)?;
    }
    Ok(())
}

/// Convolution by `{name}.weight`, plus `{name}.bias` when present.
pub fn conv_forward<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = binding.var(&format!("{name}.weight"))?;
    let y = ctx.tape.conv2d(x, w, stride, pad)?;
    if binding.has(&format!("{name}.bias")) {
        let b = binding.var(&format!("{name}.bias"))?;
        return ctx.tape.channel_bias(y, b);
    }
    Ok(y)
}

/// `x W^T + b` by `{name}.weight` and optional `{name}.bias`.
pub fn linear_forward<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = binding.var(&format!("{name}.weight"))?;
    let y = ctx.tape.matmul_nt(x, w)?;
    if binding.has(&format!("{name}.bias")) {
        let b = binding.var(&format!("{name}.bias"))?;
        return ctx.tape.add_row(y, b);
    }
    Ok(y)
}

/// Batch norm by `{name}.*`. Train mode normalizes with batch statistics and
/// records them in the context; eval mode is a pure per-channel affine from
/// the stored running statistics.
pub fn batchnorm_forward<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    name: &str,
    x: Var,
) -> Result<Var> {
    let gamma = binding.var(&format!("{name}.gamma"))?;
    let beta = binding.var(&format!("{name}.beta"))?;
    let eps = T::from_f64(BN_EPS);
    match ctx.mode {
        Mode::Train => {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
            ctx.bn_updates.push((name.to_string(), stats));
            Ok(y)
        }
        Mode::Eval => {
            let rm = binding.var(&format!("{name}.running_mean"))?;
            let rv = binding.var(&format!("{name}.running_var"))?;
            let g = ctx.tape.value(gamma).data().to_vec();
            let b = ctx.tape.value(beta).data().to_vec();
            let rm = ctx.tape.value(rm).data().to_vec();
            let rv = ctx.tape.value(rv).data().to_vec();
            let mut scale = Vec::with_capacity(g.len());
            let mut shift = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let istd = T::ONE / (rv[i] + eps).sqrt();
                scale.push(g[i] * istd);
                shift.push(b[i] - g[i] * rm[i] * istd);
            }
            ctx.tape.channel_affine(x, &scale, &shift)
        }
    }
}

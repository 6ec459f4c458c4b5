//! Convolutional block attention: channel gating, spatial gating, and the
//! residual BasicBlock that hosts them in sequence (channel first).

use crate::error::{Error, Result};
use crate::nn::{
    add_batchnorm, add_conv, add_linear, batchnorm_forward, conv_forward, linear_forward, Binding,
    FwdCtx, LayerParams,
};
use crate::tensor::tape::Var;
use crate::tensor::Element;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        CbamConfig {
            reduction_ratio: 16,
            spatial_kernel: 7,
        }
    }
}

impl CbamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be positive".into()));
        }
        if self.spatial_kernel % 2 == 0 || self.spatial_kernel == 0 {
            return Err(Error::Config(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }

    /// Bottleneck width of the shared channel MLP.
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction_ratio).max(1)
    }
}

/// Registers attention parameters under `{prefix}.ca.*` and `{prefix}.sa.*`.
pub fn add_cbam(
    params: &mut LayerParams,
    prefix: &str,
    channels: usize,
    cfg: &CbamConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let hidden = cfg.hidden(channels);
    add_linear(params, &format!("{prefix}.ca.fc1"), channels, hidden, true, rng)?;
    add_linear(params, &format!("{prefix}.ca.fc2"), hidden, channels, true, rng)?;
    let k = cfg.spatial_kernel;
    let w = crate::nn::kaiming_init(vec![1, 2, k, k], 2 * k * k, rng)?;
    params.insert(&format!("{prefix}.sa.conv.weight"), w, true)?;
    params.insert(
        &format!("{prefix}.sa.conv.bias"),
        crate::tensor::Tensor::zeros(vec![1]),
        true,
    )?;
    Ok(())
}

/// Per-channel gate in (0,1): sigmoid of the shared MLP applied to both the
/// average- and max-pooled descriptors, summed.
pub fn channel_attention<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let avg = ctx.tape.global_avg_pool(x)?;
    let max = ctx.tape.global_max_pool(x)?;
    let mlp = |ctx: &mut FwdCtx<T>, v: Var| -> Result<Var> {
        let h = linear_forward(ctx, binding, &format!("{prefix}.ca.fc1"), v)?;
        let h = ctx.tape.relu(h)?;
        linear_forward(ctx, binding, &format!("{prefix}.ca.fc2"), h)
    };
    let a = mlp(ctx, avg)?;
    let m = mlp(ctx, max)?;
    let sum = ctx.tape.add(a, m)?;
    ctx.tape.sigmoid(sum)
}

/// Per-position gate in (0,1): sigmoid of a `k x k` convolution over the
/// stacked channel-mean and channel-max maps. Padding preserves H x W.
pub fn spatial_attention<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let mean = ctx.tape.channel_mean(x)?;
    let max = ctx.tape.channel_max(x)?;
    let stacked = ctx.tape.concat_channels(mean, max)?;
    let w = binding.var(&format!("{prefix}.sa.conv.weight"))?;
    let k = ctx.tape.value(w).shape()[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!("spatial kernel must be odd, got {k}")));
    }
    let conv = conv_forward(ctx, binding, &format!("{prefix}.sa.conv"), stacked, 1, (k - 1) / 2)?;
    ctx.tape.sigmoid(conv)
}

/// Channel attention, then spatial attention on the channel-refined map.
pub fn cbam_apply<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let mc = channel_attention(ctx, binding, prefix, x)?;
    let refined = ctx.tape.mul_channel_gate(x, mc)?;
    let ms = spatial_attention(ctx, binding, prefix, refined)?;
    ctx.tape.mul_spatial_gate(refined, ms)
}

/// Registers a residual block under `{prefix}`: two 3x3 convs with batch
/// norms, a 1x1 projection shortcut when channel counts differ, and
/// attention params when `cbam` is supplied.
pub fn add_basic_block(
    params: &mut LayerParams,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    cbam: Option<&CbamConfig>,
    rng: &mut impl Rng,
) -> Result<()> {
    add_conv(params, &format!("{prefix}.conv1"), in_c, out_c, 3, rng)?;
    add_batchnorm(params, &format!("{prefix}.bn1"), out_c)?;
    add_conv(params, &format!("{prefix}.conv2"), out_c, out_c, 3, rng)?;
    add_batchnorm(params, &format!("{prefix}.bn2"), out_c)?;
    if in_c != out_c {
        add_conv(params, &format!("{prefix}.down.conv"), in_c, out_c, 1, rng)?;
        add_batchnorm(params, &format!("{prefix}.down.bn"), out_c)?;
    }
    if let Some(cfg) = cbam {
        add_cbam(params, prefix, out_c, cfg, rng)?;
    }
    Ok(())
}

/// BasicBlock forward: `relu(shortcut(h) + branch(h))`, where the residual
/// branch is conv-bn-relu-conv-bn, gated by attention just before the
/// addition when `cbam_on`. With `stride > 1` the input is first reduced by
/// a stride-matched average pool, so every conv runs at stride 1 and keeps
/// exact tiling.
pub fn basic_block_forward<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    prefix: &str,
    x: Var,
    stride: usize,
    cbam_on: bool,
) -> Result<Var> {
    let h = if stride > 1 {
        ctx.tape.avg_pool2d(x, stride, stride)?
    } else {
        x
    };
    let y = conv_forward(ctx, binding, &format!("{prefix}.conv1"), h, 1, 1)?;
    let y = batchnorm_forward(ctx, binding, &format!("{prefix}.bn1"), y)?;
    let y = ctx.tape.relu(y)?;
    let y = conv_forward(ctx, binding, &format!("{prefix}.conv2"), y, 1, 1)?;
    let mut branch = batchnorm_forward(ctx, binding, &format!("{prefix}.bn2"), y)?;
    if cbam_on {
        branch = cbam_apply(ctx, binding, prefix, branch)?;
    }
    let shortcut = if binding.has(&format!("{prefix}.down.conv.weight")) {
        let s = conv_forward(ctx, binding, &format!("{prefix}.down.conv"), h, 1, 0)?;
        batchnorm_forward(ctx, binding, &format!("{prefix}.down.bn"), s)?
    } else {
        h
    };
    let sum = ctx.tape.add(shortcut, branch)?;
    ctx.tape.relu(sum)
}

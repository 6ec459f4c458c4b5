//! Gradient verification suite: every differentiable op compared against
//! central differences in f64, plus the composite attention, loss, and
//! full-model checks. Deterministic; used by the `gradcheck` subcommand.

use crate::backbone::{build_backbone, forward_features, BackboneConfig};
use crate::cbam::{add_basic_block, add_cbam, basic_block_forward, cbam_apply, CbamConfig};
use crate::error::{Error, Result};
use crate::loss::{addup_loss, training_loss, weighted_ce, ClassWeights, LossMode};
use crate::nn::{Binding, FwdCtx, LayerParams, Mode};
use crate::tensor::gradcheck::gradient_check;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-5;
pub const CE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Uniform on [-hi, -margin] u [margin, hi]; keeps finite differences away
/// from kinks at zero or at clamp edges.
fn rand_away(rng: &mut ChaCha12Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(margin..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `out` to a scalar through a fixed random probe so every output
/// coordinate contributes a distinct weight.
fn probed(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let probe = Tensor::from_fn(shape, |_| rng.gen_range(0.25..1.75));
    let p = tape.constant(probe);
    let prod = tape.mul(out, p)?;
    tape.sum_all(prod)
}

fn run_check(
    name: &str,
    tol: f64,
    make: impl Fn(u64) -> Result<(Vec<Tensor<f64>>, Graph)>,
) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let (inputs, graph) = make(seed)?;
        let err = gradient_check(|t, v| graph(t, v), &inputs, STEP)?;
        worst = worst.max(err);
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: tol,
        passed: worst < tol,
    })
}

fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x0005_DEEC_E66D).wrapping_add(11))
}

/// Casts the trainable parameters to f64 check inputs; frozen entries
/// (batch-norm running stats) stay out of the differentiation set.
fn trainable_tensors(params: &LayerParams) -> Vec<Tensor<f64>> {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.value.cast::<f64>())
        .collect()
}

/// Rebuilds a full binding inside the check graph: trainable entries come
/// from the perturbed check inputs, frozen entries become constants.
fn bind_mixed(tape: &mut Tape<f64>, params: &LayerParams, vars: &[Var]) -> Result<Binding> {
    let mut all = Vec::with_capacity(params.len());
    let mut it = vars.iter();
    for (name, p) in params.iter() {
        if p.trainable {
            all.push(*it.next().ok_or_else(|| {
                Error::Graph(format!("missing check input for parameter {name}"))
            })?);
        } else {
            let frozen = tape.constant(p.value.cast::<f64>());
            all.push(frozen);
        }
    }
    Binding::from_vars(params, &all)
}

pub fn run_gradient_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    out.push(run_check("add", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("sub", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.sub(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("mul", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.mul(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("div", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_away(&mut rng, &[3, 4], 0.5, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.div(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("add_scalar", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let c = rng.gen_range(-1.0..1.0);
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.add_scalar(v[0], c)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("scale", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let c = rng.gen_range(0.5..2.0);
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.scale(v[0], c)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("relu", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_away(&mut rng, &[3, 4], 0.05, 2.0);
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("sigmoid", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -4.0, 4.0);
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.sigmoid(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("exp", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.exp(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("clamp", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = Tensor::from_fn(vec![3, 4], |_| {
            // keep 0.05 clear of the clamp edges at +-1
            let v: f64 = rng.gen_range(-1.8..1.8);
            if (v.abs() - 1.0).abs() < 0.05 {
                v + 0.1 * v.signum()
            } else {
                v
            }
        });
        Ok((
            vec![a],
            Box::new(move |t, v| {
                let y = t.clamp(v[0], -1.0, 1.0)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("matmul", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("matmul_nt", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 4], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("add_row", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.add_row(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("conv2d", OP_TOL, |s| {
        let mut rng = seeded(s);
        let (x, k, stride, pad) = if s % 2 == 0 {
            (
                rand_tensor(&mut rng, &[2, 3, 5, 5], -1.5, 1.5),
                rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
                1,
                1,
            )
        } else {
            (
                rand_tensor(&mut rng, &[2, 2, 4, 4], -1.5, 1.5),
                rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0),
                2,
                0,
            )
        };
        Ok((
            vec![x, k],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("channel_bias", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        Ok((
            vec![x, b],
            Box::new(move |t, v| {
                let y = t.channel_bias(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("batch_norm_train", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[4, 3, 2, 2], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        Ok((
            vec![x, gamma, beta],
            Box::new(move |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("channel_affine", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let shift: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.channel_affine(v[0], &scale, &shift)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("max_pool2d", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], 2, 2)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("avg_pool2d", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.avg_pool2d(v[0], 2, 2)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("global_avg_pool", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.global_avg_pool(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("global_max_pool", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.global_max_pool(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("channel_mean", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.channel_mean(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("channel_max", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.channel_max(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("concat_channels", OP_TOL, |s| {
        let mut rng = seeded(s);
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("mul_channel_gate", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[2, 3], 0.1, 0.9);
        Ok((
            vec![x, g],
            Box::new(move |t, v| {
                let y = t.mul_channel_gate(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("mul_spatial_gate", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[2, 1, 4, 4], 0.1, 0.9);
        Ok((
            vec![x, g],
            Box::new(move |t, v| {
                let y = t.mul_spatial_gate(v[0], v[1])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("log_softmax", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[4, 5], -3.0, 3.0);
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.log_softmax(v[0])?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("gather_rows", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let index: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        Ok((
            vec![x],
            Box::new(move |t, v| {
                let y = t.gather_rows(v[0], &index)?;
                probed(t, y, s)
            }),
        ))
    })?);

    out.push(run_check("nll_pick_mean", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[4, 5], -3.0, -0.1);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        Ok((
            vec![x],
            Box::new(move |t, v| t.nll_pick_mean(v[0], &labels, &weights)),
        ))
    })?);

    out.push(run_check("sum_all", OP_TOL, |s| {
        let mut rng = seeded(s);
        let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        Ok((vec![x], Box::new(|t, v| t.sum_all(v[0]))))
    })?);

    out.push(run_check("weighted_ce", CE_TOL, |s| {
        let mut rng = seeded(s);
        let logits = rand_tensor(&mut rng, &[5, 4], -2.0, 2.0);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let w =
            ClassWeights::manual((0..4).map(|_| rng.gen_range(0.5..2.0)).collect())?;
        Ok((
            vec![logits],
            Box::new(move |t, v| weighted_ce(t, v[0], &labels, &w)),
        ))
    })?);

    out.push(run_check("addup_loss", CE_TOL, |s| {
        let mut rng = seeded(s);
        let logits = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let la: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let lb: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let w =
            ClassWeights::manual((0..3).map(|_| rng.gen_range(0.5..2.0)).collect())?;
        Ok((
            vec![logits],
            Box::new(move |t, v| addup_loss(t, v[0], &la, &lb, &w)),
        ))
    })?);

    out.push(run_check("cbam_apply", OP_TOL, |s| {
        let mut rng = seeded(s);
        let cfg = CbamConfig {
            reduction_ratio: 4,
            spatial_kernel: 3,
        };
        let mut params = LayerParams::new();
        add_cbam(&mut params, "b", 4, &cfg, &mut rng)?;
        let mut inputs = trainable_tensors(&params);
        inputs.push(rand_tensor(&mut rng, &[2, 4, 6, 6], -2.0, 2.0));
        Ok((
            inputs,
            Box::new(move |t, v| {
                let binding = bind_mixed(t, &params, &v[..v.len() - 1])?;
                let mut ctx = FwdCtx::new(t, Mode::Eval);
                let y = cbam_apply(&mut ctx, &binding, "b", v[v.len() - 1])?;
                probed(ctx.tape, y, s)
            }),
        ))
    })?);

    out.push(run_check("basic_block", OP_TOL, |s| {
        let mut rng = seeded(s);
        let cfg = CbamConfig {
            reduction_ratio: 4,
            spatial_kernel: 3,
        };
        let mut params = LayerParams::new();
        add_basic_block(&mut params, "b", 3, 5, Some(&cfg), &mut rng)?;
        let mut inputs = trainable_tensors(&params);
        inputs.push(rand_tensor(&mut rng, &[2, 3, 6, 6], -2.0, 2.0));
        Ok((
            inputs,
            Box::new(move |t, v| {
                let binding = bind_mixed(t, &params, &v[..v.len() - 1])?;
                let mut ctx = FwdCtx::new(t, Mode::Train);
                let y = basic_block_forward(&mut ctx, &binding, "b", v[v.len() - 1], 2, true)?;
                probed(ctx.tape, y, s)
            }),
        ))
    })?);

    out.push(full_model_check()?);

    Ok(out)
}

/// End-to-end check: every trainable parameter plus the input image,
/// through the attention backbone, uncertainty mixing, and the weighted
/// paired loss, on a 2-sample 8x8 batch.
pub fn full_model_check() -> Result<CheckOutcome> {
    let config = BackboneConfig {
        stage_blocks: vec![1],
        base_channels: 4,
        input_size: 8,
        in_channels: 1,
        feature_dim: 6,
        num_classes: 3,
        cbam_on: true,
        classifier_bias: false,
        cbam: CbamConfig {
            reduction_ratio: 4,
            spatial_kernel: 3,
        },
    };
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let (params, _) = build_backbone(&config, &mut rng)?;
    let weights = ClassWeights::manual(vec![1.2, 0.8, 1.0])?;
    let labels = vec![0usize, 2];

    let mut inputs = trainable_tensors(&params);
    inputs.push(Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.gen_range(0.0..1.0)));

    let err = gradient_check(
        |t, v| {
            let binding = bind_mixed(t, &params, &v[..v.len() - 1])?;
            let mut ctx = FwdCtx::new(t, Mode::Train);
            let bundle = forward_features(&mut ctx, &binding, &config, v[v.len() - 1])?;
            let mut pairing = ChaCha12Rng::seed_from_u64(77);
            let tl = training_loss(
                &mut ctx,
                &binding,
                &bundle,
                &labels,
                &weights,
                LossMode::Cucn,
                &mut pairing,
            )?;
            Ok(tl.loss)
        },
        &inputs,
        STEP,
    )?;
    Ok(CheckOutcome {
        name: "full_model".to_string(),
        max_rel_err: err,
        tolerance: MODEL_TOL,
        passed: err < MODEL_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_in_the_suite_passes() {
        let outcomes = run_gradient_suite().unwrap();
        assert!(outcomes.len() > 25);
        for o in &outcomes {
            assert!(
                o.passed,
                "{}: max rel err {} >= tol {}",
                o.name, o.max_rel_err, o.tolerance
            );
        }
    }
}

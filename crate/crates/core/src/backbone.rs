//! Mini residual backbone emitting, per sample, a classification feature
//! vector and a strictly positive per-dimension uncertainty vector, plus the
//! linear classifier head over either.

use crate::cbam::{add_basic_block, basic_block_forward, CbamConfig};
use crate::error::{Error, Result};
use crate::nn::{
    add_batchnorm, add_conv, add_linear, batchnorm_forward, conv_forward, linear_forward, Binding,
    FwdCtx, LayerParams,
};
use crate::tensor::tape::Var;
use crate::tensor::Element;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Exponent clamp for the uncertainty head, keeping mixing ratios bounded.
pub const UNCERTAINTY_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_blocks: Vec<usize>,
    pub base_channels: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub cbam_on: bool,
    pub classifier_bias: bool,
    pub cbam: CbamConfig,
}

impl BackboneConfig {
    /// Small grayscale configuration that trains in minutes on a laptop CPU.
    pub fn desk(num_classes: usize) -> Self {
        BackboneConfig {
            stage_blocks: vec![1, 1, 1],
            base_channels: 16,
            input_size: 32,
            in_channels: 1,
            feature_dim: 64,
            num_classes,
            cbam_on: true,
            classifier_bias: false,
            cbam: CbamConfig::default(),
        }
    }

    /// ResNet18-shaped preset for 224x224 RGB inputs.
    pub fn full(num_classes: usize) -> Self {
        BackboneConfig {
            stage_blocks: vec![2, 2, 2, 2],
            base_channels: 64,
            input_size: 224,
            in_channels: 3,
            feature_dim: 512,
            num_classes,
            cbam_on: true,
            classifier_bias: false,
            cbam: CbamConfig::default(),
        }
    }

    /// Spatial downsampling factor from input to trunk output.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.stage_blocks.len().saturating_sub(1))
    }

    pub fn trunk_channels(&self) -> usize {
        self.base_channels << (self.stage_blocks.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return Err(Error::Config(format!(
                "stage_blocks must be non-empty positive ints, got {:?}",
                self.stage_blocks
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let factor = self.downsample_factor();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by the downsampling factor {factor}",
                self.input_size
            )));
        }
        self.cbam.validate()
    }
}

/// Classification features plus matching positive uncertainties, `[N, d]`.
pub struct FeatureBundle {
    pub features: Var,
    pub uncertainty: Var,
}

/// Builds all parameters for `config`; the returned descriptor is the JSON
/// form of the config, stored in checkpoints so loading can rebuild the net.
pub fn build_backbone(config: &BackboneConfig, rng: &mut impl Rng) -> Result<(LayerParams, String)> {
    config.validate()?;
    let mut params = LayerParams::new();
    add_conv(&mut params, "stem.conv", config.in_channels, config.base_channels, 3, rng)?;
    add_batchnorm(&mut params, "stem.bn", config.base_channels)?;
    let cbam = config.cbam_on.then_some(&config.cbam);
    let mut in_c = config.base_channels;
    for (s, &blocks) in config.stage_blocks.iter().enumerate() {
        let out_c = config.base_channels << s;
        for j in 0..blocks {
            add_basic_block(
                &mut params,
                &format!("stage{s}.block{j}"),
                in_c,
                out_c,
                cbam,
                rng,
            )?;
            in_c = out_c;
        }
    }
    add_linear(&mut params, "feature_head", in_c, config.feature_dim, true, rng)?;
    add_linear(&mut params, "uncertainty_head", in_c, config.feature_dim, true, rng)?;
    add_linear(
        &mut params,
        "classifier",
        config.feature_dim,
        config.num_classes,
        config.classifier_bias,
        rng,
    )?;
    let descriptor = serde_json::to_string(config)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    Ok((params, descriptor))
}

pub fn parse_descriptor(descriptor: &str) -> Result<BackboneConfig> {
    serde_json::from_str(descriptor)
        .map_err(|e| Error::Config(format!("bad architecture descriptor: {e}")))
}

/// Runs the trunk and both heads. The uncertainty is `exp` of a clamped
/// linear head, so it is finite and strictly positive.
pub fn forward_features<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    config: &BackboneConfig,
    x: Var,
) -> Result<FeatureBundle> {
    let shape = ctx.tape.value(x).shape().to_vec();
    if shape.len() != 4
        || shape[1] != config.in_channels
        || shape[2] != config.input_size
        || shape[3] != config.input_size
    {
        return Err(Error::shape(
            "forward_features",
            format!(
                "input {shape:?} does not match [N, {}, {}, {}]",
                config.in_channels, config.input_size, config.input_size
            ),
        ));
    }
    let y = conv_forward(ctx, binding, "stem.conv", x, 1, 1)?;
    let y = batchnorm_forward(ctx, binding, "stem.bn", y)?;
    let mut y = ctx.tape.relu(y)?;
    for (s, &blocks) in config.stage_blocks.iter().enumerate() {
        for j in 0..blocks {
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            y = basic_block_forward(
                ctx,
                binding,
                &format!("stage{s}.block{j}"),
                y,
                stride,
                config.cbam_on,
            )?;
        }
    }
    let pooled = ctx.tape.global_avg_pool(y)?;
    let features = linear_forward(ctx, binding, "feature_head", pooled)?;
    let raw = linear_forward(ctx, binding, "uncertainty_head", pooled)?;
    let clamp = T::from_f64(UNCERTAINTY_CLAMP);
    let clamped = ctx.tape.clamp(raw, T::ZERO - clamp, clamp)?;
    let uncertainty = ctx.tape.exp(clamped)?;
    Ok(FeatureBundle {
        features,
        uncertainty,
    })
}

/// Logits from features (or mixed features): `f W^T`, plus bias if enabled.
pub fn classify<T: Element>(ctx: &mut FwdCtx<T>, binding: &Binding, features: Var) -> Result<Var> {
    linear_forward(ctx, binding, "classifier", features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            stage_blocks: vec![1],
            base_channels: 4,
            input_size: 8,
            in_channels: 1,
            feature_dim: 8,
            num_classes: 3,
            cbam_on: true,
            classifier_bias: false,
            cbam: CbamConfig {
                reduction_ratio: 4,
                spatial_kernel: 3,
            },
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = BackboneConfig::desk(4);
        let (a, da) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let (b, db) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(da, db);
        assert_eq!(a.len(), b.len());
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value, "{na}");
        }
    }

    #[test]
    fn desk_forward_shapes_and_positivity() {
        let cfg = BackboneConfig::desk(4);
        let (params, _) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::<f32>::new();
        let binding = Binding::from_params(&mut tape, &params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = ctx.tape.leaf(
            Tensor::from_fn(vec![4, 1, 32, 32], |_| rng.gen_range(0.0..1.0)),
            false,
        );
        let bundle = forward_features(&mut ctx, &binding, &cfg, x).unwrap();
        let logits = classify(&mut ctx, &binding, bundle.features).unwrap();
        assert_eq!(tape.value(bundle.features).shape(), &[4, 64]);
        assert_eq!(tape.value(bundle.uncertainty).shape(), &[4, 64]);
        assert_eq!(tape.value(logits).shape(), &[4, 4]);
        assert!(tape.value(bundle.uncertainty).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_uncertainty_head_gives_unit_uncertainty() {
        let cfg = tiny_config();
        let (mut params, _) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        for name in ["uncertainty_head.weight", "uncertainty_head.bias"] {
            let p = params.get_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let mut tape = Tape::<f64>::new();
        let binding = Binding::from_params(&mut tape, &params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = ctx.tape.leaf(
            Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.gen_range(0.0..1.0)),
            false,
        );
        let bundle = forward_features(&mut ctx, &binding, &cfg, x).unwrap();
        for &v in tape.value(bundle.uncertainty).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config();
        let (params, _) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        // stem: 4*1*3*3 conv + bn (gamma, beta, running mean/var: 4*4)
        let stem = 36 + 16;
        // one block, 4 -> 4, stride 1: two 3x3 convs + two bns, no shortcut
        let block = 4 * 4 * 9 + 16 + 4 * 4 * 9 + 16;
        // attention: fc1 4->1 (w 4 + b 1), fc2 1->4 (w 4 + b 4), conv 1x2x3x3 + bias
        let attention = (4 + 1) + (4 + 4) + (2 * 9 + 1);
        // heads: two linear 4->8 with bias, classifier 3x8 without
        let heads = 2 * (8 * 4 + 8) + 3 * 8;
        assert_eq!(params.numel(), stem + block + attention + heads);
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let cfg = tiny_config();
        let (mut params, _) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(6)).unwrap();
        let p = params.get_mut("classifier.weight").unwrap();
        p.value = Tensor::zeros(p.value.shape().to_vec());
        let mut tape = Tape::<f64>::new();
        let binding = Binding::from_params(&mut tape, &params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = ctx.tape.leaf(
            Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.gen_range(0.0..1.0)),
            false,
        );
        let bundle = forward_features(&mut ctx, &binding, &cfg, x).unwrap();
        let logits = classify(&mut ctx, &binding, bundle.features).unwrap();
        let lp = ctx.tape.log_softmax(logits).unwrap();
        for &v in tape.value(lp).data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_classifier_rows_select_feature_coordinates() {
        let mut tape = Tape::<f64>::new();
        let mut params = LayerParams::new();
        let mut w = Tensor::zeros(vec![2, 4]);
        w.data_mut()[0] = 1.0; // row 0 -> coordinate 0
        w.data_mut()[4 + 2] = 1.0; // row 1 -> coordinate 2
        params.insert("classifier.weight", w, true).unwrap();
        let binding = Binding::from_params(&mut tape, &params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let f = ctx.tape.leaf(
            Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            false,
        );
        let logits = classify(&mut ctx, &binding, f).unwrap();
        let got = tape.value(logits).data();
        assert!((got[0] - 0.1).abs() < 1e-12);
        assert!((got[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn classify_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut params = LayerParams::new();
        crate::nn::add_linear(&mut params, "classifier", 5, 3, false, &mut rng).unwrap();
        let f = Tensor::<f64>::from_fn(vec![4, 5], |_| rng.gen_range(-1.0..1.0));
        let w = params.get("classifier.weight").unwrap().value.clone();
        let mut want = vec![0.0; 4 * 3];
        for i in 0..4 {
            for o in 0..3 {
                for k in 0..5 {
                    want[i * 3 + o] += f.data()[i * 5 + k] * f64::from(w.data()[o * 5 + k]);
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let binding = Binding::from_params(&mut tape, &params, false);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let fv = ctx.tape.leaf(f, false);
        let logits = classify(&mut ctx, &binding, fv).unwrap();
        for (g, wv) in tape.value(logits).data().iter().zip(&want) {
            assert!((g - wv).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_params_do_not_affect_the_plain_path() {
        let mut cfg = tiny_config();
        let (params, _) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(10)).unwrap();
        let mut scrambled = params.clone();
        for (name, p) in scrambled.iter_mut() {
            if name.contains(".ca.") || name.contains(".sa.") {
                p.value = p.value.map(|v| v + 7.5);
            }
        }
        cfg.cbam_on = false;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let input = Tensor::<f32>::from_fn(vec![2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let run = |p: &LayerParams| {
            let mut tape = Tape::<f32>::new();
            let binding = Binding::from_params(&mut tape, p, false);
            let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
            let x = ctx.tape.leaf(input.clone(), false);
            let bundle = forward_features(&mut ctx, &binding, &cfg, x).unwrap();
            tape.value(bundle.features).data().to_vec()
        };
        assert_eq!(run(&params), run(&scrambled));
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        let mut cfg = BackboneConfig::desk(4);
        cfg.input_size = 30; // factor 4 for three stages
        assert!(cfg.validate().is_err());
        assert!(build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn descriptor_roundtrips_through_json() {
        let cfg = BackboneConfig::desk(7);
        let (_, descriptor) = build_backbone(&cfg, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        let back = parse_descriptor(&descriptor).unwrap();
        assert_eq!(back, cfg);
    }
}

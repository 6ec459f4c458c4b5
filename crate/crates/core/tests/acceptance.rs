//! End-to-end acceptance checks: gradient correctness, loss and mixing
//! identities, attention laws, the imbalanced-training ablation, run
//! determinism, format round-trips, and the learning-rate schedule.
//! Each test prints one PASS line with its measured numbers.

use mixtrain_core::backbone::{build_backbone, BackboneConfig, FeatureBundle};
use mixtrain_core::cbam::{add_cbam, cbam_apply, channel_attention, spatial_attention, CbamConfig};
use mixtrain_core::checkpoint::{decode_entries, encode_entries, load_checkpoint, save_checkpoint};
use mixtrain_core::data::{synth_generate, SynthSpec};
use mixtrain_core::loss::{
    addup_loss, mix_features, pair_permutation, weighted_ce, ClassWeights, LossMode, WeightScheme,
    MIX_EPS,
};
use mixtrain_core::metrics::{confusion_matrix, report_from_json, report_to_json, summarize};
use mixtrain_core::nn::{Binding, FwdCtx, LayerParams, Mode};
use mixtrain_core::tensor::cutn::{self, AnyTensor, RawU8};
use mixtrain_core::tensor::tape::Tape;
use mixtrain_core::tensor::Tensor;
use mixtrain_core::train::{lr_at_epoch, train, TrainConfig};
use mixtrain_core::verify::run_gradient_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::{Duration, Instant};

const OP_GRAD_TOL: f64 = 1e-5;
const COMPOSITE_CE_GRAD_TOL: f64 = 1e-6;
const MODEL_GRAD_TOL: f64 = 1e-4;
const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const LOSS_IDENTITY_TOL: f64 = 1e-9;
const LINEARITY_REL_TOL: f64 = 1e-12;
const MEAN_MIX_TOL: f64 = 1e-7;
const HULL_SLACK: f64 = 1e-6;
const ATTENTION_ZERO_TOL: f32 = 1e-6;
const ABLATION_BUDGET: Duration = Duration::from_secs(900);
const OVERALL_DROP_LIMIT: f64 = 0.05;
const LR_REL_TOL: f64 = 1e-15;

#[test]
fn gradient_suite_covers_every_op_and_the_full_model() {
    let start = Instant::now();
    let outcomes = run_gradient_suite().unwrap();
    let elapsed = start.elapsed();

    for o in &outcomes {
        assert!(
            o.passed,
            "{}: max rel err {:e} >= tol {:e}",
            o.name, o.max_rel_err, o.tolerance
        );
    }
    for o in &outcomes {
        let expected = match o.name.as_str() {
            "weighted_ce" | "addup_loss" => COMPOSITE_CE_GRAD_TOL,
            "full_model" => MODEL_GRAD_TOL,
            _ => OP_GRAD_TOL,
        };
        assert_eq!(o.tolerance, expected, "tolerance drifted for {}", o.name);
    }
    assert!(outcomes.iter().any(|o| o.name == "full_model"));
    assert!(outcomes.len() >= 30, "suite shrank to {} checks", outcomes.len());
    assert!(
        elapsed < GRAD_SUITE_BUDGET,
        "gradient suite took {elapsed:?}, budget {GRAD_SUITE_BUDGET:?}"
    );
    let worst = outcomes
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    println!(
        "PASS gradient suite: {} checks, worst rel err {worst:.3e}, {elapsed:.2?}",
        outcomes.len()
    );
}

#[test]
fn loss_identities_hold() {
    let n = 6;
    let c = 5;

    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(Tensor::zeros(vec![n, c]));
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let unit = ClassWeights::uniform(c);
    let lv = weighted_ce(&mut tape, logits, &labels, &unit).unwrap();
    let v = tape.value(lv).item();
    let expect = (c as f64).ln();
    assert!(
        (v - expect).abs() <= LOSS_IDENTITY_TOL,
        "uniform-logit loss {v} vs ln {c} = {expect}"
    );

    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let raw = Tensor::from_fn(vec![7, 4], |_| rng.gen_range(-3.0..3.0));
    let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
    let w = ClassWeights::manual(vec![0.7, 1.3, 2.0, 0.5]).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(raw.clone());
    let sv = weighted_ce(&mut tape, logits, &labels, &w).unwrap();
    let single = tape.value(sv).item();
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(raw.clone());
    let pv = addup_loss(&mut tape, logits, &labels, &labels, &w).unwrap();
    let paired = tape.value(pv).item();
    assert!(
        (paired - 2.0 * single).abs() <= LOSS_IDENTITY_TOL,
        "self-paired loss {paired} vs doubled single {}",
        2.0 * single
    );

    let alpha = 3.7;
    let scaled_w = w.scaled(alpha).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(raw);
    let scv = weighted_ce(&mut tape, logits, &labels, &scaled_w).unwrap();
    let scaled = tape.value(scv).item();
    let rel = (scaled - alpha * single).abs() / (alpha * single).abs();
    assert!(
        rel <= LINEARITY_REL_TOL,
        "weight scaling rel err {rel:e} > {LINEARITY_REL_TOL:e}"
    );

    println!(
        "PASS loss identities: ln-C dev {:.1e}, pairing dev {:.1e}, linearity rel {rel:.1e}",
        (v - expect).abs(),
        (paired - 2.0 * single).abs()
    );
}

fn mix_on_tape(
    features: Tensor<f64>,
    sigma: Tensor<f64>,
    perm: &[usize],
) -> (Tensor<f64>, Tensor<f64>) {
    let n = features.shape()[0];
    let mut tape: Tape<f64> = Tape::new();
    let bundle = FeatureBundle {
        features: tape.constant(features.clone()),
        uncertainty: tape.constant(sigma),
    };
    let labels: Vec<usize> = vec![0; n];
    let mixed = mix_features(&mut tape, &bundle, &labels, perm).unwrap();
    (features, tape.value(mixed.mixed).clone())
}

#[test]
fn mixing_identities_hold() {
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    let n = 8;
    let d = 6;

    let features = Tensor::from_fn(vec![n, d], |_| rng.gen_range(-3.0..3.0));
    let sigma_rows: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..4.0)).collect();
    let sigma = Tensor::from_fn(vec![n, d], |i| sigma_rows[i % d]);
    let perm: Vec<usize> = (0..n).map(|i| (i + n / 2) % n).collect();
    let (f, mixed) = mix_on_tape(features, sigma, &perm);
    let mut worst_mean_dev = 0.0f64;
    for i in 0..n {
        for k in 0..d {
            let a = f.data()[i * d + k];
            let b = f.data()[perm[i] * d + k];
            let dev = (mixed.data()[i * d + k] - 0.5 * (a + b)).abs();
            worst_mean_dev = worst_mean_dev.max(dev);
        }
    }
    assert!(
        worst_mean_dev <= MEAN_MIX_TOL,
        "equal-uncertainty mix deviates from the mean by {worst_mean_dev:e}"
    );

    let features = Tensor::from_fn(vec![n, d], |_| rng.gen_range(-3.0..3.0));
    let sigma = Tensor::from_fn(vec![n, d], |_| rng.gen_range(0.05..5.0));
    let identity: Vec<usize> = (0..n).collect();
    let (f, mixed) = mix_on_tape(features.clone(), sigma.clone(), &identity);
    let mut worst_ratio = 0.0f64;
    for idx in 0..n * d {
        let mu = f.data()[idx];
        let s = sigma.data()[idx];
        let bound = mu.abs() * MIX_EPS / (2.0 * s) + 1e-15;
        let dev = (mixed.data()[idx] - mu).abs();
        assert!(
            dev <= bound,
            "self-mix moved {mu} by {dev:e}, bound {bound:e}"
        );
        worst_ratio = worst_ratio.max(dev / bound.max(1e-300));
    }

    let mut hull_max_excess = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(7000 + seed);
        let features = Tensor::from_fn(vec![n, d], |_| rng.gen_range(-3.0..3.0));
        let sigma = Tensor::from_fn(vec![n, d], |_| rng.gen_range(0.1..5.0));
        let perm = pair_permutation(n, &mut rng);
        let (f, mixed) = mix_on_tape(features, sigma, &perm);
        for i in 0..n {
            for k in 0..d {
                let a = f.data()[i * d + k];
                let b = f.data()[perm[i] * d + k];
                let (lo, hi) = (a.min(b), a.max(b));
                let m = mixed.data()[i * d + k];
                assert!(
                    m >= lo - HULL_SLACK && m <= hi + HULL_SLACK,
                    "seed {seed}: mixed {m} escapes hull [{lo}, {hi}]"
                );
                hull_max_excess = hull_max_excess.max((lo - m).max(m - hi).max(0.0));
            }
        }
    }

    println!(
        "PASS mixing identities: mean dev {worst_mean_dev:.1e}, self-mix worst bound use {:.0}%, hull excess {hull_max_excess:.1e} over 100 seeds",
        worst_ratio * 100.0
    );
}

#[test]
fn attention_laws_hold() {
    let cfg = CbamConfig {
        reduction_ratio: 4,
        spatial_kernel: 3,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut params = LayerParams::new();
    add_cbam(&mut params, "blk", 5, &cfg, &mut rng).unwrap();
    for (_, p) in params.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let x = Tensor::from_fn(vec![3, 5, 8, 8], |_| rng.gen_range(-2.0f32..2.0));
    let mut tape: Tape<f32> = Tape::new();
    let binding = Binding::from_params(&mut tape, &params, false);
    let xv = tape.constant(x.clone());
    let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
    let y = cbam_apply(&mut ctx, &binding, "blk", xv).unwrap();
    let out = tape.value(y);
    let mut worst_quarter = 0.0f32;
    for (o, i) in out.data().iter().zip(x.data()) {
        worst_quarter = worst_quarter.max((o - 0.25 * i).abs());
    }
    assert!(
        worst_quarter <= ATTENTION_ZERO_TOL,
        "zeroed attention output deviates from input/4 by {worst_quarter:e}"
    );

    let mut params = LayerParams::new();
    let mut rng = ChaCha12Rng::seed_from_u64(405);
    add_cbam(&mut params, "blk", 6, &cfg, &mut rng).unwrap();
    let x = Tensor::from_fn(vec![2, 6, 7, 7], |_| rng.gen_range(-2.0f32..2.0));
    let mut tape: Tape<f32> = Tape::new();
    let binding = Binding::from_params(&mut tape, &params, false);
    let xv = tape.constant(x);
    let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
    let mc = channel_attention(&mut ctx, &binding, "blk", xv).unwrap();
    let ms = spatial_attention(&mut ctx, &binding, "blk", xv).unwrap();
    for gate in [mc, ms] {
        for &g in tape.value(gate).data() {
            assert!(g > 0.0 && g < 1.0, "attention value {g} outside (0,1)");
        }
    }

    let mut shapes_checked = 0;
    let mut rng = ChaCha12Rng::seed_from_u64(406);
    for _ in 0..20 {
        let channels = rng.gen_range(1..=12);
        let cfg = CbamConfig {
            reduction_ratio: rng.gen_range(1..=8),
            spatial_kernel: [1, 3, 5, 7][rng.gen_range(0..4)],
        };
        let shape = vec![
            rng.gen_range(1..=3),
            channels,
            rng.gen_range(2..=9),
            rng.gen_range(2..=9),
        ];
        let mut params = LayerParams::new();
        add_cbam(&mut params, "blk", channels, &cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(shape.clone(), |_| rng.gen_range(-1.0f32..1.0));
        let mut tape: Tape<f32> = Tape::new();
        let binding = Binding::from_params(&mut tape, &params, false);
        let xv = tape.constant(x);
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let y = cbam_apply(&mut ctx, &binding, "blk", xv).unwrap();
        assert_eq!(tape.value(y).shape(), &shape[..]);
        shapes_checked += 1;
    }

    println!(
        "PASS attention laws: zeroed-gate dev {worst_quarter:.1e}, gates in (0,1), {shapes_checked} shape configs preserved"
    );
}

#[test]
fn imbalanced_training_recovers_minority_accuracy() {
    let start = Instant::now();
    let train_ds = synth_generate(&SynthSpec {
        class_counts: vec![1000, 500, 100, 50],
        image_size: 12,
        noise_std: 0.3,
        seed: 1,
    })
    .unwrap();
    let eval_ds = synth_generate(&SynthSpec {
        class_counts: vec![200, 200, 200, 200],
        image_size: 12,
        noise_std: 0.3,
        seed: 901,
    })
    .unwrap();
    let arch = BackboneConfig {
        stage_blocks: vec![1, 1, 1],
        base_channels: 6,
        input_size: 12,
        in_channels: 1,
        feature_dim: 24,
        num_classes: 4,
        cbam_on: true,
        classifier_bias: false,
        cbam: CbamConfig {
            reduction_ratio: 16,
            spatial_kernel: 7,
        },
    };

    let mut averages = Vec::new();
    for (mode, scheme) in [
        (LossMode::Ce, WeightScheme::None),
        (LossMode::Cucn, WeightScheme::InvFreq),
    ] {
        let (mut min_acc, mut gap, mut overall) = (0.0f64, 0.0f64, 0.0f64);
        for seed in [1, 2, 3] {
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 128,
                lr_backbone: 1e-4,
                lr_classifier: 5e-4,
                weight_decay: 1e-4,
                gamma: 0.9,
                seed,
                loss_mode: mode,
                weights_scheme: scheme.clone(),
                cbam_on: true,
                flip_prob: 0.0,
            };
            let dir = tempfile::tempdir().unwrap();
            let outcome = train(&cfg, &arch, &train_ds, &eval_ds, dir.path()).unwrap();
            let r = &outcome.final_report;
            println!(
                "  {mode} seed {seed}: overall {:.4} min {:.4} gap {:.4}",
                r.overall_acc, r.min_class_acc, r.acc_gap
            );
            min_acc += r.min_class_acc / 3.0;
            gap += r.acc_gap / 3.0;
            overall += r.overall_acc / 3.0;
        }
        averages.push((mode, min_acc, gap, overall));
    }
    let elapsed = start.elapsed();

    let (_, ce_min, ce_gap, ce_overall) = averages[0];
    let (_, cucn_min, cucn_gap, cucn_overall) = averages[1];
    assert!(
        cucn_min > ce_min,
        "weighted min-class acc {cucn_min:.4} not above unweighted {ce_min:.4}"
    );
    assert!(
        cucn_gap < ce_gap,
        "weighted accuracy gap {cucn_gap:.4} not below unweighted {ce_gap:.4}"
    );
    assert!(
        cucn_overall >= ce_overall - OVERALL_DROP_LIMIT,
        "weighted overall {cucn_overall:.4} fell more than {OVERALL_DROP_LIMIT} below {ce_overall:.4}"
    );
    assert!(
        elapsed < ABLATION_BUDGET,
        "ablation took {elapsed:?}, budget {ABLATION_BUDGET:?}"
    );
    println!(
        "PASS imbalance ablation: min {ce_min:.3}->{cucn_min:.3}, gap {ce_gap:.3}->{cucn_gap:.3}, overall {ce_overall:.3}->{cucn_overall:.3}, {elapsed:.0?}"
    );
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let train_ds = synth_generate(&SynthSpec {
        class_counts: vec![12, 6],
        image_size: 8,
        noise_std: 0.2,
        seed: 5,
    })
    .unwrap();
    let eval_ds = synth_generate(&SynthSpec {
        class_counts: vec![6, 6],
        image_size: 8,
        noise_std: 0.2,
        seed: 6,
    })
    .unwrap();
    let arch = BackboneConfig {
        stage_blocks: vec![1],
        base_channels: 4,
        input_size: 8,
        in_channels: 1,
        feature_dim: 8,
        num_classes: 2,
        cbam_on: true,
        classifier_bias: false,
        cbam: CbamConfig {
            reduction_ratio: 4,
            spatial_kernel: 3,
        },
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr_backbone: 1e-4,
        lr_classifier: 5e-4,
        weight_decay: 1e-4,
        gamma: 0.9,
        seed: 9,
        loss_mode: LossMode::Cucn,
        weights_scheme: WeightScheme::InvFreq,
        cbam_on: true,
        flip_prob: 0.3,
    };

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        train(&cfg, &arch, &train_ds, &eval_ds, dir.path()).unwrap();
    }
    for name in ["history.csv", "best.cuck", "final.cuck"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    println!("PASS determinism: history.csv, best.cuck, final.cuck byte-identical across reruns");
}

#[test]
fn formats_round_trip_byte_for_byte() {
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let mut tensors_checked = 0;
    for _ in 0..10 {
        let ndim = rng.gen_range(1..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=5)).collect();
        let numel: usize = shape.iter().product();

        let t32 = Tensor::<f32>::from_fn(shape.clone(), |_| rng.gen_range(-10.0..10.0));
        let bytes = cutn::encode(&t32).unwrap();
        let again = cutn::encode_any(&cutn::decode(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);

        let t64 = Tensor::<f64>::from_fn(shape.clone(), |_| rng.gen_range(-10.0..10.0));
        let bytes = cutn::encode(&t64).unwrap();
        let again = cutn::encode_any(&cutn::decode(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);

        let raw: Vec<u8> = (0..numel).map(|_| rng.gen()).collect();
        let bytes = cutn::encode_u8(&shape, &raw).unwrap();
        let again = cutn::encode_any(&cutn::decode(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
        tensors_checked += 3;
    }

    let mut entries = Vec::new();
    entries.push((
        "meta/arch".to_string(),
        AnyTensor::U8(RawU8 {
            shape: vec![9],
            data: b"unit-test".to_vec(),
        }),
    ));
    for i in 0..5 {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=6)).collect();
        entries.push((
            format!("layer{i}.weight"),
            AnyTensor::F32(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))),
        ));
    }
    let bytes = encode_entries(&entries).unwrap();
    let again = encode_entries(&decode_entries(&bytes).unwrap()).unwrap();
    assert_eq!(bytes, again, "checkpoint container changed across a round trip");

    let arch = BackboneConfig {
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
    let (params, descriptor) = build_backbone(&arch, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.cuck");
    let second = dir.path().join("b.cuck");
    save_checkpoint(&first, &params, &descriptor).unwrap();
    let (loaded, _, loaded_desc) = load_checkpoint(&first).unwrap();
    save_checkpoint(&second, &loaded, &loaded_desc).unwrap();
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
        "checkpoint differs after load and re-save"
    );

    let preds: Vec<usize> = (0..500).map(|_| rng.gen_range(0..4)).collect();
    let labels: Vec<usize> = (0..500).map(|_| rng.gen_range(0..4)).collect();
    let report = summarize(&confusion_matrix(&preds, &labels, 4).unwrap()).unwrap();
    let json = report_to_json(&report).unwrap();
    let back = report_from_json(&json).unwrap();
    assert_eq!(report, back, "metrics JSON did not round-trip");
    assert_eq!(json, report_to_json(&back).unwrap());

    println!(
        "PASS format round-trips: {tensors_checked} tensors, checkpoint container, saved checkpoint, metrics JSON"
    );
}

/// `1e-4 * 0.9^e` for e in 0..=60, computed with exact rational arithmetic
/// on the binary64 values of 1e-4 and 0.9, then rounded to nearest.
const LR_ORACLE_BITS: [u64; 61] = [
    0x3F1A36E2EB1C432D, 0x3F1797CC39FFD60F, 0x3F153BD1676640A7, 0x3F131C3C76A8D3CA,
    0x3F1133033797F1CF, 0x3F0EF56C30DE4CDC, 0x3F0BDCE15F2E7860, 0x3F091397A2769F8A,
    0x3F0691A212378F96, 0x3F044FDEA9FECE07, 0x3F0247E1FF655306, 0x3F0073E4FF74CAB9,
    0x3EFD9D68FF056CE7, 0x3EFAA744E584E203, 0x3EF7FCF134F79836, 0x3EF596D9161208FE,
    0x3EF36E29C7103B4B, 0x3EF17CBF3328355D, 0x3EEF7A24F5AEC674, 0x3EEC545476B6E5CF,
    0x3EE97F18D13E353B, 0x3EE6F26322B7FCB5, 0x3EE4A6F2D2726370, 0x3EE29640F09A264B,
    0x3EE0BA6DA55788DD, 0x3EDE1C5EF66A5CC2, 0x3EDB1988AA92ED15, 0x3ED863C7CCB76EFA,
    0x3ED5F367050B7D7A, 0x3ED3C17651572422, 0x3ED1C7B74934D3B8, 0x3ED0008B5B7C5826,
    0x3ECCCDC7A4AC9EAA, 0x3EC9EC66E101C200, 0x3EC754C2FDB4C833, 0x3EC4FF7C4ABC4DC8,
    0x3EC2E5EFDCDCAC67, 0x3EC10224AD2D0190, 0x3EBE9D7537B76937, 0x3EBB8DB64BBEAB7E,
    0x3EB8CC57442B9A58, 0x3EB65181BD5A7150, 0x3EB41627F737CC61, 0x3EB213F0C4E56B25,
    0x3EB045257E01AD3B, 0x3EAD49437C696B03, 0x3EAA5B8989921383, 0x3EA7B8C89569DE5D,
    0x3EA559815345AE87, 0x3EA336F4648B8379, 0x3EA14B0F274A5CBA, 0x3E9F20B4E052A6E9,
    0x3E9C03D5FD172FD2, 0x3E9936A6FD61AB0A, 0x3E96B12FE40B19F0, 0x3E946C44B3A39758,
    0x3E92617108133B69, 0x3E908AE5BA77B578, 0x3E8DC6D0B60AAD0B, 0x3E8ACC88A3D6688A,
    0x3E881E7AF9DA9149,
];

#[test]
fn lr_schedule_matches_the_exact_decay_curve() {
    let mut worst = 0.0f64;
    for (epoch, &bits) in LR_ORACLE_BITS.iter().enumerate() {
        let want = f64::from_bits(bits);
        let got = lr_at_epoch(1e-4, 0.9, epoch);
        let rel = ((got - want) / want).abs();
        assert!(
            rel <= LR_REL_TOL,
            "epoch {epoch}: lr {got:e} vs {want:e}, rel err {rel:e}"
        );
        worst = worst.max(rel);
    }
    println!("PASS lr schedule: 61 epochs within {LR_REL_TOL:e} relative, worst {worst:.1e}");
}

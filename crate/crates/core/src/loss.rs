//! Class weighting, weighted cross-entropy, uncertainty-driven feature
//! mixing, and the paired loss that scores a mixed feature against both of
//! its source labels.

use crate::backbone::{classify, FeatureBundle};
use crate::error::{Error, Result};
use crate::nn::{Binding, FwdCtx};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Element;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Guards the mixing denominator; small against any attainable uncertainty.
pub const MIX_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            w: vec![1.0; classes],
        }
    }

    pub fn manual(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Config("class weights must be non-empty".into()));
        }
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be positive and finite, got {bad}"
            )));
        }
        Ok(ClassWeights { w })
    }

    /// `none` gives unit weights; `inv-freq` gives `total / (C * count_c)`,
    /// so rare classes get weights above 1.
    pub fn from_counts(counts: &[usize], scheme: &WeightScheme) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("class counts must be non-empty".into()));
        }
        match scheme {
            WeightScheme::None => Ok(Self::uniform(counts.len())),
            WeightScheme::InvFreq => {
                if let Some(pos) = counts.iter().position(|&c| c == 0) {
                    return Err(Error::Config(format!(
                        "inv-freq weights need every class populated; class {pos} has 0 samples"
                    )));
                }
                let total: usize = counts.iter().sum();
                let c = counts.len() as f64;
                Ok(ClassWeights {
                    w: counts
                        .iter()
                        .map(|&n| total as f64 / (c * n as f64))
                        .collect(),
                })
            }
            WeightScheme::Manual(w) => {
                if w.len() != counts.len() {
                    return Err(Error::Config(format!(
                        "manual weights have {} entries for {} classes",
                        w.len(),
                        counts.len()
                    )));
                }
                Self::manual(w.clone())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.w.get(class).copied()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::manual(self.w.iter().map(|v| v * k).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightScheme {
    None,
    InvFreq,
    Manual(Vec<f64>),
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WeightScheme::None),
            "inv-freq" => Ok(WeightScheme::InvFreq),
            _ => {
                if let Some(list) = s.strip_prefix("manual:") {
                    let w = list
                        .split(',')
                        .map(|v| {
                            v.trim().parse::<f64>().map_err(|_| {
                                Error::Config(format!("bad weight entry {v:?} in {s:?}"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ClassWeights::manual(w.clone())?;
                    Ok(WeightScheme::Manual(w))
                } else {
                    Err(Error::Config(format!(
                        "weights scheme must be none, inv-freq, or manual:<list>, got {s:?}"
                    )))
                }
            }
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::None => write!(f, "none"),
            WeightScheme::InvFreq => write!(f, "inv-freq"),
            WeightScheme::Manual(w) => {
                write!(f, "manual:")?;
                for (i, v) in w.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Plain cross-entropy on unmixed features.
    Ce,
    /// Class-weighted cross-entropy on unmixed features.
    Wce,
    /// Unweighted paired loss on mixed features.
    Mix,
    /// Class-weighted paired loss on mixed features: the full method.
    Cucn,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "wce" => Ok(LossMode::Wce),
            "mix" => Ok(LossMode::Mix),
            "cucn" => Ok(LossMode::Cucn),
            _ => Err(Error::Config(format!(
                "loss mode must be ce, wce, mix, or cucn, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossMode::Ce => "ce",
            LossMode::Wce => "wce",
            LossMode::Mix => "mix",
            LossMode::Cucn => "cucn",
        };
        write!(f, "{s}")
    }
}

fn per_sample_weights<T: Element>(
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<Vec<T>> {
    labels
        .iter()
        .map(|&y| {
            weights
                .get(y)
                .map(T::from_f64)
                .ok_or(Error::LabelRange {
                    label: y,
                    classes: weights.len(),
                })
        })
        .collect()
}

/// `-(1/N) sum_n w_{y_n} log_softmax(logits)[n, y_n]`.
pub fn weighted_ce<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<Var> {
    let c = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    if c != weights.len() {
        return Err(Error::shape(
            "weighted_ce",
            format!("{c} logit columns vs {} class weights", weights.len()),
        ));
    }
    let w = per_sample_weights::<T>(labels, weights)?;
    let lp = tape.log_softmax(logits)?;
    tape.nll_pick_mean(lp, labels, &w)
}

/// Uniformly random pairing of batch indices; fixed points allowed.
pub fn pair_permutation(batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..batch_size).collect();
    for i in (1..batch_size).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// A batch of features mixed pairwise, with both source label vectors.
pub struct MixedBatch {
    pub perm: Vec<usize>,
    pub mixed: Var,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
}

/// Blends each sample with its partner `perm[i]`, elementwise:
/// `(u_i*f_i + u_j*f_j) / (u_i + u_j + eps)`. Higher-uncertainty samples
/// contribute the larger share of the blend.
pub fn mix_features<T: Element>(
    tape: &mut Tape<T>,
    bundle: &FeatureBundle,
    labels: &[usize],
    perm: &[usize],
) -> Result<MixedBatch> {
    let n = tape.value(bundle.features).shape()[0];
    if labels.len() != n {
        return Err(Error::shape(
            "mix_features",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if perm.len() != n {
        return Err(Error::Graph(format!(
            "permutation length {} does not match batch {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &j in perm {
        if j >= n || seen[j] {
            return Err(Error::Graph(format!(
                "pairing is not a permutation of 0..{n}"
            )));
        }
        seen[j] = true;
    }
    if tape
        .value(bundle.uncertainty)
        .data()
        .iter()
        .any(|&v| v <= T::ZERO)
    {
        return Err(Error::Graph(
            "mix_features: uncertainty must be strictly positive".into(),
        ));
    }
    let f_j = tape.gather_rows(bundle.features, perm)?;
    let u_j = tape.gather_rows(bundle.uncertainty, perm)?;
    let a = tape.mul(bundle.uncertainty, bundle.features)?;
    let b = tape.mul(u_j, f_j)?;
    let num = tape.add(a, b)?;
    let den = tape.add(bundle.uncertainty, u_j)?;
    let den = tape.add_scalar(den, T::from_f64(MIX_EPS))?;
    let mixed = tape.div(num, den)?;
    let labels_b = perm.iter().map(|&j| labels[j]).collect();
    Ok(MixedBatch {
        perm: perm.to_vec(),
        mixed,
        labels_a: labels.to_vec(),
        labels_b,
    })
}

/// `-(1/N) sum_n [ w_{a_n} lp[n, a_n] + w_{b_n} lp[n, b_n] ]` over one
/// shared log-softmax of the mixed logits.
pub fn addup_loss<T: Element>(
    tape: &mut Tape<T>,
    logits_mixed: Var,
    labels_a: &[usize],
    labels_b: &[usize],
    weights: &ClassWeights,
) -> Result<Var> {
    let c = tape.value(logits_mixed).shape().get(1).copied().unwrap_or(0);
    if c != weights.len() {
        return Err(Error::shape(
            "addup_loss",
            format!("{c} logit columns vs {} class weights", weights.len()),
        ));
    }
    let wa = per_sample_weights::<T>(labels_a, weights)?;
    let wb = per_sample_weights::<T>(labels_b, weights)?;
    let lp = tape.log_softmax(logits_mixed)?;
    let la = tape.nll_pick_mean(lp, labels_a, &wa)?;
    let lb = tape.nll_pick_mean(lp, labels_b, &wb)?;
    tape.add(la, lb)
}

pub struct TrainingLoss {
    pub loss: Var,
    pub mixed: Option<MixedBatch>,
}

/// The four training objectives. `ce`/`wce` score unmixed features; `mix`/
/// `cucn` draw a pairing from `rng`, blend, and score against both labels.
/// Class weights apply only in `wce` and `cucn`.
pub fn training_loss<T: Element>(
    ctx: &mut FwdCtx<T>,
    binding: &Binding,
    bundle: &FeatureBundle,
    labels: &[usize],
    weights: &ClassWeights,
    mode: LossMode,
    rng: &mut impl Rng,
) -> Result<TrainingLoss> {
    let unit = ClassWeights::uniform(weights.len());
    match mode {
        LossMode::Ce | LossMode::Wce => {
            let logits = classify(ctx, binding, bundle.features)?;
            let w = if mode == LossMode::Ce { &unit } else { weights };
            let loss = weighted_ce(ctx.tape, logits, labels, w)?;
            Ok(TrainingLoss { loss, mixed: None })
        }
        LossMode::Mix | LossMode::Cucn => {
            let n = ctx.tape.value(bundle.features).shape()[0];
            let perm = pair_permutation(n, rng);
            let mixed = mix_features(ctx.tape, bundle, labels, &perm)?;
            let logits = classify(ctx, binding, mixed.mixed)?;
            let w = if mode == LossMode::Mix { &unit } else { weights };
            let loss = addup_loss(ctx.tape, logits, &mixed.labels_a, &mixed.labels_b, w)?;
            Ok(TrainingLoss {
                loss,
                mixed: Some(mixed),
            })
        }
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, hinge_loss, predict, MilParams};
use crate::bagstore::{Bag, FirLabel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::MetricReport;
use crate::optim::{Hyperparams, OptState};

/// A bag's embeddings in training precision, with its label.
#[derive(Clone, Debug)]
pub struct LabeledBag {
    pub x: Matrix,
    pub label: FirLabel,
}

impl LabeledBag {
    pub fn from_bag(bag: &Bag) -> Result<Self> {
        let label = bag.label.ok_or_else(|| Error::invalid(format!("bag {} has no label", bag.slide_id)))?;
        Ok(Self { x: bag.to_matrix(), label })
    }
}

/// Inverse class frequency, rescaled so the present classes average 1.
/// Classes with no samples get weight 1.
pub fn class_weights(labels: &[FirLabel], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for l in labels {
        counts[l.index()] += 1;
    }
    let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; n_classes];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.into_iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
}

/// One pass over `bags` in a seeded random order, one optimizer step per
/// bag. Returns the mean of the per-bag losses seen during the pass.
pub fn train_epoch(
    params: &mut MilParams,
    state: &mut OptState<MilParams>,
    bags: &[LabeledBag],
    hp: &Hyperparams,
    class_weights: &[f64],
    seed: u64,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::invalid("empty training list"));
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for i in order {
        let bag = &bags[i];
        let trace = forward(params, &bag.x)?;
        total += hinge_loss(&trace.scores, bag.label, class_weights)?;
        let grads = backward(params, &trace, bag.label, class_weights)?;
        state.step(params, &grads, hp)?;
        if hp.ema_enabled {
            state.ema_update(params, hp)?;
        }
    }
    Ok(total / bags.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub probabilities: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
    pub report: MetricReport,
}

pub fn evaluate(params: &MilParams, bags: &[LabeledBag]) -> Result<Evaluation> {
    let probabilities = bags.iter().map(|b| predict(params, &b.x).map(|r| r.probabilities)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = bags.iter().map(|b| b.label.index()).collect();
    let report = MetricReport::from_probabilities(&probabilities, &truth, params.arch.n_classes)?;
    Ok(Evaluation { probabilities, truth, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::{generate_synthetic, SynthSpec};
    use crate::milnet::ArchConfig;
    use crate::optim::{Algorithm, ParamTensors};

    fn small_data(noise: f64) -> Vec<LabeledBag> {
        let spec = SynthSpec { n_bags_per_class: 8, noise_sigma: noise, ..SynthSpec::default() };
        generate_synthetic(&spec).unwrap().bags.iter().map(|b| LabeledBag::from_bag(b).unwrap()).collect()
    }

    fn arch() -> ArchConfig {
        ArchConfig { hidden_dim: 32, gate_dim: 16, attn_hidden: 8, ..ArchConfig::new(16) }
    }

    #[test]
    fn class_weights_are_inverse_frequency_with_unit_mean() {
        let labels = [FirLabel::Fir0, FirLabel::Fir0, FirLabel::Fir0, FirLabel::Fir1];
        let w = class_weights(&labels, 3);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let bags = small_data(1.0);
        let p0 = MilParams::init(&arch(), 1).unwrap();
        let mut p = p0.clone();
        let hp = Hyperparams::with_algorithm(Algorithm::Adam, 0.0);
        let mut st = OptState::new(&p, &hp);
        let loss = train_epoch(&mut p, &mut st, &bags, &hp, &[1.0; 3], 3).unwrap();
        assert!(loss > 0.0);
        assert_eq!(p, p0);
        assert_eq!(st.step, bags.len() as u64);
    }

    #[test]
    fn training_is_deterministic() {
        let bags = small_data(1.0);
        let hp = Hyperparams { ema_enabled: true, ..Hyperparams::with_algorithm(Algorithm::Rmsprop, 1e-3) };
        let run = || {
            let mut p = MilParams::init(&arch(), 2).unwrap();
            let mut st = OptState::new(&p, &hp);
            let l = train_epoch(&mut p, &mut st, &bags, &hp, &[1.0; 3], 42).unwrap();
            (p, st.ema.clone(), l)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_training_list_is_an_error() {
        let mut p = MilParams::init(&arch(), 0).unwrap();
        let hp = Hyperparams::default();
        let mut st = OptState::new(&p, &hp);
        assert!(train_epoch(&mut p, &mut st, &[], &hp, &[1.0; 3], 0).is_err());
    }

    #[test]
    fn ema_shadow_does_not_touch_training() {
        let bags = small_data(1.0);
        let base = Hyperparams::with_algorithm(Algorithm::Sgd, 1e-3);
        let with_ema = Hyperparams { ema_enabled: true, ema_momentum: 0.9, ..base.clone() };
        let mut a = MilParams::init(&arch(), 5).unwrap();
        let mut b = a.clone();
        let mut sa = OptState::new(&a, &base);
        let mut sb = OptState::new(&b, &with_ema);
        train_epoch(&mut a, &mut sa, &bags, &base, &[1.0; 3], 1).unwrap();
        train_epoch(&mut b, &mut sb, &bags, &with_ema, &[1.0; 3], 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(sb.ema.as_ref().unwrap(), &b);
        assert!(sb.ema.as_ref().unwrap().len() == b.len());
    }
}

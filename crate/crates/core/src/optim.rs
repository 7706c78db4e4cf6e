//! SGD (heavy-ball), Adam, RMSprop and Adagrad, multiplicative per-epoch
//! learning-rate decay, and an exponential moving average of the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed list of named flat tensors the optimizers can walk in lockstep.
pub trait ParamTensors: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn tensor_names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A single unnamed tensor, handy for toy problems.
impl ParamTensors for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }

    fn tensor_names(&self) -> Vec<String> {
        vec!["theta".to_string()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
    Rmsprop,
    Adagrad,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Sgd, Algorithm::Adam, Algorithm::Rmsprop, Algorithm::Adagrad];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Adam => "adam",
            Algorithm::Rmsprop => "rmsprop",
            Algorithm::Adagrad => "adagrad",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown optimizer {s:?}")))
    }
}

/// One point of the hyperparameter search space. Only the fields the chosen
/// algorithm uses have any effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rms_decay: f64,
    pub epsilon: f64,
    pub ema_enabled: bool,
    pub ema_momentum: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            rms_decay: 0.9,
            epsilon: 1e-8,
            ema_enabled: false,
            ema_momentum: 0.99,
        }
    }
}

impl Hyperparams {
    pub fn with_algorithm(algorithm: Algorithm, learning_rate: f64) -> Self {
        Self { algorithm, learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::invalid(what.to_string())) };
        check(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be finite and >= 0")?;
        check((0.0..=1.0).contains(&self.lr_decay) && self.lr_decay > 0.0, "lr_decay must lie in (0, 1]")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.rms_decay), "rms_decay must lie in [0, 1)")?;
        check(self.epsilon >= 0.0, "epsilon must be >= 0")?;
        check((0.0..=1.0).contains(&self.ema_momentum), "ema_momentum must lie in [0, 1]")
    }
}

/// Closed interval; `log_scale` samples log-uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub log_scale: bool,
}

impl Range {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high, log_scale: false }
    }

    pub fn log(low: f64, high: f64) -> Self {
        Self { low, high, log_scale: true }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low >= self.high {
            return self.low;
        }
        if self.log_scale {
            rng.random_range(self.low.ln()..=self.high.ln()).exp()
        } else {
            rng.random_range(self.low..=self.high)
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }
}

/// Bounds the population samples from and perturbations are clamped to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub algorithms: Vec<Algorithm>,
    pub learning_rate: Range,
    pub lr_decay: Range,
    pub momentum: Range,
    pub beta1: Range,
    pub beta2: Range,
    pub ema_momentum: Range,
    /// Whether members may use EMA at all.
    pub allow_ema: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            learning_rate: Range::log(1e-5, 1e-2),
            lr_decay: Range::new(0.9, 1.0),
            momentum: Range::new(0.0, 0.99),
            beta1: Range::new(0.85, 0.99),
            beta2: Range::new(0.99, 0.9999),
            ema_momentum: Range::new(0.9, 0.999),
            allow_ema: true,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::invalid("search space has no optimizers"));
        }
        for (name, r) in [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_momentum", self.ema_momentum),
        ] {
            if !(r.low <= r.high) || (r.log_scale && r.low <= 0.0) {
                return Err(Error::invalid(format!("bad {name} range {:?}", r)));
            }
        }
        Ok(())
    }

    /// Categorical fields uniformly, continuous fields per their `Range`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Hyperparams {
        let algorithm = self.algorithms[rng.random_range(0..self.algorithms.len())];
        Hyperparams {
            algorithm,
            learning_rate: self.learning_rate.sample(rng),
            lr_decay: self.lr_decay.sample(rng),
            momentum: self.momentum.sample(rng),
            beta1: self.beta1.sample(rng),
            beta2: self.beta2.sample(rng),
            rms_decay: 0.9,
            epsilon: 1e-8,
            ema_enabled: self.allow_ema && rng.random_bool(0.5),
            ema_momentum: self.ema_momentum.sample(rng),
        }
    }
}

/// Accumulators for one optimizer over parameters shaped like `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<P> {
    pub algorithm: Algorithm,
    /// SGD velocity, Adam first moment.
    pub first: Option<P>,
    /// Adam second moment, RMSprop/Adagrad squared-gradient accumulator.
    pub second: Option<P>,
    pub step: u64,
    pub lr: f64,
    pub ema: Option<P>,
}

impl<P: ParamTensors> OptState<P> {
    pub fn new(params: &P, hp: &Hyperparams) -> Self {
        let (first, second) = match hp.algorithm {
            Algorithm::Sgd => (Some(params.zeros_like()), None),
            Algorithm::Adam => (Some(params.zeros_like()), Some(params.zeros_like())),
            Algorithm::Rmsprop | Algorithm::Adagrad => (None, Some(params.zeros_like())),
        };
        Self {
            algorithm: hp.algorithm,
            first,
            second,
            step: 0,
            lr: hp.learning_rate,
            ema: hp.ema_enabled.then(|| params.clone()),
        }
    }

    /// Parameters to evaluate with: the EMA shadow when present.
    pub fn eval_params<'a>(&'a self, params: &'a P) -> &'a P {
        self.ema.as_ref().unwrap_or(params)
    }

    /// One update of `params` from `grads`.
    pub fn step(&mut self, params: &mut P, grads: &P, hp: &Hyperparams) -> Result<()> {
        if hp.algorithm != self.algorithm {
            return Err(Error::invalid(format!(
                "optimizer state is {} but hyperparameters ask for {}",
                self.algorithm.name(),
                hp.algorithm.name()
            )));
        }
        for (name, g) in grads.tensor_names().into_iter().zip(grads.tensors()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let lr = self.lr;
        let eps = hp.epsilon;
        let g_all = grads.tensors();
        match hp.algorithm {
            Algorithm::Sgd => {
                let vel = self.first.as_mut().expect("sgd velocity");
                for ((p, v), g) in params.tensors_mut().into_iter().zip(vel.tensors_mut()).zip(g_all) {
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = hp.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            Algorithm::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - hp.beta1.powi(t);
                let bc2 = 1.0 - hp.beta2.powi(t);
                let m_all = self.first.as_mut().expect("adam m").tensors_mut();
                let v_all = self.second.as_mut().expect("adam v").tensors_mut();
                for (((p, m), v), g) in params.tensors_mut().into_iter().zip(m_all).zip(v_all).zip(g_all) {
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            Algorithm::Rmsprop | Algorithm::Adagrad => {
                let rho = hp.rms_decay;
                let adagrad = hp.algorithm == Algorithm::Adagrad;
                let acc_all = self.second.as_mut().expect("accumulator").tensors_mut();
                for ((p, a), g) in params.tensors_mut().into_iter().zip(acc_all).zip(g_all) {
                    for ((p, a), g) in p.iter_mut().zip(a.iter_mut()).zip(g) {
                        *a = if adagrad { *a + g * g } else { rho * *a + (1.0 - rho) * g * g };
                        *p -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// End-of-epoch multiplicative decay.
    pub fn decay_lr(&mut self, hp: &Hyperparams) {
        self.lr *= hp.lr_decay;
    }

    /// `shadow <- m * shadow + (1 - m) * params`.
    pub fn ema_update(&mut self, params: &P, hp: &Hyperparams) -> Result<()> {
        if !hp.ema_enabled {
            return Err(Error::invalid("ema_update called with EMA disabled"));
        }
        let shadow = self.ema.get_or_insert_with(|| params.clone());
        let m = hp.ema_momentum;
        for (s, p) in shadow.tensors_mut().into_iter().zip(params.tensors()) {
            for (s, p) in s.iter_mut().zip(p) {
                *s = m * *s + (1.0 - m) * p;
            }
        }
        Ok(())
    }
}

//! Population-based training over the attention network.
//!
//! Every member trains one epoch at a time on its own sampled
//! hyperparameters. After the minimum number of epochs, and then every
//! `exploit_interval_epochs`, the bottom quantile of the population (by
//! validation balanced accuracy) copies weights, optimizer state and
//! hyperparameters from a random member of the top quantile and perturbs
//! the copied hyperparameters.
//!
//! Members only share the read-only dataset, so epochs run in parallel on
//! the ambient rayon pool. Each member draws from its own seeded stream,
//! which makes the outcome independent of the thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milnet::{
    class_weights, evaluate, train_epoch, write_checkpoint, ArchConfig, Checkpoint, CheckpointHeader, LabeledBag,
    MilParams,
};
use crate::optim::{Algorithm, Hyperparams, OptState, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PbtConfig {
    pub population_size: usize,
    pub min_epochs_before_exploit: usize,
    pub exploit_interval_epochs: usize,
    pub total_epochs: usize,
    /// Share of the population in each of the top and bottom groups.
    /// Zero disables exploitation entirely.
    pub truncation_fraction: f64,
    pub perturb_factors: [f64; 2],
    pub resample_probability: f64,
    pub seed: u64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            min_epochs_before_exploit: 15,
            exploit_interval_epochs: 5,
            total_epochs: 30,
            truncation_fraction: 0.25,
            perturb_factors: [0.8, 1.2],
            resample_probability: 0.25,
            seed: 0,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::invalid("population_size must be at least 2"));
        }
        if !(0.0..=0.5).contains(&self.truncation_fraction) {
            return Err(Error::invalid("truncation_fraction must lie in [0, 0.5]"));
        }
        if self.exploit_interval_epochs == 0 {
            return Err(Error::invalid("exploit_interval_epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.resample_probability) {
            return Err(Error::invalid("resample_probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Size of the top and bottom groups: `ceil(fraction * P)`.
    pub fn quantile_size(&self) -> usize {
        (self.truncation_fraction * self.population_size as f64).ceil() as usize
    }

    fn exploits_after(&self, epoch: usize) -> bool {
        self.truncation_fraction > 0.0
            && epoch >= self.min_epochs_before_exploit
            && (epoch - self.min_epochs_before_exploit).is_multiple_of(self.exploit_interval_epochs)
            && epoch < self.total_epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub epoch: usize,
    pub receiver: u32,
    pub donor: u32,
}

/// Best validation snapshot of one member (evaluation weights).
#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub params: MilParams,
    pub hyperparams: Hyperparams,
}

#[derive(Clone, Debug)]
pub struct PopulationMember {
    pub member_id: u32,
    /// Root of this member's private random stream (epoch shuffles).
    pub seed: u64,
    pub params: MilParams,
    pub opt: OptState<MilParams>,
    pub hyperparams: Hyperparams,
    pub epoch: usize,
    pub metric: Option<f64>,
    pub auroc: Option<f64>,
    pub best: Option<BestState>,
    pub lineage: Vec<LineageEvent>,
}

impl PopulationMember {
    pub fn new(member_id: u32, seed: u64, params: MilParams, hyperparams: Hyperparams) -> Self {
        let opt = OptState::new(&params, &hyperparams);
        Self {
            member_id,
            seed,
            params,
            opt,
            hyperparams,
            epoch: 0,
            metric: None,
            auroc: None,
            best: None,
            lineage: Vec::new(),
        }
    }
}

/// Independently sampled hyperparameters and weight seeds per member.
pub fn init_population(
    config: &PbtConfig,
    arch: &ArchConfig,
    space: &SearchSpace,
    seed: u64,
) -> Result<Vec<PopulationMember>> {
    config.validate()?;
    space.validate()?;
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.population_size)
        .map(|id| {
            let hp = space.sample(&mut rng);
            let init_seed: u64 = rng.random();
            let stream: u64 = rng.random();
            Ok(PopulationMember::new(id as u32, stream, MilParams::init(arch, init_seed)?, hp))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemberScore {
    pub member_id: u32,
    pub metric: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyPlan {
    pub receiver: u32,
    pub donor: u32,
}

/// Truncation selection. Members are ranked by metric (descending, ties to
/// the lower id); each of the bottom `ceil(f·P)` copies from a uniformly
/// chosen member of the top `ceil(f·P)`.
pub fn exploit<R: Rng + ?Sized>(scores: &[MemberScore], config: &PbtConfig, rng: &mut R) -> Result<Vec<CopyPlan>> {
    if scores.len() < 2 {
        return Err(Error::invalid("exploit needs a population of at least 2"));
    }
    if let Some(s) = scores.iter().find(|s| s.epochs < config.min_epochs_before_exploit) {
        return Err(Error::invalid(format!(
            "member {} has trained {} epochs, fewer than the minimum {}",
            s.member_id, s.epochs, config.min_epochs_before_exploit
        )));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.metric.total_cmp(&a.metric).then(a.member_id.cmp(&b.member_id)));
    let q = ((config.truncation_fraction * scores.len() as f64).ceil() as usize).min(scores.len() / 2);
    let top = &ranked[..q];
    Ok(ranked[ranked.len() - q..]
        .iter()
        .map(|r| CopyPlan { receiver: r.member_id, donor: top[rng.random_range(0..q)].member_id })
        .collect())
}

/// Multiplies each continuous field by one of the perturb factors (clamped
/// to the search space), resamples the optimizer and flips EMA use, each
/// with `resample_probability`.
pub fn explore<R: Rng + ?Sized>(hp: &Hyperparams, space: &SearchSpace, config: &PbtConfig, rng: &mut R) -> Hyperparams {
    let mut out = hp.clone();
    let [lo, hi] = config.perturb_factors;
    let mut perturb = |v: f64, range: crate::optim::Range| range.clamp(v * if rng.random_bool(0.5) { lo } else { hi });
    out.learning_rate = perturb(hp.learning_rate, space.learning_rate);
    out.lr_decay = perturb(hp.lr_decay, space.lr_decay);
    out.momentum = perturb(hp.momentum, space.momentum);
    out.beta1 = perturb(hp.beta1, space.beta1);
    out.beta2 = perturb(hp.beta2, space.beta2);
    out.ema_momentum = perturb(hp.ema_momentum, space.ema_momentum);
    if rng.random_bool(config.resample_probability) {
        out.algorithm = space.algorithms[rng.random_range(0..space.algorithms.len())];
    }
    if space.allow_ema && rng.random_bool(config.resample_probability) {
        out.ema_enabled = !out.ema_enabled;
    }
    out
}

/// One CSV row: a member's state after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PbtRow {
    pub member_id: u32,
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub algorithm: Algorithm,
    pub val_balanced_accuracy: f64,
    pub exploited_from: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub member_id: u32,
    pub best_balanced_accuracy: f64,
    pub best_auroc: Option<f64>,
    pub best_epoch: usize,
    /// Relative to the report directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PbtReport {
    pub config: PbtConfig,
    pub rows: Vec<PbtRow>,
    pub ranking: Vec<RankEntry>,
    pub lineage: Vec<LineageEvent>,
}

impl PbtReport {
    pub fn best(&self) -> Option<&RankEntry> {
        self.ranking.first()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["member_id", "epoch", "lr", "algorithm", "val_balanced_accuracy", "exploited_from"])?;
        for r in &self.rows {
            w.write_record([
                r.member_id.to_string(),
                r.epoch.to_string(),
                format!("{:e}", r.lr),
                r.algorithm.name().to_string(),
                format!("{}", r.val_balanced_accuracy),
                r.exploited_from.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join("summary.json"))?)?)
    }
}

#[derive(Debug)]
pub struct PbtOutcome {
    pub report: PbtReport,
    pub members: Vec<PopulationMember>,
}

/// Training and validation bags for a run.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Vec<LabeledBag>,
    pub val: Vec<LabeledBag>,
}

impl TrainingData {
    pub fn class_weights(&self, n_classes: usize) -> Vec<f64> {
        let labels: Vec<_> = self.train.iter().map(|b| b.label).collect();
        class_weights(&labels, n_classes)
    }
}

fn epoch_seed(stream: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = stream ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn checkpoint_name(member_id: u32) -> PathBuf {
    PathBuf::from("checkpoints").join(format!("member_{member_id:03}.milc"))
}

/// Trains one epoch, decays the learning rate, evaluates on validation and
/// refreshes the best snapshot (and its checkpoint when `out_dir` is set).
fn advance_member(
    m: &mut PopulationMember,
    data: &TrainingData,
    weights: &[f64],
    out_dir: Option<&Path>,
) -> Result<PbtRow> {
    let lr = m.opt.lr;
    let seed = epoch_seed(m.seed, m.epoch + 1);
    train_epoch(&mut m.params, &mut m.opt, &data.train, &m.hyperparams, weights, seed)?;
    m.opt.decay_lr(&m.hyperparams);
    m.epoch += 1;
    let eval_params = m.opt.eval_params(&m.params);
    let ev = evaluate(eval_params, &data.val)?;
    let metric = ev.report.balanced_accuracy;
    m.metric = Some(metric);
    m.auroc = ev.report.macro_auroc;
    if m.best.as_ref().is_none_or(|b| metric > b.balanced_accuracy) {
        let best = BestState {
            epoch: m.epoch,
            balanced_accuracy: metric,
            auroc: m.auroc,
            params: eval_params.clone(),
            hyperparams: m.hyperparams.clone(),
        };
        if let Some(dir) = out_dir {
            let ckpt = Checkpoint {
                header: CheckpointHeader {
                    arch: best.params.arch.clone(),
                    hyperparams: Some(best.hyperparams.clone()),
                    epoch: best.epoch as u32,
                    val_balanced_accuracy: Some(best.balanced_accuracy),
                    val_auroc: best.auroc,
                    member_id: Some(m.member_id),
                },
                params: best.params.clone(),
            };
            write_checkpoint(&ckpt, dir.join(checkpoint_name(m.member_id)))?;
        }
        m.best = Some(best);
    }
    Ok(PbtRow {
        member_id: m.member_id,
        epoch: m.epoch,
        lr,
        algorithm: m.hyperparams.algorithm,
        val_balanced_accuracy: metric,
        exploited_from: None,
    })
}

/// Copies `donor` into `receiver`, then explores the copied hyperparameters.
fn apply_copy<R: Rng + ?Sized>(
    receiver: &mut PopulationMember,
    donor: &PopulationMember,
    space: &SearchSpace,
    config: &PbtConfig,
    rng: &mut R,
) {
    let new_hp = explore(&donor.hyperparams, space, config, rng);
    receiver.params = donor.params.clone();
    receiver.opt = donor.opt.clone();
    if donor.hyperparams.learning_rate > 0.0 {
        receiver.opt.lr = donor.opt.lr * new_hp.learning_rate / donor.hyperparams.learning_rate;
    }
    if new_hp.algorithm != donor.hyperparams.algorithm {
        let lr = receiver.opt.lr;
        let ema = receiver.opt.ema.take();
        receiver.opt = OptState::new(&receiver.params, &new_hp);
        receiver.opt.lr = lr;
        receiver.opt.ema = ema;
    }
    match (new_hp.ema_enabled, receiver.opt.ema.is_some()) {
        (true, false) => receiver.opt.ema = Some(receiver.params.clone()),
        (false, true) => receiver.opt.ema = None,
        _ => {}
    }
    receiver.hyperparams = new_hp;
}

fn finish(config: &PbtConfig, rows: Vec<PbtRow>, members: &[PopulationMember], with_checkpoints: bool) -> PbtReport {
    let mut ranking: Vec<RankEntry> = members
        .iter()
        .filter_map(|m| {
            m.best.as_ref().map(|b| RankEntry {
                member_id: m.member_id,
                best_balanced_accuracy: b.balanced_accuracy,
                best_auroc: b.auroc,
                best_epoch: b.epoch,
                checkpoint: with_checkpoints.then(|| checkpoint_name(m.member_id)),
            })
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.best_balanced_accuracy.total_cmp(&a.best_balanced_accuracy).then(a.member_id.cmp(&b.member_id))
    });
    let mut lineage: Vec<LineageEvent> = members.iter().flat_map(|m| m.lineage.iter().cloned()).collect();
    lineage.sort_by_key(|e| (e.epoch, e.receiver));
    PbtReport { config: config.clone(), rows, ranking, lineage }
}

fn prepare_out_dir(out_dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    Ok(())
}

/// Runs the PBT loop on an existing population.
pub fn run_population(
    config: &PbtConfig,
    space: &SearchSpace,
    mut members: Vec<PopulationMember>,
    data: &TrainingData,
    out_dir: Option<&Path>,
) -> Result<PbtOutcome> {
    config.validate()?;
    if members.len() != config.population_size {
        return Err(Error::invalid(format!(
            "population has {} members, config expects {}",
            members.len(),
            config.population_size
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("PBT needs non-empty train and val splits"));
    }
    prepare_out_dir(out_dir)?;
    let n_classes = members[0].params.arch.n_classes;
    let weights = data.class_weights(n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5E_ED0F_E7B1_0175);
    let mut rows = Vec::with_capacity(config.population_size * config.total_epochs);

    for epoch in 1..=config.total_epochs {
        let mut epoch_rows = members
            .par_iter_mut()
            .map(|m| advance_member(m, data, &weights, out_dir).map_err(|e| Error::member(m.member_id.to_string(), e)))
            .collect::<Result<Vec<_>>>()?;

        if config.exploits_after(epoch) {
            let scores: Vec<MemberScore> = members
                .iter()
                .map(|m| MemberScore { member_id: m.member_id, metric: m.metric.unwrap_or(0.0), epochs: m.epoch })
                .collect();
            let plan = exploit(&scores, config, &mut rng)?;
            let index_of =
                |ms: &[PopulationMember], id: u32| ms.iter().position(|m| m.member_id == id).expect("member id");
            // Snapshot donors first so a receiver never reads a half-updated donor.
            let donors: Vec<PopulationMember> =
                plan.iter().map(|p| members[index_of(&members, p.donor)].clone()).collect();
            for (p, donor) in plan.iter().zip(&donors) {
                let ri = index_of(&members, p.receiver);
                apply_copy(&mut members[ri], donor, space, config, &mut rng);
                members[ri].lineage.push(LineageEvent { epoch, receiver: p.receiver, donor: p.donor });
                epoch_rows[ri].exploited_from = Some(p.donor);
                log::debug!("epoch {epoch}: member {} <- member {}", p.receiver, p.donor);
            }
        }
        if let Some(best) = members.iter().filter_map(|m| m.metric).reduce(f64::max) {
            log::info!("epoch {epoch}/{}: best val balanced accuracy {best:.4}", config.total_epochs);
        }
        rows.extend(epoch_rows);
    }
    let report = finish(config, rows, &members, out_dir.is_some());
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(PbtOutcome { report, members })
}

/// Samples a population and runs PBT on it.
pub fn run_pbt(
    config: &PbtConfig,
    arch: &ArchConfig,
    space: &SearchSpace,
    data: &TrainingData,
    out_dir: Option<&Path>,
) -> Result<PbtOutcome> {
    let members = init_population(config, arch, space, config.seed)?;
    run_population(config, space, members, data, out_dir)
}

/// Baseline with the same population and budget but no exploitation: each
/// member trains start-to-finish on its own before the next begins.
pub fn random_search(
    config: &PbtConfig,
    arch: &ArchConfig,
    space: &SearchSpace,
    data: &TrainingData,
    out_dir: Option<&Path>,
) -> Result<PbtOutcome> {
    let mut members = init_population(config, arch, space, config.seed)?;
    prepare_out_dir(out_dir)?;
    let weights = data.class_weights(arch.n_classes);
    let mut rows = Vec::with_capacity(config.population_size * config.total_epochs);
    for m in &mut members {
        for _ in 0..config.total_epochs {
            let row = advance_member(m, data, &weights, out_dir).map_err(|e| Error::member(m.member_id.to_string(), e))?;
            rows.push(row);
        }
    }
    rows.sort_by_key(|r| (r.epoch, r.member_id));
    let config = PbtConfig { truncation_fraction: 0.0, ..config.clone() };
    let report = finish(&config, rows, &members, out_dir.is_some());
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(PbtOutcome { report, members })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(metrics: &[f64]) -> Vec<MemberScore> {
        metrics
            .iter()
            .enumerate()
            .map(|(i, &m)| MemberScore { member_id: i as u32, metric: m, epochs: 15 })
            .collect()
    }

    #[test]
    fn exploit_copies_worst_from_best() {
        let cfg = PbtConfig { population_size: 4, ..PbtConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = exploit(&scores(&[0.9, 0.5, 0.4, 0.2]), &cfg, &mut rng).unwrap();
        assert_eq!(plan, vec![CopyPlan { receiver: 3, donor: 0 }]);
    }

    #[test]
    fn exploit_ties_break_by_id() {
        let cfg = PbtConfig { population_size: 4, ..PbtConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = exploit(&scores(&[0.5; 4]), &cfg, &mut rng).unwrap();
        assert_eq!(plan, vec![CopyPlan { receiver: 3, donor: 0 }]);
    }

    #[test]
    fn exploit_eight_members() {
        let cfg = PbtConfig::default();
        let metrics = [0.3, 0.9, 0.1, 0.7, 0.5, 0.8, 0.2, 0.6];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = exploit(&scores(&metrics), &cfg, &mut rng).unwrap();
            assert_eq!(plan.len(), 2);
            let receivers: Vec<u32> = plan.iter().map(|p| p.receiver).collect();
            assert_eq!(receivers, vec![6, 2]);
            for p in &plan {
                assert!([1, 5].contains(&p.donor));
                assert!(!receivers.contains(&p.donor));
            }
        }
    }

    #[test]
    fn exploit_guards() {
        let cfg = PbtConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(exploit(&scores(&[0.5]), &cfg, &mut rng).is_err());
        let mut early = scores(&[0.5, 0.4]);
        early[1].epochs = 14;
        assert!(exploit(&early, &cfg, &mut rng).is_err());
    }

    #[test]
    fn explore_applies_stated_factors_and_clamps() {
        let space = SearchSpace::default();
        let cfg = PbtConfig::default();
        let hp = Hyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let out = explore(&hp, &space, &cfg, &mut rng);
            seen.insert((out.learning_rate * 1e7).round() as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![8000, 12000]);

        let top = Hyperparams { learning_rate: 1e-2, ..hp.clone() };
        for _ in 0..50 {
            let out = explore(&top, &space, &cfg, &mut rng);
            assert!(out.learning_rate == 1e-2 || (out.learning_rate - 8e-3).abs() < 1e-15);
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(explore(&hp, &space, &cfg, &mut a), explore(&hp, &space, &cfg, &mut b));
        }
    }

    #[test]
    fn population_is_reproducible_with_distinct_ids() {
        let cfg = PbtConfig::default();
        let arch = ArchConfig { hidden_dim: 8, gate_dim: 4, attn_hidden: 2, ..ArchConfig::new(6) };
        let space = SearchSpace::default();
        let a = init_population(&cfg, &arch, &space, 5).unwrap();
        let b = init_population(&cfg, &arch, &space, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.hyperparams, y.hyperparams);
        }
        let ids: std::collections::HashSet<u32> = a.iter().map(|m| m.member_id).collect();
        assert_eq!(ids.len(), 8);
        assert!(init_population(&PbtConfig { population_size: 1, ..cfg }, &arch, &space, 5).is_err());
    }
}

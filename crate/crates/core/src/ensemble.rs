//! AUROC-weighted soft voting over the best trained models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::metrics::{balanced_accuracy, confusion};
use crate::milnet::{predict, read_checkpoint, AttentionResult, LabeledBag, MilParams};
use crate::pbt::{PbtOutcome, PbtReport};

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub checkpoint: Option<PathBuf>,
    pub params: Arc<MilParams>,
    pub val_balanced_accuracy: f64,
    pub val_auroc: f64,
    /// 1-based position in the source ranking.
    pub rank: u32,
}

impl TrainedModel {
    pub fn new(params: MilParams, val_balanced_accuracy: f64, val_auroc: f64, rank: u32) -> Result<Self> {
        for (name, v) in [("balanced accuracy", val_balanced_accuracy), ("AUROC", val_auroc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(Self { checkpoint: None, params: Arc::new(params), val_balanced_accuracy, val_auroc, rank })
    }

    /// Loads a checkpoint and takes its validation metrics from the header.
    pub fn from_checkpoint(path: &Path, rank: u32) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let bal = ckpt.header.val_balanced_accuracy.unwrap_or(0.0);
        let auroc = ckpt.header.val_auroc.unwrap_or(0.0);
        let mut model = Self::new(ckpt.params, bal, auroc, rank).map_err(|e| Error::at_path(path, e))?;
        model.checkpoint = Some(path.to_path_buf());
        Ok(model)
    }
}

/// Candidates from a saved PBT run, in its ranking order.
pub fn candidates_from_report(report: &PbtReport, report_dir: &Path) -> Result<Vec<TrainedModel>> {
    report
        .ranking
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rel = r
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("member {} has no checkpoint", r.member_id)))?;
            TrainedModel::from_checkpoint(&report_dir.join(rel), i as u32 + 1)
                .map_err(|e| Error::member(r.member_id.to_string(), e))
        })
        .collect()
}

/// Candidates from an in-memory PBT run (each member's best snapshot).
pub fn candidates_from_outcome(outcome: &PbtOutcome) -> Result<Vec<TrainedModel>> {
    outcome
        .report
        .ranking
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let member = outcome
                .members
                .iter()
                .find(|m| m.member_id == r.member_id)
                .and_then(|m| m.best.as_ref())
                .ok_or_else(|| Error::invalid(format!("member {} has no snapshot", r.member_id)))?;
            TrainedModel::new(
                member.params.clone(),
                member.balanced_accuracy,
                member.auroc.unwrap_or(0.0),
                i as u32 + 1,
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<TrainedModel>,
    /// Proportional to validation AUROC; sums to 1.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl Ensemble {
    pub fn new(members: Vec<TrainedModel>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        let dim = members[0].params.arch.input_dim;
        let classes = members[0].params.arch.n_classes;
        for m in &members[1..] {
            if m.params.arch.input_dim != dim || m.params.arch.n_classes != classes {
                return Err(Error::member(
                    member_label(m),
                    Error::DimensionMismatch { expected: dim, found: m.params.arch.input_dim },
                ));
            }
        }
        let weights = auroc_weights(&members.iter().map(|m| m.val_auroc).collect::<Vec<_>>())?;
        Ok(Self { members, weights })
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].params.arch.input_dim
    }

    pub fn predict(&self, x: &Matrix) -> Result<EnsemblePrediction> {
        let r = self.predict_attention(x)?;
        Ok(EnsemblePrediction { probabilities: r.probabilities, predicted: r.predicted })
    }

    /// Combined probabilities, with scores and per-class attention averaged
    /// under the same weights.
    pub fn predict_attention(&self, x: &Matrix) -> Result<AttentionResult> {
        let results = self
            .members
            .iter()
            .map(|m| predict(&m.params, x).map_err(|e| Error::member(member_label(m), e)))
            .collect::<Result<Vec<_>>>()?;
        let gather = |f: &dyn Fn(&AttentionResult) -> &Vec<f64>| {
            combine(&results.iter().map(|r| f(r).clone()).collect::<Vec<_>>(), &self.weights)
        };
        let probabilities = gather(&|r| &r.probabilities);
        let scores = gather(&|r| &r.scores);
        let attention = (0..results[0].attention.len()).map(|c| gather(&|r| &r.attention[c])).collect();
        let predicted = argmax(&probabilities);
        Ok(AttentionResult { attention, scores, probabilities, predicted })
    }

    pub fn to_manifest(&self) -> Result<EnsembleManifest> {
        let members = self
            .members
            .iter()
            .map(|m| {
                let checkpoint = m
                    .checkpoint
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("member rank {} has no checkpoint path", m.rank)))?;
                Ok(ManifestMember { checkpoint, auroc: m.val_auroc, bal_acc: m.val_balanced_accuracy })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleManifest { members, weights: self.weights.clone() })
    }

    /// Loads every member checkpoint named by a manifest. Relative
    /// checkpoint paths resolve against `base`.
    pub fn from_manifest(manifest: &EnsembleManifest, base: &Path) -> Result<Self> {
        let members = manifest
            .members
            .iter()
            .enumerate()
            .map(|(i, mm)| {
                let path = base.join(&mm.checkpoint);
                let mut model = TrainedModel::from_checkpoint(&path, i as u32 + 1)
                    .map_err(|e| Error::member(mm.checkpoint.display().to_string(), e))?;
                model.val_auroc = mm.auroc;
                model.val_balanced_accuracy = mm.bal_acc;
                model.checkpoint = Some(mm.checkpoint.clone());
                Ok(model)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }
}

fn member_label(m: &TrainedModel) -> String {
    match &m.checkpoint {
        Some(p) => p.display().to_string(),
        None => format!("rank {}", m.rank),
    }
}

/// Normalized AUROC weights.
pub fn auroc_weights(aurocs: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = aurocs.iter().sum();
    if aurocs.is_empty() || !(total > 0.0) || aurocs.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::invalid("ensemble weights need non-negative AUROCs with a positive sum"));
    }
    Ok(aurocs.iter().map(|a| a / total).collect())
}

/// Weighted average of member probability vectors.
///
/// Accumulates offsets from the first member, so identical members
/// reproduce that member's vector bit for bit, and clamps each component
/// to the members' range to keep the result a convex combination.
pub fn combine(member_probs: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let base = &member_probs[0];
    (0..base.len())
        .map(|c| {
            let offset: f64 = member_probs.iter().zip(weights).map(|(p, w)| w * (p[c] - base[c])).sum();
            let (lo, hi) = member_probs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[c]), hi.max(p[c]))
            });
            (base[c] + offset).clamp(lo, hi)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub k: usize,
    pub ensemble: Ensemble,
    pub val_balanced_accuracy: f64,
    /// Validation balanced accuracy for every k tried, starting at k = 1.
    pub curve: Vec<f64>,
}

/// Orders candidates by validation balanced accuracy (then AUROC, then
/// rank), scores the top-k ensembles on `val` for k = 1..=k_max and keeps
/// the smallest k reaching the best score.
pub fn select_topk(models: &[TrainedModel], k_max: usize, val: &[LabeledBag]) -> Result<Selection> {
    if models.is_empty() {
        return Err(Error::invalid("select_topk needs at least one model"));
    }
    if val.is_empty() {
        return Err(Error::invalid("select_topk needs validation bags"));
    }
    let mut sorted = models.to_vec();
    sorted.sort_by(|a, b| {
        b.val_balanced_accuracy
            .total_cmp(&a.val_balanced_accuracy)
            .then(b.val_auroc.total_cmp(&a.val_auroc))
            .then(a.rank.cmp(&b.rank))
    });
    sorted.truncate(k_max.max(1));
    let n_classes = sorted[0].params.arch.n_classes;
    let per_model: Vec<Vec<Vec<f64>>> = sorted
        .iter()
        .map(|m| {
            val.iter()
                .map(|b| predict(&m.params, &b.x).map(|r| r.probabilities))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::member(member_label(m), e))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = val.iter().map(|b| b.label.index()).collect();

    let mut curve = Vec::with_capacity(sorted.len());
    for k in 1..=sorted.len() {
        let weights = auroc_weights(&sorted[..k].iter().map(|m| m.val_auroc).collect::<Vec<_>>())?;
        let predicted: Vec<usize> = (0..val.len())
            .map(|i| {
                let probs: Vec<Vec<f64>> = per_model[..k].iter().map(|pm| pm[i].clone()).collect();
                argmax(&combine(&probs, &weights))
            })
            .collect();
        curve.push(balanced_accuracy(&confusion(&truth, &predicted, n_classes)?)?);
    }
    let best = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = curve.iter().position(|&v| v == best).expect("non-empty curve") + 1;
    sorted.truncate(k);
    Ok(Selection { k, ensemble: Ensemble::new(sorted)?, val_balanced_accuracy: best, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub checkpoint: PathBuf,
    pub auroc: f64,
    pub bal_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<ManifestMember>,
    pub weights: Vec<f64>,
}

impl EnsembleManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e.into()))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::at_path(path, e.into()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::FirLabel;
    use crate::milnet::ArchConfig;

    fn arch() -> ArchConfig {
        ArchConfig { hidden_dim: 8, gate_dim: 6, attn_hidden: 4, ..ArchConfig::new(5) }
    }

    fn model(seed: u64, bal: f64, auroc: f64, rank: u32) -> TrainedModel {
        TrainedModel::new(MilParams::init(&arch(), seed).unwrap(), bal, auroc, rank).unwrap()
    }

    fn bags() -> Vec<LabeledBag> {
        (0..6)
            .map(|i| LabeledBag {
                x: Matrix::from_vec(3, 5, (0..15).map(|j| ((i * 15 + j) as f64 * 0.37).sin()).collect()),
                label: FirLabel::from_index(i % 3).unwrap(),
            })
            .collect()
    }

    #[test]
    fn weighted_average_example() {
        let w = auroc_weights(&[0.9, 0.6]).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
        let p = combine(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &w);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12 && p[2] == 0.0);
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn single_member_matches_predict() {
        let m = model(1, 0.5, 0.7, 1);
        let x = &bags()[0].x;
        let e = Ensemble::new(vec![m.clone()]).unwrap();
        assert_eq!(e.weights, vec![1.0]);
        let single = predict(&m.params, x).unwrap();
        let p = e.predict(x).unwrap();
        assert_eq!(p.probabilities, single.probabilities);
        assert_eq!(p.predicted, single.predicted);
    }

    #[test]
    fn duplicated_members_are_exact() {
        let m = model(2, 0.5, 0.7, 1);
        let x = &bags()[1].x;
        let e = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(e.predict(x).unwrap().probabilities, predict(&m.params, x).unwrap().probabilities);
    }

    #[test]
    fn selection_prefers_smallest_k_for_identical_models() {
        let m = model(3, 0.6, 0.8, 1);
        let mut twin = m.clone();
        twin.rank = 2;
        let sel = select_topk(&[twin, m], 2, &bags()).unwrap();
        assert_eq!(sel.k, 1);
        assert_eq!(sel.curve[0], sel.curve[1]);
        assert_eq!(sel.ensemble.members[0].rank, 1);
        assert!(select_topk(&[], 3, &bags()).is_err());
    }

    #[test]
    fn selection_orders_by_accuracy_then_auroc() {
        let ms = vec![model(4, 0.5, 0.9, 1), model(5, 0.7, 0.6, 2), model(6, 0.7, 0.8, 3)];
        let sel = select_topk(&ms, 1, &bags()).unwrap();
        assert_eq!(sel.ensemble.members[0].rank, 3);
    }

    #[test]
    fn mismatched_dims_name_the_member() {
        let other = TrainedModel::new(MilParams::init(&ArchConfig { input_dim: 7, ..arch() }, 1).unwrap(), 0.5, 0.5, 2)
            .unwrap();
        let err = Ensemble::new(vec![model(1, 0.5, 0.5, 1), other]).unwrap_err();
        assert!(err.to_string().contains("rank 2"), "{err}");
        assert!(matches!(err.root(), Error::DimensionMismatch { .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let m = EnsembleManifest {
            members: vec![ManifestMember { checkpoint: "a.milc".into(), auroc: 0.9, bal_acc: 0.8 }],
            weights: vec![1.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.json");
        m.save(&path).unwrap();
        assert_eq!(EnsembleManifest::load(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"bal_acc\"") && text.contains("\"weights\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn combination_is_convex(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..6),
                                     aurocs in prop::collection::vec(0.05f64..1.0, 6)) {
                let probs: Vec<Vec<f64>> = raw.iter().map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                }).collect();
                let w = auroc_weights(&aurocs[..probs.len()]).unwrap();
                let p = combine(&probs, &w);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    let lo = probs.iter().map(|q| q[c]).fold(f64::INFINITY, f64::min);
                    let hi = probs.iter().map(|q| q[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo <= p[c] && p[c] <= hi);
                }
            }
        }
    }
}

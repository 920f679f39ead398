//! Triplet ranking and recall evaluation: R@K, mean recall over predicate
//! categories, head/body/tail group means and the weighted scalar score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{LabelAssignment, NodeId, SceneGraphInstance};
use crate::inference::NodePosterior;
use crate::synthdata::{Group, GroupSplit};

/// A ranked (subject, predicate, object) prediction for one predicate node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub subject_label: usize,
    pub predicate_label: usize,
    pub object_label: usize,
    pub confidence: f64,
    pub node: NodeId,
}

/// A ground-truth triplet anchored at its predicate node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub subject_label: usize,
    pub predicate_label: usize,
    pub object_label: usize,
    pub node: NodeId,
}

/// Ground-truth triplets of a labelled instance, one per predicate node.
pub fn ground_truth_triplets(
    instance: &SceneGraphInstance,
    labels: &LabelAssignment,
) -> Result<Vec<GroundTruthTriplet>> {
    labels.validate(instance, false)?;
    let mut triplets = Vec::with_capacity(instance.num_predicates());
    for j in 0..instance.num_predicates() {
        let (subject, object) = instance.predicate_endpoints(j)?;
        triplets.push(GroundTruthTriplet {
            subject_label: labels.object_labels[subject],
            predicate_label: labels.predicate_labels[j],
            object_label: labels.object_labels[object],
            node: NodeId::predicate(j),
        });
    }
    Ok(triplets)
}

/// Builds one prediction per predicate node and ranks them by confidence,
/// the sum of the three nodes' maximum log posteriors. Ties break by node id.
pub fn rank_triplets(
    posteriors: &BTreeMap<NodeId, NodePosterior>,
    instance: &SceneGraphInstance,
) -> Result<Vec<TripletPrediction>> {
    let get = |node: NodeId| -> Result<&NodePosterior> {
        posteriors
            .get(&node)
            .ok_or_else(|| Error::IncompleteAssignment(format!("no posterior for {node}")))
    };
    let mut predictions = Vec::with_capacity(instance.num_predicates());
    for j in 0..instance.num_predicates() {
        let node = NodeId::predicate(j);
        let (subject, object) = instance.predicate_endpoints(j)?;
        let subject_posterior = get(NodeId::object(subject))?;
        let object_posterior = get(NodeId::object(object))?;
        let predicate_posterior = get(node)?;
        let confidence = subject_posterior.log_posterior[subject_posterior.map_label]
            + predicate_posterior.log_posterior[predicate_posterior.map_label]
            + object_posterior.log_posterior[object_posterior.map_label];
        if !confidence.is_finite() {
            return Err(Error::NonFinite(format!("confidence of {node}")));
        }
        predictions.push(TripletPrediction {
            subject_label: subject_posterior.map_label,
            predicate_label: predicate_posterior.map_label,
            object_label: object_posterior.map_label,
            confidence,
            node,
        });
    }
    sort_predictions(&mut predictions);
    Ok(predictions)
}

fn sort_predictions(predictions: &mut [TripletPrediction]) {
    predictions.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then_with(|| a.node.cmp(&b.node))
    });
}

/// Matched / total counters for one predicate category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    pub matched: u64,
    pub total: u64,
}

impl MatchStats {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// How predictions may consume ground-truth triplets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Each prediction consumes at most one ground-truth triplet.
    Strict,
    /// A ground-truth triplet matches if any top-K prediction equals it.
    Unconstrained,
}

/// Per-category match counts against the top-K predictions.
pub fn match_counts_at_k(
    predictions: &[TripletPrediction],
    ground_truth: &[GroundTruthTriplet],
    k: usize,
    mode: MatchMode,
) -> Result<BTreeMap<usize, MatchStats>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut ranked = predictions.to_vec();
    sort_predictions(&mut ranked);
    ranked.truncate(k);

    let mut counts: BTreeMap<usize, MatchStats> = BTreeMap::new();
    for gt in ground_truth {
        counts.entry(gt.predicate_label).or_default().total += 1;
    }
    let matches = |p: &TripletPrediction, g: &GroundTruthTriplet| {
        p.node == g.node
            && p.subject_label == g.subject_label
            && p.predicate_label == g.predicate_label
            && p.object_label == g.object_label
    };
    match mode {
        MatchMode::Strict => {
            let mut consumed = vec![false; ground_truth.len()];
            for prediction in &ranked {
                if let Some(slot) = ground_truth
                    .iter()
                    .enumerate()
                    .position(|(idx, gt)| !consumed[idx] && matches(prediction, gt))
                {
                    consumed[slot] = true;
                    counts.get_mut(&ground_truth[slot].predicate_label).unwrap().matched += 1;
                }
            }
        }
        MatchMode::Unconstrained => {
            for gt in ground_truth {
                if ranked.iter().any(|p| matches(p, gt)) {
                    counts.get_mut(&gt.predicate_label).unwrap().matched += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Recall at K plus per-category recalls for one prediction set.
pub fn recall_at_k(
    predictions: &[TripletPrediction],
    ground_truth: &[GroundTruthTriplet],
    k: usize,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let counts = match_counts_at_k(predictions, ground_truth, k, MatchMode::Strict)?;
    let matched: u64 = counts.values().map(|c| c.matched).sum();
    let total: u64 = counts.values().map(|c| c.total).sum();
    let per_category = counts.into_iter().map(|(cat, c)| (cat, c.recall())).collect();
    Ok((matched as f64 / total as f64, per_category))
}

/// Unweighted mean over the categories present in the ground truth.
pub fn mean_recall(per_category: &BTreeMap<usize, f64>) -> Result<f64> {
    if per_category.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(per_category.values().sum::<f64>() / per_category.len() as f64)
}

/// Fixed linear combination `0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr`.
/// Inputs must share a scale (all fractions or all percentages).
pub fn weighted_score(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr
}

/// Per-category recall values at each K.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub category: usize,
    pub total: u64,
    pub recall: Vec<f64>,
}

/// Mean recall of one category group at each K, absent when the group has no
/// categories in the ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupMeans {
    pub head: Option<Vec<f64>>,
    pub body: Option<Vec<f64>>,
    pub tail: Option<Vec<f64>>,
}

/// Aggregated evaluation over a collection of instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub categories: Vec<CategoryRecall>,
    /// Pooled R@K across all ground-truth triplets.
    pub recall: Vec<f64>,
    /// Unweighted category mean at each K.
    pub mean_recall: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupMeans>,
}

/// Pools per-instance match counts and assembles the report. Category counts
/// accumulate across instances, so duplicating an instance leaves every
/// per-category recall unchanged.
pub fn build_report(
    per_instance: &[(Vec<TripletPrediction>, Vec<GroundTruthTriplet>)],
    ks: &[usize],
    split: Option<&GroupSplit>,
    mode: MatchMode,
) -> Result<RecallReport> {
    if ks.is_empty() {
        return Err(Error::InvalidConfig("no K values requested".into()));
    }
    let mut pooled: BTreeMap<usize, Vec<MatchStats>> = BTreeMap::new();
    for (predictions, ground_truth) in per_instance {
        for (ki, &k) in ks.iter().enumerate() {
            let counts = match_counts_at_k(predictions, ground_truth, k, mode)?;
            for (category, stats) in counts {
                let slot = pooled.entry(category).or_insert_with(|| vec![MatchStats::default(); ks.len()]);
                slot[ki].matched += stats.matched;
                slot[ki].total += stats.total;
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }

    let categories: Vec<CategoryRecall> = pooled
        .iter()
        .map(|(&category, stats)| CategoryRecall {
            category,
            total: stats[0].total,
            recall: stats.iter().map(MatchStats::recall).collect(),
        })
        .collect();

    let recall: Vec<f64> = (0..ks.len())
        .map(|ki| {
            let matched: u64 = pooled.values().map(|s| s[ki].matched).sum();
            let total: u64 = pooled.values().map(|s| s[ki].total).sum();
            matched as f64 / total as f64
        })
        .collect();

    let mean_recall: Vec<f64> = (0..ks.len())
        .map(|ki| {
            categories.iter().map(|c| c.recall[ki]).sum::<f64>() / categories.len() as f64
        })
        .collect();

    let groups = split.map(|split| {
        let mean_of = |group: Group| -> Option<Vec<f64>> {
            let members: Vec<&CategoryRecall> = categories
                .iter()
                .filter(|c| split.group_of(c.category) == group)
                .collect();
            if members.is_empty() {
                return None;
            }
            Some(
                (0..ks.len())
                    .map(|ki| {
                        members.iter().map(|c| c.recall[ki]).sum::<f64>() / members.len() as f64
                    })
                    .collect(),
            )
        };
        GroupMeans { head: mean_of(Group::Head), body: mean_of(Group::Body), tail: mean_of(Group::Tail) }
    });

    Ok(RecallReport { ks: ks.to_vec(), categories, recall, mean_recall, groups })
}

impl RecallReport {
    pub fn mean_recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|ki| self.mean_recall[ki])
    }

    /// One row per category plus aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,total");
        for k in &self.ks {
            out.push_str(&format!(",R@{k}"));
        }
        out.push('\n');
        for category in &self.categories {
            out.push_str(&format!("category_{},{}", category.category, category.total));
            for r in &category.recall {
                out.push_str(&format!(",{r}"));
            }
            out.push('\n');
        }
        let total: u64 = self.categories.iter().map(|c| c.total).sum();
        out.push_str(&format!("all,{total}"));
        for r in &self.recall {
            out.push_str(&format!(",{r}"));
        }
        out.push('\n');
        out.push_str("mean,");
        for r in &self.mean_recall {
            out.push_str(&format!(",{r}"));
        }
        out.push('\n');
        if let Some(groups) = &self.groups {
            for (name, values) in
                [("head", &groups.head), ("body", &groups.body), ("tail", &groups.tail)]
            {
                out.push_str(&format!("{name},"));
                match values {
                    Some(values) => {
                        for r in values {
                            out.push_str(&format!(",{r}"));
                        }
                    }
                    None => {
                        for _ in &self.ks {
                            out.push(',');
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ReadabilityReport, SourceKind};
use crate::error::{Error, Result};

pub const DEFAULT_EPOCHS_PER_STAGE: u64 = 3;
const N_BUCKETS: usize = 5;

/// Easy-to-hard source buckets; a new bucket joins every `epochs_per_stage`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub buckets: Vec<BTreeSet<SourceKind>>,
    pub epochs_per_stage: u64,
}

fn fixed_bucket(k: &SourceKind) -> Option<usize> {
    use SourceKind::*;
    match k {
        Aochildes => Some(0),
        OpenSubtitles => Some(1),
        Switchboard | Cbt | Qed | ChildrenStories | BncSpoken => Some(2),
        SimpleWikipedia | Gutenberg => Some(3),
        Wikipedia => Some(4),
        Other(_) => None,
    }
}

/// Mean z-score of the difficulty-oriented metrics (Flesch reading ease is
/// negated so that larger always means harder).
fn difficulty_scores(reports: &BTreeMap<SourceKind, ReadabilityReport>) -> BTreeMap<SourceKind, f64> {
    let metrics: Vec<[f64; 5]> = reports
        .values()
        .map(|r| [-r.flesch_reading_ease, r.fk_grade, r.gunning_fog, r.ari, r.smog])
        .collect();
    let n = metrics.len() as f64;
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for j in 0..5 {
        mean[j] = metrics.iter().map(|m| m[j]).sum::<f64>() / n;
        std[j] = (metrics.iter().map(|m| (m[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
    }
    reports
        .keys()
        .zip(&metrics)
        .map(|(k, m)| {
            let z: f64 = (0..5).map(|j| if std[j] > 0.0 { (m[j] - mean[j]) / std[j] } else { 0.0 }).sum();
            (k.clone(), z / 5.0)
        })
        .collect()
}

/// Known sources use the fixed assignment. Unknown sources join the known
/// bucket whose mean difficulty is closest (earlier bucket on ties); with no
/// known sources they are spread over the five buckets by difficulty rank.
/// Empty buckets are dropped.
pub fn build_curriculum(reports: &BTreeMap<SourceKind, ReadabilityReport>) -> Result<CurriculumPlan> {
    if reports.is_empty() {
        return Err(Error::config("curriculum needs at least one readability report"));
    }
    let scores = difficulty_scores(reports);
    let mut buckets: Vec<BTreeSet<SourceKind>> = vec![BTreeSet::new(); N_BUCKETS];
    for k in reports.keys() {
        if let Some(b) = fixed_bucket(k) {
            buckets[b].insert(k.clone());
        }
    }
    let centroids: Vec<(usize, f64)> = buckets
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(i, b)| (i, b.iter().map(|k| scores[k]).sum::<f64>() / b.len() as f64))
        .collect();
    let mut unknown: Vec<(&SourceKind, f64)> = reports.keys().filter(|k| !k.is_known()).map(|k| (k, scores[k])).collect();
    unknown.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n_unknown = unknown.len();
    for (rank, (k, s)) in unknown.into_iter().enumerate() {
        let b = if centroids.is_empty() {
            rank * N_BUCKETS / n_unknown
        } else {
            centroids
                .iter()
                .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()).then(a.0.cmp(&b.0)))
                .unwrap()
                .0
        };
        buckets[b].insert(k.clone());
    }
    buckets.retain(|b| !b.is_empty());
    Ok(CurriculumPlan {
        buckets,
        epochs_per_stage: DEFAULT_EPOCHS_PER_STAGE,
    })
}

/// Union of the first `1 + epoch / epochs_per_stage` buckets.
pub fn curriculum_active_sources(plan: &CurriculumPlan, epoch: u64) -> BTreeSet<SourceKind> {
    let stages = 1 + epoch / plan.epochs_per_stage.max(1);
    let n = (stages.min(plan.buckets.len() as u64)) as usize;
    plan.buckets[..n].iter().flatten().cloned().collect()
}

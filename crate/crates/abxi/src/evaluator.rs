//! Leave-one-out ranking evaluation with sampled same-domain negatives.
//!
//! For each user the ground-truth item is ranked among itself plus up to
//! 999 sampled negatives by dot product against the recommendation state at
//! the last supervised position. Ties count against the ground truth. HR@K,
//! NDCG@K and MRR are averaged per domain.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_bundle, Token, TokenDomain};
use crate::corpus::{Corpus, Domain, GroundTruth, Split};
use crate::error::{Error, Result};
use crate::model::forward::forward;
use crate::model::layers::RunCtx;
use crate::model::{ModelConfig, ModelParams};
use crate::objective::sample_negatives;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Val,
    Test,
}

impl EvalMode {
    fn stream_tag(self) -> &'static str {
        match self {
            EvalMode::Val => "eval-neg-val",
            EvalMode::Test => "eval-neg-test",
        }
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    debug_assert!(rank >= 1);
    1.0 / rank as f64
}

/// Pessimistic rank of the ground truth: 1 plus the number of candidates
/// scoring at least as high.
pub fn rank_among(gt_score: f64, candidate_scores: &[f64]) -> usize {
    1 + candidate_scores.iter().filter(|&&s| s >= gt_score).count()
}

/// Per-domain metric averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
    pub mrr: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub seed: u64,
    pub negatives_requested: usize,
    /// Smallest and largest candidate-list size actually used (the pool can
    /// run short of the requested negatives on small vocabularies).
    pub min_candidates: usize,
    pub max_candidates: usize,
    pub a: Option<DomainMetrics>,
    pub b: Option<DomainMetrics>,
}

impl EvalReport {
    /// Model-selection score: sum of the per-domain MRRs.
    pub fn aggregate_mrr(&self) -> f64 {
        self.a.as_ref().map_or(0.0, |m| m.mrr) + self.b.as_ref().map_or(0.0, |m| m.mrr)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>6} {:>5}\n",
            "domain", "HR@5", "HR@10", "NDCG@10", "MRR", "eval", "skip"
        ));
        for (name, m) in [("A", &self.a), ("B", &self.b)] {
            match m {
                Some(m) => out.push_str(&format!(
                    "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>5}\n",
                    name, m.hr5, m.hr10, m.ndcg10, m.mrr, m.evaluated, m.skipped
                )),
                None => out.push_str(&format!("{name:<10} (no ground truths)\n")),
            }
        }
        out
    }
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDomain {
    pub hr5: MeanStd,
    pub hr10: MeanStd,
    pub ndcg10: MeanStd,
    pub mrr: MeanStd,
}

/// Metrics aggregated over seeds, reported as mean +/- std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: EvalMode,
    pub seeds: Vec<u64>,
    pub a: Option<AggregateDomain>,
    pub b: Option<AggregateDomain>,
}

fn aggregate_domain(metrics: &[&DomainMetrics]) -> AggregateDomain {
    let collect = |f: fn(&DomainMetrics) -> f64| -> MeanStd {
        mean_std(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>())
    };
    AggregateDomain {
        hr5: collect(|m| m.hr5),
        hr10: collect(|m| m.hr10),
        ndcg10: collect(|m| m.ndcg10),
        mrr: collect(|m| m.mrr),
    }
}

pub fn aggregate(reports: &[EvalReport]) -> AggregateReport {
    assert!(!reports.is_empty());
    let side = |pick: fn(&EvalReport) -> &Option<DomainMetrics>| -> Option<AggregateDomain> {
        let ms: Vec<&DomainMetrics> = reports.iter().filter_map(|r| pick(r).as_ref()).collect();
        (!ms.is_empty()).then(|| aggregate_domain(&ms))
    };
    AggregateReport {
        mode: reports[0].mode,
        seeds: reports.iter().map(|r| r.seed).collect(),
        a: side(|r| &r.a),
        b: side(|r| &r.b),
    }
}

impl AggregateReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>16} {:>16} {:>16} {:>16}\n",
            "domain", "HR@5", "HR@10", "NDCG@10", "MRR"
        ));
        let cell = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        for (name, d) in [("A", &self.a), ("B", &self.b)] {
            match d {
                Some(d) => out.push_str(&format!(
                    "{:<10} {:>16} {:>16} {:>16} {:>16}\n",
                    name,
                    cell(d.hr5),
                    cell(d.hr10),
                    cell(d.ndcg10),
                    cell(d.mrr)
                )),
                None => out.push_str(&format!("{name:<10} (no ground truths)\n")),
            }
        }
        out
    }
}

/// Rank one user's ground truth among sampled negatives. Returns `None`
/// when the (trimmed) conditioning sequence has no in-domain token to
/// ground the domain-specific stream.
pub fn score_user(
    params: &ModelParams,
    cfg: &ModelConfig,
    conditioning: &[Token],
    gt: GroundTruth,
    negatives: &[u32],
) -> Result<Option<usize>> {
    if conditioning.is_empty() {
        return Ok(None);
    }
    // Keep the latest max_len - 1 tokens so the appended target slot fits.
    let start = conditioning.len().saturating_sub(cfg.max_len - 1);
    let window = &conditioning[start..];
    let tag: TokenDomain = gt.domain.into();
    if !window.iter().any(|t| t.domain == tag) {
        return Ok(None);
    }

    let mut merged = window.to_vec();
    merged.push(gt.token());
    let bundle = build_bundle(&merged, cfg.max_len, cfg.alignment)?;
    let fwd = forward(params, cfg, &bundle, &mut RunCtx::eval())?;
    let rec = match gt.domain {
        Domain::A => &fwd.rec_a,
        Domain::B => &fwd.rec_b,
    };
    let h = rec.row(bundle.len() - 1);

    let score_of = |item: u32| params.item_emb.row(item as usize).dot(&h);
    let gt_score = score_of(gt.item);
    let neg_scores: Vec<f64> = negatives.iter().map(|&i| score_of(i)).collect();
    Ok(Some(rank_among(gt_score, &neg_scores)))
}

struct DomainAccum {
    hr5: f64,
    hr10: f64,
    ndcg10: f64,
    mrr: f64,
    evaluated: usize,
    skipped: usize,
}

impl DomainAccum {
    fn new() -> Self {
        DomainAccum {
            hr5: 0.0,
            hr10: 0.0,
            ndcg10: 0.0,
            mrr: 0.0,
            evaluated: 0,
            skipped: 0,
        }
    }

    fn add(&mut self, rank: usize) {
        self.hr5 += hr_at_k(rank, 5);
        self.hr10 += hr_at_k(rank, 10);
        self.ndcg10 += ndcg_at_k(rank, 10);
        self.mrr += mrr(rank);
        self.evaluated += 1;
    }

    fn finish(self) -> Option<DomainMetrics> {
        if self.evaluated == 0 && self.skipped == 0 {
            return None;
        }
        let n = self.evaluated.max(1) as f64;
        Some(DomainMetrics {
            hr5: self.hr5 / n,
            hr10: self.hr10 / n,
            ndcg10: self.ndcg10 / n,
            mrr: self.mrr / n,
            evaluated: self.evaluated,
            skipped: self.skipped,
        })
    }
}

/// Evaluate a checkpoint over the whole split. Validation conditions on the
/// training sequence; test conditions on training plus the validation item.
/// Negatives are fixed per (seed, mode, user).
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    split: &Split,
    mode: EvalMode,
    seed: u64,
    n_negatives: usize,
) -> Result<EvalReport> {
    let mut acc_a = DomainAccum::new();
    let mut acc_b = DomainAccum::new();
    let mut min_cands = usize::MAX;
    let mut max_cands = 0usize;

    for (user_idx, user) in split.users.iter().enumerate() {
        let (gt, conditioning) = match mode {
            EvalMode::Val => (user.val_gt, user.train.clone()),
            EvalMode::Test => {
                let mut seq = user.train.clone();
                seq.push(user.val_gt.token());
                (user.test_gt, seq)
            }
        };
        let exclusion = user.history_items();
        let range = corpus.domain_items(gt.domain);
        let in_range_excluded = exclusion.iter().filter(|i| range.contains(i)).count();
        let pool = range.len() - in_range_excluded;
        let n = n_negatives.min(pool);
        let mut rng = stream(seed, mode.stream_tag(), user_idx as u64, 0);
        let set = sample_negatives(gt.item, &exclusion, range, gt.domain, n, &mut rng)?;

        min_cands = min_cands.min(n + 1);
        max_cands = max_cands.max(n + 1);
        let acc = match gt.domain {
            Domain::A => &mut acc_a,
            Domain::B => &mut acc_b,
        };
        match score_user(params, cfg, &conditioning, gt, &set.negatives)? {
            Some(rank) => acc.add(rank),
            None => acc.skipped += 1,
        }
    }
    if min_cands == usize::MAX {
        return Err(Error::Data("empty split".into()));
    }
    Ok(EvalReport {
        mode,
        seed,
        negatives_requested: n_negatives,
        min_candidates: min_cands,
        max_candidates: max_cands,
        a: acc_a.finish(),
        b: acc_b.finish(),
    })
}

/// Score every candidate with a deterministic pseudo-random scorer and rank
/// the ground truth; the null model for metric sanity checks.
pub fn random_scorer_rank(n_candidates: usize, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    use rand::Rng;
    let gt_score: f64 = rng.gen();
    let negs: Vec<f64> = (0..n_candidates - 1).map(|_| rng.gen()).collect();
    rank_among(gt_score, &negs)
}

#[allow(unused_imports)]
use crate::model::forward::FlopCount;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn metric_formulas() {
        assert_eq!(hr_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(mrr(1), 1.0);

        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-12);
        assert!((mrr(3) - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert!((mrr(11) - 0.090_909_090_909_090_91).abs() < 1e-12);
    }

    #[test]
    fn rank_is_pessimistic_on_ties() {
        // gt ties with 3 candidates, none higher: rank 4.
        assert_eq!(rank_among(0.5, &[0.5, 0.5, 0.5, 0.1]), 4);
        assert_eq!(rank_among(0.9, &[0.1, 0.2]), 1);
        assert_eq!(rank_among(0.1, &[0.5, 0.3]), 3);
    }

    #[test]
    fn rank_matches_sort_oracle_on_random_scores() {
        let mut rng = crate::rng::stream(30, "rank", 0, 0);
        for _ in 0..500 {
            let n = rng.gen_range(1..50);
            let gt: f64 = rng.gen_range(0.0..1.0);
            let negs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            // Oracle: sort all scores descending, find the position after
            // every candidate that beats or ties the ground truth.
            let mut all = negs.clone();
            all.push(gt);
            all.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let oracle = all.iter().position(|&s| s < gt).unwrap_or(all.len());
            // `oracle` counts entries >= gt including gt itself.
            assert_eq!(rank_among(gt, &negs), oracle);
        }
    }

    #[test]
    fn metric_monotonicity_in_rank() {
        for rank in 1..30 {
            for k in [5, 10] {
                assert!(hr_at_k(rank, k) >= hr_at_k(rank + 1, k));
                assert!(ndcg_at_k(rank, k) >= ndcg_at_k(rank + 1, k));
            }
            assert!(mrr(rank) > mrr(rank + 1));
        }
    }

    #[test]
    fn mean_std_matches_hand_arithmetic() {
        let ms = mean_std(&[0.1, 0.2]);
        assert!((ms.mean - 0.15).abs() < 1e-12);
        assert!((ms.std - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.4]).std, 0.0);
        assert_eq!(mean_std(&[0.3, 0.3, 0.3]).std, 0.0);
    }
}

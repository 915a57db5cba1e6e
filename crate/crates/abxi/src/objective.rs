//! Negative sampling and the contrastive training loss.
//!
//! Every supervised position contributes `-log softmax(positive)` over the
//! temperature-scaled dot products between its recommendation state and the
//! candidate item embeddings (one positive, `n_neg` uniform same-domain
//! negatives drawn outside the user's history). Per-domain means are summed
//! into the sequence loss; a domain with no supervised positions contributes
//! nothing.

use std::collections::HashSet;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::SequenceBundle;
use crate::corpus::Domain;
use crate::error::{Error, Result};

/// Candidates for one supervised position: the positive item plus uniform
/// same-domain negatives, all distinct, none from the user's history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub positive: u32,
    pub negatives: Vec<u32>,
    pub domain: Domain,
}

impl CandidateSet {
    /// Items in scoring order: positive first.
    pub fn items(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(1 + self.negatives.len());
        v.push(self.positive);
        v.extend_from_slice(&self.negatives);
        v
    }
}

/// Uniform sample without replacement from
/// `domain_items \ user_history \ {positive}`.
pub fn sample_negatives(
    positive: u32,
    user_history: &HashSet<u32>,
    domain_items: Range<u32>,
    domain: Domain,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet> {
    let excluded: HashSet<u32> = user_history
        .iter()
        .copied()
        .filter(|i| domain_items.contains(i))
        .chain(std::iter::once(positive))
        .collect();
    let pool_size = domain_items.len() - excluded.len();
    if pool_size < n_neg {
        return Err(Error::Data(format!(
            "negative-sample pool has only {pool_size} item(s), need {n_neg}"
        )));
    }

    let negatives = if pool_size <= 2 * n_neg {
        // Small pool: materialize and partially shuffle.
        let mut pool: Vec<u32> = domain_items.filter(|i| !excluded.contains(i)).collect();
        for i in 0..n_neg {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n_neg);
        pool
    } else {
        // Large pool: rejection sampling.
        let mut chosen = HashSet::with_capacity(n_neg);
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let cand = rng.gen_range(domain_items.clone());
            if !excluded.contains(&cand) && chosen.insert(cand) {
                out.push(cand);
            }
        }
        out
    };

    Ok(CandidateSet {
        positive,
        negatives,
        domain,
    })
}

/// Contrastive loss for one position: `-log softmax_0(scores / tau)` where
/// row 0 of `cands` is the positive's embedding. Computed with
/// max-subtraction for stability.
pub fn info_nce(h: ArrayView1<f64>, cands: ArrayView2<f64>, tau: f64) -> Result<f64> {
    let (loss, _) = info_nce_with_probs(h, cands, tau)?;
    Ok(loss)
}

/// Loss plus the softmax probabilities over candidates (needed for grads).
pub fn info_nce_with_probs(
    h: ArrayView1<f64>,
    cands: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be > 0")));
    }
    if cands.ncols() != h.len() {
        return Err(Error::Shape(format!(
            "candidate width {} != state width {}",
            cands.ncols(),
            h.len()
        )));
    }
    if !h.iter().all(|v| v.is_finite()) || !cands.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite input to the loss".into()));
    }
    let scores = cands.dot(&h).mapv(|s| s / tau);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = scores.mapv(|s| (s - max).exp());
    let denom: f64 = exps.sum();
    let loss = denom.ln() + max - scores[0];
    Ok((loss, exps / denom))
}

/// Candidate sets for every supervised position of one bundle, in position
/// order per domain.
#[derive(Debug, Clone, Default)]
pub struct CandidateBatch {
    pub a: Vec<(usize, CandidateSet)>,
    pub b: Vec<(usize, CandidateSet)>,
}

impl CandidateBatch {
    /// Sample fresh candidates for every supervised position of `bundle`.
    pub fn sample(
        bundle: &SequenceBundle,
        user_history: &HashSet<u32>,
        items_a: Range<u32>,
        items_b: Range<u32>,
        n_neg: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<CandidateBatch> {
        let mut batch = CandidateBatch::default();
        for domain in [Domain::A, Domain::B] {
            let (range, out) = match domain {
                Domain::A => (items_a.clone(), &mut batch.a),
                Domain::B => (items_b.clone(), &mut batch.b),
            };
            for t in bundle.supervised_positions(domain) {
                let positive = bundle.gt_x[t].item;
                let set =
                    sample_negatives(positive, user_history, range.clone(), domain, n_neg, rng)?;
                out.push((t, set));
            }
        }
        Ok(batch)
    }
}

/// Gradients produced by the loss: with respect to the two recommendation
/// matrices and (sparsely) to the candidate item embeddings.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_rec_a: Array2<f64>,
    pub d_rec_b: Array2<f64>,
    pub d_items: Vec<(u32, Array1<f64>)>,
}

/// Sequence loss: mean contrastive loss over supervised A positions plus
/// the mean over supervised B positions.
pub fn total_loss(
    item_emb: &Array2<f64>,
    rec_a: &Array2<f64>,
    rec_b: &Array2<f64>,
    bundle: &SequenceBundle,
    cands: &CandidateBatch,
    tau: f64,
) -> Result<f64> {
    let (loss, _) = loss_impl(item_emb, rec_a, rec_b, bundle, cands, tau, false)?;
    Ok(loss)
}

/// Sequence loss together with its gradients.
pub fn total_loss_with_grads(
    item_emb: &Array2<f64>,
    rec_a: &Array2<f64>,
    rec_b: &Array2<f64>,
    bundle: &SequenceBundle,
    cands: &CandidateBatch,
    tau: f64,
) -> Result<(f64, LossGrads)> {
    let (loss, grads) = loss_impl(item_emb, rec_a, rec_b, bundle, cands, tau, true)?;
    Ok((loss, grads.expect("grads requested")))
}

fn loss_impl(
    item_emb: &Array2<f64>,
    rec_a: &Array2<f64>,
    rec_b: &Array2<f64>,
    bundle: &SequenceBundle,
    cands: &CandidateBatch,
    tau: f64,
    with_grads: bool,
) -> Result<(f64, Option<LossGrads>)> {
    let mut grads = with_grads.then(|| LossGrads {
        d_rec_a: Array2::zeros(rec_a.dim()),
        d_rec_b: Array2::zeros(rec_b.dim()),
        d_items: Vec::new(),
    });

    let mut loss = 0.0;
    for domain in [Domain::A, Domain::B] {
        let (rec, sets) = match domain {
            Domain::A => (rec_a, &cands.a),
            Domain::B => (rec_b, &cands.b),
        };
        let expected = bundle.supervised_positions(domain);
        if sets.len() != expected.len()
            || sets.iter().map(|(t, _)| *t).ne(expected.iter().copied())
        {
            return Err(Error::Data(format!(
                "candidate sets do not cover the supervised positions of domain {domain}"
            )));
        }
        if sets.is_empty() {
            continue;
        }
        let weight = 1.0 / sets.len() as f64;
        for (t, set) in sets {
            if bundle.gt_x[*t].item != set.positive {
                return Err(Error::Data(format!(
                    "candidate positive {} != target item {} at position {t}",
                    set.positive, bundle.gt_x[*t].item
                )));
            }
            let items = set.items();
            let mut cand_emb = Array2::zeros((items.len(), item_emb.ncols()));
            for (row, &item) in items.iter().enumerate() {
                cand_emb.row_mut(row).assign(&item_emb.row(item as usize));
            }
            let h = rec.row(*t);
            let (f, probs) = info_nce_with_probs(h, cand_emb.view(), tau)?;
            loss += weight * f;

            if let Some(g) = grads.as_mut() {
                // d(loss)/d(score_c) = weight * (p_c - [c == 0]) / tau.
                let mut coeff = probs;
                coeff[0] -= 1.0;
                coeff.mapv_inplace(|p| p * weight / tau);
                let d_rec = match domain {
                    Domain::A => &mut g.d_rec_a,
                    Domain::B => &mut g.d_rec_b,
                };
                let dh = cand_emb.t().dot(&coeff);
                d_rec.row_mut(*t).scaled_add(1.0, &dh);
                for (c, &item) in items.iter().enumerate() {
                    g.d_items.push((item, h.to_owned() * coeff[c]));
                }
            }
        }
    }
    Ok((loss, grads))
}

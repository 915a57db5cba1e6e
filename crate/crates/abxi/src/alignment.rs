//! Sequence construction for cross-domain next-item training.
//!
//! A user's merged interaction history is turned into three parallel token
//! streams sharing one position-wise ground-truth stream:
//!
//! * `seq_x` — the merged (cross-domain) input sequence,
//! * `seq_a`, `seq_b` — domain-specific inputs, task-aligned so that the
//!   token at position `t` is the latest same-domain item visible at `t`
//!   whenever the target at `t` belongs to that domain.
//!
//! Task-guided alignment guarantees that every supervised position of a
//! domain stream predicts the same item as `seq_x` does at that position,
//! which removes the input-domain/target-domain mismatch that in-place
//! (timestamp) masking suffers from. The timestamp variant is kept for
//! ablation.

use serde::{Deserialize, Serialize};

use crate::corpus::Domain;
use crate::error::{Error, Result};

/// Domain tag of one sequence slot. PAD slots carry item index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenDomain {
    A,
    B,
    Pad,
}

impl From<Domain> for TokenDomain {
    fn from(d: Domain) -> Self {
        match d {
            Domain::A => TokenDomain::A,
            Domain::B => TokenDomain::B,
        }
    }
}

/// One sequence slot: a global item index plus its domain tag.
/// `item == 0` if and only if `domain == Pad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub item: u32,
    pub domain: TokenDomain,
}

impl Token {
    pub fn new(item: u32, domain: Domain) -> Self {
        debug_assert!(item > 0, "real tokens use indices >= 1");
        Token {
            item,
            domain: domain.into(),
        }
    }

    pub fn pad() -> Self {
        Token {
            item: 0,
            domain: TokenDomain::Pad,
        }
    }

    pub fn is_pad(&self) -> bool {
        self.domain == TokenDomain::Pad
    }
}

/// How domain-specific input streams are derived from the merged stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Align each domain stream to the positions whose target is in-domain.
    Task,
    /// In-place masking that keeps original timeline positions. Reproduces
    /// the prediction-mismatch behaviour; used by the `V_ts` variant.
    Timestamp,
}

/// Aligned training tensors for one user.
///
/// All token lists share the same length `T' = |merged| - 1`. Position
/// indices are reverse-chronological per stream; PAD slots carry the
/// reserved index `max_len`. `loss_mask_a[t]` implies `gt_a[t] == gt_x[t]`
/// (same for B), so one ground-truth stream supervises all three inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBundle {
    pub seq_x: Vec<Token>,
    pub seq_a: Vec<Token>,
    pub seq_b: Vec<Token>,
    pub gt_x: Vec<Token>,
    pub gt_a: Vec<Token>,
    pub gt_b: Vec<Token>,
    pub pos_x: Vec<usize>,
    pub pos_a: Vec<usize>,
    pub pos_b: Vec<usize>,
    pub loss_mask_a: Vec<bool>,
    pub loss_mask_b: Vec<bool>,
}

impl SequenceBundle {
    pub fn len(&self) -> usize {
        self.seq_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_x.is_empty()
    }

    /// Prepend PAD slots so the bundle reaches `target_len`. Left-padding
    /// keeps reverse-chronological position 0 at the right edge; padded
    /// slots are excluded from attention keys and never supervised.
    pub fn left_pad(&self, target_len: usize, max_len: usize) -> SequenceBundle {
        assert!(target_len >= self.len());
        let extra = target_len - self.len();
        let pad_tokens = |seq: &[Token]| -> Vec<Token> {
            let mut out = vec![Token::pad(); extra];
            out.extend_from_slice(seq);
            out
        };
        let pad_pos = |pos: &[usize]| -> Vec<usize> {
            let mut out = vec![max_len; extra];
            out.extend_from_slice(pos);
            out
        };
        let pad_mask = |mask: &[bool]| -> Vec<bool> {
            let mut out = vec![false; extra];
            out.extend_from_slice(mask);
            out
        };
        SequenceBundle {
            seq_x: pad_tokens(&self.seq_x),
            seq_a: pad_tokens(&self.seq_a),
            seq_b: pad_tokens(&self.seq_b),
            gt_x: pad_tokens(&self.gt_x),
            gt_a: pad_tokens(&self.gt_a),
            gt_b: pad_tokens(&self.gt_b),
            pos_x: pad_pos(&self.pos_x),
            pos_a: pad_pos(&self.pos_a),
            pos_b: pad_pos(&self.pos_b),
            loss_mask_a: pad_mask(&self.loss_mask_a),
            loss_mask_b: pad_mask(&self.loss_mask_b),
        }
    }

    /// Supervised positions for one domain, in sequence order.
    pub fn supervised_positions(&self, domain: Domain) -> Vec<usize> {
        let mask = match domain {
            Domain::A => &self.loss_mask_a,
            Domain::B => &self.loss_mask_b,
        };
        mask.iter()
            .enumerate()
            .filter_map(|(t, &m)| if m { Some(t) } else { None })
            .collect()
    }
}

/// Split a merged sequence into input and target streams: the input drops
/// the last interaction, the target drops the first.
pub fn make_cross_sequences(merged: &[Token], max_len: usize) -> Result<(Vec<Token>, Vec<Token>)> {
    if merged.len() < 2 {
        return Err(Error::Data(format!(
            "merged sequence has {} token(s); need at least 2 to form an input/target pair",
            merged.len()
        )));
    }
    if merged.len() > max_len {
        return Err(Error::Data(format!(
            "merged sequence of length {} exceeds max_len {}",
            merged.len(),
            max_len
        )));
    }
    let seq_x = merged[..merged.len() - 1].to_vec();
    let gt_x = merged[1..].to_vec();
    Ok((seq_x, gt_x))
}

/// Keep only in-domain targets; everything else becomes PAD.
pub fn mask_ground_truth(gt_x: &[Token], domain: Domain) -> Vec<Token> {
    let tag: TokenDomain = domain.into();
    gt_x.iter()
        .map(|tok| if tok.domain == tag { *tok } else { Token::pad() })
        .collect()
}

/// Task-guided alignment of one domain stream.
///
/// At every position whose target is in-domain, the input slot is filled
/// with the most recent same-domain token of `seq_x[0..=t]`. Positions with
/// no in-domain history stay PAD and are excluded from the loss.
pub fn task_align(
    seq_x: &[Token],
    gt_d: &[Token],
    domain: Domain,
) -> Result<(Vec<Token>, Vec<bool>)> {
    if seq_x.len() != gt_d.len() {
        return Err(Error::Shape(format!(
            "seq_x length {} != gt length {}",
            seq_x.len(),
            gt_d.len()
        )));
    }
    let tag: TokenDomain = domain.into();
    let mut seq_d = Vec::with_capacity(seq_x.len());
    let mut mask = Vec::with_capacity(seq_x.len());
    let mut latest: Option<Token> = None;
    for (tok_x, tok_gt) in seq_x.iter().zip(gt_d.iter()) {
        if tok_x.domain == tag {
            latest = Some(*tok_x);
        }
        if tok_gt.is_pad() {
            seq_d.push(Token::pad());
            mask.push(false);
        } else {
            let slot = latest.unwrap_or_else(Token::pad);
            mask.push(!slot.is_pad());
            seq_d.push(slot);
        }
    }
    Ok((seq_d, mask))
}

/// In-place domain masking that keeps timeline positions (ablation `V_ts`).
/// Targets stay position-wise `gt_x`, so an input slot and its target can
/// belong to different domains.
pub fn timestamp_align(seq_x: &[Token], domain: Domain) -> Vec<Token> {
    let tag: TokenDomain = domain.into();
    seq_x
        .iter()
        .map(|tok| if tok.domain == tag { *tok } else { Token::pad() })
        .collect()
}

/// Reverse-chronological position indices: the last non-PAD token gets 0,
/// earlier non-PAD tokens count upward, PAD slots get the reserved index
/// `max_len`.
pub fn assign_positions(seq: &[Token], max_len: usize) -> Vec<usize> {
    let mut out = vec![max_len; seq.len()];
    let mut next = 0usize;
    for (t, tok) in seq.iter().enumerate().rev() {
        if !tok.is_pad() {
            out[t] = next;
            next += 1;
        }
    }
    out
}

/// Build the full training bundle for one merged sequence.
pub fn build_bundle(
    merged: &[Token],
    max_len: usize,
    mode: AlignmentMode,
) -> Result<SequenceBundle> {
    let (seq_x, gt_x) = make_cross_sequences(merged, max_len)?;
    let gt_a = mask_ground_truth(&gt_x, Domain::A);
    let gt_b = mask_ground_truth(&gt_x, Domain::B);
    let (seq_a, seq_b, loss_mask_a, loss_mask_b) = match mode {
        AlignmentMode::Task => {
            let (seq_a, mask_a) = task_align(&seq_x, &gt_a, Domain::A)?;
            let (seq_b, mask_b) = task_align(&seq_x, &gt_b, Domain::B)?;
            (seq_a, seq_b, mask_a, mask_b)
        }
        AlignmentMode::Timestamp => {
            // No domain-specific target stream of its own: every position
            // whose cross-domain target is in-domain is supervised.
            let seq_a = timestamp_align(&seq_x, Domain::A);
            let seq_b = timestamp_align(&seq_x, Domain::B);
            let mask_a: Vec<bool> = gt_a.iter().map(|t| !t.is_pad()).collect();
            let mask_b: Vec<bool> = gt_b.iter().map(|t| !t.is_pad()).collect();
            (seq_a, seq_b, mask_a, mask_b)
        }
    };
    let pos_x = assign_positions(&seq_x, max_len);
    let pos_a = assign_positions(&seq_a, max_len);
    let pos_b = assign_positions(&seq_b, max_len);
    Ok(SequenceBundle {
        seq_x,
        seq_a,
        seq_b,
        gt_x,
        gt_a,
        gt_b,
        pos_x,
        pos_a,
        pos_b,
        loss_mask_a,
        loss_mask_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(i: u32) -> Token {
        Token::new(i, Domain::A)
    }
    fn b(i: u32) -> Token {
        Token::new(i, Domain::B)
    }

    // [A1, B1, A2, B2, A3] with distinct item indices.
    fn sample_merged() -> Vec<Token> {
        vec![a(1), b(101), a(2), b(102), a(3)]
    }

    #[test]
    fn cross_sequences_drop_first_and_last() {
        let merged = sample_merged();
        let (seq_x, gt_x) = make_cross_sequences(&merged, 50).unwrap();
        assert_eq!(seq_x, vec![a(1), b(101), a(2), b(102)]);
        assert_eq!(gt_x, vec![b(101), a(2), b(102), a(3)]);
    }

    #[test]
    fn cross_sequences_minimal_and_error_cases() {
        let (seq_x, gt_x) = make_cross_sequences(&[a(1), a(2)], 50).unwrap();
        assert_eq!(seq_x, vec![a(1)]);
        assert_eq!(gt_x, vec![a(2)]);
        assert!(make_cross_sequences(&[a(1)], 50).is_err());
        assert!(make_cross_sequences(&[a(1); 51], 50).is_err());
    }

    #[test]
    fn ground_truth_masking() {
        let gt_x = vec![b(101), a(2), b(102), a(3)];
        assert_eq!(
            mask_ground_truth(&gt_x, Domain::A),
            vec![Token::pad(), a(2), Token::pad(), a(3)]
        );
        let all_a = vec![a(1), a(2)];
        assert_eq!(mask_ground_truth(&all_a, Domain::A), all_a);
        assert_eq!(
            mask_ground_truth(&all_a, Domain::B),
            vec![Token::pad(), Token::pad()]
        );
    }

    #[test]
    fn task_alignment_traces() {
        let seq_x = vec![a(1), b(101), a(2), b(102)];
        let gt_a = vec![Token::pad(), a(2), Token::pad(), a(3)];
        let (seq_a, mask_a) = task_align(&seq_x, &gt_a, Domain::A).unwrap();
        assert_eq!(seq_a, vec![Token::pad(), a(1), Token::pad(), a(2)]);
        assert_eq!(mask_a, vec![false, true, false, true]);

        let gt_b = vec![b(101), Token::pad(), b(102), Token::pad()];
        let (seq_b, mask_b) = task_align(&seq_x, &gt_b, Domain::B).unwrap();
        // t=0 has no earlier B item, so it is excluded from the loss.
        assert_eq!(seq_b, vec![Token::pad(), Token::pad(), b(101), Token::pad()]);
        assert_eq!(mask_b, vec![false, false, true, false]);
    }

    #[test]
    fn task_alignment_single_domain_reduces_to_next_item() {
        let seq_x = vec![a(1), a(2), a(3)];
        let gt_a = vec![a(2), a(3), a(4)];
        let (seq_a, mask_a) = task_align(&seq_x, &gt_a, Domain::A).unwrap();
        assert_eq!(seq_a, seq_x);
        assert_eq!(mask_a, vec![true, true, true]);
    }

    #[test]
    fn task_alignment_length_mismatch_errors() {
        let err = task_align(&[a(1)], &[a(2), a(3)], Domain::A);
        assert!(err.is_err());
    }

    #[test]
    fn timestamp_alignment_masks_in_place() {
        let seq_x = vec![a(1), b(101), a(2), b(102)];
        assert_eq!(
            timestamp_align(&seq_x, Domain::A),
            vec![a(1), Token::pad(), a(2), Token::pad()]
        );
        let all_a = vec![a(1), a(2)];
        assert_eq!(timestamp_align(&all_a, Domain::A), all_a);
        assert_eq!(
            timestamp_align(&all_a, Domain::B),
            vec![Token::pad(), Token::pad()]
        );
    }

    #[test]
    fn position_assignment() {
        let l = 50;
        let seq = vec![Token::pad(), a(1), Token::pad(), a(2)];
        assert_eq!(assign_positions(&seq, l), vec![l, 1, l, 0]);
        assert_eq!(assign_positions(&[Token::pad(); 3], l), vec![l, l, l]);
        assert_eq!(
            assign_positions(&[a(1), a(2), a(3), a(4)], l),
            vec![3, 2, 1, 0]
        );
    }

    #[test]
    fn left_pad_preserves_content_and_masks() {
        let merged = sample_merged();
        let bundle = build_bundle(&merged, 50, AlignmentMode::Task).unwrap();
        let padded = bundle.left_pad(7, 50);
        assert_eq!(padded.len(), 7);
        assert_eq!(&padded.seq_x[3..], &bundle.seq_x[..]);
        assert_eq!(&padded.pos_x[..3], &[50, 50, 50]);
        assert!(!padded.loss_mask_a[0] && !padded.loss_mask_b[2]);
        assert_eq!(&padded.loss_mask_a[3..], &bundle.loss_mask_a[..]);
        // Real-token positions unchanged: reverse-chronological 0 stays at the right edge.
        assert_eq!(*padded.pos_x.last().unwrap(), 0);
    }

    #[test]
    fn timestamp_bundle_supervises_all_target_positions() {
        let merged = sample_merged();
        let bundle = build_bundle(&merged, 50, AlignmentMode::Timestamp).unwrap();
        // gt_x = [B,A,B,A]; every A-target position supervises A, even the
        // ones whose input slot is PAD.
        assert_eq!(bundle.loss_mask_a, vec![false, true, false, true]);
        assert_eq!(bundle.loss_mask_b, vec![true, false, true, false]);
        assert_eq!(
            bundle.seq_a,
            vec![a(1), Token::pad(), a(2), Token::pad()]
        );
    }

    fn random_merged_strategy() -> impl Strategy<Value = Vec<Token>> {
        proptest::collection::vec((1u32..500, proptest::bool::ANY), 2..=50).prop_map(|items| {
            items
                .into_iter()
                .map(|(i, is_a)| {
                    if is_a {
                        Token::new(i, Domain::A)
                    } else {
                        Token::new(500 + i, Domain::B)
                    }
                })
                .collect()
        })
    }

    proptest! {
        // Supervised positions always predict the unified cross-domain target.
        #[test]
        fn target_unification(merged in random_merged_strategy()) {
            let bundle = build_bundle(&merged, 50, AlignmentMode::Task).unwrap();
            for t in 0..bundle.len() {
                if bundle.loss_mask_a[t] {
                    prop_assert_eq!(bundle.gt_a[t], bundle.gt_x[t]);
                }
                if bundle.loss_mask_b[t] {
                    prop_assert_eq!(bundle.gt_b[t], bundle.gt_x[t]);
                }
            }
        }

        // A-target and B-target positions partition the sequence; the loss
        // masks are subsets of their respective sides.
        #[test]
        fn domain_partition(merged in random_merged_strategy()) {
            let bundle = build_bundle(&merged, 50, AlignmentMode::Task).unwrap();
            for t in 0..bundle.len() {
                let is_a = bundle.gt_x[t].domain == TokenDomain::A;
                let is_b = bundle.gt_x[t].domain == TokenDomain::B;
                prop_assert!(is_a ^ is_b);
                prop_assert!(!bundle.loss_mask_a[t] || is_a);
                prop_assert!(!bundle.loss_mask_b[t] || is_b);
                prop_assert_eq!(bundle.gt_a[t].is_pad(), !is_a);
                prop_assert_eq!(bundle.gt_b[t].is_pad(), !is_b);
            }
        }

        // Every aligned token at position <= t originated at a position <= t
        // of seq_x: alignment never moves information backward in time.
        #[test]
        fn causality(merged in random_merged_strategy()) {
            let bundle = build_bundle(&merged, 50, AlignmentMode::Task).unwrap();
            for (seq_d, mask) in [
                (&bundle.seq_a, &bundle.loss_mask_a),
                (&bundle.seq_b, &bundle.loss_mask_b),
            ] {
                for t in 0..bundle.len() {
                    if !mask[t] {
                        continue;
                    }
                    for (u, tok) in seq_d.iter().enumerate().take(t + 1) {
                        if tok.is_pad() {
                            continue;
                        }
                        let origin = bundle.seq_x[..=u.max(t).min(t)]
                            .iter()
                            .position(|x| x == tok);
                        prop_assert!(origin.is_some_and(|o| o <= t));
                    }
                }
            }
        }

        // Non-PAD tokens of an aligned stream form a prefix-ordered
        // subsequence of seq_x's in-domain tokens.
        #[test]
        fn aligned_stream_is_subsequence(merged in random_merged_strategy()) {
            let bundle = build_bundle(&merged, 50, AlignmentMode::Task).unwrap();
            let domain_tokens: Vec<Token> = bundle
                .seq_x
                .iter()
                .filter(|t| t.domain == TokenDomain::A)
                .copied()
                .collect();
            let mut cursor = 0usize;
            for tok in bundle.seq_a.iter().filter(|t| !t.is_pad()) {
                let found = domain_tokens[cursor..].iter().position(|d| d == tok);
                prop_assert!(found.is_some());
                cursor += found.unwrap();
            }
        }
    }
}

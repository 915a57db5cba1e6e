//! Interaction-log ingestion, preprocessing, and leave-one-out splitting.
//!
//! Raw logs are CSV or JSON-lines rows of `user_id,item_id,domain,timestamp`.
//! Preprocessing keeps users active in both domains, applies an item
//! occurrence threshold, truncates each user to the latest `max_len`
//! interactions, and re-checks domain coverage. Item indices are assigned
//! contiguously per domain; index 0 is PAD across both domains.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::Token;
use crate::error::{Error, Result};

/// One of the two item domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps dataset-specific domain labels onto A/B. The literal labels "A" and
/// "B" are always accepted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMap(pub BTreeMap<String, Domain>);

impl DomainMap {
    pub fn resolve(&self, label: &str) -> Option<Domain> {
        match self.0.get(label) {
            Some(d) => Some(*d),
            None => match label {
                "A" => Some(Domain::A),
                "B" => Some(Domain::B),
                _ => None,
            },
        }
    }

    /// Parse a CLI-style spec like `Food=A,Kitchen=B`.
    pub fn parse(spec: &str) -> Result<DomainMap> {
        let mut map = BTreeMap::new();
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, label) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("bad domain-map entry '{part}', expected NAME=A|B"))
            })?;
            let domain = match label.trim() {
                "A" => Domain::A,
                "B" => Domain::B,
                other => {
                    return Err(Error::Config(format!(
                        "domain-map entry '{part}' maps to '{other}', expected A or B"
                    )))
                }
            };
            map.insert(name.trim().to_string(), domain);
        }
        Ok(DomainMap(map))
    }
}

/// One raw interaction record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: i64,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    user_id: String,
    item_id: String,
    domain: String,
    timestamp: i64,
}

fn row_to_interaction(row: RawRow, line: usize, map: &DomainMap) -> Result<Interaction> {
    let domain = map.resolve(&row.domain).ok_or_else(|| Error::Parse {
        line,
        msg: format!("unknown domain label '{}'", row.domain),
    })?;
    if row.timestamp < 0 {
        return Err(Error::Parse {
            line,
            msg: format!("negative timestamp {}", row.timestamp),
        });
    }
    Ok(Interaction {
        user_id: row.user_id,
        item_id: row.item_id,
        domain,
        timestamp: row.timestamp,
    })
}

/// Parse an interaction log. The format is detected from the first
/// non-blank byte: `{` means JSON-lines, anything else a headered CSV.
/// Records are returned in input order; no sorting or deduplication.
pub fn load_interactions(mut source: impl BufRead, map: &DomainMap) -> Result<Vec<Interaction>> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    if text.trim_start().starts_with('{') {
        load_jsonl(&text, map)
    } else {
        load_csv(&text, map)
    }
}

fn load_jsonl(text: &str, map: &DomainMap) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(row_to_interaction(row, line_no, map)?);
    }
    Ok(out)
}

fn load_csv(text: &str, map: &DomainMap) -> Result<Vec<Interaction>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize::<RawRow>() {
        // Data rows start after the header line.
        let line = out.len() + 2;
        let row = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(row_to_interaction(row, line, map)?);
    }
    Ok(out)
}

/// One interaction after preprocessing: global item index plus its domain
/// and original timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEvent {
    pub item: u32,
    pub domain: Domain,
    pub timestamp: i64,
}

impl CorpusEvent {
    pub fn token(&self) -> Token {
        Token::new(self.item, self.domain)
    }
}

/// One user's chronological event sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<CorpusEvent>,
}

impl UserSequence {
    pub fn tokens(&self) -> Vec<Token> {
        self.events.iter().map(CorpusEvent::token).collect()
    }
}

/// Filtered corpus with per-domain contiguous item vocabularies.
/// Domain-A items occupy indices `1..=n_items_a`, domain-B items
/// `n_items_a+1..=n_items_a+n_items_b`; 0 is PAD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub users: Vec<UserSequence>,
    pub vocab_a: BTreeMap<String, u32>,
    pub vocab_b: BTreeMap<String, u32>,
    pub n_items_a: u32,
    pub n_items_b: u32,
}

impl Corpus {
    pub fn n_items_total(&self) -> u32 {
        self.n_items_a + self.n_items_b
    }

    /// Global index range of one domain's items.
    pub fn domain_items(&self, domain: Domain) -> Range<u32> {
        match domain {
            Domain::A => 1..self.n_items_a + 1,
            Domain::B => self.n_items_a + 1..self.n_items_total() + 1,
        }
    }

    pub fn domain_of(&self, item: u32) -> Option<Domain> {
        if item >= 1 && item <= self.n_items_a {
            Some(Domain::A)
        } else if item > self.n_items_a && item <= self.n_items_total() {
            Some(Domain::B)
        } else {
            None
        }
    }

    /// Reconstruct raw rows (used to re-run preprocessing on a corpus).
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut names: Vec<&str> = vec![""; self.n_items_total() as usize + 1];
        for (raw, idx) in self.vocab_a.iter().chain(self.vocab_b.iter()) {
            names[*idx as usize] = raw;
        }
        let mut out = Vec::new();
        for user in &self.users {
            for ev in &user.events {
                out.push(Interaction {
                    user_id: user.user_id.clone(),
                    item_id: names[ev.item as usize].to_string(),
                    domain: ev.domain,
                    timestamp: ev.timestamp,
                });
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("corpus serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad corpus file: {e}")))
    }

    /// Dataset statistics in the usual reporting layout.
    pub fn manifest(&self) -> Result<Manifest> {
        let split = split_leave_one_out(self)?;
        let mut m = Manifest {
            users: self.users.len(),
            items_a: self.n_items_a,
            items_b: self.n_items_b,
            ..Manifest::default()
        };
        for user in &self.users {
            for pair in user.events.windows(2) {
                match (pair[0].domain, pair[1].domain) {
                    (Domain::A, Domain::B) => m.transitions_ab += 1,
                    (Domain::B, Domain::A) => m.transitions_ba += 1,
                    _ => {}
                }
            }
            for ev in &user.events {
                match ev.domain {
                    Domain::A => m.interactions_a += 1,
                    Domain::B => m.interactions_b += 1,
                }
            }
        }
        for user in &split.users {
            match user.val_gt.domain {
                Domain::A => m.val_gts_a += 1,
                Domain::B => m.val_gts_b += 1,
            }
            match user.test_gt.domain {
                Domain::A => m.test_gts_a += 1,
                Domain::B => m.test_gts_b += 1,
            }
        }
        Ok(m)
    }
}

/// Corpus statistics mirroring the standard dataset table columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub users: usize,
    pub items_a: u32,
    pub items_b: u32,
    pub interactions_a: usize,
    pub interactions_b: usize,
    pub val_gts_a: usize,
    pub val_gts_b: usize,
    pub test_gts_a: usize,
    pub test_gts_b: usize,
    pub transitions_ab: usize,
    pub transitions_ba: usize,
}

/// Apply the preprocessing pipeline:
/// 1. keep users with at least one interaction in each domain,
/// 2. sort each user chronologically (stable, so equal timestamps keep
///    input order),
/// 3. drop items with fewer than `min_item_count` interactions among the
///    retained users (single pass, not iterated to a fixed point),
/// 4. truncate each user to the latest `max_len` interactions,
/// 5. drop users that no longer cover both domains.
pub fn preprocess(log: &[Interaction], min_item_count: usize, max_len: usize) -> Result<Corpus> {
    if min_item_count < 1 {
        return Err(Error::Config("min_item_count must be >= 1".into()));
    }
    if max_len < 2 {
        return Err(Error::Config("max_len must be >= 2".into()));
    }

    // (1) group by user, demand both domains.
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for rec in log {
        by_user.entry(&rec.user_id).or_default().push(rec);
    }
    by_user.retain(|_, recs| {
        recs.iter().any(|r| r.domain == Domain::A) && recs.iter().any(|r| r.domain == Domain::B)
    });

    // (2) chronological order, input order on ties.
    for recs in by_user.values_mut() {
        recs.sort_by_key(|r| r.timestamp);
    }

    // (3) item occurrence threshold among retained users.
    let mut counts: BTreeMap<(Domain, &str), usize> = BTreeMap::new();
    for recs in by_user.values() {
        for r in recs {
            *counts.entry((r.domain, &r.item_id)).or_default() += 1;
        }
    }
    for recs in by_user.values_mut() {
        recs.retain(|r| counts[&(r.domain, r.item_id.as_str())] >= min_item_count);
    }

    // (4) latest `max_len` interactions. (5) both domains still present.
    let mut kept: Vec<(&str, Vec<&Interaction>)> = Vec::new();
    for (user, mut recs) in by_user {
        if recs.len() > max_len {
            recs.drain(..recs.len() - max_len);
        }
        let has_a = recs.iter().any(|r| r.domain == Domain::A);
        let has_b = recs.iter().any(|r| r.domain == Domain::B);
        if has_a && has_b {
            kept.push((user, recs));
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("empty corpus after filtering".into()));
    }

    // Contiguous per-domain indices over the surviving items, in raw-id order.
    let mut items_a: Vec<&str> = Vec::new();
    let mut items_b: Vec<&str> = Vec::new();
    for (_, recs) in &kept {
        for r in recs {
            match r.domain {
                Domain::A => items_a.push(&r.item_id),
                Domain::B => items_b.push(&r.item_id),
            }
        }
    }
    items_a.sort_unstable();
    items_a.dedup();
    items_b.sort_unstable();
    items_b.dedup();

    let vocab_a: BTreeMap<String, u32> = items_a
        .iter()
        .enumerate()
        .map(|(i, raw)| (raw.to_string(), i as u32 + 1))
        .collect();
    let offset = items_a.len() as u32;
    let vocab_b: BTreeMap<String, u32> = items_b
        .iter()
        .enumerate()
        .map(|(i, raw)| (raw.to_string(), offset + i as u32 + 1))
        .collect();

    let users = kept
        .into_iter()
        .map(|(user_id, recs)| UserSequence {
            user_id: user_id.to_string(),
            events: recs
                .into_iter()
                .map(|r| CorpusEvent {
                    item: match r.domain {
                        Domain::A => vocab_a[&r.item_id],
                        Domain::B => vocab_b[&r.item_id],
                    },
                    domain: r.domain,
                    timestamp: r.timestamp,
                })
                .collect(),
        })
        .collect();

    Ok(Corpus {
        users,
        vocab_a,
        vocab_b,
        n_items_a: offset,
        n_items_b: items_b.len() as u32,
    })
}

/// Last held-out interaction of one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub item: u32,
    pub domain: Domain,
}

impl GroundTruth {
    pub fn token(&self) -> Token {
        Token::new(self.item, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Token>,
    pub val_gt: GroundTruth,
    pub test_gt: GroundTruth,
}

impl UserSplit {
    /// All item indices the user ever touched (train, validation, test).
    /// Used as the exclusion set for negative sampling.
    pub fn history_items(&self) -> std::collections::HashSet<u32> {
        let mut set: std::collections::HashSet<u32> =
            self.train.iter().map(|t| t.item).collect();
        set.insert(self.val_gt.item);
        set.insert(self.test_gt.item);
        set
    }
}

/// Leave-one-out split: last interaction is the test ground truth, the one
/// before it the validation ground truth, the rest is training input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub users: Vec<UserSplit>,
}

pub fn split_leave_one_out(corpus: &Corpus) -> Result<Split> {
    let mut users = Vec::with_capacity(corpus.users.len());
    for user in &corpus.users {
        let n = user.events.len();
        if n < 3 {
            return Err(Error::Data(format!(
                "user '{}' has only {} interaction(s); need >= 3 for leave-one-out",
                user.user_id, n
            )));
        }
        let test = user.events[n - 1];
        let val = user.events[n - 2];
        users.push(UserSplit {
            user_id: user.user_id.clone(),
            train: user.events[..n - 2].iter().map(CorpusEvent::token).collect(),
            val_gt: GroundTruth {
                item: val.item,
                domain: val.domain,
            },
            test_gt: GroundTruth {
                item: test.item,
                domain: test.domain,
            },
        });
    }
    Ok(Split { users })
}

//! Classification, matching and contrastive losses, and the cross-domain
//! match function `Ω`.
//!
//! `Ω` pairs every training sample with a sample of the same class from a
//! different domain. Contrastive and matching terms are evaluated only on
//! pairs whose two members both sit in the current mini-batch.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::{Array2, Tape, Var};

/// Floor inside loss-level norms: `‖c‖ = sqrt(Σc² + ε²)`.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CosDist,
    L1,
    L2,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos_dist" | "cos" => Ok(Metric::CosDist),
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// How per-pair and per-sample terms are combined within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("unknown reduction {other:?}"))),
        }
    }
}

impl Reduction {
    pub fn apply(self, tape: &Tape, v: Var) -> Var {
        match self {
            Reduction::Mean => tape.mean(v),
            Reduction::Sum => tape.sum(v),
        }
    }
}

/// Identity of one batch member.
#[derive(Clone, Copy, Debug)]
pub struct MemberRef<'a> {
    pub sample_id: &'a str,
    pub domain_id: &'a str,
    pub y: Label,
}

/// A batch member with its concrete causal-feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRep {
    pub sample_id: String,
    pub domain_id: String,
    pub y: Label,
    pub c: Vec<f64>,
}

impl BatchRep {
    fn member(&self) -> MemberRef<'_> {
        MemberRef {
            sample_id: &self.sample_id,
            domain_id: &self.domain_id,
            y: self.y,
        }
    }
}

/// `Ω` as a map from sample id to its matched partner.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub partners: BTreeMap<String, String>,
}

impl MatchAssignment {
    pub fn partner(&self, sample_id: &str) -> Option<&str> {
        self.partners.get(sample_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.partners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partners.is_empty()
    }

    /// Batch-position pairs `(j, m)` with `Ω(j) = m` and both present.
    pub fn realized_pairs(&self, members: &[MemberRef<'_>]) -> Vec<(usize, usize)> {
        let pos: HashMap<&str, usize> = members
            .iter()
            .enumerate()
            .map(|(i, m)| (m.sample_id, i))
            .collect();
        members
            .iter()
            .enumerate()
            .filter_map(|(j, m)| {
                let partner = self.partner(m.sample_id)?;
                pos.get(partner).map(|&p| (j, p))
            })
            .collect()
    }
}

/// Per-component losses of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    /// Negative ELBO.
    pub l_v: f64,
    pub l_r: f64,
    pub l_con: f64,
    pub total: f64,
}

pub fn total_loss(l_y: f64, neg_elbo: f64, l_r: f64, gamma: f64, lambda: f64) -> f64 {
    l_y + gamma * neg_elbo + lambda * l_r
}

/// Per-row cross-entropy `−log softmax(logits)[y]`, `batch×1`.
pub fn cross_entropy_tape(tape: &Tape, logits: Var, labels: &[Label]) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits, None)?;
    let picked: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, y)| (i, y.index())).collect();
    let target = tape.gather(logits, &picked)?;
    tape.sub(lse, target)
}

pub fn cross_entropy(logits: &[f64], y: Label) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cross-entropy of non-finite logits".into()));
    }
    let tape = Tape::new();
    let l = tape.leaf(Array2::row_vector(logits));
    Ok(tape.scalar(cross_entropy_tape(&tape, l, &[y])?))
}

/// `aᵀb / (‖a‖‖b‖)`; zero-norm inputs are rejected.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_sim",
            lhs: (1, a.len()),
            rhs: (1, b.len()),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Rows scaled to (floored) unit norm.
pub fn normalize_rows_tape(tape: &Tape, c: Var) -> Result<Var> {
    let sq = tape.sum_rows(tape.square(c));
    let norm = tape.sqrt(tape.offset(sq, NORM_EPS * NORM_EPS))?;
    tape.div(c, norm)
}

/// Per-pair contrastive losses (`k×1`) over realized in-batch positive pairs,
/// or `None` when the batch holds no pair.
pub fn contrastive_tape(
    tape: &Tape,
    c: Var,
    members: &[MemberRef<'_>],
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = members.len();
    let cn = normalize_rows_tape(tape, c)?;
    let sims = tape.matmul(cn, tape.transpose(cn))?;
    let logits = tape.scale(sims, 1.0 / tau);
    let rows: Vec<usize> = pairs.iter().map(|&(j, _)| j).collect();
    let selected = tape.select_rows(logits, &rows)?;
    let mut mask = vec![false; pairs.len() * n];
    for (k, &(j, m)) in pairs.iter().enumerate() {
        for i in 0..n {
            mask[k * n + i] = i == m || members[i].y != members[j].y;
        }
    }
    let lse = tape.logsumexp_rows(selected, Some(&mask))?;
    let positive = tape.gather(logits, pairs)?;
    Ok(Some(tape.sub(lse, positive)?))
}

/// Mean contrastive loss over realized positive pairs; 0 when none are realized.
pub fn contrastive_loss(batch: &[BatchRep], omega: &MatchAssignment, tau: f64) -> Result<f64> {
    let (tape, c, members) = batch_on_tape(batch)?;
    let pairs = omega.realized_pairs(&members);
    match contrastive_tape(&tape, c, &members, &pairs, tau)? {
        Some(per_pair) => Ok(tape.scalar(tape.mean(per_pair))),
        None => {
            log::warn!("contrastive loss: no realized positive pair in batch");
            Ok(0.0)
        }
    }
}

/// Per-pair distances `k×1` between rows `j` and `m` of `c`.
pub fn matching_tape(tape: &Tape, c: Var, pairs: &[(usize, usize)], metric: Metric) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let (js, ms): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let d = match metric {
        Metric::CosDist => {
            let cn = normalize_rows_tape(tape, c)?;
            let a = tape.select_rows(cn, &js)?;
            let b = tape.select_rows(cn, &ms)?;
            let cos = tape.sum_rows(tape.mul(a, b)?);
            tape.offset(tape.neg(cos), 1.0)
        }
        Metric::L1 => {
            let diff = tape.sub(tape.select_rows(c, &js)?, tape.select_rows(c, &ms)?)?;
            tape.sum_rows(tape.abs(diff))
        }
        Metric::L2 => {
            let diff = tape.sub(tape.select_rows(c, &js)?, tape.select_rows(c, &ms)?)?;
            tape.sqrt(tape.sum_rows(tape.square(diff)))?
        }
    };
    Ok(Some(d))
}

/// Mean distance over realized in-batch matched pairs; 0 when none.
pub fn matching_loss(batch: &[BatchRep], omega: &MatchAssignment, metric: Metric) -> Result<f64> {
    let (tape, c, members) = batch_on_tape(batch)?;
    let pairs = omega.realized_pairs(&members);
    Ok(match matching_tape(&tape, c, &pairs, metric)? {
        Some(d) => tape.scalar(tape.mean(d)),
        None => 0.0,
    })
}

fn batch_on_tape(batch: &[BatchRep]) -> Result<(Tape, Var, Vec<MemberRef<'_>>)> {
    let dim = batch.first().map_or(0, |b| b.c.len());
    let rows: Vec<&[f64]> = batch.iter().map(|b| b.c.as_slice()).collect();
    let c = Array2::from_rows(&rows)?;
    if c.cols() != dim {
        return Err(Error::Usage("batch representations differ in length".into()));
    }
    let tape = Tape::new();
    let v = tape.leaf(c);
    Ok((tape, v, batch.iter().map(BatchRep::member).collect()))
}

/// Distance used to choose nearest neighbours; matches the loss-level metric.
pub fn pair_distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::CosDist => {
            let na = (a.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
            let nb = (b.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        }
        Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

fn eligible(a: &BatchRep, b: &BatchRep) -> bool {
    a.y == b.y && a.domain_id != b.domain_id
}

/// Nearest eligible partner (same class, other domain) for every sample;
/// ties go to the smallest sample id. Samples with no eligible partner are
/// left out.
pub fn update_match(reps: &[BatchRep], metric: Metric) -> MatchAssignment {
    let chosen: Vec<Option<(String, String)>> = reps
        .par_iter()
        .map(|j| {
            let mut best: Option<(f64, &str)> = None;
            for m in reps.iter().filter(|m| eligible(j, m)) {
                let d = pair_distance(&j.c, &m.c, metric);
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && m.sample_id.as_str() < bid),
                };
                if better {
                    best = Some((d, &m.sample_id));
                }
            }
            best.map(|(_, id)| (j.sample_id.clone(), id.to_string()))
        })
        .collect();
    let mut partners = BTreeMap::new();
    for (rep, c) in reps.iter().zip(chosen) {
        match c {
            Some((k, v)) => {
                partners.insert(k, v);
            }
            None => log::debug!("no eligible match for {}", rep.sample_id),
        }
    }
    MatchAssignment { partners }
}

/// Uniformly random eligible partner for every sample.
pub fn init_random_match<R: Rng + ?Sized>(reps: &[MemberRef<'_>], rng: &mut R) -> MatchAssignment {
    let mut partners = BTreeMap::new();
    for j in reps {
        let mut candidates: Vec<&str> = reps
            .iter()
            .filter(|m| m.y == j.y && m.domain_id != j.domain_id)
            .map(|m| m.sample_id)
            .collect();
        candidates.sort_unstable();
        if let Some(m) = candidates.choose(rng) {
            partners.insert(j.sample_id.to_string(), m.to_string());
        } else {
            log::debug!("no eligible match for {}", j.sample_id);
        }
    }
    MatchAssignment { partners }
}

/// Mean distance between every sample's representation and its partner's.
pub fn mean_match_distance(reps: &[BatchRep], omega: &MatchAssignment, metric: Metric) -> f64 {
    let by_id: HashMap<&str, &BatchRep> = reps.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let dists: Vec<f64> = reps
        .iter()
        .filter_map(|r| {
            let p = by_id.get(omega.partner(&r.sample_id)?)?;
            Some(pair_distance(&r.c, &p.c, metric))
        })
        .collect();
    if dists.is_empty() {
        0.0
    } else {
        dists.iter().sum::<f64>() / dists.len() as f64
    }
}

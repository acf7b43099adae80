//! All-ranking evaluation: per-user rank of the held-out item against the
//! whole catalog, Recall@N / NDCG@N, and the alignment / uniformity
//! representation diagnostics.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{build_batch, SequenceBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward, register_params, ModelParams};
use crate::tensor::Real;

/// Metrics plus diagnostics for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<f64>,
    pub n_users: usize,
    pub config: serde_json::Value,
}

/// 1-based pessimistic rank: every other candidate with a score greater
/// than or equal to the target's counts as ranked above it. Adding a
/// constant to all scores cannot change the result.
pub fn rank_from_scores(scores: &[f64], target: usize, excluded: Option<&[bool]>) -> usize {
    let ts = scores[target];
    let mut above = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if j == target {
            continue;
        }
        if let Some(ex) = excluded {
            if ex[j] {
                continue;
            }
        }
        if s >= ts {
            above += 1;
        }
    }
    1 + above
}

pub fn recall_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("recall over an empty rank list".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= n).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn ndcg_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("ndcg over an empty rank list".into()));
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| if r <= n { 1.0 / ((r as f64) + 1.0).log2() } else { 0.0 })
        .sum();
    Ok(sum / ranks.len() as f64)
}

fn normalize_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!("row {i} has zero norm")));
            }
            Ok(r.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// Mean squared distance of paired rows after L2 normalization
/// (alignment with exponent 2; 0 iff all pairs coincide).
pub fn alignment_metric(pooled_id: &[Vec<f64>], pooled_con: &[Vec<f64>]) -> Result<f64> {
    assert_eq!(pooled_id.len(), pooled_con.len(), "paired inputs required");
    if pooled_id.is_empty() {
        return Err(Error::Data("alignment over an empty set".into()));
    }
    let a = normalize_rows(pooled_id)?;
    let b = normalize_rows(pooled_con)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(&b) {
        acc += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    Ok(acc / a.len() as f64)
}

/// Log average Gaussian potential over distinct unordered pairs of
/// L2-normalized rows, with t = 2. Always <= 0; 0 iff all points coincide.
pub fn uniformity_metric(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Data("uniformity needs at least two rows".into()));
    }
    let x = normalize_rows(rows)?;
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let d2: f64 = x[i]
                .iter()
                .zip(&x[j])
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            acc += (-2.0 * d2).exp();
            pairs += 1;
        }
    }
    Ok((acc / pairs as f64).ln())
}

/// Final-step scores of each example against the whole catalog, plus the
/// mean-pooled unimodal representations when the mode has both streams.
pub struct ScoredExamples {
    /// Per example: `vocab` scores.
    pub scores: Vec<Vec<f64>>,
    pub pooled_id: Option<Vec<Vec<f64>>>,
    pub pooled_con: Option<Vec<Vec<f64>>>,
}

pub fn score_examples<T: Real>(
    params: &ModelParams<T>,
    examples: &[(&str, &[usize], usize)],
    eval_batch: usize,
) -> Result<ScoredExamples> {
    let dims = &params.dims;
    let two_stream = params.mode.is_two_stream();
    let mut scores = Vec::with_capacity(examples.len());
    let mut pooled_id = two_stream.then(Vec::new);
    let mut pooled_con = two_stream.then(Vec::new);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;

    for chunk in examples.chunks(eval_batch.max(1)) {
        let batch: SequenceBatch = build_batch(chunk, dims.max_len, dims.pad());
        let mut g = Graph::<T>::new();
        let pv = register_params(&mut g, params);
        let trace = forward(&mut g, &pv, params, &batch, 0.0, &mut rng)?;
        let t = dims.max_len;
        let logits = g.value(trace.logits);
        for b in 0..batch.batch {
            let row = logits.row(b * t + (t - 1));
            scores.push(row.iter().map(|v| v.as_f64()).collect());
        }
        if two_stream {
            let mask: Rc<Vec<bool>> = trace.mask.clone();
            let pid = g.masked_mean_pool(trace.f_id.unwrap(), mask.clone(), batch.batch, t)?;
            let pcon = g.masked_mean_pool(trace.f_con.unwrap(), mask, batch.batch, t)?;
            let (vid, vcon) = (g.value(pid), g.value(pcon));
            for b in 0..batch.batch {
                pooled_id
                    .as_mut()
                    .unwrap()
                    .push(vid.row(b).iter().map(|v| v.as_f64()).collect());
                pooled_con
                    .as_mut()
                    .unwrap()
                    .push(vcon.row(b).iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    Ok(ScoredExamples {
        scores,
        pooled_id,
        pooled_con,
    })
}

/// All-ranking: 1-based rank of every example's ground-truth item.
pub fn all_rank<T: Real>(
    params: &ModelParams<T>,
    examples: &[(&str, &[usize], usize)],
    exclude_history: bool,
    eval_batch: usize,
) -> Result<Vec<usize>> {
    let scored = score_examples(params, examples, eval_batch)?;
    Ok(ranks_from_scored(&scored.scores, examples, exclude_history, params.dims.vocab))
}

pub fn ranks_from_scored(
    scores: &[Vec<f64>],
    examples: &[(&str, &[usize], usize)],
    exclude_history: bool,
    vocab: usize,
) -> Vec<usize> {
    examples
        .iter()
        .zip(scores)
        .map(|((_, input, target), s)| {
            if exclude_history {
                let mut ex = vec![false; vocab];
                for &it in input.iter() {
                    if it < vocab {
                        ex[it] = true;
                    }
                }
                rank_from_scores(s, *target, Some(&ex))
            } else {
                rank_from_scores(s, *target, None)
            }
        })
        .collect()
}

pub const REPORT_CUTOFFS: [usize; 2] = [10, 20];

/// Full evaluation of one split part. Diagnostics need both streams, so
/// single-stream modes report them as absent.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    examples: &[(&str, &[usize], usize)],
    diagnostics: bool,
    exclude_history: bool,
    eval_batch: usize,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let scored = score_examples(params, examples, eval_batch)?;
    let ranks = ranks_from_scored(&scored.scores, examples, exclude_history, params.dims.vocab);
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for n in REPORT_CUTOFFS {
        recall.insert(n.to_string(), recall_at_n(&ranks, n)?);
        ndcg.insert(n.to_string(), ndcg_at_n(&ranks, n)?);
    }
    let (mut alignment, mut uniformity) = (None, None);
    if diagnostics {
        if let (Some(pid), Some(pcon)) = (&scored.pooled_id, &scored.pooled_con) {
            alignment = Some(alignment_metric(pid, pcon)?);
            let mut union = pid.clone();
            union.extend(pcon.iter().cloned());
            uniformity = Some(uniformity_metric(&union)?);
        }
    }
    Ok(EvalReport {
        recall,
        ndcg,
        alignment,
        uniformity,
        n_users: ranks.len(),
        config,
    })
}

//! Training objectives: user-grained and item-grained cross-modal
//! contrasting plus autoregressive cross-entropy, combined as a weighted
//! multi-task sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Temperature and task trade-offs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 10.0) {
            return Err(Error::Config(format!(
                "temperature must be in (0, 10], got {}",
                self.tau
            )));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

/// Mean over mask-true positions of each sequence: `(batch*t) x d` -> `batch x d`.
pub fn mean_pool<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    mask: &Rc<Vec<bool>>,
    batch: usize,
    t: usize,
) -> Result<Var> {
    g.masked_mean_pool(x, mask.clone(), batch, t)
}

/// User-grained contrast: symmetric InfoNCE over mean-pooled sequence
/// representations with cosine similarity and in-batch negatives. Both
/// directional terms are summed per user, then averaged over the batch.
/// A single-user batch carries no negatives and contributes zero.
pub fn user_contrastive_loss<T: Real>(
    g: &mut Graph<T>,
    f_id: Var,
    f_con: Var,
    mask: &Rc<Vec<bool>>,
    batch: usize,
    t: usize,
    tau: f64,
) -> Result<Var> {
    assert!(tau > 0.0, "temperature must be positive");
    if batch == 1 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let pooled_id = g.masked_mean_pool(f_id, mask.clone(), batch, t)?;
    let pooled_con = g.masked_mean_pool(f_con, mask.clone(), batch, t)?;
    let nid = g.l2_normalize_rows(pooled_id).map_err(zero_pooled)?;
    let ncon = g.l2_normalize_rows(pooled_con).map_err(zero_pooled)?;

    let sim = g.matmul_nt(nid, ncon);
    let sim = g.scale(sim, T::from_f64(1.0 / tau));
    let diag_idx: Rc<Vec<usize>> = Rc::new((0..batch).collect());
    let diag = g.pick_per_row(sim, diag_idx);
    let lse_id_to_con = g.logsumexp_rows(sim);
    let sim_t = g.transpose2d(sim);
    let lse_con_to_id = g.logsumexp_rows(sim_t);

    let term1 = g.sub(lse_id_to_con, diag);
    let term2 = g.sub(lse_con_to_id, diag);
    let both = g.add(term1, term2);
    Ok(g.mean_all(both))
}

fn zero_pooled(e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("pooled representation: {msg}")),
        other => other,
    }
}

/// Item-grained contrast: at every step `l` where `l` and `l+1` are both
/// real, the step-`l` encoder state predicts the step-`l+1` raw embedding of
/// the other modality (inner-product similarity). The candidate set is the
/// flattened collection of all valid targets in the batch; both directions
/// are summed and the total is averaged per valid (user, step) pair.
#[allow(clippy::too_many_arguments)]
pub fn item_contrastive_loss<T: Real>(
    g: &mut Graph<T>,
    f_id: Var,
    f_con: Var,
    e_id_raw: Var,
    e_con_raw: Var,
    mask: &Rc<Vec<bool>>,
    batch: usize,
    t: usize,
    tau: f64,
) -> Result<Var> {
    assert!(tau > 0.0, "temperature must be positive");
    let mut anchor_rows = Vec::new();
    let mut target_rows = Vec::new();
    for b in 0..batch {
        for l in 0..t.saturating_sub(1) {
            if mask[b * t + l] && mask[b * t + l + 1] {
                anchor_rows.push(b * t + l);
                target_rows.push(b * t + l + 1);
            }
        }
    }
    let pairs = anchor_rows.len();
    if pairs == 0 {
        return Err(Error::Data(
            "item contrast needs at least one adjacent pair of real positions".into(),
        ));
    }
    let anchor_rows = Rc::new(anchor_rows);
    let target_rows = Rc::new(target_rows);
    let diag_idx: Rc<Vec<usize>> = Rc::new((0..pairs).collect());
    let inv_tau = T::from_f64(1.0 / tau);

    let directional = |g: &mut Graph<T>, anchors_src: Var, targets_src: Var| -> Var {
        let anchors = g.gather_rows(anchors_src, anchor_rows.clone());
        let targets = g.gather_rows(targets_src, target_rows.clone());
        let sim = g.matmul_nt(anchors, targets);
        let sim = g.scale(sim, inv_tau);
        let diag = g.pick_per_row(sim, diag_idx.clone());
        let lse = g.logsumexp_rows(sim);
        let per_pair = g.sub(lse, diag);
        g.sum_all(per_pair)
    };

    let id_to_con = directional(g, f_id, e_con_raw);
    let con_to_id = directional(g, f_con, e_id_raw);
    let total = g.add(id_to_con, con_to_id);
    Ok(g.scale(total, T::from_f64(1.0 / pairs as f64)))
}

/// Autoregressive cross-entropy over real items, averaged across mask-true
/// positions. `pad` targets inside the counted region are a contract
/// violation and error out.
pub fn autoregressive_ce_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    pad: usize,
) -> Result<Var> {
    let rows = g.value(logits).rows();
    assert_eq!(targets.len(), rows, "one target per logit row");
    assert_eq!(mask.len(), rows, "one mask flag per logit row");
    let mut valid_rows = Vec::new();
    let mut valid_targets = Vec::new();
    for i in 0..rows {
        if mask[i] {
            if targets[i] == pad {
                return Err(Error::Data(format!(
                    "position {i} is mask-true but its target is PAD"
                )));
            }
            valid_rows.push(i);
            valid_targets.push(targets[i]);
        }
    }
    if valid_rows.is_empty() {
        return Err(Error::Data("cross-entropy has no valid positions".into()));
    }
    let picked_logits = g.gather_rows(logits, Rc::new(valid_rows));
    let lse = g.logsumexp_rows(picked_logits);
    let target_logit = g.pick_per_row(picked_logits, Rc::new(valid_targets));
    let per_pos = g.sub(lse, target_logit);
    Ok(g.mean_all(per_pos))
}

/// Weighted multi-task sum. Absent contrastive terms (single-stream modes)
/// contribute nothing regardless of their trade-off weights.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    l_u: Option<Var>,
    l_i: Option<Var>,
    l_ce: Var,
    cfg: &ContrastConfig,
) -> Var {
    let mut total = g.scale(l_ce, T::from_f64(cfg.lambda3));
    if let Some(lu) = l_u {
        let t = g.scale(lu, T::from_f64(cfg.lambda1));
        total = g.add(total, t);
    }
    if let Some(li) = l_i {
        let t = g.scale(li, T::from_f64(cfg.lambda2));
        total = g.add(total, t);
    }
    total
}

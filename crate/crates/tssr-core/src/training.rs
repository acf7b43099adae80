//! Adam optimization, the epoch loop with per-epoch validation, early
//! selection on validation NDCG@10, and the JSONL-ready epoch history.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_batch, subsample_train, train_examples, ContentTable, DatasetSplit, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{all_rank, ndcg_at_n, recall_at_n};
use crate::graph::Graph;
use crate::model::{forward, register_params, ModelDims, ModelMode, ModelParams};
use crate::objectives::{
    autoregressive_ce_loss, item_contrastive_loss, total_loss, user_contrastive_loss,
    ContrastConfig,
};
use crate::tensor::{Real, Tensor};

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    256
}
fn default_tau() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    1.0
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}
fn default_mode() -> ModelMode {
    ModelMode::Tssr
}
fn default_dropout() -> f64 {
    0.1
}
fn default_max_len() -> usize {
    10
}
fn default_d() -> usize {
    128
}
fn default_l_uni() -> usize {
    2
}
fn default_l_multi() -> usize {
    1
}
fn default_heads() -> usize {
    4
}
fn default_fraction() -> f64 {
    1.0
}
fn default_min_count() -> usize {
    5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

/// Complete training configuration; every field has a paper-default so a
/// partial JSON config (or an empty one) is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_lambda")]
    pub lambda3: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ModelMode,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_l_uni")]
    pub l_uni: usize,
    #[serde(default = "default_l_multi")]
    pub l_multi: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_min_count")]
    pub min_user_count: usize,
    #[serde(default = "default_min_count")]
    pub min_item_count: usize,
    #[serde(default = "default_true")]
    pub multimodal_ffn: bool,
    #[serde(default)]
    pub content_frozen: bool,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1]".into()));
        }
        self.contrast().validate()
    }

    pub fn dims(&self, vocab: usize, dim_raw: usize) -> ModelDims {
        ModelDims {
            vocab,
            dim_raw,
            d: self.d,
            max_len: self.max_len,
            heads: self.heads,
            l_uni: self.l_uni,
            l_multi: self.l_multi,
            multimodal_ffn: self.multimodal_ffn,
            content_frozen: self.content_frozen,
        }
    }
}

/// Per-parameter Adam moments, aligned with the model's tensor listing.
pub struct AdamState<T> {
    pub step: u64,
    slots: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let slots = params
            .tensor_names()
            .into_iter()
            .map(|name| {
                let shape = params.tensor(&name).shape().to_vec();
                (name, Tensor::zeros(shape.clone()), Tensor::zeros(shape))
            })
            .collect();
        AdamState { step: 0, slots }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of a flat parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_slice<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - beta2.powi(step as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step over all named gradients. PAD embedding rows are
/// held at zero, frozen tensors are skipped, and a non-finite gradient
/// aborts with the offending tensor's name.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    for (name, grad) in grads {
        if params.is_frozen(name) {
            continue;
        }
        if !grad.is_all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let mut grad = grad.clone();
        if ModelParams::<T>::has_pad_row(name) {
            let last = grad.rows() - 1;
            for g in grad.row_mut(last) {
                *g = T::zero();
            }
        }
        let slot = state
            .slots
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("no optimizer slot for '{name}'"));
        let param = params.tensor_mut(name);
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
        adam_update_slice(
            param.data_mut(),
            grad.data(),
            slot.1.data_mut(),
            slot.2.data_mut(),
            step,
            lr,
            beta1,
            beta2,
            eps,
        );
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
}

/// One epoch's history record, serialized as a JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_u")]
    pub l_u: f64,
    #[serde(rename = "L_i")]
    pub l_i: f64,
    #[serde(rename = "L_ce")]
    pub l_ce: f64,
    pub total: f64,
    pub val_recall10: f64,
    pub val_ndcg10: f64,
    pub wall_ms: u64,
}

pub struct TrainOutcome<T> {
    /// Best-by-validation parameters (last good parameters on divergence).
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged: bool,
}

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (index & 0xffff_ffff));
    rng
}

/// Seed used for the train-fraction subsample, derived from the run seed.
pub fn subsample_seed(seed: u64) -> u64 {
    seed ^ 0x5ab5_ab5a_b5ab_5ab5
}

/// Full training loop: seeded shuffling, Adam updates, per-epoch validation
/// NDCG@10, early selection with patience, divergence abort.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    content: Option<&ContentTable>,
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let split = subsample_train(split, cfg.train_fraction, subsample_seed(cfg.seed))?;
    let dim_raw = content.map(|c| c.dim_raw).unwrap_or(0);
    let dims = cfg.dims(vocab.len(), dim_raw);
    let mut params = ModelParams::<T>::init(cfg.mode, dims.clone(), content, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let contrast = cfg.contrast();
    let two_stream = cfg.mode.is_two_stream();
    let pad = dims.pad();

    let examples = train_examples(&split.train);
    if examples.is_empty() {
        return Err(Error::Data("no trainable sequences".into()));
    }
    let val = crate::data::eval_examples(&split.validation);

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;
    let mut since_best = 0usize;
    let mut diverged = false;
    // Params as of the last fully completed epoch; the divergence fallback.
    let mut last_good = params.clone();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, 1, epoch as u64));
        let mut dropout_rng = stream_rng(cfg.seed, 2, epoch as u64);

        let mut sums = [0.0f64; 4]; // L_u, L_i, L_ce, total
        let mut weights = [0.0f64; 4];

        for chunk in order.chunks(cfg.batch_size) {
            let batch_examples: Vec<(&str, &[usize], usize)> =
                chunk.iter().map(|&i| examples[i]).collect();
            let batch = build_batch(&batch_examples, cfg.max_len, pad);
            let b = batch.batch;

            // One optimization step. A non-finite loss, non-finite
            // attention scores, or a non-finite gradient all mean the run
            // has diverged; training aborts keeping the last good state.
            let step = (|| -> Result<Option<(f64, f64, f64, f64, usize)>> {
                let mut g = Graph::<T>::new();
                let pv = register_params(&mut g, &params);
                let trace =
                    forward(&mut g, &pv, &params, &batch, cfg.dropout, &mut dropout_rng)?;

                let (mut l_u, mut l_i) = (None, None);
                let mut pair_count = 0usize;
                if two_stream && contrast.lambda1 > 0.0 {
                    l_u = Some(user_contrastive_loss(
                        &mut g,
                        trace.f_id.unwrap(),
                        trace.f_con.unwrap(),
                        &trace.mask,
                        b,
                        cfg.max_len,
                        contrast.tau,
                    )?);
                }
                if two_stream && contrast.lambda2 > 0.0 {
                    // A batch of single-step contexts has no adjacent pairs
                    // and simply contributes no item-grained term.
                    pair_count = count_adjacent_pairs(&batch.mask, b, cfg.max_len);
                    if pair_count > 0 {
                        l_i = Some(item_contrastive_loss(
                            &mut g,
                            trace.f_id.unwrap(),
                            trace.f_con.unwrap(),
                            trace.e_id_raw.unwrap(),
                            trace.e_con_raw.unwrap(),
                            &trace.mask,
                            b,
                            cfg.max_len,
                            contrast.tau,
                        )?);
                    }
                }
                let l_ce =
                    autoregressive_ce_loss(&mut g, trace.logits, &batch.target, &batch.mask, pad)?;
                let total = total_loss(&mut g, l_u, l_i, l_ce, &contrast);

                let total_val = g.value(total).scalar_value().as_f64();
                if !total_val.is_finite() {
                    return Ok(None);
                }
                let lu_val = l_u.map(|v| g.value(v).scalar_value().as_f64()).unwrap_or(0.0);
                let li_val = l_i.map(|v| g.value(v).scalar_value().as_f64()).unwrap_or(0.0);
                let lce_val = g.value(l_ce).scalar_value().as_f64();

                let grads_by_node = g.backward(total);
                let mut grads: Vec<(String, Tensor<T>)> = Vec::new();
                for (name, var) in pv.named() {
                    if let Some(grad) = grads_by_node.get(*var) {
                        grads.push((name.clone(), grad.clone()));
                    }
                }
                if let Some(max_norm) = cfg.clip_norm {
                    clip_gradients(&mut grads, max_norm);
                }
                adam_step(
                    &mut params,
                    &grads,
                    &mut state,
                    cfg.learning_rate,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPS,
                )?;
                Ok(Some((lu_val, li_val, lce_val, total_val, pair_count)))
            })();

            match step {
                Ok(Some((lu_val, li_val, lce_val, total_val, pair_count))) => {
                    sums[0] += lu_val * b as f64;
                    weights[0] += b as f64;
                    sums[1] += li_val * pair_count as f64;
                    weights[1] += pair_count as f64;
                    sums[2] += lce_val * b as f64;
                    weights[2] += b as f64;
                    sums[3] += total_val * b as f64;
                    weights[3] += b as f64;
                }
                Ok(None) | Err(Error::Numeric(_)) | Err(Error::NonFiniteGradient(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let (val_recall10, val_ndcg10) = if val.is_empty() {
            (0.0, 0.0)
        } else {
            let ranks = all_rank(&params, &val, false, cfg.batch_size)?;
            (recall_at_n(&ranks, 10)?, ndcg_at_n(&ranks, 10)?)
        };

        let rec = EpochRecord {
            epoch,
            l_u: if weights[0] > 0.0 { sums[0] / weights[0] } else { 0.0 },
            l_i: if weights[1] > 0.0 { sums[1] / weights[1] } else { 0.0 },
            l_ce: if weights[2] > 0.0 { sums[2] / weights[2] } else { 0.0 },
            total: if weights[3] > 0.0 { sums[3] / weights[3] } else { 0.0 },
            val_recall10,
            val_ndcg10,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if std::env::var_os("TSSR_PROGRESS").is_some() {
            eprintln!(
                "epoch {:>3}: total {:.4} (L_u {:.4} L_i {:.4} L_ce {:.4}) val ndcg@10 {:.4} [{} ms]",
                rec.epoch, rec.total, rec.l_u, rec.l_i, rec.l_ce, rec.val_ndcg10, rec.wall_ms
            );
        }
        history.push(rec);

        last_good = params.clone();

        let improved = best
            .as_ref()
            .map(|(b, _, _)| val_ndcg10 > *b)
            .unwrap_or(true);
        if improved {
            best = Some((val_ndcg10, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, chosen) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, last_good),
    };
    Ok(TrainOutcome {
        params: chosen,
        history,
        best_epoch,
        diverged,
    })
}

fn count_adjacent_pairs(mask: &[bool], batch: usize, t: usize) -> usize {
    let mut n = 0;
    for b in 0..batch {
        for l in 0..t - 1 {
            if mask[b * t + l] && mask[b * t + l + 1] {
                n += 1;
            }
        }
    }
    n
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("history record serializes"));
        out.push('\n');
    }
    out
}

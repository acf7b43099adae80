//! The two-stream network: embedding layers, parallel causal unimodal
//! transformer encoders, parallel cross-attention multimodal encoders, gate
//! fusion, and inner-product item scoring, plus the single-stream ablation
//! modes and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ContentTable, SequenceBatch};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    #[serde(rename = "tssr")]
    Tssr,
    #[serde(rename = "id")]
    IdOnly,
    #[serde(rename = "content")]
    ContentOnly,
    #[serde(rename = "hybrid")]
    HybridConcat,
}

impl ModelMode {
    pub fn is_two_stream(self) -> bool {
        matches!(self, ModelMode::Tssr)
    }

    pub fn uses_content(self) -> bool {
        !matches!(self, ModelMode::IdOnly)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tssr" => Ok(ModelMode::Tssr),
            "id" => Ok(ModelMode::IdOnly),
            "content" => Ok(ModelMode::ContentOnly),
            "hybrid" => Ok(ModelMode::HybridConcat),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected tssr|id|content|hybrid)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Tssr => "tssr",
            ModelMode::IdOnly => "id",
            ModelMode::ContentOnly => "content",
            ModelMode::HybridConcat => "hybrid",
        }
    }
}

/// Everything needed to allocate the parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of real items `|I|`; PAD is the extra row at index `vocab`.
    pub vocab: usize,
    pub dim_raw: usize,
    pub d: usize,
    pub max_len: usize,
    pub heads: usize,
    pub l_uni: usize,
    pub l_multi: usize,
    /// Include the feed-forward sublayer in the multimodal blocks.
    pub multimodal_ffn: bool,
    /// Keep the content embedding rows fixed at their loaded values.
    pub content_frozen: bool,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.vocab
    }

    fn d_ff(&self) -> usize {
        // Two-layer position-wise feed-forward with hidden width d.
        self.d
    }
}

/// One transformer block's weights (self- or cross-attention alike).
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    /// Keys carry no bias: a shared key offset shifts all attention logits
    /// of a query equally and softmax cancels it.
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> LayerParams<T> {
    fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |r: usize, c: usize, rng: &mut ChaCha8Rng| Tensor::randn(vec![r, c], INIT_STD, rng);
        LayerParams {
            wq: w(d, d, rng),
            bq: Tensor::zeros(vec![d]),
            wk: w(d, d, rng),
            wv: w(d, d, rng),
            bv: Tensor::zeros(vec![d]),
            wo: w(d, d, rng),
            bo: Tensor::zeros(vec![d]),
            w1: w(d, d_ff, rng),
            b1: Tensor::zeros(vec![d_ff]),
            w2: w(d_ff, d, rng),
            b2: Tensor::zeros(vec![d]),
            ln1_g: Tensor::full(vec![d], T::one()),
            ln1_b: Tensor::zeros(vec![d]),
            ln2_g: Tensor::full(vec![d], T::one()),
            ln2_b: Tensor::zeros(vec![d]),
        }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            wq: Tensor::zeros(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: Tensor::zeros(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
            w1: Tensor::zeros(vec![d, d_ff]),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::zeros(vec![d_ff, d]),
            b2: Tensor::zeros(vec![d]),
            ln1_g: Tensor::zeros(vec![d]),
            ln1_b: Tensor::zeros(vec![d]),
            ln2_g: Tensor::zeros(vec![d]),
            ln2_b: Tensor::zeros(vec![d]),
        }
    }

    const FIELDS: [&'static str; 15] = [
        "wq", "bq", "wk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b",
        "ln2_g", "ln2_b",
    ];

    fn field(&self, name: &str) -> &Tensor<T> {
        match name {
            "wq" => &self.wq,
            "bq" => &self.bq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "bv" => &self.bv,
            "wo" => &self.wo,
            "bo" => &self.bo,
            "w1" => &self.w1,
            "b1" => &self.b1,
            "w2" => &self.w2,
            "b2" => &self.b2,
            "ln1_g" => &self.ln1_g,
            "ln1_b" => &self.ln1_b,
            "ln2_g" => &self.ln2_g,
            "ln2_b" => &self.ln2_b,
            _ => unreachable!("unknown layer field {name}"),
        }
    }

    fn field_mut(&mut self, name: &str) -> &mut Tensor<T> {
        match name {
            "wq" => &mut self.wq,
            "bq" => &mut self.bq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "bv" => &mut self.bv,
            "wo" => &mut self.wo,
            "bo" => &mut self.bo,
            "w1" => &mut self.w1,
            "b1" => &mut self.b1,
            "w2" => &mut self.w2,
            "b2" => &mut self.b2,
            "ln1_g" => &mut self.ln1_g,
            "ln1_b" => &mut self.ln1_b,
            "ln2_g" => &mut self.ln2_g,
            "ln2_b" => &mut self.ln2_b,
            _ => unreachable!("unknown layer field {name}"),
        }
    }
}

/// All learnable tensors. Components that a mode does not use stay `None`
/// (or empty), so checkpoints only carry what the mode trains.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub mode: ModelMode,
    pub dims: ModelDims,
    /// `(vocab+1) x d`; PAD row frozen at zero. Also the output scoring
    /// table in every mode.
    pub m_id: Tensor<T>,
    pub p_id: Option<Tensor<T>>,
    pub p_con: Option<Tensor<T>>,
    /// `(vocab+1) x dim_raw`, initialized from the content table.
    pub content_rows: Option<Tensor<T>>,
    /// `dim_raw x d`, no bias so zero content rows stay zero.
    pub w_proj: Option<Tensor<T>>,
    /// `2d x d` projection for the concatenated-input ablation.
    pub hybrid_w: Option<Tensor<T>>,
    pub enc_id: Vec<LayerParams<T>>,
    pub enc_con: Vec<LayerParams<T>>,
    pub cross_id: Vec<LayerParams<T>>,
    pub cross_con: Vec<LayerParams<T>>,
    pub gate_w: Option<Tensor<T>>,
    pub gate_b: Option<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: weights from N(0, 0.02^2), biases zero,
    /// layer-norm affines identity, PAD rows zero.
    pub fn init(
        mode: ModelMode,
        dims: ModelDims,
        content: Option<&ContentTable>,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let d_ff = dims.d_ff();

        let mut m_id = Tensor::randn(vec![dims.vocab + 1, d], INIT_STD, &mut rng);
        zero_row(&mut m_id, dims.vocab);

        let needs_content = mode.uses_content();
        let content_rows = if needs_content {
            let table = content.ok_or_else(|| {
                Error::Config(format!(
                    "mode '{}' needs a content table",
                    mode.as_str()
                ))
            })?;
            if table.dim_raw != dims.dim_raw {
                return Err(Error::Config(format!(
                    "content width {} does not match configured dim_raw {}",
                    table.dim_raw, dims.dim_raw
                )));
            }
            if table.n_rows() != dims.vocab + 1 {
                return Err(Error::VocabMismatch(format!(
                    "content table has {} rows, expected {}",
                    table.n_rows(),
                    dims.vocab + 1
                )));
            }
            Some(Tensor::new(
                vec![dims.vocab + 1, dims.dim_raw],
                table.rows.iter().map(|&v| T::from_f32(v)).collect(),
            ))
        } else {
            None
        };
        let w_proj = needs_content
            .then(|| Tensor::randn(vec![dims.dim_raw, d], INIT_STD, &mut rng));

        let p_id = matches!(
            mode,
            ModelMode::Tssr | ModelMode::IdOnly | ModelMode::HybridConcat
        )
        .then(|| Tensor::randn(vec![dims.max_len, d], INIT_STD, &mut rng));
        let p_con = matches!(mode, ModelMode::Tssr | ModelMode::ContentOnly)
            .then(|| Tensor::randn(vec![dims.max_len, d], INIT_STD, &mut rng));

        let hybrid_w = matches!(mode, ModelMode::HybridConcat)
            .then(|| Tensor::randn(vec![2 * d, d], INIT_STD, &mut rng));

        let id_layers = match mode {
            ModelMode::Tssr | ModelMode::IdOnly | ModelMode::HybridConcat => dims.l_uni,
            ModelMode::ContentOnly => 0,
        };
        let con_layers = match mode {
            ModelMode::Tssr | ModelMode::ContentOnly => dims.l_uni,
            _ => 0,
        };
        let cross_layers = if mode.is_two_stream() { dims.l_multi } else { 0 };

        let enc_id = (0..id_layers)
            .map(|_| LayerParams::init(d, d_ff, &mut rng))
            .collect();
        let enc_con = (0..con_layers)
            .map(|_| LayerParams::init(d, d_ff, &mut rng))
            .collect();
        let cross_id = (0..cross_layers)
            .map(|_| LayerParams::init(d, d_ff, &mut rng))
            .collect();
        let cross_con = (0..cross_layers)
            .map(|_| LayerParams::init(d, d_ff, &mut rng))
            .collect();

        let gate_w = mode
            .is_two_stream()
            .then(|| Tensor::randn(vec![2 * d, d], INIT_STD, &mut rng));
        let gate_b = mode.is_two_stream().then(|| Tensor::zeros(vec![d]));

        Ok(ModelParams {
            mode,
            dims,
            m_id,
            p_id,
            p_con,
            content_rows,
            w_proj,
            hybrid_w,
            enc_id,
            enc_con,
            cross_id,
            cross_con,
            gate_w,
            gate_b,
        })
    }

    /// Zero-valued allocation with the same component layout as `init`;
    /// used by the checkpoint loader.
    fn allocate(mode: ModelMode, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let d_ff = dims.d_ff();
        let needs_content = mode.uses_content();
        let id_layers = match mode {
            ModelMode::Tssr | ModelMode::IdOnly | ModelMode::HybridConcat => dims.l_uni,
            ModelMode::ContentOnly => 0,
        };
        let con_layers = match mode {
            ModelMode::Tssr | ModelMode::ContentOnly => dims.l_uni,
            _ => 0,
        };
        let cross_layers = if mode.is_two_stream() { dims.l_multi } else { 0 };
        Ok(ModelParams {
            mode,
            dims: dims.clone(),
            m_id: Tensor::zeros(vec![dims.vocab + 1, d]),
            p_id: matches!(
                mode,
                ModelMode::Tssr | ModelMode::IdOnly | ModelMode::HybridConcat
            )
            .then(|| Tensor::zeros(vec![dims.max_len, d])),
            p_con: matches!(mode, ModelMode::Tssr | ModelMode::ContentOnly)
                .then(|| Tensor::zeros(vec![dims.max_len, d])),
            content_rows: needs_content
                .then(|| Tensor::zeros(vec![dims.vocab + 1, dims.dim_raw])),
            w_proj: needs_content.then(|| Tensor::zeros(vec![dims.dim_raw, d])),
            hybrid_w: matches!(mode, ModelMode::HybridConcat)
                .then(|| Tensor::zeros(vec![2 * d, d])),
            enc_id: (0..id_layers).map(|_| LayerParams::zeros(d, d_ff)).collect(),
            enc_con: (0..con_layers).map(|_| LayerParams::zeros(d, d_ff)).collect(),
            cross_id: (0..cross_layers).map(|_| LayerParams::zeros(d, d_ff)).collect(),
            cross_con: (0..cross_layers).map(|_| LayerParams::zeros(d, d_ff)).collect(),
            gate_w: mode.is_two_stream().then(|| Tensor::zeros(vec![2 * d, d])),
            gate_b: mode.is_two_stream().then(|| Tensor::zeros(vec![d])),
        })
    }

    /// Fixed-order listing of every tensor; the single source of truth for
    /// the optimizer, the checkpoint format, and gradient checking.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["m_id".to_string()];
        if self.p_id.is_some() {
            names.push("p_id".into());
        }
        if self.p_con.is_some() {
            names.push("p_con".into());
        }
        if self.content_rows.is_some() {
            names.push("content_rows".into());
        }
        if self.w_proj.is_some() {
            names.push("w_proj".into());
        }
        if self.hybrid_w.is_some() {
            names.push("hybrid_w".into());
        }
        for (stack, prefix) in [
            (&self.enc_id, "enc_id"),
            (&self.enc_con, "enc_con"),
            (&self.cross_id, "cross_id"),
            (&self.cross_con, "cross_con"),
        ] {
            for l in 0..stack.len() {
                for f in LayerParams::<T>::FIELDS {
                    names.push(format!("{prefix}.{l}.{f}"));
                }
            }
        }
        if self.gate_w.is_some() {
            names.push("gate_w".into());
        }
        if self.gate_b.is_some() {
            names.push("gate_b".into());
        }
        names
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        if let Some((prefix, rest)) = name.split_once('.') {
            let (layer, field) = rest.split_once('.').expect("layer tensor name");
            let idx: usize = layer.parse().expect("layer index");
            let stack = match prefix {
                "enc_id" => &self.enc_id,
                "enc_con" => &self.enc_con,
                "cross_id" => &self.cross_id,
                "cross_con" => &self.cross_con,
                _ => unreachable!("unknown stack {prefix}"),
            };
            return stack[idx].field(field);
        }
        match name {
            "m_id" => &self.m_id,
            "p_id" => self.p_id.as_ref().unwrap(),
            "p_con" => self.p_con.as_ref().unwrap(),
            "content_rows" => self.content_rows.as_ref().unwrap(),
            "w_proj" => self.w_proj.as_ref().unwrap(),
            "hybrid_w" => self.hybrid_w.as_ref().unwrap(),
            "gate_w" => self.gate_w.as_ref().unwrap(),
            "gate_b" => self.gate_b.as_ref().unwrap(),
            _ => unreachable!("unknown tensor {name}"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor<T> {
        if let Some((prefix, rest)) = name.split_once('.') {
            let (layer, field) = rest.split_once('.').expect("layer tensor name");
            let idx: usize = layer.parse().expect("layer index");
            let stack = match prefix {
                "enc_id" => &mut self.enc_id,
                "enc_con" => &mut self.enc_con,
                "cross_id" => &mut self.cross_id,
                "cross_con" => &mut self.cross_con,
                _ => unreachable!("unknown stack {prefix}"),
            };
            return stack[idx].field_mut(field);
        }
        match name {
            "m_id" => &mut self.m_id,
            "p_id" => self.p_id.as_mut().unwrap(),
            "p_con" => self.p_con.as_mut().unwrap(),
            "content_rows" => self.content_rows.as_mut().unwrap(),
            "w_proj" => self.w_proj.as_mut().unwrap(),
            "hybrid_w" => self.hybrid_w.as_mut().unwrap(),
            "gate_w" => self.gate_w.as_mut().unwrap(),
            "gate_b" => self.gate_b.as_mut().unwrap(),
            _ => unreachable!("unknown tensor {name}"),
        }
    }

    /// Tensors excluded from optimizer updates.
    pub fn is_frozen(&self, name: &str) -> bool {
        name == "content_rows" && self.dims.content_frozen
    }

    /// Names whose last row is the PAD row and must stay zero.
    pub fn has_pad_row(name: &str) -> bool {
        name == "m_id" || name == "content_rows"
    }

    pub fn convert<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::allocate(self.mode, self.dims.clone())
            .expect("dims already validated");
        for name in self.tensor_names() {
            let src = self.tensor(&name).map(|v| U::from_f64(v.as_f64()));
            *out.tensor_mut(&name) = src;
        }
        out
    }
}

fn zero_row<T: Real>(t: &mut Tensor<T>, row: usize) {
    for v in t.row_mut(row) {
        *v = T::zero();
    }
}

/// Graph handles of the registered parameters, aligned with
/// [`ModelParams::tensor_names`].
pub struct ParamVars {
    named: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Registers every parameter as a graph leaf. Frozen tensors join the graph
/// without requesting gradients.
pub fn register_params<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>) -> ParamVars {
    let named = params
        .tensor_names()
        .into_iter()
        .map(|name| {
            let rg = !params.is_frozen(&name);
            let var = g.leaf(params.tensor(&name).clone(), rg);
            (name, var)
        })
        .collect();
    ParamVars { named }
}

/// Stage outputs of one forward pass, as graph handles.
pub struct ForwardTrace {
    /// Pre-positional embeddings (the item-grained contrast targets).
    pub e_id_raw: Option<Var>,
    pub e_con_raw: Option<Var>,
    /// Unimodal encoder outputs.
    pub f_id: Option<Var>,
    pub f_con: Option<Var>,
    /// Multimodal encoder outputs.
    pub fbar_id: Option<Var>,
    pub fbar_con: Option<Var>,
    /// Gate matrix `S` (two-stream mode only).
    pub gate_s: Option<Var>,
    /// Representation fed to scoring.
    pub fused: Var,
    /// `(batch*max_len) x vocab` scores over real items.
    pub logits: Var,
    /// Shared position validity mask (batch*max_len).
    pub mask: Rc<Vec<bool>>,
}

struct StreamCtx {
    batch: usize,
    t: usize,
    heads: usize,
    attn: Rc<AttnMask>,
}

fn layer_vars(pv: &ParamVars, prefix: &str, l: usize) -> [Var; 15] {
    let mut out = [pv.get("m_id"); 15];
    for (i, f) in LayerParams::<f64>::FIELDS.iter().enumerate() {
        out[i] = pv.get(&format!("{prefix}.{l}.{f}"));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_block<T: Real, R: Rng>(
    g: &mut Graph<T>,
    lv: &[Var; 15],
    query_src: Var,
    kv_src: Var,
    ctx: &StreamCtx,
    with_ffn: bool,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let [wq, bq, wk, wv, bv, wo, bo, w1, b1, w2, b2, ln1_g, ln1_b, ln2_g, ln2_b] = *lv;
    let d = g.value(query_src).cols();
    let dh = d / ctx.heads;

    let q = g.matmul(query_src, wq);
    let q = g.add_bias(q, bq);
    let k = g.matmul(kv_src, wk);
    let v = g.matmul(kv_src, wv);
    let v = g.add_bias(v, bv);

    let q3 = g.split_heads(q, ctx.batch, ctx.t, ctx.heads);
    let k3 = g.split_heads(k, ctx.batch, ctx.t, ctx.heads);
    let v3 = g.split_heads(v, ctx.batch, ctx.t, ctx.heads);

    let scores = g.bmm_nt(q3, k3);
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = g.attn_masked_softmax(scores, ctx.attn.clone())?;
    let probs = g.dropout(probs, dropout, rng);
    let ctx3 = g.bmm(probs, v3);
    let merged = g.merge_heads(ctx3, ctx.batch, ctx.t, ctx.heads);
    let proj = g.matmul(merged, wo);
    let proj = g.add_bias(proj, bo);

    let res1 = g.add(query_src, proj);
    let y1 = g.layer_norm_rows(res1, ln1_g, ln1_b, T::from_f64(LN_EPS))?;

    if !with_ffn {
        return Ok(y1);
    }
    let h = g.matmul(y1, w1);
    let h = g.add_bias(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    let out = g.add_bias(out, b2);
    let out = g.dropout(out, dropout, rng);
    let res2 = g.add(y1, out);
    let y2 = g.layer_norm_rows(res2, ln2_g, ln2_b, T::from_f64(LN_EPS))?;
    Ok(y2)
}

pub const LN_EPS: f64 = 1e-5;

#[allow(clippy::too_many_arguments)]
fn encode_stream<T: Real, R: Rng>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    prefix: &str,
    layers: usize,
    input: Var,
    ctx: &StreamCtx,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let mut x = input;
    for l in 0..layers {
        let lv = layer_vars(pv, prefix, l);
        x = attention_block(g, &lv, x, x, ctx, true, dropout, rng)?;
    }
    Ok(x)
}

/// Full forward pass for the given mode. With `dropout == 0` the pass is
/// deterministic and `rng` is never drawn from.
pub fn forward<T: Real, R: Rng>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &ModelParams<T>,
    batch: &SequenceBatch,
    dropout: f64,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let dims = &params.dims;
    let (b, t) = (batch.batch, batch.max_len);
    assert_eq!(
        t, dims.max_len,
        "batch max_len {} does not match model {}",
        t, dims.max_len
    );
    for &idx in &batch.id_seq {
        if idx > dims.vocab {
            return Err(Error::Data(format!(
                "item index {idx} out of range for vocabulary {}",
                dims.vocab
            )));
        }
    }

    let idx = Rc::new(batch.id_seq.clone());
    let pos_idx: Rc<Vec<usize>> = Rc::new((0..b).flat_map(|_| 0..t).collect());
    let mask = Rc::new(batch.mask.clone());
    let attn = Rc::new(AttnMask {
        batch: b,
        heads: dims.heads,
        t,
        key_valid: batch.mask.clone(),
        causal: true,
    });
    let ctx = StreamCtx {
        batch: b,
        t,
        heads: dims.heads,
        attn,
    };

    let embed_id = |g: &mut Graph<T>| -> (Var, Var) {
        let raw = g.gather_rows(pv.get("m_id"), idx.clone());
        let pos = g.gather_rows(pv.get("p_id"), pos_idx.clone());
        let with_pos = g.add(raw, pos);
        (raw, with_pos)
    };
    let embed_con = |g: &mut Graph<T>| -> (Var, Var) {
        let rows = g.gather_rows(pv.get("content_rows"), idx.clone());
        let raw = g.matmul(rows, pv.get("w_proj"));
        let pos = g.gather_rows(pv.get("p_con"), pos_idx.clone());
        let with_pos = g.add(raw, pos);
        (raw, with_pos)
    };

    let trace = match params.mode {
        ModelMode::IdOnly => {
            let (raw, x) = embed_id(g);
            let f = encode_stream(g, pv, "enc_id", params.enc_id.len(), x, &ctx, dropout, rng)?;
            (Some(raw), None, Some(f), None, None, None, None, f)
        }
        ModelMode::ContentOnly => {
            let (raw, x) = embed_con(g);
            let f = encode_stream(g, pv, "enc_con", params.enc_con.len(), x, &ctx, dropout, rng)?;
            (None, Some(raw), None, Some(f), None, None, None, f)
        }
        ModelMode::HybridConcat => {
            let (id_raw, _) = embed_id(g);
            let con_rows = g.gather_rows(pv.get("content_rows"), idx.clone());
            let con_raw = g.matmul(con_rows, pv.get("w_proj"));
            let cat = g.concat_cols(id_raw, con_raw);
            let proj = g.matmul(cat, pv.get("hybrid_w"));
            let pos = g.gather_rows(pv.get("p_id"), pos_idx.clone());
            let x = g.add(proj, pos);
            let f = encode_stream(g, pv, "enc_id", params.enc_id.len(), x, &ctx, dropout, rng)?;
            (Some(id_raw), Some(con_raw), None, None, None, None, None, f)
        }
        ModelMode::Tssr => {
            let (id_raw, id_x) = embed_id(g);
            let (con_raw, con_x) = embed_con(g);
            let f_id =
                encode_stream(g, pv, "enc_id", params.enc_id.len(), id_x, &ctx, dropout, rng)?;
            let f_con =
                encode_stream(g, pv, "enc_con", params.enc_con.len(), con_x, &ctx, dropout, rng)?;

            // Both streams advance synchronously from the previous layer's
            // states; cross-attention swaps query and key/value streams.
            let (mut state_id, mut state_con) = (f_id, f_con);
            for l in 0..params.cross_id.len() {
                let lv_id = layer_vars(pv, "cross_id", l);
                let lv_con = layer_vars(pv, "cross_con", l);
                let new_id = attention_block(
                    g,
                    &lv_id,
                    state_id,
                    state_con,
                    &ctx,
                    dims.multimodal_ffn,
                    dropout,
                    rng,
                )?;
                let new_con = attention_block(
                    g,
                    &lv_con,
                    state_con,
                    state_id,
                    &ctx,
                    dims.multimodal_ffn,
                    dropout,
                    rng,
                )?;
                state_id = new_id;
                state_con = new_con;
            }

            let cat = g.concat_cols(state_id, state_con);
            let lin = g.matmul(cat, pv.get("gate_w"));
            let lin = g.add_bias(lin, pv.get("gate_b"));
            let s = g.sigmoid(lin);
            let ones = g.constant(Tensor::full(vec![b * t, dims.d], T::one()));
            let s_inv = g.sub(ones, s);
            let left = g.mul(s, state_id);
            let right = g.mul(s_inv, state_con);
            let fused = g.add(left, right);
            (
                Some(id_raw),
                Some(con_raw),
                Some(f_id),
                Some(f_con),
                Some(state_id),
                Some(state_con),
                Some(s),
                fused,
            )
        }
    };
    let (e_id_raw, e_con_raw, f_id, f_con, fbar_id, fbar_con, gate_s, fused) = trace;

    // Score against real items only; the PAD row never competes.
    let real: Rc<Vec<usize>> = Rc::new((0..dims.vocab).collect());
    let item_table = g.gather_rows(pv.get("m_id"), real);
    let logits = g.matmul_nt(fused, item_table);

    Ok(ForwardTrace {
        e_id_raw,
        e_con_raw,
        f_id,
        f_con,
        fbar_id,
        fbar_con,
        gate_s,
        fused,
        logits,
        mask,
    })
}

// --- checkpoint container ---------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"TSSR";
const CKPT_VERSION: u32 = 1;

/// Metadata echoed into every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: ModelMode,
    pub dims: ModelDims,
    pub vocab_fingerprint: u64,
    /// Item id strings in index order; lets downstream commands work from
    /// the checkpoint alone.
    pub vocab_ids: Vec<String>,
    /// Free-form training configuration echo.
    pub train: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ModelParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let names = params.tensor_names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        let t = params.tensor(name);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let config = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelParams<T>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur: &[u8] = &bytes;

    fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if cur.len() < n {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head)
    }
    fn take_u32(cur: &mut &[u8]) -> Result<u32> {
        Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
    }

    let magic = take(&mut cur, 4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"TSSR\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = take_u32(&mut cur)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_tensors = take_u32(&mut cur)? as usize;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut cur)? as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut cur)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 4)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    let config_len = take_u32(&mut cur)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut cur, config_len)?)?;

    let mut params = ModelParams::<T>::allocate(meta.mode, meta.dims.clone())?;
    let expected = params.tensor_names();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (name, tensor) in tensors {
        if !expected.contains(&name) {
            return Err(Error::Checkpoint(format!("unexpected tensor '{name}'")));
        }
        let dst = params.tensor_mut(&name);
        if dst.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor;
    }
    Ok((params, meta))
}

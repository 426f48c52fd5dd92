//! The risk model: per-modality encoders, a small transformer over the six
//! modality tokens at each hour, a causal transformer over hours, cross-
//! attention onto static demographic/diagnosis tokens, and two heads — a
//! mortality logit read at each stay's final observed hour, and per-modality
//! regressors predicting the next hour's features.
//!
//! All computation goes through the autodiff graph; `forward` extracts host
//! values for inference, `build_loss` keeps the graph alive for backward.
//! Strict causality is structural: the temporal attention mask zeroes
//! forbidden weights exactly, so the hidden state at hour t is bit-identical
//! under any change to later hours.

pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    append_hour, collate, CohortSchema, DataError, IcuStay, Modality, ModalityBundle, MAX_HOURS,
    SEQ_MODALITIES,
};
use crate::tensor::{AttnMask, NodeId, TensorError};
use crate::{Graph, Tensor};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Modalities to blank at inference time.
pub type ZeroSet = BTreeSet<Modality>;

/// Parses a comma-separated modality list ("meds,diag") into a zero set.
pub fn parse_zero_set(s: &str) -> Result<ZeroSet, DataError> {
    let mut set = ZeroSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        set.insert(part.parse()?);
    }
    Ok(set)
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("batch does not match model schema: {0}")]
    SchemaMismatch(String),
    #[error("rollout horizon {got} exceeds cap {cap}")]
    HorizonTooLong { got: usize, cap: usize },
    #[error("rollout horizon must be at least 1")]
    ZeroHorizon,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_modality_layers: usize,
    pub n_temporal_layers: usize,
    /// Feed-forward width is `ff_mult * d_model`.
    pub ff_mult: usize,
    /// Weight on the next-step regression term; 0 trains classification only.
    pub lambda_reg: f64,
    pub schema: CohortSchema,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_modality_layers: 1,
            n_temporal_layers: 2,
            ff_mult: 2,
            lambda_reg: 0.5,
            schema: CohortSchema::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.schema.validate()?;
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_modality_layers == 0 || self.n_temporal_layers == 0 {
            return Err(ModelError::BadConfig("layer counts must be at least 1".into()));
        }
        if self.ff_mult == 0 {
            return Err(ModelError::BadConfig("ff_mult must be at least 1".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(ModelError::BadConfig(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        Ok(())
    }
}

/// Name-addressed, order-preserving parameter list. Order fixes the init
/// stream, the checkpoint layout, and the optimizer slot mapping.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    fn add(&mut self, name: String, t: Tensor) {
        let prev = self.index.insert(name.clone(), self.names.len());
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Node handles for one built forward pass, kept alongside its graph so the
/// caller can run backward and read gradients.
pub struct Built {
    pub graph: Graph,
    /// Graph node per parameter, in store order.
    pub bound: Vec<NodeId>,
    /// `[B*T, d]` final hidden states.
    pub hidden: NodeId,
    /// `[B*T, 1]` risk logits at every position.
    pub step_logits: NodeId,
    /// `[B]` logit at each stay's final valid step.
    pub risk_logit: NodeId,
    /// Per sequential modality, `[B*T, F_m]` next-hour predictions.
    pub next_step: Vec<NodeId>,
}

/// Host-side view of a forward pass.
pub struct ModelOutput {
    /// Pre-sigmoid mortality score at the final observed step, per stay.
    pub risk_logit: Vec<f64>,
    /// Risk logit at every observed step (valid prefix only), per stay.
    pub step_logits: Vec<Vec<f64>>,
    /// Per sequential modality, `[B, T_max, F_m]` next-hour predictions.
    pub next_step: Vec<Tensor>,
    /// `[B, T_max, d_model]` final hidden states.
    pub hidden: Tensor,
}

impl ModelOutput {
    /// Sigmoid of the final-step logit.
    pub fn risk(&self) -> Vec<f64> {
        self.risk_logit.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect()
    }

    /// The predicted next-hour feature rows for stay `b`, one row per
    /// sequential modality, read at that stay's final observed step.
    pub fn next_rows(&self, b: usize, lengths: &[usize]) -> Vec<Vec<f64>> {
        let t_last = lengths[b] - 1;
        self.next_step
            .iter()
            .map(|pred| {
                let [_, t_max, f] = [pred.shape()[0], pred.shape()[1], pred.shape()[2]];
                pred.data()[(b * t_max + t_last) * f..(b * t_max + t_last + 1) * f].to_vec()
            })
            .collect()
    }
}

/// Scalar loss values extracted from a built loss graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    /// Mean next-step MSE across modalities; `None` when λ = 0.
    pub reg: Option<f64>,
    /// True when λ > 0 but no (t, t+1) pair was valid, so the regression
    /// term was dropped.
    pub reg_skipped: bool,
}

/// A loss graph ready for backward.
pub struct LossGraph {
    pub built: Built,
    pub loss: NodeId,
    pub cls: NodeId,
    pub reg: Option<NodeId>,
    pub reg_skipped: bool,
}

impl LossGraph {
    pub fn parts(&self) -> LossParts {
        LossParts {
            total: self.built.graph.data(self.loss)[0],
            cls: self.built.graph.data(self.cls)[0],
            reg: self.reg.map(|r| self.built.graph.data(r)[0]),
            reg_skipped: self.reg_skipped,
        }
    }
}

struct BlockParams {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(&cfg, &mut rng);
        let model = Model { cfg, params };
        debug_assert_eq!(model.params.total_params(), expected_param_count(&model.cfg));
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    fn check_batch(&self, batch: &ModalityBundle) -> Result<(), ModelError> {
        for (mi, &m) in SEQ_MODALITIES.iter().enumerate() {
            let want = self.cfg.schema.seq_widths.get(m);
            let got = batch.seq[mi].shape()[2];
            if got != want {
                return Err(ModelError::SchemaMismatch(format!("{m} width {got}, model expects {want}")));
            }
        }
        let v = batch.diag.shape()[1];
        if v != self.cfg.schema.diag_vocab {
            return Err(ModelError::SchemaMismatch(format!(
                "diag width {v}, model expects {}",
                self.cfg.schema.diag_vocab
            )));
        }
        Ok(())
    }

    /// Builds the forward graph for one batch. `zero_out` blanks modalities:
    /// sequential ones have their raw inputs zeroed before encoding; demo
    /// and diag have their static tokens zeroed after embedding (categorical
    /// codes have no neutral value to substitute).
    pub fn build(&self, batch: &ModalityBundle, zero_out: &ZeroSet) -> Result<Built, ModelError> {
        self.check_batch(batch)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let h = cfg.n_heads;
        let b = batch.batch_size();
        let t_max = batch.t_max;
        let rows = b * t_max;

        let mut graph = Graph::new();
        let bound: Vec<NodeId> = self.params.iter().map(|(_, t)| graph.input(t)).collect();
        let g = &mut graph;
        let p = |name: &str| bound[self.params.idx(name)];

        // Hour-level tokens, one per sequential modality: [B*T, d].
        let mut tokens = Vec::with_capacity(6);
        for (mi, &m) in SEQ_MODALITIES.iter().enumerate() {
            let f = cfg.schema.seq_widths.get(m);
            let x = if zero_out.contains(&m) {
                g.constant(vec![rows, f], vec![0.0; rows * f])?
            } else {
                g.constant(vec![rows, f], batch.seq[mi].data().to_vec())?
            };
            let lin = g.matmul(x, p(&format!("enc.{m}.w")))?;
            tokens.push(g.add_bias(lin, p(&format!("enc.{m}.b")))?);
        }

        // Modality transformer: full attention within each hour's 6 tokens.
        let stacked = g.stack_tokens(&tokens)?; // [B*T, 6, d]
        let mut x = g.reshape(stacked, vec![rows * 6, d])?;
        for l in 0..cfg.n_modality_layers {
            let bp = self.block_params(&bound, &format!("mod.{l}"));
            x = self.attn_block(g, x, &bp, rows, 6, h, None)?;
        }
        let x3 = g.reshape(x, vec![rows, 6, d])?;
        let pooled = g.mean_tokens(x3)?; // [B*T, d]

        // Fixed sinusoidal position table, broadcast over the batch.
        let pe = g.constant(vec![t_max, d], sinusoidal_pe(t_max, d))?;
        let pooled3 = g.reshape(pooled, vec![b, t_max, d])?;
        let with_pe3 = g.add_bias(pooled3, pe)?;
        let mut x = g.reshape(with_pe3, vec![rows, d])?;

        // Temporal transformer: strictly causal over hours.
        let causal = AttnMask::causal(t_max);
        for l in 0..cfg.n_temporal_layers {
            let bp = self.block_params(&bound, &format!("tem.{l}"));
            x = self.attn_block(g, x, &bp, b, t_max, h, Some(&causal))?;
        }

        // Static context: six demo embeddings plus one diag projection.
        let mut statics = Vec::with_capacity(7);
        for field in 0..6 {
            let idx: Vec<usize> =
                (0..b).map(|bi| batch.demo[bi * 6 + field] as usize).collect();
            let tok = g.embedding(p(&format!("demo.{field}.emb")), &idx)?; // [B, d]
            statics.push(if zero_out.contains(&Modality::Demo) { g.scale(tok, 0.0)? } else { tok });
        }
        let diag_in = g.constant(vec![b, cfg.schema.diag_vocab], batch.diag.data().to_vec())?;
        let diag_lin = g.matmul(diag_in, p("diag.w"))?;
        let diag_tok = g.add_bias(diag_lin, p("diag.b"))?;
        statics
            .push(if zero_out.contains(&Modality::Diag) { g.scale(diag_tok, 0.0)? } else { diag_tok });
        let stat3 = g.stack_tokens(&statics)?; // [B, 7, d]
        let stat2 = g.reshape(stat3, vec![b * 7, d])?;

        // Fusion: temporal states query the static tokens; residual add.
        let qn = g.layer_norm(x, p("fuse.ln.g"), p("fuse.ln.b"), LN_EPS)?;
        let q = {
            let lin = g.matmul(qn, p("fuse.wq"))?;
            g.add_bias(lin, p("fuse.bq"))?
        };
        let k = {
            let lin = g.matmul(stat2, p("fuse.wk"))?;
            g.add_bias(lin, p("fuse.bk"))?
        };
        let v = {
            let lin = g.matmul(stat2, p("fuse.wv"))?;
            g.add_bias(lin, p("fuse.bv"))?
        };
        let q3 = g.split_heads(q, b, t_max, h)?;
        let k3 = g.split_heads(k, b, 7, h)?;
        let v3 = g.split_heads(v, b, 7, h)?;
        let att = g.scaled_dot_attention(q3, k3, v3, None)?;
        let att2 = g.merge_heads(att, b, t_max, h)?;
        let fused = {
            let lin = g.matmul(att2, p("fuse.wo"))?;
            g.add_bias(lin, p("fuse.bo"))?
        };
        let x = g.add(x, fused)?;

        let hidden = g.layer_norm(x, p("final.ln.g"), p("final.ln.b"), LN_EPS)?;

        // Heads.
        let logits_lin = g.matmul(hidden, p("cls.w"))?;
        let step_logits = g.add_bias(logits_lin, p("cls.b"))?; // [B*T, 1]
        let logits3 = g.reshape(step_logits, vec![b, t_max, 1])?;
        let last_idx: Vec<usize> = batch.lengths.iter().map(|&l| l - 1).collect();
        let last2 = g.select_step(logits3, &last_idx)?; // [B, 1]
        let risk_logit = g.reshape(last2, vec![b])?;

        let mut next_step = Vec::with_capacity(6);
        for &m in &SEQ_MODALITIES {
            let lin = g.matmul(hidden, p(&format!("reg.{m}.w")))?;
            next_step.push(g.add_bias(lin, p(&format!("reg.{m}.b")))?);
        }

        Ok(Built { graph, bound, hidden, step_logits, risk_logit, next_step })
    }

    fn block_params(&self, bound: &[NodeId], prefix: &str) -> BlockParams {
        let p = |suffix: &str| bound[self.params.idx(&format!("{prefix}.{suffix}"))];
        BlockParams {
            ln1_g: p("ln1.g"),
            ln1_b: p("ln1.b"),
            wq: p("wq"),
            bq: p("bq"),
            wk: p("wk"),
            bk: p("bk"),
            wv: p("wv"),
            bv: p("bv"),
            wo: p("wo"),
            bo: p("bo"),
            ln2_g: p("ln2.g"),
            ln2_b: p("ln2.b"),
            ffn_w1: p("ffn.w1"),
            ffn_b1: p("ffn.b1"),
            ffn_w2: p("ffn.w2"),
            ffn_b2: p("ffn.b2"),
        }
    }

    /// One pre-norm transformer block on `[groups*seq, d]` rows.
    fn attn_block(
        &self,
        g: &mut Graph,
        x: NodeId,
        bp: &BlockParams,
        groups: usize,
        seq: usize,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<NodeId, ModelError> {
        let n = g.layer_norm(x, bp.ln1_g, bp.ln1_b, LN_EPS)?;
        let q = {
            let lin = g.matmul(n, bp.wq)?;
            g.add_bias(lin, bp.bq)?
        };
        let k = {
            let lin = g.matmul(n, bp.wk)?;
            g.add_bias(lin, bp.bk)?
        };
        let v = {
            let lin = g.matmul(n, bp.wv)?;
            g.add_bias(lin, bp.bv)?
        };
        let q3 = g.split_heads(q, groups, seq, heads)?;
        let k3 = g.split_heads(k, groups, seq, heads)?;
        let v3 = g.split_heads(v, groups, seq, heads)?;
        let att = g.scaled_dot_attention(q3, k3, v3, mask)?;
        let att2 = g.merge_heads(att, groups, seq, heads)?;
        let proj = {
            let lin = g.matmul(att2, bp.wo)?;
            g.add_bias(lin, bp.bo)?
        };
        let x = g.add(x, proj)?;

        let n2 = g.layer_norm(x, bp.ln2_g, bp.ln2_b, LN_EPS)?;
        let f1 = {
            let lin = g.matmul(n2, bp.ffn_w1)?;
            g.add_bias(lin, bp.ffn_b1)?
        };
        let act = g.gelu(f1)?;
        let f2 = {
            let lin = g.matmul(act, bp.ffn_w2)?;
            g.add_bias(lin, bp.ffn_b2)?
        };
        Ok(g.add(x, f2)?)
    }

    /// Inference: runs the graph and extracts host values.
    pub fn forward(&self, batch: &ModalityBundle, zero_out: &ZeroSet) -> Result<ModelOutput, ModelError> {
        let built = self.build(batch, zero_out)?;
        Ok(extract_output(&built, batch, self.cfg.d_model))
    }

    /// Builds forward plus the training loss:
    /// `L = BCE(final-step logits, labels) + λ · mean-over-modalities masked
    /// next-step MSE`. With λ = 0 the regression graph is not built at all,
    /// so no regression gradient can exist. With λ > 0 but no valid (t, t+1)
    /// pair, the term is skipped and flagged.
    pub fn build_loss(&self, batch: &ModalityBundle, zero_out: &ZeroSet) -> Result<LossGraph, ModelError> {
        let mut built = self.build(batch, zero_out)?;
        let g = &mut built.graph;
        let b = batch.batch_size();
        let t_max = batch.t_max;

        let labels = batch.labels_f64();
        let cls = g.bce_with_logits(built.risk_logit, &labels)?;

        let mut reg = None;
        let mut reg_skipped = false;
        if self.cfg.lambda_reg > 0.0 {
            // Valid teacher-forcing pairs: hour t predicts hour t+1, both
            // observed.
            let pair_count: usize = batch.lengths.iter().map(|&l| l - 1).sum();
            if pair_count == 0 {
                reg_skipped = true;
            } else {
                let mut terms = Vec::with_capacity(6);
                for (mi, &m) in SEQ_MODALITIES.iter().enumerate() {
                    let f = self.cfg.schema.seq_widths.get(m);
                    let src = batch.seq[mi].data();
                    let mut target = vec![0.0; b * t_max * f];
                    let mut mask = vec![0.0; b * t_max * f];
                    for (bi, &len) in batch.lengths.iter().enumerate() {
                        for t in 0..len.saturating_sub(1) {
                            let dst = (bi * t_max + t) * f;
                            let nxt = (bi * t_max + t + 1) * f;
                            target[dst..dst + f].copy_from_slice(&src[nxt..nxt + f]);
                            for c in 0..f {
                                mask[dst + c] = 1.0;
                            }
                        }
                    }
                    let target = g.constant(vec![b * t_max, f], target)?;
                    let maskc = g.constant(vec![b * t_max, f], mask)?;
                    let diff = g.sub(built.next_step[mi], target)?;
                    let sq = g.mul(diff, diff)?;
                    let masked = g.mul(sq, maskc)?;
                    let sum = g.sum_all(masked)?;
                    terms.push(g.scale(sum, 1.0 / (pair_count * f) as f64)?);
                }
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t)?;
                }
                reg = Some(g.scale(acc, 1.0 / terms.len() as f64)?);
            }
        }

        let loss = match reg {
            Some(r) => {
                let weighted = g.scale(r, self.cfg.lambda_reg)?;
                g.add(cls, weighted)?
            }
            None => cls,
        };
        Ok(LossGraph { built, loss, cls, reg, reg_skipped })
    }

    /// Copies gradients from a backward-completed graph into the parameter
    /// tensors (zeros for parameters the loss never touched), ready for the
    /// optimizer.
    pub fn absorb_grads(&mut self, lg: &LossGraph) -> Result<(), ModelError> {
        for (i, node) in lg.built.bound.iter().enumerate() {
            let grad = match lg.built.graph.grad(*node) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; self.params.tensors[i].numel()],
            };
            self.params.tensors[i].set_grad(grad)?;
        }
        Ok(())
    }

    /// Convenience risk for a single stay.
    pub fn risk_for_stay(&self, stay: &IcuStay) -> Result<f64, ModelError> {
        let bundle = collate(std::slice::from_ref(stay), self.cfg.schema.diag_vocab)?;
        let out = self.forward(&bundle, &ZeroSet::new())?;
        Ok(out.risk()[0])
    }

    /// Iterative self-simulation: appends the model's own next-hour
    /// prediction and re-runs forward, `horizon` times. Risks are reported
    /// after each appended hour; static context stays fixed.
    pub fn rollout(&self, stay: &IcuStay, horizon: usize) -> Result<Rollout, ModelError> {
        if horizon == 0 {
            return Err(ModelError::ZeroHorizon);
        }
        if horizon > MAX_HOURS {
            return Err(ModelError::HorizonTooLong { got: horizon, cap: MAX_HOURS });
        }
        let mut current = stay.clone();
        let mut predicted = Vec::with_capacity(horizon);
        let mut risks = Vec::with_capacity(horizon);
        let bundle = collate(std::slice::from_ref(&current), self.cfg.schema.diag_vocab)?;
        let mut out = self.forward(&bundle, &ZeroSet::new())?;
        let mut lengths = bundle.lengths;
        for _ in 0..horizon {
            let rows = out.next_rows(0, &lengths);
            current = append_hour(&current, &rows)?;
            let bundle = collate(std::slice::from_ref(&current), self.cfg.schema.diag_vocab)?;
            out = self.forward(&bundle, &ZeroSet::new())?;
            lengths = bundle.lengths;
            risks.push(out.risk()[0]);
            predicted.push(rows);
        }
        Ok(Rollout { predicted, risks, extended: current })
    }

    /// One streaming step: extends the stay by a freshly observed hour and
    /// returns the updated risk plus the forecast of the hour after that.
    /// Bit-identical to `forward` on the extended stay.
    pub fn streaming_update(
        &self,
        stay: &IcuStay,
        new_hour: &[Vec<f64>],
    ) -> Result<StreamingStep, ModelError> {
        let extended = append_hour(stay, new_hour)?;
        let bundle = collate(std::slice::from_ref(&extended), self.cfg.schema.diag_vocab)?;
        let out = self.forward(&bundle, &ZeroSet::new())?;
        let forecast = out.next_rows(0, &bundle.lengths);
        Ok(StreamingStep { risk: out.risk()[0], forecast, extended })
    }
}

/// Result of [`Model::rollout`].
pub struct Rollout {
    /// One appended hour per step: `predicted[i]` holds six modality rows.
    pub predicted: Vec<Vec<Vec<f64>>>,
    /// Risk after each appended hour.
    pub risks: Vec<f64>,
    /// The stay with all predicted hours appended.
    pub extended: IcuStay,
}

/// Result of [`Model::streaming_update`].
pub struct StreamingStep {
    pub risk: f64,
    /// Forecast of the next hour after the one just observed.
    pub forecast: Vec<Vec<f64>>,
    pub extended: IcuStay,
}

fn extract_output(built: &Built, batch: &ModalityBundle, d: usize) -> ModelOutput {
    let g = &built.graph;
    let b = batch.batch_size();
    let t_max = batch.t_max;
    let risk_logit = g.data(built.risk_logit).to_vec();
    let all_logits = g.data(built.step_logits);
    let step_logits = batch
        .lengths
        .iter()
        .enumerate()
        .map(|(bi, &len)| (0..len).map(|t| all_logits[bi * t_max + t]).collect())
        .collect();
    let next_step = built
        .next_step
        .iter()
        .map(|&n| {
            let f = g.shape(n)[1];
            Tensor::new(vec![b, t_max, f], g.data(n).to_vec()).expect("shape consistent")
        })
        .collect();
    let hidden = Tensor::new(vec![b, t_max, d], g.data(built.hidden).to_vec()).expect("shape consistent");
    ModelOutput { risk_logit, step_logits, next_step, hidden }
}

/// Classic transformer position table: `pe[t, 2i] = sin(t · ω_i)`,
/// `pe[t, 2i+1] = cos(t · ω_i)` with geometric frequencies.
fn sinusoidal_pe(t_max: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t_max * d];
    for t in 0..t_max {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + 2 * i] = (t as f64 * freq).sin();
            pe[t * d + 2 * i + 1] = (t as f64 * freq).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + d - 1] = (t as f64 * freq).sin();
        }
    }
    pe
}

fn build_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let d = cfg.d_model;
    let ff = cfg.ff_mult * d;
    let mut store = ParamStore::new();

    let mut xavier = |shape: Vec<usize>, fan_in: usize, fan_out: usize| -> Tensor {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::from_f64(shape, &data).expect("consistent shape").with_grad()
    };
    let zeros = |shape: Vec<usize>| Tensor::zeros(shape).expect("non-empty").with_grad();
    let ones = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &vec![1.0; n]).expect("consistent shape").with_grad()
    };

    for m in SEQ_MODALITIES {
        let f = cfg.schema.seq_widths.get(m);
        store.add(format!("enc.{m}.w"), xavier(vec![f, d], f, d));
        store.add(format!("enc.{m}.b"), zeros(vec![d]));
    }

    let block = |store: &mut ParamStore, prefix: String, xavier: &mut dyn FnMut(Vec<usize>, usize, usize) -> Tensor| {
        store.add(format!("{prefix}.ln1.g"), ones(vec![d]));
        store.add(format!("{prefix}.ln1.b"), zeros(vec![d]));
        for side in ["wq", "wk", "wv", "wo"] {
            store.add(format!("{prefix}.{side}"), xavier(vec![d, d], d, d));
            store.add(format!("{prefix}.{}", side.replace('w', "b")), zeros(vec![d]));
        }
        store.add(format!("{prefix}.ln2.g"), ones(vec![d]));
        store.add(format!("{prefix}.ln2.b"), zeros(vec![d]));
        store.add(format!("{prefix}.ffn.w1"), xavier(vec![d, ff], d, ff));
        store.add(format!("{prefix}.ffn.b1"), zeros(vec![ff]));
        store.add(format!("{prefix}.ffn.w2"), xavier(vec![ff, d], ff, d));
        store.add(format!("{prefix}.ffn.b2"), zeros(vec![d]));
    };

    for l in 0..cfg.n_modality_layers {
        block(&mut store, format!("mod.{l}"), &mut xavier);
    }
    for l in 0..cfg.n_temporal_layers {
        block(&mut store, format!("tem.{l}"), &mut xavier);
    }

    for (i, &v) in cfg.schema.demo_vocab.iter().enumerate() {
        store.add(format!("demo.{i}.emb"), xavier(vec![v, d], v, d));
    }
    let v = cfg.schema.diag_vocab;
    store.add("diag.w".into(), xavier(vec![v, d], v, d));
    store.add("diag.b".into(), zeros(vec![d]));

    store.add("fuse.ln.g".into(), ones(vec![d]));
    store.add("fuse.ln.b".into(), zeros(vec![d]));
    for side in ["wq", "wk", "wv", "wo"] {
        store.add(format!("fuse.{side}"), xavier(vec![d, d], d, d));
        store.add(format!("fuse.{}", side.replace('w', "b")), zeros(vec![d]));
    }

    store.add("final.ln.g".into(), ones(vec![d]));
    store.add("final.ln.b".into(), zeros(vec![d]));

    // Heads get the same fan-scaled init as the trunk. Starting them at
    // exact zero looks tidy (risk 0.5 everywhere) but pins the readout
    // magnitude to the optimizer step size: with Adam the logit range after
    // n steps is bounded by n·lr·‖h‖, which strangles short fine-tuning
    // runs. Small random heads give gradients something to bite on.
    store.add("cls.w".into(), xavier(vec![d, 1], d, 1));
    store.add("cls.b".into(), zeros(vec![1]));
    for m in SEQ_MODALITIES {
        let f = cfg.schema.seq_widths.get(m);
        store.add(format!("reg.{m}.w"), xavier(vec![d, f], d, f));
        store.add(format!("reg.{m}.b"), zeros(vec![f]));
    }

    store
}

/// Closed-form parameter count for a config; the constructor asserts the
/// store agrees.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.ff_mult;
    // One pre-norm block: 4 d×d projections with biases, two layer norms,
    // and the feed-forward pair.
    let block = 4 * d * d + 2 * f * d * d + 9 * d + f * d;
    let widths: usize = SEQ_MODALITIES.iter().map(|&m| cfg.schema.seq_widths.get(m)).sum();
    let encoders = widths * d + 6 * d;
    let blocks = (cfg.n_modality_layers + cfg.n_temporal_layers) * block;
    let demo: usize = cfg.schema.demo_vocab.iter().map(|&v| v * d).sum();
    let diag = cfg.schema.diag_vocab * d + d;
    let fusion = 4 * d * d + 6 * d;
    let final_ln = 2 * d;
    let cls = d + 1;
    let reg = widths * d + widths;
    encoders + blocks + demo + diag + fusion + final_ln + cls + reg
}

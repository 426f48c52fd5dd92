//! Training loop: balanced batch sampling, Adam steps, periodic held-out
//! evaluation, and best-checkpoint selection.
//!
//! Determinism contract: every random choice is drawn from a substream keyed
//! by `(seed, step, purpose)`, so two runs with the same seed produce
//! identical loss curves and the batch for step `s` does not depend on how
//! many steps ran before it.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, truncate, DataError, IcuStay, ModalityBundle, MAX_HOURS};
use crate::metrics::MetricsReport;
use crate::model::{LossParts, Model, ModelError, ZeroSet};
use crate::synth::substream;
use crate::tensor::{adam_step, AdamState};
use crate::Tensor;

/// Classification threshold used for thresholded metrics everywhere.
pub const RISK_THRESHOLD: f64 = 0.5;

/// Number of equal-width strata used by length balancing.
pub const LENGTH_BINS: usize = 8;

/// Evals without val-AUPRC improvement before training stops early.
pub const EARLY_STOP_PATIENCE: usize = 10;

/// Substream purpose tags (disjoint from the generator's).
mod tag {
    pub const SPLIT: u64 = 128;
    pub const SAMPLE: u64 = 129;
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("label balancing requires both classes in the cohort")]
    SingleClass,
    #[error("cohort of {n} stays leaves an empty split (train {train}, val {val})")]
    EmptySplit { n: usize, train: usize, val: usize },
    #[error("non-finite loss at step {step} (batch: {stay_ids:?})")]
    NonFinite { step: usize, stay_ids: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The two rebalancing mechanisms, separately toggleable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    /// Uniform stay sampling, natural stay lengths (capped at [`MAX_HOURS`]).
    None,
    /// Stay lengths stratified over [`LENGTH_BINS`] equal-width bins.
    LengthOnly,
    /// Half the batch positive, half negative, resampled with replacement.
    LabelOnly,
    /// Both of the above at once.
    Both,
}

impl Balancing {
    pub fn balances_labels(self) -> bool {
        matches!(self, Balancing::LabelOnly | Balancing::Both)
    }

    pub fn balances_lengths(self) -> bool {
        matches!(self, Balancing::LengthOnly | Balancing::Both)
    }
}

impl std::fmt::Display for Balancing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Balancing::None => "none",
            Balancing::LengthOnly => "length_only",
            Balancing::LabelOnly => "label_only",
            Balancing::Both => "both",
        })
    }
}

impl std::str::FromStr for Balancing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Balancing::None),
            "length" | "length_only" => Ok(Balancing::LengthOnly),
            "label" | "label_only" => Ok(Balancing::LabelOnly),
            "both" => Ok(Balancing::Both),
            other => Err(format!(
                "unknown balancing {other:?} (expected none, length, label, or both)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Default follows the reference setup; desk-scale runs typically
    /// override to ~1e-4 since 5e-7 moves nothing in a few hundred steps.
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Next-step forecasting weight; copied onto the model for the run.
    pub lambda_reg: f64,
    /// Inclusive hour range that truncation sampling draws from.
    pub length_sample_range: (usize, usize),
    pub balancing: Balancing,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-7,
            batch_size: 16,
            steps: 1000,
            lambda_reg: 0.5,
            length_sample_range: (4, MAX_HOURS),
            balancing: Balancing::None,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// lr = 0 is allowed (a no-op optimizer is occasionally useful as a
    /// control), negative is not.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad(format!("lambda_reg must be finite and >= 0, got {}", self.lambda_reg));
        }
        let (lo, hi) = self.length_sample_range;
        if lo < 1 || lo > hi || hi > MAX_HOURS {
            return bad(format!("length_sample_range must satisfy 1 <= lo <= hi <= {MAX_HOURS}, got ({lo}, {hi})"));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::BadConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// 70/15/15 split indices into the cohort, in shuffled order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut 70/15/15. Remainders land in train.
pub fn split_cohort(n: usize, seed: u64) -> Result<Split, TrainError> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, 0, tag::SPLIT);
    // Fisher-Yates; rand's shuffle would also do, but this keeps the byte
    // stream consumption explicit and version-stable.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = n * 15 / 100;
    let n_test = n * 15 / 100;
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 {
        return Err(TrainError::EmptySplit { n, train: n_train, val: n_val });
    }
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok(Split { train, val, test })
}

/// Inclusive hour range of length bin `b` over `[lo, hi]`; `None` when the
/// range has fewer values than bins and bin `b` came up empty.
fn bin_range(lo: usize, hi: usize, b: usize) -> Option<(usize, usize)> {
    let span = hi - lo + 1;
    let start = lo + span * b / LENGTH_BINS;
    let end = lo + span * (b + 1) / LENGTH_BINS;
    if start < end {
        Some((start, end - 1))
    } else {
        None
    }
}

/// Draw one training batch.
///
/// Every stay is truncated to a sampled length clamped to what was actually
/// observed; under `Balancing::None` stays keep their natural length
/// (capped at [`MAX_HOURS`]). Label balancing fills the first half of the
/// batch with positives; length balancing assigns bins round-robin within
/// each label group so the stratification is exact per batch, not just in
/// expectation.
pub fn sample_batch(
    cohort: &[IcuStay],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    diag_vocab: usize,
) -> Result<ModalityBundle, TrainError> {
    if cohort.is_empty() {
        return Err(TrainError::BadConfig("empty cohort".into()));
    }
    let (lo, hi) = cfg.length_sample_range;

    let mut pools: Vec<Vec<usize>> = Vec::new();
    if cfg.balancing.balances_labels() {
        let pos: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].label == 1).collect();
        let neg: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].label == 0).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(TrainError::SingleClass);
        }
        pools.push(pos);
        pools.push(neg);
    } else {
        pools.push((0..cohort.len()).collect());
    }
    // Slots per pool: positives get floor(batch/2) when balancing labels.
    let sizes: Vec<usize> = if pools.len() == 2 {
        vec![cfg.batch_size / 2, cfg.batch_size - cfg.batch_size / 2]
    } else {
        vec![cfg.batch_size]
    };

    let mut picked: Vec<IcuStay> = Vec::with_capacity(cfg.batch_size);
    for (pool, &n_slots) in pools.iter().zip(&sizes) {
        for slot in 0..n_slots {
            let stay = &cohort[pool[rng.gen_range(0..pool.len())]];
            let t = stay.len_hours();
            let hours = if cfg.balancing.balances_lengths() {
                let bin = slot * LENGTH_BINS / n_slots.max(1);
                let (b_lo, b_hi) = bin_range(lo, hi, bin).unwrap_or((lo, hi));
                rng.gen_range(b_lo..=b_hi)
            } else if cfg.balancing == Balancing::None {
                MAX_HOURS // natural length; truncate clamps to t
            } else {
                rng.gen_range(lo.min(t)..=hi.min(t))
            };
            picked.push(truncate(stay, hours)?);
        }
    }
    Ok(collate(&picked, diag_vocab)?)
}

/// One step of the loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: Option<f64>,
}

/// One periodic held-out evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub curve: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Step of the eval whose weights the model was left holding.
    pub best_step: Option<usize>,
    pub best_val_auprc: Option<f64>,
    pub split: Split,
}

impl TrainReport {
    /// One CSV row per step; eval columns filled only on eval steps.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,total,cls,reg,val_auroc,val_auprc,val_recall,val_f1")?;
        let mut evals = self.evals.iter().peekable();
        for row in &self.curve {
            let reg = row.reg.map(|r| r.to_string()).unwrap_or_default();
            let eval = evals.next_if(|e| e.step == row.step);
            let (auroc, auprc, recall, f1) = match eval {
                Some(e) => (
                    e.val.auroc.map(|v| v.to_string()).unwrap_or_default(),
                    e.val.auprc.map(|v| v.to_string()).unwrap_or_default(),
                    e.val.recall.to_string(),
                    e.val.f1.to_string(),
                ),
                None => Default::default(),
            };
            writeln!(f, "{},{},{},{reg},{auroc},{auprc},{recall},{f1}", row.step, row.total, row.cls)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Upper bound on `batch_size * t_max` when chunking evaluation forward
/// passes; keeps peak graph memory flat across stay lengths.
const EVAL_TOKEN_BUDGET: usize = 4096;

/// Greedy contiguous chunking of `stays` under the token budget: each
/// half-open `(start, end)` keeps `len * t_max <= EVAL_TOKEN_BUDGET`, with
/// at least one stay per chunk so oversize stays still evaluate.
pub(crate) fn eval_chunks(stays: &[IcuStay]) -> Vec<(usize, usize)> {
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < stays.len() {
        let mut end = start + 1;
        let mut t_max = stays[start].len_hours();
        while end < stays.len() {
            let t = t_max.max(stays[end].len_hours());
            if (end - start + 1) * t > EVAL_TOKEN_BUDGET {
                break;
            }
            t_max = t;
            end += 1;
        }
        chunks.push((start, end));
        start = end;
    }
    chunks
}

/// Risk scores for a cohort in input order, plus thresholded metrics.
///
/// Stays are forwarded in chunks sized by a token budget; padding
/// invariance makes the chunking invisible in the scores.
pub fn evaluate_cohort(
    model: &Model,
    stays: &[IcuStay],
    zero_out: &ZeroSet,
) -> Result<(Vec<f64>, MetricsReport), TrainError> {
    let mut scores = Vec::with_capacity(stays.len());
    for (start, end) in eval_chunks(stays) {
        let batch = collate(&stays[start..end], model.cfg.schema.diag_vocab)?;
        scores.extend(model.forward(&batch, zero_out)?.risk());
    }
    let labels: Vec<u8> = stays.iter().map(|s| s.label).collect();
    let report = MetricsReport::from_scores(&scores, &labels, RISK_THRESHOLD);
    Ok((scores, report))
}

/// Repeated Adam steps on one fixed batch; returns the loss at each step.
/// This is the overfitting harness: no sampling, no eval, no selection.
pub fn fit_fixed_batch(
    model: &mut Model,
    batch: &ModalityBundle,
    steps: usize,
    lr: f64,
) -> Result<Vec<LossParts>, TrainError> {
    let mut adam = AdamState::with_defaults(lr, model.params.tensors())
        .map_err(ModelError::from)?;
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut lg = model.build_loss(batch, &ZeroSet::new())?;
        lg.built.graph.backward(lg.loss).map_err(ModelError::from)?;
        let parts = lg.parts();
        if !parts.total.is_finite() {
            return Err(TrainError::NonFinite { step, stay_ids: batch.stay_ids.clone() });
        }
        model.absorb_grads(&lg)?;
        adam_step(model.params.tensors_mut(), &mut adam).map_err(ModelError::from)?;
        curve.push(parts);
    }
    Ok(curve)
}

/// Train `model` on a cohort: 70/15/15 split, sampled batches, periodic val
/// evaluation, early stopping on val AUPRC ([`EARLY_STOP_PATIENCE`] evals),
/// and best-eval weight restoration. The model is left holding the weights
/// of its best eval (final weights if no eval ever ran).
pub fn train(model: &mut Model, cohort: &[IcuStay], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    model.cfg.lambda_reg = cfg.lambda_reg;
    let split = split_cohort(cohort.len(), cfg.seed)?;
    let train_stays: Vec<IcuStay> = split.train.iter().map(|&i| cohort[i].clone()).collect();
    let val_stays: Vec<IcuStay> = split.val.iter().map(|&i| cohort[i].clone()).collect();
    let diag_vocab = model.cfg.schema.diag_vocab;

    let mut adam = AdamState::with_defaults(cfg.lr, model.params.tensors())
        .map_err(ModelError::from)?;
    let mut report = TrainReport {
        steps_run: 0,
        stopped_early: false,
        curve: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        best_step: None,
        best_val_auprc: None,
        split,
    };
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut evals_since_best = 0usize;

    for step in 0..cfg.steps {
        let mut rng = substream(cfg.seed, step as u64, tag::SAMPLE);
        let batch = sample_batch(&train_stays, cfg, &mut rng, diag_vocab)?;
        let mut lg = model.build_loss(&batch, &ZeroSet::new())?;
        lg.built.graph.backward(lg.loss).map_err(ModelError::from)?;
        let parts = lg.parts();
        if !parts.total.is_finite() {
            return Err(TrainError::NonFinite { step, stay_ids: batch.stay_ids.clone() });
        }
        model.absorb_grads(&lg)?;
        adam_step(model.params.tensors_mut(), &mut adam).map_err(ModelError::from)?;
        report.curve.push(StepLog { step, total: parts.total, cls: parts.cls, reg: parts.reg });
        report.steps_run = step + 1;

        if (step + 1) % cfg.eval_every == 0 {
            let (_, val) = evaluate_cohort(model, &val_stays, &ZeroSet::new())?;
            log::debug!(
                "step {step}: loss {:.4}, val auprc {:?}",
                parts.total,
                val.auprc
            );
            // Missing AUPRC (no positives in val) never beats a real one.
            let score = val.auprc.unwrap_or(f64::NEG_INFINITY);
            report.evals.push(EvalLog { step, val });
            let improved = match &best {
                Some((_, b, _)) => score > *b,
                None => true,
            };
            if improved {
                best = Some((step, score, model.params.tensors().to_vec()));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= EARLY_STOP_PATIENCE {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some((step, score, tensors)) = best {
        for (dst, src) in model.params.tensors_mut().iter_mut().zip(&tensors) {
            *dst = src.clone();
        }
        report.best_step = Some(step);
        report.best_val_auprc = score.is_finite().then_some(score);
    }
    Ok(report)
}

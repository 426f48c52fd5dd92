//! Synthetic ICU cohort generator with a planted, tunable signal structure.
//!
//! Every stay draws one latent severity per modality; a weighted sum of the
//! latents thresholds into the mortality label (with a small flip rate, and
//! the threshold compensated so prevalence still matches the request). The
//! same latents leak into the observable data: each sequential modality
//! carries its latent in a designated feature subset, scaled by that
//! modality's weight and by a ramp that saturates at 24 hours — so evidence
//! accrues over the stay. Weight zero means the modality is pure noise.
//!
//! All randomness flows through counter-keyed substreams of (seed, stay
//! index, purpose), so regenerating with a larger `n_stays` reproduces the
//! earlier stays byte-for-byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    CohortSchema, IcuStay, Modality, SeqData, ALL_MODALITIES, MAX_HOURS, SEQ_MODALITIES,
};
use crate::special::{phi, phi_inv};

/// Probability that a latent-rule label is flipped, giving an irreducible
/// error floor. The label threshold compensates for it.
///
/// Kept small because flipped negatives pollute the positive class in
/// proportion to `flip / positive_rate`: at 5% prevalence a 0.02 flip rate
/// would make ~39% of labeled positives pure noise and cap even a perfect
/// ranker near AUROC 0.81. At 0.005 the same ceiling sits near 0.95, which
/// still rules out a separable toy problem but leaves room for a trained
/// model to demonstrate real discrimination on rare-positive cohorts.
pub const LABEL_FLIP: f64 = 0.005;

/// Hours until the planted signal reaches full strength.
pub const RAMP_HOURS: f64 = 24.0;

/// Diagnosis codes that carry signal (the first few of the vocabulary).
pub const DIAG_SIGNAL_CODES: usize = 4;

/// Background inclusion rate for non-signal diagnosis codes.
const DIAG_BASE_RATE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Schema(#[from] crate::data::DataError),
}

/// Per-modality signal strength (non-negative; zero disables the channel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalWeights {
    pub meds: f64,
    pub chart: f64,
    pub out: f64,
    pub proc: f64,
    pub date: f64,
    pub ing: f64,
    pub demo: f64,
    pub diag: f64,
}

impl Default for SignalWeights {
    /// Procedures dominate, outputs are strong, medications moderate, and
    /// the rest barely matter — a deliberately skewed hierarchy so
    /// attribution has something unambiguous to find.
    fn default() -> Self {
        SignalWeights {
            meds: 0.3,
            chart: 0.05,
            out: 0.6,
            proc: 0.9,
            date: 0.05,
            ing: 0.05,
            demo: 0.05,
            diag: 0.05,
        }
    }
}

impl SignalWeights {
    pub fn zero() -> Self {
        SignalWeights { meds: 0.0, chart: 0.0, out: 0.0, proc: 0.0, date: 0.0, ing: 0.0, demo: 0.0, diag: 0.0 }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Meds => self.meds,
            Modality::Chart => self.chart,
            Modality::Out => self.out,
            Modality::Proc => self.proc,
            Modality::Date => self.date,
            Modality::Ing => self.ing,
            Modality::Demo => self.demo,
            Modality::Diag => self.diag,
        }
    }

    pub fn set(&mut self, m: Modality, w: f64) {
        match m {
            Modality::Meds => self.meds = w,
            Modality::Chart => self.chart = w,
            Modality::Out => self.out = w,
            Modality::Proc => self.proc = w,
            Modality::Date => self.date = w,
            Modality::Ing => self.ing = w,
            Modality::Demo => self.demo = w,
            Modality::Diag => self.diag = w,
        }
    }

    pub fn norm(&self) -> f64 {
        ALL_MODALITIES.iter().map(|&m| self.get(m).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_stays: usize,
    /// Target label prevalence, open interval (LABEL_FLIP, 1 − LABEL_FLIP).
    pub positive_rate: f64,
    /// Inclusive hour bounds; lengths are uniform over the range.
    pub length_range: (usize, usize),
    pub signal_weights: SignalWeights,
    /// Standard deviation of the per-cell observation noise.
    pub noise_std: f64,
    pub seed: u64,
    pub schema: CohortSchema,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_stays: 1000,
            positive_rate: 0.10,
            length_range: (8, 48),
            signal_weights: SignalWeights::default(),
            noise_std: 0.5,
            seed: 42,
            schema: CohortSchema::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        self.schema.validate()?;
        if self.n_stays == 0 {
            return Err(GenError::BadConfig("n_stays must be at least 1".into()));
        }
        let p = self.positive_rate;
        if !(p > LABEL_FLIP && p < 1.0 - LABEL_FLIP) {
            return Err(GenError::BadConfig(format!(
                "positive_rate {p} outside achievable range ({LABEL_FLIP}, {}) under flip noise",
                1.0 - LABEL_FLIP
            )));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi || hi > MAX_HOURS {
            return Err(GenError::BadConfig(format!(
                "length_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {MAX_HOURS}"
            )));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(GenError::BadConfig(format!("noise_std must be positive, got {}", self.noise_std)));
        }
        for m in ALL_MODALITIES {
            let w = self.signal_weights.get(m);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(GenError::BadConfig(format!("signal weight for {m} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags for per-stay substreams.
mod tag {
    pub const LENGTH: u64 = 1;
    pub const LABEL: u64 = 2;
    pub const LATENT: u64 = 16; // +modality index
    pub const SEQ_DATA: u64 = 32; // +sequential modality index
    pub const DEMO: u64 = 64;
    pub const DIAG: u64 = 65;
}

/// Independent RNG for one (seed, stay, purpose) triple. Streams never
/// overlap across stays, so cohorts are prefix-stable in `n_stays`.
pub(crate) fn substream(seed: u64, stay: u64, purpose: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stay.wrapping_mul(0xd134_2543_de82_ef95));
    h = splitmix64(h ^ purpose);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Growth of the planted signal: linear to RAMP_HOURS, then flat.
pub fn signal_ramp(hour: usize) -> f64 {
    ((hour as f64 + 1.0) / RAMP_HOURS).min(1.0)
}

/// Features of a sequential modality that carry signal (the first half,
/// rounded up).
pub fn designated_features(width: usize) -> usize {
    width.div_ceil(2)
}

fn gen_stay(cfg: &GenConfig, idx: u64, threshold: f64) -> IcuStay {
    let schema = &cfg.schema;
    let w = &cfg.signal_weights;

    let mut latents = [0.0f64; 8];
    for (mi, z) in latents.iter_mut().enumerate() {
        let mut rng = substream(cfg.seed, idx, tag::LATENT + mi as u64);
        *z = rng.sample(StandardNormal);
    }

    let mut label_rng = substream(cfg.seed, idx, tag::LABEL);
    let raw = if w.norm() > 0.0 {
        let u: f64 = ALL_MODALITIES.iter().map(|&m| w.get(m) * latents[m.all_index()]).sum();
        u > threshold
    } else {
        // Null cohort: labels carry the target prevalence but are
        // independent of every observable.
        label_rng.gen::<f64>() < (cfg.positive_rate - LABEL_FLIP) / (1.0 - 2.0 * LABEL_FLIP)
    };
    let flipped = label_rng.gen::<f64>() < LABEL_FLIP;
    let label = u8::from(raw != flipped);

    let (lo, hi) = cfg.length_range;
    let hours = substream(cfg.seed, idx, tag::LENGTH).gen_range(lo..=hi);

    let mut seq = SeqData { meds: vec![], chart: vec![], out: vec![], proc: vec![], date: vec![], ing: vec![] };
    for (si, &m) in SEQ_MODALITIES.iter().enumerate() {
        let width = schema.seq_widths.get(m);
        let k = designated_features(width);
        let amp = w.get(m) * latents[m.all_index()];
        let mut rng = substream(cfg.seed, idx, tag::SEQ_DATA + si as u64);
        let rows = (0..hours)
            .map(|t| {
                let ramp = signal_ramp(t);
                (0..width)
                    .map(|f| {
                        let noise: f64 = rng.sample(StandardNormal);
                        let mut x = cfg.noise_std * noise;
                        if f < k {
                            x += amp * ramp;
                        }
                        x
                    })
                    .collect()
            })
            .collect();
        *seq.get_mut(m) = rows;
    }

    // Demographics: the age bucket tracks the demo latent with correlation
    // proportional to the demo weight; the other fields are uniform.
    let mut demo_rng = substream(cfg.seed, idx, tag::DEMO);
    let mut demo = Vec::with_capacity(6);
    for (field, &vocab) in schema.demo_vocab.iter().enumerate() {
        let code = if field == 1 {
            let rho = w.get(Modality::Demo).min(0.99);
            let eps: f64 = demo_rng.sample(StandardNormal);
            let latent = rho * latents[Modality::Demo.all_index()] + (1.0 - rho * rho).sqrt() * eps;
            ((phi(latent) * vocab as f64) as u32).min(vocab as u32 - 1)
        } else {
            demo_rng.gen_range(0..vocab as u32)
        };
        demo.push(code);
    }

    // Diagnoses: signal codes become likelier with the diag latent; the
    // rest fire at a flat base rate.
    let mut diag_rng = substream(cfg.seed, idx, tag::DIAG);
    let beta = 1.5 * w.get(Modality::Diag).min(1.0);
    let z_diag = latents[Modality::Diag.all_index()];
    let mut diag = Vec::new();
    for c in 0..schema.diag_vocab as u32 {
        let p = if (c as usize) < DIAG_SIGNAL_CODES.min(schema.diag_vocab) {
            let logit = beta * z_diag - 1.0;
            1.0 / (1.0 + (-logit).exp())
        } else {
            DIAG_BASE_RATE
        };
        if diag_rng.gen::<f64>() < p {
            diag.push(c);
        }
    }

    IcuStay { stay_id: format!("s{idx:06}"), label, demo, diag, seq }
}

/// Generates a cohort. Deterministic in the config; stays are keyed by
/// index, so growing `n_stays` extends the cohort without disturbing it.
pub fn generate(cfg: &GenConfig) -> Result<Vec<IcuStay>, GenError> {
    cfg.validate()?;
    // Solve P(label=1) = q(1−f) + (1−q)f = positive_rate for the raw rule
    // rate q, then threshold the N(0, ‖w‖²) latent sum at its 1−q quantile.
    let q = (cfg.positive_rate - LABEL_FLIP) / (1.0 - 2.0 * LABEL_FLIP);
    let threshold = phi_inv(1.0 - q) * cfg.signal_weights.norm();
    Ok((0..cfg.n_stays as u64).map(|idx| gen_stay(cfg, idx, threshold)).collect())
}

/// Construction-aware single-modality score: a matched filter on the
/// designated features for sequential modalities, the age bucket for
/// demographics, and the signal-code count for diagnoses. Used to sanity
/// check that planted information is (only) where it should be.
pub fn oracle_score(stay: &IcuStay, m: Modality, schema: &CohortSchema) -> f64 {
    match m {
        Modality::Demo => stay.demo[1] as f64,
        Modality::Diag => stay
            .diag
            .iter()
            .filter(|&&c| (c as usize) < DIAG_SIGNAL_CODES.min(schema.diag_vocab))
            .count() as f64,
        _ => {
            let k = designated_features(schema.seq_widths.get(m));
            let rows = stay.seq.get(m);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (t, row) in rows.iter().enumerate() {
                let g = signal_ramp(t);
                for &v in &row[..k] {
                    acc += v * g;
                }
                norm += g * g * k as f64;
            }
            if norm > 0.0 {
                acc / norm.sqrt()
            } else {
                0.0
            }
        }
    }
}

/// Modalities ordered by planted weight, strongest first; ties break
/// alphabetically so the order is total.
pub fn planted_order(w: &SignalWeights) -> Vec<Modality> {
    let mut order = ALL_MODALITIES.to_vec();
    order.sort_by(|&a, &b| {
        w.get(b).partial_cmp(&w.get(a)).expect("finite weights").then(a.name().cmp(b.name()))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;

    fn small_cfg() -> GenConfig {
        GenConfig { n_stays: 200, length_range: (4, 12), seed: 11, ..GenConfig::default() }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let longer = generate(&GenConfig { n_stays: 300, ..cfg }).unwrap();
        assert_eq!(&longer[..200], &a[..]);
        // Byte-level identity through serialization.
        let bytes = |stays: &[IcuStay]| {
            stays.iter().map(|s| serde_json::to_string(s).unwrap()).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(bytes(&a), bytes(&longer[..200]));
    }

    #[test]
    fn stays_validate_against_schema() {
        let cfg = small_cfg();
        for stay in generate(&cfg).unwrap() {
            stay.validate(&cfg.schema).unwrap();
            assert!(stay.len_hours() >= 4 && stay.len_hours() <= 12);
        }
    }

    #[test]
    fn prevalence_matches_request() {
        let cfg = GenConfig {
            n_stays: 5000,
            positive_rate: 0.08,
            length_range: (4, 8),
            seed: 7,
            ..GenConfig::default()
        };
        let stays = generate(&cfg).unwrap();
        let rate = stays.iter().filter(|s| s.label == 1).count() as f64 / stays.len() as f64;
        assert!((rate - 0.08).abs() <= 0.02, "prevalence {rate}");
    }

    #[test]
    fn lengths_are_uniform() {
        let cfg = GenConfig { n_stays: 5000, length_range: (8, 48), ..GenConfig::default() };
        let stays = generate(&cfg).unwrap();
        // Eight equal-width bins over 41 possible lengths; chi-square with
        // 7 degrees of freedom at the 1% level.
        let (lo, hi) = cfg.length_range;
        let span = hi - lo + 1;
        let mut counts = [0usize; 8];
        for s in &stays {
            let bin = ((s.len_hours() - lo) * 8 / span).min(7);
            counts[bin] += 1;
        }
        // Expected widths follow the same assignment rule as the counts.
        let mut widths = [0usize; 8];
        for v in 0..span {
            widths[(v * 8 / span).min(7)] += 1;
        }
        let expected: Vec<f64> =
            widths.iter().map(|&w| stays.len() as f64 * w as f64 / span as f64).collect();
        let chi2: f64 =
            counts.iter().zip(&expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 18.475, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn oracle_auroc_monotone_in_weight() {
        let mut aurocs = Vec::new();
        for &w in &[0.0, 0.5, 1.0] {
            let mut weights = SignalWeights::zero();
            weights.set(Modality::Proc, w);
            // Short stays keep the matched filter away from the accuracy
            // ceiling set by label flips, so the middle weight is visibly
            // worse than the top one.
            let cfg = GenConfig {
                n_stays: 2000,
                positive_rate: 0.3,
                length_range: (4, 10),
                signal_weights: weights,
                seed: 5,
                ..GenConfig::default()
            };
            let stays = generate(&cfg).unwrap();
            let scores: Vec<f64> =
                stays.iter().map(|s| oracle_score(s, Modality::Proc, &cfg.schema)).collect();
            let labels: Vec<u8> = stays.iter().map(|s| s.label).collect();
            aurocs.push(auroc(&scores, &labels).unwrap());
        }
        assert!((aurocs[0] - 0.5).abs() < 0.04, "w=0 should be chance, got {}", aurocs[0]);
        assert!(aurocs[1] > aurocs[0] + 0.05, "{aurocs:?}");
        assert!(aurocs[2] > aurocs[1] + 0.02, "{aurocs:?}");
    }

    #[test]
    fn signal_sits_only_in_designated_features() {
        let mut weights = SignalWeights::zero();
        weights.set(Modality::Proc, 0.9);
        let cfg = GenConfig {
            n_stays: 1500,
            positive_rate: 0.3,
            length_range: (24, 36),
            signal_weights: weights,
            seed: 9,
            ..GenConfig::default()
        };
        let stays = generate(&cfg).unwrap();
        let width = cfg.schema.seq_widths.proc;
        let k = designated_features(width);
        // Average late-hour feature value by class.
        let class_mean = |label: u8, range: std::ops::Range<usize>| -> f64 {
            let mut sum = 0.0;
            let mut n = 0.0;
            for s in stays.iter().filter(|s| s.label == label) {
                for row in &s.seq.proc[20..] {
                    for f in range.clone() {
                        sum += row[f];
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        let gap_signal = class_mean(1, 0..k) - class_mean(0, 0..k);
        let gap_noise = (class_mean(1, k..width) - class_mean(0, k..width)).abs();
        assert!(gap_signal > 0.3, "designated gap {gap_signal}");
        assert!(gap_noise < 0.05, "noise gap {gap_noise}");
    }

    /// Tiny logistic regression on standardized per-modality oracle scores.
    fn probe_auroc(stays: &[IcuStay], schema: &CohortSchema, n_train: usize) -> f64 {
        let feats: Vec<Vec<f64>> = stays
            .iter()
            .map(|s| ALL_MODALITIES.iter().map(|&m| oracle_score(s, m, schema)).collect())
            .collect();
        let d = 8;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for f in &feats[..n_train] {
            for j in 0..d {
                mean[j] += f[j];
            }
        }
        for m in &mut mean {
            *m /= n_train as f64;
        }
        for f in &feats[..n_train] {
            for j in 0..d {
                var[j] += (f[j] - mean[j]).powi(2);
            }
        }
        for v in &mut var {
            *v = (*v / n_train as f64).max(1e-12);
        }
        let std_feat = |f: &[f64], j: usize| (f[j] - mean[j]) / var[j].sqrt();

        let labels: Vec<f64> = stays.iter().map(|s| s.label as f64).collect();
        let mut wts = vec![0.0; d];
        let mut bias = 0.0;
        for _ in 0..300 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (f, &y) in feats[..n_train].iter().zip(&labels[..n_train]) {
                let z: f64 = bias + (0..d).map(|j| wts[j] * std_feat(f, j)).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - y;
                for j in 0..d {
                    gw[j] += err * std_feat(f, j);
                }
                gb += err;
            }
            for j in 0..d {
                wts[j] -= 0.5 * gw[j] / n_train as f64;
            }
            bias -= 0.5 * gb / n_train as f64;
        }
        let scores: Vec<f64> = feats[n_train..]
            .iter()
            .map(|f| bias + (0..d).map(|j| wts[j] * std_feat(f, j)).sum::<f64>())
            .collect();
        let test_labels: Vec<u8> = stays[n_train..].iter().map(|s| s.label).collect();
        auroc(&scores, &test_labels).unwrap()
    }

    #[test]
    fn null_cohort_defeats_the_probe() {
        let cfg = GenConfig {
            n_stays: 6000,
            positive_rate: 0.2,
            length_range: (8, 24),
            signal_weights: SignalWeights::zero(),
            seed: 13,
            ..GenConfig::default()
        };
        let stays = generate(&cfg).unwrap();
        let a = probe_auroc(&stays, &cfg.schema, 4000);
        assert!((a - 0.5).abs() <= 0.03, "null probe AUROC {a}");
    }

    #[test]
    fn default_weights_feed_the_probe() {
        let cfg = GenConfig { n_stays: 3000, positive_rate: 0.2, seed: 13, ..GenConfig::default() };
        let stays = generate(&cfg).unwrap();
        let a = probe_auroc(&stays, &cfg.schema, 2000);
        assert!(a > 0.8, "signal probe AUROC {a}");
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let bad = |patch: fn(&mut GenConfig)| {
            let mut cfg = GenConfig::default();
            patch(&mut cfg);
            assert!(matches!(generate(&cfg), Err(GenError::BadConfig(_))), "{cfg:?}");
        };
        bad(|c| c.n_stays = 0);
        bad(|c| c.positive_rate = 0.0);
        bad(|c| c.positive_rate = 1.0);
        bad(|c| c.positive_rate = 0.004); // below the flip floor
        bad(|c| c.length_range = (0, 10));
        bad(|c| c.length_range = (20, 10));
        bad(|c| c.length_range = (8, MAX_HOURS + 1));
        bad(|c| c.noise_std = 0.0);
        bad(|c| c.signal_weights.proc = -0.1);
    }

    #[test]
    fn planted_order_breaks_ties_alphabetically() {
        let order = planted_order(&SignalWeights::default());
        let names: Vec<&str> = order.iter().map(|m| m.name()).collect();
        assert_eq!(names, ["proc", "out", "meds", "chart", "date", "demo", "diag", "ing"]);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = GenConfig { n_stays: 77, seed: 3, ..GenConfig::default() };
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: GenConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        // Partial configs fall back to defaults field by field.
        let partial: GenConfig = serde_json::from_str(r#"{"n_stays": 5}"#).unwrap();
        assert_eq!(partial.n_stays, 5);
        assert_eq!(partial.seed, GenConfig::default().seed);
    }
}

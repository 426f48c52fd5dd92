//! Modality attribution by inference-time knockouts.
//!
//! One trained model, one fixed eval cohort, one threshold. Every
//! configuration zeroes a subset of modalities during the forward pass and
//! re-scores the identical stays, so a metric delta isolates information
//! removal rather than threshold or data drift. Knockouts never retrain.
//!
//! The harness enumerates 37 configurations — the all-modality baseline,
//! 8 single knockouts, and all C(8,2) = 28 pair knockouts — plus a test
//! length sweep that truncates the cohort to fixed observation windows.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{truncate, DataError, IcuStay, Modality, ALL_MODALITIES};
use crate::metrics::{pearson, MetricsReport};
use crate::model::{Model, ModelError, ZeroSet};
use crate::train::{eval_chunks, evaluate_cohort, TrainError, RISK_THRESHOLD};

/// Truncation grid for the observation-window sweep, in hours.
pub const DEFAULT_SWEEP_GRID: [usize; 10] = [4, 8, 12, 24, 36, 48, 60, 72, 84, 96];

/// Shortest admissible sweep window.
pub const MIN_SWEEP_HOURS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("eval cohort must contain both outcome classes")]
    SingleClass,
    #[error("bad sweep grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The six tabulated quantities. `Loss` is stored in reports and CSVs but
/// has no heatmap panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Loss,
    Auroc,
    Auprc,
    Accuracy,
    Precision,
    Recall,
}

/// CSV column order.
pub const TABLE_METRICS: [MetricKind; 6] = [
    MetricKind::Loss,
    MetricKind::Auroc,
    MetricKind::Auprc,
    MetricKind::Accuracy,
    MetricKind::Precision,
    MetricKind::Recall,
];

/// Heatmap panels (a-e): everything but the loss.
pub const RENDERED_METRICS: [MetricKind; 5] = [
    MetricKind::Auroc,
    MetricKind::Auprc,
    MetricKind::Accuracy,
    MetricKind::Precision,
    MetricKind::Recall,
];

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Loss => "loss",
            MetricKind::Auroc => "auroc",
            MetricKind::Auprc => "auprc",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
        }
    }
}

/// One evaluated knockout configuration: raw metrics plus deltas against
/// the shared baseline. Undefined entries (a knockout that predicts no
/// positives has no precision) stay `None` instead of failing the run.
#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub metrics: MetricsReport,
    /// Training objective (classification + weighted forecast error) on the
    /// eval cohort, averaged over stays. Forecast targets stay un-zeroed:
    /// the knockout withholds inputs, not ground truth.
    pub loss: f64,
    pub delta: DeltaMetrics,
}

impl Cell {
    pub fn value(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Loss => Some(self.loss),
            MetricKind::Auroc => self.metrics.auroc,
            MetricKind::Auprc => self.metrics.auprc,
            MetricKind::Accuracy => Some(self.metrics.accuracy),
            MetricKind::Precision => self.metrics.precision_defined.then_some(self.metrics.precision),
            MetricKind::Recall => self.metrics.recall_defined.then_some(self.metrics.recall),
        }
    }

    pub fn delta_of(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Loss => Some(self.delta.loss),
            MetricKind::Auroc => self.delta.auroc,
            MetricKind::Auprc => self.delta.auprc,
            MetricKind::Accuracy => Some(self.delta.accuracy),
            MetricKind::Precision => self.delta.precision,
            MetricKind::Recall => self.delta.recall,
        }
    }
}

/// `ablated - baseline` per metric; negative means the knockout hurt.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaMetrics {
    pub loss: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LomoReport {
    pub baseline: Cell,
    /// One row per modality in canonical order.
    pub rows: Vec<(Modality, Cell)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LtmoReport {
    pub baseline: Cell,
    /// All 28 unordered pairs, canonical order, first index < second.
    pub pairs: Vec<(Modality, Modality, Cell)>,
}

impl LtmoReport {
    /// Symmetric 8x8 delta matrix for one metric; diagonal is `None`.
    pub fn matrix(&self, kind: MetricKind) -> [[Option<f64>; 8]; 8] {
        let mut m = [[None; 8]; 8];
        for (a, b, cell) in &self.pairs {
            let (i, j) = (a.all_index(), b.all_index());
            m[i][j] = cell.delta_of(kind);
            m[j][i] = m[i][j];
        }
        m
    }

    pub fn pair(&self, a: Modality, b: Modality) -> Option<&Cell> {
        self.pairs
            .iter()
            .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
            .map(|(_, _, c)| c)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterPoint {
    pub label: String,
    pub baseline: bool,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Correlation {
    pub x: &'static str,
    pub y: &'static str,
    /// `None` when fewer than 3 defined points or a zero-variance column.
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

/// Raw metric values per knockout pair, plus the correlations announced in
/// the panel captions. The baseline point is a reference mark, not part of
/// the correlation sample.
#[derive(Debug, Clone, Serialize)]
pub struct ScatterData {
    pub points: Vec<ScatterPoint>,
    pub correlations: [Correlation; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub lomo: LomoReport,
    pub ltmo: LtmoReport,
    pub scatter: ScatterData,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Score one knockout configuration on the full cohort: thresholded and
/// ranking metrics plus the stay-weighted mean training loss. Single code
/// path for baseline, single, and pair knockouts.
pub fn eval_config(
    model: &Model,
    stays: &[IcuStay],
    zero_out: &ZeroSet,
) -> Result<(MetricsReport, f64), AblationError> {
    let mut scores = Vec::with_capacity(stays.len());
    let mut loss_weighted = 0.0;
    for (start, end) in eval_chunks(stays) {
        let batch = crate::data::collate(&stays[start..end], model.cfg.schema.diag_vocab)?;
        let lg = model.build_loss(&batch, zero_out)?;
        let logits = lg.built.graph.value(lg.built.risk_logit);
        scores.extend(logits.data().iter().map(|&z| sigmoid(z)));
        loss_weighted += lg.parts().total * (end - start) as f64;
    }
    let labels: Vec<u8> = stays.iter().map(|s| s.label).collect();
    let report = MetricsReport::from_scores(&scores, &labels, RISK_THRESHOLD);
    Ok((report, loss_weighted / stays.len() as f64))
}

fn delta_against(base: &(MetricsReport, f64), cur: &(MetricsReport, f64)) -> DeltaMetrics {
    let sub = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    let prec = |r: &MetricsReport| r.precision_defined.then_some(r.precision);
    let rec = |r: &MetricsReport| r.recall_defined.then_some(r.recall);
    DeltaMetrics {
        loss: cur.1 - base.1,
        auroc: sub(cur.0.auroc, base.0.auroc),
        auprc: sub(cur.0.auprc, base.0.auprc),
        accuracy: cur.0.accuracy - base.0.accuracy,
        precision: sub(prec(&cur.0), prec(&base.0)),
        recall: sub(rec(&cur.0), rec(&base.0)),
    }
}

fn check_two_classes(stays: &[IcuStay]) -> Result<(), AblationError> {
    let pos = stays.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == stays.len() {
        return Err(AblationError::SingleClass);
    }
    Ok(())
}

/// Evaluate a list of knockout sets in parallel; results keep input order.
fn eval_many(
    model: &Model,
    stays: &[IcuStay],
    configs: &[ZeroSet],
) -> Result<Vec<(MetricsReport, f64)>, AblationError> {
    configs
        .par_iter()
        .map(|zero| eval_config(model, stays, zero))
        .collect()
}

/// All unordered modality pairs in canonical order.
pub fn modality_pairs() -> Vec<(Modality, Modality)> {
    let mut pairs = Vec::with_capacity(28);
    for i in 0..ALL_MODALITIES.len() {
        for j in i + 1..ALL_MODALITIES.len() {
            pairs.push((ALL_MODALITIES[i], ALL_MODALITIES[j]));
        }
    }
    pairs
}

/// Baseline plus all 37 knockout configurations in one pass.
pub fn run_ablation(model: &Model, stays: &[IcuStay]) -> Result<AblationReport, AblationError> {
    check_two_classes(stays)?;
    let pairs = modality_pairs();
    let mut configs = vec![ZeroSet::new()];
    configs.extend(ALL_MODALITIES.iter().map(|&m| ZeroSet::from([m])));
    configs.extend(pairs.iter().map(|&(a, b)| ZeroSet::from([a, b])));
    let results = eval_many(model, stays, &configs)?;

    let base = &results[0];
    let cell = |r: &(MetricsReport, f64)| Cell {
        metrics: r.0.clone(),
        loss: r.1,
        delta: delta_against(base, r),
    };
    let baseline = cell(base);
    let lomo = LomoReport {
        baseline: baseline.clone(),
        rows: ALL_MODALITIES.iter().zip(&results[1..9]).map(|(&m, r)| (m, cell(r))).collect(),
    };
    let ltmo = LtmoReport {
        baseline: baseline.clone(),
        pairs: pairs
            .iter()
            .zip(&results[9..])
            .map(|(&(a, b), r)| (a, b, cell(r)))
            .collect(),
    };
    let scatter = metric_scatter(&ltmo);
    Ok(AblationReport { lomo, ltmo, scatter })
}

/// Single-modality knockouts only (9 evaluations).
pub fn run_lomo(model: &Model, stays: &[IcuStay]) -> Result<LomoReport, AblationError> {
    check_two_classes(stays)?;
    let mut configs = vec![ZeroSet::new()];
    configs.extend(ALL_MODALITIES.iter().map(|&m| ZeroSet::from([m])));
    let results = eval_many(model, stays, &configs)?;
    let base = &results[0];
    let cell = |r: &(MetricsReport, f64)| Cell {
        metrics: r.0.clone(),
        loss: r.1,
        delta: delta_against(base, r),
    };
    Ok(LomoReport {
        baseline: cell(base),
        rows: ALL_MODALITIES.iter().zip(&results[1..]).map(|(&m, r)| (m, cell(r))).collect(),
    })
}

/// Pair knockouts only (29 evaluations).
pub fn run_ltmo(model: &Model, stays: &[IcuStay]) -> Result<LtmoReport, AblationError> {
    check_two_classes(stays)?;
    let pairs = modality_pairs();
    let mut configs = vec![ZeroSet::new()];
    configs.extend(pairs.iter().map(|&(a, b)| ZeroSet::from([a, b])));
    let results = eval_many(model, stays, &configs)?;
    let base = &results[0];
    let cell = |r: &(MetricsReport, f64)| Cell {
        metrics: r.0.clone(),
        loss: r.1,
        delta: delta_against(base, r),
    };
    Ok(LtmoReport {
        baseline: cell(base),
        pairs: pairs
            .iter()
            .zip(&results[1..])
            .map(|(&(a, b), r)| (a, b, cell(r)))
            .collect(),
    })
}

/// Scatter dataset over the 28 pair knockouts: raw metric values per point
/// and the two caption correlations, computed with pairwise deletion of
/// points where either metric is undefined.
pub fn metric_scatter(ltmo: &LtmoReport) -> ScatterData {
    let mut points = vec![ScatterPoint {
        label: "baseline".into(),
        baseline: true,
        auroc: ltmo.baseline.value(MetricKind::Auroc),
        auprc: ltmo.baseline.value(MetricKind::Auprc),
        precision: ltmo.baseline.value(MetricKind::Precision),
        recall: ltmo.baseline.value(MetricKind::Recall),
    }];
    for (a, b, cell) in &ltmo.pairs {
        points.push(ScatterPoint {
            label: format!("{}+{}", a.name(), b.name()),
            baseline: false,
            auroc: cell.value(MetricKind::Auroc),
            auprc: cell.value(MetricKind::Auprc),
            precision: cell.value(MetricKind::Precision),
            recall: cell.value(MetricKind::Recall),
        });
    }
    let correlate = |get_x: fn(&ScatterPoint) -> Option<f64>,
                     get_y: fn(&ScatterPoint) -> Option<f64>,
                     x: &'static str,
                     y: &'static str| {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for p in points.iter().filter(|p| !p.baseline) {
            if let (Some(a), Some(b)) = (get_x(p), get_y(p)) {
                xs.push(a);
                ys.push(b);
            }
        }
        let fit = pearson(&xs, &ys);
        Correlation {
            x,
            y,
            rho: fit.map(|(r, _)| r),
            p: fit.map(|(_, p)| p),
            n: xs.len(),
        }
    };
    let correlations = [
        correlate(|p| p.auroc, |p| p.auprc, "auroc", "auprc"),
        correlate(|p| p.precision, |p| p.recall, "precision", "recall"),
    ];
    ScatterData { points, correlations }
}

/// One row of the observation-window sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub hours: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Evaluate the full cohort truncated to each window in `hours_list`.
/// Stays shorter than a window are kept whole, so a window beyond every
/// stay length reproduces the untruncated evaluation exactly.
pub fn test_length_sweep(
    model: &Model,
    stays: &[IcuStay],
    hours_list: &[usize],
) -> Result<SweepReport, AblationError> {
    if hours_list.is_empty() {
        return Err(AblationError::BadGrid("empty hours list".into()));
    }
    if let Some(&h) = hours_list.iter().find(|&&h| h < MIN_SWEEP_HOURS) {
        return Err(AblationError::BadGrid(format!(
            "window of {h} h is below the minimum of {MIN_SWEEP_HOURS}"
        )));
    }
    check_two_classes(stays)?;
    let rows: Result<Vec<SweepRow>, AblationError> = hours_list
        .par_iter()
        .map(|&hours| {
            let cut: Vec<IcuStay> =
                stays.iter().map(|s| truncate(s, hours)).collect::<Result<_, _>>()?;
            let (_, metrics) = evaluate_cohort(model, &cut, &ZeroSet::new())?;
            Ok(SweepRow { hours, metrics })
        })
        .collect();
    Ok(SweepReport { rows: rows? })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// `lomo.csv`: baseline row first, then one row per knocked-out modality,
/// each metric as `value` and `delta` columns, `NA` where undefined.
pub fn write_lomo_csv(report: &LomoReport, path: &Path) -> Result<(), AblationError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "zeroed")?;
    for kind in TABLE_METRICS {
        write!(f, ",{0},delta_{0}", kind.name())?;
    }
    writeln!(f)?;
    let mut row = |name: &str, cell: &Cell| -> std::io::Result<()> {
        write!(f, "{name}")?;
        for kind in TABLE_METRICS {
            write!(f, ",{},{}", fmt_opt(cell.value(kind)), fmt_opt(cell.delta_of(kind)))?;
        }
        writeln!(f)
    };
    row("baseline", &report.baseline)?;
    for (m, cell) in &report.rows {
        row(m.name(), cell)?;
    }
    Ok(())
}

/// `ltmo_<metric>.csv`: symmetric 8x8 delta matrix, `NA` on the diagonal
/// (and for undefined cells).
pub fn write_ltmo_csv(report: &LtmoReport, kind: MetricKind, path: &Path) -> Result<(), AblationError> {
    let m = report.matrix(kind);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "zeroed")?;
    for name in ALL_MODALITIES.iter().map(|m| m.name()) {
        write!(f, ",{name}")?;
    }
    writeln!(f)?;
    for (i, a) in ALL_MODALITIES.iter().enumerate() {
        write!(f, "{}", a.name())?;
        for j in 0..ALL_MODALITIES.len() {
            write!(f, ",{}", fmt_opt(m[i][j]))?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// `scatter.csv`: point rows (`point` / `baseline`) then correlation rows.
pub fn write_scatter_csv(scatter: &ScatterData, path: &Path) -> Result<(), AblationError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "row,label,auroc,auprc,precision,recall,rho,p,n")?;
    for p in &scatter.points {
        writeln!(
            f,
            "{},{},{},{},{},{},,,",
            if p.baseline { "baseline" } else { "point" },
            p.label,
            fmt_opt(p.auroc),
            fmt_opt(p.auprc),
            fmt_opt(p.precision),
            fmt_opt(p.recall),
        )?;
    }
    for c in &scatter.correlations {
        writeln!(
            f,
            "correlation,{}~{},,,,,{},{},{}",
            c.x,
            c.y,
            fmt_opt(c.rho),
            fmt_opt(c.p),
            c.n
        )?;
    }
    Ok(())
}

/// `sweep.csv`: one row per observation window.
pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<(), AblationError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "hours,n,auroc,auprc,accuracy,precision,recall,f1")?;
    for row in &report.rows {
        let m = &row.metrics;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            row.hours,
            m.n,
            fmt_opt(m.auroc),
            fmt_opt(m.auprc),
            m.accuracy,
            fmt_opt(m.precision_defined.then_some(m.precision)),
            fmt_opt(m.recall_defined.then_some(m.recall)),
            m.f1,
        )?;
    }
    Ok(())
}

/// Interpolate a diverging blue-white-red ramp: t in [-1, 1], negative blue
/// ("darker = worse"), positive red, zero white.
fn diverging_color(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t.abs()).round() as u8;
    let (r, g, b) = if t < 0.0 {
        (lerp(255.0, 33.0), lerp(255.0, 102.0), lerp(255.0, 172.0))
    } else {
        (lerp(255.0, 178.0), lerp(255.0, 24.0), lerp(255.0, 43.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// 8x8 delta heatmap for one metric as a standalone SVG document.
pub fn heatmap_svg(report: &LtmoReport, kind: MetricKind) -> String {
    let m = report.matrix(kind);
    let scale = m
        .iter()
        .flatten()
        .filter_map(|v| *v)
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    const CELL: f64 = 56.0;
    const LEFT: f64 = 70.0;
    const TOP: f64 = 56.0;
    let size = (LEFT + 8.0 * CELL + 16.0, TOP + 8.0 * CELL + 16.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
         viewBox=\"0 0 {:.0} {:.0}\" font-family=\"sans-serif\">\n",
        size.0, size.1, size.0, size.1
    );
    s += &format!(
        "<text x=\"{:.0}\" y=\"20\" font-size=\"15\" text-anchor=\"middle\">\u{0394}{} \
         (baseline {})</text>\n",
        LEFT + 4.0 * CELL,
        kind.name(),
        report
            .baseline
            .value(kind)
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "NA".into()),
    );
    for (i, name) in ALL_MODALITIES.iter().map(|m| m.name()).enumerate() {
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{name}</text>\n",
            LEFT + (i as f64 + 0.5) * CELL,
            TOP - 8.0
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{name}</text>\n",
            LEFT - 6.0,
            TOP + (i as f64 + 0.5) * CELL + 4.0
        );
    }
    for i in 0..8 {
        for j in 0..8 {
            let (x, y) = (LEFT + j as f64 * CELL, TOP + i as f64 * CELL);
            let (fill, label, dark) = match (i == j, m[i][j]) {
                (true, _) => ("#c8c8c8".into(), String::new(), false),
                (false, None) => ("#eeeeee".into(), "NA".into(), false),
                (false, Some(v)) => {
                    let t = v / scale;
                    (diverging_color(t), format!("{v:.2}"), t.abs() > 0.6)
                }
            };
            s += &format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL:.0}\" height=\"{CELL:.0}\" \
                 fill=\"{fill}\" stroke=\"#ffffff\"/>\n"
            );
            if !label.is_empty() {
                s += &format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" \
                     fill=\"{}\">{label}</text>\n",
                    x + CELL / 2.0,
                    y + CELL / 2.0 + 4.0,
                    if dark { "#ffffff" } else { "#000000" }
                );
            }
        }
    }
    s += "</svg>\n";
    s
}

/// Two-panel metric scatter (ranking pair and threshold pair) as SVG.
pub fn scatter_svg(scatter: &ScatterData) -> String {
    const W: f64 = 420.0;
    const H: f64 = 360.0;
    const PAD: f64 = 52.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
         viewBox=\"0 0 {:.0} {:.0}\" font-family=\"sans-serif\">\n",
        2.0 * W,
        H,
        2.0 * W,
        H
    );
    let panels: [(fn(&ScatterPoint) -> Option<f64>, fn(&ScatterPoint) -> Option<f64>, usize); 2] =
        [(|p| p.auroc, |p| p.auprc, 0), (|p| p.precision, |p| p.recall, 1)];
    for (get_x, get_y, idx) in panels {
        let x0 = idx as f64 * W;
        let corr = &scatter.correlations[idx];
        let pts: Vec<(f64, f64, bool)> = scatter
            .points
            .iter()
            .filter_map(|p| Some((get_x(p)?, get_y(p)?, p.baseline)))
            .collect();
        let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y, _) in &pts {
            lo_x = lo_x.min(x);
            hi_x = hi_x.max(x);
            lo_y = lo_y.min(y);
            hi_y = hi_y.max(y);
        }
        if pts.is_empty() {
            (lo_x, hi_x, lo_y, hi_y) = (0.0, 1.0, 0.0, 1.0);
        }
        // Pad degenerate and tight ranges so points sit inside the frame.
        let span = |lo: f64, hi: f64| if hi - lo < 1e-9 { 0.05 } else { (hi - lo) * 0.08 };
        let (px, py) = (span(lo_x, hi_x), span(lo_y, hi_y));
        let (lo_x, hi_x, lo_y, hi_y) = (lo_x - px, hi_x + px, lo_y - py, hi_y + py);
        let sx = |v: f64| x0 + PAD + (v - lo_x) / (hi_x - lo_x) * (W - 1.6 * PAD);
        let sy = |v: f64| H - PAD - (v - lo_y) / (hi_y - lo_y) * (H - 1.8 * PAD);

        s += &format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" \
             stroke=\"#444444\"/>\n",
            x0 + PAD,
            0.8 * PAD,
            W - 1.6 * PAD,
            H - 1.8 * PAD - (0.8 * PAD - PAD).abs()
        );
        for k in 0..=4 {
            let fx = lo_x + (hi_x - lo_x) * k as f64 / 4.0;
            let fy = lo_y + (hi_y - lo_y) * k as f64 / 4.0;
            s += &format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{fx:.2}</text>\n",
                sx(fx),
                H - PAD + 16.0
            );
            s += &format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{fy:.2}</text>\n",
                x0 + PAD - 6.0,
                sy(fy) + 3.0
            );
        }
        for &(x, y, is_base) in &pts {
            if is_base {
                let (cx, cy) = (sx(x), sy(y));
                s += &format!(
                    "<path d=\"M {cx:.1} {:.1} L {:.1} {cy:.1} L {cx:.1} {:.1} L {:.1} {cy:.1} Z\" \
                     fill=\"#b2182b\"/>\n",
                    cy - 7.0,
                    cx + 7.0,
                    cy + 7.0,
                    cx - 7.0
                );
            } else {
                s += &format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#2166ac\" \
                     fill-opacity=\"0.75\"/>\n",
                    sx(x),
                    sy(y)
                );
            }
        }
        let fmt_p = |p: Option<f64>| match p {
            Some(v) if v < 1e-4 => "p<0.0001".to_string(),
            Some(v) => format!("p={v:.4}"),
            None => "p=NA".into(),
        };
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{} vs {} \
             (rho={}, {})</text>\n",
            x0 + W / 2.0,
            0.8 * PAD - 12.0,
            corr.x,
            corr.y,
            corr.rho.map(|r| format!("{r:.3}")).unwrap_or_else(|| "NA".into()),
            fmt_p(corr.p),
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x0 + W / 2.0,
            H - 8.0,
            corr.x
        );
    }
    s += "</svg>\n";
    s
}

impl AblationReport {
    /// Write the complete artifact set into `dir`: `lomo.csv`, a delta
    /// matrix CSV per tabulated metric, `scatter.csv`, one heatmap SVG per
    /// rendered metric (loss is stored but has no panel), and `scatter.svg`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), AblationError> {
        std::fs::create_dir_all(dir)?;
        write_lomo_csv(&self.lomo, &dir.join("lomo.csv"))?;
        for kind in TABLE_METRICS {
            write_ltmo_csv(&self.ltmo, kind, &dir.join(format!("ltmo_{}.csv", kind.name())))?;
        }
        write_scatter_csv(&self.scatter, &dir.join("scatter.csv"))?;
        for kind in RENDERED_METRICS {
            std::fs::write(
                dir.join(format!("heatmap_{}.svg", kind.name())),
                heatmap_svg(&self.ltmo, kind),
            )?;
        }
        std::fs::write(dir.join("scatter.svg"), scatter_svg(&self.scatter))?;
        Ok(())
    }
}

/// Published MIMIC-IV reference results, for side-by-side context next to
/// synthetic-cohort runs. Documentation anchors only: no test or harness
/// treats them as targets for this implementation.
pub mod reference {
    /// Per-metric `(value, delta)` pairs exactly as tabulated.
    #[derive(Debug, Clone, Copy)]
    pub struct RefRow {
        pub zeroed: &'static [&'static str],
        pub loss: (f64, f64),
        pub auroc: (f64, f64),
        pub auprc: (f64, f64),
        pub accuracy: (f64, f64),
        pub precision: (f64, f64),
        pub recall: (f64, f64),
    }

    pub const MIMIC_BASELINE: RefRow = RefRow {
        zeroed: &[],
        loss: (0.01, 0.00),
        auroc: (0.98, 0.00),
        auprc: (0.83, 0.00),
        accuracy: (0.96, 0.00),
        precision: (0.62, 0.00),
        recall: (0.90, 0.00),
    };

    pub const MIMIC_LOMO: [RefRow; 8] = [
        RefRow { zeroed: &["meds"], loss: (0.01, 0.00), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.96, 0.00), precision: (0.65, 0.03), recall: (0.84, -0.06) },
        RefRow { zeroed: &["chart"], loss: (0.01, 0.00), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.89, -0.01) },
        RefRow { zeroed: &["out"], loss: (0.01, 0.00), auroc: (0.98, 0.00), auprc: (0.79, -0.04), accuracy: (0.92, -0.04), precision: (0.44, -0.18), recall: (0.93, 0.03) },
        RefRow { zeroed: &["proc"], loss: (0.01, 0.00), auroc: (0.95, -0.03), auprc: (0.64, -0.19), accuracy: (0.95, -0.01), precision: (0.62, 0.00), recall: (0.60, -0.30) },
        RefRow { zeroed: &["date"], loss: (0.01, 0.00), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.90, 0.00) },
        RefRow { zeroed: &["ing"], loss: (0.02, 0.01), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.94, -0.02), precision: (0.51, -0.11), recall: (0.91, 0.01) },
        RefRow { zeroed: &["demo"], loss: (0.04, 0.03), auroc: (0.97, -0.01), auprc: (0.80, -0.03), accuracy: (0.95, -0.01), precision: (0.60, -0.02), recall: (0.86, -0.04) },
        RefRow { zeroed: &["diag"], loss: (0.01, 0.00), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.90, 0.00) },
    ];

    pub const MIMIC_LTMO: [RefRow; 28] = [
        RefRow { zeroed: &["meds", "chart"], loss: (0.12, 0.11), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.96, 0.00), precision: (0.65, 0.03), recall: (0.83, -0.07) },
        RefRow { zeroed: &["meds", "out"], loss: (0.21, 0.20), auroc: (0.97, -0.01), auprc: (0.76, -0.07), accuracy: (0.92, -0.04), precision: (0.47, -0.15), recall: (0.91, 0.01) },
        RefRow { zeroed: &["meds", "proc"], loss: (0.19, 0.18), auroc: (0.91, -0.07), auprc: (0.49, -0.34), accuracy: (0.94, -0.02), precision: (0.64, 0.02), recall: (0.32, -0.58) },
        RefRow { zeroed: &["meds", "date"], loss: (0.12, 0.11), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.96, 0.00), precision: (0.65, 0.03), recall: (0.84, -0.06) },
        RefRow { zeroed: &["meds", "ing"], loss: (0.15, 0.14), auroc: (0.97, -0.01), auprc: (0.79, -0.04), accuracy: (0.95, -0.01), precision: (0.60, -0.02), recall: (0.82, -0.08) },
        RefRow { zeroed: &["meds", "diag"], loss: (0.12, 0.11), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.96, 0.00), precision: (0.65, 0.03), recall: (0.83, -0.07) },
        RefRow { zeroed: &["meds", "demo"], loss: (0.16, 0.15), auroc: (0.97, -0.01), auprc: (0.77, -0.06), accuracy: (0.95, -0.01), precision: (0.63, 0.01), recall: (0.78, -0.12) },
        RefRow { zeroed: &["chart", "out"], loss: (0.23, 0.22), auroc: (0.98, 0.00), auprc: (0.79, -0.04), accuracy: (0.92, -0.04), precision: (0.44, -0.18), recall: (0.93, 0.03) },
        RefRow { zeroed: &["chart", "proc"], loss: (0.16, 0.15), auroc: (0.94, -0.04), auprc: (0.64, -0.19), accuracy: (0.95, -0.01), precision: (0.62, 0.00), recall: (0.58, -0.32) },
        RefRow { zeroed: &["chart", "date"], loss: (0.13, 0.12), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.89, -0.01) },
        RefRow { zeroed: &["chart", "ing"], loss: (0.18, 0.17), auroc: (0.98, 0.00), auprc: (0.79, -0.04), accuracy: (0.94, -0.02), precision: (0.52, -0.10), recall: (0.90, 0.00) },
        RefRow { zeroed: &["chart", "diag"], loss: (0.13, 0.12), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.89, -0.01) },
        RefRow { zeroed: &["chart", "demo"], loss: (0.17, 0.16), auroc: (0.97, -0.01), auprc: (0.80, -0.03), accuracy: (0.95, -0.01), precision: (0.60, -0.02), recall: (0.85, -0.05) },
        RefRow { zeroed: &["out", "proc"], loss: (0.25, 0.24), auroc: (0.93, -0.05), auprc: (0.54, -0.29), accuracy: (0.91, -0.05), precision: (0.40, -0.22), recall: (0.70, -0.20) },
        RefRow { zeroed: &["out", "date"], loss: (0.23, 0.22), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.92, -0.04), precision: (0.44, -0.18), recall: (0.93, 0.03) },
        RefRow { zeroed: &["out", "ing"], loss: (0.34, 0.33), auroc: (0.97, -0.01), auprc: (0.77, -0.06), accuracy: (0.87, -0.09), precision: (0.34, -0.28), recall: (0.95, 0.05) },
        RefRow { zeroed: &["out", "diag"], loss: (0.23, 0.22), auroc: (0.98, 0.00), auprc: (0.79, -0.04), accuracy: (0.92, -0.04), precision: (0.44, -0.18), recall: (0.93, 0.03) },
        RefRow { zeroed: &["out", "demo"], loss: (0.34, 0.33), auroc: (0.97, -0.01), auprc: (0.76, -0.07), accuracy: (0.89, -0.07), precision: (0.36, -0.26), recall: (0.93, 0.03) },
        RefRow { zeroed: &["proc", "date"], loss: (0.16, 0.15), auroc: (0.95, -0.03), auprc: (0.64, -0.19), accuracy: (0.95, -0.01), precision: (0.62, 0.00), recall: (0.61, -0.29) },
        RefRow { zeroed: &["proc", "ing"], loss: (0.24, 0.23), auroc: (0.93, -0.05), auprc: (0.58, -0.25), accuracy: (0.92, -0.04), precision: (0.45, -0.17), recall: (0.67, -0.23) },
        RefRow { zeroed: &["proc", "diag"], loss: (0.16, 0.15), auroc: (0.95, -0.03), auprc: (0.64, -0.19), accuracy: (0.95, -0.01), precision: (0.62, 0.00), recall: (0.60, -0.30) },
        RefRow { zeroed: &["proc", "demo"], loss: (0.21, 0.20), auroc: (0.93, -0.05), auprc: (0.60, -0.23), accuracy: (0.95, -0.01), precision: (0.64, 0.02), recall: (0.52, -0.38) },
        RefRow { zeroed: &["date", "ing"], loss: (0.19, 0.18), auroc: (0.98, 0.00), auprc: (0.80, -0.03), accuracy: (0.94, -0.02), precision: (0.51, -0.11), recall: (0.90, 0.00) },
        RefRow { zeroed: &["date", "diag"], loss: (0.13, 0.12), auroc: (0.98, 0.00), auprc: (0.83, 0.00), accuracy: (0.96, 0.00), precision: (0.62, 0.00), recall: (0.90, 0.00) },
        RefRow { zeroed: &["date", "demo"], loss: (0.18, 0.17), auroc: (0.97, -0.01), auprc: (0.80, -0.03), accuracy: (0.95, -0.01), precision: (0.60, -0.02), recall: (0.86, -0.04) },
        RefRow { zeroed: &["ing", "diag"], loss: (0.19, 0.18), auroc: (0.98, 0.00), auprc: (0.79, -0.04), accuracy: (0.94, -0.02), precision: (0.52, -0.10), recall: (0.90, 0.00) },
        RefRow { zeroed: &["ing", "demo"], loss: (0.27, 0.26), auroc: (0.97, -0.01), auprc: (0.77, -0.06), accuracy: (0.92, -0.04), precision: (0.44, -0.18), recall: (0.89, -0.01) },
        RefRow { zeroed: &["diag", "demo"], loss: (0.17, 0.16), auroc: (0.97, -0.01), auprc: (0.80, -0.03), accuracy: (0.95, -0.01), precision: (0.60, -0.02), recall: (0.84, -0.06) },
    ];

    /// Published scatter correlations: (rho, printed p).
    pub const MIMIC_CORR_AUROC_AUPRC: (f64, &str) = (0.975, "<0.0001");
    pub const MIMIC_CORR_PRECISION_RECALL: (f64, &str) = (-0.425, "0.024");

    /// Published balancing-strategy results (AUROC, AUPRC, accuracy,
    /// precision, recall, MSE) in the order none / length / label / both.
    pub const MIMIC_BALANCING: [(&str, [f64; 6]); 4] = [
        ("none", [0.75, 0.19, 0.93, 0.00, 0.00, 0.02]),
        ("length_only", [0.96, 0.73, 0.96, 0.78, 0.55, 0.02]),
        ("label_only", [0.98, 0.80, 0.94, 0.53, 0.91, 0.02]),
        ("both", [0.98, 0.82, 0.95, 0.62, 0.87, 0.02]),
    ];

    /// Published observation-window sweep: (hours, AUROC, AUPRC, accuracy,
    /// precision, recall).
    pub const MIMIC_SWEEP: [(usize, [f64; 5]); 10] = [
        (4, [0.93, 0.67, 0.84, 0.42, 0.88]),
        (8, [0.95, 0.73, 0.90, 0.56, 0.87]),
        (12, [0.97, 0.77, 0.94, 0.68, 0.89]),
        (24, [0.97, 0.83, 0.95, 0.79, 0.80]),
        (36, [0.97, 0.82, 0.95, 0.76, 0.84]),
        (48, [0.98, 0.84, 0.95, 0.80, 0.79]),
        (60, [0.98, 0.83, 0.95, 0.75, 0.85]),
        (72, [0.97, 0.82, 0.95, 0.76, 0.85]),
        (84, [0.97, 0.82, 0.94, 0.72, 0.86]),
        (96, [0.97, 0.82, 0.94, 0.72, 0.86]),
    ];

    /// `reference_lomo.csv` / `reference_ltmo.csv` so report consumers can
    /// lay the published numbers next to a synthetic run.
    pub fn write_csv(dir: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write as _;
        std::fs::create_dir_all(dir)?;
        for (file, rows) in [
            ("reference_lomo.csv", &MIMIC_LOMO[..]),
            ("reference_ltmo.csv", &MIMIC_LTMO[..]),
        ] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(file))?);
            writeln!(
                f,
                "zeroed,loss,delta_loss,auroc,delta_auroc,auprc,delta_auprc,accuracy,delta_accuracy,precision,delta_precision,recall,delta_recall"
            )?;
            for row in std::iter::once(&MIMIC_BASELINE).chain(rows) {
                let name =
                    if row.zeroed.is_empty() { "baseline".into() } else { row.zeroed.join("+") };
                writeln!(
                    f,
                    "{name},{},{},{},{},{},{},{},{},{},{},{},{}",
                    row.loss.0, row.loss.1, row.auroc.0, row.auroc.1, row.auprc.0, row.auprc.1,
                    row.accuracy.0, row.accuracy.1, row.precision.0, row.precision.1,
                    row.recall.0, row.recall.1,
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CohortSchema, SeqData, SeqWidths};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn schema() -> CohortSchema {
        CohortSchema {
            seq_widths: SeqWidths { meds: 2, chart: 2, out: 1, proc: 1, date: 1, ing: 1 },
            demo_vocab: [2, 4, 3, 2, 2, 2],
            diag_vocab: 5,
            ..CohortSchema::default()
        }
    }

    fn stay(id: usize, label: u8, hours: usize) -> IcuStay {
        let sch = schema();
        let rows = |m: Modality| {
            (0..hours)
                .map(|t| {
                    (0..sch.seq_widths.get(m))
                        .map(|f| ((id * 37 + t * 11 + f * 5 + m as usize) as f64 * 0.43).sin())
                        .collect()
                })
                .collect()
        };
        IcuStay {
            stay_id: format!("s{id}"),
            label,
            demo: vec![(id % 2) as u32, (id % 4) as u32, (id % 3) as u32, 0, 1, 0],
            diag: vec![(id % 5) as u32],
            seq: SeqData {
                meds: rows(Modality::Meds),
                chart: rows(Modality::Chart),
                out: rows(Modality::Out),
                proc: rows(Modality::Proc),
                date: rows(Modality::Date),
                ing: rows(Modality::Ing),
            },
        }
    }

    fn cohort() -> Vec<IcuStay> {
        (0..24).map(|i| stay(i, u8::from(i % 3 == 0), 3 + i % 6)).collect()
    }

    /// Untrained model with live heads so knockouts actually move scores.
    fn model() -> Model {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, schema: schema(), ..ModelConfig::default() };
        let mut model = Model::new(cfg, 21).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let dist = Normal::new(0.0, 0.3).unwrap();
        for name in ["cls.w", "cls.b"] {
            for v in model.params.get_mut(name).data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        model
    }

    #[test]
    fn baseline_deltas_are_exactly_zero() {
        let report = run_ablation(&model(), &cohort()).unwrap();
        let base = &report.lomo.baseline;
        assert_eq!(base.delta.loss, 0.0);
        assert_eq!(base.delta.auroc, Some(0.0));
        assert_eq!(base.delta.auprc, Some(0.0));
        assert_eq!(base.delta.accuracy, 0.0);
        assert_eq!(base.delta.recall, Some(0.0));
    }

    #[test]
    fn ltmo_covers_all_pairs_symmetrically() {
        let report = run_ablation(&model(), &cohort()).unwrap();
        assert_eq!(report.ltmo.pairs.len(), 28);
        for (a, b, _) in &report.ltmo.pairs {
            assert!(a.all_index() < b.all_index());
        }
        for kind in TABLE_METRICS {
            let m = report.ltmo.matrix(kind);
            for i in 0..8 {
                assert!(m[i][i].is_none(), "diagonal must be masked");
                for j in 0..8 {
                    assert_eq!(m[i][j], m[j][i]);
                }
            }
        }
    }

    #[test]
    fn deltas_recompute_from_raw_values() {
        let report = run_ablation(&model(), &cohort()).unwrap();
        let base = &report.lomo.baseline;
        for (_, cell) in &report.lomo.rows {
            for kind in TABLE_METRICS {
                if let (Some(d), Some(v), Some(b)) =
                    (cell.delta_of(kind), cell.value(kind), base.value(kind))
                {
                    assert_eq!(d, v - b);
                }
            }
        }
    }

    #[test]
    fn lomo_singleton_shares_the_ltmo_code_path() {
        let m = model();
        let stays = cohort();
        let lomo = run_lomo(&m, &stays).unwrap();
        for (modality, cell) in &lomo.rows {
            let (metrics, loss) = eval_config(&m, &stays, &ZeroSet::from([*modality])).unwrap();
            assert_eq!(cell.metrics.auroc, metrics.auroc);
            assert_eq!(cell.metrics.accuracy, metrics.accuracy);
            assert_eq!(cell.loss, loss);
        }
    }

    #[test]
    fn knockout_scores_match_forward_evaluation() {
        // The loss-graph score extraction must agree bit-for-bit with the
        // plain forward pass used everywhere else.
        let m = model();
        let stays = cohort();
        let zero = ZeroSet::from([Modality::Proc]);
        let (from_loss_graph, _) = eval_config(&m, &stays, &zero).unwrap();
        let (scores, from_forward) = evaluate_cohort(&m, &stays, &zero).unwrap();
        assert_eq!(scores.len(), stays.len());
        assert_eq!(from_loss_graph.auroc, from_forward.auroc);
        assert_eq!(from_loss_graph.accuracy, from_forward.accuracy);
        assert_eq!(from_loss_graph.f1, from_forward.f1);
    }

    #[test]
    fn harness_is_deterministic() {
        let m = model();
        let stays = cohort();
        let a = serde_json::to_string(&run_ablation(&m, &stays).unwrap()).unwrap();
        let b = serde_json::to_string(&run_ablation(&m, &stays).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_cohort_is_rejected() {
        let stays: Vec<IcuStay> = (0..6).map(|i| stay(i, 0, 4)).collect();
        assert!(matches!(run_ablation(&model(), &stays), Err(AblationError::SingleClass)));
        assert!(matches!(run_lomo(&model(), &stays), Err(AblationError::SingleClass)));
    }

    #[test]
    fn scatter_correlations_match_pearson_on_extracted_columns() {
        let report = run_ablation(&model(), &cohort()).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for p in report.scatter.points.iter().filter(|p| !p.baseline) {
            if let (Some(a), Some(b)) = (p.auroc, p.auprc) {
                xs.push(a);
                ys.push(b);
            }
        }
        let expect = pearson(&xs, &ys);
        let got = &report.scatter.correlations[0];
        assert_eq!(got.rho, expect.map(|(r, _)| r));
        assert_eq!(got.p, expect.map(|(_, p)| p));
        assert_eq!(got.n, xs.len());
        assert_eq!(report.scatter.points.len(), 29);
        assert!(report.scatter.points[0].baseline);
    }

    #[test]
    fn degenerate_scatter_flags_undefined_correlation() {
        let m = model();
        let stays = cohort();
        let mut report = run_ltmo(&m, &stays).unwrap();
        // Force all pair metrics identical: zero variance on both axes.
        let template = report.pairs[0].2.clone();
        for (_, _, cell) in report.pairs.iter_mut() {
            *cell = template.clone();
        }
        let scatter = metric_scatter(&report);
        assert_eq!(scatter.correlations[0].rho, None);
        assert_eq!(scatter.correlations[0].p, None);
    }

    #[test]
    fn sweep_validates_grid_and_converges_to_full_length() {
        let m = model();
        let stays = cohort(); // lengths 3..=8
        assert!(matches!(
            test_length_sweep(&m, &stays, &[]),
            Err(AblationError::BadGrid(_))
        ));
        assert!(matches!(
            test_length_sweep(&m, &stays, &[4, 2]),
            Err(AblationError::BadGrid(_))
        ));
        let sweep = test_length_sweep(&m, &stays, &[4, 96, 240]).unwrap();
        assert_eq!(sweep.rows.len(), 3);
        // Both windows exceed every stay, so they equal the untruncated run.
        let (_, full) = evaluate_cohort(&m, &stays, &ZeroSet::new()).unwrap();
        for row in &sweep.rows[1..] {
            assert_eq!(row.metrics.auroc, full.auroc);
            assert_eq!(row.metrics.accuracy, full.accuracy);
        }
    }

    #[test]
    fn artifact_files_are_written() {
        let report = run_ablation(&model(), &cohort()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write_outputs(dir.path()).unwrap();
        let lomo = std::fs::read_to_string(dir.path().join("lomo.csv")).unwrap();
        assert_eq!(lomo.lines().count(), 10); // header + baseline + 8
        assert!(lomo.starts_with("zeroed,loss,delta_loss,auroc"));
        for kind in TABLE_METRICS {
            let text = std::fs::read_to_string(
                dir.path().join(format!("ltmo_{}.csv", kind.name())),
            )
            .unwrap();
            assert_eq!(text.lines().count(), 9);
            // Diagonal NA: row i has NA at column i+1.
            for (i, line) in text.lines().skip(1).enumerate() {
                assert_eq!(line.split(',').nth(i + 1), Some("NA"));
            }
        }
        let scatter = std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
        assert_eq!(scatter.lines().count(), 1 + 29 + 2);
        for kind in RENDERED_METRICS {
            let svg = std::fs::read_to_string(
                dir.path().join(format!("heatmap_{}.svg", kind.name())),
            )
            .unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.matches("<rect").count() >= 64);
        }
        assert!(!dir.path().join("heatmap_loss.svg").exists(), "loss has no panel");
        let svg = std::fs::read_to_string(dir.path().join("scatter.svg")).unwrap();
        assert!(svg.matches("<circle").count() >= 28);
    }

    #[test]
    fn diverging_ramp_endpoints() {
        assert_eq!(diverging_color(0.0), "#ffffff");
        assert_eq!(diverging_color(-1.0), "#2166ac");
        assert_eq!(diverging_color(1.0), "#b2182b");
    }

    #[test]
    fn reference_tables_match_published_anchors() {
        use reference::*;
        // Singletons: procedures dominate sensitivity.
        let proc = MIMIC_LOMO.iter().find(|r| r.zeroed == ["proc"]).unwrap();
        assert_eq!(proc.auprc.1, -0.19);
        assert_eq!(proc.recall.1, -0.30);
        // Worst pair: medications + procedures.
        let worst = MIMIC_LTMO.iter().find(|r| r.zeroed == ["meds", "proc"]).unwrap();
        assert_eq!(worst.auprc.1, -0.34);
        assert_eq!(worst.recall.1, -0.58);
        // Second most critical pair.
        let second = MIMIC_LTMO.iter().find(|r| r.zeroed == ["out", "proc"]).unwrap();
        assert_eq!(second.auprc.1, -0.29);
        assert_eq!(MIMIC_CORR_AUROC_AUPRC.0, 0.975);
        assert_eq!(MIMIC_CORR_PRECISION_RECALL.0, -0.425);
        assert_eq!(MIMIC_LTMO.len(), 28);
        assert_eq!(MIMIC_SWEEP[0].0, 4);
        assert_eq!(MIMIC_SWEEP[5], (48, [0.98, 0.84, 0.95, 0.80, 0.79]));
        assert_eq!(MIMIC_BALANCING[0].1[4], 0.00); // no balancing: zero recall
        assert_eq!(MIMIC_BALANCING[3].1[1], 0.82);
    }

    #[test]
    fn reference_deltas_are_consistent_with_baseline() {
        use reference::*;
        // Published (value, delta) pairs are rounded to 2 decimals; the
        // recomputed delta must agree within half an ulp of that rounding.
        for row in MIMIC_LOMO.iter().chain(MIMIC_LTMO.iter()) {
            for (got, base) in [
                (row.loss, MIMIC_BASELINE.loss),
                (row.auroc, MIMIC_BASELINE.auroc),
                (row.auprc, MIMIC_BASELINE.auprc),
                (row.accuracy, MIMIC_BASELINE.accuracy),
                (row.precision, MIMIC_BASELINE.precision),
                (row.recall, MIMIC_BASELINE.recall),
            ] {
                let recomputed = got.0 - base.0;
                assert!(
                    (recomputed - got.1).abs() < 0.0051,
                    "{:?}: value {} baseline {} delta {}",
                    row.zeroed,
                    got.0,
                    base.0,
                    got.1
                );
            }
        }
    }

    #[test]
    fn reference_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        reference::write_csv(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("reference_ltmo.csv")).unwrap();
        assert_eq!(text.lines().count(), 30);
        assert!(text.contains("meds+proc,0.19,0.18,0.91,-0.07,0.49,-0.34"));
    }
}

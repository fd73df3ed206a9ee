//! Detection metrics (ROC/PR curves, Youden threshold, class statistics),
//! per-uncertainty-type ROC, the ablation grid, and CSV emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::anomaly::{mc_infer_batch, mean_squared_error, score};
use crate::data::{record_rng, Label, SliceRecord, Splits};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::LayerParams;
use crate::tensor::Float;
use crate::trainer::{fit, TrainConfig};

/// Per-slice detection output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    /// Ranking statistic used for detection.
    pub score: f64,
    /// Mean squared reconstruction error.
    pub raw_mse: f64,
    /// Mean of the uncertainty-weighted pixel map.
    pub weighted: f64,
    pub epistemic_mean: f64,
    pub aleatoric_mean: f64,
    pub total_mean: f64,
}

impl ScoredSample {
    pub fn is_abnormal(&self) -> bool {
        self.label == Label::Abnormal
    }
}

/// One threshold of a sweep; a sample is flagged when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    PrecisionRecall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveReport {
    pub kind: CurveKind,
    /// Unique thresholds in descending order.
    pub points: Vec<CurvePoint>,
    pub positives: usize,
    pub negatives: usize,
    pub auc: f64,
    pub optimal_threshold: Option<f64>,
    pub f1_at_optimal: Option<f64>,
}

impl CurveReport {
    pub fn tpr(&self, p: &CurvePoint) -> f64 {
        p.true_positives as f64 / self.positives as f64
    }

    pub fn fpr(&self, p: &CurvePoint) -> f64 {
        p.false_positives as f64 / self.negatives as f64
    }

    pub fn precision(&self, p: &CurvePoint) -> f64 {
        p.true_positives as f64 / (p.true_positives + p.false_positives) as f64
    }

    pub fn recall(&self, p: &CurvePoint) -> f64 {
        self.tpr(p)
    }

    fn f1(&self, p: &CurvePoint) -> f64 {
        let tp = p.true_positives as f64;
        let fn_ = (self.positives - p.true_positives) as f64;
        2.0 * tp / (2.0 * tp + p.false_positives as f64 + fn_)
    }
}

fn check_scores(scores: &[f64], positives: &[bool]) -> Result<()> {
    if scores.len() != positives.len() {
        return Err(Error::dim("curve", &[scores.len()], &[positives.len()]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Cumulative `(threshold, tp, fp)` at each unique score, descending.
fn sweep(scores: &[f64], positives: &[bool]) -> Vec<CurvePoint> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points: Vec<CurvePoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (n, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(n + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            points.push(CurvePoint {
                threshold: scores[i],
                true_positives: tp,
                false_positives: fp,
            });
        }
    }
    points
}

/// Mann-Whitney statistic from tie-averaged ranks: the share of
/// (abnormal, normal) pairs ranked correctly, ties counting one half.
fn mann_whitney(scores: &[f64], positives: &[bool], n_pos: usize, n_neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end+1, so twice the midrank is start + end + 2
        let twice_mid = (start + end + 2) as u64;
        for &i in &order[start..=end] {
            if positives[i] {
                twice_rank_sum += twice_mid;
            }
        }
        start = end + 1;
    }
    let p = n_pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    (twice_u as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// ROC curve, its AUC, and the Youden operating point.
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<CurveReport> {
    check_scores(scores, positives)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("ROC needs both normal and abnormal samples".into()));
    }
    let mut report = CurveReport {
        kind: CurveKind::Roc,
        points: sweep(scores, positives),
        positives: n_pos,
        negatives: n_neg,
        auc: mann_whitney(scores, positives, n_pos, n_neg),
        optimal_threshold: None,
        f1_at_optimal: None,
    };
    let (t, f1) = youden_threshold(&report)?;
    report.optimal_threshold = Some(t);
    report.f1_at_optimal = Some(f1);
    Ok(report)
}

pub fn roc_auc(samples: &[ScoredSample]) -> Result<CurveReport> {
    let (scores, positives) = unzip(samples, |s| s.score);
    roc_curve(&scores, &positives)
}

/// Average precision: `sum_n (R_n - R_{n-1}) P_n` over descending unique
/// thresholds.
pub fn pr_curve(scores: &[f64], positives: &[bool]) -> Result<CurveReport> {
    check_scores(scores, positives)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Data("PR needs at least one abnormal sample".into()));
    }
    let mut report = CurveReport {
        kind: CurveKind::PrecisionRecall,
        points: sweep(scores, positives),
        positives: n_pos,
        negatives: positives.len() - n_pos,
        auc: 0.0,
        optimal_threshold: None,
        f1_at_optimal: None,
    };
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in &report.points {
        let recall = report.recall(p);
        ap += (recall - prev_recall) * report.precision(p);
        prev_recall = recall;
    }
    report.auc = ap;
    Ok(report)
}

pub fn pr_auc(samples: &[ScoredSample]) -> Result<CurveReport> {
    let (scores, positives) = unzip(samples, |s| s.score);
    pr_curve(&scores, &positives)
}

/// Threshold maximizing `TPR - FPR`, ties going to the lower threshold. The
/// returned value is the midpoint of the gap below the winning score, so it
/// separates the flagged samples from the rest; F1 is evaluated there.
pub fn youden_threshold(roc: &CurveReport) -> Result<(f64, f64)> {
    if roc.kind != CurveKind::Roc || roc.points.is_empty() || roc.positives == 0 || roc.negatives == 0 {
        return Err(Error::Config("youden_threshold needs a non-empty ROC curve".into()));
    }
    let mut best = 0;
    let mut best_j = i128::MIN;
    for (i, p) in roc.points.iter().enumerate() {
        // J scaled by positives * negatives, exact so ties are real ties
        let j = p.true_positives as i128 * roc.negatives as i128 - p.false_positives as i128 * roc.positives as i128;
        // points descend, so `>=` keeps moving toward lower thresholds
        if j >= best_j {
            best_j = j;
            best = i;
        }
    }
    let point = &roc.points[best];
    let threshold = match roc.points.get(best + 1) {
        Some(below) => 0.5 * (point.threshold + below.threshold),
        None => point.threshold,
    };
    Ok((threshold, roc.f1(point)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreStatistics {
    pub mean_normal: f64,
    pub mean_abnormal: f64,
    pub difference: f64,
}

pub fn score_statistics(samples: &[ScoredSample]) -> Result<ScoreStatistics> {
    let mean = |label: Label| {
        let v: Vec<f64> = samples.iter().filter(|s| s.label == label).map(|s| s.score).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    match (mean(Label::Normal), mean(Label::Abnormal)) {
        (Some(n), Some(a)) => Ok(ScoreStatistics {
            mean_normal: n,
            mean_abnormal: a,
            difference: a - n,
        }),
        _ => Err(Error::Data("score statistics need both classes".into())),
    }
}

pub const UNCERTAINTY_TYPES: [&str; 4] = ["total", "aleatoric", "epistemic", "combined"];

/// ROC of each uncertainty summary used on its own as the ranking statistic,
/// plus the combined score.
pub fn uncertainty_type_roc(samples: &[ScoredSample]) -> Result<BTreeMap<&'static str, CurveReport>> {
    let pick: [fn(&ScoredSample) -> f64; 4] = [|s| s.total_mean, |s| s.aleatoric_mean, |s| s.epistemic_mean, |s| s.score];
    let mut out = BTreeMap::new();
    for (name, f) in UNCERTAINTY_TYPES.into_iter().zip(pick) {
        let (scores, positives) = unzip(samples, f);
        out.insert(name, roc_curve(&scores, &positives)?);
    }
    Ok(out)
}

fn unzip(samples: &[ScoredSample], f: impl Fn(&ScoredSample) -> f64) -> (Vec<f64>, Vec<bool>) {
    samples.iter().map(|s| (f(s), s.is_abnormal())).unzip()
}

// ------------------------------------------------------------ scoring

/// Inference settings shared by every scored slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreConfig {
    /// Monte-Carlo samples `K`.
    pub samples: usize,
    /// Weight of the raw error in the combined score.
    pub alpha: f64,
    /// Base seed; each slice derives its own stream from its id.
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            samples: 5,
            alpha: 0.5,
            seed: 0,
            batch_size: 32,
        }
    }
}

/// Scores every record. Deterministic models rank by raw MSE.
pub fn score_records<T: Float>(
    model: &Model,
    params: &LayerParams<T>,
    records: &[SliceRecord],
    config: &ScoreConfig,
) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(config.batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|r| &r.image).collect();
        let mut rngs: Vec<_> = chunk.iter().map(|r| record_rng(config.seed, &r.id)).collect();
        let decomps = mc_infer_batch(model, params, &images, config.samples, &mut rngs)?;
        for (r, u) in chunk.iter().zip(&decomps) {
            let raw_mse = mean_squared_error(&r.image, u)?;
            let result = score(&r.image, u, config.alpha)?;
            let ranking = if model.config().kind == ModelKind::Deterministic {
                raw_mse
            } else {
                result.score
            };
            let sample = ScoredSample {
                id: r.id.clone(),
                label: r.label,
                score: ranking,
                raw_mse,
                weighted: result.pixel_map.mean(),
                epistemic_mean: u.epistemic.mean(),
                aleatoric_mean: u.aleatoric.mean(),
                total_mean: u.total.mean(),
            };
            if !sample.score.is_finite() {
                return Err(Error::Data(format!("non-finite score for {}", sample.id)));
            }
            out.push(sample);
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    Full,
    NoAttention,
    /// Decoder log-variance frozen at zero.
    NoAleatoric,
    /// Single latent sample at inference.
    NoEpistemic,
    /// Plain autoencoder trained on MSE and ranked by raw MSE.
    Deterministic,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoAttention,
        Ablation::NoAleatoric,
        Ablation::NoEpistemic,
        Ablation::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no_attention",
            Ablation::NoAleatoric => "no_aleatoric",
            Ablation::NoEpistemic => "no_epistemic",
            Ablation::Deterministic => "deterministic",
        }
    }

    pub fn parse(name: &str) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation config {name:?}")))
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full | Ablation::NoEpistemic => {}
            Ablation::NoAttention => c.attention = false,
            Ablation::NoAleatoric => c.kind = ModelKind::FixedVariance,
            Ablation::Deterministic => c.kind = ModelKind::Deterministic,
        }
        c
    }

    pub fn score_config(self, base: &ScoreConfig) -> ScoreConfig {
        match self {
            Ablation::NoEpistemic | Ablation::Deterministic => ScoreConfig { samples: 1, ..*base },
            _ => *base,
        }
    }
}

/// Comma-separated list of ablation names.
pub fn parse_grid(list: &str) -> Result<Vec<Ablation>> {
    let grid: Vec<Ablation> = list.split(',').filter(|s| !s.trim().is_empty()).map(Ablation::parse).collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: Ablation,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub stats: ScoreStatistics,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

/// Trains and evaluates each grid entry from the same seed. Entries that
/// share a model configuration share one training run.
pub fn ablation_run<T: Float>(
    splits: &Splits,
    grid: &[Ablation],
    settings: &AblationSettings,
) -> Result<Vec<AblationRow>> {
    ablation_run_with::<T>(splits, grid, settings, Vec::new(), |_, _| {})
}

/// As [`ablation_run`], starting from already trained `(config, params,
/// epochs)` entries and calling `on_trained` after each new training run.
pub fn ablation_run_with<T: Float>(
    splits: &Splits,
    grid: &[Ablation],
    settings: &AblationSettings,
    pretrained: Vec<(ModelConfig, LayerParams<T>, usize)>,
    mut on_trained: impl FnMut(&ModelConfig, usize),
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut trained = pretrained;
    let mut rows = Vec::with_capacity(grid.len());
    for &config in grid {
        let mc = config.model_config(&settings.model);
        let idx = match trained.iter().position(|(c, _, _)| *c == mc) {
            Some(i) => i,
            None => {
                let model = Model::new(mc.clone())?;
                let init = model.init_params::<T>(settings.train.seed)?;
                let out = fit(&model, init, &splits.train, &splits.val, &settings.train)?;
                on_trained(&mc, out.logs.len());
                trained.push((mc.clone(), out.best.params, out.logs.len()));
                trained.len() - 1
            }
        };
        let (_, params, epochs) = &trained[idx];
        let model = Model::new(mc)?;
        let samples = score_records(&model, params, &splits.test, &config.score_config(&settings.score))?;
        rows.push(AblationRow {
            config,
            roc_auc: roc_auc(&samples)?.auc,
            pr_auc: pr_auc(&samples)?.auc,
            stats: score_statistics(&samples)?,
            epochs: *epochs,
        });
    }
    Ok(rows)
}

// ----------------------------------------------------------------- CSV

pub const METRICS_CSV_HEADER: &str = "id,label,score,raw_mse,weighted,epistemic_mean,aleatoric_mean,total_mean";

pub fn metrics_csv(samples: &[ScoredSample]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.id,
            s.label.as_str(),
            s.score,
            s.raw_mse,
            s.weighted,
            s.epistemic_mean,
            s.aleatoric_mean,
            s.total_mean
        );
    }
    out
}

/// `threshold,fpr,tpr` for ROC or `threshold,recall,precision` for PR,
/// starting from the empty prediction.
pub fn curve_csv(report: &CurveReport) -> String {
    let mut out = match report.kind {
        CurveKind::Roc => String::from("threshold,fpr,tpr\ninf,0,0\n"),
        CurveKind::PrecisionRecall => String::from("threshold,recall,precision\ninf,0,1\n"),
    };
    for p in &report.points {
        let (x, y) = match report.kind {
            CurveKind::Roc => (report.fpr(p), report.tpr(p)),
            CurveKind::PrecisionRecall => (report.recall(p), report.precision(p)),
        };
        let _ = writeln!(out, "{},{x},{y}", p.threshold);
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,roc_auc,pr_auc,mean_normal,mean_abnormal,epochs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.config.name(),
            r.roc_auc,
            r.pr_auc,
            r.stats.mean_normal,
            r.stats.mean_abnormal,
            r.epochs
        );
    }
    out
}

pub fn uncertainty_roc_csv(reports: &BTreeMap<&'static str, CurveReport>) -> String {
    let mut out = String::from("type,roc_auc\n");
    for name in UNCERTAINTY_TYPES {
        if let Some(r) = reports.get(name) {
            let _ = writeln!(out, "{name},{}", r.auc);
        }
    }
    out
}

/// Headline numbers of one evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<ScoredSample>,
    pub roc: CurveReport,
    pub pr: CurveReport,
    pub stats: ScoreStatistics,
    pub by_type: BTreeMap<&'static str, CurveReport>,
}

pub fn evaluate(samples: Vec<ScoredSample>) -> Result<EvalReport> {
    Ok(EvalReport {
        roc: roc_auc(&samples)?,
        pr: pr_auc(&samples)?,
        stats: score_statistics(&samples)?,
        by_type: uncertainty_type_roc(&samples)?,
        samples,
    })
}

/// Writes `metrics.csv`, `roc.csv`, `pr.csv` and `uncertainty_roc.csv`.
pub fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&report.samples))?;
    fs::write(dir.join("roc.csv"), curve_csv(&report.roc))?;
    fs::write(dir.join("pr.csv"), curve_csv(&report.pr))?;
    fs::write(dir.join("uncertainty_roc.csv"), uncertainty_roc_csv(&report.by_type))?;
    Ok(())
}

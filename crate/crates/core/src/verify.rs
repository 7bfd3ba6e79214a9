//! Ensemble and deterministic verification: CRPS, spread-skill ratio,
//! latitude-weighted RMSE, anomaly correlation, Brier skill score for
//! percentile exceedance, and relative-improvement scorecards.
//!
//! Spatial reductions go through [`SpatialWeights`], so masked cells (zero
//! weight) never influence a score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};
use crate::grid::{calendar_slot, Channel, FieldSet, GridSpec, SpatialWeights, CALENDAR_SLOTS};
use crate::stats::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrpsEstimator {
    /// `(1/M) sum|x_i - y| - 1/(2M^2) sum|x_i - x_j|`
    #[default]
    Standard,
    /// Pairwise term scaled by `1/(2M(M-1))`; requires `M >= 2`.
    Fair,
}

/// Empirical CRPS of one ensemble against one observation, `O(M log M)`.
pub fn crps(ensemble: &[f64], obs: f64) -> Result<f64> {
    crps_with(ensemble, obs, CrpsEstimator::Standard)
}

pub fn crps_with(ensemble: &[f64], obs: f64, estimator: CrpsEstimator) -> Result<f64> {
    let m = ensemble.len();
    if m == 0 {
        return Err(S2skError::invalid("CRPS of an empty ensemble"));
    }
    if estimator == CrpsEstimator::Fair && m < 2 {
        return Err(S2skError::invalid("fair CRPS needs at least two members"));
    }
    let mut x = ensemble.to_vec();
    x.sort_by(f64::total_cmp);
    let mf = m as f64;
    let abs_err = x.iter().map(|v| (v - obs).abs()).sum::<f64>() / mf;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - M + 1) x_(i) for ascending x.
    let pair: f64 = 2.0
        * x.iter()
            .enumerate()
            .map(|(i, v)| (2.0 * i as f64 - mf + 1.0) * v)
            .sum::<f64>();
    let denom = match estimator {
        CrpsEstimator::Standard => 2.0 * mf * mf,
        CrpsEstimator::Fair => 2.0 * mf * (mf - 1.0),
    };
    Ok(abs_err - pair / denom)
}

fn check_series(ensembles: &[ArrayView3<f64>], truths: &[ArrayView2<f64>], weights: &SpatialWeights) -> Result<usize> {
    if ensembles.is_empty() || ensembles.len() != truths.len() {
        return Err(S2skError::shape(format!(
            "{} ensemble fields vs {} truth fields",
            ensembles.len(),
            truths.len()
        )));
    }
    let m = ensembles[0].dim().0;
    for (e, t) in ensembles.iter().zip(truths) {
        let (em, h, w) = e.dim();
        if em != m || (h, w) != t.dim() || (h, w) != weights.cells().dim() {
            return Err(S2skError::shape("ensemble, truth and weight grids must align"));
        }
    }
    if m == 0 {
        return Err(S2skError::invalid("ensemble has no members"));
    }
    Ok(m)
}

/// Weighted spatial mean of pointwise CRPS for one field. `ensemble` is `[M, H, W]`.
pub fn crps_field(
    ensemble: ArrayView3<f64>,
    truth: ArrayView2<f64>,
    weights: &SpatialWeights,
    estimator: CrpsEstimator,
) -> Result<f64> {
    check_series(&[ensemble], &[truth], weights)?;
    let mut err = None;
    let mut buf = Vec::with_capacity(ensemble.dim().0);
    let v = weights.reduce(|h, w| {
        buf.clear();
        buf.extend(ensemble.slice(ndarray::s![.., h, w]).iter().copied());
        match crps_with(&buf, truth[[h, w]], estimator) {
            Ok(c) => c,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        }
    });
    err.map_or(Ok(v), Err)
}

/// Spread-skill ratio over a series of ensemble fields `[M, H, W]`.
///
/// Numerator: square root of the weighted mean unbiased ensemble variance,
/// scaled by `(M+1)/M` when `inflate`. Denominator: weighted RMSE of the
/// ensemble mean.
pub fn ssr(ensembles: &[ArrayView3<f64>], truths: &[ArrayView2<f64>], weights: &SpatialWeights, inflate: bool) -> Result<f64> {
    let m = check_series(ensembles, truths, weights)?;
    if m < 2 {
        return Err(S2skError::invalid("spread-skill ratio needs at least two members"));
    }
    let mf = m as f64;
    let (mut var_sum, mut se_sum) = (0.0, 0.0);
    for (e, t) in ensembles.iter().zip(truths) {
        let mean = e.mean_axis(Axis(0)).expect("non-empty");
        let var = e.var_axis(Axis(0), 1.0);
        var_sum += weights.mean(var.view());
        se_sum += weights.reduce(|h, w| (mean[[h, w]] - t[[h, w]]).powi(2));
    }
    let n = ensembles.len() as f64;
    let factor = if inflate { (mf + 1.0) / mf } else { 1.0 };
    let spread = (factor * var_sum / n).sqrt();
    let rmse = (se_sum / n).sqrt();
    if rmse == 0.0 {
        return Err(S2skError::Undefined("ensemble-mean RMSE is zero".into()));
    }
    Ok(spread / rmse)
}

/// `sqrt(mean over times of the weighted mean squared error)`.
pub fn wrmse(forecasts: &[ArrayView2<f64>], truths: &[ArrayView2<f64>], weights: &SpatialWeights) -> Result<f64> {
    if forecasts.is_empty() || forecasts.len() != truths.len() {
        return Err(S2skError::shape("forecast and truth series lengths differ"));
    }
    let mut total = 0.0;
    for (f, t) in forecasts.iter().zip(truths) {
        if f.dim() != t.dim() || f.dim() != weights.cells().dim() {
            return Err(S2skError::shape("forecast, truth and weight grids must align"));
        }
        total += weights.reduce(|h, w| (f[[h, w]] - t[[h, w]]).powi(2));
    }
    Ok((total / forecasts.len() as f64).sqrt())
}

/// Weighted, centered spatial correlation of anomaly fields, averaged over times.
pub fn acc(forecast_anoms: &[ArrayView2<f64>], truth_anoms: &[ArrayView2<f64>], weights: &SpatialWeights) -> Result<f64> {
    if forecast_anoms.is_empty() || forecast_anoms.len() != truth_anoms.len() {
        return Err(S2skError::shape("forecast and truth series lengths differ"));
    }
    let mut sum = 0.0;
    for (i, (f, t)) in forecast_anoms.iter().zip(truth_anoms).enumerate() {
        if f.dim() != t.dim() || f.dim() != weights.cells().dim() {
            return Err(S2skError::shape("forecast, truth and weight grids must align"));
        }
        let fm = weights.mean(*f);
        let tm = weights.mean(*t);
        let cov = weights.reduce(|h, w| (f[[h, w]] - fm) * (t[[h, w]] - tm));
        let vf = weights.reduce(|h, w| (f[[h, w]] - fm).powi(2));
        let vt = weights.reduce(|h, w| (t[[h, w]] - tm).powi(2));
        if vf <= 0.0 || vt <= 0.0 {
            return Err(S2skError::Undefined(format!("zero-variance anomaly field at time index {i}")));
        }
        sum += (cov / (vf * vt).sqrt()).clamp(-1.0, 1.0);
    }
    Ok(sum / forecast_anoms.len() as f64)
}

/// Per calendar slot, per grid point percentile thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdField {
    pub percentile: f64,
    /// Calendar slots present, ascending.
    pub slots: Vec<usize>,
    /// `[slots, C, H, W]`; NaN at masked cells.
    pub values: ndarray::Array4<f64>,
    /// Pool size per slot (same for every point).
    pub pool_sizes: Vec<usize>,
    /// Slots whose pool is smaller than `ceil(1 / (1 - p/100))`.
    pub low_confidence: Vec<usize>,
    pub window_halfwidth_days: usize,
}

pub const QUANTILE_RULE: &str = "linear interpolation at rank (n-1)*p/100";

impl ThresholdField {
    pub fn for_slot(&self, slot: usize) -> Result<ArrayView3<'_, f64>> {
        let i = self
            .slots
            .binary_search(&slot)
            .map_err(|_| S2skError::MissingCalendarDay(slot))?;
        Ok(self.values.index_axis(Axis(0), i))
    }

    pub fn for_date(&self, date: chrono::NaiveDate) -> Result<ArrayView3<'_, f64>> {
        self.for_slot(calendar_slot(date))
    }

    pub fn min_pool(p: f64) -> usize {
        (1.0 / (1.0 - p / 100.0) - 1e-9).ceil() as usize
    }
}

fn circular_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(CALENDAR_SLOTS - d)
}

/// Thresholds at percentile `p` from the samples whose calendar slot lies
/// within `halfwidth` days of each requested slot (all slots when `None`).
pub fn percentile_thresholds(samples: &[FieldSet], p: f64, halfwidth: usize, slots: Option<&[usize]>) -> Result<ThresholdField> {
    let first = samples
        .first()
        .ok_or_else(|| S2skError::invalid("no samples for thresholds"))?;
    if !(0.0..100.0).contains(&p) {
        return Err(S2skError::invalid(format!("percentile {p} outside [0, 100)")));
    }
    if samples.iter().any(|s| !s.same_layout(first)) {
        return Err(S2skError::shape("threshold samples differ in layout"));
    }
    let mut wanted: Vec<usize> = match slots {
        Some(s) => s.to_vec(),
        None => (0..CALENDAR_SLOTS).collect(),
    };
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.iter().any(|&s| s >= CALENDAR_SLOTS) {
        return Err(S2skError::invalid("calendar slot out of range"));
    }
    let sample_slots: Vec<usize> = samples.iter().map(|s| calendar_slot(s.valid_time)).collect();
    let (c, h, w) = first.values.dim();
    let mut values = ndarray::Array4::from_elem((wanted.len(), c, h, w), f64::NAN);
    let mut pool_sizes = Vec::with_capacity(wanted.len());
    let mut low_confidence = Vec::new();
    let mut buf = Vec::new();
    for (si, &slot) in wanted.iter().enumerate() {
        let pool: Vec<&FieldSet> = samples
            .iter()
            .zip(&sample_slots)
            .filter(|(_, &s)| circular_distance(s, slot) <= halfwidth)
            .map(|(x, _)| x)
            .collect();
        if pool.is_empty() {
            return Err(S2skError::EmptyWindow { slot });
        }
        pool_sizes.push(pool.len());
        if pool.len() < ThresholdField::min_pool(p) {
            low_confidence.push(slot);
        }
        for ch in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    if !first.channels[ch].is_valid(hh, ww) {
                        continue;
                    }
                    buf.clear();
                    buf.extend(pool.iter().map(|x| x.values[[ch, hh, ww]]));
                    buf.sort_by(f64::total_cmp);
                    values[[si, ch, hh, ww]] = quantile_sorted(&buf, p)?;
                }
            }
        }
    }
    Ok(ThresholdField {
        percentile: p,
        slots: wanted,
        values,
        pool_sizes,
        low_confidence,
        window_halfwidth_days: halfwidth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssResult {
    pub bss: f64,
    /// Points dropped because the reference Brier score was zero.
    pub excluded_points: usize,
}

/// Brier skill score from exceedance probabilities against a constant
/// reference probability. Inputs are per time `[H, W]`.
pub fn bss_from_probabilities(
    probs: &[ArrayView2<f64>],
    occurred: &[ArrayView2<bool>],
    base_rate: f64,
    weights: &SpatialWeights,
) -> Result<BssResult> {
    if probs.is_empty() || probs.len() != occurred.len() {
        return Err(S2skError::shape("probability and occurrence series lengths differ"));
    }
    if !(0.0..=1.0).contains(&base_rate) {
        return Err(S2skError::invalid(format!("base rate {base_rate} outside [0, 1]")));
    }
    let dim = weights.cells().dim();
    if probs.iter().zip(occurred).any(|(p, o)| p.dim() != dim || o.dim() != dim) {
        return Err(S2skError::shape("probability, occurrence and weight grids must align"));
    }
    let n = probs.len() as f64;
    let mut bs = Array2::<f64>::zeros(dim);
    let mut bs_ref = Array2::<f64>::zeros(dim);
    for (p, o) in probs.iter().zip(occurred) {
        for ((hw, b), r) in bs.indexed_iter_mut().zip(bs_ref.iter_mut()) {
            let obs = if o[hw] { 1.0 } else { 0.0 };
            *b += (p[hw] - obs).powi(2) / n;
            *r += (base_rate - obs).powi(2) / n;
        }
    }
    let (mut num, mut den, mut excluded) = (0.0, 0.0, 0usize);
    for (&c, (&b, &r)) in weights.cells().iter().zip(bs.iter().zip(bs_ref.iter())) {
        if c <= 0.0 {
            continue;
        }
        if r == 0.0 {
            excluded += 1;
            continue;
        }
        num += c * (1.0 - b / r);
        den += c;
    }
    if den == 0.0 {
        return Err(S2skError::Undefined("reference Brier score is zero everywhere".into()));
    }
    Ok(BssResult {
        bss: num / den,
        excluded_points: excluded,
    })
}

/// Brier skill score of ensemble exceedance fractions. `ensembles[t]` is
/// `[M, H, W]`, `thresholds[t]` the threshold field valid at time `t`.
pub fn bss(
    ensembles: &[ArrayView3<f64>],
    truths: &[ArrayView2<f64>],
    thresholds: &[ArrayView2<f64>],
    percentile: f64,
    weights: &SpatialWeights,
) -> Result<BssResult> {
    let m = check_series(ensembles, truths, weights)?;
    if thresholds.len() != truths.len() {
        return Err(S2skError::shape("one threshold field per time is required"));
    }
    let mut probs = Vec::with_capacity(truths.len());
    let mut occ = Vec::with_capacity(truths.len());
    for ((e, t), q) in ensembles.iter().zip(truths).zip(thresholds) {
        if q.dim() != t.dim() {
            return Err(S2skError::shape("threshold grid mismatch"));
        }
        let p = Array2::from_shape_fn(t.dim(), |(h, w)| {
            e.slice(ndarray::s![.., h, w]).iter().filter(|&&x| x > q[[h, w]]).count() as f64 / m as f64
        });
        probs.push(p);
        occ.push(Array2::from_shape_fn(t.dim(), |(h, w)| t[[h, w]] > q[[h, w]]));
    }
    let pv: Vec<_> = probs.iter().map(|p| p.view()).collect();
    let ov: Vec<_> = occ.iter().map(|o| o.view()).collect();
    bss_from_probabilities(&pv, &ov, 1.0 - percentile / 100.0, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum ScoreCell {
    /// `(baseline - model) / baseline`
    Value(f64),
    /// Baseline is zero.
    Undefined,
    /// Model or baseline score absent.
    Missing,
}

impl ScoreCell {
    pub fn relative(model: Option<f64>, baseline: Option<f64>) -> Self {
        match (model, baseline) {
            (Some(m), Some(b)) if b == 0.0 || !b.is_finite() || !m.is_finite() => ScoreCell::Undefined,
            (Some(m), Some(b)) => ScoreCell::Value((b - m) / b),
            _ => ScoreCell::Missing,
        }
    }
}

impl fmt::Display for ScoreCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreCell::Value(v) => write!(f, "{:+.2}%", v * 100.0),
            ScoreCell::Undefined => f.write_str("undefined"),
            ScoreCell::Missing => f.write_str("missing"),
        }
    }
}

/// Scores keyed by `(variable, lead_day)`.
pub type ScoreTable = BTreeMap<(String, usize), f64>;

/// Relative-improvement matrix: rows are variables, columns lead days.
/// Positive cells mean the model has the lower (better) loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub metric: String,
    pub variables: Vec<String>,
    pub leads: Vec<usize>,
    pub cells: Vec<Vec<ScoreCell>>,
}

impl Scorecard {
    pub fn build(metric: &str, variables: &[String], leads: &[usize], model: &ScoreTable, baseline: &ScoreTable) -> Self {
        let cells = variables
            .iter()
            .map(|v| {
                leads
                    .iter()
                    .map(|&l| {
                        let key = (v.clone(), l);
                        ScoreCell::relative(model.get(&key).copied(), baseline.get(&key).copied())
                    })
                    .collect()
            })
            .collect();
        Scorecard {
            metric: metric.to_string(),
            variables: variables.to_vec(),
            leads: leads.to_vec(),
            cells,
        }
    }

    pub fn cell(&self, variable: &str, lead: usize) -> Option<ScoreCell> {
        let r = self.variables.iter().position(|v| v == variable)?;
        let c = self.leads.iter().position(|&l| l == lead)?;
        Some(self.cells[r][c])
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["variable".to_string()];
        header.extend(self.leads.iter().map(|l| format!("lead_{l}")));
        w.write_record(&header)?;
        for (v, row) in self.variables.iter().zip(&self.cells) {
            let mut rec = vec![v.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variable: String,
    pub lead_day: usize,
    pub metric: String,
    pub value: f64,
}

/// Convention flags for every verification choice the metrics depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConventions {
    pub crps_estimator: CrpsEstimator,
    pub ssr_spread_inflation: bool,
    pub bss_reference: String,
    pub bss_latitude_weighted: bool,
    pub threshold_quantile_rule: String,
    pub threshold_pool: String,
    pub spatial_weighting: String,
}

impl Default for VerifyConventions {
    fn default() -> Self {
        VerifyConventions {
            crps_estimator: CrpsEstimator::Standard,
            ssr_spread_inflation: true,
            bss_reference: "constant climatological exceedance rate 1 - p/100".into(),
            bss_latitude_weighted: true,
            threshold_quantile_rule: QUANTILE_RULE.into(),
            threshold_pool: "all samples within the calendar-day window of the climatology".into(),
            spatial_weighting: "cos(latitude), masked cells excluded".into(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `records` as CSV and `metadata` as a JSON sidecar next to it.
pub fn write_metric_report(path: &Path, records: &[MetricRecord], metadata: &serde_json::Value) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(metadata)?)?;
    Ok(())
}

pub fn read_metric_report(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Per-channel spatial weights (mask aware) for a layout.
pub fn channel_weights(grid: &GridSpec, channels: &[Channel]) -> Result<Vec<SpatialWeights>> {
    channels
        .iter()
        .map(|c| SpatialWeights::new(grid, c.mask.as_deref()))
        .collect()
}

/// Ensemble fields of channel `ch` from `[M, C, H, W]` members.
pub fn channel_ensemble(members: &ndarray::Array4<f64>, ch: usize) -> Array3<f64> {
    members.index_axis(Axis(1), ch).to_owned()
}

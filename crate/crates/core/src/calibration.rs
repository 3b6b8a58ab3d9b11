//! Reliability diagrams, expected calibration error and post-hoc
//! temperature scaling.
//!
//! Confidence is the top softmax probability. Bins are equal-width: the
//! lowest is `[0, 1/B]`, the rest `(a, b]`. Empty bins carry zero weight.

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp_unchecked, softmax_stable, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean confidence of the bin's examples (0 when empty).
    pub confidence: f64,
    /// Fraction of the bin's examples predicted correctly (0 when empty).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// CSV with header `bin_low,bin_high,count,confidence,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,confidence,accuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low, b.high, b.count, b.confidence, b.accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceReport {
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub temperature_used: f64,
}

/// Index of the bin holding `confidence`.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let raw = (confidence * n_bins as f64).ceil() as i64 - 1;
    raw.clamp(0, n_bins as i64 - 1) as usize
}

pub fn reliability(
    logits: &Matrix,
    labels: &[usize],
    temperature: f64,
    n_bins: usize,
) -> Result<ReliabilityBins> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config("temperature", format!("{temperature} must be positive")));
    }
    if n_bins == 0 {
        return Err(Error::config("n_bins", "need at least one bin"));
    }
    if logits.rows() == 0 || labels.is_empty() {
        return Err(Error::Contract("reliability of an empty set".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut scaled = vec![0.0; logits.cols()];
    for (row, &label) in logits.row_iter().zip(labels) {
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / temperature;
        }
        let p = softmax_stable(&scaled)?;
        let pred = argmax(&p);
        let conf = p[pred];
        let b = bin_index(conf, n_bins);
        counts[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    let width = 1.0 / n_bins as f64;
    let bins = (0..n_bins)
        .map(|b| {
            let c = counts[b];
            Bin {
                low: b as f64 * width,
                high: if b + 1 == n_bins { 1.0 } else { (b + 1) as f64 * width },
                count: c,
                confidence: if c == 0 { 0.0 } else { conf_sum[b] / c as f64 },
                accuracy: if c == 0 { 0.0 } else { correct[b] as f64 / c as f64 },
            }
        })
        .collect();
    Ok(ReliabilityBins { bins })
}

/// `Σ_b (count_b / n) · |acc_b − conf_b|`.
pub fn ece(bins: &ReliabilityBins) -> f64 {
    let n = bins.total();
    if n == 0 {
        return 0.0;
    }
    bins.bins
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

pub fn ece_report(
    logits: &Matrix,
    labels: &[usize],
    temperature: f64,
    n_bins: usize,
) -> Result<EceReport> {
    let bins = reliability(logits, labels, temperature, n_bins)?;
    Ok(EceReport {
        ece: ece(&bins),
        bins,
        temperature_used: temperature,
    })
}

/// Mean NLL of `softmax(logits / T)` against `labels`.
pub fn nll_at_temperature(logits: &Matrix, labels: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    let mut scaled = vec![0.0; logits.cols()];
    for (row, &l) in logits.row_iter().zip(labels) {
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / temperature;
        }
        total += log_sum_exp_unchecked(&scaled) - scaled[l];
    }
    total / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    /// Every logit row is constant so the NLL does not depend on T.
    DegenerateLogits,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    pub status: FitStatus,
}

pub const LOG_T_RANGE: (f64, f64) = (-3.0, 3.0);
pub const LOG_T_TOLERANCE: f64 = 1e-4;

/// Golden-section search for the NLL-minimizing temperature over
/// `log T ∈ [-3, 3]`.
pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<TemperatureFit> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Contract(format!("label {l} out of range")));
    }
    let first = labels.first().copied();
    if first.is_none() || labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Contract("need at least two distinct labels".into()));
    }
    let constant = logits
        .row_iter()
        .all(|r| r.iter().all(|&v| v == r[0]));
    if constant {
        log::warn!("all logit rows are constant; temperature left at 1");
        return Ok(TemperatureFit {
            temperature: 1.0,
            nll: nll_at_temperature(logits, labels, 1.0),
            status: FitStatus::DegenerateLogits,
        });
    }

    let f = |log_t: f64| nll_at_temperature(logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let log_t = 0.5 * (a + b);
    Ok(TemperatureFit {
        temperature: log_t.exp(),
        nll: f(log_t),
        status: FitStatus::Converged,
    })
}

//! Mutual information between a training-example index and one logit
//! difference under augmentation noise.
//!
//! Each example's logit difference `f = z_a − z_b` is modelled as a
//! Gaussian with its own mean (estimated from `L` augmented passes) and a
//! variance pooled over all examples. A fresh augmented draw per example
//! then scores
//!
//! ```text
//! Î = mean_x [ −(y_x − μ_x)² / 2σ²  −  log( (1/N) Σ_x' exp(−(y_x − μ_x')² / 2σ²) ) ]
//! ```
//!
//! which lies in `[0, log N]` up to estimation noise; the reported value is
//! clamped to that range.

use std::path::PathBuf;

use crate::dataset::{shift_image_into, AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::network::{load_checkpoint, predict_logits, NetworkParams};
use crate::numerics::{log_sum_exp_unchecked, purpose, Matrix, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct MiConfig {
    pub class_a: usize,
    pub class_b: usize,
    /// Rows of the dataset to measure; the augmentation stream of an
    /// example is keyed by its row index.
    pub example_indices: Vec<usize>,
    pub mc_samples: usize,
    pub aug: AugmentationSpec,
    /// Variance floor relative to the mean squared logit difference.
    pub variance_floor: f64,
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_a == self.class_b {
            return Err(Error::config("mi.class_b", "must differ from class_a"));
        }
        if self.example_indices.len() < 2 {
            return Err(Error::config("mi.examples", "need at least 2 examples"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mi.mc_samples", "need at least 1 sample"));
        }
        if !(self.variance_floor > 0.0) || !self.variance_floor.is_finite() {
            return Err(Error::config("mi.variance_floor", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiEstimate {
    pub mu: Vec<f64>,
    pub sigma_sq: f64,
    /// Clamped to `[0, log N]`.
    pub value: f64,
    /// Before clamping.
    pub raw_value: f64,
    pub n: usize,
    pub step: u64,
}

/// `L` augmented draws per example plus one fresh draw each.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDraws {
    pub samples: Vec<Vec<f64>>,
    pub fresh: Vec<f64>,
}

fn augmented_batch(
    dataset: &Dataset,
    rows: &[(usize, RngState, usize)],
    aug: &AugmentationSpec,
) -> Result<Matrix> {
    let dim = dataset.dim();
    let mut out = Matrix::zeros(rows.iter().map(|r| r.2).sum(), dim);
    let shape = if aug.is_identity() {
        None
    } else {
        Some(
            dataset
                .image_shape
                .ok_or_else(|| Error::config("mi.aug", "dataset has no image shape"))?,
        )
    };
    let mut r_out = 0;
    for &(idx, stream, count) in rows {
        let mut r = stream.rng();
        let src = dataset.images.row(idx);
        for _ in 0..count {
            match shape {
                None => out.row_mut(r_out).copy_from_slice(src),
                Some((w, h)) => {
                    let (sx, sy) = aug.draw_offset(&mut r);
                    let mut buf = vec![0.0; dim];
                    shift_image_into(src, w, h, sx, sy, aug.pad_value, &mut buf)?;
                    out.row_mut(r_out).copy_from_slice(&buf);
                }
            }
            r_out += 1;
        }
    }
    Ok(out)
}

/// Eval-mode logit differences for augmented copies of every example.
pub fn sample_logit_differences(
    net: &NetworkParams,
    dataset: &Dataset,
    cfg: &MiConfig,
    rng: &RngState,
) -> Result<LogitDraws> {
    cfg.validate()?;
    let k = net.num_classes();
    if cfg.class_a >= k || cfg.class_b >= k {
        return Err(Error::config("mi.class_a", format!("classes must lie in [0, {k})")));
    }
    if let Some(&bad) = cfg.example_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::config("mi.examples", format!("row {bad} outside dataset")));
    }
    let l = cfg.mc_samples;
    let mean_rows: Vec<(usize, RngState, usize)> = cfg
        .example_indices
        .iter()
        .map(|&i| (i, rng.split(&[purpose::MI_MEAN, i as u64]), l))
        .collect();
    let fresh_rows: Vec<(usize, RngState, usize)> = cfg
        .example_indices
        .iter()
        .map(|&i| (i, rng.split(&[purpose::MI_FRESH, i as u64]), 1))
        .collect();
    let diff = |batch: &Matrix| -> Result<Vec<f64>> {
        let logits = predict_logits(net, batch)?;
        Ok(logits
            .row_iter()
            .map(|r| r[cfg.class_a] - r[cfg.class_b])
            .collect())
    };
    let all = diff(&augmented_batch(dataset, &mean_rows, &cfg.aug)?)?;
    let fresh = diff(&augmented_batch(dataset, &fresh_rows, &cfg.aug)?)?;
    Ok(LogitDraws {
        samples: all.chunks(l).map(<[f64]>::to_vec).collect(),
        fresh,
    })
}

/// `μ_x`: mean of each example's augmented logit differences.
pub fn per_example_means(
    net: &NetworkParams,
    dataset: &Dataset,
    cfg: &MiConfig,
    rng: &RngState,
) -> Result<Vec<f64>> {
    let draws = sample_logit_differences(net, dataset, cfg, rng)?;
    Ok(means(&draws.samples))
}

pub fn means(samples: &[Vec<f64>]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
        .collect()
}

/// Mean squared deviation of every draw from its own example's mean,
/// floored at `floor`.
pub fn pooled_variance(samples: &[Vec<f64>], mu: &[f64], floor: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, m) in samples.iter().zip(mu) {
        for v in s {
            total += (v - m) * (v - m);
            count += 1;
        }
    }
    if count == 0 {
        return floor;
    }
    (total / count as f64).max(floor)
}

/// Unclamped Î for fresh draws `y` against means `mu`.
pub fn gaussian_mi(fresh: &[f64], mu: &[f64], sigma_sq: f64) -> f64 {
    let n = mu.len();
    let log_n = (n as f64).ln();
    let inv = 1.0 / (2.0 * sigma_sq);
    let mut terms = vec![0.0; n];
    let mut total = 0.0;
    for (x, &y) in fresh.iter().enumerate() {
        for (t, m) in terms.iter_mut().zip(mu) {
            *t = -(y - m) * (y - m) * inv;
        }
        let own = terms[x];
        total += own - (log_sum_exp_unchecked(&terms) - log_n);
    }
    total / n as f64
}

/// Full estimate from precomputed draws.
pub fn estimate_from_draws(draws: &LogitDraws, variance_floor: f64) -> Result<MiEstimate> {
    let n = draws.samples.len();
    if n < 2 || draws.fresh.len() != n {
        return Err(Error::Shape(format!(
            "{n} examples with {} fresh draws",
            draws.fresh.len()
        )));
    }
    if draws.samples.iter().any(Vec::is_empty) {
        return Err(Error::Shape("every example needs at least one draw".into()));
    }
    if draws.samples.iter().flatten().chain(&draws.fresh).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit difference".into()));
    }
    let mu = means(&draws.samples);
    let all: Vec<f64> = draws.samples.iter().flatten().copied().collect();
    let scale_sq = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).max(f64::MIN_POSITIVE);
    let sigma_sq = pooled_variance(&draws.samples, &mu, variance_floor * scale_sq);
    let raw = gaussian_mi(&draws.fresh, &mu, sigma_sq);
    let log_n = (n as f64).ln();
    let value = raw.clamp(0.0, log_n);
    if raw != value {
        log::info!("mutual information {raw} clamped to [0, {log_n}]");
    }
    Ok(MiEstimate {
        mu,
        sigma_sq,
        value,
        raw_value: raw,
        n,
        step: 0,
    })
}

pub fn mi_estimate(
    net: &NetworkParams,
    dataset: &Dataset,
    cfg: &MiConfig,
    rng: &RngState,
) -> Result<MiEstimate> {
    let draws = sample_logit_differences(net, dataset, cfg, rng)?;
    let mut est = estimate_from_draws(&draws, cfg.variance_floor)?;
    est.step = net.step;
    Ok(est)
}

/// Estimates at each checkpoint, ordered by training step. Unreadable
/// checkpoints are skipped with a warning.
pub fn mi_track(
    checkpoint_paths: &[PathBuf],
    dataset: &Dataset,
    cfg: &MiConfig,
    rng: &RngState,
) -> Result<Vec<(u64, MiEstimate)>> {
    let mut out = Vec::with_capacity(checkpoint_paths.len());
    for path in checkpoint_paths {
        let net = match load_checkpoint(path) {
            Ok(n) => n,
            Err(e) => {
                log::warn!("skipping checkpoint {}: {e}", path.display());
                continue;
            }
        };
        let est = mi_estimate(&net, dataset, cfg, rng)?;
        out.push((net.step, est));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

/// CSV `step,mi_value,n_examples,sigma_sq`.
pub fn series_to_csv(series: &[(u64, MiEstimate)]) -> String {
    let mut out = String::from("step,mi_value,n_examples,sigma_sq\n");
    for (step, e) in series {
        out.push_str(&format!("{step},{},{},{}\n", e.value, e.n, e.sigma_sq));
    }
    out
}

//! Target construction, classification losses and the equivalent
//! smoothness index of a teacher.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax_inplace, softmax_stable, Matrix};

const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingSpec {
    pub alpha: f64,
    pub num_classes: usize,
}

impl SmoothingSpec {
    pub fn new(alpha: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
        }
        if num_classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        Ok(SmoothingSpec { alpha, num_classes })
    }

    pub fn hard(num_classes: usize) -> Result<Self> {
        SmoothingSpec::new(0.0, num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// Cross-entropy against the temperature-softened teacher distribution.
    KlSoftTargets,
    /// Half squared error between student and teacher logits.
    LogitMatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSpec {
    pub beta: f64,
    pub temperature: f64,
    pub mode: DistillMode,
}

impl DistillSpec {
    pub fn new(beta: f64, temperature: f64, mode: DistillMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", format!("{beta} outside [0, 1]")));
        }
        check_temperature(temperature)?;
        Ok(DistillSpec {
            beta,
            temperature,
            mode,
        })
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::config("temperature", format!("{t} must be positive")));
    }
    Ok(())
}

/// `y(1−α) + α/K` for a one-hot `y` at `label`.
pub fn smooth_targets(label: usize, spec: &SmoothingSpec) -> Result<Vec<f64>> {
    let k = spec.num_classes;
    if label >= k {
        return Err(Error::Contract(format!("label {label} outside [0, {k})")));
    }
    let off = spec.alpha / k as f64;
    let mut t = vec![off; k];
    t[label] = 1.0 - spec.alpha + off;
    Ok(t)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Contract(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ −t_k log softmax(z)_k`, evaluated through log-softmax.
pub fn cross_entropy(targets: &[f64], logits: &[f64]) -> Result<f64> {
    if targets.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} targets against {} logits",
            targets.len(),
            logits.len()
        )));
    }
    check_distribution(targets, "targets")?;
    let logp = log_softmax(logits)?;
    Ok(targets
        .iter()
        .zip(&logp)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| -t * lp)
        .sum())
}

/// `softmax(logits / T)`.
pub fn teacher_targets(teacher_logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = teacher_logits.iter().map(|v| v / temperature).collect();
    softmax_stable(&scaled)
}

/// Per-example distillation loss and its gradient w.r.t. the student
/// logits. The student runs at temperature 1 and no `T²` factor is applied.
pub fn distill_loss(
    student_logits: &[f64],
    hard_label: usize,
    teacher_logits: &[f64],
    spec: &DistillSpec,
    smoothing: &SmoothingSpec,
) -> Result<(f64, Vec<f64>)> {
    let k = smoothing.num_classes;
    if student_logits.len() != k || teacher_logits.len() != k {
        return Err(Error::Shape(format!(
            "student {} / teacher {} logits for {k} classes",
            student_logits.len(),
            teacher_logits.len()
        )));
    }
    let targets = smooth_targets(hard_label, smoothing)?;
    let p = softmax_stable(student_logits)?;
    let beta = spec.beta;
    let mut loss = (1.0 - beta) * cross_entropy(&targets, student_logits)?;
    let mut grad: Vec<f64> = p
        .iter()
        .zip(&targets)
        .map(|(pk, yk)| (1.0 - beta) * (pk - yk))
        .collect();
    match spec.mode {
        DistillMode::KlSoftTargets => {
            let pt = teacher_targets(teacher_logits, spec.temperature)?;
            loss += beta * cross_entropy(&pt, student_logits)?;
            for ((g, pk), tk) in grad.iter_mut().zip(&p).zip(&pt) {
                *g += beta * (pk - tk);
            }
        }
        DistillMode::LogitMatch => {
            let mut sq = 0.0;
            for ((g, s), t) in grad.iter_mut().zip(student_logits).zip(teacher_logits) {
                let d = s - t;
                sq += d * d;
                *g += beta * d;
            }
            loss += beta * 0.5 * sq;
        }
    }
    Ok((loss, grad))
}

/// `E[Σ_k (1 − y_k) p_k · K/(K−1)]` over the rows of `teacher_probs`.
pub fn gamma_index(teacher_probs: &Matrix, labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes < 2 || teacher_probs.cols() != num_classes {
        return Err(Error::Shape(format!(
            "{} probability columns for {num_classes} classes",
            teacher_probs.cols()
        )));
    }
    if teacher_probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} rows for {} labels",
            teacher_probs.rows(),
            labels.len()
        )));
    }
    let scale = num_classes as f64 / (num_classes as f64 - 1.0);
    let mut total = 0.0;
    for (i, (row, &l)) in teacher_probs.row_iter().zip(labels).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("row {i} is not a distribution (sum {s})")));
        }
        if l >= num_classes {
            return Err(Error::Contract(format!("label {l} out of range")));
        }
        let incorrect: f64 = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != l)
            .map(|(_, v)| v)
            .sum();
        total += incorrect * scale;
    }
    Ok(total / labels.len() as f64)
}

/// A minibatch loss: mean over the batch plus its gradient w.r.t. logits.
pub trait Objective {
    /// `example_ids` index the training set row each logit row came from.
    fn loss_and_grad(
        &self,
        logits: &Matrix,
        labels: &[usize],
        example_ids: &[usize],
    ) -> Result<(f64, Matrix)>;
}

/// Cross-entropy against label-smoothed targets, scaled by `multiplier`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedCrossEntropy {
    pub smoothing: SmoothingSpec,
    pub multiplier: f64,
}

impl SmoothedCrossEntropy {
    pub fn new(smoothing: SmoothingSpec, multiplier: f64) -> Self {
        SmoothedCrossEntropy {
            smoothing,
            multiplier,
        }
    }
}

impl Objective for SmoothedCrossEntropy {
    fn loss_and_grad(
        &self,
        logits: &Matrix,
        labels: &[usize],
        _example_ids: &[usize],
    ) -> Result<(f64, Matrix)> {
        check_batch(logits, labels, self.smoothing.num_classes)?;
        let n = labels.len() as f64;
        let scale = self.multiplier / n;
        let mut grad = logits.clone();
        let mut loss = 0.0;
        let k = self.smoothing.num_classes as f64;
        let off = self.smoothing.alpha / k;
        for (row, &l) in grad.as_mut_slice().chunks_exact_mut(logits.cols()).zip(labels) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            let lse = crate::numerics::log_sum_exp_unchecked(row);
            for (j, z) in row.iter().enumerate() {
                let t = if j == l { 1.0 - self.smoothing.alpha + off } else { off };
                if t > 0.0 {
                    loss -= t * (z - lse);
                }
            }
            softmax_inplace(row);
            for (j, g) in row.iter_mut().enumerate() {
                let t = if j == l { 1.0 - self.smoothing.alpha + off } else { off };
                *g = (*g - t) * scale;
            }
        }
        Ok((loss * self.multiplier / n, grad))
    }
}

/// Distillation against precomputed teacher logits for every training row.
#[derive(Debug, Clone, PartialEq)]
pub struct Distillation {
    pub teacher_logits: Matrix,
    pub spec: DistillSpec,
    pub smoothing: SmoothingSpec,
    pub multiplier: f64,
}

impl Objective for Distillation {
    fn loss_and_grad(
        &self,
        logits: &Matrix,
        labels: &[usize],
        example_ids: &[usize],
    ) -> Result<(f64, Matrix)> {
        check_batch(logits, labels, self.smoothing.num_classes)?;
        if example_ids.len() != labels.len() {
            return Err(Error::Shape("example ids do not match batch".into()));
        }
        let n = labels.len() as f64;
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for (i, (&l, &id)) in labels.iter().zip(example_ids).enumerate() {
            if id >= self.teacher_logits.rows() {
                return Err(Error::Contract(format!("no teacher logits for example {id}")));
            }
            let (li, gi) = distill_loss(
                logits.row(i),
                l,
                self.teacher_logits.row(id),
                &self.spec,
                &self.smoothing,
            )?;
            loss += li;
            for (g, v) in grad.row_mut(i).iter_mut().zip(gi) {
                *g = v * self.multiplier / n;
            }
        }
        Ok((loss * self.multiplier / n, grad))
    }
}

fn check_batch(logits: &Matrix, labels: &[usize], k: usize) -> Result<()> {
    if logits.rows() != labels.len() || logits.cols() != k {
        return Err(Error::Shape(format!(
            "{}x{} logits for {} labels and {k} classes",
            logits.rows(),
            logits.cols(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {l} outside [0, {k})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{purpose, RngState};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn smoothing_formula() {
        let t = smooth_targets(3, &SmoothingSpec::new(0.1, 10).unwrap()).unwrap();
        for (k, v) in t.iter().enumerate() {
            let want = if k == 3 { 0.91 } else { 0.01 };
            assert!((v - want).abs() < 1e-15);
        }
        let hard = smooth_targets(1, &SmoothingSpec::hard(3).unwrap()).unwrap();
        assert_eq!(hard, vec![0.0, 1.0, 0.0]);
        let uni = smooth_targets(1, &SmoothingSpec::new(1.0, 4).unwrap()).unwrap();
        assert_eq!(uni, vec![0.25; 4]);
        assert!(matches!(
            smooth_targets(4, &SmoothingSpec::new(0.1, 4).unwrap()),
            Err(Error::Contract(_))
        ));
        assert!(SmoothingSpec::new(1.5, 4).is_err());
    }

    #[test]
    fn confident_correct_logit_has_no_loss() {
        let loss = cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1000.0, 0.0]).unwrap();
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn uniform_targets_obey_gibbs() {
        let k = 5;
        let t = vec![1.0 / k as f64; k];
        let lk = (k as f64).ln();
        assert!((cross_entropy(&t, &[0.0; 5]).unwrap() - lk).abs() < 1e-15);
        assert!(cross_entropy(&t, &[1.0, -2.0, 0.3, 0.0, 4.0]).unwrap() > lk);
        assert!(matches!(
            cross_entropy(&[0.5, 0.6], &[0.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_sum() {
        let mut r = RngState::new(5).rng();
        for _ in 0..200 {
            let k = r.gen_range(2..12);
            let logits: Vec<f64> = (0..k).map(|_| r.gen_range(-20.0..20.0)).collect();
            let raw: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let t: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let naive: f64 = t
                .iter()
                .zip(&logits)
                .map(|(tk, lk)| -tk * ((lk - m).exp() / z).ln())
                .sum();
            assert!((cross_entropy(&t, &logits).unwrap() - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn teacher_temperature_limits() {
        let z = [2.0, -1.0, 0.5];
        assert_eq!(teacher_targets(&z, 1.0).unwrap(), softmax_stable(&z).unwrap());
        for v in teacher_targets(&z, 1e9).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let sharp = teacher_targets(&z, 0.5).unwrap();
        let plain = teacher_targets(&z, 1.0).unwrap();
        assert!(sharp[0] > plain[0]);
        assert!(matches!(teacher_targets(&z, 0.0), Err(Error::Config { .. })));
        assert!(teacher_targets(&z, -1.0).is_err());
    }

    #[test]
    fn beta_zero_is_cross_entropy() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let t = [1.0, 0.0, -3.0, 2.0];
        let sm = SmoothingSpec::new(0.1, 4).unwrap();
        for mode in [DistillMode::KlSoftTargets, DistillMode::LogitMatch] {
            let spec = DistillSpec::new(0.0, 3.0, mode).unwrap();
            let (loss, _) = distill_loss(&s, 2, &t, &spec, &sm).unwrap();
            let want = cross_entropy(&smooth_targets(2, &sm).unwrap(), &s).unwrap();
            assert_eq!(loss, want);
        }
    }

    #[test]
    fn beta_one_ignores_label() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let t = [1.0, 0.0, -3.0, 2.0];
        let sm = SmoothingSpec::hard(4).unwrap();
        let spec = DistillSpec::new(1.0, 2.0, DistillMode::KlSoftTargets).unwrap();
        let a = distill_loss(&s, 0, &t, &spec, &sm).unwrap();
        let b = distill_loss(&s, 3, &t, &spec, &sm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logit_match_gradient_at_beta_one() {
        let s = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, -3.0];
        let spec = DistillSpec::new(1.0, 1.0, DistillMode::LogitMatch).unwrap();
        let (loss, g) = distill_loss(&s, 1, &t, &spec, &SmoothingSpec::hard(3).unwrap()).unwrap();
        for ((gk, sk), tk) in g.iter().zip(&s).zip(&t) {
            assert!((gk - (sk - tk)).abs() < 1e-15);
        }
        assert!((loss - 0.5 * (0.49 + 1.44 + 25.0)).abs() < 1e-12);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let mut r = RngState::new(8).rng();
        for mode in [DistillMode::KlSoftTargets, DistillMode::LogitMatch] {
            let s: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let spec = DistillSpec::new(0.6, 2.5, mode).unwrap();
            let sm = SmoothingSpec::new(0.1, 5).unwrap();
            let (_, g) = distill_loss(&s, 2, &t, &spec, &sm).unwrap();
            for k in 0..5 {
                let h = 1e-6;
                let mut up = s.clone();
                up[k] += h;
                let mut dn = s.clone();
                dn[k] -= h;
                let fd = (distill_loss(&up, 2, &t, &spec, &sm).unwrap().0
                    - distill_loss(&dn, 2, &t, &spec, &sm).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-8, "{mode:?} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn gamma_endpoints() {
        let labels = vec![0, 2, 1];
        let mut onehot = Matrix::zeros(3, 3);
        for (i, &l) in labels.iter().enumerate() {
            onehot.set(i, l, 1.0);
        }
        assert_eq!(gamma_index(&onehot, &labels, 3).unwrap(), 0.0);
        let uniform = Matrix::from_vec(3, 3, vec![1.0 / 3.0; 9]).unwrap();
        assert!((gamma_index(&uniform, &labels, 3).unwrap() - 1.0).abs() < 1e-12);
        let bad = Matrix::from_vec(3, 3, vec![0.5; 9]).unwrap();
        assert!(matches!(gamma_index(&bad, &labels, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn gamma_non_decreasing_in_temperature() {
        let mut r = RngState::new(21).split(&[purpose::DATA]).rng();
        for _ in 0..20 {
            let (n, k) = (30, 6);
            let mut logits = Matrix::zeros(n, k);
            let mut labels = Vec::new();
            for i in 0..n {
                let l = r.gen_range(0..k);
                labels.push(l);
                for j in 0..k {
                    logits.set(i, j, r.gen_range(-4.0..4.0));
                }
                let top = (0..k).map(|j| logits.get(i, j)).fold(f64::MIN, f64::max);
                logits.set(i, l, top + r.gen_range(0.01..3.0));
            }
            let mut last = -1.0;
            for t in [0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0, 12.0, 16.0, 100.0] {
                let probs = crate::numerics::softmax_rows(&logits, t).unwrap();
                let g = gamma_index(&probs, &labels, k).unwrap();
                assert!(g >= last - 1e-12, "gamma dropped from {last} to {g} at T={t}");
                last = g;
            }
        }
    }

    #[test]
    fn batch_objective_matches_per_example_mean() {
        let sm = SmoothingSpec::new(0.2, 3).unwrap();
        let logits = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.5, 2.0, 0.0]]).unwrap();
        let labels = [0, 2];
        let obj = SmoothedCrossEntropy::new(sm, 3.0);
        let (loss, grad) = obj.loss_and_grad(&logits, &labels, &[0, 1]).unwrap();
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            want += cross_entropy(&smooth_targets(l, &sm).unwrap(), logits.row(i)).unwrap();
        }
        assert!((loss - 3.0 * want / 2.0).abs() < 1e-14);
        let p = softmax_stable(logits.row(1)).unwrap();
        let t = smooth_targets(2, &sm).unwrap();
        for k in 0..3 {
            assert!((grad.get(1, k) - 1.5 * (p[k] - t[k])).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn smoothed_targets_are_distributions(alpha in 0.0f64..=1.0, k in 2usize..50, seed in any::<u64>()) {
            let label = (seed as usize) % k;
            let spec = SmoothingSpec::new(alpha, k).unwrap();
            let t = smooth_targets(label, &spec).unwrap();
            let s: f64 = t.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(t.iter().all(|&v| v >= alpha / k as f64 - 1e-18));
        }

        #[test]
        fn gamma_recovers_alpha(alpha in 0.0f64..=1.0, k in 2usize..30, n in 1usize..20) {
            let spec = SmoothingSpec::new(alpha, k).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
            let rows: Vec<Vec<f64>> = labels.iter().map(|&l| smooth_targets(l, &spec).unwrap()).collect();
            let g = gamma_index(&Matrix::from_rows(&rows).unwrap(), &labels, k).unwrap();
            prop_assert!((g - alpha).abs() <= 1e-12);
        }

        #[test]
        fn distill_loss_continuous_in_beta(beta in 0.0f64..1.0, eps in 1e-9f64..1e-7) {
            let s = [0.3, -1.2, 2.0, 0.1];
            let t = [1.0, 0.0, -3.0, 2.0];
            let sm = SmoothingSpec::new(0.1, 4).unwrap();
            let a = distill_loss(&s, 1, &t, &DistillSpec::new(beta, 2.0, DistillMode::KlSoftTargets).unwrap(), &sm).unwrap().0;
            let b = distill_loss(&s, 1, &t, &DistillSpec::new(beta + eps, 2.0, DistillMode::KlSoftTargets).unwrap(), &sm).unwrap().0;
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

//! Fully connected classifiers trained from scratch.
//!
//! Weights are stored `in_dim × out_dim` so a layer computes
//! `input · W + b`. Dropout is inverted (surviving units are scaled by
//! `1 / keep` at train time) and acts on a layer's *input*, so the eval
//! forward pass needs no rescaling and consumes no randomness.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{shift_image_into, AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::numerics::{self, matmul, matmul_nt, matmul_tn, purpose, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Probability that each *input* unit of this layer survives dropout.
    pub dropout_keep: f64,
    pub weight_lr_scale: f64,
    pub bias_lr_scale: f64,
    pub weight_decay: f64,
    pub init_std: f64,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            dropout_keep: 1.0,
            weight_lr_scale: 1.0,
            bias_lr_scale: 1.0,
            weight_decay: 0.0,
            init_std: 0.03,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let field = |name: &str| format!("layer[{index}].{name}");
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config(field("dims"), "dimensions must be positive"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config(field("dropout_keep"), "must lie in (0, 1]"));
        }
        for (name, v) in [
            ("weight_lr_scale", self.weight_lr_scale),
            ("bias_lr_scale", self.bias_lr_scale),
            ("weight_decay", self.weight_decay),
            ("init_std", self.init_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field(name), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Layers of a classifier plus the number of optimizer steps applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub step: u64,
}

/// Knobs shared by the layers of a multilayer perceptron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpOptions {
    pub input_keep: f64,
    pub hidden_keep: f64,
    pub init_std: f64,
    pub last_layer_lr_scale: f64,
    pub weight_decay: f64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            input_keep: 1.0,
            hidden_keep: 1.0,
            init_std: 0.03,
            last_layer_lr_scale: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl NetworkParams {
    /// Gaussian weights (std from each spec), zero biases.
    pub fn new(specs: Vec<LayerSpec>, rng: &RngState) -> Result<Self> {
        validate_chain(&specs)?;
        let mut r = rng.split(&[purpose::INIT]).rng();
        let layers = specs
            .into_iter()
            .map(|spec| {
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| spec.init_std * r.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer {
                    weights: Matrix::from_vec(spec.in_dim, spec.out_dim, data)
                        .expect("dims match by construction"),
                    biases: vec![0.0; spec.out_dim],
                    spec,
                }
            })
            .collect();
        Ok(NetworkParams { layers, step: 0 })
    }

    /// ReLU hidden layers followed by a linear classifier layer.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        opts: &MlpOptions,
        rng: &RngState,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let n = dims.len() - 1;
        let specs = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                let mut s = LayerSpec::new(
                    dims[i],
                    dims[i + 1],
                    if last { Activation::Linear } else { Activation::Relu },
                );
                s.dropout_keep = if i == 0 { opts.input_keep } else { opts.hidden_keep };
                s.init_std = opts.init_std;
                s.weight_decay = opts.weight_decay;
                if last {
                    s.weight_lr_scale = opts.last_layer_lr_scale;
                    s.bias_lr_scale = opts.last_layer_lr_scale;
                }
                s
            })
            .collect();
        NetworkParams::new(specs, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.last_layer().spec.out_dim
    }

    pub fn penultimate_dim(&self) -> usize {
        self.last_layer().spec.in_dim
    }

    pub fn last_layer(&self) -> &Layer {
        self.layers.last().expect("validated non-empty")
    }

    pub fn last_layer_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("validated non-empty")
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("layers", "network needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(i)?;
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::config(
                format!("layer[{i}].in_dim"),
                format!("{} does not match previous out_dim {}", s.in_dim, specs[i - 1].out_dim),
            ));
        }
    }
    if specs.last().map(|s| s.activation) != Some(Activation::Linear) {
        return Err(Error::config("layers", "final layer must be linear"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything backpropagation needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input seen by each layer, after dropout.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub post_activations: Vec<Matrix>,
    /// Scaled keep masks (`0` or `1/keep`) for layers that applied dropout.
    pub dropout_masks: Vec<Option<Matrix>>,
    pub logits: Matrix,
    pub mode: Mode,
    /// `NetworkParams::step` at the time of the pass.
    pub param_step: u64,
}

impl ForwardTrace {
    /// Input to the final layer.
    pub fn penultimate(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }
}

pub fn forward(
    params: &NetworkParams,
    batch: &Matrix,
    mode: Mode,
    rng: &RngState,
) -> Result<ForwardTrace> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut post_activations = Vec::with_capacity(n);
    let mut dropout_masks = Vec::with_capacity(n);
    let mut current = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let keep = layer.spec.dropout_keep;
        if mode == Mode::Train && keep < 1.0 {
            let mut r = rng.split(&[purpose::DROPOUT, i as u64]).rng();
            let scale = 1.0 / keep;
            let mut mask = Matrix::zeros(current.rows(), current.cols());
            for (m, v) in mask.as_mut_slice().iter_mut().zip(current.as_mut_slice()) {
                if r.gen::<f64>() < keep {
                    *m = scale;
                    *v *= scale;
                } else {
                    *v = 0.0;
                }
            }
            dropout_masks.push(Some(mask));
        } else {
            dropout_masks.push(None);
        }
        let mut pre = matmul(&current, &layer.weights)?;
        pre.add_row_vector(&layer.biases)?;
        let mut post = pre.clone();
        if layer.spec.activation == Activation::Relu {
            post.map_inplace(|v| v.max(0.0));
        }
        inputs.push(current);
        pre_activations.push(pre);
        current = post.clone();
        post_activations.push(post);
    }
    Ok(ForwardTrace {
        inputs,
        pre_activations,
        post_activations,
        dropout_masks,
        logits: current,
        mode,
        param_step: params.step,
    })
}

/// Logits only, eval mode, processed in chunks to bound memory.
pub fn predict_logits(params: &NetworkParams, inputs: &Matrix) -> Result<Matrix> {
    Ok(eval_passes(params, inputs)?.0)
}

/// Eval-mode `(logits, penultimate activations)`.
fn eval_passes(params: &NetworkParams, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
    const CHUNK: usize = 1000;
    let k = params.num_classes();
    let d = params.penultimate_dim();
    let mut logits = Vec::with_capacity(inputs.rows() * k);
    let mut pen = Vec::with_capacity(inputs.rows() * d);
    let unused = RngState::new(0);
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + CHUNK).min(inputs.rows());
        let idx: Vec<usize> = (start..end).collect();
        let trace = forward(params, &inputs.select_rows(&idx), Mode::Eval, &unused)?;
        logits.extend_from_slice(trace.logits.as_slice());
        pen.extend_from_slice(trace.penultimate().as_slice());
        start = end;
    }
    if inputs.rows() == 0 && inputs.cols() != params.input_dim() {
        return Err(Error::Shape("empty batch with wrong width".into()));
    }
    Ok((
        Matrix::from_vec(inputs.rows(), k, logits)?,
        Matrix::from_vec(inputs.rows(), d, pen)?,
    ))
}

/// Per-layer `(dW, db)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Exact gradients of a loss whose logit gradient is `dloss_dlogits`,
/// plus `weight_decay · W` on every weight matrix.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    dloss_dlogits: &Matrix,
) -> Result<Gradients> {
    let n = params.layers.len();
    if trace.param_step != params.step || trace.inputs.len() != n {
        return Err(Error::Contract(format!(
            "trace from step {} with {} layers used against step {} with {n} layers",
            trace.param_step,
            trace.inputs.len(),
            params.step
        )));
    }
    for (i, (layer, input)) in params.layers.iter().zip(&trace.inputs).enumerate() {
        if input.cols() != layer.spec.in_dim || trace.pre_activations[i].cols() != layer.spec.out_dim {
            return Err(Error::Contract(format!("trace layer {i} does not match network")));
        }
    }
    if dloss_dlogits.rows() != trace.logits.rows() || dloss_dlogits.cols() != trace.logits.cols() {
        return Err(Error::Shape(format!(
            "logit gradient is {}x{}, logits are {}x{}",
            dloss_dlogits.rows(),
            dloss_dlogits.cols(),
            trace.logits.rows(),
            trace.logits.cols()
        )));
    }

    let mut grads = Vec::with_capacity(n);
    let mut delta = dloss_dlogits.clone();
    for i in (0..n).rev() {
        let layer = &params.layers[i];
        let mut dw = matmul_tn(&trace.inputs[i], &delta)?;
        if layer.spec.weight_decay != 0.0 {
            for (g, w) in dw.as_mut_slice().iter_mut().zip(layer.weights.as_slice()) {
                *g += layer.spec.weight_decay * w;
            }
        }
        let db = delta.sum_rows();
        grads.push((dw, db));
        if i == 0 {
            break;
        }
        let mut dx = matmul_nt(&delta, &layer.weights)?;
        if let Some(mask) = &trace.dropout_masks[i] {
            for (g, m) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *g *= m;
            }
        }
        if params.layers[i - 1].spec.activation == Activation::Relu {
            let pre = &trace.pre_activations[i - 1];
            for (g, z) in dx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = dx;
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` every `every` steps.
    StepDecay { factor: f64, every: u64 },
    /// Linear decay from the base rate to zero at `total_steps`.
    LinearToZero { total_steps: u64 },
}

impl Schedule {
    pub fn multiplier(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::StepDecay { factor, every } => {
                factor.powi((step / every.max(1)).min(i32::MAX as u64) as i32)
            }
            Schedule::LinearToZero { total_steps } => {
                if total_steps == 0 {
                    0.0
                } else {
                    (1.0 - step as f64 / total_steps as f64).max(0.0)
                }
            }
        }
    }
}

/// Gradient smoothing: `s ← m·s + (1−m)·g`, then `θ ← θ − lr·scale·s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub smoothed: Vec<(Matrix, Vec<f64>)>,
    pub step: u64,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum_mix: f64,
}

impl OptimizerState {
    pub fn new(
        params: &NetworkParams,
        base_lr: f64,
        schedule: Schedule,
        momentum_mix: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum_mix) {
            return Err(Error::config("momentum_mix", "must lie in [0, 1)"));
        }
        if !base_lr.is_finite() || base_lr < 0.0 {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        let smoothed = params
            .layers
            .iter()
            .map(|l| {
                (
                    Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    vec![0.0; l.biases.len()],
                )
            })
            .collect();
        Ok(OptimizerState {
            smoothed,
            step: 0,
            base_lr,
            schedule,
            momentum_mix,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.base_lr * self.schedule.multiplier(self.step)
    }
}

pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() || opt.smoothed.len() != params.layers.len() {
        return Err(Error::Shape("gradient/optimizer layer count mismatch".into()));
    }
    for ((layer, (gw, gb)), (sw, sb)) in params.layers.iter().zip(&grads.layers).zip(&opt.smoothed) {
        if gw.rows() != layer.weights.rows()
            || gw.cols() != layer.weights.cols()
            || gb.len() != layer.biases.len()
            || sw.as_slice().len() != gw.as_slice().len()
            || sb.len() != gb.len()
        {
            return Err(Error::Shape("gradient shape does not match parameters".into()));
        }
    }
    if !grads.is_finite() {
        return Err(Error::Divergence { step: opt.step });
    }
    let lr = opt.current_lr();
    let m = opt.momentum_mix;
    for ((layer, (gw, gb)), (sw, sb)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.smoothed.iter_mut())
    {
        let w_lr = lr * layer.spec.weight_lr_scale;
        for ((p, s), g) in layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(sw.as_mut_slice())
            .zip(gw.as_slice())
        {
            *s = m * *s + (1.0 - m) * g;
            *p -= w_lr * *s;
        }
        let b_lr = lr * layer.spec.bias_lr_scale;
        for ((p, s), g) in layer.biases.iter_mut().zip(sb.iter_mut()).zip(gb) {
            *s = m * *s + (1.0 - m) * g;
            *p -= b_lr * *s;
        }
    }
    opt.step += 1;
    params.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum_mix: f64,
    pub augmentation: Option<AugmentationSpec>,
    /// Save a checkpoint every this many steps (and at step 0).
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            base_lr: 0.1,
            schedule: Schedule::Constant,
            momentum_mix: 0.9,
            augmentation: None,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

/// One row of the training log. Train metrics are running averages over
/// the epoch's (augmented, dropped-out) minibatches.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<(u64, PathBuf)>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step:09}.slck")
}

fn maybe_checkpoint(
    params: &NetworkParams,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
        if every > 0 && params.step % every == 0 {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(checkpoint_file_name(params.step));
            save_checkpoint(params, &path)?;
            log.checkpoints.push((params.step, path));
        }
    }
    Ok(())
}

/// Minibatch SGD over shuffled epochs.
pub fn train(
    mut params: NetworkParams,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    objective: &dyn Objective,
    config: &TrainConfig,
    rng: &RngState,
) -> Result<(NetworkParams, TrainLog)> {
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if train_set.is_empty() {
        return Err(Error::config("dataset", "training set is empty"));
    }
    if train_set.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} against network input {}",
            train_set.dim(),
            params.input_dim()
        )));
    }
    let shape = match config.augmentation {
        Some(aug) if !aug.is_identity() => Some((
            aug,
            train_set
                .image_shape
                .ok_or_else(|| Error::config("augment", "dataset has no image shape"))?,
        )),
        _ => None,
    };
    let mut opt = OptimizerState::new(&params, config.base_lr, config.schedule, config.momentum_mix)?;
    opt.step = params.step;
    let mut log = TrainLog::default();
    maybe_checkpoint(&params, config, &mut log)?;

    let n = train_set.len();
    let dim = train_set.dim();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.sort_unstable();
        order.shuffle(&mut rng.split(&[purpose::SHUFFLE, epoch as u64]).rng());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, ids) in order.chunks(config.batch_size).enumerate() {
            let tags = [epoch as u64, b as u64];
            let mut batch = train_set.images.select_rows(ids);
            if let Some((aug, (w, h))) = shape {
                let mut r = rng.split(&[purpose::AUGMENT, tags[0], tags[1]]).rng();
                let mut shifted = vec![0.0; dim];
                for row in 0..ids.len() {
                    let (sx, sy) = aug.draw_offset(&mut r);
                    shift_image_into(batch.row(row), w, h, sx, sy, aug.pad_value, &mut shifted)?;
                    batch.row_mut(row).copy_from_slice(&shifted);
                }
            }
            let labels: Vec<usize> = ids.iter().map(|&i| train_set.labels[i]).collect();
            let trace = forward(&params, &batch, Mode::Train, &rng.split(&[purpose::DROPOUT, tags[0], tags[1]]))?;
            let (loss, dlogits) = objective.loss_and_grad(&trace.logits, &labels, ids)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: params.step });
            }
            loss_sum += loss * ids.len() as f64;
            correct += trace
                .logits
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = backward(&params, &trace, &dlogits)?;
            sgd_step(&mut params, &grads, &mut opt)?;
            maybe_checkpoint(&params, config, &mut log)?;
        }
        let (val_acc, val_nll) = match validation {
            Some(v) if !v.is_empty() => {
                let e = evaluate(&params, v)?;
                (Some(e.accuracy), Some(e.nll))
            }
            _ => (None, None),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            step: params.step,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
            val_nll,
        };
        log::debug!(
            "epoch {} step {} loss {:.4} acc {:.4} val_acc {:?}",
            m.epoch,
            m.step,
            m.train_loss,
            m.train_acc,
            m.val_acc
        );
        log.epochs.push(m);
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy against the hard labels.
    pub nll: f64,
    pub logits: Matrix,
    pub penultimate: Matrix,
}

pub fn evaluate(params: &NetworkParams, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} against network input {}",
            dataset.dim(),
            params.input_dim()
        )));
    }
    let (logits, penultimate) = eval_passes(params, &dataset.images)?;
    let (accuracy, nll) = accuracy_and_nll(&logits, &dataset.labels)?;
    Ok(Evaluation {
        accuracy,
        nll,
        logits,
        penultimate,
    })
}

/// Argmax accuracy and mean hard-label NLL of a logit matrix.
pub fn accuracy_and_nll(logits: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (row, &l) in logits.row_iter().zip(labels) {
        if l >= row.len() {
            return Err(Error::Contract(format!("label {l} out of range")));
        }
        if numerics::argmax(row) == l {
            correct += 1;
        }
        nll -= numerics::log_softmax(row)?[l];
    }
    let n = labels.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian checkpoint: magic, version, step, layer count, then per
/// layer its dims and spec followed by raw weights (row-major) and biases.
pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.parameter_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.step.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        let s = &layer.spec;
        out.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
        out.push(s.activation.code());
        for v in [
            s.dropout_keep,
            s.weight_lr_scale,
            s.bias_lr_scale,
            s.weight_decay,
            s.init_std,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.weights.as_slice().iter().chain(&layer.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let v = f64::from_bits(self.u64(field)?);
        if !v.is_finite() {
            return Err(Error::format(field, "non-finite value"));
        }
        Ok(v)
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(field, "size overflow"))?;
        let bytes = self.take(len, field)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(field, "non-finite value"));
        }
        Ok(vals)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "checkpoint.magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint.magic", "not a checkpoint file"));
    }
    let version = r.u32("checkpoint.version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint.version",
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let step = r.u64("checkpoint.step")?;
    let count = r.u32("checkpoint.layers")? as usize;
    let mut layers = Vec::new();
    for i in 0..count {
        let f = |name: &str| format!("layer[{i}].{name}");
        let in_dim = r.u32(&f("in_dim"))? as usize;
        let out_dim = r.u32(&f("out_dim"))? as usize;
        let activation = Activation::from_code(r.u8(&f("activation"))?)
            .ok_or_else(|| Error::format(f("activation"), "unknown activation code"))?;
        let spec = LayerSpec {
            in_dim,
            out_dim,
            activation,
            dropout_keep: r.f64(&f("dropout_keep"))?,
            weight_lr_scale: r.f64(&f("weight_lr_scale"))?,
            bias_lr_scale: r.f64(&f("bias_lr_scale"))?,
            weight_decay: r.f64(&f("weight_decay"))?,
            init_std: r.f64(&f("init_std"))?,
        };
        let size = in_dim
            .checked_mul(out_dim)
            .ok_or_else(|| Error::format(f("weights"), "size overflow"))?;
        let weights = Matrix::from_vec(in_dim, out_dim, r.f64s(size, &f("weights"))?)?;
        let biases = r.f64s(out_dim, &f("biases"))?;
        layers.push(Layer {
            spec,
            weights,
            biases,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after last layer"));
    }
    validate_chain(&layers.iter().map(|l| l.spec).collect::<Vec<_>>())
        .map_err(|e| Error::format("checkpoint.layers", e.to_string()))?;
    Ok(NetworkParams { layers, step })
}

/// Writes the checkpoint, creating missing parent directories.
pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_clusters;
    use crate::losses::{cross_entropy, SmoothedCrossEntropy, SmoothingSpec};
    use rand::Rng;

    fn tiny(keep: f64, seed: u64) -> NetworkParams {
        let opts = MlpOptions {
            input_keep: keep,
            hidden_keep: keep,
            init_std: 0.5,
            ..MlpOptions::default()
        };
        NetworkParams::mlp(3, &[5], 4, &opts, &RngState::new(seed)).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = RngState::new(seed).rng();
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let mut p = tiny(1.0, 1);
        for l in &mut p.layers {
            l.weights.map_inplace(|_| 0.0);
            l.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        let t = forward(&p, &random_batch(2, 3, 2), Mode::Eval, &RngState::new(0)).unwrap();
        assert!(t.logits.as_slice().iter().all(|&v| v == 0.0));
        let probs = numerics::softmax_stable(t.logits.row(0)).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn keep_one_train_equals_eval() {
        let p = tiny(1.0, 3);
        let x = random_batch(6, 3, 4);
        let a = forward(&p, &x, Mode::Train, &RngState::new(5)).unwrap();
        let b = forward(&p, &x, Mode::Eval, &RngState::new(99)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn single_linear_layer_is_affine_map() {
        let mut spec = LayerSpec::new(4, 3, Activation::Linear);
        spec.init_std = 1.0;
        let p = NetworkParams::new(vec![spec], &RngState::new(8)).unwrap();
        let mut p = p;
        p.layers[0].biases = vec![0.5, -1.0, 2.0];
        let x = random_batch(5, 4, 9);
        let t = forward(&p, &x, Mode::Eval, &RngState::new(0)).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut want = p.layers[0].biases[j];
                for k in 0..4 {
                    want += x.get(i, k) * p.layers[0].weights.get(k, j);
                }
                assert!((t.logits.get(i, j) - want).abs() < 1e-14);
            }
        }
        assert_eq!(t.penultimate(), &x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = tiny(1.0, 1);
        assert!(matches!(
            forward(&p, &Matrix::zeros(2, 4), Mode::Eval, &RngState::new(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn chain_validation() {
        let a = LayerSpec::new(3, 4, Activation::Relu);
        let b = LayerSpec::new(5, 2, Activation::Linear);
        assert!(NetworkParams::new(vec![a, b], &RngState::new(0)).is_err());
        let c = LayerSpec::new(4, 2, Activation::Relu);
        assert!(NetworkParams::new(vec![a, c], &RngState::new(0)).is_err());
        let mut d = LayerSpec::new(4, 2, Activation::Linear);
        d.dropout_keep = 0.0;
        assert!(NetworkParams::new(vec![a, d], &RngState::new(0)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_leaves_only_decay() {
        let mut p = tiny(0.8, 2);
        for l in &mut p.layers {
            l.spec.weight_decay = 0.01;
        }
        let x = random_batch(4, 3, 1);
        let t = forward(&p, &x, Mode::Train, &RngState::new(3)).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(4, 4)).unwrap();
        for ((gw, gb), l) in g.layers.iter().zip(&p.layers) {
            for (a, w) in gw.as_slice().iter().zip(l.weights.as_slice()) {
                assert!((a - 0.01 * w).abs() < 1e-15);
            }
            assert!(gb.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut p = tiny(1.0, 2);
        let x = random_batch(4, 3, 1);
        let t = forward(&p, &x, Mode::Train, &RngState::new(3)).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(4, 4)).unwrap();
        let mut opt = OptimizerState::new(&p, 0.1, Schedule::Constant, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert!(matches!(
            backward(&p, &t, &Matrix::zeros(4, 4)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let p = tiny(1.0, 6);
        let x = random_batch(4, 3, 7);
        let labels = vec![0, 1, 2, 3];
        let obj = SmoothedCrossEntropy::new(SmoothingSpec::new(0.1, 4).unwrap(), 1.0);
        let grad = |x: &Matrix, labels: &[usize]| {
            let t = forward(&p, x, Mode::Train, &RngState::new(0)).unwrap();
            let ids: Vec<usize> = (0..labels.len()).collect();
            let (_, d) = obj.loss_and_grad(&t.logits, labels, &ids).unwrap();
            backward(&p, &t, &d).unwrap()
        };
        let g1 = grad(&x, &labels);
        let x2 = x.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let l2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let g2 = grad(&x2, &l2);
        for ((a, ab), (b, bb)) in g1.layers.iter().zip(&g2.layers) {
            for (u, v) in a.as_slice().iter().zip(b.as_slice()).chain(ab.iter().zip(bb)) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    fn uniform_grads(p: &NetworkParams, value: f64) -> Gradients {
        Gradients {
            layers: p
                .layers
                .iter()
                .map(|l| {
                    let mut w = Matrix::zeros(l.weights.rows(), l.weights.cols());
                    w.map_inplace(|_| value);
                    (w, vec![value; l.biases.len()])
                })
                .collect(),
        }
    }

    #[test]
    fn zero_mix_is_plain_sgd() {
        let mut p = tiny(1.0, 1);
        let before = p.clone();
        let g = uniform_grads(&p, 2.0);
        let mut opt = OptimizerState::new(&p, 0.5, Schedule::Constant, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        for (a, b) in p.layers.iter().zip(&before.layers) {
            for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                assert!((x - (y - 1.0)).abs() < 1e-15);
            }
        }
        assert_eq!(p.step, 1);
    }

    #[test]
    fn smoothed_gradient_converges_to_constant() {
        let mut p = tiny(1.0, 1);
        let g = uniform_grads(&p, 3.0);
        let mut opt = OptimizerState::new(&p, 0.0, Schedule::Constant, 0.9).unwrap();
        for _ in 0..400 {
            sgd_step(&mut p, &g, &mut opt).unwrap();
        }
        for (w, b) in &opt.smoothed {
            assert!(w.as_slice().iter().chain(b).all(|&v| (v - 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn linear_schedule_reaches_zero() {
        let s = Schedule::LinearToZero { total_steps: 100 };
        assert_eq!(s.multiplier(0), 1.0);
        assert_eq!(s.multiplier(50), 0.5);
        assert_eq!(s.multiplier(100), 0.0);
        assert_eq!(s.multiplier(150), 0.0);
        let d = Schedule::StepDecay { factor: 0.1, every: 10 };
        assert!((d.multiplier(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = tiny(1.0, 1);
        let mut g = uniform_grads(&p, 1.0);
        g.layers[1].1[0] = f64::NAN;
        let mut opt = OptimizerState::new(&p, 0.1, Schedule::Constant, 0.9).unwrap();
        opt.step = 17;
        match sgd_step(&mut p, &g, &mut opt) {
            Err(Error::Divergence { step }) => assert_eq!(step, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separable_clusters_train_quickly() {
        let ds = synth_clusters(2, 100, 2, 10.0, 0.1, &RngState::new(1)).unwrap();
        let p = NetworkParams::mlp(2, &[], 2, &MlpOptions::default(), &RngState::new(2)).unwrap();
        let obj = SmoothedCrossEntropy::new(SmoothingSpec::new(0.0, 2).unwrap(), 1.0);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            base_lr: 0.1,
            ..TrainConfig::default()
        };
        let (p, _) = train(p, &ds, None, &obj, &cfg, &RngState::new(3)).unwrap();
        assert!(evaluate(&p, &ds).unwrap().accuracy >= 0.99);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = synth_clusters(3, 20, 3, 2.0, 0.5, &RngState::new(1)).unwrap();
        let p = NetworkParams::mlp(3, &[8], 3, &MlpOptions::default(), &RngState::new(2)).unwrap();
        let obj = SmoothedCrossEntropy::new(SmoothingSpec::new(0.1, 3).unwrap(), 1.0);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        let (q, _) = train(p.clone(), &ds, None, &obj, &cfg, &RngState::new(3)).unwrap();
        for (a, b) in p.layers.iter().zip(&q.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.biases, b.biases);
        }
    }

    #[test]
    fn perfect_and_uniform_predictors() {
        let mut logits = Matrix::zeros(3, 3);
        for i in 0..3 {
            logits.set(i, i, 800.0);
        }
        let (acc, nll) = accuracy_and_nll(&logits, &[0, 1, 2]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(nll < 1e-300);
        let (_, nll) = accuracy_and_nll(&Matrix::zeros(4, 5), &[0, 1, 2, 3]).unwrap();
        assert!((nll - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn accuracy_matches_per_example_loop() {
        let logits = random_batch(200, 7, 31);
        let mut r = RngState::new(32).rng();
        let labels: Vec<usize> = (0..200).map(|_| r.gen_range(0..7)).collect();
        let mut correct = 0;
        let mut nll = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for k in 1..7 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == l {
                correct += 1;
            }
            let mut t = vec![0.0; 7];
            t[l] = 1.0;
            nll += cross_entropy(&t, row).unwrap();
        }
        let (acc, got_nll) = accuracy_and_nll(&logits, &labels).unwrap();
        assert_eq!(acc, correct as f64 / 200.0);
        assert!((got_nll - nll / 200.0).abs() < 1e-12);
    }

    #[test]
    fn bias_shift_keeps_predictions() {
        let p = tiny(1.0, 12);
        let x = random_batch(30, 3, 13);
        let mut q = p.clone();
        q.last_layer_mut().biases.iter_mut().for_each(|b| *b += 7.5);
        assert_eq!(
            predict_logits(&p, &x).unwrap().argmax_rows(),
            predict_logits(&q, &x).unwrap().argmax_rows()
        );
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut p = tiny(0.7, 4);
        p.step = 12345;
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q), bytes);
        let x = random_batch(5, 3, 1);
        assert_eq!(predict_logits(&p, &x).unwrap(), predict_logits(&q, &x).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let bytes = encode_checkpoint(&tiny(1.0, 4));
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        match decode_checkpoint(&wrong_version) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "checkpoint.version"),
            other => panic!("unexpected {other:?}"),
        }
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }
}

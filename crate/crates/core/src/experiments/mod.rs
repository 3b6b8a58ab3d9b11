//! Seeded experiment runners behind the command-line interface.
//!
//! Each runner validates the whole configuration, locks the output
//! directory, writes its artifacts under `seed-<s>/` subdirectories (plus
//! summaries at the top level) and finishes with `manifest.txt`.

pub mod config;
pub mod manifest;
pub mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{DataSource, ExperimentConfig, ExperimentKind, NetConfig, TrainSection};
pub use manifest::{RunContext, RunManifest};
pub use svg::{emit_svg_lines, emit_svg_scatter, SvgStyle};

use crate::calibration::{ece_report, fit_temperature, EceReport};
use crate::dataset::{self, AugmentationSpec, Dataset, GlyphSpec};
use crate::error::{Error, Result};
use crate::losses::{gamma_index, DistillSpec, Distillation, Objective, SmoothedCrossEntropy, SmoothingSpec};
use crate::mi::{mi_track, series_to_csv, MiConfig, MiEstimate};
use crate::network::{
    evaluate, load_checkpoint, predict_logits, save_checkpoint, train, MlpOptions, NetworkParams,
    TrainConfig, TrainLog,
};
use crate::numerics::{purpose, softmax_rows, RngState};
use crate::projection::{
    cluster_tightness, extract_templates, mean_tightness, plane_basis, points_to_csv, project, Split,
};

/// Top-level stream tags under a run seed.
mod tag {
    pub const DATA: u64 = 101;
    pub const SPLIT: u64 = 102;
    pub const TEACHER: u64 = 103;
    pub const STUDENT: u64 = 104;
    pub const MI: u64 = 105;
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Builds the train/validation/test splits for one seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let d = &cfg.data;
    let root = RngState::new(seed);
    let (pool, test) = match d.source {
        DataSource::Mnist => {
            let dir = cfg.mnist_dir()?;
            let train = dataset::load_mnist(&dir, true)?;
            let mut test = dataset::load_mnist(&dir, false)?;
            if d.test_size > 0 {
                if d.test_size > test.len() {
                    return Err(Error::config("data.test_size", format!("only {} test images", test.len())));
                }
                test = test.subset(&(0..d.test_size).collect::<Vec<_>>());
            }
            (train, Some(test))
        }
        DataSource::SynthClusters => (
            dataset::synth_clusters(d.classes, d.per_class, d.dim, d.separation, d.noise, &root.split(&[tag::DATA]))?,
            None,
        ),
        DataSource::SynthGlyphs => {
            let spec = GlyphSpec {
                classes: d.classes,
                per_class: d.per_class,
                side: d.side,
                strokes: d.strokes,
                jitter: d.jitter,
                pixel_noise: d.pixel_noise,
            };
            (dataset::synth_glyphs(&spec, &root.split(&[tag::DATA]))?, None)
        }
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut root.split(&[tag::SPLIT, purpose::SPLIT]).rng());
    }
    let (val_idx, rest) = order.split_at(d.validation_size.min(order.len()));
    let (test, rest) = match test {
        Some(t) => (t, rest),
        None => {
            let (t, r) = rest.split_at(d.test_size.min(rest.len()));
            (pool.subset(t), r)
        }
    };
    let train_idx = if d.train_size > 0 {
        if d.train_size > rest.len() {
            return Err(Error::config(
                "data.train_size",
                format!("only {} examples remain for training", rest.len()),
            ));
        }
        &rest[..d.train_size]
    } else {
        rest
    };
    if train_idx.is_empty() {
        return Err(Error::config("data.train_size", "no training examples left"));
    }
    Ok(Splits {
        train: pool.subset(train_idx),
        validation: pool.subset(val_idx),
        test,
    })
}

/// Network of the given shape; smoothed runs may drop dropout.
pub fn build_network(net: &NetConfig, alpha: f64, input_dim: usize, classes: usize, rng: &RngState) -> Result<NetworkParams> {
    let no_dropout = alpha > 0.0 && net.smoothing_disables_dropout;
    let opts = MlpOptions {
        input_keep: if no_dropout { 1.0 } else { net.input_keep },
        hidden_keep: if no_dropout { 1.0 } else { net.hidden_keep },
        init_std: net.init_std,
        last_layer_lr_scale: net.last_layer_lr_scale,
        weight_decay: net.weight_decay,
    };
    NetworkParams::mlp(input_dim, &net.hidden, classes, &opts, rng)
}

pub fn train_config(t: &TrainSection, n_train: usize, checkpoint_every: u64, dir: Option<PathBuf>) -> TrainConfig {
    let steps_per_epoch = n_train.div_ceil(t.batch_size) as u64;
    TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        base_lr: t.lr,
        schedule: t.schedule_for(steps_per_epoch),
        momentum_mix: t.momentum_mix,
        augmentation: (t.max_shift > 0).then(|| AugmentationSpec::shifts(t.max_shift)),
        checkpoint_every: (checkpoint_every > 0).then_some(checkpoint_every),
        checkpoint_dir: if checkpoint_every > 0 { dir } else { None },
    }
}

struct Trained {
    net: NetworkParams,
    log: TrainLog,
}

/// Trains a `[teacher]`-shaped network on smoothed labels.
fn train_teacher(
    cfg: &ExperimentConfig,
    splits: &Splits,
    alpha: f64,
    seed: u64,
    checkpoint_every: u64,
    checkpoint_dir: Option<PathBuf>,
) -> Result<Trained> {
    let rng = RngState::new(seed).split(&[tag::TEACHER]);
    let k = cfg.data.classes;
    let net = build_network(&cfg.teacher, alpha, splits.train.dim(), k, &rng)?;
    let obj = SmoothedCrossEntropy::new(SmoothingSpec::new(alpha, k)?, cfg.train.loss_multiplier);
    let tc = train_config(&cfg.train, splits.train.len(), checkpoint_every, checkpoint_dir);
    log::info!("seed {seed}: training teacher-shaped network with alpha {alpha}");
    let (net, log) = train(net, &splits.train, Some(&splits.validation), &obj, &tc, &rng)?;
    Ok(Trained { net, log })
}

fn train_student(cfg: &ExperimentConfig, splits: &Splits, objective: &dyn Objective, seed: u64) -> Result<NetworkParams> {
    let rng = RngState::new(seed).split(&[tag::STUDENT]);
    let net = build_network(&cfg.student, 0.0, splits.train.dim(), cfg.data.classes, &rng)?;
    let tc = train_config(&cfg.student_train, splits.train.len(), 0, None);
    let (net, _) = train(net, &splits.train, None, objective, &tc, &rng)?;
    Ok(net)
}

fn metrics_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,train_acc,val_acc,val_nll\n");
    for m in &log.epochs {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.train_acc, opt(m.val_acc), opt(m.val_nll));
    }
    out
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed-{seed}"))
}

fn write_svg(ctx: &mut RunContext, rel: PathBuf, svg: Result<String>) -> Result<()> {
    ctx.write(rel, &svg?).map(|_| ())
}

/// Checks everything that can be checked before any training starts.
pub fn preflight(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.data.source == DataSource::Mnist {
        let dir = cfg.mnist_dir()?;
        for name in [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ] {
            if !dir.join(name).is_file() {
                return Err(Error::config(
                    "data.mnist_dir",
                    format!("{} not found", dir.join(name).display()),
                ));
            }
        }
    }
    let i = &cfg.inputs;
    for &seed in &cfg.seeds {
        for (field, value, is_dir) in [
            ("inputs.hard_checkpoint", &i.hard_checkpoint, false),
            ("inputs.ls_checkpoint", &i.ls_checkpoint, false),
            ("inputs.hard_series", &i.hard_series, true),
            ("inputs.ls_series", &i.ls_series, true),
            ("inputs.teacher_dir", &i.teacher_dir, true),
        ] {
            if let Some(t) = value {
                let p = config::expand_seed(t, seed);
                let ok = if is_dir { p.is_dir() } else { p.is_file() };
                if !ok {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(t) = &i.teacher_dir {
            let dir = config::expand_seed(t, seed);
            for &a in &cfg.distill.teacher_alphas {
                let p = dir.join(teacher_file(a));
                if !p.is_file() {
                    return Err(Error::config(
                        "inputs.teacher_dir",
                        format!("missing teacher {}", p.display()),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Runs whatever `cfg.kind` names.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    preflight(cfg)?;
    let text = cfg.to_text();
    let mut ctx = RunContext::open(&cfg.output, cfg.kind.as_str(), &text, &cfg.seeds)?;
    ctx.write("config.txt", &text)?;
    match cfg.kind {
        ExperimentKind::Train => cmd_train(cfg, &mut ctx)?,
        ExperimentKind::Calibrate => cmd_calibrate(cfg, &mut ctx)?,
        ExperimentKind::Project => cmd_project(cfg, &mut ctx)?,
        ExperimentKind::DistillSweep => cmd_distill_sweep(cfg, &mut ctx)?,
        ExperimentKind::MiTrack => cmd_mi_track(cfg, &mut ctx)?,
    }
    ctx.finish()
}

pub fn cmd_train(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let alpha = cfg.smoothing.alpha;
    let mut summary = String::from("seed,alpha,test_acc,test_error,test_nll\n");
    for &seed in &cfg.seeds {
        let sd = seed_dir(seed);
        let splits = load_data(cfg, seed)?;
        let ckdir = ctx.path(sd.join("checkpoints"));
        let t = train_teacher(cfg, &splits, alpha, seed, cfg.train.checkpoint_every, Some(ckdir))?;
        for (_, p) in &t.log.checkpoints {
            ctx.record(p)?;
        }
        let model = ctx.path(sd.join("model.slck"));
        save_checkpoint(&t.net, &model)?;
        ctx.record(&model)?;
        let csv = metrics_csv(&t.log);
        ctx.write(sd.join("metrics.csv"), &csv)?;
        write_svg(
            ctx,
            sd.join("metrics.svg"),
            emit_svg_lines(&csv, &SvgStyle::new("training accuracy", "epoch", "train_acc", None)),
        )?;
        let e = evaluate(&t.net, &splits.test)?;
        let _ = writeln!(summary, "{seed},{alpha},{},{},{}", e.accuracy, 1.0 - e.accuracy, e.nll);
        ctx.metric(format!("seed-{seed}.test_acc"), e.accuracy);
        ctx.metric(format!("seed-{seed}.test_error"), 1.0 - e.accuracy);
        ctx.metric(format!("seed-{seed}.test_nll"), e.nll);
        log::info!("seed {seed}: test error {:.4}", 1.0 - e.accuracy);
    }
    ctx.write("train_summary.csv", &summary)?;
    Ok(())
}

/// Loads `template` for `seed` or trains and saves the model.
fn hard_or_ls_model(
    cfg: &ExperimentConfig,
    ctx: &mut RunContext,
    splits: &Splits,
    seed: u64,
    alpha: f64,
    template: &Option<String>,
    name: &str,
) -> Result<NetworkParams> {
    if let Some(t) = template {
        return load_checkpoint(&config::expand_seed(t, seed));
    }
    let t = train_teacher(cfg, splits, alpha, seed, 0, None)?;
    let sd = seed_dir(seed);
    let path = ctx.path(sd.join(format!("{name}.slck")));
    save_checkpoint(&t.net, &path)?;
    ctx.record(&path)?;
    ctx.write(sd.join(format!("{name}_metrics.csv")), &metrics_csv(&t.log))?;
    Ok(t.net)
}

fn check_model(net: &NetworkParams, splits: &Splits, field: &str) -> Result<()> {
    if net.input_dim() != splits.train.dim() || net.num_classes() != splits.train.num_classes {
        return Err(Error::config(
            field,
            format!(
                "checkpoint maps {} inputs to {} classes; data has {} and {}",
                net.input_dim(),
                net.num_classes(),
                splits.train.dim(),
                splits.train.num_classes
            ),
        ));
    }
    Ok(())
}

fn reliability_svg(report: &EceReport, title: &str) -> Result<String> {
    let mut csv = String::from("confidence,accuracy\n");
    for b in report.bins.bins.iter().filter(|b| b.count > 0) {
        let _ = writeln!(csv, "{},{}", b.confidence, b.accuracy);
    }
    emit_svg_lines(&csv, &SvgStyle::new(title, "confidence", "accuracy", None))
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let mut summary = String::from("seed,model,temperature_kind,temperature,ece,accuracy,nll\n");
    for &seed in &cfg.seeds {
        let sd = seed_dir(seed);
        let splits = load_data(cfg, seed)?;
        let hard = hard_or_ls_model(cfg, ctx, &splits, seed, 0.0, &cfg.inputs.hard_checkpoint, "hard")?;
        check_model(&hard, &splits, "inputs.hard_checkpoint")?;
        let ls = hard_or_ls_model(
            cfg,
            ctx,
            &splits,
            seed,
            cfg.smoothing.compare_alpha,
            &cfg.inputs.ls_checkpoint,
            "ls",
        )?;
        check_model(&ls, &splits, "inputs.ls_checkpoint")?;
        for (name, net) in [("hard", &hard), ("ls", &ls)] {
            let val_logits = predict_logits(net, &splits.validation.images)?;
            let fit = fit_temperature(&val_logits, &splits.validation.labels)?;
            let test = evaluate(net, &splits.test)?;
            for (kind, t) in [("t1", 1.0), ("tstar", fit.temperature)] {
                let report = ece_report(&test.logits, &splits.test.labels, t, cfg.n_bins)?;
                let stem = format!("reliability_{name}_{kind}");
                ctx.write(sd.join(format!("{stem}.csv")), &report.bins.to_csv())?;
                let title = format!("{name} T={t:.3} ECE={:.4}", report.ece);
                write_svg(ctx, sd.join(format!("{stem}.svg")), reliability_svg(&report, &title))?;
                let nll = crate::calibration::nll_at_temperature(&test.logits, &splits.test.labels, t);
                let _ = writeln!(summary, "{seed},{name},{kind},{t},{},{},{nll}", report.ece, test.accuracy);
                ctx.metric(format!("seed-{seed}.ece_{name}_{kind}"), report.ece);
            }
            ctx.metric(format!("seed-{seed}.t_star_{name}"), fit.temperature);
            ctx.metric(format!("seed-{seed}.test_acc_{name}"), test.accuracy);
        }
    }
    ctx.write("ece_summary.csv", &summary)?;
    Ok(())
}

pub fn cmd_project(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let classes = cfg.project.classes;
    let mut summary = String::from("seed,model,split,class_id,count,mean_distance\n");
    for &seed in &cfg.seeds {
        let sd = seed_dir(seed);
        let splits = load_data(cfg, seed)?;
        let hard = hard_or_ls_model(cfg, ctx, &splits, seed, 0.0, &cfg.inputs.hard_checkpoint, "hard")?;
        check_model(&hard, &splits, "inputs.hard_checkpoint")?;
        let ls = hard_or_ls_model(
            cfg,
            ctx,
            &splits,
            seed,
            cfg.smoothing.compare_alpha,
            &cfg.inputs.ls_checkpoint,
            "ls",
        )?;
        check_model(&ls, &splits, "inputs.ls_checkpoint")?;
        let mut train_tightness = [0.0; 2];
        for (mi, (name, net)) in [("hard", &hard), ("ls", &ls)].into_iter().enumerate() {
            let templates = extract_templates(net, classes)?;
            let basis = plane_basis(&templates)?;
            for (split, ds) in [(Split::Train, &splits.train), (Split::Validation, &splits.validation)] {
                let idx = dataset::take_per_class(ds, &classes, cfg.project.per_class).map_err(|e| match e {
                    Error::Config { reason, .. } => {
                        Error::config("project.per_class", format!("{} split: {reason}", split.as_str()))
                    }
                    other => other,
                })?;
                let sub = ds.subset(&idx);
                let e = evaluate(net, &sub)?;
                let points = project(&e.penultimate, &sub.labels, split, &basis)?;
                let stats = cluster_tightness(&points);
                let mean = mean_tightness(&stats);
                let mut csv = points_to_csv(&points, Some(&templates));
                for s in &stats {
                    let _ = writeln!(
                        csv,
                        "# tightness class={} count={} mean_distance={}",
                        s.class_id, s.count, s.mean_distance
                    );
                    let _ = writeln!(
                        summary,
                        "{seed},{name},{},{},{},{}",
                        split.as_str(),
                        s.class_id,
                        s.count,
                        s.mean_distance
                    );
                }
                let _ = writeln!(csv, "# tightness mean={mean}");
                let stem = format!("projection_{name}_{}", split.as_str());
                ctx.write(sd.join(format!("{stem}.csv")), &csv)?;
                let title = format!("{name} {} classes {:?}", split.as_str(), classes);
                write_svg(
                    ctx,
                    sd.join(format!("{stem}.svg")),
                    emit_svg_scatter(&csv, &SvgStyle::new(&title, "p1", "p2", Some("class_id"))),
                )?;
                ctx.metric(format!("seed-{seed}.tightness_{name}_{}", split.as_str()), mean);
                if split == Split::Train {
                    train_tightness[mi] = mean;
                }
            }
        }
        ctx.metric(
            format!("seed-{seed}.tightness_ratio_train"),
            train_tightness[1] / train_tightness[0],
        );
    }
    ctx.write("tightness.csv", &summary)?;
    Ok(())
}

/// `ckpt-*.slck` files in a directory, by name.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "slck"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn cmd_mi_track(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let mut combined = String::from("seed,model,step,mi_value,n_examples,sigma_sq\n");
    for &seed in &cfg.seeds {
        let sd = seed_dir(seed);
        let splits = load_data(cfg, seed)?;
        let m = &cfg.mi;
        let examples = dataset::take_per_class(&splits.train, &[m.class_a, m.class_b], m.per_class)
            .map_err(|e| match e {
                Error::Config { reason, .. } => Error::config("mi.per_class", reason),
                other => other,
            })?;
        let mi_cfg = MiConfig {
            class_a: m.class_a,
            class_b: m.class_b,
            example_indices: examples,
            mc_samples: m.mc_samples,
            aug: AugmentationSpec::shifts(cfg.train.max_shift),
            variance_floor: m.variance_floor,
        };
        let rng = RngState::new(seed).split(&[tag::MI]);
        let mut lines = String::from("model,step,mi_value\n");
        for (name, alpha, input) in [
            ("hard", 0.0, &cfg.inputs.hard_series),
            ("ls", cfg.smoothing.compare_alpha, &cfg.inputs.ls_series),
        ] {
            let paths = match input {
                Some(t) => list_checkpoints(&config::expand_seed(t, seed))?,
                None => {
                    let dir = ctx.path(sd.join(format!("{name}-checkpoints")));
                    let t = train_teacher(cfg, &splits, alpha, seed, m.every, Some(dir))?;
                    for (_, p) in &t.log.checkpoints {
                        ctx.record(p)?;
                    }
                    ctx.write(sd.join(format!("{name}_metrics.csv")), &metrics_csv(&t.log))?;
                    t.log.checkpoints.into_iter().map(|(_, p)| p).collect()
                }
            };
            if paths.is_empty() {
                return Err(Error::config("inputs.hard_series", format!("no checkpoints for {name}")));
            }
            let series = mi_track(&paths, &splits.train, &mi_cfg, &rng)?;
            ctx.write(sd.join(format!("mi_{name}.csv")), &series_to_csv(&series))?;
            for (step, e) in &series {
                let _ = writeln!(combined, "{seed},{name},{step},{},{},{}", e.value, e.n, e.sigma_sq);
                let _ = writeln!(lines, "{name},{step},{}", e.value);
            }
            record_mi_metrics(ctx, seed, name, &series);
        }
        write_svg(
            ctx,
            sd.join("mi.svg"),
            emit_svg_lines(&lines, &SvgStyle::new("estimated mutual information", "step", "mi_value", Some("model"))),
        )?;
    }
    ctx.write("mi.csv", &combined)?;
    Ok(())
}

fn record_mi_metrics(ctx: &mut RunContext, seed: u64, name: &str, series: &[(u64, MiEstimate)]) {
    if let (Some(first), Some(last)) = (series.first(), series.last()) {
        let peak = series.iter().map(|(_, e)| e.value).fold(f64::NEG_INFINITY, f64::max);
        ctx.metric(format!("seed-{seed}.mi_{name}_first"), first.1.value);
        ctx.metric(format!("seed-{seed}.mi_{name}_peak"), peak);
        ctx.metric(format!("seed-{seed}.mi_{name}_final"), last.1.value);
    }
}

pub fn teacher_file(alpha: f64) -> String {
    format!("teacher-alpha-{alpha}.slck")
}

/// One point of the distillation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scenario: u8,
    pub seed: u64,
    pub alpha: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub accuracy: f64,
}

pub const SWEEP_HEADER: &str = "scenario,seed,alpha,temperature,gamma,accuracy,error";

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenario,
            self.seed,
            self.alpha,
            self.temperature,
            self.gamma,
            self.accuracy,
            1.0 - self.accuracy
        )
    }
}

pub fn cmd_distill_sweep(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let d = &cfg.distill;
    let k = cfg.data.classes;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sd = seed_dir(seed);
        let splits = load_data(cfg, seed)?;
        let labels = &splits.train.labels;

        // Scenario 1: teachers across α, γ = α.
        let mut teachers = Vec::new();
        for &alpha in &d.teacher_alphas {
            let net = match &cfg.inputs.teacher_dir {
                Some(t) => {
                    let net = load_checkpoint(&config::expand_seed(t, seed).join(teacher_file(alpha)))?;
                    check_model(&net, &splits, "inputs.teacher_dir")?;
                    net
                }
                None => {
                    let t = train_teacher(cfg, &splits, alpha, seed, 0, None)?;
                    let path = ctx.path(sd.join("teachers").join(teacher_file(alpha)));
                    save_checkpoint(&t.net, &path)?;
                    ctx.record(&path)?;
                    t.net
                }
            };
            let acc = evaluate(&net, &splits.test)?.accuracy;
            rows.push(SweepRow { scenario: 1, seed, alpha, temperature: 1.0, gamma: alpha, accuracy: acc });
            let train_logits = predict_logits(&net, &splits.train.images)?;
            teachers.push((alpha, train_logits));
        }

        // Scenario 2: students on smoothed labels, γ = α.
        for &alpha in &d.student_alphas {
            let obj = SmoothedCrossEntropy::new(SmoothingSpec::new(alpha, k)?, cfg.student_train.loss_multiplier);
            let net = train_student(cfg, &splits, &obj, seed)?;
            let acc = evaluate(&net, &splits.test)?.accuracy;
            rows.push(SweepRow { scenario: 2, seed, alpha, temperature: 1.0, gamma: alpha, accuracy: acc });
        }

        let distill = |teacher_logits: &crate::numerics::Matrix, t: f64| -> Result<(f64, f64)> {
            let gamma = gamma_index(&softmax_rows(teacher_logits, t)?, labels, k)?;
            let obj = Distillation {
                teacher_logits: teacher_logits.clone(),
                spec: DistillSpec::new(d.beta, t, d.mode)?,
                smoothing: SmoothingSpec::hard(k)?,
                multiplier: cfg.student_train.loss_multiplier,
            };
            let net = train_student(cfg, &splits, &obj, seed)?;
            Ok((gamma, evaluate(&net, &splits.test)?.accuracy))
        };

        // Scenario 3: hard teacher across temperatures.
        if !d.temperatures.is_empty() {
            let hard = &teachers
                .iter()
                .find(|(a, _)| *a == 0.0)
                .ok_or_else(|| Error::config("distill.teacher_alphas", "no hard teacher"))?
                .1;
            for &t in &d.temperatures {
                let (gamma, acc) = distill(hard, t)?;
                rows.push(SweepRow { scenario: 3, seed, alpha: 0.0, temperature: t, gamma, accuracy: acc });
            }
        }

        // Scenario 4: every teacher at the fixed temperature.
        for (alpha, logits) in &teachers {
            let (gamma, acc) = distill(logits, d.ls_temperature)?;
            rows.push(SweepRow {
                scenario: 4,
                seed,
                alpha: *alpha,
                temperature: d.ls_temperature,
                gamma,
                accuracy: acc,
            });
        }
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
        ctx.metric(
            format!("seed-{}.s{}.alpha{}.t{}.accuracy", r.seed, r.scenario, r.alpha, r.temperature),
            r.accuracy,
        );
    }
    ctx.write("distill.csv", &csv)?;
    write_svg(
        ctx,
        PathBuf::from("distill.svg"),
        emit_svg_lines(&csv, &SvgStyle::new("student accuracy against gamma", "gamma", "accuracy", Some("scenario"))),
    )?;
    Ok(())
}

/// Parses `distill.csv` back into rows.
pub fn read_sweep(csv_text: &str) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("distill.row[{}]", i + 1), e.to_string()))?;
        let f = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("distill.row[{}]", i + 1), format!("column {j}")))
        };
        out.push(SweepRow {
            scenario: f(0)? as u8,
            seed: rec
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("distill.row[{}]", i + 1), "seed"))?,
            alpha: f(2)?,
            temperature: f(3)?,
            gamma: f(4)?,
            accuracy: f(5)?,
        });
    }
    Ok(out)
}

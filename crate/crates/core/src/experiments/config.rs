//! Plain-text experiment configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! list_key = 1, 2, 3
//! ```
//!
//! Every key has a default, unknown sections and keys are rejected, and
//! [`ExperimentConfig::to_text`] writes every field in a fixed order so that
//! parse → serialize → parse is the identity.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::DistillMode;
use crate::network::Schedule;

pub const DATA_DIR_ENV: &str = "SMOOTHLAB_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Calibrate,
    Project,
    DistillSweep,
    MiTrack,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Calibrate => "calibrate",
            ExperimentKind::Project => "project",
            ExperimentKind::DistillSweep => "distill_sweep",
            ExperimentKind::MiTrack => "mi_track",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => ExperimentKind::Train,
            "calibrate" => ExperimentKind::Calibrate,
            "project" => ExperimentKind::Project,
            "distill_sweep" | "distill-sweep" => ExperimentKind::DistillSweep,
            "mi_track" | "mi-track" => ExperimentKind::MiTrack,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Mnist,
    SynthClusters,
    SynthGlyphs,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Mnist => "mnist",
            DataSource::SynthClusters => "synth_clusters",
            DataSource::SynthGlyphs => "synth_glyphs",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mnist" => DataSource::Mnist,
            "synth_clusters" => DataSource::SynthClusters,
            "synth_glyphs" => DataSource::SynthGlyphs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Falls back to `SMOOTHLAB_DATA_DIR`.
    pub mnist_dir: Option<PathBuf>,
    pub classes: usize,
    /// Synthetic pool size per class.
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub side: usize,
    pub strokes: usize,
    pub jitter: f64,
    pub pixel_noise: f64,
    /// 0 keeps every remaining training example.
    pub train_size: usize,
    pub validation_size: usize,
    /// Synthetic: carved from the pool. MNIST: prefix of the test file,
    /// 0 meaning all of it.
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::SynthGlyphs,
            mnist_dir: None,
            classes: 10,
            per_class: 300,
            dim: 20,
            separation: 3.0,
            noise: 1.0,
            side: 14,
            strokes: 4,
            jitter: 1.0,
            pixel_noise: 0.15,
            train_size: 0,
            validation_size: 500,
            test_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub input_keep: f64,
    pub hidden_keep: f64,
    pub init_std: f64,
    pub last_layer_lr_scale: f64,
    pub weight_decay: f64,
    /// Runs with α > 0 train without dropout.
    pub smoothing_disables_dropout: bool,
}

impl NetConfig {
    fn teacher() -> Self {
        NetConfig {
            hidden: vec![1200, 1200],
            input_keep: 0.8,
            hidden_keep: 0.5,
            init_std: 0.03,
            last_layer_lr_scale: 0.1,
            weight_decay: 0.0,
            smoothing_disables_dropout: true,
        }
    }

    fn student() -> Self {
        NetConfig {
            hidden: vec![800, 800],
            input_keep: 1.0,
            hidden_keep: 1.0,
            init_std: 0.03,
            last_layer_lr_scale: 0.1,
            weight_decay: 0.0,
            smoothing_disables_dropout: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    StepDecay,
    LinearToZero,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::StepDecay => "step_decay",
            ScheduleKind::LinearToZero => "linear_to_zero",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "constant" => ScheduleKind::Constant,
            "step_decay" => ScheduleKind::StepDecay,
            "linear_to_zero" => ScheduleKind::LinearToZero,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    /// Linear schedule: epoch at which the rate reaches zero (0 = `epochs`).
    pub decay_epochs: usize,
    pub decay_factor: f64,
    /// Step schedule: epochs between decays.
    pub decay_every: usize,
    pub momentum_mix: f64,
    pub loss_multiplier: f64,
    /// Random shifts of up to this many pixels; 0 disables augmentation.
    pub max_shift: usize,
    /// Checkpoint period in steps; 0 saves only the final model.
    pub checkpoint_every: u64,
}

impl TrainSection {
    fn teacher() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 128,
            lr: 1.0,
            schedule: ScheduleKind::LinearToZero,
            decay_epochs: 0,
            decay_factor: 0.1,
            decay_every: 30,
            momentum_mix: 0.9,
            loss_multiplier: 1.0,
            max_shift: 2,
            checkpoint_every: 0,
        }
    }

    fn student() -> Self {
        TrainSection {
            max_shift: 0,
            ..TrainSection::teacher()
        }
    }

    /// Schedule in optimizer steps for `steps_per_epoch`.
    pub fn schedule_for(&self, steps_per_epoch: u64) -> Schedule {
        match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::StepDecay => Schedule::StepDecay {
                factor: self.decay_factor,
                every: (self.decay_every as u64 * steps_per_epoch).max(1),
            },
            ScheduleKind::LinearToZero => {
                let epochs = if self.decay_epochs == 0 { self.epochs } else { self.decay_epochs };
                Schedule::LinearToZero {
                    total_steps: epochs as u64 * steps_per_epoch,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSection {
    /// α of the `train` command.
    pub alpha: f64,
    /// α of the smoothed model that calibrate, project and mi_track compare
    /// against the hard-target one.
    pub compare_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSection {
    pub beta: f64,
    pub mode: DistillMode,
    /// Scenario 3: hard teacher at each temperature.
    pub temperatures: Vec<f64>,
    /// Scenario 1 teachers; scenario 4 distils from each of them.
    pub teacher_alphas: Vec<f64>,
    /// Scenario 2: students trained on smoothed labels without a teacher.
    pub student_alphas: Vec<f64>,
    /// Temperature used with the smoothed teachers of scenario 4.
    pub ls_temperature: f64,
}

fn alpha_grid() -> Vec<f64> {
    vec![0.0, 0.15, 0.3, 0.45, 0.6, 0.75]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectSection {
    pub classes: [usize; 3],
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiSection {
    pub class_a: usize,
    pub class_b: usize,
    pub per_class: usize,
    pub mc_samples: usize,
    pub every: u64,
    pub variance_floor: f64,
}

/// Pre-existing artifacts; `{seed}` in a value is replaced per seed.
/// Anything left empty is trained in-run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputsSection {
    pub hard_checkpoint: Option<String>,
    pub ls_checkpoint: Option<String>,
    pub hard_series: Option<String>,
    pub ls_series: Option<String>,
    pub teacher_dir: Option<String>,
}

pub fn expand_seed(template: &str, seed: u64) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub data: DataConfig,
    /// The network trained by every command; the sweep's teachers.
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub train: TrainSection,
    pub student_train: TrainSection,
    pub smoothing: SmoothingSection,
    pub distill: DistillSection,
    pub n_bins: usize,
    pub project: ProjectSection,
    pub mi: MiSection,
    pub inputs: InputsSection,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seeds: vec![1],
            output: PathBuf::from("runs/out"),
            data: DataConfig::default(),
            teacher: NetConfig::teacher(),
            student: NetConfig::student(),
            train: TrainSection::teacher(),
            student_train: TrainSection::student(),
            smoothing: SmoothingSection {
                alpha: 0.0,
                compare_alpha: 0.1,
            },
            distill: DistillSection {
                beta: 0.6,
                mode: DistillMode::LogitMatch,
                temperatures: vec![1.0, 2.0, 3.0, 4.0, 8.0, 12.0, 16.0],
                teacher_alphas: alpha_grid(),
                student_alphas: alpha_grid(),
                ls_temperature: 1.0,
            },
            n_bins: 15,
            project: ProjectSection {
                classes: [0, 1, 2],
                per_class: 100,
            },
            mi: MiSection {
                class_a: 0,
                class_b: 1,
                per_class: 300,
                mc_samples: 5,
                every: 4000,
                variance_floor: 1e-12,
            },
            inputs: InputsSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = tokenize(text)?;
        let kind = entries
            .iter()
            .find(|e| e.section == "experiment" && e.key == "kind")
            .ok_or_else(|| Error::config("experiment.kind", "missing"))?;
        let kind = ExperimentKind::parse(&kind.value)
            .ok_or_else(|| Error::config("experiment.kind", format!("unknown kind '{}'", kind.value)))?;
        let mut cfg = ExperimentConfig::new(kind);
        for e in &entries {
            cfg.set(&e.section, &e.key, &e.value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let field = format!("{section}.{key}");
        let f = field.as_str();
        match (section, key) {
            ("experiment", "kind") => {}
            ("experiment", "seeds") => self.seeds = list(f, v)?,
            ("experiment", "output") => self.output = PathBuf::from(v),

            ("data", "source") => {
                self.data.source = DataSource::parse(v)
                    .ok_or_else(|| Error::config(f, format!("unknown source '{v}'")))?
            }
            ("data", "mnist_dir") => self.data.mnist_dir = opt(v).map(PathBuf::from),
            ("data", "classes") => self.data.classes = num(f, v)?,
            ("data", "per_class") => self.data.per_class = num(f, v)?,
            ("data", "dim") => self.data.dim = num(f, v)?,
            ("data", "separation") => self.data.separation = num(f, v)?,
            ("data", "noise") => self.data.noise = num(f, v)?,
            ("data", "side") => self.data.side = num(f, v)?,
            ("data", "strokes") => self.data.strokes = num(f, v)?,
            ("data", "jitter") => self.data.jitter = num(f, v)?,
            ("data", "pixel_noise") => self.data.pixel_noise = num(f, v)?,
            ("data", "train_size") => self.data.train_size = num(f, v)?,
            ("data", "validation_size") => self.data.validation_size = num(f, v)?,
            ("data", "test_size") => self.data.test_size = num(f, v)?,

            ("teacher", _) => set_net(&mut self.teacher, f, key, v)?,
            ("student", _) => set_net(&mut self.student, f, key, v)?,
            ("train", _) => set_train(&mut self.train, f, key, v)?,
            ("student_train", _) => set_train(&mut self.student_train, f, key, v)?,

            ("smoothing", "alpha") => self.smoothing.alpha = num(f, v)?,
            ("smoothing", "compare_alpha") => self.smoothing.compare_alpha = num(f, v)?,

            ("distill", "beta") => self.distill.beta = num(f, v)?,
            ("distill", "mode") => {
                self.distill.mode = match v {
                    "kl" => DistillMode::KlSoftTargets,
                    "logit_match" => DistillMode::LogitMatch,
                    _ => return Err(Error::config(f, format!("unknown mode '{v}'"))),
                }
            }
            ("distill", "temperatures") => self.distill.temperatures = list(f, v)?,
            ("distill", "teacher_alphas") => self.distill.teacher_alphas = list(f, v)?,
            ("distill", "student_alphas") => self.distill.student_alphas = list(f, v)?,
            ("distill", "ls_temperature") => self.distill.ls_temperature = num(f, v)?,

            ("calibrate", "n_bins") => self.n_bins = num(f, v)?,

            ("project", "classes") => {
                let c: Vec<usize> = list(f, v)?;
                self.project.classes = c
                    .try_into()
                    .map_err(|_| Error::config(f, "exactly three classes required"))?;
            }
            ("project", "per_class") => self.project.per_class = num(f, v)?,

            ("mi", "class_a") => self.mi.class_a = num(f, v)?,
            ("mi", "class_b") => self.mi.class_b = num(f, v)?,
            ("mi", "per_class") => self.mi.per_class = num(f, v)?,
            ("mi", "mc_samples") => self.mi.mc_samples = num(f, v)?,
            ("mi", "every") => self.mi.every = num(f, v)?,
            ("mi", "variance_floor") => self.mi.variance_floor = num(f, v)?,

            ("inputs", "hard_checkpoint") => self.inputs.hard_checkpoint = opt(v).map(String::from),
            ("inputs", "ls_checkpoint") => self.inputs.ls_checkpoint = opt(v).map(String::from),
            ("inputs", "hard_series") => self.inputs.hard_series = opt(v).map(String::from),
            ("inputs", "ls_series") => self.inputs.ls_series = opt(v).map(String::from),
            ("inputs", "teacher_dir") => self.inputs.teacher_dir = opt(v).map(String::from),

            _ => return Err(Error::config(f, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let mut w = Writer::default();
        w.section("experiment");
        w.kv("kind", self.kind.as_str());
        w.kv("seeds", join(&self.seeds));
        w.kv("output", self.output.display());

        let d = &self.data;
        w.section("data");
        w.kv("source", d.source.as_str());
        w.kv("mnist_dir", d.mnist_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        w.kv("classes", d.classes);
        w.kv("per_class", d.per_class);
        w.kv("dim", d.dim);
        w.kv("separation", d.separation);
        w.kv("noise", d.noise);
        w.kv("side", d.side);
        w.kv("strokes", d.strokes);
        w.kv("jitter", d.jitter);
        w.kv("pixel_noise", d.pixel_noise);
        w.kv("train_size", d.train_size);
        w.kv("validation_size", d.validation_size);
        w.kv("test_size", d.test_size);

        for (name, n) in [("teacher", &self.teacher), ("student", &self.student)] {
            w.section(name);
            w.kv("hidden", join(&n.hidden));
            w.kv("input_keep", n.input_keep);
            w.kv("hidden_keep", n.hidden_keep);
            w.kv("init_std", n.init_std);
            w.kv("last_layer_lr_scale", n.last_layer_lr_scale);
            w.kv("weight_decay", n.weight_decay);
            w.kv("smoothing_disables_dropout", n.smoothing_disables_dropout);
        }
        for (name, t) in [("train", &self.train), ("student_train", &self.student_train)] {
            w.section(name);
            w.kv("epochs", t.epochs);
            w.kv("batch_size", t.batch_size);
            w.kv("lr", t.lr);
            w.kv("schedule", t.schedule.as_str());
            w.kv("decay_epochs", t.decay_epochs);
            w.kv("decay_factor", t.decay_factor);
            w.kv("decay_every", t.decay_every);
            w.kv("momentum_mix", t.momentum_mix);
            w.kv("loss_multiplier", t.loss_multiplier);
            w.kv("max_shift", t.max_shift);
            w.kv("checkpoint_every", t.checkpoint_every);
        }

        w.section("smoothing");
        w.kv("alpha", self.smoothing.alpha);
        w.kv("compare_alpha", self.smoothing.compare_alpha);

        let s = &self.distill;
        w.section("distill");
        w.kv("beta", s.beta);
        w.kv(
            "mode",
            match s.mode {
                DistillMode::KlSoftTargets => "kl",
                DistillMode::LogitMatch => "logit_match",
            },
        );
        w.kv("temperatures", join(&s.temperatures));
        w.kv("teacher_alphas", join(&s.teacher_alphas));
        w.kv("student_alphas", join(&s.student_alphas));
        w.kv("ls_temperature", s.ls_temperature);

        w.section("calibrate");
        w.kv("n_bins", self.n_bins);

        w.section("project");
        w.kv("classes", join(&self.project.classes));
        w.kv("per_class", self.project.per_class);

        let m = &self.mi;
        w.section("mi");
        w.kv("class_a", m.class_a);
        w.kv("class_b", m.class_b);
        w.kv("per_class", m.per_class);
        w.kv("mc_samples", m.mc_samples);
        w.kv("every", m.every);
        w.kv("variance_floor", m.variance_floor);

        let i = &self.inputs;
        w.section("inputs");
        for (k, v) in [
            ("hard_checkpoint", &i.hard_checkpoint),
            ("ls_checkpoint", &i.ls_checkpoint),
            ("hard_series", &i.hard_series),
            ("ls_series", &i.ls_series),
            ("teacher_dir", &i.teacher_dir),
        ] {
            w.kv(k, v.as_deref().unwrap_or(""));
        }
        w.out
    }

    /// Checks every field without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "need at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("experiment.seeds", "seeds must be distinct"));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("experiment.output", "must not be empty"));
        }
        self.validate_data()?;
        validate_net("teacher", &self.teacher)?;
        validate_net("student", &self.student)?;
        validate_train("train", &self.train)?;
        validate_train("student_train", &self.student_train)?;
        unit("smoothing.alpha", self.smoothing.alpha)?;
        unit("smoothing.compare_alpha", self.smoothing.compare_alpha)?;

        let k = self.data.classes;
        match self.kind {
            ExperimentKind::Train => {}
            ExperimentKind::Calibrate => {
                if self.n_bins == 0 {
                    return Err(Error::config("calibrate.n_bins", "must be positive"));
                }
                if self.data.validation_size < 2 {
                    return Err(Error::config("data.validation_size", "temperature fit needs held-out data"));
                }
            }
            ExperimentKind::Project => {
                let c = self.project.classes;
                if c[0] == c[1] || c[1] == c[2] || c[0] == c[2] {
                    return Err(Error::config("project.classes", "classes must be distinct"));
                }
                if c.iter().any(|&x| x >= k) {
                    return Err(Error::config("project.classes", format!("classes must lie in [0, {k})")));
                }
                if self.project.per_class < 2 {
                    return Err(Error::config("project.per_class", "need at least 2 per class"));
                }
            }
            ExperimentKind::DistillSweep => {
                let d = &self.distill;
                unit("distill.beta", d.beta)?;
                for &t in d.temperatures.iter().chain([&d.ls_temperature]) {
                    if !(t > 0.0) || !t.is_finite() {
                        return Err(Error::config("distill.temperatures", format!("{t} must be positive")));
                    }
                }
                for &a in d.teacher_alphas.iter().chain(&d.student_alphas) {
                    unit("distill.teacher_alphas", a)?;
                }
                if d.teacher_alphas.is_empty() {
                    return Err(Error::config("distill.teacher_alphas", "need at least one teacher"));
                }
                if !d.temperatures.is_empty() && !d.teacher_alphas.contains(&0.0) {
                    return Err(Error::config(
                        "distill.teacher_alphas",
                        "temperature scenario needs the hard teacher (alpha 0)",
                    ));
                }
                let distinct: BTreeSet<u64> = d.teacher_alphas.iter().map(|a| a.to_bits()).collect();
                if distinct.len() != d.teacher_alphas.len() {
                    return Err(Error::config("distill.teacher_alphas", "alphas must be distinct"));
                }
            }
            ExperimentKind::MiTrack => {
                let m = &self.mi;
                if m.class_a == m.class_b || m.class_a >= k || m.class_b >= k {
                    return Err(Error::config(
                        "mi.class_b",
                        format!("need two distinct classes in [0, {k})"),
                    ));
                }
                if m.per_class == 0 {
                    return Err(Error::config("mi.per_class", "must be positive"));
                }
                if m.mc_samples == 0 {
                    return Err(Error::config("mi.mc_samples", "must be positive"));
                }
                if m.every == 0 && self.inputs.hard_series.is_none() {
                    return Err(Error::config("mi.every", "must be positive"));
                }
                if !(m.variance_floor > 0.0) || !m.variance_floor.is_finite() {
                    return Err(Error::config("mi.variance_floor", "must be positive"));
                }
                if self.train.max_shift == 0 {
                    return Err(Error::config(
                        "train.max_shift",
                        "the estimator needs augmentation noise",
                    ));
                }
                if self.inputs.hard_series.is_some() != self.inputs.ls_series.is_some() {
                    return Err(Error::config("inputs.ls_series", "give both series or neither"));
                }
            }
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        match d.source {
            DataSource::Mnist => {
                if d.classes != 10 {
                    return Err(Error::config("data.classes", "MNIST has 10 classes"));
                }
            }
            DataSource::SynthClusters | DataSource::SynthGlyphs => {
                let pool = d.classes * d.per_class;
                let needed = d.validation_size + d.test_size + d.train_size.max(1);
                if needed > pool {
                    return Err(Error::config(
                        "data.per_class",
                        format!("pool of {pool} examples cannot hold {needed}"),
                    ));
                }
                if d.test_size == 0 {
                    return Err(Error::config("data.test_size", "synthetic data needs a test split"));
                }
            }
        }
        if d.source == DataSource::SynthClusters {
            if d.dim < 2 || d.classes > 2 * d.dim {
                return Err(Error::config("data.dim", "need 2 <= classes <= 2*dim"));
            }
            if !(d.separation > 0.0) || !d.separation.is_finite() {
                return Err(Error::config("data.separation", "must be positive"));
            }
            if !(d.noise >= 0.0) || !d.noise.is_finite() {
                return Err(Error::config("data.noise", "must be non-negative"));
            }
        }
        if d.source == DataSource::SynthGlyphs {
            if d.side < 5 {
                return Err(Error::config("data.side", "images must be at least 5x5"));
            }
            if d.strokes == 0 {
                return Err(Error::config("data.strokes", "need at least one stroke"));
            }
            if !(d.jitter >= 0.0) || !(d.pixel_noise >= 0.0) {
                return Err(Error::config("data.jitter", "noise levels must be non-negative"));
            }
        }
        if d.source == DataSource::SynthClusters && self.train.max_shift > 0 {
            return Err(Error::config("train.max_shift", "cluster data has no image shape"));
        }
        Ok(())
    }

    /// Directory holding the MNIST IDX files.
    pub fn mnist_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data.mnist_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(Error::config(
                "data.mnist_dir",
                format!("not set and {DATA_DIR_ENV} is unset"),
            )),
        }
    }
}

fn validate_net(name: &str, n: &NetConfig) -> Result<()> {
    if n.hidden.is_empty() || n.hidden.contains(&0) {
        return Err(Error::config(format!("{name}.hidden"), "need positive layer widths"));
    }
    for (k, v) in [("input_keep", n.input_keep), ("hidden_keep", n.hidden_keep)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::config(format!("{name}.{k}"), format!("{v} outside (0, 1]")));
        }
    }
    for (k, v) in [
        ("init_std", n.init_std),
        ("last_layer_lr_scale", n.last_layer_lr_scale),
        ("weight_decay", n.weight_decay),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::config(format!("{name}.{k}"), "must be non-negative"));
        }
    }
    Ok(())
}

fn validate_train(name: &str, t: &TrainSection) -> Result<()> {
    let f = |k: &str| format!("{name}.{k}");
    if t.batch_size == 0 {
        return Err(Error::config(f("batch_size"), "must be positive"));
    }
    if !(t.lr >= 0.0) || !t.lr.is_finite() {
        return Err(Error::config(f("lr"), "must be non-negative"));
    }
    if !(0.0..1.0).contains(&t.momentum_mix) {
        return Err(Error::config(f("momentum_mix"), "must lie in [0, 1)"));
    }
    if !(t.loss_multiplier > 0.0) || !t.loss_multiplier.is_finite() {
        return Err(Error::config(f("loss_multiplier"), "must be positive"));
    }
    if t.schedule == ScheduleKind::StepDecay {
        if t.decay_every == 0 {
            return Err(Error::config(f("decay_every"), "must be positive"));
        }
        if !(t.decay_factor > 0.0) || !t.decay_factor.is_finite() {
            return Err(Error::config(f("decay_factor"), "must be positive"));
        }
    }
    Ok(())
}

fn unit(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(field, format!("{v} outside [0, 1]")));
    }
    Ok(())
}

fn set_net(n: &mut NetConfig, f: &str, key: &str, v: &str) -> Result<()> {
    match key {
        "hidden" => n.hidden = list(f, v)?,
        "input_keep" => n.input_keep = num(f, v)?,
        "hidden_keep" => n.hidden_keep = num(f, v)?,
        "init_std" => n.init_std = num(f, v)?,
        "last_layer_lr_scale" => n.last_layer_lr_scale = num(f, v)?,
        "weight_decay" => n.weight_decay = num(f, v)?,
        "smoothing_disables_dropout" => n.smoothing_disables_dropout = num(f, v)?,
        _ => return Err(Error::config(f, "unknown key")),
    }
    Ok(())
}

fn set_train(t: &mut TrainSection, f: &str, key: &str, v: &str) -> Result<()> {
    match key {
        "epochs" => t.epochs = num(f, v)?,
        "batch_size" => t.batch_size = num(f, v)?,
        "lr" => t.lr = num(f, v)?,
        "schedule" => {
            t.schedule = ScheduleKind::parse(v)
                .ok_or_else(|| Error::config(f, format!("unknown schedule '{v}'")))?
        }
        "decay_epochs" => t.decay_epochs = num(f, v)?,
        "decay_factor" => t.decay_factor = num(f, v)?,
        "decay_every" => t.decay_every = num(f, v)?,
        "momentum_mix" => t.momentum_mix = num(f, v)?,
        "loss_multiplier" => t.loss_multiplier = num(f, v)?,
        "max_shift" => t.max_shift = num(f, v)?,
        "checkpoint_every" => t.checkpoint_every = num(f, v)?,
        _ => return Err(Error::config(f, "unknown key")),
    }
    Ok(())
}

struct Entry {
    section: String,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    let mut section: Option<String> = None;
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let at = || format!("line {}", i + 1);
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::config(at(), "unterminated section header"))?
                .trim();
            if !KNOWN_SECTIONS.contains(&name) {
                return Err(Error::config(name, "unknown section"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(at(), "expected 'key = value'"))?;
        let sec = section
            .clone()
            .ok_or_else(|| Error::config(at(), "key outside any section"))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(at(), "empty key"));
        }
        if !seen.insert((sec.clone(), key.clone())) {
            return Err(Error::config(format!("{sec}.{key}"), "duplicate key"));
        }
        out.push(Entry {
            section: sec,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

const KNOWN_SECTIONS: &[&str] = &[
    "experiment",
    "data",
    "teacher",
    "student",
    "train",
    "student_train",
    "smoothing",
    "distill",
    "calibrate",
    "project",
    "mi",
    "inputs",
];

fn num<T: std::str::FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(field, format!("cannot parse '{v}'")))
}

fn list<T: std::str::FromStr>(field: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(field, p.trim())).collect()
}

fn opt(v: &str) -> Option<&str> {
    (!v.is_empty()).then_some(v)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Default)]
struct Writer {
    out: String,
}

impl Writer {
    fn section(&mut self, name: &str) {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("[{name}]\n"));
    }

    fn kv(&mut self, k: &str, v: impl std::fmt::Display) {
        let v = v.to_string();
        if v.is_empty() {
            self.out.push_str(&format!("{k} =\n"));
        } else {
            self.out.push_str(&format!("{k} = {v}\n"));
        }
    }
}

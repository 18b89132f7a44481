//! Teacher and student optimization loops, schedule and checkpoints.

pub mod ablation;
pub mod checkpoint;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::Critic;
use crate::distill::{attention_distill_loss, output_distill_loss, row_entropies, Adm, DistillWeights, FeatureRole, FeatureSet};
use crate::error::{Error, Result};
use crate::losses::{adversarial_losses, depth_loss, perceptual_loss, reconstruction_loss, weighted_sum, ConvExtractor, LossWeights};
use crate::model::{build_critic, DepthSource, Dsrnet, ModelConfig, SampleVars};
use crate::nn::{clip_global_norm, Adam, AdamState, Bound, ParamStore};
use crate::synthgen::SampleRecord;
use crate::tensor::Tensor;
pub use checkpoint::{Checkpoint, CheckpointMeta, Progress};

/// Cosine annealing from `lr0` at `t = 0` to `eta_min` at `t = total`.
pub fn lr_schedule(t: u64, total: u64, lr0: f64, eta_min: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Range(format!("step {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Depth, pixel, perceptual and adversarial terms.
    TeacherFull,
    /// Pixel and depth terms only.
    TeacherRecDep,
    /// Pixel term only; the depth network stays at its initialization.
    TeacherRecOnly,
    /// Pixel term with ground-truth depth fed to the matching module.
    TeacherDepthGt,
    StudentPlain,
    StudentKd,
    StudentAd,
    StudentDistill,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::TeacherFull,
        Mode::TeacherRecDep,
        Mode::TeacherRecOnly,
        Mode::TeacherDepthGt,
        Mode::StudentPlain,
        Mode::StudentKd,
        Mode::StudentAd,
        Mode::StudentDistill,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
    }

    pub fn is_student(self) -> bool {
        matches!(self, Mode::StudentPlain | Mode::StudentKd | Mode::StudentAd | Mode::StudentDistill)
    }

    pub fn depth_source(self) -> DepthSource {
        match self {
            Mode::TeacherDepthGt => DepthSource::GroundTruth,
            _ => DepthSource::Predicted,
        }
    }

    fn uses_depth_loss(self) -> bool {
        !matches!(self, Mode::TeacherRecOnly | Mode::TeacherDepthGt)
    }

    fn uses_gan(self) -> bool {
        self == Mode::TeacherFull
    }

    fn uses_kd(self) -> bool {
        matches!(self, Mode::StudentKd | Mode::StudentDistill)
    }

    fn uses_ad(self) -> bool {
        matches!(self, Mode::StudentAd | Mode::StudentDistill)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        let a = Adam::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl From<&AdamConfig> for Adam {
    fn from(c: &AdamConfig) -> Self {
        Adam {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub lr0: f64,
    pub eta_min: f64,
    pub epochs: usize,
    /// Overrides `epochs × training samples` when set.
    pub steps: Option<u64>,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub distill: DistillWeights,
    pub model: ModelConfig,
    /// Architecture a student expects its teacher checkpoint to have.
    pub teacher_model: ModelConfig,
    pub adm_width: usize,
    pub checkpoint_every: u64,
    /// Trailing samples of the dataset kept out of training.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TeacherFull,
            seed: 0,
            lr0: 2e-4,
            eta_min: 1e-7,
            epochs: 250,
            steps: None,
            batch_size: 1,
            clip_norm: 10.0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            distill: DistillWeights::default(),
            model: ModelConfig::teacher(),
            teacher_model: ModelConfig::teacher(),
            adm_width: 64,
            checkpoint_every: 500,
            holdout: 0,
        }
    }
}

impl TrainConfig {
    /// Small networks on 64x64 data, 2000 steps.
    pub fn toy(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            steps: Some(2000),
            model: if mode.is_student() {
                ModelConfig::toy_student()
            } else {
                ModelConfig::toy_teacher()
            },
            teacher_model: ModelConfig::toy_teacher(),
            adm_width: 16,
            holdout: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return bad(format!("eta_min {} must lie in [0, lr0]", self.eta_min));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size 1 is supported, got {}", self.batch_size));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.adm_width == 0 {
            return bad("adm_width must be positive".into());
        }
        if self.mode.is_student() && self.model.encoder.res_blocks_per_stage != 2 {
            return bad(format!(
                "student encoder must have 2 res blocks per stage, got {}",
                self.model.encoder.res_blocks_per_stage
            ));
        }
        self.weights.validate()?;
        self.model.validate()?;
        if self.mode.is_student() {
            self.teacher_model.validate()?;
        }
        Ok(())
    }

    /// Training and held-out parts of `data`.
    pub fn split<'a>(&self, data: &'a [SampleRecord]) -> Result<(&'a [SampleRecord], &'a [SampleRecord])> {
        if self.holdout >= data.len() {
            return Err(Error::Config(format!(
                "holdout {} leaves no training samples out of {}",
                self.holdout,
                data.len()
            )));
        }
        Ok(data.split_at(data.len() - self.holdout))
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.steps.unwrap_or((self.epochs * n_train) as u64)
    }
}

/// Per-step loss values in fixed column order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub meta: CheckpointMeta,
}


/// Seed-determined sample order over `steps` steps, reshuffled every epoch.
pub fn sample_order(n: usize, steps: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6465_72);
    let mut out: Vec<usize> = Vec::with_capacity(steps as usize);
    let mut perm: Vec<usize> = (0..n).collect();
    while (out.len() as u64) < steps {
        perm.shuffle(&mut rng);
        let take = (steps - out.len() as u64).min(n as u64) as usize;
        out.extend_from_slice(&perm[..take]);
    }
    out
}

fn value(g: &Graph<f32>, v: Var) -> f64 {
    g.scalar_value(v) as f64
}

fn opt_value(g: &Graph<f32>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| value(g, v))
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(name.into()))
    }
}

/// Adam plus clipping for one parameter store.
struct Optim {
    adam: Adam,
    state: AdamState<f32>,
    clip: f64,
}

impl Optim {
    fn new(cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        Self {
            adam: (&cfg.adam).into(),
            state: AdamState::new(store),
            clip: cfg.clip_norm,
        }
    }

    fn step(&mut self, store: &mut ParamStore<f32>, mut grads: Vec<Tensor<f32>>, lr: f64) -> Result<()> {
        if self.clip > 0.0 {
            finite("grad_norm", clip_global_norm(&mut grads, self.clip))?;
        } else if grads.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFiniteLoss("grad".into()));
        }
        self.adam.step(store, &mut self.state, &grads, lr)
    }
}

/// Something the shared loop can step, log and checkpoint.
pub trait Stepper {
    fn columns(&self) -> Vec<&'static str>;
    /// Loss columns between `step` and `lr`.
    fn step(&mut self, s: &SampleRecord, lr: f64) -> Result<Vec<f64>>;
    fn save(&self, dir: &Path, progress: Progress) -> Result<CheckpointMeta>;
}

/// Runs `trainer` over the training split of `data`, writing the config
/// echo, `train_log.csv` and `checkpoint/` into `out`. The checkpoint is
/// written at step 0, every `checkpoint_every` steps and at the end; a
/// failing step leaves the last one in place.
pub fn run(cfg: &TrainConfig, trainer: &mut impl Stepper, data: &[SampleRecord], out: &Path) -> Result<TrainOutcome> {
    let (train, _) = cfg.split(data)?;
    let total = cfg.total_steps(train.len());
    let order = sample_order(train.len(), total, cfg.seed);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    let progress = |step, lr| Progress {
        step,
        total_steps: total,
        seed: cfg.seed,
        lr,
    };
    let mut meta = trainer.save(&ck_dir, progress(0, cfg.lr0))?;
    let mut columns = vec!["step"];
    columns.extend(trainer.columns());
    columns.push("lr");
    let mut log = TrainLog::new(&columns);
    let log_path = out.join(LOG_FILE);
    for (t, &i) in order.iter().enumerate() {
        let t = t as u64;
        let lr = lr_schedule(t, total, cfg.lr0, cfg.eta_min)?;
        let row = match trainer.step(&train[i], lr) {
            Ok(r) => r,
            Err(e) => {
                log.write(&log_path)?;
                return Err(e);
            }
        };
        let mut full = vec![(t + 1) as f64];
        full.extend(row);
        full.push(lr);
        log.rows.push(full);
        if (t + 1) % cfg.checkpoint_every.max(1) == 0 || t + 1 == total {
            meta = trainer.save(&ck_dir, progress(t + 1, lr))?;
        }
    }
    log.write(&log_path)?;
    Ok(TrainOutcome {
        log,
        checkpoint: ck_dir,
        meta,
    })
}

/// A teacher generator and critic with their optimizers.
pub struct TeacherTrainer {
    pub cfg: TrainConfig,
    pub net: Dsrnet,
    pub gen: ParamStore<f32>,
    pub critic: Critic,
    pub critic_store: ParamStore<f32>,
    fx: Option<ConvExtractor<f32>>,
    opt_g: Optim,
    opt_d: Optim,
}

/// Generator-side terms of one teacher step.
struct GenTerms {
    total: Var,
    dep: Option<Var>,
    rec: Var,
    per: Option<Var>,
    l_g: Option<Var>,
    sr: Var,
}

impl TeacherTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.is_student() {
            return Err(Error::Config(format!("{} is not a teacher mode", cfg.mode.name())));
        }
        let mut gen = ParamStore::new();
        let net = Dsrnet::new(&mut gen, &cfg.model, cfg.seed)?;
        let mut critic_store = ParamStore::new();
        let critic = build_critic(&mut critic_store, &cfg.model.critic, cfg.seed);
        let fx = if cfg.mode.uses_gan() && cfg.weights.per > 0.0 {
            Some(ConvExtractor::from_env()?)
        } else {
            None
        };
        Ok(Self {
            opt_g: Optim::new(cfg, &gen),
            opt_d: Optim::new(cfg, &critic_store),
            cfg: cfg.clone(),
            net,
            gen,
            critic,
            critic_store,
            fx,
        })
    }

    fn generator_terms(&self, g: &mut Graph<f32>, p: &Bound, s: &SampleRecord) -> Result<GenTerms> {
        let mode = self.cfg.mode;
        let w = &self.cfg.weights;
        let x = SampleVars::new(g, s);
        let out = self.net.forward(g, p, &x, mode.depth_source(), None)?;
        let dep = match out.depth {
            Some((a, b)) if mode.uses_depth_loss() => Some(depth_loss(g, a, b, x.depth_lr, x.depth_ref_down)?),
            _ => None,
        };
        let rec = reconstruction_loss(g, out.sr, x.hr)?;
        let per = match &self.fx {
            Some(fx) => Some(perceptual_loss(g, out.sr, x.hr, fx)?),
            None => None,
        };
        let l_g = if mode.uses_gan() {
            let cp = self.critic_store.bind(g, false);
            Some(adversarial_losses(g, &self.critic, &cp, x.hr, out.sr, w)?.l_g)
        } else {
            None
        };
        let mut terms = vec![(w.rec, rec)];
        terms.extend(dep.map(|v| (w.dep, v)));
        terms.extend(per.map(|v| (w.per, v)));
        terms.extend(l_g.map(|v| (w.adv * w.g, v)));
        let total = weighted_sum(g, &terms)?;
        Ok(GenTerms {
            total,
            dep,
            rec,
            per,
            l_g,
            sr: out.sr,
        })
    }

    /// Generator objective on one sample, nothing updated.
    pub fn eval_loss(&self, s: &SampleRecord) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.gen.bind(&mut g, false);
        let t = self.generator_terms(&mut g, &p, s)?;
        Ok(value(&g, t.total))
    }

    /// Generator gradients on one sample, in store order.
    pub fn generator_grads(&self, s: &SampleRecord) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new();
        let p = self.gen.bind(&mut g, true);
        let t = self.generator_terms(&mut g, &p, s)?;
        let grads = g.backward(t.total);
        Ok(p.grads(&g, &grads))
    }

    /// Restores generator and critic weights from a checkpoint.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore("generator", &mut self.gen)?;
        ck.restore("critic", &mut self.critic_store)
    }
}

impl Stepper for TeacherTrainer {
    fn columns(&self) -> Vec<&'static str> {
        vec!["dep", "rec", "per", "g", "d", "adv", "total"]
    }

    /// One generator step, then one critic step in adversarial mode.
    fn step(&mut self, s: &SampleRecord, lr: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.gen.bind(&mut g, true);
        let t = self.generator_terms(&mut g, &p, s)?;
        let vals = [
            ("dep", opt_value(&g, t.dep)),
            ("rec", value(&g, t.rec)),
            ("per", opt_value(&g, t.per)),
            ("g", opt_value(&g, t.l_g)),
            ("total", value(&g, t.total)),
        ];
        for (n, v) in vals {
            finite(n, v)?;
        }
        let [dep, rec, per, l_g, total] = vals.map(|(_, v)| v);
        let grads = g.backward(t.total);
        let gen_grads = p.grads(&g, &grads);
        let sr = g.value(t.sr).clone();
        drop(grads);
        drop(g);
        self.opt_g.step(&mut self.gen, gen_grads, lr)?;
        let mut l_d = 0.0;
        if self.cfg.mode.uses_gan() {
            let mut g = Graph::new();
            let cp = self.critic_store.bind(&mut g, true);
            let hr = g.constant(s.hr.clone());
            let sr = g.constant(sr);
            let adv = adversarial_losses(&mut g, &self.critic, &cp, hr, sr, &self.cfg.weights)?;
            l_d = finite("d", value(&g, adv.l_d))?;
            let loss = g.scale(adv.l_d, self.cfg.weights.d as f32);
            let grads = g.backward(loss);
            let cg = cp.grads(&g, &grads);
            self.opt_d.step(&mut self.critic_store, cg, lr)?;
        }
        let w = &self.cfg.weights;
        Ok(vec![dep, rec, per, l_g, l_d, w.g * l_g + w.d * l_d, total])
    }

    fn save(&self, dir: &Path, progress: Progress) -> Result<CheckpointMeta> {
        checkpoint::save(
            dir,
            &[("generator", &self.gen), ("critic", &self.critic_store)],
            &self.cfg,
            progress,
        )
    }
}

pub fn train_teacher(cfg: &TrainConfig, data: &[SampleRecord], out: &Path) -> Result<TrainOutcome> {
    let mut t = TeacherTrainer::new(cfg)?;
    run(cfg, &mut t, data, out)
}

/// Reads the training config echoed into a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ck.arch.config.clone())
        .map_err(|e| Error::Config(format!("checkpoint config does not parse: {e}")))
}

/// Generator stored in a checkpoint directory, rebuilt from its config echo.
pub fn load_generator(dir: &Path) -> Result<(Dsrnet, ParamStore<f32>, TrainConfig)> {
    let ck = checkpoint::load(dir)?;
    let cfg = checkpoint_config(&ck)?;
    let mut store = ParamStore::new();
    let net = Dsrnet::new(&mut store, &cfg.model, cfg.seed)?;
    ck.restore("generator", &mut store)?;
    Ok((net, store, cfg))
}

/// Teacher outputs on one sample, computed once before distillation.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub sr: Tensor<f32>,
    pub encoder: Vec<Tensor<f32>>,
    pub depth: Vec<Tensor<f32>>,
}

/// Frozen teacher loaded from a checkpoint.
pub struct FrozenTeacher {
    pub net: Dsrnet,
    pub store: ParamStore<f32>,
    pub depth: DepthSource,
}

impl FrozenTeacher {
    /// Fails with a config error unless the checkpoint holds a teacher with
    /// exactly the `declared` architecture.
    pub fn load(dir: &Path, declared: &ModelConfig) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let cfg = checkpoint_config(&ck)?;
        if cfg.mode.is_student() {
            return Err(Error::Config(format!("{} holds a student ({})", dir.display(), cfg.mode.name())));
        }
        if cfg.model != *declared {
            return Err(Error::Config(format!(
                "teacher checkpoint architecture {:?} differs from declared {:?}",
                cfg.model, declared
            )));
        }
        let mut store = ParamStore::new();
        let net = Dsrnet::new(&mut store, declared, cfg.seed)?;
        ck.restore("generator", &mut store)?;
        Ok(Self {
            net,
            store,
            depth: cfg.mode.depth_source(),
        })
    }

    pub fn targets(&self, s: &SampleRecord) -> Result<TeacherTargets> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = SampleVars::new(&mut g, s);
        let out = self.net.forward(&mut g, &p, &x, self.depth, None)?;
        let take = |g: &Graph<f32>, vs: [Var; 3]| vs.iter().map(|&v| g.value(v).clone()).collect();
        Ok(TeacherTargets {
            sr: g.value(out.sr).clone(),
            encoder: take(&g, out.enc_lr.stages()),
            depth: take(&g, out.dmm.depth_lr.stages()),
        })
    }
}

/// Student generator and attention modules with their optimizers.
pub struct StudentTrainer {
    pub cfg: TrainConfig,
    pub net: Dsrnet,
    pub gen: ParamStore<f32>,
    pub adm: (Adm, Adm),
    pub adm_store: ParamStore<f32>,
    targets: HashMap<String, TeacherTargets>,
    opt_g: Optim,
    opt_a: Optim,
}

const ENTROPY_COLUMNS: [&str; 6] = ["ent_e0", "ent_e1", "ent_e2", "ent_d0", "ent_d1", "ent_d2"];

impl StudentTrainer {
    /// `targets` is keyed by sample id.
    pub fn new(cfg: &TrainConfig, teacher_model: &ModelConfig, targets: HashMap<String, TeacherTargets>) -> Result<Self> {
        cfg.validate()?;
        if !cfg.mode.is_student() {
            return Err(Error::Config(format!("{} is not a student mode", cfg.mode.name())));
        }
        let mut gen = ParamStore::new();
        let net = Dsrnet::new(&mut gen, &cfg.model, cfg.seed)?;
        let mut adm_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad_0d);
        let tc = [teacher_model.encoder.base_channels; 3];
        let sc = [cfg.model.encoder.base_channels; 3];
        let adm = (
            Adm::new(&mut adm_store, "adm.encoder", &tc, &sc, cfg.adm_width, &mut rng),
            Adm::new(&mut adm_store, "adm.depth", &tc, &sc, cfg.adm_width, &mut rng),
        );
        Ok(Self {
            opt_g: Optim::new(cfg, &gen),
            opt_a: Optim::new(cfg, &adm_store),
            cfg: cfg.clone(),
            net,
            gen,
            adm,
            adm_store,
            targets,
        })
    }

    fn targets_for(&self, s: &SampleRecord) -> Result<&TeacherTargets> {
        self.targets
            .get(&s.sample_id)
            .ok_or_else(|| Error::Config(format!("no teacher targets for sample {}", s.sample_id)))
    }
}

impl Stepper for StudentTrainer {
    fn columns(&self) -> Vec<&'static str> {
        let mut c = vec!["dep", "rec", "kd", "ad", "ad_e", "ad_d", "total"];
        c.extend(ENTROPY_COLUMNS);
        c
    }

    fn step(&mut self, s: &SampleRecord, lr: f64) -> Result<Vec<f64>> {
        let mode = self.cfg.mode;
        let tgt = self.targets_for(s)?;
        let mut g = Graph::new();
        let p = self.gen.bind(&mut g, true);
        let pa = self.adm_store.bind(&mut g, true);
        let x = SampleVars::new(&mut g, s);
        let out = self.net.forward(&mut g, &p, &x, DepthSource::Predicted, None)?;
        let (da, db) = out.depth.expect("students predict depth");
        let dep = depth_loss(&mut g, da, db, x.depth_lr, x.depth_ref_down)?;
        let rec = reconstruction_loss(&mut g, out.sr, x.hr)?;
        let kd = if mode.uses_kd() {
            let t_sr = g.constant(tgt.sr.clone());
            Some(output_distill_loss(&mut g, out.sr, t_sr)?)
        } else {
            None
        };
        let ad = if mode.uses_ad() {
            let set = |g: &mut Graph<f32>, role, maps: &[Tensor<f32>]| FeatureSet {
                role,
                maps: maps.iter().map(|t| g.constant(t.clone())).collect(),
            };
            let te = set(&mut g, FeatureRole::TeacherEncoder, &tgt.encoder);
            let td = set(&mut g, FeatureRole::TeacherDepth, &tgt.depth);
            let se = FeatureSet {
                role: FeatureRole::StudentEncoder,
                maps: out.enc_lr.stages().to_vec(),
            };
            let sd = FeatureSet {
                role: FeatureRole::StudentDepth,
                maps: out.dmm.depth_lr.stages().to_vec(),
            };
            Some(attention_distill_loss(&mut g, &pa, (&self.adm.0, &self.adm.1), (&te, &se), (&td, &sd))?)
        } else {
            None
        };
        let obj = crate::distill::student_objective_var(&mut g, rec, kd, ad.as_ref().map(|a| a.total), &self.cfg.distill)?;
        let total = weighted_sum(&mut g, &[(1.0, obj), (self.cfg.weights.dep, dep)])?;
        let mut row = vec![
            finite("dep", value(&g, dep))?,
            finite("rec", value(&g, rec))?,
            finite("kd", opt_value(&g, kd))?,
            finite("ad", opt_value(&g, ad.as_ref().map(|a| a.total)))?,
            finite("ad_e", opt_value(&g, ad.as_ref().map(|a| a.encoder)))?,
            finite("ad_d", opt_value(&g, ad.as_ref().map(|a| a.depth)))?,
            finite("total", value(&g, total))?,
        ];
        match &ad {
            Some(a) => {
                row.extend(row_entropies(&g, &a.alpha.0));
                row.extend(row_entropies(&g, &a.alpha.1));
            }
            None => row.extend([0.0; ENTROPY_COLUMNS.len()]),
        }
        let grads = g.backward(total);
        let gg = p.grads(&g, &grads);
        let ga = pa.grads(&g, &grads);
        drop(grads);
        drop(g);
        self.opt_g.step(&mut self.gen, gg, lr)?;
        if mode.uses_ad() {
            self.opt_a.step(&mut self.adm_store, ga, lr)?;
        }
        Ok(row)
    }

    fn save(&self, dir: &Path, progress: Progress) -> Result<CheckpointMeta> {
        checkpoint::save(dir, &[("generator", &self.gen), ("adm", &self.adm_store)], &self.cfg, progress)
    }
}

/// Distils the teacher in `teacher_dir` into a fresh student. The teacher
/// store is only read.
pub fn train_student_distill(cfg: &TrainConfig, teacher_dir: &Path, data: &[SampleRecord], out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher = FrozenTeacher::load(teacher_dir, &cfg.teacher_model)?;
    let (train, _) = cfg.split(data)?;
    let mut targets = HashMap::with_capacity(train.len());
    for s in train {
        targets.insert(s.sample_id.clone(), teacher.targets(s)?);
    }
    let mut st = StudentTrainer::new(cfg, &cfg.teacher_model, targets)?;
    run(cfg, &mut st, data, out)
}

//! The alternating training loop: one generator step, an occasional weight
//! averaging update, and one discriminator step per iteration, all on the
//! batch sampled at the top of the iteration.
//!
//! The generator descends `mce + lambda*adv` by SGD with momentum under a
//! polynomial learning-rate decay; the discriminator descends its own
//! objective by Adam under the same annealing, trained on the generator's
//! detached output against the one-hot ground truth. Runs are bit-reproducible
//! from the config: the generator init, discriminator init, batch sampling
//! and augmentation each use an independent seeded stream, so switching the
//! adversary off (or setting lambda to zero) leaves the generator trajectory
//! untouched.

use crate::data::{self, DatasetSpec, Sample, ShapeKind};
use crate::error::{Error, Result};
use crate::losses::{self, Reduction};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::models::{self, HeadKind, NetConfig, Network};
use crate::optim::{build_optimizer, poly_lr, OptimHyper, Optimizer, SwaMode, SwaState};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    Off,
    Standard,
    Pixelwise,
}

impl AdvMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AdvMode::Off),
            "standard" => Ok(AdvMode::Standard),
            "pixelwise" => Ok(AdvMode::Pixelwise),
            other => Err(Error::Config(format!("unknown adv_mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdvMode::Off => "off",
            AdvMode::Standard => "standard",
            AdvMode::Pixelwise => "pixelwise",
        }
    }

    fn head(&self) -> Option<HeadKind> {
        match self {
            AdvMode::Off => None,
            AdvMode::Standard => Some(HeadKind::Standard),
            AdvMode::Pixelwise => Some(HeadKind::Pixelwise),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaSetting {
    Off,
    On(SwaMode),
}

impl SwaSetting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(SwaSetting::Off),
            other => Ok(SwaSetting::On(SwaMode::parse(other)?)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SwaSetting::Off => "off",
            SwaSetting::On(mode) => mode.name(),
        }
    }
}

/// Every knob of a training run. Parsed from "key = value" lines with CLI
/// overrides applied on top; see [`TrainConfig::apply`] for the key set.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n_iter: usize,
    pub batch: usize,
    pub lambda: f32,
    pub swa_n: usize,
    pub th_swa: f64,
    pub swa_mode: SwaSetting,
    pub adv_mode: AdvMode,
    pub lr_gen: f32,
    pub lr_disc: f32,
    pub power: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub reduction: Reduction,
    pub seed: u64,
    pub eval_every: usize,
    pub gen_optim: String,
    pub disc_optim: String,
    pub base_width: usize,
    pub depth: usize,
    pub leaky_slope: f32,
    pub augment: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub data_manifest: String,
    pub eval_manifest: String,
    pub data_samples: usize,
    pub data_h: usize,
    pub data_w: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_std: f32,
    pub data_seed: u64,
    pub eval_samples: usize,
    pub boundary_ignore: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_iter: 2000,
            batch: 8,
            lambda: 0.01,
            swa_n: 100,
            th_swa: 0.0,
            swa_mode: SwaSetting::On(SwaMode::RunningMean),
            adv_mode: AdvMode::Pixelwise,
            lr_gen: 2.5e-4,
            lr_disc: 1e-4,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            reduction: Reduction::Mean,
            seed: 42,
            eval_every: 0,
            gen_optim: "sgd".into(),
            disc_optim: "adam".into(),
            base_width: 8,
            depth: 2,
            leaky_slope: 0.2,
            augment: false,
            scale_lo: 0.75,
            scale_hi: 1.25,
            data_manifest: String::new(),
            eval_manifest: String::new(),
            data_samples: 64,
            data_h: 32,
            data_w: 32,
            num_classes: 4,
            shapes_min: 1,
            shapes_max: 3,
            noise_std: 0.25,
            data_seed: 7,
            eval_samples: 16,
            boundary_ignore: false,
        }
    }
}

macro_rules! parse_field {
    ($value:expr, $key:expr) => {
        $value.parse().map_err(|_| {
            Error::Config(format!("cannot parse '{}' for key '{}'", $value, $key))
        })?
    };
}

impl TrainConfig {
    /// Applies one "key = value" assignment. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "n_iter" => self.n_iter = parse_field!(value, key),
            "batch" => self.batch = parse_field!(value, key),
            "lambda" => self.lambda = parse_field!(value, key),
            "swa_n" => self.swa_n = parse_field!(value, key),
            "th_swa" => self.th_swa = parse_field!(value, key),
            "swa_mode" => self.swa_mode = SwaSetting::parse(value)?,
            "adv_mode" => self.adv_mode = AdvMode::parse(value)?,
            "lr_gen" => self.lr_gen = parse_field!(value, key),
            "lr_disc" => self.lr_disc = parse_field!(value, key),
            "power" => self.power = parse_field!(value, key),
            "momentum" => self.momentum = parse_field!(value, key),
            "weight_decay" => self.weight_decay = parse_field!(value, key),
            "beta1" => self.beta1 = parse_field!(value, key),
            "beta2" => self.beta2 = parse_field!(value, key),
            "reduction" => self.reduction = Reduction::parse(value)?,
            "seed" => self.seed = parse_field!(value, key),
            "eval_every" => self.eval_every = parse_field!(value, key),
            "gen_optim" => self.gen_optim = value.to_string(),
            "disc_optim" => self.disc_optim = value.to_string(),
            "base_width" => self.base_width = parse_field!(value, key),
            "depth" => self.depth = parse_field!(value, key),
            "leaky_slope" => self.leaky_slope = parse_field!(value, key),
            "augment" => self.augment = parse_field!(value, key),
            "scale_lo" => self.scale_lo = parse_field!(value, key),
            "scale_hi" => self.scale_hi = parse_field!(value, key),
            "data_manifest" => self.data_manifest = value.to_string(),
            "eval_manifest" => self.eval_manifest = value.to_string(),
            "data_samples" => self.data_samples = parse_field!(value, key),
            "data_h" => self.data_h = parse_field!(value, key),
            "data_w" => self.data_w = parse_field!(value, key),
            "num_classes" => self.num_classes = parse_field!(value, key),
            "shapes_min" => self.shapes_min = parse_field!(value, key),
            "shapes_max" => self.shapes_max = parse_field!(value, key),
            "noise_std" => self.noise_std = parse_field!(value, key),
            "data_seed" => self.data_seed = parse_field!(value, key),
            "eval_samples" => self.eval_samples = parse_field!(value, key),
            "boundary_ignore" => self.boundary_ignore = parse_field!(value, key),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Loads defaults overridden by "key = value" lines ('#' starts a comment).
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", ln + 1))
            })?;
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    /// The fully resolved config as "key = value" lines, echoed before runs.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("n_iter", self.n_iter.to_string());
        kv("batch", self.batch.to_string());
        kv("lambda", self.lambda.to_string());
        kv("swa_n", self.swa_n.to_string());
        kv("th_swa", self.th_swa.to_string());
        kv("swa_mode", self.swa_mode.name().into());
        kv("adv_mode", self.adv_mode.name().into());
        kv("lr_gen", self.lr_gen.to_string());
        kv("lr_disc", self.lr_disc.to_string());
        kv("power", self.power.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("reduction", self.reduction.name().into());
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("gen_optim", self.gen_optim.clone());
        kv("disc_optim", self.disc_optim.clone());
        kv("base_width", self.base_width.to_string());
        kv("depth", self.depth.to_string());
        kv("leaky_slope", self.leaky_slope.to_string());
        kv("augment", self.augment.to_string());
        kv("scale_lo", self.scale_lo.to_string());
        kv("scale_hi", self.scale_hi.to_string());
        kv("data_manifest", self.data_manifest.clone());
        kv("eval_manifest", self.eval_manifest.clone());
        kv("data_samples", self.data_samples.to_string());
        kv("data_h", self.data_h.to_string());
        kv("data_w", self.data_w.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("shapes_min", self.shapes_min.to_string());
        kv("shapes_max", self.shapes_max.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("boundary_ignore", self.boundary_ignore.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.th_swa) {
            return Err(Error::Config(format!("th_swa {} outside [0,1]", self.th_swa)));
        }
        if self.swa_n == 0 {
            return Err(Error::Config("swa_n must be positive".into()));
        }
        let div = 1usize << self.depth;
        if self.data_manifest.is_empty() && (self.data_h % div != 0 || self.data_w % div != 0) {
            return Err(Error::Config(format!(
                "data_h/data_w must be divisible by 2^depth = {div}"
            )));
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            num_classes: self.num_classes,
            base_width: self.base_width,
            depth: self.depth,
            leaky_slope: self.leaky_slope,
        }
    }

    fn effective_eval_every(&self) -> usize {
        if self.eval_every > 0 {
            self.eval_every
        } else {
            (self.n_iter / 20).max(1)
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent deterministic substreams per role.
fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ tag.wrapping_mul(0x9E3779B97F4A7C15))
}

const TAG_GEN: u64 = 1;
const TAG_DISC: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_AUG: u64 = 4;
const TAG_EVAL_DATA: u64 = 5;

// ── run log ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RunLogRecord {
    pub iter: usize,
    pub gen_loss: f64,
    pub mce: f64,
    pub adv: f64,
    pub disc_loss: f64,
    pub lr: f64,
    pub miou: f64,
    pub miou_swa: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<RunLogRecord>,
}

fn fmt6(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

impl RunLog {
    pub const CSV_HEADER: &'static str =
        "iter,gen_loss,mce,adv,disc_loss,lr,miou,miou_swa,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.8},{},{},{:.3}\n",
                r.iter,
                fmt6(r.gen_loss),
                fmt6(r.mce),
                fmt6(r.adv),
                fmt6(r.disc_loss),
                r.lr,
                fmt6(r.miou),
                fmt6(r.miou_swa),
                r.seconds
            ));
        }
        out
    }

    /// Test-time metric of the last record: the averaged weights' score when
    /// averaging ran, the plain generator's otherwise.
    pub fn final_test_miou(&self) -> Option<f64> {
        self.records.last().map(|r| if r.miou_swa.is_nan() { r.miou } else { r.miou_swa })
    }

    pub fn best_test_miou(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| if r.miou_swa.is_nan() { r.miou } else { r.miou_swa })
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

// ── training ────────────────────────────────────────────────────────────

pub struct TrainOutput {
    pub gen: Network,
    pub disc: Option<Network>,
    /// Generator rebuilt from the averaged weights, when averaging ran.
    pub swa: Option<Network>,
    pub runlog: RunLog,
    /// Optimizer state as checkpoint records ("optim.<name>." prefixed).
    pub gen_opt_records: Vec<(String, Tensor)>,
    pub disc_opt_records: Vec<(String, Tensor)>,
}

struct Trainer {
    cfg: TrainConfig,
    train_data: Vec<Sample>,
    eval_data: Vec<Sample>,
    gen: Network,
    disc: Option<Network>,
    gen_opt: Box<dyn Optimizer>,
    disc_opt: Box<dyn Optimizer>,
    swa: Option<SwaState>,
    batch_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    runlog: RunLog,
    started: Instant,
    #[cfg(debug_assertions)]
    swa_audit: SwaAudit,
}

/// Debug-only cross-check: running f64 sums of absorbed snapshots, verified
/// against the averaged weights after every update.
#[cfg(debug_assertions)]
#[derive(Default)]
struct SwaAudit {
    sums: Vec<Vec<f64>>,
    count: usize,
}

struct IterStats {
    gen_loss: f64,
    mce: f64,
    adv: f64,
    disc_loss: f64,
    lr: f64,
}

impl Trainer {
    fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train_data, eval_data) = load_datasets(&cfg)?;
        let net_cfg = cfg.net_config();
        let gen = models::build_generator(net_cfg, derive_seed(cfg.seed, TAG_GEN))?;
        let disc = match cfg.adv_mode.head() {
            Some(head) => Some(models::build_discriminator(
                net_cfg,
                derive_seed(cfg.seed, TAG_DISC),
                head,
            )?),
            None => None,
        };
        let hp = OptimHyper {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps_hat: 1e-8,
        };
        let gen_opt = build_optimizer(&cfg.gen_optim, &hp)?;
        let disc_opt = build_optimizer(&cfg.disc_optim, &hp)?;
        let swa = match cfg.swa_mode {
            SwaSetting::Off => None,
            SwaSetting::On(mode) => Some(SwaState::new(gen.params(), cfg.swa_n, mode)),
        };
        Ok(Trainer {
            batch_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_BATCH)),
            aug_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_AUG)),
            cfg,
            train_data,
            eval_data,
            gen,
            disc,
            gen_opt,
            disc_opt,
            swa,
            runlog: RunLog::default(),
            started: Instant::now(),
            #[cfg(debug_assertions)]
            swa_audit: SwaAudit::default(),
        })
    }

    /// Samples this iteration's batch (uniform with replacement), applying
    /// augmentation when enabled.
    fn prepare_batch(&mut self) -> Result<Vec<Sample>> {
        let mut batch = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let idx = self.batch_rng.gen_range(0..self.train_data.len());
            let sample = &self.train_data[idx];
            if self.cfg.augment {
                let seed: u64 = self.aug_rng.gen();
                batch.push(data::augment(
                    sample,
                    (self.cfg.scale_lo, self.cfg.scale_hi),
                    sample.labels.height(),
                    sample.labels.width(),
                    seed,
                )?);
            } else {
                batch.push(sample.clone());
            }
        }
        Ok(batch)
    }

    /// Generator descent step; returns batch-mean loss terms and the detached
    /// probability maps for the discriminator step.
    fn gen_step(&mut self, iter: usize, batch: &[Sample]) -> Result<(IterStats, Vec<Tensor>)> {
        for p in self.gen.params_mut() {
            p.tensor.ensure_grad();
            p.tensor.zero_grad();
        }
        let adversarial = self.disc.is_some() && self.cfg.lambda > 0.0;
        let mut sum_loss = 0.0f64;
        let mut sum_mce = 0.0f64;
        let mut sum_adv = 0.0f64;
        let mut detached = Vec::with_capacity(batch.len());

        for sample in batch {
            let mut tape = Tape::new();
            let x = tape.leaf(&sample.image);
            let (logits, param_ids) = self.gen.forward_on_tape(&mut tape, x)?;
            let probs = tape.softmax_channels(logits)?;
            let mce = losses::mce_loss(&mut tape, probs, &sample.labels, self.cfg.reduction)?;
            let loss = if adversarial {
                let disc = self.disc.as_ref().unwrap();
                let (conf, _) = disc.forward_on_tape(&mut tape, probs)?;
                let adv = losses::adv_loss(&mut tape, conf, self.cfg.reduction)?;
                sum_adv += tape.value_scalar(adv) as f64;
                let weighted = tape.scale(adv, self.cfg.lambda);
                tape.add(mce, weighted)?
            } else {
                mce
            };
            tape.backward(loss)?;
            for (param, id) in self.gen.params_mut().iter_mut().zip(&param_ids) {
                param.tensor.accumulate_grad(tape.grad(*id))?;
            }
            sum_loss += tape.value_scalar(loss) as f64;
            sum_mce += tape.value_scalar(mce) as f64;
            if self.disc.is_some() {
                detached.push(tape.tensor(probs));
            }
        }

        let m = batch.len() as f64;
        let inv = (1.0 / m) as f32;
        for p in self.gen.params_mut() {
            for g in p.tensor.grad_mut().unwrap() {
                *g *= inv;
            }
        }
        let lr = poly_lr(self.cfg.lr_gen, iter, self.cfg.n_iter, self.cfg.power)?;
        self.gen_opt.step(self.gen.params_mut(), lr)?;

        let stats = IterStats {
            gen_loss: sum_loss / m,
            mce: sum_mce / m,
            adv: if adversarial { sum_adv / m } else { f64::NAN },
            disc_loss: f64::NAN,
            lr: lr as f64,
        };
        if !stats.gen_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter, gen: stats.gen_loss, disc: f64::NAN });
        }
        Ok((stats, detached))
    }

    fn swa_step(&mut self, iter: usize) -> Result<()> {
        let Some(swa) = self.swa.as_mut() else { return Ok(()) };
        let start = self.cfg.th_swa * self.cfg.n_iter as f64;
        if (iter as f64) < start || iter % self.cfg.swa_n != 0 {
            return Ok(());
        }
        swa.update(self.gen.params())?;

        #[cfg(debug_assertions)]
        if swa.mode() == SwaMode::RunningMean {
            let audit = &mut self.swa_audit;
            if audit.sums.is_empty() {
                audit.sums = self
                    .gen
                    .params()
                    .iter()
                    .map(|p| vec![0.0f64; p.tensor.numel()])
                    .collect();
            }
            for (sum, p) in audit.sums.iter_mut().zip(self.gen.params()) {
                for (s, &v) in sum.iter_mut().zip(p.tensor.values()) {
                    *s += v as f64;
                }
            }
            audit.count += 1;
            let values = self.swa.as_ref().unwrap().values_f32();
            for (sum, got) in audit.sums.iter().zip(&values) {
                for (s, &g) in sum.iter().zip(got) {
                    let mean = s / audit.count as f64;
                    debug_assert!(
                        (g as f64 - mean).abs() <= 1e-5 * mean.abs().max(1.0),
                        "averaged weights drifted from the snapshot mean"
                    );
                }
            }
        }
        Ok(())
    }

    /// Discriminator descent step on the detached generator output and the
    /// one-hot ground truth, sharing the generator's batch.
    fn disc_step(&mut self, iter: usize, batch: &[Sample], detached: &[Tensor]) -> Result<f64> {
        let Some(disc) = self.disc.as_mut() else { return Ok(f64::NAN) };
        for p in disc.params_mut() {
            p.tensor.ensure_grad();
            p.tensor.zero_grad();
        }
        let mut sum_loss = 0.0f64;
        for (sample, probs) in batch.iter().zip(detached) {
            let mut tape = Tape::new();
            let param_ids = disc.register_params(&mut tape);
            let fake_leaf = tape.leaf(probs);
            let conf_fake = disc.forward_with(&mut tape, &param_ids, fake_leaf)?;
            let real = data::one_hot(&sample.labels)?;
            let real_leaf = tape.leaf(&real);
            let conf_real = disc.forward_with(&mut tape, &param_ids, real_leaf)?;
            let loss = losses::disc_loss(&mut tape, conf_fake, conf_real, self.cfg.reduction)?;
            tape.backward(loss)?;
            for (param, id) in disc.params_mut().iter_mut().zip(&param_ids) {
                param.tensor.accumulate_grad(tape.grad(*id))?;
            }
            sum_loss += tape.value_scalar(loss) as f64;
        }
        let m = batch.len() as f64;
        let inv = (1.0 / m) as f32;
        for p in disc.params_mut() {
            for g in p.tensor.grad_mut().unwrap() {
                *g *= inv;
            }
        }
        let lr = poly_lr(self.cfg.lr_disc, iter, self.cfg.n_iter, self.cfg.power)?;
        self.disc_opt.step(disc.params_mut(), lr)?;
        let mean = sum_loss / m;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { iter, gen: f64::NAN, disc: mean });
        }
        Ok(mean)
    }

    fn swa_network(&self) -> Result<Option<Network>> {
        match &self.swa {
            Some(state) => Ok(Some(self.gen.with_param_values(&state.values_f32())?)),
            None => Ok(None),
        }
    }

    fn record(&mut self, iter_done: usize, stats: &IterStats) -> Result<()> {
        let cm = evaluate_samples(&self.gen, &self.eval_data)?;
        let miou = cm.miou()?;
        let miou_swa = match self.swa_network()? {
            Some(net) => evaluate_samples(&net, &self.eval_data)?.miou()?,
            None => f64::NAN,
        };
        self.runlog.records.push(RunLogRecord {
            iter: iter_done,
            gen_loss: stats.gen_loss,
            mce: stats.mce,
            adv: stats.adv,
            disc_loss: stats.disc_loss,
            lr: stats.lr,
            miou,
            miou_swa,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn run(mut self) -> Result<TrainOutput> {
        let eval_every = self.cfg.effective_eval_every();
        for iter in 0..self.cfg.n_iter {
            let batch = self.prepare_batch()?;
            let (mut stats, detached) = self.gen_step(iter, &batch)?;
            self.swa_step(iter)?;
            stats.disc_loss = self.disc_step(iter, &batch, &detached)?;
            if (iter + 1) % eval_every == 0 || iter + 1 == self.cfg.n_iter {
                self.record(iter + 1, &stats)?;
            }
        }
        let swa = self.swa_network()?;
        let gen_opt_records = self.gen_opt.state_records(&format!("optim.{}.", self.gen_opt.name()));
        let disc_opt_records = if self.disc.is_some() {
            self.disc_opt.state_records(&format!("optim.{}.", self.disc_opt.name()))
        } else {
            Vec::new()
        };
        Ok(TrainOutput {
            gen: self.gen,
            disc: self.disc,
            swa,
            runlog: self.runlog,
            gen_opt_records,
            disc_opt_records,
        })
    }
}

fn load_datasets(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !cfg.data_manifest.is_empty() {
        let train = data::read_manifest(Path::new(&cfg.data_manifest), cfg.num_classes)?;
        let eval = if cfg.eval_manifest.is_empty() {
            train.clone()
        } else {
            data::read_manifest(Path::new(&cfg.eval_manifest), cfg.num_classes)?
        };
        return Ok((train, eval));
    }
    let base_spec = DatasetSpec {
        num_samples: cfg.data_samples,
        height: cfg.data_h,
        width: cfg.data_w,
        num_classes: cfg.num_classes,
        shapes_min: cfg.shapes_min,
        shapes_max: cfg.shapes_max,
        kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
        noise_std: cfg.noise_std,
        seed: cfg.data_seed,
        boundary_ignore: cfg.boundary_ignore,
    };
    let train = data::gen_synthetic(&base_spec)?;
    let mut eval_spec = base_spec;
    eval_spec.num_samples = cfg.eval_samples;
    eval_spec.seed = derive_seed(cfg.data_seed, TAG_EVAL_DATA);
    let eval = data::gen_synthetic(&eval_spec)?;
    Ok((train, eval))
}

/// Runs the full loop for the given config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    Trainer::new(cfg.clone())?.run()
}

/// Trains and writes runlog.csv plus final checkpoints into `out_dir`.
/// The generator checkpoint also carries the optimizer state and (when
/// averaging ran) the averaged weights under the "swa." prefix.
pub fn train_to_dir(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let out = train(cfg)?;

    std::fs::write(out_dir.join("runlog.csv"), out.runlog.to_csv())?;

    let mut gen_records = out.gen.to_records("");
    gen_records.extend(out.gen_opt_records.iter().cloned());
    if let Some(swa) = &out.swa {
        gen_records.extend(swa.to_records("swa."));
    }
    models::write_records(&out_dir.join(format!("gen_{}.ckpt", cfg.n_iter)), &gen_records)?;

    if let Some(swa) = &out.swa {
        swa.save(&out_dir.join(format!("swa_{}.ckpt", cfg.n_iter)))?;
    }
    if let Some(disc) = &out.disc {
        let mut records = disc.to_records("");
        records.extend(out.disc_opt_records.iter().cloned());
        models::write_records(&out_dir.join(format!("disc_{}.ckpt", cfg.n_iter)), &records)?;
    }
    Ok(out)
}

/// Forward + argmax over every sample, tallied into one confusion matrix.
pub fn evaluate_samples(net: &Network, samples: &[Sample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for sample in samples {
        let probs = models::forward_generator(net, &sample.image)?;
        let pred = argmax_labels(probs.tensor())?;
        cm.accumulate(&pred, &sample.labels)?;
    }
    Ok(cm)
}

/// Loads a checkpoint (optionally its "swa."-prefixed weights), evaluates it
/// over a manifest, and returns the CSV metric report.
pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, use_swa: bool) -> Result<String> {
    let records = models::read_records(ckpt)?;
    let prefix = if use_swa { "swa." } else { "" };
    let net = Network::from_records(&records, prefix).map_err(|e| match (use_swa, e) {
        (true, Error::Checkpoint(msg)) => {
            Error::Checkpoint(format!("{msg} (checkpoint has no averaged weights?)"))
        }
        (_, e) => e,
    })?;
    let samples = data::read_manifest(manifest, net.config().num_classes)?;
    evaluate_samples(&net, &samples)?.report_csv()
}

// ── sweeps and ablations ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    SwaN,
    ThSwa,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "n" => Ok(SweepParam::SwaN),
            "th_swa" => Ok(SweepParam::ThSwa),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (expected lambda, n or th_swa)"
            ))),
        }
    }
}

/// One full train+evaluate per value under a common seed; returns the
/// "value,best_miou,final_miou" CSV.
pub fn sweep(base: &TrainConfig, param: SweepParam, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut csv = String::from("value,best_miou,final_miou\n");
    for &v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Lambda => cfg.lambda = v as f32,
            SweepParam::SwaN => cfg.swa_n = v as usize,
            SweepParam::ThSwa => cfg.th_swa = v,
        }
        let out = train(&cfg)?;
        let best = out.runlog.best_test_miou().unwrap_or(f64::NAN);
        let fin = out.runlog.final_test_miou().unwrap_or(f64::NAN);
        csv.push_str(&format!("{v},{},{}\n", fmt6(best), fmt6(fin)));
    }
    Ok(csv)
}

#[derive(Debug, Clone, Copy)]
pub struct AblationCondition {
    pub name: &'static str,
    pub adv: AdvMode,
    pub swa: bool,
}

pub const ABLATION_CONDITIONS: [AblationCondition; 6] = [
    AblationCondition { name: "baseline", adv: AdvMode::Off, swa: false },
    AblationCondition { name: "baseline+swa", adv: AdvMode::Off, swa: true },
    AblationCondition { name: "standard", adv: AdvMode::Standard, swa: false },
    AblationCondition { name: "standard+swa", adv: AdvMode::Standard, swa: true },
    AblationCondition { name: "pixelwise", adv: AdvMode::Pixelwise, swa: false },
    AblationCondition { name: "pixelwise+swa", adv: AdvMode::Pixelwise, swa: true },
];

/// Final test mIoU per seed for one condition. All conditions share the data
/// (data_seed is untouched) and the per-replicate init seeds base.seed + k.
pub fn run_condition(
    base: &TrainConfig,
    condition: &AblationCondition,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut cfg = base.clone();
        cfg.adv_mode = condition.adv;
        cfg.swa_mode = if condition.swa {
            SwaSetting::On(SwaMode::RunningMean)
        } else {
            SwaSetting::Off
        };
        cfg.seed = s;
        let run = train(&cfg)?;
        out.push(run.runlog.final_test_miou().ok_or_else(|| {
            Error::Config("run produced no evaluation records".into())
        })?);
    }
    Ok(out)
}

/// The six-condition comparison over `num_seeds` replicates; emits one CSV
/// row per condition with mean and spread of the final mIoU.
pub fn ablation(base: &TrainConfig, num_seeds: usize) -> Result<String> {
    if num_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|k| base.seed + k).collect();
    let mut csv = String::from("condition,adv_mode,swa,seeds,mean_miou,std_miou,min_miou,max_miou\n");
    for cond in &ABLATION_CONDITIONS {
        let scores = run_condition(base, cond, &seeds)?;
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cond.name,
            cond.adv.name(),
            cond.swa,
            scores.len(),
            fmt6(mean),
            fmt6(var.sqrt()),
            fmt6(min),
            fmt6(max)
        ));
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.n_iter = 4;
        cfg.batch = 2;
        cfg.data_samples = 4;
        cfg.eval_samples = 2;
        cfg.data_h = 16;
        cfg.data_w = 16;
        cfg.base_width = 4;
        cfg.eval_every = 2;
        cfg.swa_n = 2;
        cfg
    }

    #[test]
    fn zero_iterations_leaves_generator_at_init() {
        let mut cfg = tiny_config();
        cfg.n_iter = 0;
        cfg.adv_mode = AdvMode::Off;
        cfg.swa_mode = SwaSetting::Off;
        let init = models::build_generator(cfg.net_config(), derive_seed(cfg.seed, TAG_GEN))
            .unwrap();
        let out = train(&cfg).unwrap();
        for (a, b) in init.params().iter().zip(out.gen.params()) {
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
        assert!(out.runlog.records.is_empty());
    }

    #[test]
    fn alternation_touches_only_the_right_network() {
        let cfg = tiny_config();
        let mut trainer = Trainer::new(cfg).unwrap();
        let batch = trainer.prepare_batch().unwrap();

        let disc_before: Vec<Vec<f32>> = trainer
            .disc
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|p| p.tensor.values().to_vec())
            .collect();
        let (_, detached) = trainer.gen_step(0, &batch).unwrap();
        let disc_after: Vec<Vec<f32>> = trainer
            .disc
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|p| p.tensor.values().to_vec())
            .collect();
        assert_eq!(disc_before, disc_after, "generator step must not move the discriminator");

        let gen_before: Vec<Vec<f32>> =
            trainer.gen.params().iter().map(|p| p.tensor.values().to_vec()).collect();
        trainer.disc_step(0, &batch, &detached).unwrap();
        let gen_after: Vec<Vec<f32>> =
            trainer.gen.params().iter().map(|p| p.tensor.values().to_vec()).collect();
        assert_eq!(gen_before, gen_after, "discriminator step must not move the generator");
    }

    #[test]
    fn config_round_trips_through_echo_and_apply() {
        let mut cfg = TrainConfig::default();
        cfg.lambda = 0.5;
        cfg.adv_mode = AdvMode::Standard;
        cfg.swa_mode = SwaSetting::Off;
        cfg.n_iter = 123;

        let mut rebuilt = TrainConfig::default();
        for line in cfg.echo().lines() {
            let (k, v) = line.split_once('=').unwrap();
            rebuilt.apply(k, v).unwrap();
        }
        assert_eq!(rebuilt.lambda, 0.5);
        assert_eq!(rebuilt.adv_mode, AdvMode::Standard);
        assert_eq!(rebuilt.swa_mode, SwaSetting::Off);
        assert_eq!(rebuilt.n_iter, 123);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.apply("learning_rate", "0.1"), Err(Error::Config(_))));
        assert!(cfg.apply("lambda", "not a number").is_err());
    }

    #[test]
    fn invalid_config_values_are_rejected() {
        let mut cfg = tiny_config();
        cfg.th_swa = 1.5;
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.data_h = 18; // not divisible by 4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = tiny_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        for (x, y) in a.gen.params().iter().zip(b.gen.params()) {
            assert_eq!(x.tensor.values(), y.tensor.values());
        }
        assert_eq!(a.runlog.records.len(), b.runlog.records.len());
        for (r, s) in a.runlog.records.iter().zip(&b.runlog.records) {
            assert_eq!(r.gen_loss, s.gen_loss);
            assert_eq!(r.miou, s.miou);
        }
    }

    #[test]
    fn lambda_zero_matches_adversary_off_bit_exactly() {
        let mut with_disc = tiny_config();
        with_disc.lambda = 0.0;
        with_disc.adv_mode = AdvMode::Pixelwise;
        let mut without = tiny_config();
        without.lambda = 0.0;
        without.adv_mode = AdvMode::Off;

        let a = train(&with_disc).unwrap();
        let b = train(&without).unwrap();
        for (x, y) in a.gen.params().iter().zip(b.gen.params()) {
            assert_eq!(x.tensor.values(), y.tensor.values());
        }
    }

    #[test]
    fn runlog_csv_layout() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let csv = out.runlog.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), RunLog::CSV_HEADER);
        let first = lines.next().unwrap();
        assert_eq!(first.split(',').count(), 9);
        // Records at iterations 2 and 4.
        assert_eq!(out.runlog.records[0].iter, 2);
        assert_eq!(out.runlog.records[1].iter, 4);
    }

    #[test]
    fn static_discriminator_game_is_winnable() {
        // A frozen generator emits a fixed distinguishable fake; 200 Adam
        // steps must drive the discriminator loss down on average.
        use rand::Rng;
        let net_cfg = NetConfig {
            in_channels: 3,
            num_classes: 4,
            base_width: 4,
            depth: 2,
            leaky_slope: 0.2,
        };
        let mut disc =
            models::build_discriminator(net_cfg, 5, HeadKind::Pixelwise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Fake: softmax of noise; real: one-hot of random labels.
        let fake = {
            let mut tape = Tape::new();
            let raw = Tensor::randn(vec![4, 16, 16], 1.0, &mut rng);
            let leaf = tape.leaf(&raw);
            let sm = tape.softmax_channels(leaf).unwrap();
            tape.tensor(sm)
        };
        let classes: Vec<u8> = (0..256).map(|_| rng.gen_range(0..4u8)).collect();
        let labels = crate::types::LabelMap::new(16, 16, classes, 4).unwrap();
        let real = data::one_hot(&labels).unwrap();

        let mut opt = crate::optim::Adam::new(0.9, 0.99, 1e-8);
        let mut history = Vec::new();
        for _ in 0..200 {
            for p in disc.params_mut() {
                p.tensor.ensure_grad();
                p.tensor.zero_grad();
            }
            let mut tape = Tape::new();
            let ids = disc.register_params(&mut tape);
            let fake_leaf = tape.leaf(&fake);
            let real_leaf = tape.leaf(&real);
            let cf = disc.forward_with(&mut tape, &ids, fake_leaf).unwrap();
            let cr = disc.forward_with(&mut tape, &ids, real_leaf).unwrap();
            let loss = losses::disc_loss(&mut tape, cf, cr, Reduction::Mean).unwrap();
            tape.backward(loss).unwrap();
            for (param, id) in disc.params_mut().iter_mut().zip(&ids) {
                param.tensor.accumulate_grad(tape.grad(*id)).unwrap();
            }
            opt.step(disc.params_mut(), 1e-3).unwrap();
            history.push(tape.value_scalar(loss) as f64);
        }
        let early: f64 = history[..50].iter().sum::<f64>() / 50.0;
        let late: f64 = history[150..].iter().sum::<f64>() / 50.0;
        assert!(
            late < early,
            "discriminator failed the static game: early {early:.4} vs late {late:.4}"
        );
        assert!(history[199] < history[0]);
    }

    #[test]
    fn sweep_single_value_equals_plain_run() {
        let cfg = tiny_config();
        let csv = sweep(&cfg, SweepParam::Lambda, &[0.01]).unwrap();
        let run = train(&cfg).unwrap();
        let expect_final = run.runlog.final_test_miou().unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "0.01");
        assert_eq!(fields[2], fmt6(expect_final));
    }

    #[test]
    fn evaluating_a_net_against_its_own_argmax_is_perfect() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        let samples = load_datasets(&cfg).unwrap().1;
        // Replace ground truth with the net's own predictions.
        let mut self_labeled = Vec::new();
        for s in &samples {
            let probs = models::forward_generator(&out.gen, &s.image).unwrap();
            let pred = argmax_labels(probs.tensor()).unwrap();
            self_labeled.push(Sample { image: s.image.clone(), labels: pred });
        }
        let cm = evaluate_samples(&out.gen, &self_labeled).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.overall_acc().unwrap(), 1.0);
    }
}

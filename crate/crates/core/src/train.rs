//! Minibatch training with Adam, per-epoch validation SSIM, best/last
//! checkpoints and a CSV history.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::priors::SliceSample;
use crate::ssim::{ssim, SsimParams};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    L2,
    OneMinusSsim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write `checkpoint_last.tar` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Used by the SSIM loss and for validation.
    pub ssim: SsimParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::L1,
            optimizer: Optimizer::default(),
            lr: 1e-4,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            checkpoint_every: 1,
            ssim: SsimParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let Optimizer::Adam { beta1, beta2, eps } = self.optimizer;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        self.ssim.validate()
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub root: u64,
}

/// Derives every random stream of a run (initialization, data order,
/// corruption and prior sampling) from `seed`.
pub fn seed_all(seed: u64) -> Seeds {
    Seeds { root: seed }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Seeds {
    pub fn derive(&self, parts: &[u64]) -> u64 {
        parts
            .iter()
            .fold(splitmix(self.root), |acc, &p| splitmix(acc ^ splitmix(p)))
    }

    pub fn rng(&self, parts: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(parts))
    }

    pub fn init(&self) -> u64 {
        self.derive(&[1])
    }

    pub fn shuffle(&self, epoch: usize) -> ChaCha8Rng {
        self.rng(&[2, epoch as u64])
    }

    /// Stream for one sample of one split in one epoch.
    pub fn sample(&self, split: u64, epoch: usize, key: u64) -> ChaCha8Rng {
        self.rng(&[3, split, epoch as u64, key])
    }
}

/// Training data addressed by epoch, so samples can be re-drawn every epoch.
pub trait SampleProvider {
    fn len(&self) -> usize;

    fn get(&self, epoch: usize, index: usize) -> Result<SliceSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleProvider for [SliceSample] {
    fn len(&self) -> usize {
        <[SliceSample]>::len(self)
    }

    fn get(&self, _epoch: usize, index: usize) -> Result<SliceSample> {
        <[SliceSample]>::get(self, index).cloned().ok_or(Error::OutOfRange {
            index,
            len: <[SliceSample]>::len(self),
        })
    }
}

impl SampleProvider for Vec<SliceSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, epoch: usize, index: usize) -> Result<SliceSample> {
        SampleProvider::get(self.as_slice(), epoch, index)
    }
}

/// Corrupted inputs, stacked priors (if any) and targets.
pub type Batch<T> = (Tensor<T>, Option<Tensor<T>>, Tensor<T>);

/// Stacks samples into `(corrupted, priors, target)` batch tensors. Priors
/// are omitted when `n_prior` is 0.
pub fn batch_tensors<T: Real>(
    samples: &[&SliceSample],
    n_prior: usize,
) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = first.shape();
    let b = samples.len();
    let mut corrupted = Vec::with_capacity(b * h * w);
    let mut target = Vec::with_capacity(b * h * w);
    let mut priors = Vec::with_capacity(b * n_prior * h * w);
    let cast = |a: &Array2<f32>, out: &mut Vec<T>| out.extend(a.iter().map(|&v| T::from_f64_lossy(v as f64)));
    for s in samples {
        if s.shape() != (h, w) || s.corrupted.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes slice shapes {:?} and {:?}",
                (h, w),
                s.shape()
            )));
        }
        if n_prior > 0 {
            if s.priors.len() != n_prior {
                return Err(Error::Config(format!(
                    "model expects {n_prior} prior channels, sample {}:{} has {}",
                    s.subject_id,
                    s.slice_index,
                    s.priors.len()
                )));
            }
            for p in &s.priors {
                cast(p, &mut priors);
            }
        }
        cast(&s.corrupted, &mut corrupted);
        cast(&s.target, &mut target);
    }
    Ok((
        Tensor::from_vec([b, 1, h, w], corrupted)?,
        if n_prior > 0 {
            Some(Tensor::from_vec([b, n_prior, h, w], priors)?)
        } else {
            None
        },
        Tensor::from_vec([b, 1, h, w], target)?,
    ))
}

fn loss_node<T: Real>(
    g: &mut Graph<T>,
    pred: crate::autograd::Var,
    target: crate::autograd::Var,
    kind: LossKind,
    p: &SsimParams,
) -> Result<crate::autograd::Var> {
    match kind {
        LossKind::L1 => g.l1_loss(pred, target),
        LossKind::L2 => g.l2_loss(pred, target),
        LossKind::OneMinusSsim => g.ssim_loss(pred, target, p),
    }
}

/// Batch loss: mean absolute error, mean squared error, or 1 − mean SSIM.
pub fn compute_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let l = loss_node(&mut g, p, t, kind, &SsimParams::default())?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, model: &mut Model<f32>, grads: &[Tensor<f32>], lr: f64, opt: Optimizer) {
        let Optimizer::Adam { beta1, beta2, eps } = opt;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }

    fn store(&self, model: &Model<f32>, ck: &mut Checkpoint) {
        for (i, name) in model.param_names().enumerate() {
            ck.extra.insert(format!("adam.m.{name}"), self.m[i].clone());
            ck.extra.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
    }

    fn restore(model: &Model<f32>, ck: &Checkpoint) -> Result<Self> {
        let mut state = AdamState::new(model);
        state.step = ck.meta.get("step").and_then(Value::as_u64).unwrap_or(0);
        for (i, spec) in model.param_specs().iter().enumerate() {
            for (key, dst) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let name = format!("adam.{key}.{}", spec.name);
                let src = ck
                    .extra
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("no optimizer state {name}")))?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimizer state {name} has wrong length")));
                }
                dst.copy_from_slice(src);
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ssim: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<EpochRecord>,
    /// Set when samples were produced by concurrent loaders.
    pub nondeterministic: bool,
}

impl TrainHistory {
    /// `epoch,train_loss,val_ssim`; floats in shortest round-trip form so
    /// identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_ssim\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_ssim);
        }
        s
    }

    /// Wall time per epoch, kept apart from the reproducible history.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:.3}", e.epoch, e.seconds);
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.entries
            .iter()
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.val_ssim >= e.val_ssim => Some(b),
                _ => Some(e),
            })
    }
}

/// Inference over samples in batches; returns one image per sample.
pub fn predict(model: &Model<f32>, samples: &[SliceSample], batch_size: usize) -> Result<Vec<Array2<f32>>> {
    let n_prior = model.config().effective_priors();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (x, p, _) = batch_tensors::<f32>(&refs, n_prior)?;
        let y = model.forward(&x, p.as_ref())?;
        let [_, _, h, w] = y.shape();
        for i in 0..chunk.len() {
            out.push(Array2::from_shape_vec((h, w), y.item(i).to_vec()).expect("h*w values"));
        }
    }
    Ok(out)
}

/// Mean SSIM of the model outputs against the targets.
pub fn validation_ssim(model: &Model<f32>, samples: &[SliceSample], batch_size: usize, p: &SsimParams) -> Result<f64> {
    let outputs = predict(model, samples, batch_size)?;
    let mut total = 0.0;
    for (o, s) in outputs.iter().zip(samples) {
        total += ssim(o, &s.target, p)?.mean;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints and CSVs are written; nothing is written if `None`.
    pub out_dir: Option<&'a Path>,
    /// Continue from a `checkpoint_last` written by an earlier run.
    pub resume: Option<&'a Checkpoint>,
    /// Extra metadata stored in every checkpoint.
    pub meta: Value,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: TrainHistory,
}

pub const BEST_CHECKPOINT: &str = "checkpoint_best.tar";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.tar";
pub const HISTORY_CSV: &str = "history.csv";
pub const TIMINGS_CSV: &str = "timings.csv";

fn history_from_meta(meta: &Value) -> Result<Vec<EpochRecord>> {
    match meta.get("history") {
        Some(h) => Ok(serde_json::from_value(h.clone())?),
        None => Ok(Vec::new()),
    }
}

fn make_checkpoint(
    model: &Model<f32>,
    adam: &AdamState,
    history: &[EpochRecord],
    cfg: &TrainConfig,
    extra_meta: &Value,
) -> Result<Checkpoint> {
    let last = history.last().expect("checkpoint after at least one epoch");
    let best = history.iter().map(|e| e.val_ssim).fold(f64::NEG_INFINITY, f64::max);
    let meta = json!({
        "epoch": last.epoch,
        "step": adam.step,
        "val_ssim": last.val_ssim,
        "best_val_ssim": best,
        "train": serde_json::to_value(cfg)?,
        "history": serde_json::to_value(history)?,
        "run": extra_meta,
    });
    let mut ck = Checkpoint::from_model(model, meta);
    adam.store(model, &mut ck);
    Ok(ck)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains `model` for `cfg.epochs` epochs (beyond any resumed ones).
///
/// Each epoch visits the training set in a seeded random order; after the
/// epoch the model is scored on `val_set` by mean SSIM. The checkpoint with
/// the highest validation SSIM and the final checkpoint are returned and,
/// with an output directory, written as `checkpoint_best.tar` and
/// `checkpoint_last.tar` alongside `history.csv` and `timings.csv`.
pub fn train(
    mut model: Model<f32>,
    train_set: &dyn SampleProvider,
    val_set: &[SliceSample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let n_prior = model.config().effective_priors();
    batch_tensors::<f32>(&[&train_set.get(0, 0)?], n_prior)?;
    batch_tensors::<f32>(&val_set.iter().collect::<Vec<_>>(), n_prior)?;

    let seeds = seed_all(cfg.seed);
    let (mut adam, mut history) = match opts.resume {
        Some(ck) => {
            if ck.config != *model.config() {
                return Err(Error::Config("resume checkpoint has a different model config".into()));
            }
            model = ck.to_model()?;
            (AdamState::restore(&model, ck)?, history_from_meta(&ck.meta)?)
        }
        None => (AdamState::new(&model), Vec::new()),
    };
    let mut best: Option<Checkpoint> = None;
    let mut best_val = history.iter().map(|e| e.val_ssim).fold(f64::NEG_INFINITY, f64::max);
    if let (Some(dir), Some(_)) = (opts.out_dir, opts.resume) {
        // keep the earlier best unless this run beats it
        let p = dir.join(BEST_CHECKPOINT);
        if p.exists() {
            best = Some(Checkpoint::load(&p)?);
        }
    }
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let first_epoch = history.last().map_or(0, |e| e.epoch + 1);
    let mut last = None;
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeds.shuffle(epoch));
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples = idx
                .iter()
                .map(|&i| train_set.get(epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SliceSample> = samples.iter().collect();
            let (x, p, t) = batch_tensors::<f32>(&refs, n_prior)?;
            let mut g = Graph::new();
            let params = model.bind_trainable(&mut g);
            let xv = g.input(x);
            let pv = p.map(|p| g.input(p));
            let tv = g.input(t);
            let y = model.forward_graph(&mut g, &params, xv, pv)?;
            let l = loss_node(&mut g, y, tv, cfg.loss, &cfg.ssim)?;
            let loss = g.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let mut grads = g.backward(l)?;
            let grads: Vec<Tensor<f32>> = params
                .iter()
                .map(|&v| grads.take(v).expect("every parameter feeds the loss"))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut model, &grads, cfg.lr, cfg.optimizer);
            loss_sum += loss * idx.len() as f64;
        }
        let val_ssim = validation_ssim(&model, val_set, cfg.batch_size, &cfg.ssim)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_ssim,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.push(record);
        if let Some(f) = opts.on_epoch.as_mut() {
            f(&record);
        }

        let is_last = epoch + 1 == first_epoch + cfg.epochs;
        let periodic = cfg.checkpoint_every > 0 && (epoch + 1 - first_epoch) % cfg.checkpoint_every == 0;
        if val_ssim > best_val || best.is_none() && val_ssim >= best_val {
            best_val = val_ssim;
            let ck = make_checkpoint(&model, &adam, &history, cfg, &opts.meta)?;
            if let Some(dir) = opts.out_dir {
                ck.save(dir.join(BEST_CHECKPOINT))?;
            }
            best = Some(ck);
        }
        if is_last || periodic {
            let ck = make_checkpoint(&model, &adam, &history, cfg, &opts.meta)?;
            if let Some(dir) = opts.out_dir {
                ck.save(dir.join(LAST_CHECKPOINT))?;
                let h = TrainHistory {
                    entries: history.clone(),
                    nondeterministic: false,
                };
                write_file(&dir.join(HISTORY_CSV), &h.to_csv())?;
                write_file(&dir.join(TIMINGS_CSV), &h.timings_csv())?;
            }
            last = Some(ck);
        }
    }
    let last = last.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history: TrainHistory {
            entries: history,
            nondeterministic: false,
        },
    })
}

//! End-to-end orchestration: run configuration, dataset preparation,
//! training and evaluation runs, volume simulation and phantom datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, evaluate_outputs, identity, ComparisonTable, EvalReport};
use crate::models::{build_model, Injection, ModelConfig};
use crate::motion::{corrupt_volume, MotionConfig, MotionTrace};
use crate::priors::{make_sample, PriorMode, SampleSource, SliceSample, VolumeStore};
use crate::ssim::SsimParams;
use crate::train::{predict, seed_all, train, SampleProvider, Seeds, TrainConfig, TrainOptions, TrainOutcome};
use crate::volume::{
    central_range, foreground_fraction, generate_phantom, normalize, read_volume, split_subjects, write_volume,
    Contrast, DatasetManifest, ManifestEntry, NormalizeMode, Split, SplitCounts, MIN_FOREGROUND_FRACTION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A manifest JSON file, or a directory of IXI-named NIfTI files.
    pub manifest: PathBuf,
    pub target_contrast: Contrast,
    pub slice_axis: usize,
    /// Fraction of slices kept around the volume centre.
    pub keep_fraction: f32,
    pub min_foreground: f32,
    pub normalize: NormalizeMode,
    /// Re-split subjects with the run seed; `None` keeps the manifest's split.
    pub split: Option<SplitCounts>,
    /// Draw fresh motion (and fresh similar-slice donors) every epoch.
    pub redraw_each_epoch: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("data/manifest.json"),
            target_contrast: Contrast::T2,
            slice_axis: 2,
            keep_fraction: 0.6,
            min_foreground: MIN_FOREGROUND_FRACTION,
            normalize: NormalizeMode::default(),
            split: None,
            redraw_each_epoch: true,
        }
    }
}

/// Everything one experiment needs, as a single JSON document.
///
/// `seed` is the only seed that matters: [`RunConfig::resolved`] copies it
/// into the motion and training sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub motion: MotionConfig,
    pub prior: PriorMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ssim: SsimParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            motion: MotionConfig::default(),
            prior: PriorMode::None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ssim: SsimParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Applies a `section.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    /// Propagates the global seed into the sections that carry their own.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.motion.seed = c.seed;
        c.train.seed = c.seed;
        c.train.ssim = c.ssim;
        c
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.ssim.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.prior.validate(self.data.target_contrast)?;
        let d = &self.data;
        if d.slice_axis > 2 {
            return Err(Error::Config(format!(
                "data.slice_axis must be 0, 1 or 2, got {}",
                d.slice_axis
            )));
        }
        if !(d.keep_fraction > 0.0 && d.keep_fraction <= 1.0) {
            return Err(Error::Config("data.keep_fraction must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&d.min_foreground) {
            return Err(Error::Config("data.min_foreground must be in [0, 1]".into()));
        }
        if self.model.injection != Injection::Baseline && self.model.n_prior != self.prior.count() {
            return Err(Error::Config(format!(
                "model expects {} priors but the prior mode supplies {}",
                self.model.n_prior,
                self.prior.count()
            )));
        }
        Ok(())
    }

    /// [`RunConfig::validate`] plus existence of the dataset.
    pub fn validate_paths(&self) -> Result<()> {
        self.validate()?;
        if !self.data.manifest.exists() {
            return Err(Error::Config(format!(
                "data.manifest {} does not exist",
                self.data.manifest.display()
            )));
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        DatasetManifest::from_directory(path)
    } else {
        DatasetManifest::load(path)
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// FNV-1a, used to key random streams by subject id.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Loaded, normalized volumes and the usable slices of each split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub store: VolumeStore,
    pub target: Contrast,
    pub slices: BTreeMap<Split, Vec<(String, usize)>>,
}

impl Dataset {
    /// Loads the target contrast plus every contrast any of `modes` needs.
    /// Subjects missing one of them are left out.
    pub fn prepare(cfg: &RunConfig, modes: &[&PriorMode]) -> Result<Self> {
        let d = &cfg.data;
        let mut manifest = load_manifest(&d.manifest)?;
        if let Some(counts) = d.split {
            manifest = split_subjects(&manifest, counts, cfg.seed)?;
        }
        if manifest.split.is_empty() {
            return Err(Error::Config("manifest has no train/val/test split".into()));
        }
        let mut contrasts = vec![d.target_contrast];
        for m in modes {
            for &c in m.extra_contrasts() {
                if !contrasts.contains(&c) {
                    contrasts.push(c);
                }
            }
        }
        let subjects: Vec<&str> = manifest
            .entries
            .iter()
            .map(|e| e.subject_id.as_str())
            .filter(|s| manifest.split_of(s).is_some() && manifest.has_contrasts(s, &contrasts))
            .collect();
        let store = VolumeStore::load(&manifest, &subjects, &contrasts, d.slice_axis, d.normalize)?;
        let multiple = cfg.model.size_multiple();
        let mut slices: BTreeMap<Split, Vec<(String, usize)>> = BTreeMap::new();
        for &s in &subjects {
            let len = store.n_slices(s, d.target_contrast).expect("loaded above");
            for z in central_range(len, d.keep_fraction) {
                let img = store.slice(s, d.target_contrast, z, len)?;
                let (h, w) = img.dim();
                if h % multiple != 0 || w % multiple != 0 {
                    return Err(Error::Config(format!(
                        "slices of {s} are {h}x{w}; the model needs multiples of {multiple}"
                    )));
                }
                if foreground_fraction(&img) >= d.min_foreground {
                    let split = manifest.split_of(s).expect("filtered above");
                    slices.entry(split).or_default().push((s.to_string(), z));
                }
            }
        }
        Ok(Dataset {
            manifest,
            store,
            target: d.target_contrast,
            slices,
        })
    }

    pub fn slice_count(&self, split: Split) -> usize {
        self.slices.get(&split).map_or(0, Vec::len)
    }

    pub fn samples<'a>(&'a self, cfg: &RunConfig, mode: &'a PriorMode, split: Split) -> SplitSamples<'a> {
        SplitSamples {
            data: self,
            split,
            motion: cfg.motion,
            mode,
            seeds: seed_all(cfg.seed),
            redraw: cfg.data.redraw_each_epoch && split == Split::Train,
        }
    }
}

/// Samples of one split, generated on demand. The random stream of each
/// sample depends on the seed, split, subject, slice and (when re-drawing)
/// epoch, never on the prior mode, so every mode sees the same corruption.
pub struct SplitSamples<'a> {
    data: &'a Dataset,
    split: Split,
    motion: MotionConfig,
    mode: &'a PriorMode,
    seeds: Seeds,
    redraw: bool,
}

impl SplitSamples<'_> {
    /// All samples as drawn for epoch 0.
    pub fn materialize(&self) -> Result<Vec<SliceSample>> {
        (0..self.len()).map(|i| self.get(0, i)).collect()
    }
}

impl SampleProvider for SplitSamples<'_> {
    fn len(&self) -> usize {
        self.data.slice_count(self.split)
    }

    fn get(&self, epoch: usize, index: usize) -> Result<SliceSample> {
        let list = self.data.slices.get(&self.split).map(Vec::as_slice).unwrap_or(&[]);
        let (subject, z) = list.get(index).ok_or(Error::OutOfRange { index, len: list.len() })?;
        let epoch = if self.redraw { epoch as u64 } else { 0 };
        let mut rng = self
            .seeds
            .rng(&[3, split_tag(self.split), epoch, fnv1a(subject), *z as u64]);
        let store = &self.data.store;
        let len = store.n_slices(subject, self.data.target).expect("prepared subject");
        let clean = store.slice(subject, self.data.target, *z, len)?;
        let src = SampleSource {
            manifest: &self.data.manifest,
            store,
            subject,
            target_contrast: self.data.target,
            slice_index: *z,
        };
        make_sample(&clean, &self.motion, self.mode, src, &mut rng)
    }
}

/// Metadata stored in every checkpoint of a run; enough to rebuild its
/// evaluation inputs.
fn run_meta(cfg: &RunConfig) -> Value {
    json!({
        "seed": cfg.seed,
        "prior": cfg.prior,
        "target_contrast": cfg.data.target_contrast,
    })
}

/// Prior mode a checkpoint was trained with, falling back to `default`.
pub fn checkpoint_prior(ck: &Checkpoint, default: &PriorMode) -> PriorMode {
    ck.meta
        .get("run")
        .and_then(|r| r.get("prior"))
        .and_then(|p| serde_json::from_value(p.clone()).ok())
        .unwrap_or_else(|| default.clone())
}

/// Trains the configured model. Checkpoints and CSVs go to `out_dir` if given.
pub fn train_run<'a>(
    cfg: &RunConfig,
    out_dir: Option<&'a Path>,
    resume: Option<&'a Checkpoint>,
    on_epoch: Option<&'a mut dyn FnMut(&crate::train::EpochRecord)>,
) -> Result<TrainOutcome> {
    let cfg = cfg.resolved();
    cfg.validate_paths()?;
    let data = Dataset::prepare(&cfg, &[&cfg.prior])?;
    let train_set = data.samples(&cfg, &cfg.prior, Split::Train);
    let val_set = data.samples(&cfg, &cfg.prior, Split::Val).materialize()?;
    let model = build_model(&cfg.model, seed_all(cfg.seed).init())?;
    let opts = TrainOptions {
        out_dir,
        resume,
        meta: run_meta(&cfg),
        on_epoch,
    };
    train(model, &train_set, &val_set, &cfg.train, opts)
}

/// Test-split evaluation of several checkpoints against the uncorrected input.
#[derive(Debug, Clone)]
pub struct EvalRun {
    /// The `corrupted` baseline first, then one report per checkpoint.
    pub reports: Vec<EvalReport>,
    pub table: ComparisonTable,
    /// Clean targets and corrupted inputs (identical for every method).
    pub targets: Vec<Array2<f32>>,
    pub corrupted: Vec<Array2<f32>>,
    /// Model outputs, one list per checkpoint.
    pub outputs: Vec<Vec<Array2<f32>>>,
}

pub const CORRUPTED_LABEL: &str = "corrupted";

pub fn evaluate_run(cfg: &RunConfig, checkpoints: &[(String, Checkpoint)]) -> Result<EvalRun> {
    let cfg = cfg.resolved();
    cfg.validate_paths()?;
    let modes: Vec<PriorMode> = checkpoints
        .iter()
        .map(|(_, ck)| checkpoint_prior(ck, &cfg.prior))
        .collect();
    let mut all_modes: Vec<&PriorMode> = modes.iter().collect();
    all_modes.push(&cfg.prior);
    let data = Dataset::prepare(&cfg, &all_modes)?;
    let base = data.samples(&cfg, &PriorMode::None, Split::Test).materialize()?;
    if base.is_empty() {
        return Err(Error::Config("test split has no usable slices".into()));
    }
    let mut reports = vec![evaluate(identity, &base, &cfg.ssim, CORRUPTED_LABEL)?];
    let mut outputs = Vec::with_capacity(checkpoints.len());
    for ((label, ck), mode) in checkpoints.iter().zip(&modes) {
        let model = ck.to_model()?;
        let n = model.config().effective_priors();
        let mode = if n == 0 { &PriorMode::None } else { mode };
        if mode.count() != n {
            return Err(Error::Config(format!(
                "checkpoint {label} expects {n} priors but its prior mode supplies {}",
                mode.count()
            )));
        }
        let samples = data.samples(&cfg, mode, Split::Test).materialize()?;
        let out = predict(&model, &samples, cfg.train.batch_size)?;
        reports.push(evaluate_outputs(&out, &samples, &cfg.ssim, label)?);
        outputs.push(out);
    }
    let table = aggregate(&reports)?;
    Ok(EvalRun {
        reports,
        table,
        targets: base.iter().map(|s| s.target.clone()).collect(),
        corrupted: base.into_iter().map(|s| s.corrupted).collect(),
        outputs,
    })
}

/// One simulated volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedVolume {
    pub subject_id: String,
    pub contrast: Contrast,
    pub clean: PathBuf,
    pub corrupted: PathBuf,
    pub traces: PathBuf,
}

/// Corrupts the target contrast of every manifest subject, writing
/// `<subject>-<contrast>_corrupted.nii.gz` and `<subject>-<contrast>_traces.json`.
/// All inputs are read and corrupted before anything is written.
pub fn simulate_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<SimulatedVolume>> {
    let cfg = cfg.resolved();
    cfg.validate_paths()?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let seeds = seed_all(cfg.seed);
    let contrast = cfg.data.target_contrast;
    let mut results = Vec::new();
    for e in &manifest.entries {
        if !e.files.contains_key(&contrast) {
            continue;
        }
        let clean = manifest.path_of(&e.subject_id, contrast)?;
        let mut v = read_volume(&clean)?;
        if !v.is_normalized() {
            v = normalize(&v, cfg.data.normalize)?;
        }
        let motion = MotionConfig {
            seed: seeds.derive(&[4, fnv1a(&e.subject_id)]),
            ..cfg.motion
        };
        let (corrupted, traces) = corrupt_volume(&v, &motion, cfg.data.slice_axis)?;
        results.push((e.subject_id.clone(), clean, corrupted, traces));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(results.len());
    for (subject, clean, v, traces) in results {
        let stem = format!("{subject}-{contrast}");
        let vol_path = out_dir.join(format!("{stem}_corrupted.nii.gz"));
        let trace_path = out_dir.join(format!("{stem}_traces.json"));
        write_volume(&v, &vol_path)?;
        let text = serde_json::to_string_pretty::<Vec<MotionTrace>>(&traces)?;
        fs::write(&trace_path, text).map_err(|e| Error::io(&trace_path, e))?;
        out.push(SimulatedVolume {
            subject_id: subject,
            contrast,
            clean,
            corrupted: vol_path,
            traces: trace_path,
        });
    }
    Ok(out)
}

/// Writes `n_subjects` multi-contrast phantoms and a `manifest.json` to `dir`.
pub fn write_phantom_dataset(
    dir: &Path,
    seed: u64,
    n_subjects: usize,
    size: [usize; 3],
    n_shapes: usize,
) -> Result<DatasetManifest> {
    let seeds = seed_all(seed);
    let mut sets = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        sets.push(generate_phantom(seeds.derive(&[5, i as u64]), size, n_shapes)?);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_subjects);
    for (i, set) in sets.into_iter().enumerate() {
        let id = format!("PH{i:03}");
        let mut files = BTreeMap::new();
        for (c, mut v) in set {
            v.subject_id = id.clone();
            let name = PathBuf::from(format!("{id}-{c}.nii"));
            write_volume(&v, dir.join(&name))?;
            files.insert(c, name);
        }
        entries.push(ManifestEntry { subject_id: id, files });
    }
    let manifest = DatasetManifest::new(entries).with_root(dir);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;

    #[test]
    fn config_round_trips_and_overrides() {
        let mut c = RunConfig::default();
        c.set("train.epochs=3").unwrap();
        c.set("data.target_contrast=PD").unwrap();
        c.set(r#"prior={"kind":"contrasts","contrasts":["T1","T2"]}"#).unwrap();
        c.set("motion.rot_range_deg=[0,0]").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.data.target_contrast, Contrast::PD);
        assert_eq!(c.prior.count(), 2);
        assert_eq!(c.motion.rot_range_deg, (0.0, 0.0));
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert!(c.set("train.nope=1").is_err());
        assert!(c.set("train.epochs=many").is_err());
        assert!(c.set("novalue").is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn validation_catches_prior_mismatch() {
        let mut c = RunConfig {
            model: ModelConfig::desk(Arch::Unet, Injection::Multichannel, 0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.model.n_prior = 2;
        c.prior = PriorMode::contrasts();
        assert!(c.validate().is_ok());
        c.prior = PriorMode::similar_slices();
        assert!(c.validate().is_err());
        c.data.keep_fraction = 0.0;
        c.prior = PriorMode::contrasts();
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolved_propagates_seed() {
        let c = RunConfig {
            seed: 42,
            ..Default::default()
        }
        .resolved();
        assert_eq!((c.motion.seed, c.train.seed), (42, 42));
    }

    #[test]
    fn phantom_dataset_and_preparation() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_phantom_dataset(dir.path(), 1, 5, [16, 16, 16], 4).unwrap();
        assert_eq!(m.entries.len(), 5);
        let mut cfg = RunConfig {
            model: ModelConfig {
                depth: 2,
                ..ModelConfig::desk(Arch::Unet, Injection::Multichannel, 2)
            },
            prior: PriorMode::contrasts(),
            ..Default::default()
        };
        cfg.data.manifest = dir.path().join("manifest.json");
        cfg.data.split = Some(SplitCounts {
            train: 3,
            val: 1,
            test: 1,
        });
        cfg.data.keep_fraction = 0.5;
        let data = Dataset::prepare(&cfg, &[&cfg.prior]).unwrap();
        assert_eq!(data.slice_count(Split::Train), 24);
        assert_eq!(data.slice_count(Split::Test), 8);

        // same corruption regardless of the prior mode; train samples re-drawn per epoch
        let a = data.samples(&cfg, &cfg.prior, Split::Test).get(0, 3).unwrap();
        let b = data.samples(&cfg, &PriorMode::None, Split::Test).get(0, 3).unwrap();
        assert_eq!(a.corrupted, b.corrupted);
        assert_eq!(a.priors.len(), 2);
        let t = data.samples(&cfg, &cfg.prior, Split::Train);
        assert_ne!(t.get(0, 0).unwrap().corrupted, t.get(1, 0).unwrap().corrupted);
        assert_eq!(t.get(1, 0).unwrap(), t.get(1, 0).unwrap());
    }

    #[test]
    fn simulate_writes_volumes_and_traces() {
        let dir = tempfile::tempdir().unwrap();
        write_phantom_dataset(&dir.path().join("in"), 2, 2, [16, 16, 16], 3).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.manifest = dir.path().join("in/manifest.json");
        cfg.motion.n_movements = 3;
        let out = simulate_dataset(&cfg, &dir.path().join("out")).unwrap();
        assert_eq!(out.len(), 2);
        let traces: Vec<MotionTrace> = serde_json::from_str(&fs::read_to_string(&out[0].traces).unwrap()).unwrap();
        assert_eq!(traces.len(), 16);
        let v = read_volume(&out[0].corrupted).unwrap();
        assert_eq!(v.shape(), [16, 16, 16]);
    }
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use motionprior::checkpoint::Checkpoint;
use motionprior::eval::EvalReport;
use motionprior::pipeline::{evaluate_run, simulate_dataset, train_run, write_phantom_dataset, RunConfig};
use motionprior::train::{EpochRecord, BEST_CHECKPOINT, LAST_CHECKPOINT};
use motionprior::volume::{normalize, read_array2, read_volume, write_array2};
use serde::{Deserialize, Serialize};

use crate::render;
use crate::RunArgs;

pub const CONFIG_FILE: &str = "config.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const DIFFERENCES_CSV: &str = "median_differences.csv";
pub const BOXPLOT_PNG: &str = "boxplot.png";
pub const PANEL_PNG: &str = "example_panel.png";
const REPORTS_DIR: &str = "reports";
const EXAMPLE_DIR: &str = "example";
const MIN_PHANTOM_SIZE: usize = 16;

/// Exit status 1 for bad input caught before any side effect, 2 for everything else.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<motionprior::Error> for Failure {
    fn from(e: motionprior::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

trait Invalid<T> {
    fn invalid(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Invalid<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
}

type Outcome = Result<(), Failure>;

fn load_config(run: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    for o in &run.overrides {
        cfg.set(o)?;
    }
    if let Some(out) = &run.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg.resolved())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct PhantomParams {
    seed: u64,
    n_subjects: usize,
    size: [usize; 3],
    n_shapes: usize,
}

pub fn phantom(seed: u64, n_subjects: usize, size: [usize; 3], n_shapes: usize, out: &Path) -> Outcome {
    if size.iter().any(|&s| s < MIN_PHANTOM_SIZE) {
        return Err(Failure::Validation(anyhow!(
            "phantom size must be at least {MIN_PHANTOM_SIZE} per axis, got {size:?}"
        )));
    }
    if n_subjects == 0 || n_shapes == 0 {
        return Err(Failure::Validation(anyhow!("n_subjects and n_shapes must be positive")));
    }
    let manifest = write_phantom_dataset(out, seed, n_subjects, size, n_shapes)?;
    let params = PhantomParams {
        seed,
        n_subjects,
        size,
        n_shapes,
    };
    write_text(
        &out.join("phantom.json"),
        &serde_json::to_string_pretty(&params).map_err(anyhow::Error::from)?,
    )?;
    eprintln!("wrote {} subjects to {}", manifest.entries.len(), out.display());
    Ok(())
}

pub fn simulate(run: &RunArgs, input: Option<&Path>) -> Outcome {
    let mut cfg = load_config(run).invalid()?;
    if let Some(input) = input {
        cfg.data.manifest = input.to_path_buf();
    }
    cfg.validate_paths().invalid()?;
    let free = cfg.motion.is_motion_free();
    if free {
        eprintln!("warning: rotation range is (0, 0); output will match the input");
    }
    let out = cfg.output_dir.clone();
    let written = simulate_dataset(&cfg, &out)?;
    cfg.save(out.join(CONFIG_FILE))?;
    if free {
        let mut worst = 0.0f32;
        for v in &written {
            let clean = normalize(&read_volume(&v.clean)?, cfg.data.normalize)?;
            let corrupted = read_volume(&v.corrupted)?;
            for (a, b) in clean.data().iter().zip(corrupted.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        eprintln!("spot check: max |corrupted - clean| = {worst:.3e}");
    }
    eprintln!("wrote {} corrupted volumes to {}", written.len(), out.display());
    Ok(())
}

pub fn train(run: &RunArgs, resume: Option<&Path>) -> Outcome {
    let cfg = load_config(run).invalid()?;
    cfg.validate_paths().invalid()?;
    let resume = match resume {
        Some(p) if !p.is_file() => {
            return Err(Failure::Validation(anyhow!(
                "resume checkpoint {} does not exist",
                p.display()
            )))
        }
        Some(p) => Some(Checkpoint::load(p).invalid()?),
        None => None,
    };
    if let Some(ck) = &resume {
        if ck.config != cfg.model {
            return Err(Failure::Validation(anyhow!(
                "resume checkpoint has a different model config"
            )));
        }
    }
    let out = cfg.output_dir.clone();
    let mut config_written = false;
    let mut config_error = None;
    let mut report = |r: &EpochRecord| {
        if !config_written {
            config_written = true;
            if let Err(e) = cfg.save(out.join(CONFIG_FILE)) {
                config_error = Some(e);
            }
        }
        eprintln!(
            "epoch {:>4}  train_loss {:.6}  val_ssim {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_ssim, r.seconds
        );
    };
    let outcome = train_run(&cfg, Some(&out), resume.as_ref(), Some(&mut report))?;
    if let Some(e) = config_error {
        return Err(e.into());
    }
    if let Some(best) = outcome.history.best() {
        eprintln!("best val_ssim {:.4} at epoch {}", best.val_ssim, best.epoch);
    }
    eprintln!(
        "checkpoints: {} and {}",
        out.join(BEST_CHECKPOINT).display(),
        out.join(LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn checkpoint_label(spec: &str) -> (String, PathBuf) {
    if let Some((label, path)) = spec.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let label = if stem.starts_with("checkpoint_") {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
    } else {
        stem
    };
    (label.to_string(), path)
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !label.starts_with('.')
}

/// What `plot` needs to redraw the example panel.
#[derive(Debug, Serialize, Deserialize)]
struct ExampleIndex {
    index: usize,
    subject_id: String,
    slice_index: usize,
    shape: (usize, usize),
    /// Tile order, each with a matching `<name>.raw`.
    tiles: Vec<String>,
}

pub fn eval(run: &RunArgs, specs: &[String], example: Option<usize>) -> Outcome {
    let cfg = load_config(run).invalid()?;
    cfg.validate_paths().invalid()?;
    let mut seen = BTreeSet::from([motionprior::pipeline::CORRUPTED_LABEL.to_string()]);
    let mut checkpoints = Vec::with_capacity(specs.len());
    for spec in specs {
        let (label, path) = checkpoint_label(spec);
        if !valid_label(&label) {
            return Err(Failure::Validation(anyhow!(
                "checkpoint label {label:?} may only use letters, digits, '_', '-' and '.'"
            )));
        }
        if !seen.insert(label.clone()) {
            return Err(Failure::Validation(anyhow!(
                "duplicate or reserved checkpoint label {label:?}"
            )));
        }
        if !path.is_file() {
            return Err(Failure::Validation(anyhow!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)
            .with_context(|| format!("loading {}", path.display()))
            .invalid()?;
        checkpoints.push((label, ck));
    }

    let result = evaluate_run(&cfg, &checkpoints)?;
    let n = result.targets.len();
    let example = match example {
        Some(i) if i >= n => {
            return Err(Failure::Validation(anyhow!(
                "example {i} out of range for {n} test slices"
            )))
        }
        Some(i) => i,
        None => median_index(&result.reports[0].ssim_corrupted),
    };

    let out = cfg.output_dir.clone();
    let reports_dir = out.join(REPORTS_DIR);
    fs::create_dir_all(&reports_dir).with_context(|| format!("creating {}", reports_dir.display()))?;
    cfg.save(out.join(CONFIG_FILE))?;
    for r in &result.reports {
        write_text(&reports_dir.join(format!("{}.json", r.label)), &r.to_json()?)?;
    }
    write_text(&out.join(COMPARISON_CSV), &result.table.to_csv())?;
    write_text(&out.join(DIFFERENCES_CSV), &result.table.differences_csv())?;

    let example_dir = out.join(EXAMPLE_DIR);
    fs::create_dir_all(&example_dir).with_context(|| format!("creating {}", example_dir.display()))?;
    let mut tiles = vec![("clean".to_string(), &result.targets[example])];
    tiles.push((
        motionprior::pipeline::CORRUPTED_LABEL.to_string(),
        &result.corrupted[example],
    ));
    for ((label, _), outputs) in checkpoints.iter().zip(&result.outputs) {
        tiles.push((label.clone(), &outputs[example]));
    }
    for (name, a) in &tiles {
        write_array2(a, &example_dir.join(format!("{name}.raw")))?;
    }
    let id = &result.reports[0].samples[example];
    let index = ExampleIndex {
        index: example,
        subject_id: id.subject_id.clone(),
        slice_index: id.slice_index,
        shape: result.targets[example].dim(),
        tiles: tiles.iter().map(|(name, _)| name.clone()).collect(),
    };
    write_text(
        &example_dir.join("index.json"),
        &serde_json::to_string_pretty(&index).map_err(anyhow::Error::from)?,
    )?;

    render_dir(&out, &out)?;
    for row in &result.table.rows {
        eprintln!(
            "{:<24} median {:.4}  [q1 {:.4}, q3 {:.4}]",
            row.method, row.summary.median, row.summary.q1, row.summary.q3
        );
    }
    eprintln!("wrote results for {n} test slices to {}", out.display());
    Ok(())
}

fn median_index(values: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order[order.len() / 2]
}

pub fn plot(input: &Path, out: &Path) -> Outcome {
    if !input.join(COMPARISON_CSV).is_file() {
        return Err(Failure::Validation(anyhow!(
            "{} has no {COMPARISON_CSV}; run eval first",
            input.display()
        )));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    render_dir(input, out)?;
    eprintln!("wrote plots to {}", out.display());
    Ok(())
}

/// Draws the box plot (method order from the comparison CSV) and, when
/// present, the example panel.
fn render_dir(input: &Path, out: &Path) -> anyhow::Result<()> {
    let csv_path = input.join(COMPARISON_CSV);
    let csv = fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let mut series = Vec::new();
    for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let method = line.split(',').next().unwrap_or_default();
        let path = input.join(REPORTS_DIR).join(format!("{method}.json"));
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        series.push(report.ssim_output);
    }
    if series.is_empty() {
        bail!("{} lists no methods", csv_path.display());
    }
    render::boxplot(&series, &out.join(BOXPLOT_PNG))?;

    let example_dir = input.join(EXAMPLE_DIR);
    let index_path = example_dir.join("index.json");
    if index_path.is_file() {
        let index: ExampleIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
        let tiles = index
            .tiles
            .iter()
            .map(|name| read_array2(&example_dir.join(format!("{name}.raw")), index.shape))
            .collect::<motionprior::Result<Vec<_>>>()?;
        render::panel(&tiles, &out.join(PANEL_PNG))?;
    }
    Ok(())
}

//! Prior images for a corrupted slice: same-position slices from other
//! subjects, or other contrasts of the same subject.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{corrupt_slice, draw_motion_params, MotionConfig, MotionTrace};
use crate::volume::{
    normalize, read_array2, read_volume, write_array2, Contrast, DatasetManifest, NormalizeMode, Volume,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    None,
    SimilarSlices {
        k: usize,
    },
    Contrasts {
        contrasts: Vec<Contrast>,
    },
}

impl PriorMode {
    pub fn similar_slices() -> Self {
        PriorMode::SimilarSlices { k: 10 }
    }

    pub fn contrasts() -> Self {
        PriorMode::Contrasts {
            contrasts: vec![Contrast::T1, Contrast::PD],
        }
    }

    pub fn count(&self) -> usize {
        match self {
            PriorMode::None => 0,
            PriorMode::SimilarSlices { k } => *k,
            PriorMode::Contrasts { contrasts } => contrasts.len(),
        }
    }

    pub fn validate(&self, target: Contrast) -> Result<()> {
        match self {
            PriorMode::SimilarSlices { k: 0 } => Err(Error::Config("similar_slices needs k >= 1".into())),
            PriorMode::Contrasts { contrasts } if contrasts.is_empty() => {
                Err(Error::Config("contrast prior list is empty".into()))
            }
            PriorMode::Contrasts { contrasts } if contrasts.contains(&target) => Err(Error::Config(format!(
                "contrast priors must exclude the target contrast {target}"
            ))),
            _ => Ok(()),
        }
    }

    /// Contrasts whose volumes must be loaded besides the target.
    pub fn extra_contrasts(&self) -> &[Contrast] {
        match self {
            PriorMode::Contrasts { contrasts } => contrasts,
            _ => &[],
        }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub corrupted: Array2<f32>,
    pub priors: Vec<Array2<f32>>,
    pub target: Array2<f32>,
    pub subject_id: String,
    pub slice_index: usize,
    pub trace: MotionTrace,
}

impl SliceSample {
    pub fn shape(&self) -> (usize, usize) {
        self.target.dim()
    }
}

/// Normalized volumes keyed by subject and contrast, sliced along one axis.
#[derive(Debug, Clone, Default)]
pub struct VolumeStore {
    axis: usize,
    volumes: BTreeMap<(String, Contrast), Volume>,
}

impl VolumeStore {
    pub fn new(axis: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::Config(format!("slice axis must be 0, 1 or 2, got {axis}")));
        }
        Ok(VolumeStore {
            axis,
            volumes: BTreeMap::new(),
        })
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    /// Adds a volume, normalizing it first unless it already is.
    pub fn insert(&mut self, v: Volume, mode: NormalizeMode) -> Result<()> {
        let v = if v.is_normalized() { v } else { normalize(&v, mode)? };
        self.volumes.insert((v.subject_id.clone(), v.contrast), v);
        Ok(())
    }

    /// Loads the listed contrasts of the listed subjects from the manifest.
    pub fn load(
        manifest: &DatasetManifest,
        subjects: &[&str],
        contrasts: &[Contrast],
        axis: usize,
        mode: NormalizeMode,
    ) -> Result<Self> {
        let mut store = VolumeStore::new(axis)?;
        for &s in subjects {
            for &c in contrasts {
                let mut v = read_volume(manifest.path_of(s, c)?)?;
                // the manifest is authoritative for identity
                v.subject_id = s.to_string();
                v.contrast = c;
                store.insert(v, mode)?;
            }
        }
        Ok(store)
    }

    pub fn get(&self, subject: &str, contrast: Contrast) -> Option<&Volume> {
        self.volumes.get(&(subject.to_string(), contrast))
    }

    pub fn contains(&self, subject: &str, contrast: Contrast) -> bool {
        self.get(subject, contrast).is_some()
    }

    pub fn n_slices(&self, subject: &str, contrast: Contrast) -> Option<usize> {
        self.get(subject, contrast).map(|v| v.data().len_of(Axis(self.axis)))
    }

    /// Slice `index` of a volume with `reference_len` slices, mapped by
    /// fractional depth when this volume has a different slice count.
    pub fn slice(&self, subject: &str, contrast: Contrast, index: usize, reference_len: usize) -> Result<Array2<f32>> {
        let v = self.get(subject, contrast).ok_or_else(|| Error::MissingContrast {
            subject: subject.to_string(),
            contrast: contrast.to_string(),
        })?;
        let len = v.data().len_of(Axis(self.axis));
        let mapped = if len == reference_len {
            index
        } else {
            ((index as f64 / reference_len as f64) * len as f64).round() as usize
        };
        if mapped >= len {
            return Err(Error::OutOfRange { index: mapped, len });
        }
        Ok(v.data().index_axis(Axis(self.axis), mapped).to_owned())
    }
}

/// `k` same-position, same-contrast slices from distinct other subjects of
/// the same split, drawn without replacement.
#[allow(clippy::too_many_arguments)]
pub fn sample_similar_slices<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    store: &VolumeStore,
    subject: &str,
    contrast: Contrast,
    slice_index: usize,
    reference_len: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Array2<f32>>> {
    let split = manifest.split_of(subject);
    let donors: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.subject_id.as_str())
        .filter(|&s| s != subject && manifest.split_of(s) == split && store.contains(s, contrast))
        .collect();
    if donors.len() < k {
        return Err(Error::InsufficientDonors {
            have: donors.len(),
            need: k,
        });
    }
    index::sample(rng, donors.len(), k)
        .into_iter()
        .map(|i| store.slice(donors[i], contrast, slice_index, reference_len))
        .collect()
}

/// Same-subject, same-position slices of each requested contrast, in order.
pub fn assemble_contrast_priors(
    manifest: &DatasetManifest,
    store: &VolumeStore,
    subject: &str,
    slice_index: usize,
    reference_len: usize,
    contrasts: &[Contrast],
) -> Result<Vec<Array2<f32>>> {
    let entry = manifest.entry(subject)?;
    if let Some(missing) = contrasts.iter().find(|c| !entry.files.contains_key(c)) {
        return Err(Error::MissingContrast {
            subject: subject.to_string(),
            contrast: missing.to_string(),
        });
    }
    contrasts
        .iter()
        .map(|&c| store.slice(subject, c, slice_index, reference_len))
        .collect()
}

/// Where a sample comes from.
#[derive(Debug, Clone, Copy)]
pub struct SampleSource<'a> {
    pub manifest: &'a DatasetManifest,
    pub store: &'a VolumeStore,
    pub subject: &'a str,
    pub target_contrast: Contrast,
    pub slice_index: usize,
}

/// Corrupts `clean` and attaches priors. Motion is drawn from `rng` before
/// any prior sampling, so the corruption does not depend on the prior mode.
pub fn make_sample<R: Rng + ?Sized>(
    clean: &Array2<f32>,
    cfg: &MotionConfig,
    mode: &PriorMode,
    src: SampleSource<'_>,
    rng: &mut R,
) -> Result<SliceSample> {
    mode.validate(src.target_contrast)?;
    let trace = draw_motion_params(cfg, clean.dim(), rng)?;
    let corrupted = corrupt_slice(clean, &trace)?;
    let reference_len = src
        .store
        .n_slices(src.subject, src.target_contrast)
        .ok_or_else(|| Error::MissingContrast {
            subject: src.subject.to_string(),
            contrast: src.target_contrast.to_string(),
        })?;
    let priors = match mode {
        PriorMode::None => Vec::new(),
        PriorMode::SimilarSlices { k } => sample_similar_slices(
            src.manifest,
            src.store,
            src.subject,
            src.target_contrast,
            src.slice_index,
            reference_len,
            *k,
            rng,
        )?,
        PriorMode::Contrasts { contrasts } => assemble_contrast_priors(
            src.manifest,
            src.store,
            src.subject,
            src.slice_index,
            reference_len,
            contrasts,
        )?,
    };
    if let Some(p) = priors.iter().find(|p| p.dim() != clean.dim()) {
        return Err(Error::Shape(format!(
            "prior {:?} does not match slice {:?}",
            p.dim(),
            clean.dim()
        )));
    }
    Ok(SliceSample {
        corrupted,
        priors,
        target: clean.clone(),
        subject_id: src.subject.to_string(),
        slice_index: src.slice_index,
        trace,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    subject_id: String,
    slice_index: usize,
    shape: (usize, usize),
    corrupted: String,
    target: String,
    priors: Vec<String>,
    trace: MotionTrace,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleIndex {
    mode: PriorMode,
    samples: Vec<IndexEntry>,
}

/// Persists samples as raw float32 arrays plus an `index.json`.
pub fn write_sample_set(dir: &Path, mode: &PriorMode, samples: &[SliceSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        let corrupted = format!("{stem}_corrupted.raw");
        let target = format!("{stem}_target.raw");
        write_array2(&s.corrupted, &dir.join(&corrupted))?;
        write_array2(&s.target, &dir.join(&target))?;
        let mut priors = Vec::with_capacity(s.priors.len());
        for (j, p) in s.priors.iter().enumerate() {
            let name = format!("{stem}_prior{j:02}.raw");
            write_array2(p, &dir.join(&name))?;
            priors.push(name);
        }
        entries.push(IndexEntry {
            subject_id: s.subject_id.clone(),
            slice_index: s.slice_index,
            shape: s.shape(),
            corrupted,
            target,
            priors,
            trace: s.trace.clone(),
        });
    }
    let index = SampleIndex {
        mode: mode.clone(),
        samples: entries,
    };
    let p = dir.join("index.json");
    fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(p, e))
}

pub fn read_sample_set(dir: &Path) -> Result<(PriorMode, Vec<SliceSample>)> {
    let p = dir.join("index.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: SampleIndex = serde_json::from_str(&text)?;
    let samples = index
        .samples
        .into_iter()
        .map(|e| {
            Ok(SliceSample {
                corrupted: read_array2(&dir.join(&e.corrupted), e.shape)?,
                target: read_array2(&dir.join(&e.target), e.shape)?,
                priors: e
                    .priors
                    .iter()
                    .map(|n| read_array2(&dir.join(n), e.shape))
                    .collect::<Result<_>>()?,
                subject_id: e.subject_id,
                slice_index: e.slice_index,
                trace: e.trace,
            })
        })
        .collect::<Result<_>>()?;
    Ok((index.mode, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, split_subjects, ManifestEntry, SplitCounts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn setup(n: usize) -> (DatasetManifest, VolumeStore) {
        let mut store = VolumeStore::new(2).unwrap();
        let mut entries = Vec::new();
        for i in 0..n {
            let mut set = generate_phantom(i as u64, [16, 16, 16], 4).unwrap();
            let id = format!("S{i:02}");
            let mut files = BTreeMap::new();
            for (c, mut v) in std::mem::take(&mut set) {
                v.subject_id = id.clone();
                files.insert(c, format!("{id}-{c}.nii").into());
                store.insert(v, NormalizeMode::MinMax).unwrap();
            }
            entries.push(ManifestEntry { subject_id: id, files });
        }
        (DatasetManifest::new(entries), store)
    }

    #[test]
    fn similar_slices_come_from_distinct_other_subjects() {
        let (m, store) = setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let priors = sample_similar_slices(&m, &store, "S03", Contrast::T2, 8, 16, 10, &mut rng).unwrap();
        assert_eq!(priors.len(), 10);
        let own = store.slice("S03", Contrast::T2, 8, 16).unwrap();
        let mut donors = BTreeSet::new();
        for p in &priors {
            let who: Vec<&str> = m
                .entries
                .iter()
                .map(|e| e.subject_id.as_str())
                .filter(|s| store.slice(s, Contrast::T2, 8, 16).unwrap() == *p)
                .collect();
            assert!(!who.contains(&"S03"));
            assert_ne!(p, &own);
            donors.extend(who);
        }
        assert_eq!(donors.len(), 10);
    }

    #[test]
    fn single_donor_and_too_few_donors() {
        let (m, store) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_similar_slices(&m, &store, "S00", Contrast::T2, 5, 16, 1, &mut rng).unwrap();
        assert_eq!(p[0], store.slice("S01", Contrast::T2, 5, 16).unwrap());

        let (m, store) = setup(6);
        let err = sample_similar_slices(&m, &store, "S00", Contrast::T2, 5, 16, 10, &mut rng);
        assert!(matches!(err, Err(Error::InsufficientDonors { have: 5, need: 10 })));
    }

    #[test]
    fn donors_restricted_to_split() {
        let (m, store) = setup(6);
        let m = split_subjects(
            &m,
            SplitCounts {
                train: 4,
                val: 2,
                test: 0,
            },
            3,
        )
        .unwrap();
        let val = m.subjects_in(crate::volume::Split::Val);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_similar_slices(&m, &store, val[0], Contrast::T2, 4, 16, 1, &mut rng).unwrap();
        assert_eq!(p[0], store.slice(val[1], Contrast::T2, 4, 16).unwrap());
        assert!(sample_similar_slices(&m, &store, val[0], Contrast::T2, 4, 16, 2, &mut rng).is_err());
    }

    #[test]
    fn contrast_priors_in_listed_order() {
        let (m, store) = setup(2);
        let p = assemble_contrast_priors(&m, &store, "S01", 7, 16, &[Contrast::T1, Contrast::PD]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], store.slice("S01", Contrast::T1, 7, 16).unwrap());
        assert_eq!(p[1], store.slice("S01", Contrast::PD, 7, 16).unwrap());
        let p = assemble_contrast_priors(&m, &store, "S01", 7, 16, &[Contrast::T1]).unwrap();
        assert_eq!(p.len(), 1);

        let mut m2 = m.clone();
        m2.entries[1].files.remove(&Contrast::PD);
        assert!(matches!(
            assemble_contrast_priors(&m2, &store, "S01", 7, 16, &[Contrast::T1, Contrast::PD]),
            Err(Error::MissingContrast { .. })
        ));
    }

    #[test]
    fn fractional_depth_matching() {
        let mut store = VolumeStore::new(2).unwrap();
        let v = Volume::new(
            ndarray::Array3::from_shape_fn((2, 2, 8), |(_, _, z)| z as f32),
            [1.0; 3],
            Contrast::T1,
            "a",
        )
        .unwrap();
        store.insert(v, NormalizeMode::MinMax).unwrap();
        // reference volume has 16 slices: index 10 -> depth 0.625 -> slice 5
        let s = store.slice("a", Contrast::T1, 10, 16).unwrap();
        assert!((s[[0, 0]] - 5.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn sample_modes() {
        let (m, store) = setup(12);
        let clean = store.slice("S02", Contrast::T2, 8, 16).unwrap();
        let cfg = MotionConfig {
            n_movements: 4,
            ..Default::default()
        };
        let src = SampleSource {
            manifest: &m,
            store: &store,
            subject: "S02",
            target_contrast: Contrast::T2,
            slice_index: 8,
        };
        let mut counts = Vec::new();
        let mut corrupted = Vec::new();
        for mode in [PriorMode::None, PriorMode::contrasts(), PriorMode::similar_slices()] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = make_sample(&clean, &cfg, &mode, src, &mut rng).unwrap();
            assert_eq!(s.target, clean);
            counts.push(s.priors.len());
            corrupted.push(s.corrupted);
        }
        assert_eq!(counts, vec![0, 2, 10]);
        // corruption is independent of the prior mode
        assert_eq!(corrupted[0], corrupted[1]);
        assert_eq!(corrupted[0], corrupted[2]);

        let bad = PriorMode::Contrasts {
            contrasts: vec![Contrast::T2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(make_sample(&clean, &cfg, &bad, src, &mut rng).is_err());
    }

    #[test]
    fn sample_set_round_trip() {
        let (m, store) = setup(3);
        let clean = store.slice("S00", Contrast::T2, 8, 16).unwrap();
        let cfg = MotionConfig {
            n_movements: 3,
            ..Default::default()
        };
        let src = SampleSource {
            manifest: &m,
            store: &store,
            subject: "S00",
            target_contrast: Contrast::T2,
            slice_index: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = make_sample(&clean, &cfg, &PriorMode::contrasts(), src, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample_set(dir.path(), &PriorMode::contrasts(), std::slice::from_ref(&s)).unwrap();
        let (mode, back) = read_sample_set(dir.path()).unwrap();
        assert_eq!(mode, PriorMode::contrasts());
        assert_eq!(back, vec![s]);
    }
}

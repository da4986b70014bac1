//! Per-slice SSIM reports and cross-method comparison tables.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::SliceSample;
use crate::ssim::{ssim, SsimParams};

/// Mean, median, quartiles and range of a list of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("cannot summarize an empty list".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Summary {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub subject_id: String,
    pub slice_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: Vec<SampleId>,
    /// Input against ground truth.
    pub ssim_corrupted: Vec<f64>,
    /// Method output against ground truth.
    pub ssim_output: Vec<f64>,
    pub corrupted_summary: Summary,
    pub output_summary: Summary,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores `predict` on every sample. Use [`identity`] for the uncorrected baseline.
pub fn evaluate(
    mut predict: impl FnMut(&SliceSample) -> Result<Array2<f32>>,
    samples: &[SliceSample],
    p: &SsimParams,
    label: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut ids = Vec::with_capacity(samples.len());
    let mut before = Vec::with_capacity(samples.len());
    let mut after = Vec::with_capacity(samples.len());
    for s in samples {
        ids.push(SampleId {
            subject_id: s.subject_id.clone(),
            slice_index: s.slice_index,
        });
        before.push(ssim(&s.corrupted, &s.target, p)?.mean);
        after.push(ssim(&predict(s)?, &s.target, p)?.mean);
    }
    Ok(EvalReport {
        label: label.to_string(),
        samples: ids,
        corrupted_summary: Summary::of(&before)?,
        output_summary: Summary::of(&after)?,
        ssim_corrupted: before,
        ssim_output: after,
    })
}

/// Evaluates precomputed outputs, one per sample.
pub fn evaluate_outputs(
    outputs: &[Array2<f32>],
    samples: &[SliceSample],
    p: &SsimParams,
    label: &str,
) -> Result<EvalReport> {
    if outputs.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} samples",
            outputs.len(),
            samples.len()
        )));
    }
    let mut i = 0;
    evaluate(
        |_| {
            i += 1;
            Ok(outputs[i - 1].clone())
        },
        samples,
        p,
        label,
    )
}

pub fn identity(s: &SliceSample) -> Result<Array2<f32>> {
    Ok(s.corrupted.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianDifference {
    pub a: String,
    pub b: String,
    /// median(a) − median(b)
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub median_differences: Vec<MedianDifference>,
}

impl ComparisonTable {
    /// `method,mean,median,q1,q3,min,max`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean,median,q1,q3,min,max\n");
        for r in &self.rows {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.method, m.mean, m.median, m.q1, m.q3, m.min, m.max
            );
        }
        s
    }

    pub fn differences_csv(&self) -> String {
        let mut s = String::from("a,b,median_difference\n");
        for d in &self.median_differences {
            let _ = writeln!(s, "{},{},{}", d.a, d.b, d.difference);
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&Summary> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.summary)
    }
}

/// One row per report (its output summary) plus median differences for
/// every ordered pair of reports.
pub fn aggregate(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.samples != first.samples) {
        return Err(Error::Config(format!(
            "report {} was computed on different samples than {}",
            r.label, first.label
        )));
    }
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| {
            Ok(ComparisonRow {
                method: r.label.clone(),
                summary: Summary::of(&r.ssim_output)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut median_differences = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            median_differences.push(MedianDifference {
                a: a.method.clone(),
                b: b.method.clone(),
                difference: a.summary.median - b.summary.median,
            });
        }
    }
    Ok(ComparisonTable {
        rows,
        median_differences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{MotionTrace, PhaseAxis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize) -> Vec<SliceSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|i| {
                let target = Array2::from_shape_fn((16, 16), |_| rng.gen::<f32>());
                let corrupted = target.mapv(|v| (v + rng.gen_range(-0.2..0.2f32) * i as f32).clamp(0.0, 1.0));
                SliceSample {
                    corrupted,
                    priors: vec![],
                    target,
                    subject_id: format!("s{i}"),
                    slice_index: i,
                    trace: MotionTrace {
                        angles_deg: vec![],
                        axis: PhaseAxis::X,
                        cuts: vec![],
                        seed: 0,
                        center_anchored: true,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn identity_and_oracle_predictors() {
        let s = samples(3);
        let p = SsimParams::default();
        let r = evaluate(identity, &s, &p, "corrupted").unwrap();
        assert_eq!(r.ssim_output, r.ssim_corrupted);
        assert_eq!(r.ssim_output.len(), 3);
        let mut sorted = r.ssim_output.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(r.output_summary.median, sorted[1]);

        let r = evaluate(|s| Ok(s.target.clone()), &s, &p, "oracle").unwrap();
        assert!(r.ssim_output.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(evaluate(identity, &[], &p, "x").is_err());
    }

    #[test]
    fn summary_matches_hand_values() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn aggregate_rows_and_differences() {
        let s = samples(5);
        let p = SsimParams::default();
        let a = evaluate(identity, &s, &p, "a").unwrap();
        let table = aggregate(std::slice::from_ref(&a)).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].summary, a.output_summary);

        let b = EvalReport {
            label: "b".into(),
            ..a.clone()
        };
        let table = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(table.median_differences[0].difference, 0.0);
        assert_eq!(table.to_csv().lines().count(), 3);

        // a dominated copy has a lower median
        let mut worse = a.clone();
        worse.label = "worse".into();
        worse.ssim_output.iter_mut().for_each(|v| *v -= 0.1);
        let table = aggregate(&[a.clone(), worse]).unwrap();
        assert!(table.median_differences[0].difference >= 0.0);

        let mut other = a.clone();
        other.samples[0].slice_index = 99;
        assert!(aggregate(&[a, other]).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = evaluate(identity, &samples(2), &SsimParams::default(), "c").unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

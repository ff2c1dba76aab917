//! Evaluation harness: pair prediction files with ground truth by filename
//! stem, compute per-image and aggregate metrics, and emit sparsification
//! and histogram data as delimited text for external plotting.

use crate::data::{pfm::load_pfm, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::inference::UncertainDisparity;
use crate::metrics::{
    accumulate, error_uncertainty_histogram, sparsification, Histogram2d, MetricsAccumulator,
    MetricsReport, SparsificationCurve,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub stem: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub aggregate: MetricsReport,
    pub per_image: Vec<ImageRecord>,
    /// AUSE per uncertainty ranking, present when the prediction directory
    /// carries the corresponding stddev maps. AUSE is a scalar summary of
    /// the sparsification curve (an extension over the plotted figure).
    pub ause_combined: Option<f64>,
    pub ause_aleatoric: Option<f64>,
    pub ause_epistemic: Option<f64>,
    pub missing_ground_truth: Vec<String>,
    pub missing_predictions: Vec<String>,
}

struct PredictionFiles {
    disparity: PathBuf,
    aleatoric: Option<PathBuf>,
    epistemic: Option<PathBuf>,
    combined: Option<PathBuf>,
}

fn scan_predictions(pred_dir: &Path) -> Result<BTreeMap<String, PredictionFiles>> {
    let mut found: BTreeMap<String, PredictionFiles> = BTreeMap::new();
    let rd = std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    let mut names: Vec<String> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    names.sort();
    for name in &names {
        if let Some(stem) = name.strip_suffix("_disp.pfm") {
            found.insert(
                stem.to_string(),
                PredictionFiles {
                    disparity: pred_dir.join(name),
                    aleatoric: existing(pred_dir, stem, "aleatoric"),
                    epistemic: existing(pred_dir, stem, "epistemic"),
                    combined: existing(pred_dir, stem, "combined"),
                },
            );
        }
    }
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no *_disp.pfm predictions in {}",
            pred_dir.display()
        )));
    }
    Ok(found)
}

fn existing(dir: &Path, stem: &str, kind: &str) -> Option<PathBuf> {
    let p = dir.join(format!("{stem}_{kind}.pfm"));
    p.exists().then_some(p)
}

/// Pooled per-pixel values across all evaluated images.
#[derive(Default)]
struct Pooled {
    errors: Vec<f64>,
    aleatoric: Vec<f64>,
    epistemic: Vec<f64>,
    combined: Vec<f64>,
}

pub struct EvaluateOutputs {
    pub summary: EvaluateSummary,
    pub sparsification_combined: Option<SparsificationCurve>,
    pub histogram: Option<Histogram2d>,
}

/// Evaluate a prediction directory against ground truth; when `out_dir` is
/// given, reports and curve data are written there.
pub fn run_evaluate(
    pred_dir: &Path,
    gt_spec: &DatasetSpec,
    out_dir: Option<&Path>,
    sparsification_steps: usize,
) -> Result<EvaluateOutputs> {
    let predictions = scan_predictions(pred_dir)?;
    let dataset = Dataset::load(gt_spec)?;
    let mut gt_index: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..dataset.len() {
        gt_index.insert(dataset.stem(i).to_string(), i);
    }

    let missing_ground_truth: Vec<String> = predictions
        .keys()
        .filter(|s| !gt_index.contains_key(*s))
        .cloned()
        .collect();
    let missing_predictions: Vec<String> = gt_index
        .keys()
        .filter(|s| !predictions.contains_key(*s))
        .cloned()
        .collect();
    if !missing_ground_truth.is_empty() || !missing_predictions.is_empty() {
        eprintln!(
            "warning: evaluating on intersection; {} prediction(s) without ground truth {:?}, \
             {} ground-truth item(s) without predictions {:?}",
            missing_ground_truth.len(),
            missing_ground_truth,
            missing_predictions.len(),
            missing_predictions
        );
    }

    let mut per_image = Vec::new();
    let mut total = MetricsAccumulator::default();
    let mut pooled = Pooled::default();
    let mut any_uncertainty = false;

    for (stem, files) in &predictions {
        let Some(&idx) = gt_index.get(stem) else {
            continue;
        };
        let sample = dataset.get(idx, 1)?;
        let gt = sample
            .gt_disparity
            .as_ref()
            .ok_or_else(|| Error::Data(format!("ground truth for {stem} has no disparity")))?;
        let mask = sample
            .valid_mask
            .clone()
            .unwrap_or_else(|| Tensor::filled(gt.shape(), 1.0));

        let disp = load_pfm(&files.disparity)?.values;
        if disp.shape() != gt.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("{stem}: prediction {:?} vs ground truth {:?}", disp.shape(), gt.shape()),
            ));
        }
        let load_sigma = |p: &Option<PathBuf>| -> Result<Option<Tensor>> {
            Ok(match p {
                Some(p) => Some(load_pfm(p)?.values),
                None => None,
            })
        };
        let alea = load_sigma(&files.aleatoric)?;
        let epi = load_sigma(&files.epistemic)?;
        let comb = load_sigma(&files.combined)?;

        let uncertainty = match (&alea, &epi, &comb) {
            (Some(a), Some(e), Some(c)) => Some(UncertainDisparity {
                mean_disparity: disp.clone(),
                aleatoric_var: a.map(|v| v * v),
                epistemic_var: e.map(|v| v * v),
                combined_var: c.map(|v| v * v),
                t: 0,
            }),
            _ => None,
        };
        let acc = accumulate(&disp, gt, &mask, uncertainty.as_ref())?;
        per_image.push(ImageRecord {
            stem: stem.clone(),
            metrics: acc.report()?,
        });
        total.merge(&acc);

        for i in 0..gt.len() {
            if mask.data()[i] > 0.0 {
                pooled.errors.push((disp.data()[i] - gt.data()[i]).abs());
                if let (Some(a), Some(e), Some(c)) = (&alea, &epi, &comb) {
                    pooled.aleatoric.push(a.data()[i]);
                    pooled.epistemic.push(e.data()[i]);
                    pooled.combined.push(c.data()[i]);
                    any_uncertainty = true;
                }
            }
        }
    }

    let aggregate = total.report()?;
    let as_tensor = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec());
    let ones = |n: usize| Tensor::filled(&[1, n], 1.0);

    let (mut sc, mut sa, mut se) = (None, None, None);
    let mut histogram = None;
    if any_uncertainty && pooled.errors.len() == pooled.combined.len() {
        let errs = as_tensor(&pooled.errors);
        let mask = ones(pooled.errors.len());
        sc = Some(sparsification(&errs, &as_tensor(&pooled.combined), &mask, sparsification_steps)?);
        sa = Some(sparsification(&errs, &as_tensor(&pooled.aleatoric), &mask, sparsification_steps)?);
        se = Some(sparsification(&errs, &as_tensor(&pooled.epistemic), &mask, sparsification_steps)?);
        histogram = Some(error_uncertainty_histogram(
            &errs,
            &as_tensor(&pooled.combined),
            &mask,
            32,
            32,
        )?);
    }

    let summary = EvaluateSummary {
        aggregate,
        per_image,
        ause_combined: sc.as_ref().map(|c| c.ause),
        ause_aleatoric: sa.as_ref().map(|c| c.ause),
        ause_epistemic: se.as_ref().map(|c| c.ause),
        missing_ground_truth,
        missing_predictions,
    };

    if let Some(out_dir) = out_dir {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        write_reports(out_dir, &summary)?;
        if let (Some(sc), Some(sa), Some(se)) = (&sc, &sa, &se) {
            write_sparsification_csv(&out_dir.join("sparsification.csv"), sc, sa, se)?;
        }
        if let Some(h) = &histogram {
            write_histogram_csv(&out_dir.join("histogram.csv"), h)?;
        }
    }

    Ok(EvaluateOutputs {
        summary,
        sparsification_combined: sc,
        histogram,
    })
}

fn write_reports(out_dir: &Path, summary: &EvaluateSummary) -> Result<()> {
    // machine-readable: one JSON record per image plus the aggregate
    let jsonl_path = out_dir.join("metrics.jsonl");
    let mut jsonl = std::fs::File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
    for rec in &summary.per_image {
        let line = serde_json::json!({"record": "image", "stem": rec.stem, "metrics": rec.metrics});
        writeln!(jsonl, "{line}").map_err(|e| Error::io(&jsonl_path, e))?;
    }
    let agg = serde_json::json!({
        "record": "aggregate",
        "metrics": summary.aggregate,
        "ause_combined": summary.ause_combined,
        "ause_aleatoric": summary.ause_aleatoric,
        "ause_epistemic": summary.ause_epistemic,
        "missing_ground_truth": summary.missing_ground_truth,
        "missing_predictions": summary.missing_predictions,
    });
    writeln!(jsonl, "{agg}").map_err(|e| Error::io(&jsonl_path, e))?;

    // human-readable table
    let txt_path = out_dir.join("metrics.txt");
    let mut txt = String::new();
    txt.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>9}\n",
        "image", ">1px[%]", ">3px[%]", ">5px[%]", "MAE[px]", "RMSE[px]", "Alea[px]", "Epi[px]", "n_valid"
    ));
    let fmt_row = |name: &str, m: &MetricsReport| {
        format!(
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.3} {:>8.3} {:>10} {:>10} {:>9}\n",
            name,
            m.bad1,
            m.bad3,
            m.bad5,
            m.mae,
            m.rmse,
            m.mean_aleatoric_px.map_or("-".into(), |v| format!("{v:.3}")),
            m.mean_epistemic_px.map_or("-".into(), |v| format!("{v:.3}")),
            m.n_valid
        )
    };
    for rec in &summary.per_image {
        txt.push_str(&fmt_row(&rec.stem, &rec.metrics));
    }
    txt.push_str(&fmt_row("aggregate", &summary.aggregate));
    if let Some(a) = summary.ause_combined {
        txt.push_str(&format!("AUSE combined:  {a:.5}\n"));
    }
    if let Some(a) = summary.ause_aleatoric {
        txt.push_str(&format!("AUSE aleatoric: {a:.5}\n"));
    }
    if let Some(a) = summary.ause_epistemic {
        txt.push_str(&format!("AUSE epistemic: {a:.5}\n"));
    }
    std::fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_path, e))?;
    Ok(())
}

fn write_sparsification_csv(
    path: &Path,
    combined: &SparsificationCurve,
    aleatoric: &SparsificationCurve,
    epistemic: &SparsificationCurve,
) -> Result<()> {
    let mut s = String::from("density,mae_combined,mae_aleatoric,mae_epistemic,mae_oracle\n");
    for (i, &d) in combined.densities.iter().enumerate() {
        s.push_str(&format!(
            "{d},{},{},{},{}\n",
            combined.mae_at_density[i],
            aleatoric.mae_at_density[i],
            epistemic.mae_at_density[i],
            combined.oracle_mae_at_density[i]
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_histogram_csv(path: &Path, h: &Histogram2d) -> Result<()> {
    let mut s = String::from("error_lo,error_hi,sigma_lo,sigma_hi,count\n");
    let de = h.error_max / h.error_bins as f64;
    let ds = h.sigma_max / h.sigma_bins as f64;
    for e in 0..h.error_bins {
        for b in 0..h.sigma_bins {
            let c = h.counts[e * h.sigma_bins + b];
            if c > 0 {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e as f64 * de,
                    (e + 1) as f64 * de,
                    b as f64 * ds,
                    (b + 1) as f64 * ds,
                    c
                ));
            }
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::materialize_synth;
    use crate::data::pfm::write_pfm;
    use crate::data::SynthParams;
    use tempfile::tempdir;

    /// Build a gt dir and a prediction dir derived from it.
    fn setup(perturb: f64) -> (tempfile::TempDir, tempfile::TempDir, DatasetSpec) {
        let gt_dir = tempdir().unwrap();
        let pred_dir = tempdir().unwrap();
        let params = SynthParams::default();
        materialize_synth(&params, 3, 77, gt_dir.path()).unwrap();
        let spec = DatasetSpec::PfmDir {
            root: gt_dir.path().to_path_buf(),
            quarter_resolution: false,
        };
        let ds = Dataset::load(&spec).unwrap();
        for i in 0..ds.len() {
            let s = ds.get(i, 1).unwrap();
            let gt = s.gt_disparity.unwrap();
            let pred = gt.map(|v| v + perturb);
            let stem = ds.stem(i).to_string();
            write_pfm(pred_dir.path().join(format!("{stem}_disp.pfm")), &pred).unwrap();
            let sigma = Tensor::filled(gt.shape(), 0.5);
            for kind in ["aleatoric", "epistemic", "combined"] {
                write_pfm(pred_dir.path().join(format!("{stem}_{kind}.pfm")), &sigma).unwrap();
            }
        }
        (gt_dir, pred_dir, spec)
    }

    #[test]
    fn predictions_equal_to_gt_give_zero_errors() {
        let (_gt, pred, spec) = setup(0.0);
        let out = run_evaluate(pred.path(), &spec, None, 20).unwrap();
        let m = out.summary.aggregate;
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.bad1, 0.0);
        assert_eq!(out.summary.per_image.len(), 3);
    }

    #[test]
    fn aggregate_is_count_weighted_mean_of_per_image() {
        let (_gt, pred, spec) = setup(2.0);
        let out = run_evaluate(pred.path(), &spec, None, 20).unwrap();
        let s = &out.summary;
        let weighted: f64 = s
            .per_image
            .iter()
            .map(|r| r.metrics.mae * r.metrics.n_valid as f64)
            .sum::<f64>()
            / s.per_image.iter().map(|r| r.metrics.n_valid as f64).sum::<f64>();
        assert!((s.aggregate.mae - weighted).abs() < 1e-9);
    }

    #[test]
    fn ten_percent_corruption_shows_up_in_bad3() {
        // every 10th valid pixel displaced by +5 px: bad3 lands at 10% up to
        // the integer split of the valid count
        let gt_dir = tempdir().unwrap();
        let pred_dir = tempdir().unwrap();
        materialize_synth(&SynthParams::default(), 3, 5, gt_dir.path()).unwrap();
        let spec = DatasetSpec::PfmDir {
            root: gt_dir.path().to_path_buf(),
            quarter_resolution: false,
        };
        let ds = Dataset::load(&spec).unwrap();
        for i in 0..ds.len() {
            let s = ds.get(i, 1).unwrap();
            let gt = s.gt_disparity.unwrap();
            let mask = s.valid_mask.unwrap();
            let mut pred = gt.clone();
            let mut valid_seen = 0usize;
            for p in 0..gt.len() {
                if mask.data()[p] > 0.0 {
                    if valid_seen % 10 == 0 {
                        pred.data_mut()[p] += 5.0;
                    }
                    valid_seen += 1;
                }
            }
            write_pfm(pred_dir.path().join(format!("{}_disp.pfm", ds.stem(i))), &pred).unwrap();
        }
        let out = run_evaluate(pred_dir.path(), &spec, None, 20).unwrap();
        let bad3 = out.summary.aggregate.bad3;
        assert!((bad3 - 10.0).abs() < 0.5, "bad3 {bad3}");
    }

    #[test]
    fn outputs_are_written_and_intersection_warned() {
        let (_gt, pred, spec) = setup(1.0);
        // remove one prediction to force an intersection warning
        std::fs::remove_file(pred.path().join("0002_disp.pfm")).unwrap();
        let out_dir = tempdir().unwrap();
        let out = run_evaluate(pred.path(), &spec, Some(out_dir.path()), 20).unwrap();
        assert_eq!(out.summary.missing_predictions, vec!["0002".to_string()]);
        assert!(out_dir.path().join("metrics.jsonl").exists());
        assert!(out_dir.path().join("metrics.txt").exists());
        assert!(out_dir.path().join("sparsification.csv").exists());
        assert!(out_dir.path().join("histogram.csv").exists());
        // jsonl has one image record per evaluated image plus the aggregate
        let text = std::fs::read_to_string(out_dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2 + 1);
    }
}

//! IoU and boundary displacement error, shot-group aggregation, collapse
//! diagnostics and CSV exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CropBox, Dataset};
use crate::error::{Error, Result};
use crate::model::{Boundary, Cblnet, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub const ALL: [ShotGroup; 3] = [ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few];

    pub fn name(self) -> &'static str {
        match self {
            ShotGroup::Many => "many",
            ShotGroup::Medium => "medium",
            ShotGroup::Few => "few",
        }
    }
}

pub const MANY_SHOT_MIN: f64 = 0.65;
pub const MEDIUM_SHOT_MIN: f64 = 0.40;

/// Group by box-to-image area ratio; thresholds belong to the upper group.
pub fn shot_group(size_ratio: f64) -> ShotGroup {
    if size_ratio >= MANY_SHOT_MIN {
        ShotGroup::Many
    } else if size_ratio >= MEDIUM_SHOT_MIN {
        ShotGroup::Medium
    } else {
        ShotGroup::Few
    }
}

/// Intersection over union. Degenerate boxes have zero area.
pub fn iou(a: &CropBox, b: &CropBox) -> f64 {
    let w = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let h = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Mean absolute displacement of the four normalized boundaries.
pub fn bde(a: &CropBox, b: &CropBox) -> f64 {
    a.boundaries()
        .iter()
        .zip(b.boundaries())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 4.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    /// `None` for an empty group.
    pub iou: Option<f64>,
    pub bde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub all: GroupStats,
    pub many: GroupStats,
    pub medium: GroupStats,
    pub few: GroupStats,
    /// Mean absolute error per boundary, `[left, right, top, bottom]`.
    pub boundary_mae: [f64; 4],
}

impl MetricsReport {
    pub fn group(&self, g: ShotGroup) -> &GroupStats {
        match g {
            ShotGroup::Many => &self.many,
            ShotGroup::Medium => &self.medium,
            ShotGroup::Few => &self.few,
        }
    }

    /// `(label, stats)` rows in display order.
    pub fn rows(&self) -> [(&'static str, &GroupStats); 4] {
        [("all", &self.all), ("many", &self.many), ("medium", &self.medium), ("few", &self.few)]
    }

    /// Two-block table of IoU and BDE over All, Many, Medium and Few.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut out = String::new();
        out.push_str(&format!("{:<6}{:>8}{:>8}{:>8}{:>8}\n", "", "All", "Many", "Med.", "Few"));
        out.push_str(&format!("{:<6}", "IoU"));
        for (_, g) in self.rows() {
            out.push_str(&format!("{:>8}", cell(g.iou)));
        }
        out.push_str(&format!("\n{:<6}", "BDE"));
        for (_, g) in self.rows() {
            out.push_str(&format!("{:>8}", cell(g.bde)));
        }
        out.push_str(&format!("\n{:<6}", "N"));
        for (_, g) in self.rows() {
            out.push_str(&format!("{:>8}", g.count));
        }
        out.push('\n');
        out
    }
}

/// Aggregate IoU and BDE of raw predictions per shot group.
pub fn evaluate_predictions(predictions: &[[f64; 4]], targets: &[[f64; 4]], size_ratios: &[f64]) -> MetricsReport {
    #[derive(Default)]
    struct Acc {
        n: usize,
        iou: f64,
        bde: f64,
    }
    impl Acc {
        fn stats(&self) -> GroupStats {
            let mean = |s: f64| (self.n > 0).then(|| s / self.n as f64);
            GroupStats {
                count: self.n,
                iou: mean(self.iou),
                bde: mean(self.bde),
            }
        }
    }
    let mut all = Acc::default();
    let mut groups: [Acc; 3] = Default::default();
    let mut mae = [0.0; 4];
    for ((p, t), &r) in predictions.iter().zip(targets).zip(size_ratios) {
        let (pb, tb) = (CropBox::unchecked(*p), CropBox::unchecked(*t));
        let (i, b) = (iou(&pb, &tb), bde(&pb, &tb));
        let g = &mut groups[ShotGroup::ALL.iter().position(|&g| g == shot_group(r)).unwrap()];
        for acc in [&mut all, g] {
            acc.n += 1;
            acc.iou += i;
            acc.bde += b;
        }
        for d in 0..4 {
            mae[d] += (p[d] - t[d]).abs();
        }
    }
    let n = predictions.len().max(1) as f64;
    MetricsReport {
        all: all.stats(),
        many: groups[0].stats(),
        medium: groups[1].stats(),
        few: groups[2].stats(),
        boundary_mae: mae.map(|m| m / n),
    }
}

/// Predictions and pooled per-boundary features over a whole dataset.
pub struct DatasetPredictions {
    pub predictions: Vec<[f64; 4]>,
    /// `features[d][i]` is the pooled vector of sample `i` for boundary `d`.
    pub features: [Vec<Vec<f64>>; 4],
}

pub fn predict_dataset(model: &Cblnet, params: &ModelParams, dataset: &Dataset, batch_size: usize) -> Result<DatasetPredictions> {
    let mut out = DatasetPredictions {
        predictions: Vec::with_capacity(dataset.len()),
        features: Default::default(),
    };
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| dataset.materialize(i).map(|s| s.image.expect("materialized")))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = images.iter().collect();
        let (pred, feats) = model.predict_with_features(params, &refs)?;
        out.predictions.extend(pred);
        for (acc, f) in out.features.iter_mut().zip(feats) {
            acc.extend(f);
        }
    }
    Ok(out)
}

/// Run the model over `dataset` without augmentation and aggregate.
pub fn evaluate(model: &Cblnet, params: &ModelParams, dataset: &Dataset, batch_size: usize) -> Result<(MetricsReport, Vec<[f64; 4]>)> {
    let preds = predict_dataset(model, params, dataset, batch_size)?.predictions;
    let report = evaluate_predictions(&preds, &dataset.targets(), &dataset.size_ratios());
    Ok((report, preds))
}

// ---- collapse diagnostics ----------------------------------------------

pub const HISTOGRAM_BINS: usize = 50;

/// Pearson correlation. `None` below three samples; `Some((0, true))` when
/// either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<(f64, bool)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Some((0.0, true));
    }
    Some(((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false))
}

/// Counts of `values` over equal-width bins on `[0, 1]`; out-of-range
/// values go to the end bins.
pub fn location_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTriviality {
    pub boundary: Boundary,
    /// Correlation of `|ŷ − y|` with `|y − ȳ_train|`; `None` below three samples.
    pub score: Option<f64>,
    pub zero_variance: bool,
    pub model_mae: f64,
    /// MAE of always predicting the training mean.
    pub trivial_mae: f64,
    /// `trivial_mae − model_mae`.
    pub mae_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryDiagnostics {
    pub summary: BoundaryTriviality,
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
    pub errors: Vec<f64>,
    pub distance_to_mean: Vec<f64>,
    pub target_histogram: Vec<usize>,
    pub prediction_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrivialityReport {
    pub train_mean: [f64; 4],
    pub boundaries: [BoundaryDiagnostics; 4],
}

impl TrivialityReport {
    pub fn summaries(&self) -> [BoundaryTriviality; 4] {
        std::array::from_fn(|d| self.boundaries[d].summary.clone())
    }
}

pub fn boundary_means(targets: &[[f64; 4]]) -> [f64; 4] {
    let n = targets.len().max(1) as f64;
    std::array::from_fn(|d| targets.iter().map(|t| t[d]).sum::<f64>() / n)
}

/// Per-boundary comparison against the constant training-mean predictor.
pub fn triviality_report(predictions: &[[f64; 4]], targets: &[[f64; 4]], train_mean: [f64; 4]) -> TrivialityReport {
    let n = targets.len().max(1) as f64;
    let boundaries = std::array::from_fn(|d| {
        let y: Vec<f64> = targets.iter().map(|t| t[d]).collect();
        let p: Vec<f64> = predictions.iter().map(|t| t[d]).collect();
        let errors: Vec<f64> = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).collect();
        let dist: Vec<f64> = y.iter().map(|v| (v - train_mean[d]).abs()).collect();
        let corr = pearson(&errors, &dist);
        let model_mae = errors.iter().sum::<f64>() / n;
        let trivial_mae = dist.iter().sum::<f64>() / n;
        BoundaryDiagnostics {
            summary: BoundaryTriviality {
                boundary: Boundary::ALL[d],
                score: corr.map(|c| c.0),
                zero_variance: corr.is_some_and(|c| c.1),
                model_mae,
                trivial_mae,
                mae_gap: trivial_mae - model_mae,
            },
            target_histogram: location_histogram(&y, HISTOGRAM_BINS),
            prediction_histogram: location_histogram(&p, HISTOGRAM_BINS),
            targets: y,
            predictions: p,
            errors,
            distance_to_mean: dist,
        }
    });
    TrivialityReport { train_mean, boundaries }
}

// ---- CSV -----------------------------------------------------------------

/// Nine significant digits, plain notation for moderate magnitudes.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return "nan".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt_sig)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        context: format!("csv {}", path.display()),
        source: std::io::Error::other(e),
    }
}

/// `group,count,iou,bde` for all, many, medium and few.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e| csv_err(path, e);
    w.write_record(["group", "count", "iou", "bde"]).map_err(wrap)?;
    for (name, g) in report.rows() {
        w.write_record([name.to_string(), g.count.to_string(), opt(g.iou), opt(g.bde)]).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a file written by [`write_metrics_csv`] into `(group, count, iou, bde)`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Config(format!("bad number {:?}", &rec[i])));
            Ok((rec[0].to_string(), rec[1].parse().unwrap_or(0), num(2)?, num(3)?))
        })
        .collect()
}

/// Writes `triviality.csv` (one summary row per boundary) and, per boundary
/// tag `d`, `triviality_<d>.csv` with per-sample errors and
/// `histograms_<d>.csv` with location histograms.
pub fn write_triviality_csvs(report: &TrivialityReport, dir: &Path) -> Result<()> {
    let path = dir.join("triviality.csv");
    let mut w = writer(&path)?;
    let wrap = |e| csv_err(&path, e);
    w.write_record(["boundary", "train_mean", "score", "zero_variance", "model_mae", "trivial_mae", "mae_gap"])
        .map_err(wrap)?;
    for b in &report.boundaries {
        let s = &b.summary;
        w.write_record([
            s.boundary.name().to_string(),
            fmt_sig(report.train_mean[s.boundary.index()]),
            opt(s.score),
            s.zero_variance.to_string(),
            fmt_sig(s.model_mae),
            fmt_sig(s.trivial_mae),
            fmt_sig(s.mae_gap),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    for b in &report.boundaries {
        let tag = b.summary.boundary.tag();
        let path = dir.join(format!("triviality_{tag}.csv"));
        let mut w = writer(&path)?;
        let wrap = |e| csv_err(&path, e);
        w.write_record(["sample", "target", "prediction", "error", "distance_to_mean"]).map_err(wrap)?;
        for i in 0..b.targets.len() {
            w.write_record([
                i.to_string(),
                fmt_sig(b.targets[i]),
                fmt_sig(b.predictions[i]),
                fmt_sig(b.errors[i]),
                fmt_sig(b.distance_to_mean[i]),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

        let path = dir.join(format!("histograms_{tag}.csv"));
        let mut w = writer(&path)?;
        let wrap = |e| csv_err(&path, e);
        w.write_record(["bin_low", "bin_high", "targets", "predictions"]).map_err(wrap)?;
        let bins = b.target_histogram.len();
        for k in 0..bins {
            w.write_record([
                fmt_sig(k as f64 / bins as f64),
                fmt_sig((k + 1) as f64 / bins as f64),
                b.target_histogram[k].to_string(),
                b.prediction_histogram[k].to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Column `name` of a headerful CSV as floats.
pub fn read_csv_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let col = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("{} has no column {name}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            rec[col]
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in {}", &rec[col], path.display())))
        })
        .collect()
}

/// One row per sample and boundary: `sample,boundary,target,f0..f{C-1}`.
pub fn write_features_csv(features: &[Vec<Vec<f64>>; 4], targets: &[[f64; 4]], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let wrap = |e| csv_err(path, e);
    let dim = features[0].first().map_or(0, Vec::len);
    let mut header = vec!["sample".to_string(), "boundary".to_string(), "target".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(wrap)?;
    for (i, t) in targets.iter().enumerate() {
        for d in Boundary::ALL {
            let mut row = vec![i.to_string(), d.tag().to_string(), fmt_sig(t[d.index()])];
            row.extend(features[d.index()][i].iter().map(|&v| fmt_sig(v)));
            w.write_record(&row).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// A row of `features.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub sample: usize,
    pub boundary: Boundary,
    pub target: f64,
    pub features: Vec<f64>,
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |what: &str| Error::Config(format!("{}: bad {what}", path.display()));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let boundary = Boundary::ALL
                .into_iter()
                .find(|d| d.tag() == &rec[1])
                .ok_or_else(|| bad("boundary"))?;
            let features = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<_>>()?;
            Ok(FeatureRow {
                sample: rec[0].parse().map_err(|_| bad("sample"))?,
                boundary,
                target: rec[2].parse().map_err(|_| bad("target"))?,
                features,
            })
        })
        .collect()
}

/// Pooled composition features of every sample, for external embedding.
pub fn export_features(model: &Cblnet, params: &ModelParams, dataset: &Dataset, path: &Path, batch_size: usize) -> Result<()> {
    let out = predict_dataset(model, params, dataset, batch_size)?;
    write_features_csv(&out.features, &dataset.targets(), path)
}

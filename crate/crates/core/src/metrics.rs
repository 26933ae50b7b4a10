//! Count metrics, pseudo ground-truth error analysis and CSV emission.

use std::fmt::Write as _;
use std::path::Path;

use crate::density::{count, DensityMap};
use crate::error::{Error, Result};
use crate::gp::{self, GpConfig, LatentBank};
use crate::model::{self, ModelParams};
use crate::synth::AnnotatedImage;
use crate::tensor::Graph;

/// Mean absolute error and root-mean-square error over (gt, pred) pairs.
pub fn mae_mse(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Contract("mae_mse needs at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(g, p)| (g - p).abs()).sum::<f64>() / n;
    let mse = (pairs.iter().map(|(g, p)| (g - p) * (g - p)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

/// Percent improvement of `method` over `baseline`, averaged over MAE and
/// MSE. Positive means the method is better.
pub fn average_gain(baseline: (f64, f64), method: (f64, f64)) -> Result<f64> {
    if !(baseline.0 > 0.0 && baseline.1 > 0.0) {
        return Err(Error::Contract(format!(
            "average gain needs a positive baseline, got {baseline:?}"
        )));
    }
    let g_mae = (baseline.0 - method.0) / baseline.0;
    let g_mse = (baseline.1 - method.1) / baseline.1;
    Ok(50.0 * (g_mae + g_mse))
}

/// Integer percent, as gains are usually tabulated.
pub fn display_gain(ag: f64) -> i64 {
    ag.round() as i64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCount {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageCount>,
}

impl MetricsReport {
    pub fn from_counts(per_image: Vec<ImageCount>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = per_image.iter().map(|c| (c.gt_count, c.pred_count)).collect();
        let (mae, mse) = mae_mse(&pairs)?;
        Ok(Self {
            mae,
            mse,
            n_images: per_image.len(),
            per_image,
        })
    }
}

/// Density prediction on a whole image. Images larger than the training
/// crop go through the size-agnostic path.
pub fn predict_image(params: &ModelParams, img: &AnnotatedImage) -> Result<DensityMap> {
    let cfg = &params.config;
    if img.height == cfg.height && img.width == cfg.width {
        return model::predict(params, &img.pixels);
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let y = model::forward_region(&mut g, &bound, &img.pixels, img.height, img.width)?;
    DensityMap::from_values(img.height, img.width, g.value(y).data().to_vec())
}

/// Predicted vs annotated counts over a test set.
pub fn evaluate(params: &ModelParams, images: &[AnnotatedImage]) -> Result<MetricsReport> {
    let per_image = images
        .iter()
        .map(|img| {
            Ok(ImageCount {
                id: img.id.clone(),
                gt_count: img.count() as f64,
                pred_count: count(&predict_image(params, img)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_counts(per_image)
}

/// Normalized count errors of the prediction and of the pseudo ground truth
/// for one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoErrorRecord {
    pub id: String,
    pub err_pred: f64,
    pub err_pseudo: f64,
}

impl PseudoErrorRecord {
    /// `None` when the image has no people, since the error is normalized by
    /// the true count.
    pub fn from_counts(id: &str, gt: f64, pred: f64, pseudo: f64) -> Option<Self> {
        (gt > 0.0).then(|| Self {
            id: id.to_string(),
            err_pred: (pred - gt).abs() / gt,
            err_pseudo: (pseudo - gt).abs() / gt,
        })
    }
}

/// Pseudo-error records for every unlabeled image under the given bank.
/// Returns the records and the number of images excluded (no people or a
/// degenerate latent).
pub fn pseudo_error_records(
    params: &ModelParams,
    bank: &LatentBank,
    unlabeled: &[AnnotatedImage],
    cfg: &GpConfig,
) -> Result<(Vec<PseudoErrorRecord>, usize)> {
    let mut out = Vec::with_capacity(unlabeled.len());
    let mut excluded = 0;
    for img in unlabeled {
        let z = model::latent(params, &img.pixels)?;
        if !(z.norm() > 0.0) {
            excluded += 1;
            continue;
        }
        let post = gp::posterior(z.as_slice(), bank, cfg)?;
        let pred = count(&model::predict(params, &img.pixels)?);
        let pseudo: f64 = post.mean.iter().sum();
        match PseudoErrorRecord::from_counts(&img.id, img.count() as f64, pred, pseudo) {
            Some(r) => out.push(r),
            None => excluded += 1,
        }
    }
    Ok((out, excluded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoHistogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub pred: Vec<usize>,
    pub pseudo: Vec<usize>,
    /// Records dropped for a non-finite or negative error.
    pub excluded: usize,
}

/// Equal-width histograms of both error kinds over their pooled range.
pub fn pseudo_error_histogram(records: &[PseudoErrorRecord], bins: usize) -> Result<PseudoHistogram> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    let valid: Vec<&PseudoErrorRecord> = records
        .iter()
        .filter(|r| r.err_pred >= 0.0 && r.err_pseudo >= 0.0 && r.err_pred.is_finite() && r.err_pseudo.is_finite())
        .collect();
    let excluded = records.len() - valid.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &valid {
        lo = lo.min(r.err_pred.min(r.err_pseudo));
        hi = hi.max(r.err_pred.max(r.err_pseudo));
    }
    if valid.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi.max(lo) } else { lo + width * i as f64 })
        .collect();
    let slot = |v: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut pred = vec![0; bins];
    let mut pseudo = vec![0; bins];
    for r in valid {
        pred[slot(r.err_pred)] += 1;
        pseudo[slot(r.err_pseudo)] += 1;
    }
    Ok(PseudoHistogram {
        edges,
        pred,
        pseudo,
        excluded,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Format with 6 significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding may bump the exponent (e.g. 999999.5)
    let sci = format!("{:.5e}", x);
    let exp = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let (mant, e) = sci.split_once('e').expect("scientific format");
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), sign, e.trim_start_matches('-').parse::<i32>().unwrap_or(0))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub const METRICS_HEADER: &str = "run_id,labeled_fraction,method,mae,mse,ag,seed";
pub const PSEUDO_HIST_HEADER: &str = "bin_lo,bin_hi,pred_count,pseudo_count";
pub const PER_IMAGE_HEADER: &str = "run_id,method,labeled_fraction,seed,image_id,gt_count,pred_count";

/// One row of `metrics.csv`. `seed` is `None` for rows averaged over trials
/// and `ag` is `None` when no baseline is available.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub labeled_fraction: f64,
    pub method: String,
    pub mae: f64,
    pub mse: f64,
    pub ag: Option<f64>,
    pub seed: Option<u64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            sig6(self.labeled_fraction),
            self.method,
            sig6(self.mae),
            sig6(self.mse),
            self.ag.map(sig6).unwrap_or_default(),
            self.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                file: "metrics.csv".into(),
                line: 0,
                msg: format!("expected 7 fields, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                file: "metrics.csv".into(),
                line: 0,
                msg: format!("bad number {s:?}"),
            })
        };
        Ok(Self {
            run_id: f[0].to_string(),
            labeled_fraction: num(f[1])?,
            method: f[2].to_string(),
            mae: num(f[3])?,
            mse: num(f[4])?,
            ag: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            seed: if f[6] == "mean" { None } else { Some(num(f[6])? as u64) },
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Parse a `metrics.csv` body, reporting the offending line on failure.
pub fn parse_metrics_csv(text: &str, file: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                file: file.into(),
                line: 1,
                msg: "missing metrics header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            MetricsRow::parse(l.trim()).map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse {
                    file: file.into(),
                    line: i + 1,
                    msg,
                },
                other => other,
            })
        })
        .collect()
}

pub fn pseudo_hist_csv(h: &PseudoHistogram) -> String {
    let mut s = format!("{PSEUDO_HIST_HEADER}\n");
    for i in 0..h.pred.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            sig6(h.edges[i]),
            sig6(h.edges[i + 1]),
            h.pred[i],
            h.pseudo[i]
        );
    }
    s
}

/// Write via a temporary sibling and rename so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

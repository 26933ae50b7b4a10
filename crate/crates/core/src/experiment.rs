//! Experiment orchestration: datasets, trials over seeds, sweeps, transfer,
//! and report files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{
    self, average_gain, evaluate, pseudo_error_histogram, pseudo_error_records, MetricsReport, MetricsRow,
    PseudoErrorRecord,
};
use crate::model::save_checkpoint;
use crate::synth::{generate_dataset, split, AnnotatedImage, DomainStyle, SplitConfig};
use crate::trainer::{train, TrainConfig, VarianceStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    Gp,
    Ranking,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Gp => "gp",
            Method::Ranking => "ranking",
        }
    }

    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            gp_enabled: self == Method::Gp,
            ranking_enabled: self == Method::Ranking,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "gp" => Ok(Method::Gp),
            "ranking" => Ok(Method::Ranking),
            _ => Err(Error::Config(format!("unknown method {s:?} (baseline, gp, ranking)"))),
        }
    }
}

/// Parameters of a generated train/test/validation triple. All three splits
/// are drawn from one stream so they share a distribution but no images.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_val: usize,
    pub size: usize,
    pub count_range: (usize, usize),
    pub style: DomainStyle,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 50,
            n_val: 50,
            size: 64,
            count_range: (5, 50),
            style: DomainStyle::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

impl Datasets {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let n = spec.n_train + spec.n_test + spec.n_val;
        let mut all = generate_dataset(n, (spec.size, spec.size), spec.count_range, &spec.style, spec.seed)?;
        let val = all.split_off(spec.n_train + spec.n_test);
        let test = all.split_off(spec.n_train);
        Ok(Self { train: all, test, val })
    }
}

/// Outcome of one (method, fraction, seed) training run.
pub struct TrialResult {
    pub method: Method,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub test: MetricsReport,
    pub val: Option<MetricsReport>,
    pub pseudo: Vec<PseudoErrorRecord>,
    pub variance: VarianceStats,
    pub params: crate::model::ModelParams,
}

/// Train one method on a seeded labeled/unlabeled split of `data.train` and
/// evaluate on the test (and, if present, validation) images.
pub fn run_trial(
    data: &Datasets,
    base: &TrainConfig,
    method: Method,
    labeled_fraction: f64,
    seed: u64,
) -> Result<TrialResult> {
    let (labeled, unlabeled) = split(
        &data.train,
        &SplitConfig {
            labeled_fraction,
            seed,
        },
    )?;
    let cfg = TrainConfig {
        seed,
        ..method.configure(base)
    };
    run_on_split(&labeled, &unlabeled, &data.test, &data.val, &cfg, method, labeled_fraction)
}

pub fn run_on_split(
    labeled: &[AnnotatedImage],
    unlabeled: &[AnnotatedImage],
    test: &[AnnotatedImage],
    val: &[AnnotatedImage],
    cfg: &TrainConfig,
    method: Method,
    labeled_fraction: f64,
) -> Result<TrialResult> {
    let state = train(labeled, unlabeled, cfg)?;
    let pseudo = match (&state.bank, method) {
        (Some(bank), Method::Gp) if !unlabeled.is_empty() => {
            pseudo_error_records(&state.params, bank, unlabeled, &cfg.gp_config())?.0
        }
        _ => Vec::new(),
    };
    Ok(TrialResult {
        method,
        labeled_fraction,
        seed: cfg.seed,
        test: evaluate(&state.params, test)?,
        val: if val.is_empty() { None } else { Some(evaluate(&state.params, val)?) },
        pseudo,
        variance: state.variance,
        params: state.params,
    })
}

/// Seeds used for `trials` repetitions starting at `base`.
pub fn trial_seeds(base: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|t| base + t).collect()
}

/// One cell of an experiment grid: a named configuration run for one method
/// over all trial seeds.
pub struct CellResult {
    pub label: String,
    pub method: Method,
    pub labeled_fraction: f64,
    pub trials: Vec<TrialResult>,
}

impl CellResult {
    pub fn mean_test(&self) -> (f64, f64) {
        mean_pair(self.trials.iter().map(|t| (t.test.mae, t.test.mse)))
    }

    pub fn mean_val(&self) -> Option<(f64, f64)> {
        let v: Vec<(f64, f64)> = self
            .trials
            .iter()
            .map(|t| t.val.as_ref().map(|r| (r.mae, r.mse)))
            .collect::<Option<_>>()?;
        Some(mean_pair(v.into_iter()))
    }
}

fn mean_pair(it: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in it {
        a += x;
        b += y;
        n += 1;
    }
    (a / n.max(1) as f64, b / n.max(1) as f64)
}

/// Run every trial seed of one cell, reporting progress through `log`.
pub fn run_cell(
    data: &Datasets,
    cfg: &TrainConfig,
    label: &str,
    method: Method,
    labeled_fraction: f64,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<CellResult> {
    let mut trials = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let t = run_trial(data, cfg, method, labeled_fraction, seed)?;
        log(&format!(
            "{label} method={method} fraction={labeled_fraction} seed={seed} test_mae={:.4} test_mse={:.4}",
            t.test.mae, t.test.mse
        ));
        trials.push(t);
    }
    Ok(CellResult {
        label: label.to_string(),
        method,
        labeled_fraction,
        trials,
    })
}

fn run_id(label: &str, method: Method, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{label}-{method}-s{s}"),
        None => format!("{label}-{method}-mean"),
    }
}

/// Metrics rows for a set of cells: per-trial rows then a mean row per cell.
/// Gains are computed against the baseline cell sharing the same
/// `baseline_key` (per seed for trial rows, on means for mean rows).
pub fn metrics_rows(
    cells: &[CellResult],
    use_val: bool,
    baseline_of: &dyn Fn(&CellResult) -> Option<usize>,
) -> Result<Vec<MetricsRow>> {
    let pick = |t: &TrialResult| -> (f64, f64) {
        match (&t.val, use_val) {
            (Some(v), true) => (v.mae, v.mse),
            _ => (t.test.mae, t.test.mse),
        }
    };
    let mut rows = Vec::new();
    for cell in cells {
        let base = baseline_of(cell).map(|i| &cells[i]);
        for t in &cell.trials {
            let (mae, mse) = pick(t);
            let ag = match base.and_then(|b| b.trials.iter().find(|bt| bt.seed == t.seed)) {
                Some(bt) if cell.method != Method::Baseline => Some(average_gain(pick(bt), (mae, mse))?),
                Some(_) => Some(0.0),
                None => None,
            };
            rows.push(MetricsRow {
                run_id: run_id(&cell.label, cell.method, Some(t.seed)),
                labeled_fraction: cell.labeled_fraction,
                method: cell.method.name().to_string(),
                mae,
                mse,
                ag,
                seed: Some(t.seed),
            });
        }
        let mean = mean_pair(cell.trials.iter().map(pick));
        let ag = match base {
            Some(b) if cell.method != Method::Baseline => Some(average_gain(mean_pair(b.trials.iter().map(pick)), mean)?),
            Some(_) => Some(0.0),
            None => None,
        };
        rows.push(MetricsRow {
            run_id: run_id(&cell.label, cell.method, None),
            labeled_fraction: cell.labeled_fraction,
            method: cell.method.name().to_string(),
            mae: mean.0,
            mse: mean.1,
            ag,
            seed: None,
        });
    }
    Ok(rows)
}

pub fn per_image_csv(cells: &[CellResult]) -> String {
    let mut s = format!("{}\n", metrics::PER_IMAGE_HEADER);
    for cell in cells {
        for t in &cell.trials {
            let rid = run_id(&cell.label, cell.method, Some(t.seed));
            for c in &t.test.per_image {
                s.push_str(&format!(
                    "{rid},{},{},{},{},{},{}\n",
                    cell.method,
                    metrics::sig6(cell.labeled_fraction),
                    t.seed,
                    c.id,
                    metrics::sig6(c.gt_count),
                    metrics::sig6(c.pred_count)
                ));
            }
        }
    }
    s
}

pub const HIST_BINS: usize = 10;

/// Write `metrics.csv`, `per_image.csv`, `pseudo_hist.csv`, optional
/// `val_metrics.csv`, per-trial partial files and checkpoints under `out`.
pub fn write_reports(
    out: &Path,
    cells: &[CellResult],
    baseline_of: &dyn Fn(&CellResult) -> Option<usize>,
) -> Result<()> {
    let trials_dir = out.join("trials");
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&trials_dir)?;
    std::fs::create_dir_all(&ckpt_dir)?;
    for cell in cells {
        for t in &cell.trials {
            let rid = run_id(&cell.label, cell.method, Some(t.seed));
            let row = MetricsRow {
                run_id: rid.clone(),
                labeled_fraction: cell.labeled_fraction,
                method: cell.method.name().into(),
                mae: t.test.mae,
                mse: t.test.mse,
                ag: None,
                seed: Some(t.seed),
            };
            metrics::write_atomic(&trials_dir.join(format!("{rid}.csv")), &metrics::metrics_csv(&[row]))?;
            save_checkpoint(&t.params, &ckpt_dir.join(format!("{rid}.ckpt")))?;
        }
    }
    let rows = metrics_rows(cells, false, baseline_of)?;
    metrics::write_atomic(&out.join("metrics.csv"), &metrics::metrics_csv(&rows))?;
    if cells.iter().all(|c| c.trials.iter().all(|t| t.val.is_some())) {
        let rows = metrics_rows(cells, true, baseline_of)?;
        metrics::write_atomic(&out.join("val_metrics.csv"), &metrics::metrics_csv(&rows))?;
    }
    metrics::write_atomic(&out.join("per_image.csv"), &per_image_csv(cells))?;
    let pooled: Vec<PseudoErrorRecord> = cells
        .iter()
        .flat_map(|c| c.trials.iter().flat_map(|t| t.pseudo.iter().cloned()))
        .collect();
    let hist = pseudo_error_histogram(&pooled, HIST_BINS)?;
    metrics::write_atomic(&out.join("pseudo_hist.csv"), &metrics::pseudo_hist_csv(&hist))?;
    Ok(())
}

/// Style of the shifted target domain used by transfer experiments: larger,
/// fainter dots on a noisier, more textured background.
pub fn shifted_style() -> DomainStyle {
    DomainStyle {
        dot_radius: 2.0,
        dot_intensity: 0.35,
        background_noise_std: 0.08,
        background_texture_scale: 0.5,
        seed_offset: 1_000,
    }
}

/// Source/target data for a transfer experiment: the labeled source train
/// set, the unlabeled target train set, and target test/validation images.
pub struct TransferData {
    pub source: Vec<AnnotatedImage>,
    pub target: Datasets,
}

impl TransferData {
    pub fn generate(source: &DatasetSpec, target: &DatasetSpec) -> Result<Self> {
        let src = Datasets::generate(source)?;
        Ok(Self {
            source: src.train,
            target: Datasets::generate(target)?,
        })
    }
}

/// No-adapt (source only, reported as `baseline`) and GP (source labeled,
/// target unlabeled) arms, both evaluated on the target domain.
pub fn run_transfer(
    data: &TransferData,
    cfg: &TrainConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    for method in [Method::Baseline, Method::Gp] {
        let mut trials = Vec::new();
        for &seed in seeds {
            let tc = TrainConfig {
                seed,
                ..method.configure(cfg)
            };
            let unlabeled: &[AnnotatedImage] = if method == Method::Gp { &data.target.train } else { &[] };
            let t = run_on_split(&data.source, unlabeled, &data.target.test, &data.target.val, &tc, method, 1.0)?;
            log(&format!(
                "transfer arm={} seed={seed} target_mae={:.4}",
                arm_name(method),
                t.test.mae
            ));
            trials.push(t);
        }
        cells.push(CellResult {
            label: "transfer".into(),
            method,
            labeled_fraction: 1.0,
            trials,
        });
    }
    Ok(cells)
}

pub fn arm_name(method: Method) -> &'static str {
    match method {
        Method::Baseline => "no_adapt",
        m => m.name(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    LabeledFraction,
    LambdaUn,
    NNeighbors,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled_fraction" => Ok(SweepAxis::LabeledFraction),
            "lambda_un" => Ok(SweepAxis::LambdaUn),
            "n_neighbors" => Ok(SweepAxis::NNeighbors),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?} (labeled_fraction, lambda_un, n_neighbors)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LabeledFraction => "labeled_fraction",
            SweepAxis::LambdaUn => "lambda_un",
            SweepAxis::NNeighbors => "n_neighbors",
        }
    }
}

/// Run every grid point for every method. Along `lambda_un` and
/// `n_neighbors` the baseline does not depend on the grid value and is run
/// once.
pub fn run_sweep(
    data: &Datasets,
    cfg: &TrainConfig,
    axis: SweepAxis,
    grid: &[f64],
    methods: &[Method],
    labeled_fraction: f64,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<Vec<CellResult>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &v in grid {
        let mut c = cfg.clone();
        let mut fraction = labeled_fraction;
        match axis {
            SweepAxis::LabeledFraction => fraction = v,
            SweepAxis::LambdaUn => c.lambda_un = v,
            SweepAxis::NNeighbors => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("n_neighbors grid value {v} is not a positive integer")));
                }
                c.n_neighbors = v as usize;
            }
        }
        let label = format!("{}={}", axis.name(), metrics::sig6(v));
        for &m in methods {
            if m == Method::Baseline && axis != SweepAxis::LabeledFraction {
                continue;
            }
            cells.push(run_cell(data, &c, &label, m, fraction, seeds, log)?);
        }
    }
    if methods.contains(&Method::Baseline) && axis != SweepAxis::LabeledFraction {
        cells.push(run_cell(data, cfg, "shared", Method::Baseline, labeled_fraction, seeds, log)?);
    }
    Ok(cells)
}

/// Baseline lookup for sweeps: same label (grid point) if present, else the
/// shared baseline cell.
pub fn sweep_baseline(cells: &[CellResult]) -> impl Fn(&CellResult) -> Option<usize> + '_ {
    move |cell: &CellResult| {
        cells
            .iter()
            .position(|c| c.method == Method::Baseline && c.label == cell.label)
            .or_else(|| cells.iter().position(|c| c.method == Method::Baseline && c.label == "shared"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parse_round_trip() {
        for m in [Method::Baseline, Method::Gp, Method::Ranking] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("svm".parse::<Method>().is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let d = Datasets::generate(&DatasetSpec {
            n_train: 5,
            n_test: 3,
            n_val: 2,
            size: 32,
            count_range: (1, 4),
            ..DatasetSpec::default()
        })
        .unwrap();
        assert_eq!((d.train.len(), d.test.len(), d.val.len()), (5, 3, 2));
        assert!(d.test.iter().all(|t| d.train.iter().all(|x| x.id != t.id)));
    }

    #[test]
    fn seeds_are_consecutive() {
        assert_eq!(trial_seeds(7, 3), vec![7, 8, 9]);
    }
}

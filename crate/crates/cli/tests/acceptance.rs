//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/support/grad_suite.rs"]
mod grad_suite;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gpcount::density::{count, synthesize_density, PointAnnotation};
use gpcount::experiment::{
    run_cell, run_transfer, shifted_style, trial_seeds, CellResult, DatasetSpec, Datasets, Method, TransferData,
};
use gpcount::gp::{self, GpConfig, LatentBank, NeighborMetric};
use gpcount::metrics::{average_gain, display_gain, mae_mse, median};
use gpcount::trainer::{TrainConfig, VarianceStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: usize = 5;
const FRACTIONS: [f64; 4] = [0.05, 0.25, 0.50, 0.75];
const LAMBDAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

struct Outcome {
    results: Vec<(usize, bool)>,
}

impl Outcome {
    fn report(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        println!("criterion {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((n, pass));
    }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for c in 0..m {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    x
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn criterion_1(out: &mut Outcome) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (rows, m, d) = (rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=4));
        let noise: f64 = rng.random_range(0.1..2.0);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let z = v(m);
        let feats: Vec<Vec<f64>> = (0..rows).map(|_| v(m)).collect();
        let targets: Vec<Vec<f64>> = (0..rows).map(|_| v(d)).collect();
        let mut bank = LatentBank::new();
        for (i, (f, t)) in feats.iter().zip(&targets).enumerate() {
            bank.push(format!("b{i}"), f.clone(), t.clone()).unwrap();
        }
        let cfg = GpConfig { n_neighbors: 8, noise_variance: noise, metric: NeighborMetric::Cosine };
        let post = gp::posterior(&z, &bank, &cfg).unwrap();

        let a: Vec<Vec<f64>> = (0..rows)
            .map(|i| (0..rows).map(|j| cos(&feats[i], &feats[j]) + if i == j { noise } else { 0.0 }).collect())
            .collect();
        let k: Vec<f64> = feats.iter().map(|f| cos(&z, f)).collect();
        let rhs: Vec<Vec<f64>> = targets.iter().zip(&k).map(|(t, kv)| t.iter().copied().chain([*kv]).collect()).collect();
        let sol = gauss_solve(a, rhs);
        for c in 0..d {
            let mu: f64 = (0..rows).map(|r| k[r] * sol[r][c]).sum();
            worst = worst.max((post.mean[c] - mu).abs());
        }
        let var = 1.0 - (0..rows).map(|r| k[r] * sol[r][d]).sum::<f64>() + noise;
        worst = worst.max((post.variance - var).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    out.report(
        1,
        "gp oracle equivalence",
        worst <= 1e-9 && secs < 5.0,
        format!("100 instances, max abs diff {worst:.3e} (tol 1e-9), {secs:.2} s (limit 5 s)"),
    );
}

fn criterion_2(out: &mut Outcome) {
    let f = vec![0.3, -1.2, 0.7, 2.0];
    let y = vec![4.0, -2.5, 0.125];
    let mut bank = LatentBank::new();
    bank.push("only", f.clone(), y.clone()).unwrap();
    let post = gp::posterior(&f, &bank, &GpConfig::default()).unwrap();
    let mean_err = post.mean.iter().zip(&y).map(|(m, t)| (m - t / 2.0).abs()).fold(0.0, f64::max);
    let var_err = (post.variance - 1.5).abs();
    out.report(
        2,
        "single identical neighbor",
        mean_err <= 1e-12 && var_err <= 1e-12,
        format!("|mu - y/2| = {mean_err:.3e}, |Sigma - 1.5| = {var_err:.3e} (tol 1e-12)"),
    );
}

fn criterion_4(out: &mut Outcome) {
    let t0 = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut min_checks = usize::MAX;
    let mut ops = 0;
    for (_, group) in grad_suite::GROUPS {
        let rec = grad_suite::run(*group, 20);
        for (name, (err, n)) in rec.ops {
            ops += 1;
            min_checks = min_checks.min(n);
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    out.report(
        4,
        "gradient suite",
        worst.1 <= 1e-4 && min_checks >= 20 && secs < 30.0,
        format!(
            "{ops} ops, >= {min_checks} instances each, worst rel err {:.3e} ({}) (tol 1e-4), {secs:.2} s (limit 30 s)",
            worst.1, worst.0
        ),
    );
}

fn criterion_5(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(8..65), rng.random_range(8..65));
        let sigma = rng.random_range(0.5..4.0);
        let n = rng.random_range(0..40);
        let pts: Vec<PointAnnotation> = (0..n)
            .map(|_| PointAnnotation::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect();
        let d = synthesize_density(&pts, h, w, sigma).unwrap();
        worst = worst.max((count(&d) - n as f64).abs() / (n.max(1) as f64));
    }
    out.report(
        5,
        "density conservation",
        worst <= 1e-5,
        format!("1000 point sets, max |count - |S|| / max(|S|,1) = {worst:.3e} (tol 1e-5)"),
    );
}

fn criterion_6(out: &mut Outcome) {
    let (mae, mse) = mae_mse(&[(10.0, 12.0), (20.0, 17.0)]).unwrap();
    let zero = mae_mse(&[(3.0, 3.0), (7.5, 7.5)]).unwrap();
    let hand = mae == 2.5 && mse == 6.5f64.sqrt() && zero == (0.0, 0.0);
    let ag_a = average_gain((118.0, 211.0), (102.0, 172.0)).unwrap();
    let ag_b = average_gain((21.2, 34.2), (15.7, 27.9)).unwrap();
    let pass = hand && display_gain(ag_a) == 16 && display_gain(ag_b) == 22;
    out.report(
        6,
        "metric formulas",
        pass,
        format!(
            "mae={mae} mse={mse:.6} (expect 2.5, 2.549510), AG {ag_a:.2} -> {} (expect 16), {ag_b:.2} -> {} (expect 22)",
            display_gain(ag_a),
            display_gain(ag_b)
        ),
    );
}

fn merge_variance(into: &mut VarianceStats, cells: &[&CellResult]) {
    for c in cells {
        for t in &c.trials {
            let v = &t.variance;
            if v.count == 0 {
                continue;
            }
            if into.count == 0 {
                into.min = v.min;
                into.max = v.max;
            }
            into.min = into.min.min(v.min);
            into.max = into.max.max(v.max);
            into.count += v.count;
            into.sum += v.sum;
            into.violations += v.violations;
        }
    }
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_gpcount"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Vec<String> {
    files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok().is_none() || fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.to_string())
        .collect()
}

fn criterion_12(out: &mut Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let small = [
        "--size", "32", "--count", "2:10", "--epochs", "2", "--set", "encoder_channels=4,6,6", "--set", "latent_channels=6",
    ];
    let data = ["--n-train", "16", "--n-test", "6", "--n-val", "4", "--trials", "2"];
    let reports = ["metrics.csv", "per_image.csv", "pseudo_hist.csv", "config.txt"];
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    for cmd in ["generate", "train", "sweep", "transfer", "report"] {
        let dirs: Vec<_> = ["a", "b"].iter().map(|s| tmp.path().join(format!("{cmd}-{s}"))).collect();
        for d in &dirs {
            let o = d.to_str().unwrap();
            let mut args: Vec<&str> = vec![cmd, "--out", o];
            match cmd {
                "generate" => args.extend(["--n", "20", "--size", "32", "--count", "2:10", "--seed", "3"]),
                "train" => args.extend(small.iter().chain(&data).chain(&["--method", "baseline,gp,ranking"])),
                "sweep" => args.extend(small.iter().chain(&data).chain(&["--axis", "lambda_un", "--values", "0,0.6"])),
                "transfer" => args.extend(small.iter().chain(&["--n-source", "12", "--n-target", "12", "--n-test", "4"])),
                _ => args.extend(["--run", "train-a", "--run", "sweep-a"]),
            }
            let ok = if cmd == "report" {
                Command::new(env!("CARGO_BIN_EXE_gpcount"))
                    .args(&args)
                    .current_dir(tmp.path())
                    .output()
                    .map(|o| o.status.success())
                    .unwrap_or(false)
            } else {
                run_cli(&args)
            };
            if !ok {
                failed.push(cmd);
            }
        }
        let files: Vec<String> = if cmd == "generate" {
            let mut names: Vec<String> =
                fs::read_dir(&dirs[0]).map(|r| r.map(|e| e.unwrap().file_name().into_string().unwrap()).collect()).unwrap_or_default();
            names.sort();
            names
        } else if cmd == "report" {
            vec!["metrics.csv".into(), "summary.csv".into()]
        } else {
            reports.iter().map(|s| s.to_string()).collect()
        };
        let refs: Vec<&str> = files.iter().map(String::as_str).collect();
        mismatched.extend(same_files(&dirs[0], &dirs[1], &refs).into_iter().map(|f| format!("{cmd}/{f}")));
    }
    out.report(
        12,
        "determinism",
        failed.is_empty() && mismatched.is_empty(),
        format!(
            "generate/train/sweep/transfer/report each run twice; failed runs {failed:?}, differing files {mismatched:?}"
        ),
    );
}

fn main() {
    let mut out = Outcome { results: Vec::new() };
    let started = Instant::now();
    println!("acceptance: 12 criteria");

    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_4(&mut out);
    criterion_5(&mut out);
    criterion_6(&mut out);
    criterion_12(&mut out);

    let data = Datasets::generate(&DatasetSpec::default()).expect("default dataset");
    let cfg = TrainConfig::default();
    let seeds = trial_seeds(0, SEEDS);
    let mut log = |s: &str| progress(s);

    // labeled-fraction grid, baseline and GP
    let t7 = Instant::now();
    let mut base_cells = Vec::new();
    let mut gp_cells = Vec::new();
    for f in FRACTIONS {
        let label = format!("labeled={f}");
        base_cells.push(run_cell(&data, &cfg, &label, Method::Baseline, f, &seeds, &mut log).expect("baseline"));
        gp_cells.push(run_cell(&data, &cfg, &label, Method::Gp, f, &seeds, &mut log).expect("gp"));
    }
    let secs7 = t7.elapsed().as_secs_f64();
    let base: Vec<f64> = base_cells.iter().map(|c| c.mean_test().0).collect();
    let gpm: Vec<f64> = gp_cells.iter().map(|c| c.mean_test().0).collect();
    let rel = (base[0] - gpm[0]) / base[0];
    let monotone = base.windows(2).all(|w| w[1] <= w[0]);
    let gp_le = gpm.iter().zip(&base).all(|(g, b)| g <= b);
    out.report(
        7,
        "ssl ordering",
        rel >= 0.05 && monotone && gp_le && secs7 < 1800.0,
        format!(
            "test MAE over {SEEDS} seeds, fractions {FRACTIONS:?}: baseline {}, gp {}; improvement at 0.05 = {:.1}% (need >= 5%), baseline nonincreasing {monotone}, gp <= baseline everywhere {gp_le}, {secs7:.0} s (limit 1800 s)",
            fmt_list(&base),
            fmt_list(&gpm),
            100.0 * rel
        ),
    );

    let rank = run_cell(&data, &cfg, "labeled=0.05", Method::Ranking, 0.05, &seeds, &mut log).expect("ranking");
    let r = rank.mean_test().0;
    let pass8 = gpm[0] <= r && r <= base[0] * 1.01;
    out.report(
        8,
        "ranking arm ordering",
        pass8,
        format!(
            "test MAE at 0.05: gp {:.4} <= ranking {r:.4} <= baseline {:.4} (+1% tie allowance) -> gp<=ranking {}, ranking<=baseline*1.01 {}",
            gpm[0],
            base[0],
            gpm[0] <= r,
            r <= base[0] * 1.01
        ),
    );

    let recs: Vec<_> = gp_cells[0].trials.iter().flat_map(|t| t.pseudo.iter().cloned()).collect();
    let med_pred = median(&recs.iter().map(|r| r.err_pred).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let med_pseudo = median(&recs.iter().map(|r| r.err_pseudo).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let per_seed: Vec<String> = gp_cells[0]
        .trials
        .iter()
        .map(|t| {
            let p = median(&t.pseudo.iter().map(|r| r.err_pred).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let q = median(&t.pseudo.iter().map(|r| r.err_pseudo).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            format!("s{}: {q:.3}/{p:.3}", t.seed)
        })
        .collect();
    out.report(
        9,
        "pseudo-GT error below prediction error",
        med_pseudo < med_pred,
        format!(
            "final GP runs at 0.05, {} unlabeled records pooled: median err_pseudo {med_pseudo:.4} vs err_pred {med_pred:.4}; per seed pseudo/pred [{}]",
            recs.len(),
            per_seed.join(", ")
        ),
    );

    let mut lambda_cells: Vec<CellResult> = Vec::new();
    let mut val = Vec::new();
    for l in LAMBDAS {
        let v = if l == cfg.lambda_un {
            gp_cells[0].mean_val().unwrap().0
        } else {
            let c = TrainConfig { lambda_un: l, ..cfg.clone() };
            let cell = run_cell(&data, &c, &format!("lambda_un={l}"), Method::Gp, 0.05, &seeds, &mut log).expect("sweep");
            let v = cell.mean_val().unwrap().0;
            lambda_cells.push(cell);
            v
        };
        val.push(v);
    }
    let best = (0..val.len()).min_by(|&a, &b| val[a].total_cmp(&val[b])).unwrap();
    out.report(
        10,
        "lambda_un sweep optimum is interior",
        best != 0 && val[best] < val[0],
        format!("validation MAE over {SEEDS} seeds for lambda {LAMBDAS:?}: {}; best lambda {}", fmt_list(&val), LAMBDAS[best]),
    );

    let src = DatasetSpec { n_test: 0, n_val: 0, ..DatasetSpec::default() };
    let tgt = DatasetSpec { n_val: 0, style: shifted_style(), seed: src.seed + 1, ..DatasetSpec::default() };
    let tdata = TransferData::generate(&src, &tgt).expect("transfer data");
    let tcells = run_transfer(&tdata, &cfg, &trial_seeds(0, 3), &mut log).expect("transfer");
    let no_adapt = tcells.iter().find(|c| c.method == Method::Baseline).unwrap().mean_test().0;
    let adapt = tcells.iter().find(|c| c.method == Method::Gp).unwrap().mean_test().0;
    let rel11 = (no_adapt - adapt) / no_adapt;
    out.report(
        11,
        "transfer ordering",
        rel11 >= 0.05,
        format!(
            "target test MAE over 3 seeds: no-adapt {no_adapt:.4}, gp {adapt:.4}, improvement {:.1}% (need >= 5%)",
            100.0 * rel11
        ),
    );

    let mut var = VarianceStats::default();
    let tgp: Vec<&CellResult> = tcells.iter().filter(|c| c.method == Method::Gp).collect();
    merge_variance(&mut var, &gp_cells.iter().chain(&lambda_cells).chain(tgp).collect::<Vec<_>>());
    out.report(
        3,
        "variance bounds",
        var.count > 0 && var.violations == 0 && var.min >= 1.0 && var.max <= 2.0,
        format!(
            "{} variances over every GP training run above: min {:.6}, max {:.6}, violations {}",
            var.count, var.min, var.max, var.violations
        ),
    );

    out.results.sort();
    let passed = out.results.iter().filter(|r| r.1).count();
    let failed: Vec<usize> = out.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {passed}/{} passed, failed {failed:?}, {:.0} s total",
        out.results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

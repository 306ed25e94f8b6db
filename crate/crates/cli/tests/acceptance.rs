//! Acceptance suite: one `[criterion N] PASS|FAIL` line per criterion.
//!
//! Criteria 6 to 8 need eighteen full-length training runs (hours each on one
//! CPU core) and are `#[ignore]`d; run them with `cargo test -p modicl --test
//! acceptance -- --ignored`. Finished runs are cached under
//! `MODICL_ACCEPTANCE_RUNS` (default: cargo's test tmp dir) and reused when
//! their stored configuration matches. `criteria_6_to_8_status` reports on
//! whatever is already cached without training anything.

#![allow(clippy::needless_range_loop)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use modicl_core::autodiff::Tensor;
use modicl_core::eval::{fit_ridge_probe, probe_r2, r2_score, RidgeProbe};
use modicl_core::experiments::{
    run_connectivity_experiment, run_training_in, ConnectivityReport, RunConfig, RunManifest, CONNECTIVITY_FILE,
    MANIFEST_FILE, METRICS_FILE,
};
use modicl_core::models::{Model, ModelConfig, ModelKind};
use modicl_core::rng;
use modicl_core::taskgen::{
    init_teacher, mask_set, opnorm, sample_batch, sample_latent, task_weights, two_hot_masks, DistributionName, Mask,
    Split, Support, TeacherDims,
};
use rand::Rng;
use rand_distr::StandardNormal;

/// Writes past the test harness's capture so every line lands in the log.
fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!(
        "[criterion {criterion}] {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn note(criterion: u32, detail: &str) {
    let line = format!("[criterion {criterion}] NOT RUN {detail}\n");
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
}

#[test]
fn criterion_1_construction_equivalence() {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_modicl"))
        .args(["verify-construction", "--trials", "1000"])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = json["reports"].as_array().unwrap();
    let shapes: Vec<[u64; 4]> = reports
        .iter()
        .map(|r| {
            let d = &r["dims"];
            ["modules", "input", "hidden", "output"].map(|k| d[k].as_u64().unwrap())
        })
        .collect();
    let max_err = reports
        .iter()
        .map(|r| r["max_abs_error"].as_f64().unwrap())
        .fold(0.0, f64::max);
    let trials_ok = reports.iter().all(|r| r["trials"] == 1000);
    let pass = out.status.code() == Some(0)
        && json["pass"] == true
        && shapes.len() >= 3
        && shapes[0] == [6, 16, 16, 1]
        && trials_ok
        && max_err < 1e-6
        && secs < 10.0;
    report(
        1,
        pass,
        &format!(
            "construction equivalence: max |error| {max_err:.2e} over shapes {shapes:?}, 1000 trials each, {secs:.2} s"
        ),
    );
}

fn perturbed(config: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(config, seed).unwrap();
    let mut r = rng::rng(seed ^ 0x5eed);
    // zero-initialised readouts would hide most of the graph from the check
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let teacher = init_teacher(1, TeacherDims::default()).unwrap();
    let dist = mask_set(DistributionName::Train(Support::ConnectedPlus), 6).unwrap();
    let episodes = sample_batch(&teacher, &dist, 4, 2, 3).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut failures = Vec::new();
    for kind in [ModelKind::Vanilla, ModelKind::Hyper] {
        let config = ModelConfig {
            d_model: 8,
            heads: 1,
            layers: 1,
            ..ModelConfig::for_kind(kind)
        };
        let mut model = perturbed(config, 3);
        let (_, grads) = model.loss_and_grads(&episodes).unwrap();
        let names: Vec<String> = model.params().names().to_vec();
        for (p, name) in names.iter().enumerate() {
            for i in 0..grads[p].len() {
                let orig = model.params().tensors()[p].data()[i];
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig + h;
                let up = model.loss_and_grads(&episodes).unwrap().0;
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig - h;
                let down = model.loss_and_grads(&episodes).unwrap().0;
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p].data()[i];
                let abs = (numeric - analytic).abs();
                let rel = abs / numeric.abs().max(analytic.abs());
                checked += 1;
                worst_abs = worst_abs.max(abs);
                if numeric.abs().max(analytic.abs()) > 1e-6 {
                    worst_rel = worst_rel.max(rel);
                }
                if abs >= 1e-7 && rel >= 1e-4 {
                    failures.push(format!("{kind} {name}[{i}]: {analytic} vs {numeric}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        failures.is_empty() && secs < 60.0,
        &format!(
            "gradient correctness: {checked} entries of both models, worst relative error {worst_rel:.2e} where |grad| > 1e-6, worst absolute {worst_abs:.2e}, {} failures, {secs:.1} s{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

fn ks_uniform(mut s: Vec<f64>) -> f64 {
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_3_latent_sampler_invariants() {
    let start = Instant::now();
    let m = 6;
    let mut r = rng::rng(33);
    let mut violations = 0usize;
    let mut worst_sum: f64 = 0.0;
    let mut masks = 0;
    for bits in 1u32..1 << m {
        let mask = Mask::new((0..m).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap();
        masks += 1;
        for _ in 0..10_000 {
            let z = sample_latent(&mask, &mut r).unwrap();
            for (&v, &b) in z.0.iter().zip(mask.bits()) {
                let ok = if b == 1 { (0.5..=1.0).contains(&v) } else { v == 0.0 };
                violations += usize::from(!ok);
            }
            let target = 0.5 * (1.0 + mask.count() as f64);
            worst_sum = worst_sum.max((z.0.iter().sum::<f64>() - target).abs());
        }
    }
    // one statistic over 10^4 two-hot tasks: with masks drawn uniformly, the
    // lower active coordinate is ½ + ½·U(0, 1)
    let two_hot = two_hot_masks(m);
    let s: Vec<f64> = (0..10_000)
        .map(|_| {
            let mask = &two_hot[r.gen_range(0..two_hot.len())];
            let first = mask.bits().iter().position(|&b| b == 1).unwrap();
            2.0 * (sample_latent(mask, &mut r).unwrap().0[first] - 0.5)
        })
        .collect();
    let ks = ks_uniform(s);
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        violations == 0 && worst_sum <= 1e-12 && ks < 0.02 && secs < 10.0,
        &format!(
            "latent sampler: {masks} masks x 10^4 draws, {violations} support/range violations, max |sum error| {worst_sum:.1e}, two-hot KS {ks:.4} over 10^4 draws, {secs:.2} s"
        ),
    );
}

/// Largest singular value by one-sided Jacobi rotations.
fn svd_top(w: &Tensor) -> f64 {
    let (rows, cols) = w.dims2().unwrap();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| w.at(&[i, j])).collect()).collect();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|v| v * v).sum();
                let beta: f64 = a[q].iter().map(|v| v * v).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    a.iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_4_teacher_normalisation() {
    let teacher = init_teacher(44, TeacherDims::default()).unwrap();
    let mut r = rng::rng(45);
    let mut worst_norm: f64 = 0.0;
    let mut worst_svd: f64 = 0.0;
    for _ in 0..1000 {
        let bits: Vec<u8> = loop {
            let b: Vec<u8> = (0..6).map(|_| r.gen_range(0..=1)).collect();
            if b.contains(&1) {
                break b;
            }
        };
        let z = sample_latent(&Mask::new(bits).unwrap(), &mut r).unwrap();
        let w = task_weights(&teacher, &z).unwrap();
        worst_norm = worst_norm.max((svd_top(&w) - 1.0).abs());
        let raw = teacher.combine(&z).unwrap();
        worst_svd = worst_svd.max((opnorm(&raw).unwrap() - svd_top(&raw)).abs());
    }
    for _ in 0..200 {
        let w = Tensor::from_fn(&[16, 16], |_| r.sample(StandardNormal));
        worst_svd = worst_svd.max((opnorm(&w).unwrap() - svd_top(&w)).abs());
    }
    report(
        4,
        worst_norm <= 1e-6 && worst_svd <= 1e-8,
        &format!(
            "teacher normalisation: max |opnorm(W) - 1| {worst_norm:.1e} over 1000 tasks, max |power - SVD| {worst_svd:.1e} over 1200 matrices"
        ),
    );
}

#[test]
fn criterion_5_metric_correctness() {
    let mut fails = Vec::new();
    let teacher = init_teacher(0, TeacherDims::default()).unwrap();
    let dist = mask_set(DistributionName::Train(Support::Connected), 6).unwrap();
    let mut eps = sample_batch(&teacher, &dist, 2, 0, 2).unwrap();
    eps[0].labels = vec![0.0, 1.0];
    eps[1].labels = vec![1.0, 2.0];
    let r2 = |p: &[f64], e| r2_score(p, e).unwrap().value;
    if r2(&[0.5, 2.0], &eps) != Some(0.875) {
        fails.push("hand pair");
    }
    if r2(&[1.0, 2.0], &eps) != Some(1.0) {
        fails.push("perfect");
    }
    if r2(&[0.0, 1.0], &eps) != Some(0.0) {
        fails.push("context mean");
    }

    let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
    if fit_ridge_probe(&one, &one, 1.0, false).unwrap().weights.data() != [0.5] {
        fails.push("scalar ridge");
    }
    let mut r = rng::rng(55);
    let x = Tensor::from_fn(&[40, 5], |_| r.sample(StandardNormal));
    let zero = fit_ridge_probe(&x, &Tensor::zeros(&[40, 2]), 1.0, true).unwrap();
    if zero.weights.data().iter().any(|&v| v != 0.0) || zero.intercept != [0.0, 0.0] {
        fails.push("zero targets");
    }
    let z = Tensor::from_fn(&[40, 2], |i| 3.0 + r.sample::<f64, _>(StandardNormal) + i as f64 % 2.0);
    let huge = fit_ridge_probe(&x, &z, 1e12, true).unwrap();
    let preds = huge.predict(&x).unwrap();
    let means = [0, 1].map(|k| (0..40).map(|i| z.at(&[i, k])).sum::<f64>() / 40.0);
    if (0..40).any(|i| (0..2).any(|k| (preds.at(&[i, k]) - means[k]).abs() > 1e-9)) {
        fails.push("ridge limit");
    }
    let shift = RidgeProbe {
        weights: Tensor::zeros(&[1, 1]),
        intercept: vec![2.0],
        lambda: 1.0,
    };
    let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    if probe_r2(&shift, &col(&[0.0, 0.0, 0.0]), &col(&[0.0, 1.0, 2.0])).unwrap() != Some(-1.5) {
        fails.push("zero-weight probe");
    }

    let mut worst: f64 = 0.0;
    for (n, p, q) in [(200, 24, 6), (64, 64, 6), (30, 10, 3)] {
        let x = Tensor::from_fn(&[n, p], |_| r.sample(StandardNormal));
        let z = Tensor::from_fn(&[n, q], |_| r.sample(StandardNormal));
        let w = fit_ridge_probe(&x, &z, 1.0, false).unwrap().weights;
        for i in 0..p {
            for k in 0..q {
                let xtz: f64 = (0..n).map(|s| x.at(&[s, i]) * z.at(&[s, k])).sum();
                let lhs: f64 = (0..p)
                    .map(|j| (0..n).map(|s| x.at(&[s, i]) * x.at(&[s, j])).sum::<f64>() * w.at(&[j, k]))
                    .sum::<f64>()
                    + w.at(&[i, k]);
                worst = worst.max((lhs - xtz).abs());
            }
        }
    }
    if worst >= 1e-8 {
        fails.push("normal equations");
    }
    report(
        5,
        fails.is_empty(),
        &format!("metric correctness: R² and ridge examples, normal-equation residual {worst:.1e}; failures {fails:?}"),
    );
}

fn small_run_config(kind: &str) -> Vec<String> {
    [
        format!("model.kind={kind}"),
        "model.d_model=16".into(),
        "model.heads=2".into(),
        "task.context_len=8".into(),
        "train.steps=500".into(),
        "train.batch_size=16".into(),
        "train.eval_interval=0".into(),
        "eval.episodes=64".into(),
        "eval.probe=false".into(),
    ]
    .into()
}

fn loss_column(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .filter(|l| l.split(',').nth(2) == Some("loss"))
        .map(|l| l.split(',').nth(3).unwrap().to_string())
        .collect()
}

#[test]
fn criterion_9_determinism() {
    let root = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for kind in ["vanilla", "hyper"] {
        let mut columns = Vec::new();
        for rep in 0..2 {
            let dir = root.path().join(format!("{kind}-{rep}"));
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_modicl"));
            cmd.args(["train", "--seed", "2024", "--out"])
                .arg(&dir)
                .env("RUST_LOG", "warn");
            for s in small_run_config(kind) {
                cmd.args(["--set", &s]);
            }
            let status = cmd.output().unwrap().status;
            pass &= status.success();
            columns.push(loss_column(&dir));
        }
        let same = columns[0].len() == 500 && columns[0] == columns[1];
        pass &= same;
        details.push(format!("{kind}: {} loss rows, identical {same}", columns[0].len()));
    }
    report(
        9,
        pass,
        &format!("determinism over 500 steps, master seed 2024: {}", details.join("; ")),
    );
}

// Criteria 6 to 8: full-length runs with a shared on-disk cache.

const SEEDS: [u64; 3] = [0, 1, 2];

fn runs_root() -> PathBuf {
    std::env::var_os("MODICL_ACCEPTANCE_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"))
}

fn default_config(kind: &str, seed: u64) -> RunConfig {
    RunConfig::from_sources(None, &[format!("model.kind={kind}"), format!("seed={seed}")]).unwrap()
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    RunConfig {
        output_dir: PathBuf::new(),
        ..a.clone()
    } == RunConfig {
        output_dir: PathBuf::new(),
        ..b.clone()
    }
}

fn cached_manifest(dir: &Path, config: &RunConfig) -> Option<RunManifest> {
    RunManifest::read(&dir.join(MANIFEST_FILE))
        .ok()
        .filter(|m| same_run(&m.config, config))
}

fn ensure_run(kind: &str, seed: u64) -> RunManifest {
    let config = default_config(kind, seed);
    let dir = runs_root().join(format!("{kind}-seed{seed}"));
    cached_manifest(&dir, &config).unwrap_or_else(|| run_training_in(&config, &dir).unwrap())
}

fn cached_connectivity(dir: &Path, base: &RunConfig) -> Option<ConnectivityReport> {
    let text = std::fs::read_to_string(dir.join(CONNECTIVITY_FILE)).ok()?;
    let report: ConnectivityReport = serde_json::from_str(&text).ok()?;
    let mut c = base.clone();
    c.task.train_distribution = DistributionName::Train(Support::Connected);
    same_run(&report.connected.config, &c).then_some(report)
}

fn ensure_connectivity(kind: &str, seed: u64) -> ConnectivityReport {
    let base = default_config(kind, seed);
    let dir = runs_root().join(format!("connectivity-{kind}-seed{seed}"));
    cached_connectivity(&dir, &base).unwrap_or_else(|| run_connectivity_experiment(&base, &dir).unwrap())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn value(m: &RunManifest, split: Split, metric: &str) -> f64 {
    m.final_value(split, metric).unwrap_or(f64::NAN)
}

fn judge_6(vanilla: &[RunManifest], hyper: &[RunManifest]) -> (bool, String) {
    let v_id = median(vanilla.iter().map(|m| value(m, Split::InDistribution, "r2")).collect());
    let v_ood = median(vanilla.iter().map(|m| value(m, Split::Ood, "r2")).collect());
    let h_ood = median(hyper.iter().map(|m| value(m, Split::Ood, "r2")).collect());
    (
        v_id >= 0.7 && h_ood >= 0.5 && h_ood - v_ood >= 0.2,
        format!(
            "compositional generalisation (median of {} seeds): vanilla ID R² {v_id:.3} (>= 0.7), hyper OOD R² {h_ood:.3} (>= 0.5), gap over vanilla OOD {v_ood:.3} is {:.3} (>= 0.2)",
            vanilla.len(),
            h_ood - v_ood
        ),
    )
}

fn judge_7(vanilla: &[RunManifest], hyper: &[RunManifest]) -> (bool, String) {
    let v = median(vanilla.iter().map(|m| value(m, Split::Ood, "probe_r2")).collect());
    let h = median(hyper.iter().map(|m| value(m, Split::Ood, "probe_r2")).collect());
    (
        v >= 0.5 && h >= 0.5,
        format!("latent decodability (median OOD probe R²): vanilla {v:.3}, hyper {h:.3} (both >= 0.5)"),
    )
}

fn delta(r: &ConnectivityReport) -> f64 {
    r.delta_ood_r2.unwrap_or(f64::NAN)
}

fn judge_8(vanilla: &[ConnectivityReport], hyper: &[ConnectivityReport]) -> (bool, String) {
    let h = median(hyper.iter().map(delta).collect());
    let v = median(vanilla.iter().map(delta).collect());
    (
        h >= 0.2 && v.abs() < 0.2,
        format!(
            "connectivity (median connected - disconnected OOD R²): hyper {h:.3} (>= 0.2), vanilla {v:.3} (|.| < 0.2)"
        ),
    )
}

#[test]
#[ignore = "six full-length training runs; hours on one core"]
fn criterion_6_compositional_generalisation() {
    let vanilla: Vec<_> = SEEDS.iter().map(|&s| ensure_run("vanilla", s)).collect();
    let hyper: Vec<_> = SEEDS.iter().map(|&s| ensure_run("hyper", s)).collect();
    let (pass, detail) = judge_6(&vanilla, &hyper);
    report(6, pass, &detail);
}

#[test]
#[ignore = "shares the six full-length runs of criterion 6"]
fn criterion_7_latent_probe() {
    let vanilla: Vec<_> = SEEDS.iter().map(|&s| ensure_run("vanilla", s)).collect();
    let hyper: Vec<_> = SEEDS.iter().map(|&s| ensure_run("hyper", s)).collect();
    let (pass, detail) = judge_7(&vanilla, &hyper);
    report(7, pass, &detail);
}

#[test]
#[ignore = "twelve full-length training runs; a day on one core"]
fn criterion_8_connectivity() {
    let hyper: Vec<_> = SEEDS.iter().map(|&s| ensure_connectivity("hyper", s)).collect();
    let vanilla: Vec<_> = SEEDS.iter().map(|&s| ensure_connectivity("vanilla", s)).collect();
    let (pass, detail) = judge_8(&vanilla, &hyper);
    report(8, pass, &detail);
}

/// Judges criteria 6 to 8 from cached runs when all of them exist; otherwise
/// says what is missing. Never trains.
#[test]
fn criteria_6_to_8_status() {
    let root = runs_root();
    let load = |kind: &str| -> Vec<Option<RunManifest>> {
        SEEDS
            .iter()
            .map(|&s| cached_manifest(&root.join(format!("{kind}-seed{s}")), &default_config(kind, s)))
            .collect()
    };
    let (vanilla, hyper) = (load("vanilla"), load("hyper"));
    let have = |v: &[Option<RunManifest>]| v.iter().flatten().cloned().collect::<Vec<_>>();
    let (v, h) = (have(&vanilla), have(&hyper));
    if v.len() == SEEDS.len() && h.len() == SEEDS.len() {
        let (p6, d6) = judge_6(&v, &h);
        let (p7, d7) = judge_7(&v, &h);
        report(6, p6, &d6);
        report(7, p7, &d7);
    } else {
        let partial: Vec<String> = v
            .iter()
            .chain(&h)
            .map(|m| {
                format!(
                    "{} seed {}: ID R² {:.3}, OOD R² {:.3}, OOD probe R² {:.3}",
                    m.config.model.kind,
                    m.config.seed,
                    value(m, Split::InDistribution, "r2"),
                    value(m, Split::Ood, "r2"),
                    value(m, Split::Ood, "probe_r2")
                )
            })
            .collect();
        let detail = format!(
            "{} of 6 default runs cached under {}; run the ignored tests to train the rest{}",
            v.len() + h.len(),
            root.display(),
            if partial.is_empty() {
                String::new()
            } else {
                format!(" (cached: {})", partial.join("; "))
            }
        );
        note(6, &detail);
        note(7, &detail);
    }
    let conn = |kind: &str| -> Vec<ConnectivityReport> {
        SEEDS
            .iter()
            .filter_map(|&s| {
                cached_connectivity(
                    &root.join(format!("connectivity-{kind}-seed{s}")),
                    &default_config(kind, s),
                )
            })
            .collect()
    };
    let (cv, ch) = (conn("vanilla"), conn("hyper"));
    if cv.len() == SEEDS.len() && ch.len() == SEEDS.len() {
        let (p8, d8) = judge_8(&cv, &ch);
        report(8, p8, &d8);
    } else {
        note(
            8,
            &format!(
                "{} of 6 connectivity pairs cached under {}; run the ignored tests to train the rest",
                cv.len() + ch.len(),
                root.display()
            ),
        );
    }
}

//! Acceptance run: every criterion prints one PASS/FAIL line, and the process
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sharpscore::config::{ExperimentConfig, ExperimentKind};
use sharpscore::denoiser::{ArchSpec, DenoiserNet};
use sharpscore::gmm::{GaussianMixture, MixtureSpec};
use sharpscore::runner::{self, hutchinson_convergence, random_hessians, Metrics};
use sharpscore::shapes::{classify, generate_adversarial, ClassifierConfig, GeneratorConfig};
use sharpscore::sharpening::{hutchinson_laplacian, laplacian_2d, second_derivative_1d};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> (bool, String) {
    (elapsed.as_secs_f64() <= limit_secs as f64, format!("{:.1}s of {limit_secs}s", elapsed.as_secs_f64()))
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn estimator_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let x: f64 = rng.random_range(-2.0..2.0);
        let delta: f64 = rng.random_range(0.01..0.5);
        let f = |x: f64, _| ((c[0] * x + c[1]) * x + c[2]) * x + c[3];
        let d2 = second_derivative_1d(f, x, f(x, 0), 0, delta).unwrap();
        worst = worst.max(rel(d2, 6.0 * c[0] * x + 2.0 * c[1], 1.0));
    }
    let cubic = worst <= 1e-8;

    let q: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    let quad = |p: [f64; 2], _| {
        let [x, y] = p;
        [q[0] * x * x + q[1] * x * y + q[2] * y * y + x, q[3] * x * x + q[4] * y * y + q[5] * x * y]
    };
    let p = [0.4, -0.7];
    let l = laplacian_2d(quad, p, quad(p, 0), 0, 0.05).unwrap();
    let stencil = rel(l[0], 2.0 * (q[0] + q[2]), 1.0) < 1e-8 && rel(l[1], 2.0 * (q[3] + q[4]), 1.0) < 1e-8;

    let diag: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let f = |x: &[f64], _| x.iter().zip(&diag).map(|(v, c)| c * v * v + v).collect::<Vec<_>>();
    let x: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
    let l = hutchinson_laplacian(f, &x, &f(&x, 0), 0, 0.05, 1, &mut rng).unwrap();
    let hutch = l.iter().zip(&diag).all(|(lk, c)| rel(*lk, 2.0 * c, 1.0) < 1e-8);

    verdict(cubic && stencil && hutch, format!("cubic max rel err {worst:.1e}, stencil {stencil}, hutchinson {hutch}"))
}

fn hutchinson_convergence_criterion() -> Verdict {
    let m = random_hessians(20, 8, 2);
    let rows = hutchinson_convergence(&m, &[10, 1000], 1e-3, 2).unwrap();
    let (e10, e1000) = (rows[0].median_relative_error, rows[1].median_relative_error);
    verdict(e1000 < e10 && e1000 <= 0.05, format!("median rel err n=10 {e10:.4}, n=1000 {e1000:.4}"))
}

/// Analytic score and score Laplacian against central differences of the
/// log-density and of the score.
fn oracle_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mixtures: Vec<GaussianMixture> = vec![
        MixtureSpec::toy1d().build().unwrap(),
        MixtureSpec::toy2d().build().unwrap(),
        GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![0.0, 1.0, -1.0], vec![1.0, -0.5, 0.5], vec![-1.0, 0.0, 1.5]],
            vec![0.3, 0.5, 0.2],
        )
        .unwrap(),
    ];
    let (mut score_err, mut lap_err): (f64, f64) = (0.0, 0.0);
    for k in 0..100 {
        let base = &mixtures[k % mixtures.len()];
        let gm = base.noised_by(rng.random_range(0.3..1.0));
        let d = gm.dim();
        let i = rng.random_range(0..gm.components());
        let sd = gm.variances()[i].sqrt();
        let x: Vec<f64> = gm.mean(i).iter().map(|m| m + 1.5 * sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = gm.score(&x);
        let l = gm.score_laplacian(&x);
        let h = 1e-4 * sd;
        let shifted = |j: usize, by: f64| {
            let mut y = x.clone();
            y[j] += by;
            y
        };
        let mut fd_lap = vec![0.0; d];
        for j in 0..d {
            let fd = (gm.log_density(&shifted(j, h)) - gm.log_density(&shifted(j, -h))) / (2.0 * h);
            score_err = score_err.max(rel(s[j], fd, 1.0 / sd));
            let hl = 1e-3 * sd;
            let (sp, sm) = (gm.score(&shifted(j, hl)), gm.score(&shifted(j, -hl)));
            for c in 0..d {
                fd_lap[c] += (sp[c] - 2.0 * s[c] + sm[c]) / (hl * hl);
            }
        }
        for c in 0..d {
            lap_err = lap_err.max(rel(l[c], fd_lap[c], 1.0 / (sd * sd * sd)));
        }
    }
    verdict(score_err <= 1e-4 && lap_err <= 1e-4, format!("max rel err score {score_err:.1e}, laplacian {lap_err:.1e}"))
}

fn gradient_check() -> Verdict {
    let specs = [
        ArchSpec::mlp(2),
        ArchSpec::Conv {
            height: 8,
            width: 8,
            channels: [4, 6],
            time_embed_dim: 8,
        },
    ];
    let mut worst: f64 = 0.0;
    for (s, spec) in specs.into_iter().enumerate() {
        let mut net = DenoiserNet::new(spec, s as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + s as u64);
        for p in net.params_mut() {
            *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let rows = 4;
        let dim = net.spec().dim();
        let xs: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
        let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(0..1000)).collect();
        let (_, grad) = net.loss_and_grad(&xs, &ts, &eps);
        for _ in 0..20 {
            let i = rng.random_range(0..net.param_count());
            let p0 = net.params()[i];
            let h = 1e-5;
            net.params_mut()[i] = p0 + h;
            let up = net.loss(&xs, &ts, &eps);
            net.params_mut()[i] = p0 - h;
            let down = net.loss(&xs, &ts, &eps);
            net.params_mut()[i] = p0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel(grad[i], fd, 1e-5));
        }
    }
    verdict(worst <= 1e-4, format!("max rel err {worst:.1e} over 40 parameters"))
}

struct ToyRun {
    dir: PathBuf,
    metrics: Metrics,
    elapsed: Duration,
}

fn toy_run(kind: ExperimentKind, out: &Path) -> Result<ToyRun, String> {
    let mut cfg = ExperimentConfig::preset(kind);
    cfg.output_dir = out.to_path_buf();
    let started = Instant::now();
    let outcome = runner::run(&cfg).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        dir: outcome.dir,
        metrics: outcome.metrics,
        elapsed: started.elapsed(),
    })
}

fn im_reduction(run: &Result<ToyRun, String>, limit_secs: u64) -> Verdict {
    let run = match run {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let v = run.metrics.get("im_count_vanilla").unwrap_or(f64::NAN);
    let s = run.metrics.get("im_count_sharpened").unwrap_or(f64::NAN);
    let (fast, time) = within(run.elapsed, limit_secs);
    verdict(v > 0.0 && s <= 0.5 * v && fast, format!("IM vanilla {v} sharpened {s} (ratio {:.3}), {time}", s / v))
}

fn fidelity(runs: &[&Result<ToyRun, String>]) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, run) in ["1d", "2d"].iter().zip(runs) {
        match run {
            Ok(r) => {
                let v = r.metrics.get("l1_vanilla").unwrap_or(f64::NAN);
                let s = r.metrics.get("l1_sharpened").unwrap_or(f64::NAN);
                pass &= s <= v + 0.02;
                parts.push(format!("{name} L1 vanilla {v:.4} sharpened {s:.4}"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} run failed: {e}"));
            }
        }
    }
    verdict(pass, parts.join("; "))
}

fn score_evolution(one_d: &Result<ToyRun, String>, out: &Path) -> Verdict {
    let run = match one_d {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("1d run failed: {e}")),
    };
    let mut cfg = ExperimentConfig::preset(ExperimentKind::ScoreEvolution);
    cfg.output_dir = out.to_path_buf();
    cfg.checkpoint = Some(run.dir.join("checkpoint.json"));
    let outcome = match runner::run(&cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for t in [0, 5, 10] {
        let v = outcome.metrics.get(&format!("deviation_vanilla_t{t}")).unwrap_or(f64::NAN);
        let s = outcome.metrics.get(&format!("deviation_sharpened_t{t}")).unwrap_or(f64::NAN);
        pass &= s <= v;
        parts.push(format!("t={t} vanilla {v:.3} sharpened {s:.3}"));
    }
    verdict(pass, parts.join("; "))
}

fn classifier_accuracy() -> Verdict {
    let started = Instant::now();
    let images = generate_adversarial(1000, &GeneratorConfig::default(), 9).unwrap();
    let cfg = ClassifierConfig::default();
    let wrong = images.iter().filter(|i| classify(i, &cfg).label != i.expected_label()).count();
    let (fast, time) = within(started.elapsed(), 60);
    verdict(wrong == 0 && fast, format!("{} of 1000 correct, {time}", 1000 - wrong))
}

fn shapes_pipeline(out: &Path) -> Verdict {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shapes-small.toml");
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("{}: {e}", path.display())),
    };
    cfg.output_dir = out.to_path_buf();
    let outcome = match runner::run(&cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let m = &outcome.metrics;
    let files = ["label_table.csv", "labels.csv", "laplacian_curve.csv", "laplacian_frequency.csv", "laplacian_curve.png"];
    let missing: Vec<&str> = files.iter().copied().filter(|f| !outcome.dir.join(f).exists()).collect();
    let hall = m.get("laplacian_probes_hallucinated").unwrap_or(0.0);
    let good = m.get("laplacian_probes_good").unwrap_or(0.0);
    let pv = m.get("percent_hallucinated_vanilla").unwrap_or(f64::NAN);
    let ps = m.get("percent_hallucinated_sharpened").unwrap_or(f64::NAN);
    let direction = if ps <= pv { "holds" } else { "does not hold" };
    verdict(
        missing.is_empty() && hall >= 1.0 && good >= 1.0,
        format!(
            "missing {missing:?}, probes hallucinated {hall} good {good}; hallucinated {pv:.1}% vs {ps:.1}% (direction {direction}, not gated)"
        ),
    )
}

fn main() -> ExitCode {
    let out = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut record = |name: &'static str, v: Verdict| {
        println!("criterion {:<28} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    let timed = |f: fn() -> Verdict, limit: u64| {
        let started = Instant::now();
        let mut v = f();
        let (fast, time) = within(started.elapsed(), limit);
        v.pass &= fast;
        v.detail = format!("{}, {time}", v.detail);
        v
    };
    record("1 estimator exactness", timed(estimator_exactness, 1));
    record("2 hutchinson convergence", timed(hutchinson_convergence_criterion, 10));
    record("3 oracle consistency", timed(oracle_consistency, 5));
    record("4 gradient check", timed(gradient_check, 30));

    let one_d = toy_run(ExperimentKind::Toy1d, out.path());
    record("5 1d hallucination", im_reduction(&one_d, 15 * 60));
    let two_d = toy_run(ExperimentKind::Toy2d, out.path());
    record("6 2d hallucination", im_reduction(&two_d, 30 * 60));
    record("7 fidelity", fidelity(&[&one_d, &two_d]));
    record("8 score evolution", score_evolution(&one_d, out.path()));
    record("9 shapes classifier", classifier_accuracy());
    record("10 shapes pipeline", shapes_pipeline(out.path()));

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Criteria 5 and 6 are experiments: their verdict is printed but does not fail
//! the run. Every other criterion is asserted.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use dvorl_core::cli::cli;
use dvorl_core::divergence::kl_knn;
use dvorl_core::dve::{filter_buffer, RollingBaseline, ValuedBuffer};
use dvorl_core::envs::{generate_buffer, train_behavior, DomainConfig, QLearningParams, SlipGridConfig};
use dvorl_core::neural::ValueNet;
use dvorl_core::offline::{train_offline, Algorithm, LearnerConfig};
use dvorl_core::pipeline::{run_removal_curve, run_single, ARM_BASELINE, ARM_DVORL};
use ndarray::Array2;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let mut worst = Vec::new();
    for (shift, tol) in [(0.5, 0.1), (2.0, 0.3)] {
        let mut max_err: f64 = 0.0;
        for seed in 0..5 {
            let p = normal_samples(5000, &[0.0, 0.0], 100 + seed);
            let q = normal_samples(5000, &[shift, 0.0], 200 + seed);
            let est = kl_knn(p.view(), q.view(), 5).unwrap();
            max_err = max_err.max((est - unit_gaussian_kl(&[0.0, 0.0], &[shift, 0.0])).abs());
        }
        worst.push((shift, tol, max_err));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&(_, tol, e)| e <= tol) && secs < 10.0;
    let detail = worst.iter().map(|(s, t, e)| format!("shift {s}: max |err| {e:.4} (tol {t})")).collect::<Vec<_>>().join(", ");
    Verdict { pass, detail: format!("{detail}, {secs:.2}s") }
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let nets = 25;
    for i in 0..nets {
        let input = r.random_range(2..6);
        let hidden = vec![r.random_range(3..9), r.random_range(3..9)];
        let rows = r.random_range(4..16);
        let mut net = ValueNet::init(input, &hidden, 1000 + i);
        // Zero biases put units exactly on the ReLU kink whenever their inputs
        // vanish; move them off it so the function is differentiable there.
        let jittered: Vec<f64> = net.flat_params().iter().map(|p| p + r.random_range(-0.1..0.1)).collect();
        net.set_flat_params(&jittered);
        let x = Array2::from_shape_fn((rows, input), |_| r.random_range(-2.0..2.0));
        let s: Vec<f64> = (0..rows).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let (_, grads) = net.logprob_grad(x.view(), &s).unwrap();
        let numeric = finite_difference_grad(&net, x.view(), &s, 1e-5);
        for (a, n) in grads.flat().iter().zip(&numeric) {
            let scale = a.abs().max(n.abs());
            if scale > 1e-6 {
                worst = worst.max((a - n).abs() / scale);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict { pass: worst < 1e-4 && secs < 5.0, detail: format!("{nets} nets, max relative error {worst:.2e}, {secs:.2}s") }
}

fn criterion_3() -> Verdict {
    let mut r = rng(3);
    let mut baseline_ok = 0;
    for _ in 0..1000 {
        let window = r.random_range(1..50);
        let rewards: Vec<f64> = (0..r.random_range(1..200)).map(|_| r.random_range(0.0..1000.0)).collect();
        let mut b = RollingBaseline::new(window);
        let got: Vec<(f64, f64)> = rewards.iter().map(|&x| (b.observe(x), b.value())).collect();
        baseline_ok += usize::from(got == baseline_oracle(&rewards, window));
    }
    let grid = DomainConfig::SlipGrid(SlipGridConfig::open(4, 4, 0.2));
    let behavior = train_behavior(&grid, &QLearningParams { episodes: 50, ..Default::default() }, 3).unwrap();
    let buffer = generate_buffer(&grid, &behavior.policy, 300, 0.5, 3).unwrap();
    let mut filter_ok = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..=buffer.len());
        let part = buffer.derive(buffer.transitions[..n].to_vec(), "part");
        let values: Vec<f64> = (0..n)
            .map(|_| if r.random::<f64>() < 0.2 { [0.0, 0.5, 1.0][r.random_range(0..3)] } else { r.random() })
            .collect();
        let eps = if r.random::<f64>() < 0.3 { values.get(r.random_range(0..n.max(1))).copied().unwrap_or(0.5) } else { r.random() };
        let filtered = filter_buffer(&ValuedBuffer { buffer: &part, values: values.clone() }, eps);
        let expected: Vec<_> = kept_indices_oracle(&values, eps).into_iter().map(|i| part.transitions[i].clone()).collect();
        filter_ok += usize::from(filtered.transitions == expected);
    }
    Verdict {
        pass: baseline_ok == 1000 && filter_ok == 1000,
        detail: format!("baseline {baseline_ok}/1000 exact, filter {filter_ok}/1000 exact"),
    }
}

fn criterion_4() -> Verdict {
    let grid = DomainConfig::SlipGrid(SlipGridConfig::cliff_walk(5, 3, 0.1));
    let behavior = train_behavior(&grid, &QLearningParams { episodes: 50, ..Default::default() }, 4).unwrap();
    let buffer = generate_buffer(&grid, &behavior.policy, 400, 0.5, 4).unwrap();
    let mut r = rng(4);
    let cases = 500;
    let mut ok = 0;
    for _ in 0..cases {
        let n = r.random_range(0..=buffer.len());
        let part = buffer.derive(buffer.transitions[..n].to_vec(), "part");
        let vb = ValuedBuffer { buffer: &part, values: (0..n).map(|_| r.random()).collect() };
        let (e1, e2) = {
            let (a, b) = (r.random::<f64>(), r.random::<f64>());
            (a.min(b), a.max(b))
        };
        let all = filter_buffer(&vb, 0.0).len() == n;
        // Draws lie in [0, 1), so the inclusive rule keeps nothing at 1.
        let none = filter_buffer(&vb, 1.0).is_empty();
        let low = filter_buffer(&vb, e1);
        let high = filter_buffer(&vb, e2);
        let subset = high.transitions.iter().all(|t| low.transitions.contains(t)) && high.len() <= low.len();
        ok += usize::from(all && none && subset);
    }
    Verdict { pass: ok == cases, detail: format!("{ok}/{cases} random valued buffers") }
}

fn criterion_5() -> Verdict {
    let started = Instant::now();
    let base = load_config("cliff_walk.toml");
    let dir = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let cfg = dvorl_core::pipeline::RunConfig { seed, ..base.clone() };
        let report = run_single(&cfg, &dir.path().join(seed.to_string())).unwrap();
        let arm = |name: &str| report.arms.iter().find(|a| a.arm == name).unwrap().clone();
        let (b, d) = (arm(ARM_BASELINE), arm(ARM_DVORL));
        wins += usize::from(d.best_return >= b.best_return);
        lines.push(format!("{seed}:{:.2}/{:.2}({:.0}%)", d.best_return, b.best_return, 100.0 * report.values.kept_fraction));
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict {
        pass: wins >= 7 && secs < 600.0,
        detail: format!("dvorl >= baseline in {wins}/10 seeds [seed:dvorl/baseline(kept)] {}, {secs:.0}s", lines.join(" ")),
    }
}

fn criterion_6() -> Verdict {
    let cfg = load_config("removal.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = run_removal_curve(&cfg, dir.path()).unwrap();
    let point = |f: f64, side: &str| out.curve.iter().find(|p| p.fraction == f && p.side == side).unwrap().clone();
    let (hi, lo) = (point(0.4, "highest"), point(0.4, "lowest"));
    let reps = cfg.removal.repetitions;
    let mut within = 0;
    let mut not_below = 0;
    for rep in 0..reps {
        let row = |f: f64, side: &str| out.rows.iter().find(|r| r.repetition == rep && r.fraction == f && r.side == side).unwrap();
        let full = row(0.0, "lowest");
        let low = row(0.4, "lowest");
        within += usize::from((low.mean_return - full.mean_return).abs() <= full.std_error);
        not_below += usize::from(low.mean_return >= full.mean_return - full.std_error);
    }
    let full = point(0.0, "lowest");
    Verdict {
        pass: hi.mean_return < lo.mean_return && within >= 6 && reps >= 10,
        detail: format!(
            "{reps} seeds: remove-highest@0.4 {:.3} vs remove-lowest@0.4 {:.3} (full {:.3}); \
             remove-lowest@0.4 within 1 SE of full in {within}/{reps} (not below full - 1 SE in {not_below}/{reps})",
            hi.mean_return, lo.mean_return, full.mean_return
        ),
    }
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = config_path("cliff_walk.toml");
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        let code = cli(["dvorl", "run", "--config", config.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        if code != 0 {
            return Verdict { pass: false, detail: format!("run exited with {code}") };
        }
    }
    let (a, b) = (files_under(&runs[0]), files_under(&runs[1]));
    let mut compared = 0;
    let mut differing = Vec::new();
    for fa in &a {
        let rel = fa.strip_prefix(&runs[0]).unwrap();
        if rel == Path::new(dvorl_core::pipeline::TIMING) {
            continue;
        }
        compared += 1;
        if std::fs::read(fa).ok() != std::fs::read(runs[1].join(rel)).ok() {
            differing.push(rel.display().to_string());
        }
    }
    Verdict {
        pass: a.len() == b.len() && differing.is_empty() && compared > 10,
        detail: format!("{compared} artifacts compared, {} differ {:?}", differing.len(), differing),
    }
}

fn criterion_8() -> Verdict {
    let gamma = 0.9;
    let chain = two_state_chain();
    let fqi_cfg = LearnerConfig { algorithm: Algorithm::Fqi, discount: gamma, iterations: 400, ..LearnerConfig::default() };
    let fqi = train_offline(&chain, &fqi_cfg).unwrap().policy;
    let exact = two_state_chain_q(gamma);
    let mut err: f64 = 0.0;
    for s in 0..2 {
        let q = fqi.q_values(&[s as f64]).unwrap();
        for a in 0..2 {
            err = err.max((q[a] - exact[s][a]).abs());
        }
    }

    let grid = DomainConfig::SlipGrid(SlipGridConfig::cliff_walk(5, 3, 0.2));
    let behavior = train_behavior(&grid, &QLearningParams { episodes: 200, ..Default::default() }, 8).unwrap();
    let buffer = generate_buffer(&grid, &behavior.policy, 2000, 0.3, 8).unwrap();
    let mut identical = true;
    for b in [&chain, &buffer] {
        let f = train_offline(b, &LearnerConfig { algorithm: Algorithm::Fqi, ..fqi_cfg.clone() }).unwrap();
        let c = train_offline(b, &LearnerConfig { algorithm: Algorithm::DiscreteBcq, constraint_threshold: 0.0, ..fqi_cfg.clone() }).unwrap();
        identical &= f.sup_norm_deltas == c.sup_norm_deltas
            && b.transitions.iter().all(|t| {
                f.policy.q_values(&t.state) == c.policy.q_values(&t.state) && f.policy.act(&t.state) == c.policy.act(&t.state)
            });
    }
    Verdict {
        pass: err <= 1e-9 && identical,
        detail: format!("max |Q - Q*| {err:.2e}; BCQ(tau=0) identical to FQI: {identical}"),
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(u8, &str, fn() -> Verdict, bool); 8] = [
        (1, "k-NN KL oracle", criterion_1, true),
        (2, "gradient check", criterion_2, true),
        (3, "baseline and filter fidelity", criterion_3, true),
        (4, "filter monotonicity", criterion_4, true),
        (5, "transfer finding", criterion_5, false),
        (6, "removal asymmetry", criterion_6, false),
        (7, "determinism", criterion_7, true),
        (8, "Bellman fixed point", criterion_8, true),
    ];
    let mut failed_required = Vec::new();
    for (id, name, run, required) in criteria {
        let v = run();
        println!("criterion {id} ({name}): {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass && required {
            failed_required.push(id);
        }
    }
    if failed_required.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("required criteria failed: {failed_required:?}");
        ExitCode::FAILURE
    }
}

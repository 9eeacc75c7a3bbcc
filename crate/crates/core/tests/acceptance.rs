//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use common::{brute_force_projection, central_difference, random_instance, simpson};
use safeproj::critic::{advantage_estimate, lstd_compatible_advantage, lstd_v, FnFeatures, LstdFit, QuadraticFeatures};
use safeproj::env::Transition;
use safeproj::harness::demos::{angle_deg, DetBiasProblem, TruncationProblem};
use safeproj::harness::{run_section5, write_run, ExperimentConfig, RunLog, SAFETY_TOLERANCE};
use safeproj::policy_grad::{sample_action, AffinePolicy, GaussianPolicy};
use safeproj::projection::{policy_jacobian_projected, project, project_interior_point};
use safeproj::q_safe::{extract_projected_policy, extract_safe_policy, QuadraticQ};
use safeproj::safe_set::ConstraintSet;

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

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn c1_projection() -> Verdict {
    let (worst, elapsed) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (mut kkt, mut gap) = (0.0f64, 0.0f64);
        for i in 0..500 {
            let dim = rng.random_range(2..=6);
            let hs = rng.random_range(0..=6);
            let inst = random_instance(&mut rng, dim, hs, i % 3 != 0 || hs == 0);
            let out = project(&inst.to_set(1), &v(&[0.0]), &inst.target).unwrap();
            kkt = kkt.max(out.kkt_residual);
            gap = gap.max((&out.u_proj - brute_force_projection(&inst, 1e-10)).norm());
        }
        (kkt, gap)
    });
    let (kkt, gap) = worst;
    verdict(
        kkt <= 1e-8 && gap <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("max KKT residual {kkt:.2e}, max oracle gap {gap:.2e}, {elapsed:.2?}"),
    )
}

fn c2_sensitivity() -> Verdict {
    let (res, elapsed) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let (n, h) = (2, 1e-5);
        let (mut checked, mut worst_rel, mut worst_affine, mut active) = (0, 0.0f64, 0.0f64, 0);
        while checked < 150 {
            let m = rng.random_range(2..=5);
            let hs = rng.random_range(1..=4);
            let inst = random_instance(&mut rng, m, hs, checked % 2 == 0);
            let set = inst.to_set(n);
            let x = common::gaussian_vec(&mut rng, n);
            let gain = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let x_ref = common::gaussian_vec(&mut rng, n) * 0.2;
            // place the mean at the instance's target so activity varies
            let u_ref = &inst.target + &gain * (&x - &x_ref);
            let policy = AffinePolicy::new(u_ref, x_ref, gain).unwrap();
            let out = project(&set, &x, &policy.mean(&x)).unwrap();
            if !out.differentiable() {
                continue;
            }
            let theta = policy.params();
            let analytic = policy_jacobian_projected(&out, &policy.jacobian(&x)).unwrap();
            let fd = central_difference(
                |t| {
                    let p = AffinePolicy::from_params(n, m, t).unwrap();
                    project(&set, &x, &p.mean(&x)).unwrap().u_proj
                },
                &theta,
                h,
            );
            let rel = (&fd - &analytic).norm() / analytic.norm().max(fd.norm()).max(1e-12);
            let rel = if analytic.norm() < 1e-12 && fd.norm() < 1e-8 { 0.0 } else { rel };
            worst_rel = worst_rel.max(rel);
            if inst.ball.is_none() {
                let nm = out.nullspace.as_ref().unwrap();
                worst_affine = worst_affine.max((out.correction.as_ref().unwrap() - nm * nm.transpose()).amax());
            }
            active += out.any_active() as usize;
            checked += 1;
        }
        (checked, active, worst_rel, worst_affine)
    });
    let (checked, active, rel, affine) = res;
    verdict(
        rel <= 1e-4 && affine <= 1e-12 && active >= 50 && elapsed < Duration::from_secs(30),
        format!("{checked} instances ({active} with active constraints), max rel error {rel:.2e}, max |M - NNᵀ| {affine:.2e}, {elapsed:.2?}"),
    )
}

fn c3_interior_point() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let x = v(&[0.0]);
    let (mut used, mut lo, mut hi) = (0, f64::INFINITY, f64::NEG_INFINITY);
    while used < 20 {
        let dim = rng.random_range(2..=4);
        let (hs, ball) = (rng.random_range(1..=3), rng.random_bool(0.5));
        let inst = random_instance(&mut rng, dim, hs, ball);
        let set = inst.to_set(1);
        let out = project(&set, &x, &inst.target).unwrap();
        // the barrier error is first order in τ only under strict complementarity
        let strict = set.constraints().iter().enumerate().all(|(i, c)| {
            if out.active_set.contains(&i) {
                out.multipliers[i] > 1e-2
            } else {
                c.value(&x, &out.u_proj) < -1e-2
            }
        });
        if !strict || !out.differentiable() || out.active_set.is_empty() {
            continue;
        }
        let errors: Vec<f64> = (0..4)
            .map(|k| {
                let tau = 1e-3 / f64::powi(2.0, k);
                (project_interior_point(&set, &x, &inst.target, tau).unwrap() - &out.u_proj).norm()
            })
            .collect();
        for w in errors.windows(2) {
            let r = w[0] / w[1];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        used += 1;
    }
    verdict(
        lo >= 1.6 && hi <= 2.4,
        format!("{used} instances, halving ratios in [{lo:.4}, {hi:.4}]"),
    )
}

fn c4_safe_vs_projected() -> Verdict {
    let x = v(&[0.0]);
    let q = QuadraticQ::from_input_form(1, &DMatrix::from_diagonal(&v(&[2.0, 20.0])), &v(&[-4.0, 0.0]), 4.0).unwrap();
    let set = ConstraintSet::new(1, 2).with_halfspace(&[1.0, 1.0], 0.0).unwrap();
    let q_safe = q.value(&x, &extract_safe_policy(&q, &set, &x).unwrap());
    let q_proj = q.value(&x, &extract_projected_policy(&q, &set, &x).unwrap());
    let exact = (q_safe - 440.0 / 121.0).abs() < 1e-9 && (q_proj - 11.0).abs() < 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let m = rng.random_range(2..=5);
        let (hs, ball) = (rng.random_range(1..=4), rng.random_bool(0.5));
        let inst = random_instance(&mut rng, m, hs, ball);
        let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
        let q = QuadraticQ::from_input_form(1, &h, &common::gaussian_vec(&mut rng, m), 0.0).unwrap();
        let set = inst.to_set(1);
        let s = q.value(&x, &extract_safe_policy(&q, &set, &x).unwrap());
        let p = q.value(&x, &extract_projected_policy(&q, &set, &x).unwrap());
        worst = worst.max(s - p);
    }
    verdict(
        exact && worst <= 1e-9,
        format!("Q_safe = {q_safe:.6}, Q_proj = {q_proj:.6}, max(Q_safe - Q_proj) over 200 = {worst:.2e}"),
    )
}

fn c5_unbiasedness() -> Verdict {
    let p = TruncationProblem::standard();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let b = (p.bound - p.theta) / p.sigma;
    let beyond = 1.0 - normal.cdf(b);
    // clipped draws do not move with θ, so only the region below the bound
    // contributes: dJ/dθ = E[2(θ + σz − c); z < b]
    let closed = 2.0 * (p.theta - p.target) * normal.cdf(b) - 2.0 * p.sigma * normal.pdf(b);
    let integrated = simpson(|z| 2.0 * (p.theta + p.sigma * z - p.target) * normal.pdf(z), -12.0, b, 20_000);
    let ((corrected, naive), elapsed) = timed(|| p.estimates(1_000_000, 505).unwrap());
    let zc = (corrected.gradient[0] - closed) / corrected.standard_error[0];
    let zn = (naive.gradient[0] - closed) / naive.standard_error[0];
    verdict(
        (closed - integrated).abs() < 1e-9
            && beyond >= 0.3
            && zc.abs() <= 3.0
            && zn.abs() > 5.0
            && elapsed < Duration::from_secs(60),
        format!(
            "reference {closed:.5}, corrected {:.5} (z = {zc:.2}), naive {:.5} (z = {zn:.2}), mass beyond bound {beyond:.3}, {elapsed:.2?}",
            corrected.gradient[0], naive.gradient[0]
        ),
    )
}

fn c6_deterministic() -> Verdict {
    let problem = DetBiasProblem::standard().unwrap();
    let policy = DetBiasProblem::standard_policy();
    let (corrected, naive) = problem.gradients(&policy).unwrap();

    // independent rollout: the only constraint is the halfspace u₁ + u₂ ≤ 0.1
    let a = v(&[1.0, 1.0]);
    let r = safeproj::env::rotation(20.0);
    let ret = |theta: &DVector<f64>| {
        let pol = AffinePolicy::from_params(2, 2, theta).unwrap();
        let (mut x, mut total, mut disc) = (v(&[0.0, 1.0]), 0.0, 1.0);
        for _ in 0..30 {
            let raw = pol.mean(&x);
            let u = &raw - &a * ((a.dot(&raw) - 0.1).max(0.0) / a.norm_squared());
            total += disc * (0.01 * (&x - v(&[0.8, 0.5])).norm_squared() + (&u - v(&[0.3, 0.2])).norm_squared());
            disc *= 0.9;
            x = &r * &x + u;
        }
        v(&[total])
    };
    let fd = central_difference(ret, &policy.params(), 1e-6).column(0).into_owned();
    let rel = (&corrected - &fd).norm() / fd.norm();
    let angle = angle_deg(&naive, &fd);
    verdict(
        rel <= 1e-3 && angle > 10.0,
        format!("corrected rel error {rel:.2e}, naive angle {angle:.1}°"),
    )
}

fn default_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    safeproj::harness::validate_config(&path).unwrap_or_else(|d| panic!("default config invalid: {d:?}"))
}

fn c7_safety(log: &RunLog, elapsed: Duration) -> Verdict {
    let violations = log.safety_violations();
    let excess = log.max_plan_excess();
    let states = log.records.len() * log.first_batch.len();
    verdict(
        violations == 0 && excess <= SAFETY_TOLERANCE && elapsed < Duration::from_secs(300),
        format!("{violations} unsafe states over {states} learning steps plus evaluations, max plan excess {excess:.2e}, {elapsed:.2?}"),
    )
}

fn c8_trend(log: &RunLog) -> Verdict {
    let curve = log.normalized_curve();
    let ma: Vec<f64> = curve.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let tail = &ma[ma.len() - 15..];
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    let ratio = log.final_normalized_j();
    verdict(
        ratio < 1.0 && monotone,
        format!("J30/J0 = {ratio:.4}, 5-batch average non-increasing over the last 15: {monotone}"),
    )
}

fn c9_critic() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let gamma = 0.9;
    let mut worst_chain = 0.0f64;
    for n in [2usize, 5, 12] {
        let next: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let cost: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let batch: Vec<Transition> = (0..n)
            .map(|s| Transition {
                episode: 0,
                t: s,
                x: v(&[s as f64]),
                u_s: v(&[0.0]),
                u: v(&[0.0]),
                cost: cost[s],
                x_next: v(&[next[s] as f64]),
                plan_excess: None,
            })
            .collect();
        let one_hot = FnFeatures {
            dim: n,
            f: move |x: &DVector<f64>| DVector::from_fn(n, |i, _| (i == x[0] as usize) as u8 as f64),
        };
        let fit = lstd_v(&batch, &one_hot, gamma, 0.0).unwrap();
        // V = (I − γP)⁻¹ L by Neumann series
        let mut exact = DVector::zeros(n);
        for s in 0..n {
            let (mut state, mut disc) = (s, 1.0);
            while disc > 1e-18 {
                exact[s] += disc * cost[state];
                disc *= gamma;
                state = next[state];
            }
        }
        worst_chain = worst_chain.max((&fit.weights - exact).amax());
    }

    let mean = AffinePolicy::new(v(&[0.1, -0.2]), v(&[0.05, 0.0]), DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.4])).unwrap();
    let policy = GaussianPolicy::new(mean, 0.3).unwrap();
    let planted = v(&[0.6, -0.4, 0.3, 0.9, -0.7, 0.2, 0.5, -0.1]);
    let basis = QuadraticFeatures { input_dim: 2 };
    let value = LstdFit {
        weights: v(&[0.2, 0.1, -0.3, 0.5, 0.05, 0.4]),
        residual: 0.0,
        condition: 1.0,
    };
    let batch: Vec<Transition> = (0..400)
        .map(|t| {
            let x = common::gaussian_vec(&mut rng, 2) * 0.5;
            let u_s = sample_action(&policy, &x, &mut rng);
            // x⁺ = x makes the TD target L − (1 − γ)V(x)
            let cost = advantage_estimate(&planted, &policy, &x, &u_s) + (1.0 - gamma) * value.value(&basis, &x);
            Transition {
                episode: 0,
                t,
                x: x.clone(),
                u_s: u_s.clone(),
                u: u_s,
                cost,
                x_next: x,
                plan_excess: None,
            }
        })
        .collect();
    let fit = lstd_compatible_advantage(&batch, &value, &basis, &policy, gamma, 0.0).unwrap();
    // the score satisfies ψ_x̂ = Kᵀψ_û, so w is identified up to span{(−Kz, z, 0)}
    let k = &policy.mean.gain;
    let z = DMatrix::from_fn(8, 2, |r, c| match r {
        0 | 1 => -k[(r, c)],
        2 | 3 => (r - 2 == c) as u8 as f64,
        _ => 0.0,
    });
    let proj = DMatrix::identity(8, 8) - &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
    let identifiable = &proj * &planted;
    let w_err = (&fit.weights - identifiable).amax();
    verdict(
        worst_chain <= 1e-9 && w_err <= 1e-8,
        format!("chain value error {worst_chain:.2e}, planted weight error {w_err:.2e}"),
    )
}

fn read_outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())).collect()
}

fn c10_determinism(first_dir: &Path) -> Verdict {
    let manifest = first_dir.join("manifest.toml");
    let cfg = safeproj::harness::validate_config(&manifest).unwrap();
    let seed = cfg.seed.unwrap();
    let second = tempfile::tempdir().unwrap();
    let log = run_section5(&cfg, seed).unwrap();
    write_run(second.path(), &cfg, seed, &log).unwrap();
    let a = read_outputs(first_dir);
    let b = read_outputs(second.path());
    let same = a == b;
    verdict(same, format!("{} files compared, identical: {same}", a.len()))
}

fn run(name: &str, f: impl FnOnce() -> Verdict, failures: &mut usize) {
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    *failures += !v.pass as usize;
}

fn main() {
    let mut failures = 0;
    run("1 projection vs brute force", c1_projection, &mut failures);
    run("2 projected policy sensitivity", c2_sensitivity, &mut failures);
    run("3 interior-point consistency", c3_interior_point, &mut failures);
    run("4 safe vs projected extraction", c4_safe_vs_projected, &mut failures);
    run("5 stochastic gradient unbiasedness", c5_unbiasedness, &mut failures);
    run("6 deterministic gradient vs finite differences", c6_deterministic, &mut failures);

    let out = tempfile::tempdir().unwrap();
    let full = catch_unwind(|| {
        let cfg = default_config();
        let seed = cfg.seed.expect("default config carries a seed");
        let (log, elapsed) = timed(|| run_section5(&cfg, seed).unwrap());
        write_run(out.path(), &cfg, seed, &log).unwrap();
        (log, elapsed)
    });
    match &full {
        Ok((log, elapsed)) => {
            run("7 tube MPC safety", || c7_safety(log, *elapsed), &mut failures);
            run("8 learning trend", || c8_trend(log), &mut failures);
        }
        Err(_) => {
            run("7 tube MPC safety", || verdict(false, "default run failed"), &mut failures);
            run("8 learning trend", || verdict(false, "default run failed"), &mut failures);
        }
    }
    run("9 critic exactness", c9_critic, &mut failures);
    if full.is_ok() {
        run("10 determinism", || c10_determinism(out.path()), &mut failures);
    } else {
        run("10 determinism", || verdict(false, "default run failed"), &mut failures);
    }

    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

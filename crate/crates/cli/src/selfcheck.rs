use std::process::ExitCode;

use ndarray::Array2;
use partforge::evalharness::{ndcg_at_k, oracle, rr_at_k};
use partforge::matching::{emd_similarity, exact_uniform_ot, sinkhorn, uniform, SinkhornConfig};
use partforge::objective::{finite_difference_check, gradient_check_fixture, FdConfig};
use partforge::rng;
use rand::Rng as _;

use crate::commands::init_threads;
use crate::SelfcheckArgs;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(0.0..1.0))
}

/// Entropic transport at small ε against the best permutation on 3x3
/// problems, and marginal residuals on rectangular ones.
pub fn sinkhorn_oracle(seed: u64) -> Check {
    let mut r = rng::stream(rng::fork(seed, "selfcheck/sinkhorn"));
    let sharp = SinkhornConfig {
        epsilon: 1e-3,
        max_iter: 100_000,
        tol: 1e-9,
    };
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let cost = random_matrix(&mut r, 3, 3);
        let gap = match sinkhorn(&cost, &uniform(3), &uniform(3), &sharp)
            .and_then(|plan| emd_similarity(&cost, &plan.flow))
        {
            Ok(sim) => (sim + exact_uniform_ot(&cost)).abs(),
            Err(_) => f64::INFINITY,
        };
        worst_gap = worst_gap.max(gap);
    }
    let mut worst_residual = 0.0f64;
    for _ in 0..20 {
        let cost = random_matrix(&mut r, 17, 32);
        let residual = match sinkhorn(&cost, &uniform(17), &uniform(32), &SinkhornConfig::default()) {
            Ok(plan) => {
                let rows = plan.flow.sum_axis(ndarray::Axis(1));
                let cols = plan.flow.sum_axis(ndarray::Axis(0));
                let dr = (&rows - &plan.row_marginals).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let dc = (&cols - &plan.col_marginals).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                dr.max(dc)
            }
            Err(_) => f64::INFINITY,
        };
        worst_residual = worst_residual.max(residual);
    }
    Check {
        name: "sinkhorn oracle",
        pass: worst_gap < 1e-2 && worst_residual < 1e-6,
        detail: format!("max gap to exact OT {worst_gap:.2e}, max marginal residual {worst_residual:.2e}"),
    }
}

pub fn gradient_check(seed: u64) -> Check {
    let outcome = gradient_check_fixture(seed)
        .and_then(|(params, batch, loss)| finite_difference_check(&params, &batch, &loss, &FdConfig::default()));
    match outcome {
        Ok(report) => Check {
            name: "gradient check",
            pass: report.max_rel_err < 1e-4,
            detail: format!(
                "max relative error {:.2e} over {} coordinates",
                report.max_rel_err, report.coordinates
            ),
        },
        Err(e) => Check {
            name: "gradient check",
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// RR@k and NDCG@k against brute-force rank counting on random matrices with ties.
pub fn metric_oracle(seed: u64) -> Check {
    let mut r = rng::stream(rng::fork(seed, "selfcheck/metrics"));
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (q, g) = (r.random_range(1..10), r.random_range(1..14));
        let scores = Array2::from_shape_simple_fn((q, g), || (r.random_range(0.0..1.0f64) * 8.0).round() / 8.0);
        let relevant: Vec<Vec<usize>> = (0..q)
            .map(|_| {
                let n = r.random_range(1..=g.min(3));
                rand::seq::index::sample(&mut r, g, n).into_vec()
            })
            .collect();
        let k = r.random_range(1..=6);
        match (rr_at_k(&scores, &relevant, k), ndcg_at_k(&scores, &relevant, k)) {
            (Ok(rr), Ok(ndcg)) => {
                if rr != oracle::rr(&scores, &relevant, k) {
                    mismatches += 1;
                }
                worst = worst.max((ndcg - oracle::ndcg(&scores, &relevant, k)).abs());
            }
            _ => mismatches += 1,
        }
    }
    Check {
        name: "metric oracle",
        pass: mismatches == 0 && worst < 1e-9,
        detail: format!("{mismatches} RR mismatches, max NDCG difference {worst:.2e} over 200 matrices"),
    }
}

pub fn run(args: &SelfcheckArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    init_threads(threads)?;
    let checks = [sinkhorn_oracle(args.seed), gradient_check(args.seed), metric_oracle(args.seed)];
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

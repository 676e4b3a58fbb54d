//! Offline property checks run by the `selftest` command.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::AminoChain;
use crate::cluster::{agglomerate, owa_linkage, owa_weights, DistanceMatrix, OwaParams};
use crate::error::Result;
use crate::kernel::{KernelParams, StringKernel};
use crate::pipeline::{auc, NormalizationSpec};
use crate::regression::{solve_rls, LooSolver};
use crate::substitution::load_blosum62_2;
use crate::synthetic::{planted_families, random_chain};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("blosum_marginal", check_marginal),
    ("hadamard_pd", check_pd),
    ("k3_matches_bruteforce", check_k3),
    ("psi_thresholds", check_psi),
    ("loo_matches_retraining", check_loo),
    ("auc_pair_count", check_auc),
    ("owa_weights", check_owa),
    ("planted_clusters", check_planted),
];

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            match check(&mut rng) {
                Ok((passed, detail)) => CheckResult {
                    name,
                    passed,
                    detail,
                },
                Err(e) => CheckResult {
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect()
}

fn check_marginal(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let b = load_blosum62_2();
    let p = b.marginal()?;
    let err = (b.values() * &p.p)
        .iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((
        err < 1e-8 && p.p.iter().all(|&v| v > 0.0),
        format!("max |Bp - 1| = {err:.2e}"),
    ))
}

fn check_pd(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let b = load_blosum62_2();
    let report = b.pd_report();
    let mut worst = f64::INFINITY;
    for beta in [0.01, 0.06, 0.11387, 1.0, 5.0] {
        worst = worst.min(b.hadamard_power(beta)?.pd_report().min_eigenvalue);
    }
    Ok((
        report.conditionally_pd && worst > 0.0,
        format!(
            "log spectrum min {:.3e}, power min eigenvalue {worst:.3e}",
            report.log_min_eigenvalue.unwrap_or(f64::NAN)
        ),
    ))
}

fn check_k3(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for beta in [0.05, 0.11387, 1.0] {
        let k = StringKernel::blosum(KernelParams::new(beta)?)?;
        for _ in 0..20 {
            let f = random_chain(rng.random_range(1..=10), rng);
            let g = random_chain(rng.random_range(1..=10), rng);
            let brute = k.k3_bruteforce(&f, &g);
            worst = worst.max((k.k3(&f, &g) - brute).abs() / brute);
        }
    }
    Ok((worst <= 1e-10, format!("max relative error {worst:.2e}")))
}

fn check_psi(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let a = NormalizationSpec::fixed_allele().theta();
    let b = NormalizationSpec::pan_allele().theta();
    Ok((
        (a - 0.4256).abs() < 5e-5 && (b - 0.3537).abs() < 5e-5,
        format!("theta {a:.5} / {b:.5}"),
    ))
}

fn check_loo(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let k = StringKernel::blosum(KernelParams::new(0.11387)?)?;
    let chains: Vec<AminoChain> = (0..15)
        .map(|_| random_chain(rng.random_range(9..=12), rng))
        .collect();
    let labels: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
    let g = k.gram_values(&chains);
    let lambda = 1e-3;
    let fast = LooSolver::new(g.clone(), &labels)?.residuals(lambda)?;
    let mut worst = 0.0f64;
    for i in 0..labels.len() {
        let rest: Vec<usize> = (0..labels.len()).filter(|&j| j != i).collect();
        let kt = DMatrix::from_fn(rest.len(), rest.len(), |a, b| g[(rest[a], rest[b])]);
        let y: Vec<f64> = rest.iter().map(|&j| labels[j]).collect();
        let c = solve_rls(&kt, &y, lambda)?;
        let pred: f64 = rest
            .iter()
            .zip(c.iter())
            .map(|(&j, cj)| cj * g[(i, j)])
            .sum();
        worst = worst.max((labels[i] - pred - fast.residuals[i]).abs());
    }
    Ok((worst < 1e-8, format!("max residual gap {worst:.2e}")))
}

fn check_auc(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for _ in 0..20 {
        let n = 40;
        // Coarse values to force ties.
        let pred: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 / 8.0)
            .collect();
        let obs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let theta = 0.5;
        let (mut hits, mut total) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if obs[i] > theta && obs[j] <= theta {
                    total += 1;
                    hits += u64::from(pred[i] > pred[j]);
                }
            }
        }
        if total == 0 {
            continue;
        }
        if auc(&pred, &obs, theta)? != hits as f64 / total as f64 {
            return Ok((false, "AUC differs from pair count".into()));
        }
    }
    Ok((true, "20 instances agree".into()))
}

fn check_owa(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for n in [1usize, 2, 10, 1000] {
        let w = owa_weights(n, 0.1);
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || w.windows(2).any(|p| p[1] <= p[0]) {
            return Ok((false, format!("weights fail at n = {n}")));
        }
    }
    let d = DistanceMatrix::new(
        vec!["a".into(), "b".into()],
        DMatrix::from_row_slice(2, 2, &[0.0, 0.37, 0.37, 0.0]),
    )?;
    let single = owa_linkage(&[0], &[1], &d, &OwaParams::default())?;
    Ok((
        single == 0.37,
        "sum 1, increasing, singleton linkage exact".into(),
    ))
}

fn check_planted(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = planted_families(3, 8, 30, 3, rng);
    let k = StringKernel::blosum(KernelParams::new(0.06)?)?;
    let g = k.gram(p.ids.clone(), &p.chains)?;
    let all: Vec<usize> = (0..g.len()).collect();
    let tree = agglomerate(&DistanceMatrix::from_gram(&g, &all)?, &OwaParams::default())?;
    let cut = tree.cut(3)?;
    let ok = cut
        .iter()
        .all(|c| c.len() == 8 && c.iter().all(|&i| p.family[i] == p.family[c[0]]));
    Ok((ok, "3 families x 8 mutants".into()))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all(42) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

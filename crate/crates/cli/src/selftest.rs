//! Built-in numerical checks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tta_core::adapt::{estimate_population_stats, init_modulation, modulation_gradient_error, random_case, ModulationSet, GRADCHECK_STEP};
use tta_core::data::Dataset;
use tta_core::diffcore::{row_entropies, softmax_probs};
use tta_core::netmodels::{build_lenet, StatsSource};
use tta_core::Tensor;

use crate::error::{CliError, Result};
use crate::output::{write_table, Provenance};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Largest error observed.
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Test hook: initialize modulation with this gamma instead of 1.
    pub inject_gamma: Option<f32>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f32>() * scale).collect()).expect("shape matches")
}

fn gradient(opts: &SelftestOptions, labeled: bool) -> tta_core::Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..4 {
        let c = random_case(opts.seed.wrapping_mul(31).wrapping_add(i))?;
        let labels = labeled.then_some(c.labels.as_slice());
        worst = worst.max(modulation_gradient_error(&c.net, &c.x, labels, &c.modulation, GRADCHECK_STEP)?);
    }
    Ok(worst)
}

fn identity(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> tta_core::Result<f64> {
    let net = build_lenet::<f32>([1, 28, 28], 10, opts.seed)?;
    let x = random_tensor(rng, vec![64, 1, 28, 28], 1.0);
    let m = match opts.inject_gamma {
        Some(g) => ModulationSet::uniform(net.slot_channels(), g),
        None => init_modulation(&net),
    };
    let a = net.forward(&x, StatsSource::Stored, Some(&m))?;
    let b = net.forward(&x, StatsSource::Stored, None)?;
    Ok(a.max_abs_diff(&b))
}

fn stats_consistency(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> tta_core::Result<f64> {
    let net = build_lenet::<f32>([1, 28, 28], 10, opts.seed)?;
    let data = Dataset::new("selftest", random_tensor(rng, vec![96, 1, 28, 28], 1.0), None, 10)?;
    let a = estimate_population_stats(&net, &data, 32)?;
    let b = estimate_population_stats(&net, &data, 96)?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.mean.iter().zip(&y.mean).chain(x.var.iter().zip(&y.var)) {
            worst = worst.max(((u - v).abs() / (1.0 + v.abs())) as f64);
        }
    }
    Ok(worst)
}

/// Largest distance of any row entropy outside `[0, ln C]`, and of the
/// uniform row from `ln C`.
fn entropy_bounds(rng: &mut ChaCha8Rng) -> tta_core::Result<f64> {
    let classes = 10;
    let logits = Tensor::new(
        vec![256, classes],
        (0..256 * classes).map(|_| (rng.gen::<f32>() - 0.5) * 40.0).collect(),
    )?;
    let top = (classes as f64).ln();
    let mut worst = row_entropies(&softmax_probs(&logits)?)
        .into_iter()
        .map(|h| (-h).max(h - top).max(0.0))
        .fold(0.0, f64::max);
    let uniform = row_entropies(&softmax_probs(&Tensor::<f32>::zeros(vec![1, classes]))?)[0];
    worst = worst.max((uniform - top).abs());
    Ok(worst)
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> tta_core::Result<f64> {
    let c = 7;
    let logits = Tensor::new(vec![128, c], (0..128 * c).map(|_| (rng.gen::<f32>() - 0.5) * 60.0).collect())?;
    let p = softmax_probs(&logits)?;
    Ok(p.data()
        .chunks(c)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

pub fn run_checks(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(vec![
        Check {
            name: "gradient_entropy",
            max_error: gradient(opts, false)?,
            tolerance: 1e-3,
        },
        Check {
            name: "gradient_cross_entropy",
            max_error: gradient(opts, true)?,
            tolerance: 1e-3,
        },
        Check {
            name: "identity_init",
            max_error: identity(opts, &mut rng)?,
            tolerance: 0.0,
        },
        Check {
            name: "stats_batch_independence",
            max_error: stats_consistency(opts, &mut rng)?,
            tolerance: 1e-4,
        },
        Check {
            name: "entropy_bounds",
            max_error: entropy_bounds(&mut rng)?,
            tolerance: 1e-6,
        },
        Check {
            name: "softmax_rows",
            max_error: softmax_rows(&mut rng)?,
            tolerance: 1e-6,
        },
    ])
}

/// Runs the checks, prints them, optionally writes `selftest.csv`, and
/// fails when any check fails.
pub fn cmd_selftest(opts: &SelftestOptions, out: Option<&Path>) -> Result<Vec<Check>> {
    let checks = run_checks(opts)?;
    for c in &checks {
        println!(
            "{:<26} {:<4} max_error {:.3e} tolerance {:.1e}",
            c.name,
            if c.passed() { "ok" } else { "FAIL" },
            c.max_error,
            c.tolerance
        );
    }
    if let Some(dir) = out {
        let key = format!("selftest seed={} inject_gamma={:?}", opts.seed, opts.inject_gamma);
        let prov = Provenance {
            hash: hex::encode(Sha256::digest(key.as_bytes())),
            seed: opts.seed,
        };
        let rows: Vec<Vec<String>> = checks
            .iter()
            .map(|c| {
                vec![
                    c.name.to_string(),
                    c.max_error.to_string(),
                    c.tolerance.to_string(),
                    if c.passed() { "pass" } else { "fail" }.to_string(),
                ]
            })
            .collect();
        write_table(&dir.join("selftest.csv"), &prov, &["check", "max_error", "tolerance", "status"], &rows)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::CheckFailed(format!("failed checks: {}", failed.join(", "))))
    }
}

//! `train`, `corrupt`, `adapt`, and `bench`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tta_core::adapt::report::{write_epoch_log, write_examples, write_histogram, write_step_log, write_summary};
use tta_core::adapt::{adapt_source_only, adapt_with, AdaptedModel, EvalReport, Method, SHIFT_EXAMPLES};
use tta_core::data::native::encode_dataset;
use tta_core::diffcore::{argmax_rows, row_entropies};
use tta_core::netmodels::checkpoint::encode_checkpoint;
use tta_core::netmodels::{accuracy, train_supervised, Network};
use tta_core::Tensor;

use crate::config::{Overrides, Scenario};
use crate::error::{CliError, Result};
use crate::output::{ensure_dir, output_dir, write_container, write_csv, write_table, Provenance};
use crate::sources::{build_network, build_targets, checkpoint_path, load_model, load_sources, Target};

/// Where and how a command runs.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub env_root: Option<PathBuf>,
    pub overrides: Overrides,
    pub workers: usize,
}

struct Prepared {
    scenario: Scenario,
    out: PathBuf,
    prov: Provenance,
}

fn prepare(ctx: &RunContext) -> Result<Prepared> {
    let mut scenario = Scenario::load(&ctx.config)?;
    scenario.apply(&ctx.overrides)?;
    scenario.preflight()?;
    let out = output_dir(ctx.out.as_deref(), ctx.env_root.as_deref(), &scenario.name);
    let prov = Provenance {
        hash: scenario.hash(),
        seed: scenario.seed,
    };
    Ok(Prepared { scenario, out, prov })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("--workers: {e}")))
}

/// Trains the source model, writes the checkpoint, and returns the clean
/// test error in percent.
pub fn cmd_train(ctx: &RunContext) -> Result<f64> {
    let Prepared { scenario: s, out, prov } = prepare(ctx)?;
    let src = load_sources(&s, true)?;
    let train = src.train.as_ref().expect("requested");
    let mut net = build_network(&s, train)?;
    let report = pool(ctx.workers)?.install(|| train_supervised(&mut net, train, None, &s.train_config()))?;
    let test_error = 100.0 * (1.0 - accuracy(&net, &src.test, 256)?);

    let ckpt = checkpoint_path(&s, &out);
    write_container(&ckpt, &prov, encode_checkpoint(&net)?)?;
    let rows: Vec<Vec<String>> = report
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()])
        .collect();
    write_table(&out.join("train.csv"), &prov, &["epoch", "loss"], &rows)?;
    write_table(
        &out.join("train_summary.csv"),
        &prov,
        &["params", "train_accuracy", "test_error_pct"],
        &[vec![net.param_count().to_string(), report.train_accuracy.to_string(), format!("{test_error:.2}")]],
    )?;
    println!("checkpoint: {}", ckpt.display());
    println!("clean test error: {test_error:.2}%");
    Ok(test_error)
}

/// Writes every corruption target as a native dataset file.
pub fn cmd_corrupt(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let Prepared { mut scenario, out, prov } = prepare(ctx)?;
    scenario.target.kind = crate::config::TargetKind::Corruption;
    let src = load_sources(&scenario, false)?;
    let targets = pool(ctx.workers)?.install(|| build_targets(&scenario, &src))?;
    let mut written = Vec::new();
    for t in targets {
        let p = out.join("data").join(format!("{}.tent", t.name));
        write_container(&p, &prov, encode_dataset(&t.data)?)?;
        println!("{}", p.display());
        written.push(p);
    }
    Ok(written)
}

fn prediction_rows(probs: &Tensor<f32>) -> Vec<Vec<String>> {
    let ents = row_entropies(probs);
    argmax_rows(probs)
        .into_iter()
        .zip(ents)
        .enumerate()
        .map(|(i, (c, h))| vec![i.to_string(), c.to_string(), h.to_string()])
        .collect()
}

/// Writes one run's files into `dir`; returns the evaluation when labels exist.
fn write_run(dir: &Path, prov: &Provenance, t: &Target, a: &AdaptedModel, before: &Tensor<f32>) -> Result<Option<EvalReport>> {
    ensure_dir(dir)?;
    write_table(&dir.join("predictions.csv"), prov, &["index", "class", "entropy"], &prediction_rows(&a.probs))?;
    if !matches!(a.method, Method::SourceOnly | Method::BatchNorm) {
        write_csv(&dir.join("steps.csv"), prov, |w| write_step_log(w, &a.steps))?;
    }
    if !a.epochs.is_empty() {
        write_csv(&dir.join("epochs.csv"), prov, |w| write_epoch_log(w, &a.epochs))?;
    }
    let Some(labels) = t.data.labels() else {
        return Ok(None);
    };
    let report = EvalReport::from_probs(&a.probs, labels)?.with_shift_examples(before, &a.probs, labels, SHIFT_EXAMPLES)?;
    let reference = EvalReport::from_probs(before, labels)?;
    write_csv(&dir.join("summary.csv"), prov, |w| write_summary(w, a.method.name(), &report))?;
    write_csv(&dir.join("histogram.csv"), prov, |w| write_histogram(w, &report))?;
    write_csv(&dir.join("histogram_before.csv"), prov, |w| write_histogram(w, &reference))?;
    write_csv(&dir.join("examples.csv"), prov, |w| write_examples(w, &report))?;
    Ok(Some(report))
}

/// Adapts to every target with every configured method. Returns
/// `(target, method, error_pct)` for labeled targets.
pub fn cmd_adapt(ctx: &RunContext) -> Result<Vec<(String, Method, f64)>> {
    let Prepared { scenario: s, out, prov } = prepare(ctx)?;
    let net = load_model(&s, &out)?;
    let src = load_sources(&s, false)?;
    let cfg = s.adaptation(s.seed);
    let mut results = Vec::new();
    pool(ctx.workers)?.install(|| -> Result<()> {
        for t in build_targets(&s, &src)? {
            let before = adapt_source_only(&net, &t.data, &cfg)?.probs;
            for &m in &s.adapt.methods {
                let a = adapt_with(m, &net, &t.data, &cfg)?;
                let dir = out.join("adapt").join(&t.name).join(m.name());
                let line = match write_run(&dir, &prov, &t, &a, &before)? {
                    Some(r) => {
                        results.push((t.name.clone(), m, r.error_pct));
                        format!("error {:.2}% entropy {:.4}", r.error_pct, r.mean_entropy)
                    }
                    None => "unlabeled".to_string(),
                };
                println!("{:<24} {:<20} {line}", t.name, m.name());
            }
        }
        Ok(())
    })?;
    Ok(results)
}

/// One benchmark cell: error and mean entropy, or the failure message.
pub type Cell = std::result::Result<(f64, f64), String>;

fn run_cell(net: &Network<f32>, t: &Target, m: Method, s: &Scenario) -> Cell {
    let a = adapt_with(m, net, &t.data, &s.adaptation(s.seed)).map_err(|e| e.to_string())?;
    let r = a.evaluate(&t.data).map_err(|e| e.to_string())?;
    Ok((r.error_pct, r.mean_entropy))
}

const FAILED_CELL: &str = "ERR";

/// Methods x targets grid, one CSV per severity (or per target for
/// uncorrupted targets), plus the best method per column.
pub fn cmd_bench(ctx: &RunContext) -> Result<BTreeMap<(String, Method), Cell>> {
    let Prepared { scenario: s, out, prov } = prepare(ctx)?;
    let net = load_model(&s, &out)?;
    let src = load_sources(&s, false)?;
    let pool = pool(ctx.workers)?;
    let targets = pool.install(|| build_targets(&s, &src))?;
    let keys: Vec<(usize, Method)> = (0..targets.len())
        .flat_map(|t| s.adapt.methods.iter().map(move |&m| (t, m)))
        .collect();
    let cells: Vec<Cell> = pool.install(|| keys.par_iter().map(|&(t, m)| run_cell(&net, &targets[t], m, &s)).collect());
    let grid: BTreeMap<(String, Method), Cell> = keys
        .iter()
        .zip(cells)
        .map(|(&(t, m), c)| ((targets[t].name.clone(), m), c))
        .collect();

    // Columns grouped by severity; uncorrupted targets form their own group.
    let mut groups: Vec<(String, Vec<&Target>)> = Vec::new();
    for t in &targets {
        let g = t.severity.map_or_else(|| t.name.clone(), |sev| format!("s{sev}"));
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(t),
            None => groups.push((g, vec![t])),
        }
    }
    let dir = out.join("bench");
    let mut summary = Vec::new();
    for (g, cols) in &groups {
        let col_name = |t: &Target| t.kind.map_or_else(|| t.name.clone(), |k| k.name().to_string());
        let mut header = vec!["method".to_string()];
        header.extend(cols.iter().map(|t| col_name(t)));
        let rows: Vec<Vec<String>> = s
            .adapt
            .methods
            .iter()
            .map(|&m| {
                let mut row = vec![m.name().to_string()];
                row.extend(cols.iter().map(|t| match &grid[&(t.name.clone(), m)] {
                    Ok((e, _)) => format!("{e:.2}"),
                    Err(_) => FAILED_CELL.to_string(),
                }));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(&dir.join(format!("grid_{g}.csv")), &prov, &header, &rows)?;
        for t in cols {
            let best = s
                .adapt
                .methods
                .iter()
                .filter_map(|&m| grid[&(t.name.clone(), m)].as_ref().ok().map(|(e, _)| (m, *e)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            summary.push(match best {
                Some((m, e)) => vec![g.clone(), col_name(t), m.name().to_string(), format!("{e:.2}")],
                None => vec![g.clone(), col_name(t), FAILED_CELL.to_string(), String::new()],
            });
        }
    }
    write_table(&dir.join("summary.csv"), &prov, &["group", "target", "best_method", "error_pct"], &summary)?;
    let cell_rows: Vec<Vec<String>> = grid
        .iter()
        .map(|((t, m), c)| match c {
            Ok((e, h)) => vec![t.clone(), m.name().to_string(), format!("{e:.2}"), format!("{h:.6}"), "ok".into()],
            Err(msg) => vec![t.clone(), m.name().to_string(), String::new(), String::new(), msg.clone()],
        })
        .collect();
    write_table(
        &dir.join("cells.csv"),
        &prov,
        &["target", "method", "error_pct", "mean_entropy", "status"],
        &cell_rows,
    )?;
    for (g, cols) in &groups {
        println!("[{g}]");
        for &m in &s.adapt.methods {
            let cells: Vec<String> = cols
                .iter()
                .map(|t| match &grid[&(t.name.clone(), m)] {
                    Ok((e, _)) => format!("{e:>7.2}"),
                    Err(_) => format!("{FAILED_CELL:>7}"),
                })
                .collect();
            println!("{:<20}{}", m.name(), cells.join(""));
        }
    }
    let failed = grid.values().filter(|c| c.is_err()).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} benchmark cell(s) failed; see bench/cells.csv")));
    }
    Ok(grid)
}

//! Figure data from completed `adapt` runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::output::{write_svg, write_table, Provenance};
use crate::svg;

struct Table {
    prov: Provenance,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str, path: &Path) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column `{name}`", path.display())))
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Usage(format!("missing input {}", path.display())),
        _ => CliError::io(path, e),
    })?;
    let prov = Provenance::from_csv_text(&text)
        .ok_or_else(|| CliError::Usage(format!("{}: no scenario_hash/seed header", path.display())))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let bad = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(bad)?;
    Ok(Table { prov, header, rows })
}

fn num(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| CliError::Usage(format!("{}: `{s}` is not a number", path.display())))
}

/// Run directories `adapt/<target>/<method>` under `results`, sorted.
fn run_dirs(results: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let adapt = results.join("adapt");
    let read = |p: &Path| {
        std::fs::read_dir(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Usage(format!("missing input directory {}", p.display())),
            _ => CliError::io(p, e),
        })
    };
    let mut out = Vec::new();
    for t in read(&adapt)? {
        let t = t.map_err(|e| CliError::io(&adapt, e))?.path();
        if !t.is_dir() {
            continue;
        }
        for m in read(&t)? {
            let m = m.map_err(|e| CliError::io(&t, e))?.path();
            if m.is_dir() {
                let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.push((name(&t), name(&m), m));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("no runs under {}", adapt.display())));
    }
    Ok(out)
}

fn histogram_counts(t: &Table, path: &Path) -> Result<(Vec<(String, String)>, Vec<usize>)> {
    let (lo, hi, count) = (t.col("lo", path)?, t.col("hi", path)?, t.col("count", path)?);
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for r in &t.rows {
        edges.push((r[lo].clone(), r[hi].clone()));
        counts.push(num(&r[count], path)? as usize);
    }
    Ok((edges, counts))
}

/// Writes histogram, curve, and example figures for every run under
/// `results`; returns the files written.
pub fn cmd_report(results: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let out = out.map_or_else(|| results.join("report"), Path::to_path_buf);
    let mut written = Vec::new();
    for (target, method, dir) in run_dirs(results)? {
        let dest = out.join(&target).join(&method);
        let title = format!("{target} / {method}");

        let after_path = dir.join("histogram.csv");
        let before_path = dir.join("histogram_before.csv");
        let after = read_table(&after_path)?;
        let before = read_table(&before_path)?;
        let prov = after.prov.clone();
        let (edges, a) = histogram_counts(&after, &after_path)?;
        let (_, b) = histogram_counts(&before, &before_path)?;
        if a.len() != b.len() {
            return Err(CliError::Usage(format!("{}: bin counts differ from {}", before_path.display(), after_path.display())));
        }
        let rows: Vec<Vec<String>> = edges
            .iter()
            .enumerate()
            .map(|(i, (lo, hi))| vec![i.to_string(), lo.clone(), hi.clone(), b[i].to_string(), a[i].to_string()])
            .collect();
        let p = dest.join("entropy_histogram.csv");
        write_table(&p, &prov, &["bin", "lo", "hi", "before", "after"], &rows)?;
        written.push(p);
        let top = edges.last().map_or(Ok(0.0), |(_, hi)| num(hi, &after_path))?;
        let p = dest.join("entropy_histogram.svg");
        write_svg(&p, &prov, &svg::histogram(&title, &b, &a, top))?;
        written.push(p);

        let epochs_path = dir.join("epochs.csv");
        if epochs_path.is_file() {
            let t = read_table(&epochs_path)?;
            let (e, h, err) = (t.col("epoch", &epochs_path)?, t.col("mean_entropy", &epochs_path)?, t.col("error_pct", &epochs_path)?);
            let mut xs = Vec::new();
            let mut hs = Vec::new();
            let mut errs = Vec::new();
            for r in &t.rows {
                xs.push(num(&r[e], &epochs_path)?);
                hs.push(num(&r[h], &epochs_path)?);
                if !r[err].is_empty() {
                    errs.push(num(&r[err], &epochs_path)?);
                }
            }
            let p = dest.join("curve.csv");
            write_table(&p, &prov, &["epoch", "mean_entropy", "error_pct"], &t.rows.iter().map(|r| vec![r[e].clone(), r[h].clone(), r[err].clone()]).collect::<Vec<_>>())?;
            written.push(p);
            let p = dest.join("curve.svg");
            write_svg(&p, &prov, &svg::curve(&title, &xs, &hs, if errs.len() == xs.len() { &errs } else { &[] }))?;
            written.push(p);
        }

        let ex_path = dir.join("examples.csv");
        if ex_path.is_file() {
            let t = read_table(&ex_path)?;
            let (i, l, c, pb, pa) = (
                t.col("index", &ex_path)?,
                t.col("label", &ex_path)?,
                t.col("class", &ex_path)?,
                t.col("p_before", &ex_path)?,
                t.col("p_after", &ex_path)?,
            );
            // Keeps the file's example order.
            let mut order = Vec::new();
            let mut items: BTreeMap<usize, (usize, Vec<(usize, f64, f64)>)> = BTreeMap::new();
            for r in &t.rows {
                let idx = num(&r[i], &ex_path)? as usize;
                if !items.contains_key(&idx) {
                    order.push(idx);
                }
                items.entry(idx).or_insert((num(&r[l], &ex_path)? as usize, Vec::new())).1.push((
                    num(&r[c], &ex_path)? as usize,
                    num(&r[pb], &ex_path)?,
                    num(&r[pa], &ex_path)?,
                ));
            }
            let panels: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = order
                .iter()
                .map(|idx| {
                    let (label, mut cls) = items[idx].clone();
                    cls.sort_by_key(|x| x.0);
                    (*idx, label, cls.iter().map(|x| x.1).collect(), cls.iter().map(|x| x.2).collect())
                })
                .collect();
            let p = dest.join("examples.svg");
            write_svg(&p, &prov, &svg::examples(&title, &panels))?;
            written.push(p);
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

//! Output files, each stamped with the scenario hash and seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tta_core::netmodels::Container;

use crate::error::{CliError, Result};

/// Identifies the run that produced a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Leading comment lines of every CSV.
    pub fn csv_header(&self) -> String {
        format!("# scenario_hash={}\n# seed={}\n", self.hash, self.seed)
    }

    /// Reads the header written by [`Provenance::csv_header`].
    pub fn from_csv_text(text: &str) -> Option<Self> {
        let mut hash = None;
        let mut seed = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some(h) = line.strip_prefix("# scenario_hash=") {
                hash = Some(h.to_string());
            } else if let Some(s) = line.strip_prefix("# seed=") {
                seed = s.parse().ok();
            }
        }
        Some(Self { hash: hash?, seed: seed? })
    }
}

/// Resolves the output directory: the flag, else the environment root plus
/// the scenario name, else `runs/<name>`.
pub fn output_dir(flag: Option<&Path>, env_root: Option<&Path>, name: &str) -> PathBuf {
    match (flag, env_root) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(root)) => root.join(name),
        (None, None) => Path::new("runs").join(name),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes a CSV whose body comes from `body`, preceded by the provenance header.
pub fn write_csv<F>(path: &Path, prov: &Provenance, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> tta_core::Result<()>,
{
    let mut buf = prov.csv_header().into_bytes();
    body(&mut buf)?;
    write_bytes(path, &buf)
}

/// CSV from a header row and string rows.
pub fn write_table(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_csv(path, prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let fmt = |e: csv::Error| tta_core::Error::Format(format!("csv: {e}"));
        w.write_record(header).map_err(fmt)?;
        for r in rows {
            w.write_record(r).map_err(fmt)?;
        }
        w.flush().map_err(|e| tta_core::Error::Format(format!("csv: {e}")))
    })
}

/// Adds `scenario_hash` and `seed` to a container descriptor and writes it.
pub fn write_container(path: &Path, prov: &Provenance, mut c: Container) -> Result<()> {
    let mut desc: serde_json::Value =
        serde_json::from_str(&c.descriptor).map_err(|e| tta_core::Error::Format(format!("descriptor: {e}")))?;
    if let Some(obj) = desc.as_object_mut() {
        obj.insert("scenario_hash".into(), prov.hash.clone().into());
        obj.insert("seed".into(), prov.seed.into());
    }
    c.descriptor = desc.to_string();
    write_bytes(path, &c.encode()?)
}

/// SVG document with the provenance as a leading comment.
pub fn write_svg(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    let text = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- scenario_hash={} seed={} -->\n{body}",
        prov.hash, prov.seed
    );
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let p = Provenance {
            hash: "ab12".into(),
            seed: 7,
        };
        let text = p.csv_header() + "a,b\n1,2\n";
        assert_eq!(Provenance::from_csv_text(&text), Some(p));
        assert_eq!(Provenance::from_csv_text("a,b\n"), None);
    }

    #[test]
    fn output_dir_precedence() {
        let flag = Path::new("/x");
        let root = Path::new("/r");
        assert_eq!(output_dir(Some(flag), Some(root), "n"), Path::new("/x"));
        assert_eq!(output_dir(None, Some(root), "n"), Path::new("/r/n"));
        assert_eq!(output_dir(None, None, "n"), Path::new("runs/n"));
    }
}

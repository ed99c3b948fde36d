//! Result serialization: comma-separated tables and the key = value
//! summary document, both stamped with a provenance header (tool
//! version, command, config hash) and written with LF endings only.
//! No timestamps anywhere — identical inputs must give byte-identical
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::CliError;

/// 17 significant digits: parsing the text recovers the exact f64.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header comments carried by every artifact.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(command: &'static str, config_hash: String) -> Provenance {
        Provenance { command, config_hash }
    }

    fn header(&self) -> String {
        format!(
            "# epsm {} {}\n# config-hash {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.config_hash
        )
    }
}

/// Column-oriented table: provenance comments, one header row, then
/// data rows. Fields containing commas, quotes, or newlines are quoted.
#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn render(&self, prov: &Provenance) -> String {
        let mut s = prov.header();
        s.push_str(&join_csv(&self.columns));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&join_csv(row));
            s.push('\n');
        }
        s
    }

    /// Write `<dir>/<name>` and log the path to stderr.
    pub fn write(&self, dir: &Path, name: &str, prov: &Provenance) -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        fs::write(&path, self.render(prov))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        eprintln!("epsm: wrote {}", path.display());
        Ok(path)
    }
}

fn join_csv(fields: &[String]) -> String {
    fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Structured result document in the config grammar: the resolved
/// configuration echoed back, followed by result sections of
/// key = value lines. All floats go through [`fmt_f`].
#[derive(Debug, Clone)]
pub struct Summary {
    config_echo: Option<String>,
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Summary {
    pub fn new(cfg: Option<&RunConfig>) -> Summary {
        Summary { config_echo: cfg.map(RunConfig::emit), sections: Vec::new() }
    }

    /// Append one entry, opening a new section block when the name
    /// differs from the previous entry's section.
    pub fn push(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let open_new = self.sections.last().map(|(name, _)| name != section).unwrap_or(true);
        if open_new {
            self.sections.push((section.to_string(), Vec::new()));
        }
        self.sections.last_mut().unwrap().1.push((key.to_string(), value.into()));
    }

    pub fn push_f(&mut self, section: &str, key: &str, x: f64) {
        self.push(section, key, fmt_f(x));
    }

    pub fn render(&self, prov: &Provenance) -> String {
        let mut s = prov.header();
        if let Some(echo) = &self.config_echo {
            s.push_str("\n# resolved configuration\n");
            s.push_str(echo);
        }
        s.push_str("\n# results\n");
        for (name, entries) in &self.sections {
            s.push_str(&format!("[{name}]\n"));
            for (key, value) in entries {
                s.push_str(&format!("{key} = {value}\n"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path, prov: &Provenance) -> Result<PathBuf, CliError> {
        let path = dir.join("summary.txt");
        fs::write(&path, self.render(prov))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        eprintln!("epsm: wrote {}", path.display());
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_the_printed_text() {
        use rand::{Rng, SeedableRng};
        // a few awkward fixed values plus a seeded sweep of magnitudes
        let mut xs = vec![
            0.1,
            1.0 / 3.0,
            6.283185307179586,
            1e-300,
            -2.2250738585072014e-308,
            f64::MAX,
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let mant: f64 = rng.random_range(-1.0..1.0);
            let exp: i32 = rng.random_range(-306..307);
            xs.push(mant * 10f64.powi(exp));
        }
        for x in xs {
            let printed = fmt_f(x);
            let back: f64 = printed.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} printed as {printed}");
        }
    }

    #[test]
    fn csv_fields_with_commas_and_quotes_are_quoted() {
        let prov = Provenance::new("test", "0".repeat(16));
        let mut t = Table::new(&["name", "detail"]);
        t.push(vec!["plain".into(), "a, b \"c\"".into()]);
        let text = t.render(&prov);
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# epsm "));
        assert!(lines.next().unwrap().starts_with("# config-hash "));
        assert_eq!(lines.next().unwrap(), "name,detail");
        assert_eq!(lines.next().unwrap(), "plain,\"a, b \"\"c\"\"\"");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn summary_sections_group_consecutive_entries() {
        let prov = Provenance::new("test", "none".into());
        let mut s = Summary::new(None);
        s.push("fermi", "gap", "0.95");
        s.push_f("fermi", "level", 0.5);
        s.push("path", "corners", "5");
        let text = s.render(&prov);
        let fermi_at = text.find("[fermi]").unwrap();
        let path_at = text.find("[path]").unwrap();
        assert!(fermi_at < path_at);
        assert!(text.contains("gap = 0.95"));
        assert!(text.contains(&format!("level = {}", fmt_f(0.5))));
    }
}

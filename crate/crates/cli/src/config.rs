//! Pipeline configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the config
//! file, so a config and its inputs can be moved around together.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use coorddelay::archive::DEFAULT_THRESHOLD;
use coorddelay::regress::{HcVariant, DEFAULT_BOOTSTRAP_REPS, DEFAULT_TAUS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_CORE_NAMES: [&str; 3] = ["Steven M. Christey", "Kurt Seifried", "cve-assign"];

fn default_from() -> NaiveDate {
    NaiveDate::from_ymd_opt(2008, 2, 1).unwrap()
}

fn default_to() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 12, 31).unwrap()
}

fn default_delta() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_core_names() -> Vec<String> {
    DEFAULT_CORE_NAMES.iter().map(|s| s.to_string()).collect()
}

fn default_taus() -> Vec<f64> {
    DEFAULT_TAUS.to_vec()
}

fn default_lambdas() -> Vec<f64> {
    (1..=100).map(f64::from).collect()
}

fn default_lasso_tau() -> f64 {
    0.5
}

fn default_reps() -> usize {
    DEFAULT_BOOTSTRAP_REPS
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_cwe_steps() -> Vec<usize> {
    (1..=11).map(|i| 5 * i).collect()
}

fn default_trees() -> usize {
    500
}

fn default_folds() -> usize {
    10
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    #[serde(default = "default_trees")]
    pub trees: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            trees: default_trees(),
            folds: default_folds(),
            test_fraction: default_test_fraction(),
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub archive: PathBuf,
    pub feeds: Vec<PathBuf>,
    #[serde(default)]
    pub merges: Option<PathBuf>,
    #[serde(default = "default_from")]
    pub from: NaiveDate,
    #[serde(default = "default_to")]
    pub to: NaiveDate,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_core_names")]
    pub core_names: Vec<String>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_lasso_tau")]
    pub lasso_tau: f64,
    #[serde(default = "default_reps")]
    pub bootstrap_reps: usize,
    #[serde(default)]
    pub hc: HcVariant,
    #[serde(default = "default_cwe_steps")]
    pub cwe_steps: Vec<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub classify: ClassifyConfig,
}

impl PipelineConfig {
    /// Reads and validates a config file. Every error is a config error
    /// naming the offending field.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.archive);
        self.feeds.iter_mut().for_each(join);
        if let Some(m) = self.merges.as_mut() {
            join(m);
        }
        join(&mut self.out_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, why: String| Err(CliError::Config(format!("field `{name}`: {why}")));
        if !self.archive.exists() {
            return field("archive", format!("{} does not exist", self.archive.display()));
        }
        if self.feeds.is_empty() {
            return field("feeds", "at least one feed is required".into());
        }
        for f in &self.feeds {
            if !f.is_file() {
                return field("feeds", format!("{} does not exist", f.display()));
            }
        }
        if let Some(m) = &self.merges {
            if !m.is_file() {
                return field("merges", format!("{} does not exist", m.display()));
            }
        }
        if self.from > self.to {
            return field("from", format!("{} is after `to` {}", self.from, self.to));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return field("delta", format!("{} is not in (0, 1]", self.delta));
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return field("taus", "every quantile must lie in (0, 1)".into());
        }
        if !(self.lasso_tau > 0.0 && self.lasso_tau < 1.0) {
            return field("lasso_tau", format!("{} is not in (0, 1)", self.lasso_tau));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return field("lambdas", "penalties must be finite and non-negative".into());
        }
        if self.bootstrap_reps < coorddelay::regress::MIN_BOOTSTRAP_REPS {
            return field(
                "bootstrap_reps",
                format!("{} is below the minimum {}", self.bootstrap_reps, coorddelay::regress::MIN_BOOTSTRAP_REPS),
            );
        }
        if self.classify.trees == 0 {
            return field("classify.trees", "must be positive".into());
        }
        if self.classify.folds < 2 {
            return field("classify.folds", "need at least two folds".into());
        }
        if !(self.classify.test_fraction > 0.0 && self.classify.test_fraction < 1.0) {
            return field("classify.test_fraction", "must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Reads a manual merge list: a CSV with header `name,merge_with`.
pub fn read_merges(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("field `merges`: {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("field `merges`: {}: {e}", path.display())))?;
        match (rec.get(0), rec.get(1)) {
            (Some(a), Some(b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                out.push((a.trim().to_string(), b.trim().to_string()))
            }
            _ => {
                return Err(CliError::Config(format!(
                    "field `merges`: {}: every row needs two names",
                    path.display()
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("archive")).unwrap();
        write(dir.path(), "feed.json", "{}");
        let conf = write(dir.path(), "p.conf", "archive = \"archive\"\nfeeds = [\"feed.json\"]\n");
        let cfg = PipelineConfig::load(&conf).unwrap();
        assert_eq!(cfg.archive, dir.path().join("archive"));
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.taus, vec![0.25, 0.5, 0.75, 0.9]);
        assert_eq!(cfg.lambdas.len(), 100);
        assert_eq!(cfg.cwe_steps.last(), Some(&55));
        assert_eq!(cfg.hc, HcVariant::Hc3);
        assert_eq!(cfg.classify.trees, 500);
    }

    #[test]
    fn missing_feed_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("archive")).unwrap();
        let conf = write(dir.path(), "p.conf", "archive = \"archive\"\n");
        let err = PipelineConfig::load(&conf).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("feeds"), "{err}");

        let conf = write(dir.path(), "q.conf", "archive = \"archive\"\nfeeds = [\"nope.json\"]\n");
        let err = PipelineConfig::load(&conf).unwrap_err();
        assert!(err.to_string().contains("`feeds`"), "{err}");
    }

    #[test]
    fn bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("archive")).unwrap();
        write(dir.path(), "feed.json", "{}");
        for (extra, field) in [
            ("delta = 1.5", "delta"),
            ("taus = [0.5, 1.0]", "taus"),
            ("bootstrap_reps = 10", "bootstrap_reps"),
            ("from = \"2017-01-01\"", "from"),
            ("[classify]\nfolds = 1", "classify.folds"),
        ] {
            let conf = write(
                dir.path(),
                "p.conf",
                &format!("archive = \"archive\"\nfeeds = [\"feed.json\"]\n{extra}\n"),
            );
            let err = PipelineConfig::load(&conf).unwrap_err();
            assert!(err.to_string().contains(field), "{extra}: {err}");
        }
    }

    #[test]
    fn merges_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "name,merge_with\nJ. Doe,John Doe\n");
        assert_eq!(read_merges(&p).unwrap(), vec![("J. Doe".to_string(), "John Doe".to_string())]);
        let p = write(dir.path(), "bad.csv", "name,merge_with\nlonely,\n");
        assert!(read_merges(&p).is_err());
    }
}

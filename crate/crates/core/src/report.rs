//! Multi-seed aggregation and the flat key-value run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TheiaError};

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 256, 777, 999];

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (ddof = 1). Undefined below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMode {
    /// Every seed, restarted or not.
    AsSpecified,
    /// Seeds whose run needed a plateau restart are dropped.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: AggregateMode,
    /// The per-seed values the summary was computed from.
    pub used: Vec<SeedValue>,
    pub excluded: Vec<u64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub threshold: Option<f64>,
    pub at_threshold: usize,
    /// Strict mode excluded every seed.
    pub empty: bool,
}

impl Aggregate {
    pub fn summary(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4} (n={})", self.used.len()),
            (Some(m), None) => format!("{m:.4} (n=1, std undefined)"),
            _ => "empty".to_string(),
        }
    }
}

/// Mean, sample std, range and the number of values `>= threshold`.
/// `restarted` lists seeds whose training log contains a restart.
pub fn aggregate(
    values: &[SeedValue],
    mode: AggregateMode,
    restarted: &[u64],
    threshold: Option<f64>,
) -> Result<Aggregate> {
    let mut seen = std::collections::HashSet::new();
    for v in values {
        if !seen.insert(v.seed) {
            return Err(TheiaError::Invalid(format!("seed {} appears twice", v.seed)));
        }
    }
    let (used, excluded): (Vec<SeedValue>, Vec<SeedValue>) = values
        .iter()
        .cloned()
        .partition(|v| mode == AggregateMode::AsSpecified || !restarted.contains(&v.seed));
    let xs: Vec<f64> = used.iter().map(|v| v.value).collect();
    Ok(Aggregate {
        mode,
        excluded: excluded.iter().map(|v| v.seed).collect(),
        mean: mean(&xs),
        std: sample_std(&xs),
        min: xs.iter().copied().reduce(f64::min),
        max: xs.iter().copied().reduce(f64::max),
        threshold,
        at_threshold: threshold.map_or(0, |t| xs.iter().filter(|&&x| x >= t).count()),
        empty: xs.is_empty(),
        used,
    })
}

/// Schema version expected in the `version` key of every config file.
pub const CONFIG_VERSION: i64 = 1;

/// A flat `section.key = value` file, read as TOML with dotted keys.
///
/// ```text
/// version = 1
/// train.lr = 0.001
/// chain.backbone = "flat-small"
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub entries: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TheiaError::Config(e.message().to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries);
        match entries.remove("version") {
            Some(toml::Value::Integer(CONFIG_VERSION)) => Ok(RunConfig { entries }),
            Some(v) => Err(TheiaError::Config(format!("key `version`: unsupported value {v}, expected {CONFIG_VERSION}"))),
            None => Err(TheiaError::Config("key `version` is missing".into())),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Rejects keys outside the listed sections.
    pub fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            let section = k.split('.').next().unwrap_or("");
            if !allowed.contains(&section) || !k.contains('.') {
                return Err(TheiaError::Config(format!("key `{k}` is not recognized here")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&toml::Value> {
        self.entries.get(key)
    }

    /// Overrides the fields of `base` with the keys under `section.`; nested
    /// structs are reached with further dots. An unknown field or a value of
    /// the wrong type names the offending key.
    pub fn section<T: Serialize + DeserializeOwned>(&self, section: &str, base: &T) -> Result<T> {
        self.section_except(section, base, &[])
    }

    /// As [`RunConfig::section`], skipping keys the caller handles itself.
    pub fn section_except<T: Serialize + DeserializeOwned>(&self, section: &str, base: &T, skip: &[&str]) -> Result<T> {
        let mut v = serde_json::to_value(base)?;
        let prefix = format!("{section}.");
        for (k, val) in self.entries.range(prefix.clone()..) {
            let Some(path) = k.strip_prefix(&prefix) else { break };
            if skip.contains(&path) {
                continue;
            }
            let unknown = || TheiaError::Config(format!("key `{k}` is not recognized"));
            let mut slot = &mut v;
            for field in path.split('.') {
                slot = slot.as_object_mut().and_then(|o| o.get_mut(field)).ok_or_else(unknown)?;
            }
            *slot = serde_json::to_value(val)?;
            serde_json::from_value::<T>(v.clone()).map_err(|e| TheiaError::Config(format!("key `{k}`: {e}")))?;
        }
        Ok(serde_json::from_value(v)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = TheiaError;

    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(TheiaError::Config(format!("flag `--scale`: expected desk or full, got `{s}`"))),
        }
    }
}

/// What one invocation runs and where it writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub scale: Scale,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TheiaError::Config("flag `--seeds`: at least one seed is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(TheiaError::Config(format!("flag `--seeds`: seed {s} appears twice")));
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    /// Validates, refuses an output directory that already holds a run of
    /// this command, and records the manifest.
    pub fn create(&self) -> Result<()> {
        self.validate()?;
        let file = self.out.join(format!("{}.{}", self.command, Self::FILE));
        if file.exists() {
            return Err(TheiaError::Config(format!(
                "flag `--out`: {} already holds a `{}` run",
                self.out.display(),
                self.command
            )));
        }
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(file, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Per-seed value parsed from a run directory name `seed-<n>`.
pub fn seed_of_dir(path: &Path) -> Option<u64> {
    path.file_name()?.to_str()?.strip_prefix("seed-")?.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub aggregate: Aggregate,
    /// Percentile bootstrap interval of the mean.
    pub ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub title: String,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.title);
        for r in &self.rows {
            s += &format!("  {:<28} {}", r.label, r.aggregate.summary());
            if let Some(t) = r.aggregate.threshold {
                s += &format!("  [{}/{} >= {t}]", r.aggregate.at_threshold, r.aggregate.used.len());
            }
            if let Some((lo, hi)) = r.ci {
                s += &format!("  CI [{lo:.4}, {hi:.4}]");
            }
            if !r.aggregate.excluded.is_empty() {
                s += &format!("  excluded {:?}", r.aggregate.excluded);
            }
            s += "\n";
        }
        s
    }
}

/// Final-state accuracy (percent) per chain length across seeds, in both
/// accountings. Seeds whose phase 1 restarted are dropped in strict mode.
pub fn chain_tables(reports: &[crate::chain::ChainReport], threshold: f64) -> Result<Vec<AggregateTable>> {
    let mut lengths: Vec<usize> = reports.iter().flat_map(|r| r.lengths.iter().map(|l| l.length)).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let restarted: Vec<u64> = reports.iter().filter(|r| !r.restarts.is_empty()).map(|r| r.seed).collect();
    let backbone = reports.first().map_or("", |r| r.backbone.as_str());
    [AggregateMode::AsSpecified, AggregateMode::Strict]
        .into_iter()
        .map(|mode| {
            let rows = lengths
                .iter()
                .map(|&len| {
                    let values: Vec<SeedValue> = reports
                        .iter()
                        .filter_map(|r| r.accuracy_at(len).map(|a| SeedValue { seed: r.seed, value: 100.0 * a }))
                        .collect();
                    Ok(AggregateRow {
                        label: format!("L={len}"),
                        aggregate: aggregate(&values, mode, &restarted, Some(threshold))?,
                        ci: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AggregateTable {
                title: format!("chain accuracy (%) {backbone} [{}]", mode_name(mode)),
                rows,
            })
        })
        .collect()
}

fn mode_name(mode: AggregateMode) -> &'static str {
    match mode {
        AggregateMode::AsSpecified => "as-specified",
        AggregateMode::Strict => "strict",
    }
}

/// Everything `report` gathers from a set of run directories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub diagnostics: Vec<(u64, crate::diagnostic::DiagnosticReport)>,
    pub probes: Vec<crate::probe::ProbeCell>,
    pub patching: Vec<(u64, crate::patching::PatchReport)>,
    pub chains: Vec<crate::chain::ChainReport>,
    pub tables: Vec<AggregateTable>,
}

impl ReportBundle {
    pub const DIAGNOSTIC: &'static str = "diagnostic.json";
    pub const PROBES: &'static str = "probes.json";
    pub const PATCHING: &'static str = "patching.json";
    pub const CHAIN: &'static str = "chain.json";

    /// Reads every `seed-<n>` subdirectory of `root` in seed order.
    pub fn collect(root: &Path) -> Result<ReportBundle> {
        let mut dirs: Vec<(u64, PathBuf)> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .filter_map(|p| seed_of_dir(&p).map(|s| (s, p)))
            .collect();
        if dirs.is_empty() {
            return Err(TheiaError::Config(format!("{} holds no seed-<n> run directories", root.display())));
        }
        dirs.sort();
        let mut b = ReportBundle::default();
        for (seed, dir) in &dirs {
            if let Some(d) = read_json(&dir.join(Self::DIAGNOSTIC))? {
                b.diagnostics.push((*seed, d));
            }
            if let Some(cells) = read_json::<Vec<crate::probe::ProbeCell>>(&dir.join(Self::PROBES))? {
                b.probes.extend(cells);
            }
            if let Some(ps) = read_json::<Vec<crate::patching::PatchReport>>(&dir.join(Self::PATCHING))? {
                b.patching.extend(ps.into_iter().map(|p| (*seed, p)));
            }
            if let Some(c) = read_json(&dir.join(Self::CHAIN))? {
                b.chains.push(c);
            }
        }
        b.build_tables()?;
        Ok(b)
    }

    pub fn build_tables(&mut self) -> Result<()> {
        self.tables.clear();
        if !self.diagnostics.is_empty() {
            let values = |f: &dyn Fn(&crate::diagnostic::DiagnosticReport) -> f64| -> Vec<SeedValue> {
                self.diagnostics.iter().map(|(s, d)| SeedValue { seed: *s, value: f(d) }).collect()
            };
            let rows = vec![
                AggregateRow {
                    label: "grand mean (%)".into(),
                    aggregate: aggregate(&values(&|d| 100.0 * d.grand_mean), AggregateMode::AsSpecified, &[], Some(99.0))?,
                    ci: None,
                },
                AggregateRow {
                    label: "worst rule (%)".into(),
                    aggregate: aggregate(&values(&|d| 100.0 * d.worst_accuracy), AggregateMode::AsSpecified, &[], Some(99.0))?,
                    ci: None,
                },
            ];
            self.tables.push(AggregateTable {
                title: "diagnostic".into(),
                rows,
            });
        }
        if !self.probes.is_empty() {
            let rows = crate::probe::summarize(&self.probes)
                .into_iter()
                .map(|s| {
                    let values: Vec<SeedValue> = s.seeds.iter().zip(&s.values).map(|(&seed, &value)| SeedValue { seed, value }).collect();
                    Ok(AggregateRow {
                        label: format!("{} {} {}", s.boundary.name(), s.target.name(), s.family.name()),
                        aggregate: aggregate(&values, AggregateMode::AsSpecified, &[], None)?,
                        ci: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.tables.push(AggregateTable { title: "probes".into(), rows });
        }
        if !self.patching.is_empty() {
            let mut labels: Vec<String> = self.patching.iter().map(|(_, p)| patch_label(p)).collect();
            labels.sort();
            labels.dedup();
            let rows = labels
                .into_iter()
                .map(|label| {
                    let values: Vec<SeedValue> = self
                        .patching
                        .iter()
                        .filter(|(_, p)| patch_label(p) == label)
                        .map(|(s, p)| SeedValue { seed: *s, value: 100.0 * p.flip_rate() })
                        .collect();
                    Ok(AggregateRow {
                        label,
                        aggregate: aggregate(&values, AggregateMode::AsSpecified, &[], Some(100.0))?,
                        ci: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.tables.push(AggregateTable {
                title: "patching flip rate (%)".into(),
                rows,
            });
        }
        if !self.chains.is_empty() {
            self.tables.extend(chain_tables(&self.chains, 99.0)?);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.tables.iter().map(|t| t.to_text()).collect::<Vec<_>>().join("\n")
    }

    /// One row per table cell: table, row, mode, n, mean, std, min, max, at_threshold, seeds, values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "row", "mode", "n", "mean", "std", "min", "max", "at_threshold", "seeds", "values"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for t in &self.tables {
            for r in &t.rows {
                let a = &r.aggregate;
                let seeds: Vec<String> = a.used.iter().map(|v| v.seed.to_string()).collect();
                let values: Vec<String> = a.used.iter().map(|v| v.value.to_string()).collect();
                w.write_record([
                    t.title.clone(),
                    r.label.clone(),
                    mode_name(a.mode).to_string(),
                    a.used.len().to_string(),
                    opt(a.mean),
                    opt(a.std),
                    opt(a.min),
                    opt(a.max),
                    a.at_threshold.to_string(),
                    seeds.join(" "),
                    values.join(" "),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| TheiaError::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| TheiaError::Invalid(e.to_string()))
    }

    /// Writes `report.json`, `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

fn patch_label(p: &crate::patching::PatchReport) -> String {
    format!("{} set={} {:?}", p.pattern.op.name(), p.pattern.set_value, p.source).to_lowercase()
}

fn csv_err(e: csv::Error) -> TheiaError {
    TheiaError::Invalid(format!("csv: {e}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
    struct Knobs {
        lr: f64,
        epochs: usize,
    }

    #[test]
    fn config_overrides_and_names_bad_keys() {
        let base = Knobs { lr: 1e-3, epochs: 10 };
        let c = RunConfig::parse("version = 1\ntrain.epochs = 3\n").unwrap();
        assert_eq!(c.section("train", &base).unwrap(), Knobs { lr: 1e-3, epochs: 3 });
        let e = RunConfig::parse("version = 1\ntrain.epoch = 3\n").unwrap().section("train", &base).unwrap_err();
        assert!(e.to_string().contains("train.epoch"), "{e}");
        let e = RunConfig::parse("version = 1\ntrain.lr = \"fast\"\n").unwrap().section("train", &base).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        assert!(RunConfig::parse("train.lr = 0.1\n").unwrap_err().to_string().contains("version"));
        let e = RunConfig::parse("version = 1\nprobe.x = 1\n").unwrap().check_sections(&["train"]).unwrap_err();
        assert!(e.to_string().contains("probe.x"));
        #[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
        struct Outer {
            inner: Knobs,
        }
        let c = RunConfig::parse("version = 1\nrun.inner.lr = 0.5\n").unwrap();
        assert_eq!(c.section("run", &Outer { inner: base.clone() }).unwrap().inner.lr, 0.5);
    }

    #[test]
    fn manifest_rejects_duplicate_seeds() {
        let m = RunManifest {
            command: "chain".into(),
            config: None,
            seeds: vec![1, 2, 1],
            out: PathBuf::from("/nonexistent"),
            scale: Scale::Desk,
        };
        assert!(m.validate().is_err());
    }
}

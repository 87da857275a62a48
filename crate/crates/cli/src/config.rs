//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use posedist::diffusion::ScheduleConfig;
use posedist::eval::RDAConfig;
use posedist::numericnet::TrainConfig;
use posedist::refine::RefineConfig;
use posedist::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "POSEDIST_OUTPUT_ROOT";
/// File written into every output directory.
pub const EFFECTIVE_CONFIG: &str = "effective.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Mcdropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds training, sampling, refinement subsets and random baselines.
    pub seed: u64,
    pub model: ModelKind,
    /// Probability of conditioning on a caption rather than the image.
    pub beta_swap: f64,
    pub samples_per_query: usize,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub rda: RDAConfig,
    pub refine: RefineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelKind::Diffusion,
            beta_swap: 0.7,
            samples_per_query: 100,
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            rda: RDAConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_swap) {
            return Err(Error::config("beta_swap must lie in [0, 1]"));
        }
        if self.samples_per_query == 0 {
            return Err(Error::config("samples_per_query must be at least 1"));
        }
        self.train.validate()?;
        self.schedule.build()?;
        self.rda.validate()?;
        self.refine.validate()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        // an effective.toml written by an earlier run
        if table.contains_key("command") {
            if let Some(toml::Value::Table(mut inner)) = table.remove("config") {
                inner.remove("benchmark");
                table = inner;
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `explicit`, else `$POSEDIST_OUTPUT_ROOT/<command>`, else `runs/<command>`.
pub fn output_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

#[derive(Serialize)]
struct Effective<'a, T: Serialize> {
    command: &'a str,
    args: &'a [String],
    config: &'a T,
}

/// Records the command line and resolved settings next to the outputs.
pub fn write_effective<T: Serialize>(
    dir: &Path,
    command: &str,
    args: &[String],
    config: &T,
) -> Result<()> {
    let text = toml::to_string_pretty(&Effective {
        command,
        args,
        config,
    })
    .map_err(|e| Error::data(format!("serializing config: {e}")))?;
    let path = dir.join(EFFECTIVE_CONFIG);
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use posedist::numericnet::Architecture;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().train.total_steps, 30_000);
    }

    #[test]
    fn overrides_nest_and_type() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "train.architecture=\"mlp\"".into(),
                "train.total_steps=50000".into(),
                "rda.k_values=[1.0, 2.0]".into(),
                "model=mcdropout".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.architecture, Architecture::Mlp);
        assert_eq!(cfg.train.total_steps, 50_000);
        assert_eq!(cfg.rda.k_values, vec![1.0, 2.0]);
        assert_eq!(cfg.model, ModelKind::Mcdropout);
        assert_eq!(cfg.train_config().seed, 7);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for o in ["beta_swap=2.0", "nonsense=1", "train.batch_size=0", "seed"] {
            let e = RunConfig::load(None, &[o.to_string()]).unwrap_err();
            assert!(e.is_config(), "{o}: {e}");
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\nbeta_swap = 0.5\n[train]\nlayers = 2\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["beta_swap=0.25".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.beta_swap, cfg.train.layers), (3, 0.25, 2));
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        write_effective(dir.path(), "train", &["--seed".into(), "1".into()], &cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join(EFFECTIVE_CONFIG)).unwrap();
        let table: toml::Table = text.parse().unwrap();
        let back: RunConfig = table["config"].clone().try_into().unwrap();
        assert_eq!(back, cfg);
    }

    proptest::proptest! {
        #[test]
        fn override_sets_the_typed_value(steps in 1usize..1_000_000, lr in 1e-8f64..1.0) {
            let mut t = toml::Table::new();
            apply_override(&mut t, &format!("train.total_steps={steps}")).unwrap();
            apply_override(&mut t, &format!("train.learning_rate={lr:e}")).unwrap();
            let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
            proptest::prop_assert_eq!(cfg.train.total_steps, steps);
            proptest::prop_assert_eq!(cfg.train.learning_rate, lr);
        }

        #[test]
        fn override_without_equals_is_rejected(key in "[a-z.]{1,20}") {
            let mut t = toml::Table::new();
            proptest::prop_assert!(apply_override(&mut t, &key).unwrap_err().is_config());
        }
    }
}

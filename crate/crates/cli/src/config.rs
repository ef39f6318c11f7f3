//! Experiment configuration: a flat key-value config file mirroring the flag
//! names, merged under explicit flags, then validated field by field.

use gatenet::data::{BinarizeSpec, Dataset, Split, SyntheticKind};
use gatenet::error::{Error, Result};
use gatenet::network::Arch;
use gatenet::selection::MethodConfig;
use gatenet::training::{CageConfig, TrainConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Environment variable consulted when `--data-dir` is absent.
pub const DATA_DIR_ENV: &str = "GATENET_DATA_DIR";

/// Keys accepted in a config file; identical to the long flag names.
const KNOWN_KEYS: &[&str] = &[
    "method", "dataset", "data-dir", "binarize", "subset", "subset-seed", "test-subset",
    "layers", "width", "classes", "synthetic-dims", "synthetic-samples", "tau", "seed",
    "iters", "batch", "lr", "cage", "cage-tau-min", "cage-tau-max", "cage-beta",
    "eval-every", "eval-repeats", "per-example-noise", "export-circuit", "out",
];

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {} is not 'key = value': {raw}", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::config(format!(
                "unknown config key '{key}' on line {}",
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Method selector including the adaptive-temperature variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodChoice {
    pub method: MethodConfig,
    pub cage: bool,
}

impl MethodChoice {
    pub fn parse(s: &str) -> Result<MethodChoice> {
        if let Some(base) = s.strip_suffix("-cage") {
            let method = MethodConfig::parse(base)?;
            return Ok(MethodChoice { method, cage: true });
        }
        Ok(MethodChoice {
            method: MethodConfig::parse(s)?,
            cage: false,
        })
    }

    pub fn name(&self) -> String {
        if self.cage {
            format!("{}-cage", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }
}

/// Dataset selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetChoice {
    Mnist,
    MnistBinary,
    Cifar10Binary,
    Synthetic(SyntheticKind),
}

impl DatasetChoice {
    pub fn parse(s: &str) -> Result<DatasetChoice> {
        match s {
            "mnist" => Ok(DatasetChoice::Mnist),
            "mnist-binary" => Ok(DatasetChoice::MnistBinary),
            "cifar10-binary" => Ok(DatasetChoice::Cifar10Binary),
            other => SyntheticKind::parse(other).map(DatasetChoice::Synthetic).map_err(|_| {
                Error::config(format!(
                    "unknown dataset '{other}'; expected mnist, mnist-binary, cifar10-binary, \
                     parity, two-moons, or teacher-circuit"
                ))
            }),
        }
    }

    pub fn needs_files(&self) -> bool {
        matches!(
            self,
            DatasetChoice::Mnist | DatasetChoice::MnistBinary | DatasetChoice::Cifar10Binary
        )
    }
}

/// One fully resolved experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub choice: MethodChoice,
    pub dataset: DatasetChoice,
    pub data_dir: Option<PathBuf>,
    pub binarize: Option<f64>,
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub test_subset: Option<usize>,
    pub layers: usize,
    pub width: usize,
    pub classes: Option<usize>,
    pub synthetic_dims: usize,
    pub synthetic_samples: usize,
    pub tau: f64,
    pub seed: u64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub cage_tau_min: f64,
    pub cage_tau_max: f64,
    pub cage_beta: f64,
    pub eval_every: usize,
    pub eval_repeats: usize,
    pub per_example_noise: bool,
    pub export_circuit: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            choice: MethodChoice {
                method: MethodConfig::HARD_ST,
                cage: false,
            },
            dataset: DatasetChoice::MnistBinary,
            data_dir: None,
            binarize: None,
            subset: Some(10_000),
            subset_seed: 0,
            test_subset: None,
            layers: 3,
            width: 8000,
            classes: None,
            synthetic_dims: 16,
            synthetic_samples: 4096,
            tau: 1.0,
            seed: 0,
            iters: 10_000,
            batch: 128,
            lr: 0.01,
            cage_tau_min: 0.5,
            cage_tau_max: 3.0,
            cage_beta: 0.99,
            eval_every: 500,
            eval_repeats: 1,
            per_example_noise: false,
            export_circuit: false,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!(
            "invalid value '{other}' for '{key}'; expected on/off"
        ))),
    }
}

impl ExperimentConfig {
    /// Applies config-file values; used for keys not already set by flags.
    /// The method key is applied first so a separate `cage = on` line is not
    /// clobbered by it.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        if let Some(value) = map.get("method") {
            self.choice = MethodChoice::parse(value)?;
        }
        for (key, value) in map {
            match key.as_str() {
                "method" => {}
                "dataset" => self.dataset = DatasetChoice::parse(value)?,
                "data-dir" => self.data_dir = Some(PathBuf::from(value)),
                "binarize" => self.binarize = Some(parse_as(key, value)?),
                "subset" => self.subset = Some(parse_as(key, value)?),
                "subset-seed" => self.subset_seed = parse_as(key, value)?,
                "test-subset" => self.test_subset = Some(parse_as(key, value)?),
                "layers" => self.layers = parse_as(key, value)?,
                "width" => self.width = parse_as(key, value)?,
                "classes" => self.classes = Some(parse_as(key, value)?),
                "synthetic-dims" => self.synthetic_dims = parse_as(key, value)?,
                "synthetic-samples" => self.synthetic_samples = parse_as(key, value)?,
                "tau" => self.tau = parse_as(key, value)?,
                "seed" => self.seed = parse_as(key, value)?,
                "iters" => self.iters = parse_as(key, value)?,
                "batch" => self.batch = parse_as(key, value)?,
                "lr" => self.lr = parse_as(key, value)?,
                "cage" => self.choice.cage = parse_bool(key, value)?,
                "cage-tau-min" => self.cage_tau_min = parse_as(key, value)?,
                "cage-tau-max" => self.cage_tau_max = parse_as(key, value)?,
                "cage-beta" => self.cage_beta = parse_as(key, value)?,
                "eval-every" => self.eval_every = parse_as(key, value)?,
                "eval-repeats" => self.eval_repeats = parse_as(key, value)?,
                "per-example-noise" => self.per_example_noise = parse_bool(key, value)?,
                "export-circuit" => self.export_circuit = parse_bool(key, value)?,
                "out" => self.out = PathBuf::from(value),
                _ => unreachable!("unknown keys rejected by the parser"),
            }
        }
        Ok(())
    }

    /// Serializes the resolved configuration back into the key-value format,
    /// so a run directory snapshot can be replayed with `--config`.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(&format!("{k} = {v}\n"));
        };
        push("method", self.choice.name());
        push(
            "dataset",
            match self.dataset {
                DatasetChoice::Mnist => "mnist".to_string(),
                DatasetChoice::MnistBinary => "mnist-binary".to_string(),
                DatasetChoice::Cifar10Binary => "cifar10-binary".to_string(),
                DatasetChoice::Synthetic(SyntheticKind::Parity) => "parity".to_string(),
                DatasetChoice::Synthetic(SyntheticKind::TwoMoonsBinarized) => {
                    "two-moons".to_string()
                }
                DatasetChoice::Synthetic(SyntheticKind::RandomTeacherCircuit) => {
                    "teacher-circuit".to_string()
                }
            },
        );
        if let Some(dir) = &self.data_dir {
            push("data-dir", dir.display().to_string());
        }
        if let Some(b) = self.binarize {
            push("binarize", b.to_string());
        }
        if let Some(s) = self.subset {
            push("subset", s.to_string());
        }
        push("subset-seed", self.subset_seed.to_string());
        if let Some(s) = self.test_subset {
            push("test-subset", s.to_string());
        }
        push("layers", self.layers.to_string());
        push("width", self.width.to_string());
        if let Some(c) = self.classes {
            push("classes", c.to_string());
        }
        push("synthetic-dims", self.synthetic_dims.to_string());
        push("synthetic-samples", self.synthetic_samples.to_string());
        push("tau", self.tau.to_string());
        push("seed", self.seed.to_string());
        push("iters", self.iters.to_string());
        push("batch", self.batch.to_string());
        push("lr", self.lr.to_string());
        push("cage", if self.choice.cage { "on" } else { "off" }.to_string());
        push("cage-tau-min", self.cage_tau_min.to_string());
        push("cage-tau-max", self.cage_tau_max.to_string());
        push("cage-beta", self.cage_beta.to_string());
        push("eval-every", self.eval_every.to_string());
        push("eval-repeats", self.eval_repeats.to_string());
        push(
            "per-example-noise",
            if self.per_example_noise { "on" } else { "off" }.to_string(),
        );
        push(
            "export-circuit",
            if self.export_circuit { "on" } else { "off" }.to_string(),
        );
        out
    }

    /// Resolves the data directory: explicit flag, then the environment
    /// variable.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        if let Ok(env) = std::env::var(DATA_DIR_ENV) {
            if !env.is_empty() {
                return Ok(PathBuf::from(env));
            }
        }
        Err(Error::config(format!(
            "dataset requires --data-dir or ${DATA_DIR_ENV}"
        )))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.choice.method,
            tau: self.tau,
            learning_rate: self.lr,
            batch_size: self.batch,
            iterations: self.iters,
            eval_every: self.eval_every,
            seed: self.seed,
            cage: self.choice.cage.then_some(CageConfig {
                tau_min: self.cage_tau_min,
                tau_max: self.cage_tau_max,
                beta: self.cage_beta,
            }),
            per_example_noise: self.per_example_noise,
            eval_repeats: self.eval_repeats,
        }
    }

    /// Validates everything that does not require touching the data.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.layers == 0 {
            return Err(Error::config("layers must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("width must be positive"));
        }
        if let Some(theta) = self.binarize {
            if !(0.0..1.0).contains(&theta) {
                return Err(Error::config(format!(
                    "binarize threshold {theta} outside [0, 1)"
                )));
            }
        }
        if self.dataset.needs_files() && self.binarize.is_some() {
            if let DatasetChoice::Mnist | DatasetChoice::Cifar10Binary = self.dataset {
                return Err(Error::config(
                    "binarize applies only to dataset mnist-binary",
                ));
            }
        }
        Ok(())
    }
}

/// Train/test pair plus task metadata produced by dataset loading.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads and preprocesses the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (mut train, test) = match cfg.dataset {
        DatasetChoice::Mnist => {
            let dir = cfg.resolve_data_dir()?;
            (
                gatenet::data::mnist_dataset(&dir, Split::Train, BinarizeSpec::None)?,
                gatenet::data::mnist_dataset(&dir, Split::Test, BinarizeSpec::None)?,
            )
        }
        DatasetChoice::MnistBinary => {
            let dir = cfg.resolve_data_dir()?;
            let spec = BinarizeSpec::Threshold(cfg.binarize.unwrap_or(0.5));
            (
                gatenet::data::mnist_dataset(&dir, Split::Train, spec)?,
                gatenet::data::mnist_dataset(&dir, Split::Test, spec)?,
            )
        }
        DatasetChoice::Cifar10Binary => {
            let dir = cfg.resolve_data_dir()?;
            (
                gatenet::data::cifar10_dataset(&dir, Split::Train)?,
                gatenet::data::cifar10_dataset(&dir, Split::Test)?,
            )
        }
        DatasetChoice::Synthetic(kind) => {
            let train = gatenet::data::synthetic_task(
                kind,
                cfg.synthetic_dims,
                cfg.synthetic_samples,
                cfg.subset_seed,
            )?;
            let test = gatenet::data::synthetic_task(
                kind,
                cfg.synthetic_dims,
                (cfg.synthetic_samples / 4).max(64),
                cfg.subset_seed.wrapping_add(1),
            )?;
            (train.dataset, test.dataset)
        }
    };
    if let Some(n) = cfg.subset {
        if n < train.len() {
            train = train.subset(n, cfg.subset_seed);
        }
    }
    let mut test = test;
    if let Some(n) = cfg.test_subset {
        if n < test.len() {
            test = test.subset(n, cfg.subset_seed.wrapping_add(7));
        }
    }
    Ok(LoadedData { train, test })
}

/// Network shape implied by the configuration and the loaded data.
pub fn arch_for(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Arch> {
    let classes = match cfg.classes {
        Some(c) => {
            if c != data.train.classes {
                return Err(Error::config(format!(
                    "classes {} does not match the dataset's {} classes",
                    c, data.train.classes
                )));
            }
            c
        }
        None => data.train.classes,
    };
    Ok(Arch {
        input_width: data.train.dims,
        layers: cfg.layers,
        width: cfg.width,
        classes,
    })
}

/// Maps an error to the documented process exit code: 1 config, 2 data,
/// 3 numeric abort.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::NumericAbort { .. } => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing_and_merge() {
        let text = "# comment\nmethod = gumbel-st\ntau = 0.05\ncage = on\n";
        let map = parse_kv_file(text).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv(&map).unwrap();
        assert_eq!(cfg.choice.method, MethodConfig::GUMBEL_ST);
        assert!(cfg.choice.cage);
        assert_eq!(cfg.tau, 0.05);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_kv_file("methodd = hard-st\n").unwrap_err();
        assert!(err.to_string().contains("methodd"));
    }

    #[test]
    fn method_choice_variants() {
        let c = MethodChoice::parse("hard-st-cage").unwrap();
        assert!(c.cage);
        assert_eq!(c.method, MethodConfig::HARD_ST);
        assert_eq!(c.name(), "hard-st-cage");
        let err = MethodChoice::parse("soft-hard").unwrap_err();
        let msg = err.to_string();
        for name in ["soft-mix", "soft-gumbel", "hard-st", "gumbel-st"] {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.choice = MethodChoice::parse("gumbel-st-cage").unwrap();
        cfg.tau = 0.05;
        cfg.subset = Some(512);
        let snap = cfg.snapshot();
        let map = parse_kv_file(&snap).unwrap();
        let mut replayed = ExperimentConfig::default();
        replayed.apply_kv(&map).unwrap();
        assert_eq!(replayed.choice, cfg.choice);
        assert_eq!(replayed.tau, cfg.tau);
        assert_eq!(replayed.subset, cfg.subset);
    }

    #[test]
    fn cage_on_mixture_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.choice = MethodChoice {
            method: MethodConfig::SOFT_MIX,
            cage: true,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&Error::config("x")), 1);
        assert_eq!(exit_code_for(&Error::data("x")), 2);
        assert_eq!(
            exit_code_for(&Error::NumericAbort {
                step: 1,
                loss: f64::NAN,
                tau_b: 1.0,
                logit_max: 0.0
            }),
            3
        );
    }
}

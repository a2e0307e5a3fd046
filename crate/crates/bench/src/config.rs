//! The experiment file: one TOML document with `[experiment]`, `[train]` and
//! `[[method]]` sections.
//!
//! Missing keys take their defaults and unknown keys are errors. Saving writes
//! every value out, so a saved file fully describes the runs it produced.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sslab::data::{generate_synthetic_with, load_fer_csv, load_image_dir, Dataset, SyntheticConfig, UsageMapping};
use sslab::model::EncoderConfig;
use sslab::ssl::{Method, MethodConfig};
use sslab::trainer::TrainConfig;

use crate::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        n_per_class: usize,
        n_classes: usize,
        image_size: usize,
        seed: u64,
        noise: f64,
        clutter: usize,
        jitter: f64,
    },
    /// FER13-format CSV; its usage column decides the validation partition.
    Fer { path: PathBuf },
    /// One subdirectory per class.
    ImageDir { path: PathBuf, channels: usize, image_size: usize },
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::synthetic(&SyntheticConfig::new(600, 4, 16, 1000))
    }
}

impl DatasetSource {
    pub fn synthetic(c: &SyntheticConfig) -> Self {
        Self::Synthetic {
            n_per_class: c.n_per_class,
            n_classes: c.n_classes,
            image_size: c.image_size,
            seed: c.seed,
            noise: c.noise,
            clutter: c.clutter,
            jitter: c.jitter,
        }
    }

    /// Defaults for a dataset kind, with `path` filled in where it applies.
    pub fn of_kind(kind: &str, path: Option<PathBuf>) -> Result<Self, BenchError> {
        let need = |p: Option<PathBuf>| p.ok_or_else(|| BenchError::Config(format!("dataset kind {kind} needs a path")));
        match kind {
            "synthetic" => Ok(Self::default()),
            "fer" => Ok(Self::Fer { path: need(path)? }),
            "image-dir" => Ok(Self::ImageDir { path: need(path)?, channels: 1, image_size: 48 }),
            other => Err(BenchError::Config(format!("unknown dataset kind {other:?} (synthetic, fer, image-dir)"))),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Synthetic { .. } => "synthetic",
            Self::Fer { .. } => "fer",
            Self::ImageDir { .. } => "image-dir",
        }
    }

    /// Loads the dataset. FER rows that fail to parse come back as warnings.
    pub fn load(&self) -> Result<(Dataset, Vec<String>), BenchError> {
        match self {
            &Self::Synthetic { n_per_class, n_classes, image_size, seed, noise, clutter, jitter } => {
                let cfg = SyntheticConfig { n_per_class, n_classes, image_size, seed, noise, clutter, jitter };
                Ok((generate_synthetic_with(&cfg)?, Vec::new()))
            }
            Self::Fer { path } => {
                let load = load_fer_csv(path, &UsageMapping::default())?;
                Ok((load.dataset, load.errors.iter().map(|e| e.to_string()).collect()))
            }
            Self::ImageDir { path, channels, image_size } => Ok((load_image_dir(path, *channels, *image_size)?, Vec::new())),
        }
    }
}

/// A hyper-parameter that sweeps may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SweepParam {
    Lambda,
    EmaM,
    Temperature,
    PCutoff,
    VatEpsilon,
}

impl SweepParam {
    /// Field name in the method config.
    pub fn field(self) -> &'static str {
        match self {
            Self::Lambda => "lambda_u",
            Self::EmaM => "ema_m",
            Self::Temperature => "temperature",
            Self::PCutoff => "p_cutoff",
            Self::VatEpsilon => "vat_epsilon",
        }
    }

    /// Sets the parameter. `ema_m` goes into both configs: mean-teacher reads
    /// the method's value, the other methods the trainer's.
    pub fn apply(self, value: f64, train: &mut TrainConfig, method: &mut MethodConfig) {
        match self {
            Self::Lambda => method.lambda_u = value,
            Self::EmaM => {
                method.ema_m = value;
                train.ema_m = value;
            }
            Self::Temperature => method.temperature = value,
            Self::PCutoff => method.p_cutoff = value,
            Self::VatEpsilon => method.vat_epsilon = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "lambda_u" | "lambda" => Self::Lambda,
            "ema_m" | "m" => Self::EmaM,
            "temperature" | "T" => Self::Temperature,
            "p_cutoff" => Self::PCutoff,
            "vat_epsilon" | "epsilon" => Self::VatEpsilon,
            _ => return Err(format!("unknown sweep parameter {s:?} (lambda_u, ema_m, temperature, p_cutoff, vat_epsilon)")),
        })
    }
}

impl TryFrom<String> for SweepParam {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SweepParam> for String {
    fn from(p: SweepParam) -> String {
        p.field().to_string()
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub method: Method,
    pub n_labels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub methods: Vec<Method>,
    pub n_labels: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Holdout fraction for datasets without an official validation partition.
    pub validation_fraction: f64,
    pub encoder_widths: Vec<usize>,
    pub use_residual: bool,
    pub output_dir: PathBuf,
    /// Worker threads for independent runs.
    pub parallelism: usize,
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let mut methods = vec![Method::SupervisedOnly];
        methods.extend(Method::SSL);
        Self {
            name: "experiment".into(),
            methods,
            n_labels: vec![10, 25, 100, 250],
            seeds: vec![0, 1, 2],
            validation_fraction: 0.1,
            encoder_widths: EncoderConfig::default().channel_widths,
            use_residual: false,
            output_dir: PathBuf::from("sslab-out"),
            parallelism: 1,
            dataset: DatasetSource::default(),
            sweep: None,
        }
    }
}

/// Everything a command needs, with defaults resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub experiment: ExperimentSpec,
    pub train: TrainConfig,
    /// Per-method settings; methods without an entry use their defaults.
    #[serde(default)]
    pub method: Vec<MethodConfig>,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        Self::materialized(ExperimentSpec::default(), TrainConfig::default(), Vec::new())
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, user: Option<&toml::Value>, section: &str) -> Result<T, BenchError> {
    let mut merged = toml::Value::try_from(base).map_err(|e| BenchError::Config(format!("{section}: {e}")))?;
    if let Some(user) = user {
        let user = user.as_table().ok_or_else(|| BenchError::Config(format!("{section} must be a table")))?;
        let table = merged.as_table_mut().expect("structs serialize to tables");
        for (k, v) in user {
            if !table.contains_key(k) && !(section == "experiment" && k == "sweep") {
                return Err(BenchError::Config(format!("unknown parameter {section}.{k}")));
            }
            table.insert(k.clone(), v.clone());
        }
    }
    merged.try_into().map_err(|e: toml::de::Error| BenchError::Config(format!("{section}: {}", e.message())))
}

impl ExperimentFile {
    /// Fills in a config for every listed method.
    pub fn materialized(experiment: ExperimentSpec, train: TrainConfig, mut method: Vec<MethodConfig>) -> Self {
        for &m in &experiment.methods {
            if !method.iter().any(|c| c.method == m) {
                method.push(MethodConfig::defaults(m));
            }
        }
        if let Some(s) = &experiment.sweep {
            if !method.iter().any(|c| c.method == s.method) {
                method.push(MethodConfig::defaults(s.method));
            }
        }
        Self { experiment, train, method }
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| BenchError::Config(e.message().to_string()))?;
        for k in doc.keys() {
            if !matches!(k.as_str(), "experiment" | "train" | "method") {
                return Err(BenchError::Config(format!("unknown section [{k}]")));
            }
        }
        let mut experiment: ExperimentSpec = {
            let user = doc.get("experiment");
            let dataset = match user.and_then(|u| u.get("dataset")) {
                None => DatasetSource::default(),
                Some(d) => {
                    let kind = d.get("kind").and_then(|k| k.as_str()).unwrap_or("synthetic");
                    let path = d.get("path").and_then(|p| p.as_str()).map(PathBuf::from);
                    overlay(&DatasetSource::of_kind(kind, path)?, Some(d), "experiment.dataset")?
                }
            };
            let mut user = user.cloned();
            if let Some(t) = user.as_mut().and_then(|u| u.as_table_mut()) {
                t.remove("dataset");
            }
            let mut spec: ExperimentSpec = overlay(&ExperimentSpec::default(), user.as_ref(), "experiment")?;
            spec.dataset = dataset;
            spec
        };
        let train = overlay(&TrainConfig::default(), doc.get("train"), "train")?;
        let mut method = Vec::new();
        if let Some(list) = doc.get("method") {
            let list = list.as_array().ok_or_else(|| BenchError::Config("[[method]] must be an array of tables".into()))?;
            for entry in list {
                let name = entry
                    .get("method")
                    .and_then(|m| m.as_str())
                    .ok_or_else(|| BenchError::Config("every [[method]] entry needs a method name".into()))?;
                let m: Method = name.parse().map_err(BenchError::Config)?;
                if method.iter().any(|c: &MethodConfig| c.method == m) {
                    return Err(BenchError::Config(format!("method {m} configured twice")));
                }
                method.push(overlay(&MethodConfig::defaults(m), Some(entry), &format!("method.{m}"))?);
            }
        }
        let mut seen = std::collections::HashSet::new();
        experiment.methods.retain(|m| seen.insert(*m));
        let file = Self::materialized(experiment, train, method);
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string_pretty(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.to_path_buf(), source })?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(BenchError::Config("at least one seed is required".into()));
        }
        if e.parallelism == 0 {
            return Err(BenchError::Config("parallelism must be >= 1".into()));
        }
        if e.methods.is_empty() || e.n_labels.is_empty() || e.n_labels.contains(&0) {
            return Err(BenchError::Config("methods and positive n_labels are required".into()));
        }
        if let Some(s) = &e.sweep {
            if s.values.is_empty() || s.n_labels == 0 {
                return Err(BenchError::Config("sweep needs values and a positive n_labels".into()));
            }
        }
        self.train.validate()?;
        for m in &self.method {
            m.validate()?;
        }
        Ok(())
    }

    /// Resolved config for `m`.
    pub fn method_config(&self, m: Method) -> MethodConfig {
        self.method.iter().find(|c| c.method == m).cloned().unwrap_or_else(|| MethodConfig::defaults(m))
    }

    pub fn encoder(&self, data: &Dataset) -> EncoderConfig {
        EncoderConfig {
            input_channels: data.channels,
            input_size: data.image_size,
            channel_widths: self.experiment.encoder_widths.clone(),
            use_residual: self.experiment.use_residual,
            num_classes: data.num_classes,
        }
    }

    pub fn dataset_kind(&self) -> &'static str {
        self.experiment.dataset.kind()
    }
}

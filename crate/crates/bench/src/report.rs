//! Result records, aggregate tables and their renderings.
//!
//! Machine-readable outputs are JSON documents whose first field is a format
//! tag (`sslab-run/v1`, `sslab-results/v1`, `sslab-sweep/v1`,
//! `sslab-compare/v1`). Human-readable outputs are aligned plain text headed by
//! a `# sslab <kind> v1` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sslab::model::EncoderConfig;
use sslab::ssl::{Method, MethodConfig};
use sslab::trainer::{ConfusionMatrix, TrainConfig};

use crate::config::{DatasetSource, SweepParam};
use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    /// Label budget `n` per class, rest unlabeled.
    Budget,
    /// Every training example labeled.
    AllLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: SweepParam,
    pub value: f64,
}

/// Everything needed to reproduce one run, and what it achieved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub format: String,
    pub id: String,
    pub dataset: DatasetSource,
    pub dataset_name: String,
    pub validation_fraction: f64,
    pub kind: RunKind,
    pub method: Method,
    /// Labels per class; absent for [`RunKind::AllLabels`].
    pub n_labels: Option<usize>,
    pub seed: u64,
    pub sweep: Option<SweepPoint>,
    pub train: TrainConfig,
    pub method_config: MethodConfig,
    pub encoder: EncoderConfig,
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub accuracy: f64,
    pub reported_iteration: usize,
    pub class_names: Vec<String>,
    /// `confusion[i][j]`: true class `i` predicted as `j`.
    pub confusion: Vec<Vec<u64>>,
    pub elapsed_secs: f64,
}

impl RunRecord {
    pub const FORMAT: &'static str = "sslab-run/v1";

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix { counts: self.confusion.clone() }
    }

    /// Whether `other` was produced by the same inputs.
    pub fn same_inputs(&self, other: &RunRecord) -> bool {
        self.id == other.id
            && self.dataset == other.dataset
            && self.validation_fraction == other.validation_fraction
            && self.kind == other.kind
            && self.method == other.method
            && self.n_labels == other.n_labels
            && self.seed == other.seed
            && self.sweep == other.sweep
            && self.train == other.train
            && self.method_config == other.method_config
            && self.encoder == other.encoder
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stdev: f64,
    pub runs: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Some(Self { mean, stdev: var.sqrt(), runs: values.len() })
    }

    /// Percent with two decimals, `mean±stdev`.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.stdev)
    }
}

/// Failure of a single run; the rest of the grid carries on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub id: String,
    pub message: String,
}

/// One row per completed run of a method × budget grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsTable {
    pub format: String,
    pub name: String,
    pub dataset_name: String,
    /// Column order of the rendered table.
    pub methods: Vec<Method>,
    pub n_labels: Vec<usize>,
    pub rows: Vec<RunRecord>,
    pub errors: Vec<CellError>,
}

impl ResultsTable {
    pub const FORMAT: &'static str = "sslab-results/v1";

    /// Mean and spread per `(method, n_labels)` over seeds.
    pub fn aggregate(&self) -> BTreeMap<(Method, usize), Stat> {
        let mut acc: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if let Some(n) = r.n_labels {
                acc.entry((r.method, n)).or_default().push(r.accuracy);
            }
        }
        acc.into_iter().filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s))).collect()
    }

    /// Number of filled `(method, n_labels)` cells.
    pub fn cells(&self) -> usize {
        self.aggregate().len()
    }

    pub fn render(&self) -> String {
        let agg = self.aggregate();
        let mut header = vec!["method".to_string()];
        header.extend(self.n_labels.iter().map(|n| format!("{n} labels")));
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|&m| {
                let mut row = vec![m.name().to_string()];
                row.extend(self.n_labels.iter().map(|&n| agg.get(&(m, n)).map_or("-".into(), Stat::cell)));
                row
            })
            .collect();
        let mut out = format!("# sslab table v1\n# {}: accuracy % (mean±stdev over seeds) on {}\n", self.name, self.dataset_name);
        out.push_str(&align(&header, &rows));
        for e in &self.errors {
            let _ = writeln!(out, "# failed {}: {}", e.id, e.message);
        }
        out
    }
}

/// Pads columns to equal width; the first column is left-aligned.
pub fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = width[c]) } else { format!("{s:>w$}", w = width[c]) })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// `C×C` grid with class names on both axes (rows true, columns predicted).
pub fn render_confusion(class_names: &[String], confusion: &ConfusionMatrix) -> String {
    let mut header = vec!["true \\ predicted".to_string()];
    header.extend(class_names.iter().cloned());
    let rows: Vec<Vec<String>> = confusion
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![class_names.get(i).cloned().unwrap_or_else(|| format!("class-{i}"))];
            r.extend(row.iter().map(|c| c.to_string()));
            r
        })
        .collect();
    format!(
        "# sslab confusion v1\n# {} examples, accuracy {:.4}\n{}",
        confusion.total(),
        confusion.accuracy(),
        align(&header, &rows)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub stat: Stat,
}

/// Accuracy as one hyper-parameter varies, at a fixed label budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTable {
    pub format: String,
    pub name: String,
    pub dataset_name: String,
    pub method: Method,
    pub parameter: SweepParam,
    pub n_labels: usize,
    /// Sorted by `(value, seed)`.
    pub records: Vec<RunRecord>,
    /// Sorted by value.
    pub summary: Vec<SweepSummary>,
    pub errors: Vec<CellError>,
}

impl SweepTable {
    pub const FORMAT: &'static str = "sslab-sweep/v1";

    pub fn build(name: String, dataset_name: String, method: Method, parameter: SweepParam, n_labels: usize, mut records: Vec<RunRecord>, errors: Vec<CellError>) -> Self {
        let value = |r: &RunRecord| r.sweep.map_or(f64::NAN, |s| s.value);
        records.sort_by(|a, b| value(a).total_cmp(&value(b)).then(a.seed.cmp(&b.seed)));
        let mut summary: Vec<SweepSummary> = Vec::new();
        for chunk in records.chunk_by(|a, b| value(a) == value(b)) {
            let acc: Vec<f64> = chunk.iter().map(|r| r.accuracy).collect();
            if let Some(stat) = Stat::of(&acc) {
                summary.push(SweepSummary { value: value(&chunk[0]), stat });
            }
        }
        Self { format: Self::FORMAT.into(), name, dataset_name, method, parameter, n_labels, records, summary, errors }
    }

    pub fn render(&self) -> String {
        let header = vec![self.parameter.to_string(), "mean %".into(), "stdev %".into(), "runs".into()];
        let rows: Vec<Vec<String>> = self
            .summary
            .iter()
            .map(|s| vec![s.value.to_string(), format!("{:.2}", 100.0 * s.stat.mean), format!("{:.2}", 100.0 * s.stat.stdev), s.stat.runs.to_string()])
            .collect();
        let mut out = format!(
            "# sslab sweep v1\n# {}: {} on {}, {} labels per class\n",
            self.name,
            self.method,
            self.dataset_name,
            self.n_labels
        );
        out.push_str(&align(&header, &rows));
        for e in &self.errors {
            let _ = writeln!(out, "# failed {}: {}", e.id, e.message);
        }
        out
    }
}

/// Fully supervised with all labels, supervised with `n` labels per class, and
/// the best semi-supervised method with `n` labels per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub format: String,
    pub name: String,
    pub dataset_name: String,
    pub n_labels: usize,
    pub all_labels: Stat,
    pub partial_labels: Stat,
    pub best_method: Method,
    pub best_ssl: Stat,
    /// Every semi-supervised candidate that was trained.
    pub candidates: Vec<(Method, Stat)>,
    pub records: Vec<RunRecord>,
    pub errors: Vec<CellError>,
}

impl Comparison {
    pub const FORMAT: &'static str = "sslab-compare/v1";

    pub fn columns(&self) -> [(String, Stat); 3] {
        [
            ("supervised, all labels".into(), self.all_labels),
            (format!("supervised, {} labels", self.n_labels), self.partial_labels),
            (format!("best SSL ({})", self.best_method), self.best_ssl),
        ]
    }

    pub fn render(&self) -> String {
        let cols = self.columns();
        let mut header = vec!["dataset".to_string()];
        header.extend(cols.iter().map(|c| c.0.clone()));
        let mut row = vec![self.dataset_name.clone()];
        row.extend(cols.iter().map(|c| c.1.cell()));
        let mut out = format!("# sslab comparison v1\n# {}: accuracy % (mean±stdev over seeds)\n", self.name);
        out.push_str(&align(&header, &[row]));
        for e in &self.errors {
            let _ = writeln!(out, "# failed {}: {}", e.id, e.message);
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })
}

/// Reads a JSON document and checks its format tag.
pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => Ok(serde_json::from_value(raw)?),
        other => Err(BenchError::Format { path: path.to_path_buf(), expected: format.into(), found: other.map(String::from) }),
    }
}

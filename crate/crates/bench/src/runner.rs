//! Grid, sweep and comparison execution.
//!
//! Every run lives in `<output_dir>/runs/<id>/`. Its `record.json` is written
//! last, so a directory without one is an interrupted run. On a rerun, a cell
//! whose record matches its inputs is loaded instead of retrained.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sslab::data::{make_full_splits, make_splits, Dataset};
use sslab::ssl::{AugmentSet, Method, MethodConfig};
use sslab::trainer::{save_run, train_with, TrainConfig, TrainSetup};

use crate::config::ExperimentFile;
use crate::report::{
    read_json, render_confusion, write_json, write_text, CellError, Comparison, ResultsTable, RunKind, RunRecord, Stat, SweepPoint,
    SweepTable,
};
use crate::BenchError;

/// One training run, fully resolved.
#[derive(Clone, Debug)]
pub struct Cell {
    pub id: String,
    pub kind: RunKind,
    pub method: Method,
    pub n_labels: Option<usize>,
    pub seed: u64,
    pub sweep: Option<SweepPoint>,
    pub train: TrainConfig,
    pub method_config: MethodConfig,
}

/// A loaded experiment: resolved config plus its dataset.
pub struct Experiment {
    pub file: ExperimentFile,
    pub dataset: Dataset,
    /// Rows the dataset loader rejected.
    pub warnings: Vec<String>,
}

/// What happened to each cell of a batch.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub records: Vec<RunRecord>,
    pub errors: Vec<CellError>,
    /// Cells loaded from earlier runs.
    pub reused: usize,
}

impl Experiment {
    pub fn load(file: ExperimentFile) -> Result<Self, BenchError> {
        file.validate()?;
        let (dataset, warnings) = file.experiment.dataset.load()?;
        Ok(Self { file, dataset, warnings })
    }

    pub fn with_dataset(file: ExperimentFile, dataset: Dataset) -> Result<Self, BenchError> {
        file.validate()?;
        Ok(Self { file, dataset, warnings: Vec::new() })
    }

    pub fn output_dir(&self) -> &Path {
        &self.file.experiment.output_dir
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.output_dir().join("runs").join(id)
    }

    pub fn cell(&self, kind: RunKind, method: Method, n_labels: Option<usize>, seed: u64, sweep: Option<SweepPoint>) -> Cell {
        let mut train = TrainConfig { seed, ..self.file.train.clone() };
        let mut method_config = self.file.method_config(method);
        let mut id = match (kind, n_labels) {
            (RunKind::AllLabels, _) | (_, None) => format!("{method}-all-s{seed}"),
            (RunKind::Budget, Some(n)) => format!("{method}-n{n}-s{seed}"),
        };
        if let Some(p) = sweep {
            p.parameter.apply(p.value, &mut train, &mut method_config);
            id.push_str(&format!("-{}={}", p.parameter, p.value));
        }
        Cell { id, kind, method, n_labels, seed, sweep, train, method_config }
    }

    fn template(&self, cell: &Cell) -> RunRecord {
        let e = &self.file.experiment;
        RunRecord {
            format: RunRecord::FORMAT.into(),
            id: cell.id.clone(),
            dataset: e.dataset.clone(),
            dataset_name: self.dataset.name.clone(),
            validation_fraction: e.validation_fraction,
            kind: cell.kind,
            method: cell.method,
            n_labels: cell.n_labels,
            seed: cell.seed,
            sweep: cell.sweep,
            train: cell.train.clone(),
            method_config: cell.method_config.clone(),
            encoder: self.file.encoder(&self.dataset),
            labeled: 0,
            unlabeled: 0,
            validation: 0,
            accuracy: 0.0,
            reported_iteration: 0,
            class_names: self.dataset.class_names.clone(),
            confusion: Vec::new(),
            elapsed_secs: 0.0,
        }
    }

    /// The finished record of `cell` from an earlier invocation, if its inputs match.
    pub fn completed(&self, cell: &Cell) -> Option<RunRecord> {
        let path = self.run_dir(&cell.id).join("record.json");
        let old: RunRecord = read_json(&path, RunRecord::FORMAT).ok()?;
        old.same_inputs(&self.template(cell)).then_some(old)
    }

    /// Trains `cell` and writes its run directory.
    pub fn execute(&self, cell: &Cell) -> Result<RunRecord, BenchError> {
        let start = Instant::now();
        let vf = self.file.experiment.validation_fraction;
        let splits = match (cell.kind, cell.n_labels) {
            (RunKind::Budget, Some(n)) => make_splits(&self.dataset, n, vf, cell.seed)?,
            _ => make_full_splits(&self.dataset, vf, cell.seed)?,
        };
        let mut record = self.template(cell);
        let setup = TrainSetup { encoder: record.encoder.clone(), augment: AugmentSet::standard(self.dataset.image_size) };
        let (model, history) = train_with(&cell.train, &cell.method_config, &splits, &setup, |_| {})?;
        let eval = model.evaluation.as_ref().ok_or_else(|| BenchError::Run("no validation examples to evaluate on".into()))?;
        if !cell.train.keep_best && history.last_eval() != Some(eval.accuracy) {
            return Err(BenchError::Run("reported accuracy differs from the last logged evaluation".into()));
        }
        let dir = self.run_dir(&cell.id);
        save_run(&dir, &model, &history, cell.seed)?;
        splits.manifest().save(&dir.join("splits.json"))?;
        write_text(&dir.join("confusion.txt"), &render_confusion(&splits.class_names, &eval.confusion))?;
        record.labeled = splits.labeled.len();
        record.unlabeled = splits.unlabeled.len();
        record.validation = splits.validation.len();
        record.accuracy = eval.accuracy;
        record.reported_iteration = model.reported_iteration;
        record.class_names = splits.class_names.clone();
        record.confusion = eval.confusion.counts.clone();
        record.elapsed_secs = start.elapsed().as_secs_f64();
        write_json(&dir.join("record.json"), &record)?;
        Ok(record)
    }

    /// Runs `cells` on `parallelism` worker threads, reusing completed ones.
    /// Results keep the order of `cells`.
    pub fn run_cells(&self, cells: &[Cell]) -> Result<BatchOutcome, BenchError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.file.experiment.parallelism)
            .build()
            .map_err(|e| BenchError::Run(e.to_string()))?;
        let results: Vec<(Result<RunRecord, CellError>, bool)> = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| match self.completed(cell) {
                    Some(r) => (Ok(r), true),
                    None => (self.execute(cell).map_err(|e| CellError { id: cell.id.clone(), message: e.to_string() }), false),
                })
                .collect()
        });
        let mut out = BatchOutcome::default();
        for (r, reused) in results {
            match r {
                Ok(rec) => {
                    out.reused += reused as usize;
                    out.records.push(rec);
                }
                Err(e) => out.errors.push(e),
            }
        }
        Ok(out)
    }

    fn seeds(&self) -> &[u64] {
        &self.file.experiment.seeds
    }

    pub fn grid_cells(&self) -> Vec<Cell> {
        let e = &self.file.experiment;
        let mut cells = Vec::new();
        for &m in &e.methods {
            for &n in &e.n_labels {
                for &s in self.seeds() {
                    cells.push(self.cell(RunKind::Budget, m, Some(n), s, None));
                }
            }
        }
        cells
    }

    fn save_config(&self) -> Result<(), BenchError> {
        self.file.save(&self.output_dir().join("experiment.toml"))
    }

    /// Every `(method, n_labels, seed)` cell; writes `results.json` and `table.txt`.
    pub fn run_grid(&self) -> Result<(ResultsTable, usize), BenchError> {
        self.save_config()?;
        let outcome = self.run_cells(&self.grid_cells())?;
        let e = &self.file.experiment;
        let table = ResultsTable {
            format: ResultsTable::FORMAT.into(),
            name: e.name.clone(),
            dataset_name: self.dataset.name.clone(),
            methods: e.methods.clone(),
            n_labels: e.n_labels.clone(),
            rows: outcome.records,
            errors: outcome.errors,
        };
        emit_grid(self.output_dir(), &table)?;
        Ok((table, outcome.reused))
    }

    /// One run per sweep value and seed; writes `sweep.json` and `sweep.txt`.
    pub fn run_sensitivity(&self) -> Result<SweepTable, BenchError> {
        let sweep = self.file.experiment.sweep.clone().ok_or_else(|| BenchError::Config("experiment has no [experiment.sweep] section".into()))?;
        self.save_config()?;
        let mut cells = Vec::new();
        for &v in &sweep.values {
            for &s in self.seeds() {
                let point = SweepPoint { parameter: sweep.parameter, value: v };
                cells.push(self.cell(RunKind::Budget, sweep.method, Some(sweep.n_labels), s, Some(point)));
            }
        }
        let outcome = self.run_cells(&cells)?;
        let e = &self.file.experiment;
        let table = SweepTable::build(e.name.clone(), self.dataset.name.clone(), sweep.method, sweep.parameter, sweep.n_labels, outcome.records, outcome.errors);
        write_json(&self.output_dir().join("sweep.json"), &table)?;
        write_text(&self.output_dir().join("sweep.txt"), &table.render())?;
        Ok(table)
    }

    /// Supervised on all labels, supervised on `n` per class, and the best of
    /// the configured semi-supervised methods on `n` per class.
    pub fn compare_supervised(&self, n_labels: usize) -> Result<Comparison, BenchError> {
        let candidates: Vec<Method> = self.file.experiment.methods.iter().copied().filter(|m| m.uses_unlabeled()).collect();
        if candidates.is_empty() {
            return Err(BenchError::Config("comparison needs at least one semi-supervised method".into()));
        }
        self.save_config()?;
        let mut cells: Vec<Cell> = self.seeds().iter().map(|&s| self.cell(RunKind::AllLabels, Method::SupervisedOnly, None, s, None)).collect();
        for m in std::iter::once(Method::SupervisedOnly).chain(candidates.iter().copied()) {
            cells.extend(self.seeds().iter().map(|&s| self.cell(RunKind::Budget, m, Some(n_labels), s, None)));
        }
        let outcome = self.run_cells(&cells)?;
        let stat = |kind: RunKind, m: Method| {
            let acc: Vec<f64> = outcome.records.iter().filter(|r| r.kind == kind && r.method == m).map(|r| r.accuracy).collect();
            Stat::of(&acc)
        };
        let missing = |what: &str| BenchError::Run(format!("no completed {what} runs: {:?}", outcome.errors));
        let all_labels = stat(RunKind::AllLabels, Method::SupervisedOnly).ok_or_else(|| missing("all-label"))?;
        let partial_labels = stat(RunKind::Budget, Method::SupervisedOnly).ok_or_else(|| missing("supervised"))?;
        let scored: Vec<(Method, Stat)> = candidates.iter().filter_map(|&m| stat(RunKind::Budget, m).map(|s| (m, s))).collect();
        let &(best_method, best_ssl) = scored.iter().max_by(|a, b| a.1.mean.total_cmp(&b.1.mean)).ok_or_else(|| missing("semi-supervised"))?;
        let cmp = Comparison {
            format: Comparison::FORMAT.into(),
            name: self.file.experiment.name.clone(),
            dataset_name: self.dataset.name.clone(),
            n_labels,
            all_labels,
            partial_labels,
            best_method,
            best_ssl,
            candidates: scored,
            records: outcome.records,
            errors: outcome.errors,
        };
        write_json(&self.output_dir().join("comparison.json"), &cmp)?;
        write_text(&self.output_dir().join("comparison.txt"), &cmp.render())?;
        Ok(cmp)
    }
}

pub fn emit_grid(dir: &Path, table: &ResultsTable) -> Result<(), BenchError> {
    write_json(&dir.join("results.json"), table)?;
    write_text(&dir.join("table.txt"), &table.render())
}

pub fn parse_grid(dir: &Path) -> Result<ResultsTable, BenchError> {
    read_json(&dir.join("results.json"), ResultsTable::FORMAT)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sslab::ssl::Method;
use sslab_bench::report::{read_json, render_confusion, write_text, RunRecord};
use sslab_bench::{BenchError, CellError, Comparison, DatasetSource, Experiment, ExperimentFile, ResultsTable, Sweep, SweepParam, SweepTable};

#[derive(Parser)]
#[command(name = "sslab", version, about = "Semi-supervised image classification benchmarks on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an experiment file with every default filled in.
    Init {
        #[arg(long, default_value = "experiment.toml")]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Train every (method, labels per class, seed) cell of the grid.
    RunGrid(RunArgs),
    /// Train one method at a fixed label budget across values of one hyper-parameter.
    RunSweep {
        #[command(flatten)]
        run: RunArgs,
        /// lambda_u, ema_m, temperature, p_cutoff or vat_epsilon.
        #[arg(long)]
        parameter: Option<SweepParam>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        n_labels: Option<usize>,
    },
    /// Supervised with all labels vs supervised and best semi-supervised with n labels per class.
    CompareSupervised {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        n_labels: usize,
    },
    /// Re-render the tables found in an output directory.
    Report {
        #[arg(long, short)]
        out: PathBuf,
        /// Also print the confusion matrix of every run.
        #[arg(long)]
        confusion: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// synthetic, fer or image-dir.
    #[arg(long)]
    dataset_kind: Option<String>,
    #[arg(long)]
    dataset_path: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Runs trained in parallel.
    #[arg(long, short)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentFile, BenchError> {
        let mut file = match &self.config {
            Some(p) => ExperimentFile::load(p)?,
            None => ExperimentFile::default(),
        };
        let e = &mut file.experiment;
        match (&self.dataset_kind, &self.dataset_path) {
            (Some(kind), path) => e.dataset = DatasetSource::of_kind(kind, path.clone())?,
            (None, Some(path)) => match &mut e.dataset {
                DatasetSource::Fer { path: p } | DatasetSource::ImageDir { path: p, .. } => *p = path.clone(),
                DatasetSource::Synthetic { .. } => return Err(BenchError::Config("--dataset-path needs --dataset-kind fer or image-dir".into())),
            },
            (None, None) => {}
        }
        if let Some(out) = &self.out {
            e.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            e.seeds = seeds.clone();
        }
        if let Some(j) = self.jobs {
            e.parallelism = j;
        }
        let file = ExperimentFile::materialized(file.experiment, file.train, file.method);
        file.validate()?;
        Ok(file)
    }
}

fn load(file: ExperimentFile) -> Result<Experiment, BenchError> {
    let exp = Experiment::load(file)?;
    if !exp.warnings.is_empty() {
        eprintln!("{} rows rejected by the loader:", exp.warnings.len());
        for w in exp.warnings.iter().take(10) {
            eprintln!("  {w}");
        }
    }
    eprintln!("dataset {}: {} examples, {} classes", exp.dataset.name, exp.dataset.len(), exp.dataset.num_classes);
    Ok(exp)
}

fn report_errors(errors: &[CellError]) -> ExitCode {
    for e in errors {
        eprintln!("run {} failed: {}", e.id, e.message);
    }
    if errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

fn run(cli: Cli) -> Result<ExitCode, BenchError> {
    match cli.command {
        Command::Init { out, force } => {
            if out.exists() && !force {
                return Err(BenchError::Config(format!("{} exists; pass --force to overwrite", out.display())));
            }
            ExperimentFile::default().save(&out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::RunGrid(args) => {
            let exp = load(args.resolve()?)?;
            let (table, reused) = exp.run_grid()?;
            print!("{}", table.render());
            eprintln!("{} runs ({} reused) in {}", table.rows.len(), reused, exp.output_dir().display());
            Ok(report_errors(&table.errors))
        }
        Command::RunSweep { run, parameter, values, method, n_labels } => {
            let mut file = run.resolve()?;
            let base = file.experiment.sweep.clone();
            let sweep = Sweep {
                parameter: parameter.or(base.as_ref().map(|s| s.parameter)).ok_or_else(|| BenchError::Config("no sweep parameter given".into()))?,
                values: values.or(base.as_ref().map(|s| s.values.clone())).ok_or_else(|| BenchError::Config("no sweep values given".into()))?,
                method: method.or(base.as_ref().map(|s| s.method)).unwrap_or(Method::FixMatch),
                n_labels: n_labels.or(base.as_ref().map(|s| s.n_labels)).unwrap_or(25),
            };
            file.experiment.sweep = Some(sweep);
            let file = ExperimentFile::materialized(file.experiment, file.train, file.method);
            file.validate()?;
            let exp = load(file)?;
            let table = exp.run_sensitivity()?;
            print!("{}", table.render());
            Ok(report_errors(&table.errors))
        }
        Command::CompareSupervised { run, n_labels } => {
            let exp = load(run.resolve()?)?;
            let cmp = exp.compare_supervised(n_labels)?;
            print!("{}", cmp.render());
            Ok(report_errors(&cmp.errors))
        }
        Command::Report { out, confusion } => {
            let mut found = false;
            let mut records: Vec<RunRecord> = Vec::new();
            let results = out.join("results.json");
            if results.exists() {
                let t: ResultsTable = read_json(&results, ResultsTable::FORMAT)?;
                write_text(&out.join("table.txt"), &t.render())?;
                print!("{}", t.render());
                records.extend(t.rows);
                found = true;
            }
            let sweep = out.join("sweep.json");
            if sweep.exists() {
                let t: SweepTable = read_json(&sweep, SweepTable::FORMAT)?;
                write_text(&out.join("sweep.txt"), &t.render())?;
                print!("{}", t.render());
                records.extend(t.records);
                found = true;
            }
            let cmp = out.join("comparison.json");
            if cmp.exists() {
                let c: Comparison = read_json(&cmp, Comparison::FORMAT)?;
                write_text(&out.join("comparison.txt"), &c.render())?;
                print!("{}", c.render());
                records.extend(c.records);
                found = true;
            }
            if !found {
                return Err(BenchError::Config(format!("no results.json, sweep.json or comparison.json in {}", out.display())));
            }
            if confusion {
                records.sort_by(|a, b| a.id.cmp(&b.id));
                records.dedup_by(|a, b| a.id == b.id);
                for r in &records {
                    println!("\n## {}", r.id);
                    print!("{}", render_confusion(&r.class_names, &r.confusion_matrix()));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

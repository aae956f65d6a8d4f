use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eas_core::crossval::crossval_bundle;
use eas_core::eval::{evaluate, threads_from_env, DecodeBudget, EvalOptions};
use eas_core::fixtures::{write_fixtures, WeightsKind};
use eas_core::io::{load_dataset, load_model, TaskExample};
use eas_core::metrics::ConfigLabel;
use eas_core::model::{Model, Preset};
use eas_core::profiler::{profile_dataset, samples_csv, token_growth_csv, token_growth_curve};
use eas_core::search::{
    correctness_pairs, format_table, run_grid, scatter_csv, select_constrained,
    smallest_stable_size, stability_analysis, stability_csv, GridOptions, SearchGrid,
    STABILITY_TOLERANCE,
};
use eas_core::sparsifier::{Aggregation, EasConfig};
use eas_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NO_ADMISSIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "eas", version, about = "Early attentive sparsification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy model, echo-task features and a manifest.
    GenFixtures(GenArgs),
    /// Evaluate one configuration and print its record as JSON.
    Run(RunArgs),
    /// Grid search with Pareto selection.
    Search(SearchArgs),
    /// Per-component timing and generated-token growth.
    Profile(ProfileArgs),
    /// Accuracy-ratio spread over dataset partitions.
    Stability(StabilityArgs),
    /// Compare importance and kept indices against an exported bundle.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "tiny")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    n_examples: usize,
    /// echo or random
    #[arg(long, default_value = "echo")]
    weights: WeightsKind,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Use only the first N utterances.
    #[arg(long)]
    n_examples: Option<usize>,
    /// Fixed decode budget (default: max(32, 4 x reference words)).
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<(Model, Vec<TaskExample>), Error> {
        let model = load_model(&self.model)?;
        let mut data = load_dataset(&self.manifest)?;
        if let Some(n) = self.n_examples {
            if n == 0 {
                return Err(Error::Config("n-examples: must be positive".into()));
            }
            data.truncate(n);
        }
        if data.is_empty() {
            return Err(Error::Data(format!("{}: no utterances", self.manifest.display())));
        }
        Ok((model, data))
    }

    fn budget(&self) -> Result<DecodeBudget, Error> {
        match self.max_new_tokens {
            Some(0) => Err(Error::Config("max-new-tokens: must be positive".into())),
            Some(n) => Ok(DecodeBudget::Fixed(n)),
            None => Ok(DecodeBudget::PerReference),
        }
    }
}

#[derive(Args)]
struct EasArgs {
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, default_value = "mean")]
    aggregation: Aggregation,
    /// Aggregate importance over every layer and drop after the last one.
    #[arg(long)]
    cross_layer: bool,
    /// Seed for random aggregation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EasArgs {
    /// `None` means the dense baseline.
    fn config(&self, n_layers: usize) -> Result<Option<EasConfig>, Error> {
        let stage = match (self.stage, self.cross_layer) {
            (Some(s), _) => Some(s),
            (None, true) => Some(n_layers),
            (None, false) => None,
        };
        let eas = match (stage, self.sparsity) {
            (None, None) => return Ok(None),
            (None, Some(_)) => {
                return Err(Error::Config("stage: required with --sparsity".into()))
            }
            (Some(stage), s) => EasConfig {
                stage,
                sparsity: s.unwrap_or(0.0),
                aggregation: self.aggregation,
                cross_layer: self.cross_layer,
                rng_seed: self.seed,
            },
        };
        eas.validate(n_layers)?;
        Ok(Some(eas))
    }
}

#[derive(Args)]
struct TimingArgs {
    /// Timed repeats per utterance (median is reported).
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Skip wall-clock measurement (rtf fields become 0).
    #[arg(long)]
    no_timing: bool,
}

impl TimingArgs {
    fn options(&self, budget: DecodeBudget) -> Result<EvalOptions, Error> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats: must be positive".into()));
        }
        Ok(EvalOptions {
            budget,
            threads: threads_from_env(),
            timing: !self.no_timing,
            repeats: self.repeats,
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eas: EasArgs,
    #[command(flatten)]
    timing: TimingArgs,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    timing: TimingArgs,
    #[arg(long, default_value = "stages=1..L;sparsities=0.0:0.9:0.1")]
    grid: String,
    #[arg(long, default_value = "mean")]
    aggregation: Aggregation,
    #[arg(long)]
    cross_layer: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.json, table.txt and scatter.csv.
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 4 when no configuration meets the accuracy constraint.
    #[arg(long)]
    require_admissible: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    stage: usize,
    /// Comma-separated sparsities.
    #[arg(long, default_value = "0.0,0.5,0.9")]
    sparsities: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Directory for timing.csv and token_growth.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eas: EasArgs,
    /// Comma-separated group sizes.
    #[arg(long, default_value = "10,50,100,300")]
    group_sizes: String,
    /// Shuffle utterances with this seed before partitioning.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    /// Directory holding the exported bundle.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Core(Error),
    NoAdmissible,
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<(), Error> {
    match out {
        Some(p) => write_file(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{field}: bad value {v:?}")))
        })
        .collect()
}

fn gen_fixtures(a: GenArgs) -> Result<(), Failure> {
    let paths = write_fixtures(&a.out, a.preset, a.weights, a.seed, a.n_examples)?;
    eprintln!(
        "wrote {}, {}, {}",
        paths.model.display(),
        paths.features.display(),
        paths.manifest.display()
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let (model, data) = a.data.load()?;
    let eas = a.eas.config(model.config.n_encoder_layers)?;
    let opts = a.timing.options(a.data.budget()?)?;
    let label = eas.map_or(ConfigLabel::Baseline, ConfigLabel::Eas);
    let record = evaluate(&model, &data, label, &opts)?;
    let json = serde_json::to_string_pretty(&record).map_err(Error::from)? + "\n";
    emit(a.out.as_deref(), &json)?;
    Ok(())
}

fn search(a: SearchArgs) -> Result<(), Failure> {
    let (model, data) = a.data.load()?;
    let n_layers = model.config.n_encoder_layers;
    let grid = SearchGrid::parse(&a.grid, n_layers)?;
    let opts = GridOptions {
        eval: a.timing.options(a.data.budget()?)?,
        aggregation: a.aggregation,
        cross_layer: a.cross_layer,
        seed: a.seed,
    };
    let records = run_grid(&model, &data, &grid, &opts)?;
    let report = select_constrained(&records, &records[0])?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    let table = format_table(&report);
    write_file(&a.out.join("report.json"), &json)?;
    write_file(&a.out.join("table.txt"), &table)?;
    write_file(&a.out.join("scatter.csv"), &scatter_csv(&report))?;
    print!("{table}");
    if a.require_admissible && report.selection.no_admissible_configuration {
        return Err(Failure::NoAdmissible);
    }
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<(), Failure> {
    let (model, data) = a.data.load()?;
    let budget = a.data.budget()?;
    if a.repeats == 0 {
        return Err(Error::Config("repeats: must be positive".into()).into());
    }
    let sparsities: Vec<f64> = parse_list("sparsities", &a.sparsities)?;
    if sparsities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sparsities: must be ascending".into()).into());
    }
    let mut rows = vec![(
        ConfigLabel::Baseline.to_string(),
        profile_dataset(&model, &data, None, budget, a.repeats)?,
    )];
    for &s in &sparsities {
        let eas = EasConfig::new(a.stage, s);
        eas.validate(model.config.n_encoder_layers)?;
        rows.push((
            ConfigLabel::Eas(eas).to_string(),
            profile_dataset(&model, &data, Some(&eas), budget, a.repeats)?,
        ));
    }
    let curve = token_growth_curve(&model, &data, a.stage, &sparsities, budget, threads_from_env())?;
    write_file(&a.out.join("timing.csv"), &samples_csv(&rows))?;
    write_file(&a.out.join("token_growth.csv"), &token_growth_csv(&curve))?;
    for (label, t) in &rows {
        println!(
            "{label:<12} stem {:.6}s  encoder {:.6}s  decoder {:.6}s (medians)",
            t.median_stem(),
            t.median_encoder(),
            t.median_decoder()
        );
    }
    Ok(())
}

fn stability(a: StabilityArgs) -> Result<(), Failure> {
    let (model, data) = a.data.load()?;
    let eas = a
        .eas
        .config(model.config.n_encoder_layers)?
        .ok_or_else(|| Error::Config("stage: stability needs --stage and --sparsity".into()))?;
    let sizes: Vec<usize> = parse_list("group-sizes", &a.group_sizes)?;
    let pairs = correctness_pairs(&model, &data, &eas, a.data.budget()?, threads_from_env())?;
    let rows = stability_analysis(&pairs, &sizes, a.shuffle_seed)?;
    emit(a.out.as_deref(), &stability_csv(&rows))?;
    match smallest_stable_size(&rows, STABILITY_TOLERANCE) {
        Some(n) => eprintln!("smallest size with std <= {STABILITY_TOLERANCE}: {n}"),
        None => eprintln!("no size has std <= {STABILITY_TOLERANCE}"),
    }
    Ok(())
}

fn crossval(a: CrossvalArgs) -> Result<(), Failure> {
    let report = crossval_bundle(&a.bundle)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    emit(a.out.as_deref(), &json)?;
    eprintln!(
        "{} checks over {} clips x {} layers",
        report.checks.len(),
        report.clips(),
        report.layers()
    );
    if !report.passed() {
        return Err(Failure::Mismatch("exported values disagree".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenFixtures(a) => gen_fixtures(a),
        Command::Run(a) => run(a),
        Command::Search(a) => search(a),
        Command::Profile(a) => profile(a),
        Command::Stability(a) => stability(a),
        Command::Crossval(a) => crossval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NoAdmissible) => {
            eprintln!("error: no admissible configuration");
            ExitCode::from(EXIT_NO_ADMISSIBLE)
        }
        Err(Failure::Mismatch(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            })
        }
    }
}

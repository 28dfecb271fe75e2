//! `lccmkit` command line: design, simulate, estimate, analyze, predict.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lccmkit::analysis::{
    class_profile, descriptive_shares, opt_out_curve, posterior_membership, scaled_table, value_of_crowding,
    CrowdingCoefficients, DEFAULT_CURVE_IVT,
};
use lccmkit::design::{generate, DesignConfig};
use lccmkit::estimation::{fit, FitOptions};
use lccmkit::io::{read_dataset_file, read_json, write_dataset_file, write_design, write_json, write_table};
use lccmkit::schema::{Schema, CROWD, INFECT};
use lccmkit::simulate::{simulate_dataset, SimulationConfig};
use lccmkit::validate::validate_dataset;
use lccmkit::{builtin, ChoiceRule, Error, FitResult, ModelSpec, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "lccmkit", version, about = "Latent class choice models for ranked stated-choice data")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LCCMKIT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate blocks of choice situations.
    Design(DesignArgs),
    /// Simulate a ranked-choice panel from a generator model.
    Simulate(SimulateArgs),
    /// Estimate a model by maximum likelihood.
    Estimate(EstimateArgs),
    /// Values of crowding, scaled impacts, posteriors and descriptive shares.
    Analyze(AnalyzeArgs),
    /// Opt-out probability curves over infection levels.
    Predict(PredictArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    /// JSON design configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Generator model: JSON path or built-in name. Initial values are the
    /// true parameters.
    #[arg(long, default_value = builtin::PAPER_2CLASS_TABLE3)]
    pub model: String,
    /// JSON simulation configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub respondents: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the true class of each respondent to this CSV.
    #[arg(long)]
    pub classes_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleArg {
    Top,
    Rank,
}

impl From<RuleArg> for ChoiceRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Top => ChoiceRule::Top,
            RuleArg::Rank => ChoiceRule::Rank,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model spec: JSON path or built-in name.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 20)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Top)]
    pub rule: RuleArg,
    /// Reference log-likelihood for adjusted rho-squared.
    #[arg(long, allow_negative_numbers = true)]
    pub initial_ll: Option<f64>,
    /// Sandwich standard errors.
    #[arg(long)]
    pub robust: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Dataset for posteriors, class profiles and descriptive shares.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the CSV tables.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Waiting time of both trains.
    #[arg(long, default_value_t = 12.0)]
    pub wt: f64,
    /// Infection levels, comma separated (default: every declared level).
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    /// Crowding levels, comma separated (default: every declared level).
    #[arg(long, value_delimiter = ',')]
    pub crowding: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_CURVE_IVT)]
    pub ivt: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub options: serde_json::Value,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_else(|| OsString::from("out"));
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// A path to a JSON spec, or the name of a built-in model.
pub fn load_model_spec(source: &str) -> Result<ModelSpec> {
    let path = Path::new(source);
    let spec: ModelSpec = if path.is_file() {
        read_json(path)?
    } else {
        builtin::by_name(source)
            .map_err(|_| Error::Config(format!("`{source}` is neither a model file nor a built-in model")))?
    };
    spec.validate()?;
    Ok(spec)
}

fn model_inputs(source: &str) -> Result<Vec<FileDigest>> {
    let path = Path::new(source);
    Ok(if path.is_file() { vec![digest(path)?] } else { vec![] })
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_table(BufWriter::new(fs::File::create(path)?), header, rows)
}

fn run_design(args: &DesignArgs) -> Result<RunManifest> {
    let mut config: DesignConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => DesignConfig::default(),
    };
    if let Some(b) = args.blocks {
        config.n_blocks = b;
    }
    if let Some(b) = args.block_size {
        config.block_size = b;
    }
    if let Some(s) = args.seed {
        config.rng_seed = s;
    }
    let blocks = generate(&config)?;
    write_design(BufWriter::new(fs::File::create(&args.out)?), &blocks, &config.schema)?;
    Ok(RunManifest {
        subcommand: "design",
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs: args.config.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: vec![args.out.display().to_string()],
        seed: Some(config.rng_seed),
        options: json!({ "n_blocks": config.n_blocks, "block_size": config.block_size }),
    })
}

fn run_simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let generator = load_model_spec(&args.model)?;
    let mut config: SimulationConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimulationConfig::default(),
    };
    if let Some(n) = args.respondents {
        config.n_respondents = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let panel = simulate_dataset(&generator, &config)?;
    write_dataset_file(&args.out, &panel.dataset, &generator.schema)?;
    let mut outputs = vec![args.out.display().to_string()];
    if let Some(path) = &args.classes_out {
        let rows: Vec<Vec<String>> = panel
            .dataset
            .respondents
            .iter()
            .zip(&panel.classes)
            .map(|(r, c)| vec![r.id.clone(), c.to_string(), generator.classes[*c].name.clone()])
            .collect();
        write_csv(path, &["respondent_id", "class_index", "class_name"], &rows)?;
        outputs.push(path.display().to_string());
    }
    let mut inputs = model_inputs(&args.model)?;
    if let Some(p) = &args.config {
        inputs.push(digest(p)?);
    }
    Ok(RunManifest {
        subcommand: "simulate",
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs,
        outputs,
        seed: Some(config.seed),
        options: serde_json::to_value(&config)?,
    })
}

fn run_estimate(args: &EstimateArgs) -> Result<RunManifest> {
    let spec = load_model_spec(&args.model)?;
    let data = read_dataset_file(&args.data, &spec.schema)?;
    let report = validate_dataset(&data, &spec);
    if !report.is_empty() {
        let first: Vec<String> = report
            .violations
            .iter()
            .take(5)
            .map(|v| format!("respondent {}: {}", v.respondent_id, v.message))
            .collect();
        return Err(Error::Data(format!(
            "{} problems in the dataset, first: {}",
            report.violations.len(),
            first.join("; ")
        )));
    }
    let options = FitOptions {
        starts: args.starts,
        seed: args.seed,
        tolerance: args.tol,
        max_iter: args.max_iter,
        rule: args.rule.into(),
        initial_ll: args.initial_ll,
        robust: args.robust,
        ..Default::default()
    };
    let mut inputs = vec![digest(&args.data)?];
    inputs.extend(model_inputs(&args.model)?);
    let manifest = RunManifest {
        subcommand: "estimate",
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs,
        outputs: vec![args.out.display().to_string()],
        seed: Some(args.seed),
        options: serde_json::to_value(&options)?,
    };
    match fit(&data, &spec, &options) {
        Ok(result) => {
            write_json(&args.out, &result)?;
            Ok(manifest)
        }
        Err(Error::NotConverged { starts, best_ll, best }) => {
            // keep the best local solution for inspection
            write_json(&args.out, &best)?;
            write_json(manifest_path(&args.out), &manifest)?;
            Err(Error::NotConverged { starts, best_ll, best })
        }
        Err(e) => Err(e),
    }
}

fn run_analyze(args: &AnalyzeArgs) -> Result<RunManifest> {
    let result: FitResult = read_json(&args.fit)?;
    let full = result.full_values()?;
    let spec = &result.model;
    fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = args.out.join(name);
        write_csv(&path, header, &rows)?;
        outputs.push(path.display().to_string());
        Ok(())
    };

    let mut rows = Vec::new();
    let mut averages = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        let Ok(coef) = CrowdingCoefficients::from_model(spec, &full, c) else {
            continue;
        };
        let table = value_of_crowding(&coef)?;
        for s in &table.segments {
            rows.push(vec![
                class.name.clone(),
                fmt(s.from_persons),
                fmt(s.to_persons),
                fmt(s.value),
                s.interpolated.to_string(),
            ]);
        }
        averages.push(vec![class.name.clone(), fmt(table.average)]);
    }
    emit(
        "crowding_values.csv",
        &["class", "from_persons", "to_persons", "minutes_per_person", "interpolated"],
        rows,
    )?;
    emit("crowding_average.csv", &["class", "minutes_per_person"], averages)?;

    let scaled = scaled_table(spec, &full)?;
    let rows = scaled
        .iter()
        .map(|r| {
            let est = spec.resolve(r.class_index, &r.parameter).map(|i| &result.parameters[i]);
            vec![
                r.class_name.clone(),
                r.parameter.clone(),
                if r.membership { "membership" } else { "choice" }.into(),
                fmt(r.value),
                opt(est.and_then(|e| e.std_error)),
                opt(est.and_then(|e| e.p_value)),
                opt(r.scaled),
            ]
        })
        .collect();
    emit(
        "scaled.csv",
        &["class", "parameter", "model", "coefficient", "std_error", "p_value", "scaled"],
        rows,
    )?;

    let mut inputs = vec![digest(&args.fit)?];
    if let Some(data_path) = &args.data {
        inputs.push(digest(data_path)?);
        let data = read_dataset_file(data_path, &spec.schema)?;
        let post = posterior_membership(&result, &data)?;
        let mut header = vec!["respondent_id".to_string()];
        header.extend(spec.classes.iter().map(|c| c.name.clone()));
        let rows = data
            .respondents
            .iter()
            .zip(&post)
            .map(|(r, h)| std::iter::once(r.id.clone()).chain(h.iter().map(|v| fmt(*v))).collect())
            .collect();
        emit("posteriors.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), rows)?;

        let mut rows = Vec::new();
        for name in data.covariate_names() {
            for d in class_profile(&post, &data.covariate_values(&name))? {
                for (value, share) in &d.histogram {
                    rows.push(vec![
                        name.clone(),
                        spec.classes[d.class_index].name.clone(),
                        fmt(d.mean),
                        fmt(*value),
                        fmt(*share),
                    ]);
                }
            }
        }
        emit("class_profiles.csv", &["covariate", "class", "weighted_mean", "value", "share"], rows)?;

        let shares = descriptive_shares(&data)?;
        emit(
            "descriptive.csv",
            &["statistic", "value"],
            vec![
                vec!["respondents".into(), shares.respondents.to_string()],
                vec!["always_opt_out".into(), fmt(shares.always_opt_out)],
                vec!["never_opt_out".into(), fmt(shares.never_opt_out)],
                vec!["always_less_crowded".into(), fmt(shares.always_less_crowded)],
                vec!["always_more_crowded".into(), fmt(shares.always_more_crowded)],
                vec!["trend_increases".into(), shares.trend.increases.to_string()],
                vec!["trend_decreases".into(), shares.trend.decreases.to_string()],
                vec!["trend_sign_test_p".into(), fmt(shares.trend.p_value)],
                vec!["trend_slope".into(), fmt(shares.trend.slope)],
            ],
        )?;
        let rows = shares
            .crowded_curve
            .iter()
            .map(|p| vec![fmt(p.extra_wait_per_person), p.observations.to_string(), fmt(p.share_crowded)])
            .collect();
        emit(
            "crowded_curve.csv",
            &["extra_wait_per_person", "observations", "share_crowded"],
            rows,
        )?;
    }
    Ok(RunManifest {
        subcommand: "analyze",
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs,
        outputs,
        seed: None,
        options: json!({}),
    })
}

fn levels(schema: &Schema, attribute: &str) -> Result<Vec<f64>> {
    Ok(schema.require(attribute)?.levels.clone())
}

fn run_predict(args: &PredictArgs) -> Result<RunManifest> {
    let result: FitResult = read_json(&args.fit)?;
    let full = result.full_values()?;
    let spec = &result.model;
    let grid = if args.grid.is_empty() { levels(&spec.schema, INFECT)? } else { args.grid.clone() };
    let crowding = if args.crowding.is_empty() {
        levels(&spec.schema, CROWD)?
    } else {
        args.crowding.clone()
    };
    let mut rows = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        for &crowd in &crowding {
            let p = opt_out_curve(spec, &full, c, crowd, args.wt, &grid, args.ivt)?;
            for (infect, p) in grid.iter().zip(p) {
                rows.push(vec![class.name.clone(), fmt(crowd), fmt(args.wt), fmt(*infect), fmt(p)]);
            }
        }
    }
    write_csv(&args.out, &["class", "crowding", "wt", "infect", "p_opt_out"], &rows)?;
    Ok(RunManifest {
        subcommand: "predict",
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs: vec![digest(&args.fit)?],
        outputs: vec![args.out.display().to_string()],
        seed: None,
        options: serde_json::to_value(args)?,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let (manifest, out) = match &cli.command {
        Command::Design(a) => (run_design(a)?, &a.out),
        Command::Simulate(a) => (run_simulate(a)?, &a.out),
        Command::Estimate(a) => (run_estimate(a)?, &a.out),
        Command::Analyze(a) => (run_analyze(a)?, &a.out.join("analysis")),
        Command::Predict(a) => (run_predict(a)?, &a.out),
    };
    write_json(manifest_path(out), &manifest)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on a domain error (reported as JSON on stderr), 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            1
        }
    }
}

//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage, input or configuration errors, 2
//! when the data cannot identify the model (uninformative labels, a
//! degenerate regime, or degenerate inference).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{fit_binary, fit_continuous, FitOptions, FitResult};
use crate::inference::{coefficient_names, infer_binary, infer_continuous, wald_table, CoefficientTable};
use crate::model::{Bandwidth, BinaryDataset, ContinuousDataset};
use crate::oracle::{oracle_binary_1d, oracle_continuous_1d};
use crate::simulation::{
    gen_binary, gen_continuous, run_mc_sweep, run_rate_check, write_rate_check, write_report, BandwidthSpec,
    MCConfig,
};

/// Version of the `result.json` layout.
pub const RESULT_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "changeplane", version, about = "Kernel-smoothed change-plane regression and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV file and write coefficients.csv and result.json.
    Fit(FitArgs),
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run a Monte-Carlo experiment from a JSON config.
    Mc(McArgs),
    /// Run a Monte-Carlo experiment at two sample sizes and compare spreads.
    RateCheck(RateCheckArgs),
    /// Exact brute-force fit of the unsmoothed criterion (two Q columns).
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Continuous,
    Binary,
}

#[derive(Debug, Args)]
pub struct ColumnArgs {
    /// Input CSV with a header row.
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: Model,
    /// Response column.
    #[arg(long)]
    pub response: String,
    /// Regression covariates (continuous model), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Vec<String>,
    /// Threshold covariates, comma separated; the first is the anchored
    /// coordinate.
    #[arg(long, value_delimiter = ',', required = true)]
    pub q_cols: Vec<String>,
    /// Multiply a column after parsing, e.g. `gdp=1e-4`. Repeatable.
    #[arg(long = "scale", value_parser = parse_scale)]
    pub scale: Vec<(String, f64)>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub columns: ColumnArgs,
    /// Bandwidth.
    #[arg(long, conflicts_with = "sigma_exponent", required_unless_present = "sigma_exponent")]
    pub sigma: Option<f64>,
    /// Bandwidth `n^(-a)`.
    #[arg(long)]
    pub sigma_exponent: Option<f64>,
    /// Binary model `γ`; defaults to the label mean.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with fit options; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: Model,
    #[arg(long)]
    pub n: usize,
    /// Regression dimension (continuous).
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    /// Dimension of Q; defaults to 2 (continuous) or 3 (binary).
    #[arg(long)]
    pub d: Option<usize>,
    /// Free plane coordinates; defaults to 0.5 (continuous) or 0.5,-0.5
    /// (binary).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub psi_tilde: Option<Vec<f64>>,
    /// Defaults to all ones.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta: Option<Vec<f64>>,
    /// Defaults to all ones.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0.25)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 0.75)]
    pub beta0: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// JSON Monte-Carlo config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RateCheckArgs {
    /// JSON Monte-Carlo config with a single bandwidth exponent.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub n_a: usize,
    #[arg(long)]
    pub n_b: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub columns: ColumnArgs,
    /// Binary model `γ`; defaults to the label mean.
    #[arg(long)]
    pub gamma: Option<f64>,
}

fn parse_scale(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected column=factor, got `{s}`"))?;
    let factor: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("`{value}` is not a number"))?;
    if !(factor.is_finite() && factor != 0.0) {
        return Err(format!("scale for `{name}` must be finite and nonzero"));
    }
    Ok((name.trim().to_string(), factor))
}

/// Column selection for [`read_csv`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColumnSpec {
    pub response: String,
    pub x_cols: Vec<String>,
    pub q_cols: Vec<String>,
    pub scale: Vec<(String, f64)>,
}

impl ColumnSpec {
    fn validate(&self) -> Result<()> {
        if self.q_cols.is_empty() {
            return Err(Error::invalid("at least one Q column is required"));
        }
        let mut names: Vec<&String> = std::iter::once(&self.response)
            .chain(&self.x_cols)
            .chain(&self.q_cols)
            .collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("column `{}` is selected twice", w[0])));
        }
        for (name, factor) in &self.scale {
            if !(factor.is_finite() && *factor != 0.0) {
                return Err(Error::invalid(format!("scale for `{name}` must be finite and nonzero")));
            }
            if !names.contains(&name) {
                return Err(Error::invalid(format!("scaled column `{name}` is not selected")));
            }
        }
        Ok(())
    }
}

/// Parsed CSV columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Rows dropped for a missing or non-numeric selected field.
    pub dropped: usize,
}

impl CsvData {
    pub fn continuous(self) -> Result<ContinuousDataset> {
        ContinuousDataset::new(self.y, self.x, self.q)
    }

    pub fn binary(self) -> Result<BinaryDataset> {
        BinaryDataset::new(self.y, self.q)
    }
}

fn parse_field(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads the selected columns. Rows with a missing or non-numeric selected
/// field are dropped and counted; scales are applied after parsing. With
/// `binary` the response must be 0 or 1.
pub fn read_csv(path: &Path, spec: &ColumnSpec, binary: bool) -> Result<CsvData> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = reader.headers()?.clone();
    let index = |name: &String| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let yi = index(&spec.response)?;
    let xi = spec.x_cols.iter().map(index).collect::<Result<Vec<_>>>()?;
    let qi = spec.q_cols.iter().map(index).collect::<Result<Vec<_>>>()?;
    let factor = |name: &String| {
        spec.scale
            .iter()
            .filter(|(n, _)| n == name)
            .fold(1.0, |acc, (_, f)| acc * f)
    };
    let fy = factor(&spec.response);
    let fx: Vec<f64> = spec.x_cols.iter().map(factor).collect();
    let fq: Vec<f64> = spec.q_cols.iter().map(factor).collect();

    let (mut ys, mut xs, mut qs) = (Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let get = |i: usize| record.get(i).and_then(parse_field);
        let y = get(yi);
        let x: Option<Vec<f64>> = xi.iter().map(|&i| get(i)).collect();
        let q: Option<Vec<f64>> = qi.iter().map(|&i| get(i)).collect();
        let (Some(y), Some(x), Some(q)) = (y, x, q) else {
            dropped += 1;
            continue;
        };
        let y = y * fy;
        if binary && y != 0.0 && y != 1.0 {
            return Err(Error::invalid(format!(
                "binary response must be 0 or 1, got {y} on data line {}",
                line + 1
            )));
        }
        ys.push(y);
        xs.extend(x.iter().zip(&fx).map(|(v, f)| v * f));
        qs.extend(q.iter().zip(&fq).map(|(v, f)| v * f));
    }
    let n = ys.len();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    Ok(CsvData {
        y: DVector::from_vec(ys),
        x: DMatrix::from_row_slice(n, spec.x_cols.len(), &xs),
        q: DMatrix::from_row_slice(n, spec.q_cols.len(), &qs),
        dropped,
    })
}

fn column_spec(c: &ColumnArgs) -> Result<ColumnSpec> {
    if c.model == Model::Continuous && c.x_cols.is_empty() {
        return Err(Error::invalid("the continuous model needs --x-cols"));
    }
    if c.model == Model::Binary && !c.x_cols.is_empty() {
        return Err(Error::invalid("the binary model takes no --x-cols"));
    }
    Ok(ColumnSpec {
        response: c.response.clone(),
        x_cols: c.x_cols.clone(),
        q_cols: c.q_cols.clone(),
        scale: c.scale.clone(),
    })
}

fn dropped_warning(dropped: usize) -> Option<String> {
    (dropped > 0).then(|| format!("dropped {dropped} rows with missing or non-numeric values"))
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    schema: u32,
    model: Model,
    n: usize,
    dropped_rows: usize,
    response: &'a str,
    x_cols: &'a [String],
    q_cols: &'a [String],
    scale: Vec<ScaleEntry<'a>>,
    sigma: f64,
    bandwidth: Bandwidth,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    loss: f64,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
    start_index: usize,
    options: FitOptions,
    coefficients: &'a CoefficientTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_eps2: Option<f64>,
    covariance: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ScaleEntry<'a> {
    column: &'a str,
    factor: f64,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn fit_options(args: &FitArgs) -> Result<FitOptions> {
    let mut opts = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.into_inner().to_string(),
            })?
        }
        None => FitOptions::default(),
    };
    if let Some(s) = args.starts {
        opts.n_starts = s;
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    opts.validate()?;
    Ok(opts)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let c = &args.columns;
    let spec = column_spec(c)?;
    let opts = fit_options(args)?;
    let binary = c.model == Model::Binary;
    if !binary && args.gamma.is_some() {
        return Err(Error::invalid("--gamma applies to the binary model only"));
    }
    let data = read_csv(&c.data, &spec, binary)?;
    let dropped = data.dropped;
    let n = data.y.len();
    let bw = match (args.sigma, args.sigma_exponent) {
        (Some(s), None) => Bandwidth::explicit(s)?,
        (None, Some(a)) => Bandwidth::from_exponent(n, a)?,
        _ => return Err(Error::invalid("give exactly one of --sigma and --sigma-exponent")),
    };

    let mut warnings: Vec<String> = dropped_warning(dropped).into_iter().collect();
    let (table, report_fit, inference, gamma) = match c.model {
        Model::Continuous => {
            let ds = data.continuous()?;
            let fit = fit_continuous(&ds, &bw, &opts)?;
            let inference = infer_continuous(&fit, &ds)?;
            let table = wald_table(&inference, &coefficient_names(&c.x_cols, &c.q_cols))?;
            (table, summary_of(&fit), inference, None)
        }
        Model::Binary => {
            let ds = data.binary()?;
            let fit = fit_binary(&ds, &bw, args.gamma, &opts)?;
            let inference = infer_binary(&fit, &ds)?;
            let names: Vec<String> = c.q_cols.iter().skip(1).map(|s| format!("psi_{s}")).collect();
            let table = wald_table(&inference, &names)?;
            (table, summary_of(&fit), inference, Some(fit.theta.gamma))
        }
    };
    warnings.extend(report_fit.warnings.iter().cloned());
    warnings.extend(inference.warnings.iter().cloned());

    fs::create_dir_all(&args.out)?;
    table.write_csv(fs::File::create(args.out.join("coefficients.csv"))?)?;
    let report = FitReport {
        schema: RESULT_SCHEMA,
        model: c.model,
        n,
        dropped_rows: dropped,
        response: &c.response,
        x_cols: &c.x_cols,
        q_cols: &c.q_cols,
        scale: c
            .scale
            .iter()
            .map(|(column, factor)| ScaleEntry {
                column,
                factor: *factor,
            })
            .collect(),
        sigma: bw.sigma(),
        bandwidth: bw,
        gamma,
        loss: report_fit.loss,
        grad_norm: report_fit.grad_norm,
        converged: report_fit.converged,
        iterations: report_fit.iterations,
        start_index: report_fit.start_index,
        options: opts,
        coefficients: &table,
        sigma_eps2: inference.sigma_eps2,
        covariance: matrix_rows(&inference.cov),
        warnings,
    };
    write_json(&args.out.join("result.json"), &report)
}

struct FitSummary {
    loss: f64,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
    start_index: usize,
    warnings: Vec<String>,
}

fn summary_of<T>(fit: &FitResult<T>) -> FitSummary {
    FitSummary {
        loss: fit.loss,
        grad_norm: fit.grad_norm,
        converged: fit.converged,
        iterations: fit.iterations,
        start_index: fit.start_index,
        warnings: fit.warnings.clone(),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut w = csv::Writer::from_path(&args.out)?;
    match args.model {
        Model::Continuous => {
            let d = args.d.unwrap_or(2);
            let psi = args.psi_tilde.clone().unwrap_or_else(|| vec![0.5; d.saturating_sub(1)]);
            let beta = args.beta.clone().unwrap_or_else(|| vec![1.0; args.p]);
            let delta = args.delta.clone().unwrap_or_else(|| vec![1.0; args.p]);
            let ds = gen_continuous(args.n, args.p, d, &beta, &delta, &psi, args.noise_sd, args.seed)?;
            let mut header = vec!["y".to_string()];
            header.extend((1..=args.p).map(|j| format!("x{j}")));
            header.extend((1..=d).map(|j| format!("q{j}")));
            w.write_record(&header)?;
            for i in 0..ds.n() {
                let mut row = vec![ds.y()[i].to_string()];
                row.extend(ds.x().row(i).iter().map(|v| v.to_string()));
                row.extend(ds.q().row(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        Model::Binary => {
            if args.beta.is_some() || args.delta.is_some() {
                return Err(Error::invalid("--beta/--delta apply to the continuous model only"));
            }
            let d = args.d.unwrap_or(3);
            let psi = args.psi_tilde.clone().unwrap_or_else(|| {
                (1..d).map(|j| if j % 2 == 1 { 0.5 } else { -0.5 }).collect()
            });
            let ds = gen_binary(args.n, d, &psi, args.alpha0, args.beta0, args.seed)?;
            let mut header = vec!["y".to_string()];
            header.extend((1..=d).map(|j| format!("q{j}")));
            w.write_record(&header)?;
            for i in 0..ds.n() {
                let mut row = vec![ds.y()[i].to_string()];
                row.extend(ds.q().row(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn load_config(path: &Path) -> Result<MCConfig> {
    MCConfig::from_json(&fs::read_to_string(path)?)
}

fn cmd_mc(args: &McArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let reports = run_mc_sweep(&cfg)?;
    match &cfg.bandwidth {
        BandwidthSpec::Exponents(list) => {
            for (a, report) in list.iter().zip(&reports) {
                write_report(report, &args.out.join(format!("a_{a}")))?;
            }
        }
        _ => write_report(&reports[0], &args.out)?,
    }
    Ok(())
}

fn cmd_rate_check(args: &RateCheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let check = run_rate_check(&cfg, args.n_a, args.n_b)?;
    write_rate_check(&check, &args.out)?;
    write_report(&check.report_a, &args.out.join(format!("n_{}", args.n_a)))?;
    write_report(&check.report_b, &args.out.join(format!("n_{}", args.n_b)))?;
    writeln!(out, "coord,observed_ratio,predicted_ratio")?;
    for row in &check.rows {
        writeln!(out, "{},{},{}", row.coord, row.observed_ratio, row.predicted_ratio)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleOutput {
    psi_tilde: f64,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    dropped_rows: usize,
}

fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> Result<()> {
    let c = &args.columns;
    let spec = column_spec(c)?;
    let binary = c.model == Model::Binary;
    let data = read_csv(&c.data, &spec, binary)?;
    let dropped = data.dropped;
    let result = match c.model {
        Model::Continuous => {
            let ds = data.continuous()?;
            let (theta, loss) = oracle_continuous_1d(&ds)?;
            OracleOutput {
                psi_tilde: theta.psi_tilde[0],
                loss,
                beta: Some(theta.beta.as_slice().to_vec()),
                delta: Some(theta.delta.as_slice().to_vec()),
                gamma: None,
                dropped_rows: dropped,
            }
        }
        Model::Binary => {
            let ds = data.binary()?;
            let gamma = crate::estimator::resolve_gamma(&ds, args.gamma)?;
            let (t, loss) = oracle_binary_1d(&ds, gamma)?;
            OracleOutput {
                psi_tilde: t,
                loss,
                beta: None,
                delta: None,
                gamma: Some(gamma),
                dropped_rows: dropped,
            }
        }
    };
    serde_json::to_writer(&mut *out, &result)?;
    writeln!(out)?;
    Ok(())
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UninformativeLabels(_)
        | Error::DegenerateRegime
        | Error::InferenceDegenerate(_)
        | Error::NoStart(_) => 2,
        _ => 1,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mc(a) => cmd_mc(a),
        Command::RateCheck(a) => cmd_rate_check(a, out),
        Command::Oracle(a) => cmd_oracle(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

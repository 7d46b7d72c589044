//! Command-line driver: `train`, `gradcheck` and `bench` over an experiment config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use pbnet::bench::{bench, BenchRow, BENCH_DEPTHS};
use pbnet::engines::EngineKind;
use pbnet::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use pbnet::network::CertificateReport;
use pbnet::training::{train_application, Application, ExperimentConfig, TrainOptions, TrainingLog};

/// Largest image side and unroll count accepted by `gradcheck`.
pub const GRADCHECK_MAX_SIZE: usize = 16;
pub const GRADCHECK_MAX_UNROLLS: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "pbnet", version, about = "Train and check unrolled proximal-gradient networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured application and write logs.
    Train(CommonArgs),
    /// Compare engine gradients with each other and with finite differences.
    Gradcheck(CommonArgs),
    /// Tabulate stored states and operator applications per engine and depth.
    Bench(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON or TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace a config value, e.g. `engine=standard` or `sr.channels=3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record reverse-state residuals against a stored forward pass.
    #[arg(long)]
    pub shadow_diagnostics: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("certificate: {0}")]
    Certificate(String),
    #[error("io: {0}")]
    Io(String),
    #[error("numerics: {0}")]
    Numerics(String),
    #[error("gradcheck: {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Gradcheck(_) => 1,
            CliError::Config(_) => 2,
            CliError::Certificate(_) => 3,
            CliError::Io(_) => 4,
            CliError::Numerics(_) => 5,
        }
    }

    /// `error: <reason>: <detail>` on one line.
    pub fn line(&self) -> String {
        format!("error: {self}").replace(['\n', '\r'], " ")
    }
}

impl From<pbnet::Error> for CliError {
    fn from(e: pbnet::Error) -> Self {
        use pbnet::Error as E;
        if e.is_certificate() {
            return CliError::Certificate(e.to_string());
        }
        match e.root() {
            E::InvalidConfig(_) | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerics(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Parses a config file into a JSON tree. `.toml` files are read as TOML, everything else as JSON.
pub fn read_config_tree(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Sets the dotted `key` to `value`, parsed as JSON when possible and as a string otherwise.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut tree = read_config_tree(&args.config)?;
    for o in &args.overrides {
        apply_override(&mut tree, o)?;
    }
    if let Some(seed) = args.seed {
        apply_override(&mut tree, &format!("seed={seed}"))?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &CommonArgs, default: &str) -> Result<PathBuf, CliError> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerics(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn log_csv(log: &TrainingLog) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,peak_stored_states,operator_applications,grad_norm\n");
    for r in &log.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.test_loss, r.peak_stored_states, r.operator_applications, r.grad_norm
        );
    }
    s
}

pub fn residuals_csv(log: &TrainingLog) -> String {
    let mut s = String::from("epoch,index,checkpoint,recalculated,used\n");
    for t in &log.residual_traces {
        for r in &t.residuals {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.epoch,
                r.index,
                r.checkpoint,
                r.recalculated.map_or(String::new(), |v| v.to_string()),
                r.used
            );
        }
    }
    s
}

#[derive(Debug, Serialize)]
struct NamedValue<'a> {
    name: &'a str,
    value: f64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    application: pbnet::training::ApplicationKind,
    engine: EngineKind,
    epochs: usize,
    initial_test_loss: f64,
    final_train_loss: f64,
    final_test_loss: f64,
    final_test_nrmse: f64,
    parameters: Vec<NamedValue<'a>>,
    certificate: &'a CertificateReport,
    config: &'a ExperimentConfig,
    generated_at_unix: u64,
}

pub fn cmd_train(args: &CommonArgs) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args, "pbnet-train")?;
    write(&dir.join("config.json"), &to_json(&cfg)?)?;
    let app = Application::build(&cfg)?;
    let opts = TrainOptions {
        shadow_diagnostics: args.shadow_diagnostics,
    };
    let (log, _) = train_application(&app, &cfg, &opts)?;
    write(&dir.join("log.csv"), &log_csv(&log))?;
    if args.shadow_diagnostics {
        write(&dir.join("residuals.csv"), &residuals_csv(&log))?;
    }
    let summary = Summary {
        application: cfg.application,
        engine: cfg.engine,
        epochs: cfg.epochs,
        initial_test_loss: log.rows[0].test_loss,
        final_train_loss: log.rows.last().map_or(f64::NAN, |r| r.train_loss),
        final_test_loss: log.final_test_loss(),
        final_test_nrmse: log.final_test_nrmse,
        parameters: log
            .parameter_names
            .iter()
            .zip(&log.final_parameters)
            .map(|(name, &value)| NamedValue { name, value })
            .collect(),
        certificate: &log.certificate,
        config: &cfg,
        generated_at_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    write(&dir.join("summary.json"), &to_json(&summary)?)?;
    Ok(format!("final test loss: {}\n", log.final_test_loss()))
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut s = String::from("parameter,standard,finite_difference,fd_error,memory_efficient_error,hybrid_error\n");
    for p in &report.parameters {
        let _ = writeln!(
            s,
            "{},{},{},{:.3e},{:.3e},{:.3e}",
            p.name, p.standard, p.finite_difference, p.fd_error, p.memory_efficient_error, p.hybrid_error
        );
    }
    s.push_str("layer,kind,input_error,param_error,passed\n");
    for l in &report.layers {
        let _ = writeln!(
            s,
            "{},{},{:.3e},{:.3e},{}",
            l.index, l.kind, l.input_error, l.param_error, l.passed
        );
    }
    let _ = writeln!(
        s,
        "max errors: fd {:.3e} (<= {:e}), memory-efficient {:.3e} (<= {:e}), hybrid {:.3e} (<= {:e})",
        report.max_fd_error,
        report.thresholds.finite_difference,
        report.max_memory_efficient_error,
        report.thresholds.memory_efficient,
        report.max_hybrid_error,
        report.thresholds.hybrid
    );
    s
}

/// Turns a failed report into an error naming the first failing layer, if any.
pub fn gradcheck_verdict(report: &GradcheckReport) -> Result<(), CliError> {
    if report.passed {
        return Ok(());
    }
    if let Some(l) = report.failing_layers().next() {
        return Err(CliError::Gradcheck(format!(
            "layer {} ({}) VJP mismatch: input error {:.3e}, parameter error {:.3e}",
            l.index, l.kind, l.input_error, l.param_error
        )));
    }
    let t = report.thresholds;
    Err(CliError::Gradcheck(format!(
        "max errors fd {:.3e}/{:e}, memory-efficient {:.3e}/{:e}, hybrid {:.3e}/{:e}",
        report.max_fd_error,
        t.finite_difference,
        report.max_memory_efficient_error,
        t.memory_efficient,
        report.max_hybrid_error,
        t.hybrid
    )))
}

pub fn cmd_gradcheck(args: &CommonArgs) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    if cfg.image_size > GRADCHECK_MAX_SIZE || cfg.unrolls > GRADCHECK_MAX_UNROLLS {
        return Err(CliError::Config(format!(
            "gradcheck needs image_size <= {GRADCHECK_MAX_SIZE} and unrolls <= {GRADCHECK_MAX_UNROLLS}"
        )));
    }
    let app = Application::build(&cfg)?;
    let every = cfg.checkpoint_every.unwrap_or((app.network.depth() / 2).max(1));
    let mut opts = GradcheckOptions::new(cfg.inverse_config(), every);
    opts.seed = cfg.seed;
    let report = gradcheck(&app, &opts)?;
    let table = gradcheck_table(&report);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(&dir.join("gradcheck.csv"), &table)?;
    }
    print!("{table}");
    gradcheck_verdict(&report)?;
    Ok("gradcheck: pass\n".into())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{}\n", BenchRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn cmd_bench(args: &CommonArgs) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let app = Application::build(&cfg)?;
    let rows = bench(&app, &BENCH_DEPTHS, cfg.checkpoint_every.unwrap_or(10), cfg.inverse_config())?;
    let csv = bench_csv(&rows);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(&dir.join("bench.csv"), &csv)?;
    }
    Ok(csv)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_values_and_nest() {
        let mut v = json!({"engine": "standard", "sr": {"channels": 4}});
        apply_override(&mut v, "engine=memory-efficient").unwrap();
        apply_override(&mut v, "sr.channels=3").unwrap();
        apply_override(&mut v, "noise_std=0.5").unwrap();
        assert_eq!(v, json!({"engine": "memory-efficient", "sr": {"channels": 3}, "noise_std": 0.5}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "engine.x=1").is_err());
    }

    #[test]
    fn error_lines_are_single_line_with_reason() {
        let e = CliError::Config("bad\nthing".into());
        assert_eq!(e.line(), "error: config: bad thing");
        let e: CliError = pbnet::Error::NotContractive { bound: 1.2 }.into();
        assert!(e.line().starts_with("error: certificate:"));
        assert_ne!(e.exit_code(), 0);
    }
}

mod checks;
mod commands;
mod config;
mod error;
mod manifest;

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::os::unix::net::UnixListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intrinsics4d::distill::{conformance_run, open_streams, serve, EchoProvider, ProviderAddress};

use crate::commands::{parse_time, Job, ProviderChoice, Viewpoint};
use crate::config::JobConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "intrinsics4d", version, about = "Temporally evolving intrinsics: fitting, distillation and rendering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML job configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `io.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Score provider: `analytic` or `external:ADDR`.
    #[arg(long, global = true)]
    provider: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Template mesh sequences and neural state maps.
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Score distillation.
    #[command(subcommand)]
    Distill(DistillCommand),
    /// Renders the field with all intrinsic AOVs.
    Render {
        /// Viewpoint `azimuth=DEG,elev=DEG[,radius=R]`.
        #[arg(long)]
        xi: Viewpoint,
        /// Normalized time in [0, 1].
        #[arg(long, value_parser = parse_time)]
        t: f64,
    },
    /// Extracts the zero level set at time `t` as an OBJ mesh.
    ExportMesh {
        #[arg(long, value_parser = parse_time)]
        t: f64,
        /// Grid cells per axis; `renderer.mesh_resolution` when omitted.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-difference check of field and render gradients.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Runs the fast invariant suites.
    Selfcheck,
    /// Prints the resolved configuration as TOML.
    PrintConfig,
    /// Score-provider wire protocol utilities.
    #[command(subcommand)]
    Provider(ProviderCommand),
}

#[derive(Subcommand, Debug)]
enum TemplateCommand {
    /// Builds or fits the template sequence and its PCA basis.
    Fit,
    /// Computes the neural state map at one view and time.
    Statemap {
        #[arg(long)]
        xi: Viewpoint,
        #[arg(long, value_parser = parse_time)]
        t: f64,
    },
}

#[derive(Subcommand, Debug)]
enum DistillCommand {
    /// Optimizes the field against the configured score provider.
    Run,
}

#[derive(Subcommand, Debug)]
enum ProviderCommand {
    /// Serves the echo provider on stdio, or on `tcp:ADDR` / `unix:PATH`.
    ServeEcho {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Runs the conformance harness against `--provider external:ADDR`.
    Conformance {
        #[arg(long, default_value_t = 40)]
        valid: usize,
        #[arg(long, default_value_t = 100)]
        malformed: usize,
    },
}

fn load_job(global: &GlobalArgs, command: &str) -> Result<Job, CliError> {
    let mut config = JobConfig::load(global.config.as_deref(), std::env::vars())?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(out) = &global.out {
        config.io.out_dir = out.clone();
    }
    if let Some(p) = &global.provider {
        config.distill.provider = p.clone();
    }
    config.distill.provider.parse::<ProviderChoice>()?;
    config.validate()?;
    let config_text = config.to_toml()?;
    Ok(Job {
        config,
        config_text,
        command: command.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Template(TemplateCommand::Fit) => commands::template_fit(&load_job(g, "template fit")?),
        Command::Template(TemplateCommand::Statemap { xi, t }) => {
            commands::template_statemap(&load_job(g, "template statemap")?, xi, *t)
        }
        Command::Distill(DistillCommand::Run) => commands::distill_run(&load_job(g, "distill run")?),
        Command::Render { xi, t } => commands::render(&load_job(g, "render")?, xi, *t),
        Command::ExportMesh { t, resolution } => commands::export_mesh(&load_job(g, "export-mesh")?, *t, *resolution),
        Command::Gradcheck { probes, eps } => {
            let job = load_job(g, "gradcheck")?;
            let r = checks::gradcheck(job.config.field.clone(), job.config.seed, *probes, *eps, 16)?;
            for (name, rep) in [("pointwise", &r.pointwise), ("render", &r.render)] {
                println!("{name} max relative error {:.3e} over {} probes", rep.max_relative_error, rep.probes);
                if let Some((array, i, a, n)) = &rep.worst {
                    println!("  worst: {array}[{i}] analytic {a:.6e} numeric {n:.6e}");
                }
            }
            if r.pointwise.max_relative_error < 1e-4 && r.render.max_relative_error < 1e-3 {
                Ok(())
            } else {
                Err(CliError::Validation("gradient check exceeded its tolerance".into()))
            }
        }
        Command::Selfcheck => {
            load_job(g, "selfcheck")?;
            let results = checks::selfcheck();
            for r in &results {
                println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed == 0 {
                Ok(())
            } else {
                Err(CliError::Validation(format!("{failed} self-check(s) failed")))
            }
        }
        Command::PrintConfig => {
            print!("{}", load_job(g, "print-config")?.config_text);
            Ok(())
        }
        Command::Provider(ProviderCommand::ServeEcho { listen }) => serve_echo(listen.as_deref()),
        Command::Provider(ProviderCommand::Conformance { valid, malformed }) => {
            let job = load_job(g, "provider conformance")?;
            let addr = match job.config.distill.provider.parse::<ProviderChoice>()? {
                ProviderChoice::External(a) => a,
                ProviderChoice::Analytic => {
                    return Err(CliError::Validation("conformance needs --provider external:ADDR".into()))
                }
            };
            let (reader, writer, child) = open_streams(&addr)?;
            let report = conformance_run(reader, writer, *valid, *malformed, [8, 8, 3], [2, 2, 3], job.config.seed)?;
            if let Some(mut c) = child {
                let _ = c.kill();
                let _ = c.wait();
            }
            println!("{}", serde_json::to_string(&report_json(&report))?);
            for v in &report.violations {
                println!("violation: {v}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("{} protocol violation(s)", report.violations.len())))
            }
        }
    }
}

fn report_json(r: &intrinsics4d::distill::ConformanceReport) -> serde_json::Value {
    serde_json::json!({
        "valid_sent": r.valid_sent,
        "malformed_sent": r.malformed_sent,
        "responses": r.responses,
        "errors": r.errors,
        "violations": r.violations.len(),
        "passed": r.passed(),
    })
}

fn serve_echo(listen: Option<&str>) -> Result<(), CliError> {
    let mut provider = EchoProvider;
    match listen.map(str::parse::<ProviderAddress>).transpose()? {
        None => {
            let stdout = std::io::stdout();
            serve(BufReader::new(std::io::stdin()), stdout.lock(), &mut provider)?;
        }
        Some(ProviderAddress::Tcp(addr)) => {
            let listener = TcpListener::bind(&addr)?;
            println!("listening on tcp:{}", listener.local_addr()?);
            std::io::stdout().flush()?;
            for stream in listener.incoming() {
                let s = stream?;
                serve(s.try_clone()?, s, &mut provider)?;
            }
        }
        Some(ProviderAddress::Unix(path)) => {
            let listener = UnixListener::bind(&path)?;
            println!("listening on unix:{path}");
            std::io::stdout().flush()?;
            for stream in listener.incoming() {
                let s = stream?;
                serve(s.try_clone()?, s, &mut provider)?;
            }
        }
        Some(ProviderAddress::Spawn(_)) => {
            return Err(CliError::Validation("serve-echo listens on tcp: or unix: addresses".into()))
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

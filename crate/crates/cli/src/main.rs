use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cogchain_cli::demo::{create_demo_project, DemoOptions};
use cogchain_cli::report::{self, ReportKind};
use cogchain_cli::stages::{run_stage, RunOptions, SourceSelection, Stage};
use cogchain_cli::{CliError, Config, Filter, Project};

#[derive(Parser)]
#[command(name = "cogchain", version, about = "Cognitive-chain timing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Group,
    Semantics,
    Extract,
    Assemble,
    Fit,
    Cv,
    AgentEval,
    Report,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Group => Stage::Group,
            StageArg::Semantics => Stage::Semantics,
            StageArg::Extract => Stage::Extract,
            StageArg::Assemble => Stage::Assemble,
            StageArg::Fit => Stage::Fit,
            StageArg::Cv => Stage::Cv,
            StageArg::AgentEval => Stage::AgentEval,
            StageArg::Report => Stage::Report,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Raw,
    Annotated,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Scatter,
    Table3,
    Table4,
    Matrix,
}

#[derive(clap::Args)]
struct ProjectArgs {
    /// Project directory.
    #[arg(long, default_value = ".")]
    project: PathBuf,
    /// Config file; defaults to <project>/cogchain.toml.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline stage.
    Run {
        stage: StageArg,
        #[command(flatten)]
        project: ProjectArgs,
        /// Restrict to these trace ids (repeatable).
        #[arg(long = "trace")]
        traces: Vec<String>,
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long = "user")]
        users: Vec<String>,
        /// Chain set for fit and cv.
        #[arg(long, value_enum, default_value = "all")]
        source: SourceArg,
        /// Calibration tasks per held-out user (cv).
        #[arg(long)]
        calib_tasks: Option<usize>,
    },
    /// Write one report under reports/.
    Report {
        kind: ReportArg,
        #[arg(long, default_value = ".")]
        project: PathBuf,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value = ".")]
        project: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Create an offline demo project with recorded provider fixtures.
    Demo {
        #[arg(long)]
        project: PathBuf,
        #[arg(long, default_value_t = 4)]
        users: usize,
        #[arg(long, default_value_t = 8)]
        tasks: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
    },
}

fn execute(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Run {
            stage,
            project,
            traces,
            tasks,
            users,
            source,
            calib_tasks,
        } => {
            let config = Config::load(project.config.as_deref(), &project.project)?;
            let opts = RunOptions {
                filter: Filter { traces, tasks, users },
                source: match source {
                    SourceArg::Raw => SourceSelection::Raw,
                    SourceArg::Annotated => SourceSelection::Annotated,
                    SourceArg::All => SourceSelection::All,
                },
                calib_tasks,
            };
            run_stage(&Project::new(project.project), &config, stage.into(), &opts)
        }
        Command::Report { kind, project } => {
            let kind = match kind {
                ReportArg::Scatter => ReportKind::Scatter,
                ReportArg::Table3 => ReportKind::Table3,
                ReportArg::Table4 => ReportKind::Table4,
                ReportArg::Matrix => ReportKind::Matrix,
            };
            report::write_report(&Project::new(project), kind)
        }
        Command::Serve { project, port } => {
            let rt = tokio::runtime::Runtime::new().map_err(CliError::io(&project))?;
            rt.block_on(cogchain_cli::server::serve(Project::new(project.clone()), port))
                .map_err(CliError::io(&project))?;
            Ok(Vec::new())
        }
        Command::Demo {
            project,
            users,
            tasks,
            steps,
            seed,
            noise,
        } => {
            let opts = DemoOptions {
                users,
                tasks,
                steps,
                seed,
                noise,
            };
            create_demo_project(&project, &opts)?;
            Ok(vec![format!(
                "demo project at {}: {} traces, fixtures recorded",
                project.display(),
                users * tasks
            )])
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(lines) => {
            let mut out = std::io::stdout().lock();
            for l in lines {
                // A closed pipe is not a pipeline failure.
                if writeln!(out, "{l}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

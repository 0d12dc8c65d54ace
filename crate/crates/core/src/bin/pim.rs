use clap::{Args, Parser, Subcommand};
use pim::service::{self, AppState, ServiceConfig};
use pim::session::{parse_op_input, LineAnnotation, Op, Session, SessionError, PROJECT_FILE};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pim", version, about = "Image-based modeling from photographs")]
struct Cli {
    /// Project directory.
    #[arg(short = 'C', long, global = true, default_value = ".")]
    project: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty project.
    New { project: PathBuf },
    /// Manage photographs.
    Images {
        #[command(subcommand)]
        command: ImagesCommand,
    },
    /// Apply operators from a JSON Lines file (bare operators or journal records).
    Apply { ops: PathBuf },
    /// Change solver options (journaled) and print the solve report.
    Solve(SolveArgs),
    /// Add line annotations (journaled) and print the calibration report.
    Calibrate {
        /// JSON list of {image, x1, y1, x2, y2, axis}.
        #[arg(long)]
        lines: Option<PathBuf>,
    },
    /// Build the texture atlas into the project directory.
    Texture {
        /// Texels per world unit.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Export the model.
    Export {
        #[arg(long, default_value = "obj")]
        format: String,
        dir: PathBuf,
    },
    /// Print the session report.
    Report,
    /// Serve the HTTP API. The project, if any, is registered as a session.
    Serve {
        #[arg(long, default_value_t = service::DEFAULT_PORT)]
        port: u16,
        /// Address to bind. Anything but loopback exposes an unauthenticated API.
        #[arg(long, default_value = service::DEFAULT_BIND)]
        bind: IpAddr,
        /// Where sessions created over HTTP keep uploaded images.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Rebuild the project state from its journal.
    Replay {
        /// Check the rebuilt state is bit-identical to the saved one instead of saving.
        #[arg(long)]
        verify: bool,
    },
    /// Write a scripted synthetic project.
    Demo {
        /// One of: cuboid, pavilion.
        name: String,
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ImagesCommand {
    Add {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Comma-separated constraint weights, e.g. 1e2,1e4,1e6.
    #[arg(long, value_delimiter = ',')]
    penalty_schedule: Option<Vec<f64>>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn open(dir: &Path) -> Result<Session, SessionError> {
    let (session, warnings) = Session::load(dir)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(session)
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn apply_file(session: &mut Session, path: &Path) -> CliResult {
    let text = std::fs::read_to_string(path)?;
    let mut applied = 0;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (seq, op) = parse_op_input(line.as_bytes()).map_err(|e| format!("{}:{}: {e}", path.display(), line_no + 1))?;
        let next = session.journal().len() as u64;
        if let Some(seq) = seq.filter(|s| *s != next) {
            return Err(format!("{}:{}: record seq {seq}, expected {next}", path.display(), line_no + 1).into());
        }
        session.apply(op).map_err(|e| format!("{}:{}: {}: {e}", path.display(), line_no + 1, e.kind()))?;
        applied += 1;
    }
    println!("applied {applied} operators; journal has {} records", session.journal().len());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let dir = cli.project;
    match cli.command {
        Command::New { project } => {
            if project.join(PROJECT_FILE).exists() {
                return Err(format!("{} already holds a project", project.display()).into());
            }
            Session::new().save(&project)?;
            println!("created {}", project.display());
        }
        Command::Images { command: ImagesCommand::Add { files } } => {
            let mut s = open(&dir)?;
            for f in files {
                let bytes = std::fs::read(&f)?;
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("image.png");
                let (id, applied) = s.add_image_bytes(name, &bytes)?;
                let e = &s.model().images[&id];
                let note = if applied.is_none() { " (already present)" } else { "" };
                println!("{id}: {} {}x{}{note}", f.display(), e.width, e.height);
            }
            s.save(&dir)?;
        }
        Command::Apply { ops } => {
            let mut s = open(&dir)?;
            let result = apply_file(&mut s, &ops);
            // Operators applied before a failure are kept.
            s.save(&dir)?;
            result?;
        }
        Command::Solve(args) => {
            let mut s = open(&dir)?;
            if args.max_iters.is_some() || args.tol.is_some() || args.penalty_schedule.is_some() {
                let mut options = s.model().solve_options.clone();
                if let Some(n) = args.max_iters {
                    options.max_iterations = n;
                }
                if let Some(t) = args.tol {
                    options.tolerance = t;
                }
                if let Some(p) = args.penalty_schedule {
                    options.constraint_weight_schedule = p;
                }
                s.apply(Op::SetSolveOptions { options })?;
                s.save(&dir)?;
            }
            if let Some(e) = &s.derived().solve_error {
                eprintln!("solve failed: {e}");
            }
            print_json(&s.solve_report())?;
        }
        Command::Calibrate { lines } => {
            let mut s = open(&dir)?;
            if let Some(path) = lines {
                let lines: Vec<LineAnnotation> = serde_json::from_slice(&std::fs::read(&path)?)?;
                s.apply(Op::AddLines { lines })?;
                s.save(&dir)?;
            }
            print_json(&s.derived().calibration)?;
        }
        Command::Texture { density } => {
            let mut s = open(&dir)?;
            if let Some(d) = density {
                s.config.atlas.texel_density = d;
            }
            let (_, atlas) = s.build_atlas()?;
            std::fs::write(dir.join("atlas.png"), atlas.to_png())?;
            s.save(&dir)?;
            println!("atlas {0}x{0}, {1} charts, {2} placeholder faces", atlas.side, atlas.charts.len(), atlas.placeholders.len());
        }
        Command::Export { format, dir: out } => {
            if format != "obj" {
                return Err(format!("unsupported export format {format:?} (supported: obj)").into());
            }
            let mut s = open(&dir)?;
            let report = s.export_obj(&out)?;
            for n in &report.notes {
                eprintln!("note: {n}");
            }
            print_json(&report)?;
        }
        Command::Report => print_json(&open(&dir)?.report())?,
        Command::Serve { port, bind, data_dir } => {
            if !bind.is_loopback() {
                eprintln!("warning: serving on {bind} exposes an unauthenticated API");
            }
            let state = AppState::new(ServiceConfig { data_dir });
            if dir.join(PROJECT_FILE).exists() {
                let id = state.insert(open(&dir)?);
                println!("project {} is session {id}", dir.display());
            }
            tokio::runtime::Runtime::new()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(SocketAddr::new(bind, port)).await?;
                println!("listening on http://{}", listener.local_addr()?);
                service::serve(listener, state).await
            })?;
        }
        Command::Replay { verify } => {
            let saved = open(&dir)?;
            let fresh = Session::replay(saved.journal())?;
            if verify {
                if fresh.state_json() != saved.state_json() {
                    return Err(format!("replay differs: saved {}, replayed {}", saved.state_digest(), fresh.state_digest()).into());
                }
                println!("verified {} records, state {}", fresh.journal().len(), fresh.state_digest());
            } else {
                let mut fresh = fresh;
                fresh.config = saved.config.clone();
                fresh.save(&dir)?;
                println!("replayed {} records, state {}", fresh.journal().len(), fresh.state_digest());
            }
        }
        Command::Demo { name, dir: out } => {
            let scene = pim::demo::by_name(&name).ok_or_else(|| format!("unknown demo {name:?} (available: {})", pim::demo::NAMES.join(", ")))?;
            let mut s = scene.run_in(&out)?;
            s.save(&out)?;
            println!("wrote {} ({} records, state {})", out.display(), s.journal().len(), s.state_digest());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<SessionError>() {
                Some(se) => eprintln!("error: {}: {se}", se.kind()),
                None => eprintln!("error: {e}"),
            }
            ExitCode::FAILURE
        }
    }
}

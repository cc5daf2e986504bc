use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reppath::detect::{DetectorConfig, Detector};
use reppath::eval::{run_campaign, run_perf_campaign, traffic_overhead_report, CampaignConfig, EvalError, FaultCategory, PerfConfig};
use reppath::event::{decode_event, read_trace_file, write_trace_file, TraceIoError};
use reppath::rep::{build_rep, count_fragments, dag_to_tree, default_data_extractor, LinkError};
use reppath::sim::{bundled, run_workload, FaultSpec, SpecError, WorkloadSpec};
use reppath::train::{read_models, train, write_models, TrainError, Variant};

#[derive(Parser)]
#[command(name = "reppath", version, about = "Request execution paths from system-call traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated workload and write its trace, ground truth and manifest.
    Simulate {
        #[command(flatten)]
        workload: WorkloadArg,
        /// Fault to inject, e.g. `crash:namenode:12` or `cpu_burn:datanode:3`.
        #[arg(long = "fault")]
        faults: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the number of requests.
        #[arg(long)]
        requests: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Link a trace into execution paths.
    Link {
        #[arg(long)]
        trace: PathBuf,
        /// Skip data-dependency linking for queue and shared-buffer calls.
        #[arg(long)]
        no_data: bool,
        /// Write the spanning tree instead of the full graph.
        #[arg(long)]
        tree: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per-type automata from clean traces.
    Train {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        /// FSA, eFSA or FSA-<n>.
        #[arg(long, default_value = "eFSA")]
        variant: Variant,
        #[arg(long)]
        no_data: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a trace through trained automata and report anomalies.
    Detect {
        #[arg(long)]
        fsa_dir: PathBuf,
        /// Trace file; `-` reads standard input.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        perf_threshold: f64,
        #[arg(long, default_value_t = 5000)]
        idle_ms: u64,
        #[arg(long)]
        no_data: bool,
    },
    /// Run a fault-injection campaign and print detection scores.
    Evaluate {
        #[command(flatten)]
        workload: WorkloadArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        train_runs: usize,
        #[arg(long, default_value_t = 28)]
        clean_runs: usize,
        #[arg(long, default_value_t = 8)]
        faulty_runs: usize,
        /// Comma-separated `crash:<c>` / `resource_lock:<c>`; derived from the workload when absent.
        #[arg(long, value_delimiter = ',')]
        faults: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "FSA,eFSA,FSA-10,FSA-20")]
        variants: Vec<Variant>,
        /// Also run the slowdown campaign with this duration noise.
        #[arg(long)]
        perf_noise: Option<f64>,
    },
    /// Message-header traffic overhead of a trace's sends.
    Overhead {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Args)]
struct WorkloadArg {
    /// Workload file, or the name of a bundled workload.
    #[arg(long)]
    workload: String,
}

impl WorkloadArg {
    fn load(&self) -> Result<WorkloadSpec, CliError> {
        let path = Path::new(&self.workload);
        if !path.exists() {
            if let Some(spec) = bundled(&self.workload) {
                return Ok(spec);
            }
        }
        Ok(WorkloadSpec::from_file(path)?)
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Trace(#[from] TraceIoError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Trace(TraceIoError::Io(_)) | CliError::Spec(SpecError::Io(_)) => 1,
            CliError::Train(TrainError::Io { .. }) | CliError::Eval(EvalError::Spec(SpecError::Io(_))) => 1,
            _ => 2,
        }
    }
}

const ANOMALIES_FOUND: u8 = 3;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError {
    let path = path.display().to_string();
    move |source| CliError::Io { path, source }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => io::stdout().write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Simulate { workload, faults, seed, requests, out } => {
            let mut spec = workload.load()?;
            if let Some(n) = requests {
                spec.run.requests = n;
            }
            let faults = faults.iter().map(|f| f.parse::<FaultSpec>()).collect::<Result<Vec<_>, _>>()?;
            let sim = run_workload(&spec, &faults, seed)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let trace = out.join("trace.reptrace");
            write_trace_file(&trace, &sim.trace).map_err(io_err(&trace))?;
            let truth = out.join("truth.txt");
            fs::write(&truth, sim.truth.to_text()).map_err(io_err(&truth))?;
            let manifest = out.join("manifest.json");
            let json = serde_json::to_string_pretty(&sim.manifest).expect("manifest serializes");
            fs::write(&manifest, json + "\n").map_err(io_err(&manifest))?;
            println!("{} events, {} requests -> {}", sim.trace.len(), sim.manifest.requests.len(), out.display());
        }
        Command::Link { trace, no_data, tree, out } => {
            let events = read_trace_file(&trace)?;
            let extractor = (!no_data).then_some(default_data_extractor as _);
            let (graph, unmatched) = build_rep(events, extractor)?;
            graph.check_acyclic()?;
            for u in &unmatched {
                eprintln!("warning: read {u} has no matching write");
            }
            eprintln!("{} events, {} edges, {} fragments", graph.len(), graph.edges.len(), count_fragments(&graph));
            let text = if tree { dag_to_tree(&graph).to_text() } else { graph.to_text() };
            write_out(out.as_deref(), &text)?;
        }
        Command::Train { traces, variant, no_data, out } => {
            let traces = traces.iter().map(|t| read_trace_file(t)).collect::<Result<Vec<_>, _>>()?;
            let extractor = (!no_data).then_some(default_data_extractor as _);
            let models = train(&traces, variant, extractor)?;
            write_models(&out, &models)?;
            for (ty, f) in &models {
                println!("{ty}: {} states, {} transitions, {} paths", f.states.len(), f.transition_count(), f.training_paths);
            }
        }
        Command::Detect { fsa_dir, trace, perf_threshold, idle_ms, no_data } => {
            let models = read_models(&fsa_dir)?;
            let config = DetectorConfig {
                idle_us: idle_ms * 1000,
                perf_threshold_pct: perf_threshold,
                extractor: (!no_data).then_some(default_data_extractor as _),
                ..DetectorConfig::default()
            };
            let mut detector = Detector::new(models, config);
            let mut stdout = io::stdout().lock();
            let mut emit = |anomalies: Vec<reppath::detect::Anomaly>| -> Result<(), CliError> {
                for a in anomalies {
                    writeln!(stdout, "{a}").map_err(io_err(Path::new("<stdout>")))?;
                }
                Ok(())
            };
            let reader: Box<dyn BufRead> = if trace.as_os_str() == "-" {
                Box::new(io::stdin().lock())
            } else {
                Box::new(io::BufReader::new(fs::File::open(&trace).map_err(io_err(&trace))?))
            };
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err(&trace))?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match decode_event(line) {
                    Ok(e) => emit(detector.ingest(e))?,
                    Err(err) => eprintln!("line {}: {err}", i + 1),
                }
            }
            emit(detector.finish())?;
            for d in detector.diagnostics() {
                eprintln!("note: {d}");
            }
            if !detector.anomalies().is_empty() {
                return Ok(ANOMALIES_FOUND);
            }
        }
        Command::Evaluate { workload, seed, train_runs, clean_runs, faulty_runs, faults, variants, perf_noise } => {
            let spec = workload.load()?;
            let categories = faults.iter().map(|f| f.parse::<FaultCategory>()).collect::<Result<Vec<_>, _>>()?;
            let cfg = CampaignConfig {
                train_runs,
                clean_runs,
                faulty_runs_per_category: faulty_runs,
                categories,
                variants,
                seed,
                ..CampaignConfig::default()
            };
            print!("{}", run_campaign(&spec, &cfg)?.to_text());
            if let Some(noise) = perf_noise {
                let perf = PerfConfig { train_runs, clean_runs, noise, seed, ..PerfConfig::default() };
                print!("performance noise {noise}\n{}", run_perf_campaign(&spec, &perf)?.to_text());
            }
        }
        Command::Overhead { trace } => {
            let events = read_trace_file(&trace)?;
            print!("{}", traffic_overhead_report(&events)?.to_text());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

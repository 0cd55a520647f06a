//! Command-line front end: run workflows, capture and repeat them, compare
//! outputs, dump infrastructure provenance, probe memory limits, and tear
//! hosts down. Exit codes are part of the interface:
//!
//!   0  success (for comparisons: everything matched)
//!   1  usage errors, invalid workflows, unknown ids, missing captures
//!   2  provisioning failures
//!   3  execution failures (including input staging)
//!   4  provenance capture failures
//!   5  a comparison ran fine and found a difference

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use provrepro::executor::{memory_sweep, StagedFile, SweepParams};
use provrepro::model::{external_inputs, load_workflow_file, WorkflowDefinition};
use provrepro::paths::Layout;
use provrepro::provenance::ProvError;
use provrepro::reproduce::RepeatError;
use provrepro::session::{RunError, Session, SessionError, TeardownError, TeardownTarget};
use provrepro::verify::VerifyError;

#[derive(Parser)]
#[command(
    name = "provrepro",
    version,
    about = "Run, capture, repeat and verify workflows on a simulated IaaS cloud"
)]
struct Cli {
    /// State directory (defaults to $PROVREPRO_HOME, then ./.provrepro)
    #[arg(long, global = true, value_name = "DIR")]
    home: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workflow file on freshly provisioned nodes and capture it
    Run {
        workflow_file: PathBuf,
        /// Number of compute nodes to provision
        #[arg(long, default_value_t = 2)]
        nodes: usize,
        /// Flavor name used for every node
        #[arg(long, default_value = "m1.small")]
        flavor: String,
        /// Local file staged as an external input, matched to the declared
        /// inputs by file name (repeatable)
        #[arg(long = "input", value_name = "FILE")]
        inputs: Vec<PathBuf>,
    },
    /// Capture provenance for an already-logged run
    Capture {
        wf_id: u64,
        /// Replace an existing capture
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a captured run on equivalent fresh hosts
    Repeat { wf_id: u64 },
    /// Compare the output files of two runs by content hash
    Compare { src_wf_id: u64, dest_wf_id: u64 },
    /// Compare two runs on all three levels and write report files
    Report { src_wf_id: u64, dest_wf_id: u64 },
    /// Print a captured run's host configuration as CSV
    Infra {
        wf_id: u64,
        /// One row per job instead of one row per distinct host
        #[arg(long)]
        all_jobs: bool,
    },
    /// Probe each flavor's memory admission boundary with memhog jobs
    Memsweep {
        /// Smallest requested size, in MB
        #[arg(long, value_name = "MB")]
        from: u64,
        /// Largest requested size, in MB (always sampled)
        #[arg(long, value_name = "MB")]
        to: u64,
        /// Increment between samples, in MB
        #[arg(long, value_name = "MB")]
        step: u64,
        /// Trials per (flavor, size) cell
        #[arg(long, default_value_t = 1)]
        repeats: u32,
        /// Also write the CSV to this file
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Destroy VMs: the recorded hosts of one captured run, or everything
    Teardown {
        /// Tear down the distinct hosts of this captured run
        #[arg(long, value_name = "WF_ID", conflicts_with = "all")]
        wf: Option<u64>,
        /// Tear down every active VM
        #[arg(long)]
        all: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Failure {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let layout = match cli.home {
        Some(dir) => Layout::new(dir),
        None => Layout::from_env(),
    };
    match cli.command {
        Command::Run {
            workflow_file,
            nodes,
            flavor,
            inputs,
        } => cmd_run(layout, &workflow_file, nodes, &flavor, &inputs),
        Command::Capture { wf_id, force } => cmd_capture(layout, wf_id, force),
        Command::Repeat { wf_id } => cmd_repeat(layout, wf_id),
        Command::Compare {
            src_wf_id,
            dest_wf_id,
        } => cmd_compare(layout, src_wf_id, dest_wf_id),
        Command::Report {
            src_wf_id,
            dest_wf_id,
        } => cmd_report(layout, src_wf_id, dest_wf_id),
        Command::Infra { wf_id, all_jobs } => cmd_infra(layout, wf_id, all_jobs),
        Command::Memsweep {
            from,
            to,
            step,
            repeats,
            out,
        } => cmd_memsweep(from, to, step, repeats, out.as_deref()),
        Command::Teardown { wf, all } => cmd_teardown(layout, wf, all),
    }
}

fn open_session(layout: Layout) -> Result<Session, Failure> {
    Session::open(layout).map_err(session_failure)
}

fn open_readonly(layout: Layout) -> Result<Session, Failure> {
    Session::open_readonly(layout).map_err(session_failure)
}

fn session_failure(err: SessionError) -> Failure {
    Failure::new(1, err)
}

/// Pairs each `--input` file with the declared external input sharing its
/// file name.
fn build_staged(
    def: &WorkflowDefinition,
    inputs: &[PathBuf],
) -> Result<Vec<StagedFile>, Failure> {
    let externals = external_inputs(def);
    let mut staged = Vec::new();
    for path in inputs {
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            return Err(Failure::new(
                1,
                format!("--input {}: not a usable file name", path.display()),
            ));
        };
        let matches: Vec<_> = externals.iter().filter(|r| r.filename == name).collect();
        let target = match matches.as_slice() {
            [one] => (*one).clone(),
            [] => {
                return Err(Failure::new(
                    1,
                    format!("--input {name}: the workflow declares no external input with this file name"),
                ))
            }
            _ => {
                return Err(Failure::new(
                    1,
                    format!("--input {name}: several declared inputs share this file name"),
                ))
            }
        };
        let content = std::fs::read(path).map_err(|e| {
            Failure::new(1, format!("cannot read --input {}: {e}", path.display()))
        })?;
        staged.push(StagedFile { target, content });
    }
    Ok(staged)
}

fn run_failure(err: RunError) -> Failure {
    match err {
        RunError::Validation(e) => Failure::new(1, e),
        RunError::Provisioning(e) => Failure::new(2, e),
        RunError::Execution(e) => Failure::new(3, e),
        RunError::Capture(e) => Failure::new(4, e),
    }
}

fn cmd_run(
    layout: Layout,
    workflow_file: &std::path::Path,
    nodes: usize,
    flavor: &str,
    inputs: &[PathBuf],
) -> Result<(), Failure> {
    let def = load_workflow_file(workflow_file).map_err(|e| Failure::new(1, e))?;
    let staged = build_staged(&def, inputs)?;
    let mut session = open_session(layout)?;
    let (run, _rows) = session
        .run_workflow(&def, nodes, flavor, &staged)
        .map_err(run_failure)?;
    println!("wfID: {}", run.wf_id);
    Ok(())
}

fn cmd_capture(layout: Layout, wf_id: u64, force: bool) -> Result<(), Failure> {
    let mut session = open_session(layout)?;
    let rows = session.capture(wf_id, force).map_err(|e| match e {
        ProvError::UnknownWorkflow(_) => Failure::new(1, e),
        other => Failure::new(4, other),
    })?;
    println!("captured wfID {wf_id} ({rows} mapping(s))");
    Ok(())
}

fn cmd_repeat(layout: Layout, wf_id: u64) -> Result<(), Failure> {
    let mut session = open_session(layout)?;
    let run = session.repeat(wf_id).map_err(|e| match e {
        RepeatError::NotCaptured(_) => Failure::new(1, e),
        RepeatError::InputsMissing(_) => Failure::new(3, e),
        RepeatError::ProvisioningFailed(_) => Failure::new(2, e),
        RepeatError::Exec(_) => Failure::new(3, e),
        RepeatError::Capture(_) => Failure::new(4, e),
    })?;
    println!("wfID: {} (repeat of {wf_id})", run.wf_id);
    Ok(())
}

fn verify_failure(err: VerifyError) -> Failure {
    Failure::new(1, err)
}

fn cmd_compare(layout: Layout, src: u64, dest: u64) -> Result<(), Failure> {
    let session = open_readonly(layout)?;
    let outputs = session.compare_outputs(src, dest).map_err(verify_failure)?;
    for warning in &outputs.warnings {
        eprintln!("warning: {warning}");
    }
    if outputs.equal {
        println!(
            "OUTPUTS MATCH ({}/{})",
            outputs.comparison_counter, outputs.file_counter
        );
        Ok(())
    } else {
        println!(
            "OUTPUTS DIFFER ({}/{})",
            outputs.comparison_counter, outputs.file_counter
        );
        for entry in outputs.per_file.iter().filter(|e| !e.matched) {
            println!("mismatch: {}/{}", entry.job_name, entry.filename);
        }
        Err(Failure::new(
            5,
            format!(
                "{} of {} output file(s) differ",
                outputs.file_counter - outputs.comparison_counter,
                outputs.file_counter
            ),
        ))
    }
}

fn cmd_report(layout: Layout, src: u64, dest: u64) -> Result<(), Failure> {
    let session = open_readonly(layout)?;
    let bundle = session.assess(src, dest).map_err(verify_failure)?;
    let (txt, _csv) = session.write_report(&bundle).map_err(verify_failure)?;
    let mark = |equal: bool| if equal { "MATCH" } else { "MISMATCH" };
    println!("structure:      {}", mark(bundle.report.structure_equal));
    println!("infrastructure: {}", mark(bundle.report.infrastructure_equal));
    println!(
        "outputs:        {} ({}/{})",
        mark(bundle.report.outputs_equal),
        bundle.outputs.comparison_counter,
        bundle.outputs.file_counter
    );
    println!(
        "verdict: {}",
        if bundle.report.verdict {
            "REPRODUCIBLE"
        } else {
            "NOT REPRODUCIBLE"
        }
    );
    println!("report: {}", txt.display());
    if bundle.report.verdict {
        Ok(())
    } else {
        Err(Failure::new(5, format!("workflows {src} and {dest} differ")))
    }
}

fn cmd_infra(layout: Layout, wf_id: u64, all_jobs: bool) -> Result<(), Failure> {
    let session = open_readonly(layout)?;
    let csv = session
        .infra_csv(wf_id, all_jobs)
        .map_err(|e| Failure::new(1, e))?;
    print!("{csv}");
    Ok(())
}

fn cmd_memsweep(
    from: u64,
    to: u64,
    step: u64,
    repeats: u32,
    out: Option<&std::path::Path>,
) -> Result<(), Failure> {
    let cells = memory_sweep(&SweepParams {
        from_mb: from,
        to_mb: to,
        step_mb: step,
        trials: repeats,
    })
    .map_err(|e| Failure::new(1, e))?;
    let mut csv = String::from("flavor,required_mb,trials,success_rate\n");
    for cell in &cells {
        csv.push_str(&format!(
            "{},{},{},{:.3}\n",
            cell.flavor_name,
            cell.required_mb,
            cell.trials,
            cell.success_rate()
        ));
    }
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv).map_err(|e| {
            Failure::new(1, format!("cannot write {}: {e}", path.display()))
        })?;
    }
    Ok(())
}

fn cmd_teardown(layout: Layout, wf: Option<u64>, all: bool) -> Result<(), Failure> {
    let target = match (wf, all) {
        (Some(wf_id), false) => TeardownTarget::Workflow(wf_id),
        (None, true) => TeardownTarget::All,
        (None, false) => {
            return Err(Failure::new(1, "pass --wf <WF_ID> or --all"));
        }
        (Some(_), true) => unreachable!("clap rejects --wf with --all"),
    };
    let mut session = open_session(layout)?;
    let destroyed = session.teardown(target).map_err(|e| match e {
        TeardownError::Prov(p) => Failure::new(1, p),
        TeardownError::Cloud(c) => Failure::new(2, c),
    })?;
    println!("destroyed {} vm(s)", destroyed.len());
    Ok(())
}

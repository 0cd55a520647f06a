//! Reproducibility verification across three levels: workflow structure,
//! host configuration, and output file content.
//!
//! The output check follows a counting discipline: every source output file
//! increments a file counter, every hash-identical destination counterpart
//! increments a comparison counter, and the runs' outputs are equal exactly
//! when the two counters agree. Missing destination jobs or files therefore
//! degrade the verdict instead of aborting the comparison.

use std::collections::BTreeSet;
use std::io;
use std::path::{Path, PathBuf};

use crate::executor::ExecutionDb;
use crate::model::{JobKind, PerFileComparison, ReproReport, WorkflowDefinition, WorkflowRun};
use crate::paths::atomic_write;
use crate::provenance::{csv_field, ProvenanceStore, ProvError};
use crate::reproduce::{self, InfraComparison, RepeatError};
use crate::simcloud::{CloudError, SimCloud};

pub const VERIFY_CSV_HEADER: &str = "Job,WFID,ContainerName,FileName,MD5Hash";

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("unknown workflow id {0}")]
    UnknownWorkflow(u64),
    #[error("workflow {0} has not been captured")]
    NotCaptured(u64),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Prov(#[from] ProvError),
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputComparison {
    /// True iff every source output file found a hash-identical counterpart.
    pub equal: bool,
    /// Source output files examined.
    pub file_counter: u32,
    /// Files whose destination counterpart hashed identically.
    pub comparison_counter: u32,
    pub per_file: Vec<PerFileComparison>,
    /// Asymmetries that do not affect the verdict, e.g. extra destination
    /// files. The check walks source outputs, so such extras are only noted.
    pub warnings: Vec<String>,
}

/// Compares the output files of two runs by content hash, pairing jobs by
/// name and files by output position.
pub fn compare_workflow_outputs(
    db: &ExecutionDb,
    cloud: &SimCloud,
    src_wf_id: u64,
    dest_wf_id: u64,
) -> Result<OutputComparison, VerifyError> {
    let src_run = db
        .run(src_wf_id)
        .ok_or(VerifyError::UnknownWorkflow(src_wf_id))?;
    let dest_run = db
        .run(dest_wf_id)
        .ok_or(VerifyError::UnknownWorkflow(dest_wf_id))?;

    let mut file_counter = 0u32;
    let mut comparison_counter = 0u32;
    let mut per_file = Vec::new();
    let mut warnings = Vec::new();

    for src_record in &src_run.job_records {
        let dest_record = dest_run
            .job_records
            .iter()
            .find(|r| r.job_name == src_record.job_name);
        if dest_record.is_none() && !src_record.outputs.is_empty() {
            warnings.push(format!(
                "job `{}` has no record in workflow {dest_wf_id}",
                src_record.job_name
            ));
        }
        for (position, src_ref) in src_record.outputs.iter().enumerate() {
            file_counter += 1;
            let src_file = cloud.get_file(&src_ref.container, &src_ref.filename)?;

            let dest_ref = dest_record.and_then(|r| r.outputs.get(position));
            let dest_md5 = match dest_ref {
                Some(dest_ref) => {
                    if dest_ref.filename != src_ref.filename {
                        warnings.push(format!(
                            "output {position} of job `{}` is named `{}` in workflow \
                             {src_wf_id} but `{}` in workflow {dest_wf_id}",
                            src_record.job_name, src_ref.filename, dest_ref.filename
                        ));
                    }
                    match cloud.get_file(&dest_ref.container, &dest_ref.filename) {
                        Ok(file) => Some(file.md5_hex().to_string()),
                        Err(CloudError::FileNotFound(_)) => None,
                        Err(other) => return Err(other.into()),
                    }
                }
                None => None,
            };

            let matched = dest_md5.as_deref() == Some(src_file.md5_hex());
            if matched {
                comparison_counter += 1;
            }
            per_file.push(PerFileComparison {
                job_name: src_record.job_name.clone(),
                filename: src_ref.filename.clone(),
                src_md5: src_file.md5_hex().to_string(),
                dest_md5,
                matched,
            });
        }
        if let Some(dest_record) = dest_record {
            if dest_record.outputs.len() > src_record.outputs.len() {
                warnings.push(format!(
                    "job `{}` produced {} extra file(s) in workflow {dest_wf_id}",
                    src_record.job_name,
                    dest_record.outputs.len() - src_record.outputs.len()
                ));
            }
        }
    }

    for dest_record in &dest_run.job_records {
        if !src_run
            .job_records
            .iter()
            .any(|r| r.job_name == dest_record.job_name)
        {
            warnings.push(format!(
                "job `{}` appears only in workflow {dest_wf_id}",
                dest_record.job_name
            ));
        }
    }

    Ok(OutputComparison {
        equal: file_counter == comparison_counter,
        file_counter,
        comparison_counter,
        per_file,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureComparison {
    pub equal: bool,
    pub missing_jobs: Vec<(String, JobKind)>,
    pub extra_jobs: Vec<(String, JobKind)>,
    /// Dependency edges as (prerequisite, dependent) pairs.
    pub missing_edges: Vec<(String, String)>,
    pub extra_edges: Vec<(String, String)>,
}

fn job_set(def: &WorkflowDefinition) -> BTreeSet<(String, JobKind)> {
    def.jobs.iter().map(|j| (j.name.clone(), j.kind)).collect()
}

fn edge_set(def: &WorkflowDefinition) -> BTreeSet<(String, String)> {
    let mut edges = BTreeSet::new();
    for job in &def.jobs {
        for dep in &job.depends_on {
            edges.insert((dep.clone(), job.name.clone()));
        }
    }
    edges
}

/// Compares the two runs' definitions as sets: jobs by (name, kind) and the
/// dependency relation by (prerequisite, dependent) edges.
pub fn compare_workflow_structure(
    db: &ExecutionDb,
    src_wf_id: u64,
    dest_wf_id: u64,
) -> Result<StructureComparison, VerifyError> {
    let src = db
        .run(src_wf_id)
        .ok_or(VerifyError::UnknownWorkflow(src_wf_id))?;
    let dest = db
        .run(dest_wf_id)
        .ok_or(VerifyError::UnknownWorkflow(dest_wf_id))?;

    let src_jobs = job_set(&src.definition);
    let dest_jobs = job_set(&dest.definition);
    let src_edges = edge_set(&src.definition);
    let dest_edges = edge_set(&dest.definition);

    let missing_jobs: Vec<_> = src_jobs.difference(&dest_jobs).cloned().collect();
    let extra_jobs: Vec<_> = dest_jobs.difference(&src_jobs).cloned().collect();
    let missing_edges: Vec<_> = src_edges.difference(&dest_edges).cloned().collect();
    let extra_edges: Vec<_> = dest_edges.difference(&src_edges).cloned().collect();

    Ok(StructureComparison {
        equal: missing_jobs.is_empty()
            && extra_jobs.is_empty()
            && missing_edges.is_empty()
            && extra_edges.is_empty(),
        missing_jobs,
        extra_jobs,
        missing_edges,
        extra_edges,
    })
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

/// A report plus everything needed to render it.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub report: ReproReport,
    pub structure: StructureComparison,
    pub infrastructure: InfraComparison,
    pub outputs: OutputComparison,
    pub src_container: String,
    pub dest_container: String,
    pub src_job_count: usize,
    pub src_edge_count: usize,
}

fn container_of(db: &ExecutionDb, wf_id: u64) -> Result<String, VerifyError> {
    db.run(wf_id)
        .map(|r: &WorkflowRun| r.output_container.clone())
        .ok_or(VerifyError::UnknownWorkflow(wf_id))
}

/// Runs all three comparisons. Both runs must exist in the run log and both
/// must be captured (the infrastructure level needs provenance).
pub fn assess(
    db: &ExecutionDb,
    cloud: &SimCloud,
    prov: &ProvenanceStore,
    src_wf_id: u64,
    dest_wf_id: u64,
) -> Result<ReportBundle, VerifyError> {
    let structure = compare_workflow_structure(db, src_wf_id, dest_wf_id)?;
    let infrastructure = match reproduce::compare_infrastructure(prov, src_wf_id, dest_wf_id) {
        Ok(cmp) => cmp,
        Err(RepeatError::NotCaptured(id)) => return Err(VerifyError::NotCaptured(id)),
        Err(RepeatError::Capture(e)) => return Err(e.into()),
        Err(other) => unreachable!("infrastructure comparison cannot fail with {other:?}"),
    };
    let outputs = compare_workflow_outputs(db, cloud, src_wf_id, dest_wf_id)?;
    let report = ReproReport::new(
        src_wf_id,
        dest_wf_id,
        structure.equal,
        infrastructure.equal,
        outputs.equal,
        outputs.per_file.clone(),
    );
    let src_def = &db.run(src_wf_id).expect("checked above").definition;
    Ok(ReportBundle {
        src_job_count: src_def.jobs.len(),
        src_edge_count: edge_set(src_def).len(),
        report,
        structure,
        infrastructure,
        outputs,
        src_container: container_of(db, src_wf_id)?,
        dest_container: container_of(db, dest_wf_id)?,
    })
}

/// The three comparison levels folded into one report.
pub fn build_report(
    db: &ExecutionDb,
    cloud: &SimCloud,
    prov: &ProvenanceStore,
    src_wf_id: u64,
    dest_wf_id: u64,
) -> Result<ReproReport, VerifyError> {
    Ok(assess(db, cloud, prov, src_wf_id, dest_wf_id)?.report)
}

pub fn render_text(bundle: &ReportBundle) -> String {
    let r = &bundle.report;
    let mark = |equal: bool| if equal { "match" } else { "MISMATCH" };
    let mut out = String::new();
    out.push_str(&format!(
        "reproducibility report: workflow {} vs workflow {}\n\n",
        r.src_wf_id, r.dest_wf_id
    ));
    out.push_str(&format!(
        "  structure:      {:<8} ({} job(s), {} dependency edge(s))\n",
        mark(r.structure_equal),
        bundle.src_job_count,
        bundle.src_edge_count,
    ));
    out.push_str(&format!(
        "  infrastructure: {:<8} ({} distinct host spec(s))\n",
        mark(r.infrastructure_equal),
        bundle.infrastructure.src_specs.len()
    ));
    out.push_str(&format!(
        "  outputs:        {:<8} ({}/{} file(s) identical)\n",
        mark(r.outputs_equal),
        bundle.outputs.comparison_counter,
        bundle.outputs.file_counter
    ));
    out.push_str(
        "\n  input files are not listed: a repeat consumes the same staged inputs\n  \
         as its source run, so they are shared rather than compared.\n",
    );

    if !r.per_file.is_empty() {
        out.push_str("\nfiles:\n");
        for entry in &r.per_file {
            let relation = if entry.matched { "==" } else { "!=" };
            let dest = entry.dest_md5.as_deref().unwrap_or("(absent)");
            out.push_str(&format!(
                "  {:<12} {:<16} {} {relation} {}\n",
                entry.job_name, entry.filename, entry.src_md5, dest
            ));
        }
    }

    for (label, jobs) in [
        ("missing in destination", &bundle.structure.missing_jobs),
        ("extra in destination", &bundle.structure.extra_jobs),
    ] {
        for (name, kind) in jobs {
            out.push_str(&format!("\nstructure: job `{name}` ({kind}) {label}"));
        }
    }
    if !bundle.structure.missing_edges.is_empty() || !bundle.structure.extra_edges.is_empty() {
        for (dep, job) in &bundle.structure.missing_edges {
            out.push_str(&format!("\nstructure: edge {dep} -> {job} missing in destination"));
        }
        for (dep, job) in &bundle.structure.extra_edges {
            out.push_str(&format!("\nstructure: edge {dep} -> {job} extra in destination"));
        }
        out.push('\n');
    }

    if !bundle.outputs.warnings.is_empty() {
        out.push_str("\nwarnings:\n");
        for warning in &bundle.outputs.warnings {
            out.push_str(&format!("  {warning}\n"));
        }
    }

    out.push_str(&format!(
        "\nverdict: {}\n",
        if r.verdict { "REPRODUCIBLE" } else { "NOT REPRODUCIBLE" }
    ));
    out
}

pub fn render_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from(VERIFY_CSV_HEADER);
    out.push('\n');
    for entry in &bundle.report.per_file {
        let src_fields = [
            entry.job_name.as_str(),
            &bundle.report.src_wf_id.to_string(),
            bundle.src_container.as_str(),
            entry.filename.as_str(),
            entry.src_md5.as_str(),
        ]
        .map(|f| csv_field(f).into_owned());
        out.push_str(&src_fields.join(","));
        out.push('\n');
        let dest_md5 = entry.dest_md5.as_deref().unwrap_or("");
        let dest_fields = [
            entry.job_name.as_str(),
            &bundle.report.dest_wf_id.to_string(),
            bundle.dest_container.as_str(),
            entry.filename.as_str(),
            dest_md5,
        ]
        .map(|f| csv_field(f).into_owned());
        out.push_str(&dest_fields.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<src>_<dest>.txt` and `<src>_<dest>.csv` under `reports_dir`.
pub fn write_report_files(
    reports_dir: &Path,
    bundle: &ReportBundle,
) -> Result<(PathBuf, PathBuf), VerifyError> {
    let stem = format!("{}_{}", bundle.report.src_wf_id, bundle.report.dest_wf_id);
    let txt = reports_dir.join(format!("{stem}.txt"));
    let csv = reports_dir.join(format!("{stem}.csv"));
    atomic_write(&txt, render_text(bundle).as_bytes()).map_err(|e| VerifyError::Io {
        path: txt.clone(),
        source: e,
    })?;
    atomic_write(&csv, render_csv(bundle).as_bytes()).map_err(|e| VerifyError::Io {
        path: csv.clone(),
        source: e,
    })?;
    Ok((txt, csv))
}

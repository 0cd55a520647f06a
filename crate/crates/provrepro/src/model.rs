//! Domain types shared across the toolkit: workflow definitions, run records,
//! cloud inventory, and the job-to-resource mapping rows that tie them
//! together. Also home to workflow validation and the on-disk workflow file
//! format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::md5_hex;

// ---------------------------------------------------------------------------
// Workflow definitions
// ---------------------------------------------------------------------------

/// A named file location in the object store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub container: String,
    pub filename: String,
}

impl FileRef {
    pub fn new(container: impl Into<String>, filename: impl Into<String>) -> Self {
        FileRef {
            container: container.into(),
            filename: filename.into(),
        }
    }
}

impl fmt::Display for FileRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.container, self.filename)
    }
}

/// The closed set of job behaviours a workflow may use.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    /// Cuts one text file into two halves at a word boundary.
    Split,
    /// Counts whitespace-delimited tokens in one text file.
    Wordcount,
    /// Sums the integer contents of two files.
    Merge,
    /// Touches no files; exists to exercise memory admission.
    Memhog,
}

impl JobKind {
    /// `(inputs, outputs)` each kind requires.
    pub fn arity(self) -> (usize, usize) {
        match self {
            JobKind::Split => (1, 2),
            JobKind::Wordcount => (1, 1),
            JobKind::Merge => (2, 1),
            JobKind::Memhog => (0, 0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Split => "split",
            JobKind::Wordcount => "wordcount",
            JobKind::Merge => "merge",
            JobKind::Memhog => "memhog",
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobDefinition {
    pub name: String,
    pub kind: JobKind,
    pub required_ram_mb: u64,
    #[serde(default)]
    pub inputs: Vec<FileRef>,
    #[serde(default)]
    pub outputs: Vec<FileRef>,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDefinition {
    pub name: String,
    #[serde(default)]
    pub jobs: Vec<JobDefinition>,
}

impl WorkflowDefinition {
    pub fn job(&self, name: &str) -> Option<&JobDefinition> {
        self.jobs.iter().find(|j| j.name == name)
    }
}

/// Declared input refs that no job in the definition produces. These must be
/// staged into the object store before the workflow can run. Deduplicated,
/// sorted.
pub fn external_inputs(def: &WorkflowDefinition) -> Vec<FileRef> {
    let produced: BTreeSet<&FileRef> = def.jobs.iter().flat_map(|j| j.outputs.iter()).collect();
    let mut externals: BTreeSet<FileRef> = BTreeSet::new();
    for job in &def.jobs {
        for input in &job.inputs {
            if !produced.contains(input) {
                externals.insert(input.clone());
            }
        }
    }
    externals.into_iter().collect()
}

/// Map from each declared output ref to the name of the job producing it.
/// When duplicate declarations exist (a validation error), the first
/// declaring job wins.
pub fn output_producers(def: &WorkflowDefinition) -> BTreeMap<FileRef, String> {
    let mut map = BTreeMap::new();
    for job in &def.jobs {
        for output in &job.outputs {
            map.entry(output.clone()).or_insert_with(|| job.name.clone());
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationIssue {
    #[error("job name must be non-empty")]
    EmptyJobName,
    #[error("duplicate job name `{0}`")]
    DuplicateJobName(String),
    #[error("job `{job}`: required_ram_mb must be positive")]
    NonPositiveRam { job: String },
    #[error("job `{job}`: empty container or filename in {slot}")]
    EmptyFileRef { job: String, slot: String },
    #[error("job `{job}` depends on unknown job `{dependency}`")]
    UnknownDependency { job: String, dependency: String },
    #[error("dependency cycle involving: {}", .0.join(", "))]
    CyclicDependency(Vec<String>),
    #[error(
        "job `{job}`: kind `{kind}` takes {expected_inputs} input(s) and \
         {expected_outputs} output(s), found {found_inputs} and {found_outputs}"
    )]
    ArityMismatch {
        job: String,
        kind: JobKind,
        expected_inputs: usize,
        expected_outputs: usize,
        found_inputs: usize,
        found_outputs: usize,
    },
    #[error(
        "job `{job}` reads `{file}` produced by `{producer}`, which is not \
         among its (transitive) dependencies"
    )]
    UnproducedInput {
        job: String,
        file: FileRef,
        producer: String,
    },
    #[error("output file `{filename}` is declared by both `{first}` and `{second}`")]
    DuplicateOutput {
        filename: String,
        first: String,
        second: String,
    },
}

/// Every violation found in a definition; never just the first one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub issues: Vec<ValidationIssue>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "workflow validation failed ({} issue(s))", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "\n  - {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Checks every definition invariant and reports all violations at once.
pub fn validate_workflow(def: &WorkflowDefinition) -> Result<(), ValidationError> {
    let mut issues = Vec::new();

    let mut seen_names = BTreeSet::new();
    let mut duplicated = BTreeSet::new();
    for job in &def.jobs {
        if job.name.is_empty() {
            issues.push(ValidationIssue::EmptyJobName);
        } else if !seen_names.insert(job.name.as_str()) && duplicated.insert(job.name.as_str()) {
            issues.push(ValidationIssue::DuplicateJobName(job.name.clone()));
        }
    }

    for job in &def.jobs {
        if job.required_ram_mb == 0 {
            issues.push(ValidationIssue::NonPositiveRam {
                job: job.name.clone(),
            });
        }
        for (slot, refs) in [("inputs", &job.inputs), ("outputs", &job.outputs)] {
            for (i, fref) in refs.iter().enumerate() {
                if fref.container.is_empty() || fref.filename.is_empty() {
                    issues.push(ValidationIssue::EmptyFileRef {
                        job: job.name.clone(),
                        slot: format!("{slot}[{i}]"),
                    });
                }
            }
        }
        let (want_in, want_out) = job.kind.arity();
        if job.inputs.len() != want_in || job.outputs.len() != want_out {
            issues.push(ValidationIssue::ArityMismatch {
                job: job.name.clone(),
                kind: job.kind,
                expected_inputs: want_in,
                expected_outputs: want_out,
                found_inputs: job.inputs.len(),
                found_outputs: job.outputs.len(),
            });
        }
    }

    for job in &def.jobs {
        for dep in &job.depends_on {
            if !seen_names.contains(dep.as_str()) {
                issues.push(ValidationIssue::UnknownDependency {
                    job: job.name.clone(),
                    dependency: dep.clone(),
                });
            }
        }
    }

    let cycle = cycle_members(def);
    if !cycle.is_empty() {
        issues.push(ValidationIssue::CyclicDependency(cycle));
    }

    // Two jobs declaring the same output filename would collide in the run's
    // output container, so filenames must be unique across the definition.
    let mut producer_of: BTreeMap<&str, &str> = BTreeMap::new();
    for job in &def.jobs {
        for output in &job.outputs {
            if let Some(first) = producer_of.get(output.filename.as_str()) {
                if *first != job.name {
                    issues.push(ValidationIssue::DuplicateOutput {
                        filename: output.filename.clone(),
                        first: first.to_string(),
                        second: job.name.clone(),
                    });
                }
            } else {
                producer_of.insert(&output.filename, &job.name);
            }
        }
    }

    // A job may read an in-workflow file only when its producer is an
    // ancestor; otherwise execution order could not guarantee the bytes
    // exist yet.
    let producers = output_producers(def);
    for job in &def.jobs {
        let ancestors = transitive_dependencies(def, &job.name);
        for input in &job.inputs {
            if let Some(producer) = producers.get(input) {
                if !ancestors.contains(producer.as_str()) {
                    issues.push(ValidationIssue::UnproducedInput {
                        job: job.name.clone(),
                        file: input.clone(),
                        producer: producer.clone(),
                    });
                }
            }
        }
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationError { issues })
    }
}

/// Names of jobs lying on a dependency cycle, sorted. Walks only edges whose
/// endpoint exists; unknown dependencies are reported separately.
fn cycle_members(def: &WorkflowDefinition) -> Vec<String> {
    let names: BTreeSet<&str> = def.jobs.iter().map(|j| j.name.as_str()).collect();
    let mut members = BTreeSet::new();
    for job in &def.jobs {
        if reachable_from(def, &job.name, &names).contains(job.name.as_str()) {
            members.insert(job.name.clone());
        }
    }
    members.into_iter().collect()
}

/// Every job reachable from `start` by following `depends_on` edges one or
/// more times.
fn reachable_from<'a>(
    def: &'a WorkflowDefinition,
    start: &str,
    known: &BTreeSet<&'a str>,
) -> BTreeSet<&'a str> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut stack: Vec<&str> = Vec::new();
    if let Some(job) = def.job(start) {
        stack.extend(job.depends_on.iter().map(String::as_str));
    }
    while let Some(name) = stack.pop() {
        if !known.contains(name) || !seen.insert(name) {
            continue;
        }
        if let Some(job) = def.job(name) {
            stack.extend(job.depends_on.iter().map(String::as_str));
        }
    }
    seen
}

/// Transitive `depends_on` closure of one job, as a name set.
fn transitive_dependencies<'a>(def: &'a WorkflowDefinition, job: &str) -> BTreeSet<&'a str> {
    let names: BTreeSet<&str> = def.jobs.iter().map(|j| j.name.as_str()).collect();
    reachable_from(def, job, &names)
}

// ---------------------------------------------------------------------------
// Workflow files
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum WorkflowFileError {
    #[error("cannot read workflow file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("workflow file {path} is not valid (line {line}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("workflow file {path}: {source}")]
    Invalid {
        path: PathBuf,
        source: ValidationError,
    },
}

/// Reads, parses and validates a workflow definition from a JSON file.
pub fn load_workflow_file(path: &Path) -> Result<WorkflowDefinition, WorkflowFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorkflowFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let def: WorkflowDefinition =
        serde_json::from_str(&text).map_err(|err| WorkflowFileError::Parse {
            path: path.to_path_buf(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        })?;
    validate_workflow(&def).map_err(|source| WorkflowFileError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(def)
}

// ---------------------------------------------------------------------------
// Cloud inventory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flavor {
    pub flavor_id: u32,
    pub name: String,
    pub ram_mb: u64,
    pub disk_gb: u64,
    pub vcpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub image_id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmState {
    Active,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmInstance {
    pub ip: String,
    pub nodename: String,
    pub flavor_id: u32,
    pub image_id: String,
    pub owner: String,
    pub state: VmState,
}

/// A file fetched from the object store. The digest is computed from the
/// content at construction and the fields are read-only afterwards, so the
/// pair can never drift apart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudFile {
    container: String,
    filename: String,
    content: Vec<u8>,
    md5_hex: String,
}

impl CloudFile {
    pub fn new(
        container: impl Into<String>,
        filename: impl Into<String>,
        content: Vec<u8>,
    ) -> Self {
        let md5_hex = md5_hex(&content);
        CloudFile {
            container: container.into(),
            filename: filename.into(),
            content,
            md5_hex,
        }
    }

    pub fn container(&self) -> &str {
        &self.container
    }

    pub fn filename(&self) -> &str {
        &self.filename
    }

    pub fn content(&self) -> &[u8] {
        &self.content
    }

    pub fn into_content(self) -> Vec<u8> {
        self.content
    }

    pub fn md5_hex(&self) -> &str {
        &self.md5_hex
    }

    pub fn file_ref(&self) -> FileRef {
        FileRef::new(self.container.clone(), self.filename.clone())
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Succeeded,
    FailedOom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_name: String,
    pub host_ip: String,
    pub status: JobStatus,
    /// Where the job's outputs actually landed (the run's output container).
    pub outputs: Vec<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowRun {
    pub wf_id: u64,
    pub definition: WorkflowDefinition,
    /// One record per dispatched job, in scheduling order. Jobs skipped
    /// because an ancestor failed have no record.
    pub job_records: Vec<JobRecord>,
    pub output_container: String,
    /// Set when this run re-executed an earlier one.
    pub repeat_of: Option<u64>,
}

/// One row of the provenance join: a job together with the full
/// configuration of the VM it ran on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResourceMapping {
    pub wf_id: u64,
    pub job_name: String,
    pub host_ip: String,
    pub nodename: String,
    pub flavor_id: u32,
    pub min_ram_mb: u64,
    pub min_hd_gb: u64,
    pub vcpus: u32,
    pub image_name: String,
    pub image_id: String,
}

// ---------------------------------------------------------------------------
// Reproducibility reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerFileComparison {
    pub job_name: String,
    pub filename: String,
    pub src_md5: String,
    /// `None` when the destination run never produced the file.
    pub dest_md5: Option<String>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReproReport {
    pub src_wf_id: u64,
    pub dest_wf_id: u64,
    pub structure_equal: bool,
    pub infrastructure_equal: bool,
    pub outputs_equal: bool,
    pub per_file: Vec<PerFileComparison>,
    /// True iff structure, infrastructure and outputs all match.
    pub verdict: bool,
}

impl ReproReport {
    pub fn new(
        src_wf_id: u64,
        dest_wf_id: u64,
        structure_equal: bool,
        infrastructure_equal: bool,
        outputs_equal: bool,
        per_file: Vec<PerFileComparison>,
    ) -> Self {
        ReproReport {
            src_wf_id,
            dest_wf_id,
            structure_equal,
            infrastructure_equal,
            outputs_equal,
            per_file,
            verdict: structure_equal && infrastructure_equal && outputs_equal,
        }
    }
}

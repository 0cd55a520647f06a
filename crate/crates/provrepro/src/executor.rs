//! Workflow execution on the simulated cloud.
//!
//! Scheduling is deliberately boring: jobs run one at a time in topological
//! order (name order breaks ties) and are dealt round-robin onto the cluster
//! nodes. Together with the cloud's sequential address assignment this makes
//! every run a pure function of (state, definition, inputs), which is what
//! the rest of the toolkit leans on.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::PathBuf;

use crate::model::{
    external_inputs, output_producers, validate_workflow, FileRef, JobDefinition, JobKind,
    JobRecord, JobStatus, ValidationError, VmInstance, WorkflowDefinition, WorkflowRun,
};
use crate::simcloud::{CloudError, SimCloud, DEFAULT_IMAGE_ID};

/// Fixed per-job memory overhead charged on top of `required_ram_mb` when
/// deciding whether a job fits on its node.
pub const OVERHEAD_MB: u64 = 32;

const RUNS_FILE: &str = "runs.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("invalid cluster: {0}")]
    BadCluster(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("required input file(s) not staged: {}", format_refs(.0))]
    InputsMissing(Vec<FileRef>),
    #[error("job `{job}`: input {file} is missing from the object store")]
    MissingInput { job: String, file: FileRef },
    #[error("job `{job}`: input {file} is malformed: {detail}")]
    BadJobInput {
        job: String,
        file: FileRef,
        detail: String,
    },
    #[error(
        "job `{job}` needs {required_mb} MB (+{overhead_mb} MB overhead) but node \
         `{nodename}` ({ip}) has only {ram_mb} MB"
    )]
    OomFailure {
        job: String,
        required_mb: u64,
        overhead_mb: u64,
        nodename: String,
        ip: String,
        ram_mb: u64,
    },
    #[error("workflow {wf_id} finished with job `{job}` out of memory")]
    JobFailedOom { wf_id: u64, job: String },
    #[error("unknown workflow id {0}")]
    UnknownWorkflow(u64),
    #[error("run log at {path} is corrupt: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid sweep range: {0}")]
    BadSweepRange(String),
}

fn format_refs(refs: &[FileRef]) -> String {
    refs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------
// Clusters
// ---------------------------------------------------------------------------

/// Job placement policies. Closed on purpose; determinism depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheduling {
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub nodename: String,
    pub flavor_id: u32,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeSpec>,
    pub scheduling: Scheduling,
}

impl ClusterSpec {
    /// A homogeneous round-robin cluster of `count` nodes named
    /// `node1..nodeN`, all on the default image.
    pub fn homogeneous(count: usize, flavor_id: u32) -> ClusterSpec {
        ClusterSpec {
            nodes: (1..=count)
                .map(|i| NodeSpec {
                    nodename: format!("node{i}"),
                    flavor_id,
                    image_id: DEFAULT_IMAGE_ID.to_string(),
                })
                .collect(),
            scheduling: Scheduling::RoundRobin,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("a cluster needs at least one node".to_string());
        }
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if node.nodename.is_empty() {
                return Err("node names must be non-empty".to_string());
            }
            if !seen.insert(node.nodename.as_str()) {
                return Err(format!("duplicate node name `{}`", node.nodename));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

/// Append-only log of workflow runs, one JSON record per line.
#[derive(Debug)]
pub struct ExecutionDb {
    path: Option<PathBuf>,
    runs: Vec<WorkflowRun>,
}

impl ExecutionDb {
    pub fn open(wms_dir: impl Into<PathBuf>) -> Result<ExecutionDb, ExecError> {
        let dir = wms_dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| ExecError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let path = dir.join(RUNS_FILE);
        let mut runs = Vec::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (lineno, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let run: WorkflowRun =
                        serde_json::from_str(line).map_err(|e| ExecError::Corrupt {
                            path: path.clone(),
                            detail: format!("line {}: {e}", lineno + 1),
                        })?;
                    runs.push(run);
                }
            }
            Err(err) if err.kind() == io::ErrorKind::NotFound => {}
            Err(err) => {
                return Err(ExecError::Io {
                    path: path.clone(),
                    source: err,
                })
            }
        }
        Ok(ExecutionDb {
            path: Some(path),
            runs,
        })
    }

    /// A log that never touches disk.
    pub fn in_memory() -> ExecutionDb {
        ExecutionDb {
            path: None,
            runs: Vec::new(),
        }
    }

    pub fn runs(&self) -> &[WorkflowRun] {
        &self.runs
    }

    pub fn run(&self, wf_id: u64) -> Option<&WorkflowRun> {
        self.runs.iter().find(|r| r.wf_id == wf_id)
    }

    /// Workflow ids are dense and strictly increasing: 1 + the highest id
    /// ever logged.
    pub fn next_wf_id(&self) -> u64 {
        self.runs.iter().map(|r| r.wf_id).max().unwrap_or(0) + 1
    }

    fn append(&mut self, run: WorkflowRun) -> Result<(), ExecError> {
        if let Some(path) = &self.path {
            use std::io::Write;
            let mut line = serde_json::to_string(&run).expect("run records serialize");
            line.push('\n');
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ExecError::Io {
                    path: path.clone(),
                    source: e,
                })?;
            file.write_all(line.as_bytes()).map_err(|e| ExecError::Io {
                path: path.clone(),
                source: e,
            })?;
        }
        self.runs.push(run);
        Ok(())
    }
}

/// Ordered job records of one run.
pub fn get_workflow_jobs(db: &ExecutionDb, wf_id: u64) -> Result<Vec<JobRecord>, ExecError> {
    db.run(wf_id)
        .map(|r| r.job_records.clone())
        .ok_or(ExecError::UnknownWorkflow(wf_id))
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

/// Topological order of the definition's jobs, smallest name first among the
/// ready set (Kahn's algorithm over a `BTreeSet`). Assumes the definition
/// has been validated; on a cyclic input the cycle members are simply
/// absent from the result.
pub fn schedule_order(def: &WorkflowDefinition) -> Vec<String> {
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let names: BTreeSet<&str> = def.jobs.iter().map(|j| j.name.as_str()).collect();

    for job in &def.jobs {
        let deps: BTreeSet<&str> = job
            .depends_on
            .iter()
            .map(String::as_str)
            .filter(|d| names.contains(d))
            .collect();
        indegree.insert(&job.name, deps.len());
        for dep in deps {
            dependents.entry(dep).or_default().push(&job.name);
        }
    }

    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &deg)| deg == 0)
        .map(|(&name, _)| name)
        .collect();
    let mut order = Vec::with_capacity(def.jobs.len());
    while let Some(&name) = ready.iter().next() {
        ready.remove(name);
        order.push(name.to_string());
        for &dependent in dependents.get(name).into_iter().flatten() {
            let deg = indegree.get_mut(dependent).expect("known job");
            *deg -= 1;
            if *deg == 0 {
                ready.insert(dependent);
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Job execution
// ---------------------------------------------------------------------------

/// Where a job's files live for one particular run: outputs always land in
/// the run's container, and inputs produced upstream are redirected there
/// via the rebase map.
#[derive(Debug, Clone)]
pub struct JobContext {
    pub output_container: String,
    pub input_rebase: BTreeMap<FileRef, FileRef>,
}

impl JobContext {
    pub fn new(output_container: impl Into<String>) -> JobContext {
        JobContext {
            output_container: output_container.into(),
            input_rebase: BTreeMap::new(),
        }
    }
}

/// Runs a single job on `node`, reading and writing the object store.
/// Fails with `OomFailure` when the job does not fit in the node's RAM;
/// nothing is written in that case.
pub fn run_job(
    cloud: &mut SimCloud,
    job: &JobDefinition,
    node: &VmInstance,
    ctx: &JobContext,
) -> Result<JobRecord, ExecError> {
    let flavor = cloud
        .flavor(node.flavor_id)
        .ok_or(CloudError::UnknownFlavor(node.flavor_id))?
        .clone();
    if job.required_ram_mb + OVERHEAD_MB > flavor.ram_mb {
        return Err(ExecError::OomFailure {
            job: job.name.clone(),
            required_mb: job.required_ram_mb,
            overhead_mb: OVERHEAD_MB,
            nodename: node.nodename.clone(),
            ip: node.ip.clone(),
            ram_mb: flavor.ram_mb,
        });
    }

    let mut inputs = Vec::with_capacity(job.inputs.len());
    for declared in &job.inputs {
        let actual = ctx.input_rebase.get(declared).unwrap_or(declared);
        let file = match cloud.get_file(&actual.container, &actual.filename) {
            Ok(file) => file,
            Err(CloudError::FileNotFound(file)) => {
                return Err(ExecError::MissingInput {
                    job: job.name.clone(),
                    file,
                })
            }
            Err(other) => return Err(other.into()),
        };
        inputs.push(file);
    }

    let contents: Vec<Vec<u8>> = match job.kind {
        JobKind::Split => {
            let text = String::from_utf8_lossy(inputs[0].content()).into_owned();
            let (left, right) = split_text(&text);
            vec![left.into_bytes(), right.into_bytes()]
        }
        JobKind::Wordcount => {
            let text = String::from_utf8_lossy(inputs[0].content()).into_owned();
            let count = text.split_whitespace().count();
            vec![format!("{count}\n").into_bytes()]
        }
        JobKind::Merge => {
            let mut total: u64 = 0;
            for input in &inputs {
                let text = String::from_utf8_lossy(input.content()).into_owned();
                let value: u64 =
                    text.trim()
                        .parse()
                        .map_err(|e| ExecError::BadJobInput {
                            job: job.name.clone(),
                            file: input.file_ref(),
                            detail: format!("expected an integer, {e}"),
                        })?;
                total = total.checked_add(value).ok_or_else(|| ExecError::BadJobInput {
                    job: job.name.clone(),
                    file: input.file_ref(),
                    detail: "sum overflows".to_string(),
                })?;
            }
            vec![format!("{total}\n").into_bytes()]
        }
        JobKind::Memhog => Vec::new(),
    };

    debug_assert_eq!(contents.len(), job.outputs.len());
    let mut produced = Vec::with_capacity(contents.len());
    for (declared, content) in job.outputs.iter().zip(contents) {
        let stored = cloud.put_file(&ctx.output_container, &declared.filename, &content)?;
        produced.push(stored.file_ref());
    }

    Ok(JobRecord {
        job_name: job.name.clone(),
        host_ip: node.ip.clone(),
        status: JobStatus::Succeeded,
        outputs: produced,
    })
}

/// Cuts `text` at the word boundary that best balances the byte lengths of
/// the two halves after whitespace normalization. The earliest best cut
/// wins, so the result is unique.
pub fn split_text(text: &str) -> (String, String) {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = words.len();
    if n == 0 {
        return (String::new(), String::new());
    }
    let mut prefix = vec![0usize; n + 1];
    for (i, word) in words.iter().enumerate() {
        prefix[i + 1] = prefix[i] + word.len();
    }
    // Joined length of `count` words totalling `bytes`: separators included.
    let joined = |count: usize, bytes: usize| if count == 0 { 0 } else { bytes + count - 1 };
    let total = prefix[n];
    let mut best_cut = 0;
    let mut best_diff = usize::MAX;
    for (cut, &left_bytes) in prefix.iter().enumerate() {
        let left = joined(cut, left_bytes);
        let right = joined(n - cut, total - left_bytes);
        let diff = left.abs_diff(right);
        if diff < best_diff {
            best_diff = diff;
            best_cut = cut;
        }
    }
    (words[..best_cut].join(" "), words[best_cut..].join(" "))
}

// ---------------------------------------------------------------------------
// Submission
// ---------------------------------------------------------------------------

/// An external input together with the declared ref it satisfies.
#[derive(Debug, Clone)]
pub struct StagedFile {
    pub target: FileRef,
    pub content: Vec<u8>,
}

pub fn stage_inputs(cloud: &mut SimCloud, files: &[StagedFile]) -> Result<(), ExecError> {
    for file in files {
        cloud.put_file(&file.target.container, &file.target.filename, &file.content)?;
    }
    Ok(())
}

/// Validates, stages, provisions a fresh cluster and executes. The one-stop
/// entry point when the caller does not manage VMs itself.
pub fn submit_workflow(
    db: &mut ExecutionDb,
    cloud: &mut SimCloud,
    def: &WorkflowDefinition,
    cluster: &ClusterSpec,
    staged: &[StagedFile],
) -> Result<WorkflowRun, ExecError> {
    validate_workflow(def)?;
    cluster.validate().map_err(ExecError::BadCluster)?;
    stage_inputs(cloud, staged)?;
    let mut vms = Vec::with_capacity(cluster.nodes.len());
    for node in &cluster.nodes {
        vms.push(cloud.provision_vm(node.flavor_id, &node.image_id, &node.nodename)?);
    }
    match cluster.scheduling {
        Scheduling::RoundRobin => submit_on_vms(db, cloud, def, &vms, None),
    }
}

/// Executes `def` on an already-provisioned set of nodes.
///
/// Jobs are dispatched in `schedule_order`; a job runs only when every
/// dependency succeeded, otherwise it is skipped and leaves no record. An
/// out-of-memory job is recorded as `failed_oom` and its dependents are
/// skipped, but independent jobs still run and the run is still logged; the
/// call then reports the first such failure as `JobFailedOom`.
pub fn submit_on_vms(
    db: &mut ExecutionDb,
    cloud: &mut SimCloud,
    def: &WorkflowDefinition,
    vms: &[VmInstance],
    repeat_of: Option<u64>,
) -> Result<WorkflowRun, ExecError> {
    validate_workflow(def)?;
    // A definition with no jobs dispatches nothing, so it alone may run on
    // an empty cluster (a repeat of such a run provisions zero hosts).
    if vms.is_empty() && !def.jobs.is_empty() {
        return Err(ExecError::BadCluster(
            "a cluster needs at least one node".to_string(),
        ));
    }
    let missing: Vec<FileRef> = external_inputs(def)
        .into_iter()
        .filter(|r| !cloud.has_file(r))
        .collect();
    if !missing.is_empty() {
        return Err(ExecError::InputsMissing(missing));
    }

    let wf_id = db.next_wf_id();
    let output_container = format!("wfoutput{wf_id}");
    let mut ctx = JobContext::new(output_container.clone());
    for declared in output_producers(def).into_keys() {
        let rebased = FileRef::new(output_container.clone(), declared.filename.clone());
        ctx.input_rebase.insert(declared, rebased);
    }

    let mut records = Vec::new();
    let mut completed: BTreeSet<String> = BTreeSet::new();
    let mut dispatched = 0usize;
    let mut first_oom: Option<String> = None;

    for name in schedule_order(def) {
        let job = def.job(&name).expect("scheduled job exists");
        if !job.depends_on.iter().all(|d| completed.contains(d)) {
            continue;
        }
        let node = &vms[dispatched % vms.len()];
        dispatched += 1;
        match run_job(cloud, job, node, &ctx) {
            Ok(record) => {
                records.push(record);
                completed.insert(name);
            }
            Err(ExecError::OomFailure { .. }) => {
                records.push(JobRecord {
                    job_name: name.clone(),
                    host_ip: node.ip.clone(),
                    status: JobStatus::FailedOom,
                    outputs: Vec::new(),
                });
                first_oom.get_or_insert(name);
            }
            Err(other) => return Err(other),
        }
    }

    let run = WorkflowRun {
        wf_id,
        definition: def.clone(),
        job_records: records,
        output_container,
        repeat_of,
    };
    db.append(run.clone())?;

    match first_oom {
        Some(job) => Err(ExecError::JobFailedOom { wf_id, job }),
        None => Ok(run),
    }
}

// ---------------------------------------------------------------------------
// Memory sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SweepParams {
    pub from_mb: u64,
    pub to_mb: u64,
    pub step_mb: u64,
    pub trials: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepCell {
    pub flavor_name: String,
    pub required_mb: u64,
    pub trials: u32,
    pub successes: u32,
}

impl SweepCell {
    pub fn success_rate(&self) -> f64 {
        f64::from(self.successes) / f64::from(self.trials)
    }
}

/// Runs a memhog job `trials` times per (flavor, requested MB) cell on a
/// throwaway in-memory cloud and tallies successes. `to_mb` is always
/// sampled, even when the step overshoots it.
pub fn memory_sweep(params: &SweepParams) -> Result<Vec<SweepCell>, ExecError> {
    if params.step_mb == 0 {
        return Err(ExecError::BadSweepRange("step_mb must be positive".to_string()));
    }
    if params.from_mb == 0 {
        return Err(ExecError::BadSweepRange("from_mb must be positive".to_string()));
    }
    if params.from_mb > params.to_mb {
        return Err(ExecError::BadSweepRange(format!(
            "from_mb ({}) exceeds to_mb ({})",
            params.from_mb, params.to_mb
        )));
    }
    if params.trials == 0 {
        return Err(ExecError::BadSweepRange("trials must be positive".to_string()));
    }

    let mut values: Vec<u64> = (params.from_mb..=params.to_mb)
        .step_by(params.step_mb as usize)
        .collect();
    if values.last() != Some(&params.to_mb) {
        values.push(params.to_mb);
    }

    let mut cloud = SimCloud::in_memory();
    let flavors = cloud.flavors().to_vec();
    let mut cells = Vec::with_capacity(flavors.len() * values.len());
    for flavor in flavors {
        let vm = cloud.provision_vm(
            flavor.flavor_id,
            DEFAULT_IMAGE_ID,
            &format!("sweep-{}", flavor.name),
        )?;
        for &required_mb in &values {
            let job = JobDefinition {
                name: "memhog".to_string(),
                kind: JobKind::Memhog,
                required_ram_mb: required_mb,
                inputs: Vec::new(),
                outputs: Vec::new(),
                depends_on: Vec::new(),
            };
            let ctx = JobContext::new("sweep");
            let mut successes = 0;
            for _ in 0..params.trials {
                match run_job(&mut cloud, &job, &vm, &ctx) {
                    Ok(_) => successes += 1,
                    Err(ExecError::OomFailure { .. }) => {}
                    Err(other) => return Err(other),
                }
            }
            cells.push(SweepCell {
                flavor_name: flavor.name.clone(),
                required_mb,
                trials: params.trials,
                successes,
            });
        }
    }
    Ok(cells)
}

//! Capture of run provenance: which VM, with which exact configuration,
//! executed each job of a run. A capture archives the workflow definition
//! alongside the mapping rows so a run can be repeated later even if the
//! original definition file is gone.
//!
//! Rows come from joining a run's job records against the cloud's instance
//! ledger on the recorded host IP. The ledger keeps destroyed instances, so
//! captures keep working after a teardown.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::executor::{ExecutionDb, NodeSpec};
use crate::model::{JobResourceMapping, WorkflowDefinition};
use crate::paths::atomic_write;
use crate::simcloud::SimCloud;

pub const CSV_HEADER: &str =
    "wfID,Host IP,nodename,Flavour Id,minRAM (MB),minHD (GB),vCPU,Image name,Image id";

#[derive(Debug, thiserror::Error)]
pub enum ProvError {
    #[error("unknown workflow id {0}")]
    UnknownWorkflow(u64),
    #[error("workflow {0} has not been captured")]
    NotCaptured(u64),
    #[error("workflow {0} is already captured; re-capturing requires force")]
    DuplicateCapture(u64),
    #[error("mapping rows carry wf_id {found}, expected {expected}")]
    MismatchedRows { expected: u64, found: u64 },
    #[error("job(s) with no matching vm in the inventory: {}", format_unmapped(.0))]
    UnmappedJob(Vec<(String, String)>),
    #[error("catalog entry missing while mapping job `{job}`: {detail}")]
    MissingCatalogEntry { job: String, detail: String },
    #[error("provenance data at {path} is corrupt: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn format_unmapped(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(job, ip)| format!("`{job}` ({ip})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Everything archived for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedRun {
    pub wf_id: u64,
    pub repeat_of: Option<u64>,
    pub definition: WorkflowDefinition,
    /// Sorted by job name.
    pub rows: Vec<JobResourceMapping>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ProvLine {
    Header { wf_id: u64, repeat_of: Option<u64> },
    Definition { definition: WorkflowDefinition },
    Mapping { row: JobResourceMapping },
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    wf_id: u64,
}

#[derive(Debug)]
pub struct ProvenanceStore {
    dir: PathBuf,
    captures: BTreeMap<u64, CapturedRun>,
}

impl ProvenanceStore {
    pub fn open(prov_dir: impl Into<PathBuf>) -> Result<ProvenanceStore, ProvError> {
        let dir = prov_dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| ProvError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let mut store = ProvenanceStore {
            dir,
            captures: BTreeMap::new(),
        };
        for wf_id in store.read_index()? {
            let captured = store.read_capture(wf_id)?;
            store.captures.insert(wf_id, captured);
        }
        Ok(store)
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index")
    }

    fn capture_path(&self, wf_id: u64) -> PathBuf {
        self.dir.join(format!("wf_{wf_id}.jsonl"))
    }

    fn read_index(&self) -> Result<Vec<u64>, ProvError> {
        let path = self.index_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(err) => {
                return Err(ProvError::Io {
                    path,
                    source: err,
                })
            }
        };
        let mut ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexLine = serde_json::from_str(line).map_err(|e| ProvError::Corrupt {
                path: path.clone(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            ids.push(entry.wf_id);
        }
        Ok(ids)
    }

    fn read_capture(&self, wf_id: u64) -> Result<CapturedRun, ProvError> {
        let path = self.capture_path(wf_id);
        let text = std::fs::read_to_string(&path).map_err(|e| ProvError::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut header: Option<(u64, Option<u64>)> = None;
        let mut definition: Option<WorkflowDefinition> = None;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ProvLine = serde_json::from_str(line).map_err(|e| ProvError::Corrupt {
                path: path.clone(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            match parsed {
                ProvLine::Header { wf_id: id, repeat_of } => header = Some((id, repeat_of)),
                ProvLine::Definition { definition: def } => definition = Some(def),
                ProvLine::Mapping { row } => rows.push(row),
            }
        }
        let (id, repeat_of) = header.ok_or_else(|| ProvError::Corrupt {
            path: path.clone(),
            detail: "missing header record".to_string(),
        })?;
        if id != wf_id {
            return Err(ProvError::Corrupt {
                path,
                detail: format!("file is for workflow {id}, index says {wf_id}"),
            });
        }
        let definition = definition.ok_or_else(|| ProvError::Corrupt {
            path,
            detail: "missing definition record".to_string(),
        })?;
        Ok(CapturedRun {
            wf_id,
            repeat_of,
            definition,
            rows,
        })
    }

    fn persist_capture(&self, captured: &CapturedRun) -> Result<(), ProvError> {
        let path = self.capture_path(captured.wf_id);
        let mut buf = String::new();
        let mut push = |line: &ProvLine| {
            buf.push_str(&serde_json::to_string(line).expect("prov records serialize"));
            buf.push('\n');
        };
        push(&ProvLine::Header {
            wf_id: captured.wf_id,
            repeat_of: captured.repeat_of,
        });
        push(&ProvLine::Definition {
            definition: captured.definition.clone(),
        });
        for row in &captured.rows {
            push(&ProvLine::Mapping { row: row.clone() });
        }
        atomic_write(&path, buf.as_bytes()).map_err(|e| ProvError::Io { path, source: e })
    }

    fn persist_index(&self) -> Result<(), ProvError> {
        let mut buf = String::new();
        for wf_id in self.captures.keys() {
            buf.push_str(
                &serde_json::to_string(&IndexLine { wf_id: *wf_id }).expect("index serializes"),
            );
            buf.push('\n');
        }
        let path = self.index_path();
        atomic_write(&path, buf.as_bytes()).map_err(|e| ProvError::Io { path, source: e })
    }

    pub fn is_captured(&self, wf_id: u64) -> bool {
        self.captures.contains_key(&wf_id)
    }

    pub fn captured_ids(&self) -> Vec<u64> {
        self.captures.keys().copied().collect()
    }

    pub fn captured(&self, wf_id: u64) -> Result<&CapturedRun, ProvError> {
        self.captures.get(&wf_id).ok_or(ProvError::NotCaptured(wf_id))
    }

    /// Mapping rows of a captured run, sorted by job name.
    pub fn get_mappings(&self, wf_id: u64) -> Result<&[JobResourceMapping], ProvError> {
        Ok(&self.captured(wf_id)?.rows)
    }

    /// Archives a run's mapping rows and definition. Each run is captured
    /// once; `force` replaces an existing capture wholesale.
    pub fn store_mappings(
        &mut self,
        wf_id: u64,
        definition: &WorkflowDefinition,
        repeat_of: Option<u64>,
        rows: Vec<JobResourceMapping>,
        force: bool,
    ) -> Result<(), ProvError> {
        if let Some(row) = rows.iter().find(|r| r.wf_id != wf_id) {
            return Err(ProvError::MismatchedRows {
                expected: wf_id,
                found: row.wf_id,
            });
        }
        if !force && self.captures.contains_key(&wf_id) {
            return Err(ProvError::DuplicateCapture(wf_id));
        }
        let mut rows = rows;
        rows.sort_by(|a, b| a.job_name.cmp(&b.job_name));
        let captured = CapturedRun {
            wf_id,
            repeat_of,
            definition: definition.clone(),
            rows,
        };
        self.persist_capture(&captured)?;
        self.captures.insert(wf_id, captured);
        self.persist_index()
    }

    /// One spec per distinct host of a captured run, in first-appearance
    /// order over the name-sorted rows. This is exactly what a repeat run
    /// provisions.
    pub fn distinct_resource_specs(&self, wf_id: u64) -> Result<Vec<NodeSpec>, ProvError> {
        let captured = self.captured(wf_id)?;
        let mut seen = std::collections::BTreeSet::new();
        let mut specs = Vec::new();
        for row in &captured.rows {
            if seen.insert(row.host_ip.as_str()) {
                specs.push(NodeSpec {
                    nodename: row.nodename.clone(),
                    flavor_id: row.flavor_id,
                    image_id: row.image_id.clone(),
                });
            }
        }
        Ok(specs)
    }

    /// Renders a captured run as CSV. By default one row per distinct host;
    /// `all_jobs` emits every mapping row instead.
    pub fn dump_csv(&self, wf_id: u64, all_jobs: bool) -> Result<String, ProvError> {
        let captured = self.captured(wf_id)?;
        let mut rows: Vec<&JobResourceMapping> = Vec::new();
        if all_jobs {
            rows.extend(captured.rows.iter());
        } else {
            let mut seen = std::collections::BTreeSet::new();
            for row in &captured.rows {
                if seen.insert(row.host_ip.as_str()) {
                    rows.push(row);
                }
            }
        }
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in rows {
            let fields = [
                row.wf_id.to_string(),
                row.host_ip.clone(),
                row.nodename.clone(),
                row.flavor_id.to_string(),
                row.min_ram_mb.to_string(),
                row.min_hd_gb.to_string(),
                row.vcpus.to_string(),
                row.image_name.clone(),
                row.image_id.clone(),
            ];
            let line: Vec<Cow<'_, str>> = fields.iter().map(|f| csv_field(f)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Joins each job record of a run to the VM that executed it, by host IP,
/// over the current owner's instances (any state). The result carries the
/// full resource configuration needed to re-provision an equivalent host.
pub fn map_jobs_to_vms(
    db: &ExecutionDb,
    cloud: &SimCloud,
    wf_id: u64,
) -> Result<Vec<JobResourceMapping>, ProvError> {
    let run = db.run(wf_id).ok_or(ProvError::UnknownWorkflow(wf_id))?;
    let owned: Vec<_> = cloud
        .all_instances()
        .iter()
        .filter(|vm| vm.owner == cloud.owner())
        .collect();

    let mut rows = Vec::with_capacity(run.job_records.len());
    let mut unmapped = Vec::new();
    for record in &run.job_records {
        let Some(vm) = owned.iter().find(|vm| vm.ip == record.host_ip) else {
            unmapped.push((record.job_name.clone(), record.host_ip.clone()));
            continue;
        };
        let flavor = cloud.flavor(vm.flavor_id).ok_or_else(|| {
            ProvError::MissingCatalogEntry {
                job: record.job_name.clone(),
                detail: format!("flavor id {}", vm.flavor_id),
            }
        })?;
        let image = cloud.image(&vm.image_id).ok_or_else(|| {
            ProvError::MissingCatalogEntry {
                job: record.job_name.clone(),
                detail: format!("image id {}", vm.image_id),
            }
        })?;
        rows.push(JobResourceMapping {
            wf_id,
            job_name: record.job_name.clone(),
            host_ip: record.host_ip.clone(),
            nodename: vm.nodename.clone(),
            flavor_id: flavor.flavor_id,
            min_ram_mb: flavor.ram_mb,
            min_hd_gb: flavor.disk_gb,
            vcpus: flavor.vcpus,
            image_name: image.name.clone(),
            image_id: image.image_id.clone(),
        });
    }
    if !unmapped.is_empty() {
        return Err(ProvError::UnmappedJob(unmapped));
    }
    Ok(rows)
}

/// Minimal CSV quoting: fields containing a comma, quote or newline get
/// wrapped and inner quotes doubled.
pub(crate) fn csv_field(field: &str) -> Cow<'_, str> {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        Cow::Owned(format!("\"{}\"", field.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(field)
    }
}

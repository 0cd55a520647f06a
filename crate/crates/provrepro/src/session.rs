//! A session bundles the three persistent stores behind one lock. Writer
//! sessions hold the state lock exclusively for their whole lifetime;
//! read-only sessions share it. Composite operations (run, capture, repeat,
//! teardown) live here so the CLI and tests drive exactly the same code.

use std::io;
use std::path::PathBuf;

use crate::executor::{self, ExecError, ExecutionDb, StagedFile};
use crate::model::{
    validate_workflow, ValidationError, WorkflowDefinition, WorkflowRun,
};
use crate::paths::{Layout, LockMode, StateLock};
use crate::provenance::{self, ProvenanceStore, ProvError};
use crate::reproduce::{self, RepeatError};
use crate::simcloud::{CloudError, SimCloud, DEFAULT_IMAGE_ID};
use crate::verify::{self, ReportBundle, VerifyError};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("cannot lock state directory {path}: {source}")]
    Lock { path: PathBuf, source: io::Error },
    #[error("cannot prepare state directory {path}: {source}")]
    Prepare { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Prov(#[from] ProvError),
}

/// A failure of the composite run operation, tagged by phase so callers can
/// tell validation problems from infrastructure ones.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Validation(ValidationError),
    #[error("provisioning failed: {0}")]
    Provisioning(CloudError),
    #[error(transparent)]
    Execution(ExecError),
    #[error("capturing provenance failed: {0}")]
    Capture(ProvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeardownTarget {
    /// The distinct hosts recorded for one captured run.
    Workflow(u64),
    /// Every active VM owned by this session.
    All,
}

#[derive(Debug, thiserror::Error)]
pub enum TeardownError {
    #[error(transparent)]
    Prov(#[from] ProvError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug)]
pub struct Session {
    layout: Layout,
    _lock: StateLock,
    pub cloud: SimCloud,
    pub db: ExecutionDb,
    pub prov: ProvenanceStore,
}

impl Session {
    /// Opens the state for writing; blocks while another session holds it.
    pub fn open(layout: Layout) -> Result<Session, SessionError> {
        Session::open_with_mode(layout, LockMode::Exclusive)
    }

    /// Opens the state for reading only; multiple readers may coexist.
    pub fn open_readonly(layout: Layout) -> Result<Session, SessionError> {
        Session::open_with_mode(layout, LockMode::Shared)
    }

    fn open_with_mode(layout: Layout, mode: LockMode) -> Result<Session, SessionError> {
        layout.ensure().map_err(|source| SessionError::Prepare {
            path: layout.home().to_path_buf(),
            source,
        })?;
        let lock = StateLock::acquire(&layout, mode).map_err(|source| SessionError::Lock {
            path: layout.lock_file(),
            source,
        })?;
        let cloud = SimCloud::open(layout.cloud_dir())?;
        let db = ExecutionDb::open(layout.wms_dir())?;
        let prov = ProvenanceStore::open(layout.prov_dir())?;
        Ok(Session {
            layout,
            _lock: lock,
            cloud,
            db,
            prov,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Stages inputs, provisions `nodes` hosts of the named flavor on the
    /// default image, executes the workflow, and captures its provenance.
    /// Returns the run and the number of mapping rows captured.
    pub fn run_workflow(
        &mut self,
        def: &WorkflowDefinition,
        nodes: usize,
        flavor_name: &str,
        staged: &[StagedFile],
    ) -> Result<(WorkflowRun, usize), RunError> {
        validate_workflow(def).map_err(RunError::Validation)?;

        let flavor_id = self
            .cloud
            .flavor_by_name(flavor_name)
            .ok_or_else(|| {
                RunError::Provisioning(CloudError::UnknownFlavorName(flavor_name.to_string()))
            })?
            .flavor_id;
        if nodes == 0 {
            return Err(RunError::Execution(ExecError::BadCluster(
                "a cluster needs at least one node".to_string(),
            )));
        }
        // Stage only once the cheap checks are done, so a doomed run does
        // not leave half its inputs in the object store.
        executor::stage_inputs(&mut self.cloud, staged).map_err(RunError::Execution)?;
        let mut vms = Vec::with_capacity(nodes);
        for i in 1..=nodes {
            let vm = self
                .cloud
                .provision_vm(flavor_id, DEFAULT_IMAGE_ID, &format!("node{i}"))
                .map_err(RunError::Provisioning)?;
            vms.push(vm);
        }

        let (run, exec_failure) =
            match executor::submit_on_vms(&mut self.db, &mut self.cloud, def, &vms, None) {
                Ok(run) => (run, None),
                Err(err @ ExecError::JobFailedOom { .. }) => {
                    let ExecError::JobFailedOom { wf_id, .. } = err else {
                        unreachable!()
                    };
                    let run = self.db.run(wf_id).expect("failed run was logged").clone();
                    (run, Some(err))
                }
                Err(other) => return Err(RunError::Execution(other)),
            };

        let rows = provenance::map_jobs_to_vms(&self.db, &self.cloud, run.wf_id)
            .map_err(RunError::Capture)?;
        let row_count = rows.len();
        self.prov
            .store_mappings(run.wf_id, def, None, rows, false)
            .map_err(RunError::Capture)?;

        match exec_failure {
            Some(err) => Err(RunError::Execution(err)),
            None => Ok((run, row_count)),
        }
    }

    /// Captures (or with `force` re-captures) provenance for a logged run.
    pub fn capture(&mut self, wf_id: u64, force: bool) -> Result<usize, ProvError> {
        let rows = provenance::map_jobs_to_vms(&self.db, &self.cloud, wf_id)?;
        let count = rows.len();
        let definition = self
            .db
            .run(wf_id)
            .expect("mapped run exists")
            .definition
            .clone();
        let repeat_of = self.db.run(wf_id).expect("mapped run exists").repeat_of;
        self.prov
            .store_mappings(wf_id, &definition, repeat_of, rows, force)?;
        Ok(count)
    }

    pub fn repeat(&mut self, src_wf_id: u64) -> Result<WorkflowRun, RepeatError> {
        reproduce::repeat_workflow(&mut self.db, &mut self.cloud, &mut self.prov, src_wf_id)
    }

    pub fn compare_outputs(
        &self,
        src_wf_id: u64,
        dest_wf_id: u64,
    ) -> Result<verify::OutputComparison, VerifyError> {
        verify::compare_workflow_outputs(&self.db, &self.cloud, src_wf_id, dest_wf_id)
    }

    pub fn assess(&self, src_wf_id: u64, dest_wf_id: u64) -> Result<ReportBundle, VerifyError> {
        verify::assess(&self.db, &self.cloud, &self.prov, src_wf_id, dest_wf_id)
    }

    /// Builds the full report and writes the text and CSV files under the
    /// state's reports directory.
    pub fn write_report(
        &self,
        bundle: &ReportBundle,
    ) -> Result<(PathBuf, PathBuf), VerifyError> {
        verify::write_report_files(&self.layout.reports_dir(), bundle)
    }

    pub fn infra_csv(&self, wf_id: u64, all_jobs: bool) -> Result<String, ProvError> {
        self.prov.dump_csv(wf_id, all_jobs)
    }

    /// Destroys VMs and returns the addresses actually torn down. Hosts
    /// that are already gone are skipped, so teardown is idempotent.
    pub fn teardown(&mut self, target: TeardownTarget) -> Result<Vec<String>, TeardownError> {
        let ips: Vec<String> = match target {
            TeardownTarget::Workflow(wf_id) => {
                let rows = self.prov.get_mappings(wf_id)?;
                let mut seen = std::collections::BTreeSet::new();
                rows.iter()
                    .filter(|r| seen.insert(r.host_ip.as_str()))
                    .map(|r| r.host_ip.clone())
                    .collect()
            }
            TeardownTarget::All => self
                .cloud
                .list_vms(self.cloud.owner())
                .into_iter()
                .map(|vm| vm.ip)
                .collect(),
        };
        let mut destroyed = Vec::new();
        for ip in ips {
            match self.cloud.destroy_vm(&ip) {
                Ok(()) => destroyed.push(ip),
                Err(CloudError::NoSuchVm(_)) => {}
                Err(other) => return Err(other.into()),
            }
        }
        Ok(destroyed)
    }
}

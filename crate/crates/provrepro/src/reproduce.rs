//! Repeating captured runs on equivalent infrastructure.
//!
//! A repeat rebuilds the execution environment from provenance alone: it
//! reads the archived definition, provisions one fresh VM per distinct host
//! of the source run with the same flavor and image, and resubmits the
//! definition against the same staged external inputs. The new run is
//! captured immediately and linked to its source.

use crate::executor::{self, ExecError, ExecutionDb};
use crate::model::{external_inputs, FileRef, VmInstance, WorkflowRun};
use crate::provenance::{self, ProvenanceStore, ProvError};
use crate::simcloud::{CloudError, SimCloud};

#[derive(Debug, thiserror::Error)]
pub enum RepeatError {
    #[error("workflow {0} has not been captured; nothing to repeat")]
    NotCaptured(u64),
    #[error("external input(s) of the source run are gone: {}", format_refs(.0))]
    InputsMissing(Vec<FileRef>),
    #[error("provisioning replacement hosts failed: {0}")]
    ProvisioningFailed(CloudError),
    #[error(transparent)]
    Exec(ExecError),
    #[error("capturing the repeat run failed: {0}")]
    Capture(ProvError),
}

fn format_refs(refs: &[FileRef]) -> String {
    refs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Replacement hosts get the source nodename with a `-rep` marker, inserted
/// before the domain part when there is one.
fn rep_nodename(name: &str) -> String {
    match name.find('.') {
        Some(dot) => format!("{}-rep{}", &name[..dot], &name[dot..]),
        None => format!("{name}-rep"),
    }
}

/// Re-executes the captured run `src_wf_id` on freshly provisioned,
/// configuration-identical hosts. Returns the new run, which is already
/// captured and carries `repeat_of = src_wf_id`.
pub fn repeat_workflow(
    db: &mut ExecutionDb,
    cloud: &mut SimCloud,
    prov: &mut ProvenanceStore,
    src_wf_id: u64,
) -> Result<WorkflowRun, RepeatError> {
    let (definition, specs) = {
        let captured = match prov.captured(src_wf_id) {
            Ok(captured) => captured,
            Err(ProvError::NotCaptured(id)) => return Err(RepeatError::NotCaptured(id)),
            Err(other) => return Err(RepeatError::Capture(other)),
        };
        let specs = prov
            .distinct_resource_specs(src_wf_id)
            .map_err(RepeatError::Capture)?;
        (captured.definition.clone(), specs)
    };

    // The repeat reads the very same staged inputs as the source, so they
    // must still be present before any host is provisioned.
    let missing: Vec<FileRef> = external_inputs(&definition)
        .into_iter()
        .filter(|r| !cloud.has_file(r))
        .collect();
    if !missing.is_empty() {
        return Err(RepeatError::InputsMissing(missing));
    }

    let mut vms: Vec<VmInstance> = Vec::with_capacity(specs.len());
    for spec in &specs {
        let vm = cloud
            .provision_vm(spec.flavor_id, &spec.image_id, &rep_nodename(&spec.nodename))
            .map_err(RepeatError::ProvisioningFailed)?;
        vms.push(vm);
    }

    let (run, exec_failure) =
        match executor::submit_on_vms(db, cloud, &definition, &vms, Some(src_wf_id)) {
            Ok(run) => (run, None),
            // The run was logged even though a job ran out of memory;
            // capture it before reporting the failure.
            Err(err @ ExecError::JobFailedOom { .. }) => {
                let ExecError::JobFailedOom { wf_id, .. } = err else {
                    unreachable!()
                };
                let run = db
                    .run(wf_id)
                    .expect("failed run was just logged")
                    .clone();
                (run, Some(err))
            }
            Err(other) => return Err(RepeatError::Exec(other)),
        };

    let rows =
        provenance::map_jobs_to_vms(db, cloud, run.wf_id).map_err(RepeatError::Capture)?;
    prov.store_mappings(run.wf_id, &definition, Some(src_wf_id), rows, false)
        .map_err(RepeatError::Capture)?;

    match exec_failure {
        Some(err) => Err(RepeatError::Exec(err)),
        None => Ok(run),
    }
}

// ---------------------------------------------------------------------------
// Infrastructure comparison
// ---------------------------------------------------------------------------

/// The configuration facets that must agree between two runs' hosts.
/// Deliberately excludes IPs and nodenames: replacements get fresh ones.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct InfraSpec {
    pub flavor_id: u32,
    pub min_ram_mb: u64,
    pub min_hd_gb: u64,
    pub vcpus: u32,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfraComparison {
    pub equal: bool,
    /// Sorted multiset of the source run's distinct-host specs.
    pub src_specs: Vec<InfraSpec>,
    /// Sorted multiset of the destination run's distinct-host specs.
    pub dest_specs: Vec<InfraSpec>,
    pub missing_in_dest: Vec<InfraSpec>,
    pub extra_in_dest: Vec<InfraSpec>,
}

fn host_specs(prov: &ProvenanceStore, wf_id: u64) -> Result<Vec<InfraSpec>, RepeatError> {
    let captured = match prov.captured(wf_id) {
        Ok(captured) => captured,
        Err(ProvError::NotCaptured(id)) => return Err(RepeatError::NotCaptured(id)),
        Err(other) => return Err(RepeatError::Capture(other)),
    };
    let mut seen = std::collections::BTreeSet::new();
    let mut specs = Vec::new();
    for row in &captured.rows {
        if seen.insert(row.host_ip.as_str()) {
            specs.push(InfraSpec {
                flavor_id: row.flavor_id,
                min_ram_mb: row.min_ram_mb,
                min_hd_gb: row.min_hd_gb,
                vcpus: row.vcpus,
                image_id: row.image_id.clone(),
            });
        }
    }
    specs.sort();
    Ok(specs)
}

/// Everything in `a` that has no counterpart in `b`, multiset-style.
fn multiset_difference(a: &[InfraSpec], b: &[InfraSpec]) -> Vec<InfraSpec> {
    let mut pool: Vec<&InfraSpec> = b.iter().collect();
    let mut missing = Vec::new();
    for spec in a {
        if let Some(pos) = pool.iter().position(|candidate| *candidate == spec) {
            pool.swap_remove(pos);
        } else {
            missing.push(spec.clone());
        }
    }
    missing
}

/// Compares the distinct-host configurations of two captured runs as
/// multisets. Any two captured runs can be compared; they do not need a
/// repeat link.
pub fn compare_infrastructure(
    prov: &ProvenanceStore,
    src_wf_id: u64,
    dest_wf_id: u64,
) -> Result<InfraComparison, RepeatError> {
    let src_specs = host_specs(prov, src_wf_id)?;
    let dest_specs = host_specs(prov, dest_wf_id)?;
    let missing_in_dest = multiset_difference(&src_specs, &dest_specs);
    let extra_in_dest = multiset_difference(&dest_specs, &src_specs);
    Ok(InfraComparison {
        equal: missing_in_dest.is_empty() && extra_in_dest.is_empty(),
        src_specs,
        dest_specs,
        missing_in_dest,
        extra_in_dest,
    })
}

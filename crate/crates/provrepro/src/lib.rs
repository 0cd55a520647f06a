//! Workflow reproducibility toolkit.
//!
//! The pieces, bottom to top:
//!
//! * [`simcloud`]: a deterministic IaaS stand-in with a fixed flavor/image
//!   catalog, sequential never-reused IP assignment, and an object store
//!   that re-verifies content digests on every read.
//! * [`executor`]: runs workflow DAGs on provisioned VMs in a deterministic
//!   order, enforcing a per-node memory admission rule, and logs each run.
//! * [`provenance`]: joins job records to the exact VM configuration that
//!   executed them, and archives the rows with the workflow definition.
//! * [`reproduce`]: repeats a captured run on freshly provisioned,
//!   configuration-identical hosts.
//! * [`verify`]: compares two runs by structure, host configuration, and
//!   output content hashes, and renders reports.
//! * [`session`]: all of the above behind one state directory and one
//!   advisory lock.
//!
//! Persistent state lives under `$PROVREPRO_HOME` (default `./.provrepro`);
//! see [`paths::Layout`] for the exact directory layout.

mod digest;

pub mod executor;
pub mod model;
pub mod paths;
pub mod provenance;
pub mod reproduce;
pub mod session;
pub mod simcloud;
pub mod verify;

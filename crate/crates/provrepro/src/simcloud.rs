//! Deterministic IaaS stand-in: a fixed flavor/image catalog, VM provisioning
//! with sequential IP assignment, and a content-addressed object store.
//!
//! The cloud is a plain value over a state directory (or fully in memory for
//! throwaway work). Instances are kept for the lifetime of the state, even
//! after destruction, so IP addresses are never reused and provenance joins
//! against historical runs keep working.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::md5_hex;
use crate::model::{CloudFile, FileRef, Flavor, Image, VmInstance, VmState};
use crate::paths::atomic_write;

pub const DEFAULT_IMAGE_NAME: &str = "wf_peg_repeat";
pub const DEFAULT_IMAGE_ID: &str = "f102960c-557c-4253-8277-2df5ffe3c169";
pub const DEFAULT_OWNER: &str = "default";

/// Hosts live in 172.16.1.0/24; .0, .1 and .255 are reserved, so usable
/// host octets are 2 through 254.
const FIRST_HOST_OCTET: usize = 2;
const LAST_HOST_OCTET: usize = 254;

#[derive(Debug, thiserror::Error)]
pub enum CloudError {
    #[error("unknown flavor id {0}")]
    UnknownFlavor(u32),
    #[error("unknown flavor name `{0}`")]
    UnknownFlavorName(String),
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("ip space exhausted: all host addresses in 172.16.1.0/24 have been assigned")]
    IpSpaceExhausted,
    #[error("no active vm with ip {0}")]
    NoSuchVm(String),
    #[error("file not found: {0}")]
    FileNotFound(FileRef),
    #[error("digest mismatch for {file}: index records {expected}, content hashes to {actual}")]
    DigestMismatch {
        file: FileRef,
        expected: String,
        actual: String,
    },
    #[error("invalid object name `{0}`: names must be single path components")]
    InvalidName(String),
    #[error("cloud state at {path} is corrupt: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CloudError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CloudError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug)]
enum Store {
    Dir(PathBuf),
    Memory(BTreeMap<(String, String), Vec<u8>>),
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    container: String,
    filename: String,
    md5_hex: String,
}

/// The whole simulated cloud: catalog, instance ledger and object store.
#[derive(Debug)]
pub struct SimCloud {
    store: Store,
    owner: String,
    flavors: Vec<Flavor>,
    images: Vec<Image>,
    /// Every instance ever provisioned, in provisioning order. Destroyed
    /// instances stay, with their state flipped.
    instances: Vec<VmInstance>,
    /// Object digests, keyed by (container, filename). Authoritative for
    /// which objects exist.
    index: BTreeMap<(String, String), String>,
}

impl fmt::Display for SimCloud {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let active = self
            .instances
            .iter()
            .filter(|vm| vm.state == VmState::Active)
            .count();
        write!(
            f,
            "simcloud: {} vm(s) active ({} ever), {} object(s)",
            active,
            self.instances.len(),
            self.index.len()
        )
    }
}

fn default_flavors() -> Vec<Flavor> {
    vec![
        Flavor {
            flavor_id: 1,
            name: "m1.tiny".to_string(),
            ram_mb: 512,
            disk_gb: 20,
            vcpus: 1,
        },
        Flavor {
            flavor_id: 2,
            name: "m1.small".to_string(),
            ram_mb: 2048,
            disk_gb: 20,
            vcpus: 1,
        },
        Flavor {
            flavor_id: 3,
            name: "m1.medium".to_string(),
            ram_mb: 4096,
            disk_gb: 20,
            vcpus: 1,
        },
    ]
}

fn default_images() -> Vec<Image> {
    vec![Image {
        image_id: DEFAULT_IMAGE_ID.to_string(),
        name: DEFAULT_IMAGE_NAME.to_string(),
    }]
}

impl SimCloud {
    /// Opens (or initializes) the cloud state under `cloud_dir`.
    pub fn open(cloud_dir: impl Into<PathBuf>) -> Result<SimCloud, CloudError> {
        let dir = cloud_dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CloudError::io(&dir, e))?;
        let mut cloud = SimCloud {
            store: Store::Dir(dir.clone()),
            owner: DEFAULT_OWNER.to_string(),
            flavors: default_flavors(),
            images: default_images(),
            instances: Vec::new(),
            index: BTreeMap::new(),
        };
        cloud.load_instances(&dir)?;
        cloud.load_index(&dir)?;
        Ok(cloud)
    }

    /// A fresh cloud holding everything in memory. Used for throwaway
    /// experiments that should not burn the persistent address space.
    pub fn in_memory() -> SimCloud {
        SimCloud {
            store: Store::Memory(BTreeMap::new()),
            owner: DEFAULT_OWNER.to_string(),
            flavors: default_flavors(),
            images: default_images(),
            instances: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn load_instances(&mut self, dir: &Path) -> Result<(), CloudError> {
        let path = dir.join("instances");
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(err) => return Err(CloudError::io(&path, err)),
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vm: VmInstance = serde_json::from_str(line).map_err(|e| CloudError::Corrupt {
                path: path.clone(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            self.instances.push(vm);
        }
        Ok(())
    }

    fn load_index(&mut self, dir: &Path) -> Result<(), CloudError> {
        let path = dir.join("index");
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(err) => return Err(CloudError::io(&path, err)),
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = serde_json::from_str(line).map_err(|e| CloudError::Corrupt {
                path: path.clone(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            self.index
                .insert((entry.container, entry.filename), entry.md5_hex);
        }
        Ok(())
    }

    fn persist_instances(&self) -> Result<(), CloudError> {
        let Store::Dir(dir) = &self.store else {
            return Ok(());
        };
        let mut buf = String::new();
        for vm in &self.instances {
            buf.push_str(&serde_json::to_string(vm).expect("vm records serialize"));
            buf.push('\n');
        }
        let path = dir.join("instances");
        atomic_write(&path, buf.as_bytes()).map_err(|e| CloudError::io(&path, e))
    }

    fn persist_index(&self) -> Result<(), CloudError> {
        let Store::Dir(dir) = &self.store else {
            return Ok(());
        };
        let mut buf = String::new();
        for ((container, filename), md5) in &self.index {
            let entry = IndexEntry {
                container: container.clone(),
                filename: filename.clone(),
                md5_hex: md5.clone(),
            };
            buf.push_str(&serde_json::to_string(&entry).expect("index entries serialize"));
            buf.push('\n');
        }
        let path = dir.join("index");
        atomic_write(&path, buf.as_bytes()).map_err(|e| CloudError::io(&path, e))
    }

    /// Identity used for subsequent provisioning and inventory queries.
    pub fn set_owner(&mut self, owner: impl Into<String>) {
        self.owner = owner.into();
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn flavors(&self) -> &[Flavor] {
        &self.flavors
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn flavor(&self, flavor_id: u32) -> Option<&Flavor> {
        self.flavors.iter().find(|f| f.flavor_id == flavor_id)
    }

    pub fn flavor_by_name(&self, name: &str) -> Option<&Flavor> {
        self.flavors.iter().find(|f| f.name == name)
    }

    pub fn image(&self, image_id: &str) -> Option<&Image> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Creates a VM for the current owner. IPs are handed out sequentially
    /// from 172.16.1.2 and never reused, destroyed instances included.
    pub fn provision_vm(
        &mut self,
        flavor_id: u32,
        image_id: &str,
        nodename: &str,
    ) -> Result<VmInstance, CloudError> {
        if self.flavor(flavor_id).is_none() {
            return Err(CloudError::UnknownFlavor(flavor_id));
        }
        if self.image(image_id).is_none() {
            return Err(CloudError::UnknownImage(image_id.to_string()));
        }
        let octet = FIRST_HOST_OCTET + self.instances.len();
        if octet > LAST_HOST_OCTET {
            return Err(CloudError::IpSpaceExhausted);
        }
        let vm = VmInstance {
            ip: format!("172.16.1.{octet}"),
            nodename: nodename.to_string(),
            flavor_id,
            image_id: image_id.to_string(),
            owner: self.owner.clone(),
            state: VmState::Active,
        };
        self.instances.push(vm.clone());
        self.persist_instances()?;
        Ok(vm)
    }

    /// Active VMs belonging to `owner`, in provisioning order.
    pub fn list_vms(&self, owner: &str) -> Vec<VmInstance> {
        self.instances
            .iter()
            .filter(|vm| vm.owner == owner && vm.state == VmState::Active)
            .cloned()
            .collect()
    }

    /// All instances ever provisioned, regardless of owner or state.
    pub fn all_instances(&self) -> &[VmInstance] {
        &self.instances
    }

    pub fn find_active(&self, ip: &str) -> Option<&VmInstance> {
        self.instances
            .iter()
            .find(|vm| vm.ip == ip && vm.state == VmState::Active)
    }

    pub fn destroy_vm(&mut self, ip: &str) -> Result<(), CloudError> {
        let vm = self
            .instances
            .iter_mut()
            .find(|vm| vm.ip == ip && vm.state == VmState::Active)
            .ok_or_else(|| CloudError::NoSuchVm(ip.to_string()))?;
        vm.state = VmState::Destroyed;
        self.persist_instances()
    }

    fn check_name(name: &str) -> Result<(), CloudError> {
        let bad = name.is_empty()
            || name == "."
            || name == ".."
            || name.contains('/')
            || name.contains('\\')
            || name.contains('\0');
        if bad {
            Err(CloudError::InvalidName(name.to_string()))
        } else {
            Ok(())
        }
    }

    /// Stores `content` at (container, filename), overwriting any previous
    /// version, and returns the stored file with its digest.
    pub fn put_file(
        &mut self,
        container: &str,
        filename: &str,
        content: &[u8],
    ) -> Result<CloudFile, CloudError> {
        Self::check_name(container)?;
        Self::check_name(filename)?;
        match &mut self.store {
            Store::Dir(dir) => {
                let path = dir.join("objects").join(container).join(filename);
                atomic_write(&path, content).map_err(|e| CloudError::io(&path, e))?;
            }
            Store::Memory(objects) => {
                objects.insert(
                    (container.to_string(), filename.to_string()),
                    content.to_vec(),
                );
            }
        }
        let file = CloudFile::new(container, filename, content.to_vec());
        self.index.insert(
            (container.to_string(), filename.to_string()),
            file.md5_hex().to_string(),
        );
        self.persist_index()?;
        Ok(file)
    }

    /// Fetches a stored file. The content is re-hashed on every read and
    /// checked against the index, so silent corruption surfaces here.
    pub fn get_file(&self, container: &str, filename: &str) -> Result<CloudFile, CloudError> {
        let key = (container.to_string(), filename.to_string());
        let expected = self.index.get(&key).ok_or_else(|| {
            CloudError::FileNotFound(FileRef::new(container, filename))
        })?;
        let content = match &self.store {
            Store::Dir(dir) => {
                let path = dir.join("objects").join(container).join(filename);
                std::fs::read(&path).map_err(|err| {
                    if err.kind() == io::ErrorKind::NotFound {
                        CloudError::Corrupt {
                            path: path.clone(),
                            detail: "object is indexed but its content file is missing"
                                .to_string(),
                        }
                    } else {
                        CloudError::io(&path, err)
                    }
                })?
            }
            Store::Memory(objects) => objects
                .get(&key)
                .cloned()
                .ok_or_else(|| CloudError::FileNotFound(FileRef::new(container, filename)))?,
        };
        let actual = md5_hex(&content);
        if &actual != expected {
            return Err(CloudError::DigestMismatch {
                file: FileRef::new(container, filename),
                expected: expected.clone(),
                actual,
            });
        }
        Ok(CloudFile::new(container, filename, content))
    }

    pub fn has_file(&self, fref: &FileRef) -> bool {
        self.index
            .contains_key(&(fref.container.clone(), fref.filename.clone()))
    }
}

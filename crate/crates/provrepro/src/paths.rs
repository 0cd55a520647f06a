//! State directory layout and the inter-process session lock.
//!
//! All persistent state lives under a single home directory, resolved from
//! `$PROVREPRO_HOME` or defaulting to `./.provrepro`. Sessions that mutate
//! state take an exclusive advisory lock on `<home>/lock`; read-only sessions
//! take a shared one. The lock is held for the whole session, so a state
//! directory is only ever written by one process at a time.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

pub const HOME_ENV: &str = "PROVREPRO_HOME";
pub const DEFAULT_HOME: &str = ".provrepro";

/// Resolved locations of everything under the state home.
#[derive(Debug, Clone)]
pub struct Layout {
    home: PathBuf,
}

impl Layout {
    pub fn new(home: impl Into<PathBuf>) -> Self {
        Layout { home: home.into() }
    }

    /// `$PROVREPRO_HOME` when set and non-empty, else `./.provrepro`.
    pub fn from_env() -> Self {
        match std::env::var_os(HOME_ENV) {
            Some(dir) if !dir.is_empty() => Layout::new(PathBuf::from(dir)),
            _ => Layout::new(DEFAULT_HOME),
        }
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn cloud_dir(&self) -> PathBuf {
        self.home.join("cloud")
    }

    pub fn wms_dir(&self) -> PathBuf {
        self.home.join("wms")
    }

    pub fn prov_dir(&self) -> PathBuf {
        self.home.join("prov")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.home.join("reports")
    }

    pub fn lock_file(&self) -> PathBuf {
        self.home.join("lock")
    }

    /// Creates the home and every subdirectory. Idempotent.
    pub fn ensure(&self) -> io::Result<()> {
        for dir in [
            self.home.clone(),
            self.cloud_dir(),
            self.wms_dir(),
            self.prov_dir(),
            self.reports_dir(),
        ] {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Shared,
    Exclusive,
}

/// Advisory flock on `<home>/lock`, released on drop.
#[derive(Debug)]
pub struct StateLock {
    file: File,
}

impl StateLock {
    /// Blocks until the lock is granted.
    pub fn acquire(layout: &Layout, mode: LockMode) -> io::Result<StateLock> {
        fs::create_dir_all(layout.home())?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(layout.lock_file())?;
        let op = match mode {
            LockMode::Shared => libc::LOCK_SH,
            LockMode::Exclusive => libc::LOCK_EX,
        };
        flock(&file, op)?;
        Ok(StateLock { file })
    }

    /// Non-blocking variant; `Ok(None)` when another session holds the lock.
    pub fn try_acquire(layout: &Layout, mode: LockMode) -> io::Result<Option<StateLock>> {
        fs::create_dir_all(layout.home())?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(layout.lock_file())?;
        let op = match mode {
            LockMode::Shared => libc::LOCK_SH,
            LockMode::Exclusive => libc::LOCK_EX,
        } | libc::LOCK_NB;
        match flock(&file, op) {
            Ok(()) => Ok(Some(StateLock { file })),
            Err(err) if err.raw_os_error() == Some(libc::EWOULDBLOCK) => Ok(None),
            Err(err) => Err(err),
        }
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        // Closing the descriptor releases the lock anyway; the explicit
        // unlock just makes the intent visible and failure irrelevant.
        let _ = flock(&self.file, libc::LOCK_UN);
    }
}

fn flock(file: &File, op: libc::c_int) -> io::Result<()> {
    let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename. Readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "file".to_string()),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(err) => {
            let _ = fs::remove_file(&tmp);
            Err(err)
        }
    }
}

//! Reference oracles for the provrepro test suites.
//!
//! Everything in this crate is intentionally naive: brute-force enumeration,
//! straight-from-the-textbook hashing, nested-loop joins. These routines are
//! used by tests to cross-check the production implementations and must stay
//! independent of them, so this crate depends on nothing from the workspace.

use std::sync::OnceLock;

// ---------------------------------------------------------------------------
// Reference MD5 (RFC 1321)
// ---------------------------------------------------------------------------

const SHIFTS: [u32; 64] = [
    7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, // round 1
    5, 9, 14, 20, 5, 9, 14, 20, 5, 9, 14, 20, 5, 9, 14, 20, // round 2
    4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, // round 3
    6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21, // round 4
];

/// Sine-derived constant table, T[i] = floor(2^32 * |sin(i + 1)|).
fn sine_table() -> &'static [u32; 64] {
    static TABLE: OnceLock<[u32; 64]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u32; 64];
        for (i, slot) in t.iter_mut().enumerate() {
            *slot = ((i as f64 + 1.0).sin().abs() * 4294967296.0) as u32;
        }
        t
    })
}

/// Reference MD5 digest, rendered as 32 lowercase hex characters.
pub fn md5_hex(data: &[u8]) -> String {
    md5(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reference MD5 digest as raw bytes.
pub fn md5(data: &[u8]) -> [u8; 16] {
    let table = sine_table();

    let mut msg = data.to_vec();
    let bit_len = (data.len() as u64).wrapping_mul(8);
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&bit_len.to_le_bytes());

    let mut h: [u32; 4] = [0x6745_2301, 0xefcd_ab89, 0x98ba_dcfe, 0x1032_5476];

    for chunk in msg.chunks_exact(64) {
        let mut m = [0u32; 16];
        for (i, word) in m.iter_mut().enumerate() {
            *word = u32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
        }

        let (mut a, mut b, mut c, mut d) = (h[0], h[1], h[2], h[3]);
        for i in 0..64 {
            let (f, g) = match i / 16 {
                0 => ((b & c) | (!b & d), i),
                1 => ((d & b) | (!d & c), (5 * i + 1) % 16),
                2 => (b ^ c ^ d, (3 * i + 5) % 16),
                _ => (c ^ (b | !d), (7 * i) % 16),
            };
            let sum = a
                .wrapping_add(f)
                .wrapping_add(table[i])
                .wrapping_add(m[g]);
            a = d;
            d = c;
            c = b;
            b = b.wrapping_add(sum.rotate_left(SHIFTS[i]));
        }

        h[0] = h[0].wrapping_add(a);
        h[1] = h[1].wrapping_add(b);
        h[2] = h[2].wrapping_add(c);
        h[3] = h[3].wrapping_add(d);
    }

    let mut out = [0u8; 16];
    for (i, word) in h.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force topological ordering
// ---------------------------------------------------------------------------

/// Searches every permutation of `0..n` for one that places each edge's
/// prerequisite before its dependent. Returns the first found, or `None`
/// when the edge relation admits no topological order. Only usable for
/// small `n` (factorial blowup); asserts `n <= 8`.
pub fn brute_force_topo_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    assert!(n <= 8, "permutation oracle is factorial; keep n small");
    let mut items: Vec<usize> = (0..n).collect();
    permute_until(&mut items, 0, &mut |perm| {
        edges.iter().all(|&(before, after)| {
            let pi = perm.iter().position(|&x| x == before).unwrap();
            let pj = perm.iter().position(|&x| x == after).unwrap();
            pi < pj
        })
    })
}

/// Enumerates every permutation of `names`, keeps those that satisfy all
/// `(prerequisite, dependent)` edges, and returns the lexicographically
/// smallest sequence. `None` when no valid order exists.
pub fn smallest_topo_order(names: &[String], edges: &[(String, String)]) -> Option<Vec<String>> {
    assert!(names.len() <= 8, "permutation oracle is factorial; keep n small");
    let mut best: Option<Vec<String>> = None;
    let mut items: Vec<String> = names.to_vec();
    permute_all(&mut items, 0, &mut |perm| {
        let valid = edges.iter().all(|(before, after)| {
            let pi = perm.iter().position(|x| x == before).unwrap();
            let pj = perm.iter().position(|x| x == after).unwrap();
            pi < pj
        });
        if valid && best.as_ref().is_none_or(|b| perm < b.as_slice()) {
            best = Some(perm.to_vec());
        }
    });
    best
}

fn permute_until<T: Clone>(
    items: &mut Vec<T>,
    k: usize,
    accept: &mut impl FnMut(&[T]) -> bool,
) -> Option<Vec<T>> {
    if k == items.len() {
        return accept(items).then(|| items.clone());
    }
    for i in k..items.len() {
        items.swap(k, i);
        if let Some(found) = permute_until(items, k + 1, accept) {
            return Some(found);
        }
        items.swap(k, i);
    }
    None
}

fn permute_all<T: Clone>(items: &mut Vec<T>, k: usize, visit: &mut impl FnMut(&[T])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute_all(items, k + 1, visit);
        items.swap(k, i);
    }
}

// ---------------------------------------------------------------------------
// Text splitting and token counting
// ---------------------------------------------------------------------------

/// Enumerates every word-boundary cut of the whitespace-normalized text,
/// materializes both halves for each cut, and returns the pair minimizing
/// the absolute byte-length difference. Earliest cut wins ties.
pub fn reference_split(text: &str) -> (String, String) {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut best: Option<(usize, (String, String))> = None;
    for cut in 0..=words.len() {
        let left = words[..cut].join(" ");
        let right = words[cut..].join(" ");
        let diff = left.len().abs_diff(right.len());
        if best.as_ref().is_none_or(|(d, _)| diff < *d) {
            best = Some((diff, (left, right)));
        }
    }
    best.expect("cut 0 always exists").1
}

/// Counts whitespace-delimited tokens with an explicit state machine.
pub fn reference_token_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_token = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            count += 1;
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Nested-loop join of job records against a VM inventory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleJob {
    pub name: String,
    pub host_ip: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleVm {
    pub ip: String,
    pub nodename: String,
    pub flavor_id: u32,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleFlavor {
    pub flavor_id: u32,
    pub ram_mb: u64,
    pub disk_gb: u64,
    pub vcpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleImage {
    pub image_id: String,
    pub image_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRow {
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

/// Joins each job to the VM carrying its recorded IP by scanning every
/// (job, vm, flavor, image) combination. Returns the rows in job order,
/// or the list of `(job, ip)` pairs that matched no VM.
pub fn nested_loop_join(
    jobs: &[OracleJob],
    vms: &[OracleVm],
    flavors: &[OracleFlavor],
    images: &[OracleImage],
) -> Result<Vec<OracleRow>, Vec<(String, String)>> {
    let mut rows = Vec::new();
    let mut unmapped = Vec::new();
    for job in jobs {
        let mut matched = false;
        for vm in vms {
            if vm.ip != job.host_ip {
                continue;
            }
            for flavor in flavors {
                if flavor.flavor_id != vm.flavor_id {
                    continue;
                }
                for image in images {
                    if image.image_id != vm.image_id {
                        continue;
                    }
                    rows.push(OracleRow {
                        job_name: job.name.clone(),
                        host_ip: job.host_ip.clone(),
                        nodename: vm.nodename.clone(),
                        flavor_id: flavor.flavor_id,
                        min_ram_mb: flavor.ram_mb,
                        min_hd_gb: flavor.disk_gb,
                        vcpus: flavor.vcpus,
                        image_name: image.image_name.clone(),
                        image_id: image.image_id.clone(),
                    });
                    matched = true;
                }
            }
        }
        if !matched {
            unmapped.push((job.name.clone(), job.host_ip.clone()));
        }
    }
    if unmapped.is_empty() {
        Ok(rows)
    } else {
        Err(unmapped)
    }
}

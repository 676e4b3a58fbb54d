//! Stable content hashes for cached artifacts.

use sha2::{Digest, Sha256};

use crate::kernel::KernelParams;

/// Bumped whenever kernel numerics or cache layout change.
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over the sequence set (order-independent), kernel parameters,
/// normalization flag, format version, and any extra key/value pairs.
pub fn kernel_fingerprint(
    sequences: &[&str],
    params: &KernelParams,
    normalized: bool,
    extra: &[(&str, &str)],
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("format={FORMAT_VERSION}\n"));
    hasher.update(format!("beta={:016x}\n", params.beta.to_bits()));
    match params.k_max {
        Some(k) => hasher.update(format!("k_max={k}\n")),
        None => hasher.update("k_max=none\n"),
    }
    hasher.update(format!("averaged={}\n", params.averaged));
    hasher.update(format!("normalized={normalized}\n"));
    let mut extra: Vec<_> = extra.to_vec();
    extra.sort();
    for (k, v) in extra {
        hasher.update(format!("{k}={v}\n"));
    }
    let mut seqs: Vec<&str> = sequences.to_vec();
    seqs.sort_unstable();
    hasher.update(format!("sequences={}\n", seqs.len()));
    for s in seqs {
        hasher.update(s);
        hasher.update("\n");
    }
    hex(&hasher.finalize())
}

/// SHA-256 of an arbitrary list of text parts, in order.
pub fn hash_parts<S: AsRef<str>>(parts: &[S]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("format={FORMAT_VERSION}\n"));
    for p in parts {
        hasher.update(p.as_ref());
        hasher.update("\n");
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Deterministic report serialization.
//!
//! Every artifact is stamped with a digest of its canonicalized config so
//! reruns are byte-identical; wall-clock data goes to a `.meta.json` sidecar
//! next to the main file.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Canonical JSON: serde_json with sorted object keys (the default map
/// representation) and no insignificant whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Stable 16-hex-digit digest of the canonicalized JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = canonical_json(value).unwrap_or_default();
    let hash = Sha256::digest(json.as_bytes());
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty-printed JSON with a trailing newline, written atomically enough
/// for our purposes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    body.push('\n');
    fs::write(path, body)
}

/// Sidecar with the volatile run data (timestamps, wall time) so the main
/// artifact stays deterministic.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub config_digest: String,
    pub unix_time_secs: u64,
    pub wall_time_ms: u128,
}

pub fn write_sidecar(path: &Path, digest: &str, wall_time_ms: u128) -> io::Result<()> {
    let meta = RunMeta {
        config_digest: digest.to_string(),
        unix_time_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        wall_time_ms,
    };
    write_json(path, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Cfg {
        b: u32,
        a: u32,
    }

    #[test]
    fn digest_ignores_field_order() {
        // serde_json::Value sorts keys, so declaration order is irrelevant
        #[derive(Serialize)]
        struct Cfg2 {
            a: u32,
            b: u32,
        }
        let d1 = config_digest(&Cfg { a: 1, b: 2 });
        let d2 = config_digest(&Cfg2 { a: 1, b: 2 });
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 16);
    }

    #[test]
    fn digest_changes_with_content() {
        assert_ne!(
            config_digest(&Cfg { a: 1, b: 2 }),
            config_digest(&Cfg { a: 1, b: 3 })
        );
    }
}

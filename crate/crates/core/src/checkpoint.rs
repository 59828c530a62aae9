//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "CPPOCKPT"
//! format   u32      1
//! features u64
//! vocab    u64
//! version  u64
//! weights  f64 × features·vocab, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

const MAGIC: &[u8; 8] = b"CPPOCKPT";
const FORMAT: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 8 + 8;

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + params.weights().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT.to_le_bytes());
    out.extend_from_slice(&(params.feature_dim() as u64).to_le_bytes());
    out.extend_from_slice(&(params.vocab_size() as u64).to_le_bytes());
    out.extend_from_slice(&params.version().to_le_bytes());
    for w in params.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PolicyParams> {
    let bad = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint header".into()));
    }
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
    let format = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    if format != FORMAT {
        return Err(bad(format!("unsupported format {format}")));
    }
    let features = u64_at(12) as usize;
    let vocab = u64_at(20) as usize;
    let version = u64_at(28);
    let expected = features
        .checked_mul(vocab)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("shape overflow".into()))?;
    if bytes.len() - HEADER != expected {
        return Err(bad(format!(
            "expected {expected} weight bytes for {features}×{vocab}, found {}",
            bytes.len() - HEADER
        )));
    }
    let weights = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    PolicyParams::from_weights(features, vocab, weights, version).map_err(|e| bad(e.to_string()))
}

/// Writes through a temporary file so a crash never leaves a truncated checkpoint.
pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    decode(&fs::read(path)?, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            weights in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 12),
            version in any::<u64>(),
        ) {
            let p = PolicyParams::from_weights(3, 4, weights, version).unwrap();
            let back = decode(&encode(&p), Path::new("mem")).unwrap();
            prop_assert_eq!(back.version(), p.version());
            let a: Vec<u64> = p.weights().iter().map(|w| w.to_bits()).collect();
            let b: Vec<u64> = back.weights().iter().map(|w| w.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_truncated() {
        let p = PolicyParams::zeros(3, 4);
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode(b"nonsense", Path::new("x")).is_err());
    }
}

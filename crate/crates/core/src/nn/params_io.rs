//! Base64-encoded parameter buffers for checkpoints. Buffers are stored in
//! visitation order, so the loader rebuilds the module from its config first
//! and then fills the slices.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::HasParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub len: usize,
    pub data: String,
}

pub fn encode_params<P: HasParams>(p: &P) -> Vec<TensorRecord> {
    p.params()
        .into_iter()
        .map(|s| {
            let mut bytes = Vec::with_capacity(s.len() * 8);
            for v in s {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            TensorRecord {
                len: s.len(),
                data: base64::engine::general_purpose::STANDARD.encode(&bytes),
            }
        })
        .collect()
}

pub fn decode_params<P: HasParams>(p: &mut P, records: &[TensorRecord]) -> Result<()> {
    let mut slices = p.params_mut();
    if slices.len() != records.len() {
        return Err(Error::Artifact(format!(
            "checkpoint has {} tensors, module expects {}",
            records.len(),
            slices.len()
        )));
    }
    for (slice, rec) in slices.iter_mut().zip(records.iter()) {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(&rec.data)
            .map_err(|e| Error::Artifact(format!("checkpoint base64: {e}")))?;
        if rec.len != slice.len() || raw.len() != slice.len() * 8 {
            return Err(Error::Artifact("checkpoint tensor size mismatch".into()));
        }
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            slice[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::derive_rng;

    #[test]
    fn params_round_trip() {
        let lin = Linear::init(5, 4, &mut derive_rng(1, "pio"));
        let recs = encode_params(&lin);
        let mut other = Linear::init(5, 4, &mut derive_rng(2, "pio"));
        decode_params(&mut other, &recs).unwrap();
        assert_eq!(lin.weight, other.weight);
        assert_eq!(lin.bias, other.bias);
        let mut wrong = Linear::init(4, 4, &mut derive_rng(3, "pio"));
        assert!(decode_params(&mut wrong, &recs).is_err());
    }
}

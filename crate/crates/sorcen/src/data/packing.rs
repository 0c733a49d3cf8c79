//! Minimal-width bit packing of token records.
//!
//! Tokens are stored at `ceil(log2 vocab)` bits each, laid out LSB-first in a
//! little-endian bitstream and zero-padded to a byte boundary. A 256-token
//! record over a 1024-word vocabulary therefore costs 320 bytes, which is
//! what makes a 1.28M-record dataset fit in ~0.38 GiB.

use crate::error::{Result, SorcenError};

/// Bits needed per token: `ceil(log2 vocab)`. Vocabulary must be at least 2.
pub fn bits_per_token(vocab: u32) -> usize {
    assert!(vocab >= 2, "vocabulary must have at least 2 entries");
    (32 - (vocab - 1).leading_zeros()) as usize
}

/// Packed size in bytes of one record.
pub fn payload_bytes(seq_len: usize, vocab: u32) -> usize {
    (seq_len * bits_per_token(vocab)).div_ceil(8)
}

/// Pack `ids` into the minimal-width little-endian bitstream.
pub fn pack_record(ids: &[u32], vocab: u32) -> Result<Vec<u8>> {
    let width = bits_per_token(vocab);
    let mut out = vec![0u8; payload_bytes(ids.len(), vocab)];
    for (position, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(SorcenError::TokenOutOfRange { id, position, vocab });
        }
        let base = position * width;
        for bit in 0..width {
            if id >> bit & 1 == 1 {
                let p = base + bit;
                out[p / 8] |= 1 << (p % 8);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_record`]. Rejects wrong payload lengths and decoded ids
/// outside the vocabulary (a corrupt stream).
pub fn unpack_record(bytes: &[u8], vocab: u32, seq_len: usize) -> Result<Vec<u32>> {
    let width = bits_per_token(vocab);
    let expected = payload_bytes(seq_len, vocab);
    if bytes.len() != expected {
        return Err(SorcenError::PayloadLength { expected, actual: bytes.len() });
    }
    let mut ids = Vec::with_capacity(seq_len);
    for position in 0..seq_len {
        let base = position * width;
        let mut id = 0u32;
        for bit in 0..width {
            let p = base + bit;
            if bytes[p / 8] >> (p % 8) & 1 == 1 {
                id |= 1 << bit;
            }
        }
        if id >= vocab {
            return Err(SorcenError::TokenOutOfRange { id, position, vocab });
        }
        ids.push(id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn record_width_matches_storage_arithmetic() {
        // 256 tokens at 10 bits each -> 320 bytes
        assert_eq!(payload_bytes(256, 1024), 320);
        let ids = vec![0u32; 256];
        assert_eq!(pack_record(&ids, 1024).unwrap().len(), 320);
    }

    #[test]
    fn single_set_bit() {
        assert_eq!(pack_record(&[1], 2).unwrap(), vec![0x01]);
    }

    #[test]
    fn all_zero_bytes_decode_to_zero_ids() {
        let ids = unpack_record(&[0u8; 320], 1024, 256).unwrap();
        assert!(ids.iter().all(|&t| t == 0));
    }

    #[test]
    fn id_out_of_range_reports_position() {
        let err = pack_record(&[0, 5, 0], 4).unwrap_err();
        match err {
            crate::SorcenError::TokenOutOfRange { id, position, vocab } => {
                assert_eq!((id, position, vocab), (5, 1, 4));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let err = unpack_record(&[0u8; 10], 1024, 256).unwrap_err().to_string();
        assert!(err.contains("320") && err.contains("10"), "{err}");
    }

    #[test]
    fn corrupt_stream_rejected() {
        // width 5 for vocab 17; an all-ones byte decodes to 31 >= 17
        let err = unpack_record(&[0xff], 17, 1).unwrap_err();
        assert!(matches!(err, crate::SorcenError::TokenOutOfRange { .. }));
    }

    #[test]
    fn roundtrip_across_vocab_sizes() {
        let mut rng = Prng::seeded(77);
        for vocab in [2u32, 17, 64, 1024, 4096] {
            for _ in 0..200 {
                let len = 1 + rng.below(40) as usize;
                let ids: Vec<u32> = (0..len).map(|_| rng.below(vocab as u64) as u32).collect();
                let packed = pack_record(&ids, vocab).unwrap();
                assert_eq!(unpack_record(&packed, vocab, len).unwrap(), ids);
            }
        }
    }
}

//! Precomputed semantic-token datasets: bit-packed storage and a synthetic
//! generator that stands in for tokenizer output at desk scale.

mod dataset;
mod packing;
mod synthetic;

pub use dataset::{read_dataset, write_dataset, DatasetReader, HEADER_BYTES, MAGIC, VERSION};
pub use packing::{bits_per_token, pack_record, payload_bytes, unpack_record};
pub use synthetic::{generate_synthetic, generate_synthetic_range, SyntheticSpec};

use crate::error::{Result, SorcenError};

/// One image as a fixed-length sequence of integer semantic tokens,
/// each in `[0, vocab)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: u32) -> Result<Self> {
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(SorcenError::TokenOutOfRange { id, position, vocab });
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fixed-size header of a `.stok` file. All integers little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub vocab: u32,
    pub seq_len: u32,
    pub count: u64,
    pub labeled: bool,
}

impl DatasetHeader {
    pub fn new(vocab: u32, seq_len: u32, count: u64, labeled: bool) -> Self {
        DatasetHeader { version: VERSION, vocab, seq_len, count, labeled }
    }

    /// Packed bytes of one record under this header.
    pub fn payload_bytes(&self) -> usize {
        payload_bytes(self.seq_len as usize, self.vocab)
    }

    /// Total file size implied by the header.
    pub fn file_bytes(&self) -> u64 {
        let labels = if self.labeled { 4 * self.count } else { 0 };
        HEADER_BYTES as u64 + self.count * self.payload_bytes() as u64 + labels
    }
}

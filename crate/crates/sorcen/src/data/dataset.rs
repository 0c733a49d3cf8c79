//! `.stok` file I/O: header, packed records, trailing label block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::packing::{pack_record, unpack_record};
use super::{DatasetHeader, TokenSequence};
use crate::error::{Result, SorcenError};

pub const MAGIC: [u8; 4] = *b"STOK";
pub const VERSION: u16 = 1;
/// magic + version + vocab + seq_len + count + label flag
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 8 + 1;

fn encode_header(h: &DatasetHeader) -> [u8; HEADER_BYTES] {
    let mut out = [0u8; HEADER_BYTES];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..6].copy_from_slice(&h.version.to_le_bytes());
    out[6..10].copy_from_slice(&h.vocab.to_le_bytes());
    out[10..14].copy_from_slice(&h.seq_len.to_le_bytes());
    out[14..22].copy_from_slice(&h.count.to_le_bytes());
    out[22] = h.labeled as u8;
    out
}

fn decode_header(bytes: &[u8; HEADER_BYTES]) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != MAGIC {
        return Err(SorcenError::BadMagic { expected: MAGIC, actual: magic });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(SorcenError::BadVersion(version));
    }
    Ok(DatasetHeader {
        version,
        vocab: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        seq_len: u32::from_le_bytes(bytes[10..14].try_into().unwrap()),
        count: u64::from_le_bytes(bytes[14..22].try_into().unwrap()),
        labeled: bytes[22] != 0,
    })
}

/// Write a dataset file: header, then packed records contiguously, then one
/// u32 label per record when labeled.
pub fn write_dataset(
    path: impl AsRef<Path>,
    vocab: u32,
    seq_len: u32,
    records: &[TokenSequence],
    labels: Option<&[u32]>,
) -> Result<DatasetHeader> {
    let path = path.as_ref();
    if let Some(labels) = labels {
        if labels.len() != records.len() {
            return Err(SorcenError::CountMismatch {
                header: records.len() as u64,
                actual: labels.len() as u64,
            });
        }
    }
    let header = DatasetHeader::new(vocab, seq_len, records.len() as u64, labels.is_some());
    let file = File::create(path).map_err(|e| SorcenError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| SorcenError::io(path.display().to_string(), e);
    w.write_all(&encode_header(&header)).map_err(io_err)?;
    for record in records {
        if record.len() != seq_len as usize {
            return Err(SorcenError::invalid(format!(
                "record length {} does not match header seq_len {seq_len}",
                record.len()
            )));
        }
        let packed = pack_record(&record.ids, vocab)?;
        w.write_all(&packed).map_err(io_err)?;
    }
    if let Some(labels) = labels {
        for &label in labels {
            w.write_all(&label.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(header)
}

/// Read a whole dataset into memory. Exact inverse of [`write_dataset`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<TokenSequence>, Option<Vec<u32>>)> {
    let mut reader = DatasetReader::open(&path)?;
    let header = reader.header().clone();
    let mut records = Vec::with_capacity(header.count as usize);
    for i in 0..header.count {
        records.push(reader.record(i)?);
    }
    let labels = if header.labeled {
        let mut labels = Vec::with_capacity(header.count as usize);
        for i in 0..header.count {
            labels.push(reader.label(i)?);
        }
        Some(labels)
    } else {
        None
    };
    Ok((header, records, labels))
}

/// Random-access reader that never loads the whole file. Open one per
/// thread; disjoint record ranges can then be read concurrently.
pub struct DatasetReader {
    reader: BufReader<File>,
    header: DatasetHeader,
    payload: usize,
    path: String,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let file = File::open(path.as_ref()).map_err(|e| SorcenError::io(&path_str, e))?;
        let expected_len = file.metadata().map_err(|e| SorcenError::io(&path_str, e))?.len();
        let mut reader = BufReader::new(file);
        let mut raw = [0u8; HEADER_BYTES];
        reader.read_exact(&mut raw).map_err(|e| SorcenError::io(&path_str, e))?;
        let header = decode_header(&raw)?;
        let payload = header.payload_bytes();
        if header.file_bytes() != expected_len {
            return Err(SorcenError::CountMismatch {
                header: header.file_bytes(),
                actual: expected_len,
            });
        }
        Ok(DatasetReader { reader, header, payload, path: path_str })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn seek_read(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.reader
            .seek(SeekFrom::Start(offset))
            .and_then(|_| self.reader.read_exact(buf))
            .map_err(|e| SorcenError::io(&self.path, e))
    }

    pub fn record(&mut self, index: u64) -> Result<TokenSequence> {
        if index >= self.header.count {
            return Err(SorcenError::invalid(format!(
                "record {index} out of range ({} records)",
                self.header.count
            )));
        }
        let mut buf = vec![0u8; self.payload];
        self.seek_read(HEADER_BYTES as u64 + index * self.payload as u64, &mut buf)?;
        let ids = unpack_record(&buf, self.header.vocab, self.header.seq_len as usize)?;
        Ok(TokenSequence { ids })
    }

    pub fn label(&mut self, index: u64) -> Result<u32> {
        if !self.header.labeled {
            return Err(SorcenError::invalid("dataset has no label section"));
        }
        if index >= self.header.count {
            return Err(SorcenError::invalid(format!(
                "label {index} out of range ({} records)",
                self.header.count
            )));
        }
        let labels_start = HEADER_BYTES as u64 + self.header.count * self.payload as u64;
        let mut buf = [0u8; 4];
        self.seek_read(labels_start + 4 * index, &mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sorcen-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let path = tmp("empty.stok");
        let header = write_dataset(&path, 64, 16, &[], None).unwrap();
        assert_eq!(header.count, 0);
        let (read_header, records, labels) = read_dataset(&path).unwrap();
        assert_eq!(read_header, header);
        assert!(records.is_empty());
        assert!(labels.is_none());
    }

    #[test]
    fn labeled_records_roundtrip_bit_exactly() {
        let mut rng = Prng::seeded(5);
        let (vocab, seq_len, n) = (1024u32, 64u32, 1000usize);
        let records: Vec<TokenSequence> = (0..n)
            .map(|_| TokenSequence {
                ids: (0..seq_len).map(|_| rng.below(vocab as u64) as u32).collect(),
            })
            .collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.below(10) as u32).collect();
        let path = tmp("labeled.stok");
        write_dataset(&path, vocab, seq_len, &records, Some(&labels)).unwrap();
        let (_, read_records, read_labels) = read_dataset(&path).unwrap();
        assert_eq!(read_records, records);
        assert_eq!(read_labels.unwrap(), labels);
    }

    #[test]
    fn file_size_matches_header_arithmetic() {
        let mut rng = Prng::seeded(6);
        let (vocab, seq_len, n) = (17u32, 9u32, 21usize);
        let records: Vec<TokenSequence> = (0..n)
            .map(|_| TokenSequence {
                ids: (0..seq_len).map(|_| rng.below(vocab as u64) as u32).collect(),
            })
            .collect();
        let labels: Vec<u32> = vec![0; n];
        let path = tmp("sized.stok");
        let header = write_dataset(&path, vocab, seq_len, &records, Some(&labels)).unwrap();
        let actual = std::fs::metadata(&path).unwrap().len();
        assert_eq!(actual, header.file_bytes());
        assert_eq!(actual, HEADER_BYTES as u64 + n as u64 * header.payload_bytes() as u64 + 4 * n as u64);
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("bad_magic.stok");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(DatasetReader::open(&path), Err(SorcenError::BadMagic { .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut rng = Prng::seeded(8);
        let records: Vec<TokenSequence> = (0..4)
            .map(|_| TokenSequence { ids: (0..16).map(|_| rng.below(64) as u32).collect() })
            .collect();
        let path = tmp("truncated.stok");
        write_dataset(&path, 64, 16, &records, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(DatasetReader::open(&path), Err(SorcenError::CountMismatch { .. })));
    }

    #[test]
    fn streaming_reader_reads_single_records() {
        let mut rng = Prng::seeded(9);
        let records: Vec<TokenSequence> = (0..10)
            .map(|_| TokenSequence { ids: (0..8).map(|_| rng.below(32) as u32).collect() })
            .collect();
        let path = tmp("stream.stok");
        write_dataset(&path, 32, 8, &records, None).unwrap();
        let mut reader = DatasetReader::open(&path).unwrap();
        assert_eq!(reader.record(7).unwrap(), records[7]);
        assert_eq!(reader.record(0).unwrap(), records[0]);
        assert!(reader.record(10).is_err());
    }
}

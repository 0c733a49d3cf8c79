//! Checkpoint serialization.
//!
//! Layout: magic, version, element width, network config, run metadata,
//! then four blob sections — student, teacher, optimizer first moments,
//! optimizer second moments. Blobs are `(name length, name, shape, data)`
//! with all integers and floats little-endian. Element width follows the
//! trainer's precision, so resuming in the same precision is bit-exact.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{DropoutSite, NetworkConfig};
use crate::autodiff::{Dtype, ParamStore, Scalar};
use crate::error::{Result, SorcenError};

pub const CKPT_MAGIC: [u8; 4] = *b"SORC";
pub const CKPT_VERSION: u16 = 1;

/// Trainer bookkeeping carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    /// Flat `key=value` lines of the resolved training configuration.
    pub config_text: String,
}

pub struct CheckpointData<T: Scalar> {
    pub cfg: NetworkConfig,
    pub meta: TrainMeta,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub opt_m: ParamStore<T>,
    pub opt_v: ParamStore<T>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(SorcenError::invalid(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {})",
                self.path, self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_store<T: Scalar>(w: &mut Writer, store: &ParamStore<T>) {
    w.u32(store.len() as u32);
    for (name, p) in store.iter() {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u8(p.values.ndim() as u8);
        for &d in p.values.shape() {
            w.u32(d as u32);
        }
        for v in p.values.iter() {
            v.append_le_bytes(&mut w.buf);
        }
    }
}

fn read_store<T: Scalar>(r: &mut Reader, dtype: Dtype) -> Result<ParamStore<T>> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| SorcenError::invalid("checkpoint parameter name is not utf-8"))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = dtype.byte_width();
        let raw = r.take(n * width)?;
        let data: Vec<T> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        store.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())?;
    }
    Ok(store)
}

fn write_config(w: &mut Writer, cfg: &NetworkConfig) {
    w.u32(cfg.embed_dim as u32);
    w.u32(cfg.enc_depth as u32);
    w.u32(cfg.dec_depth as u32);
    w.u32(cfg.heads as u32);
    w.u32(cfg.mlp_ratio as u32);
    w.u32(cfg.projector_width as u32);
    w.u32(cfg.projector_depth as u32);
    w.u32(cfg.predictor_depth as u32);
    w.u32(cfg.vocab);
    w.u32(cfg.seq_len as u32);
    w.f64(cfg.dropout);
    w.u8(match cfg.dropout_site {
        DropoutSite::None => 0,
        DropoutSite::Encoder => 1,
        DropoutSite::Decoder => 2,
        DropoutSite::Both => 3,
    });
}

fn read_config(r: &mut Reader) -> Result<NetworkConfig> {
    Ok(NetworkConfig {
        embed_dim: r.u32()? as usize,
        enc_depth: r.u32()? as usize,
        dec_depth: r.u32()? as usize,
        heads: r.u32()? as usize,
        mlp_ratio: r.u32()? as usize,
        projector_width: r.u32()? as usize,
        projector_depth: r.u32()? as usize,
        predictor_depth: r.u32()? as usize,
        vocab: r.u32()?,
        seq_len: r.u32()? as usize,
        dropout: r.f64()?,
        dropout_site: match r.u8()? {
            0 => DropoutSite::None,
            1 => DropoutSite::Encoder,
            2 => DropoutSite::Decoder,
            3 => DropoutSite::Both,
            other => return Err(SorcenError::invalid(format!("bad dropout site tag {other}"))),
        },
    })
}

pub fn write_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &NetworkConfig,
    meta: &TrainMeta,
    student: &ParamStore<T>,
    teacher: &ParamStore<T>,
    opt_m: &ParamStore<T>,
    opt_v: &ParamStore<T>,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(&CKPT_MAGIC);
    w.u16(CKPT_VERSION);
    w.u8(T::DTYPE.byte_width() as u8);
    write_config(&mut w, cfg);
    w.u64(meta.step);
    w.u64(meta.epoch);
    w.u64(meta.seed);
    w.u32(meta.config_text.len() as u32);
    w.bytes(meta.config_text.as_bytes());
    write_store(&mut w, student);
    write_store(&mut w, teacher);
    write_store(&mut w, opt_m);
    write_store(&mut w, opt_v);
    std::fs::write(path.as_ref(), &w.buf)
        .map_err(|e| SorcenError::io(path.as_ref().display().to_string(), e))
}

/// Element type a checkpoint was written with, from the header alone.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<Dtype> {
    use std::io::Read;
    let path_str = path.as_ref().display().to_string();
    let mut file = std::fs::File::open(path.as_ref()).map_err(|e| SorcenError::io(&path_str, e))?;
    let mut head = [0u8; 7];
    file.read_exact(&mut head).map_err(|e| SorcenError::io(&path_str, e))?;
    let magic: [u8; 4] = head[0..4].try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(SorcenError::BadMagic { expected: CKPT_MAGIC, actual: magic });
    }
    let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(SorcenError::BadVersion(version));
    }
    Dtype::from_byte_width(head[6])
        .ok_or_else(|| SorcenError::invalid("bad element width in checkpoint"))
}

/// Load a checkpoint, converting stored values into `T` when the stored
/// precision differs (exact when it matches).
pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<CheckpointData<T>> {
    let path_str = path.as_ref().display().to_string();
    let buf = std::fs::read(path.as_ref()).map_err(|e| SorcenError::io(&path_str, e))?;
    let mut r = Reader { buf: &buf, at: 0, path: path_str };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(SorcenError::BadMagic { expected: CKPT_MAGIC, actual: magic });
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(SorcenError::BadVersion(version));
    }
    let dtype = Dtype::from_byte_width(r.u8()?)
        .ok_or_else(|| SorcenError::invalid("bad element width in checkpoint"))?;
    let cfg = read_config(&mut r)?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| SorcenError::invalid("checkpoint config text is not utf-8"))?;
    let student = read_store(&mut r, dtype)?;
    let teacher = read_store(&mut r, dtype)?;
    let opt_m = read_store(&mut r, dtype)?;
    let opt_v = read_store(&mut r, dtype)?;
    Ok(CheckpointData {
        cfg,
        meta: TrainMeta { step, epoch, seed, config_text },
        student,
        teacher,
        opt_m,
        opt_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::rng::Prng;

    #[test]
    fn checkpoint_roundtrips_exactly() {
        let mut rng = Prng::seeded(31);
        let cfg = NetworkConfig {
            embed_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projector_width: 6,
            projector_depth: 2,
            predictor_depth: 2,
            vocab: 7,
            seq_len: 4,
            dropout: 0.0,
            dropout_site: DropoutSite::Decoder,
        };
        let model = Model::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let meta = TrainMeta { step: 42, epoch: 3, seed: 9, config_text: "epochs=30\n".into() };
        let empty = ParamStore::<f64>::new();
        let dir = std::env::temp_dir().join("sorcen-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.sorc");
        write_checkpoint(&path, &cfg, &meta, &model.student, &model.teacher, &empty, &empty).unwrap();
        let loaded = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.student.len(), model.student.len());
        for (name, p) in model.student.iter() {
            assert_eq!(&loaded.student.get(name).unwrap().values, &p.values, "{name}");
        }
        for (name, p) in model.teacher.iter() {
            assert_eq!(&loaded.teacher.get(name).unwrap().values, &p.values, "{name}");
        }
        assert_eq!(loaded.opt_m.len(), 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("sorcen-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.sorc");
        std::fs::write(&path, b"XXXX0123456789").unwrap();
        assert!(matches!(read_checkpoint::<f64>(&path), Err(SorcenError::BadMagic { .. })));
    }
}

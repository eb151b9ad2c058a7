//! Binary checkpoint: `DTPM`, u32 version, the model configuration as seven
//! u32 words, u32 parameter count, then per parameter a length-prefixed name,
//! u32 rank, u32 dims and the little-endian f32 payload.

use std::path::Path;

use super::{Branches, Dtpn, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTPM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn branches_code(b: Branches) -> u32 {
    match b {
        Branches::Both => 0,
        Branches::Conv => 1,
        Branches::Pool => 2,
    }
}

pub fn encode_checkpoint(model: &Dtpn<f32>) -> Vec<u8> {
    let c = model.config();
    let mut buf = Vec::new();
    let put = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put(&mut buf, CHECKPOINT_VERSION);
    for v in [
        c.scales,
        c.base_segments,
        c.feature_dim,
        c.branch_filters,
        c.head_kernel,
        c.num_classes,
    ] {
        put(&mut buf, v as u32);
    }
    put(&mut buf, branches_code(c.branches));
    let params = model.params();
    put(&mut buf, params.len() as u32);
    for p in params {
        put(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put(&mut buf, p.shape.len() as u32);
        for &d in &p.shape {
            put(&mut buf, d as u32);
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Dtpn<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut words = [0usize; 6];
    for w in &mut words {
        *w = r.u32()? as usize;
    }
    let branches = match r.u32()? {
        0 => Branches::Both,
        1 => Branches::Conv,
        2 => Branches::Pool,
        other => return Err(Error::format(path, format!("unknown branch mode {other}"))),
    };
    let config = ModelConfig {
        scales: words[0],
        base_segments: words[1],
        feature_dim: words[2],
        branch_filters: words[3],
        head_kernel: words[4],
        num_classes: words[5],
        branches,
    };
    let mut model = Dtpn::zeroed(config)
        .map_err(|e| Error::format(path, format!("invalid stored configuration: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::format(
            path,
            format!("{count} parameter blocks stored, configuration needs {}", params.len()),
        ));
    }
    for p in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        if name != p.name {
            return Err(Error::format(
                path,
                format!("expected parameter {}, found {name}", p.name),
            ));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank.min(8) {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape {
            return Err(Error::format(
                path,
                format!("{name}: stored shape {shape:?}, expected {:?}", p.shape),
            ));
        }
        let payload = r.take(4 * p.value.len())?;
        for (v, c) in p.value.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Dtpn<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Dtpn<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            scales: 3,
            base_segments: 4,
            feature_dim: 5,
            branch_filters: 3,
            head_kernel: 3,
            num_classes: 2,
            branches: Branches::Both,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model: Dtpn<f32> = Dtpn::new(config(), 9).unwrap();
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = encode_checkpoint(&Dtpn::new(config(), 1).unwrap());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_checkpoint(&extra, Path::new("m")).is_err());
        let mut bad = bytes;
        bad[0] = b'Z';
        assert!(decode_checkpoint(&bad, Path::new("m")).is_err());
    }
}

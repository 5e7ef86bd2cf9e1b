//! Adapter-only binary checkpoints.
//!
//! Layout, all little-endian: `b"PETL"`, `u32` version, `u32` tensor count,
//! then per tensor `u16` name length, UTF-8 name, `u8` dtype (0 = f32,
//! 1 = f64), `u8` rank, `u64` dims, row-major payload. A CRC32 of every
//! preceding byte closes the file.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PETL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

pub type State = Vec<(String, Tensor)>;

/// Trainable tensors of `p`, in visit order.
pub fn adapter_state(p: &dyn Parameters) -> State {
    let mut out = Vec::new();
    p.visit(&mut |name, t| {
        if t.requires_grad() {
            let mut c = t.clone();
            c.set_requires_grad(false);
            out.push((name.to_string(), c));
        }
    });
    out
}

pub fn encode(state: &[(String, Tensor)], dtype: Dtype) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(state.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in state {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype.code());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<State> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Corruption { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let data: Vec<f64> = match dtype {
            0 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_adapter(state: &[(String, Tensor)], path: &Path, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode(state, dtype)?)
}

pub fn load_adapter(path: &Path) -> Result<State> {
    decode(&fs::read(path)?)
}

/// Copies `state` into the trainable tensors of `p`. Every trainable tensor
/// must be present with the same shape and nothing else may be supplied.
pub fn apply_adapter(p: &mut dyn Parameters, state: &[(String, Tensor)]) -> Result<()> {
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    p.visit(&mut |name, t| {
        if t.requires_grad() {
            expected.push((name.to_string(), t.shape().to_vec()));
        }
    });
    for (name, shape) in &expected {
        match state.iter().find(|(n, _)| n == name) {
            None => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    found: vec![],
                    expected: shape.clone(),
                })
            }
            Some((_, t)) if t.shape() != shape.as_slice() => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((extra, t)) = state.iter().find(|(n, _)| !expected.iter().any(|(e, _)| e == n)) {
        return Err(Error::Incompatible {
            name: extra.clone(),
            found: t.shape().to_vec(),
            expected: vec![],
        });
    }
    p.visit_mut(&mut |name, t| {
        if t.requires_grad() {
            if let Some((_, src)) = state.iter().find(|(n, _)| n == name) {
                t.data_mut().copy_from_slice(src.data());
            }
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> State {
        vec![
            ("a.U".into(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]).unwrap()),
            ("a.gamma".into(), Tensor::scalar(1.0)),
        ]
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample(), Dtype::F64).unwrap();
        assert_eq!(&b[..4], b"PETL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 3);
        assert_eq!(&b[14..17], b"a.U");
        assert_eq!(b[17], 1);
        assert_eq!(b[18], 2);
        // header + two records + crc
        let rec1 = 2 + 3 + 2 + 16 + 6 * 8;
        let rec2 = 2 + 7 + 2 + 8;
        assert_eq!(b.len(), 12 + rec1 + rec2 + 4);
    }

    #[test]
    fn round_trip_both_dtypes() {
        for dt in [Dtype::F32, Dtype::F64] {
            let back = decode(&encode(&sample(), dt).unwrap()).unwrap();
            for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
                assert_eq!(n1, n2);
                let expect: Vec<f64> = match dt {
                    Dtype::F32 => t1.data().iter().map(|&v| v as f32 as f64).collect(),
                    Dtype::F64 => t1.data().to_vec(),
                };
                assert_eq!(t2.shape(), t1.shape());
                assert_eq!(t2.data(), expect.as_slice());
            }
        }
    }

    #[test]
    fn detects_damage() {
        let good = encode(&sample(), Dtype::F64).unwrap();
        let mut bad = good.clone();
        bad[30] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Corruption { .. })));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Format(_))));
        assert!(decode(&good[..good.len() - 1]).is_err());
        let dup = vec![sample()[0].clone(), sample()[0].clone()];
        assert!(encode(&dup, Dtype::F64).is_err());
    }
}

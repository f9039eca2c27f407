//! Versioned binary weight container.
//!
//! Layout (all integers little-endian):
//!   magic "MYOW" | format version u32 | tensor*
//! where each tensor is
//!   name length u32 | name UTF-8 bytes | rank u32 | dims u32 * rank |
//!   f32 data (little-endian), product(dims) values.
//! Tensors follow until end of file. Round-trips are bit-exact.

use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MYOW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn save_weights(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let tmp = crate::manifest::temp_sibling(path);
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let werr = |e| Error::io(path, e);
        w.write_all(WEIGHTS_MAGIC).map_err(werr)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(werr)?;
        for (name, dims, data) in tensors {
            let expect: usize = dims.iter().product();
            if expect != data.len() {
                return Err(Error::Dimension(format!(
                    "tensor `{name}`: dims {dims:?} vs {} values",
                    data.len()
                )));
            }
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
            w.write_all(name.as_bytes()).map_err(werr)?;
            w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(werr)?;
            for &d in dims {
                w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes()).map_err(werr)?;
            }
        }
        w.flush().map_err(werr)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected MYOW",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported weights version {version}",
            path.display()
        )));
    }
    let mut tensors = Vec::new();
    loop {
        // name length or clean EOF
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf).map_err(|e| Error::io(path, e))? {
            0 => break,
            4 => {}
            n => {
                // partial header
                let mut rest = vec![0u8; 4 - n];
                r.read_exact(&mut rest)
                    .map_err(|_| truncated(path))
                    .and(Err(truncated(path)))?;
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Format(format!(
                "{}: implausible tensor name length {name_len}",
                path.display()
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!(
                "{}: implausible tensor rank {rank}",
                path.display()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, path)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = vec![0f32; count];
        let mut buf = vec![0u8; count * 4];
        read_exact(&mut r, &mut buf, path)?;
        for (v, chunk) in data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        tensors.push((name, dims, data));
    }
    Ok(tensors)
}

fn truncated(path: &Path) -> Error {
    Error::Format(format!("{}: truncated weights file", path.display()))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated(path))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.myow");
        let tensors = vec![
            ("a.weight".to_string(), vec![2, 3], vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30]),
            ("a.bias".to_string(), vec![1], vec![0.125]),
        ];
        save_weights(&path, &tensors).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(tensors, loaded);
        // byte-level determinism
        save_weights(&dir.path().join("w2.myow"), &tensors).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("w2.myow")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.myow");
        save_weights(
            &path,
            &[("t.weight".to_string(), vec![4], vec![1.0, 2.0, 3.0, 4.0])],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.myow");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_weights(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.myow");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Format(_))));
    }
}

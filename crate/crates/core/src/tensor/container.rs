//! Binary tensor container shared by feature and weight files.
//!
//! Layout (all integers little-endian):
//! magic `DRCT`, u32 version = 1, u32 entry count; per entry: u32 name
//! length, UTF-8 name, u32 ndim, ndim x u32 dims, then f32 row-major
//! payload. A rank-0 entry (ndim = 0) holds a single scalar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DRCT";
pub const VERSION: u32 = 1;

pub fn save<P: AsRef<Path>>(path: P, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        let dims = t.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

/// Save every entry of a parameter store (a checkpoint).
pub fn save_params<P: AsRef<Path>>(path: P, params: &ParamStore) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = params.iter().collect();
    save(path, &entries)
}

/// Load a checkpoint; every entry is marked trainable unless its name is in
/// `frozen`.
pub fn load_params<P: AsRef<Path>>(path: P, frozen: &[&str]) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    for (name, t) in load(path)? {
        let t = if frozen.contains(&name.as_str()) {
            t
        } else {
            Tensor::param(&t.dims(), t.to_vec())?
        };
        ps.insert(&name, t)?;
    }
    Ok(ps)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated container file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.drct");
        let a = Tensor::new(&[2, 3], vec![1.0, -2.5, 0.25, 3.0, 4.5, -0.125]).unwrap();
        let s = Tensor::scalar(8.0);
        save(&p, &[("data", &a), ("stride", &s)]).unwrap();
        let loaded = load(&p).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "data");
        assert_eq!(loaded[0].1.dims(), vec![2, 3]);
        assert_eq!(loaded[0].1.to_vec(), a.to_vec());
        assert_eq!(loaded[1].1.dims(), Vec::<usize>::new());
        assert_eq!(loaded[1].1.value(), 8.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.drct");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.drct");
        let a = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save(&p, &[("data", &a)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&p), Err(Error::Format(_))));
    }
}

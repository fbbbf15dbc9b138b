//! Binary PGM (P5) and PPM (P6) image I/O.
//!
//! Grayscale values are scaled to [0,1]; RGB input is converted to
//! grayscale with the 0.299/0.587/0.114 weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load a P5/P6 image as a [1,H,W] tensor in [0,1].
pub fn load_gray<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_gray(&bytes)
}

fn parse_gray(bytes: &[u8]) -> Result<Tensor> {
    let (magic, rest) = next_token(bytes).ok_or_else(|| Error::Format("empty image".into()))?;
    let rgb = match magic {
        b"P5" => false,
        b"P6" => true,
        _ => return Err(Error::Format("expected P5 or P6 magic".into())),
    };
    let (w, rest) = next_usize(rest)?;
    let (h, rest) = next_usize(rest)?;
    let (maxval, rest) = next_usize(rest)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates the header from the raster
    let raster = &rest[1..];
    let per_px = if rgb { 3 } else { 1 };
    if raster.len() < w * h * per_px {
        return Err(Error::Format("truncated raster".into()));
    }
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let v = if rgb {
            let p = &raster[i * 3..i * 3 + 3];
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        } else {
            raster[i] as f64
        };
        data.push(v * scale);
    }
    Tensor::new(&[1, h, w], data)
}

fn next_token(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let mut i = 0;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    if i >= bytes.len() {
        return None;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    Some((&bytes[start..i], &bytes[i..]))
}

fn next_usize(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let (tok, rest) = next_token(bytes).ok_or_else(|| Error::Format("truncated header".into()))?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::Format("bad header token".into()))?;
    let v = s
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad header value {s:?}")))?;
    Ok((v, rest))
}

/// Write a [1,H,W] tensor in [0,1] as binary PGM.
pub fn save_pgm<P: AsRef<Path>>(path: P, image: &Tensor) -> Result<()> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(Error::Shape(format!("save_pgm: dims {:?}", d)));
    }
    let (h, w) = (d[1], d[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let data = image.data();
    let bytes: Vec<u8> = data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Write interleaved RGB bytes as binary PPM.
pub fn save_ppm<P: AsRef<Path>>(path: P, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Shape("save_ppm: buffer size mismatch".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()?;
    Ok(())
}

/// Read back a P6 file as raw RGB bytes (used by the visualizer tests).
pub fn load_ppm<P: AsRef<Path>>(path: P) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let (magic, rest) = next_token(&bytes).ok_or_else(|| Error::Format("empty image".into()))?;
    if magic != b"P6" {
        return Err(Error::Format("expected P6 magic".into()));
    }
    let (w, rest) = next_usize(rest)?;
    let (h, rest) = next_usize(rest)?;
    let (_maxval, rest) = next_usize(rest)?;
    let raster = &rest[1..];
    if raster.len() < w * h * 3 {
        return Err(Error::Format("truncated raster".into()));
    }
    Ok((raster[..w * h * 3].to_vec(), w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let img = Tensor::new(&[1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        save_pgm(&p, &img).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(back.dims(), vec![1, 2, 3]);
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_is_grayscaled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        save_ppm(&p, &[255, 0, 0, 0, 255, 0], 2, 1).unwrap();
        let img = load_gray(&p).unwrap();
        let d = img.to_vec();
        assert!((d[0] - 0.299).abs() < 1e-9);
        assert!((d[1] - 0.587).abs() < 1e-9);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P3\n1 1\n255\n0").unwrap();
        assert!(matches!(load_gray(&p), Err(Error::Format(_))));
    }
}

//! Deterministic synthetic scene generation for tests and demos.
//!
//! A smoothed-noise grayscale image is warped by a known homography to
//! produce a second view, along with ground-truth pixel correspondences
//! sampled from the overlap region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::Homography;
use crate::tensor::Tensor;
use crate::training::KeypointAnnotation;

#[derive(Clone, Copy, Debug)]
pub enum WarpKind {
    Translation { dx: f64, dy: f64 },
    Affine,
    Projective,
}

impl WarpKind {
    pub fn parse(s: &str) -> Result<WarpKind> {
        match s {
            "affine" => Ok(WarpKind::Affine),
            "projective" => Ok(WarpKind::Projective),
            other => {
                // "translation" or "translation:dx,dy"
                let (tag, args) = other.split_once(':').unwrap_or((other, "8,4"));
                if tag != "translation" {
                    return Err(Error::Config(format!("unknown warp kind {other:?}")));
                }
                let (dx, dy) = args
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("bad translation spec {args:?}")))?;
                Ok(WarpKind::Translation {
                    dx: dx.trim().parse().map_err(|_| {
                        Error::Config(format!("bad translation offset {dx:?}"))
                    })?,
                    dy: dy.trim().parse().map_err(|_| {
                        Error::Config(format!("bad translation offset {dy:?}"))
                    })?,
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub homography: Homography,
    /// Pixel pairs (pixel in A, exact warped pixel in B), both in bounds.
    pub annotations: KeypointAnnotation,
}

/// Smoothed uniform noise in [0,1], shape [1,h,w].
fn noise_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Tensor {
    let raw: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
    let radius = 2i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += raw[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y as usize * w + x as usize] = acc / n;
        }
    }
    Tensor::new(&[1, h, w], out).expect("noise image shape")
}

/// Bilinear sample with zero padding outside the image.
fn sample(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (ix, wx) in [(x0 as i64, 1.0 - fx), (x0 as i64 + 1, fx)] {
        if wx == 0.0 {
            continue;
        }
        for (iy, wy) in [(y0 as i64, 1.0 - fy), (y0 as i64 + 1, fy)] {
            if wy == 0.0 || ix < 0 || iy < 0 || ix as usize >= w || iy as usize >= h {
                continue;
            }
            acc += wx * wy * img[iy as usize * w + ix as usize];
        }
    }
    acc
}

fn build_homography(rng: &mut ChaCha8Rng, kind: WarpKind, w: usize, h: usize) -> Result<Homography> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    match kind {
        WarpKind::Translation { dx, dy } => Ok(Homography::translation(dx, dy)),
        WarpKind::Affine | WarpKind::Projective => {
            let ang: f64 = rng.gen_range(-0.08..0.08f64);
            let scale = rng.gen_range(0.95..1.05);
            let shear = rng.gen_range(-0.03..0.03);
            let (tx, ty) = (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            let (c, s) = (ang.cos() * scale, ang.sin() * scale);
            // rotate/scale/shear about the image centre, then translate
            let a = [[c, -s + shear, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = a[i][j];
                }
            }
            m[0][2] = cx - (a[0][0] * cx + a[0][1] * cy) + tx;
            m[1][2] = cy - (a[1][0] * cx + a[1][1] * cy) + ty;
            if matches!(kind, WarpKind::Projective) {
                m[2][0] = rng.gen_range(-1e-4..1e-4);
                m[2][1] = rng.gen_range(-1e-4..1e-4);
            }
            Homography::new(m)
        }
    }
}

/// Generate a two-view scene. The second image is the first, inverse-
/// warped through the homography (so `h` maps A pixels to B pixels); an
/// identity warp reproduces the first image bit for bit.
pub fn synth(
    seed: u64,
    size: (usize, usize),
    kind: WarpKind,
    n_annotations: usize,
) -> Result<SyntheticScene> {
    let (w, h) = size;
    if w < 8 || h < 8 {
        return Err(Error::Generation(format!("image {w}x{h} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_a = noise_image(&mut rng, w, h);
    let hom = build_homography(&mut rng, kind, w, h)?;
    let inv = hom.inverse()?;

    let av = image_a.to_vec();
    let identity = hom.m == Homography::identity().m;
    let image_b = if identity {
        Tensor::new(&[1, h, w], av.clone())?
    } else {
        let mut bv = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.warp((x as f64, y as f64))?;
                bv[y * w + x] = sample(&av, w, h, sx, sy);
            }
        }
        Tensor::new(&[1, h, w], bv)?
    };

    // sample annotations whose warped point stays inside B
    let margin = 1.0;
    let mut annotations = Vec::with_capacity(n_annotations);
    let mut attempts = 0usize;
    let budget = n_annotations.max(1) * 1000;
    while annotations.len() < n_annotations {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Generation(format!(
                "could not place {n_annotations} correspondences in the view overlap \
                 (got {})",
                annotations.len()
            )));
        }
        let src = (
            rng.gen_range(margin..w as f64 - 1.0 - margin),
            rng.gen_range(margin..h as f64 - 1.0 - margin),
        );
        let dst = match hom.warp(src) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if dst.0 >= margin
            && dst.0 <= w as f64 - 1.0 - margin
            && dst.1 >= margin
            && dst.1 <= h as f64 - 1.0 - margin
        {
            annotations.push((src, dst));
        }
    }

    Ok(SyntheticScene {
        image_a,
        image_b,
        homography: hom,
        annotations: KeypointAnnotation::new(annotations),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth(7, (32, 24), WarpKind::Affine, 16).unwrap();
        let b = synth(7, (32, 24), WarpKind::Affine, 16).unwrap();
        assert_eq!(a.image_a.to_vec(), b.image_a.to_vec());
        assert_eq!(a.image_b.to_vec(), b.image_b.to_vec());
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.homography.m, b.homography.m);
        let c = synth(8, (32, 24), WarpKind::Affine, 16).unwrap();
        assert_ne!(a.image_a.to_vec(), c.image_a.to_vec());
    }

    #[test]
    fn identity_translation_copies_bitwise() {
        let s = synth(3, (20, 20), WarpKind::Translation { dx: 0.0, dy: 0.0 }, 8).unwrap();
        assert_eq!(s.image_a.to_vec(), s.image_b.to_vec());
        for (src, dst) in &s.annotations.pairs {
            assert_eq!(src, dst);
        }
    }

    #[test]
    fn annotations_satisfy_the_homography() {
        for kind in [
            WarpKind::Translation { dx: 4.0, dy: -2.0 },
            WarpKind::Affine,
            WarpKind::Projective,
        ] {
            let s = synth(11, (48, 40), kind, 32).unwrap();
            assert_eq!(s.annotations.len(), 32);
            for (src, dst) in &s.annotations.pairs {
                let w = s.homography.warp(*src).unwrap();
                assert!((w.0 - dst.0).abs() < 1e-6 && (w.1 - dst.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn integer_translation_shifts_pixels_exactly() {
        let s = synth(5, (24, 24), WarpKind::Translation { dx: 4.0, dy: 2.0 }, 4).unwrap();
        let a = s.image_a.to_vec();
        let b = s.image_b.to_vec();
        for y in 2..24 {
            for x in 4..24 {
                assert_eq!(b[y * 24 + x], a[(y - 2) * 24 + (x - 4)]);
            }
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let s = synth(9, (30, 22), WarpKind::Projective, 8).unwrap();
        for v in s.image_b.to_vec() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn huge_translation_fails_generation() {
        let r = synth(1, (16, 16), WarpKind::Translation { dx: 1000.0, dy: 0.0 }, 8);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn warp_kind_parsing() {
        assert!(matches!(
            WarpKind::parse("translation:3,4").unwrap(),
            WarpKind::Translation { dx, dy } if dx == 3.0 && dy == 4.0
        ));
        assert!(matches!(WarpKind::parse("affine").unwrap(), WarpKind::Affine));
        assert!(matches!(
            WarpKind::parse("projective").unwrap(),
            WarpKind::Projective
        ));
        assert!(WarpKind::parse("rigid").is_err());
    }
}

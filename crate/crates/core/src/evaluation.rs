//! Homography-based match accuracy.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcher::MatchSet;

/// A 3x3 planar homography, normalized so the bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let det = det3(&m);
        if det.abs() <= 1e-12 {
            return Err(Error::Param(format!("singular homography (det {det:e})")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Map a pixel through the homography with perspective division.
    pub fn warp(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let (x, y) = p;
        let w = self.m[2][0] * x + self.m[2][1] * y + self.m[2][2];
        if w.abs() <= 1e-12 {
            return Err(Error::DegeneratePoint);
        }
        let u = (self.m[0][0] * x + self.m[0][1] * y + self.m[0][2]) / w;
        let v = (self.m[1][0] * x + self.m[1][1] * y + self.m[1][2]) / w;
        Ok((u, v))
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = det3(m);
        if det.abs() <= 1e-12 {
            return Err(Error::Param("singular homography".into()));
        }
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b, c, d) = (
                    m[(j + 1) % 3][(i + 1) % 3],
                    m[(j + 1) % 3][(i + 2) % 3],
                    m[(j + 2) % 3][(i + 1) % 3],
                    m[(j + 2) % 3][(i + 2) % 3],
                );
                inv[i][j] = (a * d - b * c) / det;
            }
        }
        Homography::new(inv).map(|h| h.normalized())
    }

    fn normalized(mut self) -> Self {
        let s = self.m[2][2];
        if s != 0.0 && s != 1.0 {
            for row in self.m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        self
    }

    /// Load nine whitespace-separated floats (row-major); the matrix is
    /// rescaled so the bottom-right entry is 1.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad homography value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!(
                "homography file needs 9 values, got {}",
                vals.len()
            )));
        }
        if vals[8].abs() <= 1e-12 {
            return Err(Error::Format("homography has zero scale entry".into()));
        }
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = vals[i * 3 + j] / vals[8];
            }
        }
        Homography::new(m)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut lines = String::new();
        for row in &self.m {
            lines.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
        }
        fs::write(path, lines)?;
        Ok(())
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Mean matching accuracy: the fraction of matches whose warped source
/// lands within `threshold_px` of the destination (a distance exactly at
/// the threshold counts as correct). Degenerate warps count as incorrect.
pub fn mma(set: &MatchSet, h: &Homography, threshold_px: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    if threshold_px < 0.0 {
        return Err(Error::Param(format!(
            "negative threshold {threshold_px}"
        )));
    }
    let mut correct = 0usize;
    for m in &set.matches {
        if let Ok((u, v)) = h.warp(m.src) {
            let d = ((u - m.dst.0).powi(2) + (v - m.dst.1).powi(2)).sqrt();
            if d <= threshold_px {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Keep the K highest-scoring matches; equal scores keep input order.
pub fn top_k(set: &MatchSet, k: usize) -> MatchSet {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        set.matches[b]
            .score
            .partial_cmp(&set.matches[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    MatchSet {
        matches: idx
            .into_iter()
            .take(k)
            .map(|i| set.matches[i])
            .collect(),
        direction: set.direction,
    }
}

/// MMA evaluated over a strictly increasing threshold sweep.
#[derive(Clone, Debug)]
pub struct MmaCurve {
    pub points: Vec<(f64, f64)>, // (threshold_px, mma)
}

impl MmaCurve {
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::from("threshold,mma\n");
        for (t, v) in &self.points {
            out.push_str(&format!("{t},{v}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub fn mma_curve(set: &MatchSet, h: &Homography, thresholds: &[f64]) -> Result<MmaCurve> {
    if thresholds.is_empty() {
        return Err(Error::Param("empty threshold sweep".into()));
    }
    for w in thresholds.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Param(format!(
                "thresholds must strictly increase ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let points = thresholds
        .iter()
        .map(|&t| mma(set, h, t).map(|v| (t, v)))
        .collect::<Result<_>>()?;
    Ok(MmaCurve { points })
}

/// The standard 1..=10 pixel sweep.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|t| t as f64).collect()
}

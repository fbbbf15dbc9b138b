//! Dual-resolution dense matching.
//!
//! Fine-resolution score maps are masked by the refined coarse scores
//! (bilinear slice extraction, clamp, nearest upsampling, elementwise
//! product), argmax correspondences are retrieved in both directions, the
//! mutual intersection is kept, and only fine cells inside the top-scoring
//! coarse cells are queried.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::DualFeatures;
use crate::correlation::{fine_score_map, normalize_features, CorrTensor4D, ScoreMap2D};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// One scored correspondence in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub src: (f64, f64),
    pub dst: (f64, f64),
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AtoB,
    BtoA,
    Mutual,
}

#[derive(Clone, Debug)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub direction: Direction,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Bilinear corner weights for fine-grid index i over a coarse axis of
/// extent n: ((floor, ceil), fractional weight), corners clamped to bounds.
fn corners(i: usize, r: usize, n: usize) -> ((usize, usize), f64) {
    let ip = i as f64 / r as f64;
    let lo = (ip.floor() as usize).min(n - 1);
    let hi = (ip.ceil() as usize).min(n - 1);
    ((lo, hi), ip - ip.floor())
}

/// Eq.-style bilinear extraction of the coarse 2D score map for a fine
/// query (i,j): blends the four corner slices of the refined tensor.
/// Differentiable.
pub fn coarse_score_map(
    cbar: &CorrTensor4D,
    fine_query: (usize, usize),
    r: usize,
) -> Result<ScoreMap2D> {
    let [ha, wa, _, _] = cbar.dims();
    let (i, j) = fine_query;
    if r == 0 {
        return Err(Error::Config("ratio must be >= 1".into()));
    }
    if i >= ha * r || j >= wa * r {
        return Err(Error::Bounds(format!(
            "fine query ({i},{j}) outside the {}x{} fine grid",
            ha * r,
            wa * r
        )));
    }
    let ((i0, i1), wi) = corners(i, r, ha);
    let ((j0, j1), wj) = corners(j, r, wa);
    let mut acc: Option<Tensor> = None;
    for (ci, cj, w) in [
        (i0, j0, (1.0 - wi) * (1.0 - wj)),
        (i0, j1, (1.0 - wi) * wj),
        (i1, j0, wi * (1.0 - wj)),
        (i1, j1, wi * wj),
    ] {
        if w == 0.0 {
            continue;
        }
        let term = ops::scale(&ops::slice4d_front(&cbar.data, ci, cj)?, w);
        acc = Some(match acc {
            Some(a) => ops::add(&a, &term)?,
            None => term,
        });
    }
    Ok(ScoreMap2D {
        data: acc.expect("weights sum to 1"),
        query: fine_query,
    })
}

/// Eq.-style fused score map: fine cosine map times the clamped,
/// nearest-upsampled coarse map. Differentiable.
pub fn fused_score_map(
    fa_fine: &crate::backbone::FeatureMap,
    fb_fine: &crate::backbone::FeatureMap,
    cbar: &CorrTensor4D,
    query: (usize, usize),
    r: usize,
) -> Result<ScoreMap2D> {
    let [ha, wa, hb, wb] = cbar.dims();
    if fa_fine.height() != r * ha || fa_fine.width() != r * wa {
        return Err(Error::Shape(format!(
            "fine source {}x{} != {r} x coarse {}x{}",
            fa_fine.height(),
            fa_fine.width(),
            ha,
            wa
        )));
    }
    if fb_fine.height() != r * hb || fb_fine.width() != r * wb {
        return Err(Error::Shape(format!(
            "fine target {}x{} != {r} x coarse {}x{}",
            fb_fine.height(),
            fb_fine.width(),
            hb,
            wb
        )));
    }
    let fine = fine_score_map(fa_fine, fb_fine, query)?;
    let coarse = coarse_score_map(cbar, query, r)?;
    let mask = ops::upsample_nearest(&ops::relu(&coarse.data), r)?;
    Ok(ScoreMap2D {
        data: ops::mul(&fine.data, &mask)?,
        query,
    })
}

/// Argmax retrieval; ties break to the lowest row-major linear index.
pub fn retrieve(fused: &ScoreMap2D) -> (usize, usize, f64) {
    let d = fused.data.dims();
    let data = fused.data.data();
    let lin = ops::argmax_linear(&data);
    (lin / d[1], lin % d[1], data[lin])
}

/// Per-source coarse matches sorted by score (descending, then cell index),
/// truncated to ceil(keep_fraction * M).
fn kept_coarse_cells(cdata: &[f64], na: usize, nb: usize, keep_fraction: f64) -> Vec<bool> {
    let mut scored: Vec<(usize, f64)> = (0..na)
        .map(|sa| {
            let lin = ops::argmax_linear(&cdata[sa * nb..(sa + 1) * nb]);
            (sa, cdata[sa * nb + lin])
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let keep = (keep_fraction * na as f64).ceil() as usize;
    let mut kept = vec![false; na];
    for (sa, _) in scored.into_iter().take(keep.min(na)) {
        kept[sa] = true;
    }
    kept
}

struct DirectionalPass<'a> {
    na_data: &'a [f64], // normalized fine source [C,H,W]
    nb_data: &'a [f64], // normalized fine target [C,H,W]
    fa_dims: [usize; 3],
    fb_dims: [usize; 3],
    cdata: &'a [f64],
    cdims: [usize; 4],
    r: usize,
}

impl DirectionalPass<'_> {
    /// Fused-map argmax for one fine source cell, by direct computation
    /// (no autodiff recording); matches the differentiable path bitwise.
    fn query(&self, i: usize, j: usize) -> (usize, f64) {
        let [c, ha, wa] = self.fa_dims;
        let [_, hb, wb] = self.fb_dims;
        let [cha, _cwa, chb, cwb] = self.cdims;
        let na = ha * wa;
        let nbf = hb * wb;
        let q = i * wa + j;
        // bilinear coarse slice
        let ((i0, i1), wi) = corners(i, self.r, cha);
        let ((j0, j1), wj) = corners(j, self.r, self.cdims[1]);
        let ncb = chb * cwb;
        let mut coarse = vec![0.0; ncb];
        for (ci, cj, w) in [
            (i0, j0, (1.0 - wi) * (1.0 - wj)),
            (i0, j1, (1.0 - wi) * wj),
            (i1, j0, wi * (1.0 - wj)),
            (i1, j1, wi * wj),
        ] {
            if w == 0.0 {
                continue;
            }
            let off = (ci * self.cdims[1] + cj) * ncb;
            for s in 0..ncb {
                coarse[s] += w * self.cdata[off + s];
            }
        }
        // fused fine map, masked by the clamped upsampled coarse scores
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut fine = vec![0.0; nbf];
        for ci in 0..c {
            let x = self.na_data[ci * na + q];
            if x == 0.0 {
                continue;
            }
            let tgt = &self.nb_data[ci * nbf..(ci + 1) * nbf];
            for s in 0..nbf {
                fine[s] += x * tgt[s];
            }
        }
        for y in 0..hb {
            let m_row = y / self.r;
            for x in 0..wb {
                let mask = coarse[m_row * cwb + x / self.r].max(0.0);
                let v = fine[y * wb + x] * mask;
                if v > best.1 {
                    best = (y * wb + x, v);
                }
            }
        }
        best
    }

    /// A full directional pass: maps each queried fine source cell to its
    /// fused argmax. `None` marks unqueried cells (pruned coarse regions).
    fn run(&self, keep_fraction: f64) -> Vec<Option<(usize, f64)>> {
        let [_, ha, wa] = self.fa_dims;
        let [cha, cwa, chb, cwb] = self.cdims;
        let kept = kept_coarse_cells(self.cdata, cha * cwa, chb * cwb, keep_fraction);
        let queries: Vec<(usize, usize)> = (0..ha)
            .flat_map(|i| (0..wa).map(move |j| (i, j)))
            .filter(|(i, j)| kept[(i / self.r) * cwa + j / self.r])
            .collect();
        let answers: Vec<(usize, usize, f64)> = queries
            .par_iter()
            .map(|&(i, j)| {
                let (t, s) = self.query(i, j);
                (i * wa + j, t, s)
            })
            .collect();
        let mut out = vec![None; ha * wa];
        for (src, t, s) in answers {
            out[src] = Some((t, s));
        }
        out
    }
}

/// Full dense matching: prune to the top coarse cells, query every fine
/// cell inside them in both directions, keep the mutual intersection, and
/// convert grid coordinates to image pixels.
pub fn match_dense(
    dual_a: &DualFeatures,
    dual_b: &DualFeatures,
    cbar: &CorrTensor4D,
    keep_fraction: f64,
) -> Result<MatchSet> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction {keep_fraction} outside (0,1]"
        )));
    }
    if dual_a.ratio != dual_b.ratio {
        return Err(Error::Shape("ratio mismatch between the two sides".into()));
    }
    let r = dual_a.ratio;
    let [ha, wa, hb, wb] = cbar.dims();
    if dual_a.coarse.height() != ha
        || dual_a.coarse.width() != wa
        || dual_b.coarse.height() != hb
        || dual_b.coarse.width() != wb
    {
        return Err(Error::Shape(
            "refined tensor dims inconsistent with the coarse grids".into(),
        ));
    }

    let na = normalize_features(&dual_a.fine)?;
    let nb = normalize_features(&dual_b.fine)?;
    let na_v = na.data.to_vec();
    let nb_v = nb.data.to_vec();
    let fa_dims = {
        let d = na.data.dims();
        [d[0], d[1], d[2]]
    };
    let fb_dims = {
        let d = nb.data.dims();
        [d[0], d[1], d[2]]
    };
    let cv = cbar.data.to_vec();
    let cdims = [ha, wa, hb, wb];
    // transposed tensor for the reverse pass
    let mut ct = vec![0.0; cv.len()];
    let (nsa, nsb) = (ha * wa, hb * wb);
    for sa in 0..nsa {
        for sb in 0..nsb {
            ct[sb * nsa + sa] = cv[sa * nsb + sb];
        }
    }

    let fwd = DirectionalPass {
        na_data: &na_v,
        nb_data: &nb_v,
        fa_dims,
        fb_dims,
        cdata: &cv,
        cdims,
        r,
    }
    .run(keep_fraction);
    let bwd = DirectionalPass {
        na_data: &nb_v,
        nb_data: &na_v,
        fa_dims: fb_dims,
        fb_dims: fa_dims,
        cdata: &ct,
        cdims: [hb, wb, ha, wa],
        r,
    }
    .run(keep_fraction);

    let (fw, bw) = (fa_dims[2], fb_dims[2]);
    let mut matches = Vec::new();
    for (src, ans) in fwd.iter().enumerate() {
        let Some((tgt, score)) = ans else { continue };
        match bwd[*tgt] {
            Some((back, _)) if back == src => {}
            _ => continue,
        }
        let (si, sj) = (src / fw, src % fw);
        let (ti, tj) = (tgt / bw, tgt % bw);
        let src_px = dual_a.fine.center_px(sj, si);
        let dst_px = dual_b.fine.center_px(tj, ti);
        matches.push(Match {
            src: src_px,
            dst: dst_px,
            score: *score,
        });
    }
    Ok(MatchSet {
        matches,
        direction: Direction::Mutual,
    })
}

/// Format a float with six significant digits (plain notation).
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.5}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Write "x_a y_a x_b y_b score" lines.
pub fn write_matches<P: AsRef<Path>>(path: P, set: &MatchSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# x_a y_a x_b y_b score")?;
    for m in &set.matches {
        writeln!(
            w,
            "{} {} {} {} {}",
            fmt_sig6(m.src.0),
            fmt_sig6(m.src.1),
            fmt_sig6(m.dst.0),
            fmt_sig6(m.dst.1),
            fmt_sig6(m.score)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matches<P: AsRef<Path>>(path: P) -> Result<MatchSet> {
    let r = BufReader::new(File::open(path)?);
    let mut matches = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad match value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 5 {
            return Err(Error::Format(format!(
                "match line needs 5 values, got {}",
                vals.len()
            )));
        }
        matches.push(Match {
            src: (vals[0], vals[1]),
            dst: (vals[2], vals[3]),
            score: vals[4],
        });
    }
    Ok(MatchSet {
        matches,
        direction: Direction::Mutual,
    })
}

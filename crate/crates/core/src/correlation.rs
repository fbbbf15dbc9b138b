//! 4D correlation tensors and per-query 2D score maps.
//!
//! The coarse maps produce the full correlation tensor once; fine-resolution
//! scores are only ever computed one query at a time, so the quartic-size
//! fine tensor is never materialized.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

pub const NORM_EPSILON: f64 = 1e-8;

/// Dense h_a x w_a x h_b x w_b cosine correlation scores.
#[derive(Clone)]
pub struct CorrTensor4D {
    pub data: Tensor,
}

impl CorrTensor4D {
    pub fn new(data: Tensor) -> Result<CorrTensor4D> {
        if data.dims().len() != 4 {
            return Err(Error::Shape(format!(
                "correlation tensor must be 4D, got {:?}",
                data.dims()
            )));
        }
        Ok(CorrTensor4D { data })
    }

    pub fn dims(&self) -> [usize; 4] {
        let d = self.data.dims();
        [d[0], d[1], d[2], d[3]]
    }
}

/// Correlation of one source query against a whole target grid.
#[derive(Clone)]
pub struct ScoreMap2D {
    pub data: Tensor,
    /// (row, col) of the query on the source grid.
    pub query: (usize, usize),
}

/// L2-normalize every feature vector of a map (epsilon-guarded).
pub fn normalize_features(f: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(
        ops::l2_normalize_channels(&f.data, NORM_EPSILON)?,
        f.stride,
    )
}

/// Full cosine correlation tensor between two (coarse) feature maps.
pub fn corr4d(fa: &FeatureMap, fb: &FeatureMap) -> Result<CorrTensor4D> {
    if fa.channels() != fb.channels() {
        return Err(Error::Shape(format!(
            "corr4d: channel mismatch {} vs {}",
            fa.channels(),
            fb.channels()
        )));
    }
    let na = normalize_features(fa)?;
    let nb = normalize_features(fb)?;
    CorrTensor4D::new(ops::corr_pairwise(&na.data, &nb.data)?)
}

/// Matching-direction swap: out[k,l,i,j] = in[i,j,k,l].
pub fn transpose4d(c: &CorrTensor4D) -> Result<CorrTensor4D> {
    CorrTensor4D::new(ops::transpose4d(&c.data)?)
}

/// Cosine correlation of the fine query (i,j) against all of fb.
pub fn fine_score_map(
    fa_fine: &FeatureMap,
    fb_fine: &FeatureMap,
    query: (usize, usize),
) -> Result<ScoreMap2D> {
    let na = normalize_features(fa_fine)?;
    let nb = normalize_features(fb_fine)?;
    fine_score_map_normalized(&na, &nb, query)
}

/// Same as [`fine_score_map`] for maps that are already normalized; the
/// matcher normalizes once and calls this per query.
pub fn fine_score_map_normalized(
    na: &FeatureMap,
    nb: &FeatureMap,
    query: (usize, usize),
) -> Result<ScoreMap2D> {
    let data = ops::query_correlation(&na.data, &nb.data, query.0, query.1)?;
    Ok(ScoreMap2D { data, query })
}

//! Supervision: blurred ground-truth score maps, keypoint and orthogonal
//! losses, and a toy gradient-descent loop over the consensus kernels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::backbone::{DualFeatures, FeatureMap};
use crate::consensus::{self, ConsensusConfig};
use crate::correlation::{self, CorrTensor4D};
use crate::error::{Error, Result};
use crate::matcher;
use crate::tensor::{ops, ParamStore, Tensor};

/// Sparse pixel correspondences between two images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointAnnotation {
    /// (pixel in A, pixel in B) pairs.
    pub pairs: Vec<((f64, f64), (f64, f64))>,
}

impl KeypointAnnotation {
    pub fn new(pairs: Vec<((f64, f64), (f64, f64))>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// "x_a y_a x_b y_b" per line; '#' starts a comment.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut pairs = Vec::new();
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
                        .map_err(|_| Error::Format(format!("bad annotation value {t:?}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::Format(format!(
                    "annotation line needs 4 values, got {}",
                    vals.len()
                )));
            }
            pairs.push(((vals[0], vals[1]), (vals[2], vals[3])));
        }
        Ok(Self { pairs })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# x_a y_a x_b y_b")?;
        for ((xa, ya), (xb, yb)) in &self.pairs {
            writeln!(w, "{xa} {ya} {xb} {yb}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Snap each pixel pair to its nearest fine-grid cells (row, col).
    pub fn snap(
        &self,
        fine_a: &FeatureMap,
        fine_b: &FeatureMap,
    ) -> Result<Vec<((usize, usize), (usize, usize))>> {
        self.pairs
            .iter()
            .map(|((xa, ya), (xb, yb))| {
                let (ax, ay) = fine_a.cell_of_px(*xa, *ya).ok_or_else(|| {
                    Error::Annotation(format!("keypoint ({xa},{ya}) snaps outside grid A"))
                })?;
                let (bx, by) = fine_b.cell_of_px(*xb, *yb).ok_or_else(|| {
                    Error::Annotation(format!("keypoint ({xb},{yb}) snaps outside grid B"))
                })?;
                Ok(((ay, ax), (by, bx)))
            })
            .collect()
    }
}

/// Target score distributions for both matching directions.
#[derive(Clone, Debug)]
pub struct GroundTruthMaps {
    /// [N, H_b·W_b], one row per keypoint (A→B direction).
    pub s_ab: Tensor,
    /// [N, H_a·W_a] (B→A direction).
    pub s_ba: Tensor,
    pub sigma: f64,
}

/// Blurred one-hot rows: mass at the snapped cell, convolved with a
/// truncated Gaussian (radius ⌈3σ⌉) and renormalized to sum 1.
fn gt_rows(cells: &[(usize, usize)], grid: (usize, usize), sigma: f64) -> Result<Tensor> {
    let (h, w) = grid;
    let t = h * w;
    let radius = (3.0 * sigma).ceil() as i64;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0; cells.len() * t];
    for (n, &(ci, cj)) in cells.iter().enumerate() {
        let row = &mut data[n * t..(n + 1) * t];
        let mut total = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (y, x) = (ci as i64 + dy, cj as i64 + dx);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                let v = (-((dy * dy + dx * dx) as f64) * inv2s2).exp();
                row[y as usize * w + x as usize] = v;
                total += v;
            }
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[cells.len(), t], data)
}

pub fn build_gt(
    ann: &KeypointAnnotation,
    fine_a: &FeatureMap,
    fine_b: &FeatureMap,
    sigma: f64,
) -> Result<GroundTruthMaps> {
    if sigma <= 0.0 {
        return Err(Error::Param(format!("sigma {sigma} must be positive")));
    }
    if ann.is_empty() {
        return Err(Error::Annotation("no keypoints to supervise".into()));
    }
    let snapped = ann.snap(fine_a, fine_b)?;
    let dst_cells: Vec<_> = snapped.iter().map(|&(_, cb)| cb).collect();
    let src_cells: Vec<_> = snapped.iter().map(|&(ca, _)| ca).collect();
    Ok(GroundTruthMaps {
        s_ab: gt_rows(&dst_cells, (fine_b.height(), fine_b.width()), sigma)?,
        s_ba: gt_rows(&src_cells, (fine_a.height(), fine_a.width()), sigma)?,
        sigma,
    })
}

/// Differentiable per-keypoint fused score maps, one softmax row per
/// annotated source cell, for both directions.
pub fn predicted_maps(
    dual_a: &DualFeatures,
    dual_b: &DualFeatures,
    cbar: &CorrTensor4D,
    ann: &KeypointAnnotation,
) -> Result<(Tensor, Tensor)> {
    let snapped = ann.snap(&dual_a.fine, &dual_b.fine)?;
    let r = dual_a.ratio;
    let cbar_t = correlation::transpose4d(cbar)?;
    let mut rows_ab = Vec::with_capacity(snapped.len());
    let mut rows_ba = Vec::with_capacity(snapped.len());
    for &((ai, aj), (bi, bj)) in &snapped {
        let fwd = matcher::fused_score_map(&dual_a.fine, &dual_b.fine, cbar, (ai, aj), r)?;
        let bwd = matcher::fused_score_map(&dual_b.fine, &dual_a.fine, &cbar_t, (bi, bj), r)?;
        rows_ab.push(ops::reshape(&fwd.data, &[fwd.data.len()])?);
        rows_ba.push(ops::reshape(&bwd.data, &[bwd.data.len()])?);
    }
    Ok((
        ops::softmax_rows(&ops::stack_rows(&rows_ab)?)?,
        ops::softmax_rows(&ops::stack_rows(&rows_ba)?)?,
    ))
}

/// ‖S_ab − gt_ab‖_F + ‖S_ba − gt_ba‖_F.
pub fn loss_keypoint(s_ab: &Tensor, s_ba: &Tensor, gt: &GroundTruthMaps) -> Result<Tensor> {
    ops::add(
        &ops::frobenius_diff(s_ab, &gt.s_ab)?,
        &ops::frobenius_diff(s_ba, &gt.s_ba)?,
    )
}

/// ‖S_ab·S_abᵀ − gt_ab·gt_abᵀ‖_F + the same for the reverse direction.
pub fn loss_orthogonal(s_ab: &Tensor, s_ba: &Tensor, gt: &GroundTruthMaps) -> Result<Tensor> {
    ops::add(
        &ops::frobenius_diff(&ops::gram(s_ab)?, &ops::gram(&gt.s_ab)?)?,
        &ops::frobenius_diff(&ops::gram(s_ba)?, &ops::gram(&gt.s_ba)?)?,
    )
}

/// keypoint loss + lambda * orthogonal loss.
pub fn loss_total(
    s_ab: &Tensor,
    s_ba: &Tensor,
    gt: &GroundTruthMaps,
    lambda: f64,
) -> Result<Tensor> {
    ops::add(
        &loss_keypoint(s_ab, s_ba, gt)?,
        &ops::scale(&loss_orthogonal(s_ab, s_ba, gt)?, lambda),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub sigma: f64,
    /// Halve the learning rate every this many steps (0 disables).
    pub halve_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.01,
            lambda: 0.05,
            sigma: 1.0,
            halve_every: 50,
        }
    }
}

/// Gradient descent on the consensus kernels over one annotated pair.
/// Returns the loss trace (one value per step, before that step's update).
pub fn train_toy(
    params: &ParamStore,
    nc_cfg: &ConsensusConfig,
    dual_a: &DualFeatures,
    dual_b: &DualFeatures,
    ann: &KeypointAnnotation,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let gt = build_gt(ann, &dual_a.fine, &dual_b.fine, cfg.sigma)?;
    let c = correlation::corr4d(&dual_a.coarse, &dual_b.coarse)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut lr = cfg.lr;
    for step in 0..cfg.steps {
        if cfg.halve_every > 0 && step > 0 && step % cfg.halve_every == 0 {
            lr *= 0.5;
        }
        params.zero_grads();
        let cbar = consensus::refine(&c, params, nc_cfg)?;
        let (s_ab, s_ba) = predicted_maps(dual_a, dual_b, &cbar, ann)?;
        let loss = loss_total(&s_ab, &s_ba, &gt, cfg.lambda)?;
        let value = loss.value();
        if !value.is_finite() {
            return Err(Error::Training { step });
        }
        trace.push(value);
        loss.backward()?;
        for (_, p) in params.trainable() {
            let g = p.grad().expect("trainable param has grad after backward");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training { step });
            }
            let updated: Vec<f64> = p
                .to_vec()
                .iter()
                .zip(&g)
                .map(|(w, gv)| w - lr * gv)
                .collect();
            p.set_data(updated)?;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::patch_descriptor_dual;
    use crate::synth::{synth, WarpKind};

    fn toy_features(seed: u64) -> (DualFeatures, DualFeatures, KeypointAnnotation) {
        let s = synth(seed, (16, 16), WarpKind::Translation { dx: 4.0, dy: 2.0 }, 6).unwrap();
        let da = patch_descriptor_dual(&s.image_a, 3, 2, 4).unwrap();
        let db = patch_descriptor_dual(&s.image_b, 3, 2, 4).unwrap();
        (da, db, s.annotations)
    }

    fn grid_map(h: usize, w: usize, stride: usize) -> FeatureMap {
        FeatureMap::new(Tensor::zeros(&[1, h, w]), stride).unwrap()
    }

    #[test]
    fn tiny_sigma_is_effectively_one_hot() {
        let fa = grid_map(4, 4, 2);
        let fb = grid_map(4, 4, 2);
        let ann = KeypointAnnotation::new(vec![((2.5, 4.5), (4.5, 2.5))]);
        let gt = build_gt(&ann, &fa, &fb, 1e-3).unwrap();
        let row = gt.s_ab.to_vec();
        // (4.5, 2.5) snaps to col 2, row 1 -> linear 6
        assert!((row[6] - 1.0).abs() < 1e-9);
        assert!(row.iter().enumerate().all(|(i, v)| i == 6 || *v < 1e-9));
    }

    #[test]
    fn unit_sigma_axis_neighbours_share_weight() {
        let fa = grid_map(9, 9, 2);
        let fb = grid_map(9, 9, 2);
        // snapped cell (4,4), well inside the radius-3 window
        let ann = KeypointAnnotation::new(vec![((8.5, 8.5), (8.5, 8.5))]);
        let gt = build_gt(&ann, &fa, &fb, 1.0).unwrap();
        let row = gt.s_ab.to_vec();
        let at = |i: usize, j: usize| row[i * 9 + j];
        let n = at(3, 4);
        for v in [at(5, 4), at(4, 3), at(4, 5)] {
            assert!((v - n).abs() < 1e-12);
        }
        assert!(at(4, 4) > n);
    }

    #[test]
    fn gt_rows_are_distributions() {
        let fa = grid_map(6, 8, 2);
        let fb = grid_map(6, 8, 2);
        let ann = KeypointAnnotation::new(vec![
            ((1.5, 1.5), (2.5, 3.5)),
            ((10.0, 8.0), (1.0, 1.0)),
            ((14.0, 10.0), (14.0, 10.0)),
        ]);
        for sigma in [0.5, 1.0, 2.0] {
            let gt = build_gt(&ann, &fa, &fb, sigma).unwrap();
            for t in [&gt.s_ab, &gt.s_ba] {
                let d = t.dims().to_vec();
                let v = t.to_vec();
                for n in 0..d[0] {
                    let row = &v[n * d[1]..(n + 1) * d[1]];
                    assert!(row.iter().all(|x| *x >= 0.0));
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn out_of_grid_keypoint_rejected() {
        let fa = grid_map(4, 4, 2);
        let fb = grid_map(4, 4, 2);
        let ann = KeypointAnnotation::new(vec![((100.0, 1.0), (1.0, 1.0))]);
        assert!(matches!(
            build_gt(&ann, &fa, &fb, 1.0),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn keypoint_loss_analytic_values() {
        let gt = GroundTruthMaps {
            s_ab: Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            s_ba: Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            sigma: 1.0,
        };
        let s = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = loss_keypoint(&s, &s, &gt).unwrap().value();
        assert!((l - 2.0 * 2.0_f64.sqrt()).abs() < 1e-12);
        // predictions equal to GT give zero for both losses
        let z = loss_keypoint(&gt.s_ab, &gt.s_ba, &gt).unwrap().value();
        assert_eq!(z, 0.0);
        let zo = loss_orthogonal(&gt.s_ab, &gt.s_ba, &gt).unwrap().value();
        assert_eq!(zo, 0.0);
    }

    #[test]
    fn orthogonal_loss_detects_gram_mismatch() {
        let gt = GroundTruthMaps {
            s_ab: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            s_ba: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            sigma: 1.0,
        };
        // both rows identical -> Gram all-ones vs GT identity
        let s = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = loss_orthogonal(&s, &s, &gt).unwrap().value();
        assert!((l - 2.0 * 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let gt = GroundTruthMaps {
            s_ab: Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            s_ba: Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            sigma: 1.0,
        };
        let s = Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap();
        let lk = loss_keypoint(&s, &s, &gt).unwrap().value();
        let lo = loss_orthogonal(&s, &s, &gt).unwrap().value();
        let lt = loss_total(&s, &s, &gt, 0.05).unwrap().value();
        assert!((lt - (lk + 0.05 * lo)).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_to_keypoint_permutation() {
        let (da, db, ann) = toy_features(21);
        let params = consensus::delta_nc_params(&ConsensusConfig::tiny()).unwrap();
        let c = correlation::corr4d(&da.coarse, &db.coarse).unwrap();
        let cbar = consensus::refine(&c, &params, &ConsensusConfig::tiny()).unwrap();

        let mut perm = ann.pairs.clone();
        perm.reverse();
        let perm = KeypointAnnotation::new(perm);

        let loss_of = |a: &KeypointAnnotation| {
            let gt = build_gt(a, &da.fine, &db.fine, 1.0).unwrap();
            let (s_ab, s_ba) = predicted_maps(&da, &db, &cbar, a).unwrap();
            loss_total(&s_ab, &s_ba, &gt, 0.05).unwrap().value()
        };
        assert!((loss_of(&ann) - loss_of(&perm)).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_of_predictions_are_distributions() {
        let (da, db, ann) = toy_features(22);
        let params = consensus::delta_nc_params(&ConsensusConfig::tiny()).unwrap();
        let c = correlation::corr4d(&da.coarse, &db.coarse).unwrap();
        let cbar = consensus::refine(&c, &params, &ConsensusConfig::tiny()).unwrap();
        let (s_ab, _) = predicted_maps(&da, &db, &cbar, &ann).unwrap();
        let d = s_ab.dims().to_vec();
        let v = s_ab.to_vec();
        for n in 0..d[0] {
            let s: f64 = v[n * d[1]..(n + 1) * d[1]].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nc_gradients_match_finite_differences_end_to_end() {
        let (da, db, ann) = toy_features(23);
        let nc_cfg = ConsensusConfig::tiny();
        let params = consensus::init_nc_params(&nc_cfg, 7).unwrap();
        let gt = build_gt(&ann, &da.fine, &db.fine, 1.0).unwrap();
        let c = correlation::corr4d(&da.coarse, &db.coarse).unwrap();

        let loss_graph = || -> Tensor {
            let cbar = consensus::refine(&c, &params, &nc_cfg).unwrap();
            let (s_ab, s_ba) = predicted_maps(&da, &db, &cbar, &ann).unwrap();
            loss_total(&s_ab, &s_ba, &gt, 0.05).unwrap()
        };
        params.zero_grads();
        loss_graph().backward().unwrap();
        for (name, p) in params.trainable() {
            let analytic = p.grad().unwrap();
            let numeric =
                crate::reference::central_diff_grad(&p, 1e-5, || loss_graph().value());
            // compare coordinates below 1% of the gradient scale
            // absolutely, so FD roundoff on near-zero entries cannot
            // dominate the relative error
            let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = crate::reference::max_rel_err(&analytic, &numeric, (1e-2 * scale).max(1e-10));
            assert!(err < 1e-4, "param {name}: max rel err {err}");
        }
    }

    #[test]
    fn zero_learning_rate_gives_flat_trace() {
        let (da, db, ann) = toy_features(24);
        let nc_cfg = ConsensusConfig::tiny();
        let params = consensus::init_nc_params(&nc_cfg, 3).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let trace = train_toy(&params, &nc_cfg, &da, &db, &ann, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        for v in &trace {
            assert_eq!(*v, trace[0]);
        }
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_pair() {
        let (da, db, ann) = toy_features(25);
        let nc_cfg = ConsensusConfig::tiny();
        let params = consensus::init_nc_params(&nc_cfg, 3).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        };
        let trace = train_toy(&params, &nc_cfg, &da, &db, &ann, &cfg).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        assert!(
            trace.last().unwrap() < &trace[0],
            "loss did not decrease: {} -> {}",
            trace[0],
            trace.last().unwrap()
        );
    }

    #[test]
    fn annotation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.txt");
        let ann = KeypointAnnotation::new(vec![((1.5, 2.5), (3.0, 4.0)), ((5.0, 6.0), (7.5, 8.5))]);
        ann.save(&p).unwrap();
        assert_eq!(KeypointAnnotation::load(&p).unwrap(), ann);
    }
}

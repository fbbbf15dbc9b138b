//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is written as plain nested loops over raw slices and is
//! deliberately independent of the kernels in [`crate::tensor::ops`]; the
//! tests compare the two paths. Not intended for production use.

use crate::tensor::Tensor;

/// Direct six-nested-loop 2D cross-correlation with zero padding.
pub fn conv2d_loops(
    input: &[f64],
    id: [usize; 3],
    kernel: &[f64],
    kd: [usize; 4],
    padding: usize,
) -> (Vec<f64>, [usize; 3]) {
    let [cin, h, w] = id;
    let [cout, _, k, _] = kd;
    let oh = h + 2 * padding - (k - 1);
    let ow = w + 2 * padding - (k - 1);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - padding as isize;
                            let ix = ox as isize + kx as isize - padding as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[(ci * h + iy as usize) * w + ix as usize]
                                * kernel[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, [cout, oh, ow])
}

/// Direct eight-nested-loop 4D cross-correlation with zero padding.
pub fn conv4d_loops(
    input: &[f64],
    id: [usize; 5],
    kernel: &[f64],
    kd: [usize; 6],
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let cin = id[0];
    let d = [id[1], id[2], id[3], id[4]];
    let cout = kd[0];
    let k = kd[2];
    let e: Vec<usize> = d.iter().map(|v| v + 2 * padding - (k - 1)).collect();
    let ne: usize = e.iter().product();
    let nd: usize = d.iter().product();
    let mut out = vec![0.0; cout * ne];
    let p = padding as isize;
    for co in 0..cout {
        for o0 in 0..e[0] {
            for o1 in 0..e[1] {
                for o2 in 0..e[2] {
                    for o3 in 0..e[3] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for k0 in 0..k {
                                for k1 in 0..k {
                                    for k2 in 0..k {
                                        for k3 in 0..k {
                                            let i0 = o0 as isize + k0 as isize - p;
                                            let i1 = o1 as isize + k1 as isize - p;
                                            let i2 = o2 as isize + k2 as isize - p;
                                            let i3 = o3 as isize + k3 as isize - p;
                                            if i0 < 0
                                                || i0 >= d[0] as isize
                                                || i1 < 0
                                                || i1 >= d[1] as isize
                                                || i2 < 0
                                                || i2 >= d[2] as isize
                                                || i3 < 0
                                                || i3 >= d[3] as isize
                                            {
                                                continue;
                                            }
                                            let ii = ci * nd
                                                + ((i0 as usize * d[1] + i1 as usize) * d[2]
                                                    + i2 as usize)
                                                    * d[3]
                                                + i3 as usize;
                                            let ki = (co * cin + ci) * k * k * k * k
                                                + ((k0 * k + k1) * k + k2) * k
                                                + k3;
                                            acc += input[ii] * kernel[ki];
                                        }
                                    }
                                }
                            }
                        }
                        out[co * ne
                            + ((o0 * e[1] + o1) * e[2] + o2) * e[3]
                            + o3] = acc;
                    }
                }
            }
        }
    }
    let mut od = vec![cout];
    od.extend_from_slice(&e);
    (out, od)
}

/// Direct formula for the soft mutual nearest neighbour filter on a
/// nonnegative tensor of dims [a,b,c,d].
pub fn soft_mutual_nn_formula(x: &[f64], dims: [usize; 4], eps: f64) -> Vec<f64> {
    let na = dims[0] * dims[1];
    let nb = dims[2] * dims[3];
    let mut out = vec![0.0; na * nb];
    for sa in 0..na {
        for sb in 0..nb {
            let mut ma = f64::NEG_INFINITY;
            for a in 0..na {
                ma = ma.max(x[a * nb + sb]);
            }
            let mut mb = f64::NEG_INFINITY;
            for b in 0..nb {
                mb = mb.max(x[sa * nb + b]);
            }
            let v = x[sa * nb + sb];
            let ra = v / ma.max(eps);
            let rb = v / mb.max(eps);
            out[sa * nb + sb] = ra * rb * v;
        }
    }
    out
}

/// Direct weighted-corner-sum realization of the bilinear coarse score map
/// for a fine-grid query (i,j): corners are ceil/floor of (i/r, j/r),
/// clamped to the coarse grid.
pub fn bilinear_coarse_map(
    cbar: &[f64],
    dims: [usize; 4],
    i: usize,
    j: usize,
    r: usize,
) -> Vec<f64> {
    let [ha, wa, hb, wb] = dims;
    let nb = hb * wb;
    let ip = i as f64 / r as f64;
    let jp = j as f64 / r as f64;
    let i0 = (ip.floor() as usize).min(ha - 1);
    let i1 = (ip.ceil() as usize).min(ha - 1);
    let j0 = (jp.floor() as usize).min(wa - 1);
    let j1 = (jp.ceil() as usize).min(wa - 1);
    let wi = ip - ip.floor();
    let wj = jp - jp.floor();
    let slice = |ii: usize, jj: usize| -> &[f64] {
        let off = (ii * wa + jj) * nb;
        &cbar[off..off + nb]
    };
    let (s00, s01, s10, s11) = (slice(i0, j0), slice(i0, j1), slice(i1, j0), slice(i1, j1));
    (0..nb)
        .map(|s| {
            (1.0 - wi) * (1.0 - wj) * s00[s]
                + (1.0 - wi) * wj * s01[s]
                + wi * (1.0 - wj) * s10[s]
                + wi * wj * s11[s]
        })
        .collect()
}

/// The fused per-query score map of the dual-resolution matcher, computed
/// entirely by direct formulas: normalized fine dot products, bilinear
/// coarse extraction, clamp at zero, nearest upsampling, elementwise mask.
/// `fa`/`fb` must already be L2-normalized, laid out [C,H,W].
pub fn fused_map_direct(
    fa: &[f64],
    da: [usize; 3],
    fb: &[f64],
    db: [usize; 3],
    cbar: &[f64],
    cdims: [usize; 4],
    i: usize,
    j: usize,
    r: usize,
) -> Vec<f64> {
    let [c, ha, wa] = da;
    let [_, hb, wb] = db;
    let q = i * wa + j;
    let na = ha * wa;
    let nbf = hb * wb;
    let mut fine = vec![0.0; nbf];
    for s in 0..nbf {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += fa[ci * na + q] * fb[ci * nbf + s];
        }
        fine[s] = acc;
    }
    let coarse = bilinear_coarse_map(cbar, cdims, i, j, r);
    let (chb, cwb) = (cdims[2], cdims[3]);
    let mut out = vec![0.0; nbf];
    for y in 0..hb {
        for x in 0..wb {
            let m = coarse[(y / r).min(chb - 1) * cwb + (x / r).min(cwb - 1)].max(0.0);
            out[y * wb + x] = fine[y * wb + x] * m;
        }
    }
    out
}

/// Central finite differences of `loss` w.r.t. every coordinate of `param`.
/// Temporarily perturbs the stored values; restores them afterwards.
pub fn central_diff_grad(param: &Tensor, h: f64, mut loss: impl FnMut() -> f64) -> Vec<f64> {
    let base = param.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        param.set_data(plus).unwrap();
        let lp = loss();
        let mut minus = base.clone();
        minus[i] -= h;
        param.set_data(minus).unwrap();
        let lm = loss();
        grad[i] = (lp - lm) / (2.0 * h);
    }
    param.set_data(base).unwrap();
    grad
}

/// Worst relative error between two gradient vectors. Coordinates where both
/// magnitudes fall below `floor` are compared absolutely against it.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                (a - n).abs() / floor
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

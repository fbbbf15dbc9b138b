//! The differentiable kernel set.
//!
//! Each function runs eagerly and records enough on the result to replay the
//! chain rule when `backward` is called on a downstream scalar. Reductions
//! are sequential per output element in a fixed order, so results are
//! bitwise reproducible regardless of how callers parallelize across
//! elements.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{linear_index, BackCtx, Tensor};

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims(a, b, "add")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::computed(
        a.dims(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| vec![ctx.out_grad.to_vec(), ctx.out_grad.to_vec()]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims(a, b, "sub")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    Ok(Tensor::computed(
        a.dims(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![
                ctx.out_grad.to_vec(),
                ctx.out_grad.iter().map(|g| -g).collect(),
            ]
        }),
    ))
}

/// Elementwise product (no broadcasting).
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims(a, b, "mul")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    Ok(Tensor::computed(
        a.dims(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| {
            let av = ctx.parents[0].data();
            let bv = ctx.parents[1].data();
            let ga = ctx.out_grad.iter().zip(bv.iter()).map(|(g, y)| g * y).collect();
            let gb = ctx.out_grad.iter().zip(av.iter()).map(|(g, x)| g * x).collect();
            vec![ga, gb]
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::computed(
        a.dims(),
        data,
        vec![a.clone()],
        Box::new(move |ctx: &BackCtx| vec![ctx.out_grad.iter().map(|g| g * c).collect()]),
    )
}

/// Elementwise max(0, x); subgradient at 0 is 0.
pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.max(0.0)).collect();
    Tensor::computed(
        a.dims(),
        data,
        vec![a.clone()],
        Box::new(|ctx: &BackCtx| {
            let av = ctx.parents[0].data();
            vec![ctx
                .out_grad
                .iter()
                .zip(av.iter())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect()]
        }),
    )
}

/// Full reduction to a rank-0 scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let n = a.len();
    Tensor::computed(
        vec![],
        vec![s],
        vec![a.clone()],
        Box::new(move |ctx: &BackCtx| vec![vec![ctx.out_grad[0]; n]]),
    )
}

/// Elementwise square root; inputs must be nonnegative.
pub fn sqrt(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x.sqrt()).collect();
    Tensor::computed(
        a.dims(),
        data,
        vec![a.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![ctx
                .out_grad
                .iter()
                .zip(ctx.out_data.iter())
                .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                .collect()]
        }),
    )
}

/// View with new dims over the same row-major values.
pub fn reshape(a: &Tensor, dims: &[usize]) -> Result<Tensor> {
    if dims.iter().product::<usize>() != a.len() {
        return Err(Error::Shape(format!(
            "reshape: {:?} -> {:?}",
            a.dims(),
            dims
        )));
    }
    Ok(Tensor::computed(
        dims.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(|ctx: &BackCtx| vec![ctx.out_grad.to_vec()]),
    ))
}

/// 2D cross-correlation with zero padding.
/// input [C_in,H,W], kernel [C_out,C_in,k,k] -> [C_out,H',W'].
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let id = input.dims();
    let kd = kernel.dims();
    if id.len() != 3 || kd.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: input {:?}, kernel {:?}",
            id, kd
        )));
    }
    let (cin, h, w) = (id[0], id[1], id[2]);
    let (cout, kcin, k) = (kd[0], kd[1], kd[2]);
    if kd[3] != k {
        return Err(Error::Shape("conv2d: kernel must be square".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Config("conv2d: kernel size must be odd".into()));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let oh = (h + 2 * padding).checked_sub(k - 1).filter(|v| *v > 0).ok_or_else(|| {
        Error::Shape("conv2d: output would be empty".into())
    })?;
    let ow = (w + 2 * padding).checked_sub(k - 1).filter(|v| *v > 0).ok_or_else(|| {
        Error::Shape("conv2d: output would be empty".into())
    })?;

    let iv = input.to_vec();
    let kv = kernel.to_vec();
    let mut out = vec![0.0; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, slab)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += iv[(ci * h + iy as usize) * w + ix as usize]
                                * kv[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                slab[oy * ow + ox] = acc;
            }
        }
    });

    Ok(Tensor::computed(
        vec![cout, oh, ow],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |ctx: &BackCtx| {
            let iv = ctx.parents[0].data();
            let kv = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gi = vec![0.0; cin * h * w];
            let mut gk = vec![0.0; cout * cin * k * k];
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(co * oh + oy) * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = (oy + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let ii = (ci * h + iy as usize) * w + ix as usize;
                                    let ki = ((co * cin + ci) * k + ky) * k + kx;
                                    gi[ii] += go * kv[ki];
                                    gk[ki] += go * iv[ii];
                                }
                            }
                        }
                    }
                }
            }
            vec![gi, gk]
        }),
    ))
}

/// 4D cross-correlation with zero padding over all four spatial axes.
/// input [C_in,d0,d1,d2,d3], kernel [C_out,C_in,k,k,k,k] -> [C_out,e0..e3].
pub fn conv4d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let id = input.dims();
    let kd = kernel.dims();
    if id.len() != 5 || kd.len() != 6 {
        return Err(Error::Shape(format!(
            "conv4d: input {:?}, kernel {:?}",
            id, kd
        )));
    }
    let cin = id[0];
    let d: [usize; 4] = [id[1], id[2], id[3], id[4]];
    let (cout, kcin, k) = (kd[0], kd[1], kd[2]);
    if kd[3] != k || kd[4] != k || kd[5] != k {
        return Err(Error::Shape("conv4d: kernel must be hypercubic".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Config("conv4d: kernel size must be odd".into()));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv4d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let mut e = [0usize; 4];
    for a in 0..4 {
        e[a] = (d[a] + 2 * padding)
            .checked_sub(k - 1)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Shape("conv4d: output would be empty".into()))?;
    }
    let ne: usize = e.iter().product();
    let nd: usize = d.iter().product();

    let iv = input.to_vec();
    let kv = kernel.to_vec();
    let p = padding as isize;
    let mut out = vec![0.0; cout * ne];
    out.par_chunks_mut(ne).enumerate().for_each(|(co, slab)| {
        for (lin, slot) in slab.iter_mut().enumerate() {
            // decode output position
            let mut rem = lin;
            let mut o = [0usize; 4];
            for a in (0..4).rev() {
                o[a] = rem % e[a];
                rem /= e[a];
            }
            let mut acc = 0.0;
            for ci in 0..cin {
                let ibase = ci * nd;
                let kbase = (co * cin + ci) * k * k * k * k;
                for k0 in 0..k {
                    let i0 = (o[0] + k0) as isize - p;
                    if i0 < 0 || i0 >= d[0] as isize {
                        continue;
                    }
                    for k1 in 0..k {
                        let i1 = (o[1] + k1) as isize - p;
                        if i1 < 0 || i1 >= d[1] as isize {
                            continue;
                        }
                        for k2 in 0..k {
                            let i2 = (o[2] + k2) as isize - p;
                            if i2 < 0 || i2 >= d[2] as isize {
                                continue;
                            }
                            for k3 in 0..k {
                                let i3 = (o[3] + k3) as isize - p;
                                if i3 < 0 || i3 >= d[3] as isize {
                                    continue;
                                }
                                let ii = ibase
                                    + ((i0 as usize * d[1] + i1 as usize) * d[2] + i2 as usize)
                                        * d[3]
                                    + i3 as usize;
                                let ki = kbase + ((k0 * k + k1) * k + k2) * k + k3;
                                acc += iv[ii] * kv[ki];
                            }
                        }
                    }
                }
            }
            *slot = acc;
        }
    });

    Ok(Tensor::computed(
        {
            let mut dims = vec![cout];
            dims.extend_from_slice(&e);
            dims
        },
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |ctx: &BackCtx| {
            let iv = ctx.parents[0].data();
            let kv = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gi = vec![0.0; cin * nd];
            let mut gk = vec![0.0; cout * cin * k * k * k * k];
            for co in 0..cout {
                for (lin, go) in g[co * ne..(co + 1) * ne].iter().enumerate() {
                    if *go == 0.0 {
                        continue;
                    }
                    let mut rem = lin;
                    let mut o = [0usize; 4];
                    for a in (0..4).rev() {
                        o[a] = rem % e[a];
                        rem /= e[a];
                    }
                    for ci in 0..cin {
                        let ibase = ci * nd;
                        let kbase = (co * cin + ci) * k * k * k * k;
                        for k0 in 0..k {
                            let i0 = (o[0] + k0) as isize - p;
                            if i0 < 0 || i0 >= d[0] as isize {
                                continue;
                            }
                            for k1 in 0..k {
                                let i1 = (o[1] + k1) as isize - p;
                                if i1 < 0 || i1 >= d[1] as isize {
                                    continue;
                                }
                                for k2 in 0..k {
                                    let i2 = (o[2] + k2) as isize - p;
                                    if i2 < 0 || i2 >= d[2] as isize {
                                        continue;
                                    }
                                    for k3 in 0..k {
                                        let i3 = (o[3] + k3) as isize - p;
                                        if i3 < 0 || i3 >= d[3] as isize {
                                            continue;
                                        }
                                        let ii = ibase
                                            + ((i0 as usize * d[1] + i1 as usize) * d[2]
                                                + i2 as usize)
                                                * d[3]
                                            + i3 as usize;
                                        let ki = kbase + ((k0 * k + k1) * k + k2) * k + k3;
                                        gi[ii] += go * kv[ki];
                                        gk[ki] += go * iv[ii];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gi, gk]
        }),
    ))
}

/// Divide each spatial location's channel vector by max(its L2 norm, epsilon).
pub fn l2_normalize_channels(f: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = f.dims();
    if d.len() != 3 {
        return Err(Error::Shape(format!("l2_normalize_channels: dims {:?}", d)));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("l2_normalize_channels: epsilon must be > 0".into()));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let hw = h * w;
    let fv = f.to_vec();
    let mut out = vec![0.0; c * hw];
    for s in 0..hw {
        let mut n2 = 0.0;
        for ci in 0..c {
            let x = fv[ci * hw + s];
            n2 += x * x;
        }
        let den = n2.sqrt().max(epsilon);
        for ci in 0..c {
            out[ci * hw + s] = fv[ci * hw + s] / den;
        }
    }
    Ok(Tensor::computed(
        d,
        out,
        vec![f.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; c * hw];
            for s in 0..hw {
                let mut n2 = 0.0;
                let mut xg = 0.0;
                for ci in 0..c {
                    let xi = x[ci * hw + s];
                    n2 += xi * xi;
                    xg += xi * g[ci * hw + s];
                }
                let n = n2.sqrt();
                if n >= epsilon {
                    let n3 = n * n * n;
                    for ci in 0..c {
                        gx[ci * hw + s] = g[ci * hw + s] / n - x[ci * hw + s] * xg / n3;
                    }
                } else {
                    for ci in 0..c {
                        gx[ci * hw + s] = g[ci * hw + s] / epsilon;
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Nearest-neighbour upsampling of the last two axes by integer factor r.
pub fn upsample_nearest(t: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Config("upsample_nearest: r must be >= 1".into()));
    }
    let d = t.dims();
    if d.len() < 2 {
        return Err(Error::Shape("upsample_nearest: need at least 2 dims".into()));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let batch: usize = d[..d.len() - 2].iter().product();
    let (oh, ow) = (h * r, w * r);
    let tv = t.to_vec();
    let mut out = vec![0.0; batch * oh * ow];
    for b in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                out[(b * oh + y) * ow + x] = tv[(b * h + y / r) * w + x / r];
            }
        }
    }
    let mut od = d.clone();
    let n = od.len();
    od[n - 2] = oh;
    od[n - 1] = ow;
    Ok(Tensor::computed(
        od,
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let g = ctx.out_grad;
            let mut gi = vec![0.0; batch * h * w];
            for b in 0..batch {
                for y in 0..oh {
                    for x in 0..ow {
                        gi[(b * h + y / r) * w + x / r] += g[(b * oh + y) * ow + x];
                    }
                }
            }
            vec![gi]
        }),
    ))
}

/// Keep every r-th pixel of the last two axes (top-left of each r x r block).
pub fn downsample_nearest(t: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Config("downsample_nearest: r must be >= 1".into()));
    }
    let d = t.dims();
    if d.len() < 2 {
        return Err(Error::Shape("downsample_nearest: need at least 2 dims".into()));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "downsample_nearest: {h}x{w} not divisible by {r}"
        )));
    }
    let batch: usize = d[..d.len() - 2].iter().product();
    let (oh, ow) = (h / r, w / r);
    let tv = t.to_vec();
    let mut out = vec![0.0; batch * oh * ow];
    for b in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                out[(b * oh + y) * ow + x] = tv[(b * h + y * r) * w + x * r];
            }
        }
    }
    let mut od = d.clone();
    let n = od.len();
    od[n - 2] = oh;
    od[n - 1] = ow;
    Ok(Tensor::computed(
        od,
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let g = ctx.out_grad;
            let mut gi = vec![0.0; batch * h * w];
            for b in 0..batch {
                for y in 0..oh {
                    for x in 0..ow {
                        gi[(b * h + y * r) * w + x * r] = g[(b * oh + y) * ow + x];
                    }
                }
            }
            vec![gi]
        }),
    ))
}

/// Swap the matching direction of a 4D tensor: out[k,l,i,j] = in[i,j,k,l].
pub fn transpose4d(t: &Tensor) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("transpose4d: dims {:?}", d)));
    }
    let (a, b, c, e) = (d[0], d[1], d[2], d[3]);
    let tv = t.to_vec();
    let mut out = vec![0.0; tv.len()];
    for i in 0..a {
        for j in 0..b {
            for kk in 0..c {
                for l in 0..e {
                    out[((kk * e + l) * a + i) * b + j] = tv[((i * b + j) * c + kk) * e + l];
                }
            }
        }
    }
    Ok(Tensor::computed(
        vec![c, e, a, b],
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let g = ctx.out_grad;
            let mut gi = vec![0.0; g.len()];
            for i in 0..a {
                for j in 0..b {
                    for kk in 0..c {
                        for l in 0..e {
                            gi[((i * b + j) * c + kk) * e + l] =
                                g[((kk * e + l) * a + i) * b + j];
                        }
                    }
                }
            }
            vec![gi]
        }),
    ))
}

/// All-pairs channel contraction: fa [C,ha,wa], fb [C,hb,wb] -> [ha,wa,hb,wb].
pub fn corr_pairwise(fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
    let da = fa.dims();
    let db = fb.dims();
    if da.len() != 3 || db.len() != 3 {
        return Err(Error::Shape(format!("corr_pairwise: {:?} vs {:?}", da, db)));
    }
    if da[0] != db[0] {
        return Err(Error::Shape(format!(
            "corr_pairwise: channel mismatch {} vs {}",
            da[0], db[0]
        )));
    }
    let c = da[0];
    let na = da[1] * da[2];
    let nb = db[1] * db[2];
    let av = fa.to_vec();
    let bv = fb.to_vec();
    // transpose to location-major for contiguous dot products
    let mut at = vec![0.0; na * c];
    for ci in 0..c {
        for s in 0..na {
            at[s * c + ci] = av[ci * na + s];
        }
    }
    let mut bt = vec![0.0; nb * c];
    for ci in 0..c {
        for s in 0..nb {
            bt[s * c + ci] = bv[ci * nb + s];
        }
    }
    let mut out = vec![0.0; na * nb];
    out.par_chunks_mut(nb).enumerate().for_each(|(sa, row)| {
        let ra = &at[sa * c..(sa + 1) * c];
        for (sb, slot) in row.iter_mut().enumerate() {
            let rb = &bt[sb * c..(sb + 1) * c];
            *slot = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    });
    Ok(Tensor::computed(
        vec![da[1], da[2], db[1], db[2]],
        out,
        vec![fa.clone(), fb.clone()],
        Box::new(move |ctx: &BackCtx| {
            let av = ctx.parents[0].data();
            let bv = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut ga = vec![0.0; c * na];
            let mut gb = vec![0.0; c * nb];
            for sa in 0..na {
                for sb in 0..nb {
                    let go = g[sa * nb + sb];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        ga[ci * na + sa] += go * bv[ci * nb + sb];
                        gb[ci * nb + sb] += go * av[ci * na + sa];
                    }
                }
            }
            vec![ga, gb]
        }),
    ))
}

/// Correlate the single feature vector at query (qi,qj) of fa with every
/// location of fb: out[k,l] = <fa[:,qi,qj], fb[:,k,l]>.
pub fn query_correlation(fa: &Tensor, fb: &Tensor, qi: usize, qj: usize) -> Result<Tensor> {
    let da = fa.dims();
    let db = fb.dims();
    if da.len() != 3 || db.len() != 3 || da[0] != db[0] {
        return Err(Error::Shape(format!(
            "query_correlation: {:?} vs {:?}",
            da, db
        )));
    }
    if qi >= da[1] || qj >= da[2] {
        return Err(Error::Bounds(format!(
            "query ({qi},{qj}) outside {}x{} grid",
            da[1], da[2]
        )));
    }
    let c = da[0];
    let na = da[1] * da[2];
    let nb = db[1] * db[2];
    let q = qi * da[2] + qj;
    let av = fa.to_vec();
    let bv = fb.to_vec();
    let mut out = vec![0.0; nb];
    for ci in 0..c {
        let x = av[ci * na + q];
        if x == 0.0 {
            continue;
        }
        for s in 0..nb {
            out[s] += x * bv[ci * nb + s];
        }
    }
    Ok(Tensor::computed(
        vec![db[1], db[2]],
        out,
        vec![fa.clone(), fb.clone()],
        Box::new(move |ctx: &BackCtx| {
            let av = ctx.parents[0].data();
            let bv = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut ga = vec![0.0; c * na];
            let mut gb = vec![0.0; c * nb];
            for ci in 0..c {
                let x = av[ci * na + q];
                let mut acc = 0.0;
                for s in 0..nb {
                    acc += g[s] * bv[ci * nb + s];
                    gb[ci * nb + s] = g[s] * x;
                }
                ga[ci * na + q] = acc;
            }
            vec![ga, gb]
        }),
    ))
}

/// Extract the [d2,d3] slice of a 4D tensor at fixed first two indices.
pub fn slice4d_front(t: &Tensor, i: usize, j: usize) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("slice4d_front: dims {:?}", d)));
    }
    if i >= d[0] || j >= d[1] {
        return Err(Error::Bounds(format!(
            "slice ({i},{j}) outside {}x{}",
            d[0], d[1]
        )));
    }
    let block = d[2] * d[3];
    let off = (i * d[1] + j) * block;
    let data = t.data()[off..off + block].to_vec();
    let total = t.len();
    Ok(Tensor::computed(
        vec![d[2], d[3]],
        data,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut gi = vec![0.0; total];
            gi[off..off + block].copy_from_slice(ctx.out_grad);
            vec![gi]
        }),
    ))
}

/// Soft mutual nearest neighbour damping on a nonnegative 4D tensor:
/// out = rA * rB * x with rA = x / max(max over (i,j), eps) and
/// rB = x / max(max over (k,l), eps).
pub fn soft_mutual_nn(t: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("soft_mutual_nn: dims {:?}", d)));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("soft_mutual_nn: epsilon must be > 0".into()));
    }
    let na = d[0] * d[1];
    let nb = d[2] * d[3];
    let x = t.to_vec();
    let (max_a, _arg_a) = slice_maxima(&x, na, nb, true);
    let (max_b, _arg_b) = slice_maxima(&x, na, nb, false);
    let mut out = vec![0.0; na * nb];
    for sa in 0..na {
        let mb = max_b[sa].max(epsilon);
        for sb in 0..nb {
            let ma = max_a[sb].max(epsilon);
            let v = x[sa * nb + sb];
            out[sa * nb + sb] = v * v * v / (ma * mb);
        }
    }
    Ok(Tensor::computed(
        d,
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let g = ctx.out_grad;
            let (max_a, arg_a) = slice_maxima(&x[..], na, nb, true);
            let (max_b, arg_b) = slice_maxima(&x[..], na, nb, false);
            let mut gx = vec![0.0; na * nb];
            for sa in 0..na {
                let mb_raw = max_b[sa];
                let mb = mb_raw.max(epsilon);
                for sb in 0..nb {
                    let go = g[sa * nb + sb];
                    if go == 0.0 {
                        continue;
                    }
                    let ma_raw = max_a[sb];
                    let ma = ma_raw.max(epsilon);
                    let v = x[sa * nb + sb];
                    gx[sa * nb + sb] += go * 3.0 * v * v / (ma * mb);
                    let v3 = v * v * v;
                    if ma_raw >= epsilon {
                        gx[arg_a[sb] * nb + sb] += go * (-v3 / (ma * ma * mb));
                    }
                    if mb_raw >= epsilon {
                        gx[sa * nb + arg_b[sa]] += go * (-v3 / (ma * mb * mb));
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Maxima of each source-slice (over_source=true: max over sa per sb) or
/// target-slice, with first-index tie breaking.
fn slice_maxima(x: &[f64], na: usize, nb: usize, over_source: bool) -> (Vec<f64>, Vec<usize>) {
    if over_source {
        let mut m = vec![f64::NEG_INFINITY; nb];
        let mut arg = vec![0usize; nb];
        for sa in 0..na {
            for sb in 0..nb {
                let v = x[sa * nb + sb];
                if v > m[sb] {
                    m[sb] = v;
                    arg[sb] = sa;
                }
            }
        }
        (m, arg)
    } else {
        let mut m = vec![f64::NEG_INFINITY; na];
        let mut arg = vec![0usize; na];
        for sa in 0..na {
            for sb in 0..nb {
                let v = x[sa * nb + sb];
                if v > m[sa] {
                    m[sa] = v;
                    arg[sa] = sb;
                }
            }
        }
        (m, arg)
    }
}

/// Row-wise softmax of a [N,T] tensor.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::Shape(format!("softmax_rows: dims {:?}", d)));
    }
    let (n, w) = (d[0], d[1]);
    let x = t.to_vec();
    let mut out = vec![0.0; n * w];
    for r in 0..n {
        let row = &x[r * w..(r + 1) * w];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in out[r * w..(r + 1) * w].iter_mut() {
            *o /= z;
        }
    }
    Ok(Tensor::computed(
        d,
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let y = ctx.out_data;
            let g = ctx.out_grad;
            let mut gx = vec![0.0; n * w];
            for r in 0..n {
                let dot: f64 = (0..w).map(|c| g[r * w + c] * y[r * w + c]).sum();
                for c in 0..w {
                    gx[r * w + c] = y[r * w + c] * (g[r * w + c] - dot);
                }
            }
            vec![gx]
        }),
    ))
}

/// Stack equal-length rows into an [N, len] matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Shape("stack_rows: no rows".into()));
    }
    let w = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * w);
    for r in rows {
        if r.len() != w {
            return Err(Error::Shape("stack_rows: unequal row lengths".into()));
        }
        data.extend_from_slice(&r.data());
    }
    let n = rows.len();
    Ok(Tensor::computed(
        vec![n, w],
        data,
        rows.to_vec(),
        Box::new(move |ctx: &BackCtx| {
            ctx.out_grad.chunks(w).map(|c| c.to_vec()).collect()
        }),
    ))
}

/// Gram matrix A * A^T of an [N,T] matrix.
pub fn gram(t: &Tensor) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::Shape(format!("gram: dims {:?}", d)));
    }
    let (n, w) = (d[0], d[1]);
    let x = t.to_vec();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..w).map(|c| x[i * w + c] * x[j * w + c]).sum();
        }
    }
    Ok(Tensor::computed(
        vec![n, n],
        out,
        vec![t.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let g = ctx.out_grad;
            // dA = (G + G^T) A
            let mut gx = vec![0.0; n * w];
            for i in 0..n {
                for j in 0..n {
                    let s = g[i * n + j] + g[j * n + i];
                    if s == 0.0 {
                        continue;
                    }
                    for c in 0..w {
                        gx[i * w + c] += s * x[j * w + c];
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Frobenius norm of the difference of two equal-shape tensors.
pub fn frobenius_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = sub(a, b)?;
    let sq = mul(&d, &d)?;
    Ok(sqrt(&sum(&sq)))
}

/// Linear index of the maximum, lowest row-major index on ties.
pub fn argmax_linear(data: &[f64]) -> usize {
    let mut best = 0usize;
    let mut bv = f64::NEG_INFINITY;
    for (i, v) in data.iter().enumerate() {
        if *v > bv {
            bv = *v;
            best = i;
        }
    }
    best
}

/// Helper for tests and checks: index into a tensor by multi-index.
pub fn at(dims: &[usize], data: &[f64], idx: &[usize]) -> f64 {
    data[linear_index(dims, idx)]
}

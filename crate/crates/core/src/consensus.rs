//! Learnable neighbourhood-consensus filtering of the coarse 4D tensor.
//!
//! The stack is applied symmetrically in both matching directions,
//! N(C) + N(C^T)^T, and sandwiched between soft mutual nearest neighbour
//! filters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::CorrTensor4D;
use crate::error::{Error, Result};
use crate::tensor::{ops, ParamStore, Tensor};

/// Denominator guard for the mutual-NN ratios; the max-division is
/// undefined on all-zero slices.
pub const MNN_EPSILON: f64 = 1e-12;

/// Layer layout of the 4D consensus stack.
#[derive(Clone, Debug)]
pub struct ConsensusConfig {
    /// (kernel size, in-channels, out-channels) per layer.
    pub layers: Vec<(usize, usize, usize)>,
    /// ReLU after every layer except the last.
    pub relu_between: bool,
}

impl Default for ConsensusConfig {
    /// The NCNet baseline setting: 3 layers, k = 5, channels 1->16->16->1.
    fn default() -> Self {
        ConsensusConfig {
            layers: vec![(5, 1, 16), (5, 16, 16), (5, 16, 1)],
            relu_between: true,
        }
    }
}

impl ConsensusConfig {
    /// Small stack for gradient checks and toy training.
    pub fn tiny() -> Self {
        ConsensusConfig {
            layers: vec![(3, 1, 2), (3, 2, 1)],
            relu_between: true,
        }
    }

    /// Single-channel stack whose delta initialization is the identity.
    pub fn delta_chain(n_layers: usize, k: usize) -> Self {
        ConsensusConfig {
            layers: (0..n_layers).map(|_| (k, 1, 1)).collect(),
            relu_between: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("consensus stack needs >= 1 layer".into()));
        }
        if self.layers[0].1 != 1 {
            return Err(Error::Config("first consensus layer must take 1 channel".into()));
        }
        if self.layers.last().unwrap().2 != 1 {
            return Err(Error::Config("last consensus layer must emit 1 channel".into()));
        }
        let mut prev_out = 1;
        for (i, (k, cin, cout)) in self.layers.iter().enumerate() {
            if k % 2 == 0 {
                return Err(Error::Config(format!("layer {i}: kernel size {k} must be odd")));
            }
            if *cin != prev_out {
                return Err(Error::Config(format!(
                    "layer {i}: in-channels {cin} != previous out-channels {prev_out}"
                )));
            }
            prev_out = *cout;
        }
        Ok(())
    }

    pub fn kernel_name(i: usize) -> String {
        format!("nc.layer{i}.kernel")
    }
}

/// Seeded uniform(+-sqrt(6/fan_in)) kernels for the stack.
pub fn init_nc_params(cfg: &ConsensusConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    for (i, (k, cin, cout)) in cfg.layers.iter().enumerate() {
        let dims = vec![*cout, *cin, *k, *k, *k, *k];
        let fan_in: usize = cin * k * k * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ps.insert(&ConsensusConfig::kernel_name(i), Tensor::param(&dims, data)?)?;
    }
    Ok(ps)
}

/// Delta (center-tap identity) kernels; with `relu_between` off the stack
/// is the identity whenever channel counts permit.
pub fn delta_nc_params(cfg: &ConsensusConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut ps = ParamStore::new();
    for (i, (k, cin, cout)) in cfg.layers.iter().enumerate() {
        let dims = vec![*cout, *cin, *k, *k, *k, *k];
        let mut data = vec![0.0; dims.iter().product()];
        let center = k / 2;
        let taps = k * k * k * k;
        let center_off = ((center * k + center) * k + center) * k + center;
        for co in 0..*cout {
            let ci = co % cin;
            data[(co * cin + ci) * taps + center_off] = 1.0;
        }
        ps.insert(&ConsensusConfig::kernel_name(i), Tensor::param(&dims, data)?)?;
    }
    Ok(ps)
}

fn nc_stack(c: &Tensor, params: &ParamStore, cfg: &ConsensusConfig) -> Result<Tensor> {
    let d = c.dims();
    let mut dims5 = vec![1];
    dims5.extend_from_slice(&d);
    let mut x = ops::reshape(c, &dims5)?;
    let last = cfg.layers.len() - 1;
    for (i, (k, _, _)) in cfg.layers.iter().enumerate() {
        let kernel = params.get(&ConsensusConfig::kernel_name(i))?;
        x = ops::conv4d(&x, kernel, (k - 1) / 2)?;
        if cfg.relu_between && i != last {
            x = ops::relu(&x);
        }
    }
    ops::reshape(&x, &d)
}

/// Symmetric consensus filtering: N(C) + N(C^T)^T.
pub fn nc_filter(
    c: &CorrTensor4D,
    params: &ParamStore,
    cfg: &ConsensusConfig,
) -> Result<CorrTensor4D> {
    cfg.validate()?;
    let fwd = nc_stack(&c.data, params, cfg)?;
    let ct = ops::transpose4d(&c.data)?;
    let bwd = ops::transpose4d(&nc_stack(&ct, params, cfg)?)?;
    CorrTensor4D::new(ops::add(&fwd, &bwd)?)
}

/// Soft mutual nearest neighbour filter. Scores are clamped at zero before
/// the ratio computation; negative maxima would flip signs.
pub fn soft_mutual_nn(c: &CorrTensor4D, epsilon: f64) -> Result<CorrTensor4D> {
    if epsilon <= 0.0 {
        return Err(Error::Config("soft_mutual_nn: epsilon must be > 0".into()));
    }
    let clamped = ops::relu(&c.data);
    CorrTensor4D::new(ops::soft_mutual_nn(&clamped, epsilon)?)
}

/// Full refinement: soft MNN, consensus stack, soft MNN.
pub fn refine(
    c: &CorrTensor4D,
    params: &ParamStore,
    cfg: &ConsensusConfig,
) -> Result<CorrTensor4D> {
    let pre = soft_mutual_nn(c, MNN_EPSILON)?;
    let filtered = nc_filter(&pre, params, cfg)?;
    soft_mutual_nn(&filtered, MNN_EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_corr(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> CorrTensor4D {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        CorrTensor4D::new(Tensor::new(&dims, data).unwrap()).unwrap()
    }

    #[test]
    fn delta_kernels_double_the_input() {
        let cfg = ConsensusConfig::delta_chain(3, 3);
        let ps = delta_nc_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_corr(&mut rng, [3, 3, 3, 3], -1.0, 1.0);
        let out = nc_filter(&c, &ps, &cfg).unwrap();
        let (cv, ov) = (c.data.to_vec(), out.data.to_vec());
        for (x, y) in cv.iter().zip(&ov) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_kernels_give_zero() {
        let cfg = ConsensusConfig::tiny();
        let mut ps = ParamStore::new();
        for (i, (k, cin, cout)) in cfg.layers.iter().enumerate() {
            let dims = vec![*cout, *cin, *k, *k, *k, *k];
            let n = dims.iter().product();
            ps.insert(
                &ConsensusConfig::kernel_name(i),
                Tensor::param(&dims, vec![0.0; n]).unwrap(),
            )
            .unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_corr(&mut rng, [2, 2, 2, 2], -1.0, 1.0);
        let out = nc_filter(&c, &ps, &cfg).unwrap();
        assert!(out.data.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nc_filter_matches_composition_oracle() {
        let cfg = ConsensusConfig::tiny();
        let ps = init_nc_params(&cfg, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [2usize, 3, 3, 2];
        let c = random_corr(&mut rng, dims, -1.0, 1.0);
        let out = nc_filter(&c, &ps, &cfg).unwrap().data.to_vec();

        // oracle: loop-based conv stack on C and on the permuted tensor
        let stack = |x: &[f64], d: [usize; 4]| -> Vec<f64> {
            let mut cur = x.to_vec();
            let mut cin = 1usize;
            for (i, (k, _, cout)) in cfg.layers.iter().enumerate() {
                let kv = ps.get(&ConsensusConfig::kernel_name(i)).unwrap().to_vec();
                let (next, _) = reference::conv4d_loops(
                    &cur,
                    [cin, d[0], d[1], d[2], d[3]],
                    &kv,
                    [*cout, cin, *k, *k, *k, *k],
                    (k - 1) / 2,
                );
                cur = next;
                cin = *cout;
                if cfg.relu_between && i + 1 != cfg.layers.len() {
                    for v in cur.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            cur
        };
        let cv = c.data.to_vec();
        let fwd = stack(&cv, dims);
        // permute, run, permute back
        let [a, b, cc, d4] = dims;
        let mut perm = vec![0.0; cv.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..cc {
                    for l in 0..d4 {
                        perm[((k * d4 + l) * a + i) * b + j] = cv[((i * b + j) * cc + k) * d4 + l];
                    }
                }
            }
        }
        let bwd_p = stack(&perm, [cc, d4, a, b]);
        let mut expect = fwd;
        for i in 0..a {
            for j in 0..b {
                for k in 0..cc {
                    for l in 0..d4 {
                        expect[((i * b + j) * cc + k) * d4 + l] +=
                            bwd_p[((k * d4 + l) * a + i) * b + j];
                    }
                }
            }
        }
        for (x, y) in out.iter().zip(&expect) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn soft_mnn_constant_tensor_unchanged() {
        let c = CorrTensor4D::new(Tensor::new(&[2, 2, 2, 2], vec![0.7; 16]).unwrap()).unwrap();
        let out = soft_mutual_nn(&c, MNN_EPSILON).unwrap();
        for v in out.data.to_vec() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_mnn_preserves_single_entry() {
        let mut data = vec![0.0; 16];
        data[5] = 0.4;
        let c = CorrTensor4D::new(Tensor::new(&[2, 2, 2, 2], data.clone()).unwrap()).unwrap();
        let out = soft_mutual_nn(&c, MNN_EPSILON).unwrap().data.to_vec();
        for (i, v) in out.iter().enumerate() {
            if i == 5 {
                assert!((v - 0.4).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn soft_mnn_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [3usize, 4, 4, 3];
        let c = random_corr(&mut rng, dims, 0.0, 1.0);
        let out = soft_mutual_nn(&c, MNN_EPSILON).unwrap().data.to_vec();
        let expect = reference::soft_mutual_nn_formula(&c.data.to_vec(), dims, MNN_EPSILON);
        for (x, y) in out.iter().zip(&expect) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn soft_mnn_damping_bound_on_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = random_corr(&mut rng, [2, 3, 3, 2], 0.0, 2.0);
            let cv = c.data.to_vec();
            let out = soft_mutual_nn(&c, MNN_EPSILON).unwrap().data.to_vec();
            for (o, i) in out.iter().zip(&cv) {
                assert!(*o >= -1e-12 && *o <= i + 1e-12);
            }
        }
    }

    #[test]
    fn soft_mnn_idempotent_on_permutation_like_tensor() {
        // nonzero entries are strict mutual maxima
        let mut data = vec![0.0; 2 * 2 * 2 * 2];
        // source (0,0) <-> target (1,1); source (1,0) <-> target (0,1)
        data[((0 * 2 + 0) * 2 + 1) * 2 + 1] = 0.9;
        data[((1 * 2 + 0) * 2 + 0) * 2 + 1] = 0.6;
        let c = CorrTensor4D::new(Tensor::new(&[2, 2, 2, 2], data).unwrap()).unwrap();
        let once = soft_mutual_nn(&c, MNN_EPSILON).unwrap();
        let twice = soft_mutual_nn(&once, MNN_EPSILON).unwrap();
        for (a, b) in once.data.to_vec().iter().zip(twice.data.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_swap_equivariance() {
        let cfg = ConsensusConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let ps = init_nc_params(&cfg, 100 + trial).unwrap();
            let c = random_corr(&mut rng, [2, 3, 3, 2], -1.0, 1.0);
            let a = refine(&crate::correlation::transpose4d(&c).unwrap(), &ps, &cfg).unwrap().data.to_vec();
            let b = crate::correlation::transpose4d(&refine(&c, &ps, &cfg).unwrap()).unwrap().data.to_vec();
            for (x, y) in a.iter().zip(&b) {
                let scale = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn refine_zero_input_gives_zero() {
        let cfg = ConsensusConfig::tiny();
        let ps = init_nc_params(&cfg, 8).unwrap();
        let c = CorrTensor4D::new(Tensor::zeros(&[2, 2, 2, 2])).unwrap();
        let out = refine(&c, &ps, &cfg).unwrap();
        assert!(out.data.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn refine_equals_three_stage_composition() {
        let cfg = ConsensusConfig::tiny();
        let ps = init_nc_params(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_corr(&mut rng, [2, 2, 2, 2], -1.0, 1.0);
        let a = refine(&c, &ps, &cfg).unwrap().data.to_vec();
        let b = soft_mutual_nn(
            &nc_filter(&soft_mutual_nn(&c, MNN_EPSILON).unwrap(), &ps, &cfg).unwrap(),
            MNN_EPSILON,
        )
        .unwrap()
        .data
        .to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_refine_preserves_argmax_of_dominant_diagonal() {
        // diagonal-dominant nonnegative tensor: per-source argmax survives refine
        let cfg = ConsensusConfig::delta_chain(2, 3);
        let ps = delta_nc_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = [2usize, 2, 2, 2];
        let mut data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..0.3)).collect();
        for i in 0..2 {
            for j in 0..2 {
                data[((i * 2 + j) * 2 + i) * 2 + j] = rng.gen_range(0.7..1.0);
            }
        }
        let c = CorrTensor4D::new(Tensor::new(&dims, data.clone()).unwrap()).unwrap();
        let out = refine(&c, &ps, &cfg).unwrap().data.to_vec();
        for s in 0..4 {
            let before = (0..4).max_by(|x, y| data[s * 4 + x].partial_cmp(&data[s * 4 + y]).unwrap()).unwrap();
            let after = (0..4).max_by(|x, y| out[s * 4 + x].partial_cmp(&out[s * 4 + y]).unwrap()).unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn nc_kernel_gradients_match_finite_differences() {
        let cfg = ConsensusConfig::tiny();
        let ps = init_nc_params(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [2usize, 2, 2, 2];
        let data: Vec<f64> = (0..16)
            .map(|_| {
                // stay away from ReLU kinks
                let v: f64 = rng.gen_range(0.1..1.0);
                v
            })
            .collect();
        let c = CorrTensor4D::new(Tensor::new(&dims, data).unwrap()).unwrap();
        let loss = || {
            let out = nc_filter(&c, &ps, &cfg).unwrap();
            let sq = ops::mul(&out.data, &out.data).unwrap();
            ops::sum(&sq).value()
        };
        ps.zero_grads();
        {
            let out = nc_filter(&c, &ps, &cfg).unwrap();
            let sq = ops::mul(&out.data, &out.data).unwrap();
            ops::sum(&sq).backward().unwrap();
        }
        for (name, p) in ps.trainable() {
            let analytic = p.grad().expect("missing grad");
            let numeric = reference::central_diff_grad(p, 1e-5, loss);
            let err = reference::max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }
}

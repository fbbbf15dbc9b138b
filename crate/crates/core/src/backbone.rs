//! Dual-resolution feature extraction.
//!
//! Three backbones are available: a toy strided-conv pyramid with five FPN
//! fusion variants (trainable lateral/fuse convs, frozen trunk), a
//! training-free patch-descriptor backbone, and externally supplied feature
//! files in the binary tensor container.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{container, ops, ParamStore, Tensor};

/// A C x H x W grid of feature vectors with an image-space stride.
///
/// Feature cell (x,y) is centered at image pixel
/// ((x+0.5)*stride - 0.5, (y+0.5)*stride - 0.5).
#[derive(Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<FeatureMap> {
        let d = data.dims();
        if d.len() != 3 || d.iter().any(|v| *v == 0) {
            return Err(Error::Shape(format!("feature map dims {:?}", d)));
        }
        if stride == 0 {
            return Err(Error::Config("feature stride must be >= 1".into()));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    /// Image-pixel center of grid cell (gx,gy).
    pub fn center_px(&self, gx: usize, gy: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((gx as f64 + 0.5) * s - 0.5, (gy as f64 + 0.5) * s - 0.5)
    }

    /// Nearest grid cell of an image pixel, if inside the grid.
    pub fn cell_of_px(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let s = self.stride as f64;
        let gx = ((px + 0.5) / s - 0.5).round();
        let gy = ((py + 0.5) / s - 0.5).round();
        if gx < 0.0 || gy < 0.0 || gx >= self.width() as f64 || gy >= self.height() as f64 {
            None
        } else {
            Some((gx as usize, gy as usize))
        }
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let stride = Tensor::scalar(self.stride as f64);
        container::save(path, &[("data", &self.data), ("stride", &stride)])
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<FeatureMap> {
        let entries = container::load(path)?;
        let mut data = None;
        let mut stride = None;
        for (name, t) in entries {
            match name.as_str() {
                "data" => data = Some(t),
                "stride" => stride = Some(t),
                _ => return Err(Error::Format(format!("unexpected entry {name:?}"))),
            }
        }
        let data = data.ok_or_else(|| Error::Format("missing \"data\" entry".into()))?;
        let stride = stride.ok_or_else(|| Error::Format("missing \"stride\" entry".into()))?;
        if stride.len() != 1 {
            return Err(Error::Format("\"stride\" entry must be scalar".into()));
        }
        let s = stride.value();
        if s < 1.0 || s.fract() != 0.0 {
            return Err(Error::Format(format!("bad stride value {s}")));
        }
        FeatureMap::new(data, s as usize)
    }
}

/// Interlocked fine/coarse feature map pair with fine = ratio x coarse.
#[derive(Clone)]
pub struct DualFeatures {
    pub fine: FeatureMap,
    pub coarse: FeatureMap,
    pub ratio: usize,
}

impl DualFeatures {
    pub fn new(fine: FeatureMap, coarse: FeatureMap, ratio: usize) -> Result<DualFeatures> {
        if ratio < 1 {
            return Err(Error::Config("ratio must be >= 1".into()));
        }
        if fine.height() != ratio * coarse.height() || fine.width() != ratio * coarse.width() {
            return Err(Error::Shape(format!(
                "fine grid {}x{} is not {ratio}x the coarse grid {}x{}",
                fine.height(),
                fine.width(),
                coarse.height(),
                coarse.width()
            )));
        }
        if fine.stride * ratio != coarse.stride {
            return Err(Error::Shape(format!(
                "stride mismatch: fine {} * {ratio} != coarse {}",
                fine.stride, coarse.stride
            )));
        }
        if fine.channels() != coarse.channels() {
            return Err(Error::Shape("fine/coarse channel mismatch".into()));
        }
        Ok(DualFeatures { fine, coarse, ratio })
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        container::save(
            path,
            &[
                ("fine.data", &self.fine.data),
                ("fine.stride", &Tensor::scalar(self.fine.stride as f64)),
                ("coarse.data", &self.coarse.data),
                ("coarse.stride", &Tensor::scalar(self.coarse.stride as f64)),
                ("ratio", &Tensor::scalar(self.ratio as f64)),
            ],
        )
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<DualFeatures> {
        let mut fine_data = None;
        let mut fine_stride = None;
        let mut coarse_data = None;
        let mut coarse_stride = None;
        let mut ratio = None;
        for (name, t) in container::load(path)? {
            match name.as_str() {
                "fine.data" => fine_data = Some(t),
                "fine.stride" => fine_stride = Some(t),
                "coarse.data" => coarse_data = Some(t),
                "coarse.stride" => coarse_stride = Some(t),
                "ratio" => ratio = Some(t),
                _ => return Err(Error::Format(format!("unexpected entry {name:?}"))),
            }
        }
        let scalar = |t: Option<Tensor>, name: &str| -> Result<usize> {
            let t = t.ok_or_else(|| Error::Format(format!("missing {name:?} entry")))?;
            if t.len() != 1 {
                return Err(Error::Format(format!("{name:?} entry must be scalar")));
            }
            let v = t.value();
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("bad {name:?} value {v}")));
            }
            Ok(v as usize)
        };
        let fine = FeatureMap::new(
            fine_data.ok_or_else(|| Error::Format("missing \"fine.data\" entry".into()))?,
            scalar(fine_stride, "fine.stride")?,
        )?;
        let coarse = FeatureMap::new(
            coarse_data.ok_or_else(|| Error::Format("missing \"coarse.data\" entry".into()))?,
            scalar(coarse_stride, "coarse.stride")?,
        )?;
        DualFeatures::new(fine, coarse, scalar(ratio, "ratio")?)
    }
}

/// FPN fusion topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// Stepwise top-down fusion through all three levels.
    A,
    /// Top level upsampled x4 directly into the bottom level.
    B,
    /// As A, with an extra 3x3 conv before each upsampling.
    C,
    /// As B, with an extra 3x3 conv before upsampling.
    D,
    /// As A, with a fourth pyramid level included.
    E,
}

impl FusionVariant {
    pub fn parse(s: &str) -> Result<FusionVariant> {
        match s {
            "a" | "A" => Ok(FusionVariant::A),
            "b" | "B" => Ok(FusionVariant::B),
            "c" | "C" => Ok(FusionVariant::C),
            "d" | "D" => Ok(FusionVariant::D),
            "e" | "E" => Ok(FusionVariant::E),
            _ => Err(Error::Config(format!("unknown fusion variant {s:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FusionVariant::A => "a",
            FusionVariant::B => "b",
            FusionVariant::C => "c",
            FusionVariant::D => "d",
            FusionVariant::E => "e",
        }
    }

    fn levels(&self) -> usize {
        if *self == FusionVariant::E {
            4
        } else {
            3
        }
    }
}

/// Toy extractor configuration. The trunk runs at strides 2/4/8(/16); the
/// aligned channel width stands in for the full-scale network's 1024
/// lateral channels.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub trunk_widths: [usize; 4],
    /// Channel count every level is aligned to by the lateral 1x1 convs.
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            trunk_widths: [8, 16, 32, 32],
            channels: 32,
        }
    }
}

/// Fine/coarse grid extents under the stride convention: a stride-s map of a
/// WxH image has a (W/s)x(H/s) grid.
pub fn dual_grid_shape(
    image_w: usize,
    image_h: usize,
    fine_stride: usize,
    ratio: usize,
) -> ((usize, usize), (usize, usize)) {
    let cs = fine_stride * ratio;
    (
        (image_w / fine_stride, image_h / fine_stride),
        (image_w / cs, image_h / cs),
    )
}

fn conv_param_names(variant: FusionVariant) -> Vec<(&'static str, bool)> {
    // (name, trainable)
    let mut names = vec![
        ("bb.trunk1.kernel", false),
        ("bb.trunk2.kernel", false),
        ("bb.trunk3.kernel", false),
        ("bb.lateral1.kernel", true),
        ("bb.lateral2.kernel", true),
        ("bb.lateral3.kernel", true),
        ("bb.fuse1.kernel", true),
    ];
    match variant {
        FusionVariant::A => names.push(("bb.fuse2.kernel", true)),
        FusionVariant::B => {}
        FusionVariant::C => {
            names.push(("bb.fuse2.kernel", true));
            names.push(("bb.pre2.kernel", true));
            names.push(("bb.pre3.kernel", true));
        }
        FusionVariant::D => names.push(("bb.pre3.kernel", true)),
        FusionVariant::E => {
            names.push(("bb.fuse2.kernel", true));
            names.push(("bb.fuse3.kernel", true));
            names.push(("bb.trunk4.kernel", false));
            names.push(("bb.lateral4.kernel", true));
        }
    }
    names
}

fn kernel_dims(name: &str, cfg: &BackboneConfig) -> Vec<usize> {
    let [w1, w2, w3, w4] = cfg.trunk_widths;
    let c = cfg.channels;
    match name {
        "bb.trunk1.kernel" => vec![w1, cfg.in_channels, 3, 3],
        "bb.trunk2.kernel" => vec![w2, w1, 3, 3],
        "bb.trunk3.kernel" => vec![w3, w2, 3, 3],
        "bb.trunk4.kernel" => vec![w4, w3, 3, 3],
        "bb.lateral1.kernel" => vec![c, w1, 1, 1],
        "bb.lateral2.kernel" => vec![c, w2, 1, 1],
        "bb.lateral3.kernel" => vec![c, w3, 1, 1],
        "bb.lateral4.kernel" => vec![c, w4, 1, 1],
        _ => vec![c, c, 3, 3], // fuse / pre convs
    }
}

/// Seeded uniform(+-sqrt(6/fan_in)) initialization of every kernel the
/// variant needs. Trunk kernels are frozen; lateral/fuse/pre kernels train.
pub fn init_backbone_params(
    cfg: &BackboneConfig,
    variant: FusionVariant,
    seed: u64,
) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    for (name, trainable) in conv_param_names(variant) {
        let dims = kernel_dims(name, cfg);
        let fan_in: usize = dims[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let t = if trainable {
            Tensor::param(&dims, data)?
        } else {
            Tensor::new(&dims, data)?
        };
        ps.insert(name, t)?;
    }
    Ok(ps)
}

fn trunk_level(prev: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let conv = ops::conv2d(prev, kernel, 1)?;
    ops::downsample_nearest(&ops::relu(&conv), 2)
}

fn lateral(level: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    ops::conv2d(level, kernel, 0)
}

fn fuse(a: &Tensor, b: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    ops::conv2d(&ops::add(a, b)?, kernel, 1)
}

/// Run the toy pyramid and the requested fusion graph.
///
/// Returns the fused bottom level as the fine map (stride 2) and the top
/// level as the coarse map (stride 8), r = 4.
pub fn extract_dual(
    image: &Tensor,
    params: &ParamStore,
    variant: FusionVariant,
    cfg: &BackboneConfig,
) -> Result<DualFeatures> {
    let d = image.dims();
    if d.len() != 3 || d[0] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "image dims {:?}, expected [{},H,W]",
            d, cfg.in_channels
        )));
    }
    let coarse_stride = if variant.levels() == 4 { 16 } else { 8 };
    if d[1] % coarse_stride != 0 || d[2] % coarse_stride != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by the deepest stride {coarse_stride}",
            d[2], d[1]
        )));
    }

    let l1 = trunk_level(image, params.get("bb.trunk1.kernel")?)?; // stride 2
    let l2 = trunk_level(&l1, params.get("bb.trunk2.kernel")?)?; // stride 4
    let l3 = trunk_level(&l2, params.get("bb.trunk3.kernel")?)?; // stride 8

    let p1 = lateral(&l1, params.get("bb.lateral1.kernel")?)?;
    let p2 = lateral(&l2, params.get("bb.lateral2.kernel")?)?;
    let p3 = lateral(&l3, params.get("bb.lateral3.kernel")?)?;

    let fuse1 = params.get("bb.fuse1.kernel")?;
    let (fine, coarse) = match variant {
        FusionVariant::A => {
            let m2 = fuse(&p2, &ops::upsample_nearest(&p3, 2)?, params.get("bb.fuse2.kernel")?)?;
            let m1 = fuse(&p1, &ops::upsample_nearest(&m2, 2)?, fuse1)?;
            (m1, p3)
        }
        FusionVariant::B => {
            let m1 = fuse(&p1, &ops::upsample_nearest(&p3, 4)?, fuse1)?;
            (m1, p3)
        }
        FusionVariant::C => {
            let pre3 = ops::conv2d(&p3, params.get("bb.pre3.kernel")?, 1)?;
            let m2 = fuse(&p2, &ops::upsample_nearest(&pre3, 2)?, params.get("bb.fuse2.kernel")?)?;
            let pre2 = ops::conv2d(&m2, params.get("bb.pre2.kernel")?, 1)?;
            let m1 = fuse(&p1, &ops::upsample_nearest(&pre2, 2)?, fuse1)?;
            (m1, p3)
        }
        FusionVariant::D => {
            let pre3 = ops::conv2d(&p3, params.get("bb.pre3.kernel")?, 1)?;
            let m1 = fuse(&p1, &ops::upsample_nearest(&pre3, 4)?, fuse1)?;
            (m1, p3)
        }
        FusionVariant::E => {
            let l4 = trunk_level(&l3, params.get("bb.trunk4.kernel")?)?; // stride 16
            let p4 = lateral(&l4, params.get("bb.lateral4.kernel")?)?;
            let m3 = fuse(&p3, &ops::upsample_nearest(&p4, 2)?, params.get("bb.fuse3.kernel")?)?;
            let m2 = fuse(&p2, &ops::upsample_nearest(&m3, 2)?, params.get("bb.fuse2.kernel")?)?;
            let m1 = fuse(&p1, &ops::upsample_nearest(&m2, 2)?, fuse1)?;
            (m1, m3)
        }
    };

    DualFeatures::new(FeatureMap::new(fine, 2)?, FeatureMap::new(coarse, 8)?, 4)
}

/// Training-free descriptor: each feature vector is the vectorized,
/// mean-subtracted, L2-normalized patch x patch neighbourhood around the
/// cell's center pixel (image zero-padded at the border). `dilation`
/// spaces the taps, widening the receptive field without adding channels.
pub fn patch_descriptor_features(
    image: &Tensor,
    patch: usize,
    stride: usize,
    dilation: usize,
) -> Result<FeatureMap> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(Error::Shape(format!(
            "patch descriptors expect a [1,H,W] image, got {:?}",
            d
        )));
    }
    if patch % 2 == 0 {
        return Err(Error::Config("patch size must be odd".into()));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::Config("stride and dilation must be >= 1".into()));
    }
    let (h, w) = (d[1], d[2]);
    let (gh, gw) = (h / stride, w / stride);
    if gh == 0 || gw == 0 {
        return Err(Error::Config("image smaller than one stride cell".into()));
    }
    let half = (patch / 2) as isize;
    let c = patch * patch;
    let img = image.data();
    let mut data = vec![0.0; c * gh * gw];
    let s = stride as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let cx = ((gx as f64 + 0.5) * s - 0.5).round() as isize;
            let cy = ((gy as f64 + 0.5) * s - 0.5).round() as isize;
            let mut v = Vec::with_capacity(c);
            let d = dilation as isize;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (y, x) = (cy + dy * d, cx + dx * d);
                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                        v.push(0.0);
                    } else {
                        v.push(img[y as usize * w + x as usize]);
                    }
                }
            }
            let mean = v.iter().sum::<f64>() / c as f64;
            for x in v.iter_mut() {
                *x -= mean;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            for (ci, x) in v.iter().enumerate() {
                data[(ci * gh + gy) * gw + gx] = x / norm;
            }
        }
    }
    FeatureMap::new(Tensor::new(&[c, gh, gw], data)?, stride)
}

/// Dual features from the patch-descriptor backbone. The coarse level
/// uses ratio-dilated taps so its descriptors stay correlated under
/// sub-cell offsets.
pub fn patch_descriptor_dual(
    image: &Tensor,
    patch: usize,
    fine_stride: usize,
    ratio: usize,
) -> Result<DualFeatures> {
    let fine = patch_descriptor_features(image, patch, fine_stride, 1)?;
    let coarse = patch_descriptor_features(image, patch, fine_stride * ratio, ratio)?;
    DualFeatures::new(fine, coarse, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            trunk_widths: [4, 4, 8, 8],
            channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn extract_shapes_32() {
        let cfg = BackboneConfig::default();
        let ps = init_backbone_params(&cfg, FusionVariant::A, 7).unwrap();
        let img = Tensor::new(&[1, 32, 32], vec![0.5; 32 * 32]).unwrap();
        let dual = extract_dual(&img, &ps, FusionVariant::A, &cfg).unwrap();
        assert_eq!(dual.fine.data.dims(), vec![32, 16, 16]);
        assert_eq!(dual.fine.stride, 2);
        assert_eq!(dual.coarse.data.dims(), vec![32, 4, 4]);
        assert_eq!(dual.coarse.stride, 8);
        assert_eq!(dual.ratio, 4);
    }

    #[test]
    fn paper_scale_grid_arithmetic() {
        // 1600x1200 input at fine stride 4, r = 4 -> fine 400x300, coarse 100x75
        let ((fw, fh), (cw, ch)) = dual_grid_shape(1600, 1200, 4, 4);
        assert_eq!((fw, fh), (400, 300));
        assert_eq!((cw, ch), (100, 75));
    }

    #[test]
    fn all_variants_satisfy_dual_invariants() {
        let cfg = toy_cfg();
        let img_data: Vec<f64> = (0..32 * 32).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let img = Tensor::new(&[1, 32, 32], img_data).unwrap();
        for v in [
            FusionVariant::A,
            FusionVariant::B,
            FusionVariant::C,
            FusionVariant::D,
            FusionVariant::E,
        ] {
            let ps = init_backbone_params(&cfg, v, 11).unwrap();
            let dual = extract_dual(&img, &ps, v, &cfg).unwrap();
            assert_eq!(dual.fine.stride * dual.ratio, dual.coarse.stride);
            assert_eq!(dual.fine.height(), dual.ratio * dual.coarse.height());
            assert_eq!(dual.fine.channels(), dual.coarse.channels());
        }
    }

    #[test]
    fn variant_a_and_b_differ_elementwise() {
        let cfg = toy_cfg();
        let img_data: Vec<f64> = (0..32 * 32).map(|i| ((i * 53) % 97) as f64 / 97.0).collect();
        let img = Tensor::new(&[1, 32, 32], img_data).unwrap();
        let pa = init_backbone_params(&cfg, FusionVariant::A, 11).unwrap();
        let pb = init_backbone_params(&cfg, FusionVariant::B, 11).unwrap();
        let fa = extract_dual(&img, &pa, FusionVariant::A, &cfg).unwrap();
        let fb = extract_dual(&img, &pb, FusionVariant::B, &cfg).unwrap();
        let va = fa.fine.data.to_vec();
        let vb = fb.fine.data.to_vec();
        assert!(va.iter().zip(&vb).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn extract_is_deterministic() {
        let cfg = toy_cfg();
        let img_data: Vec<f64> = (0..32 * 32).map(|i| ((i * 13) % 89) as f64 / 89.0).collect();
        let img = Tensor::new(&[1, 32, 32], img_data).unwrap();
        let p1 = init_backbone_params(&cfg, FusionVariant::A, 3).unwrap();
        let p2 = init_backbone_params(&cfg, FusionVariant::A, 3).unwrap();
        let d1 = extract_dual(&img, &p1, FusionVariant::A, &cfg).unwrap();
        let d2 = extract_dual(&img, &p2, FusionVariant::A, &cfg).unwrap();
        assert_eq!(d1.fine.data.to_vec(), d2.fine.data.to_vec());
        assert_eq!(d1.coarse.data.to_vec(), d2.coarse.data.to_vec());
    }

    #[test]
    fn indivisible_image_rejected() {
        let cfg = toy_cfg();
        let ps = init_backbone_params(&cfg, FusionVariant::A, 1).unwrap();
        let img = Tensor::new(&[1, 30, 32], vec![0.1; 30 * 32]).unwrap();
        assert!(matches!(
            extract_dual(&img, &ps, FusionVariant::A, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_param_rejected() {
        let cfg = toy_cfg();
        let ps = ParamStore::new();
        let img = Tensor::new(&[1, 32, 32], vec![0.1; 32 * 32]).unwrap();
        assert!(matches!(
            extract_dual(&img, &ps, FusionVariant::A, &cfg),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.drct");
        let fm = FeatureMap::new(
            Tensor::new(&[2, 2, 2], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75, 0.125, 3.0]).unwrap(),
            4,
        )
        .unwrap();
        fm.save(&p).unwrap();
        let back = FeatureMap::load(&p).unwrap();
        assert_eq!(back.stride, 4);
        assert_eq!(back.data.dims(), vec![2, 2, 2]);
        assert_eq!(back.data.to_vec(), fm.data.to_vec());
    }

    #[test]
    fn constant_image_gives_zero_patch_descriptors() {
        let img = Tensor::new(&[1, 16, 16], vec![0.7; 256]).unwrap();
        let fm = patch_descriptor_features(&img, 3, 2, 1).unwrap();
        // interior cells see a constant patch -> zero after mean subtraction
        let d = fm.data.to_vec();
        let (gh, gw) = (fm.height(), fm.width());
        for gy in 1..gh - 1 {
            for gx in 1..gw - 1 {
                for c in 0..fm.channels() {
                    // mean subtraction leaves float residue below the norm guard
                    assert!(d[(c * gh + gy) * gw + gx].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn patch_one_is_normalized_intensity() {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let fm = patch_descriptor_features(&img, 1, 1, 1).unwrap();
        assert_eq!(fm.channels(), 1);
        // patch of one pixel: mean subtraction zeroes it out entirely
        assert!(fm.data.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn even_patch_rejected() {
        let img = Tensor::new(&[1, 8, 8], vec![0.0; 64]).unwrap();
        assert!(matches!(
            patch_descriptor_features(&img, 4, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn translated_image_peaks_at_shifted_cell() {
        // pure translation by one stride cell: interior query correlates
        // maximally at the shifted location
        let (h, w) = (24, 24);
        let mut a = vec![0.0; h * w];
        let mut rng_state = 12345u64;
        for v in a.iter_mut() {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (rng_state >> 33) as f64 / (1u64 << 31) as f64;
        }
        let shift = 2usize; // pixels, equal to the stride
        let mut b = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if x >= shift {
                    b[y * w + x] = a[y * w + x - shift];
                }
            }
        }
        let fa = patch_descriptor_features(&Tensor::new(&[1, h, w], a).unwrap(), 5, 2, 1).unwrap();
        let fb = patch_descriptor_features(&Tensor::new(&[1, h, w], b).unwrap(), 5, 2, 1).unwrap();
        let (gh, gw) = (fa.height(), fa.width());
        let c = fa.channels();
        let av = fa.data.to_vec();
        let bv = fb.data.to_vec();
        for gy in 2..gh - 2 {
            for gx in 2..gw - 3 {
                let mut best = (0usize, f64::NEG_INFINITY);
                for ty in 0..gh {
                    for tx in 0..gw {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += av[(ci * gh + gy) * gw + gx] * bv[(ci * gh + ty) * gw + tx];
                        }
                        if dot > best.1 {
                            best = (ty * gw + tx, dot);
                        }
                    }
                }
                assert_eq!(best.0, gy * gw + gx + 1, "query ({gx},{gy})");
            }
        }
    }
}

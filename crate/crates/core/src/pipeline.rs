//! End-to-end orchestration: configuration, feature extraction, refinement,
//! dense matching, and evaluation in one call.

use std::fs;
use std::path::Path;

use crate::backbone::{self, DualFeatures};
use crate::consensus::{self, ConsensusConfig};
use crate::correlation::{self};
use crate::error::{Error, Result};
use crate::evaluation::{self, MmaCurve};
use crate::matcher::{self, MatchSet};
use crate::synth::{SyntheticScene, WarpKind};
use crate::tensor::{container, ParamStore, Tensor};

/// Flat key=value configuration; unknown keys are rejected.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub warp: String,
    pub n_annotations: usize,
    pub patch: usize,
    pub fine_stride: usize,
    pub ratio: usize,
    pub keep_fraction: f64,
    pub top_k: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub lr: f64,
    pub steps: usize,
    pub halve_every: usize,
    pub weights: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            warp: "translation:8,4".into(),
            n_annotations: 128,
            patch: 5,
            fine_stride: 2,
            ratio: 4,
            keep_fraction: 0.5,
            top_k: 500,
            lambda: 0.05,
            sigma: 1.0,
            lr: 0.01,
            steps: 200,
            halve_every: 50,
            weights: None,
        }
    }
}

impl PipelineConfig {
    /// Apply one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "warp" => self.warp = value.to_string(),
            "n_annotations" => self.n_annotations = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "fine_stride" => self.fine_stride = num(key, value)?,
            "ratio" => self.ratio = num(key, value)?,
            "keep_fraction" => self.keep_fraction = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "halve_every" => self.halve_every = num(key, value)?,
            "weights" => self.weights = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat key=value file ('#' comments, blank lines allowed).
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in fs::read_to_string(path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Consensus weights: the configured file, or argmax-preserving identity
/// (delta) kernels when none is given.
pub fn load_nc_params(cfg: &PipelineConfig) -> Result<(ParamStore, ConsensusConfig)> {
    let nc_cfg = ConsensusConfig::default();
    let params = match &cfg.weights {
        Some(path) => container::load_params(path, &[])?,
        None => consensus::delta_nc_params(&nc_cfg)?,
    };
    Ok((params, nc_cfg))
}

pub fn extract(image: &Tensor, cfg: &PipelineConfig) -> Result<DualFeatures> {
    backbone::patch_descriptor_dual(image, cfg.patch, cfg.fine_stride, cfg.ratio)
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub matches: MatchSet,
    pub curve: MmaCurve,
}

/// Match a feature pair end to end: correlate, refine, densely match,
/// keep the top-K.
pub fn match_pair(
    dual_a: &DualFeatures,
    dual_b: &DualFeatures,
    cfg: &PipelineConfig,
) -> Result<MatchSet> {
    let (params, nc_cfg) = stage("weights", load_nc_params(cfg))?;
    let c = stage("correlation", correlation::corr4d(&dual_a.coarse, &dual_b.coarse))?;
    let cbar = stage("refine", consensus::refine(&c, &params, &nc_cfg))?;
    let dense = stage(
        "match",
        matcher::match_dense(dual_a, dual_b, &cbar, cfg.keep_fraction),
    )?;
    Ok(evaluation::top_k(&dense, cfg.top_k))
}

/// Full pipeline over a synthetic scene, evaluated against its homography.
pub fn run_pipeline(scene: &SyntheticScene, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let dual_a = stage("extract", extract(&scene.image_a, cfg))?;
    let dual_b = stage("extract", extract(&scene.image_b, cfg))?;
    let matches = match_pair(&dual_a, &dual_b, cfg)?;
    let curve = stage(
        "evaluate",
        evaluation::mma_curve(&matches, &scene.homography, &evaluation::default_thresholds()),
    )?;
    Ok(PipelineOutput { matches, curve })
}

pub fn scene_from_config(cfg: &PipelineConfig) -> Result<SyntheticScene> {
    let kind = WarpKind::parse(&cfg.warp)?;
    crate::synth::synth(cfg.seed, (cfg.width, cfg.height), kind, cfg.n_annotations)
}

/// One row of the memory/time report.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    pub stored_coarse_elements: usize,
    pub fine_equivalent_elements: usize,
    pub peak_bytes: usize,
    pub stage_ms: Vec<(&'static str, f64)>,
}

/// Memory and timing sweep over scene sizes. The stored 4D correlation is
/// coarse-sized only; the fine-equivalent element count is reported to
/// show the r^4 saving.
pub fn bench_sweep(sizes: &[(usize, usize)], cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &(w, h) in sizes {
        let mut c = cfg.clone();
        c.width = w;
        c.height = h;
        let scene = scene_from_config(&c)?;
        crate::tensor::alloc::reset_peak();
        let mut stage_ms = Vec::new();
        let t0 = std::time::Instant::now();
        let dual_a = extract(&scene.image_a, &c)?;
        let dual_b = extract(&scene.image_b, &c)?;
        stage_ms.push(("extract", t0.elapsed().as_secs_f64() * 1e3));

        let t1 = std::time::Instant::now();
        let corr = correlation::corr4d(&dual_a.coarse, &dual_b.coarse)?;
        stage_ms.push(("correlate", t1.elapsed().as_secs_f64() * 1e3));

        let (params, nc_cfg) = load_nc_params(&c)?;
        let t2 = std::time::Instant::now();
        let cbar = consensus::refine(&corr, &params, &nc_cfg)?;
        stage_ms.push(("refine", t2.elapsed().as_secs_f64() * 1e3));

        let t3 = std::time::Instant::now();
        let _m = matcher::match_dense(&dual_a, &dual_b, &cbar, c.keep_fraction)?;
        stage_ms.push(("match", t3.elapsed().as_secs_f64() * 1e3));

        let [ca, cb, cc, cd] = cbar.dims();
        let stored = ca * cb * cc * cd;
        let r4 = c.ratio.pow(4);
        rows.push(BenchRow {
            coarse: (ca, cb),
            fine: (ca * c.ratio, cb * c.ratio),
            stored_coarse_elements: stored,
            fine_equivalent_elements: stored * r4,
            peak_bytes: crate::tensor::alloc::peak_bytes(),
            stage_ms,
        });
    }
    Ok(rows)
}

//! `dualres`: coarse-to-fine dense correspondence matching from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data or format
//! error, 3 failed check (grad-check / bench assertions).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualres_core::pipeline::{self, PipelineConfig};
use dualres_core::{consensus, correlation, evaluation, image, matcher, reference, training};
use dualres_core::{Error, Homography, MatchSet, Tensor};

#[derive(Parser)]
#[command(name = "dualres", version, about = "dual-resolution dense image matching")]
struct Cli {
    /// Worker threads for tensor ops (default: all cores). Results are
    /// identical for any value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Inline overrides, e.g. --set keep_fraction=1.0 (applied after the
    /// file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-view scene (images, homography,
    /// annotations).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extract dual-resolution features from a grayscale image.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Densely match two images and write "x_a y_a x_b y_b score" lines.
    Match {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a match file against a homography (CSV curve).
    EvalMma {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        homography: PathBuf,
        /// Keep only the K best-scoring matches first.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory/time sweep over scene sizes; asserts the coarse-storage
    /// saving ratio.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated square sizes, e.g. 32,48,64.
        #[arg(long, default_value = "32,48,64")]
        sizes: String,
    },
    /// Finite-difference check of every trainable parameter.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Gradient-descent demo on one synthetic pair; writes learned
    /// consensus kernels.
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side PPM with match endpoints drawn (green/red when a
    /// homography is given).
    Visualize {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        homography: Option<PathBuf>,
        /// Correctness threshold in pixels.
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are successes; anything else is a usage error
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) => 1,
        Error::Stage { source, .. } => exit_code_for(source),
        _ => 2,
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Synth { cfg, out_dir } => {
            let cfg = cfg.build()?;
            let scene = pipeline::scene_from_config(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            image::save_pgm(out_dir.join("image_a.pgm"), &scene.image_a)?;
            image::save_pgm(out_dir.join("image_b.pgm"), &scene.image_b)?;
            scene.homography.save(out_dir.join("homography.txt"))?;
            scene.annotations.save(out_dir.join("annotations.txt"))?;
            println!(
                "scene: {}x{} {} annotations -> {}",
                cfg.width,
                cfg.height,
                scene.annotations.len(),
                out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Extract { cfg, image: img, out } => {
            let cfg = cfg.build()?;
            let gray = image::load_gray(&img)?;
            let dual = pipeline::extract(&gray, &cfg)?;
            dual.save(&out)?;
            println!(
                "features: fine {}x{}x{} stride {}, coarse {}x{}x{} stride {} -> {}",
                dual.fine.channels(),
                dual.fine.height(),
                dual.fine.width(),
                dual.fine.stride,
                dual.coarse.channels(),
                dual.coarse.height(),
                dual.coarse.width(),
                dual.coarse.stride,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Match { cfg, image_a, image_b, out } => {
            let cfg = cfg.build()?;
            let a = image::load_gray(&image_a)?;
            let b = image::load_gray(&image_b)?;
            let dual_a = pipeline::extract(&a, &cfg)?;
            let dual_b = pipeline::extract(&b, &cfg)?;
            let matches = pipeline::match_pair(&dual_a, &dual_b, &cfg)?;
            matcher::write_matches(&out, &matches)?;
            println!("{} mutual matches -> {}", matches.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EvalMma { matches, homography, top_k, out } => {
            let mut set = matcher::read_matches(&matches)?;
            if let Some(k) = top_k {
                set = evaluation::top_k(&set, k);
            }
            let h = Homography::load(&homography)?;
            let curve = evaluation::mma_curve(&set, &h, &evaluation::default_thresholds())?;
            for (t, v) in &curve.points {
                println!("mma@{t}px = {v:.4}");
            }
            if let Some(p) = out {
                curve.save_csv(&p)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench { cfg, sizes } => {
            let cfg = cfg.build()?;
            let sizes: Vec<(usize, usize)> = sizes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map(|n| (n, n))
                        .map_err(|_| Error::Config(format!("bad size {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            let rows = pipeline::bench_sweep(&sizes, &cfg)?;
            let r4 = cfg.ratio.pow(4);
            println!(
                "{:>10} {:>10} {:>14} {:>16} {:>12}  stages",
                "coarse", "fine", "stored elems", "fine-equivalent", "peak bytes"
            );
            let mut ok = true;
            for row in &rows {
                let stages: Vec<String> = row
                    .stage_ms
                    .iter()
                    .map(|(n, ms)| format!("{n} {ms:.1}ms"))
                    .collect();
                println!(
                    "{:>10} {:>10} {:>14} {:>16} {:>12}  {}",
                    format!("{}x{}", row.coarse.0, row.coarse.1),
                    format!("{}x{}", row.fine.0, row.fine.1),
                    row.stored_coarse_elements,
                    row.fine_equivalent_elements,
                    row.peak_bytes,
                    stages.join(", ")
                );
                ok &= row.fine_equivalent_elements == row.stored_coarse_elements * r4;
            }
            if !ok {
                eprintln!("error: stored-correlation ratio is not ratio^4");
                return Ok(ExitCode::from(3));
            }
            println!("stored-correlation saving ratio: {r4}x");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GradCheck { cfg } => {
            let cfg = cfg.build()?;
            let (max_err, report) = grad_check(&cfg)?;
            print!("{report}");
            if max_err < 1e-4 {
                println!("grad-check passed: max rel err {max_err:.3e}");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("grad-check FAILED: max rel err {max_err:.3e} >= 1e-4");
                Ok(ExitCode::from(3))
            }
        }
        Cmd::TrainToy { cfg, out } => {
            let cfg = cfg.build()?;
            let scene = pipeline::scene_from_config(&cfg)?;
            let dual_a = pipeline::extract(&scene.image_a, &cfg)?;
            let dual_b = pipeline::extract(&scene.image_b, &cfg)?;
            let nc_cfg = consensus::ConsensusConfig::default();
            let params = consensus::init_nc_params(&nc_cfg, cfg.seed)?;
            let tcfg = training::TrainConfig {
                steps: cfg.steps,
                lr: cfg.lr,
                lambda: cfg.lambda,
                sigma: cfg.sigma,
                halve_every: cfg.halve_every,
            };
            let trace =
                training::train_toy(&params, &nc_cfg, &dual_a, &dual_b, &scene.annotations, &tcfg)?;
            dualres_core::tensor::container::save_params(&out, &params)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6} ({}% of initial) -> {}",
                trace.len(),
                trace.first().unwrap_or(&f64::NAN),
                trace.last().unwrap_or(&f64::NAN),
                trace
                    .last()
                    .zip(trace.first())
                    .map(|(l, f)| format!("{:.1}", 100.0 * l / f))
                    .unwrap_or_default(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Visualize { matches, image_a, image_b, homography, threshold, out } => {
            let set = matcher::read_matches(&matches)?;
            let a = image::load_gray(&image_a)?;
            let b = image::load_gray(&image_b)?;
            let h = homography.map(Homography::load).transpose()?;
            visualize(&set, &a, &b, h.as_ref(), threshold, &out)?;
            println!("{} matches drawn -> {}", set.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Finite-difference verification of the full loss path on a tiny scene.
fn grad_check(cfg: &PipelineConfig) -> Result<(f64, String), Error> {
    let mut small = cfg.clone();
    small.width = 16;
    small.height = 16;
    small.n_annotations = 4;
    small.warp = "translation:4,2".into();
    let scene = pipeline::scene_from_config(&small)?;
    let dual_a = pipeline::extract(&scene.image_a, &small)?;
    let dual_b = pipeline::extract(&scene.image_b, &small)?;
    let nc_cfg = consensus::ConsensusConfig::tiny();
    let params = consensus::init_nc_params(&nc_cfg, small.seed.wrapping_add(1))?;
    let gt = training::build_gt(&scene.annotations, &dual_a.fine, &dual_b.fine, small.sigma)?;
    let c = correlation::corr4d(&dual_a.coarse, &dual_b.coarse)?;

    let loss = || -> Tensor {
        let cbar = consensus::refine(&c, &params, &nc_cfg).expect("refine");
        let (s_ab, s_ba) =
            training::predicted_maps(&dual_a, &dual_b, &cbar, &scene.annotations).expect("maps");
        training::loss_total(&s_ab, &s_ba, &gt, small.lambda).expect("loss")
    };
    params.zero_grads();
    loss().backward()?;
    let mut max_err: f64 = 0.0;
    let mut report = String::new();
    for (name, p) in params.trainable() {
        let analytic = p.grad().ok_or_else(|| Error::Param(format!("{name}: no grad")))?;
        let numeric = reference::central_diff_grad(&p, 1e-5, || loss().value());
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = reference::max_rel_err(&analytic, &numeric, (1e-2 * scale).max(1e-10));
        report.push_str(&format!("{name}: max rel err {err:.3e}\n"));
        max_err = max_err.max(err);
    }
    Ok((max_err, report))
}

/// Side-by-side composite with match endpoints drawn as 3x3 squares.
fn visualize(
    set: &MatchSet,
    a: &Tensor,
    b: &Tensor,
    h: Option<&Homography>,
    threshold: f64,
    out: &PathBuf,
) -> Result<(), Error> {
    let (da, db) = (a.dims(), b.dims());
    let (ha, wa) = (da[1], da[2]);
    let (hb, wb) = (db[1], db[2]);
    let (wc, hc) = (wa + wb, ha.max(hb));
    let mut rgb = vec![0u8; wc * hc * 3];
    let paint_gray = |rgb: &mut [u8], img: &[f64], w: usize, h: usize, x0: usize| {
        for y in 0..h {
            for x in 0..w {
                let g = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                let o = (y * wc + x0 + x) * 3;
                rgb[o] = g;
                rgb[o + 1] = g;
                rgb[o + 2] = g;
            }
        }
    };
    paint_gray(&mut rgb, &a.data(), wa, ha, 0);
    paint_gray(&mut rgb, &b.data(), wb, hb, wa);

    let dot = |x: f64, y: f64, color: [u8; 3], rgb: &mut Vec<u8>| {
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && (px as usize) < wc && (py as usize) < hc {
                    let o = (py as usize * wc + px as usize) * 3;
                    rgb[o] = color[0];
                    rgb[o + 1] = color[1];
                    rgb[o + 2] = color[2];
                }
            }
        }
    };
    const GREEN: [u8; 3] = [0, 200, 0];
    const RED: [u8; 3] = [220, 0, 0];
    const YELLOW: [u8; 3] = [230, 200, 0];
    for m in &set.matches {
        let color = match h {
            None => YELLOW,
            Some(h) => match h.warp(m.src) {
                Ok((u, v)) => {
                    let d = ((u - m.dst.0).powi(2) + (v - m.dst.1).powi(2)).sqrt();
                    if d <= threshold {
                        GREEN
                    } else {
                        RED
                    }
                }
                Err(_) => RED,
            },
        };
        dot(m.src.0, m.src.1, color, &mut rgb);
        dot(m.dst.0 + wa as f64, m.dst.1, color, &mut rgb);
    }
    image::save_ppm(out, &rgb, wc, hc)
}

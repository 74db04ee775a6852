use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clip_prior::config::{BoxMode, MaskSampling, PriorConfig, RefinementMode};
use clip_prior::oracles::{synth_bundle, Rect, SynthSpec};
use clip_prior::pipeline::{self, stack_maps};
use clip_prior::{bundle_io, vtp, vvp, Error, Map2D};

#[derive(Parser)]
#[command(
    name = "clip-prior",
    version,
    about = "Few-shot segmentation priors from CLIP feature bundles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that bundle directories load and pass validation.
    Validate { bundles: Vec<PathBuf> },
    /// Generate prior stacks for a batch of bundles.
    Prior {
        bundles: Vec<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render the visual-text prior of one bundle as a PGM heatmap.
    Vtp {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render each shot's visual-visual prior as PGM heatmaps.
    Vvp {
        bundle: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a deterministic synthetic bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        h: usize,
        #[arg(long, default_value_t = 6)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        /// Planted region as `row0,col0,row1,col1` (end-exclusive).
        #[arg(long, value_parser = parse_rect)]
        planted: Option<Rect>,
    },
    /// Render every channel of a prior stack directory as PGM heatmaps.
    Render {
        stack: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON file with PriorConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    l_blocks: Option<usize>,
    #[arg(long)]
    sinkhorn_max_iters: Option<usize>,
    #[arg(long)]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    box_theta: Option<f64>,
    #[arg(long)]
    box_mode: Option<BoxMode>,
    /// `initial_D` or `high_order_R`.
    #[arg(long)]
    refinement_mode: Option<RefinementMode>,
    #[arg(long)]
    refine_vvp: bool,
    #[arg(long)]
    no_refine_vtp: bool,
    #[arg(long)]
    no_vtp: bool,
    #[arg(long)]
    no_vvp: bool,
    #[arg(long)]
    mask_sampling: Option<MaskSampling>,
    #[arg(long)]
    vvp_foreground_only: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PriorConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::IoFailure {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|source| Error::Manifest {
                    path: path.clone(),
                    source,
                })?
            }
            None => PriorConfig::default(),
        };
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.eps {
            c.eps = v;
        }
        if let Some(v) = self.l_blocks {
            c.l_blocks = v;
        }
        if let Some(v) = self.sinkhorn_max_iters {
            c.sinkhorn_max_iters = v;
        }
        if let Some(v) = self.sinkhorn_tol {
            c.sinkhorn_tol = v;
        }
        if let Some(v) = self.box_theta {
            c.box_theta = v;
        }
        if let Some(v) = self.box_mode {
            c.box_mode = v;
        }
        if let Some(v) = self.refinement_mode {
            c.refinement_mode = v;
        }
        if let Some(v) = self.mask_sampling {
            c.mask_sampling = v;
        }
        c.refine_vvp |= self.refine_vvp;
        c.refine_vtp &= !self.no_refine_vtp;
        c.enable_vtp &= !self.no_vtp;
        c.enable_vvp &= !self.no_vvp;
        c.vvp_foreground_only |= self.vvp_foreground_only;
        c.validate()?;
        Ok(c)
    }
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r0, c0, r1, c1] if r0 < r1 && c0 < c1 => Ok(Rect::new(r0, c0, r1, c1)),
        _ => Err("expected row0,col0,row1,col1 with row0<row1 and col0<col1".into()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { bundles } => {
            let mut failures = 0;
            for path in &bundles {
                match bundle_io::load_bundle(path) {
                    Ok(b) => println!(
                        "ok      {} (h={} w={} d={} n={} K={})",
                        path.display(),
                        b.grid.h,
                        b.grid.w,
                        b.d(),
                        b.n_blocks(),
                        b.shots()
                    ),
                    Err(e) => {
                        failures += 1;
                        println!("failed  {} [{}] {e}", path.display(), e.code());
                    }
                }
            }
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Prior {
            bundles,
            output_dir,
            parallelism,
            config,
        } => {
            let config = config.resolve()?;
            let summary = pipeline::run_batch(&bundles, &config, &output_dir, parallelism)?;
            for ep in &summary.episodes {
                match &ep.error {
                    None => println!("ok      {} ({:.1} ms)", ep.path.display(), ep.timing_ms),
                    Some(e) => println!("failed  {} {e}", ep.path.display()),
                }
            }
            println!(
                "{} episodes, {} failed; summary at {}",
                summary.episodes.len(),
                summary.failures(),
                output_dir.join("summary.json").display()
            );
            Ok(if summary.failures() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Vtp {
            bundle,
            out,
            config,
        } => {
            let config = config.resolve()?;
            let b = bundle_io::load_bundle(&bundle)?;
            let mut map = vtp::visual_text_prior(
                b.query_features.view(),
                b.text_embed_target.view(),
                b.text_embed_background.view(),
                b.grid,
                config.tau,
                config.eps,
            )?;
            if config.refine_vtp {
                let r = clip_prior::pir::make_refinement(&b, &config)?;
                map = clip_prior::pir::refine_with_own_box(&map, &r, &config)?;
            }
            pipeline::render_heatmap(&map, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Vvp {
            bundle,
            output_dir,
            config,
        } => {
            let config = config.resolve()?;
            let b = bundle_io::load_bundle(&bundle)?;
            let mut maps: Vec<Map2D> = vvp::vvp_multishot(&b, &config)?;
            if config.refine_vvp {
                let r = clip_prior::pir::make_refinement(&b, &config)?;
                maps = maps
                    .iter()
                    .map(|m| clip_prior::pir::refine_with_own_box(m, &r, &config))
                    .collect::<Result<_, _>>()?;
            }
            ensure_dir(&output_dir)?;
            for (k, m) in maps.iter().enumerate() {
                let path = output_dir.join(format!("vvp_{k}.pgm"));
                pipeline::render_heatmap(m, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            seed,
            h,
            w,
            d,
            n,
            k,
            patch,
            planted,
        } => {
            let mut spec = SynthSpec::new(h, w, d, n, k, seed).with_patch(patch.max(1));
            if let Some(rect) = planted {
                if rect.row1 > h || rect.col1 > w {
                    return Err(Error::BadRange(format!(
                        "planted region {rect:?} exceeds {h}x{w} grid"
                    )));
                }
                spec = spec.planted(rect);
            }
            if h == 0 || w == 0 || d < 2 || n == 0 || k == 0 {
                return Err(Error::BadRange(
                    "synth needs h, w, n, k >= 1 and d >= 2".into(),
                ));
            }
            bundle_io::write_bundle(&synth_bundle(&spec), &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { stack, output_dir } => {
            let s = bundle_io::load_prior_stack(&stack)?;
            ensure_dir(&output_dir)?;
            for (name, map) in stack_maps(&s) {
                let path = output_dir.join(format!("{name}.pgm"));
                pipeline::render_heatmap(&map, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}

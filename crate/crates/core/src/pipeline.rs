//! End-to-end prior generation, batch execution and heatmap export.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle_io::{self, FeatureBundle, PriorStack, StackMetadata};
use crate::config::PriorConfig;
use crate::error::{Error, Result};
use crate::numerics::Map2D;
use crate::{pir, vtp, vvp};

/// Builds the prior stack for one episode: the K VVP channels (refined iff
/// `refine_vvp`), then the VTP channel (refined iff `refine_vtp`).
pub fn generate_prior_stack(bundle: &FeatureBundle, config: &PriorConfig) -> Result<PriorStack> {
    config.validate()?;
    bundle.validate()?;

    let refinement = if config.needs_refinement() {
        Some(pir::make_refinement(bundle, config)?)
    } else {
        None
    };
    let refine = |m: Map2D| -> Result<Map2D> {
        let r = refinement.as_ref().expect("refinement built when needed");
        pir::refine_with_own_box(&m, r, config)
    };

    let mut maps = Vec::with_capacity(bundle.shots() + 1);
    let mut names = Vec::with_capacity(bundle.shots() + 1);
    let mut omitted = Vec::new();

    if config.enable_vvp {
        for (k, m) in vvp::vvp_multishot(bundle, config)?.into_iter().enumerate() {
            if config.refine_vvp {
                maps.push(refine(m)?);
                names.push(format!("vvp_{k}_refined"));
            } else {
                maps.push(m);
                names.push(format!("vvp_{k}"));
            }
        }
    } else {
        omitted.push("vvp".to_string());
    }

    if config.enable_vtp {
        let m = vtp::visual_text_prior(
            bundle.query_features.view(),
            bundle.text_embed_target.view(),
            bundle.text_embed_background.view(),
            bundle.grid,
            config.tau,
            config.eps,
        )?;
        if config.refine_vtp {
            maps.push(refine(m)?);
            names.push("vtp_refined".to_string());
        } else {
            maps.push(m);
            names.push("vtp".to_string());
        }
    } else {
        omitted.push("vtp".to_string());
    }

    let grid = bundle.grid;
    let mut channels = Array3::<f32>::zeros((maps.len(), grid.h, grid.w));
    for (mut dst, m) in channels.axis_iter_mut(Axis(0)).zip(&maps) {
        dst.zip_mut_with(m.values(), |d, &v| *d = (v as f32).clamp(0.0, 1.0));
    }
    Ok(PriorStack {
        channels,
        metadata: StackMetadata {
            class_name: bundle.class_name.clone(),
            shots: bundle.shots(),
            channel_names: names,
            omitted,
            config: config.clone(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub path: PathBuf,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub timing_ms: f64,
    pub channels: Vec<ChannelStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub episodes: Vec<EpisodeReport>,
}

impl BatchSummary {
    pub fn failures(&self) -> usize {
        self.episodes
            .iter()
            .filter(|e| e.status == EpisodeStatus::Failed)
            .count()
    }
}

pub fn channel_stats(stack: &PriorStack) -> Vec<ChannelStats> {
    stack
        .channels
        .axis_iter(Axis(0))
        .zip(&stack.metadata.channel_names)
        .map(|(ch, name)| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for &v in ch.iter() {
                let v = v as f64;
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            ChannelStats {
                name: name.clone(),
                min,
                max,
                mean: sum / ch.len().max(1) as f64,
            }
        })
        .collect()
}

/// Output directory names, one per input, disambiguated on collision.
fn episode_dirs(inputs: &[PathBuf]) -> Vec<String> {
    let mut used = HashSet::new();
    inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .filter(|s| !s.is_empty() && s != "summary.json")
                .unwrap_or_else(|| format!("episode_{i}"));
            let mut name = base.clone();
            let mut n = 1;
            while !used.insert(name.clone()) {
                name = format!("{base}-{n}");
                n += 1;
            }
            name
        })
        .collect()
}

fn run_episode(input: &Path, out: &Path, config: &PriorConfig) -> EpisodeReport {
    let started = Instant::now();
    let result = bundle_io::load_bundle(input)
        .and_then(|b| generate_prior_stack(&b, config))
        .and_then(|s| bundle_io::write_prior_stack(&s, out).map(|_| s));
    let timing_ms = started.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(stack) => EpisodeReport {
            path: input.to_path_buf(),
            status: EpisodeStatus::Ok,
            error: None,
            error_code: None,
            output: Some(out.to_path_buf()),
            timing_ms,
            channels: channel_stats(&stack),
        },
        Err(e) => EpisodeReport {
            path: input.to_path_buf(),
            status: EpisodeStatus::Failed,
            error: Some(format!("{}: {e}", e.code())),
            error_code: Some(e.code().to_string()),
            output: None,
            timing_ms,
            channels: Vec::new(),
        },
    }
}

/// Processes every bundle into `output_dir/<name>/` and writes
/// `output_dir/summary.json`. Episode failures are reported, not raised;
/// the summary is ordered by input, whatever the parallelism.
pub fn run_batch(
    inputs: &[PathBuf],
    config: &PriorConfig,
    output_dir: &Path,
    parallelism: usize,
) -> Result<BatchSummary> {
    config.validate()?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let names = episode_dirs(inputs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let episodes = pool.install(|| {
        inputs
            .par_iter()
            .zip(names.par_iter())
            .map(|(input, name)| run_episode(input, &output_dir.join(name), config))
            .collect::<Vec<_>>()
    });
    let summary = BatchSummary { episodes };
    let path = output_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|source| Error::Manifest {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// 8-bit level of a `[0, 1]` value, rounding halves up.
pub fn gray_level(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// Binary PGM (`P5`, maxval 255), one pixel per grid cell.
pub fn heatmap_bytes(map: &Map2D) -> Vec<u8> {
    let grid = map.grid();
    let mut out = format!("P5\n{} {}\n255\n", grid.w, grid.h).into_bytes();
    out.extend(map.values().iter().map(|&v| gray_level(v)));
    out
}

pub fn render_heatmap(map: &Map2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&heatmap_bytes(map))
        .map_err(|e| Error::io(path, e))
}

/// Every channel of a stack as a map, with its name.
pub fn stack_maps(stack: &PriorStack) -> Vec<(String, Map2D)> {
    stack
        .channels
        .axis_iter(Axis(0))
        .zip(&stack.metadata.channel_names)
        .map(|(ch, name)| (name.clone(), Map2D::new(ch.mapv(f64::from))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RefinementMode;
    use crate::oracles::{synth_bundle, SynthSpec};
    use ndarray::Array2;

    fn bundle(k: usize) -> FeatureBundle {
        synth_bundle(&SynthSpec::new(5, 5, 8, 10, k, 21))
    }

    #[test]
    fn default_stack_layout() {
        let s = generate_prior_stack(&bundle(1), &PriorConfig::default()).unwrap();
        assert_eq!(s.channel_count(), 2);
        assert_eq!(s.metadata.channel_names, vec!["vvp_0", "vtp_refined"]);
        let s = generate_prior_stack(&bundle(5), &PriorConfig::default()).unwrap();
        assert_eq!(s.channels.dim(), (6, 5, 5));
        assert!(s.channels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn toggles() {
        let b = bundle(1);
        let both = PriorConfig {
            refine_vvp: true,
            ..Default::default()
        };
        let s = generate_prior_stack(&b, &both).unwrap();
        assert_eq!(
            s.metadata.channel_names,
            vec!["vvp_0_refined", "vtp_refined"]
        );

        let no_vtp = PriorConfig {
            enable_vtp: false,
            ..Default::default()
        };
        let s = generate_prior_stack(&b, &no_vtp).unwrap();
        assert_eq!(s.channel_count(), 1);
        assert_eq!(s.metadata.omitted, vec!["vtp"]);

        let raw = PriorConfig {
            refine_vtp: false,
            enable_vvp: false,
            ..Default::default()
        };
        let s = generate_prior_stack(&b, &raw).unwrap();
        assert_eq!(s.metadata.channel_names, vec!["vtp"]);
    }

    #[test]
    fn l_blocks_beyond_stack_is_bad_range() {
        let b = synth_bundle(&SynthSpec::new(3, 3, 4, 4, 1, 1));
        let err = generate_prior_stack(&b, &PriorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::BadRange(_)));
        // without refinement the attention stack is never touched
        let cfg = PriorConfig {
            refine_vtp: false,
            refinement_mode: RefinementMode::InitialD,
            ..Default::default()
        };
        assert!(generate_prior_stack(&b, &cfg).is_ok());
    }

    #[test]
    fn heatmap_levels() {
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(0.5), 128);
        let m = Map2D::new(Array2::from_elem((2, 3), 1.0));
        let bytes = heatmap_bytes(&m);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 255));
        let z = heatmap_bytes(&Map2D::new(Array2::zeros((2, 2))));
        assert!(z[11..].iter().all(|&b| b == 0) && z.len() == 11 + 4);
    }

    #[test]
    fn collision_safe_names() {
        let names = episode_dirs(&[
            PathBuf::from("a/ep"),
            PathBuf::from("b/ep"),
            PathBuf::from("c/other"),
        ]);
        assert_eq!(names, vec!["ep", "ep-1", "other"]);
    }
}

//! Episode bundles and prior stacks on disk.
//!
//! A bundle is a directory holding `manifest.json` plus one raw payload per
//! array: little-endian, row-major, no header. The manifest lists each array
//! as `{name, dtype, shape, file}` with `dtype` one of `f32` / `u8`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::PriorConfig;
use crate::error::{Error, Result};
use crate::numerics::Grid;

pub const MANIFEST: &str = "manifest.json";
const BUNDLE_FORMAT: &str = "clip-prior-bundle";
const STACK_FORMAT: &str = "clip-prior-stack";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    #[serde(default = "bundle_format")]
    pub format: String,
    #[serde(default = "format_version")]
    pub version: u32,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub class_name: String,
    pub image_height: usize,
    pub image_width: usize,
    /// Tensor layout note; features are tokens-major `[hw, d]`.
    #[serde(default = "tokens_major")]
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub arrays: Vec<ArrayEntry>,
}

fn bundle_format() -> String {
    BUNDLE_FORMAT.into()
}

fn stack_format() -> String {
    STACK_FORMAT.into()
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

fn tokens_major() -> String {
    "tokens_major".into()
}

/// One episode's pre-extracted CLIP tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub grid: Grid,
    pub image_height: usize,
    pub image_width: usize,
    /// `[hw, d]`, class token removed.
    pub query_features: Array2<f32>,
    /// K tensors of `[hw, d]`.
    pub support_features: Vec<Array2<f32>>,
    /// K binary masks at image resolution.
    pub support_masks: Vec<Array2<u8>>,
    pub text_embed_target: Array1<f32>,
    pub text_embed_background: Array1<f32>,
    /// `[n, hw, hw]`, head-averaged, class token removed.
    pub attentions: Array3<f32>,
    pub class_name: String,
    pub seed: Option<u64>,
}

impl FeatureBundle {
    pub fn hw(&self) -> usize {
        self.grid.hw()
    }

    pub fn d(&self) -> usize {
        self.query_features.ncols()
    }

    pub fn n_blocks(&self) -> usize {
        self.attentions.len_of(ndarray::Axis(0))
    }

    pub fn shots(&self) -> usize {
        self.support_features.len()
    }

    /// Checks every structural and numeric invariant of a bundle.
    pub fn validate(&self) -> Result<()> {
        let hw = self.hw();
        let d = self.d();
        if hw == 0 || d == 0 {
            return Err(Error::shape(
                "grid",
                "non-empty",
                (self.grid.h, self.grid.w, d),
            ));
        }
        if self.query_features.nrows() != hw {
            return Err(Error::shape(
                "query_features",
                [hw, d],
                self.query_features.dim(),
            ));
        }
        if self.support_features.is_empty() {
            return Err(Error::shape("support_features", "K >= 1", 0));
        }
        if self.support_masks.len() != self.support_features.len() {
            return Err(Error::shape(
                "support_mask count",
                self.support_features.len(),
                self.support_masks.len(),
            ));
        }
        for (i, f) in self.support_features.iter().enumerate() {
            if f.dim() != (hw, d) {
                if f.nrows() == hw {
                    return Err(Error::DimMismatch(format!(
                        "support_features_{i} has d={} but query has d={d}",
                        f.ncols()
                    )));
                }
                return Err(Error::shape(
                    format!("support_features_{i}"),
                    [hw, d],
                    f.dim(),
                ));
            }
        }
        for (name, t) in [
            ("text_embed_target", &self.text_embed_target),
            ("text_embed_background", &self.text_embed_background),
        ] {
            if t.len() != d {
                return Err(Error::DimMismatch(format!(
                    "{name} has dimension {} but visual features have {d}",
                    t.len()
                )));
            }
        }
        let (n, ra, ca) = self.attentions.dim();
        if n == 0 || ra != hw || ca != hw {
            return Err(Error::shape(
                "attentions",
                ["n>=1", "hw", "hw"],
                (n, ra, ca),
            ));
        }
        let image = (self.image_height, self.image_width);
        if image.0 < self.grid.h || image.1 < self.grid.w {
            return Err(Error::shape("image size", "at least the patch grid", image));
        }
        for (i, m) in self.support_masks.iter().enumerate() {
            if m.dim() != image {
                return Err(Error::shape(format!("support_mask_{i}"), image, m.dim()));
            }
        }

        check_finite("query_features", self.query_features.iter())?;
        for (i, f) in self.support_features.iter().enumerate() {
            check_finite(&format!("support_features_{i}"), f.iter())?;
        }
        check_finite("text_embed_target", self.text_embed_target.iter())?;
        check_finite("text_embed_background", self.text_embed_background.iter())?;
        check_finite("attentions", self.attentions.iter())?;
        if let Some(v) = self.attentions.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidValue {
                name: "attentions".into(),
                reason: format!("negative entry {v}"),
            });
        }
        for (i, m) in self.support_masks.iter().enumerate() {
            if m.iter().any(|&v| v > 1) {
                return Err(Error::InvalidValue {
                    name: format!("support_mask_{i}"),
                    reason: "mask values must be 0 or 1".into(),
                });
            }
            if !m.iter().any(|&v| v == 1) {
                return Err(Error::EmptyMask(i));
            }
        }
        Ok(())
    }

    fn manifest(&self) -> BundleManifest {
        let image = vec![self.image_height, self.image_width];
        let dims2 = |a: &Array2<f32>| vec![a.nrows(), a.ncols()];
        let f32_entry = |name: String, shape: Vec<usize>| ArrayEntry {
            file: format!("{name}.bin"),
            name,
            dtype: Dtype::F32,
            shape,
        };
        let mut arrays = vec![f32_entry(
            "query_features".into(),
            dims2(&self.query_features),
        )];
        for i in 0..self.shots() {
            arrays.push(f32_entry(
                format!("support_features_{i}"),
                dims2(&self.support_features[i]),
            ));
            arrays.push(ArrayEntry {
                name: format!("support_mask_{i}"),
                dtype: Dtype::U8,
                shape: image.clone(),
                file: format!("support_mask_{i}.bin"),
            });
        }
        arrays.push(f32_entry(
            "text_embed_target".into(),
            vec![self.text_embed_target.len()],
        ));
        arrays.push(f32_entry(
            "text_embed_background".into(),
            vec![self.text_embed_background.len()],
        ));
        arrays.push(f32_entry(
            "attentions".into(),
            self.attentions.shape().to_vec(),
        ));
        BundleManifest {
            format: bundle_format(),
            version: FORMAT_VERSION,
            h: self.grid.h,
            w: self.grid.w,
            d: self.d(),
            n: self.n_blocks(),
            k: self.shots(),
            class_name: self.class_name.clone(),
            image_height: self.image_height,
            image_width: self.image_width,
            layout: tokens_major(),
            seed: self.seed,
            arrays,
        }
    }
}

fn check_finite<'a>(name: &str, mut values: impl Iterator<Item = &'a f32>) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Manifest {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    write_file(&path, text.as_bytes())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Manifest { path, source })
}

/// Reads raw payloads named by a manifest and checks their byte counts.
struct PayloadReader<'a> {
    dir: &'a Path,
    entries: HashMap<&'a str, &'a ArrayEntry>,
}

impl<'a> PayloadReader<'a> {
    fn new(dir: &'a Path, arrays: &'a [ArrayEntry]) -> Self {
        let entries = arrays.iter().map(|e| (e.name.as_str(), e)).collect();
        PayloadReader { dir, entries }
    }

    fn raw(&self, name: &str, dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
        let entry = self.entries.get(name).ok_or_else(|| Error::MissingArray {
            name: name.to_string(),
            path: self.dir.join(MANIFEST),
        })?;
        if entry.dtype != dtype {
            return Err(Error::shape(format!("{name} dtype"), dtype, entry.dtype));
        }
        if entry.shape != shape {
            return Err(Error::shape(name, shape, &entry.shape));
        }
        let path = self.dir.join(&entry.file);
        if !path.is_file() {
            return Err(Error::MissingArray {
                name: name.to_string(),
                path,
            });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = shape.iter().product::<usize>() * dtype.width();
        if bytes.len() != expected {
            return Err(Error::shape(
                format!("{name} payload bytes"),
                expected,
                bytes.len(),
            ));
        }
        Ok(bytes)
    }

    fn f32s(&self, name: &str, shape: &[usize]) -> Result<ArrayD<f32>> {
        let bytes = self.raw(name, Dtype::F32, shape)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ArrayD::from_shape_vec(IxDyn(shape), values).expect("byte count checked"))
    }

    fn u8s(&self, name: &str, shape: &[usize]) -> Result<ArrayD<u8>> {
        let bytes = self.raw(name, Dtype::U8, shape)?;
        Ok(ArrayD::from_shape_vec(IxDyn(shape), bytes).expect("byte count checked"))
    }
}

fn fixed<T, D: ndarray::Dimension>(a: ArrayD<T>) -> ndarray::Array<T, D> {
    a.into_dimensionality()
        .expect("shape checked against manifest")
}

/// Loads and fully validates an episode bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<FeatureBundle> {
    let dir = dir.as_ref();
    let m: BundleManifest = read_manifest(dir)?;
    let hw = m.h * m.w;
    let (d, n) = (m.d, m.n);
    let image = [m.image_height, m.image_width];
    let reader = PayloadReader::new(dir, &m.arrays);

    let query_features = fixed(reader.f32s("query_features", &[hw, d])?);
    let mut support_features = Vec::with_capacity(m.k);
    let mut support_masks = Vec::with_capacity(m.k);
    for i in 0..m.k {
        support_features.push(fixed(
            reader.f32s(&format!("support_features_{i}"), &[hw, d])?,
        ));
        support_masks.push(fixed(reader.u8s(&format!("support_mask_{i}"), &image)?));
    }
    let text_embed_target = text_embedding(&reader, "text_embed_target", &m)?;
    let text_embed_background = text_embedding(&reader, "text_embed_background", &m)?;
    let attentions = fixed(reader.f32s("attentions", &[n, hw, hw])?);

    let bundle = FeatureBundle {
        grid: Grid::new(m.h, m.w),
        image_height: m.image_height,
        image_width: m.image_width,
        query_features,
        support_features,
        support_masks,
        text_embed_target,
        text_embed_background,
        attentions,
        class_name: m.class_name,
        seed: m.seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

// A text embedding whose length disagrees with `d` is a dimension error,
// not a payload-shape error.
fn text_embedding(reader: &PayloadReader, name: &str, m: &BundleManifest) -> Result<Array1<f32>> {
    if let Some(entry) = reader.entries.get(name) {
        if entry.shape.len() == 1 && entry.shape[0] != m.d {
            return Err(Error::DimMismatch(format!(
                "{name} has dimension {} but visual features have {}",
                entry.shape[0], m.d
            )));
        }
    }
    Ok(fixed(reader.f32s(name, &[m.d])?))
}

/// Writes a bundle directory; the directory is created if needed.
pub fn write_bundle(bundle: &FeatureBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = bundle.manifest();
    let payload = |name: &str| -> PathBuf {
        let entry = manifest
            .arrays
            .iter()
            .find(|e| e.name == name)
            .expect("listed");
        dir.join(&entry.file)
    };
    write_file(
        &payload("query_features"),
        &f32_bytes(bundle.query_features.iter()),
    )?;
    for (i, (f, m)) in bundle
        .support_features
        .iter()
        .zip(&bundle.support_masks)
        .enumerate()
    {
        write_file(
            &payload(&format!("support_features_{i}")),
            &f32_bytes(f.iter()),
        )?;
        let mask: Vec<u8> = m.iter().copied().collect();
        write_file(&payload(&format!("support_mask_{i}")), &mask)?;
    }
    write_file(
        &payload("text_embed_target"),
        &f32_bytes(bundle.text_embed_target.iter()),
    )?;
    write_file(
        &payload("text_embed_background"),
        &f32_bytes(bundle.text_embed_background.iter()),
    )?;
    write_file(&payload("attentions"), &f32_bytes(bundle.attentions.iter()))?;
    write_manifest(dir, &manifest)
}

/// Provenance carried alongside a prior stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMetadata {
    pub class_name: String,
    pub shots: usize,
    pub channel_names: Vec<String>,
    /// Components disabled by the config and therefore absent.
    pub omitted: Vec<String>,
    pub config: PriorConfig,
}

/// Engine output: VVP channels followed by the (refined) VTP channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStack {
    /// `[channels, h, w]`, every value in `[0, 1]`.
    pub channels: Array3<f32>,
    pub metadata: StackMetadata,
}

impl PriorStack {
    pub fn grid(&self) -> Grid {
        let (_, h, w) = self.channels.dim();
        Grid::new(h, w)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len_of(ndarray::Axis(0))
    }

    pub fn channel(&self, i: usize) -> ndarray::ArrayView2<'_, f32> {
        self.channels.index_axis(ndarray::Axis(0), i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    #[serde(default = "stack_format")]
    pub format: String,
    #[serde(default = "format_version")]
    pub version: u32,
    pub h: usize,
    pub w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub class_name: String,
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub omitted: Vec<String>,
    pub config: PriorConfig,
    pub arrays: Vec<ArrayEntry>,
}

pub fn write_prior_stack(stack: &PriorStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = stack.channels.dim();
    let entry = ArrayEntry {
        name: "channels".into(),
        dtype: Dtype::F32,
        shape: vec![c, h, w],
        file: "channels.bin".into(),
    };
    write_file(&dir.join(&entry.file), &f32_bytes(stack.channels.iter()))?;
    let meta = &stack.metadata;
    let manifest = StackManifest {
        format: stack_format(),
        version: FORMAT_VERSION,
        h,
        w,
        k: meta.shots,
        class_name: meta.class_name.clone(),
        channel_names: meta.channel_names.clone(),
        omitted: meta.omitted.clone(),
        config: meta.config.clone(),
        arrays: vec![entry],
    };
    write_manifest(dir, &manifest)
}

pub fn load_prior_stack(dir: impl AsRef<Path>) -> Result<PriorStack> {
    let dir = dir.as_ref();
    let m: StackManifest = read_manifest(dir)?;
    let reader = PayloadReader::new(dir, &m.arrays);
    let c = m.channel_names.len();
    let channels: Array3<f32> = fixed(reader.f32s("channels", &[c, m.h, m.w])?);
    check_finite("channels", channels.iter())?;
    Ok(PriorStack {
        channels,
        metadata: StackMetadata {
            class_name: m.class_name,
            shots: m.k,
            channel_names: m.channel_names,
            omitted: m.omitted,
            config: m.config,
        },
    })
}

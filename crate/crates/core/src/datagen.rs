//! Synthetic haze dataset construction and persistence.
//!
//! Each scene from a [`DepthSource`] is resized to the target size,
//! quantized to 8 bits and hazed under `variants_per_scene` independent
//! `(A, β)` draws. Samples are written one directory each; the manifest
//! (`manifest.jsonl`) holds one JSON record per sample in scene/variant order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::kernels::resize_bilinear;
use crate::physics::{
    synthesize_haze, synthesize_raw, transmission_from_depth, AirlightMap, DepthMap, ImageTensor,
    ScatterParams, TransmissionMap,
};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RESIZE_METHOD: &str = "bilinear";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    #[serde(default = "default_variants")]
    pub variants_per_scene: usize,
    #[serde(default = "default_airlight_range")]
    pub airlight_range: [f64; 2],
    #[serde(default = "default_beta_range")]
    pub beta_range: [f64; 2],
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub seed: u64,
}

fn default_variants() -> usize {
    4
}
fn default_airlight_range() -> [f64; 2] {
    [0.5, 1.0]
}
fn default_beta_range() -> [f64; 2] {
    [0.4, 1.6]
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_scenes: 1000,
            variants_per_scene: default_variants(),
            airlight_range: default_airlight_range(),
            beta_range: default_beta_range(),
            image_size: [64, 64],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.variants_per_scene == 0 {
            return Err(Error::Config("num_scenes and variants_per_scene must be positive".into()));
        }
        let [a0, a1] = self.airlight_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("airlight_range must satisfy 0 <= low <= high <= 1, got {a0}..{a1}")));
        }
        let [b0, b1] = self.beta_range;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::Config(format!("beta_range must satisfy 0 < low <= high, got {b0}..{b1}")));
        }
        if self.image_size.contains(&0) {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_scenes * self.variants_per_scene
    }
}

/// Draws `A` then `β`, each uniform over its closed range.
pub fn sample_params(rng: &mut impl Rng, spec: &DatasetSpec) -> ScatterParams {
    let [a0, a1] = spec.airlight_range;
    let [b0, b1] = spec.beta_range;
    let airlight_value = rng.random_range(a0..=a1);
    let beta = rng.random_range(b0..=b1);
    ScatterParams { beta, airlight_value }
}

/// Per-image min/max rescale to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_depth(raw: &Tensor) -> Result<DepthMap> {
    if let Some(v) = raw.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("depth contains non-finite value {v}")));
    }
    if raw.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Data("depth contains negative values".into()));
    }
    let (lo, hi) = (raw.min(), raw.max());
    let span = hi - lo;
    let t = if span > 0.0 {
        raw.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        raw.map(|_| 0.5)
    };
    DepthMap::new(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeSample {
    pub hazy: ImageTensor,
    pub clean: ImageTensor,
    pub transmission: TransmissionMap,
    pub airlight: AirlightMap,
    pub params: ScatterParams,
    pub scene_id: usize,
    pub variant_id: usize,
}

impl HazeSample {
    /// Largest deviation of the stored hazy image from `J·t + A(1−t)`.
    pub fn consistency_error(&self) -> f64 {
        let re = synthesize_raw(self.clean.tensor(), self.transmission.tensor(), self.airlight.tensor());
        re.max_abs_diff(self.hazy.tensor())
    }
}

/// Hazes `clean` with the transmission of the normalized `raw_depth` under `params`.
pub fn build_sample(clean: &ImageTensor, raw_depth: &Tensor, params: ScatterParams) -> Result<HazeSample> {
    let params = ScatterParams::new(params.beta, params.airlight_value)?;
    let depth = normalize_depth(raw_depth)?;
    let transmission = transmission_from_depth(&depth, params.beta)?;
    let airlight = AirlightMap::uniform(params.airlight_value, clean.height(), clean.width())?;
    let hazy = synthesize_haze(clean, &transmission, &airlight)?;
    Ok(HazeSample {
        hazy,
        clean: clean.clone(),
        transmission,
        airlight,
        params,
        scene_id: 0,
        variant_id: 0,
    })
}

/// Aligned `(rgb, raw depth)` pairs, indexable in a fixed order.
pub trait DepthSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns `([1,3,H,W]` rgb, `[1,1,H,W]` non-negative depth`)` at native size.
    fn pair(&self, index: usize) -> Result<(ImageTensor, Tensor)>;
}

/// Random outdoor-like scenes: sky, a receding ground plane and blocky
/// objects whose colour edges coincide with depth discontinuities.
#[derive(Clone, Debug)]
pub struct ProceduralSource {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl ProceduralSource {
    pub fn new(seed: u64, count: usize, height: usize, width: usize) -> Self {
        ProceduralSource {
            seed,
            count,
            height,
            width,
        }
    }
}

const FAR_DEPTH: f64 = 10.0;
const NEAR_DEPTH: f64 = 1.0;

struct Blob {
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
    round: bool,
    depth: f64,
    color: [f64; 3],
    stripe: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        if self.round {
            let (cy, cx) = ((self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0);
            let (ry, rx) = ((self.y1 - self.y0) / 2.0, (self.x1 - self.x0) / 2.0);
            let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
            dy * dy + dx * dx <= 1.0
        } else {
            y >= self.y0 && y <= self.y1 && x >= self.x0 && x <= self.x1
        }
    }
}

/// Renders one procedural scene at `h×w`; fully determined by `(seed, index)`.
pub fn procedural_scene(seed: u64, index: usize, h: usize, w: usize) -> (ImageTensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(index as u64);
    let horizon = rng.random_range(0.25..0.55);
    let sky_top = [rng.random_range(0.35..0.6), rng.random_range(0.5..0.75), rng.random_range(0.75..0.95)];
    let sky_bottom = [rng.random_range(0.75..0.95), rng.random_range(0.8..0.95), rng.random_range(0.85..1.0)];
    let ground = [rng.random_range(0.2..0.55), rng.random_range(0.25..0.55), rng.random_range(0.1..0.35)];
    let ground_freq = rng.random_range(20.0..60.0);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.4),
            ]
        })
        .collect();
    let n_blobs = rng.random_range(2..=5);
    let mut blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let base = rng.random_range(horizon + 0.05..1.0f64);
            let height = rng.random_range(0.15..0.6);
            let width = rng.random_range(0.1..0.4);
            let x0 = rng.random_range(-0.1..0.9);
            // Objects standing lower in the frame are nearer.
            let depth = NEAR_DEPTH + (FAR_DEPTH - NEAR_DEPTH) * 0.8 * (1.0 - (base - horizon) / (1.0 - horizon));
            Blob {
                y0: base - height,
                y1: base,
                x0,
                x1: x0 + width,
                round: rng.random_bool(0.4),
                depth: depth.max(NEAR_DEPTH),
                color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
                stripe: rng.random_range(8.0..40.0),
            }
        })
        .collect();
    // Painter's order: far first.
    blobs.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut rgb = Tensor::zeros([1, 3, h, w]);
    let mut depth = Tensor::zeros([1, 1, h, w]);
    for yi in 0..h {
        let y = (yi as f64 + 0.5) / h as f64;
        for xi in 0..w {
            let x = (xi as f64 + 0.5) / w as f64;
            let wobble: f64 = waves
                .iter()
                .map(|[fy, fx, ph, amp]| amp * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                .sum();
            let (mut d, mut col) = if y < horizon {
                let s = y / horizon;
                let c: [f64; 3] = std::array::from_fn(|c| sky_top[c] * (1.0 - s) + sky_bottom[c] * s);
                (FAR_DEPTH, c)
            } else {
                let s = (y - horizon) / (1.0 - horizon);
                let tex = 0.06 * (ground_freq * x + 3.0 * wobble).sin();
                let c: [f64; 3] = std::array::from_fn(|c| ground[c] * (0.7 + 0.5 * s) + tex);
                ((FAR_DEPTH - (FAR_DEPTH - NEAR_DEPTH) * s + wobble).max(NEAR_DEPTH), c)
            };
            for b in &blobs {
                if b.contains(y, x) {
                    d = b.depth + 0.3 * wobble.abs();
                    let tex = 0.08 * (b.stripe * (x + 0.3 * y)).sin();
                    col = std::array::from_fn::<f64, 3, _>(|c| b.color[c] + tex);
                }
            }
            depth.set(0, 0, yi, xi, d);
            for (c, v) in col.iter().enumerate() {
                rgb.set(0, c, yi, xi, v.clamp(0.0, 1.0));
            }
        }
    }
    (ImageTensor::new(rgb).expect("clamped"), depth)
}

impl DepthSource for ProceduralSource {
    fn len(&self) -> usize {
        self.count
    }

    fn pair(&self, index: usize) -> Result<(ImageTensor, Tensor)> {
        if index >= self.count {
            return Err(Error::Capacity(format!("procedural source has {} scenes", self.count)));
        }
        Ok(procedural_scene(self.seed, index, self.height, self.width))
    }
}

/// Directory of `<name>_rgb.png` files with aligned `<name>_depth.png`
/// (16-bit grayscale) or `<name>_depth.dmap` companions, sorted by name.
#[derive(Clone, Debug)]
pub struct FilePairSource {
    pairs: Vec<(PathBuf, PathBuf)>,
}

impl FilePairSource {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut pairs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix("_rgb.png"))
            else {
                continue;
            };
            let depth = ["dmap", "png"]
                .iter()
                .map(|ext| dir.join(format!("{stem}_depth.{ext}")))
                .find(|p| p.exists())
                .ok_or_else(|| Error::Data(format!("no depth file for {}", path.display())))?;
            pairs.push((path, depth));
        }
        pairs.sort();
        Ok(FilePairSource { pairs })
    }

    pub fn pairs(&self) -> &[(PathBuf, PathBuf)] {
        &self.pairs
    }
}

impl DepthSource for FilePairSource {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, index: usize) -> Result<(ImageTensor, Tensor)> {
        let (rgb_path, depth_path) = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Capacity(format!("file source has {} pairs", self.pairs.len())))?;
        let rgb = imageio::read_rgb(rgb_path)?;
        let depth = if depth_path.extension().is_some_and(|e| e == "dmap") {
            imageio::read_dmap(depth_path)?
        } else {
            imageio::read_gray(depth_path)?
        };
        if depth.shape() != [1, 1, rgb.height(), rgb.width()] {
            return Err(shape_err!(
                "{} is not aligned with {}",
                depth_path.display(),
                rgb_path.display()
            ));
        }
        Ok((rgb, depth))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDigests {
    pub clean: String,
    pub hazy: String,
    pub transmission: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub scene_id: usize,
    pub variant_id: usize,
    pub airlight: f64,
    pub beta: f64,
    pub dir: String,
    pub clean: String,
    pub hazy: String,
    pub transmission: String,
    pub digests: SampleDigests,
    pub resize: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    scene_id: usize,
    variant_id: usize,
    airlight: f64,
    beta: f64,
    height: usize,
    width: usize,
    resize: &'a str,
    digests: &'a SampleDigests,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fit(t: &Tensor, [h, w]: [usize; 2]) -> Tensor {
    if t.height() == h && t.width() == w {
        t.clone()
    } else {
        resize_bilinear(t, h, w)
    }
}

/// Builds every variant of scene `scene_id`, in variant order.
pub fn build_scene(spec: &DatasetSpec, source: &dyn DepthSource, scene_id: usize) -> Result<Vec<HazeSample>> {
    let (rgb, raw_depth) = source.pair(scene_id)?;
    let clean = ImageTensor::from_clamped(imageio::quantize_8bit(&fit(rgb.tensor(), spec.image_size)))?;
    let depth = fit(&raw_depth, spec.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(scene_id as u64);
    (0..spec.variants_per_scene)
        .map(|variant_id| {
            let params = sample_params(&mut rng, spec);
            let mut s = build_sample(&clean, &depth, params)?;
            s.scene_id = scene_id;
            s.variant_id = variant_id;
            Ok(s)
        })
        .collect()
}

fn write_sample(out_dir: &Path, s: &HazeSample) -> Result<ManifestRecord> {
    let dir = format!("scene{:05}_v{}", s.scene_id, s.variant_id);
    let root = out_dir.join(&dir);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let clean = imageio::write_png(&root.join("clean.png"), s.clean.tensor())?;
    let hazy = imageio::write_dmap(&root.join("hazy.dmap"), s.hazy.tensor())?;
    let trans = imageio::write_dmap(&root.join("transmission.dmap"), s.transmission.tensor())?;
    imageio::write_png(&root.join("hazy.png"), s.hazy.tensor())?;
    imageio::write_png(&root.join("transmission.png"), s.transmission.tensor())?;
    let digests = SampleDigests {
        clean: hex_digest(&clean),
        hazy: hex_digest(&hazy),
        transmission: hex_digest(&trans),
    };
    let meta = SampleMeta {
        scene_id: s.scene_id,
        variant_id: s.variant_id,
        airlight: s.params.airlight_value,
        beta: s.params.beta,
        height: s.clean.height(),
        width: s.clean.width(),
        resize: RESIZE_METHOD,
        digests: &digests,
    };
    let meta_text = toml::to_string(&meta).map_err(|e| Error::Data(e.to_string()))?;
    let meta_path = root.join("meta.toml");
    std::fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(ManifestRecord {
        scene_id: s.scene_id,
        variant_id: s.variant_id,
        airlight: s.params.airlight_value,
        beta: s.params.beta,
        clean: format!("{dir}/clean.png"),
        hazy: format!("{dir}/hazy.dmap"),
        transmission: format!("{dir}/transmission.dmap"),
        dir,
        digests,
        resize: RESIZE_METHOD.to_string(),
    })
}

fn for_each_scene<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Synthesizes all samples in memory without touching the filesystem.
pub fn synthesize_dataset(spec: &DatasetSpec, source: &dyn DepthSource) -> Result<Vec<HazeSample>> {
    spec.validate()?;
    check_capacity(spec, source)?;
    let scenes = for_each_scene(spec.num_scenes, |s| build_scene(spec, source, s))?;
    Ok(scenes.into_iter().flatten().collect())
}

fn check_capacity(spec: &DatasetSpec, source: &dyn DepthSource) -> Result<()> {
    if source.len() < spec.num_scenes {
        return Err(Error::Capacity(format!(
            "source provides {} scenes, spec needs {}",
            source.len(),
            spec.num_scenes
        )));
    }
    Ok(())
}

/// Synthesizes and writes every sample plus the manifest under `out_dir`.
pub fn build_dataset(spec: &DatasetSpec, source: &dyn DepthSource, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    check_capacity(spec, source)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_scene = for_each_scene(spec.num_scenes, |s| {
        build_scene(spec, source, s)?
            .iter()
            .map(|sample| write_sample(out_dir, sample))
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<ManifestRecord> = per_scene.into_iter().flatten().collect();
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { path, records })
}

fn read_checked(root: &Path, rel: &str, digest: &str) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex_digest(&bytes) != digest {
        return Err(Error::Data(format!("digest mismatch for {}", path.display())));
    }
    Ok(bytes)
}

/// Reloads one manifest record, verifying content digests.
pub fn load_sample(root: &Path, r: &ManifestRecord) -> Result<HazeSample> {
    read_checked(root, &r.clean, &r.digests.clean)?;
    let clean = imageio::read_rgb(&root.join(&r.clean))?;
    let hazy = imageio::decode_dmap(&read_checked(root, &r.hazy, &r.digests.hazy)?)?;
    let trans = imageio::decode_dmap(&read_checked(root, &r.transmission, &r.digests.transmission)?)?;
    let params = ScatterParams::new(r.beta, r.airlight)?;
    Ok(HazeSample {
        hazy: ImageTensor::new(hazy)?,
        transmission: TransmissionMap::new(trans)?,
        airlight: AirlightMap::uniform(r.airlight, clean.height(), clean.width())?,
        clean,
        params,
        scene_id: r.scene_id,
        variant_id: r.variant_id,
    })
}

/// Loads every sample listed in `<dir>/manifest.jsonl`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<HazeSample>> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    manifest.records.iter().map(|r| load_sample(dir, r)).collect()
}

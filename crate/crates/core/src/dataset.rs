//! Sample data model, manifest IO, synthetic scene generation, and the
//! RGB to linear-intensity conversion shared by the edge-aware losses.
//!
//! Layout conventions: RGB images are `[3, H, W]`, single-channel maps are
//! `[H, W]`, everything is `f64` in `[0, 1]`. Depth uses the "near = large"
//! polarity (configurable at the loader level by inverting, but all
//! synthetic data is generated near-large).

use crate::{CoreError, Result};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// One training or evaluation record.
#[derive(Clone, Debug)]
pub struct RgbdSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Array3<f64>,
    /// Raw (possibly noisy) depth, `[H, W]` in `[0, 1]`, near = large.
    pub depth: Array2<f64>,
    /// Binary GT saliency maps; index 0 is the canonical GT.
    pub annotations: Vec<Array2<f64>>,
    /// Noise-free depth, synthetic data only.
    pub clean_depth: Option<Array2<f64>>,
    /// Visible-region masks ordered by saliency rank, synthetic data only.
    /// Masks are pairwise disjoint.
    pub object_masks: Option<Vec<Array2<f64>>>,
}

impl RgbdSample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn gt(&self) -> &Array2<f64> {
        &self.annotations[0]
    }

    /// Enforce the type invariants; loading goes through this so malformed
    /// data fails loudly instead of poisoning training.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.shape()[0] != 3 {
            return Err(shape_err("rgb", "[3, H, W]", self.rgb.shape()));
        }
        if self.depth.dim() != (h, w) {
            return Err(shape_err("depth", &format!("[{h}, {w}]"), self.depth.shape()));
        }
        if self.annotations.is_empty() {
            return Err(CoreError::Invalid(format!(
                "sample {}: annotations must be non-empty",
                self.id
            )));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if a.dim() != (h, w) {
                return Err(shape_err(
                    &format!("annotation {i}"),
                    &format!("[{h}, {w}]"),
                    a.shape(),
                ));
            }
            if a.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(CoreError::Invalid(format!(
                    "sample {}: annotation {i} is not binary",
                    self.id
                )));
            }
        }
        if let Some(cd) = &self.clean_depth {
            if cd.dim() != (h, w) {
                return Err(shape_err("clean_depth", &format!("[{h}, {w}]"), cd.shape()));
            }
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.rgb.iter().all(in_unit) || !self.depth.iter().all(in_unit) {
            return Err(CoreError::Invalid(format!(
                "sample {}: values outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }
}

fn shape_err(context: &str, expected: &str, actual: &[usize]) -> CoreError {
    CoreError::Shape {
        context: context.to_string(),
        expected: expected.to_string(),
        actual: format!("{actual:?}"),
    }
}

/// Stack RGB and depth into the 4-channel network input `[4, H, W]`.
pub fn rgbd_input(rgb: &Array3<f64>, depth: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = depth.dim();
    let mut x = ArrayD::zeros(IxDyn(&[4, h, w]));
    for c in 0..3 {
        x.index_axis_mut(Axis(0), c)
            .assign(&rgb.index_axis(Axis(0), c));
    }
    x.index_axis_mut(Axis(0), 3).assign(depth);
    x
}

/// Stack RGB, depth, and an annotation into the 5-channel posterior input.
pub fn rgbdy_input(rgb: &Array3<f64>, depth: &Array2<f64>, y: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = depth.dim();
    let mut x = ArrayD::zeros(IxDyn(&[5, h, w]));
    for c in 0..3 {
        x.index_axis_mut(Axis(0), c)
            .assign(&rgb.index_axis(Axis(0), c));
    }
    x.index_axis_mut(Axis(0), 3).assign(depth);
    x.index_axis_mut(Axis(0), 4).assign(y);
    x
}

// ---------------------------------------------------------------------------
// Intensity conversion
// ---------------------------------------------------------------------------

/// Linearized gray intensity image Ig.
#[derive(Clone, Debug)]
pub struct IntensityImage {
    pub ig: Array2<f64>,
}

/// Inverse-gamma linearization of one sRGB channel value.
pub fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Convert an RGB image to linear gray intensity: per-channel gamma
/// linearization followed by the luminance weights (0.2126, 0.7152, 0.0722).
pub fn to_intensity(rgb: &Array3<f64>) -> Result<IntensityImage> {
    if rgb.shape()[0] != 3 {
        return Err(shape_err("to_intensity rgb", "[3, H, W]", rgb.shape()));
    }
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::Invalid(
            "to_intensity: rgb values outside [0, 1]".into(),
        ));
    }
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    const WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];
    let ig = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..3)
            .map(|c| WEIGHTS[c] * srgb_linearize(rgb[[c, y, x]]))
            .sum()
    });
    Ok(IntensityImage { ig })
}

/// Per-channel mean of an RGB image.
pub fn channel_mean(rgb: &Array3<f64>) -> [f64; 3] {
    let n = (rgb.shape()[1] * rgb.shape()[2]) as f64;
    let mut m = [0.0; 3];
    for c in 0..3 {
        m[c] = rgb.index_axis(Axis(0), c).sum() / n;
    }
    m
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line describing a sample; paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub annotation_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_depth_path: Option<PathBuf>,
    /// Saliency-ranked visible object masks; synthetic data only. Kept in
    /// the manifest so the rank oracle survives a save/load round trip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mask_paths: Option<Vec<PathBuf>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header { split: Split, mean_rgb: [f64; 3] },
    Entry(ManifestEntry),
}

/// Dataset index: a JSON-lines file with one header line followed by one
/// line per sample.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Training-set channel means, used for region hiding.
    pub mean_rgb: [f64; 3],
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CoreError::Invalid(format!("duplicate manifest id {}", e.id)));
            }
        }
        if self.mean_rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::Invalid("mean_rgb outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Write the manifest to `path` (JSON lines, header first).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = Vec::new();
        let header = ManifestLine::Header {
            split: self.split,
            mean_rgb: self.mean_rgb,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, &ManifestLine::Entry(e.clone()))?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
    }

    /// Load a manifest and verify ids are unique and referenced files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut split = None;
        let mut mean_rgb = None;
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|source| CoreError::ManifestParse { line: i + 1, source })?;
            match parsed {
                ManifestLine::Header { split: s, mean_rgb: m } => {
                    split = Some(s);
                    mean_rgb = Some(m);
                }
                ManifestLine::Entry(e) => entries.push(e),
            }
        }
        let manifest = DatasetManifest {
            root,
            entries,
            split: split
                .ok_or_else(|| CoreError::Invalid("manifest has no header line".into()))?,
            mean_rgb: mean_rgb.unwrap_or([0.5; 3]),
        };
        manifest.validate()?;
        for e in &manifest.entries {
            let mut required: Vec<&PathBuf> = vec![&e.rgb_path, &e.depth_path];
            required.extend(e.annotation_paths.iter());
            if let Some(p) = &e.clean_depth_path {
                required.push(p);
            }
            if let Some(ms) = &e.object_mask_paths {
                required.extend(ms.iter());
            }
            for rel in required {
                let full = manifest.root.join(rel);
                if !full.exists() {
                    return Err(CoreError::Invalid(format!(
                        "manifest entry {}: missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    /// Load and validate one sample by index.
    pub fn load_sample(&self, index: usize) -> Result<RgbdSample> {
        let e = &self.entries[index];
        let rgb = load_rgb_png(&self.root.join(&e.rgb_path))?;
        let depth = load_gray_png(&self.root.join(&e.depth_path))?;
        let mut annotations = Vec::with_capacity(e.annotation_paths.len());
        for p in &e.annotation_paths {
            annotations.push(load_gray_png(&self.root.join(p))?);
        }
        let clean_depth = match &e.clean_depth_path {
            Some(p) => Some(load_gray_png(&self.root.join(p))?),
            None => None,
        };
        let object_masks = match &e.object_mask_paths {
            Some(ps) => {
                let mut ms = Vec::with_capacity(ps.len());
                for p in ps {
                    ms.push(load_gray_png(&self.root.join(p))?);
                }
                Some(ms)
            }
            None => None,
        };
        let sample = RgbdSample {
            id: e.id.clone(),
            rgb,
            depth,
            annotations,
            clean_depth,
            object_masks,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Load every sample in manifest order.
    pub fn load_all(&self) -> Result<Vec<RgbdSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Adapt the `RGB/ depth/ GT/` directory convention of the public RGB-D
    /// saliency benchmarks. Files are matched by stem; `mean_rgb` is computed
    /// from the RGB images since hiding needs it.
    pub fn from_benchmark_layout(dir: &Path, split: Split) -> Result<Self> {
        let rgb_dir = dir.join("RGB");
        let names = list_stems(&rgb_dir)?;
        if names.is_empty() {
            return Err(CoreError::Invalid(format!(
                "no images found under {}",
                rgb_dir.display()
            )));
        }
        let mut entries = Vec::new();
        let mut mean = [0.0f64; 3];
        for stem in &names {
            let rgb_path = find_image(dir, "RGB", stem)?;
            let depth_path = find_image(dir, "depth", stem)?;
            let gt_path = find_image(dir, "GT", stem)?;
            let rgb = load_rgb_png(&dir.join(&rgb_path))?;
            let m = channel_mean(&rgb);
            for c in 0..3 {
                mean[c] += m[c] / names.len() as f64;
            }
            entries.push(ManifestEntry {
                id: stem.clone(),
                rgb_path,
                depth_path,
                annotation_paths: vec![gt_path],
                clean_depth_path: None,
                object_mask_paths: None,
            });
        }
        let manifest = DatasetManifest {
            root: dir.to_path_buf(),
            entries,
            split,
            mean_rgb: mean,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn find_image(root: &Path, sub: &str, stem: &str) -> Result<PathBuf> {
    for ext in ["png", "jpg", "jpeg", "bmp"] {
        let rel = PathBuf::from(sub).join(format!("{stem}.{ext}"));
        if root.join(&rel).exists() {
            return Ok(rel);
        }
    }
    Err(CoreError::Invalid(format!(
        "no {sub} image for id {stem} under {}",
        root.display()
    )))
}

// ---------------------------------------------------------------------------
// PNG IO
// ---------------------------------------------------------------------------

/// Save a `[H, W]` map in `[0, 1]` as 8-bit gray PNG (256-level quantization).
pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (y, row) in map.outer_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(v)]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CoreError::image(path, e))
}

/// Load an 8-bit gray PNG to `[H, W]` in `[0, 1]`.
pub fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::image(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    }))
}

/// Save a `[3, H, W]` image in `[0, 1]` as 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (_, h, w) = rgb.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(rgb[[0, y, x]]),
                to_u8(rgb[[1, y, x]]),
                to_u8(rgb[[2, y, x]]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CoreError::image(path, e))
}

/// Load an RGB image to `[3, H, W]` in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::image(path, e))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
    ))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Configuration for the synthetic RGB-D generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    /// Square image side; must be at least 16.
    pub size: usize,
    /// Inclusive range for the number of objects per scene, within [1, 5].
    pub n_objects_range: (usize, usize),
    /// Gaussian depth-noise sigma; 0 disables noise and dropout holes.
    pub depth_noise_std: f64,
    /// The canonical GT is the union of the top-k ranked objects.
    #[serde(default = "default_gt_top_k")]
    pub gt_top_k: usize,
}

fn default_gt_top_k() -> usize {
    1
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            count: 10,
            size: 64,
            n_objects_range: (1, 3),
            depth_noise_std: 0.05,
            gt_top_k: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(CoreError::Config("synth size must be >= 16".into()));
        }
        let (lo, hi) = self.n_objects_range;
        if lo == 0 || hi > 5 || lo > hi {
            return Err(CoreError::Config(
                "n_objects_range must be a non-empty subrange of [1, 5]".into(),
            ));
        }
        if self.depth_noise_std < 0.0 {
            return Err(CoreError::Config("depth_noise_std must be >= 0".into()));
        }
        if self.gt_top_k == 0 {
            return Err(CoreError::Config("gt_top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

/// One placed object in a synthetic scene, in creation order.
#[derive(Clone, Debug)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: f64,
    /// Z value doubles as the clean depth reading (near = large).
    pub z: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    /// Signed distance to the shape boundary (negative inside).
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        match self.kind {
            ShapeKind::Circle => (dx * dx + dy * dy).sqrt() - self.radius,
            ShapeKind::Square => dx.abs().max(dy.abs()) - self.radius,
            ShapeKind::Diamond => dx.abs() + dy.abs() - self.radius,
        }
    }

    /// Anti-aliased coverage in [0, 1] over a one-pixel band.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        (0.5 - self.sdf(x, y)).clamp(0.0, 1.0)
    }

    /// Hard occupancy used for depth and masks.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.coverage(x, y) > 0.5
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent stream seed from a base seed and stream indices.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(a)) ^ b)
}

/// Generate one scene in memory. Pure function of `(config, index)`.
pub fn synth_scene(config: &SynthConfig, index: usize) -> RgbdSample {
    synth_scene_detailed(config, index).0
}

/// Like [`synth_scene`], also returning the scene graph in creation order
/// so tests can verify occlusion against ground truth geometry.
pub fn synth_scene_detailed(config: &SynthConfig, index: usize) -> (RgbdSample, Vec<SceneObject>) {
    config.validate().expect("invalid synth config");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5ce9e, index as u64));
    let n = config.size;
    let nf = n as f64;

    // Textured background: a base tone plus two low-frequency waves.
    let mut rgb = Array3::<f64>::zeros((3, n, n));
    let mut bg_mean = [0.0f64; 3];
    for c in 0..3 {
        let base = rng.random_range(0.30..0.70);
        let amp1 = rng.random_range(0.03..0.10);
        let amp2 = rng.random_range(0.02..0.06);
        let (fx1, fy1) = (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5));
        let (fx2, fy2) = (rng.random_range(1.5..4.0), rng.random_range(1.5..4.0));
        let (p1, p2) = (
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        for y in 0..n {
            for x in 0..n {
                let (u, v) = (x as f64 / nf, y as f64 / nf);
                let t = base
                    + amp1 * (std::f64::consts::TAU * (fx1 * u + fy1 * v) + p1).sin()
                    + amp2 * (std::f64::consts::TAU * (fx2 * u + fy2 * v) + p2).sin();
                let t = t.clamp(0.02, 0.98);
                rgb[[c, y, x]] = t;
                bg_mean[c] += t / (nf * nf);
            }
        }
    }

    // Background depth: a gently receding plane, far (small values).
    let mut clean = Array2::<f64>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            clean[[y, x]] = 0.03 + 0.12 * (y as f64 / nf);
        }
    }

    // Objects at distinct depth slots so z-order is unambiguous.
    let (lo, hi) = config.n_objects_range;
    let n_obj = rng.random_range(lo..=hi);
    let slots = 12usize.max(n_obj);
    let slot_idx = rand::seq::index::sample(&mut rng, slots, n_obj);
    let mut objects = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let kind = match rng.random_range(0..3u8) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Diamond,
        };
        let max_r = (nf / 2.0 - 3.0).max(2.0);
        let radius = rng.random_range(0.10 * nf..0.26 * nf).clamp(2.0, max_r);
        let margin = radius + 1.0;
        let cx = rng.random_range(margin..nf - margin);
        let cy = rng.random_range(margin..nf - margin);
        let z = 0.35 + 0.55 * slot_idx.index(i) as f64 / (slots - 1) as f64;
        let color = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        objects.push(SceneObject {
            kind,
            center: (cx, cy),
            radius,
            z,
            color,
        });
    }

    // Paint far to near: later (nearer) objects overwrite earlier ones,
    // which makes per-pixel ownership equal to the z-order winner.
    let mut order: Vec<usize> = (0..n_obj).collect();
    order.sort_by(|&a, &b| objects[a].z.partial_cmp(&objects[b].z).unwrap());
    let mut owner = Array2::<i64>::from_elem((n, n), -1);
    for &oi in &order {
        let obj = &objects[oi];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let cov = obj.coverage(px, py);
                if cov > 0.0 {
                    for c in 0..3 {
                        rgb[[c, y, x]] = (1.0 - cov) * rgb[[c, y, x]] + cov * obj.color[c];
                    }
                }
                if cov > 0.5 {
                    clean[[y, x]] = obj.z;
                    owner[[y, x]] = oi as i64;
                }
            }
        }
    }

    // Visible masks (disjoint by construction) and the saliency ranking:
    // normalized visible area x RGB contrast to background x center prior,
    // ties broken by creation order.
    let mut masks: Vec<Array2<f64>> = (0..n_obj)
        .map(|oi| owner.mapv(|o| if o == oi as i64 { 1.0 } else { 0.0 }))
        .collect();
    let sigma = 0.30 * nf;
    let mut scored: Vec<(usize, f64)> = (0..n_obj)
        .map(|oi| {
            let area = masks[oi].sum();
            if area == 0.0 {
                return (oi, 0.0);
            }
            let area_frac = area / (nf * nf);
            let contrast = (0..3)
                .map(|c| (objects[oi].color[c] - bg_mean[c]).abs())
                .sum::<f64>()
                / 3.0;
            let (mut my, mut mx) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    if masks[oi][[y, x]] == 1.0 {
                        my += y as f64;
                        mx += x as f64;
                    }
                }
            }
            let (cy, cx) = (my / area, mx / area);
            let d2 = (cy - nf / 2.0).powi(2) + (cx - nf / 2.0).powi(2);
            let center_prior = (-d2 / (2.0 * sigma * sigma)).exp();
            (oi, area_frac * contrast * center_prior)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let ranked: Vec<Array2<f64>> = scored
        .iter()
        .map(|&(oi, _)| std::mem::take(&mut masks[oi]))
        .collect();

    let mut gt = Array2::<f64>::zeros((n, n));
    for m in ranked.iter().take(config.gt_top_k) {
        gt.zip_mut_with(m, |g, &v| *g = g.max(v));
    }

    // Noisy depth: additive Gaussian noise plus sensor dropout holes.
    // A zero sigma must reproduce the clean depth bit for bit.
    let depth = if config.depth_noise_std > 0.0 {
        let normal = Normal::new(0.0, config.depth_noise_std).expect("valid sigma");
        let mut d = clean.mapv(|v| v);
        for v in d.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        let holes = rng.random_range(1..=3usize);
        for _ in 0..holes {
            let hr = rng.random_range(nf / 16.0..nf / 8.0);
            let hx = rng.random_range(0.0..nf);
            let hy = rng.random_range(0.0..nf);
            for y in 0..n {
                for x in 0..n {
                    let d2 = (x as f64 - hx).powi(2) + (y as f64 - hy).powi(2);
                    if d2 < hr * hr {
                        d[[y, x]] = 0.0;
                    }
                }
            }
        }
        d.mapv(|v| v.clamp(0.0, 1.0))
    } else {
        clean.clone()
    };

    let sample = RgbdSample {
        id: format!("scene_{index:04}"),
        rgb,
        depth,
        annotations: vec![gt],
        clean_depth: Some(clean),
        object_masks: Some(ranked),
    };
    (sample, objects)
}

/// Generate `config.count` scenes, write them under `root`, and return the
/// saved manifest (also written to `root/manifest.jsonl`).
pub fn generate_synthetic(root: &Path, config: &SynthConfig) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["rgb", "depth", "gt", "clean", "masks"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| CoreError::io(root.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(config.count);
    let mut mean = [0.0f64; 3];
    for i in 0..config.count {
        let sample = synth_scene(config, i);
        let id = &sample.id;
        let rgb_path = PathBuf::from(format!("rgb/{id}.png"));
        let depth_path = PathBuf::from(format!("depth/{id}.png"));
        let gt_path = PathBuf::from(format!("gt/{id}.png"));
        let clean_path = PathBuf::from(format!("clean/{id}.png"));
        save_rgb_png(&root.join(&rgb_path), &sample.rgb)?;
        save_gray_png(&root.join(&depth_path), &sample.depth)?;
        save_gray_png(&root.join(&gt_path), sample.gt())?;
        save_gray_png(&root.join(&clean_path), sample.clean_depth.as_ref().unwrap())?;
        let mut mask_paths = Vec::new();
        for (k, m) in sample.object_masks.as_ref().unwrap().iter().enumerate() {
            let p = PathBuf::from(format!("masks/{id}_{k}.png"));
            save_gray_png(&root.join(&p), m)?;
            mask_paths.push(p);
        }
        let m = channel_mean(&sample.rgb);
        for c in 0..3 {
            mean[c] += m[c] / config.count as f64;
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            rgb_path,
            depth_path,
            annotation_paths: vec![gt_path],
            clean_depth_path: Some(clean_path),
            object_mask_paths: Some(mask_paths),
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
        split: Split::Train,
        mean_rgb: mean,
    };
    manifest.save(&root.join("manifest.jsonl"))?;
    Ok(manifest)
}

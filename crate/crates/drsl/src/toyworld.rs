//! Synthetic two-domain segmentation benchmark.
//!
//! Scenes are axis-aligned rectangles, discs, and stripe bands placed
//! over a textured background. Every class carries several appearance
//! sub-styles (base color plus texture phase), so class-conditional
//! appearance is genuinely multi-modal. The target domain shares scene
//! geometry with the source at matched indices and differs only by a
//! global photometric shift plus additive noise; with a neutral shift
//! the two domains are pixel-identical.
//!
//! On disk: 8-bit RGB PNGs for images, single-channel 8-bit PNGs for
//! labels (pixel value = class id, 255 = ignore), and one JSON manifest
//! with `{spec, source, target, target_eval_labels}`. Source label paths
//! follow from image paths by replacing the `images/` directory with
//! `labels/`. Target ground truth lives under `eval_only/`, which no
//! training path reads.

use std::f32::consts::TAU;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DrslError, Result};
use crate::rng::{stream, Purpose};
use crate::types::{Domain, ImageTensor, LabelMap};

/// Photometric transform applied to target-domain images only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub hue_delta: f32,
    pub brightness_delta: f32,
    pub noise_std: f32,
    pub texture_freq_scale: f32,
}

impl Default for Shift {
    /// The neutral shift: target equals source.
    fn default() -> Self {
        Shift {
            hue_delta: 0.0,
            brightness_delta: 0.0,
            noise_std: 0.0,
            texture_freq_scale: 1.0,
        }
    }
}

impl Shift {
    /// The benchmark shift: strong enough that a source-only model
    /// degrades on target, mild enough that adaptation can close the gap.
    pub fn reference() -> Self {
        Shift {
            hue_delta: 0.10,
            brightness_delta: -0.10,
            noise_std: 0.05,
            texture_freq_scale: 1.3,
        }
    }

    pub fn is_neutral(&self) -> bool {
        *self == Shift::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hue_delta) {
            return Err(DrslError::Config(format!(
                "hue_delta {} outside [0, 1]",
                self.hue_delta
            )));
        }
        if !(-0.5..=0.5).contains(&self.brightness_delta) {
            return Err(DrslError::Config(format!(
                "brightness_delta {} outside [-0.5, 0.5]",
                self.brightness_delta
            )));
        }
        if self.noise_std < 0.0 {
            return Err(DrslError::Config("noise_std must be >= 0".into()));
        }
        if self.texture_freq_scale <= 0.0 {
            return Err(DrslError::Config("texture_freq_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Full description of a generated benchmark; two specs with equal
/// fields generate byte-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub styles_per_class: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for ToySpec {
    /// The reference benchmark: 64×64, five classes, three sub-styles,
    /// with the reference shift.
    fn default() -> Self {
        ToySpec {
            image_size: 64,
            num_classes: 5,
            styles_per_class: 3,
            shapes_min: 4,
            shapes_max: 7,
            shift: Shift::reference(),
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(DrslError::Config(format!(
                "image_size {} must be >= 8 and divisible by 4",
                self.image_size
            )));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(DrslError::Config(format!(
                "num_classes {} outside [2, 254]",
                self.num_classes
            )));
        }
        if self.styles_per_class == 0 {
            return Err(DrslError::Config("styles_per_class must be >= 1".into()));
        }
        if self.shapes_min > self.shapes_max || self.shapes_max == 0 {
            return Err(DrslError::Config(format!(
                "bad shape count range [{}, {}]",
                self.shapes_min, self.shapes_max
            )));
        }
        self.shift.validate()
    }
}

/// Geometry of one placed shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Disc { cx: f32, cy: f32, r: f32 },
    HBand { y0: usize, t: usize },
    VBand { x0: usize, t: usize },
}

/// One entry of the placement log: everything needed to re-rasterize the
/// label map independently of the painter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub class: u8,
    pub style: u8,
    pub phase: f32,
    pub kind: ShapeKind,
}

impl PlacedShape {
    pub fn covers(&self, i: usize, j: usize) -> bool {
        match self.kind {
            ShapeKind::Rect { x0, y0, w, h } => j >= x0 && j < x0 + w && i >= y0 && i < y0 + h,
            ShapeKind::Disc { cx, cy, r } => {
                let dx = j as f32 - cx;
                let dy = i as f32 - cy;
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::HBand { y0, t } => i >= y0 && i < y0 + t,
            ShapeKind::VBand { x0, t } => j >= x0 && j < x0 + t,
        }
    }
}

/// One generated scene with its provenance.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub shapes: Vec<PlacedShape>,
    /// Per-pixel appearance sub-style of the owning shape (or of the
    /// background where no shape covers the pixel).
    pub style_map: Array2<u8>,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Base color of a (class, sub-style) pair in HSV, before texture.
fn palette(class: u8, style: u8, spec: &ToySpec) -> (f32, f32, f32) {
    let s_off = style as f32 - (spec.styles_per_class as f32 - 1.0) / 2.0;
    if class == 0 {
        // desaturated warm background
        (
            0.08 + style as f32 * 0.05,
            0.15,
            0.45 + s_off * 0.06,
        )
    } else {
        let k = spec.num_classes as f32;
        let hue = (class as f32 - 1.0) / (k - 1.0);
        (
            hue + s_off * 0.04,
            0.65 + 0.10 * (style % 2) as f32,
            0.62,
        )
    }
}

/// Texture orientation varies by class so edges alone do not give the
/// class away.
fn texture(class: u8, spec: &ToySpec, i: usize, j: usize, phase: f32, freq_scale: f32) -> f32 {
    let size = spec.image_size as f32;
    let theta = class as f32 * std::f32::consts::PI / spec.num_classes as f32;
    let base_freq = if class == 0 { 3.5 } else { 6.0 };
    let u = j as f32 / size;
    let v = i as f32 / size;
    let along = u * theta.cos() + v * theta.sin();
    (TAU * base_freq * freq_scale * along + phase).sin()
}

/// Generates one scene. Geometry and appearance draws are keyed by
/// (seed, index) only, so matched indices share both across domains; the
/// shift is what separates target from source.
pub fn gen_scene(spec: &ToySpec, domain: Domain, index: u64) -> Result<Scene> {
    spec.validate()?;
    let size = spec.image_size;
    let mut geo = stream(spec.seed, Purpose::SceneGeometry, &[index]);
    let n_shapes = geo.random_range(spec.shapes_min..=spec.shapes_max);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind_ix = geo.random_range(0..3u32);
        let class = geo.random_range(1..spec.num_classes) as u8;
        let kind = match kind_ix {
            0 => {
                let w = geo.random_range(size / 8..=size / 3);
                let h = geo.random_range(size / 8..=size / 3);
                let x0 = geo.random_range(0..=size - w);
                let y0 = geo.random_range(0..=size - h);
                ShapeKind::Rect { x0, y0, w, h }
            }
            1 => {
                let r = geo.random_range(size as f32 / 10.0..size as f32 / 6.0);
                let cx = geo.random_range(r..size as f32 - r);
                let cy = geo.random_range(r..size as f32 - r);
                ShapeKind::Disc { cx, cy, r }
            }
            _ => {
                let t = geo.random_range(size / 16..=size / 8).max(2);
                let offset = geo.random_range(0..=size - t);
                if geo.random_bool(0.5) {
                    ShapeKind::HBand { y0: offset, t }
                } else {
                    ShapeKind::VBand { x0: offset, t }
                }
            }
        };
        shapes.push(PlacedShape {
            class,
            style: 0,
            phase: 0.0,
            kind,
        });
    }
    let mut sty = stream(spec.seed, Purpose::SceneStyle, &[index]);
    let bg_style = sty.random_range(0..spec.styles_per_class) as u8;
    let bg_phase = sty.random_range(0.0..TAU);
    for shape in &mut shapes {
        shape.style = sty.random_range(0..spec.styles_per_class) as u8;
        let style_phase = shape.style as f32 * 2.1;
        shape.phase = style_phase + sty.random_range(0.0..0.6f32);
    }

    // painter's algorithm: later shapes overwrite earlier ones
    let mut labels = Array2::<u8>::zeros((size, size));
    let mut owner = Array2::<usize>::from_elem((size, size), usize::MAX);
    for (ix, shape) in shapes.iter().enumerate() {
        for i in 0..size {
            for j in 0..size {
                if shape.covers(i, j) {
                    labels[[i, j]] = shape.class;
                    owner[[i, j]] = ix;
                }
            }
        }
    }

    let freq_scale = match domain {
        Domain::Source => 1.0,
        Domain::Target => spec.shift.texture_freq_scale,
    };
    let mut pixels = Array3::<f32>::zeros((3, size, size));
    let mut style_map = Array2::<u8>::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let (class, style, phase) = match owner[[i, j]] {
                usize::MAX => (0u8, bg_style, bg_phase),
                ix => (shapes[ix].class, shapes[ix].style, shapes[ix].phase),
            };
            style_map[[i, j]] = style;
            let (h, s, v) = palette(class, style, spec);
            let tex = texture(class, spec, i, j, phase, freq_scale);
            let rgb = hsv_to_rgb(h, s, (v * (1.0 + 0.18 * tex)).clamp(0.0, 1.0));
            for c in 0..3 {
                pixels[[c, i, j]] = rgb[c];
            }
        }
    }

    if domain == Domain::Target {
        let shift = &spec.shift;
        if shift.hue_delta != 0.0 {
            for i in 0..size {
                for j in 0..size {
                    let (h, s, v) = rgb_to_hsv(pixels[[0, i, j]], pixels[[1, i, j]], pixels[[2, i, j]]);
                    let rgb = hsv_to_rgb(h + shift.hue_delta, s, v);
                    for c in 0..3 {
                        pixels[[c, i, j]] = rgb[c];
                    }
                }
            }
        }
        if shift.brightness_delta != 0.0 {
            pixels.mapv_inplace(|v| (v + shift.brightness_delta).clamp(0.0, 1.0));
        }
        if shift.noise_std > 0.0 {
            let mut noise_rng = stream(spec.seed, Purpose::DomainNoise, &[index]);
            let normal = Normal::new(0.0f32, shift.noise_std)
                .expect("validated noise_std is finite and non-negative");
            pixels.mapv_inplace(|v| (v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0));
        }
    }

    Ok(Scene {
        image: ImageTensor::new(pixels)?,
        labels: LabelMap(labels),
        shapes,
        style_map,
    })
}

/// Writes an image as an 8-bit RGB PNG.
pub fn save_image_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (_, h, w) = img.0.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| {
                (img.0[[c, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(path)
        .map_err(|e| DrslError::io(path, std::io::Error::other(e)))
}

/// Reads an 8-bit RGB PNG back into `[0, 1]` floats.
pub fn load_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| DrslError::decode(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(pixels)
}

/// Writes a label map as a single-channel 8-bit PNG (value = class id).
pub fn save_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let (h, w) = labels.0.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, image::Luma([labels.0[[i, j]]]));
        }
    }
    out.save(path)
        .map_err(|e| DrslError::io(path, std::io::Error::other(e)))
}

/// Reads a label PNG back, byte for byte.
pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| DrslError::decode(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut labels = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        labels[[y as usize, x as usize]] = p.0[0];
    }
    Ok(LabelMap(labels))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Index of a generated dataset. All paths are relative to the manifest's
/// directory. `source` and `target` list training images; `target_eval_labels`
/// lists held-out target ground truth used only by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: ToySpec,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub target_eval_labels: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .expect("manifest serialization cannot fail");
        std::fs::write(path, text).map_err(|e| DrslError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DrslError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DrslError::decode(path, e.to_string()))
    }

    /// Label path for a source image path: `images/` becomes `labels/`.
    pub fn source_label_path(image_rel: &str) -> String {
        image_rel.replace("/images/", "/labels/")
    }
}

/// Generates and writes a full dataset, returning its manifest.
pub fn gen_dataset(
    spec: &ToySpec,
    n_source: usize,
    n_target: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_source == 0 || n_target == 0 {
        return Err(DrslError::Config(
            "n_source and n_target must be positive".into(),
        ));
    }
    for sub in ["source/images", "source/labels", "target/images", "eval_only/target_labels"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| DrslError::io(out_dir.join(sub), e))?;
    }
    let mut manifest = DatasetManifest {
        spec: spec.clone(),
        source: Vec::new(),
        target: Vec::new(),
        target_eval_labels: Vec::new(),
    };
    for ix in 0..n_source {
        let scene = gen_scene(spec, Domain::Source, ix as u64)?;
        let img_rel = format!("source/images/img_{ix:04}.png");
        let lab_rel = format!("source/labels/img_{ix:04}.png");
        save_image_png(&scene.image, &out_dir.join(&img_rel))?;
        save_label_png(&scene.labels, &out_dir.join(&lab_rel))?;
        manifest.source.push(img_rel);
    }
    for ix in 0..n_target {
        let scene = gen_scene(spec, Domain::Target, ix as u64)?;
        let img_rel = format!("target/images/img_{ix:04}.png");
        let lab_rel = format!("eval_only/target_labels/img_{ix:04}.png");
        save_image_png(&scene.image, &out_dir.join(&img_rel))?;
        save_label_png(&scene.labels, &out_dir.join(&lab_rel))?;
        manifest.target.push(img_rel);
        manifest.target_eval_labels.push(lab_rel);
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE;

    fn neutral_spec() -> ToySpec {
        ToySpec {
            shift: Shift::default(),
            ..ToySpec::default()
        }
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut s = ToySpec::default();
        s.image_size = 10;
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.shapes_min = 9;
        s.shapes_max = 3;
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.shift.noise_std = -0.1;
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.shift.texture_freq_scale = 0.0;
        assert!(s.validate().is_err());
        assert!(ToySpec::default().validate().is_ok());
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = ToySpec::default();
        let a = gen_scene(&spec, Domain::Target, 3).unwrap();
        let b = gen_scene(&spec, Domain::Target, 3).unwrap();
        assert_eq!(a.image.0, b.image.0);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.shapes, b.shapes);
        let c = gen_scene(&spec, Domain::Target, 4).unwrap();
        assert_ne!(a.image.0, c.image.0, "different index, different scene");
    }

    #[test]
    fn neutral_shift_makes_domains_identical() {
        let spec = neutral_spec();
        let src = gen_scene(&spec, Domain::Source, 1).unwrap();
        let tgt = gen_scene(&spec, Domain::Target, 1).unwrap();
        assert_eq!(src.image.0, tgt.image.0);
        assert_eq!(src.labels, tgt.labels);
    }

    #[test]
    fn reference_shift_moves_pixels_but_not_labels() {
        let spec = ToySpec::default();
        let src = gen_scene(&spec, Domain::Source, 2).unwrap();
        let tgt = gen_scene(&spec, Domain::Target, 2).unwrap();
        assert_eq!(src.labels, tgt.labels, "geometry is shared across domains");
        assert_ne!(src.image.0, tgt.image.0, "shift must move pixels");
    }

    #[test]
    fn labels_are_dense_and_in_range() {
        let spec = ToySpec::default();
        for ix in 0..4 {
            let scene = gen_scene(&spec, Domain::Source, ix).unwrap();
            for &v in scene.labels.0.iter() {
                assert_ne!(v, IGNORE, "toy ground truth is dense");
                assert!((v as usize) < spec.num_classes);
            }
        }
    }

    #[test]
    fn placement_log_recount_matches_painted_labels() {
        // Independent rasterization: for each pixel take the last shape
        // covering it (reverse scan, first hit), background otherwise.
        let spec = ToySpec::default();
        for ix in 0..6 {
            let scene = gen_scene(&spec, Domain::Source, ix).unwrap();
            let size = spec.image_size;
            for i in 0..size {
                for j in 0..size {
                    let expect = scene
                        .shapes
                        .iter()
                        .rev()
                        .find(|s| s.covers(i, j))
                        .map(|s| s.class)
                        .unwrap_or(0);
                    assert_eq!(scene.labels.0[[i, j]], expect, "pixel ({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn style_map_tracks_shape_styles() {
        let spec = ToySpec::default();
        let scene = gen_scene(&spec, Domain::Source, 0).unwrap();
        for ((i, j), &style) in scene.style_map.indexed_iter() {
            if let Some(shape) = scene.shapes.iter().rev().find(|s| s.covers(i, j)) {
                assert_eq!(style, shape.style);
            }
        }
        assert!(scene
            .style_map
            .iter()
            .all(|&s| (s as usize) < spec.styles_per_class));
    }

    #[test]
    fn sub_styles_have_distinct_mean_colors() {
        // same class, different sub-style: the base colors must differ
        // enough for the distribution head to have something to model
        let spec = neutral_spec();
        let c0 = palette(1, 0, &spec);
        let c1 = palette(1, 1, &spec);
        let rgb0 = hsv_to_rgb(c0.0, c0.1, c0.2);
        let rgb1 = hsv_to_rgb(c1.0, c1.1, c1.2);
        let dist: f32 = rgb0
            .iter()
            .zip(&rgb1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(dist > 0.02, "sub-style colors too close: {dist}");
    }

    #[test]
    fn hsv_roundtrip_is_stable() {
        let mut rng = stream(30, Purpose::Scratch, &[]);
        for _ in 0..500 {
            let r = rng.random_range(0.0f32..1.0);
            let g = rng.random_range(0.0f32..1.0);
            let b = rng.random_range(0.0f32..1.0);
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let back = hsv_to_rgb(h, s, v);
            assert!((back[0] - r).abs() < 1e-4);
            assert!((back[1] - g).abs() < 1e-4);
            assert!((back[2] - b).abs() < 1e-4);
        }
    }

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::default();
        let scene = gen_scene(&spec, Domain::Source, 0).unwrap();
        let img_path = dir.path().join("img.png");
        save_image_png(&scene.image, &img_path).unwrap();
        let img = load_image_png(&img_path).unwrap();
        for (a, b) in scene.image.0.iter().zip(img.0.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "quantization bound");
        }
        let lab_path = dir.path().join("lab.png");
        save_label_png(&scene.labels, &lab_path).unwrap();
        assert_eq!(load_label_png(&lab_path).unwrap(), scene.labels);
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = ToySpec::default();
        let man = gen_dataset(&spec, 3, 2, dir_a.path()).unwrap();
        assert_eq!(man.source.len(), 3);
        assert_eq!(man.target.len(), 2);
        assert_eq!(man.target_eval_labels.len(), 2);
        for rel in man
            .source
            .iter()
            .chain(&man.target)
            .chain(&man.target_eval_labels)
        {
            assert!(dir_a.path().join(rel).is_file(), "missing {rel}");
        }
        for rel in &man.source {
            let lab = DatasetManifest::source_label_path(rel);
            assert_ne!(lab, *rel);
            assert!(dir_a.path().join(&lab).is_file());
        }
        let reloaded = DatasetManifest::load(&dir_a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded, man);

        gen_dataset(&spec, 3, 2, dir_b.path()).unwrap();
        for rel in man.source.iter().chain(&man.target) {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "regeneration must be byte-identical: {rel}");
        }
    }

    #[test]
    fn training_sections_never_reference_eval_labels() {
        let dir = tempfile::tempdir().unwrap();
        let man = gen_dataset(&ToySpec::default(), 2, 2, dir.path()).unwrap();
        for rel in man.source.iter().chain(&man.target) {
            assert!(!rel.contains("eval_only"), "leak: {rel}");
        }
        for rel in &man.target_eval_labels {
            assert!(rel.contains("eval_only"));
        }
    }

    #[test]
    fn dataset_rejects_empty_splits() {
        let dir = tempfile::tempdir().unwrap();
        assert!(gen_dataset(&ToySpec::default(), 0, 2, dir.path()).is_err());
        assert!(gen_dataset(&ToySpec::default(), 2, 0, dir.path()).is_err());
    }
}

//! Synthetic aerial-like scenes with six classes, augmentation and storage.
//!
//! Scenes are painted in layers: cluttered background, road strips, low
//! vegetation blobs, building rectangles, tree crowns and cars. Roofs and
//! roads have nearly the same colour, so telling them apart takes more
//! context than a single pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hmat::{self, HmatArray, HmatData};
use crate::tensor::{DType, Tensor};

pub const NUM_CLASSES: usize = 6;

pub const CLUTTER: u8 = 0;
pub const IMPERVIOUS: u8 = 1;
pub const BUILDING: u8 = 2;
pub const LOW_VEGETATION: u8 = 3;
pub const TREE: u8 = 4;
pub const CAR: u8 = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "clutter",
    "impervious_surface",
    "building",
    "low_vegetation",
    "tree",
    "car",
];

/// Label colours (ISPRS convention), used only for visualisation.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 0, 0],
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
];

/// Mean RGB of each class in the rendered image.
const COLOR_MEANS: [[f64; 3]; NUM_CLASSES] = [
    [0.45, 0.36, 0.28],
    [0.52, 0.52, 0.54],
    [0.58, 0.52, 0.50],
    [0.42, 0.58, 0.30],
    [0.16, 0.38, 0.18],
    [0.80, 0.20, 0.22],
];

const OBJECT_JITTER: f64 = 0.04;
const PIXEL_NOISE: f64 = 0.07;
const TEXTURE_AMPLITUDE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3,H,W]`, f32, values in `[0,1]`.
    pub image: Tensor,
    /// Row-major `H·W` class ids.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Scene {
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    /// Per-pixel colour offset of the object that painted it.
    tint: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, class: u8, tint: [f64; 3], inside: impl Fn(usize, usize) -> bool) {
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(y, x) {
                    self.labels[y * self.w + x] = class;
                    self.tint[y * self.w + x] = tint;
                }
            }
        }
    }
}

fn jitter<R: Rng>(rng: &mut R) -> [f64; 3] {
    let n = Normal::new(0.0, OBJECT_JITTER).expect("valid std");
    [n.sample(rng), n.sample(rng), n.sample(rng)]
}

pub fn generate_scene(seed: u64, h: usize, w: usize) -> Result<Scene> {
    if h < 32 || w < 32 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(Error::usage(format!(
            "scene size {h}x{w} must be at least 32x32 and divisible by 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Canvas {
        h,
        w,
        labels: vec![CLUTTER; h * w],
        tint: vec![[0.0; 3]; h * w],
    };
    let s = h.min(w) as f64;

    let road_w = ((s / 10.0).round() as usize).max(4);
    let mut roads = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let horizontal = rng.random_bool(0.5);
        let span = if horizontal { h } else { w };
        let at = rng.random_range(0..span - road_w);
        let t = jitter(&mut rng);
        roads.push((horizontal, at));
        c.paint(IMPERVIOUS, t, |y, x| {
            let v = if horizontal { y } else { x };
            v >= at && v < at + road_w
        });
    }

    for _ in 0..rng.random_range(2..=4) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let ry = rng.random_range(s / 8.0..s / 5.0);
        let rx = rng.random_range(s / 8.0..s / 5.0);
        let t = jitter(&mut rng);
        c.paint(LOW_VEGETATION, t, |y, x| {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        });
    }

    for _ in 0..rng.random_range(1..=3) {
        let bh = rng.random_range((h / 5)..=(h * 2 / 5));
        let bw = rng.random_range((w / 5)..=(w * 2 / 5));
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        let t = jitter(&mut rng);
        c.paint(BUILDING, t, |y, x| y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw);
    }

    for _ in 0..rng.random_range(3..=6) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = rng.random_range(s / 16.0..s / 9.0);
        let t = jitter(&mut rng);
        c.paint(TREE, t, |y, x| {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            dy * dy + dx * dx <= r * r
        });
    }

    let (short, long) = (((s / 21.0).round() as usize).max(3), ((s / 10.0).round() as usize).max(6));
    for _ in 0..rng.random_range(3..=6) {
        // cars sit on a road, oriented along it
        let &(horizontal, at) = &roads[rng.random_range(0..roads.len())];
        let (ch, cw) = if horizontal { (short, long) } else { (long, short) };
        let (y0, x0) = if horizontal {
            let y0 = (at + rng.random_range(0..=road_w.saturating_sub(ch))).min(h - ch);
            (y0, rng.random_range(0..=w - cw))
        } else {
            let x0 = (at + rng.random_range(0..=road_w.saturating_sub(cw))).min(w - cw);
            (rng.random_range(0..=h - ch), x0)
        };
        let t = jitter(&mut rng);
        c.paint(CAR, t, |y, x| y >= y0 && y < y0 + ch && x >= x0 && x < x0 + cw);
    }

    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let texture: f64 = waves
                .iter()
                .map(|&[fy, fx, phase, weight]| {
                    let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    weight * (arg + phase).sin()
                })
                .sum::<f64>()
                * TEXTURE_AMPLITUDE
                / 1.5;
            let class = c.labels[i] as usize;
            for ch in 0..3 {
                let v = COLOR_MEANS[class][ch] + c.tint[i][ch] + texture + noise.sample(&mut rng);
                image[ch * h * w + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(&[3, h, w], image, DType::F32)?,
        labels: c.labels,
        height: h,
        width: w,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn new(crop_h: usize, crop_w: usize) -> Self {
        AugmentConfig {
            crop_h,
            crop_w,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
        }
    }
}

/// A concrete draw of the random augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOps {
    pub flip: bool,
    pub scale: f64,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

pub fn sample_augment(scene: &Scene, seed: u64, cfg: &AugmentConfig) -> Result<AugmentOps> {
    if !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) {
        return Err(Error::usage(format!(
            "scale range [{}, {}] is invalid",
            cfg.scale_min, cfg.scale_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    };
    let (sh, sw) = (scaled_extent(scene.height, scale), scaled_extent(scene.width, scale));
    if cfg.crop_h > sh || cfg.crop_w > sw {
        return Err(Error::usage(format!(
            "cannot crop {}x{} from a scene scaled to {sh}x{sw}",
            cfg.crop_h, cfg.crop_w
        )));
    }
    Ok(AugmentOps {
        flip,
        scale,
        crop_y: rng.random_range(0..=sh - cfg.crop_h),
        crop_x: rng.random_range(0..=sw - cfg.crop_w),
        crop_h: cfg.crop_h,
        crop_w: cfg.crop_w,
    })
}

/// Flip, then rescale (bilinear for the image, nearest for labels, sharing
/// one pixel-centre mapping), then crop.
pub fn apply_augment(scene: &Scene, ops: &AugmentOps) -> Result<Scene> {
    let (h, w) = (scene.height, scene.width);
    let (sh, sw) = (scaled_extent(h, ops.scale), scaled_extent(w, ops.scale));
    if ops.crop_y + ops.crop_h > sh || ops.crop_x + ops.crop_w > sw || ops.crop_h == 0 || ops.crop_w == 0 {
        return Err(Error::usage(format!(
            "crop {}x{} at ({}, {}) does not fit a {sh}x{sw} scaled scene",
            ops.crop_h, ops.crop_w, ops.crop_y, ops.crop_x
        )));
    }
    let src_x = |x: usize| if ops.flip { w - 1 - x } else { x };
    let (fy, fx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let img = scene.image.data();
    let (ch, cw) = (ops.crop_h, ops.crop_w);
    let mut labels = Vec::with_capacity(ch * cw);
    let mut image = vec![0.0; 3 * ch * cw];
    for oy in 0..ch {
        let ty = (oy + ops.crop_y) as f64 + 0.5;
        let ny = ((ty * fy) as usize).min(h - 1);
        let by = (ty * fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, wy) = (by.floor() as usize, by - by.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..cw {
            let tx = (ox + ops.crop_x) as f64 + 0.5;
            let nx = ((tx * fx) as usize).min(w - 1);
            labels.push(scene.labels[ny * w + src_x(nx)]);
            let bx = (tx * fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, wx) = (bx.floor() as usize, bx - bx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let at = |y: usize, x: usize| img[c * h * w + y * w + src_x(x)];
                let v = (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x1))
                    + wy * ((1.0 - wx) * at(y1, x0) + wx * at(y1, x1));
                image[c * ch * cw + oy * cw + ox] = v;
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(&[3, ch, cw], image, DType::F32)?,
        labels,
        height: ch,
        width: cw,
        seed: scene.seed,
    })
}

pub fn augment(scene: &Scene, seed: u64, cfg: &AugmentConfig) -> Result<Scene> {
    apply_augment(scene, &sample_augment(scene, seed, cfg)?)
}

fn scene_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.img.hmat")), PathBuf::from(format!("{s}.lbl.hmat")))
}

/// Writes `<base>.img.hmat` (f32 `[3,H,W]`) and `<base>.lbl.hmat` (u8 `[H,W]`).
pub fn save_scene(base: &Path, scene: &Scene) -> Result<()> {
    let (img, lbl) = scene_paths(base);
    hmat::write_tensor(&img, &scene.image.to_dtype(DType::F32))?;
    hmat::write(
        &lbl,
        &HmatArray {
            dims: vec![scene.height, scene.width],
            data: HmatData::U8(scene.labels.clone()),
        },
    )
}

pub fn load_scene(base: &Path, seed: u64) -> Result<Scene> {
    let (img, lbl) = scene_paths(base);
    let image = hmat::read(&img)?;
    if !matches!(image.data, HmatData::F32(_)) || image.dims.len() != 3 || image.dims[0] != 3 {
        return Err(Error::format(8, format!("{}: expected f32 [3,H,W]", img.display())));
    }
    let image = image.into_tensor()?;
    let labels = hmat::read(&lbl)?;
    let (dims, labels) = match labels {
        HmatArray {
            dims,
            data: HmatData::U8(v),
        } if dims.len() == 2 => (dims, v),
        _ => return Err(Error::format(8, format!("{}: expected u8 [H,W]", lbl.display()))),
    };
    if dims[..] != image.dims()[1..] {
        return Err(Error::shape(format!(
            "image {:?} and labels {dims:?} disagree",
            image.dims()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Label(format!("{}: class id {bad}", lbl.display())));
    }
    Ok(Scene {
        image,
        labels,
        height: dims[0],
        width: dims[1],
        seed,
    })
}

pub const MANIFEST: &str = "manifest.txt";

pub fn scene_stem(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Per-scene seeds of a dataset, drawn from one master seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

pub fn generate_dataset(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<Scene>> {
    scene_seeds(seed, count)
        .into_iter()
        .map(|s| generate_scene(s, h, w))
        .collect()
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let first = scenes.first().ok_or_else(|| Error::usage("dataset is empty"))?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "count = {}", scenes.len());
    let _ = writeln!(manifest, "H = {}", first.height);
    let _ = writeln!(manifest, "W = {}", first.width);
    for (k, (name, rgb)) in CLASS_NAMES.iter().zip(PALETTE).enumerate() {
        let _ = writeln!(manifest, "palette {k} {name} {} {} {}", rgb[0], rgb[1], rgb[2]);
    }
    for (i, s) in scenes.iter().enumerate() {
        if (s.height, s.width) != (first.height, first.width) {
            return Err(Error::shape("all scenes in a dataset must share one size"));
        }
        let stem = scene_stem(i);
        save_scene(&dir.join(&stem), s)?;
        let _ = writeln!(manifest, "scene {stem} {}", s.seed);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut count = None;
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::format(n as u64, format!("{}: malformed line {}", path.display(), n + 1));
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("scene ") {
            let mut it = rest.split_whitespace();
            let stem = it.next().ok_or_else(bad)?;
            let seed = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            scenes.push(load_scene(&dir.join(stem), seed)?);
        } else if let Some(v) = line.strip_prefix("count = ") {
            count = Some(v.parse::<usize>().map_err(|_| bad())?);
        }
    }
    match count {
        Some(c) if c == scenes.len() && c > 0 => Ok(scenes),
        _ => Err(Error::format(
            0,
            format!("{}: scene count does not match entries", path.display()),
        )),
    }
}

/// Stacks scenes into a `[B,3,H,W]` f64 batch and flat label ids.
pub fn to_batch(scenes: &[&Scene]) -> Result<(Tensor, Vec<usize>)> {
    let first = scenes.first().ok_or_else(|| Error::usage("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("batch scenes differ in size"));
        }
        data.extend_from_slice(s.image.data());
        labels.extend(s.labels.iter().map(|&l| l as usize));
    }
    Ok((Tensor::new(&[scenes.len(), 3, h, w], data, DType::F64)?, labels))
}

//! Seeded synthetic microsurgery-like scenes with exact masks.
//!
//! A scene is drawn back to front: two tubular vessels (left and right
//! halves), two rotated rectangular holders entering from the sides, a
//! curved needle near one holder tip, and a long wire crossing the view.
//! Later shapes overwrite earlier labels, so the thin classes lie on top.
//! Scene `i` of a dataset uses [`SeededRng::for_stream`]`(seed, i)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_mask_png, read_rgb_png, write_mask_png, write_rgb_png};
use crate::mask::{LabelMask, BACKGROUND, CLASS_NAMES, LAV, LNH, NEEDLE, NUM_CLASSES, PALETTE, RAV, RNH, WIRE};
use crate::preprocess::RgbImage;
use crate::rng::SeededRng;

/// Base colours indexed by class id.
pub const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [200.0, 150.0, 140.0],
    [190.0, 60.0, 70.0],
    [170.0, 50.0, 90.0],
    [140.0, 140.0, 150.0],
    [110.0, 115.0, 135.0],
    [235.0, 235.0, 225.0],
    [40.0, 40.0, 60.0],
];

/// Generator settings. Lengths are given for a 64-pixel image and scale with
/// the shorter side; thin-structure widths do not scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub vessel_radius: (f64, f64),
    pub holder_width: (f64, f64),
    pub holder_length: (f64, f64),
    pub needle_radius: (f64, f64),
    /// Arc span in degrees.
    pub needle_span: (f64, f64),
    pub wire_length: (f64, f64),
    /// Thin-structure stroke width in pixels.
    pub thin_width: (f64, f64),
    /// Per-channel colour jitter (0-255 scale).
    pub color_jitter: f64,
    /// Additive Gaussian noise standard deviation (0-255 scale).
    pub noise_sigma: f64,
    /// Peak deviation of the multiplicative illumination ramp from 1.
    pub illumination: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            vessel_radius: (4.0, 7.0),
            holder_width: (4.0, 6.0),
            holder_length: (20.0, 30.0),
            needle_radius: (5.0, 8.0),
            needle_span: (100.0, 160.0),
            wire_length: (70.0, 110.0),
            thin_width: (1.0, 2.0),
            color_jitter: 12.0,
            noise_sigma: 8.0,
            illumination: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("scene size {}x{} is below 16x16", self.height, self.width)));
        }
        let ranges = [
            ("vessel_radius", self.vessel_radius),
            ("holder_width", self.holder_width),
            ("holder_length", self.holder_length),
            ("needle_radius", self.needle_radius),
            ("needle_span", self.needle_span),
            ("wire_length", self.wire_length),
            ("thin_width", self.thin_width),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is not positive and ordered")));
            }
        }
        if self.thin_width.1 > 2.0 {
            return Err(Error::Config("thin_width above 2 px".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 64.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: RgbImage,
    pub mask: LabelMask,
    /// Thin-class pixels drawn over a non-background label.
    pub thin_overlap: usize,
}

type Point = (f64, f64);

fn bezier(p0: Point, p1: Point, p2: Point, t: f64) -> Point {
    let u = 1.0 - t;
    (u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0, u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1)
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    /// Shading factor of the topmost shape per pixel.
    shade: Vec<f64>,
    thin_overlap: usize,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, labels: vec![BACKGROUND; h * w], shade: vec![1.0; h * w], thin_overlap: 0 }
    }

    fn paint(&mut self, y: usize, x: usize, class: u8, shade: f64) {
        let i = y * self.w + x;
        if (class == NEEDLE || class == WIRE) && self.labels[i] != BACKGROUND && self.labels[i] != class {
            self.thin_overlap += 1;
        }
        self.labels[i] = class;
        self.shade[i] = shade;
    }

    /// Paints pixels whose centre lies within `radius` of the sampled curve;
    /// shading darkens towards the stroke edge by up to `edge_dark`.
    fn stroke(&mut self, samples: &[Point], radius: f64, class: u8, edge_dark: f64) {
        let mut dist = vec![f64::INFINITY; self.h * self.w];
        for &(cy, cx) in samples {
            let y0 = (cy - radius).floor().max(0.0) as usize;
            let x0 = (cx - radius).floor().max(0.0) as usize;
            let y1 = ((cy + radius).ceil() as isize).min(self.h as isize - 1);
            let x1 = ((cx + radius).ceil() as isize).min(self.w as isize - 1);
            if y1 < 0 || x1 < 0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let i = y * self.w + x;
                    if d <= radius && d < dist[i] {
                        dist[i] = d;
                    }
                }
            }
        }
        for (i, &d) in dist.iter().enumerate() {
            if d.is_finite() {
                let r = d / radius;
                self.paint(i / self.w, i % self.w, class, 1.0 - edge_dark * r * r);
            }
        }
    }

    /// Rectangle of half-extents `(half_len, half_wid)` centred at `c`, rotated by `angle`.
    fn rect(&mut self, c: Point, angle: f64, half_len: f64, half_wid: f64, class: u8) {
        let (s, co) = angle.sin_cos();
        for y in 0..self.h {
            for x in 0..self.w {
                let (dy, dx) = (y as f64 - c.0, x as f64 - c.1);
                let along = dx * co + dy * s;
                let across = -dx * s + dy * co;
                if along.abs() <= half_len && across.abs() <= half_wid {
                    let shade = 1.1 - 0.3 * (across / half_wid).abs();
                    self.paint(y, x, class, shade);
                }
            }
        }
    }
}

/// Points along a curve with spacing at most a quarter pixel.
fn sample_curve(f: impl Fn(f64) -> Point, approx_len: f64) -> Vec<Point> {
    let n = (approx_len * 4.0).ceil().max(8.0) as usize;
    (0..=n).map(|k| f(k as f64 / n as f64)).collect()
}

fn curve_length(samples: &[Point]) -> f64 {
    samples.windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).sum()
}

/// Deterministic scene `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> LabeledScene {
    let mut rng = SeededRng::for_stream(spec.seed, index);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let s = spec.scale();
    let mut cv = Canvas::new(h, w);

    // Vessels: roughly vertical tubes, one per half.
    for (class, lo, hi) in [(LAV, 0.1, 0.45), (RAV, 0.55, 0.9)] {
        let r = rng.range(spec.vessel_radius.0, spec.vessel_radius.1) * s;
        let p0 = (-r, rng.range(lo, hi) * wf);
        let p1 = (hf * 0.5, rng.range(lo, hi) * wf);
        let p2 = (hf + r, rng.range(lo, hi) * wf);
        let samples = sample_curve(|t| bezier(p0, p1, p2, t), hf * 1.5);
        cv.stroke(&samples, r, class, 0.35);
    }

    // Holders enter from the left and right edges; remember their tips.
    let mut tips = Vec::new();
    for (class, from_left) in [(LNH, true), (RNH, false)] {
        let len = rng.range(spec.holder_length.0, spec.holder_length.1) * s;
        let wid = rng.range(spec.holder_width.0, spec.holder_width.1) * s;
        let tilt = rng.range(-0.6, 0.6);
        let angle = if from_left { tilt } else { std::f64::consts::PI + tilt };
        let edge = (rng.range(0.25, 0.75) * hf, if from_left { 0.0 } else { wf - 1.0 });
        let (sa, ca) = angle.sin_cos();
        let centre = (edge.0 + sa * len * 0.5, edge.1 + ca * len * 0.5);
        cv.rect(centre, angle, len * 0.5 + 2.0 * s, wid * 0.5, class);
        tips.push((edge.0 + sa * len, edge.1 + ca * len));
    }

    // Needle: an arc next to one holder tip.
    let tip = tips[rng.below(2)];
    let nr = rng.range(spec.needle_radius.0, spec.needle_radius.1) * s;
    let span = rng.range(spec.needle_span.0, spec.needle_span.1).to_radians();
    let start = rng.range(0.0, std::f64::consts::TAU);
    let centre = (
        (tip.0 + rng.range(-0.5, 0.5) * nr).clamp(nr, hf - 1.0 - nr),
        (tip.1 + rng.range(-0.5, 0.5) * nr).clamp(nr, wf - 1.0 - nr),
    );
    let needle_w = rng.range(spec.thin_width.0, spec.thin_width.1);
    let samples = sample_curve(
        |t| {
            let a = start + span * t;
            (centre.0 + nr * a.sin(), centre.1 + nr * a.cos())
        },
        nr * span,
    );
    cv.stroke(&samples, needle_w * 0.5, NEEDLE, 0.0);

    // Wire: a quadratic curve of the requested length through the view.
    let target = rng.range(spec.wire_length.0, spec.wire_length.1) * s;
    let mid = (rng.range(0.3, 0.7) * hf, rng.range(0.3, 0.7) * wf);
    let dir = rng.range(0.0, std::f64::consts::PI);
    let bend = rng.range(-0.35, 0.35);
    let wire_w = rng.range(spec.thin_width.0, spec.thin_width.1);
    let (sd, cd) = dir.sin_cos();
    let build = |half: f64| {
        let p0 = (mid.0 - sd * half, mid.1 - cd * half);
        let p2 = (mid.0 + sd * half, mid.1 + cd * half);
        let p1 = (mid.0 + cd * bend * 2.0 * half, mid.1 - sd * bend * 2.0 * half);
        move |t: f64| bezier(p0, p1, p2, t)
    };
    let chord = target / curve_length(&sample_curve(build(0.5), 2.0 * target)) * 0.5;
    let samples = sample_curve(build(chord), 2.0 * target);
    let samples: Vec<Point> = samples.into_iter().filter(|&(y, x)| y > -1.0 && y < hf && x > -1.0 && x < wf).collect();
    cv.stroke(&samples, wire_w * 0.5, WIRE, 0.0);

    LabeledScene {
        image: render(spec, &cv, &mut rng),
        mask: LabelMask::new(h, w, cv.labels).expect("canvas extents"),
        thin_overlap: cv.thin_overlap,
    }
}

fn render(spec: &SceneSpec, cv: &Canvas, rng: &mut SeededRng) -> RgbImage {
    let colors: Vec<[f64; 3]> =
        BASE_COLORS.iter().map(|c| c.map(|v| v + rng.range(-spec.color_jitter, spec.color_jitter))).collect();
    let dir = rng.range(0.0, std::f64::consts::TAU);
    let (sd, cd) = dir.sin_cos();
    let amp = spec.illumination;
    // Low-frequency background texture.
    let (fy, fx, ph) = (rng.range(1.0, 3.0), rng.range(1.0, 3.0), rng.range(0.0, std::f64::consts::TAU));
    let (h, w) = (cv.h, cv.w);
    let mut img = RgbImage::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
            let light = 1.0 + amp * 2.0 * (u * sd + v * cd).clamp(-0.5, 0.5);
            let i = y * w + x;
            let class = cv.labels[i] as usize;
            let texture = if class == BACKGROUND as usize {
                1.0 + 0.06 * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin()
            } else {
                1.0
            };
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = colors[class][c] * cv.shade[i] * texture * light + rng.normal() * spec.noise_sigma;
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

/// Per-class pixel fractions and overlap counts of a set of masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    /// Fraction of all pixels per class, in `[0, 1]`.
    pub pixel_fraction: Vec<f64>,
    /// Number of scenes containing each class.
    pub scenes_with_class: Vec<usize>,
}

pub fn dataset_stats<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> DatasetStats {
    let mut counts = [0u64; NUM_CLASSES];
    let mut present = vec![0usize; NUM_CLASSES];
    let mut scenes = 0;
    for m in masks {
        scenes += 1;
        let mut seen = [false; NUM_CLASSES];
        for &l in m.labels() {
            counts[l as usize] += 1;
            seen[l as usize] = true;
        }
        for (p, s) in present.iter_mut().zip(seen) {
            *p += s as usize;
        }
    }
    let total: u64 = counts.iter().sum();
    DatasetStats {
        scenes,
        pixel_fraction: counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect(),
        scenes_with_class: present,
    }
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.png"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}_mask.png"))
}

pub fn write_scene(dir: &Path, index: usize, scene: &LabeledScene) -> Result<()> {
    write_rgb_png(image_path(dir, index), &scene.image)?;
    write_mask_png(mask_path(dir, index), &scene.mask)
}

/// Reads a scene; the overlap count is not stored and reads as zero.
pub fn read_scene(dir: &Path, index: usize) -> Result<LabeledScene> {
    let image = read_rgb_png(image_path(dir, index))?;
    let mask = read_mask_png(mask_path(dir, index))?;
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Format(format!("scene {index:05}: image and mask extents differ")));
    }
    Ok(LabeledScene { image, mask, thin_overlap: 0 })
}

/// Number of training scenes for a split fraction, rounded to nearest.
pub fn train_count(count: usize, split: f64) -> usize {
    ((count as f64 * split).round() as usize).min(count)
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub count: usize,
    pub split: f64,
    /// Class names and palette colours by id.
    pub classes: Vec<ClassEntry>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

impl Manifest {
    /// First `round(count * split)` indices train, the rest test.
    pub fn new(spec: SceneSpec, count: usize, split: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split) {
            return Err(Error::Config(format!("split {split} outside [0, 1]")));
        }
        let n = train_count(count, split);
        Ok(Self {
            spec,
            count,
            split,
            classes: (0..NUM_CLASSES)
                .map(|c| ClassEntry { id: c as u8, name: CLASS_NAMES[c].to_string(), color: PALETTE[c] })
                .collect(),
            train: (0..n).collect(),
            test: (n..count).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))
    }
}

/// Generates `count` scenes into `dir` and writes the manifest.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize, split: f64) -> Result<Manifest> {
    spec.validate()?;
    let manifest = Manifest::new(spec.clone(), count, split)?;
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        write_scene(dir, i, &generate_scene(spec, i as u64))?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

//! Synthetic shapes dataset and the two-view augmentation pipeline.
//!
//! Views are produced in a fixed order: random resized crop, bilinear resize,
//! horizontal flip, then photometric perturbations. Photometric operations
//! draw from their own random stream, so the geometry of a view (and of any
//! later view drawn from the same parent stream) does not depend on which
//! photometric operations are enabled.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box, ViewGeometry};
use crate::rng::{self, child_rng};
use crate::tensor::interp;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_CLASSES] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether the point `(px, py)` lies in a shape of this kind with the
    /// given center and bounding side.
    fn covers(self, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
        let half = size / 2.0;
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Triangle => {
                // Apex at top-center, base along the bottom edge.
                if dy < -half || dy > half {
                    return false;
                }
                let t = (dy + half) / size;
                dx.abs() <= t * half
            }
            ShapeKind::Cross => {
                let arm = size / 6.0;
                (dx.abs() <= half && dy.abs() <= arm) || (dy.abs() <= half && dx.abs() <= arm)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub rect: Box,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub gt: Vec<GtObject>,
}

impl SyntheticImage {
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// How shape colors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeColors {
    /// Independent saturated color per shape.
    Random,
    /// One saturated color shared by all shapes of an image.
    Image,
    /// Independent gray level per shape.
    Gray,
}

impl ShapeColors {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeColors::Random => "random",
            ShapeColors::Image => "image",
            ShapeColors::Gray => "gray",
        }
    }
}

impl std::str::FromStr for ShapeColors {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ShapeColors::Random),
            "image" => Ok(ShapeColors::Image),
            "gray" => Ok(ShapeColors::Gray),
            _ => Err(Error::Config(format!("shape colors must be random, image or gray, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub shape_colors: ShapeColors,
    /// Scale of background stripes and pixel noise.
    pub texture: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            min_shapes: 1,
            max_shapes: 4,
            min_size: 16.0,
            max_size: 32.0,
            shape_colors: ShapeColors::Random,
            texture: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config(format!(
                "canvas must be at least 64x64, got {}x{}",
                self.width, self.height
            )));
        }
        if self.min_shapes < 1 || self.max_shapes > 4 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("shape count must satisfy 1 <= min <= max <= 4".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size)
            || self.max_size > self.width.min(self.height) as f64
        {
            return Err(Error::Config("shape size range must fit the canvas".into()));
        }
        if !(0.0..=4.0).contains(&self.texture) {
            return Err(Error::Config(format!("texture scale must lie in [0, 4], got {}", self.texture)));
        }
        Ok(())
    }
}

/// One placed shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

impl ShapeSpec {
    pub fn bbox(&self) -> Box {
        Box {
            x: self.cx - self.size / 2.0,
            y: self.cy - self.size / 2.0,
            w: self.size,
            h: self.size,
        }
    }
}

/// Background description: base color plus an oriented sinusoidal texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub stripe_amp: f64,
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub noise_amp: f64,
}

impl Background {
    pub fn flat(base: [f64; 3]) -> Self {
        Background {
            base,
            stripe_amp: 0.0,
            stripe_freq: 0.0,
            stripe_angle: 0.0,
            noise_amp: 0.0,
        }
    }
}

/// Renders a scene with 2×2 supersampling. Boxes are the exact geometric
/// extents of the shapes.
pub fn render_scene<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    bg: &Background,
    shapes: &[ShapeSpec],
    rng: &mut R,
) -> SyntheticImage {
    let plane = width * height;
    let mut px = vec![0.0; 3 * plane];
    let (s, c) = bg.stripe_angle.sin_cos();
    for y in 0..height {
        for x in 0..width {
            let t = (x as f64 * c + y as f64 * s) * bg.stripe_freq;
            let stripe = bg.stripe_amp * (t * std::f64::consts::TAU).sin();
            let noise = if bg.noise_amp > 0.0 {
                bg.noise_amp * (rng.gen::<f64>() * 2.0 - 1.0)
            } else {
                0.0
            };
            for ch in 0..3 {
                px[ch * plane + y * width + x] = (bg.base[ch] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    const SUB: [f64; 2] = [0.25, 0.75];
    for sh in shapes {
        let bb = sh.bbox();
        let x0 = bb.x.floor().max(0.0) as usize;
        let y0 = bb.y.floor().max(0.0) as usize;
        let x1 = (bb.right().ceil() as usize).min(width);
        let y1 = (bb.bottom().ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cover = 0.0;
                for sy in SUB {
                    for sx in SUB {
                        if sh.kind.covers(sh.cx, sh.cy, sh.size, x as f64 + sx, y as f64 + sy) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    for ch in 0..3 {
                        let p = &mut px[ch * plane + y * width + x];
                        *p = *p * (1.0 - cover) + sh.color[ch] * cover;
                    }
                }
            }
        }
    }
    let gt = shapes
        .iter()
        .map(|sh| GtObject {
            rect: sh.bbox(),
            class_id: sh.kind.class_id(),
        })
        .collect();
    SyntheticImage {
        pixels: Tensor::new(&[3, height, width], px).expect("sized buffer"),
        gt,
    }
}

fn hsv_color<R: Rng + ?Sized>(rng: &mut R, sat: (f64, f64), val: (f64, f64)) -> [f64; 3] {
    hsv_to_rgb(
        rng.gen::<f64>(),
        rng.gen_range(sat.0..=sat.1),
        rng.gen_range(val.0..=val.1),
    )
}

/// Random scene: textured background and 1–4 non-overlapping shapes placed
/// fully inside the canvas.
pub fn generate_image<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> SyntheticImage {
    let bg = Background {
        base: hsv_color(rng, (0.0, 0.4), (0.2, 0.8)),
        stripe_amp: cfg.texture * rng.gen_range(0.0..0.12),
        stripe_freq: rng.gen_range(0.05..0.25),
        stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
        noise_amp: cfg.texture * 0.04,
    };
    let shared = hsv_color(rng, (0.5, 1.0), (0.5, 1.0));
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 100 {
        attempts += 1;
        let size = rng.gen_range(cfg.min_size..=cfg.max_size);
        let half = size / 2.0;
        let cand = ShapeSpec {
            kind: ShapeKind::ALL[rng.gen_range(0..NUM_CLASSES)],
            cx: rng.gen_range(half..=cfg.width as f64 - half),
            cy: rng.gen_range(half..=cfg.height as f64 - half),
            size,
            color: match cfg.shape_colors {
                ShapeColors::Random => hsv_color(rng, (0.5, 1.0), (0.5, 1.0)),
                ShapeColors::Image => shared,
                ShapeColors::Gray => [rng.gen_range(0.0..1.0); 3],
            },
        };
        let bb = cand.bbox();
        if shapes.iter().all(|s| s.bbox().intersection(&bb).is_none()) {
            shapes.push(cand);
        }
    }
    render_scene(cfg.width, cfg.height, &bg, &shapes, rng)
}

/// `n` scenes, image `i` drawn from the stream `(seed, dataset, i)`.
pub fn generate_dataset(n: usize, cfg: &SceneConfig, seed: u64) -> Vec<SyntheticImage> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = child_rng(seed, &[rng::STREAM_DATASET, i as u64]);
            generate_image(cfg, &mut r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub out_size: usize,
    pub crop_area_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub flip_p: f64,
    pub color_jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    /// Per view (first, second).
    pub blur_p: [f64; 2],
    pub blur_sigma: (f64, f64),
    pub solarize_p: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            out_size: 64,
            crop_area_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            color_jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: [1.0, 0.1],
            blur_sigma: (0.1, 2.0),
            solarize_p: [0.0, 0.2],
        }
    }
}

impl AugmentParams {
    /// Crop + resize only: no flip and no photometric changes.
    pub fn geometric_only(out_size: usize) -> Self {
        AugmentParams {
            out_size,
            flip_p: 0.0,
            color_jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: [0.0, 0.0],
            solarize_p: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn without_photometric(&self) -> Self {
        AugmentParams {
            color_jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: [0.0, 0.0],
            solarize_p: [0.0, 0.0],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_p,
            self.color_jitter_p,
            self.grayscale_p,
            self.blur_p[0],
            self.blur_p[1],
            self.solarize_p[0],
            self.solarize_p[1],
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let (a0, a1) = self.crop_area_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("crop area range ({a0}, {a1}) is not ordered within (0, 1]")));
        }
        let (r0, r1) = self.aspect_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("aspect range ({r0}, {r1}) is not ordered")));
        }
        if self.out_size == 0 {
            return Err(Error::Config("view size must be positive".into()));
        }
        let mags = [self.brightness, self.contrast, self.saturation];
        if mags.iter().any(|m| !(0.0..=1.0).contains(m)) || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("color jitter magnitudes out of range".into()));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Random crop rectangle: area fraction uniform in `crop_area_range`,
/// aspect ratio log-uniform in `aspect_range`. Falls back to the full image
/// when ten draws do not fit.
pub fn sample_crop<R: Rng + ?Sized>(width: usize, height: usize, params: &AugmentParams, rng: &mut R) -> Box {
    let (wf, hf) = (width as f64, height as f64);
    let area = wf * hf;
    let (lr0, lr1) = (params.aspect_range.0.ln(), params.aspect_range.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(params.crop_area_range.0..=params.crop_area_range.1);
        let ratio = if lr1 > lr0 { rng.gen_range(lr0..=lr1) } else { lr0 }.exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w <= wf && h <= hf {
            let x = rng.gen::<f64>() * (wf - w);
            let y = rng.gen::<f64>() * (hf - h);
            return Box { x, y, w, h };
        }
    }
    Box {
        x: 0.0,
        y: 0.0,
        w: wf,
        h: hf,
    }
}

/// Bilinear resize of the crop region to `out_w × out_h`, sampling the source
/// at the pre-image of each output pixel center.
pub fn resize_crop(pixels: &Tensor, crop: &Box, out_w: usize, out_h: usize) -> Tensor {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let sx = crop.w / out_w as f64;
    let sy = crop.h / out_h as f64;
    let mut out = vec![0.0; c * out_w * out_h];
    for oy in 0..out_h {
        let y = crop.y + (oy as f64 + 0.5) * sy;
        for ox in 0..out_w {
            let x = crop.x + (ox as f64 + 0.5) * sx;
            let taps = interp::bilinear_taps(x, y, w, h);
            for ch in 0..c {
                let plane = &pixels.data()[ch * h * w..(ch + 1) * h * w];
                out[ch * out_w * out_h + oy * out_w + ox] = taps.iter().map(|&(i, t)| plane[i] * t).sum();
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized buffer")
}

pub fn hflip(pixels: &mut Tensor) {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let d = pixels.data_mut();
    for ch in 0..c {
        for y in 0..h {
            d[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
        }
    }
}

/// Which photometric operations were applied to a view, with their drawn magnitudes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhotometricTrace {
    pub jitter: Option<[f64; 4]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarized: bool,
}

/// Draws one augmented view. `view` selects the per-view probabilities
/// (0 = first view, 1 = second view).
pub fn sample_view<R: RngCore + ?Sized>(
    pixels: &Tensor,
    params: &AugmentParams,
    view: usize,
    rng: &mut R,
) -> (Tensor, ViewGeometry) {
    let (t, g, _) = sample_view_traced(pixels, params, view, rng);
    (t, g)
}

pub fn sample_view_traced<R: RngCore + ?Sized>(
    pixels: &Tensor,
    params: &AugmentParams,
    view: usize,
    rng: &mut R,
) -> (Tensor, ViewGeometry, PhotometricTrace) {
    let mut geo_rng = crate::rng::seeded(rng.next_u64());
    let mut photo_rng = crate::rng::seeded(rng.next_u64());
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let crop = sample_crop(w, h, params, &mut geo_rng);
    let flip = geo_rng.gen::<f64>() < params.flip_p;
    let geom = ViewGeometry {
        crop,
        out_w: params.out_size,
        out_h: params.out_size,
        hflip: flip,
    };
    let mut out = resize_crop(pixels, &crop, params.out_size, params.out_size);
    if flip {
        hflip(&mut out);
    }
    let trace = apply_photometric(&mut out, params, view, &mut photo_rng);
    (out, geom, trace)
}

fn apply_photometric<R: Rng + ?Sized>(
    img: &mut Tensor,
    p: &AugmentParams,
    view: usize,
    rng: &mut R,
) -> PhotometricTrace {
    let mut trace = PhotometricTrace::default();
    if rng.gen::<f64>() < p.color_jitter_p {
        let b = rng.gen_range((1.0 - p.brightness).max(0.0)..=1.0 + p.brightness);
        let c = rng.gen_range((1.0 - p.contrast).max(0.0)..=1.0 + p.contrast);
        let s = rng.gen_range((1.0 - p.saturation).max(0.0)..=1.0 + p.saturation);
        let hshift = rng.gen_range(-p.hue..=p.hue);
        adjust_brightness(img, b);
        adjust_contrast(img, c);
        adjust_saturation(img, s);
        adjust_hue(img, hshift);
        trace.jitter = Some([b, c, s, hshift]);
    }
    if rng.gen::<f64>() < p.grayscale_p {
        to_grayscale(img);
        trace.grayscale = true;
    }
    if rng.gen::<f64>() < p.blur_p[view.min(1)] {
        let sigma = rng.gen_range(p.blur_sigma.0..=p.blur_sigma.1);
        gaussian_blur(img, sigma);
        trace.blur_sigma = Some(sigma);
    }
    if rng.gen::<f64>() < p.solarize_p[view.min(1)] {
        solarize(img, 0.5);
        trace.solarized = true;
    }
    trace
}

fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[0], img.shape()[1] * img.shape()[2])
}

fn clamp01(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(img: &mut Tensor, factor: f64) {
    for v in img.data_mut() {
        *v *= factor;
    }
    clamp01(img);
}

/// Blends with the mean gray level of the whole image.
pub fn adjust_contrast(img: &mut Tensor, factor: f64) {
    let (c, plane) = dims(img);
    if c != 3 {
        return;
    }
    let d = img.data();
    let mean = (0..plane)
        .map(|i| luma(d[i], d[plane + i], d[2 * plane + i]))
        .sum::<f64>()
        / plane as f64;
    for v in img.data_mut() {
        *v = (*v - mean) * factor + mean;
    }
    clamp01(img);
}

/// Blends each pixel with its own gray level.
pub fn adjust_saturation(img: &mut Tensor, factor: f64) {
    let (c, plane) = dims(img);
    if c != 3 {
        return;
    }
    let d = img.data_mut();
    for i in 0..plane {
        let g = luma(d[i], d[plane + i], d[2 * plane + i]);
        for ch in 0..3 {
            let v = &mut d[ch * plane + i];
            *v = (g + (*v - g) * factor).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` turns (wrapping), in HSV space.
pub fn adjust_hue(img: &mut Tensor, shift: f64) {
    let (c, plane) = dims(img);
    if c != 3 || shift == 0.0 {
        return;
    }
    let d = img.data_mut();
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let [r, g, b] = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        d[i] = r.clamp(0.0, 1.0);
        d[plane + i] = g.clamp(0.0, 1.0);
        d[2 * plane + i] = b.clamp(0.0, 1.0);
    }
}

pub fn to_grayscale(img: &mut Tensor) {
    let (c, plane) = dims(img);
    if c != 3 {
        return;
    }
    let d = img.data_mut();
    for i in 0..plane {
        let g = luma(d[i], d[plane + i], d[2 * plane + i]).clamp(0.0, 1.0);
        d[i] = g;
        d[plane + i] = g;
        d[2 * plane + i] = g;
    }
}

/// Separable Gaussian blur with a `ceil(3σ)` radius and clamped borders.
pub fn gaussian_blur(img: &mut Tensor, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut img.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius as isize, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - radius as isize, h) * w + x])
                    .sum();
            }
        }
    }
    clamp01(img);
}

/// Inverts every value at or above `threshold`.
pub fn solarize(img: &mut Tensor, threshold: f64) {
    for v in img.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    clamp01(img);
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d <= 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx <= 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

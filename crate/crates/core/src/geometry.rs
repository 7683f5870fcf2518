//! View-transform algebra.
//!
//! All boxes live in continuous pixel coordinates with the origin at the
//! top-left corner and half-open extent `[x, x + w) × [y, y + h)`. A box is
//! always tied to one frame: the source image, one augmented view, or the
//! encoder feature grid of a view. Only crop, resize and horizontal flip are
//! supported, so a rectangle in one frame maps to exactly one rectangle in
//! every other frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when testing containment of mapped boxes; mapping involves a
/// multiply and a divide, so exact comparisons would reject boxes that touch
/// the view border.
const CONTAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Box { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x, y, w, h })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Containment with a small relative slack on every edge.
    pub fn contains(&self, other: &Box) -> bool {
        let tol = CONTAIN_EPS * (1.0 + self.w.abs().max(self.h.abs()));
        other.x >= self.x - tol
            && other.y >= self.y - tol
            && other.right() <= self.right() + tol
            && other.bottom() <= self.bottom() + tol
    }

    /// Rectangle intersection, `None` when the overlap has zero area.
    pub fn intersection(&self, other: &Box) -> Option<Box> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            Some(Box {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            })
        } else {
            None
        }
    }
}

/// Geometric part of one augmentation: a crop of the source image resized to
/// `out_w × out_h`, optionally mirrored left-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub crop: Box,
    pub out_w: usize,
    pub out_h: usize,
    pub hflip: bool,
}

impl ViewGeometry {
    /// The whole image, unscaled and unflipped.
    pub fn identity(width: usize, height: usize) -> Self {
        ViewGeometry {
            crop: Box {
                x: 0.0,
                y: 0.0,
                w: width as f64,
                h: height as f64,
            },
            out_w: width,
            out_h: height,
            hflip: false,
        }
    }

    pub fn view_rect(&self) -> Box {
        Box {
            x: 0.0,
            y: 0.0,
            w: self.out_w as f64,
            h: self.out_h as f64,
        }
    }

    pub fn scale_x(&self) -> f64 {
        self.out_w as f64 / self.crop.w
    }

    pub fn scale_y(&self) -> f64 {
        self.out_h as f64 / self.crop.h
    }

    /// Source-image coordinate of a continuous view coordinate (point map).
    pub fn view_point_to_source(&self, vx: f64, vy: f64) -> (f64, f64) {
        let ux = if self.hflip { self.out_w as f64 - vx } else { vx };
        (
            self.crop.x + ux / self.scale_x(),
            self.crop.y + vy / self.scale_y(),
        )
    }
}

/// The rectangle visible in both views, in source coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionRegion {
    pub rect: Box,
}

impl IntersectionRegion {
    pub fn width(&self) -> f64 {
        self.rect.w
    }

    pub fn height(&self) -> f64 {
        self.rect.h
    }

    pub fn fits(&self, min_w: f64, min_h: f64) -> bool {
        self.rect.w >= min_w && self.rect.h >= min_h
    }
}

/// Relation between an encoder input and its output feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGridSpec {
    pub in_w: usize,
    pub in_h: usize,
    pub feat_w: usize,
    pub feat_h: usize,
}

impl FeatureGridSpec {
    pub fn new(in_w: usize, in_h: usize, feat_w: usize, feat_h: usize) -> Result<Self> {
        if feat_w == 0 || feat_h == 0 || in_w % feat_w != 0 || in_h % feat_h != 0 {
            return Err(Error::Shape(format!(
                "input {in_w}x{in_h} is not an integer multiple of feature grid {feat_w}x{feat_h}"
            )));
        }
        Ok(FeatureGridSpec {
            in_w,
            in_h,
            feat_w,
            feat_h,
        })
    }

    pub fn stride_x(&self) -> f64 {
        (self.in_w / self.feat_w) as f64
    }

    pub fn stride_y(&self) -> f64 {
        (self.in_h / self.feat_h) as f64
    }
}

/// One matched region: the box in the source image and its image in each view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiPair {
    pub box_src: Box,
    pub box_v1: Box,
    pub box_v2: Box,
}

/// Result of RoI rejection sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub boxes: Vec<Box>,
    /// Set when fewer than the requested number of boxes survived before the
    /// attempt budget ran out.
    pub truncated: bool,
    pub attempts: usize,
}

pub fn intersect_views(v1: &ViewGeometry, v2: &ViewGeometry) -> Option<IntersectionRegion> {
    v1.crop
        .intersection(&v2.crop)
        .map(|rect| IntersectionRegion { rect })
}

/// Draws one box inside the intersection region: width and height uniform
/// between the minimum and the region extent, position uniform over the
/// remaining slack.
pub fn sample_box<R: Rng + ?Sized>(
    is: &IntersectionRegion,
    min_w: f64,
    min_h: f64,
    rng: &mut R,
) -> Result<Box> {
    if !is.fits(min_w, min_h) || min_w <= 0.0 || min_h <= 0.0 {
        return Err(Error::IntersectionTooSmall {
            width: is.rect.w,
            height: is.rect.h,
            min_w,
            min_h,
        });
    }
    let w = uniform(rng, min_w, is.rect.w);
    let x = uniform(rng, 0.0, is.rect.w - w);
    let h = uniform(rng, min_h, is.rect.h);
    let y = uniform(rng, 0.0, is.rect.h - h);
    let b = Box {
        x: is.rect.x + x,
        y: is.rect.y + y,
        w,
        h,
    };
    debug_assert!(is.rect.contains(&b));
    Ok(b)
}

/// Closed-interval uniform draw; degenerate ranges return the endpoint.
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.gen::<f64>()
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Samples up to `k` boxes, rejecting any candidate whose IoU with an already
/// accepted box exceeds `iou_thr`.
pub fn sample_rois<R: Rng + ?Sized>(
    is: &IntersectionRegion,
    k: usize,
    iou_thr: Option<f64>,
    min_w: f64,
    min_h: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<RoiSample> {
    let mut boxes: Vec<Box> = Vec::with_capacity(k);
    let mut attempts = 0;
    while boxes.len() < k && attempts < max_attempts {
        attempts += 1;
        let cand = sample_box(is, min_w, min_h, rng)?;
        let keep = match iou_thr {
            Some(thr) => boxes.iter().all(|b| iou(b, &cand) <= thr),
            None => true,
        };
        if keep {
            boxes.push(cand);
        }
    }
    if boxes.is_empty() {
        return Err(Error::SamplingStarved { attempts });
    }
    let truncated = boxes.len() < k;
    if truncated {
        log::debug!("roi sampling truncated: {}/{} boxes after {attempts} attempts", boxes.len(), k);
    }
    Ok(RoiSample {
        boxes,
        truncated,
        attempts,
    })
}

pub fn map_box_to_view(b: &Box, v: &ViewGeometry) -> Result<Box> {
    if !v.crop.contains(b) {
        return Err(Error::BoxNotVisible(format!("{b:?} outside crop {:?}", v.crop)));
    }
    let sx = v.scale_x();
    let sy = v.scale_y();
    let w = b.w * sx;
    let h = b.h * sy;
    let mut x = (b.x - v.crop.x) * sx;
    let y = (b.y - v.crop.y) * sy;
    if v.hflip {
        x = v.out_w as f64 - (x + w);
    }
    let out = Box { x, y, w, h };
    debug_assert!(v.view_rect().contains(&out));
    Ok(out)
}

/// Inverse of [`map_box_to_view`].
pub fn map_box_from_view(b: &Box, v: &ViewGeometry) -> Box {
    let sx = v.scale_x();
    let sy = v.scale_y();
    let x = if v.hflip {
        v.out_w as f64 - (b.x + b.w)
    } else {
        b.x
    };
    Box {
        x: v.crop.x + x / sx,
        y: v.crop.y + b.y / sy,
        w: b.w / sx,
        h: b.h / sy,
    }
}

pub fn map_box_to_grid(b: &Box, g: &FeatureGridSpec) -> Box {
    let sx = g.stride_x();
    let sy = g.stride_y();
    Box {
        x: b.x / sx,
        y: b.y / sy,
        w: b.w / sx,
        h: b.h / sy,
    }
}

pub fn map_box_from_grid(b: &Box, g: &FeatureGridSpec) -> Box {
    let sx = g.stride_x();
    let sy = g.stride_y();
    Box {
        x: b.x * sx,
        y: b.y * sy,
        w: b.w * sx,
        h: b.h * sy,
    }
}

/// Maps a source box into both views at once.
pub fn map_pair(b: &Box, v1: &ViewGeometry, v2: &ViewGeometry) -> Result<RoiPair> {
    Ok(RoiPair {
        box_src: *b,
        box_v1: map_box_to_view(b, v1)?,
        box_v2: map_box_to_view(b, v2)?,
    })
}

/// Perturbs a box: each side length scales by `1 + u` and each corner moves
/// by `u'` times the side, with `u, u' ~ Unif(-magnitude, magnitude)`. The
/// result is shifted (not cropped) back inside `bounds`, so side lengths only
/// change when the jittered box is larger than the bounds themselves.
///
/// An infinite magnitude discards the input and draws a fresh box uniformly
/// inside `bounds`.
pub fn jitter_box<R: Rng + ?Sized>(b: &Box, magnitude: f64, bounds: &Box, rng: &mut R) -> Box {
    if magnitude.is_infinite() {
        return random_box_in(bounds, rng);
    }
    if magnitude <= 0.0 {
        return *b;
    }
    let draw = |rng: &mut R| uniform(rng, -magnitude, magnitude);
    let w = b.w * (1.0 + draw(rng));
    let h = b.h * (1.0 + draw(rng));
    let x = b.x + b.w * draw(rng);
    let y = b.y + b.h * draw(rng);
    let (x, w) = clamp_span(x, w, bounds.x, bounds.w);
    let (y, h) = clamp_span(y, h, bounds.y, bounds.h);
    Box { x, y, w, h }
}

fn clamp_span(start: f64, len: f64, lo: f64, extent: f64) -> (f64, f64) {
    let min_len = 1.0_f64.min(extent);
    let len = len.max(min_len);
    if len >= extent {
        return (lo, extent);
    }
    (start.clamp(lo, lo + extent - len), len)
}

fn random_box_in<R: Rng + ?Sized>(bounds: &Box, rng: &mut R) -> Box {
    let min_w = 1.0_f64.min(bounds.w);
    let min_h = 1.0_f64.min(bounds.h);
    let w = uniform(rng, min_w, bounds.w);
    let h = uniform(rng, min_h, bounds.h);
    Box {
        x: bounds.x + uniform(rng, 0.0, bounds.w - w),
        y: bounds.y + uniform(rng, 0.0, bounds.h - h),
        w,
        h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> Box {
        Box::new(x, y, w, h).unwrap()
    }

    fn view(crop: Box, out: usize, hflip: bool) -> ViewGeometry {
        ViewGeometry {
            crop,
            out_w: out,
            out_h: out,
            hflip,
        }
    }

    /// Per-axis interval intersection, written independently of `Box::intersection`.
    fn interval_oracle(a0: f64, a1: f64, b0: f64, b1: f64) -> Option<(f64, f64)> {
        let lo = if a0 > b0 { a0 } else { b0 };
        let hi = if a1 < b1 { a1 } else { b1 };
        (hi > lo).then_some((lo, hi))
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(Box::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Box::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(Box::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn intersect_identical_disjoint_and_partial() {
        let full = view(bx(0.0, 0.0, 100.0, 100.0), 64, false);
        assert_eq!(intersect_views(&full, &full).unwrap().rect, bx(0.0, 0.0, 100.0, 100.0));

        let a = view(bx(0.0, 0.0, 50.0, 50.0), 64, false);
        let b = view(bx(60.0, 60.0, 30.0, 30.0), 64, false);
        assert!(intersect_views(&a, &b).is_none());

        let a = view(bx(10.0, 20.0, 80.0, 60.0), 64, false);
        let b = view(bx(50.0, 40.0, 100.0, 100.0), 64, false);
        let (x0, x1) = interval_oracle(10.0, 90.0, 50.0, 150.0).unwrap();
        let (y0, y1) = interval_oracle(20.0, 80.0, 40.0, 140.0).unwrap();
        let is = intersect_views(&a, &b).unwrap();
        assert_eq!(is.rect, bx(x0, y0, x1 - x0, y1 - y0));
        assert_eq!(is.rect, bx(50.0, 40.0, 40.0, 40.0));
    }

    #[test]
    fn touching_crops_do_not_intersect() {
        let a = view(bx(0.0, 0.0, 10.0, 10.0), 8, false);
        let b = view(bx(10.0, 0.0, 10.0, 10.0), 8, false);
        assert!(intersect_views(&a, &b).is_none());
    }

    #[test]
    fn sample_box_degenerate_range_is_forced() {
        let is = IntersectionRegion { rect: bx(5.0, 7.0, 32.0, 32.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_box(&is, 32.0, 32.0, &mut rng).unwrap();
        assert_eq!(b, bx(5.0, 7.0, 32.0, 32.0));
    }

    #[test]
    fn sample_box_rejects_small_region() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 20.0, 40.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_box(&is, 32.0, 32.0, &mut rng),
            Err(Error::IntersectionTooSmall { .. })
        ));
    }

    #[test]
    fn sample_box_bounds_hold() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 128.0, 128.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let b = sample_box(&is, 32.0, 32.0, &mut rng).unwrap();
            assert!(b.w >= 32.0 && b.w <= 128.0);
            assert!(b.h >= 32.0 && b.h <= 128.0);
            assert!(b.x >= 0.0 && b.x + b.w <= 128.0);
            assert!(b.y >= 0.0 && b.y + b.h <= 128.0);
        }
    }

    #[test]
    fn sample_box_width_mean_matches_uniform() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 128.0, 128.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_box(&is, 32.0, 32.0, &mut rng).unwrap().w)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 80.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = bx(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn sample_rois_respects_threshold() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 128.0, 128.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_rois(&is, 10, Some(0.5), 32.0, 32.0, 1000, &mut rng).unwrap();
        for i in 0..s.boxes.len() {
            for j in (i + 1)..s.boxes.len() {
                assert!(iou(&s.boxes[i], &s.boxes[j]) <= 0.5);
            }
        }
        let s = sample_rois(&is, 1, Some(0.5), 32.0, 32.0, 100, &mut rng).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert!(!s.truncated);
        for _ in 0..100 {
            let s = sample_rois(&is, 10, None, 32.0, 32.0, 10, &mut rng).unwrap();
            assert_eq!(s.boxes.len(), 10);
        }
    }

    #[test]
    fn sample_rois_truncates_when_budget_runs_out() {
        // Only one 32x32 box fits in a 33x33 region without heavy overlap.
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 33.0, 33.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_rois(&is, 10, Some(0.5), 32.0, 32.0, 50, &mut rng).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert!(s.truncated);
        assert_eq!(s.attempts, 50);
    }

    #[test]
    fn sample_rois_starved_with_zero_budget() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 64.0, 64.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            sample_rois(&is, 3, Some(0.5), 16.0, 16.0, 0, &mut rng),
            Err(Error::SamplingStarved { .. })
        ));
    }

    #[test]
    fn map_box_examples() {
        let id = ViewGeometry::identity(64, 48);
        let b = bx(3.0, 4.0, 10.0, 20.0);
        assert_eq!(map_box_to_view(&b, &id).unwrap(), b);

        let v = view(bx(10.0, 10.0, 100.0, 100.0), 224, false);
        let m = map_box_to_view(&bx(10.0, 10.0, 50.0, 50.0), &v).unwrap();
        let expect = [0.0, 0.0, 50.0 * 2.24, 50.0 * 2.24];
        for (got, want) in [m.x, m.y, m.w, m.h].iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }

        let vf = ViewGeometry { hflip: true, ..v };
        let m = map_box_to_view(&bx(10.0, 10.0, 50.0, 50.0), &vf).unwrap();
        assert!((m.x - (224.0 - 112.0)).abs() < 1e-12);
        assert!((m.w - 112.0).abs() < 1e-12);
    }

    #[test]
    fn map_box_outside_crop_fails() {
        let v = view(bx(10.0, 10.0, 20.0, 20.0), 32, false);
        assert!(matches!(
            map_box_to_view(&bx(0.0, 0.0, 5.0, 5.0), &v),
            Err(Error::BoxNotVisible(_))
        ));
    }

    #[test]
    fn grid_mapping() {
        let g = FeatureGridSpec::new(64, 64, 4, 4).unwrap();
        assert_eq!(map_box_to_grid(&bx(32.0, 32.0, 32.0, 32.0), &g), bx(2.0, 2.0, 2.0, 2.0));
        assert_eq!(map_box_to_grid(&bx(8.0, 8.0, 24.0, 40.0), &g), bx(0.5, 0.5, 1.5, 2.5));
        let g1 = FeatureGridSpec::new(8, 8, 8, 8).unwrap();
        let b = bx(1.5, 2.5, 3.0, 4.0);
        assert_eq!(map_box_to_grid(&b, &g1), b);
        assert!(FeatureGridSpec::new(64, 64, 5, 4).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let v = view(bx(0.0, 0.0, 64.0, 64.0), 64, true);
        let b = bx(3.0, 5.0, 17.0, 9.0);
        let once = map_box_to_view(&b, &v).unwrap();
        let twice = map_box_to_view(&once, &v).unwrap();
        assert!((twice.x - b.x).abs() < 1e-12 && (twice.w - b.w).abs() < 1e-12);
    }

    #[test]
    fn jitter_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = bx(10.0, 10.0, 20.0, 20.0);
        let bounds = bx(0.0, 0.0, 64.0, 64.0);
        assert_eq!(jitter_box(&b, 0.0, &bounds, &mut rng), b);
    }

    #[test]
    fn jitter_bound_holds_even_at_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = bx(0.0, 0.0, 64.0, 64.0);
        for b in [bx(20.0, 20.0, 16.0, 16.0), bx(0.0, 0.0, 30.0, 30.0), bx(40.0, 50.0, 24.0, 14.0)] {
            for _ in 0..10_000 {
                let j = jitter_box(&b, 0.1, &bounds, &mut rng);
                assert!((j.w - b.w).abs() / b.w <= 0.1 + 1e-12);
                assert!((j.h - b.h).abs() / b.h <= 0.1 + 1e-12);
                assert!(bounds.contains(&j));
            }
        }
    }

    #[test]
    fn jitter_infinite_draws_fresh_box_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bounds = bx(4.0, 6.0, 30.0, 20.0);
        let b = bx(5.0, 7.0, 10.0, 10.0);
        let mut moved = 0;
        for _ in 0..1000 {
            let j = jitter_box(&b, f64::INFINITY, &bounds, &mut rng);
            assert!(bounds.contains(&j));
            assert!(j.w >= 1.0 && j.h >= 1.0);
            if (j.x - b.x).abs() > 1.0 {
                moved += 1;
            }
        }
        assert!(moved > 500);
    }

    #[test]
    fn same_seed_same_boxes() {
        let is = IntersectionRegion { rect: bx(0.0, 0.0, 64.0, 64.0) };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_rois(&is, 10, Some(0.5), 16.0, 16.0, 1000, &mut rng).unwrap().boxes
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn any_view() -> impl Strategy<Value = ViewGeometry> {
        (0.0..50.0f64, 0.0..50.0f64, 5.0..200.0f64, 5.0..200.0f64, 1usize..300, 1usize..300, any::<bool>())
            .prop_map(|(x, y, w, h, ow, oh, hflip)| ViewGeometry {
                crop: Box { x, y, w, h },
                out_w: ow,
                out_h: oh,
                hflip,
            })
    }

    proptest! {
        #[test]
        fn view_round_trip(v in any_view(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.01..1.0f64, fh in 0.01..1.0f64) {
            let w = v.crop.w * fw * (1.0 - fx);
            let h = v.crop.h * fh * (1.0 - fy);
            prop_assume!(w > 0.0 && h > 0.0);
            let b = Box { x: v.crop.x + v.crop.w * fx, y: v.crop.y + v.crop.h * fy, w, h };
            let m = map_box_to_view(&b, &v).unwrap();
            prop_assert!(v.view_rect().contains(&m));
            let back = map_box_from_view(&m, &v);
            for (a, b) in [(back.x, b.x), (back.y, b.y), (back.w, b.w), (back.h, b.h)] {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(ax in -10.0..10.0f64, ay in -10.0..10.0f64, aw in 0.1..10.0f64, ah in 0.1..10.0f64,
                                     bx in -10.0..10.0f64, by in -10.0..10.0f64, bw in 0.1..10.0f64, bh in 0.1..10.0f64) {
            let a = Box { x: ax, y: ay, w: aw, h: ah };
            let b = Box { x: bx, y: by, w: bw, h: bh };
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}

//! Prompt generators of controlled quality: noisy boxes inside an IoU
//! window, k-point samplers, coarse masks, and occlusion-scene composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::Rng;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box2 {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        debug_assert!(x0 < x1 && y0 < y1, "degenerate box");
        Box2 { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Tight bounding box of a mask's foreground, in pixel-edge coordinates.
    pub fn around_mask(mask: &BinaryMask) -> Option<Box2> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0usize, 0usize);
        let mut any = false;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if any {
            Some(Box2::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Positive-only point prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum PromptPayload {
    #[serde(rename = "gt_box")]
    GtBox(Box2),
    #[serde(rename = "noisy_box")]
    NoisyBox(Box2),
    #[serde(rename = "points")]
    Points(PointSet),
    /// Coarse mask stored as the foreground pixel indices of an H×W raster.
    #[serde(rename = "coarse_mask")]
    CoarseMask { width: usize, height: usize, foreground: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(flatten)]
    pub payload: PromptPayload,
    pub quality_tag: String,
}

impl PromptSpec {
    pub fn gt_box(b: Box2) -> Self {
        PromptSpec { payload: PromptPayload::GtBox(b), quality_tag: "gt_box".into() }
    }

    pub fn noisy_box(b: Box2, lo: f64, hi: f64) -> Self {
        PromptSpec {
            payload: PromptPayload::NoisyBox(b),
            quality_tag: format!("iou {lo}-{hi}"),
        }
    }

    pub fn points(p: PointSet) -> Self {
        let k = p.points.len();
        PromptSpec { payload: PromptPayload::Points(p), quality_tag: format!("k={k}") }
    }

    pub fn coarse_mask(m: &BinaryMask) -> Self {
        PromptSpec {
            payload: PromptPayload::CoarseMask {
                width: m.width,
                height: m.height,
                foreground: m.foreground_indices(),
            },
            quality_tag: "coarse_mask".into(),
        }
    }

    pub fn coarse_to_mask(&self) -> Option<BinaryMask> {
        if let PromptPayload::CoarseMask { width, height, foreground } = &self.payload {
            let mut m = BinaryMask::new(*width, *height);
            for &i in foreground {
                m.bits[i] = true;
            }
            Some(m)
        } else {
            None
        }
    }
}

/// Area-overlap IoU of two boxes.
pub fn box_iou(a: &Box2, b: &Box2) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Perturb each corner with Gaussian noise of sigma = noise_scale * side / 2,
/// clamp to the image, and rejection-sample until the IoU with `gt` lands in
/// `[iou_lo, iou_hi]`.
pub fn noisy_box(
    gt: &Box2,
    noise_scale: f64,
    iou_lo: f64,
    iou_hi: f64,
    img_w: usize,
    img_h: usize,
    rng: &mut Rng,
) -> Result<Box2> {
    if !(0.0..=1.0).contains(&iou_lo) || !(0.0..=1.0).contains(&iou_hi) || iou_lo > iou_hi {
        return Err(Error::Config(format!("bad IoU window [{iou_lo}, {iou_hi}]")));
    }
    let sx = noise_scale * (gt.x1 - gt.x0) / 2.0;
    let sy = noise_scale * (gt.y1 - gt.y0) / 2.0;
    for _ in 0..MAX_REJECTIONS {
        let x0 = (gt.x0 + sx * rng.gaussian()).clamp(0.0, img_w as f64);
        let y0 = (gt.y0 + sy * rng.gaussian()).clamp(0.0, img_h as f64);
        let x1 = (gt.x1 + sx * rng.gaussian()).clamp(0.0, img_w as f64);
        let y1 = (gt.y1 + sy * rng.gaussian()).clamp(0.0, img_h as f64);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let cand = Box2::new(x0, y0, x1, y1);
        let iou = box_iou(&cand, gt);
        if iou >= iou_lo && iou <= iou_hi {
            return Ok(cand);
        }
    }
    Err(Error::Generation(format!(
        "no box with IoU in [{iou_lo}, {iou_hi}] after {MAX_REJECTIONS} draws (noise_scale {noise_scale})"
    )))
}

/// k distinct foreground pixel centers, uniform without replacement.
pub fn sample_points(mask: &BinaryMask, k: usize, rng: &mut Rng) -> Result<PointSet> {
    let fg = mask.foreground_indices();
    if fg.len() < k || k == 0 {
        return Err(Error::Generation(format!(
            "need {k} foreground pixels, mask has {}",
            fg.len()
        )));
    }
    let picks = rng.sample_indices(fg.len(), k);
    let points = picks
        .into_iter()
        .map(|i| {
            let idx = fg[i];
            Point {
                x: (idx % mask.width) as f64 + 0.5,
                y: (idx / mask.width) as f64 + 0.5,
            }
        })
        .collect();
    Ok(PointSet { points })
}

/// Flip pixels inside the boundary band (Chebyshev radius `band_radius`)
/// independently with probability `flip_prob`; everything else unchanged.
pub fn coarse_mask(
    gt: &BinaryMask,
    band_radius: usize,
    flip_prob: f64,
    rng: &mut Rng,
) -> Result<BinaryMask> {
    if band_radius < 1 {
        return Err(Error::Config("band_radius must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!("flip_prob {flip_prob} outside [0,1]")));
    }
    let band = gt.boundary_band(band_radius);
    let mut out = gt.clone();
    for i in 0..out.bits.len() {
        if band.bits[i] && rng.uniform() < flip_prob {
            out.bits[i] = !out.bits[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OcclusionScene {
    pub target_mask: BinaryMask,
    pub occluders: Vec<BinaryMask>,
    pub visible_target: BinaryMask,
}

/// Paint random shapes strictly above the target; the training label is the
/// visible part of the target.
pub fn compose_occlusion(target: &BinaryMask, n_occluders: usize, rng: &mut Rng) -> OcclusionScene {
    let (w, h) = (target.width, target.height);
    let mut occluders = Vec::with_capacity(n_occluders);
    let mut visible = target.clone();
    for _ in 0..n_occluders {
        let occ = crate::data::random_shape_mask(w, h, rng);
        visible = visible.minus(&occ);
        occluders.push(occ);
    }
    OcclusionScene { target_mask: target.clone(), occluders, visible_target: visible }
}

/// One PromptSpec per line.
pub fn write_jsonl(path: &std::path::Path, prompts: &[PromptSpec]) -> Result<()> {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<PromptSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                what: "prompt JSONL",
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn box_iou_cases() {
        let a = Box2::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        let far = Box2::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(box_iou(&a, &far), 0.0);
        let b = Box2::new(1.0, 0.0, 3.0, 2.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_returns_gt() {
        let gt = Box2::new(10.0, 10.0, 30.0, 25.0);
        let mut rng = Rng::new(1);
        let b = noisy_box(&gt, 0.0, 1.0, 1.0, 64, 64, &mut rng).unwrap();
        assert_eq!(b, gt);
    }

    #[test]
    fn noisy_box_respects_window() {
        let gt = Box2::new(12.0, 16.0, 44.0, 50.0);
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let b = noisy_box(&gt, 0.4, 0.5, 0.6, 64, 64, &mut rng).unwrap();
            let iou = box_iou(&b, &gt);
            assert!((0.5..=0.6).contains(&iou), "iou {iou}");
        }
    }

    #[test]
    fn infeasible_window_errors() {
        let gt = Box2::new(0.0, 0.0, 2.0, 2.0);
        let mut rng = Rng::new(2);
        // zero noise can only produce IoU 1.0
        let r = noisy_box(&gt, 0.0, 0.2, 0.3, 64, 64, &mut rng);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn sample_points_exhaustive_and_membership() {
        let m = rect_mask(8, 8, 2, 3, 5, 6);
        let n = m.count();
        let mut rng = Rng::new(3);
        let ps = sample_points(&m, n, &mut rng).unwrap();
        assert_eq!(ps.points.len(), n);
        let mut seen = std::collections::HashSet::new();
        for p in &ps.points {
            let (x, y) = (p.x as usize, p.y as usize);
            assert!(m.get(x, y), "point off foreground");
            assert!(seen.insert((x, y)), "duplicate point");
        }
    }

    #[test]
    fn sample_points_too_many_errors() {
        let m = rect_mask(4, 4, 0, 0, 1, 1);
        let mut rng = Rng::new(4);
        assert!(sample_points(&m, 2, &mut rng).is_err());
    }

    #[test]
    fn coarse_mask_zero_flip_is_identity() {
        let m = rect_mask(16, 16, 4, 4, 12, 12);
        let mut rng = Rng::new(5);
        assert_eq!(coarse_mask(&m, 2, 0.0, &mut rng).unwrap(), m);
    }

    #[test]
    fn coarse_mask_only_touches_band() {
        let m = rect_mask(16, 16, 4, 4, 12, 12);
        let band = m.boundary_band(2);
        let mut rng = Rng::new(6);
        let c = coarse_mask(&m, 2, 1.0, &mut rng).unwrap();
        for i in 0..m.bits.len() {
            if !band.bits[i] {
                assert_eq!(c.bits[i], m.bits[i]);
            }
        }
    }

    #[test]
    fn coarse_mask_flip_rate_near_half() {
        let m = rect_mask(32, 32, 8, 8, 24, 24);
        let band = m.boundary_band(2);
        let band_n = band.count();
        let mut flipped = 0usize;
        let trials = 100;
        for t in 0..trials {
            let mut rng = Rng::new(1000 + t);
            let c = coarse_mask(&m, 2, 0.5, &mut rng).unwrap();
            flipped += (0..m.bits.len()).filter(|&i| c.bits[i] != m.bits[i]).count();
        }
        let frac = flipped as f64 / (band_n * trials as usize) as f64;
        assert!((frac - 0.5).abs() < 0.05, "flip fraction {frac}");
    }

    #[test]
    fn occlusion_identities() {
        let target = rect_mask(32, 32, 8, 8, 24, 24);
        let mut rng = Rng::new(7);
        let none = compose_occlusion(&target, 0, &mut rng);
        assert_eq!(none.visible_target, target);
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let sc = compose_occlusion(&target, 2, &mut rng);
            // visible subset of target
            for i in 0..target.bits.len() {
                assert!(!sc.visible_target.bits[i] || target.bits[i]);
            }
            // visible + (occluded ∩ target) == target
            let mut occ_union = BinaryMask::new(32, 32);
            for o in &sc.occluders {
                occ_union = occ_union.union(o);
            }
            let rebuilt = sc.visible_target.union(&occ_union.intersect(&target));
            assert_eq!(rebuilt, target);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prompts.jsonl");
        let specs = vec![
            PromptSpec::gt_box(Box2::new(1.0, 2.0, 3.0, 4.0)),
            PromptSpec::points(PointSet { points: vec![Point { x: 1.5, y: 2.5 }] }),
        ];
        write_jsonl(&p, &specs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), specs);
    }
}

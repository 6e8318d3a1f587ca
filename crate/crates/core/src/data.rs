//! Synthetic shape scenes: ellipses, rectangles and convex polygons rendered
//! onto 64x64 grayscale rasters, with optional occluders painted above the
//! target.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::pgm;
use crate::prompts::compose_occlusion;
use crate::rng::Rng;

pub const IMG_SIZE: usize = 64;
const MIN_TARGET_PIXELS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub index: usize,
    pub shape_kind: String,
    pub n_distractors: usize,
    pub n_occluders: usize,
    pub target_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// 64x64 grayscale, quantized exactly as it is stored on disk
    pub image: Vec<u8>,
    pub target_mask: BinaryMask,
    pub occluder_masks: Vec<BinaryMask>,
    pub meta: SceneMeta,
}

fn render_ellipse(w: usize, h: usize, rng: &mut Rng) -> BinaryMask {
    let cx = rng.range(0.25 * w as f64, 0.75 * w as f64);
    let cy = rng.range(0.25 * h as f64, 0.75 * h as f64);
    let rx = rng.range(0.08 * w as f64, 0.3 * w as f64);
    let ry = rng.range(0.08 * h as f64, 0.3 * h as f64);
    let theta = rng.range(0.0, std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut m = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * ct + dy * st) / rx;
            let v = (-dx * st + dy * ct) / ry;
            if u * u + v * v <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn render_rect(w: usize, h: usize, rng: &mut Rng) -> BinaryMask {
    let cx = rng.range(0.25 * w as f64, 0.75 * w as f64);
    let cy = rng.range(0.25 * h as f64, 0.75 * h as f64);
    let hw = rng.range(0.08 * w as f64, 0.28 * w as f64);
    let hh = rng.range(0.08 * h as f64, 0.28 * h as f64);
    let theta = rng.range(0.0, std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut m = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * ct + dy * st;
            let v = -dx * st + dy * ct;
            if u.abs() <= hw && v.abs() <= hh {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn render_polygon(w: usize, h: usize, rng: &mut Rng) -> BinaryMask {
    let cx = rng.range(0.3 * w as f64, 0.7 * w as f64);
    let cy = rng.range(0.3 * h as f64, 0.7 * h as f64);
    let n = 3 + rng.below(4);
    let base_r = rng.range(0.1 * w as f64, 0.28 * w as f64);
    let mut verts = Vec::with_capacity(n);
    for i in 0..n {
        let ang = (i as f64 + rng.range(-0.2, 0.2)) / n as f64 * std::f64::consts::TAU;
        let r = base_r * rng.range(0.7, 1.2);
        verts.push((cx + r * ang.cos(), cy + r * ang.sin()));
    }
    let mut m = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // even-odd crossing test
            let mut inside = false;
            for i in 0..n {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % n];
                if (y1 > py) != (y2 > py) {
                    let xi = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
                    if px < xi {
                        inside = !inside;
                    }
                }
            }
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// One random shape from the family shared by targets and occluders.
pub fn random_shape_mask(w: usize, h: usize, rng: &mut Rng) -> BinaryMask {
    match rng.below(3) {
        0 => render_ellipse(w, h, rng),
        1 => render_rect(w, h, rng),
        _ => render_polygon(w, h, rng),
    }
}

fn shape_kind_name(k: usize) -> &'static str {
    match k {
        0 => "ellipse",
        1 => "rect",
        _ => "polygon",
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render one scene: background, distractor objects, the target on top of
/// them, occluders above everything, then pixel noise.
///
/// Distractors share the target's shape family and intensity range, so only
/// the prompt disambiguates which object is wanted.
fn render_scene(index: usize, occlusion_prob: f64, rng: &mut Rng) -> SyntheticScene {
    let (w, h) = (IMG_SIZE, IMG_SIZE);
    let (kind, target) = loop {
        let kind = rng.below(3);
        let m = match kind {
            0 => render_ellipse(w, h, rng),
            1 => render_rect(w, h, rng),
            _ => render_polygon(w, h, rng),
        };
        if m.count() >= MIN_TARGET_PIXELS {
            break (kind, m);
        }
    };
    let n_distract = 2 + rng.below(2);
    let distractors: Vec<BinaryMask> =
        (0..n_distract).map(|_| random_shape_mask(w, h, rng)).collect();
    let n_occ = if rng.uniform() < occlusion_prob { 1 + rng.below(2) } else { 0 };
    let scene = compose_occlusion(&target, n_occ, rng);

    let bg = rng.range(0.02, 0.22);
    let target_int = rng.range(0.55, 0.9);
    let mut img = vec![bg; w * h];
    for d in &distractors {
        let d_int = rng.range(0.55, 0.9);
        for i in 0..w * h {
            if d.bits[i] {
                img[i] = d_int;
            }
        }
    }
    for i in 0..w * h {
        if target.bits[i] {
            img[i] = target_int;
        }
    }
    for occ in &scene.occluders {
        let occ_int = rng.range(0.3, 1.0);
        for i in 0..w * h {
            if occ.bits[i] {
                img[i] = occ_int;
            }
        }
    }
    let noise = 0.02;
    let image: Vec<u8> = img.iter().map(|v| quantize(v + noise * rng.gaussian())).collect();

    SyntheticScene {
        image,
        meta: SceneMeta {
            index,
            shape_kind: shape_kind_name(kind).to_string(),
            n_distractors: n_distract,
            n_occluders: n_occ,
            target_pixels: scene.visible_target.count(),
        },
        // the label is always the visible extent of the target
        target_mask: scene.visible_target,
        occluder_masks: scene.occluders,
    }
}

/// Deterministic per seed: scene i uses the stream derived with tag i.
pub fn generate_dataset(n: usize, occlusion_prob: f64, rng: &Rng) -> Vec<SyntheticScene> {
    (0..n)
        .map(|i| {
            let mut sr = rng.derive(i as u64);
            let mut sc = render_scene(i, occlusion_prob, &mut sr);
            // occlusion can shave the visible target below the floor; redraw
            let mut attempt = 0u64;
            while sc.target_mask.count() < MIN_TARGET_PIXELS {
                attempt += 1;
                let mut rr = rng.derive(i as u64 ^ (attempt << 32));
                sc = render_scene(i, occlusion_prob, &mut rr);
            }
            sc
        })
        .collect()
}

pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for sc in scenes {
        let i = sc.meta.index;
        pgm::write_gray(&dir.join(format!("scene_{i:04}.pgm")), IMG_SIZE, IMG_SIZE, &sc.image)?;
        pgm::write_mask(&dir.join(format!("scene_{i:04}.mask.pgm")), &sc.target_mask)?;
        let meta = serde_json::to_string_pretty(&sc.meta).expect("meta serializes");
        let mp = dir.join(format!("scene_{i:04}.meta.json"));
        std::fs::write(&mp, meta).map_err(|e| Error::io(mp.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let mut scenes = Vec::new();
    let mut i = 0usize;
    loop {
        let img_path = dir.join(format!("scene_{i:04}.pgm"));
        if !img_path.exists() {
            break;
        }
        let (w, h, image) = pgm::read_gray(&img_path)?;
        if w != IMG_SIZE || h != IMG_SIZE {
            return Err(Error::Format {
                what: "dataset image",
                detail: format!("{}: expected {IMG_SIZE}x{IMG_SIZE}, got {w}x{h}", img_path.display()),
            });
        }
        let target_mask = pgm::read_mask(&dir.join(format!("scene_{i:04}.mask.pgm")))?;
        let meta_path = dir.join(format!("scene_{i:04}.meta.json"));
        let meta: SceneMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Format { what: "scene meta", detail: e.to_string() })?;
        scenes.push(SyntheticScene { image, target_mask, occluder_masks: Vec::new(), meta });
        i += 1;
    }
    if scenes.is_empty() {
        return Err(Error::Format {
            what: "dataset directory",
            detail: format!("no scene_0000.pgm under {}", dir.display()),
        });
    }
    Ok(scenes)
}

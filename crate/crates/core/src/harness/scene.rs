//! Synthetic scenes of textured geometric primitives.
//!
//! Every class owns a colour and a texture (stripes, checkerboard or flat),
//! so an exemplar image of the same class is a genuinely informative visual
//! prompt. Class 0 is a mottled grey background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::LabelMap;
use crate::error::{Error, Result};
use crate::kernels::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Stripes { period: usize, vertical: bool },
    Checker { cell: usize },
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMeta {
    pub class: usize,
    pub kind: ShapeKind,
    /// Bounding box `(top, left, bottom, right)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    /// Pixels labelled with this shape's class.
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `(H, W, 3)` with values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub meta: Vec<ShapeMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Make the first shape cover less than 1% of the image.
    pub small_object: bool,
    pub pixel_noise: f64,
    /// Half-width of the per-scene brightness and per-channel gain shifts.
    pub illumination: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 64,
            width: 64,
            shapes_min: 2,
            shapes_max: 4,
            small_object: true,
            pixel_noise: 0.03,
            illumination: 0.2,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "scene size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::InvalidConfig("shapes_min exceeds shapes_max".into()));
        }
        if !(0.0..=0.5).contains(&self.pixel_noise) {
            return Err(Error::InvalidConfig("pixel noise must lie in [0, 0.5]".into()));
        }
        if !(0.0..=0.5).contains(&self.illumination) {
            return Err(Error::InvalidConfig("illumination must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base colour of a class.
pub fn class_color(class: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    hsv((class - 1) as f64 * 0.618_033_988_75, 0.75, 0.85)
}

fn class_texture(class: usize) -> Texture {
    if class == 0 {
        return Texture::Checker { cell: 7 };
    }
    match (class - 1) % 3 {
        0 => Texture::Stripes {
            period: 4 + 2 * ((class - 1) / 3 % 3),
            vertical: class % 2 == 0,
        },
        1 => Texture::Checker {
            cell: 3 + (class - 1) / 3 % 3,
        },
        _ => Texture::Flat,
    }
}

/// Appearance jitter applied to one object or exemplar.
#[derive(Clone, Copy, Debug)]
struct Style {
    tint: [f64; 3],
    brightness: f64,
    phase: (usize, usize),
    scale: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng, amount: f64) -> Self {
        let mut j = || rng.random_range(-amount..=amount);
        let tint = [j(), j(), j()];
        let brightness = 1.0 + j();
        Self {
            tint,
            brightness,
            phase: (rng.random_range(0..16), rng.random_range(0..16)),
            scale: 1.0 + rng.random_range(-amount..=amount),
        }
    }

    fn neutral() -> Self {
        Self {
            tint: [0.0; 3],
            brightness: 1.0,
            phase: (0, 0),
            scale: 1.0,
        }
    }
}

fn texel(class: usize, style: &Style, y: usize, x: usize) -> [f64; 3] {
    let (yy, xx) = (y + style.phase.0, x + style.phase.1);
    let scaled = |n: usize| ((n as f64 * style.scale).round() as usize).max(2);
    let factor = match class_texture(class) {
        Texture::Stripes { period, vertical } => {
            let p = scaled(period);
            let t = if vertical { xx } else { yy };
            if (t % p) < p / 2 {
                1.15
            } else {
                0.6
            }
        }
        Texture::Checker { cell } => {
            let c = scaled(cell);
            if ((yy / c) + (xx / c)) % 2 == 0 {
                1.1
            } else if class == 0 {
                0.9
            } else {
                0.55
            }
        }
        Texture::Flat => 1.0,
    };
    let base = class_color(class);
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (base[c] + style.tint[c]) * factor * style.brightness;
    }
    out
}

fn inside(kind: ShapeKind, bbox: (usize, usize, usize, usize), y: usize, x: usize) -> bool {
    let (t, l, b, r) = bbox;
    if y < t || y > b || x < l || x > r {
        return false;
    }
    let (h, w) = ((b - t + 1) as f64, (r - l + 1) as f64);
    let (fy, fx) = ((y - t) as f64 + 0.5, (x - l) as f64 + 0.5);
    match kind {
        ShapeKind::Rectangle => true,
        ShapeKind::Disc => {
            let (dy, dx) = (fy / h * 2.0 - 1.0, fx / w * 2.0 - 1.0);
            dy * dy + dx * dx <= 1.0
        }
        // Apex at the top centre, base along the bottom edge.
        ShapeKind::Triangle => {
            let half = 0.5 * w * fy / h;
            (fx - 0.5 * w).abs() <= half
        }
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    !(a.2 + margin < b.0 || b.2 + margin < a.0 || a.3 + margin < b.1 || b.3 + margin < a.1)
}

/// Deterministic scene: background plus non-overlapping shapes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let offset = rng.random_range(0..cfg.classes - 1);

    let mut labels = LabelMap::filled(h, w, 0);
    let mut image = Tensor::zeros(&[h, w, 3]);
    let bg = Style::draw(&mut rng, 0.04);
    for y in 0..h {
        for x in 0..w {
            image.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&texel(0, &bg, y, x));
        }
    }

    let mut meta: Vec<ShapeMeta> = Vec::with_capacity(n);
    let area = (h * w) as f64;
    let (short, long) = (h.min(w) as f64, h.max(w) as f64);
    for i in 0..n {
        let class = 1 + (offset + i) % (cfg.classes - 1);
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disc,
            _ => ShapeKind::Triangle,
        };
        let (sh, sw) = if i == 0 && cfg.small_object {
            let target = rng.random_range(0.004..0.008) * area;
            let side = match kind {
                ShapeKind::Rectangle => target.sqrt(),
                ShapeKind::Disc => (4.0 * target / std::f64::consts::PI).sqrt(),
                ShapeKind::Triangle => (2.0 * target).sqrt(),
            };
            let s = side.round().max(2.0) as usize;
            (s, s)
        } else {
            let lo = (short / 6.0).max(3.0);
            let hi = (long / 2.5).max(lo + 1.0);
            (
                rng.random_range(lo..hi).round() as usize,
                rng.random_range(lo..hi).round() as usize,
            )
        };
        let (sh, sw) = (sh.min(h), sw.min(w));
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let t = rng.random_range(0..=h - sh);
            let l = rng.random_range(0..=w - sw);
            let bbox = (t, l, t + sh - 1, l + sw - 1);
            if meta.iter().all(|m| !overlaps(m.bbox, bbox, 1)) {
                placed = Some(bbox);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place shape {} of {n} ({sh}x{sw}) after {} attempts",
                i + 1,
                cfg.max_retries
            ))
        })?;
        let style = Style::draw(&mut rng, 0.06);
        let mut count = 0;
        for y in bbox.0..=bbox.2 {
            for x in bbox.1..=bbox.3 {
                if inside(kind, bbox, y, x) {
                    labels.set(y, x, class);
                    image.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3]
                        .copy_from_slice(&texel(class, &style, y, x));
                    count += 1;
                }
            }
        }
        meta.push(ShapeMeta {
            class,
            kind,
            bbox,
            area: count,
        });
    }

    let mut shift = || {
        if cfg.illumination > 0.0 {
            rng.random_range(-cfg.illumination..=cfg.illumination)
        } else {
            0.0
        }
    };
    let brightness = 1.0 + shift();
    let gain = [0; 3].map(|_| brightness * (1.0 + shift()));
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        *v *= gain[i % 3];
    }
    for v in image.data_mut() {
        let noise = if cfg.pixel_noise > 0.0 {
            rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise)
        } else {
            0.0
        };
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    Ok(SyntheticScene { image, labels, meta })
}

/// An exemplar of one class under a random appearance jitter of magnitude
/// `jitter`, laid out like a refinement crop: a random shape at a random
/// native size, centred on a black square canvas and resized to `size`. The
/// background class fills the frame.
pub fn render_exemplar(class: usize, size: usize, jitter: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = if jitter > 0.0 {
        Style::draw(&mut rng, jitter)
    } else {
        Style::neutral()
    };
    let paint = |side: usize, covered: &dyn Fn(usize, usize) -> bool| {
        let mut t = Tensor::zeros(&[side, side, 1, 3]);
        for y in 0..side {
            for x in 0..side {
                if covered(y, x) {
                    let px = texel(class, &style, y, x).map(|v| v.clamp(0.0, 1.0));
                    t.data_mut()[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&px);
                }
            }
        }
        t
    };
    let canvas = if class == 0 {
        paint(size, &|_, _| true)
    } else {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disc,
            _ => ShapeKind::Triangle,
        };
        let long = rng.random_range((size / 4).max(4)..=size.max(4));
        let short = ((long as f64 * rng.random_range(0.4..=1.0)).round() as usize).clamp(2, long);
        let (bh, bw) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let (oy, ox) = ((long - bh) / 2, (long - bw) / 2);
        let bbox = (oy, ox, oy + bh - 1, ox + bw - 1);
        paint(long, &|y, x| inside(kind, bbox, y, x))
    };
    bilinear_resize(&canvas, size, size)
        .and_then(|t| t.into_reshaped(&[size, size, 3]))
        .expect("canvas is a non-empty RGB square")
}

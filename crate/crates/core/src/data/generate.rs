use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::scene::{GroundTruthScene, Mask, Scene, Segment};
use crate::tensor::Tensor;

pub const THING_NAMES: [&str; 4] = ["rectangle", "disk", "triangle", "ring"];
pub const STUFF_NAMES: [&str; 2] = ["background", "stripes"];

/// Fragments of occluded instances smaller than this are left void.
const MIN_VISIBLE_AREA: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Classes `0..thing_classes`; at most 4 distinct shapes.
    pub thing_classes: usize,
    /// Classes after the things; at most 2 (gradient background, stripes).
    pub stuff_classes: usize,
    pub max_instances: usize,
    pub occlusion: bool,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            thing_classes: 4,
            stuff_classes: 2,
            max_instances: 6,
            occlusion: true,
            noise_std: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.thing_classes + self.stuff_classes
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=THING_NAMES.len()).contains(&self.thing_classes) {
            return Err(Error::Config(format!("thing_classes must be 1..=4, got {}", self.thing_classes)));
        }
        if !(1..=STUFF_NAMES.len()).contains(&self.stuff_classes) {
            return Err(Error::Config(format!("stuff_classes must be 1..=2, got {}", self.stuff_classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("scene must be at least 16×16".into()));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be positive".into()));
        }
        Ok(())
    }
}

const THING_COLORS: [[f64; 3]; 4] = [[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.9], [0.9, 0.8, 0.2]];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
}

impl Shape {
    fn random(kind: usize, h: usize, w: usize, rng: &mut Rng) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let scale = hf.min(wf) / 64.0;
        match kind {
            0 => {
                let rh = rng.gen_range(8.0..22.0) * scale;
                let rw = rng.gen_range(8.0..22.0) * scale;
                let y0 = rng.gen_range(0.0..hf - rh);
                let x0 = rng.gen_range(0.0..wf - rw);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rh,
                    x1: x0 + rw,
                }
            }
            1 => {
                let r = rng.gen_range(4.5..11.0) * scale;
                Shape::Disk {
                    cy: rng.gen_range(r..hf - r),
                    cx: rng.gen_range(r..wf - r),
                    r,
                }
            }
            2 => {
                let s = rng.gen_range(7.0..20.0) * scale;
                let cy = rng.gen_range(s / 2.0..hf - s / 2.0);
                let cx = rng.gen_range(s / 2.0..wf - s / 2.0);
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let pts = std::array::from_fn(|i| {
                    let a = rot + i as f64 * std::f64::consts::TAU / 3.0;
                    (cy + 0.58 * s * a.sin(), cx + 0.58 * s * a.cos())
                });
                Shape::Triangle { pts }
            }
            _ => {
                let r_out = rng.gen_range(5.0..12.0) * scale;
                let thick = rng.gen_range(2.0..3.5) * scale;
                Shape::Ring {
                    cy: rng.gen_range(r_out..hf - r_out),
                    cx: rng.gen_range(r_out..wf - r_out),
                    r_in: r_out - thick,
                    r_out,
                }
            }
        }
    }

    /// Whether the pixel center `(y + ½, x + ½)` lies inside the shape.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Ring { cy, cx, r_in, r_out } => {
                let d = (py - cy).powi(2) + (px - cx).powi(2);
                d <= r_out * r_out && d >= r_in * r_in
            }
            Shape::Triangle { pts } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (py - a.0) - (b.0 - a.0) * (px - a.1);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    fn mask(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.contains(y, x))
    }
}

/// Renders one scene: stuff first, then thing instances painted in order,
/// so later instances occlude earlier ones. Ground truth holds visible pixels.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut Rng) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let stuff_base = cfg.thing_classes;

    // Owner of each pixel: index into `layers`.
    let mut owner = vec![0usize; h * w];
    let mut layers: Vec<(usize, bool, Paint)> = Vec::new();

    let g0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let g1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let vertical = rng.gen_bool(0.5);
    layers.push((stuff_base, false, Paint::Gradient { g0, g1, vertical }));

    if cfg.stuff_classes > 1 && rng.gen_bool(0.6) {
        // A band along one image edge.
        let side = rng.gen_range(0..4);
        let depth = rng.gen_range(0.2..0.45);
        let period = rng.gen_range(3..6);
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.45..0.65));
        let id = layers.len();
        layers.push((stuff_base + 1, false, Paint::Stripes { a, period }));
        for y in 0..h {
            for x in 0..w {
                let t = match side {
                    0 => y as f64 / h as f64,
                    1 => 1.0 - (y as f64 + 1.0) / h as f64,
                    2 => x as f64 / w as f64,
                    _ => 1.0 - (x as f64 + 1.0) / w as f64,
                };
                if t < depth {
                    owner[y * w + x] = id;
                }
            }
        }
    }

    let count = rng.gen_range(1..=cfg.max_instances);
    let mut placed: Vec<Mask> = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.thing_classes);
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let color: [f64; 3] = std::array::from_fn(|c| THING_COLORS[class][c] + jitter[c]);
        let mut mask = None;
        for _ in 0..20 {
            let m = Shape::random(class, h, w, rng).mask(h, w);
            if m.area() < MIN_VISIBLE_AREA {
                continue;
            }
            if cfg.occlusion || placed.iter().all(|p| p.intersection(&m) == 0) {
                mask = Some(m);
                break;
            }
        }
        let Some(m) = mask else { continue };
        let id = layers.len();
        layers.push((class, true, Paint::Flat(color)));
        for (o, &b) in owner.iter_mut().zip(m.data()) {
            if b {
                *o = id;
            }
        }
        placed.push(m);
    }

    let mut image = vec![0.0; 3 * h * w];
    let mut visible = vec![Vec::new(); layers.len()];
    for (i, &o) in owner.iter().enumerate() {
        visible[o].push(i);
        let (y, x) = (i / w, i % w);
        let rgb = layers[o].2.color(y, x, h, w);
        for c in 0..3 {
            image[c * h * w + i] = rgb[c];
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");
    if cfg.noise_std > 0.0 {
        for v in image.iter_mut() {
            *v += noise.sample(rng);
        }
    }

    let mut segments = Vec::new();
    for ((class, is_thing, _), pixels) in layers.iter().zip(&visible) {
        // Tiny occluded thing fragments become void; stuff keeps any area.
        if pixels.is_empty() || (*is_thing && pixels.len() < MIN_VISIBLE_AREA) {
            continue;
        }
        let mut mask = Mask::empty(h, w);
        for &i in pixels {
            mask.set(i / w, i % w, true);
        }
        segments.push(Segment {
            mask,
            class: *class,
            is_thing: *is_thing,
        });
    }
    Ok(Scene {
        image: Tensor::new(vec![3, h, w], image)?,
        truth: GroundTruthScene::new(h, w, segments)?,
    })
}

#[derive(Clone, Copy, Debug)]
enum Paint {
    Flat([f64; 3]),
    Gradient { g0: [f64; 3], g1: [f64; 3], vertical: bool },
    Stripes { a: [f64; 3], period: usize },
}

impl Paint {
    fn color(&self, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
        match *self {
            Paint::Flat(c) => c,
            Paint::Gradient { g0, g1, vertical } => {
                let t = if vertical { y as f64 / (h - 1) as f64 } else { x as f64 / (w - 1) as f64 };
                std::array::from_fn(|c| g0[c] + t * (g1[c] - g0[c]))
            }
            Paint::Stripes { a, period } => {
                let on = ((x + y) / period) % 2 == 0;
                std::array::from_fn(|c| if on { a[c] } else { a[c] * 0.5 })
            }
        }
    }
}

/// `count` scenes, scene `i` drawn from its own stream of `seed`. Scenes are
/// generated on all available cores; the result does not depend on how
/// many there are.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunk = count.div_ceil(workers).max(1);
    let ranges: Vec<_> = (0..count).step_by(chunk).map(|a| a..(a + chunk).min(count)).collect();
    let parts: Vec<Result<Vec<Scene>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| s.spawn(move || r.map(|i| generate_scene(cfg, &mut stream(seed, &[i as u64]))).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut scenes = Vec::with_capacity(count);
    for part in parts {
        scenes.extend(part?);
    }
    Ok(scenes)
}

//! Synthetic change pairs with exact labels.
//!
//! Both images share a smooth textured background and a few persistent
//! shapes. Change shapes are then placed so that they overlap neither the
//! persistent shapes nor each other; each appears only in `t1` (removed) or
//! only in `t2` (added). The label is the union of the change shapes, which
//! is exactly the symmetric difference of the two images' shape sets.
//! `t2` additionally receives independent uniform noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mask, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the additive uniform noise on `t2`, as a fraction of the `[0, 1]` range.
pub const NOISE_AMPLITUDE: f32 = 0.02;

/// Minimum per-channel contrast between a change shape's colour and the background base colour.
const MIN_CONTRAST: f32 = 0.3;
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub change_fraction: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.change_fraction > 0.0 && self.change_fraction < 0.5) {
            return Err(Error::invalid(
                "change_fraction",
                format!("{} not in (0, 0.5)", self.change_fraction),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(
                "synthetic size",
                format!("{}x{} is below 8x8", self.height, self.width),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    /// Axis-aligned ellipse tested at pixel centres.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Pixel bounding box `(y0, x0, y1, x1)`, half-open.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0, x0, y1, x1),
            Shape::Ellipse { cy, cx, ry, rx } => (
                (cy - ry).floor().max(0.0) as usize,
                (cx - rx).floor().max(0.0) as usize,
                (cy + ry).ceil() as usize,
                (cx + rx).ceil() as usize,
            ),
        }
    }

    fn separated(&self, other: &Shape, margin: usize) -> bool {
        let (a0, b0, a1, b1) = self.bounds();
        let (c0, d0, c1, d1) = other.bounds();
        a1 + margin <= c0 || c1 + margin <= a0 || b1 + margin <= d0 || d1 + margin <= b0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeRecord {
    pub shape: Shape,
    pub color: [f32; 3],
}

/// A generated pair plus the shape sets drawn into each image.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pair: SamplePair,
    pub t1_shapes: Vec<ShapeRecord>,
    pub t2_shapes: Vec<ShapeRecord>,
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize, area: f64) -> Shape {
    let aspect: f64 = rng.gen_range(0.6..1.6);
    let max_h = (h as f64 * 0.6).max(2.0);
    let max_w = (w as f64 * 0.6).max(2.0);
    let sh = (area * aspect).sqrt().clamp(2.0, max_h);
    let sw = (area / sh).clamp(2.0, max_w);
    if rng.gen_bool(0.5) {
        let (sh, sw) = (sh.round() as usize, sw.round() as usize);
        let y0 = rng.gen_range(0..=h - sh);
        let x0 = rng.gen_range(0..=w - sw);
        Shape::Rect {
            y0,
            x0,
            y1: y0 + sh,
            x1: x0 + sw,
        }
    } else {
        // ellipse with the same area as an sh x sw box scaled by 4/pi
        let ry = (sh / 2.0) * (4.0 / std::f64::consts::PI).sqrt();
        let rx = (sw / 2.0) * (4.0 / std::f64::consts::PI).sqrt();
        let ry = ry.min(h as f64 / 2.0);
        let rx = rx.min(w as f64 / 2.0);
        Shape::Ellipse {
            cy: rng.gen_range(ry..=h as f64 - ry),
            cx: rng.gen_range(rx..=w as f64 - rx),
            ry,
            rx,
        }
    }
}

fn shape_area(shape: &Shape, h: usize, w: usize) -> usize {
    let (y0, x0, y1, x1) = shape.bounds();
    (y0..y1.min(h))
        .flat_map(|y| (x0..x1.min(w)).map(move |x| (y, x)))
        .filter(|&(y, x)| shape.contains(y, x))
        .count()
}

fn contrasting_color(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    loop {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        if c.iter().zip(&base).any(|(a, b)| (a - b).abs() >= MIN_CONTRAST) {
            return c;
        }
    }
}

fn draw(img: &mut [f32], h: usize, w: usize, rec: &ShapeRecord) {
    let (y0, x0, y1, x1) = rec.shape.bounds();
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            if rec.shape.contains(y, x) {
                for c in 0..3 {
                    img[(c * h + y) * w + x] = rec.color[c];
                }
            }
        }
    }
}

/// Generates sample `index` of a dataset; randomness derives from `(seed, index)` only.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let base = [
        rng.gen_range(0.2..0.6f32),
        rng.gen_range(0.2..0.6f32),
        rng.gen_range(0.2..0.6f32),
    ];
    let (fy, fx, phase) = (
        rng.gen_range(0.05..0.3f32),
        rng.gen_range(0.05..0.3f32),
        rng.gen_range(0.0..std::f32::consts::TAU),
    );
    let mut background = vec![0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let wave = 0.06 * ((fy * y as f32 + phase + c as f32).sin() + (fx * x as f32 - phase).cos());
                let grain = rng.gen_range(-0.03..0.03f32);
                background[(c * h + y) * w + x] = (base[c] + wave + grain).clamp(0.0, 1.0);
            }
        }
    }

    let total = (h * w) as f64;
    let mut persistent: Vec<ShapeRecord> = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let area = total * rng.gen_range(0.02..0.06);
        let shape = random_shape(&mut rng, h, w, area);
        let color = [rng.gen(), rng.gen(), rng.gen()];
        persistent.push(ShapeRecord { shape, color });
    }

    let target = cfg.change_fraction * total;
    let mut changed: Vec<(ShapeRecord, bool)> = Vec::new();
    let mut covered = 0usize;
    let mut tries = 0;
    while (covered as f64) < target && tries < MAX_PLACEMENT_TRIES {
        tries += 1;
        let remaining = target - covered as f64;
        let area = remaining.clamp(0.01 * total, 0.06 * total) * rng.gen_range(0.7..1.3);
        let shape = random_shape(&mut rng, h, w, area);
        let clear = persistent.iter().all(|p| shape.separated(&p.shape, 1))
            && changed.iter().all(|(c, _)| shape.separated(&c.shape, 1));
        if !clear {
            continue;
        }
        let color = contrasting_color(&mut rng, base);
        let added = rng.gen_bool(0.5);
        covered += shape_area(&shape, h, w);
        changed.push((ShapeRecord { shape, color }, added));
    }

    let mut t1 = background.clone();
    let mut t2 = background;
    let mut t1_shapes = persistent.clone();
    let mut t2_shapes = persistent.clone();
    for p in &persistent {
        draw(&mut t1, h, w, p);
        draw(&mut t2, h, w, p);
    }
    for (rec, added) in &changed {
        if *added {
            draw(&mut t2, h, w, rec);
            t2_shapes.push(*rec);
        } else {
            draw(&mut t1, h, w, rec);
            t1_shapes.push(*rec);
        }
    }
    for v in t2.iter_mut() {
        *v = (*v + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
    }

    let label = Mask::from_fn(h, w, |y, x| changed.iter().any(|(r, _)| r.shape.contains(y, x)));
    let pair = SamplePair::new(
        format!("s{index:04}"),
        Tensor::new(&[3, h, w], t1)?,
        Tensor::new(&[3, h, w], t2)?,
        label,
    )?;
    Ok(SynthSample {
        pair,
        t1_shapes,
        t2_shapes,
    })
}

/// `count` synthetic pairs of size `height x width`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    (0..cfg.count).map(|i| synth_sample(cfg, i).map(|s| s.pair)).collect()
}

#[cfg(test)]
mod tests {
    use rayon::prelude::*;

    use super::*;

    fn cfg(seed: u64, count: usize, size: usize, f: f64) -> SynthConfig {
        SynthConfig {
            seed,
            count,
            height: size,
            width: size,
            change_fraction: f,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_generate(&cfg(5, 4, 32, 0.1)).unwrap();
        let b = synth_generate(&cfg(5, 4, 32, 0.1)).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.t1.data(), q.t1.data());
            assert_eq!(p.t2.data(), q.t2.data());
            assert_eq!(p.label, q.label);
        }
        let c = synth_generate(&cfg(6, 1, 32, 0.1)).unwrap();
        assert_ne!(a[0].t1.data(), c[0].t1.data());
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let c = cfg(9, 6, 24, 0.2);
        let seq = synth_generate(&c).unwrap();
        let par: Vec<_> = (0..6)
            .into_par_iter()
            .map(|i| synth_sample(&c, i).unwrap().pair)
            .collect();
        for (p, q) in seq.iter().zip(&par) {
            assert_eq!(p.t2.data(), q.t2.data());
        }
    }

    #[test]
    fn density_tracks_target() {
        let pairs = synth_generate(&cfg(1, 100, 64, 0.1)).unwrap();
        let mean = pairs.iter().map(|p| p.label.density()).sum::<f64>() / 100.0;
        assert!((0.05..=0.15).contains(&mean), "mean density {mean}");
    }

    #[test]
    fn label_is_symmetric_difference_of_shape_sets() {
        let c = cfg(2, 10, 48, 0.15);
        for i in 0..c.count {
            let s = synth_sample(&c, i).unwrap();
            let only_one: Vec<_> = s
                .t1_shapes
                .iter()
                .filter(|r| !s.t2_shapes.contains(r))
                .chain(s.t2_shapes.iter().filter(|r| !s.t1_shapes.contains(r)))
                .collect();
            assert!(!only_one.is_empty());
            for y in 0..48 {
                for x in 0..48 {
                    let want = only_one.iter().any(|r| r.shape.contains(y, x));
                    assert_eq!(s.pair.label.get(y, x), want);
                }
            }
        }
    }

    #[test]
    fn changed_pixels_actually_differ() {
        let c = cfg(3, 8, 40, 0.1);
        for p in synth_generate(&c).unwrap() {
            let (h, w) = p.spatial();
            for y in 0..h {
                for x in 0..w {
                    let diff = (0..3)
                        .map(|ch| (p.t1.data()[(ch * h + y) * w + x] - p.t2.data()[(ch * h + y) * w + x]).abs())
                        .fold(0.0f32, f32::max);
                    if p.label.get(y, x) {
                        assert!(diff > 0.1, "changed pixel with diff {diff}");
                    } else {
                        assert!(diff <= 2.0 * NOISE_AMPLITUDE + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(synth_generate(&cfg(0, 1, 32, 0.0)).is_err());
        assert!(synth_generate(&cfg(0, 1, 32, 0.5)).is_err());
    }
}

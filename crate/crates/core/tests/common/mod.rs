//! Synthetic natural-like scenes: smooth shaded background, antialiased
//! discs and boxes (some striped), camera pan and independently moving
//! objects. Frames are 8-bit quantized.

#![allow(dead_code)]

use rand::Rng;
use vdenoise::image::{FrameSequence, Image};
use vdenoise::rng::stream_rng;

#[derive(Clone, Debug)]
enum Outline {
    Disc { radius: f64 },
    Box { half_h: f64, half_w: f64 },
}

#[derive(Clone, Debug)]
struct Shape {
    outline: Outline,
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    color: [f64; 3],
    /// Stripe frequency, orientation and contrast.
    stripes: Option<(f64, f64, f64)>,
}

impl Shape {
    fn coverage(&self, y: f64, x: f64, t: f64) -> f64 {
        let (dy, dx) = (y - (self.cy + self.vy * t), x - (self.cx + self.vx * t));
        let signed = match self.outline {
            Outline::Disc { radius } => (dy * dy + dx * dx).sqrt() - radius,
            Outline::Box { half_h, half_w } => (dy.abs() - half_h).max(dx.abs() - half_w),
        };
        (0.5 - signed).clamp(0.0, 1.0)
    }

    fn color(&self, y: f64, x: f64, t: f64, c: usize) -> f64 {
        match self.stripes {
            None => self.color[c],
            Some((freq, angle, contrast)) => {
                let (dy, dx) = (y - self.vy * t, x - self.vx * t);
                let phase = freq * (dx * angle.cos() + dy * angle.sin());
                self.color[c] + contrast * phase.sin()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    base: [f64; 3],
    gradient: [(f64, f64); 3],
    waves: Vec<(f64, f64, f64, f64, usize)>,
    shapes: Vec<Shape>,
}

impl Scene {
    pub fn random(seed: u64, h: usize, w: usize) -> Scene {
        let mut rng = stream_rng(seed, 0);
        let (hf, wf) = (h as f64, w as f64);
        let base = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
        let gradient = [(); 3].map(|_| (rng.random_range(-0.3..0.3) / hf, rng.random_range(-0.3..0.3) / wf));
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.08),
                    rng.random_range(0.02..0.08),
                    rng.random_range(0.0..6.28),
                    rng.random_range(0.02..0.07),
                    rng.random_range(0..3),
                )
            })
            .collect();
        let count = rng.random_range(6..11);
        let shapes = (0..count)
            .map(|i| {
                let size = rng.random_range(0.06..0.22) * hf.min(wf);
                let outline = if rng.random_bool(0.5) {
                    Outline::Disc { radius: size }
                } else {
                    Outline::Box {
                        half_h: size * rng.random_range(0.5..1.2),
                        half_w: size * rng.random_range(0.5..1.2),
                    }
                };
                let moving = i % 3 == 0;
                Shape {
                    outline,
                    cy: rng.random_range(0.0..hf),
                    cx: rng.random_range(0.0..wf),
                    vy: if moving { rng.random_range(-1.0..1.0) } else { 0.0 },
                    vx: if moving { rng.random_range(-1.5..1.5) } else { 0.0 },
                    color: [(); 3].map(|_| rng.random_range(0.08..0.92)),
                    stripes: rng.random_bool(0.35).then(|| {
                        (rng.random_range(0.3..1.2), rng.random_range(0.0..3.14), rng.random_range(0.05..0.15))
                    }),
                }
            })
            .collect();
        Scene {
            base,
            gradient,
            waves,
            shapes,
        }
    }

    /// Scene value at continuous position `(y, x)` and time `t`.
    pub fn sample(&self, y: f64, x: f64, t: f64, c: usize) -> f64 {
        let mut v = self.base[c] + self.gradient[c].0 * y + self.gradient[c].1 * x;
        for &(fy, fx, ph, amp, ch) in &self.waves {
            if ch == c {
                v += amp * (fy * y + fx * x + ph).sin();
            }
        }
        for s in &self.shapes {
            let a = s.coverage(y, x, t);
            if a > 0.0 {
                v = (1.0 - a) * v + a * s.color(y, x, t, c);
            }
        }
        v.clamp(0.02, 0.98)
    }

    /// Frame at time `t` seen by a camera whose top-left corner sits at
    /// `(oy, ox)`.
    pub fn render(&self, h: usize, w: usize, oy: f64, ox: f64, t: f64) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| self.sample(y as f64 + oy, x as f64 + ox, t, c)).quantized_8bit()
    }
}

/// Still image of a random scene.
pub fn still(seed: u64, h: usize, w: usize) -> Image {
    Scene::random(seed, h, w).render(h, w, 0.0, 0.0, 0.0)
}

/// Sequence with a camera pan of `pan = (vy, vx)` pixels per frame plus
/// independently moving objects.
pub fn sequence(seed: u64, n: usize, h: usize, w: usize, pan: (f64, f64)) -> FrameSequence {
    let scene = Scene::random(seed, h, w);
    let frames = (0..n)
        .map(|t| scene.render(h, w, pan.0 * t as f64, pan.1 * t as f64, t as f64))
        .collect();
    FrameSequence::new(frames).expect("frames share a shape")
}

/// Translate a frame by an integer offset with edge clamping:
/// `out(y, x) = img(y - dy, x - dx)`.
pub fn shifted(img: &Image, dy: isize, dx: isize) -> Image {
    Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        img.get_clamped(y as isize - dy, x as isize - dx, c)
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

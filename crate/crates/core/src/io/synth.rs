//! Procedural datasets standing in for real image and video corpora.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Number of classes produced by the class-structured generators.
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// A shape moving over a smooth background; the class sets the direction.
    MovingShapes,
    /// Smooth color gradients with a sinusoidal texture.
    GradientTexture,
    /// Checkerboards; the class sets the cell size.
    Checkerboard,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::MovingShapes => "moving-shapes",
            SynthKind::GradientTexture => "gradient-texture",
            SynthKind::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-shapes" => Ok(SynthKind::MovingShapes),
            "gradient-texture" => Ok(SynthKind::GradientTexture),
            "checkerboard" => Ok(SynthKind::Checkerboard),
            other => Err(Error::invalid(format!(
                "unsupported dataset kind '{other}' (expected moving-shapes, gradient-texture or checkerboard)"
            ))),
        }
    }
}

/// One sample: pixels `[F, H, W, 3]` in `[-1, 1]` and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Tensor,
    pub class: usize,
}

/// Axis-aligned box `[x0, x1) × [y0, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn union(self, o: Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// `n` deterministic samples of `frames` frames (`0` means a single image).
pub fn synth_dataset(kind: SynthKind, n: usize, resolution: usize, frames: usize, seed: u64) -> Result<Vec<Sample>> {
    if resolution < 4 {
        return Err(Error::invalid(format!("synthetic resolution {resolution} is too small")));
    }
    let frames = frames.max(1);
    let root = RngStream::new(seed).split(kind as u64);
    (0..n)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let class = i % NUM_CLASSES;
            Ok(match kind {
                SynthKind::MovingShapes => moving_shape(&mut rng, class, resolution, frames).0,
                SynthKind::GradientTexture => gradient_texture(&mut rng, class, resolution, frames),
                SynthKind::Checkerboard => checkerboard(&mut rng, class, resolution, frames),
            })
        })
        .collect()
}

/// Per-frame bounding boxes of the moving shape of sample `i` of a
/// moving-shapes dataset.
pub fn moving_shape_boxes(i: usize, resolution: usize, frames: usize, seed: u64) -> Vec<Rect> {
    let mut rng = RngStream::new(seed).split(SynthKind::MovingShapes as u64).split(i as u64);
    moving_shape(&mut rng, i % NUM_CLASSES, resolution, frames.max(1)).1
}

struct Background {
    base: [f64; 3],
    gx: [f64; 3],
    gy: [f64; 3],
}

impl Background {
    fn random(rng: &mut RngStream) -> Self {
        let mut c = || [0.0; 3].map(|_: f64| rng.uniform() * 2.0 - 1.0);
        let base = c().map(|v| 0.5 * v);
        let gx = c().map(|v| 0.5 * v);
        let gy = c().map(|v| 0.5 * v);
        Self { base, gx, gy }
    }

    /// Color at normalized coordinates `u, v ∈ [-1, 1]`.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| (self.base[k] + self.gx[k] * u + self.gy[k] * v).clamp(-1.0, 1.0))
    }
}

fn coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

fn moving_shape(rng: &mut RngStream, class: usize, res: usize, frames: usize) -> (Sample, Vec<Rect>) {
    let bg = Background::random(rng);
    let color = [0.0; 3].map(|_: f64| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign * (0.55 + 0.4 * rng.uniform())
    });
    let disc = rng.uniform() < 0.5;
    let size = (res / 4).max(2) + rng.below((res / 8).max(1) + 1);
    let speed = (res / 32).max(1) + rng.below(2);
    // class → direction: right, left, down, up
    let (dx, dy): (isize, isize) = match class % 4 {
        0 => (1, 0),
        1 => (-1, 0),
        2 => (0, 1),
        _ => (0, -1),
    };
    let travel = speed * (frames - 1);
    let span = res.saturating_sub(size + 1);
    // start so the whole trajectory stays inside the frame
    let pick = |rng: &mut RngStream, d: isize| -> usize {
        let room = span.saturating_sub(if d == 0 { 0 } else { travel });
        let s = rng.below(room + 1);
        if d < 0 {
            s + travel.min(span)
        } else {
            s
        }
    };
    let x0 = pick(rng, dx);
    let y0 = pick(rng, dy);

    let mut data = Vec::with_capacity(frames * res * res * 3);
    let mut boxes = Vec::with_capacity(frames);
    for t in 0..frames {
        let step = (speed * t) as isize;
        let sx = (x0 as isize + dx * step).clamp(0, span as isize) as usize;
        let sy = (y0 as isize + dy * step).clamp(0, span as isize) as usize;
        let rect = Rect {
            x0: sx,
            y0: sy,
            x1: sx + size,
            y1: sy + size,
        };
        boxes.push(rect);
        let r = size as f64 / 2.0;
        let (cx, cy) = (sx as f64 + r, sy as f64 + r);
        for y in 0..res {
            for x in 0..res {
                let inside = rect.contains(x, y)
                    && (!disc || {
                        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        px * px + py * py <= r * r
                    });
                let px = if inside { color } else { bg.at(coord(x, res), coord(y, res)) };
                data.extend_from_slice(&px);
            }
        }
    }
    let pixels = Tensor::new(&[frames, res, res, 3], data).expect("sized above");
    (Sample { pixels, class }, boxes)
}

fn gradient_texture(rng: &mut RngStream, class: usize, res: usize, frames: usize) -> Sample {
    let bg = Background::random(rng);
    let amp = 0.1 + 0.3 * rng.uniform();
    let freq = 1.0 + 3.0 * rng.uniform();
    let angle = rng.uniform() * std::f64::consts::TAU;
    let phase = rng.uniform() * std::f64::consts::TAU;
    let drift = 0.3 * (rng.uniform() - 0.5);
    let (fx, fy) = (freq * angle.cos() * std::f64::consts::PI, freq * angle.sin() * std::f64::consts::PI);
    let pixels = Tensor::from_fn(&[frames, res, res, 3], |i| {
        let k = i % 3;
        let x = (i / 3) % res;
        let y = (i / (3 * res)) % res;
        let t = i / (3 * res * res);
        let (u, v) = (coord(x, res), coord(y, res));
        let tex = amp * (fx * u + fy * v + phase + drift * t as f64 + k as f64).sin();
        (bg.at(u, v)[k] + tex).clamp(-1.0, 1.0)
    });
    Sample { pixels, class }
}

fn checkerboard(rng: &mut RngStream, class: usize, res: usize, frames: usize) -> Sample {
    let cell = ((res / 32).max(1) << (class % 4)).min(res);
    let a = [0.0; 3].map(|_: f64| rng.uniform() * 2.0 - 1.0);
    let b = [0.0; 3].map(|_: f64| rng.uniform() * 2.0 - 1.0);
    let (ox, oy) = (rng.below(cell), rng.below(cell));
    let pixels = Tensor::from_fn(&[frames, res, res, 3], |i| {
        let k = i % 3;
        let x = (i / 3) % res;
        let y = (i / (3 * res)) % res;
        if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
            a[k]
        } else {
            b[k]
        }
    });
    Sample { pixels, class }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        for kind in [SynthKind::MovingShapes, SynthKind::GradientTexture, SynthKind::Checkerboard] {
            let a = synth_dataset(kind, 3, 16, 5, 9).unwrap();
            let b = synth_dataset(kind, 3, 16, 5, 9).unwrap();
            assert_eq!(a, b);
            let c = synth_dataset(kind, 3, 16, 5, 10).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn zero_frames_is_one_image() {
        let d = synth_dataset(SynthKind::GradientTexture, 2, 8, 0, 1).unwrap();
        assert_eq!(d[0].pixels.shape(), &[1, 8, 8, 3]);
    }

    #[test]
    fn values_in_unit_range() {
        for kind in [SynthKind::MovingShapes, SynthKind::GradientTexture, SynthKind::Checkerboard] {
            for s in synth_dataset(kind, 8, 32, 9, 2).unwrap() {
                assert!(s.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("noise".parse::<SynthKind>().is_err());
        assert_eq!("moving-shapes".parse::<SynthKind>().unwrap(), SynthKind::MovingShapes);
    }

    #[test]
    fn moving_shapes_change_only_inside_the_shape_boxes() {
        let (res, frames, seed) = (32, 9, 4);
        let data = synth_dataset(SynthKind::MovingShapes, 8, res, frames, seed).unwrap();
        for (i, s) in data.iter().enumerate() {
            let boxes = moving_shape_boxes(i, res, frames, seed);
            let px = s.pixels.data();
            let mut moved = false;
            for t in 0..frames - 1 {
                let region = boxes[t].union(boxes[t + 1]);
                for y in 0..res {
                    for x in 0..res {
                        for k in 0..3 {
                            let a = px[((t * res + y) * res + x) * 3 + k];
                            let b = px[(((t + 1) * res + y) * res + x) * 3 + k];
                            if a != b {
                                assert!(region.contains(x, y), "sample {i} frame {t} pixel ({x},{y})");
                                moved = true;
                            }
                        }
                    }
                }
            }
            assert!(moved, "sample {i} is static");
        }
    }
}

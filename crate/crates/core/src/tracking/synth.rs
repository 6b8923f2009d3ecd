//! Deterministic synthetic sequences: one textured target moving over a
//! textured background, optionally with a distractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Pixels per frame.
    ConstantVelocity { vx: f64, vy: f64 },
    /// `center + amplitude * sin(2 pi t / period)` on each axis.
    Sinusoidal {
        amplitude_x: f64,
        amplitude_y: f64,
        period: f64,
    },
}

impl Motion {
    fn offset(&self, t: f64) -> (f64, f64) {
        match *self {
            Motion::ConstantVelocity { vx, vy } => (vx * t, vy * t),
            Motion::Sinusoidal {
                amplitude_x,
                amplitude_y,
                period,
            } => {
                let s = (std::f64::consts::TAU * t / period).sin();
                (amplitude_x * s, amplitude_y * s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub frame_width: usize,
    pub frame_height: usize,
    pub length: usize,
    pub target_width: f64,
    pub target_height: f64,
    /// Initial target center; the frame center when absent.
    #[serde(default)]
    pub start: Option<(f64, f64)>,
    pub motion: Motion,
    /// Relative size change per frame: `w_t = w_0 (1 + drift)^t`.
    #[serde(default)]
    pub size_drift: f64,
    pub texture_seed: u64,
    #[serde(default)]
    pub distractor: bool,
}

impl SynthSpec {
    /// Constant-velocity sequence with a target of at least 32 pixels and no
    /// distractor.
    pub fn easy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.0..2.0);
        Self {
            frame_width: 128,
            frame_height: 128,
            length: 30,
            target_width: rng.random_range(32.0..44.0),
            target_height: rng.random_range(32.0..44.0),
            start: Some((rng.random_range(40.0..88.0), rng.random_range(40.0..88.0))),
            motion: Motion::ConstantVelocity {
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            },
            size_drift: 0.0,
            texture_seed: seed,
            distractor: false,
        }
    }

    /// Mixed-difficulty sequence: either motion model, size drift, and a
    /// distractor in a third of the sequences.
    pub fn varied(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let motion = if rng.random_bool(0.6) {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.0..3.0);
            Motion::ConstantVelocity {
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        } else {
            Motion::Sinusoidal {
                amplitude_x: rng.random_range(0.0..30.0),
                amplitude_y: rng.random_range(0.0..30.0),
                period: rng.random_range(15.0..60.0),
            }
        };
        Self {
            frame_width: 128,
            frame_height: 128,
            length: 30,
            target_width: rng.random_range(24.0..52.0),
            target_height: rng.random_range(24.0..52.0),
            start: Some((rng.random_range(32.0..96.0), rng.random_range(32.0..96.0))),
            motion,
            size_drift: rng.random_range(-0.01..0.01),
            texture_seed: seed,
            distractor: rng.random_bool(1.0 / 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synth_sequence", msg));
        if self.frame_width == 0 || self.frame_height == 0 || self.length == 0 {
            return bad(format!(
                "frame {}x{}, length {}",
                self.frame_width, self.frame_height, self.length
            ));
        }
        if !(self.target_width > 0.0 && self.target_height > 0.0) {
            return bad(format!("target {}x{}", self.target_width, self.target_height));
        }
        if self.target_width > self.frame_width as f64 || self.target_height > self.frame_height as f64 {
            return bad("target larger than the frame".into());
        }
        if !(self.size_drift > -1.0 && self.size_drift.is_finite()) {
            return bad(format!("size drift {}", self.size_drift));
        }
        if let Motion::Sinusoidal { period, .. } = self.motion {
            if !(period > 0.0) {
                return bad(format!("period {period}"));
            }
        }
        Ok(())
    }
}

/// Object appearance: a two-tone checkerboard in object coordinates.
#[derive(Debug, Clone, Copy)]
struct Appearance {
    color: [f64; 3],
    alt: [f64; 3],
    cells: f64,
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng, avoid: [f64; 3]) -> Self {
        let color = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let d: f64 = c.iter().zip(&avoid).map(|(a, b)| (a - b).powi(2)).sum();
            if d.sqrt() >= 0.45 {
                break c;
            }
        };
        let shade = rng.random_range(0.45..0.7);
        Self {
            color,
            alt: color.map(|v| v * shade),
            cells: rng.random_range(2..5) as f64,
        }
    }

    /// Color at normalized object coordinates `(u, v)` in `[0, 1)`.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let (i, j) = ((u * self.cells).floor() as i64, (v * self.cells).floor() as i64);
        if (i + j).rem_euclid(2) == 0 {
            self.color
        } else {
            self.alt
        }
    }
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Background {
    base: [f64; 3],
    gratings: Vec<Grating>,
    noise: f64,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let base = std::array::from_fn(|_| rng.random_range(0.3..0.7));
        let gratings = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / rng.random_range(8.0..40.0);
                Grating {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: std::array::from_fn(|_| rng.random_range(0.02..0.08)),
                }
            })
            .collect();
        Self {
            base,
            gratings,
            noise: 0.02,
        }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for g in &self.gratings {
            let s = (g.kx * x + g.ky * y + g.phase).sin();
            for ch in 0..3 {
                c[ch] += g.amp[ch] * s;
            }
        }
        c
    }
}

/// Paints `b` over `img` with per-pixel area coverage at the edges.
fn paint(img: &mut [f64], width: usize, height: usize, b: &BoundingBox, look: &Appearance) {
    let [x0, y0, x1, y1] = b.corners();
    let cols = (x0.floor().max(0.0) as usize)..(x1.ceil().min(width as f64) as usize);
    let rows = (y0.floor().max(0.0) as usize)..(y1.ceil().min(height as f64) as usize);
    for py in rows {
        let cy = ((py + 1) as f64).min(y1) - (py as f64).max(y0);
        if cy <= 0.0 {
            continue;
        }
        for px in cols.clone() {
            let cx = ((px + 1) as f64).min(x1) - (px as f64).max(x0);
            if cx <= 0.0 {
                continue;
            }
            let alpha = cx * cy;
            let u = ((px as f64 + 0.5 - x0) / b.w).clamp(0.0, 0.999_999);
            let v = ((py as f64 + 0.5 - y0) / b.h).clamp(0.0, 0.999_999);
            let c = look.at(u, v);
            let p = &mut img[(py * width + px) * 3..][..3];
            for ch in 0..3 {
                p[ch] = p[ch] * (1.0 - alpha) + c[ch] * alpha;
            }
        }
    }
}

/// Keeps `b` inside the frame; returns whether it had to move.
fn clamp_inside(b: &mut BoundingBox, width: f64, height: f64) -> bool {
    let mut moved = false;
    let w = b.w.min(width);
    let h = b.h.min(height);
    if w != b.w || h != b.h {
        (b.w, b.h) = (w, h);
        moved = true;
    }
    let cx = b.cx.clamp(0.5 * w, width - 0.5 * w);
    let cy = b.cy.clamp(0.5 * h, height - 0.5 * h);
    if cx != b.cx || cy != b.cy {
        (b.cx, b.cy) = (cx, cy);
        moved = true;
    }
    moved
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders the sequence described by `spec`. Pixel values are multiples of
/// 1/255, so frames survive an 8-bit image round trip unchanged.
pub fn synth_sequence(spec: &SynthSpec, name: impl Into<String>) -> Result<Sequence> {
    spec.validate()?;
    let (fw, fh) = (spec.frame_width as f64, spec.frame_height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let background = Background::sample(&mut rng);
    let target = Appearance::sample(&mut rng, background.base);
    let other = Appearance::sample(&mut rng, target.color);
    let (sx, sy) = spec.start.unwrap_or((0.5 * fw, 0.5 * fh));
    let distractor_start = (fw - sx, fh - sy);
    let distractor_motion = match spec.motion {
        Motion::ConstantVelocity { vx, vy } => Motion::ConstantVelocity { vx: -vy, vy: vx },
        m => m,
    };

    let mut frames = Vec::with_capacity(spec.length);
    let mut gt = Vec::with_capacity(spec.length);
    let mut clamped = false;
    for t in 0..spec.length {
        let tf = t as f64;
        let grow = (1.0 + spec.size_drift).powi(t as i32);
        let (dx, dy) = spec.motion.offset(tf);
        let mut b = BoundingBox::new(sx + dx, sy + dy, spec.target_width * grow, spec.target_height * grow);
        clamped |= clamp_inside(&mut b, fw, fh);

        let mut img = Vec::with_capacity(spec.frame_width * spec.frame_height * 3);
        for y in 0..spec.frame_height {
            for x in 0..spec.frame_width {
                let c = background.at(x as f64 + 0.5, y as f64 + 0.5);
                for ch in c {
                    img.push(ch + rng.random_range(-background.noise..background.noise));
                }
            }
        }
        if spec.distractor {
            let (ex, ey) = distractor_motion.offset(tf);
            let mut d = BoundingBox::new(distractor_start.0 + ex, distractor_start.1 + ey, b.w, b.h);
            clamp_inside(&mut d, fw, fh);
            paint(&mut img, spec.frame_width, spec.frame_height, &d, &other);
        }
        paint(&mut img, spec.frame_width, spec.frame_height, &b, &target);
        let img = img.into_iter().map(quantize).collect();
        frames.push(Tensor::new(vec![spec.frame_height, spec.frame_width, 3], img)?);
        gt.push(b);
    }
    let mut seq = Sequence::new(name, frames, gt)?;
    seq.clamped = clamped;
    Ok(seq)
}

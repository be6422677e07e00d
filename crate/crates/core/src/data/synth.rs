//! Built-in synthetic image families.
//!
//! Two visually disjoint 10-class domains that need no downloads: colored
//! geometric shapes and seven-segment digit glyphs. Rendering is deliberately
//! noisy (textured backgrounds, low-contrast strokes, distractor blobs) so
//! classifiers trained on these sets have realistic margins instead of
//! saturating. Every item is rendered deterministically from
//! (family, split, seed, index), so handles are reproducible and train/test
//! splits never overlap.

use super::Split;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASS_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SynthFamily {
    Shapes,
    Digits,
}

impl SynthFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthFamily::Shapes => "shapes",
            SynthFamily::Digits => "digits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shapes" => Some(SynthFamily::Shapes),
            "digits" => Some(SynthFamily::Digits),
            _ => None,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn item_rng(family: SynthFamily, split: Split, seed: u64, index: u64) -> ChaCha8Rng {
    let fam = match family {
        SynthFamily::Shapes => 1u64,
        SynthFamily::Digits => 2u64,
    };
    let sp = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    let mixed = splitmix(splitmix(splitmix(seed ^ (fam << 32)) ^ (sp << 16)) ^ index);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Render one item; returns interleaved RGB bytes (HWC) and the label.
pub fn render(
    family: SynthFamily,
    split: Split,
    seed: u64,
    index: u64,
    resolution: usize,
) -> (Vec<u8>, usize) {
    let label = (index % CLASS_COUNT as u64) as usize;
    let mut rng = item_rng(family, split, seed, index);
    let canvas = match family {
        SynthFamily::Shapes => render_shape(label, resolution, &mut rng),
        SynthFamily::Digits => render_digit(label, resolution, &mut rng),
    };
    let bytes = canvas.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (bytes, label)
}

/// Flat HWC canvas helpers.
struct Canvas {
    data: Vec<f64>,
    res: usize,
}

impl Canvas {
    fn filled(res: usize, color: [f64; 3]) -> Self {
        let mut data = vec![0.0; res * res * 3];
        for px in data.chunks_mut(3) {
            px.copy_from_slice(&color);
        }
        Canvas { data, res }
    }

    /// Low-frequency directional shading plus per-pixel speckle.
    fn texture(&mut self, shade: f64, speckle: f64, rng: &mut ChaCha8Rng) {
        let r = self.res as f64;
        let gx = rng.random_range(-shade..shade);
        let gy = rng.random_range(-shade..shade);
        for i in 0..self.res {
            for j in 0..self.res {
                let base = gx * (j as f64 / r - 0.5) + gy * (i as f64 / r - 0.5);
                let off = (i * self.res + j) * 3;
                for c in 0..3 {
                    self.data[off + c] += base + rng.random_range(-speckle..speckle);
                }
            }
        }
    }

    fn paint<F: Fn(f64, f64) -> bool>(&mut self, color: [f64; 3], mask: F) {
        for i in 0..self.res {
            for j in 0..self.res {
                if mask(i as f64, j as f64) {
                    let off = (i * self.res + j) * 3;
                    self.data[off..off + 3].copy_from_slice(&color);
                }
            }
        }
    }

    /// A small elliptical blob that carries no class information.
    fn distractor(&mut self, rng: &mut ChaCha8Rng) {
        let r = self.res as f64;
        let cy = rng.random_range(0.0..r);
        let cx = rng.random_range(0.0..r);
        let ry = rng.random_range(0.04..0.12) * r;
        let rx = rng.random_range(0.04..0.12) * r;
        let color = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        self.paint(color, |i, j| {
            let u = (i - cy) / ry;
            let v = (j - cx) / rx;
            u * u + v * v <= 1.0
        });
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// The shapes family carries its class in a low-amplitude micro-texture
/// painted inside an uninformative blob: ten fill patterns distinguished by
/// orientation, frequency and structure. Fine, faint patterns make trained
/// classifiers sensitive to exactly the feature band a bounded perturbation
/// can reach, while staying robust to unstructured noise.
fn render_shape(label: usize, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bg = random_color(rng, 0.25, 0.60);
    let mut fill = bg;
    for c in &mut fill {
        *c = (*c + rng.random_range(-0.12..0.12)).clamp(0.05, 0.95);
    }
    let mut canvas = Canvas::filled(res, bg);
    let r = res as f64;
    let cy = r / 2.0 + rng.random_range(-r / 8.0..r / 8.0);
    let cx = r / 2.0 + rng.random_range(-r / 8.0..r / 8.0);
    let ry = rng.random_range(0.30..0.46) * r;
    let rx = rng.random_range(0.30..0.46) * r;
    let inside = move |i: f64, j: f64| {
        let u = (i - cy) / ry;
        let v = (j - cx) / rx;
        u * u + v * v <= 1.0
    };
    canvas.paint(fill, inside);

    // class texture: amplitude well above the speckle floor but well below
    // full contrast
    let amp = rng.random_range(0.06..0.11);
    let fine = rng.random_range(2..5i64);
    let coarse = rng.random_range(5..8i64);
    let phase = rng.random_range(0..4i64);
    let pattern: Box<dyn Fn(i64, i64) -> f64> = match label {
        0 => Box::new(move |i, _| if ((i + phase) / fine) % 2 == 0 { 1.0 } else { -1.0 }),
        1 => Box::new(move |_, j| if ((j + phase) / fine) % 2 == 0 { 1.0 } else { -1.0 }),
        2 => Box::new(move |i, j| if ((i + j + phase) / fine) % 2 == 0 { 1.0 } else { -1.0 }),
        3 => Box::new(move |i, j| {
            if ((i - j + phase + 64) / fine) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }),
        4 => Box::new(move |i, j| {
            let a = ((i + phase) / fine) % 2;
            let b = ((j + phase) / fine) % 2;
            if a == b {
                1.0
            } else {
                -1.0
            }
        }),
        5 => Box::new(move |i, j| {
            if (i + phase) % fine < 2 && (j + phase) % fine < 2 {
                1.6
            } else {
                -0.4
            }
        }),
        6 => Box::new(move |i, _| if ((i + phase) / coarse) % 2 == 0 { 1.0 } else { -1.0 }),
        7 => Box::new(move |_, j| if ((j + phase) / coarse) % 2 == 0 { 1.0 } else { -1.0 }),
        8 => Box::new(move |i, j| {
            let d = (((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt() as i64 + phase)
                / fine;
            if d % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }),
        _ => Box::new(|_, _| 0.0),
    };
    for i in 0..res {
        for j in 0..res {
            if inside(i as f64, j as f64) {
                let t = amp * pattern(i as i64, j as i64);
                let off = (i * res + j) * 3;
                for c in 0..3 {
                    canvas.data[off + c] += t;
                }
            }
        }
    }
    let n_distract = rng.random_range(0..=1u32);
    for _ in 0..n_distract {
        canvas.distractor(rng);
    }
    canvas.texture(0.15, 0.03, rng);
    canvas.data
}

/// Which of the seven segments (A top, B top-right, C bottom-right, D bottom,
/// E bottom-left, F top-left, G middle) each digit lights.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],    // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],   // 2
    [true, true, true, true, false, false, true],   // 3
    [false, true, true, false, false, true, true],  // 4
    [true, false, true, true, false, true, true],   // 5
    [true, false, true, true, true, true, true],    // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

/// Digits are thin, low-contrast seven-segment glyphs whose strokes carry a
/// fine carrier texture: both the faint mean offset and the high-frequency
/// modulation identify a stroke, so classification hinges on exactly the
/// feature band a bounded perturbation can reach.
fn render_digit(label: usize, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bg = random_color(rng, 0.30, 0.60);
    let delta = rng.random_range(0.05..0.13);
    let mut fg = bg;
    for c in &mut fg {
        *c = (*c + delta + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    let mut canvas = Canvas::filled(res, bg);
    let n_distract = rng.random_range(0..=1u32);
    for _ in 0..n_distract {
        canvas.distractor(rng);
    }
    let r = res as f64;
    let bh = rng.random_range(0.45..0.75) * r;
    let bw = bh * rng.random_range(0.48..0.64);
    let by = (r - bh) / 2.0 + rng.random_range(-r / 9.0..r / 9.0);
    let bx = (r - bw) / 2.0 + rng.random_range(-r / 9.0..r / 9.0);
    let t = (rng.random_range(0.09..0.14) * bw).max(1.1);
    let lit = SEGMENTS[label];

    let seg_masks: [Box<dyn Fn(f64, f64) -> bool>; 7] = [
        Box::new(move |i, j| i >= by && i <= by + t && j >= bx && j <= bx + bw),
        Box::new(move |i, j| j >= bx + bw - t && j <= bx + bw && i >= by && i <= by + bh / 2.0),
        Box::new(move |i, j| j >= bx + bw - t && j <= bx + bw && i >= by + bh / 2.0 && i <= by + bh),
        Box::new(move |i, j| i >= by + bh - t && i <= by + bh && j >= bx && j <= bx + bw),
        Box::new(move |i, j| j >= bx && j <= bx + t && i >= by + bh / 2.0 && i <= by + bh),
        Box::new(move |i, j| j >= bx && j <= bx + t && i >= by && i <= by + bh / 2.0),
        Box::new(move |i, j| {
            (i - (by + bh / 2.0)).abs() <= t / 2.0 && j >= bx && j <= bx + bw
        }),
    ];
    for (seg, on) in seg_masks.iter().zip(lit.iter()) {
        if *on {
            canvas.paint(fg, seg);
        }
    }
    // fine carrier on the lit strokes
    let carrier_amp = rng.random_range(0.05..0.09);
    let period = rng.random_range(3..5i64);
    let flavor = rng.random_range(0..2i64);
    for i in 0..res {
        for j in 0..res {
            let on_stroke =
                seg_masks.iter().zip(lit.iter()).any(|(seg, on)| *on && seg(i as f64, j as f64));
            if on_stroke {
                let (a, b) = ((i as i64 / period) % 2, (j as i64 / period) % 2);
                let sign = if flavor == 0 {
                    if a == b { 1.0 } else { -1.0 }
                } else if (a + b) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                let off = (i * res + j) * 3;
                for c in 0..3 {
                    canvas.data[off + c] += carrier_amp * sign;
                }
            }
        }
    }
    canvas.texture(0.12, 0.04, rng);
    canvas.data
}

//! Procedural dual-modality pedestrian sprites.
//!
//! Each identity owns a body shape, two clothing hues, a body scale and a
//! "heat" spot. Visible images are colored sprites on a gray background;
//! infrared images render the same geometry as gamma-curved luminance plus
//! the heat spot, replicated over three channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub identities: u32,
    /// Images per identity per modality.
    pub per_identity: u32,
    pub height: usize,
    pub width: usize,
    /// Maximum position jitter in pixels, drawn continuously.
    pub jitter: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Body height as a fraction of the image height.
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            per_identity: 4,
            height: 24,
            width: 12,
            jitter: 0.5,
            brightness: 0.15,
            scale_range: [0.75, 0.95],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.per_identity < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities and 2 images per identity, got {} and {}",
                self.identities, self.per_identity
            )));
        }
        if self.height < 8 || self.width < 4 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image size {}x{} must be even and at least 8x4",
                self.height, self.width
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "scale range {lo}..{hi} must lie in (0, 1]"
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!(
                "jitter {} must be finite and non-negative",
                self.jitter
            )));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::Config(format!(
                "brightness {} must lie in [0, 1)",
                self.brightness
            )));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        2 * (self.identities * self.per_identity) as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Appearance {
    kind: u32,
    torso: [f64; 3],
    legs: [f64; 3],
    scale: f64,
    heat_at: [f64; 2],
    heat_radius: f64,
    heat_gain: f64,
    gamma: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

impl Appearance {
    fn draw(identity: u32, spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let hue = rng.random::<f64>();
        let offset = rng.random_range(0.25..0.75);
        let sat = rng.random_range(0.65..0.95);
        let val = rng.random_range(0.6..0.95);
        let [lo, hi] = spec.scale_range;
        Self {
            kind: identity % 4,
            torso: hsv(hue, sat, val),
            legs: hsv(hue + offset, sat, val * rng.random_range(0.5..0.9)),
            scale: if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                lo
            },
            heat_at: [rng.random_range(0.3..0.7), rng.random_range(0.25..0.6)],
            heat_radius: rng.random_range(0.08..0.16),
            heat_gain: rng.random_range(40.0..90.0),
            gamma: rng.random_range(0.45..0.8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Region {
    Background,
    Head,
    Torso { stripe: bool },
    Legs,
}

/// Body-part lookup in pixel coordinates for one jittered pose.
struct Pose {
    top: f64,
    height: f64,
    center: f64,
    width: f64,
    kind: u32,
}

impl Pose {
    fn region(&self, y: f64, x: f64) -> Region {
        let t = (y - self.top) / self.height;
        let dx = (x - self.center) / self.width;
        if !(0.0..=1.0).contains(&t) {
            return Region::Background;
        }
        if t < 0.2 {
            let hr = 0.09;
            let (ty, tx) = ((t - 0.1) * self.height, dx * self.width);
            return if ty * ty + tx * tx <= (hr * self.height).powi(2) {
                Region::Head
            } else {
                Region::Background
            };
        }
        if t < 0.58 {
            let u = (t - 0.2) / 0.38;
            let inside = match self.kind {
                0 => dx.abs() <= 0.3,
                1 => dx.abs() <= 0.4 - 0.2 * u,
                2 => (dx / 0.38).powi(2) + ((u - 0.5) / 0.55).powi(2) <= 1.0,
                _ => dx.abs() <= 0.34,
            };
            return if inside {
                Region::Torso {
                    stripe: self.kind == 3 && ((u * 4.0) as u32) % 2 == 1,
                }
            } else {
                Region::Background
            };
        }
        let a = dx.abs();
        if (0.04..=0.2).contains(&a) {
            Region::Legs
        } else {
            Region::Background
        }
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Sub-samples per pixel along each axis; edges are anti-aliased.
const SUPERSAMPLE: usize = 3;

/// Colour at one point of the image plane.
fn shade(
    app: &Appearance,
    modality: Modality,
    pose: &Pose,
    background: f64,
    y: f64,
    x: f64,
) -> [f64; 3] {
    let skin = [225.0, 185.0, 150.0];
    let region = pose.region(y, x);
    let color = match region {
        Region::Background => [background; 3],
        Region::Head => skin,
        Region::Torso { stripe: false } => app.torso,
        Region::Torso { stripe: true } => app.torso.map(|c| c * 0.55),
        Region::Legs => app.legs,
    };
    match modality {
        Modality::Visible => color,
        Modality::Infrared => {
            let base = if region == Region::Background {
                background
            } else {
                255.0 * (luminance(color) / 255.0).powf(app.gamma)
            };
            let hy = (y - pose.top) / pose.height - app.heat_at[1];
            let hx = (x - pose.center) / pose.width + 0.5 - app.heat_at[0];
            let r2 = (hy * hy + hx * hx) / (app.heat_radius * app.heat_radius);
            [base + app.heat_gain * (-0.5 * r2).exp(); 3]
        }
    }
}

fn render(app: &Appearance, modality: Modality, spec: &SynthSpec, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let j = spec.jitter;
    let dy = j * rng.random_range(-1.0..=1.0);
    let dx = j * rng.random_range(-1.0..=1.0);
    let gain = 1.0 + spec.brightness * rng.random_range(-1.0..=1.0);
    let background = match modality {
        Modality::Visible => rng.random_range(50.0..100.0),
        Modality::Infrared => rng.random_range(10.0..40.0),
    };
    let body_h = app.scale * h as f64;
    let pose = Pose {
        top: (h as f64 - body_h) / 2.0 + dy,
        height: body_h,
        center: (w as f64 - 1.0) / 2.0 + dx,
        width: w as f64,
        kind: app.kind,
    };
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let yy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let xx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let v = shade(app, modality, &pose, background, yy, xx);
                    for c in 0..3 {
                        px[c] += v[c] / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + y * w + x] = (px[c] * gain).round().clamp(0.0, 255.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches data")
}

/// Render the whole dataset; a pure function of `spec`.
pub fn render_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let looks: Vec<Appearance> = (0..spec.identities)
        .map(|i| Appearance::draw(i, spec, &mut rng))
        .collect();
    let mut samples = Vec::with_capacity(spec.sample_count());
    for (identity, app) in (0u32..).zip(&looks) {
        for modality in Modality::ALL {
            for k in 0..spec.per_identity {
                samples.push(Sample {
                    image: render(app, modality, spec, &mut rng),
                    identity,
                    modality,
                    generated: false,
                    name: format!("{k:02}"),
                });
            }
        }
    }
    Ok(Dataset::new(samples))
}

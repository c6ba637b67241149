//! Procedural renderer: ten shape classes filled with ten texture
//! families over a low-contrast background.
//!
//! Geometry jitter (position, scale) and texture jitter (phase, period,
//! direction) come from separate streams keyed on the image's jitter
//! seed, so a re-render with a different texture keeps the exact shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::Rng;
use crate::tensor::Tensor;

pub const IMG_H: usize = 32;
pub const IMG_W: usize = 32;
pub const IMG_C: usize = 3;
pub const IMG_ELEMS: usize = IMG_C * IMG_H * IMG_W;
pub const NUM_CLASSES: usize = 10;
pub const NUM_TEXTURES: usize = 10;

pub const SHAPE_NAMES: [&str; NUM_CLASSES] = [
    "disk",
    "square",
    "triangle-up",
    "triangle-down",
    "cross",
    "ring",
    "diamond",
    "h-bar",
    "v-bar",
    "l-glyph",
];

pub const TEXTURE_NAMES: [&str; NUM_TEXTURES] = [
    "h-stripes",
    "v-stripes",
    "diag-stripes",
    "checker",
    "dots",
    "coarse-noise",
    "fine-noise",
    "linear-gradient",
    "sine-grating",
    "speckle",
];

/// Rendering parameters. The image geometry is fixed at 32x32x3 with ten
/// shape classes and ten texture families; only the jitter ranges are
/// tunable knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Max absolute center offset in pixels.
    pub position_jitter: f32,
    /// Max relative scale deviation (0.2 -> scales in [0.8, 1.2]).
    pub scale_jitter: f32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            position_jitter: 4.0,
            scale_jitter: 0.2,
        }
    }
}

/// Hue oscillation direction per texture family. Every family's pattern
/// swings around the same mid gray, so the mean color is uninformative
/// and the class signal lives in the oscillation itself: orientation,
/// frequency and hue direction. Directions sit on the RGB color wheel
/// (36-degree grid), assigned so that structurally similar families get
/// well-separated hues. The amplitude (0.13) keeps trained margins
/// within reach of the 8-bit perturbation budgets under study.
const HUE_DIRS: [[f32; 3]; NUM_TEXTURES] = [
    [0.130, -0.065, -0.065], // h-stripes      (0 deg)
    [-0.040, 0.127, -0.087], // v-stripes      (108 deg)
    [-0.130, 0.065, 0.065],  // diag-stripes   (180 deg)
    [0.040, -0.127, 0.087],  // checker        (288 deg)
    [0.105, 0.013, -0.119],  // dots           (36 deg)
    [-0.105, 0.119, -0.013], // coarse-noise   (144 deg)
    [-0.040, -0.087, 0.127], // fine-noise     (252 deg)
    [0.040, 0.087, -0.127],  // linear-gradient (72 deg)
    [-0.105, -0.013, 0.119], // sine-grating   (216 deg)
    [0.105, -0.119, 0.013],  // speckle        (324 deg)
];

const PATTERN_MID: f32 = 0.5;

/// Stable per-pixel hash noise in [0,1).
fn hash01(seed: u64, x: u64, y: u64) -> f32 {
    let mut z = seed ^ x.wrapping_mul(0x9e3779b97f4a7c15) ^ y.wrapping_mul(0xc2b2ae3d27d4eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ((z ^ (z >> 31)) >> 40) as f32 / (1u64 << 24) as f32
}

struct Geometry {
    cx: f32,
    cy: f32,
    scale: f32,
}

/// Largest |offset| from center a shape can reach at scale 1.
fn half_extent(shape: usize) -> f32 {
    match shape {
        0 => 9.2,   // disk radius
        1 => 8.5,   // square half-side
        2 | 3 => 13.0, // triangles: half-base 13, half-height 11.5
        4 => 11.5,  // cross arm
        5 => 11.0,  // ring outer radius
        6 => 11.5,  // diamond half-diagonal
        7 | 8 => 13.0, // bars: long half-extent
        9 => 12.0,  // l-glyph half-height
        _ => 13.0,
    }
}

fn geometry(shape: usize, spec: &RenderSpec, rng: &mut Rng) -> Geometry {
    let jx = rng.uniform(-spec.position_jitter, spec.position_jitter);
    let jy = rng.uniform(-spec.position_jitter, spec.position_jitter);
    let scale = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter);
    // Clamp the center so the scaled shape stays fully inside the frame;
    // the mask-fraction invariant then holds for every draw.
    let half = half_extent(shape) * scale + 0.5;
    let lo = half.min(IMG_W as f32 / 2.0);
    let hi = (IMG_W as f32 - half).max(IMG_W as f32 / 2.0);
    Geometry {
        cx: (IMG_W as f32 / 2.0 + jx).clamp(lo, hi),
        cy: (IMG_H as f32 / 2.0 + jy).clamp(lo, hi),
        scale,
    }
}

fn inside_shape(shape: usize, dx: f32, dy: f32, s: f32) -> bool {
    match shape {
        // disk
        0 => dx * dx + dy * dy <= (9.2 * s) * (9.2 * s),
        // square
        1 => dx.abs() <= 8.5 * s && dy.abs() <= 8.5 * s,
        // triangle-up: apex at top, base at bottom
        2 => {
            let h = 23.0 * s;
            let from_apex = dy + h / 2.0;
            from_apex >= 0.0 && from_apex <= h && dx.abs() <= (from_apex / h) * 13.0 * s
        }
        // triangle-down
        3 => {
            let h = 23.0 * s;
            let from_apex = h / 2.0 - dy;
            from_apex >= 0.0 && from_apex <= h && dx.abs() <= (from_apex / h) * 13.0 * s
        }
        // cross
        4 => {
            (dx.abs() <= 11.5 * s && dy.abs() <= 4.0 * s)
                || (dy.abs() <= 11.5 * s && dx.abs() <= 4.0 * s)
        }
        // ring
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 >= (5.7 * s) * (5.7 * s) && d2 <= (11.0 * s) * (11.0 * s)
        }
        // diamond
        6 => dx.abs() + dy.abs() <= 11.5 * s,
        // h-bar
        7 => dx.abs() <= 13.0 * s && dy.abs() <= 5.0 * s,
        // v-bar
        8 => dx.abs() <= 5.0 * s && dy.abs() <= 13.0 * s,
        // l-glyph: vertical stroke on the left, horizontal foot at bottom
        9 => {
            let vertical = (dx + 4.5 * s).abs() <= 4.5 * s && dy.abs() <= 12.0 * s;
            let foot = (dy - 7.5 * s).abs() <= 4.5 * s && dx.abs() <= 9.0 * s;
            vertical || foot
        }
        _ => false,
    }
}

struct TextureParams {
    period: f32,
    phase_x: f32,
    phase_y: f32,
    angle: f32,
    noise_seed: u64,
    /// Pattern contrast in [0.42, 1.0]; weak-contrast draws sit closer
    /// to class boundaries, which keeps trained margins realistic.
    contrast: f32,
}

fn texture_params(texture: usize, rng: &mut Rng) -> TextureParams {
    let period = match texture {
        3 => 3.0 + rng.below(3) as f32,       // checker 3..5
        4 => 5.0 + rng.below(3) as f32,       // dots spacing 5..7
        8 => rng.uniform(4.0, 7.0),           // grating wavelength px
        _ => 4.0 + rng.below(3) as f32,       // stripes 4..6
    };
    TextureParams {
        period,
        phase_x: rng.uniform(0.0, period),
        phase_y: rng.uniform(0.0, period),
        angle: rng.uniform(-0.35, 0.35),
        noise_seed: rng.next_u64(),
        contrast: rng.uniform(0.42, 1.0),
    }
}

/// Cross-family contamination: every image carries a faint grating in a
/// second family's hue direction. Real image classes overlap this way,
/// and it is precisely the low-margin evidence universal perturbations
/// amplify; without it every trained margin dwarfs the attack budget.
struct Contamination {
    family: usize,
    /// Blend weight in [0, 0.35]; the primary keeps 1 - level.
    level: f32,
    period: f32,
    angle: f32,
    phase: f32,
}

/// Pick the contaminating family (never the primary texture, never the
/// family sharing the shape's index) and its grating parameters.
fn contamination_params(
    texture: usize,
    shape: usize,
    rng: &mut Rng,
    grating_rng: &mut Rng,
) -> Contamination {
    let level = rng.uniform(0.0, 0.35);
    let excluded: Vec<usize> = if shape == texture {
        vec![texture]
    } else {
        vec![shape.min(texture), shape.max(texture)]
    };
    let allowed = NUM_TEXTURES - excluded.len();
    let mut family = rng.below(allowed as u64) as usize;
    for &ex in &excluded {
        if family >= ex {
            family += 1;
        }
    }
    Contamination {
        family,
        level,
        period: 3.0 + ((family * 7) % 9) as f32 * 0.35 + grating_rng.uniform(0.0, 1.0),
        angle: grating_rng.uniform(0.0, std::f32::consts::PI),
        phase: grating_rng.uniform(0.0, std::f32::consts::TAU),
    }
}

fn contamination_value(x: usize, y: usize, c: &Contamination) -> f32 {
    let u = x as f32 * c.angle.cos() + y as f32 * c.angle.sin();
    0.5 + 0.5 * (std::f32::consts::TAU * u / c.period + c.phase).sin()
}

fn texture_value(texture: usize, x: usize, y: usize, p: &TextureParams) -> f32 {
    let (xf, yf) = (x as f32, y as f32);
    match texture {
        // h-stripes: square wave over rows
        0 => {
            if (((yf + p.phase_y) / (p.period / 2.0)) as u32).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
        // v-stripes
        1 => {
            if (((xf + p.phase_x) / (p.period / 2.0)) as u32).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
        // diag-stripes
        2 => {
            if (((xf + yf + p.phase_x) / (p.period / 2.0)) as u32).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
        // checker
        3 => {
            let cx = ((xf + p.phase_x) / p.period) as u32;
            let cy = ((yf + p.phase_y) / p.period) as u32;
            if (cx + cy).is_multiple_of(2) {
                1.0
            } else {
                0.0
            }
        }
        // dots on a grid; values chosen so the duty-weighted mean stays
        // near the pattern mid
        4 => {
            let gx = (xf + p.phase_x).rem_euclid(p.period) - p.period / 2.0;
            let gy = (yf + p.phase_y).rem_euclid(p.period) - p.period / 2.0;
            if gx * gx + gy * gy <= 1.6 * 1.6 {
                0.95
            } else {
                0.42
            }
        }
        // coarse blocky noise
        5 => hash01(p.noise_seed, x as u64 / 4, y as u64 / 4),
        // fine per-pixel noise
        6 => hash01(p.noise_seed, x as u64, y as u64),
        // linear gradient along a jittered direction
        7 => {
            let u = xf * p.angle.cos() + yf * p.angle.sin();
            (u / (IMG_W as f32 * 1.2) + 0.5 + p.phase_x / (4.0 * p.period)).clamp(0.0, 1.0)
        }
        // sine grating
        8 => {
            let u = xf * p.angle.cos() + yf * p.angle.sin();
            0.5 + 0.5 * (std::f32::consts::TAU * u / p.period + p.phase_x).sin()
        }
        // speckle: sparse bright points
        9 => {
            if hash01(p.noise_seed, x as u64, y as u64) > 0.75 {
                0.95
            } else {
                0.35
            }
        }
        _ => 0.0,
    }
}

/// Render one image. Deterministic for a `(shape, texture, jitter_seed)`
/// triple; all pixels in [0,1].
pub fn render_image(spec: &RenderSpec, shape: usize, texture: usize, jitter_seed: u64) -> Result<Tensor> {
    if shape >= NUM_CLASSES {
        return Err(Error::invalid(format!(
            "render_image: shape class {shape} out of range [0, {NUM_CLASSES})"
        )));
    }
    if texture >= NUM_TEXTURES {
        return Err(Error::invalid(format!(
            "render_image: texture family {texture} out of range [0, {NUM_TEXTURES})"
        )));
    }
    let root = Rng::new(jitter_seed);
    let mut geo_rng = root.fork("geo", &[]);
    let mut tex_rng = root.fork("tex", &[texture as u64]);
    let mut mix_rng = root.fork("mix", &[texture as u64]);
    let mut bg_rng = root.fork("bg", &[]);

    let geo = geometry(shape, spec, &mut geo_rng);
    let brightness = geo_rng.uniform(-0.08, 0.08);
    // Signed luminance offset of the shape interior: the silhouette cue.
    // Its magnitude floor keeps shapes legible even at low pattern
    // contrast, and its random sign keeps mean luminance uninformative
    // about the class.
    let region_offset = geo_rng.uniform(0.03, 0.07) * if geo_rng.bool() { 1.0 } else { -1.0 };
    let tex = texture_params(texture, &mut tex_rng);
    let contamination = contamination_params(texture, shape, &mut tex_rng, &mut mix_rng);
    let bg_seed = bg_rng.next_u64();
    let bg_level = bg_rng.uniform(0.46, 0.54);
    let grain_seed = bg_rng.next_u64();

    let dir = HUE_DIRS[texture];
    let dir_mix = HUE_DIRS[contamination.family];
    let mut data = vec![0.0f32; IMG_ELEMS];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let dx = x as f32 + 0.5 - geo.cx;
            let dy = y as f32 + 0.5 - geo.cy;
            let rgb = if inside_shape(shape, dx, dy, geo.scale) {
                let keep = 1.0 - contamination.level;
                let swing = (texture_value(texture, x, y, &tex) - 0.5) * 2.0 * tex.contrast * keep;
                let mix_swing = (contamination_value(x, y, &contamination) - 0.5)
                    * 2.0
                    * tex.contrast
                    * contamination.level;
                [
                    PATTERN_MID + region_offset + dir[0] * swing + dir_mix[0] * mix_swing,
                    PATTERN_MID + region_offset + dir[1] * swing + dir_mix[1] * mix_swing,
                    PATTERN_MID + region_offset + dir[2] * swing + dir_mix[2] * mix_swing,
                ]
            } else {
                // Background: dim near-gray noise around the pattern mid.
                let v = bg_level + 0.06 * (hash01(bg_seed, x as u64, y as u64) - 0.5);
                [v, v, v]
            };
            let grain = 0.03 * (hash01(grain_seed, x as u64, y as u64) - 0.5);
            for (c, &v) in rgb.iter().enumerate() {
                data[c * IMG_H * IMG_W + y * IMG_W + x] =
                    (v + brightness + grain).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![IMG_C, IMG_H, IMG_W], data)
}

/// Fraction of pixels covered by the shape mask for this triple.
pub fn mask_fraction(spec: &RenderSpec, shape: usize, jitter_seed: u64) -> Result<f32> {
    if shape >= NUM_CLASSES {
        return Err(Error::invalid(format!(
            "mask_fraction: shape class {shape} out of range [0, {NUM_CLASSES})"
        )));
    }
    let root = Rng::new(jitter_seed);
    let mut geo_rng = root.fork("geo", &[]);
    let geo = geometry(shape, spec, &mut geo_rng);
    let mut covered = 0usize;
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let dx = x as f32 + 0.5 - geo.cx;
            let dy = y as f32 + 0.5 - geo.cy;
            if inside_shape(shape, dx, dy, geo.scale) {
                covered += 1;
            }
        }
    }
    Ok(covered as f32 / (IMG_H * IMG_W) as f32)
}

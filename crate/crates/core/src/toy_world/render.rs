//! Stick-figure people and pose rasters on a 32×32 canvas.

use crate::tensor::{Tensor, TensorError};

pub const CANVAS: usize = 32;
pub const JOINTS: usize = 5;

/// An RGB raster `[H, W, 3]` with values in `[0, 1]`, quantized to 1/255.
pub type Image = Tensor<f32>;

pub const HEAD: usize = 0;
pub const LEFT_HAND: usize = 1;
pub const RIGHT_HAND: usize = 2;
pub const LEFT_FOOT: usize = 3;
pub const RIGHT_FOOT: usize = 4;

/// Torso length from head to pelvis, and head to shoulder line.
const TORSO: f64 = 10.0;
const SHOULDER: f64 = 3.0;

/// Joint positions `(x, y)` in pixel units, y pointing down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub joints: [[f64; 2]; JOINTS],
}

impl Pose {
    pub fn pelvis(&self) -> [f64; 2] {
        let [x, y] = self.joints[HEAD];
        [x, y + TORSO]
    }

    pub fn shoulder(&self) -> [f64; 2] {
        let [x, y] = self.joints[HEAD];
        [x, y + SHOULDER]
    }

    /// Limb segments in drawing order: legs, torso, arms.
    fn segments(&self) -> [([f64; 2], [f64; 2]); 5] {
        let j = &self.joints;
        let (pelvis, shoulder) = (self.pelvis(), self.shoulder());
        [
            (pelvis, j[LEFT_FOOT]),
            (pelvis, j[RIGHT_FOOT]),
            (j[HEAD], pelvis),
            (shoulder, j[LEFT_HAND]),
            (shoulder, j[RIGHT_HAND]),
        ]
    }

    fn check_inside(&self) -> Result<(), TensorError> {
        let max = (CANVAS - 1) as f64;
        let pts = self.joints.iter().copied().chain([self.pelvis()]);
        for [x, y] in pts {
            if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
                return Err(TensorError::Invalid(format!("joint ({x}, {y}) outside the {CANVAS}×{CANVAS} canvas")));
            }
        }
        Ok(())
    }

    /// Pixel each joint is stamped on in the pose raster.
    pub fn joint_pixels(&self) -> [[usize; 2]; JOINTS] {
        self.joints.map(|[x, y]| [x.round() as usize, y.round() as usize])
    }
}

fn seg_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

fn image_from(pixels: &[[f64; 3]]) -> Image {
    let data = pixels.iter().flat_map(|p| p.map(quantize)).collect();
    Tensor::new([CANVAS, CANVAS, 3], data).expect("canvas-sized buffer")
}

/// Limb colors in segment order (left leg, right leg, torso, left arm, right arm).
pub const LIMB_COLORS: [[u8; 3]; 5] = [[200, 0, 200], [0, 100, 255], [200, 200, 200], [0, 200, 200], [200, 200, 0]];
/// One unique color per joint, none shared with a limb.
pub const JOINT_COLORS: [[u8; 3]; JOINTS] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255]];

/// Skeleton on black: one-pixel-wide limbs in per-limb colors, then a dot
/// of the joint's own color on every joint.
pub fn render_pose(pose: &Pose) -> Result<Image, TensorError> {
    pose.check_inside()?;
    let mut px = vec![[0.0; 3]; CANVAS * CANVAS];
    for (seg, color) in pose.segments().iter().zip(LIMB_COLORS) {
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if seg_distance([x as f64, y as f64], seg.0, seg.1) <= 0.6 {
                    px[y * CANVAS + x] = rgb(color);
                }
            }
        }
    }
    for (&[x, y], color) in pose.joint_pixels().iter().zip(JOINT_COLORS) {
        px[y * CANVAS + x] = rgb(color);
    }
    Ok(image_from(&px))
}

/// Recovers joint pixels from a pose raster by exact color matching.
pub fn extract_joints(raster: &Image) -> Option<[[usize; 2]; JOINTS]> {
    let mut found = [None; JOINTS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let i = (y * CANVAS + x) * 3;
            let c = [0, 1, 2].map(|k| (raster.data()[i + k] * 255.0).round() as u8);
            if let Some(j) = JOINT_COLORS.iter().position(|&jc| jc == c) {
                found[j] = Some([x, y]);
            }
        }
    }
    let mut out = [[0; 2]; JOINTS];
    for (o, f) in out.iter_mut().zip(found) {
        *o = f?;
    }
    Some(out)
}

/// Region colors and texture that make up one person's look.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Appearance {
    /// Palette indices for torso, arms and legs.
    pub colors: [u8; 3],
    /// Stripe frequency of the clothing texture, in cycles per canvas.
    pub texture: u8,
}

pub const PALETTE: [[u8; 3]; 8] = [
    [215, 40, 40],
    [40, 175, 50],
    [40, 75, 215],
    [230, 205, 25],
    [205, 50, 190],
    [25, 190, 205],
    [240, 130, 25],
    [50, 50, 65],
];
pub const TEXTURES: u8 = 4;

const BACKGROUND: [f64; 3] = [0.92, 0.92, 0.9];
const SKIN: [f64; 3] = [0.96, 0.8, 0.66];

fn coverage(dist: f64, half_width: f64) -> f64 {
    (half_width + 0.5 - dist).clamp(0.0, 1.0)
}

/// Renders a person with the given look in the given pose on a plain
/// background. Edges are anti-aliased so the image varies smoothly with
/// joint positions.
pub fn render_person(look: &Appearance, pose: &Pose) -> Result<Image, TensorError> {
    pose.check_inside()?;
    let color = |slot: usize| rgb(PALETTE[look.colors[slot] as usize % PALETTE.len()]);
    let freq = (look.texture % TEXTURES + 1) as f64;
    // legs, legs, torso, arms, arms
    let fills = [color(2), color(2), color(0), color(1), color(1)];
    let widths = [1.6, 1.6, 2.6, 1.4, 1.4];
    let segs = pose.segments();
    let mut px = vec![BACKGROUND; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let p = [x as f64, y as f64];
            let phase = 2.0 * std::f64::consts::PI * freq * (x + 2 * y) as f64 / CANVAS as f64;
            let shade = 1.0 + 0.12 * phase.sin();
            let out = &mut px[y * CANVAS + x];
            for ((seg, fill), w) in segs.iter().zip(fills).zip(widths) {
                let a = coverage(seg_distance(p, seg.0, seg.1), w);
                if a > 0.0 {
                    for k in 0..3 {
                        out[k] = (1.0 - a) * out[k] + a * (fill[k] * shade).min(1.0);
                    }
                }
            }
            let head = pose.joints[HEAD];
            let a = coverage(((p[0] - head[0]).powi(2) + (p[1] - head[1]).powi(2)).sqrt(), 2.8);
            for k in 0..3 {
                out[k] = (1.0 - a) * out[k] + a * SKIN[k];
            }
        }
    }
    Ok(image_from(&px))
}

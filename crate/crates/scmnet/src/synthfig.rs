//! Procedural articulated 2-D figure generator.
//!
//! Produces image, semantic mask, and skeleton heatmaps jointly, so the
//! mask and skeleton are exact ground truth rather than estimator output.
//! Figures are capsules (limbs), an ellipse (head), and a wide capsule
//! (torso), drawn with painter's-order occlusion.

use crate::tensor::Tensor;
use crate::{Result, ScmError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMAGE_RES: usize = 64;
pub const NUM_REGIONS: usize = 8;
pub const NUM_JOINTS: usize = 14;
pub const NUM_ANGLES: usize = 10;

/// Gaussian falloff of the joint heatmaps, in pixels.
pub const HEATMAP_SIGMA: f64 = 1.5;

/// Default pose jitter for augmentation / target-pose sampling (10 deg).
pub const DEFAULT_POSE_JITTER: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// Region channel order, frozen. Background is the last channel.
pub const REGION_NAMES: [&str; NUM_REGIONS] = [
    "hair",
    "face",
    "upper_clothes",
    "arms_skin",
    "pants",
    "legs_skin",
    "shoes",
    "background",
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

/// Angle order: l/r shoulder, l/r elbow, l/r hip, l/r knee, neck tilt,
/// torso lean. Bounds per joint, radians.
pub fn angle_bounds() -> [(f64, f64); NUM_ANGLES] {
    let d = std::f64::consts::PI / 180.0;
    [
        (-60.0 * d, 60.0 * d), // l shoulder
        (-60.0 * d, 60.0 * d), // r shoulder
        (0.0, 120.0 * d),      // l elbow
        (0.0, 120.0 * d),      // r elbow
        (-40.0 * d, 40.0 * d), // l hip
        (-40.0 * d, 40.0 * d), // r hip
        (0.0, 90.0 * d),       // l knee
        (0.0, 90.0 * d),       // r knee
        (-15.0 * d, 15.0 * d), // neck tilt
        (-10.0 * d, 10.0 * d), // torso lean
    ]
}

/// Disjoint per-region RGB palette boxes: [region][channel] = (lo, hi).
/// Boxes are pairwise separated in at least one channel so regions stay
/// chromatically identifiable.
pub const PALETTES: [[(f64, f64); 3]; NUM_REGIONS] = [
    [(0.05, 0.20), (0.02, 0.15), (0.00, 0.10)], // hair: dark brown
    [(0.85, 0.95), (0.65, 0.75), (0.55, 0.65)], // face: skin
    [(0.55, 0.95), (0.05, 0.22), (0.05, 0.25)], // upper: red (striped)
    [(0.90, 1.00), (0.78, 0.88), (0.60, 0.70)], // arms: light skin
    [(0.05, 0.20), (0.10, 0.30), (0.55, 0.95)], // pants: blue
    [(0.70, 0.80), (0.55, 0.65), (0.40, 0.50)], // legs: tan
    [(0.25, 0.35), (0.25, 0.35), (0.25, 0.35)], // shoes: gray
    [(0.72, 0.82), (0.85, 0.95), (0.72, 0.82)], // background: pale green
];

/// Darkening factor of the 2-px clothing stripes.
const STRIPE_FACTOR: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crop {
    FullBody,
    HalfBody,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSpec {
    pub joint_angles: [f64; NUM_ANGLES],
    pub region_colors: [[f64; 3]; NUM_REGIONS],
    pub scale: f64,
    pub crop: Crop,
}

#[derive(Debug, Clone)]
pub struct FigureSample {
    /// RGB image in [0,1], [3,res,res].
    pub image: Tensor,
    /// Binary region masks, [8,res,res]; channels partition the grid.
    pub mask: Tensor,
    /// Joint heatmaps, [14,res,res]; max 1 at each in-crop joint.
    pub skeleton: Tensor,
    pub spec: FigureSpec,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-sample seed derivation for dataset generation.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index.wrapping_add(1)))
}

/// Draw a random figure spec. Deterministic per seed.
pub fn sample_spec(rng_seed: u64) -> FigureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let bounds = angle_bounds();
    let mut joint_angles = [0.0; NUM_ANGLES];
    for (a, (lo, hi)) in joint_angles.iter_mut().zip(bounds) {
        *a = rng.gen_range(lo..hi);
    }
    let mut region_colors = [[0.0; 3]; NUM_REGIONS];
    for (c, palette) in region_colors.iter_mut().zip(PALETTES) {
        for (v, (lo, hi)) in c.iter_mut().zip(palette) {
            *v = rng.gen_range(lo..hi);
        }
    }
    let scale = rng.gen_range(0.7..1.0);
    FigureSpec { joint_angles, region_colors, scale, crop: Crop::FullBody }
}

/// Jitter all joint angles by up to `max_jitter` radians, clamped to the
/// per-joint bounds. Colors and scale are unchanged. Zero width is the
/// identity.
pub fn perturb_pose_by(spec: &FigureSpec, rng_seed: u64, max_jitter: f64) -> FigureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let bounds = angle_bounds();
    let mut out = spec.clone();
    for (a, (lo, hi)) in out.joint_angles.iter_mut().zip(bounds) {
        if max_jitter > 0.0 {
            *a = (*a + rng.gen_range(-max_jitter..max_jitter)).clamp(lo, hi);
        }
    }
    out
}

pub fn perturb_pose(spec: &FigureSpec, rng_seed: u64) -> FigureSpec {
    perturb_pose_by(spec, rng_seed, DEFAULT_POSE_JITTER)
}

// ---- geometry ----

#[derive(Clone, Copy)]
struct Pt {
    x: f64,
    y: f64,
}

fn pt(x: f64, y: f64) -> Pt {
    Pt { x, y }
}

fn dir(alpha: f64) -> Pt {
    // alpha = 0 points straight down the image.
    pt(alpha.sin(), alpha.cos())
}

fn along(p: Pt, d: Pt, len: f64) -> Pt {
    pt(p.x + d.x * len, p.y + d.y * len)
}

/// All joint positions in 64-px canvas coordinates plus the pelvis anchor.
pub struct SkeletonLayout {
    /// Joint positions in JOINT_NAMES order.
    pub joints: [(f64, f64); NUM_JOINTS],
    pub pelvis: (f64, f64),
    head_center: Pt,
    head_axis: f64,
}

/// Canonical segment lengths at scale 1 on the 64-px canvas.
mod dims {
    pub const TORSO: f64 = 13.0;
    pub const NECK: f64 = 4.5;
    pub const HEAD_RX: f64 = 4.0;
    pub const HEAD_RY: f64 = 4.8;
    pub const SHOULDER_HALF: f64 = 5.0;
    pub const HIP_HALF: f64 = 3.2;
    pub const UPPER_ARM: f64 = 8.0;
    pub const FOREARM: f64 = 7.5;
    pub const THIGH: f64 = 9.0;
    pub const SHIN: f64 = 8.5;
    pub const FOOT: f64 = 3.5;
    pub const TORSO_R: f64 = 4.5;
    pub const SHOULDER_R: f64 = 2.5;
    pub const ARM_R: f64 = 1.6;
    pub const HIP_R: f64 = 3.4;
    pub const THIGH_R: f64 = 2.4;
    pub const SHIN_R: f64 = 1.7;
    pub const FOOT_R: f64 = 1.8;
}

pub fn skeleton_layout(spec: &FigureSpec) -> SkeletonLayout {
    use std::f64::consts::PI;
    let a = &spec.joint_angles;
    let s = spec.scale;
    let (lsh, rsh, lel, rel, lhip, rhip, lkne, rkne, neck_tilt, lean) =
        (a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9]);

    let center = pt(32.0, 32.0);
    let anchor = pt(32.0, 37.0);
    let pelvis = pt(
        center.x + (anchor.x - center.x) * s,
        center.y + (anchor.y - center.y) * s,
    );

    let up = dir(PI + lean);
    let neck = along(pelvis, up, dims::TORSO * s);
    let head_axis = PI + lean + neck_tilt;
    let head_center = along(neck, dir(head_axis), dims::NECK * s + dims::HEAD_RY * s * 0.6);
    let head = head_center;

    // perpendicular to the torso axis
    let perp = pt(-up.y, up.x);
    let l_shoulder = pt(neck.x - perp.x * dims::SHOULDER_HALF * s, neck.y - perp.y * dims::SHOULDER_HALF * s);
    let r_shoulder = pt(neck.x + perp.x * dims::SHOULDER_HALF * s, neck.y + perp.y * dims::SHOULDER_HALF * s);
    let l_hip = pt(pelvis.x - perp.x * dims::HIP_HALF * s, pelvis.y - perp.y * dims::HIP_HALF * s);
    let r_hip = pt(pelvis.x + perp.x * dims::HIP_HALF * s, pelvis.y + perp.y * dims::HIP_HALF * s);

    // arms hang along the leaned torso at angle 0, spread outward by the
    // shoulder angle; elbows bend inward
    let l_arm_angle = lean - lsh;
    let r_arm_angle = lean + rsh;
    let l_elbow = along(l_shoulder, dir(l_arm_angle), dims::UPPER_ARM * s);
    let r_elbow = along(r_shoulder, dir(r_arm_angle), dims::UPPER_ARM * s);
    let l_wrist = along(l_elbow, dir(l_arm_angle + lel), dims::FOREARM * s);
    let r_wrist = along(r_elbow, dir(r_arm_angle - rel), dims::FOREARM * s);

    // legs articulate relative to straight down
    let l_knee = along(l_hip, dir(-lhip), dims::THIGH * s);
    let r_knee = along(r_hip, dir(rhip), dims::THIGH * s);
    let l_ankle = along(l_knee, dir(-lhip + lkne * 0.5), dims::SHIN * s);
    let r_ankle = along(r_knee, dir(rhip - rkne * 0.5), dims::SHIN * s);

    let joints = [
        (head.x, head.y),
        (neck.x, neck.y),
        (l_shoulder.x, l_shoulder.y),
        (r_shoulder.x, r_shoulder.y),
        (l_elbow.x, l_elbow.y),
        (r_elbow.x, r_elbow.y),
        (l_wrist.x, l_wrist.y),
        (r_wrist.x, r_wrist.y),
        (l_hip.x, l_hip.y),
        (r_hip.x, r_hip.y),
        (l_knee.x, l_knee.y),
        (r_knee.x, r_knee.y),
        (l_ankle.x, l_ankle.y),
        (r_ankle.x, r_ankle.y),
    ];
    SkeletonLayout { joints, pelvis: (pelvis.x, pelvis.y), head_center, head_axis }
}

enum Shape {
    Capsule { a: Pt, b: Pt, r: f64 },
    Ellipse { c: Pt, rx: f64, ry: f64, axis: f64 },
}

impl Shape {
    fn contains(&self, p: Pt) -> bool {
        match *self {
            Shape::Capsule { a, b, r } => {
                let abx = b.x - a.x;
                let aby = b.y - a.y;
                let len2 = abx * abx + aby * aby;
                let t = if len2 > 0.0 {
                    (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = p.x - (a.x + t * abx);
                let dy = p.y - (a.y + t * aby);
                dx * dx + dy * dy <= r * r
            }
            Shape::Ellipse { c, rx, ry, axis } => {
                // local frame: v = along the head axis, u = across it
                let dx = p.x - c.x;
                let dy = p.y - c.y;
                let (s_, c_) = axis.sin_cos();
                let v = dx * s_ + dy * c_;
                let u = dx * c_ - dy * s_;
                (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0
            }
        }
    }
}

/// Shapes of each region in channel order; lower channel index wins
/// (painter's order: hair over face over torso over limbs).
fn region_shapes(spec: &FigureSpec, layout: &SkeletonLayout) -> Vec<Vec<Shape>> {
    let s = spec.scale;
    let j = &layout.joints;
    let p = |i: usize| pt(j[i].0, j[i].1);
    let half = spec.crop == Crop::HalfBody;

    let hc = layout.head_center;
    let axis = layout.head_axis;
    let hair_c = along(hc, dir(axis), dims::HEAD_RY * s * 0.62);
    let hair = vec![Shape::Ellipse {
        c: hair_c,
        rx: dims::HEAD_RX * s * 1.15,
        ry: dims::HEAD_RY * s * 0.6,
        axis,
    }];
    let face = vec![Shape::Ellipse { c: hc, rx: dims::HEAD_RX * s, ry: dims::HEAD_RY * s, axis }];
    let upper = vec![
        Shape::Capsule { a: pt(layout.pelvis.0, layout.pelvis.1), b: p(1), r: dims::TORSO_R * s },
        Shape::Capsule { a: p(2), b: p(3), r: dims::SHOULDER_R * s },
    ];
    let arms = vec![
        Shape::Capsule { a: p(2), b: p(4), r: dims::ARM_R * s },
        Shape::Capsule { a: p(3), b: p(5), r: dims::ARM_R * s },
        Shape::Capsule { a: p(4), b: p(6), r: dims::ARM_R * s },
        Shape::Capsule { a: p(5), b: p(7), r: dims::ARM_R * s },
    ];
    let (pants, legs, shoes) = if half {
        (vec![], vec![], vec![])
    } else {
        let pants = vec![
            Shape::Capsule { a: p(8), b: p(9), r: dims::HIP_R * s },
            Shape::Capsule { a: p(8), b: p(10), r: dims::THIGH_R * s },
            Shape::Capsule { a: p(9), b: p(11), r: dims::THIGH_R * s },
        ];
        let legs = vec![
            Shape::Capsule { a: p(10), b: p(12), r: dims::SHIN_R * s },
            Shape::Capsule { a: p(11), b: p(13), r: dims::SHIN_R * s },
        ];
        let shoes = vec![
            Shape::Capsule {
                a: p(12),
                b: pt(p(12).x - dims::FOOT * s, p(12).y + 0.8 * s),
                r: dims::FOOT_R * s,
            },
            Shape::Capsule {
                a: p(13),
                b: pt(p(13).x + dims::FOOT * s, p(13).y + 0.8 * s),
                r: dims::FOOT_R * s,
            },
        ];
        (pants, legs, shoes)
    };
    vec![hair, face, upper, arms, pants, legs, shoes, vec![]]
}

/// Fraction of the canvas kept by the half-body crop.
const HALF_BODY_KEEP: f64 = 0.6;

/// Render a figure at an arbitrary square resolution.
pub fn render_at(spec: &FigureSpec, res: usize) -> FigureSample {
    let layout = skeleton_layout(spec);
    let shapes = region_shapes(spec, &layout);
    let half = spec.crop == Crop::HalfBody;
    // Output pixel -> canonical 64-px canvas coordinates.
    let sx = 64.0 / res as f64;
    let sy = if half { 64.0 * HALF_BODY_KEEP / res as f64 } else { sx };

    let mut image = Tensor::zeros(&[3, res, res]);
    let mut mask = Tensor::zeros(&[NUM_REGIONS, res, res]);
    for y in 0..res {
        for x in 0..res {
            let q = pt((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
            let mut region = NUM_REGIONS - 1;
            'regions: for (r, list) in shapes.iter().enumerate() {
                for sh in list {
                    if sh.contains(q) {
                        region = r;
                        break 'regions;
                    }
                }
            }
            mask.data_mut()[(region * res + y) * res + x] = 1.0;
            let mut color = spec.region_colors[region];
            // region 2 carries the deterministic 2-px stripe texture
            if region == 2 && (y / 2) % 2 == 1 {
                for c in color.iter_mut() {
                    *c *= STRIPE_FACTOR;
                }
            }
            for (c, v) in color.iter().enumerate() {
                image.data_mut()[(c * res + y) * res + x] = *v;
            }
        }
    }

    let mut skeleton = Tensor::zeros(&[NUM_JOINTS, res, res]);
    let two_sigma_sq = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
    for (jidx, &(jx, jy)) in layout.joints.iter().enumerate() {
        // map to output pixel coordinates; the heatmap center snaps to the
        // nearest pixel so the channel max is exactly 1
        let px = (jx / sx - 0.5).round();
        let py = (jy / sy - 0.5).round();
        if px < 0.0 || px >= res as f64 || py < 0.0 || py >= res as f64 {
            continue;
        }
        for y in 0..res {
            for x in 0..res {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                if d2 <= 25.0 {
                    skeleton.data_mut()[(jidx * res + y) * res + x] = (-d2 / two_sigma_sq).exp();
                }
            }
        }
    }

    FigureSample { image, mask, skeleton, spec: spec.clone() }
}

pub fn render(spec: &FigureSpec) -> FigureSample {
    render_at(spec, IMAGE_RES)
}

// ---- dataset file format ----

const MAGIC: &[u8; 4] = b"SCMF";
const VERSION: u16 = 1;

fn write_sample<W: Write>(w: &mut W, sample: &FigureSample) -> Result<()> {
    w.write_u8(match sample.spec.crop {
        Crop::FullBody => 0,
        Crop::HalfBody => 1,
    })?;
    for a in sample.spec.joint_angles {
        w.write_f32::<LittleEndian>(a as f32)?;
    }
    for c in sample.spec.region_colors {
        for v in c {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.write_f32::<LittleEndian>(sample.spec.scale as f32)?;
    for t in [&sample.image, &sample.mask, &sample.skeleton] {
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn read_sample<R: Read>(r: &mut R, res: usize) -> Result<FigureSample> {
    let crop = match r.read_u8()? {
        0 => Crop::FullBody,
        1 => Crop::HalfBody,
        other => return Err(ScmError::Dataset(format!("bad crop flag {}", other))),
    };
    let mut joint_angles = [0.0; NUM_ANGLES];
    for a in joint_angles.iter_mut() {
        *a = r.read_f32::<LittleEndian>()? as f64;
    }
    let mut region_colors = [[0.0; 3]; NUM_REGIONS];
    for c in region_colors.iter_mut() {
        for v in c.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    let scale = r.read_f32::<LittleEndian>()? as f64;
    let spec = FigureSpec { joint_angles, region_colors, scale, crop };
    let mut tensors = Vec::with_capacity(3);
    for channels in [3, NUM_REGIONS, NUM_JOINTS] {
        let n = channels * res * res;
        let mut data = vec![0.0f64; n];
        for v in data.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        tensors.push(Tensor::new(vec![channels, res, res], data)?);
    }
    let skeleton = tensors.pop().unwrap();
    let mask = tensors.pop().unwrap();
    let image = tensors.pop().unwrap();
    Ok(FigureSample { image, mask, skeleton, spec })
}

pub fn write_dataset(path: &Path, samples: &[FigureSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    for s in samples {
        write_sample(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<FigureSample>> {
    let file = std::fs::File::open(path)?;
    let size = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ScmError::Dataset("bad magic bytes".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(ScmError::Dataset(format!("unsupported version {}", version)));
    }
    let res = IMAGE_RES;
    let record = 1 + (NUM_ANGLES + 3 * NUM_REGIONS + 1) * 4
        + (3 + NUM_REGIONS + NUM_JOINTS) * res * res * 4;
    let body = size - 6;
    if body % record as u64 != 0 {
        return Err(ScmError::Dataset(format!(
            "truncated file: {} body bytes is not a multiple of the {}-byte record",
            body, record
        )));
    }
    let n = (body / record as u64) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_sample(&mut r, res)?);
    }
    Ok(out)
}

/// Whether dataset index `i` is assigned a half-body crop; spreads exactly
/// floor(n * fraction) half-body samples evenly over the index range.
pub fn is_half_body(index: usize, fraction: f64) -> bool {
    let f = fraction.clamp(0.0, 1.0);
    ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
}

/// Generate `n` samples deterministically from (n, seed, fraction).
pub fn generate_dataset(n: usize, seed: u64, half_body_fraction: f64) -> Vec<FigureSample> {
    (0..n)
        .map(|i| {
            let mut spec = sample_spec(sample_seed(seed, i as u64));
            if is_half_body(i, half_body_fraction) {
                spec.crop = Crop::HalfBody;
            }
            render(&spec)
        })
        .collect()
}

/// Generate and write a dataset file.
pub fn make_dataset(path: &Path, n: usize, seed: u64, half_body_fraction: f64) -> Result<()> {
    if n == 0 {
        return Err(ScmError::Config("dataset size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&half_body_fraction) {
        return Err(ScmError::Config("half-body fraction must be in [0,1]".into()));
    }
    let samples = generate_dataset(n, seed, half_body_fraction);
    write_dataset(path, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_spec_deterministic_and_in_bounds() {
        assert_eq!(sample_spec(0), sample_spec(0));
        let bounds = angle_bounds();
        for seed in 0..1000 {
            let spec = sample_spec(seed);
            for (a, (lo, hi)) in spec.joint_angles.iter().zip(bounds) {
                assert!(*a >= lo && *a <= hi);
            }
            for (c, palette) in spec.region_colors.iter().zip(PALETTES) {
                for (v, (lo, hi)) in c.iter().zip(palette) {
                    assert!(*v >= lo && *v < hi);
                }
            }
            assert!(spec.scale >= 0.7 && spec.scale <= 1.0);
        }
    }

    #[test]
    fn palettes_pairwise_disjoint() {
        for i in 0..NUM_REGIONS {
            for j in i + 1..NUM_REGIONS {
                let disjoint = (0..3).any(|c| {
                    let (alo, ahi) = PALETTES[i][c];
                    let (blo, bhi) = PALETTES[j][c];
                    ahi <= blo || bhi <= alo
                });
                assert!(disjoint, "palettes {} and {} overlap", i, j);
            }
        }
    }

    #[test]
    fn mask_partitions_pixel_grid() {
        for seed in [0, 5, 9] {
            let mut spec = sample_spec(seed);
            if seed == 9 {
                spec.crop = Crop::HalfBody;
            }
            let s = render(&spec);
            let res = IMAGE_RES;
            for p in 0..res * res {
                let total: f64 = (0..NUM_REGIONS)
                    .map(|r| s.mask.data()[r * res * res + p])
                    .sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    #[test]
    fn upright_figure_pelvis_centered() {
        let mut spec = sample_spec(1);
        spec.joint_angles = [0.0; NUM_ANGLES];
        spec.scale = 1.0;
        let layout = skeleton_layout(&spec);
        assert!((layout.pelvis.0 - 32.0).abs() <= 1.0);
    }

    #[test]
    fn half_body_lower_regions_empty() {
        let mut spec = sample_spec(2);
        spec.crop = Crop::HalfBody;
        let s = render(&spec);
        let res = IMAGE_RES;
        for r in [4, 5, 6] {
            assert!(s.mask.data()[r * res * res..(r + 1) * res * res]
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn region_colors_identifiable_from_image() {
        for seed in 0..32 {
            let s = render(&sample_spec(seed));
            let res = IMAGE_RES;
            for r in 0..NUM_REGIONS {
                let mplane = &s.mask.data()[r * res * res..(r + 1) * res * res];
                let count: f64 = mplane.iter().sum();
                if count == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let plane = &s.image.data()[c * res * res..(c + 1) * res * res];
                    let mean: f64 = plane
                        .iter()
                        .zip(mplane)
                        .filter(|(_, &m)| m > 0.5)
                        .map(|(v, _)| v)
                        .sum::<f64>()
                        / count;
                    assert!(
                        (mean - s.spec.region_colors[r][c]).abs() <= 0.15,
                        "seed {} region {} channel {}: mean {} vs {}",
                        seed,
                        r,
                        c,
                        mean,
                        s.spec.region_colors[r][c]
                    );
                }
            }
        }
    }

    #[test]
    fn skeleton_channels_peak_at_one_near_body() {
        for seed in 0..16 {
            let s = render(&sample_spec(seed));
            let res = IMAGE_RES;
            let bg = &s.mask.data()[7 * res * res..8 * res * res];
            for j in 0..NUM_JOINTS {
                let plane = &s.skeleton.data()[j * res * res..(j + 1) * res * res];
                let (argmax, max) = plane
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                assert_eq!(max, 1.0, "seed {} joint {}", seed, j);
                let (jy, jx) = (argmax / res, argmax % res);
                // within 3 px of a non-background pixel
                let mut near_body = false;
                'search: for dy in -3i64..=3 {
                    for dx in -3i64..=3 {
                        let (y, x) = (jy as i64 + dy, jx as i64 + dx);
                        if y >= 0
                            && y < res as i64
                            && x >= 0
                            && x < res as i64
                            && bg[(y * res as i64 + x) as usize] == 0.0
                        {
                            near_body = true;
                            break 'search;
                        }
                    }
                }
                assert!(near_body, "seed {} joint {} at ({},{})", seed, j, jx, jy);
            }
        }
    }

    #[test]
    fn perturb_pose_properties() {
        let spec = sample_spec(4);
        assert_eq!(perturb_pose_by(&spec, 1, 0.0), spec);
        assert_eq!(perturb_pose(&spec, 11), perturb_pose(&spec, 11));
        let bounds = angle_bounds();
        for seed in 0..1000 {
            let p = perturb_pose(&spec, seed);
            for (a, (lo, hi)) in p.joint_angles.iter().zip(bounds) {
                assert!(*a >= lo && *a <= hi);
            }
            assert_eq!(p.region_colors, spec.region_colors);
        }
    }

    #[test]
    fn dataset_deterministic_and_countable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.scmf");
        let p2 = dir.path().join("b.scmf");
        make_dataset(&p1, 4, 7, 0.5).unwrap();
        make_dataset(&p2, 4, 7, 0.5).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let samples = read_dataset(&p1).unwrap();
        assert_eq!(samples.len(), 4);

        // fraction 0 -> no half-body; fraction 0.3 over 100 -> exactly 30
        assert_eq!((0..100).filter(|&i| is_half_body(i, 0.0)).count(), 0);
        assert_eq!((0..100).filter(|&i| is_half_body(i, 0.3)).count(), 30);
    }

    #[test]
    fn dataset_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.scmf");
        make_dataset(&p, 1, 3, 0.0).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(ScmError::Dataset(_))));
        // truncation
        bytes[0] = b'S';
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(ScmError::Dataset(_))));
    }
}

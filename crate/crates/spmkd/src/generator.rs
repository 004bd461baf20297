//! Synthetic pressure maps: a jittered 14-joint skeleton in one of three
//! postures, rendered as a sum of truncated anisotropic Gaussian contact
//! kernels.
//!
//! Every kernel is normalised analytically so that its integral over the
//! plane (inside the truncation ellipse) equals its share of
//! `body_weight`; the rendered total therefore matches `body_weight` up to
//! discretisation and border clipping.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spmkd_core::model::fnv1a;
use spmkd_core::{PressureMap, Posture};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 14;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
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

const HEAD: usize = 0;
const NECK: usize = 1;
const L_SHOULDER: usize = 2;
const R_SHOULDER: usize = 3;
const L_ELBOW: usize = 4;
const R_ELBOW: usize = 5;
const L_WRIST: usize = 6;
const R_WRIST: usize = 7;
const L_HIP: usize = 8;
const R_HIP: usize = 9;
const L_KNEE: usize = 10;
const R_KNEE: usize = 11;
const L_ANKLE: usize = 12;
const R_ANKLE: usize = 13;

/// Mahalanobis radius at which kernels are cut to exactly zero.
pub const TRUNCATION: f64 = 3.0;

/// Limb bones checked against [`BONE_BANDS`]: (proximal, distal).
const LIMBS: [(usize, usize); 9] = [
    (NECK, HEAD),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
];

/// Allowed bone length as a fraction of torso length (neck → mid-hip), per
/// entry of `LIMBS`.
pub const BONE_BANDS: [(f64, f64); 9] = [
    (0.12, 0.45),
    (0.25, 0.80),
    (0.25, 0.80),
    (0.25, 0.80),
    (0.25, 0.80),
    (0.30, 0.85),
    (0.30, 0.85),
    (0.30, 0.85),
    (0.30, 0.85),
];

/// Joint positions in normalised image coordinates, `(x, y)` with `y`
/// pointing down the mattress.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonPose {
    pub joints: [[f64; 2]; JOINT_COUNT],
    pub posture: Posture,
}

impl SkeletonPose {
    pub fn template(posture: Posture) -> Self {
        let supine = [
            [0.50, 0.12],
            [0.50, 0.20],
            [0.40, 0.23],
            [0.60, 0.23],
            [0.36, 0.38],
            [0.64, 0.38],
            [0.35, 0.52],
            [0.65, 0.52],
            [0.44, 0.52],
            [0.56, 0.52],
            [0.44, 0.70],
            [0.56, 0.70],
            [0.44, 0.88],
            [0.56, 0.88],
        ];
        // lying on the left side, facing +x: shoulders and hips stacked,
        // arms forward, knees drawn up
        let left = [
            [0.52, 0.12],
            [0.50, 0.19],
            [0.49, 0.23],
            [0.52, 0.22],
            [0.58, 0.33],
            [0.60, 0.35],
            [0.66, 0.42],
            [0.68, 0.45],
            [0.49, 0.52],
            [0.52, 0.51],
            [0.60, 0.68],
            [0.63, 0.66],
            [0.52, 0.85],
            [0.56, 0.83],
        ];
        let joints = match posture {
            Posture::Supine => supine,
            Posture::LeftLateral => left,
            Posture::RightLateral => {
                // mirror image, with sides relabelled
                let mut j = left;
                for p in j.iter_mut() {
                    p[0] = 1.0 - p[0];
                }
                for pair in (L_SHOULDER..=R_ANKLE).step_by(2) {
                    j.swap(pair, pair + 1);
                }
                j
            }
        };
        SkeletonPose { joints, posture }
    }

    pub fn mid_hip(&self) -> [f64; 2] {
        midpoint(self.joints[L_HIP], self.joints[R_HIP])
    }

    pub fn torso_length(&self) -> f64 {
        dist(self.joints[NECK], self.mid_hip())
    }

    /// All joints inside the unit square and every limb within its band.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.joints.iter().enumerate() {
            if !(p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))) {
                return Err(Error::Data(format!("joint {} at {:?} is out of bounds", JOINT_NAMES[i], p)));
            }
        }
        let torso = self.torso_length();
        for (&(a, b), &(lo, hi)) in LIMBS.iter().zip(&BONE_BANDS) {
            let r = dist(self.joints[a], self.joints[b]) / torso;
            if !(lo..=hi).contains(&r) {
                return Err(Error::Data(format!(
                    "bone {}-{} is {r:.3} torso lengths, outside [{lo}, {hi}]",
                    JOINT_NAMES[a], JOINT_NAMES[b]
                )));
            }
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

fn rotate_about(p: [f64; 2], c: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [c[0] + co * dx - s * dy, c[1] + s * dx + co * dy]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Edge length of the square map in cells.
    pub size: usize,
    /// Total pressure of a noise-free map.
    pub body_weight: f64,
    pub noise_sigma: f64,
    /// Uniform global scale range.
    pub scale: (f64, f64),
    pub max_rotation_deg: f64,
    /// Maximum translation per axis, normalised units.
    pub max_shift: f64,
    /// Independent per-joint Gaussian jitter, normalised units.
    pub joint_jitter: f64,
    /// Maximum rotation of each limb segment about its proximal joint.
    pub limb_swing_deg: f64,
    /// Multiplier on every kernel width.
    pub width_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            size: 256,
            body_weight: 2000.0,
            noise_sigma: 0.0,
            scale: (0.9, 1.1),
            max_rotation_deg: 6.0,
            max_shift: 0.04,
            joint_jitter: 0.006,
            limb_swing_deg: 10.0,
            width_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    /// A different body/sensor regime (smaller bodies, wider contact,
    /// sensor noise) used to test descriptor transfer.
    pub fn shifted() -> Self {
        GeneratorConfig { scale: (0.82, 0.95), width_scale: 1.25, noise_sigma: 0.005, max_rotation_deg: 9.0, ..Self::default() }
    }

    /// Same regime on a `size × size` grid: body weight scales with area so
    /// pressure densities are unchanged.
    pub fn with_size(&self, size: usize) -> Self {
        let r = size as f64 / self.size as f64;
        GeneratorConfig { size, body_weight: self.body_weight * r * r, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 16
            && self.body_weight > 0.0
            && self.body_weight.is_finite()
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.width_scale > 0.0
            && self.max_shift >= 0.0
            && self.joint_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid generator config {self:?}")))
        }
    }

    pub fn hash(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

/// One contact kernel: a Gaussian with principal axes along and across
/// `angle`, cut at [`TRUNCATION`], integrating to `mass`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    /// Centre in cell units `(x, y)`.
    pub center: [f64; 2],
    pub sigma_along: f64,
    pub sigma_across: f64,
    pub angle: f64,
    pub mass: f64,
}

impl Kernel {
    pub fn isotropic(center: [f64; 2], sigma: f64, mass: f64) -> Self {
        Kernel { center, sigma_along: sigma, sigma_across: sigma, angle: 0.0, mass }
    }

    /// Peak density, chosen so the truncated kernel integrates to `mass`.
    pub fn amplitude(&self) -> f64 {
        let inside = 1.0 - (-TRUNCATION * TRUNCATION / 2.0).exp();
        self.mass / (2.0 * PI * self.sigma_along * self.sigma_across * inside)
    }

    fn splat(&self, size: usize, out: &mut [f64]) {
        let a = self.amplitude();
        let (s, c) = self.angle.sin_cos();
        let reach = TRUNCATION * self.sigma_along.max(self.sigma_across);
        let lo = |v: f64| ((v - reach).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + reach).ceil().max(0.0) as usize).min(size);
        for y in lo(self.center[1])..hi(self.center[1]) {
            for x in lo(self.center[0])..hi(self.center[0]) {
                let dx = x as f64 + 0.5 - self.center[0];
                let dy = y as f64 + 0.5 - self.center[1];
                let u = (c * dx + s * dy) / self.sigma_along;
                let v = (-s * dx + c * dy) / self.sigma_across;
                let r2 = u * u + v * v;
                if r2 < TRUNCATION * TRUNCATION {
                    out[y * size + x] += a * (-r2 / 2.0).exp();
                }
            }
        }
    }
}

/// Sum of kernels on a `size × size` grid.
pub fn render(size: usize, kernels: &[Kernel]) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for k in kernels {
        k.splat(size, &mut out);
    }
    out
}

/// Body-segment kernels for a pose. Mass fractions sum to one.
pub fn body_kernels(pose: &SkeletonPose, cfg: &GeneratorConfig, body_scale: f64) -> Vec<Kernel> {
    let n = cfg.size as f64;
    let px = |p: [f64; 2]| [p[0] * n, p[1] * n];
    let w = |sigma: f64| sigma * n * cfg.width_scale * body_scale;
    let lateral = pose.posture != Posture::Supine;
    let m = |frac: f64| frac * cfg.body_weight;
    let j = &pose.joints;
    let segment = |a: usize, b: usize, across: f64, frac: f64| seg_kernel(px(j[a]), px(j[b]), w(across), m(frac));

    let mut ks = Vec::with_capacity(20);
    ks.push(Kernel::isotropic(px(j[HEAD]), w(0.028), m(0.08)));
    let torso_width = if lateral { 0.042 } else { 0.065 };
    ks.push(seg_kernel(px(j[NECK]), px(pose.mid_hip()), w(torso_width), m(0.33)));
    // the side carrying the body takes most of the shoulder load
    let (ls, rs) = match pose.posture {
        Posture::Supine => (0.03, 0.03),
        Posture::LeftLateral => (0.05, 0.01),
        Posture::RightLateral => (0.01, 0.05),
    };
    ks.push(Kernel::isotropic(px(j[L_SHOULDER]), w(0.025), m(ls)));
    ks.push(Kernel::isotropic(px(j[R_SHOULDER]), w(0.025), m(rs)));
    ks.push(Kernel::isotropic(px(pose.mid_hip()), w(if lateral { 0.036 } else { 0.045 }), m(0.14)));
    for (a, b) in [(L_SHOULDER, L_ELBOW), (R_SHOULDER, R_ELBOW)] {
        ks.push(segment(a, b, 0.014, 0.025));
    }
    for (a, b) in [(L_ELBOW, L_WRIST), (R_ELBOW, R_WRIST)] {
        ks.push(segment(a, b, 0.011, 0.015));
    }
    for (a, b) in [(L_HIP, L_KNEE), (R_HIP, R_KNEE)] {
        ks.push(segment(a, b, 0.025, 0.09));
    }
    for (a, b) in [(L_KNEE, L_ANKLE), (R_KNEE, R_ANKLE)] {
        ks.push(segment(a, b, 0.016, 0.045));
    }
    for a in [L_ANKLE, R_ANKLE] {
        ks.push(Kernel::isotropic(px(j[a]), w(0.014), m(0.02)));
    }
    ks
}

fn seg_kernel(a: [f64; 2], b: [f64; 2], across: f64, mass: f64) -> Kernel {
    let len = dist(a, b);
    let angle = (b[1] - a[1]).atan2(b[0] - a[0]);
    Kernel { center: midpoint(a, b), sigma_along: (len / 2.2).max(across), sigma_across: across, angle, mass }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub map: PressureMap,
    /// Absent when a stored sample has no sidecar.
    pub pose: Option<SkeletonPose>,
    pub seed: Option<u64>,
}

fn sample_pose(rng: &mut ChaCha8Rng, posture: Posture, cfg: &GeneratorConfig) -> (SkeletonPose, f64) {
    let mut pose = SkeletonPose::template(posture);
    let swing = cfg.limb_swing_deg.to_radians();
    let chains = [
        (L_SHOULDER, L_ELBOW, L_WRIST),
        (R_SHOULDER, R_ELBOW, R_WRIST),
        (L_HIP, L_KNEE, L_ANKLE),
        (R_HIP, R_KNEE, R_ANKLE),
    ];
    for (root, mid, tip) in chains {
        let a = rng.random_range(-1.0..=1.0) * swing;
        pose.joints[mid] = rotate_about(pose.joints[mid], pose.joints[root], a);
        pose.joints[tip] = rotate_about(pose.joints[tip], pose.joints[root], a);
        let b = rng.random_range(-1.0..=1.0) * swing;
        pose.joints[tip] = rotate_about(pose.joints[tip], pose.joints[mid], b);
    }
    if cfg.joint_jitter > 0.0 {
        let jitter = Normal::new(0.0, cfg.joint_jitter).expect("finite sigma");
        for p in pose.joints.iter_mut() {
            p[0] += jitter.sample(rng);
            p[1] += jitter.sample(rng);
        }
    }
    let scale = if cfg.scale.0 < cfg.scale.1 { rng.random_range(cfg.scale.0..=cfg.scale.1) } else { cfg.scale.0 };
    let rot = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let shift = [rng.random_range(-1.0..=1.0) * cfg.max_shift, rng.random_range(-1.0..=1.0) * cfg.max_shift];
    let c = [0.5, 0.5];
    for p in pose.joints.iter_mut() {
        let r = rotate_about(*p, c, rot);
        *p = [c[0] + (r[0] - c[0]) * scale + shift[0], c[1] + (r[1] - c[1]) * scale + shift[1]];
    }
    (pose, scale)
}

/// Deterministic in `(seed, cfg)`. The posture is drawn uniformly.
pub fn generate_sample(seed: u64, cfg: &GeneratorConfig) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let posture = Posture::ALL[rng.random_range(0..3)];
    generate_with_posture(seed, posture, cfg)
}

pub fn generate_with_posture(seed: u64, posture: Posture, cfg: &GeneratorConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    // an independent stream so the posture draw does not shift the body draw
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_b0d1);
    let (pose, scale) = sample_pose(&mut rng, posture, cfg);
    pose.validate()?;
    let mut field = render(cfg.size, &body_kernels(&pose, cfg, scale));
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Data(e.to_string()))?;
        for v in field.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).max(0.0);
        }
    }
    let values = field.into_iter().map(|v| v as f32).collect();
    let mut map = PressureMap::new(cfg.size, cfg.size, values)?;
    map.source = Some(format!("synthetic:{seed}"));
    Ok(SyntheticSample { map, pose: Some(pose), seed: Some(seed) })
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&base.to_le_bytes());
    bytes[8..].copy_from_slice(&(index as u64).to_le_bytes());
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_valid() {
        for p in Posture::ALL {
            SkeletonPose::template(p).validate().unwrap();
        }
    }

    #[test]
    fn kernel_amplitude_integrates_to_mass() {
        let k = Kernel { center: [40.0, 40.0], sigma_along: 9.0, sigma_across: 3.0, angle: 0.7, mass: 100.0 };
        let total: f64 = render(80, &[k]).iter().sum();
        assert!((total - 100.0).abs() < 0.5, "{total}");
    }

    #[test]
    fn mirror_swaps_sides() {
        let l = SkeletonPose::template(Posture::LeftLateral);
        let r = SkeletonPose::template(Posture::RightLateral);
        assert_eq!(r.joints[R_KNEE][0], 1.0 - l.joints[L_KNEE][0]);
        assert_eq!(r.joints[HEAD][0], 1.0 - l.joints[HEAD][0]);
    }
}

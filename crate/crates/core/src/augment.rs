//! On-the-fly stochastic augmentation, applied jointly to image and mask:
//! (1) small random rotations, (2) mirror flips, (3) elastic deformation
//! with a smoothed dense displacement field, (4) random isotropic scaling,
//! (5) random crop with resize back to the full grid.
//!
//! Every operation has a deterministic core taking explicit parameters and
//! a `random_*` wrapper that draws them. The pipeline derives its RNG
//! stream from `(seed, sample_index)` only, so results are independent of
//! worker scheduling.

use crate::preprocess::gaussian_filter3;
use crate::scalar::Real;
use crate::volume::{LabelMask, MultiModalVolume};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation range per axis, degrees: angles drawn from [-r, r].
    pub rotate_range_deg: f64,
    pub flip_prob: f64,
    pub elastic_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub scale_range: [f64; 2],
    pub scale_prob: f64,
    pub crop_resize_prob: f64,
    /// Lower bound on crop extent per axis, as a fraction of the full size.
    pub crop_min_extent: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_range_deg: 1.0,
            flip_prob: 0.5,
            elastic_prob: 0.3,
            elastic_alpha: 1.0,
            elastic_sigma: 0.25,
            scale_range: [0.9, 1.1],
            scale_prob: 0.3,
            crop_resize_prob: 0.3,
            crop_min_extent: 0.8,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// An identity configuration: no randomness has any effect.
    pub fn disabled(seed: u64) -> Self {
        Self {
            rotate_range_deg: 0.0,
            flip_prob: 0.0,
            elastic_prob: 0.0,
            scale_prob: 0.0,
            crop_resize_prob: 0.0,
            seed,
            ..Default::default()
        }
    }
}

/// Dense per-voxel displacement field, one component per axis.
/// Components are drawn in [-1, 1] before Gaussian smoothing.
#[derive(Debug, Clone)]
pub struct DisplacementField<T: Real> {
    pub dd: Array3<T>,
    pub dh: Array3<T>,
    pub dw: Array3<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn zero(shape: [usize; 3]) -> Self {
        Self {
            dd: Array3::zeros(shape),
            dh: Array3::zeros(shape),
            dw: Array3::zeros(shape),
        }
    }

    pub fn constant(shape: [usize; 3], v: [f64; 3]) -> Self {
        Self {
            dd: Array3::from_elem(shape, T::from_f64_c(v[0])),
            dh: Array3::from_elem(shape, T::from_f64_c(v[1])),
            dw: Array3::from_elem(shape, T::from_f64_c(v[2])),
        }
    }

    /// Per-voxel uniform [-1, 1] components, smoothed by a Gaussian with
    /// the configured sigma (voxel units, 3³ truncated kernel).
    pub fn random(shape: [usize; 3], sigma: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || Array3::from_shape_fn(shape, |_| T::from_f64_c(rng.gen_range(-1.0..=1.0)));
        let (dd, dh, dw) = (draw(), draw(), draw());
        let smooth = |a: Array3<T>| gaussian_filter3(a.view(), [3, 3, 3], sigma);
        Self {
            dd: smooth(dd),
            dh: smooth(dh),
            dw: smooth(dw),
        }
    }
}

fn trilinear_sample<T: Real>(src: &Array3<T>, p: [f64; 3]) -> T {
    let s = src.shape();
    let mut acc = 0.0f64;
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    for corner in 0..8usize {
        let mut wgt = 1.0;
        let mut idx = [0isize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = base[a] as isize + bit as isize;
        }
        if wgt == 0.0 {
            continue;
        }
        let in_bounds = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < s[a]);
        if in_bounds {
            acc += wgt * src[[idx[0] as usize, idx[1] as usize, idx[2] as usize]].to_f64_c();
        }
    }
    T::from_f64_c(acc)
}

fn nearest_sample(src: &Array3<u8>, p: [f64; 3]) -> u8 {
    let s = src.shape();
    let idx = [p[0].round(), p[1].round(), p[2].round()];
    let in_bounds = (0..3).all(|a| idx[a] >= 0.0 && (idx[a] as usize) < s[a]);
    if in_bounds {
        src[[idx[0] as usize, idx[1] as usize, idx[2] as usize]]
    } else {
        0
    }
}

/// Resamples image (trilinear) and mask (nearest) through an arbitrary
/// output-to-source coordinate map.
fn warp<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    map: impl Fn([usize; 3]) -> [f64; 3],
) -> (MultiModalVolume<T>, LabelMask) {
    let [d, h, w] = vol.spatial_shape();
    let c = vol.channels();
    let channels: Vec<Array3<T>> = (0..c)
        .map(|ch| vol.data.index_axis(ndarray::Axis(0), ch).to_owned())
        .collect();
    let mut data = Array4::zeros((c, d, h, w));
    let mut labels = Array3::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = map([z, y, x]);
                for (ch, src) in channels.iter().enumerate() {
                    data[[ch, z, y, x]] = trilinear_sample(src, p);
                }
                labels[[z, y, x]] = nearest_sample(&mask.data, p);
            }
        }
    }
    (
        MultiModalVolume {
            data,
            spacing: vol.spacing,
            channel_names: vol.channel_names.clone(),
        },
        LabelMask {
            data: labels,
            spacing: mask.spacing,
        },
    )
}

/// Mirror flip along the selected axes, identically on image and mask.
pub fn flip<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    axes: [bool; 3],
) -> (MultiModalVolume<T>, LabelMask) {
    let mut data = vol.data.clone();
    let mut labels = mask.data.clone();
    for (a, &on) in axes.iter().enumerate() {
        if on {
            data.invert_axis(ndarray::Axis(a + 1));
            labels.invert_axis(ndarray::Axis(a));
        }
    }
    (
        MultiModalVolume {
            data: data.as_standard_layout().to_owned(),
            spacing: vol.spacing,
            channel_names: vol.channel_names.clone(),
        },
        LabelMask {
            data: labels.as_standard_layout().to_owned(),
            spacing: mask.spacing,
        },
    )
}

pub fn random_flip<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> (MultiModalVolume<T>, LabelMask) {
    let axes = [
        rng.gen_bool(flip_prob),
        rng.gen_bool(flip_prob),
        rng.gen_bool(flip_prob),
    ];
    flip(vol, mask, axes)
}

fn rotation_matrix(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles_deg.map(|v| v.to_radians());
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    // R = Rz(c) * Ry(b) * Rx(a), acting on (d, h, w) coordinates.
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    let mul = |m: [[f64; 3]; 3], n: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, nk) in n.iter().enumerate() {
                    out[i][j] += m[i][k] * nk[j];
                }
            }
        }
        out
    };
    mul(rz, mul(ry, rx))
}

/// Rotation about the volume center plus isotropic scaling, in a single
/// resampling pass. Image trilinear, mask nearest-neighbor.
pub fn affine<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    angles_deg: [f64; 3],
    scale: f64,
) -> (MultiModalVolume<T>, LabelMask) {
    if angles_deg == [0.0; 3] && scale == 1.0 {
        return (vol.clone(), mask.clone());
    }
    let r = rotation_matrix(angles_deg);
    let [d, h, w] = vol.spatial_shape();
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    // Inverse map: source = center + Rᵀ((out − center) / scale).
    warp(vol, mask, |out| {
        let q = [
            (out[0] as f64 - center[0]) / scale,
            (out[1] as f64 - center[1]) / scale,
            (out[2] as f64 - center[2]) / scale,
        ];
        [
            center[0] + r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            center[1] + r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            center[2] + r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    })
}

pub fn random_affine<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (MultiModalVolume<T>, LabelMask) {
    let r = config.rotate_range_deg;
    let angles = if r > 0.0 {
        [
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
        ]
    } else {
        [0.0; 3]
    };
    let scale = if config.scale_prob > 0.0 && rng.gen_bool(config.scale_prob) {
        rng.gen_range(config.scale_range[0]..=config.scale_range[1])
    } else {
        1.0
    };
    affine(vol, mask, angles, scale)
}

/// Elastic warp: output voxel `p` samples the input at `p + α·Δ(p)`.
pub fn elastic<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    field: &DisplacementField<T>,
    alpha: f64,
) -> (MultiModalVolume<T>, LabelMask) {
    warp(vol, mask, |p| {
        let delta = [
            field.dd[p].to_f64_c(),
            field.dh[p].to_f64_c(),
            field.dw[p].to_f64_c(),
        ];
        [
            p[0] as f64 + alpha * delta[0],
            p[1] as f64 + alpha * delta[1],
            p[2] as f64 + alpha * delta[2],
        ]
    })
}

pub fn random_elastic<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (MultiModalVolume<T>, LabelMask) {
    if config.elastic_prob > 0.0 && rng.gen_bool(config.elastic_prob) {
        let field =
            DisplacementField::<T>::random(vol.spatial_shape(), config.elastic_sigma, rng);
        elastic(vol, mask, &field, config.elastic_alpha)
    } else {
        (vol.clone(), mask.clone())
    }
}

/// Crops the box `[start, start + extent)` (voxel units, per axis) and
/// resizes back to the full grid.
pub fn crop_resize<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    start: [f64; 3],
    extent: [f64; 3],
) -> (MultiModalVolume<T>, LabelMask) {
    let shape = vol.spatial_shape();
    warp(vol, mask, |out| {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let ratio = extent[a] / shape[a] as f64;
            p[a] = start[a] + (out[a] as f64 + 0.5) * ratio - 0.5;
        }
        p
    })
}

pub fn random_crop_resize<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (MultiModalVolume<T>, LabelMask) {
    if config.crop_resize_prob > 0.0 && rng.gen_bool(config.crop_resize_prob) {
        let shape = vol.spatial_shape();
        let mut start = [0.0; 3];
        let mut extent = [0.0; 3];
        for a in 0..3 {
            let size = shape[a] as f64;
            let frac = rng.gen_range(config.crop_min_extent..=1.0);
            extent[a] = frac * size;
            start[a] = rng.gen_range(0.0..=(size - extent[a]));
        }
        crop_resize(vol, mask, start, extent)
    } else {
        (vol.clone(), mask.clone())
    }
}

/// Derives the per-sample RNG stream from `(seed, sample_index)` only.
pub fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    // splitmix64 of the pair, so nearby (seed, index) pairs decorrelate.
    let mut z = seed ^ sample_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Full augmentation pipeline, a pure function of
/// `(vol, mask, config, sample_index)`.
pub fn augment_pipeline<T: Real>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    config: &AugmentConfig,
    sample_index: u64,
) -> (MultiModalVolume<T>, LabelMask) {
    let mut rng = sample_rng(config.seed, sample_index);
    let (vol, mask) = random_affine(vol, mask, config, &mut rng);
    let (vol, mask) = random_flip(&vol, &mask, config.flip_prob, &mut rng);
    let (vol, mask) = random_elastic(&vol, &mask, config, &mut rng);
    random_crop_resize(&vol, &mask, config, &mut rng)
}

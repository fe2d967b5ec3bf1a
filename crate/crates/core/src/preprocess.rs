//! Intensity normalization, grid resizing, and the multi-denoising
//! channel stack (raw + median + Gaussian per modality).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::MultiModalVolume;
use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSupport {
    /// Statistics over nonzero (brain) voxels; BraTS backgrounds are zero.
    Nonzero,
    /// Statistics over the full channel.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_shape: [usize; 3],
    pub median_kernel: [usize; 3],
    pub gaussian_kernel: [usize; 3],
    pub gaussian_sigma: f64,
    pub eps_std: f64,
    pub norm_support: NormSupport,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_shape: [160, 192, 128],
            median_kernel: [3, 3, 3],
            gaussian_kernel: [3, 3, 3],
            gaussian_sigma: 0.5,
            eps_std: 1e-8,
            norm_support: NormSupport::Nonzero,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel.iter().chain(&self.gaussian_kernel).any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::InvalidConfig("filter kernel dims must be odd".into()));
        }
        if self.gaussian_sigma <= 0.0 {
            return Err(Error::InvalidConfig("gaussian_sigma must be > 0".into()));
        }
        if self.target_shape.contains(&0) {
            return Err(Error::InvalidConfig("target_shape must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel z-score: (x − mean) / std over the normalization support.
/// Channels with degenerate std are zeroed and reported with a warning.
pub fn zscore_normalize<T: Real>(
    vol: &MultiModalVolume<T>,
    config: &PreprocessConfig,
) -> MultiModalVolume<T> {
    let mut data = vol.data.clone();
    for (c, mut channel) in data.outer_iter_mut().enumerate() {
        let support: Vec<f64> = match config.norm_support {
            NormSupport::Nonzero => channel
                .iter()
                .filter(|v| **v != T::zero())
                .map(|v| v.to_f64_c())
                .collect(),
            NormSupport::All => channel.iter().map(|v| v.to_f64_c()).collect(),
        };
        if support.is_empty() {
            log::warn!("channel {c} has empty normalization support; zeroing");
            channel.fill(T::zero());
            continue;
        }
        let n = support.len() as f64;
        let mean = support.iter().sum::<f64>() / n;
        let var = support.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < config.eps_std {
            log::warn!("channel {c} is degenerate (std {std:.3e}); zeroing");
            channel.fill(T::zero());
            continue;
        }
        let (m, s) = (T::from_f64_c(mean), T::from_f64_c(std));
        channel.mapv_inplace(|v| (v - m) / s);
    }
    MultiModalVolume {
        data,
        spacing: vol.spacing,
        channel_names: vol.channel_names.clone(),
    }
}

/// Center-crop / symmetric zero-pad bookkeeping. Retains the inverse
/// mapping so predictions can be re-embedded into the original grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPad {
    pub src_shape: [usize; 3],
    pub target_shape: [usize; 3],
    pub crop_start: [usize; 3],
    pub pad_before: [usize; 3],
}

impl CropPad {
    pub fn new(src_shape: [usize; 3], target_shape: [usize; 3]) -> Self {
        let mut crop_start = [0; 3];
        let mut pad_before = [0; 3];
        for i in 0..3 {
            if src_shape[i] > target_shape[i] {
                crop_start[i] = (src_shape[i] - target_shape[i]) / 2;
            } else {
                pad_before[i] = (target_shape[i] - src_shape[i]) / 2;
            }
        }
        Self {
            src_shape,
            target_shape,
            crop_start,
            pad_before,
        }
    }

    fn copy_len(&self, axis: usize) -> usize {
        self.src_shape[axis].min(self.target_shape[axis])
    }

    /// Maps a 3D field onto the target grid.
    pub fn apply3<A: Copy + Default>(&self, src: ArrayView3<A>) -> Array3<A> {
        let mut out = Array3::default(self.target_shape);
        let [l0, l1, l2] = [self.copy_len(0), self.copy_len(1), self.copy_len(2)];
        let [cs, pb] = [self.crop_start, self.pad_before];
        for a in 0..l0 {
            for b in 0..l1 {
                for c in 0..l2 {
                    out[[pb[0] + a, pb[1] + b, pb[2] + c]] =
                        src[[cs[0] + a, cs[1] + b, cs[2] + c]];
                }
            }
        }
        out
    }

    /// Re-embeds a target-grid field back into the original grid,
    /// zero-filling whatever was cropped away.
    pub fn restore3<A: Copy + Default>(&self, src: ArrayView3<A>) -> Array3<A> {
        let mut out = Array3::default(self.src_shape);
        let [l0, l1, l2] = [self.copy_len(0), self.copy_len(1), self.copy_len(2)];
        let [cs, pb] = [self.crop_start, self.pad_before];
        for a in 0..l0 {
            for b in 0..l1 {
                for c in 0..l2 {
                    out[[cs[0] + a, cs[1] + b, cs[2] + c]] =
                        src[[pb[0] + a, pb[1] + b, pb[2] + c]];
                }
            }
        }
        out
    }
}

/// Crops/pads every channel to `target_shape`; returns the transform for
/// later re-embedding.
pub fn crop_or_pad<T: Real>(
    vol: &MultiModalVolume<T>,
    target_shape: [usize; 3],
) -> (MultiModalVolume<T>, CropPad) {
    let cp = CropPad::new(vol.spatial_shape(), target_shape);
    let c = vol.channels();
    let mut data = Array4::zeros((c, target_shape[0], target_shape[1], target_shape[2]));
    for (mut dst, src) in data.outer_iter_mut().zip(vol.data.outer_iter()) {
        dst.assign(&cp.apply3(src));
    }
    (
        MultiModalVolume {
            data,
            spacing: vol.spacing,
            channel_names: vol.channel_names.clone(),
        },
        cp,
    )
}

fn clamp(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// 3D median filter with edge-replicated borders, applied per channel.
pub fn median_filter3<T: Real>(src: ArrayView3<T>, kernel: [usize; 3]) -> Array3<T> {
    let s = src.shape();
    let r = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let mut window = Vec::with_capacity(kernel[0] * kernel[1] * kernel[2]);
    Array3::from_shape_fn((s[0], s[1], s[2]), |(d, h, w)| {
        window.clear();
        for dz in -(r[0] as isize)..=(r[0] as isize) {
            for dy in -(r[1] as isize)..=(r[1] as isize) {
                for dx in -(r[2] as isize)..=(r[2] as isize) {
                    window.push(
                        src[[
                            clamp(d as isize + dz, s[0]),
                            clamp(h as isize + dy, s[1]),
                            clamp(w as isize + dx, s[2]),
                        ]],
                    );
                }
            }
        }
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        window[window.len() / 2]
    })
}

/// Normalized 1-D Gaussian taps for a given odd length.
fn gaussian_taps<T: Real>(len: usize, sigma: f64) -> Vec<T> {
    let r = len as isize / 2;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps.into_iter().map(T::from_f64_c).collect()
}

fn convolve_axis<T: Real>(src: &Array3<T>, taps: &[T], axis: usize) -> Array3<T> {
    let s = src.shape();
    let r = taps.len() as isize / 2;
    Array3::from_shape_fn((s[0], s[1], s[2]), |(d, h, w)| {
        let mut acc = T::zero();
        let idx = [d as isize, h as isize, w as isize];
        for (t, &tap) in taps.iter().enumerate() {
            let mut p = idx;
            p[axis] += t as isize - r;
            acc += tap
                * src[[
                    clamp(p[0], s[0]),
                    clamp(p[1], s[1]),
                    clamp(p[2], s[2]),
                ]];
        }
        acc
    })
}

/// Separable 3D Gaussian with edge-replicated borders, per channel.
pub fn gaussian_filter3<T: Real>(
    src: ArrayView3<T>,
    kernel: [usize; 3],
    sigma: f64,
) -> Array3<T> {
    let mut out = src.to_owned();
    for (axis, &width) in kernel.iter().enumerate() {
        let taps = gaussian_taps::<T>(width, sigma);
        out = convolve_axis(&out, &taps, axis);
    }
    out
}

fn map_channels<T: Real>(
    vol: &MultiModalVolume<T>,
    f: impl Fn(ArrayView3<T>) -> Array3<T>,
) -> Array4<T> {
    let s = vol.data.raw_dim();
    let mut out = Array4::zeros(s);
    for (mut dst, src) in out.outer_iter_mut().zip(vol.data.outer_iter()) {
        dst.assign(&f(src));
    }
    out
}

pub fn median_denoise<T: Real>(
    vol: &MultiModalVolume<T>,
    config: &PreprocessConfig,
) -> MultiModalVolume<T> {
    MultiModalVolume {
        data: map_channels(vol, |c| median_filter3(c, config.median_kernel)),
        spacing: vol.spacing,
        channel_names: vol.channel_names.clone(),
    }
}

pub fn gaussian_denoise<T: Real>(
    vol: &MultiModalVolume<T>,
    config: &PreprocessConfig,
) -> MultiModalVolume<T> {
    MultiModalVolume {
        data: map_channels(vol, |c| {
            gaussian_filter3(c, config.gaussian_kernel, config.gaussian_sigma)
        }),
        spacing: vol.spacing,
        channel_names: vol.channel_names.clone(),
    }
}

/// Concatenates raw, median-denoised, and Gaussian-denoised versions of
/// each modality: `n` channels in, `3n` out, ordered [raw…, median…,
/// gaussian…].
pub fn stack_denoised<T: Real>(
    vol: &MultiModalVolume<T>,
    config: &PreprocessConfig,
) -> MultiModalVolume<T> {
    let median = median_denoise(vol, config);
    let gaussian = gaussian_denoise(vol, config);
    let data = ndarray::concatenate(
        Axis(0),
        &[vol.data.view(), median.data.view(), gaussian.data.view()],
    )
    .expect("matching channel shapes");
    let mut names = vol.channel_names.clone();
    names.extend(vol.channel_names.iter().map(|n| format!("{n}_median")));
    names.extend(vol.channel_names.iter().map(|n| format!("{n}_gaussian")));
    MultiModalVolume {
        data: data.as_standard_layout().to_owned(),
        spacing: vol.spacing,
        channel_names: names,
    }
}

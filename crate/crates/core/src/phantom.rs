//! Synthetic multimodal phantom: nested ellipsoids with known labels,
//! standing in for clinical data at desk scale.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{LabelMask, MultiModalVolume, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROSIS};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomNoiseConfig {
    /// Standard deviation of additive Gaussian noise inside the brain.
    pub gaussian_sigma: f64,
    /// Fraction of brain voxels hit by salt-and-pepper impulses.
    pub salt_pepper_rate: f64,
    pub salt_value: f64,
    pub pepper_value: f64,
}

impl Default for PhantomNoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.05,
            salt_pepper_rate: 0.01,
            salt_value: 3.0,
            pepper_value: 0.0,
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for ((p, c), r) in p.iter().zip(&self.center).zip(&self.radii) {
            let t = (p - c) / r;
            s += t * t;
        }
        s <= 1.0
    }
}

/// Generates a deterministic phantom: a brain ellipsoid containing nested
/// edema ⊃ core ⊃ enhancing ellipsoids, per-modality intensity offsets,
/// Gaussian noise, and salt-and-pepper impulses.
pub fn make_phantom<T: Real>(
    seed: u64,
    shape: [usize; 3],
    noise: &PhantomNoiseConfig,
) -> Result<(MultiModalVolume<T>, LabelMask)> {
    if shape.iter().any(|&s| s < 16) {
        return Err(Error::InvalidShape(format!(
            "phantom shape {shape:?} must be at least 16 per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let center: Vec<f64> = shape
        .iter()
        .map(|&s| s as f64 / 2.0 + rng.gen_range(-0.05..0.05) * s as f64)
        .collect();
    let center = [center[0], center[1], center[2]];
    let radius = |frac: f64, rng: &mut ChaCha8Rng| {
        let mut r = [0.0; 3];
        for (i, v) in r.iter_mut().enumerate() {
            *v = frac * shape[i] as f64 * rng.gen_range(0.85..1.15);
        }
        r
    };
    let brain = Ellipsoid { center, radii: radius(0.44, &mut rng) };
    let edema = Ellipsoid { center, radii: radius(0.28, &mut rng) };
    let core = Ellipsoid { center, radii: radius(0.17, &mut rng) };
    let enh = Ellipsoid { center, radii: radius(0.09, &mut rng) };

    // Per-modality base intensity; tumor tissue adds fixed offsets so the
    // classes are separable in every channel.
    let base: Vec<f64> = (0..4).map(|_| rng.gen_range(0.3..0.7)).collect();
    let offsets = [0.0, 0.5, 1.0, 1.5]; // brain, edema, necrosis, enhancing

    let mut labels = Array3::<u8>::zeros(shape);
    let mut data = Array4::<T>::zeros((4, shape[0], shape[1], shape[2]));

    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5];
                if !brain.contains(p) {
                    continue;
                }
                let (label, tissue) = if enh.contains(p) {
                    (LABEL_ENHANCING, 3)
                } else if core.contains(p) {
                    (LABEL_NECROSIS, 2)
                } else if edema.contains(p) {
                    (LABEL_EDEMA, 1)
                } else {
                    (0, 0)
                };
                labels[[d, h, w]] = label;
                for m in 0..4 {
                    data[[m, d, h, w]] = T::from_f64_c(base[m] + offsets[tissue]);
                }
            }
        }
    }

    // Noise only inside the brain; the background stays exactly zero, as in
    // skull-stripped clinical volumes.
    if noise.gaussian_sigma > 0.0 || noise.salt_pepper_rate > 0.0 {
        for m in 0..4 {
            for d in 0..shape[0] {
                for h in 0..shape[1] {
                    for w in 0..shape[2] {
                        let p = [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5];
                        if !brain.contains(p) {
                            continue;
                        }
                        let v = &mut data[[m, d, h, w]];
                        if noise.gaussian_sigma > 0.0 {
                            // Box-Muller keeps us off rand_distr for one draw.
                            let u1: f64 = rng.gen_range(1e-12..1.0);
                            let u2: f64 = rng.gen_range(0.0..1.0);
                            let g = (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos();
                            *v += T::from_f64_c(g * noise.gaussian_sigma);
                        }
                        if noise.salt_pepper_rate > 0.0
                            && rng.gen_bool(noise.salt_pepper_rate)
                        {
                            *v = T::from_f64_c(if rng.gen_bool(0.5) {
                                noise.salt_value
                            } else {
                                noise.pepper_value
                            });
                        }
                    }
                }
            }
        }
    }

    let vol = MultiModalVolume::new(
        data,
        [1.0, 1.0, 1.0],
        MODALITIES.iter().map(|s| s.to_string()).collect(),
    )?;
    let mask = LabelMask::new(labels, [1.0, 1.0, 1.0])?;
    Ok((vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{labels_to_regions, RegionSpec};

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomNoiseConfig::default();
        let (v1, m1) = make_phantom::<f32>(7, [16, 16, 16], &cfg).unwrap();
        let (v2, m2) = make_phantom::<f32>(7, [16, 16, 16], &cfg).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(m1.data, m2.data);
        let (v3, _) = make_phantom::<f32>(8, [16, 16, 16], &cfg).unwrap();
        assert_ne!(v1.data, v3.data);
    }

    #[test]
    fn zero_noise_is_piecewise_constant() {
        let cfg = PhantomNoiseConfig {
            gaussian_sigma: 0.0,
            salt_pepper_rate: 0.0,
            ..Default::default()
        };
        let (v, _) = make_phantom::<f64>(3, [16, 16, 16], &cfg).unwrap();
        // Only a handful of distinct values per channel: 0 plus four tissues.
        let mut vals: Vec<u64> = v.data.iter().map(|x| x.to_bits()).collect();
        vals.sort_unstable();
        vals.dedup();
        assert!(vals.len() <= 4 * 5);
    }

    #[test]
    fn labels_yield_nested_regions() {
        let (_, mask) = make_phantom::<f32>(11, [20, 18, 16], &PhantomNoiseConfig::default()).unwrap();
        let regions = labels_to_regions(&mask, &RegionSpec::default());
        assert!(regions.is_nested());
        // The phantom actually contains all three tumor tissues.
        assert!(regions.enhancing.iter().any(|&v| v));
        assert!(mask.data.iter().any(|&v| v == 2));
        assert!(mask.data.iter().any(|&v| v == 1));
    }

    #[test]
    fn small_shape_rejected() {
        assert!(matches!(
            make_phantom::<f32>(1, [8, 16, 16], &PhantomNoiseConfig::default()),
            Err(Error::InvalidShape(_))
        ));
    }
}

//! Core volumetric containers: multimodal intensity volumes, integer label
//! masks, and the region decompositions used by the three decoder paths.
//!
//! Axis convention throughout the crate: volumes are `(C, D, H, W)` and
//! masks `(D, H, W)`, with `W` the fastest-varying axis in memory. Spacing
//! is `[d, h, w]` in millimetres.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array3, Array4, Zip};

/// The BraTS label alphabet: background, necrosis/non-enhancing, edema,
/// enhancing tumor.
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROSIS: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 4;

/// A multimodal scalar volume `(channels, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume<T: Real> {
    pub data: Array4<T>,
    /// Voxel size in mm, ordered `[d, h, w]`.
    pub spacing: [f64; 3],
    pub channel_names: Vec<String>,
}

impl<T: Real> MultiModalVolume<T> {
    pub fn new(data: Array4<T>, spacing: [f64; 3], channel_names: Vec<String>) -> Result<Self> {
        if data.shape()[0] != channel_names.len() {
            return Err(Error::InvalidShape(format!(
                "{} channels but {} channel names",
                data.shape()[0],
                channel_names.len()
            )));
        }
        if !spacing.iter().all(|&s| s > 0.0) {
            return Err(Error::InvalidShape(format!("non-positive spacing {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("non-finite voxel value".into()));
        }
        Ok(Self {
            data,
            spacing,
            channel_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial shape `(D, H, W)`.
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// A voxelwise label mask over `{0, 1, 2, 4}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
}

impl LabelMask {
    pub fn new(data: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|v| !VALID_LABELS.contains(v)) {
            return Err(Error::InvalidLabels(bad as i64));
        }
        if !spacing.iter().all(|&s| s > 0.0) {
            return Err(Error::InvalidShape(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Tumor regions in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Whole,
    Core,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Whole, Region::Core, Region::Enhancing];

    pub fn name(self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Core => "core",
            Region::Enhancing => "enhance",
        }
    }
}

/// Which labels compose each region. Defaults to the BraTS convention:
/// whole = {1,2,4}, core = {1,4}, enhancing = {4}.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub whole: Vec<u8>,
    pub core: Vec<u8>,
    pub enhancing: Vec<u8>,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            whole: vec![1, 2, 4],
            core: vec![1, 4],
            enhancing: vec![4],
        }
    }
}

impl RegionSpec {
    /// Enforces the subset chain enhancing ⊆ core ⊆ whole.
    pub fn validate(&self) -> Result<()> {
        let subset = |a: &[u8], b: &[u8]| a.iter().all(|x| b.contains(x));
        if subset(&self.enhancing, &self.core) && subset(&self.core, &self.whole) {
            Ok(())
        } else {
            Err(Error::NestingViolation)
        }
    }

    pub fn labels_for(&self, region: Region) -> &[u8] {
        match region {
            Region::Whole => &self.whole,
            Region::Core => &self.core,
            Region::Enhancing => &self.enhancing,
        }
    }
}

/// Three binary masks of identical shape, one per tumor region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet {
    pub whole: Array3<bool>,
    pub core: Array3<bool>,
    pub enhancing: Array3<bool>,
}

impl RegionMaskSet {
    pub fn get(&self, region: Region) -> &Array3<bool> {
        match region {
            Region::Whole => &self.whole,
            Region::Core => &self.core,
            Region::Enhancing => &self.enhancing,
        }
    }

    pub fn is_nested(&self) -> bool {
        Zip::from(&self.whole)
            .and(&self.core)
            .and(&self.enhancing)
            .all(|&w, &c, &e| (!e || c) && (!c || w))
    }
}

/// Three probability maps in `[0, 1]`, one per tumor region.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMapSet<T: Real> {
    pub whole: Array3<T>,
    pub core: Array3<T>,
    pub enhancing: Array3<T>,
}

impl<T: Real> ProbabilityMapSet<T> {
    pub fn get(&self, region: Region) -> &Array3<T> {
        match region {
            Region::Whole => &self.whole,
            Region::Core => &self.core,
            Region::Enhancing => &self.enhancing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for region in Region::ALL {
            for &p in self.get(region) {
                let p = p.to_f64_c();
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::OutOfRangeProbability(p));
                }
            }
        }
        Ok(())
    }
}

/// Three integer uncertainty score maps in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMapSet {
    pub whole: Array3<u8>,
    pub core: Array3<u8>,
    pub enhancing: Array3<u8>,
}

impl UncertaintyMapSet {
    pub fn get(&self, region: Region) -> &Array3<u8> {
        match region {
            Region::Whole => &self.whole,
            Region::Core => &self.core,
            Region::Enhancing => &self.enhancing,
        }
    }
}

/// Expands a label mask into the three binary region masks. The output is
/// nested whenever `spec` satisfies its subset chain.
pub fn labels_to_regions(mask: &LabelMask, spec: &RegionSpec) -> RegionMaskSet {
    let build = |labels: &[u8]| mask.data.mapv(|v| labels.contains(&v));
    RegionMaskSet {
        whole: build(&spec.whole),
        core: build(&spec.core),
        enhancing: build(&spec.enhancing),
    }
}

/// Collapses nested region masks back into a label mask:
/// enhancing → 4, core∖enhancing → 1, whole∖core → 2, else 0.
pub fn regions_to_labels(regions: &RegionMaskSet, spacing: [f64; 3]) -> Result<LabelMask> {
    if !regions.is_nested() {
        return Err(Error::NestingViolation);
    }
    let mut data = Array3::zeros(regions.whole.raw_dim());
    Zip::from(&mut data)
        .and(&regions.whole)
        .and(&regions.core)
        .and(&regions.enhancing)
        .for_each(|out, &w, &c, &e| {
            *out = if e {
                LABEL_ENHANCING
            } else if c {
                LABEL_NECROSIS
            } else if w {
                LABEL_EDEMA
            } else {
                LABEL_BACKGROUND
            };
        });
    LabelMask::new(data, spacing)
}

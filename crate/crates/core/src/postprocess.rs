//! Post-processing: probability thresholding, region-nesting enforcement,
//! connected-component labeling, and the small-enhancing-component
//! relabeling rule (components under 500 voxels become necrosis).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{
    regions_to_labels, LabelMask, ProbabilityMapSet, RegionMaskSet, LABEL_ENHANCING,
    LABEL_NECROSIS,
};
use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub prob_threshold: f64,
    /// Enhancing components strictly smaller than this become necrosis.
    pub min_enh_voxels: usize,
    /// Voxel neighborhood: 6, 18, or 26.
    pub connectivity: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            min_enh_voxels: 500,
            connectivity: 26,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prob_threshold) || self.prob_threshold <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "prob_threshold {} must be in (0,1)",
                self.prob_threshold
            )));
        }
        if ![6, 18, 26].contains(&self.connectivity) {
            return Err(Error::InvalidConfig(format!(
                "connectivity {} must be 6, 18 or 26",
                self.connectivity
            )));
        }
        Ok(())
    }
}

/// Binarizes at `p ≥ threshold` and enforces nesting.
pub fn threshold_probs<T: Real>(
    probs: &ProbabilityMapSet<T>,
    config: &PostprocessConfig,
) -> RegionMaskSet {
    let th = T::from_f64_c(config.prob_threshold);
    let bin = |m: &Array3<T>| m.mapv(|p| p >= th);
    enforce_nesting(&RegionMaskSet {
        whole: bin(&probs.whole),
        core: bin(&probs.core),
        enhancing: bin(&probs.enhancing),
    })
}

/// Intersects downward: core ∧= whole, enhancing ∧= core. Idempotent.
pub fn enforce_nesting(regions: &RegionMaskSet) -> RegionMaskSet {
    let mut core = regions.core.clone();
    Zip::from(&mut core).and(&regions.whole).for_each(|c, &w| *c = *c && w);
    let mut enhancing = regions.enhancing.clone();
    Zip::from(&mut enhancing).and(&core).for_each(|e, &c| *e = *e && c);
    RegionMaskSet {
        whole: regions.whole.clone(),
        core,
        enhancing,
    }
}

/// Neighborhood offsets for 6/18/26-connectivity.
pub fn neighbor_offsets(connectivity: usize) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dz == 0 && dy == 0 && dx == 0 {
                    continue;
                }
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                let keep = match connectivity {
                    6 => manhattan == 1,
                    18 => manhattan <= 2,
                    _ => true,
                };
                if keep {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Two-pass union-find component labeling. Returns a label field (0 =
/// background, components numbered from 1) and per-component voxel counts
/// (`sizes[i]` is the size of component `i + 1`).
pub fn connected_components(
    mask: &Array3<bool>,
    connectivity: usize,
) -> (Array3<u32>, Vec<usize>) {
    let (d, h, w) = mask.dim();
    // Scan-order predecessors: offsets that point at already-visited voxels.
    let offsets: Vec<[isize; 3]> = neighbor_offsets(connectivity)
        .into_iter()
        .filter(|&[dz, dy, dx]| (dz, dy, dx) < (0, 0, 0) || (dz == 0 && (dy, dx) < (0, 0)))
        .collect();

    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut parent: Vec<u32> = vec![0]; // parent[0] unused
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] {
                    continue;
                }
                let mut current = 0u32;
                for &[dz, dy, dx] in &offsets {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let nl = labels[[nz as usize, ny as usize, nx as usize]];
                    if nl == 0 {
                        continue;
                    }
                    let root = find(&mut parent, nl);
                    if current == 0 {
                        current = root;
                    } else if root != current {
                        let a = find(&mut parent, current);
                        let (lo, hi) = if a < root { (a, root) } else { (root, a) };
                        parent[hi as usize] = lo;
                        current = lo;
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                labels[[z, y, x]] = current;
            }
        }
    }

    // Resolve and compact.
    let mut compact: Vec<u32> = vec![0; parent.len()];
    let mut sizes = Vec::new();
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l);
        if compact[root as usize] == 0 {
            sizes.push(0);
            compact[root as usize] = sizes.len() as u32;
        }
        *l = compact[root as usize];
        sizes[(*l - 1) as usize] += 1;
    }
    (labels, sizes)
}

/// Relabels every enhancing component smaller than `min_enh_voxels` to
/// necrosis. Whole-region membership (and total tumor volume) is invariant.
pub fn relabel_small_enhancing(mask: &LabelMask, config: &PostprocessConfig) -> LabelMask {
    let enh = mask.data.mapv(|v| v == LABEL_ENHANCING);
    let (comp, sizes) = connected_components(&enh, config.connectivity);
    let mut data = mask.data.clone();
    Zip::from(&mut data).and(&comp).for_each(|v, &c| {
        if c != 0 && sizes[(c - 1) as usize] < config.min_enh_voxels {
            *v = LABEL_NECROSIS;
        }
    });
    LabelMask {
        data,
        spacing: mask.spacing,
    }
}

/// Full chain: threshold → nesting → labels → small-component relabeling.
pub fn postprocess_probs<T: Real>(
    probs: &ProbabilityMapSet<T>,
    spacing: [f64; 3],
    config: &PostprocessConfig,
) -> Result<LabelMask> {
    config.validate()?;
    let regions = threshold_probs(probs, config);
    let labels = regions_to_labels(&regions, spacing)?;
    Ok(relabel_small_enhancing(&labels, config))
}

//! Evaluation metrics: Dice similarity, sensitivity/specificity, the
//! 95th-percentile Hausdorff surface distance, and the uncertainty
//! filtration metrics (DAUC, RFTP, RFTN).
//!
//! HD95 runs on an exact Euclidean distance transform (the Felzenszwalb
//! lower-envelope algorithm, generalized to anisotropic spacing); the test
//! suite pins it against an all-pairs brute-force oracle.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Reported when exactly one mask is empty (platform convention for
    /// missing structures).
    pub hd95_empty_sentinel: f64,
    /// Uncertainty filtration threshold step; thresholds run 0..=100.
    pub tau_step: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hd95_empty_sentinel: 373.1287,
            tau_step: 5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_step == 0 || self.tau_step > 100 || 100 % self.tau_step != 0 {
            return Err(Error::InvalidConfig(format!(
                "tau_step {} must divide 100",
                self.tau_step
            )));
        }
        if self.hd95_empty_sentinel < 0.0 {
            return Err(Error::InvalidConfig("negative HD95 sentinel".into()));
        }
        Ok(())
    }
}

fn check_shapes(u: &Array3<bool>, v: &Array3<bool>) -> Result<()> {
    if u.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            expected: u.shape().to_vec(),
            got: v.shape().to_vec(),
        });
    }
    Ok(())
}

/// Dice similarity `2|u∩v| / (|u|+|v|)`; both-empty → 1, one-empty → 0.
pub fn dsc(u: &Array3<bool>, v: &Array3<bool>) -> Result<f64> {
    check_shapes(u, v)?;
    let mut inter = 0usize;
    let mut nu = 0usize;
    let mut nv = 0usize;
    for (&a, &b) in u.iter().zip(v.iter()) {
        nu += a as usize;
        nv += b as usize;
        inter += (a && b) as usize;
    }
    Ok(if nu + nv == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (nu + nv) as f64
    })
}

/// `(sensitivity, specificity)` of prediction `u` against truth `v`;
/// an empty denominator yields NaN.
pub fn sensitivity_specificity(u: &Array3<bool>, v: &Array3<bool>) -> Result<(f64, f64)> {
    check_shapes(u, v)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in u.iter().zip(v.iter()) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
        }
    }
    let sens = if tp + fne == 0 {
        f64::NAN
    } else {
        tp as f64 / (tp + fne) as f64
    };
    let spec = if tn + fp == 0 {
        f64::NAN
    } else {
        tn as f64 / (tn + fp) as f64
    };
    Ok((sens, spec))
}

/// Boundary voxels: set voxels with at least one unset 6-neighbor
/// (out-of-bounds counts as unset).
pub fn boundary_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] {
                    continue;
                }
                let neighbors = [
                    (z as isize - 1, y as isize, x as isize),
                    (z as isize + 1, y as isize, x as isize),
                    (z as isize, y as isize - 1, x as isize),
                    (z as isize, y as isize + 1, x as isize),
                    (z as isize, y as isize, x as isize - 1),
                    (z as isize, y as isize, x as isize + 1),
                ];
                let is_boundary = neighbors.iter().any(|&(nz, ny, nx)| {
                    nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as isize
                        || ny >= h as isize
                        || nx >= w as isize
                        || !mask[[nz as usize, ny as usize, nx as usize]]
                });
                if is_boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// 1-D squared-distance lower envelope over sample positions `pos` (sorted,
/// strictly increasing). `f` holds incoming squared distances; returns the
/// transformed values.
fn dt1d(f: &[f64], pos: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
    let mut k = 0usize;
    let mut started = false;
    let mut out = vec![f64::INFINITY; n];
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos[q] * pos[q]) - (f[p] + pos[p] * pos[p]))
                / (2.0 * pos[q] - 2.0 * pos[p]);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        return out;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos[q] {
            k += 1;
        }
        let p = v[k];
        let d = pos[q] - pos[p];
        *o = d * d + f[p];
    }
    out
}

/// Exact squared Euclidean distance transform to the set voxels of `mask`,
/// with anisotropic `spacing` in mm. Empty mask → all infinity.
pub fn squared_edt(mask: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let (d, h, w) = mask.dim();
    let mut dist = Array3::from_shape_fn((d, h, w), |ix| {
        if mask[ix] {
            0.0
        } else {
            f64::INFINITY
        }
    });
    // Sweep axis 2 (w), then 1, then 0.
    let pos_w: Vec<f64> = (0..w).map(|i| i as f64 * spacing[2]).collect();
    for z in 0..d {
        for y in 0..h {
            let row: Vec<f64> = (0..w).map(|x| dist[[z, y, x]]).collect();
            for (x, val) in dt1d(&row, &pos_w).into_iter().enumerate() {
                dist[[z, y, x]] = val;
            }
        }
    }
    let pos_h: Vec<f64> = (0..h).map(|i| i as f64 * spacing[1]).collect();
    for z in 0..d {
        for x in 0..w {
            let col: Vec<f64> = (0..h).map(|y| dist[[z, y, x]]).collect();
            for (y, val) in dt1d(&col, &pos_h).into_iter().enumerate() {
                dist[[z, y, x]] = val;
            }
        }
    }
    let pos_d: Vec<f64> = (0..d).map(|i| i as f64 * spacing[0]).collect();
    for y in 0..h {
        for x in 0..w {
            let col: Vec<f64> = (0..d).map(|z| dist[[z, y, x]]).collect();
            for (z, val) in dt1d(&col, &pos_d).into_iter().enumerate() {
                dist[[z, y, x]] = val;
            }
        }
    }
    dist
}

/// Linear-interpolated percentile of a sorted slice, `q ∈ [0,1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = q * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let t = idx - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries,
/// in mm. Both masks empty → 0; exactly one empty → the sentinel.
pub fn hd95(
    u: &Array3<bool>,
    v: &Array3<bool>,
    spacing: [f64; 3],
    config: &MetricsConfig,
) -> Result<f64> {
    check_shapes(u, v)?;
    let bu = boundary_voxels(u);
    let bv = boundary_voxels(v);
    match (bu.is_empty(), bv.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(config.hd95_empty_sentinel),
        _ => {}
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let mut target = Array3::from_elem(u.raw_dim(), false);
        for &p in to {
            target[p] = true;
        }
        let edt = squared_edt(&target, spacing);
        let mut dists: Vec<f64> = from.iter().map(|&p| edt[p].sqrt()).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        percentile(&dists, 0.95)
    };
    Ok(directed(&bu, &bv).max(directed(&bv, &bu)))
}

/// Uncertainty filtration curve: at each threshold τ, voxels with
/// uncertainty above τ are excluded before re-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationCurve {
    pub thresholds: Vec<u8>,
    pub dice_at_tau: Vec<f64>,
    pub ftp_ratio_at_tau: Vec<f64>,
    pub ftn_ratio_at_tau: Vec<f64>,
}

pub fn filtration_curve(
    pred: &Array3<bool>,
    truth: &Array3<bool>,
    unc: &Array3<u8>,
    config: &MetricsConfig,
) -> Result<FiltrationCurve> {
    check_shapes(pred, truth)?;
    if unc.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            expected: pred.shape().to_vec(),
            got: unc.shape().to_vec(),
        });
    }
    config.validate()?;
    let count = |keep: &dyn Fn(u8) -> bool| -> (usize, usize, usize, usize) {
        // (TP, TN, |pred∩keep|, |truth∩keep|)
        let (mut tp, mut tn, mut np, mut nt) = (0, 0, 0, 0);
        for ((&p, &t), &s) in pred.iter().zip(truth.iter()).zip(unc.iter()) {
            if !keep(s) {
                continue;
            }
            np += p as usize;
            nt += t as usize;
            tp += (p && t) as usize;
            tn += (!p && !t) as usize;
        }
        (tp, tn, np, nt)
    };
    let (tp0, tn0, _, _) = count(&|_| true);
    let mut curve = FiltrationCurve {
        thresholds: Vec::new(),
        dice_at_tau: Vec::new(),
        ftp_ratio_at_tau: Vec::new(),
        ftn_ratio_at_tau: Vec::new(),
    };
    let mut tau = 0usize;
    while tau <= 100 {
        let (tp, tn, np, nt) = count(&|s| (s as usize) <= tau);
        curve.thresholds.push(tau as u8);
        curve.dice_at_tau.push(if np + nt == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (np + nt) as f64
        });
        curve.ftp_ratio_at_tau.push(if tp0 == 0 {
            0.0
        } else {
            1.0 - tp as f64 / tp0 as f64
        });
        curve.ftn_ratio_at_tau.push(if tn0 == 0 {
            0.0
        } else {
            1.0 - tn as f64 / tn0 as f64
        });
        tau += config.tau_step;
    }
    Ok(curve)
}

/// `(DAUC, RFTP, RFTN)`: curve means scaled to [0, 100].
pub fn dauc_rftp_rftn(curve: &FiltrationCurve) -> (f64, f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (
        mean(&curve.dice_at_tau) * 100.0,
        mean(&curve.ftp_ratio_at_tau) * 100.0,
        mean(&curve.ftn_ratio_at_tau) * 100.0,
    )
}

/// One evaluated (case, region) pair.
#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    pub region: String,
    pub dsc: f64,
    pub sens: f64,
    pub spec: f64,
    pub hd95: f64,
    pub dauc: f64,
    pub rftp: f64,
    pub rftn: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    if finite.len() < 2 {
        return (mean, 0.0);
    }
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Writes the per-case rows plus per-region `mean` and `se` summary rows.
pub fn write_metrics_csv<P: AsRef<Path>>(path: P, rows: &[CaseMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "case,region,dsc,sens,spec,hd95,dauc,rftp,rftn")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.case, r.region, r.dsc, r.sens, r.spec, r.hd95, r.dauc, r.rftp, r.rftn
        )?;
    }
    let mut regions: Vec<&str> = rows.iter().map(|r| r.region.as_str()).collect();
    regions.dedup();
    let mut seen = Vec::new();
    for region in regions {
        if seen.contains(&region) {
            continue;
        }
        seen.push(region);
        let pick = |get: &dyn Fn(&CaseMetrics) -> f64| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.region == region)
                .map(get)
                .collect()
        };
        let stats: Vec<(f64, f64)> = [
            pick(&|r: &CaseMetrics| r.dsc),
            pick(&|r: &CaseMetrics| r.sens),
            pick(&|r: &CaseMetrics| r.spec),
            pick(&|r: &CaseMetrics| r.hd95),
            pick(&|r: &CaseMetrics| r.dauc),
            pick(&|r: &CaseMetrics| r.rftp),
            pick(&|r: &CaseMetrics| r.rftn),
        ]
        .iter()
        .map(|v| mean_se(v))
        .collect();
        let fmt = |which: usize| -> String {
            stats
                .iter()
                .map(|s| {
                    let v = if which == 0 { s.0 } else { s.1 };
                    format!("{v}")
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(f, "mean,{},{}", region, fmt(0))?;
        writeln!(f, "se,{},{}", region, fmt(1))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn from_indices(shape: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(shape, false);
        for &ix in on {
            m[ix] = true;
        }
        m
    }

    #[test]
    fn dsc_reference_cases() {
        let s = (4, 4, 4);
        let a = from_indices(s, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]]);
        let b = from_indices(
            s,
            &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [2, 2, 2], [2, 2, 3], [3, 3, 3]],
        );
        // |u|=4, |v|=6, |u∩v|=3 → 0.6
        assert_relative_eq!(dsc(&a, &b).unwrap(), 0.6);
        assert_relative_eq!(dsc(&b, &a).unwrap(), 0.6);
        assert_relative_eq!(dsc(&a, &a).unwrap(), 1.0);
        let empty = Array3::from_elem(s, false);
        assert_relative_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_relative_eq!(dsc(&a, &empty).unwrap(), 0.0);
        let disjoint = from_indices(s, &[[3, 0, 0]]);
        assert_relative_eq!(dsc(&a, &disjoint).unwrap(), 0.0);
        let bad = Array3::from_elem((2, 2, 2), false);
        assert!(dsc(&a, &bad).is_err());
    }

    #[test]
    fn sens_spec_against_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.4));
            let v = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.4));
            let (sens, spec) = sensitivity_specificity(&u, &v).unwrap();
            let (mut tp, mut tn, mut fp, mut fne) = (0.0, 0.0, 0.0, 0.0);
            for (&p, &t) in u.iter().zip(v.iter()) {
                if p && t {
                    tp += 1.0
                } else if !p && !t {
                    tn += 1.0
                } else if p {
                    fp += 1.0
                } else {
                    fne += 1.0
                }
            }
            if tp + fne > 0.0 {
                assert_relative_eq!(sens, tp / (tp + fne));
            } else {
                assert!(sens.is_nan());
            }
            assert_relative_eq!(spec, tn / (tn + fp));
        }
        let all = Array3::from_elem((2, 2, 2), true);
        let v = from_indices((2, 2, 2), &[[0, 0, 0]]);
        let (sens, spec) = sensitivity_specificity(&all, &v).unwrap();
        assert_relative_eq!(sens, 1.0);
        assert_relative_eq!(spec, 0.0);
    }

    /// Brute-force directed HD95 via all-pairs distances.
    fn hd95_oracle(
        u: &Array3<bool>,
        v: &Array3<bool>,
        spacing: [f64; 3],
        sentinel: f64,
    ) -> f64 {
        let bu = boundary_voxels(u);
        let bv = boundary_voxels(v);
        match (bu.is_empty(), bv.is_empty()) {
            (true, true) => return 0.0,
            (true, false) | (false, true) => return sentinel,
            _ => {}
        }
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
            let mut dists: Vec<f64> = from
                .iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            let mut s = 0.0;
                            for i in 0..3 {
                                let d = (a[i] as f64 - b[i] as f64) * spacing[i];
                                s += d * d;
                            }
                            s.sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = dists.len();
            if n == 1 {
                return dists[0];
            }
            let idx = 0.95 * (n - 1) as f64;
            let lo = idx.floor() as usize;
            let hi = idx.ceil() as usize;
            let t = idx - lo as f64;
            dists[lo] * (1.0 - t) + dists[hi] * t
        };
        directed(&bu, &bv).max(directed(&bv, &bu))
    }

    #[test]
    fn hd95_reference_cases() {
        let cfg = MetricsConfig::default();
        let s = (8, 8, 8);
        let a = from_indices(s, &[[2, 2, 2], [2, 2, 3]]);
        assert_relative_eq!(hd95(&a, &a, [1.0; 3], &cfg).unwrap(), 0.0);
        // Two single voxels 3 apart along one axis.
        let p = from_indices(s, &[[1, 1, 1]]);
        let q = from_indices(s, &[[1, 1, 4]]);
        assert_relative_eq!(hd95(&p, &q, [1.0; 3], &cfg).unwrap(), 3.0);
        // Spacing scales the answer.
        assert_relative_eq!(hd95(&p, &q, [1.0, 1.0, 2.5], &cfg).unwrap(), 7.5);
        // Empty conventions.
        let empty = Array3::from_elem(s, false);
        assert_relative_eq!(hd95(&empty, &empty, [1.0; 3], &cfg).unwrap(), 0.0);
        assert_relative_eq!(
            hd95(&p, &empty, [1.0; 3], &cfg).unwrap(),
            cfg.hd95_empty_sentinel
        );
    }

    #[test]
    fn hd95_matches_all_pairs_oracle() {
        let cfg = MetricsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..200 {
            let density = 0.05 + 0.4 * (trial % 7) as f64 / 6.0;
            let u = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(density));
            let v = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(density));
            let got = hd95(&u, &v, [1.0; 3], &cfg).unwrap();
            let want = hd95_oracle(&u, &v, [1.0; 3], cfg.hd95_empty_sentinel);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn hd95_matches_oracle_with_anisotropic_spacing() {
        let cfg = MetricsConfig::default();
        let spacing = [1.0, 0.7, 2.3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let u = Array3::from_shape_fn((6, 7, 5), |_| rng.gen_bool(0.2));
            let v = Array3::from_shape_fn((6, 7, 5), |_| rng.gen_bool(0.2));
            let got = hd95(&u, &v, spacing, &cfg).unwrap();
            let want = hd95_oracle(&u, &v, spacing, cfg.hd95_empty_sentinel);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn hd95_percentile_at_most_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = MetricsConfig::default();
        for _ in 0..20 {
            let u = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(0.3));
            let v = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(0.3));
            let bu = boundary_voxels(&u);
            let bv = boundary_voxels(&v);
            if bu.is_empty() || bv.is_empty() {
                continue;
            }
            let h95 = hd95(&u, &v, [1.0; 3], &cfg).unwrap();
            // Full Hausdorff: max of directed maxima.
            let max_directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
                from.iter()
                    .map(|a| {
                        to.iter()
                            .map(|b| {
                                ((a[0] as f64 - b[0] as f64).powi(2)
                                    + (a[1] as f64 - b[1] as f64).powi(2)
                                    + (a[2] as f64 - b[2] as f64).powi(2))
                                .sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            };
            let full = max_directed(&bu, &bv).max(max_directed(&bv, &bu));
            assert!(h95 <= full + 1e-12);
        }
    }

    #[test]
    fn filtration_constant_zero_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.5));
        let truth = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.5));
        let unc = Array3::from_elem((4, 4, 4), 0u8);
        let cfg = MetricsConfig::default();
        let curve = filtration_curve(&pred, &truth, &unc, &cfg).unwrap();
        assert_eq!(curve.thresholds.len(), 21);
        let d = dsc(&pred, &truth).unwrap();
        for i in 0..curve.thresholds.len() {
            assert_relative_eq!(curve.dice_at_tau[i], d);
            assert_relative_eq!(curve.ftp_ratio_at_tau[i], 0.0);
            assert_relative_eq!(curve.ftn_ratio_at_tau[i], 0.0);
        }
        let (dauc, rftp, rftn) = dauc_rftp_rftn(&curve);
        assert_relative_eq!(dauc, d * 100.0);
        assert_relative_eq!(rftp, 0.0);
        assert_relative_eq!(rftn, 0.0);
    }

    #[test]
    fn filtration_handcrafted_case() {
        // 2×2×1 grid: pred [T,T,F,F], truth [T,F,T,F],
        // unc [0, 80, 80, 0]. TP_0 = 1 (voxel 0), TN_0 = 1 (voxel 3).
        let pred = from_indices((2, 2, 1), &[[0, 0, 0], [0, 1, 0]]);
        let truth = from_indices((2, 2, 1), &[[0, 0, 0], [1, 0, 0]]);
        let mut unc = Array3::from_elem((2, 2, 1), 0u8);
        unc[[0, 1, 0]] = 80;
        unc[[1, 0, 0]] = 80;
        let cfg = MetricsConfig::default();
        let curve = filtration_curve(&pred, &truth, &unc, &cfg).unwrap();
        // τ < 80: only voxels 0 and 3 kept → pred={0}, truth={0}, dice 1.
        // τ ≥ 80: all kept → dice = 2·1/(2+2) = 0.5.
        for (i, &tau) in curve.thresholds.iter().enumerate() {
            let expect = if tau < 80 { 1.0 } else { 0.5 };
            assert_relative_eq!(curve.dice_at_tau[i], expect, epsilon = 1e-12);
            assert_relative_eq!(curve.ftp_ratio_at_tau[i], 0.0);
            assert_relative_eq!(curve.ftn_ratio_at_tau[i], 0.0);
        }
        // 16 thresholds below 80 (0..=75), 5 at or above.
        let (dauc, _, _) = dauc_rftp_rftn(&curve);
        assert_relative_eq!(dauc, (16.0 * 1.0 + 5.0 * 0.5) / 21.0 * 100.0, epsilon = 1e-9);
    }

    #[test]
    fn filtration_removing_errors_raises_dice() {
        // Errors marked maximally uncertain, correct voxels certain.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.5));
        let truth = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_bool(0.5));
        let unc = ndarray::Zip::from(&pred)
            .and(&truth)
            .map_collect(|&p, &t| if p == t { 0u8 } else { 100 });
        let cfg = MetricsConfig::default();
        let curve = filtration_curve(&pred, &truth, &unc, &cfg).unwrap();
        let base = dsc(&pred, &truth).unwrap();
        let (dauc, rftp, rftn) = dauc_rftp_rftn(&curve);
        assert!(dauc > base * 100.0);
        // Nothing true-positive or true-negative was filtered.
        assert_relative_eq!(rftp, 0.0);
        assert_relative_eq!(rftn, 0.0);
        // At τ = 100 nothing is filtered → unfiltered Dice.
        assert_relative_eq!(*curve.dice_at_tau.last().unwrap(), base);
        // Below 100 all errors are filtered → perfect Dice.
        assert_relative_eq!(curve.dice_at_tau[0], 1.0);
    }

    #[test]
    fn filtration_ratios_monotone_when_lowering_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pred = Array3::from_shape_fn((5, 5, 5), |_| rng.gen_bool(0.5));
        let truth = Array3::from_shape_fn((5, 5, 5), |_| rng.gen_bool(0.5));
        let unc = Array3::from_shape_fn((5, 5, 5), |_| rng.gen_range(0..=100u8));
        let cfg = MetricsConfig::default();
        let curve = filtration_curve(&pred, &truth, &unc, &cfg).unwrap();
        for i in 1..curve.thresholds.len() {
            assert!(curve.ftp_ratio_at_tau[i] <= curve.ftp_ratio_at_tau[i - 1] + 1e-12);
            assert!(curve.ftn_ratio_at_tau[i] <= curve.ftn_ratio_at_tau[i - 1] + 1e-12);
        }
        assert_relative_eq!(*curve.ftp_ratio_at_tau.last().unwrap(), 0.0);
        assert_relative_eq!(*curve.ftn_ratio_at_tau.last().unwrap(), 0.0);
    }

    #[test]
    fn metrics_csv_has_summary_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            CaseMetrics {
                case: "case_0000".into(),
                region: "whole".into(),
                dsc: 0.8,
                sens: 0.9,
                spec: 0.99,
                hd95: 2.0,
                dauc: 80.0,
                rftp: 1.0,
                rftn: 0.5,
            },
            CaseMetrics {
                case: "case_0001".into(),
                region: "whole".into(),
                dsc: 0.6,
                sens: 0.7,
                spec: 0.97,
                hd95: 4.0,
                dauc: 60.0,
                rftp: 3.0,
                rftn: 1.5,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case,region,dsc,sens,spec,hd95,dauc,rftp,rftn\n"));
        assert!(text.contains("case_0001,whole,0.6"));
        // mean dsc = 0.7, SE = sd/√2 = 0.1414·0.7071 = 0.1.
        let mean_line = text
            .lines()
            .find(|l| l.starts_with("mean,whole"))
            .unwrap();
        assert!(mean_line.starts_with("mean,whole,0.7,"));
        let se_line = text.lines().find(|l| l.starts_with("se,whole")).unwrap();
        let se_dsc: f64 = se_line.split(',').nth(2).unwrap().parse().unwrap();
        assert_relative_eq!(se_dsc, 0.1, epsilon = 1e-12);
    }
}

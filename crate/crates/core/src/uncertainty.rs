//! Ensemble averaging and voxelwise uncertainty scores:
//! `u = 200·(1−p)` for `p ≥ 0.5`, `u = 200·p` otherwise, so certainty at
//! either extreme scores 0 and maximal doubt (p = 0.5) scores 100.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{ProbabilityMapSet, Region, UncertaintyMapSet};
use ndarray::Array3;

/// Voxelwise arithmetic mean of the member probability maps.
pub fn ensemble_mean<T: Real>(members: &[ProbabilityMapSet<T>]) -> Result<ProbabilityMapSet<T>> {
    let Some(first) = members.first() else {
        return Err(Error::EmptyEnsemble);
    };
    for m in members {
        for region in Region::ALL {
            if m.get(region).shape() != first.get(region).shape() {
                return Err(Error::ShapeMismatch {
                    expected: first.get(region).shape().to_vec(),
                    got: m.get(region).shape().to_vec(),
                });
            }
        }
    }
    let n = T::from_usize(members.len()).unwrap();
    let mean = |pick: fn(&ProbabilityMapSet<T>) -> &Array3<T>| {
        let mut acc = pick(first).clone();
        for m in &members[1..] {
            acc += pick(m);
        }
        acc.mapv_into(|v| v / n)
    };
    Ok(ProbabilityMapSet {
        whole: mean(|m| &m.whole),
        core: mean(|m| &m.core),
        enhancing: mean(|m| &m.enhancing),
    })
}

/// Scalar form of the uncertainty score, before integer export.
pub fn uncertainty_score(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRangeProbability(p));
    }
    Ok(if p >= 0.5 { 200.0 * (1.0 - p) } else { 200.0 * p })
}

/// Integer score in `[0, 100]`, rounded to nearest with ties up.
fn export_score(p: f64) -> Result<u8> {
    let u = uncertainty_score(p)?;
    Ok((u + 0.5).floor().clamp(0.0, 100.0) as u8)
}

/// Converts probability maps to integer uncertainty maps.
pub fn uncertainty_from_prob<T: Real>(probs: &ProbabilityMapSet<T>) -> Result<UncertaintyMapSet> {
    let conv = |m: &Array3<T>| -> Result<Array3<u8>> {
        let mut out = Array3::zeros(m.raw_dim());
        for (o, &p) in out.iter_mut().zip(m.iter()) {
            *o = export_score(p.to_f64_c())?;
        }
        Ok(out)
    };
    Ok(UncertaintyMapSet {
        whole: conv(&probs.whole)?,
        core: conv(&probs.core)?,
        enhancing: conv(&probs.enhancing)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps(fill: [f64; 3]) -> ProbabilityMapSet<f64> {
        ProbabilityMapSet {
            whole: Array3::from_elem((2, 2, 2), fill[0]),
            core: Array3::from_elem((2, 2, 2), fill[1]),
            enhancing: Array3::from_elem((2, 2, 2), fill[2]),
        }
    }

    #[test]
    fn score_reference_points() {
        assert_relative_eq!(uncertainty_score(0.5).unwrap(), 100.0);
        assert_relative_eq!(uncertainty_score(0.0).unwrap(), 0.0);
        assert_relative_eq!(uncertainty_score(1.0).unwrap(), 0.0);
        assert_relative_eq!(uncertainty_score(0.3).unwrap(), 60.0);
        assert!(uncertainty_score(1.2).is_err());
        assert!(uncertainty_score(-0.1).is_err());
    }

    #[test]
    fn score_is_symmetric_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p: f64 = rng.gen_range(0.0..=1.0);
            let u = uncertainty_score(p).unwrap();
            let mirrored = uncertainty_score(1.0 - p).unwrap();
            assert_relative_eq!(u, mirrored, epsilon = 1e-9);
            assert!((0.0..=100.0).contains(&u));
            // Nonincreasing in distance from 0.5.
            let q = 0.5 + (p - 0.5).abs() / 2.0;
            assert!(uncertainty_score(q).unwrap() >= u - 1e-9);
        }
    }

    #[test]
    fn export_rounds_ties_up() {
        // p = 0.49750 → u = 99.5 → 100 on the low branch.
        assert_eq!(export_score(0.4975).unwrap(), 100);
        assert_eq!(export_score(0.497).unwrap(), 99);
        assert_eq!(export_score(0.0).unwrap(), 0);
        assert_eq!(export_score(0.5).unwrap(), 100);
    }

    #[test]
    fn ensemble_mean_basics() {
        let single = ensemble_mean(&[maps([0.2, 0.4, 0.6])]).unwrap();
        assert_eq!(single, maps([0.2, 0.4, 0.6]));
        let two = ensemble_mean(&[maps([0.2, 0.0, 1.0]), maps([0.8, 1.0, 0.0])]).unwrap();
        assert_eq!(two, maps([0.5, 0.5, 0.5]));
        assert!(matches!(
            ensemble_mean::<f64>(&[]),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn ensemble_mean_matches_oracle_and_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members: Vec<ProbabilityMapSet<f64>> = (0..7)
            .map(|_| ProbabilityMapSet {
                whole: Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(0.0..1.0)),
                core: Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(0.0..1.0)),
                enhancing: Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(0.0..1.0)),
            })
            .collect();
        let mean = ensemble_mean(&members).unwrap();
        for idx in [[0, 0, 0], [2, 3, 4], [1, 2, 3]] {
            let oracle: f64 = members.iter().map(|m| m.whole[idx]).sum::<f64>() / 7.0;
            assert_relative_eq!(mean.whole[idx], oracle, epsilon = 1e-12);
        }

        let mut bad = members.clone();
        bad.push(ProbabilityMapSet {
            whole: Array3::zeros((2, 2, 2)),
            core: Array3::zeros((2, 2, 2)),
            enhancing: Array3::zeros((2, 2, 2)),
        });
        assert!(matches!(
            ensemble_mean(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn map_conversion_round_values() {
        let u = uncertainty_from_prob(&maps([0.5, 0.3, 1.0])).unwrap();
        assert!(u.whole.iter().all(|&v| v == 100));
        assert!(u.core.iter().all(|&v| v == 60));
        assert!(u.enhancing.iter().all(|&v| v == 0));
    }
}

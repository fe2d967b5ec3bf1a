//! Built-in verification suite behind the `selftest` CLI subcommand:
//! quick independent checks of the numeric kernels against hand
//! computations and brute-force oracles. Each check prints one line.

use crate::error::Result;
use crate::losses::{soft_dice, LossConfig};
use crate::metrics::{boundary_voxels, dsc, hd95, MetricsConfig};
use crate::postprocess::{relabel_small_enhancing, PostprocessConfig};
use crate::preprocess::median_filter3;
use crate::train::{lr_schedule, TrainConfig};
use crate::uncertainty::uncertainty_score;
use crate::volume::LabelMask;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn check_lr_schedule() -> bool {
    let cfg = TrainConfig::default();
    approx(lr_schedule(0, &cfg).unwrap(), 1e-4, 1e-12)
        && approx(lr_schedule(100, &cfg).unwrap(), 1.25e-5, 1e-12)
        && approx(lr_schedule(200, &cfg).unwrap(), 0.0, 1e-18)
}

fn check_uncertainty_score() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    if !approx(uncertainty_score(0.5).unwrap(), 100.0, 1e-12)
        || !approx(uncertainty_score(0.0).unwrap(), 0.0, 1e-12)
        || !approx(uncertainty_score(1.0).unwrap(), 0.0, 1e-12)
    {
        return false;
    }
    (0..200).all(|_| {
        let p: f64 = rng.gen_range(0.0..=1.0);
        approx(
            uncertainty_score(p).unwrap(),
            uncertainty_score(1.0 - p).unwrap(),
            1e-9,
        )
    })
}

fn check_dice_loss_gradient() -> bool {
    // Central finite differences on a small random probability vector.
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Array1::from_shape_fn(12, |_| rng.gen_range(0.05..0.95)).into_dyn();
    let t = Array1::from_shape_fn(12, |_| f64::from(u8::from(rng.gen_bool(0.5)))).into_dyn();
    let (_, grad) = soft_dice(&p, &t, cfg.epsilon);
    let h = 1e-6;
    grad.iter().enumerate().all(|(i, &g)| {
        let mut plus = p.clone();
        let mut minus = p.clone();
        plus[i] += h;
        minus[i] -= h;
        let (lp, _) = soft_dice(&plus, &t, cfg.epsilon);
        let (lm, _) = soft_dice(&minus, &t, cfg.epsilon);
        approx(g, (lp - lm) / (2.0 * h), 1e-6)
    })
}

fn check_hd95_oracle() -> bool {
    let cfg = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let u = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(0.25));
        let v = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(0.25));
        let bu = boundary_voxels(&u);
        let bv = boundary_voxels(&v);
        if bu.is_empty() || bv.is_empty() {
            continue;
        }
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
            let mut d: Vec<f64> = from
                .iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            (0..3)
                                .map(|i| (a[i] as f64 - b[i] as f64).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = 0.95 * (d.len() - 1) as f64;
            let (lo, hi) = (idx.floor() as usize, idx.ceil() as usize);
            d[lo] * (1.0 - (idx - lo as f64)) + d[hi] * (idx - lo as f64)
        };
        let want = directed(&bu, &bv).max(directed(&bv, &bu));
        let got = hd95(&u, &v, [1.0; 3], &cfg).unwrap();
        if !approx(got, want, 1e-9) {
            return false;
        }
    }
    true
}

fn check_dsc_conventions() -> bool {
    let empty = Array3::from_elem((4, 4, 4), false);
    let mut one = empty.clone();
    one[[1, 1, 1]] = true;
    approx(dsc(&empty, &empty).unwrap(), 1.0, 0.0)
        && approx(dsc(&one, &empty).unwrap(), 0.0, 0.0)
        && approx(dsc(&one, &one).unwrap(), 1.0, 0.0)
}

fn check_median_oracle() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src = Array3::from_shape_fn((5, 5, 5), |_| rng.gen_range(-1.0f64..1.0));
    let out = median_filter3(src.view(), [3, 3, 3]);
    for d in 0..5usize {
        for h in 0..5usize {
            for w in 0..5usize {
                let mut window = Vec::with_capacity(27);
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            window.push(
                                src[[
                                    (d as isize + dz).clamp(0, 4) as usize,
                                    (h as isize + dy).clamp(0, 4) as usize,
                                    (w as isize + dx).clamp(0, 4) as usize,
                                ]],
                            );
                        }
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if out[[d, h, w]] != window[13] {
                    return false;
                }
            }
        }
    }
    true
}

fn check_small_enhancing_relabel() -> bool {
    // 499 enhancing voxels flip to necrosis; 500 survive.
    let cfg = PostprocessConfig::default();
    let run = |n: usize| -> u8 {
        let mut data = Array3::<u8>::zeros((10, 10, 10));
        for (i, v) in data.iter_mut().enumerate() {
            if i < n {
                *v = 4;
            }
        }
        let mask = LabelMask::new(data, [1.0; 3]).unwrap();
        relabel_small_enhancing(&mask, &cfg).data[[0, 0, 0]]
    };
    run(499) == 1 && run(500) == 4
}

/// Runs every check, reporting through `report(name, passed)`.
/// Returns `Ok(true)` when all checks pass.
pub fn run(mut report: impl FnMut(&str, bool)) -> Result<bool> {
    type Check = (&'static str, fn() -> bool);
    let checks: [Check; 7] = [
        ("lr-schedule-reference-points", check_lr_schedule),
        ("uncertainty-score-reference-points", check_uncertainty_score),
        ("dice-loss-gradient-fd", check_dice_loss_gradient),
        ("hd95-all-pairs-oracle", check_hd95_oracle),
        ("dsc-empty-conventions", check_dsc_conventions),
        ("median-filter-oracle", check_median_oracle),
        ("small-enhancing-relabel-rule", check_small_enhancing_relabel),
    ];
    let mut all = true;
    for (name, f) in checks {
        let ok = f();
        all &= ok;
        report(name, ok);
    }
    Ok(all)
}

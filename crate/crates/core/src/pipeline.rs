//! Case-level plumbing: dataset layout, per-case preprocessing, training
//! set assembly, prediction with re-embedding into the original grid,
//! ensemble inference, uncertainty export, and evaluation.
//!
//! Datasets are directories of `case_XXXX/` folders, each holding
//! `t1.nii.gz`, `t1c.nii.gz`, `t2.nii.gz`, `flair.nii.gz` and (for labeled
//! data) `seg.nii.gz`.

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    dauc_rftp_rftn, dsc, filtration_curve, hd95, sensitivity_specificity, CaseMetrics,
    FiltrationCurve, MetricsConfig,
};
use crate::model::MdNet;
use crate::nifti::{
    load_label_mask, load_scalar_volume, load_u8_volume, save_label_mask, save_scalar_volume,
    save_u8_volume, NiftiScalar,
};
use crate::phantom::{make_phantom, PhantomNoiseConfig, MODALITIES};
use crate::postprocess::postprocess_probs;
use crate::preprocess::{crop_or_pad, stack_denoised, zscore_normalize, CropPad, PreprocessConfig};
use crate::train::TrainSample;
use crate::uncertainty::{ensemble_mean, uncertainty_from_prob};
use crate::volume::{
    labels_to_regions, LabelMask, MultiModalVolume, ProbabilityMapSet, Region, RegionSpec,
    UncertaintyMapSet,
};
use ndarray::{Array3, Array4, Axis};
use std::path::{Path, PathBuf};

/// One dataset entry: `name` is the directory basename (e.g. `case_0003`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseEntry {
    pub name: String,
    pub dir: PathBuf,
}

/// Lists `case_*` subdirectories in lexicographic (hence stable) order.
pub fn list_cases(dataset: &Path) -> Result<Vec<CaseEntry>> {
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(dataset)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && name.starts_with("case_") {
            cases.push(CaseEntry {
                name,
                dir: entry.path(),
            });
        }
    }
    cases.sort_by(|a, b| a.name.cmp(&b.name));
    if cases.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no case_* directories under {}",
            dataset.display()
        )));
    }
    Ok(cases)
}

/// Writes `n_cases` synthetic phantoms under `dir`, one per case folder.
/// Fully determined by `(seed, shape, noise)`.
pub fn generate_phantom_dataset(
    dir: &Path,
    n_cases: usize,
    shape: [usize; 3],
    seed: u64,
    noise: &PhantomNoiseConfig,
) -> Result<()> {
    if n_cases == 0 {
        return Err(Error::InvalidConfig("n_cases must be positive".into()));
    }
    for i in 0..n_cases {
        let case_dir = dir.join(format!("case_{i:04}"));
        std::fs::create_dir_all(&case_dir)?;
        let (vol, mask) = make_phantom::<f32>(seed.wrapping_add(i as u64), shape, noise)?;
        for (m, modality) in MODALITIES.iter().enumerate() {
            let channel = MultiModalVolume {
                data: vol
                    .data
                    .index_axis(Axis(0), m)
                    .to_owned()
                    .insert_axis(Axis(0)),
                spacing: vol.spacing,
                channel_names: vec![modality.to_string()],
            };
            save_scalar_volume(&channel, &case_dir.join(format!("{modality}.nii.gz")))?;
        }
        save_label_mask(&mask, &case_dir.join("seg.nii.gz"))?;
    }
    Ok(())
}

/// Loads the four modalities (and the label mask, when present) of a case.
pub fn load_case<T: NiftiScalar>(
    case: &CaseEntry,
) -> Result<(MultiModalVolume<T>, Option<LabelMask>)> {
    let mut channels = Vec::with_capacity(4);
    let mut spacing = [1.0; 3];
    for modality in MODALITIES {
        let vol = load_scalar_volume::<T>(&case.dir.join(format!("{modality}.nii.gz")))?;
        if vol.channels() != 1 {
            return Err(Error::InvalidShape(format!(
                "{}/{modality}: expected a single-channel volume",
                case.name
            )));
        }
        spacing = vol.spacing;
        channels.push(vol);
    }
    let shape = channels[0].spatial_shape();
    let mut data = Array4::zeros((4, shape[0], shape[1], shape[2]));
    for (m, ch) in channels.iter().enumerate() {
        if ch.spatial_shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                got: ch.spatial_shape().to_vec(),
            });
        }
        data.index_axis_mut(Axis(0), m)
            .assign(&ch.data.index_axis(Axis(0), 0));
    }
    let vol = MultiModalVolume::new(
        data,
        spacing,
        MODALITIES.iter().map(|m| m.to_string()).collect(),
    )?;
    let seg_path = case.dir.join("seg.nii.gz");
    let mask = if seg_path.exists() {
        Some(load_label_mask(&seg_path)?)
    } else {
        None
    };
    Ok((vol, mask))
}

/// A case brought onto the model grid, with the transform kept for
/// re-embedding predictions into the original grid.
pub struct PreprocessedCase<T: NiftiScalar> {
    pub input: MultiModalVolume<T>,
    pub crop: CropPad,
    pub spacing: [f64; 3],
}

/// Crop/pad to the target grid, build the multi-denoising channel stack,
/// then z-score each channel.
pub fn preprocess_case<T: NiftiScalar>(
    vol: &MultiModalVolume<T>,
    config: &PreprocessConfig,
) -> Result<PreprocessedCase<T>> {
    config.validate()?;
    let (resized, crop) = crop_or_pad(vol, config.target_shape);
    let stacked = stack_denoised(&resized, config);
    Ok(PreprocessedCase {
        input: zscore_normalize(&stacked, config),
        crop,
        spacing: vol.spacing,
    })
}

fn regions_to_targets<T: NiftiScalar>(mask: &LabelMask, crop: &CropPad) -> [ndarray::ArrayD<T>; 3] {
    let cropped = LabelMask {
        data: crop.apply3(mask.data.view()),
        spacing: mask.spacing,
    };
    let regions = labels_to_regions(&cropped, &RegionSpec::default());
    let to_target = |m: &Array3<bool>| {
        m.mapv(|v| if v { T::one() } else { T::zero() })
            .insert_axis(Axis(0))
            .into_dyn()
    };
    [
        to_target(&regions.whole),
        to_target(&regions.core),
        to_target(&regions.enhancing),
    ]
}

/// Builds one training sample. Augmentation (when given) runs on the raw
/// grid before preprocessing and is a pure function of
/// `(augment.seed, sample_index)`, so assembly order does not matter.
pub fn case_to_sample<T: NiftiScalar>(
    vol: &MultiModalVolume<T>,
    mask: &LabelMask,
    preprocess: &PreprocessConfig,
    augment: Option<(&AugmentConfig, u64)>,
) -> Result<TrainSample<T>> {
    let (vol, mask) = match augment {
        Some((cfg, sample_index)) => augment_pipeline(vol, mask, cfg, sample_index),
        None => (vol.clone(), mask.clone()),
    };
    let pre = preprocess_case(&vol, preprocess)?;
    let targets = regions_to_targets::<T>(&mask, &pre.crop);
    Ok(TrainSample {
        input: pre.input.data,
        targets,
    })
}

/// Loads every labeled case as a training sample, optionally augmented.
/// `workers` controls parallelism only; the output is identical for any
/// worker count.
pub fn load_training_set<T: NiftiScalar>(
    dataset: &Path,
    preprocess: &PreprocessConfig,
    augment: Option<&AugmentConfig>,
    workers: usize,
) -> Result<Vec<TrainSample<T>>> {
    let cases = list_cases(dataset)?;
    parallel_map(&cases, workers, |i, case| {
        let (vol, mask) = load_case::<T>(case)?;
        let mask = mask.ok_or_else(|| {
            Error::InvalidConfig(format!("{} has no seg.nii.gz", case.name))
        })?;
        case_to_sample(&vol, &mask, preprocess, augment.map(|a| (a, i as u64)))
    })
    .into_iter()
    .collect()
}

/// Runs eval-mode inference and re-embeds the three probability maps into
/// the case's original grid (cropped-away voxels get probability 0).
pub fn predict_probs<T: NiftiScalar>(
    model: &MdNet<T>,
    case: &PreprocessedCase<T>,
) -> Result<ProbabilityMapSet<T>> {
    let fwd = model.forward_eval(&case.input.data)?;
    let mut maps = Vec::with_capacity(3);
    for r in 0..3 {
        let out = fwd.tape.value(fwd.outputs[r]);
        let grid = out.index_axis(Axis(0), 0);
        let grid3 = grid
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        maps.push(case.crop.restore3(grid3));
    }
    let enhancing = maps.pop().unwrap();
    let core = maps.pop().unwrap();
    let whole = maps.pop().unwrap();
    Ok(ProbabilityMapSet {
        whole,
        core,
        enhancing,
    })
}

/// Mean probability maps over an ensemble of models.
pub fn ensemble_predict_probs<T: NiftiScalar>(
    models: &[MdNet<T>],
    case: &PreprocessedCase<T>,
) -> Result<ProbabilityMapSet<T>> {
    let members = models
        .iter()
        .map(|m| predict_probs(m, case))
        .collect::<Result<Vec<_>>>()?;
    ensemble_mean(&members)
}

/// End-to-end single-case segmentation: preprocess → (ensemble) forward →
/// post-process into a label mask on the original grid.
pub fn segment_case<T: NiftiScalar>(
    models: &[MdNet<T>],
    vol: &MultiModalVolume<T>,
    config: &AppConfig,
) -> Result<(LabelMask, ProbabilityMapSet<T>)> {
    let pre = preprocess_case(vol, &config.preprocess)?;
    let probs = ensemble_predict_probs(models, &pre)?;
    let labels = postprocess_probs(&probs, vol.spacing, &config.postprocess)?;
    Ok((labels, probs))
}

/// Region-suffixed uncertainty file paths for one case.
pub fn uncertainty_paths(dir: &Path, case: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{case}_unc_whole.nii.gz")),
        dir.join(format!("{case}_unc_core.nii.gz")),
        dir.join(format!("{case}_unc_enhance.nii.gz")),
    ]
}

pub fn save_uncertainty_maps(
    dir: &Path,
    case: &str,
    maps: &UncertaintyMapSet,
    spacing: [f64; 3],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let paths = uncertainty_paths(dir, case);
    for (region, path) in Region::ALL.iter().zip(paths.iter()) {
        save_u8_volume(maps.get(*region), spacing, path)?;
    }
    Ok(())
}

pub fn load_uncertainty_maps(dir: &Path, case: &str) -> Result<UncertaintyMapSet> {
    let paths = uncertainty_paths(dir, case);
    let (whole, _) = load_u8_volume(&paths[0])?;
    let (core, _) = load_u8_volume(&paths[1])?;
    let (enhancing, _) = load_u8_volume(&paths[2])?;
    Ok(UncertaintyMapSet {
        whole,
        core,
        enhancing,
    })
}

/// Per-case uncertainty export from ensemble probabilities.
pub fn uncertainty_for_case<T: NiftiScalar>(
    models: &[MdNet<T>],
    vol: &MultiModalVolume<T>,
    config: &AppConfig,
) -> Result<UncertaintyMapSet> {
    let pre = preprocess_case(vol, &config.preprocess)?;
    let probs = ensemble_predict_probs(models, &pre)?;
    uncertainty_from_prob(&probs)
}

/// All metric rows for one case (one row per region). Filtration metrics
/// are NaN when no uncertainty maps are supplied; the CSV summary skips
/// non-finite entries.
pub fn evaluate_case(
    case: &str,
    pred: &LabelMask,
    truth: &LabelMask,
    unc: Option<&UncertaintyMapSet>,
    config: &MetricsConfig,
) -> Result<(Vec<CaseMetrics>, Vec<FiltrationCurve>)> {
    let spec = RegionSpec::default();
    let pred_regions = labels_to_regions(pred, &spec);
    let truth_regions = labels_to_regions(truth, &spec);
    let mut rows = Vec::with_capacity(3);
    let mut curves = Vec::new();
    for region in Region::ALL {
        let p = pred_regions.get(region);
        let t = truth_regions.get(region);
        let (sens, spec_v) = sensitivity_specificity(p, t)?;
        let (dauc, rftp, rftn) = match unc {
            Some(u) => {
                let curve = filtration_curve(p, t, u.get(region), config)?;
                let out = dauc_rftp_rftn(&curve);
                curves.push(curve);
                out
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        rows.push(CaseMetrics {
            case: case.to_string(),
            region: region.name().to_string(),
            dsc: dsc(p, t)?,
            sens,
            spec: spec_v,
            hd95: hd95(p, t, truth.spacing, config)?,
            dauc,
            rftp,
            rftn,
        });
    }
    Ok((rows, curves))
}

/// Applies `f` to every item on `workers` threads, returning results in
/// input order. Work is assigned by index, so the result is a pure
/// function of the inputs regardless of worker count.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let mut slots: Vec<Option<O>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = w;
                while i < items.len() {
                    out.push((i, f(i, &items[i])));
                    i += workers;
                }
                out
            }));
        }
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn tiny_config() -> AppConfig {
        let mut c = AppConfig::toy(0);
        c.preprocess.target_shape = [16, 16, 16];
        c.model.input_shape = [16, 16, 16];
        c
    }

    #[test]
    fn phantom_dataset_round_trip_and_determinism() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let noise = PhantomNoiseConfig::default();
        generate_phantom_dataset(dir_a.path(), 2, [16, 16, 16], 7, &noise).unwrap();
        generate_phantom_dataset(dir_b.path(), 2, [16, 16, 16], 7, &noise).unwrap();
        let cases = list_cases(dir_a.path()).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].name, "case_0000");
        // Byte-identical across runs with the same seed.
        for case in &cases {
            for file in ["t1", "t1c", "t2", "flair", "seg"] {
                let a = std::fs::read(case.dir.join(format!("{file}.nii.gz"))).unwrap();
                let b = std::fs::read(
                    dir_b.path().join(&case.name).join(format!("{file}.nii.gz")),
                )
                .unwrap();
                assert_eq!(a, b, "{}/{file}", case.name);
            }
        }
        let (vol, mask) = load_case::<f32>(&cases[0]).unwrap();
        assert_eq!(vol.channels(), 4);
        assert!(mask.is_some());
    }

    #[test]
    fn preprocess_case_builds_twelve_channels() {
        let dir = tempdir().unwrap();
        generate_phantom_dataset(
            dir.path(),
            1,
            [20, 18, 16],
            1,
            &PhantomNoiseConfig::default(),
        )
        .unwrap();
        let cases = list_cases(dir.path()).unwrap();
        let (vol, _) = load_case::<f32>(&cases[0]).unwrap();
        let cfg = tiny_config();
        let pre = preprocess_case(&vol, &cfg.preprocess).unwrap();
        assert_eq!(pre.input.channels(), 12);
        assert_eq!(pre.input.spatial_shape(), [16, 16, 16]);
        // Restoring a target-grid field recovers the original extent.
        let field = Array3::<f32>::zeros((16, 16, 16));
        assert_eq!(pre.crop.restore3(field.view()).shape(), &[20, 18, 16]);
    }

    #[test]
    fn training_set_independent_of_worker_count() {
        let dir = tempdir().unwrap();
        generate_phantom_dataset(
            dir.path(),
            3,
            [16, 16, 16],
            3,
            &PhantomNoiseConfig::default(),
        )
        .unwrap();
        let cfg = tiny_config();
        let aug = AugmentConfig {
            seed: 5,
            ..AugmentConfig::default()
        };
        let one = load_training_set::<f32>(dir.path(), &cfg.preprocess, Some(&aug), 1).unwrap();
        let four = load_training_set::<f32>(dir.path(), &cfg.preprocess, Some(&aug), 4).unwrap();
        assert_eq!(one.len(), 3);
        for (a, b) in one.iter().zip(four.iter()) {
            assert_eq!(a.input, b.input);
            for r in 0..3 {
                assert_eq!(a.targets[r], b.targets[r]);
            }
        }
    }

    #[test]
    fn predict_reembeds_into_original_grid() {
        let dir = tempdir().unwrap();
        generate_phantom_dataset(
            dir.path(),
            1,
            [24, 20, 16],
            11,
            &PhantomNoiseConfig::default(),
        )
        .unwrap();
        let cases = list_cases(dir.path()).unwrap();
        let (vol, _) = load_case::<f32>(&cases[0]).unwrap();
        let cfg = tiny_config();
        let model = MdNet::<f32>::new(cfg.model.clone(), 0).unwrap();
        let pre = preprocess_case(&vol, &cfg.preprocess).unwrap();
        let probs = predict_probs(&model, &pre).unwrap();
        assert_eq!(probs.whole.shape(), &[24, 20, 16]);
        probs.validate().unwrap();
        // Cropped-away voxels carry probability zero.
        assert_eq!(probs.whole[[0, 0, 0]], 0.0);

        // The singleton ensemble equals the single model.
        let models = vec![model];
        let ens = ensemble_predict_probs(&models, &pre).unwrap();
        assert_eq!(ens.whole, probs.whole);
    }

    #[test]
    fn uncertainty_files_round_trip() {
        let dir = tempdir().unwrap();
        let maps = UncertaintyMapSet {
            whole: Array3::from_shape_fn((4, 4, 4), |(d, h, w)| ((d + h + w) * 5 % 101) as u8),
            core: Array3::from_elem((4, 4, 4), 100),
            enhancing: Array3::zeros((4, 4, 4)),
        };
        save_uncertainty_maps(dir.path(), "case_0000", &maps, [1.0; 3]).unwrap();
        for p in uncertainty_paths(dir.path(), "case_0000") {
            assert!(p.exists(), "{}", p.display());
        }
        let back = load_uncertainty_maps(dir.path(), "case_0000").unwrap();
        assert_eq!(back, maps);
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let dir = tempdir().unwrap();
        generate_phantom_dataset(
            dir.path(),
            1,
            [16, 16, 16],
            2,
            &PhantomNoiseConfig::default(),
        )
        .unwrap();
        let cases = list_cases(dir.path()).unwrap();
        let (_, mask) = load_case::<f32>(&cases[0]).unwrap();
        let mask = mask.unwrap();
        let unc = UncertaintyMapSet {
            whole: Array3::zeros(mask.data.raw_dim()),
            core: Array3::zeros(mask.data.raw_dim()),
            enhancing: Array3::zeros(mask.data.raw_dim()),
        };
        let (rows, curves) =
            evaluate_case("case_0000", &mask, &mask, Some(&unc), &MetricsConfig::default())
                .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(curves.len(), 3);
        for row in &rows {
            assert_relative_eq!(row.dsc, 1.0);
            assert_relative_eq!(row.hd95, 0.0);
            assert_relative_eq!(row.dauc, 100.0);
            assert_relative_eq!(row.rftp, 0.0);
            assert_relative_eq!(row.rftn, 0.0);
        }
        assert_eq!(rows[0].region, "whole");
        assert_eq!(rows[2].region, "enhance");
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..23).collect();
        for workers in [1, 2, 5, 64] {
            let out = parallel_map(&items, workers, |i, &x| i * 1000 + x);
            let want: Vec<usize> = items.iter().map(|&x| x * 1000 + x).collect();
            assert_eq!(out, want, "workers = {workers}");
        }
        let empty: Vec<usize> = vec![];
        assert!(parallel_map(&empty, 4, |_, &x| x).is_empty());
    }

    #[test]
    fn model_config_matches_stacked_channels() {
        // The default model consumes exactly the multi-denoised stack.
        let m = ModelConfig::default();
        assert_eq!(m.in_channels, 3 * MODALITIES.len());
    }
}

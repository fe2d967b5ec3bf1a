//! Training: Adam with cubic learning-rate decay, L2 weight decay on conv
//! kernels only, k-fold cross-validation splits, and ensemble training.

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{MdNet, ModelConfig, ParamDef};
use crate::scalar::Real;
use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate α₀.
    pub alpha0: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Total epochs Ne; the learning rate decays to zero at this epoch.
    pub n_epochs: usize,
    /// Optional decay horizon for the learning-rate schedule; defaults to
    /// `n_epochs`. Setting it larger than `n_epochs` keeps the rate from
    /// collapsing to zero when training fewer epochs than the horizon.
    pub decay_epochs: Option<usize>,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub n_folds: usize,
    pub n_ensemble: usize,
    pub seed: u64,
    /// Optional early stop once the mean training Dice of every region
    /// reaches this value; `None` trains the full schedule.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            n_epochs: 200,
            decay_epochs: None,
            l2_lambda: 1e-5,
            batch_size: 1,
            n_folds: 5,
            n_ensemble: 7,
            seed: 0,
            target_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0 <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.n_epochs == 0
            || self.batch_size == 0
            || self.n_folds == 0
            || self.l2_lambda < 0.0
        {
            return Err(Error::InvalidConfig("invalid training parameters".into()));
        }
        if let Some(d) = self.decay_epochs {
            if d < self.n_epochs {
                return Err(Error::InvalidConfig(
                    "decay_epochs must be at least n_epochs".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Cubic decay `α_e = α₀ (1 − e/Ne)³`, where `Ne` is the decay horizon
/// (`decay_epochs` when set, otherwise `n_epochs`).
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.n_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: config.n_epochs,
        });
    }
    let horizon = config.decay_epochs.unwrap_or(config.n_epochs);
    let frac = 1.0 - epoch as f64 / horizon as f64;
    Ok(config.alpha0 * frac * frac * frac)
}

/// Adam optimizer over a parameter list; one state slot per tensor.
pub struct Adam<T: Real> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: usize,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[ParamDef<T>], config: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            step: 0,
            beta1: T::from_f64_c(config.beta1),
            beta2: T::from_f64_c(config.beta2),
            eps: T::from_f64_c(1e-8),
        }
    }

    /// One update. `grads[i]` may be `None` when no gradient reached the
    /// tensor this step; its Adam state still decays. L2 decay applies to
    /// conv kernels only.
    pub fn step(
        &mut self,
        params: &mut [ParamDef<T>],
        grads: &[Option<ArrayD<T>>],
        lr: f64,
        l2_lambda: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let lr = T::from_f64_c(lr);
        let l2 = T::from_f64_c(l2_lambda);
        for (i, p) in params.iter_mut().enumerate() {
            let mut g = match &grads[i] {
                Some(g) => g.clone(),
                None => ArrayD::zeros(p.value.raw_dim()),
            };
            if p.is_kernel && l2_lambda > 0.0 {
                g += &(&p.value * l2);
            }
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut self.m[i]).and(&g).for_each(|m, &gv| {
                *m = *m * b1 + gv * (one - b1);
            });
            ndarray::Zip::from(&mut self.v[i]).and(&g).for_each(|v, &gv| {
                *v = *v * b2 + gv * gv * (one - b2);
            });
            let eps = self.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// One training example: stacked input channels plus the three region
/// targets `[whole, core, enhancing]`, each shaped `(1, D, H, W)`.
pub struct TrainSample<T: Real> {
    pub input: Array4<T>,
    pub targets: [ArrayD<T>; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Hard training Dice per region, from the same forward passes that
    /// produced the updates.
    pub dice: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Data loss (without the L2 term) per optimization step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV: `epoch,lr,loss,dice_whole,dice_core,dice_enhance`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,lr,loss,dice_whole,dice_core,dice_enhance")?;
        for r in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.epoch, r.lr, r.mean_loss, r.dice[0], r.dice[1], r.dice[2]
            )?;
        }
        Ok(())
    }
}

fn hard_dice<T: Real>(prob: &ArrayD<T>, target: &ArrayD<T>) -> f64 {
    let half = T::from_f64_c(0.5);
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in prob.iter().zip(target.iter()) {
        let pb = p >= half;
        let tb = t > T::from_f64_c(0.5);
        if pb {
            psum += 1.0;
        }
        if tb {
            tsum += 1.0;
        }
        if pb && tb {
            inter += 1.0;
        }
    }
    if psum + tsum == 0.0 {
        1.0
    } else {
        2.0 * inter / (psum + tsum)
    }
}

/// Trains `model` in place. On a non-finite loss the parameters are rolled
/// back to the last finite state and `DivergedLoss` is returned; the model
/// then holds that last finite state.
pub fn train_model<T: Real>(
    model: &mut MdNet<T>,
    data: &[TrainSample<T>],
    config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    loss_config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut opt = Adam::new(model.params(), config);
    let mut history = TrainHistory::default();
    let mut global_step = 0usize;
    let eps = T::from_f64_c(loss_config.epsilon);
    let clamp = T::from_f64_c(loss_config.ce_clamp);

    'outer: for epoch in 0..config.n_epochs {
        let lr = lr_schedule(epoch, config)?;
        let mut epoch_loss = 0.0;
        let mut dice_acc = [0.0; 3];
        for sample in data {
            // Snapshot so a divergence can roll back one step.
            let snapshot: Vec<ArrayD<T>> =
                model.params().iter().map(|p| p.value.clone()).collect();

            let mut fwd = model.forward_train(&sample.input)?;
            let mut losses = Vec::with_capacity(6);
            let mut weights = Vec::with_capacity(6);
            for r in 0..3 {
                let t = &sample.targets[r];
                losses.push(fwd.tape.dice_loss(fwd.outputs[r], t.clone(), eps));
                losses.push(fwd.tape.bce_loss(fwd.outputs[r], t.clone(), clamp));
                let w = T::from_f64_c(loss_config.region_weights[r]);
                weights.push(w);
                weights.push(w);
            }
            let root = fwd.tape.weighted_sum_scalars(losses, weights);
            let loss = fwd.tape.scalar_value(root).to_f64_c();
            if !loss.is_finite() {
                for (p, s) in model.params_mut().iter_mut().zip(snapshot) {
                    p.value = s;
                }
                return Err(Error::DivergedLoss(global_step));
            }
            fwd.tape.backward(root);

            let mut grads: Vec<Option<ArrayD<T>>> = vec![None; model.params().len()];
            for (idx, g) in fwd.tape.param_grads() {
                grads[idx] = Some(g.clone());
            }
            for (acc, (&out, target)) in dice_acc
                .iter_mut()
                .zip(fwd.outputs.iter().zip(&sample.targets))
            {
                *acc += hard_dice(fwd.tape.value(out), target);
            }
            drop(fwd);
            opt.step(model.params_mut(), &grads, lr, config.l2_lambda);

            history.step_losses.push(loss);
            epoch_loss += loss;
            global_step += 1;
        }
        let n = data.len() as f64;
        let dice = [dice_acc[0] / n, dice_acc[1] / n, dice_acc[2] / n];
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: epoch_loss / n,
            dice,
        });
        if let Some(target) = config.target_dice {
            if dice.iter().all(|&d| d >= target) {
                break 'outer;
            }
        }
    }
    Ok(history)
}

/// Deterministic k-fold partition: shuffled indices dealt into folds whose
/// sizes differ by at most one.
pub fn kfold_split(
    n_cases: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n_cases < k || k == 0 {
        return Err(Error::TooFewCases {
            cases: n_cases,
            folds: k,
        });
    }
    let mut idx: Vec<usize> = (0..n_cases).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_cases / k;
    let extra = n_cases % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val: Vec<usize> = idx[start..start + len].to_vec();
        let train: Vec<usize> = idx[..start]
            .iter()
            .chain(&idx[start + len..])
            .copied()
            .collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}

/// Trains `n_ensemble` models that differ only in seed (`seed + member`).
pub fn train_ensemble<T: Real>(
    data: &[TrainSample<T>],
    model_config: &ModelConfig,
    config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<Vec<(MdNet<T>, TrainHistory)>> {
    if config.n_ensemble == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut out = Vec::with_capacity(config.n_ensemble);
    for member in 0..config.n_ensemble {
        let seed = config.seed + member as u64;
        let mut model = MdNet::new(model_config.clone(), seed)?;
        let history = train_model(&mut model, data, config, loss_config)?;
        out.push((model, history));
    }
    Ok(out)
}

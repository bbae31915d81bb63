//! Training regimes: autoencoder pretraining, joint ensemble training of the
//! full model, imitation learning, and (in [`dqn`]) reinforcement learning.

mod dqn;

pub use dqn::{random_policy_reward, train_dqn, DqnConfig, DqnOutcome};

use anyhow::{bail, Result};
use rand::seq::SliceRandom;

use crate::data::{all_frames, Dataset, Split};
use crate::env::FRAME_SIZE;
use crate::loss::{carnet_total_loss, cross_entropy, ms_ssim_loss, MsSsimConfig, TotalLossInputs, SMOOTH_L1_BETA};
use crate::metrics::{MetricsWriter, Row};
use crate::model::{Carnet, Mode, WindowBatch, N_ACTIONS};
use crate::nn::apply_bn_update;
use crate::rng::{rng_stream, stream};
use crate::tensor::{Adam, AdamConfig, BnStats, Elem, Params, Tape};

pub const BN_MOMENTUM: f64 = 0.1;
const LR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before the LR is halved.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            patience: 5,
            seed: 0,
        }
    }
}

/// Halve-on-plateau learning rate schedule.
struct Plateau {
    best: f64,
    since: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Plateau {
            best: f64::INFINITY,
            since: 0,
            patience,
        }
    }
    /// Record a validation loss; true when the LR should halve.
    fn observe(&mut self, val: f64) -> bool {
        if val < self.best - 1e-6 {
            self.best = val;
            self.since = 0;
            false
        } else {
            self.since += 1;
            if self.since >= self.patience {
                self.since = 0;
                true
            } else {
                false
            }
        }
    }
}

/// Fresh backbone + controller parameters for a model.
pub fn init_params(model: &Carnet, seed: u64) -> Params<f32> {
    let mut p = Params::new();
    let mut rng = rng_stream(seed, stream::INIT);
    model.register_backbone(&mut p, &mut rng);
    model.register_controller(&mut p, &mut rng);
    p
}

fn apply_bn_updates(params: &mut Params<f32>, stats: &[(String, BnStats<f32>)]) {
    for (name, st) in stats {
        apply_bn_update(params, name, st, BN_MOMENTUM);
    }
}

fn guard_finite(loss: f64, phase: &str, step: usize) -> Result<()> {
    if !loss.is_finite() {
        bail!("{phase} diverged at step {step}: loss = {loss}");
    }
    Ok(())
}

fn batches(n: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn frame_leaf<E: Elem>(ds: &Dataset, items: &[(usize, usize)], t: &Tape<E>) -> crate::tensor::Var {
    let px = FRAME_SIZE * FRAME_SIZE;
    let mut data = Vec::with_capacity(items.len() * px);
    for &(ep, step) in items {
        data.extend(
            ds.episodes[ep].frames[step * px..(step + 1) * px]
                .iter()
                .map(|&v| E::from_f64(v as f64 / 255.0)),
        );
    }
    t.leaf(&[items.len(), 1, FRAME_SIZE, FRAME_SIZE], data)
}

/// Train encoder + decoder on single-frame reconstruction. Returns the
/// parameters and the (train, val) loss curve.
pub fn pretrain_autoencoder(
    ds: &Dataset,
    model: &Carnet,
    cfg: &TrainConfig,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<(Params<f32>, Vec<(f64, f64)>)> {
    let msc = MsSsimConfig::desk();
    let mut params = init_params(model, cfg.seed);
    let mut opt: Adam<f32> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = rng_stream(cfg.seed, stream::SHUFFLE);
    let train_frames = all_frames(ds, Split::Train);
    let val_frames = all_frames(ds, Split::Val);
    let mut plateau = Plateau::new(cfg.patience);
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut train_loss = 0.0;
        let mut n_batches = 0;
        for batch in batches(train_frames.len(), cfg.batch_size, &mut shuffle_rng) {
            let items: Vec<_> = batch.iter().map(|&i| train_frames[i]).collect();
            let t: Tape<f32> = Tape::new();
            let x = frame_leaf(ds, &items, &t);
            let mut st = Vec::new();
            let l = model.encode(&t, &params, x, Mode::Train, true, &mut st)?;
            let y = model.decode(&t, &params, l, Mode::Train, true, &mut st)?;
            let loss = ms_ssim_loss(&t, x, y, &msc)?;
            let lv = t.scalar_value(loss) as f64;
            guard_finite(lv, "pretrain", epoch)?;
            train_loss += lv;
            n_batches += 1;
            let grads = t.backward(loss)?;
            opt.step(&mut params, grads.params())?;
            apply_bn_updates(&mut params, &st);
        }
        train_loss /= n_batches.max(1) as f64;

        let val_loss = eval_recon_loss(ds, model, &params, &val_frames, cfg.batch_size, &msc)?;
        curve.push((train_loss, val_loss));
        if let Some(m) = metrics.as_deref_mut() {
            m.row(
                "pretrain",
                epoch,
                &Row {
                    loss_total: Some(train_loss),
                    loss_recon: Some(val_loss),
                    ..Row::default()
                },
            )?;
        }
        if plateau.observe(val_loss) {
            opt.set_lr((opt.cfg.lr / 2.0).max(LR_FLOOR));
        }
    }
    Ok((params, curve))
}

fn eval_recon_loss(
    ds: &Dataset,
    model: &Carnet,
    params: &Params<f32>,
    frames: &[(usize, usize)],
    batch_size: usize,
    msc: &MsSsimConfig,
) -> Result<f64> {
    if frames.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut n = 0;
    for chunk in frames.chunks(batch_size.max(1)) {
        let t: Tape<f32> = Tape::new();
        let x = frame_leaf(ds, chunk, &t);
        let mut st = Vec::new();
        let l = model.encode(&t, params, x, Mode::Eval, false, &mut st)?;
        let y = model.decode(&t, params, l, Mode::Eval, false, &mut st)?;
        let loss = ms_ssim_loss(&t, x, y, msc)?;
        total += t.scalar_value(loss) as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n as f64)
}

/// Per-epoch record of the ensemble objective.
#[derive(Debug, Clone)]
pub struct EnsembleEpoch {
    pub total: f64,
    pub recon: f64,
    pub pred: f64,
    pub latent: f64,
    pub sensor: Option<f64>,
    pub val_total: f64,
}

fn rollout_loss(
    model: &Carnet,
    params: &Params<f32>,
    batch: &WindowBatch<f32>,
    msc: &MsSsimConfig,
    mode: Mode,
    trainable: bool,
) -> Result<(Tape<f32>, crate::tensor::Var, Vec<(&'static str, f64)>, Vec<(String, BnStats<f32>)>)> {
    let t: Tape<f32> = Tape::new();
    let r = model.rollout(&t, params, batch, mode, trainable)?;
    let sensors = if model.cfg.sensors_on() {
        Some((r.sensor_targets.as_slice(), r.sensor_preds.as_slice()))
    } else {
        None
    };
    let inp = TotalLossInputs {
        frames: &r.frames,
        recons: &r.recons,
        preds: &r.preds,
        latents: &r.latents[1..],
        pred_latents: &r.pred_latents,
        sensors,
    };
    let (total, parts) = carnet_total_loss(&t, &inp, msc, SMOOTH_L1_BETA)?;
    let part_vals: Vec<(&'static str, f64)> = parts
        .iter()
        .map(|&(n, v)| (n, t.scalar_value(v) as f64))
        .collect();
    Ok((t, total, part_vals, r.bn))
}

/// Joint training of autoencoder + GRU (+ sensor heads) on the full
/// objective, starting from `params` (typically the pretrained AE).
pub fn train_ensemble(
    ds: &Dataset,
    model: &Carnet,
    mut params: Params<f32>,
    cfg: &TrainConfig,
    train_splits: &[Split],
    val_splits: &[Split],
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<(Params<f32>, Vec<EnsembleEpoch>)> {
    let msc = MsSsimConfig::desk();
    let mut opt: Adam<f32> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let windows: Vec<_> = train_splits
        .iter()
        .flat_map(|&s| ds.windows_of(s))
        .collect();
    let val_windows: Vec<_> = val_splits.iter().flat_map(|&s| ds.windows_of(s)).collect();
    if windows.is_empty() {
        bail!("no training windows in the requested splits");
    }
    let mut shuffle_rng = rng_stream(cfg.seed, stream::SHUFFLE);
    let mut plateau = Plateau::new(cfg.patience);
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // total, recon, pred, latent, sensor
        let mut n_batches = 0usize;
        for idx in batches(windows.len(), cfg.batch_size, &mut shuffle_rng) {
            let refs: Vec<_> = idx.iter().map(|&i| windows[i]).collect();
            let batch = ds.make_batch::<f32>(&refs);
            let (t, total, parts, bn) =
                rollout_loss(model, &params, &batch, &msc, Mode::Train, true)?;
            let lv = t.scalar_value(total) as f64;
            guard_finite(lv, "ensemble", epoch)?;
            sums.0 += lv;
            for &(name, v) in &parts {
                match name {
                    "recon" => sums.1 += v,
                    "pred" => sums.2 += v,
                    "latent" => sums.3 += v,
                    "sensor" => sums.4 += v,
                    _ => {}
                }
            }
            n_batches += 1;
            let grads = t.backward(total)?;
            opt.step(&mut params, grads.params())?;
            apply_bn_updates(&mut params, &bn);
        }
        let k = n_batches.max(1) as f64;

        let mut val_total = 0.0;
        for chunk in val_windows.chunks(cfg.batch_size.max(1)) {
            let batch = ds.make_batch::<f32>(chunk);
            let (t, total, _, _) = rollout_loss(model, &params, &batch, &msc, Mode::Eval, false)?;
            val_total += t.scalar_value(total) as f64;
        }
        val_total /= (val_windows.len().div_ceil(cfg.batch_size.max(1))).max(1) as f64;

        let rec = EnsembleEpoch {
            total: sums.0 / k,
            recon: sums.1 / k,
            pred: sums.2 / k,
            latent: sums.3 / k,
            sensor: model.cfg.sensors_on().then_some(sums.4 / k),
            val_total,
        };
        if let Some(m) = metrics.as_deref_mut() {
            m.row(
                "ensemble",
                epoch,
                &Row {
                    loss_total: Some(rec.total),
                    loss_recon: Some(rec.recon),
                    loss_pred: Some(rec.pred),
                    loss_latent: Some(rec.latent),
                    loss_sensor: rec.sensor,
                    ..Row::default()
                },
            )?;
        }
        if plateau.observe(val_total) {
            opt.set_lr((opt.cfg.lr / 2.0).max(LR_FLOOR));
        }
        curve.push(rec);
    }
    Ok((params, curve))
}

/// Which representation the imitation controller consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlFeatures {
    /// Current latent plus the dynamics model's one-step-ahead prediction
    /// of that same latent.
    Carnet,
    /// Encoder latents only — current and previous frame — for backbones
    /// whose dynamics model was never trained (plain autoencoder baseline).
    AeOnly,
}

/// Controller logits for one window batch: the head consumes the last
/// observed latent and, depending on `features`, either the one-step
/// prediction of it or the previous frame's latent.
fn window_logits(
    model: &Carnet,
    params: &Params<f32>,
    t: &Tape<f32>,
    batch: &WindowBatch<f32>,
    mode: Mode,
    backbone_trainable: bool,
    features: IlFeatures,
) -> Result<(crate::tensor::Var, Vec<(String, BnStats<f32>)>)> {
    let (latents, pred_latents, bn) =
        model.rollout_latents(t, params, batch, mode, backbone_trainable)?;
    let last = model.cfg.window - 1;
    let second = match features {
        IlFeatures::Carnet => pred_latents[last - 1],
        IlFeatures::AeOnly => latents[last - 1],
    };
    let logits = model.controller_forward(t, params, latents[last], second, true)?;
    Ok((logits, bn))
}

/// Top-1 accuracy of the controller over a split.
pub fn evaluate_imitation(
    ds: &Dataset,
    model: &Carnet,
    params: &Params<f32>,
    split: Split,
    batch_size: usize,
    features: IlFeatures,
) -> Result<f64> {
    let windows = ds.windows_of(split);
    if windows.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = ds.make_batch::<f32>(chunk);
        let t: Tape<f32> = Tape::new();
        let (logits, _) = window_logits(model, params, &t, &batch, Mode::Eval, false, features)?;
        let vals = t.value(logits);
        let labels = batch.labels.as_ref().unwrap();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &vals[bi * N_ACTIONS..(bi + 1) * N_ACTIONS];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / windows.len() as f64)
}

/// Behavioral cloning of the autopilot. `joint` fine-tunes the backbone along
/// with the head; otherwise the backbone (weights and batchnorm statistics)
/// stays frozen and only the controller trains.
pub fn train_imitation(
    ds: &Dataset,
    model: &Carnet,
    backbone: &Params<f32>,
    cfg: &TrainConfig,
    joint: bool,
    features: IlFeatures,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<(Params<f32>, f64)> {
    let mut params = backbone.clone();
    // fresh head per seed, replacing whatever the backbone checkpoint carried
    {
        let mut head = Params::new();
        let mut rng = rng_stream(cfg.seed, stream::INIT);
        model.register_controller(&mut head, &mut rng);
        for (name, t) in head.iter() {
            match params.get_mut(name) {
                Some(slot) => *slot = t.clone(),
                None => params.insert(name.clone(), t.clone()),
            }
        }
    }
    // inverse-frequency class weights over the train split (clamped so a
    // near-absent class cannot dominate the objective)
    let class_weights = {
        let mut counts = [0usize; N_ACTIONS];
        for w in ds.windows_of(Split::Train) {
            counts[ds.episodes[w.episode].labels[w.start + ds.window - 1]] += 1;
        }
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    1.0
                } else {
                    (total as f64 / (N_ACTIONS as f64 * c as f64)).clamp(0.25, 4.0)
                }
            })
            .collect::<Vec<f64>>()
    };
    let mut opt: Adam<f32> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let windows = ds.windows_of(Split::Train);
    let mode = if joint { Mode::Train } else { Mode::Eval };
    let mut shuffle_rng = rng_stream(cfg.seed, stream::SHUFFLE);
    let mut plateau = Plateau::new(cfg.patience);
    let mut val_acc = 0.0;

    for epoch in 0..cfg.epochs {
        let mut train_loss = 0.0;
        let mut n_batches = 0;
        for idx in batches(windows.len(), cfg.batch_size, &mut shuffle_rng) {
            let refs: Vec<_> = idx.iter().map(|&i| windows[i]).collect();
            let batch = ds.make_batch::<f32>(&refs);
            let t: Tape<f32> = Tape::new();
            let (logits, bn) = window_logits(model, &params, &t, &batch, mode, joint, features)?;
            let loss = cross_entropy(&t, logits, batch.labels.as_ref().unwrap(), &class_weights)?;
            let lv = t.scalar_value(loss) as f64;
            guard_finite(lv, "imitation", epoch)?;
            train_loss += lv;
            n_batches += 1;
            let grads = t.backward(loss)?;
            opt.step(&mut params, grads.params())?;
            if joint {
                apply_bn_updates(&mut params, &bn);
            }
        }
        train_loss /= n_batches.max(1) as f64;
        val_acc = evaluate_imitation(ds, model, &params, Split::Val, cfg.batch_size, features)?;
        if let Some(m) = metrics.as_deref_mut() {
            m.row(
                "imitation",
                epoch,
                &Row {
                    loss_total: Some(train_loss),
                    accuracy: Some(val_acc),
                    ..Row::default()
                },
            )?;
        }
        if plateau.observe(1.0 - val_acc) {
            opt.set_lr((opt.cfg.lr / 2.0).max(LR_FLOOR));
        }
    }
    Ok((params, val_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CarnetConfig;

    fn tiny_dataset() -> Dataset {
        Dataset::generate(60, 3, 21)
    }

    /// 8×8 model over a downscaled copy of the frames would need a separate
    /// renderer; instead exercise the loops at desk scale with minimal data.
    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let ds = tiny_dataset();
        let model = Carnet::new(CarnetConfig {
            window: 3,
            ..CarnetConfig::desk()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let (p, curve) = pretrain_autoencoder(&ds, &model, &cfg, None).unwrap();
        let init = init_params(&model, 5);
        assert!(curve.is_empty());
        for (name, t) in init.iter() {
            assert_eq!(p.get(name).unwrap().data, t.data, "{name} changed");
        }
    }

    #[test]
    fn pretrain_loss_curve_is_reproducible() {
        let ds = tiny_dataset();
        let model = Carnet::new(CarnetConfig {
            window: 3,
            ..CarnetConfig::desk()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, c1) = pretrain_autoencoder(&ds, &model, &cfg, None).unwrap();
        let (_, c2) = pretrain_autoencoder(&ds, &model, &cfg, None).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn ensemble_reports_three_parts_without_sensors() {
        let ds = tiny_dataset();
        let model = Carnet::new(CarnetConfig {
            window: 3,
            ..CarnetConfig::desk()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        let params = init_params(&model, 1);
        let (_, curve) = train_ensemble(
            &ds,
            &model,
            params,
            &cfg,
            &[Split::Train],
            &[Split::Val],
            None,
        )
        .unwrap();
        assert_eq!(curve.len(), 1);
        assert!(curve[0].sensor.is_none());
        let sum = curve[0].recon + curve[0].pred + curve[0].latent;
        assert!((curve[0].total - sum).abs() < 1e-5);
    }
}

//! DQN on frozen latent features: the Q network is the controller head over
//! stacked (current latent, predicted current latent), trained with 1-step
//! TD targets, prioritized replay, an ε-greedy behavior policy, a
//! periodically synced target network, and best-snapshot selection via
//! periodic greedy evaluation.

use anyhow::{bail, Result};
use rand::Rng;

use crate::env::{Action, Env, FRAME_SIZE};
use crate::metrics::{MetricsWriter, Row};
use crate::model::{Carnet, Mode, N_ACTIONS};
use crate::rng::{derive_seed, rng_stream, stream};
use crate::tensor::{Adam, AdamConfig, Params, Tape, Var};

#[derive(Debug, Clone)]
pub struct DqnConfig {
    pub training_steps: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Prioritization exponent.
    pub alpha: f64,
    /// Initial importance-sampling exponent, annealed linearly to 1.
    pub beta0: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of training over which ε anneals.
    pub eps_frac: f64,
    pub target_sync: usize,
    /// Steps collected before learning starts.
    pub learn_start: usize,
    /// Interval of the periodic greedy evaluation used to select the best
    /// policy snapshot (0 disables; the final parameters are used instead).
    pub eval_every: usize,
    /// Episodes per periodic selection evaluation.
    pub select_episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            training_steps: 50_000,
            buffer_capacity: 5_000,
            batch_size: 64,
            lr: 5e-3,
            gamma: 0.99,
            alpha: 0.6,
            beta0: 0.4,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_frac: 0.2,
            target_sync: 1_000,
            learn_start: 500,
            eval_every: 2_500,
            select_episodes: 5,
            eval_episodes: 20,
            seed: 0,
        }
    }
}

/// One stored transition: latent-feature pairs before and after the action.
const PRIO_EPS: f64 = 1e-3;

struct Replay {
    feat_dim: usize,
    cap: usize,
    feats: Vec<f32>,
    next_feats: Vec<f32>,
    actions: Vec<usize>,
    rewards: Vec<f32>,
    dones: Vec<bool>,
    prios: Vec<f64>,
    pos: usize,
    len: usize,
    max_prio: f64,
}

impl Replay {
    fn new(cap: usize, feat_dim: usize) -> Self {
        Replay {
            feat_dim,
            cap,
            feats: vec![0.0; cap * feat_dim],
            next_feats: vec![0.0; cap * feat_dim],
            actions: vec![0; cap],
            rewards: vec![0.0; cap],
            dones: vec![false; cap],
            prios: vec![0.0; cap],
            pos: 0,
            len: 0,
            max_prio: 1.0,
        }
    }

    fn push(&mut self, feat: &[f32], action: usize, reward: f32, next: &[f32], done: bool) {
        let d = self.feat_dim;
        let i = self.pos;
        self.feats[i * d..(i + 1) * d].copy_from_slice(feat);
        self.next_feats[i * d..(i + 1) * d].copy_from_slice(next);
        self.actions[i] = action;
        self.rewards[i] = reward;
        self.dones[i] = done;
        self.prios[i] = self.max_prio; // new samples get max priority
        self.pos = (self.pos + 1) % self.cap;
        self.len = (self.len + 1).min(self.cap);
    }

    /// Proportional sampling on priority^α; returns indices and normalized
    /// importance weights (max weight = 1).
    fn sample(
        &self,
        n: usize,
        alpha: f64,
        beta: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.len == 0 {
            bail!("sampling from an empty replay buffer");
        }
        let mut cum = Vec::with_capacity(self.len);
        let mut total = 0.0;
        for &p in &self.prios[..self.len] {
            total += p.powf(alpha);
            cum.push(total);
        }
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen_range(0.0..total);
            let i = cum.partition_point(|&c| c <= u).min(self.len - 1);
            idx.push(i);
        }
        // w_i = (N · P(i))^{−β}, normalized by the largest weight
        let mut weights: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let p = self.prios[i].powf(alpha) / total;
                (self.len as f64 * p).powf(-beta)
            })
            .collect();
        let wmax = weights.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        for w in &mut weights {
            *w /= wmax;
        }
        Ok((idx, weights))
    }

    fn update_prios(&mut self, idx: &[usize], td_abs: &[f64]) {
        for (&i, &e) in idx.iter().zip(td_abs) {
            let p = e + PRIO_EPS;
            self.prios[i] = p;
            self.max_prio = self.max_prio.max(p);
        }
    }
}

/// Streaming latent-feature extractor over a frozen backbone: keeps the GRU
/// hidden state across an episode and exposes (ℓ_t, ℓ̂_{t|t−1}) — the latent
/// of the frame being acted on plus the dynamics model's prediction of it,
/// the same feature pair the imitation controller consumes.
struct FeatureState {
    hidden: Vec<f32>,
    cur_latent: Vec<f32>,
    pred_latent: Vec<f32>,
}

impl FeatureState {
    fn reset(model: &Carnet) -> Self {
        FeatureState {
            hidden: vec![0.0; model.cfg.rnn_hidden()],
            cur_latent: vec![0.0; model.cfg.latent],
            pred_latent: vec![0.0; model.cfg.latent],
        }
    }

    fn feature(&self) -> Vec<f32> {
        let mut f = self.cur_latent.clone();
        f.extend_from_slice(&self.pred_latent);
        f
    }

    /// Encode the frame observed at step t so the decision features hold ℓ_t.
    fn observe(&mut self, model: &Carnet, params: &Params<f32>, frame: &[u8]) -> Result<()> {
        let t: Tape<f32> = Tape::new();
        let data: Vec<f32> = frame.iter().map(|&v| v as f32 / 255.0).collect();
        let x = t.leaf(&[1, 1, FRAME_SIZE, FRAME_SIZE], data);
        let mut st = Vec::new();
        let latent = model.encode(&t, params, x, Mode::Eval, false, &mut st)?;
        self.cur_latent = t.value(latent);
        Ok(())
    }

    /// After acting at step t, fold (ℓ_t, sensor readout of a_{t−1}, a_t)
    /// through the GRU — the same lag the training rollouts use — leaving
    /// `pred_latent` = ℓ̂_{t+1|t}.
    fn fold(
        &mut self,
        model: &Carnet,
        params: &Params<f32>,
        sensors: &[f64],
        action: Action,
    ) -> Result<()> {
        let t: Tape<f32> = Tape::new();
        let latent = t.leaf(&[1, model.cfg.latent], self.cur_latent.clone());
        let sens = model.cfg.sensors_on().then(|| {
            let row: Vec<f32> = sensors.iter().map(|&v| v as f32).collect();
            t.leaf(&[1, model.cfg.sensor_dim], row)
        });
        let act = (model.cfg.action_dim > 0).then(|| {
            let mut onehot = vec![0.0f32; model.cfg.action_dim];
            onehot[action.class()] = 1.0;
            t.leaf(&[1, model.cfg.action_dim], onehot)
        });
        let h = t.leaf(&[1, model.cfg.rnn_hidden()], self.hidden.clone());
        let (h_next, l_pred) = model.predict_step(&t, params, h, latent, sens, act, false)?;
        self.hidden = t.value(h_next);
        self.pred_latent = t.value(l_pred);
        Ok(())
    }
}

fn q_values(
    model: &Carnet,
    params: &Params<f32>,
    t: &Tape<f32>,
    feats: &[f32],
    n: usize,
    trainable: bool,
) -> Result<Var> {
    let latent = model.cfg.latent;
    let mut prev = Vec::with_capacity(n * latent);
    let mut pred = Vec::with_capacity(n * latent);
    for i in 0..n {
        let row = &feats[i * 2 * latent..(i + 1) * 2 * latent];
        prev.extend_from_slice(&row[..latent]);
        pred.extend_from_slice(&row[latent..]);
    }
    let lp = t.leaf(&[n, latent], prev);
    let lq = t.leaf(&[n, latent], pred);
    Ok(model.controller_forward(t, params, lp, lq, trainable)?)
}

fn greedy_action(model: &Carnet, params: &Params<f32>, feat: &[f32]) -> Result<usize> {
    let t: Tape<f32> = Tape::new();
    let q = q_values(model, params, &t, feat, 1, false)?;
    let v = t.value(q);
    Ok(v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0)
}

pub struct DqnOutcome {
    pub params: Params<f32>,
    /// (env step, episode return) per finished training episode.
    pub episode_returns: Vec<(usize, f64)>,
    pub eval_mean: f64,
    pub eval_std: f64,
}

/// Mean/std episode return of a policy over `episodes` episodes with seeds
/// derived from `seed`.
fn run_episodes(
    model: &Carnet,
    params: &Params<f32>,
    episodes: usize,
    seed: u64,
    ep_offset: u64,
    mut policy_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(f64, f64)> {
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env = Env::reset(derive_seed(seed, ep_offset + ep as u64));
        let mut fs = FeatureState::reset(model);
        // previous applied action's readout, lagged one step as in training
        let mut prev_sensors = [0.0f64; 3];
        if policy_rng.is_none() {
            fs.observe(model, params, &env.observe())?;
        }
        let mut total = 0.0;
        loop {
            let a = match policy_rng.as_deref_mut() {
                Some(rng) => Action::from_class(rng.gen_range(0..N_ACTIONS)),
                None => Action::from_class(greedy_action(model, params, &fs.feature())?),
            };
            let res = env.step(a);
            total += res.reward;
            if policy_rng.is_none() {
                fs.fold(model, params, &prev_sensors, a)?;
                fs.observe(model, params, &res.frame)?;
            }
            prev_sensors = crate::env::action_sensors(&a);
            if res.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean/std return of the uniform-random policy over `episodes` episodes —
/// the comparison baseline for the trained agent.
pub fn random_policy_reward(
    model: &Carnet,
    params: &Params<f32>,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = rng_stream(seed, stream::EXPLORE);
    run_episodes(model, params, episodes, seed, 0x5eed_0000, Some(&mut rng))
}

/// Train the Q head over a frozen backbone. `params` must hold the backbone;
/// the controller is (re-)initialized from the DQN seed.
pub fn train_dqn(
    model: &Carnet,
    backbone: &Params<f32>,
    cfg: &DqnConfig,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<DqnOutcome> {
    let mut params = backbone.clone();
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
    let mut target = params.clone();
    let mut opt: Adam<f32> = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let feat_dim = 2 * model.cfg.latent;
    let mut replay = Replay::new(cfg.buffer_capacity, feat_dim);
    let mut explore_rng = rng_stream(cfg.seed, stream::EXPLORE);
    let mut replay_rng = rng_stream(cfg.seed, stream::REPLAY);

    let mut episode_returns = Vec::new();
    let mut best_params: Option<Params<f32>> = None;
    let mut best_return = f64::NEG_INFINITY;
    let mut ep_idx = 0u64;
    let mut env = Env::reset(derive_seed(cfg.seed, ep_idx));
    let mut fs = FeatureState::reset(model);
    fs.observe(model, &params, &env.observe())?;
    let mut prev_sensors = [0.0f64; 3];
    let mut ep_return = 0.0;

    let anneal = (cfg.training_steps as f64 * cfg.eps_frac).max(1.0);
    for step in 0..cfg.training_steps {
        let eps = cfg.eps_start
            + (cfg.eps_end - cfg.eps_start) * (step as f64 / anneal).min(1.0);
        let feat = fs.feature();
        let a_class = if explore_rng.gen_range(0.0..1.0) < eps {
            explore_rng.gen_range(0..N_ACTIONS)
        } else {
            greedy_action(model, &params, &feat)?
        };
        let a = Action::from_class(a_class);
        let res = env.step(a);
        ep_return += res.reward;
        fs.fold(model, &params, &prev_sensors, a)?;
        fs.observe(model, &params, &res.frame)?;
        prev_sensors = crate::env::action_sensors(&a);
        let next_feat = fs.feature();
        replay.push(&feat, a_class, res.reward as f32, &next_feat, res.done);

        if res.done {
            episode_returns.push((step, ep_return));
            if let Some(m) = metrics.as_deref_mut() {
                m.row(
                    "dqn",
                    step,
                    &Row {
                        reward_mean: Some(ep_return),
                        ..Row::default()
                    },
                )?;
            }
            ep_idx += 1;
            env = Env::reset(derive_seed(cfg.seed, ep_idx));
            fs = FeatureState::reset(model);
            fs.observe(model, &params, &env.observe())?;
            prev_sensors = [0.0; 3];
            ep_return = 0.0;
        }

        if replay.len >= cfg.learn_start.max(cfg.batch_size) {
            let beta = cfg.beta0 + (1.0 - cfg.beta0) * step as f64 / cfg.training_steps as f64;
            let (idx, weights) =
                replay.sample(cfg.batch_size, cfg.alpha, beta, &mut replay_rng)?;
            let n = idx.len();
            let d = replay.feat_dim;
            let mut fcur = Vec::with_capacity(n * d);
            let mut fnext = Vec::with_capacity(n * d);
            let mut acts = Vec::with_capacity(n);
            for &i in &idx {
                fcur.extend_from_slice(&replay.feats[i * d..(i + 1) * d]);
                fnext.extend_from_slice(&replay.next_feats[i * d..(i + 1) * d]);
                acts.push(replay.actions[i]);
            }
            // 1-step TD targets from the target network
            let targets: Vec<f32> = {
                let t: Tape<f32> = Tape::new();
                let qn = q_values(model, &target, &t, &fnext, n, false)?;
                let v = t.value(qn);
                idx.iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        let row = &v[r * N_ACTIONS..(r + 1) * N_ACTIONS];
                        let best = row.iter().cloned().fold(f32::MIN, f32::max);
                        let mask = if replay.dones[i] { 0.0 } else { 1.0 };
                        replay.rewards[i] + cfg.gamma as f32 * mask * best
                    })
                    .collect()
            };
            let t: Tape<f32> = Tape::new();
            let q = q_values(model, &params, &t, &fcur, n, true)?;
            let q_sa = t.select_class(q, &acts)?;
            let y = t.leaf(&[n], targets.clone());
            let diff = t.sub(q_sa, y)?;
            let w = t.leaf(&[n], weights.iter().map(|&x| x as f32).collect());
            let sq = t.mul(diff, diff)?;
            let loss = t.reduce_mean(t.mul(w, sq)?);
            let lv = t.scalar_value(loss) as f64;
            if !lv.is_finite() {
                bail!("dqn diverged at step {step}: loss = {lv}");
            }
            let td_abs: Vec<f64> = t.value(diff).iter().map(|&e| (e as f64).abs()).collect();
            let grads = t.backward(loss)?;
            opt.step(&mut params, grads.params())?;
            replay.update_prios(&idx, &td_abs);
        }

        if (step + 1) % cfg.target_sync == 0 {
            target = params.clone();
        }

        // periodic greedy evaluation (on its own episode seeds) selects the
        // best policy snapshot, since TD training does not improve
        // monotonically
        if cfg.eval_every > 0
            && (step + 1) % cfg.eval_every == 0
            && replay.len >= cfg.learn_start.max(cfg.batch_size)
        {
            let (m, _) = run_episodes(
                model,
                &params,
                cfg.select_episodes,
                cfg.seed,
                0xbe57_0000,
                None,
            )?;
            if m > best_return {
                best_return = m;
                best_params = Some(params.clone());
            }
            if let Some(mw) = metrics.as_deref_mut() {
                mw.row(
                    "dqn_select",
                    step,
                    &Row {
                        reward_mean: Some(m),
                        ..Row::default()
                    },
                )?;
            }
        }
    }

    let final_params = best_params.unwrap_or_else(|| params.clone());
    let (eval_mean, eval_std) = run_episodes(
        model,
        &final_params,
        cfg.eval_episodes,
        cfg.seed,
        0x5eed_0000,
        None,
    )?;
    if let Some(m) = metrics.as_deref_mut() {
        m.row(
            "dqn_eval",
            cfg.training_steps,
            &Row {
                reward_mean: Some(eval_mean),
                reward_std: Some(eval_std),
                ..Row::default()
            },
        )?;
    }
    Ok(DqnOutcome {
        params: final_params,
        episode_returns,
        eval_mean,
        eval_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CarnetConfig;
    use crate::train::init_params;

    #[test]
    fn replay_wraps_and_prioritizes() {
        let mut r = Replay::new(4, 2);
        for i in 0..6 {
            r.push(&[i as f32, 0.0], i % 9, 0.0, &[0.0, 0.0], false);
        }
        assert_eq!(r.len, 4);
        assert_eq!(r.pos, 2);
        // slots 0,1 were overwritten by samples 4,5
        assert_eq!(r.feats[0], 4.0);
        assert_eq!(r.feats[2], 5.0);

        r.update_prios(&[0], &[100.0]);
        let mut rng = rng_stream(0, stream::TEST);
        let (idx, w) = r.sample(200, 1.0, 1.0, &mut rng).unwrap();
        let hits = idx.iter().filter(|&&i| i == 0).count();
        assert!(hits > 150, "high-priority sample drawn {hits}/200");
        assert!(w.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn empty_replay_sample_errors() {
        let r = Replay::new(4, 2);
        let mut rng = rng_stream(0, stream::TEST);
        assert!(r.sample(1, 0.6, 0.4, &mut rng).is_err());
    }

    #[test]
    fn random_policy_is_reproducible() {
        let model = Carnet::new(CarnetConfig::desk()).unwrap();
        let params = init_params(&model, 0);
        let a = random_policy_reward(&model, &params, 3, 11).unwrap();
        let b = random_policy_reward(&model, &params, 3, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_training_runs_and_logs_episodes() {
        let model = Carnet::new(CarnetConfig::desk()).unwrap();
        let params = init_params(&model, 1);
        let cfg = DqnConfig {
            training_steps: 120,
            buffer_capacity: 200,
            batch_size: 8,
            learn_start: 16,
            target_sync: 50,
            eval_episodes: 1,
            seed: 2,
            ..DqnConfig::default()
        };
        let out = train_dqn(&model, &params, &cfg, None).unwrap();
        assert!(out.eval_mean.is_finite());
        assert_eq!(out.params.len(), params.len());
    }
}

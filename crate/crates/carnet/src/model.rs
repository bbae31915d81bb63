//! The CARNet model: convolutional encoder/decoder, optional sensor fusion
//! and action conditioning, a GRU predicting the next latent, and the MLP
//! controller head.
//!
//! The encoder halves the resolution per two-conv block (stride-2 then
//! stride-1, both 3×3, each followed by batchnorm + ReLU) down to 4×4, then a
//! 4×4 projection conv produces the latent. The decoder mirrors it with
//! transposed convs and a sigmoid output. Channel ladder starts at 2 and
//! doubles per block, so a 256-input has blocks 2..64 and a 64-input 2..16.

use crate::nn::{BatchNorm2d, Conv2dLayer, Dense, GruCell, SelfAttention2d};
use crate::tensor::{BnStats, Elem, Params, Result, Tape, TensorError, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct CarnetConfig {
    /// Square input resolution (power of two, ≥ 8).
    pub input_size: usize,
    pub latent: usize,
    /// Window length T (≥ 2).
    pub window: usize,
    /// 0 disables sensor fusion.
    pub sensor_dim: usize,
    /// 0 disables action conditioning; otherwise the one-hot width.
    pub action_dim: usize,
    pub use_attention: bool,
    pub sensor_embed: usize,
}

impl CarnetConfig {
    /// 64×64 desk-scale configuration, image-only.
    pub fn desk() -> Self {
        CarnetConfig {
            input_size: 64,
            latent: 32,
            window: 4,
            sensor_dim: 0,
            action_dim: 0,
            use_attention: false,
            sensor_embed: 16,
        }
    }

    /// 256×256 full-scale configuration (shape checks only at desk scale).
    pub fn full() -> Self {
        CarnetConfig {
            input_size: 256,
            latent: 128,
            window: 4,
            sensor_dim: 0,
            action_dim: 0,
            use_attention: false,
            sensor_embed: 16,
        }
    }

    /// 8×8 miniature used by the end-to-end gradient check.
    pub fn tiny() -> Self {
        CarnetConfig {
            input_size: 8,
            latent: 4,
            window: 3,
            sensor_dim: 0,
            action_dim: 0,
            use_attention: false,
            sensor_embed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_size >= 8
            && self.input_size.is_power_of_two()
            && self.latent > 0
            && self.window >= 2;
        if !ok {
            return Err(TensorError::Shape {
                op: "carnet_config",
                details: format!(
                    "input_size {} (power of two ≥ 8), latent {}, window {} (≥ 2)",
                    self.input_size, self.latent, self.window
                ),
            });
        }
        Ok(())
    }

    /// Number of resolution-halving encoder blocks (input → 4×4).
    pub fn n_blocks(&self) -> usize {
        (self.input_size / 4).trailing_zeros() as usize
    }

    /// Channel count after block `i` (0-based): 2, 4, 8, ...
    pub fn block_channels(&self, i: usize) -> usize {
        2 << i
    }

    pub fn sensors_on(&self) -> bool {
        self.sensor_dim > 0
    }

    pub fn rnn_hidden(&self) -> usize {
        self.latent + if self.sensors_on() { self.sensor_embed } else { 0 }
    }

    pub fn gru_input(&self) -> usize {
        self.latent
            + if self.sensors_on() { self.sensor_embed } else { 0 }
            + self.action_dim
    }

    /// Controller widths: 2·latent → latent → latent → latent/2 → 9.
    pub fn controller_widths(&self) -> Vec<usize> {
        vec![
            2 * self.latent,
            self.latent,
            self.latent,
            self.latent / 2,
            N_ACTIONS,
        ]
    }
}

pub const N_ACTIONS: usize = 9;

/// One contiguous training window batch, flattened row-major.
#[derive(Debug, Clone)]
pub struct WindowBatch<E> {
    pub b: usize,
    pub t: usize,
    pub hw: usize,
    /// `(b, t, 1, hw, hw)`
    pub frames: Vec<E>,
    /// `(b, t, sensor_dim)`
    pub sensors: Option<Vec<E>>,
    /// `(b, t, action_dim)` one-hot
    pub actions: Option<Vec<E>>,
    /// expert class at the last frame, `(b,)`
    pub labels: Option<Vec<usize>>,
}

impl<E: Elem> WindowBatch<E> {
    /// Leaf for the frames of step `step` across the batch: `(b, 1, hw, hw)`.
    fn frame_leaf(&self, tape: &Tape<E>, step: usize) -> Var {
        let px = self.hw * self.hw;
        let mut data = Vec::with_capacity(self.b * px);
        for bi in 0..self.b {
            let base = (bi * self.t + step) * px;
            data.extend_from_slice(&self.frames[base..base + px]);
        }
        tape.leaf(&[self.b, 1, self.hw, self.hw], data)
    }

    fn row_leaf(&self, tape: &Tape<E>, src: &[E], dim: usize, step: usize) -> Var {
        let mut data = Vec::with_capacity(self.b * dim);
        for bi in 0..self.b {
            let base = (bi * self.t + step) * dim;
            data.extend_from_slice(&src[base..base + dim]);
        }
        tape.leaf(&[self.b, dim], data)
    }
}

/// Everything produced by one window rollout, all recorded on the same tape.
pub struct Rollout<E: Elem> {
    /// x_0..x_{T−1} as leaves, `(b,1,h,w)` each.
    pub frames: Vec<Var>,
    /// ℓ_0..ℓ_{T−1}, `(b, latent)`.
    pub latents: Vec<Var>,
    /// ℓ_{t|t−1} for t=1..T−1.
    pub pred_latents: Vec<Var>,
    /// y_t = decode(ℓ_t).
    pub recons: Vec<Var>,
    /// ŷ_t = decode(ℓ_{t|t−1}), t=1..T−1.
    pub preds: Vec<Var>,
    /// s_{t|t−1} readouts, t=1..T−1 (sensor mode only).
    pub sensor_preds: Vec<Var>,
    /// matching sensor targets s_t as leaves.
    pub sensor_targets: Vec<Var>,
    /// batchnorm batch statistics keyed by layer name, for running updates.
    pub bn: Vec<(String, BnStats<E>)>,
}

struct ConvBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
}

pub struct Carnet {
    pub cfg: CarnetConfig,
    enc_blocks: Vec<ConvBlock>,
    enc_attention: Option<SelfAttention2d>,
    enc_proj: Conv2dLayer,
    enc_proj_bn: BatchNorm2d,
    dec_proj: Conv2dLayer,
    dec_proj_bn: BatchNorm2d,
    dec_blocks: Vec<ConvBlock>,
    dec_out: Conv2dLayer,
    gru: GruCell,
    sensor_in: Option<Dense>,
    sensor_out: Option<Dense>,
    controller: Vec<Dense>,
}

impl Carnet {
    pub fn new(cfg: CarnetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_blocks();
        let mut enc_blocks = Vec::with_capacity(n);
        for i in 0..n {
            let cin = if i == 0 { 1 } else { cfg.block_channels(i - 1) };
            let cout = cfg.block_channels(i);
            enc_blocks.push(ConvBlock {
                conv1: Conv2dLayer::new(format!("enc.b{i}.c1"), cin, cout, 3, 2, 1),
                bn1: BatchNorm2d::new(format!("enc.b{i}.bn1"), cout),
                conv2: Conv2dLayer::new(format!("enc.b{i}.c2"), cout, cout, 3, 1, 1),
                bn2: BatchNorm2d::new(format!("enc.b{i}.bn2"), cout),
            });
        }
        let enc_attention = if cfg.use_attention {
            let c0 = cfg.block_channels(0);
            Some(SelfAttention2d::new("enc.att", c0, c0, 3, true)?)
        } else {
            None
        };
        let top = cfg.block_channels(n - 1);
        let enc_proj = Conv2dLayer::new("enc.proj", top, cfg.latent, 4, 1, 0);
        let enc_proj_bn = BatchNorm2d::new("enc.proj.bn", cfg.latent);

        let dec_proj = Conv2dLayer::new_transposed("dec.proj", cfg.latent, top, 4, 1, 0, 0);
        let dec_proj_bn = BatchNorm2d::new("dec.proj.bn", top);
        let mut dec_blocks = Vec::with_capacity(n - 1);
        for i in (1..n).rev() {
            let cin = cfg.block_channels(i);
            let cout = cfg.block_channels(i - 1);
            dec_blocks.push(ConvBlock {
                conv1: Conv2dLayer::new_transposed(format!("dec.b{i}.c1"), cin, cout, 3, 2, 1, 1),
                bn1: BatchNorm2d::new(format!("dec.b{i}.bn1"), cout),
                conv2: Conv2dLayer::new_transposed(format!("dec.b{i}.c2"), cout, cout, 3, 1, 1, 0),
                bn2: BatchNorm2d::new(format!("dec.b{i}.bn2"), cout),
            });
        }
        let dec_out =
            Conv2dLayer::new_transposed("dec.out", cfg.block_channels(0), 1, 3, 2, 1, 1);

        let gru = GruCell::new("gru", cfg.rnn_hidden(), cfg.gru_input());
        let (sensor_in, sensor_out) = if cfg.sensors_on() {
            let mut win = Dense::new("sens.in", cfg.sensor_dim, cfg.sensor_embed);
            win.bias = false;
            let mut wout = Dense::new("sens.out", cfg.rnn_hidden(), cfg.sensor_dim);
            wout.bias = false;
            (Some(win), Some(wout))
        } else {
            (None, None)
        };

        let widths = cfg.controller_widths();
        let controller = (0..widths.len() - 1)
            .map(|i| Dense::new(format!("ctrl.fc{i}"), widths[i], widths[i + 1]))
            .collect();

        Ok(Carnet {
            cfg,
            enc_blocks,
            enc_attention,
            enc_proj,
            enc_proj_bn,
            dec_proj,
            dec_proj_bn,
            dec_blocks,
            dec_out,
            gru,
            sensor_in,
            sensor_out,
            controller,
        })
    }

    /// Register encoder/decoder/GRU/sensor parameters.
    pub fn register_backbone<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        for b in &self.enc_blocks {
            b.conv1.register(p, rng);
            b.bn1.register(p);
            b.conv2.register(p, rng);
            b.bn2.register(p);
        }
        if let Some(att) = &self.enc_attention {
            att.register(p, rng);
        }
        self.enc_proj.register(p, rng);
        self.enc_proj_bn.register(p);
        self.dec_proj.register(p, rng);
        self.dec_proj_bn.register(p);
        for b in &self.dec_blocks {
            b.conv1.register(p, rng);
            b.bn1.register(p);
            b.conv2.register(p, rng);
            b.bn2.register(p);
        }
        self.dec_out.register(p, rng);
        self.gru.register(p, rng);
        if let (Some(a), Some(b)) = (&self.sensor_in, &self.sensor_out) {
            a.register(p, rng);
            b.register(p, rng);
        }
    }

    /// Register the controller/Q-head parameters.
    pub fn register_controller<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        for d in &self.controller {
            d.register(p, rng);
        }
    }

    fn bn_fwd<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        bn: &BatchNorm2d,
        x: Var,
        mode: Mode,
        trainable: bool,
        stats: &mut Vec<(String, BnStats<E>)>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, st) = bn.forward_train(t, p, x, trainable)?;
                stats.push((bn.name.clone(), st));
                Ok(y)
            }
            Mode::Eval => bn.forward_eval(t, p, x),
        }
    }

    /// Encode `(n,1,h,w)` frames into `(n, latent)`.
    pub fn encode<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        x: Var,
        mode: Mode,
        trainable: bool,
        stats: &mut Vec<(String, BnStats<E>)>,
    ) -> Result<Var> {
        let sh = t.shape(x);
        if sh.len() != 4 || sh[1] != 1 || sh[2] != self.cfg.input_size || sh[3] != self.cfg.input_size
        {
            return Err(TensorError::Shape {
                op: "encode",
                details: format!("want (n,1,{0},{0}), got {sh:?}", self.cfg.input_size),
            });
        }
        let mut h = x;
        for (i, b) in self.enc_blocks.iter().enumerate() {
            h = b.conv1.forward(t, p, h, trainable)?;
            h = self.bn_fwd(t, p, &b.bn1, h, mode, trainable, stats)?;
            h = t.relu(h);
            h = b.conv2.forward(t, p, h, trainable)?;
            h = self.bn_fwd(t, p, &b.bn2, h, mode, trainable, stats)?;
            h = t.relu(h);
            if i == 0 {
                if let Some(att) = &self.enc_attention {
                    h = att.forward(t, p, h, trainable)?;
                }
            }
        }
        h = self.enc_proj.forward(t, p, h, trainable)?;
        h = self.bn_fwd(t, p, &self.enc_proj_bn, h, mode, trainable, stats)?;
        h = t.relu(h);
        t.reshape(h, &[sh[0], self.cfg.latent])
    }

    /// Decode `(n, latent)` into `(n,1,h,w)` images in [0,1].
    pub fn decode<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        l: Var,
        mode: Mode,
        trainable: bool,
        stats: &mut Vec<(String, BnStats<E>)>,
    ) -> Result<Var> {
        let sh = t.shape(l);
        if sh.len() != 2 || sh[1] != self.cfg.latent {
            return Err(TensorError::Shape {
                op: "decode",
                details: format!("want (n,{}), got {sh:?}", self.cfg.latent),
            });
        }
        let mut h = t.reshape(l, &[sh[0], self.cfg.latent, 1, 1])?;
        h = self.dec_proj.forward(t, p, h, trainable)?;
        h = self.bn_fwd(t, p, &self.dec_proj_bn, h, mode, trainable, stats)?;
        h = t.relu(h);
        for b in &self.dec_blocks {
            h = b.conv1.forward(t, p, h, trainable)?;
            h = self.bn_fwd(t, p, &b.bn1, h, mode, trainable, stats)?;
            h = t.relu(h);
            h = b.conv2.forward(t, p, h, trainable)?;
            h = self.bn_fwd(t, p, &b.bn2, h, mode, trainable, stats)?;
            h = t.relu(h);
        }
        h = self.dec_out.forward(t, p, h, trainable)?;
        Ok(t.sigmoid(h))
    }

    /// Run the full window: encode every frame, roll the GRU forward, decode
    /// reconstructions and one-step predictions.
    pub fn rollout<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        batch: &WindowBatch<E>,
        mode: Mode,
        trainable: bool,
    ) -> Result<Rollout<E>> {
        if batch.t != self.cfg.window || batch.hw != self.cfg.input_size {
            return Err(TensorError::Shape {
                op: "rollout",
                details: format!(
                    "batch ({} frames of {}) vs config ({} of {})",
                    batch.t, batch.hw, self.cfg.window, self.cfg.input_size
                ),
            });
        }
        if self.cfg.sensors_on() && batch.sensors.is_none() {
            return Err(TensorError::Shape {
                op: "rollout",
                details: "sensor fusion enabled but batch has no sensors".into(),
            });
        }
        if self.cfg.action_dim > 0 && batch.actions.is_none() {
            return Err(TensorError::Shape {
                op: "rollout",
                details: "action conditioning enabled but batch has no actions".into(),
            });
        }
        let mut stats = Vec::new();
        let tw = self.cfg.window;
        let frames: Vec<Var> = (0..tw).map(|s| batch.frame_leaf(t, s)).collect();
        let mut latents = Vec::with_capacity(tw);
        for &f in &frames {
            latents.push(self.encode(t, p, f, mode, trainable, &mut stats)?);
        }
        let mut recons = Vec::with_capacity(tw);
        for &l in &latents {
            recons.push(self.decode(t, p, l, mode, trainable, &mut stats)?);
        }

        let hid = self.cfg.rnn_hidden();
        let mut h = t.leaf(&[batch.b, hid], vec![E::zero(); batch.b * hid]);
        let mut pred_latents = Vec::new();
        let mut preds = Vec::new();
        let mut sensor_preds = Vec::new();
        let mut sensor_targets = Vec::new();
        for step in 1..tw {
            let mut inp = latents[step - 1];
            if let Some(sin) = &self.sensor_in {
                let s_prev = batch.row_leaf(
                    t,
                    batch.sensors.as_ref().unwrap(),
                    self.cfg.sensor_dim,
                    step - 1,
                );
                let emb = sin.forward(t, p, s_prev, trainable)?;
                inp = t.concat(1, inp, emb)?;
            }
            if self.cfg.action_dim > 0 {
                let a_prev = batch.row_leaf(
                    t,
                    batch.actions.as_ref().unwrap(),
                    self.cfg.action_dim,
                    step - 1,
                );
                inp = t.concat(1, inp, a_prev)?;
            }
            h = self.gru.step(t, p, h, inp, trainable)?;
            let l_pred = if hid == self.cfg.latent {
                h
            } else {
                t.slice(h, 1, 0, self.cfg.latent)?
            };
            pred_latents.push(l_pred);
            preds.push(self.decode(t, p, l_pred, mode, trainable, &mut stats)?);
            if let Some(sout) = &self.sensor_out {
                sensor_preds.push(sout.forward(t, p, h, trainable)?);
                sensor_targets.push(batch.row_leaf(
                    t,
                    batch.sensors.as_ref().unwrap(),
                    self.cfg.sensor_dim,
                    step,
                ));
            }
        }

        Ok(Rollout {
            frames,
            latents,
            pred_latents,
            recons,
            preds,
            sensor_preds,
            sensor_targets,
            bn: stats,
        })
    }

    /// Like [`Self::rollout`] but skips both decoders and the sensor readout:
    /// only the per-frame latents and the GRU's one-step predictions, which is
    /// all the controller consumes.
    pub fn rollout_latents<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        batch: &WindowBatch<E>,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<(String, BnStats<E>)>)> {
        if batch.t != self.cfg.window || batch.hw != self.cfg.input_size {
            return Err(TensorError::Shape {
                op: "rollout_latents",
                details: format!(
                    "batch ({} frames of {}) vs config ({} of {})",
                    batch.t, batch.hw, self.cfg.window, self.cfg.input_size
                ),
            });
        }
        let mut stats = Vec::new();
        let tw = self.cfg.window;
        let mut latents = Vec::with_capacity(tw);
        for step in 0..tw {
            let f = batch.frame_leaf(t, step);
            latents.push(self.encode(t, p, f, mode, trainable, &mut stats)?);
        }
        let hid = self.cfg.rnn_hidden();
        let mut h = t.leaf(&[batch.b, hid], vec![E::zero(); batch.b * hid]);
        let mut pred_latents = Vec::with_capacity(tw - 1);
        for step in 1..tw {
            let sens = self.cfg.sensors_on().then(|| {
                batch.row_leaf(t, batch.sensors.as_ref().unwrap(), self.cfg.sensor_dim, step - 1)
            });
            let act = (self.cfg.action_dim > 0).then(|| {
                batch.row_leaf(t, batch.actions.as_ref().unwrap(), self.cfg.action_dim, step - 1)
            });
            let (h_next, l_pred) =
                self.predict_step(t, p, h, latents[step - 1], sens, act, trainable)?;
            h = h_next;
            pred_latents.push(l_pred);
        }
        Ok((latents, pred_latents, stats))
    }

    /// One streaming GRU advance outside a window rollout: consume the
    /// current latent (+ optional sensor row and action one-hot, matching the
    /// config) and return the updated hidden state and the latent predicted
    /// for the next step.
    pub fn predict_step<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        h: Var,
        latent: Var,
        sensors: Option<Var>,
        actions: Option<Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let mut inp = latent;
        if let Some(sin) = &self.sensor_in {
            let s = sensors.ok_or_else(|| TensorError::Shape {
                op: "predict_step",
                details: "sensor fusion enabled but no sensor row given".into(),
            })?;
            let emb = sin.forward(t, p, s, trainable)?;
            inp = t.concat(1, inp, emb)?;
        }
        if self.cfg.action_dim > 0 {
            let a = actions.ok_or_else(|| TensorError::Shape {
                op: "predict_step",
                details: "action conditioning enabled but no action row given".into(),
            })?;
            inp = t.concat(1, inp, a)?;
        }
        let h_next = self.gru.step(t, p, h, inp, trainable)?;
        let l_pred = if self.cfg.rnn_hidden() == self.cfg.latent {
            h_next
        } else {
            t.slice(h_next, 1, 0, self.cfg.latent)?
        };
        Ok((h_next, l_pred))
    }

    /// Controller / Q head on stacked `(ℓ_prev, ℓ_pred)` -> `(n, 9)` logits.
    pub fn controller_forward<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        l_prev: Var,
        l_pred: Var,
        trainable: bool,
    ) -> Result<Var> {
        let (sa, sb) = (t.shape(l_prev), t.shape(l_pred));
        if sa != sb || sa.len() != 2 || sa[1] != self.cfg.latent {
            return Err(TensorError::Shape {
                op: "controller",
                details: format!("latents {sa:?} vs {sb:?}, want (n,{})", self.cfg.latent),
            });
        }
        let mut h = t.concat(1, l_prev, l_pred)?;
        let last = self.controller.len() - 1;
        for (i, d) in self.controller.iter().enumerate() {
            h = d.forward(t, p, h, trainable)?;
            if i != last {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// Expected encoder output shapes (c, h, w) after each block and the
    /// projection, per the conv arithmetic.
    pub fn encoder_shapes(&self) -> Vec<[usize; 3]> {
        let n = self.cfg.n_blocks();
        let mut out = Vec::new();
        let mut s = self.cfg.input_size;
        for i in 0..n {
            s /= 2;
            out.push([self.cfg.block_channels(i), s, s]);
        }
        out.push([self.cfg.latent, 1, 1]);
        out
    }

    /// Names of all decoder parameters; used to assert the reconstruction and
    /// prediction paths share one decoder.
    pub fn decoder_param_names(&self) -> Vec<String> {
        let mut names = vec![
            format!("{}.w", self.dec_proj.name),
            format!("{}.b", self.dec_proj.name),
        ];
        for b in &self.dec_blocks {
            names.push(format!("{}.w", b.conv1.name));
            names.push(format!("{}.w", b.conv2.name));
        }
        names.push(format!("{}.w", self.dec_out.name));
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};

    fn build<E: Elem>(cfg: CarnetConfig, seed: u64) -> (Carnet, Params<E>) {
        let model = Carnet::new(cfg).unwrap();
        let mut p = Params::new();
        let mut rng = rng_stream(seed, stream::INIT);
        model.register_backbone(&mut p, &mut rng);
        model.register_controller(&mut p, &mut rng);
        (model, p)
    }

    #[test]
    fn full_config_matches_published_ladder() {
        let model = Carnet::new(CarnetConfig::full()).unwrap();
        let want: Vec<[usize; 3]> = vec![
            [2, 128, 128],
            [4, 64, 64],
            [8, 32, 32],
            [16, 16, 16],
            [32, 8, 8],
            [64, 4, 4],
            [128, 1, 1],
        ];
        assert_eq!(model.encoder_shapes(), want);
        assert_eq!(model.cfg.controller_widths(), vec![256, 128, 128, 64, 9]);
    }

    #[test]
    fn desk_config_ladder() {
        let model = Carnet::new(CarnetConfig::desk()).unwrap();
        let want: Vec<[usize; 3]> = vec![[2, 32, 32], [4, 16, 16], [8, 8, 8], [16, 4, 4], [32, 1, 1]];
        assert_eq!(model.encoder_shapes(), want);
    }

    #[test]
    fn encode_decode_roundtrip_shapes() {
        let (model, p) = build::<f32>(CarnetConfig::desk(), 0);
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(&[2, 1, 64, 64], vec![0.5; 2 * 64 * 64]);
        let mut st = Vec::new();
        let l = model.encode(&t, &p, x, Mode::Train, true, &mut st).unwrap();
        assert_eq!(t.shape(l), vec![2, 32]);
        let y = model.decode(&t, &p, l, Mode::Train, true, &mut st).unwrap();
        assert_eq!(t.shape(y), vec![2, 1, 64, 64]);
        for &v in &t.value(y) {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn attention_config_keeps_shapes() {
        let cfg = CarnetConfig {
            use_attention: true,
            ..CarnetConfig::desk()
        };
        let (model, p) = build::<f32>(cfg, 1);
        let t: Tape<f32> = Tape::new();
        let x = t.leaf(&[1, 1, 64, 64], vec![0.25; 64 * 64]);
        let mut st = Vec::new();
        let l = model.encode(&t, &p, x, Mode::Train, true, &mut st).unwrap();
        assert_eq!(t.shape(l), vec![1, 32]);
    }

    #[test]
    fn zero_model_rolls_out_zero() {
        let cfg = CarnetConfig::tiny();
        let model = Carnet::new(cfg.clone()).unwrap();
        let mut p: Params<f64> = Params::new();
        let mut rng = rng_stream(2, stream::INIT);
        model.register_backbone(&mut p, &mut rng);
        for (name, t) in p.iter_mut() {
            if !name.ends_with(".rvar") {
                t.data.fill(0.0);
            }
        }
        let batch = WindowBatch {
            b: 1,
            t: 3,
            hw: 8,
            frames: vec![0.0; 3 * 64],
            sensors: None,
            actions: None,
            labels: None,
        };
        let t: Tape<f64> = Tape::new();
        let r = model.rollout(&t, &p, &batch, Mode::Train, true).unwrap();
        assert_eq!(r.latents.len(), 3);
        assert_eq!(r.preds.len(), 2);
        assert_eq!(r.recons.len(), 3);
        for &l in r.latents.iter().chain(r.pred_latents.iter()) {
            assert!(t.value(l).iter().all(|&v| v == 0.0));
        }
        // sigmoid(0) = 0.5 output images from an all-zero decoder
        for &y in &r.recons {
            assert!(t.value(y).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn image_only_hidden_equals_latent() {
        let cfg = CarnetConfig::desk();
        assert_eq!(cfg.rnn_hidden(), cfg.latent);
        assert_eq!(cfg.gru_input(), cfg.latent);
        let sens = CarnetConfig {
            sensor_dim: 3,
            action_dim: 9,
            ..CarnetConfig::desk()
        };
        assert_eq!(sens.rnn_hidden(), 32 + 16);
        assert_eq!(sens.gru_input(), 32 + 16 + 9);
    }

    #[test]
    fn controller_order_sensitive() {
        use rand::Rng;
        let (model, p) = build::<f64>(CarnetConfig::tiny(), 3);
        let t: Tape<f64> = Tape::new();
        let mut rng = rng_stream(4, stream::TEST);
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let va = t.leaf(&[1, 4], a);
        let vb = t.leaf(&[1, 4], b);
        let l1 = model.controller_forward(&t, &p, va, vb, true).unwrap();
        let l2 = model.controller_forward(&t, &p, vb, va, true).unwrap();
        assert_eq!(t.shape(l1), vec![1, 9]);
        assert_ne!(t.value(l1), t.value(l2));
    }

    #[test]
    fn latent_rollout_matches_full_rollout() {
        use rand::Rng;
        let (model, p) = build::<f64>(CarnetConfig::tiny(), 6);
        let mut rng = rng_stream(7, stream::TEST);
        let batch = WindowBatch {
            b: 2,
            t: 3,
            hw: 8,
            frames: (0..2 * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
            sensors: None,
            actions: None,
            labels: None,
        };
        let t: Tape<f64> = Tape::new();
        let full = model.rollout(&t, &p, &batch, Mode::Eval, false).unwrap();
        let (latents, preds, _) = model
            .rollout_latents(&t, &p, &batch, Mode::Eval, false)
            .unwrap();
        for (&a, &b) in full.latents.iter().zip(&latents) {
            assert_eq!(t.value(a), t.value(b));
        }
        for (&a, &b) in full.pred_latents.iter().zip(&preds) {
            assert_eq!(t.value(a), t.value(b));
        }
    }

    #[test]
    fn sensor_mode_requires_sensor_data() {
        let cfg = CarnetConfig {
            sensor_dim: 3,
            ..CarnetConfig::tiny()
        };
        let model = Carnet::new(cfg).unwrap();
        let mut p: Params<f64> = Params::new();
        let mut rng = rng_stream(5, stream::INIT);
        model.register_backbone(&mut p, &mut rng);
        let batch = WindowBatch {
            b: 1,
            t: 3,
            hw: 8,
            frames: vec![0.0; 3 * 64],
            sensors: None,
            actions: None,
            labels: None,
        };
        let t: Tape<f64> = Tape::new();
        assert!(model.rollout(&t, &p, &batch, Mode::Train, true).is_err());
    }
}

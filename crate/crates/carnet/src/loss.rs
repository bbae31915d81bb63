//! Losses: MS-SSIM on images, smooth-L1 on latents/sensors, class-weighted
//! cross-entropy on controller logits, and the assembled training objective.

use crate::tensor::{Elem, Result, Tape, TensorError, Var};

/// Multi-scale SSIM settings. The same per-scale weight serves α (luminance,
/// coarsest scale only), β (contrast), and γ (structure).
#[derive(Debug, Clone)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    pub l: f64,
    pub window: Vec<f64>,
}

/// Canonical 5-scale weights.
const WEIGHTS_5: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

impl MsSsimConfig {
    fn with_scales(scales: usize, weights: Vec<f64>, window: usize) -> Self {
        MsSsimConfig {
            scales,
            weights,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
            window: gaussian_window(window, 1.5),
        }
    }

    /// 5 scales, 11-tap window: the defaults for 256×256 inputs.
    pub fn full() -> Self {
        Self::with_scales(5, WEIGHTS_5.to_vec(), 11)
    }

    /// 3 scales with the first three canonical weights renormalized, for
    /// 64×64 inputs.
    pub fn desk() -> Self {
        let s: f64 = WEIGHTS_5[..3].iter().sum();
        Self::with_scales(3, WEIGHTS_5[..3].iter().map(|w| w / s).collect(), 11)
    }

    /// Single scale, weight 1.
    pub fn single_scale(window: usize) -> Self {
        Self::with_scales(1, vec![1.0], window)
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }
    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }
    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "window size must be odd");
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

struct WindowStats {
    mu_x: Var,
    mu_y: Var,
    var_x: Var,
    var_y: Var,
    cov: Var,
}

/// Local first/second moments over the smoothing window (valid region only).
fn window_stats<E: Elem>(t: &Tape<E>, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<WindowStats> {
    let win: Vec<E> = cfg.window.iter().map(|&v| E::from_f64(v)).collect();
    let mu_x = t.blur2d_valid(x, &win)?;
    let mu_y = t.blur2d_valid(y, &win)?;
    let xx = t.blur2d_valid(t.mul(x, x)?, &win)?;
    let yy = t.blur2d_valid(t.mul(y, y)?, &win)?;
    let xy = t.blur2d_valid(t.mul(x, y)?, &win)?;
    let var_x = t.sub(xx, t.mul(mu_x, mu_x)?)?;
    let var_y = t.sub(yy, t.mul(mu_y, mu_y)?)?;
    let cov = t.sub(xy, t.mul(mu_x, mu_y)?)?;
    Ok(WindowStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    })
}

/// Per-window luminance, contrast, and structure maps.
pub fn ssim_components<E: Elem>(
    t: &Tape<E>,
    x: Var,
    y: Var,
    cfg: &MsSsimConfig,
) -> Result<(Var, Var, Var)> {
    if t.shape(x) != t.shape(y) {
        return Err(TensorError::Shape {
            op: "ssim",
            details: format!("{:?} vs {:?}", t.shape(x), t.shape(y)),
        });
    }
    let st = window_stats(t, x, y, cfg)?;
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    // l = (2 μx μy + C1) / (μx² + μy² + C1)
    let mu_xy = t.mul(st.mu_x, st.mu_y)?;
    let l_num = t.affine(mu_xy, 2.0, c1);
    let mu2 = t.add(t.mul(st.mu_x, st.mu_x)?, t.mul(st.mu_y, st.mu_y)?)?;
    let l = t.div(l_num, t.affine(mu2, 1.0, c1))?;
    // c = (2 σx σy + C2) / (σx² + σy² + C2); variances clamped at 0 before √
    let sig_x = t.pow_clamped(st.var_x, 0.5);
    let sig_y = t.pow_clamped(st.var_y, 0.5);
    let sig_xy = t.mul(sig_x, sig_y)?;
    let c_num = t.affine(sig_xy, 2.0, c2);
    let sig2 = t.add(st.var_x, st.var_y)?;
    let c = t.div(c_num, t.affine(sig2, 1.0, c2))?;
    // s = (σxy + C3) / (σx σy + C3)
    let s = t.div(t.affine(st.cov, 1.0, c3), t.affine(sig_xy, 1.0, c3))?;
    Ok((l, c, s))
}

/// Mean SSIM score of one scale, split as (mean luminance, mean contrast·structure).
/// With C3 = C2/2 the product c·s collapses to (2σxy+C2)/(σx²+σy²+C2), which
/// avoids the square roots on the gradient path.
fn scale_scores<E: Elem>(t: &Tape<E>, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<(Var, Var)> {
    let st = window_stats(t, x, y, cfg)?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mu_xy = t.mul(st.mu_x, st.mu_y)?;
    let mu2 = t.add(t.mul(st.mu_x, st.mu_x)?, t.mul(st.mu_y, st.mu_y)?)?;
    let l = t.div(t.affine(mu_xy, 2.0, c1), t.affine(mu2, 1.0, c1))?;
    let cs = t.div(
        t.affine(st.cov, 2.0, c2),
        t.affine(t.add(st.var_x, st.var_y)?, 1.0, c2),
    )?;
    Ok((t.reduce_mean(l), t.reduce_mean(cs)))
}

/// MS-SSIM score in (0,1]: Π_j mean(cs_j)^{w_j} · mean(l_M)^{w_M}, downsampling
/// by 2×2 average pooling between scales.
pub fn ms_ssim<E: Elem>(t: &Tape<E>, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<Var> {
    if t.shape(x) != t.shape(y) {
        return Err(TensorError::Shape {
            op: "ms_ssim",
            details: format!("{:?} vs {:?}", t.shape(x), t.shape(y)),
        });
    }
    let (mut cx, mut cy) = (x, y);
    let mut score: Option<Var> = None;
    for (j, &w) in cfg.weights.iter().enumerate().take(cfg.scales) {
        let sh = t.shape(cx);
        if sh[2] < cfg.window.len() || sh[3] < cfg.window.len() {
            return Err(TensorError::Shape {
                op: "ms_ssim",
                details: format!("image {sh:?} too small for scale {} of {}", j + 1, cfg.scales),
            });
        }
        let last = j + 1 == cfg.scales;
        let (l, cs) = scale_scores(t, cx, cy, cfg)?;
        let mut term = t.pow_clamped(cs, w);
        if last {
            term = t.mul(term, t.pow_clamped(l, w))?;
        }
        score = Some(match score {
            None => term,
            Some(acc) => t.mul(acc, term)?,
        });
        if !last {
            cx = t.avg_pool2(cx)?;
            cy = t.avg_pool2(cy)?;
        }
    }
    Ok(score.unwrap())
}

/// MS-SSIM loss `1 − ms_ssim`, in [0,1].
pub fn ms_ssim_loss<E: Elem>(t: &Tape<E>, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<Var> {
    Ok(t.affine(ms_ssim(t, x, y, cfg)?, -1.0, 1.0))
}

pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Mean smooth-L1: `0.5 d²/β` for `|d| < β`, else `|d| − β/2`.
pub fn smooth_l1<E: Elem>(t: &Tape<E>, a: Var, b: Var, beta: f64) -> Result<Var> {
    t.huber_mean(a, b, beta)
}

/// Class-weighted mean cross-entropy over `(n, k)` logits.
pub fn cross_entropy<E: Elem>(
    t: &Tape<E>,
    logits: Var,
    targets: &[usize],
    class_weights: &[f64],
) -> Result<Var> {
    let sh = t.shape(logits);
    if sh.len() != 2 || sh[0] != targets.len() || sh[1] != class_weights.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            details: format!(
                "logits {sh:?} vs {} targets, {} class weights",
                targets.len(),
                class_weights.len()
            ),
        });
    }
    let logp = t.log_softmax_rows(logits)?;
    let picked = t.select_class(logp, targets)?;
    let w: Vec<E> = targets
        .iter()
        .map(|&c| E::from_f64(class_weights[c]))
        .collect();
    let wv = t.leaf(&[targets.len()], w);
    Ok(t.affine(t.reduce_mean(t.mul(picked, wv)?), -1.0, 0.0))
}

/// Everything the training objective consumes for one window batch.
/// `frames[t]` are the targets x_t; `recons[t]` decode ℓ_t; `preds[t-1]`
/// decode the predicted latent for step t (so `preds.len() == T−1`), and the
/// latent/sensor slices pair predictions with their same-step targets.
pub struct TotalLossInputs<'a> {
    pub frames: &'a [Var],
    pub recons: &'a [Var],
    pub preds: &'a [Var],
    pub latents: &'a [Var],
    pub pred_latents: &'a [Var],
    pub sensors: Option<(&'a [Var], &'a [Var])>,
}

/// The four-term training objective: reconstruction + image prediction +
/// latent prediction (+ sensor prediction). Returns the total and the named
/// per-term breakdown; total == sum(parts) by construction.
pub fn carnet_total_loss<E: Elem>(
    t: &Tape<E>,
    inp: &TotalLossInputs,
    msc: &MsSsimConfig,
    beta: f64,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let n = inp.frames.len();
    if n < 2 {
        return Err(TensorError::Shape {
            op: "total_loss",
            details: format!("window length {n} < 2"),
        });
    }
    assert_eq!(inp.recons.len(), n);
    assert_eq!(inp.preds.len(), n - 1);
    assert_eq!(inp.latents.len(), n - 1);
    assert_eq!(inp.pred_latents.len(), n - 1);

    let mean_of = |terms: Vec<Var>| -> Result<Var> {
        let k = terms.len();
        let mut acc = terms[0];
        for &v in &terms[1..] {
            acc = t.add(acc, v)?;
        }
        Ok(t.affine(acc, 1.0 / k as f64, 0.0))
    };

    let recon = mean_of(
        (0..n)
            .map(|i| ms_ssim_loss(t, inp.frames[i], inp.recons[i], msc))
            .collect::<Result<_>>()?,
    )?;
    let pred = mean_of(
        (1..n)
            .map(|i| ms_ssim_loss(t, inp.frames[i], inp.preds[i - 1], msc))
            .collect::<Result<_>>()?,
    )?;
    let latent = mean_of(
        (0..n - 1)
            .map(|i| smooth_l1(t, inp.pred_latents[i], inp.latents[i], beta))
            .collect::<Result<_>>()?,
    )?;

    let mut parts = vec![("recon", recon), ("pred", pred), ("latent", latent)];
    if let Some((targets, preds)) = inp.sensors {
        assert_eq!(targets.len(), n - 1);
        assert_eq!(preds.len(), n - 1);
        let sensor = mean_of(
            (0..n - 1)
                .map(|i| smooth_l1(t, preds[i], targets[i], beta))
                .collect::<Result<_>>()?,
        )?;
        parts.push(("sensor", sensor));
    }

    let mut total = parts[0].1;
    for &(_, v) in &parts[1..] {
        total = t.add(total, v)?;
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};
    use rand::Rng;

    fn rand_img(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn identity_scores_one() {
        let cfg = MsSsimConfig::desk();
        let mut rng = rng_stream(10, stream::TEST);
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(&[1, 1, 64, 64], rand_img(&mut rng, 64 * 64));
        let s = ms_ssim(&t, x, x, &cfg).unwrap();
        assert!((t.scalar_value(s) - 1.0).abs() < 1e-6);
        let l = ms_ssim_loss(&t, x, x, &cfg).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-6);
    }

    #[test]
    fn symmetric_in_arguments() {
        let cfg = MsSsimConfig::desk();
        let mut rng = rng_stream(11, stream::TEST);
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(&[1, 1, 64, 64], rand_img(&mut rng, 64 * 64));
        let y = t.leaf(&[1, 1, 64, 64], rand_img(&mut rng, 64 * 64));
        let a = t.scalar_value(ms_ssim(&t, x, y, &cfg).unwrap());
        let b = t.scalar_value(ms_ssim(&t, y, x, &cfg).unwrap());
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn constant_images_closed_form() {
        // a=0, b=1, L=1, K1=0.01: l = C1/(1+C1), c = s = 1
        let cfg = MsSsimConfig::single_scale(11);
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(&[1, 1, 16, 16], vec![0.0; 256]);
        let y = t.leaf(&[1, 1, 16, 16], vec![1.0; 256]);
        let (l, c, s) = ssim_components(&t, x, y, &cfg).unwrap();
        let want = 1e-4 / (1.0 + 1e-4);
        for &lv in &t.value(l) {
            assert!((lv - want).abs() < 1e-9);
        }
        for &cv in t.value(c).iter().chain(t.value(s).iter()) {
            assert!((cv - 1.0).abs() < 1e-9);
        }
        let m = t.scalar_value(ms_ssim(&t, x, y, &cfg).unwrap());
        assert!((m - want).abs() < 1e-6);
        assert!((m - 9.999e-5).abs() < 1e-6);
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let cfg = MsSsimConfig::desk();
        let mut rng = rng_stream(12, stream::TEST);
        for _ in 0..25 {
            let t: Tape<f64> = Tape::new();
            let x = t.leaf(&[1, 1, 64, 64], rand_img(&mut rng, 64 * 64));
            let y = t.leaf(&[1, 1, 64, 64], rand_img(&mut rng, 64 * 64));
            let l = t.scalar_value(ms_ssim_loss(&t, x, y, &cfg).unwrap());
            assert!((0.0..=1.0).contains(&l), "loss {l}");
        }
    }

    #[test]
    fn too_small_image_rejected() {
        let cfg = MsSsimConfig::desk();
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(&[1, 1, 16, 16], vec![0.3; 256]);
        assert!(ms_ssim(&t, x, x, &cfg).is_err());
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        let t: Tape<f64> = Tape::new();
        let a = t.leaf(&[2], vec![2.0, 0.5]);
        let b = t.leaf(&[2], vec![0.0, 0.0]);
        let z = t.leaf(&[2], vec![1.0, 1.0]);
        assert_eq!(t.scalar_value(smooth_l1(&t, z, z, 1.0).unwrap()), 0.0);
        // d=2 → 1.5; d=0.5 → 0.125; mean = 0.8125
        let v = t.scalar_value(smooth_l1(&t, a, b, 1.0).unwrap());
        assert!((v - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let t: Tape<f64> = Tape::new();
        let logits = t.leaf(&[2, 9], vec![0.7; 18]);
        let w = vec![1.0; 9];
        let l = t.scalar_value(cross_entropy(&t, logits, &[3, 8], &w).unwrap());
        assert!((l - (9.0f64).ln()).abs() < 1e-9);
        let w2 = vec![2.0; 9];
        let l2 = t.scalar_value(cross_entropy(&t, logits, &[3, 8], &w2).unwrap());
        assert!((l2 - 2.0 * l).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = rng_stream(13, stream::TEST);
        for _ in 0..100 {
            let k = rng.gen_range(2..7);
            let n = rng.gen_range(1..5);
            let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let t: Tape<f64> = Tape::new();
            let lv = t.leaf(&[n, k], logits.clone());
            let got = t.scalar_value(cross_entropy(&t, lv, &targets, &w).unwrap());
            let mut want = 0.0;
            for i in 0..n {
                let row = &logits[i * k..(i + 1) * k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                want -= w[targets[i]] * (row[targets[i]].exp() / z).ln();
            }
            want /= n as f64;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn total_is_sum_of_parts() {
        let cfg = MsSsimConfig::single_scale(3);
        let mut rng = rng_stream(14, stream::TEST);
        let t: Tape<f64> = Tape::new();
        let img = |rng: &mut rand_chacha::ChaCha8Rng| rand_img(rng, 64);
        let frames: Vec<_> = (0..3).map(|_| t.leaf(&[1, 1, 8, 8], img(&mut rng))).collect();
        let recons: Vec<_> = (0..3).map(|_| t.leaf(&[1, 1, 8, 8], img(&mut rng))).collect();
        let preds: Vec<_> = (0..2).map(|_| t.leaf(&[1, 1, 8, 8], img(&mut rng))).collect();
        let lat = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let latents: Vec<_> = (0..2).map(|_| t.leaf(&[1, 4], lat(&mut rng))).collect();
        let plats: Vec<_> = (0..2).map(|_| t.leaf(&[1, 4], lat(&mut rng))).collect();
        let inp = TotalLossInputs {
            frames: &frames,
            recons: &recons,
            preds: &preds,
            latents: &latents,
            pred_latents: &plats,
            sensors: None,
        };
        let (total, parts) = carnet_total_loss(&t, &inp, &cfg, 1.0).unwrap();
        assert_eq!(parts.len(), 3);
        let sum: f64 = parts.iter().map(|&(_, v)| t.scalar_value(v)).sum();
        assert!((t.scalar_value(total) - sum).abs() < 1e-7);

        // perfect predictions: all terms vanish
        let inp0 = TotalLossInputs {
            frames: &frames,
            recons: &frames,
            preds: &frames[1..].to_vec(),
            latents: &latents,
            pred_latents: &latents,
            sensors: Some((&latents, &latents)),
        };
        let (total0, parts0) = carnet_total_loss(&t, &inp0, &cfg, 1.0).unwrap();
        assert_eq!(parts0.len(), 4);
        assert!(t.scalar_value(total0).abs() < 1e-9);
    }
}

//! The finite-difference gradient suite, shared between the per-op test file
//! and the acceptance gate: every differentiable op, layer, and loss, plus an
//! end-to-end window rollout of a miniature model, in f64 against central
//! differences.

#![allow(dead_code)]

use carnet::loss::{carnet_total_loss, cross_entropy, ms_ssim_loss, MsSsimConfig, TotalLossInputs};
use carnet::model::{Carnet, CarnetConfig, Mode, WindowBatch};
use carnet::nn::{GruCell, SelfAttention2d, BN_EPS};
use carnet::rng::{rng_stream, stream};
use carnet::tensor::{Params, Tape, Var};
use rand::Rng;

use super::{grad_check, insert, rand_vec, rand_vec_away};

fn rng(k: u64) -> rand_chacha::ChaCha8Rng {
    rng_stream(0xfd, stream::TEST + k)
}

/// Project a tensor to a scalar with a fixed random map so every output
/// coordinate influences the loss.
fn project(t: &Tape<f64>, v: Var, seed: u64) -> Var {
    let n = t.len_of(v);
    let r = rand_vec(&mut rng(seed ^ 0x9999), n, -1.0, 1.0);
    let shape = t.shape(v);
    let rv = t.leaf(&shape, r);
    t.reduce_sum(t.mul(v, rv).unwrap())
}

pub fn elementwise_binary_ops(n: usize) {
    for op in ["add", "sub", "mul", "div"] {
        grad_check(op, n, |k| {
            let mut r = rng(k);
            let mut p = Params::new();
            insert(&mut p, "x", &[2, 3], rand_vec(&mut r, 6, -2.0, 2.0));
            let y = match op {
                // denominators well away from zero
                "div" => rand_vec_away(&mut r, 6, -2.0, 2.0, 0.0, 0.5),
                _ => rand_vec(&mut r, 6, -2.0, 2.0),
            };
            insert(&mut p, "y", &[2, 3], y);
            (p, move |t: &Tape<f64>, p: &Params<f64>| {
                let x = t.param(p, "x").unwrap();
                let y = t.param(p, "y").unwrap();
                let z = match op {
                    "add" => t.add(x, y),
                    "sub" => t.sub(x, y),
                    "mul" => t.mul(x, y),
                    _ => t.div(x, y),
                }
                .unwrap();
                project(t, z, k)
            })
        });
    }
}

pub fn unary_activations(n: usize) {
    grad_check("affine/relu/sigmoid/tanh/pow", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        // keep the ReLU inputs off the kink at 0
        insert(&mut p, "x", &[3, 4], rand_vec_away(&mut r, 12, -2.0, 2.0, 0.0, 1e-3));
        insert(&mut p, "q", &[5], rand_vec(&mut r, 5, 0.2, 2.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let q = t.param(p, "q").unwrap();
            let a = t.relu(t.affine(x, 1.5, -0.25));
            let b = t.sigmoid(x);
            let c = t.tanh_act(x);
            let d = t.pow_clamped(q, 2.5);
            let s = t.add(a, b).unwrap();
            let s = t.add(s, c).unwrap();
            t.add(project(t, s, k), project(t, d, k + 1)).unwrap()
        })
    });
}

pub fn matmul_and_dense(n: usize) {
    grad_check("matmul/dense", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[2, 3], rand_vec(&mut r, 6, -1.0, 1.0));
        insert(&mut p, "w", &[3, 4], rand_vec(&mut r, 12, -1.0, 1.0));
        // dense weights are (out, in); matmul takes (in, out)
        insert(&mut p, "wd", &[4, 3], rand_vec(&mut r, 12, -1.0, 1.0));
        insert(&mut p, "b", &[4], rand_vec(&mut r, 4, -1.0, 1.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let w = t.param(p, "w").unwrap();
            let wd = t.param(p, "wd").unwrap();
            let b = t.param(p, "b").unwrap();
            let m = t.matmul(x, w).unwrap();
            let d = t.dense(x, wd, Some(b)).unwrap();
            t.add(project(t, m, k), project(t, d, k + 1)).unwrap()
        })
    });
}

pub fn shape_ops(n: usize) {
    grad_check("concat/slice/reshape/stack", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "a", &[2, 3], rand_vec(&mut r, 6, -1.0, 1.0));
        insert(&mut p, "b", &[2, 2], rand_vec(&mut r, 4, -1.0, 1.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let a = t.param(p, "a").unwrap();
            let b = t.param(p, "b").unwrap();
            let c = t.concat(1, a, b).unwrap(); // (2,5)
            let s = t.slice(c, 1, 1, 4).unwrap(); // (2,3)
            let rsh = t.reshape(s, &[3, 2]).unwrap();
            let st = t.stack0(&[rsh, rsh]).unwrap();
            project(t, st, k)
        })
    });
}

pub fn reductions_softmax_and_cross_entropy(n: usize) {
    grad_check("reduce/softmax/cross_entropy", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[3, 4], rand_vec(&mut r, 12, -2.0, 2.0));
        let targets = vec![0usize, 3, 1];
        let weights = vec![0.5, 1.0, 2.0, 1.5];
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let s0 = t.softmax(x, 0).unwrap();
            let s1 = t.softmax(x, 1).unwrap();
            let ce = cross_entropy(t, x, &targets, &weights).unwrap();
            let mix = t.add(project(t, s0, k), project(t, s1, k + 1)).unwrap();
            let mean = t.reduce_mean(x);
            let mix = t.add(mix, mean).unwrap();
            t.add(mix, ce).unwrap()
        })
    });
}

pub fn smooth_l1_both_branches(n: usize) {
    grad_check("smooth_l1", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        // differences straddle the |d| = beta boundary but stay off it
        insert(&mut p, "a", &[8], rand_vec(&mut r, 8, -3.0, 3.0));
        insert(&mut p, "b", &[8], vec![0.0; 8]);
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let a = t.param(p, "a").unwrap();
            let b = t.param(p, "b").unwrap();
            t.huber_mean(a, b, 1.0).unwrap()
        })
    });
}

pub fn conv2d_all_strides_and_pads(n: usize) {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        grad_check("conv2d", n, |k| {
            let mut r = rng(k);
            let mut p = Params::new();
            insert(&mut p, "x", &[2, 2, 5, 5], rand_vec(&mut r, 100, -1.0, 1.0));
            insert(&mut p, "w", &[3, 2, 3, 3], rand_vec(&mut r, 54, -1.0, 1.0));
            insert(&mut p, "b", &[3], rand_vec(&mut r, 3, -1.0, 1.0));
            (p, move |t: &Tape<f64>, p: &Params<f64>| {
                let x = t.param(p, "x").unwrap();
                let w = t.param(p, "w").unwrap();
                let b = t.param(p, "b").unwrap();
                let y = t.conv2d(x, w, stride, pad).unwrap();
                let y = t.bias_channel(y, b).unwrap();
                project(t, y, k)
            })
        });
    }
}

pub fn conv2d_transpose_all_strides_and_pads(n: usize) {
    for (stride, pad, out_pad) in [(1, 0, 0), (1, 1, 0), (2, 1, 1)] {
        grad_check("conv2d_transpose", n, |k| {
            let mut r = rng(k);
            let mut p = Params::new();
            insert(&mut p, "x", &[2, 2, 4, 4], rand_vec(&mut r, 64, -1.0, 1.0));
            insert(&mut p, "w", &[2, 3, 3, 3], rand_vec(&mut r, 54, -1.0, 1.0));
            (p, move |t: &Tape<f64>, p: &Params<f64>| {
                let x = t.param(p, "x").unwrap();
                let w = t.param(p, "w").unwrap();
                let y = t.conv2d_transpose(x, w, stride, pad, out_pad).unwrap();
                project(t, y, k)
            })
        });
    }
}

pub fn batchnorm_training_statistics(n: usize) {
    grad_check("batchnorm_train", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[3, 2, 2, 2], rand_vec(&mut r, 24, -2.0, 2.0));
        insert(&mut p, "g", &[2], rand_vec(&mut r, 2, 0.5, 1.5));
        insert(&mut p, "b", &[2], rand_vec(&mut r, 2, -0.5, 0.5));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let g = t.param(p, "g").unwrap();
            let b = t.param(p, "b").unwrap();
            let (y, _) = t.batchnorm_train(x, g, b, BN_EPS).unwrap();
            project(t, y, k)
        })
    });
}

pub fn pooling_blur_and_channel_affine(n: usize) {
    grad_check("avg_pool2/blur/channel_affine", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[1, 2, 6, 6], rand_vec(&mut r, 72, -1.0, 1.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let pooled = t.avg_pool2(x).unwrap();
            let blurred = t.blur2d_valid(x, &[0.25, 0.5, 0.25]).unwrap();
            let ca = t.channel_affine(x, vec![1.5, 0.5], vec![0.1, -0.2]).unwrap();
            let s = t.add(project(t, pooled, k), project(t, blurred, k + 1)).unwrap();
            t.add(s, project(t, ca, k + 2)).unwrap()
        })
    });
}

pub fn attention_primitives(n: usize) {
    grad_check("shift/map_dot/channel_dot/mul_bcast", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[2, 3, 4, 4], rand_vec(&mut r, 96, -1.0, 1.0));
        insert(&mut p, "y", &[2, 3, 4, 4], rand_vec(&mut r, 96, -1.0, 1.0));
        insert(&mut p, "v", &[3], rand_vec(&mut r, 3, -1.0, 1.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let y = t.param(p, "y").unwrap();
            let v = t.param(p, "v").unwrap();
            let sh = t.shift2d(x, 1, -1).unwrap();
            let md = t.map_dot(sh, y).unwrap(); // (2,1,4,4)
            let cd = t.channel_dot(x, v).unwrap(); // (2,1,4,4)
            let wm = t.mul_bcast_c(t.sigmoid(md), y).unwrap();
            t.add(project(t, wm, k), project(t, cd, k + 1)).unwrap()
        })
    });
}

pub fn gru_cell_step(n: usize) {
    grad_check("gru", n, |k| {
        let mut r = rng(k);
        let cell = GruCell::new("g", 3, 4);
        let mut p = Params::new();
        cell.register(&mut p, &mut r);
        insert(&mut p, "h", &[2, 3], rand_vec(&mut r, 6, -1.0, 1.0));
        insert(&mut p, "x", &[2, 4], rand_vec(&mut r, 8, -1.0, 1.0));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let h = t.param(p, "h").unwrap();
            let x = t.param(p, "x").unwrap();
            let cell = GruCell::new("g", 3, 4);
            let h2 = cell.step(t, p, h, x, true).unwrap();
            project(t, h2, k)
        })
    });
}

pub fn local_self_attention(n: usize) {
    for relative in [false, true] {
        grad_check("attention", n, |k| {
            let mut r = rng(k);
            let att = SelfAttention2d::new("att", 2, 2, 3, relative).unwrap();
            let mut p = Params::new();
            att.register(&mut p, &mut r);
            insert(&mut p, "x", &[1, 2, 4, 4], rand_vec(&mut r, 32, -1.0, 1.0));
            (p, move |t: &Tape<f64>, p: &Params<f64>| {
                let x = t.param(p, "x").unwrap();
                let att = SelfAttention2d::new("att", 2, 2, 3, relative).unwrap();
                let y = att.forward(t, p, x, true).unwrap();
                project(t, y, k)
            })
        });
    }
}

pub fn ms_ssim_loss_gradient(n: usize) {
    grad_check("ms_ssim", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        insert(&mut p, "x", &[1, 1, 6, 6], rand_vec(&mut r, 36, 0.05, 0.95));
        insert(&mut p, "y", &[1, 1, 6, 6], rand_vec(&mut r, 36, 0.05, 0.95));
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let x = t.param(p, "x").unwrap();
            let y = t.param(p, "y").unwrap();
            ms_ssim_loss(t, x, y, &MsSsimConfig::single_scale(3)).unwrap()
        })
    });
}

pub fn total_loss_gradient(n: usize) {
    grad_check("total_loss", n, |k| {
        let mut r = rng(k);
        let mut p = Params::new();
        for name in ["f0", "f1", "r0", "r1", "p1"] {
            insert(&mut p, name, &[1, 1, 6, 6], rand_vec(&mut r, 36, 0.05, 0.95));
        }
        for name in ["l1", "q1"] {
            insert(&mut p, name, &[1, 4], rand_vec(&mut r, 4, -1.0, 1.0));
        }
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let v = |n: &str| t.param(p, n).unwrap();
            let inp = TotalLossInputs {
                frames: &[v("f0"), v("f1")],
                recons: &[v("r0"), v("r1")],
                preds: &[v("p1")],
                latents: &[v("l1")],
                pred_latents: &[v("q1")],
                sensors: None,
            };
            let (total, _) = carnet_total_loss(t, &inp, &MsSsimConfig::single_scale(3), 1.0).unwrap();
            total
        })
    });
}

/// End-to-end: the miniature model (8×8 input, latent 4, window 3), full
/// training objective plus controller cross-entropy, every parameter checked.
pub fn end_to_end_tiny_rollout(n: usize) {
    grad_check("end_to_end", n, |k| {
        let mut r = rng(k);
        let cfg = CarnetConfig::tiny();
        let model = Carnet::new(cfg.clone()).unwrap();
        let mut p: Params<f64> = Params::new();
        model.register_backbone(&mut p, &mut r);
        model.register_controller(&mut p, &mut r);
        // jitter the zero-initialized biases: an exactly-zero pre-activation
        // sits on the ReLU kink, where no finite difference is meaningful
        for (name, pt) in p.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".bz") || name.ends_with(".br") {
                for v in &mut pt.data {
                    *v += r.gen_range(0.01..0.1) * if r.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
        }
        let frames = rand_vec(&mut r, 2 * 3 * 64, 0.05, 0.95);
        (p, move |t: &Tape<f64>, p: &Params<f64>| {
            let model = Carnet::new(CarnetConfig::tiny()).unwrap();
            let batch = WindowBatch {
                b: 2,
                t: 3,
                hw: 8,
                frames: frames.clone(),
                sensors: None,
                actions: None,
                labels: None,
            };
            let ro = model.rollout(t, p, &batch, Mode::Train, true).unwrap();
            let inp = TotalLossInputs {
                frames: &ro.frames,
                recons: &ro.recons,
                preds: &ro.preds,
                latents: &ro.latents[1..],
                pred_latents: &ro.pred_latents,
                sensors: None,
            };
            let (total, _) =
                carnet_total_loss(t, &inp, &MsSsimConfig::single_scale(3), 1.0).unwrap();
            let logits = model
                .controller_forward(t, p, ro.latents[1], ro.pred_latents[1], true)
                .unwrap();
            let ce = cross_entropy(t, logits, &[3, 7], &[1.0; 9]).unwrap();
            t.add(total, ce).unwrap()
        })
    });
}

/// Run the whole suite with `n` random instances per check.
pub fn run_all(n: usize) {
    elementwise_binary_ops(n);
    unary_activations(n);
    matmul_and_dense(n);
    shape_ops(n);
    reductions_softmax_and_cross_entropy(n);
    smooth_l1_both_branches(n);
    conv2d_all_strides_and_pads(n);
    conv2d_transpose_all_strides_and_pads(n);
    batchnorm_training_statistics(n);
    pooling_blur_and_channel_affine(n);
    attention_primitives(n);
    gru_cell_step(n);
    local_self_attention(n);
    ms_ssim_loss_gradient(n);
    total_loss_gradient(n);
    end_to_end_tiny_rollout(n);
}

//! Dense, convolution, and batch normalization layer descriptors.

use rand_chacha::ChaCha8Rng;

use super::init::{ones, uniform_fan_in, zeros};
use crate::tensor::{BnStats, Elem, Params, Result, Tape, Var};

pub const BN_EPS: f64 = 1e-5;

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        p.insert(
            format!("{}.w", self.name),
            uniform_fan_in(&[self.out_dim, self.in_dim], self.in_dim, rng),
        );
        if self.bias {
            p.insert(format!("{}.b", self.name), zeros(&[self.out_dim]));
        }
    }

    /// Forward on a `(n, in_dim)` batch.
    pub fn forward<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let bind = |n: &str| {
            if trainable {
                t.param(p, n)
            } else {
                t.param_frozen(p, n)
            }
        };
        let w = bind(&format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(bind(&format!("{}.b", self.name))?)
        } else {
            None
        };
        t.dense(x, w, b)
    }
}

/// (Transposed) 2-D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub out_pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2dLayer {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            transposed: false,
            out_pad: 0,
        }
    }

    pub fn new_transposed(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        Conv2dLayer {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            transposed: true,
            out_pad,
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        if self.transposed {
            vec![self.in_ch, self.out_ch, self.k, self.k]
        } else {
            vec![self.out_ch, self.in_ch, self.k, self.k]
        }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.k * self.k;
        p.insert(
            format!("{}.w", self.name),
            uniform_fan_in(&self.weight_shape(), fan_in, rng),
        );
        p.insert(format!("{}.b", self.name), zeros(&[self.out_ch]));
    }

    /// Forward on a `(n, in_ch, h, w)` batch.
    pub fn forward<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let bind = |n: &str| {
            if trainable {
                t.param(p, n)
            } else {
                t.param_frozen(p, n)
            }
        };
        let w = bind(&format!("{}.w", self.name))?;
        let b = bind(&format!("{}.b", self.name))?;
        let y = if self.transposed {
            t.conv2d_transpose(x, w, self.stride, self.pad, self.out_pad)?
        } else {
            t.conv2d(x, w, self.stride, self.pad)?
        };
        t.bias_channel(y, b)
    }
}

/// Per-channel batch normalization with running statistics kept in the same
/// parameter store (never trained, updated by the trainer between steps).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            ch,
        }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>) {
        p.insert(format!("{}.g", self.name), ones(&[self.ch]));
        p.insert(format!("{}.b", self.name), zeros(&[self.ch]));
        p.insert(format!("{}.rmean", self.name), zeros(&[self.ch]));
        p.insert(format!("{}.rvar", self.name), ones(&[self.ch]));
    }

    /// Training-mode forward; the returned batch stats feed the running-stat
    /// update via [`apply_bn_update`].
    pub fn forward_train<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, BnStats<E>)> {
        let (g, b) = if trainable {
            (
                t.param(p, &format!("{}.g", self.name))?,
                t.param(p, &format!("{}.b", self.name))?,
            )
        } else {
            (
                t.param_frozen(p, &format!("{}.g", self.name))?,
                t.param_frozen(p, &format!("{}.b", self.name))?,
            )
        };
        t.batchnorm_train(x, g, b, BN_EPS)
    }

    /// Eval-mode forward using running statistics, folded to a per-channel
    /// affine (no batch statistics, no gradient path to γ/β).
    pub fn forward_eval<E: Elem>(&self, t: &Tape<E>, p: &Params<E>, x: Var) -> Result<Var> {
        let g = &p.get(&format!("{}.g", self.name)).unwrap().data;
        let b = &p.get(&format!("{}.b", self.name)).unwrap().data;
        let rm = &p.get(&format!("{}.rmean", self.name)).unwrap().data;
        let rv = &p.get(&format!("{}.rvar", self.name)).unwrap().data;
        let eps = E::from_f64(BN_EPS);
        let mut scale = Vec::with_capacity(self.ch);
        let mut shift = Vec::with_capacity(self.ch);
        for c in 0..self.ch {
            let s = g[c] / (rv[c] + eps).sqrt();
            scale.push(s);
            shift.push(b[c] - rm[c] * s);
        }
        t.channel_affine(x, scale, shift)
    }
}

/// Exponential-moving-average update of one batchnorm's running statistics.
pub fn apply_bn_update<E: Elem>(
    p: &mut Params<E>,
    bn_name: &str,
    stats: &BnStats<E>,
    momentum: f64,
) {
    let m = E::from_f64(momentum);
    let one = E::one();
    let rm = &mut p.get_mut(&format!("{bn_name}.rmean")).unwrap().data;
    for (r, &b) in rm.iter_mut().zip(&stats.mean) {
        *r = (one - m) * *r + m * b;
    }
    let rv = &mut p.get_mut(&format!("{bn_name}.rvar")).unwrap().data;
    for (r, &b) in rv.iter_mut().zip(&stats.var) {
        *r = (one - m) * *r + m * b;
    }
}

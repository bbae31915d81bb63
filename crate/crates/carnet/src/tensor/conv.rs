//! Spatial ops: (transposed) convolution, batch normalization, pooling,
//! separable blur, shifts, and the small per-pixel contractions used by the
//! local self-attention block.
//!
//! All spatial tensors are `(N, C, H, W)` row-major. Convolutions parallelize
//! over disjoint `(n, out-channel)` output slices, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use super::tape::{BackFn, Node, Tape, Var};
use super::{shape_err, Elem, Result};

/// Batch statistics produced by a training-mode batchnorm, for running-stat
/// updates owned by the caller.
#[derive(Debug, Clone)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    /// Biased (population) variance over `(N,H,W)`.
    pub var: Vec<E>,
}

#[inline]
fn ox_bounds(extent: usize, pad: usize, kx: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > kx {
        (pad - kx + stride - 1) / stride
    } else {
        0
    };
    let hi = ((extent - 1 + pad - kx) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

impl<E: Elem> Tape<E> {
    /// 2-D convolution. `x:(n,c,h,w)`, `w:(o,c,k,k)`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return shape_err("conv2d", format!("x {sx:?} vs w {sw:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d", format!("non-positive output size for x {sx:?}, k {k}, pad {pad}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let needs = self.needs_grad(x) || self.needs_grad(w);
        let y = self.with_value(x, |vx| {
            self.with_value(w, |vw| {
                let mut y = vec![E::zero(); n * o * ho * wo];
                y.par_chunks_mut(ho * wo).enumerate().for_each(|(ci_chunk, yout)| {
                    let ni = ci_chunk / o;
                    let oi = ci_chunk % o;
                    conv_fwd_one(yout, vx, vw, ni, oi, c, h, wd, o, k, stride, pad, ho, wo);
                });
                y
            })
        });
        let back = needs.then(|| {
            let (nx, nw) = (x.0, w.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vx = &nodes[nx].data;
                let vw = &nodes[nw].data;
                if nodes[nx].needs_grad {
                    let gx = store.acc(nx, vx.len());
                    gx.par_chunks_mut(c * h * wd).enumerate().for_each(|(ni, gxn)| {
                        conv_bwd_input(gxn, g, vw, ni, c, h, wd, o, k, stride, pad, ho, wo);
                    });
                }
                if nodes[nw].needs_grad {
                    let partials: Vec<Vec<E>> = (0..n)
                        .into_par_iter()
                        .map(|ni| {
                            let mut gw = vec![E::zero(); o * c * k * k];
                            conv_bwd_weight(&mut gw, g, vx, ni, c, h, wd, o, k, stride, pad, ho, wo);
                            gw
                        })
                        .collect();
                    let gw = store.acc(nw, vw.len());
                    for p in &partials {
                        for (a, b) in gw.iter_mut().zip(p) {
                            *a += *b;
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, o, ho, wo], y, needs, back))
    }

    /// Transposed 2-D convolution. `x:(n,c,h,w)`, `w:(c,o,k,k)`.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return shape_err("conv2d_transpose", format!("x {sx:?} vs w {sw:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[1], sw[2]);
        if (h - 1) * stride + k + out_pad <= 2 * pad {
            return shape_err("conv2d_transpose", format!("non-positive output size for x {sx:?}"));
        }
        let ho = (h - 1) * stride + k + out_pad - 2 * pad;
        let wo = (wd - 1) * stride + k + out_pad - 2 * pad;
        let needs = self.needs_grad(x) || self.needs_grad(w);
        let y = self.with_value(x, |vx| {
            self.with_value(w, |vw| {
                let mut y = vec![E::zero(); n * o * ho * wo];
                y.par_chunks_mut(ho * wo).enumerate().for_each(|(chunk, yout)| {
                    let ni = chunk / o;
                    let oi = chunk % o;
                    tconv_fwd_one(yout, vx, vw, ni, oi, c, h, wd, o, k, stride, pad, ho, wo);
                });
                y
            })
        });
        let back = needs.then(|| {
            let (nx, nw) = (x.0, w.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vx = &nodes[nx].data;
                let vw = &nodes[nw].data;
                if nodes[nx].needs_grad {
                    let gx = store.acc(nx, vx.len());
                    gx.par_chunks_mut(c * h * wd).enumerate().for_each(|(ni, gxn)| {
                        tconv_bwd_input(gxn, g, vw, ni, c, h, wd, o, k, stride, pad, ho, wo);
                    });
                }
                if nodes[nw].needs_grad {
                    let partials: Vec<Vec<E>> = (0..n)
                        .into_par_iter()
                        .map(|ni| {
                            let mut gw = vec![E::zero(); c * o * k * k];
                            tconv_bwd_weight(&mut gw, g, vx, ni, c, h, wd, o, k, stride, pad, ho, wo);
                            gw
                        })
                        .collect();
                    let gw = store.acc(nw, vw.len());
                    for p in &partials {
                        for (a, b) in gw.iter_mut().zip(p) {
                            *a += *b;
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, o, ho, wo], y, needs, back))
    }

    /// Add a per-channel bias to `(n,c,h,w)`.
    pub fn bias_channel(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb != [sx[1]] {
            return shape_err("bias_channel", format!("x {sx:?} vs b {sb:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let needs = self.needs_grad(x) || self.needs_grad(b);
        let y = self.with_value(x, |vx| {
            self.with_value(b, |vb| {
                let mut y = vx.to_vec();
                for ni in 0..n {
                    for ci in 0..c {
                        let bias = vb[ci];
                        for t in &mut y[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                            *t += bias;
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (nx, nb) = (x.0, b.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                if nodes[nx].needs_grad {
                    let gx = store.acc(nx, nodes[nx].data.len());
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut s = E::zero();
                            for &gv in &g[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                                s += gv;
                            }
                            gb[ci] += s;
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(sx, y, needs, back))
    }

    /// Training-mode batch normalization over `(N,H,W)` per channel.
    /// Returns the normalized output and the batch statistics.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnStats<E>)> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 4 || sg != [sx[1]] || sb != [sx[1]] {
            return shape_err("batchnorm2d", format!("x {sx:?}, gamma {sg:?}, beta {sb:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let m = n * hw;
        assert!(m >= 1, "batchnorm2d: empty batch");
        let inv_m = E::from_f64(1.0 / m as f64);
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        let mut xhat = vec![E::zero(); n * c * hw];
        let mut invstd = vec![E::zero(); c];
        let y = self.with_value(x, |vx| {
            for ci in 0..c {
                let mut s = E::zero();
                for ni in 0..n {
                    for &v in &vx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                        s += v;
                    }
                }
                let mu = s * inv_m;
                let mut vs = E::zero();
                for ni in 0..n {
                    for &v in &vx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                        let d = v - mu;
                        vs += d * d;
                    }
                }
                let va = vs * inv_m;
                mean[ci] = mu;
                var[ci] = va;
                invstd[ci] = E::one() / (va + E::from_f64(eps)).sqrt();
            }
            self.with_value(gamma, |vg| {
                self.with_value(beta, |vb| {
                    let mut y = vec![E::zero(); vx.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let (mu, is) = (mean[ci], invstd[ci]);
                            let (ga, be) = (vg[ci], vb[ci]);
                            for t in 0..hw {
                                let xh = (vx[base + t] - mu) * is;
                                xhat[base + t] = xh;
                                y[base + t] = ga * xh + be;
                            }
                        }
                    }
                    y
                })
            })
        });
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let stats = BnStats {
            mean,
            var: var.clone(),
        };
        let back = needs.then(|| {
            let (nx, ng, nb) = (x.0, gamma.0, beta.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                // per channel: dβ = Σg, dγ = Σ g·x̂,
                // dx = γ·invstd/m · (m·g − Σg − x̂·Σ(g·x̂))
                let mut gsum = vec![E::zero(); c];
                let mut gxsum = vec![E::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for t in 0..hw {
                            gsum[ci] += g[base + t];
                            gxsum[ci] += g[base + t] * xhat[base + t];
                        }
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, c);
                    for ci in 0..c {
                        gb[ci] += gsum[ci];
                    }
                }
                if nodes[ng].needs_grad {
                    let gg = store.acc(ng, c);
                    for ci in 0..c {
                        gg[ci] += gxsum[ci];
                    }
                }
                if nodes[nx].needs_grad {
                    let vg = &nodes[ng].data;
                    let gx = store.acc(nx, nodes[nx].data.len());
                    let me = E::from_f64(m as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let coef = vg[ci] * invstd[ci] * inv_m;
                            for t in 0..hw {
                                gx[base + t] += coef
                                    * (me * g[base + t] - gsum[ci] - xhat[base + t] * gxsum[ci]);
                            }
                        }
                    }
                }
            });
            bx
        });
        let out = self.push(sx, y, needs, back);
        Ok((out, stats))
    }

    /// Eval-mode batch normalization folded into a per-channel affine:
    /// `y = x*scale[c] + shift[c]` with constants derived from running stats.
    pub fn channel_affine(&self, x: Var, scale: Vec<E>, shift: Vec<E>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || scale.len() != sx[1] || shift.len() != sx[1] {
            return shape_err("channel_affine", format!("x {sx:?} vs {} channels", scale.len()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |vx| {
            let mut y = vec![E::zero(); vx.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for t in 0..hw {
                        y[base + t] = vx[base + t] * scale[ci] + shift[ci];
                    }
                }
            }
            y
        });
        let back = needs.then(|| {
            let nx = x.0;
            let sc = scale.clone();
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for t in 0..hw {
                            gx[base + t] += g[base + t] * sc[ci];
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(sx, y, needs, back))
    }

    /// 2×2 average pooling, stride 2. Requires even spatial dims.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return shape_err("avg_pool2", format!("need even (h,w), got {sx:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / 2, wd / 2);
        let needs = self.needs_grad(x);
        let quarter = E::from_f64(0.25);
        let y = self.with_value(x, |vx| {
            let mut y = vec![E::zero(); n * c * ho * wo];
            for nc in 0..n * c {
                let xb = nc * h * wd;
                let yb = nc * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i = xb + 2 * oy * wd + 2 * ox;
                        y[yb + oy * wo + ox] =
                            (vx[i] + vx[i + 1] + vx[i + wd] + vx[i + wd + 1]) * quarter;
                    }
                }
            }
            y
        });
        let back = needs.then(|| {
            let nx = x.0;
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for nc in 0..n * c {
                    let xb = nc * h * wd;
                    let yb = nc * ho * wo;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gq = g[yb + oy * wo + ox] * quarter;
                            let i = xb + 2 * oy * wd + 2 * ox;
                            gx[i] += gq;
                            gx[i + 1] += gq;
                            gx[i + wd] += gq;
                            gx[i + wd + 1] += gq;
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, c, ho, wo], y, needs, back))
    }

    /// Separable valid-window blur with a fixed symmetric 1-D kernel.
    /// Output is `(n, c, h-K+1, w-K+1)`.
    pub fn blur2d_valid(&self, x: Var, kernel: &[E]) -> Result<Var> {
        let sx = self.shape(x);
        let kk = kernel.len();
        if sx.len() != 4 || sx[2] < kk || sx[3] < kk {
            return shape_err("blur2d_valid", format!("x {sx:?} too small for window {kk}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (h2, w2) = (h - kk + 1, wd - kk + 1);
        let needs = self.needs_grad(x);
        let kern = kernel.to_vec();
        let y = self.with_value(x, |vx| {
            let mut tmp = vec![E::zero(); n * c * h * w2];
            for nc in 0..n * c {
                for iy in 0..h {
                    let row = &vx[nc * h * wd + iy * wd..][..wd];
                    let orow = &mut tmp[nc * h * w2 + iy * w2..][..w2];
                    for ox in 0..w2 {
                        let mut s = E::zero();
                        for (t, &kv) in kern.iter().enumerate() {
                            s += row[ox + t] * kv;
                        }
                        orow[ox] = s;
                    }
                }
            }
            let mut y = vec![E::zero(); n * c * h2 * w2];
            for nc in 0..n * c {
                for oy in 0..h2 {
                    let orow = &mut y[nc * h2 * w2 + oy * w2..][..w2];
                    for (t, &kv) in kern.iter().enumerate() {
                        let irow = &tmp[nc * h * w2 + (oy + t) * w2..][..w2];
                        for ox in 0..w2 {
                            orow[ox] += irow[ox] * kv;
                        }
                    }
                }
            }
            y
        });
        let back = needs.then(|| {
            let nx = x.0;
            let kern = kernel.to_vec();
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                // adjoint of each valid 1-D pass is a scatter with the same kernel
                let mut tmp = vec![E::zero(); n * c * h * w2];
                for nc in 0..n * c {
                    for oy in 0..h2 {
                        let grow = &g[nc * h2 * w2 + oy * w2..][..w2];
                        for (t, &kv) in kern.iter().enumerate() {
                            let trow = &mut tmp[nc * h * w2 + (oy + t) * w2..][..w2];
                            for ox in 0..w2 {
                                trow[ox] += grow[ox] * kv;
                            }
                        }
                    }
                }
                let gx = store.acc(nx, nodes[nx].data.len());
                for nc in 0..n * c {
                    for iy in 0..h {
                        let trow = &tmp[nc * h * w2 + iy * w2..][..w2];
                        let gxrow = &mut gx[nc * h * wd + iy * wd..][..wd];
                        for ox in 0..w2 {
                            let gv = trow[ox];
                            for (t, &kv) in kern.iter().enumerate() {
                                gxrow[ox + t] += gv * kv;
                            }
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, c, h2, w2], y, needs, back))
    }

    /// Spatial shift with zero fill: `out[y,x] = in[y+dy, x+dx]` where valid.
    pub fn shift2d(&self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return shape_err("shift2d", format!("want (n,c,h,w), got {sx:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |vx| {
            let mut y = vec![E::zero(); vx.len()];
            for nc in 0..n * c {
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wd {
                        let ix = ox as isize + dx;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        y[nc * h * wd + oy * wd + ox] =
                            vx[nc * h * wd + iy as usize * wd + ix as usize];
                    }
                }
            }
            y
        });
        let back = needs.then(|| {
            let nx = x.0;
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for nc in 0..n * c {
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wd {
                            let ix = ox as isize + dx;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gx[nc * h * wd + iy as usize * wd + ix as usize] +=
                                g[nc * h * wd + oy * wd + ox];
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(sx, y, needs, back))
    }

    /// Per-pixel channel contraction of two `(n,c,h,w)` maps -> `(n,1,h,w)`.
    pub fn map_dot(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.len() != 4 {
            return shape_err("map_dot", format!("{sa:?} vs {sb:?}"));
        }
        let (n, c, h, wd) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * wd;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let y = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let mut y = vec![E::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for t in 0..hw {
                            y[ni * hw + t] += va[base + t] * vb[base + t];
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (na, nb) = (a.0, b.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let (va, vb) = (&nodes[na].data, &nodes[nb].data);
                if nodes[na].needs_grad {
                    let ga = store.acc(na, va.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for t in 0..hw {
                                ga[base + t] += g[ni * hw + t] * vb[base + t];
                            }
                        }
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, vb.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for t in 0..hw {
                                gb[base + t] += g[ni * hw + t] * va[base + t];
                            }
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, 1, h, wd], y, needs, back))
    }

    /// Per-pixel dot of a `(n,c,h,w)` map with a `(c,)` vector -> `(n,1,h,w)`.
    pub fn channel_dot(&self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 4 || sv != [sx[1]] {
            return shape_err("channel_dot", format!("x {sx:?} vs v {sv:?}"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let needs = self.needs_grad(x) || self.needs_grad(v);
        let y = self.with_value(x, |vx| {
            self.with_value(v, |vv| {
                let mut y = vec![E::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let vc = vv[ci];
                        for t in 0..hw {
                            y[ni * hw + t] += vx[base + t] * vc;
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (nx, nv) = (x.0, v.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vx = &nodes[nx].data;
                let vv = &nodes[nv].data;
                if nodes[nx].needs_grad {
                    let gx = store.acc(nx, vx.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for t in 0..hw {
                                gx[base + t] += g[ni * hw + t] * vv[ci];
                            }
                        }
                    }
                }
                if nodes[nv].needs_grad {
                    let gv = store.acc(nv, c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = E::zero();
                            for t in 0..hw {
                                s += g[ni * hw + t] * vx[base + t];
                            }
                            gv[ci] += s;
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, 1, h, wd], y, needs, back))
    }

    /// Multiply a `(n,1,h,w)` weight map into every channel of `(n,c,h,w)`.
    pub fn mul_bcast_c(&self, wmap: Var, v: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(wmap), self.shape(v));
        if sw.len() != 4 || sv.len() != 4 || sw[1] != 1 || sw[0] != sv[0] || sw[2..] != sv[2..] {
            return shape_err("mul_bcast_c", format!("w {sw:?} vs v {sv:?}"));
        }
        let (n, c, h, wd) = (sv[0], sv[1], sv[2], sv[3]);
        let hw = h * wd;
        let needs = self.needs_grad(wmap) || self.needs_grad(v);
        let y = self.with_value(wmap, |vw| {
            self.with_value(v, |vv| {
                let mut y = vec![E::zero(); vv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for t in 0..hw {
                            y[base + t] = vv[base + t] * vw[ni * hw + t];
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (nw, nv) = (wmap.0, v.0);
            let bx: BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vw = &nodes[nw].data;
                let vv = &nodes[nv].data;
                if nodes[nw].needs_grad {
                    let gw = store.acc(nw, vw.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for t in 0..hw {
                                gw[ni * hw + t] += g[base + t] * vv[base + t];
                            }
                        }
                    }
                }
                if nodes[nv].needs_grad {
                    let gv = store.acc(nv, vv.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for t in 0..hw {
                                gv[base + t] += g[base + t] * vw[ni * hw + t];
                            }
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(sv, y, needs, back))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd_one<E: Elem>(
    yout: &mut [E],
    vx: &[E],
    vw: &[E],
    ni: usize,
    oi: usize,
    c: usize,
    h: usize,
    wd: usize,
    _o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let xbase = ni * c * h * wd;
    for ci in 0..c {
        let xc = &vx[xbase + ci * h * wd..][..h * wd];
        let wc = &vw[(oi * c + ci) * k * k..][..k * k];
        for ky in 0..k {
            let (oy_lo, oy_hi) = ox_bounds(h, pad, ky, stride, ho);
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                let (ox_lo, ox_hi) = ox_bounds(wd, pad, kx, stride, wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let xrow = &xc[iy * wd..][..wd];
                    let yrow = &mut yout[oy * wo..][..wo];
                    for ox in ox_lo..ox_hi {
                        yrow[ox] += wv * xrow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_input<E: Elem>(
    gxn: &mut [E],
    g: &[E],
    vw: &[E],
    ni: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for oi in 0..o {
        let gout = &g[(ni * o + oi) * ho * wo..][..ho * wo];
        for ci in 0..c {
            let gxc = &mut gxn[ci * h * wd..][..h * wd];
            let wc = &vw[(oi * c + ci) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = ox_bounds(h, pad, ky, stride, ho);
                for kx in 0..k {
                    let wv = wc[ky * k + kx];
                    let (ox_lo, ox_hi) = ox_bounds(wd, pad, kx, stride, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gout[oy * wo..][..wo];
                        let gxrow = &mut gxc[iy * wd..][..wd];
                        for ox in ox_lo..ox_hi {
                            gxrow[ox * stride + kx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_weight<E: Elem>(
    gw: &mut [E],
    g: &[E],
    vx: &[E],
    ni: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let xbase = ni * c * h * wd;
    for oi in 0..o {
        let gout = &g[(ni * o + oi) * ho * wo..][..ho * wo];
        for ci in 0..c {
            let xc = &vx[xbase + ci * h * wd..][..h * wd];
            let gwc = &mut gw[(oi * c + ci) * k * k..][..k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = ox_bounds(h, pad, ky, stride, ho);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = ox_bounds(wd, pad, kx, stride, wo);
                    let mut s = E::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gout[oy * wo..][..wo];
                        let xrow = &xc[iy * wd..][..wd];
                        for ox in ox_lo..ox_hi {
                            s += grow[ox] * xrow[ox * stride + kx - pad];
                        }
                    }
                    gwc[ky * k + kx] += s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv_fwd_one<E: Elem>(
    yout: &mut [E],
    vx: &[E],
    vw: &[E],
    ni: usize,
    oi: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        let xc = &vx[(ni * c + ci) * h * wd..][..h * wd];
        let wc = &vw[(ci * o + oi) * k * k..][..k * k];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                for iy in 0..h {
                    let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let xrow = &xc[iy * wd..][..wd];
                    let yrow = &mut yout[oy as usize * wo..][..wo];
                    for ix in 0..wd {
                        let ox = ix as isize * stride as isize + kx as isize - pad as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        yrow[ox as usize] += wv * xrow[ix];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv_bwd_input<E: Elem>(
    gxn: &mut [E],
    g: &[E],
    vw: &[E],
    ni: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        let gxc = &mut gxn[ci * h * wd..][..h * wd];
        for oi in 0..o {
            let gout = &g[(ni * o + oi) * ho * wo..][..ho * wo];
            let wc = &vw[(ci * o + oi) * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wc[ky * k + kx];
                    for iy in 0..h {
                        let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let grow = &gout[oy as usize * wo..][..wo];
                        let gxrow = &mut gxc[iy * wd..][..wd];
                        for ix in 0..wd {
                            let ox = ix as isize * stride as isize + kx as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            gxrow[ix] += wv * grow[ox as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv_bwd_weight<E: Elem>(
    gw: &mut [E],
    g: &[E],
    vx: &[E],
    ni: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        let xc = &vx[(ni * c + ci) * h * wd..][..h * wd];
        for oi in 0..o {
            let gout = &g[(ni * o + oi) * ho * wo..][..ho * wo];
            let gwc = &mut gw[(ci * o + oi) * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let mut s = E::zero();
                    for iy in 0..h {
                        let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let grow = &gout[oy as usize * wo..][..wo];
                        let xrow = &xc[iy * wd..][..wd];
                        for ix in 0..wd {
                            let ox = ix as isize * stride as isize + kx as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            s += grow[ox as usize] * xrow[ix];
                        }
                    }
                    gwc[ky * k + kx] += s;
                }
            }
        }
    }
}

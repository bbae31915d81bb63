//! Local single-headed self-attention over a k×k pixel neighborhood, with
//! optional relative-position scores:
//!
//!   y_ij = Σ_{ab∈N_k(ij)} softmax_ab(q_ij·k_ab [+ q_ij·r_{a−i,b−j}]) v_ab
//!
//! q/k/v are 1×1 convolutions of the input; the relative vector is the
//! concatenation of a row embedding and a column embedding, each `d_out/2`
//! wide. Borders are zero-padded so every pixel sees a full neighborhood.

use rand_chacha::ChaCha8Rng;

use super::init::{normal_scaled, uniform_fan_in};
use crate::tensor::{Elem, Params, Result, Tape, TensorError, Var};

#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
    pub relative: bool,
}

impl SelfAttention2d {
    pub fn new(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        k: usize,
        relative: bool,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(TensorError::Shape {
                op: "self_attention",
                details: format!("neighborhood extent must be odd, got {k}"),
            });
        }
        if relative && d_out % 2 != 0 {
            return Err(TensorError::Shape {
                op: "self_attention",
                details: format!("relative embeddings need even d_out, got {d_out}"),
            });
        }
        Ok(SelfAttention2d {
            name: name.into(),
            d_in,
            d_out,
            k,
            relative,
        })
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        let shape = [self.d_out, self.d_in, 1, 1];
        for m in ["wq", "wk", "wv"] {
            p.insert(
                format!("{}.{m}", self.name),
                uniform_fan_in(&shape, self.d_in, rng),
            );
        }
        if self.relative {
            let std = 1.0 / (self.d_out as f64).sqrt();
            p.insert(
                format!("{}.rrow", self.name),
                normal_scaled(&[self.k, self.d_out / 2], std, rng),
            );
            p.insert(
                format!("{}.rcol", self.name),
                normal_scaled(&[self.k, self.d_out / 2], std, rng),
            );
        }
    }

    /// Forward on `(n, d_in, h, w)` -> `(n, d_out, h, w)`.
    pub fn forward<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let bind = |n: String| {
            if trainable {
                t.param(p, &n)
            } else {
                t.param_frozen(p, &n)
            }
        };
        let wq = bind(format!("{}.wq", self.name))?;
        let wk = bind(format!("{}.wk", self.name))?;
        let wv = bind(format!("{}.wv", self.name))?;
        let q = t.conv2d(x, wq, 1, 0)?;
        let kmap = t.conv2d(x, wk, 1, 0)?;
        let vmap = t.conv2d(x, wv, 1, 0)?;

        let hk = (self.k as isize - 1) / 2;
        let rel = if self.relative {
            Some((
                bind(format!("{}.rrow", self.name))?,
                bind(format!("{}.rcol", self.name))?,
            ))
        } else {
            None
        };
        let d2 = self.d_out / 2;

        let mut offsets = Vec::new();
        let mut scores: Option<Var> = None;
        for dy in -hk..=hk {
            for dx in -hk..=hk {
                offsets.push((dy, dx));
                let kn = t.shift2d(kmap, dy, dx)?;
                let mut s = t.map_dot(q, kn)?;
                if let Some((rrow, rcol)) = rel {
                    let ri = (dy + hk) as usize;
                    let ci = (dx + hk) as usize;
                    let rr = t.reshape(t.slice(rrow, 0, ri, ri + 1)?, &[d2])?;
                    let rc = t.reshape(t.slice(rcol, 0, ci, ci + 1)?, &[d2])?;
                    let rvec = t.concat(0, rr, rc)?;
                    s = t.add(s, t.channel_dot(q, rvec)?)?;
                }
                scores = Some(match scores {
                    None => s,
                    Some(acc) => t.concat(1, acc, s)?,
                });
            }
        }
        let weights = t.softmax(scores.unwrap(), 1)?;

        let mut y: Option<Var> = None;
        for (idx, &(dy, dx)) in offsets.iter().enumerate() {
            let wmap = t.slice(weights, 1, idx, idx + 1)?;
            let vn = t.shift2d(vmap, dy, dx)?;
            let term = t.mul_bcast_c(wmap, vn)?;
            y = Some(match y {
                None => term,
                Some(acc) => t.add(acc, term)?,
            });
        }
        Ok(y.unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};
    use rand::Rng;

    #[test]
    fn even_extent_rejected() {
        assert!(SelfAttention2d::new("a", 2, 4, 2, false).is_err());
        assert!(SelfAttention2d::new("a", 2, 3, 3, true).is_err());
    }

    #[test]
    fn singleton_neighborhood_is_value_projection() {
        let att = SelfAttention2d::new("att", 3, 4, 1, false).unwrap();
        let mut p: Params<f64> = Params::new();
        let mut rng = rng_stream(4, stream::TEST);
        att.register(&mut p, &mut rng);
        let t: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..3 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t.leaf(&[1, 3, 5, 5], data);
        let y = att.forward(&t, &p, x, true).unwrap();
        let wv = t.param(&p, "att.wv").unwrap();
        let direct = t.conv2d(x, wv, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(direct));
    }

    /// Naive per-pixel reference with explicit zero padding.
    fn naive(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        p: &Params<f64>,
        att: &SelfAttention2d,
    ) -> Vec<f64> {
        let d = att.d_out;
        let proj = |m: &str, ci: usize, cj: usize| p.get(m).unwrap().data[ci * c + cj];
        let pix = |cj: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                0.0
            } else {
                x[cj * h * w + y as usize * w + xx as usize]
            }
        };
        let project = |m: &str, y: isize, xx: isize| -> Vec<f64> {
            (0..d)
                .map(|ci| (0..c).map(|cj| proj(m, ci, cj) * pix(cj, y, xx)).sum())
                .collect()
        };
        let hk = (att.k as isize - 1) / 2;
        let mut out = vec![0.0; d * h * w];
        for iy in 0..h as isize {
            for ix in 0..w as isize {
                let q = project("att.wq", iy, ix);
                let mut sc = Vec::new();
                let mut vals = Vec::new();
                for dy in -hk..=hk {
                    for dx in -hk..=hk {
                        let kv = project("att.wk", iy + dy, ix + dx);
                        let mut s: f64 = q.iter().zip(&kv).map(|(a, b)| a * b).sum();
                        if att.relative {
                            let rr = &p.get("att.rrow").unwrap().data
                                [(dy + hk) as usize * d / 2..][..d / 2];
                            let rc = &p.get("att.rcol").unwrap().data
                                [(dx + hk) as usize * d / 2..][..d / 2];
                            let rvec: Vec<f64> = rr.iter().chain(rc).copied().collect();
                            s += q.iter().zip(&rvec).map(|(a, b)| a * b).sum::<f64>();
                        }
                        sc.push(s);
                        vals.push(project("att.wv", iy + dy, ix + dx));
                    }
                }
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let es: Vec<f64> = sc.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = es.iter().sum();
                for ci in 0..d {
                    let yv: f64 = es
                        .iter()
                        .zip(&vals)
                        .map(|(e, v)| e / z * v[ci])
                        .sum();
                    out[ci * h * w + (iy as usize) * w + ix as usize] = yv;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        for relative in [false, true] {
            let att = SelfAttention2d::new("att", 3, 4, 3, relative).unwrap();
            let mut p: Params<f64> = Params::new();
            let mut rng = rng_stream(5, stream::TEST);
            att.register(&mut p, &mut rng);
            let data: Vec<f64> = (0..3 * 30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Tape<f64> = Tape::new();
            let x = t.leaf(&[1, 3, 5, 6], data.clone());
            let y = att.forward(&t, &p, x, true).unwrap();
            assert_eq!(t.shape(y), vec![1, 4, 5, 6]);
            let want = naive(&data, (3, 5, 6), &p, &att);
            for (a, b) in t.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b} (relative={relative})");
            }
        }
    }
}

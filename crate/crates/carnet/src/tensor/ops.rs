//! Elementwise, linear-algebra, shape and reduction ops.
//!
//! Broadcasting is limited to trailing-dimension expansion: in a binary op the
//! smaller operand's shape must equal the trailing dimensions of the larger
//! one; anything fancier is a shape error.

use super::tape::{Node, Tape, Var};
use super::{numel, shape_err, Elem, Result, TensorError};

#[derive(Clone, Copy)]
enum Bcast {
    Equal,
    /// rhs is broadcast over the leading dims of lhs
    RightSmall,
    /// lhs is broadcast over the leading dims of rhs
    LeftSmall,
}

fn bcast_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Equal));
    }
    if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        return Ok((a.to_vec(), Bcast::RightSmall));
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        return Ok((b.to_vec(), Bcast::LeftSmall));
    }
    shape_err(op, format!("{a:?} vs {b:?}"))
}

/// (outer, len, inner) view of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn sigmoid_stable<E: Elem>(x: E) -> E {
    if x.to_f64() >= 0.0 {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<E: Elem> Tape<E> {
    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        // (a_val, b_val, g_out) -> (grad_a, grad_b)
        df: impl Fn(E, E, E) -> (E, E) + 'static,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (out_shape, plan) = bcast_plan(op, &sa, &sb)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let n = numel(&out_shape);
                let mut y = Vec::with_capacity(n);
                match plan {
                    Bcast::Equal => {
                        for i in 0..n {
                            y.push(f(va[i], vb[i]));
                        }
                    }
                    Bcast::RightSmall => {
                        let r = vb.len();
                        for i in 0..n {
                            y.push(f(va[i], vb[i % r]));
                        }
                    }
                    Bcast::LeftSmall => {
                        let r = va.len();
                        for i in 0..n {
                            y.push(f(va[i % r], vb[i]));
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (na, nb) = (a.0, b.0);
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let (va, vb) = (&nodes[na].data, &nodes[nb].data);
                let (la, lb) = (va.len(), vb.len());
                let ga_needed = nodes[na].needs_grad;
                let gb_needed = nodes[nb].needs_grad;
                if ga_needed {
                    let ga = store.acc(na, la);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (i % la.max(1), i % lb.max(1));
                        let (da, _) = df(va[ia], vb[ib], gi);
                        ga[ia] += da;
                    }
                }
                if gb_needed {
                    let gb = store.acc(nb, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (i % la.max(1), i % lb.max(1));
                        let (_, db) = df(va[ia], vb[ib], gi);
                        gb[ib] += db;
                    }
                }
            });
            bx
        });
        Ok(self.push(out_shape, out, needs, back))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Elementwise division; denominators must be nonzero and finite.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let guard_ok = self.with_value(b, |vb| {
            vb.iter().all(|x| x.is_finite_e() && x.to_f64() != 0.0)
        });
        if !guard_ok {
            return Err(TensorError::DivisionGuard { op: "div" });
        }
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(E) -> E,
        // (x_val, y_val, g_out) -> grad_x
        df: impl Fn(E, E, E) -> E + 'static,
    ) -> Var {
        let shape = self.shape(x);
        let needs = self.needs_grad(x);
        let y: Vec<E> = self.with_value(x, |v| v.iter().map(|&e| f(e)).collect());
        let ycopy = needs.then(|| y.clone());
        let back = needs.then(|| {
            let nx = x.0;
            let y = ycopy.unwrap();
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vx = &nodes[nx].data;
                let gx = store.acc(nx, vx.len());
                for i in 0..vx.len() {
                    gx[i] += df(vx[i], y[i], g[i]);
                }
            });
            bx
        });
        self.push(shape, y, needs, back)
    }

    /// `a*x + b` with scalar constants.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Var {
        let (ae, be) = (E::from_f64(a), E::from_f64(b));
        self.unary(x, move |v| ae * v + be, move |_, _, g| g * ae)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max_e(E::zero()),
            |v, _, g| if v.to_f64() > 0.0 { g } else { E::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_stable, |_, y, g| g * y * (E::one() - y))
    }

    pub fn tanh_act(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y, g| g * (E::one() - y * y))
    }

    /// `max(x,0)^p`; the subgradient at the clamp is taken as zero.
    pub fn pow_clamped(&self, x: Var, p: f64) -> Var {
        let pe = E::from_f64(p);
        let eps = 1e-12;
        self.unary(
            x,
            move |v| v.max_e(E::zero()).powf(pe),
            move |v, y, g| {
                if v.to_f64() > eps {
                    g * pe * y / v
                } else {
                    E::zero()
                }
            },
        )
    }

    /// Matrix product `(m,k)·(k,n) -> (m,n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let y = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let mut y = vec![E::zero(); m * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = va[i * k + l];
                        let brow = &vb[l * n..(l + 1) * n];
                        let yrow = &mut y[i * n..(i + 1) * n];
                        for j in 0..n {
                            yrow[j] += ail * brow[j];
                        }
                    }
                }
                y
            })
        });
        let back = needs.then(|| {
            let (na, nb) = (a.0, b.0);
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let (va, vb) = (&nodes[na].data, &nodes[nb].data);
                if nodes[na].needs_grad {
                    let ga = store.acc(na, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = E::zero();
                            for j in 0..n {
                                s += g[i * n + j] * vb[l * n + j];
                            }
                            ga[i * k + l] += s;
                        }
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, k * n);
                    for i in 0..m {
                        for l in 0..k {
                            let ail = va[i * k + l];
                            for j in 0..n {
                                gb[l * n + j] += ail * g[i * n + j];
                            }
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![m, n], y, needs, back))
    }

    /// Fully connected layer `y = x·wᵀ (+ b)` with `x:(n,i)`, `w:(o,i)`, `b:(o,)`.
    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return shape_err("dense", format!("x {sx:?} vs w {sw:?}"));
        }
        if let Some(bv) = b {
            let sb = self.shape(bv);
            if sb != [sw[0]] {
                return shape_err("dense", format!("bias {sb:?} vs out {}", sw[0]));
            }
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || b.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        let y = self.with_value(x, |vx| {
            self.with_value(w, |vw| {
                let mut y = vec![E::zero(); n * o];
                for r in 0..n {
                    let xrow = &vx[r * i..(r + 1) * i];
                    let yrow = &mut y[r * o..(r + 1) * o];
                    for c in 0..o {
                        let wrow = &vw[c * i..(c + 1) * i];
                        let mut s = E::zero();
                        for t in 0..i {
                            s += xrow[t] * wrow[t];
                        }
                        yrow[c] = s;
                    }
                }
                y
            })
        });
        let y = match b {
            Some(bv) => self.with_value(bv, |vb| {
                let mut y = y;
                for r in 0..n {
                    for c in 0..o {
                        y[r * o + c] += vb[c];
                    }
                }
                y
            }),
            None => y,
        };
        let back = needs.then(|| {
            let (nx, nw, nb) = (x.0, w.0, b.map(|bv| bv.0));
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let vx = &nodes[nx].data;
                let vw = &nodes[nw].data;
                if nodes[nx].needs_grad {
                    let gx = store.acc(nx, n * i);
                    for r in 0..n {
                        let grow = &g[r * o..(r + 1) * o];
                        let gxrow = &mut gx[r * i..(r + 1) * i];
                        for c in 0..o {
                            let gc = grow[c];
                            let wrow = &vw[c * i..(c + 1) * i];
                            for t in 0..i {
                                gxrow[t] += gc * wrow[t];
                            }
                        }
                    }
                }
                if nodes[nw].needs_grad {
                    let gw = store.acc(nw, o * i);
                    for r in 0..n {
                        let xrow = &vx[r * i..(r + 1) * i];
                        let grow = &g[r * o..(r + 1) * o];
                        for c in 0..o {
                            let gc = grow[c];
                            let gwrow = &mut gw[c * i..(c + 1) * i];
                            for t in 0..i {
                                gwrow[t] += gc * xrow[t];
                            }
                        }
                    }
                }
                if let Some(nb) = nb {
                    if nodes[nb].needs_grad {
                        let gb = store.acc(nb, o);
                        for r in 0..n {
                            for c in 0..o {
                                gb[c] += g[r * o + c];
                            }
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![n, o], y, needs, back))
    }

    /// Concatenate two tensors along `axis`.
    pub fn concat(&self, axis: usize, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter()
                .zip(&sb)
                .enumerate()
                .any(|(d, (x, y))| d != axis && x != y)
        {
            return shape_err("concat", format!("{sa:?} + {sb:?} on axis {axis}"));
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let y = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let mut y = Vec::with_capacity((la + lb) * outer * inner);
                for ou in 0..outer {
                    y.extend_from_slice(&va[ou * la * inner..(ou + 1) * la * inner]);
                    y.extend_from_slice(&vb[ou * lb * inner..(ou + 1) * lb * inner]);
                }
                y
            })
        });
        let back = needs.then(|| {
            let (na, nb) = (a.0, b.0);
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let stride = (la + lb) * inner;
                if nodes[na].needs_grad {
                    let ga = store.acc(na, outer * la * inner);
                    for ou in 0..outer {
                        for t in 0..la * inner {
                            ga[ou * la * inner + t] += g[ou * stride + t];
                        }
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, outer * lb * inner);
                    for ou in 0..outer {
                        for t in 0..lb * inner {
                            gb[ou * lb * inner + t] += g[ou * stride + la * inner + t];
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(out_shape, y, needs, back))
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack0(&self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return shape_err("stack0", "empty input list".into());
        }
        let s0 = self.shape(vars[0]);
        for &v in vars {
            if self.shape(v) != s0 {
                return shape_err("stack0", format!("{:?} vs {s0:?}", self.shape(v)));
            }
        }
        let inner = numel(&s0);
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&s0);
        let needs = vars.iter().any(|&v| self.needs_grad(v));
        let mut y = Vec::with_capacity(vars.len() * inner);
        for &v in vars {
            self.with_value(v, |d| y.extend_from_slice(d));
        }
        let back = needs.then(|| {
            let ids: Vec<usize> = vars.iter().map(|v| v.0).collect();
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                for (r, &id) in ids.iter().enumerate() {
                    if nodes[id].needs_grad {
                        let gv = store.acc(id, inner);
                        for t in 0..inner {
                            gv[t] += g[r * inner + t];
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(out_shape, y, needs, back))
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start >= end || end > s[axis] {
            return shape_err("slice", format!("{s:?} axis {axis} range {start}..{end}"));
        }
        let (outer, l, inner) = axis_split(&s, axis);
        let w = end - start;
        let mut out_shape = s.clone();
        out_shape[axis] = w;
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |v| {
            let mut y = Vec::with_capacity(outer * w * inner);
            for ou in 0..outer {
                let base = ou * l * inner + start * inner;
                y.extend_from_slice(&v[base..base + w * inner]);
            }
            y
        });
        let back = needs.then(|| {
            let nx = x.0;
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for ou in 0..outer {
                    let base = ou * l * inner + start * inner;
                    for t in 0..w * inner {
                        gx[base + t] += g[ou * w * inner + t];
                    }
                }
            });
            bx
        });
        Ok(self.push(out_shape, y, needs, back))
    }

    pub fn reshape(&self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(&s) != numel(new_shape) {
            return shape_err("reshape", format!("{s:?} -> {new_shape:?}"));
        }
        let needs = self.needs_grad(x);
        let y = self.value(x);
        let back = needs.then(|| {
            let nx = x.0;
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for (gi, go) in gx.iter_mut().zip(g) {
                    *gi += *go;
                }
            });
            bx
        });
        Ok(self.push(new_shape.to_vec(), y, needs, back))
    }

    pub fn reduce_sum(&self, x: Var) -> Var {
        self.reduce(x, false)
    }

    pub fn reduce_mean(&self, x: Var) -> Var {
        self.reduce(x, true)
    }

    fn reduce(&self, x: Var, mean: bool) -> Var {
        let n = self.len_of(x);
        let scale = if mean {
            E::from_f64(1.0 / n as f64)
        } else {
            E::one()
        };
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |v| {
            let mut s = E::zero();
            for &e in v {
                s += e;
            }
            vec![s * scale]
        });
        let back = needs.then(|| {
            let nx = x.0;
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                let gs = g[0] * scale;
                for gi in gx.iter_mut() {
                    *gi += gs;
                }
            });
            bx
        });
        self.push(vec![], y, needs, back)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return shape_err("softmax", format!("axis {axis} for shape {s:?}"));
        }
        let (outer, l, inner) = axis_split(&s, axis);
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |v| {
            let mut y = vec![E::zero(); v.len()];
            for ou in 0..outer {
                for ii in 0..inner {
                    let idx = |t: usize| ou * l * inner + t * inner + ii;
                    let mut mx = v[idx(0)];
                    for t in 1..l {
                        mx = mx.max_e(v[idx(t)]);
                    }
                    let mut sum = E::zero();
                    for t in 0..l {
                        let e = (v[idx(t)] - mx).exp();
                        y[idx(t)] = e;
                        sum += e;
                    }
                    for t in 0..l {
                        y[idx(t)] = y[idx(t)] / sum;
                    }
                }
            }
            y
        });
        let ycopy = y.clone();
        let back = needs.then(|| {
            let nx = x.0;
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for ou in 0..outer {
                    for ii in 0..inner {
                        let idx = |t: usize| ou * l * inner + t * inner + ii;
                        let mut dot = E::zero();
                        for t in 0..l {
                            dot += ycopy[idx(t)] * g[idx(t)];
                        }
                        for t in 0..l {
                            gx[idx(t)] += ycopy[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            });
            bx
        });
        Ok(self.push(s, y, needs, back))
    }

    /// Row-wise log-softmax for `(n,k)` logits (log-sum-exp stabilized).
    pub fn log_softmax_rows(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err("log_softmax", format!("want (n,k), got {s:?}"));
        }
        let (n, k) = (s[0], s[1]);
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |v| {
            let mut y = vec![E::zero(); v.len()];
            for r in 0..n {
                let row = &v[r * k..(r + 1) * k];
                let mut mx = row[0];
                for &e in row {
                    mx = mx.max_e(e);
                }
                let mut sum = E::zero();
                for &e in row {
                    sum += (e - mx).exp();
                }
                let lse = mx + sum.ln();
                for c in 0..k {
                    y[r * k + c] = row[c] - lse;
                }
            }
            y
        });
        let ycopy = y.clone();
        let back = needs.then(|| {
            let nx = x.0;
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for r in 0..n {
                    let mut gsum = E::zero();
                    for c in 0..k {
                        gsum += g[r * k + c];
                    }
                    for c in 0..k {
                        gx[r * k + c] += g[r * k + c] - ycopy[r * k + c].exp() * gsum;
                    }
                }
            });
            bx
        });
        Ok(self.push(s, y, needs, back))
    }

    /// Pick one entry per row: `out[r] = x[r, targets[r]]`.
    pub fn select_class(&self, x: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != targets.len() {
            return shape_err(
                "select_class",
                format!("logits {s:?} vs {} targets", targets.len()),
            );
        }
        let (n, k) = (s[0], s[1]);
        for &t in targets {
            if t >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_class",
                    index: t,
                    classes: k,
                });
            }
        }
        let needs = self.needs_grad(x);
        let y = self.with_value(x, |v| {
            targets
                .iter()
                .enumerate()
                .map(|(r, &t)| v[r * k + t])
                .collect()
        });
        let back = needs.then(|| {
            let nx = x.0;
            let tg = targets.to_vec();
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let gx = store.acc(nx, nodes[nx].data.len());
                for (r, &t) in tg.iter().enumerate() {
                    gx[r * k + t] += g[r];
                }
            });
            bx
        });
        Ok(self.push(vec![n], y, needs, back))
    }

    /// Mean smooth-L1 (Huber) distance between equal-shape tensors.
    pub fn huber_mean(&self, a: Var, b: Var, beta: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("smooth_l1", format!("{sa:?} vs {sb:?}"));
        }
        assert!(beta > 0.0, "smooth_l1: beta must be positive");
        let n = numel(&sa).max(1);
        let be = E::from_f64(beta);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let y = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let mut s = E::zero();
                let half = E::from_f64(0.5);
                for i in 0..va.len() {
                    let d = va[i] - vb[i];
                    let ad = d.abs();
                    s += if ad.to_f64() < beta {
                        half * d * d / be
                    } else {
                        ad - half * be
                    };
                }
                vec![s * E::from_f64(1.0 / n as f64)]
            })
        });
        let back = needs.then(|| {
            let (na, nb) = (a.0, b.0);
            let bx: super::tape::BackFn<E> = Box::new(move |nodes: &[Node<E>], g, store| {
                let (va, vb) = (&nodes[na].data, &nodes[nb].data);
                let scale = g[0] * E::from_f64(1.0 / n as f64);
                let deriv = |d: E| {
                    if d.abs().to_f64() < beta {
                        d / be
                    } else if d.to_f64() > 0.0 {
                        E::one()
                    } else {
                        -E::one()
                    }
                };
                if nodes[na].needs_grad {
                    let ga = store.acc(na, va.len());
                    for i in 0..va.len() {
                        ga[i] += scale * deriv(va[i] - vb[i]);
                    }
                }
                if nodes[nb].needs_grad {
                    let gb = store.acc(nb, vb.len());
                    for i in 0..vb.len() {
                        gb[i] += -scale * deriv(va[i] - vb[i]);
                    }
                }
            });
            bx
        });
        Ok(self.push(vec![], y, needs, back))
    }
}

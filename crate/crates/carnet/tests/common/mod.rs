//! Shared test helpers: the central finite-difference gradient oracle and
//! random input generation. Everything here runs in f64 so the oracle's own
//! error (truncation O(h²) + rounding O(ε/h) at h=1e-5) stays far below the
//! 1e-4 tolerance.

#![allow(dead_code)]

pub mod gradsuite;

use carnet::tensor::{PTensor, Params, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in (lo, hi) kept at least `margin` away from `kink` — for checking
/// piecewise ops (ReLU, smooth-L1) off their non-differentiable points.
pub fn rand_vec_away(
    rng: &mut ChaCha8Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kink: f64,
    margin: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if (v - kink).abs() > margin {
                break v;
            }
        })
        .collect()
}

pub fn insert(params: &mut Params<f64>, name: &str, shape: &[usize], data: Vec<f64>) {
    params.insert(name, PTensor::new(shape.to_vec(), data));
}

fn eval<F>(params: &Params<f64>, f: &F) -> f64
where
    F: Fn(&Tape<f64>, &Params<f64>) -> Var,
{
    let t: Tape<f64> = Tape::new();
    let loss = f(&t, params);
    t.scalar_value(loss)
}

fn central_diff<F>(params: &mut Params<f64>, f: &F, name: &str, i: usize, h: f64) -> f64
where
    F: Fn(&Tape<f64>, &Params<f64>) -> Var,
{
    let orig = params.get(name).unwrap().data[i];
    params.get_mut(name).unwrap().data[i] = orig + h;
    let fp = eval(params, f);
    params.get_mut(name).unwrap().data[i] = orig - h;
    let fm = eval(params, f);
    params.get_mut(name).unwrap().data[i] = orig;
    (fp - fm) / (2.0 * h)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences over every coordinate of every parameter, with its location.
pub fn max_rel_err_at<F>(params: &mut Params<f64>, f: &F) -> (f64, String)
where
    F: Fn(&Tape<f64>, &Params<f64>) -> Var,
{
    let analytic = {
        let t: Tape<f64> = Tape::new();
        let loss = f(&t, params);
        assert!(
            t.shape(loss).is_empty(),
            "gradient check requires a scalar loss"
        );
        t.backward(loss).unwrap().into_params()
    };
    let names: Vec<String> = params.names().cloned().collect();
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for name in &names {
        let n = params.get(name).unwrap().data.len();
        let g = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut numeric = central_diff(params, f, name, i, FD_H);
            let mut err = rel_err(g[i], numeric);
            if err >= FD_TOL {
                // A pre-activation within h of a ReLU kink makes the central
                // difference straddle the corner; shrinking h resolves it,
                // while a genuinely wrong gradient fails at any step size.
                numeric = central_diff(params, f, name, i, FD_H / 100.0);
                err = rel_err(g[i], numeric);
            }
            if err > worst {
                worst = err;
                at = format!("{name}[{i}]: analytic {:.6e} vs numeric {numeric:.6e}", g[i]);
            }
        }
    }
    (worst, at)
}

/// Stable digest of a directory tree: relative paths + file bytes.
pub fn tree_digest(root: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    fn walk(root: &std::path::Path, dir: &std::path::Path, files: &mut Vec<std::path::PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, files);
            } else {
                files.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for f in &files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(f).unwrap());
        h.update([0xff]);
    }
    format!("{:x}", h.finalize())
}

pub fn max_rel_err<F>(params: &mut Params<f64>, f: &F) -> f64
where
    F: Fn(&Tape<f64>, &Params<f64>) -> Var,
{
    max_rel_err_at(params, f).0
}

/// Assert the FD oracle over `instances` random instances built by `setup`.
pub fn grad_check<S, F>(name: &str, instances: usize, mut setup: S)
where
    S: FnMut(u64) -> (Params<f64>, F),
    F: Fn(&Tape<f64>, &Params<f64>) -> Var,
{
    for k in 0..instances as u64 {
        let (mut params, f) = setup(k);
        let (err, at) = max_rel_err_at(&mut params, &f);
        assert!(
            err < FD_TOL,
            "{name}: instance {k} rel err {err:.3e} ≥ {FD_TOL:.0e} at {at}"
        );
    }
}

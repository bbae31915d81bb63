//! GRU cell.
//!
//!   z = σ(W_z [h, x] + b_z)
//!   r = σ(W_r [h, x] + b_r)
//!   h̃ = tanh(W [r⊙h, x] + b)
//!   h' = (1−z)⊙h + z⊙h̃
//!
//! Gate weights share the `(hidden, hidden+input)` shape. Biases are zero at
//! init, so a fresh cell reproduces the bias-free update exactly.

use rand_chacha::ChaCha8Rng;

use super::init::{normal_scaled, zeros};
use crate::tensor::{Elem, Params, Result, Tape, Var};

#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub hidden: usize,
    pub input: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, hidden: usize, input: usize) -> Self {
        GruCell {
            name: name.into(),
            hidden,
            input,
        }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, rng: &mut ChaCha8Rng) {
        let shape = [self.hidden, self.hidden + self.input];
        let std = 1.0 / ((self.hidden + self.input) as f64).sqrt();
        for gate in ["wz", "wr", "w"] {
            p.insert(
                format!("{}.{gate}", self.name),
                normal_scaled(&shape, std, rng),
            );
        }
        for gate in ["bz", "br", "b"] {
            p.insert(format!("{}.{gate}", self.name), zeros(&[self.hidden]));
        }
    }

    /// One step on a batch: `h_prev (n, hidden)`, `x (n, input)` -> `(n, hidden)`.
    pub fn step<E: Elem>(
        &self,
        t: &Tape<E>,
        p: &Params<E>,
        h_prev: Var,
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
        let wz = bind(format!("{}.wz", self.name))?;
        let wr = bind(format!("{}.wr", self.name))?;
        let w = bind(format!("{}.w", self.name))?;
        let bz = bind(format!("{}.bz", self.name))?;
        let br = bind(format!("{}.br", self.name))?;
        let b = bind(format!("{}.b", self.name))?;

        let hx = t.concat(1, h_prev, x)?;
        let z = t.sigmoid(t.dense(hx, wz, Some(bz))?);
        let r = t.sigmoid(t.dense(hx, wr, Some(br))?);
        let rh = t.mul(r, h_prev)?;
        let rhx = t.concat(1, rh, x)?;
        let ht = t.tanh_act(t.dense(rhx, w, Some(b))?);
        // (1−z)⊙h + z⊙h̃, written as h + z⊙(h̃−h) to keep the zero-weight
        // case exact: z=0.5, h̃=0 gives h' = 0.5·h with no rounding
        let delta = t.mul(z, t.sub(ht, h_prev)?)?;
        t.add(h_prev, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};
    use rand::Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn zero_cell(hidden: usize, input: usize) -> (GruCell, Params<f64>) {
        let cell = GruCell::new("gru", hidden, input);
        let mut p = Params::new();
        let mut rng = rng_stream(0, stream::TEST);
        cell.register(&mut p, &mut rng);
        for gate in ["wz", "wr", "w"] {
            p.get_mut(&format!("gru.{gate}")).unwrap().data.fill(0.0);
        }
        (cell, p)
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let (cell, p) = zero_cell(3, 2);
        let t: Tape<f64> = Tape::new();
        let h = t.leaf(&[1, 3], vec![1.0, -2.0, 0.25]);
        let x = t.leaf(&[1, 2], vec![5.0, -5.0]);
        let h1 = cell.step(&t, &p, h, x, true).unwrap();
        assert_eq!(t.value(h1), vec![0.5, -1.0, 0.125]);
    }

    #[test]
    fn scalar_hand_case() {
        // weights 1, biases 0, h=0, x=1: z=r=σ(1), h̃=tanh(1), h'=z·tanh(1)
        let cell = GruCell::new("gru", 1, 1);
        let mut p: Params<f64> = Params::new();
        let mut rng = rng_stream(0, stream::TEST);
        cell.register(&mut p, &mut rng);
        for gate in ["wz", "wr", "w"] {
            p.get_mut(&format!("gru.{gate}")).unwrap().data.fill(1.0);
        }
        let t: Tape<f64> = Tape::new();
        let h = t.leaf(&[1, 1], vec![0.0]);
        let x = t.leaf(&[1, 1], vec![1.0]);
        let h1 = cell.step(&t, &p, h, x, true).unwrap();
        let got = t.value(h1)[0];
        let want = sigmoid(1.0) * 1.0f64.tanh();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((got - 0.55677).abs() < 1e-5);
    }

    #[test]
    fn state_stays_between_h_prev_and_candidate() {
        let cell = GruCell::new("gru", 4, 3);
        let mut rng = rng_stream(3, stream::TEST);
        for _ in 0..200 {
            let mut p: Params<f64> = Params::new();
            cell.register(&mut p, &mut rng);
            let t: Tape<f64> = Tape::new();
            let hv: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let xv: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h = t.leaf(&[1, 4], hv.clone());
            let x = t.leaf(&[1, 3], xv);
            let h1 = cell.step(&t, &p, h, x, true).unwrap();
            // recompute h̃ independently of the cell's own arithmetic
            let hv1 = t.value(h1);
            for i in 0..4 {
                // h' is a convex combination, so it can't exceed max(|h|, 1)
                assert!(hv1[i].abs() <= hv[i].abs().max(1.0) + 1e-12);
            }
        }
    }
}

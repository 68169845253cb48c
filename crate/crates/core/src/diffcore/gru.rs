use super::ops::{axpy, dense, dense_backward, dot, sigmoid};
use super::{Grads, Init, ModelState, ParamId, Params};
use crate::error::{Error, Result};

/// A GRU cell. Gate blocks are stacked row-wise in the order update (z),
/// reset (r), candidate: `w` is `[3H, I]`, `u` is `[3H, H]`, `b` is `[3H]`.
///
/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// c = tanh(W_c x + U_c (r ⊙ h) + b_c), h' = (1 - z) ⊙ h + z ⊙ c.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct GruTrace {
    xs: Vec<Vec<f64>>,
    /// `hs[0]` is the zero initial state; `hs[t + 1]` follows step `t`.
    hs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
}

impl GruTrace {
    pub fn output(&self) -> &[f64] {
        self.hs.last().map_or(&[], Vec::as_slice)
    }

    pub fn steps(&self) -> usize {
        self.xs.len()
    }
}

impl Gru {
    pub fn new(state: &mut ModelState, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let w = state.add(&format!("{name}.w"), &[3 * hidden, in_dim], Init::FanIn)?;
        let u = state.add(&format!("{name}.u"), &[3 * hidden, hidden], Init::FanIn)?;
        let b = state.add(&format!("{name}.b"), &[3 * hidden], Init::Zeros)?;
        Ok(Gru {
            w,
            u,
            b,
            in_dim,
            hidden,
        })
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<()> {
        if x.len() != self.in_dim || h.len() != self.hidden {
            return Err(Error::Shape(format!(
                "gru expects input {} and hidden {}, got {} and {}",
                self.in_dim,
                self.hidden,
                x.len(),
                h.len()
            )));
        }
        Ok(())
    }

    fn step(&self, p: &Params, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check(x, h)?;
        let hd = self.hidden;
        let (w, u, b) = (p.get(self.w), p.get(self.u), p.get(self.b));
        let mut a = vec![0.0; 3 * hd];
        dense(w, b, x, &mut a)?;
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        for k in 0..hd {
            z[k] = sigmoid(a[k] + dot(&u[k * hd..(k + 1) * hd], h));
            r[k] = sigmoid(a[hd + k] + dot(&u[(hd + k) * hd..(hd + k + 1) * hd], h));
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let mut c = vec![0.0; hd];
        let mut out = vec![0.0; hd];
        for k in 0..hd {
            c[k] = (a[2 * hd + k] + dot(&u[(2 * hd + k) * hd..(2 * hd + k + 1) * hd], &rh)).tanh();
            out[k] = (1.0 - z[k]) * h[k] + z[k] * c[k];
        }
        Ok((out, z, r, c))
    }

    /// One cell application.
    pub fn cell(&self, p: &Params, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.step(p, x, h)?.0)
    }

    /// Run over `inputs` from a zero state. An empty sequence yields the zero vector.
    pub fn run<X: AsRef<[f64]>>(&self, p: &Params, inputs: &[X]) -> Result<GruTrace> {
        let mut tr = GruTrace {
            hs: vec![vec![0.0; self.hidden]],
            ..GruTrace::default()
        };
        for x in inputs {
            let x = x.as_ref();
            let (h, z, r, c) = self.step(p, x, tr.hs.last().unwrap())?;
            tr.xs.push(x.to_vec());
            tr.hs.push(h);
            tr.zs.push(z);
            tr.rs.push(r);
            tr.cs.push(c);
        }
        Ok(tr)
    }

    /// Backpropagate `dh` on the final state through the whole trace.
    /// Returns the gradient with respect to each input.
    pub fn backward(&self, p: &Params, g: &mut Grads, tr: &GruTrace, dh: &[f64]) -> Vec<Vec<f64>> {
        let hd = self.hidden;
        let (w, u) = (p.get(self.w), p.get(self.u));
        let mut dxs = vec![vec![0.0; self.in_dim]; tr.steps()];
        let mut dh_next = dh.to_vec();
        let mut da = vec![0.0; 3 * hd];
        let mut dw = vec![0.0; w.len()];
        let mut du = vec![0.0; u.len()];
        let mut db = vec![0.0; 3 * hd];
        for t in (0..tr.steps()).rev() {
            let (h, z, r, c) = (&tr.hs[t], &tr.zs[t], &tr.rs[t], &tr.cs[t]);
            let mut dh_prev = vec![0.0; hd];
            for k in 0..hd {
                let d = dh_next[k];
                da[k] = d * (c[k] - h[k]) * z[k] * (1.0 - z[k]);
                da[2 * hd + k] = d * z[k] * (1.0 - c[k] * c[k]);
                dh_prev[k] = d * (1.0 - z[k]);
            }
            let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
            let mut drh = vec![0.0; hd];
            for k in 0..hd {
                let g = da[2 * hd + k];
                if g != 0.0 {
                    let row = (2 * hd + k) * hd;
                    axpy(g, &u[row..row + hd], &mut drh);
                    axpy(g, &rh, &mut du[row..row + hd]);
                }
            }
            for k in 0..hd {
                da[hd + k] = drh[k] * h[k] * r[k] * (1.0 - r[k]);
                dh_prev[k] += drh[k] * r[k];
            }
            for k in 0..2 * hd {
                let g = da[k];
                if g != 0.0 {
                    let row = k * hd;
                    axpy(g, &u[row..row + hd], &mut dh_prev);
                    axpy(g, h, &mut du[row..row + hd]);
                }
            }
            dense_backward(w, &tr.xs[t], &da, &mut dw, &mut db, Some(&mut dxs[t]));
            dh_next = dh_prev;
        }
        axpy(1.0, &dw, g.get(self.w));
        axpy(1.0, &du, g.get(self.u));
        axpy(1.0, &db, g.get(self.b));
        dxs
    }
}

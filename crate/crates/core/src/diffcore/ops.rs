//! Layer primitives over plain slices. Every forward has a matching backward
//! that accumulates (`+=`) into gradient buffers.

use super::{Grads, Init, ModelState, ParamId, Params};
use crate::error::{Error, Result};

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row `index` of a `[V, dim]` table.
pub fn embed_lookup(table: &[f64], dim: usize, index: usize) -> Result<&[f64]> {
    let rows = table.len() / dim;
    if index >= rows {
        return Err(Error::OutOfRange {
            what: "embedding table".into(),
            index,
            size: rows,
        });
    }
    Ok(&table[index * dim..(index + 1) * dim])
}

pub fn embed_backward(grad_table: &mut [f64], dim: usize, index: usize, g: &[f64]) -> Result<()> {
    let rows = grad_table.len() / dim;
    if index >= rows || g.len() != dim {
        return Err(Error::OutOfRange {
            what: "embedding table".into(),
            index,
            size: rows,
        });
    }
    axpy(1.0, g, &mut grad_table[index * dim..(index + 1) * dim]);
    Ok(())
}

/// `out = W x + b` for row-major `W` of shape `[out.len(), x.len()]`.
pub fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
    let (o, i) = (out.len(), x.len());
    if w.len() != o * i || b.len() != o {
        return Err(Error::Shape(format!(
            "dense W has {} entries and b {}, expected {o}x{i} and {o}",
            w.len(),
            b.len()
        )));
    }
    for r in 0..o {
        out[r] = dot(&w[r * i..(r + 1) * i], x) + b[r];
    }
    Ok(())
}

/// Accumulate `dW += dy xᵀ`, `db += dy` and, if requested, `dx += Wᵀ dy`.
pub fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let i = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        axpy(g, x, &mut dw[r * i..(r + 1) * i]);
        db[r] += g;
    }
    if let Some(dx) = dx {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[r * i..(r + 1) * i], dx);
            }
        }
    }
}

/// An affine layer `W x + b` whose parameters live in a [`ModelState`].
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Dense {
    pub fn new(state: &mut ModelState, name: &str, out_dim: usize, in_dim: usize) -> Result<Self> {
        let w = state.add(&format!("{name}.w"), &[out_dim, in_dim], Init::FanIn)?;
        let b = state.add(&format!("{name}.b"), &[out_dim], Init::Zeros)?;
        Ok(Dense { w, b, out_dim, in_dim })
    }

    pub fn forward(&self, p: &Params, x: &[f64], out: &mut [f64]) -> Result<()> {
        dense(p.get(self.w), p.get(self.b), x, out)
    }

    pub fn backward(&self, p: &Params, g: &mut Grads, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let (dw, db) = g.pair(self.w, self.b);
        dense_backward(p.get(self.w), x, dy, dw, db, dx);
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Given softmax output `y` and upstream `dy`, accumulate into `dz`.
pub fn softmax_backward(y: &[f64], dy: &[f64], dz: &mut [f64]) {
    let s = dot(y, dy);
    for i in 0..y.len() {
        dz[i] += y[i] * (dy[i] - s);
    }
}

/// `-ln σ(pos - neg)` and its derivative with respect to `pos` (the
/// derivative with respect to `neg` is the negation).
pub fn bpr_loss(pos: f64, neg: f64) -> (f64, f64) {
    let x = pos - neg;
    let loss = if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    };
    (loss, -sigmoid(-x))
}

/// Element-wise activations of the conditional user encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Identity, Activation::Tanh, Activation::Sigmoid, Activation::Relu];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Accumulate the gradient of `dc * cosine(a, b)` into `da` and `db`.
pub fn cosine_backward(a: &[f64], b: &[f64], dc: f64, da: &mut [f64], db: &mut [f64]) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || dc == 0.0 {
        return;
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    for i in 0..a.len() {
        da[i] += dc * (b[i] * inv - c * a[i] / (na * na));
        db[i] += dc * (a[i] * inv - c * b[i] / (nb * nb));
    }
}

#[cfg(test)]
mod tests {
    use super::super::finite_difference_check;
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..11).map(|i| (i * i) as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn embed_identity_table_and_accumulation() {
        let table = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(embed_lookup(&table, 3, 1).unwrap(), &[0.0, 1.0, 0.0]);
        assert!(embed_lookup(&table, 3, 3).is_err());
        let mut g = [0.0; 9];
        let up = [0.5, -1.0, 2.0];
        embed_backward(&mut g, 3, 1, &up).unwrap();
        embed_backward(&mut g, 3, 1, &up).unwrap();
        assert_eq!(&g[3..6], &[1.0, -2.0, 4.0]);
        assert_eq!(&g[..3], &[0.0; 3]);
        assert!(embed_backward(&mut g, 3, 5, &up).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut s = ModelState::new(5);
        let t = s.add("emb", &[6, 4], Init::Embedding).unwrap();
        let target = [0.3, -0.2, 0.9, 0.1];
        let f = |p: &Params| {
            let r = embed_lookup(p.get(t), 4, 2).unwrap();
            let q = embed_lookup(p.get(t), 4, 5).unwrap();
            dot(r, &target) + 0.5 * dot(q, q)
        };
        let err = finite_difference_check(
            &mut s,
            |s| Ok(f(&s.params())),
            |s| {
                let (p, mut g) = s.split();
                let q = embed_lookup(p.get(t), 4, 5).unwrap().to_vec();
                embed_backward(g.get(t), 4, 2, &target).unwrap();
                embed_backward(g.get(t), 4, 5, &q).unwrap();
                Ok(f(&p))
            },
            1e-4,
            100,
            2,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn dense_trivial_cases() {
        let x = [1.0, -2.0, 3.0];
        let mut out = [9.0; 3];
        dense(&[0.0; 9], &[0.0; 3], &x, &mut out).unwrap();
        assert_eq!(out, [0.0; 3]);
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        dense(&eye, &[0.0; 3], &x, &mut out).unwrap();
        assert_eq!(out, x);
        assert!(dense(&eye, &[0.0; 2], &x, &mut out).is_err());
        let mut short = [0.0; 2];
        assert!(dense(&eye, &[0.0; 3], &x, &mut short).is_err());
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut s = ModelState::new(9);
        let layer = Dense::new(&mut s, "d", 4, 3).unwrap();
        let xid = s.add("x", &[3], Init::FanIn).unwrap();
        let c = [0.7, -1.3, 0.2, 2.0];
        // f = c·(Wx+b) + ½‖Wx+b‖²
        let fwd = |p: &Params| {
            let mut y = [0.0; 4];
            layer.forward(p, p.get(xid), &mut y).unwrap();
            (dot(&c, &y) + 0.5 * dot(&y, &y), y)
        };
        let err = finite_difference_check(
            &mut s,
            |s| Ok(fwd(&s.params()).0),
            |s| {
                let (p, mut g) = s.split();
                let (f, y) = fwd(&p);
                let dy: Vec<f64> = y.iter().zip(&c).map(|(y, c)| y + c).collect();
                let x = p.get(xid);
                let mut dx = [0.0; 3];
                layer.backward(&p, &mut g, x, &dy, Some(&mut dx));
                axpy(1.0, &dx, g.get(xid));
                Ok(f)
            },
            1e-4,
            100,
            3,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[1.0; 4]), vec![0.25; 4]);
        let y = softmax(&[0.0, 3f64.ln()]);
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|x| x + 100.0).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() <= 1e-12);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut s = ModelState::new(4);
        let z = s.add("z", &[5], Init::FanIn).unwrap();
        let c = [1.0, -2.0, 0.5, 3.0, 0.0];
        let err = finite_difference_check(
            &mut s,
            |s| Ok(dot(&softmax(s.params().get(z)), &c)),
            |s| {
                let (p, mut g) = s.split();
                let y = softmax(p.get(z));
                softmax_backward(&y, &c, g.get(z));
                Ok(dot(&y, &c))
            },
            1e-5,
            100,
            4,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn bpr_cases() {
        let (l, g) = bpr_loss(1.5, 1.5);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g + 0.5).abs() < 1e-12);
        let (l, _) = bpr_loss(3f64.ln(), 0.0);
        assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in -20..60 {
            let (l, _) = bpr_loss(k as f64, 0.0);
            assert!(l > 0.0 && l < prev);
            prev = l;
        }
        let (l, g) = bpr_loss(-800.0, 0.0);
        assert!((l - 800.0).abs() < 1e-9 && (g + 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for a in Activation::ALL {
            for &x in &[-1.3, -0.2, 0.4, 2.1] {
                let h = 1e-6;
                let num = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
                assert!((num - a.derivative(x)).abs() < 1e-8, "{a:?} at {x}");
            }
        }
    }

    #[test]
    fn cosine_cases_and_gradient() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        let mut s = ModelState::new(8);
        let a = s.add("a", &[4], Init::FanIn).unwrap();
        let b = s.add("b", &[4], Init::FanIn).unwrap();
        let err = finite_difference_check(
            &mut s,
            |s| {
                let p = s.params();
                Ok(cosine(p.get(a), p.get(b)))
            },
            |s| {
                let (p, mut g) = s.split();
                let (da, db) = g.pair(a, b);
                cosine_backward(p.get(a), p.get(b), 1.0, da, db);
                Ok(cosine(p.get(a), p.get(b)))
            },
            1e-5,
            100,
            5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}

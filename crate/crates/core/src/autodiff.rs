//! Minimal reverse-mode tape over dense f64 tensors.
//!
//! Every forward op records the parent node indices and a backward closure
//! that scatters the output gradient into the parents. The DFT ops are
//! treated as real-linear maps; their backward passes are the adjoint
//! transforms. The adaptive-threshold mask op implements the
//! straight-through estimator: an optionally hard forward with a sigmoid
//! surrogate backward.

use crate::numerics::{irdft_kernel, n_half_bins, rdft_kernel, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape, usable to index the gradient
    /// vector returned by [`Tape::backward`].
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Forward behavior of the threshold mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteMode {
    /// Hard indicator forward, sigmoid-derivative backward (training).
    Hard,
    /// Sigmoid forward and backward (the differentiable surrogate that the
    /// hard gradient is checked against).
    Soft,
}

type BackFn = Box<dyn Fn(&Tensor, &[Tensor], &mut [Tensor])>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    parents: Vec<Vec<usize>>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inserts a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Inserts a non-differentiable constant. Gradients still accumulate
    /// for it but are never read.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.parents.push(parents);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Runs the backward pass from a scalar root; returns one gradient
    /// tensor per node.
    pub fn backward(&self, root: Var) -> Vec<Tensor> {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        let n = self.values.len();
        let mut grads: Vec<Tensor> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        let mut live = vec![false; n];
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if live[i] {
                for &p in &self.parents[i] {
                    live[p] = true;
                }
            }
        }
        for i in (0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = std::mem::replace(&mut grads[i], Tensor::raw(vec![0], vec![]));
                back(&g, &self.values, &mut grads);
                grads[i] = g;
            }
        }
        grads
    }

    // ---- elementwise ----

    /// a + b; b may be a scalar `[1]` broadcast over a.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.bin_elementwise(a, b, |x, y| x + y, |_x, _y| (1.0, 1.0))
    }

    /// a − b; b may be scalar.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.bin_elementwise(a, b, |x, y| x - y, |_x, _y| (1.0, -1.0))
    }

    /// a ⊙ b; b may be scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.bin_elementwise(a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// a / b; b may be scalar.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.bin_elementwise(a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    fn bin_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let scalar_b = bv.len() == 1 && av.len() != 1;
        assert!(
            scalar_b || av.shape() == bv.shape(),
            "elementwise shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let out: Vec<f64> = if scalar_b {
            let y = bv.data()[0];
            av.data().iter().map(|&x| f(x, y)).collect()
        } else {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let shape = av.shape().to_vec();
        let (ai, bi) = (a.0, b.0);
        self.push(
            Tensor::raw(shape, out),
            vec![ai, bi],
            Some(Box::new(move |g, vals, grads| {
                let (av, bv) = (&vals[ai], &vals[bi]);
                if scalar_b {
                    let y = bv.data()[0];
                    let mut gb = 0.0;
                    for (k, &gk) in g.data().iter().enumerate() {
                        let (da, db) = df(av.data()[k], y);
                        gb += gk * db;
                        grads[ai].data_mut()[k] += gk * da;
                    }
                    grads[bi].data_mut()[0] += gb;
                } else {
                    for (k, &gk) in g.data().iter().enumerate() {
                        let (da, db) = df(av.data()[k], bv.data()[k]);
                        grads[ai].data_mut()[k] += gk * da;
                        grads[bi].data_mut()[k] += gk * db;
                    }
                }
            })),
        )
    }

    /// k·a + c, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let out: Vec<f64> = self.values[a.0].data().iter().map(|&x| k * x + c).collect();
        let shape = self.values[a.0].shape().to_vec();
        let ai = a.0;
        self.push(
            Tensor::raw(shape, out),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                for (gk, ga) in g.data().iter().zip(grads[ai].data_mut()) {
                    *ga += k * gk;
                }
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.values[a.0].shape().to_vec();
        let ai = a.0;
        self.push(
            Tensor::raw(shape, out),
            vec![ai],
            Some(Box::new(move |g, vals, grads| {
                for (k, gk) in g.data().iter().enumerate() {
                    if vals[ai].data()[k] > 0.0 {
                        grads[ai].data_mut()[k] += gk;
                    }
                }
            })),
        )
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.sqrt()).collect();
        let shape = self.values[a.0].shape().to_vec();
        let ai = a.0;
        let cached = out.clone();
        self.push(
            Tensor::raw(shape, out),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                for (k, gk) in g.data().iter().enumerate() {
                    grads[ai].data_mut()[k] += gk * 0.5 / cached[k];
                }
            })),
        )
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].data().iter().sum();
        let ai = a.0;
        self.push(
            Tensor::scalar(s),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let gk = g.data()[0];
                for ga in grads[ai].data_mut() {
                    *ga += gk;
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Mean over axis 1 of a rank-3 tensor: `[A,B,C] → [A,C]`.
    pub fn mean_axis1(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        assert_eq!(shape.len(), 3, "mean_axis1 expects rank 3");
        let (na, nb, nc) = (shape[0], shape[1], shape[2]);
        let data = self.values[a.0].data();
        let mut out = vec![0.0; na * nc];
        for ia in 0..na {
            for ib in 0..nb {
                let row = &data[(ia * nb + ib) * nc..(ia * nb + ib + 1) * nc];
                let orow = &mut out[ia * nc..(ia + 1) * nc];
                for ic in 0..nc {
                    orow[ic] += row[ic];
                }
            }
        }
        let inv = 1.0 / nb as f64;
        for v in &mut out {
            *v *= inv;
        }
        let ai = a.0;
        self.push(
            Tensor::raw(vec![na, nc], out),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let ga = grads[ai].data_mut();
                for ia in 0..na {
                    for ib in 0..nb {
                        let grow = &g.data()[ia * nc..(ia + 1) * nc];
                        let arow = &mut ga[(ia * nb + ib) * nc..(ia * nb + ib + 1) * nc];
                        for ic in 0..nc {
                            arow[ic] += grow[ic] * inv;
                        }
                    }
                }
            })),
        )
    }

    /// Adds `b: [A,C]` into `a: [A,B,C]`, broadcast over axis 1.
    pub fn add_bcast_axis1(&mut self, a: Var, b: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (na, nb, nc) = (shape[0], shape[1], shape[2]);
        assert_eq!(self.values[b.0].shape(), &[na, nc]);
        let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = vec![0.0; na * nb * nc];
        for ia in 0..na {
            for ib in 0..nb {
                let base = (ia * nb + ib) * nc;
                for ic in 0..nc {
                    out[base + ic] = ad[base + ic] + bd[ia * nc + ic];
                }
            }
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            Tensor::raw(shape, out),
            vec![ai, bi],
            Some(Box::new(move |g, _vals, grads| {
                for (k, gk) in g.data().iter().enumerate() {
                    grads[ai].data_mut()[k] += gk;
                }
                let gb = grads[bi].data_mut();
                for ia in 0..na {
                    for ib in 0..nb {
                        let base = (ia * nb + ib) * nc;
                        for ic in 0..nc {
                            gb[ia * nc + ic] += g.data()[base + ic];
                        }
                    }
                }
            })),
        )
    }

    // ---- linear algebra ----

    /// Matrix product over the last axis: `[..., A] × [A, B] → [..., B]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let ash = self.values[a.0].shape().to_vec();
        let wsh = self.values[w.0].shape().to_vec();
        assert_eq!(wsh.len(), 2, "weight must be a matrix");
        let (ka, kb) = (wsh[0], wsh[1]);
        assert_eq!(*ash.last().unwrap(), ka, "matmul inner dims");
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let (ad, wd) = (self.values[a.0].data(), self.values[w.0].data());
        let mut out = vec![0.0; rows * kb];
        for r in 0..rows {
            let arow = &ad[r * ka..(r + 1) * ka];
            let orow = &mut out[r * kb..(r + 1) * kb];
            for (ia, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let wrow = &wd[ia * kb..(ia + 1) * kb];
                for ib in 0..kb {
                    orow[ib] += av * wrow[ib];
                }
            }
        }
        let mut oshape = ash.clone();
        *oshape.last_mut().unwrap() = kb;
        let (ai, wi) = (a.0, w.0);
        self.push(
            Tensor::raw(oshape, out),
            vec![ai, wi],
            Some(Box::new(move |g, vals, grads| {
                let (ad, wd) = (vals[ai].data(), vals[wi].data());
                // ga = g · wᵀ
                {
                    let ga = grads[ai].data_mut();
                    for r in 0..rows {
                        let grow = &g.data()[r * kb..(r + 1) * kb];
                        let garow = &mut ga[r * ka..(r + 1) * ka];
                        for ia in 0..ka {
                            let wrow = &wd[ia * kb..(ia + 1) * kb];
                            let mut acc = 0.0;
                            for ib in 0..kb {
                                acc += grow[ib] * wrow[ib];
                            }
                            garow[ia] += acc;
                        }
                    }
                }
                // gw = aᵀ · g
                {
                    let gw = grads[wi].data_mut();
                    for r in 0..rows {
                        let arow = &ad[r * ka..(r + 1) * ka];
                        let grow = &g.data()[r * kb..(r + 1) * kb];
                        for (ia, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw[ia * kb..(ia + 1) * kb];
                            for ib in 0..kb {
                                gwrow[ib] += av * grow[ib];
                            }
                        }
                    }
                }
            })),
        )
    }

    /// Adds a `[B]` bias over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let ash = self.values[a.0].shape().to_vec();
        let b = *ash.last().unwrap();
        assert_eq!(self.values[bias.0].len(), b, "bias length");
        let rows = self.values[a.0].len() / b;
        let (ad, bd) = (self.values[a.0].data(), self.values[bias.0].data());
        let mut out = vec![0.0; rows * b];
        for r in 0..rows {
            for ib in 0..b {
                out[r * b + ib] = ad[r * b + ib] + bd[ib];
            }
        }
        let (ai, bi) = (a.0, bias.0);
        self.push(
            Tensor::raw(ash, out),
            vec![ai, bi],
            Some(Box::new(move |g, _vals, grads| {
                for (k, gk) in g.data().iter().enumerate() {
                    grads[ai].data_mut()[k] += gk;
                }
                let gb = grads[bi].data_mut();
                for r in 0..rows {
                    for ib in 0..b {
                        gb[ib] += g.data()[r * b + ib];
                    }
                }
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        let s = *shape.last().unwrap();
        let rows = self.values[a.0].len() / s;
        let ad = self.values[a.0].data();
        let mut out = vec![0.0; rows * s];
        for r in 0..rows {
            let row = &ad[r * s..(r + 1) * s];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let orow = &mut out[r * s..(r + 1) * s];
            let mut sum = 0.0;
            for k in 0..s {
                orow[k] = (row[k] - max).exp();
                sum += orow[k];
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let cached = out.clone();
        let ai = a.0;
        self.push(
            Tensor::raw(shape, out),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let ga = grads[ai].data_mut();
                for r in 0..rows {
                    let p = &cached[r * s..(r + 1) * s];
                    let grow = &g.data()[r * s..(r + 1) * s];
                    let dot: f64 = p.iter().zip(grow).map(|(pk, gk)| pk * gk).sum();
                    let garow = &mut ga[r * s..(r + 1) * s];
                    for k in 0..s {
                        garow[k] += p[k] * (grow[k] - dot);
                    }
                }
            })),
        )
    }

    /// Layer norm over the last axis with affine gain/bias, ε inside the
    /// square root.
    pub fn layernorm_last(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.values[gain.0].len(), d);
        assert_eq!(self.values[bias.0].len(), d);
        let rows = self.values[a.0].len() / d;
        let (ad, gd, bd) = (
            self.values[a.0].data(),
            self.values[gain.0].data(),
            self.values[bias.0].data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut istd = vec![0.0; rows];
        for r in 0..rows {
            let row = &ad[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            istd[r] = is;
            for k in 0..d {
                let xh = (row[k] - mu) * is;
                xhat[r * d + k] = xh;
                out[r * d + k] = gd[k] * xh + bd[k];
            }
        }
        let (ai, gi, bi) = (a.0, gain.0, bias.0);
        self.push(
            Tensor::raw(shape, out),
            vec![ai, gi, bi],
            Some(Box::new(move |g, vals, grads| {
                let gd = vals[gi].data();
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let is = istd[r];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xh = 0.0;
                    for k in 0..d {
                        let dxh = grow[k] * gd[k];
                        sum_dxhat += dxh;
                        sum_dxhat_xh += dxh * xh[k];
                    }
                    {
                        let ga = grads[ai].data_mut();
                        let garow = &mut ga[r * d..(r + 1) * d];
                        for k in 0..d {
                            let dxh = grow[k] * gd[k];
                            garow[k] += is
                                * (dxh - sum_dxhat / d as f64 - xh[k] * sum_dxhat_xh / d as f64);
                        }
                    }
                    {
                        let gg = grads[gi].data_mut();
                        for k in 0..d {
                            gg[k] += grow[k] * xh[k];
                        }
                    }
                    {
                        let gb = grads[bi].data_mut();
                        for k in 0..d {
                            gb[k] += grow[k];
                        }
                    }
                }
            })),
        )
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.values[a.0].len(),
            "reshape size"
        );
        let out = Tensor::raw(shape, self.values[a.0].data().to_vec());
        let ai = a.0;
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                for (k, gk) in g.data().iter().enumerate() {
                    grads[ai].data_mut()[k] += gk;
                }
            })),
        )
    }

    /// Swaps the first two axes of a rank-3 tensor.
    pub fn transpose01(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (na, nb, nc) = (shape[0], shape[1], shape[2]);
        let ad = self.values[a.0].data();
        let mut out = vec![0.0; na * nb * nc];
        for ia in 0..na {
            for ib in 0..nb {
                let src = &ad[(ia * nb + ib) * nc..(ia * nb + ib + 1) * nc];
                let dst = &mut out[(ib * na + ia) * nc..(ib * na + ia + 1) * nc];
                dst.copy_from_slice(src);
            }
        }
        let ai = a.0;
        self.push(
            Tensor::raw(vec![nb, na, nc], out),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let ga = grads[ai].data_mut();
                for ia in 0..na {
                    for ib in 0..nb {
                        let src = &g.data()[(ib * na + ia) * nc..(ib * na + ia + 1) * nc];
                        let dst = &mut ga[(ia * nb + ib) * nc..(ia * nb + ib + 1) * nc];
                        for k in 0..nc {
                            dst[k] += src[k];
                        }
                    }
                }
            })),
        )
    }

    // ---- attention ----

    /// Per-head scaled dot products: q,k `[B,S,D]` → scores `[B,H,S,S]`.
    pub fn mha_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Var {
        let shape = self.values[q.0].shape().to_vec();
        assert_eq!(shape.len(), 3);
        assert_eq!(self.values[k.0].shape(), &shape[..]);
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d % heads, 0, "head count must divide D");
        let hd = d / heads;
        let (qd, kd) = (self.values[q.0].data(), self.values[k.0].data());
        let mut out = vec![0.0; b * heads * s * s];
        for ib in 0..b {
            for h in 0..heads {
                for i in 0..s {
                    let qrow = &qd[(ib * s + i) * d + h * hd..(ib * s + i) * d + (h + 1) * hd];
                    for j in 0..s {
                        let krow =
                            &kd[(ib * s + j) * d + h * hd..(ib * s + j) * d + (h + 1) * hd];
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += qrow[c] * krow[c];
                        }
                        out[((ib * heads + h) * s + i) * s + j] = acc * scale;
                    }
                }
            }
        }
        let (qi, ki) = (q.0, k.0);
        self.push(
            Tensor::raw(vec![b, heads, s, s], out),
            vec![qi, ki],
            Some(Box::new(move |g, vals, grads| {
                let (qd, kd) = (vals[qi].data(), vals[ki].data());
                for ib in 0..b {
                    for h in 0..heads {
                        for i in 0..s {
                            for j in 0..s {
                                let gs = g.data()[((ib * heads + h) * s + i) * s + j] * scale;
                                if gs == 0.0 {
                                    continue;
                                }
                                let qbase = (ib * s + i) * d + h * hd;
                                let kbase = (ib * s + j) * d + h * hd;
                                for c in 0..hd {
                                    grads[qi].data_mut()[qbase + c] += gs * kd[kbase + c];
                                    grads[ki].data_mut()[kbase + c] += gs * qd[qbase + c];
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    /// Attention-weighted value sum: probs `[B,H,S,S]` × v `[B,S,D]` → `[B,S,D]`.
    pub fn mha_combine(&mut self, probs: Var, v: Var) -> Var {
        let psh = self.values[probs.0].shape().to_vec();
        let vsh = self.values[v.0].shape().to_vec();
        assert_eq!(psh.len(), 4);
        assert_eq!(vsh.len(), 3);
        let (b, heads, s) = (psh[0], psh[1], psh[2]);
        let d = vsh[2];
        assert_eq!(vsh[0], b);
        assert_eq!(vsh[1], s);
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let (pd, vd) = (self.values[probs.0].data(), self.values[v.0].data());
        let mut out = vec![0.0; b * s * d];
        for ib in 0..b {
            for h in 0..heads {
                for i in 0..s {
                    for j in 0..s {
                        let p = pd[((ib * heads + h) * s + i) * s + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vbase = (ib * s + j) * d + h * hd;
                        let obase = (ib * s + i) * d + h * hd;
                        for c in 0..hd {
                            out[obase + c] += p * vd[vbase + c];
                        }
                    }
                }
            }
        }
        let (pi, vi) = (probs.0, v.0);
        self.push(
            Tensor::raw(vec![b, s, d], out),
            vec![pi, vi],
            Some(Box::new(move |g, vals, grads| {
                let (pd, vd) = (vals[pi].data(), vals[vi].data());
                for ib in 0..b {
                    for h in 0..heads {
                        for i in 0..s {
                            for j in 0..s {
                                let pidx = ((ib * heads + h) * s + i) * s + j;
                                let vbase = (ib * s + j) * d + h * hd;
                                let obase = (ib * s + i) * d + h * hd;
                                let mut gp = 0.0;
                                for c in 0..hd {
                                    let gk = g.data()[obase + c];
                                    gp += gk * vd[vbase + c];
                                    grads[vi].data_mut()[vbase + c] += gk * pd[pidx];
                                }
                                grads[pi].data_mut()[pidx] += gp;
                            }
                        }
                    }
                }
            })),
        )
    }

    // ---- spectral ----

    /// Forward real DFT along axis 0, real and imaginary halves stacked as
    /// `[2, F, rest...]`.
    pub fn rdft_stack(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        let t = shape[0];
        let rest: usize = shape[1..].iter().product();
        let f = n_half_bins(t);
        let (re, im) = rdft_kernel(self.values[a.0].data(), t, rest);
        let mut data = re;
        data.extend(im);
        let mut oshape = vec![2, f];
        oshape.extend_from_slice(&shape[1..]);
        let ai = a.0;
        self.push(
            Tensor::raw(oshape, data),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let (gre, gim) = g.data().split_at(f * rest);
                // Adjoint of the forward map: re rows carry cos, im rows −sin.
                let ga = grads[ai].data_mut();
                let mut cos_row = vec![0.0; t];
                let mut sin_row = vec![0.0; t];
                for i in 0..f {
                    for ti in 0..t {
                        let angle =
                            std::f64::consts::TAU * ((i * ti) % t) as f64 / t as f64;
                        cos_row[ti] = angle.cos();
                        sin_row[ti] = angle.sin();
                    }
                    let grow = &gre[i * rest..(i + 1) * rest];
                    let girow = &gim[i * rest..(i + 1) * rest];
                    for ti in 0..t {
                        let (c, s) = (cos_row[ti], sin_row[ti]);
                        let arow = &mut ga[ti * rest..(ti + 1) * rest];
                        for j in 0..rest {
                            arow[j] += grow[j] * c - girow[j] * s;
                        }
                    }
                }
            })),
        )
    }

    /// Splits one half out of a `[2, ...]` stacked pair.
    pub fn pair_part(&mut self, a: Var, which: usize) -> Var {
        let shape = self.values[a.0].shape().to_vec();
        assert_eq!(shape[0], 2);
        assert!(which < 2);
        let half: usize = shape[1..].iter().product();
        let data = self.values[a.0].data()[which * half..(which + 1) * half].to_vec();
        let ai = a.0;
        self.push(
            Tensor::raw(shape[1..].to_vec(), data),
            vec![ai],
            Some(Box::new(move |g, _vals, grads| {
                let ga = &mut grads[ai].data_mut()[which * half..(which + 1) * half];
                for (k, gk) in g.data().iter().enumerate() {
                    ga[k] += gk;
                }
            })),
        )
    }

    /// Inverse real DFT along axis 0 from separate re/im halves; `t` is the
    /// original time length. Imaginary parts of the purely-real bins carry
    /// zero gradient.
    pub fn irdft(&mut self, re: Var, im: Var, t: usize) -> Var {
        let shape = self.values[re.0].shape().to_vec();
        assert_eq!(self.values[im.0].shape(), &shape[..]);
        let f = n_half_bins(t);
        assert_eq!(shape[0], f, "bin count vs time length");
        let rest: usize = shape[1..].iter().product();
        let data = irdft_kernel(self.values[re.0].data(), self.values[im.0].data(), t, rest);
        let mut oshape = shape.clone();
        oshape[0] = t;
        let (ri, ii) = (re.0, im.0);
        self.push(
            Tensor::raw(oshape, data),
            vec![ri, ii],
            Some(Box::new(move |g, _vals, grads| {
                let inv_t = 1.0 / t as f64;
                let mut cos_row = vec![0.0; t];
                let mut sin_row = vec![0.0; t];
                let mid = (t - 1) / 2;
                for i in 0..f {
                    let paired = i >= 1 && i <= mid;
                    let nyquist = t % 2 == 0 && i == t / 2;
                    for ti in 0..t {
                        let angle =
                            std::f64::consts::TAU * ((i * ti) % t) as f64 / t as f64;
                        cos_row[ti] = angle.cos();
                        sin_row[ti] = angle.sin();
                    }
                    let coef = if paired { 2.0 * inv_t } else { inv_t };
                    for ti in 0..t {
                        let grow = &g.data()[ti * rest..(ti + 1) * rest];
                        let c = coef * cos_row[ti];
                        let s = coef * sin_row[ti];
                        let gre = &mut grads[ri].data_mut()[i * rest..(i + 1) * rest];
                        for j in 0..rest {
                            gre[j] += grow[j] * c;
                        }
                        if paired && !nyquist {
                            let gim = &mut grads[ii].data_mut()[i * rest..(i + 1) * rest];
                            for j in 0..rest {
                                gim[j] -= grow[j] * s;
                            }
                        }
                    }
                }
            })),
        )
    }

    // ---- straight-through threshold mask ----

    /// Energy-threshold selection mask over a complex spectrum given as
    /// separate re/im tensors and a scalar threshold.
    ///
    /// Forward: `Hard` uses the indicator 1[E ≥ τ], `Soft` uses
    /// sigmoid((E−τ)/temperature). Backward always differentiates the
    /// sigmoid surrogate (straight-through contract).
    pub fn ass_mask(&mut self, re: Var, im: Var, tau: Var, temperature: f64, mode: SteMode) -> Var {
        assert!(temperature > 0.0);
        let shape = self.values[re.0].shape().to_vec();
        assert_eq!(self.values[im.0].shape(), &shape[..]);
        assert_eq!(self.values[tau.0].len(), 1);
        let tau_v = self.values[tau.0].data()[0];
        let (rd, id) = (self.values[re.0].data(), self.values[im.0].data());
        let n = rd.len();
        let mut out = vec![0.0; n];
        for k in 0..n {
            let e = rd[k].hypot(id[k]);
            out[k] = match mode {
                SteMode::Hard => {
                    if e >= tau_v {
                        1.0
                    } else {
                        0.0
                    }
                }
                SteMode::Soft => sigmoid((e - tau_v) / temperature),
            };
        }
        let (ri, ii, ti) = (re.0, im.0, tau.0);
        self.push(
            Tensor::raw(shape, out),
            vec![ri, ii, ti],
            Some(Box::new(move |g, vals, grads| {
                let (rd, id) = (&vals[ri], &vals[ii]);
                let tau_v = vals[ti].data()[0];
                let mut gtau = 0.0;
                for (k, gk) in g.data().iter().enumerate() {
                    let (r, i) = (rd.data()[k], id.data()[k]);
                    let e = r.hypot(i);
                    let s = sigmoid((e - tau_v) / temperature);
                    let ds = s * (1.0 - s) / temperature;
                    let ge = gk * ds;
                    if e > 0.0 {
                        grads[ri].data_mut()[k] += ge * r / e;
                        grads[ii].data_mut()[k] += ge * i / e;
                    }
                    gtau -= ge;
                }
                grads[ti].data_mut()[0] += gtau;
            })),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::raw(shape.to_vec(), data)
    }

    /// Central finite differences on every input coordinate of a scalar
    /// function built from tape ops.
    fn check_op<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |tensors: &[Tensor]| -> (f64, Vec<Tensor>, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            // Reduce to a scalar objective: sum of squares.
            let sq = tape.mul(out, out);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            let leaf_grads = vars.iter().map(|v| grads[v.0].clone()).collect();
            (tape.value(loss).data()[0], leaf_grads, vars)
        };
        let (_, grads, _) = eval(inputs);
        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            for k in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[k] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = grads[which].data()[k];
                let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-8);
                assert!(
                    rel < tol,
                    "input {which} coord {k}: fd={fd:.9e} engine={an:.9e} rel={rel:.3e}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-6);
        check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-6);
        check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-6);
        // Keep divisor away from zero.
        let mut c = b.clone();
        for v in c.data_mut() {
            *v = 1.5 + v.abs();
        }
        check_op(&[a.clone(), c], |t, v| t.div(v[0], v[1]), 1e-5);
        let s = Tensor::scalar(0.7);
        check_op(&[a.clone(), s.clone()], |t, v| t.add(v[0], v[1]), 1e-6);
        check_op(&[a.clone(), s.clone()], |t, v| t.mul(v[0], v[1]), 1e-6);
        check_op(&[a.clone(), s], |t, v| t.div(v[0], v[1]), 1e-6);
        check_op(&[a.clone()], |t, v| t.affine(v[0], -2.5, 0.3), 1e-6);
        check_op(&[a], |t, v| t.relu(v[0]), 1e-6);
    }

    #[test]
    fn sqrt_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = rand_tensor(&mut rng, &[5]);
        for v in a.data_mut() {
            *v = 0.5 + v.abs();
        }
        check_op(&[a], |t, v| t.sqrt(v[0]), 1e-5);
        let b = rand_tensor(&mut rng, &[2, 3, 4]);
        check_op(&[b.clone()], |t, v| t.mean_all(v[0]), 1e-6);
        check_op(&[b], |t, v| t.mean_axis1(v[0]), 1e-6);
    }

    #[test]
    fn matmul_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let bias = rand_tensor(&mut rng, &[5]);
        check_op(&[a.clone(), w.clone()], |t, v| t.matmul(v[0], v[1]), 1e-5);
        check_op(&[a, w, bias], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.add_bias(m, v[2])
        }, 1e-5);
    }

    #[test]
    fn softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[3, 5]);
        check_op(&[a.clone()], |t, v| t.softmax_last(v[0]), 1e-5);
        let gain = rand_tensor(&mut rng, &[5]);
        let bias = rand_tensor(&mut rng, &[5]);
        check_op(&[a, gain, bias], |t, v| t.layernorm_last(v[0], v[1], v[2], 1e-5), 1e-4);
    }

    #[test]
    fn layernorm_zero_input_returns_bias() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let gain = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let bias = tape.leaf(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let out = tape.layernorm_last(a, gain, bias, 1e-5);
        assert_eq!(
            tape.value(out).data(),
            &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3][..]
        );
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        check_op(&[a.clone()], |t, v| t.transpose01(v[0]), 1e-6);
        check_op(&[a.clone()], |t, v| t.reshape(v[0], vec![6, 4]), 1e-6);
        let b = rand_tensor(&mut rng, &[2, 4]);
        check_op(&[a, b], |t, v| t.add_bcast_axis1(v[0], v[1]), 1e-6);
    }

    #[test]
    fn attention_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_tensor(&mut rng, &[2, 3, 4]);
        let k = rand_tensor(&mut rng, &[2, 3, 4]);
        let v = rand_tensor(&mut rng, &[2, 3, 4]);
        check_op(&[q.clone(), k.clone()], |t, vs| {
            t.mha_scores(vs[0], vs[1], 2, 0.5)
        }, 1e-5);
        check_op(&[q, k, v], |t, vs| {
            let s = t.mha_scores(vs[0], vs[1], 2, 0.5);
            let p = t.softmax_last(s);
            t.mha_combine(p, vs[2])
        }, 1e-4);
    }

    #[test]
    fn spectral_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &t_len in &[6usize, 7] {
            let a = rand_tensor(&mut rng, &[t_len, 2]);
            check_op(&[a], |t, v| t.rdft_stack(v[0]), 1e-5);
        }
        // Round trip through irdft; imaginary parts of the real bins zeroed
        // so the forward matches the symmetric inverse.
        for &t_len in &[6usize, 9] {
            let a = rand_tensor(&mut rng, &[t_len, 2]);
            check_op(&[a], |tape, v| {
                let st = tape.rdft_stack(v[0]);
                let re = tape.pair_part(st, 0);
                let im = tape.pair_part(st, 1);
                tape.irdft(re, im, t_len)
            }, 1e-5);
        }
    }

    #[test]
    fn rdft_irdft_round_trip_on_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[12, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone());
        let st = tape.rdft_stack(v);
        let re = tape.pair_part(st, 0);
        let im = tape.pair_part(st, 1);
        let back = tape.irdft(re, im, 12);
        for (x, y) in a.data().iter().zip(tape.value(back).data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn ass_mask_soft_mode_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let re = rand_tensor(&mut rng, &[4, 2]);
        let im = rand_tensor(&mut rng, &[4, 2]);
        let tau = Tensor::scalar(0.8);
        for &temp in &[0.1, 1.0] {
            check_op(&[re.clone(), im.clone(), tau.clone()], |t, v| {
                let m = t.ass_mask(v[0], v[1], v[2], temp, SteMode::Soft);
                let mr = t.mul(v[0], m);
                let mi = t.mul(v[1], m);
                let s = t.add(mr, mi);
                s
            }, 1e-4);
        }
    }

    #[test]
    fn ass_mask_hard_forward_values() {
        let mut tape = Tape::new();
        let re = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.2, 0.9]).unwrap());
        let im = tape.leaf(Tensor::zeros(&[3]));
        let tau = tape.leaf(Tensor::scalar(1.0));
        let m = tape.ass_mask(re, im, tau, 1.0, SteMode::Hard);
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 0.0][..]);
    }

    #[test]
    fn backward_of_constant_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let out = tape.mul(b, b);
        let _keepalive = a;
        let grads = tape.backward(out);
        assert_eq!(grads[a.0].data(), &[0.0][..]);
    }
}

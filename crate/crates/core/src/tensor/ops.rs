//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its value, and — when at least one
//! input is tracked on a live graph — records a backward step that adds its
//! gradient contribution into the tracked inputs. Inputs are never mutated.
//!
//! Inner loops over independent output rows go through [`crate::parallel`];
//! each output element has a fixed accumulation order, so results do not
//! depend on thread count or on whether the `parallel` feature is enabled.

use super::{joint_graph, Graph, IntTensor, Tensor};
use crate::error::{invalid, Result};
use crate::parallel::for_each_chunk_mut;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid!(
            "{op} requires matching shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl Tensor {
    fn tracked_on(&self, graph: &Graph) -> bool {
        match self.cell().track.borrow().as_ref() {
            Some(info) => info
                .graph
                .upgrade()
                .map(|inner| graph.same_inner(&inner))
                .unwrap_or(false),
            None => false,
        }
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self, other])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), other.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), other.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "add",
                &[self, other],
                Box::new(move || {
                    let dout = oc.grad();
                    if a_needs {
                        for (ga, d) in ac.grad_mut().iter_mut().zip(dout.iter()) {
                            *ga += d;
                        }
                    }
                    if b_needs {
                        for (gb, d) in bc.grad_mut().iter_mut().zip(dout.iter()) {
                            *gb += d;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Add a tensor whose shape is a strict suffix of `self`'s shape,
    /// repeating it over the leading axes (e.g. `[N, L, D] + [L, D]`).
    pub fn add_broadcast(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.ndim(), rhs.ndim());
        if lb >= la || self.shape()[la - lb..] != *rhs.shape() {
            return Err(invalid!(
                "add_broadcast requires the right shape {:?} to be a strict suffix of {:?}",
                rhs.shape(),
                self.shape()
            ));
        }
        let span = rhs.numel();
        let data = {
            let (a, b) = (self.data(), rhs.data());
            let mut out = a.to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                *v += b[i % span];
            }
            out
        };
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self, rhs])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), rhs.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), rhs.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "add_broadcast",
                &[self, rhs],
                Box::new(move || {
                    let dout = oc.grad();
                    if a_needs {
                        for (ga, d) in ac.grad_mut().iter_mut().zip(dout.iter()) {
                            *ga += d;
                        }
                    }
                    if b_needs {
                        let mut gb = bc.grad_mut();
                        for (i, d) in dout.iter().enumerate() {
                            gb[i % span] += d;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise difference of two same-shaped tensors.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self, other])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), other.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), other.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "sub",
                &[self, other],
                Box::new(move || {
                    let dout = oc.grad();
                    if a_needs {
                        for (ga, d) in ac.grad_mut().iter_mut().zip(dout.iter()) {
                            *ga += d;
                        }
                    }
                    if b_needs {
                        for (gb, d) in bc.grad_mut().iter_mut().zip(dout.iter()) {
                            *gb -= d;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise (Hadamard) product of two same-shaped tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self, other])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), other.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), other.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "mul",
                &[self, other],
                Box::new(move || {
                    let dout = oc.grad();
                    if a_needs {
                        let b = bc.data();
                        for ((ga, d), y) in ac.grad_mut().iter_mut().zip(dout.iter()).zip(b.iter()) {
                            *ga += d * y;
                        }
                    }
                    if b_needs {
                        let a = ac.data();
                        for ((gb, d), x) in bc.grad_mut().iter_mut().zip(dout.iter()).zip(a.iter()) {
                            *gb += d * x;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| c * x).collect();
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self])? {
            let (ac, oc) = (self.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "scale",
                &[self],
                Box::new(move || {
                    let dout = oc.grad();
                    for (ga, d) in ac.grad_mut().iter_mut().zip(dout.iter()) {
                        *ga += c * d;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Sum every element into a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let out = Tensor::scalar(total);
        if let Some(g) = joint_graph(&[self])? {
            let (ac, oc) = (self.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "sum_all",
                &[self],
                Box::new(move || {
                    let d = oc.grad()[0];
                    for ga in ac.grad_mut().iter_mut() {
                        *ga += d;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// `self @ weight`: contract the last axis of `self` ([..., K]) with a
    /// 2-D weight [K, P], giving [..., P].
    pub fn matmul(&self, weight: &Tensor) -> Result<Tensor> {
        if weight.ndim() != 2 {
            return Err(invalid!("matmul weight must be 2-D, got {:?}", weight.shape()));
        }
        let k = *self.shape().last().expect("non-empty shape");
        let (wk, p) = (weight.shape()[0], weight.shape()[1]);
        if k != wk {
            return Err(invalid!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let rows = self.numel() / k;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = p;

        let mut data = vec![0.0; rows * p];
        {
            let (a, w) = (self.data(), weight.data());
            let (av, wv): (&[f64], &[f64]) = (&a, &w);
            for_each_chunk_mut(&mut data, p, |r, out_row| {
                let a_row = &av[r * k..(r + 1) * k];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let w_row = &wv[kk * p..(kk + 1) * p];
                    for (o, &wvv) in out_row.iter_mut().zip(w_row.iter()) {
                        *o += aik * wvv;
                    }
                }
            });
        }
        let out = Tensor::from_vec(out_shape, data)?;
        if let Some(g) = joint_graph(&[self, weight])? {
            let (a_needs, w_needs) = (self.tracked_on(&g), weight.tracked_on(&g));
            let (ac, wc, oc) = (self.cell().clone(), weight.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "matmul",
                &[self, weight],
                Box::new(move || {
                    let dout = oc.grad();
                    let dv: &[f64] = &dout;
                    if a_needs {
                        // dA[r, k] = sum_p dC[r, p] * W[k, p]
                        let w = wc.data();
                        let wv: &[f64] = &w;
                        let mut ga = ac.grad_mut();
                        for_each_chunk_mut(&mut ga[..], k, |r, ga_row| {
                            let d_row = &dv[r * p..(r + 1) * p];
                            for (kk, gv) in ga_row.iter_mut().enumerate() {
                                let w_row = &wv[kk * p..(kk + 1) * p];
                                let mut acc = 0.0;
                                for (&d, &wvv) in d_row.iter().zip(w_row.iter()) {
                                    acc += d * wvv;
                                }
                                *gv += acc;
                            }
                        });
                    }
                    if w_needs {
                        // dW[k, p] = sum_r A[r, k] * dC[r, p]
                        let a = ac.data();
                        let av: &[f64] = &a;
                        let mut gw = wc.grad_mut();
                        for_each_chunk_mut(&mut gw[..], p, |kk, gw_row| {
                            for r in 0..rows {
                                let aik = av[r * k + kk];
                                let d_row = &dv[r * p..(r + 1) * p];
                                for (gv, &d) in gw_row.iter_mut().zip(d_row.iter()) {
                                    *gv += aik * d;
                                }
                            }
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Batched matmul: `[B, M, K] @ [B, K, P] -> [B, M, P]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 3 || other.ndim() != 3 {
            return Err(invalid!(
                "bmm requires 3-D tensors, got {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, p) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if b != b2 || k != k2 {
            return Err(invalid!(
                "bmm shapes incompatible: {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let mut data = vec![0.0; b * m * p];
        {
            let (ad, bd) = (self.data(), other.data());
            let (av, bv): (&[f64], &[f64]) = (&ad, &bd);
            for_each_chunk_mut(&mut data, p, |row, out_row| {
                let (bi, mi) = (row / m, row % m);
                let a_row = &av[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                let b_mat = &bv[bi * k * p..(bi + 1) * k * p];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b_mat[kk * p..(kk + 1) * p];
                    for (o, &bvv) in out_row.iter_mut().zip(b_row.iter()) {
                        *o += aik * bvv;
                    }
                }
            });
        }
        let out = Tensor::from_vec(vec![b, m, p], data)?;
        if let Some(g) = joint_graph(&[self, other])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), other.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), other.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "bmm",
                &[self, other],
                Box::new(move || {
                    let dout = oc.grad();
                    let dv: &[f64] = &dout;
                    if a_needs {
                        // dA[b, m, k] = sum_p dC[b, m, p] * B[b, k, p]
                        let bd = bc.data();
                        let bv: &[f64] = &bd;
                        let mut ga = ac.grad_mut();
                        for_each_chunk_mut(&mut ga[..], k, |row, ga_row| {
                            let (bi, mi) = (row / m, row % m);
                            let d_row = &dv[(bi * m + mi) * p..(bi * m + mi + 1) * p];
                            let b_mat = &bv[bi * k * p..(bi + 1) * k * p];
                            for (kk, gv) in ga_row.iter_mut().enumerate() {
                                let b_row = &b_mat[kk * p..(kk + 1) * p];
                                let mut acc = 0.0;
                                for (&d, &bvv) in d_row.iter().zip(b_row.iter()) {
                                    acc += d * bvv;
                                }
                                *gv += acc;
                            }
                        });
                    }
                    if b_needs {
                        // dB[b, k, p] = sum_m A[b, m, k] * dC[b, m, p]
                        let ad = ac.data();
                        let av: &[f64] = &ad;
                        let mut gb = bc.grad_mut();
                        for_each_chunk_mut(&mut gb[..], p, |row, gb_row| {
                            let (bi, kk) = (row / k, row % k);
                            for mi in 0..m {
                                let aik = av[(bi * m + mi) * k + kk];
                                let d_row = &dv[(bi * m + mi) * p..(bi * m + mi + 1) * p];
                                for (gv, &d) in gb_row.iter_mut().zip(d_row.iter()) {
                                    *gv += aik * d;
                                }
                            }
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Batched matmul with the second operand transposed:
    /// `[B, M, K] @ [B, P, K]^T -> [B, M, P]`. This is `Q @ K^T` in attention.
    pub fn bmm_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 3 || other.ndim() != 3 {
            return Err(invalid!(
                "bmm_nt requires 3-D tensors, got {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, p, k2) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if b != b2 || k != k2 {
            return Err(invalid!(
                "bmm_nt shapes incompatible: {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let mut data = vec![0.0; b * m * p];
        {
            let (ad, bd) = (self.data(), other.data());
            let (av, bv): (&[f64], &[f64]) = (&ad, &bd);
            for_each_chunk_mut(&mut data, p, |row, out_row| {
                let (bi, mi) = (row / m, row % m);
                let a_row = &av[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                let b_mat = &bv[bi * p * k..(bi + 1) * p * k];
                for (pi, o) in out_row.iter_mut().enumerate() {
                    let b_row = &b_mat[pi * k..(pi + 1) * k];
                    let mut acc = 0.0;
                    for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                        acc += x * y;
                    }
                    *o = acc;
                }
            });
        }
        let out = Tensor::from_vec(vec![b, m, p], data)?;
        if let Some(g) = joint_graph(&[self, other])? {
            let (a_needs, b_needs) = (self.tracked_on(&g), other.tracked_on(&g));
            let (ac, bc, oc) = (self.cell().clone(), other.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "bmm_nt",
                &[self, other],
                Box::new(move || {
                    let dout = oc.grad();
                    let dv: &[f64] = &dout;
                    if a_needs {
                        // dA[b, m, k] = sum_p dC[b, m, p] * B[b, p, k]
                        let bd = bc.data();
                        let bv: &[f64] = &bd;
                        let mut ga = ac.grad_mut();
                        for_each_chunk_mut(&mut ga[..], k, |row, ga_row| {
                            let (bi, mi) = (row / m, row % m);
                            let d_row = &dv[(bi * m + mi) * p..(bi * m + mi + 1) * p];
                            let b_mat = &bv[bi * p * k..(bi + 1) * p * k];
                            for (pi, &d) in d_row.iter().enumerate() {
                                let b_row = &b_mat[pi * k..(pi + 1) * k];
                                for (gv, &bvv) in ga_row.iter_mut().zip(b_row.iter()) {
                                    *gv += d * bvv;
                                }
                            }
                        });
                    }
                    if b_needs {
                        // dB[b, p, k] = sum_m dC[b, m, p] * A[b, m, k]
                        let ad = ac.data();
                        let av: &[f64] = &ad;
                        let mut gb = bc.grad_mut();
                        for_each_chunk_mut(&mut gb[..], k, |row, gb_row| {
                            let (bi, pi) = (row / p, row % p);
                            for mi in 0..m {
                                let d = dv[(bi * m + mi) * p + pi];
                                let a_row = &av[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                                for (gv, &x) in gb_row.iter_mut().zip(a_row.iter()) {
                                    *gv += d * x;
                                }
                            }
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Row lookup: treat `self` as a table `[V, D]` and gather one row per
    /// id, giving `ids.shape() + [D]`.
    pub fn embedding(&self, ids: &IntTensor) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(invalid!("embedding table must be 2-D, got {:?}", self.shape()));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.data().iter().find(|&&id| id as usize >= v) {
            return Err(invalid!("id {bad} out of range for table with {v} rows"));
        }
        let n = ids.numel();
        let mut data = vec![0.0; n * d];
        {
            let table = self.data();
            let tv: &[f64] = &table;
            let idv: &[u32] = ids.data();
            for_each_chunk_mut(&mut data, d, |i, row| {
                let src = idv[i] as usize;
                row.copy_from_slice(&tv[src * d..(src + 1) * d]);
            });
        }
        let mut out_shape = ids.shape().to_vec();
        out_shape.push(d);
        let out = Tensor::from_vec(out_shape, data)?;
        if let Some(g) = joint_graph(&[self])? {
            let (tc, oc) = (self.cell().clone(), out.cell().clone());
            let idv = ids.data().to_vec();
            g.record(
                &out,
                "embedding",
                &[self],
                Box::new(move || {
                    let dout = oc.grad();
                    let mut gt = tc.grad_mut();
                    // Scatter-add sequentially: rows can collide on shared ids.
                    for (i, &id) in idv.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        let src = &dout[i * d..(i + 1) * d];
                        for (gv, &dv) in dst.iter_mut().zip(src.iter()) {
                            *gv += dv;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// RMS normalization over the last axis with a learned per-channel gain:
    /// `y = gain * x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("non-empty shape");
        if gain.shape() != [d] {
            return Err(invalid!(
                "rms_norm gain must have shape [{d}], got {:?}",
                gain.shape()
            ));
        }
        if eps <= 0.0 {
            return Err(invalid!("rms_norm eps must be positive, got {eps}"));
        }
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        let mut inv_rms = vec![0.0; rows];
        {
            let (x, gv) = (self.data(), gain.data());
            let (xs, gs): (&[f64], &[f64]) = (&x, &gv);
            for (r, ir) in inv_rms.iter_mut().enumerate() {
                let row = &xs[r * d..(r + 1) * d];
                let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                *ir = 1.0 / (ms + eps).sqrt();
            }
            let inv: &[f64] = &inv_rms;
            for_each_chunk_mut(&mut data, d, |r, out_row| {
                let row = &xs[r * d..(r + 1) * d];
                let ir = inv[r];
                for ((o, &xv), &gg) in out_row.iter_mut().zip(row.iter()).zip(gs.iter()) {
                    *o = gg * xv * ir;
                }
            });
        }
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self, gain])? {
            let (x_needs, g_needs) = (self.tracked_on(&g), gain.tracked_on(&g));
            let (xc, gc, oc) = (self.cell().clone(), gain.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "rms_norm",
                &[self, gain],
                Box::new(move || {
                    let dout = oc.grad();
                    let x = xc.data();
                    let gv = gc.data();
                    let (dv, xs, gs): (&[f64], &[f64], &[f64]) = (&dout, &x, &gv);
                    let inv: &[f64] = &inv_rms;
                    if x_needs {
                        let mut gx = xc.grad_mut();
                        for_each_chunk_mut(&mut gx[..], d, |r, gx_row| {
                            let row = &xs[r * d..(r + 1) * d];
                            let d_row = &dv[r * d..(r + 1) * d];
                            let ir = inv[r];
                            // s = sum_i dy_i * g_i * x_i
                            let mut s = 0.0;
                            for ((&dy, &gg), &xv) in d_row.iter().zip(gs.iter()).zip(row.iter()) {
                                s += dy * gg * xv;
                            }
                            let c = s * ir * ir * ir / d as f64;
                            for ((gx_v, (&dy, &gg)), &xv) in gx_row
                                .iter_mut()
                                .zip(d_row.iter().zip(gs.iter()))
                                .zip(row.iter())
                            {
                                *gx_v += dy * gg * ir - xv * c;
                            }
                        });
                    }
                    if g_needs {
                        let mut gg = gc.grad_mut();
                        for r in 0..rows {
                            let row = &xs[r * d..(r + 1) * d];
                            let d_row = &dv[r * d..(r + 1) * d];
                            let ir = inv[r];
                            for ((gv_i, &dy), &xv) in
                                gg.iter_mut().zip(d_row.iter()).zip(row.iter())
                            {
                                *gv_i += dy * xv * ir;
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// SiLU activation `x * sigmoid(x)`, elementwise.
    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::from_vec(self.shape().to_vec(), data)?;
        if let Some(g) = joint_graph(&[self])? {
            let (xc, oc) = (self.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "silu",
                &[self],
                Box::new(move || {
                    let dout = oc.grad();
                    let x = xc.data();
                    let (dv, xs): (&[f64], &[f64]) = (&dout, &x);
                    let mut gx = xc.grad_mut();
                    for ((g, &d), &xv) in gx.iter_mut().zip(dv.iter()).zip(xs.iter()) {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *g += d * sig * (1.0 + xv * (1.0 - sig));
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Softmax of `logits / temperature` over the last axis.
    ///
    /// Rows are shifted by their maximum before exponentiation, so any
    /// finite logits (and `-inf` masks) are safe; each output row sums to 1.
    pub fn softmax_with_temperature(&self, temperature: f64) -> Result<Tensor> {
        softmax_family(self, temperature, false)
    }

    /// Log-softmax of `logits / temperature` over the last axis. Equals
    /// `softmax_with_temperature(...).ln()` but stays finite for any finite
    /// logits.
    pub fn log_softmax_with_temperature(&self, temperature: f64) -> Result<Tensor> {
        softmax_family(self, temperature, true)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(invalid!("narrow axis {axis} out of range for {:?}", self.shape()));
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(invalid!(
                "narrow range {start}..{} out of bounds for axis of size {dim}",
                start + len
            ));
        }
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = &x[(o * dim + start) * inner..(o * dim + start + len) * inner];
                data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        if let Some(g) = joint_graph(&[self])? {
            let (xc, oc) = (self.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "narrow",
                &[self],
                Box::new(move || {
                    let dout = oc.grad();
                    let mut gx = xc.grad_mut();
                    for o in 0..outer {
                        let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &dout[o * len * inner..(o + 1) * len * inner];
                        for (gv, &d) in dst.iter_mut().zip(src.iter()) {
                            *gv += d;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Reinterpret the data with a new shape of the same element count.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if new_shape.is_empty() || n != self.numel() {
            return Err(invalid!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape(),
                self.numel(),
                new_shape
            ));
        }
        let out = Tensor::from_vec(new_shape, self.to_vec())?;
        if let Some(g) = joint_graph(&[self])? {
            let (xc, oc) = (self.cell().clone(), out.cell().clone());
            g.record(
                &out,
                "reshape",
                &[self],
                Box::new(move || {
                    let dout = oc.grad();
                    for (gx, &d) in xc.grad_mut().iter_mut().zip(dout.iter()) {
                        *gx += d;
                    }
                }),
            );
        }
        Ok(out)
    }
}

/// Concatenate tensors along their last axis. All parts must share the
/// leading shape.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(invalid!("concat_last requires at least one tensor"));
    }
    let lead = &parts[0].shape()[..parts[0].ndim() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for t in parts {
        if &t.shape()[..t.ndim() - 1] != lead {
            return Err(invalid!(
                "concat_last leading shapes differ: {:?} vs {:?}",
                parts[0].shape(),
                t.shape()
            ));
        }
        widths.push(*t.shape().last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = vec![0.0; rows * total];
    {
        let borrowed: Vec<_> = parts.iter().map(|t| t.data()).collect();
        for r in 0..rows {
            let mut off = 0;
            for (src, &w) in borrowed.iter().zip(widths.iter()) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
                off += w;
            }
        }
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let out = Tensor::from_vec(out_shape, data)?;
    if let Some(g) = joint_graph(parts)? {
        let needs: Vec<bool> = parts.iter().map(|t| t.tracked_on(&g)).collect();
        let cells: Vec<_> = parts.iter().map(|t| t.cell().clone()).collect();
        let oc = out.cell().clone();
        g.record(
            &out,
            "concat_last",
            parts,
            Box::new(move || {
                let dout = oc.grad();
                let mut off = 0;
                for ((cell, &w), &need) in cells.iter().zip(widths.iter()).zip(needs.iter()) {
                    if need {
                        let mut gx = cell.grad_mut();
                        for r in 0..rows {
                            let src = &dout[r * total + off..r * total + off + w];
                            for (gv, &d) in gx[r * w..(r + 1) * w].iter_mut().zip(src.iter()) {
                                *gv += d;
                            }
                        }
                    }
                    off += w;
                }
            }),
        );
    }
    Ok(out)
}

fn softmax_family(x: &Tensor, temperature: f64, log: bool) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid!(
            "temperature must be positive and finite, got {temperature}"
        ));
    }
    let v = *x.shape().last().expect("non-empty shape");
    if v == 0 {
        return Err(invalid!("softmax over an empty last axis"));
    }
    let mut data = vec![0.0; x.numel()];
    {
        let xd = x.data();
        let xs: &[f64] = &xd;
        for_each_chunk_mut(&mut data, v, |r, out_row| {
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &z) in out_row.iter_mut().zip(row.iter()) {
                let e = ((z - max) / temperature).exp();
                *o = e;
                denom += e;
            }
            if log {
                let lse = denom.ln();
                for (o, &z) in out_row.iter_mut().zip(row.iter()) {
                    *o = (z - max) / temperature - lse;
                }
            } else {
                for o in out_row.iter_mut() {
                    *o /= denom;
                }
            }
        });
    }
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(g) = joint_graph(&[x])? {
        let (xc, oc) = (x.cell().clone(), out.cell().clone());
        let name = if log { "log_softmax" } else { "softmax" };
        g.record(
            &out,
            name,
            &[x],
            Box::new(move || {
                let dout = oc.grad();
                let y = oc.data();
                let (dv, ys): (&[f64], &[f64]) = (&dout, &y);
                let mut gx = xc.grad_mut();
                for_each_chunk_mut(&mut gx[..], v, |r, gx_row| {
                    let d_row = &dv[r * v..(r + 1) * v];
                    let y_row = &ys[r * v..(r + 1) * v];
                    if log {
                        // dx_i = (dy_i - softmax_i * sum_j dy_j) / T
                        let sum_dy: f64 = d_row.iter().sum();
                        for ((gv, &dy), &ly) in
                            gx_row.iter_mut().zip(d_row.iter()).zip(y_row.iter())
                        {
                            *gv += (dy - ly.exp() * sum_dy) / temperature;
                        }
                    } else {
                        // dx_i = y_i * (dy_i - sum_j dy_j y_j) / T
                        let mut dot = 0.0;
                        for (&dy, &yy) in d_row.iter().zip(y_row.iter()) {
                            dot += dy * yy;
                        }
                        for ((gv, &dy), &yy) in
                            gx_row.iter_mut().zip(d_row.iter()).zip(y_row.iter())
                        {
                            *gv += yy * (dy - dot) / temperature;
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under `log_probs`.
///
/// `log_probs` has shape `[..., V]`; `targets` must match the leading shape.
/// Positions whose target equals `ignore_index` contribute nothing and are
/// excluded from the mean. Errors if a target is out of range or every
/// position is ignored.
pub fn cross_entropy(
    log_probs: &Tensor,
    targets: &IntTensor,
    ignore_index: Option<u32>,
) -> Result<Tensor> {
    let v = *log_probs.shape().last().expect("non-empty shape");
    let lead = &log_probs.shape()[..log_probs.ndim() - 1];
    if targets.shape() != lead {
        return Err(invalid!(
            "targets shape {:?} must match log-prob leading shape {:?}",
            targets.shape(),
            lead
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    {
        let lp = log_probs.data();
        for (i, &t) in targets.data().iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t as usize >= v {
                return Err(invalid!("target {t} out of range for vocabulary of {v}"));
            }
            total -= lp[i * v + t as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid!("cross_entropy: every position is ignored"));
    }
    let out = Tensor::scalar(total / count as f64);
    if let Some(g) = joint_graph(&[log_probs])? {
        let (lc, oc) = (log_probs.cell().clone(), out.cell().clone());
        let tv = targets.data().to_vec();
        g.record(
            &out,
            "cross_entropy",
            &[log_probs],
            Box::new(move || {
                let d = oc.grad()[0];
                let scale = -d / count as f64;
                let mut gl = lc.grad_mut();
                for (i, &t) in tv.iter().enumerate() {
                    if Some(t) == ignore_index {
                        continue;
                    }
                    gl[i * v + t as usize] += scale;
                }
            }),
        );
    }
    Ok(out)
}

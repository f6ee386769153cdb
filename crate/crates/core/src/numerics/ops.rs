//! Differentiable tensor operations.
//!
//! Each op computes its value eagerly and, when any input participates in
//! a tape, records a node whose backward closure produces the gradient
//! contribution for each attached input. Inputs without tape
//! participation act as constants: no gradient flows into them.
//!
//! Broadcasting is deliberately limited to "vector over rows"
//! (`add_bias`); everything else requires explicit shapes.

use std::rc::Rc;

use super::error::{NumericsError, Result};
use super::scalar::Scalar;
use super::tape::{attach, merge_tape, node_id_on, BackwardFn};
use super::tensor::Tensor;

// ---------------------------------------------------------------------------
// Raw kernels (also used by backward closures).
// ---------------------------------------------------------------------------

/// a[m×k] · b[k×n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

/// a[m×k] · b[n×k]ᵀ. Transposes `b` once so the inner loops run as
/// contiguous axpy updates, which vectorize far better than dot-product
/// reductions.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        let b_row = &b[j * k..(j + 1) * k];
        for (p, &v) in b_row.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    gemm_nn(a, &bt, m, k, n)
}

/// a[m×k]ᵀ · g[m×n] → [k×n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    let mut c = vec![T::ZERO; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += a_ip * gv;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Recording helpers.
// ---------------------------------------------------------------------------

fn record_unary<T, F>(out: Tensor<T>, x: &Tensor<T>, back: F) -> Tensor<T>
where
    T: Scalar,
    F: FnOnce(&[T]) -> Vec<T> + 'static,
{
    match &x.node {
        None => out,
        Some(r) => {
            let id = r
                .tape
                .push(vec![r.id], out.len(), Some(Box::new(move |g| vec![back(g)])));
            attach(out, &r.tape.clone(), id)
        }
    }
}

fn record_binary<T, FA, FB>(
    out: Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    back_a: FA,
    back_b: FB,
) -> Result<Tensor<T>>
where
    T: Scalar,
    FA: FnOnce(&[T]) -> Vec<T> + 'static,
    FB: FnOnce(&[T]) -> Vec<T> + 'static,
{
    let Some(tape) = merge_tape(&[a, b])? else {
        return Ok(out);
    };
    let a_id = node_id_on(a, &tape);
    let b_id = node_id_on(b, &tape);
    let parents: Vec<usize> = a_id.iter().chain(b_id.iter()).copied().collect();
    let (need_a, need_b) = (a_id.is_some(), b_id.is_some());
    let backward: BackwardFn<T> = Box::new(move |g| {
        let mut v = Vec::with_capacity(2);
        if need_a {
            v.push(back_a(g));
        }
        if need_b {
            v.push(back_b(g));
        }
        v
    });
    let id = tape.push(parents, out.len(), Some(backward));
    Ok(attach(out, &tape, id))
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = Tensor::from_op(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n));
    let ad = a.data_rc();
    let bd = b.data_rc();
    record_binary(
        out,
        a,
        b,
        move |g| gemm_nt(g, &bd, m, n, k),
        move |g| gemm_tn(&ad, g, m, k, n),
    )
}

/// a · bᵀ, with `b` given row-major as [n×k].
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = Tensor::from_op(vec![m, n], gemm_nt(a.data(), b.data(), m, k, n));
    let ad = a.data_rc();
    let bd = b.data_rc();
    record_binary(
        out,
        a,
        b,
        move |g| gemm_nn(g, &bd, m, n, k),
        move |g| gemm_tn(g, &ad, m, n, k),
    )
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("transpose")?;
    let xd = x.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    let out = Tensor::from_op(vec![n, m], out);
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; m * n];
        for j in 0..n {
            for i in 0..m {
                gx[i * n + j] = g[j * m + i];
            }
        }
        gx
    }))
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops.
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_op(a.shape().to_vec(), data);
    record_binary(out, a, b, |g| g.to_vec(), |g| g.to_vec())
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::from_op(a.shape().to_vec(), data);
    record_binary(out, a, b, |g| g.to_vec(), |g| g.iter().map(|&v| -v).collect())
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_op(a.shape().to_vec(), data);
    let ad = a.data_rc();
    let bd = b.data_rc();
    record_binary(
        out,
        a,
        b,
        move |g| g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect(),
        move |g| g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect(),
    )
}

/// Multiply by a compile-time constant (no gradient into the constant).
pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c_t = T::from_f64(c);
    let data = x.data().iter().map(|&v| v * c_t).collect();
    let out = Tensor::from_op(x.shape().to_vec(), data);
    record_unary(out, x, move |g| g.iter().map(|&v| v * c_t).collect())
}

/// Multiply every element by a learnable scalar (a 1-element tensor).
pub fn mul_scalar_t<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let sv = s.item()?;
    let data = x.data().iter().map(|&v| v * sv).collect();
    let out = Tensor::from_op(x.shape().to_vec(), data);
    let xd = x.data_rc();
    record_binary(
        out,
        x,
        s,
        move |g| g.iter().map(|&v| v * sv).collect(),
        move |g| {
            let acc = g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv * xv).sum();
            vec![acc]
        },
    )
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| v.exp()).collect();
    let out = Tensor::from_op(x.shape().to_vec(), data);
    let yd = out.data_rc();
    record_unary(out, x, move |g| {
        g.iter().zip(yd.iter()).map(|(&gv, &yv)| gv * yv).collect()
    })
}

/// Adds a bias vector to every row of a matrix.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("add_bias")?;
    if bias.shape() != [n] {
        return Err(NumericsError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let bd_fwd = bias.data();
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(bd_fwd).map(|(&v, &b)| v + b))
        .collect();
    let out = Tensor::from_op(vec![m, n], data);
    record_binary(
        out,
        x,
        bias,
        |g| g.to_vec(),
        move |g| {
            let mut gb = vec![T::ZERO; n];
            for row in g.chunks_exact(n) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            gb
        },
    )
}

/// GELU with the tanh approximation, evaluated through the sigmoid
/// identity 0.5(1 + tanh(u)) = σ(2u) so each element costs one exp.
/// Forward sigmoids are saved for the backward pass.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c2 = T::from_f64(2.0 * 0.7978845608028654); // 2 * sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let mut sigmoids = Vec::with_capacity(n);
    for &v in x.data() {
        let u2 = c2 * (v + k * v * v * v);
        let s = T::ONE / (T::ONE + (-u2).exp());
        sigmoids.push(s);
        data.push(v * s);
    }
    let out = Tensor::from_op(x.shape().to_vec(), data);
    let xd = x.data_rc();
    record_unary(out, x, move |g| {
        g.iter()
            .zip(xd.iter())
            .zip(&sigmoids)
            .map(|((&gv, &v), &s)| {
                let du2 = c2 * (T::ONE + T::from_f64(3.0) * k * v * v);
                gv * (s + v * s * (T::ONE - s) * du2)
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Reductions and normalizers.
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.data().iter().copied().sum();
    let out = Tensor::scalar(total);
    let len = x.len();
    record_unary(out, x, move |g| vec![g[0]; len])
}

/// Mean over rows of a matrix, keeping a [1×d] result.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("mean_rows")?;
    let inv = T::from_f64(1.0 / m as f64);
    let mut data = vec![T::ZERO; n];
    for row in x.data().chunks_exact(n) {
        for (acc, &v) in data.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut data {
        *v *= inv;
    }
    let out = Tensor::from_op(vec![1, n], data);
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; m * n];
        for row in gx.chunks_exact_mut(n) {
            for (slot, &gv) in row.iter_mut().zip(g) {
                *slot = gv * inv;
            }
        }
        gx
    }))
}

/// Row-stable softmax: each output row is nonnegative and sums to one.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut data = vec![T::ZERO; m * n];
    for (out_row, row) in data.chunks_exact_mut(n).zip(x.data().chunks_exact(n)) {
        let max = row.iter().fold(row[0], |acc, &v| acc.max(v));
        let mut denom = T::ZERO;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            denom += e;
        }
        let inv = T::ONE / denom;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    let out = Tensor::from_op(vec![m, n], data);
    let yd = out.data_rc();
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; m * n];
        for ((gx_row, g_row), y_row) in gx
            .chunks_exact_mut(n)
            .zip(g.chunks_exact(n))
            .zip(yd.chunks_exact(n))
        {
            let dot: T = g_row.iter().zip(y_row).map(|(&gv, &yv)| gv * yv).sum();
            for ((slot, &gv), &yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                *slot = yv * (gv - dot);
            }
        }
        gx
    }))
}

/// Per-row layer normalization followed by a learned affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (m, d) = x.dims2("layer_norm")?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if d == 0 {
        return Err(NumericsError::Config {
            op: "layer_norm",
            msg: "feature dimension must be >= 1".into(),
        });
    }
    if eps <= 0.0 {
        return Err(NumericsError::Config {
            op: "layer_norm",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let eps_t = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let gd = gain.data();
    let bd = bias.data();
    let mut data = vec![T::ZERO; m * d];
    let mut xhat = vec![T::ZERO; m * d];
    let mut inv_std = vec![T::ZERO; m];
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        let mean: T = row.iter().copied().sum::<T>() * inv_d;
        let var: T = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            * inv_d;
        let inv = T::ONE / (var + eps_t).sqrt();
        inv_std[r] = inv;
        let out_row = &mut data[r * d..(r + 1) * d];
        let xh_row = &mut xhat[r * d..(r + 1) * d];
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xh_row[j] = h;
            out_row[j] = h * gd[j] + bd[j];
        }
    }
    let out = Tensor::from_op(vec![m, d], data);

    let Some(tape) = merge_tape(&[x, gain, bias])? else {
        return Ok(out);
    };
    let x_id = node_id_on(x, &tape);
    let g_id = node_id_on(gain, &tape);
    let b_id = node_id_on(bias, &tape);
    let parents: Vec<usize> = [x_id, g_id, b_id].iter().flatten().copied().collect();
    let gain_data = gain.data_rc();
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let backward: BackwardFn<T> = Box::new(move |g| {
        let mut v = Vec::with_capacity(3);
        if x_id.is_some() {
            let mut gx = vec![T::ZERO; m * d];
            for r in 0..m {
                let g_row = &g[r * d..(r + 1) * d];
                let xh_row = &xhat[r * d..(r + 1) * d];
                let gx_row = &mut gx[r * d..(r + 1) * d];
                let inv = inv_std[r];
                // gg = g .* gain; dx = (gg - mean(gg) - xhat * mean(gg .* xhat)) * inv
                let mut mean_gg = T::ZERO;
                let mut mean_ggx = T::ZERO;
                for j in 0..d {
                    let gg = g_row[j] * gain_data[j];
                    mean_gg += gg;
                    mean_ggx += gg * xh_row[j];
                }
                mean_gg *= inv_d;
                mean_ggx *= inv_d;
                for j in 0..d {
                    let gg = g_row[j] * gain_data[j];
                    gx_row[j] = (gg - mean_gg - xh_row[j] * mean_ggx) * inv;
                }
            }
            v.push(gx);
        }
        if g_id.is_some() {
            let mut ggain = vec![T::ZERO; d];
            for (g_row, xh_row) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for ((acc, &gv), &hv) in ggain.iter_mut().zip(g_row).zip(xh_row) {
                    *acc += gv * hv;
                }
            }
            v.push(ggain);
        }
        if b_id.is_some() {
            let mut gbias = vec![T::ZERO; d];
            for g_row in g.chunks_exact(d) {
                for (acc, &gv) in gbias.iter_mut().zip(g_row) {
                    *acc += gv;
                }
            }
            v.push(gbias);
        }
        v
    });
    let id = tape.push(parents, m * d, Some(backward));
    Ok(attach(out, &tape, id))
}

/// Rescales each row to (near) unit L2 norm: y = x / sqrt(|x|² + eps).
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (m, d) = x.dims2("normalize_rows")?;
    let eps_t = T::from_f64(eps);
    let mut data = vec![T::ZERO; m * d];
    let mut inv_norms = vec![T::ZERO; m];
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        let sq: T = row.iter().map(|&v| v * v).sum();
        let inv = T::ONE / (sq + eps_t).sqrt();
        inv_norms[r] = inv;
        for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    let out = Tensor::from_op(vec![m, d], data);
    let yd = out.data_rc();
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; m * d];
        for r in 0..m {
            let g_row = &g[r * d..(r + 1) * d];
            let y_row = &yd[r * d..(r + 1) * d];
            let dot: T = g_row.iter().zip(y_row).map(|(&gv, &yv)| gv * yv).sum();
            let inv = inv_norms[r];
            for (slot, (&gv, &yv)) in gx[r * d..(r + 1) * d]
                .iter_mut()
                .zip(g_row.iter().zip(y_row))
            {
                *slot = (gv - yv * dot) * inv;
            }
        }
        gx
    }))
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// Mean negative log-softmax probability of the target classes.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let wrapped: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    cross_entropy_masked(logits, &wrapped)
}

/// Cross entropy that skips rows whose target is `None`; the mean runs
/// over unmasked rows only, and masked rows receive exactly zero gradient.
pub fn cross_entropy_masked<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
) -> Result<Tensor<T>> {
    let (m, v) = logits.dims2("cross_entropy")?;
    if targets.len() != m {
        return Err(NumericsError::BadShape {
            op: "cross_entropy",
            expected: format!("{m} targets"),
            got: vec![targets.len()],
        });
    }
    for t in targets.iter().flatten() {
        if *t >= v {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                index: *t,
                bound: v,
            });
        }
    }
    let n_active = targets.iter().flatten().count();
    if n_active == 0 {
        return Err(NumericsError::Config {
            op: "cross_entropy",
            msg: "no unmasked targets".into(),
        });
    }
    let inv_active = T::from_f64(1.0 / n_active as f64);
    let ld = logits.data();
    let mut loss = T::ZERO;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let row = &ld[r * v..(r + 1) * v];
        let max = row.iter().fold(row[0], |acc, &x| acc.max(x));
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[*t];
    }
    loss *= inv_active;
    let out = Tensor::scalar(loss);
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite { op: "cross_entropy" });
    }
    let ld_rc = logits.data_rc();
    let targets: Vec<Option<usize>> = targets.to_vec();
    Ok(record_unary(out, logits, move |g| {
        let gv = g[0] * inv_active;
        let mut gx = vec![T::ZERO; m * v];
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &ld_rc[r * v..(r + 1) * v];
            let max = row.iter().fold(row[0], |acc, &x| acc.max(x));
            let mut denom = T::ZERO;
            let gx_row = &mut gx[r * v..(r + 1) * v];
            for (slot, &x) in gx_row.iter_mut().zip(row) {
                let e = (x - max).exp();
                *slot = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for slot in gx_row.iter_mut() {
                *slot *= inv * gv;
            }
            gx_row[*t] -= gv;
        }
        gx
    }))
}

/// Mean squared error against a constant target.
pub fn mse_to<T: Scalar>(pred: &Tensor<T>, target: &[T]) -> Result<Tensor<T>> {
    if pred.len() != target.len() {
        return Err(NumericsError::BadShape {
            op: "mse_to",
            expected: format!("{} target elements", pred.len()),
            got: vec![target.len()],
        });
    }
    let n = pred.len();
    let inv = T::from_f64(1.0 / n as f64);
    let loss: T = pred
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        * inv;
    let out = Tensor::scalar(loss);
    let pd = pred.data_rc();
    let target = target.to_vec();
    Ok(record_unary(out, pred, move |g| {
        let two = T::from_f64(2.0);
        let c = g[0] * inv * two;
        pd.iter()
            .zip(&target)
            .map(|(&p, &t)| c * (p - t))
            .collect()
    }))
}

// ---------------------------------------------------------------------------
// Lookup and layout ops.
// ---------------------------------------------------------------------------

/// Gathers rows of an embedding table; gradients scatter-add back.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, d) = table.dims2("embedding")?;
    for &id in ids {
        if id >= vocab {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding",
                index: id,
                bound: vocab,
            });
        }
    }
    let td = table.data();
    let m = ids.len();
    let mut data = vec![T::ZERO; m * d];
    for (out_row, &id) in data.chunks_exact_mut(d).zip(ids) {
        out_row.copy_from_slice(&td[id * d..(id + 1) * d]);
    }
    let out = Tensor::from_op(vec![m, d], data);
    let ids = ids.to_vec();
    Ok(record_unary(out, table, move |g| {
        let mut gt = vec![T::ZERO; vocab * d];
        for (g_row, &id) in g.chunks_exact(d).zip(&ids) {
            for (slot, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(g_row) {
                *slot += gv;
            }
        }
        gt
    }))
}

/// Rotates coordinate pairs (2i, 2i+1) of each row by per-row, per-pair
/// angles. Angles are constants: the backward pass rotates by the
/// negated angles (the inverse rotation).
pub fn rotate_pairs<T: Scalar>(x: &Tensor<T>, angles: &[f64]) -> Result<Tensor<T>> {
    let mut cos_sin = Vec::with_capacity(angles.len() * 2);
    for &a in angles {
        cos_sin.push(T::from_f64(a.cos()));
        cos_sin.push(T::from_f64(a.sin()));
    }
    rotate_pairs_planned(x, &Rc::new(cos_sin))
}

/// `rotate_pairs` against a precomputed interleaved (cos, sin) table,
/// so repeated applications at the same positions share the trig work.
pub fn rotate_pairs_planned<T: Scalar>(x: &Tensor<T>, cos_sin: &Rc<Vec<T>>) -> Result<Tensor<T>> {
    let (m, d) = x.dims2("rotate_pairs")?;
    if d % 2 != 0 {
        return Err(NumericsError::Config {
            op: "rotate_pairs",
            msg: format!("row width must be even, got {d}"),
        });
    }
    let half = d / 2;
    if cos_sin.len() != m * half * 2 {
        return Err(NumericsError::BadShape {
            op: "rotate_pairs",
            expected: format!("{} cos/sin entries", m * half * 2),
            got: vec![cos_sin.len()],
        });
    }
    let table = Rc::clone(cos_sin);
    let rotate = move |input: &[T], flip: bool| -> Vec<T> {
        let mut out = vec![T::ZERO; m * d];
        for r in 0..m {
            let row = &input[r * d..(r + 1) * d];
            let out_row = &mut out[r * d..(r + 1) * d];
            let cs = &table[r * half * 2..(r + 1) * half * 2];
            for p in 0..half {
                let c = cs[2 * p];
                let mut s = cs[2 * p + 1];
                if flip {
                    s = -s;
                }
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                out_row[2 * p] = x0 * c - x1 * s;
                out_row[2 * p + 1] = x0 * s + x1 * c;
            }
        }
        out
    };
    let out = Tensor::from_op(vec![m, d], rotate(x.data(), false));
    Ok(record_unary(out, x, move |g| rotate(g, true)))
}

/// Stacks matrices with equal column counts on top of each other.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(NumericsError::Config {
            op: "concat_rows",
            msg: "no parts".into(),
        });
    }
    let (_, n) = parts[0].dims2("concat_rows")?;
    let mut rows = 0;
    for p in parts {
        let (m_p, n_p) = p.dims2("concat_rows")?;
        if n_p != n {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += m_p;
    }
    let mut data = Vec::with_capacity(rows * n);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let out = Tensor::from_op(vec![rows, n], data);

    let Some(tape) = merge_tape(parts)? else {
        return Ok(out);
    };
    // Row ranges of the attached parts, aligned with the parents list.
    let mut parents = Vec::new();
    let mut ranges = Vec::new();
    let mut offset = 0;
    for p in parts {
        let m_p = p.dims2("concat_rows")?.0;
        if let Some(id) = node_id_on(p, &tape) {
            parents.push(id);
            ranges.push(offset * n..(offset + m_p) * n);
        }
        offset += m_p;
    }
    let backward: BackwardFn<T> = Box::new(move |g| {
        ranges.iter().map(|r| g[r.clone()].to_vec()).collect()
    });
    let id = tape.push(parents, rows * n, Some(backward));
    Ok(attach(out, &tape, id))
}

/// Splits a matrix into equal-width column blocks.
pub fn split_cols<T: Scalar>(x: &Tensor<T>, blocks: usize) -> Result<Vec<Tensor<T>>> {
    let (m, n) = x.dims2("split_cols")?;
    if blocks == 0 || n % blocks != 0 {
        return Err(NumericsError::Config {
            op: "split_cols",
            msg: format!("{n} columns not divisible into {blocks} blocks"),
        });
    }
    let w = n / blocks;
    let xd = x.data();
    let mut outs = Vec::with_capacity(blocks);
    for blk in 0..blocks {
        let mut data = vec![T::ZERO; m * w];
        for r in 0..m {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&xd[r * n + blk * w..r * n + (blk + 1) * w]);
        }
        let out = Tensor::from_op(vec![m, w], data);
        outs.push(record_unary(out, x, move |g| {
            let mut gx = vec![T::ZERO; m * n];
            for r in 0..m {
                gx[r * n + blk * w..r * n + (blk + 1) * w]
                    .copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            gx
        }));
    }
    Ok(outs)
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(NumericsError::Config {
            op: "concat_cols",
            msg: "no parts".into(),
        });
    }
    let (m, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut n = 0;
    for p in parts {
        let (m_p, w) = p.dims2("concat_cols")?;
        if m_p != m {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(w);
        n += w;
    }
    let mut data = vec![T::ZERO; m * n];
    let mut col = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..m {
            data[r * n + col..r * n + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        col += w;
    }
    let out = Tensor::from_op(vec![m, n], data);

    let Some(tape) = merge_tape(parts)? else {
        return Ok(out);
    };
    let mut parents = Vec::new();
    let mut blocks = Vec::new();
    let mut col = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        if let Some(id) = node_id_on(p, &tape) {
            parents.push(id);
            blocks.push((col, w));
        }
        col += w;
    }
    let backward: BackwardFn<T> = Box::new(move |g| {
        blocks
            .iter()
            .map(|&(col, w)| {
                let mut gp = vec![T::ZERO; m * w];
                for r in 0..m {
                    gp[r * w..(r + 1) * w].copy_from_slice(&g[r * n + col..r * n + col + w]);
                }
                gp
            })
            .collect()
    });
    let id = tape.push(parents, m * n, Some(backward));
    Ok(attach(out, &tape, id))
}

/// Rotates pair (2i, 2i+1) columns of an [m, w] block by the cos/sin
/// table (per row, per pair), in place.
fn rotate_block_inplace<T: Scalar>(block: &mut [T], cos_sin: &[T], m: usize, w: usize, flip: bool) {
    let half = w / 2;
    for r in 0..m {
        let row = &mut block[r * w..(r + 1) * w];
        let cs = &cos_sin[r * half * 2..(r + 1) * half * 2];
        for p in 0..half {
            let c = cs[2 * p];
            let mut s = cs[2 * p + 1];
            if flip {
                s = -s;
            }
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = x0 * c - x1 * s;
            row[2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

fn copy_cols<T: Scalar>(src: &[T], m: usize, n: usize, col: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * w];
    for r in 0..m {
        out[r * w..(r + 1) * w].copy_from_slice(&src[r * n + col..r * n + col + w]);
    }
    out
}

fn add_into_cols<T: Scalar>(dst: &mut [T], block: &[T], m: usize, n: usize, col: usize, w: usize) {
    for r in 0..m {
        for (d, &s) in dst[r * n + col..r * n + col + w].iter_mut().zip(&block[r * w..(r + 1) * w])
        {
            *d += s;
        }
    }
}

/// Fused multi-head scaled-dot-product attention with rotary position
/// encoding applied to queries and keys. `q`, `k`, `v` are full-width
/// [L, d] projections; `cos_sin` is the per-row rotation table for one
/// head's width; `mask` is an additive [L, L] constant. Returns the
/// full-width context (before the output projection) and optionally
/// pushes each head's softmax probabilities into `record_probs`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cos_sin: &Rc<Vec<T>>,
    n_heads: usize,
    mask: &Tensor<T>,
    mut record_probs: Option<&mut Vec<Tensor<T>>>,
) -> Result<Tensor<T>> {
    let (m, d) = q.dims2("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumericsError::Config {
            op: "attention",
            msg: format!("{d} columns not divisible into {n_heads} heads"),
        });
    }
    let hd = d / n_heads;
    if hd % 2 != 0 || cos_sin.len() != m * hd {
        return Err(NumericsError::Config {
            op: "attention",
            msg: "rotation table does not match head width".into(),
        });
    }
    if mask.shape() != [m, m] {
        return Err(NumericsError::BadShape {
            op: "attention",
            expected: format!("[{m}, {m}] mask"),
            got: mask.shape().to_vec(),
        });
    }
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let (qd, kd, vd, maskd) = (q.data(), k.data(), v.data(), mask.data());
    let mut out = vec![T::ZERO; m * d];
    // Saved per head for the backward pass.
    let mut saved: Vec<(Rc<Vec<T>>, Rc<Vec<T>>, Rc<Vec<T>>, Rc<Vec<T>>)> =
        Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let col = h * hd;
        let mut q_h = copy_cols(qd, m, d, col, hd);
        let mut k_h = copy_cols(kd, m, d, col, hd);
        let v_h = copy_cols(vd, m, d, col, hd);
        rotate_block_inplace(&mut q_h, cos_sin, m, hd, false);
        rotate_block_inplace(&mut k_h, cos_sin, m, hd, false);

        let mut scores = gemm_nt(&q_h, &k_h, m, hd, m);
        for (sv, &mv) in scores.iter_mut().zip(maskd) {
            *sv = *sv * scale + mv;
        }
        // Row softmax in place.
        for row in scores.chunks_exact_mut(m) {
            let max = row.iter().fold(row[0], |acc, &x| acc.max(x));
            let mut denom = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                denom += *x;
            }
            let inv = T::ONE / denom;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let probs = scores;
        if let Some(sink) = record_probs.as_deref_mut() {
            sink.push(Tensor::from_op(vec![m, m], probs.clone()));
        }
        let ctx = gemm_nn(&probs, &v_h, m, m, hd);
        for r in 0..m {
            out[r * d + col..r * d + col + hd].copy_from_slice(&ctx[r * hd..(r + 1) * hd]);
        }
        saved.push((
            Rc::new(q_h),
            Rc::new(k_h),
            Rc::new(v_h),
            Rc::new(probs),
        ));
    }
    let out = Tensor::from_op(vec![m, d], out);

    let Some(tape) = merge_tape(&[q, k, v])? else {
        return Ok(out);
    };
    let q_id = node_id_on(q, &tape);
    let k_id = node_id_on(k, &tape);
    let v_id = node_id_on(v, &tape);
    let parents: Vec<usize> = [q_id, k_id, v_id].iter().flatten().copied().collect();
    let table = Rc::clone(cos_sin);
    let backward: BackwardFn<T> = Box::new(move |g| {
        let mut dq = vec![T::ZERO; m * d];
        let mut dk = vec![T::ZERO; m * d];
        let mut dv = vec![T::ZERO; m * d];
        for (h, (q_h, k_h, v_h, probs)) in saved.iter().enumerate() {
            let col = h * hd;
            let g_h = copy_cols(g, m, d, col, hd);
            // dV = Pᵀ g ; dP = g Vᵀ
            let dv_h = gemm_tn(probs, &g_h, m, m, hd);
            let dp = gemm_nt(&g_h, v_h, m, hd, m);
            // Softmax backward, then undo the scale.
            let mut ds = vec![T::ZERO; m * m];
            for r in 0..m {
                let p_row = &probs[r * m..(r + 1) * m];
                let dp_row = &dp[r * m..(r + 1) * m];
                let dot: T = p_row.iter().zip(dp_row).map(|(&pv, &dv)| pv * dv).sum();
                for ((slot, &pv), &dpv) in ds[r * m..(r + 1) * m]
                    .iter_mut()
                    .zip(p_row)
                    .zip(dp_row)
                {
                    *slot = pv * (dpv - dot) * scale;
                }
            }
            // dQrot = dS K ; dKrot = dSᵀ Q
            let mut dq_h = gemm_nn(&ds, k_h, m, m, hd);
            let mut dk_h = gemm_tn(&ds, q_h, m, m, hd);
            rotate_block_inplace(&mut dq_h, &table, m, hd, true);
            rotate_block_inplace(&mut dk_h, &table, m, hd, true);
            add_into_cols(&mut dq, &dq_h, m, d, col, hd);
            add_into_cols(&mut dk, &dk_h, m, d, col, hd);
            add_into_cols(&mut dv, &dv_h, m, d, col, hd);
        }
        let mut contributions = Vec::with_capacity(3);
        if q_id.is_some() {
            contributions.push(dq);
        }
        if k_id.is_some() {
            contributions.push(dk);
        }
        if v_id.is_some() {
            contributions.push(dv);
        }
        contributions
    });
    let id = tape.push(parents, m * d, Some(backward));
    Ok(attach(out, &tape, id))
}

/// Reorders elements: out[i] = x[perm[i]], with `perm` a bijection over
/// the element indices. Gradients scatter back through the inverse map.
pub fn permute_elements<T: Scalar>(
    x: &Tensor<T>,
    perm: &[usize],
    out_shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let n = x.len();
    if perm.len() != n || out_shape.iter().product::<usize>() != n {
        return Err(NumericsError::BadShape {
            op: "permute_elements",
            expected: format!("{n} indices"),
            got: vec![perm.len()],
        });
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    for &src in perm {
        if src >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "permute_elements",
                index: src,
                bound: n,
            });
        }
        data.push(xd[src]);
    }
    let out = Tensor::from_op(out_shape, data);
    let in_shape = x.shape().to_vec();
    let perm = perm.to_vec();
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; in_shape.iter().product()];
        for (i, &src) in perm.iter().enumerate() {
            gx[src] += g[i];
        }
        gx
    }))
}

/// Extracts a contiguous row range (differentiable slice).
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("slice_rows")?;
    if start > end || end > m {
        return Err(NumericsError::IndexOutOfRange {
            op: "slice_rows",
            index: end,
            bound: m,
        });
    }
    let rows = end - start;
    let data = x.data()[start * n..end * n].to_vec();
    let out = Tensor::from_op(vec![rows, n], data);
    Ok(record_unary(out, x, move |g| {
        let mut gx = vec![T::ZERO; m * n];
        gx[start * n..end * n].copy_from_slice(g);
        gx
    }))
}


//! Minimal define-by-run reverse-mode differentiation over dense `f64`
//! tensors, specialised to the operations the velocity network needs.
//!
//! A [`Graph`] records every operation of one forward pass. Backward passes
//! do not mutate the graph, so the same recording can be differentiated
//! from several output seeds (one per objective).

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Silu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Transpose12(Var),
    MatMulNT {
        a: Var,
        b: Var,
        scale: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MaskedSoftmax(Var),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover every index touched for the given dims and
    // strides, checked by the debug assertion above; `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    cols: &mut [f64],
) {
    for ci in 0..cin {
        let xrow = &x[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &mut cols[(ci * kernel + kk) * lout..(ci * kernel + kk + 1) * lout];
            for (o, slot) in row.iter_mut().enumerate() {
                let idx = (o * stride + kk) as isize - pad as isize;
                *slot = if idx >= 0 && (idx as usize) < len {
                    xrow[idx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    x: &mut [f64],
) {
    for ci in 0..cin {
        for kk in 0..kernel {
            let row = &cols[(ci * kernel + kk) * lout..(ci * kernel + kk + 1) * lout];
            for (o, v) in row.iter().enumerate() {
                let idx = (o * stride + kk) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < len {
                    x[ci * len + idx as usize] += v;
                }
            }
        }
    }
}

fn norm_backward(
    x: &[f64],
    dy: &[f64],
    mean: f64,
    rstd: f64,
    gamma_of: impl Fn(usize) -> f64,
    dx: &mut [f64],
) {
    let n = x.len() as f64;
    let mut sum1 = 0.0;
    let mut sum2 = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma_of(i);
        sum1 += dxhat;
        sum2 += dxhat * xhat;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma_of(i);
        dx[i] += rstd * (dxhat - sum1 / n - xhat * sum2 / n);
    }
}

fn mean_rstd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_len(value: &[f64], shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                value.len(),
                shape
            )));
        }
        Ok(())
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        Self::check_len(&value, shape)?;
        Ok(self.push(value, shape.to_vec(), Op::Leaf, true))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        Self::check_len(&value, shape)?;
        Ok(self.push(value, shape.to_vec(), Op::Leaf, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, shape, Op::Add(a, b), ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(value, shape, Op::Silu(x), ng)
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::Shape(format!("{what}: expected rank 3, got {s:?}"))),
        }
    }

    /// `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, len) = self.dims3(x, "conv1d input")?;
        let (cout, wcin, kernel) = self.dims3(w, "conv1d weight")?;
        if wcin != cin || self.shape(b) != [cout] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv1d: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        if len + 2 * pad < kernel {
            return Err(Error::Shape(
                "conv1d: kernel longer than padded input".into(),
            ));
        }
        let lout = (len + 2 * pad - kernel) / stride + 1;
        let ck = cin * kernel;
        let mut out = vec![0.0; batch * cout * lout];
        let mut cols = vec![0.0; ck * lout];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for bi in 0..batch {
                im2col(
                    &xv[bi * cin * len..(bi + 1) * cin * len],
                    cin,
                    len,
                    kernel,
                    stride,
                    pad,
                    lout,
                    &mut cols,
                );
                let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
                for co in 0..cout {
                    ob[co * lout..(co + 1) * lout].fill(bv[co]);
                }
                gemm(cout, ck, lout, 1.0, wv, false, &cols, false, 1.0, ob);
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            vec![batch, cout, lout],
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// `x [B, Cin, L]`, `w [Cin, Cout, K]`, `b [Cout]`; output length
    /// `(L - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, cin, len) = self.dims3(x, "conv_transpose1d input")?;
        let (wcin, cout, kernel) = self.dims3(w, "conv_transpose1d weight")?;
        if wcin != cin || self.shape(b) != [cout] || stride == 0 || len == 0 {
            return Err(Error::Shape(format!(
                "conv_transpose1d: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        if (len - 1) * stride + kernel < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose1d: empty output".into()));
        }
        let lout = (len - 1) * stride + kernel - 2 * pad;
        let ck = cout * kernel;
        let mut out = vec![0.0; batch * cout * lout];
        let mut cols = vec![0.0; ck * len];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for bi in 0..batch {
                gemm(
                    ck,
                    cin,
                    len,
                    1.0,
                    wv,
                    true,
                    &xv[bi * cin * len..(bi + 1) * cin * len],
                    false,
                    0.0,
                    &mut cols,
                );
                let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
                for co in 0..cout {
                    ob[co * lout..(co + 1) * lout].fill(bv[co]);
                }
                // Scatter is the adjoint of the strided gather.
                col2im_add(&cols, cout, lout, kernel, stride, pad, len, ob);
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            vec![batch, cout, lout],
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Normalises each of `groups` channel groups over (channels, length),
    /// then applies per-channel scale and offset.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "group_norm input")?;
        if groups == 0 || ch % groups != 0 || self.shape(gamma) != [ch] || self.shape(beta) != [ch]
        {
            return Err(Error::Shape(format!(
                "group_norm: {ch} channels, {groups} groups"
            )));
        }
        let cpg = ch / groups;
        let glen = cpg * len;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(batch * groups);
        for bi in 0..batch {
            for g in 0..groups {
                let off = (bi * ch + g * cpg) * len;
                let seg = &xv[off..off + glen];
                let (mean, rstd) = mean_rstd(seg);
                for (i, v) in seg.iter().enumerate() {
                    let c = g * cpg + i / len;
                    out[off + i] = (v - mean) * rstd * gv[c] + bv[c];
                }
                stats.push((mean, rstd));
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            vec![batch, ch, len],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        ))
    }

    /// Normalises over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer_norm: width {d}")));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / d);
        for (row, orow) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = mean_rstd(row);
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push((mean, rstd));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        ))
    }

    /// Affine map over the last axis: `x [.., Din] · w [Din, Dout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let din = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("linear of a scalar".into()))?;
        let (wi, dout) = match *self.shape(w) {
            [a, b] => (a, b),
            ref s => return Err(Error::Shape(format!("linear weight {s:?}"))),
        };
        if wi != din {
            return Err(Error::Shape(format!(
                "linear: input width {din}, weight {:?}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            self.value(x),
            false,
            self.value(w),
            false,
            1.0,
            &mut out,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("nonempty") = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, shape, Op::Linear { x, w, b }, ng))
    }

    /// `x [B, C, L] + bias [B, C]` broadcast along the length axis.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "channel_bias input")?;
        if self.shape(bias) != [batch, ch] {
            return Err(Error::Shape(format!(
                "channel_bias: {:?} onto {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / len])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, vec![batch, ch, len], Op::ChannelBias { x, bias }, ng))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (batch, p, q) = self.dims3(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let off = bi * p * q;
            for i in 0..p {
                for j in 0..q {
                    out[off + j * p + i] = xv[off + i * q + j];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![batch, q, p], Op::Transpose12(x), ng))
    }

    /// Batched `scale * a · bᵀ` for `a [B, n, k]`, `b [B, m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (batch, n, k) = self.dims3(a, "matmul_nt lhs")?;
        let (bb, m, bk) = self.dims3(b, "matmul_nt rhs")?;
        if bb != batch || bk != k {
            return Err(Error::Shape(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; batch * n * m];
        let av = self.value(a);
        let bv = self.value(b);
        for bi in 0..batch {
            gemm(
                n,
                k,
                m,
                scale,
                &av[bi * n * k..],
                false,
                &bv[bi * m * k..],
                true,
                0.0,
                &mut out[bi * n * m..(bi + 1) * n * m],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![batch, n, m], Op::MatMulNT { a, b, scale }, ng))
    }

    /// Batched `a · b` for `a [B, n, m]`, `b [B, m, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, m) = self.dims3(a, "matmul lhs")?;
        let (bb, bm, k) = self.dims3(b, "matmul rhs")?;
        if bb != batch || bm != m {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; batch * n * k];
        let av = self.value(a);
        let bv = self.value(b);
        for bi in 0..batch {
            gemm(
                n,
                m,
                k,
                1.0,
                &av[bi * n * m..],
                false,
                &bv[bi * m * k..],
                false,
                0.0,
                &mut out[bi * n * k..(bi + 1) * n * k],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![batch, n, k], Op::MatMul { a, b }, ng))
    }

    /// Softmax over the last axis of `x [B, n, m]`; keys with `mask[b, j]`
    /// false get zero weight. Every batch row needs at least one live key.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (batch, n, m) = self.dims3(x, "softmax input")?;
        if mask.len() != batch * m {
            return Err(Error::Shape(format!(
                "softmax mask has {} entries, need {}",
                mask.len(),
                batch * m
            )));
        }
        for bi in 0..batch {
            if !mask[bi * m..(bi + 1) * m].iter().any(|&k| k) {
                return Err(Error::Argument(format!(
                    "attention row {bi} has every key masked"
                )));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let live = &mask[bi * m..(bi + 1) * m];
            for i in 0..n {
                let off = (bi * n + i) * m;
                let row = &xv[off..off + m];
                let mx = row
                    .iter()
                    .zip(live)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..m {
                    if live[j] {
                        let e = (row[j] - mx).exp();
                        out[off + j] = e;
                        sum += e;
                    }
                }
                out[off..off + m].iter_mut().for_each(|v| *v /= sum);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![batch, n, m], Op::MaskedSoftmax(x), ng))
    }

    /// Concatenates `[B, C1, L]` and `[B, C2, L]` along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, c1, len) = self.dims3(a, "concat lhs")?;
        let (bb, c2, bl) = self.dims3(b, "concat rhs")?;
        if bb != batch || bl != len {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(batch * (c1 + c2) * len);
        for bi in 0..batch {
            out.extend_from_slice(&av[bi * c1 * len..(bi + 1) * c1 * len]);
            out.extend_from_slice(&bv[bi * c2 * len..(bi + 1) * c2 * len]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![batch, c1 + c2, len], Op::Concat(a, b), ng))
    }

    /// Reverse pass from `out` seeded with `d loss / d out`.
    pub fn backward(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::Shape(format!(
                "backward seed has {} entries, output has {}",
                seed.len(),
                self.value(out).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.to_vec());
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.ng(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(x);
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        g[i] += dy[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [batch, cin, len] = self.shape(x).try_into().expect("rank 3");
                let [cout, _, kernel] = self.shape(w).try_into().expect("rank 3");
                let lout = node.shape[2];
                let ck = cin * kernel;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut cols = vec![0.0; ck * lout];
                let mut dcols = vec![0.0; ck * lout];
                for bi in 0..batch {
                    let dyb = &dy[bi * cout * lout..(bi + 1) * cout * lout];
                    if let Some(db) = self.acc(grads, b) {
                        for co in 0..cout {
                            db[co] += dyb[co * lout..(co + 1) * lout].iter().sum::<f64>();
                        }
                    }
                    if self.ng(w) {
                        im2col(
                            &xv[bi * cin * len..(bi + 1) * cin * len],
                            cin,
                            len,
                            kernel,
                            stride,
                            pad,
                            lout,
                            &mut cols,
                        );
                        let dw = self.acc(grads, w).expect("needs grad");
                        gemm(cout, lout, ck, 1.0, dyb, false, &cols, true, 1.0, dw);
                    }
                    if let Some(dx) = self.acc(grads, x) {
                        gemm(ck, cout, lout, 1.0, wv, true, dyb, false, 0.0, &mut dcols);
                        col2im_add(
                            &dcols,
                            cin,
                            len,
                            kernel,
                            stride,
                            pad,
                            lout,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                        );
                    }
                }
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [batch, cin, len] = self.shape(x).try_into().expect("rank 3");
                let [_, cout, kernel] = self.shape(w).try_into().expect("rank 3");
                let lout = node.shape[2];
                let ck = cout * kernel;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut dcols = vec![0.0; ck * len];
                for bi in 0..batch {
                    let dyb = &dy[bi * cout * lout..(bi + 1) * cout * lout];
                    if let Some(db) = self.acc(grads, b) {
                        for co in 0..cout {
                            db[co] += dyb[co * lout..(co + 1) * lout].iter().sum::<f64>();
                        }
                    }
                    im2col(dyb, cout, lout, kernel, stride, pad, len, &mut dcols);
                    if let Some(dw) = self.acc(grads, w) {
                        gemm(
                            cin,
                            len,
                            ck,
                            1.0,
                            &xv[bi * cin * len..(bi + 1) * cin * len],
                            false,
                            &dcols,
                            true,
                            1.0,
                            dw,
                        );
                    }
                    if let Some(dx) = self.acc(grads, x) {
                        gemm(
                            cin,
                            ck,
                            len,
                            1.0,
                            wv,
                            false,
                            &dcols,
                            false,
                            1.0,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                        );
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ref stats,
            } => {
                let [batch, ch, len] = self.shape(x).try_into().expect("rank 3");
                let cpg = ch / groups;
                let glen = cpg * len;
                let xv = self.value(x);
                let gv = self.value(gamma);
                for bi in 0..batch {
                    for g in 0..groups {
                        let off = (bi * ch + g * cpg) * len;
                        let (mean, rstd) = stats[bi * groups + g];
                        let seg = &xv[off..off + glen];
                        let dseg = &dy[off..off + glen];
                        if let Some(dg) = self.acc(grads, gamma) {
                            for i in 0..glen {
                                dg[g * cpg + i / len] += dseg[i] * (seg[i] - mean) * rstd;
                            }
                        }
                        if let Some(db) = self.acc(grads, beta) {
                            for i in 0..glen {
                                db[g * cpg + i / len] += dseg[i];
                            }
                        }
                        if let Some(dx) = self.acc(grads, x) {
                            norm_backward(
                                seg,
                                dseg,
                                mean,
                                rstd,
                                |i| gv[g * cpg + i / len],
                                &mut dx[off..off + glen],
                            );
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref stats,
            } => {
                let d = node.shape[node.shape.len() - 1];
                let xv = self.value(x);
                let gv = self.value(gamma);
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let seg = &xv[r * d..(r + 1) * d];
                    let dseg = &dy[r * d..(r + 1) * d];
                    if let Some(dg) = self.acc(grads, gamma) {
                        for j in 0..d {
                            dg[j] += dseg[j] * (seg[j] - mean) * rstd;
                        }
                    }
                    if let Some(db) = self.acc(grads, beta) {
                        for j in 0..d {
                            db[j] += dseg[j];
                        }
                    }
                    if let Some(dx) = self.acc(grads, x) {
                        norm_backward(
                            seg,
                            dseg,
                            mean,
                            rstd,
                            |j| gv[j],
                            &mut dx[r * d..(r + 1) * d],
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let [din, dout] = self.shape(w).try_into().expect("rank 2");
                let rows = self.value(x).len() / din;
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, b) {
                        for r in dy.chunks(dout) {
                            db.iter_mut().zip(r).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                if self.ng(w) {
                    let xv = self.value(x);
                    let dw = self.acc(grads, w).expect("needs grad");
                    gemm(din, rows, dout, 1.0, xv, true, dy, false, 1.0, dw);
                }
                if self.ng(x) {
                    let wv = self.value(w);
                    let dx = self.acc(grads, x).expect("needs grad");
                    gemm(rows, dout, din, 1.0, dy, false, wv, true, 1.0, dx);
                }
            }
            Op::ChannelBias { x, bias } => {
                let len = node.shape[2];
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(db) = self.acc(grads, bias) {
                    for (i, chunk) in dy.chunks(len).enumerate() {
                        db[i] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Transpose12(x) => {
                // node is [B, q, p]; input was [B, p, q]
                let [batch, q, p] = node.shape[..].try_into().expect("rank 3");
                if let Some(dx) = self.acc(grads, x) {
                    for bi in 0..batch {
                        let off = bi * p * q;
                        for i in 0..p {
                            for j in 0..q {
                                dx[off + i * q + j] += dy[off + j * p + i];
                            }
                        }
                    }
                }
            }
            Op::MatMulNT { a, b, scale } => {
                let [batch, n, k] = self.shape(a).try_into().expect("rank 3");
                let m = self.shape(b)[1];
                let av = self.value(a);
                let bv = self.value(b);
                if let Some(da) = self.acc(grads, a) {
                    for bi in 0..batch {
                        gemm(
                            n,
                            m,
                            k,
                            scale,
                            &dy[bi * n * m..],
                            false,
                            &bv[bi * m * k..],
                            false,
                            1.0,
                            &mut da[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            scale,
                            &dy[bi * n * m..],
                            true,
                            &av[bi * n * k..],
                            false,
                            1.0,
                            &mut db[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
            }
            Op::MatMul { a, b } => {
                let [batch, n, m] = self.shape(a).try_into().expect("rank 3");
                let k = self.shape(b)[2];
                let av = self.value(a);
                let bv = self.value(b);
                if let Some(da) = self.acc(grads, a) {
                    for bi in 0..batch {
                        gemm(
                            n,
                            k,
                            m,
                            1.0,
                            &dy[bi * n * k..],
                            false,
                            &bv[bi * m * k..],
                            true,
                            1.0,
                            &mut da[bi * n * m..(bi + 1) * n * m],
                        );
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &av[bi * n * m..],
                            true,
                            &dy[bi * n * k..],
                            false,
                            1.0,
                            &mut db[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let m = node.shape[2];
                let y = &node.value;
                if let Some(dx) = self.acc(grads, x) {
                    for ((yr, dyr), dxr) in y.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)) {
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dxr[j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let [batch, _, len] = node.shape[..].try_into().expect("rank 3");
                let c1 = self.shape(a)[1];
                let c2 = self.shape(b)[1];
                let stride = (c1 + c2) * len;
                if let Some(da) = self.acc(grads, a) {
                    for bi in 0..batch {
                        da[bi * c1 * len..(bi + 1) * c1 * len]
                            .iter_mut()
                            .zip(&dy[bi * stride..bi * stride + c1 * len])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for bi in 0..batch {
                        db[bi * c2 * len..(bi + 1) * c2 * len]
                            .iter_mut()
                            .zip(&dy[bi * stride + c1 * len..(bi + 1) * stride])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks every leaf gradient of `build` against central differences of
    /// the scalar `sum(out * probe)`.
    fn check(leaves: Vec<(Vec<f64>, Vec<usize>)>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let run = |vals: &[(Vec<f64>, Vec<usize>)]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals
                .iter()
                .map(|(v, s)| g.param(v.clone(), s).unwrap())
                .collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = run(&leaves);
        let probe = rand_vec(&mut rng, g.value(out).len());
        let grads = g.backward(out, &probe).unwrap();
        let objective = |vals: &[(Vec<f64>, Vec<usize>)]| {
            let (g, _, out) = run(vals);
            g.value(out)
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for (li, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_default();
            for i in 0..leaves[li].0.len() {
                let mut plus = leaves.clone();
                plus[li].0[i] += h;
                let mut minus = leaves.clone();
                minus[li].0[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = analytic.get(i).copied().unwrap_or(0.0);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "leaf {li} index {i}: analytic {an}, numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 4]).unwrap();
        let w = g.constant(vec![1.0, 0.0, -1.0], &[1, 1, 3]).unwrap();
        let b = g.constant(vec![0.5], &[1]).unwrap();
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        // y[o] = x[o-1] - x[o+1] + 0.5 with zero padding
        assert_eq!(g.value(y), &[-1.5, -1.5, -1.5, 3.5]);
        let y2 = g.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 2]);
        assert_eq!(g.value(y2), &[-1.5, -1.5]);
    }

    #[test]
    fn conv_transpose_doubles_length() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        let w = g.constant(vec![1.0, 1.0, 1.0, 1.0], &[1, 1, 4]).unwrap();
        let b = g.constant(vec![0.0], &[1]).unwrap();
        let y = g.conv_transpose1d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4]);
        assert_eq!(g.value(y), &[1.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn gradients_conv_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![
                (rand_vec(&mut rng, 2 * 3 * 8), vec![2, 3, 8]),
                (rand_vec(&mut rng, 4 * 3 * 3), vec![4, 3, 3]),
                (rand_vec(&mut rng, 4), vec![4]),
            ],
            |g, v| g.conv1d(v[0], v[1], v[2], 2, 1).unwrap(),
        );
        check(
            vec![
                (rand_vec(&mut rng, 2 * 3 * 5), vec![2, 3, 5]),
                (rand_vec(&mut rng, 3 * 2 * 4), vec![3, 2, 4]),
                (rand_vec(&mut rng, 2), vec![2]),
            ],
            |g, v| g.conv_transpose1d(v[0], v[1], v[2], 2, 1).unwrap(),
        );
    }

    #[test]
    fn gradients_norms_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![
                (rand_vec(&mut rng, 2 * 4 * 5), vec![2, 4, 5]),
                (rand_vec(&mut rng, 4), vec![4]),
                (rand_vec(&mut rng, 4), vec![4]),
            ],
            |g, v| {
                let n = g.group_norm(v[0], v[1], v[2], 2).unwrap();
                g.silu(n)
            },
        );
        check(
            vec![
                (rand_vec(&mut rng, 2 * 3 * 4), vec![2, 3, 4]),
                (rand_vec(&mut rng, 4), vec![4]),
                (rand_vec(&mut rng, 4), vec![4]),
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        );
    }

    #[test]
    fn gradients_attention_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = vec![true, true, false, true, false, false];
        check(
            vec![
                (rand_vec(&mut rng, 2 * 4 * 3), vec![2, 4, 3]),
                (rand_vec(&mut rng, 2 * 3 * 3), vec![2, 3, 3]),
                (rand_vec(&mut rng, 2 * 3 * 2), vec![2, 3, 2]),
                (rand_vec(&mut rng, 2 * 5), vec![2, 5]),
                (rand_vec(&mut rng, 5), vec![5]),
            ],
            move |g, v| {
                let s = g.matmul_nt(v[0], v[1], 0.7).unwrap();
                let p = g.masked_softmax(s, mask.clone()).unwrap();
                let a = g.matmul(p, v[2]).unwrap();
                let o = g.linear(a, v[3], Some(v[4])).unwrap();
                g.transpose12(o).unwrap()
            },
        );
    }

    #[test]
    fn gradients_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![
                (rand_vec(&mut rng, 2 * 2 * 3), vec![2, 2, 3]),
                (rand_vec(&mut rng, 2 * 1 * 3), vec![2, 1, 3]),
                (rand_vec(&mut rng, 2 * 3), vec![2, 3]),
                (rand_vec(&mut rng, 2 * 3 * 3), vec![2, 3, 3]),
            ],
            |g, v| {
                let c = g.concat(v[0], v[1]).unwrap();
                let cb = g.channel_bias(c, v[2]).unwrap();
                g.add(cb, v[3]).unwrap()
            },
        );
    }

    #[test]
    fn softmax_single_key_is_one() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, -2.0, 0.1], &[1, 3, 1]).unwrap();
        let p = g.masked_softmax(x, vec![true]).unwrap();
        assert_eq!(g.value(p), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 2], &[1, 1, 2]).unwrap();
        assert!(g.masked_softmax(x, vec![false, false]).is_err());
    }
}

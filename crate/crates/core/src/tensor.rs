//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every tensor created through it: values are computed
//! eagerly and the producing operation is recorded so that [`Graph::backward`]
//! can replay the tape in reverse topological order. Node indices are handed
//! out as [`TensorId`]s; ids are topologically ordered by construction, so the
//! backward pass is a single reverse scan that visits each node exactly once
//! and accumulates gradients additively across fan-out.
//!
//! The primitive set is exactly what the backbone, the style attack loss, and
//! the mixup paths need: elementwise arithmetic, matmul, conv2d (im2col +
//! GEMM), relu/sqrt/log, softmax, fused softmax cross-entropy, spatial and
//! per-channel mean reductions, broadcast arithmetic against per-(instance,
//! channel) and per-channel vectors, scalar affine ops, and a fused train-mode
//! batch normalization.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Feature maps at least this large run one GEMM per sample (the per-sample
/// column panel stays cache resident); smaller maps use one wide GEMM over
/// the whole batch.
const PER_SAMPLE_GEMM_MIN_HW: usize = 512;

/// Broadcast arithmetic flavor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BcastKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Input,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    Relu(TensorId),
    Sqrt(TensorId),
    Log(TensorId),
    Softmax(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MeanHw(TensorId),
    MeanNhw(TensorId),
    SumAll(TensorId),
    /// `x` is (N, C, spatial...), `s` is (N, C), broadcast over spatial dims.
    BcastNc {
        x: TensorId,
        s: TensorId,
        kind: BcastKind,
    },
    /// `x` is (N, C, spatial...), `s` is (C,), broadcast over batch and space.
    BcastC {
        x: TensorId,
        s: TensorId,
        kind: BcastKind,
    },
    Scale {
        x: TensorId,
        c: T,
    },
    AddScalar {
        x: TensorId,
    },
    /// Fused train-mode batch normalization over (N, spatial) per channel.
    BnTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics captured by a train-mode batch normalization node.
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Some((*a, *b, *c, *d)),
        _ => None,
    }
}

/// Splits (N, C, spatial...) into (N, C, spatial_len); rank-2 tensors have
/// spatial_len 1 so the broadcast ops double as row/bias arithmetic.
fn nc_split(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let n = shape[0];
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    Some((n, c, s))
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    col_scratch: Vec<T>,
    dcol_scratch: Vec<T>,
    conv_ops: u64,
}

/// Reuse a scratch vector at `len` elements without re-zeroing retained
/// capacity; callers must overwrite the full range they read.
fn scratch<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            col_scratch: Vec::new(),
            dcol_scratch: Vec::new(),
            conv_ops: 0,
        }
    }

    /// Number of conv2d forward executions recorded by this graph. Used to
    /// assert inference-cost parity between training methods.
    pub fn conv_ops(&self) -> u64 {
        self.conv_ops
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// New leaf tensor. `requires_grad` marks it as a differentiable input;
    /// constants never accumulate gradient.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::Invalid(alloc::format!(
                "input: shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Input))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        self.input(shape, data, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        let n = numel(shape);
        self.push(shape.to_vec(), vec![T::zero(); n], false, Op::Input)
    }

    fn ewise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v.sqrt()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Sqrt(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v.ln()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Log(x))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: T) -> TensorId {
        let value: Vec<T> = self.nodes[x.0].value.iter().map(|&v| v + c).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(self.nodes[x.0].shape.clone(), value, rg, Op::AddScalar { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].value {
            acc += v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Vec::new(), vec![acc], rg, Op::SumAll(x))
    }

    /// Mean over the spatial dims of (N, C, H, W) -> (N, C). Also the global
    /// average pooling used before the classifier.
    pub fn mean_hw(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, s) = nc_split(&self.nodes[x.0].shape).ok_or(Error::ShapeMismatch {
            op: "mean_hw",
            lhs: self.nodes[x.0].shape.clone(),
            rhs: Vec::new(),
        })?;
        let inv = T::from_f64(1.0 / s as f64);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); n * c];
        for (o, chunk) in out.iter_mut().zip(xv.chunks_exact(s)) {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            *o = acc * inv;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], out, rg, Op::MeanHw(x)))
    }

    /// Mean over batch and spatial dims of (N, C, H, W) -> (C,).
    pub fn mean_nhw(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, s) = nc_split(&self.nodes[x.0].shape).ok_or(Error::ShapeMismatch {
            op: "mean_nhw",
            lhs: self.nodes[x.0].shape.clone(),
            rhs: Vec::new(),
        })?;
        let inv = T::from_f64(1.0 / (n * s) as f64);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let mut acc = T::zero();
                for &v in &xv[base..base + s] {
                    acc += v;
                }
                out[ci] += acc;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c], out, rg, Op::MeanNhw(x)))
    }

    fn bcast(
        &mut self,
        name: &'static str,
        x: TensorId,
        s: TensorId,
        kind: BcastKind,
        per_channel: bool,
    ) -> Result<TensorId> {
        let (n, c, sp) = nc_split(&self.nodes[x.0].shape).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: self.nodes[x.0].shape.clone(),
            rhs: self.nodes[s.0].shape.clone(),
        })?;
        let expect: &[usize] = if per_channel { &[c] } else { &[n, c] };
        if self.nodes[s.0].shape != expect {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let sval = if per_channel { sv[ci] } else { sv[ni * c + ci] };
                let base = (ni * c + ci) * sp;
                let (xs, os) = (&xv[base..base + sp], &mut out[base..base + sp]);
                match kind {
                    BcastKind::Add => {
                        for (o, &v) in os.iter_mut().zip(xs) {
                            *o = v + sval;
                        }
                    }
                    BcastKind::Sub => {
                        for (o, &v) in os.iter_mut().zip(xs) {
                            *o = v - sval;
                        }
                    }
                    BcastKind::Mul => {
                        for (o, &v) in os.iter_mut().zip(xs) {
                            *o = v * sval;
                        }
                    }
                    BcastKind::Div => {
                        for (o, &v) in os.iter_mut().zip(xs) {
                            *o = v / sval;
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x, s]);
        let op = if per_channel {
            Op::BcastC { x, s, kind }
        } else {
            Op::BcastNc { x, s, kind }
        };
        Ok(self.push(self.nodes[x.0].shape.clone(), out, rg, op))
    }

    /// Broadcast against a per-(instance, channel) vector of shape (N, C).
    pub fn add_nc(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("add_nc", x, s, BcastKind::Add, false)
    }
    pub fn sub_nc(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("sub_nc", x, s, BcastKind::Sub, false)
    }
    pub fn mul_nc(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("mul_nc", x, s, BcastKind::Mul, false)
    }
    pub fn div_nc(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("div_nc", x, s, BcastKind::Div, false)
    }

    /// Broadcast against a per-channel vector of shape (C,).
    pub fn add_c(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("add_c", x, s, BcastKind::Add, true)
    }
    pub fn sub_c(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("sub_c", x, s, BcastKind::Sub, true)
    }
    pub fn mul_c(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("mul_c", x, s, BcastKind::Mul, true)
    }
    pub fn div_c(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        self.bcast("div_c", x, s, BcastKind::Div, true)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k1) = match self.nodes[a.0].shape[..] {
            [m, k] => (m, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                })
            }
        };
        let (k2, n) = match self.nodes[b.0].shape[..] {
            [k, n] => (k, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                })
            }
        };
        if k1 != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k1,
                n,
                T::one(),
                self.nodes[a.0].value.as_ptr(),
                k1 as isize,
                1,
                self.nodes[b.0].value.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// 2D convolution, NCHW layout, zero padding.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (n, cin, h, wdt) = dims4(&self.nodes[x.0].shape).ok_or(Error::ShapeMismatch {
            op: "conv2d",
            lhs: self.nodes[x.0].shape.clone(),
            rhs: self.nodes[w.0].shape.clone(),
        })?;
        let (cout, cin2, kh, kw) = dims4(&self.nodes[w.0].shape).ok_or(Error::ShapeMismatch {
            op: "conv2d",
            lhs: self.nodes[x.0].shape.clone(),
            rhs: self.nodes[w.0].shape.clone(),
        })?;
        if cin != cin2 || h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wdt + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let hw = hout * wout;
        let ncols = n * hw;
        let plane = cin * h * wdt;

        let mut colbuf = core::mem::take(&mut self.col_scratch);
        let mut out = vec![T::zero(); n * cout * hw];
        let wv = self.nodes[w.0].value.as_ptr();
        let xv = &self.nodes[x.0].value;
        if hw >= PER_SAMPLE_GEMM_MIN_HW {
            // Large maps: per-sample panel im2col + GEMM, cache resident.
            let col = scratch(&mut colbuf, kdim * hw);
            for ni in 0..n {
                im2col_sample(
                    &xv[ni * plane..(ni + 1) * plane],
                    cin,
                    h,
                    wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    hout,
                    wout,
                    col,
                    hw,
                );
                unsafe {
                    T::gemm(
                        cout,
                        kdim,
                        hw,
                        T::one(),
                        wv,
                        kdim as isize,
                        1,
                        col.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(ni * cout * hw),
                        hw as isize,
                        1,
                    );
                }
            }
        } else {
            // Small maps: one wide GEMM over the whole batch, then regroup.
            let col = scratch(&mut colbuf, kdim * ncols);
            for ni in 0..n {
                im2col_sample(
                    &xv[ni * plane..(ni + 1) * plane],
                    cin,
                    h,
                    wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    hout,
                    wout,
                    &mut col[ni * hw..],
                    ncols,
                );
            }
            let ybuf = scratch(&mut self.dcol_scratch, cout * ncols);
            unsafe {
                T::gemm(
                    cout,
                    kdim,
                    ncols,
                    T::one(),
                    wv,
                    kdim as isize,
                    1,
                    col.as_ptr(),
                    ncols as isize,
                    1,
                    T::zero(),
                    ybuf.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            for ni in 0..n {
                for co in 0..cout {
                    out[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]
                        .copy_from_slice(&ybuf[co * ncols + ni * hw..co * ncols + (ni + 1) * hw]);
                }
            }
        }
        self.col_scratch = colbuf;
        self.conv_ops += 1;
        let rg = self.needs(&[x, w]);
        Ok(self.push(
            vec![n, cout, hout, wout],
            out,
            rg,
            Op::Conv2d { x, w, stride, pad },
        ))
    }

    /// Row-wise softmax of an (N, K) tensor.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, k) = match self.nodes[x.0].shape[..] {
            [n, k] => (n, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: Vec::new(),
                })
            }
        };
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); n * k];
        for (row_out, row) in out.chunks_exact_mut(k).zip(xv.chunks_exact(k)) {
            softmax_row(row, row_out);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, k], out, rg, Op::Softmax(x)))
    }

    /// Mean softmax cross-entropy of (N, K) logits against integer targets.
    /// Computed via log-sum-exp with max subtraction.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (n, k) = match self.nodes[logits.0].shape[..] {
            [n, k] => (n, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: self.nodes[logits.0].shape.clone(),
                    rhs: Vec::new(),
                })
            }
        };
        if targets.len() != n {
            return Err(Error::Invalid(alloc::format!(
                "cross_entropy: {} logit rows vs {} targets",
                n,
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Invalid(alloc::format!(
                "cross_entropy: target {t} out of range for {k} classes"
            )));
        }
        let xv = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, (row_p, row)) in probs.chunks_exact_mut(k).zip(xv.chunks_exact(k)).enumerate() {
            let lse = softmax_row(row, row_p);
            loss += lse - row[targets[i]];
        }
        loss = loss * T::from_f64(1.0 / n as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Fused train-mode batch normalization: per-channel statistics over the
    /// batch and spatial dims (population variance), then scale/shift.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let (n, c, s) = nc_split(&self.nodes[x.0].shape).ok_or(Error::ShapeMismatch {
            op: "batch_norm_train",
            lhs: self.nodes[x.0].shape.clone(),
            rhs: Vec::new(),
        })?;
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_train",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let m = n * s;
        let inv_m = T::from_f64(1.0 / m as f64);
        let xv = &self.nodes[x.0].value;

        let mut mean = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let mut acc = T::zero();
                for &v in &xv[base..base + s] {
                    acc += v;
                }
                mean[ci] += acc;
            }
        }
        for v in mean.iter_mut() {
            *v = *v * inv_m;
        }
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let mu = mean[ci];
                let mut acc = T::zero();
                for &v in &xv[base..base + s] {
                    let d = v - mu;
                    acc += d * d;
                }
                var[ci] += acc;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let (mu, istd, g, b) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in base..base + s {
                    let h = (xv[i] - mu) * istd;
                    xhat[i] = h;
                    out[i] = g * h + b;
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Batch statistics stashed by a [`Graph::batch_norm_train`] node, for
    /// running-statistics updates.
    pub fn bn_batch_stats(&self, id: TensorId) -> Option<BnBatchStats<T>> {
        match &self.nodes[id.0].op {
            Op::BnTrain { mean, var, .. } => Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            _ => None,
        }
    }

    /// Reverse-mode pass from a scalar loss. Populates gradients on every
    /// `requires_grad` leaf reachable from `loss`; unreachable leaves hold
    /// zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        self.grads.clear();
        self.grads.resize_with(n, || None);
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = self.grads[i].take().unwrap();
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }

        // Leaves never reached hold exact zeros.
        for i in 0..n {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Input)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![T::zero(); numel(&self.nodes[i].shape)]);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<T> {
        if self.grads[id.0].is_none() {
            // Sized from the shape: a node's value may be temporarily moved
            // out while its gradient is produced.
            self.grads[id.0] = Some(vec![T::zero(); numel(&self.nodes[id.0].shape)]);
        }
        self.grads[id.0].as_mut().unwrap()
    }

    fn accumulate(&mut self, id: TensorId, contrib: impl Fn(usize) -> T) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (i, g) in buf.iter_mut().enumerate() {
            *g += contrib(i);
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        // Ops only reference earlier nodes, so borrows of node data taken here
        // never alias the grad buffers being written.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Input);
        match &op {
            Op::Input => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |j| dy[j]);
                self.accumulate(*b, |j| dy[j]);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |j| dy[j]);
                self.accumulate(*b, |j| -dy[j]);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = core::mem::take(&mut self.nodes[b.0].value);
                    self.accumulate(a, |j| dy[j] * bv[j]);
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].requires_grad {
                    let av = core::mem::take(&mut self.nodes[a.0].value);
                    self.accumulate(b, |j| dy[j] * av[j]);
                    self.nodes[a.0].value = av;
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = core::mem::take(&mut self.nodes[b.0].value);
                    self.accumulate(a, |j| dy[j] / bv[j]);
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].requires_grad {
                    let bv = core::mem::take(&mut self.nodes[b.0].value);
                    let ov = core::mem::take(&mut self.nodes[i].value);
                    self.accumulate(b, |j| -dy[j] * ov[j] / bv[j]);
                    self.nodes[b.0].value = bv;
                    self.nodes[i].value = ov;
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = core::mem::take(&mut self.nodes[x.0].value);
                self.accumulate(x, |j| if xv[j] > T::zero() { dy[j] } else { T::zero() });
                self.nodes[x.0].value = xv;
            }
            Op::Sqrt(x) => {
                let x = *x;
                let ov = core::mem::take(&mut self.nodes[i].value);
                let half = T::from_f64(0.5);
                self.accumulate(x, |j| dy[j] * half / ov[j]);
                self.nodes[i].value = ov;
            }
            Op::Log(x) => {
                let x = *x;
                let xv = core::mem::take(&mut self.nodes[x.0].value);
                self.accumulate(x, |j| dy[j] / xv[j]);
                self.nodes[x.0].value = xv;
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accumulate(x, |j| dy[j] * c);
            }
            Op::AddScalar { x, .. } => {
                self.accumulate(*x, |j| dy[j]);
            }
            Op::SumAll(x) => {
                let d = dy[0];
                self.accumulate(*x, |_| d);
            }
            Op::MeanHw(x) => {
                let x = *x;
                let (_, _, s) = nc_split(&self.nodes[x.0].shape).unwrap();
                let inv = T::from_f64(1.0 / s as f64);
                self.accumulate(x, |j| dy[j / s] * inv);
            }
            Op::MeanNhw(x) => {
                let x = *x;
                let (_, c, s) = nc_split(&self.nodes[x.0].shape).unwrap();
                let m = self.nodes[x.0].value.len() / c;
                let inv = T::from_f64(1.0 / m as f64);
                self.accumulate(x, |j| dy[(j / s) % c] * inv);
            }
            Op::Softmax(x) => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let k = self.nodes[i].shape[1];
                    let ov = core::mem::take(&mut self.nodes[i].value);
                    let buf = self.grad_buf(x);
                    for (r, (drow, yrow)) in dy.chunks_exact(k).zip(ov.chunks_exact(k)).enumerate() {
                        let mut dot = T::zero();
                        for (d, y) in drow.iter().zip(yrow) {
                            dot += *d * *y;
                        }
                        for j in 0..k {
                            buf[r * k + j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                    self.nodes[i].value = ov;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if self.nodes[logits.0].requires_grad {
                    let n = targets.len();
                    let k = self.nodes[logits.0].shape[1];
                    let d = dy[0] * T::from_f64(1.0 / n as f64);
                    let buf = self.grad_buf(logits);
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            buf[r * k + j] += d * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::BcastNc { x, s, kind } | Op::BcastC { x, s, kind } => {
                let per_channel = matches!(op, Op::BcastC { .. });
                self.backprop_bcast(i, *x, *s, *kind, per_channel, dy);
            }
            Op::Matmul { a, b } => {
                self.backprop_matmul(*a, *b, dy);
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.backprop_conv(*x, *w, *stride, *pad, dy);
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                self.backprop_bn(*x, *gamma, *beta, xhat, inv_std, dy);
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_bcast(
        &mut self,
        _out: usize,
        x: TensorId,
        s: TensorId,
        kind: BcastKind,
        per_channel: bool,
        dy: &[T],
    ) {
        let (n, c, sp) = nc_split(&self.nodes[x.0].shape).unwrap();
        let sv = core::mem::take(&mut self.nodes[s.0].value);
        if self.nodes[x.0].requires_grad {
            let buf = self.grad_buf(x);
            for ni in 0..n {
                for ci in 0..c {
                    let sval = if per_channel { sv[ci] } else { sv[ni * c + ci] };
                    let base = (ni * c + ci) * sp;
                    match kind {
                        BcastKind::Add | BcastKind::Sub => {
                            for j in base..base + sp {
                                buf[j] += dy[j];
                            }
                        }
                        BcastKind::Mul => {
                            for j in base..base + sp {
                                buf[j] += dy[j] * sval;
                            }
                        }
                        BcastKind::Div => {
                            for j in base..base + sp {
                                buf[j] += dy[j] / sval;
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[s.0].requires_grad {
            let xv = core::mem::take(&mut self.nodes[x.0].value);
            let buf = self.grad_buf(s);
            for ni in 0..n {
                for ci in 0..c {
                    let sval = if per_channel { sv[ci] } else { sv[ni * c + ci] };
                    let base = (ni * c + ci) * sp;
                    let mut acc = T::zero();
                    match kind {
                        BcastKind::Add => {
                            for &d in &dy[base..base + sp] {
                                acc += d;
                            }
                        }
                        BcastKind::Sub => {
                            for &d in &dy[base..base + sp] {
                                acc -= d;
                            }
                        }
                        BcastKind::Mul => {
                            for j in base..base + sp {
                                acc += dy[j] * xv[j];
                            }
                        }
                        BcastKind::Div => {
                            let s2 = sval * sval;
                            for j in base..base + sp {
                                acc -= dy[j] * xv[j] / s2;
                            }
                        }
                    }
                    let idx = if per_channel { ci } else { ni * c + ci };
                    buf[idx] += acc;
                }
            }
            self.nodes[x.0].value = xv;
        }
        self.nodes[s.0].value = sv;
    }

    fn backprop_matmul(&mut self, a: TensorId, b: TensorId, dy: &[T]) {
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let n = self.nodes[b.0].shape[1];
        if self.nodes[a.0].requires_grad {
            let bv = core::mem::take(&mut self.nodes[b.0].value);
            let buf = self.grad_buf(a);
            // dA += dC * B^T
            unsafe {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    dy.as_ptr(),
                    n as isize,
                    1,
                    bv.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    buf.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            self.nodes[b.0].value = bv;
        }
        if self.nodes[b.0].requires_grad {
            let av = core::mem::take(&mut self.nodes[a.0].value);
            let buf = self.grad_buf(b);
            // dB += A^T * dC
            unsafe {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    n as isize,
                    1,
                    T::one(),
                    buf.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.nodes[a.0].value = av;
        }
    }

    fn backprop_conv(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize, dy: &[T]) {
        let (n, cin, h, wdt) = dims4(&self.nodes[x.0].shape).unwrap();
        let (cout, _, kh, kw) = dims4(&self.nodes[w.0].shape).unwrap();
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wdt + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let hw = hout * wout;
        let ncols = n * hw;
        let plane = cin * h * wdt;
        let need_dw = self.nodes[w.0].requires_grad;
        let need_dx = self.nodes[x.0].requires_grad;
        if !need_dw && !need_dx {
            return;
        }

        let mut colbuf = core::mem::take(&mut self.col_scratch);
        let mut dybuf = core::mem::take(&mut self.dcol_scratch);
        let xv = core::mem::take(&mut self.nodes[x.0].value);
        let wv = self.nodes[w.0].value.as_ptr();

        if hw >= PER_SAMPLE_GEMM_MIN_HW {
            // Per-sample regime: rebuild each sample's panel (cheaper than
            // retaining one per node), accumulate dW from it, then overwrite
            // it with dcol and scatter into dx.
            let col = scratch(&mut colbuf, kdim * hw);
            for ni in 0..n {
                if need_dw {
                    im2col_sample(
                        &xv[ni * plane..(ni + 1) * plane],
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        hout,
                        wout,
                        col,
                        hw,
                    );
                    let buf = self.grad_buf(w);
                    // dW += dY_n * col_n^T
                    unsafe {
                        T::gemm(
                            cout,
                            hw,
                            kdim,
                            T::one(),
                            dy.as_ptr().add(ni * cout * hw),
                            hw as isize,
                            1,
                            col.as_ptr(),
                            1,
                            hw as isize,
                            T::one(),
                            buf.as_mut_ptr(),
                            kdim as isize,
                            1,
                        );
                    }
                }
                if need_dx {
                    // dcol_n = W^T * dY_n
                    unsafe {
                        T::gemm(
                            kdim,
                            cout,
                            hw,
                            T::one(),
                            wv,
                            1,
                            kdim as isize,
                            dy.as_ptr().add(ni * cout * hw),
                            hw as isize,
                            1,
                            T::zero(),
                            col.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    let buf = self.grad_buf(x);
                    col2im_sample_add(
                        col,
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        hout,
                        wout,
                        &mut buf[ni * plane..(ni + 1) * plane],
                        hw,
                    );
                }
            }
        } else {
            // Batched regime: regroup dy as (Cout, N*HW) and run wide GEMMs.
            let col = scratch(&mut colbuf, kdim * ncols);
            let dy_mat = scratch(&mut dybuf, cout * ncols);
            for ni in 0..n {
                for co in 0..cout {
                    dy_mat[co * ncols + ni * hw..co * ncols + (ni + 1) * hw]
                        .copy_from_slice(&dy[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]);
                }
            }
            if need_dw {
                for ni in 0..n {
                    im2col_sample(
                        &xv[ni * plane..(ni + 1) * plane],
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        hout,
                        wout,
                        &mut col[ni * hw..],
                        ncols,
                    );
                }
                let buf = self.grad_buf(w);
                // dW += dY_mat * col^T
                unsafe {
                    T::gemm(
                        cout,
                        ncols,
                        kdim,
                        T::one(),
                        dy_mat.as_ptr(),
                        ncols as isize,
                        1,
                        col.as_ptr(),
                        1,
                        ncols as isize,
                        T::one(),
                        buf.as_mut_ptr(),
                        kdim as isize,
                        1,
                    );
                }
            }
            if need_dx {
                // The col buffer is free again; overwrite it with dcol.
                unsafe {
                    T::gemm(
                        kdim,
                        cout,
                        ncols,
                        T::one(),
                        wv,
                        1,
                        kdim as isize,
                        dy_mat.as_ptr(),
                        ncols as isize,
                        1,
                        T::zero(),
                        col.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                let buf = self.grad_buf(x);
                for ni in 0..n {
                    col2im_sample_add(
                        &col[ni * hw..],
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        hout,
                        wout,
                        &mut buf[ni * plane..(ni + 1) * plane],
                        ncols,
                    );
                }
            }
        }
        self.nodes[x.0].value = xv;
        self.col_scratch = colbuf;
        self.dcol_scratch = dybuf;
    }

    fn backprop_bn(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: &[T],
        inv_std: &[T],
        dy: &[T],
    ) {
        let (n, c, s) = nc_split(&self.nodes[x.0].shape).unwrap();
        let m = n * s;
        let inv_m = T::from_f64(1.0 / m as f64);

        // Per-channel reductions of dy and dy*xhat.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let mut a = T::zero();
                let mut b = T::zero();
                for j in base..base + s {
                    a += dy[j];
                    b += dy[j] * xhat[j];
                }
                sum_dy[ci] += a;
                sum_dy_xhat[ci] += b;
            }
        }
        if self.nodes[beta.0].requires_grad {
            let buf = self.grad_buf(beta);
            for ci in 0..c {
                buf[ci] += sum_dy[ci];
            }
        }
        if self.nodes[gamma.0].requires_grad {
            let buf = self.grad_buf(gamma);
            for ci in 0..c {
                buf[ci] += sum_dy_xhat[ci];
            }
        }
        if self.nodes[x.0].requires_grad {
            let gv = core::mem::take(&mut self.nodes[gamma.0].value);
            let buf = self.grad_buf(x);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    let coef = gv[ci] * inv_std[ci];
                    let mdy = sum_dy[ci] * inv_m;
                    let mdyx = sum_dy_xhat[ci] * inv_m;
                    for j in base..base + s {
                        buf[j] += coef * (dy[j] - mdy - xhat[j] * mdyx);
                    }
                }
            }
            self.nodes[gamma.0].value = gv;
        }
    }
}

/// Numerically-stable softmax of one row into `out`; returns the row's
/// log-sum-exp.
fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    mx + sum.ln()
}

/// The valid output range `lo..hi` for which `ow*stride + k - pad` lands in
/// `0..w`, so padding segments can be handled outside the copy loops.
#[inline]
fn valid_range(w: usize, wout: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(wout);
    let hi = if w + pad > k {
        (((w + pad - k - 1) / stride) + 1).min(wout)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// im2col for one sample: fills a (Cin*kh*kw, Hout*Wout) matrix whose rows
/// live at `r * row_stride` in `col` (so the same routine writes per-sample
/// panels and column slices of a batched matrix). Every element of each row
/// segment is written, so the buffer does not need pre-zeroing.
#[allow(clippy::too_many_arguments)]
fn im2col_sample<T: Scalar>(
    xplane_all: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    col: &mut [T],
    row_stride: usize,
) {
    let hw_out = hout * wout;
    for ci in 0..cin {
        let xplane = &xplane_all[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oh_lo, oh_hi) = valid_range(h, hout, ki, stride, pad);
            for kj in 0..kw {
                let (ow_lo, ow_hi) = valid_range(w, wout, kj, stride, pad);
                let row = (ci * kh + ki) * kw + kj;
                let dst_n = &mut col[row * row_stride..row * row_stride + hw_out];
                for v in dst_n[..oh_lo * wout].iter_mut() {
                    *v = T::zero();
                }
                for v in dst_n[oh_hi * wout..].iter_mut() {
                    *v = T::zero();
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    let src_row = &xplane[ih * w..(ih + 1) * w];
                    let dst = &mut dst_n[oh * wout..(oh + 1) * wout];
                    for v in dst[..ow_lo].iter_mut() {
                        *v = T::zero();
                    }
                    for v in dst[ow_hi..].iter_mut() {
                        *v = T::zero();
                    }
                    if stride == 1 {
                        let src_off = ow_lo + kj - pad;
                        dst[ow_lo..ow_hi]
                            .copy_from_slice(&src_row[src_off..src_off + (ow_hi - ow_lo)]);
                    } else {
                        for (d, s) in dst[ow_lo..ow_hi].iter_mut().zip(
                            src_row[ow_lo * stride + kj - pad..].iter().step_by(stride),
                        ) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_sample`]: scatter-add one sample's column panel back
/// into its image plane.
#[allow(clippy::too_many_arguments)]
fn col2im_sample_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    dx_plane_all: &mut [T],
    row_stride: usize,
) {
    let hw_out = hout * wout;
    for ci in 0..cin {
        let dplane = &mut dx_plane_all[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (oh_lo, oh_hi) = valid_range(h, hout, ki, stride, pad);
            for kj in 0..kw {
                let (ow_lo, ow_hi) = valid_range(w, wout, kj, stride, pad);
                let row = (ci * kh + ki) * kw + kj;
                let src_n = &col[row * row_stride..row * row_stride + hw_out];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    let src = &src_n[oh * wout..(oh + 1) * wout];
                    let drow = &mut dplane[ih * w..(ih + 1) * w];
                    if stride == 1 {
                        let dst_off = ow_lo + kj - pad;
                        for (d, s) in drow[dst_off..dst_off + (ow_hi - ow_lo)]
                            .iter_mut()
                            .zip(&src[ow_lo..ow_hi])
                        {
                            *d += *s;
                        }
                    } else {
                        for (s, d) in src[ow_lo..ow_hi]
                            .iter()
                            .zip(drow[ow_lo * stride + kj - pad..].iter_mut().step_by(stride))
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

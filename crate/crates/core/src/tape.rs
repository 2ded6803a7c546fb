//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every value computed during a forward pass; [`Var`] is a
//! copyable handle to one of them. Operations append nodes in execution
//! order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Only leaves keep gradients between calls. Gradients accumulate across
//! repeated `backward` calls until [`Tape::zero_grads`].
//!
//! ```
//! use decorr_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics from a training-mode batchnorm, used to
/// update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        inner: usize,
        train: bool,
    },
    Deconv2 {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    CholInverse(Var),
    SelectColumns {
        a: Var,
        cols: Vec<usize>,
    },
    AppendOnes(Var),
    CenterColumns(Var),
    AddDiagonal(Var),
    /// Scalar output whose input gradients were computed during the forward
    /// pass (fused sub-computations such as the correlation loss).
    Fused {
        inputs: Vec<(Var, Vec<T>)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation. Confined to a single thread.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- dense algebra -------------------------------------------------

    /// `y = x W + b` for `x: N×D`, `W: D×K`, `b: K`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("affine", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("affine", ws, bs));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * k];
        let bias = self.value(b).data();
        for row in out.chunks_mut(k) {
            row.copy_from_slice(bias);
        }
        gemm(n, d, k, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, k], out)?, Op::Affine { x, w, b }, rg))
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (asz, bsz) = (self.value(a).shape(), self.value(b).shape());
        if asz.len() != 2 || bsz.len() != 2 {
            return Err(Error::shape("matmul", asz, bsz));
        }
        let (m, ka) = if trans_a { (asz[1], asz[0]) } else { (asz[0], asz[1]) };
        let (kb, n) = if trans_b { (bsz[1], bsz[0]) } else { (bsz[0], bsz[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", asz, bsz));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            ka,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        check_same(name, self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {:?}", bad),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = [v.rows(), v.row_len()];
        self.reshape(a, &shape)
    }

    // ----- convolutional layers -----------------------------------------

    /// Stride-1 cross-correlation with odd square kernels and "same" zero
    /// padding: `x: N×C×H×W`, `k: K×C×s×s`, `b: K`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if ks[1] != xs[1] {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {} channels, input has {}", ks[1], xs[1]),
            ));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::dim("conv2d", "kernel must be odd and square"));
        }
        if self.value(b).shape() != [ks[0]] {
            return Err(Error::shape("conv2d", &ks, self.value(b).shape()));
        }
        let geo = ConvGeo::new(&xs, &ks);
        let hw = geo.hw();
        let mut out = vec![T::zero(); geo.n * geo.k * hw];
        let (xv, kv, bv) = (self.value(x).data(), self.value(k).data(), self.value(b).data());
        let g = geo.group();
        let mut cols = vec![T::zero(); geo.ckk() * g * hw];
        let mut prod = vec![T::zero(); geo.k * g * hw];
        for s0 in (0..geo.n).step_by(g) {
            let m = g.min(geo.n - s0);
            let ld = m * hw;
            for j in 0..m {
                geo.im2col(&xv[(s0 + j) * geo.c * hw..][..geo.c * hw], &mut cols, ld, j * hw);
            }
            gemm(geo.k, geo.ckk(), ld, kv, false, &cols[..geo.ckk() * ld], false, &mut prod[..geo.k * ld], false);
            for j in 0..m {
                for ch in 0..geo.k {
                    let src = &prod[ch * ld + j * hw..][..hw];
                    let dst = &mut out[((s0 + j) * geo.k + ch) * hw..][..hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bv[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        let t = Tensor::new(&[geo.n, geo.k, geo.h, geo.w], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, b }, rg))
    }

    /// 2×2 stride-2 transposed convolution: `x: N×Ci×H×W`, `w: Ci×Co×2×2`,
    /// `b: Co`, output `N×Co×2H×2W`.
    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::shape("deconv2x2", &xs, &ws));
        }
        if self.value(b).shape() != [ws[1]] {
            return Err(Error::shape("deconv2x2", &ws, self.value(b).shape()));
        }
        let (n, ci, h, wd, co) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
        let hw = h * wd;
        let mut out = vec![T::zero(); n * co * 4 * hw];
        let mut y = vec![T::zero(); co * 4 * hw];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for s in 0..n {
            gemm(co * 4, ci, hw, wv, true, &xv[s * ci * hw..(s + 1) * ci * hw], false, &mut y, false);
            let o = &mut out[s * co * 4 * hw..(s + 1) * co * 4 * hw];
            for c in 0..co {
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &y[(c * 4 + a * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..wd {
                                o[(c * 2 * h + 2 * i + a) * 2 * wd + 2 * j + bb] =
                                    src[i * wd + j] + bv[c];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::new(&[n, co, 2 * h, 2 * wd], out)?;
        Ok(self.push(t, Op::Deconv2 { x, w, b }, rg))
    }

    /// 2×2 stride-2 max pooling; the first maximal element of each window
    /// receives the gradient.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::dim(
                "max_pool2",
                format!("spatial dims of {:?} not divisible by 2", xs),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || !xs[2].is_multiple_of(k) || !xs[3].is_multiple_of(k) {
            return Err(Error::dim(
                "avg_pool",
                format!("spatial dims of {:?} not divisible by {}", xs, k),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[plane * oh * ow + (i / k) * ow + j / k] =
                        out[plane * oh * ow + (i / k) * ow + j / k] + xv[plane * h * w + i * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(x);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool { x, k }, rg))
    }

    // ----- normalization -------------------------------------------------

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        let (n, c, inner) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(Error::dim("batchnorm", format!("unsupported rank {:?}", xs))),
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batchnorm", xs, self.value(gamma).shape()));
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch normalization over the batch (and spatial) axes of
    /// `N×F` or `N×C×H×W` input.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::DegenerateBatch { op: "batchnorm", n });
        }
        let m = T::of((n * inner) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let seg = &xv[(s * c + ch) * inner..][..inner];
                mean[ch] = mean[ch] + seg.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for s in 0..n {
            for ch in 0..c {
                let seg = &xv[(s * c + ch) * inner..][..inner];
                var[ch] = var[ch] + seg.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, inner);
        let unbiased = m / (m - T::one());
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.value(x).shape().to_vec();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                inner,
                train: true,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, inner) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", &[c], &[running_mean.len()]));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, c, inner);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                inner,
                train: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        inner: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (idx, &v) in xv.iter().enumerate() {
            let ch = (idx / inner) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[idx] = h;
            out[idx] = g[ch] * h + b[ch];
        }
        (out, xhat)
    }

    // ----- losses --------------------------------------------------------

    /// Per-sample cross-entropy `-log softmax(logits)[label]`, shape `[N]`.
    pub fn cross_entropy_per_sample(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("cross_entropy", ls, &[labels.len()]));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                limit: k,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z = z + *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            out.push(mx + z.ln() - row[labels[i]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(&[n], out)?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let per = self.cross_entropy_per_sample(logits, labels)?;
        Ok(self.mean(per))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = s / T::of(av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    // ----- linear-algebra helpers for the regression -------------------

    /// Inverse of a symmetric positive definite matrix via Cholesky. The
    /// input is symmetrized as `(A + Aᵀ)/2` first.
    pub fn chol_inverse(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("chol_inverse", format!("not square: {:?}", s)));
        }
        let m = s[0];
        let av = self.value(a).data();
        let half = T::of(0.5);
        let sym: Vec<T> = (0..m * m)
            .map(|i| (av[i] + av[(i % m) * m + i / m]) * half)
            .collect();
        let inv = linalg::spd_inverse(&sym, m)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, m], inv)?, Op::CholInverse(a), rg))
    }

    /// Keeps the listed columns of an `N×M` matrix.
    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::dim("select_columns", "expected a matrix"));
        }
        let (n, m) = (s[0], s[1]);
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(Error::Index {
                op: "select_columns",
                index: bad,
                limit: m,
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            out.extend(cols.iter().map(|&c| av[i * m + c]));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[n, cols.len()], out)?,
            Op::SelectColumns {
                a,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `[A, 1]`: appends a column of ones.
    pub fn append_ones_column(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::dim("append_ones_column", "expected a matrix"));
        }
        let (n, m) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * (m + 1));
        for row in av.chunks(m.max(1)).take(n) {
            out.extend_from_slice(&row[..m]);
            out.push(T::one());
        }
        if m == 0 {
            out = vec![T::one(); n];
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m + 1], out)?, Op::AppendOnes(a), rg))
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::dim("center_columns", "expected a matrix"));
        }
        let (n, m) = (s[0], s[1]);
        let av = self.value(a).data();
        let means = column_means(av, n, m);
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &v)| v - means[i % m])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::CenterColumns(a), rg))
    }

    /// `A + c·I` with a constant `c`.
    pub fn add_diagonal(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("add_diagonal", "expected a square matrix"));
        }
        let m = s[0];
        let mut t = self.value(a).clone();
        for i in 0..m {
            let v = t.at2(i, i);
            t.set2(i, i, v + c);
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddDiagonal(a), rg))
    }

    /// Records a scalar whose gradients with respect to `inputs` were already
    /// computed (each paired gradient must match its input's shape).
    pub fn fused_scalar(&mut self, value: T, inputs: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).len() != g.len() {
                return Err(Error::shape("fused_scalar", self.value(*v).shape(), &[g.len()]));
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused { inputs }, rg))
    }

    // ----- reverse sweep ---------------------------------------------------

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    /// Differentiable leaves created before `loss` that it does not depend on
    /// receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();
        for i in (0..end).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        for node in &mut self.nodes[..end] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, d) = (shp(*x)[0], shp(*x)[1]);
                let k = shp(*w)[1];
                if let Some(dx) = slot(grads, nodes, *x) {
                    gemm(n, k, d, g, false, val(*w), true, dx, true);
                }
                if let Some(dw) = slot(grads, nodes, *w) {
                    gemm(d, n, k, val(*x), true, g, false, dw, true);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let (asz, bsz) = (shp(*a), shp(*b));
                let (m, k) = if ta { (asz[1], asz[0]) } else { (asz[0], asz[1]) };
                let n = if tb { bsz[0] } else { bsz[1] };
                if let Some(da) = slot(grads, nodes, *a) {
                    if !ta {
                        gemm(m, n, k, g, false, val(*b), !tb, da, true);
                    } else {
                        gemm(k, n, m, val(*b), tb, g, true, da, true);
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    if !tb {
                        gemm(k, m, n, val(*a), !ta, g, false, db, true);
                    } else {
                        gemm(n, m, k, g, true, val(*a), ta, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * o;
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * o;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::AddDiagonal(a) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    add_into(da, g);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = nodes[i].value.data();
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Log(a) => {
                let av = val(*a);
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d = *d + gv / x;
                    }
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                let two = T::of(2.0);
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d = *d + two * gv * x;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                if let Some(da) = slot(grads, nodes, *a) {
                    let s = g[0] / n;
                    da.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Conv2d { x, k, b } => {
                let geo = ConvGeo::new(shp(*x), shp(*k));
                let hw = geo.hw();
                let (xv, kv) = (val(*x), val(*k));
                if let Some(db) = slot(grads, nodes, *b) {
                    for s in 0..geo.n {
                        for ch in 0..geo.k {
                            let seg = &g[(s * geo.k + ch) * hw..][..hw];
                            db[ch] = db[ch] + seg.iter().copied().sum::<T>();
                        }
                    }
                }
                let need_k = nodes[k.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if need_k || need_x {
                    let grp = geo.group();
                    let mut cols = vec![T::zero(); geo.ckk() * grp * hw];
                    let mut gsm = vec![T::zero(); geo.k * grp * hw];
                    for s0 in (0..geo.n).step_by(grp) {
                        let m = grp.min(geo.n - s0);
                        let ld = m * hw;
                        // output gradient of the group as K × (m·HW)
                        for j in 0..m {
                            for ch in 0..geo.k {
                                gsm[ch * ld + j * hw..][..hw].copy_from_slice(&g[((s0 + j) * geo.k + ch) * hw..][..hw]);
                            }
                        }
                        let gs = &gsm[..geo.k * ld];
                        if need_k {
                            for j in 0..m {
                                geo.im2col(&xv[(s0 + j) * geo.c * hw..][..geo.c * hw], &mut cols, ld, j * hw);
                            }
                            let dk = slot(grads, nodes, *k).expect("requires grad");
                            gemm(geo.k, ld, geo.ckk(), gs, false, &cols[..geo.ckk() * ld], true, dk, true);
                        }
                        if need_x {
                            gemm(geo.ckk(), geo.k, ld, kv, true, gs, false, &mut cols[..geo.ckk() * ld], false);
                            let dx = slot(grads, nodes, *x).expect("requires grad");
                            for j in 0..m {
                                geo.col2im(&cols, ld, j * hw, &mut dx[(s0 + j) * geo.c * hw..][..geo.c * hw]);
                            }
                        }
                    }
                }
            }
            Op::Deconv2 { x, w, b } => {
                let (xs, ws) = (shp(*x), shp(*w));
                let (n, ci, h, wd, co) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
                let hw = h * wd;
                let mut gy = vec![T::zero(); co * 4 * hw];
                let (xv, wv) = (val(*x), val(*w));
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let need_b = nodes[b.0].requires_grad;
                let mut dbias = vec![T::zero(); co];
                for s in 0..n {
                    let gs = &g[s * co * 4 * hw..(s + 1) * co * 4 * hw];
                    for c in 0..co {
                        for a in 0..2 {
                            for bb in 0..2 {
                                let dst = &mut gy[(c * 4 + a * 2 + bb) * hw..][..hw];
                                for ii in 0..h {
                                    for jj in 0..wd {
                                        dst[ii * wd + jj] =
                                            gs[(c * 2 * h + 2 * ii + a) * 2 * wd + 2 * jj + bb];
                                    }
                                }
                                dbias[c] = dbias[c] + dst.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if need_x {
                        let dx = slot(grads, nodes, *x).expect("requires grad");
                        let dxs = &mut dx[s * ci * hw..(s + 1) * ci * hw];
                        gemm(ci, co * 4, hw, wv, false, &gy, false, dxs, true);
                    }
                    if need_w {
                        let dw = slot(grads, nodes, *w).expect("requires grad");
                        let xs_ = &xv[s * ci * hw..(s + 1) * ci * hw];
                        gemm(ci, hw, co * 4, xs_, false, &gy, true, dw, true);
                    }
                }
                if need_b {
                    let db = slot(grads, nodes, *b).expect("requires grad");
                    add_into(db, &dbias);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (&gv, &idx) in g.iter().zip(argmax) {
                        dx[idx as usize] = dx[idx as usize] + gv;
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let xs = shp(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let plane = idx / (h * w);
                        let (ii, jj) = ((idx % (h * w)) / w, idx % w);
                        *d = *d + g[plane * oh * ow + (ii / k) * ow + jj / k] * inv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                inner,
                train,
            } => {
                let c = inv_std.len();
                let inner = *inner;
                let gm = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (idx / inner) % c;
                    sum_g[ch] = sum_g[ch] + gv;
                    sum_gx[ch] = sum_gx[ch] + gv * h;
                }
                if let Some(dgm) = slot(grads, nodes, *gamma) {
                    add_into(dgm, &sum_gx);
                }
                if let Some(dbt) = slot(grads, nodes, *beta) {
                    add_into(dbt, &sum_g);
                }
                if let Some(dx) = slot(grads, nodes, *x) {
                    let m = T::of((g.len() / c) as f64);
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let ch = (idx / inner) % c;
                        let scale = gm[ch] * inv_std[ch];
                        *d = *d
                            + if *train {
                                scale / m * (m * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch])
                            } else {
                                scale * g[idx]
                            };
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(dl) = slot(grads, nodes, *logits) {
                    let k = probs.len() / labels.len().max(1);
                    for (r, &lab) in labels.iter().enumerate() {
                        let row = &mut dl[r * k..(r + 1) * k];
                        for (j, d) in row.iter_mut().enumerate() {
                            let t = if j == lab { T::one() } else { T::zero() };
                            *d = *d + g[r] * (probs[r * k + j] - t);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = T::of(2.0) * g[0] / T::of(av.len() as f64);
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d = *d + s * (x - y);
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d = *d - s * (x - y);
                    }
                }
            }
            Op::CholInverse(a) => {
                let inv = nodes[i].value.data();
                let m = nodes[i].value.shape()[0];
                if let Some(da) = slot(grads, nodes, *a) {
                    // dA = -A⁻¹ G A⁻¹, symmetrized to match the forward.
                    let mut t = vec![T::zero(); m * m];
                    let mut r = vec![T::zero(); m * m];
                    gemm(m, m, m, inv, false, g, false, &mut t, false);
                    gemm(m, m, m, &t, false, inv, false, &mut r, false);
                    let half = T::of(0.5);
                    for p in 0..m {
                        for q in 0..m {
                            da[p * m + q] = da[p * m + q] - half * (r[p * m + q] + r[q * m + p]);
                        }
                    }
                }
            }
            Op::SelectColumns { a, cols } => {
                let m = shp(*a)[1];
                let k = cols.len();
                if let Some(da) = slot(grads, nodes, *a) {
                    for (r, row) in g.chunks(k.max(1)).enumerate().take(shp(*a)[0]) {
                        for (&c, &v) in cols.iter().zip(row) {
                            da[r * m + c] = da[r * m + c] + v;
                        }
                    }
                }
            }
            Op::AppendOnes(a) => {
                let m = shp(*a)[1];
                if let Some(da) = slot(grads, nodes, *a) {
                    for (r, row) in g.chunks(m + 1).enumerate() {
                        add_into(&mut da[r * m..(r + 1) * m], &row[..m]);
                    }
                }
            }
            Op::CenterColumns(a) => {
                let (n, m) = (shp(*a)[0], shp(*a)[1]);
                let gmeans = column_means(g, n, m);
                if let Some(da) = slot(grads, nodes, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] - gmeans[idx % m];
                    }
                }
            }
            Op::Fused { inputs } => {
                for (v, dv) in inputs {
                    if let Some(d) = slot(grads, nodes, *v) {
                        d.iter_mut().zip(dv).for_each(|(a, &b)| *a = *a + g[0] * b);
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn column_means<T: Real>(v: &[T], n: usize, m: usize) -> Vec<T> {
    let mut means = vec![T::zero(); m];
    for row in v.chunks(m.max(1)).take(n) {
        add_into(&mut means, row);
    }
    let inv = T::one() / T::of(n as f64);
    means.iter_mut().for_each(|x| *x = *x * inv);
    means
}

/// Geometry of a same-padded stride-1 convolution.
struct ConvGeo {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ks: usize,
    pad: usize,
}

impl ConvGeo {
    fn new(xs: &[usize], ks: &[usize]) -> Self {
        ConvGeo {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ks[0],
            ks: ks[2],
            pad: ks[2] / 2,
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.ks * self.ks
    }

    /// Samples per batched GEMM, keeping the patch matrix near 250k entries
    /// so it stays cache resident.
    fn group(&self) -> usize {
        (250_000 / (self.ckk() * self.hw()).max(1)).clamp(1, self.n.max(1))
    }

    /// Output columns `[lo, hi)` whose tap `d` lands inside a row of width
    /// `w`, and the input index of column `lo`.
    fn span(&self, d: usize, w: usize) -> (usize, usize, usize) {
        let lo = self.pad.saturating_sub(d);
        let hi = (w + self.pad).saturating_sub(d).min(w);
        (lo, hi.max(lo), lo + d - self.pad)
    }

    /// One sample `C×H×W` into `(C·s·s) × (H·W)` patch columns, written at
    /// column `off` of a matrix with row stride `ld`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T], ld: usize, off: usize) {
        let (h, w, ks) = (self.h, self.w, self.ks);
        for c in 0..self.c {
            for di in 0..ks {
                let (ilo, ihi, _) = self.span(di, h);
                for dj in 0..ks {
                    let (lo, hi, src0) = self.span(dj, w);
                    let row = &mut cols[((c * ks + di) * ks + dj) * ld + off..][..h * w];
                    row[..ilo * w].fill(T::zero());
                    row[ihi * w..].fill(T::zero());
                    for oi in ilo..ihi {
                        let ii = oi + di - self.pad;
                        let dst = &mut row[oi * w..(oi + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        dst[lo..hi].copy_from_slice(&x[(c * h + ii) * w + src0..][..hi - lo]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `dx`.
    fn col2im<T: Real>(&self, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
        let (h, w, ks) = (self.h, self.w, self.ks);
        for c in 0..self.c {
            for di in 0..ks {
                let (ilo, ihi, _) = self.span(di, h);
                for dj in 0..ks {
                    let (lo, hi, src0) = self.span(dj, w);
                    let row = &cols[((c * ks + di) * ks + dj) * ld + off..][..h * w];
                    for oi in ilo..ihi {
                        let ii = oi + di - self.pad;
                        let dst = &mut dx[(c * h + ii) * w + src0..][..hi - lo];
                        for (d, &v) in dst.iter_mut().zip(&row[oi * w + lo..oi * w + hi]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(2));
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::eye(2));

        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn affine_shape_errors_report_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        match tape.affine(x, w, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn conv_with_ones_kernel_counts_neighbours() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[1], 6.0);
    }

    #[test]
    fn conv_delta_kernel_sums_channels() {
        let mut tape = Tape::new();
        let xs = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let x = tape.constant(xs.clone());
        let mut kd = vec![0.0; 18];
        kd[4] = 1.0;
        kd[13] = 1.0;
        let k = tape.constant(t(&[1, 2, 3, 3], &kd));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        for i in 0..16 {
            assert_eq!(tape.value(y).data()[i], xs.data()[i] + xs.data()[16 + i]);
        }
    }

    #[test]
    fn conv_groups_match_per_sample_runs() {
        // 18 patch rows × 256 pixels puts 54 samples in a group, so 60
        // samples span two groups.
        let mut r = crate::rng::seeded(5);
        let x = crate::rng::uniform::<f64>(&mut r, &[60, 2, 16, 16], -1.0, 1.0);
        let k = crate::rng::uniform::<f64>(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
        let b = t(&[2], &[0.5, -0.25]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.param(x.clone()), tape.param(k.clone()), tape.param(b.clone()));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let mut dk = Tensor::zeros(k.shape());
        for s in 0..60 {
            let mut one = Tape::new();
            let xs = one.param(x.slice_rows(s, s + 1));
            let ks = one.param(k.clone());
            let bs = one.constant(b.clone());
            let ys = one.conv2d(xs, ks, bs).unwrap();
            let ls = one.sum(ys);
            one.backward(ls).unwrap();
            assert!(one.value(ys).max_abs_diff(&tape.value(y).slice_rows(s, s + 1)) < 1e-12);
            let gx = tape.grad(xv).unwrap().slice_rows(s, s + 1);
            assert!(one.grad(xs).unwrap().max_abs_diff(&gx) < 1e-12);
            for (a, g) in dk.data_mut().iter_mut().zip(one.grad(ks).unwrap().data()) {
                *a += g;
            }
        }
        assert!(tape.grad(kv).unwrap().max_abs_diff(&dk) < 1e-8);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pooling_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mx = tape.max_pool2(x).unwrap();
        let av = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(mx).data(), &[4.0]);
        assert_eq!(tape.value(av).data(), &[2.5]);

        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
        let mx = tape.max_pool2(c).unwrap();
        let av = tape.avg_pool(c, 4).unwrap();
        assert!(tape.value(mx).data().iter().all(|&v| v == 0.7));
        assert!(tape.value(av).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(tape.avg_pool(c, 3).is_err());
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.max_pool2(odd).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.max_pool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 2.0, 5.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        // Column 0: mean 1, var 1 -> ±1/sqrt(1+1e-5).
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] + e).abs() < 1e-12 && (v[2] - e).abs() < 1e-12);
        // Column 1 is constant -> 0.
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(stats.mean, vec![1.0, 5.0]);
        assert_eq!(stats.var, vec![2.0, 0.0]);
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            tape.batchnorm_train(x, g, b, 1e-5),
            Err(Error::DegenerateBatch { n: 1, .. })
        ));
        assert!(tape.batchnorm_eval(x, g, b, &[0.0; 3], &[1.0; 3], 1e-5).is_ok());
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 10]));
        let ce = tape.softmax_cross_entropy(l, &[0, 4, 9]).unwrap();
        assert!((tape.value(ce).item() - 10f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0; 10];
        big[3] = 1e4;
        let l = tape.constant(t(&[1, 10], &big));
        let ce = tape.softmax_cross_entropy(l, &[3]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(l, &[10]),
            Err(Error::Index { index: 10, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = t(&[1, 3], &[1.0, 2.0, 0.5]);
        let l = tape.param(logits.clone());
        let ce = tape.softmax_cross_entropy(l, &[1]).unwrap();
        tape.backward(ce).unwrap();
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let g = tape.grad(l).unwrap().data();
        for j in 0..3 {
            let p = logits.data()[j].exp() / z;
            let expect = p - if j == 1 { 1.0 } else { 0.0 };
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 3.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item(), 5.0);
        let m0 = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(m0).item(), 0.0);
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.mse(a, c).is_err());
    }

    #[test]
    fn chol_inverse_cases() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let inv = tape.chol_inverse(i).unwrap();
        assert_eq!(tape.value(inv), &Tensor::eye(3));
        let d = tape.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]));
        let inv = tape.chol_inverse(d).unwrap();
        let expect = t(&[2, 2], &[0.5, 0.0, 0.0, 0.25]);
        assert!(tape.value(inv).max_abs_diff(&expect) < 1e-15);
        let s = tape.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(tape.chol_inverse(s), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
        let unused = tape.param(t(&[2], &[5.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);

        // A second loss without zeroing accumulates.
        let sq = tape.square(x);
        let s2 = tape.sum(sq);
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -3.0, 7.0]);

        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[3, 5, 2, 2], 0.5));
        let b = tape.constant(Tensor::full(&[5], 0.25));
        let y = tape.deconv2x2(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 8, 8]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.75));
    }
}

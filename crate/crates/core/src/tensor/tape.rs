//! Reverse-mode automatic differentiation over a flat arena tape.
//!
//! Ops append nodes in creation order, which is already a topological order,
//! so the backward sweep is a single reverse walk. Every op validates shapes
//! up front and checks its output for non-finite values.

use super::kernels::{self, ConvDims};
use super::{conv_out_dim, Element, Tensor};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: u32,
    tape: u32,
}

/// Per-channel batch statistics captured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    /// Number of values behind each channel's statistics (N*H*W).
    pub count: usize,
}

enum Op<T: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, T, T),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    AddRow(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ChannelBias(usize, usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: usize,
        scale: Vec<T>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: usize,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(usize),
    GlobalMaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    ChannelMean(usize),
    ChannelMax {
        input: usize,
        argmax: Vec<u32>,
    },
    ConcatChannels(usize, usize),
    MulChannelGate(usize, usize),
    MulSpatialGate(usize, usize),
    LogSoftmax(usize),
    GatherRows {
        input: usize,
        index: Vec<usize>,
    },
    NllPickMean {
        input: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    SumAll(usize),
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Arena of computation nodes; owns values and gradients.
pub struct Tape<T: Element> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Graph(
                "variable belongs to a different tape".into(),
            ));
        }
        Ok(v.id as usize)
    }

    /// Inserts a new leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var { id, tape: self.id }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id as usize].value
    }

    /// Gradient of the last `backward` call, if the node participated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.id as usize].grad.as_ref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var { id, tape: self.id })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ---------------------------------------------------------- elementwise

    fn binary_same_shape(&mut self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("add", a, b)?;
        let out = self.nodes[ai]
            .value
            .zip_with(&self.nodes[bi].value, |x, y| x + y);
        let rg = self.needs(ai) || self.needs(bi);
        self.push("add", out, Op::Add(ai, bi), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("sub", a, b)?;
        let out = self.nodes[ai]
            .value
            .zip_with(&self.nodes[bi].value, |x, y| x - y);
        let rg = self.needs(ai) || self.needs(bi);
        self.push("sub", out, Op::Sub(ai, bi), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("mul", a, b)?;
        let out = self.nodes[ai]
            .value
            .zip_with(&self.nodes[bi].value, |x, y| x * y);
        let rg = self.needs(ai) || self.needs(bi);
        self.push("mul", out, Op::Mul(ai, bi), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same_shape("div", a, b)?;
        let out = self.nodes[ai]
            .value
            .zip_with(&self.nodes[bi].value, |x, y| x / y);
        let rg = self.needs(ai) || self.needs(bi);
        self.push("div", out, Op::Div(ai, bi), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x + s);
        let rg = self.needs(ai);
        self.push("add_scalar", out, Op::AddScalar(ai), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x * s);
        let rg = self.needs(ai);
        self.push("scale", out, Op::Scale(ai, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x.maximum(T::ZERO));
        let rg = self.needs(ai);
        self.push("relu", out, Op::Relu(ai), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(stable_sigmoid);
        let rg = self.needs(ai);
        self.push("sigmoid", out, Op::Sigmoid(ai), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x.exp());
        let rg = self.needs(ai);
        self.push("exp", out, Op::Exp(ai), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x.maximum(lo).minimum(hi));
        let rg = self.needs(ai);
        self.push("clamp", out, Op::Clamp(ai, lo, hi), rg)
    }

    // ---------------------------------------------------------- matmul

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} * {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let rg = self.needs(ai) || self.needs(bi);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::Matmul(ai, bi),
            rg,
        )
    }

    /// `a * b^T` with `b` stored row-major `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} * {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = kernels::matmul_nt(va.data(), vb.data(), m, k, n);
        let rg = self.needs(ai) || self.needs(bi);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], data),
            Op::MatmulNT(ai, bi),
            rg,
        )
    }

    /// `[n, d] + [d]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_row", format!("{sa:?} + {sb:?}")));
        }
        let (n, d) = (sa[0], sa[1]);
        let mut data = va.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += vb.data()[j];
            }
        }
        let rg = self.needs(ai) || self.needs(bi);
        self.push(
            "add_row",
            Tensor::from_parts(vec![n, d], data),
            Op::AddRow(ai, bi),
            rg,
        )
    }

    // ---------------------------------------------------------- convolution

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ii, ki) = (self.idx(input)?, self.idx(kernel)?);
        let (vi, vk) = (&self.nodes[ii].value, &self.nodes[ki].value);
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", format!("input {si:?} kernel {sk:?}")));
        }
        let d = ConvDims {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            f: sk[0],
            k: sk[2],
            stride,
            pad,
            oh: conv_out_dim(si[2], sk[2], stride, pad)?,
            ow: conv_out_dim(si[3], sk[3], stride, pad)?,
        };
        let data = kernels::conv2d_forward(vi.data(), vk.data(), &d);
        let rg = self.needs(ii) || self.needs(ki);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![d.n, d.f, d.oh, d.ow], data),
            Op::Conv2d {
                input: ii,
                kernel: ki,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `[n, c, h, w] + [c]`, broadcast over batch and space.
    pub fn channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("channel_bias", format!("{sa:?} + {sb:?}")));
        }
        let (n, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
        let mut data = va.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bias = vb.data()[ci];
                for v in &mut data[(ni * c + ci) * hw..][..hw] {
                    *v += bias;
                }
            }
        }
        let rg = self.needs(ai) || self.needs(bi);
        self.push(
            "channel_bias",
            Tensor::from_parts(sa.to_vec(), data),
            Op::ChannelBias(ai, bi),
            rg,
        )
    }

    // ---------------------------------------------------------- batch norm

    /// Training-mode batch norm; returns the output and the batch statistics
    /// so callers can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (ii, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (vi, vg, vb) = (
            &self.nodes[ii].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        );
        let si = vi.shape();
        if si.len() != 4 || vg.shape() != [si[1]] || vb.shape() != [si[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?} gamma {:?} beta {:?}", si, vg.shape(), vb.shape()),
            ));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        if n < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training mode needs a batch of at least 2, got {n}"),
            ));
        }
        let fwd = kernels::batchnorm_forward(vi.data(), vg.data(), vb.data(), n, c, hw, eps);
        let stats = BatchStats {
            mean: fwd.mean,
            var_biased: fwd.var_biased,
            count: n * hw,
        };
        let rg = self.needs(ii) || self.needs(gi) || self.needs(bi);
        let out = self.push(
            "batch_norm",
            Tensor::from_parts(si.to_vec(), fwd.output),
            Op::BatchNorm {
                input: ii,
                gamma: gi,
                beta: bi,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
            rg,
        )?;
        Ok((out, stats))
    }

    /// Per-channel affine `x * scale[c] + shift[c]` with constant
    /// coefficients; the evaluation-mode counterpart of batch norm.
    pub fn channel_affine(&mut self, input: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 || scale.len() != si[1] || shift.len() != si[1] {
            return Err(Error::shape(
                "channel_affine",
                format!("input {:?} scale {} shift {}", si, scale.len(), shift.len()),
            ));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let mut data = vec![T::ZERO; vi.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = vi.data()[base + i] * scale[ci] + shift[ci];
                }
            }
        }
        let rg = self.needs(ii);
        self.push(
            "channel_affine",
            Tensor::from_parts(si.to_vec(), data),
            Op::ChannelAffine {
                input: ii,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    // ---------------------------------------------------------- pooling

    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("{si:?}")));
        }
        let oh = conv_out_dim(si[2], k, stride, 0)?;
        let ow = conv_out_dim(si[3], k, stride, 0)?;
        let out = kernels::max_pool2d(vi.data(), si[0], si[1], si[2], si[3], k, stride, oh, ow);
        let rg = self.needs(ii);
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![si[0], si[1], oh, ow], out.values),
            Op::MaxPool {
                input: ii,
                argmax: out.argmax,
            },
            rg,
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("avg_pool2d", format!("{si:?}")));
        }
        let oh = conv_out_dim(si[2], k, stride, 0)?;
        let ow = conv_out_dim(si[3], k, stride, 0)?;
        let values = kernels::avg_pool2d(vi.data(), si[0], si[1], si[2], si[3], k, stride, oh, ow);
        let rg = self.needs(ii);
        self.push(
            "avg_pool2d",
            Tensor::from_parts(vec![si[0], si[1], oh, ow], values),
            Op::AvgPool {
                input: ii,
                k,
                stride,
            },
            rg,
        )
    }

    /// `[n, c, h, w] -> [n, c]`, mean over space.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{si:?}")));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let inv = T::ONE / T::from_f64(hw as f64);
        let mut data = vec![T::ZERO; n * c];
        for p in 0..n * c {
            let mut acc = T::ZERO;
            for &v in &vi.data()[p * hw..p * hw + hw] {
                acc += v;
            }
            data[p] = acc * inv;
        }
        let rg = self.needs(ii);
        self.push(
            "global_avg_pool",
            Tensor::from_parts(vec![n, c], data),
            Op::GlobalAvgPool(ii),
            rg,
        )
    }

    /// `[n, c, h, w] -> [n, c]`, max over space; first maximum wins ties.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("global_max_pool", format!("{si:?}")));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let mut data = vec![T::ZERO; n * c];
        let mut argmax = vec![0u32; n * c];
        for p in 0..n * c {
            let plane = &vi.data()[p * hw..p * hw + hw];
            let mut best = plane[0];
            let mut best_ix = 0u32;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_ix = i as u32;
                }
            }
            data[p] = best;
            argmax[p] = best_ix;
        }
        let rg = self.needs(ii);
        self.push(
            "global_max_pool",
            Tensor::from_parts(vec![n, c], data),
            Op::GlobalMaxPool {
                input: ii,
                argmax,
            },
            rg,
        )
    }

    /// `[n, c, h, w] -> [n, 1, h, w]`, mean over channels.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("channel_mean", format!("{si:?}")));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let inv = T::ONE / T::from_f64(c as f64);
        let mut data = vec![T::ZERO; n * hw];
        for ni in 0..n {
            let out_plane = &mut data[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let in_plane = &vi.data()[(ni * c + ci) * hw..][..hw];
                for (o, &v) in out_plane.iter_mut().zip(in_plane) {
                    *o += v;
                }
            }
            for o in out_plane.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.needs(ii);
        self.push(
            "channel_mean",
            Tensor::from_parts(vec![n, 1, si[2], si[3]], data),
            Op::ChannelMean(ii),
            rg,
        )
    }

    /// `[n, c, h, w] -> [n, 1, h, w]`, max over channels; first wins ties.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 4 {
            return Err(Error::shape("channel_max", format!("{si:?}")));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let mut data = vec![T::ZERO; n * hw];
        let mut argmax = vec![0u32; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut best = vi.data()[ni * c * hw + p];
                let mut best_c = 0u32;
                for ci in 1..c {
                    let v = vi.data()[(ni * c + ci) * hw + p];
                    if v > best {
                        best = v;
                        best_c = ci as u32;
                    }
                }
                data[ni * hw + p] = best;
                argmax[ni * hw + p] = best_c;
            }
        }
        let rg = self.needs(ii);
        self.push(
            "channel_max",
            Tensor::from_parts(vec![n, 1, si[2], si[3]], data),
            Op::ChannelMax {
                input: ii,
                argmax,
            },
            rg,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::shape(
                "concat_channels",
                format!("{sa:?} ++ {sb:?}"),
            ));
        }
        let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = vec![T::ZERO; n * (c1 + c2) * hw];
        for ni in 0..n {
            let dst = &mut data[ni * (c1 + c2) * hw..][..(c1 + c2) * hw];
            dst[..c1 * hw].copy_from_slice(&va.data()[ni * c1 * hw..][..c1 * hw]);
            dst[c1 * hw..].copy_from_slice(&vb.data()[ni * c2 * hw..][..c2 * hw]);
        }
        let rg = self.needs(ai) || self.needs(bi);
        self.push(
            "concat_channels",
            Tensor::from_parts(vec![n, c1 + c2, sa[2], sa[3]], data),
            Op::ConcatChannels(ai, bi),
            rg,
        )
    }

    /// `[n, c, h, w] * [n, c]`, gate broadcast over space.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gate)?);
        let (vx, vg) = (&self.nodes[xi].value, &self.nodes[gi].value);
        let (sx, sg) = (vx.shape(), vg.shape());
        if sx.len() != 4 || sg != [sx[0], sx[1]] {
            return Err(Error::shape(
                "mul_channel_gate",
                format!("{sx:?} * {sg:?}"),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut data = vec![T::ZERO; vx.numel()];
        for p in 0..n * c {
            let g = vg.data()[p];
            for (o, &v) in data[p * hw..p * hw + hw].iter_mut().zip(&vx.data()[p * hw..p * hw + hw])
            {
                *o = v * g;
            }
        }
        let rg = self.needs(xi) || self.needs(gi);
        self.push(
            "mul_channel_gate",
            Tensor::from_parts(sx.to_vec(), data),
            Op::MulChannelGate(xi, gi),
            rg,
        )
    }

    /// `[n, c, h, w] * [n, 1, h, w]`, gate broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gate)?);
        let (vx, vg) = (&self.nodes[xi].value, &self.nodes[gi].value);
        let (sx, sg) = (vx.shape(), vg.shape());
        if sx.len() != 4 || sg != [sx[0], 1, sx[2], sx[3]] {
            return Err(Error::shape(
                "mul_spatial_gate",
                format!("{sx:?} * {sg:?}"),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut data = vec![T::ZERO; vx.numel()];
        for ni in 0..n {
            let gplane = &vg.data()[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = vx.data()[base + i] * gplane[i];
                }
            }
        }
        let rg = self.needs(xi) || self.needs(gi);
        self.push(
            "mul_spatial_gate",
            Tensor::from_parts(sx.to_vec(), data),
            Op::MulSpatialGate(xi, gi),
            rg,
        )
    }

    // ---------------------------------------------------------- losses

    /// Row-wise log-softmax over `[n, c]`, `c >= 2`. Errors on non-finite
    /// logits.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 2 || si[1] < 2 {
            return Err(Error::shape("log_softmax", format!("{si:?}")));
        }
        if !vi.all_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let data = kernels::log_softmax(vi.data(), si[0], si[1]);
        let rg = self.needs(ii);
        self.push(
            "log_softmax",
            Tensor::from_parts(si.to_vec(), data),
            Op::LogSoftmax(ii),
            rg,
        )
    }

    /// Reorders the rows of `[n, d]` by `index`; entries may repeat.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let ii = self.idx(input)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{si:?}")));
        }
        let (n, d) = (si[0], si[1]);
        if let Some(&bad) = index.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {bad} out of range for {n} rows"),
            ));
        }
        let mut data = vec![T::ZERO; index.len() * d];
        for (r, &src) in index.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&vi.data()[src * d..(src + 1) * d]);
        }
        let rg = self.needs(ii);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![index.len(), d], data),
            Op::GatherRows {
                input: ii,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// `-(1/n) * sum_i weights[i] * logp[i, labels[i]]`, a scalar.
    pub fn nll_pick_mean(&mut self, logp: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let ii = self.idx(logp)?;
        let vi = &self.nodes[ii].value;
        let si = vi.shape();
        if si.len() != 2 || labels.len() != si[0] || weights.len() != si[0] {
            return Err(Error::shape(
                "nll_pick_mean",
                format!("logp {:?}, {} labels, {} weights", si, labels.len(), weights.len()),
            ));
        }
        let (n, c) = (si[0], si[1]);
        for &y in labels {
            if y >= c {
                return Err(Error::LabelRange { label: y, classes: c });
            }
        }
        let mut acc = T::ZERO;
        for i in 0..n {
            acc += weights[i] * vi.data()[i * c + labels[i]];
        }
        let value = T::ZERO - acc / T::from_f64(n as f64);
        let rg = self.needs(ii);
        self.push(
            "nll_pick_mean",
            Tensor::scalar(value),
            Op::NllPickMean {
                input: ii,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let mut acc = T::ZERO;
        for &v in self.nodes[ii].value.data() {
            acc += v;
        }
        let rg = self.needs(ii);
        self.push("sum_all", Tensor::scalar(acc), Op::SumAll(ii), rg)
    }

    // ---------------------------------------------------------- backward

    /// Runs the reverse sweep from a scalar `loss`, replacing any gradients
    /// from a previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::from_parts(self.nodes[li].value.shape().to_vec(), vec![T::ONE]);
        self.nodes[li].grad = Some(seed);

        for i in (0..=li).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            step_backward(before, node, g);
        }
        Ok(())
    }
}

#[inline]
fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (T::ZERO - x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn accum<T: Element>(nodes: &mut [Node<T>], idx: usize, delta: Tensor<T>) {
    let n = &mut nodes[idx];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => {
            for (gi, &di) in g.data_mut().iter_mut().zip(delta.data()) {
                *gi += di;
            }
        }
        None => n.grad = Some(delta),
    }
}

fn needs<T: Element>(nodes: &[Node<T>], idx: usize) -> bool {
    nodes[idx].requires_grad
}

#[allow(clippy::too_many_lines)]
fn step_backward<T: Element>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(before, *a) {
                accum(before, *a, g.clone());
            }
            if needs(before, *b) {
                accum(before, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(before, *a) {
                accum(before, *a, g.clone());
            }
            if needs(before, *b) {
                accum(before, *b, g.map(|x| T::ZERO - x));
            }
        }
        Op::Mul(a, b) => {
            if needs(before, *a) {
                let da = g.zip_with(&before[*b].value, |x, y| x * y);
                accum(before, *a, da);
            }
            if needs(before, *b) {
                let db = g.zip_with(&before[*a].value, |x, y| x * y);
                accum(before, *b, db);
            }
        }
        Op::Div(a, b) => {
            if needs(before, *a) {
                let da = g.zip_with(&before[*b].value, |x, y| x / y);
                accum(before, *a, da);
            }
            if needs(before, *b) {
                let mut db = g.zip_with(&node.value, |x, y| T::ZERO - x * y);
                for (d, &bv) in db.data_mut().iter_mut().zip(before[*b].value.data()) {
                    *d = *d / bv;
                }
                accum(before, *b, db);
            }
        }
        Op::AddScalar(a) => {
            if needs(before, *a) {
                accum(before, *a, g.clone());
            }
        }
        Op::Scale(a, s) => {
            if needs(before, *a) {
                let s = *s;
                accum(before, *a, g.map(|x| x * s));
            }
        }
        Op::Relu(a) => {
            if needs(before, *a) {
                let da = g.zip_with(&before[*a].value, |x, v| {
                    if v > T::ZERO {
                        x
                    } else {
                        T::ZERO
                    }
                });
                accum(before, *a, da);
            }
        }
        Op::Sigmoid(a) => {
            if needs(before, *a) {
                let da = g.zip_with(&node.value, |x, y| x * y * (T::ONE - y));
                accum(before, *a, da);
            }
        }
        Op::Exp(a) => {
            if needs(before, *a) {
                let da = g.zip_with(&node.value, |x, y| x * y);
                accum(before, *a, da);
            }
        }
        Op::Clamp(a, lo, hi) => {
            if needs(before, *a) {
                let (lo, hi) = (*lo, *hi);
                let da = g.zip_with(&before[*a].value, |x, v| {
                    if v >= lo && v <= hi {
                        x
                    } else {
                        T::ZERO
                    }
                });
                accum(before, *a, da);
            }
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (before[*a].value.shape(), before[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if needs(before, *a) {
                let da = kernels::matmul_nt(g.data(), before[*b].value.data(), m, n, k);
                accum(before, *a, Tensor::from_parts(vec![m, k], da));
            }
            if needs(before, *b) {
                let db = kernels::matmul_tn(before[*a].value.data(), g.data(), m, k, n);
                accum(before, *b, Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::MatmulNT(a, b) => {
            let (sa, sb) = (before[*a].value.shape(), before[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            if needs(before, *a) {
                let da = kernels::matmul(g.data(), before[*b].value.data(), m, n, k);
                accum(before, *a, Tensor::from_parts(vec![m, k], da));
            }
            if needs(before, *b) {
                let db = kernels::matmul_tn(g.data(), before[*a].value.data(), m, n, k);
                accum(before, *b, Tensor::from_parts(vec![n, k], db));
            }
        }
        Op::AddRow(a, b) => {
            if needs(before, *a) {
                accum(before, *a, g.clone());
            }
            if needs(before, *b) {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let mut db = vec![T::ZERO; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g.data()[i * d + j];
                    }
                }
                accum(before, *b, Tensor::from_parts(vec![d], db));
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let si = before[*input].value.shape().to_vec();
            let sk = before[*kernel].value.shape().to_vec();
            let so = node.value.shape();
            let d = ConvDims {
                n: si[0],
                c: si[1],
                h: si[2],
                w: si[3],
                f: sk[0],
                k: sk[2],
                stride: *stride,
                pad: *pad,
                oh: so[2],
                ow: so[3],
            };
            if needs(before, *input) {
                let din = kernels::conv2d_backward_input(g.data(), before[*kernel].value.data(), &d);
                accum(before, *input, Tensor::from_parts(si.clone(), din));
            }
            if needs(before, *kernel) {
                let dk = kernels::conv2d_backward_kernel(before[*input].value.data(), g.data(), &d);
                accum(before, *kernel, Tensor::from_parts(sk, dk));
            }
        }
        Op::ChannelBias(a, b) => {
            if needs(before, *a) {
                accum(before, *a, g.clone());
            }
            if needs(before, *b) {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut db = vec![T::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for &v in &g.data()[(ni * c + ci) * hw..][..hw] {
                            db[ci] += v;
                        }
                    }
                }
                accum(before, *b, Tensor::from_parts(vec![c], db));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let grads = kernels::batchnorm_backward(
                g.data(),
                xhat,
                inv_std,
                before[*gamma].value.data(),
                n,
                c,
                hw,
            );
            if needs(before, *input) {
                accum(before, *input, Tensor::from_parts(s.to_vec(), grads.dinput));
            }
            if needs(before, *gamma) {
                accum(before, *gamma, Tensor::from_parts(vec![c], grads.dgamma));
            }
            if needs(before, *beta) {
                accum(before, *beta, Tensor::from_parts(vec![c], grads.dbeta));
            }
        }
        Op::ChannelAffine { input, scale } => {
            if needs(before, *input) {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut din = vec![T::ZERO; g.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            din[base + i] = g.data()[base + i] * scale[ci];
                        }
                    }
                }
                accum(before, *input, Tensor::from_parts(s.to_vec(), din));
            }
        }
        Op::MaxPool { input, argmax } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let (hw, oplane) = (si[2] * si[3], node.value.shape()[2] * node.value.shape()[3]);
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for p in 0..si[0] * si[1] {
                    for i in 0..oplane {
                        din[p * hw + argmax[p * oplane + i] as usize] += g.data()[p * oplane + i];
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::AvgPool { input, k, stride } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let so = node.value.shape();
                let (w, hw) = (si[3], si[2] * si[3]);
                let (oh, ow) = (so[2], so[3]);
                let inv = T::ONE / T::from_f64((k * k) as f64);
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for p in 0..si[0] * si[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(p * oh + oy) * ow + ox] * inv;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    din[p * hw + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                }
                            }
                        }
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::GlobalAvgPool(input) => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let hw = si[2] * si[3];
                let inv = T::ONE / T::from_f64(hw as f64);
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for p in 0..si[0] * si[1] {
                    let gv = g.data()[p] * inv;
                    for v in &mut din[p * hw..p * hw + hw] {
                        *v = gv;
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::GlobalMaxPool { input, argmax } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let hw = si[2] * si[3];
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for p in 0..si[0] * si[1] {
                    din[p * hw + argmax[p] as usize] += g.data()[p];
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::ChannelMean(input) => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let (c, hw) = (si[1], si[2] * si[3]);
                let inv = T::ONE / T::from_f64(c as f64);
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for ni in 0..si[0] {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            din[base + i] = g.data()[ni * hw + i] * inv;
                        }
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::ChannelMax { input, argmax } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let (c, hw) = (si[1], si[2] * si[3]);
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for ni in 0..si[0] {
                    for i in 0..hw {
                        let ci = argmax[ni * hw + i] as usize;
                        din[(ni * c + ci) * hw + i] += g.data()[ni * hw + i];
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (
                before[*a].value.shape().to_vec(),
                before[*b].value.shape().to_vec(),
            );
            let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            if needs(before, *a) {
                let mut da = vec![T::ZERO; n * c1 * hw];
                for ni in 0..n {
                    da[ni * c1 * hw..][..c1 * hw]
                        .copy_from_slice(&g.data()[ni * (c1 + c2) * hw..][..c1 * hw]);
                }
                accum(before, *a, Tensor::from_parts(sa.clone(), da));
            }
            if needs(before, *b) {
                let mut db = vec![T::ZERO; n * c2 * hw];
                for ni in 0..n {
                    db[ni * c2 * hw..][..c2 * hw]
                        .copy_from_slice(&g.data()[ni * (c1 + c2) * hw + c1 * hw..][..c2 * hw]);
                }
                accum(before, *b, Tensor::from_parts(sb, db));
            }
        }
        Op::MulChannelGate(x, gate) => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            if needs(before, *x) {
                let mut dx = vec![T::ZERO; g.numel()];
                for p in 0..n * c {
                    let gv = before[*gate].value.data()[p];
                    for i in 0..hw {
                        dx[p * hw + i] = g.data()[p * hw + i] * gv;
                    }
                }
                accum(before, *x, Tensor::from_parts(s.to_vec(), dx));
            }
            if needs(before, *gate) {
                let mut dg = vec![T::ZERO; n * c];
                for p in 0..n * c {
                    let mut acc = T::ZERO;
                    for i in 0..hw {
                        acc += g.data()[p * hw + i] * before[*x].value.data()[p * hw + i];
                    }
                    dg[p] = acc;
                }
                accum(before, *gate, Tensor::from_parts(vec![n, c], dg));
            }
        }
        Op::MulSpatialGate(x, gate) => {
            let s = node.value.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            if needs(before, *x) {
                let mut dx = vec![T::ZERO; g.numel()];
                for ni in 0..n {
                    let gp = &before[*gate].value.data()[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = g.data()[base + i] * gp[i];
                        }
                    }
                }
                accum(before, *x, Tensor::from_parts(s.to_vec(), dx));
            }
            if needs(before, *gate) {
                let mut dg = vec![T::ZERO; n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dg[ni * hw + i] += g.data()[base + i] * before[*x].value.data()[base + i];
                        }
                    }
                }
                accum(
                    before,
                    *gate,
                    Tensor::from_parts(vec![n, 1, s[2], s[3]], dg),
                );
            }
        }
        Op::LogSoftmax(input) => {
            if needs(before, *input) {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let mut din = vec![T::ZERO; g.numel()];
                for i in 0..n {
                    let mut gsum = T::ZERO;
                    for j in 0..c {
                        gsum += g.data()[i * c + j];
                    }
                    for j in 0..c {
                        let p = node.value.data()[i * c + j].exp();
                        din[i * c + j] = g.data()[i * c + j] - p * gsum;
                    }
                }
                accum(before, *input, Tensor::from_parts(s.to_vec(), din));
            }
        }
        Op::GatherRows { input, index } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let d = si[1];
                let mut din = vec![T::ZERO; before[*input].value.numel()];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..d {
                        din[src * d + j] += g.data()[r * d + j];
                    }
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::NllPickMean {
            input,
            labels,
            weights,
        } => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let (n, c) = (si[0], si[1]);
                let gv = g.data()[0];
                let inv_n = T::ONE / T::from_f64(n as f64);
                let mut din = vec![T::ZERO; n * c];
                for i in 0..n {
                    din[i * c + labels[i]] = T::ZERO - gv * weights[i] * inv_n;
                }
                accum(before, *input, Tensor::from_parts(si, din));
            }
        }
        Op::SumAll(input) => {
            if needs(before, *input) {
                let si = before[*input].value.shape().to_vec();
                let gv = g.data()[0];
                accum(before, *input, Tensor::from_parts(si.clone(), vec![gv; si.iter().product()]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_parts(vec![rows.len(), rows[0].len()], data)
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[-1.0, 0.0], &[2.0, -3.0]]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[0.0, 1.0]]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[0.0, 40.0, -40.0]]), false);
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-15 && v[1] <= 1.0);
        assert!(v[2] < 1e-15 && v[2] >= 0.0);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn product_rule_through_mul_and_div() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[2.0, 3.0]]), true);
        let b = tape.leaf(t2(&[&[5.0, 7.0]]), true);
        let p = tape.mul(a, b).unwrap();
        let q = tape.div(p, b).unwrap(); // == a
        let s = tape.sum_all(q).unwrap();
        tape.backward(s).unwrap();
        for (i, &ga) in tape.grad(a).unwrap().data().iter().enumerate() {
            assert!((ga - 1.0).abs() < 1e-12, "ga[{i}] = {ga}");
        }
        for &gb in tape.grad(b).unwrap().data() {
            assert!(gb.abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_backward_for_sum_loss() {
        // loss = sum(a*b) => da = row sums of b broadcast, db = col sums of a
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let b = tape.leaf(t2(&[&[5.0, 6.0], &[7.0, 8.0]]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_parts(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            true,
        );
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rows_repeats_and_scatters() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let y = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn nll_pick_mean_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[2.0, 0.0]]), true);
        let lp = tape.log_softmax(x).unwrap();
        let loss = tape.nll_pick_mean(lp, &[0], &[1.5]).unwrap();
        let want = 1.5 * (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_probability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[0.3, -1.2, 2.0], &[5.0, 5.0, 5.0]]), false);
        let lp = tape.log_softmax(x).unwrap();
        for row in tape.value(lp).data().chunks(3) {
            let p: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[f64::INFINITY, 0.0]]), false);
        assert!(tape.log_softmax(x).is_err());
    }

    #[test]
    fn batch_norm_train_output_is_normalized_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_parts(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]),
            true,
        );
        let gamma = tape.leaf(Tensor::from_parts(vec![1], vec![2.0]), true);
        let beta = tape.leaf(Tensor::from_parts(vec![1], vec![0.5]), true);
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.var_biased[0] - 1.25).abs() < 1e-12);
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!((mean - 0.5).abs() < 1e-9);
    }

    #[test]
    fn variables_cannot_cross_tapes() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let x = t1.leaf(Tensor::scalar(1.0), false);
        let _ = t2.leaf(Tensor::scalar(2.0), false);
        assert!(t2.relu(x).is_err());
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0]]), true);
        let c = tape.constant(t2(&[&[3.0, 4.0]]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0]]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_op_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0]]), false);
        let b = tape.leaf(t2(&[&[0.0]]), false);
        assert!(tape.div(a, b).is_err());
    }
}

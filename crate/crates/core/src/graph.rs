//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a `param` leaf.
//!
//! Complex tensors are packed as `[2, ...]`: the real plane block followed by
//! the imaginary block. Shape mismatches between ops are programming errors
//! and panic; user-facing wrappers validate shapes first.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::fft::{fft2_planes, shift_planes};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    ChannelExpand(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Complex(Var, Var),
    Real(Var),
    Imag(Var),
    Fft2(Var),
    Ifft2(Var),
    Shift { input: Var, inverse: bool },
    Modulus(Var),
    Arg(Var),
    Polar(Var, Var),
    OnePad {
        input: Var,
        top: usize,
        left: usize,
    },
    ChannelMatMul(Var, Var),
    BceWithLogits { logits: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable from a different graph");
        let dims = &self.dims[v.index];
        match &self.grads[v.index] {
            Some(g) => Tensor::new(dims, g.clone()).expect("grad shape"),
            None => Tensor::zeros(dims),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..ho {
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            line.fill(0.0);
                            continue;
                        }
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        let ix0 = lo * stride + kx - pad;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let line = &src[oy * wo + lo..oy * wo + hi];
                        let dst = &mut gx[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        let ix0 = lo * stride + kx - pad;
                        if stride == 1 {
                            for (d, s) in dst[ix0..ix0 + hi - lo].iter_mut().zip(line) {
                                *d += s;
                            }
                        } else {
                            for (j, s) in line.iter().enumerate() {
                                dst[ix0 + j * stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of the kink every `relu` and `abs` input sits on, in tape
    /// order. Two evaluations with equal patterns lie on one smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                out.extend(self.nodes[a.index].value.data().iter().map(|v| *v > 0.0));
            }
        }
        out
    }

    /// Whether `v` was recorded on this graph.
    pub fn owns(&self, v: Var) -> bool {
        v.graph == self.id && v.index < self.nodes.len()
    }

    fn check(&self, v: Var) {
        assert!(self.owns(v), "variable does not belong to this graph");
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients are computed for.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.index].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes[v.index].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.check(a);
        self.check(b);
        let out = self.nodes[a.index]
            .value
            .zip_map(&self.nodes[b.index].value, f)
            .unwrap_or_else(|e| panic!("elementwise op: {e}"));
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        self.check(a);
        let out = self.nodes[a.index].value.map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.check(a);
        let s = self.nodes[a.index].value.sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.check(a);
        let v = &self.nodes[a.index].value;
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Per-channel mean of an `[N, C, H, W]` tensor, giving `[C]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        self.check(a);
        let v = &self.nodes[a.index].value;
        let [n, c, h, w] = nchw(v.dims());
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let start = (b * c + ch) * h * w;
                *o += v.data()[start..start + h * w].iter().sum::<f64>();
            }
        }
        let count = (n * h * w) as f64;
        out.iter_mut().for_each(|o| *o /= count);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[c], out).unwrap(), Op::ChannelMean(a), rg)
    }

    /// Broadcasts a `[C]` vector over `dims = [N, C, H, W]`.
    pub fn channel_expand(&mut self, a: Var, dims: &[usize]) -> Var {
        self.check(a);
        let [n, c, h, w] = nchw(dims);
        let v = &self.nodes[a.index].value;
        assert_eq!(v.dims(), [c], "channel_expand of {:?} to {dims:?}", v.dims());
        let mut out = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &x in v.data() {
                out.extend(std::iter::repeat_n(x, h * w));
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(dims, out).unwrap(), Op::ChannelExpand(a), rg)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        self.check(a);
        let out = self.nodes[a.index]
            .value
            .clone()
            .reshape(dims)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// 2-D cross-correlation: input `[N, Cin, H, W]`, weight
    /// `[Cout, Cin, k, k]`, optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        self.check(input);
        self.check(weight);
        let x = &self.nodes[input.index].value;
        let wt = &self.nodes[weight.index].value;
        let [n, cin, h, w] = nchw(x.dims());
        let [cout, wcin, k, k2] = nchw(wt.dims());
        assert!(wcin == cin && k == k2, "conv2d weight {:?} for input {:?}", wt.dims(), x.dims());
        let geom = conv_geom(cin, h, w, k, stride, pad);
        let (ho, wo) = (geom.ho, geom.wo);
        let ckk = cin * k * k;
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        for b in 0..n {
            geom.im2col(&x.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
            sgemm(
                cout,
                ckk,
                ho * wo,
                wt.data(),
                (ckk as isize, 1),
                &cols,
                ((ho * wo) as isize, 1),
                &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo],
                false,
            );
        }
        let mut parents = vec![input, weight];
        if let Some(bv) = bias {
            self.check(bv);
            let bias_t = &self.nodes[bv.index].value;
            assert_eq!(bias_t.dims(), [cout], "conv2d bias");
            for b in 0..n {
                for co in 0..cout {
                    let start = (b * cout + co) * ho * wo;
                    let bb = bias_t.data()[co];
                    out[start..start + ho * wo].iter_mut().for_each(|o| *o += bb);
                }
            }
            parents.push(bv);
        }
        let rg = self.rg(&parents);
        self.push(
            Tensor::new(&[n, cout, ho, wo], out).unwrap(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        self.check(a);
        let v = &self.nodes[a.index].value;
        let [n, c, h, w] = nchw(v.dims());
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(&[n, c, 2 * h, 2 * w], out).unwrap(),
            Op::Upsample2x(a),
            rg,
        )
    }

    /// Packs real and imaginary parts into a `[2, ...]` complex tensor.
    pub fn complex(&mut self, re: Var, im: Var) -> Var {
        self.check(re);
        self.check(im);
        let (r, i) = (&self.nodes[re.index].value, &self.nodes[im.index].value);
        assert_eq!(r.dims(), i.dims(), "complex parts");
        let mut dims = vec![2];
        dims.extend_from_slice(r.dims());
        let mut data = r.data().to_vec();
        data.extend_from_slice(i.data());
        let rg = self.rg(&[re, im]);
        self.push(Tensor::new(&dims, data).unwrap(), Op::Complex(re, im), rg)
    }

    fn half(&mut self, z: Var, imag: bool) -> Var {
        self.check(z);
        let v = &self.nodes[z.index].value;
        assert_eq!(v.dims()[0], 2, "not a packed complex tensor");
        let n = v.len() / 2;
        let data = if imag { &v.data()[n..] } else { &v.data()[..n] };
        let out = Tensor::new(&v.dims()[1..], data.to_vec()).unwrap();
        let rg = self.rg(&[z]);
        let op = if imag { Op::Imag(z) } else { Op::Real(z) };
        self.push(out, op, rg)
    }

    pub fn real(&mut self, z: Var) -> Var {
        self.half(z, false)
    }

    pub fn imag(&mut self, z: Var) -> Var {
        self.half(z, true)
    }

    fn transform(&mut self, z: Var, inverse: bool) -> Var {
        self.check(z);
        let v = &self.nodes[z.index].value;
        let dims = v.dims().to_vec();
        assert!(dims.len() >= 3 && dims[0] == 2, "fft of non-complex {dims:?}");
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let n = v.len() / 2;
        let (mut re, mut im) = (v.data()[..n].to_vec(), v.data()[n..].to_vec());
        fft2_planes(&mut re, &mut im, h, w, inverse);
        re.extend_from_slice(&im);
        let rg = self.rg(&[z]);
        let op = if inverse { Op::Ifft2(z) } else { Op::Fft2(z) };
        self.push(Tensor::new(&dims, re).unwrap(), op, rg)
    }

    /// Unnormalized forward DFT over the trailing two axes of a complex tensor.
    pub fn fft2(&mut self, z: Var) -> Var {
        self.transform(z, false)
    }

    /// Inverse DFT (scaled by `1/(H·W)`) of a complex tensor.
    pub fn ifft2(&mut self, z: Var) -> Var {
        self.transform(z, true)
    }

    /// fftshift (`inverse = false`) or ifftshift over the trailing two axes.
    pub fn shift(&mut self, a: Var, inverse: bool) -> Var {
        self.check(a);
        let v = &self.nodes[a.index].value;
        let dims = v.dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let out = Tensor::new(dims, shift_planes(v.data(), h, w, inverse)).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Shift { input: a, inverse }, rg)
    }

    pub fn modulus(&mut self, z: Var) -> Var {
        self.check(z);
        let v = &self.nodes[z.index].value;
        let n = v.len() / 2;
        let (re, im) = v.data().split_at(n);
        let out = re.iter().zip(im).map(|(r, i)| r.hypot(*i)).collect();
        let out = Tensor::new(&v.dims()[1..], out).unwrap();
        let rg = self.rg(&[z]);
        self.push(out, Op::Modulus(z), rg)
    }

    pub fn arg(&mut self, z: Var) -> Var {
        self.check(z);
        let v = &self.nodes[z.index].value;
        let n = v.len() / 2;
        let (re, im) = v.data().split_at(n);
        let out = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) })
            .collect();
        let out = Tensor::new(&v.dims()[1..], out).unwrap();
        let rg = self.rg(&[z]);
        self.push(out, Op::Arg(z), rg)
    }

    /// `amplitude · e^{i·phase}` packed as a complex tensor.
    pub fn polar(&mut self, amplitude: Var, phase: Var) -> Var {
        self.check(amplitude);
        self.check(phase);
        let (a, p) = (&self.nodes[amplitude.index].value, &self.nodes[phase.index].value);
        assert_eq!(a.dims(), p.dims(), "polar parts");
        let mut dims = vec![2];
        dims.extend_from_slice(a.dims());
        let mut data: Vec<f64> = a.data().iter().zip(p.data()).map(|(a, p)| a * p.cos()).collect();
        data.extend(a.data().iter().zip(p.data()).map(|(a, p)| a * p.sin()));
        let rg = self.rg(&[amplitude, phase]);
        self.push(Tensor::new(&dims, data).unwrap(), Op::Polar(amplitude, phase), rg)
    }

    /// Writes a `[C, h, w]` patch into a ones tensor of `dims = [N, C, H, W]`
    /// at rows `top..top+h`, cols `left..left+w` of every plane.
    pub fn one_pad(&mut self, patch: Var, dims: &[usize], top: usize, left: usize) -> Var {
        self.check(patch);
        let p = &self.nodes[patch.index].value;
        let [n, c, hh, ww] = nchw(dims);
        let [pc, ph, pw] = chw(p.dims());
        assert!(pc == c && top + ph <= hh && left + pw <= ww, "one_pad window");
        let mut out = vec![1.0; n * c * hh * ww];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ph {
                    for x in 0..pw {
                        out[((b * c + ch) * hh + top + y) * ww + left + x] =
                            p.data()[(ch * ph + y) * pw + x];
                    }
                }
            }
        }
        let rg = self.rg(&[patch]);
        self.push(
            Tensor::new(dims, out).unwrap(),
            Op::OnePad {
                input: patch,
                top,
                left,
            },
            rg,
        )
    }

    /// Per-channel matrix product of `[C, H, r]` and `[C, r, W]`.
    pub fn channel_matmul(&mut self, b: Var, a: Var) -> Var {
        self.check(b);
        self.check(a);
        let (bt, at) = (&self.nodes[b.index].value, &self.nodes[a.index].value);
        let [c, h, r] = chw(bt.dims());
        let [c2, r2, w] = chw(at.dims());
        assert!(c == c2 && r == r2, "channel_matmul {:?} @ {:?}", bt.dims(), at.dims());
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            sgemm(
                h,
                r,
                w,
                &bt.data()[ch * h * r..],
                (r as isize, 1),
                &at.data()[ch * r * w..],
                (w as isize, 1),
                &mut out[ch * h * w..(ch + 1) * h * w],
                false,
            );
        }
        let rg = self.rg(&[b, a]);
        self.push(Tensor::new(&[c, h, w], out).unwrap(), Op::ChannelMatMul(b, a), rg)
    }

    /// Elementwise numerically stable binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Var {
        self.check(logits);
        let z = &self.nodes[logits.index].value;
        let out = z
            .zip_map(target, |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .unwrap_or_else(|e| panic!("bce target: {e}"));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::Contract("loss is not recorded on this graph".into()));
        }
        let lv = &self.nodes[loss.index].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![1.0]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        let slot = grads[v.index].get_or_insert_with(|| vec![0.0; self.nodes[v.index].value.len()]);
        f(slot);
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.index].value.data()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g))
            }
            Op::Abs(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * sign(av[k]);
                    }
                });
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, |ga| {
                for k in 0..g.len() {
                    if out[k] > 0.0 {
                        ga[k] += g[k] / (2.0 * out[k]);
                    }
                }
            }),
            Op::Square(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += 2.0 * av[k] * g[k];
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Cos(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] -= g[k] * av[k].sin();
                    }
                });
            }
            Op::Sin(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * av[k].cos();
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::ChannelMean(a) => {
                let [n, c, h, w] = nchw(self.nodes[a.index].value.dims());
                let count = (n * h * w) as f64;
                self.accumulate(grads, *a, |ga| {
                    for b in 0..n {
                        for (ch, gc) in g.iter().enumerate().take(c) {
                            let start = (b * c + ch) * h * w;
                            let d = gc / count;
                            ga[start..start + h * w].iter_mut().for_each(|x| *x += d);
                        }
                    }
                });
            }
            Op::ChannelExpand(a) => {
                let [n, c, h, w] = nchw(self.nodes[i].value.dims());
                self.accumulate(grads, *a, |ga| {
                    for b in 0..n {
                        for (ch, gc) in ga.iter_mut().enumerate().take(c) {
                            let start = (b * c + ch) * h * w;
                            *gc += g[start..start + h * w].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv_backward(*input, *weight, *bias, *stride, *pad, g, grads),
            Op::Upsample2x(a) => {
                let [n, c, h, w] = nchw(self.nodes[a.index].value.dims());
                self.accumulate(grads, *a, |ga| {
                    for p in 0..n * c {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut ga[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::Complex(re, im) => {
                let n = g.len() / 2;
                self.accumulate(grads, *re, |gr| add_into(gr, &g[..n]));
                self.accumulate(grads, *im, |gi| add_into(gi, &g[n..]));
            }
            Op::Real(z) => {
                let n = g.len();
                self.accumulate(grads, *z, |gz| add_into(&mut gz[..n], g));
            }
            Op::Imag(z) => {
                let n = g.len();
                self.accumulate(grads, *z, |gz| add_into(&mut gz[n..], g));
            }
            Op::Fft2(z) | Op::Ifft2(z) => {
                // For a complex-linear map Y = A·X under a real loss, the
                // gradient (∂/∂Re + i∂/∂Im) pulls back through A^H. The DFT's
                // adjoint is H·W times its inverse, and vice versa.
                let forward = matches!(self.nodes[i].op, Op::Fft2(_));
                let dims = self.nodes[i].value.dims();
                let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
                let n = g.len() / 2;
                let (mut re, mut im) = (g[..n].to_vec(), g[n..].to_vec());
                fft2_planes(&mut re, &mut im, h, w, forward);
                let hw = (h * w) as f64;
                let s = if forward { hw } else { 1.0 / hw };
                self.accumulate(grads, *z, |gz| {
                    for k in 0..n {
                        gz[k] += s * re[k];
                        gz[n + k] += s * im[k];
                    }
                });
            }
            Op::Shift { input, inverse } => {
                let dims = self.nodes[i].value.dims();
                let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
                let back = shift_planes(g, h, w, !inverse);
                self.accumulate(grads, *input, |ga| add_into(ga, &back));
            }
            Op::Modulus(z) => {
                let zv = self.val(*z);
                let n = g.len();
                self.accumulate(grads, *z, |gz| {
                    for k in 0..n {
                        if out[k] > 0.0 {
                            gz[k] += g[k] * zv[k] / out[k];
                            gz[n + k] += g[k] * zv[n + k] / out[k];
                        }
                    }
                });
            }
            Op::Arg(z) => {
                let zv = self.val(*z);
                let n = g.len();
                self.accumulate(grads, *z, |gz| {
                    for k in 0..n {
                        let (re, im) = (zv[k], zv[n + k]);
                        let r2 = re * re + im * im;
                        if r2 > 0.0 {
                            gz[k] -= g[k] * im / r2;
                            gz[n + k] += g[k] * re / r2;
                        }
                    }
                });
            }
            Op::Polar(amp, phase) => {
                let (av, pv) = (self.val(*amp), self.val(*phase));
                let n = av.len();
                self.accumulate(grads, *amp, |ga| {
                    for k in 0..n {
                        ga[k] += g[k] * pv[k].cos() + g[n + k] * pv[k].sin();
                    }
                });
                self.accumulate(grads, *phase, |gp| {
                    for k in 0..n {
                        gp[k] += av[k] * (g[n + k] * pv[k].cos() - g[k] * pv[k].sin());
                    }
                });
            }
            Op::OnePad { input, top, left } => {
                let [n, c, hh, ww] = nchw(self.nodes[i].value.dims());
                let [_, ph, pw] = chw(self.nodes[input.index].value.dims());
                self.accumulate(grads, *input, |gp| {
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..ph {
                                for x in 0..pw {
                                    gp[(ch * ph + y) * pw + x] +=
                                        g[((b * c + ch) * hh + top + y) * ww + left + x];
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelMatMul(b, a) => {
                let [c, h, r] = chw(self.nodes[b.index].value.dims());
                let w = self.nodes[a.index].value.dims()[2];
                let (bv, av) = (self.val(*b), self.val(*a));
                // dB = G·Aᵀ, dA = Bᵀ·G per channel.
                self.accumulate(grads, *b, |gb| {
                    for ch in 0..c {
                        sgemm(
                            h,
                            w,
                            r,
                            &g[ch * h * w..],
                            (w as isize, 1),
                            &av[ch * r * w..],
                            (1, w as isize),
                            &mut gb[ch * h * r..(ch + 1) * h * r],
                            true,
                        );
                    }
                });
                self.accumulate(grads, *a, |ga| {
                    for ch in 0..c {
                        sgemm(
                            r,
                            h,
                            w,
                            &bv[ch * h * r..],
                            (1, r as isize),
                            &g[ch * h * w..],
                            (w as isize, 1),
                            &mut ga[ch * r * w..(ch + 1) * r * w],
                            true,
                        );
                    }
                });
            }
            Op::BceWithLogits { logits, target } => {
                let zv = self.val(*logits);
                self.accumulate(grads, *logits, |gz| {
                    for k in 0..g.len() {
                        gz[k] += g[k] * (sigmoid(zv[k]) - target[k]);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = &self.nodes[input.index].value;
        let wt = &self.nodes[weight.index].value;
        let [n, cin, h, w] = nchw(x.dims());
        let [cout, _, k, _] = nchw(wt.dims());
        let geom = conv_geom(cin, h, w, k, stride, pad);
        let hw_out = geom.ho * geom.wo;
        let ckk = cin * k * k;
        if let Some(bv) = bias {
            self.accumulate(grads, bv, |gb| {
                for b in 0..n {
                    for (co, d) in gb.iter_mut().enumerate() {
                        let start = (b * cout + co) * hw_out;
                        *d += g[start..start + hw_out].iter().sum::<f64>();
                    }
                }
            });
        }
        let need_w = self.nodes[weight.index].requires_grad;
        let need_x = self.nodes[input.index].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; ckk * hw_out];
        for b in 0..n {
            let gb = &g[b * cout * hw_out..(b + 1) * cout * hw_out];
            if need_w {
                geom.im2col(&x.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
                self.accumulate(grads, weight, |gw| {
                    sgemm(
                        cout,
                        hw_out,
                        ckk,
                        gb,
                        (hw_out as isize, 1),
                        &cols,
                        (1, hw_out as isize),
                        gw,
                        true,
                    )
                });
            }
            if need_x {
                sgemm(
                    ckk,
                    cout,
                    hw_out,
                    wt.data(),
                    (1, ckk as isize),
                    gb,
                    (hw_out as isize, 1),
                    &mut cols,
                    false,
                );
                self.accumulate(grads, input, |gx| {
                    geom.col2im_add(&cols, &mut gx[b * cin * h * w..(b + 1) * cin * h * w])
                });
            }
        }
    }
}

fn conv_geom(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
    assert!(stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k, "conv geometry");
    ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn nchw(dims: &[usize]) -> [usize; 4] {
    dims.try_into()
        .unwrap_or_else(|_| panic!("expected [N, C, H, W], got {dims:?}"))
}

pub(crate) fn chw(dims: &[usize]) -> [usize; 3] {
    dims.try_into()
        .unwrap_or_else(|_| panic!("expected [C, H, W], got {dims:?}"))
}

/// Central-difference gradient of `f` at `params`:
/// `(f(p + h·e) − f(p − h·e)) / 2h` per coordinate.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, params: &Tensor, h: f64) -> Tensor {
    let mut probe = params.clone();
    let mut out = Tensor::zeros(params.dims());
    for k in 0..params.len() {
        let orig = params.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe);
        probe.data_mut()[k] = orig - h;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|)` over coordinates with `|a| ≥ floor`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, _)| a.abs() >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

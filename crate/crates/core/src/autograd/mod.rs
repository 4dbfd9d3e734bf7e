//! A small reverse-mode automatic differentiation tape over `f64` arrays.
//!
//! Every forward computation records nodes on a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse creation order. Nodes that do not depend on any
//! gradient-requiring leaf carry no backward closure, so frozen sub-graphs
//! (feature extractors, constant images) cost a forward pass only.

pub mod kernels;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

use kernels::Window;

pub type Tensor = ArrayD<f64>;

/// Inputs handed to a node's backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub parents: &'a [&'a Tensor],
    pub out: &'a Tensor,
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that gradients are accumulated into.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: vec![], backward: None, requires_grad: true });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: vec![], backward: None, requires_grad: false });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    /// Reverse pass seeded with d(root)/d(root) = 1. `root` must be a scalar.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx { grad: &grad, parents: &parents, out: &node.value, needs: &needs };
            let pgrads = backward(&ctx);
            for ((&p, g), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => *acc += &g,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Grads { grads }
    }
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn to_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn std_vec(t: &Tensor) -> Vec<f64> {
    match t.as_slice() {
        Some(s) => s.to_vec(),
        None => t.as_standard_layout().iter().copied().collect(),
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
}

/// Move the channel axis of a `(b, c, h, w)` tensor last and flatten to `(b*h*w, c)`.
fn nchw_to_rows(t: &Tensor) -> Array2<f64> {
    let s = t.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let src = std_vec(t);
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, v) in plane.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = *v;
            }
        }
    }
    Array2::from_shape_vec((b * hw, c), out).unwrap()
}

/// Inverse of [`nchw_to_rows`].
fn rows_to_nchw(m: &Array2<f64>, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let owned;
    let src = match m.as_slice() {
        Some(s) => s,
        None => {
            owned = m.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for p in 0..hw {
            let row = &src[(bi * hw + p) * c..(bi * hw + p + 1) * c];
            for (ci, v) in row.iter().enumerate() {
                out[(bi * c + ci) * hw + p] = *v;
            }
        }
    }
    from_vec(&[b, c, h, w], out)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        *v.iter().next().unwrap()
    }

    fn unary(self, value: Tensor, backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static) -> Var<'t> {
        self.tape.push(value, vec![self.id], Some(Box::new(backward)))
    }

    fn binary(
        self,
        other: Var<'t>,
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        self.tape.push(value, vec![self.id, other.id], Some(Box::new(backward)))
    }

    fn elementwise(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let value = self.value().mapv(f);
        self.unary(value, move |ctx| {
            let mut g = ctx.grad.clone();
            ndarray::Zip::from(&mut g).and(ctx.parents[0]).and(ctx.out).for_each(|g, &x, &y| *g *= df(x, y));
            vec![Some(g)]
        })
    }

    // ----- broadcasting arithmetic -----

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() + &*other.value();
        self.binary(other, value, |ctx| {
            vec![
                ctx.needs[0].then(|| reduce_to_shape(ctx.grad, ctx.parents[0].shape())),
                ctx.needs[1].then(|| reduce_to_shape(ctx.grad, ctx.parents[1].shape())),
            ]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() - &*other.value();
        self.binary(other, value, |ctx| {
            vec![
                ctx.needs[0].then(|| reduce_to_shape(ctx.grad, ctx.parents[0].shape())),
                ctx.needs[1].then(|| reduce_to_shape(&ctx.grad.mapv(|g| -g), ctx.parents[1].shape())),
            ]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() * &*other.value();
        self.binary(other, value, |ctx| {
            vec![
                ctx.needs[0].then(|| reduce_to_shape(&(ctx.grad * ctx.parents[1]), ctx.parents[0].shape())),
                ctx.needs[1].then(|| reduce_to_shape(&(ctx.grad * ctx.parents[0]), ctx.parents[1].shape())),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x * c);
        self.unary(value, move |ctx| vec![Some(ctx.grad.mapv(|g| g * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x + c);
        self.unary(value, |ctx| vec![Some(ctx.grad.clone())])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    // ----- pointwise nonlinearities -----

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.elementwise(move |x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.elementwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.elementwise(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.elementwise(softplus, |x, _| sigmoid(x))
    }

    pub fn square(self) -> Var<'t> {
        self.elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    // ----- reductions and shape ops -----

    pub fn sum(self) -> Var<'t> {
        let value = ndarray::arr0(self.value().sum()).into_dyn();
        self.unary(value, |ctx| {
            let g = *ctx.grad.iter().next().unwrap();
            vec![Some(Tensor::from_elem(ctx.parents[0].raw_dim(), g))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keep(self, axes: &[usize]) -> Var<'t> {
        let mut v = self.value().clone();
        for &a in axes {
            v = v.sum_axis(Axis(a)).insert_axis(Axis(a));
        }
        self.unary(v, |ctx| {
            let g = ctx.grad.broadcast(ctx.parents[0].raw_dim()).unwrap().to_owned();
            vec![Some(g)]
        })
    }

    pub fn mean_axes_keep(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keep(axes).scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = from_vec(shape, std_vec(&self.value()));
        self.unary(value, |ctx| vec![Some(from_vec(ctx.parents[0].shape(), std_vec(ctx.grad)))])
    }

    /// Collapse all axes after the first.
    pub fn flatten(self) -> Var<'t> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Concatenate 2-D tensors along axis 1.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch")
        };
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push(
            value,
            ids,
            Some(Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut start = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let g =
                            ctx.needs[i].then(|| ctx.grad.slice_axis(Axis(1), (start..start + w).into()).to_owned());
                        start += w;
                        g
                    })
                    .collect()
            })),
        )
    }

    // ----- linear algebra -----

    /// `(n, k) x (k, m)` matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = to_2d(&self.value()).dot(&to_2d(&other.value())).into_dyn();
        self.binary(other, value, |ctx| {
            let g = to_2d(ctx.grad);
            vec![
                ctx.needs[0].then(|| g.dot(&to_2d(ctx.parents[1]).t()).into_dyn()),
                ctx.needs[1].then(|| to_2d(ctx.parents[0]).t().dot(&g).into_dyn()),
            ]
        })
    }

    /// 2-D convolution. `self` is `(b, c, h, w)`, `weight` is `(o, c, k, k)`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (geom, out_c) = {
            let x = self.value();
            let w = weight.value();
            let (s, ws) = (x.shape(), w.shape());
            assert_eq!(s[1], ws[1], "conv2d channel mismatch");
            assert_eq!(ws[2], ws[3], "conv2d expects square kernels");
            (Window { batch: s[0], channels: s[1], height: s[2], width: s[3], kernel: ws[2], stride, pad }, ws[0])
        };
        let value = {
            let cols =
                Array2::from_shape_vec((geom.rows(), geom.cols()), kernels::im2col(&std_vec(&self.value()), &geom))
                    .unwrap();
            let wm = weight.value().to_shape((out_c, geom.cols())).unwrap().to_owned();
            let out = cols.dot(&wm.t());
            rows_to_nchw(&out, geom.batch, out_c, geom.out_height(), geom.out_width())
        };
        self.binary(weight, value, move |ctx| {
            let gm = nchw_to_rows(ctx.grad);
            let gx = ctx.needs[0].then(|| {
                let wm = ctx.parents[1].to_shape((out_c, geom.cols())).unwrap();
                let dcols = gm.dot(&wm);
                from_vec(ctx.parents[0].shape(), kernels::col2im(dcols.as_slice().unwrap(), &geom))
            });
            let gw = ctx.needs[1].then(|| {
                let cols = Array2::from_shape_vec(
                    (geom.rows(), geom.cols()),
                    kernels::im2col(&std_vec(ctx.parents[0]), &geom),
                )
                .unwrap();
                let dw = gm.t().dot(&cols);
                from_vec(ctx.parents[1].shape(), dw.into_raw_vec_and_offset().0)
            });
            vec![gx, gw]
        })
    }

    /// Transposed convolution. `self` is `(b, cin, h, w)`, `weight` is
    /// `(cin, cout, k, k)`; output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (geom, cin) = {
            let x = self.value();
            let w = weight.value();
            let (s, ws) = (x.shape(), w.shape());
            assert_eq!(s[1], ws[0], "conv_transpose2d channel mismatch");
            let k = ws[2];
            let oh = (s[2] - 1) * stride + k - 2 * pad;
            let ow = (s[3] - 1) * stride + k - 2 * pad;
            (Window { batch: s[0], channels: ws[1], height: oh, width: ow, kernel: k, stride, pad }, s[1])
        };
        let value = {
            let xm = nchw_to_rows(&self.value());
            let wm = weight.value().to_shape((cin, geom.cols())).unwrap().to_owned();
            let cols = xm.dot(&wm);
            from_vec(
                &[geom.batch, geom.channels, geom.height, geom.width],
                kernels::col2im(cols.as_slice().unwrap(), &geom),
            )
        };
        self.binary(weight, value, move |ctx| {
            let gcols =
                Array2::from_shape_vec((geom.rows(), geom.cols()), kernels::im2col(&std_vec(ctx.grad), &geom)).unwrap();
            let gx = ctx.needs[0].then(|| {
                let wm = ctx.parents[1].to_shape((cin, geom.cols())).unwrap();
                let dx = gcols.dot(&wm.t());
                let s = ctx.parents[0].shape();
                rows_to_nchw(&dx, s[0], s[1], s[2], s[3])
            });
            let gw = ctx.needs[1].then(|| {
                let xm = nchw_to_rows(ctx.parents[0]);
                let dw = xm.t().dot(&gcols);
                from_vec(ctx.parents[1].shape(), dw.into_raw_vec_and_offset().0)
            });
            vec![gx, gw]
        })
    }

    /// Add a per-channel bias of shape `(c,)` to a `(b, c, ...)` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Var<'t> {
        let nd = self.shape().len();
        let c = bias.shape()[0];
        let mut shape = vec![1; nd];
        shape[1] = c;
        self.add(bias.reshape(&shape))
    }

    /// Non-overlapping `k x k` average pooling on `(b, c, h, w)`.
    pub fn avg_pool2d(self, k: usize) -> Var<'t> {
        let s = self.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if k == 1 {
            return self;
        }
        let value = from_vec(&[s[0], s[1], h / k, w / k], kernels::avg_pool(&std_vec(&self.value()), planes, h, w, k));
        self.unary(value, move |ctx| {
            vec![Some(from_vec(
                ctx.parents[0].shape(),
                kernels::avg_pool_backward(&std_vec(ctx.grad), planes, h, w, k),
            ))]
        })
    }

    /// Apply a separable linear map to every spatial plane of a `(b, c, h, w)`
    /// tensor: `Y = rows · X · colsᵀ`. Resizing and adaptive pooling are both
    /// expressed this way.
    pub fn spatial_map(self, rows: Rc<Array2<f64>>, cols: Rc<Array2<f64>>) -> Var<'t> {
        let s = self.shape();
        assert_eq!(rows.ncols(), s[2]);
        assert_eq!(cols.ncols(), s[3]);
        let (b, c) = (s[0], s[1]);
        let (oh, ow) = (rows.nrows(), cols.nrows());
        let apply =
            move |x: &Tensor, r: &Array2<f64>, cmat: &Array2<f64>, out_h: usize, out_w: usize, transpose: bool| {
                let x = x.as_standard_layout();
                let (ih, iw) = (x.shape()[2], x.shape()[3]);
                let planes = x.to_shape((b * c, ih, iw)).unwrap();
                let mut out = Vec::with_capacity(b * c * out_h * out_w);
                for p in planes.outer_iter() {
                    let y = if transpose { r.t().dot(&p).dot(cmat) } else { r.dot(&p).dot(&cmat.t()) };
                    out.extend(y.iter().copied());
                }
                from_vec(&[b, c, out_h, out_w], out)
            };
        let value = apply(&self.value(), &rows, &cols, oh, ow, false);
        let (ih, iw) = (s[2], s[3]);
        self.unary(value, move |ctx| vec![Some(apply(ctx.grad, &rows, &cols, ih, iw, true))])
    }

    /// `out[i] = self[index[i]]` over flattened storage, or 0 where the index
    /// is [`GATHER_ZERO`].
    pub fn gather(self, index: Rc<Vec<u32>>, out_shape: &[usize]) -> Var<'t> {
        let value = {
            let src = std_vec(&self.value());
            let data = index.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] }).collect();
            from_vec(out_shape, data)
        };
        self.unary(value, move |ctx| {
            let g = std_vec(ctx.grad);
            let mut acc = vec![0.0; ctx.parents[0].len()];
            for (&i, &gv) in index.iter().zip(&g) {
                if i != GATHER_ZERO {
                    acc[i as usize] += gv;
                }
            }
            vec![Some(from_vec(ctx.parents[0].shape(), acc))]
        })
    }
}

/// Sentinel for [`Var::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Finite-difference checks for tape gradients.
pub mod gradcheck {
    use super::*;

    /// Max relative error between the tape gradient of `f` at `x` and
    /// central finite differences.
    pub fn max_rel_error(x: &Tensor, h: f64, f: impl for<'a> Fn(Var<'a>) -> Var<'a>) -> f64 {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(leaf);
        let analytic = tape.backward(out).get_or_zeros(leaf);
        let eval = |v: &Tensor| {
            let t = Tape::new();
            f(t.constant(v.clone())).item()
        };
        let mut worst: f64 = 0.0;
        let flat: Vec<f64> = x.iter().copied().collect();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let num = (eval(&from_vec(x.shape(), plus)) - eval(&from_vec(x.shape(), minus))) / (2.0 * h);
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }
}

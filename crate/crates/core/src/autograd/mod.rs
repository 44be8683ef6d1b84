//! Tape-based reverse-mode differentiation over the tensor op set.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles; nodes
//! are append-only so inputs always precede outputs and the tape is
//! acyclic by construction. [`Graph::backward`] walks the tape once in
//! reverse from a scalar root and accumulates vector-Jacobian products.
//! First-order only; saved forward values double as the activations the
//! backward rules need.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    /// Elementwise product with a one-element tensor.
    MulScalarVar(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxAxis(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu(usize),
    DepthwiseConv2d {
        x: usize,
        kernel: usize,
    },
    BilinearResize {
        x: usize,
        in_h: usize,
        in_w: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    SpaceToDepth {
        x: usize,
        block: usize,
        channels: usize,
    },
    SumAll(usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
}

/// Append-only tape of recorded operations. Confined to one thread while
/// recording; independent graphs may run on different threads.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input; backward reports a gradient for every leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input; gradients flow through but are not kept.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(T::from_f64(factor));
        self.push(value, Op::Scale(a.0, factor))
    }

    /// `a * s` where `s` is a one-element variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Contract(format!(
                "mul_scalar_var needs a one-element scalar, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).scale(sv);
        Ok(self.push(value, Op::MulScalarVar(a.0, s.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).dims2("matmul")?;
        self.value(b).dims2("matmul")?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2d()?;
        Ok(self.push(value, Op::Transpose(a.0)))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax_axis(axis)?;
        Ok(self.push(value, Op::SoftmaxAxis(a.0, axis)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = self
            .value(x)
            .layer_norm(self.value(gamma), self.value(beta), T::from_f64(eps))?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        self.push(value, Op::Gelu(a.0))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = self.value(x).depthwise_conv2d(self.value(kernel))?;
        Ok(self.push(
            value,
            Op::DepthwiseConv2d {
                x: x.0,
                kernel: kernel.0,
            },
        ))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (in_h, in_w, _) = self.value(x).dims3("bilinear_resize")?;
        let value = self.value(x).bilinear_resize(out_h, out_w)?;
        Ok(self.push(
            value,
            Op::BilinearResize {
                x: x.0,
                in_h,
                in_w,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_axis(axis, start, len)?;
        Ok(self.push(
            value,
            Op::SliceAxis {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let (_, _, channels) = self.value(x).dims3("space_to_depth")?;
        let value = self.value(x).space_to_depth(block)?;
        Ok(self.push(
            value,
            Op::SpaceToDepth {
                x: x.0,
                block,
                channels,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        self.push(value, Op::SumAll(x.0))
    }

    /// Reverse pass from a scalar root. Returns dRoot/dLeaf for every leaf;
    /// leaves the root never reached get zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.shape(root), T::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads)?;
            // Re-store for leaves so callers can read them out.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        // Unreached leaves get zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor<T>>], target: usize, delta: Tensor<T>| -> Result<()> {
            match &mut grads[target] {
                Some(existing) => {
                    *existing = existing.add(&delta)?;
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone())?;
                add_to(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone())?;
                add_to(grads, *b, g.scale(-T::one()))?;
            }
            Op::Hadamard(a, b) => {
                add_to(grads, *a, g.hadamard(&self.nodes[*b].value)?)?;
                add_to(grads, *b, g.hadamard(&self.nodes[*a].value)?)?;
            }
            Op::Scale(a, factor) => {
                add_to(grads, *a, g.scale(T::from_f64(*factor)))?;
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[*s].value.data()[0];
                add_to(grads, *a, g.scale(sv))?;
                let ds = g.hadamard(&self.nodes[*a].value)?.sum_all();
                add_to(grads, *s, Tensor::scalar(ds))?;
            }
            Op::Matmul(a, b) => {
                let at = self.nodes[*a].value.transpose2d()?;
                let bt = self.nodes[*b].value.transpose2d()?;
                add_to(grads, *a, g.matmul(&bt)?)?;
                add_to(grads, *b, at.matmul(g)?)?;
            }
            Op::Transpose(a) => {
                add_to(grads, *a, g.transpose2d()?)?;
            }
            Op::SoftmaxAxis(a, axis) => {
                add_to(grads, *a, softmax_backward(&self.nodes[id].value, g, *axis)?)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) = layer_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    T::from_f64(*eps),
                    g,
                )?;
                add_to(grads, *x, dx)?;
                add_to(grads, *gamma, dgamma)?;
                add_to(grads, *beta, dbeta)?;
                let _ = beta;
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let deriv = Tensor::from_fn(x.shape(), |i| {
                    let xi = x.data()[i];
                    crate::tensor::gauss_cdf(xi) + xi * crate::tensor::gauss_pdf(xi)
                });
                add_to(grads, *a, g.hadamard(&deriv)?)?;
            }
            Op::DepthwiseConv2d { x, kernel } => {
                let k = &self.nodes[*kernel].value;
                add_to(grads, *x, crate::tensor::depthwise_input_grad(g, k)?)?;
                let m = k.shape()[0];
                add_to(
                    grads,
                    *kernel,
                    crate::tensor::depthwise_kernel_grad(&self.nodes[*x].value, g, m)?,
                )?;
            }
            Op::BilinearResize { x, in_h, in_w } => {
                add_to(grads, *x, crate::tensor::bilinear_input_grad(g, *in_h, *in_w)?)?;
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &input in inputs {
                    let len = self.nodes[input].value.shape()[*axis];
                    add_to(grads, input, g.slice_axis(*axis, start, len)?)?;
                    start += len;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                scatter_slice(&mut dx, g, *axis, *start);
                add_to(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                add_to(grads, *x, g.reshape(self.nodes[*x].value.shape())?)?;
            }
            Op::SpaceToDepth { x, block, channels } => {
                add_to(grads, *x, g.depth_to_space(*block, *channels)?)?;
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                add_to(grads, *x, Tensor::filled(self.nodes[*x].value.shape(), gv))?;
            }
        }
        Ok(())
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.grads[v.0]
            .as_ref()
            .expect("gradient queried for a non-leaf node")
    }
}

/// dSoftmax: s * (g - sum_axis(g * s)) with the sum broadcast back.
fn softmax_backward<T: Scalar>(s: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let outer: usize = s.shape()[..axis].iter().product();
    let n = s.shape()[axis];
    let inner: usize = s.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(s.shape());
    let sv = s.data();
    let gv = g.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for t in 0..n {
                let idx = base + t * inner;
                dot += gv[idx] * sv[idx];
            }
            for t in 0..n {
                let idx = base + t * inner;
                dst[idx] = sv[idx] * (gv[idx] - dot);
            }
        }
    }
    Ok(out)
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / c;
    let inv_c = T::one() / T::from_usize(c);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xv = x.data();
    let gv = g.data();
    let gam = gamma.data();
    for r in 0..rows {
        let row = &xv[r * c..(r + 1) * c];
        let grow = &gv[r * c..(r + 1) * c];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();

        // dxhat, and the two row means the closed form needs.
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        for j in 0..c {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = grow[j] * gam[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat = mean_dxhat * inv_c;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_c;

        for j in 0..c {
            dx.data_mut()[r * c + j] =
                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dgamma.data_mut()[j] += grow[j] * xhat[j];
            dbeta.data_mut()[j] += grow[j];
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn scatter_slice<T: Scalar>(dst: &mut Tensor<T>, g: &Tensor<T>, axis: usize, start: usize) {
    let outer: usize = dst.shape()[..axis].iter().product();
    let inner: usize = dst.shape()[axis + 1..].iter().product();
    let n = dst.shape()[axis];
    let len = g.shape()[axis];
    for o in 0..outer {
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        let base = (o * n + start) * inner;
        dst.data_mut()[base..base + len * inner].copy_from_slice(src);
    }
}

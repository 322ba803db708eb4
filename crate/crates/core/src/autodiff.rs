//! A small reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse order and accumulates vector-Jacobian products
//! into the operands. A tape is built per forward call and never shared.

use std::borrow::Cow;

use crate::error::{MilError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Add(Var, Var),
    Relu(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.slots[var.0].take()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Cow<'a, Tensor>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Relu(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::GlobalAvgPool(x), rg))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Scalar categorical cross-entropy of `logits` against class `label`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits).data(), label)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::from_vec(vec![loss])),
            Op::SoftmaxCrossEntropy { logits, label },
            rg,
        ))
    }

    /// Back-propagates from a scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(MilError::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(Tensor::from_vec(vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {
                    slots[idx] = Some(grad);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let g = ops::conv2d_backward(self.value(input), self.value(kernel), stride, &grad)?;
                    self.accumulate(&mut slots, input, g.input);
                    self.accumulate(&mut slots, kernel, g.kernel);
                    self.accumulate(&mut slots, bias, g.bias);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut slots, a, grad.clone());
                    self.accumulate(&mut slots, b, grad);
                }
                Op::Relu(x) => {
                    let g = ops::relu_backward(self.value(x), &grad);
                    self.accumulate(&mut slots, x, g);
                }
                Op::GlobalAvgPool(x) => {
                    let g = ops::global_avg_pool_backward(self.value(x).shape(), &grad);
                    self.accumulate(&mut slots, x, g);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(input), self.value(weight), &grad);
                    self.accumulate(&mut slots, input, gx);
                    self.accumulate(&mut slots, weight, gw);
                    self.accumulate(&mut slots, bias, gb);
                }
                Op::SoftmaxCrossEntropy { logits, label } => {
                    let mut g = ops::softmax_cross_entropy_backward(self.value(logits).data(), label);
                    let seed = grad.data()[0];
                    g.iter_mut().for_each(|v| *v *= seed);
                    let shape = self.value(logits).shape().to_vec();
                    self.accumulate(&mut slots, logits, Tensor::new(shape, g)?);
                }
            }
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], var: Var, grad: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut slots[var.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_operand_accumulates_both_paths() {
        // loss = CE(dense(relu(x) + relu(x)))
        let x = Tensor::from_vec(vec![1.0, -2.0]).reshape(vec![2, 1, 1]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let r = tape.relu(xv);
        let s = tape.add(r, r).unwrap();
        let p = tape.global_avg_pool(s).unwrap();
        let logits = tape.dense(p, wv, bv).unwrap();
        let loss = tape.softmax_cross_entropy(logits, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        // logits = (2, 0); dL/dlogits = softmax - e1
        let sm = ops::softmax(&[2.0, 0.0]);
        let gx = grads.get(xv).unwrap();
        assert!((gx.data()[0] - 2.0 * sm[0]).abs() < 1e-15);
        assert_eq!(gx.data()[1], 0.0);
        assert_eq!(grads.get(bv).unwrap().data(), &[sm[0], sm[1] - 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::from_vec(vec![0.5, 0.25]);
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        let mut tape = Tape::new();
        let xv = tape.constant(Cow::Borrowed(&x));
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let y = tape.dense(xv, wv, bv).unwrap();
        let loss = tape.softmax_cross_entropy(y, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(xv).is_none());
        assert!(grads.get(wv).is_some());
        assert!(tape.backward(y).is_err());
    }
}

//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients. All reductions
//! run in a fixed index order, so gradients and values are reproducible
//! bit-for-bit for identical inputs.

use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Array2<f64>, &Array2<f64>, &mut Gradients)>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
}

/// Per-node gradient accumulators, indexed like the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    fn accumulate(&mut self, var: Var, delta: &Array2<f64>) {
        match &mut self.grads[var.0] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    /// Gradient for `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients accumulate here but propagation stops.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, g);
                sink.accumulate(b, g);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, g);
                sink.accumulate(b, &(-g));
            })),
        )
    }

    /// Elementwise product of same-shape matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let value = &va * &vb;
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, &(g * &vb));
                sink.accumulate(b, &(g * &va));
            })),
        )
    }

    /// `k * a + c` with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let value = self.value(a).mapv(|x| k * x + c);
        self.push(
            value,
            Some(Box::new(move |_, g, sink| sink.accumulate(a, &(g * k)))),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let value = va.dot(&vb);
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, &g.dot(&vb.t()));
                sink.accumulate(b, &va.t().dot(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, &g.t().to_owned());
            })),
        )
    }

    /// Adds a `(1, d)` row to every row of an `(n, d)` matrix.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let vrow = self.value(row).clone();
        let value = self.value(a) + &vrow;
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                sink.accumulate(a, g);
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                sink.accumulate(row, &summed);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push(
            value,
            Some(Box::new(move |out, g, sink| {
                let local = out.mapv(|s| s * (1.0 - s));
                sink.accumulate(a, &(g * &local));
            })),
        )
    }

    /// SiLU activation `x * sigmoid(x)`; smooth everywhere, which keeps
    /// finite-difference gradient checks tight.
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let value = va.mapv(|x| x * sigmoid_scalar(x));
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let local = va.mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s + x * s * (1.0 - s)
                });
                sink.accumulate(a, &(g * &local));
            })),
        )
    }

    /// Softmax over all entries of the matrix, treated as one distribution.
    pub fn softmax_flat(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let max = va.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = va.mapv(|x| (x - max).exp());
        let total: f64 = exp.sum();
        let value = exp / total;
        self.push(
            value,
            Some(Box::new(move |out, g, sink| {
                let dot: f64 = (g * out).sum();
                let local = out * &(g - dot);
                sink.accumulate(a, &local);
            })),
        )
    }

    /// Row lookup: `out[k] = a[idx[k]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let d = va.ncols();
        let mut value = Array2::zeros((idx.len(), d));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&va.row(i));
        }
        let nrows = va.nrows();
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let mut ga = Array2::zeros((nrows, d));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g.row(k);
                }
                sink.accumulate(a, &ga);
            })),
        )
    }

    /// Row aggregation: `out[dst[k]] += a[k]`, accumulated in ascending `k`.
    pub fn scatter_add_rows(&mut self, a: Var, dst: Vec<usize>, num_rows: usize) -> Var {
        let va = self.value(a);
        let d = va.ncols();
        let mut value = Array2::zeros((num_rows, d));
        for (k, &i) in dst.iter().enumerate() {
            let mut row = value.row_mut(i);
            row += &va.row(k);
        }
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let mut ga = Array2::zeros((dst.len(), d));
                for (k, &i) in dst.iter().enumerate() {
                    ga.row_mut(k).assign(&g.row(i));
                }
                sink.accumulate(a, &ga);
            })),
        )
    }

    /// Horizontal concatenation of same-height matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::zeros((n, total));
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            value
                .slice_mut(s![.., offset..offset + w])
                .assign(self.value(p));
            offset += w;
        }
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let piece = g.slice(s![.., offset..offset + w]).to_owned();
                    sink.accumulate(p, &piece);
                    offset += w;
                }
            })),
        )
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.nrows();
        let value = va.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let mut ga = Array2::zeros((n, g.ncols()));
                for mut row in ga.rows_mut() {
                    row.assign(&g.row(0));
                }
                sink.accumulate(a, &ga);
            })),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows();
        let summed = self.sum_rows(a);
        self.affine(summed, 1.0 / n as f64, 0.0)
    }

    /// Broadcast multiply by a `(1, 1)` scalar variable.
    pub fn mul_scalar(&mut self, scalar: Var, a: Var) -> Var {
        let sv = self.scalar_value(scalar);
        let va = self.value(a).clone();
        let value = &va * sv;
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let ds = (g * &va).sum();
                sink.accumulate(scalar, &Array2::from_elem((1, 1), ds));
                sink.accumulate(a, &(g * sv));
            })),
        )
    }

    /// Extracts column `j` of a single-row matrix as a `(1, 1)` scalar.
    pub fn slice_col(&mut self, a: Var, j: usize) -> Var {
        let va = self.value(a);
        debug_assert_eq!(va.nrows(), 1);
        let ncols = va.ncols();
        let value = Array2::from_elem((1, 1), va[[0, j]]);
        self.push(
            value,
            Some(Box::new(move |_, g, sink| {
                let mut ga = Array2::zeros((1, ncols));
                ga[[0, j]] = g[[0, 0]];
                sink.accumulate(a, &ga);
            })),
        )
    }

    /// Huber loss of a `(1, 1)` prediction against a constant target:
    /// quadratic within `delta`, linear outside.
    pub fn huber_loss(&mut self, pred: Var, target: f64, delta: f64) -> Var {
        let x = self.scalar_value(pred) - target;
        let value = if x.abs() <= delta {
            0.5 * x * x
        } else {
            delta * (x.abs() - 0.5 * delta)
        };
        self.push(
            Array2::from_elem((1, 1), value),
            Some(Box::new(move |_, g, sink| {
                let dx = if x.abs() <= delta {
                    x
                } else {
                    delta * x.signum()
                };
                sink.accumulate(pred, &Array2::from_elem((1, 1), g[[0, 0]] * dx));
            })),
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        grads.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads.grads[id].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[id].back {
                back(&self.nodes[id].value, &g, &mut grads);
            }
            grads.grads[id] = Some(g);
        }
        grads
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite difference of a scalar-valued tape program with
    /// respect to one entry of one input.
    fn finite_diff(
        build: &dyn Fn(&mut Tape, &[Array2<f64>]) -> Var,
        inputs: &[Array2<f64>],
        which: usize,
        r: usize,
        c: usize,
        eps: f64,
    ) -> f64 {
        let eval = |delta: f64| {
            let mut shifted: Vec<Array2<f64>> = inputs.to_vec();
            shifted[which][[r, c]] += delta;
            let mut tape = Tape::new();
            let loss = build(&mut tape, &shifted);
            tape.scalar_value(loss)
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    fn check_all_grads(build: &dyn Fn(&mut Tape, &[Array2<f64>]) -> Var, inputs: &[Array2<f64>]) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, inputs);
        let grads = tape.backward(loss);
        // The builder binds inputs as the first nodes in order.
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(Var(which))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let fd = finite_diff(build, inputs, which, r, c, 1e-6);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-6,
                        "grad mismatch input {which} [{r},{c}]: analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn composite_mlp_grads_match_finite_differences() {
        let build = |tape: &mut Tape, inputs: &[Array2<f64>]| {
            let x = tape.input(inputs[0].clone());
            let w1 = tape.input(inputs[1].clone());
            let b1 = tape.input(inputs[2].clone());
            let w2 = tape.input(inputs[3].clone());
            let h = tape.matmul(x, w1);
            let h = tape.add_row_broadcast(h, b1);
            let h = tape.silu(h);
            let out = tape.matmul(h, w2);
            let pooled = tape.mean_rows(out);
            tape.huber_loss(pooled, 0.3, 0.01)
        };
        let inputs = vec![
            array![[0.5, -0.2], [0.1, 0.8], [-0.4, 0.3]],
            array![[0.7, -0.3, 0.2], [0.1, 0.4, -0.6]],
            array![[0.05, -0.02, 0.08]],
            array![[0.3], [-0.5], [0.9]],
        ];
        check_all_grads(&build, &inputs);
    }

    #[test]
    fn gather_scatter_grads_match_finite_differences() {
        let build = |tape: &mut Tape, inputs: &[Array2<f64>]| {
            let h = tape.input(inputs[0].clone());
            let src = tape.gather_rows(h, vec![0, 2, 2, 1]);
            let dst = tape.gather_rows(h, vec![1, 0, 1, 2]);
            let msg = tape.mul(src, dst);
            let agg = tape.scatter_add_rows(msg, vec![1, 0, 1, 2], 3);
            let both = tape.concat_cols(&[agg, h]);
            let act = tape.silu(both);
            let pooled = tape.mean_rows(act);
            let total = tape.sum_rows(pooled);
            let first = tape.slice_col(total, 0);
            tape.huber_loss(first, -0.1, 0.01)
        };
        let inputs = vec![array![[0.4, -0.6], [0.2, 0.9], [-0.7, 0.3]]];
        check_all_grads(&build, &inputs);
    }

    #[test]
    fn softmax_sigmoid_scalar_grads_match_finite_differences() {
        let build = |tape: &mut Tape, inputs: &[Array2<f64>]| {
            let logits = tape.input(inputs[0].clone());
            let alpha = tape.input(inputs[1].clone());
            let h = tape.input(inputs[2].clone());
            let w = tape.softmax_flat(logits);
            let beta = tape.slice_col(w, 0);
            let gate = tape.sigmoid(alpha);
            let scaled = tape.mul_scalar(beta, h);
            let gated = tape.mul_scalar(gate, scaled);
            let t = tape.transpose(gated);
            let pooled = tape.mean_rows(t);
            let total = tape.sum_rows(pooled);
            let v = tape.slice_col(total, 0);
            tape.huber_loss(v, 0.5, 0.01)
        };
        let inputs = vec![
            array![[0.2, -0.4, 0.7]],
            array![[0.3]],
            array![[0.5, -0.2], [0.8, 0.1]],
        ];
        check_all_grads(&build, &inputs);
    }

    #[test]
    fn empty_edge_list_scatter_is_zero() {
        let mut tape = Tape::new();
        let h = tape.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let gathered = tape.gather_rows(h, vec![]);
        assert_eq!(tape.value(gathered).dim(), (0, 2));
        let agg = tape.scatter_add_rows(gathered, vec![], 2);
        assert_eq!(tape.value(agg), &Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn softmax_flat_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0], [2.0], [3.0]]);
        let s = tape.softmax_flat(x);
        let total: f64 = tape.value(s).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(array![[0.3, 0.7], [0.2, -0.4]]);
            let w = tape.input(array![[0.5, 0.1], [-0.3, 0.8]]);
            let y = tape.matmul(x, w);
            let y = tape.silu(y);
            let p = tape.mean_rows(y);
            let t = tape.sum_rows(p);
            let v = tape.slice_col(t, 0);
            let loss = tape.huber_loss(v, 0.0, 0.01);
            let grads = tape.backward(loss);
            grads.get(Var(1)).unwrap().clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}

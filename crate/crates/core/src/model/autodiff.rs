//! Minimal reverse-mode tape over [`Matrix`] values, covering exactly the
//! operations the reference transformer uses.

use crate::tensor::{gelu, gelu_grad, layer_norm_with_cache, softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(pub(crate) usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + broadcast(b)` where `b` is `1 × n`
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        /// per head, `T × S`, zero beyond the causal horizon
        probs: Vec<Matrix>,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    /// Summed negative log-likelihood, `1 × 1`.
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Matrix,
    },
    Sum(Vec<Var>),
    Scale(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_row_inplace(self.value(b));
        self.push(v, Op::AddRow(a, b))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let m = self.matmul(x, w);
        self.add_row(m, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, xhat, inv_std) =
            layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention over `n_heads` column groups, returning
    /// the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows(), d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = qm.slice_cols(h * dh, dh);
            let kh = km.slice_cols(h * dh, dh);
            let vh = vm.slice_cols(h * dh, dh);
            let scores = qh.matmul_t(&kh);
            let mut p = Matrix::zeros(qm.rows(), km.rows());
            for i in 0..qm.rows() {
                let n_keys = if causal { i + 1 } else { km.rows() };
                let row: Vec<f64> = scores.row(i)[..n_keys].iter().map(|s| s * scale).collect();
                p.row_mut(i)[..n_keys].copy_from_slice(&softmax(&row));
            }
            out.write_cols(h * dh, &p.matmul(&vh));
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
        )
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let l = self.value(logits);
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let p = softmax(l.row(r));
            nll -= p[t as usize].ln();
            probs.row_mut(r).copy_from_slice(&p);
        }
        self.push(
            Matrix::filled(1, 1, nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, vars: Vec<Var>) -> Var {
        let mut total = 0.0;
        for &v in &vars {
            total += self.value(v).get(0, 0);
        }
        self.push(Matrix::filled(1, 1, total), Op::Sum(vars))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Gradients of scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_rows());
                    acc(&mut grads, *a, g.clone());
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (o, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *o *= gelu_grad(xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gain);
                    let n = xhat.cols() as f64;
                    let mut gx = Matrix::zeros(xhat.rows(), xhat.cols());
                    let mut ggain = Matrix::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        let dy = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> =
                            dy.iter().zip(gm.as_slice()).map(|(a, b)| a * b).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        let out = gx.row_mut(r);
                        for c in 0..xh.len() {
                            out[c] = inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                        }
                        for (gg, (d, x)) in ggain.as_mut_slice().iter_mut().zip(dy.iter().zip(xh)) {
                            *gg += d * x;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, g.sum_rows());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qm.cols();
                    let dh = d / n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Matrix::zeros(qm.rows(), d);
                    let mut gk = Matrix::zeros(km.rows(), d);
                    let mut gv = Matrix::zeros(vm.rows(), d);
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        let go = g.slice_cols(off, dh);
                        let vh = vm.slice_cols(off, dh);
                        let qh = qm.slice_cols(off, dh);
                        let kh = km.slice_cols(off, dh);
                        let dp = go.matmul_t(&vh);
                        let dv = p.t_matmul(&go);
                        let mut ds = Matrix::zeros(p.rows(), p.cols());
                        for i in 0..p.rows() {
                            let pr = p.row(i);
                            let dpr = dp.row(i);
                            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for (o, (pp, dd)) in ds.row_mut(i).iter_mut().zip(pr.iter().zip(dpr)) {
                                *o = pp * (dd - inner) * scale;
                            }
                        }
                        gq.write_cols(off, &ds.matmul(&kh));
                        gk.write_cols(off, &ds.t_matmul(&qh));
                        gv.write_cols(off, &dv);
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.get(0, 0);
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[t as usize] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Sum(vars) => {
                    for &v in vars {
                        acc(&mut grads, v, g.clone());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_inplace(&g),
        slot @ None => *slot = Some(g),
    }
}

//! Reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and the
//! ids of its inputs, so node order is a topological order by construction.
//! `backward` walks the nodes once in reverse. Gradients only flow into nodes
//! that (transitively) depend on a `requires_grad` leaf; frozen leaves never
//! receive one and the matching half of a matmul backward is skipped.

use super::kernels::{self, gemm, MASK_VALUE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that matmul work is attributed to by the instrumented counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopCategory {
    /// Matmuls on activations (the model's forward pass proper).
    Forward,
    /// Matmuls that build compressed weights from projections.
    Materialize,
}

/// Matmul FLOPs (2·m·k·n per product) seen by an instrumented tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounts {
    pub forward: u64,
    pub materialize: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMask(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
    count_flops: bool,
    category: FlopCategory,
    flops: FlopCounts,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    /// A fresh tape; the per-op finiteness check follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
            count_flops: false,
            category: FlopCategory::Forward,
            flops: FlopCounts::default(),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn enable_flop_count(&mut self) {
        self.count_flops = true;
    }

    pub fn set_flop_category(&mut self, category: FlopCategory) {
        self.category = category;
    }

    pub fn flops(&self) -> FlopCounts {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node shape")
    }

    /// Records a leaf holding a copy of `t`; it participates in
    /// differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_unchecked(shape, t.into_data(), Op::Leaf, false)
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(shape, value, op, rg))
    }

    fn count(&mut self, flops: u64) {
        if self.count_flops {
            match self.category {
                FlopCategory::Forward => self.flops.forward += flops,
                FlopCategory::Materialize => self.flops.materialize += flops,
            }
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m×k] · bᵀ` for `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        self.count(2 * (m * k * n) as u64);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// Batched `a [N×m×k] · b [N×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a [N×m×k] · bᵀ` for `b [N×n×k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = match self.shape(a) {
            &[bt, m, k] => (bt, m, k),
            other => return Err(Error::shape("bmm", other, &[0, 0, 0])),
        };
        let (bb, kb, n) = match self.shape(b) {
            &[bt, r, c] if trans_b => (bt, c, r),
            &[bt, r, c] => (bt, r, c),
            other => return Err(Error::shape("bmm", other, &[0, 0, 0])),
        };
        if bb != batch || kb != k {
            return Err(Error::shape("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.count(2 * (batch * m * k * n) as u64);
        self.push(
            "bmm",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("shape");
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(
            "add_bias",
            self.shape(x).to_vec(),
            out,
            Op::AddBias { x, bias },
            &[x, bias],
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(
            "scale",
            self.shape(x).to_vec(),
            out,
            Op::Scale { x, factor },
            &[x],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let out = xv
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        self.push(
            "gelu",
            self.shape(x).to_vec(),
            out,
            Op::Gelu { x, tanh },
            &[x],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("shape");
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_row);
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().expect("shape");
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).len() / n;
        let mut normalized = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                inv_std[r] = rstd;
                for j in 0..n {
                    let h = (row[j] - mean) * rstd;
                    normalized[r * n + j] = h;
                    out[r * n + j] = h * g[j] + b[j];
                }
            }
        }
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row lookup: `out[t] = table[ids[t]]`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                limit: vocab,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Fills positions `j > i` of every trailing `[S×S]` block with a large
    /// negative value so a following softmax assigns them zero weight.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = match self.shape(x) {
            &[_, r, c] if r == c => r,
            other => return Err(Error::shape("causal_mask", other, &[0, 0, 0])),
        };
        let mut out = self.value(x).to_vec();
        for block in out.chunks_mut(s * s) {
            for i in 0..s {
                for v in &mut block[i * s + i + 1..(i + 1) * s] {
                    *v = MASK_VALUE;
                }
            }
        }
        self.push(
            "causal_mask",
            self.shape(x).to_vec(),
            out,
            Op::CausalMask(x),
            &[x],
        )
    }

    /// `[B·S, H·hd]` → `[B·H, S, hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "split_heads")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                self.shape(x),
                &[batch, seq, heads],
            ));
        }
        let hd = d / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for s in 0..seq {
                let src = &xv[(b * seq + s) * d..(b * seq + s + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + s) * hd;
                    out[dst..dst + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                }
            }
        }
        self.push(
            "split_heads",
            vec![batch * heads, seq, hd],
            out,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    /// `[B·H, S, hd]` → `[B·S, H·hd]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let hd = match self.shape(x) {
            &[bh, s, hd] if bh == batch * heads && s == seq => hd,
            other => return Err(Error::shape("merge_heads", other, &[batch * heads, seq, 0])),
        };
        let d = heads * hd;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for s in 0..seq {
                let dst = &mut out[(b * seq + s) * d..(b * seq + s + 1) * d];
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + s) * hd;
                    dst[h * hd..(h + 1) * hd].copy_from_slice(&xv[src..src + hd]);
                }
            }
        }
        self.push(
            "merge_heads",
            vec![batch * seq, d],
            out,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    /// Mean over positions of `-log softmax(logits)[target]`; the last axis
    /// of `logits` is the vocabulary.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().expect("shape");
        let rows = numel(&shape) / vocab;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "target id",
                index: bad,
                limit: vocab,
            });
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            total += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_row(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        let loss = total / rows as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from a scalar root. Consumes the tape's backward
    /// capability; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(root).iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                if self.wants(a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b), !trans_b, &mut da, false);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        // B stored n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.value(a), false, &mut db, false);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, self.value(a), true, g, false, &mut db, false);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.wants(a) {
                    let bv = self.value(b);
                    let mut da = vec![0.0; batch * sa];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * sc..(i + 1) * sc],
                            false,
                            &bv[i * sb..(i + 1) * sb],
                            !trans_b,
                            &mut da[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let mut db = vec![0.0; batch * sb];
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ai = &av[i * sa..(i + 1) * sa];
                        let out = &mut db[i * sb..(i + 1) * sb];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, out, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, false);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.wants(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.iter().map(|v| v * factor).collect());
            }
            Op::Gelu { x, tanh } => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(self.value(x))
                    .zip(tanh)
                    .map(|((g, &v), &t)| g * kernels::gelu_grad_with_tanh(v, t))
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let n = *node.shape.last().expect("shape");
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = self.shape(*gain)[0];
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(normalized.chunks(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dxr[j] = scale * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (t, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[t * d..(t + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, dt);
            }
            &Op::CausalMask(x) => {
                let s = node.shape[1];
                let mut dx = g.to_vec();
                for block in dx.chunks_mut(s * s) {
                    for i in 0..s {
                        for v in &mut block[i * s + i + 1..(i + 1) * s] {
                            *v = 0.0;
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.shape(x)[1];
                let hd = d / heads;
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for s in 0..seq {
                        let dst = &mut dx[(b * seq + s) * d..(b * seq + s + 1) * d];
                        for h in 0..heads {
                            let src = ((b * heads + h) * seq + s) * hd;
                            dst[h * hd..(h + 1) * hd].copy_from_slice(&g[src..src + hd]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let hd = self.shape(x)[2];
                let d = heads * hd;
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for s in 0..seq {
                        let src = &g[(b * seq + s) * d..(b * seq + s + 1) * d];
                        for h in 0..heads {
                            let dst = ((b * heads + h) * seq + s) * hd;
                            dx[dst..dst + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = *self.shape(*logits).last().expect("shape");
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * vocab + t] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

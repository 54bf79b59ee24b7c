use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{sigmoid, DIV_GUARD};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Causal admissibility for attention-style masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Key position tau is admissible for query t when tau <= t.
    Inclusive,
    /// Key position tau is admissible for query t when tau < t.
    Strict,
}

/// What masked softmax does with a row that has no admissible position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRowPolicy {
    /// Reject the row: callers must guarantee at least one admissible slot.
    Error,
    /// Emit an all-zero probability row (used for "no history" positions).
    Zero,
}

/// How a binary op broadcasts its right operand onto its left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is [1, 1].
    Scalar,
    /// rhs is [r, 1], repeated across columns.
    Col,
    /// rhs is [1, c], repeated across rows.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Abs,
    Exp,
    Ln,
    Sigmoid,
    Relu,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    /// Elementwise binary op; `flip` means the broadcast operand is `a`.
    Bin {
        kind: BinKind,
        a: usize,
        b: usize,
        bc: Broadcast,
        flip: bool,
    },
    Un {
        kind: UnKind,
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    SoftmaxMasked {
        a: usize,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Dropout {
        a: usize,
        keep: Array2<f64>,
        scale: f64,
    },
    Sum {
        a: usize,
    },
    /// Sum over rows: [r, c] -> [1, c].
    SumRows {
        a: usize,
    },
    /// Inclusive prefix sums along each row: out[i, j] = sum_{j' <= j} a[i, j'].
    CumsumCols {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    SliceRows {
        a: usize,
        r0: usize,
        r1: usize,
    },
    SliceCols {
        a: usize,
        c0: usize,
        c1: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    GatherCols {
        a: usize,
        idx: Vec<usize>,
    },
    Detach {
        a: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records every executed op together with the inputs its backward rule
/// needs; [`Tape::backward`] then visits ops in exact reverse execution
/// order, summing each tensor's gradient across all paths.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, masks, fixed matrices).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        dims(&self.nodes[id.0].value)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by tape op"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(id)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: [{ar}, {ac}] x [{br}, {bc}]"
            )));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    fn bin(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        // Decide orientation: the broadcast (smaller) operand, if any, is rhs.
        let (big, small, flip) = if (ar, ac) == (br, bc) {
            (a, b, false)
        } else if (br, bc) == (1, 1) || (br == ar && bc == 1) || (br == 1 && bc == ac) {
            (a, b, false)
        } else if (ar, ac) == (1, 1) || (ar == br && ac == 1) || (ar == 1 && ac == bc) {
            (b, a, true)
        } else {
            return Err(Error::shape(format!(
                "non-broadcastable shapes: [{ar}, {ac}] vs [{br}, {bc}]"
            )));
        };
        let (rr, cc) = self.shape(big);
        let (sr, sc) = self.shape(small);
        let bc_kind = if (sr, sc) == (rr, cc) {
            Broadcast::Same
        } else if (sr, sc) == (1, 1) {
            Broadcast::Scalar
        } else if sc == 1 {
            Broadcast::Col
        } else {
            Broadcast::Row
        };
        let mut out = Array2::<f64>::zeros((rr, cc));
        {
            let bigv = &self.nodes[big.0].value;
            let smallv = &self.nodes[small.0].value;
            for i in 0..rr {
                for j in 0..cc {
                    let x = bigv[(i, j)];
                    let y = match bc_kind {
                        Broadcast::Same => smallv[(i, j)],
                        Broadcast::Scalar => smallv[(0, 0)],
                        Broadcast::Col => smallv[(i, 0)],
                        Broadcast::Row => smallv[(0, j)],
                    };
                    let (l, r) = if flip { (y, x) } else { (x, y) };
                    out[(i, j)] = match kind {
                        BinKind::Add => l + r,
                        BinKind::Sub => l - r,
                        BinKind::Mul => l * r,
                        BinKind::Div => l / r.max(DIV_GUARD),
                    };
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::Bin {
                kind,
                a: big.0,
                b: small.0,
                bc: bc_kind,
                flip,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Mul, a, b)
    }

    /// Division with the denominator clamped below by [`DIV_GUARD`].
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Div, a, b)
    }

    fn un(&mut self, kind: UnKind, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| match kind {
            UnKind::Neg => -x,
            UnKind::Abs => x.abs(),
            UnKind::Exp => x.exp(),
            UnKind::Ln => x.ln(),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Relu => x.max(0.0),
        });
        let rg = self.rg(a);
        self.push(value, Op::Un { kind, a: a.0 }, rg)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Neg, a)
    }
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Abs, a)
    }
    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Exp, a)
    }
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Ln, a)
    }
    pub fn sigmoid_op(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Sigmoid, a)
    }
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.un(UnKind::Relu, a)
    }

    /// Clamp into `[lo, hi]`; backward passes gradient only where unclamped.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp { a: a.0, lo, hi }, rg)
    }

    /// Row-wise softmax over admissible positions only. Masked entries get
    /// exactly 0 probability; each admissible row is stabilized by
    /// subtracting its admissible maximum.
    pub fn softmax_masked(
        &mut self,
        a: TensorId,
        mask: &[bool],
        policy: EmptyRowPolicy,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::shape(format!(
                "softmax mask has {} entries for a [{r}, {c}] tensor",
                mask.len()
            )));
        }
        let mut out = Array2::<f64>::zeros((r, c));
        {
            let v = &self.nodes[a.0].value;
            for i in 0..r {
                let row_mask = &mask[i * c..(i + 1) * c];
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..c {
                    if row_mask[j] {
                        maxv = maxv.max(v[(i, j)]);
                    }
                }
                if maxv == f64::NEG_INFINITY {
                    match policy {
                        EmptyRowPolicy::Error => {
                            return Err(Error::numeric(format!(
                                "softmax row {i} has no admissible position"
                            )))
                        }
                        EmptyRowPolicy::Zero => continue,
                    }
                }
                let mut sum = 0.0;
                for j in 0..c {
                    if row_mask[j] {
                        let e = (v[(i, j)] - maxv).exp();
                        out[(i, j)] = e;
                        sum += e;
                    }
                }
                for j in 0..c {
                    if row_mask[j] {
                        out[(i, j)] /= sum;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SoftmaxMasked {
                a: a.0,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the feature axis (rows), applied per column,
    /// followed by a trainable affine: `gain * xhat + bias` with gain and
    /// bias of shape [r, 1].
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::shape("layer_norm over a zero-length feature axis".to_string()));
        }
        if self.shape(gain) != (r, 1) || self.shape(bias) != (r, 1) {
            return Err(Error::shape(format!(
                "layer_norm affine must be [{r}, 1]; got gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut out = Array2::<f64>::zeros((r, c));
        {
            let v = &self.nodes[x.0].value;
            let g = &self.nodes[gain.0].value;
            let b = &self.nodes[bias.0].value;
            for j in 0..c {
                let col = v.column(j);
                let mean = col.sum() / r as f64;
                let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r as f64;
                let denom = (var + eps).sqrt();
                for i in 0..r {
                    let xhat = (v[(i, j)] - mean) / denom;
                    out[(i, j)] = g[(i, 0)] * xhat + b[(i, 0)];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            rg,
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); in eval, identity.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1); got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(self.identity(a));
        }
        let (r, c) = self.shape(a);
        let keep = Array2::from_shape_fn((r, c), |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0
            }
        });
        let scale = 1.0 / (1.0 - rate);
        let value = (&self.nodes[a.0].value * &keep) * scale;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a: a.0, keep, scale }, rg))
    }

    fn identity(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(
            value,
            Op::Dropout {
                a: a.0,
                keep: Array2::from_elem((1, 1), 1.0),
                scale: 1.0,
            },
            rg,
        )
    }

    /// Full reduction to a [1, 1] scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum { a: a.0 }, rg)
    }

    /// Column sums: [r, c] -> [1, c].
    pub fn sum_rows(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.sum_axis(Axis(0));
        let c = v.len();
        let rg = self.rg(a);
        self.push(
            v.into_shape_with_order((1, c)).expect("row vector"),
            Op::SumRows { a: a.0 },
            rg,
        )
    }

    /// Inclusive prefix sums along each row.
    pub fn cumsum_cols(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let mut out = Array2::<f64>::zeros((r, c));
        {
            let v = &self.nodes[a.0].value;
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += v[(i, j)];
                    out[(i, j)] = acc;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::CumsumCols { a: a.0 }, rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose { a: a.0 }, rg)
    }

    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> Result<TensorId> {
        let (r, _c) = self.shape(a);
        if r0 >= r1 || r1 > r {
            return Err(Error::shape(format!(
                "row slice {r0}..{r1} out of bounds for {r} rows"
            )));
        }
        let value = self
            .nodes[a.0]
            .value
            .slice(ndarray::s![r0..r1, ..])
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows { a: a.0, r0, r1 }, rg))
    }

    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (_r, c) = self.shape(a);
        if c0 >= c1 || c1 > c {
            return Err(Error::shape(format!(
                "column slice {c0}..{c1} out of bounds for {c} columns"
            )));
        }
        let value = self
            .nodes[a.0]
            .value
            .slice(ndarray::s![.., c0..c1])
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { a: a.0, c0, c1 }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero parts".to_string()));
        }
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {pc} vs {c}"
                )));
            }
            rows += pr;
        }
        let mut out = Array2::<f64>::zeros((rows, c));
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            out.slice_mut(ndarray::s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero parts".to_string()));
        }
        let r = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::shape(format!("concat_cols row mismatch: {pr} vs {r}")));
            }
            cols += pc;
        }
        let mut out = Array2::<f64>::zeros((r, cols));
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            out.slice_mut(ndarray::s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    /// Column gather: out[:, t] = a[:, idx[t]]. Backward scatter-adds, so a
    /// column referenced k times accumulates k contributions.
    pub fn gather_cols(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        for &i in idx {
            if i >= c {
                return Err(Error::index(format!(
                    "gather index {i} out of range for {c} columns"
                )));
            }
        }
        let v = &self.nodes[a.0].value;
        let mut out = Array2::<f64>::zeros((r, idx.len()));
        for (t, &j) in idx.iter().enumerate() {
            out.column_mut(t).assign(&v.column(j));
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherCols {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward, zero backward: blocks gradient flow.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Detach { a: a.0 }, false)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagate from `root` (must be [1, 1]); returns per-node gradients
    /// indexed by tensor id. Gradients are accumulated, never overwritten.
    pub fn backward(&mut self, root: TensorId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape(format!(
                "backward root must be a [1, 1] scalar; got {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, delta: &Array2<f64>) {
        match &mut grads[id] {
            Some(g) => *g += delta,
            None => grads[id] = Some(delta.clone()),
        }
    }

    fn backward_op(&self, i: usize, go: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::MatMul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da = go.dot(&self.nodes[*b].value.t());
                    Self::accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db = self.nodes[*a].value.t().dot(go);
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Bin {
                kind,
                a,
                b,
                bc,
                flip,
            } => {
                let (r, c) = dims(go);
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let need_a = self.nodes[*a].requires_grad;
                let need_b = self.nodes[*b].requires_grad;
                let mut da = if need_a {
                    Some(Array2::<f64>::zeros(dims(av)))
                } else {
                    None
                };
                let mut db = if need_b {
                    Some(Array2::<f64>::zeros(dims(bv)))
                } else {
                    None
                };
                for ii in 0..r {
                    for jj in 0..c {
                        let g = go[(ii, jj)];
                        let (bi, bj) = match bc {
                            Broadcast::Same => (ii, jj),
                            Broadcast::Scalar => (0, 0),
                            Broadcast::Col => (ii, 0),
                            Broadcast::Row => (0, jj),
                        };
                        let x = av[(ii, jj)];
                        let y = bv[(bi, bj)];
                        // l is the left operand of the op as executed.
                        let (l, rr) = if *flip { (y, x) } else { (x, y) };
                        let (dl, dr) = match kind {
                            BinKind::Add => (g, g),
                            BinKind::Sub => (g, -g),
                            BinKind::Mul => (g * rr, g * l),
                            BinKind::Div => {
                                let denom = rr.max(DIV_GUARD);
                                let dl = g / denom;
                                let dr = if rr > DIV_GUARD {
                                    -g * l / (denom * denom)
                                } else {
                                    0.0
                                };
                                (dl, dr)
                            }
                        };
                        let (dx, dy) = if *flip { (dr, dl) } else { (dl, dr) };
                        if let Some(da) = da.as_mut() {
                            da[(ii, jj)] += dx;
                        }
                        if let Some(db) = db.as_mut() {
                            db[(bi, bj)] += dy;
                        }
                    }
                }
                if let Some(da) = da {
                    Self::accumulate(grads, *a, &da);
                }
                if let Some(db) = db {
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Un { kind, a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let av = &self.nodes[*a].value;
                let ov = &self.nodes[i].value;
                let mut da = Array2::<f64>::zeros(dims(av));
                for ((idx, g), (x, o)) in go
                    .indexed_iter()
                    .zip(av.iter().zip(ov.iter()))
                {
                    da[idx] = match kind {
                        UnKind::Neg => -g,
                        UnKind::Abs => {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        }
                        UnKind::Exp => g * o,
                        UnKind::Ln => g / x,
                        UnKind::Sigmoid => g * o * (1.0 - o),
                        // relu'(0) = 0 by convention.
                        UnKind::Relu => {
                            if *x > 0.0 {
                                *g
                            } else {
                                0.0
                            }
                        }
                    };
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let av = &self.nodes[*a].value;
                let mut da = Array2::<f64>::zeros(dims(av));
                for (idx, g) in go.indexed_iter() {
                    let x = av[idx];
                    da[idx] = if x >= *lo && x <= *hi { *g } else { 0.0 };
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::SoftmaxMasked { a, mask } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let p = &self.nodes[i].value;
                let (r, c) = dims(p);
                let mut da = Array2::<f64>::zeros((r, c));
                for ii in 0..r {
                    let row_mask = &mask[ii * c..(ii + 1) * c];
                    let mut dot = 0.0;
                    for jj in 0..c {
                        if row_mask[jj] {
                            dot += go[(ii, jj)] * p[(ii, jj)];
                        }
                    }
                    for jj in 0..c {
                        if row_mask[jj] {
                            da[(ii, jj)] = p[(ii, jj)] * (go[(ii, jj)] - dot);
                        }
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (r, c) = dims(xv);
                let need_x = self.nodes[*x].requires_grad;
                let need_g = self.nodes[*gain].requires_grad;
                let need_b = self.nodes[*bias].requires_grad;
                let mut dx = if need_x {
                    Some(Array2::<f64>::zeros((r, c)))
                } else {
                    None
                };
                let mut dg = if need_g {
                    Some(Array2::<f64>::zeros((r, 1)))
                } else {
                    None
                };
                let mut dbv = if need_b {
                    Some(Array2::<f64>::zeros((r, 1)))
                } else {
                    None
                };
                let rn = r as f64;
                for j in 0..c {
                    let col = xv.column(j);
                    let mean = col.sum() / rn;
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rn;
                    let denom = (var + eps).sqrt();
                    // xhat and the two per-column reductions the input grad needs.
                    let mut s1 = 0.0; // sum of g*dout
                    let mut s2 = 0.0; // sum of g*dout*xhat
                    let mut xhat = vec![0.0; r];
                    for ii in 0..r {
                        xhat[ii] = (xv[(ii, j)] - mean) / denom;
                        let gd = gv[(ii, 0)] * go[(ii, j)];
                        s1 += gd;
                        s2 += gd * xhat[ii];
                    }
                    for ii in 0..r {
                        if let Some(dg) = dg.as_mut() {
                            dg[(ii, 0)] += go[(ii, j)] * xhat[ii];
                        }
                        if let Some(dbv) = dbv.as_mut() {
                            dbv[(ii, 0)] += go[(ii, j)];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let gd = gv[(ii, 0)] * go[(ii, j)];
                            dx[(ii, j)] = (gd - s1 / rn - xhat[ii] * s2 / rn) / denom;
                        }
                    }
                }
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, &dx);
                }
                if let Some(dg) = dg {
                    Self::accumulate(grads, *gain, &dg);
                }
                if let Some(dbv) = dbv {
                    Self::accumulate(grads, *bias, &dbv);
                }
            }
            Op::Dropout { a, keep, scale } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let da = if keep.dim() == (1, 1) {
                    go.clone()
                } else {
                    go * keep * *scale
                };
                Self::accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let g = go[(0, 0)];
                let da = Array2::from_elem(dims(&self.nodes[*a].value), g);
                Self::accumulate(grads, *a, &da);
            }
            Op::SumRows { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let (r, c) = dims(&self.nodes[*a].value);
                let mut da = Array2::<f64>::zeros((r, c));
                for ii in 0..r {
                    for jj in 0..c {
                        da[(ii, jj)] = go[(0, jj)];
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::CumsumCols { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                // d a[i,j] = sum_{j' >= j} d out[i,j'] (suffix sums).
                let (r, c) = dims(go);
                let mut da = Array2::<f64>::zeros((r, c));
                for ii in 0..r {
                    let mut acc = 0.0;
                    for jj in (0..c).rev() {
                        acc += go[(ii, jj)];
                        da[(ii, jj)] = acc;
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
            Op::Transpose { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let da = go.t().to_owned();
                Self::accumulate(grads, *a, &da);
            }
            Op::SliceRows { a, r0, r1 } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let mut da = Array2::<f64>::zeros(dims(&self.nodes[*a].value));
                da.slice_mut(ndarray::s![*r0..*r1, ..]).assign(go);
                Self::accumulate(grads, *a, &da);
            }
            Op::SliceCols { a, c0, c1 } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let mut da = Array2::<f64>::zeros(dims(&self.nodes[*a].value));
                da.slice_mut(ndarray::s![.., *c0..*c1]).assign(go);
                Self::accumulate(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    if self.nodes[p].requires_grad {
                        let dp = go.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        Self::accumulate(grads, p, &dp);
                    }
                    at += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    if self.nodes[p].requires_grad {
                        let dp = go.slice(ndarray::s![.., at..at + cols]).to_owned();
                        Self::accumulate(grads, p, &dp);
                    }
                    at += cols;
                }
            }
            Op::GatherCols { a, idx } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let mut da = Array2::<f64>::zeros(dims(&self.nodes[*a].value));
                for (t, &j) in idx.iter().enumerate() {
                    for ii in 0..da.nrows() {
                        da[(ii, j)] += go[(ii, t)];
                    }
                }
                Self::accumulate(grads, *a, &da);
            }
        }
    }
}

/// Per-tensor gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Build a causal admissibility mask for an l x l score matrix, row-major:
/// entry (t, tau) is true when tau is admissible for query position t.
pub fn causal_mask(l: usize, mode: MaskMode) -> Vec<bool> {
    let mut mask = vec![false; l * l];
    for t in 0..l {
        for tau in 0..l {
            mask[t * l + tau] = match mode {
                MaskMode::Inclusive => tau <= t,
                MaskMode::Strict => tau < t,
            };
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let out = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(out), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn matmul_projection() {
        let mut t = Tape::new();
        let p = t.constant(array![[1.0, 0.0], [0.0, 0.0]]);
        let v = t.constant(array![[5.0], [7.0]]);
        let out = t.matmul(p, v).unwrap();
        assert_eq!(t.value(out), &array![[5.0], [0.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // gradient of sum(A.B) wrt A at random 3x3 inputs, step 1e-3.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let b0 = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let f = |a: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let ai = t.leaf(a.clone());
            let bi = t.constant(b0.clone());
            let m = t.matmul(ai, bi).unwrap();
            let s = t.sum(m);
            t.value(s)[(0, 0)]
        };
        let mut t = Tape::new();
        let ai = t.leaf(a0.clone());
        let bi = t.constant(b0.clone());
        let m = t.matmul(ai, bi).unwrap();
        let s = t.sum(m);
        let grads = t.backward(s).unwrap();
        let ga = grads.get(ai).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let fd = fd_scalar(
                    |x| {
                        let mut a = a0.clone();
                        a[(i, j)] = x;
                        f(&a)
                    },
                    a0[(i, j)],
                    1e-3,
                );
                let ad = ga[(i, j)];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                assert!(rel < 1e-4, "({i},{j}): fd={fd} ad={ad}");
            }
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.0]]);
        let s = t.sigmoid_op(x);
        assert_eq!(t.value(s)[(0, 0)], 0.5);
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(array![[-1.0, 0.0, 2.0]]);
        let r = t.relu(x);
        assert_eq!(t.value(r), &array![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        // d/dx sigmoid(0) = 0.25, cross-checked against finite differences.
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0]]);
        let s = t.sigmoid_op(x);
        let sum = t.sum(s);
        let grads = t.backward(sum).unwrap();
        let ad = grads.get(x).unwrap()[(0, 0)];
        assert!((ad - 0.25).abs() < 1e-12);
        let fd = fd_scalar(|v| super::super::sigmoid(v), 0.0, 1e-3);
        assert!((ad - fd).abs() / fd.abs() < 1e-4);
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.0, 0.0, 0.0]]);
        let p = t
            .softmax_masked(x, &[true, true, true], EmptyRowPolicy::Error)
            .unwrap();
        for j in 0..3 {
            assert!((t.value(p)[(0, j)] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_admissible() {
        let mut t = Tape::new();
        let x = t.constant(array![[5.0, 5.0]]);
        let p = t
            .softmax_masked(x, &[true, false], EmptyRowPolicy::Error)
            .unwrap();
        assert_eq!(t.value(p), &array![[1.0, 0.0]]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        assert!(t
            .softmax_masked(x, &[false, false], EmptyRowPolicy::Error)
            .is_err());
    }

    #[test]
    fn softmax_causal_row_sums_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-2.0..2.0));
        let mask = causal_mask(4, MaskMode::Inclusive);
        // Row sums are 1 within 1e-6 and masked entries are exactly 0.
        let mut t = Tape::new();
        let xi = t.leaf(x0.clone());
        let p = t.softmax_masked(xi, &mask, EmptyRowPolicy::Error).unwrap();
        for i in 0..4 {
            let mut sum = 0.0;
            for j in 0..4 {
                if j > i {
                    assert_eq!(t.value(p)[(i, j)], 0.0);
                } else {
                    sum += t.value(p)[(i, j)];
                }
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
        // Gradient of a fixed linear functional of the probabilities.
        let w0 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let w = t.constant(w0.clone());
        let prod = t.mul(p, w).unwrap();
        let s = t.sum(prod);
        let grads = t.backward(s).unwrap();
        let ga = grads.get(xi).unwrap().clone();
        let f = |x: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let p = t.softmax_masked(xi, &mask, EmptyRowPolicy::Error).unwrap();
            let w = t.constant(w0.clone());
            let prod = t.mul(p, w).unwrap();
            let s = t.sum(prod);
            t.value(s)[(0, 0)]
        };
        for i in 0..4 {
            for j in 0..4 {
                let fd = fd_scalar(
                    |v| {
                        let mut x = x0.clone();
                        x[(i, j)] = v;
                        f(&x)
                    },
                    x0[(i, j)],
                    1e-3,
                );
                let ad = ga[(i, j)];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                assert!(rel < 1e-4, "({i},{j}): fd={fd} ad={ad}");
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_bias() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0], [1.0], [1.0], [1.0]]);
        let g = t.constant(Array2::from_elem((4, 1), 1.0));
        let b = t.constant(Array2::zeros((4, 1)));
        let out = t.layer_norm(x, g, b, 1e-5).unwrap();
        for i in 0..4 {
            assert_eq!(t.value(out)[(i, 0)], 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut t = Tape::new();
        let x = t.constant(array![[-1.0], [1.0]]);
        let g = t.constant(Array2::from_elem((2, 1), 1.0));
        let b = t.constant(Array2::zeros((2, 1)));
        let out = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!((t.value(out)[(0, 0)] + 1.0).abs() < 1e-4);
        assert!((t.value(out)[(1, 0)] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_mean_variance_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array2::from_shape_fn((8, 5), |_| rng.gen_range(-3.0..3.0));
        let mut t = Tape::new();
        let x = t.constant(x0);
        let g = t.constant(Array2::from_elem((8, 1), 1.0));
        let b = t.constant(Array2::zeros((8, 1)));
        let out = t.layer_norm(x, g, b, 1e-5).unwrap();
        for j in 0..5 {
            let col = t.value(out).column(j);
            let mean = col.sum() / 8.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Array2::from_shape_fn((8, 1), |_| rng.gen_range(-2.0..2.0));
        let g0 = Array2::from_shape_fn((8, 1), |_| rng.gen_range(0.5..1.5));
        let b0 = Array2::from_shape_fn((8, 1), |_| rng.gen_range(-0.5..0.5));
        let w0 = Array2::from_shape_fn((8, 1), |_| rng.gen_range(-1.0..1.0));
        let f = |x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let gi = t.leaf(g.clone());
            let bi = t.leaf(b.clone());
            let out = t.layer_norm(xi, gi, bi, 1e-5).unwrap();
            let w = t.constant(w0.clone());
            let p = t.mul(out, w).unwrap();
            let s = t.sum(p);
            t.value(s)[(0, 0)]
        };
        let mut t = Tape::new();
        let xi = t.leaf(x0.clone());
        let gi = t.leaf(g0.clone());
        let bi = t.leaf(b0.clone());
        let out = t.layer_norm(xi, gi, bi, 1e-5).unwrap();
        let w = t.constant(w0.clone());
        let p = t.mul(out, w).unwrap();
        let s = t.sum(p);
        let grads = t.backward(s).unwrap();
        for (which, leaf, base) in [(0, xi, &x0), (1, gi, &g0), (2, bi, &b0)] {
            let ga = grads.get(leaf).unwrap();
            for i in 0..8 {
                let fd = fd_scalar(
                    |v| {
                        let mut x = x0.clone();
                        let mut g = g0.clone();
                        let mut b = b0.clone();
                        match which {
                            0 => x[(i, 0)] = v,
                            1 => g[(i, 0)] = v,
                            _ => b[(i, 0)] = v,
                        }
                        f(&x, &g, &b)
                    },
                    base[(i, 0)],
                    1e-3,
                );
                let ad = ga[(i, 0)];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                assert!(rel < 1e-4, "leaf {which} elem {i}: fd={fd} ad={ad}");
            }
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, -2.0, 3.0]]);
        let d = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(t.value(d), &array![[1.0, -2.0, 3.0]]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, -2.0, 3.0]]);
        let d = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(t.value(d), &array![[1.0, -2.0, 3.0]]);
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(array![[1.0]]);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_empirical_rate() {
        // 1e4 elements at rate 0.5 under a fixed seed: drop fraction 0.5 +- 0.02.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut t = Tape::new();
        let x = t.constant(Array2::from_elem((1, 10_000), 1.0));
        let d = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let dropped = t.value(d).iter().filter(|v| **v == 0.0).count();
        let frac = dropped as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "drop fraction {frac}");
        // Survivors are scaled by 1/(1-rate).
        let survivor = t.value(d).iter().find(|v| **v != 0.0).unwrap();
        assert_eq!(*survivor, 2.0);
    }

    #[test]
    fn gradient_accumulation_fan_out() {
        // y = x + x => dy/dx = 2.
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]]);
        let y = t.add(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn seeded_graph_is_bit_identical() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let x0 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            let x = t.leaf(x0);
            let s = t.sigmoid_op(x);
            let d = t.dropout(s, 0.3, true, &mut rng).unwrap();
            let mask = causal_mask(4, MaskMode::Inclusive);
            let p = t.softmax_masked(d, &mask, EmptyRowPolicy::Error).unwrap();
            let sum = t.sum(p);
            let grads = t.backward(sum).unwrap();
            (
                t.value(p).iter().copied().collect(),
                grads.get(x).unwrap().iter().copied().collect(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gather_cols_scatter_adds() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = t.gather_cols(a, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(g), &array![[2.0, 2.0, 1.0], [4.0, 4.0, 3.0]]);
        let s = t.sum(g);
        let grads = t.backward(s).unwrap();
        // Column 1 used twice, column 0 once.
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 2.0], [1.0, 2.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let sq = t.mul(x, x).unwrap();
        let d = t.detach(sq);
        let y = t.mul(d, x).unwrap(); // y = detach(x^2) * x
        let s = t.sum(y);
        let grads = t.backward(s).unwrap();
        // Only the direct factor contributes: dy/dx = x^2 = 4.
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn cumsum_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0, 3.0]]);
        let c = t.cumsum_cols(a);
        assert_eq!(t.value(c), &array![[1.0, 3.0, 6.0]]);
        let w = t.constant(array![[1.0, 0.0, 0.0]]);
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        let grads = t.backward(s).unwrap();
        // d cumsum[0]/da = [1, 0, 0].
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn div_guards_small_denominator() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0]]);
        let b = t.constant(array![[0.0]]);
        let d = t.div(a, b).unwrap();
        assert_eq!(t.value(d)[(0, 0)], 1.0 / DIV_GUARD);
    }

    #[test]
    fn broadcast_row_and_col() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let row = t.constant(array![[10.0, 20.0]]);
        let col = t.constant(array![[100.0], [200.0]]);
        let r1 = t.add(a, row).unwrap();
        assert_eq!(t.value(r1), &array![[11.0, 22.0], [13.0, 24.0]]);
        let r2 = t.add(a, col).unwrap();
        assert_eq!(t.value(r2), &array![[101.0, 102.0], [203.0, 204.0]]);
        // Flipped orientation: broadcast operand on the left of a sub.
        let r3 = t.sub(row, a).unwrap();
        assert_eq!(t.value(r3), &array![[9.0, 18.0], [7.0, 16.0]]);
        let s = t.sum(r3);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &array![[-1.0, -1.0], [-1.0, -1.0]]);
    }
}

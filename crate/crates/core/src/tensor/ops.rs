//! Operation kernels, tape recording, and vector-Jacobian products.
//!
//! Every public op follows the same shape: validate shapes, run the forward
//! kernel, check the output for non-finite values, and record a node only if
//! an input is already on the tape. Shape and domain violations are
//! programming errors and panic; they never come from user input, which is
//! validated at the config layer.

use std::sync::Arc;

use super::{check_finite, NodeId, Tape, Tensor};

/// Broadcast case for binary elementwise ops: equal shapes, or one side a
/// single element ("scalar with tensor" — the only broadcast supported).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinCase {
    Equal,
    ALen1,
    BLen1,
}

type P = Option<NodeId>;
type Buf = Arc<Vec<f64>>;

pub(crate) enum Op {
    Leaf,
    Add { a: P, b: P, case: BinCase },
    Sub { a: P, b: P, case: BinCase },
    Mul { a: P, b: P, case: BinCase, ad: Buf, bd: Buf },
    Div { a: P, b: P, case: BinCase, ad: Buf, bd: Buf },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    /// `saved` is the output for tanh/exp, the input for the others.
    Unary { kind: UnaryKind, a: NodeId, saved: Buf },
    Clamp { a: NodeId, x: Buf, lo: f64, hi: f64 },
    ClampCols { a: NodeId, x: Buf, bounds: Arc<Vec<(f64, f64)>>, cols: usize },
    Matmul { a: P, b: P, ad: Buf, bd: Buf, m: usize, k: usize, n: usize },
    BroadcastRows { a: NodeId, rows: usize, n: usize },
    Sum { a: NodeId },
    Mean { a: NodeId, n: usize },
    ConcatCols { a: P, b: P, rows: usize, ca: usize, cb: usize },
    SliceCols { a: NodeId, rows: usize, cols: usize, start: usize, len: usize },
    ConcatRows { parts: Vec<(P, usize)> },
    SliceRows { a: NodeId, start_elem: usize },
    StackLast { a: P, b: P },
    MaskMix { a: P, b: P, mask: Buf },
    SoftmaxCe { logits: NodeId, probs: Buf, labels: Arc<Vec<usize>>, b: usize, c: usize },
    Bilinear {
        img: P,
        coords: P,
        imgd: Buf,
        cd: Buf,
        h: usize,
        w: usize,
        c: usize,
        oh: usize,
        ow: usize,
    },
    Reshape { a: NodeId },
}

impl Op {
    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Tanh,
    Relu,
    Exp,
    Ln,
    Sin,
    Cos,
}

fn bin_case(a: &Tensor, b: &Tensor, op: &str) -> BinCase {
    if a.shape() == b.shape() {
        BinCase::Equal
    } else if a.len() == 1 {
        BinCase::ALen1
    } else if b.len() == 1 {
        BinCase::BLen1
    } else {
        panic!("{op}: incompatible shapes {:?} vs {:?}", a.shape(), b.shape());
    }
}

fn bin_out_shape<'s>(a: &'s Tensor, b: &'s Tensor, case: BinCase) -> Vec<usize> {
    match case {
        BinCase::Equal | BinCase::BLen1 => a.shape().to_vec(),
        BinCase::ALen1 => b.shape().to_vec(),
    }
}

fn bin_forward(a: &[f64], b: &[f64], case: BinCase, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match case {
        BinCase::Equal => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        BinCase::ALen1 => b.iter().map(|&y| f(a[0], y)).collect(),
        BinCase::BLen1 => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

impl Tape {
    fn record(&mut self, op: Op, out_len: usize, involved: bool) -> Option<NodeId> {
        if !involved {
            return None;
        }
        assert!(!self.is_frozen(), "recording on a frozen tape");
        Some(self.push(op, out_len))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let case = bin_case(a, b, "add");
        let out = bin_forward(a.data(), b.data(), case, |x, y| x + y);
        check_finite(&out, "add");
        let shape = bin_out_shape(a, b, case);
        let node = self.record(
            Op::Add { a: a.node(), b: b.node(), case },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(shape, Arc::new(out), node)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let case = bin_case(a, b, "sub");
        let out = bin_forward(a.data(), b.data(), case, |x, y| x - y);
        check_finite(&out, "sub");
        let shape = bin_out_shape(a, b, case);
        let node = self.record(
            Op::Sub { a: a.node(), b: b.node(), case },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(shape, Arc::new(out), node)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let case = bin_case(a, b, "mul");
        let out = bin_forward(a.data(), b.data(), case, |x, y| x * y);
        check_finite(&out, "mul");
        let shape = bin_out_shape(a, b, case);
        let node = self.record(
            Op::Mul { a: a.node(), b: b.node(), case, ad: a.data_arc(), bd: b.data_arc() },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(shape, Arc::new(out), node)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let case = bin_case(a, b, "div");
        let out = bin_forward(a.data(), b.data(), case, |x, y| x / y);
        check_finite(&out, "div");
        let shape = bin_out_shape(a, b, case);
        let node = self.record(
            Op::Div { a: a.node(), b: b.node(), case, ad: a.data_arc(), bd: b.data_arc() },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(shape, Arc::new(out), node)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| x + c).collect();
        check_finite(&out, "add_scalar");
        let node = a.node().and_then(|id| self.record(Op::AddScalar { a: id }, out.len(), true));
        Tensor::with_node(a.shape().to_vec(), Arc::new(out), node)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&x| x * c).collect();
        check_finite(&out, "mul_scalar");
        let node = a.node().and_then(|id| self.record(Op::MulScalar { a: id, c }, out.len(), true));
        Tensor::with_node(a.shape().to_vec(), Arc::new(out), node)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.mul_scalar(a, -1.0)
    }

    fn unary(&mut self, a: &Tensor, kind: UnaryKind) -> Tensor {
        let out: Vec<f64> = match kind {
            UnaryKind::Tanh => a.data().iter().map(|&x| x.tanh()).collect(),
            UnaryKind::Relu => a.data().iter().map(|&x| x.max(0.0)).collect(),
            UnaryKind::Exp => a.data().iter().map(|&x| x.exp()).collect(),
            UnaryKind::Ln => {
                for &x in a.data() {
                    assert!(x > 0.0, "ln: domain error on entry {x}");
                }
                a.data().iter().map(|&x| x.ln()).collect()
            }
            UnaryKind::Sin => a.data().iter().map(|&x| x.sin()).collect(),
            UnaryKind::Cos => a.data().iter().map(|&x| x.cos()).collect(),
        };
        check_finite(&out, &format!("{kind:?}"));
        let out = Arc::new(out);
        let node = a.node().and_then(|id| {
            let saved = match kind {
                UnaryKind::Tanh | UnaryKind::Exp => Arc::clone(&out),
                _ => a.data_arc(),
            };
            self.record(Op::Unary { kind, a: id, saved }, out.len(), true)
        });
        Tensor::with_node(a.shape().to_vec(), out, node)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Ln)
    }

    pub fn sin(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Sin)
    }

    pub fn cos(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Cos)
    }

    /// Logistic sigmoid, composed from tanh: σ(x) = (1 + tanh(x/2)) / 2.
    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        let h = self.mul_scalar(a, 0.5);
        let t = self.tanh(&h);
        let u = self.add_scalar(&t, 1.0);
        self.mul_scalar(&u, 0.5)
    }

    /// Clamp to `[lo, hi]` with pass-through gradient inside the interval
    /// (boundary included) and zero gradient outside.
    pub fn clamp_range(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp_range: lo > hi");
        let out: Vec<f64> = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        check_finite(&out, "clamp_range");
        let node = a
            .node()
            .and_then(|id| self.record(Op::Clamp { a: id, x: a.data_arc(), lo, hi }, out.len(), true));
        Tensor::with_node(a.shape().to_vec(), Arc::new(out), node)
    }

    pub fn clamp01(&mut self, a: &Tensor) -> Tensor {
        self.clamp_range(a, 0.0, 1.0)
    }

    /// Per-column clamp on a `[rows × cols]` tensor; `bounds[j]` applies to
    /// column j. Same subgradient convention as [`Tape::clamp_range`].
    pub fn clamp_cols(&mut self, a: &Tensor, bounds: &[(f64, f64)]) -> Tensor {
        let [rows, cols] = rank2(a, "clamp_cols");
        assert_eq!(cols, bounds.len(), "clamp_cols: bounds per column");
        let mut out = Vec::with_capacity(a.len());
        for i in 0..rows {
            for (j, &(lo, hi)) in bounds.iter().enumerate() {
                out.push(a.data()[i * cols + j].clamp(lo, hi));
            }
        }
        check_finite(&out, "clamp_cols");
        let node = a.node().and_then(|id| {
            self.record(
                Op::ClampCols {
                    a: id,
                    x: a.data_arc(),
                    bounds: Arc::new(bounds.to_vec()),
                    cols,
                },
                out.len(),
                true,
            )
        });
        Tensor::with_node(a.shape().to_vec(), Arc::new(out), node)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let [m, k] = rank2(a, "matmul lhs");
        let [k2, n] = rank2(b, "matmul rhs");
        assert_eq!(k, k2, "matmul: inner extents {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_nn(a.data(), b.data(), m, k, n, &mut out);
        check_finite(&out, "matmul");
        let node = self.record(
            Op::Matmul { a: a.node(), b: b.node(), ad: a.data_arc(), bd: b.data_arc(), m, k, n },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(vec![m, n], Arc::new(out), node)
    }

    /// Repeat a length-n vector as the rows of a `[rows × n]` matrix
    /// (explicit broadcast, used for bias terms).
    pub fn broadcast_rows(&mut self, v: &Tensor, rows: usize) -> Tensor {
        let n = v.len();
        assert!(v.shape().len() <= 2, "broadcast_rows expects a vector");
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(v.data());
        }
        let node =
            v.node().and_then(|id| self.record(Op::BroadcastRows { a: id, rows, n }, out.len(), true));
        Tensor::with_node(vec![rows, n], Arc::new(out), node)
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        check_finite(&[s], "sum");
        let node = a.node().and_then(|id| self.record(Op::Sum { a: id }, 1, true));
        Tensor::with_node(vec![1], Arc::new(vec![s]), node)
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = a.data().iter().sum::<f64>() / n as f64;
        check_finite(&[s], "mean");
        let node = a.node().and_then(|id| self.record(Op::Mean { a: id, n }, 1, true));
        Tensor::with_node(vec![1], Arc::new(vec![s]), node)
    }

    /// Sum of squared entries, as a scalar tensor.
    pub fn sum_sq(&mut self, a: &Tensor) -> Tensor {
        let sq = self.mul(a, a);
        self.sum(&sq)
    }

    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let [ra, ca] = rank2(a, "concat_cols lhs");
        let [rb, cb] = rank2(b, "concat_cols rhs");
        assert_eq!(ra, rb, "concat_cols: row counts {ra} vs {rb}");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
        }
        let node = self.record(
            Op::ConcatCols { a: a.node(), b: b.node(), rows: ra, ca, cb },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(vec![ra, ca + cb], Arc::new(out), node)
    }

    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Tensor {
        let [rows, cols] = rank2(a, "slice_cols");
        assert!(start + len <= cols, "slice_cols: {start}+{len} beyond {cols} columns");
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&a.data()[i * cols + start..i * cols + start + len]);
        }
        let node = a.node().and_then(|id| {
            self.record(Op::SliceCols { a: id, rows, cols, start, len }, out.len(), true)
        });
        Tensor::with_node(vec![rows, len], Arc::new(out), node)
    }

    /// Contiguous row range of a rank-2 tensor: rows `start..start+len`.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Tensor {
        let [rows, cols] = rank2(a, "slice_rows");
        assert!(start + len <= rows, "slice_rows: {start}+{len} beyond {rows} rows");
        let out = a.data()[start * cols..(start + len) * cols].to_vec();
        let node = a.node().and_then(|id| {
            self.record(Op::SliceRows { a: id, start_elem: start * cols }, out.len(), true)
        });
        Tensor::with_node(vec![len, cols], Arc::new(out), node)
    }

    /// Stack row-major rank-2 tensors vertically. All parts must agree on
    /// column count.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let [_, cols] = rank2(parts[0], "concat_rows");
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rec = Vec::with_capacity(parts.len());
        let mut involved = false;
        for p in parts {
            let [r, c] = rank2(p, "concat_rows part");
            assert_eq!(c, cols, "concat_rows: column counts {c} vs {cols}");
            rows += r;
            out.extend_from_slice(p.data());
            rec.push((p.node(), p.len()));
            involved |= p.on_tape();
        }
        let node = self.record(Op::ConcatRows { parts: rec }, out.len(), involved);
        Tensor::with_node(vec![rows, cols], Arc::new(out), node)
    }

    /// Interleave two same-shape tensors along a new trailing axis of
    /// extent 2: output shape is `shape(a) + [2]`.
    pub fn stack_last(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "stack_last: shape mismatch");
        let mut out = Vec::with_capacity(a.len() * 2);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            out.push(x);
            out.push(y);
        }
        let mut shape = a.shape().to_vec();
        shape.push(2);
        let node = self.record(
            Op::StackLast { a: a.node(), b: b.node() },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(shape, Arc::new(out), node)
    }

    /// Select `a` where `mask` is 1 and `b` where it is 0, as an exact
    /// bit-level passthrough (no arithmetic touches the selected values).
    /// The mask must be a constant 0/1 tensor.
    pub fn mask_mix(&mut self, mask: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(!mask.on_tape(), "mask_mix: mask must be constant");
        assert_eq!(mask.shape(), a.shape(), "mask_mix: mask/a shape mismatch");
        assert_eq!(a.shape(), b.shape(), "mask_mix: a/b shape mismatch");
        assert!(
            mask.data().iter().all(|&m| m == 0.0 || m == 1.0),
            "mask_mix: mask entries must be exactly 0 or 1"
        );
        let out: Vec<f64> = mask
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m == 1.0 { x } else { y })
            .collect();
        let node = self.record(
            Op::MaskMix { a: a.node(), b: b.node(), mask: mask.data_arc() },
            out.len(),
            a.on_tape() || b.on_tape(),
        );
        Tensor::with_node(a.shape().to_vec(), Arc::new(out), node)
    }

    /// Mean over the batch of −log softmax(logits)[label].
    pub fn softmax_ce(&mut self, logits: &Tensor, labels: &[usize]) -> Tensor {
        let [b, c] = rank2(logits, "softmax_ce");
        assert_eq!(b, labels.len(), "softmax_ce: batch {b} vs {} labels", labels.len());
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "softmax_ce: label {y} out of range for {c} classes");
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss -= row[y] - m - z.ln();
        }
        loss /= b as f64;
        check_finite(&[loss], "softmax_ce");
        let node = logits.node().and_then(|id| {
            self.record(
                Op::SoftmaxCe {
                    logits: id,
                    probs: Arc::new(probs),
                    labels: Arc::new(labels.to_vec()),
                    b,
                    c,
                },
                1,
                true,
            )
        });
        Tensor::with_node(vec![1], Arc::new(vec![loss]), node)
    }

    /// Bilinear interpolation of `image` `[H×W×C]` at continuous pixel
    /// coordinates `coords` `[h×w×2]` (row, col per sample). Out-of-range
    /// coordinates clamp to the nearest edge texel. Differentiable w.r.t.
    /// both inputs.
    pub fn bilinear_sample(&mut self, image: &Tensor, coords: &Tensor) -> Tensor {
        let [h, w, c] = rank3(image, "bilinear_sample image");
        let [oh, ow, two] = rank3(coords, "bilinear_sample coords");
        assert_eq!(two, 2, "bilinear_sample: coords trailing extent must be 2");
        let mut out = vec![0.0; oh * ow * c];
        bilinear_forward(image.data(), coords.data(), h, w, c, oh, ow, &mut out);
        check_finite(&out, "bilinear_sample");
        let node = self.record(
            Op::Bilinear {
                img: image.node(),
                coords: coords.node(),
                imgd: image.data_arc(),
                cd: coords.data_arc(),
                h,
                w,
                c,
                oh,
                ow,
            },
            out.len(),
            image.on_tape() || coords.on_tape(),
        );
        Tensor::with_node(vec![oh, ow, c], Arc::new(out), node)
    }

    /// Reinterpret the buffer under a new shape of identical total length.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, a.len(), "reshape: {:?} incompatible with length {}", shape, a.len());
        let node = a.node().and_then(|id| self.record(Op::Reshape { a: id }, n, true));
        Tensor::with_node(shape, a.data_arc(), node)
    }
}

fn rank2(t: &Tensor, what: &str) -> [usize; 2] {
    match t.shape() {
        [r, c] => [*r, *c],
        s => panic!("{what}: expected rank 2, got {s:?}"),
    }
}

fn rank3(t: &Tensor, what: &str) -> [usize; 3] {
    match t.shape() {
        [a, b, c] => [*a, *b, *c],
        s => panic!("{what}: expected rank 3, got {s:?}"),
    }
}

// ---- dense kernels ------------------------------------------------------

/// out += a · b, shapes [m×k]·[k×n].
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue; // relu activations make zero rows common
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a · bᵀ, shapes [m×n]·[k×n]ᵀ → [m×k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + kk] += s;
        }
    }
}

/// out += aᵀ · g, shapes [m×k]ᵀ·[m×n] → [k×n].
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bilinear_forward(
    img: &[f64],
    coords: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    for s in 0..oh * ow {
        let (r0, c0, r1, c1, dr, dc) = bilinear_taps(coords[2 * s], coords[2 * s + 1], h, w);
        for ch in 0..c {
            let v00 = img[(r0 * w + c0) * c + ch];
            let v01 = img[(r0 * w + c1) * c + ch];
            let v10 = img[(r1 * w + c0) * c + ch];
            let v11 = img[(r1 * w + c1) * c + ch];
            // difference form: exactly reproduces constant regions bit for
            // bit, so a patch matching its backdrop is truly invisible
            let top = v00 + dc * (v01 - v00);
            let bot = v10 + dc * (v11 - v10);
            out[s * c + ch] = top + dr * (bot - top);
        }
    }
}

/// Tap indices (clamped to the image border) and in-cell fractions for one
/// bilinear sample. Out-of-range coordinates replicate the nearest edge
/// texel, so samples never mix with values from outside the image.
fn bilinear_taps(r: f64, cc: f64, h: usize, w: usize) -> (usize, usize, usize, usize, f64, f64) {
    let rf = r.floor();
    let cf = cc.floor();
    let dr = r - rf;
    let dc = cc - cf;
    let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    let r0 = clamp(rf, h);
    let c0 = clamp(cf, w);
    let r1 = clamp(rf + 1.0, h);
    let c1 = clamp(cf + 1.0, w);
    (r0, c0, r1, c1, dr, dc)
}

// ---- backward -----------------------------------------------------------

type Grads = Vec<Option<Vec<f64>>>;

fn buf<'g>(grads: &'g mut Grads, lens: &[usize], id: NodeId) -> &'g mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; lens[id]])
}

/// Deposit `g` (possibly sum-reduced) into a binary op's parent.
fn deposit_bin(
    grads: &mut Grads,
    lens: &[usize],
    parent: P,
    g: &[f64],
    parent_is_len1: bool,
    scale: f64,
) {
    let Some(id) = parent else { return };
    let dst = buf(grads, lens, id);
    if parent_is_len1 && dst.len() == 1 {
        dst[0] += scale * g.iter().sum::<f64>();
    } else {
        for (d, &gv) in dst.iter_mut().zip(g) {
            *d += scale * gv;
        }
    }
}

pub(crate) fn backward_step(op: &Op, g: &[f64], grads: &mut Grads, lens: &[usize]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b, case } => {
            deposit_bin(grads, lens, *a, g, *case == BinCase::ALen1, 1.0);
            deposit_bin(grads, lens, *b, g, *case == BinCase::BLen1, 1.0);
        }
        Op::Sub { a, b, case } => {
            deposit_bin(grads, lens, *a, g, *case == BinCase::ALen1, 1.0);
            deposit_bin(grads, lens, *b, g, *case == BinCase::BLen1, -1.0);
        }
        Op::Mul { a, b, case, ad, bd } => {
            if let Some(id) = a {
                let dst = buf(grads, lens, *id);
                match case {
                    BinCase::Equal | BinCase::BLen1 => {
                        for (i, d) in dst.iter_mut().enumerate() {
                            let bv = if *case == BinCase::BLen1 { bd[0] } else { bd[i] };
                            *d += g[i] * bv;
                        }
                    }
                    BinCase::ALen1 => {
                        let s: f64 = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).sum();
                        dst[0] += s;
                    }
                }
            }
            if let Some(id) = b {
                let dst = buf(grads, lens, *id);
                match case {
                    BinCase::Equal | BinCase::ALen1 => {
                        for (i, d) in dst.iter_mut().enumerate() {
                            let av = if *case == BinCase::ALen1 { ad[0] } else { ad[i] };
                            *d += g[i] * av;
                        }
                    }
                    BinCase::BLen1 => {
                        let s: f64 = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).sum();
                        dst[0] += s;
                    }
                }
            }
        }
        Op::Div { a, b, case, ad, bd } => {
            let bval = |i: usize| if *case == BinCase::BLen1 { bd[0] } else { bd[i] };
            let aval = |i: usize| if *case == BinCase::ALen1 { ad[0] } else { ad[i] };
            if let Some(id) = a {
                let dst = buf(grads, lens, *id);
                if *case == BinCase::ALen1 {
                    let s: f64 = g.iter().enumerate().map(|(i, &gv)| gv / bval(i)).sum();
                    dst[0] += s;
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i] / bval(i);
                    }
                }
            }
            if let Some(id) = b {
                let dst = buf(grads, lens, *id);
                if *case == BinCase::BLen1 {
                    let s: f64 = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| -gv * aval(i) / (bd[0] * bd[0]))
                        .sum();
                    dst[0] += s;
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += -g[i] * aval(i) / (bval(i) * bval(i));
                    }
                }
            }
        }
        Op::AddScalar { a } => {
            let dst = buf(grads, lens, *a);
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d += gv;
            }
        }
        Op::MulScalar { a, c } => {
            let dst = buf(grads, lens, *a);
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d += c * gv;
            }
        }
        Op::Unary { kind, a, saved } => {
            let dst = buf(grads, lens, *a);
            match kind {
                UnaryKind::Tanh => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i] * (1.0 - saved[i] * saved[i]);
                    }
                }
                UnaryKind::Relu => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        if saved[i] > 0.0 {
                            *d += g[i];
                        }
                    }
                }
                UnaryKind::Exp => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i] * saved[i];
                    }
                }
                UnaryKind::Ln => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i] / saved[i];
                    }
                }
                UnaryKind::Sin => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i] * saved[i].cos();
                    }
                }
                UnaryKind::Cos => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += -g[i] * saved[i].sin();
                    }
                }
            }
        }
        Op::Clamp { a, x, lo, hi } => {
            let dst = buf(grads, lens, *a);
            for (i, d) in dst.iter_mut().enumerate() {
                if x[i] >= *lo && x[i] <= *hi {
                    *d += g[i];
                }
            }
        }
        Op::ClampCols { a, x, bounds, cols } => {
            let dst = buf(grads, lens, *a);
            for (i, d) in dst.iter_mut().enumerate() {
                let (lo, hi) = bounds[i % cols];
                if x[i] >= lo && x[i] <= hi {
                    *d += g[i];
                }
            }
        }
        Op::Matmul { a, b, ad, bd, m, k, n } => {
            if let Some(id) = a {
                mm_nt(g, bd, *m, *n, *k, buf(grads, lens, *id));
            }
            if let Some(id) = b {
                mm_tn(ad, g, *m, *k, *n, buf(grads, lens, *id));
            }
        }
        Op::BroadcastRows { a, rows, n } => {
            let dst = buf(grads, lens, *a);
            for r in 0..*rows {
                for j in 0..*n {
                    dst[j] += g[r * n + j];
                }
            }
        }
        Op::Sum { a } => {
            let dst = buf(grads, lens, *a);
            for d in dst.iter_mut() {
                *d += g[0];
            }
        }
        Op::Mean { a, n } => {
            let dst = buf(grads, lens, *a);
            let gv = g[0] / *n as f64;
            for d in dst.iter_mut() {
                *d += gv;
            }
        }
        Op::ConcatCols { a, b, rows, ca, cb } => {
            let cols = ca + cb;
            if let Some(id) = a {
                let dst = buf(grads, lens, *id);
                for i in 0..*rows {
                    for j in 0..*ca {
                        dst[i * ca + j] += g[i * cols + j];
                    }
                }
            }
            if let Some(id) = b {
                let dst = buf(grads, lens, *id);
                for i in 0..*rows {
                    for j in 0..*cb {
                        dst[i * cb + j] += g[i * cols + ca + j];
                    }
                }
            }
        }
        Op::SliceCols { a, rows, cols, start, len } => {
            let dst = buf(grads, lens, *a);
            for i in 0..*rows {
                for j in 0..*len {
                    dst[i * cols + start + j] += g[i * len + j];
                }
            }
        }
        Op::SliceRows { a, start_elem } => {
            let dst = buf(grads, lens, *a);
            for (j, &gv) in g.iter().enumerate() {
                dst[start_elem + j] += gv;
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for (p, plen) in parts {
                if let Some(id) = p {
                    let dst = buf(grads, lens, *id);
                    for (d, &gv) in dst.iter_mut().zip(&g[off..off + plen]) {
                        *d += gv;
                    }
                }
                off += plen;
            }
        }
        Op::StackLast { a, b } => {
            if let Some(id) = a {
                let dst = buf(grads, lens, *id);
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[2 * i];
                }
            }
            if let Some(id) = b {
                let dst = buf(grads, lens, *id);
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[2 * i + 1];
                }
            }
        }
        Op::MaskMix { a, b, mask } => {
            if let Some(id) = a {
                let dst = buf(grads, lens, *id);
                for (i, d) in dst.iter_mut().enumerate() {
                    if mask[i] == 1.0 {
                        *d += g[i];
                    }
                }
            }
            if let Some(id) = b {
                let dst = buf(grads, lens, *id);
                for (i, d) in dst.iter_mut().enumerate() {
                    if mask[i] == 0.0 {
                        *d += g[i];
                    }
                }
            }
        }
        Op::SoftmaxCe { logits, probs, labels, b, c } => {
            let dst = buf(grads, lens, *logits);
            let scale = g[0] / *b as f64;
            for i in 0..*b {
                for j in 0..*c {
                    let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                    dst[i * c + j] += scale * (probs[i * c + j] - onehot);
                }
            }
        }
        Op::Bilinear { img, coords, imgd, cd, h, w, c, oh, ow } => {
            bilinear_backward(g, *img, *coords, imgd, cd, *h, *w, *c, *oh, *ow, grads, lens);
        }
        Op::Reshape { a } => {
            let dst = buf(grads, lens, *a);
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d += gv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward(
    g: &[f64],
    img: P,
    coords: P,
    imgd: &[f64],
    cd: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    grads: &mut Grads,
    lens: &[usize],
) {
    // Image and coord gradients share the per-sample geometry; recompute it
    // once per sample and deposit into whichever parents are on the tape.
    let mut img_grad: Option<Vec<f64>> = img.map(|_| vec![0.0; h * w * c]);
    let mut coord_grad: Option<Vec<f64>> = coords.map(|_| vec![0.0; oh * ow * 2]);
    for s in 0..oh * ow {
        let (r0, c0, r1, c1, dr, dc) = bilinear_taps(cd[2 * s], cd[2 * s + 1], h, w);
        for ch in 0..c {
            let gv = g[s * c + ch];
            if gv == 0.0 {
                continue;
            }
            if let Some(ig) = img_grad.as_deref_mut() {
                ig[(r0 * w + c0) * c + ch] += gv * (1.0 - dr) * (1.0 - dc);
                ig[(r0 * w + c1) * c + ch] += gv * (1.0 - dr) * dc;
                ig[(r1 * w + c0) * c + ch] += gv * dr * (1.0 - dc);
                ig[(r1 * w + c1) * c + ch] += gv * dr * dc;
            }
            if let Some(cg) = coord_grad.as_deref_mut() {
                let v00 = imgd[(r0 * w + c0) * c + ch];
                let v01 = imgd[(r0 * w + c1) * c + ch];
                let v10 = imgd[(r1 * w + c0) * c + ch];
                let v11 = imgd[(r1 * w + c1) * c + ch];
                cg[2 * s] += gv * ((v10 - v00) * (1.0 - dc) + (v11 - v01) * dc);
                cg[2 * s + 1] += gv * ((v01 - v00) * (1.0 - dr) + (v11 - v10) * dr);
            }
        }
    }
    if let (Some(id), Some(ig)) = (img, img_grad) {
        let dst = buf(grads, lens, id);
        for (d, gv) in dst.iter_mut().zip(ig) {
            *d += gv;
        }
    }
    if let (Some(id), Some(cg)) = (coords, coord_grad) {
        let dst = buf(grads, lens, id);
        for (d, gv) in dst.iter_mut().zip(cg) {
            *d += gv;
        }
    }
}

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use rand::Rng;

use super::encode::{attention_row, encode_row, encode_row_backward, RowScratch};
use super::{axis_geometry, ensure_finite, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied across a channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
    Sum,
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased estimate, as used for running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    EdgeLinear {
        f: Var,
        w: Var,
        b: Option<Var>,
        center: Arc<[usize]>,
        nbr: Arc<[usize]>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulRows {
        x: Var,
        s: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
        row: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxReduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    SumReduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        scale: T,
    },
    Reshape {
        x: Var,
    },
    Outer {
        q: Var,
        k: Var,
    },
    ChannelEncode {
        q: Var,
        k: Var,
        v: Var,
        pool: Pool,
        attn: Vec<T>,
        argmax: Vec<u8>,
    },
    ChannelEncodeMapped {
        q: Var,
        k: Var,
        w: Var,
        b: Option<Var>,
        pool: Pool,
        argmax: Vec<u8>,
    },
    BatchNormAct {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        slope: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SumAll {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}


/// Recording of a forward computation, in topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows per block of the value-fused channel encoding.
const ENCODE_BLOCK: usize = 256;

fn shapes_str(a: &[usize], b: &[usize]) -> String {
    format!("{a:?} vs {b:?}")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks_exact(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = *o + x;
        }
    }
    out
}


/// Mean and biased variance used for normalization, plus the statistics
/// reported for running averages in training mode.
#[allow(clippy::type_complexity)]
fn batch_statistics<T: Scalar>(
    xd: &[T],
    c: usize,
    train: bool,
    running: Option<(&[T], &[T])>,
) -> Result<(Vec<T>, Vec<T>, Option<BatchNormStats<T>>)> {
    let rows = xd.len() / c;
    if train {
        let inv_n = T::one() / T::from_usize(rows).unwrap();
        let mut mean = col_sums(xd, c);
        mean.iter_mut().for_each(|m| *m = *m * inv_n);
        let mut var = vec![T::zero(); c];
        for row in xd.chunks_exact(c) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x - m;
                *v = *v + d * d;
            }
        }
        let unbiased: Vec<T> = if rows > 1 {
            let div = T::from_usize(rows - 1).unwrap();
            var.iter().map(|&v| v / div).collect()
        } else {
            vec![T::zero(); c]
        };
        var.iter_mut().for_each(|v| *v = *v * inv_n);
        let stats = BatchNormStats {
            mean: mean.clone(),
            var: unbiased,
        };
        Ok((mean, var, Some(stats)))
    } else {
        let (m, v) = running.ok_or_else(|| {
            Error::Internal("eval-mode batch norm needs running statistics".into())
        })?;
        if m.len() != c || v.len() != c {
            return Err(dim_err("batch_norm", "running statistics length"));
        }
        Ok((m.to_vec(), v.to_vec(), None))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        ensure_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Records an input. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `y = x·w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("rank >= 1");
        if ws.len() != 2 || ws[0] != din {
            return Err(dim_err("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} for weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din,
            1,
            self.value(w).data(),
            dout,
            1,
            T::one(),
            &mut out,
            dout,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.finish("linear", shape, out, Op::Linear { x, w, b }, rg)
    }

    /// Edge-feature linear map: row `r` is `[f_c, f_n − f_c]·w + b` with
    /// `c = center[r]`, `n = nbr[r]`, evaluated per point rather than per edge.
    pub fn edge_linear(
        &mut self,
        f: Var,
        w: Var,
        b: Option<Var>,
        center: Arc<[usize]>,
        nbr: Arc<[usize]>,
    ) -> Result<Var> {
        let fs = self.shape(f).to_vec();
        let ws = self.shape(w).to_vec();
        if fs.len() != 2 || ws.len() != 2 || ws[0] != 2 * fs[1] {
            return Err(dim_err("edge_linear", shapes_str(&fs, &ws)));
        }
        if center.len() != nbr.len() {
            return Err(dim_err("edge_linear", "center/neighbor index lengths differ"));
        }
        let (points, c) = (fs[0], fs[1]);
        if center.iter().chain(nbr.iter()).any(|&i| i >= points) {
            return Err(Error::Internal("edge index out of range".into()));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err("edge_linear", "bias length"));
            }
        }
        let wd = self.value(w).data();
        let (wt, wb) = wd.split_at(c * dout);
        let wdiff: Vec<T> = wt.iter().zip(wb).map(|(&a, &b)| a - b).collect();
        let fd = self.value(f).data();
        let mut d = vec![T::zero(); points * dout];
        let mut z = vec![T::zero(); points * dout];
        T::gemm(points, c, dout, T::one(), fd, c, 1, &wdiff, dout, 1, T::zero(), &mut d, dout, 1);
        T::gemm(points, c, dout, T::one(), fd, c, 1, wb, dout, 1, T::zero(), &mut z, dout, 1);
        let bias = b.map(|b| self.value(b).data());
        let rows = center.len();
        let mut out = vec![T::zero(); rows * dout];
        for (r, row) in out.chunks_exact_mut(dout).enumerate() {
            let dc = &d[center[r] * dout..(center[r] + 1) * dout];
            let zn = &z[nbr[r] * dout..(nbr[r] + 1) * dout];
            match bias {
                Some(bias) => {
                    for (((o, &a), &bz), &bb) in row.iter_mut().zip(dc).zip(zn).zip(bias) {
                        *o = a + bz + bb;
                    }
                }
                None => {
                    for ((o, &a), &bz) in row.iter_mut().zip(dc).zip(zn) {
                        *o = a + bz;
                    }
                }
            }
        }
        let mut inputs = vec![f, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.finish(
            "edge_linear",
            vec![rows, dout],
            out,
            Op::EdgeLinear {
                f,
                w,
                b,
                center,
                nbr,
            },
            rg,
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, shapes_str(self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.finish(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.finish("scale", shape, out, Op::Scale(x, factor), rg)
    }

    /// Multiplies each contiguous row of `x` by one entry of `s`; the row
    /// length is `len(x) / len(s)`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xl, sl) = (self.value(x).len(), self.value(s).len());
        if xl % sl != 0 {
            return Err(dim_err("mul_rows", shapes_str(self.shape(x), self.shape(s))));
        }
        let row = xl / sl;
        let sd = self.value(s).data();
        let mut out = self.value(x).to_vec();
        for (chunk, &f) in out.chunks_exact_mut(row).zip(sd) {
            for v in chunk {
                *v = *v * f;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        self.finish("mul_rows", shape, out, Op::MulRows { x, s }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err("concat_axis", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_geometry(&base, axis, "concat_axis")?;
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err("concat_axis", shapes_str(s, &base)));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.finish(
            "concat_axis",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
            rg,
        )
    }

    /// Selects rows (first-axis slices) of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rows = xs[0];
        let row: usize = xs[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Internal(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        if index.is_empty() {
            return Err(dim_err("gather_rows", "empty index"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = vec![index.len()];
        shape.extend_from_slice(&xs[1..]);
        let rg = self.rg(&[x]);
        self.finish("gather_rows", shape, out, Op::GatherRows { x, index, row }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.finish("leaky_relu", shape, out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.finish("sigmoid", shape, out, Op::Sigmoid { x }, rg)
    }

    /// Batch norm over every axis but the last. In training mode the batch
    /// statistics are returned for the caller's running averages; in eval
    /// mode `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        train: bool,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "batch_norm",
                format!(
                    "input {:?} with scale {:?} shift {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = batch_statistics(xd, c, train, running)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bshift = self.value(beta).data();
        let rg = self.rg(&[x, gamma, beta]);
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = if rg { vec![T::zero(); xd.len()] } else { Vec::new() };
        for (r, (orow, xrow)) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)).enumerate() {
            for j in 0..c {
                let h = (xrow[j] - mean[j]) * inv_std[j];
                orow[j] = g[j] * h + bshift[j];
                if rg {
                    xhat[r * c + j] = h;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let var_out = self.finish(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((var_out, stats))
    }

    /// Inverted dropout. Eval mode returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.finish("dropout", shape, out, Op::Dropout { x, mask }, rg)
    }

    /// Numerically stable softmax across `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_geometry(self.shape(x), axis, "softmax_axis")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(xd[at(l)]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (xd[at(l)] - m).exp();
                    out[at(l)] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.finish(
            "softmax_axis",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Max across `axis`; ties resolve to the lowest index.
    pub fn max_reduce_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis, "max_reduce_axis")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let orow = &mut out[o * inner..(o + 1) * inner];
            let arow = &mut argmax[o * inner..(o + 1) * inner];
            orow.copy_from_slice(&xd[base..base + inner]);
            for l in 1..len {
                let slice = &xd[base + l * inner..base + (l + 1) * inner];
                for i in 0..inner {
                    if slice[i] > orow[i] {
                        orow[i] = slice[i];
                        arow[i] = l as u32;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.finish(
            "max_reduce_axis",
            Self::reduced_shape(&shape, axis),
            out,
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        )
    }

    fn sum_reduce_scaled(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_reduce_axis" } else { "sum_reduce_axis" };
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis, name)?;
        let scale = if mean {
            T::one() / T::from_usize(len).unwrap()
        } else {
            T::one()
        };
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let orow = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, &b) in orow.iter_mut().zip(s) {
                    *a = *a + b;
                }
            }
            if mean {
                let n = T::from_usize(len).unwrap();
                orow.iter_mut().for_each(|a| *a = *a / n);
            }
        }
        let rg = self.rg(&[x]);
        self.finish(
            name,
            Self::reduced_shape(&shape, axis),
            out,
            Op::SumReduce {
                x,
                outer,
                len,
                inner,
                scale,
            },
            rg,
        )
    }

    pub fn sum_reduce_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.sum_reduce_scaled(x, axis, false)
    }

    pub fn mean_reduce_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.sum_reduce_scaled(x, axis, true)
    }

    pub fn pool_axis(&mut self, x: Var, axis: usize, pool: Pool) -> Result<Var> {
        match pool {
            Pool::Max => self.max_reduce_axis(x, axis),
            Pool::Mean => self.mean_reduce_axis(x, axis),
            Pool::Sum => self.sum_reduce_axis(x, axis),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Row-wise outer product: `[R, P] × [R, C] → [R, P, C]`.
    pub fn outer(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[0] != ks[0] {
            return Err(dim_err("outer", shapes_str(&qs, &ks)));
        }
        let (rows, p, c) = (qs[0], qs[1], ks[1]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = Vec::with_capacity(rows * p * c);
        for r in 0..rows {
            let kr = &kd[r * c..(r + 1) * c];
            for &qv in &qd[r * p..(r + 1) * p] {
                out.extend(kr.iter().map(|&kv| qv * kv));
            }
        }
        let rg = self.rg(&[q, k]);
        self.finish("outer", vec![rows, p, c], out, Op::Outer { q, k }, rg)
    }

    /// Fused channel encoding. Per row: attention `softmax_p(q[p]·k[c])`,
    /// response `attention ⊙ v`, then `pool` across the `p` axis.
    /// `q: [R, P]`, `k: [R, C]`, `v: [R, P, C]` → `[R, C]`.
    pub fn channel_encode(&mut self, q: Var, k: Var, v: Var, pool: Pool) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 2 || ks.len() != 2 || qs[0] != ks[0] || vs != [qs[0], qs[1], ks[1]] {
            return Err(dim_err(
                "channel_encode",
                format!("query {qs:?}, key {ks:?}, value {vs:?}"),
            ));
        }
        let (rows, p, c) = (qs[0], qs[1], ks[1]);
        if p > u8::MAX as usize {
            return Err(dim_err("channel_encode", "too many query channels"));
        }
        let rg = self.rg(&[q, k, v]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); rows * c];
        let mut attn = if rg { vec![T::zero(); rows * p * c] } else { Vec::new() };
        let mut argmax = if rg && pool == Pool::Max {
            vec![0u8; rows * c]
        } else {
            Vec::new()
        };
        let mut attn_row = vec![T::zero(); if rg { 0 } else { p * c }];
        let mut scratch = RowScratch::new(p, c);
        for r in 0..rows {
            let s: &mut [T] = if rg {
                &mut attn[r * p * c..(r + 1) * p * c]
            } else {
                &mut attn_row
            };
            let arg = (!argmax.is_empty()).then(|| &mut argmax[r * c..(r + 1) * c]);
            encode_row(
                &qd[r * p..(r + 1) * p],
                &kd[r * c..(r + 1) * c],
                &vd[r * p * c..(r + 1) * p * c],
                pool,
                s,
                &mut out[r * c..(r + 1) * c],
                arg,
                &mut scratch,
            );
        }
        self.finish(
            "channel_encode",
            vec![rows, c],
            out,
            Op::ChannelEncode {
                q,
                k,
                v,
                pool,
                attn,
                argmax,
            },
            rg,
        )
    }

    /// Channel encoding with the value maps folded in: `v = k·w + b`, read
    /// as `[R, P, C]`, is formed in row blocks and recomputed during the
    /// backward pass. `q: [R, P]`, `k: [R, C]`, `w: [C, P·C]`, `b: [P·C]`.
    pub fn channel_encode_mapped(&mut self, q: Var, k: Var, w: Var, b: Option<Var>, pool: Pool) -> Result<Var> {
        let (qs, ks, ws) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(w).to_vec(),
        );
        if qs.len() != 2 || ks.len() != 2 || qs[0] != ks[0] || ws != [ks[1], qs[1] * ks[1]] {
            return Err(dim_err(
                "channel_encode",
                format!("query {qs:?}, key {ks:?}, value weight {ws:?}"),
            ));
        }
        let (rows, p, c) = (qs[0], qs[1], ks[1]);
        if p > u8::MAX as usize {
            return Err(dim_err("channel_encode", "too many query channels"));
        }
        if let Some(b) = b {
            if self.shape(b) != [p * c] {
                return Err(dim_err("channel_encode", format!("value bias {:?}", self.shape(b))));
            }
        }
        let mut inputs = vec![q, k, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let (qd, kd) = (self.data(q), self.data(k));
        let mut out = vec![T::zero(); rows * c];
        let mut argmax = if rg && pool == Pool::Max {
            vec![0u8; rows * c]
        } else {
            Vec::new()
        };
        let mut vblk = vec![T::zero(); ENCODE_BLOCK * p * c];
        let mut s = vec![T::zero(); p * c];
        let mut scratch = RowScratch::new(p, c);
        for r0 in (0..rows).step_by(ENCODE_BLOCK) {
            let nb = ENCODE_BLOCK.min(rows - r0);
            self.value_block(k, w, b, r0, nb, &mut vblk);
            for r in r0..r0 + nb {
                let arg = (!argmax.is_empty()).then(|| &mut argmax[r * c..(r + 1) * c]);
                encode_row(
                    &qd[r * p..(r + 1) * p],
                    &kd[r * c..(r + 1) * c],
                    &vblk[(r - r0) * p * c..(r - r0 + 1) * p * c],
                    pool,
                    &mut s,
                    &mut out[r * c..(r + 1) * c],
                    arg,
                    &mut scratch,
                );
            }
        }
        self.finish(
            "channel_encode",
            vec![rows, c],
            out,
            Op::ChannelEncodeMapped {
                q,
                k,
                w,
                b,
                pool,
                argmax,
            },
            rg,
        )
    }

    /// `out[..nb·P·C] = k[r0..r0+nb]·w + b`.
    fn value_block(&self, k: Var, w: Var, b: Option<Var>, r0: usize, nb: usize, out: &mut [T]) {
        let c = self.value(k).last_dim();
        let pc = self.value(w).last_dim();
        let out = &mut out[..nb * pc];
        let beta = match b {
            Some(b) => {
                let bias = self.data(b);
                for row in out.chunks_exact_mut(pc) {
                    row.copy_from_slice(bias);
                }
                T::one()
            }
            None => T::zero(),
        };
        let kb = &self.data(k)[r0 * c..(r0 + nb) * c];
        T::gemm(nb, c, pc, T::one(), kb, c, 1, self.data(w), pc, 1, beta, out, pc, 1);
    }

    /// Batch norm followed by LeakyReLU with the given negative slope.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_act(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        train: bool,
        running: Option<(&[T], &[T])>,
        slope: T,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "batch_norm",
                format!(
                    "input {:?} with scale {:?} shift {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.data(x);
        let (mean, var, stats) = batch_statistics(xd, c, train, running)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bshift = self.data(beta);
        let scale: Vec<T> = g.iter().zip(&inv_std).map(|(&a, &b)| a * b).collect();
        let shift: Vec<T> = bshift
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        let mut out = vec![T::zero(); xd.len()];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for (((o, &xv), &sc), &sh) in orow.iter_mut().zip(xrow).zip(&scale).zip(&shift) {
                let y = xv * sc + sh;
                *o = if y > T::zero() { y } else { y * slope };
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let var_out = self.finish(
            "batch_norm",
            shape,
            out,
            Op::BatchNormAct {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
                slope,
            },
            rg,
        )?;
        Ok((var_out, stats))
    }

    /// Mean of `−log softmax(logits)[label]` over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if labels.len() != rows {
            return Err(dim_err(
                "cross_entropy",
                format!("{rows} rows of logits for {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (r, (row, prow)) in ld.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - m).exp();
                sum = sum + *p;
            }
            prow.iter_mut().for_each(|p| *p = *p / sum);
            total = total + (sum.ln() + m - row[labels[r]]);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        self.finish(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Hash of the discrete choices made by the recorded ops: gather
    /// indices, max selections, activation signs and dropout masks. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn structure_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let signs = |h: &mut DefaultHasher, v: &[T]| {
            for chunk in v.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |a, (i, &x)| a | (((x > T::zero()) as u64) << i));
                bits.hash(h);
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::EdgeLinear { center, nbr, .. } => (i, &center[..], &nbr[..]).hash(&mut h),
                Op::GatherRows { index, .. } => (i, &index[..]).hash(&mut h),
                Op::MaxReduce { argmax, .. } => (i, argmax).hash(&mut h),
                Op::ChannelEncode { argmax, .. } | Op::ChannelEncodeMapped { argmax, .. } => (i, argmax).hash(&mut h),
                Op::LeakyRelu { .. } | Op::BatchNormAct { .. } => {
                    i.hash(&mut h);
                    signs(&mut h, node.value.data());
                }
                Op::Dropout { mask, .. } => {
                    i.hash(&mut h);
                    signs(&mut h, mask);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.finish("sum_all", vec![1], vec![s], Op::SumAll { x }, rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Reshape { x } = node.op {
                if self.wants(x) {
                    accumulate(&mut grads, x, g);
                }
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let din = self.value(*w).shape()[0];
                let dout = self.value(*w).shape()[1];
                let rows = g.len() / dout;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, T::one(), g, dout, 1, self.data(*w), 1, dout, T::zero(), &mut dx, din, 1);
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, T::one(), self.data(*x), 1, din, g, dout, 1, T::zero(), &mut dw, dout, 1);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, col_sums(g, dout));
                    }
                }
            }
            Op::EdgeLinear {
                f,
                w,
                b,
                center,
                nbr,
            } => {
                let fs = self.value(*f).shape();
                let (points, c) = (fs[0], fs[1]);
                let dout = self.value(*w).shape()[1];
                // dD: per-center sums, dZ: per-neighbor sums.
                let mut dd = vec![T::zero(); points * dout];
                let mut dz = vec![T::zero(); points * dout];
                for (r, grow) in g.chunks_exact(dout).enumerate() {
                    let dc = &mut dd[center[r] * dout..(center[r] + 1) * dout];
                    for (a, &x) in dc.iter_mut().zip(grow) {
                        *a = *a + x;
                    }
                    let zn = &mut dz[nbr[r] * dout..(nbr[r] + 1) * dout];
                    for (a, &x) in zn.iter_mut().zip(grow) {
                        *a = *a + x;
                    }
                }
                let fd = self.data(*f);
                let wd = self.data(*w);
                let (wt, wb) = wd.split_at(c * dout);
                if self.wants(*f) {
                    let wdiff: Vec<T> = wt.iter().zip(wb).map(|(&a, &b)| a - b).collect();
                    let mut df = vec![T::zero(); points * c];
                    T::gemm(points, dout, c, T::one(), &dd, dout, 1, &wdiff, 1, dout, T::zero(), &mut df, c, 1);
                    T::gemm(points, dout, c, T::one(), &dz, dout, 1, wb, 1, dout, T::one(), &mut df, c, 1);
                    accumulate(grads, *f, df);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); 2 * c * dout];
                    {
                        let (dwt, dwb) = dw.split_at_mut(c * dout);
                        T::gemm(c, points, dout, T::one(), fd, 1, c, &dd, dout, 1, T::zero(), dwt, dout, 1);
                        T::gemm(c, points, dout, T::one(), fd, 1, c, &dz, dout, 1, T::zero(), dwb, dout, 1);
                        for (b, &t) in dwb.iter_mut().zip(dwt.iter()) {
                            *b = *b - t;
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, col_sums(g, dout));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *f).collect());
                }
            }
            Op::MulRows { x, s } => {
                let sd = self.data(*s);
                let row = g.len() / sd.len();
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for (chunk, &f) in dx.chunks_exact_mut(row).zip(sd) {
                        chunk.iter_mut().for_each(|v| *v = *v * f);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let ds = g
                        .chunks_exact(row)
                        .zip(self.data(*x).chunks_exact(row))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, ds);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &l) in inputs.iter().zip(lens) {
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + l * inner]);
                        }
                        accumulate(grads, v, d);
                    }
                    offset += l;
                }
            }
            Op::GatherRows { x, index, row } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (n, &i) in index.iter().enumerate() {
                        let dst = &mut dx[i * row..(i + 1) * row];
                        for (a, &b) in dst.iter_mut().zip(&g[n * row..(n + 1) * row]) {
                            *a = *a + b;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gd = self.data(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + grow[j];
                        sum_gx[j] = sum_gx[j] + grow[j] * hrow[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        let n = T::from_usize(rows).unwrap();
                        let inv_n = T::one() / n;
                        for ((drow, grow), hrow) in dx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                        {
                            for j in 0..c {
                                drow[j] = gd[j] * inv_std[j] * inv_n
                                    * (n * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                drow[j] = grow[j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..*len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..*len {
                                dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax,
            } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let l = argmax[o * inner + i] as usize;
                            dx[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumReduce {
                x,
                outer,
                len,
                inner,
                scale,
            } => {
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for _ in 0..*len {
                            dx.extend(grow.iter().map(|&v| v * *scale));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Outer { q, k } => {
                let (p, c) = (self.value(*q).shape()[1], self.value(*k).shape()[1]);
                let rows = self.value(*q).shape()[0];
                let (qd, kd) = (self.data(*q), self.data(*k));
                if self.wants(*q) {
                    let mut dq = vec![T::zero(); rows * p];
                    for r in 0..rows {
                        let kr = &kd[r * c..(r + 1) * c];
                        for pi in 0..p {
                            let gr = &g[(r * p + pi) * c..(r * p + pi + 1) * c];
                            dq[r * p + pi] = gr.iter().zip(kr).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    let mut dk = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let dkr = &mut dk[r * c..(r + 1) * c];
                        for pi in 0..p {
                            let qv = qd[r * p + pi];
                            let gr = &g[(r * p + pi) * c..(r * p + pi + 1) * c];
                            for (a, &b) in dkr.iter_mut().zip(gr) {
                                *a = *a + b * qv;
                            }
                        }
                    }
                    accumulate(grads, *k, dk);
                }
            }
            Op::ChannelEncode {
                q,
                k,
                v,
                pool,
                attn,
                argmax,
            } => self.backward_channel_encode(*q, *k, *v, *pool, attn, argmax, g, grads),
            Op::ChannelEncodeMapped {
                q,
                k,
                w,
                b,
                pool,
                argmax,
            } => self.backward_channel_encode_mapped(*q, *k, *w, *b, *pool, argmax, g, grads),
            Op::BatchNormAct {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
                slope,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let (xd, gd, bd) = (self.data(*x), self.data(*gamma), self.data(*beta));
                let mut dpre = vec![T::zero(); g.len()];
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ((drow, grow), xrow) in dpre.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xd.chunks_exact(c)) {
                    for j in 0..c {
                        let h = (xrow[j] - mean[j]) * inv_std[j];
                        let pre = gd[j] * h + bd[j];
                        let d = if pre > T::zero() { grow[j] } else { grow[j] * *slope };
                        drow[j] = d;
                        sum_g[j] = sum_g[j] + d;
                        sum_gx[j] = sum_gx[j] + d * h;
                    }
                }
                if self.wants(*x) {
                    let scale: Vec<T> = gd.iter().zip(inv_std).map(|(&a, &b)| a * b).collect();
                    if *train {
                        let inv_n = T::one() / T::from_usize(rows).unwrap();
                        for (drow, xrow) in dpre.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
                            for j in 0..c {
                                let h = (xrow[j] - mean[j]) * inv_std[j];
                                drow[j] = scale[j] * (drow[j] - (sum_g[j] + h * sum_gx[j]) * inv_n);
                            }
                        }
                    } else {
                        for drow in dpre.chunks_exact_mut(c) {
                            for (d, &sc) in drow.iter_mut().zip(&scale) {
                                *d = *d * sc;
                            }
                        }
                    }
                    accumulate(grads, *x, dpre);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let k = self.value(*logits).last_dim();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] = d[r * k + l] - scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_channel_encode_mapped(
        &self,
        q: Var,
        k: Var,
        w: Var,
        b: Option<Var>,
        pool: Pool,
        argmax: &[u8],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, p) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let c = self.value(k).shape()[1];
        let pc = p * c;
        let (qd, kd, wd) = (self.data(q), self.data(k), self.data(w));
        let want_q = self.wants(q);
        let want_k = self.wants(k);
        let want_w = self.wants(w);
        let want_b = b.is_some_and(|b| self.wants(b));
        let want_v = want_k || want_w || want_b;
        let mut dq = if want_q { vec![T::zero(); rows * p] } else { Vec::new() };
        let mut dk = if want_k { vec![T::zero(); rows * c] } else { Vec::new() };
        let mut dw = if want_w { vec![T::zero(); c * pc] } else { Vec::new() };
        let mut db = if want_b { vec![T::zero(); pc] } else { Vec::new() };
        let mut vblk = vec![T::zero(); ENCODE_BLOCK * pc];
        let mut dvblk = vec![T::zero(); ENCODE_BLOCK * pc];
        let mut s = vec![T::zero(); pc];
        let mut scratch = RowScratch::new(p, c);
        let empty = [0u8; 0];
        for r0 in (0..rows).step_by(ENCODE_BLOCK) {
            let nb = ENCODE_BLOCK.min(rows - r0);
            self.value_block(k, w, b, r0, nb, &mut vblk);
            for r in r0..r0 + nb {
                let (qr, kr) = (&qd[r * p..(r + 1) * p], &kd[r * c..(r + 1) * c]);
                let vr = &vblk[(r - r0) * pc..(r - r0 + 1) * pc];
                attention_row(qr, kr, &mut s, &mut scratch);
                let arg = if argmax.is_empty() { &empty[..] } else { &argmax[r * c..(r + 1) * c] };
                encode_row_backward(
                    qr,
                    kr,
                    vr,
                    &s,
                    &g[r * c..(r + 1) * c],
                    arg,
                    pool,
                    want_q.then(|| &mut dq[r * p..(r + 1) * p]),
                    want_k.then(|| &mut dk[r * c..(r + 1) * c]),
                    want_v.then(|| &mut dvblk[(r - r0) * pc..(r - r0 + 1) * pc]),
                    &mut scratch,
                );
            }
            let dv = &dvblk[..nb * pc];
            if want_w {
                let kb = &kd[r0 * c..(r0 + nb) * c];
                T::gemm(c, nb, pc, T::one(), kb, 1, c, dv, pc, 1, T::one(), &mut dw, pc, 1);
            }
            if want_k {
                let dkb = &mut dk[r0 * c..(r0 + nb) * c];
                T::gemm(nb, pc, c, T::one(), dv, pc, 1, wd, 1, pc, T::one(), dkb, c, 1);
            }
            if want_b {
                for row in dv.chunks_exact(pc) {
                    for (a, &x) in db.iter_mut().zip(row) {
                        *a = *a + x;
                    }
                }
            }
        }
        if want_q {
            accumulate(grads, q, dq);
        }
        if want_k {
            accumulate(grads, k, dk);
        }
        if want_w {
            accumulate(grads, w, dw);
        }
        if let (true, Some(b)) = (want_b, b) {
            accumulate(grads, b, db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_channel_encode(
        &self,
        q: Var,
        k: Var,
        v: Var,
        pool: Pool,
        attn: &[T],
        argmax: &[u8],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, p) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let c = self.value(k).shape()[1];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (want_q, want_k, want_v) = (self.wants(q), self.wants(k), self.wants(v));
        let mut dq = if want_q { vec![T::zero(); rows * p] } else { Vec::new() };
        let mut dk = if want_k { vec![T::zero(); rows * c] } else { Vec::new() };
        let mut dv = if want_v { vec![T::zero(); rows * p * c] } else { Vec::new() };
        let mut scratch = RowScratch::new(p, c);
        let empty = [0u8; 0];
        for r in 0..rows {
            let arg = if argmax.is_empty() { &empty[..] } else { &argmax[r * c..(r + 1) * c] };
            encode_row_backward(
                &qd[r * p..(r + 1) * p],
                &kd[r * c..(r + 1) * c],
                &vd[r * p * c..(r + 1) * p * c],
                &attn[r * p * c..(r + 1) * p * c],
                &g[r * c..(r + 1) * c],
                arg,
                pool,
                want_q.then(|| &mut dq[r * p..(r + 1) * p]),
                want_k.then(|| &mut dk[r * c..(r + 1) * c]),
                want_v.then(|| &mut dv[r * p * c..(r + 1) * p * c]),
                &mut scratch,
            );
        }
        if want_q {
            accumulate(grads, q, dq);
        }
        if want_k {
            accumulate(grads, k, dk);
        }
        if want_v {
            accumulate(grads, v, dv);
        }
    }
}

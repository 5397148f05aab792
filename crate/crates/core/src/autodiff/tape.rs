use super::{Grads, ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `x * w^T`
    Linear(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Hadamard(Var, Var),
    Concat(Var, Var),
    Splice(Var, Vec<isize>),
    LogSoftmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train: bool,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

fn axpy<S: Scalar>(acc: &mut [f64], alpha: f64, x: &[S]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v.as_f64();
    }
}

fn require_2d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Batch mean and variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                train: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    /// Records a parameter leaf; its gradient flows into `Grads[id]`.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_2d("matmul", ta)?;
        require_2d("matmul", tb)?;
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![S::zero(); m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (kk, av) in ta.row(i).iter().enumerate() {
                axpy(&mut acc, av.as_f64(), tb.row(kk));
            }
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = S::from_f64(*v);
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `x * w^T` for `x: T x I`, `w: O x I`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        require_2d("linear", tw)?;
        if tx.cols() != tw.cols() {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (rows, out_dim) = (tx.rows(), tw.rows());
        let mut out = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            let xr = tx.row(r);
            for o in 0..out_dim {
                out.push(S::from_f64(dot(xr, tw.row(o))));
            }
        }
        let t = Tensor::from_vec(&[rows, out_dim], out)?;
        Ok(self.push(t, Op::Linear(x, w)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.numel() != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        let t = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(S) -> S, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(tx.shape(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| S::from_f64(v.as_f64() * c), Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| S::from_f64(sigmoid(v.as_f64())), Op::Sigmoid(x))
    }

    /// Concatenates along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape("concat", ta.shape(), tb.shape()));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.rows() * (ca + cb));
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let t = Tensor::from_vec(&[ta.rows(), ca + cb], data)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    /// Maps `T x D` to `T x (|offsets| D)`: row `t` is the concatenation of
    /// rows `t + o`, clamped to `[0, T - 1]`.
    pub fn splice(&mut self, x: Var, offsets: &[isize]) -> Result<Var> {
        let tx = self.value(x);
        require_2d("splice", tx)?;
        if offsets.is_empty() {
            return Err(Error::shape("splice", tx.shape(), &[0]));
        }
        let (t_len, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(t_len * d * offsets.len());
        for t in 0..t_len {
            for &o in offsets {
                let src = clamp_index(t as isize + o, t_len);
                data.extend_from_slice(tx.row(src));
            }
        }
        let t = Tensor::from_vec(&[t_len, d * offsets.len()], data)?;
        Ok(self.push(t, Op::Splice(x, offsets.to_vec())))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let lse = row_lse(row);
            data.extend(row.iter().map(|v| S::from_f64(v.as_f64() - lse)));
        }
        let _ = c;
        let t = Tensor::from_vec(tx.shape(), data).expect("same shape");
        self.push(t, Op::LogSoftmax(x))
    }

    /// Per-column batch normalization. In training mode the statistics come
    /// from the rows of `x` (retrievable through [`Tape::batch_stats`]); in
    /// evaluation mode `running` supplies them.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batchnorm", tx.shape(), self.value(gamma).shape()));
        }
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batchnorm", tx.shape(), &[m.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let n = rows as f64;
                let mut mean = vec![0.0f64; c];
                for r in 0..rows {
                    for (j, v) in tx.row(r).iter().enumerate() {
                        mean[j] += v.as_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0f64; c];
                for r in 0..rows {
                    for (j, v) in tx.row(r).iter().enumerate() {
                        let d = v.as_f64() - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var)
            }
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            for (j, v) in tx.row(r).iter().enumerate() {
                let xhat = (v.as_f64() - mean[j]) / (var[j] + eps).sqrt();
                data.push(S::from_f64(g[j].as_f64() * xhat + b[j].as_f64()));
            }
        }
        let t = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let mut acc = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        let v = acc / ta.numel().max(1) as f64;
        Ok(self.push(Tensor::scalar(S::from_f64(v)), Op::Mse(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(S::from_f64(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|v| v.as_f64()).sum();
        let n = tx.numel().max(1) as f64;
        self.push(Tensor::scalar(S::from_f64(s / n)), Op::Mean(x))
    }

    /// Sign of every ReLU input element on the tape, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| *v > S::zero()))
            .collect()
    }

    /// Backpropagates from a scalar `loss`, accumulating into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads<S>) -> Result<()> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        self.backward_with(loss, &Tensor::scalar(S::one()), grads)
    }

    /// Backpropagates an externally computed gradient `seed` of some
    /// objective with respect to `from`.
    pub fn backward_with(&self, from: Var, seed: &Tensor<S>, grads: &mut Grads<S>) -> Result<()> {
        if seed.shape() != self.value(from).shape() {
            return Err(Error::shape("backward seed", seed.shape(), self.value(from).shape()));
        }
        let mut g: Vec<Option<Vec<S>>> = vec![None; from.0 + 1];
        g[from.0] = Some(seed.data().to_vec());
        for idx in (0..=from.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.get_mut(*id).iter_mut().zip(&gout) {
                        *a = *a + *b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = vec![0.0f64; m * k];
                    for i in 0..m {
                        let gi = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] = dot(gi, tb.row(kk));
                        }
                    }
                    let mut db = vec![0.0f64; k * n];
                    for kk in 0..k {
                        let acc = &mut db[kk * n..(kk + 1) * n];
                        for i in 0..m {
                            axpy(acc, ta.get2(i, kk).as_f64(), &gout[i * n..(i + 1) * n]);
                        }
                    }
                    accumulate(&mut g, *a, &da);
                    accumulate(&mut g, *b, &db);
                }
                Op::Linear(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (rows, inp, out) = (tx.rows(), tx.cols(), tw.rows());
                    let mut dx = vec![0.0f64; rows * inp];
                    for r in 0..rows {
                        let acc = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let gv = gout[r * out + o].as_f64();
                            if gv != 0.0 {
                                axpy(acc, gv, tw.row(o));
                            }
                        }
                    }
                    let mut dw = vec![0.0f64; out * inp];
                    for o in 0..out {
                        let acc = &mut dw[o * inp..(o + 1) * inp];
                        for r in 0..rows {
                            let gv = gout[r * out + o].as_f64();
                            if gv != 0.0 {
                                axpy(acc, gv, tx.row(r));
                            }
                        }
                    }
                    accumulate(&mut g, *x, &dx);
                    accumulate(&mut g, *w, &dw);
                }
                Op::AddBias(x, b) => {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0f64; c];
                    for (i, v) in gout.iter().enumerate() {
                        db[i % c] += v.as_f64();
                    }
                    accumulate_s(&mut g, *x, &gout);
                    accumulate(&mut g, *b, &db);
                }
                Op::Add(a, b) => {
                    accumulate_s(&mut g, *a, &gout);
                    accumulate_s(&mut g, *b, &gout);
                }
                Op::Scale(x, c) => {
                    let d: Vec<f64> = gout.iter().map(|v| v.as_f64() * c).collect();
                    accumulate(&mut g, *x, &d);
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, xv)| if *xv > S::zero() { gv.as_f64() } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *x, &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| {
                            let y = y.as_f64();
                            gv.as_f64() * y * (1.0 - y)
                        })
                        .collect();
                    accumulate(&mut g, *x, &d);
                }
                Op::Hadamard(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(tb.data())
                        .map(|(gv, bv)| gv.as_f64() * bv.as_f64())
                        .collect();
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, av)| gv.as_f64() * av.as_f64())
                        .collect();
                    accumulate(&mut g, *a, &da);
                    accumulate(&mut g, *b, &db);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = self.value(*a).rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = &gout[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate_s(&mut g, *a, &da);
                    accumulate_s(&mut g, *b, &db);
                }
                Op::Splice(x, offsets) => {
                    let tx = self.value(*x);
                    let (t_len, d) = (tx.rows(), tx.cols());
                    let width = d * offsets.len();
                    let mut dx = vec![0.0f64; t_len * d];
                    for t in 0..t_len {
                        for (k, &o) in offsets.iter().enumerate() {
                            let src = clamp_index(t as isize + o, t_len);
                            let gsl = &gout[t * width + k * d..t * width + (k + 1) * d];
                            for (acc, v) in dx[src * d..(src + 1) * d].iter_mut().zip(gsl) {
                                *acc += v.as_f64();
                            }
                        }
                    }
                    accumulate(&mut g, *x, &dx);
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let mut dx = Vec::with_capacity(gout.len());
                    for r in 0..node.value.rows() {
                        let gr = &gout[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().map(|v| v.as_f64()).sum();
                        for (gv, y) in gr.iter().zip(node.value.row(r)) {
                            dx.push(gv.as_f64() - y.as_f64().exp() * total);
                        }
                    }
                    accumulate(&mut g, *x, &dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    train,
                } => {
                    let tx = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let (rows, c) = (tx.rows(), tx.cols());
                    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let xhat = |r: usize, j: usize| (tx.get2(r, j).as_f64() - mean[j]) * inv[j];
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = gout[r * c + j].as_f64();
                            dgamma[j] += gv * xhat(r, j);
                            dbeta[j] += gv;
                        }
                    }
                    let mut dx = vec![0.0f64; rows * c];
                    let n = rows as f64;
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = gout[r * c + j].as_f64();
                            let scale = gam[j].as_f64() * inv[j];
                            dx[r * c + j] = if *train {
                                scale * (gv - dbeta[j] / n - xhat(r, j) * dgamma[j] / n)
                            } else {
                                scale * gv
                            };
                        }
                    }
                    accumulate(&mut g, *x, &dx);
                    accumulate(&mut g, *gamma, &dgamma);
                    accumulate(&mut g, *beta, &dbeta);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = 2.0 * gout[0].as_f64() / ta.numel().max(1) as f64;
                    let da: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, y)| scale * (x.as_f64() - y.as_f64()))
                        .collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(&mut g, *a, &da);
                    accumulate(&mut g, *b, &db);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate_s(&mut g, *x, &vec![gout[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    let v = gout[0].as_f64() / n.max(1) as f64;
                    accumulate(&mut g, *x, &vec![v; n]);
                }
            }
        }
        Ok(())
    }
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

fn row_lse<S: Scalar>(row: &[S]) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate<S: Scalar>(g: &mut [Option<Vec<S>>], v: Var, d: &[f64]) {
    match &mut g[v.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(d) {
                *a = S::from_f64(a.as_f64() + b);
            }
        }
        slot @ None => *slot = Some(d.iter().map(|&x| S::from_f64(x)).collect()),
    }
}

fn accumulate_s<S: Scalar>(g: &mut [Option<Vec<S>>], v: Var, d: &[S]) {
    match &mut g[v.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(d) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t2(2, 2, &[1.0, -2.0, 3.5, 0.0]));
        let ones = tape.input(Tensor::filled(&[2, 2], 1.0));
        let h = tape.hadamard(a, ones).unwrap();
        assert_eq!(tape.value(h), tape.value(a));
    }

    #[test]
    fn splice_clamps_single_frame() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 2, &[4.0, 5.0]));
        let s = tape.splice(x, &[-1, 0, 1]).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 6]);
        assert_eq!(tape.value(s).data(), &[4.0, 5.0, 4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 4]));
        match tape.add(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tape.linear(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("p", t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let mut grads = params.zero_grads();
        let mut tape = Tape::new();
        let p = tape.param(&params, id);
        let s = tape.sum(p);
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(id), &[1.0; 6]);
    }

    #[test]
    fn second_backward_doubles() {
        let mut params = ParamSet::<f32>::new();
        let id = params.add("w", Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap(), true);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let w = tape.param(&params, id);
        let y = tape.linear(x, w).unwrap();
        let s = tape.sigmoid(y);
        let loss = tape.mean(s);
        let mut grads = params.zero_grads();
        tape.backward(loss, &mut grads).unwrap();
        let once = grads.get(id).to_vec();
        tape.backward(loss, &mut grads).unwrap();
        for (a, b) in grads.get(id).iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params = ParamSet::<f64>::new();
        let mut grads = params.zero_grads();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x, &mut grads), Err(Error::NotScalar(_))));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(2, 3, &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = tape.log_softmax(x);
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t2(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }
}

//! Elementwise, reduction, and layout operations on [`Var`].

use super::tape::Var;
use super::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Flat offsets into `a` and `b` for every element of the broadcast output.
fn broadcast_offsets(out: &[usize], a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = out.len();
    let sa = strides(a);
    let sb = strides(b);
    let sa: Vec<usize> = (0..rank).map(|d| if a[d] == 1 { 0 } else { sa[d] }).collect();
    let sb: Vec<usize> = (0..rank).map(|d| if b[d] == 1 { 0 } else { sb[d] }).collect();
    let n = numel(out);
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        ia.push(oa);
        ib.push(ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    (ia, ib)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", a, b))),
        })
        .collect()
}

/// Decomposes `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let av = self.value();
        let bv = other.value();
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let same = av.shape() == bv.shape();
        let (ia, ib) = if same {
            (Vec::new(), Vec::new())
        } else {
            broadcast_offsets(&out_shape, av.shape(), bv.shape())
        };
        let (a, b) = (av.data(), bv.data());
        let data: Vec<f64> = if same {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ia.iter().zip(&ib).map(|(&i, &j)| f(a[i], b[j])).collect()
        };
        let out = Tensor::from_parts(out_shape, data);
        let tape = self.tape;
        Ok(tape.record(out, &[self, other], move |g, wants| {
            let (a, b) = (av.data(), bv.data());
            let g = g.data();
            let mut ga = wants[0].then(|| Tensor::zeros(av.shape()));
            let mut gb = wants[1].then(|| Tensor::zeros(bv.shape()));
            let n = g.len();
            for k in 0..n {
                let (i, j) = if same { (k, k) } else { (ia[k], ib[k]) };
                let (da, db) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (b[j], a[i]),
                    Binary::Div => (1.0 / b[j], -a[i] / (b[j] * b[j])),
                };
                if let Some(ga) = &mut ga {
                    ga.data_mut()[i] += g[k] * da;
                }
                if let Some(gb) = &mut gb {
                    gb.data_mut()[j] += g[k] * db;
                }
            }
            vec![ga, gb]
        }))
    }

    /// Broadcasting addition (equal ranks; size-1 axes stretch).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let xv = self.value();
        let out = xv.map(f);
        let yv = std::rc::Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// x * sigmoid(x).
    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// ln(1 + e^x).
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// elu(x) + 1: positive feature map used by linear attention.
    pub fn elu_plus_one(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x + 1.0 } else { x.exp() },
            |x, y| if x > 0.0 { 1.0 } else { y },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.tape
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} invalid or empty for shape {:?}", shape),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = xv.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(out, &[self], move |g, _| {
            let g = g.data();
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(0);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n.max(1) as f64))
    }

    /// Maximum along `axis`. The gradient flows to the first (lowest-index) maximum.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "max_axis",
                format!("axis {axis} invalid or empty for shape {:?}", shape),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = xv.data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    let slot = o * inner + i;
                    if v > data[slot] {
                        data[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), data);
        Ok(self.tape.record(out, &[self], move |g, _| {
            let g = g.data();
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    gd[(o * n + arg[slot]) * inner + i] += g[slot];
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let out = xv.reshape(shape)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.permute(&inverse).expect("inverse permutation"))]
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} of axis {axis} in {:?}", start + len, shape),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = xv.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(out, &[self], move |g, _| {
            let g = g.data();
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                gd[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {:?}", base)));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", base, s),
                ));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, data);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.record(out, parts, move |g, wants| {
            let g = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                if wants[k] {
                    let mut gd = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let at = (o * total + offset) * inner;
                        gd.extend_from_slice(&g[at..at + l * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(shapes[k].clone(), gd)));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        }))
    }

    /// `out.flat[i] = self.flat[index[i]]`, shaped as `shape`.
    pub fn gather(self, index: std::rc::Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let n = xv.len();
        if numel(shape) != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::invalid(
                "gather",
                format!("{} indices into {} values for shape {:?}", index.len(), n, shape),
            ));
        }
        let x = xv.data();
        let data = index.iter().map(|&i| x[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                gd[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Writes `self.flat[i]` to `out.flat[index[i]]` in a zero tensor of `shape`.
    /// Indices must be distinct.
    pub fn scatter(self, index: std::rc::Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let n = numel(shape);
        if xv.len() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::invalid(
                "scatter",
                format!("{} values to {} indices in shape {:?}", xv.len(), index.len(), shape),
            ));
        }
        let mut out = Tensor::zeros(shape);
        {
            let od = out.data_mut();
            for (&i, &v) in index.iter().zip(xv.data()) {
                od[i] = v;
            }
        }
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let g = g.data();
            let data = index.iter().map(|&i| g[i]).collect();
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        }))
    }

    /// Matrix product of `M×K` and `K×N`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let av = self.value();
        let bv = other.value();
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (a, b) => return Err(Error::shape("matmul", format!("{:?} x {:?}", a, b))),
        };
        let out = Tensor::from_parts(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n));
        Ok(self.tape.record(out, &[self, other], move |g, wants| {
            let g = g.data();
            let ga = wants[0].then(|| {
                // g (m×n) · bᵀ (n×k)
                let mut d = vec![0.0; m * k];
                let b = bv.data();
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            d[i * k + p] += gv * b[p * n + j];
                        }
                    }
                }
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = wants[1].then(|| {
                // aᵀ (k×m) · g (m×n)
                let mut d = vec![0.0; k * n];
                let a = av.data();
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let row = &g[i * n..(i + 1) * n];
                        for (dst, gv) in d[p * n..(p + 1) * n].iter_mut().zip(row) {
                            *dst += av * gv;
                        }
                    }
                }
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid("softmax", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = xv.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), y);
        let yv = std::rc::Rc::new(out.clone());
        Ok(self.tape.record(out, &[self], move |g, _| {
            let (g, y) = (g.data(), yv.data());
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let xv = self.value();
        if xv.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", xv.shape(), targets.shape()),
            ));
        }
        let n = xv.len() as f64;
        let loss: f64 = xv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / n;
        let targets = targets.clone();
        Ok(self.tape.record(Tensor::scalar(loss), &[self], move |g, _| {
            let s = g.item() / n;
            let data = xv
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &t)| s * (sigmoid(x) - t))
                .collect();
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), data))]
        }))
    }

    /// Mean squared difference to a fixed target.
    pub fn mse_to(self, target: &Tensor) -> Result<Var<'t>> {
        let t = self.tape.constant(target.clone());
        Ok(self.sub(t)?.square().mean())
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

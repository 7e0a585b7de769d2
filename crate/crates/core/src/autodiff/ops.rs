use super::array::Array;
use super::flops::*;
use super::rng::RngStream;
use super::tape::{axpy, gelu, Op, Tape, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×p] · b[p×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims("matmul", a)?;
        let (p2, n) = self.matrix_dims("matmul", b)?;
        if p != p2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for k in 0..p {
                let a_ik = av[i * p + k];
                if a_ik != 0.0 {
                    axpy(a_ik, &bv[k * n..(k + 1) * n], dst);
                }
            }
        }
        self.count_matmul(2 * (m * p * n) as u64);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×p] · b[n×p]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims("matmul_nt", a)?;
        let (n, p2) = self.matrix_dims("matmul_nt", b)?;
        if p != p2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * p..(i + 1) * p];
            for j in 0..n {
                out[i * n + j] = super::tape::dot(arow, &bv[j * p..(j + 1) * p]);
            }
        }
        self.count_matmul(2 * (m * p * n) as u64);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `x[m×in] · w[out×in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, din) = self.matrix_dims("linear", x)?;
        let (dout, din2) = self.matrix_dims("linear", w)?;
        if din != din2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", self.shape(b), &[dout]));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m * dout];
        for i in 0..m {
            let xrow = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                out[i * dout + o] = super::tape::dot(xrow, &wv[o * din..(o + 1) * din]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, v) in row.iter_mut().enumerate() {
                    *v += bv[o];
                }
            }
            self.count_elementwise(ADD_PER_ELEM * (m * dout) as u64);
        }
        self.count_matmul(2 * (m * din * dout) as u64);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Array::new(vec![m, dout], out)?, Op::Linear { x, w, b }, &inputs))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Array> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.count_elementwise(ADD_PER_ELEM * out.len() as u64);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.count_elementwise(ADD_PER_ELEM * out.len() as u64);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.count_elementwise(MUL_PER_ELEM * out.len() as u64);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let out = Array::new(xv.shape().to_vec(), data).expect("shape preserved");
        let per = if shift == 0.0 { MUL_PER_ELEM } else { AFFINE_PER_ELEM };
        self.count_elementwise(per * out.len() as u64);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Param(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        self.count_elementwise(SOFTMAX_PER_ELEM * out.len() as u64);
        Ok(self.push(Array::new(shape, out)?, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// `out[i] = Σ_{j<i} x[j]` along the last axis.
    pub fn exclusive_cumsum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if cols == 0 {
            return Err(Error::Param("exclusive_cumsum on empty axis".into()));
        }
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mut acc = 0.0;
            for j in 0..cols {
                dst[j] = acc;
                acc += src[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.count_elementwise(CUMSUM_PER_ELEM * out.len() as u64);
        Ok(self.push(Array::new(shape, out)?, Op::ExclusiveCumsum { x }, &[x]))
    }

    /// Relaxed categorical sample along the last axis.
    ///
    /// Noise-free mode returns `softmax(logits / tau)`. Otherwise Gumbel noise
    /// is drawn from `rng` and treated as a constant, so gradients reach the
    /// logits only through the deterministic path.
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, rng: &mut RngStream, noise_free: bool) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {tau}")));
        }
        let perturbed = if noise_free {
            logits
        } else {
            let shape = self.shape(logits).to_vec();
            let noise: Vec<f64> = (0..self.value(logits).len()).map(|_| rng.gumbel()).collect();
            let g = self.constant(Array::new(shape, noise)?);
            self.add(logits, g)?
        };
        let scaled = self.scale(perturbed, 1.0 / tau);
        let last = self.shape(scaled).len() - 1;
        self.softmax(scaled, last)
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layer_norm", self.shape(gain), &[cols]));
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = gv[j] * h + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.count_elementwise(LAYER_NORM_PER_ELEM * out.len() as u64);
        Ok(self.push(
            Array::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Array::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.count_elementwise(GELU_PER_ELEM * out.len() as u64);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// `max(x, lo)` elementwise; the gradient passes where `x >= lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(lo)).collect();
        let out = Array::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.count_elementwise(CLAMP_PER_ELEM * out.len() as u64);
        self.push(out, Op::ClampMin { x, lo }, &[x])
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(Error::Index {
                index: label,
                len: lv.len(),
            });
        }
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lv.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs: Vec<f64> = lv.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - lv[label];
        self.count_elementwise(CROSS_ENTROPY_PER_LOGIT * lv.len() as u64);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy { logits, label, probs },
            &[logits],
        ))
    }

    /// Row lookup, e.g. token embeddings.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, cols) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, len: n });
            }
            out.extend_from_slice(tv.row(r));
        }
        Ok(self.push(
            Array::new(vec![rows.len(), cols], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if start + len > cols {
            return Err(Error::Index {
                index: start + len,
                len: cols,
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Array::new(vec![rows, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            Array::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Copy of `base` with one row replaced by `value` (shape `[1, cols]` or `[cols]`).
    pub fn replace_row(&mut self, base: Var, row: usize, value: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("replace_row", base)?;
        if row >= rows {
            return Err(Error::Index { index: row, len: rows });
        }
        if self.value(value).len() != cols {
            return Err(Error::shape("replace_row", self.shape(base), self.shape(value)));
        }
        let mut out = self.value(base).clone();
        out.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(self.value(value).data());
        Ok(self.push(out, Op::ReplaceRow { base, row, value }, &[base, value]))
    }

    /// Row `row` of a matrix as a `[1, cols]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (rows, _) = self.matrix_dims("select_row", x)?;
        if row >= rows {
            return Err(Error::Index { index: row, len: rows });
        }
        let data = self.value(x).row(row).to_vec();
        let cols = data.len();
        Ok(self.push(Array::new(vec![1, cols], data)?, Op::SelectRow { x, row }, &[x]))
    }

    /// Sum over the last axis; a matrix `[r, c]` becomes `[r]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let data: Vec<f64> = xv.data().chunks(cols).map(|c| c.iter().sum()).collect();
        let n = data.len();
        self.count_elementwise(SUM_PER_ELEM * xv.len() as u64);
        self.push(
            Array::vector(data).reshaped(&[n]).expect("vector"),
            Op::SumLast { x },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum();
        self.count_elementwise(SUM_PER_ELEM * xv.len() as u64);
        self.push(Array::scalar(s), Op::Sum { x }, &[x])
    }

    /// `Σ_i weights[i] · items[i]` over same-shaped items.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Param("weighted_sum over no items".into()));
        }
        if self.value(weights).len() != items.len() {
            return Err(Error::shape("weighted_sum", self.shape(weights), &[items.len()]));
        }
        for &it in &items[1..] {
            self.same_shape("weighted_sum", items[0], it)?;
        }
        let w = self.value(weights).data().to_vec();
        let mut out = Array::zeros(self.shape(items[0]));
        for (wi, &it) in w.iter().zip(items) {
            axpy(*wi, self.value(it).data(), out.data_mut());
        }
        self.count_elementwise(2 * (items.len() * out.len()) as u64);
        let mut inputs = items.to_vec();
        inputs.push(weights);
        Ok(self.push(
            out,
            Op::WeightedSum {
                items: items.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }
}

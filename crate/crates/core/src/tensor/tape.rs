//! Operation recording and reverse-mode gradient propagation.
//!
//! Every op validates shapes, computes the forward value, and — when the tape
//! records and some input requires gradients — pushes a backward closure. The
//! entry list is in execution order, so walking it in reverse is a valid
//! reverse topological order. Backward closures first materialize the delta
//! for each input and then accumulate, so shared storage between inputs is
//! safe.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{numel, Result, Tensor, TensorError};

struct Entry {
    #[allow(dead_code)]
    op: &'static str,
    backward: Box<dyn Fn()>,
}

/// Records ops for a single forward pass.
pub struct Tape {
    recording: bool,
    entries: RefCell<Vec<Entry>>,
}

fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

fn want_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape(),
        });
    }
    Ok(())
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape, for training passes.
    pub fn new() -> Tape {
        Tape {
            recording: true,
            entries: RefCell::new(Vec::new()),
        }
    }

    /// A non-recording tape: ops run forward only and outputs never require
    /// gradients. Used for evaluation passes.
    pub fn eval() -> Tape {
        Tape {
            recording: false,
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_entries(&self) -> usize {
        self.entries.borrow().len()
    }

    fn record(&self, op: &'static str, backward: impl Fn() + 'static) {
        self.entries.borrow_mut().push(Entry {
            op,
            backward: Box::new(backward),
        });
    }

    fn fresh(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor]) -> (Tensor, bool) {
        let out = Tensor::from_vec(shape, data).expect("op output shape consistent");
        let needs = self.recording && inputs.iter().any(|t| t.requires_grad());
        if needs {
            let _ = out.clone().with_grad();
        }
        (out, needs)
    }

    /// Propagates gradients from a scalar loss back to every tensor recorded
    /// on this tape. Gradients accumulate across calls until zeroed.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        loss.seed_grad_ones();
        let entries = self.entries.borrow();
        for entry in entries.iter().rev() {
            (entry.backward)();
        }
        Ok(())
    }

    // ---- structural ops ----

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        want_rank("matmul", a, 2)?;
        want_rank("matmul", b, 2)?;
        let (n, k) = (a.rows(), a.cols());
        let (k2, m) = (b.rows(), b.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let out_data = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            matmul_raw(&ad, &bd, n, k, m)
        };
        let (out, needs) = self.fresh(vec![n, m], out_data, &[a, b]);
        if needs {
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            self.record("matmul", move || {
                let Some(gy) = out_h.grad() else { return };
                if a.requires_grad() {
                    // dA = dY . B^T
                    let bd = b.data_ref();
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let g = gy[i * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            let brow = &bd[..];
                            for p in 0..k {
                                da[i * k + p] += g * brow[p * m + j];
                            }
                        }
                    }
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T . dY
                    let ad = a.data_ref();
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += av * gy[i * m + j];
                            }
                        }
                    }
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// `[n,m] -> [m,n]`
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        want_rank("transpose", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        let out_data = {
            let ad = a.data_ref();
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    d[j * n + i] = ad[i * m + j];
                }
            }
            d
        };
        let (out, needs) = self.fresh(vec![m, n], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("transpose", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = gy[j * n + i];
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Elementwise sum. `b` may also be rank-1 `[m]` broadcast over the rows
    /// of a rank-2 `a`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let broadcast = a.rank() == 2 && b.rank() == 1 && b.len() == a.cols();
        if !broadcast && a.shape() != b.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let out_data = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            if broadcast {
                let m = b.len();
                ad.iter()
                    .enumerate()
                    .map(|(i, v)| v + bd[i % m])
                    .collect::<Vec<_>>()
            } else {
                ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
            }
        };
        let (out, needs) = self.fresh(a.shape(), out_data, &[a, b]);
        if needs {
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            self.record("add", move || {
                let Some(gy) = out_h.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&gy);
                }
                if b.requires_grad() {
                    if broadcast {
                        let m = b.len();
                        let mut db = vec![0.0; m];
                        for (i, g) in gy.iter().enumerate() {
                            db[i % m] += g;
                        }
                        b.accumulate_grad(&db);
                    } else {
                        b.accumulate_grad(&gy);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let out_data = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()
        };
        let (out, needs) = self.fresh(a.shape(), out_data, &[a, b]);
        if needs {
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            self.record("mul", move || {
                let Some(gy) = out_h.grad() else { return };
                if a.requires_grad() {
                    let delta: Vec<f64> =
                        gy.iter().zip(b.data_ref().iter()).map(|(g, v)| g * v).collect();
                    a.accumulate_grad(&delta);
                }
                if b.requires_grad() {
                    let delta: Vec<f64> =
                        gy.iter().zip(a.data_ref().iter()).map(|(g, v)| g * v).collect();
                    b.accumulate_grad(&delta);
                }
            });
        }
        Ok(out)
    }

    pub fn mul_scalar(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        let out_data = a.data_ref().iter().map(|v| v * s).collect();
        let (out, needs) = self.fresh(a.shape(), out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("mul_scalar", move || {
                let Some(gy) = out_h.grad() else { return };
                let delta: Vec<f64> = gy.iter().map(|g| g * s).collect();
                a.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let m = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            want_rank("concat_rows", p, 2)?;
            if p.cols() != m {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", p.cols(), m),
                ));
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * m);
        for p in parts {
            data.extend_from_slice(&p.data_ref());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (out, needs) = self.fresh(vec![rows, m], data, &refs);
        if needs {
            let parts: Vec<Tensor> = parts.to_vec();
            let out_h = out.clone();
            self.record("concat_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut offset = 0;
                for p in &parts {
                    let n = p.len();
                    if p.requires_grad() {
                        p.accumulate_grad(&gy[offset..offset + n]);
                    }
                    offset += n;
                }
            });
        }
        Ok(out)
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let n = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            want_rank("concat_cols", p, 2)?;
            if p.rows() != n {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", p.rows(), n),
                ));
            }
            cols += p.cols();
        }
        let mut data = vec![0.0; n * cols];
        let mut col_off = 0;
        for p in parts {
            let pc = p.cols();
            let pd = p.data_ref();
            for i in 0..n {
                data[i * cols + col_off..i * cols + col_off + pc]
                    .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            col_off += pc;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (out, needs) = self.fresh(vec![n, cols], data, &refs);
        if needs {
            let parts: Vec<Tensor> = parts.to_vec();
            let out_h = out.clone();
            self.record("concat_cols", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut col_off = 0;
                for p in &parts {
                    let pc = p.cols();
                    if p.requires_grad() {
                        let mut delta = vec![0.0; n * pc];
                        for i in 0..n {
                            delta[i * pc..(i + 1) * pc]
                                .copy_from_slice(&gy[i * cols + col_off..i * cols + col_off + pc]);
                        }
                        p.accumulate_grad(&delta);
                    }
                    col_off += pc;
                }
            });
        }
        Ok(out)
    }

    /// Row range `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        want_rank("slice_rows", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        if start > end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: n,
            });
        }
        let out_data = a.data_ref()[start * m..end * m].to_vec();
        let (out, needs) = self.fresh(vec![end - start, m], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("slice_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                da[start * m..end * m].copy_from_slice(&gy);
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Column range `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        want_rank("slice_cols", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        if start > end || end > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: m,
            });
        }
        let w = end - start;
        let out_data = {
            let ad = a.data_ref();
            let mut d = vec![0.0; n * w];
            for i in 0..n {
                d[i * w..(i + 1) * w].copy_from_slice(&ad[i * m + start..i * m + end]);
            }
            d
        };
        let (out, needs) = self.fresh(vec![n, w], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("slice_cols", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + start..i * m + end].copy_from_slice(&gy[i * w..(i + 1) * w]);
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != a.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", a.shape(), shape),
            ));
        }
        let (out, needs) = self.fresh(shape, a.data(), &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("reshape", move || {
                let Some(gy) = out_h.grad() else { return };
                a.accumulate_grad(&gy);
            });
        }
        Ok(out)
    }

    /// `out[i, :] = a[idx[i], :]`. Also serves as embedding lookup.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        want_rank("gather_rows", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
        }
        let out_data = {
            let ad = a.data_ref();
            let mut d = Vec::with_capacity(idx.len() * m);
            for &i in idx {
                d.extend_from_slice(&ad[i * m..(i + 1) * m]);
            }
            d
        };
        let (out, needs) = self.fresh(vec![idx.len(), m], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            let idx = idx.to_vec();
            self.record("gather_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..m {
                        da[i * m + c] += gy[r * m + c];
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    // ---- row-wise normalizations ----

    /// Numerically stable softmax over each row of a rank-2 tensor.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        want_rank("softmax_rows", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        let out_data = {
            let ad = a.data_ref();
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                softmax_row(&ad[i * m..(i + 1) * m], &mut d[i * m..(i + 1) * m]);
            }
            d
        };
        let (out, needs) = self.fresh(vec![n, m], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("softmax_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let y = out_h.data_ref();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let row = i * m..(i + 1) * m;
                    let dot: f64 = gy[row.clone()]
                        .iter()
                        .zip(y[row.clone()].iter())
                        .map(|(g, v)| g * v)
                        .sum();
                    for j in 0..m {
                        let p = i * m + j;
                        da[p] = y[p] * (gy[p] - dot);
                    }
                }
                drop(y);
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        want_rank("log_softmax_rows", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        let out_data = {
            let ad = a.data_ref();
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                let row = &ad[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..m {
                    d[i * m + j] = row[j] - lse;
                }
            }
            d
        };
        let (out, needs) = self.fresh(vec![n, m], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("log_softmax_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let y = out_h.data_ref();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let gsum: f64 = gy[i * m..(i + 1) * m].iter().sum();
                    for j in 0..m {
                        let p = i * m + j;
                        da[p] = gy[p] - y[p].exp() * gsum;
                    }
                }
                drop(y);
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Per-row normalization with learned affine parameters (`gamma`, `beta`
    /// rank-1 of length `cols`).
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        want_rank("layer_norm", x, 2)?;
        let (n, m) = (x.rows(), x.cols());
        if gamma.len() != m || beta.len() != m {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} vs {} columns",
                    gamma.shape(),
                    beta.shape(),
                    m
                ),
            ));
        }
        let mut normalized = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let out_data = {
            let xd = x.data_ref();
            let gd = gamma.data_ref();
            let bd = beta.data_ref();
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                let row = &xd[i * m..(i + 1) * m];
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..m {
                    let xn = (row[j] - mean) * istd;
                    normalized[i * m + j] = xn;
                    d[i * m + j] = gd[j] * xn + bd[j];
                }
            }
            d
        };
        let (out, needs) = self.fresh(vec![n, m], out_data, &[x, gamma, beta]);
        if needs {
            let (x, gamma, beta, out_h) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record("layer_norm", move || {
                let Some(gy) = out_h.grad() else { return };
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            dg[j] += gy[i * m + j] * normalized[i * m + j];
                        }
                    }
                    gamma.accumulate_grad(&dg);
                }
                if beta.requires_grad() {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += gy[i * m + j];
                        }
                    }
                    beta.accumulate_grad(&db);
                }
                if x.requires_grad() {
                    let gd = gamma.data_ref();
                    let mut dx = vec![0.0; n * m];
                    let mf = m as f64;
                    for i in 0..n {
                        // dxhat = gy * gamma; dx via the standard layernorm rule
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xn = 0.0;
                        for j in 0..m {
                            let dxh = gy[i * m + j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xn += dxh * normalized[i * m + j];
                        }
                        for j in 0..m {
                            let dxh = gy[i * m + j] * gd[j];
                            dx[i * m + j] = inv_std[i]
                                * (dxh - sum_dxhat / mf - normalized[i * m + j] * sum_dxhat_xn / mf);
                        }
                    }
                    drop(gd);
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    // ---- elementwise nonlinearities ----

    /// GELU, tanh approximation (the BERT/GPT form).
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let xs = a.data();
        let out_data: Vec<f64> = xs
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let (out, needs) = self.fresh(a.shape(), out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("gelu", move || {
                let Some(gy) = out_h.grad() else { return };
                let delta: Vec<f64> = xs
                    .iter()
                    .zip(gy.iter())
                    .map(|(&x, &g)| {
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        g * d
                    })
                    .collect();
                a.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let out_data: Vec<f64> = a.data_ref().iter().map(|v| v.tanh()).collect();
        let (out, needs) = self.fresh(a.shape(), out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("tanh", move || {
                let Some(gy) = out_h.grad() else { return };
                let y = out_h.data();
                let delta: Vec<f64> = gy.iter().zip(y.iter()).map(|(g, v)| g * (1.0 - v * v)).collect();
                a.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    /// Inverted dropout: in train mode keeps each element with probability
    /// `1 - p` and scales by `1/(1-p)`, so eval mode is the identity.
    pub fn dropout(&self, a: &Tensor, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("p={p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a.clone());
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let out_data: Vec<f64> = a
            .data_ref()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let (out, needs) = self.fresh(a.shape(), out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("dropout", move || {
                let Some(gy) = out_h.grad() else { return };
                let delta: Vec<f64> = gy.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                a.accumulate_grad(&delta);
            });
        }
        Ok(out)
    }

    // ---- reductions ----

    /// Column means: `[n,m] -> [1,m]`.
    pub fn mean_rows(&self, a: &Tensor) -> Result<Tensor> {
        want_rank("mean_rows", a, 2)?;
        let (n, m) = (a.rows(), a.cols());
        if n == 0 {
            return Err(shape_err("mean_rows", "empty input".into()));
        }
        let out_data = {
            let ad = a.data_ref();
            let mut d = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    d[j] += ad[i * m + j];
                }
            }
            for v in d.iter_mut() {
                *v /= n as f64;
            }
            d
        };
        let (out, needs) = self.fresh(vec![1, m], out_data, &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            self.record("mean_rows", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = gy[j] / n as f64;
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data_ref().iter().sum();
        let (out, needs) = self.fresh(Vec::new(), vec![total], &[a]);
        if needs {
            let (a, out_h) = (a.clone(), out.clone());
            let n = a.len();
            self.record("sum_all", move || {
                let Some(gy) = out_h.grad() else { return };
                a.accumulate_grad(&vec![gy[0]; n]);
            });
        }
        Ok(out)
    }

    /// `-(1/n) * sum_i logp[i, idx[i]]`: the cross-entropy reducer over
    /// row-wise log-probabilities.
    pub fn negative_pick_mean(&self, logp: &Tensor, idx: &[usize]) -> Result<Tensor> {
        want_rank("negative_pick_mean", logp, 2)?;
        let (n, m) = (logp.rows(), logp.cols());
        if idx.len() != n {
            return Err(shape_err(
                "negative_pick_mean",
                format!("{} indices for {} rows", idx.len(), n),
            ));
        }
        for &j in idx {
            if j >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "negative_pick_mean",
                    index: j,
                    bound: m,
                });
            }
        }
        let total = {
            let d = logp.data_ref();
            -idx.iter()
                .enumerate()
                .map(|(i, &j)| d[i * m + j])
                .sum::<f64>()
                / n as f64
        };
        let (out, needs) = self.fresh(Vec::new(), vec![total], &[logp]);
        if needs {
            let (logp, out_h) = (logp.clone(), out.clone());
            let idx = idx.to_vec();
            self.record("negative_pick_mean", move || {
                let Some(gy) = out_h.grad() else { return };
                let mut da = vec![0.0; n * m];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * m + j] = -gy[0] / n as f64;
                }
                logp.accumulate_grad(&da);
            });
        }
        Ok(out)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_known_case() {
        let tape = Tape::new();
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let tape = Tape::new();
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_grad();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_product_gradients() {
        let tape = Tape::new();
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]).with_grad();
        let y = t2(1, 3, vec![4.0, 5.0, 6.0]).with_grad();
        let prod = tape.mul(&x, &y).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(y.grad().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = t2(1, 2, vec![1.0, 2.0]).with_grad();
        let y = tape.mul_scalar(&x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let tape = Tape::eval();
        let x = t2(1, 3, vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::eval();
        let x = t2(2, 4, vec![0.3, -1.0, 2.0, 0.7, 5.0, 5.0, 5.0, 5.0]);
        let y = tape.softmax_rows(&x).unwrap();
        let d = y.data();
        for i in 0..2 {
            let s: f64 = d[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::eval();
        let x = t2(1, 4, vec![0.1, -0.5, 1.3, 2.0]);
        let sm = tape.softmax_rows(&x).unwrap().data();
        let lsm = tape.log_softmax_rows(&x).unwrap().data();
        for (a, b) in sm.iter().zip(lsm.iter()) {
            assert!((a.ln() - b).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let tape = Tape::eval();
        let x = t2(1, 4, vec![3.0; 4]);
        let gamma = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_fixes_origin() {
        let tape = Tape::eval();
        let x = t2(1, 1, vec![0.0]);
        assert_eq!(tape.gelu(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let tape = Tape::eval();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(&x, 0.5, false, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_p_zero_is_identity_in_train() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(&x, 0.0, true, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_train_preserves_expectation() {
        let tape = Tape::eval();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x = Tensor::from_vec(vec![1, n], vec![1.0; n]).unwrap();
        let y = tape.dropout(&x, 0.3, true, &mut rng).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let tape = Tape::new();
        let table = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let picked = tape.gather_rows(&table, &[1, 1, 0]).unwrap();
        assert_eq!(picked.data(), vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum_all(&picked).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn eval_tape_records_nothing() {
        let tape = Tape::eval();
        let x = t2(1, 2, vec![1.0, 2.0]).with_grad();
        let _ = tape.mul_scalar(&x, 3.0).unwrap();
        assert_eq!(tape.num_entries(), 0);
    }

    #[test]
    fn negative_pick_mean_matches_hand_value() {
        let tape = Tape::eval();
        let logp = t2(2, 2, vec![-0.5, -1.5, -2.0, -0.25]);
        let loss = tape.negative_pick_mean(&logp, &[0, 1]).unwrap();
        assert!((loss.item() - (0.5 + 0.25) / 2.0).abs() < 1e-15);
    }
}

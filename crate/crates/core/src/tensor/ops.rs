//! Forward and backward implementations for every op on the tape.

use super::{check_finite, shape_err, Tape, Tensor, TensorError, TensorResult};

use rand::rngs::StdRng;
use rand::Rng;

// Raw matmul kernels, f64 accumulation throughout.

/// out[m,n] = a[m,k] * b[k,n]
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk] as f64;
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                row[j] += a_ik * b_row[j] as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// out[m,n] = a[m,k] * b[n,k]^T  (dot products of contiguous rows)
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0f64;
            for kk in 0..k {
                acc += a_row[kk] as f64 * b_row[kk] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// out[m,n] = a[k,m]^T * b[k,n]
fn mm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f64; m * n];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let a_ki = a_row[i] as f64;
            if a_ki == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += a_ki * b_row[j] as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn dims2(t: &Tensor, op: &'static str) -> TensorResult<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected 2-D, got {other:?}"))),
    }
}

impl Tape {
    /// 2-D matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (m, k) = dims2(a, "matmul")?;
        let (k2, n) = dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let data = mm_nn(&a.data(), &b.data(), m, k, n);
        check_finite("matmul", &data)?;
        let out = Tensor::new(vec![m, n], data, a.requires_grad() || b.requires_grad());
        if self.should_record(&[a, b]) {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    if a.requires_grad() {
                        a.accumulate_grad(&mm_nt(&dout, &b.data(), m, n, k));
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(&mm_tn(&a.data(), &dout, m, k, n));
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise addition; `b` may be rank-1 matching `a`'s last dim
    /// (a row-broadcast bias).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast("add", a, b, |x, y| x + y, |_x, _y| (1.0, 1.0))
    }

    /// Elementwise product with the same broadcast rule as `add`.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f32, f32) -> f32,
        df: fn(f32, f32) -> (f32, f32),
    ) -> TensorResult<Tensor> {
        let broadcast = if a.shape() == b.shape() {
            false
        } else if b.shape().len() == 1 && a.shape().last() == Some(&b.len()) {
            true
        } else {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        };
        let cols = *a.shape().last().unwrap_or(&1);
        let data: Vec<f32> = {
            let ad = a.data();
            let bd = b.data();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, if broadcast { bd[i % cols] } else { bd[i] }))
                .collect()
        };
        check_finite(op, &data)?;
        let out = Tensor::new(
            a.shape().to_vec(),
            data,
            a.requires_grad() || b.requires_grad(),
        );
        if self.should_record(&[a, b]) {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let ad = a.to_vec();
                    let bd = b.to_vec();
                    if a.requires_grad() {
                        let da: Vec<f32> = dout
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| {
                                let y = if broadcast { bd[i % cols] } else { bd[i] };
                                g * df(ad[i], y).0
                            })
                            .collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        if broadcast {
                            let mut db = vec![0f64; cols];
                            for (i, &g) in dout.iter().enumerate() {
                                db[i % cols] += (g * df(ad[i], bd[i % cols]).1) as f64;
                            }
                            let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                            b.accumulate_grad(&db);
                        } else {
                            let db: Vec<f32> = dout
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| g * df(ad[i], bd[i]).1)
                                .collect();
                            b.accumulate_grad(&db);
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> TensorResult<Tensor> {
        let data: Vec<f32> = a.data().iter().map(|&x| (x as f64 * c) as f32).collect();
        check_finite("scale", &data)?;
        let out = Tensor::new(a.shape().to_vec(), data, a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let da: Vec<f32> = dout.iter().map(|&g| (g as f64 * c) as f32).collect();
                    a.accumulate_grad(&da);
                }
            }));
        }
        Ok(out)
    }

    fn unary(
        &self,
        op: &'static str,
        a: &Tensor,
        f: fn(f32) -> f32,
        df: fn(f32) -> f32,
    ) -> TensorResult<Tensor> {
        let data: Vec<f32> = a.data().iter().map(|&x| f(x)).collect();
        check_finite(op, &data)?;
        let out = Tensor::new(a.shape().to_vec(), data, a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let ad = a.to_vec();
                    let da: Vec<f32> =
                        dout.iter().zip(&ad).map(|(&g, &x)| g * df(x)).collect();
                    a.accumulate_grad(&da);
                }
            }));
        }
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor) -> TensorResult<Tensor> {
        self.unary("relu", a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: &Tensor) -> TensorResult<Tensor> {
        fn sig(x: f32) -> f32 {
            (1.0 / (1.0 + (-x as f64).exp())) as f32
        }
        self.unary("sigmoid", a, sig, |x| {
            let s = sig(x);
            s * (1.0 - s)
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self, a: &Tensor) -> TensorResult<Tensor> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        fn fwd(x: f32) -> f32 {
            let x = x as f64;
            let u = C * (x + 0.044715 * x * x * x);
            (0.5 * x * (1.0 + u.tanh())) as f32
        }
        fn bwd(x: f32) -> f32 {
            let x = x as f64;
            let u = C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = C * (1.0 + 3.0 * 0.044715 * x * x);
            (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
        }
        self.unary("gelu", a, fwd, bwd)
    }

    pub fn exp(&self, a: &Tensor) -> TensorResult<Tensor> {
        fn fwd(x: f32) -> f32 {
            (x as f64).exp() as f32
        }
        self.unary("exp", a, fwd, fwd)
    }

    /// Mean of `pos_weight * y * softplus(-l) + (1 - y) * softplus(l)` over
    /// unmasked entries: binary cross-entropy on logits with a positive-class
    /// weight, computed in stable form.
    pub fn weighted_bce_with_logits(
        &self,
        logits: &Tensor,
        targets: &[f32],
        pos_weight: f64,
        mask: &[bool],
    ) -> TensorResult<Tensor> {
        if targets.len() != logits.len() || mask.len() != logits.len() {
            return Err(shape_err(
                "weighted_bce_with_logits",
                format!(
                    "logits {}, targets {}, mask {}",
                    logits.len(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        fn softplus(x: f64) -> f64 {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        }
        fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let ld = logits.data();
        let mut total = 0f64;
        for i in 0..ld.len() {
            if !mask[i] {
                continue;
            }
            let l = ld[i] as f64;
            let y = targets[i] as f64;
            total += pos_weight * y * softplus(-l) + (1.0 - y) * softplus(l);
        }
        drop(ld);
        let out = Tensor::new(vec![1], vec![(total / count) as f32], logits.requires_grad());
        check_finite("weighted_bce_with_logits", &out.data())?;
        if self.should_record(&[logits]) {
            let (logits, out) = (logits.clone(), out.clone());
            let targets = targets.to_vec();
            let mask = mask.to_vec();
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let ld = logits.to_vec();
                    let g = dout[0] as f64 / count;
                    let dl: Vec<f32> = ld
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| {
                            if !mask[i] {
                                return 0.0;
                            }
                            let l = l as f64;
                            let y = targets[i] as f64;
                            (g * (-pos_weight * y * sigmoid(-l) + (1.0 - y) * sigmoid(l))) as f32
                        })
                        .collect();
                    logits.accumulate_grad(&dl);
                }
            }));
        }
        Ok(out)
    }

    pub fn sum(&self, a: &Tensor) -> TensorResult<Tensor> {
        let total: f64 = a.data().iter().map(|&x| x as f64).sum();
        let out = Tensor::new(vec![1], vec![total as f32], a.requires_grad());
        check_finite("sum", &out.data())?;
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    a.accumulate_grad(&vec![dout[0]; a.len()]);
                }
            }));
        }
        Ok(out)
    }

    pub fn mean(&self, a: &Tensor) -> TensorResult<Tensor> {
        let n = a.len().max(1) as f64;
        let total: f64 = a.data().iter().map(|&x| x as f64).sum();
        let out = Tensor::new(vec![1], vec![(total / n) as f32], a.requires_grad());
        check_finite("mean", &out.data())?;
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    a.accumulate_grad(&vec![(dout[0] as f64 / n) as f32; a.len()]);
                }
            }));
        }
        Ok(out)
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> TensorResult<Tensor> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} into {shape:?}", a.shape()),
            ));
        }
        let out = Tensor::new(shape.to_vec(), a.to_vec(), a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    a.accumulate_grad(&dout);
                }
            }));
        }
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor) -> TensorResult<Tensor> {
        let (r, c) = dims2(a, "transpose")?;
        let ad = a.to_vec();
        let mut data = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data, a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut da = vec![0f32; r * c];
                    for j in 0..c {
                        for i in 0..r {
                            da[i * c + j] = dout[j * r + i];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }));
        }
        Ok(out)
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> TensorResult<Tensor> {
        let (r, c) = dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::BadIndex {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let ad = a.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        drop(ad);
        let out = Tensor::new(vec![r, len], data, a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut da = vec![0f32; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&dout[i * len..(i + 1) * len]);
                    }
                    a.accumulate_grad(&da);
                }
            }));
        }
        Ok(out)
    }

    pub fn concat_cols(&self, parts: &[&Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (r, _) = dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", "row counts differ".into()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::new(vec![r, total], data, requires);
        if self.enabled.get() && requires {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let out_c = out.clone();
            self.record(Box::new(move || {
                if let Some(dout) = out_c.grad() {
                    let mut offset = 0;
                    for p in &parts {
                        let w = p.shape()[1];
                        if p.requires_grad() {
                            let mut dp = vec![0f32; r * w];
                            for i in 0..r {
                                dp[i * w..(i + 1) * w].copy_from_slice(
                                    &dout[i * total + offset..i * total + offset + w],
                                );
                            }
                            p.accumulate_grad(&dp);
                        }
                        offset += w;
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, c) = dims2(parts[0], "concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = dims2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", "column counts differ".into()));
            }
            rows.push(pr);
        }
        let total: usize = rows.iter().sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::new(vec![total, c], data, requires);
        if self.enabled.get() && requires {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let out_c = out.clone();
            self.record(Box::new(move || {
                if let Some(dout) = out_c.grad() {
                    let mut offset = 0;
                    for p in &parts {
                        let span = p.len();
                        if p.requires_grad() {
                            p.accumulate_grad(&dout[offset..offset + span]);
                        }
                        offset += span;
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> TensorResult<Tensor> {
        let (r, c) = dims2(a, "slice_rows")?;
        if start + len > r {
            return Err(TensorError::BadIndex {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = a.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data, a.requires_grad());
        if self.should_record(&[a]) {
            let (a, out) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut da = vec![0f32; r * c];
                    da[start * c..(start + len) * c].copy_from_slice(&dout);
                    a.accumulate_grad(&da);
                }
            }));
        }
        Ok(out)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&self, table: &Tensor, ids: &[usize]) -> TensorResult<Tensor> {
        let (v, h) = dims2(table, "embedding")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::BadIndex {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
        }
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            data.extend_from_slice(&td[id * h..(id + 1) * h]);
        }
        drop(td);
        let out = Tensor::new(vec![ids.len(), h], data, table.requires_grad());
        if self.should_record(&[table]) {
            let (table, out) = (table.clone(), out.clone());
            let ids = ids.to_vec();
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut dt = vec![0f32; v * h];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            dt[id * h + j] += dout[row * h + j];
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }));
        }
        Ok(out)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> TensorResult<Tensor> {
        let (r, c) = dims2(x, "layer_norm")?;
        if gamma.len() != c || beta.len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("gain/bias {}/{} vs {c} columns", gamma.len(), beta.len()),
            ));
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0f32; r * c];
        let mut xhat = vec![0f32; r * c];
        let mut inv_std = vec![0f64; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var: f64 = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = ((row[j] as f64 - mean) * istd) as f32;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        check_finite("layer_norm", &data)?;
        let requires = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = Tensor::new(vec![r, c], data, requires);
        if self.should_record(&[x, gamma, beta]) {
            let (x, gamma, beta, out) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let gd = gamma.to_vec();
                    if gamma.requires_grad() {
                        let mut dg = vec![0f64; c];
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += dout[i * c + j] as f64 * xhat[i * c + j] as f64;
                            }
                        }
                        let dg: Vec<f32> = dg.into_iter().map(|v| v as f32).collect();
                        gamma.accumulate_grad(&dg);
                    }
                    if beta.requires_grad() {
                        let mut db = vec![0f64; c];
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += dout[i * c + j] as f64;
                            }
                        }
                        let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                        beta.accumulate_grad(&db);
                    }
                    if x.requires_grad() {
                        let mut dx = vec![0f32; r * c];
                        for i in 0..r {
                            let istd = inv_std[i];
                            let mut sum_dxhat = 0f64;
                            let mut sum_dxhat_xhat = 0f64;
                            for j in 0..c {
                                let dxh = dout[i * c + j] as f64 * gd[j] as f64;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[i * c + j] as f64;
                            }
                            for j in 0..c {
                                let dxh = dout[i * c + j] as f64 * gd[j] as f64;
                                let xh = xhat[i * c + j] as f64;
                                dx[i * c + j] = (istd
                                    * (dxh - sum_dxhat / c as f64 - xh * sum_dxhat_xhat / c as f64))
                                    as f32;
                            }
                        }
                        x.accumulate_grad(&dx);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Row-wise softmax restricted to unmasked entries; masked entries get
    /// probability exactly zero. A row with nothing unmasked stays all-zero.
    pub fn masked_softmax_rows(&self, x: &Tensor, mask: &[bool]) -> TensorResult<Tensor> {
        let (r, c) = dims2(x, "masked_softmax_rows")?;
        if mask.len() != r * c {
            return Err(shape_err(
                "masked_softmax_rows",
                format!("mask {} vs {}", mask.len(), r * c),
            ));
        }
        let xd = x.data();
        let mut data = vec![0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m_row = &mask[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if m_row[j] {
                    max = max.max(row[j] as f64);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0f64;
            for j in 0..c {
                if m_row[j] {
                    denom += ((row[j] as f64) - max).exp();
                }
            }
            for j in 0..c {
                if m_row[j] {
                    data[i * c + j] = ((((row[j] as f64) - max).exp()) / denom) as f32;
                }
            }
        }
        drop(xd);
        check_finite("masked_softmax_rows", &data)?;
        let out = Tensor::new(vec![r, c], data.clone(), x.requires_grad());
        if self.should_record(&[x]) {
            let (x, out) = (x.clone(), out.clone());
            let probs = data;
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut dx = vec![0f32; r * c];
                    for i in 0..r {
                        let mut dot = 0f64;
                        for j in 0..c {
                            dot += dout[i * c + j] as f64 * probs[i * c + j] as f64;
                        }
                        for j in 0..c {
                            let p = probs[i * c + j] as f64;
                            dx[i * c + j] = (p * (dout[i * c + j] as f64 - dot)) as f32;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }));
        }
        Ok(out)
    }

    pub fn softmax_rows(&self, x: &Tensor) -> TensorResult<Tensor> {
        let mask = vec![true; x.len()];
        self.masked_softmax_rows(x, &mask)
    }

    /// Row-wise log-softmax over unmasked entries; masked entries yield 0
    /// in the output and must never be picked.
    pub fn masked_log_softmax_rows(&self, x: &Tensor, mask: &[bool]) -> TensorResult<Tensor> {
        let (r, c) = dims2(x, "masked_log_softmax_rows")?;
        if mask.len() != r * c {
            return Err(shape_err(
                "masked_log_softmax_rows",
                format!("mask {} vs {}", mask.len(), r * c),
            ));
        }
        let xd = x.data();
        let mut data = vec![0f32; r * c];
        let mut probs = vec![0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m_row = &mask[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if m_row[j] {
                    max = max.max(row[j] as f64);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0f64;
            for j in 0..c {
                if m_row[j] {
                    denom += ((row[j] as f64) - max).exp();
                }
            }
            let log_denom = denom.ln();
            for j in 0..c {
                if m_row[j] {
                    let shifted = row[j] as f64 - max;
                    data[i * c + j] = (shifted - log_denom) as f32;
                    probs[i * c + j] = ((shifted.exp()) / denom) as f32;
                }
            }
        }
        drop(xd);
        check_finite("masked_log_softmax_rows", &data)?;
        let out = Tensor::new(vec![r, c], data, x.requires_grad());
        if self.should_record(&[x]) {
            let (x, out) = (x.clone(), out.clone());
            let mask = mask.to_vec();
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut dx = vec![0f32; r * c];
                    for i in 0..r {
                        let mut total = 0f64;
                        for j in 0..c {
                            if mask[i * c + j] {
                                total += dout[i * c + j] as f64;
                            }
                        }
                        for j in 0..c {
                            if mask[i * c + j] {
                                dx[i * c + j] = (dout[i * c + j] as f64
                                    - probs[i * c + j] as f64 * total)
                                    as f32;
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }));
        }
        Ok(out)
    }

    /// Shannon entropy of each row's masked softmax, in nats: out is [r, 1].
    pub fn entropy_rows(&self, x: &Tensor, mask: &[bool]) -> TensorResult<Tensor> {
        let (r, c) = dims2(x, "entropy_rows")?;
        let probs_t = self.with_grad_disabled(|t| t.masked_softmax_rows(x, mask))?;
        let probs = probs_t.to_vec();
        let mut data = vec![0f32; r];
        for i in 0..r {
            let mut h = 0f64;
            for j in 0..c {
                let p = probs[i * c + j] as f64;
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            data[i] = h as f32;
        }
        check_finite("entropy_rows", &data)?;
        let out = Tensor::new(vec![r, 1], data.clone(), x.requires_grad());
        if self.should_record(&[x]) {
            let (x, out) = (x.clone(), out.clone());
            let entropies = data;
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut dx = vec![0f32; r * c];
                    for i in 0..r {
                        let h = entropies[i] as f64;
                        for j in 0..c {
                            let p = probs[i * c + j] as f64;
                            if p > 0.0 {
                                dx[i * c + j] =
                                    (-(dout[i] as f64) * p * (p.ln() + h)) as f32;
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }));
        }
        Ok(out)
    }

    /// One element per row: out[i] = x[i, idx[i]].
    pub fn pick_per_row(&self, x: &Tensor, idx: &[usize]) -> TensorResult<Tensor> {
        let (r, c) = dims2(x, "pick_per_row")?;
        if idx.len() != r {
            return Err(shape_err(
                "pick_per_row",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(TensorError::BadIndex {
                    op: "pick_per_row",
                    index: j,
                    bound: c,
                });
            }
            data.push(xd[i * c + j]);
        }
        drop(xd);
        let out = Tensor::new(vec![r, 1], data, x.requires_grad());
        if self.should_record(&[x]) {
            let (x, out) = (x.clone(), out.clone());
            let idx = idx.to_vec();
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let mut dx = vec![0f32; r * c];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * c + j] = dout[i];
                    }
                    x.accumulate_grad(&dx);
                }
            }));
        }
        Ok(out)
    }

    /// Mean cross-entropy of integer targets under a (masked) softmax.
    pub fn cross_entropy(
        &self,
        logits: &Tensor,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> TensorResult<Tensor> {
        let full;
        let mask = match mask {
            Some(m) => m,
            None => {
                full = vec![true; logits.len()];
                &full
            }
        };
        let logp = self.masked_log_softmax_rows(logits, mask)?;
        let picked = self.pick_per_row(&logp, targets)?;
        let mean = self.mean(&picked)?;
        self.scale(&mean, -1.0)
    }

    /// 2-D convolution over a [C, H, W] input with an [O, C, kh, kw] kernel,
    /// floor output sizing: out = (in + 2p - k) / s + 1.
    pub fn conv2d(
        &self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> TensorResult<Tensor> {
        let (ci, h, w) = match input.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(shape_err("conv2d", format!("input {other:?}, want [C,H,W]")))
            }
        };
        let (o, ck, kh, kw) = match weight.shape() {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            other => {
                return Err(shape_err(
                    "conv2d",
                    format!("weight {other:?}, want [O,C,kh,kw]"),
                ))
            }
        };
        if ck != ci || bias.len() != o {
            return Err(shape_err(
                "conv2d",
                format!("channels {ci} vs {ck}, bias {}", bias.len()),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {padding}"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let xd = input.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut data = vec![0f32; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc] as f64;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[ic * h * w + iy as usize * w + ix as usize] as f64
                                    * wd[((oc * ci + ic) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    data[oc * oh * ow + oy * ow + ox] = acc as f32;
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        check_finite("conv2d", &data)?;
        let requires = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let out = Tensor::new(vec![o, oh, ow], data, requires);
        if self.should_record(&[input, weight, bias]) {
            let (input, weight, bias, out) =
                (input.clone(), weight.clone(), bias.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let xd = input.to_vec();
                    let wd = weight.to_vec();
                    if bias.requires_grad() {
                        let mut db = vec![0f64; o];
                        for oc in 0..o {
                            for v in &dout[oc * oh * ow..(oc + 1) * oh * ow] {
                                db[oc] += *v as f64;
                            }
                        }
                        let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                        bias.accumulate_grad(&db);
                    }
                    let mut dw = vec![0f64; o * ci * kh * kw];
                    let mut dx = vec![0f64; ci * h * w];
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dout[oc * oh * ow + oy * ow + ox] as f64;
                                if g == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ic * h * w + iy as usize * w + ix as usize;
                                            let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            dw[wi] += g * xd[xi] as f64;
                                            dx[xi] += g * wd[wi] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if weight.requires_grad() {
                        let dw: Vec<f32> = dw.into_iter().map(|v| v as f32).collect();
                        weight.accumulate_grad(&dw);
                    }
                    if input.requires_grad() {
                        let dx: Vec<f32> = dx.into_iter().map(|v| v as f32).collect();
                        input.accumulate_grad(&dx);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(&self, x: &Tensor, rate: f64, rng: &mut StdRng) -> TensorResult<Tensor> {
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = 1.0 - rate;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| {
                if rng.gen_bool(keep) {
                    (1.0 / keep) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f32> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data, x.requires_grad());
        if self.should_record(&[x]) {
            let (x, out) = (x.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(dout) = out.grad() {
                    let dx: Vec<f32> = dout.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                    x.accumulate_grad(&dx);
                }
            }));
        }
        Ok(out)
    }

    /// Run a closure with recording temporarily disabled.
    pub fn with_grad_disabled<T>(
        &self,
        f: impl FnOnce(&Tape) -> TensorResult<T>,
    ) -> TensorResult<T> {
        let was = self.enabled.get();
        self.enabled.set(false);
        let result = f(self);
        self.enabled.set(was);
        result
    }
}

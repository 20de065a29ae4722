use crate::error::{shape_err, Result};

/// Lower bound applied to every reported standard deviation.
pub const SIGMA_FLOOR: f32 = 1e-5;

/// Row-major f32 tensor. `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Build a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err("dims2", format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn vstack(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.dims2()?.1,
            None => return Err(shape_err("vstack", "no parts")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(shape_err("vstack", format!("column count {c} != {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(shape_err(
                "column_slice",
                format!("[{start}, {}) exceeds {c} columns", start + width),
            ));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Self {
            shape: vec![r, width],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|x| x * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a[m×k] · b[k×n]`, accumulated in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_raw(&a.data, &b.data, m, k, n),
    })
}

/// Row-major `[m×k]·[k×n]`.
fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(m * n);
    matmul_rows(a, b, m, k, n, |row| out.extend(row.iter().map(|&x| x as f32)));
    out
}

/// Core of [`matmul`]: hands each finished output row, still in f64, to
/// `emit` in row order.
pub(crate) fn matmul_rows(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    mut emit: impl FnMut(&[f64]),
) {
    const R: usize = 4;
    let mut acc = vec![0f64; R * n];
    for i0 in (0..m).step_by(R) {
        let rows = R.min(m - i0);
        let mut j0 = 0;
        if rows == R {
            // 4×8 register tile; each entry sums over p in order.
            let a_rows = &a[i0 * k..(i0 + R) * k];
            let (a0, rest) = a_rows.split_at(k);
            let (a1, rest) = rest.split_at(k);
            let (a2, a3) = rest.split_at(k);
            while j0 + 8 <= n {
                let mut c = [[0f64; 8]; R];
                let a_cols = a0.iter().zip(a1).zip(a2.iter().zip(a3));
                for (((&x0, &x1), (&x2, &x3)), b_row) in a_cols.zip(b.chunks_exact(n)) {
                    let bp: &[f32; 8] = b_row[j0..j0 + 8].try_into().unwrap();
                    let ar = [x0, x1, x2, x3].map(f64::from);
                    for (cr, &ar) in c.iter_mut().zip(&ar) {
                        for (x, &bj) in cr.iter_mut().zip(bp) {
                            *x += ar * f64::from(bj);
                        }
                    }
                }
                for (r, cr) in c.iter().enumerate() {
                    acc[r * n + j0..r * n + j0 + 8].copy_from_slice(cr);
                }
                j0 += 8;
            }
        }
        // Leftover columns, or every column of a short row block.
        if j0 < n {
            for r in 0..rows {
                let row_acc = &mut acc[r * n + j0..(r + 1) * n];
                row_acc.iter_mut().for_each(|x| *x = 0.0);
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (&ai, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                    let ai = f64::from(ai);
                    for (s, &bj) in row_acc.iter_mut().zip(&b_row[j0..]) {
                        *s += ai * f64::from(bj);
                    }
                }
            }
        }
        for r in 0..rows {
            emit(&acc[r * n..(r + 1) * n]);
        }
    }
}

/// `eˣ` for `x ≤ 0` in single precision (within about 1 ulp), written so
/// callers' loops vectorize. Results below `e⁻⁸⁷` are clamped to it.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.max(-87.0);
    let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p.mul_add(r, 1.398_2e-3);
    let p = p.mul_add(r, 8.333_452e-3);
    let p = p.mul_add(r, 4.166_579_6e-2);
    let p = p.mul_add(r, 1.666_666_5e-1);
    let p = p.mul_add(r, 0.5);
    let y = p.mul_add(r * r, r) + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(
            "matmul_transposed",
            format!("[{m}x{k}] x [{n}x{k2}]ᵀ"),
        ));
    }
    let bt = b.transpose()?;
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_raw(&a.data, &bt.data, m, k, n),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if c == 0 {
        return Err(shape_err("softmax_rows", "zero columns"));
    }
    let mut out = Vec::with_capacity(r * c);
    let mut buf = vec![0f64; c];
    for i in 0..r {
        let row = m.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f64;
        for (b, &x) in buf.iter_mut().zip(row) {
            *b = (f64::from(x) - f64::from(max)).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|&e| (e / sum) as f32));
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Per-column population mean and standard deviation of `f[tokens×channels]`.
/// Sigma is floored at [`SIGMA_FLOOR`].
pub fn moments(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c) = f.dims2()?;
    if n == 0 {
        return Err(shape_err("moments", "no tokens"));
    }
    let mut mean = vec![0f64; c];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(f.row(i)) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; c];
    for i in 0..n {
        for ((v, &x), &m) in var.iter_mut().zip(f.row(i)).zip(&mean) {
            let d = f64::from(x) - m;
            *v += d * d;
        }
    }
    let sigma = var
        .iter()
        .map(|v| ((v / n as f64).sqrt() as f32).max(SIGMA_FLOOR))
        .collect();
    Ok((
        Tensor {
            shape: vec![c],
            data: mean.into_iter().map(|m| m as f32).collect(),
        },
        Tensor {
            shape: vec![c],
            data: sigma,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_nonpositive_tracks_f64() {
        let mut worst = 0f64;
        for i in 0..=870_000 {
            let x = -(i as f32) * 1e-4;
            let want = f64::from(x).exp();
            let got = f64::from(exp_nonpositive(x));
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 3e-7, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-200.0) < 1e-37);
    }

    #[test]
    fn matmul_identity_scalar_and_2x2() {
        let i2 = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Tensor::from_rows(&[[1.5, -2.0], [3.0, 0.25]]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);

        let s = matmul(&Tensor::from_rows(&[[2.0]]), &Tensor::from_rows(&[[3.0]])).unwrap();
        assert_eq!(s.data(), &[6.0]);

        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &b).is_err());
        assert!(matmul_transposed(&a, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn matmul_transposed_agrees_with_explicit_transpose() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let b = Tensor::from_rows(&[[0.5, 1.0, -1.0], [2.0, 0.0, 1.0], [1.0, 1.0, 1.0]]);
        let direct = matmul_transposed(&a, &b).unwrap();
        let via = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(direct, via);
    }

    #[test]
    fn softmax_examples() {
        let z = softmax_rows(&Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(z.data(), &[0.25; 4]);

        let one = softmax_rows(&Tensor::from_rows(&[[-7.0], [42.0]])).unwrap();
        assert_eq!(one.data(), &[1.0, 1.0]);

        let r = softmax_rows(&Tensor::from_rows(&[[0.0, 3f32.ln()]])).unwrap();
        assert!((r.data()[0] - 0.25).abs() < 1e-7);
        assert!((r.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_extreme_rows_sum_to_one() {
        let m = Tensor::from_rows(&[[80.0, -80.0, 79.5, 0.0], [-80.0, -80.0, -80.0, -79.0]]);
        let s = softmax_rows(&m).unwrap();
        for i in 0..2 {
            let sum: f32 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn moments_examples() {
        let (mu, sigma) = moments(&Tensor::from_rows(&[[5.0], [5.0], [5.0]])).unwrap();
        assert_eq!(mu.data(), &[5.0]);
        assert_eq!(sigma.data(), &[SIGMA_FLOOR]);

        let (mu, sigma) = moments(&Tensor::from_rows(&[[1.0], [3.0]])).unwrap();
        assert_eq!((mu.data()[0], sigma.data()[0]), (2.0, 1.0));

        let (mu, sigma) = moments(&Tensor::from_rows(&[[0.0], [0.0], [0.0], [4.0]])).unwrap();
        assert_eq!(mu.data()[0], 1.0);
        assert!((sigma.data()[0] - 3f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::zeros(&[2, 2]).reshape(&[3]).is_err());
        assert!(Tensor::zeros(&[2, 3]).column_slice(2, 2).is_err());
    }
}

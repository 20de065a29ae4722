use super::Tensor;
use crate::error::{shape_err, Result};

const ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-6;
const COMPONENTS: usize = 3;

/// Principal directions recovered by [`pca_top3_with_basis`].
#[derive(Clone, Debug)]
pub struct PcaBasis {
    /// Unit eigenvectors, one per component, each of length `channels`.
    pub components: Vec<Vec<f64>>,
    /// Matching eigenvalues of the centered covariance.
    pub eigenvalues: Vec<f64>,
    /// Per-channel mean removed before projection.
    pub mean: Vec<f64>,
}

/// Projections of `f[tokens×channels]` onto its top three principal axes.
pub fn pca_top3(f: &Tensor) -> Result<Tensor> {
    pca_top3_with_basis(f).map(|(p, _)| p)
}

/// Power iteration with deflation on the centered covariance. Each
/// component's sign is fixed so its largest-magnitude loading is positive.
pub fn pca_top3_with_basis(f: &Tensor) -> Result<(Tensor, PcaBasis)> {
    let (n, c) = f.dims2()?;
    if n < 4 || c < COMPONENTS {
        return Err(shape_err(
            "pca_top3",
            format!("need tokens >= 4 and channels >= 3, got {n}x{c}"),
        ));
    }

    let mut mean = vec![0f64; c];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(f.row(i)) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| f.row(i).iter().zip(&mean).map(|(&x, m)| f64::from(x) - m).collect())
        .collect();

    let mut cov = vec![0f64; c * c];
    for row in &centered {
        for a in 0..c {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..c {
                cov[a * c + b] += ra * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|x| *x /= n as f64);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(COMPONENTS);
    let mut eigenvalues = Vec::with_capacity(COMPONENTS);
    for _ in 0..COMPONENTS {
        let (v, lambda) = leading_eigenvector(&cov, c, &components);
        for a in 0..c {
            for b in 0..c {
                cov[a * c + b] -= lambda * v[a] * v[b];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }

    let mut out = Vec::with_capacity(n * COMPONENTS);
    for row in &centered {
        for v in &components {
            out.push(row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() as f32);
        }
    }
    Ok((
        Tensor::new(&[n, COMPONENTS], out)?,
        PcaBasis {
            components,
            eigenvalues,
            mean,
        },
    ))
}

fn leading_eigenvector(cov: &[f64], c: usize, found: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let mut v = start_vector(c, found);
    let mut w = vec![0f64; c];
    for _ in 0..ITERATIONS {
        for (a, wa) in w.iter_mut().enumerate() {
            *wa = cov[a * c..(a + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        orthogonalize(&mut w, found);
        let norm = norm(&w);
        if norm < 1e-12 {
            // The remaining spectrum is numerically zero; keep the
            // orthonormal start vector.
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v.copy_from_slice(&w);
        if delta < TOLERANCE {
            break;
        }
    }
    fix_sign(&mut v);
    let lambda = (0..c)
        .map(|a| v[a] * cov[a * c..(a + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>())
        .sum::<f64>()
        .max(0.0);
    (v, lambda)
}

/// Ones vector, or the first basis vector that survives Gram-Schmidt
/// against the already-found components.
fn start_vector(c: usize, found: &[Vec<f64>]) -> Vec<f64> {
    let candidates = std::iter::once(vec![1.0; c]).chain((0..c).map(|i| {
        let mut e = vec![0.0; c];
        e[i] = 1.0;
        e
    }));
    for mut v in candidates {
        orthogonalize(&mut v, found);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
    unreachable!("channels >= 3 always leaves an orthogonal direction")
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fix_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

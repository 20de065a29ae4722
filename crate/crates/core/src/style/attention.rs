use super::control::{check_lambda, AttentionControl, ControlMode};
use super::stats::StyleStatistics;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    matmul, matmul_transposed, moments, online_mixed_attention, softmax_rows, AttentionBlock,
    Tensor,
};

/// `softmax(q·kᵀ/√d)` for one head.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.dims2()?.1;
    let scores = matmul_transposed(q, k)?.scale(1.0 / (d as f32).sqrt());
    softmax_rows(&scores)
}

/// `softmax(q·kᵀ/√d)·v` for one head.
pub fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.dims2()?.0 != v.dims2()?.0 {
        return Err(shape_err(
            "plain_attention",
            format!("{:?} keys vs {:?} values", k.shape(), v.shape()),
        ));
    }
    online_mixed_attention(q, &[AttentionBlock::new(k, v, 1.0)])
}

/// Content queries against style keys/values only.
pub fn direct_replace(q_c: &Tensor, k_s: &Tensor, v_s: &Tensor) -> Result<Tensor> {
    plain_attention(q_c, k_s, v_s)
}

/// `λ·A(q_c, k_s, v_s) + A(q_c, k_c, v_c)`, each with its own softmax.
pub fn direct_add(
    q_c: &Tensor,
    k_c: &Tensor,
    v_c: &Tensor,
    k_s: &Tensor,
    v_s: &Tensor,
    lambda: f32,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let content = plain_attention(q_c, k_c, v_c)?;
    let style = plain_attention(q_c, k_s, v_s)?;
    style.zip_map(&content, |s, c| lambda * s + c)
}

/// Joint softmax over the λ-scaled style score block and the content score
/// block, applied to the stacked `[v_s; v_c]`. Runs on the fused online
/// kernel.
pub fn mixed_attention(
    q_c: &Tensor,
    k_c: &Tensor,
    v_c: &Tensor,
    k_s: &Tensor,
    v_s: &Tensor,
    lambda: f32,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    online_mixed_attention(
        q_c,
        &[
            AttentionBlock::new(k_s, v_s, lambda),
            AttentionBlock::new(k_c, v_c, 1.0),
        ],
    )
}

/// Materialized joint attention weights `[t, n_s + n_c]`, style columns
/// first.
pub fn mixed_attention_weights(
    q_c: &Tensor,
    k_c: &Tensor,
    k_s: &Tensor,
    lambda: f32,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let d = q_c.dims2()?.1;
    let inv = 1.0 / (d as f32).sqrt();
    let s = matmul_transposed(q_c, k_s)?;
    let c = matmul_transposed(q_c, k_c)?;
    let (t, ns) = s.dims2()?;
    let nc = c.dims2()?.1;
    let mut scores = Vec::with_capacity(t * (ns + nc));
    for i in 0..t {
        scores.extend(s.row(i).iter().map(|x| lambda * x * inv));
        scores.extend(c.row(i).iter().map(|x| x * inv));
    }
    softmax_rows(&Tensor::new(&[t, ns + nc], scores)?)
}

/// Per-row attention mass on the first `n_style` columns.
pub fn style_mass(weights: &Tensor, n_style: usize) -> Result<Vec<f64>> {
    let (t, n) = weights.dims2()?;
    if n_style > n {
        return Err(shape_err("style_mass", format!("{n_style} > {n} columns")));
    }
    Ok((0..t)
        .map(|i| weights.row(i)[..n_style].iter().map(|&w| f64::from(w)).sum())
        .collect())
}

/// Re-normalize every channel of `f_c[tokens×channels]` to the target
/// moments: `σ_s·(f_c − μ_c)/σ_c + μ_s`.
pub fn adain(f_c: &Tensor, mu_s: &Tensor, sigma_s: &Tensor) -> Result<Tensor> {
    let (n, c) = f_c.dims2()?;
    if mu_s.numel() != c || sigma_s.numel() != c {
        return Err(shape_err(
            "adain",
            format!("{c} channels vs moments {:?}/{:?}", mu_s.shape(), sigma_s.shape()),
        ));
    }
    let (mu_c, sigma_c) = moments(f_c)?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for (j, &x) in f_c.row(i).iter().enumerate() {
            let z = (f64::from(x) - f64::from(mu_c.data()[j])) / f64::from(sigma_c.data()[j]);
            out.push((f64::from(sigma_s.data()[j]) * z + f64::from(mu_s.data()[j])) as f32);
        }
    }
    Tensor::new(&[n, c], out)
}

/// Split `[n, heads·hd]` into `heads` tensors of `[n, hd]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (_, dim) = x.dims2()?;
    if heads == 0 || dim % heads != 0 {
        return Err(shape_err("split_heads", format!("{dim} columns into {heads} heads")));
    }
    let hd = dim / heads;
    (0..heads).map(|h| x.column_slice(h * hd, hd)).collect()
}

fn stack_heads(parts: &[Tensor]) -> Result<Tensor> {
    let (n, hd) = parts[0].dims2()?;
    let mut data = Vec::with_capacity(parts.len() * n * hd);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[parts.len(), n, hd], data)
}

fn merge_heads(parts: &[Tensor]) -> Result<Tensor> {
    let (n, hd) = parts[0].dims2()?;
    let dim = hd * parts.len();
    let mut data = vec![0f32; n * dim];
    for (h, p) in parts.iter().enumerate() {
        for i in 0..n {
            data[i * dim + h * hd..i * dim + (h + 1) * hd].copy_from_slice(p.row(i));
        }
    }
    Tensor::new(&[n, dim], data)
}

/// Query/key/value projection matrices of one layer, each `[dim, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerProjections<'a> {
    pub query: &'a Tensor,
    pub key: &'a Tensor,
    pub value: &'a Tensor,
    pub heads: usize,
}

/// Result of running one layer's self-attention under a control.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Features the projections were applied to (after AdaIN under NMSA).
    pub features: Tensor,
    /// Content keys/values, `[heads, tokens, head_dim]`.
    pub keys: Tensor,
    pub values: Tensor,
    /// Merged per-head attention output `[tokens, dim]`, before the output
    /// projection.
    pub attended: Tensor,
    /// `[heads, tokens, tokens]` weights, only for plain self-attention when
    /// requested.
    pub weights: Option<Tensor>,
}

/// Run one layer's self-attention on content features `f_c` under `control`,
/// drawing style keys/values/moments from layer `layer` of `style`.
pub fn apply_control(
    control: &AttentionControl,
    layer: usize,
    f_c: &Tensor,
    proj: &LayerProjections<'_>,
    style: Option<&StyleStatistics>,
    want_weights: bool,
) -> Result<ControlOutput> {
    let mode = control.mode();
    let lambda = control.lambda();
    let style_layer = if mode.needs_style() {
        Some(
            style
                .ok_or(Error::MissingStyle(mode.name()))?
                .layer(layer)?,
        )
    } else {
        None
    };

    let features = match (mode, style_layer) {
        (ControlMode::Nmsa, Some(s)) => adain(f_c, s.mu(), s.sigma())?,
        _ => f_c.clone(),
    };

    let heads = proj.heads;
    let q = split_heads(&matmul(&features, proj.query)?, heads)?;
    let k = split_heads(&matmul(&features, proj.key)?, heads)?;
    let v = split_heads(&matmul(&features, proj.value)?, heads)?;
    if let Some(s) = style_layer {
        if s.heads() != heads || s.head_dim() != q[0].dims2()?.1 {
            return Err(shape_err(
                "apply_control",
                format!(
                    "style layer {layer} has {}x{} heads, content has {}x{}",
                    s.heads(),
                    s.head_dim(),
                    heads,
                    q[0].dims2()?.1
                ),
            ));
        }
    }

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = (&q[h], &k[h], &v[h]);
        let out = match style_layer {
            None => {
                if want_weights {
                    weights.push(attention_weights(qh, kh)?);
                }
                plain_attention(qh, kh, vh)?
            }
            Some(s) => {
                let (ks, vs) = (s.head_keys(h), s.head_values(h));
                match mode {
                    ControlMode::DirectReplace => direct_replace(qh, &ks, &vs)?,
                    ControlMode::DirectAdd => direct_add(qh, kh, vh, &ks, &vs, lambda)?,
                    ControlMode::Msa | ControlMode::Nmsa => {
                        mixed_attention(qh, kh, vh, &ks, &vs, lambda)?
                    }
                    ControlMode::None => unreachable!("plain attention has no style layer"),
                }
            }
        };
        outs.push(out);
    }

    Ok(ControlOutput {
        features,
        keys: stack_heads(&k)?,
        values: stack_heads(&v)?,
        attended: merge_heads(&outs)?,
        weights: if want_weights && !weights.is_empty() {
            Some(stack_heads(&weights)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    /// Independent f64 oracle for `softmax(q kᵀ/√d) v`.
    fn oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (t, d) = q.dims2().unwrap();
        let (n, dv) = v.dims2().unwrap();
        let mut out = vec![0.0; t * dv];
        for i in 0..t {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d)
                        .map(|x| f64::from(q.row(i)[x]) * f64::from(k.row(j)[x]))
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = s.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * f64::from(v.row(j)[c]);
                }
            }
        }
        out
    }

    fn close(a: &Tensor, b: &[f64], tol: f64) -> bool {
        a.data().iter().zip(b).all(|(&x, &y)| (f64::from(x) - y).abs() <= tol)
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::from_rows(&[[3.0, -1.0], [0.0, 9.0]]);
        let k = Tensor::from_rows(&[[1.0, 1.0]]);
        let v = Tensor::from_rows(&[[0.5, -2.0]]);
        let o = plain_attention(&q, &k, &v).unwrap();
        assert_eq!(o.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn orthogonal_keys_average_values() {
        let q = Tensor::from_rows(&[[1.0, 0.0]]);
        let k = Tensor::from_rows(&[[0.0, 1.0], [0.0, -3.0]]);
        let v = Tensor::from_rows(&[[2.0, 0.0], [4.0, 2.0]]);
        assert_eq!(plain_attention(&q, &k, &v).unwrap().data(), &[3.0, 1.0]);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // scores = q kᵀ / √2 = [[ln 3, 0], [0, 0]] by construction.
        let a = 3f32.ln() * 2f32.sqrt();
        let q = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let k = Tensor::from_rows(&[[a, 0.0], [0.0, 1.0]]);
        let v = Tensor::from_rows(&[[4.0, 0.0], [0.0, 8.0]]);
        let o = plain_attention(&q, &k, &v).unwrap();
        let expected = [3.0, 2.0, 2.0, 4.0];
        for (x, y) in o.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn replace_examples() {
        let mut rng = Rng::new(21);
        let q = gaussian(&mut rng, &[4, 3]);
        let k = gaussian(&mut rng, &[5, 3]);
        let v = gaussian(&mut rng, &[5, 3]);
        assert_eq!(direct_replace(&q, &k, &v).unwrap(), plain_attention(&q, &k, &v).unwrap());
        assert!(close(&direct_replace(&q, &k, &v).unwrap(), &oracle(&q, &k, &v), 1e-6));

        let ks = Tensor::from_rows(&[[0.3, 0.1, -2.0]]);
        let vs = Tensor::from_rows(&[[7.0, 8.0, 9.0]]);
        let o = direct_replace(&q, &ks, &vs).unwrap();
        for i in 0..4 {
            assert_eq!(o.row(i), &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn add_examples() {
        let mut rng = Rng::new(22);
        let q = gaussian(&mut rng, &[4, 3]);
        let (kc, vc) = (gaussian(&mut rng, &[5, 3]), gaussian(&mut rng, &[5, 3]));
        let (ks, vs) = (gaussian(&mut rng, &[2, 3]), gaussian(&mut rng, &[2, 3]));
        let plain = plain_attention(&q, &kc, &vc).unwrap();
        assert!(direct_add(&q, &kc, &vc, &ks, &vs, 0.0).unwrap().max_abs_diff(&plain) <= 1e-6);
        let doubled = direct_add(&q, &kc, &vc, &kc, &vc, 1.0).unwrap();
        assert!(doubled.max_abs_diff(&plain.scale(2.0)) <= 1e-6);

        let half = direct_add(&q, &kc, &vc, &ks, &vs, 0.5).unwrap();
        let a = oracle(&q, &ks, &vs);
        let b = oracle(&q, &kc, &vc);
        let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + y).collect();
        assert!(close(&half, &expected, 1e-6));
        assert!(direct_add(&q, &kc, &vc, &ks, &vs, 1.5).is_err());
    }

    #[test]
    fn mixed_examples() {
        let mut rng = Rng::new(23);
        let q = gaussian(&mut rng, &[4, 3]);
        let (kc, vc) = (gaussian(&mut rng, &[5, 3]), gaussian(&mut rng, &[5, 3]));
        let dup = mixed_attention(&q, &kc, &vc, &kc, &vc, 1.0).unwrap();
        assert!(dup.max_abs_diff(&plain_attention(&q, &kc, &vc).unwrap()) <= 1e-6);

        let zero_q = Tensor::zeros(&[1, 3]);
        let vs = Tensor::from_rows(&[[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]]);
        let vc2 = Tensor::from_rows(&[[5.0, 5.0, 5.0], [7.0, 7.0, 7.0]]);
        let ks = gaussian(&mut rng, &[2, 3]);
        assert!(mixed_attention(&zero_q, &kc, &vs, &ks, &vs, 0.4).is_err());
        let kc2 = gaussian(&mut rng, &[2, 3]);
        let o = mixed_attention(&zero_q, &kc2, &vc2, &ks, &vs, 0.4).unwrap();
        assert!(o.data().iter().all(|&x| (x - 4.0).abs() < 1e-6));
    }

    #[test]
    fn msa_at_zero_lambda_is_not_plain_attention() {
        let mut rng = Rng::new(24);
        let q = gaussian(&mut rng, &[3, 4]);
        let (kc, vc) = (gaussian(&mut rng, &[3, 4]), gaussian(&mut rng, &[3, 4]));
        let (ks, vs) = (gaussian(&mut rng, &[2, 4]), gaussian(&mut rng, &[2, 4]));
        let msa = mixed_attention(&q, &kc, &vc, &ks, &vs, 0.0).unwrap();

        // Oracle: style keys get logit 0, content keys keep q·k/√d.
        let mut expected = Vec::new();
        for i in 0..3 {
            let mut logits = vec![0.0f64; 2];
            logits.extend((0..3).map(|j| {
                (0..4).map(|x| f64::from(q.row(i)[x]) * f64::from(kc.row(j)[x])).sum::<f64>() / 2.0
            }));
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..2 {
                    acc += e[j] / z * f64::from(vs.row(j)[c]);
                }
                for j in 0..3 {
                    acc += e[2 + j] / z * f64::from(vc.row(j)[c]);
                }
                expected.push(acc);
            }
        }
        assert!(close(&msa, &expected, 1e-6));
        let plain = plain_attention(&q, &kc, &vc).unwrap();
        assert!(msa.max_abs_diff(&plain) > 1e-3);
        let add = direct_add(&q, &kc, &vc, &ks, &vs, 0.0).unwrap();
        assert!(add.max_abs_diff(&plain) <= 1e-6);
    }

    #[test]
    fn adain_examples() {
        let f = Tensor::from_rows(&[[1.0], [3.0]]);
        let out = adain(&f, &Tensor::zeros(&[1]), &Tensor::full(&[1], 2.0)).unwrap();
        assert_eq!(out.data(), &[-2.0, 2.0]);

        let mut rng = Rng::new(25);
        let g = gaussian(&mut rng, &[10, 4]);
        let (mu, sigma) = moments(&g).unwrap();
        assert!(adain(&g, &mu, &sigma).unwrap().max_abs_diff(&g) < 1e-5);
        assert!(adain(&g, &Tensor::zeros(&[3]), &sigma).is_err());
    }

    #[test]
    fn style_mass_sums_rows() {
        let w = Tensor::from_rows(&[[0.25, 0.25, 0.5], [0.1, 0.0, 0.9]]);
        assert_eq!(style_mass(&w, 2).unwrap(), vec![0.5, 0.1f32 as f64]);
        assert!(style_mass(&w, 4).is_err());
    }

    #[test]
    fn style_mass_monotonicity_needs_all_scores_positive() {
        let q = Tensor::from_rows(&[[1.0]]);
        let kc = Tensor::from_rows(&[[0.0]]);
        let mass = |ks: &Tensor, l: f32| style_mass(&mixed_attention_weights(&q, &kc, ks, l).unwrap(), 2).unwrap()[0];
        let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];

        let positive = Tensor::from_rows(&[[0.5], [2.0]]);
        let m: Vec<f64> = lambdas.iter().map(|&l| mass(&positive, l)).collect();
        assert!(m.windows(2).all(|w| w[1] >= w[0]), "{m:?}");

        // One positive score is not enough: at λ=0 every score is 0 and the
        // style block holds 2/3; at λ=1 the −10 key drops out.
        let mixed = Tensor::from_rows(&[[0.01], [-10.0]]);
        assert!((mass(&mixed, 0.0) - 2.0 / 3.0).abs() < 1e-6);
        assert!(mass(&mixed, 1.0) < 0.51);
    }

    #[test]
    fn controls_need_style() {
        let f = Tensor::zeros(&[2, 4]);
        let w = Tensor::zeros(&[4, 4]);
        let proj = LayerProjections {
            query: &w,
            key: &w,
            value: &w,
            heads: 2,
        };
        let c = AttentionControl::new(ControlMode::Msa, 1.0).unwrap();
        assert!(matches!(
            apply_control(&c, 0, &f, &proj, None, false),
            Err(Error::MissingStyle("msa"))
        ));
        let none = apply_control(&AttentionControl::none(), 0, &f, &proj, None, true).unwrap();
        assert_eq!(none.weights.unwrap().shape(), &[2, 2, 2]);
    }
}

//! Loss components and the weighted composite objective.
//!
//! Each loss returns its value together with the analytic gradient with
//! respect to its inputs, so the model can chain them without an autodiff
//! framework.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix, log_sum_exp, norm, normalize_backward, normalize_rows, softmax, Matrix};

/// Weights of the composite objective plus the shared contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Binary cross-entropy weight.
    pub lambda1: f64,
    /// Supervised contrastive weight.
    pub lambda2: f64,
    /// Image-text contrastive weight.
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.69,
            lambda2: 1.97,
            lambda3: 0.46,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, tau: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
            tau,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        let ls = [self.lambda1, self.lambda2, self.lambda3];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be finite and nonnegative, got {ls:?}"
            )));
        }
        if ls.iter().all(|l| *l == 0.0) {
            return Err(Error::Parameter("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub binary: f64,
    pub supcon: f64,
    pub clip: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean; `total` is recomputed from the averaged components
    /// so the weighted-sum identity keeps holding.
    pub fn mean(items: &[LossBreakdown], weights: &LossWeights) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let (mut b, mut s, mut c) = (0.0, 0.0, 0.0);
        for it in items {
            b += it.binary;
            s += it.supcon;
            c += it.clip;
        }
        composite_loss((b / n, s / n, c / n), weights)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ClipLoss {
    pub loss: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
}

/// Symmetric image-text contrastive loss over matched rows of `image` and `text`.
///
/// Rows are L2-normalized internally and the gradients flow through that
/// normalization, so the inputs may have any (nonzero) scale.
pub fn clip_loss(image: &Matrix, text: &Matrix, tau: f64) -> Result<ClipLoss> {
    check_tau(tau)?;
    if image.shape() != text.shape() {
        return Err(Error::Shape(format!(
            "clip_loss: image {:?} vs text {:?}",
            image.shape(),
            text.shape()
        )));
    }
    let n = image.rows();
    if n == 0 {
        return Err(Error::InsufficientData("clip_loss needs at least one pair".into()));
    }
    let (vn, v_norms) = normalize_rows(image)?;
    let (tn, t_norms) = normalize_rows(text)?;
    let mut logits = cosine_matrix(&vn, &tn)?;
    logits.as_mut_slice().iter_mut().for_each(|s| *s /= tau);

    // Upstream gradient on the logits, accumulated from both directions.
    let scale = 1.0 / (2.0 * n as f64);
    let mut g = Matrix::zeros(n, n);
    let mut image_to_text = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        image_to_text += log_sum_exp(row) - row[i];
        for (j, p) in softmax(row).into_iter().enumerate() {
            g[(i, j)] += p * scale;
        }
        g[(i, i)] -= scale;
    }
    let mut text_to_image = 0.0;
    let mut col = vec![0.0; n];
    for i in 0..n {
        for (j, c) in col.iter_mut().enumerate() {
            *c = logits[(j, i)];
        }
        text_to_image += log_sum_exp(&col) - col[i];
        for (j, p) in softmax(&col).into_iter().enumerate() {
            g[(j, i)] += p * scale;
        }
        g[(i, i)] -= scale;
    }
    let loss = (image_to_text + text_to_image) * scale;

    let d = image.cols();
    let mut grad_image = Matrix::zeros(n, d);
    let mut grad_text = Matrix::zeros(n, d);
    let mut gv = vec![0.0; d];
    let mut gt = vec![0.0; d];
    for i in 0..n {
        gv.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..n {
            let w = g[(i, j)] / tau;
            for (acc, t) in gv.iter_mut().zip(tn.row(j)) {
                *acc += w * t;
            }
        }
        grad_image
            .row_mut(i)
            .copy_from_slice(&normalize_backward(vn.row(i), v_norms[i], &gv));
    }
    for j in 0..n {
        gt.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let w = g[(i, j)] / tau;
            for (acc, v) in gt.iter_mut().zip(vn.row(i)) {
                *acc += w * v;
            }
        }
        grad_text
            .row_mut(j)
            .copy_from_slice(&normalize_backward(tn.row(j), t_norms[j], &gt));
    }
    Ok(ClipLoss {
        loss,
        grad_image,
        grad_text,
    })
}

#[derive(Debug, Clone)]
pub struct SupConLoss {
    pub loss: f64,
    pub grad: Matrix,
}

/// Supervised contrastive loss treating every same-label row as a positive.
///
/// Rows must already be unit-norm (within 1e-6). The denominator for anchor
/// `i` runs over all other rows. An anchor with no positives contributes zero
/// but still counts in the batch average.
pub fn supcon_loss(features: &Matrix, labels: &[u8], tau: f64) -> Result<SupConLoss> {
    check_tau(tau)?;
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "supcon_loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "supcon_loss needs at least 2 rows, got {n}"
        )));
    }
    for (i, r) in features.row_iter().enumerate() {
        let nr = norm(r);
        if (nr - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "supcon_loss: row {i} has norm {nr}, expected unit norm"
            )));
        }
    }
    let sim = cosine_matrix(features, features)?;
    let inv_n = 1.0 / n as f64;
    let mut coef = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n - 1);
    let mut others = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&a| a != i));
        let positives = others.iter().filter(|&&a| labels[a] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        logits.clear();
        logits.extend(others.iter().map(|&a| sim[(i, a)] / tau));
        let lse = log_sum_exp(&logits);
        let mut pos_sum = 0.0;
        for (&a, l) in others.iter().zip(&logits) {
            if labels[a] == labels[i] {
                pos_sum += l;
            }
        }
        let inv_p = 1.0 / positives as f64;
        total += lse - pos_sum * inv_p;
        for (&a, p) in others.iter().zip(softmax(&logits)) {
            let target = if labels[a] == labels[i] { inv_p } else { 0.0 };
            coef[(i, a)] = (p - target) * inv_n / tau;
        }
    }
    let d = features.cols();
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        for a in 0..n {
            let c = coef[(i, a)];
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                grad[(i, k)] += c * features[(a, k)];
                grad[(a, k)] += c * features[(i, k)];
            }
        }
    }
    Ok(SupConLoss {
        loss: total * inv_n,
        grad,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy on raw logits, and its gradient `(σ(ŷ) − y) / N`.
pub fn bce_with_logits(logits: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bce_with_logits: {} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::InsufficientData("bce_with_logits on an empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(*bad));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        let y = f64::from(y);
        // -y log σ(x) - (1-y) log(1-σ(x)) = softplus(x) - y x
        loss += softplus(x) - y * x;
        grad.push((sigmoid(x) - y) / n);
    }
    Ok((loss / n, grad))
}

/// Weighted sum of `(binary, supcon, clip)`.
pub fn composite_loss(components: (f64, f64, f64), w: &LossWeights) -> LossBreakdown {
    let (binary, supcon, clip) = components;
    LossBreakdown {
        binary,
        supcon,
        clip,
        total: w.lambda1 * binary + w.lambda2 * supcon + w.lambda3 * clip,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn unit_rows(x: &Matrix) -> Matrix {
        normalize_rows(x).unwrap().0
    }

    fn fd_check(analytic: &Matrix, base: &Matrix, f: impl Fn(&Matrix) -> f64) {
        let h = 1e-6;
        for idx in 0..base.as_slice().len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_mut_slice()[idx] += h;
            minus.as_mut_slice()[idx] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-6, "index {idx}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn clip_examples() {
        let single = clip_loss(&m(&[&[0.3, -2.0]]), &m(&[&[1.0, 5.0]]), 1.0).unwrap();
        assert_eq!(single.loss, 0.0);
        let e = std::f64::consts::E;
        let basis = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let aligned = clip_loss(&basis, &basis, 1.0).unwrap();
        assert!((aligned.loss + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((aligned.loss - 0.31326).abs() < 1e-5);
        let swapped = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let crossed = clip_loss(&basis, &swapped, 1.0).unwrap();
        assert!((crossed.loss - 1.31326).abs() < 1e-5);
    }

    #[test]
    fn clip_errors() {
        let basis = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(clip_loss(&basis, &basis, 0.0), Err(Error::Parameter(_))));
        let zero = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            clip_loss(&basis, &zero, 1.0),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn supcon_examples() {
        let pair = unit_rows(&m(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        assert!(supcon_loss(&pair, &[4, 4], 1.0).unwrap().loss.abs() < 1e-15);
        assert_eq!(supcon_loss(&pair, &[0, 1], 1.0).unwrap().loss, 0.0);
        let f = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let out = supcon_loss(&f, &[0, 0, 1], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = 2.0 * -(e / (e + 1.0)).ln() / 3.0;
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.20884).abs() < 1e-5);
    }

    #[test]
    fn supcon_errors() {
        let f = m(&[&[1.0, 0.0], &[2.0, 0.0]]);
        assert!(matches!(supcon_loss(&f, &[0, 0], 1.0), Err(Error::Precondition(_))));
        let g = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(supcon_loss(&g, &[0, 0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn bce_examples() {
        let (l, _) = bce_with_logits(&[0.0], &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = bce_with_logits(&[2.0], &[0]).unwrap();
        assert!((l - (1.0 + 2.0f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 2.126928).abs() < 1e-6);
        let (l, g) = bce_with_logits(&[0.0, 0.0], &[1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, vec![-0.25, 0.25]);
        assert!(matches!(bce_with_logits(&[0.0], &[2]), Err(Error::Label(2))));
        let (l, _) = bce_with_logits(&[800.0, -800.0], &[0, 1]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn composite_examples() {
        let w = LossWeights::default();
        let b = composite_loss((0.6931, 0.0, 0.31326), &w);
        assert!((b.total - (0.69 * 0.6931 + 0.46 * 0.31326)).abs() < 1e-15);
        assert!((b.total - 0.62235).abs() < 1e-4);
        let only_bce = LossWeights::new(1.0, 0.0, 0.0, 0.07).unwrap();
        assert_eq!(composite_loss((0.4, 7.0, 9.0), &only_bce).total, 0.4);
        assert_eq!(composite_loss((0.0, 0.0, 0.0), &w).total, 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.07).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0, 0.07).is_err());
        assert!(LossWeights::new(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(2..7);
            let v = random(&mut rng, n, d);
            let t = random(&mut rng, n, d);
            let tau = rng.gen_range(0.2..1.5);
            let out = clip_loss(&v, &t, tau).unwrap();
            fd_check(&out.grad_image, &v, |x| clip_loss(x, &t, tau).unwrap().loss);
            fd_check(&out.grad_text, &t, |x| clip_loss(&v, x, tau).unwrap().loss);

            // SupCon is defined on the sphere; check the tangent-free gradient
            // by differentiating through an explicit normalization.
            let raw = random(&mut rng, n, d);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let (f, norms) = normalize_rows(&raw).unwrap();
            let out = supcon_loss(&f, &labels, tau).unwrap();
            let mut chained = Matrix::zeros(n, d);
            for (i, &norm) in norms.iter().enumerate() {
                chained
                    .row_mut(i)
                    .copy_from_slice(&normalize_backward(f.row(i), norm, out.grad.row(i)));
            }
            fd_check(&chained, &raw, |x| {
                supcon_loss(&unit_rows(x), &labels, tau).unwrap().loss
            });

            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (_, g) = bce_with_logits(&logits, &labels).unwrap();
            let base = Matrix::from_vec(1, n, logits.clone()).unwrap();
            let g = Matrix::from_vec(1, n, g).unwrap();
            fd_check(&g, &base, |x| bce_with_logits(x.as_slice(), &labels).unwrap().0);
        }
    }

    #[test]
    fn supcon_vanishes_for_collapsed_orthogonal_classes() {
        let f = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let out = supcon_loss(&f, &[0, 1, 0, 1], 1.0).unwrap();
        // one positive plus two orthogonal negatives: -ln(e/(e+2))
        let e = std::f64::consts::E;
        assert!((out.loss - (1.0 + 2.0 / e).ln()).abs() < 1e-12);
        let sharp = supcon_loss(&f, &[0, 1, 0, 1], 0.01).unwrap();
        assert!(sharp.loss < 1e-40);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..500, n in 2usize..7, d in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&mut rng, n, d);
            let t = random(&mut rng, n, d);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);

            let base = clip_loss(&v, &t, 0.5).unwrap();
            let moved = clip_loss(&v.select_rows(&perm), &t.select_rows(&perm), 0.5).unwrap();
            prop_assert!((base.loss - moved.loss).abs() < 1e-12);
            prop_assert!(base.grad_image.select_rows(&perm).max_abs_diff(&moved.grad_image) < 1e-12);
            prop_assert!(base.grad_text.select_rows(&perm).max_abs_diff(&moved.grad_text) < 1e-12);

            let f = unit_rows(&v);
            let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
            let s0 = supcon_loss(&f, &labels, 0.5).unwrap();
            let s1 = supcon_loss(&f.select_rows(&perm), &pl, 0.5).unwrap();
            prop_assert!((s0.loss - s1.loss).abs() < 1e-12);
            prop_assert!(s0.grad.select_rows(&perm).max_abs_diff(&s1.grad) < 1e-12);

            let logits: Vec<f64> = v.row_iter().map(|r| r[0] * 3.0).collect();
            let pll: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
            let (b0, g0) = bce_with_logits(&logits, &labels).unwrap();
            let (b1, g1) = bce_with_logits(&pll, &pl).unwrap();
            prop_assert!((b0 - b1).abs() < 1e-12);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(g0[i], g1[k]);
            }
        }

        #[test]
        fn clip_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0, row in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&mut rng, 4, 5);
            let t = random(&mut rng, 4, 5);
            let mut scaled = v.clone();
            scaled.row_mut(row).iter_mut().for_each(|x| *x *= scale);
            let a = clip_loss(&v, &t, 0.3).unwrap().loss;
            let b = clip_loss(&scaled, &t, 0.3).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn losses_are_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&mut rng, 5, 3);
            let t = random(&mut rng, 5, 3);
            prop_assert!(clip_loss(&v, &t, 0.07).unwrap().loss >= 0.0);
            let f = unit_rows(&v);
            prop_assert!(supcon_loss(&f, &[0, 1, 0, 1, 1], 0.07).unwrap().loss >= -1e-12);
        }
    }
}

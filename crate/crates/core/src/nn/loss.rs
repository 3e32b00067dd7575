use super::tensor::{dot, log_sum_exp, norm, softmax};
use crate::error::{check_finite, Error, Result};

/// Result of [`cosine_similarity`]. `degenerate` is set when either input
/// has zero norm, in which case `value` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine operands", a.len(), b.len()));
    }
    check_finite("cosine lhs", a)?;
    check_finite("cosine rhs", b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Cosine without validation, for hot loops over already-checked data.
#[inline]
pub fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Gradient of `cos(a, b)` scaled by `upstream`. Zero when degenerate.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| upstream * (y * inv - c * x / (na * na)))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| upstream * (x * inv - c * y / (nb * nb)))
        .collect();
    (da, db)
}

/// Softmax cross-entropy over a vector of logits. Returns the loss and
/// `softmax(logits) - onehot(gold)`.
pub fn softmax_cross_entropy(logits: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if gold >= logits.len() {
        return Err(Error::GoldOutOfRange {
            gold,
            n: logits.len(),
        });
    }
    check_finite("logits", logits)?;
    let loss = log_sum_exp(logits) - logits[gold];
    let mut grad = softmax(logits);
    grad[gold] -= 1.0;
    Ok((loss.max(0.0), grad))
}

fn check_distribution(context: &str, p: &[f64]) -> Result<()> {
    check_finite(context, p)?;
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid(format!("{context} has negative mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("{context} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p ln(p / q)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl operands", p.len(), q.len()));
    }
    check_distribution("kl lhs", p)?;
    check_distribution("kl rhs", q)?;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = cosine_similarity(&[1., 2., 3.], &[4., 5., 6.]).unwrap();
        // 32 / sqrt(14 * 77)
        assert!((v.value - 32.0 / (14.0f64 * 77.0).sqrt()).abs() < 1e-15);
        assert!((v.value - 0.974_631_846_197_075_7).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 3.]).unwrap().value, 0.0);
        assert_eq!(cosine_similarity(&[2., 5.], &[2., 5.]).unwrap().value, 1.0);
        let z = cosine_similarity(&[0., 0.], &[1., 1.]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = softmax_cross_entropy(&[0.0; 5], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy(&[1000., 0., 0., 0., 0.], 0).unwrap();
        assert!(l.is_finite() && l < 1e-300 + 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&[0.0; 5], 5),
            Err(Error::GoldOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_example() {
        let kl = kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap();
        let expected = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.08228).abs() < 1e-5);
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(kl_divergence(&[0.2, 0.7], &[0.5, 0.5]).is_err());
    }
}

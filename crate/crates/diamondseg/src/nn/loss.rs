//! Per-pixel classification losses with analytic logit gradients.

use super::ops::softmax_per_pixel;
use super::{NnError, Scalar, Tensor4};

fn check_targets<S: Scalar>(logits: &Tensor4<S>, targets: &[u8]) -> Result<(), NnError> {
    let (n, c, h, w) = logits.dims();
    if targets.len() != n * h * w {
        return Err(NnError::ShapeMismatch(format!(
            "{} targets for {} pixels",
            targets.len(),
            n * h * w
        )));
    }
    for &t in targets {
        if t as usize >= c {
            return Err(NnError::ClassOutOfRange { class: t, num_classes: c });
        }
    }
    Ok(())
}

// Stable log-softmax probability of the target class at one pixel,
// returning (p_t, probs) alongside for gradient reuse.
fn pixel_probs<S: Scalar>(logits: &Tensor4<S>, ni: usize, hi: usize, wi: usize, probs: &mut [S]) {
    let c = probs.len();
    let mut max = logits.at(ni, 0, hi, wi);
    for ci in 1..c {
        max = max.max(logits.at(ni, ci, hi, wi));
    }
    let mut denom = S::zero();
    for ci in 0..c {
        let e = (logits.at(ni, ci, hi, wi) - max).exp();
        probs[ci] = e;
        denom += e;
    }
    for p in probs.iter_mut() {
        *p /= denom;
    }
}

/// Mean negative log-likelihood of the target classes; returns the loss and
/// dL/dlogits = (softmax - onehot) / (N*H*W).
pub fn cross_entropy_loss<S: Scalar>(
    logits: &Tensor4<S>,
    targets: &[u8],
) -> Result<(S, Tensor4<S>), NnError> {
    check_targets(logits, targets)?;
    let (n, c, h, w) = logits.dims();
    let count = S::from_f64((n * h * w) as f64);
    let mut probs = vec![S::zero(); c];
    let mut loss = S::zero();
    let mut dlogits = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                pixel_probs(logits, ni, hi, wi, &mut probs);
                let t = targets[(ni * h + hi) * w + wi] as usize;
                // Guard the log against exact-zero probabilities from
                // extreme logits.
                let p_t = probs[t].max(S::from_f64(1e-300));
                loss -= p_t.ln();
                for ci in 0..c {
                    let onehot = if ci == t { S::one() } else { S::zero() };
                    *dlogits.at_mut(ni, ci, hi, wi) = (probs[ci] - onehot) / count;
                }
            }
        }
    }
    Ok((loss / count, dlogits))
}

/// Focusing and class-weight parameters for [`focal_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct FocalLossParams<S: Scalar> {
    pub gamma: S,
    pub alpha: Vec<S>,
}

impl<S: Scalar> FocalLossParams<S> {
    pub fn new(gamma: S, alpha: Vec<S>) -> Result<Self, NnError> {
        if gamma < S::zero() {
            return Err(NnError::InvalidParameter(format!("gamma {gamma} must be >= 0")));
        }
        if alpha.iter().any(|&a| a <= S::zero()) {
            return Err(NnError::InvalidParameter("alpha weights must be positive".into()));
        }
        Ok(FocalLossParams { gamma, alpha })
    }

    pub fn uniform(num_classes: usize) -> Self {
        FocalLossParams {
            gamma: S::from_f64(2.0),
            alpha: vec![S::one(); num_classes],
        }
    }
}

/// Mean of -alpha_t (1 - p_t)^gamma ln(p_t) over pixels. At gamma = 0 this
/// is exactly weighted cross-entropy.
///
/// Per pixel with u = p_t: dL/du = alpha*gamma*(1-u)^(gamma-1)*ln(u)
/// - alpha*(1-u)^gamma / u, then dL/dz_j = dL/du * u * (delta_jt - p_j).
pub fn focal_loss<S: Scalar>(
    logits: &Tensor4<S>,
    targets: &[u8],
    params: &FocalLossParams<S>,
) -> Result<(S, Tensor4<S>), NnError> {
    check_targets(logits, targets)?;
    let (n, c, h, w) = logits.dims();
    if params.alpha.len() != c {
        return Err(NnError::ShapeMismatch(format!(
            "{} alpha weights for {c} classes",
            params.alpha.len()
        )));
    }
    let count = S::from_f64((n * h * w) as f64);
    let gamma = params.gamma;
    let mut probs = vec![S::zero(); c];
    let mut loss = S::zero();
    let mut dlogits = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                pixel_probs(logits, ni, hi, wi, &mut probs);
                let t = targets[(ni * h + hi) * w + wi] as usize;
                let alpha = params.alpha[t];
                let u = probs[t].max(S::from_f64(1e-300));
                let one_m = S::one() - u;
                loss += -alpha * one_m.powf(gamma) * u.ln();
                // d/du of -alpha*(1-u)^g*ln(u); the g=0 branch avoids
                // 0^(-1) when u hits exactly 1.
                let dl_du = if gamma == S::zero() {
                    -alpha / u
                } else {
                    alpha * gamma * one_m.powf(gamma - S::one()) * u.ln() - alpha * one_m.powf(gamma) / u
                };
                for ci in 0..c {
                    let delta = if ci == t { S::one() } else { S::zero() };
                    *dlogits.at_mut(ni, ci, hi, wi) =
                        dl_du * u * (delta - probs[ci]) / count;
                }
            }
        }
    }
    Ok((loss / count, dlogits))
}

/// Per-pixel Shannon entropy (nats) of the softmax distribution:
/// (N,C,H,W) logits -> (N,1,H,W) entropies.
pub fn prediction_entropy<S: Scalar>(logits: &Tensor4<S>) -> Tensor4<S> {
    let probs = softmax_per_pixel(logits);
    let (n, c, h, w) = probs.dims();
    Tensor4::from_fn(n, 1, h, w, |ni, _, hi, wi| {
        let mut ent = S::zero();
        for ci in 0..c {
            let p = probs.at(ni, ci, hi, wi);
            if p > S::zero() {
                ent -= p * p.ln();
            }
        }
        ent
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_num_classes() {
        let logits = Tensor4::<f64>::zeros(1, 4, 3, 3);
        let targets = vec![2u8; 9];
        let (loss, grad) = cross_entropy_loss(&logits, &targets).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        // Gradient: (0.25 - onehot)/9 at every pixel.
        assert!((grad.at(0, 2, 0, 0) - (0.25 - 1.0) / 9.0).abs() < 1e-12);
        assert!((grad.at(0, 0, 0, 0) - 0.25 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nearly_nothing() {
        let logits = Tensor4::<f64>::from_fn(1, 4, 2, 2, |_, c, _, _| {
            if c == 1 {
                30.0
            } else {
                0.0
            }
        });
        let (loss, _) = cross_entropy_loss(&logits, &vec![1u8; 4]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_class() {
        let logits = Tensor4::<f64>::zeros(1, 4, 1, 1);
        assert!(matches!(
            cross_entropy_loss(&logits, &[4]),
            Err(NnError::ClassOutOfRange { class: 4, num_classes: 4 })
        ));
        assert!(matches!(
            cross_entropy_loss(&logits, &[0, 0]),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn focal_matches_hand_computed_half_probability() {
        // Two classes with equal logits: p_t = 0.5, gamma = 2, alpha = 1
        // gives -(1-0.5)^2 ln(0.5) = 0.25 ln 2.
        let logits = Tensor4::<f64>::zeros(1, 2, 1, 1);
        let params = FocalLossParams::new(2.0, vec![1.0, 1.0]).unwrap();
        let (loss, _) = focal_loss(&logits, &[0], &params).unwrap();
        assert!((loss - 0.25 * 2.0f64.ln()).abs() < 1e-12);
        assert!((loss - 0.173_286_795_139_986_3).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let logits = Tensor4::<f64>::random_uniform(2, 4, 4, 4, -3.0, 3.0, 21);
        let targets: Vec<u8> = (0..32).map(|i| (i % 4) as u8).collect();
        let params = FocalLossParams::new(0.0, vec![1.0; 4]).unwrap();
        let (fl, fg) = focal_loss(&logits, &targets, &params).unwrap();
        let (ce, cg) = cross_entropy_loss(&logits, &targets).unwrap();
        assert!((fl - ce).abs() < 1e-14);
        for (a, b) in fg.data().iter().zip(cg.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn focal_downweights_easy_pixels() {
        // gamma > 0 must shrink the loss contribution of well-classified
        // pixels relative to cross-entropy.
        let logits = Tensor4::<f64>::from_fn(1, 2, 1, 1, |_, c, _, _| if c == 0 { 3.0 } else { 0.0 });
        let params = FocalLossParams::new(2.0, vec![1.0, 1.0]).unwrap();
        let (fl, _) = focal_loss(&logits, &[0], &params).unwrap();
        let (ce, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(fl < ce * 0.01);
    }

    #[test]
    fn focal_rejects_bad_parameters() {
        assert!(FocalLossParams::<f64>::new(-0.5, vec![1.0]).is_err());
        assert!(FocalLossParams::<f64>::new(2.0, vec![1.0, 0.0]).is_err());
        let logits = Tensor4::<f64>::zeros(1, 4, 1, 1);
        let short = FocalLossParams::new(2.0, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            focal_loss(&logits, &[0], &short),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn entropy_spans_zero_to_ln_c() {
        let uniform = Tensor4::<f64>::zeros(1, 4, 2, 2);
        let ent = prediction_entropy(&uniform);
        assert_eq!(ent.dims(), (1, 1, 2, 2));
        assert!(ent.data().iter().all(|&e| (e - 4.0f64.ln()).abs() < 1e-9));

        let peaked = Tensor4::<f64>::from_fn(1, 4, 1, 1, |_, c, _, _| if c == 3 { 60.0 } else { 0.0 });
        let ent = prediction_entropy(&peaked);
        assert!(ent.at(0, 0, 0, 0) < 1e-9);
    }
}

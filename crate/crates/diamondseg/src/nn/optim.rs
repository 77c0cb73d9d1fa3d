//! Adam optimizer over flat parameter slices.

use super::{NnError, Scalar};

/// Learning rates accepted by [`AdamState::new`]. Rates outside this range
/// were unstable or uselessly slow for the segmentation models here;
/// [`AdamState::unbounded`] bypasses the check for special regimes such as
/// deliberate single-batch overfitting.
pub const LR_MIN: f64 = 6e-6;
pub const LR_MAX: f64 = 3e-4;

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Result<Self, NnError> {
        if !(LR_MIN..=LR_MAX).contains(&lr) {
            return Err(NnError::InvalidParameter(format!(
                "learning rate {lr} outside [{LR_MIN}, {LR_MAX}]"
            )));
        }
        Ok(Self::unbounded(lr))
    }

    /// Builds the state without the learning-rate range check.
    pub fn unbounded(lr: f64) -> Self {
        AdamState {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            epsilon: S::from_f64(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params[i]` and `grads[i]` must stay the
    /// same length and order across calls; moment buffers are allocated on
    /// first use.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter groups vs {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer tracks {} groups, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let corr1 = S::one() - self.beta1.powi(t);
        let corr2 = S::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "group sizes diverged: {} params, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_learning_rates() {
        assert!(AdamState::<f32>::new(1e-3).is_err());
        assert!(AdamState::<f32>::new(1e-7).is_err());
        assert!(AdamState::<f32>::new(1e-4).is_ok());
        assert_eq!(AdamState::<f32>::unbounded(0.5).lr, 0.5);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = AdamState::<f64>::new(1e-4).unwrap();
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is lr * g/(|g| + eps').
        let mut adam = AdamState::<f64>::new(2e-4).unwrap();
        let mut p = vec![0.0, 0.0];
        let g = vec![5.0, -0.01];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p[0] + 2e-4).abs() < 1e-9);
        assert!((p[1] - 2e-4).abs() < 1e-9);
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let run = || {
            let mut adam = AdamState::<f32>::new(1e-4).unwrap();
            let mut a = vec![0.5f32, -0.25, 0.125];
            let mut b = vec![1.0f32; 4];
            for step in 1..=20 {
                let ga: Vec<f32> = a.iter().map(|x| x * 0.3 + step as f32 * 0.01).collect();
                let gb: Vec<f32> = b.iter().map(|x| -x * 0.1).collect();
                adam.step(&mut [&mut a, &mut b], &[&ga, &gb]).unwrap();
            }
            (a, b, adam.step_count())
        };
        let (a1, b1, s1) = run();
        let (a2, b2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
        assert_eq!(s1, 20);
    }

    #[test]
    fn descends_a_quadratic_bowl() {
        let mut adam = AdamState::<f64>::unbounded(0.05);
        let mut p = vec![3.0, -4.0];
        for _ in 0..400 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "ended at {p:?}");
    }

    #[test]
    fn rejects_mismatched_group_shapes() {
        let mut adam = AdamState::<f64>::new(1e-4).unwrap();
        let mut p = vec![1.0];
        assert!(adam.step(&mut [&mut p], &[]).is_err());
        let g = vec![0.0, 0.0];
        assert!(adam.step(&mut [&mut p], &[&g]).is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::default()),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::invalid("optimizer", format!("`{s}` (expected adam or sgd)"))),
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Float> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<T>> = shapes.into_iter().map(|n| vec![T::zero(); n]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Float>(
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 / (1.0 - beta1.powi(t));
    let c2 = 1.0 / (1.0 - beta2.powi(t));
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one, lr, eps, c1, c2) = (T::one(), T::of(lr), T::of(eps), T::of(c1), T::of(c2));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", p.len(), g.len()),
            ));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] * c1;
            let v_hat = v[i] * c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<T: Float>(params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    let lr = T::of(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} params vs {} grads", p.len(), g.len()),
            ));
        }
        p.iter_mut().zip(g).for_each(|(p, &g)| *p = *p - lr * g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    // textbook scalar Adam
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            p - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut params = vec![(0..7).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()];
        let mut refs: Vec<(f64, ScalarAdam)> = params[0]
            .iter()
            .map(|&p| (p, ScalarAdam { m: 0.0, v: 0.0, t: 0 }))
            .collect();
        let mut state = AdamState::new([7]);
        for _ in 0..10 {
            let grads = vec![(0..7).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>()];
            adam_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            for (r, &g) in refs.iter_mut().zip(&grads[0]) {
                r.0 = r.1.step(r.0, g, 0.01);
            }
        }
        for (p, r) in params[0].iter().zip(&refs) {
            assert!((p - r.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![vec![0.5f64, -1.5], vec![3.0]];
        let before = params.clone();
        let mut state = AdamState::new([2, 1]);
        for _ in 0..5 {
            adam_step(
                &mut params,
                &[vec![0.0, 0.0], vec![0.0]],
                &mut state,
                0.1,
                0.9,
                0.999,
                1e-8,
            )
            .unwrap();
        }
        assert_eq!(params, before);
        sgd_step(&mut params, &[vec![0.0, 0.0], vec![0.0]], 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut params = vec![vec![0.0f64; 3]];
        let mut state = AdamState::new([3]);
        let grads = vec![vec![0.3, -5.0, 1e-3]];
        let mut last = params[0].clone();
        for _ in 0..200 {
            adam_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            let deltas: Vec<f64> = params[0].iter().zip(&last).map(|(a, b)| (a - b).abs()).collect();
            last = params[0].clone();
            assert!(deltas.iter().all(|&d| d <= 0.01 * (1.0 + 1e-6)));
        }
        let final_step: Vec<f64> = {
            let before = params[0].clone();
            adam_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            params[0].iter().zip(&before).map(|(a, b)| (a - b).abs()).collect()
        };
        assert!(final_step.iter().all(|&d| (d - 0.01).abs() < 1e-4), "{final_step:?}");
    }

    #[test]
    fn shape_errors() {
        let mut state = AdamState::<f64>::new([2]);
        assert!(adam_step(&mut [vec![0.0; 2]], &[vec![0.0; 3]], &mut state, 0.1, 0.9, 0.999, 1e-8).is_err());
        assert!(sgd_step(&mut [vec![0.0; 2]], &[], 0.1).is_err());
        assert_eq!("sgd".parse::<Optimizer>().unwrap(), Optimizer::Sgd);
        assert!("rmsprop".parse::<Optimizer>().is_err());
    }
}

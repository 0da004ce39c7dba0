//! Class-weighted cross-entropy plus weighted soft Dice.
//!
//! Both losses take a binary ground truth `p` and a prediction `p̂` of equal
//! shape. `β` up-weights the changed class. Cross-entropy is averaged over
//! pixels; Dice sums over every pixel it is given and keeps `+1` smoothing
//! in numerator and denominator.

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn new(beta: f64) -> Self {
        LossConfig {
            beta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("{} must be positive", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid("epsilon", format!("{} not in (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }

    pub fn total<T: Float>(&self, p: &Tensor<T>, p_hat: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        total_loss_eps(p, p_hat, self.beta, self.epsilon)
    }
}

fn check<T: Float>(op: &'static str, p: &Tensor<T>, p_hat: &Tensor<T>) -> Result<()> {
    if p.shape() != p_hat.shape() {
        return Err(Error::shape(
            op,
            format!("target {:?} vs prediction {:?}", p.shape(), p_hat.shape()),
        ));
    }
    if p.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("target", format!("{op} needs a binary ground truth")));
    }
    Ok(())
}

/// `mean(-(β p ln p̂ + (1 - p) ln(1 - p̂)))` with `p̂` clamped to `[ε, 1 - ε]`.
pub fn weighted_cross_entropy_eps<T: Float>(
    p: &Tensor<T>,
    p_hat: &Tensor<T>,
    beta: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    check("weighted_cross_entropy", p, p_hat)?;
    let q = p_hat.clamp(T::of(eps), T::of(1.0 - eps));
    let pos = p.mul(&q.log()?)?.scale(T::of(beta));
    let not_p = p.neg().add_scalar(T::one());
    let neg = not_p.mul(&q.neg().add_scalar(T::one()).log()?)?;
    Ok(pos.add(&neg)?.mean().neg())
}

pub fn weighted_cross_entropy<T: Float>(p: &Tensor<T>, p_hat: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    weighted_cross_entropy_eps(p, p_hat, beta, DEFAULT_EPSILON)
}

/// `1 - (2β Σ p p̂ + 1) / (β Σ p + β Σ p̂ + 1)`.
pub fn weighted_dice<T: Float>(p: &Tensor<T>, p_hat: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    check("weighted_dice", p, p_hat)?;
    let b = T::of(beta);
    let num = p.mul(p_hat)?.sum().scale(b + b).add_scalar(T::one());
    let den = p.sum().add(&p_hat.sum())?.scale(b).add_scalar(T::one());
    Ok(num.div(&den)?.neg().add_scalar(T::one()))
}

fn total_loss_eps<T: Float>(p: &Tensor<T>, p_hat: &Tensor<T>, beta: f64, eps: f64) -> Result<Tensor<T>> {
    weighted_cross_entropy_eps(p, p_hat, beta, eps)?.add(&weighted_dice(p, p_hat, beta)?)
}

pub fn total_loss<T: Float>(p: &Tensor<T>, p_hat: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    total_loss_eps(p, p_hat, beta, DEFAULT_EPSILON)
}

/// Unchanged-to-changed pixel ratio over a set of labelled pairs.
pub fn balance_beta(pairs: &[SamplePair]) -> Result<f64> {
    let (mut pos, mut total) = (0usize, 0usize);
    for pair in pairs {
        pos += pair.label.positives();
        total += pair.label.len();
    }
    let neg = total - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "beta",
            format!(
                "cannot balance classes with {pos} changed and {neg} unchanged pixels; set the loss beta explicitly"
            ),
        ));
    }
    Ok(neg as f64 / pos as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_generate, Mask, SynthConfig};
    use crate::tensor::grad_check;

    const LN2: f64 = std::f64::consts::LN_2;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let p: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        (t(&p), t(&q))
    }

    // textbook unweighted forms, written independently of the tensor ops
    fn plain_bce(p: &[f64], q: &[f64]) -> f64 {
        let s: f64 = p
            .iter()
            .zip(q)
            .map(|(&p, &q)| if p == 1.0 { -q.ln() } else { -(1.0 - q).ln() })
            .sum();
        s / p.len() as f64
    }

    fn plain_dice(p: &[f64], q: &[f64]) -> f64 {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut sq = 0.0;
        for (a, b) in p.iter().zip(q) {
            inter += a * b;
            sp += a;
            sq += b;
        }
        1.0 - (2.0 * inter + 1.0) / (sp + sq + 1.0)
    }

    #[test]
    fn cross_entropy_closed_forms() {
        for beta in [0.5, 1.0, 3.0, 9.0] {
            let l = weighted_cross_entropy(&t(&[0.0]), &t(&[0.5]), beta)
                .unwrap()
                .item()
                .unwrap();
            assert!((l - LN2).abs() < 1e-9);
        }
        let l = weighted_cross_entropy(&t(&[1.0]), &t(&[0.5]), 2.0)
            .unwrap()
            .item()
            .unwrap();
        assert!((l - 2.0 * LN2).abs() < 1e-9);
        let l = weighted_cross_entropy(&t(&[1.0]), &t(&[1.0 - 1e-7]), 1.0)
            .unwrap()
            .item()
            .unwrap();
        assert!(l < 2e-7);
        // saturated predictions are clamped, not infinite
        let l = weighted_cross_entropy(&t(&[1.0]), &t(&[0.0]), 1.0)
            .unwrap()
            .item()
            .unwrap();
        assert!((l - (1e7f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn dice_closed_forms() {
        for n in [1, 5, 100] {
            let ones = Tensor::<f64>::full(&[n], 1.0);
            let zeros = Tensor::<f64>::zeros(&[n]);
            assert!(weighted_dice(&ones, &ones, 1.0).unwrap().item().unwrap().abs() < 1e-9);
            assert!(weighted_dice(&zeros, &zeros, 1.0).unwrap().item().unwrap().abs() < 1e-9);
            let d = weighted_dice(&ones, &zeros, 1.0).unwrap().item().unwrap();
            assert!((d - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-9);
        }
        let d = weighted_dice(&t(&[1.0]), &t(&[0.0]), 1.0).unwrap().item().unwrap();
        assert!((d - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unit_beta_matches_plain_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (p, q) = random_case(&mut rng, 64);
            let bce = weighted_cross_entropy(&p, &q, 1.0).unwrap().item().unwrap();
            let dice = weighted_dice(&p, &q, 1.0).unwrap().item().unwrap();
            assert!((bce - plain_bce(p.data(), q.data())).abs() < 1e-12);
            assert!((dice - plain_dice(p.data(), q.data())).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_sum_and_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (p, q) = random_case(&mut rng, 32);
            let beta = rng.gen_range(0.1..10.0);
            let wce = weighted_cross_entropy(&p, &q, beta).unwrap().item().unwrap();
            let dice = weighted_dice(&p, &q, beta).unwrap().item().unwrap();
            let total = total_loss(&p, &q, beta).unwrap().item().unwrap();
            assert!((total - wce - dice).abs() < 1e-12);
            assert!(total >= wce && total >= dice);
            assert!((0.0..1.0).contains(&dice));
        }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let eps = DEFAULT_EPSILON;
        let p = t(&[1.0, 0.0, 0.0, 1.0, 1.0]);
        let q = p.clamp(eps, 1.0 - eps);
        let total = total_loss(&p, &q, 1.0).unwrap().item().unwrap();
        assert!(total < 2.0 * eps * eps.ln().abs(), "{total}");
    }

    #[test]
    fn cross_entropy_is_monotone_in_prediction() {
        let qs: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for beta in [0.3, 1.0, 7.0] {
            let at = |p: f64, q: f64| {
                weighted_cross_entropy(&t(&[p]), &t(&[q]), beta)
                    .unwrap()
                    .item()
                    .unwrap()
            };
            for w in qs.windows(2) {
                assert!(at(1.0, w[1]) < at(1.0, w[0]));
                assert!(at(0.0, w[1]) > at(0.0, w[0]));
            }
        }
    }

    #[test]
    fn gradient_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (p, q) = random_case(&mut rng, 48);
            let q = q.with_grad();
            let loss = total_loss(&p, &q, 2.5).unwrap();
            let g = loss.gradients().unwrap().get_or_zeros(&q);
            let stepped: Vec<f64> = q.data().iter().zip(&g).map(|(v, g)| v - 1e-3 * g).collect();
            let after = total_loss(&p, &t(&stepped), 2.5).unwrap().item().unwrap();
            assert!(after < loss.item().unwrap());
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let (p, q) = random_case(&mut rng, 16);
            let beta = rng.gen_range(0.5..5.0);
            let r = grad_check(|x| total_loss(&p, &x[0], beta), &[q], 1e-6, 1e-4).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn shape_and_target_errors() {
        assert!(total_loss(&t(&[1.0, 0.0]), &t(&[0.5]), 1.0).is_err());
        assert!(total_loss(&t(&[0.5]), &t(&[0.5]), 1.0).is_err());
        assert!(LossConfig::new(0.0).validate().is_err());
        assert!(LossConfig {
            beta: 1.0,
            epsilon: 0.5
        }
        .validate()
        .is_err());
    }

    fn labelled(id: &str, data: Vec<u8>) -> SamplePair {
        let n = data.len();
        let img = Tensor::zeros(&[1, 1, n]);
        SamplePair::new(id, img.clone(), img, Mask::new(1, n, data).unwrap()).unwrap()
    }

    #[test]
    fn balance_ratio() {
        let half = labelled("a", vec![1, 0, 1, 0]);
        assert_eq!(balance_beta(&[half]).unwrap(), 1.0);
        let mut data = vec![0u8; 1000];
        data[..100].iter_mut().for_each(|v| *v = 1);
        let pairs = [labelled("a", data[..500].to_vec()), labelled("b", data[500..].to_vec())];
        assert_eq!(balance_beta(&pairs).unwrap(), 9.0);
        let err = balance_beta(&[labelled("z", vec![0, 0])]).unwrap_err();
        assert!(err.to_string().contains("beta"));
        assert!(balance_beta(&[labelled("o", vec![1, 1])]).is_err());
    }

    #[test]
    fn balance_matches_synthetic_pixel_counts() {
        for f in [0.1, 0.2] {
            let pairs = synth_generate(&SynthConfig {
                seed: 3,
                count: 60,
                height: 48,
                width: 48,
                change_fraction: f,
            })
            .unwrap();
            let beta = balance_beta(&pairs).unwrap();
            // independent pixel count
            let pos: usize = pairs.iter().flat_map(|p| p.label.data()).filter(|&&v| v == 1).count();
            let total = pairs.len() * 48 * 48;
            assert!((beta - (total - pos) as f64 / pos as f64).abs() < 1e-12);
            let target = (1.0 - f) / f;
            assert!(
                (beta - target).abs() / target < 0.1,
                "beta {beta} vs {target} for f={f}"
            );
        }
    }
}

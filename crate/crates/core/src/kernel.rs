//! Covariance functions over state-action inputs and the temporal-difference
//! kernel constructs built from them.
//!
//! For a transition `x_prev -> x_new` with discount `g`, the TD kernel vector
//! over a support set `S` is `k_S(x_prev) - g k_S(x_new)` and the TD kernel
//! scalar is `k(x_prev, x_prev) - 2 g k(x_prev, x_new) + g^2 k(x_new, x_new)`,
//! i.e. the squared feature-space norm of `phi(x_prev) - g phi(x_new)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_discount, Error, Result};

/// A state-action input: state coordinates followed by action coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateAction(Vec<f64>);

impl StateAction {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidParameter("state-action input has no coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "state-action coordinates must be finite: {coords:?}"
            )));
        }
        Ok(Self(coords))
    }

    /// Concatenates state and action coordinates.
    pub fn from_parts(state: &[f64], action: &[f64]) -> Result<Self> {
        Self::new(state.iter().chain(action).copied().collect())
    }

    pub fn scalar(x: f64) -> Result<Self> {
        Self::new(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &StateAction) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `s_f^2 exp(-0.5 sum_d ((a_d - b_d) / l_d)^2)`
    #[default]
    SquaredExponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::SquaredExponential,
            lengthscales,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same lengthscale on every one of `dim` coordinates.
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64) -> Result<Self> {
        Self::squared_exponential(vec![lengthscale; dim], signal_variance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {l}")));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Prior variance `k(x, x)`; constant for stationary families.
    pub fn prior_variance(&self) -> f64 {
        self.signal_variance
    }

    fn check(&self, x: &StateAction) -> Result<()> {
        if x.dim() == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            })
        }
    }

    fn check_all(&self, xs: &[StateAction]) -> Result<()> {
        xs.iter().try_for_each(|x| self.check(x))
    }

    fn eval_unchecked(&self, a: &StateAction, b: &StateAction) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let r2: f64 = a
                    .0
                    .iter()
                    .zip(&b.0)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| {
                        let d = (x - y) / l;
                        d * d
                    })
                    .sum();
                self.signal_variance * (-0.5 * r2).exp()
            }
        }
    }

    pub fn eval(&self, a: &StateAction, b: &StateAction) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.eval_unchecked(a, b))
    }

    /// `[k(xs[0], x), ..., k(xs[n-1], x)]`
    pub fn kernel_vector(&self, xs: &[StateAction], x: &StateAction) -> Result<DVector<f64>> {
        self.check(x)?;
        self.check_all(xs)?;
        Ok(DVector::from_iterator(
            xs.len(),
            xs.iter().map(|xi| self.eval_unchecked(xi, x)),
        ))
    }

    /// `[i, j] = k(xs[i], zs[j])`
    pub fn kernel_matrix(&self, xs: &[StateAction], zs: &[StateAction]) -> Result<DMatrix<f64>> {
        self.check_all(xs)?;
        self.check_all(zs)?;
        let symmetric = std::ptr::eq(xs, zs);
        let mut m = DMatrix::zeros(xs.len(), zs.len());
        for j in 0..zs.len() {
            let lo = if symmetric { j } else { 0 };
            for i in lo..xs.len() {
                m[(i, j)] = self.eval_unchecked(&xs[i], &zs[j]);
            }
        }
        if symmetric {
            for j in 0..zs.len() {
                for i in 0..j {
                    m[(i, j)] = m[(j, i)];
                }
            }
        }
        Ok(m)
    }

    /// `k_S(x_prev) - gamma k_S(x_new)` over the support `support`.
    pub fn delta_vector(
        &self,
        support: &[StateAction],
        x_prev: &StateAction,
        x_new: &StateAction,
        gamma: f64,
    ) -> Result<DVector<f64>> {
        check_discount(gamma)?;
        self.check(x_prev)?;
        self.check(x_new)?;
        self.check_all(support)?;
        Ok(DVector::from_iterator(
            support.len(),
            support
                .iter()
                .map(|s| self.eval_unchecked(s, x_prev) - gamma * self.eval_unchecked(s, x_new)),
        ))
    }

    /// `k(x_prev, x_prev) - 2 gamma k(x_prev, x_new) + gamma^2 k(x_new, x_new)`
    pub fn delta2(&self, x_prev: &StateAction, x_new: &StateAction, gamma: f64) -> Result<f64> {
        check_discount(gamma)?;
        self.check(x_prev)?;
        self.check(x_new)?;
        let pp = self.eval_unchecked(x_prev, x_prev);
        let pn = self.eval_unchecked(x_prev, x_new);
        let nn = self.eval_unchecked(x_new, x_new);
        Ok(pp - 2.0 * gamma * pn + gamma * gamma * nn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(c: &[f64]) -> StateAction {
        StateAction::new(c.to_vec()).unwrap()
    }

    fn unit_1d() -> KernelSpec {
        KernelSpec::isotropic(1, 1.0, 1.0).unwrap()
    }

    fn random_points(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<StateAction> {
        (0..n)
            .map(|_| pt(&(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let spec = KernelSpec::squared_exponential(vec![0.3, 2.0], 2.5).unwrap();
        let a = pt(&[0.4, -1.0]);
        assert_eq!(spec.eval(&a, &a).unwrap(), 2.5);
    }

    #[test]
    fn decays_to_zero_far_away() {
        let v = unit_1d().eval(&pt(&[0.0]), &pt(&[20.0])).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn unit_distance_closed_form() {
        let v = unit_1d().eval(&pt(&[0.0]), &pt(&[1.0])).unwrap();
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn eval_is_symmetric_and_checks_dims() {
        let spec = KernelSpec::squared_exponential(vec![0.7, 1.3], 1.1).unwrap();
        let (a, b) = (pt(&[0.1, 0.2]), pt(&[-0.5, 0.9]));
        assert_eq!(spec.eval(&a, &b).unwrap(), spec.eval(&b, &a).unwrap());
        assert!(matches!(
            spec.eval(&a, &pt(&[1.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::squared_exponential(vec![0.0], 1.0).is_err());
        assert!(KernelSpec::squared_exponential(vec![1.0], -1.0).is_err());
        assert!(KernelSpec::squared_exponential(vec![], 1.0).is_err());
        assert!(StateAction::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn vector_cases() {
        let spec = KernelSpec::isotropic(2, 0.8, 1.7).unwrap();
        let x = pt(&[0.3, 0.3]);
        assert_eq!(spec.kernel_vector(std::slice::from_ref(&x), &x).unwrap()[0], 1.7);

        let same = vec![pt(&[1.0, 0.0]); 3];
        let v = spec.kernel_vector(&same, &x).unwrap();
        assert!(v.iter().all(|e| *e == v[0]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random_points(5, 2, &mut rng);
        let q = random_points(1, 2, &mut rng).remove(0);
        let v = spec.kernel_vector(&xs, &q).unwrap();
        for (i, xi) in xs.iter().enumerate() {
            assert_eq!(v[i], spec.eval(xi, &q).unwrap());
        }
    }

    #[test]
    fn matrix_cases() {
        let spec = KernelSpec::isotropic(2, 0.9, 1.0).unwrap();
        let x = pt(&[0.0, 1.0]);
        let single = spec.kernel_matrix(std::slice::from_ref(&x), std::slice::from_ref(&x)).unwrap();
        assert_eq!(single[(0, 0)], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random_points(6, 2, &mut rng);
        let gram = spec.kernel_matrix(&xs, &xs).unwrap();
        assert_eq!(gram, gram.transpose());
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        assert!(eig.min() >= -1e-10);

        let zs = random_points(3, 2, &mut rng);
        let cross = spec.kernel_matrix(&xs[..4], &zs).unwrap();
        let swapped = spec.kernel_matrix(&zs, &xs[..4]).unwrap();
        assert_eq!(cross, swapped.transpose());
        assert_eq!(cross.shape(), (4, 3));
    }

    #[test]
    fn delta_vector_cases() {
        let spec = KernelSpec::isotropic(1, 0.5, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let support = random_points(4, 1, &mut rng);
        let (xp, xn) = (pt(&[0.2]), pt(&[0.9]));

        let at_zero = spec.delta_vector(&support, &xp, &xn, 0.0).unwrap();
        assert_eq!(at_zero, spec.kernel_vector(&support, &xp).unwrap());

        let cancel = spec.delta_vector(&support, &xp, &xp, 1.0).unwrap();
        assert!(cancel.iter().all(|e| *e == 0.0));

        let composed = spec.kernel_vector(&support, &xp).unwrap()
            - 0.9 * spec.kernel_vector(&support, &xn).unwrap();
        let direct = spec.delta_vector(&support, &xp, &xn, 0.9).unwrap();
        assert_abs_diff_eq!(direct, composed, epsilon = 1e-15);

        assert!(matches!(
            spec.delta_vector(&support, &xp, &xn, 1.5),
            Err(Error::InvalidDiscount(_))
        ));
    }

    #[test]
    fn delta2_cases() {
        let spec = unit_1d();
        let (a, b) = (pt(&[0.0]), pt(&[1.0]));
        assert_eq!(spec.delta2(&a, &b, 0.0).unwrap(), 1.0);
        assert_eq!(spec.delta2(&a, &a, 1.0).unwrap(), 0.0);
        let expected = 1.0 - 2.0 * 0.5 * (-0.5f64).exp() + 0.25;
        assert_abs_diff_eq!(spec.delta2(&a, &b, 0.5).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(spec.delta2(&a, &b, 0.5).unwrap(), 0.64347, epsilon = 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn coords(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-5.0f64..5.0, dim)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]

            #[test]
            fn delta2_nonnegative_and_quadratic_form(
                a in coords(2), b in coords(2), gamma in 0.0f64..=1.0,
                l0 in 0.05f64..5.0, l1 in 0.05f64..5.0, sf2 in 0.01f64..10.0,
            ) {
                let spec = KernelSpec::squared_exponential(vec![l0, l1], sf2).unwrap();
                let (a, b) = (StateAction::new(a).unwrap(), StateAction::new(b).unwrap());
                let d2 = spec.delta2(&a, &b, gamma).unwrap();
                prop_assert!(d2 >= -1e-12);

                let pair = [a.clone(), b.clone()];
                let k = spec.kernel_matrix(&pair, &pair).unwrap();
                let h = DVector::from_vec(vec![1.0, -gamma]);
                let quad = h.dot(&(&k * &h));
                prop_assert!((quad - d2).abs() <= 1e-12 * sf2.max(1.0));
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn gram_with_tiny_jitter_factorizes(seed in any::<u64>(), n in 1usize..15) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = KernelSpec::isotropic(2, 0.5, 1.0).unwrap();
                let xs = random_points(n, 2, &mut rng);
                let mut gram = spec.kernel_matrix(&xs, &xs).unwrap();
                for i in 0..n {
                    gram[(i, i)] += 1e-10;
                }
                prop_assert!(nalgebra::Cholesky::new(gram).is_some());
            }
        }
    }
}

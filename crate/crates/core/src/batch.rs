//! Dense from-scratch posteriors: exact GP-SARSA, sparse pseudo-input
//! GP-SARSA, its evidence, and derivative-free pseudo-input refinement.
//!
//! With `V = H K_tk` (one row per transition) the sparse model keeps three
//! inverses:
//!
//! ```text
//! A = K_kk^-1
//! B = diag(b),  1/b_j = [H K_tt H']_jj - v_j' A v_j + sigma^2
//! C = (K_kk + V' B V)^-1
//! ```
//!
//! and is summarized by `alpha = C V' B r` and `P = A - C`, giving predictive
//! mean `k_k(x)' alpha` and variance `k(x, x) - k_k(x)' P k_k(x)`.

use nalgebra::{Cholesky, DMatrix, DVector, LU};

use crate::blockinv::{check_leading_schur, dense_spd_inverse, symmetrize, DEGENERACY_THRESHOLD};
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, StateAction};
use crate::tdmodel::{assemble_td_gram, TransitionDataset};

/// Pairwise distances at or below this are treated as duplicates.
pub const DUPLICATE_DISTANCE: f64 = 1e-12;

/// Negative variances down to `-VARIANCE_TOLERANCE * k(x, x)` are clamped
/// to zero; anything lower is reported.
pub const VARIANCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInputSet {
    points: Vec<StateAction>,
}

impl PseudoInputSet {
    pub fn new(points: Vec<StateAction>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidShape("pseudo-input set is empty".into()));
        }
        let dim = points[0].dim();
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        for (j, pj) in points.iter().enumerate() {
            if points[..j].iter().any(|pi| pi.distance(pj) <= DUPLICATE_DISTANCE) {
                return Err(Error::DegenerateBorder {
                    index: j,
                    schur: 0.0,
                    threshold: DEGENERACY_THRESHOLD,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[StateAction] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn with_point(&self, z: StateAction) -> Result<Self> {
        let mut points = self.points.clone();
        points.push(z);
        Self::new(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveMoments {
    /// Clamps tolerably negative variances to zero.
    pub fn new(mean: f64, variance: f64, prior_variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() {
            return Err(Error::NumericalDegeneracy(format!(
                "non-finite predictive moments ({mean}, {variance})"
            )));
        }
        if variance < -VARIANCE_TOLERANCE * prior_variance.max(1.0) {
            return Err(Error::NumericalDegeneracy(format!(
                "predictive variance {variance:e} is negative"
            )));
        }
        Ok(Self {
            mean,
            variance: variance.max(0.0),
        })
    }

    pub fn prior(spec: &KernelSpec) -> Self {
        Self {
            mean: 0.0,
            variance: spec.prior_variance(),
        }
    }
}

/// Input-independent parameters of the sparse posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub alpha: DVector<f64>,
    pub p: DMatrix<f64>,
    pub pseudo: PseudoInputSet,
    pub spec: KernelSpec,
}

impl PosteriorParams {
    pub fn prior(pseudo: PseudoInputSet, spec: KernelSpec) -> Self {
        let k = pseudo.len();
        Self {
            alpha: DVector::zeros(k),
            p: DMatrix::zeros(k, k),
            pseudo,
            spec,
        }
    }

    /// Mean `k_k(x)' alpha`, variance `k(x, x) - k_k(x)' P k_k(x)`.
    pub fn predict(&self, x: &StateAction) -> Result<PredictiveMoments> {
        predict_from_parts(&self.spec, self.pseudo.points(), &self.alpha, &self.p, x)
    }
}

pub(crate) fn predict_from_parts(
    spec: &KernelSpec,
    pseudo: &[StateAction],
    alpha: &DVector<f64>,
    p: &DMatrix<f64>,
    x: &StateAction,
) -> Result<PredictiveMoments> {
    let kx = spec.kernel_vector(pseudo, x)?;
    let prior = spec.eval(x, x)?;
    let mean = kx.dot(alpha);
    let variance = prior - kx.dot(&(p * &kx));
    PredictiveMoments::new(mean, variance, prior)
}

/// Every block of the sparse posterior, computed densely.
#[derive(Debug, Clone)]
pub struct SparseBlocks {
    /// `K_kk^-1`
    pub a: DMatrix<f64>,
    /// Diagonal of `B`.
    pub b: DVector<f64>,
    /// `(K_kk + F)^-1`
    pub c: DMatrix<f64>,
    /// `V' B V`
    pub f: DMatrix<f64>,
    /// `V' B r`
    pub rho: DVector<f64>,
    /// `V = H K_tk`, one row per transition.
    pub v: DMatrix<f64>,
}

impl SparseBlocks {
    pub fn alpha(&self) -> DVector<f64> {
        &self.c * &self.rho
    }

    pub fn p(&self) -> DMatrix<f64> {
        let mut p = &self.a - &self.c;
        symmetrize(&mut p);
        p
    }
}

fn require_transitions(dataset: &TransitionDataset) -> Result<()> {
    if dataset.num_inputs() < 2 {
        return Err(Error::InvalidShape(
            "posterior needs at least two inputs (one transition)".into(),
        ));
    }
    Ok(())
}

pub(crate) fn pseudo_gram(spec: &KernelSpec, pseudo: &PseudoInputSet) -> Result<DMatrix<f64>> {
    let k_uu = spec.kernel_matrix(pseudo.points(), pseudo.points())?;
    check_leading_schur(&k_uu, DEGENERACY_THRESHOLD)?;
    Ok(k_uu)
}

/// Per-transition residual variance `1/b_j` below which the update is refused.
pub(crate) fn residual_floor(noise_var: f64) -> f64 {
    noise_var * 1e-10
}

pub fn spgp_sarsa_blocks(
    dataset: &TransitionDataset,
    pseudo: &PseudoInputSet,
    spec: &KernelSpec,
) -> Result<SparseBlocks> {
    require_transitions(dataset)?;
    let k_uu = pseudo_gram(spec, pseudo)?;
    let a = dense_spd_inverse(&k_uu, 0.0)?.into_inner();

    let gram = assemble_td_gram(dataset, spec)?;
    let k_tu = spec.kernel_matrix(dataset.inputs(), pseudo.points())?;
    let v = gram.bellman().apply(&k_tu)?;

    let n = dataset.num_transitions();
    let sigma2 = dataset.noise_var();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        let vj = v.row(j).transpose();
        let residual = gram.k_rr[(j, j)] - vj.dot(&(&a * &vj)) + sigma2;
        if !(residual > residual_floor(sigma2)) {
            return Err(Error::NumericalDegeneracy(format!(
                "transition {j}: 1/b = {residual:e} is not positive"
            )));
        }
        b[j] = residual.recip();
    }

    let bv = DMatrix::from_fn(n, pseudo.len(), |i, j| b[i] * v[(i, j)]);
    let mut f = v.transpose() * &bv;
    symmetrize(&mut f);
    let c = dense_spd_inverse(&(&k_uu + &f), 0.0)?.into_inner();
    let rho = bv.transpose() * dataset.reward_vector();
    Ok(SparseBlocks { a, b, c, f, rho, v })
}

pub fn spgp_sarsa_batch_params(
    dataset: &TransitionDataset,
    pseudo: &PseudoInputSet,
    spec: &KernelSpec,
) -> Result<PosteriorParams> {
    let blocks = spgp_sarsa_blocks(dataset, pseudo, spec)?;
    Ok(PosteriorParams {
        alpha: blocks.alpha(),
        p: blocks.p(),
        pseudo: pseudo.clone(),
        spec: spec.clone(),
    })
}

/// The sparse predictive moments assembled directly from
/// `M = K_uu + K_ur L^-1 K_ru` and `L = Q + sigma^2 I`, with
/// `Q = diag(K_rr - K_ru K_uu^-1 K_ur)`, using LU solves and the full
/// `K_rr`. Algebraically identical to [`PosteriorParams::predict`].
pub fn spgp_predict_direct(
    dataset: &TransitionDataset,
    pseudo: &PseudoInputSet,
    spec: &KernelSpec,
    x_star: &StateAction,
) -> Result<PredictiveMoments> {
    require_transitions(dataset)?;
    let k_uu = pseudo_gram(spec, pseudo)?;
    let gram = assemble_td_gram(dataset, spec)?;
    let k_ur = gram
        .bellman()
        .apply(&spec.kernel_matrix(dataset.inputs(), pseudo.points())?)?
        .transpose();

    let lu_uu = LU::new(k_uu.clone());
    let solved_ur = lu_uu
        .solve(&k_ur)
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let nystrom = k_ur.transpose() * &solved_ur;
    let q = DVector::from_fn(dataset.num_transitions(), |j, _| {
        gram.k_rr[(j, j)] - nystrom[(j, j)]
    });
    let lambda = q.add_scalar(dataset.noise_var());

    let k_ur_scaled = DMatrix::from_fn(k_ur.nrows(), k_ur.ncols(), |i, j| k_ur[(i, j)] / lambda[j]);
    let m = &k_uu + &k_ur_scaled * k_ur.transpose();
    let lu_m = LU::new(m);

    let k_us = spec.kernel_vector(pseudo.points(), x_star)?;
    let weighted_r = &k_ur_scaled * dataset.reward_vector();
    let m_solve_r = lu_m
        .solve(&weighted_r)
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let mean = k_us.dot(&m_solve_r);

    let uu_solve = lu_uu
        .solve(&k_us)
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let m_solve = lu_m
        .solve(&k_us)
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let prior = spec.eval(x_star, x_star)?;
    let variance = prior - k_us.dot(&(uu_solve - m_solve));
    PredictiveMoments::new(mean, variance, prior)
}

/// The exact GP-SARSA posterior, fitted once and queried many times.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    inputs: Vec<StateAction>,
    bellman: crate::tdmodel::BellmanMatrix,
    spec: KernelSpec,
    /// `(K_rr + sigma^2 I)^-1`
    inv: DMatrix<f64>,
    /// `(K_rr + sigma^2 I)^-1 r`
    weights: DVector<f64>,
}

impl ExactPosterior {
    pub fn fit(dataset: &TransitionDataset, spec: &KernelSpec) -> Result<Self> {
        require_transitions(dataset)?;
        let gram = assemble_td_gram(dataset, spec)?;
        let mut k = gram.k_rr.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += dataset.noise_var();
        }
        let inv = dense_spd_inverse(&k, 0.0)?.into_inner();
        let weights = &inv * dataset.reward_vector();
        Ok(Self {
            inputs: dataset.inputs().to_vec(),
            bellman: gram.bellman().clone(),
            spec: spec.clone(),
            inv,
            weights,
        })
    }

    pub fn predict(&self, x: &StateAction) -> Result<PredictiveMoments> {
        let k_r = self
            .bellman
            .apply_vector(&self.spec.kernel_vector(&self.inputs, x)?)?;
        let prior = self.spec.eval(x, x)?;
        let mean = k_r.dot(&self.weights);
        let variance = prior - k_r.dot(&(&self.inv * &k_r));
        PredictiveMoments::new(mean, variance, prior)
    }
}

pub fn gp_sarsa_posterior(
    dataset: &TransitionDataset,
    spec: &KernelSpec,
    x_star: &StateAction,
) -> Result<PredictiveMoments> {
    ExactPosterior::fit(dataset, spec)?.predict(x_star)
}

/// Log evidence of the rewards under the sparse TD model
/// `r ~ N(0, V A V' + diag(Q) + sigma^2 I)`, evaluated in `O(t k^2)` through
/// the Woodbury and determinant identities.
pub fn log_marginal_likelihood(
    dataset: &TransitionDataset,
    pseudo: &PseudoInputSet,
    spec: &KernelSpec,
) -> Result<f64> {
    require_transitions(dataset)?;
    let k_uu = pseudo_gram(spec, pseudo)?;
    let chol_uu = Cholesky::new(k_uu.clone()).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let bellman = dataset.bellman()?;
    let k_tu = spec.kernel_matrix(dataset.inputs(), pseudo.points())?;
    let v = bellman.apply(&k_tu)?;
    let r = dataset.reward_vector();
    let n = dataset.num_transitions();
    let sigma2 = dataset.noise_var();

    // Rows of L^-1 V' give the Nystrom diagonal without forming A.
    let solved = chol_uu.l().solve_lower_triangular(&v.transpose()).ok_or(
        Error::NotPositiveDefinite { jitter: 0.0 },
    )?;
    let inputs = dataset.inputs();
    let mut lambda = DVector::zeros(n);
    for j in 0..n {
        let d2 = spec.delta2(&inputs[j], &inputs[j + 1], dataset.effective_gamma(j))?;
        let residual = d2 - solved.column(j).norm_squared() + sigma2;
        if !(residual > residual_floor(sigma2)) {
            return Err(Error::NumericalDegeneracy(format!(
                "transition {j}: residual variance {residual:e} is not positive"
            )));
        }
        lambda[j] = residual;
    }

    let bv = DMatrix::from_fn(n, pseudo.len(), |i, j| v[(i, j)] / lambda[i]);
    let mut m = &k_uu + v.transpose() * &bv;
    symmetrize(&mut m);
    let chol_m = Cholesky::new(m).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let rho = bv.transpose() * &r;

    let quad = r.iter().zip(lambda.iter()).map(|(ri, li)| ri * ri / li).sum::<f64>()
        - rho.dot(&chol_m.solve(&rho));
    let log_det = lambda.iter().map(|l| l.ln()).sum::<f64>() + chol_m.ln_determinant()
        - chol_uu.ln_determinant();
    Ok(-0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Total likelihood evaluations, including the initial one.
    pub budget: usize,
    /// Initial perturbation per coordinate, as a multiple of its lengthscale.
    pub initial_step: f64,
    /// Search stops once every step falls below this multiple of its lengthscale.
    pub min_step: f64,
    /// Coordinates left untouched, e.g. discrete action encodings.
    pub fixed_dims: Vec<usize>,
    /// Proposals whose pseudo-input Gram matrix has a Cholesky pivot (squared)
    /// below this multiple of the signal variance are skipped, keeping the
    /// result usable by the explicit-inverse updates.
    pub min_pivot: f64,
}

impl RefineConfig {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            initial_step: 0.5,
            min_step: 1e-6,
            fixed_dims: vec![],
            min_pivot: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pseudo: PseudoInputSet,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub evaluations: usize,
}

fn is_rejected_proposal(err: &Error) -> bool {
    matches!(
        err,
        Error::DegenerateBorder { .. } | Error::NotPositiveDefinite { .. } | Error::NumericalDegeneracy(_)
    )
}

/// Fails with [`Error::DegenerateBorder`] at the first pseudo input whose
/// squared Cholesky pivot in the Gram matrix falls below
/// `min_pivot * signal_variance`.
pub fn check_conditioning(spec: &KernelSpec, pseudo: &PseudoInputSet, min_pivot: f64) -> Result<()> {
    let floor = min_pivot * spec.signal_variance;
    let pivots = check_leading_schur(&pseudo_gram(spec, pseudo)?, DEGENERACY_THRESHOLD)?;
    match pivots.iter().position(|&p| p < floor) {
        Some(index) => Err(Error::DegenerateBorder {
            index,
            schur: pivots[index],
            threshold: floor,
        }),
        None => Ok(()),
    }
}

/// Coordinate-wise pattern search on the pseudo-input coordinates.
///
/// Proposals are visited in a fixed order (point, coordinate, `+` then `-`)
/// and accepted only on strict likelihood improvement; after a sweep without
/// improvement every step is halved. Degenerate proposals are skipped.
pub fn refine_pseudo_inputs(
    dataset: &TransitionDataset,
    initial: &PseudoInputSet,
    spec: &KernelSpec,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    if config.budget == 0 {
        return Err(Error::InvalidParameter("refinement budget must be >= 1".into()));
    }
    if let Some(&d) = config.fixed_dims.iter().find(|&&d| d >= spec.dim()) {
        return Err(Error::InvalidParameter(format!(
            "fixed coordinate {d} out of range for dimension {}",
            spec.dim()
        )));
    }
    let free: Vec<usize> = (0..spec.dim()).filter(|d| !config.fixed_dims.contains(d)).collect();
    let evaluate = |set: &PseudoInputSet| -> Result<f64> {
        check_conditioning(spec, set, config.min_pivot)?;
        log_marginal_likelihood(dataset, set, spec)
    };
    let start = log_marginal_likelihood(dataset, initial, spec)?;
    let mut best = start;
    let mut points = initial.points().to_vec();
    let mut evaluations = 1;
    let mut steps: Vec<f64> = spec.lengthscales.iter().map(|l| l * config.initial_step).collect();
    let floors: Vec<f64> = spec.lengthscales.iter().map(|l| l * config.min_step).collect();

    'search: while evaluations < config.budget && !free.is_empty() {
        let mut improved = false;
        for i in 0..points.len() {
            for &d in &free {
                for sign in [1.0, -1.0] {
                    if evaluations >= config.budget {
                        break 'search;
                    }
                    let mut coords = points[i].coords().to_vec();
                    coords[d] += sign * steps[d];
                    let mut proposal = points.clone();
                    proposal[i] = StateAction::new(coords)?;
                    evaluations += 1;
                    let candidate = match PseudoInputSet::new(proposal.clone()) {
                        Ok(set) => evaluate(&set),
                        Err(e) => Err(e),
                    };
                    match candidate {
                        Ok(value) if value > best => {
                            best = value;
                            points = proposal;
                            improved = true;
                            break;
                        }
                        Ok(_) => {}
                        Err(e) if is_rejected_proposal(&e) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
            if free.iter().all(|&d| steps[d] < floors[d]) {
                break;
            }
        }
    }

    Ok(RefineOutcome {
        pseudo: PseudoInputSet::new(points)?,
        log_likelihood: best,
        initial_log_likelihood: start,
        evaluations,
    })
}

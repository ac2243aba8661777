//! Seeded fuzz generators, validation suites, the timing benchmark and
//! posterior-curve dumps.
//!
//! Errors are compared with [`relative_error`]: the absolute difference
//! divided by the larger magnitude, floored at one so that entries near zero
//! are held to an absolute tolerance.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{
    check_conditioning, refine_pseudo_inputs, spgp_predict_direct,
    spgp_sarsa_batch_params, spgp_sarsa_blocks, ExactPosterior, PseudoInputSet, RefineConfig,
};
use crate::blockinv::{dense_spd_inverse, extend_spd_inverse, SpdInverse};
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, StateAction};
use crate::recursive::RecursiveState;
use crate::simenv::{simulate, MdpSpec, Policy};
use crate::tdmodel::TransitionDataset;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Max-norm difference relative to the larger max-norm, floored at one.
pub fn max_norm_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared slices differ in length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1.0, f64::max);
    diff / scale
}

// ---------------------------------------------------------------------------
// fuzz generators

/// Hyperparameters drawn for one fuzz case.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzModel {
    pub spec: KernelSpec,
    pub gamma: f64,
    pub noise_var: f64,
}

/// Side of the box `[0, BOX]^d` that fuzzed inputs live in.
pub const FUZZ_BOX: f64 = 3.0;

pub fn random_model(rng: &mut ChaCha8Rng, dim: usize) -> Result<FuzzModel> {
    let lengthscales = (0..dim).map(|_| rng.random_range(0.7..1.5)).collect();
    Ok(FuzzModel {
        spec: KernelSpec::squared_exponential(lengthscales, rng.random_range(0.5..2.0))?,
        gamma: rng.random_range(0.5..0.95),
        noise_var: rng.random_range(0.05..0.5),
    })
}

fn uniform_point(rng: &mut ChaCha8Rng, dim: usize) -> Result<StateAction> {
    StateAction::new((0..dim).map(|_| rng.random_range(0.0..FUZZ_BOX)).collect())
}

/// `n` points in the fuzz box, pairwise at least `min_dist` apart, by
/// rejection sampling.
pub fn separated_points(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    min_dist: f64,
) -> Result<Vec<StateAction>> {
    let mut points: Vec<StateAction> = Vec::with_capacity(n);
    let mut attempts = 0;
    while points.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(Error::InvalidParameter(format!(
                "cannot place {n} points {min_dist} apart in dimension {dim}"
            )));
        }
        let x = uniform_point(rng, dim)?;
        if points.iter().all(|p| p.distance(&x) >= min_dist) {
            points.push(x);
        }
    }
    Ok(points)
}

fn smooth_reward(rng: &mut ChaCha8Rng, x: &StateAction) -> f64 {
    let c = x.coords();
    let wave: f64 = c.iter().enumerate().map(|(d, v)| (v * (d + 1) as f64).sin()).sum();
    wave + 0.1 * rng.sample::<f64, _>(StandardNormal)
}

/// A random-walk trajectory of `t` transitions, with the input scaled by
/// `step` per coordinate, reflected into the fuzz box, and episode ends with
/// probability `terminal_prob`.
pub fn random_trajectory(
    rng: &mut ChaCha8Rng,
    model: &FuzzModel,
    t: usize,
    step: f64,
    terminal_prob: f64,
) -> Result<TransitionDataset> {
    let dim = model.spec.dim();
    let mut x = uniform_point(rng, dim)?;
    let mut ds = TransitionDataset::new(x.clone(), model.gamma, model.noise_var)?;
    for _ in 0..t {
        let terminal = rng.random::<f64>() < terminal_prob;
        let next = if terminal {
            uniform_point(rng, dim)?
        } else {
            let coords = x
                .coords()
                .iter()
                .map(|v| reflect(v + step * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            StateAction::new(coords)?
        };
        let reward = smooth_reward(rng, &x);
        ds.push(reward, next.clone(), terminal)?;
        x = next;
    }
    Ok(ds)
}

fn reflect(v: f64) -> f64 {
    let period = 2.0 * FUZZ_BOX;
    let r = v.rem_euclid(period);
    if r > FUZZ_BOX {
        period - r
    } else {
        r
    }
}

/// A trajectory whose inputs are pairwise `min_dist` apart, so that the
/// inputs themselves form a well-conditioned pseudo-input set.
pub fn separated_trajectory(
    rng: &mut ChaCha8Rng,
    model: &FuzzModel,
    t: usize,
    min_dist: f64,
    terminal_prob: f64,
) -> Result<TransitionDataset> {
    let points = separated_points(rng, t + 1, model.spec.dim(), min_dist)?;
    let mut ds = TransitionDataset::new(points[0].clone(), model.gamma, model.noise_var)?;
    for w in points.windows(2) {
        let terminal = rng.random::<f64>() < terminal_prob;
        let reward = smooth_reward(rng, &w[0]);
        ds.push(reward, w[1].clone(), terminal)?;
    }
    Ok(ds)
}

/// One recursive update.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOp {
    Transition {
        reward: f64,
        next: StateAction,
        terminal: bool,
    },
    Pseudo(StateAction),
    Both {
        reward: f64,
        next: StateAction,
        terminal: bool,
        pseudo: StateAction,
    },
}

/// A seeded mix of transition, pseudo-input and combined updates applied
/// to a prior state.
#[derive(Debug, Clone)]
pub struct Interleaving {
    pub model: FuzzModel,
    pub first: StateAction,
    pub initial_pseudo: PseudoInputSet,
    pub ops: Vec<UpdateOp>,
}

impl Interleaving {
    pub fn random(rng: &mut ChaCha8Rng, max_transitions: usize, max_pseudo: usize) -> Result<Self> {
        if max_transitions == 0 || max_pseudo == 0 {
            return Err(Error::InvalidParameter("interleaving needs t >= 1 and k >= 1".into()));
        }
        let dim = rng.random_range(1..=3);
        let model = random_model(rng, dim)?;
        let min_sep = 0.5 * model.spec.lengthscales.iter().cloned().fold(f64::INFINITY, f64::min);
        let k_total = rng.random_range(1..=pseudo_cap(dim, max_pseudo));
        let candidates = separated_points(rng, k_total, dim, min_sep)?;
        let k0 = rng.random_range(1..=k_total.min(3));
        let t_total = rng.random_range(max_transitions.div_ceil(2)..=max_transitions);
        let traj = random_trajectory(rng, &model, t_total, 0.4, 0.05)?;

        let mut ops = Vec::new();
        let mut next_pseudo = k0;
        let mut t = 0;
        while t < t_total || next_pseudo < k_total {
            let pseudo_left = next_pseudo < k_total;
            let trans_left = t < t_total;
            let roll: f64 = rng.random();
            let transition = |t: usize| (traj.rewards()[t], traj.inputs()[t + 1].clone(), traj.terminal()[t]);
            if trans_left && pseudo_left && roll < 0.15 {
                let (reward, next, terminal) = transition(t);
                ops.push(UpdateOp::Both {
                    reward,
                    next,
                    terminal,
                    pseudo: candidates[next_pseudo].clone(),
                });
                t += 1;
                next_pseudo += 1;
            } else if pseudo_left && (!trans_left || roll < 0.3) {
                ops.push(UpdateOp::Pseudo(candidates[next_pseudo].clone()));
                next_pseudo += 1;
            } else {
                let (reward, next, terminal) = transition(t);
                ops.push(UpdateOp::Transition { reward, next, terminal });
                t += 1;
            }
        }
        Ok(Self {
            model,
            first: traj.inputs()[0].clone(),
            initial_pseudo: PseudoInputSet::new(candidates[..k0].to_vec())?,
            ops,
        })
    }

    pub fn init(&self) -> Result<RecursiveState> {
        RecursiveState::init(
            self.model.spec.clone(),
            self.model.gamma,
            self.model.noise_var,
            &self.initial_pseudo,
            self.first.clone(),
        )
    }

    pub fn apply(state: &mut RecursiveState, op: &UpdateOp) -> Result<()> {
        match op {
            UpdateOp::Transition { reward, next, terminal } => {
                state.add_transition(*reward, next.clone(), *terminal)
            }
            UpdateOp::Pseudo(z) => state.add_pseudo_input(z.clone()),
            UpdateOp::Both {
                reward,
                next,
                terminal,
                pseudo,
            } => state.add_both(*reward, next.clone(), *terminal, pseudo.clone()),
        }
    }

    pub fn run(&self) -> Result<RecursiveState> {
        let mut state = self.init()?;
        for op in &self.ops {
            Self::apply(&mut state, op)?;
        }
        Ok(state)
    }

    pub fn num_transitions(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, UpdateOp::Pseudo(_)))
            .count()
    }
}

/// Relative disagreement between the recursive state and a batch rebuild
/// over `alpha`, `P` and predictions at `queries`.
pub fn compare_with_batch(state: &RecursiveState, queries: &[StateAction]) -> Result<f64> {
    let dataset = state.dataset()?;
    let pseudo = state.pseudo_set()?;
    let batch = spgp_sarsa_batch_params(&dataset, &pseudo, state.spec())?;
    let mut err = max_norm_relative_error(state.alpha().as_slice(), batch.alpha.as_slice())
        .max(max_norm_relative_error(state.p().as_slice(), batch.p.as_slice()));
    for x in queries {
        let r = state.predict(x)?;
        let b = batch.predict(x)?;
        err = err
            .max(relative_error(r.mean, b.mean))
            .max(relative_error(r.variance, b.variance));
    }
    Ok(err)
}

// ---------------------------------------------------------------------------
// validation suites

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
}

impl SuiteReport {
    fn finish(suite: &str, cases: usize, max_error: f64, tolerance: f64, started: Instant) -> Self {
        Self {
            suite: suite.into(),
            cases,
            max_error,
            tolerance,
            pass: max_error.is_finite() && max_error <= tolerance,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64 + 1);
    rng
}

/// A random SPD matrix `G G' / n + 0.1 I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut k = &g * g.transpose() / n as f64;
    for i in 0..n {
        k[(i, i)] += 0.1;
    }
    k
}

/// Inverse of `k` grown one border at a time from its leading entry.
pub fn grow_inverse(k: &DMatrix<f64>) -> Result<SpdInverse> {
    let mut inv = dense_spd_inverse(&k.view((0, 0), (1, 1)).into_owned(), 0.0)?;
    for n in 1..k.nrows() {
        let border = k.view((0, n), (n, 1)).column(0).into_owned();
        inv = extend_spd_inverse(&inv, &border, k[(n, n)])?.inverse;
    }
    Ok(inv)
}

/// Bordered growth against dense inversion; matrix sizes cycle 1..=20.
pub fn lemma_suite(cases: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let n = case % 20 + 1;
        let k = random_spd(&mut rng, n);
        let grown = grow_inverse(&k)?;
        let dense = dense_spd_inverse(&k, 0.0)?;
        worst = worst.max((grown.inv() - dense.inv()).amax());
    }
    Ok(SuiteReport::finish("partition-lemma", cases, worst, tolerance, started))
}

fn random_queries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<Vec<StateAction>> {
    (0..n).map(|_| uniform_point(rng, dim)).collect()
}

/// Random interleavings replayed recursively and compared with a batch
/// rebuild.
pub fn equivalence_suite(
    cases: usize,
    seed: u64,
    max_transitions: usize,
    max_pseudo: usize,
    tolerance: f64,
) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let plan = Interleaving::random(&mut rng, max_transitions, max_pseudo)?;
        let state = plan.run()?;
        let queries = random_queries(&mut rng, 10, plan.model.spec.dim())?;
        worst = worst.max(compare_with_batch(&state, &queries)?);
    }
    Ok(SuiteReport::finish("oracle-equivalence", cases, worst, tolerance, started))
}

/// Pseudo inputs placed on the training inputs, against the exact posterior.
pub fn degeneracy_suite(cases: usize, seed: u64, max_transitions: usize, tolerance: f64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let dim = 2;
        let mut model = random_model(&mut rng, dim)?;
        // short lengthscales keep the Gram matrix of every input usable
        let lengthscales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.4..0.6)).collect();
        let min_sep = 0.6 * lengthscales.iter().cloned().fold(0.0, f64::max);
        model.spec = KernelSpec::squared_exponential(lengthscales, model.spec.signal_variance)?;
        let t = rng.random_range(2..=max_transitions.max(2));
        let ds = separated_trajectory(&mut rng, &model, t, min_sep, 0.1)?;
        let pseudo = PseudoInputSet::new(ds.inputs().to_vec())?;
        let sparse = spgp_sarsa_batch_params(&ds, &pseudo, &model.spec)?;
        let exact = ExactPosterior::fit(&ds, &model.spec)?;
        for x in random_queries(&mut rng, 20, dim)? {
            let s = sparse.predict(&x)?;
            let e = exact.predict(&x)?;
            worst = worst
                .max(relative_error(s.mean, e.mean))
                .max(relative_error(s.variance, e.variance));
        }
    }
    Ok(SuiteReport::finish("pseudo-equals-inputs", cases, worst, tolerance, started))
}

/// The two algebraically equal forms of the sparse predictive moments.
pub fn dual_route_suite(cases: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let (ds, pseudo, spec) = random_sparse_instance(&mut rng, 40, 8)?;
        let params = spgp_sarsa_batch_params(&ds, &pseudo, &spec)?;
        for x in random_queries(&mut rng, 10, spec.dim())? {
            let a = params.predict(&x)?;
            let b = spgp_predict_direct(&ds, &pseudo, &spec, &x)?;
            worst = worst
                .max(relative_error(a.mean, b.mean))
                .max(relative_error(a.variance, b.variance));
        }
    }
    Ok(SuiteReport::finish("dual-route", cases, worst, tolerance, started))
}

/// Half-lengthscale separation leaves room for only a few points on a line.
fn pseudo_cap(dim: usize, max_pseudo: usize) -> usize {
    if dim == 1 {
        max_pseudo.min(3)
    } else {
        max_pseudo
    }
}

/// A random trajectory and a separated pseudo-input set.
pub fn random_sparse_instance(
    rng: &mut ChaCha8Rng,
    max_transitions: usize,
    max_pseudo: usize,
) -> Result<(TransitionDataset, PseudoInputSet, KernelSpec)> {
    let dim = rng.random_range(1..=3);
    let model = random_model(rng, dim)?;
    let t = rng.random_range(1..=max_transitions);
    let ds = random_trajectory(rng, &model, t, 0.4, 0.05)?;
    let min_sep = 0.5 * model.spec.lengthscales.iter().cloned().fold(f64::INFINITY, f64::min);
    let k = rng.random_range(1..=pseudo_cap(dim, max_pseudo));
    let pseudo = PseudoInputSet::new(separated_points(rng, k, dim, min_sep)?)?;
    Ok((ds, pseudo, model.spec))
}

/// Counts evaluations of the TD kernel term `Delta^2 k` and of the
/// per-transition residual `1/b - sigma^2`; `max_error` is the largest
/// amount by which any of them falls below zero.
pub fn nonnegativity_suite(cases: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    let mut evaluations = 0;
    for case in 0..cases {
        let mut rng = case_rng(seed, case);
        let (ds, pseudo, spec) = random_sparse_instance(&mut rng, 60, 10)?;
        // arbitrary pairs, including near-coincident ones
        for _ in 0..200 {
            let x = uniform_point(&mut rng, spec.dim())?;
            let scale = 10f64.powf(rng.random_range(-8.0..0.5));
            let y = StateAction::new(
                x.coords()
                    .iter()
                    .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )?;
            let gamma = rng.random_range(0.0..=1.0);
            worst = worst.max(-spec.delta2(&x, &y, gamma)?);
            evaluations += 1;
        }
        let blocks = spgp_sarsa_blocks(&ds, &pseudo, &spec)?;
        for b in blocks.b.iter() {
            worst = worst.max(-(b.recip() - ds.noise_var())).max(-b);
            evaluations += 1;
        }
    }
    Ok(SuiteReport::finish("nonnegativity", evaluations, worst, tolerance, started))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateConfig {
    pub lemma_cases: usize,
    pub equivalence_cases: usize,
    pub max_transitions: usize,
    pub max_pseudo: usize,
    pub degeneracy_cases: usize,
    pub degeneracy_max_transitions: usize,
    pub dual_cases: usize,
    pub nonnegativity_cases: usize,
    pub lemma_tolerance: f64,
    pub equivalence_tolerance: f64,
    pub degeneracy_tolerance: f64,
    pub dual_tolerance: f64,
    pub nonnegativity_tolerance: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            lemma_cases: 200,
            equivalence_cases: 50,
            max_transitions: 60,
            max_pseudo: 10,
            degeneracy_cases: 10,
            degeneracy_max_transitions: 25,
            dual_cases: 50,
            nonnegativity_cases: 50,
            lemma_tolerance: 1e-9,
            equivalence_tolerance: 1e-8,
            degeneracy_tolerance: 1e-8,
            dual_tolerance: 1e-8,
            nonnegativity_tolerance: 1e-12,
        }
    }
}

pub fn validate_all(config: &ValidateConfig, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        lemma_suite(config.lemma_cases, seed, config.lemma_tolerance)?,
        equivalence_suite(
            config.equivalence_cases,
            seed,
            config.max_transitions,
            config.max_pseudo,
            config.equivalence_tolerance,
        )?,
        degeneracy_suite(
            config.degeneracy_cases,
            seed,
            config.degeneracy_max_transitions,
            config.degeneracy_tolerance,
        )?,
        dual_route_suite(config.dual_cases, seed, config.dual_tolerance)?,
        nonnegativity_suite(config.nonnegativity_cases, seed, config.nonnegativity_tolerance)?,
    ])
}

// ---------------------------------------------------------------------------
// timing benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub steps: usize,
    pub pseudo: usize,
    pub dim: usize,
    /// Each recursive update is timed this many times on copies of the
    /// state; the minimum is reported.
    pub repeats: usize,
    pub spot_check_every: usize,
    pub tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            pseudo: 10,
            dim: 2,
            repeats: 5,
            spot_check_every: 50,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub step: usize,
    pub recursive_update_seconds: f64,
    pub batch_rebuild_seconds: f64,
    pub k: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub step: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub spot_checks: Vec<SpotCheck>,
}

impl BenchReport {
    /// Mean of `column` over rows with `lo <= step <= hi`.
    pub fn window_mean(&self, lo: usize, hi: usize, column: impl Fn(&BenchRow) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (lo..=hi).contains(&r.step))
            .map(column)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Means of `column` over `bins` consecutive, equally sized step ranges.
    pub fn bin_means(&self, bins: usize, column: impl Fn(&BenchRow) -> f64) -> Vec<f64> {
        let n = self.rows.len();
        if bins == 0 || n < bins {
            return Vec::new();
        }
        (0..bins)
            .map(|b| {
                let rows = &self.rows[b * n / bins..(b + 1) * n / bins];
                rows.iter().map(&column).sum::<f64>() / rows.len() as f64
            })
            .collect()
    }

    pub fn max_spot_error(&self) -> f64 {
        self.spot_checks.iter().map(|s| s.max_error).fold(0.0, f64::max)
    }
}

/// Times each recursive transition update against a batch rebuild of the
/// same posterior, with a fixed pseudo-input set.
pub fn benchmark(config: &BenchConfig, seed: u64) -> Result<BenchReport> {
    if config.steps == 0 || config.pseudo == 0 || config.dim == 0 || config.repeats == 0 {
        return Err(Error::InvalidParameter("benchmark sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FuzzModel {
        spec: KernelSpec::isotropic(config.dim, 1.0, 1.0)?,
        gamma: 0.9,
        noise_var: 0.1,
    };
    let traj = random_trajectory(&mut rng, &model, config.steps, 0.4, 0.02)?;
    let pseudo = PseudoInputSet::new(separated_points(&mut rng, config.pseudo, config.dim, 0.5)?)?;
    let queries = random_queries(&mut rng, 10, config.dim)?;

    let mut state = RecursiveState::init(
        model.spec.clone(),
        model.gamma,
        model.noise_var,
        &pseudo,
        traj.inputs()[0].clone(),
    )?;
    let mut rows = Vec::with_capacity(config.steps);
    let mut spot_checks = Vec::new();
    for step in 1..=config.steps {
        let (reward, next, terminal) = (
            traj.rewards()[step - 1],
            traj.inputs()[step].clone(),
            traj.terminal()[step - 1],
        );
        let mut best = f64::INFINITY;
        let mut updated = None;
        for _ in 0..config.repeats {
            let mut copy = state.clone();
            let x = next.clone();
            let started = Instant::now();
            copy.add_transition(reward, x, terminal)?;
            best = best.min(started.elapsed().as_secs_f64());
            updated = Some(copy);
        }
        state = updated.expect("at least one repeat");

        let prefix = traj.prefix(step + 1)?;
        let started = Instant::now();
        let batch = spgp_sarsa_batch_params(&prefix, &pseudo, &model.spec)?;
        let batch_seconds = started.elapsed().as_secs_f64();

        rows.push(BenchRow {
            step,
            recursive_update_seconds: best,
            batch_rebuild_seconds: batch_seconds,
            k: pseudo.len(),
            t: step,
        });
        if step % config.spot_check_every.max(1) == 0 || step == config.steps {
            let mut err = 0.0_f64;
            for x in &queries {
                let r = state.predict(x)?;
                let b = batch.predict(x)?;
                err = err
                    .max(relative_error(r.mean, b.mean))
                    .max(relative_error(r.variance, b.variance));
            }
            spot_checks.push(SpotCheck { step, max_error: err });
        }
    }
    Ok(BenchReport { rows, spot_checks })
}

// ---------------------------------------------------------------------------
// posterior curves

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoInit {
    /// Distinct training inputs drawn at random.
    Subsample,
    /// Evenly spaced over the observed range of each coordinate.
    UniformGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorConfig {
    pub mdp: MdpSpec,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub transitions: usize,
    pub pseudo: usize,
    pub init: PseudoInit,
    pub budget: usize,
    pub grid: usize,
    /// Action index held fixed along the query grid.
    pub action: usize,
}

impl Default for PosteriorConfig {
    /// The toy with a single zero-drift action, so transitions are pure
    /// diffusion and the value is a function of the state alone.
    fn default() -> Self {
        let mut mdp = MdpSpec::toy1d(0.9);
        mdp.action_set = vec![0.0];
        mdp.state_noise = 0.2;
        Self {
            mdp,
            kernel: KernelSpec::squared_exponential(vec![0.3, 1.0], 1.0).expect("valid default kernel"),
            noise_var: 0.3,
            transitions: 80,
            pseudo: 5,
            init: PseudoInit::Subsample,
            budget: 2000,
            grid: 50,
            action: 0,
        }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        self.kernel.validate()?;
        if self.kernel.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: self.kernel.dim(),
            });
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise variance {} must be positive", self.noise_var)));
        }
        if self.transitions == 0 {
            return Err(Error::InvalidShape("posterior needs at least one transition".into()));
        }
        if self.pseudo == 0 || self.grid == 0 || self.budget == 0 {
            return Err(Error::InvalidParameter("pseudo, grid and budget must be positive".into()));
        }
        if self.action >= self.mdp.num_actions() {
            return Err(Error::InvalidAction {
                index: self.action,
                len: self.mdp.num_actions(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub exact_mean: f64,
    pub exact_var: f64,
    pub sparse_random_mean: f64,
    pub sparse_random_var: f64,
    pub sparse_refined_mean: f64,
    pub sparse_refined_var: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorCurves {
    pub rows: Vec<CurveRow>,
    pub random_pseudo: PseudoInputSet,
    pub refined_pseudo: PseudoInputSet,
    pub random_rmse: f64,
    pub refined_rmse: f64,
    pub initial_log_likelihood: f64,
    pub refined_log_likelihood: f64,
    pub evaluations: usize,
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared slices differ in length");
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// Initial pseudo inputs. `Subsample` takes training inputs in a seeded
/// random order, skipping any that would make the set ill-conditioned.
pub fn initial_pseudo(
    dataset: &TransitionDataset,
    spec: &KernelSpec,
    count: usize,
    init: PseudoInit,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoInputSet> {
    match init {
        PseudoInit::Subsample => {
            let mut order: Vec<usize> = (0..dataset.num_inputs()).collect();
            order.shuffle(rng);
            let mut chosen: Vec<StateAction> = Vec::with_capacity(count);
            for i in order {
                if chosen.len() == count {
                    break;
                }
                let mut trial = chosen.clone();
                trial.push(dataset.inputs()[i].clone());
                let ok = PseudoInputSet::new(trial.clone())
                    .and_then(|set| check_conditioning(spec, &set, RefineConfig::default().min_pivot))
                    .is_ok();
                if ok {
                    chosen = trial;
                }
            }
            if chosen.len() < count {
                return Err(Error::InvalidParameter(format!(
                    "only {} distinct training inputs available for {count} pseudo inputs",
                    chosen.len()
                )));
            }
            PseudoInputSet::new(chosen)
        }
        PseudoInit::UniformGrid => {
            let dim = dataset.dim();
            let lo: Vec<f64> = (0..dim)
                .map(|d| dataset.inputs().iter().map(|x| x.coords()[d]).fold(f64::INFINITY, f64::min))
                .collect();
            let hi: Vec<f64> = (0..dim)
                .map(|d| dataset.inputs().iter().map(|x| x.coords()[d]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            // a diagonal sweep through the bounding box
            let points = (0..count)
                .map(|i| {
                    let f = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
                    StateAction::new((0..dim).map(|d| lo[d] + f * (hi[d] - lo[d])).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            PseudoInputSet::new(points)
        }
    }
}

/// Exact posterior, sparse posterior at the initial pseudo inputs and sparse
/// posterior after likelihood refinement, evaluated along a grid over the
/// state at a fixed action.
pub fn posterior_curves(config: &PosteriorConfig, seed: u64) -> Result<PosteriorCurves> {
    config.validate()?;
    let log = simulate(&config.mdp, &Policy::Uniform, config.transitions, seed)?;
    let dataset = log.to_dataset(config.noise_var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let random_pseudo = initial_pseudo(&dataset, &config.kernel, config.pseudo, config.init, &mut rng)?;
    let refined = refine_pseudo_inputs(
        &dataset,
        &random_pseudo,
        &config.kernel,
        // the action coordinate is a discrete encoding
        &RefineConfig {
            budget: config.budget,
            fixed_dims: vec![1],
            ..RefineConfig::default()
        },
    )?;

    let exact = ExactPosterior::fit(&dataset, &config.kernel)?;
    let sparse_random = spgp_sarsa_batch_params(&dataset, &random_pseudo, &config.kernel)?;
    let sparse_refined = spgp_sarsa_batch_params(&dataset, &refined.pseudo, &config.kernel)?;

    let mut rows = Vec::with_capacity(config.grid);
    for i in 0..config.grid {
        let s = if config.grid == 1 { 0.5 } else { i as f64 / (config.grid - 1) as f64 };
        let x = config.mdp.encode(s, config.action)?;
        let e = exact.predict(&x)?;
        let r = sparse_random.predict(&x)?;
        let f = sparse_refined.predict(&x)?;
        rows.push(CurveRow {
            x: s,
            exact_mean: e.mean,
            exact_var: e.variance,
            sparse_random_mean: r.mean,
            sparse_random_var: r.variance,
            sparse_refined_mean: f.mean,
            sparse_refined_var: f.variance,
        });
    }
    let exact_means: Vec<f64> = rows.iter().map(|r| r.exact_mean).collect();
    let random_means: Vec<f64> = rows.iter().map(|r| r.sparse_random_mean).collect();
    let refined_means: Vec<f64> = rows.iter().map(|r| r.sparse_refined_mean).collect();
    Ok(PosteriorCurves {
        random_rmse: rmse(&random_means, &exact_means),
        refined_rmse: rmse(&refined_means, &exact_means),
        rows,
        random_pseudo,
        refined_pseudo: refined.pseudo,
        initial_log_likelihood: refined.initial_log_likelihood,
        refined_log_likelihood: refined.log_likelihood,
        evaluations: refined.evaluations,
    })
}

//! Small MDPs, policies and a policy-evaluation loop that feeds genuine
//! trajectories to an estimator, plus an exact dynamic-programming value
//! oracle for finite MDPs.
//!
//! State-action inputs are encoded as `[state, action_encoding]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{spgp_sarsa_batch_params, PosteriorParams, PredictiveMoments, PseudoInputSet};
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, StateAction};
use crate::recursive::RecursiveState;
use crate::tdmodel::TransitionDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdpKind {
    /// States `0..n_states`; moving right from the last state reaches the
    /// goal, ending the episode with `goal_reward`. Moving left from state 0
    /// stays put. Every other move pays `step_reward`.
    Chain,
    /// State in `[0, 1]`; each action drifts the state by its encoding times
    /// `drift`. Reward is minus the distance to `target`; the episode ends
    /// once the state is within `drift / 2` of the target.
    Toy1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpSpec {
    pub kind: MdpKind,
    pub n_states: usize,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub gamma: f64,
    /// Signed action encodings; negative moves left, positive moves right.
    pub action_set: Vec<f64>,
    /// Toy only: drift per unit of action encoding.
    pub drift: f64,
    /// Toy only.
    pub target: f64,
    /// Toy only: standard deviation of Gaussian state noise.
    pub state_noise: f64,
    /// Episodes reaching this many steps are cut, and the cut is recorded as
    /// terminal.
    pub max_steps: usize,
}

impl Default for MdpSpec {
    fn default() -> Self {
        Self::chain(5, 0.9)
    }
}

impl MdpSpec {
    pub fn chain(n_states: usize, gamma: f64) -> Self {
        Self {
            kind: MdpKind::Chain,
            n_states,
            goal_reward: 1.0,
            step_reward: 0.0,
            gamma,
            action_set: vec![-1.0, 1.0],
            drift: 0.1,
            target: 0.5,
            state_noise: 0.0,
            max_steps: 100,
        }
    }

    pub fn toy1d(gamma: f64) -> Self {
        Self {
            kind: MdpKind::Toy1d,
            n_states: 2,
            goal_reward: 0.0,
            step_reward: 0.0,
            gamma,
            action_set: vec![-1.0, 1.0],
            drift: 0.1,
            target: 0.5,
            state_noise: 0.0,
            max_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::InvalidParameter(format!(
                "MDP needs at least 2 states, got {}",
                self.n_states
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidDiscount(self.gamma));
        }
        if self.action_set.is_empty() {
            return Err(Error::EmptyActionSet);
        }
        if self.action_set.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("action encodings must be finite".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        if self.kind == MdpKind::Toy1d
            && !(self.drift > 0.0 && (0.0..=1.0).contains(&self.target) && self.state_noise >= 0.0)
        {
            return Err(Error::InvalidParameter(
                "toy MDP needs drift > 0, target in [0, 1] and state_noise >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.action_set.len()
    }

    pub fn encode(&self, state: f64, action: usize) -> Result<StateAction> {
        let a = self.action(action)?;
        StateAction::new(vec![state, a])
    }

    /// Every action encoded at `state`, in action-index order.
    pub fn candidates(&self, state: f64) -> Result<Vec<StateAction>> {
        (0..self.num_actions()).map(|a| self.encode(state, a)).collect()
    }

    fn action(&self, index: usize) -> Result<f64> {
        self.action_set.get(index).copied().ok_or(Error::InvalidAction {
            index,
            len: self.action_set.len(),
        })
    }

    pub fn initial_state(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            MdpKind::Chain => 0.0,
            MdpKind::Toy1d => rng.random_range(0.0..=1.0),
        }
    }

    /// States at which value tables are reported.
    pub fn report_states(&self) -> Vec<f64> {
        match self.kind {
            MdpKind::Chain => (0..self.n_states).map(|s| s as f64).collect(),
            MdpKind::Toy1d => (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: f64,
    pub reward: f64,
    pub terminal: bool,
}

pub fn step(mdp: &MdpSpec, state: f64, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
    let a = mdp.action(action)?;
    match mdp.kind {
        MdpKind::Chain => {
            let last = mdp.n_states - 1;
            if !(state >= 0.0 && state.fract() == 0.0 && state as usize <= last) {
                return Err(Error::InvalidParameter(format!("{state} is not a chain state")));
            }
            let s = state as usize;
            if a > 0.0 && s == last {
                return Ok(StepOutcome {
                    next_state: state,
                    reward: mdp.goal_reward,
                    terminal: true,
                });
            }
            let next = if a > 0.0 {
                s + 1
            } else if a < 0.0 {
                s.saturating_sub(1)
            } else {
                s
            };
            Ok(StepOutcome {
                next_state: next as f64,
                reward: mdp.step_reward,
                terminal: false,
            })
        }
        MdpKind::Toy1d => {
            if !(0.0..=1.0).contains(&state) {
                return Err(Error::InvalidParameter(format!("{state} outside [0, 1]")));
            }
            let noise = if mdp.state_noise > 0.0 {
                mdp.state_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let next = (state + a * mdp.drift + noise).clamp(0.0, 1.0);
            let distance = (next - mdp.target).abs();
            Ok(StepOutcome {
                next_state: next,
                reward: -distance,
                terminal: distance <= 0.5 * mdp.drift,
            })
        }
    }
}

/// Index of the largest predicted mean with probability `1 - epsilon`
/// (ties go to the lowest index), otherwise a uniformly random index.
pub fn epsilon_greedy<F>(
    predictor: F,
    candidates: &[StateAction],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize>
where
    F: Fn(&StateAction) -> Result<PredictiveMoments>,
{
    if candidates.is_empty() {
        return Err(Error::EmptyActionSet);
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..candidates.len()));
    }
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, x) in candidates.iter().enumerate() {
        let mean = predictor(x)?.mean;
        if mean > best_mean {
            best = i;
            best_mean = mean;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Policy {
    Always { action: usize },
    Uniform,
    EpsilonGreedy { epsilon: f64 },
}

impl Policy {
    /// `pi(a | s)` for policies that do not depend on the estimator.
    pub fn action_probabilities(&self, num_actions: usize) -> Option<Vec<f64>> {
        match *self {
            Policy::Always { action } => {
                let mut p = vec![0.0; num_actions];
                *p.get_mut(action)? = 1.0;
                Some(p)
            }
            Policy::Uniform => Some(vec![1.0 / num_actions as f64; num_actions]),
            Policy::EpsilonGreedy { .. } => None,
        }
    }
}

/// Exact action values of a fixed policy, indexed `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpValues {
    pub q: Vec<Vec<f64>>,
    pub residual: f64,
}

/// Solves `q = r + gamma P_pi q` directly for a chain MDP.
pub fn dp_value_oracle(mdp: &MdpSpec, policy: &Policy) -> Result<DpValues> {
    if mdp.kind != MdpKind::Chain {
        return Err(Error::InvalidParameter("DP values need a finite MDP".into()));
    }
    if mdp.n_states < 2 || mdp.action_set.is_empty() {
        return Err(Error::InvalidParameter("chain needs >= 2 states and an action".into()));
    }
    let m = mdp.num_actions();
    let pi = policy.action_probabilities(m).ok_or_else(|| {
        Error::InvalidParameter("DP values need a policy independent of the estimator".into())
    })?;
    let n = mdp.n_states * m;
    let idx = |s: usize, a: usize| s * m + a;
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in 0..mdp.n_states {
        for a in 0..m {
            let out = step(mdp, s as f64, a, &mut rng)?;
            rhs[idx(s, a)] = out.reward;
            if !out.terminal {
                let next = out.next_state as usize;
                for (a2, p) in pi.iter().enumerate() {
                    system[(idx(s, a), idx(next, a2))] -= mdp.gamma * p;
                }
            }
        }
    }
    let q = LU::new(system.clone())
        .solve(&rhs)
        .filter(|q| q.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::NotFinite("Bellman system is singular".into()))?;
    let residual = (&system * &q - &rhs).amax();
    if residual > 1e-9 {
        return Err(Error::NotFinite(format!("Bellman residual {residual:e}")));
    }
    Ok(DpValues {
        q: (0..mdp.n_states)
            .map(|s| (0..m).map(|a| q[idx(s, a)]).collect())
            .collect(),
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Recursive,
    Batch,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub pseudo: PseudoInputSet,
}

/// A value estimator fed one transition at a time.
#[derive(Debug, Clone)]
pub enum Estimator {
    Recursive(RecursiveState),
    Batch {
        dataset: TransitionDataset,
        pseudo: PseudoInputSet,
        spec: KernelSpec,
        params: PosteriorParams,
    },
}

impl Estimator {
    pub fn start(config: &EstimatorConfig, gamma: f64, first: StateAction) -> Result<Self> {
        match config.kind {
            EstimatorKind::Recursive => Ok(Estimator::Recursive(RecursiveState::init(
                config.kernel.clone(),
                gamma,
                config.noise_var,
                &config.pseudo,
                first,
            )?)),
            EstimatorKind::Batch => Ok(Estimator::Batch {
                dataset: TransitionDataset::new(first, gamma, config.noise_var)?,
                pseudo: config.pseudo.clone(),
                spec: config.kernel.clone(),
                params: PosteriorParams::prior(config.pseudo.clone(), config.kernel.clone()),
            }),
        }
    }

    pub fn observe(&mut self, reward: f64, next: StateAction, terminal: bool) -> Result<()> {
        match self {
            Estimator::Recursive(state) => state.add_transition(reward, next, terminal),
            Estimator::Batch {
                dataset,
                pseudo,
                spec,
                params,
            } => {
                let mut grown = dataset.clone();
                grown.push(reward, next, terminal)?;
                *params = spgp_sarsa_batch_params(&grown, pseudo, spec)?;
                *dataset = grown;
                Ok(())
            }
        }
    }

    pub fn predict(&self, x: &StateAction) -> Result<PredictiveMoments> {
        match self {
            Estimator::Recursive(state) => state.predict(x),
            Estimator::Batch { params, .. } => params.predict(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTransition {
    pub episode: usize,
    pub x: StateAction,
    pub reward: f64,
    pub next: StateAction,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub transitions: Vec<LoggedTransition>,
    pub seed: u64,
    pub policy: Policy,
    pub mdp: MdpSpec,
}

impl EpisodeLog {
    /// Transitions of episode `episode` only.
    pub fn episode(&self, episode: usize) -> Vec<&LoggedTransition> {
        self.transitions.iter().filter(|t| t.episode == episode).collect()
    }

    pub fn num_episodes(&self) -> usize {
        self.transitions.last().map_or(0, |t| t.episode + 1)
    }

    pub fn to_dataset(&self, noise_var: f64) -> Result<TransitionDataset> {
        let first = self
            .transitions
            .first()
            .ok_or_else(|| Error::InvalidShape("empty episode log".into()))?;
        let mut ds = TransitionDataset::new(first.x.clone(), self.mdp.gamma, noise_var)?;
        for t in &self.transitions {
            ds.push(t.reward, t.next.clone(), t.terminal)?;
        }
        Ok(ds)
    }

    /// CSV in the dataset format plus a JSON sidecar holding seed, policy
    /// and MDP.
    pub fn write<W1: Write, W2: Write>(
        &self,
        noise_var: f64,
        csv_out: W1,
        sidecar: W2,
        extra_header: &[String],
    ) -> Result<()> {
        self.to_dataset(noise_var)?.write_csv(csv_out, extra_header)?;
        #[derive(Serialize)]
        struct Sidecar<'a> {
            seed: u64,
            policy: &'a Policy,
            mdp: &'a MdpSpec,
            episodes: usize,
            transitions: usize,
        }
        serde_json::to_writer_pretty(
            sidecar,
            &Sidecar {
                seed: self.seed,
                policy: &self.policy,
                mdp: &self.mdp,
                episodes: self.num_episodes(),
                transitions: self.transitions.len(),
            },
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueRow {
    pub state: f64,
    pub action: usize,
    pub mean: f64,
    pub variance: f64,
    pub dp_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub rows: Vec<ValueRow>,
}

impl ValueTable {
    /// Largest `|mean - dp_value|` over rows the policy can select.
    pub fn max_dp_error(&self, policy: &Policy, num_actions: usize) -> Option<f64> {
        let pi = policy.action_probabilities(num_actions);
        self.rows
            .iter()
            .filter(|r| pi.as_ref().is_none_or(|p| p[r.action] > 0.0))
            .filter_map(|r| r.dp_value.map(|v| (r.mean - v).abs()))
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log: EpisodeLog,
    pub table: ValueTable,
    pub estimator: Estimator,
}

fn choose_action(
    policy: &Policy,
    mdp: &MdpSpec,
    estimator: Option<&Estimator>,
    state: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    match *policy {
        Policy::Always { action } => {
            mdp.action(action)?;
            Ok(action)
        }
        Policy::Uniform => Ok(rng.random_range(0..mdp.num_actions())),
        Policy::EpsilonGreedy { epsilon } => {
            let candidates = mdp.candidates(state)?;
            match estimator {
                Some(est) => epsilon_greedy(|x| est.predict(x), &candidates, epsilon, rng),
                None => epsilon_greedy(|_| Ok(PredictiveMoments { mean: 0.0, variance: 0.0 }), &candidates, epsilon, rng),
            }
        }
    }
}

/// Runs `episodes` episodes, feeding every transition to the estimator.
///
/// A terminal transition's successor input is the first input of the next
/// episode; after the final episode one further start input is drawn so the
/// last transition has a successor.
pub fn run_policy_evaluation(
    mdp: &MdpSpec,
    policy: &Policy,
    config: &EstimatorConfig,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation> {
    mdp.validate()?;
    if episodes == 0 {
        return Err(Error::InvalidParameter("need at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimator: Option<Estimator> = None;
    let mut pending: Option<(StateAction, f64, usize)> = None;
    let mut transitions = Vec::new();

    for episode in 0..=episodes {
        let mut state = mdp.initial_state(&mut rng);
        let mut action = choose_action(policy, mdp, estimator.as_ref(), state, &mut rng)?;
        let mut x = mdp.encode(state, action)?;
        match (&mut estimator, pending.take()) {
            (None, _) => estimator = Some(Estimator::start(config, mdp.gamma, x.clone())?),
            (Some(est), Some((prev, reward, ep))) => {
                est.observe(reward, x.clone(), true)?;
                transitions.push(LoggedTransition {
                    episode: ep,
                    x: prev,
                    reward,
                    next: x.clone(),
                    terminal: true,
                });
            }
            (Some(_), None) => unreachable!("every episode ends with a pending terminal"),
        }
        if episode == episodes {
            break;
        }
        let est = estimator.as_mut().expect("estimator started");
        for n in 0..mdp.max_steps {
            let out = step(mdp, state, action, &mut rng)?;
            if out.terminal || n + 1 == mdp.max_steps {
                pending = Some((x, out.reward, episode));
                break;
            }
            state = out.next_state;
            action = choose_action(policy, mdp, Some(est), state, &mut rng)?;
            let next = mdp.encode(state, action)?;
            est.observe(out.reward, next.clone(), false)?;
            transitions.push(LoggedTransition {
                episode,
                x: std::mem::replace(&mut x, next.clone()),
                reward: out.reward,
                next,
                terminal: false,
            });
        }
    }

    let estimator = estimator.expect("estimator started");
    let dp = match (mdp.kind, policy.action_probabilities(mdp.num_actions())) {
        (MdpKind::Chain, Some(_)) => Some(dp_value_oracle(mdp, policy)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for (si, state) in mdp.report_states().into_iter().enumerate() {
        for action in 0..mdp.num_actions() {
            let m = estimator.predict(&mdp.encode(state, action)?)?;
            rows.push(ValueRow {
                state,
                action,
                mean: m.mean,
                variance: m.variance,
                dp_value: dp.as_ref().map(|d| d.q[si][action]),
            });
        }
    }
    Ok(Evaluation {
        log: EpisodeLog {
            transitions,
            seed,
            policy: policy.clone(),
            mdp: mdp.clone(),
        },
        table: ValueTable { rows },
        estimator,
    })
}

/// Exactly `transitions` transitions under a policy that ignores the
/// estimator, with episode boundaries handled as in
/// [`run_policy_evaluation`].
pub fn simulate(mdp: &MdpSpec, policy: &Policy, transitions: usize, seed: u64) -> Result<EpisodeLog> {
    mdp.validate()?;
    if policy.action_probabilities(mdp.num_actions()).is_none() {
        return Err(Error::InvalidParameter("simulation needs an estimator-free policy".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(transitions);
    let mut episode = 0;
    let mut state = mdp.initial_state(&mut rng);
    let mut action = choose_action(policy, mdp, None, state, &mut rng)?;
    let mut steps = 0;
    while log.len() < transitions {
        let out = step(mdp, state, action, &mut rng)?;
        steps += 1;
        let x = mdp.encode(state, action)?;
        let terminal = out.terminal || steps == mdp.max_steps;
        state = if terminal { mdp.initial_state(&mut rng) } else { out.next_state };
        action = choose_action(policy, mdp, None, state, &mut rng)?;
        log.push(LoggedTransition {
            episode,
            x,
            reward: out.reward,
            next: mdp.encode(state, action)?,
            terminal,
        });
        if terminal {
            episode += 1;
            steps = 0;
        }
    }
    Ok(EpisodeLog {
        transitions: log,
        seed,
        policy: policy.clone(),
        mdp: mdp.clone(),
    })
}

/// Pseudo inputs on a per-action grid of `per_action` states spanning the
/// MDP's state range.
pub fn uniform_grid_pseudo(mdp: &MdpSpec, per_action: usize) -> Result<PseudoInputSet> {
    if per_action == 0 {
        return Err(Error::InvalidParameter("need at least one pseudo input per action".into()));
    }
    let (lo, hi) = match mdp.kind {
        MdpKind::Chain => (0.0, (mdp.n_states - 1) as f64),
        MdpKind::Toy1d => (0.0, 1.0),
    };
    let mut points = Vec::new();
    for a in 0..mdp.num_actions() {
        for i in 0..per_action {
            let s = if per_action == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (per_action - 1) as f64
            };
            points.push(mdp.encode(s, a)?);
        }
    }
    PseudoInputSet::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn chain_goal_adjacent_right_is_terminal() {
        let mdp = MdpSpec::chain(5, 0.9);
        let out = step(&mdp, 4.0, 1, &mut rng()).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, mdp.goal_reward);
    }

    #[test]
    fn chain_left_at_zero_is_clipped() {
        let mdp = MdpSpec::chain(5, 0.9);
        let out = step(&mdp, 0.0, 0, &mut rng()).unwrap();
        assert_eq!(out.next_state, 0.0);
        assert!(!out.terminal);
        assert!(matches!(step(&mdp, 0.0, 2, &mut rng()), Err(Error::InvalidAction { index: 2, len: 2 })));
    }

    #[test]
    fn toy_trajectories_are_seed_deterministic() {
        let mut mdp = MdpSpec::toy1d(0.9);
        mdp.state_noise = 0.02;
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut s = mdp.initial_state(&mut r);
            let mut out = vec![];
            for _ in 0..100 {
                let a = r.random_range(0..2);
                let o = step(&mdp, s, a, &mut r).unwrap();
                out.push((o.next_state, o.reward, o.terminal));
                s = if o.terminal { mdp.initial_state(&mut r) } else { o.next_state };
            }
            out
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    fn fixed_means(means: Vec<f64>) -> impl Fn(&StateAction) -> Result<PredictiveMoments> {
        move |x: &StateAction| {
            Ok(PredictiveMoments {
                mean: means[x.coords()[1] as usize],
                variance: 1.0,
            })
        }
    }

    fn indexed_candidates(n: usize) -> Vec<StateAction> {
        (0..n).map(|a| StateAction::new(vec![0.0, a as f64]).unwrap()).collect()
    }

    #[test]
    fn greedy_picks_strict_maximum() {
        let mut r = rng();
        let c = indexed_candidates(3);
        for _ in 0..50 {
            assert_eq!(epsilon_greedy(fixed_means(vec![0.1, 0.7, 0.3]), &c, 0.0, &mut r).unwrap(), 1);
        }
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let c = indexed_candidates(4);
        assert_eq!(epsilon_greedy(fixed_means(vec![0.5; 4]), &c, 0.0, &mut rng()).unwrap(), 0);
        assert!(matches!(epsilon_greedy(fixed_means(vec![]), &[], 0.0, &mut rng()), Err(Error::EmptyActionSet)));
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut r = rng();
        let c = indexed_candidates(4);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[epsilon_greedy(fixed_means(vec![0.0, 9.0, 0.0, 0.0]), &c, 1.0, &mut r).unwrap()] += 1;
        }
        let expected = draws as f64 / 4.0;
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn dp_three_state_chain() {
        let mut mdp = MdpSpec::chain(3, 0.5);
        mdp.goal_reward = 1.0;
        mdp.step_reward = 0.0;
        let dp = dp_value_oracle(&mdp, &Policy::Always { action: 1 }).unwrap();
        // states at distance 2, 1, 0 from the goal
        assert_abs_diff_eq!(dp.q[0][1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(dp.q[1][1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dp.q[2][1], 1.0, epsilon = 1e-12);
        assert!(dp.residual <= 1e-12);
    }

    #[test]
    fn dp_without_discount_is_immediate_reward() {
        let mut mdp = MdpSpec::chain(4, 0.0);
        mdp.step_reward = -0.2;
        let dp = dp_value_oracle(&mdp, &Policy::Uniform).unwrap();
        for s in 0..4 {
            assert_abs_diff_eq!(dp.q[s][0], -0.2, epsilon = 1e-15);
            let right = if s == 3 { 1.0 } else { -0.2 };
            assert_abs_diff_eq!(dp.q[s][1], right, epsilon = 1e-15);
        }
    }

    #[test]
    fn goal_value_is_policy_invariant() {
        let mdp = MdpSpec::chain(5, 0.9);
        for policy in [Policy::Uniform, Policy::Always { action: 0 }, Policy::Always { action: 1 }] {
            let dp = dp_value_oracle(&mdp, &policy).unwrap();
            // nothing accrues past the goal
            assert_abs_diff_eq!(dp.q[4][1], mdp.goal_reward, epsilon = 1e-12);
        }
    }

    #[test]
    fn dp_reports_singular_systems() {
        let mut mdp = MdpSpec::chain(3, 0.5);
        mdp.gamma = 1.0;
        assert!(matches!(
            dp_value_oracle(&mdp, &Policy::Always { action: 0 }),
            Err(Error::NotFinite(_))
        ));
    }

    fn chain_config(kind: EstimatorKind, mdp: &MdpSpec) -> EstimatorConfig {
        EstimatorConfig {
            kind,
            kernel: KernelSpec::squared_exponential(vec![1.5, 1.0], 1.0).unwrap(),
            noise_var: 0.01,
            pseudo: uniform_grid_pseudo(mdp, mdp.n_states).unwrap(),
        }
    }

    #[test]
    fn episode_log_structure() {
        let mdp = MdpSpec::chain(5, 0.9);
        let policy = Policy::Always { action: 1 };
        let eval = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Recursive, &mdp), 3, 1).unwrap();
        assert_eq!(eval.log.num_episodes(), 3);
        for ep in 0..3 {
            let trs = eval.log.episode(ep);
            assert_eq!(trs.len(), 5);
            assert!(trs[..4].iter().all(|t| !t.terminal));
            assert!(trs[4].terminal);
        }
        let ds = eval.log.to_dataset(0.01).unwrap();
        assert_eq!(ds.num_transitions(), 15);
        assert_eq!(ds.num_inputs(), 16);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut mdp = MdpSpec::chain(5, 0.9);
        mdp.goal_reward = 0.0;
        let policy = Policy::Uniform;
        let eval = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Recursive, &mdp), 5, 2).unwrap();
        assert!(eval.table.rows.iter().all(|r| r.mean.abs() <= 1e-6));
    }

    #[test]
    fn same_seed_same_table() {
        let mdp = MdpSpec::chain(5, 0.9);
        let policy = Policy::EpsilonGreedy { epsilon: 0.3 };
        let cfg = chain_config(EstimatorKind::Recursive, &mdp);
        let a = run_policy_evaluation(&mdp, &policy, &cfg, 4, 7).unwrap();
        let b = run_policy_evaluation(&mdp, &policy, &cfg, 4, 7).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn chain_values_close_to_dp() {
        let mdp = MdpSpec::chain(5, 0.9);
        let policy = Policy::Always { action: 1 };
        let eval = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Recursive, &mdp), 20, 3).unwrap();
        let err = eval.table.max_dp_error(&policy, 2).unwrap();
        assert!(err <= 0.1, "max DP error {err}");
    }

    #[test]
    fn batch_and_recursive_harness_agree() {
        let mdp = MdpSpec::chain(5, 0.9);
        let policy = Policy::Uniform;
        let rec = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Recursive, &mdp), 4, 5).unwrap();
        let bat = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Batch, &mdp), 4, 5).unwrap();
        assert_eq!(rec.log, bat.log);
        for (r, b) in rec.table.rows.iter().zip(&bat.table.rows) {
            assert!((r.mean - b.mean).abs() <= 1e-8 * r.mean.abs().max(1.0));
            assert!((r.variance - b.variance).abs() <= 1e-8);
        }
    }

    #[test]
    fn simulate_links_episodes() {
        let mut mdp = MdpSpec::toy1d(0.9);
        mdp.state_noise = 0.02;
        let log = simulate(&mdp, &Policy::Uniform, 60, 4).unwrap();
        assert_eq!(log.transitions.len(), 60);
        for w in log.transitions.windows(2) {
            assert_eq!(w[0].next, w[1].x);
            assert_eq!(w[1].episode, w[0].episode + usize::from(w[0].terminal));
        }
        assert!(simulate(&mdp, &Policy::EpsilonGreedy { epsilon: 0.1 }, 5, 4).is_err());
    }

    #[test]
    fn episode_log_serialization() {
        let mdp = MdpSpec::chain(4, 0.9);
        let policy = Policy::Always { action: 1 };
        let eval = run_policy_evaluation(&mdp, &policy, &chain_config(EstimatorKind::Recursive, &mdp), 2, 1).unwrap();
        let (mut csv_buf, mut json_buf) = (Vec::new(), Vec::new());
        eval.log.write(0.01, &mut csv_buf, &mut json_buf, &[]).unwrap();
        let back = TransitionDataset::read_csv(&csv_buf[..]).unwrap();
        assert_eq!(back, eval.log.to_dataset(0.01).unwrap());
        let side: serde_json::Value = serde_json::from_slice(&json_buf).unwrap();
        assert_eq!(side["seed"], 1);
        assert_eq!(side["policy"]["type"], "always");
        assert_eq!(side["mdp"]["kind"], "chain");
    }
}

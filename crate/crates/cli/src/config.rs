//! Run configuration: defaults, overlaid by a JSON document, overlaid by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spgptd::experiments::{BenchConfig, PosteriorConfig, ValidateConfig};
use spgptd::simenv::{EstimatorKind, MdpSpec, Policy};
use spgptd::KernelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mdp: MdpSpec,
    pub policy: Policy,
    pub episodes: usize,
    pub estimator: EstimatorKind,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    /// Pseudo inputs per action, evenly spaced over the state range.
    pub pseudo_per_action: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mdp: MdpSpec::chain(5, 0.9),
            policy: Policy::Always { action: 1 },
            episodes: 20,
            estimator: EstimatorKind::Recursive,
            kernel: KernelSpec::squared_exponential(vec![1.5, 1.0], 1.0).expect("valid default kernel"),
            noise_var: 0.01,
            pseudo_per_action: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub validate: ValidateConfig,
    pub bench: BenchConfig,
    pub posterior: PosteriorConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            validate: ValidateConfig::default(),
            bench: BenchConfig::default(),
            posterior: PosteriorConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    /// SHA-256 of the resolved configuration's JSON form. The output
    /// directory is left out so relocated runs hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("configuration serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn positive(name: &str, v: f64) -> anyhow::Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{name} must be positive, got {v}");
    }
    Ok(())
}

fn nonzero(name: &str, v: usize) -> anyhow::Result<()> {
    if v == 0 {
        bail!("{name} must be at least 1");
    }
    Ok(())
}

pub fn check_validate(c: &ValidateConfig) -> anyhow::Result<()> {
    nonzero("max_transitions", c.max_transitions)?;
    nonzero("max_pseudo", c.max_pseudo)?;
    nonzero("degeneracy_max_transitions", c.degeneracy_max_transitions)?;
    for (name, tol) in [
        ("lemma_tolerance", c.lemma_tolerance),
        ("equivalence_tolerance", c.equivalence_tolerance),
        ("degeneracy_tolerance", c.degeneracy_tolerance),
        ("dual_tolerance", c.dual_tolerance),
        ("nonnegativity_tolerance", c.nonnegativity_tolerance),
    ] {
        positive(name, tol)?;
    }
    Ok(())
}

pub fn check_bench(c: &BenchConfig) -> anyhow::Result<()> {
    nonzero("steps", c.steps)?;
    nonzero("pseudo", c.pseudo)?;
    nonzero("dim", c.dim)?;
    nonzero("repeats", c.repeats)?;
    nonzero("spot_check_every", c.spot_check_every)?;
    positive("tolerance", c.tolerance)
}

pub fn check_posterior(c: &PosteriorConfig) -> anyhow::Result<()> {
    positive("noise_var", c.noise_var)?;
    c.validate().map_err(anyhow::Error::from)
}

pub fn check_run(c: &RunConfig) -> anyhow::Result<()> {
    positive("noise_var", c.noise_var)?;
    nonzero("episodes", c.episodes)?;
    nonzero("pseudo_per_action", c.pseudo_per_action)?;
    c.mdp.validate()?;
    c.kernel.validate()?;
    if c.kernel.dim() != 2 {
        bail!("kernel needs 2 lengthscales (state, action), got {}", c.kernel.dim());
    }
    match c.policy {
        Policy::Always { action } if action >= c.mdp.num_actions() => {
            bail!("policy action {action} out of range for {} actions", c.mdp.num_actions())
        }
        Policy::EpsilonGreedy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
            bail!("epsilon must lie in [0, 1], got {epsilon}")
        }
        _ => Ok(()),
    }
}

//! Incremental maintenance of the sparse posterior as transitions arrive
//! (the `t` timescale) and as pseudo inputs are added (the `k` timescale).
//!
//! The state caches every block needed to extend the posterior without
//! revisiting the reward history:
//!
//! * `A = K_kk^-1`, grown by bordered extension when a pseudo input arrives;
//! * `b`, the diagonal of `B`, one entry per transition;
//! * `V`, the TD-transformed cross kernels `H K_tk`, stored per transition;
//! * `F = V' B V` and `C = (K_kk + F)^-1`;
//! * `rho = V' B r`, so that `alpha = C rho` and `P = A - C`.
//!
//! A new transition appends one entry to `b` and a rank-one term to `F`,
//! so `C` follows by a single rank-one update and the per-step cost depends
//! only on the number of pseudo inputs.
//!
//! A new pseudo input enlarges the Nystrom approximation, which lowers every
//! residual `1/b_j` by `(g' v_j - w_j)^2 / s`, where `g = A k_k(z)`, `s` is
//! the Schur complement of the extension and `w_j` the new entry of `v_j`.
//! The increase in each `b_j` is folded into `C` by positive rank-one
//! updates before `C` is extended with the new row and column, so the
//! work is `O(t k^2)` and never factorizes a matrix larger than `k`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batch::{
    predict_from_parts, pseudo_gram, residual_floor, PosteriorParams, PredictiveMoments,
    PseudoInputSet, DUPLICATE_DISTANCE,
};
use crate::blockinv::{
    dense_spd_inverse, extend_spd_inverse, rank_one_update, symmetrize, SpdInverse,
    DEGENERACY_THRESHOLD,
};
use crate::error::{check_discount, Error, Result};
use crate::kernel::{KernelSpec, StateAction};
use crate::tdmodel::TransitionDataset;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveState {
    spec: KernelSpec,
    gamma: f64,
    noise_var: f64,
    inputs: Vec<StateAction>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    pseudo: Vec<StateAction>,
    a: SpdInverse,
    c: SpdInverse,
    b: Vec<f64>,
    v: Vec<DVector<f64>>,
    f: DMatrix<f64>,
    rho: DVector<f64>,
    alpha: DVector<f64>,
    p: DMatrix<f64>,
}

impl RecursiveState {
    /// Prior state: one input, no transitions, `C = A` and `alpha = P = 0`.
    pub fn init(
        spec: KernelSpec,
        gamma: f64,
        noise_var: f64,
        pseudo: &PseudoInputSet,
        first: StateAction,
    ) -> Result<Self> {
        spec.validate()?;
        check_discount(gamma)?;
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        if pseudo.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: pseudo.dim(),
            });
        }
        if first.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: first.dim(),
            });
        }
        let k_uu = pseudo_gram(&spec, pseudo)?;
        let a = dense_spd_inverse(&k_uu, 0.0)?;
        let k = pseudo.len();
        Ok(Self {
            spec,
            gamma,
            noise_var,
            inputs: vec![first],
            rewards: vec![],
            terminal: vec![],
            pseudo: pseudo.points().to_vec(),
            c: a.clone(),
            a,
            b: vec![],
            v: vec![],
            f: DMatrix::zeros(k, k),
            rho: DVector::zeros(k),
            alpha: DVector::zeros(k),
            p: DMatrix::zeros(k, k),
        })
    }

    /// Folds the transition `last_input -> x_new` with `reward` into the
    /// posterior. On error the state is left untouched.
    pub fn add_transition(&mut self, reward: f64, x_new: StateAction, terminal: bool) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::InvalidParameter(format!("reward must be finite, got {reward}")));
        }
        let gamma = if terminal { 0.0 } else { self.gamma };
        let last = self.last_input();
        let v = self.spec.delta_vector(&self.pseudo, last, &x_new, gamma)?;
        let delta2 = self.spec.delta2(last, &x_new, gamma)?;

        let residual = delta2 - self.a.quad_form(&v) + self.noise_var;
        if !(residual > residual_floor(self.noise_var)) {
            return Err(Error::NumericalDegeneracy(format!(
                "transition {}: 1/b = {residual:e} is not positive",
                self.rewards.len()
            )));
        }
        let b = residual.recip();
        let c = rank_one_update(&self.c, &v, b)?;

        self.f.ger(b, &v, &v, 1.0);
        symmetrize(&mut self.f);
        self.rho.axpy(b * reward, &v, 1.0);
        self.c = c;
        self.b.push(b);
        self.v.push(v);
        self.inputs.push(x_new);
        self.rewards.push(reward);
        self.terminal.push(terminal);
        self.refresh_parameters();
        Ok(())
    }

    /// Adds `z` to the pseudo-input support. On error the state is left
    /// untouched.
    pub fn add_pseudo_input(&mut self, z: StateAction) -> Result<()> {
        if z.dim() != self.spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim(),
                got: z.dim(),
            });
        }
        let k = self.pseudo.len();
        if self.pseudo.iter().any(|p| p.distance(&z) <= DUPLICATE_DISTANCE) {
            return Err(Error::DegenerateBorder {
                index: k,
                schur: 0.0,
                threshold: DEGENERACY_THRESHOLD,
            });
        }
        let k_z = self.spec.kernel_vector(&self.pseudo, &z)?;
        let k_zz = self.spec.eval(&z, &z)?;
        let a_ext = extend_spd_inverse(&self.a, &k_z, k_zz)?;
        let s_inv = a_ext.schur_reciprocal();

        // New entry of each v_j: k(x_j, z) - gamma_j k(x_{j+1}, z).
        let k_tz = self.spec.kernel_vector(&self.inputs, &z)?;
        let n = self.rewards.len();
        let mut w = Vec::with_capacity(n);
        let mut b_new = Vec::with_capacity(n);
        for j in 0..n {
            let gamma = if self.terminal[j] { 0.0 } else { self.gamma };
            let wj = k_tz[j] - gamma * k_tz[j + 1];
            let u = a_ext.gvec.dot(&self.v[j]) - wj;
            let residual = self.b[j].recip() - s_inv * u * u;
            if !(residual > residual_floor(self.noise_var)) {
                return Err(Error::NumericalDegeneracy(format!(
                    "transition {j}: 1/b = {residual:e} is not positive after adding a pseudo input"
                )));
            }
            w.push(wj);
            b_new.push(residual.recip());
        }

        let mut c_top = self.c.clone();
        let mut f_top = self.f.clone();
        let mut rho_top = self.rho.clone();
        let mut f_border = DVector::zeros(k);
        let mut f_corner = 0.0;
        let mut rho_corner = 0.0;
        for j in 0..n {
            let vj = &self.v[j];
            let delta = b_new[j] - self.b[j];
            if delta > 0.0 {
                c_top = rank_one_update(&c_top, vj, delta)?;
                f_top.ger(delta, vj, vj, 1.0);
                rho_top.axpy(delta * self.rewards[j], vj, 1.0);
            }
            f_border.axpy(b_new[j] * w[j], vj, 1.0);
            f_corner += b_new[j] * w[j] * w[j];
            rho_corner += b_new[j] * w[j] * self.rewards[j];
        }
        let c_ext = extend_spd_inverse(&c_top, &(&k_z + &f_border), k_zz + f_corner)?;

        let mut f = f_top.insert_row(k, 0.0).insert_column(k, 0.0);
        for i in 0..k {
            f[(i, k)] = f_border[i];
            f[(k, i)] = f_border[i];
        }
        f[(k, k)] = f_corner;
        symmetrize(&mut f);

        self.a = a_ext.inverse;
        self.c = c_ext.inverse;
        self.f = f;
        self.rho = rho_top.push(rho_corner);
        self.b = b_new;
        for (vj, wj) in self.v.iter_mut().zip(w) {
            *vj = std::mem::replace(vj, DVector::zeros(0)).push(wj);
        }
        self.pseudo.push(z);
        self.refresh_parameters();
        Ok(())
    }

    /// A transition followed by a pseudo input, applied atomically.
    pub fn add_both(
        &mut self,
        reward: f64,
        x_new: StateAction,
        terminal: bool,
        z_new: StateAction,
    ) -> Result<()> {
        let mut next = self.clone();
        next.add_transition(reward, x_new, terminal)?;
        next.add_pseudo_input(z_new)?;
        *self = next;
        Ok(())
    }

    fn refresh_parameters(&mut self) {
        self.alpha = self.c.inv() * &self.rho;
        let mut p = self.a.inv() - self.c.inv();
        symmetrize(&mut p);
        self.p = p;
    }

    pub fn predict(&self, x: &StateAction) -> Result<PredictiveMoments> {
        predict_from_parts(&self.spec, &self.pseudo, &self.alpha, &self.p, x)
    }

    pub fn params(&self) -> Result<PosteriorParams> {
        Ok(PosteriorParams {
            alpha: self.alpha.clone(),
            p: self.p.clone(),
            pseudo: self.pseudo_set()?,
            spec: self.spec.clone(),
        })
    }

    /// The transitions absorbed so far.
    pub fn dataset(&self) -> Result<TransitionDataset> {
        TransitionDataset::from_parts(
            self.inputs.clone(),
            self.rewards.clone(),
            self.terminal.clone(),
            self.gamma,
            self.noise_var,
        )
    }

    pub fn pseudo_set(&self) -> Result<PseudoInputSet> {
        PseudoInputSet::new(self.pseudo.clone())
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn last_input(&self) -> &StateAction {
        self.inputs.last().expect("state always holds an input")
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo.len()
    }

    pub fn a(&self) -> &SpdInverse {
        &self.a
    }

    pub fn c(&self) -> &SpdInverse {
        &self.c
    }

    /// Diagonal of `B`.
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// `H K_tk`, one row per transition.
    pub fn td_cross(&self) -> DMatrix<f64> {
        let k = self.pseudo.len();
        DMatrix::from_fn(self.v.len(), k, |j, i| self.v[j][i])
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &Checkpoint::from_state(self))?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let record: Checkpoint = serde_json::from_reader(input)?;
        record.into_state()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    /// Column-major.
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn into_matrix(self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(Error::Format(format!(
                "checkpoint matrix is {}x{}, expected {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(DMatrix::from_vec(rows, cols, self.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    spec: KernelSpec,
    gamma: f64,
    noise_var: f64,
    inputs: Vec<StateAction>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    pseudo: Vec<StateAction>,
    a: MatrixRecord,
    a_jitter: f64,
    c: MatrixRecord,
    c_jitter: f64,
    b: Vec<f64>,
    td_cross: Vec<Vec<f64>>,
    f: MatrixRecord,
    rho: Vec<f64>,
    alpha: Vec<f64>,
    p: MatrixRecord,
}

impl Checkpoint {
    fn from_state(s: &RecursiveState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: s.spec.clone(),
            gamma: s.gamma,
            noise_var: s.noise_var,
            inputs: s.inputs.clone(),
            rewards: s.rewards.clone(),
            terminal: s.terminal.clone(),
            pseudo: s.pseudo.clone(),
            a: MatrixRecord::from_matrix(s.a.inv()),
            a_jitter: s.a.jitter(),
            c: MatrixRecord::from_matrix(s.c.inv()),
            c_jitter: s.c.jitter(),
            b: s.b.clone(),
            td_cross: s.v.iter().map(|v| v.as_slice().to_vec()).collect(),
            f: MatrixRecord::from_matrix(&s.f),
            rho: s.rho.as_slice().to_vec(),
            alpha: s.alpha.as_slice().to_vec(),
            p: MatrixRecord::from_matrix(&s.p),
        }
    }

    fn into_state(self) -> Result<RecursiveState> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.spec.validate()?;
        // Revalidates the trajectory shape and parameters.
        TransitionDataset::from_parts(
            self.inputs.clone(),
            self.rewards.clone(),
            self.terminal.clone(),
            self.gamma,
            self.noise_var,
        )?;
        let k = self.pseudo.len();
        let n = self.rewards.len();
        if self.b.len() != n || self.td_cross.len() != n {
            return Err(Error::Format("checkpoint transition blocks have the wrong length".into()));
        }
        if self.rho.len() != k || self.alpha.len() != k || self.td_cross.iter().any(|v| v.len() != k) {
            return Err(Error::Format("checkpoint pseudo-input blocks have the wrong length".into()));
        }
        Ok(RecursiveState {
            a: SpdInverse::from_inverse(self.a.into_matrix(k, k)?, self.a_jitter)?,
            c: SpdInverse::from_inverse(self.c.into_matrix(k, k)?, self.c_jitter)?,
            f: self.f.into_matrix(k, k)?,
            p: self.p.into_matrix(k, k)?,
            v: self.td_cross.into_iter().map(DVector::from_vec).collect(),
            rho: DVector::from_vec(self.rho),
            alpha: DVector::from_vec(self.alpha),
            b: self.b,
            spec: self.spec,
            gamma: self.gamma,
            noise_var: self.noise_var,
            inputs: self.inputs,
            rewards: self.rewards,
            terminal: self.terminal,
            pseudo: self.pseudo,
        })
    }
}

//! Transition storage and the Bellman coefficient matrix.
//!
//! Inputs `x_1..x_t` are stored in visitation order and reward `r_i` is
//! observed on the transition `x_i -> x_{i+1}`, so a dataset with `t` inputs
//! carries `t - 1` rewards. Row `i` of the Bellman matrix `H` is
//! `(.., 1, -gamma, ..)` with the `1` in column `i`.
//!
//! Episodic data extends the single-trajectory model: when transition `i` is
//! terminal its row is `(.., 1, 0, ..)` (the absorbing condition
//! `r_i = Q(x_i) + noise`) and `x_{i+1}` is the first input of the next
//! episode, which therefore has no coupling row to its predecessor.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_discount, Error, Result};
use crate::kernel::{KernelSpec, StateAction};

const CSV_MAGIC: &str = "# spgptd-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    inputs: Vec<StateAction>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    noise_var: f64,
}

impl TransitionDataset {
    /// A dataset holding only its first input.
    pub fn new(first: StateAction, gamma: f64, noise_var: f64) -> Result<Self> {
        Self::from_parts(vec![first], vec![], vec![], gamma, noise_var)
    }

    pub fn from_parts(
        inputs: Vec<StateAction>,
        rewards: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        noise_var: f64,
    ) -> Result<Self> {
        check_discount(gamma)?;
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        if inputs.is_empty() {
            return Err(Error::InvalidShape("dataset needs at least one input".into()));
        }
        if rewards.len() + 1 != inputs.len() || terminal.len() != rewards.len() {
            return Err(Error::InvalidShape(format!(
                "{} inputs need {} rewards and terminal flags, got {} and {}",
                inputs.len(),
                inputs.len() - 1,
                rewards.len(),
                terminal.len()
            )));
        }
        let dim = inputs[0].dim();
        if let Some(x) = inputs.iter().find(|x| x.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.dim(),
            });
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidParameter(format!("reward must be finite, got {r}")));
        }
        Ok(Self {
            inputs,
            rewards,
            terminal,
            gamma,
            noise_var,
        })
    }

    /// Appends the transition `last_input -> next` carrying `reward`.
    pub fn push(&mut self, reward: f64, next: StateAction, terminal: bool) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::InvalidParameter(format!("reward must be finite, got {reward}")));
        }
        if next.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: next.dim(),
            });
        }
        self.inputs.push(next);
        self.rewards.push(reward);
        self.terminal.push(terminal);
        Ok(())
    }

    /// The first `n` inputs and the `n - 1` transitions between them.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.inputs.len() {
            return Err(Error::InvalidShape(format!(
                "prefix of {n} inputs from a dataset of {}",
                self.inputs.len()
            )));
        }
        Ok(Self {
            inputs: self.inputs[..n].to_vec(),
            rewards: self.rewards[..n - 1].to_vec(),
            terminal: self.terminal[..n - 1].to_vec(),
            gamma: self.gamma,
            noise_var: self.noise_var,
        })
    }

    pub fn inputs(&self) -> &[StateAction] {
        &self.inputs
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.rewards)
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].dim()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.rewards.len()
    }

    /// Discount applied on transition `i`: zero when it is terminal.
    pub fn effective_gamma(&self, i: usize) -> f64 {
        if self.terminal[i] {
            0.0
        } else {
            self.gamma
        }
    }

    pub fn bellman(&self) -> Result<BellmanMatrix> {
        BellmanMatrix::from_flags(self.inputs.len(), self.gamma, &self.terminal)
    }

    /// Writes one record per input: coordinates, the reward of the transition
    /// leaving it and its terminal flag. The last record leaves both empty.
    pub fn write_csv<W: Write>(&self, mut out: W, extra_header: &[String]) -> Result<()> {
        writeln!(
            out,
            "{CSV_MAGIC} dim={} gamma={:?} noise_var={:?}",
            self.dim(),
            self.gamma,
            self.noise_var
        )?;
        for line in extra_header {
            writeln!(out, "# {line}")?;
        }
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|d| format!("x{d}")).collect();
        header.push("reward".into());
        header.push("terminal".into());
        wtr.write_record(&header)?;
        for (i, x) in self.inputs.iter().enumerate() {
            let mut rec: Vec<String> = x.coords().iter().map(|c| format!("{c:?}")).collect();
            match self.rewards.get(i) {
                Some(r) => {
                    rec.push(format!("{r:?}"));
                    rec.push(u8::from(self.terminal[i]).to_string());
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let meta = first
            .trim_end()
            .strip_prefix(CSV_MAGIC)
            .ok_or_else(|| Error::Format("missing dataset header line".into()))?;
        let mut dim = None;
        let mut gamma = None;
        let mut noise_var = None;
        for field in meta.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = |_| Error::Format(format!("bad value in header field {field:?}"));
            match key {
                "dim" => dim = Some(value.parse::<usize>().map_err(|_| Error::Format(field.into()))?),
                "gamma" => gamma = Some(value.parse::<f64>().map_err(bad)?),
                "noise_var" => noise_var = Some(value.parse::<f64>().map_err(bad)?),
                _ => {}
            }
        }
        let (dim, gamma, noise_var) = match (dim, gamma, noise_var) {
            (Some(d), Some(g), Some(s)) => (d, g, s),
            _ => return Err(Error::Format("header must carry dim, gamma and noise_var".into())),
        };

        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() != dim + 2 {
            return Err(Error::Format(format!(
                "expected {} columns for dim={dim}, found {}",
                dim + 2,
                header.len()
            )));
        }

        let mut inputs = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = Vec::new();
        let mut open = false;
        for rec in rdr.records() {
            let rec = rec?;
            if !inputs.is_empty() && !open {
                return Err(Error::Format("record after the final input".into()));
            }
            let coords = (0..dim)
                .map(|d| {
                    rec[d]
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad coordinate {:?}", &rec[d])))
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(StateAction::new(coords)?);
            let (r, term) = (rec[dim].trim(), rec[dim + 1].trim());
            open = !r.is_empty();
            if open {
                rewards.push(
                    r.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad reward {r:?}")))?,
                );
                terminal.push(match term {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => return Err(Error::Format(format!("bad terminal flag {other:?}"))),
                });
            }
        }
        if open {
            return Err(Error::Format("final record must leave reward empty".into()));
        }
        Self::from_parts(inputs, rewards, terminal, gamma, noise_var)
    }
}

/// The `(t-1) x t` banded temporal-difference coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanMatrix {
    cols: usize,
    gamma: f64,
    terminal: Vec<bool>,
}

impl BellmanMatrix {
    /// `terminal_rows` holds zero-based row indices.
    pub fn new(t: usize, gamma: f64, terminal_rows: &[usize]) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidShape(format!("Bellman matrix needs t >= 2, got {t}")));
        }
        let mut flags = vec![false; t - 1];
        for &r in terminal_rows {
            *flags.get_mut(r).ok_or_else(|| {
                Error::InvalidShape(format!("terminal row {r} outside 0..{}", t - 1))
            })? = true;
        }
        Self::from_flags(t, gamma, &flags)
    }

    pub fn from_flags(t: usize, gamma: f64, terminal: &[bool]) -> Result<Self> {
        check_discount(gamma)?;
        if t < 2 {
            return Err(Error::InvalidShape(format!("Bellman matrix needs t >= 2, got {t}")));
        }
        if terminal.len() != t - 1 {
            return Err(Error::InvalidShape(format!(
                "{} terminal flags for {} rows",
                terminal.len(),
                t - 1
            )));
        }
        Ok(Self {
            cols: t,
            gamma,
            terminal: terminal.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.cols - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn terminal_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.terminal
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.then_some(i))
    }

    /// Coefficient on column `i + 1` of row `i`.
    pub fn successor_coeff(&self, row: usize) -> f64 {
        if self.terminal[row] {
            0.0
        } else {
            -self.gamma
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows(), self.cols);
        for i in 0..self.rows() {
            h[(i, i)] = 1.0;
            h[(i, i + 1)] = self.successor_coeff(i);
        }
        h
    }

    /// `H * m` in `O(t n)` without materializing `H`.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "H has {} columns but the operand has {} rows",
                self.cols,
                m.nrows()
            )));
        }
        let mut out = DMatrix::zeros(self.rows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..self.rows() {
                out[(i, j)] = m[(i, j)] + self.successor_coeff(i) * m[(i + 1, j)];
            }
        }
        Ok(out)
    }

    pub fn apply_vector(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "H has {} columns but the vector has length {}",
                self.cols,
                v.len()
            )));
        }
        Ok(DVector::from_fn(self.rows(), |i, _| {
            v[i] + self.successor_coeff(i) * v[i + 1]
        }))
    }
}

/// `K_rr = H K H'` for a dataset, plus the map `x -> H k(x)`.
#[derive(Debug, Clone)]
pub struct TdGram<'a> {
    pub k_rr: DMatrix<f64>,
    bellman: BellmanMatrix,
    inputs: &'a [StateAction],
    spec: &'a KernelSpec,
}

impl TdGram<'_> {
    pub fn bellman(&self) -> &BellmanMatrix {
        &self.bellman
    }

    /// `k_r*(x) = H k(x)`
    pub fn cross(&self, x: &StateAction) -> Result<DVector<f64>> {
        self.bellman
            .apply_vector(&self.spec.kernel_vector(self.inputs, x)?)
    }
}

pub fn assemble_td_gram<'a>(
    dataset: &'a TransitionDataset,
    spec: &'a KernelSpec,
) -> Result<TdGram<'a>> {
    let bellman = dataset.bellman()?;
    let k = spec.kernel_matrix(dataset.inputs(), dataset.inputs())?;
    let hk = bellman.apply(&k)?;
    let mut k_rr = bellman.apply(&hk.transpose())?;
    crate::blockinv::symmetrize(&mut k_rr);
    Ok(TdGram {
        k_rr,
        bellman,
        inputs: dataset.inputs(),
        spec,
    })
}

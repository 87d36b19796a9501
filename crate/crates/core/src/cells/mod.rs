//! Vanilla, GRU and LSTM cells with per-group quantization.
//!
//! Weights are stored as named [`WeightGroup`]s. Matrices map column vectors
//! (`W · h`), so an input-to-hidden matrix has shape `hidden × input`; batches
//! are carried as rows, so a forward step computes `x · Wᵀ`.
//!
//! Group order for a cell with `n` gates (1 vanilla, 3 GRU, 4 LSTM) is:
//! `n` input matrices, `n` recurrent matrices, `n` biases. The readout
//! matrix and bias follow.

mod backward;
mod forward;

pub use backward::{backward, CellGrads};
pub use forward::{gru_forward, lstm_forward, vanilla_forward, StateTrace, Step};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Activation, Matrix, Rng};
use crate::quantize::QuantizerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Vanilla => &["h"],
            CellKind::Gru => &["z", "r", "h"],
            CellKind::Lstm => &["i", "f", "o", "g"],
        }
    }
}

/// What a weight group feeds. The readout bias is never quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Recurrent,
    Bias,
    Output,
    OutputBias,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Input => 0,
            Role::Recurrent => 1,
            Role::Bias => 2,
            Role::Output => 3,
            Role::OutputBias => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Role::Input,
            1 => Role::Recurrent,
            2 => Role::Bias,
            3 => Role::Output,
            4 => Role::OutputBias,
            _ => return None,
        })
    }
}

/// Quantizer per role. Absent entries leave the role at full precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<QuantizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recurrent: Option<QuantizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<QuantizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<QuantizerSpec>,
}

impl Scope {
    pub fn none() -> Self {
        Self::default()
    }

    /// Input weights only (`W_x`).
    pub fn input(q: QuantizerSpec) -> Self {
        Self {
            input: Some(q),
            ..Self::default()
        }
    }

    /// Input weights and cell biases (`W_x, b`).
    pub fn input_and_bias(q: QuantizerSpec) -> Self {
        Self {
            input: Some(q),
            bias: Some(q),
            ..Self::default()
        }
    }

    /// Recurrent weights only (`W_h`).
    pub fn recurrent(q: QuantizerSpec) -> Self {
        Self {
            recurrent: Some(q),
            ..Self::default()
        }
    }

    /// Every cell weight and bias. The readout stays at full precision.
    pub fn all(q: QuantizerSpec) -> Self {
        Self {
            input: Some(q),
            recurrent: Some(q),
            bias: Some(q),
            output: None,
        }
    }

    pub fn get(&self, role: Role) -> Option<QuantizerSpec> {
        match role {
            Role::Input => self.input,
            Role::Recurrent => self.recurrent,
            Role::Bias => self.bias,
            Role::Output => self.output,
            Role::OutputBias => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, q) in [
            ("input", self.input),
            ("recurrent", self.recurrent),
            ("bias", self.bias),
            ("output", self.output),
        ] {
            if let Some(q) = q {
                q.validate()
                    .map_err(|e| Error::config(format!("scope.{name}"), e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    /// Vanilla cells only; gated cells use logistic gates and tanh.
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub scope: Scope,
}

impl CellConfig {
    pub fn new(kind: CellKind, input_size: usize, hidden_size: usize) -> Self {
        Self {
            kind,
            input_size,
            hidden_size,
            activation: Activation::Relu,
            scope: Scope::none(),
        }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("cell.input_size", "must be positive"));
        }
        if self.hidden_size == 0 {
            return Err(Error::config("cell.hidden_size", "must be positive"));
        }
        self.scope.validate()
    }

    /// Number of cell (non-readout) groups.
    pub fn group_count(&self) -> usize {
        3 * self.kind.gate_count()
    }
}

/// Index of gate `k`'s input matrix, recurrent matrix and bias.
#[inline]
pub(crate) fn gate_groups(kind: CellKind, k: usize) -> (usize, usize, usize) {
    let n = kind.gate_count();
    (k, n + k, 2 * n + k)
}

/// A full-precision master and the image the forward pass actually uses.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGroup {
    pub name: String,
    pub role: Role,
    pub master: Matrix,
    pub quantized: Matrix,
    pub quantizer: Option<QuantizerSpec>,
}

/// How [`WeightGroup::refresh`] builds the forward-pass image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Each quantizer's configured variant (stochastic draws allowed).
    Training,
    /// Each quantizer's deterministic variant.
    Deterministic,
    /// Masters used directly.
    FullPrecision,
}

impl WeightGroup {
    pub fn new(name: impl Into<String>, role: Role, master: Matrix) -> Self {
        Self {
            name: name.into(),
            role,
            quantized: master.clone(),
            master,
            quantizer: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.master.shape()
    }

    pub fn refresh(&mut self, sampling: Sampling, rng: &mut Rng) {
        self.quantized = match (self.quantizer, sampling) {
            (None, _) | (Some(_), Sampling::FullPrecision) => self.master.clone(),
            (Some(q), Sampling::Training) => q.apply(&self.master, rng),
            (Some(q), Sampling::Deterministic) => q.apply_deterministic(&self.master),
        };
    }
}

/// A recurrent cell followed by an affine readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cell: CellConfig,
    pub output_size: usize,
    pub groups: Vec<WeightGroup>,
}

impl Network {
    /// Initializes weights from `rng`:
    ///
    /// * vanilla: recurrent matrix = identity, input and readout matrices
    ///   uniform in `[-0.01, 0.01]`
    /// * GRU / LSTM: Glorot-uniform matrices
    /// * biases zero, except the LSTM forget bias which starts at 1
    pub fn new(cell: CellConfig, output_size: usize, rng: &mut Rng) -> Result<Self> {
        cell.validate()?;
        let (h, i) = (cell.hidden_size, cell.input_size);
        let kind = cell.kind;
        let glorot = |rng: &mut Rng, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-limit, limit))
        };
        let small = |rng: &mut Rng, rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-0.01, 0.01))
        };

        let names = kind.gate_names();
        let mut groups = Vec::with_capacity(cell.group_count() + 2);
        for name in names {
            let m = match kind {
                CellKind::Vanilla => small(rng, h, i),
                _ => glorot(rng, h, i),
            };
            groups.push(WeightGroup::new(format!("w_x{name}"), Role::Input, m));
        }
        for name in names {
            let m = match kind {
                CellKind::Vanilla => Matrix::identity(h),
                _ => glorot(rng, h, h),
            };
            groups.push(WeightGroup::new(format!("w_h{name}"), Role::Recurrent, m));
        }
        for name in names {
            let fill = if kind == CellKind::Lstm && *name == "f" {
                1.0
            } else {
                0.0
            };
            groups.push(WeightGroup::new(
                format!("b_{name}"),
                Role::Bias,
                Matrix::filled(1, h, fill),
            ));
        }
        let w_out = match kind {
            CellKind::Vanilla => small(rng, output_size, h),
            _ => glorot(rng, output_size, h),
        };
        groups.push(WeightGroup::new("w_out", Role::Output, w_out));
        groups.push(WeightGroup::new(
            "b_out",
            Role::OutputBias,
            Matrix::zeros(1, output_size),
        ));

        let mut net = Self {
            cell,
            output_size,
            groups,
        };
        net.assign_quantizers();
        Ok(net)
    }

    /// Builds a network from explicit groups (checkpoint load, tests).
    pub fn from_groups(cell: CellConfig, output_size: usize, groups: Vec<WeightGroup>) -> Result<Self> {
        cell.validate()?;
        let net = Self {
            cell,
            output_size,
            groups,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, i, o) = (self.cell.hidden_size, self.cell.input_size, self.output_size);
        let n = self.cell.kind.gate_count();
        if self.groups.len() != 3 * n + 2 {
            return Err(Error::format(
                "network",
                format!("expected {} weight groups, found {}", 3 * n + 2, self.groups.len()),
            ));
        }
        for (idx, g) in self.groups.iter().enumerate() {
            let expected = match idx {
                k if k < n => (h, i),
                k if k < 2 * n => (h, h),
                k if k < 3 * n => (1, h),
                k if k == 3 * n => (o, h),
                _ => (1, o),
            };
            if g.master.shape() != expected || g.quantized.shape() != expected {
                return Err(Error::Shape {
                    op: "weight group",
                    lhs: expected,
                    rhs: g.master.shape(),
                });
            }
        }
        Ok(())
    }

    /// Re-applies the scope to every group (after editing `cell.scope`).
    pub fn assign_quantizers(&mut self) {
        for g in &mut self.groups {
            g.quantizer = self.cell.scope.get(g.role);
            g.quantized = g.master.clone();
        }
    }

    pub fn cell_groups(&self) -> &[WeightGroup] {
        &self.groups[..self.cell.group_count()]
    }

    pub fn readout_weight(&self) -> &WeightGroup {
        &self.groups[self.cell.group_count()]
    }

    pub fn readout_bias(&self) -> &WeightGroup {
        &self.groups[self.cell.group_count() + 1]
    }

    pub fn group(&self, name: &str) -> Option<&WeightGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut WeightGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    /// Rebuilds every group's forward image. Groups are visited in order, so
    /// the draws taken from `rng` are reproducible.
    pub fn refresh(&mut self, sampling: Sampling, rng: &mut Rng) {
        for g in &mut self.groups {
            g.refresh(sampling, rng);
        }
    }

    pub fn has_quantizers(&self) -> bool {
        self.groups.iter().any(|g| g.quantizer.is_some())
    }

    /// Runs the cell over `x_seq` (each step `batch × input`).
    ///
    /// Rows whose mask entry is `false` carry their state unchanged.
    pub fn forward(
        &self,
        x_seq: &[Matrix],
        h0: Option<&Matrix>,
        c0: Option<&Matrix>,
        mask: Option<&[Vec<bool>]>,
    ) -> Result<StateTrace> {
        let batch = x_seq.first().map_or(1, Matrix::rows);
        let zeros = Matrix::zeros(batch, self.cell.hidden_size);
        let h0 = h0.unwrap_or(&zeros);
        let w = self.cell_groups();
        match self.cell.kind {
            CellKind::Vanilla => forward::run_vanilla(&self.cell, w, x_seq, h0, mask),
            CellKind::Gru => gru_forward(&self.cell, w, x_seq, h0, mask),
            CellKind::Lstm => {
                lstm_forward(&self.cell, w, x_seq, h0, c0.unwrap_or(&zeros), mask)
            }
        }
    }

    /// Readout logits `h · W_outᵀ + b_out`.
    pub fn logits(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul_bt(&self.readout_weight().quantized)?;
        z.add_row_broadcast(&self.readout_bias().quantized)?;
        Ok(z)
    }

    pub fn probabilities(&self, h: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(h)?))
    }

    /// Backpropagates `dlogits` through the readout. Accumulates into
    /// `grads` (readout weight, readout bias) and returns `dL/dh`.
    pub fn readout_backward(
        &self,
        h: &Matrix,
        dlogits: &Matrix,
        grad_w: &mut Matrix,
        grad_b: &mut Matrix,
    ) -> Result<Matrix> {
        dlogits.matmul_at_acc(h, grad_w)?;
        grad_b.add_assign(&dlogits.sum_rows())?;
        dlogits.matmul(&self.readout_weight().quantized)
    }

    /// BPTT through the cell; see [`backward`].
    pub fn backward(&self, trace: &StateTrace, grad_out: &[Matrix]) -> Result<CellGrads> {
        backward(&self.cell, self.cell_groups(), trace, grad_out)
    }

    /// Zero gradients for every group, readout included.
    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.groups
            .iter()
            .map(|g| Matrix::zeros(g.master.rows(), g.master.cols()))
            .collect()
    }
}

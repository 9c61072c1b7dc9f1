//! Gated recurrent cells: peephole LSTM, GRU and the minimal gated unit (MGU).
//!
//! On the tape, inputs are `[D, B]` and states `[H, B]`: one column per sample.
//! Weight matrices are stored `[H, D]` / `[H, H]`, so every gate is `W·x + U·h + b`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Gru,
    Mgu,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Lstm, CellKind::Gru, CellKind::Mgu];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Mgu => "mgu",
        }
    }

    pub fn block_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &LstmParams::NAMES,
            CellKind::Gru => &GruParams::NAMES,
            CellKind::Mgu => &MguParams::NAMES,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "mgu" => Ok(CellKind::Mgu),
            other => Err(Error::InvalidArgument(format!("unknown cell `{other}` (lstm, gru, mgu)"))),
        }
    }
}

/// Number of trainable scalars in a cell with input size `d` and hidden size `h`,
/// bias vectors and diagonal peepholes included.
pub fn param_count(kind: CellKind, d: usize, h: usize) -> usize {
    let gate = d * h + h * h + h;
    match kind {
        CellKind::Lstm => 4 * gate + 3 * h,
        CellKind::Gru => 3 * gate,
        CellKind::Mgu => 2 * gate,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_m: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_m: Tensor,
    /// Diagonal peepholes, stored as vectors.
    pub v_i: Tensor,
    pub v_f: Tensor,
    pub v_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_m: Tensor,
}

impl LstmParams {
    pub const NAMES: [&'static str; 15] = [
        "w_i", "w_f", "w_o", "w_m", "u_i", "u_f", "u_o", "u_m", "v_i", "v_f", "v_o", "b_i", "b_f", "b_o", "b_m",
    ];

    fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.w_i, &self.w_f, &self.w_o, &self.w_m, &self.u_i, &self.u_f, &self.u_o, &self.u_m, &self.v_i,
            &self.v_f, &self.v_o, &self.b_i, &self.b_f, &self.b_o, &self.b_m,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_m,
            &mut self.u_i,
            &mut self.u_f,
            &mut self.u_o,
            &mut self.u_m,
            &mut self.v_i,
            &mut self.v_f,
            &mut self.v_o,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_m,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b: Tensor,
}

impl GruParams {
    pub const NAMES: [&'static str; 9] = ["w_z", "w_r", "w", "u_z", "u_r", "u", "b_z", "b_r", "b"];

    fn tensors(&self) -> [&Tensor; 9] {
        [&self.w_z, &self.w_r, &self.w, &self.u_z, &self.u_r, &self.u, &self.b_z, &self.b_r, &self.b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MguParams {
    pub w_f: Tensor,
    pub w_h: Tensor,
    pub u_f: Tensor,
    pub u_h: Tensor,
    pub b_f: Tensor,
    pub b_h: Tensor,
}

impl MguParams {
    pub const NAMES: [&'static str; 6] = ["w_f", "w_h", "u_f", "u_h", "b_f", "b_h"];

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_f, &self.w_h, &self.u_f, &self.u_h, &self.b_f, &self.b_h]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.w_f, &mut self.w_h, &mut self.u_f, &mut self.u_h, &mut self.b_f, &mut self.b_h]
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CellParams {
    Lstm(LstmParams),
    Gru(GruParams),
    Mgu(MguParams),
}

/// Expected shape of a named block: `w_*` is `[H, D]`, `u*` is `[H, H]`, the rest `[H]`.
fn block_dims(name: &str, input: usize, hidden: usize) -> Vec<usize> {
    if name.starts_with('w') {
        vec![hidden, input]
    } else if name.starts_with('u') {
        vec![hidden, hidden]
    } else {
        vec![hidden]
    }
}

impl CellParams {
    /// `W`, `U` uniform in `[-1/sqrt(H), 1/sqrt(H)]`; peepholes and biases zero.
    pub fn init(kind: CellKind, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let blocks = kind
            .block_names()
            .iter()
            .map(|name| {
                let dims = block_dims(name, input, hidden);
                if name.starts_with(['w', 'u']) {
                    Tensor::uniform(&dims, bound, rng)
                } else {
                    Tensor::zeros(&dims)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(kind, blocks)
    }

    /// Zero-valued parameters.
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Result<Self> {
        let blocks = kind
            .block_names()
            .iter()
            .map(|name| Tensor::zeros(&block_dims(name, input, hidden)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(kind, blocks)
    }

    /// Assembles parameters from blocks listed in [`CellParams::block_names`] order.
    pub fn from_blocks(kind: CellKind, blocks: Vec<Tensor>) -> Result<Self> {
        let names = kind.block_names();
        if blocks.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "{kind} needs {} parameter blocks, got {}",
                names.len(),
                blocks.len()
            )));
        }
        let hidden = blocks[0].dims()[0];
        let input = blocks[0].dims().get(1).copied().unwrap_or(0);
        for (name, t) in names.iter().zip(&blocks) {
            let want = block_dims(name, input, hidden);
            if t.dims() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "cell params",
                    left: crate::tensor::Shape::new(&want)?,
                    right: t.shape().clone(),
                });
            }
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(match kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams {
                w_i: next(),
                w_f: next(),
                w_o: next(),
                w_m: next(),
                u_i: next(),
                u_f: next(),
                u_o: next(),
                u_m: next(),
                v_i: next(),
                v_f: next(),
                v_o: next(),
                b_i: next(),
                b_f: next(),
                b_o: next(),
                b_m: next(),
            }),
            CellKind::Gru => CellParams::Gru(GruParams {
                w_z: next(),
                w_r: next(),
                w: next(),
                u_z: next(),
                u_r: next(),
                u: next(),
                b_z: next(),
                b_r: next(),
                b: next(),
            }),
            CellKind::Mgu => CellParams::Mgu(MguParams {
                w_f: next(),
                w_h: next(),
                u_f: next(),
                u_h: next(),
                b_f: next(),
                b_h: next(),
            }),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Lstm(_) => CellKind::Lstm,
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Mgu(_) => CellKind::Mgu,
        }
    }

    pub fn block_names(&self) -> &'static [&'static str] {
        self.kind().block_names()
    }

    pub fn blocks(&self) -> Vec<&Tensor> {
        match self {
            CellParams::Lstm(p) => p.tensors().to_vec(),
            CellParams::Gru(p) => p.tensors().to_vec(),
            CellParams::Mgu(p) => p.tensors().to_vec(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            CellParams::Lstm(p) => p.tensors_mut().into_iter().collect(),
            CellParams::Gru(p) => p.tensors_mut().into_iter().collect(),
            CellParams::Mgu(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.blocks()[0].dims()[0]
    }

    pub fn input_size(&self) -> usize {
        self.blocks()[0].dims()[1]
    }

    pub fn numel(&self) -> usize {
        self.blocks().iter().map(|t| t.numel()).sum()
    }

    /// Records the parameters on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCell {
        let vars = self
            .blocks()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundCell {
            kind: self.kind(),
            hidden: self.hidden_size(),
            vars,
        }
    }
}

/// Hidden output and, for the LSTM, the memory cell.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub m: Option<Var>,
}

/// Cell parameters recorded on a tape, in [`CellParams::block_names`] order.
#[derive(Clone, Debug)]
pub struct BoundCell {
    pub kind: CellKind,
    pub hidden: usize,
    pub vars: Vec<Var>,
}

/// `W·x + U·h + b`
fn affine(tape: &mut Tape, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add_bias(s, b)
}

/// `(1 - g) ⊙ prev + g ⊙ candidate`
fn interpolate(tape: &mut Tape, gate: Var, prev: Var, candidate: Var) -> Result<Var> {
    let keep = tape.one_minus(gate)?;
    let kept = tape.hadamard(keep, prev)?;
    let moved = tape.hadamard(gate, candidate)?;
    tape.add(kept, moved)
}

fn debug_check_range(tape: &Tape, v: Var, lo: f64, hi: f64) {
    debug_assert!(
        tape.value(v).data().iter().all(|&x| (lo..=hi).contains(&x)),
        "value outside [{lo}, {hi}]"
    );
}

impl BoundCell {
    /// All-zero initial state for a batch of `batch` columns.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<StateVars> {
        let h = tape.constant(Tensor::zeros(&[self.hidden, batch])?);
        let m = match self.kind {
            CellKind::Lstm => Some(tape.constant(Tensor::zeros(&[self.hidden, batch])?)),
            _ => None,
        };
        Ok(StateVars { h, m })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: StateVars) -> Result<StateVars> {
        match self.kind {
            CellKind::Lstm => self.lstm_step(tape, x, state),
            CellKind::Gru => self.gru_step(tape, x, state),
            CellKind::Mgu => self.mgu_step(tape, x, state),
        }
    }

    fn lstm_step(&self, tape: &mut Tape, x: Var, state: StateVars) -> Result<StateVars> {
        let [w_i, w_f, w_o, w_m, u_i, u_f, u_o, u_m, v_i, v_f, v_o, b_i, b_f, b_o, b_m]: [Var; 15] =
            self.vars.as_slice().try_into().expect("lstm block count");
        let (h, m) = (state.h, state.m.expect("lstm state carries memory"));

        let pre_i = affine(tape, w_i, x, u_i, h, b_i)?;
        let peep_i = tape.diag_mul(v_i, m)?;
        let pre_i = tape.add(pre_i, peep_i)?;
        let i = tape.sigmoid(pre_i)?;

        let pre_f = affine(tape, w_f, x, u_f, h, b_f)?;
        let peep_f = tape.diag_mul(v_f, m)?;
        let pre_f = tape.add(pre_f, peep_f)?;
        let f = tape.sigmoid(pre_f)?;

        let pre_m = affine(tape, w_m, x, u_m, h, b_m)?;
        let candidate = tape.tanh(pre_m)?;

        let kept = tape.hadamard(f, m)?;
        let written = tape.hadamard(i, candidate)?;
        let m_next = tape.add(kept, written)?;

        // The output gate peeks at the updated memory.
        let pre_o = affine(tape, w_o, x, u_o, h, b_o)?;
        let peep_o = tape.diag_mul(v_o, m_next)?;
        let pre_o = tape.add(pre_o, peep_o)?;
        let o = tape.sigmoid(pre_o)?;

        let squashed = tape.tanh(m_next)?;
        let h_next = tape.hadamard(o, squashed)?;

        for gate in [i, f, o] {
            debug_check_range(tape, gate, 0.0, 1.0);
        }
        debug_check_range(tape, h_next, -1.0, 1.0);
        Ok(StateVars {
            h: h_next,
            m: Some(m_next),
        })
    }

    fn gru_step(&self, tape: &mut Tape, x: Var, state: StateVars) -> Result<StateVars> {
        let [w_z, w_r, w, u_z, u_r, u, b_z, b_r, b]: [Var; 9] =
            self.vars.as_slice().try_into().expect("gru block count");
        let prev = state.h;

        let pre_z = affine(tape, w_z, x, u_z, prev, b_z)?;
        let z = tape.sigmoid(pre_z)?;
        let pre_r = affine(tape, w_r, x, u_r, prev, b_r)?;
        let r = tape.sigmoid(pre_r)?;

        let reset = tape.hadamard(r, prev)?;
        let pre_c = affine(tape, w, x, u, reset, b)?;
        let candidate = tape.tanh(pre_c)?;

        let next = interpolate(tape, z, prev, candidate)?;
        for gate in [z, r] {
            debug_check_range(tape, gate, 0.0, 1.0);
        }
        Ok(StateVars { h: next, m: None })
    }

    fn mgu_step(&self, tape: &mut Tape, x: Var, state: StateVars) -> Result<StateVars> {
        let [w_f, w_h, u_f, u_h, b_f, b_h]: [Var; 6] = self.vars.as_slice().try_into().expect("mgu block count");
        let prev = state.h;

        let pre_f = affine(tape, w_f, x, u_f, prev, b_f)?;
        let f = tape.sigmoid(pre_f)?;
        let gated = tape.hadamard(f, prev)?;
        let pre_c = affine(tape, w_h, x, u_h, gated, b_h)?;
        let candidate = tape.tanh(pre_c)?;

        let next = interpolate(tape, f, prev, candidate)?;
        debug_check_range(tape, f, 0.0, 1.0);
        Ok(StateVars { h: next, m: None })
    }

    /// Folds the step over axis 0 of a `[T, D, B]` sequence from the zero state.
    pub fn unroll(&self, tape: &mut Tape, sequence: Var) -> Result<StateVars> {
        let dims = tape.shape(sequence).dims().to_vec();
        let [steps, _, batch] = dims[..] else {
            return Err(Error::InvalidArgument(format!(
                "unroll expects a [T, D, B] sequence, got {}",
                tape.shape(sequence)
            )));
        };
        let mut state = self.zero_state(tape, batch)?;
        for t in 0..steps {
            let x = tape.select(sequence, t)?;
            state = self.step(tape, x, state)?;
        }
        Ok(state)
    }
}

/// Hidden state `h` and LSTM memory `m` (empty for GRU and MGU).
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub m: Vec<f64>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        CellState {
            h: vec![0.0; hidden],
            m: if kind == CellKind::Lstm { vec![0.0; hidden] } else { Vec::new() },
        }
    }
}

fn column(v: &[f64]) -> Result<Tensor> {
    Tensor::new(&[v.len(), 1], v.to_vec())
}

fn check_step_dims(params: &CellParams, x: &[f64], state: &CellState) -> Result<()> {
    let (d, h) = (params.input_size(), params.hidden_size());
    let m_len = if params.kind() == CellKind::Lstm { h } else { 0 };
    if x.len() != d || state.h.len() != h || state.m.len() != m_len {
        return Err(Error::InvalidArgument(format!(
            "{} step expects x[{d}], h[{h}], m[{m_len}]; got x[{}], h[{}], m[{}]",
            params.kind(),
            x.len(),
            state.h.len(),
            state.m.len()
        )));
    }
    Ok(())
}

/// One step of any cell kind on plain vectors.
pub fn cell_step(params: &CellParams, x: &[f64], state: &CellState) -> Result<CellState> {
    check_step_dims(params, x, state)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(column(x)?);
    let h = tape.constant(column(&state.h)?);
    let m = match params.kind() {
        CellKind::Lstm => Some(tape.constant(column(&state.m)?)),
        _ => None,
    };
    let next = bound.step(&mut tape, xv, StateVars { h, m })?;
    Ok(CellState {
        h: tape.value(next.h).data().to_vec(),
        m: next.m.map(|m| tape.value(m).data().to_vec()).unwrap_or_default(),
    })
}

pub fn lstm_step(params: &LstmParams, x: &[f64], state: &CellState) -> Result<CellState> {
    cell_step(&CellParams::Lstm(params.clone()), x, state)
}

pub fn gru_step(params: &GruParams, x: &[f64], state: &CellState) -> Result<CellState> {
    cell_step(&CellParams::Gru(params.clone()), x, state)
}

pub fn mgu_step(params: &MguParams, x: &[f64], state: &CellState) -> Result<CellState> {
    cell_step(&CellParams::Mgu(params.clone()), x, state)
}

/// Runs the cell over `sequence` from the zero state and returns the final state.
pub fn unroll(params: &CellParams, sequence: &[Vec<f64>]) -> Result<CellState> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("unroll needs a non-empty sequence".into()));
    }
    let d = params.input_size();
    if let Some(bad) = sequence.iter().find(|x| x.len() != d) {
        return Err(Error::InvalidArgument(format!("sequence element of length {} (expected {d})", bad.len())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let seq = tape.constant(Tensor::new(&[sequence.len(), d, 1], sequence.concat())?);
    let last = bound.unroll(&mut tape, seq)?;
    Ok(CellState {
        h: tape.value(last.h).data().to_vec(),
        m: last.m.map(|m| tape.value(m).data().to_vec()).unwrap_or_default(),
    })
}

use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One LSTM direction.
///
/// Gate pre-activations are laid out in column blocks of width `hidden_dim`
/// in the order input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Hidden and cell state; `None` stands for the all-zero initial state.
pub type LstmState = Option<(Var, Var)>;

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = 4 * hidden_dim;
        Self {
            w_input: store.add_uniform(format!("{name}.w_input"), vec![input_dim, g], input_dim, rng),
            w_hidden: store.add_uniform(format!("{name}.w_hidden"), vec![hidden_dim, g], hidden_dim, rng),
            bias: store.add_uniform(format!("{name}.bias"), vec![g], hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    /// `x · W_input + b` for every row of `x` at once.
    pub fn project_inputs(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::shape(
                "lstm",
                format!("input width {cols}, expected {}", self.input_dim),
            ));
        }
        let h = tape.matmul(x, params.get(self.w_input))?;
        tape.add_row(h, params.get(self.bias))
    }

    /// One recurrence step from already projected inputs.
    pub fn step_projected(&self, tape: &mut Tape, params: &Bound, projected: Var, state: LstmState) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        let z = match state {
            Some((h, _)) => {
                let rec = tape.matmul(h, params.get(self.w_hidden))?;
                tape.add(projected, rec)?
            }
            None => projected,
        };
        let gates = tape.slice_cols(z, 0, 3 * hd)?;
        let gates = tape.sigmoid(gates)?;
        let cand = tape.slice_cols(z, 3 * hd, 4 * hd)?;
        let cand = tape.tanh(cand)?;
        let input = tape.slice_cols(gates, 0, hd)?;
        let output = tape.slice_cols(gates, 2 * hd, 3 * hd)?;
        let written = tape.mul(input, cand)?;
        let c = match state {
            Some((_, c_prev)) => {
                let forget = tape.slice_cols(gates, hd, 2 * hd)?;
                let kept = tape.mul(forget, c_prev)?;
                tape.add(kept, written)?
            }
            None => written,
        };
        let squashed = tape.tanh(c)?;
        let h = tape.mul(output, squashed)?;
        Ok((h, c))
    }

    /// Single step `(h, c) = LSTM(x, h_prev, c_prev)` on `rows × dim` inputs.
    pub fn step(&self, tape: &mut Tape, params: &Bound, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let rows = tape.value(x).rows();
        for (name, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
            if tape.value(v).dims2() != (rows, self.hidden_dim) {
                return Err(Error::shape(
                    "lstm_step",
                    format!("{name} has shape {:?}, expected [{rows}, {}]", tape.value(v).shape(), self.hidden_dim),
                ));
            }
        }
        let projected = self.project_inputs(tape, params, x)?;
        self.step_projected(tape, params, projected, Some((h_prev, c_prev)))
    }

    /// Runs the recurrence over time-major rows (`row = t * batch + b`).
    ///
    /// With `reverse`, time runs from the end and sequence `b` starts from the
    /// zero state at its own last position `lengths[b] - 1`; padded steps
    /// leave the state untouched. Returns one `batch × hidden` state per step,
    /// in time order.
    fn run(&self, tape: &mut Tape, params: &Bound, x: Var, batch: usize, lengths: &[usize], reverse: bool) -> Result<Vec<Var>> {
        let steps = tape.value(x).rows() / batch;
        let projected = self.project_inputs(tape, params, x)?;
        let mut outputs = vec![None; steps];
        let mut state: LstmState = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let xt = tape.slice_rows(projected, t * batch, (t + 1) * batch)?;
            let (h, c) = self.step_projected(tape, params, xt, state)?;
            let keep: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let next = if reverse && keep.contains(&0.0) {
                let blend = |tape: &mut Tape, new: Var, old: Option<Var>| -> Result<Var> {
                    let new = tape.scale_rows(new, keep.clone())?;
                    match old {
                        Some(old) => {
                            let old = tape.scale_rows(old, keep.iter().map(|k| 1.0 - k).collect())?;
                            tape.add(new, old)
                        }
                        None => Ok(new),
                    }
                };
                let h = blend(tape, h, state.map(|s| s.0))?;
                let c = blend(tape, c, state.map(|s| s.1))?;
                (h, c)
            } else {
                (h, c)
            };
            state = Some(next);
            outputs[t] = Some(next.0);
        }
        Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}

/// Forward and backward LSTM whose states are concatenated per time step.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_dim, hidden_dim, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden_dim
    }

    /// `T × d` input for one sequence to `T × 2H`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let steps = tape.value(x).rows();
        self.forward_batch(tape, params, x, 1, &[steps])
    }

    /// Padded batch in time-major row order (`row = t * batch + b`).
    ///
    /// Rows of padded positions in the output are unspecified; the backward
    /// direction of each sequence starts at its own last valid position.
    pub fn forward_batch(&self, tape: &mut Tape, params: &Bound, x: Var, batch: usize, lengths: &[usize]) -> Result<Var> {
        let rows = tape.value(x).rows();
        if batch == 0 || rows == 0 {
            return Err(Error::Data("bilstm needs at least one time step".into()));
        }
        if !rows.is_multiple_of(batch) || lengths.len() != batch {
            return Err(Error::shape(
                "bilstm",
                format!("{rows} rows, batch {batch}, {} lengths", lengths.len()),
            ));
        }
        let steps = rows / batch;
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > steps) {
            return Err(Error::Data(format!("sequence length {l} outside 1..={steps}")));
        }
        let fw = self.forward.run(tape, params, x, batch, lengths, false)?;
        let bw = self.backward.run(tape, params, x, batch, lengths, true)?;
        let fw = tape.concat_rows(&fw)?;
        let bw = tape.concat_rows(&bw)?;
        tape.concat_cols(&[fw, bw])
    }
}

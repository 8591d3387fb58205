use crate::{NdiffError, Tape, Var};

/// Fused LSTM weights on a tape.
///
/// `wx` is `D x 4H`, `wh` is `H x 4H` and `b` is `1 x 4H`. The four column
/// blocks hold the input, forget, output and candidate gates in that order,
/// i.e. `[W_i | W_f | W_o | W_g]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// Gate column block offsets, in units of the hidden size.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

/// One LSTM step:
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// o = σ(W_o x + U_o h + b_o)    g = tanh(W_g x + U_g h + b_g)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmVars,
) -> Result<(Var, Var), NdiffError> {
    let [_, four_h] = tape.shape(w.wh);
    let hidden = four_h / 4;
    if four_h != hidden * 4 || tape.shape(w.wh)[0] != hidden {
        return Err(NdiffError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(w.wh),
            right: [hidden, hidden * 4],
        });
    }
    if tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(NdiffError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(h_prev),
            right: tape.shape(c_prev),
        });
    }
    let xw = tape.matmul(x, w.wx)?;
    let hw = tape.matmul(h_prev, w.wh)?;
    let pre = tape.add(xw, hw)?;
    let gates = tape.add_bias(pre, w.b)?;

    let i_pre = tape.slice_cols(gates, GATE_INPUT * hidden, hidden)?;
    let f_pre = tape.slice_cols(gates, GATE_FORGET * hidden, hidden)?;
    let o_pre = tape.slice_cols(gates, GATE_OUTPUT * hidden, hidden)?;
    let g_pre = tape.slice_cols(gates, GATE_CANDIDATE * hidden, hidden)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ParamStore, Tensor};

    fn vars(tape: &mut Tape<'_>, d: usize, h: usize, bias: Vec<f64>) -> LstmVars {
        LstmVars {
            wx: tape.zeros(d, 4 * h),
            wh: tape.zeros(h, 4 * h),
            b: tape.constant(Tensor::row(bias)),
        }
    }

    #[test]
    fn all_zero_cell_outputs_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let w = vars(&mut tape, 3, 2, vec![0.0; 8]);
        let x = tape.zeros(1, 3);
        let h0 = tape.zeros(1, 2);
        let c0 = tape.zeros(1, 2);
        let (h, c) = lstm_cell(&mut tape, x, h0, c0, &w).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let hidden = 2;
        let mut bias = vec![0.0; 4 * hidden];
        for b in &mut bias[GATE_FORGET * hidden..(GATE_FORGET + 1) * hidden] {
            *b = 50.0;
        }
        let w = vars(&mut tape, 3, hidden, bias);
        let x = tape.constant(Tensor::row(vec![0.3, -0.2, 0.9]));
        let h0 = tape.zeros(1, hidden);
        let c0 = tape.constant(Tensor::row(vec![0.7, -1.3]));
        let (_, c) = lstm_cell(&mut tape, x, h0, c0, &w).unwrap();
        for (got, want) in tape.value(c).data().iter().zip([0.7, -1.3]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_inconsistent_state() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let w = vars(&mut tape, 3, 2, vec![0.0; 8]);
        let x = tape.zeros(1, 3);
        let h0 = tape.zeros(1, 2);
        let c0 = tape.zeros(1, 3);
        assert!(lstm_cell(&mut tape, x, h0, c0, &w).is_err());
        let bad_x = tape.zeros(1, 4);
        let c0 = tape.zeros(1, 2);
        assert!(lstm_cell(&mut tape, bad_x, h0, c0, &w).is_err());
    }
}

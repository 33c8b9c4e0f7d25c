//! A single LSTM layer: gate parameters, the step recurrence, sequence
//! forward with an activation tape, and the hand-derived backward pass
//! through time. Inputs are either dense vectors or token indices; a token
//! behaves exactly like a one-hot vector but the input weight matrices are
//! only ever touched column-wise, so vocabulary-width activations are never
//! materialized.

use crate::error::{Error, Result};
use crate::tensor::{axpy, sigmoid, Matrix, Rng, Scalar, TensorSet};

/// Gate parameters for one layer. Input weights are `hidden x input_dim`,
/// recurrent weights `hidden x hidden`, biases length `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<F> {
    pub w_xi: Matrix<F>,
    pub w_xf: Matrix<F>,
    pub w_xo: Matrix<F>,
    pub w_xc: Matrix<F>,
    pub w_hi: Matrix<F>,
    pub w_hf: Matrix<F>,
    pub w_ho: Matrix<F>,
    pub w_hc: Matrix<F>,
    pub b_i: Vec<F>,
    pub b_f: Vec<F>,
    pub b_o: Vec<F>,
    pub b_c: Vec<F>,
}

pub const LSTM_TENSOR_NAMES: [&str; 12] = [
    "w_xi", "w_xf", "w_xo", "w_xc", "w_hi", "w_hf", "w_ho", "w_hc", "b_i", "b_f", "b_o", "b_c",
];

impl<F: Scalar> LstmParams<F> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_xi: Matrix::zeros(hidden, input_dim),
            w_xf: Matrix::zeros(hidden, input_dim),
            w_xo: Matrix::zeros(hidden, input_dim),
            w_xc: Matrix::zeros(hidden, input_dim),
            w_hi: Matrix::zeros(hidden, hidden),
            w_hf: Matrix::zeros(hidden, hidden),
            w_ho: Matrix::zeros(hidden, hidden),
            w_hc: Matrix::zeros(hidden, hidden),
            b_i: vec![F::zero(); hidden],
            b_f: vec![F::zero(); hidden],
            b_o: vec![F::zero(); hidden],
            b_c: vec![F::zero(); hidden],
        }
    }

    /// Uniform initialization in [-scale, scale] for all weight matrices;
    /// biases start at zero except the forget gate, which gets `forget_bias`.
    /// Weights are drawn in tensor-layout order so a seed fully determines
    /// the parameters.
    pub fn init(rng: &mut Rng, input_dim: usize, hidden: usize, scale: f64, forget_bias: f64) -> Self {
        let lo = F::from_f64(-scale);
        let hi = F::from_f64(scale);
        let mut p = LstmParams::zeros(input_dim, hidden);
        for idx in 0..8 {
            let m = p.tensor_matrix_mut(idx);
            for v in m.data_mut().iter_mut() {
                *v = rng.uniform(lo, hi);
            }
        }
        for v in p.b_f.iter_mut() {
            *v = F::from_f64(forget_bias);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w_xi.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_xi.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let d = self.input_dim();
        let ok = [&self.w_xf, &self.w_xo, &self.w_xc]
            .iter()
            .all(|m| m.rows() == h && m.cols() == d)
            && [&self.w_hi, &self.w_hf, &self.w_ho, &self.w_hc]
                .iter()
                .all(|m| m.rows() == h && m.cols() == h)
            && [&self.b_i, &self.b_f, &self.b_o, &self.b_c]
                .iter()
                .all(|b| b.len() == h);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent LSTM parameter shapes for hidden {h}, input {d}"
            )))
        }
    }

    /// Flat tensor view by index, in `LSTM_TENSOR_NAMES` order.
    pub fn tensor(&self, idx: usize) -> &[F] {
        match idx {
            0 => self.w_xi.data(),
            1 => self.w_xf.data(),
            2 => self.w_xo.data(),
            3 => self.w_xc.data(),
            4 => self.w_hi.data(),
            5 => self.w_hf.data(),
            6 => self.w_ho.data(),
            7 => self.w_hc.data(),
            8 => &self.b_i,
            9 => &self.b_f,
            10 => &self.b_o,
            11 => &self.b_c,
            _ => panic!("LSTM tensor index out of range"),
        }
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [F] {
        match idx {
            0 => self.w_xi.data_mut(),
            1 => self.w_xf.data_mut(),
            2 => self.w_xo.data_mut(),
            3 => self.w_xc.data_mut(),
            4 => self.w_hi.data_mut(),
            5 => self.w_hf.data_mut(),
            6 => self.w_ho.data_mut(),
            7 => self.w_hc.data_mut(),
            8 => &mut self.b_i,
            9 => &mut self.b_f,
            10 => &mut self.b_o,
            11 => &mut self.b_c,
            _ => panic!("LSTM tensor index out of range"),
        }
    }

    pub fn axpy_params(&mut self, a: F, rhs: &Self) {
        for idx in 0..12 {
            axpy(self.tensor_mut(idx), a, rhs.tensor(idx));
        }
    }

    fn tensor_matrix_mut(&mut self, idx: usize) -> &mut Matrix<F> {
        match idx {
            0 => &mut self.w_xi,
            1 => &mut self.w_xf,
            2 => &mut self.w_xo,
            3 => &mut self.w_xc,
            4 => &mut self.w_hi,
            5 => &mut self.w_hf,
            6 => &mut self.w_ho,
            7 => &mut self.w_hc,
            _ => panic!("not a matrix tensor"),
        }
    }
}

impl<F: Scalar> TensorSet<F> for LstmParams<F> {
    fn tensor_count(&self) -> usize {
        12
    }

    fn tensor_at(&self, idx: usize) -> &[F] {
        self.tensor(idx)
    }

    fn tensor_at_mut(&mut self, idx: usize) -> &mut [F] {
        self.tensor_mut(idx)
    }
}

/// Recurrent state carried between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![F::zero(); hidden],
            c: vec![F::zero(); hidden],
        }
    }
}

/// One timestep of input: a dense vector or a token index standing for the
/// one-hot vector of the layer's input width.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a, F> {
    Dense(&'a [F]),
    Token(usize),
}

/// A whole input sequence in either representation.
#[derive(Debug, Clone, Copy)]
pub enum SeqInput<'a, F> {
    Dense(&'a [Vec<F>]),
    Tokens(&'a [usize]),
}

impl<'a, F> SeqInput<'a, F> {
    pub fn len(&self) -> usize {
        match self {
            SeqInput::Dense(xs) => xs.len(),
            SeqInput::Tokens(ts) => ts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, t: usize) -> StepInput<'a, F> {
        match self {
            SeqInput::Dense(xs) => StepInput::Dense(&xs[t]),
            SeqInput::Tokens(ts) => StepInput::Token(ts[t]),
        }
    }
}

/// Owned copy of a layer's input sequence, kept on the tape.
#[derive(Debug, Clone)]
pub enum TapeInput<F> {
    Dense(Vec<Vec<F>>),
    Tokens(Vec<usize>),
}

impl<F: Scalar> TapeInput<F> {
    pub fn from_seq(input: &SeqInput<'_, F>) -> Self {
        match input {
            SeqInput::Dense(xs) => TapeInput::Dense(xs.to_vec()),
            SeqInput::Tokens(ts) => TapeInput::Tokens(ts.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TapeInput::Dense(xs) => xs.len(),
            TapeInput::Tokens(ts) => ts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_seq(&self) -> SeqInput<'_, F> {
        match self {
            TapeInput::Dense(xs) => SeqInput::Dense(xs),
            TapeInput::Tokens(ts) => SeqInput::Tokens(ts),
        }
    }
}

/// Cached activations for one timestep: gate outputs, the candidate cell
/// value, and the resulting cell/hidden state.
#[derive(Debug, Clone)]
pub struct LstmStep<F> {
    pub i: Vec<F>,
    pub f: Vec<F>,
    pub o: Vec<F>,
    pub c_in: Vec<F>,
    pub c: Vec<F>,
    pub h: Vec<F>,
}

/// Everything the backward pass needs: the input sequence, the initial
/// state, and the per-timestep activations.
#[derive(Debug, Clone)]
pub struct LstmTape<F> {
    pub input: TapeInput<F>,
    pub init: LstmState<F>,
    pub steps: Vec<LstmStep<F>>,
}

impl<F: Scalar> LstmTape<F> {
    pub fn final_state(&self) -> LstmState<F> {
        match self.steps.last() {
            Some(s) => LstmState {
                h: s.h.clone(),
                c: s.c.clone(),
            },
            None => self.init.clone(),
        }
    }
}

fn check_step_input<F: Scalar>(params: &LstmParams<F>, x: &StepInput<'_, F>) -> Result<()> {
    match x {
        StepInput::Dense(v) => {
            if v.len() != params.input_dim() {
                return Err(Error::Shape {
                    op: "lstm input",
                    lhs: params.w_xi.shape_str(),
                    rhs: format!("{}", v.len()),
                });
            }
        }
        StepInput::Token(t) => {
            if *t >= params.input_dim() {
                return Err(Error::Data(format!(
                    "token index {t} out of range for input width {}",
                    params.input_dim()
                )));
            }
        }
    }
    Ok(())
}

/// b + W_x x + W_h h, with the token case reading a single column of W_x.
fn gate_preact<F: Scalar>(
    w_x: &Matrix<F>,
    w_h: &Matrix<F>,
    b: &[F],
    x: &StepInput<'_, F>,
    h_prev: &[F],
) -> Vec<F> {
    let mut a = b.to_vec();
    match x {
        StepInput::Dense(v) => w_x.matvec_acc(v, &mut a),
        StepInput::Token(t) => {
            for (r, av) in a.iter_mut().enumerate() {
                *av += w_x.at(r, *t);
            }
        }
    }
    w_h.matvec_acc(h_prev, &mut a);
    a
}

fn step_full<F: Scalar>(
    params: &LstmParams<F>,
    x: &StepInput<'_, F>,
    prev: &LstmState<F>,
) -> LstmStep<F> {
    let h = params.hidden_dim();
    let i = vec_map(gate_preact(&params.w_xi, &params.w_hi, &params.b_i, x, &prev.h), sigmoid);
    let f = vec_map(gate_preact(&params.w_xf, &params.w_hf, &params.b_f, x, &prev.h), sigmoid);
    let o = vec_map(gate_preact(&params.w_xo, &params.w_ho, &params.b_o, x, &prev.h), sigmoid);
    let c_in = vec_map(gate_preact(&params.w_xc, &params.w_hc, &params.b_c, x, &prev.h), |v| v.tanh());
    let mut c = vec![F::zero(); h];
    let mut hh = vec![F::zero(); h];
    for k in 0..h {
        c[k] = f[k] * prev.c[k] + i[k] * c_in[k];
        hh[k] = o[k] * c[k].tanh();
    }
    LstmStep { i, f, o, c_in, c, h: hh }
}

fn vec_map<F: Scalar>(mut v: Vec<F>, f: impl Fn(F) -> F) -> Vec<F> {
    for x in v.iter_mut() {
        *x = f(*x);
    }
    v
}

/// One step of the recurrence. Gate order: input, forget, output, candidate;
/// the new cell is `f*c + i*c_in` and the hidden output `o * tanh(c)`.
pub fn lstm_step<F: Scalar>(
    params: &LstmParams<F>,
    x: StepInput<'_, F>,
    prev: &LstmState<F>,
) -> Result<LstmState<F>> {
    params.validate()?;
    check_step_input(params, &x)?;
    if prev.h.len() != params.hidden_dim() || prev.c.len() != params.hidden_dim() {
        return Err(Error::Shape {
            op: "lstm state",
            lhs: format!("{}", params.hidden_dim()),
            rhs: format!("{}/{}", prev.h.len(), prev.c.len()),
        });
    }
    let s = step_full(params, &x, prev);
    debug_assert!(s.h.iter().all(|v| v.is_finite()));
    Ok(LstmState { h: s.h, c: s.c })
}

/// Run the layer over a sequence, returning the state at every timestep and
/// the tape for the backward pass. An empty sequence is valid and returns
/// empty outputs.
pub fn lstm_forward<F: Scalar>(
    params: &LstmParams<F>,
    input: SeqInput<'_, F>,
    init: &LstmState<F>,
) -> Result<(Vec<LstmState<F>>, LstmTape<F>)> {
    params.validate()?;
    if init.h.len() != params.hidden_dim() || init.c.len() != params.hidden_dim() {
        return Err(Error::Shape {
            op: "lstm init state",
            lhs: format!("{}", params.hidden_dim()),
            rhs: format!("{}/{}", init.h.len(), init.c.len()),
        });
    }
    let mut steps = Vec::with_capacity(input.len());
    let mut states = Vec::with_capacity(input.len());
    let mut prev = init.clone();
    for t in 0..input.len() {
        let x = input.step(t);
        check_step_input(params, &x)?;
        let s = step_full(params, &x, &prev);
        prev = LstmState {
            h: s.h.clone(),
            c: s.c.clone(),
        };
        states.push(prev.clone());
        steps.push(s);
    }
    let tape = LstmTape {
        input: TapeInput::from_seq(&input),
        init: init.clone(),
        steps,
    };
    Ok((states, tape))
}

/// Gradient of a layer's inputs; `None` when the layer consumed token
/// indices (the one-hot input is data, not something upstream can adjust).
pub type InputGrad<F> = Option<Vec<Vec<F>>>;

/// Backward pass through time. `grad_h_seq` is the loss gradient on each
/// timestep's hidden output, `grad_final` an extra gradient on the final
/// (h, c) pair (used when the final state seeds another network). Returns
/// parameter gradients, input-sequence gradients, and the gradient on the
/// initial state.
///
/// Derivation sketch for one step, all products elementwise:
///   dh = grad_h_seq[t] + dh_rec
///   do = dh * tanh(c);        da_o = do * o * (1 - o)
///   dc = dc_rec + dh * o * (1 - tanh(c)^2)
///   df = dc * c_prev;         da_f = df * f * (1 - f)
///   di = dc * c_in;           da_i = di * i * (1 - i)
///   dcin = dc * i;            da_c = dcin * (1 - c_in^2)
///   dc_rec' = dc * f;         dh_rec' = sum_g W_hg^T da_g
/// and each `da_g` feeds the usual outer-product weight updates.
pub fn lstm_backward<F: Scalar>(
    params: &LstmParams<F>,
    tape: &LstmTape<F>,
    grad_h_seq: &[Vec<F>],
    grad_final: &LstmState<F>,
) -> Result<(LstmParams<F>, InputGrad<F>, LstmState<F>)> {
    let hid = params.hidden_dim();
    let t_len = tape.steps.len();
    if grad_h_seq.len() != t_len {
        return Err(Error::Argument(format!(
            "backward needs one upstream gradient per step: tape has {t_len}, got {}",
            grad_h_seq.len()
        )));
    }
    if grad_final.h.len() != hid || grad_final.c.len() != hid {
        return Err(Error::Shape {
            op: "lstm backward final-state gradient",
            lhs: format!("{hid}"),
            rhs: format!("{}/{}", grad_final.h.len(), grad_final.c.len()),
        });
    }
    for (t, g) in grad_h_seq.iter().enumerate() {
        if g.len() != hid {
            return Err(Error::Shape {
                op: "lstm backward upstream",
                lhs: format!("{hid}"),
                rhs: format!("{} at step {t}", g.len()),
            });
        }
    }

    let mut grads = params.zeros_like();
    let dense_input = matches!(tape.input, TapeInput::Dense(_));
    let mut grad_x: Vec<Vec<F>> = if dense_input {
        vec![vec![F::zero(); params.input_dim()]; t_len]
    } else {
        Vec::new()
    };

    let mut dh_rec = grad_final.h.clone();
    let mut dc_rec = grad_final.c.clone();
    let one = F::one();

    for t in (0..t_len).rev() {
        let st = &tape.steps[t];
        let (h_prev, c_prev): (&[F], &[F]) = if t == 0 {
            (&tape.init.h, &tape.init.c)
        } else {
            (&tape.steps[t - 1].h, &tape.steps[t - 1].c)
        };

        let mut da_i = vec![F::zero(); hid];
        let mut da_f = vec![F::zero(); hid];
        let mut da_o = vec![F::zero(); hid];
        let mut da_c = vec![F::zero(); hid];
        for k in 0..hid {
            let dh = grad_h_seq[t][k] + dh_rec[k];
            let tc = st.c[k].tanh();
            da_o[k] = dh * tc * st.o[k] * (one - st.o[k]);
            let dc = dc_rec[k] + dh * st.o[k] * (one - tc * tc);
            da_f[k] = dc * c_prev[k] * st.f[k] * (one - st.f[k]);
            da_i[k] = dc * st.c_in[k] * st.i[k] * (one - st.i[k]);
            da_c[k] = dc * st.i[k] * (one - st.c_in[k] * st.c_in[k]);
            dc_rec[k] = dc * st.f[k];
        }

        // Recurrent gradient for step t-1.
        let mut dh_prev = vec![F::zero(); hid];
        params.w_hi.tr_matvec_acc(&da_i, &mut dh_prev);
        params.w_hf.tr_matvec_acc(&da_f, &mut dh_prev);
        params.w_ho.tr_matvec_acc(&da_o, &mut dh_prev);
        params.w_hc.tr_matvec_acc(&da_c, &mut dh_prev);

        grads.w_hi.outer_acc(&da_i, h_prev);
        grads.w_hf.outer_acc(&da_f, h_prev);
        grads.w_ho.outer_acc(&da_o, h_prev);
        grads.w_hc.outer_acc(&da_c, h_prev);
        axpy(&mut grads.b_i, one, &da_i);
        axpy(&mut grads.b_f, one, &da_f);
        axpy(&mut grads.b_o, one, &da_o);
        axpy(&mut grads.b_c, one, &da_c);

        match &tape.input {
            TapeInput::Dense(xs) => {
                let x = &xs[t];
                grads.w_xi.outer_acc(&da_i, x);
                grads.w_xf.outer_acc(&da_f, x);
                grads.w_xo.outer_acc(&da_o, x);
                grads.w_xc.outer_acc(&da_c, x);
                let gx = &mut grad_x[t];
                params.w_xi.tr_matvec_acc(&da_i, gx);
                params.w_xf.tr_matvec_acc(&da_f, gx);
                params.w_xo.tr_matvec_acc(&da_o, gx);
                params.w_xc.tr_matvec_acc(&da_c, gx);
            }
            TapeInput::Tokens(ts) => {
                // One-hot input: only the token's column receives gradient.
                let col = ts[t];
                for k in 0..hid {
                    *grads.w_xi.at_mut(k, col) += da_i[k];
                    *grads.w_xf.at_mut(k, col) += da_f[k];
                    *grads.w_xo.at_mut(k, col) += da_o[k];
                    *grads.w_xc.at_mut(k, col) += da_c[k];
                }
            }
        }

        dh_rec = dh_prev;
    }

    let grad_init = LstmState { h: dh_rec, c: dc_rec };
    let input_grad = if dense_input { Some(grad_x) } else { None };
    Ok((grads, input_grad, grad_init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn random_params(seed: u64, input: usize, hidden: usize, scale: f64) -> LstmParams<f64> {
        let mut rng = Rng::new(seed);
        LstmParams::init(&mut rng, input, hidden, scale, 0.0)
    }

    #[test]
    fn zero_params_zero_input_give_zero_state() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let s = lstm_step(&p, StepInput::Dense(&[0.0, 0.0]), &LstmState::zeros(3)).unwrap();
        assert!(s.h.iter().all(|&v| v == 0.0));
        assert!(s.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let p = random_params(11, 2, 3, 0.5);
        let mut rng = Rng::new(99);
        let x: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let prev = LstmState {
            h: (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            c: (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        };
        let got = lstm_step(&p, StepInput::Dense(&x), &prev).unwrap();
        let (oh, oc) = oracle::scalar_lstm_step(&p, &x, &prev.h, &prev.c);
        for k in 0..3 {
            assert!((got.h[k] - oh[k]).abs() < 1e-12, "h[{k}]");
            assert!((got.c[k] - oc[k]).abs() < 1e-12, "c[{k}]");
        }
    }

    #[test]
    fn token_step_equals_one_hot_dense_step() {
        let p = random_params(21, 5, 4, 0.4);
        let prev = LstmState::zeros(4);
        let tok = lstm_step(&p, StepInput::Token(3), &prev).unwrap();
        let mut onehot = vec![0.0f64; 5];
        onehot[3] = 1.0;
        let dense = lstm_step(&p, StepInput::Dense(&onehot), &prev).unwrap();
        assert_eq!(tok, dense);
    }

    #[test]
    fn saturated_gates_carry_the_cell_through() {
        // Large forget/output biases and a blocked input gate: the cell value
        // survives the step and h approaches tanh(c).
        let mut p = LstmParams::<f64>::zeros(1, 2);
        for v in p.b_f.iter_mut() {
            *v = 20.0;
        }
        for v in p.b_o.iter_mut() {
            *v = 20.0;
        }
        for v in p.b_i.iter_mut() {
            *v = -20.0;
        }
        let prev = LstmState {
            h: vec![0.0, 0.0],
            c: vec![0.5, -0.25],
        };
        let s = lstm_step(&p, StepInput::Dense(&[0.3]), &prev).unwrap();
        assert!((s.c[0] - 0.5).abs() < 1e-6);
        assert!((s.c[1] + 0.25).abs() < 1e-6);
        assert!((s.h[0] - 0.5f64.tanh()).abs() < 1e-6);
        assert!((s.h[1] - (-0.25f64).tanh()).abs() < 1e-6);
    }

    #[test]
    fn forward_composes_step_by_step() {
        let p = random_params(31, 3, 4, 0.5);
        let mut rng = Rng::new(7);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let init = LstmState::zeros(4);
        let (states, tape) = lstm_forward(&p, SeqInput::Dense(&xs), &init).unwrap();
        assert_eq!(states.len(), 4);
        assert_eq!(tape.steps.len(), 4);

        let mut prev = init.clone();
        for (t, x) in xs.iter().enumerate() {
            prev = lstm_step(&p, StepInput::Dense(x), &prev).unwrap();
            assert_eq!(states[t], prev, "state at step {t}");
        }
    }

    #[test]
    fn forward_split_composition_is_exact() {
        let p = random_params(41, 2, 3, 0.5);
        let mut rng = Rng::new(8);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let init = LstmState::zeros(3);
        let (full, _) = lstm_forward(&p, SeqInput::Dense(&xs), &init).unwrap();

        let (first, _) = lstm_forward(&p, SeqInput::Dense(&xs[..2]), &init).unwrap();
        let (second, _) = lstm_forward(&p, SeqInput::Dense(&xs[2..]), &first[1]).unwrap();
        let stitched: Vec<_> = first.into_iter().chain(second).collect();
        assert_eq!(full, stitched);
    }

    #[test]
    fn empty_sequence_is_valid() {
        let p = random_params(51, 2, 3, 0.5);
        let init = LstmState::zeros(3);
        let (states, tape) = lstm_forward(&p, SeqInput::Dense(&[]), &init).unwrap();
        assert!(states.is_empty());
        assert!(tape.steps.is_empty());
        assert_eq!(tape.final_state(), init);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let p = random_params(61, 2, 3, 0.5);
        let xs = vec![vec![0.4, -0.2], vec![0.1, 0.9]];
        let (_, tape) = lstm_forward(&p, SeqInput::Dense(&xs), &LstmState::zeros(3)).unwrap();
        let gh = vec![vec![0.0; 3]; 2];
        let (grads, gx, ginit) =
            lstm_backward(&p, &tape, &gh, &LstmState::zeros(3)).unwrap();
        for idx in 0..12 {
            assert!(grads.tensor(idx).iter().all(|&v| v == 0.0));
        }
        assert!(gx.unwrap().iter().flatten().all(|&v| v == 0.0));
        assert!(ginit.h.iter().chain(&ginit.c).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let p = random_params(71, 2, 3, 0.5);
        let xs = vec![vec![0.4, -0.2], vec![0.1, 0.9], vec![-0.6, 0.3]];
        let (_, tape) = lstm_forward(&p, SeqInput::Dense(&xs), &LstmState::zeros(3)).unwrap();
        let mut rng = Rng::new(5);
        let gh: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let gh2: Vec<Vec<f64>> = gh.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let zero = LstmState::zeros(3);
        let (g1, _, _) = lstm_backward(&p, &tape, &gh, &zero).unwrap();
        let (g2, _, _) = lstm_backward(&p, &tape, &gh2, &zero).unwrap();
        for idx in 0..12 {
            for (a, b) in g1.tensor(idx).iter().zip(g2.tensor(idx)) {
                assert_eq!(2.0 * a, *b, "doubling upstream must double tensor {idx}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Random weighted sum of every timestep's hidden output, five seeds.
        for seed in 0..5u64 {
            let hidden = 3 + (seed as usize % 3);
            let input = 2 + (seed as usize % 2);
            let t_len = 4;
            let mut p = random_params(100 + seed, input, hidden, 0.4);
            let mut rng = Rng::new(900 + seed);
            let xs: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..input).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let w: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..hidden).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();

            let loss = |p: &LstmParams<f64>| -> f64 {
                let (states, _) =
                    lstm_forward(p, SeqInput::Dense(&xs), &LstmState::zeros(hidden)).unwrap();
                states
                    .iter()
                    .zip(&w)
                    .map(|(s, wt)| s.h.iter().zip(wt).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };

            let (_, tape) =
                lstm_forward(&p, SeqInput::Dense(&xs), &LstmState::zeros(hidden)).unwrap();
            let (grads, _, _) = lstm_backward(&p, &tape, &w, &LstmState::zeros(hidden)).unwrap();

            let fd = oracle::fd_gradient(&mut p, |q| loss(q), 1e-5, &oracle::OracleBudget::default())
                .unwrap();
            let analytic = oracle::flatten(&grads);
            let ratio = oracle::grad_check_ratio(&analytic, &fd);
            assert!(ratio < 1e-4, "seed {seed}: gradient check ratio {ratio}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn hidden_and_gate_values_stay_bounded(
            seed in 0u64..500, hidden in 1usize..6, input in 1usize..5, t_len in 1usize..8
        ) {
            let p = random_params(seed, input, hidden, 0.5);
            let mut rng = Rng::new(seed ^ 0xABCD);
            let xs: Vec<Vec<f64>> = (0..t_len)
                .map(|_| (0..input).map(|_| rng.uniform(-2.0, 2.0)).collect())
                .collect();
            let (states, tape) =
                lstm_forward(&p, SeqInput::Dense(&xs), &LstmState::zeros(hidden)).unwrap();
            for s in &states {
                prop_assert!(s.h.iter().all(|v| v.abs() < 1.0));
            }
            for st in &tape.steps {
                for g in [&st.i, &st.f, &st.o] {
                    prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }
}

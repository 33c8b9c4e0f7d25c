//! The sequence-to-sequence model: encoder and decoder stacks of LSTM layers
//! with skip connections every n layers, a dimension fix where skip widths
//! disagree, inverted dropout after every layer during training, and a
//! linear projection from the decoder top to vocabulary logits.
//!
//! The forward pass exists in two shapes, whole-sequence with a tape (for
//! training) and single-step (for decoding), built on the same layer
//! arithmetic so forced scoring and stepwise decoding agree bit for bit.

use crate::data::EOS_ID;
use crate::error::{Error, Result};
use crate::lstm::{
    lstm_backward, lstm_forward, lstm_step, InputGrad, LstmParams, LstmState, SeqInput, StepInput,
    TapeInput, LSTM_TENSOR_NAMES,
};
use crate::tensor::{axpy, log_softmax, Matrix, Rng, Scalar, TensorSet};

/// What to do when a skip connection's source is not as wide as the layer
/// output it is added to. `Pad` keeps the layer output width and aligns the
/// source into it (zero-extending a narrow source, ignoring the overhang of
/// a wide one); `Clip` narrows the layer output to the source width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimFix {
    Pad,
    Clip,
}

impl DimFix {
    pub fn parse(s: &str) -> Result<DimFix> {
        match s {
            "pad" => Ok(DimFix::Pad),
            "clip" => Ok(DimFix::Clip),
            other => Err(Error::Usage(format!(
                "unknown dimension fix '{other}', expected pad or clip"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DimFix::Pad => 0,
            DimFix::Clip => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<DimFix> {
        match code {
            0 => Ok(DimFix::Pad),
            1 => Ok(DimFix::Clip),
            other => Err(Error::Checkpoint(format!("unknown dimension-fix code {other}"))),
        }
    }
}

impl std::fmt::Display for DimFix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DimFix::Pad => write!(f, "pad"),
            DimFix::Clip => write!(f, "clip"),
        }
    }
}

/// Stack shape shared by forward, backward, and validation: skip interval
/// (0 disables skips entirely) and the dimension fix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackSpec {
    pub residual_every: usize,
    pub dim_fix: DimFix,
}

impl StackSpec {
    /// Skip connections attach to 1-based layers n, 2n, 3n, ...
    fn is_skip_layer(&self, layer0: usize) -> bool {
        self.residual_every > 0 && (layer0 + 1) % self.residual_every == 0
    }

    /// 0-based index of the layer whose input feeds this skip connection.
    fn skip_source(&self, layer0: usize) -> usize {
        layer0 + 1 - self.residual_every
    }
}

/// Width of the sequence flowing between layers, input of layer 0 first.
/// Errors cover empty stacks, per-layer input mismatches, skip intervals
/// longer than the stack, and clip connections with a too-wide source.
pub fn stack_widths<F: Scalar>(
    layers: &[LstmParams<F>],
    spec: StackSpec,
    input_width: usize,
) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(Error::Config("a stack needs at least one layer".into()));
    }
    if spec.residual_every > layers.len() {
        return Err(Error::Config(format!(
            "skip interval {} exceeds the stack depth {}",
            spec.residual_every,
            layers.len()
        )));
    }
    let mut widths = Vec::with_capacity(layers.len() + 1);
    widths.push(input_width);
    for (k, layer) in layers.iter().enumerate() {
        layer.validate()?;
        if layer.input_dim() != widths[k] {
            return Err(Error::Config(format!(
                "layer {k} expects input width {}, the stack provides {}",
                layer.input_dim(),
                widths[k]
            )));
        }
        let mut out = layer.hidden_dim();
        if spec.is_skip_layer(k) {
            let src = widths[spec.skip_source(k)];
            if spec.dim_fix == DimFix::Clip {
                if src > out {
                    return Err(Error::Config(format!(
                        "skip source width {src} exceeds layer output width {out}; clipping narrows, it cannot widen"
                    )));
                }
                out = src;
            }
        }
        widths.push(out);
    }
    Ok(widths)
}

/// Inverted-dropout source: mask values are a pure function of
/// (seed, salt, layer, timestep), so the same positions drop regardless of
/// how many timesteps any other layer ran.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub seed: u64,
    pub salt: u64,
    pub keep: f64,
}

fn dropout_row<F: Scalar>(spec: &DropoutSpec, layer: usize, t: usize, width: usize) -> Vec<F> {
    let s = spec
        .seed
        .wrapping_add(spec.salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((layer as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add((t as u64).wrapping_mul(0x1656_67B1_9E37_79F9));
    let mut rng = Rng::new(s);
    let inv = F::from_f64(1.0 / spec.keep);
    (0..width)
        .map(|_| if rng.bernoulli(spec.keep) { inv } else { F::zero() })
        .collect()
}

/// Add the skip source into a layer output. In clip mode the output has
/// already been narrowed to the source width; in pad mode a narrow source
/// zero-extends and a wide one is taken up to the output width, so both
/// cases reduce to adding over the overlapping prefix.
fn add_skip<F: Scalar>(out: &mut [F], src: StepInput<'_, F>) {
    match src {
        StepInput::Dense(x) => {
            let m = out.len().min(x.len());
            for j in 0..m {
                out[j] += x[j];
            }
        }
        StepInput::Token(tok) => {
            if tok < out.len() {
                out[tok] += F::one();
            }
        }
    }
}

/// Everything the stack backward pass needs, plus the top output sequence.
#[derive(Debug, Clone)]
pub struct StackTape<F> {
    pub layer_tapes: Vec<crate::lstm::LstmTape<F>>,
    pub masks: Option<Vec<Vec<Vec<F>>>>,
    pub top: Vec<Vec<F>>,
    pub spec: StackSpec,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StackRun<F> {
    pub finals: Vec<LstmState<F>>,
    pub tape: StackTape<F>,
}

/// Run a whole input sequence through the stack. Layer k consumes layer
/// k-1's (skip-adjusted, dropped) output sequence; recurrent state inside
/// each layer stays the plain LSTM state, untouched by skips or dropout.
pub fn stack_forward<F: Scalar>(
    layers: &[LstmParams<F>],
    spec: StackSpec,
    input: SeqInput<'_, F>,
    init: &[LstmState<F>],
    dropout: Option<&DropoutSpec>,
) -> Result<StackRun<F>> {
    let input_width = match input {
        SeqInput::Dense(xs) => xs.first().map(|v| v.len()).unwrap_or_else(|| {
            layers.first().map(|l| l.input_dim()).unwrap_or(0)
        }),
        SeqInput::Tokens(_) => layers.first().map(|l| l.input_dim()).unwrap_or(0),
    };
    let widths = stack_widths(layers, spec, input_width)?;
    if init.len() != layers.len() {
        return Err(Error::Argument(format!(
            "stack of {} layers got {} initial states",
            layers.len(),
            init.len()
        )));
    }
    let t_len = input.len();
    let mut layer_tapes: Vec<crate::lstm::LstmTape<F>> = Vec::with_capacity(layers.len());
    let mut finals = Vec::with_capacity(layers.len());
    let mut masks_store = dropout.map(|_| Vec::with_capacity(layers.len()));
    let mut cur: Option<Vec<Vec<F>>> = None;

    for (k, layer) in layers.iter().enumerate() {
        let seq = match &cur {
            None => input,
            Some(xs) => SeqInput::Dense(xs),
        };
        let (states, tape) = lstm_forward(layer, seq, &init[k])?;
        finals.push(tape.final_state());
        let mut outs: Vec<Vec<F>> = states.into_iter().map(|s| s.h).collect();

        if spec.is_skip_layer(k) {
            let src_idx = spec.skip_source(k);
            let src_input = if src_idx == k {
                &tape.input
            } else {
                &layer_tapes[src_idx].input
            };
            let src_seq = src_input.as_seq();
            let out_w = widths[k + 1];
            for (t, out) in outs.iter_mut().enumerate() {
                if spec.dim_fix == DimFix::Clip {
                    out.truncate(out_w);
                }
                add_skip(out, src_seq.step(t));
            }
        }

        if let (Some(d), Some(store)) = (dropout, masks_store.as_mut()) {
            let mut layer_masks = Vec::with_capacity(t_len);
            for (t, out) in outs.iter_mut().enumerate() {
                let row: Vec<F> = dropout_row(d, k, t, out.len());
                for (o, m) in out.iter_mut().zip(&row) {
                    *o *= *m;
                }
                layer_masks.push(row);
            }
            store.push(layer_masks);
        }

        layer_tapes.push(tape);
        cur = Some(outs);
    }

    let top = cur.unwrap_or_default();
    Ok(StackRun {
        finals,
        tape: StackTape {
            layer_tapes,
            masks: masks_store,
            top,
            spec,
            widths,
        },
    })
}

/// Backward through the whole stack. `grad_top` is the loss gradient on the
/// top output sequence, `grad_finals` an extra per-layer gradient on each
/// final (h, c) pair (how the decoder's initial-state gradient reaches the
/// encoder). Returns per-layer parameter gradients, the gradient on the
/// stack's input sequence (None when the input was token indices), and the
/// gradient on each layer's initial state.
pub fn stack_backward<F: Scalar>(
    layers: &[LstmParams<F>],
    tape: &StackTape<F>,
    grad_top: &[Vec<F>],
    grad_finals: &[LstmState<F>],
) -> Result<(Vec<LstmParams<F>>, InputGrad<F>, Vec<LstmState<F>>)> {
    let l_count = layers.len();
    let t_len = tape.top.len();
    if grad_top.len() != t_len {
        return Err(Error::Argument(format!(
            "stack backward needs one top gradient per step: tape has {t_len}, got {}",
            grad_top.len()
        )));
    }
    if grad_finals.len() != l_count {
        return Err(Error::Argument(format!(
            "stack backward needs one final-state gradient per layer: {l_count} layers, got {}",
            grad_finals.len()
        )));
    }
    let widths = &tape.widths;
    for (t, g) in grad_top.iter().enumerate() {
        if g.len() != widths[l_count] {
            return Err(Error::Shape {
                op: "stack backward top gradient",
                lhs: format!("{}", widths[l_count]),
                rhs: format!("{} at step {t}", g.len()),
            });
        }
    }

    // g_u[k] accumulates the gradient on the input sequence of layer k;
    // index 0 stays None for token inputs (one-hot data takes no gradient).
    let mut g_u: Vec<Option<Vec<Vec<F>>>> = Vec::with_capacity(l_count + 1);
    let tokens_in = matches!(tape.layer_tapes[0].input, TapeInput::Tokens(_));
    g_u.push(if tokens_in {
        None
    } else {
        Some(vec![vec![F::zero(); widths[0]]; t_len])
    });
    for k in 1..l_count {
        g_u.push(Some(vec![vec![F::zero(); widths[k]]; t_len]));
    }
    g_u.push(Some(grad_top.to_vec()));

    let mut grads: Vec<LstmParams<F>> = layers.iter().map(|l| l.zeros_like()).collect();
    let mut grad_inits: Vec<LstmState<F>> = Vec::with_capacity(l_count);
    grad_inits.resize(l_count, LstmState::zeros(0));

    for k in (0..l_count).rev() {
        let mut g_v = g_u[k + 1].take().expect("inter-layer gradients are always tracked");
        if let Some(masks) = &tape.masks {
            for (gv, mask) in g_v.iter_mut().zip(&masks[k]) {
                for (g, m) in gv.iter_mut().zip(mask) {
                    *g *= *m;
                }
            }
        }

        if tape.spec.is_skip_layer(k) {
            let src_idx = tape.spec.skip_source(k);
            if let Some(gs) = g_u[src_idx].as_mut() {
                for (t, gv) in g_v.iter().enumerate() {
                    let m = gv.len().min(widths[src_idx]);
                    for j in 0..m {
                        gs[t][j] += gv[j];
                    }
                }
            }
        }

        let hidden = layers[k].hidden_dim();
        let grad_h: Vec<Vec<F>> = if widths[k + 1] == hidden {
            g_v
        } else {
            // Clip narrowed this layer's output; the truncated coordinates
            // of h received no gradient.
            g_v.into_iter()
                .map(|mut v| {
                    v.resize(hidden, F::zero());
                    v
                })
                .collect()
        };

        let (pg, gx, ginit) = lstm_backward(&layers[k], &tape.layer_tapes[k], &grad_h, &grad_finals[k])?;
        grads[k] = pg;
        grad_inits[k] = ginit;
        if let Some(gx) = gx {
            let gu = g_u[k].as_mut().expect("dense layer input implies a tracked gradient");
            for (dst, src) in gu.iter_mut().zip(&gx) {
                axpy(dst, F::one(), src);
            }
        }
    }

    let input_grad = g_u[0].take();
    Ok((grads, input_grad, grad_inits))
}

/// One layer input held during a stepwise stack pass.
enum StepVal<F> {
    Token(usize),
    Dense(Vec<F>),
}

impl<F> StepVal<F> {
    fn as_input(&self) -> StepInput<'_, F> {
        match self {
            StepVal::Token(t) => StepInput::Token(*t),
            StepVal::Dense(v) => StepInput::Dense(v),
        }
    }
}

/// One timestep through the stack (decoding path, no dropout). Returns the
/// top output and the new per-layer states.
pub fn stack_step<F: Scalar>(
    layers: &[LstmParams<F>],
    spec: StackSpec,
    x: StepInput<'_, F>,
    states: &[LstmState<F>],
) -> Result<(Vec<F>, Vec<LstmState<F>>)> {
    let input_width = match x {
        StepInput::Dense(v) => v.len(),
        StepInput::Token(_) => layers.first().map(|l| l.input_dim()).unwrap_or(0),
    };
    let widths = stack_widths(layers, spec, input_width)?;
    if states.len() != layers.len() {
        return Err(Error::Argument(format!(
            "stack of {} layers got {} states",
            layers.len(),
            states.len()
        )));
    }

    let mut held: Vec<StepVal<F>> = Vec::with_capacity(layers.len() + 1);
    held.push(match x {
        StepInput::Token(t) => StepVal::Token(t),
        StepInput::Dense(v) => StepVal::Dense(v.to_vec()),
    });
    let mut new_states = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let s = lstm_step(layer, held[k].as_input(), &states[k])?;
        let mut out = s.h.clone();
        new_states.push(s);
        if spec.is_skip_layer(k) {
            if spec.dim_fix == DimFix::Clip {
                out.truncate(widths[k + 1]);
            }
            add_skip(&mut out, held[spec.skip_source(k)].as_input());
        }
        held.push(StepVal::Dense(out));
    }
    let top = match held.pop() {
        Some(StepVal::Dense(v)) => v,
        _ => unreachable!("the stack has at least one layer"),
    };
    Ok((top, new_states))
}

/// Model shape. `residual_every = 0` disables skip connections entirely,
/// giving the plain stacked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub residual_every: usize,
    pub dim_fix: DimFix,
    pub reverse_source: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocabulary of {} is too small: need the end marker plus at least one token",
                self.vocab_size
            )));
        }
        if self.hidden == 0 || self.num_layers == 0 {
            return Err(Error::Config("hidden size and layer count must be at least 1".into()));
        }
        if self.residual_every > self.num_layers {
            return Err(Error::Config(format!(
                "skip interval {} exceeds the layer count {}",
                self.residual_every, self.num_layers
            )));
        }
        if self.residual_every > 0 && self.dim_fix == DimFix::Clip && self.vocab_size != self.hidden {
            if self.vocab_size > self.hidden {
                return Err(Error::Config(format!(
                    "clip dimension fix cannot widen: the first skip source is the {}-wide one-hot input but layer outputs are {} wide; use pad",
                    self.vocab_size, self.hidden
                )));
            }
            return Err(Error::Config(format!(
                "clip dimension fix would narrow the first skip layer's output to {} but deeper layers expect width {}; use pad",
                self.vocab_size, self.hidden
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> StackSpec {
        StackSpec {
            residual_every: self.residual_every,
            dim_fix: self.dim_fix,
        }
    }
}

/// Full parameter set: encoder stack, decoder stack, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<F> {
    pub cfg: ModelConfig,
    pub encoder: Vec<LstmParams<F>>,
    pub decoder: Vec<LstmParams<F>>,
    pub w_out: Matrix<F>,
    pub b_out: Vec<F>,
}

/// Per-sequence loss summary. The sum stays in f64 so f32 training still
/// reports exact-token perplexities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub nll_sum: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn zero() -> LossStats {
        LossStats { nll_sum: 0.0, tokens: 0 }
    }

    pub fn add(&mut self, other: LossStats) {
        self.nll_sum += other.nll_sum;
        self.tokens += other.tokens;
    }

    pub fn mean_nll(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.nll_sum / self.tokens as f64
        }
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

/// Teacher-forcing dropout plan for one sequence; the same (seed, keep)
/// always drops the same positions.
#[derive(Debug, Clone, Copy)]
pub struct DropoutPlan {
    pub seed: u64,
    pub keep: f64,
}

const ENCODER_SALT: u64 = 1;
const DECODER_SALT: u64 = 2;

impl<F: Scalar> Seq2Seq<F> {
    /// Fresh model with weights uniform in [-scale, scale] and zero biases,
    /// except the forget gates which get `forget_bias`. The projection bias
    /// starts at zero.
    pub fn init(cfg: ModelConfig, rng: &mut Rng, scale: f64, forget_bias: f64) -> Result<Self> {
        cfg.validate()?;
        let stack = |rng: &mut Rng| -> Vec<LstmParams<F>> {
            (0..cfg.num_layers)
                .map(|k| {
                    let input = if k == 0 { cfg.vocab_size } else { cfg.hidden };
                    LstmParams::init(rng, input, cfg.hidden, scale, forget_bias)
                })
                .collect()
        };
        let encoder = stack(rng);
        let decoder = stack(rng);
        let lo = F::from_f64(-scale);
        let hi = F::from_f64(scale);
        let w_out = Matrix::uniform(rng, cfg.vocab_size, cfg.hidden, lo, hi);
        let b_out = vec![F::zero(); cfg.vocab_size];
        Ok(Seq2Seq { cfg, encoder, decoder, w_out, b_out })
    }

    /// Same-shape model with every parameter zero; the gradient container.
    pub fn zeros_like(&self) -> Self {
        Seq2Seq {
            cfg: self.cfg,
            encoder: self.encoder.iter().map(|l| l.zeros_like()).collect(),
            decoder: self.decoder.iter().map(|l| l.zeros_like()).collect(),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: vec![F::zero(); self.b_out.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let widths = stack_widths(&self.encoder, self.cfg.spec(), self.cfg.vocab_size)?;
        let dec_widths = stack_widths(&self.decoder, self.cfg.spec(), self.cfg.vocab_size)?;
        if widths != dec_widths {
            return Err(Error::Config("encoder and decoder stacks disagree on widths".into()));
        }
        let top = *dec_widths.last().expect("at least one layer");
        if self.w_out.rows() != self.cfg.vocab_size || self.w_out.cols() != top {
            return Err(Error::Config(format!(
                "projection is {}, expected {}x{top}",
                self.w_out.shape_str(),
                self.cfg.vocab_size
            )));
        }
        if self.b_out.len() != self.cfg.vocab_size {
            return Err(Error::Config(format!(
                "projection bias has {} entries, expected {}",
                self.b_out.len(),
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Reverse the source if configured, then append the end marker. Every
    /// encoder consumer goes through this, so training and decoding always
    /// see the same source layout.
    pub fn prepare_source(&self, src: &[usize]) -> Vec<usize> {
        let mut s: Vec<usize> = if self.cfg.reverse_source {
            src.iter().rev().copied().collect()
        } else {
            src.to_vec()
        };
        s.push(EOS_ID);
        s
    }

    fn zero_states(&self) -> Vec<LstmState<F>> {
        (0..self.cfg.num_layers)
            .map(|_| LstmState::zeros(self.cfg.hidden))
            .collect()
    }

    /// Encode a raw source (no end marker) into per-layer decoder initial
    /// states.
    pub fn encode(&self, src: &[usize]) -> Result<Vec<LstmState<F>>> {
        let prepared = self.prepare_source(src);
        let run = stack_forward(
            &self.encoder,
            self.cfg.spec(),
            SeqInput::Tokens(&prepared),
            &self.zero_states(),
            None,
        )?;
        Ok(run.finals)
    }

    fn project(&self, top: &[F]) -> Vec<F> {
        let mut logits = self.b_out.clone();
        self.w_out.matvec_acc(top, &mut logits);
        logits
    }

    /// Feed one token through the decoder stack and return log-probabilities
    /// over the vocabulary plus the advanced states.
    pub fn decode_step(
        &self,
        states: &[LstmState<F>],
        token: usize,
    ) -> Result<(Vec<F>, Vec<LstmState<F>>)> {
        let (top, next) = stack_step(&self.decoder, self.cfg.spec(), StepInput::Token(token), states)?;
        let log_probs = log_softmax(&self.project(&top))?;
        Ok((log_probs, next))
    }

    fn check_teacher_io(&self, dec_in: &[usize], targets: &[usize], mask: &[bool]) -> Result<()> {
        if dec_in.len() != targets.len() || dec_in.len() != mask.len() {
            return Err(Error::Argument(format!(
                "teacher-forcing lengths disagree: {} inputs, {} targets, {} mask entries",
                dec_in.len(),
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "target token {t} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn run_stacks(
        &self,
        src: &[usize],
        dec_in: &[usize],
        dropout: Option<DropoutPlan>,
    ) -> Result<(StackRun<F>, StackRun<F>)> {
        let prepared = self.prepare_source(src);
        let enc_drop = dropout.map(|d| DropoutSpec { seed: d.seed, salt: ENCODER_SALT, keep: d.keep });
        let dec_drop = dropout.map(|d| DropoutSpec { seed: d.seed, salt: DECODER_SALT, keep: d.keep });
        let enc_run = stack_forward(
            &self.encoder,
            self.cfg.spec(),
            SeqInput::Tokens(&prepared),
            &self.zero_states(),
            enc_drop.as_ref(),
        )?;
        let dec_run = stack_forward(
            &self.decoder,
            self.cfg.spec(),
            SeqInput::Tokens(dec_in),
            &enc_run.finals,
            dec_drop.as_ref(),
        )?;
        Ok((enc_run, dec_run))
    }

    /// Teacher-forced negative log-likelihood of the masked target positions.
    pub fn sequence_loss(
        &self,
        src: &[usize],
        dec_in: &[usize],
        targets: &[usize],
        mask: &[bool],
    ) -> Result<LossStats> {
        self.check_teacher_io(dec_in, targets, mask)?;
        let (_, dec_run) = self.run_stacks(src, dec_in, None)?;
        let mut stats = LossStats::zero();
        for t in 0..dec_in.len() {
            if !mask[t] {
                continue;
            }
            let log_probs = log_softmax(&self.project(&dec_run.tape.top[t]))?;
            stats.nll_sum -= log_probs[targets[t]].to_f64();
            stats.tokens += 1;
        }
        Ok(stats)
    }

    /// Loss plus exact analytic gradients for one teacher-forced sequence.
    /// The returned gradients are of the summed (not averaged) negative
    /// log-likelihood; batch averaging is the caller's.
    pub fn sequence_grads(
        &self,
        src: &[usize],
        dec_in: &[usize],
        targets: &[usize],
        mask: &[bool],
        dropout: Option<DropoutPlan>,
    ) -> Result<(LossStats, Seq2Seq<F>)> {
        self.check_teacher_io(dec_in, targets, mask)?;
        let dropout = dropout.filter(|d| d.keep < 1.0);
        let (enc_run, dec_run) = self.run_stacks(src, dec_in, dropout)?;

        let mut stats = LossStats::zero();
        let mut grads = self.zeros_like();
        let top_w = *dec_run.tape.widths.last().expect("at least one layer");
        let mut grad_top: Vec<Vec<F>> = vec![vec![F::zero(); top_w]; dec_in.len()];
        for t in 0..dec_in.len() {
            if !mask[t] {
                continue;
            }
            let top = &dec_run.tape.top[t];
            let log_probs = log_softmax(&self.project(top))?;
            stats.nll_sum -= log_probs[targets[t]].to_f64();
            stats.tokens += 1;
            // d(-log p[target])/d logits = softmax - one_hot(target)
            let mut g_logits: Vec<F> = log_probs.iter().map(|&lp| lp.exp()).collect();
            g_logits[targets[t]] -= F::one();
            grads.w_out.outer_acc(&g_logits, top);
            axpy(&mut grads.b_out, F::one(), &g_logits);
            self.w_out.tr_matvec_acc(&g_logits, &mut grad_top[t]);
        }

        let zero_finals = self.zero_states();
        let (dec_grads, _, dec_init_grad) =
            stack_backward(&self.decoder, &dec_run.tape, &grad_top, &zero_finals)?;
        let enc_top_w = *enc_run.tape.widths.last().expect("at least one layer");
        let enc_zero_top: Vec<Vec<F>> = vec![vec![F::zero(); enc_top_w]; enc_run.tape.top.len()];
        let (enc_grads, _, _) =
            stack_backward(&self.encoder, &enc_run.tape, &enc_zero_top, &dec_init_grad)?;
        grads.encoder = enc_grads;
        grads.decoder = dec_grads;
        Ok((stats, grads))
    }

    /// Names follow the tensor order: encoder layers, decoder layers, then
    /// the projection.
    pub fn tensor_name(&self, idx: usize) -> String {
        let per_stack = 12 * self.cfg.num_layers;
        if idx < per_stack {
            format!("enc{}.{}", idx / 12, LSTM_TENSOR_NAMES[idx % 12])
        } else if idx < 2 * per_stack {
            let i = idx - per_stack;
            format!("dec{}.{}", i / 12, LSTM_TENSOR_NAMES[i % 12])
        } else if idx == 2 * per_stack {
            "proj.w".into()
        } else {
            "proj.b".into()
        }
    }

    /// (name, rows, cols) for serialization; vectors are 1 x len.
    pub fn tensor_shape(&self, idx: usize) -> (String, usize, usize) {
        let name = self.tensor_name(idx);
        let per_stack = 12 * self.cfg.num_layers;
        let (rows, cols) = if idx < 2 * per_stack {
            let within = idx % 12;
            let layer = (idx % per_stack) / 12;
            let input = if layer == 0 { self.cfg.vocab_size } else { self.cfg.hidden };
            match within {
                0..=3 => (self.cfg.hidden, input),
                4..=7 => (self.cfg.hidden, self.cfg.hidden),
                _ => (1, self.cfg.hidden),
            }
        } else if idx == 2 * per_stack {
            (self.w_out.rows(), self.w_out.cols())
        } else {
            (1, self.b_out.len())
        };
        (name, rows, cols)
    }

    /// self += a * rhs over every tensor; the SGD update and gradient
    /// accumulation both ride on this.
    pub fn axpy_model(&mut self, a: F, rhs: &Self) {
        for (dst, src) in self.encoder.iter_mut().zip(&rhs.encoder) {
            dst.axpy_params(a, src);
        }
        for (dst, src) in self.decoder.iter_mut().zip(&rhs.decoder) {
            dst.axpy_params(a, src);
        }
        self.w_out
            .axpy_mat(a, &rhs.w_out)
            .expect("gradient shapes match the model");
        axpy(&mut self.b_out, a, &rhs.b_out);
    }

    pub fn scale(&mut self, a: F) {
        for i in 0..self.tensor_count() {
            for v in self.tensor_at_mut(i) {
                *v *= a;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        (0..self.tensor_count())
            .map(|i| self.tensor_at(i).iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>())
            .sum()
    }

    /// Name of the first tensor containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        (0..self.tensor_count())
            .find(|&i| self.tensor_at(i).iter().any(|v| !v.is_finite()))
            .map(|i| self.tensor_name(i))
    }
}

impl<F: Scalar> TensorSet<F> for Seq2Seq<F> {
    fn tensor_count(&self) -> usize {
        24 * self.cfg.num_layers + 2
    }

    fn tensor_at(&self, idx: usize) -> &[F] {
        let per_stack = 12 * self.cfg.num_layers;
        if idx < per_stack {
            self.encoder[idx / 12].tensor(idx % 12)
        } else if idx < 2 * per_stack {
            let i = idx - per_stack;
            self.decoder[i / 12].tensor(i % 12)
        } else if idx == 2 * per_stack {
            self.w_out.data()
        } else {
            &self.b_out
        }
    }

    fn tensor_at_mut(&mut self, idx: usize) -> &mut [F] {
        let per_stack = 12 * self.cfg.num_layers;
        if idx < per_stack {
            self.encoder[idx / 12].tensor_mut(idx % 12)
        } else if idx < 2 * per_stack {
            let i = idx - per_stack;
            self.decoder[i / 12].tensor_mut(i % 12)
        } else if idx == 2 * per_stack {
            self.w_out.data_mut()
        } else {
            &mut self.b_out
        }
    }
}

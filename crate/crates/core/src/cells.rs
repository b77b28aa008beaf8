//! GRU and LSTM cells, the Mogrifier mutual-gating pre-step, and sequence
//! encoders built from them.
//!
//! Cells accept either a single state (`[dim]`) or a batch stored as columns
//! (`[dim, batch]`); every weight multiplies from the left and biases are
//! added per column, so the same code serves both.

use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Weights of one GRU cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ir: ParamId,
    pub w_iz: ParamId,
    pub w_in: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_ir: ParamId,
    pub b_iz: ParamId,
    pub b_in: ParamId,
    pub b_hr: ParamId,
    pub b_hz: ParamId,
    pub b_hn: ParamId,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let (i, h) = (input_dim, hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            w_ir: store.uniform(format!("{prefix}.w_ir"), h, i, rng),
            w_iz: store.uniform(format!("{prefix}.w_iz"), h, i, rng),
            w_in: store.uniform(format!("{prefix}.w_in"), h, i, rng),
            w_hr: store.uniform(format!("{prefix}.w_hr"), h, h, rng),
            w_hz: store.uniform(format!("{prefix}.w_hz"), h, h, rng),
            w_hn: store.uniform(format!("{prefix}.w_hn"), h, h, rng),
            b_ir: store.zeros(format!("{prefix}.b_ir"), &[h]),
            b_iz: store.zeros(format!("{prefix}.b_iz"), &[h]),
            b_in: store.zeros(format!("{prefix}.b_in"), &[h]),
            b_hr: store.zeros(format!("{prefix}.b_hr"), &[h]),
            b_hz: store.zeros(format!("{prefix}.b_hz"), &[h]),
            b_hn: store.zeros(format!("{prefix}.b_hn"), &[h]),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.w_ir, self.w_iz, self.w_in, self.w_hr, self.w_hz, self.w_hn, self.b_ir,
            self.b_iz, self.b_in, self.b_hr, self.b_hz, self.b_hn,
        ]
    }
}

/// Initial gate offset; `1.5 * tanh(GATE_OFFSET) == 1`, so a fresh
/// Mogrifier starts close to the plain cell.
pub const GATE_OFFSET: f64 = 0.804_718_956_217_050_2;

/// Mutual-gating matrices. Odd rounds rescale the input with `Q`
/// (`input_dim x hidden_dim`), even rounds rescale the hidden state with `R`
/// (`hidden_dim x input_dim`). Each round also has an offset vector added
/// inside the tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct MogrifierParams {
    pub rounds: usize,
    pub q: Vec<ParamId>,
    pub r: Vec<ParamId>,
    pub q_offset: Vec<ParamId>,
    pub r_offset: Vec<ParamId>,
}

impl MogrifierParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rounds: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::none();
        p.rounds = rounds;
        for a in 1..=rounds {
            if a % 2 == 1 {
                p.q.push(store.uniform(format!("{prefix}.q{a}"), input_dim, hidden_dim, rng));
                p.q_offset
                    .push(store.add(format!("{prefix}.bq{a}"), Tensor::vector(vec![GATE_OFFSET; input_dim])));
            } else {
                p.r.push(store.uniform(format!("{prefix}.r{a}"), hidden_dim, input_dim, rng));
                p.r_offset
                    .push(store.add(format!("{prefix}.br{a}"), Tensor::vector(vec![GATE_OFFSET; hidden_dim])));
            }
        }
        p
    }

    /// Zero rounds: the pre-step is the identity.
    pub fn none() -> Self {
        Self {
            rounds: 0,
            q: Vec::new(),
            r: Vec::new(),
            q_offset: Vec::new(),
            r_offset: Vec::new(),
        }
    }
}

/// One direction of one LSTM layer. Gate rows are stacked as
/// `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub mogrifier: Option<MogrifierParams>,
}

impl LstmCellParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        mogrifier_rounds: usize,
        rng: &mut R,
    ) -> Self {
        let h4 = 4 * hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w_x: store.uniform(format!("{prefix}.w_x"), h4, input_dim, rng),
            w_h: store.uniform(format!("{prefix}.w_h"), h4, hidden_dim, rng),
            bias: store.zeros(format!("{prefix}.bias"), &[h4]),
            mogrifier: (mogrifier_rounds > 0).then(|| {
                MogrifierParams::new(
                    store,
                    &format!("{prefix}.mog"),
                    input_dim,
                    hidden_dim,
                    mogrifier_rounds,
                    rng,
                )
            }),
        }
    }
}

/// Stacked, optionally bidirectional, LSTM. Layer `k > 0` of a direction
/// consumes that direction's layer `k - 1` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub forward: Vec<LstmCellParams>,
    pub backward: Option<Vec<LstmCellParams>>,
}

impl LstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        layers: usize,
        mogrifier_rounds: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Self {
        let mut stack = |dir: &str, rng: &mut R| -> Vec<LstmCellParams> {
            (0..layers.max(1))
                .map(|l| {
                    let in_dim = if l == 0 { input_dim } else { hidden_dim };
                    LstmCellParams::new(
                        store,
                        &format!("{prefix}.{dir}{l}"),
                        in_dim,
                        hidden_dim,
                        mogrifier_rounds,
                        rng,
                    )
                })
                .collect()
        };
        let forward = stack("fwd", rng);
        let backward = bidirectional.then(|| stack("bwd", rng));
        Self { forward, backward }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward[0].hidden_dim
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }

    /// Width of [`encode_sequence`]'s output.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim() * if self.is_bidirectional() { 2 } else { 1 }
    }
}

fn affine(tape: &mut Tape<'_>, w: ParamId, x: Var, b: ParamId) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    let wx = tape.matmul(w, x)?;
    tape.add_bias(wx, b)
}

/// `h_cur = (1 - z) * n + z * h_prev` with reset gate `r`, update gate `z`
/// and candidate `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`.
pub fn gru_step(tape: &mut Tape<'_>, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let xr = affine(tape, p.w_ir, x, p.b_ir)?;
    let hr = affine(tape, p.w_hr, h_prev, p.b_hr)?;
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);

    let xz = affine(tape, p.w_iz, x, p.b_iz)?;
    let hz = affine(tape, p.w_hz, h_prev, p.b_hz)?;
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);

    let xn = affine(tape, p.w_in, x, p.b_in)?;
    let hn = affine(tape, p.w_hn, h_prev, p.b_hn)?;
    let gated = tape.mul(r, hn)?;
    let n_pre = tape.add(xn, gated)?;
    let n = tape.tanh(n_pre);

    let one_minus_z = tape.rsub(1.0, z);
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

/// Alternating mutual gating. Round `a` (1-based) rescales the input by
/// `1.5 * tanh(Q h + b)` when odd and the hidden state by
/// `1.5 * tanh(R x + b)` when even, always using the latest value of the
/// other operand.
pub fn mogrify(tape: &mut Tape<'_>, x: Var, h: Var, p: &MogrifierParams) -> Result<(Var, Var)> {
    let expected_q = p.rounds.div_ceil(2);
    if p.q.len() != expected_q
        || p.r.len() != p.rounds / 2
        || p.q_offset.len() != p.q.len()
        || p.r_offset.len() != p.r.len()
    {
        return Err(TensorError::Invalid(format!(
            "mogrifier with {} rounds needs {} Q and {} R matrices, has {} and {}",
            p.rounds,
            expected_q,
            p.rounds / 2,
            p.q.len(),
            p.r.len()
        )));
    }
    let (mut x, mut h) = (x, h);
    for a in 1..=p.rounds {
        if a % 2 == 1 {
            let q = tape.param(p.q[a / 2]);
            let qh = tape.matmul(q, h)?;
            let b = tape.param(p.q_offset[a / 2]);
            let qh = tape.add_bias(qh, b)?;
            let gate = tape.tanh(qh);
            let gate = tape.scale(gate, 1.5);
            x = tape.mul(gate, x)?;
        } else {
            let r = tape.param(p.r[a / 2 - 1]);
            let rx = tape.matmul(r, x)?;
            let b = tape.param(p.r_offset[a / 2 - 1]);
            let rx = tape.add_bias(rx, b)?;
            let gate = tape.tanh(rx);
            let gate = tape.scale(gate, 1.5);
            h = tape.mul(gate, h)?;
        }
    }
    Ok((x, h))
}

/// GRU applied to the mogrified input/hidden pair.
pub fn mogrifier_gru_step(
    tape: &mut Tape<'_>,
    x: Var,
    h_prev: Var,
    gru: &GruParams,
    mog: &MogrifierParams,
) -> Result<Var> {
    let (x, h) = mogrify(tape, x, h_prev, mog)?;
    gru_step(tape, x, h, gru)
}

/// One LSTM step; runs the Mogrifier pre-step first when configured.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    x: Var,
    state: (Var, Var),
    p: &LstmCellParams,
) -> Result<(Var, Var)> {
    let (mut x, mut h) = (x, state.0);
    if let Some(mog) = &p.mogrifier {
        (x, h) = mogrify(tape, x, h, mog)?;
    }
    let c = state.1;
    let w_x = tape.param(p.w_x);
    let w_h = tape.param(p.w_h);
    let b = tape.param(p.bias);
    let gx = tape.matmul(w_x, x)?;
    let gh = tape.matmul(w_h, h)?;
    let gates = tape.add(gx, gh)?;
    let gates = tape.add_bias(gates, b)?;

    let hd = p.hidden_dim;
    let i = tape.rows(gates, 0, hd)?;
    let f = tape.rows(gates, hd, hd)?;
    let g = tape.rows(gates, 2 * hd, hd)?;
    let o = tape.rows(gates, 3 * hd, hd)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Zero state matching the trailing (batch) shape of `x`.
pub fn zero_state(tape: &mut Tape<'_>, x: Var, hidden_dim: usize) -> (Var, Var) {
    let shape = match tape.shape(x) {
        [_, batch] => vec![hidden_dim, *batch],
        _ => vec![hidden_dim],
    };
    let h = tape.constant(Tensor::zeros(&shape));
    let c = tape.constant(Tensor::zeros(&shape));
    (h, c)
}

fn run_direction(tape: &mut Tape<'_>, seq: &[Var], layers: &[LstmCellParams]) -> Result<Var> {
    let mut inputs: Vec<Var> = seq.to_vec();
    let mut last = None;
    for cell in layers {
        let mut state = zero_state(tape, inputs[0], cell.hidden_dim);
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            state = lstm_step(tape, x, state, cell)?;
            outputs.push(state.0);
        }
        last = Some(state.0);
        inputs = outputs;
    }
    last.ok_or_else(|| TensorError::Invalid("lstm without layers".into()))
}

/// Final hidden state after folding the sequence left to right. A
/// bidirectional encoder returns `[forward_final; backward_final]`.
pub fn encode_sequence(tape: &mut Tape<'_>, seq: &[Var], p: &LstmParams) -> Result<Var> {
    if seq.is_empty() {
        return Err(TensorError::Invalid("cannot encode an empty sequence".into()));
    }
    let fwd = run_direction(tape, seq, &p.forward)?;
    match &p.backward {
        None => Ok(fwd),
        Some(layers) => {
            let reversed: Vec<Var> = seq.iter().rev().copied().collect();
            let bwd = run_direction(tape, &reversed, layers)?;
            tape.concat(&[fwd, bwd])
        }
    }
}

//! Discrete-latent CVAE pieces: prior and posterior heads over 25 symbols,
//! KL and mutual-information terms, and the Mogrifier-GRU decoder that maps
//! a condition and a latent symbol to a per-step Gaussian over position
//! increments.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cells::{mogrifier_gru_step, GruParams, MogrifierParams};
use crate::classifier::TrajectoryProposal;
use crate::config::LATENT_SIZE;
use crate::error::{LtnError, Result};
use crate::scene::Point;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Width of one decoder output column: mean increment (2), log-diagonal of
/// the Cholesky factor (2), off-diagonal (1).
pub const STEP_OUTPUTS: usize = 5;
/// Log-scales are squashed into `(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)`.
pub const LOG_SCALE_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalLatent {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl CategoricalLatent {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(LtnError::NonFinite("latent logits".into()));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let probs = e.into_iter().map(|v| v / z).collect();
        Ok(Self { logits, probs })
    }

    pub fn from_probs(probs: Vec<f64>) -> Self {
        let logits = probs.iter().map(|p| p.ln()).collect();
        Self { logits, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable symbol; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = k;
            }
        }
        best
    }

    /// Inverse-CDF draw from a uniform in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// `sum_k q_k (log q_k - log p_k)`, with `0 log 0 = 0`. Infinite when `p`
/// puts zero mass where `q` does not.
pub fn kl_divergence(q: &CategoricalLatent, p: &CategoricalLatent) -> f64 {
    q.probs
        .iter()
        .zip(&p.probs)
        .map(|(&qk, &pk)| {
            if qk == 0.0 {
                0.0
            } else if pk == 0.0 {
                f64::INFINITY
            } else {
                qk * (qk.ln() - pk.ln())
            }
        })
        .sum()
}

/// Mean over the batch of `KL(q_b || mean_b q_b)`.
pub fn mutual_information(batch: &[CategoricalLatent]) -> Result<f64> {
    if batch.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let k = batch[0].len();
    let mut marginal = vec![0.0; k];
    for q in batch {
        for (m, p) in marginal.iter_mut().zip(&q.probs) {
            *m += p / n;
        }
    }
    let marginal = CategoricalLatent::from_probs(marginal);
    Ok(batch.iter().map(|q| kl_divergence(q, &marginal)).sum::<f64>() / n)
}

/// `affine -> tanh -> affine` onto the latent logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.uniform(format!("{prefix}.w1"), hidden, input_dim, rng),
            b1: store.zeros(format!("{prefix}.b1"), &[hidden]),
            w2: store.uniform(format!("{prefix}.w2"), LATENT_SIZE, hidden, rng),
            b2: store.zeros(format!("{prefix}.b2"), &[LATENT_SIZE]),
        }
    }

    pub fn logits(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h = tape.matmul(w1, x)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(w2, h)?;
        Ok(tape.add_bias(o, b2)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    pub prior: HeadParams,
    pub posterior: HeadParams,
}

impl LatentParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        history_dim: usize,
        future_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            prior: HeadParams::new(store, "latent.prior", history_dim, hidden, rng),
            posterior: HeadParams::new(store, "latent.posterior", history_dim + future_dim, hidden, rng),
        }
    }
}

/// Prior logits from the complete history tensor, which already carries the
/// map encoding when one is configured.
pub fn prior_logits(tape: &mut Tape<'_>, v_i: Var, p: &LatentParams) -> Result<Var> {
    p.prior.logits(tape, v_i)
}

/// Posterior logits from `[v_i; v_f]`.
pub fn posterior_logits(tape: &mut Tape<'_>, v_i: Var, v_f: Var, p: &LatentParams) -> Result<Var> {
    let x = tape.concat(&[v_i, v_f])?;
    p.posterior.logits(tape, x)
}

pub fn distribution(tape: &Tape<'_>, logits: Var) -> Result<CategoricalLatent> {
    CategoricalLatent::from_logits(tape.value(logits).data().to_vec())
}

/// Differentiable `KL(softmax(q_logits) || softmax(p_logits))`.
pub fn kl_var(tape: &mut Tape<'_>, q_logits: Var, p_logits: Var) -> Result<Var> {
    let q = tape.softmax(q_logits);
    let lq = tape.log_softmax(q_logits);
    let lp = tape.log_softmax(p_logits);
    let diff = tape.sub(lq, lp)?;
    Ok(tape.dot(q, diff)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub hidden: usize,
    pub gru: GruParams,
    pub mogrifier: MogrifierParams,
    pub w_hv: ParamId,
    pub w_hz: ParamId,
    pub b_h: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        condition_dim: usize,
        hidden: usize,
        rounds: usize,
        rng: &mut R,
    ) -> Self {
        let input = 2 + LATENT_SIZE;
        Self {
            hidden,
            gru: GruParams::new(store, "dec.gru", input, hidden, rng),
            mogrifier: MogrifierParams::new(store, "dec.mog", input, hidden, rounds, rng),
            w_hv: store.uniform("dec.w_hv", hidden, condition_dim, rng),
            w_hz: store.uniform("dec.w_hz", hidden, LATENT_SIZE, rng),
            b_h: store.zeros("dec.b_h", &[hidden]),
            w_out: store.uniform("dec.w_out", STEP_OUTPUTS, hidden, rng),
            b_out: store.zeros("dec.b_out", &[STEP_OUTPUTS]),
        }
    }
}

fn one_hot_columns(z: &[usize]) -> Result<Tensor> {
    let b = z.len();
    let mut data = vec![0.0; LATENT_SIZE * b];
    for (col, &k) in z.iter().enumerate() {
        if k >= LATENT_SIZE {
            return Err(LtnError::Invalid(format!("latent index {k} out of range")));
        }
        data[k * b + col] = 1.0;
    }
    Ok(Tensor::matrix(LATENT_SIZE, b, data)?)
}

/// Runs the decoder for each symbol in `z` at once (one column per symbol)
/// and returns the `[5, len(z)]` output of every future step: mean
/// increment, the two log-diagonals of the Cholesky factor and its
/// off-diagonal. `first_increment` is the last observed per-frame
/// displacement.
pub fn decode(
    tape: &mut Tape<'_>,
    v_i: Var,
    z: &[usize],
    first_increment: Point,
    steps: usize,
    p: &DecoderParams,
) -> Result<Vec<Var>> {
    if z.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let b = z.len();
    let onehot = tape.constant(one_hot_columns(z)?);
    let w_hv = tape.param(p.w_hv);
    let w_hz = tape.param(p.w_hz);
    let b_h = tape.param(p.b_h);
    let cond = tape.matmul(w_hv, v_i)?;
    let cond = tape.add(cond, b_h)?;
    let lat = tape.matmul(w_hz, onehot)?;
    let h0 = tape.add_bias(lat, cond)?;
    let mut h = tape.tanh(h0);

    let mut prev = tape.constant(Tensor::matrix(
        2,
        b,
        [vec![first_increment.x; b], vec![first_increment.y; b]].concat(),
    )?);
    let w_out = tape.param(p.w_out);
    let b_out = tape.param(p.b_out);
    let mut outs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = tape.concat(&[prev, onehot])?;
        h = mogrifier_gru_step(tape, x, h, &p.gru, &p.mogrifier)?;
        let o = tape.matmul(w_out, h)?;
        let o = tape.add_bias(o, b_out)?;
        prev = tape.rows(o, 0, 2)?;
        let ls = tape.rows(o, 2, 2)?;
        let ls = tape.scale(ls, 1.0 / LOG_SCALE_LIMIT);
        let ls = tape.tanh(ls);
        let ls = tape.scale(ls, LOG_SCALE_LIMIT);
        let c = tape.rows(o, 4, 1)?;
        outs.push(tape.concat(&[prev, ls, c])?);
    }
    Ok(outs)
}

/// Per-column log density of the observed increments, summed over steps.
/// Returns a `[B]` node.
pub fn decoded_log_likelihood(tape: &mut Tape<'_>, outs: &[Var], increments: &[Point]) -> Result<Var> {
    if outs.len() != increments.len() {
        return Err(LtnError::HorizonMismatch {
            got: increments.len(),
            expected: outs.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&o, d) in outs.iter().zip(increments) {
        let mean = tape.rows(o, 0, 2)?;
        let neg = tape.neg(mean);
        let target = tape.constant(Tensor::vector(vec![d.x, d.y]));
        let diff = tape.add_bias(neg, target)?;
        let d1 = tape.rows(diff, 0, 1)?;
        let d2 = tape.rows(diff, 1, 1)?;
        let la = tape.rows(o, 2, 1)?;
        let lb = tape.rows(o, 3, 1)?;
        let c = tape.rows(o, 4, 1)?;
        let na = tape.neg(la);
        let ia = tape.exp(na);
        let u1 = tape.mul(d1, ia)?;
        let cu = tape.mul(c, u1)?;
        let r2 = tape.sub(d2, cu)?;
        let nb = tape.neg(lb);
        let ib = tape.exp(nb);
        let u2 = tape.mul(r2, ib)?;
        let s1 = tape.mul(u1, u1)?;
        let s2 = tape.mul(u2, u2)?;
        let sq = tape.add(s1, s2)?;
        let half = tape.scale(sq, -0.5);
        let logdet = tape.add(la, lb)?;
        let ll = tape.sub(half, logdet)?;
        let ll = tape.offset(ll, -(2.0 * PI).ln());
        total = Some(match total {
            None => ll,
            Some(t) => tape.add(t, ll)?,
        });
    }
    let total = total.ok_or(LtnError::EmptyBatch)?;
    let n = tape.shape(total)[1];
    Ok(tape.reshape(total, &[n])?)
}

/// Bivariate Gaussian over one step. `chol = [l11, l21, l22]` is the lower
/// triangular factor of the increment covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianStep {
    /// Mean position.
    pub mean: Point,
    /// Mean increment from the previous step's mean.
    pub increment: Point,
    pub chol: [f64; 3],
}

impl GaussianStep {
    pub fn cov(&self) -> [[f64; 2]; 2] {
        let [a, c, b] = self.chol;
        [[a * a, a * c], [a * c, c * c + b * b]]
    }

    pub fn log_density(&self, increment: Point) -> f64 {
        let [a, c, b] = self.chol;
        let d = increment - self.increment;
        let u1 = d.x / a;
        let u2 = (d.y - c * u1) / b;
        -(2.0 * PI).ln() - a.ln() - b.ln() - 0.5 * (u1 * u1 + u2 * u2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedDistribution {
    pub latent_index: usize,
    pub origin: Point,
    pub steps: Vec<GaussianStep>,
}

impl DecodedDistribution {
    pub fn mean_trajectory(&self) -> Vec<Point> {
        self.steps.iter().map(|s| s.mean).collect()
    }

    /// Log density of a future path, through its per-step increments.
    pub fn log_likelihood(&self, future: &[Point]) -> Result<f64> {
        if future.len() != self.steps.len() {
            return Err(LtnError::HorizonMismatch {
                got: future.len(),
                expected: self.steps.len(),
            });
        }
        let mut prev = self.origin;
        let mut total = 0.0;
        for (s, &p) in self.steps.iter().zip(future) {
            total += s.log_density(p - prev);
            prev = p;
        }
        Ok(total)
    }

    /// One path drawn by sampling every step's increment in order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Point> {
        let mut pos = self.origin;
        self.steps
            .iter()
            .map(|s| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let [a, c, b] = s.chol;
                pos = pos + s.increment + Point::new(a * e1, c * e1 + b * e2);
                pos
            })
            .collect()
    }
}

/// Reads decoder outputs back as one distribution per column.
pub fn read_distributions(tape: &Tape<'_>, outs: &[Var], z: &[usize], origin: Point) -> Vec<DecodedDistribution> {
    let b = z.len();
    z.iter()
        .enumerate()
        .map(|(col, &k)| {
            let mut mean = origin;
            let steps = outs
                .iter()
                .map(|&o| {
                    let t = tape.value(o);
                    let g = |r: usize| t.data()[r * b + col];
                    let increment = Point::new(g(0), g(1));
                    mean = mean + increment;
                    GaussianStep {
                        mean,
                        increment,
                        chol: [g(2).exp(), g(4), g(3).exp()],
                    }
                })
                .collect();
            DecodedDistribution {
                latent_index: k,
                origin,
                steps,
            }
        })
        .collect()
}

/// `log sum_z p(z) p(future | z)`.
pub fn mixture_log_likelihood(prior: &CategoricalLatent, component_ll: &[f64]) -> f64 {
    let terms: Vec<f64> = prior
        .probs
        .iter()
        .zip(component_ll)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p.ln() + l)
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalMode {
    /// Every proposal decodes the prior's most probable symbol.
    LatentMode,
    /// Each proposal draws its own symbol from the prior.
    Full,
}

impl std::str::FromStr for ProposalMode {
    type Err = LtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(ProposalMode::LatentMode),
            "full" => Ok(ProposalMode::Full),
            _ => Err(LtnError::Parse(format!("unknown proposal mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ProposalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProposalMode::LatentMode => "latent",
            ProposalMode::Full => "full",
        })
    }
}

/// Independent random stream for proposal `k` under `seed`.
pub fn proposal_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Draws `n` proposals. `decode` produces the distribution for a symbol and
/// is called at most once per distinct symbol.
pub fn sample_proposals<F>(
    prior: &CategoricalLatent,
    n: usize,
    mode: ProposalMode,
    seed: u64,
    mut decode: F,
) -> Result<Vec<TrajectoryProposal>>
where
    F: FnMut(&[usize]) -> Result<Vec<DecodedDistribution>>,
{
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|k| proposal_rng(seed, k)).collect();
    let symbols: Vec<usize> = match mode {
        ProposalMode::LatentMode => vec![prior.argmax(); n],
        ProposalMode::Full => rngs.iter_mut().map(|r| prior.sample_with(r.random::<f64>())).collect(),
    };
    let mut distinct: Vec<usize> = symbols.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let decoded: BTreeMap<usize, DecodedDistribution> = distinct.iter().copied().zip(decode(&distinct)?).collect();
    Ok(symbols
        .iter()
        .zip(rngs.iter_mut())
        .enumerate()
        .map(|(index, (z, rng))| TrajectoryProposal::new(index, decoded[z].sample(rng), *z))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::grad_check_params;

    fn rand_cat(rng: &mut ChaCha8Rng) -> CategoricalLatent {
        let l = (0..LATENT_SIZE).map(|_| rng.random_range(-3.0..3.0)).collect();
        CategoricalLatent::from_logits(l).unwrap()
    }

    #[test]
    fn zero_heads_are_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LatentParams::new(&mut store, 6, 4, 5, &mut rng);
        for (id, _, t) in store.clone().iter() {
            store.set(id, Tensor::zeros(t.shape())).unwrap();
        }
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![1.0; 6]));
        let vf = tape.constant(Tensor::vector(vec![-1.0; 4]));
        let pl = prior_logits(&mut tape, vi, &p).unwrap();
        let ql = posterior_logits(&mut tape, vi, vf, &p).unwrap();
        for l in [pl, ql] {
            let d = distribution(&tape, l).unwrap();
            assert!(d.probs.iter().all(|&x| (x - 1.0 / 25.0).abs() < 1e-15));
        }
    }

    #[test]
    fn softmax_of_embedded_pattern() {
        let mut logits = vec![0.0; LATENT_SIZE];
        logits[3] = 1.0;
        logits[10] = -2.0;
        logits[20] = 0.5;
        let d = CategoricalLatent::from_logits(logits).unwrap();
        let z = 22.0 + 1f64.exp() + (-2f64).exp() + 0.5f64.exp();
        assert!((d.probs[3] - 1f64.exp() / z).abs() < 1e-12);
        assert!((d.probs[10] - (-2f64).exp() / z).abs() < 1e-12);
        assert!((d.probs[20] - 0.5f64.exp() / z).abs() < 1e-12);
        assert!((d.probs[0] - 1.0 / z).abs() < 1e-12);
        assert_eq!(d.argmax(), 3);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut l = vec![0.0; LATENT_SIZE];
        l[4] = f64::NAN;
        assert!(matches!(CategoricalLatent::from_logits(l), Err(LtnError::NonFinite(_))));
    }

    #[test]
    fn duplicated_heads_give_zero_kl() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h1 = HeadParams::new(&mut store, "a", 5, 4, &mut rng);
        let h2 = HeadParams::new(&mut store, "b", 5, 4, &mut rng);
        for (src, dst) in [(h1.w1, h2.w1), (h1.b1, h2.b1), (h1.w2, h2.w2), (h1.b2, h2.b2)] {
            let v = store.get(src).clone();
            store.set(dst, v).unwrap();
        }
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::vector(vec![0.3, -0.2, 1.0, 0.0, 2.0]));
        let a = h1.logits(&mut tape, x).unwrap();
        let b = h2.logits(&mut tape, x).unwrap();
        let kl = kl_var(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(kl), 0.0);
        let (qa, qb) = (distribution(&tape, a).unwrap(), distribution(&tape, b).unwrap());
        assert_eq!(kl_divergence(&qa, &qb), 0.0);
    }

    #[test]
    fn kl_against_direct_sum() {
        let q = CategoricalLatent::from_probs(vec![1.0 / 25.0; 25]);
        let mut pp = vec![0.5 / 24.0; 25];
        pp[0] = 0.5;
        let p = CategoricalLatent::from_probs(pp);
        let mut want = (1.0 / 25.0) * ((1.0 / 25.0f64).ln() - 0.5f64.ln());
        for _ in 0..24 {
            want += (1.0 / 25.0) * ((1.0 / 25.0f64).ln() - (0.5f64 / 24.0).ln());
        }
        assert!((kl_divergence(&q, &p) - want).abs() < 1e-12);
        assert_eq!(kl_divergence(&q, &q), 0.0);
    }

    #[test]
    fn kl_with_missing_support_is_infinite() {
        let mut a = vec![0.0; 25];
        a[0] = 1.0;
        let mut b = vec![0.0; 25];
        b[1] = 1.0;
        let (q, p) = (CategoricalLatent::from_probs(a), CategoricalLatent::from_probs(b));
        assert_eq!(kl_divergence(&q, &p), f64::INFINITY);
    }

    #[test]
    fn kl_var_matches_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, p) = (rand_cat(&mut rng), rand_cat(&mut rng));
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(q.logits.clone()));
        let b = tape.leaf(Tensor::vector(p.logits.clone()));
        let kl = kl_var(&mut tape, a, b).unwrap();
        assert!((tape.scalar(kl) - kl_divergence(&q, &p)).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_cat(&mut rng);
        assert!(mutual_information(&[q.clone(), q.clone(), q]).unwrap().abs() < 1e-15);
        let mut a = vec![1e-300; 25];
        a[0] = 1.0;
        let mut b = vec![1e-300; 25];
        b[1] = 1.0;
        let mi = mutual_information(&[CategoricalLatent::from_probs(a), CategoricalLatent::from_probs(b)]).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-6);
        assert!(matches!(mutual_information(&[]), Err(LtnError::EmptyBatch)));
    }

    fn decoder_setup(seed: u64, hidden: usize, rounds: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DecoderParams::new(&mut store, 6, hidden, rounds, &mut rng);
        (store, p)
    }

    #[test]
    fn decoder_shapes_and_zero_drift() {
        let (mut store, p) = decoder_setup(4, 5, 6);
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![0.1; 6]));
        let outs = decode(&mut tape, vi, &[0, 7], Point::new(0.3, 0.1), 12, &p).unwrap();
        let d = read_distributions(&tape, &outs, &[0, 7], Point::new(1.0, 2.0));
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].latent_index, 7);
        assert_eq!(d[0].steps.len(), 12);

        for id in [p.w_out, p.b_out] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![0.1; 6]));
        let outs = decode(&mut tape, vi, &[3], Point::new(0.3, 0.1), 12, &p).unwrap();
        let d = read_distributions(&tape, &outs, &[3], Point::new(1.0, 2.0));
        assert!(d[0].steps.iter().all(|s| s.mean == Point::new(1.0, 2.0)));
        assert!(d[0].steps.iter().all(|s| s.chol == [1.0, 0.0, 1.0]));
    }

    #[test]
    fn log_scales_stay_bounded() {
        let (mut store, p) = decoder_setup(4, 5, 6);
        store.set(p.w_out, Tensor::zeros(&[STEP_OUTPUTS, 5])).unwrap();
        store.set(p.b_out, Tensor::vector(vec![0.0, 0.0, -1e4, 3.0, 0.5])).unwrap();
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![0.1; 6]));
        let outs = decode(&mut tape, vi, &[2], Point::ORIGIN, 3, &p).unwrap();
        let d = read_distributions(&tape, &outs, &[2], Point::ORIGIN);
        let want = [(-LOG_SCALE_LIMIT).exp(), 0.5, (LOG_SCALE_LIMIT * (0.3f64).tanh()).exp()];
        for s in &d[0].steps {
            for (a, b) in s.chol.iter().zip(want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{:?}", s.chol);
            }
        }
        let ll = decoded_log_likelihood(&mut tape, &outs, &[Point::new(1e3, -1e3); 3]).unwrap();
        assert!(tape.value(ll).data()[0].is_finite());
    }

    #[test]
    fn batched_columns_match_single_decodes() {
        let (store, p) = decoder_setup(5, 4, 6);
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![0.2, -0.1, 0.5, 0.0, 0.3, 0.9]));
        let z = [2, 9, 24];
        let outs = decode(&mut tape, vi, &z, Point::new(0.1, 0.2), 5, &p).unwrap();
        let all = read_distributions(&tape, &outs, &z, Point::ORIGIN);
        for (i, &k) in z.iter().enumerate() {
            let one = decode(&mut tape, vi, &[k], Point::new(0.1, 0.2), 5, &p).unwrap();
            let single = read_distributions(&tape, &one, &[k], Point::ORIGIN);
            for (a, b) in all[i].steps.iter().zip(&single[0].steps) {
                assert!((a.mean - b.mean).norm() < 1e-12);
                assert!((0..3).all(|j| (a.chol[j] - b.chol[j]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn log_likelihood_matches_density_sum() {
        let (store, p) = decoder_setup(6, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let origin = Point::new(0.5, -0.5);
        let future: Vec<Point> = (1..=6)
            .map(|t| origin + Point::new(0.4 * t as f64, rng.random_range(-0.3..0.3)))
            .collect();
        let mut prev = origin;
        let incs: Vec<Point> = future
            .iter()
            .map(|&q| {
                let d = q - prev;
                prev = q;
                d
            })
            .collect();
        let mut tape = Tape::with_params(&store);
        let vi = tape.constant(Tensor::vector(vec![0.3; 6]));
        let z: Vec<usize> = (0..LATENT_SIZE).collect();
        let outs = decode(&mut tape, vi, &z, Point::new(0.4, 0.0), 6, &p).unwrap();
        let ll = decoded_log_likelihood(&mut tape, &outs, &incs).unwrap();
        let got = tape.value(ll).data().to_vec();
        for (col, &g) in got.iter().enumerate() {
            let mut want = 0.0;
            for (t, o) in outs.iter().enumerate() {
                let v = |r: usize| tape.value(*o).data()[r * LATENT_SIZE + col];
                let (mx, my) = (v(0), v(1));
                let (s11, s21, s22) = (v(2).exp(), v(4), v(3).exp());
                let cov = [[s11 * s11, s11 * s21], [s11 * s21, s21 * s21 + s22 * s22]];
                let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
                let (dx, dy) = (incs[t].x - mx, incs[t].y - my);
                let quad = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
                want += -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
            }
            assert!((g - want).abs() < 1e-8, "{g} vs {want}");
        }
        let dists = read_distributions(&tape, &outs, &z, origin);
        for (d, g) in dists.iter().zip(&got) {
            assert!((d.log_likelihood(&future).unwrap() - g).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = rand_cat(&mut rng);
        let lls: Vec<f64> = (0..25).map(|_| rng.random_range(-20.0..5.0)).collect();
        let m = mixture_log_likelihood(&prior, &lls);
        assert!(m.is_finite());
        let brute: f64 = prior.probs.iter().zip(&lls).map(|(p, l)| p * l.exp()).sum::<f64>().ln();
        assert!((m - brute).abs() < 1e-10);
        for k in 0..25 {
            assert!(m >= prior.probs[k].ln() + lls[k] - 1e-12);
        }
        let uniform = CategoricalLatent::from_probs(vec![1.0 / 25.0; 25]);
        let best = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mixture_log_likelihood(&uniform, &lls) >= best - 25f64.ln() - 1e-12);
    }

    fn fixed_dist(origin: Point, steps: usize, chol: [f64; 3]) -> DecodedDistribution {
        let inc = Point::new(0.4, 0.1);
        DecodedDistribution {
            latent_index: 0,
            origin,
            steps: (1..=steps)
                .map(|t| GaussianStep {
                    mean: origin + inc.scale(t as f64),
                    increment: inc,
                    chol,
                })
                .collect(),
        }
    }

    #[test]
    fn one_hot_prior_fixes_latent_mode() {
        let mut probs = vec![0.0; 25];
        probs[7] = 1.0;
        let prior = CategoricalLatent::from_probs(probs);
        let props = sample_proposals(&prior, 10, ProposalMode::LatentMode, 1, |z| {
            Ok(z.iter()
                .map(|&k| DecodedDistribution {
                    latent_index: k,
                    ..fixed_dist(Point::ORIGIN, 3, [0.1, 0.0, 0.1])
                })
                .collect())
        })
        .unwrap();
        assert!(props.iter().all(|p| p.latent_index == 7));
        let full = sample_proposals(&prior, 10, ProposalMode::Full, 1, |z| {
            Ok(z.iter().map(|_| fixed_dist(Point::ORIGIN, 3, [0.1, 0.0, 0.1])).collect())
        })
        .unwrap();
        assert!(full.iter().all(|p| p.latent_index == 7));
    }

    #[test]
    fn tiny_variance_collapses_to_mean() {
        let d = fixed_dist(Point::new(1.0, 1.0), 4, [1e-6, 0.0, 1e-6]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = d.sample(&mut rng);
        for (a, b) in s.iter().zip(d.mean_trajectory()) {
            assert!((*a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn monte_carlo_mean_of_first_step() {
        let d = fixed_dist(Point::ORIGIN, 1, [0.3, 0.2, 0.5]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sum = Point::ORIGIN;
        for _ in 0..n {
            sum = sum + d.sample(&mut rng)[0];
        }
        let mean = sum.scale(1.0 / n as f64);
        let cov = d.steps[0].cov();
        let tol = |v: f64| 3.0 * v.sqrt() / (n as f64).sqrt();
        assert!((mean.x - 0.4).abs() < tol(cov[0][0]));
        assert!((mean.y - 0.1).abs() < tol(cov[1][1]));
    }

    #[test]
    fn proposals_are_reproducible_and_stream_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prior = rand_cat(&mut rng);
        let dec = |z: &[usize]| -> Result<Vec<DecodedDistribution>> {
            Ok(z.iter()
                .map(|&k| DecodedDistribution {
                    latent_index: k,
                    ..fixed_dist(Point::new(k as f64, 0.0), 5, [0.2, 0.05, 0.3])
                })
                .collect())
        };
        let a = sample_proposals(&prior, 12, ProposalMode::Full, 77, dec).unwrap();
        let b = sample_proposals(&prior, 12, ProposalMode::Full, 77, dec).unwrap();
        assert_eq!(a, b);
        let fewer = sample_proposals(&prior, 5, ProposalMode::Full, 77, dec).unwrap();
        assert_eq!(&a[..5], &fewer[..]);
    }

    #[test]
    fn decoder_passes_grad_check() {
        for seed in 0..3 {
            let (store, p) = decoder_setup(20 + seed, 3, 6);
            let incs = [Point::new(0.3, 0.1), Point::new(0.35, -0.05), Point::new(0.2, 0.0)];
            let report = grad_check_params(
                &store,
                |tape| {
                    let vi = tape.constant(Tensor::vector(vec![0.4, -0.3, 0.2, 0.1, -0.5, 0.6]));
                    let outs = decode(tape, vi, &[1, 4, 11], Point::new(0.3, 0.0), 3, &p)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                    let ll = decoded_log_likelihood(tape, &outs, &incs)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                    Ok(tape.sum(ll))
                },
                1e-5,
                1e-4,
                6,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.failures());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distributions_normalized_and_kl_nonnegative(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, p) = (rand_cat(&mut rng), rand_cat(&mut rng));
            prop_assert_eq!(q.len(), 25);
            prop_assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.probs.iter().all(|&x| x >= 0.0));
            prop_assert!(kl_divergence(&q, &p) >= -1e-9);
            let batch: Vec<_> = (0..4).map(|_| rand_cat(&mut rng)).collect();
            prop_assert!(mutual_information(&batch).unwrap() >= -1e-12);
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(seed in 0u64..100_000, k in 0.01f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_cat(&mut rng);
            let scaled = CategoricalLatent::from_logits(q.logits.iter().map(|l| l * k).collect()).unwrap();
            prop_assert_eq!(q.argmax(), scaled.argmax());
        }
    }
}

//! Second stage: proposal labeling, scoring, the weighted BCE loss, and
//! selection of the output trajectory.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;

use crate::cells::{gru_step, GruParams};
use crate::error::{LtnError, Result};
use crate::scene::Point;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` inside the loss.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProposal {
    /// Position in the sampled set; the last tie-break when ranking.
    pub index: usize,
    pub positions: Vec<Point>,
    pub latent_index: usize,
    pub score: Option<f64>,
    /// `true` for positive.
    pub label: Option<bool>,
    pub avg_distance: Option<f64>,
}

impl TrajectoryProposal {
    pub fn new(index: usize, positions: Vec<Point>, latent_index: usize) -> Self {
        Self {
            index,
            positions,
            latent_index,
            score: None,
            label: None,
            avg_distance: None,
        }
    }
}

/// Mean over timesteps of the distance between matching positions.
pub fn average_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LtnError::HorizonMismatch {
            got: a.len(),
            expected: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(p, q)| p.distance(*q)).sum::<f64>() / a.len() as f64)
}

/// Sets `avg_distance` and `label` (positive iff `D <= gamma`) on every
/// proposal.
pub fn label_proposals(proposals: &mut [TrajectoryProposal], truth: &[Point], gamma: f64) -> Result<()> {
    for p in proposals.iter_mut() {
        let d = average_distance(&p.positions, truth)?;
        p.avg_distance = Some(d);
        p.label = Some(d <= gamma);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub gru: GruParams,
    pub w_ph: ParamId,
    pub w_pv: ParamId,
    pub b_p: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    /// `w = exp(log_w)`.
    pub log_w: ParamId,
}

impl ClassifierParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        condition_dim: usize,
        hidden: usize,
        head_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            gru: GruParams::new(store, "cls.gru", 4, hidden, rng),
            w_ph: store.uniform("cls.w_ph", head_hidden, hidden, rng),
            w_pv: store.uniform("cls.w_pv", head_hidden, condition_dim, rng),
            b_p: store.zeros("cls.b_p", &[head_hidden]),
            w_o: store.uniform("cls.w_o", 1, head_hidden, rng),
            b_o: store.zeros("cls.b_o", &[1]),
            log_w: store.zeros("cls.log_w", &[]),
        }
    }

    /// The head parameters (everything after the proposal encoder).
    pub fn head_ids(&self) -> [ParamId; 5] {
        [self.w_ph, self.w_pv, self.b_p, self.w_o, self.b_o]
    }
}

/// `[inc_x, inc_y, rel_x, rel_y]` per step and proposal, one `[4, N]` node
/// per step. The observed path comes first and is shared by every column;
/// offsets are taken from its last point.
fn proposal_inputs(tape: &mut Tape<'_>, paths: &[&[Point]], history: &[Point]) -> Result<Vec<Var>> {
    let origin = *history.last().ok_or(LtnError::EmptyBatch)?;
    let n = paths.len();
    let len = paths[0].len();
    let mut out = Vec::with_capacity(history.len() - 1 + len);
    let mut push = |tape: &mut Tape<'_>, cols: &dyn Fn(usize) -> (Point, Point)| -> Result<()> {
        let mut data = vec![0.0; 4 * n];
        for col in 0..n {
            let (prev, cur) = cols(col);
            let inc = cur - prev;
            let rel = cur - origin;
            for (r, v) in [inc.x, inc.y, rel.x, rel.y].into_iter().enumerate() {
                data[r * n + col] = v;
            }
        }
        out.push(tape.constant(Tensor::matrix(4, n, data)?));
        Ok(())
    };
    for w in history.windows(2) {
        push(tape, &|_| (w[0], w[1]))?;
    }
    for path in paths {
        if path.len() != len {
            return Err(LtnError::HorizonMismatch {
                got: path.len(),
                expected: len,
            });
        }
    }
    for t in 0..len {
        push(tape, &|col| (if t == 0 { origin } else { paths[col][t - 1] }, paths[col][t]))?;
    }
    Ok(out)
}

/// Scores in `(0, 1)` for each proposal, as a `[N]` node.
pub fn score_var(
    tape: &mut Tape<'_>,
    proposals: &[TrajectoryProposal],
    history: &[Point],
    v_i: Var,
    p: &ClassifierParams,
) -> Result<Var> {
    if proposals.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let n = proposals.len();
    let paths: Vec<&[Point]> = proposals.iter().map(|q| q.positions.as_slice()).collect();
    let seq = proposal_inputs(tape, &paths, history)?;
    let mut h = tape.constant(Tensor::zeros(&[p.gru.hidden_dim, n]));
    for x in seq {
        h = gru_step(tape, x, h, &p.gru)?;
    }
    let w_ph = tape.param(p.w_ph);
    let w_pv = tape.param(p.w_pv);
    let b_p = tape.param(p.b_p);
    let w_o = tape.param(p.w_o);
    let b_o = tape.param(p.b_o);
    let cond = tape.matmul(w_pv, v_i)?;
    let cond = tape.add(cond, b_p)?;
    let hid = tape.matmul(w_ph, h)?;
    let hid = tape.add_bias(hid, cond)?;
    let hid = tape.tanh(hid);
    let logit = tape.matmul(w_o, hid)?;
    let logit = tape.add_bias(logit, b_o)?;
    let logit = tape.reshape(logit, &[n])?;
    Ok(tape.sigmoid(logit))
}

/// Writes scores into `proposals`.
pub fn score_proposals(
    tape: &mut Tape<'_>,
    proposals: &mut [TrajectoryProposal],
    history: &[Point],
    v_i: Var,
    p: &ClassifierParams,
) -> Result<Var> {
    let s = score_var(tape, proposals, history, v_i, p)?;
    for (q, &v) in proposals.iter_mut().zip(tape.value(s).data()) {
        q.score = Some(v);
    }
    Ok(s)
}

fn clamp_score(x: f64) -> f64 {
    x.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// `-w (y log x + (1 - y) log(1 - x))` for one proposal.
pub fn bce_term(score: f64, label: bool, w: f64) -> f64 {
    let x = clamp_score(score);
    -w * if label { x.ln() } else { (1.0 - x).ln() }
}

/// Mean of the per-proposal weighted BCE terms.
pub fn classification_loss(scores: &[f64], labels: &[bool], w: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(LtnError::HorizonMismatch {
            got: labels.len(),
            expected: scores.len(),
        });
    }
    Ok(scores.iter().zip(labels).map(|(&s, &y)| bce_term(s, y, w)).sum::<f64>() / scores.len() as f64)
}

/// Differentiable [`classification_loss`] with `w = exp(log_w)`.
pub fn classification_loss_var(tape: &mut Tape<'_>, scores: Var, labels: &[bool], log_w: Var) -> Result<Var> {
    let n = tape.shape(scores).iter().product::<usize>();
    if n != labels.len() || n == 0 {
        return Err(LtnError::HorizonMismatch {
            got: labels.len(),
            expected: n,
        });
    }
    // Per-proposal log-likelihood of the label, with the clamp's zero slope
    // outside the clamp range.
    let x = tape.value(scores).data().to_vec();
    let ys: Vec<bool> = labels.to_vec();
    let vals: Vec<f64> = x
        .iter()
        .zip(&ys)
        .map(|(&s, &y)| {
            let c = clamp_score(s);
            if y {
                c.ln()
            } else {
                (1.0 - c).ln()
            }
        })
        .collect();
    let ll = tape.custom(
        &[scores],
        Tensor::vector(vals),
        Arc::new(move |inputs, _out, g| {
            let x = inputs[0].data();
            let grad = x
                .iter()
                .zip(&ys)
                .zip(g)
                .map(|((&s, &y), &gi)| {
                    if !(SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&s) {
                        0.0
                    } else if y {
                        gi / s
                    } else {
                        -gi / (1.0 - s)
                    }
                })
                .collect();
            vec![grad]
        }),
    );
    let mean = tape.mean(ll);
    let w = tape.exp(log_w);
    let wl = tape.mul(w, mean)?;
    Ok(tape.neg(wl))
}

fn rank(a: &TrajectoryProposal, b: &TrajectoryProposal) -> Ordering {
    let sa = a.score.unwrap_or(f64::NEG_INFINITY);
    let sb = b.score.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa)
        .then_with(|| {
            let da = a.avg_distance.unwrap_or(f64::INFINITY);
            let db = b.avg_distance.unwrap_or(f64::INFINITY);
            da.total_cmp(&db)
        })
        .then_with(|| a.index.cmp(&b.index))
}

/// The `k` best proposals by descending score. Ties go to the lower average
/// distance (unknown counts as infinite), then the lower index.
pub fn select_final_trajectory(proposals: &[TrajectoryProposal], k: usize) -> Result<Vec<TrajectoryProposal>> {
    if k > proposals.len() {
        return Err(LtnError::Invalid(format!(
            "cannot select {k} of {} proposals",
            proposals.len()
        )));
    }
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank);
    sorted.truncate(k);
    Ok(sorted)
}

//! History, social, future and map encoders.
//!
//! Every trajectory is fed as per-step features `[dx, dy, vx, vy]`: position
//! relative to the target's last observed position and the per-frame
//! displacement (zero at the first step unless a preceding point is known).

use std::sync::Arc;

use rand::Rng;

use crate::cells::{encode_sequence, LstmParams};
use crate::config::ModelConfig;
use crate::error::{LtnError, Result};
use crate::scene::{MapPatch, Point, PredictionInstance};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const FEATURE_DIM: usize = 4;

/// Additive attention `v^T tanh(W_q q + W_k k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_q: store.uniform(format!("{prefix}.w_q"), attn_dim, query_dim, rng),
            w_k: store.uniform(format!("{prefix}.w_k"), attn_dim, key_dim, rng),
            v: store.uniform(format!("{prefix}.v"), 1, attn_dim, rng),
        }
    }
}

/// Two 3x3 stride-2 convolutions (padding 1) and a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MapConvParams {
    pub patch_cells: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl MapConvParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        let o2 = conv_out(conv_out(cfg.patch_cells));
        Self {
            patch_cells: cfg.patch_cells,
            conv1_channels: c1,
            conv2_channels: c2,
            w1: store.uniform(format!("{prefix}.w1"), c1, 9, rng),
            b1: store.zeros(format!("{prefix}.b1"), &[c1]),
            w2: store.uniform(format!("{prefix}.w2"), c2, c1 * 9, rng),
            b2: store.zeros(format!("{prefix}.b2"), &[c2]),
            w3: store.uniform(format!("{prefix}.w3"), cfg.map_dim, c2 * o2 * o2, rng),
            b3: store.zeros(format!("{prefix}.b3"), &[cfg.map_dim]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub history_lstm: LstmParams,
    pub neighbor_lstm: LstmParams,
    pub future_lstm: LstmParams,
    pub neighbor_future_lstm: LstmParams,
    pub attention: AttentionParams,
    pub future_attention: AttentionParams,
    pub map: Option<MapConvParams>,
    pub map_dim: usize,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let rounds = cfg.encoder_rounds;
        let history_lstm = LstmParams::new(
            store,
            "enc.history",
            FEATURE_DIM,
            cfg.history_hidden,
            cfg.history_layers,
            rounds,
            false,
            rng,
        );
        let neighbor_lstm =
            LstmParams::new(store, "enc.neighbor", FEATURE_DIM, cfg.neighbor_hidden, 1, rounds, false, rng);
        let future_lstm = LstmParams::new(
            store,
            "enc.future",
            FEATURE_DIM,
            cfg.future_hidden,
            cfg.future_layers,
            rounds,
            true,
            rng,
        );
        let neighbor_future_lstm = LstmParams::new(
            store,
            "enc.neighbor_future",
            FEATURE_DIM,
            cfg.neighbor_hidden,
            1,
            rounds,
            false,
            rng,
        );
        let attention = AttentionParams::new(
            store,
            "enc.attention",
            cfg.history_hidden,
            cfg.neighbor_hidden,
            cfg.attention_dim,
            rng,
        );
        let future_attention = AttentionParams::new(
            store,
            "enc.future_attention",
            2 * cfg.future_hidden,
            cfg.neighbor_hidden,
            cfg.attention_dim,
            rng,
        );
        let map = cfg.use_map.then(|| MapConvParams::new(store, "enc.map", cfg, rng));
        Self {
            history_lstm,
            neighbor_lstm,
            future_lstm,
            neighbor_future_lstm,
            attention,
            future_attention,
            map,
            map_dim: cfg.map_dim,
        }
    }
}

/// Features of `points` relative to `origin`. `before` is the point preceding
/// `points[0]`, if known, for the first displacement.
pub fn step_features(points: &[Point], origin: Point, before: Option<Point>) -> Vec<[f64; FEATURE_DIM]> {
    points
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let prev = if t == 0 { before.unwrap_or(p) } else { points[t - 1] };
            let rel = p - origin;
            let vel = p - prev;
            [rel.x, rel.y, vel.x, vel.y]
        })
        .collect()
}

/// One `[4]` node per step.
fn single_inputs(tape: &mut Tape<'_>, feats: &[[f64; FEATURE_DIM]]) -> Vec<Var> {
    feats.iter().map(|f| tape.constant(Tensor::vector(f.to_vec()))).collect()
}

/// One `[4, K]` node per step, track `k` in column `k`. All tracks must have
/// the same length.
fn batched_inputs(tape: &mut Tape<'_>, tracks: &[Vec<[f64; FEATURE_DIM]>]) -> Result<Vec<Var>> {
    let k = tracks.len();
    let len = tracks[0].len();
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let mut data = vec![0.0; FEATURE_DIM * k];
        for (col, tr) in tracks.iter().enumerate() {
            for r in 0..FEATURE_DIM {
                data[r * k + col] = tr[t][r];
            }
        }
        out.push(tape.constant(Tensor::matrix(FEATURE_DIM, k, data)?));
    }
    Ok(out)
}

pub fn encode_agent_history(tape: &mut Tape<'_>, inst: &PredictionInstance, p: &EncoderParams) -> Result<Var> {
    let hist = &inst.target_history;
    if hist.len() < 2 {
        return Err(LtnError::HistoryTooShort {
            got: hist.len(),
            need: 2,
        });
    }
    let feats = step_features(hist, inst.last_observed(), None);
    let seq = single_inputs(tape, &feats);
    Ok(encode_sequence(tape, &seq, &p.history_lstm)?)
}

/// Attention-pooled encoding of a set of keys.
#[derive(Clone, Debug)]
pub struct SocialEncoding {
    pub pooled: Var,
    /// Softmax weights, one per neighbor in instance order.
    pub weights: Vec<f64>,
    pub empty: bool,
}

/// Pools the columns of `keys` (`[key_dim, K]`) with weights
/// `softmax_k(v^T tanh(W_q q + W_k k))`. Returns `(pooled, weights)`.
pub fn attend(tape: &mut Tape<'_>, query: Var, keys: Var, p: &AttentionParams) -> Result<(Var, Var)> {
    let count = tape.shape(keys)[1];
    let w_q = tape.param(p.w_q);
    let w_k = tape.param(p.w_k);
    let v = tape.param(p.v);
    let wq = tape.matmul(w_q, query)?;
    let wk = tape.matmul(w_k, keys)?;
    let pre = tape.add_bias(wk, wq)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(v, act)?;
    let scores = tape.reshape(scores, &[count])?;
    let weights = tape.softmax(scores);
    let pooled = tape.matmul(keys, weights)?;
    Ok((pooled, weights))
}

fn pool(
    tape: &mut Tape<'_>,
    query: Var,
    tracks: &[Vec<[f64; FEATURE_DIM]>],
    lstm: &LstmParams,
    attn: &AttentionParams,
) -> Result<SocialEncoding> {
    if tracks.is_empty() {
        let pooled = tape.constant(Tensor::zeros(&[lstm.output_dim()]));
        return Ok(SocialEncoding {
            pooled,
            weights: Vec::new(),
            empty: true,
        });
    }
    let seq = batched_inputs(tape, tracks)?;
    let keys = encode_sequence(tape, &seq, lstm)?;
    let (pooled, weights) = attend(tape, query, keys, attn)?;
    Ok(SocialEncoding {
        pooled,
        weights: tape.value(weights).data().to_vec(),
        empty: false,
    })
}

/// Neighbor histories pooled against `query`, the target's history encoding.
pub fn encode_social(
    tape: &mut Tape<'_>,
    inst: &PredictionInstance,
    query: Var,
    p: &EncoderParams,
) -> Result<SocialEncoding> {
    let origin = inst.last_observed();
    let tracks: Vec<_> = inst
        .neighbors
        .iter()
        .map(|n| step_features(&n.history, origin, None))
        .collect();
    pool(tape, query, &tracks, &p.neighbor_lstm, &p.attention)
}

pub fn encode_map(tape: &mut Tape<'_>, patch: &MapPatch, p: &MapConvParams) -> Result<Var> {
    let n = patch.size;
    if patch.cells.len() != n * n {
        return Err(LtnError::NonSquarePatch {
            size: n,
            cells: patch.cells.len(),
        });
    }
    if n != p.patch_cells {
        return Err(LtnError::PatchSize {
            got: n,
            expected: p.patch_cells,
        });
    }
    let (c1, c2) = (p.conv1_channels, p.conv2_channels);
    let o1 = conv_out(n);
    let o2 = conv_out(o1);

    let mut cols = vec![0.0; 9 * o1 * o1];
    for i in 0..o1 {
        for j in 0..o1 {
            for ki in 0..3 {
                for kj in 0..3 {
                    let (r, c) = ((2 * i + ki) as i64 - 1, (2 * j + kj) as i64 - 1);
                    if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
                        cols[(ki * 3 + kj) * o1 * o1 + i * o1 + j] = patch.at(r as usize, c as usize);
                    }
                }
            }
        }
    }
    let cols = tape.constant(Tensor::matrix(9, o1 * o1, cols)?);
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let h1 = tape.matmul(w1, cols)?;
    let h1 = tape.add_bias(h1, b1)?;
    let h1 = tape.relu(h1);
    let flat1 = tape.reshape(h1, &[c1 * o1 * o1])?;

    let mut index = vec![None; c1 * 9 * o2 * o2];
    for ch in 0..c1 {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = ch * 9 + ki * 3 + kj;
                for i in 0..o2 {
                    for j in 0..o2 {
                        let (r, c) = ((2 * i + ki) as i64 - 1, (2 * j + kj) as i64 - 1);
                        if r >= 0 && c >= 0 && (r as usize) < o1 && (c as usize) < o1 {
                            index[row * o2 * o2 + i * o2 + j] =
                                Some(ch * o1 * o1 + r as usize * o1 + c as usize);
                        }
                    }
                }
            }
        }
    }
    let cols2 = tape.gather(flat1, Arc::from(index), &[c1 * 9, o2 * o2])?;
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let h2 = tape.matmul(w2, cols2)?;
    let h2 = tape.add_bias(h2, b2)?;
    let h2 = tape.relu(h2);
    let flat2 = tape.reshape(h2, &[c2 * o2 * o2])?;
    let w3 = tape.param(p.w3);
    let b3 = tape.param(p.b3);
    let out = tape.matmul(w3, flat2)?;
    Ok(tape.add_bias(out, b3)?)
}

/// The complete history tensor and its parts.
#[derive(Clone, Debug)]
pub struct HistoryEncoding {
    pub v_i: Var,
    pub agent: Var,
    pub social: SocialEncoding,
    /// Map encoding enabled but the instance had no map.
    pub map_missing: bool,
}

pub fn encode_history(tape: &mut Tape<'_>, inst: &PredictionInstance, p: &EncoderParams) -> Result<HistoryEncoding> {
    let agent = encode_agent_history(tape, inst, p)?;
    let social = encode_social(tape, inst, agent, p)?;
    let mut parts = vec![agent, social.pooled];
    let mut map_missing = false;
    if let Some(mp) = &p.map {
        match inst.map_patch.as_ref().filter(|m| m.has_map) {
            Some(patch) => parts.push(encode_map(tape, patch, mp)?),
            None => {
                map_missing = true;
                parts.push(tape.constant(Tensor::zeros(&[p.map_dim])));
            }
        }
    }
    let v_i = tape.concat(&parts)?;
    Ok(HistoryEncoding {
        v_i,
        agent,
        social,
        map_missing,
    })
}

/// The complete future tensor plus the bidirectional agent-future encoding.
#[derive(Clone, Debug)]
pub struct FutureEncoding {
    pub v_f: Var,
    pub agent: Var,
    pub social: SocialEncoding,
}

pub fn encode_future(tape: &mut Tape<'_>, inst: &PredictionInstance, p: &EncoderParams) -> Result<FutureEncoding> {
    let future = inst.target_future.as_ref().ok_or(LtnError::MissingFuture)?;
    let origin = inst.last_observed();
    let feats = step_features(future, origin, Some(origin));
    let seq = single_inputs(tape, &feats);
    let agent = encode_sequence(tape, &seq, &p.future_lstm)?;
    let tracks: Vec<_> = inst
        .neighbors
        .iter()
        .filter_map(|n| {
            let fut = n.future.as_ref()?;
            Some(step_features(fut, origin, n.history.last().copied()))
        })
        .collect();
    let social = pool(tape, agent, &tracks, &p.neighbor_future_lstm, &p.future_attention)?;
    let v_f = tape.concat(&[agent, social.pooled])?;
    Ok(FutureEncoding { v_f, agent, social })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scene::{Category, Horizon, NeighborTrack};
    use crate::tensor::grad_check_params;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            history_hidden: 6,
            history_layers: 2,
            neighbor_hidden: 3,
            future_hidden: 4,
            attention_dim: 5,
            encoder_rounds: 3,
            conv1_channels: 2,
            conv2_channels: 3,
            map_dim: 4,
            use_map: true,
            ..ModelConfig::default()
        }
    }

    fn rand_track(rng: &mut ChaCha8Rng, len: usize) -> Vec<Point> {
        let mut p = Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        (0..len)
            .map(|_| {
                p = p + Point::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                p
            })
            .collect()
    }

    fn instance(rng: &mut ChaCha8Rng, neighbors: usize) -> PredictionInstance {
        let horizon = Horizon::from_frames(4, 3);
        PredictionInstance {
            agent_id: 1,
            category: Category::Pedestrian,
            start_frame: 0,
            horizon,
            dt: 0.4,
            target_history: rand_track(rng, 4),
            neighbors: (0..neighbors)
                .map(|k| NeighborTrack {
                    agent_id: 10 + k as u64,
                    category: Category::Pedestrian,
                    history: rand_track(rng, 4),
                    future: Some(rand_track(rng, 3)),
                })
                .collect(),
            map_patch: Some(MapPatch {
                size: 8,
                cells: (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
                has_map: true,
            }),
            target_future: Some(rand_track(rng, 3)),
        }
    }

    fn setup(seed: u64) -> (ParamStore, EncoderParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = EncoderParams::new(&mut store, &small_cfg(), &mut rng);
        (store, p, rng)
    }

    #[test]
    fn features_are_relative_with_displacement() {
        let pts = [Point::new(1.0, 1.0), Point::new(2.0, 1.5)];
        let f = step_features(&pts, Point::new(2.0, 1.5), None);
        assert_eq!(f[0], [-1.0, -0.5, 0.0, 0.0]);
        assert_eq!(f[1], [0.0, 0.0, 1.0, 0.5]);
        let g = step_features(&pts, Point::new(0.0, 0.0), Some(Point::new(0.5, 1.0)));
        assert_eq!(g[0], [1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn history_matches_manual_unroll() {
        let (store, p, mut rng) = setup(1);
        let inst = instance(&mut rng, 2);
        let mut tape = Tape::with_params(&store);
        let enc = encode_agent_history(&mut tape, &inst, &p).unwrap();
        let got = tape.value(enc).data().to_vec();

        let mut t2 = Tape::with_params(&store);
        let o = *inst.target_history.last().unwrap();
        let seq: Vec<Var> = (0..inst.target_history.len())
            .map(|t| {
                let q = inst.target_history[t];
                let prev = if t == 0 { q } else { inst.target_history[t - 1] };
                t2.constant(Tensor::vector(vec![q.x - o.x, q.y - o.y, q.x - prev.x, q.y - prev.y]))
            })
            .collect();
        let want = encode_sequence(&mut t2, &seq, &p.history_lstm).unwrap();
        for (a, b) in got.iter().zip(t2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got.len(), 6);
    }

    #[test]
    fn short_history_rejected() {
        let (store, p, mut rng) = setup(2);
        let mut inst = instance(&mut rng, 0);
        inst.target_history.truncate(1);
        let mut tape = Tape::with_params(&store);
        assert!(matches!(
            encode_agent_history(&mut tape, &inst, &p),
            Err(LtnError::HistoryTooShort { got: 1, need: 2 })
        ));
    }

    #[test]
    fn stationary_agents_share_encoding() {
        let (store, p, mut rng) = setup(3);
        let mut a = instance(&mut rng, 0);
        a.target_history = vec![Point::ORIGIN; 4];
        let mut b = a.clone();
        b.start_frame = 77;
        let mut tape = Tape::with_params(&store);
        let ea = encode_agent_history(&mut tape, &a, &p).unwrap();
        let eb = encode_agent_history(&mut tape, &b, &p).unwrap();
        assert_eq!(tape.value(ea).data(), tape.value(eb).data());
    }

    #[test]
    fn single_neighbor_pools_to_its_encoding() {
        let (store, p, mut rng) = setup(4);
        let inst = instance(&mut rng, 1);
        let mut tape = Tape::with_params(&store);
        let q = encode_agent_history(&mut tape, &inst, &p).unwrap();
        let s = encode_social(&mut tape, &inst, q, &p).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        let feats = step_features(&inst.neighbors[0].history, inst.last_observed(), None);
        let seq = single_inputs(&mut tape, &feats);
        let direct = encode_sequence(&mut tape, &seq, &p.neighbor_lstm).unwrap();
        for (a, b) in tape.value(s.pooled).data().iter().zip(tape.value(direct).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let (store, p, mut rng) = setup(5);
        let mut inst = instance(&mut rng, 2);
        inst.neighbors[1].history = inst.neighbors[0].history.clone();
        let mut tape = Tape::with_params(&store);
        let q = encode_agent_history(&mut tape, &inst, &p).unwrap();
        let s = encode_social(&mut tape, &inst, q, &p).unwrap();
        assert!((s.weights[0] - 0.5).abs() < 1e-15 && (s.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_neighbors_gives_flagged_zero() {
        let (store, p, mut rng) = setup(6);
        let inst = instance(&mut rng, 0);
        let mut tape = Tape::with_params(&store);
        let q = encode_agent_history(&mut tape, &inst, &p).unwrap();
        let s = encode_social(&mut tape, &inst, q, &p).unwrap();
        assert!(s.empty);
        assert_eq!(tape.value(s.pooled).data(), &[0.0; 3]);
    }

    #[test]
    fn attention_weights_match_softmax_oracle() {
        let (store, p, mut rng) = setup(7);
        let inst = instance(&mut rng, 3);
        let mut tape = Tape::with_params(&store);
        let q = encode_agent_history(&mut tape, &inst, &p).unwrap();
        let s = encode_social(&mut tape, &inst, q, &p).unwrap();
        let qv = tape.value(q).data().to_vec();

        let mv = |id: ParamId, x: &[f64]| -> Vec<f64> {
            let t = store.get(id);
            let cols = t.shape()[1];
            t.data().chunks(cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let v = store.get(p.attention.v).data().to_vec();
        let mut logits = Vec::new();
        for n in &inst.neighbors {
            let feats = step_features(&n.history, inst.last_observed(), None);
            let seq = single_inputs(&mut tape, &feats);
            let k = encode_sequence(&mut tape, &seq, &p.neighbor_lstm).unwrap();
            let kv = tape.value(k).data().to_vec();
            let (a, b) = (mv(p.attention.w_q, &qv), mv(p.attention.w_k, &kv));
            logits.push(a.iter().zip(&b).zip(&v).map(|((x, y), w)| w * (x + y).tanh()).sum::<f64>());
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (w, l) in s.weights.iter().zip(&logits) {
            assert!((w - (l - m).exp() / z).abs() < 1e-12);
        }
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn conv_oracle(store: &ParamStore, p: &MapConvParams, patch: &MapPatch) -> Vec<f64> {
        let conv = |input: &Vec<Vec<Vec<f64>>>, w: &Tensor, b: &Tensor, cout: usize| {
            let cin = input.len();
            let n = input[0].len();
            let o = (n - 1) / 2 + 1;
            let mut out = vec![vec![vec![0.0; o]; o]; cout];
            for (co, plane) in out.iter_mut().enumerate() {
                for (i, row) in plane.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        let mut acc = b.data()[co];
                        for (ci, src) in input.iter().enumerate().take(cin) {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let r = 2 * i as i64 + ki as i64 - 1;
                                    let c = 2 * j as i64 + kj as i64 - 1;
                                    if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 {
                                        continue;
                                    }
                                    acc += w.at(co, ci * 9 + ki * 3 + kj) * src[r as usize][c as usize];
                                }
                            }
                        }
                        *cell = acc.max(0.0);
                    }
                }
            }
            out
        };
        let n = patch.size;
        let input = vec![(0..n).map(|r| (0..n).map(|c| patch.at(r, c)).collect()).collect()];
        let h1 = conv(&input, store.get(p.w1), store.get(p.b1), p.conv1_channels);
        let h2 = conv(&h1, store.get(p.w2), store.get(p.b2), p.conv2_channels);
        let flat: Vec<f64> = h2.into_iter().flatten().flatten().collect();
        let w3 = store.get(p.w3);
        let b3 = store.get(p.b3);
        (0..w3.shape()[0])
            .map(|r| b3.data()[r] + (0..flat.len()).map(|c| w3.at(r, c) * flat[c]).sum::<f64>())
            .collect()
    }

    #[test]
    fn map_encoder_matches_loop_convolution() {
        let (mut store, p, mut rng) = setup(8);
        let mp = p.map.clone().unwrap();
        for id in [mp.b1, mp.b2, mp.b3] {
            let len = store.get(id).len();
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.set(id, Tensor::vector(v)).unwrap();
        }
        let inst = instance(&mut rng, 0);
        let patch = inst.map_patch.unwrap();
        let mut tape = Tape::with_params(&store);
        let e = encode_map(&mut tape, &patch, &mp).unwrap();
        let want = conv_oracle(&store, &mp, &patch);
        assert_eq!(want.len(), 4);
        for (a, b) in tape.value(e).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_patch_encodes_to_zero() {
        let (store, p, _) = setup(9);
        let patch = MapPatch {
            size: 8,
            cells: vec![0.0; 64],
            has_map: true,
        };
        let mut tape = Tape::with_params(&store);
        let e = encode_map(&mut tape, &patch, p.map.as_ref().unwrap()).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_patches_rejected() {
        let (store, p, _) = setup(10);
        let mut tape = Tape::with_params(&store);
        let ragged = MapPatch {
            size: 8,
            cells: vec![1.0; 60],
            has_map: true,
        };
        assert!(matches!(
            encode_map(&mut tape, &ragged, p.map.as_ref().unwrap()),
            Err(LtnError::NonSquarePatch { .. })
        ));
        let small = MapPatch {
            size: 4,
            cells: vec![1.0; 16],
            has_map: true,
        };
        assert!(matches!(
            encode_map(&mut tape, &small, p.map.as_ref().unwrap()),
            Err(LtnError::PatchSize { .. })
        ));
    }

    #[test]
    fn history_tensor_dimension_and_missing_map() {
        let (store, p, mut rng) = setup(11);
        let cfg = small_cfg();
        let mut inst = instance(&mut rng, 2);
        let mut tape = Tape::with_params(&store);
        let h = encode_history(&mut tape, &inst, &p).unwrap();
        assert_eq!(tape.shape(h.v_i), &[cfg.history_tensor_dim()]);
        assert!(!h.map_missing);
        inst.map_patch = None;
        let h2 = encode_history(&mut tape, &inst, &p).unwrap();
        assert!(h2.map_missing);
        assert_eq!(tape.shape(h2.v_i), &[cfg.history_tensor_dim()]);
        assert!(tape.value(h2.v_i).data()[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn future_matches_bidirectional_unroll() {
        let (store, p, mut rng) = setup(12);
        let inst = instance(&mut rng, 0);
        let mut tape = Tape::with_params(&store);
        let f = encode_future(&mut tape, &inst, &p).unwrap();
        assert!(f.social.empty);
        assert_eq!(tape.shape(f.v_f), &[small_cfg().future_tensor_dim()]);

        let fut = inst.target_future.as_ref().unwrap();
        let o = inst.last_observed();
        let feats: Vec<Vec<f64>> = (0..fut.len())
            .map(|t| {
                let prev = if t == 0 { o } else { fut[t - 1] };
                vec![fut[t].x - o.x, fut[t].y - o.y, fut[t].x - prev.x, fut[t].y - prev.y]
            })
            .collect();
        let mut t2 = Tape::with_params(&store);
        let run = |t2: &mut Tape<'_>, cells: &[crate::cells::LstmCellParams], order: Vec<usize>| {
            let cell = &cells[0];
            let zeros = t2.constant(Tensor::zeros(&[cell.hidden_dim]));
            let mut st = (zeros, zeros);
            for i in order {
                let x = t2.constant(Tensor::vector(feats[i].clone()));
                st = crate::cells::lstm_step(t2, x, st, cell).unwrap();
            }
            t2.value(st.0).data().to_vec()
        };
        let mut want = run(&mut t2, &p.future_lstm.forward, (0..fut.len()).collect());
        want.extend(run(&mut t2, p.future_lstm.backward.as_ref().unwrap(), (0..fut.len()).rev().collect()));
        for (a, b) in tape.value(f.agent).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn future_requires_ground_truth() {
        let (store, p, mut rng) = setup(13);
        let inst = instance(&mut rng, 1).without_future();
        let mut tape = Tape::with_params(&store);
        assert!(matches!(encode_future(&mut tape, &inst, &p), Err(LtnError::MissingFuture)));
    }

    #[test]
    fn encoders_pass_grad_check() {
        for seed in 0..3 {
            let (store, p, mut rng) = setup(100 + seed);
            let inst = instance(&mut rng, 2);
            let proj: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let report = grad_check_params(
                &store,
                |tape| {
                    let h = encode_history(tape, &inst, &p).map_err(to_tensor)?;
                    let f = encode_future(tape, &inst, &p).map_err(to_tensor)?;
                    let all = tape.concat(&[h.v_i, f.v_f])?;
                    let n = tape.shape(all)[0];
                    let w = tape.constant(Tensor::vector(proj[..n].to_vec()));
                    tape.dot(all, w)
                },
                1e-5,
                1e-4,
                6,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.failures());
        }
    }

    fn to_tensor(e: LtnError) -> crate::tensor::TensorError {
        crate::tensor::TensorError::Invalid(e.to_string())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn social_is_permutation_invariant(seed in 0u64..1000, k in 1usize..5) {
            let (store, p, mut rng) = setup(seed);
            let inst = instance(&mut rng, k);
            let mut rev = inst.clone();
            rev.neighbors.reverse();
            let mut tape = Tape::with_params(&store);
            let q = encode_agent_history(&mut tape, &inst, &p).unwrap();
            let a = encode_social(&mut tape, &inst, q, &p).unwrap();
            let b = encode_social(&mut tape, &rev, q, &p).unwrap();
            let sum: f64 = a.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(a.weights.iter().all(|&w| w >= 0.0));
            for (x, y) in tape.value(a.pooled).data().iter().zip(tape.value(b.pooled).data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

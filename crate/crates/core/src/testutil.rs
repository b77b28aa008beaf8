use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{Category, Horizon, NeighborTrack, Point, PredictionInstance};

/// Straight-line target with one parallel neighbor, `obs` observed and
/// `pred` future frames.
pub(crate) fn toy_instance_with(seed: u64, obs: usize, pred: usize) -> PredictionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Point::new(rng.random_range(0.2..0.5), rng.random_range(-0.2..0.2));
    let start = Point::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let offset = Point::new(1.0, 1.0);
    let span = |o: Point, from: usize, to: usize| -> Vec<Point> { (from..to).map(|t| o + v.scale(t as f64)).collect() };
    PredictionInstance {
        agent_id: 1,
        category: Category::Pedestrian,
        start_frame: 0,
        horizon: Horizon::from_frames(obs, pred),
        dt: 0.4,
        target_history: span(start, 0, obs),
        neighbors: vec![NeighborTrack {
            agent_id: 2,
            category: Category::Pedestrian,
            history: span(start + offset, 0, obs),
            future: Some(span(start + offset, obs, obs + pred)),
        }],
        map_patch: None,
        target_future: Some(span(start, obs, obs + pred)),
    }
}

pub(crate) fn toy_instance(seed: u64) -> PredictionInstance {
    toy_instance_with(seed, 8, 12)
}

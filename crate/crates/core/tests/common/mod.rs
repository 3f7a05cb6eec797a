#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialcircle::data::normalize_case;
use socialcircle::model::{case_loss, Bound, ModelConfig, ModelError, ParameterStore};
use socialcircle::tensor::grad_check;
use socialcircle::{Graph, Neighbor, Point, PredictionCase, Unit, Var};

pub fn random_walk(rng: &mut impl Rng, start: Point, n: usize) -> Vec<Point> {
    let mut p = start;
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed: f64 = rng.gen_range(0.0..0.6);
    (0..n)
        .map(|_| {
            let out = p;
            p = [
                p[0] + speed * heading.cos() + rng.gen_range(-0.05..0.05),
                p[1] + speed * heading.sin() + rng.gen_range(-0.05..0.05),
            ];
            out
        })
        .collect()
}

/// A case with a random-walk target and `n_neighbors` random-walk neighbors.
pub fn random_case(
    rng: &mut impl Rng,
    id: usize,
    n_neighbors: usize,
    t_h: usize,
    t_f: usize,
) -> PredictionCase {
    let origin = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
    let full = random_walk(rng, origin, t_h + t_f);
    let neighbors = (0..n_neighbors)
        .map(|j| {
            let start = [
                origin[0] + rng.gen_range(-6.0..6.0),
                origin[1] + rng.gen_range(-6.0..6.0),
            ];
            Neighbor {
                agent_id: format!("n{j}"),
                ordinal: j + 1,
                window: random_walk(rng, start, t_h),
                manual: false,
            }
        })
        .collect();
    PredictionCase {
        case_id: format!("case-{id}"),
        scene_id: "random".into(),
        target_id: "t".into(),
        observed: full[..t_h].to_vec(),
        future: Some(full[t_h..].to_vec()),
        neighbors,
        unit: Unit::Meters,
    }
}

/// Max relative finite-difference error over every parameter of `config`,
/// plus the largest analytic key-bias gradient. Softmax ignores a constant
/// shift along a query row, so `attn.bk` has an identically zero gradient and
/// only an absolute check makes sense for it.
pub fn end_to_end_grad_error(config: &ModelConfig, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = normalize_case(&random_case(&mut rng, 0, 5, config.t_h, config.t_f)).0;
    // Random biases move every ReLU input off its kink at zero.
    let mut params = ParameterStore::init(config, seed).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let noise: Vec<f64> = (0..config.noise_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, &params, true);
    let loss = case_loss(&mut graph, &bound, config, &case, Some(&noise)).unwrap();
    graph.backward(loss).unwrap();
    let mut key_bias = 0.0f64;
    for (name, var) in bound.iter() {
        if name.ends_with("attn.bk") {
            let g = graph.grad(*var).unwrap();
            key_bias = g.data().iter().fold(key_bias, |m, v| m.max(v.abs()));
        }
    }

    let mut worst = 0.0f64;
    for name in params.names().filter(|n| !n.ends_with("attn.bk")) {
        let f = |g: &mut Graph, v: Var| {
            let mut bound = Bound::new(g, &params, false);
            bound.rebind(name, v);
            case_loss(g, &bound, config, &case, Some(&noise)).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        };
        worst = worst.max(grad_check(f, params.get(name).unwrap(), 1e-5).unwrap());
    }
    (worst, key_bias)
}

//! Central finite differences on a tiny hierarchical model.

use attrseg::aggregator::{Aggregator, AggregatorConfig, Strategy, TextInput};
use attrseg::encoders::AttributeTokens;
use attrseg::mask::{compute_logits_var, upsample_var, MaskHeadConfig};
use attrseg::params::ParamId;
use attrseg::tape::{Mat, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{randomize, random_dense, to_mat};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
/// Blocks whose exact gradient vanishes (softmax shift invariance) leave
/// only rounding noise, so norms are floored.
pub const FLOOR: f64 = 1e-6;

pub struct Problem {
    pub visual: Mat,
    pub text: TextInput,
    pub readout_token: Mat,
    pub readout_visual: Mat,
    pub target: Mat,
}

pub fn tiny_model(strategy: Strategy, seed: u64) -> Aggregator {
    let cfg = AggregatorConfig {
        stage_cluster_counts: vec![3, 1],
        fusion_layers_per_stage: 1,
        d: 8,
        heads: 2,
    };
    let mut model = Aggregator::new(strategy, cfg, seed).unwrap();
    // Move away from the initializer so no block sits at an exact zero.
    randomize(&mut model.params, &mut ChaCha8Rng::seed_from_u64(seed + 100), 0.5);
    model
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = to_mat(&random_dense(&mut rng, 4, 8));
    let sentence = to_mat(&random_dense(&mut rng, 1, 8));
    Problem {
        visual: to_mat(&random_dense(&mut rng, 4, 8)),
        text: TextInput {
            tokens: AttributeTokens {
                data: tokens,
                labels: (0..4).map(|i| format!("a{i}")).collect(),
            },
            sentence,
        },
        readout_token: to_mat(&random_dense(&mut rng, 1, 8)),
        readout_visual: to_mat(&random_dense(&mut rng, 4, 8)),
        target: Mat::from_shape_fn((4, 4), |(i, j)| f64::from(u8::from((i + j) % 3 == 0))),
    }
}

/// Scalar loss and, when `grads` is set, the tape gradients per parameter.
pub fn evaluate(model: &Aggregator, pb: &Problem, through_head: bool, grads: bool) -> (f64, Vec<Mat>) {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t, grads);
    let v = t.constant(pb.visual.clone());
    let out = model.forward(&mut t, &p, v, &pb.text).unwrap();
    let loss = if through_head {
        let head = MaskHeadConfig {
            temperature: 0.5,
            ..MaskHeadConfig::default()
        };
        let logits = compute_logits_var(&mut t, out.visual, out.token, (2, 2), &head).unwrap();
        let up = upsample_var(&mut t, logits, (4, 4), head.upsampling);
        let z = t.scale(up, 1.0 / head.temperature);
        t.bce_with_logits(z, pb.target.clone())
    } else {
        let rt = t.constant(pb.readout_token.clone());
        let rv = t.constant(pb.readout_visual.clone());
        let a = t.mul(out.token, rt);
        let b = t.mul(out.visual, rv);
        let a = t.sum(a);
        let b = t.sum(b);
        t.add(a, b)
    };
    let value = t.value(loss)[[0, 0]];
    if !grads {
        return (value, Vec::new());
    }
    let g = t.backward(loss);
    (value, p.collect_grads(&t, &g))
}

/// Per-block relative error `‖fd − tape‖ / max(‖fd‖, ‖tape‖, FLOOR)` of
/// central differences against the tape, for every parameter block.
pub fn block_errors(strategy: Strategy, through_head: bool) -> Vec<(String, f64)> {
    let mut model = tiny_model(strategy, 3);
    let pb = problem(4);
    let (_, analytic) = evaluate(&model, &pb, through_head, true);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut errors = Vec::new();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let mut fd = Mat::zeros(grad.dim());
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.params.get(id)[[r, c]];
            model.params.get_mut(id)[[r, c]] = orig + STEP;
            let up = evaluate(&model, &pb, through_head, false).0;
            model.params.get_mut(id)[[r, c]] = orig - STEP;
            let down = evaluate(&model, &pb, through_head, false).0;
            model.params.get_mut(id)[[r, c]] = orig;
            fd[[r, c]] = (up - down) / (2.0 * STEP);
        }
        let diff = (&fd - grad).mapv(|x| x * x).sum().sqrt();
        let norm = grad.mapv(|x| x * x).sum().sqrt().max(fd.mapv(|x| x * x).sum().sqrt());
        let rel = diff / norm.max(FLOOR);
        errors.push((model.params.name(id).to_string(), rel));
    }
    errors
}


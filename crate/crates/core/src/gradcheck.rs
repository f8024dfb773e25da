//! Finite-difference checks of every analytic gradient in the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_gradient, max_relative_error, stack, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::Graph;
use crate::gcn::{build_primary_capsules, glorot, CapsuleLayerState, GcnParams};
use crate::model::Model;
use crate::routing::{em_routing, BoundRouting, RoutingConfig, RoutingParams};
use crate::train::loss_and_gradients;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradcheckEntry {
    pub group: String,
    pub values: usize,
    pub max_rel_error: f64,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Five nodes, two triangles sharing node 2 plus a pendant, LDP features, class 1.
pub fn fixture_graph() -> Graph {
    Graph::with_ldp_features(5, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)], 1).expect("valid fixture")
}

fn entry(group: impl Into<String>, analytic: &Tensor, numeric: &Tensor) -> GradcheckEntry {
    GradcheckEntry {
        group: group.into(),
        values: analytic.numel(),
        max_rel_error: max_relative_error(analytic, numeric),
    }
}

/// Gradient of the cross-entropy loss with respect to each parameter tensor
/// of a two-class model on [`fixture_graph`].
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64) -> Vec<GradcheckEntry> {
    let g = fixture_graph();
    let model = Model::init(cfg, g.feature_dim(), 2, seed).expect("valid config");
    let (_, _, grads) = loss_and_gradients(&model, &g).expect("forward pass");
    let loss_at = |m: &Model| {
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        crate::readout::cross_entropy(b.forward(&g).expect("forward pass").logits, g.label()).item()
    };
    let names = model.parameter_names();
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let numeric = finite_difference_gradient(
                |t| {
                    let mut probe = model.clone();
                    *probe.parameters_mut()[i] = t.clone();
                    loss_at(&probe)
                },
                p,
                STEP,
            );
            let analytic = Tensor::new(p.shape().to_vec(), grads[i].clone());
            entry(format!("model.{}", names[i]), &analytic, &numeric)
        })
        .collect()
}

fn bind_all<'t>(tape: &'t Tape, vals: &[Tensor], trainable: bool) -> Vec<Var<'t>> {
    vals.iter().map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }).collect()
}

/// `vals` is `[transforms, beta_a, beta_u, poses, activations]`.
fn routing_objective<'t>(
    tape: &'t Tape,
    vals: &[Tensor],
    trainable: bool,
    cfg: &RoutingConfig,
) -> (Var<'t>, Vec<Var<'t>>) {
    let vars = bind_all(tape, vals, trainable);
    let state = CapsuleLayerState { poses: vars[3], activations: vars[4] };
    let bound = BoundRouting { transforms: vars[0], beta_a: vars[1], beta_u: vars[2] };
    let out = em_routing(&state, &bound, cfg).output;
    (out.activations.sum() + out.poses.sum(), vars)
}

/// `sum(a_out) + sum(mu)` of one routing layer (n = 4, M = 2, two
/// iterations) with respect to its parameters and its inputs.
pub fn routing_gradcheck(seed: u64) -> Vec<GradcheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, d, m) = (4, 2, 3, 2);
    let params = RoutingParams {
        transforms: glorot(m * d, d, &mut rng).reshaped(vec![m, d, d]),
        beta_a: Tensor::vector((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        beta_u: Tensor::vector((0..m).map(|_| rng.gen_range(0.5..1.5)).collect()),
    };
    let poses = Tensor::new(vec![n, k, d], (0..n * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let acts = Tensor::vector((0..n).map(|_| rng.gen_range(0.1..1.0)).collect());
    let cfg = RoutingConfig::default();

    let inputs = [params.transforms.clone(), params.beta_a.clone(), params.beta_u.clone(), poses, acts];
    let tape = Tape::new();
    let (total, vars) = routing_objective(&tape, &inputs, true, &cfg);
    total.backward();
    let names = ["transforms", "beta_a", "beta_u", "input_poses", "input_activations"];
    (0..inputs.len())
        .map(|i| {
            let numeric = finite_difference_gradient(
                |t| {
                    let mut vals = inputs.to_vec();
                    vals[i] = t.clone();
                    let tape = Tape::new();
                    routing_objective(&tape, &vals, false, &cfg).0.item()
                },
                &inputs[i],
                STEP,
            );
            entry(format!("em-routing.{}", names[i]), &vars[i].grad().expect("reached"), &numeric)
        })
        .collect()
}

/// A weighted sum of primary-capsule poses with respect to every GCN filter.
pub fn gcn_gradcheck(seed: u64) -> Vec<GradcheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = fixture_graph();
    let p = GcnParams::init(g.feature_dim(), 4, 3, &mut rng);
    let weights = Tensor::new(vec![5, 3, 4], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let objective = |thetas: &[Tensor], trainable: bool| {
        let tape = Tape::new();
        let vars = bind_all(&tape, thetas, trainable);
        let caps = build_primary_capsules(&tape, &g, &vars, 1.0).expect("widths agree");
        let total = (caps.poses * tape.constant(weights.clone())).sum();
        if trainable {
            total.backward();
        }
        (total.item(), vars.iter().map(|v| v.grad()).collect::<Vec<_>>())
    };
    let (_, grads) = objective(&p.thetas, true);
    (0..p.thetas.len())
        .map(|l| {
            let numeric = finite_difference_gradient(
                |t| {
                    let mut thetas = p.thetas.clone();
                    thetas[l] = t.clone();
                    objective(&thetas, false).0
                },
                &p.thetas[l],
                STEP,
            );
            entry(format!("gcn-primary.theta{l}"), grads[l].as_ref().expect("reached"), &numeric)
        })
        .collect()
}

fn composite<'t>(v: Var<'t>, w: &Tensor) -> Var<'t> {
    let tape = v.tape();
    let h = v.matmul(tape.constant(w.clone())).logistic();
    let pos = v.square().add_scalar(0.5);
    let a = pos.ln() + pos.recip() - v.exp().scale(0.1) + v.relu() * v.ln_logistic();
    let b = stack(&[a.sum_axis(1), a.sum_axis(1).clamp_min(-1.0)], 1);
    h.log_softmax().sum() + b.mean() + a.select(1, 2).sum() / pos.sum()
}

/// A composite exercising every differentiable engine operation at once.
pub fn autodiff_gradcheck(seed: u64) -> Vec<GradcheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let w = Tensor::new(vec![4, 2], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    composite(leaf, &w).backward();
    let numeric = finite_difference_gradient(
        |t| {
            let tape = Tape::new();
            composite(tape.constant(t.clone()), &w).item()
        },
        &x,
        STEP,
    );
    vec![entry("autodiff.composite", &leaf.grad().expect("reached"), &numeric)]
}

/// Every check with the reference configuration.
pub fn run_suite(seed: u64) -> Vec<GradcheckEntry> {
    let mut out = autodiff_gradcheck(seed);
    out.extend(gcn_gradcheck(seed));
    out.extend(routing_gradcheck(seed));
    out.extend(model_gradcheck(&ModelConfig::default(), seed));
    out
}

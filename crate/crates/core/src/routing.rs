//! Capsule convolution by EM routing.
//!
//! Each lower capsule `i` votes for each higher capsule `j` through a learned
//! transform, `V_ij = c_i T_j`. The higher capsules are the components of a
//! diagonal Gaussian mixture fitted to the votes: the M-step weights the votes
//! by lower activation times posterior and refits means, variances and
//! activations; the E-step recomputes posteriors.
//!
//! `T_j` is shared across all lower capsules `i`, because the first routing
//! layer sees a different number of node capsules for every graph.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{stack, Tape, Tensor, Var};
use crate::gcn::{glorot, CapsuleLayerState};

/// Routing hyperparameters shared by all capsule-convolution layers.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoutingConfig {
    /// Inverse temperature of the activation logistic.
    pub lambda: f64,
    pub max_iter: usize,
    /// Floor applied to every per-dimension variance.
    pub variance_floor: f64,
    /// Use the raw mass `a_i R_ij` (instead of the normalised `r_ij`) in the
    /// cost and `beta_u` terms.
    pub use_unnormalized_mass: bool,
    /// Skip the E-step after the last M-step; it does not affect the outputs.
    pub skip_final_e_step: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self { lambda: 0.1, max_iter: 2, variance_floor: 1e-6, use_unnormalized_mass: false, skip_final_e_step: false }
    }
}

/// Learned parameters of one capsule-convolution layer with `M` outputs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoutingParams {
    /// `[M, d', d']`
    pub transforms: Tensor,
    /// `[M]`
    pub beta_a: Tensor,
    /// `[M]`
    pub beta_u: Tensor,
}

impl RoutingParams {
    pub fn init(outputs: usize, width: usize, rng: &mut impl Rng) -> Self {
        let transforms = (0..outputs).flat_map(|_| glorot(width, width, rng).into_data()).collect();
        Self {
            transforms: Tensor::new(vec![outputs, width, width], transforms),
            beta_a: Tensor::zeros(vec![outputs]),
            beta_u: Tensor::full(vec![outputs], 1.0),
        }
    }

    pub fn outputs(&self) -> usize {
        self.transforms.shape()[0]
    }
}

/// [`RoutingParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundRouting<'t> {
    pub transforms: Var<'t>,
    pub beta_a: Var<'t>,
    pub beta_u: Var<'t>,
}

impl<'t> BoundRouting<'t> {
    pub fn leaves(tape: &'t Tape, p: &RoutingParams) -> Self {
        Self {
            transforms: tape.leaf(p.transforms.clone()),
            beta_a: tape.leaf(p.beta_a.clone()),
            beta_u: tape.leaf(p.beta_u.clone()),
        }
    }

    pub fn constants(tape: &'t Tape, p: &RoutingParams) -> Self {
        Self {
            transforms: tape.constant(p.transforms.clone()),
            beta_a: tape.constant(p.beta_a.clone()),
            beta_u: tape.constant(p.beta_u.clone()),
        }
    }

    pub fn outputs(&self) -> usize {
        self.transforms.shape()[0]
    }

    pub fn as_vec(&self) -> Vec<Var<'t>> {
        vec![self.transforms, self.beta_a, self.beta_u]
    }
}

/// Votes grouped by output capsule: `per_output[j]` is `[n, k*d']`, row `i`
/// being `c_i T_j` flattened.
#[derive(Clone, Debug)]
pub struct Votes<'t> {
    pub per_output: Vec<Var<'t>>,
    pub pose_dims: (usize, usize),
}

impl<'t> Votes<'t> {
    pub fn inputs(&self) -> usize {
        self.per_output[0].shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.per_output.len()
    }

    /// All votes as one `[n, M, k, d']` value.
    pub fn stacked(&self) -> Var<'t> {
        let n = self.inputs();
        let (k, d) = self.pose_dims;
        stack(&self.per_output, 1).reshape(&[n, self.outputs(), k, d])
    }
}

/// `V_ij = c_i T_j` for every input `i` and output `j`.
///
/// Panics when the pose width and the transform extent disagree.
pub fn vote<'t>(input: &CapsuleLayerState<'t>, transforms: Var<'t>) -> Votes<'t> {
    let n = input.len();
    let (k, d) = input.pose_dims();
    let ts = transforms.shape();
    assert!(ts.len() == 3 && ts[1] == d && ts[2] == d, "transforms of shape {ts:?} do not match capsule width {d}");
    let rows = input.poses.reshape(&[n * k, d]);
    let per_output = (0..ts[0]).map(|j| rows.matmul(transforms.select(0, j)).reshape(&[n, k * d])).collect();
    Votes { per_output, pose_dims: (k, d) }
}

/// Outputs of one M-step.
#[derive(Clone, Debug)]
pub struct MStep<'t> {
    /// `[M]`, the logistic argument of each output activation.
    pub activation_logits: Var<'t>,
    /// `[M]`
    pub a_out: Var<'t>,
    /// `mu[j]` is `[k*d']`.
    pub mu: Vec<Var<'t>>,
    /// `sigma_sq[j]` is `[k*d']`, already floored.
    pub sigma_sq: Vec<Var<'t>>,
    /// `sq_dev[j]` is `[n, k*d']`, the squared deviations `(V_ij - mu_j)^2`.
    pub sq_dev: Vec<Var<'t>>,
    /// `r[j]` is `[n]`, the normalised contribution coefficients.
    pub r: Vec<Var<'t>>,
    /// Output capsules whose assignment mass was zero and fell back to uniform weights.
    pub degenerate: Vec<usize>,
}

/// Refits every Gaussian from the votes, weighted by `a_in[i] * R[i][j]`.
pub fn m_step<'t>(
    a_in: Var<'t>,
    r_post: Var<'t>,
    votes: &Votes<'t>,
    params: &BoundRouting<'t>,
    cfg: &RoutingConfig,
) -> MStep<'t> {
    let tape = a_in.tape();
    let n = votes.inputs();
    let dims = votes.pose_dims.0 * votes.pose_dims.1;
    let half_ln_2pi_plus_half = 0.5 + 0.5 * (2.0 * PI).ln();

    let m = votes.outputs();
    let (mut mus, mut sigmas, mut sq_devs, mut rs) =
        (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    let mut degenerate = Vec::new();
    let mut logits = Vec::with_capacity(m);
    for (j, v) in votes.per_output.iter().enumerate() {
        let mass = a_in * r_post.select(1, j);
        let total = mass.sum();
        let r = if total.item() > 0.0 {
            mass / total
        } else {
            log::debug!("output capsule {j} received no assignment mass; using uniform weights");
            degenerate.push(j);
            tape.constant(Tensor::full(vec![n], 1.0 / n as f64))
        };
        let r_row = r.reshape(&[1, n]);
        let mu = r_row.matmul(*v).reshape(&[dims]);
        let sq_dev = (*v - mu).square();
        let sigma_sq = r_row.matmul(sq_dev).reshape(&[dims]).clamp_min(cfg.variance_floor);

        let weight = if cfg.use_unnormalized_mass { total } else { r.sum() };
        // sum_h cost_j^h = sum_i r_ij * sum_h (ln sigma_h + 1/2 + ln(2 pi)/2)
        let cost = weight * sigma_sq.ln().scale(0.5).add_scalar(half_ln_2pi_plus_half).sum();
        let logit = (params.beta_a.select(0, j) - params.beta_u.select(0, j) * weight - cost).scale(cfg.lambda);

        logits.push(logit);
        mus.push(mu);
        sigmas.push(sigma_sq);
        sq_devs.push(sq_dev);
        rs.push(r);
    }
    let activation_logits = stack(&logits, 0);
    MStep {
        activation_logits,
        a_out: activation_logits.logistic(),
        mu: mus,
        sigma_sq: sigmas,
        sq_dev: sq_devs,
        r: rs,
        degenerate,
    }
}

/// Posterior `R[i][j]` of each vote under each Gaussian, weighted by `a_j`,
/// normalised over `j` in log space. Returns `[n, M]`.
pub fn e_step<'t>(fit: &MStep<'t>) -> Var<'t> {
    let tape = fit.a_out.tape();
    let ln_a = fit.activation_logits.ln_logistic();
    let columns: Vec<Var<'t>> = fit
        .sq_dev
        .iter()
        .zip(&fit.sigma_sq)
        .enumerate()
        .map(|(j, (sq_dev, sigma_sq))| {
            let dims = sigma_sq.shape()[0];
            let mahalanobis = sq_dev.matmul(sigma_sq.recip().reshape(&[dims, 1]));
            let norm =
                ln_a.select(0, j) - sigma_sq.ln().sum().scale(0.5) - tape.scalar(0.5 * dims as f64 * (2.0 * PI).ln());
            mahalanobis.scale(-0.5) + norm
        })
        .collect();
    let n = columns[0].shape()[0];
    let log_weights = stack(&columns, 1).reshape(&[n, columns.len()]);
    log_weights.log_softmax().exp()
}

/// Everything produced by a routing pass.
#[derive(Clone, Debug)]
pub struct RoutingOutcome<'t> {
    pub output: CapsuleLayerState<'t>,
    pub votes: Votes<'t>,
    /// Posterior from the final E-step (absent when it was skipped).
    pub posterior: Option<Var<'t>>,
    pub last_fit: MStep<'t>,
}

/// Full EM routing: uniform posterior, then `max_iter` rounds of M-step
/// followed by E-step. Outputs come from the last M-step.
pub fn em_routing<'t>(
    input: &CapsuleLayerState<'t>,
    params: &BoundRouting<'t>,
    cfg: &RoutingConfig,
) -> RoutingOutcome<'t> {
    assert!(cfg.max_iter >= 1, "max_iter must be at least 1");
    assert!(!input.is_empty(), "routing needs at least one input capsule");
    let tape = input.poses.tape();
    let votes = vote(input, params.transforms);
    let (n, m) = (votes.inputs(), votes.outputs());
    let mut posterior = tape.constant(Tensor::full(vec![n, m], 1.0 / m as f64));
    let mut fit = None;
    let mut final_posterior = None;
    for iter in 0..cfg.max_iter {
        let f = m_step(input.activations, posterior, &votes, params, cfg);
        if iter + 1 < cfg.max_iter || !cfg.skip_final_e_step {
            posterior = e_step(&f);
            final_posterior = Some(posterior);
        } else {
            final_posterior = None;
        }
        fit = Some(f);
    }
    let fit = fit.expect("at least one iteration");
    let (k, d) = votes.pose_dims;
    let poses = stack(&fit.mu, 0).reshape(&[m, k, d]);
    RoutingOutcome {
        output: CapsuleLayerState { poses, activations: fit.a_out },
        votes,
        posterior: final_posterior,
        last_fit: fit,
    }
}

/// Output capsule counts for `depth` routing layers ending in `num_classes`,
/// each layer three times wider than the next.
pub fn capsule_layer_sizes(depth: usize, num_classes: usize) -> Vec<usize> {
    let mut sizes = vec![num_classes; depth];
    for l in (0..depth.saturating_sub(1)).rev() {
        sizes[l] = 3 * sizes[l + 1];
    }
    sizes
}

/// Freshly initialised routing layers sized by [`capsule_layer_sizes`].
pub fn build_capsule_stack(depth: usize, num_classes: usize, width: usize, rng: &mut impl Rng) -> Vec<RoutingParams> {
    capsule_layer_sizes(depth, num_classes).into_iter().map(|m| RoutingParams::init(m, width, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state<'t>(tape: &'t Tape, poses: Tensor, acts: Vec<f64>) -> CapsuleLayerState<'t> {
        CapsuleLayerState { poses: tape.leaf(poses), activations: tape.leaf(Tensor::vector(acts)) }
    }

    fn identity_params(m: usize, d: usize) -> RoutingParams {
        let transforms = (0..m).flat_map(|_| Tensor::eye(d).into_data()).collect();
        RoutingParams {
            transforms: Tensor::new(vec![m, d, d], transforms),
            beta_a: Tensor::zeros(vec![m]),
            beta_u: Tensor::full(vec![m], 1.0),
        }
    }

    #[test]
    fn layer_sizes_follow_times_three_rule() {
        assert_eq!(capsule_layer_sizes(2, 2), vec![6, 2]);
        assert_eq!(capsule_layer_sizes(2, 3), vec![9, 3]);
        assert_eq!(capsule_layer_sizes(3, 2), vec![18, 6, 2]);
    }

    #[test]
    fn identity_and_zero_votes() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses = glorot(3 * 2, 4, &mut rng).reshaped(vec![3, 2, 4]);
        let s = state(&tape, poses.clone(), vec![0.2, 0.3, 0.5]);
        let p = BoundRouting::constants(&tape, &identity_params(2, 4));
        let votes = vote(&s, p.transforms);
        for v in &votes.per_output {
            assert_eq!(v.to_tensor().data(), poses.data());
        }
        let zero = state(&tape, Tensor::zeros(vec![3, 2, 4]), vec![0.2, 0.3, 0.5]);
        let p = BoundRouting::constants(&tape, &RoutingParams::init(2, 4, &mut rng));
        for v in &vote(&zero, p.transforms).per_output {
            assert!(v.to_tensor().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_output_posterior_is_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = state(&tape, glorot(8, 3, &mut rng).reshaped(vec![4, 2, 3]), vec![0.25; 4]);
        let p = BoundRouting::constants(&tape, &RoutingParams::init(1, 3, &mut rng));
        let out = em_routing(&s, &p, &RoutingConfig::default());
        assert!(out.posterior.unwrap().to_tensor().data().iter().all(|&r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        // Two identical components see identical votes -> posterior (0.5, 0.5).
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = state(&tape, glorot(6, 3, &mut rng).reshaped(vec![3, 2, 3]), vec![0.5, 0.3, 0.2]);
        let p = BoundRouting::constants(&tape, &identity_params(2, 3));
        let r = em_routing(&s, &p, &RoutingConfig::default()).posterior.unwrap().to_tensor();
        assert!(r.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_input_floors_variance() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = glorot(2, 3, &mut rng).reshaped(vec![1, 2, 3]);
        let s = state(&tape, poses.clone(), vec![1.0]);
        let p = BoundRouting::constants(&tape, &identity_params(1, 3));
        let cfg = RoutingConfig::default();
        let out = em_routing(&s, &p, &cfg);
        assert_eq!(out.output.poses.to_tensor().data(), poses.data());
        let fit = &out.last_fit;
        assert!(fit.sigma_sq[0].to_tensor().data().iter().all(|&v| v == cfg.variance_floor));
        assert!((fit.r[0].sum().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_common_vote() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = glorot(2, 3, &mut rng).into_data();
        let poses = Tensor::new(vec![3, 2, 3], [one.clone(), one.clone(), one].concat());
        let s = state(&tape, poses, vec![0.2, 0.2, 0.6]);
        let params = RoutingParams::init(3, 3, &mut rng);
        let p = BoundRouting::constants(&tape, &params);
        let out = em_routing(&s, &p, &RoutingConfig::default());
        let votes = vote(&s, p.transforms);
        for j in 0..3 {
            let expected = votes.per_output[j].select(0, 0).to_tensor();
            let got = out.last_fit.mu[j].to_tensor();
            assert!(got.max_abs_diff(&expected) < 1e-12);
            assert!(out.last_fit.sigma_sq[j].to_tensor().data().iter().all(|&v| v == 1e-6));
        }
    }

    #[test]
    fn zero_mass_falls_back_to_uniform() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = state(&tape, glorot(6, 3, &mut rng).reshaped(vec![3, 2, 3]), vec![0.0; 3]);
        let p = BoundRouting::constants(&tape, &RoutingParams::init(2, 3, &mut rng));
        let out = em_routing(&s, &p, &RoutingConfig::default());
        assert_eq!(out.last_fit.degenerate, vec![0, 1]);
        for r in &out.last_fit.r {
            assert!(r.to_tensor().data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn skipping_final_e_step_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let poses = glorot(10, 4, &mut rng).reshaped(vec![5, 2, 4]);
        let params = RoutingParams::init(2, 4, &mut rng);
        let run = |skip: bool| {
            let tape = Tape::new();
            let s = state(&tape, poses.clone(), vec![0.1, 0.2, 0.3, 0.2, 0.2]);
            let p = BoundRouting::constants(&tape, &params);
            let cfg = RoutingConfig { skip_final_e_step: skip, ..Default::default() };
            let out = em_routing(&s, &p, &cfg);
            (out.output.poses.to_tensor(), out.output.activations.to_tensor(), out.posterior.is_some())
        };
        let (p1, a1, has1) = run(false);
        let (p2, a2, has2) = run(true);
        assert_eq!((p1, a1), (p2, a2));
        assert!(has1 && !has2);
    }
}

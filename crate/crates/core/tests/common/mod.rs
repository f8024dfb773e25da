//! Plain-loop reference implementations shared by the integration tests.
//! Nothing here touches the tape.

#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use capsgnn::data::Graph;
use capsgnn::gcn::CapsuleLayerState;
use capsgnn::routing::{em_routing, BoundRouting, RoutingConfig, RoutingParams};
use capsgnn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One routing layer's inputs and parameters as nested vectors.
#[derive(Clone, Debug)]
pub struct RoutingCase {
    /// `[n][k][d]`
    pub poses: Vec<Vec<Vec<f64>>>,
    pub acts: Vec<f64>,
    /// `[M][d][d]`
    pub transforms: Vec<Vec<Vec<f64>>>,
    pub beta_a: Vec<f64>,
    pub beta_u: Vec<f64>,
}

impl RoutingCase {
    pub fn random(seed: u64, n: usize, k: usize, d: usize, m: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.gen_range(lo..hi)).collect()).collect()
        };
        let poses = (0..n).map(|_| mat(k, d, -2.0, 2.0)).collect();
        let transforms = (0..m).map(|_| mat(d, d, -1.0, 1.0)).collect();
        let acts = mat(1, n, 0.05, 1.0).remove(0);
        let beta_a = mat(1, m, -1.0, 1.0).remove(0);
        let beta_u = mat(1, m, 0.0, 2.0).remove(0);
        Self { poses, acts, transforms, beta_a, beta_u }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.poses.len(), self.poses[0].len(), self.poses[0][0].len(), self.transforms.len())
    }

    pub fn poses_tensor(&self) -> Tensor {
        let (n, k, d, _) = self.dims();
        Tensor::new(vec![n, k, d], self.poses.iter().flatten().flatten().copied().collect())
    }

    pub fn params(&self) -> RoutingParams {
        let (_, _, d, m) = self.dims();
        RoutingParams {
            transforms: Tensor::new(vec![m, d, d], self.transforms.iter().flatten().flatten().copied().collect()),
            beta_a: Tensor::vector(self.beta_a.clone()),
            beta_u: Tensor::vector(self.beta_u.clone()),
        }
    }
}

/// Result of one reference routing pass.
#[derive(Clone, Debug)]
pub struct Routed {
    pub a_out: Vec<f64>,
    /// `[M][k*d]`
    pub mu: Vec<Vec<f64>>,
    /// `[M][k*d]`
    pub sigma_sq: Vec<Vec<f64>>,
    /// `[n][M]` from the final E-step.
    pub posterior: Vec<Vec<f64>>,
    /// `[M][n]` from the final M-step.
    pub r: Vec<Vec<f64>>,
}

/// `V[i][j]` flattened to `k*d`, each row of `c_i` times `T_j`.
pub fn votes(case: &RoutingCase) -> Vec<Vec<Vec<f64>>> {
    let (n, k, d, m) = case.dims();
    let mut v = vec![vec![vec![0.0; k * d]; m]; n];
    for i in 0..n {
        for j in 0..m {
            for row in 0..k {
                for col in 0..d {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += case.poses[i][row][t] * case.transforms[j][t][col];
                    }
                    v[i][j][row * d + col] = s;
                }
            }
        }
    }
    v
}

/// Gaussian-mixture posterior computed directly from densities.
pub fn direct_e_step(a: &[f64], mu: &[Vec<f64>], sigma_sq: &[Vec<f64>], v: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = a.len();
    v.iter()
        .map(|vi| {
            let weighted: Vec<f64> = (0..m)
                .map(|j| {
                    let mut p = a[j];
                    for h in 0..mu[j].len() {
                        let s2 = sigma_sq[j][h];
                        let z = vi[j][h] - mu[j][h];
                        p *= (-z * z / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = weighted.iter().sum();
            weighted.iter().map(|w| w / total).collect()
        })
        .collect()
}

/// Line-by-line EM routing: `R = 1/M`, then `max_iter` rounds of M-step and E-step.
pub fn reference_routing(case: &RoutingCase, cfg: &RoutingConfig) -> Routed {
    let (n, k, d, m) = case.dims();
    let dims = k * d;
    let v = votes(case);
    let mut big_r = vec![vec![1.0 / m as f64; m]; n];
    let mut out = None;
    for _ in 0..cfg.max_iter {
        let mut a_out = vec![0.0; m];
        let mut mu = vec![vec![0.0; dims]; m];
        let mut sigma_sq = vec![vec![0.0; dims]; m];
        let mut r = vec![vec![0.0; n]; m];
        for j in 0..m {
            let mass: f64 = (0..n).map(|i| case.acts[i] * big_r[i][j]).sum();
            for i in 0..n {
                r[j][i] = case.acts[i] * big_r[i][j] / mass;
            }
            for h in 0..dims {
                mu[j][h] = (0..n).map(|i| r[j][i] * v[i][j][h]).sum();
                let var: f64 = (0..n).map(|i| r[j][i] * (v[i][j][h] - mu[j][h]).powi(2)).sum();
                sigma_sq[j][h] = var.max(cfg.variance_floor);
            }
            let r_sum: f64 = r[j].iter().sum();
            let weight = if cfg.use_unnormalized_mass { mass } else { r_sum };
            let cost: f64 =
                (0..dims).map(|h| weight * (sigma_sq[j][h].sqrt().ln() + 0.5 + (2.0 * PI).ln() / 2.0)).sum();
            let x = cfg.lambda * (case.beta_a[j] - case.beta_u[j] * weight - cost);
            a_out[j] = 1.0 / (1.0 + (-x).exp());
        }
        big_r = direct_e_step(&a_out, &mu, &sigma_sq, &v);
        out = Some(Routed { a_out, mu, sigma_sq, posterior: big_r.clone(), r });
    }
    out.expect("max_iter >= 1")
}

/// The library's routing on the same case, unpacked into plain vectors.
pub fn library_routing(case: &RoutingCase, cfg: &RoutingConfig) -> Routed {
    let (n, _, _, m) = case.dims();
    let tape = Tape::new();
    let state = CapsuleLayerState {
        poses: tape.constant(case.poses_tensor()),
        activations: tape.constant(Tensor::vector(case.acts.clone())),
    };
    let params = BoundRouting::constants(&tape, &case.params());
    let out = em_routing(&state, &params, cfg);
    let fit = &out.last_fit;
    let posterior = out.posterior.expect("final E-step").to_tensor();
    Routed {
        a_out: fit.a_out.to_tensor().into_data(),
        mu: fit.mu.iter().map(|v| v.to_tensor().into_data()).collect(),
        sigma_sq: fit.sigma_sq.iter().map(|v| v.to_tensor().into_data()).collect(),
        posterior: (0..n).map(|i| posterior.data()[i * m..(i + 1) * m].to_vec()).collect(),
        r: fit.r.iter().map(|v| v.to_tensor().into_data()).collect(),
    }
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest absolute difference between two routing results.
pub fn routed_diff(a: &Routed, b: &Routed) -> f64 {
    [
        max_diff(std::slice::from_ref(&a.a_out), std::slice::from_ref(&b.a_out)),
        max_diff(&a.mu, &b.mu),
        max_diff(&a.sigma_sq, &b.sigma_sq),
        max_diff(&a.posterior, &b.posterior),
        max_diff(&a.r, &b.r),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Dense `D^-1/2 (A + I) D^-1/2 (X Theta)` with ReLU, layer by layer.
pub fn reference_gcn(g: &Graph, thetas: &[Tensor]) -> Vec<Vec<Vec<f64>>> {
    let n = g.num_nodes();
    let mut adj = vec![vec![0.0; n]; n];
    for i in 0..n {
        adj[i][i] = 1.0;
    }
    for &(a, b) in g.edges() {
        adj[a][b] = 1.0;
        adj[b][a] = 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|row| row.iter().sum()).collect();
    let c = g.feature_dim();
    let mut x: Vec<Vec<f64>> = (0..n).map(|i| g.node_features().data()[i * c..(i + 1) * c].to_vec()).collect();
    let mut layers = Vec::new();
    for theta in thetas {
        let (rows, cols) = (theta.shape()[0], theta.shape()[1]);
        let xt: Vec<Vec<f64>> =
            x.iter().map(|xi| (0..cols).map(|o| (0..rows).map(|t| xi[t] * theta.at(t, o)).sum()).collect()).collect();
        x = (0..n)
            .map(|i| {
                (0..cols)
                    .map(|o| {
                        let s: f64 = (0..n).map(|u| adj[i][u] / (deg[i] * deg[u]).sqrt() * xt[u][o]).sum();
                        s.max(0.0)
                    })
                    .collect()
            })
            .collect();
        layers.push(x.clone());
    }
    layers
}

/// A connected-ish random graph with LDP features.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize, label: usize) -> Graph {
    let n = rng.gen_range(1..=max_nodes);
    let p = rng.gen_range(0.1..0.6);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    Graph::with_ldp_features(n, edges, label).expect("valid random graph")
}

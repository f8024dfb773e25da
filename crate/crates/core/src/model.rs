//! The full classifier: primary capsules, a stack of EM-routing layers and
//! the readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::Graph;
use crate::error::{Error, Result};
use crate::gcn::{build_primary_capsules, CapsuleLayerState, GcnParams};
use crate::readout::{classify, cross_entropy, select_best_capsule, BoundReadout, ReadoutParams};
use crate::routing::{build_capsule_stack, em_routing, BoundRouting, RoutingConfig, RoutingParams};

/// All learnable parameters plus the fixed settings needed to run them.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Model {
    pub gcn: GcnParams,
    pub routing: Vec<RoutingParams>,
    pub readout: ReadoutParams,
    pub routing_config: RoutingConfig,
    pub activation_scale: f64,
}

impl Model {
    pub fn init(cfg: &ModelConfig, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = cfg.capsule_width;
        Ok(Self {
            gcn: GcnParams::init(feature_dim, width, cfg.num_gcn_layers, &mut rng),
            routing: build_capsule_stack(cfg.capsule_depth, num_classes, width, &mut rng),
            readout: ReadoutParams::init(cfg.num_gcn_layers * width, cfg.mlp_hidden, num_classes, &mut rng),
            routing_config: cfg.routing.clone(),
            activation_scale: cfg.activation_scale,
        })
    }

    /// Parameter tensors in a fixed order shared with [`BoundModel::parameters`].
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.gcn.thetas.iter().collect();
        for r in &self.routing {
            out.extend([&r.transforms, &r.beta_a, &r.beta_u]);
        }
        let ro = &self.readout;
        out.extend([&ro.hidden_w, &ro.hidden_b, &ro.output_w, &ro.output_b]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.gcn.thetas.iter_mut().collect();
        for r in &mut self.routing {
            out.extend([&mut r.transforms, &mut r.beta_a, &mut r.beta_u]);
        }
        let ro = &mut self.readout;
        out.extend([&mut ro.hidden_w, &mut ro.hidden_b, &mut ro.output_w, &mut ro.output_b]);
        out
    }

    /// Human-readable names of [`Model::parameters`], in the same order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.gcn.thetas.len()).map(|l| format!("gcn.theta{l}")).collect();
        for l in 0..self.routing.len() {
            for p in ["transforms", "beta_a", "beta_u"] {
                names.push(format!("routing{l}.{p}"));
            }
        }
        names
            .extend(["readout.hidden_w", "readout.hidden_b", "readout.output_w", "readout.output_b"].map(String::from));
        names
    }

    pub fn num_classes(&self) -> usize {
        self.readout.output_b.numel()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&'t self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let bind = |t: &Tensor| -> Var<'t> {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundModel {
            model: self,
            thetas: self.gcn.thetas.iter().map(bind).collect(),
            routing: self
                .routing
                .iter()
                .map(|r| if trainable { BoundRouting::leaves(tape, r) } else { BoundRouting::constants(tape, r) })
                .collect(),
            readout: BoundReadout::new(tape, &self.readout, trainable),
            tape,
        }
    }

    /// Class logits for one graph.
    pub fn logits(&self, g: &Graph) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.bind(&tape, false).forward(g)?.logits.to_tensor())
    }

    pub fn predict(&self, g: &Graph) -> Result<usize> {
        Ok(crate::autodiff::argmax(self.logits(g)?.data()).1)
    }
}

/// A [`Model`] recorded on a tape.
pub struct BoundModel<'t> {
    model: &'t Model,
    tape: &'t Tape,
    pub thetas: Vec<Var<'t>>,
    pub routing: Vec<BoundRouting<'t>>,
    pub readout: BoundReadout<'t>,
}

/// Intermediate values of one forward pass.
pub struct Forward<'t> {
    pub primary: CapsuleLayerState<'t>,
    pub layers: Vec<CapsuleLayerState<'t>>,
    pub selected: usize,
    pub logits: Var<'t>,
}

impl<'t> BoundModel<'t> {
    pub fn parameters(&self) -> Vec<Var<'t>> {
        let mut out = self.thetas.clone();
        for r in &self.routing {
            out.extend(r.as_vec());
        }
        out.extend(self.readout.as_vec());
        out
    }

    pub fn forward(&self, g: &Graph) -> Result<Forward<'t>> {
        let primary = build_primary_capsules(self.tape, g, &self.thetas, self.model.activation_scale)?;
        let mut layers = Vec::with_capacity(self.routing.len());
        let mut state = primary;
        for r in &self.routing {
            state = em_routing(&state, r, &self.model.routing_config).output;
            layers.push(state);
        }
        let (embedding, selected) = select_best_capsule(&state);
        let logits = classify(embedding, &self.readout)?;
        Ok(Forward { primary, layers, selected, logits })
    }

    pub fn loss(&self, g: &Graph) -> Result<Var<'t>> {
        Ok(cross_entropy(self.forward(g)?.logits, g.label()))
    }
}

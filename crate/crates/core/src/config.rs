//! Hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::routing::RoutingConfig;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_gcn_layers: usize,
    pub capsule_width: usize,
    pub capsule_depth: usize,
    pub mlp_hidden: usize,
    pub routing: RoutingConfig,
    /// Multiplier on the degree-based primary activations.
    pub activation_scale: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Graphs whose gradients are averaged into one update.
    pub batch_size: usize,
    /// Folds of the outer and inner cross-validation loops.
    pub folds: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_gcn_layers: 4,
            capsule_width: 16,
            capsule_depth: 2,
            mlp_hidden: 64,
            routing: RoutingConfig::default(),
            activation_scale: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 200,
            batch_size: 1,
            folds: 10,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ModelConfig {
    /// Keys accepted by [`ModelConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "num_gcn_layers",
        "capsule_width",
        "capsule_depth",
        "mlp_hidden",
        "routing.max_iter",
        "routing.lambda",
        "routing.variance_floor",
        "routing.use_unnormalized_mass",
        "routing.skip_final_e_step",
        "activation_scale",
        "learning_rate",
        "beta1",
        "beta2",
        "adam_epsilon",
        "epochs",
        "batch_size",
        "folds",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "num_gcn_layers" => self.num_gcn_layers = parse(key, value)?,
            "capsule_width" => self.capsule_width = parse(key, value)?,
            "capsule_depth" => self.capsule_depth = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "routing.max_iter" | "max_iter" => self.routing.max_iter = parse(key, value)?,
            "routing.lambda" | "lambda" => self.routing.lambda = parse(key, value)?,
            "routing.variance_floor" => self.routing.variance_floor = parse(key, value)?,
            "routing.use_unnormalized_mass" => self.routing.use_unnormalized_mass = parse(key, value)?,
            "routing.skip_final_e_step" => self.routing.skip_final_e_step = parse(key, value)?,
            "activation_scale" => self.activation_scale = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(key, value)
    }

    /// Reads `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply_override(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.routing;
        let _ = writeln!(s, "num_gcn_layers = {}", self.num_gcn_layers);
        let _ = writeln!(s, "capsule_width = {}", self.capsule_width);
        let _ = writeln!(s, "capsule_depth = {}", self.capsule_depth);
        let _ = writeln!(s, "mlp_hidden = {}", self.mlp_hidden);
        let _ = writeln!(s, "routing.max_iter = {}", r.max_iter);
        let _ = writeln!(s, "routing.lambda = {}", r.lambda);
        let _ = writeln!(s, "routing.variance_floor = {}", r.variance_floor);
        let _ = writeln!(s, "routing.use_unnormalized_mass = {}", r.use_unnormalized_mass);
        let _ = writeln!(s, "routing.skip_final_e_step = {}", r.skip_final_e_step);
        let _ = writeln!(s, "activation_scale = {}", self.activation_scale);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_epsilon = {}", self.adam_epsilon);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "folds = {}", self.folds);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_gcn_layers", self.num_gcn_layers),
            ("capsule_width", self.capsule_width),
            ("capsule_depth", self.capsule_depth),
            ("mlp_hidden", self.mlp_hidden),
            ("routing.max_iter", self.routing.max_iter),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        let positive_f = |v: f64| v > 0.0 && v.is_finite();
        if !positive_f(self.routing.lambda) {
            return Err(Error::Config("routing.lambda must be positive".into()));
        }
        if !positive_f(self.routing.variance_floor) {
            return Err(Error::Config("routing.variance_floor must be positive".into()));
        }
        if !positive_f(self.learning_rate) || !positive_f(self.activation_scale) {
            return Err(Error::Config("learning_rate and activation_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

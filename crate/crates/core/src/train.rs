//! Training, evaluation and the repeated nested cross-validation protocol.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{argmax, Tape, Tensor};
use crate::config::ModelConfig;
use crate::data::{nested_cv_plan, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;

/// Adaptive-moment optimiser state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &ModelConfig, params: &[&Tensor]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and gradient of one graph, gradients in [`Model::parameters`] order.
pub fn loss_and_gradients(model: &Model, g: &crate::data::Graph) -> Result<(f64, Tensor, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let fwd = bound.forward(g)?;
    let loss = crate::readout::cross_entropy(fwd.logits, g.label());
    loss.backward();
    let grads = bound
        .parameters()
        .iter()
        .map(|p| p.grad().map_or_else(|| vec![0.0; p.value().numel()], Tensor::into_data))
        .collect();
    Ok((loss.item(), fwd.logits.to_tensor(), grads))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy (lower validation loss breaks ties).
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Accuracy and mean cross-entropy over `indices`.
pub fn evaluate_with_loss(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for &i in indices {
        let g = &ds.graphs[i];
        let tape = Tape::new();
        let logits = model.bind(&tape, false).forward(g)?.logits;
        if argmax(logits.value().data()).1 == g.label() {
            correct += 1;
        }
        loss += crate::readout::cross_entropy(logits, g.label()).item();
    }
    let n = indices.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Fraction of graphs at `indices` whose arg-max logit is the label.
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    Ok(evaluate_with_loss(model, ds, indices)?.0)
}

fn numeric_failure(model: &Model, graph: usize, epoch: usize, loss: f64) -> Error {
    let norms: Vec<String> = model
        .parameter_names()
        .iter()
        .zip(model.parameters())
        .map(|(n, p)| format!("{n}={:.3e}", p.sq_norm().sqrt()))
        .collect();
    Error::Numeric(format!("loss {loss} on graph {graph} in epoch {epoch}; parameter norms: {}", norms.join(", ")))
}

/// Trains a fresh model on `train` and keeps the best-validation snapshot.
pub fn train(ds: &Dataset, train: &[usize], validation: &[usize], cfg: &ModelConfig) -> Result<TrainOutcome> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    cfg.validate()?;
    let mut model = Model::init(cfg, ds.feature_dim, ds.num_classes, cfg.seed)?;
    let mut adam = Adam::new(cfg, &model.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let (val_acc, val_loss) = evaluate_with_loss(&model, ds, validation)?;
    let mut best = (model.clone(), 0, val_acc, val_loss);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train.to_vec();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total_loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let g = &ds.graphs[i];
                let (loss, logits, grads) = loss_and_gradients(&model, g)?;
                if !loss.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(numeric_failure(&model, i, epoch, loss));
                }
                total_loss += loss;
                correct += usize::from(argmax(logits.data()).1 == g.label());
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(x, y)| *x += y),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                grads.iter_mut().flatten().for_each(|x| *x *= inv);
            }
            adam.update(model.parameters_mut(), &grads);
        }

        let (val_acc, val_loss) = evaluate_with_loss(&model, ds, validation)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total_loss / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        });
        if val_acc > best.2 || (val_acc == best.2 && val_loss < best.3) {
            best = (model.clone(), epoch, val_acc, val_loss);
        }
    }

    Ok(TrainOutcome { best: best.0, best_epoch: best.1, best_val_acc: best.2, best_val_loss: best.3, history })
}

/// One trained model of the nested protocol.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FoldReport {
    pub rep: usize,
    pub fold: usize,
    pub val_acc: f64,
    /// Test accuracy of this fold's best-validation snapshot.
    pub test_acc: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub seconds: f64,
    /// Whether this fold's model represented its repetition.
    pub selected: bool,
    #[serde(skip)]
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CvSummary {
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    pub repetition_test_acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CvReport {
    pub dataset: String,
    pub config: ModelConfig,
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

fn job_seed(seed: u64, rep: usize, fold: usize) -> u64 {
    let mut x = seed ^ ((rep as u64) << 32 | fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Repeated nested cross-validation: for each of `cfg.folds` repetitions,
/// one outer fold is the test set, `cfg.folds` models are trained on the inner
/// folds of the rest, and the best-validation model is scored on the test set.
pub fn cross_validate(ds: &Dataset, cfg: &ModelConfig) -> Result<CvReport> {
    cross_validate_with(ds, cfg, &|_| {})
}

/// [`cross_validate`] with a callback invoked as each fold finishes.
pub fn cross_validate_with(
    ds: &Dataset,
    cfg: &ModelConfig,
    on_fold: &(dyn Fn(&FoldReport) + Sync),
) -> Result<CvReport> {
    cfg.validate()?;
    let plan = nested_cv_plan(ds, cfg.folds, cfg.seed)?;
    let jobs: Vec<(usize, usize)> =
        (0..plan.len()).flat_map(|r| (0..plan[r].inner.len()).map(move |f| (r, f))).collect();

    let mut folds = jobs
        .par_iter()
        .map(|&(rep, fold)| {
            let started = Instant::now();
            let (train_idx, val_idx) = &plan[rep].inner[fold];
            let job_cfg = ModelConfig { seed: job_seed(cfg.seed, rep, fold), ..cfg.clone() };
            let outcome = train(ds, train_idx, val_idx, &job_cfg)?;
            let test_acc = evaluate(&outcome.best, ds, &plan[rep].test)?;
            let report = FoldReport {
                rep,
                fold,
                val_acc: outcome.best_val_acc,
                test_acc,
                epochs: outcome.history.len(),
                best_epoch: outcome.best_epoch,
                seconds: started.elapsed().as_secs_f64(),
                selected: false,
                val_loss: outcome.best_val_loss,
            };
            on_fold(&report);
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut repetition_test_acc = Vec::with_capacity(plan.len());
    for rep in 0..plan.len() {
        let chosen = folds
            .iter()
            .enumerate()
            .filter(|(_, f)| f.rep == rep)
            .min_by(|(_, a), (_, b)| {
                b.val_acc.total_cmp(&a.val_acc).then(a.val_loss.total_cmp(&b.val_loss)).then(a.fold.cmp(&b.fold))
            })
            .map(|(i, _)| i)
            .expect("every repetition has folds");
        folds[chosen].selected = true;
        repetition_test_acc.push(folds[chosen].test_acc);
    }
    let (mean, std) = mean_std(&repetition_test_acc);
    Ok(CvReport {
        dataset: ds.name.clone(),
        config: cfg.clone(),
        folds,
        summary: CvSummary { mean, std, repetition_test_acc },
    })
}

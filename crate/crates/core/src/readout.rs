//! Readout: the most active final capsule, a one-hidden-layer MLP, and
//! softmax cross-entropy.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcn::{glorot, CapsuleLayerState};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReadoutParams {
    /// `[k*d', H]`
    pub hidden_w: Tensor,
    /// `[H]`
    pub hidden_b: Tensor,
    /// `[H, C]`
    pub output_w: Tensor,
    /// `[C]`
    pub output_b: Tensor,
}

impl ReadoutParams {
    pub fn init(embedding: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden_w: glorot(embedding, hidden, rng),
            hidden_b: Tensor::zeros(vec![hidden]),
            output_w: glorot(hidden, classes, rng),
            output_b: Tensor::zeros(vec![classes]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundReadout<'t> {
    pub hidden_w: Var<'t>,
    pub hidden_b: Var<'t>,
    pub output_w: Var<'t>,
    pub output_b: Var<'t>,
}

impl<'t> BoundReadout<'t> {
    pub fn new(tape: &'t Tape, p: &ReadoutParams, trainable: bool) -> Self {
        let bind = |t: &Tensor| -> Var<'t> {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            hidden_w: bind(&p.hidden_w),
            hidden_b: bind(&p.hidden_b),
            output_w: bind(&p.output_w),
            output_b: bind(&p.output_b),
        }
    }

    pub fn as_vec(&self) -> Vec<Var<'t>> {
        vec![self.hidden_w, self.hidden_b, self.output_w, self.output_b]
    }
}

/// Flattened pose of the capsule with the highest activation (lowest index
/// on ties), and that index. Gradient reaches the chosen pose only.
pub fn select_best_capsule<'t>(state: &CapsuleLayerState<'t>) -> (Var<'t>, usize) {
    let (_, best) = state.activations.max_with_argmax();
    let (k, d) = state.pose_dims();
    (state.poses.select(0, best).reshape(&[k * d]), best)
}

/// `W2 relu(W1 e + b1) + b2`
pub fn classify<'t>(embedding: Var<'t>, p: &BoundReadout<'t>) -> Result<Var<'t>> {
    let width = embedding.value().numel();
    let expected = p.hidden_w.shape()[0];
    if width != expected {
        return Err(Error::Config(format!("embedding has {width} values but the readout expects {expected}")));
    }
    let hidden = (embedding.reshape(&[1, width]).matmul(p.hidden_w) + p.hidden_b).relu();
    let logits = hidden.matmul(p.output_w) + p.output_b;
    let classes = logits.shape()[1];
    Ok(logits.reshape(&[classes]))
}

/// `-ln softmax(logits)[label]`
pub fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Var<'t> {
    -logits.log_softmax().select(0, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn best_capsule_argmax_and_tie() {
        let tape = Tape::new();
        let poses = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = CapsuleLayerState { poses, activations: tape.leaf(Tensor::vector(vec![0.2, 0.9])) };
        let (e, idx) = select_best_capsule(&s);
        assert_eq!((idx, e.to_tensor().data().to_vec()), (1, vec![3.0, 4.0]));

        let s = CapsuleLayerState { poses, activations: tape.leaf(Tensor::vector(vec![0.5, 0.5])) };
        assert_eq!(select_best_capsule(&s).1, 0);
    }

    #[test]
    fn selection_gradient_skips_activations() {
        let tape = Tape::new();
        let poses = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let acts = tape.leaf(Tensor::vector(vec![0.2, 0.9]));
        let s = CapsuleLayerState { poses, activations: acts };
        select_best_capsule(&s).0.sum().backward();
        assert_eq!(poses.grad().unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(acts.grad().is_none());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let tape = Tape::new();
        let p = ReadoutParams {
            hidden_w: Tensor::zeros(vec![3, 4]),
            hidden_b: Tensor::zeros(vec![4]),
            output_w: Tensor::zeros(vec![4, 2]),
            output_b: Tensor::zeros(vec![2]),
        };
        let b = BoundReadout::new(&tape, &p, true);
        let logits = classify(tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0])), &b).unwrap();
        assert_eq!(logits.to_tensor().data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_computed_logits() {
        // hidden = relu([1, -2] . I + [0, 1]) = [1, 0]; logits = [1, 0] . [[2, 3], [5, 7]] + [0.5, 0]
        let tape = Tape::new();
        let p = ReadoutParams {
            hidden_w: Tensor::eye(2),
            hidden_b: Tensor::vector(vec![0.0, 1.0]),
            output_w: Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]),
            output_b: Tensor::vector(vec![0.5, 0.0]),
        };
        let b = BoundReadout::new(&tape, &p, false);
        let logits = classify(tape.constant(Tensor::vector(vec![1.0, -2.0])), &b).unwrap();
        assert_eq!(logits.to_tensor().data(), &[2.5, 3.0]);
    }

    #[test]
    fn embedding_width_mismatch_errors() {
        let tape = Tape::new();
        let p = ReadoutParams::init(3, 4, 2, &mut rand::thread_rng());
        let b = BoundReadout::new(&tape, &p, false);
        assert!(matches!(classify(tape.constant(Tensor::vector(vec![1.0; 5])), &b), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let eq = tape.leaf(Tensor::vector(vec![0.3, 0.3]));
        let loss = cross_entropy(eq, 0);
        assert_abs_diff_eq!(loss.item(), 2f64.ln(), epsilon = 1e-12);
        loss.backward();
        let g = eq.grad().unwrap();
        assert_abs_diff_eq!(g.data()[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.data()[1], 0.5, epsilon = 1e-12);

        let sat = cross_entropy(tape.constant(Tensor::vector(vec![50.0, -50.0])), 0).item();
        assert!((0.0..1e-40).contains(&sat));
        let three = cross_entropy(tape.constant(Tensor::vector(vec![1.0; 3])), 2).item();
        assert_abs_diff_eq!(three, 3f64.ln(), epsilon = 1e-12);
    }
}

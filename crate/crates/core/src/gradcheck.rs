//! Central finite-difference verification of autodiff gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{Batch, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::tta::Adaptable;

/// Largest relative error between `analytic` and central differences of `f`.
///
/// Each coordinate of every tensor in `params` is perturbed by `±step`; the
/// relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check<T, F>(mut f: F, params: &[Tensor<T>], analytic: &[Tensor<T>], step: T) -> f64
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> T,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape());
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = f(&work);
            work[pi].data_mut()[ci] = orig - step;
            let down = f(&work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down).as_f64() / (2.0 * step.as_f64());
            worst = worst.max(relative_error(grad.data()[ci].as_f64(), numeric));
        }
    }
    worst
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between the entropy-loss gradient of every trainable
/// tensor of `model` and its central differences on `batch`.
pub fn entropy_gradient_error<T, M>(model: &M, cfg: &ModelConfig, batch: &Batch<T>, step: T) -> Result<f64>
where
    T: Real,
    M: Adaptable<T> + Clone,
{
    let loss_of = |m: &M| -> Result<(Tape<T>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let (logits, leaves, _) = m.record(&mut tape, cfg, batch)?;
        let loss = tape.entropy(logits)?;
        Ok((tape, loss, leaves))
    };
    let (tape, loss, leaves) = loss_of(model)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = leaves.iter().map(|&v| grads.wrt(v)).collect();
    let mut probe = model.clone();
    let params: Vec<Tensor<T>> = probe.trainable_mut().into_iter().map(|t| t.clone()).collect();
    let mut failure = None;
    let worst = finite_difference_check(
        |ps| {
            for (slot, p) in probe.trainable_mut().into_iter().zip(ps) {
                slot.data_mut().copy_from_slice(p.data());
            }
            match loss_of(&probe) {
                Ok((t, l, _)) => t.value(l).data()[0],
                Err(e) => {
                    failure = Some(e);
                    T::zero()
                }
            }
        },
        &params,
        &analytic,
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

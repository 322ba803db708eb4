use rayon::prelude::*;

use crate::error::{MilError, Result};
use crate::model::{backward, model_forward, Gradients, ModelParams, Prediction};
use crate::ops;

use super::bag::Bag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyInstance {
    pub index: usize,
    pub prediction: Prediction,
}

/// Index of the instance with the highest positive-class probability.
///
/// Instances are scored independently (possibly in parallel); ties go to the
/// lowest index.
pub fn select_key_instance(params: &ModelParams, bag: &Bag) -> Result<KeyInstance> {
    if bag.instances.is_empty() {
        return Err(MilError::EmptyBag(bag.id.clone()));
    }
    let preds: Vec<Prediction> = bag
        .instances
        .par_iter()
        .map(|x| model_forward(params, x))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, p) in preds.iter().enumerate().skip(1) {
        if p.positive() > preds[best].positive() {
            best = i;
        }
    }
    Ok(KeyInstance {
        index: best,
        prediction: preds[best],
    })
}

#[derive(Debug, Clone)]
pub struct BagGradient {
    pub grads: Gradients,
    pub loss: f64,
    pub key_index: usize,
}

/// Cross-entropy gradient at the bag's key instance against the bag label.
pub fn bag_gradient(params: &ModelParams, bag: &Bag) -> Result<BagGradient> {
    let key = select_key_instance(params, bag)?;
    let g = backward(params, &bag.instances[key.index], bag.label.class_index())?;
    Ok(BagGradient {
        grads: g.grads,
        loss: g.loss,
        key_index: key.index,
    })
}

/// Key-instance loss of one bag, without gradients.
pub fn bag_loss(params: &ModelParams, bag: &Bag) -> Result<f64> {
    let key = select_key_instance(params, bag)?;
    let loss = ops::softmax_cross_entropy(&key.prediction.logits, bag.label.class_index())?;
    if !loss.is_finite() {
        return Err(MilError::Numeric(format!("non-finite loss on bag `{}`", bag.id)));
    }
    Ok(loss)
}

/// Mean key-instance loss over a validation set.
pub fn validation_loss(params: &ModelParams, bags: &[Bag]) -> Result<f64> {
    if bags.is_empty() {
        return Err(MilError::Empty("validation set"));
    }
    let mut total = 0.0;
    for bag in bags {
        total += bag_loss(params, bag)?;
    }
    Ok(total / bags.len() as f64)
}

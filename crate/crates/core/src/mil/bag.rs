use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::tensor::Tensor;

/// Binary bag (or instance) label. The discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Negative = 0,
    Positive = 1,
}

impl Label {
    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }
}

/// One volume: its slices (instances) and a single weak label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: Label,
    pub instances: Vec<Tensor>,
    /// Per-slice ground truth, known only for synthetic data. Never used for training.
    pub instance_truth: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        label: Label,
        instances: Vec<Tensor>,
        instance_truth: Option<Vec<bool>>,
    ) -> Result<Self> {
        let bag = Self {
            id: id.into(),
            label,
            instances,
            instance_truth,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.instances.first() else {
            return Err(MilError::EmptyBag(self.id.clone()));
        };
        if let Some(bad) = self.instances.iter().find(|t| t.shape() != first.shape()) {
            return Err(MilError::Shape(format!(
                "bag `{}` mixes instance shapes {:?} and {:?}",
                self.id,
                first.shape(),
                bad.shape()
            )));
        }
        if let Some(truth) = &self.instance_truth {
            if truth.len() != self.instances.len() {
                return Err(MilError::Shape(format!(
                    "bag `{}` has {} instances but {} truth flags",
                    self.id,
                    self.instances.len(),
                    truth.len()
                )));
            }
            if self.label == Label::Negative && truth.iter().any(|&t| t) {
                return Err(MilError::Config(format!(
                    "negative bag `{}` contains a positive instance",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance_shape(&self) -> Option<&[usize]> {
        self.instances.first().map(Tensor::shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        let t = Tensor::zeros(vec![1, 2, 2]);
        assert!(matches!(Bag::new("e", Label::Negative, vec![], None), Err(MilError::EmptyBag(_))));
        assert!(Bag::new("m", Label::Positive, vec![t.clone(), Tensor::zeros(vec![1, 3, 3])], None).is_err());
        assert!(Bag::new("n", Label::Negative, vec![t.clone()], Some(vec![true])).is_err());
        assert!(Bag::new("l", Label::Positive, vec![t.clone()], Some(vec![true, false])).is_err());
        let ok = Bag::new("p", Label::Positive, vec![t.clone(), t], Some(vec![false, true])).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(Label::from_u8(1), Some(Label::Positive));
        assert_eq!(Label::from_u8(2), None);
    }
}

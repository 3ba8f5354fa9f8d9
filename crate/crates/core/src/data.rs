//! Labeled image pools shared by training and evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor_autodiff::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub class_id: usize,
    /// `channels x H x W` in `[0, 1]`.
    pub image: Tensor,
}

/// An easy ("support") pool and a hard ("query") pool over the same classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(support: Vec<LabeledImage>, query: Vec<LabeledImage>) -> Result<Self> {
        let ds = Self { support, query };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = match self.support.first().or(self.query.first()) {
            Some(s) => s.image.shape().to_vec(),
            None => return Err(Error::Data("dataset has no images".into())),
        };
        for s in self.support.iter().chain(&self.query) {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Data(format!("image {} has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.support.first().or(self.query.first()).map(|s| s.image.shape())
    }

    /// Sorted class ids present in either pool.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.support.iter().chain(&self.query).map(|s| s.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Indices into `pool` grouped by class id.
    pub fn by_class(pool: &[LabeledImage]) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in pool.iter().enumerate() {
            map.entry(s.class_id).or_default().push(i);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, class_id: usize, side: usize) -> LabeledImage {
        LabeledImage { id: id.into(), class_id, image: Tensor::zeros(&[1, side, side]) }
    }

    #[test]
    fn grouping_and_validation() {
        let ds = Dataset::new(vec![img("a", 2, 4), img("b", 0, 4)], vec![img("c", 2, 4)]).unwrap();
        assert_eq!(ds.classes(), vec![0, 2]);
        assert_eq!(Dataset::by_class(&ds.support)[&2], vec![0]);
        assert!(Dataset::new(vec![img("a", 0, 4)], vec![img("b", 0, 5)]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
    }
}

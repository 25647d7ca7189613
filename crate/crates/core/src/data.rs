use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};

/// A labeled image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| !i.same_shape(first)) {
                return Err(Error::Shape("images must share one shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of each class in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Flattened pixels, one row per image.
    pub fn pixel_rows(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|i| i.data.clone()).collect()
    }
}

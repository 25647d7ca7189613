use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A prompt row: one per class name plus three reserved generic prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptId {
    Class(usize),
    /// "a photo of a similar object"
    GenericPositive,
    /// "a photo of a visual object"
    GenericObject,
    NegPoolBase,
}

impl PromptId {
    pub const RESERVED: [PromptId; 3] = [
        PromptId::GenericPositive,
        PromptId::GenericObject,
        PromptId::NegPoolBase,
    ];

    pub fn is_reserved(self) -> bool {
        !matches!(self, PromptId::Class(_))
    }
}

/// Trainable stand-in for a text encoder: a `(classes + 3) x width` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    num_classes: usize,
    width: usize,
    pub table: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, width: usize, rng: &mut R) -> Self {
        let rows = num_classes + PromptId::RESERVED.len();
        let table = (0..rows * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            num_classes,
            width,
            table,
        }
    }

    pub fn from_table(num_classes: usize, width: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != (num_classes + 3) * width {
            return Err(Error::Shape(format!(
                "prompt table needs {} entries, got {}",
                (num_classes + 3) * width,
                table.len()
            )));
        }
        Ok(Self {
            num_classes,
            width,
            table,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> usize {
        self.num_classes + PromptId::RESERVED.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row index of a prompt id.
    pub fn index(&self, id: PromptId) -> Result<usize> {
        let c = self.num_classes;
        match id {
            PromptId::Class(j) if j < c => Ok(j),
            PromptId::Class(j) => Err(Error::UnknownPrompt {
                id: j,
                rows: self.rows(),
            }),
            PromptId::GenericPositive => Ok(c),
            PromptId::GenericObject => Ok(c + 1),
            PromptId::NegPoolBase => Ok(c + 2),
        }
    }

    /// Pure table lookup.
    pub fn embed(&self, id: PromptId) -> Result<&[f64]> {
        let r = self.index(id)?;
        Ok(self.row(r))
    }

    /// Lookup by raw row index.
    pub fn embed_row(&self, row: usize) -> Result<&[f64]> {
        if row >= self.rows() {
            return Err(Error::UnknownPrompt {
                id: row,
                rows: self.rows(),
            });
        }
        Ok(self.row(row))
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.table[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.table[r * self.width..(r + 1) * self.width]
    }

    /// Stacks the rows for `ids` into an `ids.len() x width` buffer.
    pub fn gather(&self, ids: &[PromptId]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.width);
        for &id in ids {
            out.extend_from_slice(self.embed(id)?);
        }
        Ok(out)
    }
}

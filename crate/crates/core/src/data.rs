use serde::{Deserialize, Serialize};

pub type ClassId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A feature vector with its class label and provenance tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSample {
    pub features: Vec<f64>,
    pub class_id: ClassId,
    pub origin: Origin,
    pub split: Split,
}

impl EmbeddingSample {
    pub fn new(features: Vec<f64>, class_id: ClassId, origin: Origin, split: Split) -> Self {
        Self {
            features,
            class_id,
            origin,
            split,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn mean_of<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for row in rows {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        let denom = n as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
    }
    (acc, n)
}

//! Prompt embeddings and edits applied to them before sampling.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::rng::{keyed_stream, standard_normals};
use crate::tensor::ActivationTensor;

/// Tokens × width conditioning matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array2<f32>);

impl Embedding {
    pub fn new(m: Array2<f32>) -> Result<Self, PipelineError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::NonFiniteOutput {
                step: 0,
                location: "embedding".into(),
            });
        }
        Ok(Self(m.as_standard_layout().into_owned()))
    }

    pub fn zeros(tokens: usize, width: usize) -> Self {
        Self(Array2::zeros((tokens, width)))
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.0
    }

    /// (tokens, width)
    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn to_tensor(&self) -> ActivationTensor {
        ActivationTensor::from_matrix(&self.0).expect("embedding is non-empty")
    }

    pub fn from_tensor(t: &ActivationTensor) -> Result<Self, PipelineError> {
        Self::new(t.to_matrix())
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f32> {
        let n = self.0.nrows() as f32;
        self.0.sum_axis(Axis(0)).iter().map(|v| v / n).collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.dim() == other.0.dim() && self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditioningEdit {
    Perturb { sigma: f64, edit_seed: u64 },
    Interpolate { other_prompt: String, t: f64 },
    Scale { factor: f64 },
    Offset { direction: Vec<f64> },
}

impl ConditioningEdit {
    pub fn kind(&self) -> &'static str {
        match self {
            ConditioningEdit::Perturb { .. } => "perturb",
            ConditioningEdit::Interpolate { .. } => "interpolate",
            ConditioningEdit::Scale { .. } => "scale",
            ConditioningEdit::Offset { .. } => "offset",
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: String| Err(PipelineError::InvalidEdit(reason));
        match self {
            ConditioningEdit::Perturb { sigma, .. } if !(sigma.is_finite() && *sigma >= 0.0) => {
                bad(format!("perturb sigma must be finite and >= 0, got {sigma}"))
            }
            ConditioningEdit::Interpolate { t, .. } if !(0.0..=1.0).contains(t) => {
                bad(format!("interpolate t must be in [0, 1], got {t}"))
            }
            ConditioningEdit::Scale { factor } if !factor.is_finite() => {
                bad(format!("scale factor must be finite, got {factor}"))
            }
            ConditioningEdit::Offset { direction } if direction.iter().any(|v| !v.is_finite()) => {
                bad("offset direction must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

/// Gaussian stream used by `perturb`.
pub fn perturbation_noise(edit_seed: u64, n: usize) -> Vec<f32> {
    standard_normals(&mut keyed_stream("conditioning-perturb", &[&edit_seed.to_le_bytes()]), n)
}

/// Apply one edit. `encode` is only called by `interpolate`, for the other prompt.
pub fn apply_edit_with(
    emb: &Embedding,
    edit: &ConditioningEdit,
    encode: impl FnOnce(&str) -> Result<Embedding, PipelineError>,
) -> Result<Embedding, PipelineError> {
    edit.validate()?;
    let m = emb.matrix();
    let out = match edit {
        ConditioningEdit::Perturb { sigma, edit_seed } => {
            if *sigma == 0.0 {
                return Ok(emb.clone());
            }
            let s = *sigma as f32;
            let noise = perturbation_noise(*edit_seed, m.len());
            let mut out = m.clone();
            for (o, n) in out.iter_mut().zip(noise) {
                *o += s * n;
            }
            out
        }
        ConditioningEdit::Interpolate { other_prompt, t } => {
            if *t == 0.0 {
                return Ok(emb.clone());
            }
            let other = encode(other_prompt)?;
            if other.shape() != emb.shape() {
                return Err(PipelineError::ShapeMismatch {
                    expected: vec![m.nrows(), m.ncols()],
                    got: vec![other.shape().0, other.shape().1],
                });
            }
            if *t == 1.0 {
                return Ok(other);
            }
            let t = *t as f32;
            let mut out = m.clone();
            out.zip_mut_with(other.matrix(), |a, b| *a = (1.0 - t) * *a + t * b);
            out
        }
        ConditioningEdit::Scale { factor } => {
            let f = *factor as f32;
            m.mapv(|v| v * f)
        }
        ConditioningEdit::Offset { direction } => {
            if direction.len() != m.ncols() {
                return Err(PipelineError::ShapeMismatch {
                    expected: vec![m.ncols()],
                    got: vec![direction.len()],
                });
            }
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                for (o, d) in row.iter_mut().zip(direction) {
                    *o += *d as f32;
                }
            }
            out
        }
    };
    Embedding::new(out)
}

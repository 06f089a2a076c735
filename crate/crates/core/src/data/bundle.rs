//! Lossless JSON container for unrounded images, so translations can be
//! chained without quantization in between.

use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub name: String,
    pub identity: u32,
    pub modality: Modality,
    pub generated: bool,
    /// `[3, H, W]`.
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBundle {
    pub samples: Vec<RawSample>,
}

impl RawBundle {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let b: RawBundle = serde_json::from_slice(bytes).map_err(|e| {
            Error::parse("raw bundle", e.column(), format!("line {}: {e}", e.line()))
        })?;
        for s in &b.samples {
            let n = s.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if s.shape[0] != 3 || n != Some(s.data.len()) || s.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "raw sample `{}`: {} values do not fill shape {:?} or are not finite",
                    s.name,
                    s.data.len(),
                    s.shape
                )));
            }
        }
        Ok(b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundle serializes")
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        Self {
            samples: samples
                .into_iter()
                .map(|s| RawSample {
                    name: s.name.clone(),
                    identity: s.identity,
                    modality: s.modality,
                    generated: s.generated,
                    shape: [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]],
                    data: s.image.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        let samples = self
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    image: Tensor::new(s.shape.to_vec(), s.data)?,
                    identity: s.identity,
                    modality: s.modality,
                    generated: s.generated,
                    name: s.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(samples))
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Modality::Visible),
            "infrared" => Ok(Modality::Infrared),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// One labelled image with pixel values in `[0, 255]`, shape `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub identity: u32,
    pub modality: Modality,
    pub generated: bool,
    /// Stable name used when writing the sample to disk.
    pub name: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Largest per-pixel spread between the three channels.
    pub fn max_channel_range(&self) -> f64 {
        let plane = self.height() * self.width();
        let d = self.image.data();
        (0..plane)
            .map(|p| {
                let (r, g, b) = (d[p], d[plane + p], d[2 * plane + p]);
                r.max(g).max(b) - r.min(g).min(b)
            })
            .fold(0.0, f64::max)
    }
}

/// A set of samples; order is significant and deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.samples.iter().filter(|s| s.modality == m).count()
    }

    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Indices of samples with the given modality and identity.
    pub fn indices(&self, m: Modality, identity: u32) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.modality == m && s.identity == identity)
            .map(|(i, _)| i)
            .collect()
    }

    /// Image shape shared by every sample, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let sh = s.image.shape();
            [sh[0], sh[1], sh[2]]
        })
    }
}

//! The full dual-flow system: both generators, both identity encoders and
//! both modality discriminators over one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversaries::{AdversaryConfig, Encoder, ModalityDiscriminator};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::flow::{ActivationPlacement, FlowConfig, FlowGenerator, GaussianPrior};
use crate::tensor::{Group, ParamStore, Tensor};

/// Pixels in `[0, 255]` map affinely onto `[-PIXEL_BOUND, PIXEL_BOUND]`.
pub const PIXEL_BOUND: f64 = 0.9;
/// Width of one 8-bit quantization bin after scaling.
pub const PIXEL_STEP: f64 = 2.0 * PIXEL_BOUND / 255.0;

/// `[0, 255] -> [-0.9, 0.9]`.
pub fn preprocess(image: &Tensor) -> Tensor {
    image.map(|v| v * PIXEL_STEP - PIXEL_BOUND)
}

/// Inverse of [`preprocess`], without rounding or clamping.
pub fn postprocess(x: &Tensor) -> Tensor {
    x.map(|v| (v + PIXEL_BOUND) / PIXEL_STEP)
}

/// [`preprocess`] plus centered uniform noise one quantization bin wide.
pub fn dequantize(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    let mut t = preprocess(image);
    for v in t.data_mut() {
        *v += (rng.random::<f64>() - 0.5) * PIXEL_STEP;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub activation: ActivationPlacement,
    pub adversary: AdversaryConfig,
    pub prior: GaussianPrior,
}

impl ModelConfig {
    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            blocks: self.blocks,
            image_shape: self.image_shape,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Flow2Flow {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub flow_visible: FlowGenerator,
    pub flow_infrared: FlowGenerator,
    pub encoder_visible: Encoder,
    pub encoder_infrared: Encoder,
    pub disc_visible: ModalityDiscriminator,
    pub disc_infrared: ModalityDiscriminator,
}

impl Flow2Flow {
    /// Parameters are drawn from `rng` in a fixed order.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let flow = config.flow();
        let shape = config.image_shape;
        let adv = config.adversary;
        let flow_visible =
            FlowGenerator::new(&mut store, flow, Modality::Visible, Group::FlowVisible, rng)?;
        let flow_infrared = FlowGenerator::new(
            &mut store,
            flow,
            Modality::Infrared,
            Group::FlowInfrared,
            rng,
        )?;
        let encoder_visible = Encoder::new(
            &mut store,
            "enc_visible",
            Group::EncoderVisible,
            Modality::Visible,
            shape,
            adv,
            rng,
        )?;
        let encoder_infrared = Encoder::new(
            &mut store,
            "enc_infrared",
            Group::EncoderInfrared,
            Modality::Infrared,
            shape,
            adv,
            rng,
        )?;
        let disc_visible = ModalityDiscriminator::new(
            &mut store,
            "disc_visible",
            Group::DiscVisible,
            Modality::Visible,
            shape,
            adv,
            rng,
        )?;
        let disc_infrared = ModalityDiscriminator::new(
            &mut store,
            "disc_infrared",
            Group::DiscInfrared,
            Modality::Infrared,
            shape,
            adv,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            flow_visible,
            flow_infrared,
            encoder_visible,
            encoder_infrared,
            disc_visible,
            disc_infrared,
        })
    }

    pub fn flow(&self, m: Modality) -> &FlowGenerator {
        match m {
            Modality::Visible => &self.flow_visible,
            Modality::Infrared => &self.flow_infrared,
        }
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Visible => &self.encoder_visible,
            Modality::Infrared => &self.encoder_infrared,
        }
    }

    pub fn discriminator(&self, m: Modality) -> &ModalityDiscriminator {
        match m {
            Modality::Visible => &self.disc_visible,
            Modality::Infrared => &self.disc_infrared,
        }
    }

    /// Overwrite every parameter from `(name, tensor)` pairs. Every
    /// parameter must be present exactly once with a matching shape.
    pub fn load_parameters<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in tensors {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            if self.store.value(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.store.value(id).shape()
                )));
            }
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Format(format!("parameter `{name}` given twice")));
            }
            self.store.set_value(id, t.data())?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &self
                .store
                .iter()
                .nth(missing)
                .expect("index in range")
                .1
                .name;
            return Err(Error::Format(format!("parameter `{name}` missing")));
        }
        Ok(())
    }
}

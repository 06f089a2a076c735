use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_layer, FlowLayer, LayerKind};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Group, ParamStore, Tape, Tensor, Var};

/// Where the single tanh layer sits within the block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPlacement {
    /// Applied to the squeezed image first on the image-to-latent path.
    /// Cross-flow translations clamp in the artanh, which breaks the
    /// translation cycle.
    ImageSide,
    /// Applied last on the image-to-latent path.
    #[default]
    LatentSide,
    /// Plain linear flow.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub blocks: usize,
    /// `[C, H, W]` of the input image.
    pub image_shape: [usize; 3],
    pub activation: ActivationPlacement,
}

impl FlowConfig {
    pub fn new(blocks: usize, image_shape: [usize; 3]) -> Self {
        Self {
            blocks,
            image_shape,
            activation: ActivationPlacement::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if self.blocks == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(
                "flow needs positive blocks and image extents".into(),
            ));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("image extents {h}x{w} must be even")));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.image_shape;
        [4 * c, h / 2, w / 2]
    }
}

/// Image-to-latent result.
pub struct Inverted {
    pub z: Var,
    /// Per-sample log-determinant `[N]` of the image-to-latent map.
    pub logdet: Var,
    /// Per-layer contributions, in application order.
    pub layer_logdets: Vec<Var>,
}

/// Latent-to-image result.
pub struct Generated {
    pub x: Var,
    /// Elements clamped before artanh.
    pub saturated: usize,
}

/// One invertible generator: a squeeze followed by `blocks` blocks of
/// {1x1 convolution, affine coupling}, with one tanh layer.
#[derive(Debug, Clone)]
pub struct FlowGenerator {
    pub modality: Modality,
    pub config: FlowConfig,
    /// Layers in image-to-latent order.
    layers: Vec<FlowLayer>,
}

impl FlowGenerator {
    pub fn new(
        store: &mut ParamStore,
        config: FlowConfig,
        modality: Modality,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.latent_shape()[0];
        let split = c / 2;
        let prefix = format!("flow_{modality}");
        let mut layers = vec![init_layer(
            store,
            LayerKind::Squeeze,
            c,
            split,
            &prefix,
            group,
            rng,
        )?];
        if config.activation == ActivationPlacement::ImageSide {
            layers.push(init_layer(
                store,
                LayerKind::Tanh,
                c,
                split,
                &prefix,
                group,
                rng,
            )?);
        }
        // Block `blocks` is adjacent to the image, block 1 to the latent.
        for b in (1..=config.blocks).rev() {
            let name = format!("{prefix}.block{b:02}");
            layers.push(init_layer(
                store,
                LayerKind::InvConv1x1,
                c,
                split,
                &format!("{name}.conv"),
                group,
                rng,
            )?);
            layers.push(init_layer(
                store,
                LayerKind::AffineCoupling,
                c,
                split,
                &format!("{name}.coupling"),
                group,
                rng,
            )?);
        }
        if config.activation == ActivationPlacement::LatentSide {
            layers.push(init_layer(
                store,
                LayerKind::Tanh,
                c,
                split,
                &prefix,
                group,
                rng,
            )?);
        }
        Ok(Self {
            modality,
            config,
            layers,
        })
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.config.image_shape {
            return Err(Error::ShapeMismatch {
                op: "flow.invert",
                lhs: shape.to_vec(),
                rhs: self.config.image_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Image `[N,C,H,W]` to latent `[N,4C,H/2,W/2]`.
    pub fn invert(&self, g: &mut Tape, store: &ParamStore, x: Var) -> Result<Inverted> {
        self.check_image(g.shape(x))?;
        let mut z = x;
        let mut total: Option<Var> = None;
        let mut layer_logdets = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, ld) = layer.reverse(g, store, z)?;
            z = next;
            total = Some(match total {
                None => ld,
                Some(t) => g.add(t, ld)?,
            });
            layer_logdets.push(ld);
        }
        Ok(Inverted {
            z,
            logdet: total.expect("at least one layer"),
            layer_logdets,
        })
    }

    /// Latent `[N,4C,H/2,W/2]` to image `[N,C,H,W]`.
    pub fn generate(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<Generated> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.latent_shape() {
            return Err(Error::ShapeMismatch {
                op: "flow.generate",
                lhs: shape,
                rhs: self.config.latent_shape().to_vec(),
            });
        }
        let mut x = z;
        let mut saturated = 0;
        for layer in self.layers.iter().rev() {
            let (next, sat) = layer.forward(g, store, x)?;
            x = next;
            saturated += sat;
        }
        Ok(Generated { x, saturated })
    }

    /// Graph-free convenience: `(z, per-sample logdet)`.
    pub fn invert_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Tape::inference();
        let v = g.constant(x.clone())?;
        let inv = self.invert(&mut g, store, v)?;
        Ok((g.value(inv.z).clone(), g.value(inv.logdet).data().to_vec()))
    }

    /// Graph-free convenience: `(x, saturation count)`.
    pub fn generate_tensor(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, usize)> {
        let mut g = Tape::inference();
        let v = g.constant(z.clone())?;
        let out = self.generate(&mut g, store, v)?;
        Ok((g.value(out.x).clone(), out.saturated))
    }

    /// Verify every 1x1 convolution is still invertible.
    pub fn check_invertible(&self, store: &ParamStore) -> Result<()> {
        for layer in &self.layers {
            if let FlowLayer::InvConv1x1(c) = layer {
                c.check(store)?;
            }
        }
        Ok(())
    }
}

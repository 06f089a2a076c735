//! Per-modality identity encoders, modality discriminators and the four
//! adversarial losses.
//!
//! Losses take precomputed features or scores; which side is trainable is
//! decided by the [`Tape`] they are recorded on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

/// Largest distance between two unit vectors.
pub const MAX_FEATURE_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    /// Output channels of the four stride-2 convolutions.
    pub widths: [usize; 4],
    /// Encoder feature dimension.
    pub feature_dim: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            feature_dim: 64,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config(
                "adversary widths and feature_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn conv_param(
    store: &mut ParamStore,
    name: &str,
    group: Group,
    cout: usize,
    cin: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId)> {
    let std = (1.0 / (cin * 9) as f64).sqrt();
    let w: Vec<f64> = (0..cout * cin * 9)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((
        store.add(
            format!("{name}.weight"),
            group,
            Tensor::new(vec![cout, cin, 3, 3], w)?,
        ),
        store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
    ))
}

/// Four 3x3 stride-2 convolutions with tanh activations.
#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<(ParamId, ParamId)>,
    image_shape: [usize; 3],
}

impl Trunk {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        image_shape: [usize; 3],
        widths: [usize; 4],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut cin = image_shape[0];
        let mut convs = Vec::with_capacity(4);
        for (k, &cout) in widths.iter().enumerate() {
            convs.push(conv_param(
                store,
                &format!("{prefix}.conv{}", k + 1),
                group,
                cout,
                cin,
                rng,
            )?);
            cin = cout;
        }
        Ok(Self { convs, image_shape })
    }

    fn apply(&self, g: &mut Tape, store: &ParamStore, x: Var, op: &'static str) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != self.image_shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: self.image_shape.to_vec(),
            });
        }
        let mut h = x;
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(store, w)?, g.param(store, b)?);
            h = g.conv2d(h, w, Some(b), 2)?;
            h = g.tanh(h)?;
        }
        Ok(h)
    }
}

/// Mean over the spatial extent: `[N,C,H,W] -> [N,C]`.
fn global_average_pool(g: &mut Tape, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.mean_axis(flat, 2)
}

/// Image encoder producing unit-length identity features.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub modality: Modality,
    pub feature_dim: usize,
    trunk: Trunk,
    head_w: ParamId,
    head_b: ParamId,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        modality: Modality,
        image_shape: [usize; 3],
        config: AdversaryConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let trunk = Trunk::new(store, name, group, image_shape, config.widths, rng)?;
        let cin = config.widths[3];
        let std = (1.0 / cin as f64).sqrt();
        let w: Vec<f64> = (0..cin * config.feature_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let head_w = store.add(
            format!("{name}.head.weight"),
            group,
            Tensor::new(vec![cin, config.feature_dim], w)?,
        );
        let head_b = store.add(
            format!("{name}.head.bias"),
            group,
            Tensor::zeros(&[config.feature_dim]),
        );
        Ok(Self {
            modality,
            feature_dim: config.feature_dim,
            trunk,
            head_w,
            head_b,
        })
    }

    /// `[N,C,H,W]` images to `[N,D]` unit features.
    pub fn encode(&self, g: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.trunk.apply(g, store, x, "encode")?;
        let pooled = global_average_pool(g, h)?;
        let (w, b) = (g.param(store, self.head_w)?, g.param(store, self.head_b)?);
        let f = g.matmul(pooled, w)?;
        let f = g.add(f, b)?;
        g.l2_normalize(f)
    }

    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Tape::inference();
        let v = g.constant(x.clone())?;
        let f = self.encode(&mut g, store, v)?;
        Ok(g.value(f).clone())
    }
}

/// Binary modality classifier with output in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct ModalityDiscriminator {
    pub modality: Modality,
    trunk: Trunk,
    out_w: ParamId,
    out_b: ParamId,
}

impl ModalityDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        modality: Modality,
        image_shape: [usize; 3],
        config: AdversaryConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let trunk = Trunk::new(store, name, group, image_shape, config.widths, rng)?;
        let (out_w, out_b) = conv_param(
            store,
            &format!("{name}.out"),
            group,
            1,
            config.widths[3],
            rng,
        )?;
        Ok(Self {
            modality,
            trunk,
            out_w,
            out_b,
        })
    }

    /// Final-layer parameters, exposed for tests that pin the output.
    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    /// `[N,C,H,W]` images to `[N]` probabilities of being real.
    pub fn score(&self, g: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.trunk.apply(g, store, x, "modality_logit")?;
        let (w, b) = (g.param(store, self.out_w)?, g.param(store, self.out_b)?);
        let h = g.conv2d(h, w, Some(b), 1)?;
        let pooled = global_average_pool(g, h)?;
        let flat = g.reshape(pooled, &[n])?;
        g.sigmoid(flat)
    }

    pub fn score_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Tape::inference();
        let v = g.constant(x.clone())?;
        let s = self.score(&mut g, store, v)?;
        Ok(g.value(s).clone())
    }
}

/// `(real, translated)` index pairs sharing an identity label.
pub fn identity_pairs(real_ids: &[u32], fake_ids: &[u32]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, a) in real_ids.iter().enumerate() {
        for (j, b) in fake_ids.iter().enumerate() {
            if a == b {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Features of real images, features of translated images, and the pairs
/// of rows to compare.
#[derive(Debug, Clone)]
pub struct PairedFeatures {
    pub real: Var,
    pub fake: Var,
    pub pairs: Vec<(usize, usize)>,
}

impl PairedFeatures {
    /// Mean Euclidean feature distance over the pairs.
    pub fn mean_distance(&self, g: &mut Tape, what: &'static str) -> Result<Var> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyPairs(what));
        }
        let left: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        let a = g.gather_rows(self.real, &left)?;
        let b = g.gather_rows(self.fake, &right)?;
        let d = g.row_distance(a, b)?;
        g.mean(d)
    }
}

/// Mean real/translated feature distance, summed over both modalities.
/// Minimized by the generators; lies in `[0, 4]`.
pub fn identity_gen_loss(
    g: &mut Tape,
    visible: &PairedFeatures,
    infrared: &PairedFeatures,
) -> Result<Var> {
    let dv = visible.mean_distance(g, "visible identity")?;
    let dr = infrared.mean_distance(g, "infrared identity")?;
    g.add(dv, dr)
}

/// `(2 - mean d_v) + (2 - mean d_r)`. Minimized by the encoders; lies in `[0, 4]`.
pub fn identity_disc_loss(
    g: &mut Tape,
    visible: &PairedFeatures,
    infrared: &PairedFeatures,
) -> Result<Var> {
    let dv = visible.mean_distance(g, "visible identity")?;
    let dr = infrared.mean_distance(g, "infrared identity")?;
    let sum = g.add(dv, dr)?;
    g.affine(sum, -1.0, 2.0 * MAX_FEATURE_DISTANCE)
}

/// `mean((target - s)^2)`.
fn squared_error(g: &mut Tape, scores: Var, target: f64) -> Result<Var> {
    let diff = g.affine(scores, 1.0, -target)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Least-squares generator target: translated images scored as real.
/// Lies in `[0, 2]`.
pub fn modality_gen_loss(g: &mut Tape, fake_visible: Var, fake_infrared: Var) -> Result<Var> {
    let v = squared_error(g, fake_visible, 1.0)?;
    let r = squared_error(g, fake_infrared, 1.0)?;
    g.add(v, r)
}

/// Least-squares discriminator target: reals to 1, translations to 0.
/// Lies in `[0, 4]`.
pub fn modality_disc_loss(
    g: &mut Tape,
    real_visible: Var,
    fake_visible: Var,
    real_infrared: Var,
    fake_infrared: Var,
) -> Result<Var> {
    let terms = [
        squared_error(g, real_visible, 1.0)?,
        squared_error(g, fake_visible, 0.0)?,
        squared_error(g, real_infrared, 1.0)?,
        squared_error(g, fake_infrared, 0.0)?,
    ];
    let a = g.add(terms[0], terms[1])?;
    let b = g.add(terms[2], terms[3])?;
    g.add(a, b)
}

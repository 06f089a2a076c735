//! Invertible layers. `reverse` maps the image side to the latent side and
//! returns a per-sample log-determinant of that map; `forward` is its exact
//! inverse.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::linalg::{self, Lu};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

/// Clamp applied before `atanh` when generating.
pub const ATANH_EPS: f64 = 1e-6;
/// `|det W|` must stay above this for an invertible 1x1 convolution.
pub const DET_THRESHOLD: f64 = 1e-12;
/// Hidden width of the coupling subnetworks.
pub const COUPLING_HIDDEN: usize = 32;

/// Per-sample zeros `[N]` plus a broadcast scalar.
fn broadcast_logdet(g: &mut Tape, scalar: Var, n: usize) -> Result<Var> {
    let zeros = g.constant(Tensor::zeros(&[n]))?;
    g.add(zeros, scalar)
}

fn batch(g: &Tape, x: Var) -> usize {
    g.shape(x)[0]
}

/// Learned channel mixing `z' = W z` at every spatial position.
#[derive(Debug, Clone)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

impl InvConv1x1 {
    /// Random rotation: QR of a Gaussian matrix, so `|det W| = 1`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w: Vec<f64> = (0..channels * channels)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        linalg::orthonormalize(&mut w, channels)?;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::new(vec![channels, channels], w)?,
        );
        Ok(Self { weight, channels })
    }

    pub fn lu(&self, store: &ParamStore) -> Result<Lu> {
        Lu::new(store.value(self.weight).data(), self.channels)
    }

    /// Error if `W` has become (numerically) singular.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let lu = self.lu(store)?;
        if lu.is_singular(DET_THRESHOLD) {
            return Err(Error::Singular {
                abs_det: lu.det().abs(),
            });
        }
        Ok(())
    }

    pub fn reverse(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let s = g.shape(z).to_vec();
        let spatial: usize = s[2..].iter().product();
        let w = g.param(store, self.weight)?;
        let y = g.channel_mix(z, w)?;
        let lad = g.log_abs_det(w)?;
        let lad = g.scale(lad, spatial as f64)?;
        let ld = broadcast_logdet(g, lad, s[0])?;
        Ok((y, ld))
    }

    pub fn forward(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let inv = g.mat_inverse(w)?;
        g.channel_mix(z, inv)
    }
}

/// Two 3x3 convolutions with a tanh in between; the last one starts at zero.
#[derive(Debug, Clone)]
pub struct CouplingNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl CouplingNet {
    fn init(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (1.0 / (cin * 9) as f64).sqrt();
        let w1: Vec<f64> = (0..COUPLING_HIDDEN * cin * 9)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            w1: store.add(
                format!("{name}.conv1.weight"),
                group,
                Tensor::new(vec![COUPLING_HIDDEN, cin, 3, 3], w1)?,
            ),
            b1: store.add(
                format!("{name}.conv1.bias"),
                group,
                Tensor::zeros(&[COUPLING_HIDDEN]),
            ),
            w2: store.add(
                format!("{name}.conv2.weight"),
                group,
                Tensor::zeros(&[cout, COUPLING_HIDDEN, 3, 3]),
            ),
            b2: store.add(format!("{name}.conv2.bias"), group, Tensor::zeros(&[cout])),
        })
    }

    pub fn apply(&self, g: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1)?, g.param(store, self.b1)?);
        let (w2, b2) = (g.param(store, self.w2)?, g.param(store, self.b2)?);
        let h = g.conv2d(x, w1, Some(b1), 1)?;
        let h = g.tanh(h)?;
        g.conv2d(h, w2, Some(b2), 1)
    }

    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.w2, self.b2)
    }
}

/// Affine coupling: the first `split` channels pass through and condition a
/// sigmoid scale and a shift of the rest.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub split: usize,
    pub channels: usize,
    pub scale_net: CouplingNet,
    pub shift_net: CouplingNet,
}

impl AffineCoupling {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        channels: usize,
        split: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if split == 0 || split >= channels {
            return Err(Error::Config(format!(
                "coupling split {split} must be in [1, {channels})"
            )));
        }
        let rest = channels - split;
        Ok(Self {
            split,
            channels,
            scale_net: CouplingNet::init(store, &format!("{name}.scale"), group, split, rest, rng)?,
            shift_net: CouplingNet::init(store, &format!("{name}.shift"), group, split, rest, rng)?,
        })
    }

    /// Returns `(pre-sigmoid scale logits, shift)` for the conditioning half.
    fn scale_shift(&self, g: &mut Tape, store: &ParamStore, cond: Var) -> Result<(Var, Var)> {
        let logits = self.scale_net.apply(g, store, cond)?;
        let shift = self.shift_net.apply(g, store, cond)?;
        Ok((logits, shift))
    }

    pub fn reverse(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let (keep, change) = g.split_channels(z, self.split)?;
        let (logits, shift) = self.scale_shift(g, store, keep)?;
        let s = g.sigmoid(logits)?;
        let scaled = g.mul(change, s)?;
        let y = g.add(scaled, shift)?;
        let out = g.concat(&[keep, y], 1)?;
        // log sigmoid(a) = -softplus(-a)
        let neg = g.neg(logits)?;
        let sp = g.softplus(neg)?;
        let total = g.sum_per_row(sp)?;
        let ld = g.neg(total)?;
        Ok((out, ld))
    }

    pub fn forward(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (keep, change) = g.split_channels(z, self.split)?;
        let (logits, shift) = self.scale_shift(g, store, keep)?;
        let s = g.sigmoid(logits)?;
        let centered = g.sub(change, shift)?;
        let y = g.div(centered, s)?;
        g.concat(&[keep, y], 1)
    }
}

/// Parameter-free elementwise tanh; generation uses a clamped artanh.
#[derive(Debug, Clone, Copy)]
pub struct TanhActivation {
    pub eps: f64,
}

impl Default for TanhActivation {
    fn default() -> Self {
        Self { eps: ATANH_EPS }
    }
}

impl TanhActivation {
    pub fn reverse(&self, g: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let y = g.tanh(z)?;
        // log(1 - tanh^2 z) = log 4 + 2z - 2 softplus(2z)
        let two_z = g.scale(z, 2.0)?;
        let sp = g.softplus(two_z)?;
        let two_sp = g.scale(sp, 2.0)?;
        let diff = g.sub(two_z, two_sp)?;
        let per = g.affine(diff, 1.0, 4f64.ln())?;
        let ld = g.sum_per_row(per)?;
        Ok((y, ld))
    }

    /// Returns the output and the number of clamped elements.
    pub fn forward(&self, g: &mut Tape, z: Var) -> Result<(Var, usize)> {
        g.atanh_clamped(z, self.eps)
    }
}

/// Space-to-channel by a factor of 2; a permutation, so log-determinant 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct Squeeze;

impl Squeeze {
    pub fn reverse(&self, g: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = batch(g, z);
        let y = g.squeeze2(z)?;
        let ld = g.constant(Tensor::zeros(&[n]))?;
        Ok((y, ld))
    }

    pub fn forward(&self, g: &mut Tape, z: Var) -> Result<Var> {
        g.unsqueeze2(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Squeeze,
    Tanh,
    InvConv1x1,
    AffineCoupling,
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Squeeze(Squeeze),
    Tanh(TanhActivation),
    InvConv1x1(InvConv1x1),
    AffineCoupling(AffineCoupling),
}

impl FlowLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayer::Squeeze(_) => LayerKind::Squeeze,
            FlowLayer::Tanh(_) => LayerKind::Tanh,
            FlowLayer::InvConv1x1(_) => LayerKind::InvConv1x1,
            FlowLayer::AffineCoupling(_) => LayerKind::AffineCoupling,
        }
    }

    pub fn reverse(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        match self {
            FlowLayer::Squeeze(l) => l.reverse(g, z),
            FlowLayer::Tanh(l) => l.reverse(g, z),
            FlowLayer::InvConv1x1(l) => l.reverse(g, store, z),
            FlowLayer::AffineCoupling(l) => l.reverse(g, store, z),
        }
    }

    /// Returns the output and the number of artanh clamp events.
    pub fn forward(&self, g: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, usize)> {
        match self {
            FlowLayer::Squeeze(l) => Ok((l.forward(g, z)?, 0)),
            FlowLayer::Tanh(l) => l.forward(g, z),
            FlowLayer::InvConv1x1(l) => Ok((l.forward(g, store, z)?, 0)),
            FlowLayer::AffineCoupling(l) => Ok((l.forward(g, store, z)?, 0)),
        }
    }
}

/// Build one layer. `channels`/`split` are ignored by parameter-free kinds.
pub fn init_layer(
    store: &mut ParamStore,
    kind: LayerKind,
    channels: usize,
    split: usize,
    name: &str,
    group: Group,
    rng: &mut impl Rng,
) -> Result<FlowLayer> {
    Ok(match kind {
        LayerKind::Squeeze => FlowLayer::Squeeze(Squeeze),
        LayerKind::Tanh => FlowLayer::Tanh(TanhActivation::default()),
        LayerKind::InvConv1x1 => {
            FlowLayer::InvConv1x1(InvConv1x1::init(store, name, group, channels, rng)?)
        }
        LayerKind::AffineCoupling => FlowLayer::AffineCoupling(AffineCoupling::init(
            store, name, group, channels, split, rng,
        )?),
    })
}

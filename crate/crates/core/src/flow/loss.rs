use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Isotropic Gaussian prior on the shared latent space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for GaussianPrior {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl GaussianPrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Config(format!(
                "prior std must be positive, got {std}"
            )));
        }
        Ok(Self { mean, std })
    }
}

/// `1/(2σ²) Σ (z-μ)² - Σ logdet` for one modality, summed over the batch.
/// The `m/2 log 2π + m log σ` constants are left out.
pub fn modality_flow_loss(g: &mut Tape, z: Var, logdet: Var, prior: GaussianPrior) -> Result<Var> {
    let centered = g.affine(z, 1.0, -prior.mean)?;
    let sq = g.square(centered)?;
    let energy = g.sum(sq)?;
    let energy = g.scale(energy, 1.0 / (2.0 * prior.std * prior.std))?;
    let ld = g.sum(logdet)?;
    g.sub(energy, ld)
}

/// Flow loss summed over both generators.
pub fn flow_loss(
    g: &mut Tape,
    z_visible: Var,
    logdet_visible: Var,
    z_infrared: Var,
    logdet_infrared: Var,
    prior: GaussianPrior,
) -> Result<Var> {
    let v = modality_flow_loss(g, z_visible, logdet_visible, prior)?;
    let r = modality_flow_loss(g, z_infrared, logdet_infrared, prior)?;
    g.add(v, r)
}

/// Full Gaussian negative log-likelihood in nats, constants included.
pub fn full_nll(z: &Tensor, logdet: &[f64], prior: GaussianPrior) -> f64 {
    let m = z.len() as f64;
    let energy: f64 = z
        .data()
        .iter()
        .map(|v| (v - prior.mean).powi(2))
        .sum::<f64>()
        / (2.0 * prior.std * prior.std);
    0.5 * m * (2.0 * PI).ln() + m * prior.std.ln() + energy - logdet.iter().sum::<f64>()
}

/// Full NLL divided by `(element count) · ln 2`.
pub fn bits_per_dim(z: &Tensor, logdet: &[f64], prior: GaussianPrior) -> f64 {
    full_nll(z, logdet, prior) / (z.len() as f64 * LN_2)
}

/// How latent pairs are formed for the clustering loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePairing {
    /// Pairs span both modalities.
    #[default]
    CrossModality,
    /// Only pairs from the same modality.
    WithinModality,
}

pub type PairList = Vec<(usize, usize)>;

/// Unordered index pairs `(i, j)`, `i < j`, split into same-identity and
/// different-identity lists.
pub fn latent_pairs(
    identities: &[u32],
    modalities: &[Modality],
    pairing: NoisePairing,
) -> (PairList, PairList) {
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..identities.len() {
        for j in i + 1..identities.len() {
            if pairing == NoisePairing::WithinModality && modalities[i] != modalities[j] {
                continue;
            }
            if identities[i] == identities[j] {
                intra.push((i, j));
            } else {
                inter.push((i, j));
            }
        }
    }
    (intra, inter)
}

fn mean_pair_distance(g: &mut Tape, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = g.gather_rows(z, &left)?;
    let b = g.gather_rows(z, &right)?;
    let d = g.row_distance(a, b)?;
    g.mean(d)
}

/// Mean intra-identity latent distance minus mean inter-identity distance.
/// `z` is `[N, ...]` and is compared flattened per sample.
pub fn noise_loss(
    g: &mut Tape,
    z: Var,
    identities: &[u32],
    modalities: &[Modality],
    pairing: NoisePairing,
) -> Result<Var> {
    let n = g.shape(z)[0];
    if identities.len() != n || modalities.len() != n {
        return Err(Error::ShapeMismatch {
            op: "noise_loss",
            lhs: g.shape(z).to_vec(),
            rhs: vec![identities.len()],
        });
    }
    let (intra, inter) = latent_pairs(identities, modalities, pairing);
    if intra.is_empty() {
        return Err(Error::MissingPairs("intra-class"));
    }
    if inter.is_empty() {
        return Err(Error::MissingPairs("inter-class"));
    }
    let near = mean_pair_distance(g, z, &intra)?;
    let far = mean_pair_distance(g, z, &inter)?;
    g.sub(near, far)
}

/// `flow + λ · noise`.
pub fn generator_loss(g: &mut Tape, flow: Var, noise: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let weighted = g.scale(noise, lambda)?;
    g.add(flow, weighted)
}

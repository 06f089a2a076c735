//! Alternating optimization: each iteration runs two generator steps and
//! then one discriminator step, each on a freshly sampled batch.

use std::f64::consts::LN_2;
use std::fmt;

use log::error;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversaries::{
    identity_disc_loss, identity_gen_loss, identity_pairs, modality_disc_loss, modality_gen_loss,
    AdversaryConfig, PairedFeatures,
};
use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::flow::{
    bits_per_dim, generator_loss, modality_flow_loss, noise_loss, ActivationPlacement,
    GaussianPrior, NoisePairing,
};
use crate::model::{dequantize, preprocess, Flow2Flow, ModelConfig, PIXEL_STEP};
use crate::tensor::{Adam, AdamConfig, Group, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the latent clustering term.
    pub lambda: f64,
    pub identities_per_batch: usize,
    /// Images per identity per modality in a batch.
    pub images_per_identity: usize,
    pub blocks: usize,
    pub seed: u64,
    /// Weight of the identity adversarial terms.
    pub identity_weight: f64,
    /// Weight of the modality adversarial terms.
    pub modality_weight: f64,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub adversary: AdversaryConfig,
    pub activation: ActivationPlacement,
    pub noise_pairing: NoisePairing,
    pub prior: GaussianPrior,
    /// Add uniform dequantization noise to training images.
    pub dequantize: bool,
    /// Use one batch for both generator steps of an iteration.
    pub reuse_generator_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 2e-4,
            lambda: 0.01,
            identities_per_batch: 4,
            images_per_identity: 2,
            blocks: 12,
            seed: 0,
            identity_weight: 1.0,
            modality_weight: 1.0,
            image_size: [24, 12],
            adversary: AdversaryConfig::default(),
            activation: ActivationPlacement::default(),
            noise_pairing: NoisePairing::CrossModality,
            prior: GaussianPrior::default(),
            dequantize: true,
            reuse_generator_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("identities_per_batch", self.identities_per_batch),
            ("images_per_identity", self.images_per_identity),
            ("blocks", self.blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.identities_per_batch < 2 {
            return Err(Error::Config(
                "identities_per_batch must be at least 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("identity_weight", self.identity_weight),
            ("modality_weight", self.modality_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        GaussianPrior::new(self.prior.mean, self.prior.std)?;
        self.adversary.validate()?;
        self.model_config().flow().validate()
    }

    /// Images per batch over both modalities.
    pub fn batch_size(&self) -> usize {
        2 * self.identities_per_batch * self.images_per_identity
    }

    /// `epochs * ceil(dataset_len / batch_size)`.
    pub fn iterations(&self, dataset_len: usize) -> u64 {
        (self.epochs * dataset_len.div_ceil(self.batch_size())) as u64
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            image_shape: [3, self.image_size[0], self.image_size[1]],
            activation: self.activation,
            adversary: self.adversary,
            prior: self.prior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Gen,
    Disc,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Gen => "gen",
            Phase::Disc => "disc",
        })
    }
}

/// One logged optimizer step. Fields a phase does not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub phase: Phase,
    pub l_flow_v: Option<f64>,
    pub l_flow_r: Option<f64>,
    pub l_noise: Option<f64>,
    pub l_id_g: Option<f64>,
    pub l_id_d: Option<f64>,
    pub l_mod_g: Option<f64>,
    pub l_mod_d: Option<f64>,
    pub bpd_v: Option<f64>,
    pub bpd_r: Option<f64>,
    pub sat_count: usize,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "iter,phase,l_flow_v,l_flow_r,l_noise,l_id_g,l_id_d,l_mod_g,l_mod_d,bpd_v,bpd_r,sat_count";

    fn empty(iter: u64, phase: Phase) -> Self {
        Self {
            iter,
            phase,
            l_flow_v: None,
            l_flow_r: None,
            l_noise: None,
            l_id_g: None,
            l_id_d: None,
            l_mod_g: None,
            l_mod_d: None,
            bpd_v: None,
            bpd_r: None,
            sat_count: 0,
        }
    }

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.l_flow_v,
            self.l_flow_r,
            self.l_noise,
            self.l_id_g,
            self.l_id_d,
            self.l_mod_g,
            self.l_mod_d,
            self.bpd_v,
            self.bpd_r,
        ]
    }

    /// CSV line without the trailing newline.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.iter, self.phase);
        for v in self.values() {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&format!("{v}"));
            }
        }
        s.push_str(&format!(",{}", self.sat_count));
        s
    }

    /// Parse a line produced by [`MetricsRow::to_csv`].
    pub fn parse_csv(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("metrics row `{line}`: {why}"));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(bad("expected 12 cells"));
        }
        let phase = match cells[1] {
            "gen" => Phase::Gen,
            "disc" => Phase::Disc,
            _ => return Err(bad("unknown phase")),
        };
        let num = |c: &str| -> Result<Option<f64>> {
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse().map(Some).map_err(|_| bad("bad number"))
            }
        };
        let v: Vec<Option<f64>> = cells[2..11].iter().map(|c| num(c)).collect::<Result<_>>()?;
        Ok(Self {
            iter: cells[0].parse().map_err(|_| bad("bad iteration"))?,
            phase,
            l_flow_v: v[0],
            l_flow_r: v[1],
            l_noise: v[2],
            l_id_g: v[3],
            l_id_d: v[4],
            l_mod_g: v[5],
            l_mod_d: v[6],
            bpd_v: v[7],
            bpd_r: v[8],
            sat_count: cells[11].parse().map_err(|_| bad("bad saturation count"))?,
        })
    }
}

/// Bits per dimension in the 8-bit pixel space: the model-space value plus
/// the `log2(255 / 1.8)` change of scale.
pub fn pixel_bits_per_dim(z: &Tensor, logdet: &[f64], prior: GaussianPrior) -> f64 {
    bits_per_dim(z, logdet, prior) - PIXEL_STEP.ln() / LN_2
}

/// Dataset indices for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
}

/// Identity-balanced sampler: `P` identities, `K` images per modality each.
#[derive(Debug, Clone)]
pub struct Sampler {
    per_identity: usize,
    identities: usize,
    /// `(visible indices, infrared indices)` for every identity present in both.
    pools: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Sampler {
    pub fn new(dataset: &Dataset, identities: usize, per_identity: usize) -> Result<Self> {
        let pools: Vec<_> = dataset
            .identities()
            .into_iter()
            .map(|id| {
                (
                    dataset.indices(Modality::Visible, id),
                    dataset.indices(Modality::Infrared, id),
                )
            })
            .filter(|(v, r)| !v.is_empty() && !r.is_empty())
            .collect();
        if pools.len() < identities {
            return Err(Error::Config(format!(
                "dataset has {} identities with both modalities, batch needs {identities}",
                pools.len()
            )));
        }
        Ok(Self {
            per_identity,
            identities,
            pools,
        })
    }

    fn draw(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
        if pool.len() >= k {
            pool.choose_multiple(rng, k).copied().collect()
        } else {
            (0..k)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Batch {
        let chosen: Vec<&(Vec<usize>, Vec<usize>)> =
            self.pools.choose_multiple(rng, self.identities).collect();
        let mut batch = Batch {
            visible: Vec::new(),
            infrared: Vec::new(),
        };
        for (v, r) in chosen {
            batch.visible.extend(Self::draw(v, self.per_identity, rng));
            batch.infrared.extend(Self::draw(r, self.per_identity, rng));
        }
        batch
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Flow2Flow,
    pub flow_opt: Adam,
    pub disc_opt: Adam,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: the model is initialized from `config.seed`, and the
    /// same generator stream then drives sampling and dequantization.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Flow2Flow::new(config.model_config(), &mut rng)?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let flow_opt = Adam::new(adam, &model.store, model.store.ids_in(&Group::FLOWS));
        let disc_opt = Adam::new(
            adam,
            &model.store,
            model.store.ids_in(&Group::DISCRIMINATORS),
        );
        Ok(Self {
            model,
            flow_opt,
            disc_opt,
            iteration: 0,
            rng,
        })
    }
}

fn images(dataset: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<u32>)> {
    let imgs: Vec<Tensor> = idx
        .iter()
        .map(|&i| dataset.samples[i].image.clone())
        .collect();
    let ids = idx.iter().map(|&i| dataset.samples[i].identity).collect();
    Ok((Tensor::stack(&imgs)?, ids))
}

fn value(g: &Tape, v: Var) -> f64 {
    g.value(v).item()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    sampler: Sampler,
    total: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let state = TrainState::new(&config)?;
        Self::resume(config, dataset, state)
    }

    /// Continue from an existing state.
    pub fn resume(config: TrainConfig, dataset: &Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        let want = [3, config.image_size[0], config.image_size[1]];
        if let Some(bad) = dataset.samples.iter().find(|s| s.image.shape() != want) {
            return Err(Error::Config(format!(
                "sample `{}` has shape {:?}, config expects {want:?}",
                bad.name,
                bad.image.shape()
            )));
        }
        let sampler = Sampler::new(
            dataset,
            config.identities_per_batch,
            config.images_per_identity,
        )?;
        let total = config.iterations(dataset.len());
        Ok(Self {
            config,
            state,
            sampler,
            total,
        })
    }

    pub fn total_iterations(&self) -> u64 {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total
    }

    pub fn sample_batch(&mut self) -> Batch {
        self.sampler.sample(&mut self.state.rng)
    }

    fn inputs(&mut self, dataset: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let (raw, ids) = images(dataset, idx)?;
        let x = if self.config.dequantize {
            dequantize(&raw, &mut self.state.rng)
        } else {
            preprocess(&raw)
        };
        Ok((x, ids))
    }

    fn ensure_frozen(&self, groups: &[Group], before: u64, phase: Phase) -> Result<()> {
        if self.state.model.store.fingerprint(groups) != before {
            return Err(Error::Numeric(format!(
                "{phase} step modified frozen parameters"
            )));
        }
        Ok(())
    }

    /// One flow update on `batch`; encoders and discriminators are frozen.
    pub fn generator_step(
        &mut self,
        dataset: &Dataset,
        batch: &Batch,
        iter: u64,
    ) -> Result<MetricsRow> {
        let (xv, ids_v) = self.inputs(dataset, &batch.visible)?;
        let (xr, ids_r) = self.inputs(dataset, &batch.infrared)?;
        let frozen = self.state.model.store.fingerprint(&Group::DISCRIMINATORS);
        let cfg = self.config;
        let m = &self.state.model;
        let s = &m.store;
        let mut g = Tape::training(&Group::FLOWS);
        let xv = g.constant(xv)?;
        let xr = g.constant(xr)?;
        let inv_v = m.flow_visible.invert(&mut g, s, xv)?;
        let inv_r = m.flow_infrared.invert(&mut g, s, xr)?;
        let l_flow_v = modality_flow_loss(&mut g, inv_v.z, inv_v.logdet, cfg.prior)?;
        let l_flow_r = modality_flow_loss(&mut g, inv_r.z, inv_r.logdet, cfg.prior)?;
        let l_flow = g.add(l_flow_v, l_flow_r)?;

        let z_all = g.concat(&[inv_v.z, inv_r.z], 0)?;
        let ids_all: Vec<u32> = ids_v.iter().chain(&ids_r).copied().collect();
        let mods: Vec<Modality> = std::iter::repeat_n(Modality::Visible, ids_v.len())
            .chain(std::iter::repeat_n(Modality::Infrared, ids_r.len()))
            .collect();
        let l_noise = noise_loss(&mut g, z_all, &ids_all, &mods, cfg.noise_pairing)?;
        let l_gen = generator_loss(&mut g, l_flow, l_noise, cfg.lambda)?;

        // Translations: infrared -> visible carries infrared labels and vice versa.
        let fake_v = m.flow_visible.generate(&mut g, s, inv_r.z)?;
        let fake_r = m.flow_infrared.generate(&mut g, s, inv_v.z)?;
        let pv = PairedFeatures {
            real: m.encoder_visible.encode(&mut g, s, xv)?,
            fake: m.encoder_visible.encode(&mut g, s, fake_v.x)?,
            pairs: identity_pairs(&ids_v, &ids_r),
        };
        let pr = PairedFeatures {
            real: m.encoder_infrared.encode(&mut g, s, xr)?,
            fake: m.encoder_infrared.encode(&mut g, s, fake_r.x)?,
            pairs: identity_pairs(&ids_r, &ids_v),
        };
        let l_id_g = identity_gen_loss(&mut g, &pv, &pr)?;
        let score_v = m.disc_visible.score(&mut g, s, fake_v.x)?;
        let score_r = m.disc_infrared.score(&mut g, s, fake_r.x)?;
        let l_mod_g = modality_gen_loss(&mut g, score_v, score_r)?;

        let id_term = g.scale(l_id_g, cfg.identity_weight)?;
        let mod_term = g.scale(l_mod_g, cfg.modality_weight)?;
        let total = g.add(l_gen, id_term)?;
        let total = g.add(total, mod_term)?;

        let zv = g.value(inv_v.z).clone();
        let zr = g.value(inv_r.z).clone();
        let row = MetricsRow {
            l_flow_v: Some(value(&g, l_flow_v)),
            l_flow_r: Some(value(&g, l_flow_r)),
            l_noise: Some(value(&g, l_noise)),
            l_id_g: Some(value(&g, l_id_g)),
            l_mod_g: Some(value(&g, l_mod_g)),
            bpd_v: Some(pixel_bits_per_dim(
                &zv,
                g.value(inv_v.logdet).data(),
                cfg.prior,
            )),
            bpd_r: Some(pixel_bits_per_dim(
                &zr,
                g.value(inv_r.logdet).data(),
                cfg.prior,
            )),
            sat_count: fake_v.saturated + fake_r.saturated,
            ..MetricsRow::empty(iter, Phase::Gen)
        };
        check_finite(value(&g, total), &row)?;
        g.backward_into(total, &mut self.state.model.store)?;
        self.state.flow_opt.step(&mut self.state.model.store)?;
        self.ensure_frozen(&Group::DISCRIMINATORS, frozen, Phase::Gen)?;
        Ok(row)
    }

    /// One encoder/discriminator update on `batch`; flows are frozen.
    pub fn discriminator_step(
        &mut self,
        dataset: &Dataset,
        batch: &Batch,
        iter: u64,
    ) -> Result<MetricsRow> {
        let (xv_t, ids_v) = self.inputs(dataset, &batch.visible)?;
        let (xr_t, ids_r) = self.inputs(dataset, &batch.infrared)?;
        let frozen = self.state.model.store.fingerprint(&Group::FLOWS);
        let cfg = self.config;
        let m = &self.state.model;
        let s = &m.store;

        let (zv, _) = m.flow_visible.invert_tensor(s, &xv_t)?;
        let (zr, _) = m.flow_infrared.invert_tensor(s, &xr_t)?;
        let (fake_v_t, sat_v) = m.flow_visible.generate_tensor(s, &zr)?;
        let (fake_r_t, sat_r) = m.flow_infrared.generate_tensor(s, &zv)?;

        let mut g = Tape::training(&Group::DISCRIMINATORS);
        let xv = g.constant(xv_t)?;
        let xr = g.constant(xr_t)?;
        let fake_v = g.constant(fake_v_t)?;
        let fake_r = g.constant(fake_r_t)?;
        let pv = PairedFeatures {
            real: m.encoder_visible.encode(&mut g, s, xv)?,
            fake: m.encoder_visible.encode(&mut g, s, fake_v)?,
            pairs: identity_pairs(&ids_v, &ids_r),
        };
        let pr = PairedFeatures {
            real: m.encoder_infrared.encode(&mut g, s, xr)?,
            fake: m.encoder_infrared.encode(&mut g, s, fake_r)?,
            pairs: identity_pairs(&ids_r, &ids_v),
        };
        let l_id_d = identity_disc_loss(&mut g, &pv, &pr)?;
        let real_sv = m.disc_visible.score(&mut g, s, xv)?;
        let fake_sv = m.disc_visible.score(&mut g, s, fake_v)?;
        let real_sr = m.disc_infrared.score(&mut g, s, xr)?;
        let fake_sr = m.disc_infrared.score(&mut g, s, fake_r)?;
        let l_mod_d = modality_disc_loss(&mut g, real_sv, fake_sv, real_sr, fake_sr)?;
        let id_term = g.scale(l_id_d, cfg.identity_weight)?;
        let mod_term = g.scale(l_mod_d, cfg.modality_weight)?;
        let total = g.add(id_term, mod_term)?;

        let row = MetricsRow {
            l_id_d: Some(value(&g, l_id_d)),
            l_mod_d: Some(value(&g, l_mod_d)),
            sat_count: sat_v + sat_r,
            ..MetricsRow::empty(iter, Phase::Disc)
        };
        check_finite(value(&g, total), &row)?;
        g.backward_into(total, &mut self.state.model.store)?;
        self.state.disc_opt.step(&mut self.state.model.store)?;
        self.ensure_frozen(&Group::FLOWS, frozen, Phase::Disc)?;
        Ok(row)
    }

    /// Run one full iteration and return its three rows.
    pub fn run_iteration(&mut self, dataset: &Dataset) -> Result<[MetricsRow; 3]> {
        let iter = self.state.iteration + 1;
        let first = self.sample_batch();
        let a = self.generator_step(dataset, &first, iter)?;
        let second = if self.config.reuse_generator_batch {
            first
        } else {
            self.sample_batch()
        };
        let b = self.generator_step(dataset, &second, iter)?;
        let third = self.sample_batch();
        let c = self.discriminator_step(dataset, &third, iter)?;
        self.state
            .model
            .flow_visible
            .check_invertible(&self.state.model.store)?;
        self.state
            .model
            .flow_infrared
            .check_invertible(&self.state.model.store)?;
        self.state.iteration = iter;
        Ok([a, b, c])
    }
}

fn check_finite(total: f64, row: &MetricsRow) -> Result<()> {
    if total.is_finite() && row.values().iter().flatten().all(|v| v.is_finite()) {
        return Ok(());
    }
    let dump = format!(
        "non-finite {} objective {total}; components: {}",
        row.phase,
        row.to_csv()
    );
    error!("{dump}");
    Err(Error::Numeric(dump))
}

/// Train to completion, passing every row to `on_row` as it is produced.
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(config, dataset)?;
    while !trainer.is_done() {
        for row in trainer.run_iteration(dataset)? {
            on_row(&row)?;
        }
    }
    Ok(trainer.state)
}

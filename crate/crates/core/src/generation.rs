//! Inference-time generation: training-sample expansion by latent
//! interpolation and cross-modality translation through the shared latent.
//!
//! Images go in and come out in pixel units (`[0, 255]`). Generated
//! samples are quantized; the unrounded images are kept alongside.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality, Sample};
use crate::error::{Error, Result};
use crate::flow::FlowGenerator;
use crate::model::{postprocess, preprocess, Flow2Flow};
use crate::tensor::{ParamStore, Tensor};

/// Samples are pushed through the flows this many at a time.
const CHUNK: usize = 16;

/// Interpolation weight `p / q`, with `q > p >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct InterpolationSpec {
    p: u32,
    q: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    p: u32,
    q: u32,
}

impl TryFrom<RawSpec> for InterpolationSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        Self::new(r.p, r.q)
    }
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self { p: 1, q: 2 }
    }
}

impl InterpolationSpec {
    pub fn new(p: u32, q: u32) -> Result<Self> {
        if p < 1 || q <= p {
            return Err(Error::Config(format!(
                "interpolation needs q > p >= 1, got p={p} q={q}"
            )));
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.p) / f64::from(self.q)
    }
}

/// `z_a + t (z_b - z_a)`.
pub fn interpolate_latents(za: &Tensor, zb: &Tensor, t: f64) -> Result<Tensor> {
    if za.shape() != zb.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: za.shape().to_vec(),
            rhs: zb.shape().to_vec(),
        });
    }
    let data = za
        .data()
        .iter()
        .zip(zb.data())
        .map(|(a, b)| a + t * (b - a))
        .collect();
    Tensor::new(za.shape().to_vec(), data)
}

/// Round half to even and clamp into `[0, 255]`.
pub fn quantize_pixels(x: &Tensor) -> Tensor {
    x.map(|v| v.round_ties_even().clamp(0.0, 255.0))
}

fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Ok(preprocess(&Tensor::stack(&imgs)?))
}

/// A generated sample plus its unrounded pixels and atanh clamp count.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub raw: Tensor,
    pub saturated: usize,
}

fn check_tse_pair(flow: &FlowGenerator, a: &Sample, b: &Sample) -> Result<()> {
    if a.identity != b.identity {
        return Err(Error::Config(format!(
            "interpolation pair mixes identities {} and {}",
            a.identity, b.identity
        )));
    }
    if a.modality != flow.modality || b.modality != flow.modality {
        return Err(Error::Config(format!(
            "interpolation pair ({}, {}) does not match the {} flow",
            a.modality, b.modality, flow.modality
        )));
    }
    Ok(())
}

/// Decode interpolated latents for many same-identity pairs at once.
fn tse_batch(
    flow: &FlowGenerator,
    store: &ParamStore,
    pairs: &[(&Sample, &Sample)],
    t: f64,
) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        for (a, b) in chunk {
            check_tse_pair(flow, a, b)?;
        }
        let left: Vec<&Sample> = chunk.iter().map(|p| p.0).collect();
        let right: Vec<&Sample> = chunk.iter().map(|p| p.1).collect();
        let (za, _) = flow.invert_tensor(store, &stack_images(&left)?)?;
        let (zb, _) = flow.invert_tensor(store, &stack_images(&right)?)?;
        let z = interpolate_latents(&za, &zb, t)?;
        // Per-sample saturation is not separable from a batched decode; decode singly.
        for zi in z.unstack() {
            let zi = zi.reshape(&[&[1], flow.config.latent_shape().as_slice()].concat())?;
            let (x, sat) = flow.generate_tensor(store, &zi)?;
            out.push((postprocess(&x).reshape(&flow.config.image_shape)?, sat));
        }
    }
    Ok(out)
}

/// `G(z_a + (p/q)(z_b - z_a))` for two images of one identity and modality.
pub fn tse_generate(
    flow: &FlowGenerator,
    store: &ParamStore,
    a: &Sample,
    b: &Sample,
    spec: InterpolationSpec,
) -> Result<GeneratedSample> {
    let (raw, saturated) = tse_batch(flow, store, &[(a, b)], spec.ratio())?.remove(0);
    Ok(GeneratedSample {
        sample: Sample {
            image: quantize_pixels(&raw),
            identity: a.identity,
            modality: flow.modality,
            generated: true,
            name: format!("{}-{}_{}_{}", a.name, b.name, spec.p, spec.q),
        },
        raw,
        saturated,
    })
}

/// Unrounded images at `p / q` for `p = 1..q-1`, endpoints excluded.
pub fn interpolation_path(
    flow: &FlowGenerator,
    store: &ParamStore,
    a: &Sample,
    b: &Sample,
    q: u32,
) -> Result<Vec<Tensor>> {
    if q < 2 {
        return Err(Error::Config(format!(
            "interpolation path needs q >= 2, got {q}"
        )));
    }
    check_tse_pair(flow, a, b)?;
    let (za, _) = flow.invert_tensor(store, &stack_images(&[a])?)?;
    let (zb, _) = flow.invert_tensor(store, &stack_images(&[b])?)?;
    (1..q)
        .map(|p| {
            let z = interpolate_latents(&za, &zb, f64::from(p) / f64::from(q))?;
            let (x, _) = flow.generate_tensor(store, &z)?;
            postprocess(&x).reshape(&flow.config.image_shape)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionTarget {
    Visible,
    Infrared,
    #[default]
    Both,
}

impl ExpansionTarget {
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            ExpansionTarget::Visible => &[Modality::Visible],
            ExpansionTarget::Infrared => &[Modality::Infrared],
            ExpansionTarget::Both => &Modality::ALL,
        }
    }
}

impl std::str::FromStr for ExpansionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(ExpansionTarget::Visible),
            "infrared" => Ok(ExpansionTarget::Infrared),
            "both" => Ok(ExpansionTarget::Both),
            other => Err(Error::Config(format!("unknown expansion target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    /// Generated samples per real sample of each target modality.
    pub multiple: f64,
    pub target: ExpansionTarget,
}

impl ExpansionPlan {
    pub fn new(multiple: f64, target: ExpansionTarget) -> Result<Self> {
        if !(multiple >= 0.0 && multiple.is_finite()) {
            return Err(Error::Config(format!(
                "expansion multiple must be non-negative, got {multiple}"
            )));
        }
        Ok(Self { multiple, target })
    }

    /// `floor(multiple * n)`, tolerant of binary rounding in `multiple`.
    pub fn count(&self, n: usize) -> usize {
        (self.multiple * n as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Expansion {
    /// Originals first, then generated samples.
    pub dataset: Dataset,
    /// Unrounded pixels of each generated sample, in order.
    pub raw: Vec<Tensor>,
    /// Identities skipped for having fewer than two images, per target modality.
    pub skipped: usize,
}

/// Same-identity pairs to interpolate for one modality: every unordered pair
/// once in random order, then uniform draws with replacement.
fn expansion_pairs(
    dataset: &Dataset,
    m: Modality,
    n: usize,
    rng: &mut impl Rng,
) -> (Vec<(usize, usize)>, usize) {
    let mut pool = Vec::new();
    let mut skipped = 0;
    for id in dataset.identities() {
        let idx: Vec<usize> = dataset
            .indices(m, id)
            .into_iter()
            .filter(|&i| !dataset.samples[i].generated)
            .collect();
        if idx.len() < 2 {
            if !idx.is_empty() {
                skipped += 1;
            }
            continue;
        }
        for (k, &a) in idx.iter().enumerate() {
            for &b in &idx[k + 1..] {
                pool.push((a, b));
            }
        }
    }
    if pool.is_empty() || n == 0 {
        return (Vec::new(), skipped);
    }
    pool.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = pool.iter().copied().take(n).collect();
    while pairs.len() < n {
        pairs.push(pool[rng.random_range(0..pool.len())]);
    }
    (pairs, skipped)
}

/// Add `floor(multiple * N_m)` interpolated samples for each target modality.
pub fn expand_dataset(
    model: &Flow2Flow,
    dataset: &Dataset,
    plan: ExpansionPlan,
    spec: InterpolationSpec,
    seed: u64,
) -> Result<Expansion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Expansion {
        dataset: dataset.clone(),
        raw: Vec::new(),
        skipped: 0,
    };
    for &m in plan.target.modalities() {
        let real = dataset
            .samples
            .iter()
            .filter(|s| s.modality == m && !s.generated)
            .count();
        let n = plan.count(real);
        let (pairs, skipped) = expansion_pairs(dataset, m, n, &mut rng);
        if skipped > 0 {
            warn!("{skipped} {m} identities have a single image and were skipped");
        }
        out.skipped += skipped;
        if n > 0 && pairs.is_empty() {
            return Err(Error::Config(format!(
                "no {m} identity has two images to interpolate"
            )));
        }
        let refs: Vec<(&Sample, &Sample)> = pairs
            .iter()
            .map(|&(a, b)| (&dataset.samples[a], &dataset.samples[b]))
            .collect();
        let decoded = tse_batch(model.flow(m), &model.store, &refs, spec.ratio())?;
        let mut seen = std::collections::HashMap::new();
        for ((a, b), (raw, _)) in refs.into_iter().zip(decoded) {
            let repeat = seen
                .entry((a.name.clone(), b.name.clone(), a.identity))
                .or_insert(0usize);
            let source = if *repeat == 0 {
                format!("{}-{}", a.name, b.name)
            } else {
                format!("{}-{}-{}", a.name, b.name, repeat)
            };
            *repeat += 1;
            out.dataset.samples.push(Sample {
                image: quantize_pixels(&raw),
                identity: a.identity,
                modality: m,
                generated: true,
                name: format!("{source}_{}_{}", spec.p, spec.q),
            });
            out.raw.push(raw);
        }
    }
    Ok(out)
}

/// `G_to(G_from^{-1}(x))` for a batch of pixel-space images `[N, 3, H, W]`.
/// Returns unrounded pixels and the atanh clamp count.
pub fn translate_pixels(
    model: &Flow2Flow,
    from: Modality,
    images: &Tensor,
) -> Result<(Tensor, usize)> {
    let x = preprocess(images);
    let (z, _) = model.flow(from).invert_tensor(&model.store, &x)?;
    let (y, sat) = model.flow(from.other()).generate_tensor(&model.store, &z)?;
    Ok((postprocess(&y), sat))
}

/// Visible to infrared.
pub fn cmg_v2r(model: &Flow2Flow, images: &Tensor) -> Result<(Tensor, usize)> {
    translate_pixels(model, Modality::Visible, images)
}

/// Infrared to visible.
pub fn cmg_r2v(model: &Flow2Flow, images: &Tensor) -> Result<(Tensor, usize)> {
    translate_pixels(model, Modality::Infrared, images)
}

fn short(m: Modality) -> char {
    match m {
        Modality::Visible => 'v',
        Modality::Infrared => 'r',
    }
}

/// Translate samples into the other modality, keeping identities.
pub fn translate_samples(model: &Flow2Flow, samples: &[&Sample]) -> Result<Vec<GeneratedSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for &s in samples {
        let img = s.image.clone().reshape(&[&[1], s.image.shape()].concat())?;
        let (raw, saturated) = translate_pixels(model, s.modality, &img)?;
        let raw = raw.reshape(s.image.shape())?;
        let to = s.modality.other();
        out.push(GeneratedSample {
            sample: Sample {
                image: quantize_pixels(&raw),
                identity: s.identity,
                modality: to,
                generated: true,
                name: format!("{}_{}2{}", s.name, short(s.modality), short(to)),
            },
            raw,
            saturated,
        });
    }
    Ok(out)
}

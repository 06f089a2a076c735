//! Cross-modality retrieval: infrared queries against a visible gallery.
//!
//! The baseline trains one encoder shared by both modalities with a
//! softmax identity classifier, then ranks the gallery by Euclidean
//! distance between unit features. The expansion sweep retrains that
//! baseline on training sets enlarged with interpolated samples.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversaries::{AdversaryConfig, Encoder};
use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::generation::{expand_dataset, ExpansionPlan, ExpansionTarget, InterpolationSpec};
use crate::model::{preprocess, Flow2Flow};
use crate::tensor::{Adam, AdamConfig, Group, ParamId, ParamStore, Tape, Tensor};

pub const SWEEP_HEADER: &str = "mode,multiple,rank1,map";

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labeled {
    pub identity: u32,
    pub feature: Vec<f64>,
}

/// Query and gallery features, as read by `eval --features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSet {
    pub query: Vec<Labeled>,
    pub gallery: Vec<Labeled>,
}

impl FeatureSet {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let set: FeatureSet = serde_json::from_slice(bytes)
            .map_err(|e| Error::parse("features", e.column(), format!("line {}: {e}", e.line())))?;
        let dim = set
            .query
            .iter()
            .chain(&set.gallery)
            .map(|l| l.feature.len())
            .next();
        if let Some(d) = dim {
            if set
                .query
                .iter()
                .chain(&set.gallery)
                .any(|l| l.feature.len() != d || l.feature.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Format(
                    "feature vectors must share one length and be finite".into(),
                ));
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Retrieval {
    pub rank1: f64,
    pub map: f64,
    /// Queries that had at least one match in the gallery.
    pub evaluated: usize,
    pub skipped: usize,
}

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rank1 and mAP over queries whose identity occurs in the gallery.
/// Distance ties keep gallery order.
pub fn evaluate(query: &[Labeled], gallery: &[Labeled]) -> Result<Retrieval> {
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for q in query {
        let relevant = gallery.iter().filter(|g| g.identity == q.identity).count();
        if relevant == 0 {
            continue;
        }
        let mut order: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (distance2(&q.feature, &g.feature), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if gallery[order[0].1].identity == q.identity {
            hits += 1;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, &(_, i)) in order.iter().enumerate() {
            if gallery[i].identity == q.identity {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / relevant as f64;
        evaluated += 1;
    }
    let skipped = query.len() - evaluated;
    if skipped > 0 {
        warn!("{skipped} queries have no matching gallery identity and were skipped");
    }
    if evaluated == 0 {
        return Err(Error::Config(
            "no query identity occurs in the gallery".into(),
        ));
    }
    Ok(Retrieval {
        rank1: hits as f64 / evaluated as f64,
        map: ap_sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Training samples and the held-out query/gallery sets.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    /// Held-out infrared images.
    pub query: Dataset,
    /// Held-out visible images.
    pub gallery: Dataset,
}

/// Per identity and modality, half the real images (rounded down) go to
/// training and the rest are held out. Generated samples are ignored.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Dataset::default(),
        query: Dataset::default(),
        gallery: Dataset::default(),
    };
    for id in dataset.identities() {
        for m in Modality::ALL {
            let mut idx: Vec<usize> = dataset
                .indices(m, id)
                .into_iter()
                .filter(|&i| !dataset.samples[i].generated)
                .collect();
            idx.shuffle(&mut rng);
            let cut = idx.len() / 2;
            let held = match m {
                Modality::Visible => &mut split.gallery,
                Modality::Infrared => &mut split.query,
            };
            for (k, &i) in idx.iter().enumerate() {
                let s = dataset.samples[i].clone();
                if k < cut {
                    split.train.samples.push(s);
                } else {
                    held.samples.push(s);
                }
            }
        }
    }
    if split.train.is_empty() || split.query.is_empty() || split.gallery.is_empty() {
        return Err(Error::Config(
            "dataset too small to split into train, query and gallery".into(),
        ));
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Logit temperature applied to cosine-like scores.
    pub scale: f64,
    pub encoder: AdversaryConfig,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch: 32,
            lr: 1e-3,
            scale: 8.0,
            encoder: AdversaryConfig::default(),
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(
                "retrieval training needs steps > 0 and batch > 0".into(),
            ));
        }
        if !(self.lr > 0.0 && self.scale > 0.0) {
            return Err(Error::Config(
                "retrieval lr and scale must be positive".into(),
            ));
        }
        self.encoder.validate()
    }
}

/// A trained retrieval encoder.
#[derive(Debug, Clone)]
pub struct ReidModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    classifier: ParamId,
}

fn batch_images(dataset: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = idx
        .iter()
        .map(|&i| dataset.samples[i].image.clone())
        .collect();
    Ok(preprocess(&Tensor::stack(&imgs)?))
}

impl ReidModel {
    /// Train on every sample of `train`, generated ones included.
    pub fn train(train: &Dataset, config: &ReidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = train
            .image_shape()
            .ok_or_else(|| Error::Config("empty retrieval training set".into()))?;
        let ids = train.identities();
        let label = |id: u32| ids.binary_search(&id).expect("identity listed");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            "reid",
            Group::Aux,
            Modality::Visible,
            shape,
            config.encoder,
            &mut rng,
        )?;
        let d = config.encoder.feature_dim;
        let std = (1.0 / d as f64).sqrt();
        let w: Vec<f64> = (0..d * ids.len())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let classifier = store.add(
            "reid.classifier",
            Group::Aux,
            Tensor::new(vec![d, ids.len()], w)?,
        );
        let mut opt = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &store,
            store.ids_in(&[Group::Aux]),
        );
        let all: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.steps {
            let idx: Vec<usize> = if all.len() <= config.batch {
                all.clone()
            } else {
                all.choose_multiple(&mut rng, config.batch)
                    .copied()
                    .collect()
            };
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| label(train.samples[i].identity))
                .collect();
            let mut g = Tape::training(&[Group::Aux]);
            let x = g.constant(batch_images(train, &idx)?)?;
            let f = encoder.encode(&mut g, &store, x)?;
            let w = g.param(&store, classifier)?;
            let logits = g.matmul(f, w)?;
            let logits = g.scale(logits, config.scale)?;
            let loss = g.cross_entropy(logits, &labels)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numeric("retrieval loss is not finite".into()));
            }
            g.backward_into(loss, &mut store)?;
            opt.step(&mut store)?;
        }
        Ok(Self {
            store,
            encoder,
            classifier,
        })
    }

    pub fn classifier(&self) -> &Tensor {
        self.store.value(self.classifier)
    }

    pub fn features(&self, dataset: &Dataset) -> Result<Vec<Labeled>> {
        let mut out = Vec::with_capacity(dataset.len());
        let all: Vec<usize> = (0..dataset.len()).collect();
        for chunk in all.chunks(64) {
            let f = self
                .encoder
                .encode_tensor(&self.store, &batch_images(dataset, chunk)?)?;
            for (&i, row) in chunk.iter().zip(f.data().chunks(f.shape()[1])) {
                out.push(Labeled {
                    identity: dataset.samples[i].identity,
                    feature: row.to_vec(),
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, split: &Split) -> Result<Retrieval> {
        evaluate(
            &self.features(&split.query)?,
            &self.features(&split.gallery)?,
        )
    }
}

/// Train on `split.train` and evaluate on the held-out sets.
pub fn baseline(split: &Split, config: &ReidConfig, seed: u64) -> Result<Retrieval> {
    ReidModel::train(&split.train, config, seed)?.evaluate(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub multiples: Vec<f64>,
    pub modes: Vec<ExpansionTarget>,
    pub reid: ReidConfig,
    pub interpolation: InterpolationSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            multiples: (1..=8).map(|k| 0.25 * k as f64).collect(),
            modes: vec![
                ExpansionTarget::Visible,
                ExpansionTarget::Infrared,
                ExpansionTarget::Both,
            ],
            reid: ReidConfig::default(),
            interpolation: InterpolationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: ExpansionTarget,
    pub multiple: f64,
    pub rank1: f64,
    pub map: f64,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let mode = match self.mode {
            ExpansionTarget::Visible => "visible",
            ExpansionTarget::Infrared => "infrared",
            ExpansionTarget::Both => "both",
        };
        format!("{mode},{},{},{}", self.multiple, self.rank1, self.map)
    }
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub baseline: Retrieval,
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{}", r.to_csv()).expect("write to string");
        }
        s
    }
}

/// Split `dataset` by `seed`, then for every mode and multiple expand the
/// training split with `model` and retrain the retrieval baseline.
/// Every retrieval model starts from the same seed, so a multiple of zero
/// reproduces the baseline exactly. Rows run on up to `threads` threads
/// and do not depend on the thread count.
pub fn sweep(
    model: &Flow2Flow,
    dataset: &Dataset,
    config: &SweepConfig,
    seed: u64,
    threads: usize,
) -> Result<Sweep> {
    config.reid.validate()?;
    let split = split_dataset(dataset, seed)?;
    let reid_seed = seed.wrapping_add(1);
    let jobs: Vec<(ExpansionTarget, f64)> = config
        .modes
        .iter()
        .flat_map(|&mode| config.multiples.iter().map(move |&m| (mode, m)))
        .collect();
    let plans = jobs
        .iter()
        .map(|&(mode, m)| ExpansionPlan::new(m, mode))
        .collect::<Result<Vec<_>>>()?;
    let run = |plan: ExpansionPlan| -> Result<Retrieval> {
        let expanded = expand_dataset(
            model,
            &split.train,
            plan,
            config.interpolation,
            seed.wrapping_add(2),
        )?;
        baseline(
            &Split {
                train: expanded.dataset,
                query: split.query.clone(),
                gallery: split.gallery.clone(),
            },
            &config.reid,
            reid_seed,
        )
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Retrieval>>>> =
        Mutex::new((0..plans.len()).map(|_| None).collect());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&plan) = plans.get(k) else { break };
        let r = run(plan);
        results.lock().expect("no poisoned worker")[k] = Some(r);
    };
    let base = std::thread::scope(|scope| {
        for _ in 1..threads.max(1).min(plans.len() + 1) {
            scope.spawn(work);
        }
        let base = baseline(&split, &config.reid, reid_seed);
        work();
        base
    })?;
    let mut rows = Vec::with_capacity(jobs.len());
    for ((mode, multiple), r) in jobs
        .into_iter()
        .zip(results.into_inner().expect("no poisoned worker"))
    {
        let r = r.expect("every job ran")?;
        rows.push(SweepRow {
            mode,
            multiple,
            rank1: r.rank1,
            map: r.map,
        });
    }
    Ok(Sweep {
        baseline: base,
        rows,
    })
}

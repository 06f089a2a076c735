//! Numerical self-checks: round trips, log-determinants against a
//! finite-difference Jacobian, and gradients against central differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversaries::{
    identity_disc_loss, identity_gen_loss, modality_disc_loss, modality_gen_loss, PairedFeatures,
};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::flow::{
    flow_loss, generator_loss, noise_loss, ActivationPlacement, FlowConfig, FlowGenerator,
    GaussianPrior, NoisePairing,
};
use crate::model::Flow2Flow;
use crate::tensor::linalg::Lu;
use crate::tensor::{gradient_check, Group, ParamStore, Tape, Tensor};

pub const ROUND_TRIP_TOL: f64 = 1e-6;
pub const LOGDET_TOL: f64 = 1e-3;
pub const GRADIENT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {} = {:.3e} (tolerance {:.0e})",
            self.name, self.value, self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// `max |generate(invert(x)) - x|` over a batch of preprocessed images.
pub fn round_trip_error(flow: &FlowGenerator, store: &ParamStore, x: &Tensor) -> Result<f64> {
    let (z, _) = flow.invert_tensor(store, x)?;
    let (back, _) = flow.generate_tensor(store, &z)?;
    Ok(back.max_abs_diff(x))
}

/// `(analytic, numeric)` log-determinant of `invert` at one image `[1,C,H,W]`.
/// The numeric value is `log |det J|` of a central-difference Jacobian.
pub fn jacobian_logdet(
    flow: &FlowGenerator,
    store: &ParamStore,
    x: &Tensor,
    h: f64,
) -> Result<(f64, f64)> {
    if x.shape().first() != Some(&1) {
        return Err(Error::InvalidShape {
            op: "jacobian_logdet",
            shape: x.shape().to_vec(),
            reason: "expects a single image".into(),
        });
    }
    let n = x.len();
    let (_, ld) = flow.invert_tensor(store, x)?;
    let mut jac = vec![0.0; n * n];
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(64) {
        let mut probes = Vec::with_capacity(2 * chunk.len());
        for &j in chunk {
            for sign in [1.0, -1.0] {
                let mut p = x.clone();
                p.data_mut()[j] += sign * h;
                probes.push(p.reshape(&x.shape()[1..])?);
            }
        }
        let (z, _) = flow.invert_tensor(store, &Tensor::stack(&probes)?)?;
        let outs = z.unstack();
        for (k, &j) in chunk.iter().enumerate() {
            let (up, down) = (outs[2 * k].data(), outs[2 * k + 1].data());
            for i in 0..n {
                jac[i * n + j] = (up[i] - down[i]) / (2.0 * h);
            }
        }
    }
    Ok((ld[0], Lu::new(&jac, n)?.log_abs_det()))
}

fn toy(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("shape")
}

/// Relative gradient error of every training objective on toy inputs.
pub fn loss_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = GaussianPrior::default();
    let eps = 1e-6;
    let ids = [0u32, 0, 1, 1];
    let mods = [
        Modality::Visible,
        Modality::Infrared,
        Modality::Visible,
        Modality::Infrared,
    ];
    let mut out = Vec::new();

    let z = [toy(&[2, 4, 1, 1], &mut rng, 1.0), toy(&[2], &mut rng, 1.0)];
    let zr = [toy(&[2, 4, 1, 1], &mut rng, 1.0), toy(&[2], &mut rng, 1.0)];
    let inputs = [z[0].clone(), z[1].clone(), zr[0].clone(), zr[1].clone()];
    let e = gradient_check(
        |g, v| flow_loss(g, v[0], v[1], v[2], v[3], prior),
        &inputs,
        eps,
    )?;
    out.push(("flow", e));

    let zn = toy(&[4, 3], &mut rng, 1.0);
    let e = gradient_check(
        |g, v| noise_loss(g, v[0], &ids, &mods, NoisePairing::CrossModality),
        std::slice::from_ref(&zn),
        eps,
    )?;
    out.push(("noise", e));

    let e = gradient_check(
        |g, v| {
            let f = flow_loss(g, v[0], v[1], v[2], v[3], prior)?;
            let zs = g.concat(&[v[0], v[2]], 0)?;
            let nz = noise_loss(g, zs, &ids, &mods, NoisePairing::CrossModality)?;
            generator_loss(g, f, nz, 0.01)
        },
        &inputs,
        eps,
    )?;
    out.push(("generator", e));

    let feats: Vec<Tensor> = (0..4).map(|_| toy(&[3, 4], &mut rng, 1.0)).collect();
    let pairs = vec![(0, 0), (1, 1), (2, 2), (0, 1)];
    let paired =
        |g: &mut Tape, v: &[crate::tensor::Var]| -> Result<(PairedFeatures, PairedFeatures)> {
            let n: Vec<_> = v
                .iter()
                .map(|&x| g.l2_normalize(x))
                .collect::<Result<_>>()?;
            Ok((
                PairedFeatures {
                    real: n[0],
                    fake: n[1],
                    pairs: pairs.clone(),
                },
                PairedFeatures {
                    real: n[2],
                    fake: n[3],
                    pairs: pairs.clone(),
                },
            ))
        };
    let e = gradient_check(
        |g, v| {
            let (a, b) = paired(g, v)?;
            identity_gen_loss(g, &a, &b)
        },
        &feats,
        eps,
    )?;
    out.push(("identity_gen", e));
    let e = gradient_check(
        |g, v| {
            let (a, b) = paired(g, v)?;
            identity_disc_loss(g, &a, &b)
        },
        &feats,
        eps,
    )?;
    out.push(("identity_disc", e));

    let logits: Vec<Tensor> = (0..4).map(|_| toy(&[5], &mut rng, 2.0)).collect();
    let e = gradient_check(
        |g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.sigmoid(v[1])?;
            modality_gen_loss(g, a, b)
        },
        &logits[..2],
        eps,
    )?;
    out.push(("modality_gen", e));
    let e = gradient_check(
        |g, v| {
            let s: Vec<_> = v.iter().map(|&x| g.sigmoid(x)).collect::<Result<_>>()?;
            modality_disc_loss(g, s[0], s[1], s[2], s[3])
        },
        &logits,
        eps,
    )?;
    out.push(("modality_disc", e));

    out.push(("flow_parameters", flow_parameter_gradient_error(seed, 48)?));
    Ok(out)
}

/// Gradient of a tiny flow's likelihood loss with respect to up to
/// `samples` of its parameter entries, against central differences.
pub fn flow_parameter_gradient_error(seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = FlowConfig {
        blocks: 2,
        image_shape: [3, 4, 2],
        activation: ActivationPlacement::LatentSide,
    };
    let flow = FlowGenerator::new(
        &mut store,
        config,
        Modality::Visible,
        Group::FlowVisible,
        &mut rng,
    )?;
    // Move off the zero-initialized output convolutions.
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let v: Vec<f64> = store
            .value(id)
            .data()
            .iter()
            .map(|w| w + 0.05 * rng.random_range(-1.0..1.0))
            .collect();
        store.set_value(id, &v)?;
    }
    let x = toy(&[2, 3, 4, 2], &mut rng, 0.8);
    let objective = |store: &ParamStore, tape: &mut Tape| -> Result<crate::tensor::Var> {
        let xv = tape.constant(x.clone())?;
        let inv = flow.invert(tape, store, xv)?;
        crate::flow::modality_flow_loss(tape, inv.z, inv.logdet, GaussianPrior::default())
    };
    let mut g = Tape::training(&[Group::FlowVisible]);
    let root = objective(&store, &mut g)?;
    let grads = g.backward(root)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.value(id).len() {
            picks.push((k, j));
        }
    }
    let step = (picks.len() / samples.max(1)).max(1);
    for &(k, j) in picks.iter().step_by(step) {
        let id = ids[k];
        let analytic = grads.param(id).map(|s| s[j]).unwrap_or(0.0);
        let base = store.value(id).data().to_vec();
        let mut eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[j] += delta;
            store.set_value(id, &v)?;
            let mut t = Tape::inference();
            let r = objective(&store, &mut t)?;
            Ok(t.value(r).item())
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        store.set_value(id, &base)?;
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    Ok(worst)
}

/// Round trip and log-determinant checks of both flows of `model` on
/// preprocessed `probes`, plus the loss gradient suite.
pub fn verify_model(model: &Flow2Flow, probes: &Tensor) -> Result<Report> {
    let mut report = Report::default();
    for m in Modality::ALL {
        let flow = model.flow(m);
        report.checks.push(Check::new(
            format!("{m} round trip max error"),
            round_trip_error(flow, &model.store, probes)?,
            ROUND_TRIP_TOL,
        ));
        let one = probes.rows(0, 1)?;
        let (analytic, numeric) = jacobian_logdet(flow, &model.store, &one, 1e-5)?;
        report.checks.push(Check::new(
            format!("{m} logdet deviation"),
            (analytic - numeric).abs(),
            LOGDET_TOL,
        ));
    }
    for (name, err) in loss_gradient_errors(0)? {
        report.checks.push(Check::new(
            format!("{name} gradient relative error"),
            err,
            GRADIENT_TOL,
        ));
    }
    Ok(report)
}

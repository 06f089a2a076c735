//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its PASS/FAIL line whether or not it succeeds.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flow2flow::checkpoint::Checkpoint;
use flow2flow::data::{render_dataset, Dataset, Modality, SynthSpec};
use flow2flow::flow::{
    init_layer, ActivationPlacement, FlowConfig, FlowGenerator, FlowLayer, LayerKind,
};
use flow2flow::generation::{cmg_r2v, cmg_v2r, quantize_pixels, ExpansionTarget};
use flow2flow::model::{preprocess, Flow2Flow};
use flow2flow::reid::{self, FeatureSet, SweepConfig};
use flow2flow::tensor::{Group, ParamStore, Tape, Tensor};
use flow2flow::trainer::{MetricsRow, Phase, TrainConfig, TrainState, Trainer};
use flow2flow::verify::{jacobian_logdet, loss_gradient_errors, round_trip_error};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Trained {
    config: TrainConfig,
    dataset: Dataset,
    model: Flow2Flow,
    rows: Vec<MetricsRow>,
    elapsed: Duration,
}

/// 300 iterations on the default synthetic dataset.
fn train_desk_model() -> Trained {
    let dataset = render_dataset(&SynthSpec::default()).expect("default dataset renders");
    let config = TrainConfig {
        epochs: 75,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &dataset).expect("trainer builds");
    assert_eq!(trainer.total_iterations(), 300);
    let start = Instant::now();
    let mut rows = Vec::new();
    while !trainer.is_done() {
        rows.extend(trainer.run_iteration(&dataset).expect("iteration runs"));
    }
    Trained {
        config,
        dataset,
        model: trainer.state.model,
        rows,
        elapsed: start.elapsed(),
    }
}

fn images(dataset: &Dataset, m: Modality) -> Vec<Tensor> {
    dataset
        .samples
        .iter()
        .filter(|s| s.modality == m)
        .map(|s| s.image.clone())
        .collect()
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let s = if store.get(id).name.ends_with("conv.weight") {
            0.05
        } else {
            scale
        };
        for v in store.value_mut(id).data_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn invertibility(trained: &Trained) -> Outcome {
    let start = Instant::now();
    // Each flow is probed with the images of its own modality, 64 in total.
    let probes: Vec<(Modality, Tensor)> = Modality::ALL
        .into_iter()
        .map(|m| {
            (
                m,
                preprocess(&Tensor::stack(&images(&trained.dataset, m)).unwrap()),
            )
        })
        .collect();
    assert_eq!(probes.iter().map(|(_, x)| x.shape()[0]).sum::<usize>(), 64);
    let fresh = TrainState::new(&trained.config).unwrap().model;
    let mut worst = [0.0f64; 2];
    for (k, model) in [&fresh, &trained.model].into_iter().enumerate() {
        for (m, x) in &probes {
            worst[k] = worst[k].max(round_trip_error(model.flow(*m), &model.store, x).unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.iter().all(|&e| e < 1e-6) && secs < 10.0,
        format!(
            "max round-trip error fresh {:.2e}, trained {:.2e} (< 1e-6) in {secs:.1} s (< 10 s)",
            worst[0], worst[1]
        ),
    )
}

fn logdet_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut draws = 0;
    for activation in [
        ActivationPlacement::LatentSide,
        ActivationPlacement::ImageSide,
    ] {
        for draw in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
            let mut store = ParamStore::new();
            let config = FlowConfig {
                activation,
                ..FlowConfig::new(2, [3, 2, 2])
            };
            let flow = FlowGenerator::new(
                &mut store,
                config,
                Modality::Visible,
                Group::FlowVisible,
                &mut rng,
            )
            .unwrap();
            perturb(&mut store, &mut rng, 0.3);
            let x = normal(&[1, 3, 2, 2], &mut rng, 0.4);
            let (analytic, numeric) = jacobian_logdet(&flow, &store, &x, 1e-5).unwrap();
            worst = worst.max((analytic - numeric).abs());
            draws += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && secs < 30.0,
        format!("{draws} parameter draws, max |analytic - numeric| {worst:.2e} (< 1e-3) in {secs:.1} s (< 30 s)"),
    )
}

fn layer_logdets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reverse = |store: &ParamStore, layer: &FlowLayer, x: &Tensor| {
        let mut g = Tape::inference();
        let v = g.constant(x.clone()).unwrap();
        let (y, ld) = layer.reverse(&mut g, store, v).unwrap();
        (g.value(y).clone(), g.value(ld).data().to_vec())
    };

    let mut store = ParamStore::new();
    let tanh = init_layer(&mut store, LayerKind::Tanh, 4, 2, "t", Group::Aux, &mut rng).unwrap();
    let x = normal(&[2, 4, 3, 3], &mut rng, 2.0);
    let (_, ld) = reverse(&store, &tanh, &x);
    let mut tanh_err = 0.0f64;
    for (n, got) in ld.iter().enumerate() {
        let want: f64 = x.data()[n * 36..(n + 1) * 36]
            .iter()
            .map(|u| (1.0 - u.tanh().powi(2)).ln())
            .sum();
        tanh_err = tanh_err.max((got - want).abs());
    }

    let (c, h, w) = (6, 3, 2);
    let mut store = ParamStore::new();
    let conv = init_layer(
        &mut store,
        LayerKind::InvConv1x1,
        c,
        c / 2,
        "c",
        Group::Aux,
        &mut rng,
    )
    .unwrap();
    let weight = store.iter().map(|(id, _)| id).next().unwrap();
    let random_w = normal(&[c, c], &mut rng, 1.0);
    *store.value_mut(weight) = random_w.clone();
    let x = normal(&[1, c, h, w], &mut rng, 1.0);
    let (_, ld) = reverse(&store, &conv, &x);
    let det = DMatrix::from_row_slice(c, c, random_w.data())
        .lu()
        .determinant();
    let conv_err = (ld[0] - (h * w) as f64 * det.abs().ln()).abs();

    let mut store = ParamStore::new();
    let coupling = init_layer(
        &mut store,
        LayerKind::AffineCoupling,
        c,
        c / 2,
        "a",
        Group::Aux,
        &mut rng,
    )
    .unwrap();
    perturb(&mut store, &mut rng, 0.3);
    let x = normal(&[1, c, h, w], &mut rng, 1.0);
    let (y0, ld) = reverse(&store, &coupling, &x);
    // The transformed half is affine in its own input, so a unit shift of it
    // moves each output by exactly its scale.
    let mut shifted = x.clone();
    let half = (c / 2) * h * w;
    for v in &mut shifted.data_mut()[half..] {
        *v += 1.0;
    }
    let (y1, _) = reverse(&store, &coupling, &shifted);
    let want: f64 = (half..x.len())
        .map(|i| (y1.data()[i] - y0.data()[i]).ln())
        .sum();
    let coupling_err = (ld[0] - want).abs();

    let worst = tanh_err.max(conv_err).max(coupling_err);
    outcome(
        worst < 1e-9,
        format!(
            "tanh {tanh_err:.1e}, 1x1 convolution {conv_err:.1e} against an LU determinant, coupling {coupling_err:.1e} (all < 1e-9)"
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut count = 0;
    for seed in 0..3 {
        for (name, err) in loss_gradient_errors(seed).unwrap() {
            count += 1;
            if err.is_nan() || err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.1 < 1e-3 && secs < 120.0,
        format!(
            "{count} loss gradient checks, worst {} at {:.2e} (< 1e-3) in {secs:.1} s (< 120 s)",
            worst.0, worst.1
        ),
    )
}

fn mean_bpd(rows: &[MetricsRow], iter: u64) -> (f64, f64) {
    let gen: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.iter == iter && r.phase == Phase::Gen)
        .collect();
    let n = gen.len() as f64;
    (
        gen.iter().map(|r| r.bpd_v.unwrap()).sum::<f64>() / n,
        gen.iter().map(|r| r.bpd_r.unwrap()).sum::<f64>() / n,
    )
}

fn within_bounds(r: &MetricsRow) -> bool {
    let finite = r.values().iter().flatten().all(|v| v.is_finite());
    let inside = |v: Option<f64>, hi: f64| v.is_none_or(|v| (0.0..=hi).contains(&v));
    finite
        && inside(r.l_id_g, 4.0)
        && inside(r.l_id_d, 4.0)
        && inside(r.l_mod_g, 2.0)
        && inside(r.l_mod_d, 4.0)
}

fn descent(trained: &Trained) -> Outcome {
    let (v10, r10) = mean_bpd(&trained.rows, 10);
    let last = trained.rows.last().unwrap().iter;
    let (v, r) = mean_bpd(&trained.rows, last);
    let (dv, dr) = (1.0 - v / v10, 1.0 - r / r10);
    let bounded = trained.rows.iter().all(within_bounds);
    let secs = trained.elapsed.as_secs_f64();
    outcome(
        last == 300 && dv >= 0.15 && dr >= 0.15 && bounded && secs < 600.0,
        format!(
            "bits/dim visible {v10:.3} -> {v:.3} ({:.0}%), infrared {r10:.3} -> {r:.3} ({:.0}%) over {last} iterations (>= 15%); losses finite and bounded: {bounded}; {secs:.0} s (< 600 s)",
            100.0 * dv,
            100.0 * dr
        ),
    )
}

fn equilibrium(trained: &Trained) -> Outcome {
    let m = &trained.model;
    let mut means = Vec::new();
    for target in Modality::ALL {
        let real = preprocess(&Tensor::stack(&images(&trained.dataset, target)).unwrap());
        let source = preprocess(&Tensor::stack(&images(&trained.dataset, target.other())).unwrap());
        let (z, _) = m
            .flow(target.other())
            .invert_tensor(&m.store, &source)
            .unwrap();
        let (fake, _) = m.flow(target).generate_tensor(&m.store, &z).unwrap();
        let mean = |x: &Tensor| {
            let s = m.discriminator(target).score_tensor(&m.store, x).unwrap();
            s.data().iter().sum::<f64>() / s.len() as f64
        };
        means.push((target, mean(&real), mean(&fake)));
    }
    let last = trained.rows.last().unwrap().iter;
    let window: Vec<f64> = trained
        .rows
        .iter()
        .filter(|r| r.iter + 50 > last)
        .filter_map(|r| r.l_id_d)
        .collect();
    let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ordered = means.iter().all(|(_, real, fake)| real > fake);
    let detail = means
        .iter()
        .map(|(t, real, fake)| format!("{t} real {real:.3} vs translated {fake:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        ordered && lo > 0.0 && hi < 4.0 && window.len() == 50,
        format!("{detail}; identity discriminator loss over the last 50 iterations in [{lo:.3}, {hi:.3}] (inside (0, 4))"),
    )
}

fn channel_std(img: &Tensor) -> f64 {
    let d = img.data();
    let plane = d.len() / 3;
    let total: f64 = (0..plane)
        .map(|p| {
            let c = [d[p], d[plane + p], d[2 * plane + p]];
            let mean = (c[0] + c[1] + c[2]) / 3.0;
            (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt()
        })
        .sum();
    total / plane as f64
}

fn mean_channel_std(batch: &[Tensor]) -> f64 {
    batch.iter().map(channel_std).sum::<f64>() / batch.len() as f64
}

fn cross_modality(trained: &Trained) -> Outcome {
    let visible = images(&trained.dataset, Modality::Visible);
    let batch = Tensor::stack(&visible).unwrap();
    let (raw, _) = cmg_v2r(&trained.model, &batch).unwrap();
    let translated = quantize_pixels(&raw).unstack();
    let ratio = mean_channel_std(&translated) / mean_channel_std(&visible);

    // Cycle errors are measured on flow inputs, the same space as the round trip.
    let input_error = |a: &Tensor| preprocess(a).max_abs_diff(&preprocess(&batch));
    let (back, _) = cmg_r2v(&trained.model, &raw).unwrap();
    let trained_cycle = input_error(&back);
    let trained_pixels = back.max_abs_diff(&batch);
    let mut random_cycle = 0.0f64;
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = TrainConfig {
            seed,
            ..trained.config
        };
        let mut model = TrainState::new(&config).unwrap().model;
        // Larger offsets make the 12-block generators too ill-conditioned for f64.
        perturb(&mut model.store, &mut rng, 0.01 * seed as f64);
        let (there, _) = cmg_v2r(&model, &batch).unwrap();
        let (back, _) = cmg_r2v(&model, &there).unwrap();
        random_cycle = random_cycle.max(input_error(&back));
    }
    outcome(
        ratio < 0.25 && trained_cycle < 1e-6 && random_cycle < 1e-6,
        format!(
            "translated/visible channel spread {ratio:.3} (< 0.25); cycle error trained {trained_cycle:.2e} ({trained_pixels:.2e} in pixel units), other parameters {random_cycle:.2e} (< 1e-6)"
        ),
    )
}

fn expansion_utility(trained: &Trained) -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let config = SweepConfig::default();
    let mut base = 0.0;
    let mut expanded = 0.0;
    let mut slowest = 0.0f64;
    let mut rows = 0;
    let seeds = [11u64, 12, 13];
    for seed in seeds {
        let start = Instant::now();
        let s = reid::sweep(&trained.model, &trained.dataset, &config, seed, threads).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        rows = s.rows.len();
        let both = s
            .rows
            .iter()
            .find(|r| r.mode == ExpansionTarget::Both && r.multiple == 1.0)
            .expect("sweep covers both at 1.0");
        base += s.baseline.rank1 / seeds.len() as f64;
        expanded += both.rank1 / seeds.len() as f64;
    }
    outcome(
        expanded >= base && rows == 24 && slowest < 1800.0,
        format!(
            "mean Rank1 at multiple 1.0 (both) {expanded:.3} vs unexpanded {base:.3} over {} seeds; {rows} rows, slowest sweep {slowest:.0} s (< 1800 s)",
            seeds.len()
        ),
    )
}

fn run_metrics(
    config: &TrainConfig,
    dataset: &Dataset,
    state: TrainState,
    stop: u64,
) -> (Vec<String>, TrainState) {
    let mut t = Trainer::resume(*config, dataset, state).unwrap();
    let mut lines = Vec::new();
    while !t.is_done() && t.state.iteration < stop {
        lines.extend(
            t.run_iteration(dataset)
                .unwrap()
                .iter()
                .map(MetricsRow::to_csv),
        );
    }
    (lines, t.state)
}

fn persistence() -> Outcome {
    let dataset = render_dataset(&SynthSpec::default()).unwrap();
    let config = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = || TrainState::new(&config).unwrap();
    let (a, end_a) = run_metrics(&config, &dataset, fresh(), u64::MAX);
    let (b, _) = run_metrics(&config, &dataset, fresh(), u64::MAX);
    let identical = a.join("\n").into_bytes() == b.join("\n").into_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.f2f");
    let (mut first, mid) = run_metrics(&config, &dataset, fresh(), 3);
    Checkpoint::capture(&config, &mid)
        .unwrap()
        .save(&path)
        .unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore().unwrap();
    let (rest, end_b) = run_metrics(&config, &dataset, restored, u64::MAX);
    first.extend(rest);
    let resumed = first == a;
    let bytes = |s: &TrainState| Checkpoint::capture(&config, s).unwrap().to_bytes();
    let same_state = bytes(&end_a) == bytes(&end_b);
    outcome(
        identical && resumed && same_state,
        format!(
            "{} rows; same seed byte-identical: {identical}; resumed metrics identical: {resumed}; final checkpoints identical: {same_state}",
            a.len()
        ),
    )
}

fn evaluation_fixture() -> Outcome {
    let json = br#"{"query":[{"identity":0,"feature":[0.0]},{"identity":1,"feature":[1.0]}],
        "gallery":[{"identity":0,"feature":[0.1]},{"identity":1,"feature":[1.5]},{"identity":2,"feature":[1.2]}]}"#;
    let set = FeatureSet::parse(json).unwrap();
    let r = reid::evaluate(&set.query, &set.gallery).unwrap();
    // Query 0 ranks its match first (AP 1); query 1 ranks it second (AP 1/2).
    outcome(
        r.rank1 == 0.5 && r.map == 0.75,
        format!(
            "Rank1 {} (expected 0.5), mAP {} (expected 0.75)",
            r.rank1, r.map
        ),
    )
}

fn main() -> ExitCode {
    let trained = train_desk_model();
    let criteria: [(&str, &dyn Fn() -> Outcome); 10] = [
        ("invertibility", &|| invertibility(&trained)),
        ("log-determinant oracle", &logdet_oracle),
        ("per-layer log-determinants", &layer_logdets),
        ("loss gradients", &gradients),
        ("training descent", &|| descent(&trained)),
        ("adversarial equilibrium", &|| equilibrium(&trained)),
        ("cross-modality translation", &|| cross_modality(&trained)),
        ("expansion utility", &|| expansion_utility(&trained)),
        ("determinism and resume", &persistence),
        ("retrieval fixture", &evaluation_fixture),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "{} criterion {} ({name}): {}",
            if o.passed { "PASS" } else { "FAIL" },
            n + 1,
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

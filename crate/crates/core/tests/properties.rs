use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flow2flow::adversaries::{
    identity_disc_loss, identity_gen_loss, modality_disc_loss, modality_gen_loss, AdversaryConfig,
    PairedFeatures,
};
use flow2flow::checkpoint::Checkpoint;
use flow2flow::config::Config;
use flow2flow::data::{render_dataset, Modality, SynthSpec};
use flow2flow::flow::{
    flow_loss, init_layer, noise_loss, ActivationPlacement, FlowConfig, FlowGenerator,
    GaussianPrior, LayerKind, NoisePairing,
};
use flow2flow::generation::{cmg_r2v, cmg_v2r, ExpansionPlan, ExpansionTarget, InterpolationSpec};
use flow2flow::model::{preprocess, Flow2Flow, ModelConfig};
use flow2flow::reid::{evaluate, Labeled};
use flow2flow::tensor::{Group, ParamStore, Tape, Tensor, Var};
use flow2flow::trainer::{TrainConfig, TrainState};

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

/// Push every flow parameter away from its identity-like initialization.
fn perturb_flows(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids_in(&Group::FLOWS) {
        let conv = store.get(id).name.ends_with("conv.weight");
        let s = if conv { 0.05 } else { scale };
        for v in store.value_mut(id).data_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn model(seed: u64, activation: ActivationPlacement, scale: f64) -> Flow2Flow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        blocks: 2,
        image_shape: [3, 4, 4],
        activation,
        adversary: AdversaryConfig::default(),
        prior: GaussianPrior::default(),
    };
    let mut m = Flow2Flow::new(config, &mut rng).unwrap();
    perturb_flows(&mut m.store, &mut rng, scale);
    m
}

fn run<T>(f: impl FnOnce(&mut Tape) -> T) -> T {
    let mut g = Tape::new();
    f(&mut g)
}

fn placement() -> impl Strategy<Value = ActivationPlacement> {
    prop_oneof![
        Just(ActivationPlacement::ImageSide),
        Just(ActivationPlacement::LatentSide),
        Just(ActivationPlacement::None)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tensor_shape_must_match_data(shape in prop::collection::vec(1usize..4, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn squeeze_round_trip(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&[n, c, 2 * h, 2 * w], &mut rng, 1.0);
        let back = run(|g| {
            let v = g.constant(x.clone()).unwrap();
            let s = g.squeeze2(v).unwrap();
            let u = g.unsqueeze2(s).unwrap();
            g.value(u).clone()
        });
        prop_assert_eq!(back, x);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..5)) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let data: Vec<f64> = rows.concat();
        let out = run(|g| {
            let v = g.constant(Tensor::new(vec![rows.len(), 4], data).unwrap()).unwrap();
            let y = g.l2_normalize(v).unwrap();
            g.value(y).clone()
        });
        for r in out.data().chunks(4) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_in_the_root(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&[2, 3], &mut rng, 1.0);
        let branch = |g: &mut Tape, v: Var, which: usize| -> Var {
            let y = if which == 0 { g.tanh(v).unwrap() } else { g.square(v).unwrap() };
            g.sum(y).unwrap()
        };
        let grad = |which: &[usize]| {
            let mut g = Tape::new();
            let v = g.variable(x.clone()).unwrap();
            let mut total = branch(&mut g, v, which[0]);
            for &w in &which[1..] {
                let b = branch(&mut g, v, w);
                total = g.add(total, b).unwrap();
            }
            g.backward(total).unwrap().wrt(v).unwrap().to_vec()
        };
        let both = grad(&[0, 1]);
        let (a, b) = (grad(&[0]), grad(&[1]));
        for i in 0..both.len() {
            prop_assert!((both[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn every_layer_kind_round_trips(seed in any::<u64>(), scale in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [LayerKind::Squeeze, LayerKind::Tanh, LayerKind::InvConv1x1, LayerKind::AffineCoupling] {
            let mut store = ParamStore::new();
            let layer = init_layer(&mut store, kind, 4, 2, "l", Group::Aux, &mut rng).unwrap();
            perturb_all(&mut store, &mut rng, scale);
            let shape = if kind == LayerKind::Squeeze { [2, 1, 4, 4] } else { [2, 4, 2, 2] };
            // Keep tanh inputs where artanh is well conditioned.
            let x = normal(&shape, &mut rng, 1.0).map(|v| if kind == LayerKind::Tanh { v.clamp(-5.0, 5.0) } else { v });
            let mut g = Tape::inference();
            let v = g.constant(x.clone()).unwrap();
            let (z, _) = layer.reverse(&mut g, &store, v).unwrap();
            let (back, sat) = layer.forward(&mut g, &store, z).unwrap();
            prop_assert_eq!(sat, 0);
            prop_assert!(g.value(back).max_abs_diff(&x) < 1e-8, "{kind:?}");
            if kind != LayerKind::Tanh {
                let (y, _) = layer.reverse(&mut g, &store, back).unwrap();
                prop_assert!(g.value(y).max_abs_diff(g.value(z)) < 1e-8);
            }
        }
    }

    #[test]
    fn tanh_layer_bounds_and_inverse(u in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = init_layer(&mut store, LayerKind::Tanh, 1, 0, "t", Group::Aux, &mut rng).unwrap();
        let n = u.len();
        let mut g = Tape::inference();
        let v = g.constant(Tensor::new(vec![1, 1, 1, n], u.clone()).unwrap()).unwrap();
        let (z, _) = layer.reverse(&mut g, &store, v).unwrap();
        prop_assert!(g.value(z).data().iter().all(|x| x.abs() < 1.0));
        let (back, _) = layer.forward(&mut g, &store, z).unwrap();
        for (a, b) in g.value(back).data().iter().zip(&u) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn squeeze_is_a_volume_preserving_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = init_layer(&mut store, LayerKind::Squeeze, 4, 2, "s", Group::Aux, &mut rng).unwrap();
        let x = normal(&[2, 3, 4, 2], &mut rng, 1.0);
        let mut g = Tape::inference();
        let v = g.constant(x.clone()).unwrap();
        let (y, ld) = layer.reverse(&mut g, &store, v).unwrap();
        prop_assert!(g.value(ld).data().iter().all(|&l| l == 0.0));
        let mut a = x.data().to_vec();
        let mut b = g.value(y).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn coupling_logdet_ignores_order_of_transformed_channels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = init_layer(&mut store, LayerKind::AffineCoupling, 4, 2, "c", Group::Aux, &mut rng).unwrap();
        perturb_all(&mut store, &mut rng, 0.5);
        let x = normal(&[1, 4, 2, 2], &mut rng, 1.0);
        let mut swapped = x.clone();
        let plane = 4;
        let d = swapped.data_mut();
        for p in 0..plane {
            d.swap(2 * plane + p, 3 * plane + p);
        }
        let ld = |t: &Tensor| {
            let mut g = Tape::inference();
            let v = g.constant(t.clone()).unwrap();
            let (_, ld) = layer.reverse(&mut g, &store, v).unwrap();
            g.value(ld).item()
        };
        prop_assert_eq!(ld(&x), ld(&swapped));
    }

    #[test]
    fn flow_round_trip_any_parameters(seed in any::<u64>(), activation in placement(), scale in 0.0f64..0.2) {
        let m = model(seed, activation, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = normal(&[3, 3, 4, 4], &mut rng, 0.3).map(|v| v.clamp(-0.9, 0.9));
        for flow in [&m.flow_visible, &m.flow_infrared] {
            let (z, ld) = flow.invert_tensor(&m.store, &x).unwrap();
            prop_assert_eq!(z.shape(), &[3, 12, 2, 2]);
            prop_assert!(ld.iter().all(|v| v.is_finite()));
            let (back, sat) = flow.generate_tensor(&m.store, &z).unwrap();
            prop_assert_eq!(sat, 0);
            prop_assert!(back.max_abs_diff(&x) < 1e-6);
        }
    }

    #[test]
    fn logdet_is_the_sum_of_layer_logdets(seed in any::<u64>(), activation in placement()) {
        let m = model(seed, activation, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = normal(&[2, 3, 4, 4], &mut rng, 0.3);
        let mut g = Tape::inference();
        let v = g.constant(x).unwrap();
        let inv = m.flow_visible.invert(&mut g, &m.store, v).unwrap();
        let mut sum = [0.0; 2];
        for l in &inv.layer_logdets {
            for (s, v) in sum.iter_mut().zip(g.value(*l).data()) {
                *s += v;
            }
        }
        prop_assert_eq!(g.value(inv.logdet).data(), &sum[..]);
    }

    #[test]
    fn flow_loss_is_translation_consistent(seed in any::<u64>(), c in -3.0f64..3.0) {
        // Shifts that are exact in binary keep the check free of rounding.
        let c = (c * 8.0).round() / 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zv = normal(&[2, 4], &mut rng, 1.0).map(|v| (v * 64.0).round() / 64.0);
        let zr = normal(&[2, 4], &mut rng, 1.0).map(|v| (v * 64.0).round() / 64.0);
        let ld = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();
        let loss = |shift: f64| {
            run(|g| {
                let a = g.constant(zv.map(|v| v + shift)).unwrap();
                let b = g.constant(zr.map(|v| v + shift)).unwrap();
                let la = g.constant(ld.clone()).unwrap();
                let lb = g.constant(ld.clone()).unwrap();
                let prior = GaussianPrior::new(shift, 1.5).unwrap();
                let l = flow_loss(g, a, la, b, lb, prior).unwrap();
                g.value(l).item()
            })
        };
        prop_assert_eq!(loss(0.0), loss(c));
    }

    #[test]
    fn noise_loss_falls_when_an_intra_pair_moves_closer(shrink in 0.01f64..0.99) {
        // Identity 1 sits far away, so moving a sample of identity 0 toward its
        // partner changes the inter-class distances only by O(h²/100).
        let ids = [0, 0, 1, 1];
        let mods = [Modality::Visible, Modality::Infrared, Modality::Visible, Modality::Infrared];
        let loss = |h: f64| {
            run(|g| {
                let z = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, h, 100.0, 0.0, 100.0, 1.0]).unwrap();
                let v = g.constant(z).unwrap();
                let l = noise_loss(g, v, &ids, &mods, NoisePairing::CrossModality).unwrap();
                g.value(l).item()
            })
        };
        let before = loss(1.0);
        let after = loss(shrink);
        prop_assert!(after < before);
    }

    #[test]
    fn adversarial_losses_stay_in_bounds(seed in any::<u64>()) {
        let m = model(seed, ActivationPlacement::LatentSide, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = m.store.clone();
        for id in store.ids_in(&Group::DISCRIMINATORS) {
            for v in store.value_mut(id).data_mut() {
                *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let real = normal(&[4, 3, 4, 4], &mut rng, 0.5);
        let fake = normal(&[4, 3, 4, 4], &mut rng, 2.0);
        let mut g = Tape::inference();
        let (rv, fv) = (g.constant(real.clone()).unwrap(), g.constant(fake.clone()).unwrap());
        let feats = |g: &mut Tape, md: Modality, x: Var| m.encoder(md).encode(g, &store, x).unwrap();
        let pairs: Vec<(usize, usize)> = (0..4).map(|i| (i, (i + 1) % 4)).collect();
        let pv = PairedFeatures { real: feats(&mut g, Modality::Visible, rv), fake: feats(&mut g, Modality::Visible, fv), pairs: pairs.clone() };
        let pr = PairedFeatures { real: feats(&mut g, Modality::Infrared, rv), fake: feats(&mut g, Modality::Infrared, fv), pairs };
        let gen = identity_gen_loss(&mut g, &pv, &pr).unwrap();
        let disc = identity_disc_loss(&mut g, &pv, &pr).unwrap();
        prop_assert!((0.0..=4.0).contains(&g.value(gen).item()));
        prop_assert!((0.0..=4.0).contains(&g.value(disc).item()));
        let score = |g: &mut Tape, md: Modality, x: Var| m.discriminator(md).score(g, &store, x).unwrap();
        let (s_rv, s_fv, s_rr, s_fr) = (
            score(&mut g, Modality::Visible, rv),
            score(&mut g, Modality::Visible, fv),
            score(&mut g, Modality::Infrared, rv),
            score(&mut g, Modality::Infrared, fv),
        );
        for s in [s_rv, s_fv, s_rr, s_fr] {
            prop_assert!(g.value(s).data().iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        let mg = modality_gen_loss(&mut g, s_fv, s_fr).unwrap();
        let md = modality_disc_loss(&mut g, s_rv, s_fv, s_rr, s_fr).unwrap();
        prop_assert!((0.0..=2.0).contains(&g.value(mg).item()));
        prop_assert!((0.0..=4.0).contains(&g.value(md).item()));
    }

    /// Image-side tanh clamps cross-flow translations even at initialization,
    /// so only the placements without an image-side artanh are covered.
    #[test]
    fn cmg_cycle_is_exact(seed in any::<u64>(), latent_tanh in any::<bool>(), scale in 0.0f64..0.1) {
        let activation = if latent_tanh { ActivationPlacement::LatentSide } else { ActivationPlacement::None };
        let m = model(seed, activation, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let images = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|_| f64::from(rng.random_range(0u8..=255))).collect()).unwrap();
        let (there, s1) = cmg_v2r(&m, &images).unwrap();
        let (back, s2) = cmg_r2v(&m, &there).unwrap();
        prop_assert_eq!(s1 + s2, 0);
        prop_assert!(back.max_abs_diff(&images) < 1e-6, "{}", back.max_abs_diff(&images));
    }

    #[test]
    fn interpolation_spec_requires_q_above_p(p in 0u32..20, q in 0u32..20) {
        prop_assert_eq!(InterpolationSpec::new(p, q).is_ok(), q > p && p >= 1);
    }

    #[test]
    fn expansion_multiple_must_be_positive(m in -2.0f64..3.0) {
        prop_assert_eq!(ExpansionPlan::new(m, ExpansionTarget::Both).is_ok(), m > 0.0);
    }

    #[test]
    fn synthetic_infrared_is_channel_equal(seed in any::<u64>(), ids in 2u32..5, per in 2u32..4) {
        let spec = SynthSpec { identities: ids, per_identity: per, height: 8, width: 4, seed, ..Default::default() };
        let d = render_dataset(&spec).unwrap();
        prop_assert_eq!(d.len(), (2 * ids * per) as usize);
        prop_assert_eq!(&render_dataset(&spec).unwrap(), &d);
        for s in d.samples.iter().filter(|s| s.modality == Modality::Infrared) {
            prop_assert_eq!(s.max_channel_range(), 0.0);
        }
    }

    #[test]
    fn retrieval_metrics_lie_in_unit_interval(q in prop::collection::vec((0u32..3, -5.0f64..5.0), 1..6), gal in prop::collection::vec((0u32..3, -5.0f64..5.0), 3..8)) {
        let lab = |v: &[(u32, f64)]| v.iter().map(|&(identity, f)| Labeled { identity, feature: vec![f] }).collect::<Vec<_>>();
        let gallery: Vec<(u32, f64)> = gal.iter().copied().chain([(0, 9.0), (1, 9.5), (2, 10.0)]).collect();
        let r = evaluate(&lab(&q), &lab(&gallery)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.rank1));
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!(r.map >= r.rank1 / gallery.len() as f64);
        let exact: Vec<Labeled> = lab(&q);
        let perfect = evaluate(&exact, &exact.iter().cloned().chain(lab(&[(0, 1e6), (1, 2e6), (2, 3e6)])).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(perfect.rank1, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z]{3,10}") {
        prop_assume!(!["train", "synth", "tse", "eval", "paths"].contains(&key.as_str()));
        let json = format!("{{\"{key}\": 1}}");
        prop_assert!(Config::parse(json.as_bytes()).is_err());
        let nested = format!("{{\"train\": {{\"{key}x\": 1}}}}");
        prop_assert!(Config::parse(nested.as_bytes()).is_err());
    }

    #[test]
    fn checkpoint_bytes_are_stable(seed in any::<u64>()) {
        let config = TrainConfig { blocks: 1, image_size: [8, 4], seed, ..Default::default() };
        let state = TrainState::new(&config).unwrap();
        let bytes = Checkpoint::capture(&config, &state).unwrap().to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        prop_assert_eq!(&bytes, &again);
        let mut broken = bytes.clone();
        let i = (seed as usize) % broken.len();
        broken[i] ^= 0x10;
        prop_assert!(Checkpoint::from_bytes(&broken).is_err());
    }

    #[test]
    fn flow_config_requires_even_extents(h in 1usize..9, w in 1usize..9) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let made = FlowGenerator::new(&mut store, FlowConfig::new(1, [3, h, w]), Modality::Visible, Group::Aux, &mut rng);
        prop_assert_eq!(made.is_ok(), h % 2 == 0 && w % 2 == 0);
    }
}

fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let conv = store.get(id).name.ends_with("weight") && store.value(id).shape().len() == 2;
        let s = if conv { scale.min(0.05) } else { scale };
        for v in store.value_mut(id).data_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

#[test]
fn preprocess_maps_pixel_range_inside_tanh_domain() {
    let x = Tensor::new(vec![1, 3, 1, 1], vec![0.0, 127.5, 255.0]).unwrap();
    let p = preprocess(&x);
    assert!(
        (p.data()[0] + 0.9).abs() < 1e-15
            && p.data()[1].abs() < 1e-15
            && (p.data()[2] - 0.9).abs() < 1e-15
    );
}

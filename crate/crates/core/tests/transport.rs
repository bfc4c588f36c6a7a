use massact::engine::{ActivationPlant, ActivationTensor, CaptureSpec, Engine, EngineConfig, Stream, Variant};
use massact::io::{encode, trajectory_records};
use massact::stats::{ChannelIndicator, Polarity};
use massact::transport::{
    latent_lerp, merge_into, replace_channels, replace_spatial, run_transport, sweep_transport, JointMask, LayerSet, MaskFrom,
    Regime, TransportGrid, TransportPlan,
};
use massact::{Error, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn keep(bits: Vec<bool>) -> ChannelIndicator {
    ChannelIndicator {
        bits,
        polarity: Polarity::KeepSelected,
    }
}

fn tensor(m: Matrix) -> ActivationTensor {
    ActivationTensor::new(Stream::Image, 1, 0, m)
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix, Vec<bool>, Vec<bool>)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-100.0f32..100.0, n * d),
            prop::collection::vec(-100.0f32..100.0, n * d),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), d),
        )
            .prop_map(move |(a, b, p, m)| (Matrix::from_vec(n, d, a).unwrap(), Matrix::from_vec(n, d, b).unwrap(), p, m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn channel_replacement_algebra((t, s, p, m) in pair()) {
        let (t, s) = (tensor(t), tensor(s));
        let m = keep(m);
        prop_assert!(replace_channels(&t, &t, &m).unwrap().data.bit_eq(&t.data));
        let once = replace_channels(&t, &s, &m).unwrap();
        let twice = replace_channels(&once, &s, &m).unwrap();
        prop_assert!(once.data.bit_eq(&twice.data));

        let all_rows = JointMask::new(vec![true; p.len()], m.clone()).unwrap();
        prop_assert!(replace_spatial(&t, &s, &all_rows).unwrap().data.bit_eq(&once.data));

        let joint = JointMask::new(p.clone(), m.clone()).unwrap();
        let out = replace_spatial(&t, &s, &joint).unwrap();
        for n in 0..p.len() {
            for d in 0..m.len() {
                let v = out.data.get(n, d).to_bits();
                let expect = if p[n] && m.bits[d] { s.data.get(n, d) } else { t.data.get(n, d) };
                prop_assert_eq!(v, expect.to_bits());
            }
        }
        prop_assert_eq!(out.point(), t.point());
    }
}

#[test]
fn joint_mask_is_the_outer_product_exhaustively() {
    for n in 1..=8usize {
        for d in 1..=8usize {
            for pb in 0u32..(1 << n) {
                let p: Vec<bool> = (0..n).map(|i| pb >> i & 1 == 1).collect();
                for mb in 0u32..(1 << d) {
                    let m: Vec<bool> = (0..d).map(|i| mb >> i & 1 == 1).collect();
                    let joint = JointMask::new(p.clone(), keep(m.clone())).unwrap();
                    let dense = joint.materialize();
                    for r in 0..n {
                        for c in 0..d {
                            assert_eq!(dense.get(r, c) == 1.0, p[r] && m[c]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn hand_evaluated_two_by_two() {
    let t = tensor(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let s = tensor(Matrix::from_rows(&[[9.0, 8.0], [7.0, 6.0]]).unwrap());
    let joint = JointMask::new(vec![true, false], keep(vec![false, true])).unwrap();
    assert_eq!(replace_spatial(&t, &s, &joint).unwrap().data.as_slice(), &[1.0, 8.0, 3.0, 4.0]);
    let row0 = JointMask::new(vec![true, false], keep(vec![true, true])).unwrap();
    assert_eq!(replace_spatial(&t, &s, &row0).unwrap().data.as_slice(), &[9.0, 8.0, 3.0, 4.0]);
}

#[test]
fn mask_shape_and_polarity_errors() {
    let t = tensor(Matrix::zeros(2, 3));
    let zero = ChannelIndicator {
        bits: vec![true; 3],
        polarity: Polarity::ZeroSelected,
    };
    assert!(JointMask::new(vec![true; 2], zero.clone()).is_err());
    assert!(replace_channels(&t, &t, &zero).is_err());
    assert!(matches!(replace_channels(&t, &tensor(Matrix::zeros(3, 3)), &keep(vec![true; 3])), Err(Error::Shape(_))));
    let wrong = JointMask::new(vec![true; 3], keep(vec![true; 3])).unwrap();
    assert!(matches!(replace_spatial(&t, &t, &wrong), Err(Error::Shape(_))));
}

#[test]
fn lerp_midpoint() {
    let a = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
    let b = Matrix::from_rows(&[[4.0, -2.0]]).unwrap();
    assert_eq!(latent_lerp(&a, &b, 0.5).unwrap().as_slice(), &[2.0, 0.0]);
    assert!(latent_lerp(&a, &Matrix::zeros(2, 2), 0.5).is_err());
}

fn engine(seed: u64, variant: Variant) -> Engine {
    Engine::new(EngineConfig {
        depth: 6,
        width: 16,
        heads: 4,
        latent_h: 3,
        latent_w: 3,
        encoder_len: 3,
        steps: 2,
        seed,
        variant,
        vocab: 16,
        plant: None,
    })
    .unwrap()
}

const PS: [u32; 3] = [1, 2, 3];
const PT: [u32; 3] = [9, 10, 11];

#[test]
fn all_runs_share_the_initial_noise() {
    for variant in [Variant::DualStream, Variant::SingleStream] {
        let e = engine(1, variant);
        let r = run_transport(&e, &PS, &PT, &TransportPlan::default()).unwrap();
        assert!(r.merged.initial_noise.bit_eq(&r.source.initial_noise));
        assert!(r.merged.initial_noise.bit_eq(&r.target.initial_noise));
        assert!(!r.merged.final_latent.bit_eq(&r.target.final_latent));
    }
}

#[test]
fn frozen_source_is_never_written() {
    let e = engine(2, Variant::DualStream);
    let source = e.sample(&PS, &CaptureSpec::All, &[]).unwrap();
    let before = encode(&trajectory_records(&source).unwrap()).unwrap();
    for plan in [
        TransportPlan::default(),
        TransportPlan {
            layers: LayerSet::All,
            encoder_k: 8,
            mask_from: MaskFrom::LastStep,
            ..Default::default()
        },
    ] {
        merge_into(&e, &source, &PT, &plan, &CaptureSpec::All).unwrap();
    }
    assert_eq!(encode(&trajectory_records(&source).unwrap()).unwrap(), before);
}

#[test]
fn full_replacement_reproduces_source_captures() {
    for variant in [Variant::DualStream, Variant::SingleStream] {
        let e = engine(3, variant);
        let plan = TransportPlan {
            layers: LayerSet::All,
            image_k: 16,
            encoder_k: 16,
            use_spatial_mask: false,
            ..Default::default()
        };
        let r = run_transport(&e, &PS, &PT, &plan).unwrap();
        assert_eq!(r.merged.captured.len(), 6 * 2 * 2);
        for (point, act) in &r.merged.captured {
            assert!(act.data.bit_eq(&r.source.captured[point].data), "{point:?}");
        }
    }
}

#[test]
fn encoder_only_plan_touches_only_the_encoder() {
    let e = engine(4, Variant::DualStream);
    let plan = TransportPlan {
        layers: LayerSet::Explicit(vec![2]),
        image_k: 0,
        encoder_k: 4,
        ..Default::default()
    };
    let r = run_transport(&e, &PS, &PT, &plan).unwrap();
    let merged = &r.merged.activation(2, 0, Stream::Encoder).unwrap().data;
    let source = &r.source.activation(2, 0, Stream::Encoder).unwrap().data;
    let equal_cols = (0..16).filter(|&c| merged.column(c) == source.column(c)).count();
    assert_eq!(equal_cols, 4);
    assert!(r.merged.activation(2, 0, Stream::Image).unwrap().data.bit_eq(&r.target.activation(2, 0, Stream::Image).unwrap().data));
}

#[test]
fn plan_layers_are_range_checked() {
    let e = engine(5, Variant::DualStream);
    let plan = TransportPlan {
        layers: LayerSet::Explicit(vec![6]),
        ..Default::default()
    };
    assert!(matches!(run_transport(&e, &PS, &PT, &plan), Err(Error::Range(_))));
    let clamped = TransportPlan::default().resolve(6, 16).unwrap();
    assert_eq!((clamped.image_k, clamped.layers), (16, vec![2, 3]));
}

#[test]
fn plan_round_trips_through_json() {
    let plan = TransportPlan {
        layers: LayerSet::Regime(Regime::Upper),
        encoder_k: 3,
        mask_from: MaskFrom::LastStep,
        ..Default::default()
    };
    let json = serde_json::to_string(&plan).unwrap();
    assert!(json.contains("\"layers\":\"upper\""));
    assert_eq!(serde_json::from_str::<TransportPlan>(&json).unwrap(), plan);
    assert!(serde_json::from_str::<TransportPlan>("{\"bogus\": 1}").is_err());
}

#[test]
fn sweep_reference_rows() {
    let e = engine(6, Variant::DualStream);
    let grid = TransportGrid {
        layers: vec![LayerSet::Regime(Regime::Lower), LayerSet::Regime(Regime::Middle)],
        image_k: vec![0, 8],
        encoder_k: vec![0],
    };
    let same = sweep_transport(&e, &[(PS.to_vec(), PS.to_vec())], &grid, &TransportPlan::default()).unwrap();
    assert!(same.iter().all(|r| r.delta_s == 0.0 && r.delta_t == 0.0));

    let rows = sweep_transport(&e, &[(PS.to_vec(), PT.to_vec())], &grid, &TransportPlan::default()).unwrap();
    assert_eq!(rows.len(), 4);
    let source = e.sample(&PS, &CaptureSpec::Nothing, &[]).unwrap();
    let target = e.sample(&PT, &CaptureSpec::Nothing, &[]).unwrap();
    let reference = target.final_latent.rmse(&source.final_latent).unwrap();
    for r in rows.iter().filter(|r| r.image_k == 0) {
        assert_eq!(r.delta_t, 0.0);
        assert_eq!(r.delta_s, reference);
    }
    for r in &rows {
        assert_eq!(r.delta_diff, r.delta_t - r.delta_s);
    }
    assert_eq!(rows[0].regime, "lower");
    assert!(sweep_transport(&e, &[], &grid, &TransportPlan::default()).is_err());
}

/// Engines with planted massive channels on half the image tokens.
#[test]
fn larger_channel_budgets_pull_toward_the_source() {
    let ks = [0usize, 4, 8, 16, 32];
    let mut mean = vec![0.0; ks.len()];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let mut channels = rand::seq::index::sample(&mut rng, 32, 4).into_vec();
        channels.sort_unstable();
        let e = Engine::new(EngineConfig {
            depth: 6,
            width: 32,
            heads: 4,
            latent_h: 4,
            latent_w: 4,
            encoder_len: 4,
            steps: 3,
            seed,
            plant: Some(ActivationPlant {
                channels,
                tokens: Some((0..16).filter(|i| i % 4 < 2).collect()),
                amplitude: 100.0,
            }),
            ..Default::default()
        })
        .unwrap();
        let ps: Vec<u32> = (0..4).map(|_| rng.random_range(0..64)).collect();
        let pt: Vec<u32> = (0..4).map(|_| rng.random_range(0..64)).collect();
        let grid = TransportGrid {
            layers: vec![LayerSet::Regime(Regime::Middle)],
            image_k: ks.to_vec(),
            encoder_k: vec![0],
        };
        let base = TransportPlan {
            use_spatial_mask: false,
            ..Default::default()
        };
        for (acc, row) in mean.iter_mut().zip(sweep_transport(&e, &[(ps, pt)], &grid, &base).unwrap()) {
            *acc += row.delta_s / 20.0;
        }
    }
    assert!(mean.windows(2).all(|w| w[1] <= w[0]), "mean delta_S by image_k: {mean:?}");
    assert!(mean[ks.len() - 1] < mean[0]);
}

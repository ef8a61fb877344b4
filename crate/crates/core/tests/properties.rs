use std::collections::BTreeSet;

use proptest::prelude::*;

use fsml_core::data::{corpus_to_jsonl, generate_synthetic, median_round_half_up, HcatCode, SynthConfig, SynthRegion};
use fsml_core::metrics::{cohens_kappa, minority_class_accuracy, overall_accuracy, subset_accuracy, ConfusionTable};
use fsml_core::nn::{init_model, Checkpoint, InputSpec, ModelSpec, TaskInfoMode, TransformerConfig};
use fsml_core::rng::stream;
use fsml_core::ssl::{build_mask, MaskPlan, Strategy};
use fsml_core::tensor::{grad, Tape, Tensor};
use fsml_core::token_codec::{month_of, ChannelGroup, ChannelGroupSpec, EncodingRegime};
use fsml_core::train::{cosine_annealing, EarlyStopper};

fn group_spec(statics: usize, dynamics: &[usize]) -> ChannelGroupSpec {
    let mut g: Vec<ChannelGroup> = (0..statics).map(|i| ChannelGroup::fixed(&format!("s{i}"), 1 + i)).collect();
    g.extend(dynamics.iter().enumerate().map(|(i, &c)| ChannelGroup::dynamic(&format!("d{i}"), c)));
    ChannelGroupSpec::new(g).unwrap()
}

fn codes(v: &[u8]) -> Vec<HcatCode> {
    v.iter().map(|c| HcatCode::new(format!("{c}"))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_count_formula(statics in 0usize..4, dynamics in prop::collection::vec(1usize..6, 1..5), t in 1usize..40) {
        let g = group_spec(statics, &dynamics);
        prop_assert_eq!(g.token_count(t), statics + dynamics.len() * t);
        let order = g.token_group_order();
        prop_assert_eq!(order.len(), statics + dynamics.len());
    }

    #[test]
    fn masks_never_exceed_target_and_skip_padding(
        dynamics in prop::collection::vec(1usize..4, 1..4),
        t in 2usize..30,
        pad_every in 2usize..9,
        strategy in prop::sample::select(Strategy::STRUCTURED.to_vec()),
        strict in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let g = group_spec(1, &dynamics);
        let n = g.token_count(t);
        let pad: Vec<bool> = (0..n).map(|i| i % pad_every == 0).collect();
        let real = pad.iter().filter(|p| !**p).count();
        let plan = MaskPlan { strategy, target_ratio: 0.75, strict };
        let m = build_mask(&plan, &g, t, &pad, &mut stream(seed, "p", 0)).unwrap();
        let got = m.iter().filter(|x| **x).count();
        let target = 3 * real / 4;
        prop_assert!(m.iter().zip(&pad).all(|(a, b)| !(*a && *b)));
        prop_assert!(got <= target);
        if !strict || strategy == Strategy::Random {
            prop_assert_eq!(got, target);
        }
    }

    #[test]
    fn median_is_order_free(mut v in prop::collection::vec(0usize..1000, 1..50)) {
        let m = median_round_half_up(&v).unwrap();
        v.reverse();
        prop_assert_eq!(median_round_half_up(&v), Some(m));
        let below = v.iter().filter(|x| **x < m).count();
        let above = v.iter().filter(|x| **x > m).count();
        prop_assert!(below <= v.len() / 2 && above <= v.len() / 2);
    }

    #[test]
    fn kappa_bounded_and_perfect(labels in prop::collection::vec(0u8..5, 2..60), flips in prop::collection::vec(any::<bool>(), 60)) {
        let ys = codes(&labels);
        let t = ConfusionTable::from_predictions(&ys, &ys).unwrap();
        prop_assert!((cohens_kappa(&t).unwrap() - 1.0).abs() < 1e-12);
        let ps: Vec<HcatCode> = ys.iter().zip(&flips).map(|(y, f)| if *f { HcatCode::new("9") } else { y.clone() }).collect();
        let t = ConfusionTable::from_predictions(&ps, &ys).unwrap();
        if let Ok(k) = cohens_kappa(&t) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }
        prop_assert_eq!(t.total(), ys.len() as u64);
    }

    #[test]
    fn minority_accuracy_is_complement_subset(labels in prop::collection::vec(0u8..4, 1..50), preds in prop::collection::vec(0u8..4, 50)) {
        let ys = codes(&labels);
        let ps = codes(&preds[..labels.len()]);
        let major = HcatCode::new("0");
        let rest: BTreeSet<HcatCode> = (1..4).map(|c| HcatCode::new(format!("{c}"))).collect();
        match minority_class_accuracy(&ps, &ys, &major) {
            Ok(a) => prop_assert!((a - subset_accuracy(&ps, &ys, &rest).unwrap()).abs() < 1e-15),
            Err(_) => prop_assert!(ys.iter().all(|y| *y == major)),
        }
        let oa = overall_accuracy(&ps, &ys).unwrap();
        prop_assert!((0.0..=1.0).contains(&oa));
    }

    #[test]
    fn months_are_monotone(a in 1usize..=366, b in 1usize..=366) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(month_of(lo).unwrap() <= month_of(hi).unwrap());
    }

    #[test]
    fn cosine_stays_in_range(lr in 1e-5f64..1.0, cycles in 0u32..5, total in 1usize..200, e in 0usize..200) {
        let v = cosine_annealing(lr, cycles, e % total, total);
        prop_assert!(v >= 0.0 && v <= lr + 1e-15);
    }

    #[test]
    fn stopper_best_is_argmin(losses in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let mut s = EarlyStopper::new(1000);
        for (e, l) in losses.iter().enumerate() {
            s.observe(e, *l);
        }
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = losses.iter().position(|l| *l == min).unwrap();
        prop_assert_eq!(s.best_epoch, Some(first));
    }

    #[test]
    fn second_derivative_of_polynomial(a in -3.0f64..3.0, x0 in -2.0f64..2.0) {
        // f = a x^3 + x^2: f' = 3a x^2 + 2x, f'' = 6a x + 2.
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(x0));
        let f = x.powf(3.0).unwrap().scale(a).unwrap().add(&x.square().unwrap()).unwrap();
        let g = grad(&f, &[&x], true).unwrap().remove(0);
        prop_assert!((g.item().unwrap() - (3.0 * a * x0 * x0 + 2.0 * x0)).abs() < 1e-12);
        let h = grad(&g, &[&x], false).unwrap().remove(0);
        prop_assert!((h.item().unwrap() - (6.0 * a * x0 + 2.0)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), d in prop::sample::select(vec![8usize, 16]), classes in 2usize..6) {
        let spec = ModelSpec {
            transformer: TransformerConfig { embed_dim: d, num_heads: 2, hidden_dim: 2 * d, encoder_blocks: 1, decoder_blocks: 0, max_seq_len: 366 },
            input: InputSpec::Series { group: "S2".into(), channels: vec![0, 1, 2] },
            n_classes: classes,
            task_info: TaskInfoMode::None,
        };
        let p = init_model(&spec, &mut stream(seed, "ck", 0)).unwrap();
        let bytes = Checkpoint::from_params(&p).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.params(), p);
    }

    #[test]
    fn synthetic_jsonl_is_seed_stable(seed in any::<u64>()) {
        let region = |code: &str, finetune| SynthRegion { code: code.into(), samples: 40, obs_min: 3, obs_max: 6, lon: 0.4, lat: 1.0, finetune };
        let cfg = SynthConfig { regions: vec![region("AA1", false), region("BB1", true)], n_classes: 4, k_max: 2, ..SynthConfig::default() };
        let a = corpus_to_jsonl(&generate_synthetic(&cfg, seed).unwrap()).unwrap();
        let b = corpus_to_jsonl(&generate_synthetic(&cfg, seed).unwrap()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.lines().count(), 80);
    }
}

#[test]
fn regimes_sum_to_width() {
    for d in (8..=512).step_by(8) {
        for r in [EncodingRegime::presto(d), EncodingRegime::xts(d)] {
            r.validate().unwrap();
            assert_eq!(r.d_sin + r.d_month + r.d_channel, d);
        }
    }
}

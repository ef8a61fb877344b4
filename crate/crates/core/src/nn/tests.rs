use super::layers::{encode, scaled_dot_attention};
use super::*;
use crate::rng::stream;
use crate::tensor::{grad, Array, Tape, Tensor};

fn small_cfg(d: usize) -> TransformerConfig {
    TransformerConfig {
        embed_dim: d,
        num_heads: 2,
        hidden_dim: 2 * d,
        encoder_blocks: 1,
        decoder_blocks: 0,
        max_seq_len: 16,
    }
}

fn series_spec(d: usize, width: usize, n_classes: usize) -> ModelSpec {
    ModelSpec {
        transformer: small_cfg(d),
        input: InputSpec::Series {
            group: "S2".into(),
            channels: (0..width).collect(),
        },
        n_classes,
        task_info: TaskInfoMode::None,
    }
}

fn series_input(values: Vec<f64>, width: usize, days: &[usize]) -> ModelInput {
    let t = days.len();
    ModelInput {
        body: InputBody::Series {
            values: Array::new(vec![t, width], values).unwrap(),
            positions: days.to_vec(),
            padded: vec![false; t],
        },
        cart: [1.0, 0.0, 0.0],
    }
}

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = stream(seed, "test", 0);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn sinusoid_examples() {
    assert_eq!(sinusoidal_encoding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    let v = sinusoidal_encoding(1, 2).unwrap();
    assert!((v[0] - 0.8415).abs() < 1e-4 && (v[1] - 0.5403).abs() < 1e-4);
    assert!(sinusoidal_encoding(3, 5).is_err());
    for pos in [0, 7, 100, 365] {
        let v = sinusoidal_encoding(pos, 16).unwrap();
        for p in v.chunks(2) {
            assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
        }
    }
}

fn head(w: Vec<f64>, b: Vec<f64>, d: usize, n: usize) -> TensorMap {
    TensorMap::from([
        ("classifier.weight".to_string(), Tensor::new(&[d, n], w).unwrap()),
        ("classifier.bias".to_string(), Tensor::new(&[n], b).unwrap()),
    ])
}

#[test]
fn classify_examples() {
    let e = Tensor::new(&[1, 2], vec![2.0, 1.0]).unwrap();
    let l = classify(&head(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2), &e).unwrap();
    assert_eq!(l.values(), &[2.0, 1.0]);
    let p = l.softmax().unwrap();
    assert!((p.values()[0] - 0.7311).abs() < 1e-4 && (p.values()[1] - 0.2689).abs() < 1e-4);
    let z = classify(&head(vec![0.0; 6], vec![0.0; 3], 2, 3), &e).unwrap();
    assert_eq!(z.values(), &[0.0; 3]);
    let u = z.softmax().unwrap();
    assert!(u.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let bad = Tensor::new(&[1, 3], vec![1.0; 3]).unwrap();
    assert!(classify(&head(vec![0.0; 6], vec![0.0; 3], 2, 3), &bad).is_err());
}

#[test]
fn pool_examples() {
    let m = Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
    assert_eq!(pool_sequence(&m, &[false, false]).unwrap().values(), &[2.0, 4.0]);
    assert_eq!(pool_sequence(&m, &[false, true]).unwrap().values(), &[1.0, 3.0]);
    let same = Tensor::new(&[2, 2], vec![1.5, -2.0, 1.5, -2.0]).unwrap();
    assert_eq!(pool_sequence(&same, &[false, false]).unwrap().values(), &[1.5, -2.0]);
    assert!(matches!(
        pool_sequence(&m, &[true, true]),
        Err(crate::Error::Degenerate(_))
    ));
}

fn encoder_params(d: usize, seed: u64) -> TensorParams {
    let spec = series_spec(d, 3, 4);
    TensorParams::constant(&init_model(&spec, &mut stream(seed, "init", 0)).unwrap())
}

fn row(m: &Tensor, i: usize) -> Vec<f64> {
    let d = m.shape()[1];
    m.values()[i * d..(i + 1) * d].to_vec()
}

#[test]
fn encode_is_permutation_equivariant() {
    let d = 8;
    let p = encoder_params(d, 1);
    let spec = series_spec(d, 3, 4);
    let vals = rand_vec(12, 2);
    let days = [4, 30, 90, 200];
    let a = super::model::embed(&p, &spec, &series_input(vals.clone(), 3, &days)).unwrap().0;
    let perm = [2, 0, 3, 1];
    let mut pv = Vec::new();
    let mut pd = Vec::new();
    for &i in &perm {
        pv.extend_from_slice(&vals[i * 3..i * 3 + 3]);
        pd.push(days[i]);
    }
    let b = super::model::embed(&p, &spec, &series_input(pv, 3, &pd)).unwrap().0;
    let ea = encode(&p.backbone, &spec.transformer, &a, &[false; 4]).unwrap();
    let eb = encode(&p.backbone, &spec.transformer, &b, &[false; 4]).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        for (x, y) in row(&ea, i).iter().zip(row(&eb, j)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_tokens_do_not_leak() {
    let d = 8;
    let p = encoder_params(d, 3);
    let cfg = small_cfg(d);
    let x = Tensor::new(&[4, d], rand_vec(4 * d, 4)).unwrap();
    let mut y_vals = x.values().to_vec();
    for v in &mut y_vals[d..2 * d] {
        *v += 10.0;
    }
    let y = Tensor::new(&[4, d], y_vals).unwrap();
    let mask = [false, true, false, false];
    let ex = encode(&p.backbone, &cfg, &x, &mask).unwrap();
    let ey = encode(&p.backbone, &cfg, &y, &mask).unwrap();
    for i in [0, 2, 3] {
        for (a, b) in row(&ex, i).iter().zip(row(&ey, i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(row(&ex, 1).iter().all(|&v| v == 0.0));
}

#[test]
fn zero_weights_reduce_to_final_norm() {
    let d = 8;
    let mut p = encoder_params(d, 5);
    for (k, v) in p.backbone.iter_mut() {
        if !k.contains("ln") {
            *v = Tensor::zeros(v.shape());
        }
    }
    let x = Tensor::new(&[1, d], rand_vec(d, 6)).unwrap();
    let out = encode(&p.backbone, &small_cfg(d), &x, &[false]).unwrap();
    let want = x.layer_norm(crate::tensor::LAYER_NORM_EPS).unwrap();
    for (a, b) in out.values().iter().zip(want.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn overflow_is_length_error() {
    let d = 8;
    let p = encoder_params(d, 1);
    let x = Tensor::zeros(&[17, d]);
    assert!(matches!(
        encode(&p.backbone, &small_cfg(d), &x, &[false; 17]),
        Err(crate::Error::Length { len: 17, max: 16 })
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let q = Tensor::new(&[3, 4], rand_vec(12, 7)).unwrap();
    let k = Tensor::new(&[5, 4], rand_vec(20, 8)).unwrap();
    let v = Tensor::new(&[5, 4], rand_vec(20, 9)).unwrap();
    let mask = [false, true, false, true, false];
    let (_, w) = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
    for r in w.values().chunks(5) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r[1], 0.0);
        assert_eq!(r[3], 0.0);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let d = 8;
    let spec = series_spec(d, 3, 3);
    let params = init_model(&spec, &mut stream(11, "init", 0)).unwrap();
    let input = series_input(rand_vec(9, 12), 3, &[3, 50, 120]);
    let loss_of = |p: &ModelParams| -> f64 {
        let tp = TensorParams::constant(p);
        let l = logits(&tp, &spec, &input).unwrap();
        cross_entropy(&l, &[1]).unwrap().item().unwrap()
    };
    let tape = Tape::new();
    let tp = TensorParams::watched(&params, &tape, &Section::ALL);
    let loss = cross_entropy(&logits(&tp, &spec, &input).unwrap(), &[1]).unwrap();
    let flat = tp.flat(&Section::ALL);
    let grads = grad(&loss, &flat, false).unwrap();
    let keys = params.keys(&Section::ALL);
    let h = 1e-5;
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for ((s, k), g) in keys.iter().zip(&grads) {
        let n = params.get(*s, k).unwrap().numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.section_mut(*s).get_mut(k).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.section_mut(*s).get_mut(k).unwrap().data_mut()[i] -= h;
            num.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            ana.push(g.values()[i]);
        }
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
}

#[test]
fn head_reset_changes_logits_only() {
    let d = 8;
    let spec = series_spec(d, 3, 4);
    let mut params = init_model(&spec, &mut stream(1, "init", 0)).unwrap();
    let input = series_input(rand_vec(6, 3), 3, &[10, 20]);
    let before_e = sample_embedding(&TensorParams::constant(&params), &spec, &input).unwrap();
    let before_l = logits(&TensorParams::constant(&params), &spec, &input).unwrap();
    let backbone = params.backbone.clone();
    params.reset_head(d, 4, &mut stream(2, "head", 0));
    assert_eq!(params.backbone, backbone);
    let after_e = sample_embedding(&TensorParams::constant(&params), &spec, &input).unwrap();
    let after_l = logits(&TensorParams::constant(&params), &spec, &input).unwrap();
    assert_eq!(before_e.values(), after_e.values());
    assert_ne!(before_l.values(), after_l.values());
    assert_eq!(params.n_classes(), Some(4));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let spec = series_spec(8, 3, 4);
    let params = init_model(&spec, &mut stream(1, "init", 0)).unwrap();
    let ck = Checkpoint::from_params(&params);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"FSML");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params(), params);
    assert_eq!(back.to_bytes(), bytes);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn polar_examples() {
    let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(polar_to_cartesian(0.0, 0.0).unwrap(), [1.0, 0.0, 0.0]));
    let h = std::f64::consts::FRAC_PI_2;
    assert!(close(polar_to_cartesian(0.0, h).unwrap(), [0.0, 0.0, 1.0]));
    assert!(close(polar_to_cartesian(h, 0.0).unwrap(), [0.0, 1.0, 0.0]));
    assert!(polar_to_cartesian(4.0, 0.0).is_err());
}

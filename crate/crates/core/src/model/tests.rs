use super::*;
use crate::corpus::{TokenId, BOS};
use crate::substrate::kernels::{layer_norm_forward, log_sum_exp};
use crate::substrate::{grad_check, Graph};
use crate::test_support::tiny;

const X: &[TokenId] = &[5, 6, 4, 7];

#[test]
fn encoder_block_gradients() {
    let mut m = tiny(false, 10, 8, 1, 1);
    let targets = vec![4usize, 9, 6];
    let src: &[TokenId] = &[5, 6, 4];
    let model = m.clone();
    let report = grad_check(
        m.params_mut(),
        |g, s| {
            let mut probe = model.clone();
            *probe.params_mut() = s.clone();
            let enc = probe.encode_graph(g, &[src]).unwrap();
            let table = g.param(s, probe.layout.embed);
            let logits = g.matmul_t(enc, table);
            g.cross_entropy(logits, targets.clone(), 0.1)
        },
        4,
        1e-4,
        7,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4);
}

fn full_model_grad_check(ar: bool) {
    let mut m = tiny(ar, 10, 16, 1, 2);
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = vec![
        (vec![5, 6, 7], vec![5, 6, 6, 7]),
        (vec![8, 5], vec![8, 8, 5, 4, 4]),
    ];
    let model = m.clone();
    let report = grad_check(
        m.params_mut(),
        |g, s| {
            let mut probe = model.clone();
            *probe.params_mut() = s.clone();
            let refs: Vec<(&[TokenId], &[TokenId])> = pairs
                .iter()
                .map(|(a, b)| (a.as_slice(), b.as_slice()))
                .collect();
            if ar {
                probe.ar_loss(g, &refs, 0.1).unwrap()
            } else {
                probe.nar_loss(g, &refs, 0.1, 1.0).unwrap()
            }
        },
        3,
        1e-3,
        11,
    )
    .unwrap();
    assert!(report.checked > 50);
}

#[test]
fn nar_model_gradients() {
    full_model_grad_check(false);
}

#[test]
fn ar_model_gradients() {
    full_model_grad_check(true);
}

#[test]
fn encode_with_zero_weights_normalises_embeddings() {
    let mut m = tiny(false, 10, 8, 2, 3);
    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|p| p.name.starts_with("enc.") && !p.name.contains(".ln") && p.name != "enc.pos")
        .map(|p| p.name.clone())
        .collect();
    for n in names {
        let id = m.params().id(&n).unwrap();
        m.params_mut().value_mut(id).fill(0.0);
    }
    let s = m.params();
    let embed = s
        .by_name("embed")
        .unwrap()
        .value
        .select_rows(&X.iter().map(|&t| t as usize).collect::<Vec<_>>());
    let mut want = embed.clone();
    want.add_assign(&s.by_name("enc.pos").unwrap().value.slice_rows(0, X.len()));
    let ones = vec![1.0; 8];
    let zeros = vec![0.0; 8];
    for _ in 0..4 {
        want = layer_norm_forward(&want, &ones, &zeros).0;
    }
    assert!(m.encode(X).unwrap().max_abs_diff(&want) < 1e-9);
}

#[test]
fn encoder_is_position_sensitive() {
    let mut m = tiny(false, 10, 8, 1, 4);
    let before = m.encode(X).unwrap();
    let id = m.params().id("enc.pos").unwrap();
    let pos = m.params().value(id).clone();
    *m.params_mut().value_mut(id) = pos.select_rows(&[1, 0, 3, 2, 5, 4]);
    assert!(m.encode(X).unwrap().max_abs_diff(&before) > 1e-6);
}

#[test]
fn overlength_source_rejected() {
    let m = tiny(true, 10, 8, 1, 5);
    assert!(m.encode(&[5; 7]).is_err());
    assert!(m.encode(&[]).is_err());
}

#[test]
fn ar_outputs_are_causal() {
    let m = tiny(true, 10, 8, 2, 6);
    let enc = m.encode(X).unwrap();
    let a = m.ar_teacher_forced(&[BOS, 5, 6, 7, 8], &enc).unwrap();
    let b = m.ar_teacher_forced(&[BOS, 5, 6, 9, 4], &enc).unwrap();
    for i in 0..3 {
        assert_eq!(a.row(i), b.row(i), "row {i}");
    }
    assert!(a.row(3) != b.row(3));
    assert!(a.normalization_error() < 1e-6);
}

#[test]
fn cached_steps_match_teacher_forcing() {
    let m = tiny(true, 10, 8, 2, 7);
    let enc = m.encode(X).unwrap();
    let prefix = [BOS, 5, 6, 6, 9, 4];
    let full = m.ar_teacher_forced(&prefix, &enc).unwrap();
    let mem = m.encoder_memory(enc.clone());
    let mut caches = vec![m.empty_cache()];
    for (i, &t) in prefix.iter().enumerate() {
        let step = m.decode_step(&mem, &mut caches, &[t]).unwrap();
        for (a, b) in step.row(0).iter().zip(full.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
        let one = m.decode_ar_step(&prefix[..=i], &enc).unwrap();
        for (a, b) in one.iter().zip(full.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn ar_log_likelihood_is_sum_of_steps() {
    let m = tiny(true, 10, 8, 1, 8);
    let y: &[TokenId] = &[6, 6, 7];
    let enc = m.encode(X).unwrap();
    let mut prefix = vec![BOS];
    let mut want = 0.0;
    for &t in y.iter().chain(std::iter::once(&crate::corpus::EOS)) {
        want += m.decode_ar_step(&prefix, &enc).unwrap()[t as usize];
        prefix.push(t);
    }
    let got = m.ar_log_likelihood(X, y).unwrap();
    assert!((got - want).abs() < 1e-9);
    assert!(got <= 0.0);
}

#[test]
fn ar_likelihood_ranks_like_enumeration() {
    // vocabulary of 4 specials + 3 data tokens; all 27 length-3 outputs
    let m = tiny(true, 7, 8, 1, 9);
    let x: &[TokenId] = &[4, 5, 6];
    let enc = m.encode(x).unwrap();
    let mut best_enum = (f64::NEG_INFINITY, vec![]);
    let mut best_ll = (f64::NEG_INFINITY, vec![]);
    for code in 0..27u32 {
        let y: Vec<TokenId> = (0..3).map(|i| 4 + code / 3u32.pow(i) % 3).collect();
        let mut prefix = vec![BOS];
        let mut prob = 1.0;
        for &t in y.iter().chain(std::iter::once(&crate::corpus::EOS)) {
            prob *= m.decode_ar_step(&prefix, &enc).unwrap()[t as usize].exp();
            prefix.push(t);
        }
        if prob > best_enum.0 {
            best_enum = (prob, y.clone());
        }
        let ll = m.ar_log_likelihood(x, &y).unwrap();
        if ll > best_ll.0 {
            best_ll = (ll, y);
        }
    }
    assert_eq!(best_enum.1, best_ll.1);
}

#[test]
fn nar_rows_normalise_and_depend_on_length() {
    let m = tiny(false, 10, 8, 1, 10);
    let enc = m.encode(X).unwrap();
    let a = m.decode_nar(4, &enc).unwrap();
    let b = m.decode_nar(5, &enc).unwrap();
    assert_eq!(a.len(), 4);
    assert!(a.normalization_error() < 1e-6 && b.normalization_error() < 1e-6);
    assert!(a.row(0) != b.row(0));
    assert!(m.decode_nar(0, &enc).is_err());
    assert!(m.decode_nar(9, &enc).is_err());
}

#[test]
fn nar_rows_equal_without_position_or_context_signal() {
    let mut m = tiny(false, 10, 8, 2, 11);
    let dec_pos = m.params().id("dec.pos").unwrap();
    let row0 = m.params().value(dec_pos).row(0).to_vec();
    let shared = crate::substrate::Matrix::from_fn(8, 8, |_, c| row0[c]);
    *m.params_mut().value_mut(dec_pos) = shared;
    for l in 0..2 {
        for name in [format!("dec.{l}.self.wv"), format!("dec.{l}.cross.wv")] {
            let id = m.params().id(&name).unwrap();
            m.params_mut().value_mut(id).fill(0.0);
        }
    }
    let enc = m.encode(X).unwrap();
    let lp = m.decode_nar(5, &enc).unwrap();
    for i in 1..5 {
        for (a, b) in lp.row(i).iter().zip(lp.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn length_distribution_normalises_and_zero_head_is_uniform() {
    let mut m = tiny(false, 10, 8, 1, 12);
    let enc = m.encode(X).unwrap();
    let dist = m.predict_length(&enc).unwrap();
    assert!((log_sum_exp(dist.log_probs())).abs() < 1e-9);
    for name in ["len.w", "len.b"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().value_mut(id).fill(0.0);
    }
    let dist = m.predict_length(&enc).unwrap();
    for &lp in dist.log_probs() {
        assert!((lp + (8f64).ln()).abs() < 1e-12);
    }
    assert_eq!(dist.argmax(), 1);
    assert_eq!(dist.log_prob(0), f64::NEG_INFINITY);
    assert_eq!(dist.log_prob(9), f64::NEG_INFINITY);
}

#[test]
fn nar_likelihood_decomposes() {
    let m = tiny(false, 10, 8, 1, 13);
    let y: &[TokenId] = &[5, 6, 7, 8, 9];
    let enc = m.encode(X).unwrap();
    let lp = m.decode_nar(5, &enc).unwrap();
    let unary: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, &t)| lp.get(i, t as usize))
        .collect();
    let len_term = m.predict_length(&enc).unwrap().log_prob(5);
    let total = m.nar_log_likelihood(X, y).unwrap();
    assert!((total - len_term - unary.iter().sum::<f64>()).abs() < 1e-9);

    // swapping two distinct tokens only changes their two unary terms
    let swapped: &[TokenId] = &[5, 8, 7, 6, 9];
    let delta = m.nar_log_likelihood(X, swapped).unwrap() - total;
    let want = lp.get(1, 8) + lp.get(3, 6) - lp.get(1, 6) - lp.get(3, 8);
    assert!((delta - want).abs() < 1e-9);

    assert_eq!(m.nar_log_likelihood(X, &[5; 9]).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn wrong_architecture_is_a_config_error() {
    let ar = tiny(true, 10, 8, 1, 14);
    let nar = tiny(false, 10, 8, 1, 14);
    let enc = ar.encode(X).unwrap();
    assert!(matches!(
        ar.decode_nar(3, &enc),
        Err(crate::Error::Config(_))
    ));
    assert!(matches!(
        nar.decode_ar_step(&[BOS], &enc),
        Err(crate::Error::Config(_))
    ));
    assert!(ar.predict_length(&enc).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = tiny(false, 10, 8, 2, 15);
    m.save(&path).unwrap();
    let back = Transformer::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn training_graph_dropout_is_seeded() {
    use rand::SeedableRng;
    let mut cfg = tiny(true, 10, 8, 1, 16).config().clone();
    cfg.dropout = 0.3;
    let m = Transformer::new(cfg, 16).unwrap();
    let run = |seed| {
        let mut g = Graph::training(rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let y: &[TokenId] = &[5, 6];
        let l = m.ar_loss(&mut g, &[(X, y)], 0.1).unwrap();
        g.scalar(l)
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

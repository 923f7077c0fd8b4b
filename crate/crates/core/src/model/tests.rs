use super::*;
use crate::gradcheck::random_tensor;

/// Counting oracle written out from the layer formulas.
fn count_oracle(t: usize, c: usize) -> usize {
    let gru = 3 * (64 + 64 * 64 + 2 * 64);
    let ln = 2 * 128;
    let mha = 3 * (128 * 8 * 64 + 8 * 64) + 8 * 64 * 128 + 128;
    let lstm = 4 * (32 + 32 * 32 + 32);
    let concat = 128 * t + 32;
    let head = (concat * 64 + 64) + (64 * 32 + 32) + (32 * c + c);
    2 * gru + ln + mha + lstm + head
}

#[test]
fn canonical_parameter_total() {
    let spec = bigat_spec(83, 6);
    assert_eq!(param_total(&spec).unwrap(), 978_470);
    assert_eq!(count_oracle(83, 6), 978_470);
}

#[test]
fn iiot_parameter_total() {
    let spec = bigat_spec(60, 6);
    assert_eq!(param_total(&spec).unwrap(), count_oracle(60, 6));
    assert_eq!(param_total(&spec).unwrap(), 790_054);
}

#[test]
fn branch_only_variant_total() {
    let (_, v1) = table5_variants(83, 6).into_iter().next().unwrap();
    let expected = 978_470 - 4_352 - 32 * 64;
    assert_eq!(param_total(&v1).unwrap(), expected);
}

#[test]
fn dropout_rate_does_not_change_size() {
    let a = param_total(&bigat_spec(83, 6)).unwrap();
    let b = param_total(&bigat_spec(83, 6).with_dropout(0.3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn variant_four_is_canonical() {
    let v = variant_by_id(CANONICAL_VARIANT, 83, 6, &Hyper::default()).unwrap();
    assert_eq!(v, bigat_spec(83, 6));
    assert!(variant_by_id(13, 83, 6, &Hyper::default()).is_err());
}

#[test]
fn analytic_count_matches_allocation_for_all_variants() {
    let mut rng = RngStream::new(3);
    for (id, spec) in table5_variants(20, 6) {
        let built = build(&spec, &mut rng).unwrap();
        assert_eq!(built.total(), param_total(&spec).unwrap(), "variant #{id}");
    }
}

#[test]
fn parameter_names_are_unique() {
    let params = build(&bigat_spec(10, 3), &mut RngStream::new(1)).unwrap();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let set: std::collections::HashSet<&String> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    assert_eq!(names[0], "branch0.0.bigru.fwd.w_in");
    assert_eq!(names.last().unwrap(), "head.2.dense.b");
}

#[test]
fn shape_trace_matches_summary_layout() {
    let spec = bigat_spec(83, 6);
    let params = build(&spec, &mut RngStream::new(5)).unwrap();
    let x = random_tensor(&[4, 83, 1], 1.0, &mut RngStream::new(6));
    let trace = shape_trace(&params, &spec, &x).unwrap();
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    let expected = vec![
        ("Input", vec![4, 83, 1]),
        ("BiGRU", vec![4, 83, 128]),
        ("LayerNorm", vec![4, 83, 128]),
        ("MHA", vec![4, 83, 128]),
        ("Dropout", vec![4, 83, 128]),
        ("Flatten", vec![4, 10624]),
        ("LSTM", vec![4, 32]),
        ("Dropout", vec![4, 32]),
        ("Concatenate", vec![4, 10656]),
        ("Dense", vec![4, 64]),
        ("Dense", vec![4, 32]),
        ("Dense", vec![4, 6]),
    ];
    assert_eq!(got, expected);
}

#[test]
fn summary_table_rows() {
    let text = format_summary(&bigat_spec(83, 6)).unwrap();
    assert!(text.contains("Total parameters: 978,470"));
    assert!(text.contains("(None, 10656)"));
    let rows = summary(&bigat_spec(83, 6)).unwrap();
    let concat = rows.iter().find(|r| r.layer == "Concatenate").unwrap();
    assert_eq!(concat.connected_to, "Flatten, Dropout_2");
    let lstm = rows.iter().find(|r| r.layer == "LSTM").unwrap();
    assert_eq!(lstm.connected_to, "Input_Layer[0][0]");
    assert_eq!(lstm.params, 4_352);
    assert_eq!(rows.iter().map(|r| r.params).sum::<usize>(), 978_470);
}

#[test]
fn thousands_grouping() {
    assert_eq!(group_thousands(0), "0");
    assert_eq!(group_thousands(999), "999");
    assert_eq!(group_thousands(1000), "1,000");
    assert_eq!(group_thousands(978_470), "978,470");
}

#[test]
fn predictions_are_distributions_and_batch_independent() {
    let spec = bigat_spec_with(12, 4, &Hyper::tiny());
    let params = build(&spec, &mut RngStream::new(9)).unwrap();
    let x = random_tensor(&[8, 12, 1], 1.0, &mut RngStream::new(10));
    let (p, cache) = predict(&params, &spec, &x, Mode::Eval, None).unwrap();
    assert!(cache.is_none());
    for r in p.data().chunks(4) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for i in 0..8 {
        let xi = Tensor::new(vec![1, 12, 1], x.data()[i * 12..(i + 1) * 12].to_vec()).unwrap();
        let (pi, _) = predict(&params, &spec, &xi, Mode::Eval, None).unwrap();
        for j in 0..4 {
            assert!((pi.data()[j] - p.data()[i * 4 + j]).abs() < 1e-12);
        }
    }
    let (again, _) = predict(&params, &spec, &x, Mode::Eval, None).unwrap();
    assert_eq!(again, p);
}

#[test]
fn wrong_sequence_length_is_a_shape_error() {
    let spec = bigat_spec_with(12, 4, &Hyper::tiny());
    let params = build(&spec, &mut RngStream::new(9)).unwrap();
    let x = Tensor::zeros(&[2, 11, 1]);
    assert!(matches!(predict(&params, &spec, &x, Mode::Eval, None), Err(Error::Shape(_))));
}

#[test]
fn build_is_deterministic() {
    let spec = bigat_spec(20, 6);
    let a = build(&spec, &mut RngStream::new(4)).unwrap();
    let b = build(&spec, &mut RngStream::new(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_block_is_named() {
    let mut spec = bigat_spec(20, 6);
    spec.branches[0][2] = BlockSpec::Mha { heads: 0, key_dim: 64 };
    match build(&spec, &mut RngStream::new(1)) {
        Err(Error::Construction { block, .. }) => assert!(block.contains("MHA")),
        other => panic!("unexpected {other:?}"),
    }
    let mut spec = bigat_spec(20, 6);
    spec.branches[1] = vec![BlockSpec::LstmLast { units: 4 }, BlockSpec::Mha { heads: 1, key_dim: 2 }];
    assert!(matches!(param_total(&spec), Err(Error::Construction { .. })));
}

#[test]
fn train_mode_returns_cache_and_backward_aligns() {
    let spec = bigat_spec_with(6, 3, &Hyper::tiny());
    let params = build(&spec, &mut RngStream::new(2)).unwrap();
    let x = random_tensor(&[3, 6, 1], 1.0, &mut RngStream::new(3));
    let mut rng = RngStream::new(4);
    let (p, cache) = predict(&params, &spec, &x, Mode::Train, Some(&mut rng)).unwrap();
    let grads = backward(&params, &spec, cache.as_ref().unwrap(), &Tensor::ones(p.shape())).unwrap();
    let named = params.named();
    assert_eq!(grads.len(), named.len());
    for (g, (_, t)) in grads.iter().zip(named) {
        assert_eq!(g.shape(), t.shape());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let spec = bigat_spec_with(8, 3, &Hyper::tiny());
    let mut params = build(&spec, &mut RngStream::new(2)).unwrap();
    params.round_to_f32();
    let meta = CheckpointMeta::new(spec.clone());
    let bytes = encode(&params, &meta).unwrap();
    let (loaded, meta2) = decode(&bytes).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(meta2, meta);
    let x = random_tensor(&[5, 8, 1], 1.0, &mut RngStream::new(3));
    let a = predict(&params, &spec, &x, Mode::Eval, None).unwrap().0;
    let b = predict(&loaded, &spec, &x, Mode::Eval, None).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let spec = bigat_spec_with(8, 3, &Hyper::tiny());
    let params = build(&spec, &mut RngStream::new(2)).unwrap();
    let bytes = encode(&params, &CheckpointMeta::new(spec)).unwrap();

    assert!(matches!(decode(&[]), Err(Error::CheckpointFormat(_))));
    assert!(matches!(decode(b"NOPE1234"), Err(Error::CheckpointFormat(_))));

    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(decode(&v), Err(Error::CheckpointVersion { found: 9, .. })));

    let mut v = bytes.clone();
    let last = v.len() - 1;
    v[last] ^= 0x40;
    assert!(matches!(decode(&v), Err(Error::CheckpointChecksum(_))));

    let v = &bytes[..bytes.len() - 3];
    assert!(matches!(decode(v), Err(Error::CheckpointTruncated(_))));
}

#[test]
fn residual_flag_changes_output_and_keeps_size() {
    let mut spec = bigat_spec_with(6, 3, &Hyper::tiny());
    let params = build(&spec, &mut RngStream::new(2)).unwrap();
    let x = random_tensor(&[2, 6, 1], 1.0, &mut RngStream::new(3));
    let a = predict(&params, &spec, &x, Mode::Eval, None).unwrap().0;
    spec.mha_residual = true;
    let b = predict(&params, &spec, &x, Mode::Eval, None).unwrap().0;
    assert!(a.max_abs_diff(&b) > 0.0);
    assert_eq!(param_total(&spec).unwrap(), params.total());
}

mod common;

use common::{max_abs_diff, random_vec, rng};
use rand::Rng;
use spectral_forecaster::layers::ForwardCtx;
use spectral_forecaster::model::{
    count_parameters, load_checkpoint, patch_count, patchify, revin_denormalize, revin_normalize,
    save_checkpoint, FilterFormer, FilterPlacement, Forecaster, LinearForecaster, ModelConfig,
    PatchBackbone, RevIn,
};
use spectral_forecaster::numeric::{ParamStore, Tape, Tensor};
use spectral_forecaster::spectral::{FilterAxis, SpectralBlockConfig};

fn series(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng(seed);
    let data = (0..n)
        .map(|i| 3.0 * (i as f64 * 0.37).sin() + r.random_range(-1.0..1.0) + 5.0)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn revin_round_trip_is_exact() {
    for seed in 0..20 {
        let x = series(&[4, 3, 96], seed);
        let (z, state) = revin_normalize(&x).unwrap();
        let back = revin_denormalize(&z, &state).unwrap();
        assert!(max_abs_diff(back.data(), x.data()) < 1e-10);
    }
}

#[test]
fn revin_normalized_rows_have_zero_mean_unit_std() {
    let x = series(&[2, 3, 50], 3);
    let (z, _) = revin_normalize(&x).unwrap();
    for row in z.data().chunks(50) {
        let m = row.iter().sum::<f64>() / 50.0;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-10);
    }
}

#[test]
fn revin_constant_channel_is_finite() {
    let x = Tensor::full(&[1, 2, 10], 4.2);
    let (z, state) = revin_normalize(&x).unwrap();
    assert!(z.is_finite());
    let back = revin_denormalize(&z, &state).unwrap();
    assert!(max_abs_diff(back.data(), x.data()) < 1e-12);
}

#[test]
fn revin_rejects_single_step() {
    assert!(revin_normalize(&Tensor::zeros(&[1, 1, 1])).is_err());
}

#[test]
fn in_graph_revin_with_affine_round_trips() {
    let mut store = ParamStore::new();
    let revin = RevIn::new(&mut store, 3, true);
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let v: Vec<f64> = random_vec(&mut rng(id.index() as u64), n)
            .iter()
            .map(|d| 1.0 + 0.5 * d)
            .collect();
        store.set_value(id, &v).unwrap();
    }
    let x = series(&[2, 3, 20], 9);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (z, state) = revin.normalize(&store, &mut tape, xv).unwrap();
    let back = revin.denormalize(&store, &mut tape, z, &state).unwrap();
    // the inverse divides by gamma + eps^2, a relative offset of about 1e-10
    assert!(max_abs_diff(tape.data(back), x.data()) < 1e-8);
}

#[test]
fn backbone_equals_filter_free_model_bitwise() {
    for seed in [0, 1, 42] {
        let cfg = ModelConfig {
            alpha: 0,
            total_layers: 3,
            d_model: 16,
            dropout: 0.0,
            channels: 2,
            ..ModelConfig::default()
        };
        let a = FilterFormer::new(cfg.clone(), seed).unwrap();
        let b = PatchBackbone::new(cfg, seed).unwrap();
        let x = series(&[3, 2, 96], seed);
        let ya = a.predict(&x).unwrap();
        let yb = b.predict(&x).unwrap();
        assert_eq!(ya.data(), yb.data());

        let mut ta = Tape::new();
        let mut tb = Tape::new();
        let (xa, xb) = (ta.constant(x.clone()), tb.constant(x.clone()));
        let oa = a
            .forward(&mut ta, xa, &mut ForwardCtx::train(rng(1)))
            .unwrap();
        let ob = b
            .forward(&mut tb, xb, &mut ForwardCtx::train(rng(1)))
            .unwrap();
        assert_eq!(ta.data(oa), tb.data(ob));
    }
}

#[test]
fn spectral_and_attention_stacks_share_initialization_across_alpha() {
    let base = ModelConfig {
        d_model: 16,
        total_layers: 3,
        ..ModelConfig::default()
    };
    let a = FilterFormer::new(
        ModelConfig {
            alpha: 1,
            ..base.clone()
        },
        5,
    )
    .unwrap();
    let b = FilterFormer::new(ModelConfig { alpha: 2, ..base }, 5).unwrap();
    for name in [
        "embed.proj.weight",
        "head.weight",
        "attn.0.wq.weight",
        "spectral.0.filter",
    ] {
        let ia = a.params().id(name).unwrap();
        let ib = b.params().id(name).unwrap();
        assert_eq!(
            a.params().get(ia).data(),
            b.params().get(ib).data(),
            "{name}"
        );
    }
}

#[test]
fn patch_count_formula_on_random_settings() {
    let mut r = rng(31);
    for _ in 0..50 {
        let l = r.random_range(1..400usize);
        let p = r.random_range(1..=l);
        let s = r.random_range(1..=p.max(2));
        let n = patch_count(l, p, s).unwrap();
        assert_eq!(n, (l - p) / s + 1);
        let x: Vec<f64> = (0..l).map(|i| i as f64).collect();
        let patches = patchify(&x, p, s).unwrap();
        assert_eq!(patches.len(), n);
        let last = patches.last().unwrap();
        assert!((*last.last().unwrap() as usize) < l);
        assert!(last[0] as usize + p + s > l, "a further patch would fit");
    }
}

#[test]
fn patch_count_examples() {
    assert_eq!(patch_count(96, 16, 16).unwrap(), 6);
    assert_eq!(patch_count(96, 16, 8).unwrap(), 11);
    assert_eq!(patch_count(16, 16, 8).unwrap(), 1);
    assert!(patch_count(8, 16, 8).is_err());
    assert!(patch_count(8, 4, 0).is_err());
}

fn random_config(r: &mut impl Rng) -> ModelConfig {
    let heads = r.random_range(1..4usize);
    let d_model = heads * r.random_range(2..6usize);
    let lookback = r.random_range(8..40usize);
    let patch_len = r.random_range(2..=lookback.min(8));
    let total_layers = r.random_range(1..4usize);
    ModelConfig {
        lookback,
        horizon: r.random_range(1..12),
        patch_len,
        stride: Some(r.random_range(1..=patch_len)),
        d_model,
        n_heads: heads,
        d_k: if r.random_bool(0.3) {
            Some(r.random_range(1..5))
        } else {
            None
        },
        d_ff: Some(r.random_range(1..20)),
        total_layers,
        alpha: r.random_range(0..=total_layers),
        spectral: SpectralBlockConfig {
            use_mlp: r.random_bool(0.5),
            mlp_hidden: if r.random_bool(0.5) {
                Some(r.random_range(1..9))
            } else {
                None
            },
            axis: if r.random_bool(0.3) {
                FilterAxis::Patch
            } else {
                FilterAxis::Embedding
            },
            ..Default::default()
        },
        filter_placement: if r.random_bool(0.3) {
            FilterPlacement::PreEmbedding
        } else {
            FilterPlacement::PostEmbedding
        },
        channels: r.random_range(1..4),
        revin_affine: r.random_bool(0.5),
        positional_embedding: r.random_bool(0.7),
        ..ModelConfig::default()
    }
}

#[test]
fn analytic_parameter_count_matches_enumeration() {
    let mut r = rng(41);
    for _ in 0..10 {
        let cfg = random_config(&mut r);
        let model = FilterFormer::new(cfg.clone(), 0).unwrap();
        let count = count_parameters(&cfg).unwrap();
        assert_eq!(count.total, model.params().trainable_count(), "{cfg:?}");
        let sum: usize = count.components.iter().map(|(_, n)| n).sum();
        assert_eq!(sum, count.total);
    }
}

#[test]
fn filter_adds_exactly_d_model_parameters_per_block() {
    for d_model in [8, 16, 128] {
        for alpha in 1..=3 {
            let cfg = ModelConfig {
                d_model,
                alpha,
                total_layers: 4,
                ..ModelConfig::default()
            };
            let model = FilterFormer::new(cfg.clone(), 0).unwrap();
            for block in model.spectral_blocks() {
                assert_eq!(model.params().get(block.filter).numel(), d_model);
            }
            let count = count_parameters(&cfg).unwrap();
            let filters = count
                .components
                .iter()
                .find(|(n, _)| n == "spectral.filters")
                .unwrap()
                .1;
            assert_eq!(filters, alpha * d_model);
        }
    }
}

#[test]
fn channels_are_processed_independently() {
    let cfg = ModelConfig {
        d_model: 16,
        dropout: 0.0,
        channels: 4,
        ..ModelConfig::default()
    };
    let model = FilterFormer::new(cfg, 3).unwrap();
    let x = series(&[2, 4, 96], 5);
    let y = model.predict(&x).unwrap();
    // permute channels [0,1,2,3] -> [2,0,3,1]
    let perm = [2, 0, 3, 1];
    let mut xp = Vec::new();
    for b in 0..2 {
        for &c in &perm {
            let start = (b * 4 + c) * 96;
            xp.extend_from_slice(&x.data()[start..start + 96]);
        }
    }
    let yp = model
        .predict(&Tensor::new(vec![2, 4, 96], xp).unwrap())
        .unwrap();
    for b in 0..2 {
        for (i, &c) in perm.iter().enumerate() {
            let got = &yp.data()[(b * 4 + i) * 96..(b * 4 + i + 1) * 96];
            let want = &y.data()[(b * 4 + c) * 96..(b * 4 + c + 1) * 96];
            assert!(max_abs_diff(got, want) < 1e-12);
        }
    }
}

#[test]
fn forecast_follows_affine_changes_of_input() {
    let cfg = ModelConfig {
        d_model: 16,
        ..ModelConfig::default()
    };
    let model = FilterFormer::new(cfg, 4).unwrap();
    let x = series(&[1, 1, 96], 6);
    let y = model.predict(&x).unwrap();
    let (a, b) = (3.5, -20.0);
    let xs = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| a * v + b).collect(),
    )
    .unwrap();
    let ys = model.predict(&xs).unwrap();
    let expect: Vec<f64> = y.data().iter().map(|v| a * v + b).collect();
    assert!(max_abs_diff(ys.data(), &expect) < 1e-9);
}

#[test]
fn same_seed_same_model_different_seed_different_model() {
    let cfg = ModelConfig::tiny();
    let x = series(&[1, 1, 16], 8);
    let a = FilterFormer::new(cfg.clone(), 7)
        .unwrap()
        .predict(&x)
        .unwrap();
    let b = FilterFormer::new(cfg.clone(), 7)
        .unwrap()
        .predict(&x)
        .unwrap();
    let c = FilterFormer::new(cfg, 8).unwrap().predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn untrained_filters_start_near_identity() {
    let model = FilterFormer::new(ModelConfig::default(), 0).unwrap();
    let block = &model.spectral_blocks()[0];
    let w = model.params().get(block.filter).data();
    assert!((w[0] - 1.0).abs() < 0.1);
    assert!(w[1..].iter().all(|v| v.abs() < 0.1));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = FilterFormer::new(ModelConfig::tiny(), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(&[1, 1, 15])).is_err());
    assert!(model.predict(&Tensor::zeros(&[16])).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = ModelConfig {
        revin_affine: true,
        channels: 2,
        spectral: SpectralBlockConfig {
            use_mlp: true,
            ..Default::default()
        },
        ..ModelConfig::tiny()
    };
    let mut model = FilterFormer::new(cfg, 12).unwrap();
    for id in model.params().ids().collect::<Vec<_>>() {
        let n = model.params().get(id).numel();
        let v = random_vec(&mut rng(id.index() as u64), n);
        model.params_mut().set_value(id, &v).unwrap();
    }
    save_checkpoint(&path, &model).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    for (a, b) in model
        .params()
        .entries()
        .iter()
        .zip(loaded.params().entries())
    {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint(&path).is_err());
    let model = FilterFormer::new(ModelConfig::tiny(), 0).unwrap();
    save_checkpoint(&path, &model).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn linear_forecaster_shapes() {
    let m = LinearForecaster::new(12, 5, 0);
    let y = m.predict(&Tensor::zeros(&[3, 2, 12])).unwrap();
    assert_eq!(y.shape(), &[3, 2, 5]);
}

mod common;

use common::{random_vec, rng, store_gradcheck, ABS_FLOOR, REL_TOL};
use spectral_forecaster::layers::{Activation, BatchNorm, ForwardCtx, InstanceNorm, Linear, Mlp};
use spectral_forecaster::model::{
    AttentionBlock, FilterFormer, FilterPlacement, ForecastHead, Forecaster, ModelConfig,
    PatchEmbedding, RevIn,
};
use spectral_forecaster::numeric::{
    check_gradients, GradCheckConfig, ParamStore, Tape, Tensor, Var,
};
use spectral_forecaster::spectral::{FilterAxis, SpectralBlock, SpectralBlockConfig};
use spectral_forecaster::Result;

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-4,
        rel_tol: REL_TOL,
        abs_floor: ABS_FLOOR,
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(&mut rng(seed), n)).unwrap()
}

/// Random weighted sum, so that no output element is ignored or cancelled.
fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = rand_tensor(tape.shape(v), 99);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn assert_op<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, cfg(), |t, v| {
        let out = f(t, v)?;
        reduce(t, out)
    })
    .unwrap();
    assert!(
        report.passed(),
        "{name}: max error {} at {:?}",
        report.max_error,
        report.worst
    );
}

#[test]
fn elementwise_ops() {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[3, 4], 2);
    assert_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_op("scale", std::slice::from_ref(&a), |t, v| {
        Ok(t.scale(v[0], -1.7))
    });
    assert_op("gelu", std::slice::from_ref(&a), |t, v| Ok(t.gelu(v[0])));
    let away_from_kink = Tensor::new(vec![6], vec![-0.9, -0.5, -0.1, 0.2, 0.6, 1.1]).unwrap();
    assert_op("relu", &[away_from_kink], |t, v| Ok(t.relu(v[0])));
    let positive = Tensor::new(vec![4], vec![0.5, 1.2, 2.0, 3.3]).unwrap();
    assert_op("reciprocal", &[positive], |t, v| {
        Ok(t.reciprocal(v[0], 1e-3))
    });
}

#[test]
fn broadcast_ops() {
    let a = rand_tensor(&[2, 3, 4], 3);
    let row = rand_tensor(&[4], 4);
    let col = rand_tensor(&[3, 1], 5);
    assert_op("add_broadcast row", &[a.clone(), row.clone()], |t, v| {
        t.add_broadcast(v[0], v[1])
    });
    assert_op("mul_broadcast row", &[a.clone(), row], |t, v| {
        t.mul_broadcast(v[0], v[1])
    });
    assert_op("add_broadcast col", &[a.clone(), col.clone()], |t, v| {
        t.add_broadcast(v[0], v[1])
    });
    assert_op("mul_broadcast col", &[a, col], |t, v| {
        t.mul_broadcast(v[0], v[1])
    });
}

#[test]
fn matrix_ops() {
    let a = rand_tensor(&[2, 3, 4], 6);
    let w = rand_tensor(&[4, 5], 7);
    assert_op("matmul", &[a.clone(), w], |t, v| t.matmul(v[0], v[1]));
    let b = rand_tensor(&[2, 4, 3], 8);
    assert_op("batch_matmul", &[a.clone(), b], |t, v| {
        t.batch_matmul(v[0], v[1], false)
    });
    let c = rand_tensor(&[2, 5, 4], 9);
    assert_op("batch_matmul^T", &[a, c], |t, v| {
        t.batch_matmul(v[0], v[1], true)
    });
}

#[test]
fn shape_ops() {
    let a = rand_tensor(&[2, 3, 4], 10);
    assert_op("permute", std::slice::from_ref(&a), |t, v| {
        t.permute(v[0], &[2, 0, 1])
    });
    assert_op("transpose", std::slice::from_ref(&a), |t, v| {
        t.transpose(v[0])
    });
    assert_op("reshape", std::slice::from_ref(&a), |t, v| {
        t.reshape(v[0], &[6, 4])
    });
    assert_op("flatten", std::slice::from_ref(&a), |t, v| {
        t.flatten(v[0], 1)
    });
    let series = rand_tensor(&[2, 11], 11);
    assert_op(
        "unfold overlapping",
        std::slice::from_ref(&series),
        |t, v| t.unfold(v[0], 4, 2),
    );
    assert_op("unfold disjoint", &[series], |t, v| t.unfold(v[0], 3, 3));
}

#[test]
fn reductions_and_normalizers() {
    let a = rand_tensor(&[3, 5], 12);
    assert_op("softmax", std::slice::from_ref(&a), |t, v| {
        Ok(t.softmax(v[0]))
    });
    assert_op("sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])));
    assert_op("mean", std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])));
    assert_op("mean_last", std::slice::from_ref(&a), |t, v| {
        Ok(t.mean_last(v[0]))
    });
    assert_op("var_last", std::slice::from_ref(&a), |t, v| {
        Ok(t.var_last(v[0]))
    });
    assert_op("normalize_rows", std::slice::from_ref(&a), |t, v| {
        Ok(t.normalize_rows(v[0], 1e-5))
    });
    let b = rand_tensor(&[2, 4, 3], 13);
    assert_op("normalize_cols", &[b], |t, v| {
        Ok(t.normalize_cols(v[0], 1e-5)?.0)
    });
    let target = rand_tensor(&[3, 5], 14);
    assert_op("mse_loss", &[a, target], |t, v| t.mse_loss(v[0], v[1]));
}

#[test]
fn circular_filter_gradients() {
    for n in [1, 2, 5, 8, 9, 16] {
        let x = rand_tensor(&[3, n], 20 + n as u64);
        let w = rand_tensor(&[n], 40 + n as u64);
        assert_op(&format!("circular_filter n={n}"), &[x, w], |t, v| {
            t.circular_filter(v[0], v[1])
        });
    }
}

#[test]
fn dropout_mask_gradient() {
    let a = rand_tensor(&[4, 6], 15);
    assert_op("dropout", &[a], |t, v| t.dropout(v[0], 0.3, &mut rng(5)));
}

fn input_var(tape: &mut Tape, shape: &[usize]) -> Var {
    tape.constant(rand_tensor(shape, 77))
}

fn assert_store<F>(name: &str, store: &ParamStore, f: F)
where
    F: Fn(&ParamStore, &mut Tape, &mut ForwardCtx) -> Result<Var>,
{
    let report = store_gradcheck(store, f);
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_error < REL_TOL,
        "{name}: max error {} ({})",
        report.max_error,
        report.worst
    );
}

#[test]
fn linear_and_mlp() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, 1, "lin", 4, 3, true);
    assert_store("linear", &store, |s, t, _| {
        let x = input_var(t, &[2, 5, 4]);
        lin.forward(s, t, x)
    });
    for act in [Activation::Gelu, Activation::Relu] {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, 2, "mlp", 4, 6, act);
        assert_store("mlp", &store, |s, t, c| {
            let x = input_var(t, &[3, 4]);
            mlp.forward(s, t, x, 0.0, c)
        });
    }
}

fn perturb_affine(store: &mut ParamStore) {
    // identity affine parameters would hide swapped scale/shift gradients
    let ids: Vec<_> = store.trainable_ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let noise = random_vec(&mut rng(300 + k as u64), n);
        for (v, d) in store.get_mut(id).data_mut().iter_mut().zip(noise) {
            *v += 0.3 * d;
        }
    }
}

#[test]
fn norms() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 4);
    perturb_affine(&mut store);
    assert_store("batch norm", &store, |s, t, c| {
        let x = input_var(t, &[3, 5, 4]);
        bn.forward(s, t, x, c)
    });
    let mut store = ParamStore::new();
    let inorm = InstanceNorm::new(&mut store, "in", 6);
    perturb_affine(&mut store);
    assert_store("instance norm", &store, |s, t, _| {
        let x = input_var(t, &[3, 2, 6]);
        inorm.forward(s, t, x)
    });
}

#[test]
fn embedding_and_head() {
    let mut store = ParamStore::new();
    let emb = PatchEmbedding::new(&mut store, 3, 16, 4, 2, 6, true).unwrap();
    assert_store("patch embedding", &store, |s, t, c| {
        let x = input_var(t, &[3, 16]);
        emb.forward(s, t, x, 0.0, c)
    });
    let mut store = ParamStore::new();
    let head = ForecastHead::new(&mut store, 4, 3, 5, 7);
    assert_store("head", &store, |s, t, _| {
        let z = input_var(t, &[2, 3, 5]);
        head.forward(s, t, z)
    });
}

#[test]
fn spectral_blocks() {
    for (axis, use_mlp) in [
        (FilterAxis::Embedding, false),
        (FilterAxis::Embedding, true),
        (FilterAxis::Patch, true),
    ] {
        let cfg = SpectralBlockConfig {
            use_mlp,
            axis,
            ..SpectralBlockConfig::default()
        };
        let mut store = ParamStore::new();
        let block = SpectralBlock::new(&mut store, 5, "sb", &cfg, 5, 6).unwrap();
        perturb_affine(&mut store);
        assert_store(
            &format!("spectral block {axis:?} mlp={use_mlp}"),
            &store,
            |s, t, c| {
                let y = input_var(t, &[3, 5, 6]);
                block.forward(s, t, y, 0.0, c)
            },
        );
    }
}

#[test]
fn attention_block() {
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, 6, "attn", 6, 2, 3, 8, Activation::Gelu);
    perturb_affine(&mut store);
    assert_store("attention", &store, |s, t, c| {
        let y = input_var(t, &[3, 4, 6]);
        block.forward(s, t, y, 0.0, c)
    });
}

#[test]
fn revin_affine() {
    let mut store = ParamStore::new();
    let revin = RevIn::new(&mut store, 3, true);
    perturb_affine(&mut store);
    assert_store("revin", &store, |s, t, _| {
        let x = input_var(t, &[2, 3, 8]);
        let (y, state) = revin.normalize(s, t, x)?;
        let y = t.gelu(y);
        revin.denormalize(s, t, y, &state)
    });
}

fn model_check(cfg: ModelConfig, label: &str) {
    let mut model = FilterFormer::new(cfg.clone(), 8).unwrap();
    perturb_affine(model.params_mut());
    let model = &model;
    assert_store(label, model.params(), |s, t, c| {
        // the store under test replaces the model's own parameters
        let mut m = model.clone();
        *m.params_mut() = s.clone();
        let x = input_var(t, &[2, cfg.channels, cfg.lookback]);
        m.forward(t, x, c)
    });
}

#[test]
fn tiny_model_end_to_end() {
    model_check(ModelConfig::tiny(), "tiny");
}

#[test]
fn tiny_model_variants() {
    model_check(
        ModelConfig {
            revin_affine: true,
            channels: 2,
            spectral: SpectralBlockConfig {
                use_mlp: true,
                ..Default::default()
            },
            ..ModelConfig::tiny()
        },
        "tiny with mlp and affine revin",
    );
    model_check(
        ModelConfig {
            filter_placement: FilterPlacement::PreEmbedding,
            ..ModelConfig::tiny()
        },
        "tiny pre-embedding",
    );
    model_check(
        ModelConfig {
            stride: Some(2),
            ..ModelConfig::tiny()
        },
        "tiny overlapping patches",
    );
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // x * stop_grad(x) has true derivative 2x but the tape only sees x
    let a = rand_tensor(&[5], 16);
    let report = check_gradients(&[a], cfg(), |t, v| {
        let frozen = t.constant(t.value(v[0]).clone());
        let p = t.mul(v[0], frozen)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(!report.passed());
}

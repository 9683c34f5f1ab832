use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvsr_core::gradcheck::{grad_check, grad_check_params};
use tvsr_core::model::{forward, TvsrnConfig, TvsrnParams, Variant};
use tvsr_core::swin::{merge_windows, partition_windows, stl_forward, window_attention, StlConfig, StlParams, WindowPlan};
use tvsr_core::{ParamStore, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output coordinate gets a
/// distinct upstream gradient.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(random(t.shape(y), seed ^ 0xabcdef));
    let m = t.mul(y, r)?;
    Ok(t.sum(m))
}

fn check(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    grad_check(|t, v| { let y = f(t, v)?; probe(t, y, 7) }, x, H).unwrap()
}

#[test]
fn elementwise_ops() {
    let x = random(&[3, 4], 1);
    let other = random(&[3, 4], 2);
    for (name, err) in [
        ("add", check(&x, |t, v| { let o = t.constant(other.clone()); t.add(v, o) })),
        ("sub", check(&x, |t, v| { let o = t.constant(other.clone()); t.sub(o, v) })),
        ("mul", check(&x, |t, v| t.mul(v, v))),
        ("scale", check(&x, |t, v| Ok(t.scale(v, -2.5)))),
        ("gelu", check(&x.map(|v| 3.0 * v), |t, v| Ok(t.gelu(v)))),
        ("softmax", check(&x.map(|v| 4.0 * v), |t, v| Ok(t.softmax(v)))),
        ("sum", check(&x, |t, v| Ok(t.sum(v)))),
        ("mean", check(&x, |t, v| Ok(t.mean(v)))),
    ] {
        assert!(err < OP_TOL, "{name}: {err}");
    }
}

#[test]
fn matmul_and_affine_ops() {
    let a = random(&[2, 3, 4], 3);
    let b_batched = random(&[2, 4, 5], 4);
    let b_shared = random(&[4, 5], 5);
    let w = random(&[4, 6], 6);
    let bias = random(&[6], 7);
    let errs = [
        ("matmul lhs", check(&a, |t, v| { let b = t.constant(b_batched.clone()); t.matmul(v, b) })),
        ("matmul rhs", check(&b_batched, |t, v| { let a = t.constant(a.clone()); t.matmul(a, v) })),
        ("matmul shared rhs", check(&b_shared, |t, v| { let a = t.constant(a.clone()); t.matmul(a, v) })),
        ("add_suffix", check(&bias, |t, v| { let x = t.constant(random(&[2, 3, 6], 8)); t.add_suffix(x, v) })),
        ("linear x", check(&a, |t, v| { let (w, b) = (t.constant(w.clone()), t.constant(bias.clone())); t.linear(v, w, Some(b)) })),
        ("linear w", check(&w, |t, v| { let (x, b) = (t.constant(a.clone()), t.constant(bias.clone())); t.linear(x, v, Some(b)) })),
    ];
    for (name, err) in errs {
        assert!(err < OP_TOL, "{name}: {err}");
    }
}

#[test]
fn layer_norm_all_inputs() {
    let x = random(&[3, 5], 9);
    let g = random(&[5], 10).map(|v| 1.0 + 0.5 * v);
    let b = random(&[5], 11);
    let ex = check(&x, |t, v| { let (g, b) = (t.constant(g.clone()), t.constant(b.clone())); t.layer_norm(v, g, b, 1e-5) });
    let eg = check(&g, |t, v| { let (x, b) = (t.constant(x.clone()), t.constant(b.clone())); t.layer_norm(x, v, b, 1e-5) });
    let eb = check(&b, |t, v| { let (x, g) = (t.constant(x.clone()), t.constant(g.clone())); t.layer_norm(x, g, v, 1e-5) });
    assert!(ex < OP_TOL && eg < OP_TOL && eb < OP_TOL, "{ex} {eg} {eb}");
}

#[test]
fn structural_ops() {
    let x = random(&[2, 3, 4], 12);
    let y = random(&[2, 2, 4], 13);
    let errs = [
        ("reshape", check(&x, |t, v| t.reshape(v, &[6, 4]))),
        ("permute", check(&x, |t, v| t.permute(v, &[2, 0, 1]))),
        ("slice", check(&x, |t, v| t.slice(v, 1, 1, 2))),
        ("pad", check(&x, |t, v| t.pad(v, &[0, 2, 1]))),
        ("concat", check(&x, |t, v| { let o = t.constant(y.clone()); t.concat(&[o, v], 1) })),
        ("gather", check(&x, |t, v| t.gather(v, Arc::from(vec![5u32, 0, 5, 2, u32::MAX]), 4, &[5, 4]))),
    ];
    for (name, err) in errs {
        assert!(err < OP_TOL, "{name}: {err}");
    }
}

#[test]
fn l1_loss_away_from_ties() {
    let target = random(&[2, 3, 4], 14);
    let pred = Tensor::from_fn(&[2, 3, 4], |i| target.data()[i] + if i % 2 == 0 { 0.3 } else { -0.2 });
    let err = grad_check(|t, v| { let y = t.constant(target.clone()); t.l1_loss(v, y) }, &pred, H).unwrap();
    assert!(err < OP_TOL, "{err}");
}

fn perturbed_store(store: &ParamStore<f64>, amount: f64, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store.clone();
    for id in s.ids().collect::<Vec<_>>() {
        s.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amount..amount));
    }
    s
}

#[test]
fn window_partition_and_attention() {
    let plan = WindowPlan::new((5, 6), (4, 4), (2, 2)).unwrap();
    let x = random(&[2, 5, 6, 3], 15);
    let err = check(&x, |t, v| { let w = partition_windows(t, v, &plan)?; merge_windows(t, w, &plan) });
    assert!(err < OP_TOL, "partition/merge {err}");

    let cfg = StlConfig { channels: 4, window: (2, 3), heads: 2, mlp_ratio: 2.0, shifted: true };
    let mut store = ParamStore::<f64>::new();
    let params = StlParams::init(&mut store, "l", &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let store = perturbed_store(&store, 0.3, 1);
    let tokens = random(&[3, 6, 4], 16);
    let mask = Tensor::from_fn(&[3, 6, 6], |i| if i % 7 == 3 { -1e9 } else { 0.0 });
    let all: Vec<_> = params.ids().iter().flat_map(|&id| (0..store.get(id).len()).map(move |o| (id, o))).collect();
    let probes = grad_check_params(
        &store,
        &all,
        |t| {
            let x = t.constant(tokens.clone());
            let y = window_attention(t, x, &params, &cfg, Some(&mask))?;
            probe(t, y, 3)
        },
        H,
    )
    .unwrap();
    let worst = probes.iter().map(|p| p.relative_error()).fold(0.0, f64::max);
    assert!(worst < OP_TOL, "masked window attention {worst}");

    let ids: Vec<_> = params.ids().iter().flat_map(|&id| (0..store.get(id).len().min(3)).map(move |o| (id, o))).collect();
    let probes = grad_check_params(
        &store,
        &ids,
        |t| {
            let x = t.constant(random(&[1, 5, 7, 4], 17));
            let y = stl_forward(t, x, &params, &cfg)?;
            probe(t, y, 4)
        },
        H,
    )
    .unwrap();
    let worst = probes.iter().map(|p| p.relative_error()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "stl parameter gradients {worst}");
}

/// Loss of the tiny full model against a target held away from the L1 kink.
fn tiny_model_loss(t: &mut Tape<'_, f64>, params: &TvsrnParams, x: &Tensor<f64>, target: &Tensor<f64>) -> Result<Var> {
    let xv = t.constant(x.clone());
    let y = forward(t, xv, params)?;
    let tv = t.constant(target.clone());
    t.l1_loss(y, tv)
}

fn tiny_setup(variant: Variant) -> (TvsrnParams, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = TvsrnConfig { channels: 4, n_enc: 2, m_fim: 1, scale: 2, depth: 2, variant, ..TvsrnConfig::default() };
    let (params, store) = TvsrnParams::init::<f64>(&cfg, 11).unwrap();
    let store = perturbed_store(&store, 0.05, 2);
    let x = random(&[1, 2, 8, 8], 18).map(|v| 0.5 + 0.5 * v);
    let pred = tvsr_core::model::predict(&store, &params, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let target = Tensor::from_fn(pred.shape(), |i| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        pred.data()[i] + sign * rng.random_range(0.05..0.3)
    });
    (params, store, x, target)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in [Variant::Full, Variant::NoTab, Variant::EncoderOnly] {
        let (params, store, x, target) = tiny_setup(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ids = params.ids();
        let coords: Vec<_> = (0..24)
            .map(|_| {
                let id = ids[rng.random_range(0..ids.len())];
                (id, rng.random_range(0..store.get(id).len()))
            })
            .collect();
        let probes = grad_check_params(&store, &coords, |t| tiny_model_loss(t, &params, &x, &target), 1e-4).unwrap();
        let worst = probes.iter().map(|p| p.relative_error()).fold(0.0, f64::max);
        assert!(worst < 1e-2, "{variant:?}: {worst}");
    }
}

#[test]
fn mask_token_receives_gradient() {
    let (params, store, x, target) = tiny_setup(Variant::Full);
    let tokens = params.mask_tokens.unwrap();
    let mut t = Tape::with_params(&store);
    let loss = tiny_model_loss(&mut t, &params, &x, &target).unwrap();
    let g = t.backward(loss).unwrap();
    assert!(g.param(tokens).unwrap().data().iter().any(|&v| v.abs() > 1e-8));
    let coords: Vec<_> = (0..4).map(|o| (tokens, o)).collect();
    let probes = grad_check_params(&store, &coords, |t| tiny_model_loss(t, &params, &x, &target), 1e-4).unwrap();
    assert!(probes.iter().all(|p| p.relative_error() < 1e-2 && p.numeric.abs() > 1e-8), "{probes:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_random_shapes(b in 1usize..3, m in 1usize..5, k in 1usize..6, n in 1usize..5, seed in any::<u64>()) {
        let a = random(&[b, m, k], seed);
        let rhs = random(&[b, k, n], seed ^ 1);
        let lhs_err = check(&a, |t, v| { let r = t.constant(rhs.clone()); t.matmul(v, r) });
        let rhs_err = check(&rhs, |t, v| { let l = t.constant(a.clone()); t.matmul(l, v) });
        prop_assert!(lhs_err < OP_TOL && rhs_err < OP_TOL, "{} {}", lhs_err, rhs_err);
    }

    #[test]
    fn softmax_layer_norm_gelu_random_shapes(r in 1usize..4, c in 2usize..7, seed in any::<u64>()) {
        let x = random(&[r, c], seed).map(|v| 3.0 * v);
        prop_assert!(check(&x, |t, v| Ok(t.softmax(v))) < OP_TOL);
        prop_assert!(check(&x, |t, v| Ok(t.gelu(v))) < OP_TOL);
        let g = random(&[c], seed ^ 2);
        let b = random(&[c], seed ^ 3);
        let ln_err = check(&x, |t, v| { let (g, b) = (t.constant(g.clone()), t.constant(b.clone())); t.layer_norm(v, g, b, 1e-5) });
        prop_assert!(ln_err < OP_TOL, "{}", ln_err);
    }

    #[test]
    fn structural_random_shapes(d0 in 1usize..4, d1 in 2usize..4, d2 in 1usize..4, seed in any::<u64>()) {
        let x = random(&[d0, d1, d2], seed);
        prop_assert!(check(&x, |t, v| t.permute(v, &[1, 2, 0])) < OP_TOL);
        prop_assert!(check(&x, |t, v| t.slice(v, 1, 1, d1 - 1)) < OP_TOL);
        prop_assert!(check(&x, |t, v| t.pad(v, &[1, 0, 2])) < OP_TOL);
        prop_assert!(check(&x, |t, v| t.concat(&[v, v], 2)) < OP_TOL);
    }
}

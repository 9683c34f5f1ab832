use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvsr_core::infer::{infer_volume, plan_slide};
use tvsr_core::model::{
    depth_shuffle, from_coronal, from_sagittal, predict, subpixel_depth, tab_forward, to_coronal, to_sagittal,
    TvsrnConfig, TvsrnParams, Variant,
};
use tvsr_core::swin::{merge_windows, partition_windows, stack_forward, WindowPlan};
use tvsr_core::tensor::inverse_permutation;
use tvsr_core::train::{Adam, TrainConfig};
use tvsr_core::volume::{Spacing, Unit, Volume};
use tvsr_core::{ParamStore, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny(variant: Variant, scale: usize, depth: usize) -> TvsrnConfig {
    TvsrnConfig { channels: 2, n_enc: 2, m_fim: 1, scale, depth, window_xy: 4, window_z: 2, variant, ..TvsrnConfig::default() }
}

fn tab_of(params: &TvsrnParams) -> &[(tvsr_core::swin::StlParams, tvsr_core::swin::StlConfig)] {
    params.fims[0].tab.as_deref().unwrap()
}

#[test]
fn zero_tab_is_exact_identity() {
    let cfg = TvsrnConfig { channels: 4, scale: 3, depth: 3, ..TvsrnConfig::default() };
    let (params, mut store) = TvsrnParams::init::<f32>(&cfg, 3).unwrap();
    for (p, _) in tab_of(&params) {
        for id in p.ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::with_params(&store);
    let z = tape.constant(random(&[4, 7, 9, 10], 1).cast());
    let out = tab_forward(&mut tape, z, tab_of(&params)).unwrap();
    assert_eq!(tape.value(out), tape.value(z));
}

#[test]
fn view_permutations_round_trip() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(random(&[3, 5, 6, 7], 2));
    let sag = to_sagittal(&mut tape, z).unwrap();
    assert_eq!(tape.shape(sag), &[7, 5, 6, 3]);
    let back = from_sagittal(&mut tape, sag).unwrap();
    assert_eq!(tape.value(back), tape.value(z));
    let cor = to_coronal(&mut tape, z).unwrap();
    assert_eq!(tape.shape(cor), &[6, 5, 7, 3]);
    let back = from_coronal(&mut tape, cor).unwrap();
    assert_eq!(tape.value(back), tape.value(z));
}

#[test]
fn tab_weights_are_stored_once_and_shared() {
    let cfg = TvsrnConfig { channels: 4, scale: 2, depth: 3, ..TvsrnConfig::default() };
    let (params, store) = TvsrnParams::init::<f32>(&cfg, 4).unwrap();
    let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
    assert!(names.iter().any(|n| n.starts_with("fims.0.tab.sagittal.3.")));
    assert!(!names.iter().any(|n| n.contains("coronal")));

    let z = random(&[4, 5, 8, 8], 5).cast::<f32>();
    let branches = |store: &ParamStore<f32>| {
        let mut tape = Tape::with_params(store);
        let zv = tape.constant(z.clone());
        let s = to_sagittal(&mut tape, zv).unwrap();
        let s = stack_forward(&mut tape, s, tab_of(&params)).unwrap();
        let c = to_coronal(&mut tape, zv).unwrap();
        let c = stack_forward(&mut tape, c, tab_of(&params)).unwrap();
        (tape.value(s).clone(), tape.value(c).clone())
    };
    let (s0, c0) = branches(&store);
    for j in 0..4 {
        let mut changed = store.clone();
        let w = tab_of(&params)[j].0.qkv_w;
        changed.get_mut(w).data_mut().iter_mut().for_each(|v| *v += 0.25);
        let (s1, c1) = branches(&changed);
        assert_ne!(s1, s0, "sagittal branch ignores shared layer {j}");
        assert_ne!(c1, c0, "coronal branch ignores shared layer {j}");
    }
}

#[test]
fn shared_tab_tensor_updated_once_per_step() {
    let cfg = TvsrnConfig { channels: 4, scale: 2, depth: 2, window_xy: 4, ..TvsrnConfig::default() };
    let (params, store) = TvsrnParams::init::<f32>(&cfg, 6).unwrap();
    let lr = 1e-3;
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(random(&[1, 2, 8, 8], 7).map(|v| 0.5 + 0.4 * v).cast());
    let y = tvsr_core::model::forward(&mut tape, x, &params).unwrap();
    let target = tape.constant(random(&[3, 8, 8], 8).map(|v| 0.5 + 0.4 * v).cast());
    let loss = tape.l1_loss(y, target).unwrap();
    let grads = tape.backward(loss).unwrap().into_param_grads(&store);
    let mut updated = store.clone();
    let mut adam = Adam::from_config(&store, &TrainConfig { lr, ..TrainConfig::default() });
    adam.step(&mut updated, &grads).unwrap();
    let mut full_steps = 0;
    for (p, _) in tab_of(&params) {
        for id in p.ids() {
            for (a, b) in store.get(id).data().iter().zip(updated.get(id).data()) {
                let delta = (b - a).abs() as f64;
                assert!(delta <= lr * 1.001, "{}: step {delta}", store.name(id));
                if delta > lr * 0.9 {
                    full_steps += 1;
                }
            }
        }
    }
    assert!(full_steps > 100, "{full_steps}");
}

#[test]
fn extra_fim_adds_one_module_of_parameters() {
    let one = TvsrnConfig { channels: 4, ..TvsrnConfig::default() };
    let two = TvsrnConfig { m_fim: 2, ..one.clone() };
    let (_, s1) = TvsrnParams::init::<f32>(&one, 0).unwrap();
    let (p2, s2) = TvsrnParams::init::<f32>(&two, 0).unwrap();
    let fim: usize = one.param_summary().iter().filter(|(n, _)| n.starts_with("fim0")).map(|(_, c)| c).sum();
    assert_eq!(s2.scalar_count() - s1.scalar_count(), fim);
    assert_eq!(p2.fims.len(), 2);
}

#[test]
fn single_window_inference_equals_predict() {
    let cfg = tiny(Variant::Full, 3, 4);
    let (params, store) = TvsrnParams::init::<f32>(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vox: Vec<f32> = (0..4 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
    let thick = Volume::new((4, 8, 8), Spacing::new(3.0, 0.7), Unit::Normalized, vox.clone()).unwrap();
    let thin = infer_volume(&thick, &store, &params, (8, 8)).unwrap();
    let direct = predict(&store, &params, &Tensor::from_vec(&[1, 4, 8, 8], vox).unwrap()).unwrap();
    let clamped: Vec<f32> = direct.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    assert_eq!(thin.voxels(), &clamped[..]);
    assert_eq!(thin.dims(), (10, 8, 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, mag in prop::sample::select(vec![1.0, 30.0, 1e3]), seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[rows, cols], seed).map(|v| v * mag));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_and_reshape_round_trip(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..dims.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&dims, seed));
        let p = tape.permute(x, &order).unwrap();
        let back = tape.permute(p, &inverse_permutation(&order)).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
        let n: usize = dims.iter().product();
        let flat = tape.reshape(x, &[n]).unwrap();
        let back = tape.reshape(flat, &dims).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn output_depth_law(
        variant in prop::sample::select(vec![Variant::Full, Variant::NoTab, Variant::EncoderOnly]),
        scale in prop::sample::select(vec![2usize, 3, 5]),
        depth in 2usize..6,
    ) {
        let cfg = tiny(variant, scale, depth);
        let (params, store) = TvsrnParams::init::<f32>(&cfg, 0).unwrap();
        let y = predict(&store, &params, &Tensor::full(&[1, depth, 4, 4], 0.5)).unwrap();
        prop_assert_eq!(y.shape(), &[(depth - 1) * scale + 1, 4, 4]);
    }

    #[test]
    fn depth_shuffle_is_a_bijection(c in 1usize..4, scale in 2usize..5, d in 2usize..5, seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[c * scale, d, 2, 3], seed));
        let y = depth_shuffle(&mut tape, x, scale).unwrap();
        let mut a = tape.value(y).data().to_vec();
        let mut b = tape.value(x).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let trimmed = subpixel_depth(&mut tape, x, scale).unwrap();
        prop_assert_eq!(tape.shape(trimmed), &[c, (d - 1) * scale + 1, 2, 3]);
    }

    #[test]
    fn partition_merge_is_exact(gy in 1usize..10, gx in 1usize..10, wy in 1usize..5, wx in 1usize..5, shifted in any::<bool>(), seed in any::<u64>()) {
        let shift = if shifted { (wy / 2, wx / 2) } else { (0, 0) };
        let plan = WindowPlan::new((gy, gx), (wy, wx), shift).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[2, gy, gx, 3], seed));
        let w = partition_windows(&mut tape, x, &plan).unwrap();
        prop_assert_eq!(tape.shape(w), &[2 * plan.num_windows(), wy * wx, 3]);
        let back = merge_windows(&mut tape, w, &plan).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn slide_coverage_matches_brute_force(d in 4usize..13, h in 3usize..20, dc in 2usize..5, hc in 1usize..8, scale in 2usize..6) {
        prop_assume!(dc <= d && hc <= h);
        let plan = plan_slide((d, h, h), (dc, hc, hc), scale).unwrap();
        let (td, _, _) = plan.out_dims();
        let mut counts = vec![0u32; td * h * h];
        let tw = plan.thin_window();
        for t in plan.tiles() {
            for z in t.d0 * scale..t.d0 * scale + tw {
                for y in t.h0..t.h0 + hc {
                    for x in t.w0..t.w0 + hc {
                        counts[(z * h + y) * h + x] += 1;
                    }
                }
            }
        }
        for z in 0..td {
            for y in 0..h {
                for x in 0..h {
                    let c = counts[(z * h + y) * h + x];
                    prop_assert!(c >= 1);
                    prop_assert_eq!(c, plan.coverage(z, y, x));
                }
            }
        }
        let s = &plan.depth_starts;
        prop_assert_eq!(s[0], 0);
        prop_assert_eq!(s[s.len() - 1] + dc, d);
        for pair in s.windows(2) {
            prop_assert!(pair[1] > pair[0] && pair[1] <= pair[0] + dc - 1);
        }
    }
}

use proptest::prelude::*;
use tta_core::adapt::{
    beta_name, gamma_name, init_modulation, modulation_gradient_error, random_case, AdamConfig, AdamState, ModulationSet, Schedule,
    GRADCHECK_STEP,
};
use tta_core::corrupt::{corrupt_dataset, CorruptionKind, CorruptionSpec};
use tta_core::data::{render_glyphs, BatchPlan, Dataset, GlyphStyle};
use tta_core::diffcore::{affine_modulate, batch_norm, row_entropies, softmax_probs, BatchNormState, NormMode, Tape};
use tta_core::netmodels::{Container, Record, StatsSource};
use tta_core::Tensor;

fn matrix(rows: usize, cols: usize, scale: f32) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

/// Per-channel mean and population variance in f64.
fn moments(x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (c, s) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut vals = vec![Vec::new(); c];
    for (i, v) in x.data().iter().enumerate() {
        vals[(i / s) % c].push(*v as f64);
    }
    vals.iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
        })
        .unzip()
}

fn logits() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..16, 2usize..12).prop_flat_map(|(n, c)| matrix(n, c, 30.0))
}

fn images() -> impl Strategy<Value = Tensor<f32>> {
    (8usize..16, 1usize..4, 2usize..5).prop_flat_map(|(n, c, s)| {
        prop::collection::vec(-5.0f32..5.0, n * c * s * s).prop_map(move |v| Tensor::new(vec![n, c, s, s], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in logits()) {
        let c = x.shape()[1];
        let p = softmax_probs(&x).unwrap();
        for row in p.data().chunks(c) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(x in logits(), k in -50.0f32..50.0) {
        let shifted = x.map(|v| v + k);
        let a = softmax_probs(&x).unwrap();
        let b = softmax_probs(&shifted).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn entropy_is_bounded_by_log_classes(x in logits()) {
        let c = x.shape()[1];
        for h in row_entropies(&softmax_probs(&x).unwrap()) {
            prop_assert!(h >= -1e-9 && h <= (c as f64).ln() + 1e-6, "{h}");
        }
    }

    #[test]
    fn batch_statistics_normalize(x in images()) {
        let c = x.shape()[1];
        let y = batch_norm(&x, &BatchNormState::fresh(c), NormMode::UseBatch).unwrap();
        let (_, in_var) = moments(&x);
        let (mean, var) = moments(&y);
        for ch in 0..c {
            prop_assert!(mean[ch].abs() < 1e-4, "mean {}", mean[ch]);
            // The epsilon guard shrinks the variance by var / (var + eps).
            let expect = in_var[ch] / (in_var[ch] + 1e-5);
            prop_assert!((var[ch] - 1.0).abs() < 1e-3 || (var[ch] - expect).abs() < 1e-3, "var {}", var[ch]);
        }
    }

    #[test]
    fn identity_modulation_is_bit_exact(x in images()) {
        let c = x.shape()[1];
        let y = affine_modulate(&x, &Tensor::ones(vec![c]), &Tensor::zeros(vec![c])).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn adam_first_step_is_bounded_by_lr(g in prop::collection::vec(-1e3f32..1e3, 4), lr in 1e-5f64..1e-1) {
        let mut m = ModulationSet::<f32>::identity(&[4]);
        let before = m.to_map();
        let (g_name, b_name) = (gamma_name(0), beta_name(0));
        let mut tape = Tape::<f32>::new(m.param_names(None));
        let gamma = tape.param(&g_name, m.get(&g_name).unwrap());
        let beta = tape.param(&b_name, m.get(&b_name).unwrap());
        let w = tape.input(Tensor::new(vec![1, 4], g.clone()).unwrap());
        let y = tape.affine_modulate(w, gamma, beta).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        AdamState::new(AdamConfig::default()).step(&mut m, &grads, lr).unwrap();
        let after = m.get(&g_name).unwrap();
        for (i, (a, b)) in after.data().iter().zip(before[&g_name].data()).enumerate() {
            let d = (*a as f64 - *b as f64).abs();
            prop_assert!(d <= lr * (1.0 + 1e-3) + 1e-7, "step {d} at lr {lr}");
            if g[i].abs() > 1e-2 {
                prop_assert!((*a < *b) == (g[i] > 0.0));
            }
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(base in 1e-5f64..1.0, total in 1usize..500) {
        let lrs: Vec<f64> = (0..=total).map(|t| Schedule::Cosine.lr(base, t, total)).collect();
        prop_assert!((lrs[0] - base).abs() < 1e-15);
        prop_assert!(lrs[total].abs() < 1e-12);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn batches_partition_the_dataset(n in 1usize..300, size in 1usize..64, seed in any::<u64>()) {
        let d = Dataset::new("p", Tensor::zeros(vec![n, 1, 1, 1]), None, 2).unwrap();
        let plan = BatchPlan::shuffled(size, seed);
        let mut seen: Vec<usize> = Vec::new();
        let mut count = 0;
        for b in d.batches(plan).unwrap() {
            prop_assert!(!b.indices.is_empty() && b.indices.len() <= size);
            seen.extend(b.indices);
            count += 1;
        }
        prop_assert_eq!(count, plan.count(n));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn container_round_trips(
        descriptor in "[ -~]{0,40}",
        records in prop::collection::vec(("[a-z.]{1,12}", prop::collection::vec(1usize..5, 0..3)), 0..4),
        seed in any::<u64>(),
    ) {
        let records: Vec<Record> = records
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                Record { name, shape, data: (0..n).map(|k| (k as f32 + i as f32) * (seed % 97) as f32 - 0.5).collect() }
            })
            .collect();
        let c = Container { descriptor, records };
        let bytes = c.encode().unwrap();
        prop_assert_eq!(Container::decode(&bytes).unwrap(), c);
        let mut flipped = bytes.clone();
        let i = (seed as usize) % flipped.len();
        flipped[i] ^= 0x10;
        prop_assert!(Container::decode(&flipped).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn corruption_is_deterministic_and_in_range(seed in any::<u64>(), severity in 1u8..=5, kind in 0usize..6) {
        let d = render_glyphs("c", 4, seed, &GlyphStyle::SOURCE).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::ALL[kind], severity, seed).unwrap();
        let a = corrupt_dataset(&d, &spec).unwrap();
        let b = corrupt_dataset(&d, &spec).unwrap();
        prop_assert!(a.images().bit_eq(b.images()));
        prop_assert_eq!(a.labels(), d.labels());
        let a = a.images();
        prop_assert_eq!(a.shape(), d.images().shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradients_cover_exactly_the_modulation(seed in any::<u64>()) {
        let c = random_case(seed).unwrap();
        let names = c.modulation.param_names(None);
        let mut tape = Tape::new(names.iter().cloned());
        let (logits, _) = c.net.forward_taped(&mut tape, c.x.clone(), StatsSource::Batch, Some(&c.modulation)).unwrap();
        let loss = tape.entropy_loss(logits).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut keys: Vec<&str> = grads.keys().collect();
        keys.sort_unstable();
        let mut expect: Vec<&str> = names.iter().map(String::as_str).collect();
        expect.sort_unstable();
        prop_assert_eq!(keys, expect);
        prop_assert!(c.net.params().keys().all(|k| grads.get(k).is_none()));
    }

    #[test]
    fn modulation_gradients_match_finite_differences(seed in any::<u64>()) {
        let c = random_case(seed).unwrap();
        let ent = modulation_gradient_error(&c.net, &c.x, None, &c.modulation, GRADCHECK_STEP).unwrap();
        let ce = modulation_gradient_error(&c.net, &c.x, Some(&c.labels), &c.modulation, GRADCHECK_STEP).unwrap();
        prop_assert!(ent < 1e-3 && ce < 1e-3, "entropy {ent}, cross-entropy {ce}");
    }

    #[test]
    fn identity_init_preserves_the_frozen_forward(seed in any::<u64>()) {
        let c = random_case(seed).unwrap();
        let m = init_modulation(&c.net);
        prop_assert!(m.is_identity());
        let a = c.net.forward(&c.x, StatsSource::Stored, Some(&m)).unwrap();
        let b = c.net.forward(&c.x, StatsSource::Stored, None).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}

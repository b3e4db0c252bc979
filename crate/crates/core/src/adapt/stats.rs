use crate::data::{BatchPlan, Dataset};
use crate::diffcore::kernel::NormStats;
use crate::diffcore::Scalar;
use crate::error::{Error, Result};
use crate::netmodels::Network;

/// Exact per-channel mean and population variance of every norm layer's
/// input over the whole dataset, with identity modulation. Each layer is
/// normalized with its own estimate before the next layer is measured.
/// `batch_size` only sets the chunking of the pass.
pub fn estimate_population_stats<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<NormStats<T>>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch {
            op: "estimate_population_stats",
        });
    }
    let chunks = data.batches(BatchPlan::sequential(batch_size))?.map(|b| b.images.cast()).collect();
    net.population_stats(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::netmodels::{build_lenet, build_resnet, StatsSource};

    fn data(n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..n * 784).map(|_| rng.gen::<f32>()).collect();
        Dataset::new("r", Tensor::new(vec![n, 1, 28, 28], px).unwrap(), None, 10).unwrap()
    }

    #[test]
    fn batch_size_independent() {
        let net = build_resnet::<f32>(1, 1, [1, 28, 28], 10, 1).unwrap();
        let d = data(96, 0);
        let a = estimate_population_stats(&net, &d, 32).unwrap();
        let b = estimate_population_stats(&net, &d, 96).unwrap();
        let c = estimate_population_stats(&net, &d, 7).unwrap();
        for (x, y) in a.iter().zip(&b).chain(a.iter().zip(&c)) {
            for (u, v) in x.mean.iter().zip(&y.mean).chain(x.var.iter().zip(&y.var)) {
                assert!((u - v).abs() <= 1e-4 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn single_chunk_matches_batch_mode_forward() {
        // With the whole set in one batch, batch-mode normalization sees the
        // same statistics layer by layer.
        let net = build_lenet::<f64>([1, 28, 28], 10, 2).unwrap();
        let d = data(12, 1);
        let stats = estimate_population_stats(&net, &d, 12).unwrap();
        let x = d.images().cast::<f64>();
        let a = net.forward(&x, StatsSource::Batch, None).unwrap();
        let b = net.forward(&x, StatsSource::Replaced(&stats), None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn constant_input_has_zero_first_layer_variance() {
        let net = build_lenet::<f32>([1, 28, 28], 10, 0).unwrap();
        let d = Dataset::new("c", Tensor::full(vec![5, 1, 28, 28], 0.4), None, 10).unwrap();
        let stats = estimate_population_stats(&net, &d, 2).unwrap();
        assert!(stats[0].var.iter().all(|&v| v < 1e-10));
        let out = net.forward(&d.images().clone(), StatsSource::Replaced(&stats), None).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let net = build_lenet::<f32>([1, 28, 28], 10, 0).unwrap();
        let d = Dataset::new("e", Tensor::zeros(vec![0, 1, 28, 28]), None, 10).unwrap();
        assert!(matches!(estimate_population_stats(&net, &d, 8), Err(Error::EmptyBatch { .. })));
    }
}

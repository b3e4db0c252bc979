//! Gradient check of the modulation parameters against finite differences.

use crate::diffcore::kernel::{cross_entropy_loss, entropy_loss};
use crate::diffcore::{finite_diff_grad, max_relative_error, Tape, Tensor};
use crate::error::Result;
use crate::netmodels::{ArchSpec, Network, StatsSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::modulation::ModulationSet;

/// Finite-difference step for [`modulation_gradient_error`]. The networks
/// are piecewise smooth, so larger steps straddle ReLU kinks and bias the
/// estimate; f64 evaluation keeps round-off far below tolerance here.
pub const GRADCHECK_STEP: f64 = 1e-7;

/// Largest relative error between the f32 taped gradient of the loss with
/// respect to every modulation parameter and central differences of step
/// `step` taken on an f64 copy of the same network. The loss is entropy
/// when `labels` is `None` and cross-entropy otherwise; normalization uses
/// batch statistics.
pub fn modulation_gradient_error(
    net: &Network<f32>,
    x: &Tensor<f32>,
    labels: Option<&[usize]>,
    modulation: &ModulationSet<f32>,
    step: f64,
) -> Result<f64> {
    let names = modulation.param_names(None);
    let mut tape = Tape::new(names.iter().cloned());
    let (logits, _) = net.forward_taped(&mut tape, x.clone(), StatsSource::Batch, Some(modulation))?;
    let loss = match labels {
        None => tape.entropy_loss(logits)?,
        Some(y) => tape.cross_entropy(logits, y, None)?.0,
    };
    let analytic = tape.backward(loss)?.into_map();

    let net64 = net.cast::<f64>();
    let x64 = x.cast::<f64>();
    let base = modulation.cast::<f64>();
    let numeric = finite_diff_grad(&base.to_map(), step, |p| {
        let mut m = base.clone();
        for (name, t) in p {
            if let Some(slot) = m.get_mut(name) {
                *slot = t.clone();
            }
        }
        let out = net64.forward(&x64, StatsSource::Batch, Some(&m))?;
        match labels {
            None => entropy_loss(&out),
            Some(y) => cross_entropy_loss(&out, y),
        }
    })?;
    max_relative_error(&analytic, &numeric)
}

/// A small random network with inputs, labels, and a modulation set
/// perturbed away from the identity.
pub struct GradCase {
    pub net: Network<f32>,
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub modulation: ModulationSet<f32>,
}

/// Random LeNet (even seeds) or one-block ResNet (odd seeds) with at most
/// about 5e3 parameters, 16x16 inputs, and 8 to 12 examples.
pub fn random_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=3);
    let classes = rng.gen_range(2..=6);
    let spec = if seed % 2 == 0 {
        ArchSpec::Lenet {
            input: [c, 16, 16],
            classes,
            channels: [rng.gen_range(2..=6), rng.gen_range(2..=8)],
        }
    } else {
        ArchSpec::Resnet {
            depth_blocks: 1,
            width: 1,
            input: [c, 16, 16],
            classes,
            base_channels: rng.gen_range(2..=4),
        }
    };
    let net = Network::new(spec, seed)?;
    let n = rng.gen_range(8..=12);
    let x = Tensor::new(vec![n, c, 16, 16], (0..n * c * 256).map(|_| rng.gen::<f32>()).collect())?;
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let mut modulation = ModulationSet::identity(net.slot_channels());
    for name in modulation.param_names(None) {
        if let Some(t) = modulation.get_mut(&name) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2f32..0.2));
        }
    }
    Ok(GradCase {
        net,
        x,
        labels,
        modulation,
    })
}

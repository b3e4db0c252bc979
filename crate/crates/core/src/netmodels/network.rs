use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{self, ArchSpec, Layer, LENET_CHANNELS, RESNET_BASE_CHANNELS};
use crate::adapt::modulation::{beta_name, gamma_name, ModulationSet};
use crate::diffcore::kernel::{self, BatchNormState, NormStats, NORM_EPS};
use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which normalization statistics a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum StatsSource<'a, T: Scalar> {
    /// The statistics stored in the network (training-time moving estimates).
    Stored,
    /// Statistics of the current batch.
    Batch,
    /// Externally supplied statistics, one entry per norm layer.
    Replaced(&'a [NormStats<T>]),
}

/// Provenance recorded with a trained network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_accuracy: f64,
}

/// Per-channel standardization applied to raw `[0, 1]` pixels at the model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// A classifier: layer graph, parameters, and stored normalization statistics.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    spec: ArchSpec,
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor<T>>,
    norms: Vec<NormStats<T>>,
    slot_channels: Vec<usize>,
    input_norm: InputNorm,
    meta: TrainingMeta,
}

pub fn build_lenet<T: Scalar>(input: [usize; 3], classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(
        ArchSpec::Lenet {
            input,
            classes,
            channels: LENET_CHANNELS,
        },
        seed,
    )
}

pub fn build_resnet<T: Scalar>(
    depth_blocks: usize,
    width: usize,
    input: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<Network<T>> {
    Network::new(
        ArchSpec::Resnet {
            depth_blocks,
            width,
            input,
            classes,
            base_channels: RESNET_BASE_CHANNELS,
        },
        seed,
    )
}

fn kaiming_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Kaiming-uniform weights, zero biases, unit norm scales, drawn in
/// execution order.
fn init_params<T: Scalar>(layers: &[Layer], rng: &mut ChaCha8Rng, out: &mut BTreeMap<String, Tensor<T>>) {
    for layer in layers {
        match layer {
            Layer::Conv {
                weight,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let w = kaiming_uniform(rng, vec![*out_ch, *in_ch, *kernel, *kernel], in_ch * kernel * kernel);
                out.insert(weight.clone(), w);
            }
            Layer::Norm {
                scale, shift, channels, ..
            } => {
                out.insert(scale.clone(), Tensor::ones(vec![*channels]));
                out.insert(shift.clone(), Tensor::zeros(vec![*channels]));
            }
            Layer::Linear {
                weight,
                bias,
                in_features,
                out_features,
            } => {
                out.insert(weight.clone(), kaiming_uniform(rng, vec![*out_features, *in_features], *in_features));
                out.insert(bias.clone(), Tensor::zeros(vec![*out_features]));
            }
            Layer::Residual { body, shortcut } => {
                init_params(body, rng, out);
                init_params(shortcut, rng, out);
            }
            Layer::Relu | Layer::AvgPool { .. } | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the layer graph for `spec` and draws initial weights from `seed`.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let graph = arch::build(&spec)?;
        let mut params = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&graph.layers, &mut rng, &mut params);
        let channels = spec.input()[0];
        Ok(Self {
            norms: graph.slot_channels.iter().map(|&c| NormStats::identity(c)).collect(),
            slot_channels: graph.slot_channels,
            layers: graph.layers,
            params,
            input_norm: InputNorm::identity(channels),
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
            spec,
        })
    }

    /// Reassembles a network from stored parts, validating every tensor.
    pub(crate) fn from_parts(
        spec: ArchSpec,
        params: BTreeMap<String, Tensor<T>>,
        norms: Vec<NormStats<T>>,
        input_norm: InputNorm,
        meta: TrainingMeta,
    ) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", net.params.len(), params.len())));
        }
        for (name, t) in params {
            let slot = net
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        net.set_norm_stats(norms)?;
        net.set_input_norm(input_norm)?;
        net.meta = meta;
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input()
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: TrainingMeta) {
        self.meta = meta;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Number of convolution weights.
    pub fn conv_param_count(&self) -> usize {
        fn walk(layers: &[Layer], acc: &mut usize) {
            for l in layers {
                match l {
                    Layer::Conv {
                        in_ch, out_ch, kernel, ..
                    } => *acc += in_ch * out_ch * kernel * kernel,
                    Layer::Residual { body, shortcut } => {
                        walk(body, acc);
                        walk(shortcut, acc);
                    }
                    _ => {}
                }
            }
        }
        let mut n = 0;
        walk(&self.layers, &mut n);
        n
    }

    /// Channel count of every modulation slot, in execution order.
    pub fn slot_channels(&self) -> &[usize] {
        &self.slot_channels
    }

    pub fn norm_stats(&self) -> &[NormStats<T>] {
        &self.norms
    }

    /// Replaces every layer's stored statistics at once.
    pub fn set_norm_stats(&mut self, norms: Vec<NormStats<T>>) -> Result<()> {
        check_stats(&self.slot_channels, &norms)?;
        self.norms = norms;
        Ok(())
    }

    /// The stored statistics and learned affine of norm layer `slot`.
    pub fn norm_state(&self, slot: usize) -> Option<BatchNormState<T>> {
        let (scale, shift) = self.norm_param_names().into_iter().nth(slot)?;
        BatchNormState::new(
            self.norms[slot].clone(),
            self.params[&scale].data().to_vec(),
            self.params[&shift].data().to_vec(),
            NORM_EPS,
        )
        .ok()
    }

    /// (scale, shift) parameter names of every norm layer, by slot.
    pub fn norm_param_names(&self) -> Vec<(String, String)> {
        fn walk(layers: &[Layer], acc: &mut Vec<(usize, String, String)>) {
            for l in layers {
                match l {
                    Layer::Norm { scale, shift, slot, .. } => acc.push((*slot, scale.clone(), shift.clone())),
                    Layer::Residual { body, shortcut } => {
                        walk(body, acc);
                        walk(shortcut, acc);
                    }
                    _ => {}
                }
            }
        }
        let mut acc = Vec::new();
        walk(&self.layers, &mut acc);
        acc.sort_by_key(|e| e.0);
        acc.into_iter().map(|(_, a, b)| (a, b)).collect()
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        let c = self.spec.input()[0];
        if norm.mean.len() != c || norm.std.len() != c || norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("input normalization does not fit {c} channels: {norm:?}")));
        }
        self.input_norm = norm;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self.norms.iter().map(NormStats::cast).collect(),
            slot_channels: self.slot_channels.clone(),
            input_norm: self.input_norm.clone(),
            meta: self.meta.clone(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.spec.input();
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape("forward", format!("batch {:?} for input {c}x{h}x{w}", x.shape())));
        }
        Ok(())
    }

    fn check_forward_args(&self, stats: &StatsSource<'_, T>, modulation: Option<&ModulationSet<T>>) -> Result<()> {
        if let Some(m) = modulation {
            m.check_fits(&self.slot_channels)?;
        }
        if let StatsSource::Replaced(s) = stats {
            check_stats(&self.slot_channels, s)?;
        }
        Ok(())
    }

    /// Logits for a batch. A pure function of (parameters, statistics,
    /// modulation, batch); an empty batch gives empty logits.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        stats: StatsSource<'_, T>,
        modulation: Option<&ModulationSet<T>>,
    ) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        self.check_forward_args(&stats, modulation)?;
        if x.batch() == 0 {
            return Ok(Tensor::zeros(vec![0, self.classes()]));
        }
        let mut exec = Eager { stats };
        self.run_model(&mut exec, x.clone(), modulation)
    }

    /// Records a forward pass on `tape`. Returns the logits and, in batch
    /// mode, the batch statistics seen by each norm layer.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        stats: StatsSource<'_, T>,
        modulation: Option<&ModulationSet<T>>,
    ) -> Result<(Var, Vec<Option<NormStats<T>>>)> {
        self.check_batch(&x)?;
        self.check_forward_args(&stats, modulation)?;
        if x.batch() == 0 {
            return Err(Error::EmptyBatch { op: "forward_taped" });
        }
        let mut exec = Taped {
            tape,
            stats,
            batch_stats: vec![None; self.slot_channels.len()],
        };
        let input = exec.tape.input(x);
        let logits = self.run_model(&mut exec, input, modulation)?;
        Ok((logits, exec.batch_stats))
    }

    /// Exact per-channel statistics of every norm layer's input over all of
    /// `chunks`, processing the data one layer at a time so that each layer
    /// sees upstream activations normalized by the already-estimated
    /// statistics. Modulation is at identity. Chunk size only affects
    /// accumulation order.
    pub(crate) fn population_stats(&self, chunks: Vec<Tensor<T>>) -> Result<Vec<NormStats<T>>> {
        for c in &chunks {
            self.check_batch(c)?;
        }
        if chunks.iter().all(|c| c.batch() == 0) {
            return Err(Error::EmptyBatch { op: "population_stats" });
        }
        let chunks: Vec<_> = chunks.into_iter().filter(|c| c.batch() > 0).collect();
        let mut exec = Estimate {
            collected: vec![None; self.slot_channels.len()],
        };
        self.run_model(&mut exec, chunks, None)?;
        exec.collected
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Format(format!("norm layer {i} was never reached"))))
            .collect()
    }

    fn run_model<E: Exec<T>>(&self, exec: &mut E, x: E::V, m: Option<&ModulationSet<T>>) -> Result<E::V> {
        let c = self.input_norm.mean.len();
        let gamma: Vec<T> = self.input_norm.std.iter().map(|&s| T::from_f64_lossy(1.0 / s as f64)).collect();
        let beta: Vec<T> = self
            .input_norm
            .mean
            .iter()
            .zip(&self.input_norm.std)
            .map(|(&m, &s)| T::from_f64_lossy(-(m as f64) / s as f64))
            .collect();
        let g = exec.param("input.gamma", &Tensor::new(vec![c], gamma)?)?;
        let b = exec.param("input.beta", &Tensor::new(vec![c], beta)?)?;
        let x = exec.modulate(&x, &g, &b)?;
        self.run(exec, &self.layers, x, m)
    }

    fn run<E: Exec<T>>(&self, exec: &mut E, layers: &[Layer], mut x: E::V, m: Option<&ModulationSet<T>>) -> Result<E::V> {
        for layer in layers {
            x = match layer {
                Layer::Conv { weight, stride, pad, .. } => {
                    let w = exec.param(weight, &self.params[weight])?;
                    exec.conv2d(&x, &w, *stride, *pad)?
                }
                Layer::Norm { scale, shift, slot, .. } => {
                    let s = exec.param(scale, &self.params[scale])?;
                    let b = exec.param(shift, &self.params[shift])?;
                    let y = exec.norm(*slot, &x, &s, &b, &self.norms[*slot])?;
                    match m.and_then(|m| m.slot(*slot)) {
                        Some(sm) => {
                            let g = exec.param(&gamma_name(*slot), &sm.gamma)?;
                            let bt = exec.param(&beta_name(*slot), &sm.beta)?;
                            exec.modulate(&y, &g, &bt)?
                        }
                        None => y,
                    }
                }
                Layer::Relu => exec.relu(&x)?,
                Layer::AvgPool { k } => exec.avg_pool(&x, *k)?,
                Layer::GlobalAvgPool => {
                    let k = exec.height(&x);
                    exec.avg_pool(&x, k)?
                }
                Layer::Flatten => exec.flatten(&x)?,
                Layer::Linear { weight, bias, .. } => {
                    let w = exec.param(weight, &self.params[weight])?;
                    let b = exec.param(bias, &self.params[bias])?;
                    exec.linear(&x, &w, &b)?
                }
                Layer::Residual { body, shortcut } => {
                    let skip = self.run(exec, shortcut, x.clone(), m)?;
                    let y = self.run(exec, body, x, m)?;
                    exec.add(&y, &skip)?
                }
            };
        }
        Ok(x)
    }
}

fn check_stats<T: Scalar>(slot_channels: &[usize], stats: &[NormStats<T>]) -> Result<()> {
    if stats.len() != slot_channels.len() || stats.iter().zip(slot_channels).any(|(s, &c)| s.channels() != c) {
        return Err(Error::shape(
            "norm_stats",
            format!(
                "{:?} for layers of {slot_channels:?}",
                stats.iter().map(NormStats::channels).collect::<Vec<_>>()
            ),
        ));
    }
    Ok(())
}

/// The operations a forward pass needs, so one layer walker serves eager
/// evaluation, taped evaluation, and whole-dataset statistics estimation.
trait Exec<T: Scalar> {
    type V: Clone;
    fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn norm(&mut self, slot: usize, x: &Self::V, scale: &Self::V, shift: &Self::V, stored: &NormStats<T>) -> Result<Self::V>;
    fn modulate(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn avg_pool(&mut self, x: &Self::V, k: usize) -> Result<Self::V>;
    fn height(&self, x: &Self::V) -> usize;
    fn flatten(&mut self, x: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

struct Eager<'a, T: Scalar> {
    stats: StatsSource<'a, T>,
}

impl<T: Scalar> Exec<T> for Eager<'_, T> {
    type V = Tensor<T>;

    fn param(&mut self, _: &str, value: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(value.clone())
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        kernel::conv2d(x, w, None, stride, pad)
    }

    fn norm(&mut self, slot: usize, x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>, stored: &NormStats<T>) -> Result<Tensor<T>> {
        match self.stats {
            StatsSource::Stored => kernel::bn_forward_stored(x, scale.data(), shift.data(), stored, NORM_EPS),
            StatsSource::Replaced(s) => kernel::bn_forward_stored(x, scale.data(), shift.data(), &s[slot], NORM_EPS),
            StatsSource::Batch => kernel::bn_forward_batch(x, scale.data(), shift.data(), NORM_EPS).map(|r| r.0),
        }
    }

    fn modulate(&mut self, x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernel::affine_modulate(x, g, b)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernel::relu(x)
    }

    fn avg_pool(&mut self, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        kernel::avg_pool(x, k)
    }

    fn height(&self, x: &Tensor<T>) -> usize {
        x.shape()[2]
    }

    fn flatten(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernel::flatten(x)
    }

    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernel::linear(x, w, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernel::add(a, b)
    }
}

struct Taped<'t, 'a, T: Scalar> {
    tape: &'t mut Tape<T>,
    stats: StatsSource<'a, T>,
    batch_stats: Vec<Option<NormStats<T>>>,
}

impl<T: Scalar> Exec<T> for Taped<'_, '_, T> {
    type V = Var;

    fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        Ok(self.tape.param(name, value))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.tape.conv2d(*x, *w, None, stride, pad)
    }

    fn norm(&mut self, slot: usize, x: &Var, scale: &Var, shift: &Var, stored: &NormStats<T>) -> Result<Var> {
        use crate::diffcore::NormMode;
        let (mode, stats) = match self.stats {
            StatsSource::Stored => (NormMode::UseStored, stored),
            StatsSource::Replaced(s) => (NormMode::UseStored, &s[slot]),
            StatsSource::Batch => (NormMode::UseBatch, stored),
        };
        let (y, batch) = self.tape.batch_norm(*x, *scale, *shift, mode, stats, NORM_EPS)?;
        self.batch_stats[slot] = batch;
        Ok(y)
    }

    fn modulate(&mut self, x: &Var, g: &Var, b: &Var) -> Result<Var> {
        self.tape.affine_modulate(*x, *g, *b)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn avg_pool(&mut self, x: &Var, k: usize) -> Result<Var> {
        self.tape.avg_pool(*x, k)
    }

    fn height(&self, x: &Var) -> usize {
        self.tape.value(*x).shape()[2]
    }

    fn flatten(&mut self, x: &Var) -> Result<Var> {
        self.tape.flatten(*x)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.tape.linear(*x, *w, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }
}

/// Whole-dataset evaluation over chunks. Parameters are single-element vectors.
struct Estimate<T: Scalar> {
    collected: Vec<Option<NormStats<T>>>,
}

fn map_chunks<T: Scalar>(x: &[Tensor<T>], f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
    x.iter().map(f).collect()
}

impl<T: Scalar> Exec<T> for Estimate<T> {
    type V = Vec<Tensor<T>>;

    fn param(&mut self, _: &str, value: &Tensor<T>) -> Result<Self::V> {
        Ok(vec![value.clone()])
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, pad: usize) -> Result<Self::V> {
        map_chunks(x, |c| kernel::conv2d(c, &w[0], None, stride, pad))
    }

    fn norm(&mut self, slot: usize, x: &Self::V, scale: &Self::V, shift: &Self::V, _: &NormStats<T>) -> Result<Self::V> {
        let c = x[0].shape()[1];
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for chunk in x {
            let (s, _, n) = kernel::channel_sums(chunk)?;
            sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            count += n;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for chunk in x {
            let per = chunk.len() / (chunk.batch() * c);
            for sample in chunk.data().chunks(c * per) {
                for (ch, plane) in sample.chunks(per).enumerate() {
                    sq[ch] += plane.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
                }
            }
        }
        let stats = NormStats::new(
            mean.iter().map(|&m| T::from_f64_lossy(m)).collect(),
            sq.iter().map(|&v| T::from_f64_lossy(v / count as f64)).collect(),
        )?;
        let out = map_chunks(x, |ch| kernel::bn_forward_stored(ch, scale[0].data(), shift[0].data(), &stats, NORM_EPS))?;
        self.collected[slot] = Some(stats);
        Ok(out)
    }

    fn modulate(&mut self, x: &Self::V, g: &Self::V, b: &Self::V) -> Result<Self::V> {
        map_chunks(x, |c| kernel::affine_modulate(c, &g[0], &b[0]))
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        map_chunks(x, kernel::relu)
    }

    fn avg_pool(&mut self, x: &Self::V, k: usize) -> Result<Self::V> {
        map_chunks(x, |c| kernel::avg_pool(c, k))
    }

    fn height(&self, x: &Self::V) -> usize {
        x[0].shape()[2]
    }

    fn flatten(&mut self, x: &Self::V) -> Result<Self::V> {
        map_chunks(x, kernel::flatten)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        map_chunks(x, |c| kernel::linear(c, &w[0], &b[0]))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        a.iter().zip(b).map(|(x, y)| kernel::add(x, y)).collect()
    }
}

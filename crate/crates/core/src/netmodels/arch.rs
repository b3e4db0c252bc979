//! Layer graphs for the two supported families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base channel count of the first residual stage at width 1.
pub const RESNET_BASE_CHANNELS: usize = 8;
pub const RESNET_STAGES: usize = 3;
pub const LENET_CHANNELS: [usize; 2] = [16, 32];

/// Serializable architecture descriptor; the full layer graph is rebuilt
/// from it deterministically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchSpec {
    Lenet {
        input: [usize; 3],
        classes: usize,
        #[serde(default = "lenet_channels")]
        channels: [usize; 2],
    },
    Resnet {
        depth_blocks: usize,
        width: usize,
        input: [usize; 3],
        classes: usize,
        /// First-stage channels at width 1.
        #[serde(default = "resnet_base")]
        base_channels: usize,
    },
}

fn lenet_channels() -> [usize; 2] {
    LENET_CHANNELS
}

fn resnet_base() -> usize {
    RESNET_BASE_CHANNELS
}

impl ArchSpec {
    pub fn input(&self) -> [usize; 3] {
        match self {
            ArchSpec::Lenet { input, .. } | ArchSpec::Resnet { input, .. } => *input,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Lenet { classes, .. } | ArchSpec::Resnet { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Normalization followed by its modulation slot.
    Norm {
        scale: String,
        shift: String,
        channels: usize,
        slot: usize,
    },
    Relu,
    AvgPool {
        k: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        weight: String,
        bias: String,
        in_features: usize,
        out_features: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Assigns slot indices to norm layers in execution order.
struct Builder {
    slots: Vec<usize>,
}

impl Builder {
    fn conv(&self, prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Layer {
        Layer::Conv {
            weight: format!("{prefix}.weight"),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Layer {
        self.slots.push(channels);
        Layer::Norm {
            scale: format!("{prefix}.scale"),
            shift: format!("{prefix}.shift"),
            channels,
            slot: self.slots.len() - 1,
        }
    }
}

/// Layers plus per-slot channel counts.
pub(crate) struct Graph {
    pub layers: Vec<Layer>,
    pub slot_channels: Vec<usize>,
}

pub(crate) fn build(spec: &ArchSpec) -> Result<Graph> {
    let mut b = Builder { slots: Vec::new() };
    let layers = match *spec {
        ArchSpec::Lenet {
            input: [c, h, w],
            classes,
            channels: [c1, c2],
        } => {
            if h < 16 || w < 16 {
                return Err(Error::InvalidArgument(format!("lenet needs spatial extent >= 16, got {h}x{w}")));
            }
            if c1 == 0 || c2 == 0 {
                return Err(Error::InvalidArgument("lenet channel counts must be positive".into()));
            }
            let (h2, w2) = (((h - 4) / 2 - 4) / 2, ((w - 4) / 2 - 4) / 2);
            vec![
                b.conv("conv1", c, c1, 5, 1, 0),
                b.norm("bn1", c1),
                Layer::Relu,
                Layer::AvgPool { k: 2 },
                b.conv("conv2", c1, c2, 5, 1, 0),
                b.norm("bn2", c2),
                Layer::Relu,
                Layer::AvgPool { k: 2 },
                Layer::Flatten,
                Layer::Linear {
                    weight: "fc.weight".into(),
                    bias: "fc.bias".into(),
                    in_features: c2 * h2 * w2,
                    out_features: classes,
                },
            ]
        }
        ArchSpec::Resnet {
            depth_blocks,
            width,
            input: [c, h, w],
            classes,
            base_channels,
        } => {
            if depth_blocks == 0 {
                return Err(Error::InvalidArgument("resnet needs at least one block per stage".into()));
            }
            if width == 0 || base_channels == 0 {
                return Err(Error::InvalidArgument("resnet width multiplier must be positive".into()));
            }
            let downsample = 1 << (RESNET_STAGES - 1);
            if h < downsample || w < downsample {
                return Err(Error::InvalidArgument(format!(
                    "resnet input {h}x{w} is smaller than its total stride {downsample}"
                )));
            }
            let base = base_channels * width;
            let mut layers = vec![b.conv("stem.conv", c, base, 3, 1, 1), b.norm("stem.bn", base), Layer::Relu];
            let mut in_ch = base;
            for stage in 0..RESNET_STAGES {
                let out_ch = base << stage;
                for block in 0..depth_blocks {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let p = format!("s{stage}.b{block}");
                    let body = vec![
                        b.conv(&format!("{p}.conv1"), in_ch, out_ch, 3, stride, 1),
                        b.norm(&format!("{p}.bn1"), out_ch),
                        Layer::Relu,
                        b.conv(&format!("{p}.conv2"), out_ch, out_ch, 3, 1, 1),
                        b.norm(&format!("{p}.bn2"), out_ch),
                    ];
                    let shortcut = if stride != 1 || in_ch != out_ch {
                        vec![
                            b.conv(&format!("{p}.down.conv"), in_ch, out_ch, 1, stride, 0),
                            b.norm(&format!("{p}.down.bn"), out_ch),
                        ]
                    } else {
                        Vec::new()
                    };
                    layers.push(Layer::Residual { body, shortcut });
                    layers.push(Layer::Relu);
                    in_ch = out_ch;
                }
            }
            layers.extend([
                Layer::GlobalAvgPool,
                Layer::Flatten,
                Layer::Linear {
                    weight: "fc.weight".into(),
                    bias: "fc.bias".into(),
                    in_features: in_ch,
                    out_features: classes,
                },
            ]);
            layers
        }
    };
    if spec.classes() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let graph = Graph {
        layers,
        slot_channels: b.slots,
    };
    let out = infer_shape(&graph.layers, spec.input().to_vec())?;
    if out != [spec.classes()] {
        return Err(Error::shape("build", format!("head produces {out:?}")));
    }
    Ok(graph)
}

/// Per-example shape propagation; rejects incompatible graphs.
pub(crate) fn infer_shape(layers: &[Layer], mut shape: Vec<usize>) -> Result<Vec<usize>> {
    for layer in layers {
        shape = match layer {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                ..
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::shape("build", format!("conv on {shape:?}")));
                };
                if c != *in_ch || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(Error::shape("build", format!("conv {in_ch}->{out_ch} k{kernel} on {shape:?}")));
                }
                vec![*out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
            }
            Layer::Norm { channels, .. } => {
                if shape.first() != Some(channels) {
                    return Err(Error::shape("build", format!("norm over {channels} on {shape:?}")));
                }
                shape
            }
            Layer::Relu => shape,
            Layer::AvgPool { k } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::shape("build", format!("pool on {shape:?}")));
                };
                if h < *k || w < *k {
                    return Err(Error::shape("build", format!("pool {k} on {shape:?}")));
                }
                vec![c, h / k, w / k]
            }
            Layer::GlobalAvgPool => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::shape("build", format!("global pool on {shape:?}")));
                };
                if h != w {
                    return Err(Error::shape("build", format!("global pool needs square maps, got {h}x{w}")));
                }
                vec![c, 1, 1]
            }
            Layer::Flatten => vec![shape.iter().product()],
            Layer::Linear {
                in_features,
                out_features,
                ..
            } => {
                if shape != [*in_features] {
                    return Err(Error::shape("build", format!("linear {in_features} on {shape:?}")));
                }
                vec![*out_features]
            }
            Layer::Residual { body, shortcut } => {
                let a = infer_shape(body, shape.clone())?;
                let b = infer_shape(shortcut, shape)?;
                if a != b {
                    return Err(Error::shape("build", format!("residual branch {a:?} vs shortcut {b:?}")));
                }
                a
            }
        };
    }
    Ok(shape)
}

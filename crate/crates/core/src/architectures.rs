//! The baseline network family and the named regularization profiles.
//!
//! Every network is `conv1-conv2-pool-conv3-conv4-pool-fc1-fc2` with ReLU
//! after each conv and after fc1. All convolutions are 3×3, stride 1,
//! same padding. `dropNet` adds dropout (p = 0.25) after each pooling layer;
//! `normNet` adds batch normalization there instead.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::layers::{BatchNormStats, ConvLayer, DenseLayer};
use crate::regularizers::{self, DecorrelationMode, LayerTap, RegProfile};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const DROPOUT_P: f64 = 0.25;
/// Layers whose RFAV entropy is monitored (the classifier is excluded).
pub const MONITORED_LAYERS: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "fc1"];
pub const SPARSITY_LAMBDA: f64 = 0.001;
pub const DECORRELATION_KAPPA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "vanillaNet")]
    Vanilla,
    #[serde(rename = "dropNet")]
    Drop,
    #[serde(rename = "normNet")]
    Norm,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanillaNet" | "vanilla" => Ok(Self::Vanilla),
            "dropNet" | "drop" => Ok(Self::Drop),
            "normNet" | "norm" => Ok(Self::Norm),
            _ => Err(Error::Unknown {
                kind: "network",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanillaNet",
            Self::Drop => "dropNet",
            Self::Norm => "normNet",
        })
    }
}

/// Channel/neuron widths. `Tiny` is not one of the published sizes; it
/// exists so full training runs fit in a test budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Tiny,
    S,
    M,
    Xxl,
}

impl Size {
    /// Widths of conv1, conv2, conv3, conv4, fc1.
    pub fn widths(self) -> [usize; 5] {
        match self {
            Self::Tiny => [8, 8, 16, 16, 32],
            Self::S => [16, 16, 32, 32, 64],
            Self::M => [64, 64, 128, 128, 256],
            Self::Xxl => [256, 256, 512, 512, 1024],
        }
    }
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "s" => Ok(Self::S),
            "m" => Ok(Self::M),
            "xxl" => Ok(Self::Xxl),
            _ => Err(Error::Unknown {
                kind: "size",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::S => "s",
            Self::M => "m",
            Self::Xxl => "xxl",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: Architecture,
    pub size: Size,
    /// Channels, height, width.
    pub input: [usize; 3],
    pub classes: usize,
}

impl NetworkSpec {
    pub fn new(name: Architecture, size: Size, input: [usize; 3], classes: usize) -> Self {
        Self {
            name,
            size,
            input,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "input height and width must be multiples of 4 (two 2×2 pools), got {h}×{w}"
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        Ok(())
    }

    /// Input width of fc1: conv4 channels times the twice-pooled grid.
    pub fn fc1_inputs(&self) -> usize {
        let [_, h, w] = self.input;
        self.size.widths()[3] * (h / 4) * (w / 4)
    }

    /// Closed-form parameter count (weights and biases; batch-norm adds
    /// `2·channels` per normalization layer).
    pub fn parameter_count(&self) -> usize {
        let [c1, c2, c3, c4, f1] = self.size.widths();
        let conv = |out: usize, inp: usize| out * inp * KERNEL * KERNEL + out;
        let mut n = conv(c1, self.input[0])
            + conv(c2, c1)
            + conv(c3, c2)
            + conv(c4, c3)
            + f1 * self.fc1_inputs()
            + f1
            + self.classes * f1
            + self.classes;
        if self.name == Architecture::Norm {
            n += 2 * (c2 + c4);
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    #[default]
    None,
    Sr1,
    Sr2,
    Sr3,
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sr1" => Ok(Self::Sr1),
            "sr2" => Ok(Self::Sr2),
            "sr3" => Ok(Self::Sr3),
            _ => Err(Error::Unknown {
                kind: "profile",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Sr1 => "sr1",
            Self::Sr2 => "sr2",
            Self::Sr3 => "sr3",
        })
    }
}

/// * `sr1`: sparsity on conv1 through fc1
/// * `sr2`: sparsity on conv3, conv4 and fc1
/// * `sr3`: `sr2` plus decorrelation on conv1
pub fn regularization_profile(name: ProfileName) -> RegProfile {
    let sparsity: &[&str] = match name {
        ProfileName::None => &[],
        ProfileName::Sr1 => &MONITORED_LAYERS,
        ProfileName::Sr2 | ProfileName::Sr3 => &["conv3", "conv4", "fc1"],
    };
    let mut profile = RegProfile::none();
    for layer in sparsity {
        profile = profile
            .with_lambda(layer, SPARSITY_LAMBDA)
            .expect("constant weight is valid");
    }
    if name == ProfileName::Sr3 {
        profile = profile
            .with_kappa("conv1", DECORRELATION_KAPPA)
            .expect("constant weight is valid");
    }
    profile
}

/// Named graph handles of a built network.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub graph: Graph,
    pub images: NodeId,
    pub labels: NodeId,
    pub logits: NodeId,
    pub base_loss: NodeId,
    /// conv1…conv4 and fc1, in network order.
    pub taps: Vec<LayerTap>,
    pub classifier: LayerTap,
}

/// Loss nodes attached to a network for one regularization profile.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub base: NodeId,
    /// `None` when the objective carries no penalty nodes at all.
    pub sparsity: Option<NodeId>,
    pub decorrelation: Option<NodeId>,
    pub total: NodeId,
}

pub const IMAGES_INPUT: &str = "images";
pub const LABELS_INPUT: &str = "labels";

/// Builds the network graph with weights drawn from `seed`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3, c4, f1] = spec.size.widths();
    let mut g = Graph::new();
    let images = g.input(IMAGES_INPUT);
    let labels = g.input(LABELS_INPUT);
    let mut taps = Vec::new();

    let mut x = images;
    let mut in_ch = spec.input[0];
    let blocks = [
        [("conv1", c1), ("conv2", c2)],
        [("conv3", c3), ("conv4", c4)],
    ];
    for (block, convs) in blocks.iter().enumerate() {
        for &(name, width) in convs {
            let layer = ConvLayer::init(&mut rng, width, in_ch, KERNEL, 1, KERNEL / 2);
            let w = g.param(format!("{name}.weight"), layer.weights);
            let b = g.param(format!("{name}.bias"), layer.bias);
            let z = g.add(
                Op::Conv2d {
                    stride: 1,
                    padding: KERNEL / 2,
                },
                &[x, w, b],
            )?;
            g.set_name(z, name);
            taps.push(LayerTap {
                id: name.to_string(),
                activation: z,
                weights: w,
                channels: width,
            });
            x = g.add(Op::Relu, &[z])?;
            in_ch = width;
        }
        x = g.add(Op::MaxPool2d, &[x])?;
        g.set_name(x, format!("pool{}", block + 1));
        match spec.name {
            Architecture::Vanilla => {}
            Architecture::Drop => {
                x = g.add(Op::Dropout { p: DROPOUT_P }, &[x])?;
                g.set_name(x, format!("dropout{}", block + 1));
            }
            Architecture::Norm => {
                let state = g.add_batch_norm(BatchNormStats::new(in_ch));
                let gamma = g.param(format!("bn{}.gamma", block + 1), Tensor::full([in_ch], 1.0));
                let beta = g.param(format!("bn{}.beta", block + 1), Tensor::zeros([in_ch]));
                x = g.add(Op::BatchNorm { state }, &[x, gamma, beta])?;
                g.set_name(x, format!("bn{}", block + 1));
            }
        }
    }
    x = g.add(Op::Flatten, &[x])?;

    let fc1 = DenseLayer::init(&mut rng, f1, spec.fc1_inputs());
    let w = g.param("fc1.weight", fc1.weights);
    let b = g.param("fc1.bias", fc1.bias);
    let z = g.add(Op::Dense, &[x, w, b])?;
    g.set_name(z, "fc1");
    taps.push(LayerTap {
        id: "fc1".into(),
        activation: z,
        weights: w,
        channels: f1,
    });
    x = g.add(Op::Relu, &[z])?;

    let fc2 = DenseLayer::init(&mut rng, spec.classes, f1);
    let w = g.param("fc2.weight", fc2.weights);
    let b = g.param("fc2.bias", fc2.bias);
    let logits = g.add(Op::Dense, &[x, w, b])?;
    g.set_name(logits, "fc2");
    let classifier = LayerTap {
        id: "fc2".into(),
        activation: logits,
        weights: w,
        channels: spec.classes,
    };
    let base_loss = g.add(Op::CrossEntropy, &[logits, labels])?;
    g.set_name(base_loss, "cross_entropy");

    Ok(Network {
        spec: spec.clone(),
        graph: g,
        images,
        labels,
        logits,
        base_loss,
        taps,
        classifier,
    })
}

impl Network {
    /// Appends `L_s`, `L_c` and `L = L* + L_s + L_c` for `profile`.
    pub fn attach_regularized_loss(
        &mut self,
        profile: &RegProfile,
        mode: DecorrelationMode,
    ) -> Result<LossNodes> {
        profile.validate()?;
        for layer in profile.sparsity_layers() {
            if !self.taps.iter().any(|t| t.id == layer) {
                return Err(Error::Unknown {
                    kind: "regularized layer",
                    name: layer.to_string(),
                });
            }
        }
        let sparsity = regularizers::sparsity_penalty(&mut self.graph, &self.taps, profile)?;
        let decorrelation =
            regularizers::decorrelation_penalty(&mut self.graph, &self.taps, profile, mode)?;
        let total =
            regularizers::total_loss(&mut self.graph, self.base_loss, sparsity, decorrelation)?;
        Ok(LossNodes {
            base: self.base_loss,
            sparsity: Some(sparsity),
            decorrelation: Some(decorrelation),
            total,
        })
    }

    pub fn tap(&self, id: &str) -> Option<&LayerTap> {
        self.taps.iter().find(|t| t.id == id)
    }

    pub fn parameter_count(&self) -> usize {
        self.graph.params().iter().map(|p| p.value.len()).sum()
    }
}

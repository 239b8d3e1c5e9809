use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper bound on configurable weights in the model head block.
pub const HEAD_WEIGHT_BUDGET: usize = 131_072;

/// Required product of spatial strides between the input and the backbone output.
pub const BACKBONE_DOWNSCALE: usize = 16;

/// Feature map dimensions, excluding the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }

    /// Spatial size after a 3x3 window with padding 1 and the given stride.
    pub fn strided(&self, channels: usize, stride: usize) -> TensorShape {
        TensorShape::new(
            channels,
            self.height.div_ceil(stride),
            self.width.div_ceil(stride),
        )
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Full 3x3 convolution + BN + ReLU at the network input, instantiated once per core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Simplified ShuffleNetV2 building blocks (no leading pointwise convolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSpec {
    /// Split channels in half, run one half through DW3x3 -> BN -> PW -> BN -> ReLU,
    /// concatenate and shuffle. Shape preserving.
    ShuffleRegular,
    /// Both branches take the full input with a stride-2 depthwise convolution;
    /// doubles the channels and halves each spatial axis.
    ShuffleDownscale,
}

impl BlockSpec {
    pub fn output_shape(&self, input: TensorShape) -> TensorShape {
        match self {
            BlockSpec::ShuffleRegular => input,
            BlockSpec::ShuffleDownscale => input.strided(input.channels * 2, 2),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BlockSpec::ShuffleRegular => 1,
            BlockSpec::ShuffleDownscale => 2,
        }
    }
}

/// One frozen segment and two trainable segments joined by a per-channel
/// alpha blend at the module output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemifreddoModuleSpec {
    pub frozen: Vec<BlockSpec>,
    pub trainable: [Vec<BlockSpec>; 2],
    /// Swap half of the channels between the two trainable cores after the blend.
    pub cross_shuffle: bool,
}

impl SemifreddoModuleSpec {
    pub fn new(frozen: Vec<BlockSpec>, trainable: Vec<BlockSpec>, cross_shuffle: bool) -> Self {
        Self {
            frozen,
            trainable: [trainable.clone(), trainable],
            cross_shuffle,
        }
    }

    pub fn segment(&self, core: Core) -> &[BlockSpec] {
        match core {
            Core::Frozen => &self.frozen,
            Core::Trainable1 => &self.trainable[0],
            Core::Trainable2 => &self.trainable[1],
        }
    }
}

/// Activations the head can approximate with its piecewise linear unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Tanh => x.tanh(),
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwlSpec {
    pub function: ActivationKind,
    pub segments: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Pointwise head with optional streaming global pooling and PWL activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub out_channels: usize,
    pub groups: usize,
    pub bias: bool,
    pub global_pool: bool,
    pub activation: Option<PwlSpec>,
}

impl HeadSpec {
    pub fn weight_count(&self, in_channels: usize) -> usize {
        if self.groups == 0 {
            return 0;
        }
        in_channels / self.groups * self.out_channels
    }
}

/// The three backbone cores. Every core has the same intermediate shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Core {
    Frozen,
    Trainable1,
    Trainable2,
}

impl Core {
    pub const ALL: [Core; 3] = [Core::Frozen, Core::Trainable1, Core::Trainable2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Core::Frozen => "frozen",
            Core::Trainable1 => "t1",
            Core::Trainable2 => "t2",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != Core::Frozen
    }
}

impl fmt::Display for Core {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Core {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" | "f" => Ok(Core::Frozen),
            "t1" | "trainable1" => Ok(Core::Trainable1),
            "t2" | "trainable2" => Ok(Core::Trainable2),
            other => Err(Error::InvalidArgument(format!("unknown core {other:?}"))),
        }
    }
}

/// Subset of cores, used for ratio accounting and execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoreSet([bool; 3]);

impl CoreSet {
    pub const FROZEN: CoreSet = CoreSet([true, false, false]);
    pub const ONE_TRAINABLE: CoreSet = CoreSet([true, true, false]);
    pub const ALL: CoreSet = CoreSet([true, true, true]);

    pub fn of(cores: &[Core]) -> Self {
        let mut set = CoreSet::default();
        for c in cores {
            set.0[c.index()] = true;
        }
        set
    }

    pub fn contains(&self, core: Core) -> bool {
        self.0[core.index()]
    }

    pub fn insert(&mut self, core: Core) {
        self.0[core.index()] = true;
    }

    pub fn iter(&self) -> impl Iterator<Item = Core> + '_ {
        Core::ALL.into_iter().filter(|c| self.contains(*c))
    }
}

/// Declarative fixed topology of a SemifreddoNet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: TensorShape,
    pub stem: StemSpec,
    pub modules: Vec<SemifreddoModuleSpec>,
    /// How many trailing modules form the repeatable tail.
    pub tail_modules: usize,
    pub tail_repeat_count: usize,
    pub head: HeadSpec,
}

impl NetworkSpec {
    /// Reference backbone for VGA input: 32-channel stem, stages of 64/128/256
    /// channels, frozen core with 8 regular blocks per stage and trainable
    /// cores with one. The last four 256-channel frozen blocks form the
    /// repeatable tail module.
    pub fn default_backbone() -> Self {
        use BlockSpec::{ShuffleDownscale as D, ShuffleRegular as R};
        let stage = |frozen_regular: usize, trainable_regular: usize| {
            let mut frozen = vec![D];
            frozen.extend(std::iter::repeat(R).take(frozen_regular));
            let mut trainable = vec![D];
            trainable.extend(std::iter::repeat(R).take(trainable_regular));
            SemifreddoModuleSpec::new(frozen, trainable, true)
        };
        NetworkSpec {
            input: TensorShape::new(3, 480, 640),
            stem: StemSpec {
                out_channels: 32,
                stride: 2,
            },
            modules: vec![
                stage(8, 1),
                stage(8, 1),
                stage(4, 0),
                SemifreddoModuleSpec::new(vec![R; 4], vec![R], true),
            ],
            tail_modules: 1,
            tail_repeat_count: 1,
            head: HeadSpec {
                out_channels: 256,
                groups: 1,
                bias: true,
                global_pool: true,
                activation: None,
            },
        }
    }

    /// Narrow variant for 32x32 single-channel inputs (padded 28x28 digit
    /// images) that trains in seconds on one CPU core.
    pub fn desk(classes: usize) -> Self {
        use BlockSpec::{ShuffleDownscale as D, ShuffleRegular as R};
        NetworkSpec {
            input: TensorShape::new(1, 32, 32),
            stem: StemSpec {
                out_channels: 8,
                stride: 2,
            },
            modules: vec![
                SemifreddoModuleSpec::new(vec![D, R], vec![D], true),
                SemifreddoModuleSpec::new(vec![D, R], vec![D], true),
                SemifreddoModuleSpec::new(vec![D], vec![D], true),
                SemifreddoModuleSpec::new(vec![R, R], vec![R], true),
            ],
            tail_modules: 1,
            tail_repeat_count: 1,
            head: HeadSpec {
                out_channels: classes,
                groups: 1,
                bias: true,
                global_pool: true,
                activation: None,
            },
        }
    }

    pub fn with_repeats(&self, r: usize) -> Self {
        let mut spec = self.clone();
        spec.tail_repeat_count = r;
        spec
    }

    pub fn with_input(&self, input: TensorShape) -> Self {
        let mut spec = self.clone();
        spec.input = input;
        spec
    }

    /// Index of the first tail module.
    pub fn tail_start(&self) -> usize {
        self.modules.len().saturating_sub(self.tail_modules)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 over the compact JSON encoding. Binds weight bundles to specs.
    pub fn topology_hash(&self) -> TopologyHash {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        TopologyHash(Sha256::digest(&bytes).into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TopologyHash(pub [u8; 32]);

impl TopologyHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for TopologyHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for TopologyHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for TopologyHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("topology hash must be 32 bytes"))?;
        Ok(TopologyHash(arr))
    }
}

//! Encoders, heads, transform blocks and the fused inference graph.
//!
//! Three encoders see the data: the task-shared encoder (ordinary input, trained
//! to hallucinate the privileged representation), the privileged encoder and the
//! ordinary encoder (both pretrained). The fused path used at inference only ever
//! consumes the ordinary modality:
//!
//! ```text
//! x_o ─ shared ───┬─ T1 ─┐
//!                 └─ T2 ─┤
//! x_o ─ ordinary ─┬─ T1 ─┼─ concat ─ 1×1 conv ─ task head
//!                 └─ T2 ─┘
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Linear, Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each encoder stage.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Stride of each encoder stage.
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    /// Train the ordinary encoder and head during joint training instead of freezing them.
    #[serde(default)]
    pub fine_tune_ordinary: bool,
    /// Initialize the shared encoder from the ordinary pretraining snapshot.
    #[serde(default)]
    pub warm_start_shared: bool,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 16]
}

fn default_strides() -> Vec<usize> {
    vec![1, 2, 2]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: default_widths(),
            strides: default_strides(),
            fine_tune_ordinary: false,
            warm_start_shared: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "model: {} widths vs {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().chain(&self.strides).any(|&v| v == 0) {
            return Err(Error::Config("model: widths and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Shared,
    Privileged,
    Ordinary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub prefix: String,
    pub role: EncoderRole,
    pub in_channels: usize,
    pub stages: Vec<ConvBnRelu>,
}

impl Encoder {
    pub fn new(prefix: &str, role: EncoderRole, in_channels: usize, cfg: &ModelConfig) -> Self {
        let mut cin = in_channels;
        let stages = cfg
            .widths
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let st = ConvBnRelu::new(&format!("{}.stage{}", prefix, i), cin, w, 3, s);
                cin = w;
                st
            })
            .collect();
        Encoder {
            prefix: prefix.to_string(),
            role,
            in_channels,
            stages,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for st in &self.stages {
            st.init(store, rng);
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        let c = s.value(x).shape().get(1).copied();
        if c != Some(self.in_channels) {
            return Err(Error::structural(
                format!("{}.input", self.prefix),
                format!("expected {} channels, got {:?}", self.in_channels, s.value(x).shape()),
            ));
        }
        let mut h = x;
        for st in &self.stages {
            h = st.forward(s, h, mode)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadKind {
    /// Global average pooling then a linear layer: `[b, n]` logits.
    Pooled(Linear),
    /// 1×1 convolution then nearest upsampling: `[b, n, h, w]` logits.
    Dense { conv: Conv2d, upsample: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub prefix: String,
    pub kind: HeadKind,
}

impl Head {
    pub fn new(prefix: &str, task: TaskKind, in_channels: usize, n_classes: usize, upsample: usize) -> Self {
        let kind = match task {
            TaskKind::Classification => {
                HeadKind::Pooled(Linear::new(format!("{}.fc", prefix), in_channels, n_classes))
            }
            TaskKind::Segmentation => HeadKind::Dense {
                conv: Conv2d::new(format!("{}.conv", prefix), in_channels, n_classes, 1, 1),
                upsample,
            },
        };
        Head {
            prefix: prefix.to_string(),
            kind,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match &self.kind {
            HeadKind::Pooled(l) => l.init(store, rng),
            HeadKind::Dense { conv, .. } => conv.init(store, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, rep: Var) -> Result<Var> {
        match &self.kind {
            HeadKind::Pooled(l) => {
                let p = s.tape.global_avg_pool(rep)?;
                l.forward(s, p)
            }
            HeadKind::Dense { conv, upsample } => {
                let y = conv.forward(s, rep)?;
                s.tape.upsample_nearest(y, *upsample)
            }
        }
    }
}

/// A differentiable map applied to representations.
pub trait FeatureTransform {
    fn apply(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var>;
}

/// The map that leaves its input unchanged.
pub struct Identity;

impl FeatureTransform for Identity {
    fn apply(&self, _s: &mut Session, x: Var, _mode: Mode) -> Result<Var> {
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformId {
    T1,
    T2,
}

/// Channel-preserving 3×3 convolution, batch norm and ReLU, shared between the
/// hallucinated and ordinary representations.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBlock {
    pub id: TransformId,
    pub block: ConvBnRelu,
}

impl TransformBlock {
    pub fn new(prefix: &str, id: TransformId, channels: usize) -> Self {
        TransformBlock {
            id,
            block: ConvBnRelu::new(prefix, channels, channels, 3, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.block.init(store, rng);
    }

    /// Sets every parameter of the block (convolution and affine batch norm) to zero.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        for name in [
            self.block.conv.weight_name(),
            self.block.conv.bias_name(),
            format!("{}.gamma", self.block.bn.name),
            format!("{}.beta", self.block.bn.name),
        ] {
            store.get_mut(&name)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

impl FeatureTransform for TransformBlock {
    fn apply(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        self.block.forward(s, x, mode)
    }
}

/// Two-layer bottleneck convolutional auto-encoder (`C → C/2 → C`).
#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoder {
    pub encode: Conv2d,
    pub decode: Conv2d,
}

impl AutoEncoder {
    /// `width` defaults to half the channel count.
    pub fn new(prefix: &str, channels: usize, width: Option<usize>) -> Self {
        let mid = width.unwrap_or(channels / 2).max(1);
        AutoEncoder {
            encode: Conv2d::new(format!("{}.encode", prefix), channels, mid, 3, 1),
            decode: Conv2d::new(format!("{}.decode", prefix), mid, channels, 3, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.encode.init(store, rng);
        self.decode.init(store, rng);
    }
}

impl FeatureTransform for AutoEncoder {
    fn apply(&self, s: &mut Session, x: Var, _mode: Mode) -> Result<Var> {
        let h = self.encode.forward(s, x)?;
        let h = s.tape.relu(h);
        self.decode.forward(s, h)
    }
}

/// How the final prediction is assembled from the branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Shared transforms on both representations, concat, 1×1 conv, task head.
    CrossTranslation,
    /// Sum of the shared head's and the ordinary head's logits.
    LogitSum,
    /// Concat of the auto-encoded shared representation with the ordinary one.
    AutoEncoderConcat,
    /// The ordinary encoder and head alone.
    OrdinaryOnly,
}

/// Parameter-name prefixes of every sub-module, for trainable-set bookkeeping.
pub mod prefixes {
    pub const SHARED: &str = "shared.";
    pub const PRIVILEGED: &str = "privileged.";
    pub const ORDINARY: &str = "ordinary.";
    pub const HEAD_S: &str = "head_s.";
    pub const HEAD_P: &str = "head_p.";
    pub const HEAD_O: &str = "head_o.";
    pub const T1: &str = "t1.";
    pub const T2: &str = "t2.";
    pub const FUSION: &str = "fusion.";
    pub const TASK_HEAD: &str = "task_head.";
    pub const AE: &str = "ae.";
    pub const AE_FUSION: &str = "ae_fusion.";
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub task: TaskKind,
    pub n_classes: usize,
    pub config: ModelConfig,
    pub fusion_kind: FusionKind,
    pub shared: Encoder,
    pub privileged: Encoder,
    pub ordinary: Encoder,
    pub head_s: Head,
    pub head_p: Head,
    pub head_o: Head,
    pub t1: TransformBlock,
    pub t2: TransformBlock,
    pub fusion: Conv2d,
    pub task_head: Head,
    pub ae: AutoEncoder,
    pub ae_fusion: Conv2d,
}

/// Every intermediate of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainingOutputs {
    pub rep_s: Var,
    pub rep_p: Var,
    pub rep_o: Var,
    pub logits_s: Var,
    pub logits_p: Var,
    pub fused_logits: Var,
    /// `T1(rep_s)`, `T1(rep_o)`, `T2(rep_s)`, `T2(rep_o)`.
    pub transformed: [Var; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[b, n]` or `[b, n, h, w]`.
    pub logits: Tensor,
    /// Argmax per sample, or per position in `[b, h, w]` order.
    pub classes: Vec<usize>,
}

impl Prediction {
    /// Class probabilities per row (sample or position).
    pub fn probabilities(&self) -> Tensor {
        let rows = if self.logits.rank() == 4 {
            self.logits.nchw_to_rows()
        } else {
            self.logits.clone()
        };
        crate::autograd::softmax_rows(&rows)
    }
}

impl ModelGraph {
    pub fn new(
        task: TaskKind,
        n_classes: usize,
        ordinary_channels: usize,
        privileged_channels: usize,
        config: &ModelConfig,
        fusion_kind: FusionKind,
    ) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("model: need >= 2 classes, got {}", n_classes)));
        }
        let c = config.out_channels();
        let up = config.downsample();
        Ok(ModelGraph {
            task,
            n_classes,
            config: config.clone(),
            fusion_kind,
            shared: Encoder::new("shared", EncoderRole::Shared, ordinary_channels, config),
            privileged: Encoder::new("privileged", EncoderRole::Privileged, privileged_channels, config),
            ordinary: Encoder::new("ordinary", EncoderRole::Ordinary, ordinary_channels, config),
            head_s: Head::new("head_s", task, c, n_classes, up),
            head_p: Head::new("head_p", task, c, n_classes, up),
            head_o: Head::new("head_o", task, c, n_classes, up),
            t1: TransformBlock::new("t1", TransformId::T1, c),
            t2: TransformBlock::new("t2", TransformId::T2, c),
            fusion: Conv2d::new("fusion", 4 * c, c, 1, 1),
            task_head: Head::new("task_head", task, c, n_classes, up),
            ae: AutoEncoder::new("ae", c, None),
            ae_fusion: Conv2d::new("ae_fusion", 2 * c, c, 1, 1),
        })
    }

    /// Replaces the auto-encoder translator with one of bottleneck width `width`.
    pub fn with_ae_width(mut self, width: Option<usize>) -> Self {
        self.ae = AutoEncoder::new("ae", self.config.out_channels(), width);
        self
    }

    /// Fan-in-scaled random initialization of every sub-module, in a fixed order.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.shared.init(&mut store, rng);
        self.privileged.init(&mut store, rng);
        self.ordinary.init(&mut store, rng);
        self.head_s.init(&mut store, rng);
        self.head_p.init(&mut store, rng);
        self.head_o.init(&mut store, rng);
        self.t1.init(&mut store, rng);
        self.t2.init(&mut store, rng);
        self.fusion.init(&mut store, rng);
        self.task_head.init(&mut store, rng);
        self.ae.init(&mut store, rng);
        self.ae_fusion.init(&mut store, rng);
        store
    }

    pub fn ordinary_frozen(&self) -> bool {
        !self.config.fine_tune_ordinary
    }

    /// Privileged representation and logits from the frozen, pretrained branch.
    /// Both come back detached.
    pub fn privileged_branch(&self, s: &mut Session, x_p: Var) -> Result<(Var, Var)> {
        let rep = self.privileged.forward(s, x_p, Mode::Eval)?;
        let logits = self.head_p.forward(s, rep)?;
        Ok((s.tape.detach(rep), s.tape.detach(logits)))
    }

    /// Ordinary representation; detached and in evaluation mode when frozen.
    pub fn ordinary_rep(&self, s: &mut Session, x_o: Var, mode: Mode, frozen: bool) -> Result<Var> {
        if frozen {
            let rep = self.ordinary.forward(s, x_o, Mode::Eval)?;
            Ok(s.tape.detach(rep))
        } else {
            self.ordinary.forward(s, x_o, mode)
        }
    }

    /// Logits of the ordinary head; detached when `frozen`.
    pub fn ordinary_logits(&self, s: &mut Session, rep_o: Var, frozen: bool) -> Result<Var> {
        let l = self.head_o.forward(s, rep_o)?;
        Ok(if frozen { s.tape.detach(l) } else { l })
    }

    /// `[T1(rep_s), T1(rep_o), T2(rep_s), T2(rep_o)]`.
    pub fn transform_pairs(&self, s: &mut Session, rep_s: Var, rep_o: Var, mode: Mode) -> Result<[Var; 4]> {
        if s.value(rep_s).shape() != s.value(rep_o).shape() {
            return Err(Error::structural(
                "transform.input",
                format!(
                    "shared {:?} vs ordinary {:?}",
                    s.value(rep_s).shape(),
                    s.value(rep_o).shape()
                ),
            ));
        }
        let a = self.t1.apply(s, rep_s, mode)?;
        let b = self.t1.apply(s, rep_o, mode)?;
        let c = self.t2.apply(s, rep_s, mode)?;
        let d = self.t2.apply(s, rep_o, mode)?;
        Ok([a, b, c, d])
    }

    /// Fusion layer applied to the concatenated transformed features.
    pub fn fuse(&self, s: &mut Session, transformed: &[Var; 4]) -> Result<Var> {
        let cat = s.tape.concat(transformed)?;
        self.fusion.forward(s, cat)
    }

    /// One full training pass of the cross-translation graph.
    ///
    /// Modules outside `trainable` run in evaluation mode; the privileged branch is
    /// always detached, the ordinary branch when it is frozen.
    pub fn forward_training(
        &self,
        s: &mut Session,
        x_o: &Tensor,
        x_p: &Tensor,
        mode: Mode,
    ) -> Result<TrainingOutputs> {
        if x_o.leading() != x_p.leading() {
            return Err(Error::structural(
                "batch",
                format!("{} ordinary vs {} privileged samples", x_o.leading(), x_p.leading()),
            ));
        }
        let xo = s.input(x_o.clone());
        let xp = s.input(x_p.clone());
        let rep_s = self.shared.forward(s, xo, mode)?;
        let (rep_p, logits_p) = self.privileged_branch(s, xp)?;
        let rep_o = self.ordinary_rep(s, xo, mode, self.ordinary_frozen())?;
        if s.value(rep_s).shape() != s.value(rep_p).shape() {
            return Err(Error::structural(
                "shared->privileged",
                format!("{:?} vs {:?}", s.value(rep_s).shape(), s.value(rep_p).shape()),
            ));
        }
        let logits_s = self.head_s.forward(s, rep_s)?;
        let transformed = self.transform_pairs(s, rep_s, rep_o, mode)?;
        let fused = self.fuse(s, &transformed)?;
        let fused_logits = self.task_head.forward(s, fused)?;
        Ok(TrainingOutputs {
            rep_s,
            rep_p,
            rep_o,
            logits_s,
            logits_p,
            fused_logits,
            transformed,
        })
    }

    /// Logits of the inference path for this graph's fusion kind, all modules in
    /// evaluation mode.
    pub fn inference_logits(&self, s: &mut Session, x_o: Var) -> Result<Var> {
        match self.fusion_kind {
            FusionKind::CrossTranslation => {
                let rep_s = self.shared.forward(s, x_o, Mode::Eval)?;
                let rep_o = self.ordinary.forward(s, x_o, Mode::Eval)?;
                let t = self.transform_pairs(s, rep_s, rep_o, Mode::Eval)?;
                let fused = self.fuse(s, &t)?;
                self.task_head.forward(s, fused)
            }
            FusionKind::LogitSum => {
                let rep_s = self.shared.forward(s, x_o, Mode::Eval)?;
                let rep_o = self.ordinary.forward(s, x_o, Mode::Eval)?;
                let a = self.head_s.forward(s, rep_s)?;
                let b = self.head_o.forward(s, rep_o)?;
                s.tape.add(a, b)
            }
            FusionKind::AutoEncoderConcat => {
                let rep_s = self.shared.forward(s, x_o, Mode::Eval)?;
                let rep_o = self.ordinary.forward(s, x_o, Mode::Eval)?;
                let a = self.ae.apply(s, rep_s, Mode::Eval)?;
                let cat = s.tape.concat(&[a, rep_o])?;
                let fused = self.ae_fusion.forward(s, cat)?;
                self.task_head.forward(s, fused)
            }
            FusionKind::OrdinaryOnly => {
                let rep_o = self.ordinary.forward(s, x_o, Mode::Eval)?;
                self.head_o.forward(s, rep_o)
            }
        }
    }

    /// Prediction from the ordinary modality alone.
    pub fn forward_inference(&self, store: &ParamStore, x_o: &Tensor) -> Result<Prediction> {
        let mut s = Session::new(store);
        let xo = s.input(x_o.clone());
        let logits = self.inference_logits(&mut s, xo)?;
        let logits = s.value(logits).clone();
        let classes = if logits.rank() == 4 {
            logits.nchw_to_rows().argmax_rows()
        } else {
            logits.argmax_rows()
        };
        Ok(Prediction { logits, classes })
    }

    /// Inference entry point that enforces the ordinary-only contract.
    pub fn forward_inference_checked(
        &self,
        store: &ParamStore,
        x_o: &Tensor,
        x_p: Option<&Tensor>,
    ) -> Result<Prediction> {
        if x_p.is_some() {
            return Err(Error::Config(
                "inference takes the ordinary modality only; privileged input rejected".into(),
            ));
        }
        self.forward_inference(store, x_o)
    }
}

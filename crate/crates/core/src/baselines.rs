//! Comparison losses and the recipes of every ablation variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::ctn::mse;
use crate::error::{Error, Result};
use crate::jdn::conditional_kl_tempered;
use crate::model::{prefixes, FeatureTransform, FusionKind};
use crate::nn::{Mode, Session};

/// Softened KL from the privileged to the shared predictions, times `T²`.
pub fn response_kd_loss(tape: &mut Tape, logits_p: Var, logits_s: Var, temperature: f64) -> Result<Var> {
    let lp = tape.detach(logits_p);
    let kl = conditional_kl_tempered(tape, lp, logits_s, temperature)?;
    Ok(tape.scale(kl, temperature * temperature))
}

/// MSE between raw feature maps, the privileged side held constant.
pub fn feature_hint_loss(tape: &mut Tape, rep_s: Var, rep_p: Var) -> Result<Var> {
    if tape.value(rep_s).shape() != tape.value(rep_p).shape() {
        return Err(Error::structural(
            "feature_hint",
            format!("{:?} vs {:?}", tape.value(rep_s).shape(), tape.value(rep_p).shape()),
        ));
    }
    let rp = tape.detach(rep_p);
    mse(tape, rep_s, rp)
}

const COSINE_EPS: f64 = 1e-12;

fn cosine_gram(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.flatten(x)?;
    let n = tape.normalize_rows(rows, COSINE_EPS)?;
    tape.matmul_nt(n, n)
}

/// MSE between the `[b × b]` cosine-similarity matrices of the two batches.
/// Spatial maps are flattened per sample.
pub fn relation_kd_loss(tape: &mut Tape, rep_s: Var, rep_p: Var) -> Result<Var> {
    let (bs, bp) = (tape.value(rep_s).leading(), tape.value(rep_p).leading());
    if bs < 2 {
        return Err(Error::Config(format!("relation_kd: need b >= 2, got {}", bs)));
    }
    if tape.value(rep_s).row_len() != tape.value(rep_p).row_len() || bs != bp {
        return Err(Error::structural(
            "relation_kd",
            format!("{:?} vs {:?}", tape.value(rep_s).shape(), tape.value(rep_p).shape()),
        ));
    }
    let rp = tape.detach(rep_p);
    let gs = cosine_gram(tape, rep_s)?;
    let gp = cosine_gram(tape, rp)?;
    mse(tape, gs, gp)
}

/// MSE between the auto-encoded shared representation and the (constant) ordinary one.
pub fn autoencoder_translation_loss(
    s: &mut Session,
    rep_s: Var,
    rep_o: Var,
    ae: &dyn FeatureTransform,
    mode: Mode,
) -> Result<Var> {
    let out = ae.apply(s, rep_s, mode)?;
    if s.value(out).shape() != s.value(rep_o).shape() {
        return Err(Error::structural(
            "ae.output",
            format!("{:?} vs {:?}", s.value(out).shape(), s.value(rep_o).shape()),
        ));
    }
    let target = s.tape.detach(rep_o);
    mse(&mut s.tape, out, target)
}

pub fn logit_sum_fusion(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.add(a, b).map_err(|e| match e {
        Error::Structural { detail, .. } => Error::structural("logit_sum", detail),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    MinusJdn,
    MinusJdnPlusFkd,
    MinusJdnPlusRkd,
    MinusCtn,
    MinusCtnPlusAe,
    OrdinaryOnly,
    TwoStage,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::MinusJdn,
        Variant::MinusJdnPlusFkd,
        Variant::MinusJdnPlusRkd,
        Variant::MinusCtn,
        Variant::MinusCtnPlusAe,
        Variant::OrdinaryOnly,
        Variant::TwoStage,
    ];

    /// The rows of the ablation table, in order.
    pub const ABLATION: [Variant; 7] = [
        Variant::Full,
        Variant::MinusJdn,
        Variant::MinusJdnPlusFkd,
        Variant::MinusJdnPlusRkd,
        Variant::MinusCtn,
        Variant::MinusCtnPlusAe,
        Variant::OrdinaryOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MinusJdn => "minus_jdn",
            Variant::MinusJdnPlusFkd => "minus_jdn_plus_fkd",
            Variant::MinusJdnPlusRkd => "minus_jdn_plus_rkd",
            Variant::MinusCtn => "minus_ctn",
            Variant::MinusCtnPlusAe => "minus_ctn_plus_ae",
            Variant::OrdinaryOnly => "ordinary_only",
            Variant::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {:?}; expected one of {}", s, known.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub variant: Variant,
    /// Softening temperature of the response distillation stage.
    #[serde(default = "default_kd_temperature")]
    pub temperature: f64,
    /// Bottleneck width of the auto-encoder translator; half the representation width when unset.
    #[serde(default)]
    pub ae_width: Option<usize>,
}

fn default_kd_temperature() -> f64 {
    2.0
}

impl VariantSpec {
    pub fn new(variant: Variant) -> Self {
        VariantSpec {
            variant,
            temperature: default_kd_temperature(),
            ae_width: None,
        }
    }
}

/// One loss of a recipe. `Ttl` is the task loss on whatever logits the phase trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Jdn,
    Ctn,
    Ttl,
    FeatureHint,
    RelationKd,
    AeTranslation,
    ResponseKd,
}

impl LossTerm {
    /// Balance slot: transfer losses share α, translation losses share β.
    pub fn slot(self) -> Slot {
        match self {
            LossTerm::Jdn | LossTerm::FeatureHint | LossTerm::RelationKd | LossTerm::ResponseKd => Slot::Transfer,
            LossTerm::Ctn | LossTerm::AeTranslation => Slot::Translation,
            LossTerm::Ttl => Slot::Task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Transfer,
    Translation,
    Task,
}

/// Which logits the task loss is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtlTarget {
    /// The graph's inference path for its fusion kind.
    Inference,
    /// The shared head alone.
    SharedHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub losses: Vec<LossTerm>,
    pub ttl_target: TtlTarget,
    /// Parameter-name prefixes updated by the optimizer.
    pub trainable: Vec<String>,
    /// Whether the privileged encoder runs at all.
    pub uses_privileged: bool,
}

impl Phase {
    pub fn has(&self, l: LossTerm) -> bool {
        self.losses.contains(&l)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn transfer_loss(&self) -> Option<LossTerm> {
        self.losses.iter().copied().find(|l| l.slot() == Slot::Transfer)
    }

    pub fn translation_loss(&self) -> Option<LossTerm> {
        self.losses.iter().copied().find(|l| l.slot() == Slot::Translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub spec: VariantSpec,
    pub fusion_kind: FusionKind,
    pub phases: Vec<Phase>,
}

impl Recipe {
    /// SHA-256 of the recipe's canonical JSON.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("recipe serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Union of the losses over all phases.
    pub fn loss_set(&self) -> Vec<LossTerm> {
        let mut v: Vec<LossTerm> = self.phases.iter().flat_map(|p| p.losses.iter().copied()).collect();
        v.sort();
        v.dedup();
        v
    }
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Losses, wiring and trainable set for a variant. `fine_tune_ordinary` adds the
/// ordinary encoder (and its head where it feeds the prediction) to the trainable set.
pub fn build_variant(spec: &VariantSpec, fine_tune_ordinary: bool) -> Result<Recipe> {
    use prefixes::*;
    use LossTerm::*;
    if !(spec.temperature > 0.0 && spec.temperature.is_finite()) {
        return Err(Error::Config(format!("variant: temperature must be > 0, got {}", spec.temperature)));
    }
    if spec.ae_width == Some(0) {
        return Err(Error::Config("variant: ae_width must be >= 1".into()));
    }
    let ordinary: &[&str] = if fine_tune_ordinary { &[ORDINARY] } else { &[] };
    let ordinary_head: &[&str] = if fine_tune_ordinary { &[ORDINARY, HEAD_O] } else { &[] };
    let cross = [SHARED, HEAD_S, T1, T2, FUSION, TASK_HEAD];
    let phase = |name: &str, losses: Vec<LossTerm>, target, trainable: Vec<String>, uses_privileged| Phase {
        name: name.to_string(),
        losses,
        ttl_target: target,
        trainable,
        uses_privileged,
    };
    let joint = |losses: Vec<LossTerm>, own: &[&str], extra: &[&str]| {
        let priv_needed = losses.iter().any(|l| l.slot() == Slot::Transfer);
        let trainable = strs(&[own, extra].concat());
        vec![phase("joint", losses, TtlTarget::Inference, trainable, priv_needed)]
    };
    let (fusion_kind, phases) = match spec.variant {
        Variant::Full => (FusionKind::CrossTranslation, joint(vec![Jdn, Ctn, Ttl], &cross, ordinary)),
        Variant::MinusJdn => (FusionKind::CrossTranslation, joint(vec![Ctn, Ttl], &cross, ordinary)),
        Variant::MinusJdnPlusFkd => (
            FusionKind::CrossTranslation,
            joint(vec![FeatureHint, Ctn, Ttl], &cross, ordinary),
        ),
        Variant::MinusJdnPlusRkd => (
            FusionKind::CrossTranslation,
            joint(vec![RelationKd, Ctn, Ttl], &cross, ordinary),
        ),
        Variant::MinusCtn => (FusionKind::LogitSum, joint(vec![Jdn, Ttl], &[SHARED, HEAD_S], ordinary_head)),
        Variant::MinusCtnPlusAe => (
            FusionKind::AutoEncoderConcat,
            joint(
                vec![Jdn, AeTranslation, Ttl],
                &[SHARED, HEAD_S, AE, AE_FUSION, TASK_HEAD],
                ordinary,
            ),
        ),
        Variant::OrdinaryOnly => (
            FusionKind::OrdinaryOnly,
            vec![phase("ordinary", vec![Ttl], TtlTarget::Inference, strs(&[ORDINARY, HEAD_O]), false)],
        ),
        Variant::TwoStage => (
            FusionKind::LogitSum,
            vec![
                phase(
                    "hallucination",
                    vec![ResponseKd, Ttl],
                    TtlTarget::SharedHead,
                    strs(&[SHARED, HEAD_S]),
                    true,
                ),
                phase("fusion", vec![Ttl], TtlTarget::Inference, strs(&[HEAD_O]), false),
            ],
        ),
    };
    Ok(Recipe {
        spec: *spec,
        fusion_kind,
        phases,
    })
}

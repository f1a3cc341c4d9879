//! Cross translation objective: shared transforms applied to the hallucinated and
//! ordinary representations, with a mean-squared reconstruction loss per pair.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::FeatureTransform;
use crate::nn::{Conv2d, Mode, Session};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtnTerms {
    pub l_t1: f64,
    pub l_t2: f64,
    pub l_ctn: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CtnOutput {
    pub loss: Var,
    pub terms: CtnTerms,
}

/// Mean over all elements of `(a − b)²`.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Loss from already-transformed features `[T1(s), T1(o), T2(s), T2(o)]`.
pub fn ctn_from_transformed(tape: &mut Tape, t: &[Var; 4]) -> Result<CtnOutput> {
    let l1 = mse(tape, t[0], t[1])?;
    let l2 = mse(tape, t[2], t[3])?;
    let loss = tape.add(l1, l2)?;
    let terms = CtnTerms {
        l_t1: tape.value(l1).item(),
        l_t2: tape.value(l2).item(),
        l_ctn: tape.value(loss).item(),
    };
    Ok(CtnOutput { loss, terms })
}

fn check_pair(s: &Session, rep_s: Var, rep_o: Var, edge: &str) -> Result<()> {
    if s.value(rep_s).shape() != s.value(rep_o).shape() {
        return Err(Error::structural(
            edge,
            format!("{:?} vs {:?}", s.value(rep_s).shape(), s.value(rep_o).shape()),
        ));
    }
    Ok(())
}

fn transformed(
    s: &mut Session,
    rep_s: Var,
    rep_o: Var,
    t1: &dyn FeatureTransform,
    t2: &dyn FeatureTransform,
    mode: Mode,
) -> Result<[Var; 4]> {
    Ok([
        t1.apply(s, rep_s, mode)?,
        t1.apply(s, rep_o, mode)?,
        t2.apply(s, rep_s, mode)?,
        t2.apply(s, rep_o, mode)?,
    ])
}

/// `MSE(T1(rep_s), T1(rep_o)) + MSE(T2(rep_s), T2(rep_o))`. Nothing is detached:
/// gradients reach both transforms and both representations.
pub fn ctn_loss(
    s: &mut Session,
    rep_s: Var,
    rep_o: Var,
    t1: &dyn FeatureTransform,
    t2: &dyn FeatureTransform,
    mode: Mode,
) -> Result<CtnOutput> {
    check_pair(s, rep_s, rep_o, "ctn.input")?;
    let t = transformed(s, rep_s, rep_o, t1, t2, mode)?;
    ctn_from_transformed(&mut s.tape, &t)
}

/// `fusion(concat[T1(rep_s), T1(rep_o), T2(rep_s), T2(rep_o)])`.
pub fn fuse_features(
    s: &mut Session,
    rep_s: Var,
    rep_o: Var,
    t1: &dyn FeatureTransform,
    t2: &dyn FeatureTransform,
    fusion: &Conv2d,
    mode: Mode,
) -> Result<Var> {
    check_pair(s, rep_s, rep_o, "fusion.input")?;
    let t = transformed(s, rep_s, rep_o, t1, t2, mode)?;
    let cat = s.tape.concat(&t)?;
    fusion.forward(s, cat)
}

/// Mean absolute value of `T1(rep_o)` and `T2(rep_o)`; near zero means the
/// transforms have collapsed onto the trivial solution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    pub t1_ordinary: f64,
    pub t2_ordinary: f64,
}

impl CollapseStats {
    pub fn from_transformed(tape: &Tape, t: &[Var; 4]) -> Self {
        let mean_abs = |v: Var| {
            let x = tape.value(v);
            x.data().iter().map(|a| a.abs()).sum::<f64>() / x.numel().max(1) as f64
        };
        CollapseStats {
            t1_ordinary: mean_abs(t[1]),
            t2_ordinary: mean_abs(t[3]),
        }
    }

    pub fn min(&self) -> f64 {
        self.t1_ordinary.min(self.t2_ordinary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Identity;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn identity_transforms_hand_value() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let a = s.input(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = s.input(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let out = ctn_loss(&mut s, a, b, &Identity, &Identity, Mode::Train).unwrap();
        assert_eq!(out.terms.l_t1, 0.5);
        assert_eq!(out.terms.l_t2, 0.5);
        assert_eq!(out.terms.l_ctn, 1.0);
    }

    #[test]
    fn mismatched_shapes_are_structural() {
        let store = ParamStore::new();
        let mut s = Session::new(&store);
        let a = s.input(Tensor::zeros(&[1, 2]));
        let b = s.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            ctn_loss(&mut s, a, b, &Identity, &Identity, Mode::Train),
            Err(Error::Structural { .. })
        ));
    }
}

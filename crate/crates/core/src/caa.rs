//! Class augmented attention with embedded class channel recalibration.
//!
//! A reduced feature `X′` is correlated with the class probability maps
//! `softmax(P)` to give the channel-to-class affinity `A`; each reduced
//! channel is then rebuilt as an `A`-weighted mix of the class maps, lifted
//! back to `C` channels and added to the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_weight, Conv2d, ConvBnRelu, ParamId, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

/// Default ascending ratio of the class channel gate.
pub const DEFAULT_ALPHA: usize = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaaParams {
    /// `X → X′`, `C → C′`.
    pub reduce: ConvBnRelu,
    /// `X → P`, `C → N` class logits.
    pub class_head: Conv2d,
    /// Lifts the `C′`-channel context back to `C`.
    pub delta: ConvBnRelu,
    pub rho: ConvBnRelu,
    pub channels: usize,
    pub reduced: usize,
    pub classes: usize,
}

impl CaaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduced: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduced >= channels || reduced == 0 {
            return Err(Error::usage(format!(
                "reduced width {reduced} must be in 1..{channels}"
            )));
        }
        if classes < 2 {
            return Err(Error::usage("class attention needs at least two classes"));
        }
        Ok(CaaParams {
            reduce: ConvBnRelu::new(store, &format!("{name}.reduce"), channels, reduced, 1, 1, rng),
            class_head: Conv2d::new(
                store,
                &format!("{name}.class_head"),
                channels,
                classes,
                1,
                1,
                true,
                rng,
            ),
            delta: ConvBnRelu::new(store, &format!("{name}.delta"), reduced, channels, 1, 1, rng),
            rho: ConvBnRelu::new(store, &format!("{name}.rho"), channels, channels, 1, 1, rng),
            channels,
            reduced,
            classes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CcaParams {
    /// `[αN, N]`
    pub w1: ParamId,
    /// `[N, αN]`
    pub w2: ParamId,
    pub gamma: ParamId,
    pub alpha: usize,
    pub classes: usize,
}

impl CcaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        alpha: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if alpha == 0 {
            return Err(Error::usage("ascending ratio must be positive"));
        }
        let wide = alpha * classes;
        Ok(CcaParams {
            w1: store.add(
                format!("{name}.w1"),
                init_weight(&[wide, classes], classes, rng),
                true,
            ),
            w2: store.add(format!("{name}.w2"), init_weight(&[classes, wide], wide, rng), true),
            gamma: store.add(format!("{name}.gamma"), Tensor::scalar(0.0), true),
            alpha,
            classes,
        })
    }

    pub fn set_gamma(&self, store: &mut ParamStore, gamma: f64) {
        *store.get_mut(self.gamma) = Tensor::new(&[1], vec![gamma], DType::F64).expect("scalar");
    }
}

/// Pre-softmax scores `S` and row-normalized affinity `A`, both `[B,C′,N]`.
#[derive(Clone, Copy, Debug)]
pub struct ClassAffinity {
    pub scores: Var,
    pub affinity: Var,
}

/// `[B,N,H,W]` class logits → `[B,N,HW]` per-pixel class probabilities.
pub fn class_probabilities(tape: &mut Tape, p: Var) -> Result<Var> {
    let d = tape.dims(p).to_vec();
    if d.len() != 4 || d[1] < 2 {
        return Err(Error::shape(format!(
            "class attention map must be [B,N,H,W] with N ≥ 2, got {d:?}"
        )));
    }
    let q = tape.softmax(p, 1)?;
    tape.reshape(q, &[d[0], d[1], d[2] * d[3]])
}

/// `S[b,u,k] = Σ_i xr[b,u,i] · softmax_k(p)[b,k,i]`, `A = softmax_k(S)`.
pub fn class_affinity(tape: &mut Tape, xr: Var, p: Var) -> Result<ClassAffinity> {
    let (xd, pd) = (tape.dims(xr).to_vec(), tape.dims(p).to_vec());
    if xd.len() != 4 || pd.len() != 4 || xd[0] != pd[0] || xd[2..] != pd[2..] {
        return Err(Error::shape(format!(
            "class_affinity: features {xd:?} and class map {pd:?} disagree"
        )));
    }
    let q = class_probabilities(tape, p)?;
    let x3 = tape.reshape(xr, &[xd[0], xd[1], xd[2] * xd[3]])?;
    let q_t = tape.permute(q, &[0, 2, 1])?;
    let scores = tape.bmm(x3, q_t)?;
    let affinity = tape.softmax(scores, 2)?;
    Ok(ClassAffinity { scores, affinity })
}

/// Class channel gate `sigmoid(W2 · relu(W1 · GAP(softmax(p))))`, `[B,N]`.
pub fn cca_gate(s: &mut Session, p: Var, params: &CcaParams) -> Result<Var> {
    let pd = s.tape.dims(p).to_vec();
    if pd.len() != 4 || pd[1] != params.classes {
        return Err(Error::shape(format!(
            "cca_gate: class map {pd:?} does not have {} classes",
            params.classes
        )));
    }
    let q = s.tape.softmax(p, 1)?;
    let pooled = s.tape.global_avg_pool(q)?;
    let w1 = s.param(params.w1);
    let w1t = s.tape.permute(w1, &[1, 0])?;
    let hidden = s.tape.matmul(pooled, w1t)?;
    let hidden = s.tape.relu(hidden);
    let w2 = s.param(params.w2);
    let w2t = s.tape.permute(w2, &[1, 0])?;
    let gate = s.tape.matmul(hidden, w2t)?;
    Ok(s.tape.sigmoid(gate))
}

/// `A′[b,u,k] = softmax_k((γ·w[b,k] + 1) · A[b,u,k])`.
pub fn recalibrate_affinity(tape: &mut Tape, affinity: Var, w: Var, gamma: Var) -> Result<Var> {
    let (ad, wd) = (tape.dims(affinity).to_vec(), tape.dims(w).to_vec());
    if ad.len() != 3 || wd != [ad[0], ad[2]] {
        return Err(Error::shape(format!(
            "recalibrate_affinity: gate {wd:?} does not match affinity {ad:?}"
        )));
    }
    let scaled = tape.scale(w, gamma)?;
    let factor = tape.add_const(scaled, 1.0);
    let factor = tape.reshape(factor, &[ad[0], 1, ad[2]])?;
    let weighted = tape.mul_bcast(affinity, factor)?;
    tape.softmax(weighted, 2)
}

#[derive(Clone, Copy, Debug)]
pub struct CaaOutput {
    pub y: Var,
    pub class_logits: Var,
    pub affinity: ClassAffinity,
    /// The affinity used for reconstruction (recalibrated when the gate is on).
    pub used_affinity: Var,
    pub context: Var,
}

pub fn caa_forward(
    s: &mut Session,
    x: Var,
    caa: &CaaParams,
    cca: &CcaParams,
    use_cca: bool,
) -> Result<CaaOutput> {
    let d = s.tape.dims(x).to_vec();
    if d.len() != 4 || d[1] != caa.channels {
        return Err(Error::shape(format!(
            "caa_forward: expected [B,{},H,W], got {d:?}",
            caa.channels
        )));
    }
    let xr = caa.reduce.forward(s, x)?;
    let p = caa.class_head.forward(s, x)?;
    let affinity = class_affinity(&mut s.tape, xr, p)?;
    let used = if use_cca {
        let gate = cca_gate(s, p, cca)?;
        let gamma = s.param(cca.gamma);
        recalibrate_affinity(&mut s.tape, affinity.affinity, gate, gamma)?
    } else {
        affinity.affinity
    };
    let q = class_probabilities(&mut s.tape, p)?;
    let context = s.tape.bmm(used, q)?;
    let context = s.tape.reshape(context, &[d[0], caa.reduced, d[2], d[3]])?;
    let lifted = caa.delta.forward(s, context)?;
    let sum = s.tape.add(lifted, x)?;
    let y = caa.rho.forward(s, sum)?;
    Ok(CaaOutput {
        y,
        class_logits: p,
        affinity,
        used_affinity: used,
        context,
    })
}

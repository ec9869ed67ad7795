//! Dense self-attention over every pixel, the baseline RSA is measured against.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::rsa::{sparse_self_attention, RsaStageParams};
use crate::tape::Var;

/// Same transforms as one RSA stage (`θ`, `φ` at `d = C/4`, `g` keeping `C`),
/// applied to all `HW` pixels at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaParams {
    pub stage: RsaStageParams,
    pub channels: usize,
}

impl SaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let key_dim = (channels / 4).max(1);
        SaParams {
            stage: RsaStageParams::new(store, name, channels, key_dim, rng),
            channels,
        }
    }
}

/// Returns the `[B,C,H,W]` output and the `[B,HW,HW]` affinity.
pub fn sa_forward(s: &mut Session, x: Var, params: &SaParams) -> Result<(Var, Var)> {
    let d = s.tape.dims(x).to_vec();
    if d.len() != 4 || d[1] != params.channels {
        return Err(Error::shape(format!(
            "sa_forward: expected [B,{},H,W], got {d:?}",
            params.channels
        )));
    }
    let tokens = s.tape.reshape(x, &[d[0], d[1], d[2] * d[3]])?;
    let (am, zm) = sparse_self_attention(s, tokens, &params.stage)?;
    let out = s.tape.reshape(zm, &d)?;
    Ok((out, am))
}

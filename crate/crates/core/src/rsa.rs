//! Region shuffle attention.
//!
//! The feature plane is cut into `G = G_h·G_w` regions of `P = P_h·P_w`
//! pixels. Stage one pools every region to a token, runs self-attention over
//! the `G` tokens and scales each region by its attended token. The regions
//! are then regrouped so that group `p` collects the pixel at offset `p` of
//! every region, and the same block runs over the `P` groups. Inverse
//! permutations restore the `[B,C,H,W]` layout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{on_tokens, Conv2d, ConvBnRelu, ParamId, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

/// Region geometry: a `G_h × G_w` grid of `P_h × P_w` pixel regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PartitionSpec {
    pub gh: usize,
    pub gw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PartitionSpec {
    pub const fn new(gh: usize, gw: usize, ph: usize, pw: usize) -> Self {
        PartitionSpec { gh, gw, ph, pw }
    }

    /// Grid of `gh × gw` regions over an `h × w` plane.
    pub fn from_grid(h: usize, w: usize, gh: usize, gw: usize) -> Result<Self> {
        if gh == 0 || gw == 0 || !h.is_multiple_of(gh) || !w.is_multiple_of(gw) {
            return Err(Error::Partition(format!(
                "{h}x{w} is not divisible into a {gh}x{gw} grid"
            )));
        }
        Ok(PartitionSpec::new(gh, gw, h / gh, w / gw))
    }

    pub fn regions(&self) -> usize {
        self.gh * self.gw
    }

    pub fn region_size(&self) -> usize {
        self.ph * self.pw
    }

    pub fn height(&self) -> usize {
        self.gh * self.ph
    }

    pub fn width(&self) -> usize {
        self.gw * self.pw
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if [self.gh, self.gw, self.ph, self.pw].contains(&0)
            || self.height() != h
            || self.width() != w
        {
            return Err(Error::Partition(format!(
                "partition {}x{} regions of {}x{} does not tile {h}x{w}",
                self.gh, self.gw, self.ph, self.pw
            )));
        }
        Ok(())
    }
}

/// Flat source index in `[B,C,H,W]` for each element of `[B,C,G,P]`.
fn partition_index(bc: usize, spec: &PartitionSpec) -> Vec<usize> {
    let (h, w) = (spec.height(), spec.width());
    let mut index = Vec::with_capacity(bc * h * w);
    for p in 0..bc {
        for gy in 0..spec.gh {
            for gx in 0..spec.gw {
                for py in 0..spec.ph {
                    for px in 0..spec.pw {
                        index.push(p * h * w + (gy * spec.ph + py) * w + gx * spec.pw + px);
                    }
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (i, &j) in index.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `[B,C,H,W] → [B,C,G,P]`, region-major with row-major order inside regions.
pub fn partition_regions(tape: &mut Tape, x: Var, spec: &PartitionSpec) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d.len() != 4 {
        return Err(Error::shape(format!("partition expects [B,C,H,W], got {d:?}")));
    }
    spec.check(d[2], d[3])?;
    let index = partition_index(d[0] * d[1], spec);
    tape.gather(x, index, &[d[0], d[1], spec.regions(), spec.region_size()])
}

/// Inverse of [`partition_regions`].
pub fn unpartition_regions(tape: &mut Tape, xg: Var, spec: &PartitionSpec) -> Result<Var> {
    let d = tape.dims(xg).to_vec();
    if d.len() != 4 || d[2] != spec.regions() || d[3] != spec.region_size() {
        return Err(Error::shape(format!(
            "unpartition expects [B,C,{},{}], got {d:?}",
            spec.regions(),
            spec.region_size()
        )));
    }
    let index = invert(&partition_index(d[0] * d[1], spec));
    tape.gather(xg, index, &[d[0], d[1], spec.height(), spec.width()])
}

/// Mean over the within-region axis: `[B,C,G,P] → [B,C,G]`.
pub fn merge_regions(tape: &mut Tape, xg: Var) -> Result<Var> {
    if tape.dims(xg).len() != 4 {
        return Err(Error::shape("merge_regions expects [B,C,G,P]"));
    }
    tape.mean_axis(xg, 3)
}

/// `out[b,c,g,p] = zm[b,c,g] · xg[b,c,g,p]`.
pub fn region_weight(tape: &mut Tape, zm: Var, xg: Var) -> Result<Var> {
    let (zd, xd) = (tape.dims(zm).to_vec(), tape.dims(xg).to_vec());
    if zd.len() != 3 || xd.len() != 4 || zd[..] != xd[..3] {
        return Err(Error::shape(format!(
            "region_weight: weights {zd:?} do not match regions {xd:?}"
        )));
    }
    let z4 = tape.reshape(zm, &[zd[0], zd[1], zd[2], 1])?;
    tape.mul_bcast(xg, z4)
}

/// Offset-interleave regrouping `[B,C,G,P] → [B,C,P,G]`: new group `p`
/// holds the offset-`p` pixel of every region. Applying it to the result
/// (whose group and member axes are swapped) restores the input.
pub fn shuffle_regroup(tape: &mut Tape, xg: Var) -> Result<Var> {
    if tape.dims(xg).len() != 4 {
        return Err(Error::shape("shuffle_regroup expects [B,C,G,P]"));
    }
    tape.permute(xg, &[0, 1, 3, 2])
}

/// Parameters of one attention stage over pooled tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RsaStageParams {
    pub theta: ConvBnRelu,
    pub phi: ConvBnRelu,
    pub g: Conv2d,
    /// Residual mixing scalar, initialized to 0.
    pub w: ParamId,
    pub key_dim: usize,
}

impl RsaStageParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Self {
        RsaStageParams {
            theta: ConvBnRelu::new(store, &format!("{name}.theta"), channels, key_dim, 1, 1, rng),
            phi: ConvBnRelu::new(store, &format!("{name}.phi"), channels, key_dim, 1, 1, rng),
            g: Conv2d::new(store, &format!("{name}.g"), channels, channels, 1, 1, true, rng),
            w: store.add(format!("{name}.w"), Tensor::scalar(0.0), true),
            key_dim,
        }
    }
}

/// Independent parameters for the two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RsaParams {
    pub stages: [RsaStageParams; 2],
    pub channels: usize,
}

impl RsaParams {
    /// Key width defaults to a quarter of the channels.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let key_dim = (channels / 4).max(1);
        RsaParams {
            stages: [
                RsaStageParams::new(store, &format!("{name}.stage1"), channels, key_dim, rng),
                RsaStageParams::new(store, &format!("{name}.stage2"), channels, key_dim, rng),
            ],
            channels,
        }
    }
}

/// Non-local attention over `[B,C,G]` tokens.
///
/// Returns the `[B,G,G]` affinity (rows index queries and sum to one) and
/// `zm = w · aggregate + xm`, where `aggregate[c,i] = Σ_j g(xm)[c,j]·am[i,j]`.
pub fn sparse_self_attention(
    s: &mut Session,
    xm: Var,
    stage: &RsaStageParams,
) -> Result<(Var, Var)> {
    let d = s.tape.dims(xm).to_vec();
    if d.len() != 3 {
        return Err(Error::shape(format!("attention tokens must be [B,C,G], got {d:?}")));
    }
    let theta = on_tokens(s, xm, |s, x| stage.theta.forward(s, x))?;
    let phi = on_tokens(s, xm, |s, x| stage.phi.forward(s, x))?;
    let gx = on_tokens(s, xm, |s, x| stage.g.forward(s, x))?;
    let theta_t = s.tape.permute(theta, &[0, 2, 1])?;
    let logits = s.tape.bmm(theta_t, phi)?;
    let logits = s.tape.scale_const(logits, 1.0 / (stage.key_dim as f64).sqrt());
    let am = s.tape.softmax(logits, 2)?;
    let am_t = s.tape.permute(am, &[0, 2, 1])?;
    let agg = s.tape.bmm(gx, am_t)?;
    let w = s.param(stage.w);
    let scaled = s.tape.scale(agg, w)?;
    let zm = s.tape.add(scaled, xm)?;
    Ok((am, zm))
}

/// Intermediate values of one [`rsa_forward`] call.
#[derive(Clone, Copy, Debug)]
pub struct RsaOutput {
    pub out: Var,
    pub merged: [Var; 2],
    pub attention: [Var; 2],
    pub weighted_tokens: [Var; 2],
}

pub fn rsa_forward(
    s: &mut Session,
    x: Var,
    spec: &PartitionSpec,
    params: &RsaParams,
) -> Result<RsaOutput> {
    let xg = partition_regions(&mut s.tape, x, spec)?;

    let xm1 = merge_regions(&mut s.tape, xg)?;
    let (am1, zm1) = sparse_self_attention(s, xm1, &params.stages[0])?;
    let weighted = region_weight(&mut s.tape, zm1, xg)?;

    let xs = shuffle_regroup(&mut s.tape, weighted)?;
    let xm2 = merge_regions(&mut s.tape, xs)?;
    let (am2, zm2) = sparse_self_attention(s, xm2, &params.stages[1])?;
    let weighted2 = region_weight(&mut s.tape, zm2, xs)?;

    let regions = shuffle_regroup(&mut s.tape, weighted2)?;
    let out = unpartition_regions(&mut s.tape, regions, spec)?;
    Ok(RsaOutput {
        out,
        merged: [xm1, xm2],
        attention: [am1, am2],
        weighted_tokens: [zm1, zm2],
    })
}

/// Affinity-product cost of region shuffle attention against dense
/// self-attention, in the closed form `2·(1/(G_h²G_w²) + 1/(P_h²P_w²))·(HW)²·C`
/// versus `(HW)²·C`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionFlops {
    pub rsa: f64,
    pub sa: f64,
    pub ratio: f64,
    /// Multiply-accumulates of the four affinity products (query·key and
    /// aggregation, both stages) at key and value width `C`.
    pub rsa_term_by_term: f64,
    /// The same count for dense attention, `2·(HW)²·C`.
    pub sa_term_by_term: f64,
}

pub fn rsa_attention_flops(spec: &PartitionSpec, h: usize, w: usize, c: usize) -> Result<AttentionFlops> {
    spec.check(h, w)?;
    let hw = (h * w) as f64;
    let c = c as f64;
    let g = spec.regions() as f64;
    let p = spec.region_size() as f64;
    let sa = hw * hw * c;
    let rsa = 2.0 * (1.0 / (g * g) + 1.0 / (p * p)) * hw * hw * c;
    let stage = |tokens: f64| 2.0 * tokens * tokens * c;
    Ok(AttentionFlops {
        rsa,
        sa,
        ratio: rsa / sa,
        rsa_term_by_term: stage(g) + stage(p),
        sa_term_by_term: stage(hw),
    })
}

/// Sets the residual scalars of both stages (tests and ablations).
pub fn set_stage_weights(store: &mut ParamStore, params: &RsaParams, w: [f64; 2]) {
    for (stage, v) in params.stages.iter().zip(w) {
        *store.get_mut(stage.w) = Tensor::new(&[1], vec![v], DType::F64).expect("scalar");
    }
}

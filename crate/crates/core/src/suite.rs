//! Seeded finite-difference checks of every tape op and every composed
//! module. Each case draws its own random shapes from `(case, seed)`.
//!
//! Outputs are weighted by fixed random cotangents rather than summed, which
//! keeps most gradient entries well above the finite-difference noise floor.
//! The learnable residual scalars (`γ`, stage `w`) are set nonzero so the
//! paths they gate are exercised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caa::{caa_forward, cca_gate, CaaParams, CcaParams};
use crate::error::Result;
use crate::gradcheck::{vjp_check, GradCheckOptions};
use crate::network::{build, set_mixing_scalars, LossWeights, NetConfig};
use crate::params::{ParamId, ParamStore, Session};
use crate::rsa::{partition_regions, rsa_forward, set_stage_weights, shuffle_regroup, PartitionSpec, RsaParams};
use crate::sa::{sa_forward, SaParams};
use crate::tape::{BnRunning, Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SHAPES_PER_CASE: usize = 20;

pub const OP_CASES: &[&str] = &[
    "matmul",
    "bmm",
    "softmax",
    "relu",
    "sigmoid",
    "conv2d_1x1",
    "conv2d_3x3",
    "batchnorm_train",
    "batchnorm_eval",
    "global_avg_pool",
    "region_pool",
    "concat_channels",
    "add",
    "mul",
    "add_bcast",
    "mul_bcast",
    "scale",
    "scale_add_const",
    "permute",
    "reshape",
    "mean_axis",
    "sum_mean",
    "upsample_nearest",
    "cross_entropy",
    "partition_shuffle",
];

pub const MODULE_CASES: &[&str] = &["caa", "cca_gate", "caa_cca", "rsa", "sa", "network_16", "network_32"];

pub fn all_cases() -> Vec<&'static str> {
    OP_CASES.iter().chain(MODULE_CASES).copied().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub case: &'static str,
    pub seed: u64,
    pub shape: String,
    pub rel_err: f64,
    pub coords: usize,
    /// Input index, coordinate, analytic and numeric value at the worst point.
    pub worst: (usize, usize, f64, f64),
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

fn case_seed(case: &str, seed: u64) -> u64 {
    // FNV-1a over the name keeps per-case streams independent
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, 1.0, rng).expect("valid dims")
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>>;

struct Case {
    shape: String,
    inputs: Vec<Tensor>,
    f: CaseFn,
    cotangents: Vec<Tensor>,
    coords: Option<usize>,
}

fn scalar_case<F>(shape: String, inputs: Vec<Tensor>, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    Case {
        shape,
        inputs,
        f: Box::new(move |t, v| Ok(vec![f(t, v)?])),
        cotangents: vec![Tensor::scalar(1.0)],
        coords: None,
    }
}

fn op_case<F>(shape: String, inputs: Vec<Tensor>, out_dims: Vec<usize>, rng: &mut ChaCha8Rng, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    Case {
        shape,
        inputs,
        f: Box::new(move |t, v| Ok(vec![f(t, v)?])),
        cotangents: vec![randn(&out_dims, rng)],
        coords: None,
    }
}

/// Checks a module with its input as `vars[0]` and every trainable
/// parameter of `store` bound to the following vars.
fn module_case<F>(shape: String, x: Tensor, store: ParamStore, cotangents: Vec<Tensor>, coords: usize, f: F) -> Case
where
    F: Fn(&mut Session, Var) -> Result<Vec<Var>> + 'static,
{
    let ids: Vec<ParamId> = store.trainable_ids();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    Case {
        shape,
        inputs,
        f: Box::new(move |tape, vars| {
            let mut local = store.clone();
            let t = std::mem::take(tape);
            let mut s = Session::with_tape(&mut local, t, true);
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                s.bind(id, v);
            }
            let out = f(&mut s, vars[0]);
            *tape = s.into_tape();
            out
        }),
        cotangents,
        coords: Some(coords),
    }
}

fn make_case(case: &str, rng: &mut ChaCha8Rng) -> Case {
    macro_rules! d {
        ($lo:expr, $hi:expr) => {
            rng.random_range($lo..=$hi)
        };
    }
    match case {
        "matmul" => {
            let (m, k, n) = (d!(1, 6), d!(1, 6), d!(1, 6));
            let inputs = vec![randn(&[m, k], rng), randn(&[k, n], rng)];
            op_case(format!("{m}x{k}·{k}x{n}"), inputs, vec![m, n], rng, |t, v| t.matmul(v[0], v[1]))
        }
        "bmm" => {
            let (b, m, k, n) = (d!(1, 3), d!(1, 5), d!(1, 5), d!(1, 5));
            let inputs = vec![randn(&[b, m, k], rng), randn(&[b, k, n], rng)];
            op_case(format!("{b}x{m}x{k}·{k}x{n}"), inputs, vec![b, m, n], rng, |t, v| t.bmm(v[0], v[1]))
        }
        "softmax" => {
            let rank = d!(2, 4);
            let dims: Vec<usize> = (0..rank).map(|_| d!(1, 4)).collect();
            let axis = d!(0, rank - 1);
            let inputs = vec![randn(&dims, rng)];
            op_case(format!("{dims:?} axis {axis}"), inputs, dims, rng, move |t, v| t.softmax(v[0], axis))
        }
        "relu" | "sigmoid" => {
            let dims = vec![d!(1, 3), d!(1, 4), d!(1, 4)];
            let inputs = vec![randn(&dims, rng)];
            let relu = case == "relu";
            op_case(format!("{dims:?}"), inputs, dims, rng, move |t, v| {
                Ok(if relu { t.relu(v[0]) } else { t.sigmoid(v[0]) })
            })
        }
        "conv2d_1x1" | "conv2d_3x3" => {
            let k = if case == "conv2d_1x1" { 1 } else { 3 };
            let (b, cin, cout, h, w) = (d!(1, 2), d!(1, 3), d!(1, 3), d!(1, 6), d!(1, 6));
            let stride = d!(1, 2);
            let pad = k / 2;
            let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let inputs = vec![randn(&[b, cin, h, w], rng), randn(&[cout, cin, k, k], rng)];
            op_case(
                format!("[{b},{cin},{h},{w}] k{k} s{stride} → {cout}"),
                inputs,
                vec![b, cout, ho, wo],
                rng,
                move |t, v| t.conv2d(v[0], v[1], stride, pad),
            )
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let training = case == "batchnorm_train";
            let dims = vec![d!(1, 3), d!(1, 3), d!(1, 4), d!(2, 4)];
            let c = dims[1];
            let mut x = randn(&dims, rng);
            x.map_inplace(|v| 2.0 * v + 0.5);
            let inputs = vec![x, Tensor::uniform(&[c], 0.5, 1.5, rng).unwrap(), randn(&[c], rng)];
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            op_case(format!("{dims:?}"), inputs, dims, rng, move |t, v| {
                let mut run = BnRunning {
                    mean: mean.clone(),
                    var: var.clone(),
                    ..BnRunning::new(c)
                };
                t.batch_norm(v[0], v[1], v[2], &mut run, training)
            })
        }
        "global_avg_pool" => {
            let dims = vec![d!(1, 3), d!(1, 3), d!(1, 5), d!(1, 5)];
            let inputs = vec![randn(&dims, rng)];
            let out = vec![dims[0], dims[1]];
            op_case(format!("{dims:?}"), inputs, out, rng, |t, v| t.global_avg_pool(v[0]))
        }
        "region_pool" => {
            let (gh, gw, ph, pw) = (d!(1, 3), d!(1, 3), d!(1, 3), d!(1, 3));
            let spec = PartitionSpec::new(gh, gw, ph, pw);
            let dims = vec![d!(1, 2), d!(1, 3), gh * ph, gw * pw];
            let inputs = vec![randn(&dims, rng)];
            let out = vec![dims[0], dims[1], gh * gw];
            op_case(format!("{dims:?} grid {gh}x{gw}"), inputs, out, rng, move |t, v| t.region_pool(v[0], spec))
        }
        "concat_channels" => {
            let (b, h, w) = (d!(1, 2), d!(1, 4), d!(1, 4));
            let n = d!(1, 3);
            let cs: Vec<usize> = (0..n).map(|_| d!(1, 3)).collect();
            let inputs: Vec<Tensor> = cs.iter().map(|&c| randn(&[b, c, h, w], rng)).collect();
            let total = cs.iter().sum();
            op_case(format!("{cs:?} at [{b},·,{h},{w}]"), inputs, vec![b, total, h, w], rng, |t, v| {
                t.concat_channels(v)
            })
        }
        "add" | "mul" => {
            let dims = vec![d!(1, 3), d!(1, 4), d!(1, 4)];
            let inputs = vec![randn(&dims, rng), randn(&dims, rng)];
            let add = case == "add";
            op_case(format!("{dims:?}"), inputs, dims, rng, move |t, v| {
                if add {
                    t.add(v[0], v[1])
                } else {
                    t.mul(v[0], v[1])
                }
            })
        }
        "add_bcast" | "mul_bcast" => {
            let dims = vec![d!(1, 3), d!(1, 3), d!(1, 4), d!(1, 4)];
            let ydims: Vec<usize> = dims.iter().map(|&e| if rng.random_bool(0.5) { 1 } else { e }).collect();
            let inputs = vec![randn(&dims, rng), randn(&ydims, rng)];
            let add = case == "add_bcast";
            op_case(format!("{dims:?} ⊕ {ydims:?}"), inputs, dims, rng, move |t, v| {
                if add {
                    t.add_bcast(v[0], v[1])
                } else {
                    t.mul_bcast(v[0], v[1])
                }
            })
        }
        "scale" => {
            let dims = vec![d!(1, 3), d!(1, 5)];
            let inputs = vec![randn(&dims, rng), randn(&[1], rng)];
            op_case(format!("{dims:?}"), inputs, dims, rng, |t, v| t.scale(v[0], v[1]))
        }
        "scale_add_const" => {
            let dims = vec![d!(1, 3), d!(1, 5)];
            let (c1, c2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let inputs = vec![randn(&dims, rng)];
            op_case(format!("{dims:?}"), inputs, dims, rng, move |t, v| {
                let s = t.scale_const(v[0], c1);
                let a = t.add_const(s, c2);
                t.mul(a, a)
            })
        }
        "permute" => {
            let rank = d!(2, 4);
            let dims: Vec<usize> = (0..rank).map(|_| d!(1, 4)).collect();
            let mut axes: Vec<usize> = (0..rank).collect();
            rand::seq::SliceRandom::shuffle(&mut axes[..], rng);
            let out: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
            let inputs = vec![randn(&dims, rng)];
            op_case(format!("{dims:?} by {axes:?}"), inputs, out, rng, move |t, v| t.permute(v[0], &axes))
        }
        "reshape" => {
            let (a, b, c) = (d!(1, 3), d!(1, 3), d!(1, 3));
            let inputs = vec![randn(&[a, b, c], rng)];
            op_case(format!("[{a},{b},{c}] → [{a},{}]", b * c), inputs, vec![a, b * c], rng, move |t, v| {
                let r = t.reshape(v[0], &[a, b * c])?;
                t.mul(r, r)
            })
        }
        "mean_axis" => {
            let rank = d!(2, 4);
            let dims: Vec<usize> = (0..rank).map(|_| d!(1, 4)).collect();
            let axis = d!(0, rank - 1);
            let out: Vec<usize> = dims.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
            let inputs = vec![randn(&dims, rng)];
            op_case(format!("{dims:?} axis {axis}"), inputs, out, rng, move |t, v| t.mean_axis(v[0], axis))
        }
        "sum_mean" => {
            let dims = vec![d!(1, 4), d!(1, 4)];
            let inputs = vec![randn(&dims, rng)];
            scalar_case(format!("{dims:?}"), inputs, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                let m = t.mean(v[0]);
                let mm = t.mul(m, m)?;
                t.add(s, mm)
            })
        }
        "upsample_nearest" => {
            let dims = vec![d!(1, 2), d!(1, 2), d!(1, 3), d!(1, 3)];
            let f = d!(1, 3);
            let out = vec![dims[0], dims[1], dims[2] * f, dims[3] * f];
            let inputs = vec![randn(&dims, rng)];
            op_case(format!("{dims:?} ×{f}"), inputs, out, rng, move |t, v| t.upsample_nearest(v[0], f))
        }
        "cross_entropy" => {
            let (b, k, h, w) = (d!(1, 3), d!(2, 6), d!(1, 4), d!(1, 4));
            let labels: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..k)).collect();
            let logits = randn(&[b, k, h, w], rng);
                        scalar_case(format!("[{b},{k},{h},{w}]"), vec![logits], move |t, v| {
                t.cross_entropy(v[0], &labels)
            })
        }
        "partition_shuffle" => {
            let (gh, gw, ph, pw) = (d!(1, 3), d!(1, 3), d!(1, 3), d!(1, 3));
            let spec = PartitionSpec::new(gh, gw, ph, pw);
            let dims = vec![d!(1, 2), d!(1, 2), gh * ph, gw * pw];
            let inputs = vec![randn(&dims, rng)];
            let out = vec![dims[0], dims[1], ph * pw, gh * gw];
            op_case(format!("{dims:?} grid {gh}x{gw}"), inputs, out, rng, move |t, v| {
                let xg = partition_regions(t, v[0], &spec)?;
                shuffle_regroup(t, xg)
            })
        }
        "caa" | "caa_cca" | "cca_gate" => {
            let (c, n) = (8, d!(3, 4));
            // fewer pixels leave the pooled context nearly constant and its
            // batch norm close to degenerate
            let (b, h, w) = (1, d!(3, 5), d!(3, 5));
            let mut store = ParamStore::new();
            let caa = CaaParams::new(&mut store, "caa", c, 2, n, rng).expect("valid caa");
            let cca = CcaParams::new(&mut store, "cca", n, d!(1, 3), rng).expect("valid cca");
            cca.set_gamma(&mut store, 0.7);
            let use_cca = case != "caa";
            let r = randn(&[b, c, h, w], rng);
            let x = randn(&[b, c, h, w], rng);
            if case == "cca_gate" {
                let p = randn(&[b, n, h, w], rng);
                let rg = randn(&[b, n], rng);
                return module_case(format!("P [{b},{n},{h},{w}]"), p, store, vec![rg], 40, move |s, p| {
                    Ok(vec![cca_gate(s, p, &cca)?])
                });
            }
            module_case(format!("[{b},{c},{h},{w}] N={n}"), x, store, vec![r], 12, move |s, x| {
                Ok(vec![caa_forward(s, x, &caa, &cca, use_cca)?.y])
            })
        }
        "rsa" => {
            // batch norm over one or two tokens is degenerate, so both stages
            // see at least four
            let (gh, gw, ph, pw) = (d!(2, 3), d!(2, 3), d!(2, 3), d!(2, 3));
            let spec = PartitionSpec::new(gh, gw, ph, pw);
            let c = 8;
            let dims = [1, c, gh * ph, gw * pw];
            let mut store = ParamStore::new();
            let p = RsaParams::new(&mut store, "rsa", c, rng);
            set_stage_weights(&mut store, &p, [0.6, -0.4]);
            let r = randn(&dims, rng);
            let x = randn(&dims, rng);
            module_case(format!("{dims:?} grid {gh}x{gw}"), x, store, vec![r], 12, move |s, x| {
                Ok(vec![rsa_forward(s, x, &spec, &p)?.out])
            })
        }
        "sa" => {
            let c = 8;
            let dims = [1, c, d!(2, 4), d!(2, 4)];
            let mut store = ParamStore::new();
            let p = SaParams::new(&mut store, "sa", c, rng);
            store.set(p.stage.w, Tensor::scalar(0.5)).expect("scalar");
            let r = randn(&dims, rng);
            let x = randn(&dims, rng);
            module_case(format!("{dims:?}"), x, store, vec![r], 12, move |s, x| {
                Ok(vec![sa_forward(s, x, &p)?.0])
            })
        }
        "network_16" | "network_32" => {
            // at 16×16 the 2×2 feature map is one region; at 32×32 a 2×2 grid
            // of 2×2 regions
            let (side, grid) = if case == "network_16" { (16, 1) } else { (32, 2) };
            let cfg = NetConfig {
                classes: 3,
                gh: grid,
                gw: grid,
                alpha: 2,
                ..Default::default()
            };
            let (net, mut store) = build(cfg, rng.random()).expect("valid net");
            set_mixing_scalars(&mut store, &net, 0.7, [0.6, -0.4]);
            let x = randn(&[1, 3, side, side], rng);
            let labels: Vec<usize> = (0..side * side).map(|_| rng.random_range(0..3)).collect();
            // the mean loss alone leaves per-pixel gradients near the noise
            // floor, so every head also gets a random cotangent
            let cotangents = vec![
                Tensor::scalar(1.0),
                randn(&[1, 3, side, side], rng),
                randn(&[1, 3, side, side], rng),
                randn(&[1, 3, side / 8, side / 8], rng),
            ];
            let shape = format!("[1,3,{side},{side}] K=3 grid {grid}x{grid}");
            module_case(shape, x, store, cotangents, 4, move |s, x| {
                let out = net.forward(s, x)?;
                let (loss, _) = net.loss(s, &out, &labels, &LossWeights::default())?;
                let cls = out
                    .class_logits
                    .ok_or_else(|| crate::error::Error::usage("class branch disabled"))?;
                Ok(vec![loss, out.logits, out.aux_logits, cls])
            })
        }
        other => panic!("unknown gradient check case {other}"),
    }
}

pub fn run_case(case: &'static str, seed: u64) -> Result<CheckRow> {
    run_case_with_step(case, seed, None)
}

/// `step` overrides the default finite-difference step.
pub fn run_case_with_step(case: &'static str, seed: u64, step: Option<f64>) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(case, seed));
    let c = make_case(case, &mut rng);
    let opts = GradCheckOptions {
        step: step.unwrap_or(GradCheckOptions::default().step),
        max_coords_per_input: c.coords,
        seed,
    };
    let report = vjp_check(&*c.f, &c.cotangents, &c.inputs, &opts)?;
    Ok(CheckRow {
        case,
        seed,
        shape: c.shape,
        rel_err: report.max_rel_err,
        coords: report.coords_checked,
        worst: (report.worst_input, report.worst_coord, report.analytic, report.numeric),
    })
}

/// `shapes` seeded draws per case, seeds `seed, seed+1, …`. `filter` keeps
/// cases whose name contains it.
pub fn run_suite(seed: u64, shapes: usize, filter: Option<&str>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for case in all_cases() {
        if filter.is_some_and(|f| !case.contains(f)) {
            continue;
        }
        for i in 0..shapes as u64 {
            rows.push(run_case(case, seed + i)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_deterministic() {
        let a = run_case("softmax", 3).unwrap();
        let b = run_case("softmax", 3).unwrap();
        assert_eq!(a, b);
        assert!(a.passed(), "{a:?}");
    }
}

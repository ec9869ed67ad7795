use hmanet_core::caa::{caa_forward, class_affinity, CaaParams, CcaParams};
use hmanet_core::network::build;
use hmanet_core::params::{ParamStore, Session};
use hmanet_core::rsa::{rsa_forward, set_stage_weights, PartitionSpec, RsaParams, RsaStageParams};
use hmanet_core::tape::{BnRunning, Tape};
use hmanet_core::tensor::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn row_argmax(data: &[f64], len: usize) -> Vec<usize> {
    data.chunks(len)
        .map(|r| (0..len).fold(0, |best, k| if r[k] > r[best] { k } else { best }))
        .collect()
}

#[test]
fn identity_at_init_is_bit_exact() {
    for seed in 0..5 {
        let (net, mut store) = build(Default::default(), seed).unwrap();
        let mut r = rng(seed + 100);
        let x = Tensor::randn(&[2, 64, 8, 8], 1.0, &mut r).unwrap();
        let mut s = Session::new(&mut store, true);
        let xv = s.tape.leaf(x);

        let caa = caa_forward(&mut s, xv, &net.caa, &net.cca, true).unwrap();
        let n = net.config.classes;
        let a = s.value(caa.affinity.affinity).data().to_vec();
        let used = s.value(caa.used_affinity).data().to_vec();
        assert_eq!(row_argmax(&a, n), row_argmax(&used, n));

        let spec = PartitionSpec::from_grid(8, 8, 4, 4).unwrap();
        let out = rsa_forward(&mut s, xv, &spec, &net.rsa).unwrap();
        for k in 0..2 {
            let zm = s.value(out.weighted_tokens[k]).data();
            let xm = s.value(out.merged[k]).data();
            assert!(zm.iter().zip(xm).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn uniform_class_map_gives_one_over_n_context() {
    for n in [2, 3, 6] {
        let mut r = rng(n as u64);
        let mut store = ParamStore::new();
        let caa = CaaParams::new(&mut store, "caa", 8, 4, n, &mut r).unwrap();
        let cca = CcaParams::new(&mut store, "cca", n, 3, &mut r).unwrap();
        // zero class head: every pixel sees the uniform distribution
        *store.get_mut(caa.class_head.weight) = Tensor::zeros(&[n, 8, 1, 1], DType::F64).unwrap();
        cca.set_gamma(&mut store, 0.8);
        let mut s = Session::new(&mut store, true);
        let xv = s.tape.leaf(Tensor::randn(&[2, 8, 3, 4], 1.0, &mut r).unwrap());
        for use_cca in [false, true] {
            let out = caa_forward(&mut s, xv, &caa, &cca, use_cca).unwrap();
            let want = 1.0 / n as f64;
            assert!(s.value(out.context).data().iter().all(|v| (v - want).abs() < 1e-15));
        }
    }
}

#[test]
fn class_relabeling_permutes_affinity_columns() {
    let (b, c, h, w, n) = (2, 5, 3, 3, 4);
    let perm = [2, 0, 3, 1];
    let mut r = rng(42);
    let xr = Tensor::randn(&[b, c, h, w], 1.0, &mut r).unwrap();
    let p = Tensor::randn(&[b, n, h, w], 2.0, &mut r).unwrap();
    let mut permuted = vec![0.0; p.len()];
    for bi in 0..b {
        for k in 0..n {
            for i in 0..h * w {
                permuted[(bi * n + k) * h * w + i] = p.data()[(bi * n + perm[k]) * h * w + i];
            }
        }
    }
    let mut tape = Tape::new();
    let (xv, pv) = (tape.leaf(xr), tape.leaf(p));
    let qv = tape.leaf(Tensor::from_vec(&[b, n, h, w], permuted));
    let a = class_affinity(&mut tape, xv, pv).unwrap();
    let ap = class_affinity(&mut tape, xv, qv).unwrap();
    let (a, ap) = (tape.value(a.affinity).data(), tape.value(ap.affinity).data());
    for row in 0..b * c {
        for k in 0..n {
            assert!((ap[row * n + k] - a[row * n + perm[k]]).abs() < 1e-14);
        }
    }
}

/// One attention stage in eval mode with fresh batch-norm statistics, by loops.
fn stage_oracle(store: &ParamStore, st: &RsaStageParams, tok: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (c, t) = (tok.len(), tok[0].len());
    let d = st.key_dim;
    let bn = 1.0 / (1.0 + BnRunning::DEFAULT_EPS).sqrt();
    let proj = |wt: &Tensor, out: usize, relu: bool| -> Vec<Vec<f64>> {
        (0..out)
            .map(|o| {
                (0..t)
                    .map(|i| {
                        let v: f64 = (0..c).map(|k| wt.at(&[o, k, 0, 0]) * tok[k][i]).sum();
                        if relu {
                            (v * bn).max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let theta = proj(store.get(st.theta.conv.weight), d, true);
    let phi = proj(store.get(st.phi.conv.weight), d, true);
    let mut gx = proj(store.get(st.g.weight), c, false);
    let bias = store.get(st.g.bias.unwrap());
    for (k, row) in gx.iter_mut().enumerate() {
        row.iter_mut().for_each(|v| *v += bias.data()[k]);
    }
    let w = store.get(st.w).item();
    let mut z = tok.to_vec();
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|k| theta[k][i] * phi[k][j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        for k in 0..c {
            let agg: f64 = (0..t).map(|j| gx[k][j] * e[j] / sum).sum();
            z[k][i] += w * agg;
        }
    }
    z
}

#[test]
fn rsa_matches_loop_oracle() {
    for (seed, (h, w, gh, gw)) in [(6, 4, 3, 2), (4, 4, 2, 2), (6, 6, 2, 3)].into_iter().enumerate() {
        let c = 8;
        let mut r = rng(seed as u64);
        let mut store = ParamStore::new();
        let params = RsaParams::new(&mut store, "rsa", c, &mut r);
        set_stage_weights(&mut store, &params, [0.7, -1.3]);
        let spec = PartitionSpec::from_grid(h, w, gh, gw).unwrap();
        let x = Tensor::randn(&[1, c, h, w], 1.0, &mut r).unwrap();
        let (g, p) = (spec.regions(), spec.region_size());
        let px = |gi: usize, pi: usize| {
            ((gi / gw) * spec.ph + pi / spec.pw, (gi % gw) * spec.pw + pi % spec.pw)
        };
        // xr[c][g][p]
        let xr: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|k| (0..g).map(|gi| (0..p).map(|pi| {
                let (y, xx) = px(gi, pi);
                x.at(&[0, k, y, xx])
            }).collect()).collect())
            .collect();
        let xm1: Vec<Vec<f64>> = xr.iter().map(|ch| ch.iter().map(|reg| reg.iter().sum::<f64>() / p as f64).collect()).collect();
        let zm1 = stage_oracle(&store, &params.stages[0], &xm1);
        let weighted: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|k| (0..g).map(|gi| (0..p).map(|pi| zm1[k][gi] * xr[k][gi][pi]).collect()).collect())
            .collect();
        let xm2: Vec<Vec<f64>> = (0..c)
            .map(|k| (0..p).map(|pi| (0..g).map(|gi| weighted[k][gi][pi]).sum::<f64>() / g as f64).collect())
            .collect();
        let zm2 = stage_oracle(&store, &params.stages[1], &xm2);

        let mut s = Session::new(&mut store, false);
        let xv = s.tape.leaf(x.clone());
        let out = rsa_forward(&mut s, xv, &spec, &params).unwrap();
        let got = s.value(out.out);
        for k in 0..c {
            for gi in 0..g {
                for pi in 0..p {
                    let (y, xx) = px(gi, pi);
                    let want = zm2[k][pi] * weighted[k][gi][pi];
                    let v = got.at(&[0, k, y, xx]);
                    assert!((v - want).abs() < 1e-12 * (1.0 + want.abs()), "seed {seed}: {v} vs {want}");
                }
            }
        }
    }
}

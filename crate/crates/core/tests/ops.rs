use hmanet_core::rsa::{partition_regions, shuffle_regroup, unpartition_regions, PartitionSpec};
use hmanet_core::tape::Tape;
use hmanet_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [cout, _, kh, kw] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (iy, ix) = ((y * stride + i) as isize - pad as isize, (xo * stride + j) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, i, j]);
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + xo] = s;
                }
            }
        }
    }
    (vec![b, cout, ho, wo], out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn matmul_matches_loops() {
    for (seed, (m, k, n)) in [(1, 4, 5), (7, 1, 3), (3, 3, 3), (16, 9, 2)].into_iter().enumerate() {
        let a = randn(&[m, k], seed as u64);
        let b = randn(&[k, n], seed as u64 + 100);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.dims(c), &[m, n]);
        assert!(close(tape.value(c).data(), &naive_matmul(a.data(), b.data(), m, k, n), 1e-12));
    }
}

#[test]
fn bmm_matches_per_batch_loops() {
    let (bs, m, k, n) = (3, 4, 5, 2);
    let a = randn(&[bs, m, k], 11);
    let b = randn(&[bs, k, n], 12);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.bmm(av, bv).unwrap();
    let got = tape.value(c).data();
    for i in 0..bs {
        let want = naive_matmul(&a.data()[i * m * k..][..m * k], &b.data()[i * k * n..][..k * n], m, k, n);
        assert!(close(&got[i * m * n..][..m * n], &want, 1e-12));
    }
}

#[test]
fn conv_matches_loops() {
    let cases = [
        ([1, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ([2, 2, 6, 7], [3, 2, 3, 3], 2, 1),
        ([1, 4, 4, 4], [2, 4, 1, 1], 1, 0),
        ([2, 1, 7, 5], [2, 1, 3, 3], 2, 0),
    ];
    for (i, (xd, wd, stride, pad)) in cases.into_iter().enumerate() {
        let x = randn(&xd, 40 + i as u64);
        let w = randn(&wd, 80 + i as u64);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let (dims, want) = naive_conv(&x, &w, stride, pad);
        assert_eq!(tape.dims(y), &dims[..]);
        assert!(close(tape.value(y).data(), &want, 1e-12), "case {i}");
    }
}

#[test]
fn region_pool_with_unit_regions_is_identity() {
    let x = randn(&[2, 3, 4, 6], 5);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pooled = tape.region_pool(xv, PartitionSpec::new(4, 6, 1, 1)).unwrap();
    assert_eq!(tape.dims(pooled), &[2, 3, 24]);
    assert_eq!(tape.value(pooled).data(), x.data());
}

#[test]
fn region_pool_matches_partition_mean() {
    let x = randn(&[1, 2, 6, 8], 6);
    let spec = PartitionSpec::new(3, 2, 2, 4);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let pooled = tape.region_pool(xv, spec).unwrap();
    let xg = partition_regions(&mut tape, xv, &spec).unwrap();
    let means = tape.mean_axis(xg, 3).unwrap();
    assert!(close(tape.value(pooled).data(), tape.value(means).data(), 1e-14));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        seed in 0u64..1000,
        outer in 1usize..4,
        len in 1usize..7,
        shift in -50.0f64..50.0,
    ) {
        let x = randn(&[outer, len], seed);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = tape.softmax(xv, 1).unwrap();
        let shifted = tape.add_const(xv, shift);
        let s2 = tape.softmax(shifted, 1).unwrap();
        let p = tape.value(s).data().to_vec();
        for row in p.chunks(len) {
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(close(&p, tape.value(s2).data(), 1e-12));
    }

    #[test]
    fn partition_round_trips(
        seed in 0u64..1000,
        gh in 1usize..4, gw in 1usize..4, ph in 1usize..4, pw in 1usize..4,
        b in 1usize..3, c in 1usize..3,
    ) {
        let spec = PartitionSpec::new(gh, gw, ph, pw);
        let x = randn(&[b, c, gh * ph, gw * pw], seed);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let xg = partition_regions(&mut tape, xv, &spec).unwrap();
        let back = unpartition_regions(&mut tape, xg, &spec).unwrap();
        prop_assert_eq!(tape.value(back), &x);
        let once = shuffle_regroup(&mut tape, xg).unwrap();
        let twice = shuffle_regroup(&mut tape, once).unwrap();
        prop_assert_eq!(tape.value(twice), tape.value(xg));
        // a pixel and its shuffled copy hold the same value
        let (g, p) = (spec.regions(), spec.region_size());
        let (a, s) = (tape.value(xg).data(), tape.value(once).data());
        for gi in 0..g {
            for pi in 0..p {
                prop_assert_eq!(a[gi * p + pi], s[pi * g + gi]);
            }
        }
    }
}

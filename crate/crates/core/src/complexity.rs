//! Symbolic cost analysis of SA, RSA and CAA module invocations, plus a
//! wall-clock benchmark of the real forward passes.
//!
//! Counting rules:
//! - FLOPs: convolutions `2·H·W·Cin·Cout·kh·kw`, matrix products `2·m·k·n`.
//!   Elementwise work (BN, activations, softmax, pooling, residual adds) is
//!   not counted.
//! - Memory: every op materialises its output (`conv → BN → ReLU` counts as
//!   one op). Ops run in construction order and a tensor is freed right after
//!   its last consumer; tensors nobody consumes are module outputs and stay
//!   live to the end. The peak of live bytes at 4 bytes per value is
//!   reported. The module input is owned by the caller and excluded.
//! - Parameters: trainable values only (BN running statistics excluded).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::csv_err;
use crate::params::{ParamStore, Session};
use crate::rsa::{rsa_forward, PartitionSpec, RsaParams};
use crate::sa::{sa_forward, SaParams};
use crate::tensor::Tensor;

pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Sa,
    Rsa,
    Caa,
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModuleKind::Sa => "sa",
            ModuleKind::Rsa => "rsa",
            ModuleKind::Caa => "caa",
        })
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(ModuleKind::Sa),
            "rsa" => Ok(ModuleKind::Rsa),
            "caa" => Ok(ModuleKind::Caa),
            other => Err(Error::usage(format!(
                "unsupported module kind '{other}' (expected sa, rsa or caa)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Geometry { b, c, h, w }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzerConfig {
    /// Width after the 3×3 dimension reduction; `None` means `C/4`.
    pub reduced: Option<usize>,
    /// Query/key width `d`; `None` means `C/4`.
    pub key_dim: Option<usize>,
    pub gh: usize,
    pub gw: usize,
    pub classes: usize,
    pub alpha: usize,
    /// Prepend the 3×3 `C → C′` reduction conv. When off the module runs
    /// directly on `C` channels.
    pub include_reduction: bool,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            reduced: None,
            key_dim: None,
            gh: 8,
            gw: 8,
            classes: 6,
            alpha: 150,
            include_reduction: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub params: u64,
    pub memory_bytes: u64,
    pub flops: u64,
    /// FLOPs of the affinity products alone.
    pub attention_flops: u64,
}

const INPUT: usize = usize::MAX;

struct Node {
    values: u64,
    inputs: Vec<usize>,
}

#[derive(Default)]
struct Graph {
    nodes: Vec<Node>,
    flops: u64,
    attention_flops: u64,
    params: u64,
}

impl Graph {
    fn op(&mut self, inputs: &[usize], values: u64) -> usize {
        self.nodes.push(Node {
            values,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, x: usize, b: u64, hw: u64, cin: u64, cout: u64, k: u64, bn: bool, bias: bool) -> usize {
        self.flops += 2 * b * hw * cin * cout * k * k;
        self.params += cin * cout * k * k + if bn { 2 * cout } else { 0 } + if bias { cout } else { 0 };
        self.op(&[x], b * hw * cout)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul(&mut self, a: usize, bm: usize, batch: u64, m: u64, k: u64, n: u64, attention: bool) -> usize {
        let f = 2 * batch * m * k * n;
        self.flops += f;
        if attention {
            self.attention_flops += f;
        }
        self.op(&[a, bm], batch * m * n)
    }

    fn peak_bytes(&self) -> u64 {
        let n = self.nodes.len();
        let mut last_use: Vec<usize> = (0..n).map(|_| n).collect();
        let mut consumed = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in node.inputs.iter().filter(|&&j| j != INPUT) {
                consumed[j] = true;
                last_use[j] = i;
            }
        }
        for j in 0..n {
            if !consumed[j] {
                last_use[j] = n;
            }
        }
        let mut live = 0u64;
        let mut peak = 0u64;
        for i in 0..n {
            live += self.nodes[i].values;
            peak = peak.max(live);
            for j in 0..=i {
                if last_use[j] == i {
                    live -= self.nodes[j].values;
                }
            }
        }
        peak * BYTES_PER_VALUE
    }

    fn report(&self) -> ComplexityReport {
        ComplexityReport {
            params: self.params,
            memory_bytes: self.peak_bytes(),
            flops: self.flops,
            attention_flops: self.attention_flops,
        }
    }
}

/// One attention stage over `tokens` pooled tokens, each pooling `members`
/// pixels of the `[B,C,·]` source. Returns the region-weighted output.
fn attention_stage(g: &mut Graph, src: usize, b: u64, c: u64, d: u64, tokens: u64, members: u64) -> usize {
    let merged = g.op(&[src], b * c * tokens);
    let theta = g.conv(merged, b, tokens, c, d, 1, true, false);
    let phi = g.conv(merged, b, tokens, c, d, 1, true, false);
    let gx = g.conv(merged, b, tokens, c, c, 1, false, true);
    let logits = g.matmul(theta, phi, b, tokens, d, tokens, true);
    let am = g.op(&[logits], b * tokens * tokens);
    let agg = g.matmul(gx, am, b, c, tokens, tokens, true);
    g.params += 1;
    let zm = g.op(&[agg, merged], b * c * tokens);
    g.op(&[zm, src], b * c * tokens * members)
}

pub fn analyze(kind: ModuleKind, geo: Geometry, cfg: &AnalyzerConfig) -> Result<ComplexityReport> {
    if geo.b == 0 || geo.c == 0 || geo.h == 0 || geo.w == 0 {
        return Err(Error::usage(format!("empty geometry {geo:?}")));
    }
    let (b, c, hw) = (geo.b as u64, geo.c as u64, (geo.h * geo.w) as u64);
    let reduced = cfg.reduced.unwrap_or(geo.c / 4).max(1) as u64;
    let d = cfg.key_dim.unwrap_or(geo.c / 4).max(1) as u64;
    let mut g = Graph::default();
    let (x, cm) = if cfg.include_reduction {
        (g.conv(INPUT, b, hw, c, reduced, 3, true, false), reduced)
    } else {
        (INPUT, c)
    };
    match kind {
        ModuleKind::Sa => {
            let theta = g.conv(x, b, hw, cm, d, 1, true, false);
            let phi = g.conv(x, b, hw, cm, d, 1, true, false);
            let gx = g.conv(x, b, hw, cm, cm, 1, false, true);
            let logits = g.matmul(theta, phi, b, hw, d, hw, true);
            let am = g.op(&[logits], b * hw * hw);
            let agg = g.matmul(gx, am, b, cm, hw, hw, true);
            g.params += 1;
            g.op(&[agg, x], b * cm * hw);
        }
        ModuleKind::Rsa => {
            let spec = PartitionSpec::from_grid(geo.h, geo.w, cfg.gh, cfg.gw)?;
            let (gn, pn) = (spec.regions() as u64, spec.region_size() as u64);
            let xg = g.op(&[x], b * cm * hw);
            let w1 = attention_stage(&mut g, xg, b, cm, d, gn, pn);
            let xs = g.op(&[w1], b * cm * hw);
            let w2 = attention_stage(&mut g, xs, b, cm, d, pn, gn);
            let back = g.op(&[w2], b * cm * hw);
            g.op(&[back], b * cm * hw);
        }
        ModuleKind::Caa => {
            let n = cfg.classes as u64;
            let inner = (cm / 4).max(1);
            let wide = cfg.alpha as u64 * n;
            let xr = g.conv(x, b, hw, cm, inner, 1, true, false);
            let p = g.conv(x, b, hw, cm, n, 1, false, true);
            let q = g.op(&[p], b * n * hw);
            let s = g.matmul(xr, q, b, inner, hw, n, true);
            let a = g.op(&[s], b * inner * n);
            let pooled = g.op(&[q], b * n);
            let hidden = g.matmul(pooled, INPUT, b, 1, n, wide, false);
            let gate = g.matmul(hidden, INPUT, b, 1, wide, n, false);
            g.params += 2 * wide * n + 1;
            let recal = g.op(&[a, gate], b * inner * n);
            let context = g.matmul(recal, q, b, inner, n, hw, true);
            let lifted = g.conv(context, b, hw, inner, cm, 1, true, false);
            let sum = g.op(&[lifted, x], b * cm * hw);
            g.conv(sum, b, hw, cm, cm, 1, true, false);
        }
    }
    Ok(g.report())
}

/// How the RSA partition follows the image size in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepPartition {
    FixedGrid { gh: usize, gw: usize },
    FixedRegion { ph: usize, pw: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: ModuleKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub report: ComplexityReport,
}

pub fn sweep(
    kinds: &[ModuleKind],
    sizes: &[(usize, usize)],
    c: usize,
    partition: SweepPartition,
    cfg: &AnalyzerConfig,
) -> Result<Vec<SweepRow>> {
    if kinds.is_empty() || sizes.is_empty() {
        return Err(Error::usage("sweep needs at least one kind and one size"));
    }
    let mut rows = Vec::with_capacity(kinds.len() * sizes.len());
    for &kind in kinds {
        for &(h, w) in sizes {
            let mut cfg = cfg.clone();
            match partition {
                SweepPartition::FixedGrid { gh, gw } => (cfg.gh, cfg.gw) = (gh, gw),
                SweepPartition::FixedRegion { ph, pw } => {
                    if h % ph != 0 || w % pw != 0 {
                        return Err(Error::Partition(format!(
                            "{ph}x{pw} regions do not tile {h}x{w}"
                        )));
                    }
                    (cfg.gh, cfg.gw) = (h / ph, w / pw);
                }
            }
            let report = analyze(kind, Geometry::new(1, c, h, w), &cfg)?;
            rows.push(SweepRow { kind, h, w, c, report });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 8] = [
    "kind",
    "H",
    "W",
    "C",
    "params",
    "memory_bytes",
    "flops",
    "attention_flops",
];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.h.to_string(),
            r.w.to_string(),
            r.c.to_string(),
            r.report.params.to_string(),
            r.report.memory_bytes.to_string(),
            r.report.flops.to_string(),
            r.report.attention_flops.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub kind: ModuleKind,
    pub geometry: Geometry,
    pub gh: usize,
    pub gw: usize,
    pub runs_s: Vec<f64>,
    pub median_s: f64,
}

impl BenchResult {
    pub fn to_json_line(&self) -> String {
        let g = self.geometry;
        json!({
            "kind": self.kind.to_string(),
            "geometry": [g.b, g.c, g.h, g.w],
            "gh": self.gh,
            "gw": self.gw,
            "median_s": self.median_s,
            "runs_s": self.runs_s,
            "host": host_descriptor(),
        })
        .to_string()
    }
}

pub fn host_descriptor() -> serde_json::Value {
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "threads_used": 1,
    })
}

/// Refuse benchmark geometries whose f64 working set exceeds this.
pub const BENCH_MEMORY_LIMIT: u64 = 8 << 30;

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repetitions` forward passes (after one untimed warmup) on the
/// calling thread. Inputs and parameters are seeded, so every run sees the
/// same data.
pub fn wallclock_bench(
    kind: ModuleKind,
    geo: Geometry,
    gh: usize,
    gw: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchResult> {
    if repetitions < 5 {
        return Err(Error::usage("wallclock bench needs at least 5 repetitions"));
    }
    let cfg = AnalyzerConfig {
        gh,
        gw,
        include_reduction: false,
        ..Default::default()
    };
    // The tape keeps every intermediate plus the logits' scaled copy, in f64.
    let est = analyze(kind, geo, &cfg)?;
    let needed = est.memory_bytes * 4;
    if needed > BENCH_MEMORY_LIMIT {
        return Err(Error::Resource(format!(
            "{kind} at {geo:?} needs about {needed} bytes, limit is {BENCH_MEMORY_LIMIT}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = Tensor::randn(&[geo.b, geo.c, geo.h, geo.w], 1.0, &mut rng)?;
    let run: Box<dyn Fn(&mut ParamStore) -> Result<()>> = match kind {
        ModuleKind::Sa => {
            let p = SaParams::new(&mut store, "sa", geo.c, &mut rng);
            let x = x.clone();
            Box::new(move |store| {
                let mut s = Session::new(store, false);
                let xv = s.tape.leaf(x.clone());
                sa_forward(&mut s, xv, &p).map(|_| ())
            })
        }
        ModuleKind::Rsa => {
            let spec = PartitionSpec::from_grid(geo.h, geo.w, gh, gw)?;
            let p = RsaParams::new(&mut store, "rsa", geo.c, &mut rng);
            let x = x.clone();
            Box::new(move |store| {
                let mut s = Session::new(store, false);
                let xv = s.tape.leaf(x.clone());
                rsa_forward(&mut s, xv, &spec, &p).map(|_| ())
            })
        }
        ModuleKind::Caa => return Err(Error::usage("wallclock bench supports sa and rsa")),
    };
    run(&mut store)?;
    let mut runs_s = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        run(&mut store)?;
        runs_s.push(t0.elapsed().as_secs_f64());
    }
    Ok(BenchResult {
        kind,
        geometry: geo,
        gh,
        gw,
        median_s: median(&runs_s),
        runs_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsa::rsa_attention_flops;

    fn bare(gh: usize, gw: usize, d: usize) -> AnalyzerConfig {
        AnalyzerConfig {
            key_dim: Some(d),
            gh,
            gw,
            include_reduction: false,
            ..Default::default()
        }
    }

    #[test]
    fn rsa_attention_terms_match_formula() {
        for (h, gh, c) in [(16, 4, 8), (64, 8, 32), (128, 8, 64), (12, 3, 5)] {
            let r = analyze(ModuleKind::Rsa, Geometry::new(1, c, h, h), &bare(gh, gh, c)).unwrap();
            let spec = PartitionSpec::from_grid(h, h, gh, gh).unwrap();
            let f = rsa_attention_flops(&spec, h, h, c).unwrap();
            // analyzer counts FLOPs, the term-by-term figure counts MACs
            assert_eq!(r.attention_flops as f64, 2.0 * f.rsa_term_by_term);
            assert!((f.rsa - f.rsa_term_by_term).abs() <= 1e-9 * f.rsa);
        }
    }

    #[test]
    fn degenerate_partition_is_dense() {
        let geo = Geometry::new(1, 8, 8, 8);
        let sa = analyze(ModuleKind::Sa, geo, &bare(1, 1, 8)).unwrap();
        let rsa = analyze(ModuleKind::Rsa, geo, &bare(1, 1, 8)).unwrap();
        // one region of every pixel: stage 2 attends over HW tokens like SA,
        // stage 1 over a single token
        assert_eq!(rsa.attention_flops, sa.attention_flops + 2 * 8 + 2 * 8);
    }

    #[test]
    fn rsa_is_cheaper_when_both_sides_split() {
        for (h, gh) in [(4, 2), (16, 4), (32, 2), (32, 16), (64, 8)] {
            let geo = Geometry::new(1, 16, h, h);
            let sa = analyze(ModuleKind::Sa, geo, &AnalyzerConfig { gh, gw: gh, ..Default::default() }).unwrap();
            let rsa = analyze(ModuleKind::Rsa, geo, &AnalyzerConfig { gh, gw: gh, ..Default::default() }).unwrap();
            assert!(rsa.flops < sa.flops, "h {h} gh {gh}");
        }
    }

    #[test]
    fn memory_schedule_by_hand() {
        // no reduction, C = 4, d = 1, HW = 4:
        // θ 4, φ 4, g 16, logits 16, am 16, agg 16, out 16 values
        let r = analyze(ModuleKind::Sa, Geometry::new(1, 4, 2, 2), &bare(1, 1, 1)).unwrap();
        // at the softmax: g + logits + am = 48 values
        assert_eq!(r.memory_bytes, 48 * BYTES_PER_VALUE);
        assert_eq!(r.params, 2 * (4 + 2) + 16 + 4 + 1);
        assert_eq!(r.attention_flops, (2 * 4) * 4 + 2 * 4 * 4 * 4);
    }

    #[test]
    fn sa_doubling_scales_by_sixteen() {
        let cfg = bare(1, 1, 4);
        let a = analyze(ModuleKind::Sa, Geometry::new(1, 16, 8, 8), &cfg).unwrap();
        let b = analyze(ModuleKind::Sa, Geometry::new(1, 16, 16, 16), &cfg).unwrap();
        assert_eq!(b.attention_flops, 16 * a.attention_flops);
    }

    #[test]
    fn sweep_rows_and_csv() {
        let rows = sweep(
            &[ModuleKind::Sa, ModuleKind::Rsa, ModuleKind::Caa],
            &[(32, 32), (64, 64)],
            64,
            SweepPartition::FixedRegion { ph: 16, pw: 16 },
            &AnalyzerConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("kind,H,W,C,params,memory_bytes,flops,attention_flops\n"));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("RSA".parse::<ModuleKind>().unwrap(), ModuleKind::Rsa);
        assert!(matches!("aspp".parse::<ModuleKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn analyze_is_deterministic() {
        let g = Geometry::new(2, 32, 16, 16);
        let cfg = AnalyzerConfig { gh: 4, gw: 4, ..Default::default() };
        for k in [ModuleKind::Sa, ModuleKind::Rsa, ModuleKind::Caa] {
            assert_eq!(analyze(k, g, &cfg).unwrap(), analyze(k, g, &cfg).unwrap());
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

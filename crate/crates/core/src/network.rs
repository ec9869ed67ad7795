//! Toy hybrid multiple attention network: a stride-8 backbone, parallel
//! class augmented (with class channel gating) and region shuffle attention
//! branches fused with the backbone feature, and the three-term training loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caa::{caa_forward, CaaParams, CcaParams, DEFAULT_ALPHA};
use crate::data::{apply_augment, sample_augment, to_batch, AugmentConfig, Scene};
use crate::error::{Error, Result};
use crate::metrics::{argmax_classes, ConfusionMatrix};
use crate::params::{Conv2d, ConvBnRelu, ParamId, ParamStore, Session};
use crate::rsa::{rsa_forward, PartitionSpec, RsaParams};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const OUTPUT_STRIDE: usize = 8;
pub const BACKBONE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const BACKBONE_STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub classes: usize,
    /// `C′ = C / reduction` inside the class augmented attention.
    pub reduction: usize,
    pub alpha: usize,
    /// RSA region grid at 1/8 resolution.
    pub gh: usize,
    pub gw: usize,
    pub use_caa: bool,
    pub use_cca: bool,
    pub use_rsa: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            classes: 6,
            reduction: 4,
            alpha: DEFAULT_ALPHA,
            gh: 4,
            gw: 4,
            use_caa: true,
            use_cca: true,
            use_rsa: true,
        }
    }
}

impl NetConfig {
    /// Both attention branches replaced by zeros.
    pub fn without_attention(&self) -> Self {
        NetConfig {
            use_caa: false,
            use_cca: false,
            use_rsa: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmaNet {
    pub config: NetConfig,
    pub backbone: [ConvBnRelu; 4],
    pub caa: CaaParams,
    pub cca: CcaParams,
    pub rsa: RsaParams,
    pub fusion: ConvBnRelu,
    pub classifier: Conv2d,
    pub aux: Conv2d,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `[B,K,H,W]`
    pub logits: Var,
    /// `[B,K,H,W]`, from the stage-3 feature.
    pub aux_logits: Var,
    /// Class attention map `P` at 1/8 resolution when the class branch runs.
    pub class_logits: Option<Var>,
}

impl HmaNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: NetConfig, rng: &mut R) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::usage("the network needs at least two classes"));
        }
        let mut cin = 3;
        let backbone = std::array::from_fn(|i| {
            let blk = ConvBnRelu::new(
                store,
                &format!("backbone.stage{}", i + 1),
                cin,
                BACKBONE_WIDTHS[i],
                3,
                BACKBONE_STRIDES[i],
                rng,
            );
            cin = BACKBONE_WIDTHS[i];
            blk
        });
        let c = BACKBONE_WIDTHS[3];
        let k = config.classes;
        let reduced = (c / config.reduction.max(1)).max(1);
        Ok(HmaNet {
            caa: CaaParams::new(store, "caa", c, reduced, k, rng)?,
            cca: CcaParams::new(store, "cca", k, config.alpha, rng)?,
            rsa: RsaParams::new(store, "rsa", c, rng),
            fusion: ConvBnRelu::new(store, "fusion", 3 * c, c, 1, 1, rng),
            classifier: Conv2d::new(store, "classifier", c, k, 1, 1, true, rng),
            aux: Conv2d::new(store, "aux", BACKBONE_WIDTHS[2], k, 1, 1, true, rng),
            backbone,
            channels: c,
            config,
        })
    }

    pub fn spec_for(&self, h: usize, w: usize) -> Result<PartitionSpec> {
        if !h.is_multiple_of(OUTPUT_STRIDE) || !w.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the output stride {OUTPUT_STRIDE}"
            )));
        }
        PartitionSpec::from_grid(h / OUTPUT_STRIDE, w / OUTPUT_STRIDE, self.config.gh, self.config.gw)
    }

    pub fn forward(&self, s: &mut Session, img: Var) -> Result<NetOutput> {
        let d = s.tape.dims(img).to_vec();
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape(format!("image batch must be [B,3,H,W], got {d:?}")));
        }
        let spec = self.spec_for(d[2], d[3])?;
        let mut x = img;
        let mut stage3 = img;
        for (i, blk) in self.backbone.iter().enumerate() {
            x = blk.forward(s, x)?;
            if i == 2 {
                stage3 = x;
            }
        }
        let feat_dims = s.tape.dims(x).to_vec();
        let zeros = |s: &mut Session| {
            let z = Tensor::zeros(&feat_dims, s.tape.value(x).dtype()).expect("valid dims");
            s.tape.leaf(z)
        };
        let (y, class_logits) = if self.config.use_caa {
            let out = caa_forward(s, x, &self.caa, &self.cca, self.config.use_cca)?;
            (out.y, Some(out.class_logits))
        } else {
            (zeros(s), None)
        };
        let z = if self.config.use_rsa {
            rsa_forward(s, x, &spec, &self.rsa)?.out
        } else {
            zeros(s)
        };
        let cat = s.tape.concat_channels(&[y, z, x])?;
        let fused = self.fusion.forward(s, cat)?;
        let coarse = self.classifier.forward(s, fused)?;
        let logits = s.tape.upsample_nearest(coarse, OUTPUT_STRIDE)?;
        let aux = self.aux.forward(s, stage3)?;
        let aux_logits = s.tape.upsample_nearest(aux, OUTPUT_STRIDE)?;
        Ok(NetOutput {
            logits,
            aux_logits,
            class_logits,
        })
    }

    /// Weighted training loss; terms with zero weight are skipped.
    pub fn loss(
        &self,
        s: &mut Session,
        out: &NetOutput,
        labels: &[usize],
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let d = s.tape.dims(out.logits).to_vec();
        let main = s.tape.cross_entropy(out.logits, labels)?;
        let mut terms = vec![(main, weights.main)];
        let mut br = LossBreakdown {
            main: s.value(main).item(),
            ..Default::default()
        };
        if weights.cls != 0.0 {
            if let Some(p) = out.class_logits {
                let small = downsample_labels(labels, d[0], d[2], d[3], OUTPUT_STRIDE);
                let cls = s.tape.cross_entropy(p, &small)?;
                br.cls = Some(s.value(cls).item());
                terms.push((cls, weights.cls));
            }
        }
        if weights.aux != 0.0 {
            let aux = s.tape.cross_entropy(out.aux_logits, labels)?;
            br.aux = Some(s.value(aux).item());
            terms.push((aux, weights.aux));
        }
        let mut total = s.tape.scale_const(terms[0].0, terms[0].1);
        for &(t, w) in &terms[1..] {
            let scaled = s.tape.scale_const(t, w);
            total = s.tape.add(total, scaled)?;
        }
        br.total = s.value(total).item();
        Ok((total, br))
    }
}

/// Nearest-neighbour label downsampling: each coarse cell takes the label at
/// the centre of its `f×f` block.
pub fn downsample_labels(labels: &[usize], b: usize, h: usize, w: usize, f: usize) -> Vec<usize> {
    let (hs, ws) = (h / f, w / f);
    let mut out = Vec::with_capacity(b * hs * ws);
    for bi in 0..b {
        for y in 0..hs {
            for x in 0..ws {
                out.push(labels[bi * h * w + (y * f + f / 2) * w + x * f + f / 2]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub main: f64,
    pub cls: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            main: 1.0,
            cls: 0.5,
            aux: 0.4,
        }
    }
}

pub fn total_loss(main: f64, cls: f64, aux: f64, w: &LossWeights) -> f64 {
    w.main * main + w.cls * cls + w.aux * aux
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub cls: Option<f64>,
    pub aux: Option<f64>,
}

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let i = id.index();
            if self.velocity.len() <= i {
                self.velocity.resize(i + 1, None);
            }
            let theta = store.get_mut(*id);
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let mut updated = theta.data().to_vec();
            for ((p, vi), gi) in updated.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *p;
                *p -= lr * *vi;
            }
            let dims = theta.dims().to_vec();
            *theta = Tensor::new(&dims, updated, theta.dtype()).expect("same dims");
        }
    }
}

/// `base · (1 − (iter/max_iter)^power)`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let t = (iter.min(max_iter)) as f64 / max_iter as f64;
    base_lr * (1.0 - t.powf(power))
}

/// One update on `(img, labels)`; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &HmaNet,
    store: &mut ParamStore,
    opt: &mut Sgd,
    img: &Tensor,
    labels: &[usize],
    lr: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (br, grads) = {
        let mut s = Session::new(store, true);
        let x = s.tape.leaf(img.clone());
        let out = net.forward(&mut s, x)?;
        let (loss, br) = net.loss(&mut s, &out, labels, weights)?;
        if !br.total.is_finite() {
            return Err(Error::Divergence(format!(
                "loss is {} (main {}, cls {:?}, aux {:?})",
                br.total, br.main, br.cls, br.aux
            )));
        }
        let g = s.tape.backward(loss)?;
        (br, s.param_grads(&g))
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient for {}",
            store.name(*id)
        )));
    }
    opt.step(store, &grads, lr);
    Ok(br)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub weights: LossWeights,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            weights: LossWeights::default(),
            augment: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Trains on `scenes`, drawing batches from seeded reshuffled epochs. The
/// callback sees every entry as it is produced.
pub fn train(
    net: &HmaNet,
    store: &mut ParamStore,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_entry: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    if scenes.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > scenes.len() {
        return Err(Error::usage(format!(
            "batch size {} must be in 1..={}",
            cfg.batch_size,
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = scenes.len();
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let scene = &scenes[order[cursor]];
            cursor += 1;
            batch.push(match &cfg.augment {
                Some(a) => {
                    let ops = sample_augment(scene, rng.next_u64(), a)?;
                    apply_augment(scene, &ops)?
                }
                None => scene.clone(),
            });
        }
        let refs: Vec<&Scene> = batch.iter().collect();
        let (img, labels) = to_batch(&refs)?;
        let lr = poly_lr(iter, cfg.iterations, cfg.base_lr, cfg.power);
        let loss = train_step(net, store, &mut opt, &img, &labels, lr, &cfg.weights)?;
        let entry = LogEntry { iter, lr, loss };
        on_entry(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Confusion matrix of the network's predictions over `scenes` (inference
/// mode, running batch-norm statistics).
pub fn evaluate_model(
    net: &HmaNet,
    store: &mut ParamStore,
    scenes: &[Scene],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if scenes.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(net.config.classes);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (img, labels) = to_batch(&refs)?;
        let mut s = Session::new(store, false);
        let x = s.tape.leaf(img);
        let out = net.forward(&mut s, x)?;
        let logits = s.value(out.logits);
        let pred = argmax_classes(logits.data(), logits.dims());
        cm.accumulate(&pred, &labels)?;
    }
    Ok(cm)
}

pub const CHECKPOINT_META: &str = "checkpoint.txt";

/// Saves parameters plus a metadata file (`key = value` lines followed by the
/// configuration echo).
pub fn save_checkpoint(dir: &Path, store: &ParamStore, iteration: usize, seed: u64, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    store.save_dir(dir)?;
    let mut meta = String::new();
    let _ = writeln!(meta, "iteration = {iteration}");
    let _ = writeln!(meta, "seed = {seed}");
    meta.push_str("# config\n");
    meta.push_str(config_echo);
    if !config_echo.ends_with('\n') {
        meta.push('\n');
    }
    fs::write(dir.join(CHECKPOINT_META), meta)?;
    Ok(())
}

/// Builds a network and overwrites its values from a checkpoint directory.
pub fn load_checkpoint(dir: &Path, config: NetConfig) -> Result<(HmaNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = HmaNet::new(&mut store, config, &mut rng)?;
    let saved = ParamStore::load_dir(dir)?;
    store.copy_values_from(&saved)?;
    Ok((net, store))
}

/// Deterministically initialised network and its parameters.
pub fn build(config: NetConfig, seed: u64) -> Result<(HmaNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = HmaNet::new(&mut store, config, &mut rng)?;
    Ok((net, store))
}

/// Sets every learnable residual scalar (`γ` of the class gate and both RSA
/// stage weights); used to exercise those paths in gradient checks.
pub fn set_mixing_scalars(store: &mut ParamStore, net: &HmaNet, gamma: f64, w: [f64; 2]) {
    net.cca.set_gamma(store, gamma);
    crate::rsa::set_stage_weights(store, &net.rsa, w);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn shapes_and_flags() {
        let cfg = NetConfig {
            gh: 2,
            gw: 2,
            ..Default::default()
        };
        for c in [cfg.clone(), cfg.without_attention()] {
            let (net, mut store) = build(c, 1).unwrap();
            let mut s = Session::new(&mut store, true);
            let x = s.tape.leaf(Tensor::zeros(&[2, 3, 32, 32], DType::F64).unwrap());
            let out = net.forward(&mut s, x).unwrap();
            assert_eq!(s.value(out.logits).dims(), &[2, 6, 32, 32]);
            assert_eq!(s.value(out.aux_logits).dims(), &[2, 6, 32, 32]);
            assert!(s.value(out.logits).all_finite());
            assert_eq!(out.class_logits.is_some(), net.config.use_caa);
        }
    }

    #[test]
    fn bad_geometry() {
        let (net, mut store) = build(NetConfig::default(), 0).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.tape.leaf(Tensor::zeros(&[1, 3, 36, 36], DType::F64).unwrap());
        assert!(net.forward(&mut s, x).is_err());
        // 16/8 = 2 is not divisible by a 4×4 grid
        let x = s.tape.leaf(Tensor::zeros(&[1, 3, 16, 16], DType::F64).unwrap());
        assert!(matches!(net.forward(&mut s, x), Err(Error::Partition(_))));
    }

    #[test]
    fn loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.9).abs() < 1e-15);
        assert!((total_loss(0.7, 0.9, 1.1, &w) - 1.59).abs() < 1e-15);
        let main_only = LossWeights {
            cls: 0.0,
            aux: 0.0,
            ..w
        };
        assert_eq!(total_loss(0.7, 0.9, 1.1, &main_only), 0.7);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9), 0.0);
        let mid = poly_lr(50, 100, 0.01, 0.9);
        assert!((mid - 0.01 * (1.0 - 0.5f64.powf(0.9))).abs() < 1e-15);
        assert!((mid - 0.004641).abs() < 1e-6);
    }

    #[test]
    fn label_downsampling_takes_block_centres() {
        let labels: Vec<usize> = (0..64).collect();
        assert_eq!(downsample_labels(&labels, 1, 8, 8, 4), vec![18, 22, 50, 54]);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[1], vec![1.0]), true);
        let mut opt = Sgd::new(0.9, 0.1);
        let g = vec![(id, Tensor::from_vec(&[1], vec![0.5]))];
        opt.step(&mut store, &g, 0.1);
        // v = 0.5 + 0.1·1 = 0.6, θ = 1 − 0.06
        assert!((store.get(id).item() - 0.94).abs() < 1e-15);
        opt.step(&mut store, &g, 0.1);
        // v = 0.9·0.6 + 0.5 + 0.094 = 1.134
        assert!((store.get(id).item() - (0.94 - 0.1134)).abs() < 1e-15);
    }
}

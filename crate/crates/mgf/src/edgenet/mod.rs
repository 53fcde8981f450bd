//! Three-stage grain-boundary detector built on pixel-difference
//! convolutions.
//!
//! Each stage is a strided entry convolution followed by four residual
//! blocks (pixel-difference conv, ReLU, 1x1 conv, skip add). A refinement
//! branch per stage - a compact multi-dilation convolution module feeding a
//! large-kernel attention - produces a single-channel side output that is
//! resized to input resolution and squashed through a sigmoid. The three
//! side maps are fused by concatenation, a 1x1 convolution, and a final
//! sigmoid. Training applies a Dice loss to every side output and to the
//! fused map (deep supervision); the trunk features, not the refined ones,
//! feed the next stage.

pub mod metrics;
pub mod pdc;

pub use metrics::{edge_metrics, EdgeMetrics, EdgeMetricsSummary};
pub use pdc::{pdc_to_vanilla, PdcKind};

use crate::error::{MgfError, Result};
use crate::img::{BinaryMask, GrayImage, ProbMap};
use crate::rng::Rng;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::ops::ConvSpec;
use crate::tensor::params::{AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EdgeNetConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub stage_channels: Vec<usize>,
    pub pdc_schedule: Vec<PdcKind>,
    pub cpcm_dilations: Vec<usize>,
    /// Channel reduction factor of the compact multi-dilation module.
    pub cpcm_reduction: usize,
    pub lka_dw_kernel: usize,
    pub lka_dwd_kernel: usize,
    pub lka_dwd_dilation: usize,
}

impl Default for EdgeNetConfig {
    fn default() -> Self {
        let schedule_unit = [PdcKind::Cpdc, PdcKind::Apdc, PdcKind::Rpdc, PdcKind::Vanilla];
        EdgeNetConfig {
            stages: 3,
            blocks_per_stage: 4,
            stage_channels: vec![16, 32, 64],
            pdc_schedule: schedule_unit
                .iter()
                .cycle()
                .take(12)
                .copied()
                .collect(),
            cpcm_dilations: vec![1, 2, 4, 8],
            cpcm_reduction: 4,
            lka_dw_kernel: 5,
            lka_dwd_kernel: 7,
            lka_dwd_dilation: 3,
        }
    }
}

impl EdgeNetConfig {
    /// Scaled-down variant for quick experiments and smoke tests.
    pub fn tiny() -> Self {
        let schedule_unit = [PdcKind::Cpdc, PdcKind::Apdc, PdcKind::Rpdc, PdcKind::Vanilla];
        EdgeNetConfig {
            stages: 2,
            blocks_per_stage: 2,
            stage_channels: vec![8, 16],
            pdc_schedule: schedule_unit.iter().cycle().take(4).copied().collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.blocks_per_stage == 0 {
            return Err(MgfError::invalid_argument(
                "edge net needs at least one stage and one block",
            ));
        }
        if self.stage_channels.len() != self.stages {
            return Err(MgfError::invalid_argument(format!(
                "{} stage channel entries for {} stages",
                self.stage_channels.len(),
                self.stages
            )));
        }
        if self.pdc_schedule.len() != self.stages * self.blocks_per_stage {
            return Err(MgfError::invalid_argument(format!(
                "pdc schedule length {} != stages x blocks = {}",
                self.pdc_schedule.len(),
                self.stages * self.blocks_per_stage
            )));
        }
        for &c in &self.stage_channels {
            if c == 0 || c % self.cpcm_reduction != 0 {
                return Err(MgfError::invalid_argument(format!(
                    "stage channels must be positive multiples of the {}x reduction, got {}",
                    self.cpcm_reduction, c
                )));
            }
        }
        if self.cpcm_dilations.is_empty() {
            return Err(MgfError::invalid_argument("cpcm needs dilation branches"));
        }
        Ok(())
    }
}

/// Side and fused probability-map nodes of one forward pass.
pub struct EdgeForward {
    pub side: Vec<NodeId>,
    pub fused: NodeId,
}

pub struct EdgeNet {
    config: EdgeNetConfig,
}

impl EdgeNet {
    pub fn new(config: EdgeNetConfig) -> Result<EdgeNet> {
        config.validate()?;
        Ok(EdgeNet { config })
    }

    pub fn config(&self) -> &EdgeNetConfig {
        &self.config
    }

    /// Register all parameters under `edge.*` with He-normal weights and
    /// zero biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let cfg = &self.config;
        let mut prev_ch = 1;
        for si in 0..cfg.stages {
            let c = cfg.stage_channels[si];
            let p = |suffix: &str| format!("edge.s{si}.{suffix}");
            store.register_he(&p("entry.w"), &[c, prev_ch, 3, 3], prev_ch * 9, rng)?;
            store.register(&p("entry.b"), Tensor::zeros(&[c]))?;
            for bi in 0..cfg.blocks_per_stage {
                let kind = cfg.pdc_schedule[si * cfg.blocks_per_stage + bi];
                let k = kind.kernel_size();
                store.register_he(&p(&format!("b{bi}.pdc.w")), &[c, c, k, k], c * k * k, rng)?;
                // Residual tails start small so blocks begin near identity.
                store.register_he_scaled(&p(&format!("b{bi}.pw.w")), &[c, c, 1, 1], c, 0.5, rng)?;
                store.register(&p(&format!("b{bi}.pw.b")), Tensor::zeros(&[c]))?;
            }
            let cc = c / cfg.cpcm_reduction;
            store.register_he(&p("cpcm.red.w"), &[cc, c, 1, 1], c, rng)?;
            store.register(&p("cpcm.red.b"), Tensor::zeros(&[cc]))?;
            for (di, _) in cfg.cpcm_dilations.iter().enumerate() {
                store.register_he(&p(&format!("cpcm.d{di}.w")), &[cc, cc, 3, 3], cc * 9, rng)?;
                store.register(&p(&format!("cpcm.d{di}.b")), Tensor::zeros(&[cc]))?;
            }
            let dk = cfg.lka_dw_kernel;
            let ddk = cfg.lka_dwd_kernel;
            store.register_he(&p("lka.dw.w"), &[cc, 1, dk, dk], dk * dk, rng)?;
            store.register_he(&p("lka.dwd.w"), &[cc, 1, ddk, ddk], ddk * ddk, rng)?;
            // The gate starts near one so attention is initially transparent.
            store.register_he_scaled(&p("lka.pw.w"), &[cc, cc, 1, 1], cc, 0.1, rng)?;
            store.register(&p("lka.pw.b"), Tensor::full(&[cc], 1.0))?;
            store.register_he_scaled(&p("side.w"), &[1, cc, 1, 1], cc, 0.1, rng)?;
            store.register(&p("side.b"), Tensor::zeros(&[1]))?;
            prev_ch = c;
        }
        store.register_he(
            "edge.fuse.w",
            &[1, cfg.stages, 1, 1],
            cfg.stages,
            rng,
        )?;
        store.register("edge.fuse.b", Tensor::zeros(&[1]))?;
        Ok(())
    }

    fn conv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        w_name: &str,
        b_name: Option<&str>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let w = g.param(store, w_name)?;
        let b = match b_name {
            Some(n) => Some(g.param(store, n)?),
            None => None,
        };
        g.conv2d(x, w, b, spec)
    }

    /// One residual block: x + conv1x1(relu(pdc(x))). The pixel-difference
    /// conv samples replicate-padded values so constants pass through the
    /// skip path untouched.
    fn pdc_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        stage: usize,
        block: usize,
        kind: PdcKind,
    ) -> Result<NodeId> {
        let k = kind.kernel_size();
        let w_raw = g.param(store, &format!("edge.s{stage}.b{block}.pdc.w"))?;
        let w = if kind == PdcKind::Vanilla {
            w_raw
        } else {
            g.kernel_map(w_raw, &pdc::transform_triples(kind))?
        };
        let padded = g.replicate_pad(x, k / 2)?;
        let conv = g.conv2d(padded, w, None, ConvSpec::default())?;
        let act = g.relu(conv);
        let pw = self.conv(
            g,
            store,
            act,
            &format!("edge.s{stage}.b{block}.pw.w"),
            Some(&format!("edge.s{stage}.b{block}.pw.b")),
            ConvSpec::default(),
        )?;
        g.add(x, pw)
    }

    /// Compact multi-dilation convolution: 1x1 channel reduction then the
    /// dilated 3x3 branches summed. Branches use replicate padding so a
    /// constant map stays constant per channel.
    fn cpcm(&self, g: &mut Graph, store: &ParamStore, x: NodeId, stage: usize) -> Result<NodeId> {
        let red = self.conv(
            g,
            store,
            x,
            &format!("edge.s{stage}.cpcm.red.w"),
            Some(&format!("edge.s{stage}.cpcm.red.b")),
            ConvSpec::default(),
        )?;
        let mut acc: Option<NodeId> = None;
        for (di, &d) in self.config.cpcm_dilations.iter().enumerate() {
            let padded = g.replicate_pad(red, d)?;
            let spec = ConvSpec {
                dilation: d,
                ..Default::default()
            };
            let branch = self.conv(
                g,
                store,
                padded,
                &format!("edge.s{stage}.cpcm.d{di}.w"),
                Some(&format!("edge.s{stage}.cpcm.d{di}.b")),
                spec,
            )?;
            acc = Some(match acc {
                None => branch,
                Some(a) => g.add(a, branch)?,
            });
        }
        Ok(acc.expect("at least one dilation branch"))
    }

    /// Large-kernel attention: depthwise 5x5, depthwise dilated 7x7, 1x1,
    /// then element-wise gating of the input.
    fn lka(&self, g: &mut Graph, store: &ParamStore, x: NodeId, stage: usize) -> Result<NodeId> {
        let cfg = &self.config;
        let cc = g.value(x).shape()[1];
        let dw = self.conv(
            g,
            store,
            x,
            &format!("edge.s{stage}.lka.dw.w"),
            None,
            ConvSpec {
                padding: cfg.lka_dw_kernel / 2,
                groups: cc,
                ..Default::default()
            },
        )?;
        let dwd = self.conv(
            g,
            store,
            dw,
            &format!("edge.s{stage}.lka.dwd.w"),
            None,
            ConvSpec {
                padding: (cfg.lka_dwd_kernel / 2) * cfg.lka_dwd_dilation,
                dilation: cfg.lka_dwd_dilation,
                groups: cc,
                ..Default::default()
            },
        )?;
        let attention = self.conv(
            g,
            store,
            dwd,
            &format!("edge.s{stage}.lka.pw.w"),
            Some(&format!("edge.s{stage}.lka.pw.b")),
            ConvSpec::default(),
        )?;
        g.mul(x, attention)
    }

    /// Full forward pass over a (1, 1, h, w) image tensor.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<EdgeForward> {
        let cfg = &self.config;
        let (out_h, out_w) = (image.shape()[2], image.shape()[3]);
        let mut feat = g.constant(image.clone());
        let mut side = Vec::with_capacity(cfg.stages);
        for si in 0..cfg.stages {
            let stride = if si == 0 { 1 } else { 2 };
            let entry = self.conv(
                g,
                store,
                feat,
                &format!("edge.s{si}.entry.w"),
                Some(&format!("edge.s{si}.entry.b")),
                ConvSpec {
                    stride,
                    padding: 1,
                    ..Default::default()
                },
            )?;
            feat = g.relu(entry);
            for bi in 0..cfg.blocks_per_stage {
                let kind = cfg.pdc_schedule[si * cfg.blocks_per_stage + bi];
                feat = self.pdc_block(g, store, feat, si, bi, kind)?;
            }
            let refined = self.cpcm(g, store, feat, si)?;
            let refined = self.lka(g, store, refined, si)?;
            let logits = self.conv(
                g,
                store,
                refined,
                &format!("edge.s{si}.side.w"),
                Some(&format!("edge.s{si}.side.b")),
                ConvSpec::default(),
            )?;
            let resized = g.bilinear_resize(logits, out_h, out_w)?;
            side.push(g.sigmoid(resized));
        }
        let cat = g.concat_channels(&side)?;
        let fuse_w = g.param(store, "edge.fuse.w")?;
        let fuse_b = g.param(store, "edge.fuse.b")?;
        let fused_logits = g.conv2d(cat, fuse_w, Some(fuse_b), ConvSpec::default())?;
        let fused = g.sigmoid(fused_logits);
        Ok(EdgeForward { side, fused })
    }

    /// Deep-supervision objective: the sum of the Dice losses of every side
    /// output plus the fused output.
    pub fn supervision_loss(
        &self,
        g: &mut Graph,
        fwd: &EdgeForward,
        target: &Tensor,
    ) -> Result<NodeId> {
        let mut total = g.dice_loss(fwd.fused, target, DICE_EPS)?;
        for &s in &fwd.side {
            let l = g.dice_loss(s, target, DICE_EPS)?;
            total = g.add(total, l)?;
        }
        Ok(total)
    }
}

/// Dice loss 1 - (2*sum(pq) + eps) / (sum(p^2) + sum(q^2) + eps) as a plain
/// measurement (no gradients).
pub fn dice_loss(pred: &ProbMap, target: &BinaryMask) -> Result<f64> {
    if pred.h != target.h || pred.w != target.w {
        return Err(MgfError::shape_mismatch(format!(
            "dice of {}x{} prediction vs {}x{} target",
            pred.h, pred.w, target.h, target.w
        )));
    }
    let mut s_pq = 0.0;
    let mut s_pp = 0.0;
    let mut s_qq = 0.0;
    for (p, &t) in pred.data().iter().zip(target.data()) {
        let q = if t { 1.0 } else { 0.0 };
        s_pq += p * q;
        s_pp += p * p;
        s_qq += q;
    }
    Ok(1.0 - (2.0 * s_pq + DICE_EPS) / (s_pp + s_qq + DICE_EPS))
}

#[derive(Clone, Debug)]
pub struct EdgeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EdgeTrainConfig {
    fn default() -> Self {
        EdgeTrainConfig {
            epochs: 30,
            lr: 1e-3,
            seed: 7,
        }
    }
}

/// Train the detector; returns the parameter store and the per-epoch mean
/// total loss. Deterministic for a fixed seed.
pub fn train_edge_detector(
    images: &[GrayImage],
    masks: &[BinaryMask],
    config: &EdgeNetConfig,
    train: &EdgeTrainConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(MgfError::invalid_argument(format!(
            "training needs aligned nonempty image/mask lists, got {}/{}",
            images.len(),
            masks.len()
        )));
    }
    let net = EdgeNet::new(config.clone())?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(train.seed).derive(0xED6E);
    net.init_params(&mut store, &mut rng)?;
    let adam = AdamConfig {
        lr: train.lr,
        ..Default::default()
    };
    let mut curve = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        let mut total = 0.0;
        for (img, mask) in images.iter().zip(masks) {
            let mut g = Graph::new();
            let fwd = net.forward(&mut g, &store, &img.to_tensor())?;
            let loss = net.supervision_loss(&mut g, &fwd, &mask.to_tensor())?;
            total += g.value(loss).item();
            store.zero_grads();
            g.backward(loss, &mut store)?;
            store.adam_step(&adam)?;
        }
        curve.push(total / images.len() as f64);
    }
    Ok((store, curve))
}

/// Run the detector, returning per-stage probability maps and the fused map
/// at input resolution.
pub fn detect_edges(
    image: &GrayImage,
    store: &ParamStore,
    config: &EdgeNetConfig,
) -> Result<(Vec<ProbMap>, ProbMap)> {
    let net = EdgeNet::new(config.clone())?;
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, store, &image.to_tensor())?;
    let side = fwd
        .side
        .iter()
        .map(|&id| ProbMap::from_tensor(g.value(id)))
        .collect::<Result<Vec<_>>>()?;
    let fused = ProbMap::from_tensor(g.value(fwd.fused))?;
    Ok((side, fused))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> (EdgeNet, ParamStore) {
        let net = EdgeNet::new(EdgeNetConfig::tiny()).unwrap();
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut Rng::new(3)).unwrap();
        (net, store)
    }

    #[test]
    fn config_schedule_length_enforced() {
        let cfg = EdgeNetConfig {
            pdc_schedule: vec![PdcKind::Cpdc],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(EdgeNetConfig::default().validate().is_ok());
    }

    #[test]
    fn forward_outputs_probabilities_at_input_size() {
        let (net, store) = tiny_net();
        let img = Tensor::from_fn(&[1, 1, 12, 12], |i| (i % 7) as f64 / 7.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &store, &img).unwrap();
        assert_eq!(fwd.side.len(), 2);
        for &s in fwd.side.iter().chain([&fwd.fused]) {
            let v = g.value(s);
            assert_eq!(v.shape(), &[1, 1, 12, 12]);
            assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn zeroed_block_params_give_identity_block() {
        let (net, mut store) = tiny_net();
        for name in [
            "edge.s0.b0.pdc.w",
            "edge.s0.b0.pw.w",
            "edge.s0.b0.pw.b",
        ] {
            let shape = store.value(name).unwrap().shape().to_vec();
            *store.value_mut(name).unwrap() = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 8, 6, 6], |i| (i as f64).sin()));
        let y = net
            .pdc_block(&mut g, &store, x, 0, 0, PdcKind::Cpdc)
            .unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn constant_input_passes_cpdc_block_unchanged() {
        // Nonzero pdc and 1x1 weights, zero 1x1 bias: the difference conv
        // kills the constant so the residual path is all that remains.
        let (net, store) = tiny_net();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8, 6, 6], 0.37));
        let y = net
            .pdc_block(&mut g, &store, x, 0, 0, PdcKind::Cpdc)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cpcm_preserves_constants_per_channel() {
        let (net, mut store) = tiny_net();
        for di in 0..4 {
            let name = format!("edge.s0.cpcm.d{di}.b");
            let shape = store.value(&name).unwrap().shape().to_vec();
            *store.value_mut(&name).unwrap() = Tensor::zeros(&shape);
        }
        let name = "edge.s0.cpcm.red.b";
        let shape = store.value(name).unwrap().shape().to_vec();
        *store.value_mut(name).unwrap() = Tensor::zeros(&shape);

        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8, 10, 10], 0.42));
        let y = net.cpcm(&mut g, &store, x, 0).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape()[1], 2); // 8 channels / 4x reduction
        for c in 0..2 {
            let plane = &v.data()[c * 100..(c + 1) * 100];
            for p in plane {
                assert!((p - plane[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lka_zero_weights_zero_output_and_unit_attention_identity() {
        let (net, mut store) = tiny_net();
        // Zero 1x1 weights + zero bias -> attention = 0 -> output = 0.
        let shape = store.value("edge.s0.lka.pw.w").unwrap().shape().to_vec();
        *store.value_mut("edge.s0.lka.pw.w").unwrap() = Tensor::zeros(&shape);
        let b_shape = store.value("edge.s0.lka.pw.b").unwrap().shape().to_vec();
        *store.value_mut("edge.s0.lka.pw.b").unwrap() = Tensor::zeros(&b_shape);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 5, 5], |i| i as f64 * 0.1));
        let y = net.lka(&mut g, &store, x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        // Bias 1 with zero weights -> attention = 1 -> output == x.
        let b_shape = store.value("edge.s0.lka.pw.b").unwrap().shape().to_vec();
        *store.value_mut("edge.s0.lka.pw.b").unwrap() = Tensor::full(&b_shape, 1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 5, 5], |i| i as f64 * 0.1));
        let y = net.lka(&mut g, &store, x, 0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_side_params_give_uniform_half_maps() {
        let (net, mut store) = tiny_net();
        for si in 0..2 {
            for name in [format!("edge.s{si}.side.w"), format!("edge.s{si}.side.b")] {
                let shape = store.value(&name).unwrap().shape().to_vec();
                *store.value_mut(&name).unwrap() = Tensor::zeros(&shape);
            }
        }
        let img = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &store, &img).unwrap();
        for &s in &fwd.side {
            for v in g.value(s).data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_loss_examples() {
        // Perfect binary overlap -> 0.
        let m = BinaryMask::from_data(1, 4, vec![true, false, true, false]).unwrap();
        let p = ProbMap::new(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(dice_loss(&p, &m).unwrap().abs() < 1e-9);

        // Empty prediction vs nonempty target -> loss near 1.
        let p0 = ProbMap::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(dice_loss(&p0, &m).unwrap() > 1.0 - 1e-5);

        // Hand-evaluated half-overlap: coefficient 2/3, loss 1/3.
        let m2 = BinaryMask::from_data(1, 2, vec![true, false]).unwrap();
        let p2 = ProbMap::new(1, 2, vec![0.5, 0.5]).unwrap();
        let l = dice_loss(&p2, &m2).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-6);

        // Empty vs empty -> loss 0 via the smoothing term.
        let me = BinaryMask::empty(2, 2);
        let pe = ProbMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(dice_loss(&pe, &me).unwrap().abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let mut img = GrayImage::constant(10, 10, 0.8, 1.0);
        let mut mask = BinaryMask::empty(10, 10);
        for r in 0..10 {
            img.set(r, 5, 0.2);
            mask.set(r, 5, true);
        }
        let cfg = EdgeNetConfig::tiny();
        let t = EdgeTrainConfig {
            epochs: 3,
            lr: 1e-2,
            seed: 5,
        };
        let (_, curve1) = train_edge_detector(
            std::slice::from_ref(&img),
            std::slice::from_ref(&mask),
            &cfg,
            &t,
        )
        .unwrap();
        let (_, curve2) = train_edge_detector(
            std::slice::from_ref(&img),
            std::slice::from_ref(&mask),
            &cfg,
            &t,
        )
        .unwrap();
        assert_eq!(curve1, curve2);
        assert!(curve1.last().unwrap() < curve1.first().unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train_edge_detector(
            &[],
            &[],
            &EdgeNetConfig::tiny(),
            &EdgeTrainConfig::default()
        )
        .is_err());
    }
}

//! The toy VGG-style detector and its five ablation variants.
//!
//! Trunk (widths `w1/w2/w3`, input `S`):
//!
//! ```text
//! conv 3→w1/2, pool, conv →w1, pool, conv w1→w1, pool, conv w1→w1   tap_small  S/8
//! [top block w1], pool, conv w1→w2                                   tap_mid    S/16
//! [top block w2], conv w2→w3 stride 2                                tap_deep   S/32
//! ```
//!
//! Detection branches then optionally fuse each of the two shallow taps
//! with its deeper neighbour (FFB) and enhance it with a CFE before the
//! heads.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_default_boxes, DefaultBoxSet, TapSpec};
use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::layers::{
    apply_bn_updates, BnUpdate, Builder, Cfe, CfeConfig, ConvBnRelu, Ctx, Ffb, FfbConfig, Head,
    Inception, MaxPool, Module, Rf,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TAP_NAMES: [&str; 3] = ["tap_small", "tap_mid", "tap_deep"];
pub const TAP_STRIDES: [usize; 3] = [8, 16, 32];
pub const SUPPORTED_INPUT_SIZES: [usize; 3] = [64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    SsdBaseline,
    IncepTop,
    CfeTop,
    CfeTopBottom,
    CfenetFull,
}

impl ArchVariant {
    pub const ALL: [ArchVariant; 5] = [
        ArchVariant::SsdBaseline,
        ArchVariant::IncepTop,
        ArchVariant::CfeTop,
        ArchVariant::CfeTopBottom,
        ArchVariant::CfenetFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchVariant::SsdBaseline => "ssd_baseline",
            ArchVariant::IncepTop => "incep_top",
            ArchVariant::CfeTop => "cfe_top",
            ArchVariant::CfeTopBottom => "cfe_top_bottom",
            ArchVariant::CfenetFull => "cfenet_full",
        }
    }

    fn top(self) -> Option<TopKind> {
        match self {
            ArchVariant::SsdBaseline => None,
            ArchVariant::IncepTop => Some(TopKind::Inception),
            _ => Some(TopKind::Cfe),
        }
    }

    fn bottom_cfe(self) -> bool {
        matches!(self, ArchVariant::CfeTopBottom | ArchVariant::CfenetFull)
    }

    fn ffb(self) -> bool {
        self == ArchVariant::CfenetFull
    }
}

impl fmt::Display for ArchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TopKind {
    Cfe,
    Inception,
}

fn default_widths() -> [usize; 3] {
    [32, 64, 128]
}
fn default_k() -> usize {
    7
}
fn default_ratio() -> f64 {
    0.5
}
fn default_aspect_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_scales() -> [f64; 3] {
    [0.1, 0.3, 0.6]
}
fn default_true() -> bool {
    true
}

/// Architecture description, also the on-disk JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: ArchVariant,
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 3],
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_ratio")]
    pub bottleneck_ratio: f64,
    #[serde(default = "default_aspect_ratios")]
    pub aspect_ratios: Vec<f64>,
    /// Anchor side per tap as a fraction of `input_size`.
    #[serde(default = "default_scales")]
    pub anchor_scales: [f64; 3],
    /// Put the bottom CFEs after the fusion blocks rather than before.
    #[serde(default = "default_true")]
    pub cfe_after_ffb: bool,
}

impl ArchConfig {
    pub fn new(variant: ArchVariant, input_size: usize, num_classes: usize) -> Self {
        ArchConfig {
            variant,
            input_size,
            num_classes,
            widths: default_widths(),
            k: default_k(),
            bottleneck_ratio: default_ratio(),
            aspect_ratios: default_aspect_ratios(),
            anchor_scales: default_scales(),
            cfe_after_ffb: true,
        }
    }

    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_INPUT_SIZES.contains(&self.input_size) {
            return Err(Error::invalid(format!(
                "input_size {} not one of {:?}",
                self.input_size, SUPPORTED_INPUT_SIZES
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.widths.iter().any(|&w| w < 2 || w % 2 != 0) {
            return Err(Error::invalid(format!("widths {:?} must be even and ≥ 2", self.widths)));
        }
        if self.variant == ArchVariant::IncepTop && self.widths[..2].iter().any(|w| w % 4 != 0) {
            return Err(Error::invalid("incep_top needs the first two widths divisible by 4"));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("aspect ratios must be non-empty and positive"));
        }
        if self.anchor_scales.windows(2).any(|p| p[1] <= p[0]) || self.anchor_scales[0] <= 0.0 {
            return Err(Error::invalid("anchor scales must be positive and increasing"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ArchConfig = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "architecture config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Anchor layout for a network input of `height × width` pixels. Anchor
    /// sides stay fixed in pixels whatever the input size.
    pub fn tap_specs(&self, height: usize, width: usize) -> Vec<TapSpec> {
        TAP_STRIDES
            .iter()
            .zip(self.anchor_scales)
            .map(|(&s, frac)| TapSpec {
                h: height / s,
                w: width / s,
                stride: s as f64,
                scale: frac * self.input_size as f64,
                aspect_ratios: self.aspect_ratios.clone(),
            })
            .collect()
    }

    pub fn default_boxes<T: Scalar>(&self, height: usize, width: usize) -> Result<DefaultBoxSet<T>> {
        generate_default_boxes(&self.tap_specs(height, width), (height, width))
    }
}

#[derive(Debug, Clone)]
enum TopBlock {
    Cfe(Cfe),
    Inception(Inception),
}

impl TopBlock {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        match self {
            TopBlock::Cfe(b) => b.forward(cx, x),
            TopBlock::Inception(b) => b.forward(cx, x),
        }
    }

    fn receptive(&self, rf: Rf) -> Rf {
        match self {
            TopBlock::Cfe(b) => b.receptive(rf),
            TopBlock::Inception(b) => b.receptive(rf),
        }
    }

    fn macs(&self, s: [usize; 4]) -> Result<(u64, [usize; 4])> {
        match self {
            TopBlock::Cfe(b) => b.macs(s),
            TopBlock::Inception(b) => b.macs(s),
        }
    }
}

/// Layer structure of a detector; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub config: ArchConfig,
    stem: Vec<StemLayer>,
    top1: Option<TopBlock>,
    pool_mid: MaxPool,
    to_mid: ConvBnRelu,
    top2: Option<TopBlock>,
    to_deep: ConvBnRelu,
    ffb: Option<[Ffb; 2]>,
    bottom: Option<[Cfe; 2]>,
    heads: [Head; 3],
}

#[derive(Debug, Clone)]
enum StemLayer {
    Conv(ConvBnRelu),
    Pool(MaxPool),
}

impl StemLayer {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        match self {
            StemLayer::Conv(l) => l.forward(cx, x),
            StemLayer::Pool(l) => l.forward(cx, x),
        }
    }

    fn receptive(&self, rf: Rf) -> Rf {
        match self {
            StemLayer::Conv(l) => l.receptive(rf),
            StemLayer::Pool(l) => l.receptive(rf),
        }
    }

    fn macs(&self, s: [usize; 4]) -> Result<(u64, [usize; 4])> {
        match self {
            StemLayer::Conv(l) => l.macs(s),
            StemLayer::Pool(l) => l.macs(s),
        }
    }
}

/// Head outputs of one tap, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct TapNodes {
    pub class_logits: NodeId,
    pub box_deltas: NodeId,
}

/// Head outputs of one tap, as values.
#[derive(Debug, Clone)]
pub struct TapOutput<T> {
    pub class_logits: Tensor<T>,
    pub box_deltas: Tensor<T>,
}

fn pool() -> MaxPool {
    MaxPool {
        kernel: 2,
        stride: 2,
    }
}

/// Allocates every layer of `config` in `store`, initialized from `seed`.
pub fn build_network<T: Scalar>(
    config: &ArchConfig,
    store: &mut ParamStore<T>,
    seed: u64,
) -> Result<NetworkGraph> {
    config.validate()?;
    let [w1, w2, w3] = config.widths;
    let a = config.anchors_per_cell();
    let mut b = Builder::new(store, seed);
    let cfe_cfg = |c: usize| CfeConfig {
        channels_in: c,
        k: config.k,
        bottleneck_ratio: config.bottleneck_ratio,
    };
    let stem = vec![
        StemLayer::Conv(ConvBnRelu::new(&mut b, "stem.0", 3, w1 / 2, (3, 3), 1)?),
        StemLayer::Pool(pool()),
        StemLayer::Conv(ConvBnRelu::new(&mut b, "stem.1", w1 / 2, w1, (3, 3), 1)?),
        StemLayer::Pool(pool()),
        StemLayer::Conv(ConvBnRelu::new(&mut b, "stem.2", w1, w1, (3, 3), 1)?),
        StemLayer::Pool(pool()),
        StemLayer::Conv(ConvBnRelu::new(&mut b, "stem.3", w1, w1, (3, 3), 1)?),
    ];
    let top = |b: &mut Builder<T>, name: &str, c: usize| -> Result<Option<TopBlock>> {
        Ok(match config.variant.top() {
            None => None,
            Some(TopKind::Cfe) => Some(TopBlock::Cfe(Cfe::new(b, name, cfe_cfg(c))?)),
            Some(TopKind::Inception) => Some(TopBlock::Inception(Inception::new(b, name, c)?)),
        })
    };
    let top1 = top(&mut b, "top1", w1)?;
    let to_mid = ConvBnRelu::new(&mut b, "mid.conv", w1, w2, (3, 3), 1)?;
    let top2 = top(&mut b, "top2", w2)?;
    let to_deep = ConvBnRelu::new(&mut b, "deep.conv", w2, w3, (3, 3), 2)?;
    let ffb = if config.variant.ffb() {
        Some([
            Ffb::new(&mut b, "ffb_small", FfbConfig { channels_a: w1, channels_b: w2, channels_out: w1, residual: true })?,
            Ffb::new(&mut b, "ffb_mid", FfbConfig { channels_a: w2, channels_b: w3, channels_out: w2, residual: true })?,
        ])
    } else {
        None
    };
    let bottom = if config.variant.bottom_cfe() {
        Some([
            Cfe::new(&mut b, "bottom_small", cfe_cfg(w1))?,
            Cfe::new(&mut b, "bottom_mid", cfe_cfg(w2))?,
        ])
    } else {
        None
    };
    let nc = config.num_classes;
    let heads = [
        Head::new(&mut b, "head_small", w1, a, nc)?,
        Head::new(&mut b, "head_mid", w2, a, nc)?,
        Head::new(&mut b, "head_deep", w3, a, nc)?,
    ];
    Ok(NetworkGraph {
        config: config.clone(),
        stem,
        top1,
        pool_mid: pool(),
        to_mid,
        top2,
        to_deep,
        ffb,
        bottom,
        heads,
    })
}

impl NetworkGraph {
    /// Records the forward pass on `cx` and returns per-tap head nodes.
    /// Accepts any spatial size that is a positive multiple of 32.
    pub fn forward_nodes<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<[TapNodes; 3]> {
        let [n, c, h, w] = cx.graph.value(x).shape();
        if n == 0 || c != 3 {
            return Err(Error::shape("forward", format!("expected (N≥1, 3, H, W), got {:?}", [n, c, h, w])));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape("forward", format!("spatial size {h}×{w} is not a multiple of 32")));
        }
        let mut t = x;
        for l in &self.stem {
            t = l.forward(cx, t)?;
        }
        let tap_small = t;
        if let Some(b) = &self.top1 {
            t = b.forward(cx, t)?;
        }
        t = self.pool_mid.forward(cx, t)?;
        let tap_mid = self.to_mid.forward(cx, t)?;
        t = tap_mid;
        if let Some(b) = &self.top2 {
            t = b.forward(cx, t)?;
        }
        let tap_deep = self.to_deep.forward(cx, t)?;

        let mut branches = [tap_small, tap_mid];
        let sources = [(tap_small, tap_mid), (tap_mid, tap_deep)];
        for i in 0..2 {
            let mut f = branches[i];
            let before = !self.config.cfe_after_ffb;
            if before {
                if let Some(cfe) = &self.bottom {
                    f = cfe[i].forward(cx, f)?;
                }
            }
            if let Some(ffb) = &self.ffb {
                f = ffb[i].forward(cx, f, sources[i].1)?;
            }
            if !before {
                if let Some(cfe) = &self.bottom {
                    f = cfe[i].forward(cx, f)?;
                }
            }
            branches[i] = f;
        }
        let feats = [branches[0], branches[1], tap_deep];
        let mut out = [TapNodes { class_logits: x, box_deltas: x }; 3];
        for (i, (head, f)) in self.heads.iter().zip(feats).enumerate() {
            let (cls, bbox) = head.forward(cx, f)?;
            out[i] = TapNodes {
                class_logits: cls,
                box_deltas: bbox,
            };
        }
        Ok(out)
    }

    fn tap_rf(&self) -> [Rf; 3] {
        let mut rf = Rf::INPUT;
        for l in &self.stem {
            rf = l.receptive(rf);
        }
        let small = rf;
        if let Some(b) = &self.top1 {
            rf = b.receptive(rf);
        }
        rf = self.pool_mid.receptive(rf);
        let mid = self.to_mid.receptive(rf);
        rf = mid;
        if let Some(b) = &self.top2 {
            rf = b.receptive(rf);
        }
        let deep = self.to_deep.receptive(rf);
        let mut branches = [small, mid];
        let coarse = [mid, deep];
        for i in 0..2 {
            let mut r = branches[i];
            let before = !self.config.cfe_after_ffb;
            if before {
                if let Some(c) = &self.bottom {
                    r = c[i].receptive(r);
                }
            }
            if let Some(f) = &self.ffb {
                r = f[i].receptive(r, coarse[i]);
            }
            if !before {
                if let Some(c) = &self.bottom {
                    r = c[i].receptive(r);
                }
            }
            branches[i] = r;
        }
        [branches[0], branches[1], deep]
    }

    /// Analytic receptive field, in input pixels, of the features a tap's
    /// heads read (the head convolution itself excluded).
    pub fn receptive_field_of(&self, tap: &str) -> Result<usize> {
        let i = TAP_NAMES
            .iter()
            .position(|&t| t == tap)
            .ok_or_else(|| Error::invalid(format!("unknown tap {tap:?}")))?;
        Ok(self.tap_rf()[i].size())
    }

    /// Multiply-accumulates of one forward pass over an `N×3×S×S` batch.
    pub fn macs(&self, batch: usize) -> Result<u64> {
        let s = self.config.input_size;
        let mut shape = [batch, 3, s, s];
        let mut total = 0;
        let step = |m: (u64, [usize; 4]), total: &mut u64| {
            *total += m.0;
            m.1
        };
        for l in &self.stem {
            shape = step(l.macs(shape)?, &mut total);
        }
        let small = shape;
        if let Some(b) = &self.top1 {
            shape = step(b.macs(shape)?, &mut total);
        }
        shape = step(self.pool_mid.macs(shape)?, &mut total);
        let mid = step(self.to_mid.macs(shape)?, &mut total);
        shape = mid;
        if let Some(b) = &self.top2 {
            shape = step(b.macs(shape)?, &mut total);
        }
        let deep = step(self.to_deep.macs(shape)?, &mut total);
        let mut branches = [small, mid];
        let coarse = [mid, deep];
        for i in 0..2 {
            if let Some(f) = &self.ffb {
                branches[i] = step(f[i].macs(branches[i], coarse[i])?, &mut total);
            }
            if let Some(c) = &self.bottom {
                branches[i] = step(c[i].macs(branches[i])?, &mut total);
            }
        }
        for (head, s) in self.heads.iter().zip([branches[0], branches[1], deep]) {
            total += head.macs(s)?;
        }
        Ok(total)
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    pub net: NetworkGraph,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = build_network(config, &mut store, seed)?;
        Ok(Detector { net, store })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    /// Inference-mode forward at the configured input size.
    pub fn forward_features(&self, batch: &Tensor<T>) -> Result<Vec<TapOutput<T>>> {
        let s = self.config().input_size;
        if batch.h() != s || batch.w() != s {
            return Err(Error::shape(
                "forward_features",
                format!("input {}×{} but network expects {s}×{s}", batch.h(), batch.w()),
            ));
        }
        self.forward_any(batch)
    }

    /// Inference-mode forward at any size divisible by 32.
    pub fn forward_any(&self, batch: &Tensor<T>) -> Result<Vec<TapOutput<T>>> {
        let mut cx = Ctx::new(&self.store, false);
        let x = cx.graph.input(batch.clone());
        let taps = self.net.forward_nodes(&mut cx, x)?;
        Ok(taps
            .iter()
            .map(|t| TapOutput {
                class_logits: cx.graph.value(t.class_logits).clone(),
                box_deltas: cx.graph.value(t.box_deltas).clone(),
            })
            .collect())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        apply_bn_updates(&mut self.store, updates);
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

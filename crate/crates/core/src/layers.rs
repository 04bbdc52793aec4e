//! Parameterized layers and the composite blocks built from them.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] so one
//! layer description serves any scalar type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{self, BnBatchStats};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

/// Forward-pass context: the tape being recorded plus frozen parameters.
pub struct Ctx<'a, T> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    /// Batch statistics gathered in training mode, to be folded into the
    /// running averages once the step is done.
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BnBatchStats,
    pub momentum: f64,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.store.value(id).clone();
        self.graph.param(id, v)
    }
}

/// Applies collected batch statistics to the running averages.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate]) {
    for u in updates {
        let mut mean = store.value(u.running_mean).data().to_vec();
        let mut var = store.value(u.running_var).data().to_vec();
        ops::bn_update_running(&mut mean, &mut var, &u.stats, u.momentum);
        store
            .get_mut(u.running_mean)
            .value
            .data_mut()
            .copy_from_slice(&mean);
        store
            .get_mut(u.running_var)
            .value
            .data_mut()
            .copy_from_slice(&var);
    }
}

/// Allocates parameters with deterministic initialization.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    fn he_uniform(&mut self, name: &str, dims: [usize; 4]) -> Result<ParamId> {
        let fan_in = (dims[1] * dims[2] * dims[3]).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..bound)))
            .collect();
        self.store.add(name, ParamKind::Trainable, &dims, values)
    }

    fn constant(&mut self, name: &str, kind: ParamKind, len: usize, v: f64) -> Result<ParamId> {
        self.store.add(name, kind, &[len], vec![T::of(v); len])
    }
}

/// Receptive-field bookkeeping along each spatial axis, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rf {
    pub h: f64,
    pub w: f64,
    pub jump_h: f64,
    pub jump_w: f64,
}

impl Rf {
    pub const INPUT: Rf = Rf {
        h: 1.0,
        w: 1.0,
        jump_h: 1.0,
        jump_w: 1.0,
    };

    pub fn window(self, kh: usize, kw: usize, stride: usize) -> Rf {
        Rf {
            h: self.h + (kh as f64 - 1.0) * self.jump_h,
            w: self.w + (kw as f64 - 1.0) * self.jump_w,
            jump_h: self.jump_h * stride as f64,
            jump_w: self.jump_w * stride as f64,
        }
    }

    /// Merge of parallel paths feeding one map.
    pub fn max(self, other: Rf) -> Rf {
        Rf {
            h: self.h.max(other.h),
            w: self.w.max(other.w),
            jump_h: self.jump_h.min(other.jump_h),
            jump_w: self.jump_w.min(other.jump_w),
        }
    }

    pub fn size(self) -> usize {
        self.h.max(self.w).round() as usize
    }
}

/// Common interface of every layer and block.
pub trait Module {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId>;
    fn receptive(&self, rf: Rf) -> Rf;
    /// Multiply-accumulates for one input of the given shape, and the
    /// resulting output shape.
    fn macs(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])>;
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Conv2d {
    /// Convolution with "same" padding of `⌊k/2⌋` on each axis.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!("{name}: channel counts must be positive")));
        }
        let weight = b.he_uniform(&format!("{name}.weight"), [c_out, c_in, kernel.0, kernel.1])?;
        let bias = if bias {
            Some(b.constant(&format!("{name}.bias"), ParamKind::Trainable, c_out, 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            padding: (kernel.0 / 2, kernel.1 / 2),
        })
    }
}

impl Module for Conv2d {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.padding)
    }

    fn receptive(&self, rf: Rf) -> Rf {
        rf.window(self.kernel.0, self.kernel.1, self.stride)
    }

    fn macs(&self, [n, c, h, w]: [usize; 4]) -> Result<(u64, [usize; 4])> {
        if c != self.c_in {
            return Err(Error::shape("conv2d", format!("input channels {c} != {}", self.c_in)));
        }
        let ho = ops::window_out(h, self.kernel.0, self.stride, self.padding.0)
            .ok_or_else(|| Error::shape("conv2d", "height smaller than kernel"))?;
        let wo = ops::window_out(w, self.kernel.1, self.stride, self.padding.1)
            .ok_or_else(|| Error::shape("conv2d", "width smaller than kernel"))?;
        let macs = (n * ho * wo * self.c_out * self.c_in * self.kernel.0 * self.kernel.1) as u64;
        Ok((macs, [n, self.c_out, ho, wo]))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.constant(&format!("{name}.gamma"), ParamKind::Trainable, channels, 1.0)?,
            beta: b.constant(&format!("{name}.beta"), ParamKind::Trainable, channels, 0.0)?,
            running_mean: b.constant(&format!("{name}.running_mean"), ParamKind::Buffer, channels, 0.0)?,
            running_var: b.constant(&format!("{name}.running_var"), ParamKind::Buffer, channels, 1.0)?,
            epsilon: ops::BN_EPSILON,
            momentum: ops::BN_MOMENTUM,
        })
    }
}

impl Module for BatchNorm2d {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training {
            let (y, stats) = cx.graph.batch_norm_train(x, gamma, beta, self.epsilon)?;
            cx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let store = cx.store;
            cx.graph.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                self.epsilon,
            )
        }
    }

    fn receptive(&self, rf: Rf) -> Rf {
        rf
    }

    fn macs(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        Ok((0, shape))
    }
}

/// Convolution, batch norm and ReLU as one unit. The convolution carries no
/// bias since batch norm supplies the shift.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    /// `false` for the last unit of a residual branch, whose output is
    /// added to the shortcut before any nonlinearity.
    pub relu: bool,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(b, &format!("{name}.conv"), c_in, c_out, kernel, stride, false)?,
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), c_out)?,
            relu: true,
        })
    }

    /// Closing unit of a residual branch: no ReLU, and batch-norm scale
    /// starting at zero so the branch initially contributes nothing.
    pub fn residual_end<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let mut unit = Self::new(b, name, c_in, c_out, (1, 1), 1)?;
        unit.relu = false;
        b.store.get_mut(unit.bn.gamma).value.data_mut().fill(T::zero());
        Ok(unit)
    }
}

impl Module for ConvBnRelu {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.graph.relu(y) } else { y })
    }

    fn receptive(&self, rf: Rf) -> Rf {
        self.conv.receptive(rf)
    }

    fn macs(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        self.conv.macs(shape)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
}

impl Module for MaxPool {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        cx.graph.max_pool(x, self.kernel, self.stride)
    }

    fn receptive(&self, rf: Rf) -> Rf {
        rf.window(self.kernel, self.kernel, self.stride)
    }

    fn macs(&self, [n, c, h, w]: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let ho = ops::window_out(h, self.kernel, self.stride, 0)
            .ok_or_else(|| Error::shape("max_pool2d", "kernel larger than input"))?;
        let wo = ops::window_out(w, self.kernel, self.stride, 0)
            .ok_or_else(|| Error::shape("max_pool2d", "kernel larger than input"))?;
        Ok((0, [n, c, ho, wo]))
    }
}

fn chain_forward<T: Scalar>(layers: &[ConvBnRelu], cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
    layers.iter().try_fold(x, |h, l| l.forward(cx, h))
}

fn chain_receptive(layers: &[ConvBnRelu], rf: Rf) -> Rf {
    layers.iter().fold(rf, |r, l| l.receptive(r))
}

fn chain_macs(layers: &[ConvBnRelu], shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
    layers.iter().try_fold((0, shape), |(acc, s), l| {
        let (m, s) = l.macs(s)?;
        Ok((acc + m, s))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfeConfig {
    pub channels_in: usize,
    pub k: usize,
    pub bottleneck_ratio: f64,
}

impl CfeConfig {
    pub fn new(channels_in: usize) -> Self {
        CfeConfig {
            channels_in,
            k: 7,
            bottleneck_ratio: 0.5,
        }
    }

    fn inner_width(&self) -> Result<usize> {
        let c = self.channels_in;
        if c == 0 || c % 2 != 0 {
            return Err(Error::invalid(format!(
                "CFE needs an even, positive channel count, got {c}"
            )));
        }
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 1.0) {
            return Err(Error::invalid("CFE bottleneck ratio must lie in (0, 1]"));
        }
        let inner = c as f64 * self.bottleneck_ratio;
        if inner.fract() != 0.0 || inner < 1.0 {
            return Err(Error::invalid(format!(
                "CFE channels {c} not divisible by 1/{}",
                self.bottleneck_ratio
            )));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::invalid(format!("CFE kernel size must be odd, got {}", self.k)));
        }
        Ok(inner as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `1×k` before `k×1`.
    Left,
    /// `k×1` before `1×k`.
    Right,
}

/// Comprehensive feature enhancement block: two bottlenecked branches with
/// a factorized `k×k` convolution whose `1×k`/`k×1` order differs between
/// them, concatenated and added back onto the input. Each branch ends in a
/// zero-scaled batch norm, so a fresh block passes its input through.
#[derive(Debug, Clone)]
pub struct Cfe {
    pub config: CfeConfig,
    pub left: Vec<ConvBnRelu>,
    pub right: Vec<ConvBnRelu>,
}

impl Cfe {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, config: CfeConfig) -> Result<Self> {
        let inner = config.inner_width()?;
        let c = config.channels_in;
        let k = config.k;
        let branch = |b: &mut Builder<T>, tag: &str, first: (usize, usize), second: (usize, usize)| {
            Ok::<_, Error>(vec![
                ConvBnRelu::new(b, &format!("{name}.{tag}.reduce"), c, inner, (1, 1), 1)?,
                ConvBnRelu::new(b, &format!("{name}.{tag}.sep_a"), inner, inner, first, 1)?,
                ConvBnRelu::new(b, &format!("{name}.{tag}.sep_b"), inner, inner, second, 1)?,
                ConvBnRelu::residual_end(b, &format!("{name}.{tag}.expand"), inner, c / 2)?,
            ])
        };
        let left = branch(b, "left", (1, k), (k, 1))?;
        let right = branch(b, "right", (k, 1), (1, k))?;
        Ok(Cfe {
            config,
            left,
            right,
        })
    }

    pub fn branch(&self, which: Branch) -> &[ConvBnRelu] {
        match which {
            Branch::Left => &self.left,
            Branch::Right => &self.right,
        }
    }

    pub fn branch_forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        x: NodeId,
        which: Branch,
    ) -> Result<NodeId> {
        chain_forward(self.branch(which), cx, x)
    }

    /// Multiply-accumulates of one branch if its separable pair were a
    /// single dense `k×k` convolution instead.
    pub fn unfactorized_branch_macs(&self, shape: [usize; 4]) -> Result<u64> {
        let [n, _, h, w] = shape;
        let inner = self.config.inner_width()?;
        let (m_reduce, _) = self.left[0].macs(shape)?;
        let (m_expand, _) = self.left[3].macs([n, inner, h, w])?;
        let dense = (n * h * w * inner * inner * self.config.k * self.config.k) as u64;
        Ok(m_reduce + dense + m_expand)
    }

    pub fn branch_macs(&self, which: Branch, shape: [usize; 4]) -> Result<u64> {
        chain_macs(self.branch(which), shape).map(|(m, _)| m)
    }
}

impl Module for Cfe {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let l = self.branch_forward(cx, x, Branch::Left)?;
        let r = self.branch_forward(cx, x, Branch::Right)?;
        let merged = cx.graph.concat(l, r)?;
        let sum = cx.graph.add(merged, x)?;
        Ok(cx.graph.relu(sum))
    }

    fn receptive(&self, rf: Rf) -> Rf {
        chain_receptive(&self.left, rf).max(chain_receptive(&self.right, rf))
    }

    fn macs(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let (l, _) = chain_macs(&self.left, shape)?;
        let (r, _) = chain_macs(&self.right, shape)?;
        Ok((l + r, shape))
    }
}

/// Inception-style comparison block: parallel `1×1`, `3×3` and two stacked
/// `3×3` paths with `C/4`, `C/4` and `C/2` output channels.
#[derive(Debug, Clone)]
pub struct Inception {
    pub channels: usize,
    pub path_1x1: ConvBnRelu,
    pub path_3x3: ConvBnRelu,
    pub path_5x5: Vec<ConvBnRelu>,
}

impl Inception {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::invalid(format!(
                "inception block needs channels divisible by 4, got {channels}"
            )));
        }
        let (q, h) = (channels / 4, channels / 2);
        Ok(Inception {
            channels,
            path_1x1: ConvBnRelu::new(b, &format!("{name}.p1"), channels, q, (1, 1), 1)?,
            path_3x3: ConvBnRelu::new(b, &format!("{name}.p3"), channels, q, (3, 3), 1)?,
            path_5x5: vec![
                ConvBnRelu::new(b, &format!("{name}.p5a"), channels, h, (3, 3), 1)?,
                ConvBnRelu::new(b, &format!("{name}.p5b"), h, h, (3, 3), 1)?,
            ],
        })
    }
}

impl Module for Inception {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<NodeId> {
        let a = self.path_1x1.forward(cx, x)?;
        let b = self.path_3x3.forward(cx, x)?;
        let c = chain_forward(&self.path_5x5, cx, x)?;
        let ab = cx.graph.concat(a, b)?;
        cx.graph.concat(ab, c)
    }

    fn receptive(&self, rf: Rf) -> Rf {
        self.path_1x1
            .receptive(rf)
            .max(self.path_3x3.receptive(rf))
            .max(chain_receptive(&self.path_5x5, rf))
    }

    fn macs(&self, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let (a, _) = self.path_1x1.macs(shape)?;
        let (b, _) = self.path_3x3.macs(shape)?;
        let (c, _) = chain_macs(&self.path_5x5, shape)?;
        Ok((a + b + c, shape))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfbConfig {
    pub channels_a: usize,
    pub channels_b: usize,
    pub channels_out: usize,
    /// Add the fused map onto the finer input (needs `channels_out == channels_a`).
    pub residual: bool,
}

/// Feature fusion block: projects two taps to a common width, upsamples
/// the coarser one, concatenates and fuses with a `1×1` unit. In residual
/// mode the fused map is added onto the finer input, and starts at zero.
#[derive(Debug, Clone)]
pub struct Ffb {
    pub config: FfbConfig,
    pub proj_a: ConvBnRelu,
    pub proj_b: ConvBnRelu,
    pub fuse: ConvBnRelu,
}

impl Ffb {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, config: FfbConfig) -> Result<Self> {
        let o = config.channels_out;
        if config.residual && o != config.channels_a {
            return Err(Error::invalid(format!(
                "{name}: residual fusion needs channels_out == channels_a ({o} != {})",
                config.channels_a
            )));
        }
        Ok(Ffb {
            config,
            proj_a: ConvBnRelu::new(b, &format!("{name}.proj_a"), config.channels_a, o, (1, 1), 1)?,
            proj_b: ConvBnRelu::new(b, &format!("{name}.proj_b"), config.channels_b, o, (1, 1), 1)?,
            fuse: if config.residual {
                ConvBnRelu::residual_end(b, &format!("{name}.fuse"), 2 * o, o)?
            } else {
                ConvBnRelu::new(b, &format!("{name}.fuse"), 2 * o, o, (1, 1), 1)?
            },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let pa = self.proj_a.forward(cx, a)?;
        let pb = self.proj_b.forward(cx, b)?;
        let (sa, sb) = (cx.graph.value(pa).shape(), cx.graph.value(pb).shape());
        let (pa, pb) = if sa[2] >= sb[2] && sa[3] >= sb[3] {
            (pa, cx.graph.upsample(pb, sa[2], sa[3])?)
        } else {
            (cx.graph.upsample(pa, sb[2], sb[3])?, pb)
        };
        let cat = cx.graph.concat(pa, pb)?;
        let fused = self.fuse.forward(cx, cat)?;
        if self.config.residual {
            let sum = cx.graph.add(fused, a)?;
            Ok(cx.graph.relu(sum))
        } else {
            Ok(fused)
        }
    }

    pub fn receptive(&self, a: Rf, b: Rf) -> Rf {
        let ra = self.proj_a.receptive(a);
        let rb = self.proj_b.receptive(b);
        // nearest upsampling keeps each output pixel's support; the fused
        // map steps at the finer tap's jump
        let fused = Rf {
            h: ra.h.max(rb.h),
            w: ra.w.max(rb.w),
            jump_h: ra.jump_h.min(rb.jump_h),
            jump_w: ra.jump_w.min(rb.jump_w),
        };
        self.fuse.receptive(fused)
    }

    pub fn macs(&self, a: [usize; 4], b: [usize; 4]) -> Result<(u64, [usize; 4])> {
        let (ma, sa) = self.proj_a.macs(a)?;
        let (mb, sb) = self.proj_b.macs(b)?;
        let (h, w) = (sa[2].max(sb[2]), sa[3].max(sb[3]));
        let (mf, s) = self.fuse.macs([a[0], 2 * self.config.channels_out, h, w])?;
        Ok((ma + mb + mf, s))
    }
}

/// Class and box prediction convolutions for one tap.
#[derive(Debug, Clone)]
pub struct Head {
    pub cls: Conv2d,
    pub bbox: Conv2d,
    pub anchors: usize,
    pub num_classes: usize,
}

impl Head {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        channels: usize,
        anchors: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Head {
            cls: Conv2d::new(b, &format!("{name}.cls"), channels, anchors * (num_classes + 1), (3, 3), 1, true)?,
            bbox: Conv2d::new(b, &format!("{name}.box"), channels, anchors * 4, (3, 3), 1, true)?,
            anchors,
            num_classes,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        Ok((self.cls.forward(cx, x)?, self.bbox.forward(cx, x)?))
    }

    pub fn macs(&self, shape: [usize; 4]) -> Result<u64> {
        Ok(self.cls.macs(shape)?.0 + self.bbox.macs(shape)?.0)
    }
}

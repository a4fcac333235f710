//! Network building blocks.
//!
//! Every block is a plain struct of [`ParamId`] handles plus hyperparameters;
//! the tensors themselves live in a shared [`Params`] table. `forward`
//! records ops on a [`Graph`] tape, leasing parameters through a [`Lease`]
//! so gradients can flow back to the table after `backward`.
//!
//! Construction draws initial weights from a caller-supplied seeded RNG in
//! declaration order, which makes models bit-reproducible for a given seed.

use crate::tensor::{
    he_uniform, Dims, Graph, Lease, Mode, ParamId, Params, Scalar, Tensor, Var,
};
use crate::Result;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kernel sizes of the four parallel branches of [`MsConvBlock`].
pub const MS_BRANCH_KERNELS: [usize; 4] = [1, 3, 5, 7];

/// 2-D convolution with He-uniform weights and zero bias.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = ps.add(
            format!("{name}.w"),
            he_uniform(rng, Dims::new(out_channels, in_channels, kernel, kernel), fan_in),
            true,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(Dims::new(1, out_channels, 1, 1)), true);
        Conv2dLayer { w, b, stride, padding, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &Params<T>,
        lease: &mut Lease,
        x: Var,
    ) -> Result<Var> {
        let w = lease.lease(g, ps, self.w);
        let b = lease.lease(g, ps, self.b);
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    /// Trainable scalars in this layer.
    pub fn scalar_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Fully connected layer on `[N, C, 1, 1]` tensors.
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_uniform(rng, Dims::new(out_features, in_features, 1, 1), in_features),
            true,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(Dims::new(1, out_features, 1, 1)), true);
        LinearLayer { w, b, in_features, out_features }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &Params<T>,
        lease: &mut Lease,
        x: Var,
    ) -> Result<Var> {
        let w = lease.lease(g, ps, self.w);
        let b = lease.lease(g, ps, self.b);
        g.linear(x, w, b)
    }

    pub fn scalar_count(&self) -> usize {
        self.out_features * self.in_features + self.out_features
    }
}

/// Batch normalization with learnable affine parameters and running
/// statistics (stored as non-trainable entries in the same table).
pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2dLayer {
    pub fn new<T: Scalar>(ps: &mut Params<T>, name: &str, channels: usize) -> Self {
        let d = Dims::new(1, channels, 1, 1);
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled(d, T::ONE), true);
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(d), true);
        let running_mean = ps.add(format!("{name}.running_mean"), Tensor::zeros(d), false);
        let running_var = ps.add(format!("{name}.running_var"), Tensor::filled(d, T::ONE), false);
        BatchNorm2dLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance, PyTorch-style); eval mode uses
    /// the running estimates and mutates nothing.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut Params<T>,
        lease: &mut Lease,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = lease.lease(g, ps, self.gamma);
        let beta = lease.lease(g, ps, self.beta);
        let rm = ps.value(self.running_mean).data.clone();
        let rv = ps.value(self.running_var).data.clone();
        let eps = T::from_f64(self.eps);
        let (y, mean, var) = g.batchnorm(x, gamma, beta, &rm, &rv, eps, mode)?;
        if mode == Mode::Train {
            let d = g.dims(x);
            let n = (d.n * d.h * d.w) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mom = T::from_f64(self.momentum);
            let keep = T::from_f64(1.0 - self.momentum);
            let ub = T::from_f64(unbias);
            let rm = &mut ps.value_mut(self.running_mean).data;
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = keep * *r + mom * *m;
            }
            let rv = &mut ps.value_mut(self.running_var).data;
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = keep * *r + mom * *v * ub;
            }
        }
        Ok(y)
    }

    pub fn scalar_count(&self) -> usize {
        2 * self.channels
    }
}

/// Squeeze-and-excitation channel attention.
///
/// `s = sigmoid(excite(relu(squeeze(gap(x)))))`, output `s * x` per
/// channel. The squeeze width is `max(channels / reduction, 1)`.
pub struct SENetBlock {
    pub squeeze: LinearLayer,
    pub excite: LinearLayer,
    pub channels: usize,
    pub reduction: usize,
}

impl SENetBlock {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        let squeeze = LinearLayer::new(ps, rng, &format!("{name}.squeeze"), channels, hidden);
        let excite = LinearLayer::new(ps, rng, &format!("{name}.excite"), hidden, channels);
        SENetBlock { squeeze, excite, channels, reduction }
    }

    /// The attention vector `s` as a `[N, C, 1, 1]` node.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &Params<T>,
        lease: &mut Lease,
        x: Var,
    ) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let sq = self.squeeze.forward(g, ps, lease, pooled)?;
        let act = g.relu(sq);
        let ex = self.excite.forward(g, ps, lease, act)?;
        Ok(g.sigmoid(ex))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &Params<T>,
        lease: &mut Lease,
        x: Var,
    ) -> Result<Var> {
        let s = self.attention(g, ps, lease, x)?;
        g.scale_channels(x, s)
    }

    pub fn scalar_count(&self) -> usize {
        self.squeeze.scalar_count() + self.excite.scalar_count()
    }
}

/// Which attention arrangement a [`FusionBlock`] uses.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FusionVariant {
    /// Concatenate, then project back to `channels`.
    SimpleConcat,
    /// One SENet over the concatenated `2 * channels`, then project.
    SingleSenet,
    /// Independent SENets on each input, concatenate, then project.
    DoubleSenet,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] =
        [FusionVariant::SimpleConcat, FusionVariant::SingleSenet, FusionVariant::DoubleSenet];

    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::SimpleConcat => "simple",
            FusionVariant::SingleSenet => "single",
            FusionVariant::DoubleSenet => "double",
        }
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(FusionVariant::SimpleConcat),
            "single" => Ok(FusionVariant::SingleSenet),
            "double" => Ok(FusionVariant::DoubleSenet),
            other => Err(crate::Error::config(format!(
                "unknown fusion variant '{other}' (expected simple, single or double)"
            ))),
        }
    }
}

/// Which convolution stage the model's levels use.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConvVariant {
    /// Standard UNet double 3x3 convolution.
    Plain3x3,
    /// Multi-scale convolution block.
    MsConv,
}

impl ConvVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ConvVariant::Plain3x3 => "plain3x3",
            ConvVariant::MsConv => "msconv",
        }
    }
}

impl std::fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ConvVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain3x3" => Ok(ConvVariant::Plain3x3),
            "msconv" => Ok(ConvVariant::MsConv),
            other => Err(crate::Error::config(format!(
                "unknown conv variant '{other}' (expected plain3x3 or msconv)"
            ))),
        }
    }
}

/// Merges two same-width feature maps into one, replacing a plain skip
/// connection. The 1x1 projection maps `2 * channels` back to `channels`
/// with no nonlinearity afterwards.
pub struct FusionBlock {
    pub kind: FusionVariant,
    pub se_joint: Option<SENetBlock>,
    pub se_a: Option<SENetBlock>,
    pub se_b: Option<SENetBlock>,
    pub proj: Conv2dLayer,
    pub channels: usize,
}

impl FusionBlock {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        kind: FusionVariant,
    ) -> Self {
        let (se_joint, se_a, se_b) = match kind {
            FusionVariant::SimpleConcat => (None, None, None),
            FusionVariant::SingleSenet => (
                Some(SENetBlock::new(ps, rng, &format!("{name}.se"), 2 * channels, reduction)),
                None,
                None,
            ),
            FusionVariant::DoubleSenet => (
                None,
                Some(SENetBlock::new(ps, rng, &format!("{name}.se_a"), channels, reduction)),
                Some(SENetBlock::new(ps, rng, &format!("{name}.se_b"), channels, reduction)),
            ),
        };
        let proj =
            Conv2dLayer::new(ps, rng, &format!("{name}.proj"), 2 * channels, channels, 1, 1, 0);
        FusionBlock { kind, se_joint, se_a, se_b, proj, channels }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &Params<T>,
        lease: &mut Lease,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        let merged = match self.kind {
            FusionVariant::SimpleConcat => g.concat_channels(a, b)?,
            FusionVariant::SingleSenet => {
                let cat = g.concat_channels(a, b)?;
                self.se_joint.as_ref().unwrap().forward(g, ps, lease, cat)?
            }
            FusionVariant::DoubleSenet => {
                let ra = self.se_a.as_ref().unwrap().forward(g, ps, lease, a)?;
                let rb = self.se_b.as_ref().unwrap().forward(g, ps, lease, b)?;
                g.concat_channels(ra, rb)?
            }
        };
        self.proj.forward(g, ps, lease, merged)
    }

    pub fn scalar_count(&self) -> usize {
        let se: usize = [&self.se_joint, &self.se_a, &self.se_b]
            .iter()
            .filter_map(|o| o.as_ref().map(|s| s.scalar_count()))
            .sum();
        se + self.proj.scalar_count()
    }
}

/// Multi-scale convolution block.
///
/// Four parallel branches, kernel sizes 1/3/5/7: each reduces the input to
/// `out_channels / 4` with a 1x1 convolution, applies its k x k convolution
/// at same padding, and the concatenated result is projected by a final 1x1
/// convolution, then batch-normalized and ReLU-activated.
pub struct MsConvBlock {
    pub reduces: Vec<Conv2dLayer>,
    pub branches: Vec<Conv2dLayer>,
    pub proj: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl MsConvBlock {
    /// `out_channels` must be divisible by 4 (each branch carries a
    /// quarter of the width).
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if out_channels % 4 != 0 || out_channels == 0 {
            return Err(crate::Error::config(format!(
                "multi-scale block width {out_channels} must be a positive multiple of 4"
            )));
        }
        let quarter = out_channels / 4;
        let mut reduces = Vec::new();
        let mut branches = Vec::new();
        for k in MS_BRANCH_KERNELS {
            reduces.push(Conv2dLayer::new(
                ps,
                rng,
                &format!("{name}.red{k}"),
                in_channels,
                quarter,
                1,
                1,
                0,
            ));
            branches.push(Conv2dLayer::new(
                ps,
                rng,
                &format!("{name}.conv{k}"),
                quarter,
                quarter,
                k,
                1,
                k / 2,
            ));
        }
        let proj =
            Conv2dLayer::new(ps, rng, &format!("{name}.proj"), out_channels, out_channels, 1, 1, 0);
        let bn = BatchNorm2dLayer::new(ps, &format!("{name}.bn"), out_channels);
        Ok(MsConvBlock { reduces, branches, proj, bn, in_channels, out_channels })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut Params<T>,
        lease: &mut Lease,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut cat: Option<Var> = None;
        for (reduce, branch) in self.reduces.iter().zip(&self.branches) {
            let r = reduce.forward(g, ps, lease, x)?;
            let b = branch.forward(g, ps, lease, r)?;
            cat = Some(match cat {
                None => b,
                Some(prev) => g.concat_channels(prev, b)?,
            });
        }
        let merged = self.proj.forward(g, ps, lease, cat.unwrap())?;
        let normed = self.bn.forward(g, ps, lease, merged, mode)?;
        Ok(g.relu(normed))
    }

    /// Trainable scalars in this block.
    pub fn scalar_count(&self) -> usize {
        self.reduces.iter().map(Conv2dLayer::scalar_count).sum::<usize>()
            + self.branches.iter().map(Conv2dLayer::scalar_count).sum::<usize>()
            + self.proj.scalar_count()
            + self.bn.scalar_count()
    }

    /// Trainable scalars of the naive parallel design at the same widths:
    /// four full k x k convolutions from `in_channels` to `out_channels`,
    /// concatenated and merged by the same 1x1 projection and norm.
    pub fn naive_scalar_count(&self) -> usize {
        let per_branch: usize = MS_BRANCH_KERNELS
            .iter()
            .map(|k| self.out_channels * self.in_channels * k * k + self.out_channels)
            .sum();
        let proj = self.out_channels * (4 * self.out_channels) + self.out_channels;
        per_branch + proj + self.bn.scalar_count()
    }
}

/// Two 3x3 convolutions, each batch-normalized and ReLU-activated: the
/// standard UNet block.
pub struct PlainConvBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNorm2dLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2dLayer,
}

impl PlainConvBlock {
    pub fn new<T: Scalar>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let conv1 = Conv2dLayer::new(ps, rng, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1);
        let bn1 = BatchNorm2dLayer::new(ps, &format!("{name}.bn1"), out_channels);
        let conv2 = Conv2dLayer::new(ps, rng, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1);
        let bn2 = BatchNorm2dLayer::new(ps, &format!("{name}.bn2"), out_channels);
        PlainConvBlock { conv1, bn1, conv2, bn2 }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut Params<T>,
        lease: &mut Lease,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let c1 = self.conv1.forward(g, ps, lease, x)?;
        let n1 = self.bn1.forward(g, ps, lease, c1, mode)?;
        let a1 = g.relu(n1);
        let c2 = self.conv2.forward(g, ps, lease, a1)?;
        let n2 = self.bn2.forward(g, ps, lease, c2, mode)?;
        Ok(g.relu(n2))
    }

    pub fn scalar_count(&self) -> usize {
        self.conv1.scalar_count()
            + self.bn1.scalar_count()
            + self.conv2.scalar_count()
            + self.bn2.scalar_count()
    }
}

/// A level's convolution stage: either the plain double-conv block or the
/// multi-scale block, selected by the model config.
pub enum ConvBlock {
    Plain(PlainConvBlock),
    Ms(MsConvBlock),
}

impl ConvBlock {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut Params<T>,
        lease: &mut Lease,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            ConvBlock::Plain(b) => b.forward(g, ps, lease, x, mode),
            ConvBlock::Ms(b) => b.forward(g, ps, lease, x, mode),
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            ConvBlock::Plain(b) => b.scalar_count(),
            ConvBlock::Ms(b) => b.scalar_count(),
        }
    }
}

//! The dual-path UNet.
//!
//! Two parallel encoders walk the image and its edge map down `levels`
//! resolution steps. At every level the sample-path features are fused with
//! the edge-path features by a [`FusionBlock`], and the fused map is both
//! pooled into the next sample-path level and kept as the skip connection
//! for the decoder. The decoder mirrors the descent: upsample, halve the
//! channels with a bare 3x3 convolution, fuse with the skip, convolve, and
//! finish with a 1x1 convolution and a sigmoid over one output channel.
//!
//! With the edge path disabled the model degrades to a plain UNet: the
//! sample features pass through unfused and no edge-path or encoder-fusion
//! parameters exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Conv2dLayer, ConvBlock, ConvVariant, FusionBlock, FusionVariant, MsConvBlock, PlainConvBlock,
};
use crate::tensor::{Dims, Graph, Lease, Mode, Params, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Structural hyperparameters. [`Default`] gives the full model at its
/// published size; the ablation variants are reached by swapping `fusion`,
/// `conv` or `edge_path`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ModelConfig {
    /// Channels of the first encoder level; level `l` has `base_width *
    /// 2^(l-1)` and the bottleneck twice the deepest level.
    pub base_width: usize,
    /// Encoder/decoder resolution steps.
    pub levels: usize,
    /// Convolution blocks in the bottleneck.
    pub bottleneck_layers: usize,
    pub fusion: FusionVariant,
    pub conv: ConvVariant,
    /// When false the edge encoder and the encoder fusion stages are
    /// omitted entirely.
    pub edge_path: bool,
    pub senet_reduction: usize,
    /// Nominal square input size. `forward` accepts any spatial size
    /// divisible by `2^levels`; this value is what the CLI and the
    /// synthetic data default to.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            levels: 4,
            bottleneck_layers: 2,
            fusion: FusionVariant::DoubleSenet,
            conv: ConvVariant::MsConv,
            edge_path: true,
            senet_reduction: 16,
            input_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be positive"));
        }
        if self.bottleneck_layers == 0 {
            return Err(Error::config("bottleneck_layers must be at least 1"));
        }
        if self.senet_reduction == 0 {
            return Err(Error::config("senet_reduction must be at least 1"));
        }
        if self.conv == ConvVariant::MsConv && self.base_width % 4 != 0 {
            return Err(Error::config(format!(
                "base_width {} must be a multiple of 4 when conv = msconv",
                self.base_width
            )));
        }
        let step = 1usize << self.levels;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of 2^levels = {}",
                self.input_size, step
            )));
        }
        Ok(())
    }

    /// Width of encoder level `l` (1-based).
    pub fn level_width(&self, l: usize) -> usize {
        self.base_width << (l - 1)
    }

    /// Width of the bottleneck blocks.
    pub fn bottleneck_width(&self) -> usize {
        2 * self.level_width(self.levels)
    }

    /// The config as `key = value` pairs, in a fixed order. Checkpoints
    /// embed exactly these pairs so a model can be rebuilt before its
    /// weights are filled in.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("base_width".into(), self.base_width.to_string()),
            ("levels".into(), self.levels.to_string()),
            ("bottleneck_layers".into(), self.bottleneck_layers.to_string()),
            ("fusion".into(), self.fusion.to_string()),
            ("conv".into(), self.conv.to_string()),
            ("edge_path".into(), self.edge_path.to_string()),
            ("senet_reduction".into(), self.senet_reduction.to_string()),
            ("input_size".into(), self.input_size.to_string()),
        ]
    }

    /// Set one field from its key/value form. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, value: &str) -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::config(format!("{key}: expected an integer, got '{value}'")))
        }
        match key {
            "base_width" => self.base_width = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "bottleneck_layers" => self.bottleneck_layers = num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "conv" => self.conv = value.parse()?,
            "edge_path" => {
                self.edge_path = value.parse().map_err(|_| {
                    Error::config(format!("edge_path: expected true or false, got '{value}'"))
                })?
            }
            "senet_reduction" => self.senet_reduction = num(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            other => return Err(Error::config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    /// Rebuild a config from pairs produced by [`to_key_values`], starting
    /// from the defaults.
    ///
    /// [`to_key_values`]: ModelConfig::to_key_values
    pub fn from_key_values<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dimensions recorded at each stage of one `forward` call.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ForwardTrace {
    /// Fused feature dims per encoder level, shallow to deep.
    pub encoder: Vec<Dims>,
    pub bottleneck: Dims,
    /// Decoder block output dims in execution order, deep to shallow.
    pub decoder: Vec<Dims>,
    pub output: Dims,
}

/// The assembled network. All tensors live in `params`; the block structs
/// hold handles only, so serializing `params` captures the full model state
/// including batch-norm running statistics.
pub struct CdseUnet<T: Scalar> {
    pub config: ModelConfig,
    pub params: Params<T>,
    enc_sample: Vec<ConvBlock>,
    enc_edge: Vec<ConvBlock>,
    enc_fusion: Vec<FusionBlock>,
    bottleneck: Vec<ConvBlock>,
    /// Upsample-path 3x3 convolutions, deep to shallow.
    up_convs: Vec<Conv2dLayer>,
    /// Skip fusions, deep to shallow.
    skip_fusion: Vec<FusionBlock>,
    /// Decoder convolution stages, deep to shallow.
    dec_blocks: Vec<ConvBlock>,
    head: Conv2dLayer,
}

impl<T: Scalar> std::fmt::Debug for CdseUnet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CdseUnet")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish_non_exhaustive()
    }
}

fn conv_block<T: Scalar>(
    variant: ConvVariant,
    ps: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<ConvBlock> {
    Ok(match variant {
        ConvVariant::Plain3x3 => ConvBlock::Plain(PlainConvBlock::new(ps, rng, name, cin, cout)),
        ConvVariant::MsConv => ConvBlock::Ms(MsConvBlock::new(ps, rng, name, cin, cout)?),
    })
}

impl<T: Scalar> CdseUnet<T> {
    /// Build a model with freshly initialized weights. The same config and
    /// seed always produce the same parameter table, entry for entry.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let red = config.senet_reduction;

        let mut enc_sample = Vec::with_capacity(config.levels);
        let mut enc_edge = Vec::new();
        let mut enc_fusion = Vec::new();
        for l in 1..=config.levels {
            let cin = if l == 1 { 1 } else { config.level_width(l - 1) };
            let w = config.level_width(l);
            enc_sample.push(conv_block(
                config.conv,
                &mut ps,
                &mut rng,
                &format!("enc{l}.sample"),
                cin,
                w,
            )?);
            if config.edge_path {
                enc_edge.push(conv_block(
                    config.conv,
                    &mut ps,
                    &mut rng,
                    &format!("enc{l}.edge"),
                    cin,
                    w,
                )?);
                enc_fusion.push(FusionBlock::new(
                    &mut ps,
                    &mut rng,
                    &format!("enc{l}.fuse"),
                    w,
                    red,
                    config.fusion,
                ));
            }
        }

        let deep = config.level_width(config.levels);
        let bw = config.bottleneck_width();
        let mut bottleneck = Vec::with_capacity(config.bottleneck_layers);
        for i in 1..=config.bottleneck_layers {
            let cin = if i == 1 { deep } else { bw };
            bottleneck.push(conv_block(
                config.conv,
                &mut ps,
                &mut rng,
                &format!("bottleneck.{i}"),
                cin,
                bw,
            )?);
        }

        let mut up_convs = Vec::with_capacity(config.levels);
        let mut skip_fusion = Vec::with_capacity(config.levels);
        let mut dec_blocks = Vec::with_capacity(config.levels);
        for l in (1..=config.levels).rev() {
            let w = config.level_width(l);
            up_convs.push(Conv2dLayer::new(
                &mut ps,
                &mut rng,
                &format!("dec{l}.up"),
                2 * w,
                w,
                3,
                1,
                1,
            ));
            skip_fusion.push(FusionBlock::new(
                &mut ps,
                &mut rng,
                &format!("dec{l}.fuse"),
                w,
                red,
                config.fusion,
            ));
            dec_blocks.push(conv_block(
                config.conv,
                &mut ps,
                &mut rng,
                &format!("dec{l}.conv"),
                w,
                w,
            )?);
        }

        let head = Conv2dLayer::new(&mut ps, &mut rng, "head", config.base_width, 1, 1, 1, 0);

        Ok(CdseUnet {
            config,
            params: ps,
            enc_sample,
            enc_edge,
            enc_fusion,
            bottleneck,
            up_convs,
            skip_fusion,
            dec_blocks,
            head,
        })
    }

    /// Trainable scalars across the whole model.
    pub fn trainable_scalar_count(&self) -> usize {
        self.params.trainable_scalar_count()
    }

    /// Run the network on a `[N, 1, H, W]` image batch, recording onto `g`.
    ///
    /// `edge` is required (same dims as `image`) when the edge path is
    /// enabled and ignored otherwise. Spatial dims must be divisible by
    /// `2^levels`. Returns the sigmoid output, the parameter lease for the
    /// pass (hand it back to `Lease::accumulate` after `backward`) and the
    /// per-stage shape trace.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        edge: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<(Var, Lease, ForwardTrace)> {
        let d = image.dims;
        if d.c != 1 {
            return Err(Error::dim(format!("expected a single-channel image batch, got {d}")));
        }
        let step = 1usize << self.config.levels;
        if d.h == 0 || d.w == 0 || d.h % step != 0 || d.w % step != 0 {
            return Err(Error::dim(format!(
                "spatial dims of {d} must be positive multiples of 2^levels = {step}"
            )));
        }
        let edge = match (self.config.edge_path, edge) {
            (true, Some(e)) => {
                if e.dims != d {
                    return Err(Error::dim(format!(
                        "edge batch dims {} do not match image dims {d}",
                        e.dims
                    )));
                }
                Some(e)
            }
            (true, None) => {
                return Err(Error::config("the edge path is enabled but no edge batch was given"))
            }
            (false, _) => None,
        };

        let Self {
            config,
            params,
            enc_sample,
            enc_edge,
            enc_fusion,
            bottleneck,
            up_convs,
            skip_fusion,
            dec_blocks,
            head,
        } = self;

        let mut lease = Lease::new();
        let mut trace = ForwardTrace {
            encoder: Vec::with_capacity(config.levels),
            bottleneck: Dims::new(0, 0, 0, 0),
            decoder: Vec::with_capacity(config.levels),
            output: Dims::new(0, 0, 0, 0),
        };

        let mut sample_in = g.leaf(image.clone(), false);
        let mut edge_in = edge.map(|e| g.leaf(e.clone(), false));
        let mut skips = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let s = enc_sample[l].forward(g, params, &mut lease, sample_in, mode)?;
            let fused = if config.edge_path {
                let e = enc_edge[l].forward(g, params, &mut lease, edge_in.unwrap(), mode)?;
                edge_in = Some(g.maxpool2(e)?);
                enc_fusion[l].forward(g, params, &mut lease, s, e)?
            } else {
                s
            };
            trace.encoder.push(g.dims(fused));
            skips.push(fused);
            sample_in = g.maxpool2(fused)?;
        }

        let mut cur = sample_in;
        for block in bottleneck.iter() {
            cur = block.forward(g, params, &mut lease, cur, mode)?;
        }
        trace.bottleneck = g.dims(cur);

        for (i, l) in (1..=config.levels).rev().enumerate() {
            let up = g.upsample2(cur);
            let halved = up_convs[i].forward(g, params, &mut lease, up)?;
            let skip = skips[l - 1];
            let fused = skip_fusion[i].forward(g, params, &mut lease, skip, halved)?;
            cur = dec_blocks[i].forward(g, params, &mut lease, fused, mode)?;
            trace.decoder.push(g.dims(cur));
        }

        let logits = head.forward(g, params, &mut lease, cur)?;
        let probs = g.sigmoid(logits);
        trace.output = g.dims(probs);
        Ok((probs, lease, trace))
    }

    /// Eval-mode forward returning the probability map.
    pub fn infer(&mut self, image: &Tensor<T>, edge: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (probs, _, _) = self.forward(&mut g, image, edge, Mode::Eval)?;
        Ok(g.tensor(probs))
    }

    /// Eval-mode forward binarized at `threshold`: probabilities strictly
    /// above it map to one, the rest to zero.
    pub fn predict(
        &mut self,
        image: &Tensor<T>,
        edge: Option<&Tensor<T>>,
        threshold: T,
    ) -> Result<Tensor<T>> {
        let mut probs = self.infer(image, edge)?;
        for p in &mut probs.data {
            *p = if *p > threshold { T::ONE } else { T::ZERO };
        }
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig { base_width: 4, input_size: 16, ..ModelConfig::default() }
    }

    fn image(n: usize, size: usize, scale: f32) -> Tensor<f32> {
        let d = Dims::new(n, 1, size, size);
        let data = (0..d.numel()).map(|i| (i as f32 * 0.13).sin() * scale).collect();
        Tensor::from_vec(d, data).unwrap()
    }

    fn edge_map(n: usize, size: usize) -> Tensor<f32> {
        let d = Dims::new(n, 1, size, size);
        let data = (0..d.numel()).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(d, data).unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = CdseUnet::<f32>::build(tiny_config(), 9).unwrap();
        let b = CdseUnet::<f32>::build(tiny_config(), 9).unwrap();
        let c = CdseUnet::<f32>::build(tiny_config(), 10).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        let mut any_diff = false;
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data, pb.value.data, "{} differs across rebuilds", pa.name);
        }
        for (pa, pc) in a.params.iter().zip(c.params.iter()) {
            any_diff |= pa.value.data != pc.value.data;
        }
        assert!(any_diff, "different seeds must give different weights");
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let cfg = tiny_config();
        let model = CdseUnet::<f32>::build(cfg, 1).unwrap();

        let conv = |cin: usize, co: usize, k: usize| co * cin * k * k + co;
        let bn = |c: usize| 2 * c;
        let senet = |c: usize| {
            let h = (c / cfg.senet_reduction).max(1);
            (h * c + h) + (c * h + c)
        };
        let fusion = |c: usize| 2 * senet(c) + conv(2 * c, c, 1);
        let msconv = |cin: usize, co: usize| {
            let q = co / 4;
            let branches: usize =
                [1usize, 3, 5, 7].iter().map(|&k| conv(cin, q, 1) + conv(q, q, k)).sum();
            branches + conv(co, co, 1) + bn(co)
        };

        let mut expect = 0;
        let widths = [4usize, 8, 16, 32];
        for (i, &w) in widths.iter().enumerate() {
            let cin = if i == 0 { 1 } else { widths[i - 1] };
            expect += 2 * msconv(cin, w);
            expect += fusion(w);
        }
        expect += msconv(32, 64) + msconv(64, 64);
        for &w in widths.iter().rev() {
            expect += conv(2 * w, w, 3);
            expect += fusion(w);
            expect += msconv(w, w);
        }
        expect += conv(4, 1, 1);

        assert_eq!(model.trainable_scalar_count(), expect);
    }

    #[test]
    fn forward_trace_matches_expected_shapes() {
        let mut model = CdseUnet::<f32>::build(tiny_config(), 5).unwrap();
        let mut g = Graph::new();
        let img = image(1, 16, 1.0);
        let edg = edge_map(1, 16);
        let (probs, _, trace) = model.forward(&mut g, &img, Some(&edg), Mode::Eval).unwrap();

        let d = |c, s| Dims::new(1, c, s, s);
        assert_eq!(trace.encoder, vec![d(4, 16), d(8, 8), d(16, 4), d(32, 2)]);
        assert_eq!(trace.bottleneck, d(64, 1));
        assert_eq!(trace.decoder, vec![d(32, 2), d(16, 4), d(8, 8), d(4, 16)]);
        assert_eq!(trace.output, d(1, 16));
        assert!(g.value(probs).iter().all(|p| (0.0..=1.0).contains(p)));

        let mut g = Graph::new();
        let (probs, _, _) = model.forward(&mut g, &img, Some(&edg), Mode::Train).unwrap();
        assert!(
            g.value(probs).iter().all(|p| *p > 0.0 && *p < 1.0),
            "batch statistics keep train-mode outputs strictly inside (0, 1)"
        );
    }

    #[test]
    fn forward_accepts_larger_inputs_divisible_by_the_stride() {
        let mut model = CdseUnet::<f32>::build(tiny_config(), 5).unwrap();
        let mut g = Graph::new();
        let img = image(1, 32, 1.0);
        let edg = edge_map(1, 32);
        let (_, _, trace) = model.forward(&mut g, &img, Some(&edg), Mode::Eval).unwrap();
        assert_eq!(trace.output, Dims::new(1, 1, 32, 32));

        let img = image(1, 24, 1.0);
        let edg = edge_map(1, 24);
        let mut g = Graph::new();
        let err = model.forward(&mut g, &img, Some(&edg), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("2^levels"));
    }

    #[test]
    fn edge_batch_is_required_when_the_edge_path_is_on() {
        let mut model = CdseUnet::<f32>::build(tiny_config(), 2).unwrap();
        let mut g = Graph::new();
        let img = image(1, 16, 1.0);
        assert!(model.forward(&mut g, &img, None, Mode::Eval).is_err());

        let edg = edge_map(1, 32);
        let err = model.forward(&mut g, &img, Some(&edg), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("do not match"));
    }

    #[test]
    fn baseline_config_drops_edge_and_attention_parameters() {
        let cfg = ModelConfig {
            fusion: FusionVariant::SimpleConcat,
            conv: ConvVariant::Plain3x3,
            edge_path: false,
            ..tiny_config()
        };
        let mut model = CdseUnet::<f32>::build(cfg, 3).unwrap();
        for p in model.params.iter() {
            assert!(!p.name.contains(".se"), "unexpected attention param {}", p.name);
            assert!(!p.name.contains(".edge"), "unexpected edge path param {}", p.name);
            assert!(
                !p.name.starts_with("enc") || !p.name.contains(".fuse"),
                "unexpected encoder fusion param {}",
                p.name
            );
        }
        let mut g = Graph::new();
        let img = image(2, 16, 1.0);
        let (probs, _, trace) = model.forward(&mut g, &img, None, Mode::Eval).unwrap();
        assert_eq!(trace.output, Dims::new(2, 1, 16, 16));
        assert_eq!(g.dims(probs), Dims::new(2, 1, 16, 16));

        let with_edge = model.infer(&img, Some(&edge_map(2, 16))).unwrap();
        let without = model.infer(&img, None).unwrap();
        assert_eq!(with_edge.data, without.data, "edge input must be ignored");
    }

    #[test]
    fn predict_binarizes_at_the_threshold() {
        let mut model = CdseUnet::<f32>::build(tiny_config(), 7).unwrap();
        let img = image(1, 16, 2.0);
        let edg = edge_map(1, 16);
        let probs = model.infer(&img, Some(&edg)).unwrap();
        let mask = model.predict(&img, Some(&edg), 0.5).unwrap();
        for (p, m) in probs.data.iter().zip(&mask.data) {
            assert_eq!(*m, if *p > 0.5 { 1.0 } else { 0.0 });
        }
        let loose = model.predict(&img, Some(&edg), 0.1).unwrap();
        let strict = model.predict(&img, Some(&edg), 0.9).unwrap();
        for (l, s) in loose.data.iter().zip(&strict.data) {
            assert!(l >= s, "raising the threshold must never add mask pixels");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { levels: 0, ..tiny_config() },
            ModelConfig { base_width: 6, ..tiny_config() },
            ModelConfig { senet_reduction: 0, ..tiny_config() },
            ModelConfig { input_size: 20, ..tiny_config() },
            ModelConfig { bottleneck_layers: 0, ..tiny_config() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?} should not validate");
        }
        assert!(ModelConfig { base_width: 6, conv: ConvVariant::Plain3x3, ..tiny_config() }
            .validate()
            .is_ok());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = ModelConfig {
            base_width: 8,
            levels: 3,
            bottleneck_layers: 1,
            fusion: FusionVariant::SingleSenet,
            conv: ConvVariant::Plain3x3,
            edge_path: false,
            senet_reduction: 4,
            input_size: 32,
        };
        let pairs = cfg.to_key_values();
        let back =
            ModelConfig::from_key_values(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
                .unwrap();
        assert_eq!(back, cfg);

        assert!(ModelConfig::from_key_values([("widths", "8")]).is_err());
        assert!(ModelConfig::from_key_values([("fusion", "triple")]).is_err());
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    add_assign, concat_channels, gelu, gelu_backward, resize_bilinear, resize_bilinear_backward, split_channels,
    ChannelNorm, ChannelNormCache, Conv, DepthwiseConv,
};
use super::params::ParamSet;
use super::{FeatureMap, Mode, SegmenterConfig, StageHook};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Parameters whose names start with this prefix form the classification head.
pub const HEAD_PREFIX: &str = "decode.head.";

#[derive(Clone, Debug)]
struct Block {
    expand: Conv,
    depthwise: DepthwiseConv,
    project: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Conv,
    norm: ChannelNorm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Decoder {
    proj: Vec<Conv>,
    fuse: Conv,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Stage>,
    decoder: Decoder,
}

/// Which parameters receive gradients during backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardScope {
    Full,
    HeadOnly,
}

struct BlockCache {
    input: Tensor4,
    expanded: Tensor4,
    mixed: Tensor4,
    activated: Tensor4,
}

struct StageCache {
    input: Tensor4,
    norm: ChannelNormCache,
    blocks: Vec<BlockCache>,
    hook_scale: Option<Vec<f64>>,
    output: Tensor4,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache {
    stages: Vec<StageCache>,
    projected_hw: Vec<(usize, usize)>,
    fused_input: Tensor4,
    fused: Tensor4,
    fused_activated: Tensor4,
    low_res_hw: (usize, usize),
}

/// Hierarchical strided-convolution encoder with per-stage mixing blocks and
/// an all-stage fusing decoder.
#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    params: ParamSet,
    layout: Layout,
}

fn embed_geometry(downsample: usize) -> (usize, usize) {
    // Overlapping patch embedding: kernel 2d-1 with padding d-1 maps H to H/d.
    if downsample == 1 {
        (3, 1)
    } else {
        (2 * downsample - 1, downsample - 1)
    }
}

fn build_layout(cfg: &SegmenterConfig, params: &mut ParamSet) -> Layout {
    let mut stages = Vec::with_capacity(cfg.num_stages);
    let mut cin = 3;
    for s in 0..cfg.num_stages {
        let c = cfg.stage_channels[s];
        let d = cfg.stage_downsample[s];
        let (k, pad) = embed_geometry(d);
        let prefix = format!("stage{}", s + 1);
        let embed = Conv {
            weight: params.push(format!("{prefix}.embed.weight"), &[c, cin, k, k]),
            bias: params.push(format!("{prefix}.embed.bias"), &[c]),
            cin,
            cout: c,
            k,
            stride: d,
            pad,
        };
        let norm = ChannelNorm {
            gamma: params.push(format!("{prefix}.norm.gamma"), &[c]),
            beta: params.push(format!("{prefix}.norm.beta"), &[c]),
            channels: c,
            eps: 1e-6,
        };
        let hidden = c * cfg.mlp_ratio;
        let blocks = (0..cfg.blocks_per_stage[s])
            .map(|b| {
                let bp = format!("{prefix}.block{}", b + 1);
                Block {
                    expand: Conv {
                        weight: params.push(format!("{bp}.expand.weight"), &[hidden, c, 1, 1]),
                        bias: params.push(format!("{bp}.expand.bias"), &[hidden]),
                        cin: c,
                        cout: hidden,
                        k: 1,
                        stride: 1,
                        pad: 0,
                    },
                    depthwise: DepthwiseConv {
                        weight: params.push(format!("{bp}.depthwise.weight"), &[hidden, 1, 3, 3]),
                        bias: params.push(format!("{bp}.depthwise.bias"), &[hidden]),
                        channels: hidden,
                    },
                    project: Conv {
                        weight: params.push(format!("{bp}.project.weight"), &[c, hidden, 1, 1]),
                        bias: params.push(format!("{bp}.project.bias"), &[c]),
                        cin: hidden,
                        cout: c,
                        k: 1,
                        stride: 1,
                        pad: 0,
                    },
                }
            })
            .collect();
        stages.push(Stage { embed, norm, blocks });
        cin = c;
    }
    let dim = cfg.decoder_dim;
    let pointwise = |params: &mut ParamSet, name: &str, cin: usize, cout: usize| Conv {
        weight: params.push(format!("{name}.weight"), &[cout, cin, 1, 1]),
        bias: params.push(format!("{name}.bias"), &[cout]),
        cin,
        cout,
        k: 1,
        stride: 1,
        pad: 0,
    };
    let proj = (0..cfg.num_stages)
        .map(|s| pointwise(params, &format!("decode.proj{}", s + 1), cfg.stage_channels[s], dim))
        .collect();
    let fuse = pointwise(params, "decode.fuse", dim * cfg.num_stages, dim);
    let head = pointwise(params, "decode.head", dim, cfg.num_classes);
    Layout {
        stages,
        decoder: Decoder { proj, fuse, head },
    }
}

fn initialize(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = params.specs().to_vec();
    let data = params.data_mut();
    for spec in specs {
        let range = spec.range();
        if spec.name.ends_with(".gamma") {
            data[range].fill(1.0);
        } else if spec.name.ends_with(".weight") {
            let fan_in: usize = spec.shape[1..].iter().product();
            let mut std = (2.0 / fan_in as f64).sqrt();
            if spec.name.ends_with(".project.weight") {
                // keep residual branches small at initialization
                std *= 0.5;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut data[range] {
                *v = normal.sample(&mut rng);
            }
        }
    }
}

impl Segmenter {
    /// Builds a model with deterministic initialization for `seed`.
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = build_layout(&config, &mut params);
        initialize(&mut params, seed);
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored parameters; shapes must match the config.
    pub fn from_params(config: SegmenterConfig, stored: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = build_layout(&config, &mut params);
        if !params.same_layout(&stored) {
            return Err(Error::Contract(
                "stored parameter shapes do not match the architecture config".into(),
            ));
        }
        Ok(Self {
            config,
            params: stored,
            layout,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Logits `B × C × H × W` for a batch of `B × 3 × H × W` images.
    pub fn forward(&self, images: &Tensor4, mode: Mode, hook: Option<&mut dyn StageHook>) -> Result<Tensor4> {
        self.forward_cached(images, mode, hook).map(|(logits, _)| logits)
    }

    /// Stage outputs after any train-mode hook, in stage order.
    pub fn stage_features(&self, images: &Tensor4) -> Result<Vec<FeatureMap>> {
        let (_, cache) = self.forward_cached(images, Mode::Eval, None)?;
        Ok(cache
            .stages
            .into_iter()
            .enumerate()
            .map(|(i, s)| FeatureMap {
                values: s.output,
                stage_index: i + 1,
            })
            .collect())
    }

    pub fn forward_cached(
        &self,
        images: &Tensor4,
        mode: Mode,
        mut hook: Option<&mut dyn StageHook>,
    ) -> Result<(Tensor4, ForwardCache)> {
        if images.c != 3 {
            return Err(Error::Contract(format!("expected 3 input channels, got {}", images.c)));
        }
        self.config.check_input(images.h, images.w)?;
        let p = self.params.data();
        let mut x = images.clone();
        let mut stage_caches = Vec::with_capacity(self.layout.stages.len());
        for (s, stage) in self.layout.stages.iter().enumerate() {
            let input = x;
            let embedded = stage.embed.forward(p, &input);
            let (mut h, norm) = stage.norm.forward(p, &embedded);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let expanded = block.expand.forward(p, &h);
                let mixed = block.depthwise.forward(p, &expanded);
                let activated = gelu(&mixed);
                let mut out = block.project.forward(p, &activated);
                add_assign(&mut out, &h);
                blocks.push(BlockCache {
                    input: std::mem::replace(&mut h, out),
                    expanded,
                    mixed,
                    activated,
                });
            }
            let mut hook_scale = None;
            if mode == Mode::Train {
                if let Some(hook) = hook.as_deref_mut() {
                    let mut fm = FeatureMap {
                        values: h,
                        stage_index: s + 1,
                    };
                    hook_scale = hook.apply(&mut fm);
                    h = fm.values;
                }
            }
            x = h.clone();
            stage_caches.push(StageCache {
                input,
                norm,
                blocks,
                hook_scale,
                output: h,
            });
        }

        let dec = &self.layout.decoder;
        let (lh, lw) = (stage_caches[0].output.h, stage_caches[0].output.w);
        let mut projected_hw = Vec::with_capacity(stage_caches.len());
        let mut upsampled = Vec::with_capacity(stage_caches.len());
        for (proj, sc) in dec.proj.iter().zip(&stage_caches) {
            let y = proj.forward(p, &sc.output);
            projected_hw.push((y.h, y.w));
            upsampled.push(resize_bilinear(&y, lh, lw));
        }
        let fused_input = concat_channels(&upsampled);
        let fused = dec.fuse.forward(p, &fused_input);
        let fused_activated = gelu(&fused);
        let low = dec.head.forward(p, &fused_activated);
        let logits = resize_bilinear(&low, images.h, images.w);
        Ok((
            logits,
            ForwardCache {
                stages: stage_caches,
                projected_hw,
                fused_input,
                fused,
                fused_activated,
                low_res_hw: (lh, lw),
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// `dlogits = dL/dlogits`. Outside `scope` the gradient stays zero.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor4, scope: BackwardScope) -> Vec<f64> {
        let p = self.params.data();
        let mut grads = vec![0.0; p.len()];
        let dec = &self.layout.decoder;
        let (lh, lw) = cache.low_res_hw;
        let dlow = resize_bilinear_backward(dlogits, lh, lw);
        let need_rest = scope == BackwardScope::Full;
        let dact = dec
            .head
            .backward(p, &cache.fused_activated, &dlow, &mut grads, need_rest);
        let Some(dact) = dact else {
            return grads;
        };
        let dfused = gelu_backward(&cache.fused, &dact);
        let dconcat = dec
            .fuse
            .backward(p, &cache.fused_input, &dfused, &mut grads, true)
            .expect("input gradient requested");
        let widths = vec![self.config.decoder_dim; self.config.num_stages];
        let dparts = split_channels(&dconcat, &widths);

        let mut carry: Option<Tensor4> = None;
        for s in (0..self.layout.stages.len()).rev() {
            let stage = &self.layout.stages[s];
            let sc = &cache.stages[s];
            let (ph, pw) = cache.projected_hw[s];
            let dproj = resize_bilinear_backward(&dparts[s], ph, pw);
            let mut dout = dec.proj[s]
                .backward(p, &sc.output, &dproj, &mut grads, true)
                .expect("input gradient requested");
            if let Some(c) = carry.take() {
                add_assign(&mut dout, &c);
            }
            if let Some(scale) = &sc.hook_scale {
                let plane = dout.plane_len();
                for (chunk, k) in dout.data.chunks_mut(plane).zip(scale) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
            }
            for (block, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                let dact = block
                    .project
                    .backward(p, &bc.activated, &dout, &mut grads, true)
                    .expect("input gradient requested");
                let dmixed = gelu_backward(&bc.mixed, &dact);
                let dexp = block.depthwise.backward(p, &bc.expanded, &dmixed, &mut grads);
                let dres = block
                    .expand
                    .backward(p, &bc.input, &dexp, &mut grads, true)
                    .expect("input gradient requested");
                add_assign(&mut dout, &dres);
            }
            let dembedded = stage.norm.backward(p, &sc.norm, &dout, &mut grads);
            carry = stage.embed.backward(p, &sc.input, &dembedded, &mut grads, s > 0);
        }
        grads
    }
}

//! The shared encoder–decoder: stem, four hierarchical encoder stages of one
//! [`BlockKind`], uncertainty-weighted skips, decoder and segmentation head.

use crate::blocks::{BlockKind, BlockParams, StageBlock};
use crate::error::{invalid, Error, Result};
use crate::nn::{Builder, Conv3d, ConvTranspose3d, Ctx, Norm, NormKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Conv3dSpec, ConvTranspose3dSpec, Real, Var};

/// Architecture of a segmentation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegConfig {
    pub variant: BlockKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stage_depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub state_dim: usize,
    pub window: usize,
    pub heads: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            variant: BlockKind::MambaOut,
            in_channels: 1,
            num_classes: 2,
            stem_channels: 48,
            stage_depths: vec![1, 1, 1, 1],
            channels: vec![48, 96, 192, 384],
            state_dim: 4,
            window: 4,
            heads: 4,
        }
    }
}

impl SegConfig {
    pub fn new(variant: BlockKind) -> Self {
        SegConfig {
            variant,
            ..SegConfig::default()
        }
    }

    /// Same layout with stem width `base` and the schedule doubled from it.
    pub fn with_width(mut self, base: usize) -> Self {
        self.stem_channels = base;
        self.channels = (0..self.channels.len()).map(|i| base << i).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(invalid!("need at least one input channel and two classes"));
        }
        if self.channels.is_empty() || self.channels.len() != self.stage_depths.len() {
            return Err(invalid!(
                "{} stage depths for {} stage widths",
                self.stage_depths.len(),
                self.channels.len()
            ));
        }
        if self.stem_channels != self.channels[0] {
            return Err(invalid!("stem width {} differs from first stage width {}", self.stem_channels, self.channels[0]));
        }
        if let Some(w) = self.channels.windows(2).find(|w| w[1] != 2 * w[0]) {
            return Err(invalid!("channel schedule must double per stage, got {} -> {}", w[0], w[1]));
        }
        if self.stage_depths.contains(&0) {
            return Err(invalid!("every stage needs at least one block"));
        }
        if self.state_dim == 0 || self.window == 0 {
            return Err(invalid!("state_dim and window must be positive"));
        }
        if self.variant == BlockKind::MambaSwin {
            if let Some(c) = self.channels.iter().find(|&&c| self.heads == 0 || c % self.heads != 0) {
                return Err(invalid!("{} attention heads do not divide {c} channels", self.heads));
            }
        }
        Ok(())
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        2 << (self.channels.len() - 1)
    }
}

/// Parameter-free uncertainty weighting of a skip feature:
/// `x̄ = σ(mean_c x)`, `u = −x̄ ln x̄`, output `x · (2 − u)`.
pub fn fue<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    if x.shape().len() != 4 {
        return Err(invalid!("fue: expected (C, D, H, W), got {:?}", x.shape()));
    }
    let xbar = x.mean_axis(0)?.sigmoid()?;
    let u = xbar.mul(xbar.ln()?)?.neg()?;
    x.mul(u.neg()?.add_scalar(T::lit(2.0))?)
}

/// Depthwise 7³ stride-2 convolution followed by a pointwise projection.
#[derive(Debug, Clone)]
pub struct Stem {
    pub depthwise: Conv3d,
    pub pointwise: Conv3d,
}

impl Stem {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Stem {
            depthwise: b.conv("dw", in_ch, in_ch, 7, Conv3dSpec::new(2, 3).with_groups(in_ch))?,
            pointwise: b.conv("pw", in_ch, out_ch, 1, Conv3dSpec::default())?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1..].iter().any(|e| e % 2 != 0) {
            return Err(invalid!("stem: expected (C, D, H, W) with even extents, got {s:?}"));
        }
        let y = self.depthwise.forward(ctx, x)?;
        self.pointwise.forward(ctx, y)
    }
}

/// `ReLU(IN(Conv₃(ConvT(d) ⊕ FUE(skip))))`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub up: ConvTranspose3d,
    pub conv: Conv3d,
    pub norm: Norm,
}

/// Kernel 3, stride 2, output padding 1: exactly doubles every extent.
fn upsample_spec() -> ConvTranspose3dSpec {
    ConvTranspose3dSpec::new(2, 1, 1)
}

impl DecoderBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(DecoderBlock {
            up: b.conv_transpose("up", in_ch, out_ch, 3, upsample_spec())?,
            conv: b.conv("conv", 2 * out_ch, out_ch, 3, Conv3dSpec::new(1, 1))?,
            norm: b.norm("norm", out_ch, NormKind::Instance)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, prev: Var<'g, T>, skip: Var<'g, T>) -> Result<Var<'g, T>> {
        let up = self.up.forward(ctx, prev)?;
        let (us, ss) = (up.shape(), skip.shape());
        if us.len() != 4 || ss.len() != 4 || us[1..] != ss[1..] {
            return Err(Error::shape("decoder skip", &us, &ss));
        }
        let merged = Var::concat(&[up, fue(skip)?], 0)?;
        let y = self.conv.forward(ctx, merged)?;
        self.norm.forward(ctx, y)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<StageBlock>,
    /// Strided 2³ convolution into the next stage; absent after the last.
    pub down: Option<Conv3d>,
}

/// Parameter layout of a segmentation network; the values live in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: SegConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    /// Deepest first.
    pub decoders: Vec<DecoderBlock>,
    pub final_up: ConvTranspose3d,
    pub head: Conv3d,
}

impl Network {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, config: &SegConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(&mut b.scope("stem"), config.in_channels, config.stem_channels)?;
        let n = config.channels.len();
        let mut stages = Vec::with_capacity(n);
        for (i, (&ch, &depth)) in config.channels.iter().zip(&config.stage_depths).enumerate() {
            let mut sb = b.scope(&format!("stage{i}"));
            let blocks = (0..depth)
                .map(|j| {
                    let p = BlockParams {
                        state_dim: config.state_dim,
                        window: config.window,
                        heads: config.heads,
                        shifted: j % 2 == 1,
                    };
                    StageBlock::new(&mut sb.scope(&format!("block{j}")), config.variant, ch, p)
                })
                .collect::<Result<Vec<_>>>()?;
            let down = if i + 1 < n {
                Some(sb.conv("down", ch, 2 * ch, 2, Conv3dSpec::new(2, 0))?)
            } else {
                None
            };
            stages.push(Stage { blocks, down });
        }
        let decoders = (0..n - 1)
            .rev()
            .map(|i| DecoderBlock::new(&mut b.scope(&format!("decoder{i}")), config.channels[i + 1], config.channels[i]))
            .collect::<Result<Vec<_>>>()?;
        let c0 = config.channels[0];
        Ok(Network {
            config: config.clone(),
            stem,
            stages,
            decoders,
            final_up: b.conv_transpose("final_up", c0, c0, 3, upsample_spec())?,
            head: b.conv("head", c0, config.num_classes, 1, Conv3dSpec::default())?,
        })
    }

    /// Per-stage encoder outputs, shallowest first.
    pub fn encode<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let s = x.shape();
        let k = self.config.divisor();
        if s.len() != 4 || s[0] != self.config.in_channels || s[1..].iter().any(|e| e % k != 0 || *e == 0) {
            return Err(invalid!(
                "network input must be ({}, D, H, W) with extents divisible by {k}, got {s:?}",
                self.config.in_channels
            ));
        }
        let mut h = self.stem.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(ctx, h)?;
            }
            skips.push(h);
            if let Some(down) = &stage.down {
                h = down.forward(ctx, h)?;
            }
        }
        Ok(skips)
    }

    /// Class logits `(num_classes, D, H, W)` at input resolution.
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let skips = self.encode(ctx, x)?;
        let mut d = *skips.last().expect("at least one stage");
        for (dec, skip) in self.decoders.iter().zip(skips.iter().rev().skip(1)) {
            d = dec.forward(ctx, d, *skip)?;
        }
        let d = self.final_up.forward(ctx, d)?;
        self.head.forward(ctx, d)
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn config(&self) -> &SegConfig {
        &self.net.config
    }

    /// Inference-only forward pass returning the logits tensor.
    pub fn predict_logits(&self, x: &crate::tensor::Tensor<T>) -> Result<crate::tensor::Tensor<T>> {
        let g = crate::tensor::Graph::new();
        let ctx = self.params.bind(&g, false);
        let y = self.net.forward(&ctx, g.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Same architecture, parameters converted to precision `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

/// Builds and initializes a network from `seed`.
pub fn build_model<T: Real>(cfg: &SegConfig, seed: u64) -> Result<Model<T>> {
    let mut params = ParamStore::new();
    let mut rng = Rng::new(seed);
    let net = Network::new(&mut Builder::new(&mut params, &mut rng), cfg)?;
    Ok(Model { net, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_at, Graph, Tensor};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, rng.uniform_vec(n, -1.0, 1.0)).unwrap()
    }

    fn tiny(variant: BlockKind) -> SegConfig {
        SegConfig {
            state_dim: 2,
            window: 2,
            heads: 2,
            ..SegConfig::new(variant).with_width(4)
        }
    }

    #[test]
    fn stem_halves_resolution_into_48_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0);
        let stem = Stem::new(&mut Builder::new(&mut store, &mut rng), 1, 48).unwrap();
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        for (n, out) in [(32, 16), (16, 8)] {
            let x = g.constant(Tensor::full(&[1, n, n, n], 1.0f32));
            assert_eq!(stem.forward(&ctx, x).unwrap().shape(), vec![48, out, out, out]);
        }
        assert!(stem.forward(&ctx, g.constant(Tensor::zeros(&[1, 15, 16, 16]))).is_err());
    }

    #[test]
    fn zero_stem_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let stem = Stem::new(&mut Builder::new(&mut store, &mut rng), 1, 8).unwrap();
        store.zero_where(|_| true);
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let y = stem.forward(&ctx, g.constant(random(&mut rng, &[1, 8, 8, 8]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    fn fue_of(x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        (*fue(g.constant(x.clone())).unwrap().value()).clone()
    }

    #[test]
    fn fue_closed_form_values() {
        assert!(fue_of(&Tensor::zeros(&[3, 2, 2, 2])).data().iter().all(|&v| v == 0.0));
        // Channel mean zero at every voxel: scale 2 − ½ ln 2.
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1.0, -3.0, -1.0, 3.0]).unwrap();
        let scale = 2.0 - 0.5 * 2f64.ln();
        assert!((scale - 1.65343).abs() < 1e-5);
        for (y, x) in fue_of(&x).data().iter().zip(x.data()) {
            assert!((y - x * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn fue_matches_scalar_reimplementation() {
        let mut rng = Rng::new(2);
        let x = random(&mut rng, &[5, 3, 2, 4]);
        let y = fue_of(&x);
        let vox = 24;
        for v in 0..vox {
            let mean = (0..5).map(|c| x.data()[c * vox + v]).sum::<f64>() / 5.0;
            let xbar = 1.0 / (1.0 + (-mean).exp());
            let u = -xbar * xbar.ln();
            assert!((0.0..=1.0 / std::f64::consts::E + 1e-15).contains(&u));
            for c in 0..5 {
                let i = c * vox + v;
                assert!((y.data()[i] - x.data()[i] * (2.0 - u)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fue_scale_is_bounded_and_monotone() {
        // One channel, so x̄ = σ(x); larger |x| moves x̄ away from 1/e.
        let xs: Vec<f64> = (-40..=40).map(|i| f64::from(i) * 0.25).collect();
        let y = fue_of(&Tensor::from_f64(&[1, 1, 1, xs.len()], &xs).unwrap());
        let inv_e = 1.0 / std::f64::consts::E;
        let scales: Vec<(f64, f64)> = xs
            .iter()
            .zip(y.data())
            .filter(|(x, _)| x.abs() > 1e-9)
            .map(|(x, y)| (1.0 / (1.0 + (-x).exp()), y / x))
            .collect();
        for &(_, s) in &scales {
            assert!((2.0 - inv_e - 1e-12..=2.0).contains(&s));
        }
        // On either side of the entropy peak, nearer means smaller scale.
        for a in &scales {
            for b in &scales {
                let same_side = (a.0 - inv_e) * (b.0 - inv_e) > 0.0;
                if same_side && (a.0 - inv_e).abs() < (b.0 - inv_e).abs() {
                    assert!(a.1 <= b.1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn fue_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, &[3, 2, 2, 2]);
        let r = grad_check(|_, v| fue(v)?.square()?.sum(), &x, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn decoder_block_shapes_and_mismatch() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(4);
        let dec = DecoderBlock::new(&mut Builder::new(&mut store, &mut rng), 384, 192).unwrap();
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let prev = g.constant(Tensor::full(&[384, 2, 2, 2], 0.1f32));
        let skip = g.constant(Tensor::full(&[192, 4, 4, 4], 0.2f32));
        assert_eq!(dec.forward(&ctx, prev, skip).unwrap().shape(), vec![192, 4, 4, 4]);
        let bad = g.constant(Tensor::full(&[192, 8, 4, 4], 0.2f32));
        let err = dec.forward(&ctx, prev, bad).unwrap_err().to_string();
        assert!(err.contains("[192, 4, 4, 4]") && err.contains("[192, 8, 4, 4]"), "{err}");
    }

    #[test]
    fn decoder_with_zero_conv_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(5);
        let dec = DecoderBlock::new(&mut Builder::new(&mut store, &mut rng), 4, 2).unwrap();
        store.zero_where(|n| n.starts_with("conv."));
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let prev = g.constant(random(&mut rng, &[4, 2, 2, 2]));
        let skip = g.constant(random(&mut rng, &[2, 4, 4, 4]));
        let y = dec.forward(&ctx, prev, skip).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(6);
        let dec = DecoderBlock::new(&mut Builder::new(&mut store, &mut rng), 4, 2).unwrap();
        let prev = random(&mut rng, &[4, 2, 2, 2]);
        let skip = random(&mut rng, &[2, 4, 4, 4]);
        let probe = random(&mut rng, &[2, 4, 4, 4]);
        // Differentiate through the upsampled path and, separately, the skip.
        let r = grad_check(
            |g, v| {
                let ctx = store.bind(g, false);
                dec.forward(&ctx, v, g.constant(skip.clone()))?.mul(g.constant(probe.clone()))?.sum()
            },
            &prev,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = grad_check(
            |g, v| {
                let ctx = store.bind(g, false);
                dec.forward(&ctx, g.constant(prev.clone()), v)?.mul(g.constant(probe.clone()))?.sum()
            },
            &skip,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn full_width_network_produces_full_resolution_logits() {
        let model = build_model::<f32>(&SegConfig::new(BlockKind::MambaOut), 0).unwrap();
        let x = Tensor::full(&[1, 32, 32, 32], 0.5f32);
        let y = model.predict_logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 32, 32, 32]);
        assert!(y.all_finite());
        let again = model.predict_logits(&x).unwrap();
        assert_eq!(y.data(), again.data());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SegConfig::default();
        cfg.channels[2] = 100;
        assert!(cfg.validate().is_err());
        let cfg = SegConfig {
            stem_channels: 32,
            ..SegConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SegConfig {
            heads: 5,
            ..SegConfig::new(BlockKind::MambaSwin)
        };
        assert!(cfg.validate().is_err());
        let model = build_model::<f64>(&tiny(BlockKind::TsMamba), 0).unwrap();
        assert!(model.predict_logits(&Tensor::zeros(&[1, 24, 16, 16])).is_err());
    }

    #[test]
    fn variants_differ_only_inside_encoder_stages() {
        let shapes = |kind| {
            let m = build_model::<f32>(&SegConfig::new(kind), 0).unwrap();
            m.params
                .ids()
                .map(|id| (m.params.name(id).to_string(), m.params.get(id).shape().to_vec()))
                .filter(|(n, _)| !n.starts_with("stage") || n.ends_with(".down.weight") || n.ends_with(".down.bias"))
                .collect::<Vec<_>>()
        };
        let base = shapes(BlockKind::TsMamba);
        assert!(base.iter().any(|(n, _)| n.starts_with("decoder")));
        for kind in [BlockKind::TsHydra, BlockKind::MambaSwin, BlockKind::MambaOut] {
            assert_eq!(shapes(kind), base, "{kind}");
        }
    }

    #[test]
    fn mambaout_is_the_smallest_variant() {
        let count = |kind| build_model::<f32>(&SegConfig::new(kind), 0).unwrap().param_count();
        let out = count(BlockKind::MambaOut);
        for kind in [BlockKind::TsMamba, BlockKind::TsHydra, BlockKind::MambaSwin] {
            assert!(out < count(kind), "{kind}");
        }
    }

    #[test]
    fn logits_stay_finite_across_random_inputs() {
        for kind in BlockKind::ALL {
            let model = build_model::<f32>(&SegConfig::new(kind).with_width(8), 1).unwrap();
            let mut rng = Rng::new(7);
            for _ in 0..100 {
                let data: Vec<f32> = rng.normal_vec(16 * 16 * 16).into_iter().map(|v| (3.0 * v) as f32).collect();
                let y = model.predict_logits(&Tensor::new(&[1, 16, 16, 16], data).unwrap()).unwrap();
                assert!(y.all_finite(), "{kind}");
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for kind in BlockKind::ALL {
            let model = build_model::<f64>(&tiny(kind), 2).unwrap();
            let mut rng = Rng::new(8);
            let x = random(&mut rng, &[1, 16, 16, 16]);
            let probe = random(&mut rng, &[2, 16, 16, 16]);
            let coords: Vec<usize> = (0..12).map(|_| rng.int(0, x.numel() - 1)).collect();
            let r = grad_check_at(
                |g, v| {
                    let ctx = model.params.bind(g, false);
                    model.net.forward(&ctx, v)?.mul(g.constant(probe.clone()))?.sum()
                },
                &x,
                1e-6,
                &coords,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-3, "{kind}: {r:?}");
        }
    }
}

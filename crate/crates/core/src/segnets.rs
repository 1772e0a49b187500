//! Segmentation generator and mask discriminator.
//!
//! The generator is an encoder/decoder with mirrored skip connections:
//! encoder level `i` halves the resolution with a 4×4 stride-2 convolution,
//! decoder level `j` doubles it with a 4×4 stride-2 transposed convolution
//! and consumes the encoder activation of matching resolution. A 3×3 head
//! over the last decoder output and the raw input produces a one-channel
//! probability map.
//!
//! Parameter names follow `block/layer/kind`, e.g. `enc1/norm/gain`.

use crate::autograd::{Binding, ModelParams, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            base_channels: 16,
            depth: 4,
            image_size: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Contract(format!(
                "generator needs positive channels and depth, got {self:?}"
            )));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 1 << self.depth.min(63) {
            return Err(Error::Contract(format!(
                "image size {} must be a power of two of at least 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    /// Output channels of encoder level `i`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        level_channels(self.base_channels, i)
    }

    /// Output channels of decoder level `j`; the last level emits
    /// `base_channels`, the others mirror the encoder they feed into.
    pub fn decoder_channels(&self, j: usize) -> usize {
        if j + 1 == self.depth {
            self.base_channels
        } else {
            self.encoder_channels(self.depth - 2 - j)
        }
    }

    /// Spatial side of encoder level `i` output.
    pub fn encoder_size(&self, i: usize) -> usize {
        self.image_size >> (i + 1)
    }

    /// Encoder levels normalize unless they are the first level or their
    /// output plane is a single pixel, where they use a bias instead.
    fn encoder_normalized(&self, i: usize) -> bool {
        i > 0 && self.encoder_size(i) >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_channels: 16,
            depth: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.input_channels) {
            return Err(Error::Contract(format!(
                "discriminator input channels must be 1 or 2, got {}",
                self.input_channels
            )));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Contract(format!(
                "discriminator needs positive channels and depth, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn conditional(&self) -> bool {
        self.input_channels == 2
    }

    pub fn block_channels(&self, i: usize) -> usize {
        level_channels(self.base_channels, i)
    }
}

fn level_channels(base: usize, i: usize) -> usize {
    (base << i.min(3)).min(8 * base)
}

struct Init<'a> {
    rng: &'a mut SplitMix64,
    params: ModelParams<f32>,
}

impl Init<'_> {
    fn gaussian(&mut self, name: String, dims: [usize; 4]) -> Result<()> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| (INIT_STD * rng.gaussian()) as f32);
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: String, len: usize) -> Result<()> {
        self.params.insert(name, Tensor::zeros([len]))
    }

    fn norm(&mut self, block: &str, channels: usize) -> Result<()> {
        self.params.insert(format!("{block}/norm/gain"), Tensor::ones([channels]))?;
        self.zeros(format!("{block}/norm/bias"), channels)
    }
}

/// Draws generator weights from N(0, 0.02²) in construction order; biases
/// and norm shifts start at zero, norm gains at one.
pub fn init_generator(cfg: &GeneratorConfig, rng: &mut SplitMix64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut init = Init {
        rng,
        params: ModelParams::new(),
    };
    let mut cin = cfg.input_channels;
    for i in 0..cfg.depth {
        let cout = cfg.encoder_channels(i);
        init.gaussian(format!("enc{i}/conv/weight"), [cout, cin, 4, 4])?;
        if cfg.encoder_normalized(i) {
            init.norm(&format!("enc{i}"), cout)?;
        } else {
            init.zeros(format!("enc{i}/conv/bias"), cout)?;
        }
        cin = cout;
    }
    for j in 0..cfg.depth {
        if j > 0 {
            cin += cfg.encoder_channels(cfg.depth - 1 - j);
        }
        let cout = cfg.decoder_channels(j);
        init.gaussian(format!("dec{j}/convt/weight"), [cin, cout, 4, 4])?;
        init.norm(&format!("dec{j}"), cout)?;
        cin = cout;
    }
    init.gaussian("head/conv/weight".into(), [1, cin + cfg.input_channels, 3, 3])?;
    init.zeros("head/conv/bias".into(), 1)?;
    Ok(init.params)
}

/// Maps `[N, Cin, S, S]` to per-pixel oil probabilities `[N, 1, S, S]`.
pub fn generator_forward<'t, T: Scalar>(
    cfg: &GeneratorConfig,
    params: &Binding<'t, T>,
    input: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (_, c, h, w) = input.value().nchw("generator(input)")?;
    if c != cfg.input_channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape {
            op: "generator(input)",
            detail: format!(
                "expected [N, {}, {s}, {s}], got {:?}",
                cfg.input_channels,
                input.dims(),
                s = cfg.image_size
            ),
        });
    }
    let p = |name: String| params.get(&name);

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = *input;
    for i in 0..cfg.depth {
        let y = x.conv2d(&p(format!("enc{i}/conv/weight"))?, 2, 1)?;
        let y = if cfg.encoder_normalized(i) {
            y.instance_norm(&p(format!("enc{i}/norm/gain"))?, &p(format!("enc{i}/norm/bias"))?, NORM_EPS)?
        } else {
            y.add_channel_bias(&p(format!("enc{i}/conv/bias"))?)?
        };
        x = y.relu();
        skips.push(x);
    }
    for j in 0..cfg.depth {
        if j > 0 {
            x = x.concat_channels(&skips[cfg.depth - 1 - j])?;
        }
        x = x
            .conv2d_transpose(&p(format!("dec{j}/convt/weight"))?, 2, 1)?
            .instance_norm(&p(format!("dec{j}/norm/gain"))?, &p(format!("dec{j}/norm/bias"))?, NORM_EPS)?
            .relu();
    }
    Ok(x
        .concat_channels(input)?
        .conv2d(&p("head/conv/weight".into())?, 1, 1)?
        .add_channel_bias(&p("head/conv/bias".into())?)?
        .sigmoid())
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, rng: &mut SplitMix64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut init = Init {
        rng,
        params: ModelParams::new(),
    };
    let mut cin = cfg.input_channels;
    for i in 0..cfg.depth {
        let cout = cfg.block_channels(i);
        init.gaussian(format!("blk{i}/conv/weight"), [cout, cin, 4, 4])?;
        init.zeros(format!("blk{i}/conv/bias"), cout)?;
        cin = cout;
    }
    init.gaussian("out/conv/weight".into(), [1, cin, 1, 1])?;
    init.zeros("out/conv/bias".into(), 1)?;
    Ok(init.params)
}

/// Probability `[N]` that each mask is a ground-truth segmentation.
/// `conditioning` must be present exactly when the config is conditional.
pub fn discriminator_forward<'t, T: Scalar>(
    cfg: &DiscriminatorConfig,
    params: &Binding<'t, T>,
    mask: &Var<'t, T>,
    conditioning: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (n, c, h, w) = mask.value().nchw("discriminator(mask)")?;
    if c != 1 {
        return Err(Error::Shape {
            op: "discriminator(mask)",
            detail: format!("mask must have one channel, got {:?}", mask.dims()),
        });
    }
    let min_side = 1usize << cfg.depth.min(63);
    if h % min_side != 0 || w % min_side != 0 {
        return Err(Error::Shape {
            op: "discriminator(mask)",
            detail: format!("{h}×{w} is not divisible by 2^{}", cfg.depth),
        });
    }
    let mut x = match (cfg.conditional(), conditioning) {
        (false, None) => *mask,
        (true, Some(cond)) => mask.concat_channels(cond)?,
        (false, Some(_)) => {
            return Err(Error::Contract(
                "conditioning image given to an unconditional discriminator".into(),
            ))
        }
        (true, None) => {
            return Err(Error::Contract(
                "conditional discriminator called without a conditioning image".into(),
            ))
        }
    };
    let p = |name: String| params.get(&name);
    let slope = T::from_f64(LEAKY_SLOPE);
    for i in 0..cfg.depth {
        x = x
            .conv2d(&p(format!("blk{i}/conv/weight"))?, 2, 1)?
            .add_channel_bias(&p(format!("blk{i}/conv/bias"))?)?
            .leaky_relu(slope);
    }
    x.spatial_mean()?
        .conv2d(&p("out/conv/weight".into())?, 1, 0)?
        .add_channel_bias(&p("out/conv/bias".into())?)?
        .reshape([n])
        .map(|v| v.sigmoid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;
    use crate::autograd::Tape;

    fn tiny_gen() -> GeneratorConfig {
        GeneratorConfig {
            input_channels: 2,
            base_channels: 4,
            depth: 2,
            image_size: 8,
        }
    }

    fn random_input(dims: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(dims, |_| rng.uniform() as f32 * 3.0)
    }

    #[test]
    fn generator_parameter_count() {
        let cfg = GeneratorConfig {
            image_size: 64,
            ..tiny_gen()
        };
        let p = init_generator(&cfg, &mut SplitMix64::new(0)).unwrap();
        // enc0: 4·2·16 weights + 4 bias; enc1: 8·4·16 + 2·8 norm
        // dec0: 8·4·16 + 2·4 norm; dec1: (4+4)·4·16 + 2·4 norm
        // head: (4+2)·9 + 1
        let expected = (128 + 4) + (512 + 16) + (512 + 8) + (512 + 8) + (54 + 1);
        assert_eq!(p.num_scalars(), expected);
        assert_eq!(p.value("dec1/convt/weight").unwrap().dims(), &[8, 4, 4, 4]);
    }

    #[test]
    fn channel_cap_and_mirror() {
        let cfg = GeneratorConfig {
            depth: 5,
            image_size: 64,
            ..GeneratorConfig::default()
        };
        let widths: Vec<usize> = (0..5).map(|i| cfg.encoder_channels(i)).collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 128]);
        let p = init_generator(&cfg, &mut SplitMix64::new(0)).unwrap();
        // 2×2 bottleneck still normalizes; the level-4 conv maps 4×4 → 2×2.
        assert!(p.get("enc4/norm/gain").is_some());
        let tape = Tape::new();
        let b = p.bind_frozen(&tape);
        let x = tape.constant(random_input([1, 2, 64, 64], 1));
        assert_eq!(generator_forward(&cfg, &b, &x).unwrap().dims(), vec![1, 1, 64, 64]);
    }

    #[test]
    fn bottleneck_size() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.encoder_size(cfg.depth - 1), 4);
        let one_pixel = GeneratorConfig {
            image_size: 16,
            ..cfg
        };
        assert_eq!(one_pixel.encoder_size(3), 1);
        let p = init_generator(&one_pixel, &mut SplitMix64::new(0)).unwrap();
        assert!(p.get("enc3/conv/bias").is_some() && p.get("enc3/norm/gain").is_none());
        let tape = Tape::new();
        let x = tape.constant(random_input([2, 2, 16, 16], 2));
        let y = generator_forward(&one_pixel, &p.bind_frozen(&tape), &x).unwrap();
        assert_eq!(y.dims(), vec![2, 1, 16, 16]);
    }

    #[test]
    fn config_violations() {
        let bad = [
            GeneratorConfig { depth: 0, ..tiny_gen() },
            GeneratorConfig { image_size: 12, ..tiny_gen() },
            GeneratorConfig { image_size: 2, ..tiny_gen() },
            GeneratorConfig { base_channels: 0, ..tiny_gen() },
        ];
        for cfg in bad {
            assert!(matches!(init_generator(&cfg, &mut SplitMix64::new(0)), Err(Error::Contract(_))));
        }
        let d = DiscriminatorConfig { input_channels: 3, ..Default::default() };
        assert!(init_discriminator(&d, &mut SplitMix64::new(0)).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_generator(&tiny_gen(), &mut SplitMix64::new(9)).unwrap();
        let b = init_generator(&tiny_gen(), &mut SplitMix64::new(9)).unwrap();
        assert_eq!(a, b);
        let c = init_generator(&tiny_gen(), &mut SplitMix64::new(10)).unwrap();
        assert_ne!(a, c);
        let d = DiscriminatorConfig::default();
        assert_eq!(
            init_discriminator(&d, &mut SplitMix64::new(3)).unwrap(),
            init_discriminator(&d, &mut SplitMix64::new(3)).unwrap()
        );
    }

    #[test]
    fn init_statistics() {
        let p = init_generator(&GeneratorConfig::default(), &mut SplitMix64::new(0)).unwrap();
        let w = p.value("dec0/convt/weight").unwrap();
        let mean = w.mean_f64();
        let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.numel() as f64).sqrt();
        assert!(mean.abs() < 1e-3 && (std - 0.02).abs() < 1e-3, "mean {mean} std {std}");
        assert!(p.value("head/conv/bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_shape_and_range() {
        let cfg = tiny_gen();
        let p = init_generator(&cfg, &mut SplitMix64::new(1)).unwrap();
        let tape = Tape::new();
        let b = p.bind_frozen(&tape);
        let x = tape.constant(random_input([3, 2, 8, 8], 4).map(|v| v * 1e3));
        let y = generator_forward(&cfg, &b, &x).unwrap();
        assert_eq!(y.dims(), vec![3, 1, 8, 8]);
        assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));

        let wrong = tape.constant(Tensor::zeros([1, 2, 16, 16]));
        assert!(matches!(generator_forward(&cfg, &b, &wrong), Err(Error::Shape { .. })));
        let wrong_c = tape.constant(Tensor::zeros([1, 1, 8, 8]));
        assert!(generator_forward(&cfg, &b, &wrong_c).is_err());
    }

    #[test]
    fn skips_are_live() {
        // Scaling an encoder weight by zero kills that level's activation and
        // therefore its skip; the output must react.
        let cfg = GeneratorConfig {
            depth: 3,
            image_size: 16,
            ..tiny_gen()
        };
        let p = init_generator(&cfg, &mut SplitMix64::new(2)).unwrap();
        let x = random_input([1, 2, 16, 16], 5);
        let run = |params: &ModelParams<f32>| {
            let tape = Tape::new();
            let b = params.bind_frozen(&tape);
            let y = generator_forward(&cfg, &b, &tape.constant(x.clone())).unwrap();
            y.value().as_ref().clone()
        };
        let base = run(&p);
        for d in 0..cfg.depth - 1 {
            // Levels below the bottleneck feed a skip directly; mask the
            // skip by zeroing the decoder kernel rows that read it.
            let mut q = p.clone();
            let name = format!("dec{}/convt/weight", cfg.depth - 1 - d);
            let kernel = &mut q.get_mut(&name).unwrap().value;
            let skip_c = cfg.encoder_channels(d);
            let (cin, rest) = (kernel.dims()[0], kernel.numel() / kernel.dims()[0]);
            for v in &mut kernel.data_mut()[(cin - skip_c) * rest..] {
                *v = 0.0;
            }
            let out = run(&q);
            let diff = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff > 1e-6, "skip at level {d} has no effect");
        }
    }

    #[test]
    fn structural_mirror() {
        for depth in 1..=5 {
            let cfg = GeneratorConfig {
                depth,
                image_size: 32,
                base_channels: 2,
                input_channels: 1,
            };
            for j in 1..depth {
                // Decoder j input: previous decoder output at image_size >> (depth - j).
                let dec_side = cfg.image_size >> (depth - j);
                assert_eq!(dec_side, cfg.encoder_size(depth - 1 - j));
            }
            let p = init_generator(&cfg, &mut SplitMix64::new(0)).unwrap();
            let tape = Tape::new();
            let x = tape.constant(random_input([1, 1, 32, 32], 1));
            assert!(generator_forward(&cfg, &p.bind_frozen(&tape), &x).is_ok());
        }
    }

    #[test]
    fn generator_batch_independent() {
        let cfg = tiny_gen();
        let p = init_generator(&cfg, &mut SplitMix64::new(3)).unwrap();
        let x = random_input([3, 2, 8, 8], 6);
        let tape = Tape::new();
        let b = p.bind_frozen(&tape);
        let all = generator_forward(&cfg, &b, &tape.constant(x.clone())).unwrap().value();
        for s in 0..3 {
            let one = generator_forward(&cfg, &b, &tape.constant(x.slice_batch(s, s + 1).unwrap())).unwrap();
            assert_eq!(*one.value(), all.slice_batch(s, s + 1).unwrap());
        }
    }

    #[test]
    fn discriminator_shape_range_and_permutation() {
        let cfg = DiscriminatorConfig::default();
        let p = init_discriminator(&cfg, &mut SplitMix64::new(4)).unwrap();
        let masks = random_input([4, 1, 16, 16], 7);
        let tape = Tape::new();
        let b = p.bind_frozen(&tape);
        let y = discriminator_forward(&cfg, &b, &tape.constant(masks.clone()), None).unwrap();
        assert_eq!(y.dims(), vec![4]);
        assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));

        let order = [2, 0, 3, 1];
        let parts: Vec<Tensor<f32>> = order.iter().map(|&i| masks.slice_batch(i, i + 1).unwrap()).collect();
        let permuted = Tensor::stack_batch(&parts.iter().collect::<Vec<_>>()).unwrap();
        let yp = discriminator_forward(&cfg, &b, &tape.constant(permuted), None).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(yp.value().data()[k], y.value().data()[i]);
        }
    }

    #[test]
    fn discriminator_conditioning_contract() {
        let plain = DiscriminatorConfig::default();
        let cond = DiscriminatorConfig { input_channels: 2, ..plain };
        let pp = init_discriminator(&plain, &mut SplitMix64::new(0)).unwrap();
        let pc = init_discriminator(&cond, &mut SplitMix64::new(0)).unwrap();
        let tape = Tape::new();
        let m = tape.constant(random_input([1, 1, 8, 8], 1));
        let c = tape.constant(random_input([1, 1, 8, 8], 2));
        assert!(matches!(
            discriminator_forward(&plain, &pp.bind_frozen(&tape), &m, Some(&c)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            discriminator_forward(&cond, &pc.bind_frozen(&tape), &m, None),
            Err(Error::Contract(_))
        ));
        assert!(discriminator_forward(&cond, &pc.bind_frozen(&tape), &m, Some(&c)).is_ok());
        let odd = tape.constant(Tensor::zeros([1, 1, 12, 12]));
        assert!(discriminator_forward(&plain, &pp.bind_frozen(&tape), &odd, None).is_err());
    }

    #[test]
    fn discriminator_mask_gradient() {
        let cfg = DiscriminatorConfig {
            base_channels: 3,
            depth: 2,
            ..Default::default()
        };
        let p = init_discriminator(&cfg, &mut SplitMix64::new(5)).unwrap().cast::<f64>();
        let mask = random_input([2, 1, 8, 8], 8).cast::<f64>();
        let report = check_gradients(&[mask], 1e-3, |t, v| {
            Ok(discriminator_forward(&cfg, &p.bind_frozen(t), &v[0], None)?.mean())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn generator_end_to_end_gradient() {
        let cfg = tiny_gen();
        let mut p = init_generator(&cfg, &mut SplitMix64::new(6)).unwrap().cast::<f64>();
        // Larger weights keep activations away from the relu kinks' flat
        // regions so the check exercises every layer.
        for name in p.names().cloned().collect::<Vec<_>>() {
            let v = &mut p.get_mut(&name).unwrap().value;
            if name.ends_with("weight") {
                *v = v.map(|x| x * 10.0);
            }
        }
        let x = random_input([1, 2, 8, 8], 9).cast::<f64>();
        let target = random_input([1, 1, 8, 8], 10).cast::<f64>().map(|v| v / 3.0);
        let names: Vec<String> = p.names().cloned().collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.value(n).unwrap().clone()).collect();
        let report = check_gradients(&inputs, 1e-3, |t, v| {
            let b = Binding::from_vars(names.iter().cloned().zip(v.iter().copied()));
            generator_forward(&cfg, &b, &t.constant(x.clone()))?.mse(&t.constant(target.clone()))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}

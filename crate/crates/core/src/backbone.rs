//! Encoder-decoder feature pyramid.
//!
//! A tiny five-stage encoder produces maps at strides 8, 16, 32, 64 and 128.
//! The decoder runs top-down: the fifth map passes a 1x1 CBR, each lower
//! level adds a 1x1 CBR of its skip connection to a 1x1 CBR of the bilinearly
//! upsampled level above, and an extra sixth level is a strided 3x3 CBR of
//! the fifth. Every decoded level then passes a 3x3 CBR enhancement block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, resize_bilinear, resize_bilinear_backward, Cbr, Mode, Param, Tensor, Visit};

pub const PYRAMID_LEVELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    Tiny,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(EncoderKind::Tiny),
            "vgg16-reduced" => Err(Error::config(
                "backbone.encoder",
                "vgg16-reduced needs pretrained weights and is not bundled; use `tiny`",
            )),
            other => Err(Error::config(
                "backbone.encoder",
                format!("unknown encoder `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub encoder_kind: EncoderKind,
    pub input_size: usize,
    pub encoder_widths: [usize; 5],
    pub decoder_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            encoder_kind: EncoderKind::Tiny,
            input_size: 384,
            encoder_widths: [32, 64, 128, 128, 128],
            decoder_channels: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 128 != 0 {
            return Err(Error::config(
                "backbone.input_size",
                format!("{} is not a multiple of 128", self.input_size),
            ));
        }
        if self.encoder_widths.iter().any(|w| *w < 2) || self.decoder_channels == 0 {
            return Err(Error::config("backbone.widths", "channel widths must be positive"));
        }
        Ok(())
    }
}

/// Decoder outputs D1..D6, finest first.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.h).collect()
    }
}

pub struct Encoder {
    /// Blocks per stage; the first stage is a three-block stride-8 stem.
    pub stages: Vec<Vec<Cbr>>,
}

impl Encoder {
    pub fn new<R: Rng>(rng: &mut R, widths: [usize; 5]) -> Result<Self> {
        let stem = (widths[0] / 2).max(1);
        let mut stages = vec![vec![
            Cbr::new(rng, 3, stem, 3, 2)?,
            Cbr::new(rng, stem, stem, 3, 2)?,
            Cbr::new(rng, stem, widths[0], 3, 2)?,
        ]];
        for k in 1..5 {
            stages.push(vec![Cbr::new(rng, widths[k - 1], widths[k], 3, 2)?]);
        }
        Ok(Self { stages })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(5);
        let mut cur = x.clone();
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                cur = block.forward(&cur, mode)?;
            }
            maps.push(cur.clone());
        }
        Ok(maps)
    }

    pub fn eval(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(5);
        let mut cur = x.clone();
        for stage in &self.stages {
            for block in stage {
                cur = block.eval(&cur)?;
            }
            maps.push(cur.clone());
        }
        Ok(maps)
    }

    /// `grads[k]` is the gradient flowing into stage `k`'s output from
    /// outside the encoder. Returns the input gradient.
    pub fn backward(&mut self, mut grads: Vec<Tensor>) -> Result<Tensor> {
        let mut carry: Option<Tensor> = None;
        for k in (0..self.stages.len()).rev() {
            let mut g = grads.pop().expect("one gradient per stage");
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            for block in self.stages[k].iter_mut().rev() {
                g = block.backward(&g)?;
            }
            carry = Some(g);
        }
        Ok(carry.expect("at least one stage"))
    }
}

impl Visit for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, stage) in self.stages.iter_mut().enumerate() {
            for (i, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.conv{i}", k + 1)), f);
            }
        }
    }
}

/// Checks that a skip map of side `skip` can receive an upsampled map of
/// side `upper`: a stride-2 stage maps `s` to `ceil(s / 2)`.
fn check_skip(skip: usize, upper: usize) -> Result<()> {
    if skip == 2 * upper || skip + 1 == 2 * upper {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "skip map {skip}x{skip} does not pair with upsampled {upper}x{upper}"
        )))
    }
}

/// Extra-level downsampling: stride 3 turns a 3x3 map into 1x1, otherwise
/// a padded stride-2 convolution halves the map.
fn extra_level_geometry(fifth: usize) -> (usize, usize) {
    if fifth == 3 {
        (3, 0)
    } else {
        (2, 1)
    }
}

pub struct Decoder {
    pub channels: usize,
    pub lateral: Vec<Cbr>,
    pub topdown: Vec<Cbr>,
    /// Strided block building the sixth level.
    pub extra: Cbr,
    pub enhance: Vec<Cbr>,
    fused: Vec<Tensor>,
}

impl Decoder {
    pub fn new<R: Rng>(rng: &mut R, encoder_widths: [usize; 5], channels: usize) -> Result<Self> {
        let lateral = encoder_widths
            .iter()
            .map(|w| Cbr::new(rng, *w, channels, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let topdown = (0..4)
            .map(|_| Cbr::new(rng, channels, channels, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let enhance = (0..PYRAMID_LEVELS)
            .map(|_| Cbr::new(rng, channels, channels, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let extra = Cbr::with_padding(rng, channels, channels, 3, 2, 1)?;
        Ok(Self {
            channels,
            lateral,
            topdown,
            extra,
            enhance,
            fused: Vec::new(),
        })
    }

    /// Sets the extra-level stride for a given fifth-level size. The block's
    /// weights do not depend on the stride.
    pub fn prepare_extra(&mut self, fifth: usize) {
        let (stride, pad) = extra_level_geometry(fifth);
        self.extra.conv.stride = stride;
        self.extra.conv.pad = pad;
    }

    fn extra_block(&self, fifth: usize) -> Result<&Cbr> {
        if (self.extra.conv.stride, self.extra.conv.pad) == extra_level_geometry(fifth) {
            Ok(&self.extra)
        } else {
            Err(Error::Shape(format!(
                "extra level not prepared for a {fifth}x{fifth} fifth level"
            )))
        }
    }

    /// Top-down decode of encoder maps E1..E5 into D1..D6.
    pub fn forward(&mut self, enc: &[Tensor], mode: Mode) -> Result<PyramidFeatures> {
        if enc.len() != 5 {
            return Err(Error::Shape(format!("{} encoder maps, expected 5", enc.len())));
        }
        for k in 0..4 {
            check_skip(enc[k].h, enc[k + 1].h)?;
        }
        self.prepare_extra(enc[4].h);
        let mut fused = vec![Tensor::zeros(0, 0, 0, 0); 5];
        fused[4] = self.lateral[4].forward(&enc[4], mode)?;
        for k in (0..4).rev() {
            let up = resize_bilinear(&fused[k + 1], enc[k].h, enc[k].w);
            let mut f = self.topdown[k].forward(&up, mode)?;
            f.add_assign(&self.lateral[k].forward(&enc[k], mode)?);
            fused[k] = f;
        }
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for k in 0..5 {
            levels.push(self.enhance[k].forward(&fused[k], mode)?);
        }
        let extra = self.extra.forward(&levels[4], mode)?;
        levels.push(self.enhance[5].forward(&extra, mode)?);
        self.fused = fused;
        Ok(PyramidFeatures { levels })
    }

    pub fn eval(&self, enc: &[Tensor]) -> Result<PyramidFeatures> {
        if enc.len() != 5 {
            return Err(Error::Shape(format!("{} encoder maps, expected 5", enc.len())));
        }
        for k in 0..4 {
            check_skip(enc[k].h, enc[k + 1].h)?;
        }
        let mut fused = self.lateral[4].eval(&enc[4])?;
        let mut fused_all = vec![Tensor::zeros(0, 0, 0, 0); 5];
        fused_all[4] = fused.clone();
        for k in (0..4).rev() {
            let up = resize_bilinear(&fused, enc[k].h, enc[k].w);
            let mut f = self.topdown[k].eval(&up)?;
            f.add_assign(&self.lateral[k].eval(&enc[k])?);
            fused_all[k] = f.clone();
            fused = f;
        }
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for (k, f) in fused_all.iter().enumerate() {
            levels.push(self.enhance[k].eval(f)?);
        }
        let extra = self.extra_block(enc[4].h)?.eval(&levels[4])?;
        levels.push(self.enhance[5].eval(&extra)?);
        Ok(PyramidFeatures { levels })
    }

    /// Returns gradients with respect to E1..E5.
    pub fn backward(&mut self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if grads.len() != PYRAMID_LEVELS {
            return Err(Error::Shape(format!("{} level gradients", grads.len())));
        }
        let extra_grad = self.enhance[5].backward(&grads[5])?;
        let mut d5 = grads[4].clone();
        d5.add_assign(&self.extra.backward(&extra_grad)?);
        let mut dfused = Vec::with_capacity(5);
        for k in 0..4 {
            dfused.push(self.enhance[k].backward(&grads[k])?);
        }
        dfused.push(self.enhance[4].backward(&d5)?);
        let mut denc = vec![Tensor::zeros(0, 0, 0, 0); 5];
        for k in 0..4 {
            denc[k] = self.lateral[k].backward(&dfused[k])?;
            let dup = self.topdown[k].backward(&dfused[k])?;
            let upper = &self.fused[k + 1];
            let d = resize_bilinear_backward(&dup, upper.h, upper.w);
            dfused[k + 1].add_assign(&d);
        }
        denc[4] = self.lateral[4].backward(&dfused[4])?;
        Ok(denc)
    }
}

impl Visit for Decoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, b) in self.lateral.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("lateral{}", k + 1)), f);
        }
        for (k, b) in self.topdown.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("topdown{}", k + 1)), f);
        }
        self.extra.visit(&join(prefix, "extra"), f);
        for (k, b) in self.enhance.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("enhance{}", k + 1)), f);
        }
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new<R: Rng>(rng: &mut R, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(rng, config.encoder_widths)?;
        let mut decoder = Decoder::new(rng, config.encoder_widths, config.decoder_channels)?;
        decoder.prepare_extra(config.input_size / 128);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<PyramidFeatures> {
        let enc = self.encoder.forward(x, mode)?;
        self.decoder.forward(&enc, mode)
    }

    pub fn eval(&self, x: &Tensor) -> Result<PyramidFeatures> {
        let enc = self.encoder.eval(x)?;
        self.decoder.eval(&enc)
    }

    /// Returns the gradient with respect to the input image batch.
    pub fn backward(&mut self, grads: &[Tensor]) -> Result<Tensor> {
        let denc = self.decoder.backward(grads)?;
        self.encoder.backward(denc)
    }
}

impl Visit for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::random_tensor;
    use crate::nn::Conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(input: usize) -> BackboneConfig {
        BackboneConfig {
            encoder_kind: EncoderKind::Tiny,
            input_size: input,
            encoder_widths: [4, 6, 6, 6, 6],
            decoder_channels: 5,
        }
    }

    #[test]
    fn cbr_shape_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, 1, 7, 12, 12);
        let one = Cbr::new(&mut rng, 7, 16, 1, 1).unwrap();
        assert_eq!(one.eval(&x).unwrap().shape(), [1, 16, 12, 12]);
        let three = Cbr::new(&mut rng, 7, 16, 3, 1).unwrap();
        assert_eq!(three.eval(&x).unwrap().shape(), [1, 16, 12, 12]);
    }

    #[test]
    fn identity_cbr_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, 3, 5, 5);
        let mut cbr = Cbr::new(&mut rng, 3, 3, 1, 1).unwrap();
        cbr.conv = Conv2d::zeros(3, 3, 1, 1, 0);
        for c in 0..3 {
            cbr.conv.weight.value[c * 3 + c] = 1.0;
        }
        let y = cbr.eval(&x).unwrap();
        let scale = 1.0 / (1.0f64 + cbr.bn.eps).sqrt();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b.max(0.0) * scale).abs() < 1e-12);
            assert!((a - b.max(0.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn pyramid_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (input, expect) in [
            (384, vec![48, 24, 12, 6, 3, 1]),
            (512, vec![64, 32, 16, 8, 4, 2]),
            (256, vec![32, 16, 8, 4, 2, 1]),
        ] {
            let bb = Backbone::new(&mut rng, small_config(input)).unwrap();
            let x = random_tensor(&mut rng, 1, 3, input, input);
            let pyr = bb.eval(&x).unwrap();
            assert_eq!(pyr.sizes(), expect);
            assert!(pyr.levels.iter().all(|l| l.c == 5));
        }
    }

    #[test]
    fn zero_decoder_gives_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = Decoder::new(&mut rng, [4, 6, 6, 6, 6], 5).unwrap();
        dec.prepare_extra(3);
        dec.visit("", &mut |name, p| {
            if name.ends_with("conv.weight") || name.ends_with("conv.bias") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let sizes = [48, 24, 12, 6, 3];
        let widths = [4, 6, 6, 6, 6];
        let enc: Vec<Tensor> = sizes
            .iter()
            .zip(widths)
            .map(|(s, w)| Tensor::zeros(1, w, *s, *s))
            .collect();
        let pyr = dec.eval(&enc).unwrap();
        assert_eq!(pyr.sizes(), vec![48, 24, 12, 6, 3, 1]);
        assert!(pyr.levels.iter().all(|l| l.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn mismatched_skip_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(&mut rng, [4, 6, 6, 6, 6], 5).unwrap();
        let enc: Vec<Tensor> = [48, 20, 12, 6, 3]
            .iter()
            .zip([4, 6, 6, 6, 6])
            .map(|(s, w)| Tensor::zeros(1, w, *s, *s))
            .collect();
        assert!(dec.eval(&enc).is_err());
    }

    #[test]
    fn unsupported_encoder() {
        assert!("vgg16-reduced".parse::<EncoderKind>().is_err());
        assert_eq!("tiny".parse::<EncoderKind>().unwrap(), EncoderKind::Tiny);
        let mut cfg = small_config(384);
        cfg.input_size = 300;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_matches_eval_in_frozen_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bb = Backbone::new(&mut rng, small_config(256)).unwrap();
        let x = random_tensor(&mut rng, 2, 3, 256, 256);
        let a = bb.forward(&x, Mode::Frozen).unwrap();
        let b = bb.eval(&x).unwrap();
        for (p, q) in a.levels.iter().zip(&b.levels) {
            assert_eq!(p, q);
        }
    }
}

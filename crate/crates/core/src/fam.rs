//! Feature alignment: deformable 3x3 sampling driven by offsets derived from
//! the anchor adjustment branch.
//!
//! Offsets are laid out as `(dy, dx)` pairs per kernel point, kernel points
//! in row-major order, so channel `2k` is the vertical shift of point `k` and
//! `2k + 1` the horizontal one. One offset field is shared by every anchor at
//! a location.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gemm, join, Conv2d, Param, Tensor, Visit};

/// Kernel points of a 3x3 filter.
pub const KERNEL_POINTS: usize = 9;
/// Channels of a full offset field.
pub const OFFSET_CHANNELS: usize = 2 * KERNEL_POINTS;
/// Only the four finest levels carry alignment.
pub const ALIGNED_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OffsetMode {
    /// Regular convolution.
    None,
    /// Offsets from the detection feature itself.
    Implicit,
    /// Offsets from the location deltas only.
    ExplicitLoc,
    /// Offsets from the shape deltas only.
    ExplicitShape,
    /// Offsets from location and shape deltas stacked together.
    ExplicitConcat,
    /// A shared shift from location deltas plus per-point residuals from
    /// shape deltas.
    Disentangled,
}

impl OffsetMode {
    pub const ALL: [OffsetMode; 6] = [
        OffsetMode::None,
        OffsetMode::Implicit,
        OffsetMode::ExplicitLoc,
        OffsetMode::ExplicitShape,
        OffsetMode::ExplicitConcat,
        OffsetMode::Disentangled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OffsetMode::None => "none",
            OffsetMode::Implicit => "implicit",
            OffsetMode::ExplicitLoc => "explicit-loc",
            OffsetMode::ExplicitShape => "explicit-shape",
            OffsetMode::ExplicitConcat => "explicit-concat",
            OffsetMode::Disentangled => "disentangled",
        }
    }

    /// Whether the mode reads the adjustment branch.
    pub fn uses_adjustment(self) -> bool {
        matches!(
            self,
            OffsetMode::ExplicitLoc
                | OffsetMode::ExplicitShape
                | OffsetMode::ExplicitConcat
                | OffsetMode::Disentangled
        )
    }
}

impl std::fmt::Display for OffsetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OffsetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OffsetMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("fam.mode", format!("unknown offset mode `{s}`")))
    }
}

/// Rejects alignment on the two coarsest levels.
pub fn check_level_mode(level: usize, mode: OffsetMode) -> Result<()> {
    if level >= ALIGNED_LEVELS && mode != OffsetMode::None {
        return Err(Error::config(
            format!("fam.level{}.mode", level + 1),
            format!("level {} cannot use alignment mode `{mode}`", level + 1),
        ));
    }
    Ok(())
}

/// Location (`dx, dy` of every anchor) and shape (`dw, dh`) channel groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAdjustment {
    pub loc: Tensor,
    pub shape: Tensor,
}

/// Splits an anchor-major `(dx, dy, dw, dh)` delta map.
pub fn split_adjustment(delta: &Tensor) -> Result<SplitAdjustment> {
    if delta.c % 4 != 0 {
        return Err(Error::Shape(format!(
            "delta map has {} channels, not a multiple of 4",
            delta.c
        )));
    }
    let anchors = delta.c / 4;
    let hw = delta.h * delta.w;
    let mut loc = Tensor::zeros(delta.n, 2 * anchors, delta.h, delta.w);
    let mut shape = Tensor::zeros(delta.n, 2 * anchors, delta.h, delta.w);
    for n in 0..delta.n {
        let src = delta.item(n);
        for a in 0..anchors {
            for j in 0..2 {
                loc.item_mut(n)[(2 * a + j) * hw..(2 * a + j + 1) * hw]
                    .copy_from_slice(&src[(4 * a + j) * hw..(4 * a + j + 1) * hw]);
                shape.item_mut(n)[(2 * a + j) * hw..(2 * a + j + 1) * hw]
                    .copy_from_slice(&src[(4 * a + 2 + j) * hw..(4 * a + 3 + j) * hw]);
            }
        }
    }
    Ok(SplitAdjustment { loc, shape })
}

/// Re-interleaves a split back into the anchor-major layout.
pub fn merge_adjustment(split: &SplitAdjustment) -> Result<Tensor> {
    let (loc, shape) = (&split.loc, &split.shape);
    if loc.shape() != shape.shape() || loc.c % 2 != 0 {
        return Err(Error::Shape("location and shape groups disagree".into()));
    }
    let anchors = loc.c / 2;
    let hw = loc.h * loc.w;
    let mut out = Tensor::zeros(loc.n, 4 * anchors, loc.h, loc.w);
    for n in 0..loc.n {
        let dst = out.item_mut(n);
        for a in 0..anchors {
            for j in 0..2 {
                dst[(4 * a + j) * hw..(4 * a + j + 1) * hw]
                    .copy_from_slice(&loc.item(n)[(2 * a + j) * hw..(2 * a + j + 1) * hw]);
                dst[(4 * a + 2 + j) * hw..(4 * a + 3 + j) * hw]
                    .copy_from_slice(&shape.item(n)[(2 * a + j) * hw..(2 * a + j + 1) * hw]);
            }
        }
    }
    Ok(out)
}

/// Per-location deformable offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    /// Shared `(dy, dx)` shift, disentangled mode only.
    pub shift: Option<Tensor>,
    /// Per-point residuals, disentangled mode only.
    pub residual: Option<Tensor>,
    /// Final offsets, `2K` channels.
    pub composed: Tensor,
}

impl OffsetField {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            shift: None,
            residual: None,
            composed: Tensor::zeros(n, OFFSET_CHANNELS, h, w),
        }
    }
}

/// `composed[2k + j] = shift[j] + residual[2k + j]` for every kernel point.
pub fn compose_offsets(shift: &Tensor, residual: &Tensor) -> Result<Tensor> {
    if shift.c != 2
        || residual.c != OFFSET_CHANNELS
        || shift.n != residual.n
        || shift.h != residual.h
        || shift.w != residual.w
    {
        return Err(Error::Shape(format!(
            "shift {:?} and residual {:?} do not compose",
            shift.shape(),
            residual.shape()
        )));
    }
    let hw = shift.h * shift.w;
    let mut out = residual.clone();
    for n in 0..shift.n {
        let s = shift.item(n).to_vec();
        let dst = out.item_mut(n);
        for k in 0..KERNEL_POINTS {
            for j in 0..2 {
                let ch = 2 * k + j;
                for p in 0..hw {
                    dst[ch * hw + p] += s[j * hw + p];
                }
            }
        }
    }
    Ok(out)
}

/// The offset-producing convolutions of one level. All are 3x3 and start at
/// zero so a fresh head samples exactly like a regular convolution.
pub struct OffsetHead {
    pub mode: OffsetMode,
    /// Implicit/explicit offset conv, or the shift conv when disentangled.
    primary: Option<Conv2d>,
    /// Residual conv, disentangled only.
    residual: Option<Conv2d>,
}

impl OffsetHead {
    pub fn new(mode: OffsetMode, feat_channels: usize, anchors: usize) -> Self {
        let zero = |c_in, c_out| Some(Conv2d::zeros(c_in, c_out, 3, 1, 1));
        let (primary, residual) = match mode {
            OffsetMode::None => (None, None),
            OffsetMode::Implicit => (zero(feat_channels, OFFSET_CHANNELS), None),
            OffsetMode::ExplicitLoc | OffsetMode::ExplicitShape => {
                (zero(2 * anchors, OFFSET_CHANNELS), None)
            }
            OffsetMode::ExplicitConcat => (zero(4 * anchors, OFFSET_CHANNELS), None),
            OffsetMode::Disentangled => (zero(2 * anchors, 2), zero(2 * anchors, OFFSET_CHANNELS)),
        };
        Self {
            mode,
            primary,
            residual,
        }
    }

    pub fn primary_mut(&mut self) -> Option<&mut Conv2d> {
        self.primary.as_mut()
    }

    pub fn residual_mut(&mut self) -> Option<&mut Conv2d> {
        self.residual.as_mut()
    }

    fn need_split(split: Option<&SplitAdjustment>) -> Result<&SplitAdjustment> {
        split.ok_or_else(|| {
            Error::config("fam.mode", "offset mode needs the anchor adjustment branch")
        })
    }

    /// Computes the offsets for `mode`, caching for backward.
    pub fn forward(&mut self, feat: &Tensor, split: Option<&SplitAdjustment>) -> Result<OffsetField> {
        let apply = |conv: &mut Conv2d, x: &Tensor| conv.forward(x);
        match self.mode {
            OffsetMode::None => Ok(OffsetField::zeros(feat.n, feat.h, feat.w)),
            OffsetMode::Implicit => Ok(OffsetField {
                shift: None,
                residual: None,
                composed: apply(self.primary.as_mut().unwrap(), feat)?,
            }),
            OffsetMode::ExplicitLoc => {
                let s = Self::need_split(split)?;
                Ok(OffsetField {
                    shift: None,
                    residual: None,
                    composed: apply(self.primary.as_mut().unwrap(), &s.loc)?,
                })
            }
            OffsetMode::ExplicitShape => {
                let s = Self::need_split(split)?;
                Ok(OffsetField {
                    shift: None,
                    residual: None,
                    composed: apply(self.primary.as_mut().unwrap(), &s.shape)?,
                })
            }
            OffsetMode::ExplicitConcat => {
                let s = Self::need_split(split)?;
                let both = Tensor::concat_channels(&[&s.loc, &s.shape])?;
                Ok(OffsetField {
                    shift: None,
                    residual: None,
                    composed: apply(self.primary.as_mut().unwrap(), &both)?,
                })
            }
            OffsetMode::Disentangled => {
                let s = Self::need_split(split)?;
                let shift = apply(self.primary.as_mut().unwrap(), &s.loc)?;
                let residual = apply(self.residual.as_mut().unwrap(), &s.shape)?;
                let composed = compose_offsets(&shift, &residual)?;
                Ok(OffsetField {
                    shift: Some(shift),
                    residual: Some(residual),
                    composed,
                })
            }
        }
    }

    /// Inference-only offsets.
    pub fn eval(&self, feat: &Tensor, split: Option<&SplitAdjustment>) -> Result<OffsetField> {
        let eval = |conv: &Option<Conv2d>, x: &Tensor| conv.as_ref().unwrap().eval(x);
        match self.mode {
            OffsetMode::None => Ok(OffsetField::zeros(feat.n, feat.h, feat.w)),
            OffsetMode::Implicit => Ok(OffsetField {
                shift: None,
                residual: None,
                composed: eval(&self.primary, feat)?,
            }),
            OffsetMode::ExplicitLoc => Ok(OffsetField {
                shift: None,
                residual: None,
                composed: eval(&self.primary, &Self::need_split(split)?.loc)?,
            }),
            OffsetMode::ExplicitShape => Ok(OffsetField {
                shift: None,
                residual: None,
                composed: eval(&self.primary, &Self::need_split(split)?.shape)?,
            }),
            OffsetMode::ExplicitConcat => {
                let s = Self::need_split(split)?;
                let both = Tensor::concat_channels(&[&s.loc, &s.shape])?;
                Ok(OffsetField {
                    shift: None,
                    residual: None,
                    composed: eval(&self.primary, &both)?,
                })
            }
            OffsetMode::Disentangled => {
                let s = Self::need_split(split)?;
                let shift = eval(&self.primary, &s.loc)?;
                let residual = eval(&self.residual, &s.shape)?;
                let composed = compose_offsets(&shift, &residual)?;
                Ok(OffsetField {
                    shift: Some(shift),
                    residual: Some(residual),
                    composed,
                })
            }
        }
    }

    /// Backpropagates the composed-offset gradient. Returns the gradient for
    /// the detection feature (implicit mode) and for the split adjustment.
    pub fn backward(
        &mut self,
        d_composed: &Tensor,
    ) -> Result<(Option<Tensor>, Option<SplitAdjustment>)> {
        match self.mode {
            OffsetMode::None => Ok((None, None)),
            OffsetMode::Implicit => Ok((Some(self.primary.as_mut().unwrap().backward(d_composed)?), None)),
            OffsetMode::ExplicitLoc => {
                let d = self.primary.as_mut().unwrap().backward(d_composed)?;
                let zeros = d.zeros_like();
                Ok((None, Some(SplitAdjustment { loc: d, shape: zeros })))
            }
            OffsetMode::ExplicitShape => {
                let d = self.primary.as_mut().unwrap().backward(d_composed)?;
                let zeros = d.zeros_like();
                Ok((None, Some(SplitAdjustment { loc: zeros, shape: d })))
            }
            OffsetMode::ExplicitConcat => {
                let d = self.primary.as_mut().unwrap().backward(d_composed)?;
                let half = d.c / 2;
                Ok((
                    None,
                    Some(SplitAdjustment {
                        loc: d.channels(0, half),
                        shape: d.channels(half, half),
                    }),
                ))
            }
            OffsetMode::Disentangled => {
                let hw = d_composed.h * d_composed.w;
                let mut d_shift = Tensor::zeros(d_composed.n, 2, d_composed.h, d_composed.w);
                for n in 0..d_composed.n {
                    let src = d_composed.item(n);
                    let dst = d_shift.item_mut(n);
                    for k in 0..KERNEL_POINTS {
                        for j in 0..2 {
                            for p in 0..hw {
                                dst[j * hw + p] += src[(2 * k + j) * hw + p];
                            }
                        }
                    }
                }
                let loc = self.primary.as_mut().unwrap().backward(&d_shift)?;
                let shape = self.residual.as_mut().unwrap().backward(d_composed)?;
                Ok((None, Some(SplitAdjustment { loc, shape })))
            }
        }
    }
}

impl Visit for OffsetHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self.mode {
            OffsetMode::None => {}
            OffsetMode::Disentangled => {
                self.primary.as_mut().unwrap().visit(&join(prefix, "loc"), f);
                self.residual.as_mut().unwrap().visit(&join(prefix, "shape"), f);
            }
            _ => self.primary.as_mut().unwrap().visit(&join(prefix, "offset"), f),
        }
    }
}

/// Bilinear taps of one sample point: four flat indices (or `None` when out
/// of bounds) with their weights, plus the fractional parts.
#[derive(Clone, Copy)]
struct Taps {
    idx: [Option<usize>; 4],
    wt: [f64; 4],
    ly: f64,
    lx: f64,
}

#[inline]
fn taps(py: f64, px: f64, h: usize, w: usize) -> Taps {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };
    Taps {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        wt: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
        ly,
        lx,
    }
}

fn check_offsets(feat: &Tensor, offsets: &Tensor) -> Result<()> {
    if offsets.c != OFFSET_CHANNELS
        || offsets.n != feat.n
        || offsets.h != feat.h
        || offsets.w != feat.w
    {
        return Err(Error::Shape(format!(
            "offsets {:?} do not align with features {:?}",
            offsets.shape(),
            feat.shape()
        )));
    }
    if offsets.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("deformable offsets".into()));
    }
    Ok(())
}

/// Deformable columns for one image: row `c * 9 + k` holds channel `c`
/// sampled at every location shifted by kernel point `k` and its offset.
fn deform_columns(feat: &[f64], c: usize, h: usize, w: usize, off: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * KERNEL_POINTS * hw];
    for k in 0..KERNEL_POINTS {
        let (ry, rx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let py = y as f64 + ry + off[2 * k * hw + p];
                let px = x as f64 + rx + off[(2 * k + 1) * hw + p];
                let t = taps(py, px, h, w);
                for ci in 0..c {
                    let plane = &feat[ci * hw..(ci + 1) * hw];
                    let mut v = 0.0;
                    for (i, wt) in t.idx.iter().zip(t.wt) {
                        if let Some(i) = i {
                            v += wt * plane[*i];
                        }
                    }
                    cols[(ci * KERNEL_POINTS + k) * hw + p] = v;
                }
            }
        }
    }
    cols
}

/// Scatters column gradients back to features and offsets.
#[allow(clippy::too_many_arguments)]
fn deform_columns_backward(
    feat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    off: &[f64],
    dcols: &[f64],
    dfeat: &mut [f64],
    doff: &mut [f64],
) {
    let hw = h * w;
    for k in 0..KERNEL_POINTS {
        let (ry, rx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let py = y as f64 + ry + off[2 * k * hw + p];
                let px = x as f64 + rx + off[(2 * k + 1) * hw + p];
                let t = taps(py, px, h, w);
                let (mut gy, mut gx) = (0.0, 0.0);
                for ci in 0..c {
                    let g = dcols[(ci * KERNEL_POINTS + k) * hw + p];
                    if g == 0.0 {
                        continue;
                    }
                    let plane = &feat[ci * hw..(ci + 1) * hw];
                    let v = |j: usize| t.idx[j].map_or(0.0, |i| plane[i]);
                    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                    gy += g * ((1.0 - t.lx) * (v10 - v00) + t.lx * (v11 - v01));
                    gx += g * ((1.0 - t.ly) * (v01 - v00) + t.ly * (v11 - v10));
                    let dplane = &mut dfeat[ci * hw..(ci + 1) * hw];
                    for (i, wt) in t.idx.iter().zip(t.wt) {
                        if let Some(i) = i {
                            dplane[*i] += g * wt;
                        }
                    }
                }
                doff[2 * k * hw + p] += gy;
                doff[(2 * k + 1) * hw + p] += gx;
            }
        }
    }
}

/// Deformable 3x3 convolution, stride 1, output the same size as the input.
/// Samples outside the map read zero.
pub fn deform_sample(feat: &Tensor, offsets: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
    check_offsets(feat, offsets)?;
    let out_c = bias.len();
    if weight.len() != out_c * feat.c * KERNEL_POINTS {
        return Err(Error::Shape(format!(
            "{} weights for {} -> {} channels",
            weight.len(),
            feat.c,
            out_c
        )));
    }
    let hw = feat.h * feat.w;
    let mut y = Tensor::zeros(feat.n, out_c, feat.h, feat.w);
    for n in 0..feat.n {
        let cols = deform_columns(feat.item(n), feat.c, feat.h, feat.w, offsets.item(n));
        let out = y.item_mut(n);
        for (o, b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        gemm(out_c, feat.c * KERNEL_POINTS, hw, weight, false, &cols, false, 1.0, out);
    }
    Ok(y)
}

struct DeformCache {
    feat: Tensor,
    offsets: Tensor,
    cols: Vec<Vec<f64>>,
}

/// Deformable convolution layer with gradients for features, weights and
/// offsets.
pub struct DeformConv {
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<DeformCache>,
}

impl DeformConv {
    pub fn new<R: rand::Rng>(rng: &mut R, in_c: usize, out_c: usize) -> Self {
        let conv = Conv2d::same(rng, in_c, out_c, 3);
        Self {
            in_c,
            out_c,
            weight: conv.weight,
            bias: conv.bias,
            cache: None,
        }
    }

    pub fn forward(&mut self, feat: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        check_offsets(feat, offsets)?;
        let hw = feat.h * feat.w;
        let mut y = Tensor::zeros(feat.n, self.out_c, feat.h, feat.w);
        let mut all = Vec::with_capacity(feat.n);
        for n in 0..feat.n {
            let cols = deform_columns(feat.item(n), feat.c, feat.h, feat.w, offsets.item(n));
            let out = y.item_mut(n);
            for (o, b) in self.bias.value.iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
            }
            gemm(self.out_c, self.in_c * KERNEL_POINTS, hw, &self.weight.value, false, &cols, false, 1.0, out);
            all.push(cols);
        }
        self.cache = Some(DeformCache {
            feat: feat.clone(),
            offsets: offsets.clone(),
            cols: all,
        });
        Ok(y)
    }

    pub fn eval(&self, feat: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        deform_sample(feat, offsets, &self.weight.value, &self.bias.value)
    }

    /// Returns `(d_features, d_offsets)` and accumulates parameter gradients.
    pub fn backward(&mut self, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("deformable backward without forward".into()))?;
        let feat = &cache.feat;
        let hw = feat.h * feat.w;
        let ck = self.in_c * KERNEL_POINTS;
        let mut dfeat = feat.zeros_like();
        let mut doff = cache.offsets.zeros_like();
        let mut dcols = vec![0.0; ck * hw];
        for n in 0..feat.n {
            let g = dy.item(n);
            for o in 0..self.out_c {
                self.bias.grad[o] += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
            gemm(self.out_c, hw, ck, g, false, &cache.cols[n], true, 1.0, &mut self.weight.grad);
            gemm(ck, self.out_c, hw, &self.weight.value, true, g, false, 0.0, &mut dcols);
            deform_columns_backward(
                feat.item(n),
                feat.c,
                feat.h,
                feat.w,
                cache.offsets.item(n),
                &dcols,
                dfeat.item_mut(n),
                doff.item_mut(n),
            );
        }
        Ok((dfeat, doff))
    }
}

impl Visit for DeformConv {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::random_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_single_anchor() {
        let delta = Tensor::from_vec(1, 4, 1, 1, vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let s = split_adjustment(&delta).unwrap();
        assert_eq!(s.loc.data, vec![10.0, 11.0]);
        assert_eq!(s.shape.data, vec![12.0, 13.0]);
    }

    #[test]
    fn split_six_anchors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let delta = random_tensor(&mut rng, 2, 24, 3, 4);
        let s = split_adjustment(&delta).unwrap();
        assert_eq!((s.loc.c, s.shape.c), (12, 12));
        assert_eq!(merge_adjustment(&s).unwrap(), delta);
        assert!(split_adjustment(&random_tensor(&mut rng, 1, 6, 2, 2)).is_err());
    }

    #[test]
    fn compose_broadcasts_shift() {
        let shift = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 2.0]).unwrap();
        let residual = Tensor::zeros(1, OFFSET_CHANNELS, 1, 1);
        let d = compose_offsets(&shift, &residual).unwrap();
        for k in 0..KERNEL_POINTS {
            assert_eq!((d.data[2 * k], d.data[2 * k + 1]), (1.0, 2.0));
        }
    }

    #[test]
    fn level_mode_rules() {
        assert!(check_level_mode(0, OffsetMode::Disentangled).is_ok());
        assert!(check_level_mode(4, OffsetMode::None).is_ok());
        assert!(check_level_mode(4, OffsetMode::Implicit).is_err());
        assert!(check_level_mode(5, OffsetMode::Disentangled).is_err());
        for m in OffsetMode::ALL {
            assert_eq!(m.name().parse::<OffsetMode>().unwrap(), m);
        }
    }

    #[test]
    fn explicit_modes_need_adjustment() {
        let feat = Tensor::zeros(1, 4, 3, 3);
        let mut head = OffsetHead::new(OffsetMode::ExplicitLoc, 4, 2);
        assert!(head.forward(&feat, None).is_err());
        let mut implicit = OffsetHead::new(OffsetMode::Implicit, 4, 2);
        assert!(implicit.forward(&feat, None).is_ok());
    }

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| (i % w) as f64 * 2.0 + (i / w) as f64 * 0.25).collect();
        Tensor::from_vec(1, 1, h, w, data).unwrap()
    }

    /// Weight selecting kernel point `k` of a single-channel filter.
    fn pick(k: usize) -> Vec<f64> {
        let mut w = vec![0.0; KERNEL_POINTS];
        w[k] = 1.0;
        w
    }

    #[test]
    fn half_pixel_offset_averages_neighbours() {
        let feat = ramp(5, 5);
        let mut off = Tensor::zeros(1, OFFSET_CHANNELS, 5, 5);
        // centre kernel point, shifted half a pixel to the right
        let p = 2 * 5 + 2;
        off.data[(2 * 4 + 1) * 25 + p] = 0.5;
        let y = deform_sample(&feat, &off, &pick(4), &[0.0]).unwrap();
        let expect = 0.5 * (feat.at(0, 0, 2, 2) + feat.at(0, 0, 2, 3));
        assert!((y.at(0, 0, 2, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn integer_offsets_are_exact_lookups() {
        let feat = ramp(6, 6);
        let mut off = Tensor::zeros(1, OFFSET_CHANNELS, 6, 6);
        let p = 3 * 6 + 3;
        off.data[2 * 4 * 36 + p] = -2.0;
        off.data[(2 * 4 + 1) * 36 + p] = 1.0;
        let y = deform_sample(&feat, &off, &pick(4), &[0.0]).unwrap();
        assert_eq!(y.at(0, 0, 3, 3), feat.at(0, 0, 1, 4));
    }

    #[test]
    fn far_samples_read_zero() {
        let feat = ramp(4, 4);
        let mut off = Tensor::zeros(1, OFFSET_CHANNELS, 4, 4);
        off.data[2 * 4 * 16] = 100.0;
        let y = deform_sample(&feat, &off, &pick(4), &[0.25]).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 0.25);
        off.data[2 * 4 * 16] = f64::NAN;
        assert!(deform_sample(&feat, &off, &pick(4), &[0.0]).is_err());
    }

    #[test]
    fn zero_offsets_match_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feat = random_tensor(&mut rng, 2, 3, 6, 5);
        let conv = Conv2d::same(&mut rng, 3, 4, 3);
        let off = Tensor::zeros(2, OFFSET_CHANNELS, 6, 5);
        let a = deform_sample(&feat, &off, &conv.weight.value, &conv.bias.value).unwrap();
        let b = crate::nn::tests::naive_conv(&feat, &conv);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn disentangled_head_gradient_flows_to_both_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = OffsetHead::new(OffsetMode::Disentangled, 4, 2);
        for conv in [head.primary_mut().unwrap()] {
            conv.weight.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let delta = random_tensor(&mut rng, 1, 8, 4, 4);
        let split = split_adjustment(&delta).unwrap();
        let field = head.forward(&Tensor::zeros(1, 4, 4, 4), Some(&split)).unwrap();
        let (shift, residual) = (field.shift.unwrap(), field.residual.unwrap());
        for k in 0..KERNEL_POINTS {
            for j in 0..2 {
                for p in 0..16 {
                    let d = field.composed.data[(2 * k + j) * 16 + p] - residual.data[(2 * k + j) * 16 + p];
                    assert_eq!(d, shift.data[j * 16 + p]);
                }
            }
        }
        let g = random_tensor(&mut rng, 1, OFFSET_CHANNELS, 4, 4);
        let (dfeat, dsplit) = head.backward(&g).unwrap();
        assert!(dfeat.is_none());
        let dsplit = dsplit.unwrap();
        assert!(dsplit.loc.data.iter().any(|v| *v != 0.0));
    }
}

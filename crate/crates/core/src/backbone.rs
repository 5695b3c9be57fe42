//! Seeded convolutional feature extractors.
//!
//! [`ConvStack`] is the texture backbone: a chain of 3x3, stride-2,
//! zero-padded convolutions with relu, halving the spatial extent per stage.
//! Channel widths follow [`CHANNEL_PLAN`]. The same type doubles as the
//! frozen perceptual network for the losses: construction is fully
//! determined by a seed, and a stack is only trainable if the surrounding
//! model registers its tensors.
//!
//! Convolution is expressed as gather (im2col with `None` for the zero
//! padding) followed by matmul, so the tape differentiates it with no
//! dedicated kernel. Activations are `[H*W, C]` row-major spatial-major
//! matrices; an image's interleaved pixel buffer already has that layout.

use std::sync::Arc;

use crate::error::Error;
use crate::image::Image;
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::Result;

/// Channel widths: input RGB, then one entry per stage.
pub const CHANNEL_PLAN: [usize; 5] = [3, 16, 32, 48, 64];

/// Per-stage activations with their spatial extents, in stage order.
pub type StageFeatures = Vec<(Tensor, usize, usize)>;

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[(in_ch*9), out_ch]`; rows ordered channel-major, then kernel
    /// row-major: `(c, ky, kx)`.
    pub weight: Tensor,
    /// `[out_ch]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvStack {
    stages: Vec<ConvStage>,
}

/// 1x1 projection from backbone channels to the reference width `d_E`.
#[derive(Clone, Debug)]
pub struct Projection1x1 {
    /// `[C, d_E]`.
    pub weight: Tensor,
    /// `[d_E]`.
    pub bias: Tensor,
}

impl ConvStack {
    /// He-initialized stack with `stage_count` stride-2 stages (1 to 4).
    pub fn seeded(seed: u64, tag: &str, stage_count: usize) -> Result<ConvStack> {
        if stage_count == 0 || stage_count >= CHANNEL_PLAN.len() {
            return Err(Error::Config {
                field: "backbone_stages".into(),
                detail: format!(
                    "stage count {stage_count} outside 1..={}",
                    CHANNEL_PLAN.len() - 1
                ),
            });
        }
        let mut stages = Vec::with_capacity(stage_count);
        for s in 0..stage_count {
            let (in_ch, out_ch) = (CHANNEL_PLAN[s], CHANNEL_PLAN[s + 1]);
            let fan_in = in_ch * 9;
            let mut r = rng::stream(seed, &format!("{tag}/stage{s}/weight"));
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Tensor::new(
                vec![fan_in, out_ch],
                rng::gaussian(fan_in * out_ch, std, &mut r),
            )?;
            let bias = Tensor::zeros(vec![out_ch]);
            stages.push(ConvStage {
                in_ch,
                out_ch,
                weight,
                bias,
            });
        }
        Ok(ConvStack { stages })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Output channel width of the last stage.
    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.out_ch).unwrap_or(0)
    }

    /// Spatial reduction factor, `2^stages`.
    pub fn reduction(&self) -> usize {
        1 << self.stages.len()
    }

    /// Run all stages over `x: [h*w, in_ch]`, returning the final activation
    /// and its spatial extent.
    pub fn forward(
        &self,
        g: &Graph,
        x: &Tensor,
        h: usize,
        w: usize,
    ) -> Result<(Tensor, usize, usize)> {
        let acts = self.features(g, x, h, w)?;
        let (t, fh, fw) = acts
            .into_iter()
            .last()
            .expect("stack has at least one stage");
        Ok((t, fh, fw))
    }

    /// Per-stage post-relu activations, `[(tensor, h, w)]` in stage order.
    pub fn features(&self, g: &Graph, x: &Tensor, h: usize, w: usize) -> Result<StageFeatures> {
        if !h.is_multiple_of(self.reduction()) || !w.is_multiple_of(self.reduction()) {
            return Err(Error::Image {
                detail: format!(
                    "extents {h}x{w} not divisible by backbone reduction {}",
                    self.reduction()
                ),
            });
        }
        let mut cur = x.clone();
        let (mut ch, mut cw) = (h, w);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if cur.shape() != [ch * cw, stage.in_ch] {
                return Err(Error::Shape {
                    op: "conv_stack",
                    detail: format!(
                        "activation {:?} does not match {}x{}x{}",
                        cur.shape(),
                        ch,
                        cw,
                        stage.in_ch
                    ),
                });
            }
            let y = conv3x3(g, &cur, ch, cw, &stage.weight, &stage.bias, 2)?;
            let y = g.relu(&y)?;
            ch /= 2;
            cw /= 2;
            out.push((y.clone(), ch, cw));
            cur = y;
        }
        Ok(out)
    }

    /// Convenience entry point from an image.
    pub fn extract_features(&self, g: &Graph, img: &Image) -> Result<Tensor> {
        let x = image_tensor(img);
        let (f, _, _) = self.forward(g, &x, img.height(), img.width())?;
        Ok(f)
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            f(format!("backbone/stage{i}/weight"), &mut stage.weight);
            f(format!("backbone/stage{i}/bias"), &mut stage.bias);
        }
    }
}

impl Projection1x1 {
    pub fn seeded(seed: u64, tag: &str, in_ch: usize, d_e: usize) -> Result<Projection1x1> {
        let mut r = rng::stream(seed, &format!("{tag}/weight"));
        Ok(Projection1x1 {
            weight: Tensor::new(vec![in_ch, d_e], rng::xavier_uniform(in_ch, d_e, &mut r))?,
            bias: Tensor::zeros(vec![d_e]),
        })
    }

    /// Affine map of feature rows: `f . W + b`.
    pub fn apply(&self, g: &Graph, f: &Tensor) -> Result<Tensor> {
        let y = g.matmul(f, &self.weight)?;
        g.add_bias(&y, &self.bias)
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("projection/weight".into(), &mut self.weight);
        f("projection/bias".into(), &mut self.bias);
    }
}

/// View an image's pixel buffer as a `[h*w, channels]` activation.
pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(
        vec![img.height() * img.width(), img.channels()],
        img.pixels().to_vec(),
    )
    .expect("image buffer length is validated at construction")
}

/// 3x3 zero-padded convolution over `x: [h*w, in_ch]` with stride 1 or 2,
/// realized as gather + matmul + bias.
pub fn conv3x3(
    g: &Graph,
    x: &Tensor,
    h: usize,
    w: usize,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    if stride != 1 && stride != 2 {
        return Err(Error::Shape {
            op: "conv3x3",
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    let in_ch = x.shape()[1];
    if weight.shape()[0] != in_ch * 9 {
        return Err(Error::Shape {
            op: "conv3x3",
            detail: format!(
                "weight rows {} != in_ch*9 = {}",
                weight.shape()[0],
                in_ch * 9
            ),
        });
    }
    let (oh, ow) = (h / stride, w / stride);
    let cols = im2col_index(h, w, in_ch, stride);
    let patches = g.gather(x, cols, vec![oh * ow, in_ch * 9])?;
    let y = g.matmul(&patches, weight)?;
    g.add_bias(&y, bias)
}

/// Flat-index table realizing im2col for a 3x3 kernel with zero padding of
/// one pixel: output row `(oy, ox)`, column `(c, ky, kx)` reads input pixel
/// `(stride*oy + ky - 1, stride*ox + kx - 1)`, or 0 outside the image.
fn im2col_index(h: usize, w: usize, in_ch: usize, stride: usize) -> Arc<Vec<Option<usize>>> {
    let (oh, ow) = (h / stride, w / stride);
    let mut index = Vec::with_capacity(oh * ow * in_ch * 9);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..in_ch {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (stride * oy + ky) as isize - 1;
                        let x = (stride * ox + kx) as isize - 1;
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            index.push(None);
                        } else {
                            index.push(Some((y as usize * w + x as usize) * in_ch + c));
                        }
                    }
                }
            }
        }
    }
    Arc::new(index)
}

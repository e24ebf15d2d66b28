//! Patch-based vision transformer for single-channel images.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::layers::{block, init_block, init_linear, init_norm, linear, norm, BlockShape, Mode, INIT_STD};
use super::params::{Binder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub patch_size: usize,
    pub d_vision: usize,
    pub depth: usize,
    pub heads: usize,
    /// Largest accepted height or width; sizes the position table.
    pub max_image_size: usize,
    /// Optional resize target before patching. Off by default: images are
    /// zero-padded to patch multiples instead.
    pub native_resolution: Option<usize>,
    /// Shift and scale each image to zero mean and unit variance before
    /// patching, which removes global gain differences.
    pub standardize: bool,
    /// Learned absolute position embeddings. Without them the pooled
    /// embedding is invariant to patch order.
    pub positions: bool,
    /// Hand the pooled vector to the projector as an extra leading token.
    pub pooled_token: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            d_vision: 64,
            depth: 2,
            heads: 4,
            max_image_size: 128,
            native_resolution: None,
            standardize: true,
            positions: true,
            pooled_token: false,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(invalid("patch size must be at least 1"));
        }
        if self.heads == 0 || self.d_vision % self.heads != 0 {
            return Err(invalid(format!(
                "d_vision {} not divisible by {} heads",
                self.d_vision, self.heads
            )));
        }
        Ok(())
    }

    pub fn effective_size(&self) -> usize {
        self.native_resolution.unwrap_or(self.max_image_size)
    }

    pub fn max_patches(&self) -> usize {
        let g = self.effective_size().div_ceil(self.patch_size);
        g * g
    }
}

/// Zero-pad bottom/right to a multiple of `p` and cut into row-major
/// flattened `p × p` patches: `[⌈H/p⌉·⌈W/p⌉, p²]`.
pub fn patchify<T: Scalar>(image: &GrayImage, p: usize) -> Result<Tensor<T>> {
    if p == 0 {
        return Err(invalid("patch size must be at least 1"));
    }
    if image.height == 0 || image.width == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let gh = image.height.div_ceil(p);
    let gw = image.width.div_ceil(p);
    let mut data = vec![T::zero(); gh * gw * p * p];
    for py in 0..gh {
        for px in 0..gw {
            let base = (py * gw + px) * p * p;
            for dy in 0..p {
                let y = py * p + dy;
                if y >= image.height {
                    break;
                }
                for dx in 0..p {
                    let x = px * p + dx;
                    if x >= image.width {
                        break;
                    }
                    data[base + dy * p + dx] = T::lit(image.get(y, x) as f64);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[gh * gw, p * p], data))
}

/// Zero-mean, unit-variance copy. Constant images become all zeros.
pub fn standardized(image: &GrayImage) -> GrayImage {
    let n = image.pixels.len().max(1) as f64;
    let mean = image.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    GrayImage {
        height: image.height,
        width: image.width,
        pixels: image.pixels.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
    }
}

/// Nearest-neighbour resize to `size × size`.
pub fn resize_nearest(image: &GrayImage, size: usize) -> GrayImage {
    let mut out = GrayImage::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let sy = y * image.height / size;
            let sx = x * image.width / size;
            out.set(y, x, image.get(sy, sx));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct VisionEncoder<T> {
    pub config: VisionConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn new(config: VisionConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.d_vision;
        let pp = config.patch_size * config.patch_size;
        init_linear(&mut params, "vision.patch", pp, d, (1.0 / pp as f64).sqrt(), rng)?;
        if config.positions {
            params.insert("vision.pos", Tensor::randn(&[config.max_patches(), d], INIT_STD, rng), true)?;
        }
        for i in 0..config.depth {
            init_block(&mut params, &format!("vision.blocks.{i}"), d, config.depth, rng)?;
        }
        init_norm(&mut params, "vision.ln_f", d)?;
        Ok(Self { config, params })
    }

    pub fn patches(&self, image: &GrayImage) -> Result<Tensor<T>> {
        let max = self.config.max_image_size;
        if image.height > max || image.width > max {
            return Err(Error::Image(format!(
                "{}x{} image exceeds the configured maximum {max}",
                image.height, image.width
            )));
        }
        let resized;
        let image = match self.config.native_resolution {
            Some(s) => {
                resized = resize_nearest(image, s);
                &resized
            }
            None => image,
        };
        if self.config.standardize {
            patchify(&standardized(image), self.config.patch_size)
        } else {
            patchify(image, self.config.patch_size)
        }
    }

    /// Per-patch embeddings `[n, d_vision]` and their mean `[1, d_vision]`.
    pub fn encode<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        image: &GrayImage,
        mode: &mut Mode,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let patches = b.tape().constant(self.patches(image)?);
        self.encode_patches(b, patches, mode)
    }

    pub fn encode_patches<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        patches: Var<'t, T>,
        mode: &mut Mode,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = patches.shape()[0];
        let shape = BlockShape {
            d: self.config.d_vision,
            heads: self.config.heads,
            causal: false,
        };
        let mut x = linear(b, "vision.patch", patches, None, mode)?;
        if self.config.positions {
            x = x.add(b.get("vision.pos")?.slice(0, 0, n)?)?;
        }
        for i in 0..self.config.depth {
            x = block(b, &format!("vision.blocks.{i}"), x, shape, None, mode)?;
        }
        let x = norm(b, "vision.ln_f", x)?;
        let pooled = x.mean_axis(0)?;
        Ok((x, pooled))
    }

    /// Eval-mode encoding detached from any training tape.
    pub fn encode_detached(&self, image: &GrayImage) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let (x, pooled) = self.encode(&b, image, &mut Mode::eval())?;
        let out = (x.value().clone(), pooled.value().clone());
        Ok(out)
    }
}

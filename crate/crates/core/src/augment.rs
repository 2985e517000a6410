//! Attribution overlays as a stochastic training-time augmentation.
//!
//! Per image and epoch: with probability `p`, draw `s = exp(U[ln low, ln high])`,
//! take the channel-mean attribution magnitude, raise it to `s`, min-max
//! normalize it to [0,1] and blend `0.5 x + 0.5 map` (the map broadcast over
//! channels). Otherwise the image passes through untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::igcache::IgCache;
use crate::data::DataError;
use crate::tensor::Tensor;

pub const BLEND: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid overlay config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no attribution map for image {index}")]
    MissingMap { index: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayConfig {
    pub probability: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub rng_seed: u64,
}

impl OverlayConfig {
    pub fn new(probability: f64, rng_seed: u64) -> Result<Self, AugmentError> {
        let c = OverlayConfig {
            probability,
            scale_low: 1.0,
            scale_high: 2.0,
            rng_seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::InvalidConfig(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if !(self.scale_low > 0.0
            && self.scale_low <= self.scale_high
            && self.scale_high.is_finite())
        {
            return Err(AugmentError::InvalidConfig(format!(
                "scale range [{}, {}] must satisfy 0 < low <= high",
                self.scale_low, self.scale_high
            )));
        }
        Ok(())
    }
}

/// Seeded ChaCha8 stream. Substreams are keyed by the run seed and selected
/// by `(epoch, image index)`, so each image's draws are independent of batch
/// composition and visiting order.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_image(seed: u64, epoch: u32, index: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        RngStream { rng }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Log-uniform draw on [low, high].
    pub fn log_uniform(&mut self, low: f64, high: f64) -> f64 {
        let (a, b) = (low.ln(), high.ln());
        (a + self.uniform() * (b - a)).exp()
    }
}

/// Elementwise `|attr|^s`.
pub fn scale_attribution(attr: &Tensor, s: f64) -> Tensor {
    attr.map(|v| v.abs().powf(s))
}

/// Affine map onto [0,1]; a constant input maps to zeros.
pub fn normalize_minmax(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return Tensor::zeros(t.shape().to_vec());
    }
    t.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Mean of `|attr|` over channels, as a `[1, h, w]` map.
pub fn magnitude_map(attr: &Tensor) -> Result<Tensor, AugmentError> {
    let (c, h, w) = match attr.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(AugmentError::ShapeMismatch(format!(
                "attribution map of shape {s:?}"
            )))
        }
    };
    let plane = h * w;
    let d = attr.data();
    let values = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i].abs()).sum::<f64>() / c as f64)
        .collect();
    Ok(Tensor::new(vec![1, h, w], values).expect("shape"))
}

/// The [0,1] overlay map for exponent `s`.
pub fn overlay_map(attr: &Tensor, s: f64) -> Result<Tensor, AugmentError> {
    Ok(normalize_minmax(&scale_attribution(
        &magnitude_map(attr)?,
        s,
    )))
}

/// `0.5 x + 0.5 ig_hat`, broadcasting a single-channel map over `x`'s channels.
pub fn blend(x: &Tensor, ig_hat: &Tensor) -> Result<Tensor, AugmentError> {
    let xs = x.shape();
    let ms = ig_hat.shape();
    let ok = xs.len() == 3 && ms.len() == 3 && xs[1..] == ms[1..] && (ms[0] == 1 || ms[0] == xs[0]);
    if !ok {
        return Err(AugmentError::ShapeMismatch(format!(
            "image {xs:?} vs map {ms:?}"
        )));
    }
    let plane = xs[1] * xs[2];
    let m = ig_hat.data();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let mv = if ms[0] == 1 { m[i % plane] } else { m[i] };
        *v = BLEND * *v + BLEND * mv;
    }
    Ok(out)
}

/// One bernoulli draw; blends `ig_hat` into `x` when it fires.
pub fn overlay(
    x: &Tensor,
    ig_hat: &Tensor,
    config: &OverlayConfig,
    rng: &mut RngStream,
) -> Result<Tensor, AugmentError> {
    if rng.bernoulli(config.probability) {
        blend(x, ig_hat)
    } else {
        Ok(x.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Tensor,
    /// The exponent drawn, present only when the overlay fired.
    pub scale: Option<f64>,
}

/// The full per-image pipeline. The exponent is drawn from `rng` only when
/// the bernoulli trial fires, so `p = 0` consumes one draw and returns `x`.
pub fn augment_image(
    x: &Tensor,
    attr: &Tensor,
    config: &OverlayConfig,
    rng: &mut RngStream,
) -> Result<Augmented, AugmentError> {
    if !rng.bernoulli(config.probability) {
        return Ok(Augmented {
            image: x.clone(),
            scale: None,
        });
    }
    let s = rng.log_uniform(config.scale_low, config.scale_high);
    Ok(Augmented {
        image: blend(x, &overlay_map(attr, s)?)?,
        scale: Some(s),
    })
}

/// Cached attribution maps addressed by dataset index.
pub trait AttributionSource {
    fn map(&self, index: usize) -> Result<Tensor, AugmentError>;
}

impl AttributionSource for IgCache {
    fn map(&self, index: usize) -> Result<Tensor, AugmentError> {
        if index >= self.len() {
            return Err(AugmentError::MissingMap { index });
        }
        Ok(self.entry(index)?)
    }
}

impl AttributionSource for [Tensor] {
    fn map(&self, index: usize) -> Result<Tensor, AugmentError> {
        self.get(index)
            .cloned()
            .ok_or(AugmentError::MissingMap { index })
    }
}

impl AttributionSource for Vec<Tensor> {
    fn map(&self, index: usize) -> Result<Tensor, AugmentError> {
        self.as_slice().map(index)
    }
}

/// Decides which images of a batch get an overlay this epoch without
/// touching any map. Returns the exponent for each fired image.
pub fn draw_batch(indices: &[usize], config: &OverlayConfig, epoch: u32) -> Vec<Option<f64>> {
    indices
        .iter()
        .map(|&i| {
            let mut rng = RngStream::for_image(config.rng_seed, epoch, i as u32);
            rng.bernoulli(config.probability)
                .then(|| rng.log_uniform(config.scale_low, config.scale_high))
        })
        .collect()
}

/// Applies the pipeline to every image of an `[n, c, h, w]` batch whose
/// dataset indices are `indices`, in order. Maps are loaded only for images
/// whose overlay fires. Returns the batch and the per-image draws.
pub fn augment_batch<S: AttributionSource + ?Sized>(
    batch: &Tensor,
    indices: &[usize],
    attrs: &S,
    config: &OverlayConfig,
    epoch: u32,
) -> Result<(Tensor, Vec<Option<f64>>), AugmentError> {
    config.validate()?;
    let shape = batch.shape();
    if shape.len() != 4 || shape[0] != indices.len() {
        return Err(AugmentError::ShapeMismatch(format!(
            "batch {shape:?} for {} indices",
            indices.len()
        )));
    }
    let draws = draw_batch(indices, config, epoch);
    let mut out = batch.clone();
    let per = shape[1..].iter().product::<usize>();
    let img_shape = shape[1..].to_vec();
    for (j, (&index, draw)) in indices.iter().zip(&draws).enumerate() {
        let Some(s) = *draw else { continue };
        let slot = &mut out.data_mut()[j * per..(j + 1) * per];
        let x = Tensor::new(img_shape.clone(), slot.to_vec()).expect("shape");
        let attr = attrs.map(index)?;
        if attr.shape()[1..] != img_shape[1..] {
            return Err(AugmentError::ShapeMismatch(format!(
                "map {:?} for image {img_shape:?}",
                attr.shape()
            )));
        }
        slot.copy_from_slice(blend(&x, &overlay_map(&attr, s)?)?.data());
    }
    Ok((out, draws))
}

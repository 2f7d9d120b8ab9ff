use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::normal_image;

use super::backend::DenoiserBackend;
use super::condition::Condition;
use super::prior::PriorHandle;
use super::schedule::add_noise;

/// Default number of respaced denoising steps for ancestral sampling.
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// `null + s (cond - null)`, elementwise.
pub fn cfg_combine(null: &Image, cond: &Image, scale: f64) -> Result<Image> {
    null.zip_map(cond, |n, c| n + scale * (c - n))
}

/// Classifier-free guided prediction. Scale 1 is the conditional
/// prediction and scale 0 the unconditional one, returned as is.
pub fn cfg_predict(backend: &DenoiserBackend, x_t: &Image, t: usize, cond: &Condition, guidance_scale: f64) -> Result<Image> {
    if !guidance_scale.is_finite() {
        return Err(Error::invalid(format!("guidance scale must be finite, got {guidance_scale}")));
    }
    if guidance_scale == 1.0 || cond.null {
        return backend.predict(x_t, t, cond);
    }
    if !backend.supports_null() {
        return Err(Error::invalid(format!("backend {} cannot answer the null condition", backend.name())));
    }
    let null = backend.predict(x_t, t, &Condition::null())?;
    if guidance_scale == 0.0 {
        return Ok(null);
    }
    let c = backend.predict(x_t, t, cond)?;
    cfg_combine(&null, &c, guidance_scale)
}

/// Ancestral DDPM sampling from pure noise over `steps` respaced timesteps.
/// The clean-image estimate is clipped to [0, 1] at every step and the last
/// step returns it.
pub fn sample_image(
    handle: &PriorHandle,
    cond: &Condition,
    guidance_scale: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    let backend = &handle.backend;
    let (w, h, c) = backend.image_shape();
    let start = backend.schedule().len() - 1;
    let x = normal_image(rng, w, h, c);
    denoise_from(backend, x, start, cond, guidance_scale, steps, rng)
}

/// Image-to-image translation by partial diffusion: noises `x0` to level
/// `k = round(strength * T)` and denoises back. Level 0 is the clean image
/// (returned unchanged); level `k >= 1` is schedule index `k - 1`.
pub fn translate(
    handle: &PriorHandle,
    x0: &Image,
    strength: f64,
    cond: &Condition,
    guidance_scale: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    if !(strength > 0.0 && strength < 1.0) {
        return Err(Error::invalid(format!("translation strength must lie in (0, 1), got {strength}")));
    }
    let backend = &handle.backend;
    let level = (strength * backend.schedule().len() as f64).round() as usize;
    if level == 0 {
        return Ok(x0.clone());
    }
    let t0 = level - 1;
    let eps = normal_image(rng, x0.width(), x0.height(), x0.channels());
    let x = add_noise(x0, t0, &eps, backend.schedule())?;
    let n = ((steps as f64 * strength).ceil() as usize).max(1);
    denoise_from(backend, x, t0, cond, guidance_scale, n, rng)
}

fn denoise_from(
    backend: &DenoiserBackend,
    mut x: Image,
    start: usize,
    cond: &Condition,
    guidance_scale: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    let sched = backend.schedule();
    let ts = sched.respaced(start, steps.max(1));
    for (i, &t) in ts.iter().enumerate() {
        let eps = cfg_predict(backend, &x, t, cond, guidance_scale)?;
        let ab = sched.alpha_bar(t);
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x.zip_map(&eps, |xv, e| ((xv - s1 * e) / sa).clamp(0.0, 1.0))?;
        let Some(&prev) = ts.get(i + 1) else {
            return Ok(x0);
        };
        let ab_prev = sched.alpha_bar(prev);
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (ab / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        let z = normal_image(rng, x.width(), x.height(), x.channels());
        let mut next = x0.zip_map(&x, |a, b| c0 * a + ct * b)?;
        next.add_scaled(&z, sigma)?;
        x = next;
    }
    if !x.all_finite() {
        return Err(Error::Numeric("sampling produced non-finite values".into()));
    }
    Ok(x)
}

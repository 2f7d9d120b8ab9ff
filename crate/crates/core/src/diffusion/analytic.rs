use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::condition::{Condition, Modality};
use super::lora::LowRankAdapter;
use super::schedule::DiffusionSchedule;

/// One mean image of the analytic data law, optionally tied to a modality
/// and a camera embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticEntry {
    pub modality: Option<Modality>,
    pub camera: Option<[f64; 4]>,
    pub mu: Image,
}

/// Exact noise predictor for the Gaussian data law `N(mu(c), sigma2 I)`:
/// `eps = sqrt(1 - abar) (x_t - sqrt(abar) mu) / (abar sigma2 + 1 - abar)`.
///
/// `mu(c)` is the mean of the entries matching the condition's modality;
/// when both the condition and the entries carry camera embeddings, entries
/// are weighted by a Gaussian kernel in embedding space. The null condition
/// sees the unweighted mean of every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticBackend {
    pub schedule: DiffusionSchedule,
    pub sigma2: f64,
    pub bandwidth: f64,
    pub entries: Vec<AnalyticEntry>,
}

pub const DEFAULT_CAMERA_BANDWIDTH: f64 = 0.25;

/// Number of condition features seen by an adapter on the analytic mean:
/// the camera embedding, the modality one-hot and a bias.
pub const ANALYTIC_FEATURES: usize = 7;

pub fn analytic_gaussian_backend(mu: Image, sigma2: f64, schedule: DiffusionSchedule) -> Result<AnalyticBackend> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be finite and >= 0, got {sigma2}")));
    }
    Ok(AnalyticBackend {
        schedule,
        sigma2,
        bandwidth: DEFAULT_CAMERA_BANDWIDTH,
        entries: vec![AnalyticEntry { modality: None, camera: None, mu }],
    })
}

impl AnalyticBackend {
    pub fn shape(&self) -> (usize, usize, usize) {
        let m = &self.entries[0].mu;
        (m.width(), m.height(), m.channels())
    }

    pub fn camera_conditioned(&self) -> bool {
        self.entries.iter().all(|e| e.camera.is_some())
    }

    pub fn mean(&self, cond: &Condition) -> Image {
        if cond.null {
            return self.pool_mean(&self.entries.iter().collect::<Vec<_>>(), None);
        }
        let mut pool: Vec<&AnalyticEntry> =
            self.entries.iter().filter(|e| e.modality.is_none_or(|m| m == cond.modality)).collect();
        if pool.is_empty() {
            pool = self.entries.iter().collect();
        }
        self.pool_mean(&pool, cond.camera)
    }

    fn pool_mean(&self, pool: &[&AnalyticEntry], camera: Option<[f64; 4]>) -> Image {
        if pool.len() == 1 {
            return pool[0].mu.clone();
        }
        let weights: Vec<f64> = match camera {
            Some(c) if pool.iter().all(|e| e.camera.is_some()) => {
                let d2: Vec<f64> = pool
                    .iter()
                    .map(|e| {
                        let ec = e.camera.expect("checked");
                        (0..4).map(|i| (ec[i] - c[i]).powi(2)).sum::<f64>()
                    })
                    .collect();
                let lo = d2.iter().copied().fold(f64::INFINITY, f64::min);
                let h2 = 2.0 * self.bandwidth * self.bandwidth;
                d2.iter().map(|d| (-(d - lo) / h2).exp()).collect()
            }
            _ => vec![1.0; pool.len()],
        };
        let total: f64 = weights.iter().sum();
        let mut out = Image::zeros_like(&pool[0].mu);
        for (e, w) in pool.iter().zip(&weights) {
            out.add_scaled(&e.mu, w / total).expect("entries share a shape");
        }
        out
    }

    fn check_shape(&self, x: &Image) -> Result<()> {
        let (w, h, c) = self.shape();
        if (x.width(), x.height(), x.channels()) != (w, h, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h}x{c}"),
                got: format!("{}x{}x{}", x.width(), x.height(), x.channels()),
            });
        }
        Ok(())
    }

    /// Closed-form prediction for an explicit mean image.
    pub fn predict_with_mean(&self, x_t: &Image, t: usize, mu: &Image) -> Result<Image> {
        self.schedule.check_t(t)?;
        self.check_shape(x_t)?;
        let ab = self.schedule.alpha_bar(t);
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let den = ab * self.sigma2 + 1.0 - ab;
        x_t.zip_map(mu, |x, m| s1 * (x - sa * m) / den)
    }

    pub fn predict(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        self.predict_with_mean(x_t, t, &self.mean(cond))
    }

    /// Derivative of the prediction with respect to each mean entry.
    pub fn mean_jacobian(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        -(1.0 - ab).sqrt() * ab.sqrt() / (ab * self.sigma2 + 1.0 - ab)
    }

    /// Moment matching: the tuned law's mean table is the tuning set
    /// itself (camera- and modality-tagged), so the kernel mean interpolates
    /// the training images. `sigma2` is kept.
    pub fn fit(&self, data: &[(Image, Condition)]) -> Result<AnalyticBackend> {
        if data.is_empty() {
            return Err(Error::invalid("cannot fit an analytic backend to an empty dataset"));
        }
        for (img, _) in data {
            self.check_shape(img)?;
        }
        Ok(AnalyticBackend {
            entries: data
                .iter()
                .map(|(img, c)| AnalyticEntry { modality: Some(c.modality), camera: c.camera, mu: img.clone() })
                .collect(),
            ..self.clone()
        })
    }

    pub fn adapter_features(cond: &Condition) -> [f64; ANALYTIC_FEATURES] {
        let mut f = [0.0; ANALYTIC_FEATURES];
        if let Some(c) = cond.camera {
            f[..4].copy_from_slice(&c);
        }
        if !cond.null {
            f[4 + cond.modality.index()] = 1.0;
        }
        f[6] = 1.0;
        f
    }

    pub fn adapter_layers(&self) -> Vec<(&'static str, usize, usize)> {
        let (w, h, c) = self.shape();
        vec![("mean", w * h * c, ANALYTIC_FEATURES)]
    }

    /// Prediction with a low-rank residual on the mean:
    /// `mu(c) + B A f(c)` with `f` the adapter features.
    pub fn predict_adapted(&self, adapter: &LowRankAdapter, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        let mut mu = self.mean(cond);
        let f = Self::adapter_features(cond);
        adapter.pairs[0].apply(&f, mu.data_mut());
        self.predict_with_mean(x_t, t, &mu)
    }

    /// Loss `mean((eps_hat - eps)^2)` of the adapted predictor and its
    /// gradient with respect to the adapter tensors.
    pub fn adapter_loss_grad(
        &self,
        adapter: &LowRankAdapter,
        x_t: &Image,
        t: usize,
        cond: &Condition,
        eps: &Image,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let pred = self.predict_adapted(adapter, x_t, t, cond)?;
        let n = pred.len() as f64;
        let diff = pred.zip_map(eps, |a, b| a - b)?;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        let jac = self.mean_jacobian(t);
        let dmu: Vec<f64> = diff.data().iter().map(|d| 2.0 * d / n * jac).collect();
        let f = Self::adapter_features(cond);
        let pair = &adapter.pairs[0];
        let mut ax = vec![0.0; pair.rank()];
        for (k, v) in ax.iter_mut().enumerate() {
            *v = pair.a[k * pair.cols..(k + 1) * pair.cols].iter().zip(&f).map(|(a, x)| a * x).sum();
        }
        let mut grads = adapter.zero_grads();
        let (ga, gb) = grads.split_at_mut(1);
        pair.backward(&f, &ax, &dmu, &mut ga[0], &mut gb[0], None);
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{add_noise, make_schedule};
    use crate::rng::{normal_image, seeded};

    fn setup(sigma2: f64) -> (AnalyticBackend, Image) {
        let mu = Image::from_fn(4, 3, 3, |x, y, c| 0.1 + 0.05 * (x + 2 * y + c) as f64);
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        (analytic_gaussian_backend(mu.clone(), sigma2, s).unwrap(), mu)
    }

    #[test]
    fn zero_at_the_mean() {
        let (b, mu) = setup(0.3);
        let c = Condition::new(0, 0, Modality::Color);
        let t = 400;
        let x = mu.scale(b.schedule.alpha_bar(t).sqrt());
        assert!(b.predict(&x, t, &c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_noise_exactly_at_zero_variance() {
        let (b, mu) = setup(0.0);
        let c = Condition::new(0, 0, Modality::Color);
        let mut rng = seeded(3);
        let mut total = 0.0;
        for i in 0..1000 {
            let t = (i * 7) % 1000;
            let e = normal_image(&mut rng, 4, 3, 3);
            let xt = add_noise(&mu, t, &e, &b.schedule).unwrap();
            let p = b.predict(&xt, t, &c).unwrap();
            total += p.rms_diff(&e).unwrap().powi(2);
            // x0 reconstruction returns the mean.
            let ab = b.schedule.alpha_bar(t);
            let x0 = xt.zip_map(&p, |x, ep| (x - (1.0 - ab).sqrt() * ep) / ab.sqrt()).unwrap();
            assert!(x0.rms_diff(&mu).unwrap() < 1e-9 / ab.sqrt().max(1e-3));
        }
        assert!(total / 1000.0 < 1e-6);
    }

    #[test]
    fn score_identity_against_numerical_log_density() {
        let (b, mu) = setup(0.2);
        let c = Condition::new(0, 0, Modality::Color);
        let mut rng = seeded(11);
        for t in [10, 200, 450, 700, 990] {
            let ab = b.schedule.alpha_bar(t);
            let var = ab * 0.2 + 1.0 - ab;
            let log_p = |x: &Image| -> f64 {
                x.data().iter().zip(mu.data()).map(|(xi, m)| -(xi - ab.sqrt() * m).powi(2) / (2.0 * var)).sum()
            };
            let x = normal_image(&mut rng, 4, 3, 3);
            let eps = b.predict(&x, t, &c).unwrap();
            for i in 0..x.len() {
                let h = 1e-5;
                let (mut p, mut m) = (x.clone(), x.clone());
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let score = (log_p(&p) - log_p(&m)) / (2.0 * h);
                let expected = -(1.0 - ab).sqrt() * score;
                assert!((eps.data()[i] - expected).abs() < 1e-6, "t {t} i {i}");
            }
        }
    }

    #[test]
    fn kernel_mean_prefers_nearest_camera() {
        let s = make_schedule(10, 1e-3, 1e-2).unwrap();
        let a = Image::filled(2, 2, 3, 0.0);
        let bimg = Image::filled(2, 2, 3, 1.0);
        let base = analytic_gaussian_backend(a.clone(), 0.0, s).unwrap();
        let ca = Condition::new(0, 1, Modality::Color).with_camera_embedding(Some([0.0, 1.0, 0.0, 1.0]));
        let cb = Condition::new(0, 1, Modality::Color).with_camera_embedding(Some([1.0, 0.0, 0.0, 1.0]));
        let fit = base.fit(&[(a, ca), (bimg, cb)]).unwrap();
        assert!(fit.mean(&ca).data()[0] < 0.01);
        assert!(fit.mean(&cb).data()[0] > 0.99);
        assert!(fit.camera_conditioned());
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let (b, _) = setup(0.1);
        let mut rng = seeded(2);
        let mut ad = LowRankAdapter::new(&b.adapter_layers(), 2, &mut rng).unwrap();
        for v in &mut ad.pairs[0].b {
            *v = 0.1 * crate::rng::normal(&mut rng);
        }
        let c = Condition::new(0, 1, Modality::Color).with_camera_embedding(Some([0.3, 0.9, 0.1, 0.99]));
        let x = normal_image(&mut rng, 4, 3, 3);
        let e = normal_image(&mut rng, 4, 3, 3);
        let (_, g) = b.adapter_loss_grad(&ad, &x, 300, &c, &e).unwrap();
        let h = 1e-6;
        for t in 0..2 {
            for i in (0..g[t].len()).step_by(5) {
                let (mut p, mut m) = (ad.clone(), ad.clone());
                p.tensors_mut()[t][i] += h;
                m.tensors_mut()[t][i] -= h;
                let lp = b.adapter_loss_grad(&p, &x, 300, &c, &e).unwrap().0;
                let lm = b.adapter_loss_grad(&m, &x, 300, &c, &e).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[t][i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[t][i]);
            }
        }
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::Adam;

use super::analytic::{AnalyticBackend, AnalyticEntry};
use super::checkpoint::{decode_tensors, encode_tensors, Tensor, TensorMap};
use super::condition::{Condition, Modality, Vocab};
use super::external::ExternalBackend;
use super::lora::{AdapterPair, LowRankAdapter};
use super::schedule::DiffusionSchedule;
use super::toy::{ToyConfig, ToyDenoiser, TOY_TENSOR_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Analytic,
    Toy,
    External,
}

impl BackendKind {
    pub fn code(self) -> u8 {
        match self {
            BackendKind::Analytic => 0,
            BackendKind::Toy => 1,
            BackendKind::External => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Analytic => "analytic",
            BackendKind::Toy => "toy",
            BackendKind::External => "external",
        }
    }
}

/// Fine-tuning budget. `lr` is the nominal (large-model) learning rate and
/// is forwarded verbatim to external backends; local backends train with
/// `lr * lr_multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneParams {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_multiplier: f64,
}

/// Noise predictor `eps(x_t; cond, t)`.
#[derive(Debug, Clone)]
pub enum DenoiserBackend {
    Analytic(AnalyticBackend),
    Toy(ToyDenoiser),
    /// A frozen base plus a trainable low-rank residual.
    Adapted { base: Box<DenoiserBackend>, adapter: LowRankAdapter },
    External(ExternalBackend),
}

/// One `(x_t, t, cond, eps)` example of the denoising objective.
#[derive(Debug, Clone)]
pub struct DenoisingExample {
    pub x_t: Image,
    pub t: usize,
    pub cond: Condition,
    pub eps: Image,
}

impl DenoiserBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            DenoiserBackend::Analytic(_) => BackendKind::Analytic,
            DenoiserBackend::Toy(_) => BackendKind::Toy,
            DenoiserBackend::Adapted { base, .. } => base.kind(),
            DenoiserBackend::External(_) => BackendKind::External,
        }
    }

    pub fn name(&self) -> String {
        match self {
            DenoiserBackend::Adapted { base, adapter } => format!("{}+lora(r{})", base.name(), adapter.rank),
            DenoiserBackend::External(e) => format!("external:{}", e.label()),
            other => other.kind().name().to_string(),
        }
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        match self {
            DenoiserBackend::Analytic(a) => &a.schedule,
            DenoiserBackend::Toy(t) => &t.schedule,
            DenoiserBackend::Adapted { base, .. } => base.schedule(),
            DenoiserBackend::External(e) => e.schedule(),
        }
    }

    /// `(width, height, channels)` of the images the backend denoises.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DenoiserBackend::Analytic(a) => a.shape(),
            DenoiserBackend::Toy(t) => (t.width, t.height, t.channels),
            DenoiserBackend::Adapted { base, .. } => base.image_shape(),
            DenoiserBackend::External(e) => e.image_shape(),
        }
    }

    pub fn camera_conditioned(&self) -> bool {
        match self {
            DenoiserBackend::Analytic(a) => a.camera_conditioned(),
            DenoiserBackend::Toy(_) => true,
            DenoiserBackend::Adapted { base, .. } => base.camera_conditioned(),
            DenoiserBackend::External(e) => e.camera_conditioned(),
        }
    }

    /// Every backend answers the null condition: the toy model is trained
    /// with condition dropout, the analytic law falls back to its pooled
    /// mean, and external backends are required to by the protocol.
    pub fn supports_null(&self) -> bool {
        true
    }

    pub fn vocab(&self) -> Option<Vocab> {
        match self {
            DenoiserBackend::Toy(t) => Some(t.config.vocab),
            DenoiserBackend::Adapted { base, .. } => base.vocab(),
            _ => None,
        }
    }

    pub fn predict(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        match self {
            DenoiserBackend::Analytic(a) => a.predict(x_t, t, cond),
            DenoiserBackend::Toy(toy) => toy.predict(x_t, t, cond),
            DenoiserBackend::Adapted { base, adapter } => match base.as_ref() {
                DenoiserBackend::Analytic(a) => a.predict_adapted(adapter, x_t, t, cond),
                DenoiserBackend::Toy(toy) => toy.predict_with(Some(adapter), x_t, t, cond),
                _ => Err(Error::invalid("adapters attach only to analytic or toy backends")),
            },
            DenoiserBackend::External(e) => e.predict(x_t, t, cond),
        }
    }

    /// Copy-on-tune: returns a new backend fitted to `data`; `self` is
    /// untouched. Zero iterations return an exact copy.
    pub fn finetune(&self, data: &[(Image, Condition)], params: &TuneParams, rng: &mut impl Rng) -> Result<DenoiserBackend> {
        if data.is_empty() {
            return Err(Error::invalid("fine-tuning set is empty"));
        }
        if params.iters == 0 {
            return Ok(self.clone());
        }
        match self {
            DenoiserBackend::Analytic(a) => Ok(DenoiserBackend::Analytic(a.fit(data)?)),
            DenoiserBackend::Toy(toy) => {
                let mut tuned = toy.clone();
                tuned.train(data, params.iters, params.batch, params.lr * params.lr_multiplier, rng)?;
                Ok(DenoiserBackend::Toy(tuned))
            }
            DenoiserBackend::Adapted { .. } => Err(Error::invalid("cannot fine-tune an adapted backend; tune its base")),
            DenoiserBackend::External(e) => Ok(DenoiserBackend::External(e.finetune(data, params, rng.random())?)),
        }
    }

    pub fn base(&self) -> &DenoiserBackend {
        match self {
            DenoiserBackend::Adapted { base, .. } => base,
            other => other,
        }
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        match self {
            DenoiserBackend::Adapted { adapter, .. } => Some(adapter),
            _ => None,
        }
    }

    /// Denoising loss and gradient with respect to the adapter tensors.
    pub fn adapter_loss_grad(&self, ex: &DenoisingExample) -> Result<(f64, Vec<Vec<f64>>)> {
        let DenoiserBackend::Adapted { base, adapter } = self else {
            return Err(Error::invalid("backend has no adapter"));
        };
        match base.as_ref() {
            DenoiserBackend::Analytic(a) => a.adapter_loss_grad(adapter, &ex.x_t, ex.t, &ex.cond, &ex.eps),
            DenoiserBackend::Toy(toy) => toy.adapter_loss_grad(adapter, &ex.x_t, ex.t, &ex.cond, &ex.eps),
            _ => Err(Error::invalid("adapters attach only to analytic or toy backends")),
        }
    }

    /// One optimizer step on the adapter over the mean loss of `batch`;
    /// the base stays frozen. Returns the pre-step loss.
    pub fn adapter_step(&mut self, opt: &mut Adam, batch: &[DenoisingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("adapter batch is empty"));
        }
        let mut total: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        for ex in batch {
            let (l, g) = self.adapter_loss_grad(ex)?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = total.expect("non-empty batch");
        for g in &mut grads {
            for v in g.iter_mut() {
                *v /= n;
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step: opt.steps_taken() as usize, loss });
        }
        let DenoiserBackend::Adapted { adapter, .. } = self else { unreachable!("checked by adapter_loss_grad") };
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut adapter.tensors_mut(), &refs);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let kind = self.kind();
        self.push_tensors(&mut tensors)?;
        encode_tensors(kind.code(), &tensors)
    }

    fn push_tensors(&self, out: &mut Vec<Tensor>) -> Result<()> {
        match self {
            DenoiserBackend::Analytic(a) => {
                out.push(Tensor::new("schedule.betas", vec![a.schedule.len()], a.schedule.betas.clone()));
                out.push(Tensor::scalar("analytic.sigma2", a.sigma2));
                out.push(Tensor::scalar("analytic.bandwidth", a.bandwidth));
                out.push(Tensor::scalar("analytic.entries", a.entries.len() as f64));
                for (i, e) in a.entries.iter().enumerate() {
                    let m = &e.mu;
                    out.push(Tensor::new(format!("entry.{i}.mu"), vec![m.height(), m.width(), m.channels()], m.data().to_vec()));
                    let mut meta = vec![e.modality.map_or(-1.0, |m| m.index() as f64), 0.0, 0.0, 0.0, 0.0, 0.0];
                    if let Some(c) = e.camera {
                        meta[1] = 1.0;
                        meta[2..].copy_from_slice(&c);
                    }
                    out.push(Tensor::new(format!("entry.{i}.meta"), vec![6], meta));
                }
            }
            DenoiserBackend::Toy(t) => {
                let c = &t.config;
                out.push(Tensor::new("schedule.betas", vec![t.schedule.len()], t.schedule.betas.clone()));
                out.push(Tensor::new("toy.shape", vec![3], vec![t.width as f64, t.height as f64, t.channels as f64]));
                out.push(Tensor::new(
                    "toy.config",
                    vec![7],
                    vec![
                        c.hidden as f64,
                        c.rank as f64,
                        c.vocab.subjects as f64,
                        c.vocab.styles as f64,
                        c.vocab.attributes as f64,
                        c.batch as f64,
                        c.cond_dropout,
                    ],
                ));
                for ((name, dims), data) in TOY_TENSOR_NAMES.iter().zip(t.tensor_shapes()).zip(&t.tensors) {
                    out.push(Tensor::new(format!("toy.{name}"), dims, data.clone()));
                }
                let curve: Vec<f64> = t.loss_curve.iter().flat_map(|&(s, l)| [s as f64, l]).collect();
                out.push(Tensor::new("toy.loss_curve", vec![t.loss_curve.len(), 2], curve));
            }
            DenoiserBackend::Adapted { base, adapter } => {
                base.push_tensors(out)?;
                out.push(Tensor::scalar("lora.rank", adapter.rank as f64));
                out.push(Tensor::scalar("lora.pairs", adapter.pairs.len() as f64));
                for (i, p) in adapter.pairs.iter().enumerate() {
                    let r = p.rank();
                    out.push(Tensor::new(format!("lora.{i}.{}.a", p.layer), vec![r, p.cols], p.a.clone()));
                    out.push(Tensor::new(format!("lora.{i}.{}.b", p.layer), vec![p.rows, r], p.b.clone()));
                }
            }
            DenoiserBackend::External(_) => {
                return Err(Error::invalid("external backends keep their own parameters; nothing to checkpoint"));
            }
        }
        Ok(())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<DenoiserBackend> {
        let (kind, tensors) = decode_tensors(bytes)?;
        let map = TensorMap(tensors);
        let betas = map.get("schedule.betas")?.data.clone();
        let schedule = DiffusionSchedule::from_betas(betas).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let base = match kind {
            0 => {
                let n = map.scalar("analytic.entries")? as usize;
                if n == 0 {
                    return Err(Error::format("checkpoint", "analytic backend without entries"));
                }
                let mut entries = Vec::with_capacity(n);
                for i in 0..n {
                    let mu = map.get(&format!("entry.{i}.mu"))?;
                    let [h, w, c] = mu.dims[..] else {
                        return Err(Error::format("checkpoint", "mean image must have 3 dimensions"));
                    };
                    let meta = map.values(&format!("entry.{i}.meta"), 6)?;
                    let modality = if meta[0] < 0.0 { None } else { Some(Modality::from_index(meta[0] as usize)?) };
                    let camera = (meta[1] != 0.0).then(|| [meta[2], meta[3], meta[4], meta[5]]);
                    entries.push(AnalyticEntry { modality, camera, mu: Image::from_vec(w, h, c, mu.data.clone())? });
                }
                let shape = (entries[0].mu.width(), entries[0].mu.height(), entries[0].mu.channels());
                if entries.iter().any(|e| (e.mu.width(), e.mu.height(), e.mu.channels()) != shape) {
                    return Err(Error::format("checkpoint", "analytic entries disagree on shape"));
                }
                DenoiserBackend::Analytic(AnalyticBackend {
                    schedule,
                    sigma2: map.scalar("analytic.sigma2")?,
                    bandwidth: map.scalar("analytic.bandwidth")?,
                    entries,
                })
            }
            1 => {
                let s = map.values("toy.shape", 3)?;
                let c = map.values("toy.config", 7)?;
                let config = ToyConfig {
                    hidden: c[0] as usize,
                    rank: c[1] as usize,
                    vocab: Vocab { subjects: c[2] as usize, styles: c[3] as usize, attributes: c[4] as usize },
                    batch: c[5] as usize,
                    cond_dropout: c[6],
                };
                let mut toy = ToyDenoiser::new(
                    s[0] as usize,
                    s[1] as usize,
                    s[2] as usize,
                    config,
                    schedule,
                    &mut crate::rng::seeded(0),
                )
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
                let shapes = toy.tensor_shapes();
                for (i, name) in TOY_TENSOR_NAMES.iter().enumerate() {
                    let t = map.get(&format!("toy.{name}"))?;
                    if t.dims != shapes[i] {
                        return Err(Error::format("checkpoint", format!("toy.{name} has dims {:?}, expected {:?}", t.dims, shapes[i])));
                    }
                    toy.tensors[i] = t.data.clone();
                }
                let curve = map.get("toy.loss_curve")?;
                toy.loss_curve = curve.data.chunks_exact(2).map(|p| (p[0] as usize, p[1])).collect();
                DenoiserBackend::Toy(toy)
            }
            other => return Err(Error::format("checkpoint", format!("backend kind {other} cannot be loaded from a checkpoint"))),
        };
        if !map.has("lora.rank") {
            return Ok(base);
        }
        let rank = map.scalar("lora.rank")? as usize;
        let n = map.scalar("lora.pairs")? as usize;
        let layers = adapter_layers(&base)?;
        if layers.len() != n {
            return Err(Error::format("checkpoint", "adapter layer count does not match the base"));
        }
        let mut pairs = Vec::with_capacity(n);
        for (i, (layer, rows, cols)) in layers.into_iter().enumerate() {
            let a = map.values(&format!("lora.{i}.{layer}.a"), rank * cols)?.to_vec();
            let b = map.values(&format!("lora.{i}.{layer}.b"), rows * rank)?.to_vec();
            pairs.push(AdapterPair { layer: layer.to_string(), rows, cols, a, b });
        }
        Ok(DenoiserBackend::Adapted { base: Box::new(base), adapter: LowRankAdapter { rank, pairs } })
    }

    /// SHA-256 of the checkpoint bytes (or of the remote model identity for
    /// external backends).
    pub fn param_hash(&self) -> String {
        let bytes = match self {
            DenoiserBackend::External(e) => e.identity().into_bytes(),
            other => other.to_checkpoint().expect("local backends always serialize"),
        };
        hex::encode(Sha256::digest(&bytes))
    }
}

fn adapter_layers(base: &DenoiserBackend) -> Result<Vec<(&'static str, usize, usize)>> {
    match base {
        DenoiserBackend::Analytic(a) => Ok(a.adapter_layers()),
        DenoiserBackend::Toy(t) => Ok(t.adapter_layers()),
        DenoiserBackend::Adapted { .. } => Err(Error::invalid("backend already carries an adapter")),
        DenoiserBackend::External(_) => Err(Error::invalid("low-rank adapters cannot be attached to external backends")),
    }
}

/// Wraps a copy of `base` with a fresh rank-`rank` adapter whose second
/// factor is zero, so predictions start out identical to the base.
pub fn attach_lora(base: &DenoiserBackend, rank: usize, rng: &mut impl Rng) -> Result<DenoiserBackend> {
    let layers = adapter_layers(base)?;
    let adapter = LowRankAdapter::new(&layers, rank, rng)?;
    Ok(DenoiserBackend::Adapted { base: Box::new(base.clone()), adapter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::analytic::analytic_gaussian_backend;
    use crate::diffusion::schedule::make_schedule;
    use crate::rng::{normal_image, seeded};

    fn toy() -> DenoiserBackend {
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let cfg = ToyConfig { hidden: 6, rank: 2, ..Default::default() };
        DenoiserBackend::Toy(ToyDenoiser::new(4, 4, 3, cfg, s, &mut seeded(1)).unwrap())
    }

    fn analytic() -> DenoiserBackend {
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let mu = Image::from_fn(4, 4, 3, |x, y, c| 0.1 * (x + y + c) as f64 % 1.0);
        DenoiserBackend::Analytic(analytic_gaussian_backend(mu, 0.04, s).unwrap())
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = seeded(3);
        let data: Vec<(Image, Condition)> = (0..3)
            .map(|i| (Image::filled(4, 4, 3, 0.25 * i as f64), Condition::new(1, 1, Modality::Color)))
            .collect();
        let p = TuneParams { iters: 3, batch: 2, lr: 1e-2, lr_multiplier: 1.0 };
        for b in [toy(), analytic()] {
            let tuned = b.finetune(&data, &p, &mut rng).unwrap();
            let bytes = tuned.to_checkpoint().unwrap();
            let back = DenoiserBackend::from_checkpoint(&bytes).unwrap();
            assert_eq!(back.to_checkpoint().unwrap(), bytes);
            assert_eq!(back.param_hash(), tuned.param_hash());
            let ad = attach_lora(&back, 1, &mut rng).unwrap();
            let again = DenoiserBackend::from_checkpoint(&ad.to_checkpoint().unwrap()).unwrap();
            assert_eq!(again.adapter().unwrap().rank, 1);
        }
        // Toy parameters are single-precision exact, so a reloaded toy
        // predicts bit-identically.
        let t = toy();
        let back = DenoiserBackend::from_checkpoint(&t.to_checkpoint().unwrap()).unwrap();
        let x = normal_image(&mut rng, 4, 4, 3);
        let c = Condition::new(0, 0, Modality::Color);
        assert_eq!(t.predict(&x, 50, &c).unwrap(), back.predict(&x, 50, &c).unwrap());
    }

    #[test]
    fn fresh_adapter_is_exact_and_base_stays_frozen() {
        let mut rng = seeded(5);
        for base in [toy(), analytic()] {
            let hash = base.param_hash();
            let mut ad = attach_lora(&base, 1, &mut rng).unwrap();
            let x = normal_image(&mut rng, 4, 4, 3);
            let c = Condition::new(2, 1, Modality::Normal).with_camera_embedding(Some([0.0, 1.0, 0.3, 0.95]));
            assert_eq!(ad.predict(&x, 40, &c).unwrap(), base.predict(&x, 40, &c).unwrap());
            let ex = DenoisingExample { x_t: x, t: 40, cond: c, eps: normal_image(&mut rng, 4, 4, 3) };
            let mut opt = Adam::new(1e-3);
            let mut last = f64::INFINITY;
            for _ in 0..100 {
                let l = ad.adapter_step(&mut opt, std::slice::from_ref(&ex)).unwrap();
                assert!(l < last, "{l} !< {last}");
                last = l;
            }
            assert_eq!(ad.base().param_hash(), hash);
            assert_eq!(base.param_hash(), hash);
        }
    }

    #[test]
    fn adapter_rank_limits() {
        let mut rng = seeded(0);
        assert!(attach_lora(&analytic(), 8, &mut rng).is_err());
        assert!(attach_lora(&toy(), 0, &mut rng).is_err());
        let ad = attach_lora(&toy(), 2, &mut rng).unwrap();
        assert!(attach_lora(&ad, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_iterations_copy_the_base() {
        let data = vec![(Image::filled(4, 4, 3, 0.5), Condition::new(0, 1, Modality::Color))];
        let p = TuneParams { iters: 0, batch: 8, lr: 1.0, lr_multiplier: 1.0 };
        for b in [toy(), analytic()] {
            let t = b.finetune(&data, &p, &mut seeded(0)).unwrap();
            assert_eq!(t.param_hash(), b.param_hash());
        }
        assert!(toy().finetune(&[], &p, &mut seeded(0)).is_err());
    }
}

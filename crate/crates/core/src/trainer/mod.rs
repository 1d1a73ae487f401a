//! Objective composition, the alternating generator/discriminator step, and the
//! training loop with checkpoints and run metadata.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adversarial::{adaptive_weight, hinge_d_loss, hinge_g_loss, PatchDiscriminator};
use crate::data::{CorpusManifest, Loader, LoaderMode};
use crate::layers::scalar_f64;
use crate::model::{Forward, Tokenizer};
use crate::params::ParamStore;
use crate::perceptual::{build_lpips, build_ocr_backbone, Lpips, OcrPerceptualLoss};
use crate::quantizer::{CodebookUsage, VqLossTerms};
use crate::{Error, Result};

pub use checkpoint::{load_tokenizer, read_checkpoint, Checkpoint, CheckpointMeta, SCHEMA};
pub use config::{TrainConfig, WEIGHTS_DIR_ENV};
pub use optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_pixel: f64,
    pub w_vgg: f64,
    pub w_ocr: f64,
}

impl LossWeights {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            w_pixel: c.w_pixel,
            w_vgg: c.w_vgg,
            w_ocr: c.w_ocr,
        }
    }
}

/// Scalar tensors of one generator objective evaluation. Terms with zero weight
/// are not computed.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub pixel: Tensor,
    pub vgg: Option<Tensor>,
    pub ocr: Option<Tensor>,
    /// w_pixel·L1 + w_vgg·LPIPS + w_ocr·OCR.
    pub reconstruction: Tensor,
    pub vq: Tensor,
    pub gan_g: Option<Tensor>,
    pub lambda: f64,
    pub total: Tensor,
}

/// Weighted reconstruction term w_pixel·mean|x − x̂| + w_vgg·LPIPS + w_ocr·OCR.
pub fn reconstruction_loss(
    x: &Tensor,
    xr: &Tensor,
    w: &LossWeights,
    lpips: &Lpips,
    ocr: &OcrPerceptualLoss,
) -> Result<(Tensor, Tensor, Option<Tensor>, Option<Tensor>)> {
    let pixel = (x - xr)?.abs()?.mean_all()?;
    let mut rec = (&pixel * w.w_pixel)?;
    let vgg = if w.w_vgg > 0.0 {
        let v = lpips.forward(xr, x)?;
        rec = (rec + (&v * w.w_vgg)?)?;
        Some(v)
    } else {
        None
    };
    let ocr_term = if w.w_ocr > 0.0 {
        let v = ocr.forward(xr, x)?;
        rec = (rec + (&v * w.w_ocr)?)?;
        Some(v)
    } else {
        None
    };
    Ok((rec, pixel, vgg, ocr_term))
}

/// reconstruction + VQ terms + λ·hinge_g(fake_logits). `fake_logits` is `None`
/// during warm-up, where the adversarial term is absent.
pub fn total_generator_loss(
    x: &Tensor,
    xr: &Tensor,
    vq: &VqLossTerms,
    fake_logits: Option<&Tensor>,
    lambda: f64,
    w: &LossWeights,
    lpips: &Lpips,
    ocr: &OcrPerceptualLoss,
) -> Result<GeneratorLoss> {
    let (reconstruction, pixel, vgg, ocr_term) = reconstruction_loss(x, xr, w, lpips, ocr)?;
    let vq_total = vq.total()?;
    let mut total = (&reconstruction + &vq_total)?;
    let gan_g = match fake_logits {
        Some(f) => {
            let g = hinge_g_loss(f)?;
            total = (total + (&g * lambda)?)?;
            Some(g)
        }
        None => None,
    };
    Ok(GeneratorLoss {
        pixel,
        vgg,
        ocr: ocr_term,
        reconstruction,
        vq: vq_total,
        gan_g,
        lambda: if fake_logits.is_some() { lambda } else { 0.0 },
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub pixel: f64,
    pub vgg_perceptual: Option<f64>,
    pub ocr_perceptual: Option<f64>,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub vq: f64,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossComponents,
    pub codebook_usage: CodebookUsage,
}

fn finite(name: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {name} loss ({v}) at step {step}")))
    }
}

fn grad_norm(grads: &GradStore, t: &Tensor) -> Result<f64> {
    match grads.get(t) {
        Some(g) => Ok(scalar_f64(&g.sqr()?.sum_all()?)?.sqrt()),
        None => Ok(0.0),
    }
}

struct GeneratorPass {
    fwd: Forward,
    grads: GradStore,
    components: LossComponents,
}

/// Models, frozen losses and optimizer state for one run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub disc_store: ParamStore,
    pub discriminator: PatchDiscriminator,
    pub lpips: Lpips,
    pub ocr: OcrPerceptualLoss,
    opt_gen: Adam,
    opt_disc: Adam,
    step: u64,
}

impl Trainer {
    /// Builds everything from the config, including the frozen backbones.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let dir = config.weights_dir();
        let lpips = build_lpips(&config.backbones.vgg, dir.as_deref(), DType::F32)?;
        let ocr = OcrPerceptualLoss::new(build_ocr_backbone(&config.backbones.ocr, dir.as_deref(), DType::F32)?);
        Self::with_losses(config, lpips, ocr)
    }

    pub fn with_losses(config: &TrainConfig, lpips: Lpips, ocr: OcrPerceptualLoss) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(
            &config.codec,
            config.codebook_size,
            config.beta,
            ParamStore::new(config.seed),
            DType::F32,
        )?;
        let disc_store = ParamStore::new(config.seed);
        let discriminator = PatchDiscriminator::new(&config.discriminator, disc_store.var_builder(DType::F32, &Device::Cpu))?;
        let opt_gen = Adam::new(tokenizer.store.trainable_vars(), config.learning_rate, config.optimizer)?;
        let opt_disc = Adam::new(disc_store.trainable_vars(), config.learning_rate, config.optimizer)?;
        Ok(Self {
            config: config.clone(),
            tokenizer,
            disc_store,
            discriminator,
            lpips,
            ocr,
            opt_gen,
            opt_disc,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::from_config(&self.config)
    }

    /// Generator gradients of rec + vq + lambda * gan_g.
    ///
    /// Loss gradients are first taken at a detached copy of the reconstruction,
    /// so the codec is backpropagated once with the combined image gradient.
    fn generator_pass(&self, batch: &Tensor, adversarial: bool) -> Result<GeneratorPass> {
        let step = self.step;
        let w = self.weights();
        let fwd = self.tokenizer.forward(batch)?;
        let xr = &fwd.reconstruction;
        let vq = &fwd.quantized.loss;
        let xr_leaf = Var::from_tensor(&xr.detach())?;

        let (reconstruction, pixel, vgg, ocr) = reconstruction_loss(batch, xr_leaf.as_tensor(), &w, &self.lpips, &self.ocr)?;
        let vq_total = vq.total()?;
        let image_grad = |loss: &Tensor| -> Result<Tensor> {
            match loss.backward()?.remove(xr_leaf.as_tensor()) {
                Some(g) => Ok(g.detach()),
                None => Ok(xr_leaf.zeros_like()?),
            }
        };
        let mut dxr = image_grad(&reconstruction)?;

        let mut lambda = 0.0;
        let mut gan_g = None;
        if adversarial {
            let g = hinge_g_loss(&self.discriminator.forward(xr_leaf.as_tensor())?)?;
            gan_g = Some(finite("gan_g", scalar_f64(&g)?, step)?);
            let dxr_gan = image_grad(&g)?;
            let decoder = &self.tokenizer.codec.decoder;
            let head = decoder.head(&fwd.features.detach())?;
            let last = decoder.last_layer_weight();
            let last_layer_norm = |d: &Tensor| -> Result<f64> { grad_norm(&(&head * d)?.sum_all()?.backward()?, last) };
            lambda = adaptive_weight(last_layer_norm(&dxr)?, last_layer_norm(&dxr_gan)?, &self.config.adaptive);
            dxr = (dxr + (dxr_gan * lambda)?)?;
        }
        let surrogate = ((xr * dxr)?.sum_all()? + &vq_total)?;
        let grads = surrogate.backward()?;
        let components = LossComponents {
            total: 0.0,
            pixel: scalar_f64(&pixel)?,
            vgg_perceptual: vgg.map(|t| scalar_f64(&t)).transpose()?,
            ocr_perceptual: ocr.map(|t| scalar_f64(&t)).transpose()?,
            reconstruction: finite("reconstruction", scalar_f64(&reconstruction)?, step)?,
            codebook: scalar_f64(&vq.codebook_term)?,
            commitment: scalar_f64(&vq.commitment_term)?,
            vq: finite("vq", scalar_f64(&vq_total)?, step)?,
            gan_g,
            gan_d: None,
            lambda,
        };
        Ok(GeneratorPass { fwd, grads, components })
    }

    /// Generator update, then the discriminator update once past warm-up.
    pub fn train_step(&mut self, batch: &Tensor, epoch: u64) -> Result<StepReport> {
        let step = self.step;
        let adversarial = step >= self.config.disc_start_step;
        let GeneratorPass {
            fwd,
            grads,
            components: mut loss,
        } = self.generator_pass(batch, adversarial)?;
        loss.total = loss.reconstruction + loss.vq + loss.lambda * loss.gan_g.unwrap_or(0.0);
        self.opt_gen.step(&grads)?;
        let xr = &fwd.reconstruction;

        let mut gan_d = None;
        if adversarial {
            let real = self.discriminator.forward(&batch.detach())?;
            let fake = self.discriminator.forward(&xr.detach())?;
            let d = hinge_d_loss(&real, &fake)?;
            gan_d = Some(finite("gan_d", scalar_f64(&d)?, step)?);
            self.opt_disc.step(&d.backward()?)?;
        }

        loss.gan_d = gan_d;
        let hist = fwd.quantized.tokens.histogram(self.config.codebook_size);
        self.step += 1;
        Ok(StepReport {
            step,
            epoch,
            loss,
            codebook_usage: CodebookUsage::from_histogram(&hist),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<String> {
        let meta = CheckpointMeta {
            schema: SCHEMA.to_string(),
            step: self.step,
            opt_gen_step: self.opt_gen.step_count(),
            opt_disc_step: self.opt_disc.step_count(),
            config: self.config.clone(),
        };
        let split = |state: BTreeMap<String, Tensor>, slot: &str| -> BTreeMap<String, Tensor> {
            state
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix(slot).map(|n| (n.to_string(), v)))
                .collect()
        };
        let g = self.opt_gen.state();
        let d = self.opt_disc.state();
        checkpoint::write_checkpoint(
            path,
            &meta,
            &[
                ("generator", self.tokenizer.store.snapshot()?),
                ("discriminator", self.disc_store.snapshot()?),
                ("opt_gen_m", split(g.clone(), "m/")),
                ("opt_gen_v", split(g, "v/")),
                ("opt_disc_m", split(d.clone(), "m/")),
                ("opt_disc_v", split(d, "v/")),
            ],
        )
    }

    /// Restores parameters, optimizer moments and the step counter. The
    /// architecture must match this trainer's config.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        let c = &ckpt.meta.config;
        if c.codec != self.config.codec
            || c.codebook_size != self.config.codebook_size
            || c.discriminator != self.config.discriminator
        {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different architecture",
                path.display()
            )));
        }
        self.tokenizer.store.load(ckpt.group("generator")?)?;
        self.disc_store.load(ckpt.group("discriminator")?)?;
        let join = |m: &BTreeMap<String, Tensor>, v: &BTreeMap<String, Tensor>| {
            let mut out = BTreeMap::new();
            out.extend(m.iter().map(|(k, t)| (format!("m/{k}"), t.clone())));
            out.extend(v.iter().map(|(k, t)| (format!("v/{k}"), t.clone())));
            out
        };
        self.opt_gen
            .load_state(&join(ckpt.group("opt_gen_m")?, ckpt.group("opt_gen_v")?), ckpt.meta.opt_gen_step)?;
        self.opt_disc
            .load_state(&join(ckpt.group("opt_disc_m")?, ckpt.group("opt_disc_v")?), ckpt.meta.opt_disc_step)?;
        self.step = ckpt.meta.step;
        Ok(())
    }
}

/// Everything needed to re-run: written as `run.json` in the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: TrainConfig,
    pub seed: u64,
    pub vgg_checksum: String,
    pub ocr_checksum: String,
    pub generator_parameters: usize,
    pub discriminator_parameters: usize,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub reports: Vec<StepReport>,
}

/// Trains per `config` on the manifest at `config.paths.corpus`.
pub fn fit(config: &TrainConfig) -> Result<FitOutcome> {
    let trainer = Trainer::new(config)?;
    fit_with(trainer, None)
}

/// Runs the loop on a prepared trainer, optionally resuming from a checkpoint.
/// Logs one JSON StepReport per line to `steps.jsonl`; a non-finite loss writes
/// `halt.safetensors` and returns the numeric error.
pub fn fit_with(mut trainer: Trainer, resume: Option<&Path>) -> Result<FitOutcome> {
    let config = trainer.config().clone();
    let manifest = CorpusManifest::load(&config.paths.corpus)?;
    let loader = Loader::new(manifest, config.batch_size, config.image_size, config.seed, LoaderMode::Train)?;
    let out = &config.paths.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(p) = resume {
        trainer.load_checkpoint(p)?;
    }

    let meta = RunMetadata {
        config: config.clone(),
        seed: config.seed,
        vgg_checksum: trainer.lpips.backbone().checksum().to_string(),
        ocr_checksum: trainer.ocr.backbone().checksum().to_string(),
        generator_parameters: trainer.tokenizer.num_parameters(),
        discriminator_parameters: trainer.disc_store.num_parameters(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let run_json = out.join("run.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&run_json, text).map_err(|e| Error::io(&run_json, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join("steps.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let per_epoch = loader.num_batches() as u64;
    let budget = (config.epochs as u64 * per_epoch).min(config.max_steps.unwrap_or(u64::MAX));
    let mut reports = Vec::new();
    while trainer.step() < budget {
        let step = trainer.step();
        let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
        let batch = loader.batch(epoch, pos)?;
        let report = match trainer.train_step(&batch, epoch) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                let halt = out.join("halt.safetensors");
                trainer.save_checkpoint(&halt)?;
                log::error!("{e}; state before the step saved to {}", halt.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&report).map_err(|e| Error::Numeric(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if report.step % config.log_every == 0 {
            log::info!(
                "step {} epoch {} total {:.4} rec {:.4} vq {:.4} lambda {:.3} codes {}",
                report.step,
                epoch,
                report.loss.total,
                report.loss.reconstruction,
                report.loss.vq,
                report.loss.lambda,
                report.codebook_usage.used_entries
            );
        }
        reports.push(report);
        if config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0 && trainer.step() < budget {
            trainer.save_checkpoint(&out.join(format!("step_{:08}.safetensors", trainer.step())))?;
        }
    }
    let final_checkpoint = out.join("final.safetensors");
    let checkpoint_sha256 = trainer.save_checkpoint(&final_checkpoint)?;
    Ok(FitOutcome {
        final_checkpoint,
        checkpoint_sha256,
        reports,
    })
}

//! Staged training. Five phases share one parameter store: codec and noise
//! predictor pretraining, then the three numbered stages (rescaler fit,
//! enhancement fit, joint fine-tune).
//!
//! Every step draws its randomness from a stream keyed by `(seed, phase,
//! step)`, never from an evolving generator, so a run checkpointed at step
//! `k` and resumed reproduces the uninterrupted run bit for bit.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Adam, Graph, T};
use crate::codec::{vae_training_loss, LatentCodec, LATENT_REDUCTION};
use crate::container::{manifest_str, manifest_u64, read_container, write_container};
use crate::diffusion::{forward_noise, loss_enh, GradientMagnitude, LocalStructure, PerceptualTerm};
use crate::err::{Error, Result};
use crate::image::{Image, ValueRange};
use crate::rescaler::{gui_from_code, loss_res, rec_from_chains, GuidancePyramid, RescaleLossWeights};
use crate::scalar::Scalar;

use super::config::RunConfig;
use super::model::{Model, Phase};

const CHECKPOINT_KIND: &str = "stage-checkpoint";

/// Per-step loss log of one phase.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub phase: Phase,
    pub columns: Vec<&'static str>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossTrace {
    fn new(phase: Phase, columns: Vec<&'static str>) -> Self {
        LossTrace { phase, columns, rows: Vec::new() }
    }

    fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn first_total(&self) -> Option<f64> {
        self.rows.first().map(|(_, v)| v[0])
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|(_, v)| v[0])
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (step, values) in &self.rows {
            out.push_str(&step.to_string());
            for v in values {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn step_rng(seed: u64, phase: Phase, step: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Codec => 1u64,
        Phase::Denoiser => 2,
        Phase::Rescaler => 3,
        Phase::Enhance => 4,
        Phase::Joint => 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | step as u64);
    rng
}

fn stage_plan(cfg: &RunConfig, phase: Phase) -> (usize, usize, f64) {
    let st = &cfg.stages;
    match phase {
        Phase::Codec => (st.codec_steps, st.codec_batch, st.codec_lr),
        Phase::Denoiser => (st.denoiser_steps, st.denoiser_batch, st.denoiser_lr),
        Phase::Rescaler => (st.stage1_steps, st.stage1_batch, st.stage1_lr),
        Phase::Enhance => (st.stage2_steps, st.stage2_batch, st.stage2_lr),
        Phase::Joint => (st.stage3_steps, st.stage3_batch, st.stage3_lr),
    }
}

/// Fresh optimizer at the phase's configured learning rate.
pub fn stage_optimizer<S: Scalar>(model: &Model<S>, phase: Phase) -> Adam<S> {
    let (_, _, lr) = stage_plan(&model.config, phase);
    Adam::new(&model.store, lr)
}

fn check_corpus<S: Scalar>(images: &[Image<S>], min_side: usize) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| Error::invalid("training corpus is empty"))?;
    let (h, w) = (first.height(), first.width());
    for img in images {
        if img.channels() != 3 || img.range() != ValueRange::Unit {
            return Err(Error::invalid("training images must be 3-channel and unit-range"));
        }
        if img.height() != h || img.width() != w {
            return Err(Error::invalid("training images must share one size"));
        }
    }
    if h < min_side || w < min_side {
        return Err(Error::invalid(format!(
            "corpus images {h}x{w} are smaller than the {min_side}px crop"
        )));
    }
    Ok((h, w))
}

fn batch4<S: Scalar>(parts: &[Array3<S>]) -> ArrayD<S> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("batch members share one shape").into_dyn()
}

fn randn3<S: Scalar>(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Array3<S> {
    Array3::from_shape_fn((c, h, w), |_| S::of(rng.sample::<f64, _>(StandardNormal)))
}

fn apply_step<S: Scalar>(
    g: &mut Graph<S>,
    total: T,
    model: &mut Model<S>,
    opt: &mut Adam<S>,
) -> Result<()> {
    let mut grads = g.backward(total);
    let param_grads = g.take_param_grads(&model.store, &mut grads);
    opt.apply(&mut model.store, &param_grads)
}

/// Codec pretraining on random crops: reconstruction L1 plus the weighted
/// prior divergence.
pub fn train_codec<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
    steps: Range<usize>,
    opt: &mut Adam<S>,
) -> Result<LossTrace> {
    let cfg = model.config.clone();
    let crop = cfg.stages.codec_crop;
    let (h, w) = check_corpus(images, crop)?;
    let (_, batch, _) = stage_plan(&cfg, Phase::Codec);
    model.set_phase(Phase::Codec);

    let mut trace = LossTrace::new(Phase::Codec, vec!["total", "recon", "kl"]);
    let ls = crop / LATENT_REDUCTION;
    for step in steps {
        let mut rng = step_rng(cfg.seed, Phase::Codec, step);
        let mut xs = Vec::with_capacity(batch);
        let mut noises = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            let oy = rng.gen_range(0..=h - crop);
            let ox = rng.gen_range(0..=w - crop);
            xs.push(images[i].data().slice(s![.., oy..oy + crop, ox..ox + crop]).to_owned());
            noises.push(randn3::<S>(&mut rng, 4, ls, ls));
        }
        let mut g = Graph::new();
        let xt = g.constant(batch4(&xs));
        let nt = g.constant(batch4(&noises));
        let parts = vae_training_loss(&mut g, &model.store, &model.codec, xt, nt, cfg.lambda_kl)?;
        let row = vec![
            g.scalar_value(parts.total).as_f64(),
            g.scalar_value(parts.recon).as_f64(),
            g.scalar_value(parts.kl).as_f64(),
        ];
        apply_step(&mut g, parts.total, model, opt)?;
        trace.push(step, row);
    }
    Ok(trace)
}

/// Measures the corpus standard deviation of the raw posterior mean and
/// stores it as the latent standardization constant. Call once after codec
/// pretraining; encoding afterwards yields roughly unit-variance latents.
pub fn calibrate_latent_scale<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
) -> Result<f64> {
    check_corpus(images, 8)?;
    model.codec.set_latent_scale(&mut model.store, 1.0)?;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0.0f64;
    for img in images {
        let z = model.codec.encode(&model.store, img)?;
        for &v in z.iter() {
            let v = v.as_f64();
            sum += v;
            sum_sq += v * v;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    let std = var.sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::runtime(format!(
            "posterior mean collapsed, cannot standardize (std {std})"
        )));
    }
    model.codec.set_latent_scale(&mut model.store, std)?;
    Ok(std)
}

/// Encodes every corpus image to its standardized latent.
pub fn encode_corpus<S: Scalar>(model: &Model<S>, images: &[Image<S>]) -> Result<Vec<Array3<S>>> {
    images.iter().map(|img| model.codec.encode(&model.store, img)).collect()
}

/// Runs every `(image, latent)` pair through the frozen rescaler's full
/// store-and-restore round trip (including 8-bit quantization), yielding the
/// degraded latents the enhancement stage trains on.
pub fn degrade_corpus<S: Scalar>(
    model: &Model<S>,
    images: &[Image<S>],
    latents: &[Array3<S>],
) -> Result<Vec<Array3<S>>> {
    if images.len() != latents.len() {
        return Err(Error::invalid("one latent per image is required"));
    }
    images
        .iter()
        .zip(latents)
        .map(|(x, z)| {
            let (y, _) = model.dfrm.downscale(&model.store, x, z)?;
            model.dfrm.upscale(&model.store, &y)
        })
        .collect()
}

/// Noise-predictor pretraining: standard denoising on forward-noised corpus
/// latents at uniformly drawn steps.
pub fn train_denoiser<S: Scalar>(
    model: &mut Model<S>,
    latents: &[Array3<S>],
    steps: Range<usize>,
    opt: &mut Adam<S>,
) -> Result<LossTrace> {
    let cfg = model.config.clone();
    let first = latents.first().ok_or_else(|| Error::invalid("latent corpus is empty"))?;
    let (c, lh, lw) = first.dim();
    if c != 4 {
        return Err(Error::invalid("latents must have 4 channels"));
    }
    let crop = lh.min(lw).min(16);
    let (_, batch, _) = stage_plan(&cfg, Phase::Denoiser);
    model.set_phase(Phase::Denoiser);

    let mut trace = LossTrace::new(Phase::Denoiser, vec!["total"]);
    for step in steps {
        let mut rng = step_rng(cfg.seed, Phase::Denoiser, step);
        let mut noised = Vec::with_capacity(batch);
        let mut eps_batch = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..latents.len());
            let oy = rng.gen_range(0..=lh - crop);
            let ox = rng.gen_range(0..=lw - crop);
            let z = latents[i].slice(s![.., oy..oy + crop, ox..ox + crop]).to_owned();
            let t = rng.gen_range(0..cfg.t_max);
            let eps = randn3::<S>(&mut rng, 4, crop, crop);
            let zt = forward_noise(&z.into_dyn(), &eps.clone().into_dyn(), t, &model.schedule)?;
            noised.push(zt.into_dimensionality().expect("crop stays 3-d"));
            eps_batch.push(eps);
            ts.push(S::of(t as f64));
        }
        let mut g = Graph::new();
        let zt = g.constant(batch4(&noised));
        let tv = g.constant(Array1::from_vec(ts).into_dyn());
        let eps_hat = model.enhancer.unet.predict_noise(&mut g, &model.store, zt, tv);
        let target = g.constant(batch4(&eps_batch));
        let loss = crate::autodiff::ops::mse_mean(&mut g, eps_hat, target);
        let row = vec![g.scalar_value(loss).as_f64()];
        apply_step(&mut g, loss, model, opt)?;
        trace.push(step, row);
    }
    Ok(trace)
}

struct AlignedCrop<S: Scalar> {
    x: Image<S>,
    z: Array3<S>,
}

fn aligned_crop<S: Scalar>(
    rng: &mut impl Rng,
    img: &Image<S>,
    z: &Array3<S>,
    crop: usize,
) -> AlignedCrop<S> {
    let max_cell_y = (img.height() - crop) / LATENT_REDUCTION;
    let max_cell_x = (img.width() - crop) / LATENT_REDUCTION;
    let oy = LATENT_REDUCTION * rng.gen_range(0..=max_cell_y);
    let ox = LATENT_REDUCTION * rng.gen_range(0..=max_cell_x);
    let x = Image::new(
        img.data().slice(s![.., oy..oy + crop, ox..ox + crop]).to_owned(),
        ValueRange::Unit,
    )
    .expect("crop of a valid image is valid");
    let cl = crop / LATENT_REDUCTION;
    let (ly, lx) = (oy / LATENT_REDUCTION, ox / LATENT_REDUCTION);
    let z = z.slice(s![.., ly..ly + cl, lx..lx + cl]).to_owned();
    AlignedCrop { x, z }
}

/// Stage 1: fits the rescaler with the two-chain latent reconstruction loss
/// plus bicubic pixel guidance, before any quantization enters the chain.
pub fn train_stage1<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
    latents: &[Array3<S>],
    steps: Range<usize>,
    opt: &mut Adam<S>,
) -> Result<LossTrace> {
    let cfg = model.config.clone();
    let crop = cfg.stages.stage1_crop;
    check_corpus(images, crop)?;
    if images.len() != latents.len() {
        return Err(Error::invalid("one latent per image is required"));
    }
    let (_, batch, _) = stage_plan(&cfg, Phase::Rescaler);
    let weights = RescaleLossWeights { rec: cfg.lambda_rec, gui: cfg.lambda_gui };
    weights.validate()?;
    model.set_phase(Phase::Rescaler);

    let mut trace = LossTrace::new(Phase::Rescaler, vec!["total", "rec", "gui"]);
    for step in steps {
        let mut rng = step_rng(cfg.seed, Phase::Rescaler, step);
        let mut xs = Vec::with_capacity(batch);
        let mut zs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            let ac = aligned_crop(&mut rng, &images[i], &latents[i], crop);
            xs.push(ac.x);
            zs.push(ac.z);
        }
        let pyr = GuidancePyramid::build(&xs, cfg.factor)?;
        let mut g = Graph::new();
        let zn = g.constant(batch4(&zs));
        let parts = loss_res(&mut g, &model.store, &model.dfrm, zn, &pyr, weights, false)?;
        let row = vec![
            g.scalar_value(parts.total).as_f64(),
            g.scalar_value(parts.rec).as_f64(),
            g.scalar_value(parts.gui).as_f64(),
        ];
        apply_step(&mut g, parts.total, model, opt)?;
        trace.push(step, row);
    }
    Ok(trace)
}

fn perceptual_terms<S: Scalar>() -> (GradientMagnitude, LocalStructure) {
    (GradientMagnitude::default(), LocalStructure::default())
}

/// Stage 2: freezes codec and rescaler bases and fits the time-step
/// predictor, the learned scheduler correction, and the low-rank adapters so
/// one hybrid reversal step sharpens the restored latent. The loss compares
/// decoded pixels against the source crop.
pub fn train_stage2<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
    degraded: &[Array3<S>],
    steps: Range<usize>,
    opt: &mut Adam<S>,
) -> Result<LossTrace> {
    let cfg = model.config.clone();
    let crop = cfg.stages.stage2_crop;
    check_corpus(images, crop)?;
    if images.len() != degraded.len() {
        return Err(Error::invalid("one degraded latent per image is required"));
    }
    let (_, batch, _) = stage_plan(&cfg, Phase::Enhance);
    model.set_phase(Phase::Enhance);

    let (gm, lst) = perceptual_terms::<S>();
    let terms: Vec<&dyn PerceptualTerm<S>> = vec![&gm, &lst];
    let mut trace = LossTrace::new(Phase::Enhance, vec!["total", "mean_t"]);
    for step in steps {
        let mut rng = step_rng(cfg.seed, Phase::Enhance, step);
        let mut xs = Vec::with_capacity(batch);
        let mut zs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            let ac = aligned_crop(&mut rng, &images[i], &degraded[i], crop);
            xs.push(ac.x.into_data());
            zs.push(ac.z);
        }
        let mut g = Graph::new();
        let zn = g.constant(batch4(&zs));
        let (z0, t) = model.enhancer.enhance(&mut g, &model.store, zn, &model.schedule)?;
        let x_hat = model.codec.decode_graph(&mut g, &model.store, z0);
        let target = g.constant(batch4(&xs));
        let loss = loss_enh(&mut g, x_hat, target, &terms, cfg.lambda_pec)?;
        let mean_t = {
            let tv = g.value(t);
            tv.iter().map(|v| v.as_f64()).sum::<f64>() / tv.len() as f64
        };
        let row = vec![g.scalar_value(loss).as_f64(), mean_t];
        apply_step(&mut g, loss, model, opt)?;
        trace.push(step, row);
    }
    Ok(trace)
}

/// Stage 3: end-to-end fine-tune through the full store-and-restore chain.
/// The stored pixels pass a straight-through 8-bit quantization so the
/// gradient sees exactly what inference will, and the enhancement loss is
/// taken on the decoded output of the hybrid reversal.
pub fn train_stage3<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
    latents: &[Array3<S>],
    steps: Range<usize>,
    opt: &mut Adam<S>,
) -> Result<LossTrace> {
    let cfg = model.config.clone();
    let crop = cfg.stages.stage3_crop;
    check_corpus(images, crop)?;
    if images.len() != latents.len() {
        return Err(Error::invalid("one latent per image is required"));
    }
    let (_, batch, _) = stage_plan(&cfg, Phase::Joint);
    model.set_phase(Phase::Joint);

    let (gm, lst) = perceptual_terms::<S>();
    let terms: Vec<&dyn PerceptualTerm<S>> = vec![&gm, &lst];
    let mut trace = LossTrace::new(Phase::Joint, vec!["total", "rec", "gui", "enh", "mean_t"]);
    for step in steps {
        let mut rng = step_rng(cfg.seed, Phase::Joint, step);
        let mut xs = Vec::with_capacity(batch);
        let mut zs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            let ac = aligned_crop(&mut rng, &images[i], &latents[i], crop);
            xs.push(ac.x);
            zs.push(ac.z);
        }
        let pyr = GuidancePyramid::build(&xs, cfg.factor)?;
        let mut g = Graph::new();
        let zn = g.constant(batch4(&zs));

        let code = model.dfrm.encode(&mut g, &model.store, zn, &pyr)?;
        let direct = model.dfrm.decode(&mut g, &model.store, code)?;
        let pixels = model.dfrm.to_pixels(&mut g, &model.store, code)?;
        let stored = crate::autodiff::ops::quantize_ste(&mut g, pixels);
        let back = model.dfrm.from_pixels(&mut g, &model.store, stored)?;
        let z_hat = model.dfrm.decode(&mut g, &model.store, back)?;
        let rec = rec_from_chains(&mut g, direct, z_hat, zn);
        let gui_target = g.constant(pyr.lr_target().clone());
        let gui = gui_from_code(&mut g, pixels, gui_target);

        let (z0, t) = model.enhancer.enhance(&mut g, &model.store, z_hat, &model.schedule)?;
        let x_hat = model.codec.decode_graph(&mut g, &model.store, z0);
        let pixel_target = {
            let data: Vec<Array3<S>> = xs.iter().map(|im| im.data().clone()).collect();
            g.constant(batch4(&data))
        };
        let enh = loss_enh(&mut g, x_hat, pixel_target, &terms, cfg.lambda_pec)?;

        let wr = crate::autodiff::ops::scale(&mut g, rec, cfg.lambda_rec);
        let wg = crate::autodiff::ops::scale(&mut g, gui, cfg.lambda_gui);
        let res = crate::autodiff::ops::add(&mut g, wr, wg);
        let total = crate::autodiff::ops::add(&mut g, res, enh);

        let mean_t = {
            let tv = g.value(t);
            tv.iter().map(|v| v.as_f64()).sum::<f64>() / tv.len() as f64
        };
        let row = vec![
            g.scalar_value(total).as_f64(),
            g.scalar_value(rec).as_f64(),
            g.scalar_value(gui).as_f64(),
            g.scalar_value(enh).as_f64(),
            mean_t,
        ];
        apply_step(&mut g, total, model, opt)?;
        trace.push(step, row);
    }
    Ok(trace)
}

/// Mean rescaler objective over whole images, for held-out evaluation.
pub fn eval_rescale_loss<S: Scalar>(
    model: &Model<S>,
    images: &[Image<S>],
    quantize: bool,
) -> Result<f64> {
    check_corpus(images, 8)?;
    let cfg = &model.config;
    let weights = RescaleLossWeights { rec: cfg.lambda_rec, gui: cfg.lambda_gui };
    let mut acc = 0.0;
    for img in images {
        let z = model.codec.encode(&model.store, img)?;
        let pyr = GuidancePyramid::build(std::slice::from_ref(img), cfg.factor)?;
        let mut g = Graph::new();
        let zn = g.constant(z.insert_axis(Axis(0)).into_dyn());
        let parts = loss_res(&mut g, &model.store, &model.dfrm, zn, &pyr, weights, quantize)?;
        acc += g.scalar_value(parts.total).as_f64();
    }
    Ok(acc / images.len() as f64)
}

/// A mid-stage snapshot: model, optimizer state, and the next step to run.
pub struct Resumed<S: Scalar> {
    pub model: Model<S>,
    pub opt: Adam<S>,
    pub phase: Phase,
    pub next_step: usize,
}

/// Writes a resumable snapshot: every parameter plus the optimizer moments,
/// the phase, and the step the run would execute next.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    opt: &Adam<S>,
    phase: Phase,
    next_step: usize,
) -> Result<()> {
    let manifest = serde_json::json!({
        "kind": CHECKPOINT_KIND,
        "config": model.config,
        "stage": phase.as_str(),
        "next_step": next_step as u64,
        "optim_step": opt.step_count(),
        "lr": opt.lr,
        "identity": model.identity(),
    });
    let mut blobs: Vec<(String, ArrayD<S>)> = Vec::new();
    for (name, value) in model.store.export() {
        blobs.push((format!("param.{name}"), value));
    }
    let (_, m, v) = opt.state();
    for ((id, mi), vi) in model.store.ids().zip(m).zip(v) {
        let name = model.store.name(id);
        blobs.push((format!("optim.m.{name}"), mi.clone()));
        blobs.push((format!("optim.v.{name}"), vi.clone()));
    }
    write_container(path, &manifest, &blobs)
}

/// Restores a snapshot written by [`save_checkpoint`]: rebuilds the model
/// from the embedded config and realigns the optimizer moments, so resuming
/// reproduces the uninterrupted run bit for bit.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Resumed<S>> {
    let archive = read_container::<S>(path)?;
    let kind = manifest_str(&archive.manifest, "kind")?;
    if kind != CHECKPOINT_KIND {
        return Err(Error::config(format!(
            "archive kind '{kind}' is not a training checkpoint; expected '{CHECKPOINT_KIND}'"
        )));
    }
    let config_value = archive
        .manifest
        .get("config")
        .ok_or_else(|| Error::format("checkpoint lacks its config"))?;
    let config: RunConfig = serde_json::from_value(config_value.clone())
        .map_err(|e| Error::format(format!("embedded config: {e}")))?;
    let phase = Phase::parse(manifest_str(&archive.manifest, "stage")?)
        .ok_or_else(|| Error::format("checkpoint names an unknown stage"))?;
    let next_step = manifest_u64(&archive.manifest, "next_step")? as usize;
    let optim_step = manifest_u64(&archive.manifest, "optim_step")?;
    let lr = archive
        .manifest
        .get("lr")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::format("checkpoint lacks the learning rate"))?;

    let mut model = Model::<S>::new(config)?;
    let mut params = BTreeMap::new();
    for (name, value) in &archive.blobs {
        if let Some(stripped) = name.strip_prefix("param.") {
            params.insert(stripped.to_string(), value.clone());
        }
    }
    model.store.import(&params, true)?;

    let mut opt = Adam::new(&model.store, lr);
    let mut m = Vec::new();
    let mut v = Vec::new();
    for id in model.store.ids() {
        let name = model.store.name(id);
        let mi = archive
            .blobs
            .get(&format!("optim.m.{name}"))
            .ok_or_else(|| Error::format(format!("checkpoint misses moment for '{name}'")))?;
        let vi = archive
            .blobs
            .get(&format!("optim.v.{name}"))
            .ok_or_else(|| Error::format(format!("checkpoint misses variance for '{name}'")))?;
        m.push(mi.clone());
        v.push(vi.clone());
    }
    opt.restore(optim_step, m, v)?;
    Ok(Resumed { model, opt, phase, next_step })
}

/// Options for the full training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for per-stage loss CSVs and post-stage checkpoints.
    pub out_dir: Option<std::path::PathBuf>,
    /// Print stage progress to stderr.
    pub verbose: bool,
}

/// Everything the full run produced.
pub struct TrainReport {
    pub traces: Vec<LossTrace>,
    pub latent_scale: f64,
}

fn progress(verbose: bool, phase: Phase, trace: &LossTrace) {
    if !verbose {
        return;
    }
    let (first, last) = (trace.first_total().unwrap_or(0.0), trace.last_total().unwrap_or(0.0));
    eprintln!(
        "[{}] {} steps, loss {first:.5} -> {last:.5}",
        phase.as_str(),
        trace.rows.len()
    );
}

fn emit<S: Scalar>(
    opts: &TrainOptions,
    model: &Model<S>,
    opt: &Adam<S>,
    trace: &LossTrace,
    next_step: usize,
) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        trace.write_csv(&dir.join(format!("loss_{}.csv", trace.phase.as_str())))?;
        save_checkpoint(
            &dir.join(format!("checkpoint_{}.rsck", trace.phase.as_str())),
            model,
            opt,
            trace.phase,
            next_step,
        )?;
    }
    Ok(())
}

/// Runs all five phases in order on one corpus: codec, noise predictor,
/// rescaler, enhancement, joint. Writes loss CSVs and per-stage checkpoints
/// when an output directory is given.
pub fn train_full<S: Scalar>(
    model: &mut Model<S>,
    images: &[Image<S>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    let mut traces = Vec::new();

    let mut opt = stage_optimizer(model, Phase::Codec);
    let trace = train_codec(model, images, 0..cfg.stages.codec_steps, &mut opt)?;
    progress(opts.verbose, Phase::Codec, &trace);
    let latent_scale = calibrate_latent_scale(model, images)?;
    if opts.verbose {
        eprintln!("[codec] latent scale {latent_scale:.5}");
    }
    emit(opts, model, &opt, &trace, cfg.stages.codec_steps)?;
    traces.push(trace);

    let latents = encode_corpus(model, images)?;
    let mut opt = stage_optimizer(model, Phase::Denoiser);
    let trace = train_denoiser(model, &latents, 0..cfg.stages.denoiser_steps, &mut opt)?;
    progress(opts.verbose, Phase::Denoiser, &trace);
    emit(opts, model, &opt, &trace, cfg.stages.denoiser_steps)?;
    traces.push(trace);

    let mut opt = stage_optimizer(model, Phase::Rescaler);
    let trace = train_stage1(model, images, &latents, 0..cfg.stages.stage1_steps, &mut opt)?;
    progress(opts.verbose, Phase::Rescaler, &trace);
    emit(opts, model, &opt, &trace, cfg.stages.stage1_steps)?;
    traces.push(trace);

    let degraded = degrade_corpus(model, images, &latents)?;
    let mut opt = stage_optimizer(model, Phase::Enhance);
    let trace = train_stage2(model, images, &degraded, 0..cfg.stages.stage2_steps, &mut opt)?;
    progress(opts.verbose, Phase::Enhance, &trace);
    emit(opts, model, &opt, &trace, cfg.stages.stage2_steps)?;
    traces.push(trace);

    let mut opt = stage_optimizer(model, Phase::Joint);
    let trace = train_stage3(model, images, &latents, 0..cfg.stages.stage3_steps, &mut opt)?;
    progress(opts.verbose, Phase::Joint, &trace);
    emit(opts, model, &opt, &trace, cfg.stages.stage3_steps)?;
    traces.push(trace);

    Ok(TrainReport { traces, latent_scale })
}

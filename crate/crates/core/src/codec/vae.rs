//! Desk-scale variational autoencoder backing the latent codec.

use ndarray::{Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Conv2d, Graph, Init, LoraConv2d, ParamStore, T};
use crate::container::{manifest_str, manifest_u64, write_container, Container};
use crate::err::{Error, Result};
use crate::image::{Image, ValueRange};
use crate::scalar::Scalar;

use super::{latent_dims, LatentCodec, LATENT_CHANNELS, LATENT_REDUCTION};

const PREFIX: &str = "codec";
const ENC_WIDTHS: [usize; 3] = [24, 48, 64];
const DEC_WIDTHS: [usize; 3] = [48, 24, 16];
const LORA_RANK: usize = 4;

/// Convolutional encoder/decoder pair with an 8× spatial reduction and a
/// 4-channel latent. The encoder emits posterior moments; encoding uses the
/// mean only, scaled to roughly unit variance by a stored standardization
/// constant. Decoder convolutions carry low-rank deltas for later adaptation.
#[derive(Debug, Clone)]
pub struct ToyVae {
    enc: Vec<Conv2d>,
    dec: Vec<LoraConv2d>,
    latent_scale: crate::autodiff::ParamId,
}

impl ToyVae {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        let mut enc = Vec::new();
        let mut ci = 3;
        for (i, &co) in ENC_WIDTHS.iter().enumerate() {
            enc.push(Conv2d::new(ps, rng, &format!("{PREFIX}.enc{i}"), ci, co, 3, 2, 1, Init::He)?);
            ci = co;
        }
        enc.push(Conv2d::new(ps, rng, &format!("{PREFIX}.enc3"), ci, 64, 3, 1, 1, Init::He)?);
        enc.push(Conv2d::new(
            ps,
            rng,
            &format!("{PREFIX}.enc4"),
            64,
            2 * LATENT_CHANNELS,
            3,
            1,
            1,
            Init::He,
        )?);

        let mut dec = Vec::new();
        let mut ci = LATENT_CHANNELS;
        dec.push(LoraConv2d::new(ps, rng, &format!("{PREFIX}.dec0"), ci, 64, 3, 1, 1, Init::He, LORA_RANK, LORA_RANK as f64)?);
        ci = 64;
        for (i, &co) in DEC_WIDTHS.iter().enumerate() {
            dec.push(LoraConv2d::new(
                ps,
                rng,
                &format!("{PREFIX}.dec{}", i + 1),
                ci,
                co,
                3,
                1,
                1,
                Init::He,
                LORA_RANK,
                LORA_RANK as f64,
            )?);
            ci = co;
        }
        dec.push(LoraConv2d::new(ps, rng, &format!("{PREFIX}.dec4"), ci, 3, 3, 1, 1, Init::He, LORA_RANK, LORA_RANK as f64)?);

        let latent_scale = ps.register(
            format!("{PREFIX}.latent_scale"),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), S::of(1.0)),
        )?;
        ps.set_trainable(latent_scale, false);
        Ok(ToyVae { enc, dec, latent_scale })
    }

    /// Construction with a fixed seed, for mounting checkpoints where the
    /// initial values are immediately overwritten.
    pub fn register<S: Scalar>(ps: &mut ParamStore<S>) -> Result<Self> {
        Self::new(ps, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn latent_scale<S: Scalar>(&self, ps: &ParamStore<S>) -> f64 {
        ps.value(self.latent_scale)[[0]].as_f64()
    }

    /// Sets the latent standardization constant (the corpus standard deviation
    /// of the posterior mean). Encoding divides by it, decoding multiplies.
    pub fn set_latent_scale<S: Scalar>(&self, ps: &mut ParamStore<S>, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("latent scale must be positive, got {scale}")));
        }
        ps.set_value(self.latent_scale, ArrayD::from_elem(ndarray::IxDyn(&[1]), S::of(scale)))
    }

    /// Raw posterior moments `(mu, logvar)` for an image batch `[n, 3, H, W]`
    /// in `[-1, 1]`; both are `[n, 4, H/8, W/8]`.
    pub fn encode_moments<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T) -> (T, T) {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "encoder input must be [n, c, h, w]");
        assert_eq!(shape[1], 3, "encoder input must have 3 channels");
        assert!(
            shape[2] % LATENT_REDUCTION == 0 && shape[3] % LATENT_REDUCTION == 0,
            "encoder input sides must be divisible by {LATENT_REDUCTION}"
        );
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(g, ps, h);
            if i + 1 < self.enc.len() {
                h = ops::leaky_relu(g, h, 0.2);
            }
        }
        let mu = ops::slice_c(g, h, 0, LATENT_CHANNELS);
        let logvar = ops::slice_c(g, h, LATENT_CHANNELS, 2 * LATENT_CHANNELS);
        (mu, logvar)
    }

    /// Standardized deterministic latent (posterior mean over the stored
    /// scale) for an image batch.
    pub fn encode_graph<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: T) -> T {
        let (mu, _) = self.encode_moments(g, ps, x);
        let s = self.latent_scale(ps);
        ops::scale(g, mu, 1.0 / s)
    }

    /// Image batch in `(-1, 1)` for a standardized latent batch `[n, 4, h, w]`.
    pub fn decode_graph<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, z: T) -> T {
        let shape = g.value(z).shape().to_vec();
        assert_eq!(shape.len(), 4, "decoder input must be [n, c, h, w]");
        assert_eq!(shape[1], LATENT_CHANNELS, "decoder input must have {LATENT_CHANNELS} channels");
        let s = self.latent_scale(ps);
        let mut h = ops::scale(g, z, s);
        for (i, conv) in self.dec.iter().enumerate() {
            if (1..=3).contains(&i) {
                h = ops::upsample_nearest2(g, h);
            }
            h = conv.forward(g, ps, h);
            if i + 1 < self.dec.len() {
                h = ops::leaky_relu(g, h, 0.2);
            }
        }
        ops::tanh(g, h)
    }

    pub fn save<S: Scalar>(&self, ps: &ParamStore<S>, path: &std::path::Path, corpus_hash: &str) -> Result<()> {
        let blobs: Vec<(String, ArrayD<S>)> = ps
            .export()
            .into_iter()
            .filter(|(name, _)| name.starts_with(&format!("{PREFIX}.")))
            .collect();
        let manifest = serde_json::json!({
            "kind": "toy",
            "latent_channels": LATENT_CHANNELS,
            "reduction": LATENT_REDUCTION,
            "corpus_hash": corpus_hash,
        });
        write_container(path, &manifest, &blobs)
    }

    /// Replaces this codec's parameters with the archive's blobs. The archive
    /// must cover exactly the codec parameters registered in `ps`.
    pub fn load_from_archive<S: Scalar>(&self, ps: &mut ParamStore<S>, archive: &Container<S>) -> Result<()> {
        if manifest_str(&archive.manifest, "kind")? != "toy" {
            return Err(Error::format("archive does not hold a toy codec"));
        }
        if manifest_u64(&archive.manifest, "latent_channels")? != LATENT_CHANNELS as u64
            || manifest_u64(&archive.manifest, "reduction")? != LATENT_REDUCTION as u64
        {
            return Err(Error::format("archive codec geometry does not match this build"));
        }
        let own: Vec<String> = ps
            .names()
            .filter(|n| n.starts_with(&format!("{PREFIX}.")))
            .map(str::to_string)
            .collect();
        for name in &own {
            if !archive.blobs.contains_key(name) {
                return Err(Error::format(format!("archive misses codec parameter '{name}'")));
            }
        }
        for name in archive.blobs.keys() {
            if !own.iter().any(|o| o == name) {
                return Err(Error::format(format!("archive has unknown codec parameter '{name}'")));
            }
        }
        ps.import(&archive.blobs, false)?;
        Ok(())
    }
}

impl<S: Scalar> LatentCodec<S> for ToyVae {
    fn kind(&self) -> &'static str {
        "toy"
    }

    fn encode(&self, ps: &ParamStore<S>, x: &Image<S>) -> Result<Array3<S>> {
        latent_dims(x.height(), x.width())?;
        let unit = match x.range() {
            ValueRange::Unit => x.clone(),
            ValueRange::EightBit => x.to_unit(),
        };
        let batch = unit.into_data().insert_axis(Axis(0)).into_dyn();
        let mut g = Graph::new();
        let xt = g.constant(batch);
        let z = self.encode_graph(&mut g, ps, xt);
        let out = g.value(z).index_axis(Axis(0), 0).to_owned();
        Ok(out.into_dimensionality().expect("latent is 3-d"))
    }

    fn decode(&self, ps: &ParamStore<S>, z: &Array3<S>) -> Result<Image<S>> {
        let (c, _, _) = z.dim();
        if c != LATENT_CHANNELS {
            return Err(Error::invalid(format!("latent must have {LATENT_CHANNELS} channels, got {c}")));
        }
        let batch = z.clone().insert_axis(Axis(0)).into_dyn();
        let mut g = Graph::new();
        let zt = g.constant(batch);
        let xt = self.decode_graph(&mut g, ps, zt);
        let out = g.value(xt).index_axis(Axis(0), 0).to_owned();
        Image::new(out.into_dimensionality().expect("image is 3-d"), ValueRange::Unit)
    }
}

/// `0.5 · mean(mu² + exp(logvar) − 1 − logvar)`, the divergence of the
/// diagonal posterior from the standard normal prior, averaged per element.
pub fn kl_divergence<S: Scalar>(g: &mut Graph<S>, mu: T, logvar: T) -> T {
    let mu2 = ops::square(g, mu);
    let var = ops::exp(g, logvar);
    let a = ops::add(g, mu2, var);
    let b = ops::sub(g, a, logvar);
    let c = ops::add_scalar(g, b, -1.0);
    let m = ops::mean_all(g, c);
    ops::scale(g, m, 0.5)
}

/// Pieces of the codec pretraining objective.
pub struct VaeLossParts {
    pub total: T,
    pub recon: T,
    pub kl: T,
}

/// Reconstruction L1 plus `lambda_kl` times the prior divergence, with the
/// reparameterized sample `z = mu + exp(logvar/2) ⊙ noise`.
pub fn vae_training_loss<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamStore<S>,
    vae: &ToyVae,
    x: T,
    noise: T,
    lambda_kl: f64,
) -> Result<VaeLossParts> {
    let (mu, logvar) = vae.encode_moments(g, ps, x);
    if g.value(noise).shape() != g.value(mu).shape() {
        return Err(Error::invalid("noise batch must match the latent shape"));
    }
    let half_logvar = ops::scale(g, logvar, 0.5);
    let std = ops::exp(g, half_logvar);
    let scaled = ops::mul(g, std, noise);
    let z = ops::add(g, mu, scaled);
    let xr = vae.decode_graph(g, ps, z);
    let recon = ops::l1_mean(g, xr, x);
    let kl = kl_divergence(g, mu, logvar);
    let weighted = ops::scale(g, kl, lambda_kl);
    let total = ops::add(g, recon, weighted);
    Ok(VaeLossParts { total, recon, kl })
}

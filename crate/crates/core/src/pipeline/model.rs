//! The complete model: latent codec, rescaler, and one-step enhancer sharing
//! one parameter store, plus checkpoint serialization and the per-stage
//! trainability switches.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::codec::{LatentCodec, ToyVae};
use crate::container::{manifest_str, read_container, write_container};
use crate::diffusion::{Enhancer, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::err::{Error, Result};
use crate::rescaler::{Dfrm, DfrmOptions};
use crate::scalar::Scalar;

use super::config::{hex_prefix, RunConfig};

const CONTAINER_KIND: &str = "rescale-model";

/// Which parameter groups a training phase may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Codec pretraining: encoder/decoder base weights, never the adapters
    /// or the frozen latent scale.
    Codec,
    /// Denoiser pretraining: base noise-predictor weights, no adapters.
    Denoiser,
    /// Stage 1: the rescaler alone.
    Rescaler,
    /// Stage 2: predictor, scheduler, and the low-rank adapters of the
    /// denoiser and the codec decoder.
    Enhance,
    /// Stage 3: stage 2 plus the rescaler.
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 5] =
        [Phase::Codec, Phase::Denoiser, Phase::Rescaler, Phase::Enhance, Phase::Joint];

    /// Stable name used in checkpoint manifests and loss-log filenames. The
    /// numbered stages match the config keys (`stage1_*` trains the rescaler).
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Codec => "codec",
            Phase::Denoiser => "denoiser",
            Phase::Rescaler => "stage1",
            Phase::Enhance => "stage2",
            Phase::Joint => "stage3",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

fn in_phase(phase: Phase, name: &str) -> bool {
    let rescaler =
        name.starts_with("ge.") || name.starts_with("gd.") || name.starts_with("inn.");
    let adapter = name.contains(".lora_")
        && (name.starts_with("denoiser.") || name.starts_with("codec.dec"));
    match phase {
        Phase::Codec => {
            name.starts_with("codec.")
                && !name.contains(".lora_")
                && name != "codec.latent_scale"
        }
        Phase::Denoiser => name.starts_with("denoiser.") && !name.contains(".lora_"),
        Phase::Rescaler => rescaler,
        Phase::Enhance => {
            name.starts_with("tpm.") || name.starts_with("scheduler.") || adapter
        }
        Phase::Joint => {
            rescaler || name.starts_with("tpm.") || name.starts_with("scheduler.") || adapter
        }
    }
}

/// Codec, rescaler, enhancer, and schedule bound to one config.
pub struct Model<S: Scalar> {
    pub store: ParamStore<S>,
    pub codec: ToyVae,
    pub dfrm: Dfrm,
    pub enhancer: Enhancer,
    pub schedule: NoiseSchedule,
    pub config: RunConfig,
}

impl<S: Scalar> Model<S> {
    /// Builds a fresh model, deterministically seeded from the config.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let codec = ToyVae::new(&mut store, &mut rng)?;
        let dfrm = Dfrm::with_options(
            &mut store,
            &mut rng,
            config.factor,
            DfrmOptions { use_inn: config.use_inn, use_guidance: config.use_guidance },
        )?;
        let enhancer = Enhancer::new(&mut store, &mut rng, config.t_max, config.t0)?;
        let schedule = NoiseSchedule::linear(config.t_max, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
        Ok(Model { store, codec, dfrm, enhancer, schedule, config })
    }

    /// Short content hash of every parameter, used as the model identity in
    /// sidecar metadata and manifests.
    pub fn identity(&self) -> String {
        hex_prefix(&self.store.checksum_prefix(""), 12)
    }

    /// Marks exactly the given phase's parameter groups trainable.
    pub fn set_phase(&mut self, phase: Phase) -> usize {
        self.store
            .set_trainable_where(|name| Some(in_phase(phase, name)))
    }

    /// Encodes an image to its latent (posterior mean, standardized).
    pub fn encode_image(&self, x: &crate::image::Image<S>) -> Result<ndarray::Array3<S>> {
        self.codec.encode(&self.store, x)
    }

    /// Decodes a latent back to a unit-range image.
    pub fn decode_latent(&self, z: &ndarray::Array3<S>) -> Result<crate::image::Image<S>> {
        self.codec.decode(&self.store, z)
    }

    /// Writes the full model (config + every parameter) as one atomic file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::json!({
            "kind": CONTAINER_KIND,
            "config": self.config,
            "identity": self.identity(),
        });
        write_container(path, &manifest, &self.store.export())
    }

    /// Loads a model saved by [`Self::save`], rebuilding the architecture
    /// from the embedded config and overwriting every parameter.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_container::<S>(path)?;
        let kind = manifest_str(&archive.manifest, "kind")?;
        if kind != CONTAINER_KIND {
            return Err(Error::config(format!(
                "archive kind '{kind}' is not a full model; expected '{CONTAINER_KIND}'"
            )));
        }
        let config_value = archive
            .manifest
            .get("config")
            .ok_or_else(|| Error::format("model archive lacks its config"))?;
        let config: RunConfig = serde_json::from_value(config_value.clone())
            .map_err(|e| Error::format(format!("embedded config: {e}")))?;
        let mut model = Model::new(config)?;
        model.store.import(&archive.blobs, true)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig {
            t_max: 60,
            t0: 59,
            corpus: super::super::config::CorpusConfig { images: 4, size: 64 },
            ..RunConfig::default()
        };
        cfg.stages.codec_crop = 32;
        cfg.stages.stage1_crop = 64;
        cfg.stages.stage2_crop = 32;
        cfg.stages.stage3_crop = 32;
        cfg
    }

    #[test]
    fn construction_registers_every_component() {
        let m = Model::<f64>::new(small_config()).unwrap();
        for root in ["codec.", "ge.", "gd.", "inn.", "denoiser.", "tpm.", "scheduler."] {
            assert!(
                m.store.names().any(|n| n.starts_with(root)),
                "missing parameter group {root}"
            );
        }
        assert!(m.store.num_scalars() > 10_000);
    }

    #[test]
    fn identity_tracks_parameters() {
        let a = Model::<f64>::new(small_config()).unwrap();
        let b = Model::<f64>::new(small_config()).unwrap();
        assert_eq!(a.identity(), b.identity());
        let mut cfg = small_config();
        cfg.seed += 1;
        let c = Model::<f64>::new(cfg).unwrap();
        assert_ne!(a.identity(), c.identity());
    }

    #[test]
    fn save_load_round_trips_config_and_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let m = Model::<f64>::new(small_config()).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f64>::load(&path).unwrap();
        assert_eq!(back.identity(), m.identity());
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn phase_switches_select_the_right_groups() {
        let mut m = Model::<f64>::new(small_config()).unwrap();

        m.set_phase(Phase::Rescaler);
        assert!(m.store.trainable(m.store.id("ge.c0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("inn.b0.c0.w").unwrap()));
        assert!(!m.store.trainable(m.store.id("codec.enc0.w").unwrap()));
        assert!(!m.store.trainable(m.store.id("tpm.c0.w").unwrap()));

        m.set_phase(Phase::Enhance);
        assert!(!m.store.trainable(m.store.id("ge.c0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("tpm.c0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("scheduler.out.w").unwrap()));
        assert!(m.store.trainable(m.store.id("denoiser.mid0.lora_a").unwrap()));
        assert!(!m.store.trainable(m.store.id("denoiser.mid0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("codec.dec1.lora_a").unwrap()));
        assert!(!m.store.trainable(m.store.id("codec.dec1.w").unwrap()));

        m.set_phase(Phase::Codec);
        assert!(m.store.trainable(m.store.id("codec.enc0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("codec.dec1.w").unwrap()));
        assert!(!m.store.trainable(m.store.id("codec.dec1.lora_a").unwrap()));
        assert!(!m.store.trainable(m.store.id("codec.latent_scale").unwrap()));

        m.set_phase(Phase::Joint);
        assert!(m.store.trainable(m.store.id("ge.c0.w").unwrap()));
        assert!(m.store.trainable(m.store.id("tpm.c0.w").unwrap()));
        assert!(!m.store.trainable(m.store.id("codec.enc0.w").unwrap()));
    }

    #[test]
    fn loading_a_non_model_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.ck");
        crate::container::write_container::<f64>(
            &path,
            &serde_json::json!({"kind": "something-else"}),
            &[("x".to_string(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])))],
        )
        .unwrap();
        match Model::<f64>::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("kind")),
            Err(other) => panic!("expected a configuration error, got {other}"),
            Ok(_) => panic!("expected a configuration error, got a model"),
        }
    }
}

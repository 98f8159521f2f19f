//! File-to-file rescaling: store an image as a tiny PNG plus metadata, and
//! restore it with tiled one-step enhancement.
//!
//! The stored PNG carries a `rescale` tEXt chunk describing the factor, the
//! source dimensions, and the writing model's parameter checksum; the same
//! JSON is mirrored to a `.json` sidecar for tools that strip text chunks.
//! Restoration refuses files whose metadata does not match the mounted model.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis, Ix3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::TimeStepMap;
use crate::err::{Error, Result};
use crate::image::{load_png_rgb8, save_png_rgb8, save_png_rgb8_with_text, Image};
use crate::scalar::Scalar;
use crate::tile::{merge_patches, to_patches};

use super::model::Model;

/// PNG text keyword carrying the stored metadata.
pub const META_KEY: &str = "rescale";

/// Everything restoration needs to know about a stored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredMeta {
    pub factor: usize,
    pub src_height: usize,
    pub src_width: usize,
    /// Parameter checksum of the model that wrote the file.
    pub identity: String,
    pub config_hash: String,
}

impl StoredMeta {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metadata serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("stored metadata: {e}")))
    }
}

/// Path of the JSON sidecar mirroring the PNG metadata.
pub fn sidecar_path(png: &Path) -> PathBuf {
    let mut os = png.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

/// What [`rescale_down`] wrote.
#[derive(Debug, Clone)]
pub struct DownReport {
    pub path: PathBuf,
    pub meta: StoredMeta,
    /// PNG file bits per source-image pixel.
    pub bpp: f64,
}

/// Stores `x` as the compact PNG plus metadata sidecar.
pub fn rescale_down<S: Scalar>(
    model: &Model<S>,
    x: &Image<S>,
    out_png: &Path,
) -> Result<DownReport> {
    let xu = x.to_unit();
    let z = model.encode_image(&xu)?;
    let (y, _) = model.dfrm.downscale(&model.store, &xu, &z)?;
    let meta = StoredMeta {
        factor: model.config.factor,
        src_height: x.height(),
        src_width: x.width(),
        identity: model.identity(),
        config_hash: model.config.hash(),
    };
    let json = meta.to_json();
    save_png_rgb8_with_text(out_png, &y, &[(META_KEY.to_string(), json.clone())])?;
    std::fs::write(sidecar_path(out_png), &json)?;
    let bpp = crate::bench::bpp_of_file(out_png, x.height(), x.width())?;
    Ok(DownReport { path: out_png.to_path_buf(), meta, bpp })
}

/// Reads the stored metadata, preferring the PNG text chunk and falling back
/// to the JSON sidecar.
pub fn read_meta(png: &Path, texts: &[(String, String)]) -> Result<StoredMeta> {
    if let Some((_, json)) = texts.iter().find(|(k, _)| k == META_KEY) {
        return StoredMeta::from_json(json);
    }
    let sidecar = sidecar_path(png);
    if sidecar.exists() {
        return StoredMeta::from_json(&std::fs::read_to_string(sidecar)?);
    }
    Err(Error::format(format!(
        "{} carries no stored-image metadata (no '{META_KEY}' text chunk, no sidecar)",
        png.display()
    )))
}

fn check_meta<S: Scalar>(model: &Model<S>, meta: &StoredMeta, lr: &Image<S>) -> Result<()> {
    if meta.factor != model.config.factor {
        return Err(Error::config(format!(
            "file was stored at factor {}, model runs factor {}",
            meta.factor, model.config.factor
        )));
    }
    if meta.identity != model.identity() {
        return Err(Error::config(format!(
            "file was stored by model {}, mounted model is {}",
            meta.identity,
            model.identity()
        )));
    }
    let (eh, ew) = (meta.src_height / meta.factor, meta.src_width / meta.factor);
    if lr.height() != eh || lr.width() != ew {
        return Err(Error::format(format!(
            "stored image is {}x{}, metadata implies {eh}x{ew}",
            lr.height(),
            lr.width()
        )));
    }
    Ok(())
}

/// Tiled one-step enhancement of a restored latent `[4, h, w]`, in row-major
/// patch order. Overlaps merge under a raised-cosine blend; a grid with one
/// all-covering patch reproduces the untiled result bitwise. Returns the
/// enhanced latent and the per-patch time-step map.
pub fn enhance_tiled<S: Scalar>(
    model: &Model<S>,
    z_hat: &Array3<S>,
) -> Result<(Array3<S>, TimeStepMap)> {
    let cfg = &model.config;
    let (patches, grid) = to_patches(z_hat.view(), cfg.patch_size, cfg.stride)?;
    if grid.patch_h % 2 != 0 || grid.patch_w % 2 != 0 {
        return Err(Error::invalid(format!(
            "effective patch {}x{} must have even sides for the noise predictor",
            grid.patch_h, grid.patch_w
        )));
    }
    let mut enhanced = Vec::with_capacity(patches.len());
    let mut ts = Vec::with_capacity(patches.len());
    for p in &patches {
        let batch = p.clone().insert_axis(Axis(0)).into_dyn();
        let (z0, t) = match cfg.fixed_timestep {
            Some(tf) => {
                let t = tf.round() as usize;
                let mut g = Graph::new();
                let zt = g.constant(batch);
                let z0 =
                    model.enhancer.enhance_fixed(&mut g, &model.store, zt, t, &model.schedule)?;
                (g.value(z0).clone(), t as f64)
            }
            None => {
                let (z0, tv) =
                    model.enhancer.enhance_values(&model.store, &batch, &model.schedule)?;
                (z0, tv[0])
            }
        };
        let z0 = z0
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<Ix3>()
            .expect("patch latent is [4, h, w]");
        enhanced.push(z0);
        ts.push(t);
    }
    let merged = merge_patches(&enhanced, &grid)?;
    let map = TimeStepMap::new(grid, ts, cfg.t_max)?;
    Ok((merged, map))
}

/// A restored image plus the time-step map its patches used.
pub struct Restored<S: Scalar> {
    /// Eight-bit restored image at the source resolution.
    pub image: Image<S>,
    pub map: TimeStepMap,
}

/// Restores the stored PNG back to full resolution: inverse rescaling, tiled
/// enhancement, latent decode.
pub fn rescale_up<S: Scalar>(model: &Model<S>, lr_png: &Path) -> Result<Restored<S>> {
    let (y, texts) = load_png_rgb8::<S>(lr_png)?;
    let meta = read_meta(lr_png, &texts)?;
    check_meta(model, &meta, &y)?;
    let z_hat = model.dfrm.upscale(&model.store, &y)?;
    let (z0, map) = enhance_tiled(model, &z_hat)?;
    let image = model.decode_latent(&z0)?.to_eight_bit();
    Ok(Restored { image, map })
}

/// Down then up through the filesystem. Writes the compact PNG (plus
/// sidecar) and the restored PNG; returns both reports.
pub fn roundtrip_files<S: Scalar>(
    model: &Model<S>,
    x: &Image<S>,
    lr_png: &Path,
    out_png: &Path,
) -> Result<(DownReport, Restored<S>)> {
    let down = rescale_down(model, x, lr_png)?;
    let up = rescale_up(model, lr_png)?;
    save_png_rgb8(out_png, &up.image)?;
    Ok((down, up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::{CorpusConfig, RunConfig};
    use crate::pipeline::corpus::desk_image;

    fn small_model(seed: u64) -> Model<f64> {
        let mut cfg = RunConfig {
            factor: 8,
            t_max: 50,
            t0: 49,
            seed,
            corpus: CorpusConfig { images: 2, size: 64 },
            ..RunConfig::default()
        };
        cfg.stages.codec_crop = 32;
        cfg.stages.stage1_crop = 32;
        cfg.stages.stage2_crop = 32;
        cfg.stages.stage3_crop = 32;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn roundtrip_restores_dimensions_and_writes_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let lr = dir.path().join("small.png");
        let out = dir.path().join("restored.png");
        let model = small_model(3);
        let x = desk_image::<f64>(64, 5);

        let (down, up) = roundtrip_files(&model, &x, &lr, &out).unwrap();
        assert_eq!(down.meta.factor, 8);
        assert_eq!(down.meta.src_height, 64);
        assert!(down.bpp > 0.0);
        assert!(sidecar_path(&lr).exists());
        assert_eq!(up.image.height(), 64);
        assert_eq!(up.image.width(), 64);
        assert!(out.exists());

        let (stored, _) = load_png_rgb8::<f64>(&lr).unwrap();
        assert_eq!(stored.height(), 8);
        assert_eq!(stored.width(), 8);
    }

    #[test]
    fn restoration_rejects_a_foreign_model() {
        let dir = tempfile::tempdir().unwrap();
        let lr = dir.path().join("small.png");
        let writer = small_model(3);
        let reader = small_model(4);
        let x = desk_image::<f64>(64, 5);
        rescale_down(&writer, &x, &lr).unwrap();
        match rescale_up(&reader, &lr) {
            Err(Error::Config(msg)) => assert!(msg.contains("model"), "got: {msg}"),
            other => panic!("expected a config error, got {:?}", other.map(|r| r.map.mean())),
        }
    }

    #[test]
    fn metadata_survives_text_chunk_stripping_via_the_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let lr = dir.path().join("small.png");
        let model = small_model(3);
        let x = desk_image::<f64>(64, 5);
        rescale_down(&model, &x, &lr).unwrap();

        // Rewrite the PNG without its text chunk; the sidecar still names it.
        let (stored, _) = load_png_rgb8::<f64>(&lr).unwrap();
        save_png_rgb8(&lr, &stored).unwrap();
        assert!(rescale_up(&model, &lr).is_ok());

        std::fs::remove_file(sidecar_path(&lr)).unwrap();
        match rescale_up(&model, &lr) {
            Err(Error::Format(msg)) => assert!(msg.contains("metadata"), "got: {msg}"),
            other => panic!("expected a format error, got {:?}", other.map(|r| r.map.mean())),
        }
    }

    #[test]
    fn single_covering_patch_matches_the_untiled_path_bitwise() {
        let model = small_model(3);
        let x = desk_image::<f64>(64, 5);
        let z = model.encode_image(&x).unwrap();
        let (y, _) = model.dfrm.downscale(&model.store, &x, &z).unwrap();
        let z_hat = model.dfrm.upscale(&model.store, &y).unwrap();

        // Default patch size (96) exceeds the 8-cell latent: one patch.
        let (tiled, map) = enhance_tiled(&model, &z_hat).unwrap();
        assert_eq!(map.values().len(), 1);

        let batch = z_hat.clone().insert_axis(Axis(0)).into_dyn();
        let (direct, ts) =
            model.enhancer.enhance_values(&model.store, &batch, &model.schedule).unwrap();
        let direct = direct.index_axis(Axis(0), 0).to_owned();
        assert_eq!(tiled.into_dyn(), direct);
        assert_eq!(map.values()[0], ts[0]);
    }

    #[test]
    fn overlapping_tiles_blend_and_map_the_grid() {
        let mut model = small_model(3);
        model.config.patch_size = 4;
        model.config.stride = 2;
        let x = desk_image::<f64>(64, 5);
        let z = model.encode_image(&x).unwrap();
        let (tiled, map) = enhance_tiled(&model, &z).unwrap();
        assert_eq!(tiled.dim(), z.dim());
        assert!(tiled.iter().all(|v| v.is_finite()));
        // 8-cell sides with patch 4 and stride 2 give offsets 0, 2, 4.
        assert_eq!(map.values().len(), 9);
        let t_max = model.config.t_max as f64;
        assert!(map.values().iter().all(|&t| (0.0..=t_max - 1.0).contains(&t)));
    }

    #[test]
    fn fixed_timestep_overrides_the_predictor() {
        let mut model = small_model(3);
        model.config.fixed_timestep = Some(7.0);
        let x = desk_image::<f64>(64, 5);
        let z = model.encode_image(&x).unwrap();
        let (_, map) = enhance_tiled(&model, &z).unwrap();
        assert!(map.values().iter().all(|&t| t == 7.0));
    }

    #[test]
    fn two_roundtrips_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(3);
        let x = desk_image::<f64>(64, 5);
        let (lr1, out1) = (dir.path().join("a.png"), dir.path().join("a_out.png"));
        let (lr2, out2) = (dir.path().join("b.png"), dir.path().join("b_out.png"));
        roundtrip_files(&model, &x, &lr1, &out1).unwrap();
        roundtrip_files(&model, &x, &lr2, &out2).unwrap();
        assert_eq!(std::fs::read(&lr1).unwrap(), std::fs::read(&lr2).unwrap());
        assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    }
}

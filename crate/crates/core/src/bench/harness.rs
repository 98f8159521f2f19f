//! Batch evaluation: per-image metric tables, a bicubic baseline, a JPEG
//! rate-distortion sweep with an SVG plot, and config ablations.

use std::path::Path;

use crate::err::{Error, Result};
use crate::image::{
    bicubic_resize, decode_image_rgb8, encode_jpeg_to_vec, load_png_rgb8, save_png_rgb8, Factor,
    Image,
};
use crate::pipeline::{roundtrip_files, train_full, Model, RunConfig, TrainOptions};
use crate::scalar::Scalar;

use super::metrics::{bpp_of_file, psnr, ssim};

const CSV_NOTE: &str = "# psnr_db: all-channel PSNR against the source, peak 255; ssim: BT.601 \
                        luma SSIM, 11x11 Gaussian window; bpp: stored bits per source pixel\n";

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bpp: f64,
}

/// Metric rows plus their arithmetic means.
#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<MetricRow>,
}

impl BenchReport {
    fn mean_of(&self, f: impl Fn(&MetricRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|r| r.psnr_db)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|r| r.ssim)
    }

    pub fn mean_bpp(&self) -> f64 {
        self.mean_of(|r| r.bpp)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(CSV_NOTE);
        out.push_str("label,psnr_db,ssim,bpp\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.psnr_db, r.ssim, r.bpp));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_bpp()
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Attaches stable labels to a corpus, in order.
pub fn labeled<S: Scalar>(images: &[Image<S>], prefix: &str) -> Vec<(String, Image<S>)> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| (format!("{prefix}{i:02}"), im.clone()))
        .collect()
}

/// Round-trips every image through the model via files under `work` and
/// measures the restoration against the source.
pub fn eval_model<S: Scalar>(
    model: &Model<S>,
    images: &[(String, Image<S>)],
    work: &Path,
) -> Result<BenchReport> {
    std::fs::create_dir_all(work)?;
    let mut rows = Vec::with_capacity(images.len());
    for (label, x) in images {
        let lr = work.join(format!("{label}_lr.png"));
        let out = work.join(format!("{label}_out.png"));
        let (down, up) = roundtrip_files(model, x, &lr, &out)?;
        rows.push(MetricRow {
            label: label.clone(),
            psnr_db: psnr(&up.image, x)?.db,
            ssim: ssim(&up.image, x)?,
            bpp: down.bpp,
        });
    }
    Ok(BenchReport { rows })
}

/// Bicubic baseline at the same factor: downscale, store as 8-bit PNG,
/// reload, upscale bicubically.
pub fn eval_bicubic<S: Scalar>(
    images: &[(String, Image<S>)],
    factor: usize,
    work: &Path,
) -> Result<BenchReport> {
    std::fs::create_dir_all(work)?;
    let down = Factor::down(factor as u32)?;
    let up = Factor::up(factor as u32)?;
    let mut rows = Vec::with_capacity(images.len());
    for (label, x) in images {
        let path = work.join(format!("{label}_bicubic.png"));
        let lr = bicubic_resize(x, down)?.to_eight_bit();
        save_png_rgb8(&path, &lr)?;
        let (stored, _) = load_png_rgb8::<S>(&path)?;
        let restored = bicubic_resize(&stored, up)?;
        rows.push(MetricRow {
            label: label.clone(),
            psnr_db: psnr(&restored, x)?.db,
            ssim: ssim(&restored, x)?,
            bpp: bpp_of_file(&path, x.height(), x.width())?,
        });
    }
    Ok(BenchReport { rows })
}

/// One JPEG encoding of one image.
#[derive(Debug, Clone)]
pub struct RdPoint {
    pub label: String,
    pub quality: u8,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Encodes every image at every quality, in memory, and measures the decode.
pub fn rd_sweep_jpeg<S: Scalar>(
    images: &[(String, Image<S>)],
    qualities: &[u8],
) -> Result<Vec<RdPoint>> {
    if images.is_empty() || qualities.is_empty() {
        return Err(Error::invalid("rate-distortion sweep needs images and qualities"));
    }
    let mut points = Vec::with_capacity(images.len() * qualities.len());
    for (label, x) in images {
        let x8 = x.to_eight_bit();
        let pixels = (x.height() * x.width()) as f64;
        for &q in qualities {
            let bytes = encode_jpeg_to_vec(&x8, q)?;
            let decoded = decode_image_rgb8::<S>(&bytes)?;
            points.push(RdPoint {
                label: label.clone(),
                quality: q,
                bpp: bytes.len() as f64 * 8.0 / pixels,
                psnr_db: psnr(&decoded, x)?.db,
                ssim: ssim(&decoded, x)?,
            });
        }
    }
    Ok(points)
}

pub fn rd_csv_string(points: &[RdPoint]) -> String {
    let mut out = String::from(CSV_NOTE);
    out.push_str("label,quality,bpp,psnr_db,ssim\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.label, p.quality, p.bpp, p.psnr_db, p.ssim
        ));
    }
    out
}

/// Mean `(bpp, psnr)` per quality, ordered by quality.
pub fn rd_curve(points: &[RdPoint]) -> Vec<(u8, f64, f64)> {
    let mut qualities: Vec<u8> = points.iter().map(|p| p.quality).collect();
    qualities.sort_unstable();
    qualities.dedup();
    qualities
        .into_iter()
        .map(|q| {
            let sel: Vec<&RdPoint> = points.iter().filter(|p| p.quality == q).collect();
            let n = sel.len() as f64;
            let bpp = sel.iter().map(|p| p.bpp).sum::<f64>() / n;
            let db = sel.iter().map(|p| p.psnr_db).sum::<f64>() / n;
            (q, bpp, db)
        })
        .collect()
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders the JPEG curve, and optionally one labeled model point, as a
/// self-contained SVG rate-distortion plot.
pub fn rd_plot_svg(points: &[RdPoint], model: Option<(f64, f64, &str)>) -> String {
    let curve = rd_curve(points);
    let (w, h) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 28.0, 30.0, 52.0);

    let mut xs: Vec<f64> = curve.iter().map(|&(_, b, _)| b).collect();
    let mut ys: Vec<f64> = curve.iter().map(|&(_, _, d)| d).collect();
    if let Some((b, d, _)) = model {
        xs.push(b);
        ys.push(d);
    }
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo).abs()).max(1e-6) * 0.08;
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |b: f64| ml + (b - x0) / (x1 - x0) * (w - ml - mr);
    let py = |d: f64| h - mb - (d - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // Axes with five ticks each.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let (tx, ty) = (px(fx), py(fy));
        svg.push_str(&format!(
            "<line x1=\"{tx}\" y1=\"{}\" x2=\"{tx}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{tx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            h - mb,
            h - mb + 5.0,
            h - mb + 20.0,
            fmt2(fx)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ty}\" x2=\"{ml}\" y2=\"{ty}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            ml - 5.0,
            ml - 9.0,
            ty + 4.0,
            fmt2(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">bits per pixel</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">PSNR (dB)</text>\n",
        ml + (w - ml - mr) / 2.0,
        h - 12.0,
        mt + (h - mt - mb) / 2.0,
        mt + (h - mt - mb) / 2.0
    ));
    // JPEG curve.
    let path: Vec<String> =
        curve.iter().map(|&(_, b, d)| format!("{},{}", px(b), py(d))).collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
        path.join(" ")
    ));
    for &(q, b, d) in &curve {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"#1f77b4\"/>\n\
             <text x=\"{}\" y=\"{}\">q{q}</text>\n",
            px(b),
            py(d),
            px(b) + 6.0,
            py(d) - 6.0
        ));
    }
    // Model point.
    if let Some((b, d, label)) = model {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"#d62728\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"#d62728\">{label}</text>\n",
            px(b),
            py(d),
            px(b) + 8.0,
            py(d) + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the sweep CSV and SVG next to each other.
pub fn write_rd_artifacts(
    points: &[RdPoint],
    model: Option<(f64, f64, &str)>,
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    std::fs::write(csv_path, rd_csv_string(points))?;
    std::fs::write(svg_path, rd_plot_svg(points, model))?;
    Ok(())
}

/// One ablation variant's scores.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub name: String,
    /// Architecture changes retrain from scratch; inference-time variants
    /// reuse the baseline weights.
    pub retrained: bool,
    pub report: BenchReport,
}

pub fn ablation_csv_string(outcomes: &[AblationOutcome]) -> String {
    let mut out = String::from(CSV_NOTE);
    out.push_str("variant,retrained,psnr_db,ssim,bpp\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            o.name,
            o.retrained,
            o.report.mean_psnr(),
            o.report.mean_ssim(),
            o.report.mean_bpp()
        ));
    }
    out
}

fn even_at_least(v: usize, floor: usize) -> usize {
    let v = v.max(floor);
    if v % 2 == 0 {
        v
    } else {
        v + 1
    }
}

/// Trains a baseline on the corpus and scores it against its variants:
/// preset time-steps 1 and `t_max - 1`, a halved and doubled patch size
/// (inference-time, shared weights), and retrained models without the
/// invertible converter and without pixel guidance.
pub fn run_ablation<S: Scalar>(
    base: &RunConfig,
    images: &[(String, Image<S>)],
    work: &Path,
    verbose: bool,
) -> Result<Vec<AblationOutcome>> {
    let plain: Vec<Image<S>> = images.iter().map(|(_, im)| im.clone()).collect();
    let opts = TrainOptions { out_dir: None, verbose };
    let note = |name: &str| {
        if verbose {
            eprintln!("[ablation] {name}");
        }
    };

    note("baseline");
    let mut model = Model::<S>::new(base.clone())?;
    train_full(&mut model, &plain, &opts)?;
    let mut out = vec![AblationOutcome {
        name: "baseline".to_string(),
        retrained: true,
        report: eval_model(&model, images, &work.join("baseline"))?,
    }];

    for t in [1, base.t_max - 1] {
        let name = format!("fixed_t{t}");
        note(&name);
        model.config.fixed_timestep = Some(t as f64);
        let report = eval_model(&model, images, &work.join(&name))?;
        model.config.fixed_timestep = None;
        out.push(AblationOutcome { name, retrained: false, report });
    }

    let (p0, s0) = (base.patch_size, base.stride);
    for (suffix, patch) in [("half", even_at_least(p0 / 2, 4)), ("double", even_at_least(p0 * 2, 4))] {
        let name = format!("patch_{suffix}");
        note(&name);
        model.config.patch_size = patch;
        model.config.stride = s0.min(patch).max(1);
        let report = eval_model(&model, images, &work.join(&name))?;
        model.config.patch_size = p0;
        model.config.stride = s0;
        out.push(AblationOutcome { name, retrained: false, report });
    }

    for (name, no_inn, no_guidance) in
        [("no_inn", true, false), ("no_guidance", false, true)]
    {
        note(name);
        let mut cfg = base.clone();
        cfg.use_inn = !no_inn;
        cfg.use_guidance = !no_guidance;
        let mut variant = Model::<S>::new(cfg)?;
        train_full(&mut variant, &plain, &opts)?;
        out.push(AblationOutcome {
            name: name.to_string(),
            retrained: true,
            report: eval_model(&variant, images, &work.join(name))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{desk_corpus, CorpusConfig};

    fn tiny_images(n: usize) -> Vec<(String, Image<f64>)> {
        labeled(&desk_corpus::<f64>(n, 64, 17), "desk")
    }

    fn tiny_model() -> Model<f64> {
        let mut cfg = RunConfig {
            factor: 8,
            t_max: 40,
            t0: 39,
            seed: 5,
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
    fn report_aggregates_are_plain_means() {
        let rows = vec![
            MetricRow { label: "a".into(), psnr_db: 20.0, ssim: 0.5, bpp: 0.10 },
            MetricRow { label: "b".into(), psnr_db: 30.0, ssim: 0.9, bpp: 0.30 },
        ];
        let rep = BenchReport { rows };
        assert!((rep.mean_psnr() - 25.0).abs() < 1e-12);
        assert!((rep.mean_ssim() - 0.7).abs() < 1e-12);
        assert!((rep.mean_bpp() - 0.2).abs() < 1e-12);
        let csv = rep.to_csv_string();
        assert!(csv.starts_with("# "), "header note missing: {csv}");
        assert!(csv.contains("label,psnr_db,ssim,bpp"));
        assert!(csv.trim_end().ends_with(&format!("mean,25,{},{}", 0.7, 0.2)));
    }

    #[test]
    fn jpeg_sweep_rates_rise_with_quality() {
        let images = tiny_images(2);
        let qualities = [10u8, 50, 90];
        let points = rd_sweep_jpeg(&images, &qualities).unwrap();
        assert_eq!(points.len(), 6);
        for (label, _) in &images {
            let series: Vec<&RdPoint> = points.iter().filter(|p| &p.label == label).collect();
            for pair in series.windows(2) {
                assert!(
                    pair[1].bpp >= pair[0].bpp,
                    "{label}: bpp fell from q{} to q{}",
                    pair[0].quality,
                    pair[1].quality
                );
            }
        }
        let csv = rd_csv_string(&points);
        assert!(csv.contains("label,quality,bpp,psnr_db,ssim"));
        assert_eq!(csv.lines().count(), 2 + points.len());
    }

    #[test]
    fn rd_plot_draws_curve_and_model_point() {
        let images = tiny_images(1);
        let points = rd_sweep_jpeg(&images, &[20, 80]).unwrap();
        let svg = rd_plot_svg(&points, Some((0.05, 30.0, "ours")));
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains(">ours</text>"));
        assert!(svg.contains("q20"));
        let bare = rd_plot_svg(&points, None);
        assert!(!bare.contains("ours"));
    }

    #[test]
    fn untrained_model_and_bicubic_both_produce_finite_rows() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let images = tiny_images(2);
        let ours = eval_model(&model, &images, &dir.path().join("m")).unwrap();
        let base = eval_bicubic(&images, 8, &dir.path().join("b")).unwrap();
        for rep in [&ours, &base] {
            assert_eq!(rep.rows.len(), 2);
            for r in &rep.rows {
                assert!(r.psnr_db.is_finite() && r.ssim.is_finite() && r.bpp > 0.0, "{r:?}");
            }
        }
    }

    #[test]
    fn ablation_covers_every_variant_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_model().config;
        cfg.stages.codec_steps = 2;
        cfg.stages.denoiser_steps = 2;
        cfg.stages.stage1_steps = 2;
        cfg.stages.stage2_steps = 2;
        cfg.stages.stage3_steps = 2;
        let images = tiny_images(2);
        let outcomes = run_ablation(&cfg, &images, dir.path(), false).unwrap();
        let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(
            names,
            ["baseline", "fixed_t1", "fixed_t39", "patch_half", "patch_double", "no_inn", "no_guidance"]
        );
        for o in &outcomes {
            assert_eq!(o.report.rows.len(), 2, "{} rows", o.name);
            let expect_retrain = matches!(o.name.as_str(), "baseline" | "no_inn" | "no_guidance");
            assert_eq!(o.retrained, expect_retrain, "{}", o.name);
        }
        let csv = ablation_csv_string(&outcomes);
        assert!(csv.contains("variant,retrained"));
        assert!(csv.contains("no_guidance,true"));
    }
}

//! Quality metrics and benchmark reporting.

pub mod harness;
pub mod metrics;

pub use harness::{
    ablation_csv_string, eval_bicubic, eval_model, labeled, rd_csv_string, rd_curve,
    rd_plot_svg, rd_sweep_jpeg, run_ablation, write_rd_artifacts, AblationOutcome, BenchReport,
    MetricRow, RdPoint,
};
pub use metrics::{bpp_of_file, luma_255, psnr, ssim, Psnr, PSNR_CAP_DB, SSIM_WINDOW};

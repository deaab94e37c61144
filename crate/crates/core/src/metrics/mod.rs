//! Image quality, rate-distortion curves and Bjøntegaard deltas, plus the
//! statistics used to inspect trained models.

pub mod bd;
pub mod quality;
pub mod rd;
pub mod stats;

pub use bd::{bd_psnr, bd_quality, bd_rate, Cubic};
pub use quality::{db_convert, max_scales, mse, msssim, msssim_tape, psnr, psnr_from_mse, DB_CAP, MSSSIM_WEIGHTS};
pub use rd::{
    evaluate_image, fine_rates, gate_statistics, grid_rates, latent_histograms, rd_sweep, read_curves, table_rates, to_curve,
    write_curves, write_gate_statistics, GateStat, ImageResult, QualityKind, RdCurve, RdPoint, SweepPoint,
};
pub use stats::{ks_distance, pearson, ranks, spearman, Histogram};

//! Image-quality metrics and the synthetic dual-tracer phantom corpus.

pub mod corpus;
pub mod metrics;
pub mod phantom;
pub mod report;

pub use metrics::{cov, cr, nrmse, psnr, ssim, ssim_default, RegionMask};
pub use phantom::{corpus_seeds, gen_corpus, gen_phantom, PatternKind, PhantomPair, PhantomSpec};
pub use report::{evaluate_pair, fmt_value, MetricMeans, MetricsReport, MetricsRow, CSV_HEADER};

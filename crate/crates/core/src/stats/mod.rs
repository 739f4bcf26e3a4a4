//! Response statistics at initialization and survival bounds for rectified
//! layers.

mod bounds;
mod rectified;
mod response;

pub use bounds::{
    cantelli_bound, collapse_depth, evaluate, survival_lower_bound, BoundQuery, BoundReport, InputStats, LayerKind,
};
pub use rectified::{normal_cdf, normal_pdf, RectifiedGaussian};
pub use response::{response_stats_mc, InputDistribution, ResponseProbe, ResponseStats};

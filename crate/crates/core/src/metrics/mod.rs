//! Image-quality, segmentation and reader-study metrics.

mod fid;
mod quality;
mod segmentation;
mod survey;

pub use fid::{extract_features, fid, FeatureExtractor};
pub use quality::{psnr, ssim, PSNR_CAP_DB};
pub use segmentation::{iou_suite, SegMetrics};
pub use survey::{
    score_survey, survey_mean, ReaderResponse, ReaderScore, SurveyMean, Truth,
    DEFAULT_SURVEY_THRESHOLD,
};

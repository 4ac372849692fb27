//! Synthetic data, frame scheduling, metrics, file I/O and configuration.

pub mod config;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod window;

pub use config::Config;
pub use masks::{gen_masks, MaskKind};
pub use metrics::{psnr, ssim, PSNR_SENTINEL};
pub use pipeline::inpaint_clip;
pub use synth::{synth_clip, MotionSpec, MotionType, VideoClip};
pub use window::{sliding_window_schedule, FrameWindow, WindowConfig};

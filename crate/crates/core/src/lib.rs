pub mod geom;
pub mod image;
pub mod imgproc;
pub mod metrics;
pub mod ssim;
pub mod temporal;
pub mod pipeline;
pub mod synth;
pub mod wire;
pub mod service;

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod inpaint;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
    mod tensors_and_gradients {}
    #[doc = include_str!("../../../book/src/noise-schedules.md")]
    mod noise_schedules {}
    #[doc = include_str!("../../../book/src/denoisers.md")]
    mod denoisers {}
    #[doc = include_str!("../../../book/src/wavelets.md")]
    mod wavelets {}
    #[doc = include_str!("../../../book/src/latent-codec.md")]
    mod latent_codec {}
    #[doc = include_str!("../../../book/src/inpainting.md")]
    mod inpainting {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}

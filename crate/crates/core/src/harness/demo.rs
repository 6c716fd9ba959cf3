//! Image downsampling demo.

use std::path::Path;

use crate::data::{image_to_tensor, read_pnm, tensor_to_image, write_pnm, Image};
use crate::error::Result;
use crate::pooling::{stochastic_downsample, uniform_downsample};
use crate::sampling::{PoolGeom, RngStream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DemoMode {
    /// Top-left pixel of every `s x s` block.
    Uniform,
    /// Sorted random rows and columns per grid of side `g`.
    Stochastic { g: usize },
}

pub fn downsample_image(image: &Image, s: usize, mode: DemoMode, seed: u64) -> Result<Image> {
    let t = image_to_tensor(image);
    let z = match mode {
        DemoMode::Uniform => uniform_downsample(&t, s)?,
        DemoMode::Stochastic { g } => {
            // k = 1: the demo samples pixels directly, without max pooling.
            let geom = PoolGeom::new(1, s, g)?;
            geom.check_map(t.dims().h(), t.dims().w())?;
            stochastic_downsample(&t, &geom, &RngStream::new(seed, StreamKey::default()))?.0
        }
    };
    Ok(tensor_to_image(&z)?.0)
}

pub fn cmd_demo_downsample(input: &Path, output: &Path, s: usize, mode: DemoMode, seed: u64) -> Result<Image> {
    let image = read_pnm(input)?;
    let out = downsample_image(&image, s, mode, seed)?;
    write_pnm(&out, output)?;
    Ok(out)
}

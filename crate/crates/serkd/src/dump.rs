//! Writing a superpixel state to disk.

use std::path::{Path, PathBuf};

use serkd_core::superpixel::{hard_assignment, sample_superpixels, SuperpixelState, TokenGrid};
use serkd_core::tokenizer::{tokenize, TokenizerSpec};
use serkd_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::format::{encode_u32, write_bytes, write_tensor};

/// Patch tokens of `(B, H, W, 3)` images: the mean colour of each `P×P` patch.
pub fn patch_tokens(images: &Tensor, patch: usize) -> Result<TokenGrid> {
    Ok(tokenize(images, &TokenizerSpec::avg_pool((patch, patch)))?)
}

/// Accept `(H, W, 3)` or `(B, H, W, 3)`.
pub fn as_batch(images: Tensor) -> Result<Tensor> {
    match *images.shape() {
        [h, w, c] => Ok(images.reshape(&[1, h, w, c])?),
        [_, _, _, _] => Ok(images),
        _ => Err(HarnessError::Config(format!(
            "expected an (H,W,3) or (B,H,W,3) image tensor, got {:?}",
            images.shape()
        ))),
    }
}

/// Write `q.srkd`, `q_hat.srkd`, `s.srkd` and `assignment.srkd` into `dir`.
pub fn write_state(dir: &Path, state: &SuperpixelState) -> Result<Vec<PathBuf>> {
    let q = state
        .q
        .as_ref()
        .ok_or_else(|| HarnessError::Check("superpixel state has no association yet".into()))?;
    let q_hat = state.q_hat.as_ref().expect("set together with q");
    let (b, l) = (q.shape()[0], q.shape()[1]);
    let assignment = hard_assignment(q)?;
    let files = [
        dir.join("q.srkd"),
        dir.join("q_hat.srkd"),
        dir.join("s.srkd"),
        dir.join("assignment.srkd"),
    ];
    write_tensor(&files[0], q)?;
    write_tensor(&files[1], q_hat)?;
    write_tensor(&files[2], &state.s)?;
    write_bytes(&files[3], &encode_u32(&[b, l], &assignment)?)?;
    Ok(files.to_vec())
}

pub fn superpixels_of(
    tg: &TokenGrid,
    grid: (usize, usize),
    iterations: usize,
    kernel: serkd_core::superpixel::Kernel,
) -> Result<SuperpixelState> {
    Ok(sample_superpixels(tg, grid.0, grid.1, iterations, kernel)?)
}

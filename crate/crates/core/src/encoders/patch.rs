use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An RGB image with channel-last pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    /// `[H, W, 3]` row-major
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} pixels, got {}", height * width * 3, pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    /// Builds an image from 8-bit samples (`value / 255`).
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// 8-bit samples; exact inverse of [`ImageGrid::from_u8`].
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + ch]
    }
}

/// Patch grid `(H/P, W/P)`, or a contract error if the image does not tile.
pub fn patch_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::contract(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch, width / patch))
}

/// Splits an image into non-overlapping patches in raster order, `[N, P*P*3]`,
/// each patch flattened row by row, channel last.
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Tensor> {
    let (gh, gw) = patch_grid(image.height, image.width, patch)?;
    let dim = patch * patch * 3;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * image.width + px * patch;
                out.extend_from_slice(&image.pixels[row * 3..(row + patch) * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Reassembles an image from [`patchify`] output.
pub fn unpatchify(patches: &Tensor, grid: (usize, usize), patch: usize) -> Result<ImageGrid> {
    let (gh, gw) = grid;
    let dim = patch * patch * 3;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for grid {grid:?} and patch {patch}", patches.shape()),
        ));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut pixels = vec![0.0; h * w * 3];
    for py in 0..gh {
        for px in 0..gw {
            let src = patches.row(py * gw + px);
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                pixels[row * 3..(row + patch) * 3].copy_from_slice(&src[y * patch * 3..(y + 1) * patch * 3]);
            }
        }
    }
    ImageGrid::new(h, w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_counts() {
        let n = |s: usize, p: usize| patchify(&ImageGrid::zeros(s, s), p).unwrap().shape()[0];
        assert_eq!(n(192, 16), 144);
        assert_eq!(n(224, 16), 196);
        assert_eq!(n(64, 8), 64);
        assert_eq!(n(32, 16), 4);
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        let err = patchify(&ImageGrid::zeros(30, 32), 16).unwrap_err();
        assert!(err.to_string().contains("30x32"));
        assert!(err.to_string().contains("16x16"));
    }

    #[test]
    fn first_patch_layout() {
        let pixels: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64).collect();
        let img = ImageGrid::new(4, 4, pixels).unwrap();
        let p = patchify(&img, 2).unwrap();
        // top-left patch: pixels (0,0), (0,1), (1,0), (1,1)
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(gh in 1usize..5, gw in 1usize..5, p in 1usize..6, seed in any::<u64>()) {
            let (h, w) = (gh * p, gw * p);
            let pixels: Vec<f64> = (0..h * w * 3).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 999.0).collect();
            let img = ImageGrid::new(h, w, pixels).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), (gh, gw), p).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}

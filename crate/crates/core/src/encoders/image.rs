use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` image with pixels in `[0, 1]`, stored row-major (HWC),
/// viewed as a grid of square patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
    pixels: Vec<f64>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch_size: usize, pixels: Vec<f64>) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(Error::Validation(format!(
                "{height}x{width} image not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "expected {} pixel values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            patch_size,
            pixels,
        })
    }

    /// The all-zero placeholder image.
    pub fn black(height: usize, width: usize, channels: usize, patch_size: usize) -> Self {
        Self::new(height, width, channels, patch_size, vec![0.0; height * width * channels])
            .expect("valid geometry")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn patches_per_row(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        (self.height / self.patch_size) * self.patches_per_row()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Pixel-buffer indices covered by patch `id`, in patch-vector order.
    pub fn patch_indices(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        let (pr, pc) = (id / self.patches_per_row(), id % self.patches_per_row());
        let ps = self.patch_size;
        (0..ps).flat_map(move |r| {
            let y = pr * ps + r;
            (0..ps).flat_map(move |c| {
                let x = pc * ps + c;
                let base = (y * self.width + x) * self.channels;
                base..base + self.channels
            })
        })
    }

    /// Flattened patch vectors in raster order of patches.
    pub fn patchify(&self) -> Vec<Vec<f64>> {
        (0..self.patch_count())
            .map(|id| self.patch_indices(id).map(|i| self.pixels[i]).collect())
            .collect()
    }

    /// Inverse of [`patchify`](Self::patchify) for the same geometry.
    pub fn unpatchify(&self, patches: &[Vec<f64>]) -> Result<Self> {
        if patches.len() != self.patch_count() || patches.iter().any(|p| p.len() != self.patch_dim()) {
            return Err(Error::Validation("patch list does not match grid geometry".into()));
        }
        let mut pixels = vec![0.0; self.pixels.len()];
        for (id, patch) in patches.iter().enumerate() {
            for (i, v) in self.patch_indices(id).zip(patch) {
                pixels[i] = *v;
            }
        }
        Self::new(self.height, self.width, self.channels, self.patch_size, pixels)
    }

    /// Copy with the listed patches set to zero.
    pub fn with_patches_zeroed(&self, ids: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for &id in ids {
            if id >= self.patch_count() {
                return Err(Error::Validation(format!("patch id {id} out of range")));
            }
            for i in self.patch_indices(id).collect::<Vec<_>>() {
                out.pixels[i] = 0.0;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn geometry_checks() {
        assert!(PatchGrid::new(30, 32, 3, 8, vec![0.0; 30 * 32 * 3]).is_err());
        assert!(PatchGrid::new(32, 32, 3, 8, vec![0.0; 10]).is_err());
        assert!(PatchGrid::new(8, 8, 1, 8, vec![1.5; 64]).is_err());
        let g = PatchGrid::black(32, 32, 3, 8);
        assert_eq!(g.patch_count(), 16);
        assert_eq!(g.patch_dim(), 192);
    }

    #[test]
    fn patch_zero_is_top_left_block() {
        let pixels: Vec<f64> = (0..16 * 16).map(|i| i as f64 / 256.0).collect();
        let g = PatchGrid::new(16, 16, 1, 8, pixels).unwrap();
        let p = g.patchify();
        assert_eq!(p[0][0], 0.0);
        assert_eq!(p[0][8], 16.0 / 256.0);
        assert_eq!(p[1][0], 8.0 / 256.0);
        assert_eq!(p[2][0], 128.0 / 256.0);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(vals in proptest::collection::vec(0.0f64..=1.0, 32 * 32 * 3)) {
            let g = PatchGrid::new(32, 32, 3, 8, vals).unwrap();
            let back = g.unpatchify(&g.patchify()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}

//! Row-major tiling of samples.

use mfds_core::sample::SamplePair;
use mfds_core::Tensor;

use crate::error::{DataError, Result};

/// Top-left offsets of tiles of `tile` pixels with the given overlap along
/// one axis; a trailing partial tile is dropped.
pub fn offsets(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let stride = tile - overlap;
    (0..).map(|i| i * stride).take_while(|&o| o + tile <= extent).collect()
}

pub fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let [b, c, _, _] = t.shape();
    Tensor::from_fn([b, c, h, w], |[n, ch, y, x]| t.at(n, ch, y0 + y, x0 + x))
}

/// Cuts every sample into `tile x tile` pieces. Tile ids are
/// `{source}_r{row}_c{col}`.
pub fn crop_tiles(samples: &[SamplePair], tile: usize, overlap: usize) -> Result<Vec<SamplePair>> {
    if tile == 0 || overlap >= tile {
        return Err(DataError::Config(format!("need 0 <= overlap < tile, got tile {tile} overlap {overlap}")));
    }
    let mut out = Vec::new();
    for s in samples {
        let (h, w) = (s.height(), s.width());
        if tile > h.min(w) {
            return Err(DataError::Config(format!("{}: tile {tile} exceeds {h}x{w}", s.id)));
        }
        for (r, &y) in offsets(h, tile, overlap).iter().enumerate() {
            for (c, &x) in offsets(w, tile, overlap).iter().enumerate() {
                out.push(SamplePair::new(
                    format!("{}_r{r}_c{c}", s.id),
                    crop(&s.image_a, y, x, tile, tile),
                    crop(&s.image_b, y, x, tile, tile),
                    crop(&s.gt, y, x, tile, tile),
                )?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_drop_partial_tiles() {
        assert_eq!(offsets(1024, 256, 0), vec![0, 256, 512, 768]);
        assert_eq!(offsets(300, 256, 0), vec![0]);
        assert_eq!(offsets(512, 256, 128), vec![0, 128, 256]);
    }
}

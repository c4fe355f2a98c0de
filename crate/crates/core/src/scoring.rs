//! The "image -> score vector" interface that lets curation and evaluation
//! run against trained ensembles, stubs, or any other backbone.

use std::path::Path;

use ndarray::Array2;

use crate::error::Result;
use crate::image::Image;

/// Fixed work unit for parallel scoring; results never depend on worker count.
pub const SCORE_CHUNK: usize = 64;

/// Multi-class scorer: one score vector per image, in taxonomy order.
pub trait ImageScorer: Sync {
    fn num_outputs(&self) -> usize;

    /// `(width, height)` the scorer expects; images are resized to it on load.
    fn image_size(&self) -> Option<(usize, usize)> {
        None
    }

    /// Row `i` scores `images[i]`.
    fn score_images(&self, images: &[Image]) -> Result<Array2<f64>>;
}

/// Binary scorer giving P(in-domain) per image.
pub trait DomainScorer: Sync {
    fn image_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn in_domain(&self, images: &[Image]) -> Result<Vec<f64>>;
}

/// Constant domain score, handy as a pass-through.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDomainScorer(pub f64);

impl DomainScorer for ConstantDomainScorer {
    fn in_domain(&self, images: &[Image]) -> Result<Vec<f64>> {
        Ok(vec![self.0; images.len()])
    }
}

/// Load an image for a scorer, resizing when it has a fixed input size.
pub fn load_for(path: &Path, size: Option<(usize, usize)>) -> Result<Image> {
    match size {
        Some((w, h)) => Image::load_sized(path, w, h),
        None => Image::load_png(path),
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Map `f` over fixed-size chunks of `items` (in parallel when enabled) and
/// concatenate the results in input order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<Vec<R>> + Sync,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<R>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(|c| f(c)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<R>>> = chunks.iter().map(|c| f(c)).collect();
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0 / 6.0; 6]), 0);
        assert_eq!(argmax(&[0.0, -1.0, 3.0]), 2);
    }

    #[test]
    fn map_chunks_keeps_order() {
        let items: Vec<usize> = (0..200).collect();
        let out = map_chunks(&items, 7, |c| Ok(c.iter().map(|v| v * 2).collect())).unwrap();
        assert_eq!(out, items.iter().map(|v| v * 2).collect::<Vec<_>>());
    }

    #[test]
    fn map_chunks_propagates_errors() {
        let items = [1, 2, 3];
        let r: Result<Vec<i32>> = map_chunks(&items, 1, |c| {
            if c[0] == 2 {
                Err(crate::Error::data("boom"))
            } else {
                Ok(c.to_vec())
            }
        });
        assert!(r.is_err());
    }
}

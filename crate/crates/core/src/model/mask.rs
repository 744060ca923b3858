//! Gradient-attention occlusion masks.
//!
//! The block-selection procedure repeatedly takes the most salient pixel of
//! an input-gradient magnitude map, records an occlusion square centered
//! there, and suppresses a window around it so the remaining blocks spread
//! over distinct regions rather than piling onto one peak.

use ndarray::Array2;

use crate::face::FaceImage;
use crate::model::{IdentificationModel, ModelError};

/// Occlusion fill: mid-gray, neutral under the [0,1] pixel convention.
pub const DEFAULT_FILL: f64 = 0.5;

/// Block side used when none is given: an eighth of the image side.
pub fn default_block_size(side: usize) -> usize {
    (side / 8).max(1)
}

/// One occluded square, stored by its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBlock {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// A set of occlusion blocks plus the value painted into them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    blocks: Vec<MaskBlock>,
    fill_value: f64,
}

impl AttentionMask {
    pub fn new(blocks: Vec<MaskBlock>, fill_value: f64) -> Self {
        Self { blocks, fill_value }
    }

    pub fn empty() -> Self {
        Self { blocks: Vec::new(), fill_value: DEFAULT_FILL }
    }

    pub fn blocks(&self) -> &[MaskBlock] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn fill_value(&self) -> f64 {
        self.fill_value
    }
}

/// Selects `n_blocks` occlusion squares from a saliency map. Ties break
/// toward the earliest position in row-major order; after each selection a
/// window of side `2*block_size + 1` centered on the peak is suppressed.
pub(crate) fn select_blocks(
    saliency: &Array2<f64>,
    n_blocks: usize,
    block_size: usize,
) -> Vec<MaskBlock> {
    let (h, w) = saliency.dim();
    assert!(block_size >= 1 && block_size <= h.min(w), "block size out of range");
    let mut map = saliency.clone();
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut best: Option<(usize, usize)> = None;
        let mut best_val = f64::NEG_INFINITY;
        for r in 0..h {
            for c in 0..w {
                let v = map[[r, c]];
                if v > best_val {
                    best_val = v;
                    best = Some((r, c));
                }
            }
        }
        let Some((pr, pc)) = best else { break };
        if best_val == f64::NEG_INFINITY {
            break; // everything suppressed; fewer blocks than requested
        }
        let half = block_size / 2;
        let row = pr.saturating_sub(half).min(h - block_size);
        let col = pc.saturating_sub(half).min(w - block_size);
        blocks.push(MaskBlock { row, col, size: block_size });
        // suppression window centered on the selected peak
        let r0 = pr.saturating_sub(block_size);
        let r1 = (pr + block_size + 1).min(h);
        let c0 = pc.saturating_sub(block_size);
        let c1 = (pc + block_size + 1).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                map[[r, c]] = f64::NEG_INFINITY;
            }
        }
    }
    blocks
}

/// Builds the attention mask for an image from the gradient of the labeled
/// identity's logit, channel-summed and taken in magnitude.
pub fn attention_mask_from_gradients(
    model: &IdentificationModel,
    image: &FaceImage,
    label: usize,
    n_blocks: usize,
    block_size: usize,
) -> Result<AttentionMask, ModelError> {
    let grad = model.input_grad_of_logit(image, label)?;
    let (h, w, c) = grad.dim();
    let mut saliency = Array2::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += grad[[r, col, ch]].abs();
            }
            saliency[[r, col]] = acc;
        }
    }
    Ok(AttentionMask::new(select_blocks(&saliency, n_blocks, block_size), DEFAULT_FILL))
}

/// Paints every masked block with the fill value; other pixels unchanged.
pub fn apply_mask(image: &FaceImage, mask: &AttentionMask) -> FaceImage {
    let mut pixels = image.pixels().clone();
    let (h, w, c) = pixels.dim();
    for block in mask.blocks() {
        let r1 = (block.row + block.size).min(h);
        let c1 = (block.col + block.size).min(w);
        for r in block.row..r1 {
            for col in block.col..c1 {
                for ch in 0..c {
                    pixels[[r, col, ch]] = mask.fill_value();
                }
            }
        }
    }
    FaceImage::from_clamped(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Brute-force reference: same contract as `select_blocks`, written as a
    /// direct scan over candidate positions kept in a boolean grid.
    fn oracle_select(saliency: &Array2<f64>, n_blocks: usize, block_size: usize) -> Vec<(usize, usize)> {
        let (h, w) = saliency.dim();
        let mut alive = vec![vec![true; w]; h];
        let mut picks = Vec::new();
        for _ in 0..n_blocks {
            let mut best: Option<((usize, usize), f64)> = None;
            for r in 0..h {
                for c in 0..w {
                    if !alive[r][c] {
                        continue;
                    }
                    if best.is_none() || saliency[[r, c]] > best.unwrap().1 {
                        best = Some(((r, c), saliency[[r, c]]));
                    }
                }
            }
            let Some(((pr, pc), _)) = best else { break };
            picks.push((pr, pc));
            for r in pr.saturating_sub(block_size)..(pr + block_size + 1).min(h) {
                for c in pc.saturating_sub(block_size)..(pc + block_size + 1).min(w) {
                    alive[r][c] = false;
                }
            }
        }
        picks
    }

    #[test]
    fn zero_map_walks_row_major_under_suppression() {
        let map = Array2::zeros((16, 16));
        let blocks = select_blocks(&map, 4, 2);
        let picks = oracle_select(&map, 4, 2);
        assert_eq!(blocks.len(), 4);
        // First peak is (0,0); later peaks follow row-major order among
        // non-suppressed positions.
        assert_eq!(picks[0], (0, 0));
        for (block, (pr, pc)) in blocks.iter().zip(&picks) {
            let half = 1; // block_size 2 / 2
            assert_eq!(block.row, pr.saturating_sub(half).min(14));
            assert_eq!(block.col, pc.saturating_sub(half).min(14));
        }
    }

    #[test]
    fn single_peak_centers_block() {
        let mut map = Array2::zeros((16, 16));
        map[[9, 5]] = 3.0;
        let blocks = select_blocks(&map, 1, 4);
        assert_eq!(blocks.len(), 1);
        assert_eq!((blocks[0].row, blocks[0].col), (7, 3));
    }

    #[test]
    fn ten_separated_peaks_are_all_covered() {
        // Peaks on a coarse lattice, strictly decreasing magnitude.
        let mut map = Array2::zeros((64, 64));
        let mut peaks = Vec::new();
        for i in 0..10usize {
            let r = 6 + (i / 4) * 20;
            let c = 6 + (i % 4) * 16;
            map[[r, c]] = 100.0 - i as f64;
            peaks.push((r, c));
        }
        let blocks = select_blocks(&map, 10, 8);
        let picks = oracle_select(&map, 10, 8);
        assert_eq!(blocks.len(), 10);
        assert_eq!(picks, peaks, "oracle should find the planted peaks in order");
        for (block, (pr, pc)) in blocks.iter().zip(&picks) {
            assert!(
                *pr >= block.row && *pr < block.row + 8 && *pc >= block.col && *pc < block.col + 8,
                "peak ({pr},{pc}) escaped block at ({},{})",
                block.row,
                block.col
            );
        }
    }

    #[test]
    fn selection_matches_oracle_on_random_maps() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let map = Array2::from_shape_simple_fn((24, 24), || rng.random_range(0.0..10.0));
            let blocks = select_blocks(&map, 6, 4);
            let picks = oracle_select(&map, 6, 4);
            assert_eq!(blocks.len(), picks.len());
            for (block, (pr, pc)) in blocks.iter().zip(&picks) {
                let half = 2;
                assert_eq!(block.row, pr.saturating_sub(half).min(20));
                assert_eq!(block.col, pc.saturating_sub(half).min(20));
            }
        }
    }

    #[test]
    fn suppression_keeps_centers_apart() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let map = Array2::from_shape_simple_fn((32, 32), || rng.random_range(0.0..1.0));
        let block_size = 4;
        let picks = oracle_select(&map, 8, block_size);
        for i in 0..picks.len() {
            for j in (i + 1)..picks.len() {
                let dr = picks[i].0.abs_diff(picks[j].0);
                let dc = picks[i].1.abs_diff(picks[j].1);
                assert!(
                    dr.max(dc) > block_size,
                    "peaks {:?} and {:?} within suppression radius",
                    picks[i],
                    picks[j]
                );
            }
        }
    }

    #[test]
    fn apply_mask_edits_exact_pixel_count() {
        let img = FaceImage::constant(16, 16, 3, 0.2);
        let mask = AttentionMask::new(vec![MaskBlock { row: 3, col: 5, size: 4 }], 0.5);
        let masked = apply_mask(&img, &mask);
        let mut changed = 0;
        for (idx, (&a, &b)) in img.pixels().iter().zip(masked.pixels().iter()).enumerate() {
            if a != b {
                changed += 1;
                let _ = idx;
            }
        }
        assert_eq!(changed, 16 * 3);
    }

    #[test]
    fn empty_mask_is_identity_and_full_mask_is_constant() {
        let img = FaceImage::constant(8, 8, 3, 0.3);
        assert_eq!(apply_mask(&img, &AttentionMask::empty()), img);
        let full = AttentionMask::new(vec![MaskBlock { row: 0, col: 0, size: 8 }], 0.5);
        let masked = apply_mask(&img, &full);
        assert!(masked.pixels().iter().all(|&v| v == 0.5));
    }
}

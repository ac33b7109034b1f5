/// A fixed sparse linear map between pixel grids: each output pixel of each
/// batch element is a weighted sum of at most four input pixels. Bilinear
/// backward warps are expressed this way so they can be recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResample {
    pub batch: usize,
    pub in_pixels: usize,
    pub out_height: usize,
    pub out_width: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl SparseResample {
    /// `taps` is indexed by `b * out_height * out_width + pixel`.
    pub fn new(
        batch: usize,
        in_pixels: usize,
        out_height: usize,
        out_width: usize,
        taps: Vec<[(u32, f64); 4]>,
    ) -> Self {
        assert_eq!(taps.len(), batch * out_height * out_width);
        SparseResample {
            batch,
            in_pixels,
            out_height,
            out_width,
            taps,
        }
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn taps_for(&self, b: usize, pixel: usize) -> &[(u32, f64); 4] {
        &self.taps[b * self.out_pixels() + pixel]
    }

    /// Concatenate per-image maps along the batch axis.
    pub fn stack(parts: &[SparseResample]) -> Self {
        let first = &parts[0];
        let mut taps = Vec::new();
        let mut batch = 0;
        for p in parts {
            assert_eq!(
                (p.in_pixels, p.out_height, p.out_width),
                (first.in_pixels, first.out_height, first.out_width)
            );
            taps.extend_from_slice(&p.taps);
            batch += p.batch;
        }
        SparseResample::new(batch, first.in_pixels, first.out_height, first.out_width, taps)
    }
}

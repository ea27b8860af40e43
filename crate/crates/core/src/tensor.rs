//! Dense `f32` feature maps and the GEMM / im2col kernels the detector is
//! built on.
//!
//! Feature maps are stored channel-major, `[C, N, H, W]`, so a convolution
//! over a whole batch is a single matrix product between the weight matrix
//! and the im2col buffer.

/// A batch of feature maps in `[channels, batch, height, width]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Builds a map from per-image `[C, H, W]` buffers.
    pub fn from_images(images: &[&[f32]], channels: usize, height: usize, width: usize) -> Self {
        let batch = images.len();
        let plane = height * width;
        let mut out = Self::zeros(channels, batch, height, width);
        for (n, img) in images.iter().enumerate() {
            assert_eq!(img.len(), channels * plane, "image buffer size mismatch");
            for c in 0..channels {
                let dst = (c * batch + n) * plane;
                out.data[dst..dst + plane].copy_from_slice(&img[c * plane..(c + 1) * plane]);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + n) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, n, y, x)]
    }

    /// The `[C, H, W]` feature map of image `n`.
    pub fn image(&self, n: usize) -> Vec<f32> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let start = (c * self.batch + n) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }

    /// Selects a subset of images (in the given order) into a new batch.
    pub fn select(&self, images: &[usize]) -> Self {
        let plane = self.plane();
        let mut out = Self::zeros(self.channels, images.len(), self.height, self.width);
        for c in 0..self.channels {
            for (dst_n, &src_n) in images.iter().enumerate() {
                let src = (c * self.batch + src_n) * plane;
                let dst = (c * images.len() + dst_n) * plane;
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    /// Concatenates batches with identical channel and spatial dimensions.
    pub fn concat_batch(parts: &[&FeatureMap]) -> Self {
        let first = parts.first().expect("concat of zero feature maps");
        let batch: usize = parts.iter().map(|p| p.batch).sum();
        let plane = first.plane();
        let mut out = Self::zeros(first.channels, batch, first.height, first.width);
        for c in 0..first.channels {
            let mut offset = 0;
            for p in parts {
                assert_eq!(
                    (p.channels, p.height, p.width),
                    (first.channels, first.height, first.width)
                );
                let src = c * p.batch * plane;
                let dst = (c * batch + offset) * plane;
                out.data[dst..dst + p.batch * plane]
                    .copy_from_slice(&p.data[src..src + p.batch * plane]);
                offset += p.batch;
            }
        }
        out
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Self {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Self::zeros(self.channels, self.batch, h, w);
        for cn in 0..self.channels * self.batch {
            let src = &self.data[cn * self.plane()..(cn + 1) * self.plane()];
            let dst = &mut out.data[cn * h * w..(cn + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / 2) * self.width + x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`FeatureMap::upsample2`]: sums each 2x2 block.
    pub fn downsample2_sum(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, self.batch, h, w);
        for cn in 0..self.channels * self.batch {
            let src = &self.data[cn * self.plane()..(cn + 1) * self.plane()];
            let dst = &mut out.data[cn * h * w..(cn + 1) * h * w];
            for y in 0..self.height {
                for x in 0..self.width {
                    dst[(y / 2) * w + x / 2] += src[y * self.width + x];
                }
            }
        }
        out
    }
}

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too small");
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this (row-major) matrix, without copying.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` with `out` row-major `[m, n]`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f32, out: &mut [f32]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(out.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index touched by the kernel
    // lies within the three slices; `out` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Unfolds `x` into a `[C*k*k, N*Ho*Wo]` matrix.
pub fn im2col(x: &FeatureMap, g: &ConvGeometry) -> Vec<f32> {
    let (ho, wo) = g.output_size(x.height, x.width);
    let cols = x.batch * ho * wo;
    let mut out = vec![0.0f32; g.patch_len() * cols];
    let pad = g.padding as isize;
    for c in 0..x.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..x.batch {
                    let src = &x.data[(c * x.batch + n) * x.plane()..][..x.plane()];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let base = (n * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                dst[base + ox] = src[iy as usize * x.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image batch.
pub fn col2im(
    cols: &[f32],
    g: &ConvGeometry,
    batch: usize,
    height: usize,
    width: usize,
) -> FeatureMap {
    let (ho, wo) = g.output_size(height, width);
    let ncols = batch * ho * wo;
    let mut out = FeatureMap::zeros(g.in_channels, batch, height, width);
    let pad = g.padding as isize;
    let plane = height * width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..batch {
                    let dst = &mut out.data[(c * batch + n) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let base = (n * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < width as isize {
                                dst[iy as usize * width + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect(); // 3x4
        let expect = naive_matmul(&a, &b, 2, 3, 4);
        let mut out = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-6);
        }
        // (b^T)^T a^T^T via explicit transposes: out^T = b^T a^T
        let mut out_t = vec![0.0; 8];
        gemm(MatRef::new(&b, 3, 4).t(), MatRef::new(&a, 2, 3).t(), 0.0, &mut out_t);
        for i in 0..2 {
            for j in 0..4 {
                assert!((out_t[j * 2 + i] - expect[i * 4 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let mut x = FeatureMap::zeros(2, 2, 5, 6);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32) - 5.0;
        }
        let cols = im2col(&x, &g);
        let y: Vec<f32> = (0..cols.len()).map(|i| ((i * 13 % 7) as f32) - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, &g, 2, 5, 6);
        let rhs: f64 = x
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn upsample_and_downsample_are_adjoint() {
        let mut x = FeatureMap::zeros(1, 1, 2, 2);
        x.data = vec![1.0, 2.0, 3.0, 4.0];
        let up = x.upsample2();
        assert_eq!(up.height, 4);
        assert_eq!(up.at(0, 0, 3, 3), 4.0);
        let down = up.downsample2_sum();
        assert_eq!(down.data, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn select_and_concat_round_trip() {
        let mut x = FeatureMap::zeros(2, 3, 1, 2);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let a = x.select(&[0]);
        let b = x.select(&[1, 2]);
        assert_eq!(FeatureMap::concat_batch(&[&a, &b]), x);
        assert_eq!(x.image(1), vec![2.0, 3.0, 8.0, 9.0]);
    }
}

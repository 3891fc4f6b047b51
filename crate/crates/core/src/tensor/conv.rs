use super::Scalar;
use crate::error::{Error, Result};

/// Geometry of a strided cross-correlation between a "wide" grid
/// (`channels × height × width`) and a "narrow" grid (`out_h × out_w`).
///
/// For `conv2d` the wide grid is the input; for `transpose_conv2d` it is the
/// output. Both ops share the same im2col/col2im pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output extent `floor((n + 2p - k) / s) + 1` of a forward convolution.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < kernel {
                return Err(Error::Config(format!(
                    "kernel {kernel} does not fit input extent {n} with padding {padding}"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: extent(height)?,
            out_w: extent(width)?,
        })
    }

    /// Geometry of a transposed convolution taking an `in_h × in_w` grid to
    /// `(in - 1)·s - 2p + k + output_padding`.
    pub fn transposed(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        if output_padding >= stride {
            return Err(Error::Config(format!(
                "output padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        let extent = |n: usize| -> Result<usize> {
            let full = (n - 1) * stride + kernel + output_padding;
            full.checked_sub(2 * padding)
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config("padding too large for transposed conv".into()))
        };
        let geom = ConvGeometry {
            channels,
            height: extent(in_h)?,
            width: extent(in_w)?,
            kernel,
            stride,
            padding,
            out_h: in_h,
            out_w: in_w,
        };
        debug_assert_eq!(
            ConvGeometry::forward(channels, geom.height, geom.width, kernel, stride, padding)
                .map(|g| (g.out_h, g.out_w))
                .ok(),
            Some((in_h, in_w))
        );
        Ok(geom)
    }

    pub fn wide_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn narrow_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `src` (`channels × height × width`) into a
    /// `patch_len × narrow_len` matrix.
    pub(crate) fn im2col<T: Scalar>(&self, src: &[T], col: &mut [T]) {
        let k = self.kernel;
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &src[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `col` back into `dst`.
    pub(crate) fn col2im<T: Scalar>(&self, col: &[T], dst: &mut [T]) {
        let k = self.kernel;
        let (oh, ow) = (self.out_h, self.out_w);
        let mut row = 0;
        for c in 0..self.channels {
            let plane =
                &mut dst[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let srcm = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst_row =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + srcm[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

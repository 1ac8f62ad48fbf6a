use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Forward,
    Transposed,
}

/// Spatial geometry of a square-kernel 2-D convolution.
///
/// Weights are always laid out `[C_out, C_in, K, K]`, also for transposed
/// convolutions, so that output-channel quantization uses axis 0 everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kind: ConvKind,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn forward(stride: usize, padding: usize) -> Self {
        Self {
            kind: ConvKind::Forward,
            stride,
            padding,
        }
    }

    pub fn transposed(stride: usize, padding: usize) -> Self {
        Self {
            kind: ConvKind::Transposed,
            stride,
            padding,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || kernel == 0 || input == 0 {
            return Err(Error::shape("zero stride, kernel or input size"));
        }
        match self.kind {
            ConvKind::Forward => {
                let padded = input + 2 * self.padding;
                if padded < kernel {
                    return Err(Error::shape(format!(
                        "kernel {kernel} larger than padded input {padded}"
                    )));
                }
                Ok((padded - kernel) / self.stride + 1)
            }
            ConvKind::Transposed => {
                let full = (input - 1) * self.stride + kernel;
                if full <= 2 * self.padding {
                    return Err(Error::shape("transposed conv padding consumes the output"));
                }
                Ok(full - 2 * self.padding)
            }
        }
    }

    /// Input coordinate feeding output coordinate `out` through kernel tap `tap`,
    /// or `None` when the tap falls into padding (or between strided samples).
    #[inline]
    pub fn input_index(&self, out: usize, tap: usize, input_len: usize) -> Option<usize> {
        match self.kind {
            ConvKind::Forward => {
                let pos = (out * self.stride + tap) as isize - self.padding as isize;
                (pos >= 0 && (pos as usize) < input_len).then_some(pos as usize)
            }
            ConvKind::Transposed => {
                let num = (out + self.padding) as isize - tap as isize;
                if num < 0 || !(num as usize).is_multiple_of(self.stride) {
                    return None;
                }
                let pos = num as usize / self.stride;
                (pos < input_len).then_some(pos)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_sizes() {
        let g = ConvGeometry::forward(2, 2);
        assert_eq!(g.output_len(64, 5).unwrap(), 32);
        assert_eq!(ConvGeometry::forward(2, 1).output_len(8, 3).unwrap(), 4);
        assert!(ConvGeometry::forward(1, 0).output_len(2, 3).is_err());
    }

    #[test]
    fn transposed_sizes() {
        assert_eq!(ConvGeometry::transposed(2, 1).output_len(4, 4).unwrap(), 8);
        assert_eq!(ConvGeometry::transposed(2, 0).output_len(1, 2).unwrap(), 2);
    }

    #[test]
    fn transposed_taps_skip_between_strides() {
        let g = ConvGeometry::transposed(2, 0);
        assert_eq!(g.input_index(0, 0, 1), Some(0));
        assert_eq!(g.input_index(1, 1, 1), Some(0));
        assert_eq!(g.input_index(1, 0, 1), None);
    }
}

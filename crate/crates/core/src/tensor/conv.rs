use super::{Result, Scalar, TensorError, View};

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the output the same size as the input
    /// (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

/// Resolved shapes of a stride-1 dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `input` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]`,
    /// `dilation` is `(d_h, d_w)`.
    pub fn new(
        input: &[usize],
        weight: &[usize],
        dilation: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            });
        }
        if input[1] != weight[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![weight[1]],
                found: vec![input[1]],
            });
        }
        let (dh, dw) = dilation;
        if dh == 0 || dw == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "dilation must be at least 1".into(),
            });
        }
        let (kh, kw) = (weight[2], weight[3]);
        if kh == 0 || kw == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "empty kernel".into(),
            });
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Invalid {
                        op: "conv2d",
                        msg: format!("same padding needs odd kernels, got {kh}x{kw}"),
                    });
                }
                (dh * (kh - 1) / 2, dw * (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        let eff_h = dh * (kh - 1) + 1;
        let eff_w = dw * (kw - 1) + 1;
        let (in_h, in_w) = (input[2], input[3]);
        if eff_h > in_h + 2 * pad_h || eff_w > in_w + 2 * pad_w {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "effective kernel {eff_h}x{eff_w} exceeds padded input {}x{}",
                    in_h + 2 * pad_h,
                    in_w + 2 * pad_w
                ),
            });
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            in_h,
            in_w,
            kernel_h: kh,
            kernel_w: kw,
            dilation_h: dh,
            dilation_w: dw,
            pad_h,
            pad_w,
            out_h: in_h + 2 * pad_h - eff_h + 1,
            out_w: in_w + 2 * pad_w - eff_w + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Rows of the unrolled patch matrix (`C_in · kh · kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Multiply-accumulates per forward pass of one sample.
    pub fn macs_per_sample(&self) -> usize {
        self.out_plane() * self.out_channels * self.patch_len()
    }

    /// For kernel tap offset `tap` along an axis, the output index range
    /// whose input index `o + tap·d − pad` lands inside `[0, len)`.
    fn valid_range(out_len: usize, in_len: usize, tap: usize, d: usize, pad: usize) -> (usize, usize) {
        let shift = (tap * d) as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (in_len as isize - shift).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi)
    }

    /// Rows of the zero-padded input after width unrolling.
    fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad_h
    }

    /// Length of one unrolled row, `padded_h · W_out`.
    fn strip_len(&self) -> usize {
        self.padded_h() * self.out_w
    }

    /// Contraction length of one kernel-row product, `C_in · kw`.
    fn strip_rows(&self) -> usize {
        self.in_channels * self.kernel_w
    }

    /// Unrolls the width taps of one sample `[C_in, H, W]` into
    /// `[C_in·kw, H + 2·pad_h, W_out]`, row `r` starting at
    /// `r·row_stride`. Kernel row `i` then reads the window starting
    /// `i·d_h` rows down, so height taps need no copies. Only in-bounds
    /// positions are written: `strips` must start zeroed and the padding
    /// never changes between samples.
    fn unroll<T: Scalar>(&self, input: &[T], strips: &mut [T], row_stride: usize) {
        let len = self.strip_len();
        for c in 0..self.in_channels {
            let x = &input[c * self.in_plane()..(c + 1) * self.in_plane()];
            for j in 0..self.kernel_w {
                let (lo, hi) = Self::valid_range(self.out_w, self.in_w, j, self.dilation_w, self.pad_w);
                if lo >= hi {
                    continue;
                }
                let row = (c * self.kernel_w + j) * row_stride;
                let dst = &mut strips[row + self.pad_h * self.out_w..row + len - self.pad_h * self.out_w];
                let ix0 = lo + j * self.dilation_w - self.pad_w;
                if hi - lo == self.out_w && self.out_w == self.in_w {
                    dst.copy_from_slice(x);
                    continue;
                }
                for y in 0..self.in_h {
                    let s = y * self.in_w + ix0;
                    dst[y * self.out_w + lo..y * self.out_w + hi].copy_from_slice(&x[s..s + hi - lo]);
                }
            }
        }
    }

    /// Adjoint of [`Self::unroll`]: adds unrolled gradients back onto one
    /// sample `[C_in, H, W]`.
    fn fold<T: Scalar>(&self, strips: &[T], row_stride: usize, grad_input: &mut [T]) {
        let len = self.strip_len();
        for c in 0..self.in_channels {
            let gx = &mut grad_input[c * self.in_plane()..(c + 1) * self.in_plane()];
            for j in 0..self.kernel_w {
                let (lo, hi) = Self::valid_range(self.out_w, self.in_w, j, self.dilation_w, self.pad_w);
                if lo >= hi {
                    continue;
                }
                let row = (c * self.kernel_w + j) * row_stride;
                let src = &strips[row + self.pad_h * self.out_w..row + len - self.pad_h * self.out_w];
                let ix0 = lo + j * self.dilation_w - self.pad_w;
                if hi - lo == self.out_w && self.out_w == self.in_w {
                    for (d, &v) in gx.iter_mut().zip(src) {
                        *d += v;
                    }
                    continue;
                }
                for y in 0..self.in_h {
                    let g0 = y * self.in_w + ix0;
                    let s0 = y * self.out_w + lo;
                    for (d, &v) in gx[g0..g0 + hi - lo].iter_mut().zip(&src[s0..s0 + hi - lo]) {
                        *d += v;
                    }
                }
            }
        }
    }

    /// Weight `[C_out, C_in, kh, kw]` regrouped as `[kh][C_out][C_in·kw]`.
    fn kernel_rows<T: Scalar>(&self, weight: &[T]) -> Vec<T> {
        let k = self.strip_rows();
        let mut out = vec![T::ZERO; self.kernel_h * self.out_channels * k];
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for i in 0..self.kernel_h {
                    for j in 0..self.kernel_w {
                        out[(i * self.out_channels + o) * k + c * self.kernel_w + j] =
                            weight[((o * self.in_channels + c) * self.kernel_h + i) * self.kernel_w + j];
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Self::kernel_rows`].
    fn kernel_from_rows<T: Scalar>(&self, rows: &[T]) -> Vec<T> {
        let k = self.strip_rows();
        let mut out = vec![T::ZERO; rows.len()];
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for i in 0..self.kernel_h {
                    for j in 0..self.kernel_w {
                        out[((o * self.in_channels + c) * self.kernel_h + i) * self.kernel_w + j] =
                            rows[(i * self.out_channels + o) * k + c * self.kernel_w + j];
                    }
                }
            }
        }
        out
    }

    /// Window of the unrolled strips read by kernel row `i`.
    fn strip_window(&self, i: usize) -> View {
        View::new(i * self.dilation_h * self.out_w, self.strip_len(), 1)
    }

    pub(crate) fn forward<T: Scalar>(&self, input: &[T], weight: &[T]) -> Vec<T> {
        let k = self.strip_rows();
        let plane = self.out_plane();
        let len = self.strip_len();
        let rows = self.kernel_rows(weight);
        let mut out = vec![T::ZERO; self.batch * self.out_channels * plane];
        let mut strips = vec![T::ZERO; k * len];
        let in_len = self.in_channels * self.in_plane();
        for n in 0..self.batch {
            self.unroll(&input[n * in_len..(n + 1) * in_len], &mut strips, len);
            let y = &mut out[n * self.out_channels * plane..(n + 1) * self.out_channels * plane];
            for i in 0..self.kernel_h {
                T::gemm_view(
                    self.out_channels,
                    k,
                    plane,
                    &rows,
                    View::new(i * self.out_channels * k, k, 1),
                    &strips,
                    self.strip_window(i),
                    y,
                    View::new(0, plane, 1),
                    i > 0,
                );
            }
        }
        out
    }

    /// Returns `(grad_input, grad_weight)`; the input gradient is skipped
    /// when `need_input` is false.
    pub(crate) fn backward<T: Scalar>(
        &self,
        input: &[T],
        weight: &[T],
        grad_out: &[T],
        need_input: bool,
    ) -> (Option<Vec<T>>, Vec<T>) {
        let k = self.strip_rows();
        let plane = self.out_plane();
        let len = self.strip_len();
        let in_len = self.in_channels * self.in_plane();
        let rows = self.kernel_rows(weight);
        let mut grad_rows = vec![T::ZERO; rows.len()];
        let mut grad_in = need_input.then(|| vec![T::ZERO; self.batch * in_len]);
        let mut strips = vec![T::ZERO; k * len];
        let mut dstrips = vec![T::ZERO; k * len];
        for n in 0..self.batch {
            let dy = &grad_out[n * self.out_channels * plane..(n + 1) * self.out_channels * plane];
            self.unroll(&input[n * in_len..(n + 1) * in_len], &mut strips, len);
            for i in 0..self.kernel_h {
                let w = self.strip_window(i);
                T::gemm_view(
                    self.out_channels,
                    plane,
                    k,
                    dy,
                    View::new(0, plane, 1),
                    &strips,
                    View::new(w.offset, 1, w.row_stride),
                    &mut grad_rows,
                    View::new(i * self.out_channels * k, k, 1),
                    true,
                );
            }
            if let Some(gi) = grad_in.as_mut() {
                dstrips.fill(T::ZERO);
                for i in 0..self.kernel_h {
                    T::gemm_view(
                        k,
                        self.out_channels,
                        plane,
                        &rows,
                        View::new(i * self.out_channels * k, 1, k),
                        dy,
                        View::new(0, plane, 1),
                        &mut dstrips,
                        self.strip_window(i),
                        true,
                    );
                }
                self.fold(&dstrips, len, &mut gi[n * in_len..(n + 1) * in_len]);
            }
        }
        (grad_in, self.kernel_from_rows(&grad_rows))
    }
}

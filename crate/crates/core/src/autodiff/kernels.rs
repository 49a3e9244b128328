//! Slice-level forward and adjoint kernels behind the tape ops.
//!
//! Every correlation here is a cross-correlation (no kernel flip). Planes are
//! row-major `h × w` blocks; the caller iterates channels and time.

use crate::tensor::Scalar;

/// Geometry of one 2D correlation between an input plane and an output plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PlaneGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        (pad_h, pad_w): (usize, usize),
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return None;
        }
        Some(Self {
            h,
            w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            ho: (h + 2 * pad_h - kh) / stride + 1,
            wo: (w + 2 * pad_w - kw) / stride + 1,
        })
    }

    /// Input row read by output row `yo` at kernel row `dy`.
    #[inline]
    fn input_row(&self, yo: usize, dy: usize) -> Option<usize> {
        let yi = (yo * self.stride + dy).checked_sub(self.pad_h)?;
        (yi < self.h).then_some(yi)
    }

    /// Output column span `[lo, hi)` whose input column `xo + dx - pad` is in range (stride 1).
    #[inline]
    fn unit_stride_span(&self, dx: usize) -> (usize, usize) {
        let lo = self.pad_w.saturating_sub(dx);
        let hi = (self.w + self.pad_w).saturating_sub(dx).min(self.wo);
        (lo, hi.max(lo))
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] = acc[i] + xa[i] * xb[i];
        }
    }
    let mut total = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        total = total + v;
    }
    total
}

/// Flags rows (of length `w`) holding at least one non-zero value.
pub(crate) fn active_rows<T: Scalar>(data: &[T], w: usize) -> Vec<bool> {
    data.chunks_exact(w)
        .map(|row| row.iter().any(|v| !v.is_zero()))
        .collect()
}

/// `out += correlate(input, kernel)`; rows flagged inactive are skipped.
pub(crate) fn correlate_plane<T: Scalar>(
    g: &PlaneGeom,
    input: &[T],
    active: Option<&[bool]>,
    kernel: &[T],
    out: &mut [T],
) {
    for dy in 0..g.kh {
        for yo in 0..g.ho {
            let Some(yi) = g.input_row(yo, dy) else { continue };
            if active.is_some_and(|a| !a[yi]) {
                continue;
            }
            let in_row = &input[yi * g.w..(yi + 1) * g.w];
            let out_row = &mut out[yo * g.wo..(yo + 1) * g.wo];
            for dx in 0..g.kw {
                let wv = kernel[dy * g.kw + dx];
                if wv.is_zero() {
                    continue;
                }
                if g.stride == 1 {
                    let (lo, hi) = g.unit_stride_span(dx);
                    if lo < hi {
                        let shift = lo + dx - g.pad_w;
                        axpy(wv, &in_row[shift..shift + hi - lo], &mut out_row[lo..hi]);
                    }
                } else {
                    for (xo, o) in out_row.iter_mut().enumerate() {
                        let Some(xi) = (xo * g.stride + dx).checked_sub(g.pad_w) else { continue };
                        if xi < g.w {
                            *o = *o + wv * in_row[xi];
                        }
                    }
                }
            }
        }
    }
}

/// `grad_in += correlateᵀ(grad_out, kernel)` (adjoint with respect to the input).
pub(crate) fn correlate_plane_grad_input<T: Scalar>(
    g: &PlaneGeom,
    grad_out: &[T],
    kernel: &[T],
    grad_in: &mut [T],
) {
    for dy in 0..g.kh {
        for yo in 0..g.ho {
            let Some(yi) = g.input_row(yo, dy) else { continue };
            let go_row = &grad_out[yo * g.wo..(yo + 1) * g.wo];
            let gi_row = &mut grad_in[yi * g.w..(yi + 1) * g.w];
            for dx in 0..g.kw {
                let wv = kernel[dy * g.kw + dx];
                if wv.is_zero() {
                    continue;
                }
                if g.stride == 1 {
                    let (lo, hi) = g.unit_stride_span(dx);
                    if lo < hi {
                        let shift = lo + dx - g.pad_w;
                        axpy(wv, &go_row[lo..hi], &mut gi_row[shift..shift + hi - lo]);
                    }
                } else {
                    for (xo, &go) in go_row.iter().enumerate() {
                        let Some(xi) = (xo * g.stride + dx).checked_sub(g.pad_w) else { continue };
                        if xi < g.w {
                            gi_row[xi] = gi_row[xi] + wv * go;
                        }
                    }
                }
            }
        }
    }
}

/// `grad_kernel += ∂⟨grad_out, correlate(input, ·)⟩`.
pub(crate) fn correlate_plane_grad_kernel<T: Scalar>(
    g: &PlaneGeom,
    grad_out: &[T],
    input: &[T],
    active: Option<&[bool]>,
    grad_kernel: &mut [T],
) {
    for dy in 0..g.kh {
        for yo in 0..g.ho {
            let Some(yi) = g.input_row(yo, dy) else { continue };
            if active.is_some_and(|a| !a[yi]) {
                continue;
            }
            let go_row = &grad_out[yo * g.wo..(yo + 1) * g.wo];
            let in_row = &input[yi * g.w..(yi + 1) * g.w];
            for dx in 0..g.kw {
                let slot = &mut grad_kernel[dy * g.kw + dx];
                if g.stride == 1 {
                    let (lo, hi) = g.unit_stride_span(dx);
                    if lo < hi {
                        let shift = lo + dx - g.pad_w;
                        *slot = *slot + dot(&go_row[lo..hi], &in_row[shift..shift + hi - lo]);
                    }
                } else {
                    let mut acc = T::zero();
                    for (xo, &go) in go_row.iter().enumerate() {
                        let Some(xi) = (xo * g.stride + dx).checked_sub(g.pad_w) else { continue };
                        if xi < g.w {
                            acc = acc + go * in_row[xi];
                        }
                    }
                    *slot = *slot + acc;
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `planes` planes of `h × w`.
///
/// Returns pooled values and, per output, the flat input index of the first
/// maximum in row-major window order.
pub(crate) fn maxpool_planes<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut values = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for yo in 0..ho {
            for xo in 0..wo {
                let mut best_idx = base + (yo * k) * w + xo * k;
                let mut best = input[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (yo * k + dy) * w + xo * k + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (values, argmax)
}

/// Nearest-neighbour replication of each value into an `f × f` block.
pub(crate) fn upsample_planes<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    f: usize,
) -> Vec<T> {
    let wo = w * f;
    let mut out = vec![T::zero(); planes * h * f * wo];
    for p in 0..planes {
        for y in 0..h {
            let src = &input[(p * h + y) * w..(p * h + y + 1) * w];
            let first = (p * h * f + y * f) * wo;
            {
                let row = &mut out[first..first + wo];
                for (x, &v) in src.iter().enumerate() {
                    row[x * f..(x + 1) * f].fill(v);
                }
            }
            for r in 1..f {
                out.copy_within(first..first + wo, first + r * wo);
            }
        }
    }
    out
}

/// Adjoint of [`upsample_planes`]: sums each `f × f` block.
pub(crate) fn upsample_planes_adjoint<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    f: usize,
) -> Vec<T> {
    let wo = w * f;
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            let dst = &mut out[(p * h + y) * w..(p * h + y + 1) * w];
            for r in 0..f {
                let row = &grad_out[(p * h * f + y * f + r) * wo..][..wo];
                for (x, d) in dst.iter_mut().enumerate() {
                    for &g in &row[x * f..(x + 1) * f] {
                        *d = *d + g;
                    }
                }
            }
        }
    }
    out
}

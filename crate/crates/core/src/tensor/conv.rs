//! im2col lowering for convolution and window bookkeeping for pooling.

/// `floor((size + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > size + 2 * padding {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

/// Pooling output size. In ceil mode a trailing partial window is kept as
/// long as it starts inside the input or the left padding.
pub fn pool_output_size(size: usize, kernel: usize, stride: usize, padding: usize, ceil_mode: bool) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = size + 2 * padding;
    if ceil_mode {
        let span = padded.saturating_sub(kernel);
        let mut out = span.div_ceil(stride) + 1;
        if (out - 1) * stride >= size + padding {
            out -= 1;
        }
        Some(out)
    } else {
        conv_output_size(size, kernel, stride, padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn cols_width(&self) -> usize {
        self.batch * self.out_plane()
    }

    /// Input coordinate for output position `o` and kernel offset `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Lowers `input[B, Cin, H, W]` to `cols[Cin*kh*kw, B*Ho*Wo]`.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch_len() * width];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let src_plane = &input[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let src_row = &src_plane[iy * g.w..(iy + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 && kj >= g.pad && kj - g.pad + g.wo <= g.w {
                            dst_seg.copy_from_slice(&src_row[kj - g.pad..kj - g.pad + g.wo]);
                        } else {
                            for (ox, d) in dst_seg.iter_mut().enumerate() {
                                if let Some(ix) = g.src(ox, kj, g.w) {
                                    *d = src_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into an input-shaped buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let width = g.cols_width();
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let dst_plane = &mut out[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let dst_row = &mut dst_plane[iy * g.w..(iy + 1) * g.w];
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst_row[ix] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling; padded positions never win. Returns values and the flat
/// input index of each window's maximum (first maximum on ties).
pub(crate) fn max_pool(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let ys = y0.max(0) as usize..((y0 + g.kernel as isize).min(g.h as isize)) as usize;
            for ox in 0..g.wo {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let xs = x0.max(0) as usize..((x0 + g.kernel as isize).min(g.w as isize)) as usize;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let idx = base + y * g.w + x;
                        if input[idx] > best || best_idx == usize::MAX {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

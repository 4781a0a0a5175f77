use super::Element;

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_dim(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < k || self.stride == 0 {
            None
        } else {
            Some((padded - k) / self.stride + 1)
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_dim(h, self.kh)?, self.out_dim(w, self.kw)?))
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad`
/// falls inside `0..w`.
fn valid_cols(win: Window, kj: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = win.pad.saturating_sub(kj).div_ceil(win.stride).min(ow);
    let hi = if w + win.pad > kj { ((w + win.pad - kj - 1) / win.stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold one `c x h x w` image into a `(c*kh*kw) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ci * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(win, kj, w, ow);
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let x0 = lo * win.stride + kj - win.pad;
                    if win.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, &v) in seg[lo..hi].iter_mut().zip(src[x0..].iter().step_by(win.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ci * win.kh + ki) * win.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(win, kj, w, ow);
                    let x0 = lo * win.stride + kj - win.pad;
                    let seg = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &v) in dst[x0..].iter_mut().step_by(win.stride).zip(seg) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `out`; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i + shape.len() < rank {
            continue;
        }
        let d = shape[i + shape.len() - rank];
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Index of each output element in an operand broadcast to `out`.
pub(crate) fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let own: usize = shape.iter().product();
    if shape == out {
        return (0..n).collect();
    }
    // trailing-suffix broadcast: operand repeats every `own` elements
    if own > 0 && out.ends_with(shape) {
        return (0..n).map(|i| i % own).collect();
    }
    let strides = broadcast_strides(shape, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

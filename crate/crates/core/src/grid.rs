//! Small helpers for row-major h x w grids.

/// Source index for nearest-neighbour resampling of one axis.
#[inline]
fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    // pixel-centre alignment
    let pos = ((2 * dst + 1) * src_len) / (2 * dst_len);
    pos.min(src_len - 1)
}

/// Nearest-neighbour resize of a row-major `h x w` grid.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w, "grid length mismatch");
    if h == new_h && w == new_w {
        return src.to_vec();
    }
    let cols: Vec<usize> = (0..new_w).map(|x| nearest_src(x, w, new_w)).collect();
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let sy = nearest_src(y, h, new_h);
        let row = &src[sy * w..(sy + 1) * w];
        out.extend(cols.iter().map(|&sx| row[sx]));
    }
    out
}

/// Fits `(h, w)` inside a square of side `max_side`, preserving aspect ratio.
pub fn fit_within(h: usize, w: usize, max_side: usize) -> (usize, usize) {
    let longest = h.max(w);
    if longest <= max_side || max_side == 0 {
        return (h, w);
    }
    let scale = max_side as f64 / longest as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    (nh, nw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_replicates_blocks() {
        let src = [1, 2, 3, 4];
        let up = resize_nearest(&src, 2, 2, 4, 4);
        assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(resize_nearest(&up, 4, 4, 2, 2), src.to_vec());
    }

    #[test]
    fn fit_keeps_aspect() {
        assert_eq!(fit_within(320, 160, 64), (64, 32));
        assert_eq!(fit_within(20, 20, 64), (20, 20));
    }
}

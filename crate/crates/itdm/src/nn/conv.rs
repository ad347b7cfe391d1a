//! im2col machinery for the 3x3 stride-1 pad-1 convolution and the 2x2
//! max-pool, both over NHWC-ordered buffers.

/// Unfold `[m, h, w, c]` into patch rows `[m*h*w, c*9]`.
/// Row `(s, y, x)` holds the 3x3 neighborhood of pixel `(y, x)`; the column
/// index packs `(tap, channel)` as `(ky*3 + kx)*c + ch`. Out-of-image taps
/// stay zero.
pub(crate) fn im2col_3x3(input: &[f64], m: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), m * h * w * c);
    let patch = 9 * c;
    let mut cols = vec![0.0; m * h * w * patch];
    for s in 0..m {
        let img = &input[s * h * w * c..(s + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let row = ((s * h + y) * w + x) * patch;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col_3x3`]: fold patch-row gradients
/// `[m*h*w, c*9]` back into an input gradient `[m, h, w, c]`.
pub(crate) fn col2im_3x3(dcols: &[f64], m: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let patch = 9 * c;
    debug_assert_eq!(dcols.len(), m * h * w * patch);
    let mut dinput = vec![0.0; m * h * w * c];
    for s in 0..m {
        let dimg = &mut dinput[s * h * w * c..(s + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let row = ((s * h + y) * w + x) * patch;
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dimg[dst + ch] += dcols[src + ch];
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// 2x2 max pool with stride 2 over `[m, h, w, c]`. Returns the pooled buffer
/// `[m, h/2, w/2, c]` and, per pooled element, the flat index of its source.
/// Ties resolve to the first element in scan order, deterministically.
pub(crate) fn maxpool2(input: &[f64], m: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    debug_assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; m * ho * wo * c];
    let mut src = vec![0usize; m * ho * wo * c];
    for s in 0..m {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((s * ho + oy) * wo + ox) * c + ch;
                    out[o] = best;
                    src[o] = best_idx;
                }
            }
        }
    }
    (out, src)
}

/// Route pooled-output gradients back to their argmax sources.
pub(crate) fn maxpool2_backward(dout: &[f64], src: &[usize], input_len: usize) -> Vec<f64> {
    debug_assert_eq!(dout.len(), src.len());
    let mut dinput = vec![0.0; input_len];
    for (g, &i) in dout.iter().zip(src) {
        dinput[i] += g;
    }
    dinput
}

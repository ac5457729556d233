//! Raw numeric kernels shared by forward and backward rules.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored in its
/// untransposed layout (`k × m` or `n × k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major extents whose lengths are checked by the debug asserts and
    // by every caller constructing these buffers from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds an `h × w × cin` image into `(h·w) × (k·k·cin)` patches with zero
/// padding `k / 2`. Column order is `(dy, dx, cin)`.
pub(crate) fn im2col(input: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let kc = k * k * cin;
    let mut cols = vec![0.0; h * w * kc];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * kc..(y * w + x + 1) * kc];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    let dst = (dy * k + dx) * cin;
                    row[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], h: usize, w: usize, cin: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let kc = k * k * cin;
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * kc..(y * w + x + 1) * kc];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * cin;
                    let src = (dy * k + dx) * cin;
                    for c in 0..cin {
                        out[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

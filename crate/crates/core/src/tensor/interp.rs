//! Bilinear sampling on a pixel grid whose cell `j` spans `[j, j + 1)` with
//! its center at `j + 0.5`. Shared by RoIAlign and the image resizer so both
//! agree on one coordinate convention.

/// The four taps `(flat index, weight)` for a continuous point. Points
/// outside the grid clamp to the border cells.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let (x0, x1, fx) = axis(x, width);
    let (y0, y1, fy) = axis(y, height);
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

fn axis(c: f64, n: usize) -> (usize, usize, f64) {
    let u = (c - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Bilinear sample of one channel plane.
pub fn sample(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    bilinear_taps(x, y, width, height)
        .iter()
        .map(|&(i, w)| plane[i] * w)
        .sum()
}

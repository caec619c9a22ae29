//! Exact Euclidean distance transform (lower envelope of parabolas, run
//! separably over columns then rows) and the Hausdorff distance built on it.

const FAR: f64 = 1e30;

/// Squared distance transform of a 1D sampled function, written into `out`.
/// Entries at `FAR` are treated as absent.
fn transform_1d(f: &[f64], out: &mut [f64], vertex: &mut [usize], bound: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q] >= FAR {
            continue;
        }
        loop {
            let Some(top) = k else {
                k = Some(0);
                vertex[0] = q;
                bound[0] = f64::NEG_INFINITY;
                bound[1] = f64::INFINITY;
                break;
            };
            let p = vertex[top];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= bound[top] {
                // bound[0] is -inf, so this never pops the last parabola
                k = Some(top - 1);
                continue;
            }
            vertex[top + 1] = q;
            bound[top + 1] = s;
            bound[top + 2] = f64::INFINITY;
            k = Some(top + 1);
            break;
        }
    }
    if k.is_none() {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while bound[k + 1] < q as f64 {
            k += 1;
        }
        let p = vertex[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every pixel of a `w`×`h` grid to the
/// nearest set pixel. All entries are `FAR` when nothing is set.
pub(crate) fn squared_edt(set: &[bool], w: usize, h: usize) -> Vec<f64> {
    let n = w.max(h);
    let mut vertex = vec![0usize; n];
    let mut bound = vec![0f64; n + 2];
    let mut col_in = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    let mut grid: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            col_in[y] = grid[y * w + x];
        }
        transform_1d(&col_in, &mut col_out, &mut vertex, &mut bound);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    for y in 0..h {
        let row = &grid[y * w..(y + 1) * w];
        transform_1d(row, &mut row_out, &mut vertex, &mut bound);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// `sup_{a in A} inf_{b in B} |a - b|`; both sets non-empty.
fn directed(a: &[(usize, usize)], b: &[(usize, usize)], x0: usize, y0: usize, w: usize, h: usize) -> f64 {
    let mut set = vec![false; w * h];
    for &(x, y) in b {
        set[(y - y0) * w + (x - x0)] = true;
    }
    let dt = squared_edt(&set, w, h);
    a.iter()
        .map(|&(x, y)| dt[(y - y0) * w + (x - x0)])
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between two pixel sets, or `None` when
/// either is empty.
pub fn hausdorff_exact(a: &[(usize, usize)], b: &[(usize, usize)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in a.iter().chain(b) {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    Some(directed(a, b, x0, y0, w, h).max(directed(b, a, x0, y0, w, h)))
}

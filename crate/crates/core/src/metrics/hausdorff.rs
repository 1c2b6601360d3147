use super::{check_same, Mask};
use crate::error::Result;

/// Foreground pixels with a 4-neighbour in the background or off the image.
pub fn boundary(m: &Mask) -> Vec<bool> {
    let (h, w) = (m.height, m.width);
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.pixels[y as usize * w + x as usize]
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            m.pixels[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

const FAR: f64 = f64::INFINITY;

/// Lower envelope of parabolas rooted at the finite entries of `f`.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut v = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |q: usize, p: usize| {
        let (q2, p2) = ((q * q) as f64, (p * p) as f64);
        ((f[q] + q2) - (f[p] + p2)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &sites[1..] {
        let mut s = intersect(q, *v.last().unwrap());
        while s <= *z.last().unwrap() {
            v.pop();
            z.pop();
            s = intersect(q, *v.last().unwrap());
        }
        v.push(q);
        z.push(s);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel.
fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut cols = vec![FAR; h * w];
    let mut f = vec![0.0; h.max(w)];
    let mut o = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = if sites[y * w + x] { 0.0 } else { FAR };
        }
        dt_1d(&f[..h], &mut o[..h]);
        for y in 0..h {
            cols[y * w + x] = o[y];
        }
    }
    let mut out = vec![FAR; h * w];
    for y in 0..h {
        dt_1d(&cols[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// Symmetric Hausdorff distance between the boundary pixel sets, exact
/// Euclidean. `None` when either mask is empty.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    check_same("hausdorff", (a.height, a.width), (b.height, b.width))?;
    if a.count() == 0 || b.count() == 0 {
        return Ok(None);
    }
    let (h, w) = (a.height, a.width);
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_edt(&ba, h, w), squared_edt(&bb, h, w));
    let directed = |from: &[bool], dist: &[f64]| {
        from.iter()
            .zip(dist)
            .filter(|(&f, _)| f)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max)
    };
    Ok(Some(directed(&ba, &db).max(directed(&bb, &da)).sqrt()))
}

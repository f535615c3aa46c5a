//! Independent reference implementations used as test oracles. Written as
//! plain loops over pixels, deliberately sharing no code with the library.
#![allow(dead_code)]

use hazesplit_core::image::ImagePlane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImagePlane {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    ImagePlane::new(h, w, c, data).unwrap()
}

/// Dark channel by direct window scan, clamped (replicate) borders.
pub fn dark_channel(img: &ImagePlane, patch: usize) -> Vec<f64> {
    let (h, w) = img.dims();
    let r = (patch / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    for c in 0..3 {
                        m = m.min(img.get(c, yy, xx));
                    }
                }
            }
            out[y as usize * w + x as usize] = m;
        }
    }
    out
}

/// Hint: mean colour of the brightest `ceil(frac * m)` dark-channel pixels,
/// found by a full sort (ties: lower pixel index first). Also returns the
/// selected pixel indices.
pub fn airlight_hint(img: &ImagePlane, patch: usize, frac: f64) -> ([f64; 3], Vec<usize>) {
    let (h, w) = img.dims();
    let dark = dark_channel(img, patch);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| dark[b].partial_cmp(&dark[a]).unwrap().then(a.cmp(&b)));
    let k = ((frac * (h * w) as f64).ceil() as usize).max(1);
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let mut hint = [0.0; 3];
    for (c, slot) in hint.iter_mut().enumerate() {
        *slot = chosen.iter().map(|&i| img.get(c, i / w, i % w)).sum::<f64>() / k as f64;
    }
    (hint, chosen)
}

pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// `(1/2m) sum (a - mean of 8-neighbours)^2` with shrinking border neighbourhoods.
pub fn smoothness(data: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sum = 0.0;
                let mut n = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        sum += data[ch * h * w + yy as usize * w + xx as usize];
                        n += 1;
                    }
                }
                let v = data[ch * h * w + y as usize * w + x as usize];
                total += (v - sum / n as f64).powi(2);
            }
        }
    }
    total / (2.0 * (c * h * w) as f64)
}

/// Mean over pixels of `(max - (max - min) / (max + eps))^2`.
pub fn value_saturation_gap(img: &ImagePlane, eps: f64) -> f64 {
    let (h, w) = img.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let px = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
            let mx = px.iter().cloned().fold(f64::MIN, f64::max);
            let mn = px.iter().cloned().fold(f64::MAX, f64::min);
            let s = (mx - mn) / (mx + eps);
            total += (mx - s) * (mx - s);
        }
    }
    total / (h * w) as f64
}

/// `J*T + A*(1-T)` per pixel, transmission shared across channels.
pub fn scatter(j: &ImagePlane, t: &ImagePlane, a: &ImagePlane) -> Vec<f64> {
    let (h, w) = j.dims();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let tv = t.get(0, y, x);
                out.push(j.get(c, y, x) * tv + a.get(c, y, x) * (1.0 - tv));
            }
        }
    }
    out
}

/// Single-scale SSIM computed window by window with an explicit 2-D
/// Gaussian (11x11, sigma 1.5), valid positions only.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> f64 {
    const N: usize = 11;
    let mut k2 = [[0.0f64; N]; N];
    let mut norm = 0.0;
    for (i, row) in k2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = a.dims();
    let mut per_channel = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - N {
            for x0 in 0..=w - N {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let wt = k2[i][j] / norm;
                        let (va, vb) = (a.get(c, y0 + i, x0 + j), b.get(c, y0 + i, x0 + j));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / a.channels() as f64
}

/// Monte Carlo estimate of `KL(N(mu, e^lv) || N(0, 1))` summed over elements,
/// averaging `log q(z) - log p(z)` over `samples` joint draws.
pub fn kl_monte_carlo(mu: &[f64], log_var: &[f64], samples: usize, seed: u64) -> f64 {
    use rand_distr::StandardNormal;
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let mut s = 0.0;
        for i in 0..mu.len() {
            let eps: f64 = r.sample(StandardNormal);
            let sd = (0.5 * log_var[i]).exp();
            let z = mu[i] + sd * eps;
            // log q - log p; the 2*pi terms cancel
            s += -0.5 * log_var[i] - 0.5 * eps * eps + 0.5 * z * z;
        }
        total += s;
    }
    total / samples as f64
}

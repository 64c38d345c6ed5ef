//! Direct, loop-by-loop evaluations of the quality indices.

use hsfuse::mixing::HsiCube;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pixel(c: &HsiCube, b: usize, y: usize, x: usize) -> f64 {
    c.get(b, y, x)
}

/// Random reference in (0.05, 1) and an estimate with additive noise and a
/// smooth gain, on a random extent large enough for several UIQI windows.
pub fn random_pair(seed: u64) -> (HsiCube, HsiCube) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = rng.random_range(3..7);
    let h = rng.random_range(32..49);
    let w = rng.random_range(32..49);
    let n = bands * h * w;
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let gain = rng.random_range(0.8..1.2);
    let e: Vec<f64> = r
        .iter()
        .enumerate()
        .map(|(i, v)| gain * v + 0.05 * ((i % w) as f64 / w as f64) + rng.random_range(-0.1..0.1))
        .collect();
    (HsiCube::new(bands, h, w, r).unwrap(), HsiCube::new(bands, h, w, e).unwrap())
}

pub fn oracle_psnr(r: &HsiCube, e: &HsiCube) -> f64 {
    let mut acc = 0.0;
    for b in 0..r.bands() {
        let mut se = 0.0;
        for y in 0..r.height() {
            for x in 0..r.width() {
                se += (pixel(r, b, y, x) - pixel(e, b, y, x)).powi(2);
            }
        }
        let mse = se / (r.height() * r.width()) as f64;
        acc += 10.0 * (1.0 / mse).log10();
    }
    acc / r.bands() as f64
}

pub fn oracle_sam(r: &HsiCube, e: &HsiCube) -> f64 {
    let mut acc = 0.0;
    for y in 0..r.height() {
        for x in 0..r.width() {
            let (mut dot, mut nr, mut ne) = (0.0, 0.0, 0.0);
            for b in 0..r.bands() {
                let (a, c) = (pixel(r, b, y, x), pixel(e, b, y, x));
                dot += a * c;
                nr += a * a;
                ne += c * c;
            }
            acc += (dot / (nr.sqrt() * ne.sqrt())).clamp(-1.0, 1.0).acos();
        }
    }
    (acc / (r.height() * r.width()) as f64).to_degrees()
}

pub fn oracle_ergas(r: &HsiCube, e: &HsiCube, ratio: f64) -> f64 {
    let n = (r.height() * r.width()) as f64;
    let mut acc = 0.0;
    for b in 0..r.bands() {
        let (mut se, mut sum) = (0.0, 0.0);
        for y in 0..r.height() {
            for x in 0..r.width() {
                se += (pixel(r, b, y, x) - pixel(e, b, y, x)).powi(2);
                sum += pixel(r, b, y, x);
            }
        }
        let rmse = (se / n).sqrt();
        acc += (rmse / (sum / n)).powi(2);
    }
    100.0 / ratio * (acc / r.bands() as f64).sqrt()
}

/// Two-pass weighted moments over one 11x11 Gaussian window at each valid
/// position.
pub fn oracle_ssim(r: &HsiCube, e: &HsiCube) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = 5.0;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for b in 0..r.bands() {
        let mut band = 0.0;
        let mut count = 0;
        for y0 in 0..=r.height() - k {
            for x0 in 0..=r.width() - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += g[i * k + j] * pixel(r, b, y0 + i, x0 + j);
                        mb += g[i * k + j] * pixel(e, b, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (da, db) = (pixel(r, b, y0 + i, x0 + j) - ma, pixel(e, b, y0 + i, x0 + j) - mb);
                        va += g[i * k + j] * da * da;
                        vb += g[i * k + j] * db * db;
                        cov += g[i * k + j] * da * db;
                    }
                }
                band += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += band / count as f64;
    }
    acc / r.bands() as f64
}

/// Wang-Bovik index on 32x32 windows at stride 8 (window clipped to the
/// image), two-pass moments.
pub fn oracle_uiqi(r: &HsiCube, e: &HsiCube) -> f64 {
    let win = 32.min(r.height()).min(r.width());
    let mut acc = 0.0;
    for b in 0..r.bands() {
        let (mut band, mut count) = (0.0, 0);
        let mut y0 = 0;
        while y0 + win <= r.height() {
            let mut x0 = 0;
            while x0 + win <= r.width() {
                let n = (win * win) as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        ma += pixel(r, b, y, x);
                        mb += pixel(e, b, y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let (da, db) = (pixel(r, b, y, x) - ma, pixel(e, b, y, x) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                band += 4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb));
                count += 1;
                x0 += 8;
            }
            y0 += 8;
        }
        acc += band / count as f64;
    }
    acc / r.bands() as f64
}

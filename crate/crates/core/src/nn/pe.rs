//! Fixed sinusoidal positional encodings: a 2-D grid code for feature maps
//! and a closed-form coordinate code for point/box prompts.

use ndarray::{Array1, Array3};

/// 2-D sinusoidal grid encoding `[c, h, w]`: the first c/2 channels encode
/// the y coordinate, the rest x, each as interleaved sin/cos pairs over a
/// geometric frequency ladder (temperature 10000). Requires c % 4 == 0.
pub fn sine_grid(h: usize, w: usize, c: usize) -> Array3<f64> {
    assert_eq!(c % 4, 0, "grid encoding needs channels divisible by 4");
    let quarter = c / 4;
    let mut pe = Array3::<f64>::zeros((c, h, w));
    for k in 0..quarter {
        let inv_freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64 * std::f64::consts::TAU * inv_freq;
            for j in 0..w {
                pe[[2 * k, i, j]] = y.sin();
                pe[[2 * k + 1, i, j]] = y.cos();
            }
        }
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64 * std::f64::consts::TAU * inv_freq;
            for i in 0..h {
                pe[[c / 2 + 2 * k, i, j]] = x.sin();
                pe[[c / 2 + 2 * k + 1, i, j]] = x.cos();
            }
        }
    }
    pe
}

/// Closed-form coordinate encoding of a normalized point in [0,1]²:
/// `emb[4i] = sin(2π(i+1)x)`, `emb[4i+1] = cos(2π(i+1)x)`,
/// `emb[4i+2] = sin(2π(i+1)y)`, `emb[4i+3] = cos(2π(i+1)y)`.
pub fn point_code(x: f64, y: f64, c: usize) -> Array1<f64> {
    assert_eq!(c % 4, 0, "point encoding needs channels divisible by 4");
    let mut emb = Array1::<f64>::zeros(c);
    for i in 0..c / 4 {
        let f = std::f64::consts::TAU * (i + 1) as f64;
        emb[4 * i] = (f * x).sin();
        emb[4 * i + 1] = (f * x).cos();
        emb[4 * i + 2] = (f * y).sin();
        emb[4 * i + 3] = (f * y).cos();
    }
    emb
}

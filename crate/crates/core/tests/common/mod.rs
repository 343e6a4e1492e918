//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use radiance_pose::{ExpCoords, Pose, Vec3};

pub type M4 = [[f64; 4]; 4];

pub fn m4_mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn m4_max_diff(a: &M4, b: &M4) -> f64 {
    (0..4).flat_map(|i| (0..4).map(move |j| (a[i][j] - b[i][j]).abs())).fold(0.0, f64::max)
}

/// The 4×4 twist matrix `[[ω]ₓ v; 0 0]` of `ξ = [ω | v]`.
pub fn twist_matrix(xi: &[f64; 6]) -> M4 {
    let [a, b, c, x, y, z] = *xi;
    [[0.0, -c, b, x], [c, 0.0, -a, y], [-b, a, 0.0, z], [0.0; 4]]
}

/// Matrix exponential of the twist by its power series truncated after 12
/// terms, applied to `ξ / 2ˢ` (small enough that the tail is negligible) and
/// squared back up `s` times.
pub fn series_exp(xi: &[f64; 6]) -> M4 {
    let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.05 {
        s += 1;
    }
    let scale = f64::powi(2.0, -s);
    let scaled = xi.map(|v| v * scale);
    let a = twist_matrix(&scaled);
    let mut out = [[0.0; 4]; 4];
    let mut term = [[0.0; 4]; 4];
    for i in 0..4 {
        out[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..12 {
        term = m4_mul(&term, &a);
        term.iter_mut().flatten().for_each(|v| *v /= k as f64);
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        out = m4_mul(&out, &out);
    }
    out
}

/// Inverts [`series_exp`] by Newton's method with a finite-difference
/// Jacobian, starting from `start`.
pub fn newton_log(target: &M4, start: [f64; 6]) -> [f64; 6] {
    let residual = |xi: &[f64; 6]| -> [f64; 12] {
        let m = series_exp(xi);
        let mut r = [0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                r[4 * i + j] = m[i][j] - target[i][j];
            }
        }
        r
    };
    let mut xi = start;
    for _ in 0..50 {
        let r = residual(&xi);
        if r.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-14 {
            break;
        }
        let h = 1e-7;
        let mut jac = [[0.0; 6]; 12];
        for k in 0..6 {
            let (mut p, mut m) = (xi, xi);
            p[k] += h;
            m[k] -= h;
            let (rp, rm) = (residual(&p), residual(&m));
            for row in 0..12 {
                jac[row][k] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        // Gauss-Newton step: solve (JᵀJ) δ = −Jᵀ r.
        let mut a = [[0.0; 7]; 6];
        for i in 0..6 {
            for j in 0..6 {
                a[i][j] = (0..12).map(|r_| jac[r_][i] * jac[r_][j]).sum();
            }
            a[i][6] = -(0..12).map(|r_| jac[r_][i] * r[r_]).sum::<f64>();
        }
        let delta = solve6(a);
        for k in 0..6 {
            xi[k] += delta[k];
        }
    }
    xi
}

fn solve6(mut a: [[f64; 7]; 6]) -> [f64; 6] {
    for col in 0..6 {
        let pivot = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..6 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..7 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    std::array::from_fn(|i| a[i][6] / a[i][i])
}

pub fn coords(xi: [f64; 6]) -> ExpCoords<f64> {
    ExpCoords(xi)
}

pub fn pose_matrix(p: &Pose<f64>) -> M4 {
    p.to_matrix()
}

/// `f(x + h) − f(x − h)` over `2h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor: passes when
/// `|a − b| ≤ rel · max(|a|, |b|)` or `|a − b| ≤ abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

pub fn assert_close(what: &str, analytic: f64, numeric: f64, rel: f64, abs: f64) {
    assert!(close(analytic, numeric, rel, abs), "{what}: analytic {analytic:e} vs finite difference {numeric:e}");
}

/// Set dilation by the definition: a pixel is on after one round iff some
/// pixel within Chebyshev distance 2 was on.
pub fn brute_dilate(mask: &[bool], w: usize, h: usize, rounds: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..rounds {
        let mut next = vec![false; w * h];
        for v in 0..h as i64 {
            for u in 0..w as i64 {
                next[(v as usize) * w + u as usize] = (-2..=2).any(|dv| {
                    (-2..=2).any(|du| {
                        let (uu, vv) = (u + du, v + dv);
                        uu >= 0 && vv >= 0 && uu < w as i64 && vv < h as i64 && cur[(vv as usize) * w + uu as usize]
                    })
                });
            }
        }
        cur = next;
    }
    cur
}

/// Harris response at every pixel computed straight from the definition:
/// luma, 3×3 Sobel with edge replication, structure tensor summed over a 3×3
/// window with edge replication, `det − 0.04·trace²`.
pub fn brute_harris(gray: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |img: &[f64], u: i64, v: i64| img[(v.clamp(0, h as i64 - 1) as usize) * w + u.clamp(0, w as i64 - 1) as usize];
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let p = |du, dv| at(gray, u + du, v + dv);
            ix[(v as usize) * w + u as usize] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            iy[(v as usize) * w + u as usize] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    let mut r = vec![0.0; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dv in -1..=1 {
                for du in -1..=1 {
                    let gx = at(&ix, u + du, v + dv);
                    let gy = at(&iy, u + du, v + dv);
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            }
            r[(v as usize) * w + u as usize] = a * c - b * b - 0.04 * (a + c) * (a + c);
        }
    }
    r
}

/// A frame of `transforms.json` read without the library's own types.
pub struct RefFrame {
    pub image: std::path::PathBuf,
    pub matrix: M4,
}

/// Minimal reader for the NeRF-synthetic `transforms.json` layout.
pub fn read_transforms(dir: &Path) -> (f64, Vec<RefFrame>) {
    let text = std::fs::read_to_string(dir.join("transforms.json")).expect("transforms.json readable");
    let v: serde_json::Value = serde_json::from_str(&text).expect("valid JSON");
    let fov = v["camera_angle_x"].as_f64().expect("camera_angle_x is a number");
    let frames = v["frames"]
        .as_array()
        .expect("frames array")
        .iter()
        .map(|f| {
            let rel = f["file_path"].as_str().expect("file_path string");
            let rows = f["transform_matrix"].as_array().expect("matrix rows");
            assert_eq!(rows.len(), 4);
            let mut m = [[0.0; 4]; 4];
            for (i, row) in rows.iter().enumerate() {
                let row = row.as_array().expect("matrix row");
                assert_eq!(row.len(), 4);
                for (j, x) in row.iter().enumerate() {
                    m[i][j] = x.as_f64().expect("matrix entry");
                }
            }
            RefFrame { image: dir.join(format!("{}.png", rel.trim_start_matches("./"))), matrix: m }
        })
        .collect();
    (fov, frames)
}

pub fn v3(x: f64, y: f64, z: f64) -> Vec3<f64> {
    Vec3::new(x, y, z)
}

//! Multi-scale structural similarity with an exact hand-derived gradient.
//!
//! One kernel serves both the training loss (through the autodiff graph) and
//! evaluation, so the two paths return bit-identical values.
//!
//! Per (batch item, channel) plane and scale `j`:
//! Gaussian statistics use an 11-tap separable window (σ = 1.5) applied in
//! "valid" mode; `cs_j` and `ssim_j` are the means of the contrast-structure
//! and full SSIM maps; planes are halved by 2×2 average pooling (odd trailing
//! rows/columns dropped) between scales. The plane score is
//! `Π_{j<M-1} max(cs_j,0)^{w_j} · max(ssim_{M-1},0)^{w_{M-1}}` and the result is
//! the mean over all planes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
/// Standard five-scale exponents.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MAX_SCALES: usize = 5;

/// Smallest side length that fits `scales` levels.
pub fn min_side_for(scales: usize) -> usize {
    WINDOW << (scales.max(1) - 1)
}

/// Largest scale count (≤ 5) the image fits, or `None` if even one scale does not.
pub fn feasible_scales(height: usize, width: usize) -> Option<usize> {
    let side = height.min(width);
    (1..=MAX_SCALES).rev().find(|&s| side >= min_side_for(s))
}

/// First `scales` canonical weights rescaled to sum to one.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &SCALE_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

/// Valid-mode separable filtering: `h×w` → `(h-10)×(w-10)`.
fn filter(win: &[f64; WINDOW], src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            let mut acc = 0.0;
            for k in 0..WINDOW {
                acc += win[k] * row[c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for k in 0..WINDOW {
            let wk = win[k];
            let src_row = &tmp[(r + k) * ow..(r + k + 1) * ow];
            let dst = &mut out[r * ow..(r + 1) * ow];
            for c in 0..ow {
                dst[c] += wk * src_row[c];
            }
        }
    }
    out
}

/// Adjoint of [`filter`]: `(h-10)×(w-10)` → `h×w`.
fn filter_adjoint(win: &[f64; WINDOW], grad: &[f64], h: usize, w: usize) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..oh {
        let g_row = &grad[r * ow..(r + 1) * ow];
        for k in 0..WINDOW {
            let wk = win[k];
            let dst = &mut tmp[(r + k) * ow..(r + k + 1) * ow];
            for c in 0..ow {
                dst[c] += wk * g_row[c];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let t_row = &tmp[r * ow..(r + 1) * ow];
        let dst = &mut out[r * w..(r + 1) * w];
        for c in 0..ow {
            let g = t_row[c];
            for k in 0..WINDOW {
                dst[c + k] += win[k] * g;
            }
        }
    }
    out
}

fn pool(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out[r * ow + c] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
        }
    }
    out
}

fn pool_adjoint(grad: &[f64], h: usize, w: usize, into: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for r in 0..oh {
        for c in 0..ow {
            let g = 0.25 * grad[r * ow + c];
            let i = 2 * r * w + 2 * c;
            into[i] += g;
            into[i + 1] += g;
            into[i + w] += g;
            into[i + w + 1] += g;
        }
    }
}

struct Level {
    x: Vec<f64>,
    y: Vec<f64>,
    h: usize,
    w: usize,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    s_xx: Vec<f64>,
    s_yy: Vec<f64>,
    s_xy: Vec<f64>,
}

struct PlaneEval {
    value: f64,
    /// Per-scale relu'd factor (cs for all but the last, ssim for the last).
    factors: Vec<f64>,
    levels: Vec<Level>,
}

fn eval_plane(win: &[f64; WINDOW], x: &[f64], y: &[f64], h: usize, w: usize, weights: &[f64]) -> PlaneEval {
    let scales = weights.len();
    let mut levels = Vec::with_capacity(scales);
    let mut factors = Vec::with_capacity(scales);
    let (mut cx, mut cy, mut ch, mut cw) = (x.to_vec(), y.to_vec(), h, w);
    for j in 0..scales {
        let xx: Vec<f64> = cx.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = cy.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = cx.iter().zip(&cy).map(|(a, b)| a * b).collect();
        let mu_x = filter(win, &cx, ch, cw);
        let mu_y = filter(win, &cy, ch, cw);
        let e_xx = filter(win, &xx, ch, cw);
        let e_yy = filter(win, &yy, ch, cw);
        let e_xy = filter(win, &xy, ch, cw);
        let n = mu_x.len();
        let mut s_xx = vec![0.0; n];
        let mut s_yy = vec![0.0; n];
        let mut s_xy = vec![0.0; n];
        let last = j + 1 == scales;
        let mut acc = 0.0;
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            s_xx[i] = e_xx[i] - mx * mx;
            s_yy[i] = e_yy[i] - my * my;
            s_xy[i] = e_xy[i] - mx * my;
            let cs = (2.0 * s_xy[i] + C2) / (s_xx[i] + s_yy[i] + C2);
            acc += if last {
                (2.0 * mx * my + C1) / (mx * mx + my * my + C1) * cs
            } else {
                cs
            };
        }
        factors.push((acc / n as f64).max(0.0));
        let (nh, nw) = (ch / 2, cw / 2);
        let (nx, ny) = if last {
            (Vec::new(), Vec::new())
        } else {
            (pool(&cx, ch, cw), pool(&cy, ch, cw))
        };
        levels.push(Level {
            x: std::mem::replace(&mut cx, nx),
            y: std::mem::replace(&mut cy, ny),
            h: ch,
            w: cw,
            mu_x,
            mu_y,
            s_xx,
            s_yy,
            s_xy,
        });
        ch = nh;
        cw = nw;
    }
    let value = factors
        .iter()
        .zip(weights)
        .map(|(f, w)| f.powf(*w))
        .product();
    PlaneEval { value, factors, levels }
}

/// Gradient of one plane's score with respect to its two inputs, scaled by `upstream`.
fn plane_grad(win: &[f64; WINDOW], eval: &PlaneEval, weights: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let scales = weights.len();
    let top = &eval.levels[0];
    let mut gx_next: Vec<f64> = Vec::new();
    let mut gy_next: Vec<f64> = Vec::new();
    if eval.value == 0.0 || upstream == 0.0 {
        return (vec![0.0; top.x.len()], vec![0.0; top.y.len()]);
    }
    for j in (0..scales).rev() {
        let lv = &eval.levels[j];
        let last = j + 1 == scales;
        // d value / d factor_j, then spread uniformly over the map mean.
        let g_factor = upstream * eval.value * weights[j] / eval.factors[j];
        let n = lv.mu_x.len();
        let g_map = g_factor / n as f64;
        let mut g_mx = vec![0.0; n];
        let mut g_my = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_eyy = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (lv.mu_x[i], lv.mu_y[i]);
            let a = 2.0 * lv.s_xy[i] + C2;
            let b = lv.s_xx[i] + lv.s_yy[i] + C2;
            let cs = a / b;
            let (g_cs, l_terms) = if last {
                let ln = 2.0 * mx * my + C1;
                let ld = mx * mx + my * my + C1;
                let l = ln / ld;
                (g_map * l, Some((g_map * cs, ln, ld)))
            } else {
                (g_map, None)
            };
            let ga = g_cs / b;
            let gb = -g_cs * a / (b * b);
            g_exy[i] = 2.0 * ga;
            g_exx[i] = gb;
            g_eyy[i] = gb;
            let mut dmx = -2.0 * my * ga - 2.0 * mx * gb;
            let mut dmy = -2.0 * mx * ga - 2.0 * my * gb;
            if let Some((g_l, ln, ld)) = l_terms {
                let g_ln = g_l / ld;
                let g_ld = -g_l * ln / (ld * ld);
                dmx += 2.0 * my * g_ln + 2.0 * mx * g_ld;
                dmy += 2.0 * mx * g_ln + 2.0 * my * g_ld;
            }
            g_mx[i] = dmx;
            g_my[i] = dmy;
        }
        let a_mx = filter_adjoint(win, &g_mx, lv.h, lv.w);
        let a_my = filter_adjoint(win, &g_my, lv.h, lv.w);
        let a_xx = filter_adjoint(win, &g_exx, lv.h, lv.w);
        let a_yy = filter_adjoint(win, &g_eyy, lv.h, lv.w);
        let a_xy = filter_adjoint(win, &g_exy, lv.h, lv.w);
        let mut gx = vec![0.0; lv.x.len()];
        let mut gy = vec![0.0; lv.y.len()];
        for i in 0..gx.len() {
            gx[i] = a_mx[i] + 2.0 * lv.x[i] * a_xx[i] + lv.y[i] * a_xy[i];
            gy[i] = a_my[i] + 2.0 * lv.y[i] * a_yy[i] + lv.x[i] * a_xy[i];
        }
        if !gx_next.is_empty() {
            pool_adjoint(&gx_next, lv.h, lv.w, &mut gx);
            pool_adjoint(&gy_next, lv.h, lv.w, &mut gy);
        }
        gx_next = gx;
        gy_next = gy;
    }
    (gx_next, gy_next)
}

fn check(a: &Tensor, b: &Tensor, scales: usize) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "ms_ssim",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    if scales == 0 || scales > MAX_SCALES {
        return Err(crate::error::contract(format!("MS-SSIM scale count {scales} outside 1..=5")));
    }
    let (h, w) = (a.shape().height(), a.shape().width());
    let needed = min_side_for(scales);
    if h.min(w) < needed {
        return Err(Error::ScaleCount {
            height: h,
            width: w,
            scales,
            needed,
        });
    }
    Ok(())
}

/// MS-SSIM of each batch item (mean over its channels).
pub fn ms_ssim_per_item(a: &Tensor, b: &Tensor, scales: usize) -> Result<Vec<f64>> {
    check(a, b, scales)?;
    let win = gaussian_window();
    let weights = scale_weights(scales);
    let [n, c, h, w] = a.shape().0;
    Ok((0..n)
        .map(|item| {
            let sum: f64 = (0..c)
                .map(|ch| eval_plane(&win, a.plane(item, ch), b.plane(item, ch), h, w, &weights).value)
                .sum();
            sum / c as f64
        })
        .collect())
}

/// MS-SSIM averaged over every (item, channel) plane.
pub fn ms_ssim(a: &Tensor, b: &Tensor, scales: usize) -> Result<f64> {
    let per_item = ms_ssim_per_item(a, b, scales)?;
    Ok(per_item.iter().sum::<f64>() / per_item.len() as f64)
}

/// Same as [`ms_ssim`] with the scale count chosen from the image size.
pub fn ms_ssim_auto(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = (a.shape().height(), a.shape().width());
    let scales = feasible_scales(h, w).ok_or(Error::ScaleCount {
        height: h,
        width: w,
        scales: 1,
        needed: WINDOW,
    })?;
    ms_ssim(a, b, scales)
}

/// Value and gradients of `upstream · ms_ssim(a, b)` with respect to `a` and `b`.
pub fn ms_ssim_with_grad(a: &Tensor, b: &Tensor, scales: usize, upstream: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check(a, b, scales)?;
    let win = gaussian_window();
    let weights = scale_weights(scales);
    let [n, c, h, w] = a.shape().0;
    let planes = (n * c) as f64;
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let mut total = 0.0;
    let p = h * w;
    for item in 0..n {
        let mut item_sum = 0.0;
        for ch in 0..c {
            let ev = eval_plane(&win, a.plane(item, ch), b.plane(item, ch), h, w, &weights);
            item_sum += ev.value;
            let (gx, gy) = plane_grad(&win, &ev, &weights, upstream / planes);
            let off = (item * c + ch) * p;
            ga[off..off + p].copy_from_slice(&gx);
            gb[off..off + p].copy_from_slice(&gy);
        }
        total += item_sum / c as f64;
    }
    Ok((total / n as f64, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(g[i], g[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn scale_count_follows_min_side() {
        assert_eq!(feasible_scales(176, 200), Some(5));
        assert_eq!(feasible_scales(175, 200), Some(4));
        assert_eq!(feasible_scales(48, 48), Some(3));
        assert_eq!(feasible_scales(10, 48), None);
        let w = scale_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_small_image_is_a_scale_error() {
        let a = Tensor::zeros(Shape::new(1, 1, 40, 40));
        match ms_ssim(&a, &a, 3) {
            Err(Error::ScaleCount { needed: 44, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(Shape::new(2, 3, 48, 48), 0.0, 1.0, &mut rng);
        assert!((ms_ssim(&a, &a, 3).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adjoints_are_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let win = gaussian_window();
        let (h, w) = (17, 14);
        let x = Tensor::uniform(Shape::new(1, 1, h, w), -1.0, 1.0, &mut rng);
        let g = Tensor::uniform(Shape::new(1, 1, h - 10, w - 10), -1.0, 1.0, &mut rng);
        let fx = filter(&win, x.data(), h, w);
        let atg = filter_adjoint(&win, g.data(), h, w);
        let lhs: f64 = fx.iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let px = pool(x.data(), h, w);
        let gp = Tensor::uniform(Shape::new(1, 1, h / 2, w / 2), -1.0, 1.0, &mut rng);
        let mut atp = vec![0.0; h * w];
        pool_adjoint(gp.data(), h, w, &mut atp);
        let lhs: f64 = px.iter().zip(gp.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&atp).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

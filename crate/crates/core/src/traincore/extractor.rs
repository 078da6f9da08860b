//! Fixed, non-learnable feature pyramid.
//!
//! Each channel is one filter of a fixed bank applied at full resolution
//! (replicate padding), followed by `2^l x 2^l` average pooling for level `l`.

use crate::afsm::PyramidConfig;
use crate::error::{Error, Result};
use crate::numkit::FeatureMap;

/// One filter of the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    /// Repeated box blur of one color channel.
    Blur { color: usize, radius: usize, passes: usize },
    /// Scaled horizontal central difference of blurred luminance.
    GradX { radius: usize, gain: u32 },
    /// Scaled vertical central difference of blurred luminance.
    GradY { radius: usize, gain: u32 },
}

const BLUR_RADII: [(usize, usize); 4] = [(1, 2), (3, 3), (6, 3), (11, 3)];

/// The full bank in channel order: color blurs from fine to coarse, then
/// luminance gradients at two scales.
pub fn standard_bank() -> Vec<Filter> {
    let mut bank = Vec::with_capacity(16);
    for &(radius, passes) in &BLUR_RADII {
        for color in 0..3 {
            bank.push(Filter::Blur { color, radius, passes });
        }
    }
    bank.push(Filter::GradX { radius: 3, gain: 4 });
    bank.push(Filter::GradY { radius: 3, gain: 4 });
    bank.push(Filter::GradX { radius: 6, gain: 8 });
    bank.push(Filter::GradY { radius: 6, gain: 8 });
    bank
}

pub const MAX_CHANNELS: usize = 16;

fn blur_rows(src: &[f64], dst: &mut [f64], w: usize, r: usize) {
    let inv = 1.0 / (2 * r + 1) as f64;
    for (srow, drow) in src.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
        let mut acc = srow[0] * r as f64 + (0..=r).map(|j| srow[j.min(w - 1)]).sum::<f64>();
        for x in 0..w {
            drow[x] = acc * inv;
            acc += srow[(x + r + 1).min(w - 1)] - srow[x.saturating_sub(r)];
        }
    }
}

fn blur_cols(src: &[f64], dst: &mut [f64], h: usize, w: usize, r: usize) {
    let inv = 1.0 / (2 * r + 1) as f64;
    let row = |y: usize| &src[y * w..(y + 1) * w];
    let mut acc: Vec<f64> = row(0).iter().map(|v| v * r as f64).collect();
    for j in 0..=r {
        for (a, v) in acc.iter_mut().zip(row(j.min(h - 1))) {
            *a += v;
        }
    }
    for y in 0..h {
        for (d, a) in dst[y * w..(y + 1) * w].iter_mut().zip(&acc) {
            *d = a * inv;
        }
        let (add, sub) = (row((y + r + 1).min(h - 1)), row(y.saturating_sub(r)));
        for ((a, p), m) in acc.iter_mut().zip(add).zip(sub) {
            *a += p - m;
        }
    }
}

/// Box blur of radius `r` with replicate padding, repeated `passes` times.
pub fn box_blur(plane: &[f64], h: usize, w: usize, r: usize, passes: usize) -> Vec<f64> {
    let mut cur = plane.to_vec();
    let mut tmp = vec![0.0; h * w];
    for _ in 0..passes {
        blur_rows(&cur, &mut tmp, w, r);
        blur_cols(&tmp, &mut cur, h, w, r);
    }
    cur
}

fn central_diff(plane: &[f64], h: usize, w: usize, horizontal: bool, gain: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = if horizontal {
                (plane[y * w + (x + 1).min(w - 1)], plane[y * w + x.saturating_sub(1)])
            } else {
                (plane[(y + 1).min(h - 1) * w + x], plane[y.saturating_sub(1) * w + x])
            };
            out[y * w + x] = gain * (a - b) / 2.0;
        }
    }
    out
}

fn avg_pool(plane: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; oh * ow];
    for (y, row) in plane.chunks_exact(w).enumerate() {
        let orow = &mut out[(y / s) * ow..(y / s + 1) * ow];
        for (o, block) in orow.iter_mut().zip(row.chunks_exact(s)) {
            *o += block.iter().sum::<f64>();
        }
    }
    let norm = (s * s) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Apply the first `cfg.channels` filters of the standard bank and pool to every level.
pub fn extract_pyramid(img: &FeatureMap, cfg: &PyramidConfig) -> Result<Vec<FeatureMap>> {
    cfg.validate()?;
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
    }
    if cfg.channels > MAX_CHANNELS {
        return Err(Error::Config(format!(
            "the filter bank provides at most {MAX_CHANNELS} channels, {} requested",
            cfg.channels
        )));
    }
    if !img.is_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    let s = 1usize << cfg.max_level();
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by 2^{}",
            cfg.max_level()
        )));
    }
    let bank = &standard_bank()[..cfg.channels];
    let mut lum: Option<Vec<f64>> = None;
    let mut lum_blur: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut responses = Vec::with_capacity(bank.len());
    for f in bank {
        let resp = match *f {
            Filter::Blur { color, radius, passes } => box_blur(img.channel(color), h, w, radius, passes),
            Filter::GradX { radius, gain } | Filter::GradY { radius, gain } => {
                let lum = lum.get_or_insert_with(|| {
                    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
                    r.iter().zip(g).zip(b).map(|((r, g), b)| (r + g + b) / 3.0).collect()
                });
                let idx = match lum_blur.iter().position(|(r, _)| *r == radius) {
                    Some(i) => i,
                    None => {
                        lum_blur.push((radius, box_blur(lum, h, w, radius, 3)));
                        lum_blur.len() - 1
                    }
                };
                central_diff(&lum_blur[idx].1, h, w, matches!(f, Filter::GradX { .. }), gain as f64)
            }
        };
        responses.push(resp);
    }
    cfg.levels
        .iter()
        .map(|&l| {
            let s = 1usize << l;
            let data: Vec<f64> = responses.iter().flat_map(|r| avg_pool(r, h, w, s)).collect();
            Ok(FeatureMap::from_vec(cfg.channels, h / s, w / s, data)?.with_level(l))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Fill;

    #[test]
    fn constant_image_gives_constant_blur_and_zero_gradient() {
        let img = FeatureMap::new(3, 32, 32, Fill::Constant(0.25)).unwrap();
        let pyr = extract_pyramid(&img, &PyramidConfig::default()).unwrap();
        for level in &pyr {
            for c in 0..12 {
                assert!(level.channel(c).iter().all(|v| (v - 0.25).abs() < 1e-12));
            }
            for c in 12..16 {
                assert!(level.channel(c).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn level_shapes_and_determinism() {
        let img = FeatureMap::new(
            3,
            128,
            128,
            Fill::SeededUniform {
                lo: 0.0,
                hi: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        let cfg = PyramidConfig::default();
        let a = extract_pyramid(&img, &cfg).unwrap();
        let shapes: Vec<_> = a.iter().map(|m| (m.height(), m.width(), m.level())).collect();
        assert_eq!(shapes, vec![(16, 16, Some(3)), (8, 8, Some(4)), (4, 4, Some(5))]);
        assert_eq!(a, extract_pyramid(&img, &cfg).unwrap());
    }

    #[test]
    fn rejects_indivisible_and_oversized() {
        let img = FeatureMap::zeros(3, 40, 40);
        assert!(matches!(
            extract_pyramid(&img, &PyramidConfig::default()),
            Err(Error::InvalidShape(_))
        ));
        let cfg = PyramidConfig {
            channels: 17,
            ..Default::default()
        };
        assert!(extract_pyramid(&FeatureMap::zeros(3, 32, 32), &cfg).is_err());
    }

    #[test]
    fn blur_matches_direct_window_average() {
        let plane: Vec<f64> = (0..35).map(|i| ((i * 7) % 11) as f64).collect();
        let (h, w, r) = (5, 7, 2);
        let got = box_blur(&plane, h, w, r, 1);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -(r as i64)..=r as i64 {
                    for dx in -(r as i64)..=r as i64 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += plane[yy * w + xx];
                    }
                }
                assert!((got[y * w + x] - s / 25.0).abs() < 1e-12);
            }
        }
    }
}

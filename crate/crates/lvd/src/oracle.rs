//! Mean-hue color classifier for decoded samples.

use crate::data::{BACKGROUND, NUM_COLORS};

/// Hue in degrees of each sprite color, indexed like `data::COLORS`.
pub const COLOR_HUES: [f64; NUM_COLORS] = [0.0, 120.0, 240.0, 60.0];

/// Pixels with any channel this far above the background count as sprite.
pub const FOREGROUND_MARGIN: f32 = 0.6;

/// Hue in degrees of an RGB triple in `[0, 1]`; `None` for greys.
pub fn hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c < 1e-6 {
        return None;
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some(60.0 * h)
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Classifies interleaved RGB pixels in `[-1, 1]` by the hue of the mean
/// foreground color. Returns `None` when no pixel stands out.
pub fn classify_color(pixels: &[f32]) -> Option<usize> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for px in pixels.chunks_exact(3) {
        if px.iter().any(|&v| v > BACKGROUND + FOREGROUND_MARGIN) {
            for c in 0..3 {
                sum[c] += ((px[c] as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let h = hue(sum.map(|s| s / n as f64))?;
    (0..NUM_COLORS)
        .min_by(|&a, &b| hue_distance(h, COLOR_HUES[a]).total_cmp(&hue_distance(h, COLOR_HUES[b])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_clip, SpriteClass, ToyDatasetSpec, COLORS};

    #[test]
    fn hues_of_primaries() {
        assert_eq!(hue([1.0, 0.0, 0.0]), Some(0.0));
        assert_eq!(hue([0.0, 1.0, 0.0]), Some(120.0));
        assert_eq!(hue([0.0, 0.0, 1.0]), Some(240.0));
        assert_eq!(hue([1.0, 1.0, 0.0]), Some(60.0));
        assert_eq!(hue([0.5, 0.5, 0.5]), None);
        for (i, c) in COLORS.iter().enumerate() {
            let h = hue(c.map(|v| (v as f64 + 1.0) / 2.0)).unwrap();
            assert!(hue_distance(h, COLOR_HUES[i]) < 1e-9);
        }
    }

    #[test]
    fn recovers_rendered_colors() {
        let s = ToyDatasetSpec::default();
        for color in 0..NUM_COLORS {
            let v = render_clip(&s, SpriteClass::new(color, 3), [2, 3]).unwrap();
            assert_eq!(classify_color(v.tensor().data()), Some(color));
        }
        assert_eq!(classify_color(&[BACKGROUND; 48]), None);
    }
}

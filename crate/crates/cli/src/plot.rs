//! Minimal line charts for training curves.

use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 6] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 23, 23]];
const COLOR_NAMES: [&str; 6] = ["red", "blue", "green", "orange", "purple", "black"];

/// Colour assigned to each series, in order.
pub fn legend(keys: &[&str]) -> Vec<String> {
    keys.iter().enumerate().map(|(i, k)| format!("{k}: {}", COLOR_NAMES[i % COLOR_NAMES.len()])).collect()
}

/// Plots every series on shared axes; the y range covers the 1st to 99th percentile.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20.0;
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    if points.is_empty() {
        return img;
    }
    let mut ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    ys.sort_by(f64::total_cmp);
    let pick = |q: f64| ys[((ys.len() - 1) as f64 * q).round() as usize];
    let (mut y0, mut y1) = (pick(0.01), pick(0.99));
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x0 = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).max(x0 + 1.0);
    let (w, h) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let to_px = |(x, y): (f64, f64)| (margin + (x - x0) / (x1 - x0) * w, margin + (1.0 - ((y - y0) / (y1 - y0)).clamp(0.0, 1.0)) * h);
    let grey = Rgb([170, 170, 170]);
    line(&mut img, (margin, margin + h), (margin + w, margin + h), grey);
    line(&mut img, (margin, margin), (margin, margin + h), grey);
    if y0 < 0.0 && y1 > 0.0 {
        let zero = to_px((x0, 0.0)).1;
        line(&mut img, (margin, zero), (margin + w, zero), Rgb([220, 220, 220]));
    }
    for (i, (_, s)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in s.windows(2) {
            if pair.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
                line(&mut img, to_px(pair[0]), to_px(pair[1]), c);
            }
        }
    }
    img
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_colours() {
        let s = vec![("a".to_string(), vec![(0.0, 0.0), (10.0, 1.0)]), ("b".to_string(), vec![(0.0, 1.0), (10.0, 0.0)])];
        let img = line_chart(&s, 100, 60);
        let count = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count();
        assert!(count(PALETTE[0]) > 20 && count(PALETTE[1]) > 20);
        assert_eq!(legend(&["a", "b"]), vec!["a: red", "b: blue"]);
    }

    #[test]
    fn empty_and_flat_inputs() {
        assert_eq!(line_chart(&[], 10, 10).pixels().filter(|p| p.0 != [255; 3]).count(), 0);
        let flat = vec![("a".to_string(), vec![(0.0, 2.0), (1.0, 2.0)])];
        assert!(line_chart(&flat, 50, 30).pixels().any(|p| p.0 == PALETTE[0]));
    }
}

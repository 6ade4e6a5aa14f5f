//! Static figure emission: composited PNG panels and a small hand-rolled
//! SVG line plot. No plotting dependency; the files are simple enough to
//! write directly.

use attnguide_core::{Error, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;

/// Render an attention map (values in [0, 1]) as a grayscale RGB panel.
pub fn map_panel(map: &Array2<f64>) -> Result<RgbImage> {
    let (h, w) = map.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), v) in map.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::validation("attention map contains non-finite values"));
        }
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
    }
    Ok(img)
}

pub fn upscale_nearest(img: &RgbImage, factor: u32) -> RgbImage {
    assert!(factor > 0);
    RgbImage::from_fn(img.width() * factor, img.height() * factor, |x, y| {
        *img.get_pixel(x / factor, y / factor)
    })
}

/// Place panels side by side on a white background, top-aligned.
pub fn hstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    assert!(!panels.is_empty());
    let height = panels.iter().map(|p| p.height()).max().unwrap();
    let width: u32 =
        panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for panel in panels {
        for (x, y, px) in panel.enumerate_pixels() {
            canvas.put_pixel(x0 + x, y, *px);
        }
        x0 += panel.width() + gap;
    }
    canvas
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22",
];

/// Write a line plot of the given series. Axes are scaled to the data; the
/// output is deterministic for identical input.
pub fn write_line_plot(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::validation("nothing to plot"));
    }
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 150.0, 40.0, 40.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    y0 = y0.min(0.0);
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = move |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = move |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        ml + pw / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n"
    ));
    for (label, v, anchor, tx, ty) in [
        (format!("{x0:.0}"), x0, "middle", sx(x0), h - 16.0),
        (format!("{x1:.0}"), x1, "middle", sx(x1), h - 16.0),
        (format!("{y0:.3}"), y0, "end", ml - 6.0, sy(y0) + 4.0),
        (format!("{y1:.3}"), y1, "end", ml - 6.0, sy(y1) + 4.0),
    ] {
        let _ = v;
        svg.push_str(&format!(
            "<text x=\"{tx:.1}\" y=\"{ty:.1}\" text-anchor=\"{anchor}\">{label}</text>\n"
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 14.0 * i as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            w - mr + 8.0,
            w - mr + 28.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            w - mr + 34.0,
            ly + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn map_panel_quantizes_like_the_png_writer() {
        let img = map_panel(&arr2(&[[0.0, 0.5], [1.0, 0.25]])).unwrap();
        assert_eq!(img.get_pixel(1, 0).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(0, 1).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 1).0, [64, 64, 64]);
    }

    #[test]
    fn hstack_places_panels_with_gap() {
        let a = RgbImage::from_pixel(2, 2, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(3, 1, Rgb([4, 5, 6]));
        let out = hstack(&[a, b], 2);
        assert_eq!(out.dimensions(), (7, 2));
        assert_eq!(out.get_pixel(0, 0).0, [1, 2, 3]);
        assert_eq!(out.get_pixel(2, 0).0, [255, 255, 255]);
        assert_eq!(out.get_pixel(4, 0).0, [4, 5, 6]);
        assert_eq!(out.get_pixel(4, 1).0, [255, 255, 255]);
    }

    #[test]
    fn upscale_is_exact_replication() {
        let mut a = RgbImage::new(2, 1);
        a.put_pixel(0, 0, Rgb([10, 0, 0]));
        a.put_pixel(1, 0, Rgb([20, 0, 0]));
        let up = upscale_nearest(&a, 3);
        assert_eq!(up.dimensions(), (6, 3));
        assert_eq!(up.get_pixel(2, 2).0, [10, 0, 0]);
        assert_eq!(up.get_pixel(3, 0).0, [20, 0, 0]);
    }

    #[test]
    fn plot_is_deterministic_and_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![Series {
            label: "v".into(),
            points: vec![(0.0, 0.0), (10.0, 0.3), (20.0, 0.25)],
        }];
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        write_line_plot(&p1, "drift", &series).unwrap();
        write_line_plot(&p2, "drift", &series).unwrap();
        let (a, b) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.trim_end().ends_with("</svg>"));
    }
}

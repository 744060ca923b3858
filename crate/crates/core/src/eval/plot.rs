//! Minimal PNG line charts for reports: axes, gridlines, polylines and
//! numeric endpoint labels drawn with a tiny built-in digit font.

use std::path::Path;

use crate::eval::metrics::EvalError;

const W: usize = 480;
const H: usize = 480;
const MARGIN: usize = 40;

/// 3×5 bitmaps for the characters "0123456789.-".
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

struct Canvas {
    pixels: Vec<u8>, // RGB rows
}

impl Canvas {
    fn new() -> Self {
        Self { pixels: vec![255; W * H * 3] }
    }

    fn put(&mut self, x: i64, y: i64, rgb: (u8, u8, u8)) {
        if x < 0 || y < 0 || x as usize >= W || y as usize >= H {
            return;
        }
        let idx = (y as usize * W + x as usize) * 3;
        self.pixels[idx] = rgb.0;
        self.pixels[idx + 1] = rgb.1;
        self.pixels[idx + 2] = rgb.2;
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: (u8, u8, u8)) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            self.put(x.round() as i64, y.round() as i64, rgb);
        }
    }

    fn text(&mut self, x: usize, y: usize, text: &str, rgb: (u8, u8, u8)) {
        let mut cx = x;
        for ch in text.chars() {
            if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
                for (ry, row) in rows.iter().enumerate() {
                    for rx in 0..3 {
                        if row & (0b100 >> rx) != 0 {
                            self.put((cx + rx) as i64, (y + ry) as i64, rgb);
                        }
                    }
                }
            }
            cx += 4;
        }
    }
}

/// One polyline with a fixed color.
pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: (u8, u8, u8),
}

/// Renders series into a shared data box with gridlines at quarter steps and
/// numeric range labels on both axes.
pub fn render_line_chart(series: &[Series<'_>], path: &Path) -> Result<(), EvalError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    assert!(!all.is_empty(), "chart needs at least one point");
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN as f64 + (x - x0) / (x1 - x0) * (W - 2 * MARGIN) as f64;
    let py = |y: f64| (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * (H - 2 * MARGIN) as f64;

    let mut canvas = Canvas::new();
    let grid = (220, 220, 220);
    for q in 0..=4 {
        let gx = px(x0 + q as f64 / 4.0 * (x1 - x0));
        let gy = py(y0 + q as f64 / 4.0 * (y1 - y0));
        canvas.line(gx, py(y0), gx, py(y1), grid);
        canvas.line(px(x0), gy, px(x1), gy, grid);
    }
    let axis = (0, 0, 0);
    canvas.line(px(x0), py(y0), px(x1), py(y0), axis);
    canvas.line(px(x0), py(y0), px(x0), py(y1), axis);

    let fmt = |v: f64| {
        if v == 0.0 {
            "0".to_string()
        } else if v.abs() >= 100.0 {
            format!("{v:.0}")
        } else {
            format!("{v:.3}")
        }
    };
    canvas.text(MARGIN, H - MARGIN + 8, &fmt(x0), axis);
    canvas.text(W - MARGIN - 24, H - MARGIN + 8, &fmt(x1), axis);
    canvas.text(4, H - MARGIN - 5, &fmt(y0), axis);
    canvas.text(4, MARGIN, &fmt(y1), axis);

    for s in series {
        for pair in s.points.windows(2) {
            canvas.line(px(pair[0].0), py(pair[0].1), px(pair[1].0), py(pair[1].1), s.color);
        }
        if s.points.len() == 1 {
            canvas.put(px(s.points[0].0) as i64, py(s.points[0].1) as i64, s.color);
        }
    }

    let img = image::RgbImage::from_raw(W as u32, H as u32, canvas.pixels)
        .expect("canvas buffer sized");
    img.save(path).map_err(|e| EvalError::CodecFailure(e.to_string()))
}

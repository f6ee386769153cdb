//! Flat-color, anti-aliasing-free rasterizer.
//!
//! All inside/outside tests run in integer half-pixel coordinates, so
//! rendered tensors are bit-identical across platforms.

use super::{SceneError, SceneShape, SceneSpec};
use crate::numerics::{Scalar, Tensor};

pub const BACKGROUND: f64 = 0.1;

/// Renders a scene to a [3, S, S] channel-major tensor. The image size
/// must be divisible by both grid dimensions. Squares fill 80% of their
/// cell (integer-floored), circles inscribe that block, triangles point
/// upward within it.
pub fn render<T: Scalar>(scene: &SceneSpec, image_size: usize) -> Result<Tensor<T>, SceneError> {
    let (rows, cols) = scene.grid;
    if image_size == 0 || image_size % rows != 0 || image_size % cols != 0 {
        return Err(SceneError::Config(format!(
            "image size {image_size} not divisible by grid {rows}x{cols}"
        )));
    }
    scene.validate()?;
    let s = image_size;
    let ch = s / rows; // cell height in pixels
    let cw = s / cols; // cell width in pixels

    let bg = T::from_f64(BACKGROUND);
    let mut data = vec![bg; 3 * s * s];

    for obj in &scene.objects {
        let (r, c) = obj.cell;
        // 80% block, centered, integer-floored.
        let w = cw * 4 / 5;
        let h = ch * 4 / 5;
        let x0 = c * cw + (cw - w) / 2;
        let y0 = r * ch + (ch - h) / 2;
        let rgb = obj.color.rgb();
        let rgb_t = [
            T::from_f64(rgb[0]),
            T::from_f64(rgb[1]),
            T::from_f64(rgb[2]),
        ];

        for py in y0..y0 + h {
            for px in x0..x0 + w {
                if covers(obj.shape, px, py, x0, y0, w, h) {
                    for (chan, &v) in rgb_t.iter().enumerate() {
                        data[chan * s * s + py * s + px] = v;
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(vec![3, s, s], data))
}

/// Inside test in doubled (half-pixel) integer coordinates. The pixel
/// center of (px, py) is (2px+1, 2py+1).
fn covers(
    shape: SceneShape,
    px: usize,
    py: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> bool {
    let (px2, py2) = (2 * px as i64 + 1, 2 * py as i64 + 1);
    let (x02, y02) = (2 * x0 as i64, 2 * y0 as i64);
    let (w2, h2) = (2 * w as i64, 2 * h as i64);
    match shape {
        SceneShape::Square => true, // the loop bounds already trace the block
        SceneShape::Circle => {
            let cx = x02 + w2 / 2;
            let cy = y02 + h2 / 2;
            let radius = w2.min(h2) / 2;
            let dx = px2 - cx;
            let dy = py2 - cy;
            dx * dx + dy * dy <= radius * radius
        }
        SceneShape::Triangle => {
            // Apex top-center, base along the bottom edge of the block.
            let a = (x02 + w2 / 2, y02);
            let b = (x02, y02 + h2);
            let c = (x02 + w2, y02 + h2);
            let edge = |p: (i64, i64), q: (i64, i64)| -> i64 {
                (q.0 - p.0) * (py2 - p.1) - (q.1 - p.1) * (px2 - p.0)
            };
            let e0 = edge(a, b);
            let e1 = edge(b, c);
            let e2 = edge(c, a);
            (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
        }
    }
}

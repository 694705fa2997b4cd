//! Random-walk polylines, used both for synthetic cracks and for crack-like
//! distractor textures.

use std::ops::ControlFlow;

use rand::Rng;

/// Shape parameters for a random-walk polyline.
#[derive(Debug, Clone, Copy)]
pub struct WalkStyle {
    /// Maximum heading change per step, in degrees.
    pub max_turn_deg: f64,
    /// Step length range in pixels (inclusive bounds).
    pub step_len: (f64, f64),
    pub steps: usize,
}

/// Vertices of a random walk starting at a uniformly drawn point inside an
/// `height × width` canvas. The walk stops early when it leaves the canvas.
pub fn random_walk<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    style: WalkStyle,
) -> Vec<(f64, f64)> {
    let mut y = rng.random_range(0.0..height as f64);
    let mut x = rng.random_range(0.0..width as f64);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let max_turn = style.max_turn_deg.to_radians();
    let mut points = vec![(y, x)];
    for _ in 0..style.steps {
        heading += rng.random_range(-max_turn..=max_turn);
        let len = rng.random_range(style.step_len.0..=style.step_len.1);
        y += len * heading.sin();
        x += len * heading.cos();
        points.push((y, x));
        if y < 0.0 || x < 0.0 || y >= height as f64 || x >= width as f64 {
            break;
        }
    }
    points
}

/// Visits every pixel covered by a `brush`-wide square stamp dragged along the
/// polyline. Pixels may be visited more than once. The visitor can stop the
/// traversal early by returning `ControlFlow::Break`.
pub fn rasterize_polyline<F>(
    points: &[(f64, f64)],
    brush: usize,
    height: usize,
    width: usize,
    mut visit: F,
) -> ControlFlow<()>
where
    F: FnMut(usize, usize) -> ControlFlow<()>,
{
    let brush = brush.max(1);
    let half = (brush as f64 - 1.0) / 2.0;
    let mut stamp = |cy: f64, cx: f64| -> ControlFlow<()> {
        let y0 = (cy - half).round() as i64;
        let x0 = (cx - half).round() as i64;
        for y in y0..y0 + brush as i64 {
            for x in x0..x0 + brush as i64 {
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                    visit(y as usize, x as usize)?;
                }
            }
        }
        ControlFlow::Continue(())
    };
    if let [only] = points {
        return stamp(only.0, only.1);
    }
    for seg in points.windows(2) {
        let (ay, ax) = seg[0];
        let (by, bx) = seg[1];
        let dist = ((by - ay).powi(2) + (bx - ax).powi(2)).sqrt();
        let n = (dist * 2.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            stamp(ay + t * (by - ay), ax + t * (bx - ax))?;
        }
    }
    ControlFlow::Continue(())
}

//! Axis-aligned building footprints on the integer pixel grid.
//!
//! A pixel `(x, y)` belongs to a footprint when its centre `(x + 0.5, y + 0.5)`
//! lies inside the polygon. Vertices are integers, so centres never fall on
//! an edge.

use serde::{Deserialize, Serialize};

/// Half-open box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            ((self.x1 - self.x0) * (self.y1 - self.y0)) as usize
        }
    }

    pub fn grow(&self, m: i32) -> Rect {
        Rect::new(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Rect {
        Rect::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomRight,
    BottomLeft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Footprint {
    Rect(Rect),
    /// `outer` with a `notch_w x notch_h` box cut from one corner.
    L {
        outer: Rect,
        corner: Corner,
        notch_w: i32,
        notch_h: i32,
    },
}

impl Footprint {
    pub fn bbox(&self) -> Rect {
        match *self {
            Footprint::Rect(r) => r,
            Footprint::L { outer, .. } => outer,
        }
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Footprint {
        match *self {
            Footprint::Rect(r) => Footprint::Rect(r.translate(dx, dy)),
            Footprint::L { outer, corner, notch_w, notch_h } => Footprint::L {
                outer: outer.translate(dx, dy),
                corner,
                notch_w,
                notch_h,
            },
        }
    }

    /// Disjoint boxes whose union is the footprint.
    pub fn parts(&self) -> Vec<Rect> {
        match *self {
            Footprint::Rect(r) => vec![r],
            Footprint::L { outer: o, corner, notch_w: w, notch_h: h } => {
                let (top, left) = match corner {
                    Corner::TopLeft => (true, true),
                    Corner::TopRight => (true, false),
                    Corner::BottomRight => (false, false),
                    Corner::BottomLeft => (false, true),
                };
                let (band, rest) = if top {
                    (Rect::new(o.x0, o.y0, o.x1, o.y0 + h), Rect::new(o.x0, o.y0 + h, o.x1, o.y1))
                } else {
                    (Rect::new(o.x0, o.y1 - h, o.x1, o.y1), Rect::new(o.x0, o.y0, o.x1, o.y1 - h))
                };
                let band = if left {
                    Rect::new(band.x0 + w, band.y0, band.x1, band.y1)
                } else {
                    Rect::new(band.x0, band.y0, band.x1 - w, band.y1)
                };
                vec![band, rest]
            }
        }
    }

    pub fn area(&self) -> usize {
        self.parts().iter().map(Rect::area).sum()
    }

    /// Boundary vertices in order.
    pub fn polygon(&self) -> Vec<(i32, i32)> {
        match *self {
            Footprint::Rect(r) => vec![(r.x0, r.y0), (r.x1, r.y0), (r.x1, r.y1), (r.x0, r.y1)],
            Footprint::L { outer: o, corner, notch_w: w, notch_h: h } => match corner {
                Corner::TopLeft => vec![
                    (o.x0 + w, o.y0),
                    (o.x1, o.y0),
                    (o.x1, o.y1),
                    (o.x0, o.y1),
                    (o.x0, o.y0 + h),
                    (o.x0 + w, o.y0 + h),
                ],
                Corner::TopRight => vec![
                    (o.x0, o.y0),
                    (o.x1 - w, o.y0),
                    (o.x1 - w, o.y0 + h),
                    (o.x1, o.y0 + h),
                    (o.x1, o.y1),
                    (o.x0, o.y1),
                ],
                Corner::BottomRight => vec![
                    (o.x0, o.y0),
                    (o.x1, o.y0),
                    (o.x1, o.y1 - h),
                    (o.x1 - w, o.y1 - h),
                    (o.x1 - w, o.y1),
                    (o.x0, o.y1),
                ],
                Corner::BottomLeft => vec![
                    (o.x0, o.y0),
                    (o.x1, o.y0),
                    (o.x1, o.y1),
                    (o.x0 + w, o.y1),
                    (o.x0 + w, o.y1 - h),
                    (o.x0, o.y1 - h),
                ],
            },
        }
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Sets every pixel of `fp` inside the raster.
    pub fn fill(&mut self, fp: &Footprint) {
        for r in fp.parts() {
            let x0 = r.x0.clamp(0, self.width as i32) as usize;
            let x1 = r.x1.clamp(0, self.width as i32) as usize;
            let y0 = r.y0.clamp(0, self.height as i32) as usize;
            let y1 = r.y1.clamp(0, self.height as i32) as usize;
            for y in y0..y1 {
                self.data[y * self.width + x0..y * self.width + x1].fill(true);
            }
        }
    }

    pub fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Even-odd crossing test of a point against a closed polygon.
pub fn point_in_polygon(poly: &[(i32, i32)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xa, ya) = (poly[i].0 as f64, poly[i].1 as f64);
        let (xb, yb) = (poly[(i + 1) % n].0 as f64, poly[(i + 1) % n].1 as f64);
        if (ya > py) != (yb > py) {
            let x_cross = xa + (py - ya) * (xb - xa) / (yb - ya);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

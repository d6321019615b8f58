//! Arc-length parameterized polylines in the plane.

pub type Point = [f64; 2];

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    /// Arc length at each vertex.
    cumulative: Vec<f64>,
}

/// Closest point of a polyline to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arc_length: f64,
    pub point: Point,
    pub distance: f64,
}

impl Polyline {
    /// Needs at least two vertices with no zero-length segment.
    pub fn new(points: Vec<Point>) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let len = dist(w[0], w[1]);
            if !(len > 0.0) {
                return None;
            }
            cumulative.push(cumulative.last().unwrap() + len);
        }
        Some(Self { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.points
    }

    /// Arc length of vertex `i`.
    pub fn vertex_arc_length(&self, i: usize) -> f64 {
        self.cumulative[i]
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> Point {
        if s <= 0.0 {
            return self.points[0];
        }
        if s >= self.length() {
            return *self.points.last().unwrap();
        }
        let seg = self.cumulative.partition_point(|&c| c <= s) - 1;
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let frac = (s - self.cumulative[seg]) / (self.cumulative[seg + 1] - self.cumulative[seg]);
        [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
    }

    /// Nearest point; the first segment wins ties.
    pub fn project(&self, x: Point) -> Projection {
        let mut best = Projection { arc_length: 0.0, point: self.points[0], distance: f64::INFINITY };
        for (seg, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let frac = (((x[0] - a[0]) * ab[0] + (x[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
            let p = [a[0] + frac * ab[0], a[1] + frac * ab[1]];
            let d = dist(x, p);
            if d < best.distance {
                best = Projection { arc_length: self.cumulative[seg] + frac * len2.sqrt(), point: p, distance: d };
            }
        }
        best
    }
}

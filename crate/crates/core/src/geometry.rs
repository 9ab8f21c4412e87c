use std::f64::consts::PI;

pub type Point3 = [f64; 3];

/// Oriented 3D box. `size` is `(w, l, h)`: length runs along the heading
/// (`yaw` about +z), width across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Whether `p` lies inside the box grown by `margin` on every side.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let [lx, ly, lz] = self.to_local(p);
        let [w, l, h] = self.size;
        lx.abs() <= l / 2.0 + margin && ly.abs() <= w / 2.0 + margin && lz.abs() <= h / 2.0 + margin
    }

    /// Coordinates of `p` in the box frame (origin at center, x along heading).
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn from_local(&self, q: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * q[0] - s * q[1],
            self.center[1] + s * q[0] + c * q[1],
            self.center[2] + q[2],
        ]
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

pub fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25 + 2.0 * PI) - 0.25).abs() < 1e-12);
        for k in -20..20 {
            let w = wrap_angle(k as f64 * 0.7);
            assert!((-PI..PI).contains(&w));
        }
    }

    #[test]
    fn rotated_box_containment() {
        let b = Box3D {
            center: [1.0, 1.0, 0.5],
            size: [1.0, 4.0, 1.0],
            yaw: PI / 2.0,
        };
        // Length now runs along +y.
        assert!(b.contains(&[1.0, 2.9, 0.5], 0.0));
        assert!(!b.contains(&[2.9, 1.0, 0.5], 0.0));
        assert!(b.contains(&[1.55, 1.0, 0.5], 0.1));
        let q = [0.3, -0.2, 0.1];
        let back = b.to_local(&b.from_local(&q));
        for i in 0..3 {
            assert!((back[i] - q[i]).abs() < 1e-12);
        }
    }
}

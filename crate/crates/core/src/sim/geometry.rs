use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Point or direction in the world frame (m). `z` is up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct V3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl V3 {
    pub const ZERO: V3 = V3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        V3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        V3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: V3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: V3) -> V3 {
        V3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> V3 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }

    pub fn xy(self) -> V3 {
        V3::new(self.x, self.y, 0.0)
    }

    pub fn dist(self, o: V3) -> f64 {
        (self - o).norm()
    }
}

impl Add for V3 {
    type Output = V3;
    fn add(self, o: V3) -> V3 {
        V3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for V3 {
    fn add_assign(&mut self, o: V3) {
        *self = *self + o;
    }
}

impl Sub for V3 {
    type Output = V3;
    fn sub(self, o: V3) -> V3 {
        V3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for V3 {
    type Output = V3;
    fn mul(self, s: f64) -> V3 {
        V3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for V3 {
    type Output = V3;
    fn neg(self) -> V3 {
        V3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation stored as three column vectors (the rotated frame's axes
/// expressed in the parent frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot3 {
    pub cols: [V3; 3],
}

impl Rot3 {
    pub const IDENTITY: Rot3 =
        Rot3 { cols: [V3::new(1.0, 0.0, 0.0), V3::new(0.0, 1.0, 0.0), V3::new(0.0, 0.0, 1.0)] };

    pub fn about_z(yaw: f64) -> Rot3 {
        let (s, c) = yaw.sin_cos();
        Rot3 { cols: [V3::new(c, s, 0.0), V3::new(-s, c, 0.0), V3::new(0.0, 0.0, 1.0)] }
    }

    /// Child-frame coordinates to parent-frame coordinates.
    pub fn apply(&self, v: V3) -> V3 {
        self.cols[0] * v.x + self.cols[1] * v.y + self.cols[2] * v.z
    }

    /// Parent-frame coordinates to child-frame coordinates.
    pub fn apply_inv(&self, v: V3) -> V3 {
        V3::new(self.cols[0].dot(v), self.cols[1].dot(v), self.cols[2].dot(v))
    }
}

/// Rigid transform `p_parent = rotation * p_child + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: Rot3,
    pub translation: V3,
}

impl Rigid {
    pub fn to_parent(&self, p: V3) -> V3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn to_child(&self, p: V3) -> V3 {
        self.rotation.apply_inv(p - self.translation)
    }
}

/// Closest point to `p` on segment `ab`, in the horizontal plane.
pub fn closest_on_segment_xy(a: V3, b: V3, p: V3) -> V3 {
    let ab = (b - a).xy();
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).xy().dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    a.xy() + ab * t
}

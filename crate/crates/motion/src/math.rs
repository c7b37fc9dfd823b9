//! Small fixed-size vector/rotation helpers for forward kinematics.

pub type Vec3 = [f64; 3];

/// Row-major 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(r)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1] + self.0[0][2] * v[2],
            self.0[1][0] * v[0] + self.0[1][1] * v[1] + self.0[1][2] * v[2],
            self.0[2][0] * v[0] + self.0[2][1] * v[1] + self.0[2][2] * v[2],
        ]
    }

    /// Reflect across the x = 0 plane: M R M with M = diag(-1, 1, 1).
    pub fn mirror_x(&self) -> Mat3 {
        let mut r = self.0;
        r[0][1] = -r[0][1];
        r[0][2] = -r[0][2];
        r[1][0] = -r[1][0];
        r[2][0] = -r[2][0];
        Mat3(r)
    }

    /// Continuous 6-value encoding: the first two columns, column-major.
    pub fn to_6d(&self) -> [f64; 6] {
        [
            self.0[0][0], self.0[1][0], self.0[2][0],
            self.0[0][1], self.0[1][1], self.0[2][1],
        ]
    }
}

pub fn mirror_vec_x(v: Vec3) -> Vec3 {
    [-v[0], v[1], v[2]]
}

/// Smoothstep ramp on [0, 1].
pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotations_are_orthonormal() {
        let r = Mat3::rot_x(0.3).mul(&Mat3::rot_y(-1.1)).mul(&Mat3::rot_z(2.0));
        for i in 0..3 {
            let col_i = [r.0[0][i], r.0[1][i], r.0[2][i]];
            assert!((norm(col_i) - 1.0).abs() < 1e-12);
            for j in (i + 1)..3 {
                let col_j = [r.0[0][j], r.0[1][j], r.0[2][j]];
                assert!(dot(col_i, col_j).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_preserves_rotation_property() {
        let r = Mat3::rot_x(0.7).mul(&Mat3::rot_z(-0.4));
        let m = r.mirror_x();
        // determinant stays +1
        let det = m.0[0][0] * (m.0[1][1] * m.0[2][2] - m.0[1][2] * m.0[2][1])
            - m.0[0][1] * (m.0[1][0] * m.0[2][2] - m.0[1][2] * m.0[2][0])
            + m.0[0][2] * (m.0[1][0] * m.0[2][1] - m.0[1][1] * m.0[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
    }
}

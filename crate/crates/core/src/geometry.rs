//! 4×4 homogeneous matrices and orientation codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Homogeneous 4×4 matrix, row-major. Used both for voxel→world affines and
/// for voxel-space resampling maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Affine(pub [[f64; 4]; 4]);

impl Default for Affine {
    fn default() -> Self {
        Affine::identity()
    }
}

impl Affine {
    pub fn identity() -> Self {
        Affine::diag([1.0, 1.0, 1.0])
    }

    pub fn diag(d: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        m[0][0] = d[0];
        m[1][1] = d[1];
        m[2][2] = d[2];
        m[3][3] = 1.0;
        Affine(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Affine::identity();
        for i in 0..3 {
            a.0[i][3] = t[i];
        }
        a
    }

    /// Builds an affine from a 3×3 linear part and a translation.
    pub fn from_parts(linear: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&linear[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Affine(m)
    }

    pub fn from_rows(rows: [f64; 16]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, r) in m.iter_mut().enumerate() {
            r.copy_from_slice(&rows[4 * i..4 * i + 4]);
        }
        Affine(m)
    }

    pub fn to_rows(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.0[i]);
        }
        out
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            l[i].copy_from_slice(&self.0[i][..3]);
        }
        l
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn set_column(&mut self, j: usize, c: [f64; 3]) {
        for i in 0..3 {
            self.0[i][j] = c[i];
        }
    }

    pub fn mul(&self, rhs: &Affine) -> Affine {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Affine(m)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0[i][0] * p[0] + self.0[i][1] * p[1] + self.0[i][2] * p[2] + self.0[i][3];
        }
        out
    }

    pub fn det3(&self) -> f64 {
        det3(&self.linear())
    }

    /// Checks the homogeneous row and the nonsingular 3×3 block.
    pub fn validate(&self) -> Result<()> {
        if self.0[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Affine(format!(
                "last row must be (0,0,0,1), got {:?}",
                self.0[3]
            )));
        }
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Affine("non-finite entry".into()));
        }
        if self.det3() == 0.0 {
            return Err(Error::Affine("upper-left 3x3 block is singular".into()));
        }
        Ok(())
    }

    /// General inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Affine> {
        let mut a = self.0;
        let mut inv = Affine::identity().0;
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-300 {
                return Err(Error::Affine("matrix is singular".into()));
            }
            a.swap(col, pivot);
            inv.swap(col, pivot);
            let p = a[col][col];
            for j in 0..4 {
                a[col][j] /= p;
                inv[col][j] /= p;
            }
            for row in 0..4 {
                if row != col {
                    let f = a[row][col];
                    if f != 0.0 {
                        for j in 0..4 {
                            a[row][j] -= f * a[col][j];
                            inv[row][j] -= f * inv[col][j];
                        }
                    }
                }
            }
        }
        Ok(Affine(inv))
    }

    /// Voxel spacing: the Euclidean norm of each direction column.
    pub fn spacing(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for (j, v) in s.iter_mut().enumerate() {
            let c = self.column(j);
            *v = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Axis codes of the first three data axes: for each direction column the
    /// world axis with the largest magnitude (ties go to the lower axis) and
    /// its sign.
    pub fn axis_codes(&self) -> Result<[AxisCode; 3]> {
        if self.det3() == 0.0 {
            return Err(Error::Affine("singular direction matrix".into()));
        }
        let mut out = [AxisCode::R; 3];
        let mut used = [false; 3];
        for (j, code) in out.iter_mut().enumerate() {
            let c = self.column(j);
            let mut best = 0;
            for w in 1..3 {
                if c[w].abs() > c[best].abs() {
                    best = w;
                }
            }
            if used[best] {
                return Err(Error::Affine(format!(
                    "ambiguous orientation: two columns dominate world axis {best}"
                )));
            }
            used[best] = true;
            *code = AxisCode::from_world(best, c[best] >= 0.0);
        }
        Ok(out)
    }
}

/// Anatomical direction a data axis increases toward (RAS+ world frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    pub fn from_world(world_axis: usize, positive: bool) -> Self {
        match (world_axis, positive) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (2, true) => AxisCode::S,
            _ => AxisCode::I,
        }
    }

    pub fn world_axis(self) -> usize {
        match self {
            AxisCode::R | AxisCode::L => 0,
            AxisCode::A | AxisCode::P => 1,
            AxisCode::S | AxisCode::I => 2,
        }
    }

    pub fn positive(self) -> bool {
        matches!(self, AxisCode::R | AxisCode::A | AxisCode::S)
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'R' => Some(AxisCode::R),
            'L' => Some(AxisCode::L),
            'A' => Some(AxisCode::A),
            'P' => Some(AxisCode::P),
            'S' => Some(AxisCode::S),
            'I' => Some(AxisCode::I),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            AxisCode::R => 'R',
            AxisCode::L => 'L',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Parses a three-letter code such as "RAS" or "LPI".
pub fn parse_axis_codes(s: &str) -> Result<[AxisCode; 3]> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "axis codes must have three letters, got '{s}'"
        )));
    }
    let mut out = [AxisCode::R; 3];
    let mut seen = [false; 3];
    for (i, &c) in chars.iter().enumerate() {
        let code = AxisCode::from_char(c)
            .ok_or_else(|| Error::InvalidArgument(format!("bad axis code '{c}' in '{s}'")))?;
        if seen[code.world_axis()] {
            return Err(Error::InvalidArgument(format!(
                "axis codes '{s}' name the same world axis twice"
            )));
        }
        seen[code.world_axis()] = true;
        out[i] = code;
    }
    Ok(out)
}

pub fn codes_to_string(codes: &[AxisCode; 3]) -> String {
    codes.iter().map(|c| c.as_char()).collect()
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about world axis `axis` by `angle` radians (right-handed).
pub fn rotation_about(axis: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

//! Nested-array (row-major) serde adapters for the fixed-size nalgebra types
//! that appear in the JSON documents.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub(crate) fn to_rows<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> [[f64; C]; R] {
    let mut out = [[0.0; C]; R];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

pub(crate) fn from_rows<const R: usize, const C: usize>(
    rows: &[[f64; C]; R],
) -> SMatrix<f64, R, C> {
    SMatrix::from_fn(|r, c| rows[r][c])
}

pub(crate) mod vec2 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector2<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector2<f64>, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Vector2::new(x, y))
    }
}

pub(crate) mod mat2 {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix2<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix2<f64>, D::Error> {
        Ok(from_rows(&<[[f64; 2]; 2]>::deserialize(d)?))
    }
}

pub(crate) mod opt_mat2 {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<Matrix2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix2<f64>>, D::Error> {
        Ok(Option::<[[f64; 2]; 2]>::deserialize(d)?.map(|r| from_rows(&r)))
    }
}

pub(crate) mod vec3 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(x, y, z))
    }
}

pub(crate) mod vec_vec3 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vector3<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|p| [p.x, p.y, p.z])
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector3<f64>>, D::Error> {
        Ok(Vec::<[f64; 3]>::deserialize(d)?
            .into_iter()
            .map(|[x, y, z]| Vector3::new(x, y, z))
            .collect())
    }
}

pub(crate) mod vec_mat3 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Matrix3<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix3<f64>>, D::Error> {
        Ok(Vec::<[[f64; 3]; 3]>::deserialize(d)?
            .iter()
            .map(from_rows)
            .collect())
    }
}

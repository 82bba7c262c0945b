//! Minimal 3D linear algebra: fixed-size vectors and matrices, just enough
//! for rigid transforms, projection, and ray casting.

use crate::scalar::Scalar;

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];

pub fn dot<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn add<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<S: Scalar>(s: S, a: Vec3<S>) -> Vec3<S> {
    [s * a[0], s * a[1], s * a[2]]
}

pub fn norm<S: Scalar>(a: Vec3<S>) -> S {
    dot(a, a).sqrt()
}

pub fn normalize<S: Scalar>(a: Vec3<S>) -> Vec3<S> {
    let n = norm(a);
    assert!(n > S::zero(), "normalize of zero vector");
    scale(S::one() / n, a)
}

pub fn mat_vec<S: Scalar>(m: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<S: Scalar>(m: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det<S: Scalar>(m: &Mat3<S>) -> S {
    dot(m[0], cross(m[1], m[2]))
}

pub fn identity<S: Scalar>() -> Mat3<S> {
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn rot_x<S: Scalar>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

pub fn rot_y<S: Scalar>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (S::one(), S::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

pub fn rot_z<S: Scalar>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (S::one(), S::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

//! Small dense-vector helpers shared by the closed-form parts of the crate.
//!
//! Learned models use `nalgebra` matrices; everything that operates on one
//! state at a time works on plain `f64` slices.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `acc += s * x`
pub fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}

/// Unit-normalizes `a`, or returns `None` when its norm is at most `eps`.
pub fn normalized(a: &[f64], eps: f64) -> Option<Vec<f64>> {
    let n = norm(a);
    if n > eps && n.is_finite() {
        Some(a.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

/// Cosine similarity; zero when either side is (numerically) the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Arithmetic mean of equally sized vectors. Panics on an empty slice.
pub fn mean<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    assert!(!vectors.is_empty(), "mean of an empty set");
    let d = vectors[0].as_ref().len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        axpy(&mut acc, 1.0, v.as_ref());
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

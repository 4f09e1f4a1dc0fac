//! Local surface fits used to refine warped depth.
//!
//! A neighbourhood of points is fitted by a plane or, failing that, a sphere
//! (the algebraic-sphere family covers both and is second-order accurate on
//! smooth surfaces). Fits are accepted only when every point lies within the
//! given tolerance.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::scene::{dot, sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Surface {
    /// Points with `n · p = c`, `|n| = 1`.
    Plane { n: [f64; 3], c: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Surface {
    pub(crate) fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Surface::Plane { n, c } => (dot(n, p) - c).abs(),
            Surface::Sphere { center, radius } => {
                let q = sub(p, center);
                (dot(q, q).sqrt() - radius).abs()
            }
        }
    }

    /// Intersection of `o + t d` with the surface whose `t` is closest to `hint`.
    pub(crate) fn intersect_near(&self, o: [f64; 3], d: [f64; 3], hint: f64, min_cosine: f64) -> Option<f64> {
        match *self {
            Surface::Plane { n, c } => {
                let nd = dot(n, d);
                if nd.abs() <= min_cosine * dot(d, d).sqrt() {
                    return None;
                }
                let t = (c - dot(n, o)) / nd;
                t.is_finite().then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let oc = sub(o, center);
                let a = dot(d, d);
                let hb = dot(oc, d);
                let cc = dot(oc, oc) - radius * radius;
                let disc = hb * hb - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let q = -hb - hb.signum() * disc.sqrt();
                let (t0, t1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, cc / q) };
                let t = if (t0 - hint).abs() <= (t1 - hint).abs() { t0 } else { t1 };
                t.is_finite().then_some(t)
            }
        }
    }
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for p in points {
        for a in 0..3 {
            m[a] += p[a];
        }
    }
    m.map(|x| x / points.len() as f64)
}

fn fit_plane(points: &[[f64; 3]], m: [f64; 3]) -> Option<Surface> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let q = Vector3::from(sub(*p, m));
        cov += q * q.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(i).normalize();
    let n = [n[0], n[1], n[2]];
    n.iter().all(|x| x.is_finite()).then(|| Surface::Plane { n, c: dot(n, m) })
}

fn fit_sphere(points: &[[f64; 3]], m: [f64; 3]) -> Option<Surface> {
    // |q|² = 2 q·c + k  with q = p - m, solved in least squares
    let rows = points.len();
    let mut a = DMatrix::zeros(rows, 4);
    let mut b = DVector::zeros(rows);
    for (r, p) in points.iter().enumerate() {
        let q = sub(*p, m);
        a[(r, 0)] = 2.0 * q[0];
        a[(r, 1)] = 2.0 * q[1];
        a[(r, 2)] = 2.0 * q[2];
        a[(r, 3)] = 1.0;
        b[r] = dot(q, q);
    }
    let x = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let c = [x[0], x[1], x[2]];
    let r2 = x[3] + dot(c, c);
    if !(r2 > 0.0 && r2.is_finite()) {
        return None;
    }
    Some(Surface::Sphere {
        center: [m[0] + c[0], m[1] + c[1], m[2] + c[2]],
        radius: r2.sqrt(),
    })
}

/// Plane if it fits within `tol`, else a sphere if that does, else `None`.
pub(crate) fn fit(points: &[[f64; 3]], tol: f64) -> Option<Surface> {
    if points.len() < 4 {
        return None;
    }
    let m = centroid(points);
    let within = |s: &Surface| points.iter().all(|&p| s.distance(p) <= tol);
    if let Some(s) = fit_plane(points, m).filter(within) {
        return Some(s);
    }
    if points.len() < 7 {
        return None;
    }
    fit_sphere(points, m).filter(within)
}

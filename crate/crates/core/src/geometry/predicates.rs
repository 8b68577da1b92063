//! Sign-reliable orientation and in-sphere predicates.
//!
//! Each predicate is evaluated in double precision with a forward error
//! bound proportional to the permanent of its matrix. When the value falls
//! inside that bound it is recomputed in double-double arithmetic, and only
//! a result that is still inside the (much smaller) second bound is reported
//! as zero.

use std::cmp::Ordering;

use crate::vec3::Vec3;

const EPS: f64 = f64::EPSILON / 2.0;
const ORIENT_BOUND: f64 = 16.0 * EPS;
const INSPHERE_BOUND: f64 = 32.0 * EPS;
const DD_BOUND: f64 = 1e-28;

#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    fn diff(a: f64, b: f64) -> Self {
        two_sum(a, -b)
    }

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let u = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(u.hi, u.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn sign(v: f64) -> Ordering {
    v.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
}

/// Cheap upper bound on the permanent of `|m|`: `n!` times the product of
/// the column maxima.
fn column_bound<const N: usize>(m: &[[f64; N]; N]) -> f64 {
    let mut bound = 1.0;
    for j in 0..N {
        bound *= (j + 1) as f64 * m.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
    }
    bound
}

fn det3<T: Copy>(m: [[T; 3]; 3], mul: impl Fn(T, T) -> T, add: impl Fn(T, T) -> T, sub: impl Fn(T, T) -> T) -> T {
    let minor = |i: usize, j: usize, k: usize, l: usize| sub(mul(m[1][i], m[2][j]), mul(m[1][k], m[2][l]));
    add(
        sub(mul(m[0][0], minor(1, 2, 2, 1)), mul(m[0][1], minor(0, 2, 2, 0))),
        mul(m[0][2], minor(0, 1, 1, 0)),
    )
}

/// Sign of `orient(a, b, c, d)`: greater when `d` is on the positive side of
/// `abc`.
pub fn orient_sign(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> Ordering {
    let rows = [b - a, c - a, d - a].map(|p| [p.x, p.y, p.z]);
    let det = det3(rows, |x, y| x * y, |x, y| x + y, |x, y| x - y);
    if det.abs() > ORIENT_BOUND * column_bound(&rows) {
        return sign(det);
    }
    let abs = rows.map(|r| r.map(f64::abs));
    let perm = det3(abs, |x, y| x * y, |x, y| x + y, |x, y| x + y);
    let rows = [b, c, d].map(|p| [Dd::diff(p.x, a.x), Dd::diff(p.y, a.y), Dd::diff(p.z, a.z)]);
    let det = det3(rows, Dd::mul, Dd::add, Dd::sub).value();
    if det.abs() > DD_BOUND * perm {
        sign(det)
    } else {
        Ordering::Equal
    }
}

fn det4<T: Copy>(m: [[T; 4]; 4], mul: impl Fn(T, T) -> T, add: impl Fn(T, T) -> T, sub: impl Fn(T, T) -> T) -> T {
    let s = |i: usize, j: usize| sub(mul(m[0][i], m[1][j]), mul(m[1][i], m[0][j]));
    let c = |i: usize, j: usize| sub(mul(m[2][i], m[3][j]), mul(m[3][i], m[2][j]));
    let terms = [
        (s(0, 1), c(2, 3), false),
        (s(0, 2), c(1, 3), true),
        (s(0, 3), c(1, 2), false),
        (s(1, 2), c(0, 3), false),
        (s(1, 3), c(0, 2), true),
        (s(2, 3), c(0, 1), false),
    ];
    let mut acc = mul(terms[0].0, terms[0].1);
    for &(x, y, negative) in &terms[1..] {
        acc = if negative { sub(acc, mul(x, y)) } else { add(acc, mul(x, y)) };
    }
    acc
}

/// Sign of the in-sphere determinant: greater when `e` is strictly inside
/// the circumsphere of the positively oriented tetrahedron `abcd`.
pub fn insphere_sign(a: Vec3, b: Vec3, c: Vec3, d: Vec3, e: Vec3) -> Ordering {
    let row = |p: Vec3| {
        let r = p - e;
        [r.x, r.y, r.z, r.norm_sq()]
    };
    let m = [row(a), row(b), row(c), row(d)];
    let det = -det4(m, |x, y| x * y, |x, y| x + y, |x, y| x - y);
    if det.abs() > INSPHERE_BOUND * column_bound(&m) {
        return sign(det);
    }
    let abs = m.map(|r| r.map(f64::abs));
    let perm = det4(abs, |x, y| x * y, |x, y| x + y, |x, y| x + y);
    let row = |p: Vec3| {
        let r = [Dd::diff(p.x, e.x), Dd::diff(p.y, e.y), Dd::diff(p.z, e.z)];
        let w = r[0].mul(r[0]).add(r[1].mul(r[1])).add(r[2].mul(r[2]));
        [r[0], r[1], r[2], w]
    };
    let det = det4([row(a), row(b), row(c), row(d)], Dd::mul, Dd::add, Dd::sub).neg().value();
    if det.abs() > DD_BOUND * perm {
        sign(det)
    } else {
        Ordering::Equal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{insphere, orient};
    use proptest::{prop_assert_eq, proptest};

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn exact_degeneracies_are_zero() {
        let (a, b, c) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        assert_eq!(orient_sign(a, b, c, v(0.3, 0.7, 0.0)), Ordering::Equal);
        assert_eq!(orient_sign(a, b, c, v(0.3, 0.7, 1e-300)), Ordering::Greater);
        let d = v(0.0, 0.0, 1.0);
        // the eighth cube corner is cospherical with the other seven
        assert_eq!(insphere_sign(a, b, c, d, v(1.0, 1.0, 1.0)), Ordering::Equal);
        assert_eq!(insphere_sign(a, b, c, d, v(0.5, 0.5, 0.5)), Ordering::Greater);
        assert_eq!(insphere_sign(a, b, c, d, v(2.0, 2.0, 2.0)), Ordering::Less);
    }

    #[test]
    fn tiny_tetrahedra_keep_their_signs() {
        // at this scale the in-sphere determinant is ~1e-40
        let s = 1e-8;
        let (a, b, c, d) = (v(0.3, 0.3, 0.3), v(0.3 + s, 0.3, 0.3), v(0.3, 0.3 + s, 0.3), v(0.3, 0.3, 0.3 + s));
        assert_eq!(orient_sign(a, b, c, d), Ordering::Greater);
        assert_eq!(insphere_sign(a, b, c, d, v(0.3 + 0.25 * s, 0.3 + 0.25 * s, 0.3 + 0.25 * s)), Ordering::Greater);
        assert_eq!(insphere_sign(a, b, c, d, v(0.3 + 2.0 * s, 0.3, 0.3)), Ordering::Less);
    }

    #[test]
    fn near_cospherical_point_resolved_by_extended_precision() {
        let (a, b, c, d) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(0.0, 0.0, 1.0));
        let corner = v(1.0, 1.0, 1.0);
        let inward = corner - Vec3::splat(1e-15);
        let outward = corner + Vec3::splat(1e-15);
        assert_eq!(insphere_sign(a, b, c, d, inward), Ordering::Greater);
        assert_eq!(insphere_sign(a, b, c, d, outward), Ordering::Less);
    }

    proptest! {
        #[test]
        fn agrees_with_plain_evaluation_away_from_zero(
            c in proptest::array::uniform15(-1.0f64..1.0),
        ) {
            let p = |k: usize| v(c[3 * k], c[3 * k + 1], c[3 * k + 2]);
            let (a, b, cc, d, e) = (p(0), p(1), p(2), p(3), p(4));
            let o = orient(a, b, cc, d);
            if o.abs() > 1e-9 {
                prop_assert_eq!(orient_sign(a, b, cc, d), sign(o));
            }
            let s = insphere(a, b, cc, d, e);
            if s.abs() > 1e-9 {
                prop_assert_eq!(insphere_sign(a, b, cc, d, e), sign(s));
            }
        }
    }
}

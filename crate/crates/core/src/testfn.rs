//! Smooth compactly supported test functions and vector fields.

/// A scalar test function with known gradient and a support ball.
pub trait TestFunction: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes `∇φ(x)` into `out` (length `dim`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Center and radius of a closed ball containing the support.
    fn support(&self) -> (&[f64], f64);
}

/// Radial profile `ψ(t)` on `[0, 1]`, with `ψ(t) = 0` for `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// `exp(1 − 1/(1 − t²))`, C^∞, value 1 at the center.
    Bump,
    /// `(1 − t²)^4`, C³ polynomial bump.
    Poly4,
}

impl Profile {
    #[inline]
    fn eval(self, t: f64) -> (f64, f64) {
        if t >= 1.0 {
            return (0.0, 0.0);
        }
        match self {
            Profile::Bump => {
                let s = 1.0 - t * t;
                let v = (1.0 - 1.0 / s).exp();
                (v, v * (-2.0 * t / (s * s)))
            }
            Profile::Poly4 => {
                let s = 1.0 - t * t;
                (s.powi(4), -8.0 * t * s.powi(3))
            }
        }
    }
}

/// `φ(x) = a·ψ(|x − c| / ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialBump {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    pub profile: Profile,
}

impl RadialBump {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self {
            center,
            radius,
            amplitude: 1.0,
            profile: Profile::Bump,
        }
    }

    pub fn with_amplitude(mut self, a: f64) -> Self {
        self.amplitude = a;
        self
    }

    pub fn with_profile(mut self, p: Profile) -> Self {
        self.profile = p;
        self
    }

    #[inline]
    fn dist(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(x)
            .map(|(c, v)| (v - c) * (v - c))
            .sum::<f64>()
            .sqrt()
    }
}

impl TestFunction for RadialBump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * self.profile.eval(self.dist(x) / self.radius).0
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dist(x);
        out.iter_mut().for_each(|o| *o = 0.0);
        if d == 0.0 || d >= self.radius {
            return;
        }
        let (_, dpsi) = self.profile.eval(d / self.radius);
        let k = self.amplitude * dpsi / (self.radius * d);
        for ((o, v), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = k * (v - c);
        }
    }

    fn support(&self) -> (&[f64], f64) {
        (&self.center, self.radius)
    }
}

/// Radial plateau: 1 on `B_inner`, 0 outside `B_outer`, smooth in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub center: Vec<f64>,
    pub inner: f64,
    pub outer: f64,
}

impl Plateau {
    pub fn new(center: Vec<f64>, inner: f64, outer: f64) -> Self {
        Self { center, inner, outer }
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            center: self.center.iter().map(|c| c * t).collect(),
            inner: self.inner * t,
            outer: self.outer * t,
        }
    }

    #[inline]
    fn transition(&self, d: f64) -> (f64, f64) {
        if d <= self.inner {
            return (1.0, 0.0);
        }
        if d >= self.outer {
            return (0.0, 0.0);
        }
        let w = self.outer - self.inner;
        let u = (d - self.inner) / w;
        let s = smootherstep(u);
        (1.0 - s, -smootherstep_deriv(u) / w)
    }
}

impl TestFunction for Plateau {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = dist(&self.center, x);
        self.transition(d).0
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = dist(&self.center, x);
        out.iter_mut().for_each(|o| *o = 0.0);
        if d == 0.0 {
            return;
        }
        let (_, dv) = self.transition(d);
        for ((o, v), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = dv * (v - c) / d;
        }
    }

    fn support(&self) -> (&[f64], f64) {
        (&self.center, self.outer)
    }
}

/// `S(u) = u³(10 − 15u + 6u²)`, clamped to [0, 1].
#[inline]
pub fn smootherstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

#[inline]
pub fn smootherstep_deriv(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        return 0.0;
    }
    30.0 * u * u * (1.0 - u) * (1.0 - u)
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Vector field `X(x) = φ(x)·v` with `φ` a radial bump.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpField {
    pub bump: RadialBump,
    pub direction: Vec<f64>,
}

impl BumpField {
    pub fn new(bump: RadialBump, direction: Vec<f64>) -> Self {
        Self { bump, direction }
    }
}

/// A smooth vector field on R^{m+n} with its Jacobian.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    /// Writes `DX(x)` row-major (`out[i*dim + j] = ∂X_i/∂x_j`).
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
    fn value(&self, x: &[f64], out: &mut [f64]);
}

impl VectorField for BumpField {
    fn dim(&self) -> usize {
        self.direction.len()
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut g = vec![0.0; d];
        self.bump.gradient(x, &mut g);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.direction[i] * g[j];
            }
        }
    }

    fn value(&self, x: &[f64], out: &mut [f64]) {
        let p = self.bump.value(x);
        for (o, v) in out.iter_mut().zip(&self.direction) {
            *o = p * v;
        }
    }
}

/// Sum of vector fields, each scaled.
pub struct FieldSum<'a> {
    pub terms: Vec<(f64, &'a dyn VectorField)>,
}

impl VectorField for FieldSum<'_> {
    fn dim(&self) -> usize {
        self.terms.first().map_or(0, |t| t.1.dim())
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out[..d * d].iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; d * d];
        for (c, f) in &self.terms {
            f.jacobian(x, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += c * t;
            }
        }
    }

    fn value(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; d];
        for (c, f) in &self.terms {
            f.value(x, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += c * t;
            }
        }
    }
}

/// Sum of scalar test functions, each scaled.
pub struct TestSum<'a> {
    pub terms: Vec<(f64, &'a dyn TestFunction)>,
    center: Vec<f64>,
    radius: f64,
}

impl<'a> TestSum<'a> {
    pub fn new(terms: Vec<(f64, &'a dyn TestFunction)>) -> Self {
        let dim = terms.first().map_or(0, |t| t.1.dim());
        let center = vec![0.0; dim];
        let radius = terms
            .iter()
            .map(|(_, f)| {
                let (c, r) = f.support();
                dist(c, &center) + r
            })
            .fold(0.0, f64::max);
        Self { terms, center, radius }
    }
}

impl TestFunction for TestSum<'_> {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.value(x)).sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; d];
        for (c, f) in &self.terms {
            f.gradient(x, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += c * t;
            }
        }
    }

    fn support(&self) -> (&[f64], f64) {
        (&self.center, self.radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: &dyn TestFunction, x: &[f64]) {
        let d = f.dim();
        let mut g = vec![0.0; d];
        f.gradient(x, &mut g);
        for k in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (f.value(&xp) - f.value(&xm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6, "component {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = RadialBump::new(vec![0.1, -0.2], 0.7).with_amplitude(2.0);
        fd_check(&b, &[0.3, 0.1]);
        let p = RadialBump::new(vec![0.0, 0.0, 0.0], 1.0).with_profile(Profile::Poly4);
        fd_check(&p, &[0.2, 0.3, -0.1]);
        let pl = Plateau::new(vec![0.0, 0.0], 1.0, 2.0);
        fd_check(&pl, &[1.2, 0.5]);
    }

    #[test]
    fn bump_vanishes_outside_support() {
        let b = RadialBump::new(vec![0.0, 0.0], 0.5);
        assert_eq!(b.value(&[0.5, 0.0]), 0.0);
        assert_eq!(b.value(&[0.0, 0.0]), 1.0);
        let pl = Plateau::new(vec![0.0], 1.0, 2.0);
        assert_eq!(pl.value(&[0.5]), 1.0);
        assert_eq!(pl.value(&[2.5]), 0.0);
    }

    #[test]
    fn bump_field_jacobian_is_outer_product() {
        let f = BumpField::new(RadialBump::new(vec![0.0, 0.0], 1.0), vec![1.0, 2.0]);
        let mut j = [0.0; 4];
        f.jacobian(&[0.3, 0.1], &mut j);
        let mut g = [0.0; 2];
        f.bump.gradient(&[0.3, 0.1], &mut g);
        assert_eq!(j, [g[0], g[1], 2.0 * g[0], 2.0 * g[1]]);
    }
}

//! Numerical checks for the generalization analysis: Monte-Carlo zero-shot
//! Rademacher complexity, exact sign enumeration for tiny cases, the excess
//! risk bound, and an empirical Gaussian Poincaré check.
//!
//! The complexity is `R_nm(F) = (1/nm) E sup_f sum_ij s_ij f(w_j, x_ij)`,
//! without an absolute value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FusionModel;
use crate::rng;
use crate::scalar::Scalar;

/// Distribution of the sampled intervention or feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleDist {
    UnitSphere,
    UnitBall,
    Gaussian { sd: f64 },
}

impl SampleDist {
    pub fn draw(&self, r: &mut rng::Rng, dim: usize) -> Vec<f64> {
        match *self {
            SampleDist::UnitSphere => rng::unit_sphere(r, dim),
            SampleDist::UnitBall => {
                let radius = r.random::<f64>().powf(1.0 / dim as f64);
                rng::unit_sphere::<f64>(r, dim).into_iter().map(|v| v * radius).collect()
            }
            SampleDist::Gaussian { sd } => rng::normal_vec(r, dim, sd),
        }
    }
}

/// A member of a finite function class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FiniteFn {
    Constant { c: f64 },
    /// `a . w + b . x`
    Linear { a: Vec<f64>, b: Vec<f64> },
}

impl FiniteFn {
    pub fn eval(&self, w: &[f64], x: &[f64]) -> f64 {
        match self {
            FiniteFn::Constant { c } => *c,
            FiniteFn::Linear { a, b } => {
                a.iter().zip(w).map(|(p, q)| p * q).sum::<f64>()
                    + b.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    /// `{ a . w + b . x : |a| <= b1, |b| <= b2 }`
    Linear { b1: f64, b2: f64 },
    Finite { fns: Vec<FiniteFn> },
}

impl Family {
    /// `k` random linear functions with unit-norm coefficient vectors.
    pub fn random_linear_probes(k: usize, e: usize, d: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0);
        let fns = (0..k)
            .map(|_| FiniteFn::Linear {
                a: rng::unit_sphere(&mut r, e),
                b: rng::unit_sphere(&mut r, d),
            })
            .collect();
        Family::Finite { fns }
    }

    fn check(&self) -> Result<()> {
        match self {
            Family::Linear { b1, b2 } if !(*b1 >= 0.0 && *b2 >= 0.0) => {
                Err(Error::Argument(format!("norm bounds must be >= 0, got ({b1}, {b2})")))
            }
            Family::Finite { fns } if fns.is_empty() => {
                Err(Error::Argument("finite family is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `n` intervention vectors with `m` feature vectors each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    pub w: Vec<Vec<f64>>,
    pub x: Vec<Vec<Vec<f64>>>,
}

impl Draws {
    pub fn sample(
        r: &mut rng::Rng,
        n: usize,
        m: usize,
        dims: (usize, usize),
        dists: (SampleDist, SampleDist),
    ) -> Self {
        let w: Vec<Vec<f64>> = (0..n).map(|_| dists.0.draw(r, dims.0)).collect();
        let x = (0..n)
            .map(|_| (0..m).map(|_| dists.1.draw(r, dims.1)).collect())
            .collect();
        Self { w, x }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn m(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn check(&self, family: &Family) -> Result<()> {
        if self.n() == 0 || self.m() == 0 || self.x.len() != self.n() {
            return Err(Error::Argument("need n >= 1 interventions with m >= 1 samples".into()));
        }
        if self.x.iter().any(|xs| xs.len() != self.m()) {
            return Err(Error::Shape("every intervention needs m samples".into()));
        }
        if matches!(family, Family::Linear { .. }) {
            let over = |v: &Vec<f64>| v.iter().map(|a| a * a).sum::<f64>().sqrt() > 1.0 + 1e-9;
            if self.w.iter().any(over) || self.x.iter().flatten().any(over) {
                return Err(Error::Argument(
                    "linear family needs samples with norm at most 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// `(1/nm) sup_f sum_ij s_ij f(w_j, x_ij)` for signs laid out row-major
    /// by intervention.
    fn sup(&self, family: &Family, signs: &[f64]) -> f64 {
        let (n, m) = (self.n(), self.m());
        let value = match family {
            Family::Linear { b1, b2 } => {
                let mut sw = vec![0.0; self.w[0].len()];
                let mut sx = vec![0.0; self.x[0][0].len()];
                for j in 0..n {
                    for i in 0..m {
                        let s = signs[j * m + i];
                        sw.iter_mut().zip(&self.w[j]).for_each(|(a, b)| *a += s * b);
                        sx.iter_mut().zip(&self.x[j][i]).for_each(|(a, b)| *a += s * b);
                    }
                }
                let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
                b1 * norm(&sw) + b2 * norm(&sx)
            }
            Family::Finite { fns } => fns
                .iter()
                .map(|f| {
                    let mut total = 0.0;
                    for j in 0..n {
                        for i in 0..m {
                            total += signs[j * m + i] * f.eval(&self.w[j], &self.x[j][i]);
                        }
                    }
                    total
                })
                .fold(f64::NEG_INFINITY, f64::max),
        };
        value / (n * m) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub replicates: usize,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { estimate: mean, stderr: (var / n).sqrt(), replicates: values.len() }
    }
}

fn signs(r: &mut rng::Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Monte-Carlo estimate over fresh draws of points and signs.
#[allow(clippy::too_many_arguments)]
pub fn zs_rademacher_mc(
    family: &Family,
    n: usize,
    m: usize,
    dims: (usize, usize),
    dists: (SampleDist, SampleDist),
    replicates: usize,
    seed: u64,
) -> Result<McEstimate> {
    family.check()?;
    if replicates == 0 {
        return Err(Error::Argument("replicates must be >= 1".into()));
    }
    if n == 0 || m == 0 {
        return Err(Error::Argument("n and m must be >= 1".into()));
    }
    if matches!(family, Family::Linear { .. }) {
        for dist in [dists.0, dists.1] {
            if matches!(dist, SampleDist::Gaussian { .. }) {
                return Err(Error::Argument(
                    "linear family needs samples with norm at most 1".into(),
                ));
            }
        }
    }
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::stream(rng::derive_seed(seed, rep as u64), 0);
            let draws = Draws::sample(&mut r, n, m, dims, dists);
            draws.check(family)?;
            let s = signs(&mut r, n * m);
            Ok(draws.sup(family, &s))
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_values(&values))
}

/// Monte-Carlo over signs only, for fixed points.
pub fn mc_rademacher_fixed(
    family: &Family,
    draws: &Draws,
    replicates: usize,
    seed: u64,
) -> Result<McEstimate> {
    family.check()?;
    draws.check(family)?;
    if replicates == 0 {
        return Err(Error::Argument("replicates must be >= 1".into()));
    }
    let len = draws.n() * draws.m();
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::stream(rng::derive_seed(seed, rep as u64), 1);
            draws.sup(family, &signs(&mut r, len))
        })
        .collect();
    Ok(McEstimate::from_values(&values))
}

pub const MAX_EXACT_POINTS: usize = 16;

/// Exact expectation over all `2^(nm)` sign patterns for fixed points.
pub fn exact_rademacher_small(family: &Family, draws: &Draws) -> Result<f64> {
    family.check()?;
    draws.check(family)?;
    let len = draws.n() * draws.m();
    if len > MAX_EXACT_POINTS {
        return Err(Error::Size(format!(
            "sign enumeration needs nm <= {MAX_EXACT_POINTS}, got {len}"
        )));
    }
    let patterns = 1usize << len;
    let total: f64 = (0..patterns)
        .map(|mask| {
            let s: Vec<f64> = (0..len)
                .map(|b| if mask >> b & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            draws.sup(family, &s)
        })
        .sum();
    Ok(total / patterns as f64)
}

/// Closed-form bound for the linear family, `(b1 + b2) / sqrt(nm)`.
pub fn linear_rademacher_bound(b1: f64, b2: f64, n: usize, m: usize) -> f64 {
    (b1 + b2) / ((n * m) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub beta_smooth: f64,
    pub poincare_c: f64,
    pub rademacher: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `8(1+eps) R`
    pub complexity: f64,
    /// `8 sqrt((1+eps) R ln(1/delta) / n)`
    pub concentration: f64,
    /// `2 ln(1/delta) / (3n)`
    pub tail: f64,
    /// `(1+eps) sqrt((32 C beta^2 + 2(1+eps)^2/m) ln(1/delta) / n)`
    pub smoothness: f64,
    pub total: f64,
}

/// Excess-risk bound `L(f_hat) - L(f*)`, term by term.
pub fn excess_risk_bound(b: &BoundInputs) -> Result<BoundTerms> {
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", b.delta)));
    }
    if b.n == 0 || b.m == 0 {
        return Err(Error::Domain("n and m must be >= 1".into()));
    }
    for (name, v) in [
        ("epsilon", b.epsilon),
        ("beta_smooth", b.beta_smooth),
        ("poincare_c", b.poincare_c),
        ("rademacher", b.rademacher),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let n = b.n as f64;
    let m = b.m as f64;
    let e1 = 1.0 + b.epsilon;
    let log = (1.0 / b.delta).ln();
    let complexity = 8.0 * e1 * b.rademacher;
    let concentration = 8.0 * (e1 * b.rademacher * log / n).sqrt();
    let tail = 2.0 * log / (3.0 * n);
    let smoothness =
        e1 * ((32.0 * b.poincare_c * b.beta_smooth.powi(2) + 2.0 * e1 * e1 / m) * log / n).sqrt();
    Ok(BoundTerms {
        complexity,
        concentration,
        tail,
        smoothness,
        total: complexity + concentration + tail + smoothness,
    })
}

/// Smooth test function of `w` with an analytic gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TestFunction {
    Constant { c: f64 },
    /// `a . w`
    Linear { a: Vec<f64> },
    /// `tanh(c + a . w + w' Q w / 2)` with symmetric `Q`.
    TanhQuadratic { c: f64, a: Vec<f64>, q: Vec<Vec<f64>> },
}

impl TestFunction {
    pub fn random_tanh_quadratic(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0);
        let c = rng::normal::<f64>(&mut r) * 0.5;
        let a = rng::normal_vec(&mut r, dim, 1.0 / (dim as f64).sqrt());
        let raw: Vec<Vec<f64>> = (0..dim)
            .map(|_| rng::normal_vec(&mut r, dim, 0.5 / dim as f64))
            .collect();
        let q = (0..dim)
            .map(|i| (0..dim).map(|j| raw[i][j] + raw[j][i]).collect())
            .collect();
        TestFunction::TanhQuadratic { c, a, q }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Constant { .. } => "constant",
            TestFunction::Linear { .. } => "linear",
            TestFunction::TanhQuadratic { .. } => "tanh_quadratic",
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            TestFunction::Constant { .. } => None,
            TestFunction::Linear { a } | TestFunction::TanhQuadratic { a, .. } => Some(a.len()),
        }
    }

    /// Value and squared gradient norm at `w`.
    pub fn value_and_grad_sq(&self, w: &[f64]) -> (f64, f64) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        match self {
            TestFunction::Constant { c } => (*c, 0.0),
            TestFunction::Linear { a } => (dot(a, w), dot(a, a)),
            TestFunction::TanhQuadratic { c, a, q } => {
                let qw: Vec<f64> = q.iter().map(|row| dot(row, w)).collect();
                let t = (c + dot(a, w) + 0.5 * dot(w, &qw)).tanh();
                let scale = 1.0 - t * t;
                let g2 = a
                    .iter()
                    .zip(&qw)
                    .map(|(ai, qi)| (scale * (ai + qi)).powi(2))
                    .sum();
                (t, g2)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareEntry {
    pub function: String,
    pub variance: f64,
    pub variance_stderr: f64,
    /// `|Sigma|_2 E |grad F|^2`
    pub bound: f64,
    pub bound_stderr: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub spectral_norm: f64,
    pub draws: usize,
    pub entries: Vec<PoincareEntry>,
}

/// Checks `Var F(w) <= |Sigma|_2 E|grad F(w)|^2` for `w ~ N(0, Sigma)`.
pub fn poincare_check_gaussian(
    cov: &[Vec<f64>],
    fns: &[TestFunction],
    draws: usize,
    seed: u64,
) -> Result<PoincareReport> {
    let e = cov.len();
    if e == 0 || cov.iter().any(|row| row.len() != e) {
        return Err(Error::Shape("covariance must be a non-empty square matrix".into()));
    }
    if draws < 2 {
        return Err(Error::Argument("need at least 2 draws".into()));
    }
    if let Some(f) = fns.iter().find(|f| f.dim().is_some_and(|k| k != e)) {
        return Err(Error::Shape(format!("{} test function has the wrong dimension", f.name())));
    }
    let mat = DMatrix::from_fn(e, e, |i, j| cov[i][j]);
    let scale = mat.amax().max(1.0);
    if (&mat - mat.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Domain("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(mat);
    let lo = eig.eigenvalues.min();
    if lo < -1e-10 * scale {
        return Err(Error::Domain(format!("covariance is not PSD (eigenvalue {lo})")));
    }
    let spectral_norm = eig.eigenvalues.max().max(0.0);
    let root = DVector::from_iterator(e, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);

    let mut r = rng::stream(seed, 0);
    let mut values = vec![Vec::with_capacity(draws); fns.len()];
    let mut grads = vec![Vec::with_capacity(draws); fns.len()];
    for _ in 0..draws {
        let z = DVector::from_vec(rng::normal_vec::<f64>(&mut r, e, 1.0));
        let w = &factor * z;
        for (k, f) in fns.iter().enumerate() {
            let (v, g2) = f.value_and_grad_sq(w.as_slice());
            values[k].push(v);
            grads[k].push(g2);
        }
    }
    let n = draws as f64;
    let entries = fns
        .iter()
        .zip(values.iter().zip(&grads))
        .map(|(f, (vals, g2))| {
            let mean = vals.iter().sum::<f64>() / n;
            let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            let variance = m2 * n / (n - 1.0);
            let variance_stderr = ((m4 - m2 * m2).max(0.0) / n).sqrt();
            let g = McEstimate::from_values(g2);
            let bound = spectral_norm * g.estimate;
            let bound_stderr = spectral_norm * g.stderr;
            let slack = 3.0 * (variance_stderr.powi(2) + bound_stderr.powi(2)).sqrt();
            PoincareEntry {
                function: f.name().into(),
                variance,
                variance_stderr,
                bound,
                bound_stderr,
                holds: variance <= bound + slack + 1e-12,
            }
        })
        .collect();
    Ok(PoincareReport { spectral_norm, draws, entries })
}

/// Mean squared norm of the output's gradient in `w` over `points`. For
/// multi-output models the Frobenius norm of the Jacobian is used.
pub fn estimate_beta_smooth<T: Scalar>(
    model: &FusionModel<T>,
    points: &[(&[T], &[T])],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Argument("no points to estimate smoothness on".into()));
    }
    let mut total = 0.0;
    for (w, x) in points {
        let jac = model.jacobian_w(w, x)?;
        total += jac.iter().flatten().map(|v| v.as_f64().powi(2)).sum::<f64>();
    }
    Ok(total / points.len() as f64)
}

/// Inputs, per-term values and any Monte-Carlo diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub terms: BoundTerms,
    pub diagnostics: std::collections::BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixed(n: usize, m: usize, seed: u64) -> Draws {
        let mut r = rng::stream(seed, 0);
        Draws::sample(&mut r, n, m, (3, 2), (SampleDist::UnitSphere, SampleDist::UnitBall))
    }

    #[test]
    fn zero_function_has_zero_complexity() {
        let fam = Family::Finite { fns: vec![FiniteFn::Constant { c: 0.0 }] };
        let est = zs_rademacher_mc(
            &fam,
            3,
            4,
            (2, 2),
            (SampleDist::UnitSphere, SampleDist::UnitSphere),
            50,
            0,
        )
        .unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(exact_rademacher_small(&fam, &fixed(2, 2, 0)).unwrap(), 0.0);
    }

    #[test]
    fn linear_single_point_is_b1_plus_b2() {
        let fam = Family::Linear { b1: 0.7, b2: 1.3 };
        let est = zs_rademacher_mc(
            &fam,
            1,
            1,
            (4, 5),
            (SampleDist::UnitSphere, SampleDist::UnitSphere),
            20,
            1,
        )
        .unwrap();
        assert!((est.estimate - 2.0).abs() < 1e-12);
        assert!(est.stderr < 1e-12);
    }

    #[test]
    fn exact_enumeration_examples() {
        let one = |n, m| Draws { w: vec![vec![0.0]; n], x: vec![vec![vec![0.0]; m]; n] };
        let pm = Family::Finite {
            fns: vec![FiniteFn::Constant { c: 1.0 }, FiniteFn::Constant { c: -1.0 }],
        };
        assert_eq!(exact_rademacher_small(&pm, &one(1, 1)).unwrap(), 1.0);
        let single = Family::Finite { fns: vec![FiniteFn::Constant { c: 1.0 }] };
        assert_eq!(exact_rademacher_small(&single, &one(1, 2)).unwrap(), 0.0);
        assert!(matches!(
            exact_rademacher_small(&single, &one(17, 1)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn exact_linear_matches_brute_force_supremum() {
        // Independent oracle: the supremum over a dense grid of unit directions
        // in 2-D approaches the closed form from below.
        let draws = Draws {
            w: vec![vec![0.6, 0.8], vec![-1.0, 0.0]],
            x: vec![vec![vec![0.0, 1.0]], vec![vec![0.3, -0.4]]],
        };
        let fam = Family::Linear { b1: 1.0, b2: 1.0 };
        let exact = exact_rademacher_small(&fam, &draws).unwrap();
        let grid: Vec<Vec<f64>> = (0..3600)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 3600.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let mut total = 0.0;
        for mask in 0..4u32 {
            let s = [
                if mask & 1 == 1 { 1.0 } else { -1.0 },
                if mask & 2 == 2 { 1.0 } else { -1.0 },
            ];
            let best = |pts: [&Vec<f64>; 2]| {
                grid.iter()
                    .map(|a| (0..2).map(|j| s[j] * (a[0] * pts[j][0] + a[1] * pts[j][1])).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            total += best([&draws.w[0], &draws.w[1]]) + best([&draws.x[0][0], &draws.x[1][0]]);
        }
        let brute = total / 4.0 / 2.0;
        assert!(brute <= exact + 1e-12);
        assert!(exact - brute < 1e-5);
    }

    #[test]
    fn fixed_mc_agrees_with_exact() {
        let draws = fixed(3, 4, 9);
        for fam in [Family::Linear { b1: 1.0, b2: 1.0 }, Family::random_linear_probes(5, 3, 2, 4)] {
            let exact = exact_rademacher_small(&fam, &draws).unwrap();
            let mc = mc_rademacher_fixed(&fam, &draws, 20_000, 3).unwrap();
            assert!((mc.estimate - exact).abs() < 3.0 * mc.stderr, "{mc:?} vs {exact}");
        }
    }

    #[test]
    fn linear_estimates_respect_closed_form() {
        let fam = Family::Linear { b1: 1.0, b2: 1.0 };
        let dists = (SampleDist::UnitSphere, SampleDist::UnitSphere);
        let est = zs_rademacher_mc(&fam, 4, 4, (5, 5), dists, 10_000, 0).unwrap();
        assert!(est.estimate <= linear_rademacher_bound(1.0, 1.0, 4, 4) + 3.0 * est.stderr);
    }

    #[test]
    fn stderr_halves_at_four_times_replicates() {
        let fam = Family::Linear { b1: 1.0, b2: 1.0 };
        let dists = (SampleDist::UnitSphere, SampleDist::UnitBall);
        let a = zs_rademacher_mc(&fam, 4, 2, (3, 3), dists, 2_000, 5).unwrap();
        let b = zs_rademacher_mc(&fam, 4, 2, (3, 3), dists, 8_000, 6).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn linear_family_rejects_unnormalized_samples() {
        let fam = Family::Linear { b1: 1.0, b2: 1.0 };
        let dists = (SampleDist::Gaussian { sd: 1.0 }, SampleDist::UnitSphere);
        assert!(matches!(
            zs_rademacher_mc(&fam, 2, 2, (3, 3), dists, 10, 0),
            Err(Error::Argument(_))
        ));
        let big = Draws { w: vec![vec![2.0]], x: vec![vec![vec![0.0]]] };
        assert!(matches!(exact_rademacher_small(&fam, &big), Err(Error::Argument(_))));
    }

    #[test]
    fn mc_is_seed_deterministic() {
        let fam = Family::random_linear_probes(3, 2, 2, 0);
        let dists = (SampleDist::Gaussian { sd: 1.0 }, SampleDist::UnitBall);
        let a = zs_rademacher_mc(&fam, 3, 3, (2, 2), dists, 500, 11).unwrap();
        let b = zs_rademacher_mc(&fam, 3, 3, (2, 2), dists, 500, 11).unwrap();
        assert_eq!(a, b);
    }

    fn inputs() -> BoundInputs {
        BoundInputs {
            n: 100,
            m: 10,
            epsilon: 0.0,
            delta: 0.1,
            beta_smooth: 1.0,
            poincare_c: 1.0,
            rademacher: 0.05,
        }
    }

    #[test]
    fn bound_terms() {
        let b = excess_risk_bound(&BoundInputs { rademacher: 0.0, beta_smooth: 0.0, ..inputs() }).unwrap();
        assert_eq!(b.complexity, 0.0);
        assert_eq!(b.concentration, 0.0);
        assert!((b.tail - 2.0 * 10f64.ln() / 300.0).abs() < 1e-15);
        assert!((b.tail - 0.01535).abs() < 1e-5);
        assert!((b.smoothness - (0.2 * 10f64.ln() / 100.0).sqrt()).abs() < 1e-15);

        let full = excess_risk_bound(&inputs()).unwrap();
        assert!((full.total - 1.548).abs() < 1e-3, "{full:?}");
        assert!(matches!(
            excess_risk_bound(&BoundInputs { delta: 1.0, ..inputs() }),
            Err(Error::Domain(_))
        ));
        assert!(excess_risk_bound(&BoundInputs { delta: 0.0, ..inputs() }).is_err());
    }

    proptest! {
        #[test]
        fn bound_monotone(
            eps in 0.0f64..2.0, beta in 0.0f64..3.0, c in 0.0f64..3.0, r in 0.0f64..1.0,
            n in 1usize..500, m in 1usize..50, bump in 0.01f64..1.0,
        ) {
            let base = BoundInputs { n, m, epsilon: eps, delta: 0.05, beta_smooth: beta, poincare_c: c, rademacher: r };
            let t = |b: BoundInputs| excess_risk_bound(&b).unwrap().total;
            let v = t(base);
            let bigger = [
                t(BoundInputs { epsilon: eps + bump, ..base }),
                t(BoundInputs { beta_smooth: beta + bump, ..base }),
                t(BoundInputs { poincare_c: c + bump, ..base }),
                t(BoundInputs { rademacher: r + bump, ..base }),
            ];
            let smaller = [t(BoundInputs { n: n * 4, ..base }), t(BoundInputs { m: m + 1, ..base })];
            prop_assert!(bigger.iter().all(|&b| b >= v));
            prop_assert!(smaller.iter().all(|&s| s <= v));
        }
    }

    #[test]
    fn poincare_linear_and_constant() {
        let cov = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let fns = [
            TestFunction::Linear { a: vec![0.5, -1.0, 2.0] },
            TestFunction::Constant { c: 3.0 },
        ];
        let rep = poincare_check_gaussian(&cov, &fns, 200_000, 1).unwrap();
        let lin = &rep.entries[0];
        assert!((lin.bound - 5.25).abs() < 1e-12);
        assert!((lin.variance - lin.bound).abs() < 3.0 * lin.variance_stderr);
        assert_eq!(rep.entries[1].variance, 0.0);
        assert_eq!(rep.entries[1].bound, 0.0);
        assert!(rep.entries.iter().all(|e| e.holds));
    }

    #[test]
    fn poincare_random_tanh_polynomial() {
        let mut r = rng::stream(4, 0);
        let e = 4;
        let a: Vec<Vec<f64>> = (0..e).map(|_| rng::normal_vec(&mut r, e, 1.0)).collect();
        let cov: Vec<Vec<f64>> = (0..e)
            .map(|i| (0..e).map(|j| (0..e).map(|k| a[i][k] * a[j][k]).sum::<f64>() / e as f64).collect())
            .collect();
        let fns: Vec<TestFunction> = (0..3).map(|s| TestFunction::random_tanh_quadratic(e, s)).collect();
        let rep = poincare_check_gaussian(&cov, &fns, 100_000, 2).unwrap();
        assert!(rep.entries.iter().all(|e| e.holds), "{rep:?}");
    }

    #[test]
    fn poincare_rejects_indefinite_covariance() {
        let cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            poincare_check_gaussian(&cov, &[TestFunction::Constant { c: 0.0 }], 10, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let f = TestFunction::random_tanh_quadratic(3, 7);
        let w = [0.3, -0.2, 0.9];
        let TestFunction::TanhQuadratic { c, a, q } = &f else { unreachable!() };
        let eval = |w: &[f64]| {
            let qw: Vec<f64> = q.iter().map(|row| row.iter().zip(w).map(|(p, v)| p * v).sum()).collect();
            (c + a.iter().zip(w).map(|(p, v)| p * v).sum::<f64>()
                + 0.5 * w.iter().zip(&qw).map(|(p, v)| p * v).sum::<f64>())
            .tanh()
        };
        let h = 1e-6;
        let mut g2 = 0.0;
        for i in 0..3 {
            let mut up = w;
            let mut dn = w;
            up[i] += h;
            dn[i] -= h;
            g2 += ((eval(&up) - eval(&dn)) / (2.0 * h)).powi(2);
        }
        assert!((f.value_and_grad_sq(&w).1 - g2).abs() < 1e-8);
    }

    #[test]
    fn beta_smooth_of_zero_model_is_zero() {
        let spec = crate::nn::FusionSpec::uniform(2, 3, 4, 1, 3, 1);
        let model = FusionModel::<f64>::zeros(spec).unwrap();
        let (w, x) = ([0.1, 0.2], [0.0, 1.0, 2.0]);
        assert_eq!(estimate_beta_smooth(&model, &[(&w, &x)]).unwrap(), 0.0);
    }
}

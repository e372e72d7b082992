//! Constant-coefficient linear second-order operators, problem geometry and
//! manufactured data.
//!
//! Elliptic operators act as `𝓛[u] = Σ a_ij ∂_ij u + Σ b_i ∂_i u + c u`, so the
//! Poisson problem `-u'' = f` uses `a = -1`. Parabolic operators act as
//! `-∂_t u + 𝓛[u]`, with time as the last input axis; the heat equation
//! `-u_t + ν u_xx = f` is `a = ν`. Boundary conditions are Dirichlet: `g` is
//! the exact solution restricted to each boundary group.

use serde::{Deserialize, Serialize};

use crate::expr::Expr;
use crate::jets::{Jet3, MAX_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    #[serde(rename = "elliptic_nondivergence")]
    Elliptic,
    Parabolic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    kind: OperatorKind,
    space_dim: usize,
    a: [[f64; 2]; 2],
    b: [f64; 2],
    c: f64,
}

impl OperatorSpec {
    /// `a` must be symmetric and definite. Elliptic operators accept either
    /// sign (Poisson is written with `a = -1`); parabolic ones need `a > 0`.
    pub fn new(kind: OperatorKind, a: &[Vec<f64>], b: &[f64], c: f64) -> Result<Self> {
        let n = a.len();
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if !(1..=2).contains(&n) {
            return bad(format!("space dimension must be 1 or 2, got {n}"));
        }
        if a.iter().any(|row| row.len() != n) {
            return bad("coefficient matrix a must be square".into());
        }
        if b.len() != n {
            return bad(format!("b must have {n} entries, got {}", b.len()));
        }
        let all = a.iter().flatten().chain(b).chain(std::iter::once(&c));
        if all.clone().any(|v| !v.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        let mut am = [[0.0; 2]; 2];
        let mut bm = [0.0; 2];
        for i in 0..n {
            bm[i] = b[i];
            for j in 0..n {
                am[i][j] = a[i][j];
            }
        }
        if am[0][1] != am[1][0] {
            return bad("coefficient matrix a must be symmetric".into());
        }
        // Sylvester: definite iff det > 0 (2x2) or a != 0 (1x1).
        let definite = if n == 1 {
            am[0][0] != 0.0
        } else {
            am[0][0] * am[1][1] - am[0][1] * am[1][0] > 0.0
        };
        if !definite {
            return bad("coefficient matrix a must be definite".into());
        }
        if kind == OperatorKind::Parabolic && am[0][0] <= 0.0 {
            return bad("parabolic diffusion must be positive definite".into());
        }
        Ok(OperatorSpec {
            kind,
            space_dim: n,
            a: am,
            b: bm,
            c,
        })
    }

    /// `-Δu` in `space_dim` dimensions.
    pub fn poisson(space_dim: usize) -> Result<Self> {
        let a: Vec<Vec<f64>> = (0..space_dim)
            .map(|i| (0..space_dim).map(|j| if i == j { -1.0 } else { 0.0 }).collect())
            .collect();
        OperatorSpec::new(OperatorKind::Elliptic, &a, &vec![0.0; space_dim], 0.0)
    }

    /// `-u_t + ν u_xx`.
    pub fn heat(nu: f64) -> Result<Self> {
        OperatorSpec::new(OperatorKind::Parabolic, &[vec![nu]], &[0.0], 0.0)
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn space_dim(&self) -> usize {
        self.space_dim
    }

    /// Space dimension plus one for parabolic operators.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            OperatorKind::Elliptic => self.space_dim,
            OperatorKind::Parabolic => self.space_dim + 1,
        }
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn b(&self, i: usize) -> f64 {
        self.b[i]
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    fn check(&self, jet: &Jet3) -> Result<()> {
        if jet.dim != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "jet dimension for operator",
                expected: self.input_dim(),
                got: jet.dim,
            });
        }
        Ok(())
    }

    /// `𝓛[h]` at the jet's point.
    pub fn residual(&self, jet: &Jet3) -> Result<f64> {
        self.check(jet)?;
        let n = self.space_dim;
        let mut r = 0.0;
        for i in 0..n {
            for j in 0..n {
                r += self.a[i][j] * jet.d2[i][j];
            }
        }
        for i in 0..n {
            r += self.b[i] * jet.d1[i];
        }
        r += self.c * jet.value;
        if self.kind == OperatorKind::Parabolic {
            r -= jet.d1[n];
        }
        Ok(r)
    }

    /// `∇_x 𝓛[h]` over all input axes (time included). Needs third-order jets.
    pub fn residual_gradient(&self, jet: &Jet3) -> Result<[f64; MAX_DIM]> {
        self.check(jet)?;
        let n = self.space_dim;
        let mut g = [0.0; MAX_DIM];
        for (k, gk) in g.iter_mut().enumerate().take(jet.dim) {
            let mut r = 0.0;
            for i in 0..n {
                for j in 0..n {
                    r += self.a[i][j] * jet.d3[i][j][k];
                }
            }
            for i in 0..n {
                r += self.b[i] * jet.d2[i][k];
            }
            r += self.c * jet.d1[k];
            if self.kind == OperatorKind::Parabolic {
                r -= jet.d2[n][k];
            }
            *gk = r;
        }
        Ok(g)
    }
}

/// One axis of an axis-aligned region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    Interval(f64, f64),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Product of intervals and fixed coordinates.
    Box(Vec<Axis>),
    /// A finite point set, such as the two endpoints of an interval.
    Points(Vec<Vec<f64>>),
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Box(axes) => axes.len(),
            Region::Points(p) => p.first().map_or(0, Vec::len),
        }
    }

    /// Axes along which the region extends.
    pub fn free_axes(&self) -> Vec<usize> {
        match self {
            Region::Box(axes) => axes
                .iter()
                .enumerate()
                .filter(|(_, a)| matches!(a, Axis::Interval(..)))
                .map(|(k, _)| k)
                .collect(),
            Region::Points(_) => Vec::new(),
        }
    }

    /// Lebesgue measure over the free axes (point count for finite sets).
    pub fn measure(&self) -> f64 {
        match self {
            Region::Box(axes) => axes
                .iter()
                .map(|a| match a {
                    Axis::Interval(lo, hi) => hi - lo,
                    Axis::Fixed(_) => 1.0,
                })
                .product(),
            Region::Points(p) => p.len() as f64,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box(axes) => {
                axes.len() == x.len()
                    && axes.iter().zip(x).all(|(a, &v)| match *a {
                        Axis::Interval(lo, hi) => lo <= v && v <= hi,
                        Axis::Fixed(c) => v == c,
                    })
            }
            Region::Points(p) => p.iter().any(|q| q.as_slice() == x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGroup {
    pub name: String,
    pub region: Region,
}

/// A manufactured problem: operator, geometry, exact solution.
#[derive(Debug, Clone)]
pub struct PdeProblem {
    op: OperatorSpec,
    space: Vec<(f64, f64)>,
    t_end: Option<f64>,
    interior: Region,
    groups: Vec<BoundaryGroup>,
    exact: Expr,
}

impl PdeProblem {
    /// `space` holds one interval per spatial axis; `t_end` is required for
    /// parabolic operators. Variables in `exact` are `x`, `y` and `t`.
    pub fn new(
        op: OperatorSpec,
        space: Vec<(f64, f64)>,
        t_end: Option<f64>,
        exact: &str,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if space.len() != op.space_dim() {
            return bad(format!(
                "operator has {} space dimensions but the domain has {}",
                op.space_dim(),
                space.len()
            ));
        }
        if space.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return bad("domain intervals must satisfy lo < hi".into());
        }
        match (op.kind(), t_end) {
            (OperatorKind::Parabolic, Some(t)) if t > 0.0 && t.is_finite() => {}
            (OperatorKind::Parabolic, _) => return bad("parabolic problems need T > 0".into()),
            (OperatorKind::Elliptic, Some(_)) => {
                return bad("elliptic problems have no time horizon".into())
            }
            (OperatorKind::Elliptic, None) => {}
        }
        let mut vars: Vec<&str> = ["x", "y"][..space.len()].to_vec();
        if t_end.is_some() {
            vars.push("t");
        }
        let exact = Expr::parse(exact, &vars)?;

        let mut box_axes: Vec<Axis> = space.iter().map(|&(lo, hi)| Axis::Interval(lo, hi)).collect();
        if let Some(t) = t_end {
            box_axes.push(Axis::Interval(0.0, t));
        }
        let interior = Region::Box(box_axes.clone());

        let mut groups = Vec::new();
        if op.kind() == OperatorKind::Elliptic && space.len() == 1 {
            let (lo, hi) = space[0];
            groups.push(BoundaryGroup {
                name: "endpoints".into(),
                region: Region::Points(vec![vec![lo], vec![hi]]),
            });
        } else {
            for (k, &(lo, hi)) in space.iter().enumerate() {
                for (side, v) in [("lo", lo), ("hi", hi)] {
                    let mut axes = box_axes.clone();
                    axes[k] = Axis::Fixed(v);
                    groups.push(BoundaryGroup {
                        name: format!("{}_{side}", vars[k]),
                        region: Region::Box(axes),
                    });
                }
            }
            if t_end.is_some() {
                let mut axes = box_axes.clone();
                *axes.last_mut().expect("time axis") = Axis::Fixed(0.0);
                groups.push(BoundaryGroup {
                    name: "initial".into(),
                    region: Region::Box(axes),
                });
            }
        }
        Ok(PdeProblem {
            op,
            space,
            t_end,
            interior,
            groups,
            exact,
        })
    }

    /// `-u'' = f` on (-1, 1) with `u* = tanh(x)`.
    pub fn poisson_tanh() -> Self {
        PdeProblem::new(OperatorSpec::poisson(1).unwrap(), vec![(-1.0, 1.0)], None, "tanh(x)")
            .expect("built-in problem")
    }

    /// `-u'' = f` on (-1, 1) with `u* = (1 - x²) sin(6πx)`.
    pub fn poisson_sin6pi() -> Self {
        PdeProblem::new(
            OperatorSpec::poisson(1).unwrap(),
            vec![(-1.0, 1.0)],
            None,
            "(1 - x^2) * sin(6*pi*x)",
        )
        .expect("built-in problem")
    }

    /// `-u_t + ν u_xx = f` on (-1, 1) × (0, 1] with `u* = sin(πx) e^{-t}`.
    pub fn heat_sin(nu: f64) -> Result<Self> {
        PdeProblem::new(
            OperatorSpec::heat(nu)?,
            vec![(-1.0, 1.0)],
            Some(1.0),
            "sin(pi*x) * exp(-t)",
        )
    }

    pub fn op(&self) -> &OperatorSpec {
        &self.op
    }

    pub fn space(&self) -> &[(f64, f64)] {
        &self.space
    }

    pub fn t_end(&self) -> Option<f64> {
        self.t_end
    }

    pub fn input_dim(&self) -> usize {
        self.op.input_dim()
    }

    pub fn interior(&self) -> &Region {
        &self.interior
    }

    pub fn groups(&self) -> &[BoundaryGroup] {
        &self.groups
    }

    pub fn exact(&self) -> &Expr {
        &self.exact
    }

    pub fn exact_jet(&self, x: &[f64]) -> Result<Jet3> {
        self.exact.jet(x)
    }

    pub fn exact_value(&self, x: &[f64]) -> Result<f64> {
        self.exact.value(x)
    }

    /// Manufactured forcing `f = 𝓛[u*]`.
    pub fn f(&self, x: &[f64]) -> Result<f64> {
        self.op.residual(&self.exact.jet(x)?)
    }

    /// `∇f`, used for Hölder estimates of the data.
    pub fn f_gradient(&self, x: &[f64]) -> Result<[f64; MAX_DIM]> {
        self.op.residual_gradient(&self.exact.jet(x)?)
    }

    /// Dirichlet data of boundary group `j`.
    pub fn g(&self, group: usize, x: &[f64]) -> Result<f64> {
        if group >= self.groups.len() {
            return Err(Error::InvalidArgument(format!("no boundary group {group}")));
        }
        self.exact.value(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn poisson_residual_of_tanh() {
        let p = PdeProblem::poisson_tanh();
        let j = p.exact_jet(&[0.0]).unwrap();
        assert_eq!(p.op().residual(&j).unwrap(), 0.0);
        assert_eq!(p.op().residual_gradient(&j).unwrap()[0], 2.0);
        assert_eq!(p.op().residual(&Jet3::zero(1)).unwrap(), 0.0);
        assert_eq!(p.op().residual_gradient(&Jet3::zero(1)).unwrap(), [0.0; 3]);
    }

    #[test]
    fn manufactured_poisson_forcing() {
        let p = PdeProblem::poisson_tanh();
        let t = 1f64.tanh();
        assert_eq!(p.f(&[0.0]).unwrap(), 0.0);
        assert!((p.f(&[1.0]).unwrap() - 2.0 * t * (1.0 - t * t)).abs() < 1e-14);
        assert!((p.f(&[1.0]).unwrap() - 0.639700).abs() < 1e-6);
    }

    #[test]
    fn heat_residual_closed_form() {
        for nu in [1.0, 0.3] {
            let p = PdeProblem::heat_sin(nu).unwrap();
            let (x, t) = (0.5, 0.25);
            let expect = (1.0 - nu * PI * PI) * (PI * x).sin() * (-t as f64).exp();
            assert!((p.f(&[x, t]).unwrap() - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn heat_residual_gradient_closed_form() {
        let nu = 0.7;
        let p = PdeProblem::heat_sin(nu).unwrap();
        let (x, t) = (0.3, 0.6);
        let g = p.f_gradient(&[x, t]).unwrap();
        let k = 1.0 - nu * PI * PI;
        assert!((g[0] - k * PI * (PI * x).cos() * (-t as f64).exp()).abs() < 1e-12);
        assert!((g[1] + k * (PI * x).sin() * (-t as f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn sin6pi_vanishes_on_boundary() {
        let p = PdeProblem::poisson_sin6pi();
        assert_eq!(p.g(0, &[-1.0]).unwrap(), 0.0);
        assert_eq!(p.g(0, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn heat_boundary_groups() {
        let p = PdeProblem::heat_sin(1.0).unwrap();
        let names: Vec<_> = p.groups().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["x_lo", "x_hi", "initial"]);
        assert_eq!(p.groups()[0].region.free_axes(), [1]);
        assert_eq!(p.groups()[2].region.free_axes(), [0]);
        assert!(p.groups()[2].region.contains(&[0.2, 0.0]));
        assert!(!p.groups()[2].region.contains(&[0.2, 0.1]));
    }

    #[test]
    fn operator_validation() {
        use OperatorKind::*;
        assert!(OperatorSpec::new(Elliptic, &[vec![0.0]], &[0.0], 0.0).is_err());
        assert!(OperatorSpec::new(Elliptic, &[vec![1.0, 2.0], vec![2.0, 1.0]], &[0.0, 0.0], 0.0).is_err());
        assert!(OperatorSpec::new(Elliptic, &[vec![1.0, 0.1], vec![0.2, 1.0]], &[0.0, 0.0], 0.0).is_err());
        assert!(OperatorSpec::new(Elliptic, &[vec![-1.0, 0.2], vec![0.2, -1.0]], &[0.0, 0.0], 0.0).is_ok());
        assert!(OperatorSpec::heat(-1.0).is_err());
        assert!(OperatorSpec::heat(0.0).is_err());
    }

    #[test]
    fn jet_dimension_checked() {
        let op = OperatorSpec::heat(1.0).unwrap();
        assert!(matches!(op.residual(&Jet3::zero(1)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn general_elliptic_2d() {
        let op = OperatorSpec::new(
            OperatorKind::Elliptic,
            &[vec![2.0, 0.5], vec![0.5, 1.0]],
            &[0.3, -0.4],
            1.5,
        )
        .unwrap();
        let p = PdeProblem::new(op, vec![(-1.0, 1.0), (0.0, 2.0)], None, "x^2*y + y^3").unwrap();
        let (x, y) = (0.4, 1.1);
        // u_xx = 2y, u_xy = 2x, u_yy = 6y, u_x = 2xy, u_y = x² + 3y²
        let expect = 2.0 * 2.0 * y + 2.0 * 0.5 * 2.0 * x + 6.0 * y + 0.3 * 2.0 * x * y
            - 0.4 * (x * x + 3.0 * y * y)
            + 1.5 * (x * x * y + y * y * y);
        assert!((p.f(&[x, y]).unwrap() - expect).abs() < 1e-12);
        assert_eq!(p.groups().len(), 4);
    }
}

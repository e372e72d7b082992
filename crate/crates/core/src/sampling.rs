//! Training points, covering radii and Voronoi cell masses.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jets::{Point, MAX_DIM};
use crate::pde::{Axis, PdeProblem, Region};
use crate::{Error, Result};

/// Default number of probes per free axis for [`covering_radius`].
pub const DEFAULT_PROBES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Equidistant,
    IidUniform,
}

/// Residual points in the domain and one point list per boundary group.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub dim: usize,
    pub residual: Vec<Point>,
    pub boundary: Vec<Vec<Point>>,
    pub seed: u64,
    pub generator: Generator,
}

impl TrainingSet {
    /// Samples `m_r` interior points and `m_b[j]` points on boundary group
    /// `j`. Finite boundary groups (interval endpoints) always contribute all
    /// of their points and ignore the requested count.
    pub fn generate(
        problem: &PdeProblem,
        generator: Generator,
        m_r: usize,
        m_b: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let groups = problem.groups();
        if m_b.len() != groups.len() {
            return Err(Error::DimensionMismatch {
                what: "boundary group counts",
                expected: groups.len(),
                got: m_b.len(),
            });
        }
        let draw = |region: &Region, m: usize, stream: u64| -> Result<Vec<Point>> {
            match (region, generator) {
                (Region::Points(_), _) => finite_points(region),
                (_, Generator::Equidistant) => equidistant_region(region, m),
                (_, Generator::IidUniform) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(stream);
                    iid_uniform_with(region, m, &mut rng)
                }
            }
        };
        let residual = draw(problem.interior(), m_r, 0)?;
        let boundary = groups
            .iter()
            .zip(m_b)
            .enumerate()
            .map(|(j, (g, &m))| draw(&g.region, m, 1 + j as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            dim: problem.input_dim(),
            residual,
            boundary,
            seed,
            generator,
        })
    }

    pub fn m_r(&self) -> usize {
        self.residual.len()
    }

    pub fn m_b(&self) -> Vec<usize> {
        self.boundary.iter().map(Vec::len).collect()
    }
}

/// `m` equally spaced points on `[lo, hi]` including both endpoints, or the
/// midpoint when `m = 1`.
pub fn equidistant(lo: f64, hi: f64, m: usize) -> Result<Vec<f64>> {
    match m {
        0 => Err(Error::InvalidArgument("equidistant needs m >= 1".into())),
        1 => Ok(vec![0.5 * (lo + hi)]),
        _ => {
            let h = (hi - lo) / (m - 1) as f64;
            Ok((0..m)
                .map(|i| if i == m - 1 { hi } else { lo + i as f64 * h })
                .collect())
        }
    }
}

/// Equidistant points on a box region. With `k` free axes `m` must be a
/// perfect `k`-th power; the result is the tensor grid.
pub fn equidistant_region(region: &Region, m: usize) -> Result<Vec<Point>> {
    let axes = match region {
        Region::Box(axes) => axes,
        Region::Points(_) => return finite_points(region),
    };
    let free = region.free_axes();
    if free.is_empty() {
        return Ok(vec![fixed_point(axes); m]);
    }
    let per_axis = (m as f64).powf(1.0 / free.len() as f64).round() as usize;
    if per_axis.pow(free.len() as u32) != m || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "equidistant sampling on {} free axes needs a perfect power, got m = {m}",
            free.len()
        )));
    }
    let coords = free
        .iter()
        .map(|&k| match axes[k] {
            Axis::Interval(lo, hi) => equidistant(lo, hi, per_axis),
            Axis::Fixed(_) => unreachable!("free axis"),
        })
        .collect::<Result<Vec<_>>>()?;
    let base = fixed_point(axes);
    Ok(tensor_grid(&base, &free, &coords))
}

/// `m` iid uniform points on a region, deterministic in `seed`.
pub fn iid_uniform(region: &Region, m: usize, seed: u64) -> Result<Vec<Point>> {
    iid_uniform_with(region, m, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn iid_uniform_with<R: Rng>(region: &Region, m: usize, rng: &mut R) -> Result<Vec<Point>> {
    match region {
        Region::Box(axes) => {
            let dists: Vec<Option<Uniform<f64>>> = axes
                .iter()
                .map(|a| match *a {
                    Axis::Interval(lo, hi) => Some(Uniform::new(lo, hi)),
                    Axis::Fixed(_) => None,
                })
                .collect();
            let base = fixed_point(axes);
            Ok((0..m)
                .map(|_| {
                    let mut p = base;
                    for (k, d) in dists.iter().enumerate() {
                        if let Some(d) = d {
                            p[k] = d.sample(rng);
                        }
                    }
                    p
                })
                .collect())
        }
        Region::Points(pts) => {
            if pts.is_empty() {
                return Err(Error::InvalidArgument("empty point region".into()));
            }
            let all = finite_points(region)?;
            Ok((0..m).map(|_| all[rng.gen_range(0..all.len())]).collect())
        }
    }
}

/// Largest distance from a probe to its nearest sample, over a grid with
/// `probes` points per free axis (endpoints included).
pub fn covering_radius(points: &[Point], region: &Region, probes: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("covering radius of an empty set".into()));
    }
    let dim = region.dim();
    let probe_set = probe_grid(region, probes)?;
    let free = region.free_axes();
    if free.len() == 1 && points.iter().all(|p| region.contains(&p[..dim])) {
        // All samples share the fixed coordinates: walk sorted probes.
        let k = free[0];
        let mut xs: Vec<f64> = points.iter().map(|p| p[k]).collect();
        xs.sort_by(f64::total_cmp);
        let mut best = 0.0f64;
        let mut j = 0;
        for q in &probe_set {
            let v = q[k];
            while j + 1 < xs.len() && xs[j + 1] <= v {
                j += 1;
            }
            let mut d = (v - xs[j]).abs();
            if j + 1 < xs.len() {
                d = d.min((xs[j + 1] - v).abs());
            }
            best = best.max(d);
        }
        return Ok(best);
    }
    let mut best = 0.0f64;
    for q in &probe_set {
        let d = points
            .iter()
            .map(|p| dist2(p, q, dim))
            .fold(f64::INFINITY, f64::min);
        best = best.max(d);
    }
    Ok(best.sqrt())
}

/// Uniform-measure masses of the Voronoi cells of `points` in `region`.
/// Exact for one free axis; Monte Carlo with `mc_samples` draws otherwise.
/// Ties go to the lowest index.
pub fn voronoi_masses(
    points: &[Point],
    region: &Region,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("Voronoi masses of an empty set".into()));
    }
    let dim = region.dim();
    let free = region.free_axes();
    let nearest = |q: &Point| -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, q, dim);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    };
    let mut masses = vec![0.0; points.len()];
    match region {
        Region::Points(_) => {
            let all = finite_points(region)?;
            for q in &all {
                masses[nearest(q)] += 1.0 / all.len() as f64;
            }
        }
        Region::Box(axes) if free.len() == 1 && points.iter().all(|p| region.contains(&p[..dim])) => {
            let k = free[0];
            let Axis::Interval(lo, hi) = axes[k] else { unreachable!() };
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|&a, &b| points[a][k].total_cmp(&points[b][k]).then(a.cmp(&b)));
            // Collapse duplicates onto their lowest index.
            let mut reps: Vec<(f64, usize)> = Vec::new();
            for &i in &order {
                let x = points[i][k];
                if reps.last().is_none_or(|&(y, _)| y != x) {
                    reps.push((x, i));
                }
            }
            for (r, &(x, i)) in reps.iter().enumerate() {
                let left = if r == 0 { lo } else { 0.5 * (reps[r - 1].0 + x) };
                let right = if r + 1 == reps.len() { hi } else { 0.5 * (x + reps[r + 1].0) };
                masses[i] = (right - left) / (hi - lo);
            }
        }
        Region::Box(_) => {
            if mc_samples == 0 {
                return Err(Error::InvalidArgument("Monte Carlo Voronoi needs samples".into()));
            }
            let draws = iid_uniform(region, mc_samples, seed)?;
            for q in &draws {
                masses[nearest(q)] += 1.0;
            }
            for m in &mut masses {
                *m /= mc_samples as f64;
            }
        }
    }
    Ok(masses)
}

/// Constants of the sampling distributions: lower partition mass `c ε^s` and
/// upper ball mass `C ε^s` for residual (`s = d`) and boundary (`s = d - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionConstants {
    pub c_r: f64,
    #[serde(rename = "C_r")]
    pub big_c_r: f64,
    pub c_b: f64,
    #[serde(rename = "C_b")]
    pub big_c_b: f64,
    pub d: usize,
    pub alpha: f64,
}

impl DistributionConstants {
    pub fn new(c_r: f64, big_c_r: f64, c_b: f64, big_c_b: f64, d: usize, alpha: f64) -> Result<Self> {
        let k = DistributionConstants {
            c_r,
            big_c_r,
            c_b,
            big_c_b,
            d,
            alpha,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_ranges()?;
        if self.c_r > self.big_c_r || self.c_b > self.big_c_b {
            return Err(Error::InvalidArgument("need c <= C for each distribution".into()));
        }
        Ok(())
    }

    /// Positivity, exponent and dimension checks without the ordering
    /// `c <= C`, so deliberately inconsistent constants can be probed.
    pub fn validate_ranges(&self) -> Result<()> {
        let pos = [self.c_r, self.big_c_r, self.c_b, self.big_c_b];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("distribution constants must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(1..=MAX_DIM).contains(&self.d) {
            return Err(Error::InvalidArgument(format!("dimension must be 1..={MAX_DIM}")));
        }
        Ok(())
    }

    /// Uniform measures on the problem's domain and on its boundary:
    /// `c = 1/|R|` and `C = ω_s/|R|` with `ω_s` the unit-ball volume. In one
    /// dimension the boundary is the two endpoints, each of mass ½.
    pub fn uniform(problem: &PdeProblem, alpha: f64) -> Result<Self> {
        let d = problem.input_dim();
        let vol = problem.interior().measure();
        let (c_b, big_c_b) = if d == 1 {
            (0.5, 0.5)
        } else {
            let area: f64 = problem.groups().iter().map(|g| g.region.measure()).sum();
            (1.0 / area, unit_ball_volume(d - 1) / area)
        };
        DistributionConstants::new(1.0 / vol, unit_ball_volume(d) / vol, c_b, big_c_b, d, alpha)
    }

    pub fn kappa_r(&self) -> f64 {
        self.big_c_r / self.c_r
    }

    pub fn kappa_b(&self) -> f64 {
        self.big_c_b / self.c_b
    }
}

/// Volume of the unit ball in `R^s` for `s ≤ 3`.
pub fn unit_ball_volume(s: usize) -> f64 {
    use std::f64::consts::PI;
    match s {
        0 => 1.0,
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => panic!("unit ball volume only tabulated up to dimension 3"),
    }
}

/// Tensor grid with `per_axis` equidistant probes on each free axis.
pub fn probe_grid(region: &Region, per_axis: usize) -> Result<Vec<Point>> {
    match region {
        Region::Points(_) => finite_points(region),
        Region::Box(axes) => {
            let free = region.free_axes();
            let coords = free
                .iter()
                .map(|&k| match axes[k] {
                    Axis::Interval(lo, hi) => equidistant(lo, hi, per_axis),
                    Axis::Fixed(_) => unreachable!("free axis"),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(tensor_grid(&fixed_point(axes), &free, &coords))
        }
    }
}

fn finite_points(region: &Region) -> Result<Vec<Point>> {
    let Region::Points(pts) = region else {
        unreachable!("finite region expected")
    };
    pts.iter()
        .map(|p| {
            if p.len() > MAX_DIM {
                return Err(Error::InvalidArgument("point dimension too large".into()));
            }
            let mut q = [0.0; MAX_DIM];
            q[..p.len()].copy_from_slice(p);
            Ok(q)
        })
        .collect()
}

fn fixed_point(axes: &[Axis]) -> Point {
    let mut p = [0.0; MAX_DIM];
    for (k, a) in axes.iter().enumerate() {
        if let Axis::Fixed(c) = *a {
            p[k] = c;
        }
    }
    p
}

/// Row-major over `free` with the last free axis varying fastest.
fn tensor_grid(base: &Point, free: &[usize], coords: &[Vec<f64>]) -> Vec<Point> {
    let mut out = vec![*base];
    for (&k, cs) in free.iter().zip(coords) {
        out = out
            .iter()
            .flat_map(|p| {
                cs.iter().map(move |&c| {
                    let mut q = *p;
                    q[k] = c;
                    q
                })
            })
            .collect();
    }
    out
}

fn dist2(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|k| (a[k] - b[k]).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(lo: f64, hi: f64) -> Region {
        Region::Box(vec![Axis::Interval(lo, hi)])
    }

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn equidistant_examples() {
        assert_eq!(equidistant(-1.0, 1.0, 3).unwrap(), [-1.0, 0.0, 1.0]);
        assert_eq!(equidistant(-1.0, 1.0, 1).unwrap(), [0.0]);
        assert_eq!(equidistant(0.0, 1.0, 5).unwrap(), [0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(equidistant(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn equidistant_tensor_grid() {
        let r = Region::Box(vec![Axis::Interval(0.0, 1.0), Axis::Interval(0.0, 2.0)]);
        let g = equidistant_region(&r, 9).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[1], [0.0, 1.0, 0.0]);
        assert!(equidistant_region(&r, 8).is_err());
    }

    #[test]
    fn iid_uniform_is_reproducible_and_centered() {
        let r = line(-1.0, 1.0);
        let a = iid_uniform(&r, 100_000, 5).unwrap();
        assert_eq!(a, iid_uniform(&r, 100_000, 5).unwrap());
        let mean = a.iter().map(|p| p[0]).sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!(a.iter().all(|p| (-1.0..1.0).contains(&p[0])));
    }

    #[test]
    fn initial_slab_points_have_zero_time() {
        let p = PdeProblem::heat_sin(1.0).unwrap();
        let ts = TrainingSet::generate(&p, Generator::IidUniform, 50, &[5, 5, 10], 3).unwrap();
        assert_eq!(ts.m_b(), [5, 5, 10]);
        assert!(ts.boundary[2].iter().all(|q| q[1] == 0.0));
        assert!(ts.boundary[0].iter().all(|q| q[0] == -1.0));
        assert!(ts.boundary[1].iter().all(|q| q[0] == 1.0));
        for q in &ts.residual {
            assert!(p.interior().contains(&q[..2]));
        }
    }

    #[test]
    fn one_dimensional_boundary_is_both_endpoints() {
        let p = PdeProblem::poisson_tanh();
        let ts = TrainingSet::generate(&p, Generator::Equidistant, 100, &[0], 0).unwrap();
        assert_eq!(ts.m_r(), 100);
        assert_eq!(ts.boundary[0], pts(&[-1.0, 1.0]));
    }

    #[test]
    fn covering_radius_examples() {
        let r = line(-1.0, 1.0);
        assert_eq!(covering_radius(&pts(&[0.0]), &r, DEFAULT_PROBES).unwrap(), 1.0);
        let eps = covering_radius(&pts(&[-1.0, 0.0, 1.0]), &r, DEFAULT_PROBES).unwrap();
        assert!((eps - 0.5).abs() < 1e-4);
        assert!(covering_radius(&[], &r, 10).is_err());
    }

    #[test]
    fn covering_radius_brute_force_agrees() {
        let r = line(-1.0, 1.0);
        let p = iid_uniform(&r, 30, 11).unwrap();
        let fast = covering_radius(&p, &r, 2001).unwrap();
        // Shift the samples off the line so the general path runs.
        let r2 = Region::Box(vec![Axis::Interval(-1.0, 1.0), Axis::Fixed(0.0)]);
        let slow = covering_radius(&p, &r2, 2001).unwrap();
        assert!((fast - slow).abs() < 1e-15);
    }

    #[test]
    fn voronoi_examples() {
        let r = line(-1.0, 1.0);
        assert_eq!(voronoi_masses(&pts(&[-1.0, 0.0, 1.0]), &r, 0, 0).unwrap(), [0.25, 0.5, 0.25]);
        assert_eq!(voronoi_masses(&pts(&[0.3]), &r, 0, 0).unwrap(), [1.0]);
        let dup = voronoi_masses(&pts(&[0.0, 0.0]), &r, 0, 0).unwrap();
        assert_eq!(dup, [1.0, 0.0]);
    }

    #[test]
    fn voronoi_two_dimensional_monte_carlo() {
        let r = Region::Box(vec![Axis::Interval(0.0, 1.0), Axis::Interval(0.0, 1.0)]);
        let p = vec![[0.25, 0.5, 0.0], [0.75, 0.5, 0.0]];
        let n = 20_000;
        let m = voronoi_masses(&p, &r, n, 1).unwrap();
        assert!((m[0] + m[1] - 1.0).abs() < 1e-12);
        let sd = (0.25 / n as f64).sqrt();
        assert!((m[0] - 0.5).abs() < 3.0 * sd);
    }

    #[test]
    fn uniform_constants_on_unit_interval() {
        let k = DistributionConstants::uniform(&PdeProblem::poisson_tanh(), 1.0).unwrap();
        assert_eq!((k.c_r, k.big_c_r, k.c_b, k.big_c_b), (0.5, 1.0, 0.5, 0.5));
        assert_eq!(k.kappa_r(), 2.0);
        assert!(DistributionConstants::new(1.0, 0.5, 1.0, 1.0, 1, 1.0).is_err());
        assert!(DistributionConstants::new(1.0, 1.0, 1.0, 1.0, 1, 0.0).is_err());
    }
}

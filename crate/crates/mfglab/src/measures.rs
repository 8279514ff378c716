//! Empirical measures, optimal transport between them, and interpolation.
//!
//! The discretization identifies a configuration `q = (q_1, ..., q_m)` with
//! the uniform empirical measure on its particles. Squared Wasserstein
//! distance between two equal-size clouds is an assignment problem over
//! permutations,
//!
//! ```text
//! W_2(mu, nu)^2 = min_sigma (1/m) sum_i |x_i - y_sigma(i)|^2,
//! ```
//!
//! solved exactly here: by sorting in dimension one, by lexicographic
//! exhaustive search for small `m`, and by the Hungarian algorithm above
//! that. Ties between optimal permutations are broken toward the
//! lexicographically smallest one so that distances, couplings and displacement
//! interpolants are all deterministic functions of their inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `m` for which the exhaustive permutation search is used.
const EXHAUSTIVE_LIMIT: usize = 8;

/// Uniform empirical measure on `m` points of `R^d`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    d: usize,
    points: Vec<f64>,
}

/// Finitely supported measure with explicit weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMeasure {
    d: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

/// Optimal permutation coupling between two equal-size clouds.
///
/// `permutation[i]` is the target index matched to source particle `i`;
/// `cost` is the squared distance `W_2^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

impl EmpiricalMeasure {
    pub fn new(d: usize, points: Vec<f64>) -> Result<EmpiricalMeasure> {
        if d == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if points.is_empty() || points.len() % d != 0 {
            return Err(Error::invalid(format!(
                "point buffer length {} is not a positive multiple of d = {d}",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("points must be finite"));
        }
        Ok(EmpiricalMeasure { d, points })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<EmpiricalMeasure> {
        let d = points.first().map(|p| p.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(points.len() * d);
        for p in points {
            if p.len() != d {
                return Err(Error::invalid("inconsistent point dimensions"));
            }
            flat.extend_from_slice(p);
        }
        EmpiricalMeasure::new(d, flat)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    /// `int |x|^2 dmu`.
    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|x| x * x).sum::<f64>() / self.len() as f64
    }
}

impl WeightedMeasure {
    pub fn new(d: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<WeightedMeasure> {
        if d == 0 || points.len() % d != 0 {
            return Err(Error::invalid("bad point buffer"));
        }
        if weights.len() != points.len() / d {
            return Err(Error::invalid("one weight per point required"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights must sum to 1, got {total}")));
        }
        Ok(WeightedMeasure { d, points, weights })
    }

    pub fn uniform(mu: &EmpiricalMeasure) -> WeightedMeasure {
        let m = mu.len();
        WeightedMeasure {
            d: mu.d,
            points: mu.points.clone(),
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn second_moment(&self) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * self.point(i).iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Squared distance between particle `i` of `mu` and particle `j` of `nu`.
fn pair_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, i: usize, j: usize) -> f64 {
    mu.point(i)
        .iter()
        .zip(nu.point(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn coupling_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, perm: &[usize]) -> f64 {
    let m = perm.len() as f64;
    perm.iter()
        .enumerate()
        .map(|(i, &j)| pair_cost(mu, nu, i, j))
        .sum::<f64>()
        / m
}

/// Wasserstein-2 distance and the optimal permutation coupling.
///
/// Requires equal particle counts and dimensions. The returned coupling is
/// the lexicographically smallest permutation among the optimal ones, up to
/// floating-point resolution of ties in the non-exhaustive solvers.
pub fn w2_distance(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(f64, Coupling)> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    if mu.len() != nu.len() {
        return Err(Error::invalid(format!(
            "particle count mismatch: {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    let m = mu.len();
    let perm = if mu.dim() == 1 {
        sorted_assignment(mu, nu)
    } else if m <= EXHAUSTIVE_LIMIT {
        exhaustive_assignment(mu, nu)
    } else {
        let mut p = hungarian(m, |i, j| pair_cost(mu, nu, i, j));
        canonicalize_ties(mu, nu, &mut p);
        p
    };
    let cost = coupling_cost(mu, nu, &perm);
    Ok((cost.sqrt(), Coupling { permutation: perm, cost }))
}

/// Monotone matching of the order statistics; optimal in dimension one.
/// Ties in point values are resolved by original index, which makes the
/// result the lex-smallest optimal permutation.
fn sorted_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<usize> {
    let m = mu.len();
    let mut left: Vec<usize> = (0..m).collect();
    let mut right: Vec<usize> = (0..m).collect();
    left.sort_by(|&a, &b| {
        mu.points[a].partial_cmp(&mu.points[b]).unwrap().then(a.cmp(&b))
    });
    right.sort_by(|&a, &b| {
        nu.points[a].partial_cmp(&nu.points[b]).unwrap().then(a.cmp(&b))
    });
    let mut perm = vec![0usize; m];
    for k in 0..m {
        perm[left[k]] = right[k];
    }
    perm
}

/// Lexicographic enumeration with strict improvement, so the first optimal
/// permutation in lex order wins.
fn exhaustive_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<usize> {
    let m = mu.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        let c = coupling_cost(mu, nu, &perm);
        match &best {
            Some((bc, _)) if c >= *bc => {}
            _ => best = Some((c, perm.clone())),
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.unwrap().1
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Hungarian algorithm with potentials, `O(n^3)`.
///
/// `cost(i, j)` is the cost of assigning row `i` to column `j`; the result
/// maps each row to its column in an optimal assignment.
fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j] is the row currently assigned to column j, 0 when free.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Pushes an optimal permutation toward the lex-smallest optimal one by
/// repeated cost-neutral 2-swaps. Handles the structured ties that occur when
/// clouds contain coincident points.
fn canonicalize_ties(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, perm: &mut [usize]) {
    let m = perm.len();
    let tol = 1e-12;
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..m {
            for k in (i + 1)..m {
                if perm[k] >= perm[i] {
                    continue;
                }
                let before = pair_cost(mu, nu, i, perm[i]) + pair_cost(mu, nu, k, perm[k]);
                let after = pair_cost(mu, nu, i, perm[k]) + pair_cost(mu, nu, k, perm[i]);
                if after <= before + tol && after - before < tol {
                    perm.swap(i, k);
                    changed = true;
                }
            }
        }
    }
}

/// Point of the displacement geodesic at parameter `s in [0, 1]`.
pub fn displacement_interpolate(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    s: f64,
) -> Result<EmpiricalMeasure> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("interpolation parameter {s} outside [0, 1]")));
    }
    let (_, coupling) = w2_distance(mu, nu)?;
    let d = mu.dim();
    let mut points = Vec::with_capacity(mu.flat().len());
    for i in 0..mu.len() {
        let x = mu.point(i);
        let y = nu.point(coupling.permutation[i]);
        for a in 0..d {
            points.push((1.0 - s) * x[a] + s * y[a]);
        }
    }
    EmpiricalMeasure::new(d, points)
}

/// Linear (vertical) interpolation of the measures themselves,
/// `(1 - s) mu + s nu`, as a weighted measure on the union of supports.
pub fn classical_interpolate(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    s: f64,
) -> Result<WeightedMeasure> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("interpolation parameter {s} outside [0, 1]")));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let mut points = mu.flat().to_vec();
    points.extend_from_slice(nu.flat());
    let mut weights = vec![(1.0 - s) / mu.len() as f64; mu.len()];
    weights.extend(vec![s / nu.len() as f64; nu.len()]);
    WeightedMeasure::new(mu.dim(), points, weights)
}

/// Brute-force reference solver over all permutations in lex order.
/// Exposed for oracle tests and the transport audit; exponential in `m`.
pub fn w2_brute_force(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(f64, Coupling)> {
    if mu.dim() != nu.dim() || mu.len() != nu.len() {
        return Err(Error::invalid("shape mismatch"));
    }
    let perm = exhaustive_assignment(mu, nu);
    let cost = coupling_cost(mu, nu, &perm);
    Ok((cost.sqrt(), Coupling { permutation: perm, cost }))
}

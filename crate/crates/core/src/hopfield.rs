//! Continuous modern Hopfield network with one-step retrieval.
//!
//! Stored patterns are the rows `e_i` of a `k x m` matrix `E`. One update of a
//! state (query) `xi` is `f(xi) = Eᵀ softmax(beta E xi)`, which is exactly
//! softmax attention with keys and values `E`. The module also evaluates the
//! energy whose stationary points the update converges to, the separation of
//! a pattern, the one-update retrieval error bounds and the exponential
//! storage capacity bound (which needs the principal branch of Lambert W).

use crate::error::{Error, Result};
use crate::ndiff::Array;

/// Stored patterns plus inverse temperature. Immutable after construction.
#[derive(Clone, Debug)]
pub struct PatternStore {
    patterns: Array,
    max_norm: f64,
    beta: f64,
}

/// Outcome of one Hopfield update.
#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub retrieved: Vec<f64>,
    pub weights: Vec<f64>,
    pub energy_before: f64,
    pub energy_after: f64,
    /// Index of the largest softmax weight, lowest index on ties.
    pub argmax: usize,
}

impl PatternStore {
    pub fn new(patterns: Array, beta: f64) -> Result<Self> {
        if patterns.rank() != 2 || patterns.shape()[0] == 0 || patterns.shape()[1] == 0 {
            return Err(Error::Invalid(format!(
                "pattern store needs a non-empty k x m matrix, got shape {:?}",
                patterns.shape()
            )));
        }
        if !patterns.all_finite() {
            return Err(Error::Invalid("non-finite stored pattern".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be positive and finite, got {beta}")));
        }
        let max_norm = (0..patterns.rows()).map(|i| norm(patterns.row(i))).fold(0.0, f64::max);
        Ok(Self {
            patterns,
            max_norm,
            beta,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], beta: f64) -> Result<Self> {
        Self::new(Array::from_rows(rows)?, beta)
    }

    pub fn patterns(&self) -> &Array {
        &self.patterns
    }

    pub fn pattern(&self, i: usize) -> &[f64] {
        self.patterns.row(i)
    }

    /// Number of stored patterns `k`.
    pub fn len(&self) -> usize {
        self.patterns.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pattern dimension `m`.
    pub fn dim(&self) -> usize {
        self.patterns.shape()[1]
    }

    /// Largest pattern norm `M`.
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.patterns.clone(), beta)
    }

    fn check_dim(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: xi.len(),
            });
        }
        Ok(())
    }

    fn logits(&self, xi: &[f64]) -> Vec<f64> {
        let mut l = self.patterns.matvec(xi).expect("dimension checked");
        l.iter_mut().for_each(|v| *v *= self.beta);
        l
    }

    /// Softmax weights `softmax(beta E xi)`.
    pub fn weights(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(xi)?;
        let mut w = self.logits(xi);
        crate::ndiff::softmax_in_place(&mut w);
        Ok(w)
    }

    /// One Hopfield update with diagnostics.
    pub fn retrieve(&self, xi: &[f64]) -> Result<RetrievalReport> {
        let weights = self.weights(xi)?;
        let retrieved = self.patterns.t_matvec(&weights)?;
        let argmax = argmax_lowest(&weights);
        Ok(RetrievalReport {
            energy_before: self.energy(xi)?,
            energy_after: self.energy(&retrieved)?,
            retrieved,
            weights,
            argmax,
        })
    }

    /// Retrieved vector only.
    pub fn update(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let weights = self.weights(xi)?;
        self.patterns.t_matvec(&weights)
    }

    /// `-lse(beta, E xi) + beta^-1 ln k + xiᵀxi / 2 + M^2 / 2`, with the
    /// log-sum-exp evaluated after subtracting the maximum logit.
    pub fn energy(&self, xi: &[f64]) -> Result<f64> {
        self.check_dim(xi)?;
        let logits = self.logits(xi);
        let lse = crate::ndiff::log_sum_exp(&logits) / self.beta;
        let k = self.len() as f64;
        Ok(-lse + k.ln() / self.beta + 0.5 * dot(xi, xi) + 0.5 * self.max_norm * self.max_norm)
    }

    /// `Delta_i = min_{j != i} (e_iᵀe_i - e_iᵀe_j)`.
    pub fn separation(&self, i: usize) -> Result<f64> {
        let k = self.len();
        if k < 2 {
            return Err(Error::Domain("separation is undefined for a single pattern".into()));
        }
        if i >= k {
            return Err(Error::Invalid(format!(
                "pattern index {i} out of range for {k} patterns"
            )));
        }
        let ei = self.pattern(i);
        let self_dot = dot(ei, ei);
        Ok((0..k)
            .filter(|&j| j != i)
            .map(|j| self_dot - dot(ei, self.pattern(j)))
            .fold(f64::INFINITY, f64::min))
    }

    /// Threshold a separation must reach for pattern `i` to count as well
    /// separated: `2 / (beta k) + beta^-1 ln(2 (k-1) k beta M^2)`.
    pub fn separation_threshold(&self) -> f64 {
        let k = self.len() as f64;
        let b = self.beta;
        let m2 = self.max_norm * self.max_norm;
        2.0 / (b * k) + (2.0 * (k - 1.0) * k * b * m2).ln() / b
    }

    pub fn well_separated(&self, i: usize) -> Result<bool> {
        Ok(self.separation(i)? >= self.separation_threshold())
    }

    /// Bounds on one-update retrieval near pattern `i`.
    ///
    /// `fixed_point_dist` is an upper bound on `‖e_i* - e_i‖` for the fixed
    /// point `e_i*` near `e_i`. When `None`, the smallest self-consistent
    /// radius `r = 2 (k-1) exp(-beta (Delta_i - 2 r M)) M` reached by
    /// iterating from `r = 0` is used (capped after 64 iterations).
    pub fn retrieval_error_bound(&self, xi: &[f64], i: usize, fixed_point_dist: Option<f64>) -> Result<RetrievalBound> {
        self.check_dim(xi)?;
        let delta = self.separation(i)?;
        let k = self.len() as f64;
        let m = self.max_norm;
        let beta = self.beta;
        let dist_xi = dist(xi, self.pattern(i));
        let r = match fixed_point_dist {
            Some(r) => r,
            None => {
                let mut r = 0.0f64;
                for _ in 0..64 {
                    let next = 2.0 * (k - 1.0) * (-beta * (delta - 2.0 * r * m)).exp() * m;
                    if !next.is_finite() || (next - r).abs() <= 1e-15 * next.max(1e-300) {
                        r = next;
                        break;
                    }
                    r = next;
                }
                r
            }
        };
        let radius = dist_xi.max(r);
        let decay = (-beta * (delta - 2.0 * radius * m)).exp();
        let error_bound = 2.0 * (k - 1.0) * decay * m;
        let jacobian_bound = 2.0 * beta * k * m * m * (k - 1.0) * decay;
        // ‖xi - e_i*‖ <= ‖xi - e_i‖ + ‖e_i - e_i*‖
        let one_update_bound = jacobian_bound * (dist_xi + r);
        Ok(RetrievalBound {
            separation: delta,
            fixed_point_dist: r,
            jacobian_bound,
            one_update_bound,
            error_bound,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalBound {
    pub separation: f64,
    /// Upper bound on `‖e_i* - e_i‖` that was used.
    pub fixed_point_dist: f64,
    /// Bound on the spectral norm of the mean-value Jacobian.
    pub jacobian_bound: f64,
    /// Bound on `‖f(xi) - e_i*‖`.
    pub one_update_bound: f64,
    /// Bound on `‖f(xi) - e_i‖`.
    pub error_bound: f64,
}

/// Principal branch `W_0` of the Lambert W function on `[-1/e, inf)`.
///
/// Halley iteration on `w e^w - x`. The starting point is `ln(1 + x)` for
/// `x >= 0` and the branch-point series `-1 + p - p^2/3 + 11 p^3 / 72` with
/// `p = sqrt(2 (e x + 1))` for negative `x`. At most 50 iterations.
pub fn lambert_w0(x: f64) -> Result<f64> {
    let branch = -1.0 / std::f64::consts::E;
    if x.is_nan() || x < branch {
        return Err(Error::Domain(format!("lambert_w0 is undefined for x = {x} < -1/e")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == branch {
        return Ok(-1.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = if x >= 0.0 {
        x.ln_1p()
    } else {
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    };
    for _ in 0..50 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        let next = w - step;
        if !next.is_finite() {
            break;
        }
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * next.abs().max(1e-300);
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

/// Storage-capacity bound for random patterns on the sphere of radius
/// `K sqrt(m - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapacityBound {
    pub beta: f64,
    pub radius_scale: f64,
    pub dim: usize,
    pub failure_prob: f64,
    /// `a = 2/(m-1) (1 + ln(2 beta K^2 p (m-1)))`
    pub a: f64,
    /// `b = 2 K^2 beta / 5`
    pub b: f64,
    /// `c = b / W_0(exp(a + ln b))`
    pub c: f64,
    /// Guaranteed number of storable patterns `sqrt(p) c^((m-1)/4)`.
    pub k_min: f64,
    /// Whether `c >= (2 / sqrt(p))^(4/(m-1))`, the theorem's precondition.
    pub feasible: bool,
}

impl CapacityBound {
    pub fn a_plus_ln_b(&self) -> f64 {
        self.a + self.b.ln()
    }
}

pub fn capacity_bound(beta: f64, radius_scale: f64, dim: usize, failure_prob: f64) -> Result<CapacityBound> {
    if !(failure_prob > 0.0 && failure_prob <= 1.0) {
        return Err(Error::Invalid(format!(
            "failure probability must be in (0, 1], got {failure_prob}"
        )));
    }
    if dim < 2 {
        return Err(Error::Invalid(format!("dimension must be at least 2, got {dim}")));
    }
    if !(beta > 0.0) || !(radius_scale > 0.0) {
        return Err(Error::Invalid("beta and K must be positive".into()));
    }
    let m1 = (dim - 1) as f64;
    let k2 = radius_scale * radius_scale;
    let a = 2.0 / m1 * (1.0 + (2.0 * beta * k2 * failure_prob * m1).ln());
    let b = 2.0 * k2 * beta / 5.0;
    let c = b / lambert_w0((a + b.ln()).exp())?;
    let k_min = failure_prob.sqrt() * c.powf(m1 / 4.0);
    let feasible = c >= (2.0 / failure_prob.sqrt()).powf(4.0 / m1);
    Ok(CapacityBound {
        beta,
        radius_scale,
        dim,
        failure_prob,
        a,
        b,
        c,
        k_min,
        feasible,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn orthonormal(k: usize, m: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn random_store(rng: &mut Rng, k: usize, m: usize, beta: f64) -> PatternStore {
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
        PatternStore::from_rows(&rows, beta).unwrap()
    }

    #[test]
    fn single_pattern_retrieves_itself() {
        let store = PatternStore::from_rows(&[vec![0.3, -1.2, 2.0]], 1.7).unwrap();
        let r = store.retrieve(&[10.0, 4.0, -3.0]).unwrap();
        assert_eq!(r.retrieved, vec![0.3, -1.2, 2.0]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let store = PatternStore::from_rows(&orthonormal(2, 3), 1.0).unwrap();
        assert!(matches!(
            store.retrieve(&[1.0, 2.0]),
            Err(Error::Dimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn tiny_beta_retrieves_mean() {
        let mut rng = Rng::new(5);
        let store = random_store(&mut rng, 6, 4, 1e-8);
        let xi: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let r = store.retrieve(&xi).unwrap();
        for j in 0..4 {
            let mean = (0..6).map(|i| store.pattern(i)[j]).sum::<f64>() / 6.0;
            assert!((r.retrieved[j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_pattern_has_max_weight() {
        let mut rng = Rng::new(9);
        let store = random_store(&mut rng, 8, 32, 2.0);
        for i in 0..8 {
            let xi: Vec<f64> = store.pattern(i).iter().map(|v| v + 0.05 * rng.normal()).collect();
            let dots: Vec<f64> = (0..8).map(|j| dot(store.pattern(j), &xi)).collect();
            let oracle = argmax_lowest(&dots);
            assert_eq!(store.retrieve(&xi).unwrap().argmax, oracle);
            assert_eq!(oracle, i);
        }
    }

    #[test]
    fn single_pattern_energy_at_pattern_is_zero() {
        let store = PatternStore::from_rows(&[vec![1.5, -0.5, 2.0]], 3.0).unwrap();
        assert!(store.energy(&[1.5, -0.5, 2.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn energy_rotation_invariant() {
        let mut rng = Rng::new(2);
        let store = random_store(&mut rng, 5, 2, 1.3);
        let xi = [0.4, -0.9];
        let th: f64 = 0.7;
        let rot = |v: &[f64]| vec![th.cos() * v[0] - th.sin() * v[1], th.sin() * v[0] + th.cos() * v[1]];
        let rows: Vec<Vec<f64>> = (0..5).map(|i| rot(store.pattern(i))).collect();
        let rotated = PatternStore::from_rows(&rows, 1.3).unwrap();
        let e0 = store.energy(&xi).unwrap();
        let e1 = rotated.energy(&rot(&xi)).unwrap();
        assert!((e0 - e1).abs() < 1e-9);
    }

    #[test]
    fn separation_examples() {
        let store = PatternStore::from_rows(&orthonormal(4, 4), 1.0).unwrap();
        for i in 0..4 {
            assert_eq!(store.separation(i).unwrap(), 1.0);
        }
        let dup = PatternStore::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert_eq!(dup.separation(0).unwrap(), 0.0);
        assert!(!dup.well_separated(0).unwrap());
        let single = PatternStore::from_rows(&[vec![1.0]], 1.0).unwrap();
        assert!(single.separation(0).is_err());
    }

    #[test]
    fn separation_matches_brute_force() {
        let mut rng = Rng::new(21);
        let store = random_store(&mut rng, 7, 5, 1.0);
        for i in 0..7 {
            let mut best = f64::INFINITY;
            for j in 0..7 {
                if j != i {
                    let mut s = 0.0;
                    for d in 0..5 {
                        s += store.pattern(i)[d] * store.pattern(i)[d] - store.pattern(i)[d] * store.pattern(j)[d];
                    }
                    best = best.min(s);
                }
            }
            assert!((store.separation(i).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn well_separated_thresholds() {
        let store = PatternStore::from_rows(&orthonormal(4, 4), 100.0).unwrap();
        // 2/400 + ln(2*3*4*100)/100 = 0.005 + 0.0778
        assert!((store.separation_threshold() - (0.005 + (2400.0f64).ln() / 100.0)).abs() < 1e-15);
        assert!(store.well_separated(0).unwrap());
        // at tiny beta the log term dominates and drives the threshold
        // negative for unit-norm patterns, so they remain well separated
        let cold = store.with_beta(1e-6).unwrap();
        let t = cold.separation_threshold();
        assert!((t - (2.0 / 4e-6 + (24e-6f64).ln() / 1e-6)).abs() < 1e-6 * t.abs());
        assert!(t < 0.0 && cold.well_separated(0).unwrap());
        // large patterns push the threshold past the separation
        let big: Vec<Vec<f64>> = orthonormal(4, 4)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * 1e3).collect())
            .collect();
        let big = PatternStore::from_rows(&big, 1e-6).unwrap();
        assert_eq!(big.separation(0).unwrap(), 1e6);
        assert!(big.separation_threshold() > 1e6);
        assert!(!big.well_separated(0).unwrap());
    }

    #[test]
    fn bound_underflows_for_huge_separation() {
        let store = PatternStore::from_rows(&[vec![1000.0, 0.0], vec![0.0, 0.0]], 1.0).unwrap();
        // Delta_0 = 1e6
        let b = store.retrieval_error_bound(&[1000.0, 0.0], 0, Some(0.0)).unwrap();
        assert_eq!(b.separation, 1e6);
        assert_eq!(b.error_bound, 0.0);
    }

    #[test]
    fn bound_formula_two_orthonormal_patterns() {
        let store = PatternStore::from_rows(&orthonormal(2, 2), 4.0).unwrap();
        let e0 = store.pattern(0).to_vec();
        let at = |d: f64| store.retrieval_error_bound(&e0, 0, Some(d)).unwrap().error_bound;
        for d in [0.0f64, 0.05, 0.1] {
            let want = 2.0 * (-4.0 * (1.0 - 2.0 * d)).exp();
            assert!((at(d) - want).abs() < 1e-15 * want.max(1.0));
        }
        assert!(at(0.1) > at(0.05));
    }

    #[test]
    fn lambert_examples() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert!((lambert_w0(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-14);
        let w = lambert_w0(3.573).unwrap();
        assert!((w - 1.1411).abs() < 5e-4);
        assert!((w * w.exp() - 3.573).abs() < 1e-10);
        assert!(lambert_w0(-0.5).is_err());
        let w = lambert_w0(-0.2).unwrap();
        assert!(w > -1.0 && (w * w.exp() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn capacity_reproduces_printed_constants() {
        let b = capacity_bound(1.0, 3.0, 20, 0.001).unwrap();
        assert!(b.a_plus_ln_b() > 1.27 && b.a_plus_ln_b() < 1.28);
        assert!((b.c - 3.1546).abs() < 1e-3);
        assert!((b.k_min - 7.4).abs() < 0.1, "{}", b.k_min);
        assert_eq!(b.b, 2.0 * 9.0 / 5.0);
        let b = capacity_bound(1.0, 1.0, 75, 0.001).unwrap();
        assert!(b.a_plus_ln_b() < -0.94 && b.a_plus_ln_b() > -0.95);
        assert!((b.c - 1.3718).abs() < 1e-3);
    }

    #[test]
    fn capacity_rejects_bad_arguments() {
        assert!(capacity_bound(1.0, 1.0, 1, 0.1).is_err());
        assert!(capacity_bound(1.0, 1.0, 10, 0.0).is_err());
        assert!(capacity_bound(0.0, 1.0, 10, 0.5).is_err());
    }
}

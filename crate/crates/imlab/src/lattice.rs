//! Exact integer arithmetic on the Fourier lattice of the 3-torus.
//!
//! Eigenvalues of `-Δ` on `(-π,π)³` are the integers `q²+l²+m²`; a shift of 1
//! turns them into eigenvalues of `1-Δ`. Everything here is integer valued
//! except the few constants of the cone inequalities, which are derived from
//! exact eigenvalues at the very end.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::ImError;

/// A wave vector `(q, l, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeVec {
    pub q: i64,
    pub l: i64,
    pub m: i64,
}

impl ModeVec {
    pub const ZERO: ModeVec = ModeVec { q: 0, l: 0, m: 0 };

    pub const fn new(q: i64, l: i64, m: i64) -> Self {
        ModeVec { q, l, m }
    }

    pub const fn norm_sq(self) -> i64 {
        self.q * self.q + self.l * self.l + self.m * self.m
    }

    pub const fn add(self, o: ModeVec) -> ModeVec {
        ModeVec::new(self.q + o.q, self.l + o.l, self.m + o.m)
    }

    pub const fn sub(self, o: ModeVec) -> ModeVec {
        ModeVec::new(self.q - o.q, self.l - o.l, self.m - o.m)
    }

    pub const fn neg(self) -> ModeVec {
        ModeVec::new(-self.q, -self.l, -self.m)
    }

    pub fn max_abs(self) -> i64 {
        self.q.abs().max(self.l.abs()).max(self.m.abs())
    }
}

/// All wave vectors sharing one eigenvalue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shell {
    /// Eigenvalue after the shift has been applied.
    pub lambda: u64,
    pub modes: Vec<ModeVec>,
}

impl Shell {
    pub fn multiplicity(&self) -> usize {
        self.modes.len()
    }
}

/// Eigenvalue cut `Λ` (in units of `|n|²`, never shifted), annulus half-width
/// `k` and the shift of the operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub lambda: u64,
    pub k: u64,
    pub shift: u8,
}

impl ProjectorSpec {
    pub fn new(lambda: u64, k: u64, shift: u8) -> Result<Self, ImError> {
        let spec = ProjectorSpec { lambda, k, shift };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ImError> {
        if self.shift > 1 {
            return Err(ImError::invalid("projector shift must be 0 or 1"));
        }
        if 2 * self.k > self.lambda + self.shift as u64 {
            return Err(ImError::invalid(format!(
                "annulus half-width k={} exceeds half the cut eigenvalue {}",
                self.k,
                self.lambda + self.shift as u64
            )));
        }
        Ok(())
    }

    /// Lower and upper ends of the annulus window in `|n|²`.
    pub fn window(&self) -> (u64, u64) {
        (self.lambda.saturating_sub(self.k), self.lambda + self.k)
    }

    pub fn in_p(&self, n2: u64) -> bool {
        n2 <= self.lambda
    }

    pub fn in_annulus(&self, n2: u64) -> bool {
        let (lo, hi) = self.window();
        n2 >= lo && n2 <= hi
    }
}

/// Legendre's three-square criterion: `n` is a sum of three squares unless it
/// has the form `4^a (8b + 7)`.
pub fn is_sum_of_three_squares(mut n: u64) -> bool {
    if n == 0 {
        return true;
    }
    while n.is_multiple_of(4) {
        n /= 4;
    }
    n % 8 != 7
}

fn isqrt(n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Visits every lattice point with `lo ≤ |n|² ≤ hi` in lexicographic order.
pub fn for_each_in_window(lo: u64, hi: u64, mut f: impl FnMut(ModeVec)) {
    let r = isqrt(hi) as i64;
    for q in -r..=r {
        let q2 = (q * q) as u64;
        if q2 > hi {
            continue;
        }
        let rl = isqrt(hi - q2) as i64;
        for l in -rl..=rl {
            let ql2 = q2 + (l * l) as u64;
            if ql2 > hi {
                continue;
            }
            let rem_hi = hi - ql2;
            let rem_lo = lo.saturating_sub(ql2);
            let mmax = isqrt(rem_hi) as i64;
            // Smallest |m| with m² ≥ rem_lo.
            let mut mmin = isqrt(rem_lo) as i64;
            if ((mmin * mmin) as u64) < rem_lo {
                mmin += 1;
            }
            if mmin > mmax {
                continue;
            }
            for m in -mmax..=-mmin {
                f(ModeVec::new(q, l, m));
            }
            for m in mmin.max(1)..=mmax {
                f(ModeVec::new(q, l, m));
            }
        }
    }
}

/// Shells with eigenvalue `≤ lambda_max`, one entry per integer eigenvalue
/// (empty shells included) so that gaps stay visible.
pub fn enumerate_shells(lambda_max: u64, shift: u8) -> Vec<Shell> {
    let s = shift as u64;
    if lambda_max < s {
        return Vec::new();
    }
    let top = lambda_max - s;
    let mut buckets: BTreeMap<u64, Vec<ModeVec>> = (0..=top).map(|n| (n, Vec::new())).collect();
    for_each_in_window(0, top, |n| {
        buckets.get_mut(&(n.norm_sq() as u64)).unwrap().push(n);
    });
    buckets
        .into_iter()
        .map(|(n2, modes)| Shell {
            lambda: n2 + s,
            modes,
        })
        .collect()
}

/// Multiplicity of every `|n|²` from 0 to `top`.
pub fn multiplicities(top: u64) -> Vec<u64> {
    let mut counts = vec![0u64; top as usize + 1];
    for_each_in_window(0, top, |n| counts[n.norm_sq() as usize] += 1);
    counts
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GapReport {
    /// Maximal runs `(start, length)` of integers that are not eigenvalues.
    pub gaps: Vec<(u64, u64)>,
    /// Longest run of missing integers.
    pub max_run: u64,
    /// Largest distance between consecutive occupied eigenvalues.
    pub max_spacing: u64,
}

pub fn spectral_gaps(lambda_max: u64) -> GapReport {
    let counts = multiplicities(lambda_max);
    let mut gaps = Vec::new();
    let mut run_start: Option<u64> = None;
    let mut last_occupied = 0u64;
    let mut max_spacing = 0u64;
    for (n, &c) in counts.iter().enumerate() {
        let n = n as u64;
        if c == 0 {
            run_start.get_or_insert(n);
        } else {
            if let Some(s) = run_start.take() {
                gaps.push((s, n - s));
            }
            max_spacing = max_spacing.max(n - last_occupied);
            last_occupied = n;
        }
    }
    if let Some(s) = run_start {
        gaps.push((s, lambda_max + 1 - s));
    }
    let max_run = gaps.iter().map(|g| g.1).max().unwrap_or(0);
    GapReport {
        gaps,
        max_run,
        max_spacing,
    }
}

/// Modes with `Λ-k ≤ |n|² ≤ Λ+k`.
pub fn annulus(spec: &ProjectorSpec) -> Vec<ModeVec> {
    let (lo, hi) = spec.window();
    let mut out = Vec::new();
    for_each_in_window(lo, hi, |n| out.push(n));
    out
}

/// Nonzero lattice vectors of the closed ball of radius `r`.
pub fn ball(r: u64) -> Vec<ModeVec> {
    let mut out = Vec::new();
    for_each_in_window(1, r * r, |n| out.push(n));
    out
}

/// `true` when no two distinct annulus modes lie within distance `r`.
pub fn check_sa_condition(lambda: u64, k: u64, r: u64) -> bool {
    let lo = lambda.saturating_sub(k) as i64;
    let hi = (lambda + k) as i64;
    let shifts = ball(r);
    let mut ok = true;
    for_each_in_window(lo as u64, hi as u64, |n| {
        if !ok {
            return;
        }
        for d in &shifts {
            let t = n.add(*d).norm_sq();
            if t >= lo && t <= hi {
                ok = false;
                return;
            }
        }
    });
    ok
}

/// Squared distance of the closest pair of distinct annulus modes, or `None`
/// when the annulus has fewer than two modes.
pub fn min_pair_distance_sq(lambda: u64, k: u64) -> Option<u64> {
    let lo = lambda.saturating_sub(k) as i64;
    let hi = (lambda + k) as i64;
    let modes = {
        let mut v = Vec::new();
        for_each_in_window(lo as u64, hi as u64, |n| v.push(n));
        v
    };
    if modes.len() < 2 {
        return None;
    }
    let diameter_sq = 4 * hi as u64;
    for t in 1..=diameter_sq {
        if !is_sum_of_three_squares(t) {
            continue;
        }
        let mut found = false;
        for_each_in_window(t, t, |d| {
            if found {
                return;
            }
            for n in &modes {
                let s = n.add(d).norm_sq();
                if s >= lo && s <= hi {
                    found = true;
                    return;
                }
            }
        });
        if found {
            return Some(t);
        }
    }
    None
}

/// Occupied eigenvalues (unshifted) bracketing the cut at `Λ`: the largest
/// occupied `|n|² ≤ Λ` and the smallest occupied `|n|² > Λ`.
pub fn cut_at(lambda: u64) -> (u64, u64) {
    let mut below = lambda;
    while !is_sum_of_three_squares(below) {
        below -= 1;
    }
    let mut above = lambda + 1;
    while !is_sum_of_three_squares(above) {
        above += 1;
    }
    (below, above)
}

/// Width of the spectral gap at the cut `Λ`.
pub fn gap_at(lambda: u64) -> u64 {
    let (a, b) = cut_at(lambda);
    b - a
}

/// All `Λ` in the inclusive range passing [`check_sa_condition`], optionally
/// keeping only cuts whose gap is at least `min_gap`.
pub fn search_admissible(k: u64, r: u64, range: (u64, u64), min_gap: Option<u64>) -> Vec<u64> {
    (range.0..=range.1)
        .filter(|&lam| min_gap.is_none_or(|g| gap_at(lam) >= g))
        .filter(|&lam| check_sa_condition(lam, k, r))
        .collect()
}

/// Outcome of the spectral-gap test at an occupied cut.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SgReport {
    pub passes: bool,
    pub lambda_n: f64,
    pub lambda_n1: f64,
    pub lhs: f64,
    pub alpha: f64,
    pub mu: f64,
}

/// `(λ_{N+1}^{1+γ} − λ_N^{1+γ}) / (λ_{N+1}^γ + λ_N^γ)`.
pub fn gap_lhs(lambda_n: f64, lambda_n1: f64, gamma: f64) -> f64 {
    (lambda_n1.powf(1.0 + gamma) - lambda_n.powf(1.0 + gamma))
        / (lambda_n1.powf(gamma) + lambda_n.powf(gamma))
}

/// Base exponent `α` separating the two linear blocks.
pub fn gap_alpha(lambda_n: f64, lambda_n1: f64, gamma: f64) -> f64 {
    let (a, b) = (lambda_n.powf(gamma), lambda_n1.powf(gamma));
    (lambda_n.powf(1.0 + gamma) * b + lambda_n1.powf(1.0 + gamma) * a) / (a + b)
}

pub fn sg_constants(lambda_n: f64, lambda_n1: f64, l: f64, gamma: f64) -> SgReport {
    let lhs = gap_lhs(lambda_n, lambda_n1, gamma);
    SgReport {
        passes: lhs > l,
        lambda_n,
        lambda_n1,
        lhs,
        alpha: gap_alpha(lambda_n, lambda_n1, gamma),
        mu: lhs - l,
    }
}

/// Spectral-gap condition at an occupied cut `Λ` (unshifted units).
pub fn check_sg_condition(lambda: u64, l: f64, gamma: f64, shift: u8) -> Result<SgReport, ImError> {
    if !is_sum_of_three_squares(lambda) {
        return Err(ImError::invalid(format!(
            "Λ={lambda} is not an eigenvalue; there is no cut there"
        )));
    }
    let (_, above) = cut_at(lambda);
    let s = shift as f64;
    Ok(sg_constants(lambda as f64 + s, above as f64 + s, l, gamma))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantCheck {
    pub name: &'static str,
    pub slack: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub passes: bool,
    pub lambda_n: f64,
    pub lambda_n1: f64,
    pub conditions: Vec<ConstantCheck>,
    /// Coefficient of `‖v‖²` in the final cone inequality.
    pub mu: f64,
    pub alpha: f64,
}

/// Evaluates the four constant conditions of the spatial-averaging cone
/// theorem. `λ_N` is the occupied eigenvalue at or below `Λ` (shifted).
pub fn check_theorem_constants(
    lambda: u64,
    k: u64,
    theta: f64,
    delta: f64,
    l: f64,
    gamma: f64,
    shift: u8,
) -> TheoremReport {
    let (below, above) = cut_at(lambda);
    let s = shift as f64;
    let (ln, ln1) = (below as f64 + s, above as f64 + s);
    let kf = k as f64;
    let ratio = if ln > kf {
        kf / (ln - kf)
    } else {
        f64::INFINITY
    };
    let coupling = if gamma == 0.0 {
        0.0
    } else {
        gamma * 2f64.powf(gamma + 1.0) * l * ratio
    };
    let c1 = theta / 8.0 - delta - coupling;
    let c2 = 0.5 * kf - 8.0 * l * l / theta - 2.0 * l;
    let c3 = ln - l;
    let c4 = ln / 2.0 - kf;
    let conditions = vec![
        ConstantCheck {
            name: "averaging_margin",
            slack: c1,
            passes: c1 > 0.0,
        },
        ConstantCheck {
            name: "annulus_width",
            slack: c2,
            passes: c2 >= 0.0,
        },
        ConstantCheck {
            name: "cut_above_lipschitz",
            slack: c3,
            passes: c3 > 0.0,
        },
        ConstantCheck {
            name: "half_width_bound",
            slack: c4,
            passes: c4 >= 0.0,
        },
    ];
    let mu_bar = gap_lhs(ln, ln1, gamma);
    TheoremReport {
        passes: conditions.iter().all(|c| c.passes),
        lambda_n: ln,
        lambda_n1: ln1,
        conditions,
        mu: mu_bar / 4.0 - delta - coupling,
        alpha: gap_alpha(ln, ln1, gamma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_pairs_ok(lambda: u64, k: u64, r: u64) -> bool {
        let modes = annulus(&ProjectorSpec {
            lambda,
            k,
            shift: 0,
        });
        for (i, a) in modes.iter().enumerate() {
            for b in &modes[i + 1..] {
                if a.sub(*b).norm_sq() as u64 <= r * r {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn small_shells() {
        let s = enumerate_shells(1, 0);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].lambda, s[0].multiplicity()), (0, 1));
        assert_eq!((s[1].lambda, s[1].multiplicity()), (1, 6));
        assert_eq!(enumerate_shells(2, 0)[2].multiplicity(), 12);
        assert_eq!(enumerate_shells(7, 0)[7].multiplicity(), 0);
        let shifted = enumerate_shells(3, 1);
        assert_eq!(shifted.first().unwrap().lambda, 1);
        assert_eq!(shifted[1].multiplicity(), 6);
    }

    #[test]
    fn multiplicity_matches_cube_count() {
        let mut counts = vec![0usize; 41];
        for q in -7i64..=7 {
            for l in -7i64..=7 {
                for m in -7i64..=7 {
                    let n = q * q + l * l + m * m;
                    if n <= 40 {
                        counts[n as usize] += 1;
                    }
                }
            }
        }
        for s in enumerate_shells(40, 0) {
            assert_eq!(
                s.multiplicity(),
                counts[s.lambda as usize],
                "λ={}",
                s.lambda
            );
        }
    }

    #[test]
    fn legendre_agrees_with_enumeration() {
        for s in enumerate_shells(3000, 0) {
            assert_eq!(
                s.multiplicity() == 0,
                !is_sum_of_three_squares(s.lambda),
                "λ={}",
                s.lambda
            );
        }
    }

    #[test]
    fn gap_examples() {
        let g30 = spectral_gaps(30);
        assert!(g30.gaps.contains(&(7, 1)));
        let g16 = spectral_gaps(16);
        assert!(g16.gaps.contains(&(15, 1)));
        assert!(spectral_gaps(100).max_spacing <= 3);
        // 111 = 8·13+7 and 112 = 16·7 form the first run of two.
        assert!(spectral_gaps(200).gaps.contains(&(111, 2)));
    }

    #[test]
    fn annulus_examples() {
        assert_eq!(
            annulus(&ProjectorSpec {
                lambda: 1,
                k: 1,
                shift: 0
            })
            .len(),
            19
        );
        assert!(annulus(&ProjectorSpec {
            lambda: 7,
            k: 0,
            shift: 0
        })
        .is_empty());
        assert_eq!(
            annulus(&ProjectorSpec {
                lambda: 4,
                k: 0,
                shift: 0
            })
            .len(),
            6
        );
    }

    #[test]
    fn sa_examples() {
        assert!(!check_sa_condition(1, 1, 1));
        // single shell {(±2,0,0),…}: closest distinct pair is at distance 2√2.
        assert!(check_sa_condition(4, 0, 2));
        assert!(!check_sa_condition(4, 0, 3));
        let found = search_admissible(1, 1, (1, 50), None);
        assert_eq!(
            found,
            vec![7, 12, 15, 22, 23, 24, 28, 31, 39, 43, 44, 47, 48]
        );
        for lam in found {
            assert!(brute_pairs_ok(lam, 1, 1));
        }
    }

    #[test]
    fn k_zero_is_single_shell_distance() {
        for lam in 1..60u64 {
            let d = min_pair_distance_sq(lam, 0);
            for r in 1..4u64 {
                let expect = d.is_none_or(|d| d > r * r);
                assert_eq!(check_sa_condition(lam, 0, r), expect, "Λ={lam} r={r}");
            }
        }
    }

    #[test]
    fn smallest_admissible_regressions() {
        // Frozen from the brute-force oracle in `brute_pairs_ok`.
        assert_eq!(search_admissible(1, 2, (1, 200), None).first(), Some(&79));
        assert_eq!(search_admissible(2, 1, (1, 200), None).first(), Some(&78));
        assert!(brute_pairs_ok(79, 1, 2));
        assert!(brute_pairs_ok(78, 2, 1));
        assert!(!brute_pairs_ok(77, 2, 1));
    }

    #[test]
    fn large_radius_admissible_values_exist_beyond_ten_thousand() {
        // (k,r)=(2,3): the first admissible cut is 21886 and nothing below
        // 10^4 passes. The full scan of [1, 10^4] is in the acceptance suite.
        assert!(check_sa_condition(21886, 2, 3));
        assert!(!check_sa_condition(9999, 2, 3));
    }

    #[test]
    fn sg_examples() {
        // γ=1: (9² - 8²)/(9 + 8) = 17/17; γ=2: (9³ - 8³)/(9² + 8²) = 217/145.
        let r = sg_constants(8.0, 9.0, 0.0, 1.0);
        assert!((r.lhs - 1.0).abs() < 1e-13);
        assert!((sg_constants(8.0, 9.0, 0.0, 2.0).lhs - 217.0 / 145.0).abs() < 1e-13);
        assert!(r.passes);
        let r0 = check_sg_condition(8, 0.7, 0.0, 0).unwrap();
        assert!((r0.lhs - 0.5).abs() < 1e-15);
        assert!(!r0.passes);
        assert!(check_sg_condition(7, 0.0, 0.0, 0).is_err());
        // α for γ=1, λ_N=8, λ_{N+1}=9: (64·9 + 81·8)/17.
        assert!((r.alpha - (64.0 * 9.0 + 81.0 * 8.0) / 17.0).abs() < 1e-12);
    }

    #[test]
    fn sg_gamma_zero_is_half_gap() {
        let counts = multiplicities(400);
        let occupied: Vec<u64> = (0..=400).filter(|&n| counts[n as usize] > 0).collect();
        for w in occupied.windows(2) {
            for &l in &[0.1, 0.5, 1.0, 1.5] {
                let r = check_sg_condition(w[0], l, 0.0, 0).unwrap();
                assert_eq!(r.passes, (w[1] - w[0]) as f64 > 2.0 * l);
            }
        }
    }

    #[test]
    fn theorem_constant_examples() {
        let fail = check_theorem_constants(22, 1, 2.0, 0.25, 0.0, 0.0, 0);
        assert!(!fail.conditions[0].passes);
        let lin = check_theorem_constants(40, 3, 1.0, 0.0, 0.0, 1.0, 0);
        assert!(lin.passes);
    }

    proptest! {
        #[test]
        fn shells_invariant_under_axis_permutation(top in 0u64..120) {
            for s in enumerate_shells(top, 0) {
                let mut a: Vec<ModeVec> = s.modes.clone();
                let mut b: Vec<ModeVec> = s.modes.iter().map(|n| ModeVec::new(n.m, n.q, n.l)).collect();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn sa_check_matches_brute_force(lam in 1u64..300, k in 1u64..3, r in 1u64..4) {
            prop_assert_eq!(check_sa_condition(lam, k, r), brute_pairs_ok(lam, k, r));
        }

        #[test]
        fn cut_brackets(lam in 0u64..5000) {
            let (a, b) = cut_at(lam);
            prop_assert!(a <= lam && lam < b);
            prop_assert!(is_sum_of_three_squares(a) && is_sum_of_three_squares(b));
            prop_assert!(b - a <= 3);
        }
    }
}

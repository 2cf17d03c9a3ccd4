use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-attempt success fractions shipped with the crate.
pub const SHIPPED_FRACTIONS: &str = include_str!("../../data/attempt_fractions.csv");

pub const MAX_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite value at point {0}")]
    NonFinite(usize),
}

/// `S(x) = a * exp(-b x) + c`, fitted by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub rmse: T,
    /// One standard error each for a, b, c.
    pub uncertainties: [T; 3],
    /// False for flat data, where `b` is reported as zero.
    pub b_identifiable: bool,
    pub iterations: usize,
}

impl<T: Float> DecayFit<T> {
    pub fn eval(&self, x: T) -> T {
        model(self.a, self.b, self.c, x)
    }

    /// Last attempt of the steep regime: the smallest integer x >= 1 with
    /// `a exp(-b x) < c / 10`. `None` when the decay never drops that far.
    pub fn steep_regime_end(&self) -> Option<u32> {
        let tenth = self.c / T::from(10).expect("small constant");
        (1..=10_000u32).find(|&x| self.a * (-self.b * T::from(x).expect("u32 fits")).exp() < tenth)
    }
}

#[derive(Deserialize)]
struct FractionRow {
    attempt: u32,
    fraction: f64,
}

/// Reads `attempt,fraction` rows; `#` lines are comments.
pub fn parse_fractions(text: &str) -> Result<Vec<(u32, f64)>, csv::Error> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .deserialize::<FractionRow>()
        .map(|r| r.map(|r| (r.attempt, r.fraction)))
        .collect()
}

/// Fraction rows as percent points ready for [`fit_decay`].
pub fn as_percent_points(rows: &[(u32, f64)]) -> Vec<(f64, f64)> {
    rows.iter().map(|&(x, f)| (x as f64, 100.0 * f)).collect()
}

/// Attempt 0, the steep decay, and the plateau.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regimes {
    pub zero_shot: u32,
    /// Inclusive attempt range of the steep regime.
    pub steep: Option<(u32, u32)>,
    pub plateau_from: Option<u32>,
}

impl<T: Float> DecayFit<T> {
    pub fn regimes(&self) -> Regimes {
        let end = self.steep_regime_end();
        Regimes {
            zero_shot: 0,
            steep: end.map(|e| (1, e)),
            plateau_from: end.map(|e| e + 1),
        }
    }
}

fn model<T: Float>(a: T, b: T, c: T, x: T) -> T {
    a * (-b * x).exp() + c
}

fn sse<T: Float>(p: [T; 3], pts: &[(T, T)]) -> T {
    pts.iter().fold(T::zero(), |acc, &(x, y)| {
        let r = y - model(p[0], p[1], p[2], x);
        acc + r * r
    })
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3<T: Float>(mut m: [[T; 3]; 3], mut v: [T; 3]) -> Option<[T; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).expect("finite"))?;
        if m[pivot][col].abs() <= T::epsilon() * T::epsilon() {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] = m[row][k] - f * m[col][k];
            }
            v[row] = v[row] - f * v[col];
        }
    }
    let mut out = [T::zero(); 3];
    for row in (0..3).rev() {
        let mut s = v[row];
        for k in row + 1..3 {
            s = s - m[row][k] * out[k];
        }
        out[row] = s / m[row][row];
    }
    Some(out)
}

fn normal_equations<T: Float>(p: [T; 3], pts: &[(T, T)]) -> ([[T; 3]; 3], [T; 3]) {
    let mut jtj = [[T::zero(); 3]; 3];
    let mut jtr = [T::zero(); 3];
    for &(x, y) in pts {
        let e = (-p[1] * x).exp();
        let j = [e, -p[0] * x * e, T::one()];
        let r = y - model(p[0], p[1], p[2], x);
        for i in 0..3 {
            jtr[i] = jtr[i] + j[i] * r;
            for k in 0..3 {
                jtj[i][k] = jtj[i][k] + j[i] * j[k];
            }
        }
    }
    (jtj, jtr)
}

/// Levenberg-Marquardt from `a = max - min`, `b = 0.5`, `c = min`. Stops
/// when an accepted step changes the RMSE by less than 1e-10 relative, or
/// after 200 iterations. `c` is kept non-negative.
pub fn fit_decay<T: Float>(points: &[(T, T)]) -> Result<DecayFit<T>, FitError> {
    if points.len() < 4 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    if let Some(i) = points.iter().position(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FitError::NonFinite(i));
    }
    let n = T::from(points.len()).expect("usize fits");
    let (min, max) = points
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let scale = max.abs().max(min.abs()).max(T::one());
    if max - min <= T::epsilon() * scale {
        let mean = points.iter().fold(T::zero(), |s, &(_, y)| s + y) / n;
        return Ok(DecayFit {
            a: T::zero(),
            b: T::zero(),
            c: mean,
            rmse: (sse([T::zero(), T::zero(), mean], points) / n).sqrt(),
            uncertainties: [T::zero(); 3],
            b_identifiable: false,
            iterations: 0,
        });
    }

    let half = T::from(0.5).expect("constant");
    let ten = T::from(10).expect("constant");
    let rel_tol = T::from(REL_TOL).expect("constant");
    let mut p = [max - min, half, min.max(T::zero())];
    let mut err = sse(p, points);
    let mut lambda = T::from(1e-3).expect("constant");
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && err > T::zero() {
        iterations += 1;
        let (jtj, jtr) = normal_equations(p, points);
        let mut accepted = false;
        while lambda < T::from(1e16).expect("constant") {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] = row[i] + lambda * jtj[i][i].max(T::epsilon());
            }
            let Some(delta) = solve3(damped, jtr) else {
                lambda = lambda * ten;
                continue;
            };
            let trial = [p[0] + delta[0], p[1] + delta[1], (p[2] + delta[2]).max(T::zero())];
            let trial_err = sse(trial, points);
            if trial_err.is_finite() && trial_err < err {
                let (old_rmse, new_rmse) = ((err / n).sqrt(), (trial_err / n).sqrt());
                p = trial;
                err = trial_err;
                lambda = (lambda / ten).max(T::from(1e-12).expect("constant"));
                accepted = true;
                if (old_rmse - new_rmse) <= rel_tol * old_rmse {
                    iterations = MAX_ITERATIONS.max(iterations);
                }
                break;
            }
            lambda = lambda * ten;
        }
        if !accepted {
            break;
        }
    }

    let dof = n - T::from(3).expect("constant");
    let s2 = if dof > T::zero() { err / dof } else { T::zero() };
    let (jtj, _) = normal_equations(p, points);
    let column = |i: usize| {
        let mut e = [T::zero(); 3];
        e[i] = T::one();
        solve3(jtj, e).map_or(T::nan(), |col| (col[i] * s2).abs().sqrt())
    };
    Ok(DecayFit {
        a: p[0],
        b: p[1],
        c: p[2],
        rmse: (err / n).sqrt(),
        uncertainties: [column(0), column(1), column(2)],
        b_identifiable: true,
        iterations: iterations.min(MAX_ITERATIONS),
    })
}

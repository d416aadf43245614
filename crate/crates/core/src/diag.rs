//! Run diagnostics: variance accounting, convergence-speed estimates,
//! selection-quality studies, and lossless record export.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{axpy, dot, l2_norm, solve_linear, squared_norm};
use crate::sampling::{
    expected_squared_norm, normalize_priorities, optimal_distribution, Distribution, PriorityVector,
};

/// One logged training step. Optional fields stay empty when the run does
/// not produce them, and survive CSV and JSON round trips unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub step: u64,
    pub sampler: String,
    pub loss: f64,
    pub variance_estimate: Option<f64>,
    pub tv_surrogate_optimal: Option<f64>,
    pub tv_uniform_optimal: Option<f64>,
    pub episode_return: Option<f64>,
}

pub fn write_csv(records: &[DiagRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in records {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<DiagRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

pub fn write_json(records: &[DiagRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), records)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Vec<DiagRecord>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Second moment of the bias-corrected single-draw gradient estimate under
/// sampling distribution `p`: (1/n^2) sum g_i^2 / p_i.
pub fn variance_term(p: &Distribution, grad_norms: &[f64]) -> Result<f64> {
    expected_squared_norm(p, grad_norms)
}

/// Worked two-sample instance: gradient norms (10, 5) but raw TD errors
/// (1, 4), so TD-proportional sampling concentrates on the sample with the
/// smaller gradient and loses to uniform, while gradient-norm-proportional
/// sampling is optimal.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceDemo {
    pub grad_norms: Vec<f64>,
    pub td_errors: Vec<f64>,
    pub uniform: f64,
    pub optimal: f64,
    pub td: f64,
}

pub fn variance_demo() -> Result<VarianceDemo> {
    let grad_norms = vec![10.0, 5.0];
    let td_errors = vec![1.0, 4.0];
    let uniform = variance_term(&Distribution::uniform(2), &grad_norms)?;
    let optimal = variance_term(&optimal_distribution(&grad_norms)?, &grad_norms)?;
    let td_dist = normalize_priorities(&PriorityVector::new(td_errors.clone(), 1.0, 0.0)?)?;
    let td = variance_term(&td_dist, &grad_norms)?;
    Ok(VarianceDemo {
        grad_norms,
        td_errors,
        uniform,
        optimal,
        td,
    })
}

/// Linear least squares with a closed-form optimum: per-sample loss
/// (1/2)(a_i . theta - b_i)^2. The ideal testbed for sampling-variance
/// claims because every per-sample gradient is cheap and exact.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl LeastSquares {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<LeastSquares> {
        if rows.len() != targets.len() {
            return Err(Error::LengthMismatch {
                context: "rows vs targets",
                left: rows.len(),
                right: targets.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData {
                requested: 1,
                available: 0,
            });
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                context: "least-squares rows",
                expected: dim,
                got: rows.iter().map(|r| r.len()).find(|&l| l != dim).unwrap(),
            });
        }
        Ok(LeastSquares { rows, targets })
    }

    /// Random well-conditioned instance: unit-ish rows plus distinct
    /// targets. Needs at least `dim` samples to pin down the optimum.
    pub fn random<R: Rng>(n: usize, dim: usize, rng: &mut R) -> LeastSquares {
        assert!(n >= dim, "underdetermined least squares");
        let rows = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let targets = (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        LeastSquares { rows, targets }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Minimizer via the normal equations A^T A theta = A^T b.
    pub fn optimum(&self) -> Vec<f64> {
        let d = self.dim();
        let mut ata = vec![vec![0.0; d]; d];
        let mut atb = vec![0.0; d];
        for (row, &b) in self.rows.iter().zip(&self.targets) {
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * b;
            }
        }
        solve_linear(&ata, &atb)
    }

    pub fn residual(&self, theta: &[f64], i: usize) -> f64 {
        dot(&self.rows[i], theta) - self.targets[i]
    }

    /// Per-sample gradient: residual * a_i.
    pub fn gradient(&self, theta: &[f64], i: usize) -> Vec<f64> {
        let r = self.residual(theta, i);
        self.rows[i].iter().map(|&a| r * a).collect()
    }

    pub fn gradient_norms(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.residual(theta, i).abs() * l2_norm(&self.rows[i]))
            .collect()
    }

    pub fn mean_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for i in 0..self.len() {
            axpy(&mut g, 1.0 / self.len() as f64, &self.gradient(theta, i));
        }
        g
    }
}

/// Expected one-step decrease of |theta - theta*|^2 under a single
/// bias-corrected draw from `p` with step size `eta`:
/// 2 eta (theta - theta*) . E[G] - eta^2 E[G . G].
pub fn convergence_speed(
    problem: &LeastSquares,
    theta: &[f64],
    p: &Distribution,
    eta: f64,
) -> Result<f64> {
    let star = problem.optimum();
    let gap: Vec<f64> = theta.iter().zip(&star).map(|(t, s)| t - s).collect();
    let mean = problem.mean_gradient(theta);
    let second = expected_squared_norm(p, &problem.gradient_norms(theta))?;
    Ok(2.0 * eta * dot(&gap, &mean) - eta * eta * second)
}

/// Monte Carlo counterpart of [`convergence_speed`]: draw single samples
/// from `p`, apply the bias-corrected step, and average the realized
/// decrease of the squared distance to the optimum.
pub fn convergence_speed_mc<R: Rng>(
    problem: &LeastSquares,
    theta: &[f64],
    p: &Distribution,
    eta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let star = problem.optimum();
    let gap: Vec<f64> = theta.iter().zip(&star).map(|(t, s)| t - s).collect();
    let before = squared_norm(&gap);
    let n = problem.len() as f64;
    let mut total = 0.0;
    for _ in 0..trials {
        let i = p.index_for(rng.gen());
        let pi = p.get(i);
        if pi <= 0.0 {
            return Err(Error::ZeroProbability(i));
        }
        let w = 1.0 / (n * pi);
        let g = problem.gradient(theta, i);
        let after: Vec<f64> = gap.iter().zip(&g).map(|(x, gi)| x - eta * w * gi).collect();
        total += before - squared_norm(&after);
    }
    Ok(total / trials as f64)
}

/// Fixed-range histogram; samples clamp to the edge bins so totals are
/// always conserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Histogram {
        assert!(bins > 0 && lo < hi);
        Histogram {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let t = (x - self.lo) / (self.hi - self.lo) * bins as f64;
        let idx = (t.floor() as i64).clamp(0, bins as i64 - 1) as usize;
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// One-sided Mann-Whitney rank-sum p-value for the alternative "values in
/// `a` tend to be smaller than values in `b`". Uses midranks for ties, a
/// tie-corrected normal approximation, and continuity correction. Returns
/// 0.5 when every observation is tied.
pub fn rank_sum_less(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut r1 = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // Midrank for the tied block [i, j).
        let rank = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        for item in &all[i..j] {
            if item.1 {
                r1 += rank;
            }
        }
        i = j;
    }
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nf = n as f64;
    let var = n1 * n2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return 0.5;
    }
    let z = (u1 - mean + 0.5) / var.sqrt();
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Selection-quality summary over one slice of a run.
#[derive(Clone, Debug, Serialize)]
pub struct TvWindow {
    pub label: String,
    /// Distances of surrogate-proportional selection from optimal.
    pub surrogate: Vec<f64>,
    /// Distances of uniform selection from optimal.
    pub uniform: Vec<f64>,
    pub surrogate_hist: Histogram,
    pub uniform_hist: Histogram,
    pub surrogate_median: f64,
    pub uniform_median: f64,
    /// One-sided rank-sum p-value: surrogate distances smaller.
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TvStudy {
    pub windows: Vec<TvWindow>,
}

/// Compare surrogate-guided selection against uniform selection, both
/// measured by total-variation distance from the optimal distribution,
/// over the whole run and over its first and last tenths.
pub fn tv_study(records: &[DiagRecord], bins: usize) -> Result<TvStudy> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| match (r.tv_surrogate_optimal, r.tv_uniform_optimal) {
            (Some(s), Some(u)) => Some((s, u)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientData {
            requested: 1,
            available: 0,
        });
    }
    let tenth = (pairs.len() / 10).max(1);
    let slices: [(&str, &[(f64, f64)]); 3] = [
        ("all", &pairs),
        ("first-tenth", &pairs[..tenth]),
        ("last-tenth", &pairs[pairs.len() - tenth..]),
    ];
    let windows = slices
        .iter()
        .map(|(label, slice)| {
            let surrogate: Vec<f64> = slice.iter().map(|&(s, _)| s).collect();
            let uniform: Vec<f64> = slice.iter().map(|&(_, u)| u).collect();
            let mut surrogate_hist = Histogram::new(0.0, 2.0, bins);
            let mut uniform_hist = Histogram::new(0.0, 2.0, bins);
            for &v in &surrogate {
                surrogate_hist.add(v);
            }
            for &v in &uniform {
                uniform_hist.add(v);
            }
            TvWindow {
                label: label.to_string(),
                p_value: rank_sum_less(&surrogate, &uniform),
                surrogate_median: median(&surrogate),
                uniform_median: median(&uniform),
                surrogate,
                uniform,
                surrogate_hist,
                uniform_hist,
            }
        })
        .collect();
    Ok(TvStudy { windows })
}

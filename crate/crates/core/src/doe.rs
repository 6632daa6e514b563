//! Space-filling experimental designs: Latin hypercubes and a maximin
//! improvement by random restarts plus element-swap hill climbing.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned input domain of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let names = (1..=lower.len()).map(|j| format!("x{j}")).collect();
        Self::with_names(names, lower, upper)
    }

    pub fn with_names(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::invalid("input box needs at least one dimension"));
        }
        if lower.len() != upper.len() || names.len() != lower.len() {
            return Err(Error::invalid("input box bounds have mismatched lengths"));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "input box dimension {} has lower {lo} not below upper {hi}",
                    j + 1
                )));
            }
        }
        Ok(Self {
            names,
            lower,
            upper,
        })
    }

    /// Unit hypercube `[0,1]^d`.
    pub fn unit(dims: usize) -> Self {
        Self::new(vec![0.0; dims], vec![1.0; dims]).expect("dims >= 1")
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Maps a box point to `[0,1]^d`.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }
}

/// `n x d` matrix of design points, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub points: DMatrix<f64>,
    /// True when the points live in `[0,1]^d` rather than box coordinates.
    pub normalized: bool,
}

impl DesignMatrix {
    pub fn from_rows(rows: &[Vec<f64>], normalized: bool) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("design rows have unequal lengths"));
        }
        let points = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(Self { points, normalized })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dims(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    /// Smallest Euclidean distance between two distinct rows (infinite for n < 2).
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.n();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for k in (i + 1)..n {
                best = best.min(sq_dist(&self.points, i, k));
            }
        }
        best.sqrt()
    }
}

fn sq_dist(p: &DMatrix<f64>, i: usize, k: usize) -> f64 {
    (0..p.ncols()).map(|c| (p[(i, c)] - p[(k, c)]).powi(2)).sum()
}

fn check_size(n: usize, d: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("design size n = {n}, need n >= 2")));
    }
    if d < 1 {
        return Err(Error::invalid("design dimension d must be >= 1"));
    }
    Ok(())
}

/// Seed of the `r`-th restart of [`maximin_lhd`]. Restart 0 uses `seed` itself,
/// so a single-restart search starts from `lhd_sample(n, d, seed)`.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    if restart == 0 {
        return seed;
    }
    // splitmix64 finalizer
    let mut z = seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lhd_with_rng(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut points = DMatrix::zeros(n, d);
    let mut strata: Vec<usize> = (0..n).collect();
    for c in 0..d {
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            strata.swap(i, j);
        }
        for (i, &s) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            points[(i, c)] = (s as f64 + u) / n as f64;
        }
    }
    points
}

/// Random Latin hypercube in `[0,1]^d`: every column has exactly one point in
/// each stratum `[(i-1)/n, i/n)`, placed uniformly inside it.
pub fn lhd_sample(n: usize, d: usize, seed: u64) -> Result<DesignMatrix> {
    check_size(n, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DesignMatrix {
        points: lhd_with_rng(n, d, &mut rng),
        normalized: true,
    })
}

/// Maximin Latin hypercube.
///
/// Each restart draws a fresh LHD and hill-climbs it by swapping single column
/// entries between a row of the closest pair and any other row, accepting a
/// swap only when the minimum pairwise distance strictly grows. The best design
/// over all restarts is returned; ties keep the earliest.
pub fn maximin_lhd(n: usize, d: usize, seed: u64, restarts: usize) -> Result<DesignMatrix> {
    check_size(n, d)?;
    if restarts < 1 {
        return Err(Error::invalid("maximin search needs at least one restart"));
    }
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, r));
        let mut points = lhd_with_rng(n, d, &mut rng);
        let score = improve_by_swaps(&mut points);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, points));
        }
    }
    let (_, points) = best.expect("restarts >= 1");
    Ok(DesignMatrix {
        points,
        normalized: true,
    })
}

/// Returns the final minimum squared distance.
fn improve_by_swaps(p: &mut DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let d = p.ncols();
    let mut dist = DMatrix::from_fn(n, n, |i, k| if i == k { f64::INFINITY } else { sq_dist(p, i, k) });

    let min_pair = |dist: &DMatrix<f64>| {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            for k in (i + 1)..n {
                if dist[(i, k)] < best.0 {
                    best = (dist[(i, k)], i, k);
                }
            }
        }
        best
    };

    let mut row_a = vec![0.0; n];
    let mut row_k = vec![0.0; n];
    let max_rounds = 50 * n;
    for _ in 0..max_rounds {
        let (current, i, j) = min_pair(&dist);
        let mut improved = false;
        'search: for &a in &[i, j] {
            for k in 0..n {
                if k == a {
                    continue;
                }
                for c in 0..d {
                    swap_entries(p, a, k, c);
                    for m in 0..n {
                        row_a[m] = if m == a { f64::INFINITY } else { sq_dist(p, a, m) };
                        row_k[m] = if m == k { f64::INFINITY } else { sq_dist(p, k, m) };
                    }
                    let mut new_min = row_a.iter().chain(&row_k).copied().fold(f64::INFINITY, f64::min);
                    if new_min > current {
                        for x in 0..n {
                            if x == a || x == k {
                                continue;
                            }
                            for y in (x + 1)..n {
                                if y != a && y != k {
                                    new_min = new_min.min(dist[(x, y)]);
                                }
                            }
                        }
                    }
                    if new_min > current {
                        for m in 0..n {
                            dist[(a, m)] = row_a[m];
                            dist[(m, a)] = row_a[m];
                            dist[(k, m)] = row_k[m];
                            dist[(m, k)] = row_k[m];
                        }
                        improved = true;
                        break 'search;
                    }
                    swap_entries(p, a, k, c);
                }
            }
        }
        if !improved {
            return current;
        }
    }
    min_pair(&dist).0
}

fn swap_entries(p: &mut DMatrix<f64>, a: usize, k: usize, c: usize) {
    let tmp = p[(a, c)];
    p[(a, c)] = p[(k, c)];
    p[(k, c)] = tmp;
}

/// Affine map of a normalized design into box coordinates.
pub fn scale_to_box(design: &DesignMatrix, bx: &InputBox) -> Result<DesignMatrix> {
    if !design.normalized {
        return Err(Error::invalid("scale_to_box expects a normalized design"));
    }
    if design.dims() != bx.dims() {
        return Err(Error::invalid(format!(
            "design has {} columns but the box has {} dimensions",
            design.dims(),
            bx.dims()
        )));
    }
    let points = DMatrix::from_fn(design.n(), design.dims(), |i, j| {
        bx.lower[j] + design.points[(i, j)] * (bx.upper[j] - bx.lower[j])
    });
    Ok(DesignMatrix {
        points,
        normalized: false,
    })
}

/// Inverse of [`scale_to_box`].
pub fn unscale_from_box(design: &DesignMatrix, bx: &InputBox) -> Result<DesignMatrix> {
    if design.normalized {
        return Err(Error::invalid("design is already normalized"));
    }
    if design.dims() != bx.dims() {
        return Err(Error::invalid("dimension mismatch between design and box"));
    }
    let points = DMatrix::from_fn(design.n(), design.dims(), |i, j| {
        (design.points[(i, j)] - bx.lower[j]) / (bx.upper[j] - bx.lower[j])
    });
    Ok(DesignMatrix {
        points,
        normalized: true,
    })
}

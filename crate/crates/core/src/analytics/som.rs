use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SomError {
    #[error("no embeddings")]
    Empty,
    #[error("embedding {index} has dimension {found}, expected {expected}")]
    Dimension { index: usize, expected: usize, found: usize },
    #[error("embedding {index} has norm {norm}, expected 1")]
    NotNormalized { index: usize, norm: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad config: {0}")]
    Config(&'static str),
}

/// Hexagonal grid stored row-major, laid out "even-q": columns are the
/// axial q coordinate and even columns are shifted down half a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HexGrid {
    pub rows: usize,
    pub cols: usize,
}

const AXIAL_DIRECTIONS: [(i64, i64); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

impl HexGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        HexGrid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (row, col) of a neuron index.
    pub fn offset(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn axial(&self, index: usize) -> (i64, i64) {
        let (row, col) = self.offset(index);
        let (row, col) = (row as i64, col as i64);
        (col, row - (col + (col & 1)) / 2)
    }

    fn index_of_axial(&self, q: i64, r: i64) -> Option<usize> {
        let row = r + (q + (q & 1)) / 2;
        (q >= 0 && row >= 0 && (q as usize) < self.cols && (row as usize) < self.rows)
            .then(|| row as usize * self.cols + q as usize)
    }

    pub fn distance(&self, a: usize, b: usize) -> u64 {
        let ((q1, r1), (q2, r2)) = (self.axial(a), self.axial(b));
        let (dq, dr) = (q1 - q2, r1 - r2);
        (dq.unsigned_abs() + dr.unsigned_abs() + (dq + dr).unsigned_abs()) / 2
    }

    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        let (q, r) = self.axial(index);
        AXIAL_DIRECTIONS
            .iter()
            .filter_map(|(dq, dr)| self.index_of_axial(q + dq, r + dr))
            .collect()
    }

    /// Centre of a cell in the plane, neighbour centres one unit apart.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (q, r) = self.axial(index);
        let (q, r) = (q as f64, r as f64);
        (q * 3f64.sqrt() / 2.0, r + q / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: (f64, f64),
    /// Final neighbourhood radius; it starts at half the longer grid side.
    pub final_radius: f64,
    pub seed: u64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            rows: 10,
            cols: 10,
            iterations: 50_000,
            batch_size: 50,
            learning_rate: (0.5, 0.01),
            final_radius: 1.0,
            seed: 0x50_4d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomModel<T> {
    pub grid: HexGrid,
    pub weights: Vec<Vec<T>>,
    pub quantization_error: T,
    pub topological_error: T,
    pub hit_counts: Vec<u64>,
    pub u_matrix: Vec<T>,
}

fn dist2<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
}

/// Best and second-best neuron; ties go to the lower index.
fn best_two<T: Float>(weights: &[Vec<T>], x: &[T]) -> (usize, usize, T) {
    let (mut best, mut second) = ((0, T::infinity()), (0, T::infinity()));
    for (i, w) in weights.iter().enumerate() {
        let d = dist2(w, x);
        if d < best.1 {
            second = best;
            best = (i, d);
        } else if d < second.1 {
            second = (i, d);
        }
    }
    (best.0, second.0, best.1)
}

fn validate<T: Float>(data: &[Vec<T>]) -> Result<usize, SomError> {
    let dim = data.first().ok_or(SomError::Empty)?.len();
    for (index, v) in data.iter().enumerate() {
        if v.len() != dim {
            return Err(SomError::Dimension { index, expected: dim, found: v.len() });
        }
        let norm = dist2(v, &vec![T::zero(); dim]).sqrt().to_f64().unwrap_or(f64::NAN);
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(SomError::NotNormalized { index, norm });
        }
    }
    Ok(dim)
}

/// Mean sample-to-BMU distance over `data`.
pub fn quantization_error<T: Float>(weights: &[Vec<T>], data: &[Vec<T>]) -> T {
    let sum = data.iter().fold(T::zero(), |s, x| s + best_two(weights, x).2.sqrt());
    sum / T::from(data.len()).expect("usize fits")
}

pub fn train_som<T: Float>(data: &[Vec<T>], config: &SomConfig) -> Result<SomModel<T>, SomError> {
    train_som_with_checkpoints(data, config, &[]).map(|(m, _)| m)
}

/// Also reports the quantization error after each listed iteration count.
pub fn train_som_with_checkpoints<T: Float>(
    data: &[Vec<T>],
    config: &SomConfig,
    checkpoints: &[usize],
) -> Result<(SomModel<T>, Vec<T>), SomError> {
    let dim = validate(data)?;
    if config.rows == 0 || config.cols == 0 {
        return Err(SomError::Config("empty grid"));
    }
    if config.batch_size == 0 {
        return Err(SomError::Config("batch size 0"));
    }
    let grid = HexGrid::new(config.rows, config.cols);
    let cast = |v: f64| T::from(v).expect("f64 converts");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights: Vec<Vec<T>> = (0..grid.len())
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| cast(x / n)).collect()
        })
        .collect();

    // hex distances are integers, so the neighbourhood is a table per step
    let max_d = (config.rows + config.cols) as usize;
    let distances: Vec<Vec<usize>> = (0..grid.len())
        .map(|a| (0..grid.len()).map(|b| grid.distance(a, b) as usize).collect())
        .collect();
    let r0 = config.rows.max(config.cols) as f64 / 2.0;
    let (lr0, lr1) = config.learning_rate;
    let mut qe_at = Vec::new();
    for it in 0..config.iterations {
        let t = if config.iterations > 1 { it as f64 / (config.iterations - 1) as f64 } else { 1.0 };
        let lr = lr0 + (lr1 - lr0) * t;
        let radius = (r0 + (config.final_radius - r0) * t).max(f64::MIN_POSITIVE);
        let kernel: Vec<T> = (0..=max_d)
            .map(|d| cast(lr * (-((d * d) as f64) / (2.0 * radius * radius)).exp()))
            .collect();
        for _ in 0..config.batch_size {
            let x = &data[rng.gen_range(0..data.len())];
            let (bmu, _, _) = best_two(&weights, x);
            for (w, &d) in weights.iter_mut().zip(&distances[bmu]) {
                let h = kernel[d];
                if h == T::zero() {
                    continue;
                }
                for (wi, &xi) in w.iter_mut().zip(x) {
                    *wi = *wi + h * (xi - *wi);
                }
            }
        }
        if checkpoints.contains(&(it + 1)) {
            qe_at.push(quantization_error(&weights, data));
        }
    }

    let mut hit_counts = vec![0u64; grid.len()];
    let mut qe_sum = T::zero();
    let mut not_adjacent = 0usize;
    for x in data {
        let (b1, b2, d) = best_two(&weights, x);
        hit_counts[b1] += 1;
        qe_sum = qe_sum + d.sqrt();
        if grid.len() > 1 && grid.distance(b1, b2) != 1 {
            not_adjacent += 1;
        }
    }
    let n = T::from(data.len()).expect("usize fits");
    let u_matrix = (0..grid.len())
        .map(|i| {
            let nb = grid.neighbors(i);
            if nb.is_empty() {
                return T::zero();
            }
            let s = nb.iter().fold(T::zero(), |s, &j| s + dist2(&weights[i], &weights[j]).sqrt());
            s / T::from(nb.len()).expect("small")
        })
        .collect();
    Ok((
        SomModel {
            grid,
            weights,
            quantization_error: qe_sum / n,
            topological_error: T::from(not_adjacent).expect("usize fits") / n,
            hit_counts,
            u_matrix,
        },
        qe_at,
    ))
}

/// One vector per line, comma separated. Blank lines and `#` comments are
/// skipped.
pub fn parse_embeddings(text: &str) -> Result<Vec<Vec<f64>>, SomError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| SomError::Parse {
                        line: i + 1,
                        message: format!("{:?}: {e}", f.trim()),
                    })
                })
                .collect()
        })
        .collect()
}

//! Regularized least squares for a single projection matrix.
//!
//! Given an original matrix `W` (out x c), inputs `c_i` and targets `t_i`,
//! the objective is
//!
//! ```text
//! L(W') = sum_i |W' c_i - t_i|^2 + lambda |W' - W|_F^2
//! ```
//!
//! whose unique minimizer is
//! `W' = (lambda W + sum_i t_i c_iᵀ)(lambda I + sum_i c_i c_iᵀ)^-1`.
//! The inverse is never formed: the transposed system
//! `(lambda I + G) W'ᵀ = (lambda W + X)ᵀ` is solved with a Cholesky factor.

use super::{Cholesky, LinalgError, Matrix, Result, Vector};

/// Smallest accepted regularization strength.
pub const MIN_LAMBDA: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RidgeProblem {
    original: Matrix,
    inputs: Vec<Vector>,
    targets: Vec<Vector>,
    lambda: f64,
}

impl RidgeProblem {
    pub fn new(
        original: Matrix,
        inputs: Vec<Vector>,
        targets: Vec<Vector>,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if inputs.is_empty() {
            return Err(LinalgError::EmptyProblem);
        }
        if inputs.len() != targets.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        check_pairs(original.cols(), original.rows(), &inputs, &targets)?;
        Ok(Self {
            original,
            inputs,
            targets,
            lambda,
        })
    }

    pub fn original(&self) -> &Matrix {
        &self.original
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vector] {
        &self.targets
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Same inputs and original with a different regularization strength.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            ..self.clone()
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < MIN_LAMBDA {
        return Err(LinalgError::InvalidLambda {
            lambda,
            min: MIN_LAMBDA,
        });
    }
    Ok(())
}

fn check_pairs(in_dim: usize, out_dim: usize, inputs: &[Vector], targets: &[Vector]) -> Result<()> {
    for (i, (c, t)) in inputs.iter().zip(targets).enumerate() {
        if c.dim() != in_dim {
            return Err(LinalgError::DimensionMismatch(format!(
                "input {i} has dim {}, expected {in_dim}",
                c.dim()
            )));
        }
        if t.dim() != out_dim {
            return Err(LinalgError::DimensionMismatch(format!(
                "target {i} has dim {}, expected {out_dim}",
                t.dim()
            )));
        }
    }
    Ok(())
}

/// `sum_i |candidate c_i - t_i|^2 + lambda |candidate - original|_F^2`.
pub fn ridge_loss(problem: &RidgeProblem, candidate: &Matrix) -> Result<f64> {
    if candidate.shape() != problem.original.shape() {
        return Err(LinalgError::DimensionMismatch(format!(
            "candidate {:?} vs original {:?}",
            candidate.shape(),
            problem.original.shape()
        )));
    }
    let mut fit = 0.0;
    for (c, t) in problem.inputs.iter().zip(&problem.targets) {
        let pred = candidate.matvec(c)?;
        fit += pred
            .iter()
            .zip(t.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
    }
    let dev = candidate.sub(&problem.original)?.frobenius_norm();
    Ok(fit + problem.lambda * dev * dev)
}

/// Neumaier-compensated running sums of `t_i c_iᵀ` and `c_i c_iᵀ`.
///
/// Pairs are folded in the order they are added, so a fixed input order
/// gives bit-identical sums on every platform.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    in_dim: usize,
    out_dim: usize,
    cross: Vec<f64>,
    cross_comp: Vec<f64>,
    gram: Vec<f64>,
    gram_comp: Vec<f64>,
    with_gram: bool,
    count: usize,
}

#[inline]
fn neumaier_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

impl GramAccumulator {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            cross: vec![0.0; out_dim * in_dim],
            cross_comp: vec![0.0; out_dim * in_dim],
            gram: vec![0.0; in_dim * in_dim],
            gram_comp: vec![0.0; in_dim * in_dim],
            with_gram: true,
            count: 0,
        }
    }

    /// Accumulates only the cross sum; [`finish`](Self::finish) then
    /// returns a zero Gram matrix.
    pub fn cross_only(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            cross: vec![0.0; out_dim * in_dim],
            cross_comp: vec![0.0; out_dim * in_dim],
            gram: Vec::new(),
            gram_comp: Vec::new(),
            with_gram: false,
            count: 0,
        }
    }

    /// Accumulates only the Gram sum of the inputs; pass empty targets.
    pub fn gram_only(in_dim: usize) -> Self {
        Self::new(in_dim, 0)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add_pair(&mut self, input: &[f64], target: &[f64]) -> Result<()> {
        if input.len() != self.in_dim || target.len() != self.out_dim {
            return Err(LinalgError::DimensionMismatch(format!(
                "pair dims ({}, {}) vs accumulator ({}, {})",
                input.len(),
                target.len(),
                self.in_dim,
                self.out_dim
            )));
        }
        let c = self.in_dim;
        for (r, &t) in target.iter().enumerate() {
            for (k, &x) in input.iter().enumerate() {
                let idx = r * c + k;
                neumaier_add(&mut self.cross[idx], &mut self.cross_comp[idx], t * x);
            }
        }
        if !self.with_gram {
            self.count += 1;
            return Ok(());
        }
        // Upper triangle only; mirrored in `finish` so the Gram matrix is
        // exactly symmetric.
        for (i, &a) in input.iter().enumerate() {
            for (j, &b) in input.iter().enumerate().skip(i) {
                let idx = i * c + j;
                neumaier_add(&mut self.gram[idx], &mut self.gram_comp[idx], a * b);
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Returns `(sum t_i c_iᵀ, sum c_i c_iᵀ)`.
    pub fn finish(&self) -> (Matrix, Matrix) {
        let cross: Vec<f64> = self
            .cross
            .iter()
            .zip(&self.cross_comp)
            .map(|(s, e)| s + e)
            .collect();
        let c = self.in_dim;
        let mut gram = vec![0.0; c * c];
        let filled = if self.with_gram { c } else { 0 };
        for i in 0..filled {
            for j in i..c {
                let v = self.gram[i * c + j] + self.gram_comp[i * c + j];
                gram[i * c + j] = v;
                gram[j * c + i] = v;
            }
        }
        (
            Matrix::new(self.out_dim, c, cross).expect("finite sums"),
            Matrix::new(c, c, gram).expect("finite sums"),
        )
    }
}

/// Cross and Gram sums over `(c_i, t_i)` pairs.
pub fn gram_accumulate(inputs: &[Vector], targets: &[Vector]) -> Result<(Matrix, Matrix)> {
    if inputs.len() != targets.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let in_dim = inputs.first().map_or(0, Vector::dim);
    let out_dim = targets.first().map_or(0, Vector::dim);
    check_pairs(in_dim, out_dim, inputs, targets)?;
    let mut acc = GramAccumulator::new(in_dim, out_dim);
    for (c, t) in inputs.iter().zip(targets) {
        acc.add_pair(c, t)?;
    }
    Ok(acc.finish())
}

/// Factors `lambda I + gram`.
pub(crate) fn regularized_factor(gram: &Matrix, lambda: f64) -> Result<Cholesky> {
    check_lambda(lambda)?;
    let mut a = gram.clone();
    for i in 0..a.rows() {
        a[(i, i)] += lambda;
    }
    Cholesky::factor(&a)
}

/// Solves for `W'` given a factor of `lambda I + G` and the cross sum `X`.
pub(crate) fn solve_with_factor(
    original: &Matrix,
    cross: &Matrix,
    lambda: f64,
    factor: &Cholesky,
) -> Result<Matrix> {
    if cross.shape() != original.shape() || factor.dim() != original.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "original {:?}, cross {:?}, gram {}x{}",
            original.shape(),
            cross.shape(),
            factor.dim(),
            factor.dim()
        )));
    }
    let rhs = original.scale(lambda).add(cross)?.transpose();
    Ok(factor.solve(&rhs)?.transpose())
}

/// `W' = (lambda W + cross)(lambda I + gram)^-1` from precomputed sums.
pub fn solve_from_sums(
    original: &Matrix,
    cross: &Matrix,
    gram: &Matrix,
    lambda: f64,
) -> Result<Matrix> {
    if gram.rows() != gram.cols() || gram.rows() != original.cols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "gram {:?} for original {:?}",
            gram.shape(),
            original.shape()
        )));
    }
    let factor = regularized_factor(gram, lambda)?;
    solve_with_factor(original, cross, lambda, &factor)
}

/// The unique minimizer of [`ridge_loss`].
pub fn ridge_closed_form(problem: &RidgeProblem) -> Result<Matrix> {
    let (cross, gram) = gram_accumulate(&problem.inputs, &problem.targets)?;
    solve_from_sums(&problem.original, &cross, &gram, problem.lambda)
}

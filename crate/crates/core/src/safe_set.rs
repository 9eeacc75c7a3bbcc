//! Inequality descriptions `s(x, u) ≤ 0` of state-dependent safe input sets.
//!
//! A [`ConstraintSet`] is a flat list of [`Constraint`]s. Three kinds cover
//! the instances used in this crate:
//!
//! * affine half-spaces `aᵀu ≤ b + cᵀx`,
//! * input balls `‖u − (c + C x)‖² ≤ ρ²`,
//! * the state norm bound `xᵀx ≤ ρ²`, which does not restrict the input and
//!   only decides whether the safe set is empty.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::opt_kernel::{QpProblem, QuadConstraint};

/// Inclusive membership tolerance.
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `normalᵀ u ≤ offset + couplingᵀ x`
    Affine {
        normal: DVector<f64>,
        offset: f64,
        coupling: DVector<f64>,
    },
    /// `‖u − (center + coupling · x)‖² − radius² ≤ 0`
    InputBall {
        center: DVector<f64>,
        coupling: DMatrix<f64>,
        radius: f64,
    },
    /// `xᵀx − radius² ≤ 0`
    StateNorm { radius: f64 },
}

impl Constraint {
    pub fn depends_on_input(&self) -> bool {
        !matches!(self, Constraint::StateNorm { .. })
    }

    pub fn is_affine(&self) -> bool {
        !matches!(self, Constraint::InputBall { .. })
    }

    fn ball_center(center: &DVector<f64>, coupling: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
        center + coupling * x
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self {
            Constraint::Affine {
                normal,
                offset,
                coupling,
            } => normal.dot(u) - offset - coupling.dot(x),
            Constraint::InputBall {
                center,
                coupling,
                radius,
            } => (u - Self::ball_center(center, coupling, x)).norm_squared() - radius * radius,
            Constraint::StateNorm { radius } => x.norm_squared() - radius * radius,
        }
    }

    pub fn input_gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Constraint::Affine { normal, .. } => normal.clone(),
            Constraint::InputBall {
                center, coupling, ..
            } => (u - Self::ball_center(center, coupling, x)) * 2.0,
            Constraint::StateNorm { .. } => DVector::zeros(u.len()),
        }
    }

    pub fn input_hessian(&self, m: usize) -> DMatrix<f64> {
        match self {
            Constraint::InputBall { .. } => DMatrix::identity(m, m) * 2.0,
            _ => DMatrix::zeros(m, m),
        }
    }
}

/// Evaluated membership record for one `(x, u)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSample {
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    pub member: bool,
    pub values: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    state_dim: usize,
    input_dim: usize,
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(state_dim: usize, input_dim: usize) -> Self {
        ConstraintSet {
            state_dim,
            input_dim,
            constraints: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn push(&mut self, c: Constraint) -> Result<()> {
        let (n, m) = (self.state_dim, self.input_dim);
        let ok = match &c {
            Constraint::Affine {
                normal, coupling, ..
            } => normal.len() == m && coupling.len() == n,
            Constraint::InputBall {
                center,
                coupling,
                radius,
            } => center.len() == m && coupling.shape() == (m, n) && *radius >= 0.0,
            Constraint::StateNorm { radius } => *radius >= 0.0,
        };
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "constraint {c:?} does not fit state dim {n}, input dim {m}"
            )));
        }
        self.constraints.push(c);
        Ok(())
    }

    /// `normalᵀu ≤ offset`
    pub fn with_halfspace(mut self, normal: &[f64], offset: f64) -> Result<Self> {
        let n = self.state_dim;
        self.push(Constraint::Affine {
            normal: DVector::from_row_slice(normal),
            offset,
            coupling: DVector::zeros(n),
        })?;
        Ok(self)
    }

    /// `‖u − center‖ ≤ radius`
    pub fn with_ball(mut self, center: &[f64], radius: f64) -> Result<Self> {
        let (n, m) = (self.state_dim, self.input_dim);
        self.push(Constraint::InputBall {
            center: DVector::from_row_slice(center),
            coupling: DMatrix::zeros(m, n),
            radius,
        })?;
        Ok(self)
    }

    /// `xᵀx ≤ radius²`
    pub fn with_state_norm(mut self, radius: f64) -> Result<Self> {
        self.push(Constraint::StateNorm { radius })?;
        Ok(self)
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected state dim {} and input dim {}, got {} and {}",
                self.state_dim,
                self.input_dim,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// `s(x, u)` componentwise.
    pub fn eval_constraints(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        Ok(DVector::from_iterator(
            self.len(),
            self.constraints.iter().map(|c| c.value(x, u)),
        ))
    }

    pub fn is_member(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<bool> {
        Ok(self
            .eval_constraints(x, u)?
            .iter()
            .all(|v| *v <= MEMBERSHIP_TOLERANCE))
    }

    pub fn sample(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<SafeSample> {
        let values = self.eval_constraints(x, u)?;
        Ok(SafeSample {
            state: x.clone(),
            input: u.clone(),
            member: values.iter().all(|v| *v <= MEMBERSHIP_TOLERANCE),
            values,
        })
    }

    /// Input gradients of every constraint, one row per constraint.
    pub fn constraint_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(x, u)?;
        let mut j = DMatrix::zeros(self.len(), self.input_dim);
        for (i, c) in self.constraints.iter().enumerate() {
            j.row_mut(i).copy_from(&c.input_gradient(x, u).transpose());
        }
        Ok(j)
    }

    pub fn constraint_hessians(&self) -> Vec<DMatrix<f64>> {
        self.constraints
            .iter()
            .map(|c| c.input_hessian(self.input_dim))
            .collect()
    }

    /// True when every state-only constraint holds at `x`. When false the
    /// safe set `S(x)` is empty.
    pub fn state_admissible(&self, x: &DVector<f64>) -> bool {
        let u = DVector::zeros(self.input_dim);
        self.constraints
            .iter()
            .filter(|c| !c.depends_on_input())
            .all(|c| c.value(x, &u) <= MEMBERSHIP_TOLERANCE)
    }

    /// The Euclidean projection of `target` onto `S(x)` written as a QP.
    ///
    /// State-only constraints are left out. The returned vector maps QP
    /// constraint indices (affine rows first, then quadratic) back to indices
    /// in this set.
    pub fn projection_qp(&self, x: &DVector<f64>, target: &DVector<f64>) -> Result<(QpProblem, Vec<usize>)> {
        self.min_quadratic_qp(x, &DMatrix::identity(self.input_dim, self.input_dim), &(-target))
    }

    /// `min ½uᵀHu + gᵀu` over `S(x)` as a QP, with the same index map as
    /// [`ConstraintSet::projection_qp`].
    pub fn min_quadratic_qp(
        &self,
        x: &DVector<f64>,
        hessian: &DMatrix<f64>,
        linear: &DVector<f64>,
    ) -> Result<(QpProblem, Vec<usize>)> {
        self.check_dims(x, linear)?;
        let m = self.input_dim;
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut quad = Vec::new();
        let mut affine_idx = Vec::new();
        let mut quad_idx = Vec::new();
        for (i, c) in self.constraints.iter().enumerate() {
            match c {
                Constraint::Affine {
                    normal,
                    offset,
                    coupling,
                } => {
                    rows.push(normal.transpose());
                    rhs.push(offset + coupling.dot(x));
                    affine_idx.push(i);
                }
                Constraint::InputBall {
                    center,
                    coupling,
                    radius,
                } => {
                    let c = Constraint::ball_center(center, coupling, x);
                    quad.push(QuadConstraint {
                        p: DMatrix::identity(m, m),
                        q: &c * -2.0,
                        r: c.norm_squared() - radius * radius,
                    });
                    quad_idx.push(i);
                }
                Constraint::StateNorm { .. } => {}
            }
        }
        let g = if rows.is_empty() {
            DMatrix::zeros(0, m)
        } else {
            DMatrix::from_rows(&rows)
        };
        let qp = QpProblem::new(hessian.clone(), linear.clone())
            .with_affine(g, DVector::from_vec(rhs))
            .with_quadratic(quad);
        affine_idx.extend(quad_idx);
        Ok((qp, affine_idx))
    }

    /// A copy with every input-dependent constraint pulled inward by
    /// `margin` (half-spaces by `margin·‖a‖`, balls by `margin` in radius).
    pub fn tightened(&self, margin: f64) -> ConstraintSet {
        let constraints = self
            .constraints
            .iter()
            .map(|c| match c {
                Constraint::Affine {
                    normal,
                    offset,
                    coupling,
                } => Constraint::Affine {
                    normal: normal.clone(),
                    offset: offset - margin * normal.norm(),
                    coupling: coupling.clone(),
                },
                Constraint::InputBall {
                    center,
                    coupling,
                    radius,
                } => Constraint::InputBall {
                    center: center.clone(),
                    coupling: coupling.clone(),
                    radius: (radius - margin).max(0.0),
                },
                other => other.clone(),
            })
            .collect();
        ConstraintSet {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            constraints,
        }
    }
}

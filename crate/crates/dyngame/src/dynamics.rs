//! Discrete-time dynamics models with hand-coded analytic derivatives.
//!
//! Every model provides its Jacobians and the second derivatives of the
//! costate contraction `lambda' * f` that the sensitivity assembly needs.
//! Analytic derivatives are validated against central differences in the
//! test suite; the models themselves stay dependency-free.

use nalgebra::{DMatrix, DVector};

/// One robot's discrete-time dynamics `x^{t+1} = f(x^t, u^t, p)`, where `p`
/// is the (possibly empty) dynamics-parameter slice of the robot's theta.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    /// `x^{t+1} = x + dt * u`. State is position.
    SingleIntegrator { dim: usize, dt: f64 },
    /// State `(pos, vel)`, input acceleration: `pos += dt*vel; vel += dt*u`.
    DoubleIntegrator { dim: usize, dt: f64 },
    /// Planar differential drive. State `(x, y, heading)`, input
    /// `(speed, turn rate)`, forward-Euler discretized.
    Unicycle { dt: f64 },
    /// Unicycle with a learnable speed gain `k` (one dynamics parameter):
    /// the commanded speed enters as `k * v`.
    GainUnicycle { dt: f64 },
    /// Generic affine dynamics `x^{t+1} = A x + B u + c`.
    Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        /// How many leading state coordinates are spatial position.
        pos_dim: usize,
    },
}

impl DynamicsModel {
    pub fn state_dim(&self) -> usize {
        match self {
            Self::SingleIntegrator { dim, .. } => *dim,
            Self::DoubleIntegrator { dim, .. } => 2 * dim,
            Self::Unicycle { .. } | Self::GainUnicycle { .. } => 3,
            Self::Linear { a, .. } => a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::SingleIntegrator { dim, .. } => *dim,
            Self::DoubleIntegrator { dim, .. } => *dim,
            Self::Unicycle { .. } | Self::GainUnicycle { .. } => 2,
            Self::Linear { b, .. } => b.ncols(),
        }
    }

    /// Number of dynamics parameters drawn from the robot's theta.
    pub fn param_dim(&self) -> usize {
        match self {
            Self::GainUnicycle { .. } => 1,
            _ => 0,
        }
    }

    /// Leading state coordinates that are spatial position (1 or 2).
    pub fn pos_dim(&self) -> usize {
        match self {
            Self::SingleIntegrator { dim, .. } | Self::DoubleIntegrator { dim, .. } => {
                (*dim).min(2)
            }
            Self::Unicycle { .. } | Self::GainUnicycle { .. } => 2,
            Self::Linear { pos_dim, .. } => *pos_dim,
        }
    }

    /// Range of velocity coordinates, when the state carries them.
    pub fn vel_range(&self) -> Option<std::ops::Range<usize>> {
        match self {
            Self::DoubleIntegrator { dim, .. } => Some(*dim..2 * dim),
            _ => None,
        }
    }

    /// Affine in (x, u) with constant coefficient matrices.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Self::SingleIntegrator { .. } | Self::DoubleIntegrator { .. } | Self::Linear { .. }
        )
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, p: &[f64]) -> DVector<f64> {
        match self {
            Self::SingleIntegrator { dt, .. } => x + u * *dt,
            Self::DoubleIntegrator { dim, dt } => {
                let d = *dim;
                let mut next = x.clone();
                for k in 0..d {
                    next[k] += dt * x[d + k];
                    next[d + k] += dt * u[k];
                }
                next
            }
            Self::Unicycle { dt } => {
                let (v, w) = (u[0], u[1]);
                let phi = x[2];
                DVector::from_vec(vec![
                    x[0] + dt * v * phi.cos(),
                    x[1] + dt * v * phi.sin(),
                    x[2] + dt * w,
                ])
            }
            Self::GainUnicycle { dt } => {
                let k = p[0];
                let (v, w) = (u[0], u[1]);
                let phi = x[2];
                DVector::from_vec(vec![
                    x[0] + dt * k * v * phi.cos(),
                    x[1] + dt * k * v * phi.sin(),
                    x[2] + dt * w,
                ])
            }
            Self::Linear { a, b, c, .. } => a * x + b * u + c,
        }
    }

    pub fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>, p: &[f64]) -> DMatrix<f64> {
        let n = self.state_dim();
        match self {
            Self::SingleIntegrator { .. } => DMatrix::identity(n, n),
            Self::DoubleIntegrator { dim, dt } => {
                let mut a = DMatrix::identity(n, n);
                for k in 0..*dim {
                    a[(k, dim + k)] = *dt;
                }
                a
            }
            Self::Unicycle { dt } => {
                let mut a = DMatrix::identity(3, 3);
                a[(0, 2)] = -dt * u[0] * x[2].sin();
                a[(1, 2)] = dt * u[0] * x[2].cos();
                a
            }
            Self::GainUnicycle { dt } => {
                let k = p[0];
                let mut a = DMatrix::identity(3, 3);
                a[(0, 2)] = -dt * k * u[0] * x[2].sin();
                a[(1, 2)] = dt * k * u[0] * x[2].cos();
                a
            }
            Self::Linear { a, .. } => a.clone(),
        }
    }

    pub fn jac_u(&self, x: &DVector<f64>, _u: &DVector<f64>, p: &[f64]) -> DMatrix<f64> {
        let (n, mu) = (self.state_dim(), self.input_dim());
        match self {
            Self::SingleIntegrator { dim, dt } => DMatrix::identity(*dim, *dim) * *dt,
            Self::DoubleIntegrator { dim, dt } => {
                let mut b = DMatrix::zeros(n, mu);
                for k in 0..*dim {
                    b[(dim + k, k)] = *dt;
                }
                b
            }
            Self::Unicycle { dt } => {
                let mut b = DMatrix::zeros(3, 2);
                b[(0, 0)] = dt * x[2].cos();
                b[(1, 0)] = dt * x[2].sin();
                b[(2, 1)] = *dt;
                b
            }
            Self::GainUnicycle { dt } => {
                let k = p[0];
                let mut b = DMatrix::zeros(3, 2);
                b[(0, 0)] = dt * k * x[2].cos();
                b[(1, 0)] = dt * k * x[2].sin();
                b[(2, 1)] = *dt;
                b
            }
            Self::Linear { b, .. } => b.clone(),
        }
    }

    /// `d f / d p`, shape `n x param_dim`.
    pub fn jac_p(&self, x: &DVector<f64>, u: &DVector<f64>, _p: &[f64]) -> DMatrix<f64> {
        match self {
            Self::GainUnicycle { dt } => {
                let phi = x[2];
                DMatrix::from_column_slice(
                    3,
                    1,
                    &[dt * u[0] * phi.cos(), dt * u[0] * phi.sin(), 0.0],
                )
            }
            _ => DMatrix::zeros(self.state_dim(), 0),
        }
    }

    /// `d^2 (lambda' f) / dx dx`, shape `n x n`.
    pub fn vhp_xx(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: &[f64],
        lam: &DVector<f64>,
    ) -> DMatrix<f64> {
        let n = self.state_dim();
        match self {
            Self::Unicycle { dt } => {
                let mut h = DMatrix::zeros(3, 3);
                h[(2, 2)] = -dt * u[0] * (lam[0] * x[2].cos() + lam[1] * x[2].sin());
                h
            }
            Self::GainUnicycle { dt } => {
                let k = p[0];
                let mut h = DMatrix::zeros(3, 3);
                h[(2, 2)] = -dt * k * u[0] * (lam[0] * x[2].cos() + lam[1] * x[2].sin());
                h
            }
            _ => DMatrix::zeros(n, n),
        }
    }

    /// `d^2 (lambda' f) / du dx`, shape `mu x n`.
    pub fn vhp_ux(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        p: &[f64],
        lam: &DVector<f64>,
    ) -> DMatrix<f64> {
        let (n, mu) = (self.state_dim(), self.input_dim());
        match self {
            Self::Unicycle { dt } => {
                let mut h = DMatrix::zeros(2, 3);
                h[(0, 2)] = dt * (-lam[0] * x[2].sin() + lam[1] * x[2].cos());
                h
            }
            Self::GainUnicycle { dt } => {
                let k = p[0];
                let mut h = DMatrix::zeros(2, 3);
                h[(0, 2)] = dt * k * (-lam[0] * x[2].sin() + lam[1] * x[2].cos());
                h
            }
            _ => DMatrix::zeros(mu, n),
        }
    }

    /// `d^2 (lambda' f) / du du`, shape `mu x mu`. Zero for every builtin
    /// model: all are affine in the input given the state.
    pub fn vhp_uu(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _p: &[f64],
        _lam: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mu = self.input_dim();
        DMatrix::zeros(mu, mu)
    }

    /// `d^2 (lambda' f) / dx dp`, shape `n x param_dim`.
    pub fn vhp_xp(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _p: &[f64],
        lam: &DVector<f64>,
    ) -> DMatrix<f64> {
        match self {
            Self::GainUnicycle { dt } => {
                let mut h = DMatrix::zeros(3, 1);
                h[(2, 0)] = dt * u[0] * (-lam[0] * x[2].sin() + lam[1] * x[2].cos());
                h
            }
            _ => DMatrix::zeros(self.state_dim(), 0),
        }
    }

    /// `d^2 (lambda' f) / du dp`, shape `mu x param_dim`.
    pub fn vhp_up(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _p: &[f64],
        lam: &DVector<f64>,
    ) -> DMatrix<f64> {
        match self {
            Self::GainUnicycle { dt } => {
                let mut h = DMatrix::zeros(2, 1);
                h[(0, 0)] = dt * (lam[0] * x[2].cos() + lam[1] * x[2].sin());
                h
            }
            _ => DMatrix::zeros(self.input_dim(), 0),
        }
    }
}

/// Catalog of builtin dynamics constructors: one representative instance per
/// model kind, used by sweep tests and listed in the scenario-format docs.
pub fn builtin_dynamics(dt: f64) -> Vec<(&'static str, DynamicsModel)> {
    vec![
        ("single_integrator", DynamicsModel::SingleIntegrator { dim: 2, dt }),
        ("double_integrator", DynamicsModel::DoubleIntegrator { dim: 2, dt }),
        ("unicycle", DynamicsModel::Unicycle { dt }),
        ("unicycle_gain", DynamicsModel::GainUnicycle { dt }),
        (
            "linear",
            DynamicsModel::Linear {
                a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                b: DMatrix::from_row_slice(2, 1, &[0.0, dt]),
                c: DVector::zeros(2),
                pos_dim: 1,
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::fd;

    #[test]
    fn unicycle_forward_euler_step() {
        let model = DynamicsModel::Unicycle { dt: 0.1 };
        let x = DVector::zeros(3);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let next = model.step(&x, &u, &[]);
        assert_eq!(next, DVector::from_vec(vec![0.1, 0.0, 0.0]));
    }

    #[test]
    fn double_integrator_at_rest_stays_put() {
        let model = DynamicsModel::DoubleIntegrator { dim: 2, dt: 0.2 };
        let x = DVector::from_vec(vec![1.0, -2.0, 0.0, 0.0]);
        let u = DVector::zeros(2);
        assert_eq!(model.step(&x, &u, &[]), x);
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        for (name, model) in builtin_dynamics(0.17) {
            let p: Vec<f64> = (0..model.param_dim()).map(|k| 0.9 + 0.2 * k as f64).collect();
            let x = DVector::from_fn(model.state_dim(), |i, _| 0.3 + 0.41 * i as f64);
            let u = DVector::from_fn(model.input_dim(), |i, _| -0.7 + 0.23 * i as f64);
            let n = model.state_dim();

            let m2 = model.clone();
            let (u2, p2) = (u.clone(), p.clone());
            let jx = fd::jacobian(move |xv| m2.step(xv, &u2, &p2), &x, n);
            assert!(
                fd::rel_err_mat(&model.jac_x(&x, &u, &p), &jx) < 1e-6,
                "{name}: jac_x"
            );

            let m2 = model.clone();
            let (x2, p2) = (x.clone(), p.clone());
            let ju = fd::jacobian(move |uv| m2.step(&x2, uv, &p2), &u, n);
            assert!(
                fd::rel_err_mat(&model.jac_u(&x, &u, &p), &ju) < 1e-6,
                "{name}: jac_u"
            );

            if model.param_dim() > 0 {
                let m2 = model.clone();
                let (x2, u2) = (x.clone(), u.clone());
                let jp = fd::jacobian(
                    move |pv| m2.step(&x2, &u2, pv.as_slice()),
                    &DVector::from_vec(p.clone()),
                    n,
                );
                assert!(
                    fd::rel_err_mat(&model.jac_p(&x, &u, &p), &jp) < 1e-6,
                    "{name}: jac_p"
                );
            }
        }
    }

    #[test]
    fn costate_contractions_match_differentiated_jacobians() {
        // d^2(lam'f)/da db == d/db of (jac_a' lam), checked by differencing
        // the analytic first derivatives.
        for (name, model) in builtin_dynamics(0.13) {
            let p: Vec<f64> = (0..model.param_dim()).map(|_| 1.1).collect();
            let x = DVector::from_fn(model.state_dim(), |i, _| 0.2 - 0.3 * i as f64);
            let u = DVector::from_fn(model.input_dim(), |i, _| 0.5 + 0.1 * i as f64);
            let lam = DVector::from_fn(model.state_dim(), |i, _| 1.0 - 0.4 * i as f64);

            let m2 = model.clone();
            let (u2, p2, l2) = (u.clone(), p.clone(), lam.clone());
            let fd_xx = fd::jacobian(
                move |xv| m2.jac_x(xv, &u2, &p2).transpose() * &l2,
                &x,
                model.state_dim(),
            );
            assert!(
                fd::rel_err_mat(&model.vhp_xx(&x, &u, &p, &lam), &fd_xx) < 1e-6,
                "{name}: vhp_xx"
            );

            let m2 = model.clone();
            let (x2, p2, l2) = (x.clone(), p.clone(), lam.clone());
            let fd_ux_t = fd::jacobian(
                move |uv| m2.jac_x(&x2, uv, &p2).transpose() * &l2,
                &u,
                model.state_dim(),
            );
            // rows u, cols x == transpose of d(jac_x' lam)/du
            assert!(
                fd::rel_err_mat(&model.vhp_ux(&x, &u, &p, &lam), &fd_ux_t.transpose()) < 1e-6,
                "{name}: vhp_ux"
            );

            if model.param_dim() > 0 {
                let m2 = model.clone();
                let (u2, x2, l2) = (u.clone(), x.clone(), lam.clone());
                let fd_xp = fd::jacobian(
                    move |pv| m2.jac_x(&x2, &u2, pv.as_slice()).transpose() * &l2,
                    &DVector::from_vec(p.clone()),
                    model.state_dim(),
                );
                assert!(
                    fd::rel_err_mat(&model.vhp_xp(&x, &u, &p, &lam), &fd_xp) < 1e-6,
                    "{name}: vhp_xp"
                );

                let m2 = model.clone();
                let (u2, x2, l2) = (u.clone(), x.clone(), lam.clone());
                let fd_up = fd::jacobian(
                    move |pv| m2.jac_u(&x2, &u2, pv.as_slice()).transpose() * &l2,
                    &DVector::from_vec(p.clone()),
                    model.input_dim(),
                );
                assert!(
                    fd::rel_err_mat(&model.vhp_up(&x, &u, &p, &lam), &fd_up) < 1e-6,
                    "{name}: vhp_up"
                );
            }
        }
    }
}

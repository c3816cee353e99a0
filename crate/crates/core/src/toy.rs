//! Two-dimensional quadratic sandbox.
//!
//! Each client owns `f_k(theta) = 1/2 (theta - m_k)^T A_k (theta - m_k)`, so
//! the minimizer of the average loss and the average of the per-client
//! minimizers are both available in closed form and their gap measures
//! client drift exactly.

use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::model::{Layout, ParamVector};
use crate::optim::{LocalObjective, OptimError};
use crate::rng::{self, Purpose};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("descent diverged at step {step}")]
    Diverged { step: usize, last_finite: Vec2 },
}

/// One client's quadratic loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadClient {
    a: Mat2,
    m: Vec2,
}

impl QuadClient {
    /// `a` must be symmetric positive definite.
    pub fn new(a: Mat2, m: Vec2) -> Result<Self, ToyError> {
        let finite = a.iter().flatten().chain(m.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ToyError::Config("matrix and minimizer must be finite".into()));
        }
        if a[0][1] != a[1][0] {
            return Err(ToyError::Config(format!("matrix {a:?} is not symmetric")));
        }
        // Sylvester's criterion
        if !(a[0][0] > 0.0 && det(&a) > 0.0) {
            return Err(ToyError::Config(format!("matrix {a:?} is not positive definite")));
        }
        Ok(Self { a, m })
    }

    pub fn diag(a: f64, b: f64, m: Vec2) -> Result<Self, ToyError> {
        Self::new([[a, 0.0], [0.0, b]], m)
    }

    pub fn hessian(&self) -> Mat2 {
        self.a
    }

    pub fn minimizer(&self) -> Vec2 {
        self.m
    }

    pub fn loss(&self, theta: Vec2) -> f64 {
        let d = [theta[0] - self.m[0], theta[1] - self.m[1]];
        let ad = mat_vec(&self.a, d);
        0.5 * (d[0] * ad[0] + d[1] * ad[1])
    }

    pub fn grad(&self, theta: Vec2) -> Vec2 {
        mat_vec(&self.a, [theta[0] - self.m[0], theta[1] - self.m[1]])
    }
}

fn det(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn mat_vec(a: &Mat2, v: Vec2) -> Vec2 {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn nonempty(clients: &[QuadClient]) -> Result<(), ToyError> {
    if clients.is_empty() {
        return Err(ToyError::Config("need at least one client".into()));
    }
    Ok(())
}

/// Mean loss over the clients.
pub fn mean_loss(clients: &[QuadClient], theta: Vec2) -> f64 {
    clients.iter().map(|c| c.loss(theta)).sum::<f64>() / clients.len() as f64
}

/// Mean gradient over the clients.
pub fn mean_grad(clients: &[QuadClient], theta: Vec2) -> Vec2 {
    mean_grad_of(clients.iter(), theta)
}

fn mean_grad_of<'a>(clients: impl ExactSizeIterator<Item = &'a QuadClient>, theta: Vec2) -> Vec2 {
    let n = clients.len() as f64;
    let mut g = [0.0; 2];
    for c in clients {
        let gk = c.grad(theta);
        g[0] += gk[0];
        g[1] += gk[1];
    }
    [g[0] / n, g[1] / n]
}

/// Minimizer of the average loss, `(sum A_k)^-1 sum A_k m_k`.
pub fn global_optimum(clients: &[QuadClient]) -> Result<Vec2, ToyError> {
    nonempty(clients)?;
    let mut s = [[0.0; 2]; 2];
    let mut r = [0.0; 2];
    for c in clients {
        for (row, a_row) in s.iter_mut().zip(&c.a) {
            for (x, a) in row.iter_mut().zip(a_row) {
                *x += a;
            }
        }
        let am = mat_vec(&c.a, c.m);
        r[0] += am[0];
        r[1] += am[1];
    }
    // 2x2 elimination, pivoting on s[0][0] (positive for a sum of SPD matrices)
    let f = s[1][0] / s[0][0];
    let y = (r[1] - f * r[0]) / (s[1][1] - f * s[0][1]);
    let x = (r[0] - s[0][1] * y) / s[0][0];
    Ok([x, y])
}

/// Average of the per-client minimizers: where parameter averaging lands
/// when every client trains to convergence between synchronizations.
pub fn naive_parameter_average(clients: &[QuadClient]) -> Result<Vec2, ToyError> {
    nonempty(clients)?;
    let n = clients.len() as f64;
    let sx: f64 = clients.iter().map(|c| c.m[0]).sum();
    let sy: f64 = clients.iter().map(|c| c.m[1]).sum();
    Ok([sx / n, sy / n])
}

/// Euclidean distance between the naive average and the global optimum.
pub fn drift_gap(clients: &[QuadClient]) -> Result<f64, ToyError> {
    let a = naive_parameter_average(clients)?;
    let b = global_optimum(clients)?;
    Ok((a[0] - b[0]).hypot(a[1] - b[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescentMode {
    /// Exact mean gradient.
    Gd,
    /// One uniformly drawn client per step.
    Sgd,
    /// Mean gradient of `B` distinct clients drawn per step.
    Minibatch(usize),
}

/// Iterates of a descent run with the mean loss at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("a trajectory holds at least its start")
    }

    /// `step,theta_x,theta_y,loss`, one row per point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,theta_x,theta_y,loss\n");
        for (i, (p, l)) in self.points.iter().zip(&self.losses).enumerate() {
            writeln!(out, "{i},{},{},{l}", p[0], p[1]).expect("writing to a String");
        }
        out
    }
}

/// `steps` iterations of `theta <- theta - eta * g` where `g` depends on `mode`.
pub fn trace_descent(
    clients: &[QuadClient],
    mode: DescentMode,
    theta0: Vec2,
    eta: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory, ToyError> {
    nonempty(clients)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(ToyError::Config(format!("learning rate must be positive, got {eta}")));
    }
    if mode == DescentMode::Minibatch(0) {
        return Err(ToyError::Config("mini-batch size must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Toy, &[]);
    let mut theta = theta0;
    let mut points = vec![theta];
    let mut losses = vec![mean_loss(clients, theta)];
    for step in 1..=steps {
        let g = match mode {
            DescentMode::Gd => mean_grad(clients, theta),
            DescentMode::Sgd => clients[rng.random_range(0..clients.len())].grad(theta),
            DescentMode::Minibatch(b) if b >= clients.len() => mean_grad(clients, theta),
            DescentMode::Minibatch(b) => {
                let mut pick = index::sample(&mut rng, clients.len(), b).into_vec();
                pick.sort_unstable();
                mean_grad_of(pick.iter().map(|&i| &clients[i]), theta)
            }
        };
        let next = [theta[0] - eta * g[0], theta[1] - eta * g[1]];
        let loss = mean_loss(clients, next);
        if !(next[0].is_finite() && next[1].is_finite() && loss.is_finite()) {
            return Err(ToyError::Diverged { step, last_finite: theta });
        }
        theta = next;
        points.push(theta);
        losses.push(loss);
    }
    Ok(Trajectory { points, losses })
}

fn theta_layout() -> Arc<Layout> {
    static LAYOUT: OnceLock<Arc<Layout>> = OnceLock::new();
    LAYOUT.get_or_init(|| Arc::new(Layout::single("theta", 2))).clone()
}

/// A point of the plane as a parameter vector with the single layer `theta`.
pub fn quad_params(theta: Vec2) -> ParamVector {
    ParamVector::new(theta.to_vec(), theta_layout()).expect("two values fill the layout")
}

pub fn params_to_vec2(p: &ParamVector) -> Vec2 {
    [p.values()[0], p.values()[1]]
}

/// A quadratic client for the optimizers in [`crate::optim`]: it holds one
/// "sample" whose loss is the whole quadratic.
#[derive(Debug, Clone, Copy)]
pub struct QuadObjective {
    pub client_id: usize,
    pub client: QuadClient,
}

impl QuadObjective {
    pub fn for_clients(clients: &[QuadClient]) -> Vec<Self> {
        clients.iter().enumerate().map(|(client_id, &client)| Self { client_id, client }).collect()
    }
}

impl LocalObjective for QuadObjective {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, params: &ParamVector, _positions: &[usize]) -> Result<(f64, ParamVector), OptimError> {
        if params.len() != 2 {
            return Err(OptimError::Contract(format!("quadratic clients take 2 parameters, got {}", params.len())));
        }
        let theta = params_to_vec2(params);
        let g = self.client.grad(theta);
        Ok((self.client.loss(theta), params.with_values(g.to_vec())?))
    }
}

/// The asymmetric two-client landscape: `A_1 = diag(1, 4)`, `m_1 = 0`;
/// `A_2 = diag(4, 1)`, `m_2 = (2, 2)`.
pub fn drift_pair() -> [QuadClient; 2] {
    [
        QuadClient::diag(1.0, 4.0, [0.0, 0.0]).expect("valid"),
        QuadClient::diag(4.0, 1.0, [2.0, 2.0]).expect("valid"),
    ]
}

/// Four clients with distinct curvatures and minimizers, for path pictures.
pub fn path_clients() -> Vec<QuadClient> {
    vec![
        QuadClient::new([[2.0, 0.5], [0.5, 1.0]], [-1.0, 0.5]).expect("valid"),
        QuadClient::new([[1.0, -0.3], [-0.3, 3.0]], [1.5, -0.5]).expect("valid"),
        QuadClient::new([[3.0, 0.0], [0.0, 0.5]], [0.5, 1.5]).expect("valid"),
        QuadClient::new([[1.5, 0.4], [0.4, 1.5]], [0.0, -1.0]).expect("valid"),
    ]
}

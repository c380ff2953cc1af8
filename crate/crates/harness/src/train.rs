//! Adam on small synthetic regression tasks.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use erwin_core::balltree::BallTree;
use erwin_core::geometry::{generate, PointCloud, SyntheticKind, SyntheticSpec};
use erwin_core::model::{Erwin, ErwinConfig, ForwardOptions};
use erwin_core::numerics::nn::linear;
use erwin_core::numerics::{ParamGrads, ParamStore, Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HarnessError, Result};

/// Neighbour count of the density estimate.
pub const DENSITY_K: usize = 8;
/// Input width of the linear task.
pub const LINEAR_FEATURES: usize = 4;
/// Standard deviation of the linear task's label noise.
pub const LINEAR_NOISE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Standardised log k-NN density of every point of a clustered cloud.
    DensityRegression,
    /// Offset of every point from the cloud's centre of mass.
    ComOffset,
    /// Noisy linear map of random features, fitted by a single affine
    /// layer; its least-squares optimum is known in closed form.
    Linear,
}

impl Task {
    pub fn default_lr(self) -> f64 {
        match self {
            Task::DensityRegression | Task::ComOffset => 3e-3,
            Task::Linear => 5e-2,
        }
    }
}

impl FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density-regression" => Ok(Task::DensityRegression),
            "com-offset" => Ok(Task::ComOffset),
            "linear" => Ok(Task::Linear),
            other => Err(HarnessError::Validation(format!(
                "unknown task `{other}` (expected density-regression, com-offset or linear)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::DensityRegression => "density-regression",
            Task::ComOffset => "com-offset",
            Task::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Points in the training cloud (or samples for the linear task).
    pub n: usize,
}

impl TrainOptions {
    pub fn new(task: Task, steps: usize, seed: u64) -> Self {
        TrainOptions {
            steps,
            lr: task.default_lr(),
            seed,
            n: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub task: Task,
    /// Full-batch loss before each update, then after the last one:
    /// `steps + 1` entries.
    pub losses: Vec<f64>,
    /// Smallest achievable loss, where it is known in closed form.
    pub optimum: Option<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }

    /// `final / initial`.
    pub fn ratio(&self) -> f64 {
        self.final_loss() / self.initial()
    }

    /// `final / optimum`, when the optimum is known.
    pub fn optimum_ratio(&self) -> Option<f64> {
        self.optimum.map(|o| self.final_loss() / o)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (name, param)) in store.iter_mut().enumerate() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(HarnessError::Diverged { step, loss })
    }
}

/// Training cloud and per-point targets of a point-cloud task.
pub fn task_data(task: Task, dim: usize, n: usize, seed: u64) -> Result<(PointCloud, Tensor<f64>)> {
    match task {
        Task::DensityRegression => {
            let kind = SyntheticKind::GaussianBlobs { blobs: 4, spread: 0.08 };
            let cloud = generate(&SyntheticSpec::new(kind, n, dim, seed))?;
            if n <= DENSITY_K {
                return Err(HarnessError::Validation(format!(
                    "density task needs more than {DENSITY_K} points"
                )));
            }
            let tree = BallTree::from_cloud(&cloud)?;
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let nb = tree.knn(i, DENSITY_K)?;
                let far = nb[DENSITY_K - 1];
                let d2: f64 = cloud
                    .point(i)
                    .iter()
                    .zip(cloud.point(far))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                // log of k / volume of the k-NN ball, up to a constant
                y.push(-(dim as f64) * d2.sqrt().max(1e-12).ln());
            }
            let mean = y.iter().sum::<f64>() / n as f64;
            let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
                .sqrt()
                .max(1e-12);
            let y: Vec<f64> = y.into_iter().map(|v| (v - mean) / sd).collect();
            Ok((cloud, Tensor::new(&[n, 1], y)?))
        }
        Task::ComOffset => {
            let cloud = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, n, dim, seed))?;
            let com: Vec<f64> = (0..dim)
                .map(|a| (0..n).map(|i| cloud.point(i)[a]).sum::<f64>() / n as f64)
                .collect();
            let y: Vec<f64> = (0..n)
                .flat_map(|i| (0..dim).map(move |a| (i, a)))
                .map(|(i, a)| cloud.point(i)[a] - com[a])
                .collect();
            Ok((cloud, Tensor::new(&[n, dim], y)?))
        }
        Task::Linear => Err(HarnessError::Validation("the linear task has no point cloud".into())),
    }
}

/// Sets the input and output widths a point-cloud task requires.
pub fn adapt_config(task: Task, config: &ErwinConfig) -> ErwinConfig {
    let mut c = config.clone();
    c.in_features = 0;
    c.out_features = match task {
        Task::ComOffset => c.dim,
        _ => 1,
    };
    c
}

/// Trains on the task's fixed synthetic data set, full batch.
///
/// `config` is used for the point-cloud tasks after [`adapt_config`]; the
/// linear task ignores it.
pub fn train_synthetic(task: Task, config: &ErwinConfig, opts: &TrainOptions) -> Result<TrainReport> {
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(HarnessError::Validation(format!(
            "learning rate must be positive, got {}",
            opts.lr
        )));
    }
    match task {
        Task::Linear => train_linear(opts),
        _ => train_model(task, config, opts),
    }
}

fn train_model(task: Task, config: &ErwinConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let config = adapt_config(task, config);
    let mut model = Erwin::new(config, opts.seed)?;
    let (cloud, target) = task_data(task, model.config.dim, opts.n, opts.seed.wrapping_add(1))?;
    let prep = model.prepare(&cloud.view())?;
    let nbhd = model.neighborhood(&prep)?;
    let input = model.input_tensor::<f64>(&cloud.view())?;
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..=opts.steps {
        let tape = Tape::<f64>::new();
        let b = model.params.bind(&tape);
        let x = tape.constant(input.clone());
        let out = model.forward(&b, &prep, &nbhd, &x, ForwardOptions::default())?;
        let loss = out.out.mse(&target)?;
        losses.push(check_loss(step, loss.data()[0])?);
        if step == opts.steps {
            break;
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut model.params, &b.collect(&grads));
    }
    Ok(TrainReport {
        task,
        losses,
        optimum: None,
    })
}

/// Features, targets and the least-squares optimum of the linear task.
pub fn linear_data(n: usize, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>, f64)> {
    let p = LINEAR_FEATURES;
    if n <= p + 1 {
        return Err(HarnessError::Validation(format!(
            "linear task needs more than {} samples",
            p + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let bias = 0.5;
    let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            bias + (0..p).map(|j| x[i * p + j] * w[j]).sum::<f64>() + LINEAR_NOISE * noise
        })
        .collect();
    // least squares over [x, 1]
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { x[i * p + j] } else { 1.0 });
    let rhs = DVector::from_column_slice(&y);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| HarnessError::Validation(format!("least squares failed: {e}")))?;
    let resid = &design * coef - &rhs;
    let optimum = resid.norm_squared() / n as f64;
    Ok((Tensor::new(&[n, p], x)?, Tensor::new(&[n, 1], y)?, optimum))
}

fn train_linear(opts: &TrainOptions) -> Result<TrainReport> {
    let (x, y, optimum) = linear_data(opts.n, opts.seed)?;
    let mut store = ParamStore::new(opts.seed);
    store.add_weight("w", LINEAR_FEATURES, 1)?;
    store.add_constant("b", &[1], 0.0)?;
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..=opts.steps {
        let tape = Tape::<f64>::new();
        let b = store.bind(&tape);
        let out = linear(&tape.constant(x.clone()), &b.get("w")?, Some(&b.get("b")?))?;
        let loss = out.mse(&y)?;
        losses.push(check_loss(step, loss.data()[0])?);
        if step == opts.steps {
            break;
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut store, &b.collect(&grads));
    }
    Ok(TrainReport {
        task: Task::Linear,
        losses,
        optimum: Some(optimum),
    })
}

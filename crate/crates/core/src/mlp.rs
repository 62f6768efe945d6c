//! One-hidden-layer perceptron mapping demands to route flows, with
//! hand-written gradients and an AdamW optimizer.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Samples;
use crate::error::{Error, Result};
use crate::io::{self, DenseMatrix};
use crate::routes::{Incidence, RouteSet};

pub const MODEL_FORMAT: &str = "tapflow-model";

/// Input standardization fitted on training demands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Column means and population standard deviations; constant columns
    /// get a unit scale.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Shape("cannot fit normalization on zero rows".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let std = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Which route set a trained model predicts over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteBinding {
    pub network_fingerprint: String,
    pub routes_fingerprint: String,
    pub k_bound: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Hidden weights, `n_r × n_d`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Output weights, `n_r × n_r`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub norm: Option<Normalization>,
    pub seed: u64,
    pub routes: Option<RouteBinding>,
}

/// He-normal weights, zero biases. With `normalize` the input layer starts
/// as the identity standardization and is fitted when training begins.
pub fn init_mlp(n_d: usize, n_r: usize, seed: u64, normalize: bool) -> Result<Mlp> {
    if n_d == 0 || n_r == 0 {
        return Err(Error::Shape("layer sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        let dist = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
    };
    let w1 = draw(n_r, n_d);
    let w2 = draw(n_r, n_r);
    Ok(Mlp {
        w1,
        b1: Array1::zeros(n_r),
        w2,
        b2: Array1::zeros(n_r),
        norm: normalize.then(|| Normalization {
            mean: vec![0.0; n_d],
            std: vec![1.0; n_d],
        }),
        seed,
        routes: None,
    })
}

struct Activations {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

impl Mlp {
    pub fn n_d(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_r(&self) -> usize {
        self.w1.nrows()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.n_d() {
            return Err(Error::Shape(format!(
                "model expects {} demand entries, got {cols}",
                self.n_d()
            )));
        }
        Ok(())
    }

    fn activations(&self, x: &Array2<f64>) -> Activations {
        let input = match &self.norm {
            Some(n) => n.apply(x),
            None => x.clone(),
        };
        let pre = input.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        Activations {
            input,
            pre,
            hidden,
            out,
        }
    }

    /// Route-flow prediction for one demand vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let batch = ArrayView1::from(x).insert_axis(Axis(0)).to_owned();
        Ok(self.activations(&batch).out.row(0).to_vec())
    }

    /// Predictions for every row of `x`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.activations(x).out)
    }

    pub fn ensure_routes(&self, rs: &RouteSet) -> Result<()> {
        if self.n_r() != rs.len() {
            return Err(Error::Shape(format!(
                "model predicts {} routes, route set has {}",
                self.n_r(),
                rs.len()
            )));
        }
        if let Some(b) = &self.routes {
            if b.routes_fingerprint != rs.fingerprint() {
                return Err(Error::Fingerprint {
                    what: "route set",
                    expected: b.routes_fingerprint.clone(),
                    found: rs.fingerprint().to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Training phase: phase 1 fits demand consistency only, phase 2 adds the
/// arc-flow term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    DemandOnly,
    Full,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::DemandOnly => 1,
            Phase::Full => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// `‖Δ_OD h − x‖²`
    pub l1: f64,
    /// `‖Δ_arc h − y‖²`
    pub l2: f64,
    /// The value being minimized in the given phase.
    pub total: f64,
}

impl LossValue {
    fn new(l1: f64, l2: f64, phase: Phase) -> Self {
        let total = match phase {
            Phase::DemandOnly => l1,
            Phase::Full => l1 + l2,
        };
        Self { l1, l2, total }
    }
}

/// Loss of one prediction.
pub fn loss(h: &[f64], x: &[f64], y: &[f64], rs: &RouteSet, phase: Phase) -> Result<LossValue> {
    if h.len() != rs.len() || x.len() != rs.num_od_pairs() || y.len() != rs.num_links() {
        return Err(Error::Shape("loss inputs do not match the route set".into()));
    }
    let sq = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let l1 = sq(rs.delta_od().mul_vec(h), x);
    let l2 = sq(rs.delta_arc().mul_vec(h), y);
    Ok(LossValue::new(l1, l2, phase))
}

/// Parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Dense incidence matrices used for batched loss evaluation.
#[derive(Debug, Clone)]
pub struct LossMatrices {
    od: Array2<f64>,
    arc: Array2<f64>,
}

impl LossMatrices {
    pub fn new(rs: &RouteSet) -> Self {
        Self {
            od: rs.delta_od().to_dense(),
            arc: rs.delta_arc().to_dense(),
        }
    }
}

/// Mean loss over the rows of `(x, y)` and its gradient.
pub fn loss_and_gradients(
    model: &Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    mats: &LossMatrices,
    phase: Phase,
) -> Result<(LossValue, Gradients)> {
    model.check_input(x.ncols())?;
    let n = x.nrows();
    if n == 0 || y.nrows() != n || y.ncols() != mats.arc.nrows() || mats.od.ncols() != model.n_r() {
        return Err(Error::Shape("batch does not match the model or route set".into()));
    }
    let act = model.activations(x);
    let od_res = act.out.dot(&mats.od.t()) - x;
    let arc_res = act.out.dot(&mats.arc.t()) - y;
    let scale = 1.0 / n as f64;
    let l1 = od_res.iter().map(|v| v * v).sum::<f64>() * scale;
    let l2 = arc_res.iter().map(|v| v * v).sum::<f64>() * scale;
    let value = LossValue::new(l1, l2, phase);

    let mut g_out = od_res.dot(&mats.od);
    if phase == Phase::Full {
        g_out += &arc_res.dot(&mats.arc);
    }
    g_out *= 2.0 * scale;
    let w2 = g_out.t().dot(&act.hidden);
    let b2 = g_out.sum_axis(Axis(0));
    let mut g_pre = g_out.dot(&model.w2);
    g_pre.zip_mut_with(&act.pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = g_pre.t().dot(&act.input);
    let b1 = g_pre.sum_axis(Axis(0));
    Ok((value, Gradients { w1, b1, w2, b2 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    /// Decoupled weight decay followed by a bias-corrected Adam step; `t`
    /// counts steps from 1.
    pub fn step(&self, t: u64, params: &mut [f64], grads: &[f64], state: &mut Moments) {
        assert_eq!(params.len(), grads.len());
        if state.m.len() != params.len() {
            state.m = vec![0.0; params.len()];
            state.v = vec![0.0; params.len()];
        }
        let t = i32::try_from(t).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *p -= self.lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    t: u64,
    moments: [Moments; 4],
}

impl OptimizerState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}


/// One optimizer update on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    mats: &LossMatrices,
    phase: Phase,
    opt: &AdamW,
    state: &mut OptimizerState,
) -> Result<LossValue> {
    let (value, g) = loss_and_gradients(model, x, y, mats, phase)?;
    if !value.total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", value.total)));
    }
    state.t += 1;
    let t = state.t;
    let [m0, m1, m2, m3] = &mut state.moments;
    opt.step(t, slice_mut(&mut model.w1), &g.w1.iter().copied().collect::<Vec<_>>(), m0);
    opt.step(t, slice_mut(&mut model.b1), &g.b1.iter().copied().collect::<Vec<_>>(), m1);
    opt.step(t, slice_mut(&mut model.w2), &g.w2.iter().copied().collect::<Vec<_>>(), m2);
    opt.step(t, slice_mut(&mut model.b2), &g.b2.iter().copied().collect::<Vec<_>>(), m3);
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Seeds mini-batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 {
            return Err(Error::Config(format!("epochs must be >= 2, got {}", self.epochs)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// First epoch (0-based) trained on the full loss.
    pub fn switch_epoch(&self) -> usize {
        self.epochs / 2
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.switch_epoch() {
            Phase::DemandOnly
        } else {
            Phase::Full
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub switch_epoch: usize,
    pub threads: usize,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,l1,l2,total\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{:e},{:e},{:e}\n", r.epoch, r.phase, r.l1, r.l2, r.total));
        }
        out
    }
}

/// Trains on `samples`. Losses in the history are batch means taken before
/// each update, averaged over the epoch's batches.
pub fn train(model: &mut Mlp, samples: &Samples, rs: &RouteSet, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if samples.network_fingerprint != rs.network_fingerprint() {
        return Err(Error::Fingerprint {
            what: "network",
            expected: rs.network_fingerprint().to_string(),
            found: samples.network_fingerprint.clone(),
        });
    }
    model.ensure_routes(rs)?;
    if samples.is_empty() {
        return Err(Error::Shape("no training rows".into()));
    }
    if model.norm.is_some() {
        model.norm = Some(Normalization::fit(&samples.x)?);
    }
    model.routes = Some(RouteBinding {
        network_fingerprint: rs.network_fingerprint().to_string(),
        routes_fingerprint: rs.fingerprint().to_string(),
        k_bound: rs.k_bound(),
    });

    let mats = LossMatrices::new(rs);
    let opt = cfg.optimizer();
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = samples.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History {
        switch_epoch: cfg.switch_epoch(),
        threads: 1,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let phase = cfg.phase(epoch);
        let (mut l1, mut l2, mut total) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let step = if batch < n {
                let (bx, by) = (samples.x.select(Axis(0), chunk), samples.y.select(Axis(0), chunk));
                train_step(model, &bx, &by, &mats, phase, &opt, &mut state)
            } else {
                train_step(model, &samples.x, &samples.y, &mats, phase, &opt, &mut state)
            };
            let v = step.map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            l1 += v.l1;
            l2 += v.l2;
            total += v.total;
            batches += 1;
        }
        let b = batches as f64;
        history.epochs.push(EpochRecord {
            epoch,
            phase: phase.number(),
            l1: l1 / b,
            l2: l2 / b,
            total: total / b,
        });
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    n_d: usize,
    n_r: usize,
    seed: u64,
    routes: Option<RouteBinding>,
    norm: Option<Normalization>,
    w1: DenseMatrix,
    b1: Vec<f64>,
    w2: DenseMatrix,
    b2: Vec<f64>,
}

impl Mlp {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            n_d: self.n_d(),
            n_r: self.n_r(),
            seed: self.seed,
            routes: self.routes.clone(),
            norm: self.norm.clone(),
            w1: DenseMatrix::from_array(&self.w1),
            b1: self.b1.to_vec(),
            w2: DenseMatrix::from_array(&self.w2),
            b2: self.b2.to_vec(),
        };
        io::write_json(path, &file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = io::read_json(path)?;
        io::check_format(&file.format, MODEL_FORMAT)?;
        let (n_d, n_r) = (file.n_d, file.n_r);
        let w1 = file.w1.into_array()?;
        let w2 = file.w2.into_array()?;
        let ok = w1.dim() == (n_r, n_d)
            && w2.dim() == (n_r, n_r)
            && file.b1.len() == n_r
            && file.b2.len() == n_r
            && file
                .norm
                .as_ref()
                .is_none_or(|nm| nm.mean.len() == n_d && nm.std.len() == n_d && nm.std.iter().all(|&s| s > 0.0));
        if !ok {
            return Err(Error::Validation("model blocks do not match the declared sizes".into()));
        }
        Ok(Self {
            w1,
            b1: Array1::from(file.b1),
            w2,
            b2: Array1::from(file.b2),
            norm: file.norm,
            seed: file.seed,
            routes: file.routes,
        })
    }
}

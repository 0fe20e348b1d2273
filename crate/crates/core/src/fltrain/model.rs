//! Loss functions and gradients of the supported models.
//!
//! Parameters are one flat vector. Classification weights are stored one
//! class per row (`classes × dims`), followed by biases where the model has
//! them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::datagen::{Dataset, Targets};

use super::TrainError;

/// Default width of the hidden layer.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// `½(y − wᵀx)²`, no intercept.
    LinearRegression,
    /// One-vs-rest `λ/2‖w‖² + ½max(0, 1 − y·wᵀx)²` per class.
    SquaredSvm { lambda: f64 },
    /// Multinomial softmax with cross-entropy.
    LogisticRegression,
    /// One hidden ReLU layer, softmax output, cross-entropy.
    Mlp { hidden: usize },
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::LinearRegression => write!(f, "linear"),
            ModelKind::SquaredSvm { lambda } => write!(f, "svm({lambda})"),
            ModelKind::LogisticRegression => write!(f, "logistic"),
            ModelKind::Mlp { hidden } => write!(f, "mlp({hidden})"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = TrainError;

    /// `linear`, `svm(λ)`, `logistic`, `mlp` or `mlp(hidden)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrainError::Config(format!("cannot parse model {s:?}"));
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once('(') {
            Some((n, rest)) => (n.trim().to_string(), Some(rest.strip_suffix(')').ok_or_else(bad)?.trim().to_string())),
            None => (lower.clone(), None),
        };
        match (name.as_str(), arg) {
            ("linear", None) => Ok(ModelKind::LinearRegression),
            ("logistic", None) => Ok(ModelKind::LogisticRegression),
            ("svm", Some(a)) => Ok(ModelKind::SquaredSvm { lambda: a.parse().map_err(|_| bad())? }),
            ("mlp", None) => Ok(ModelKind::Mlp { hidden: DEFAULT_HIDDEN }),
            ("mlp", Some(a)) => Ok(ModelKind::Mlp { hidden: a.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

/// A model kind bound to input and output sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: usize,
    /// Number of classes; ignored for regression.
    pub classes: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Replaces logits by probabilities and returns `log Σ exp`.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(kind: ModelKind, dims: usize, classes: usize) -> Result<Self, TrainError> {
        if dims == 0 {
            return Err(TrainError::Config("model needs at least one input feature".into()));
        }
        match kind {
            ModelKind::LinearRegression => {}
            ModelKind::SquaredSvm { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                return Err(TrainError::Config(format!("svm lambda must be nonnegative, got {lambda}")));
            }
            ModelKind::Mlp { hidden: 0 } => {
                return Err(TrainError::Config("mlp needs a nonempty hidden layer".into()));
            }
            _ if classes < 2 => {
                return Err(TrainError::Config(format!("classifier needs at least 2 classes, got {classes}")));
            }
            _ => {}
        }
        Ok(Self { kind, dims, classes })
    }

    pub fn parameter_count(&self) -> usize {
        let (d, c) = (self.dims, self.classes);
        match self.kind {
            ModelKind::LinearRegression => d,
            ModelKind::SquaredSvm { .. } => c * d,
            ModelKind::LogisticRegression => c * d + c,
            ModelKind::Mlp { hidden } => hidden * d + hidden + c * hidden + c,
        }
    }

    /// Zeros for the convex models; Glorot-uniform weights and zero biases
    /// for the network.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = vec![0.0; self.parameter_count()];
        if let ModelKind::Mlp { hidden } = self.kind {
            let (d, c) = (self.dims, self.classes);
            let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
            let l1 = glorot(d, hidden);
            for v in &mut w[..hidden * d] {
                *v = rng.random_range(-l1..l1);
            }
            let l2 = glorot(hidden, c);
            let start = hidden * d + hidden;
            for v in &mut w[start..start + c * hidden] {
                *v = rng.random_range(-l2..l2);
            }
        }
        w
    }

    pub fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        if data.dims != self.dims {
            return Err(TrainError::Config(format!("model expects {} features, data has {}", self.dims, data.dims)));
        }
        match (&self.kind, &data.targets) {
            (ModelKind::LinearRegression, Targets::Values(_)) => Ok(()),
            (ModelKind::LinearRegression, Targets::Labels { .. }) => {
                Err(TrainError::Config("linear regression needs real-valued targets".into()))
            }
            (_, Targets::Labels { classes, .. }) if *classes <= self.classes => Ok(()),
            (_, Targets::Labels { classes, .. }) => {
                Err(TrainError::Config(format!("data has {classes} classes, model only {}", self.classes)))
            }
            (_, Targets::Values(_)) => Err(TrainError::Config("classifier needs class labels".into())),
        }
    }

    /// Mean loss over `rows` (all rows when `None`).
    pub fn loss(&self, w: &[f64], data: &Dataset, rows: Option<&[usize]>) -> f64 {
        self.eval(w, data, rows, None)
    }

    /// Mean loss and its gradient over `rows` (all rows when `None`).
    pub fn loss_grad(&self, w: &[f64], data: &Dataset, rows: Option<&[usize]>) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; w.len()];
        let loss = self.eval(w, data, rows, Some(&mut grad));
        (loss, grad)
    }

    /// Fraction of rows whose predicted class matches the label; `None` for
    /// regression.
    pub fn accuracy(&self, w: &[f64], data: &Dataset) -> Option<f64> {
        let labels = data.labels()?;
        if labels.is_empty() {
            return None;
        }
        let mut scratch = vec![0.0; self.classes];
        let mut hidden = Vec::new();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| {
                self.logits(w, data.row(*i), &mut scratch, &mut hidden);
                argmax(&scratch) == y
            })
            .count();
        Some(correct as f64 / labels.len() as f64)
    }

    /// Class scores of one input; `hidden` receives the post-ReLU activations.
    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64], hidden: &mut Vec<f64>) {
        let (d, c) = (self.dims, self.classes);
        match self.kind {
            ModelKind::LinearRegression => out[0] = dot(w, x),
            ModelKind::SquaredSvm { .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::LogisticRegression => {
                let bias = &w[c * d..];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(&w[k * d..(k + 1) * d], x) + bias[k];
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden.clear();
                hidden.extend((0..h).map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).max(0.0)));
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(&w2[k * h..(k + 1) * h], hidden) + b2[k];
                }
            }
        }
    }

    fn eval(&self, w: &[f64], data: &Dataset, rows: Option<&[usize]>, mut grad: Option<&mut Vec<f64>>) -> f64 {
        assert_eq!(w.len(), self.parameter_count(), "parameter vector has the wrong length");
        let n = rows.map_or(data.len(), <[usize]>::len);
        if n == 0 {
            return 0.0;
        }
        let (d, c) = (self.dims, self.classes);
        let scale = 1.0 / n as f64;
        let mut total = 0.0;
        let mut z = vec![0.0; c.max(1)];
        let mut hidden = Vec::new();
        let mut back = Vec::new();
        for t in 0..n {
            let i = rows.map_or(t, |r| r[t]);
            let x = data.row(i);
            self.logits(w, x, &mut z, &mut hidden);
            match (&self.kind, &data.targets) {
                (ModelKind::LinearRegression, Targets::Values(y)) => {
                    let r = z[0] - y[i];
                    total += 0.5 * r * r;
                    if let Some(g) = grad.as_deref_mut() {
                        axpy(scale * r, x, g);
                    }
                }
                (ModelKind::SquaredSvm { .. }, Targets::Labels { labels, .. }) => {
                    for (k, &m) in z.iter().enumerate() {
                        let s = if k == labels[i] { 1.0 } else { -1.0 };
                        let slack = (1.0 - s * m).max(0.0);
                        total += 0.5 * slack * slack;
                        if slack > 0.0 {
                            if let Some(g) = grad.as_deref_mut() {
                                axpy(-scale * s * slack, x, &mut g[k * d..(k + 1) * d]);
                            }
                        }
                    }
                }
                (ModelKind::LogisticRegression | ModelKind::Mlp { .. }, Targets::Labels { labels, .. }) => {
                    let y = labels[i];
                    let logit_y = z[y];
                    total += softmax(&mut z) - logit_y;
                    let Some(g) = grad.as_deref_mut() else { continue };
                    z[y] -= 1.0;
                    match self.kind {
                        ModelKind::LogisticRegression => {
                            for (k, &dz) in z.iter().enumerate() {
                                axpy(scale * dz, x, &mut g[k * d..(k + 1) * d]);
                                g[c * d + k] += scale * dz;
                            }
                        }
                        ModelKind::Mlp { hidden: h } => {
                            let w2 = &w[h * d + h..h * d + h + c * h];
                            back.clear();
                            back.resize(h, 0.0);
                            let (g1, rest) = g.split_at_mut(h * d);
                            let (gb1, rest) = rest.split_at_mut(h);
                            let (g2, gb2) = rest.split_at_mut(c * h);
                            for (k, &dz) in z.iter().enumerate() {
                                axpy(scale * dz, &hidden, &mut g2[k * h..(k + 1) * h]);
                                gb2[k] += scale * dz;
                                axpy(dz, &w2[k * h..(k + 1) * h], &mut back);
                            }
                            for j in 0..h {
                                if hidden[j] > 0.0 {
                                    axpy(scale * back[j], x, &mut g1[j * d..(j + 1) * d]);
                                    gb1[j] += scale * back[j];
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                _ => panic!("model and data targets do not match; call check_data first"),
            }
        }
        let mut loss = total * scale;
        if let ModelKind::SquaredSvm { lambda } = self.kind {
            loss += 0.5 * lambda * dot(w, w);
            if let Some(g) = grad {
                axpy(lambda, w, g);
            }
        }
        loss
    }
}

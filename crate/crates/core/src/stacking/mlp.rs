use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::{Optimizer, StackingError, TrainConfig};
use crate::exec;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fully connected network with ReLU hidden layers and a linear output.
///
/// Parameters live in one flat vector. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l+1]` outputs and stores its weights row-major (`out × in`)
/// followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTraining {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        MlpModel { sizes, params }
    }

    /// Rebuilds a model from layer sizes and a flat parameter vector.
    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self, StackingError> {
        if sizes.len() < 2 {
            return Err(StackingError::Codec("mlp needs at least input and output sizes".into()));
        }
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(StackingError::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(MlpModel { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.sizes.len());
        let mut acc = 0;
        off.push(0);
        for w in self.sizes.windows(2) {
            acc += w[0] * w[1] + w[1];
            off.push(acc);
        }
        off
    }

    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let offs = self.layer_offsets();
        let last = self.sizes.len() - 2;
        let mut a = row.to_vec();
        for (l, &off) in offs.iter().enumerate().take(last + 1) {
            let mut z = self.affine(l, off, &a);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    fn affine(&self, l: usize, off: usize, input: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (0..n_out)
            .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// Mean squared error over every entry of `x`/`y` rows.
    pub fn loss(&self, x: &Matrix, y: &Matrix) -> f64 {
        let rows: Vec<usize> = (0..x.rows()).collect();
        self.loss_rows(x, y, &rows)
    }

    fn loss_rows(&self, x: &Matrix, y: &Matrix, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let sse: f64 = rows
            .iter()
            .map(|&r| {
                self.predict_row(x.row(r))
                    .iter()
                    .zip(y.row(r))
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .sum();
        sse / (rows.len() * self.output_dim()) as f64
    }

    /// Analytic gradient of [`MlpModel::loss`] with respect to the flat
    /// parameter vector, without dropout.
    pub fn gradient(&self, x: &Matrix, y: &Matrix) -> Vec<f64> {
        let rows: Vec<usize> = (0..x.rows()).collect();
        self.loss_and_gradient(x, y, &rows, None).1
    }

    // Backprop over `rows`. With `dropout = Some((p, rng))` hidden
    // activations get an inverted-dropout mask.
    fn loss_and_gradient(
        &self,
        x: &Matrix,
        y: &Matrix,
        rows: &[usize],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (f64, Vec<f64>) {
        let offs = self.layer_offsets();
        let n_layers = self.sizes.len() - 1;
        let denom = (rows.len() * self.output_dim()) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut sse = 0.0;

        for &r in rows {
            // acts[l] is the (post-dropout) input to layer l, pre[l] its pre-activation.
            let mut acts: Vec<Vec<f64>> = vec![x.row(r).to_vec()];
            let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let z = self.affine(l, offs[l], &acts[l]);
                if l + 1 < n_layers {
                    let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
                    if let Some((p, rng)) = dropout.as_mut() {
                        let keep = 1.0 - *p;
                        for v in a.iter_mut() {
                            *v = if rng.random::<f64>() < keep { *v / keep } else { 0.0 };
                        }
                    }
                    pre.push(z);
                    acts.push(a);
                } else {
                    pre.push(z.clone());
                    acts.push(z);
                }
            }
            let out = acts.last().unwrap();
            let mut delta: Vec<f64> = out
                .iter()
                .zip(y.row(r))
                .map(|(p, t)| {
                    sse += (p - t).powi(2);
                    2.0 * (p - t) / denom
                })
                .collect();

            for l in (0..n_layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let off = offs[l];
                let input = &acts[l];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                    grad[off + n_in * n_out + o] += d;
                }
                if l == 0 {
                    break;
                }
                let w = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (i, p) in prev.iter_mut().enumerate() {
                        *p += d * w[o * n_in + i];
                    }
                }
                // Through dropout (activation / pre-activation ratio carries the
                // mask scale) and the ReLU.
                for (i, p) in prev.iter_mut().enumerate() {
                    let z = pre[l - 1][i];
                    *p = if z > 0.0 { *p * acts[l][i] / z } else { 0.0 };
                }
                delta = prev;
            }
        }
        (sse / denom, grad)
    }

    fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.sizes.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }
}

/// Fits on `(xt, yt)` and early-stops on `(xv, yv)`. With an empty validation
/// set the training loss is monitored instead.
pub(crate) fn fit_with_validation(
    xt: &Matrix,
    yt: &Matrix,
    xv: &Matrix,
    yv: &Matrix,
    cfg: &TrainConfig,
    hidden: &[usize],
) -> Result<MlpTraining, StackingError> {
    cfg.validate()?;
    if hidden.contains(&0) {
        return Err(StackingError::InvalidConfig("hidden layer width must be >= 1".into()));
    }
    let n = xt.rows();
    if n == 0 {
        return Err(StackingError::InsufficientRows { needed: 1, got: 0 });
    }
    for (a, b) in [(xt, yt), (xv, yv)] {
        if a.rows() != b.rows() {
            return Err(StackingError::DimensionMismatch {
                expected: a.rows(),
                actual: b.rows(),
            });
        }
    }
    if xv.rows() > 0 && (xv.cols() != xt.cols() || yv.cols() != yt.cols()) {
        return Err(StackingError::DimensionMismatch {
            expected: xt.cols(),
            actual: xv.cols(),
        });
    }
    if !xt.is_finite() || !yt.is_finite() || !xv.is_finite() || !yv.is_finite() {
        return Err(StackingError::NonFiniteInput);
    }

    let mut model = MlpModel::init(xt.cols(), hidden, yt.cols(), exec::derive_seed(cfg.seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(exec::derive_seed(cfg.seed, 2));
    let decay_mask = model.weight_mask();
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut step: i32 = 0;
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();

    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let drop = (cfg.dropout_rate > 0.0).then_some((cfg.dropout_rate, &mut rng));
            let (loss, mut g) = model.loss_and_gradient(xt, yt, chunk, drop);
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(StackingError::NonFiniteLoss { epoch });
            }
            if cfg.decay > 0.0 {
                for ((gi, p), is_w) in g.iter_mut().zip(&model.params).zip(&decay_mask) {
                    if *is_w {
                        *gi += cfg.decay * p;
                    }
                }
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, gi) in model.params.iter_mut().zip(&g) {
                        *p -= cfg.learning_rate * gi;
                    }
                }
                Optimizer::Adam => {
                    step += 1;
                    let c1 = 1.0 - ADAM_BETA1.powi(step);
                    let c2 = 1.0 - ADAM_BETA2.powi(step);
                    for i in 0..g.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        model.params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(StackingError::NonFiniteLoss { epoch });
            }
            train_sum += loss;
            batches += 1;
        }
        let train_loss = train_sum / batches as f64;
        let val_loss = if xv.rows() > 0 { model.loss(xv, yv) } else { model.loss(xt, yt) };
        if !val_loss.is_finite() {
            return Err(StackingError::NonFiniteLoss { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok(MlpTraining {
        model: best,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            dropout_rate: 0.0,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parameter_count() {
        let m = MlpModel::init(5, &[3], 2, 0);
        assert_eq!(m.params().len(), 5 * 3 + 3 + 3 * 2 + 2);
        assert!(MlpModel::from_parts(vec![5, 3, 2], vec![0.0; 26]).is_ok());
        assert!(MlpModel::from_parts(vec![5, 3, 2], vec![0.0; 25]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = Matrix::from_vec(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut m = MlpModel::init(5, &[3], 2, 9);
        // Non-zero biases keep pre-activations away from the ReLU kink.
        let n = m.params().len();
        for p in &mut m.params_mut()[15..18] {
            *p = 0.3;
        }
        let g = m.gradient(&x, &y);
        let h = 1e-6;
        assert_eq!(g.len(), n);
        for (i, &gi) in g.iter().enumerate() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let lp = m.loss(&x, &y);
            m.params_mut()[i] = orig - h;
            let lm = m.loss(&x, &y);
            m.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {gi}");
        }
    }

    #[test]
    fn linear_network_fits_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 120;
        let xs: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_vec(rows, 2, xs);
        let y = Matrix::from_vec(
            rows,
            1,
            x.iter_rows().map(|r| 0.7 * r[0] - 0.4 * r[1] + 0.2).collect(),
        );
        let (xt, xv) = (x.select_rows(&(0..96).collect::<Vec<_>>()), x.select_rows(&(96..120).collect::<Vec<_>>()));
        let (yt, yv) = (y.select_rows(&(0..96).collect::<Vec<_>>()), y.select_rows(&(96..120).collect::<Vec<_>>()));
        let c = TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.05,
            ..cfg()
        };
        let t = fit_with_validation(&xt, &yt, &xv, &yv, &c, &[]).unwrap();
        assert!(t.model.loss(&xv, &yv) < 1e-3);
    }

    #[test]
    fn divergence_is_reported() {
        let x = Matrix::from_rows(&(0..10).map(|i| vec![i as f64 * 100.0]).collect::<Vec<_>>());
        let y = Matrix::from_rows(&(0..10).map(|i| vec![i as f64 * 1e4]).collect::<Vec<_>>());
        let c = TrainConfig {
            learning_rate: 10.0,
            epochs: 50,
            early_stop_patience: 0,
            ..cfg()
        };
        assert!(matches!(
            fit_with_validation(&x, &y, &x, &y, &c, &[]),
            Err(StackingError::NonFiniteLoss { .. })
        ));
    }
}

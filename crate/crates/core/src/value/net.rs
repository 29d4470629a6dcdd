//! Five-layer feed-forward value network with batch normalization, trained
//! with Adam on mean squared error. Forward and backward passes are written
//! out by hand over `ndarray`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HIDDEN: usize = 128;
pub const HIDDEN_LAYERS: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UBVN";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Architecture {
    pub fn new(input_dim: usize) -> Self {
        Architecture { input_dim, hidden: HIDDEN, hidden_layers: HIDDEN_LAYERS }
    }

    /// Hidden layers carry no bias (batch norm supplies the shift); the
    /// output layer has one.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        self.input_dim * h + (self.hidden_layers - 1) * h * h + self.hidden_layers * 2 * h + h + 1
    }
}

#[derive(Clone, Debug)]
struct Layout {
    /// `(offset, rows, cols)` of each hidden weight matrix.
    weights: Vec<(usize, usize, usize)>,
    bn_gamma: Vec<usize>,
    bn_beta: Vec<usize>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut off = 0;
        let mut weights = Vec::new();
        let mut bn_gamma = Vec::new();
        let mut bn_beta = Vec::new();
        for l in 0..a.hidden_layers {
            let rows = if l == 0 { a.input_dim } else { a.hidden };
            weights.push((off, rows, a.hidden));
            off += rows * a.hidden;
            bn_gamma.push(off);
            off += a.hidden;
            bn_beta.push(off);
            off += a.hidden;
        }
        let out_w = off;
        off += a.hidden;
        let out_b = off;
        Layout { weights, bn_gamma, bn_beta, out_w, out_b }
    }
}

struct LayerCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre_relu: Array2<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    last: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    architecture: Architecture,
    gamma: f64,
    seed: u64,
    param_count: usize,
    bn_eps: f64,
    bn_momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub arch: Architecture,
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    /// Discount the training labels were generated with.
    pub gamma: f64,
    pub seed: u64,
}

fn view2<'a>(p: &'a [f64], (off, r, c): (usize, usize, usize)) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("layout fits")
}

fn view1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

impl ValueNet {
    /// He-normal initialization.
    pub fn new(input_dim: usize, gamma: f64, seed: u64) -> Self {
        let arch = Architecture::new(input_dim);
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(off, rows, cols) in &layout.weights {
            let n = Normal::new(0.0, (2.0 / rows as f64).sqrt()).unwrap();
            for v in &mut params[off..off + rows * cols] {
                *v = n.sample(&mut rng);
            }
        }
        for &g in &layout.bn_gamma {
            params[g..g + arch.hidden].fill(1.0);
        }
        let n = Normal::new(0.0, (1.0 / arch.hidden as f64).sqrt()).unwrap();
        for v in &mut params[layout.out_w..layout.out_w + arch.hidden] {
            *v = n.sample(&mut rng);
        }
        ValueNet {
            arch,
            params,
            running_mean: vec![vec![0.0; arch.hidden]; arch.hidden_layers],
            running_var: vec![vec![1.0; arch.hidden]; arch.hidden_layers],
            gamma,
            seed,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: Vec<f64>) {
        assert_eq!(p.len(), self.arch.param_count());
        self.params = p;
    }

    /// Named ranges of the flat parameter vector.
    pub fn param_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let l = Layout::new(&self.arch);
        let h = self.arch.hidden;
        let mut out = Vec::new();
        for (k, &(off, rows, cols)) in l.weights.iter().enumerate() {
            out.push((format!("w{k}"), off..off + rows * cols));
            out.push((format!("bn_gamma{k}"), l.bn_gamma[k]..l.bn_gamma[k] + h));
            out.push((format!("bn_beta{k}"), l.bn_beta[k]..l.bn_beta[k] + h));
        }
        out.push(("out_w".into(), l.out_w..l.out_w + h));
        out.push(("out_b".into(), l.out_b..l.out_b + 1));
        out
    }

    fn check_dim(&self, x: &ArrayView2<f64>) -> Result<(), NetError> {
        if x.ncols() != self.arch.input_dim {
            return Err(NetError::InputDim { expected: self.arch.input_dim, got: x.ncols() });
        }
        Ok(())
    }

    /// Inference: running statistics, no state change.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
        self.check_dim(&x)?;
        let layout = Layout::new(&self.arch);
        let p = &self.params;
        let h = self.arch.hidden;
        let mut a = x.to_owned();
        for l in 0..self.arch.hidden_layers {
            let mut z = a.dot(&view2(p, layout.weights[l]));
            let g = view1(p, layout.bn_gamma[l], h);
            let b = view1(p, layout.bn_beta[l], h);
            for mut row in z.rows_mut() {
                for j in 0..h {
                    let xh = (row[j] - self.running_mean[l][j]) / (self.running_var[l][j] + BN_EPS).sqrt();
                    row[j] = (g[j] * xh + b[j]).max(0.0);
                }
            }
            a = z;
        }
        let w = view1(p, layout.out_w, h);
        let bias = p[layout.out_b];
        Ok(a.dot(&w).iter().map(|v| v + bias).collect())
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64, NetError> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.predict(v)?[0])
    }

    /// With `frozen`, normalization uses the running statistics (single-sample
    /// batches, where batch moments are degenerate).
    fn forward_train(&self, params: &[f64], x: ArrayView2<f64>, frozen: bool) -> (Array1<f64>, ForwardCache) {
        let layout = Layout::new(&self.arch);
        let h = self.arch.hidden;
        let bsz = x.nrows() as f64;
        let mut a = x.to_owned();
        let mut layers = Vec::with_capacity(self.arch.hidden_layers);
        for l in 0..self.arch.hidden_layers {
            let z = a.dot(&view2(params, layout.weights[l]));
            let (mean, var) = if frozen {
                (Array1::from(self.running_mean[l].clone()), Array1::from(self.running_var[l].clone()))
            } else {
                let mean = z.sum_axis(Axis(0)) / bsz;
                let var = (&z - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / bsz;
                (mean, var)
            };
            let centered = &z - &mean;
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = &centered * &inv_std;
            let g = view1(params, layout.bn_gamma[l], h);
            let b = view1(params, layout.bn_beta[l], h);
            let pre = &xhat * &g + &b;
            let next = pre.mapv(|v| v.max(0.0));
            layers.push(LayerCache { input: a, xhat, inv_std, pre_relu: pre, mean, var });
            a = next;
        }
        let out = a.dot(&view1(params, layout.out_w, h)) + params[layout.out_b];
        (out, ForwardCache { layers, last: a })
    }

    /// Training-mode MSE with batch statistics, at arbitrary parameters.
    pub fn loss_train(&self, params: &[f64], x: ArrayView2<f64>, t: &[f64]) -> f64 {
        let (out, _) = self.forward_train(params, x, false);
        out.iter().zip(t).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / t.len() as f64
    }

    /// Signs of every hidden pre-activation in training mode; used to detect
    /// ReLU kinks between finite-difference probes.
    pub fn relu_pattern(&self, params: &[f64], x: ArrayView2<f64>) -> Vec<bool> {
        let (_, cache) = self.forward_train(params, x, false);
        cache.layers.iter().flat_map(|c| c.pre_relu.iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect()
    }

    /// Training-mode loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, t: &[f64]) -> (f64, Vec<f64>) {
        let (loss, grad, _) = self.backward(x, t, false);
        (loss, grad)
    }

    fn backward(&self, x: ArrayView2<f64>, t: &[f64], frozen: bool) -> (f64, Vec<f64>, Vec<(Array1<f64>, Array1<f64>)>) {
        let layout = Layout::new(&self.arch);
        let p = &self.params;
        let h = self.arch.hidden;
        let (out, cache) = self.forward_train(p, x, frozen);
        let n = t.len() as f64;
        let diff: Array1<f64> = out.iter().zip(t).map(|(o, t)| o - t).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let dout = diff.mapv(|d| 2.0 * d / n);
        let mut grad = vec![0.0; p.len()];
        let dw_out = cache.last.t().dot(&dout);
        grad[layout.out_w..layout.out_w + h].copy_from_slice(dw_out.as_slice().unwrap());
        grad[layout.out_b] = dout.sum();
        let w_out = view1(p, layout.out_w, h);
        let mut dh = Array2::from_shape_fn((t.len(), h), |(i, j)| dout[i] * w_out[j]);
        for l in (0..self.arch.hidden_layers).rev() {
            let c = &cache.layers[l];
            let dy = &dh * &c.pre_relu.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let dg = (&dy * &c.xhat).sum_axis(Axis(0));
            let db = dy.sum_axis(Axis(0));
            let g = view1(p, layout.bn_gamma[l], h);
            let dxhat = &dy * &g;
            let dz = if frozen {
                &dxhat * &c.inv_std
            } else {
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
                (&(&(&dxhat * n) - &sum_dxhat) - &(&c.xhat * &sum_dxhat_xhat)) * &(&c.inv_std / n)
            };
            let dw = c.input.t().dot(&dz);
            let (off, rows, cols) = layout.weights[l];
            grad[off..off + rows * cols].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
            grad[layout.bn_gamma[l]..layout.bn_gamma[l] + h].copy_from_slice(dg.as_slice().unwrap());
            grad[layout.bn_beta[l]..layout.bn_beta[l] + h].copy_from_slice(db.as_slice().unwrap());
            if l > 0 {
                dh = dz.dot(&view2(p, layout.weights[l]).t());
            }
        }
        let stats = cache.layers.into_iter().map(|c| (c.mean, c.var)).collect();
        (loss, grad, stats)
    }

    /// Momentum update of the running statistics from biased batch moments.
    fn update_running_stats(&mut self, stats: &[(Array1<f64>, Array1<f64>)], batch: usize) {
        let b = batch as f64;
        for (l, (mean, var)) in stats.iter().enumerate() {
            for j in 0..self.arch.hidden {
                let unbiased = if batch > 1 { var[j] * b / (b - 1.0) } else { 0.0 };
                self.running_mean[l][j] = (1.0 - BN_MOMENTUM) * self.running_mean[l][j] + BN_MOMENTUM * mean[j];
                self.running_var[l][j] = (1.0 - BN_MOMENTUM) * self.running_var[l][j] + BN_MOMENTUM * unbiased;
            }
        }
    }

    /// Adam on minibatch MSE. Warm-starts from the current parameters.
    pub fn train(&mut self, x: ArrayView2<f64>, t: &[f64], cfg: &TrainConfig) -> Result<TrainReport, NetError> {
        self.check_dim(&x)?;
        if t.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let np = self.params.len();
        let mut m = vec![0.0; np];
        let mut v = vec![0.0; np];
        let mut step = 0i32;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..t.len()).collect();
        let bs = cfg.batch_size.max(1);
        let mut report = TrainReport::default();
        let mut xb = Array2::<f64>::zeros((bs, self.arch.input_dim));
        let mut tb = vec![0.0; bs];
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in order.chunks(bs) {
                let rows = chunk.len();
                for (r, &i) in chunk.iter().enumerate() {
                    xb.row_mut(r).assign(&x.row(i));
                    tb[r] = t[i];
                }
                let xv = xb.slice(ndarray::s![..rows, ..]);
                // Batch statistics are undefined for a single sample.
                let frozen = rows < 2;
                let (loss, grad, stats) = self.backward(xv, &tb[..rows], frozen);
                if !frozen {
                    self.update_running_stats(&stats, rows);
                }
                if !loss.is_finite() {
                    return Err(NetError::Divergence { epoch, loss });
                }
                total += loss * rows as f64;
                count += rows;
                step += 1;
                let c1 = 1.0 - f64::powi(b1, step);
                let c2 = 1.0 - f64::powi(b2, step);
                for k in 0..np {
                    let g = grad[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    self.params[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
            let epoch_loss = if count > 0 { total / count as f64 } else { 0.0 };
            if !epoch_loss.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
                return Err(NetError::Divergence { epoch, loss: epoch_loss });
            }
            log::debug!("epoch {epoch}: loss {epoch_loss:.6e}");
            report.epoch_losses.push(epoch_loss);
        }
        self.round_to_f32();
        if t.len() > 1 {
            self.recalibrate(x);
            self.round_to_f32();
        }
        report.final_mse = self.mse(x, t)?;
        Ok(report)
    }

    /// Inference-mode MSE.
    pub fn mse(&self, x: ArrayView2<f64>, t: &[f64]) -> Result<f64, NetError> {
        let mut total = 0.0;
        for start in (0..t.len()).step_by(4096) {
            let end = (start + 4096).min(t.len());
            let pred = self.predict(x.slice(ndarray::s![start..end, ..]))?;
            total += pred.iter().zip(&t[start..end]).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        }
        Ok(total / t.len() as f64)
    }

    /// Snap every stored number to `f32` so checkpoints round-trip exactly.
    /// Replace the running statistics with the exact population moments of
    /// `x`, so inference on the training set matches full-batch training.
    pub fn recalibrate(&mut self, x: ArrayView2<f64>) {
        let layout = Layout::new(&self.arch);
        let p = &self.params;
        let n = x.nrows() as f64;
        let mut a = x.to_owned();
        for l in 0..self.arch.hidden_layers {
            let z = a.dot(&view2(p, layout.weights[l]));
            let mean = z.sum_axis(Axis(0)) / n;
            let var = (&z - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let g = view1(p, layout.bn_gamma[l], self.arch.hidden);
            let b = view1(p, layout.bn_beta[l], self.arch.hidden);
            a = (&(&(&z - &mean) * &inv_std) * &g + &b).mapv(|v| v.max(0.0));
            self.running_mean[l] = mean.to_vec();
            self.running_var[l] = var.to_vec();
        }
    }

    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.params.iter_mut().for_each(r);
        self.running_mean.iter_mut().flatten().for_each(r);
        self.running_var.iter_mut().flatten().for_each(r);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture: self.arch,
            gamma: self.gamma,
            seed: self.seed,
            param_count: self.params.len(),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let all = self.params.iter().chain(self.running_mean.iter().flatten()).chain(self.running_var.iter().flatten());
        for v in all {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hl = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + hl).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad("unsupported schema version"));
        }
        let arch = header.architecture;
        if header.param_count != arch.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        let floats = crate::io::f32_from_le_bytes(&bytes[8 + hl..])?;
        let stats = arch.hidden * arch.hidden_layers;
        if floats.len() != header.param_count + 2 * stats {
            return Err(bad("blob length does not match header"));
        }
        let f: Vec<f64> = floats.iter().map(|v| *v as f64).collect();
        let (params, rest) = f.split_at(header.param_count);
        let (rm, rv) = rest.split_at(stats);
        Ok(ValueNet {
            arch,
            params: params.to_vec(),
            running_mean: rm.chunks(arch.hidden).map(|c| c.to_vec()).collect(),
            running_var: rv.chunks(arch.hidden).map(|c| c.to_vec()).collect(),
            gamma: header.gamma,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NetError> {
        crate::io::write_text(path, "")?;
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::<f64>::from_shape_fn((n, dim), |_| nd.sample(&mut rng));
        let t = (0..n).map(|i| x[[i, 0]].tanh() * 0.5 + 0.5).collect();
        (x, t)
    }

    #[test]
    fn param_count_matches_layout() {
        let a = Architecture::new(130);
        assert_eq!(a.param_count(), 130 * 128 + 3 * 128 * 128 + 4 * 256 + 129);
        let l = Layout::new(&a);
        assert_eq!(l.out_b + 1, a.param_count());
    }

    #[test]
    fn memorizes_a_single_pair() {
        let mut net = ValueNet::new(8, 0.95, 1);
        let x = Array2::from_shape_vec((1, 8), (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let t = [0.9025];
        let cfg = TrainConfig { epochs: 200, lr: 1e-3, batch_size: 64, seed: 0 };
        net.train(x.view(), &t, &cfg).unwrap();
        let p = net.predict_one(x.row(0).as_slice().unwrap()).unwrap();
        assert!((p - 0.9025).abs() < 1e-3, "{p}");
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let (x, t) = toy(64, 10, 2);
        let cfg = TrainConfig { epochs: 3, lr: 1e-3, batch_size: 16, seed: 5 };
        let mut a = ValueNet::new(10, 0.95, 3);
        let mut b = ValueNet::new(10, 0.95, 3);
        let ra = a.train(x.view(), &t, &cfg).unwrap();
        let rb = b.train(x.view(), &t, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let back = ValueNet::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), a.to_bytes());
        assert!(ValueNet::from_bytes(b"nope").is_err());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let (x, mut t) = toy(8, 4, 1);
        t[3] = f64::NAN;
        let mut net = ValueNet::new(4, 0.95, 0);
        let cfg = TrainConfig { epochs: 2, lr: 1e-3, batch_size: 4, seed: 0 };
        assert!(matches!(net.train(x.view(), &t, &cfg), Err(NetError::Divergence { epoch: 0, .. })));
    }

    #[test]
    fn inference_is_independent_of_batch_composition() {
        let (x, _) = toy(5, 6, 4);
        let net = ValueNet::new(6, 0.95, 4);
        let all = net.predict(x.view()).unwrap();
        for i in 0..5 {
            assert_eq!(net.predict_one(x.row(i).to_vec().as_slice()).unwrap(), all[i]);
        }
    }
}

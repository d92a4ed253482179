//! A small frozen transformer classifier for exercising prompt training
//! end to end.
//!
//! The model is deliberately tiny and entirely seeded: token embeddings,
//! attention and feed-forward weights, and the classification head are all
//! drawn once from a config seed and never updated. Only the prepended
//! prompt rows receive gradients. The embedding distribution is given a
//! large per-dimension offset and uneven per-dimension spread, so a prompt
//! that can learn a shift and a scale has a concrete advantage over one
//! confined to a low-dimensional random subspace through the origin.
//!
//! Blocks are pre-norm with RMS normalization (no mean subtraction, so the
//! embedding offset survives normalization) and a tanh feed-forward, which
//! keeps the whole map smooth enough for finite-difference checking.

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{gaussian_matrix, matmul, Matrix, Vector};
use crate::numerics::rng::{Rng64, Seed};
use crate::reparam::assemble_input;
use crate::training::LossTask;

const RMS_EPS: f64 = 1e-6;
/// Token ids below this are reserved; class markers start here.
const MARKER_BASE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub seed: Seed,
}

impl ToyModelConfig {
    /// The standard desk-scale instance: 64-token vocabulary, width 32,
    /// two 2-head layers, sequence length 12, four classes.
    pub fn small(seed: Seed) -> ToyModelConfig {
        ToyModelConfig {
            vocab: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            seq_len: 12,
            n_classes: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return Err(UlptError::Config(
                "toy model dimensions must be positive".to_string(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(UlptError::Config(format!(
                "head count {} must divide the model width {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_classes < 2 {
            return Err(UlptError::Config(
                "classification needs at least two classes".to_string(),
            ));
        }
        let filler_lo = MARKER_BASE as usize + self.n_classes;
        if self.vocab <= filler_lo + 1 {
            return Err(UlptError::Config(format!(
                "vocabulary of {} leaves no filler tokens after {} reserved ids and {} markers",
                self.vocab, MARKER_BASE, self.n_classes
            )));
        }
        Ok(())
    }

    fn filler_range(&self) -> (u32, u32) {
        (MARKER_BASE + self.n_classes as u32, self.vocab as u32)
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// The frozen classifier. Construction is fully determined by the config;
/// nothing in here changes during prompt training.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    head: Matrix,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<ToyModel> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.seed;

        // Embedding rows are offset + spread + noise: entry (v, j) is
        // mu_j + sigma_j * g with mu_j ~ N(0, 9) and sigma_j log-uniform
        // over [e^-1, e^1]. The offset rewards a learnable shift; the
        // uneven spread rewards a learnable per-dimension scale.
        let mut dist_rng = Rng64::new(seed.derive(101));
        let mu: Vec<f64> = (0..d).map(|_| 3.0 * dist_rng.next_gaussian()).collect();
        let sigma: Vec<f64> = (0..d)
            .map(|_| dist_rng.next_range(-1.0, 1.0).exp())
            .collect();
        let mut embedding = gaussian_matrix(seed.derive(102), config.vocab, d, 1.0)?;
        for v in 0..config.vocab {
            for (j, e) in embedding.row_mut(v).iter_mut().enumerate() {
                *e = mu[j] + sigma[j] * *e;
            }
        }

        let layers = (0..config.n_layers)
            .map(|l| {
                let base = 1000 + 10 * l as u64;
                Ok(LayerWeights {
                    wq: gaussian_matrix(seed.derive(base), d, d, 1.0 / d as f64)?,
                    wk: gaussian_matrix(seed.derive(base + 1), d, d, 1.0 / d as f64)?,
                    wv: gaussian_matrix(seed.derive(base + 2), d, d, 1.0 / d as f64)?,
                    wo: gaussian_matrix(seed.derive(base + 3), d, d, 1.0 / d as f64)?,
                    w1: gaussian_matrix(seed.derive(base + 4), d, config.d_ff, 1.0 / d as f64)?,
                    w2: gaussian_matrix(
                        seed.derive(base + 5),
                        config.d_ff,
                        d,
                        1.0 / config.d_ff as f64,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let head = gaussian_matrix(seed.derive(200), d, config.n_classes, 1.0 / d as f64)?;

        Ok(ToyModel {
            config,
            embedding,
            layers,
            head,
        })
    }

    /// Order-sensitive fold over every frozen weight's bit pattern. Equal
    /// checksums before and after a training run certify the model never
    /// moved.
    pub fn weights_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        let mut fold = |slice: &[f64]| {
            for v in slice {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x100_0000_01b3);
            }
        };
        fold(self.embedding.as_slice());
        for layer in &self.layers {
            fold(layer.wq.as_slice());
            fold(layer.wk.as_slice());
            fold(layer.wv.as_slice());
            fold(layer.wo.as_slice());
            fold(layer.w1.as_slice());
            fold(layer.w2.as_slice());
        }
        fold(self.head.as_slice());
        acc
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut out = Matrix::zeros(tokens.len(), self.config.d_model);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab {
                return Err(UlptError::Config(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
            out.row_mut(i)
                .copy_from_slice(self.embedding.row(tok as usize));
        }
        Ok(out)
    }

    fn forward(&self, input: &Matrix) -> Result<ForwardCache> {
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for weights in &self.layers {
            let (u_attn, inv_attn) = rmsnorm_rows(&x);
            let attn = attention_forward(weights, &u_attn, self.config.n_heads)?;
            let h_mid = x.add(&attn.out)?;

            let (u_ffn, inv_ffn) = rmsnorm_rows(&h_mid);
            let a = matmul(&u_ffn, &weights.w1)?;
            let mut t = a;
            for v in t.as_mut_slice() {
                *v = v.tanh();
            }
            let y = matmul(&t, &weights.w2)?;
            let h_out = h_mid.add(&y)?;

            layers.push(LayerCache {
                x_in: x,
                inv_attn,
                attn,
                h_mid,
                inv_ffn,
                t,
            });
            x = h_out;
        }

        let t_rows = x.rows() as f64;
        let mut pooled = Vector::zeros(self.config.d_model);
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                pooled.as_mut_slice()[j] += v / t_rows;
            }
        }
        let mut logits = vec![0.0; self.config.n_classes];
        for (c, logit) in logits.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..self.config.d_model {
                acc += pooled[j] * self.head[(j, c)];
            }
            *logit = acc;
        }

        Ok(ForwardCache {
            layers,
            final_rows: x,
            logits,
        })
    }

    /// Pulls dL/d(logits) back to dL/d(input rows).
    fn backward(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<Matrix> {
        let d = self.config.d_model;
        let t_rows = cache.final_rows.rows();

        let mut d_pooled = vec![0.0; d];
        for (j, dp) in d_pooled.iter_mut().enumerate() {
            for (c, dl) in d_logits.iter().enumerate() {
                *dp += self.head[(j, c)] * dl;
            }
        }
        let mut d_x = Matrix::zeros(t_rows, d);
        let inv_t = 1.0 / t_rows as f64;
        for i in 0..t_rows {
            for (j, v) in d_x.row_mut(i).iter_mut().enumerate() {
                *v = d_pooled[j] * inv_t;
            }
        }

        for (weights, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward leg: h_out = h_mid + tanh(rms(h_mid) W1) W2.
            let d_t_pre = matmul(&d_x, &weights.w2.transposed())?;
            let mut d_a = d_t_pre;
            for (v, t) in d_a.as_mut_slice().iter_mut().zip(lc.t.as_slice()) {
                *v *= 1.0 - t * t;
            }
            let d_u_ffn = matmul(&d_a, &weights.w1.transposed())?;
            let d_h_mid_norm = rmsnorm_backward(&lc.h_mid, &lc.inv_ffn, &d_u_ffn);
            let d_h_mid = d_x.add(&d_h_mid_norm)?;

            // Attention leg: h_mid = x_in + Attn(rms(x_in)).
            let d_u_attn = attention_backward(weights, &lc.attn, &d_h_mid, self.config.n_heads)?;
            let d_x_norm = rmsnorm_backward(&lc.x_in, &lc.inv_attn, &d_u_attn);
            d_x = d_h_mid.add(&d_x_norm)?;
        }
        Ok(d_x)
    }
}

struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-stochastic attention matrices, one per head.
    a: Vec<Matrix>,
    out: Matrix,
}

struct LayerCache {
    x_in: Matrix,
    inv_attn: Vec<f64>,
    attn: AttnCache,
    h_mid: Matrix,
    inv_ffn: Vec<f64>,
    t: Matrix,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    final_rows: Matrix,
    logits: Vec<f64>,
}

/// RMS normalization without mean subtraction: each row is divided by
/// sqrt(mean of squares + eps). Returns the normalized rows and the per-row
/// inverse factors needed by the backward pass.
fn rmsnorm_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let cols = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols;
        let factor = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row {
            *v *= factor;
        }
        inv.push(factor);
    }
    (out, inv)
}

/// Adjoint of [`rmsnorm_rows`]: with g the inverse factor of a row,
/// d_x = g * d_y - (g^3 / cols) * (x . d_y) * x.
fn rmsnorm_backward(x: &Matrix, inv: &[f64], d_y: &Matrix) -> Matrix {
    let cols = x.cols() as f64;
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let g = inv[i];
        let xr = x.row(i);
        let dyr = d_y.row(i);
        let dot: f64 = xr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let coeff = g * g * g * dot / cols;
        for (j, v) in d_x.row_mut(i).iter_mut().enumerate() {
            *v = g * dyr[j] - coeff * xr[j];
        }
    }
    d_x
}

fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i)
            .copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn add_col_block(dst: &mut Matrix, src: &Matrix, start: usize) {
    for i in 0..src.rows() {
        for (j, v) in src.row(i).iter().enumerate() {
            dst[(i, start + j)] += v;
        }
    }
}

fn softmax_rows(s: &mut Matrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row {
            *v /= sum;
        }
    }
}

/// Multi-head self-attention over already-normalized rows, no masking.
fn attention_forward(weights: &LayerWeights, u: &Matrix, n_heads: usize) -> Result<AttnCache> {
    let d = u.cols();
    let d_h = d / n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let q = matmul(u, &weights.wq)?;
    let k = matmul(u, &weights.wk)?;
    let v = matmul(u, &weights.wv)?;
    let mut concat = Matrix::zeros(u.rows(), d);
    let mut a_heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = col_block(&q, h * d_h, d_h);
        let kh = col_block(&k, h * d_h, d_h);
        let vh = col_block(&v, h * d_h, d_h);
        let mut scores = matmul(&qh, &kh.transposed())?;
        for s in scores.as_mut_slice() {
            *s *= scale;
        }
        softmax_rows(&mut scores);
        let oh = matmul(&scores, &vh)?;
        add_col_block(&mut concat, &oh, h * d_h);
        a_heads.push(scores);
    }
    let out = matmul(&concat, &weights.wo)?;
    Ok(AttnCache {
        q,
        k,
        v,
        a: a_heads,
        out,
    })
}

/// Adjoint of [`attention_forward`] with respect to the normalized input
/// rows. The softmax Jacobian applied to d_A is A (d_A - rowsum(A o d_A)).
fn attention_backward(
    weights: &LayerWeights,
    cache: &AttnCache,
    d_out: &Matrix,
    n_heads: usize,
) -> Result<Matrix> {
    let d = cache.q.cols();
    let d_h = d / n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let d_concat = matmul(d_out, &weights.wo.transposed())?;
    let mut d_q = Matrix::zeros(cache.q.rows(), d);
    let mut d_k = Matrix::zeros(cache.q.rows(), d);
    let mut d_v = Matrix::zeros(cache.q.rows(), d);
    for h in 0..n_heads {
        let a = &cache.a[h];
        let qh = col_block(&cache.q, h * d_h, d_h);
        let kh = col_block(&cache.k, h * d_h, d_h);
        let vh = col_block(&cache.v, h * d_h, d_h);
        let d_oh = col_block(&d_concat, h * d_h, d_h);

        let mut d_a = matmul(&d_oh, &vh.transposed())?;
        let d_vh = matmul(&a.transposed(), &d_oh)?;
        // Softmax rows: d_s = a o (d_a - rowsum(a o d_a)).
        for i in 0..d_a.rows() {
            let ar = a.row(i);
            let dar = d_a.row_mut(i);
            let dot: f64 = ar.iter().zip(dar.iter()).map(|(x, y)| x * y).sum();
            for (v, x) in dar.iter_mut().zip(ar) {
                *v = x * (*v - dot);
            }
        }
        let mut d_qh = matmul(&d_a, &kh)?;
        for v in d_qh.as_mut_slice() {
            *v *= scale;
        }
        let mut d_kh = matmul(&d_a.transposed(), &qh)?;
        for v in d_kh.as_mut_slice() {
            *v *= scale;
        }
        add_col_block(&mut d_q, &d_qh, h * d_h);
        add_col_block(&mut d_k, &d_kh, h * d_h);
        add_col_block(&mut d_v, &d_vh, h * d_h);
    }
    let mut d_u = matmul(&d_q, &weights.wq.transposed())?;
    d_u = d_u.add(&matmul(&d_k, &weights.wk.transposed())?)?;
    d_u.add(&matmul(&d_v, &weights.wv.transposed())?)
}

/// Token sequences with class labels. Each sequence carries exactly one
/// marker token (id 4 + label) at a random position among filler tokens;
/// classes cycle so every dataset is balanced.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_dataset(config: &ToyModelConfig, count: usize, seed: Seed) -> Result<ToyDataset> {
    config.validate()?;
    if count == 0 {
        return Err(UlptError::Config(
            "dataset needs at least one example".to_string(),
        ));
    }
    let (filler_lo, filler_hi) = config.filler_range();
    let mut rng = Rng64::new(seed);
    let mut tokens = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % config.n_classes;
        let mut seq: Vec<u32> = (0..config.seq_len)
            .map(|_| filler_lo + rng.next_below((filler_hi - filler_lo) as u64) as u32)
            .collect();
        let pos = rng.next_below(config.seq_len as u64) as usize;
        seq[pos] = MARKER_BASE + label as u32;
        tokens.push(seq);
        labels.push(label);
    }
    Ok(ToyDataset { tokens, labels })
}

/// Prompt-training objective: mean cross-entropy of the frozen classifier
/// over a training batch, differentiated with respect to the prompt rows
/// prepended to every example.
pub struct ToyTask {
    model: ToyModel,
    train: ToyDataset,
    eval_set: ToyDataset,
}

impl ToyTask {
    pub fn new(model: ToyModel, train: ToyDataset, eval_set: ToyDataset) -> Result<ToyTask> {
        for set in [&train, &eval_set] {
            for (seq, &label) in set.tokens.iter().zip(&set.labels) {
                if seq.len() != model.config.seq_len {
                    return Err(UlptError::Config(format!(
                        "sequence length {} does not match the model's {}",
                        seq.len(),
                        model.config.seq_len
                    )));
                }
                if label >= model.config.n_classes {
                    return Err(UlptError::Config(format!(
                        "label {label} outside {} classes",
                        model.config.n_classes
                    )));
                }
            }
        }
        Ok(ToyTask {
            model,
            train,
            eval_set,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    fn forward_example(
        &self,
        e_hat: &Matrix,
        idx: usize,
        set: &ToyDataset,
    ) -> Result<ForwardCache> {
        let embedded = self.model.embed(&set.tokens[idx])?;
        let input = assemble_input(e_hat, &embedded)?;
        self.model.forward(&input)
    }

    /// Accuracy of the argmax prediction over a dataset.
    pub fn accuracy(&self, e_hat: &Matrix, set: &ToyDataset) -> Result<f64> {
        let mut correct = 0usize;
        for idx in 0..set.len() {
            let cache = self.forward_example(e_hat, idx, set)?;
            let pred = cache
                .logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(c, _)| c)
                .expect("at least one class");
            if pred == set.labels[idx] {
                correct += 1;
            }
        }
        Ok(correct as f64 / set.len() as f64)
    }
}

impl LossTask for ToyTask {
    /// Cross-entropy via the log-sum-exp identity: loss_i = lse(logits) -
    /// logit_label, with gradient (softmax - onehot) / batch.
    fn loss_and_grad(&mut self, e_hat: &Matrix) -> Result<(f64, Matrix)> {
        let batch = self.train.len() as f64;
        let n_prompt = e_hat.rows();
        let mut total = 0.0;
        let mut d_e = Matrix::zeros(e_hat.rows(), e_hat.cols());
        for idx in 0..self.train.len() {
            let cache = self.forward_example(e_hat, idx, &self.train)?;
            let label = self.train.labels[idx];
            let max = cache
                .logits
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = cache.logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - cache.logits[label];

            let mut d_logits: Vec<f64> = cache
                .logits
                .iter()
                .map(|l| (l - max).exp() / sum_exp / batch)
                .collect();
            d_logits[label] -= 1.0 / batch;
            let d_input = self.model.backward(&cache, &d_logits)?;
            for i in 0..n_prompt {
                for (j, v) in d_input.row(i).iter().enumerate() {
                    d_e[(i, j)] += v;
                }
            }
        }
        Ok((total / batch, d_e))
    }

    /// The same objective written as a probability: form the softmax
    /// distribution explicitly and average -ln p(label). Numerically
    /// independent of the log-sum-exp route above, so agreement between the
    /// two is a meaningful consistency check.
    fn loss(&mut self, e_hat: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for idx in 0..self.train.len() {
            let cache = self.forward_example(e_hat, idx, &self.train)?;
            let max = cache
                .logits
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = cache.logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            let p = weights[self.train.labels[idx]] / sum;
            total -= p.ln();
        }
        Ok(total / self.train.len() as f64)
    }

    fn eval(&mut self, e_hat: &Matrix) -> Result<Option<f64>> {
        self.accuracy(e_hat, &self.eval_set).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::gaussian_matrix;
    use crate::reparam::{Mode, PromptConfig};
    use crate::training::{train, LrPolicy, OptimizerConfig, TrainSettings};

    fn tiny_config(seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            seq_len: 4,
            n_classes: 2,
            seed: Seed(seed),
        }
    }

    fn tiny_task(seed: u64, train_n: usize, eval_n: usize) -> ToyTask {
        let config = tiny_config(seed);
        let model = ToyModel::new(config).unwrap();
        let train = make_dataset(&config, train_n, Seed(seed + 1)).unwrap();
        let eval_set = make_dataset(&config, eval_n, Seed(seed + 2)).unwrap();
        ToyTask::new(model, train, eval_set).unwrap()
    }

    #[test]
    fn frozen_weights_are_deterministic_and_seed_dependent() {
        let a = ToyModel::new(ToyModelConfig::small(Seed(7))).unwrap();
        let b = ToyModel::new(ToyModelConfig::small(Seed(7))).unwrap();
        let c = ToyModel::new(ToyModelConfig::small(Seed(8))).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        assert_ne!(a.weights_checksum(), c.weights_checksum());
    }

    #[test]
    fn dataset_is_balanced_and_carries_one_marker_each() {
        let config = ToyModelConfig::small(Seed(3));
        let set = make_dataset(&config, 40, Seed(4)).unwrap();
        let mut counts = vec![0usize; config.n_classes];
        for (seq, &label) in set.tokens.iter().zip(&set.labels) {
            counts[label] += 1;
            assert_eq!(seq.len(), config.seq_len);
            let marker = MARKER_BASE + label as u32;
            let marker_hits = seq.iter().filter(|&&t| t == marker).count();
            assert_eq!(marker_hits, 1, "exactly one marker per sequence");
            for &t in seq {
                assert!((t as usize) < config.vocab);
                assert!(t >= MARKER_BASE, "reserved ids stay unused");
            }
            // No marker of a *different* class may appear.
            for other in 0..config.n_classes as u32 {
                if other != label as u32 {
                    assert!(!seq.contains(&(MARKER_BASE + other)));
                }
            }
        }
        assert!(
            counts.iter().all(|&c| c == 10),
            "balanced classes: {counts:?}"
        );
    }

    #[test]
    fn prompt_gradient_matches_central_differences() {
        let mut task = tiny_task(11, 3, 3);
        let n_prompt = 2;
        let d = task.model.config.d_model;
        let e0 = gaussian_matrix(Seed(99), n_prompt, d, 1.0).unwrap();
        let (_, grad) = task.loss_and_grad(&e0).unwrap();

        let h = 1e-5;
        let mut rng = Rng64::new(Seed(100));
        let mut max_rel = 0.0f64;
        for _ in 0..12 {
            let i = rng.next_below(n_prompt as u64) as usize;
            let j = rng.next_below(d as u64) as usize;
            let mut plus = e0.clone();
            plus[(i, j)] += h;
            let mut minus = e0.clone();
            minus[(i, j)] -= h;
            let fd = (task.loss(&plus).unwrap() - task.loss(&minus).unwrap()) / (2.0 * h);
            let analytic = grad[(i, j)];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(
            max_rel < 1e-6,
            "worst relative gradient error through the toy model: {max_rel:.3e}"
        );
    }

    #[test]
    fn the_two_loss_formulations_agree() {
        let mut task = tiny_task(21, 5, 3);
        let e = gaussian_matrix(Seed(22), 2, task.model.config.d_model, 1.0).unwrap();
        let via_lse = task.loss_and_grad(&e).unwrap().0;
        let via_probability = task.loss(&e).unwrap();
        assert!(
            (via_lse - via_probability).abs() < 1e-12,
            "{via_lse} vs {via_probability}"
        );
    }

    #[test]
    fn untrained_prompt_scores_near_chance() {
        let config = ToyModelConfig::small(Seed(31));
        let model = ToyModel::new(config).unwrap();
        let train = make_dataset(&config, 8, Seed(32)).unwrap();
        let eval_set = make_dataset(&config, 1200, Seed(33)).unwrap();
        let task = ToyTask::new(model, train, eval_set.clone()).unwrap();
        let e = gaussian_matrix(Seed(34), 4, config.d_model, 1.0).unwrap();
        let acc = task.accuracy(&e, &eval_set).unwrap();
        let chance = 1.0 / config.n_classes as f64;
        assert!(
            (acc - chance).abs() <= 0.05,
            "untrained accuracy {acc} should sit within 5 points of chance {chance}"
        );
    }

    #[test]
    fn training_reduces_toy_loss_without_touching_the_model() {
        let model_config = tiny_config(41);
        let model = ToyModel::new(model_config).unwrap();
        let checksum_before = model.weights_checksum();
        let train_set = make_dataset(&model_config, 12, Seed(42)).unwrap();
        let eval_set = make_dataset(&model_config, 12, Seed(43)).unwrap();
        let mut task = ToyTask::new(model, train_set, eval_set).unwrap();

        let prompt_config =
            PromptConfig::new(3, 4, model_config.d_model, Seed(44), Mode::Ulpt).unwrap();
        let settings = TrainSettings {
            steps: 80,
            policy: LrPolicy::Schedule(crate::training::ScheduleConfig {
                peak_lr: 0.05,
                warmup_steps: 8,
                total_steps: 80,
            }),
            optimizer: OptimizerConfig::adamw(),
            eval_every: Some(40),
            stop_below_loss: None,
        };
        let run = train(&mut task, &prompt_config, &settings, Seed(45)).unwrap();
        assert!(!run.diverged());
        let initial = run.trace[0].loss;
        let final_loss = run.final_loss.unwrap();
        assert!(
            final_loss < 0.8 * initial,
            "training left the loss at {final_loss} from {initial}"
        );
        assert!(run.final_eval.is_some(), "eval cadence reports a metric");
        assert_eq!(task.model().weights_checksum(), checksum_before);
    }
}

//! Small from-scratch decoder-only transformer implementing
//! [`edge_core::LmBackend`]. Pre-LayerNorm blocks, tanh-GELU MLP, LM head
//! tied to the token embedding, and a linear classification head read at
//! the last position. Speaker roles are embedded through the token table.
//!
//! Trained with AdamW and global gradient-norm clipping. Runs single
//! threaded on the CPU, so a fixed seed reproduces the same weights.

pub mod model;

use std::io::{Read, Write};
use std::path::Path;

use edge_core::backend::{log_softmax, BackendError, ForwardOutput, LmBackend, StepConfig, StepLoss};
use edge_core::sequence::{CandidateSet, EncodedExample, IGNORE};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use model::{Cache, Dims, Inputs, Params, WTE};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            vocab_size: 0,
            max_positions: 512,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            init_std: 0.02,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl TinyConfig {
    fn dims(&self) -> Dims {
        Dims {
            vocab: self.vocab_size,
            positions: self.max_positions,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Other(format!("invalid model config: {m}")));
        if self.vocab_size == 0 || self.max_positions == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("sizes must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Params,
    v: Params,
    step: u64,
}

impl AdamState {
    fn new(p: &Params) -> Self {
        AdamState {
            m: Params::zeros_like(p),
            v: Params::zeros_like(p),
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    config: TinyConfig,
    dims: Dims,
    params: Params,
    decayed: Vec<bool>,
    adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: TinyConfig,
    tensors: Vec<SavedTensor>,
}

fn io_err(path: &Path, e: impl ToString) -> BackendError {
    BackendError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl TinyLm {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: TinyConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let dims = config.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&dims, config.init_std, &mut rng);
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: TinyConfig, params: Params) -> Self {
        let dims = config.dims();
        let decayed = dims.layout().iter().map(|t| t.3).collect();
        let adam = AdamState::new(&params);
        TinyLm {
            config,
            dims,
            params,
            decayed,
            adam,
        }
    }

    /// Loads a model saved by [`LmBackend::save`] without a prior instance.
    pub fn from_dir(dir: &Path) -> Result<Self, BackendError> {
        let (config, params) = read_model(dir)?;
        Ok(Self::from_parts(config, params))
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces the weights; shapes must match the current layout.
    pub fn set_params(&mut self, params: Params) -> Result<(), BackendError> {
        let same = params.tensors.len() == self.params.tensors.len()
            && params.tensors.iter().zip(&self.params.tensors).all(|(a, b)| a.dim() == b.dim());
        if !same {
            return Err(BackendError::Other("parameter shapes do not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.tensors.iter().map(|t| t.len()).sum()
    }

    fn check(&self, ex: &EncodedExample) -> Result<(), BackendError> {
        if ex.is_empty() {
            return Err(BackendError::InvalidBatch("empty sequence".into()));
        }
        if ex.len() > self.config.max_positions {
            return Err(BackendError::ContextOverflow {
                len: ex.len(),
                max: self.config.max_positions,
            });
        }
        let vocab = self.config.vocab_size;
        for &id in ex.token_ids.iter().chain(&ex.role_ids) {
            if id as usize >= vocab {
                return Err(BackendError::TokenOutOfRange { id, vocab });
            }
        }
        if let Some(&p) = ex.position_ids.iter().find(|&&p| p as usize >= self.config.max_positions) {
            return Err(BackendError::ContextOverflow {
                len: p as usize + 1,
                max: self.config.max_positions,
            });
        }
        if ex.role_ids.len() != ex.len() || ex.position_ids.len() != ex.len() || ex.lm_labels.len() != ex.len() {
            return Err(BackendError::InvalidBatch("id vectors differ in length".into()));
        }
        Ok(())
    }

    fn run(&self, ex: &EncodedExample) -> Cache {
        model::forward(&self.params, &self.dims, inputs(ex))
    }

    fn cls_logit(&self, hidden: &Array2<f32>) -> f32 {
        let last = hidden.row(hidden.nrows() - 1);
        last.dot(&self.params.tensors[self.dims.cls_w()].row(0)) + self.params.tensors[self.dims.cls_b()][[0, 0]]
    }

    /// Objective and gradient of a batch without touching the weights.
    pub fn loss_and_gradients(&self, batch: &[CandidateSet], config: &StepConfig) -> Result<(StepLoss, f64, Params), BackendError> {
        if batch.is_empty() {
            return Err(BackendError::InvalidBatch("empty batch".into()));
        }
        for set in batch {
            if set.candidates.is_empty() || set.correct >= set.candidates.len() {
                return Err(BackendError::InvalidBatch("candidate set has no valid gold index".into()));
            }
            for c in &set.candidates {
                self.check(c)?;
            }
        }
        let lm_tokens: usize = batch.iter().map(|s| s.candidates[s.correct].active_labels()).sum();
        let n_sets = batch.len() as f64;
        let mut grads = Params::zeros_like(&self.params);
        let (mut lm_sum, mut cls_sum) = (0.0f64, 0.0f64);
        let wte = &self.params.tensors[WTE];
        let cls_w = self.params.tensors[self.dims.cls_w()].clone();

        for set in batch {
            let caches: Vec<Cache> = set.candidates.iter().map(|c| self.run(c)).collect();
            let logits: Vec<f32> = caches.iter().map(|c| self.cls_logit(&c.hidden)).collect();
            let lp = log_softmax(&logits);
            cls_sum -= lp[set.correct];

            for (j, (cand, cache)) in set.candidates.iter().zip(&caches).enumerate() {
                let t = cand.len();
                let mut dh = Array2::<f32>::zeros((t, self.dims.d_model));

                let target = if j == set.correct { 1.0 } else { 0.0 };
                let dc = ((lp[j].exp() - target) * config.cls_loss_weight / n_sets) as f32;
                if dc != 0.0 {
                    let last = cache.hidden.row(t - 1);
                    dh.row_mut(t - 1).scaled_add(dc, &cls_w.row(0));
                    grads.tensors[self.dims.cls_w()].row_mut(0).scaled_add(dc, &last);
                    grads.tensors[self.dims.cls_b()][[0, 0]] += dc;
                }

                if j == set.correct && lm_tokens > 0 {
                    let rows: Vec<usize> = (1..t).filter(|&i| cand.lm_labels[i] != IGNORE).map(|i| i - 1).collect();
                    if !rows.is_empty() {
                        let h = cache.hidden.select(Axis(0), &rows);
                        let lg = h.dot(&wte.t());
                        let mut dlog = Array2::<f32>::zeros(lg.raw_dim());
                        let scale = config.lm_loss_weight / lm_tokens as f64;
                        for (r, &row) in rows.iter().enumerate() {
                            let label = cand.lm_labels[row + 1] as usize;
                            let lrow = log_softmax(lg.row(r).as_slice().expect("contiguous"));
                            lm_sum -= lrow[label];
                            for (v, &l) in lrow.iter().enumerate() {
                                let g = l.exp() - if v == label { 1.0 } else { 0.0 };
                                dlog[[r, v]] = (g * scale) as f32;
                            }
                        }
                        let dhr = dlog.dot(wte);
                        for (r, &row) in rows.iter().enumerate() {
                            let mut target = dh.row_mut(row);
                            target += &dhr.row(r);
                        }
                        ndarray::linalg::general_mat_mul(1.0, &dlog.t(), &h, 1.0, &mut grads.tensors[WTE]);
                    }
                }
                model::backward(&self.params, &self.dims, inputs(cand), cache, &dh, &mut grads);
            }
        }
        let lm_loss = if lm_tokens > 0 { lm_sum / lm_tokens as f64 } else { 0.0 };
        let cls_loss = cls_sum / n_sets;
        let objective = config.lm_loss_weight * lm_loss + config.cls_loss_weight * cls_loss;
        Ok((
            StepLoss {
                lm_loss,
                lm_tokens,
                cls_loss,
            },
            objective,
            grads,
        ))
    }

    fn apply_adamw(&mut self, mut grads: Params, config: &StepConfig) {
        if self.config.max_grad_norm > 0.0 {
            let norm = grads.sq_norm().sqrt();
            if norm > self.config.max_grad_norm {
                let s = (self.config.max_grad_norm / norm) as f32;
                for g in &mut grads.tensors {
                    g.mapv_inplace(|x| x * s);
                }
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = config.learning_rate;
        for (i, g) in grads.tensors.iter().enumerate() {
            let decay = if self.decayed[i] { 1.0 - lr * config.weight_decay } else { 1.0 };
            let p = &mut self.params.tensors[i];
            let m = &mut self.adam.m.tensors[i];
            let v = &mut self.adam.v.tensors[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g as f64;
                let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + ADAM_EPS);
                *p = (*p as f64 * decay - update) as f32;
            });
        }
    }
}

fn inputs(ex: &EncodedExample) -> Inputs<'_> {
    Inputs {
        tokens: &ex.token_ids,
        roles: &ex.role_ids,
        positions: &ex.position_ids,
    }
}

fn read_model(dir: &Path) -> Result<(TinyConfig, Params), BackendError> {
    let cfg_path = dir.join(CONFIG_FILE);
    let raw = std::fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let saved: SavedModel = serde_json::from_str(&raw).map_err(|e| io_err(&cfg_path, e))?;
    saved.config.validate()?;
    let layout = saved.config.dims().layout();
    let matches = layout.len() == saved.tensors.len()
        && layout
            .iter()
            .zip(&saved.tensors)
            .all(|((n, r, c, _), s)| *n == s.name && *r == s.rows && *c == s.cols);
    if !matches {
        return Err(io_err(&cfg_path, "tensor layout does not match config"));
    }
    let bin_path = dir.join(PARAMS_FILE);
    let mut bytes = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(&bin_path, e))?;
    let total: usize = layout.iter().map(|(_, r, c, _)| r * c).sum();
    if bytes.len() != total * 4 {
        return Err(io_err(&bin_path, format!("expected {} bytes, found {}", total * 4, bytes.len())));
    }
    let mut floats = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let tensors = layout
        .iter()
        .map(|(_, r, c, _)| Array2::from_shape_fn((*r, *c), |_| floats.next().expect("length checked")))
        .collect();
    Ok((saved.config, Params { tensors }))
}

impl LmBackend for TinyLm {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_positions
    }

    fn resize_vocabulary(&mut self, new_size: usize) -> Result<(), BackendError> {
        let current = self.config.vocab_size;
        if new_size < current {
            return Err(BackendError::ShrinkVocabulary {
                current,
                requested: new_size,
            });
        }
        if new_size == current {
            return Ok(());
        }
        let d = self.config.d_model;
        let normal = Normal::new(0.0f32, self.config.init_std).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ new_size as u64);
        let extra = Array2::from_shape_fn((new_size - current, d), |_| normal.sample(&mut rng));
        let grow = |t: &Array2<f32>, rows: Array2<f32>| ndarray::concatenate![Axis(0), *t, rows];
        self.params.tensors[WTE] = grow(&self.params.tensors[WTE], extra);
        self.adam.m.tensors[WTE] = grow(&self.adam.m.tensors[WTE], Array2::zeros((new_size - current, d)));
        self.adam.v.tensors[WTE] = grow(&self.adam.v.tensors[WTE], Array2::zeros((new_size - current, d)));
        self.config.vocab_size = new_size;
        self.dims = self.config.dims();
        Ok(())
    }

    fn forward(&self, example: &EncodedExample) -> Result<ForwardOutput, BackendError> {
        self.check(example)?;
        let cache = self.run(example);
        let logits = cache.hidden.dot(&self.params.tensors[WTE].t());
        Ok(ForwardOutput {
            logits: logits.outer_iter().map(|r| r.to_vec()).collect(),
            cls_logit: self.cls_logit(&cache.hidden),
        })
    }

    fn next_token_logits(&self, example: &EncodedExample) -> Result<Vec<f32>, BackendError> {
        self.check(example)?;
        let cache = self.run(example);
        let last = cache.hidden.row(cache.hidden.nrows() - 1);
        Ok(self.params.tensors[WTE].dot(&last).to_vec())
    }

    fn train_step(&mut self, batch: &[CandidateSet], config: &StepConfig) -> Result<StepLoss, BackendError> {
        let (loss, _, grads) = self.loss_and_gradients(batch, config)?;
        self.apply_adamw(grads, config);
        Ok(loss)
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let saved = SavedModel {
            config: self.config,
            tensors: self
                .dims
                .layout()
                .into_iter()
                .map(|(name, rows, cols, _)| SavedTensor { name, rows, cols })
                .collect(),
        };
        let cfg_path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&saved).map_err(|e| io_err(&cfg_path, e))?;
        std::fs::write(&cfg_path, json).map_err(|e| io_err(&cfg_path, e))?;
        let bin_path = dir.join(PARAMS_FILE);
        let mut bytes = Vec::with_capacity(self.num_parameters() * 4);
        for t in &self.params.tensors {
            for x in t.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::File::create(&bin_path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| io_err(&bin_path, e))
    }

    /// Replaces the weights with the ones in `dir` and resets the optimizer.
    fn load(&mut self, dir: &Path) -> Result<(), BackendError> {
        let (config, params) = read_model(dir)?;
        *self = Self::from_parts(config, params);
        Ok(())
    }

    fn is_reentrant(&self) -> bool {
        true
    }
}

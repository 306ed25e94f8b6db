//! Forward passes of both learners on the tape.

use crate::autodiff::{Tape, Tensor, Var};
use crate::taskgen::Episode;
use crate::{Error, Result};

use super::config::{ModelConfig, ModelKind};
use super::params::{init_params, Bound, ParamStore};
use super::position::bucket_grid;

/// Episodes per forward pass in [`Model::predict`] and [`Model::query_residuals`].
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Tape handles produced by one forward pass over a batch of `B` episodes.
pub struct Forward {
    /// `B × o` predictions of the query labels.
    pub prediction: Var,
    /// Query-token residual activations `B × d_model`; entry 0 is the embedding,
    /// entry `k` follows block `k`, and the last one follows the final LayerNorm.
    pub taps: Vec<Var>,
    /// `B × M̂` latent codes (hyper only).
    pub latent: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking them against the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = init_params(&config, 0)?;
        reference.same_layout(&params)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, episodes: &[Episode]) -> Result<usize> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::InvalidInput("empty episode batch".into()))?;
        let n = first.len();
        for ep in episodes {
            if ep.len() != n || ep.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "episodes in a batch need a common length of at least 2, got {} and {}",
                    n,
                    ep.len()
                )));
            }
            if ep.input_dim() != self.config.input_dim {
                return Err(Error::Dimension {
                    op: "episode input",
                    lhs: vec![self.config.input_dim],
                    rhs: vec![ep.input_dim()],
                });
            }
        }
        Ok(n)
    }

    /// `(B·T) × (d+1)` token matrix: `(x_i, y_i)` for context pairs, `(x_N, 0)` for the
    /// query, or with the literal hyper input every `(x_i, y_i)` followed by `(0, 0)`.
    pub fn tokens(&self, episodes: &[Episode]) -> Result<Tensor> {
        let n = self.check_batch(episodes)?;
        let t = self.config.sequence_len(n);
        let d = self.config.input_dim;
        let literal = t > n;
        let mut data = Vec::with_capacity(episodes.len() * t * (d + 1));
        for ep in episodes {
            for i in 0..n {
                data.extend_from_slice(ep.input(i));
                let keep = literal || i + 1 < n;
                data.push(if keep { ep.labels[i] } else { 0.0 });
            }
            if literal {
                data.extend(std::iter::repeat_n(0.0, d + 1));
            }
        }
        Tensor::new(vec![episodes.len() * t, d + 1], data)
    }

    /// Records the forward pass of `episodes` on `tape` using bound parameters.
    pub fn forward(&self, tape: &mut Tape, p: &Bound<'_>, episodes: &[Episode]) -> Result<Forward> {
        let c = &self.config;
        let n = self.check_batch(episodes)?;
        let b = episodes.len();
        let t = c.sequence_len(n);
        let query_rows: Vec<usize> = (0..b).map(|i| i * t + t - 1).collect();

        let tokens = tape.constant(self.tokens(episodes)?);
        let mut h = linear(tape, tokens, p.var("embed.w"), p.var("embed.b"))?;
        let mut taps = vec![tape.select_rows(h, &query_rows)?];

        let buckets = bucket_grid(t, c.position_buckets, c.position_max_distance);
        for l in 0..c.layers {
            let v = |s: &str| p.var(&format!("layer{l}.{s}"));
            let x = tape.layer_norm(h, v("ln1.gamma"), v("ln1.beta"))?;
            let a = self.attention(tape, x, b, &buckets, &v)?;
            h = tape.add(h, a)?;
            let x = tape.layer_norm(h, v("ln2.gamma"), v("ln2.beta"))?;
            let f = linear(tape, x, v("ffn.w1"), v("ffn.b1"))?;
            let f = tape.gelu(f);
            let f = linear(tape, f, v("ffn.w2"), v("ffn.b2"))?;
            h = tape.add(h, f)?;
            if l + 1 < c.layers {
                taps.push(tape.select_rows(h, &query_rows)?);
            }
        }
        let mut query = tape.select_rows(h, &query_rows)?;
        if c.final_layer_norm {
            query = tape.layer_norm(query, p.var("final_ln.gamma"), p.var("final_ln.beta"))?;
        }
        if c.layers > 0 {
            taps.push(query);
        }

        match c.kind {
            ModelKind::Vanilla => Ok(Forward {
                prediction: linear(tape, query, p.var("readout.w"), p.var("readout.b"))?,
                taps,
                latent: None,
            }),
            ModelKind::Hyper => {
                let z = linear(tape, query, p.var("latent.w"), p.var("latent.b"))?;
                let prediction = self.task_network(tape, p, z, episodes)?;
                Ok(Forward {
                    prediction,
                    taps,
                    latent: Some(z),
                })
            }
        }
    }

    fn attention(&self, tape: &mut Tape, x: Var, b: usize, buckets: &[usize], v: &dyn Fn(&str) -> Var) -> Result<Var> {
        let q = tape.linear(x, v("attn.wq"), v("attn.bq"))?;
        let k = tape.linear(x, v("attn.wk"), v("attn.bk"))?;
        let val = tape.linear(x, v("attn.wv"), v("attn.bv"))?;
        let ctx = tape.attention(q, k, val, v("attn.pos_bias"), buckets, b, self.config.heads)?;
        tape.linear(ctx, v("attn.wo"), v("attn.bo"))
    }

    /// `readout · gelu((Σ_m ẑ_m θ̂_m) x_N)` for each episode.
    fn task_network(&self, tape: &mut Tape, p: &Bound<'_>, z: Var, episodes: &[Episode]) -> Result<Var> {
        let c = &self.config;
        let b = episodes.len();
        let w = tape.matmul(z, p.var("modules"))?;
        let w = tape.reshape(w, &[b, c.hidden_dim, c.input_dim])?;
        let mut xq = Vec::with_capacity(b * c.input_dim);
        for ep in episodes {
            xq.extend_from_slice(ep.query());
        }
        let xq = tape.constant(Tensor::new(vec![b, c.input_dim, 1], xq)?);
        let pre = tape.bmm(w, xq, false)?;
        let pre = tape.reshape(pre, &[b, c.hidden_dim])?;
        let hidden = tape.gelu(pre);
        tape.matmul(hidden, p.var("task_readout"))
    }

    fn scalar_output(&self) -> Result<()> {
        if self.config.output_dim != 1 {
            return Err(Error::Contract(format!(
                "scalar labels need output_dim 1, model has {}",
                self.config.output_dim
            )));
        }
        Ok(())
    }

    /// Query-label predictions, one per episode.
    pub fn predict(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        self.scalar_output()?;
        let mut out = Vec::with_capacity(episodes.len());
        for chunk in episodes.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let f = self.forward(&mut tape, &p, chunk)?;
            out.extend_from_slice(tape.value(f.prediction).data());
        }
        Ok(out)
    }

    /// Query-token residual activations after block `layer`, one row per episode.
    pub fn query_residuals(&self, episodes: &[Episode], layer: usize) -> Result<Tensor> {
        if layer > self.config.layers {
            return Err(Error::InvalidInput(format!(
                "residual layer {layer} out of range 0..={}",
                self.config.layers
            )));
        }
        let mut data = Vec::with_capacity(episodes.len() * self.config.d_model);
        for chunk in episodes.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let f = self.forward(&mut tape, &p, chunk)?;
            data.extend_from_slice(tape.value(f.taps[layer]).data());
        }
        Tensor::new(vec![episodes.len(), self.config.d_model], data)
    }

    /// The query token's residual activation after block `layer` for one episode.
    pub fn residual_stream(&self, episode: &Episode, layer: usize) -> Result<Vec<f64>> {
        Ok(self.query_residuals(std::slice::from_ref(episode), layer)?.into_data())
    }

    /// Mean squared query error and its gradient for every parameter, in store order.
    pub fn loss_and_grads(&self, episodes: &[Episode]) -> Result<(f64, Vec<Tensor>)> {
        self.scalar_output()?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let f = self.forward(&mut tape, &p, episodes)?;
        let target = Tensor::new(
            vec![episodes.len(), 1],
            episodes.iter().map(Episode::query_label).collect(),
        )?;
        let loss = tape.mse(f.prediction, &target)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let out = p
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        Ok((value, out))
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(x, w, b)
}

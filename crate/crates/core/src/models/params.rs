use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::taskgen::truncated_normal;
use crate::{rng, Error, Result};

use super::config::{ModelConfig, ModelKind};

/// Recorded in run manifests.
pub const INIT_SCHEME: &str = "weights: normal truncated at 2 std, std 1/sqrt(fan_in); \
     modules: std 1/sqrt(input_dim * latent_dim); biases, position tables and readouts: 0; \
     layer-norm scales: 1";

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Pairs tape handles created elsewhere with the store they stand for.
    pub fn from_vars(store: &'a ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Bound { store, vars })
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape`, as a trainable leaf or as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    pub fn same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?} does not match {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

enum Init {
    /// Truncated normal with this standard deviation.
    Normal(f64),
    Constant(f64),
}

/// Names, shapes and initialisers of every parameter, in store order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (c.d_model, c.ffn_dim());
    let fan_in = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut out = vec![
        ("embed.w".to_string(), vec![c.token_dim(), d], fan_in(c.token_dim())),
        ("embed.b".to_string(), vec![d], Init::Constant(0.0)),
    ];
    for l in 0..c.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("ln1.gamma"), vec![d], Init::Constant(1.0)));
        out.push((p("ln1.beta"), vec![d], Init::Constant(0.0)));
        for m in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.w{m}")), vec![d, d], fan_in(d)));
            out.push((p(&format!("attn.b{m}")), vec![d], Init::Constant(0.0)));
        }
        out.push((
            p("attn.pos_bias"),
            vec![c.heads, c.position_buckets],
            Init::Constant(0.0),
        ));
        out.push((p("ln2.gamma"), vec![d], Init::Constant(1.0)));
        out.push((p("ln2.beta"), vec![d], Init::Constant(0.0)));
        out.push((p("ffn.w1"), vec![d, f], fan_in(d)));
        out.push((p("ffn.b1"), vec![f], Init::Constant(0.0)));
        out.push((p("ffn.w2"), vec![f, d], fan_in(f)));
        out.push((p("ffn.b2"), vec![d], Init::Constant(0.0)));
    }
    if c.final_layer_norm {
        out.push(("final_ln.gamma".into(), vec![d], Init::Constant(1.0)));
        out.push(("final_ln.beta".into(), vec![d], Init::Constant(0.0)));
    }
    match c.kind {
        ModelKind::Vanilla => {
            out.push(("readout.w".into(), vec![d, c.output_dim], Init::Constant(0.0)));
            out.push(("readout.b".into(), vec![c.output_dim], Init::Constant(0.0)));
        }
        ModelKind::Hyper => {
            out.push(("latent.w".into(), vec![d, c.latent_dim], fan_in(d)));
            out.push(("latent.b".into(), vec![c.latent_dim], Init::Constant(0.0)));
            out.push((
                "modules".into(),
                vec![c.latent_dim, c.hidden_dim * c.input_dim],
                fan_in(c.input_dim * c.latent_dim),
            ));
            out.push((
                "task_readout".into(),
                vec![c.hidden_dim, c.output_dim],
                Init::Constant(0.0),
            ));
        }
    }
    out
}

/// Fresh parameters for `config`; identical seeds give identical stores.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut r = rng::rng(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(config) {
        let t = match init {
            Init::Normal(std) => Tensor::from_fn(&shape, |_| truncated_normal(&mut r, std)),
            Init::Constant(v) => Tensor::full(&shape, v),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let c = ModelConfig::hyper();
        assert_eq!(init_params(&c, 3).unwrap(), init_params(&c, 3).unwrap());
        assert_ne!(init_params(&c, 3).unwrap(), init_params(&c, 4).unwrap());
    }

    #[test]
    fn layer_norm_scales_start_at_one() {
        let p = init_params(&ModelConfig::vanilla(), 0).unwrap();
        let gammas: Vec<_> = p.iter().filter(|(n, _)| n.ends_with("gamma")).collect();
        assert_eq!(gammas.len(), 5);
        assert!(gammas.iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
        assert!(p.get("layer1.attn.pos_bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }
}

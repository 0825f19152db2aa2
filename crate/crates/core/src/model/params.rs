use std::collections::HashMap;

use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::rng::{keyed, streams, uniform};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|i| &self.tensors[*i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(i) => Ok(&mut self.tensors[*i]),
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
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

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Wraps handles created elsewhere, one per tensor in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound { store: self, vars })
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// Graph handles for a [`ParamStore`].
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|i| self.vars[*i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.store.tensors)
            .map(|(v, t)| g.grad_tensor(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

enum Init {
    /// Xavier-uniform with the given fans.
    Xavier(usize, usize),
    Uniform(f64),
    Const(f64),
}

struct Spec(String, Vec<usize>, Init);

fn linear(prefix: &str, din: usize, dout: usize, out: &mut Vec<Spec>) {
    out.push(Spec(format!("{prefix}.w"), vec![din, dout], Init::Xavier(din, dout)));
    out.push(Spec(format!("{prefix}.b"), vec![dout], Init::Uniform(BIAS_SCALE)));
}

fn norm(prefix: &str, d: usize, out: &mut Vec<Spec>) {
    out.push(Spec(format!("{prefix}.g"), vec![d], Init::Const(1.0)));
    out.push(Spec(format!("{prefix}.b"), vec![d], Init::Uniform(BIAS_SCALE)));
}

/// Biases and norm shifts start slightly off zero: sign-based trust-ratio
/// updates scale with the tensor norm and never move an all-zero tensor.
const BIAS_SCALE: f64 = 0.01;
const EMBED_SCALE: f64 = 0.02;

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let c = cfg.embed_dim;
    let mut s = Vec::new();
    match cfg.variant {
        Variant::Bertswin => {
            let w = cfg.stem_widths();
            for st in 0..cfg.stem_stages() {
                let (ci, co) = (w[st], w[st + 1]);
                s.push(Spec(
                    format!("stem.{st}.w"),
                    vec![co, ci, 3, 3, 3],
                    Init::Xavier(ci * 27, co * 27),
                ));
                s.push(Spec(format!("stem.{st}.b"), vec![co], Init::Uniform(BIAS_SCALE)));
            }
            linear("stem.proj", *w.last().expect("stem widths"), c, &mut s);
            s.push(Spec(
                "pos_embed".into(),
                vec![cfg.n_tokens(), c],
                Init::Uniform(EMBED_SCALE),
            ));
        }
        Variant::VitSparse => {
            linear("embed", cfg.patch_size.pow(3), c, &mut s);
        }
    }
    s.push(Spec("mask_token".into(), vec![c], Init::Uniform(EMBED_SCALE)));
    let hidden = cfg.hidden_dim();
    for l in 0..cfg.depth {
        let p = format!("blocks.{l}");
        norm(&format!("{p}.ln1"), c, &mut s);
        for m in ["q", "k", "v", "proj"] {
            linear(&format!("{p}.attn.{m}"), c, c, &mut s);
        }
        norm(&format!("{p}.ln2"), c, &mut s);
        linear(&format!("{p}.mlp.fc1"), c, hidden, &mut s);
        linear(&format!("{p}.mlp.fc2"), hidden, c, &mut s);
    }
    norm("norm", c, &mut s);
    let dw = cfg.decoder_widths();
    for (i, st) in cfg.decoder_strides().iter().enumerate() {
        let k3 = st * st * st;
        s.push(Spec(
            format!("dec.{i}.w"),
            vec![dw[i], dw[i + 1], *st, *st, *st],
            Init::Xavier(dw[i] * k3, dw[i + 1] * k3),
        ));
        s.push(Spec(format!("dec.{i}.b"), vec![dw[i + 1]], Init::Uniform(BIAS_SCALE)));
    }
    s
}

/// Deterministic initialization keyed by `seed`; each tensor draws from its
/// own stream so adding a parameter never perturbs the others.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (i, Spec(name, shape, init)) in specs(cfg).into_iter().enumerate() {
        let mut rng = keyed(seed, streams::INIT, i as u64);
        let t = match init {
            Init::Xavier(fi, fo) => {
                let a = (6.0 / (fi + fo) as f64).sqrt();
                Tensor::from_fn(&shape, |_| uniform(&mut rng, -a, a))
            }
            Init::Uniform(a) => Tensor::from_fn(&shape, |_| uniform(&mut rng, -a, a)),
            Init::Const(v) => Tensor::full(&shape, v),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

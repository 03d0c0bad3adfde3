use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// L2 norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        math::sqrt(sq)
    }

    /// Multiplies every gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Replaces the values of parameter `name`, checking the shape.
    pub fn load(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config(alloc::format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape || t.len() != data.len() {
            return Err(Error::dims("load", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`).
fn kaiming_uniform<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Tensor {
    let bound = math::sqrt(6.0 / d_in as f64);
    let data = (0..d_in * d_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![d_in, d_out], data).expect("positive dims")
}

/// A dense layer `x ↦ x W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::config(alloc::format!(
                "{name}: zero-width linear layer {d_in}->{d_out}"
            )));
        }
        let weight = store.add(
            alloc::format!("{name}.weight"),
            kaiming_uniform(d_in, d_out, rng),
        );
        let bias = bias.then(|| {
            store.add(
                alloc::format!("{name}.bias"),
                Tensor::zeros(vec![d_out]).expect("positive dims"),
            )
        });
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between consecutive layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Also apply ReLU after the last layer (shared point-wise MLPs do).
    pub activate_last: bool,
}

impl Mlp {
    /// `widths = [d_in, h_1, ..., d_out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activate_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(alloc::format!(
                "{name}: an MLP needs at least an input and an output width"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &alloc::format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp {
            layers,
            activate_last,
        })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < n || self.activate_last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

//! Parameter storage and the residual feed-forward stack shared by every
//! selector, encoder and decoder.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId {
    store: u32,
    index: u32,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named parameter tensors plus their gradient accumulators.
///
/// Each store carries a tag so that gradients computed in a graph mixing two
/// stores only land in the store that owns them.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u32,
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        ParamStore {
            tag,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
        });
        ParamId {
            store: self.tag,
            index: (self.entries.len() - 1) as u32,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag && (id.index as usize) < self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| ParamId {
            store: self.tag,
            index: i as u32,
        })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index as usize].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.index as usize].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.index as usize].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.index as usize].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All gradients flattened in parameter order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.iter().copied()).collect()
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.iter().all(|g| g.is_finite()))
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &[f64])> {
        self.entries.iter_mut().map(|e| (&mut e.value, e.grad.as_slice()))
    }

    pub(crate) fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Fan-in uniform initialization gain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming: the layer feeds a ReLU.
    Relu,
    /// LeCun: the layer feeds no nonlinearity.
    Linear,
}

fn fan_in_uniform<R: rand::Rng + ?Sized>(fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Tensor {
    let gain = match init {
        Init::Relu => 6.0,
        Init::Linear => 3.0,
    };
    let bound = (gain / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(in_dim, out_dim, init, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// `linear -> ReLU -> layer norm`, plus a skip connection (a bias-free linear
/// projection when the width changes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub skip: Option<Linear>,
}

impl ResidualBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.norm.forward(g, store, h)?;
        let skip = match &self.skip {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Shape of an [`FfnStack`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl FfnShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        FfnShape {
            input,
            hidden: hidden.to_vec(),
            output,
        }
    }
}

/// Residual feed-forward network: one [`ResidualBlock`] per hidden width,
/// then a linear output layer. The default widths are `[512, 256]`; an empty
/// hidden list degenerates to a single linear map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FfnStack {
    pub shape: FfnShape,
    pub blocks: Vec<ResidualBlock>,
    pub out: Linear,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [512, 256];

impl FfnStack {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: FfnShape,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(shape.hidden.len());
        let mut width = shape.input;
        for (i, &h) in shape.hidden.iter().enumerate() {
            let prefix = format!("{name}.block{i}");
            let linear = Linear::new(store, &format!("{prefix}.linear"), width, h, true, Init::Relu, rng);
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), h);
            let skip = (width != h)
                .then(|| Linear::new(store, &format!("{prefix}.skip"), width, h, false, Init::Linear, rng));
            blocks.push(ResidualBlock { linear, norm, skip });
            width = h;
        }
        let out = Linear::new(store, &format!("{name}.out"), width, shape.output, true, Init::Linear, rng);
        FfnStack { shape, blocks, out }
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xv = g.value(x);
        if xv.cols() != self.shape.input {
            return Err(Error::shape(
                "FfnStack::forward",
                xv.shape(),
                &[xv.rows(), self.shape.input],
            ));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        self.out.forward(g, store, h)
    }

    /// Forward pass on constant input without recording gradients.
    pub fn eval(&self, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(x);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut lin = |l: &Linear| {
            ids.push(l.weight);
            ids.extend(l.bias);
        };
        for b in &self.blocks {
            lin(&b.linear);
            if let Some(s) = &b.skip {
                lin(s);
            }
        }
        lin(&self.out);
        for b in &self.blocks {
            ids.push(b.norm.gamma);
            ids.push(b.norm.beta);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(1, Domain::Init, &[]);
        let net = FfnStack::new(&mut store, "f", FfnShape::new(3, &[8, 4], 2), &mut rng);
        zero_all(&mut store);
        let y = net
            .eval(&store, Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap())
            .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0), "{y:?}");
    }

    #[test]
    fn linear_only_identity() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(1, Domain::Init, &[]);
        let net = FfnStack::new(&mut store, "id", FfnShape::new(2, &[], 2), &mut rng);
        *store.value_mut(net.out.weight) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = net.eval(&store, Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(1, Domain::Init, &[]);
        let net = FfnStack::new(&mut store, "f", FfnShape::new(3, &[4], 2), &mut rng);
        let err = net.eval(&store, Tensor::row(vec![1.0; 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 5]") && msg.contains("[1, 3]"), "{msg}");
    }

    #[test]
    fn skip_projection_only_when_width_changes() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(1, Domain::Init, &[]);
        let net = FfnStack::new(&mut store, "f", FfnShape::new(4, &[4, 2], 1), &mut rng);
        assert!(net.blocks[0].skip.is_none());
        assert!(net.blocks[1].skip.is_some());
        assert_eq!(net.param_ids().len(), store.len());
    }
}

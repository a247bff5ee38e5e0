//! Parameterized layers and the bookkeeping that ties parameters living in
//! the model to leaf nodes of a per-step graph recording.

use rand::Rng;

use crate::error::OpError;
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// Names and leaf ids of every parameter inserted into a graph during one
/// forward pass; used to harvest gradients after `backward`.
#[derive(Default)]
pub struct ParamBinding {
    pub entries: Vec<(String, NodeId)>,
}

impl ParamBinding {
    pub fn bind(&mut self, g: &mut Graph, name: String, value: &Tensor) -> NodeId {
        let id = g.leaf(value.clone());
        self.entries.push((name, id));
        id
    }

    /// Copy accumulated gradients out of the graph, keyed by parameter name.
    /// Parameters the loss never reached get zero gradients; a parameter
    /// bound more than once has its contributions summed.
    pub fn harvest(&self, g: &Graph) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut grads: std::collections::BTreeMap<String, Vec<f64>> =
            std::collections::BTreeMap::new();
        for (name, id) in &self.entries {
            let entry = grads
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.value(*id).numel()]);
            if let Some(gr) = g.grad(*id) {
                for (e, v) in entry.iter_mut().zip(gr.iter()) {
                    *e += v;
                }
            }
        }
        grads
    }
}

/// A convolution's weight and bias plus its spatial hyperparameters.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl ConvLayer {
    /// Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out)); zero bias.
    pub fn init<R: Rng>(
        rng: &mut R,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        ConvLayer {
            weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], data),
            bias: Tensor::zeros(&[out_channels]),
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId, OpError> {
        let w = binding.bind(g, format!("{name}.weight"), &self.weight);
        let b = binding.bind(g, format!("{name}.bias"), &self.bias);
        g.conv2d(x, w, b, self.spec)
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{name}.weight"), &mut self.weight);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

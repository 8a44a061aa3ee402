//! The segmentation network: `M` feature components (3×3 conv → ReLU → BN),
//! a 1×1 classifier to `q` channels, and a final BN producing the normalized
//! response map whose per-pixel argmax is the cluster label.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::labels::LabelMap;
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_backward_params, conv2d_forward, relu,
    relu_backward, BnCache, BnParams, ConvParams, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of conv → ReLU → BN components (M).
    pub m_components: usize,
    /// Feature channels (p).
    pub feature_dim: usize,
    /// Cluster channels (q), the upper bound on distinct labels.
    pub cluster_dim: usize,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m_components: 3,
            feature_dim: 100,
            cluster_dim: 100,
            input_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_components == 0 || self.input_channels == 0 {
            return Err(contract("model needs at least one component and one input channel"));
        }
        if self.feature_dim < 2 || self.cluster_dim < 2 {
            return Err(contract(format!(
                "feature_dim and cluster_dim must be >= 2, got {} and {}",
                self.feature_dim, self.cluster_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub conv: ConvParams,
    pub bn: BnParams,
}

/// All learnable parameters. Also used to carry gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub components: Vec<Component>,
    pub classifier: ConvParams,
    pub response_bn: BnParams,
}

/// Gradients mirror the parameter layout exactly.
pub type ParamGrads = ModelParams;

impl ModelParams {
    /// Parameter buffers in a fixed order (per component: weights, bias,
    /// gamma, beta; then classifier weights, bias; then response gamma, beta).
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.components.len() + 4);
        for c in &self.components {
            out.extend([c.conv.weights().data(), c.conv.bias(), c.bn.gamma(), c.bn.beta()]);
        }
        out.extend([
            self.classifier.weights().data(),
            self.classifier.bias(),
            self.response_bn.gamma(),
            self.response_bn.beta(),
        ]);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 * self.components.len() + 4);
        for c in &mut self.components {
            let (w, b) = c.conv.split_mut();
            let (g, be) = c.bn.split_mut();
            out.extend([w, b, g, be]);
        }
        let (w, b) = self.classifier.split_mut();
        let (g, be) = self.response_bn.split_mut();
        out.extend([w, b, g, be]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn cluster_dim(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn input_channels(&self) -> usize {
        self.components.first().map_or(0, |c| c.conv.in_channels())
    }

    fn zeros_like(&self) -> Self {
        let bn_zero = |bn: &BnParams| {
            BnParams::new(vec![0.0; bn.channels()], vec![0.0; bn.channels()], bn.eps()).expect("eps already validated")
        };
        let conv_zero = |c: &ConvParams| ConvParams::zeros(c.out_channels(), c.in_channels(), c.kernel_size());
        Self {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    conv: conv_zero(&c.conv),
                    bn: bn_zero(&c.bn),
                })
                .collect(),
            classifier: conv_zero(&self.classifier),
            response_bn: bn_zero(&self.response_bn),
        }
    }
}

/// Uniform `[-k, k]` weights with `k = 1/sqrt(fan_in)`, zero biases,
/// unit gamma and zero beta. The same seed always yields identical values.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |out_c: usize, in_c: usize, k: usize| {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| dist.sample(&mut rng));
        ConvParams::new(w, vec![0.0; out_c]).expect("shape built above")
    };
    let p = config.feature_dim;
    let mut components = Vec::with_capacity(config.m_components);
    for i in 0..config.m_components {
        let in_c = if i == 0 { config.input_channels } else { p };
        components.push(Component {
            conv: conv(p, in_c, 3),
            bn: BnParams::identity(p),
        });
    }
    let classifier = conv(config.cluster_dim, p, 1);
    Ok(ModelParams {
        components,
        classifier,
        response_bn: BnParams::identity(config.cluster_dim),
    })
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor,
    pre_relu: Tensor,
    bn: BnCache,
}

/// Intermediates retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stages: Vec<StageCache>,
    features: Tensor,
    response: Tensor,
    response_bn: BnCache,
}

impl ForwardCache {
    /// Conv outputs feeding each ReLU, in component order.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Tensor> {
        self.stages.iter().map(|s| &s.pre_relu)
    }

    /// The classifier output r, before the response normalization.
    pub fn response(&self) -> &Tensor {
        &self.response
    }
}

/// Runs the network on a `C×H×W` image and returns the normalized response r′.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let (c, h, w) = image.dims3()?;
    if c != params.input_channels() {
        return Err(contract(format!(
            "model expects {} input channels, image has {c}",
            params.input_channels()
        )));
    }
    if h * w < 2 {
        return Err(crate::Error::Degenerate(format!(
            "image {h}x{w} has fewer than 2 pixels"
        )));
    }
    let mut stages = Vec::with_capacity(params.components.len());
    let mut x = image.clone();
    for comp in &params.components {
        let pre = conv2d_forward(&x, &comp.conv)?;
        let (y, bn) = batchnorm_forward(&relu(&pre), &comp.bn)?;
        stages.push(StageCache {
            input: x,
            pre_relu: pre,
            bn,
        });
        x = y;
    }
    let response = conv2d_forward(&x, &params.classifier)?;
    let (r_prime, response_bn) = batchnorm_forward(&response, &params.response_bn)?;
    Ok((
        r_prime,
        ForwardCache {
            stages,
            features: x,
            response,
            response_bn,
        },
    ))
}

/// Backpropagates `dL/dr′` through the whole network.
pub fn backward(cache: &ForwardCache, params: &ModelParams, grad_r_prime: &Tensor) -> Result<ParamGrads> {
    if cache.stages.len() != params.components.len() {
        return Err(contract(format!(
            "cache has {} stages, model has {} components",
            cache.stages.len(),
            params.components.len()
        )));
    }
    let mut grads = params.zeros_like();

    let bn = batchnorm_backward(&cache.response_bn, &params.response_bn, grad_r_prime)?;
    grads.response_bn.gamma_mut().copy_from_slice(&bn.gamma);
    grads.response_bn.beta_mut().copy_from_slice(&bn.beta);

    let (mut grad, cls) = conv2d_backward(&cache.features, &params.classifier, &bn.input)?;
    grads.classifier = cls;

    for (i, (stage, comp)) in cache.stages.iter().zip(&params.components).enumerate().rev() {
        let bn = batchnorm_backward(&stage.bn, &comp.bn, &grad)?;
        let g = &mut grads.components[i];
        g.bn.gamma_mut().copy_from_slice(&bn.gamma);
        g.bn.beta_mut().copy_from_slice(&bn.beta);
        let grad_pre = relu_backward(&stage.pre_relu, &bn.input)?;
        if i == 0 {
            g.conv = conv2d_backward_params(&stage.input, &comp.conv, &grad_pre)?;
        } else {
            let (gi, gc) = conv2d_backward(&stage.input, &comp.conv, &grad_pre)?;
            g.conv = gc;
            grad = gi;
        }
    }
    Ok(grads)
}

/// Per-pixel argmax over channels; ties go to the lowest channel index.
pub fn assign_labels(r_prime: &Tensor) -> Result<LabelMap> {
    let (q, h, w) = r_prime.dims3()?;
    let n = h * w;
    let data = r_prime.data();
    let mut best = data[..n].to_vec();
    let mut labels = vec![0u32; n];
    for ch in 1..q {
        let plane = &data[ch * n..(ch + 1) * n];
        for px in 0..n {
            if plane[px] > best[px] {
                best[px] = plane[px];
                labels[px] = ch as u32;
            }
        }
    }
    LabelMap::new(h, w, labels)
}

//! Convolution layers and the decoder's building blocks.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamSet};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

/// Parameter nodes of one graph, indexed by `ParamId`.
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Copies every parameter into `g`.
    pub fn all(g: &mut Graph, params: &ParamSet) -> Self {
        Bound((0..params.len()).map(|i| g.param(params, ParamId(i))).collect())
    }

    fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    /// Registers a `kernel×kernel` convolution with "same"-style padding.
    /// Weights are He-normal scaled by `gain`; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let w = Tensor::normal(Shape::new(out_channels, in_channels, kernel, kernel), std, rng);
        let weight = params.add(format!("{name}.weight"), w)?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(out_channels, 1, 1, 1)))?;
        Ok(ConvLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.weight), p.node(self.bias), self.stride, self.padding())
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// `x + conv1×1(relu(conv3×3(relu(conv1×1(x)))))` with a half-width middle.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: ConvLayer,
    spatial: ConvLayer,
    expand: ConvLayer,
}

impl Bottleneck {
    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let mid = (width / 2).max(1);
        Ok(Bottleneck {
            reduce: ConvLayer::register(params, &format!("{name}.reduce"), width, mid, 1, 1, 1.0, rng)?,
            spatial: ConvLayer::register(params, &format!("{name}.spatial"), mid, mid, 3, 1, 1.0, rng)?,
            // Residual branches start near identity.
            expand: ConvLayer::register(params, &format!("{name}.expand"), mid, width, 1, 1, 0.1, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.reduce.apply(g, p, x)?;
        let h = g.relu(h);
        let h = self.spatial.apply(g, p, h)?;
        let h = g.relu(h);
        let h = self.expand.apply(g, p, h)?;
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.spatial.param_count() + self.expand.param_count()
    }
}

/// Simplified attention block of learned image codecs (no non-local branch):
///
/// ```text
/// trunk = U3(U2(U1(x)))
/// mask  = conv1×1(V3(V2(V1(x))))
/// out   = x + trunk ⊙ sigmoid(mask)
/// ```
///
/// where each `U`/`V` is a [`Bottleneck`] residual unit.
#[derive(Clone, Debug)]
pub struct Attention {
    trunk: Vec<Bottleneck>,
    mask: Vec<Bottleneck>,
    mask_out: ConvLayer,
}

pub const ATTENTION_UNITS: usize = 3;

impl Attention {
    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let trunk = (0..ATTENTION_UNITS)
            .map(|i| Bottleneck::register(params, &format!("{name}.trunk{i}"), width, rng))
            .collect::<Result<Vec<_>>>()?;
        let mask = (0..ATTENTION_UNITS)
            .map(|i| Bottleneck::register(params, &format!("{name}.mask{i}"), width, rng))
            .collect::<Result<Vec<_>>>()?;
        let mask_out = ConvLayer::register(params, &format!("{name}.mask_out"), width, width, 1, 1, 0.5, rng)?;
        Ok(Attention { trunk, mask, mask_out })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let mut t = x;
        for unit in &self.trunk {
            t = unit.apply(g, p, t)?;
        }
        let mut m = x;
        for unit in &self.mask {
            m = unit.apply(g, p, m)?;
        }
        let m = self.mask_out.apply(g, p, m)?;
        let gate = g.sigmoid(m);
        let gated = g.mul(t, gate)?;
        g.add(x, gated)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.iter().chain(&self.mask).map(Bottleneck::param_count).sum::<usize>() + self.mask_out.param_count()
    }
}

//! Trainable parameter storage and the layer building blocks shared by the
//! transmission net, the airlight U-net and the discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Places every array on the tape; `trainable` decides whether they collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.variable(p.value.clone())
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Overwrites parameters whose names appear in `external`.
    ///
    /// Shapes must agree; names absent from `self` are an error. Returns the
    /// number of arrays replaced.
    pub fn load_matching(&mut self, external: &ParameterSet) -> Result<usize> {
        let mut n = 0;
        for ext in &external.params {
            let Some(p) = self.params.iter_mut().find(|p| p.name == ext.name) else {
                return Err(Error::Config(format!("unknown parameter {}", ext.name)));
            };
            if p.value.shape() != ext.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, external array is {:?}",
                    p.name,
                    p.value.shape(),
                    ext.value.shape()
                )));
            }
            p.value = ext.value.clone();
            n += 1;
        }
        Ok(n)
    }
}

/// Tape handles for a bound [`ParameterSet`], in the same order.
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Registers named parameters with deterministic seeded initialisation.
pub struct ParamBuilder {
    set: ParameterSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParameterSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParameterSet {
        self.set
    }

    fn normal(&mut self, shape: [usize; 4], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std > 0");
        Tensor::from_fn(shape, |_, _, _, _| dist.sample(&mut self.rng))
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Conv> {
        let fan_in = (cin * geom.kernel * geom.kernel) as f64;
        let w = self.normal([cout, cin, geom.kernel, geom.kernel], (2.0 / fan_in).sqrt());
        let w = self.set.push(format!("{name}.weight"), w)?;
        let b = if bias {
            Some(self.set.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?)
        } else {
            None
        };
        Ok(Conv {
            weight: w,
            bias: b,
            geom,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn conv_transpose(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<ConvTranspose> {
        let taps = (geom.kernel / geom.stride.max(1)).max(1);
        let fan_in = (cin * taps * taps) as f64;
        let w = self.normal([cin, cout, geom.kernel, geom.kernel], (2.0 / fan_in).sqrt());
        let w = self.set.push(format!("{name}.weight"), w)?;
        let b = if bias {
            Some(self.set.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?)
        } else {
            None
        };
        Ok(ConvTranspose {
            weight: w,
            bias: b,
            geom,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        let gamma = self
            .set
            .push(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], 1.0))?;
        let beta = self
            .set
            .push(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]))?;
        Ok(Norm {
            gamma,
            beta,
            channels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    weight: ParamId,
    bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

/// Batch normalisation using the statistics of the current batch.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.batch_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth_rate: usize,
}

/// One dense layer: norm → ReLU → 3×3 conv producing `growth_rate` maps.
#[derive(Clone, Debug)]
struct DenseLayer {
    norm: Norm,
    conv: Conv,
}

/// Each layer sees the concatenation of the block input and all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenseBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, spec: DenseBlockSpec) -> Result<Self> {
        if spec.num_layers == 0 || spec.growth_rate == 0 {
            return Err(Error::Config(format!(
                "{name}: dense block needs at least one layer and positive growth"
            )));
        }
        let mut layers = Vec::with_capacity(spec.num_layers);
        let mut c = in_channels;
        for i in 0..spec.num_layers {
            let norm = b.norm(&format!("{name}.layer{i}.norm"), c)?;
            let conv = b.conv(
                &format!("{name}.layer{i}.conv"),
                c,
                spec.growth_rate,
                ConvGeom::new(3, 1, 1),
                false,
            )?;
            layers.push(DenseLayer { norm, conv });
            c += spec.growth_rate;
        }
        Ok(DenseBlock {
            layers,
            in_channels,
            out_channels: c,
        })
    }

    /// Channel count after each layer's concatenation.
    pub fn layer_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.conv.in_channels + l.conv.out_channels)
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut features = x;
        for layer in &self.layers {
            let y = layer.norm.forward(g, p, features);
            let y = g.relu(y);
            let y = layer.conv.forward(g, p, y);
            features = g.concat(&[features, y]);
        }
        features
    }
}

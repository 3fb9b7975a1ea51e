use super::gru::{GruCache, GruCell};
use super::layers::{Act, CausalConv, Dense, LayerSpec, Param, Parameterized};
use super::mat::Mat;
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Activation(Act, usize),
    Gru(GruCell),
    CausalConv(CausalConv),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => d.spec(),
            Layer::Activation(a, dim) => LayerSpec::activation(*a, *dim),
            Layer::Gru(g) => g.spec(),
            Layer::CausalConv(c) => c.spec(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Activation(..) => "activation",
            Layer::Gru(_) => "gru_cell",
            Layer::CausalConv(_) => "causal_conv",
        }
    }
}

/// A plain stack of layers applied to a `(time, features)` matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs (and outputs for activations) kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Mat>,
    outputs: Vec<Option<Mat>>,
    gru: Vec<Option<GruCache>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        let net = Self { layers };
        let specs = net.specs();
        for s in &specs {
            s.validate()?;
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::Dimension(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(net)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, ForwardCache), NnError> {
        let mut cache = ForwardCache { inputs: Vec::new(), outputs: Vec::new(), gru: Vec::new() };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, gc) = match layer {
                Layer::Dense(d) => (d.forward(&h)?, None),
                Layer::Activation(a, dim) => {
                    super::layers::check_cols(&h, *dim, "activation")?;
                    (a.apply(&h), None)
                }
                Layer::Gru(g) => {
                    let (y, c) = g.forward(&h)?;
                    (y, Some(c))
                }
                Layer::CausalConv(c) => (c.forward(&h)?, None),
            };
            if !y.is_finite() {
                return Err(NnError::Numeric {
                    layer: i,
                    detail: format!("non-finite {} output", layer.kind_name()),
                });
            }
            let keep_out = matches!(layer, Layer::Activation(..)).then(|| y.clone());
            cache.inputs.push(std::mem::replace(&mut h, y));
            cache.outputs.push(keep_out);
            cache.gru.push(gc);
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache, gy: &Mat) -> Result<Mat, NnError> {
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = &cache.inputs[i];
            g = match layer {
                Layer::Dense(d) => d.backward(x, &g),
                Layer::Activation(a, _) => a.backward(cache.outputs[i].as_ref().expect("activation output"), &g),
                Layer::Gru(gru) => gru.backward(cache.gru[i].as_ref().expect("gru cache"), &g),
                Layer::CausalConv(c) => c.backward(x, &g),
            };
            if !g.is_finite() {
                return Err(NnError::Numeric { layer: i, detail: "non-finite gradient".into() });
            }
        }
        Ok(g)
    }
}

impl Parameterized for Network {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense(d) => d.params(),
                Layer::Activation(..) => Vec::new(),
                Layer::Gru(g) => g.params(),
                Layer::CausalConv(c) => c.params(),
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense(d) => d.params_mut(),
                Layer::Activation(..) => Vec::new(),
                Layer::Gru(g) => g.params_mut(),
                Layer::CausalConv(c) => c.params_mut(),
            })
            .collect()
    }
}

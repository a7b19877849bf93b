//! Layers and the HDC/DUC-wrapped U-net.
//!
//! ```text
//! input (X, Y, Z, C)
//!   -> HDC: pds(f) -> conv k x k x k (C*F -> hdc_features) -> activation
//!   -> encoder levels (maxpool between levels) / decoder levels with
//!      nearest upsampling and skip concatenation
//!   -> DUC: conv (widths[0] -> classes*F) -> pus(f)
//!   -> softmax over channels
//! ```
//!
//! `F = nx*ny*nz`. With identity factors the wrapper disappears and the
//! network is a plain U-net at full resolution.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::kernels::ConvGeometry;
use crate::rng::Rng;
use crate::shuffle::ShuffleFactors;
use crate::tensor::{Shape4, Tensor4};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor4)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor4) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) => *slot = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A convolution's geometry plus the names of its weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub name: String,
    pub geom: ConvGeometry,
}

impl ConvParams {
    pub fn new(name: &str, geom: ConvGeometry) -> Self {
        ConvParams { name: name.to_string(), geom }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn apply(&self, g: &mut Graph, params: &ParamStore, input: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight_name(), params.get(&self.weight_name())?.clone());
        let b = g.param(&self.bias_name(), params.get(&self.bias_name())?.clone());
        g.conv3d(input, w, b, self.geom)
    }

    fn init(&self, store: &mut ParamStore, init: Init, rng: &mut Rng) -> Result<()> {
        let ws = self.geom.weight_shape();
        let sigma = match init {
            Init::Gaussian { sigma } => sigma,
            Init::He => (2.0 / (self.geom.taps() * self.geom.c_in) as f64).sqrt(),
        };
        store.insert(&self.weight_name(), Tensor4::gaussian(ws, 0.0, sigma, rng)?);
        store.insert(&self.bias_name(), Tensor4::zeros(self.geom.bias_shape())?);
        Ok(())
    }
}

/// Weight initialisation. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Gaussian { sigma: f64 },
    /// Zero-mean normal with `sigma = sqrt(2 / fan_in)`.
    He,
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian { sigma: 0.01 }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Init::He => f.write_str("he"),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "he" {
            return Ok(Init::He);
        }
        let sigma = s
            .strip_prefix("gaussian:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.is_finite())
            .ok_or_else(|| Error::Config(format!("init must be 'he' or 'gaussian:<sigma>', got '{s}'")))?;
        Ok(Init::Gaussian { sigma })
    }
}

/// Periodic down-shuffling followed by a low-resolution convolution and a
/// nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct HdcLayer {
    pub factors: ShuffleFactors,
    pub conv: ConvParams,
    pub activation: Activation,
}

impl HdcLayer {
    pub fn new(name: &str, factors: ShuffleFactors, in_channels: usize, features: usize, kernel: usize, activation: Activation) -> Self {
        HdcLayer {
            factors,
            conv: ConvParams::new(name, ConvGeometry::same(kernel, in_channels * factors.product(), features)),
            activation,
        }
    }
}

pub fn hdc_forward(g: &mut Graph, params: &ParamStore, input: NodeId, layer: &HdcLayer) -> Result<NodeId> {
    let low = g.pds(input, layer.factors)?;
    let c = layer.conv.apply(g, params, low)?;
    Ok(g.activation(c, layer.activation))
}

/// Low-resolution convolution producing `classes * F` channels followed by
/// periodic up-shuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct DucLayer {
    pub factors: ShuffleFactors,
    pub conv: ConvParams,
}

impl DucLayer {
    pub fn new(name: &str, factors: ShuffleFactors, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        DucLayer {
            factors,
            conv: ConvParams::new(name, ConvGeometry::same(kernel, in_channels, out_channels * factors.product())),
        }
    }
}

pub fn duc_forward(g: &mut Graph, params: &ParamStore, input: NodeId, layer: &DucLayer) -> Result<NodeId> {
    if !layer.conv.geom.c_out.is_multiple_of(layer.factors.product()) {
        return Err(Error::InvalidShape(format!(
            "DUC conv produces {} channels, not divisible by {}",
            layer.conv.geom.c_out,
            layer.factors.product()
        )));
    }
    let c = layer.conv.apply(g, params, input)?;
    g.pus(c, layer.factors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub factors: ShuffleFactors,
    /// Feature maps produced by the HDC layer.
    pub hdc_features: usize,
    /// Feature width per U-net level; the depth is `widths.len()`.
    pub widths: Vec<usize>,
    /// Max-pool / upsample factors between consecutive levels.
    pub pool: [usize; 3],
    pub convs_per_level: usize,
    pub kernel: usize,
    pub hdc_kernel: usize,
    pub duc_kernel: usize,
    pub skip_connections: bool,
    pub activation: Activation,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            in_channels: 1,
            classes: 2,
            factors: ShuffleFactors::IDENTITY,
            hdc_features: 64,
            widths: vec![32, 64, 128],
            pool: [2, 2, 2],
            convs_per_level: 2,
            kernel: 3,
            hdc_kernel: 3,
            duc_kernel: 3,
            skip_connections: true,
            activation: Activation::Relu,
        }
    }
}

impl BackboneSpec {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.hdc_features == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least two classes, got {}", self.classes));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be a non-empty list of positive values, got {:?}", self.widths));
        }
        if self.convs_per_level == 0 {
            return bad("convs_per_level must be at least 1".into());
        }
        for (name, k) in [("kernel", self.kernel), ("hdc_kernel", self.hdc_kernel), ("duc_kernel", self.duc_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.pool.contains(&0) {
            return bad("pool factors must be positive".into());
        }
        Ok(())
    }

    /// Spatial divisor every input patch must satisfy.
    pub fn required_multiple(&self) -> [usize; 3] {
        let levels = self.depth().saturating_sub(1) as u32;
        let f = self.factors.as_array();
        [0, 1, 2].map(|a| f[a] * self.pool[a].pow(levels))
    }

    pub fn check_patch(&self, extent: [usize; 3]) -> Result<()> {
        let m = self.required_multiple();
        for a in 0..3 {
            if !extent[a].is_multiple_of(m[a]) {
                return Err(Error::NotDivisible { axis: ['x', 'y', 'z'][a], extent: extent[a], factor: m[a] });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    encoder: Vec<ConvParams>,
    decoder: Vec<ConvParams>,
}

/// Element counts of every tensor produced between the HDC output and the
/// DUC input, in creation order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationStats {
    pub backbone: Vec<(String, usize)>,
}

impl ActivationStats {
    fn record(&mut self, label: impl Into<String>, g: &Graph, id: NodeId) {
        self.backbone.push((label.into(), g.value(id).len()));
    }

    pub fn peak(&self) -> usize {
        self.backbone.iter().map(|(_, n)| *n).max().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.backbone.iter().map(|(_, n)| *n).sum()
    }
}

pub struct ForwardOutput {
    pub input: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub stats: ActivationStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: BackboneSpec,
    pub hdc: HdcLayer,
    levels: Vec<Level>,
    pub duc: DucLayer,
}

impl Network {
    pub fn build(spec: &BackboneSpec) -> Result<Network> {
        spec.validate()?;
        let w = &spec.widths;
        let hdc = HdcLayer::new("hdc", spec.factors, spec.in_channels, spec.hdc_features, spec.hdc_kernel, spec.activation);
        let mut levels = Vec::with_capacity(spec.depth());
        for l in 0..spec.depth() {
            let enc_in = if l == 0 { spec.hdc_features } else { w[l - 1] };
            let encoder = (0..spec.convs_per_level)
                .map(|i| {
                    let c_in = if i == 0 { enc_in } else { w[l] };
                    ConvParams::new(&format!("enc{l}.conv{i}"), ConvGeometry::same(spec.kernel, c_in, w[l]))
                })
                .collect();
            let decoder = if l + 1 < spec.depth() {
                let dec_in = if spec.skip_connections { w[l] + w[l + 1] } else { w[l + 1] };
                (0..spec.convs_per_level)
                    .map(|i| {
                        let c_in = if i == 0 { dec_in } else { w[l] };
                        ConvParams::new(&format!("dec{l}.conv{i}"), ConvGeometry::same(spec.kernel, c_in, w[l]))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            levels.push(Level { encoder, decoder });
        }
        let duc = DucLayer::new("duc", spec.factors, w[0], spec.classes, spec.duc_kernel);
        Ok(Network { spec: spec.clone(), hdc, levels, duc })
    }

    /// Every convolution in registration order.
    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut out = vec![&self.hdc.conv];
        for lvl in &self.levels {
            out.extend(lvl.encoder.iter());
        }
        for lvl in self.levels.iter().rev() {
            out.extend(lvl.decoder.iter());
        }
        out.push(&self.duc.conv);
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.geom.param_count()).sum()
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Shape4)> {
        self.convs()
            .into_iter()
            .flat_map(|c| [(c.weight_name(), c.geom.weight_shape()), (c.bias_name(), c.geom.bias_shape())])
            .collect()
    }

    pub fn init_params(&self, init: Init, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for c in self.convs() {
            c.init(&mut store, init, rng)?;
        }
        Ok(store)
    }

    /// Checks that `params` has exactly this network's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Data(format!(
                "parameter set has {} tensors, network expects {}",
                params.len(),
                expected.len()
            )));
        }
        for ((name, shape), (pn, pt)) in expected.iter().zip(params.iter()) {
            if name != pn || *shape != pt.shape() {
                return Err(Error::Data(format!(
                    "parameter '{pn}' {} does not match network '{name}' {shape}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Builds the forward graph for one patch.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, patch: &Tensor4) -> Result<ForwardOutput> {
        let s = patch.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::InvalidShape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, s.c
            )));
        }
        self.spec.check_patch(s.spatial())?;
        let act = self.spec.activation;
        let mut stats = ActivationStats::default();

        let input = g.constant(patch.clone());
        let mut x = hdc_forward(g, params, input, &self.hdc)?;
        stats.record("hdc", g, x);

        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            if l > 0 {
                x = g.maxpool(x, self.spec.pool)?;
                stats.record(format!("pool{l}"), g, x);
            }
            for conv in &lvl.encoder {
                x = conv.apply(g, params, x)?;
                stats.record(format!("{}.out", conv.name), g, x);
                x = g.activation(x, act);
                stats.record(format!("{}.act", conv.name), g, x);
            }
            skips.push(x);
        }
        for (l, lvl) in self.levels.iter().enumerate().rev() {
            if lvl.decoder.is_empty() {
                continue;
            }
            x = g.upsample(x, self.spec.pool)?;
            stats.record(format!("up{l}"), g, x);
            if self.spec.skip_connections {
                x = g.concat_channels(skips[l], x)?;
                stats.record(format!("cat{l}"), g, x);
            }
            for conv in &lvl.decoder {
                x = conv.apply(g, params, x)?;
                stats.record(format!("{}.out", conv.name), g, x);
                x = g.activation(x, act);
                stats.record(format!("{}.act", conv.name), g, x);
            }
        }
        let logits = duc_forward(g, params, x, &self.duc)?;
        let probs = g.softmax_channels(logits);
        Ok(ForwardOutput { input, logits, probs, stats })
    }
}

/// Anything that maps a normalised image patch to a class-probability patch.
pub trait PatchPredictor {
    fn patch_extent(&self) -> [usize; 3];
    fn classes(&self) -> usize;
    fn predict(&self, patch: &Tensor4) -> Result<Tensor4>;
}

/// A network together with its trained parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
    pub patch: [usize; 3],
}

impl Model {
    pub fn new(net: Network, params: ParamStore, patch: [usize; 3]) -> Result<Self> {
        net.check_params(&params)?;
        net.spec.check_patch(patch)?;
        Ok(Model { net, params, patch })
    }
}

impl PatchPredictor for Model {
    fn patch_extent(&self) -> [usize; 3] {
        self.patch
    }

    fn classes(&self) -> usize {
        self.net.spec.classes
    }

    fn predict(&self, patch: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &self.params, patch)?;
        Ok(g.value(out.probs).clone())
    }
}

//! Central finite-difference gradient checking shared by test targets.
#![allow(dead_code)]

use hdc::graph::ParamGrads;
use hdc::nn::ParamStore;
use hdc::{Graph, NodeId, Result, Tensor4};

pub const FD_EPS: f64 = 1e-5;

/// Builds a scalar from differentiable inputs and named parameters.
pub type Builder<'a> = dyn Fn(&mut Graph, &[NodeId], &ParamStore) -> Result<NodeId> + 'a;

fn eval(build: &Builder, inputs: &[Tensor4], params: &ParamStore) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &ids, params).expect("forward");
    g.value(root).data()[0]
}

/// `||a - n|| / max(||a||, ||n||)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares backward-pass gradients with central differences for every
/// input and parameter tensor. Returns `(tensor label, relative error)`.
pub fn grad_check(build: &Builder, inputs: &[Tensor4], params: &ParamStore) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &ids, params).expect("forward");
    let pg: ParamGrads = g.backward(root).expect("backward");

    let mut out = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            *n = (eval(build, &plus, params) - eval(build, &minus, params)) / (2.0 * FD_EPS);
        }
        out.push((format!("input{k}"), relative_error(analytic.data(), &numeric)));
    }
    for (name, value) in params.iter() {
        let analytic = pg.get(name).cloned().unwrap_or_else(|| Tensor4::zeros(value.shape()).unwrap());
        let mut numeric = vec![0.0; value.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_EPS;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_EPS;
            *n = (eval(build, inputs, &plus) - eval(build, inputs, &minus)) / (2.0 * FD_EPS);
        }
        out.push((name.to_string(), relative_error(analytic.data(), &numeric)));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}

pub mod cases {
    use hdc::graph::Activation;
    use hdc::kernels::{ConvGeometry, LossWeights};
    use hdc::nn::{duc_forward, hdc_forward, BackboneSpec, ConvParams, DucLayer, HdcLayer, Init, Network, ParamStore};
    use hdc::{Graph, NodeId, Rng, Shape4, ShuffleFactors, Tensor4};

    use super::{grad_check, worst};

    pub struct Outcome {
        pub name: &'static str,
        pub worst_tensor: String,
        pub error: f64,
        pub tolerance: f64,
    }

    impl Outcome {
        pub fn pass(&self) -> bool {
            self.error < self.tolerance
        }
    }

    fn shape(x: usize, y: usize, z: usize, c: usize) -> Shape4 {
        Shape4::new(x, y, z, c).unwrap()
    }

    fn gauss(s: Shape4, rng: &mut Rng) -> Tensor4 {
        Tensor4::gaussian(s, 0.0, 1.0, rng).unwrap()
    }

    fn one_hot_random(s: Shape4, rng: &mut Rng) -> Tensor4 {
        let mut t = Tensor4::zeros(s).unwrap();
        for f in t.data_mut().chunks_exact_mut(s.c) {
            f[rng.below(s.c)] = 1.0;
        }
        t
    }

    fn project(g: &mut Graph, x: NodeId, rng: &mut Rng) -> hdc::Result<NodeId> {
        let coeffs = gauss(g.value(x).shape(), rng);
        g.weighted_sum(x, coeffs)
    }

    fn conv_params(c: &ConvParams, rng: &mut Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(&c.weight_name(), gauss(c.geom.weight_shape(), rng).scale(0.5));
        p.insert(&c.bias_name(), gauss(c.geom.bias_shape(), rng).scale(0.1));
        p
    }

    fn outcome(name: &'static str, errs: Vec<(String, f64)>, tolerance: f64) -> Outcome {
        let (worst_tensor, error) = worst(&errs);
        Outcome { name, worst_tensor, error, tolerance }
    }

    pub fn conv3d() -> Vec<Outcome> {
        let geoms = [
            ("conv3d same 3x3x3", ConvGeometry::same(3, 2, 3), shape(5, 4, 3, 2)),
            (
                "conv3d strided anisotropic",
                ConvGeometry { kernel: [3, 2, 1], stride: [2, 1, 1], padding: [1, 0, 0], c_in: 2, c_out: 3 },
                shape(5, 4, 3, 2),
            ),
            ("conv3d 1x1x1", ConvGeometry::same(1, 3, 2), shape(3, 3, 2, 3)),
        ];
        geoms
            .into_iter()
            .enumerate()
            .map(|(i, (name, geom, s))| {
                let mut rng = Rng::seeded(100 + i as u64);
                let x = gauss(s, &mut rng);
                let w = gauss(geom.weight_shape(), &mut rng);
                let b = gauss(geom.bias_shape(), &mut rng);
                let coeff_seed = rng.next_u64();
                let build = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| {
                    let y = g.conv3d(ids[0], ids[1], ids[2], geom)?;
                    project(g, y, &mut Rng::seeded(coeff_seed))
                };
                outcome(name, grad_check(&build, &[x, w, b], &ParamStore::new()), 1e-6)
            })
            .collect()
    }

    pub fn activations() -> Vec<Outcome> {
        [("activation relu", Activation::Relu), ("activation tanh", Activation::Tanh), ("activation identity", Activation::Identity)]
            .into_iter()
            .map(|(name, act)| {
                let mut rng = Rng::seeded(200);
                // Keep ReLU inputs away from the kink.
                let x = gauss(shape(4, 3, 2, 2), &mut rng).map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
                let seed = rng.next_u64();
                let build = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| {
                    let y = g.activation(ids[0], act);
                    project(g, y, &mut Rng::seeded(seed))
                };
                outcome(name, grad_check(&build, &[x], &ParamStore::new()), 1e-6)
            })
            .collect()
    }

    pub fn maxpool() -> Outcome {
        let mut rng = Rng::seeded(300);
        let s = shape(4, 4, 2, 2);
        // Distinct values 0.01 apart, so no perturbation can change an argmax.
        let mut order: Vec<usize> = (0..s.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let x = Tensor4::from_vec(s, order.iter().map(|&k| k as f64 * 0.01).collect()).unwrap();
        let seed = rng.next_u64();
        let build = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| {
            let y = g.maxpool(ids[0], [2, 2, 2])?;
            project(g, y, &mut Rng::seeded(seed))
        };
        outcome("maxpool 2x2x2", grad_check(&build, &[x], &ParamStore::new()), 1e-6)
    }

    pub fn softmax() -> Outcome {
        let mut rng = Rng::seeded(400);
        let x = gauss(shape(3, 3, 2, 4), &mut rng);
        let seed = rng.next_u64();
        let build = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| {
            let y = g.softmax_channels(ids[0]);
            project(g, y, &mut Rng::seeded(seed))
        };
        outcome("softmax", grad_check(&build, &[x], &ParamStore::new()), 1e-6)
    }

    pub fn combined_loss() -> Vec<Outcome> {
        let mut rng = Rng::seeded(500);
        let s = shape(3, 3, 2, 3);
        let labels = one_hot_random(s, &mut rng);
        let probs = Tensor4::uniform(s, 0.05, 1.0, &mut rng).unwrap();
        let weights = LossWeights { ce: 0.7, dice: 1.3, dice_eps: 1e-5 };
        let l1 = labels.clone();
        let direct = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| g.ce_dice_loss(ids[0], l1.clone(), weights);
        let logits = gauss(s, &mut rng);
        let l2 = labels;
        let through_softmax = move |g: &mut Graph, ids: &[NodeId], _: &ParamStore| {
            let p = g.softmax_channels(ids[0]);
            g.ce_dice_loss(p, l2.clone(), LossWeights::default())
        };
        vec![
            outcome("ce+dice loss", grad_check(&direct, &[probs], &ParamStore::new()), 1e-6),
            outcome("softmax -> ce+dice loss", grad_check(&through_softmax, &[logits], &ParamStore::new()), 1e-6),
        ]
    }

    pub fn hdc() -> Outcome {
        let mut rng = Rng::seeded(600);
        let layer = HdcLayer::new("hdc", ShuffleFactors::new(2, 2, 1).unwrap(), 2, 3, 3, Activation::Tanh);
        let params = conv_params(&layer.conv, &mut rng);
        let x = gauss(shape(4, 4, 3, 2), &mut rng);
        let seed = rng.next_u64();
        let build = move |g: &mut Graph, ids: &[NodeId], p: &ParamStore| {
            let y = hdc_forward(g, p, ids[0], &layer)?;
            project(g, y, &mut Rng::seeded(seed))
        };
        outcome("hdc_forward", grad_check(&build, &[x], &params), 1e-6)
    }

    pub fn duc() -> Outcome {
        let mut rng = Rng::seeded(700);
        let layer = DucLayer::new("duc", ShuffleFactors::new(2, 1, 2).unwrap(), 3, 2, 3);
        let params = conv_params(&layer.conv, &mut rng);
        let x = gauss(shape(3, 2, 2, 3), &mut rng);
        let seed = rng.next_u64();
        let build = move |g: &mut Graph, ids: &[NodeId], p: &ParamStore| {
            let y = duc_forward(g, p, ids[0], &layer)?;
            project(g, y, &mut Rng::seeded(seed))
        };
        outcome("duc_forward", grad_check(&build, &[x], &params), 1e-6)
    }

    /// HDC -> two-level U-net with pooling, skip concat and upsampling ->
    /// DUC -> softmax -> combined loss.
    pub fn backbone() -> Outcome {
        let spec = BackboneSpec {
            factors: ShuffleFactors::new(2, 2, 2).unwrap(),
            hdc_features: 3,
            widths: vec![3, 4],
            convs_per_level: 1,
            ..Default::default()
        };
        let net = Network::build(&spec).unwrap();
        let mut rng = Rng::seeded(800);
        let mut params = net.init_params(Init::He, &mut rng).unwrap();
        for (_, t) in params.iter_mut() {
            if t.shape().x == 1 && t.shape().y == 1 && t.shape().z == 1 {
                *t = gauss(t.shape(), &mut rng).scale(0.1);
            }
        }
        let x = gauss(shape(8, 8, 8, 1), &mut rng);
        let labels = one_hot_random(shape(8, 8, 8, 2), &mut rng);
        let build = move |g: &mut Graph, ids: &[NodeId], p: &ParamStore| {
            let input = g.value(ids[0]).clone();
            let out = net.forward(g, p, &input)?;
            g.ce_dice_loss(out.probs, labels.clone(), LossWeights::default())
        };
        // The input is a constant inside `forward`; only parameters are checked.
        let mut errs = grad_check(&build, &[x], &params);
        errs.retain(|(n, _)| n != "input0");
        outcome("depth-2 backbone", errs, 1e-5)
    }

    pub fn all() -> Vec<Outcome> {
        let mut v = conv3d();
        v.extend(activations());
        v.push(maxpool());
        v.push(softmax());
        v.extend(combined_loss());
        v.push(hdc());
        v.push(duc());
        v.push(backbone());
        v
    }
}

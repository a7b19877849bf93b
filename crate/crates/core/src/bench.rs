//! Activation-count and timing benchmark across shuffle factors.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::graph::Graph;
use crate::nn::{BackboneSpec, Init, Network};
use crate::rng::Rng;
use crate::shuffle::{pds, ShuffleFactors};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub factors: ShuffleFactors,
    pub patch: [usize; 3],
    pub repetitions: usize,
    pub median_fwd_bwd_s: f64,
    pub peak_activation: usize,
    pub total_activation: usize,
    pub pds_elements_per_s: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Backbone activation counts from one forward pass, without timing.
pub fn activation_counts(spec: &BackboneSpec, patch: [usize; 3], seed: u64) -> Result<(usize, usize)> {
    let net = Network::build(spec)?;
    let params = net.init_params(Init::He, &mut Rng::stream(seed, 0))?;
    let [x, y, z] = patch;
    let input = Tensor4::gaussian(Shape4::new(x, y, z, spec.in_channels)?, 0.0, 1.0, &mut Rng::stream(seed, 1))?;
    let out = net.forward(&mut Graph::new(), &params, &input)?;
    Ok((out.stats.peak(), out.stats.total()))
}

/// Times `repetitions` forward+backward passes of `template` with each
/// factor setting at the same input patch.
pub fn run_bench(template: &BackboneSpec, factors: &[ShuffleFactors], patch: [usize; 3], repetitions: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let reps = repetitions.max(1);
    let mut rows = Vec::with_capacity(factors.len());
    for &f in factors {
        let spec = BackboneSpec { factors: f, ..template.clone() };
        spec.validate()?;
        spec.check_patch(patch)?;
        let net = Network::build(&spec)?;
        let params = net.init_params(Init::He, &mut Rng::stream(seed, 0))?;
        let [x, y, z] = patch;
        let input = Tensor4::gaussian(Shape4::new(x, y, z, spec.in_channels)?, 0.0, 1.0, &mut Rng::stream(seed, 1))?;
        let mut labels = Tensor4::zeros(Shape4::new(x, y, z, spec.classes)?)?;
        for v in labels.data_mut().chunks_exact_mut(spec.classes) {
            v[0] = 1.0;
        }
        let mut times = Vec::with_capacity(reps);
        let mut counts = (0, 0);
        for _ in 0..reps {
            let t = Instant::now();
            let mut g = Graph::new();
            let out = net.forward(&mut g, &params, &input)?;
            let loss = g.ce_dice_loss(out.probs, labels.clone(), Default::default())?;
            g.backward(loss)?;
            times.push(t.elapsed().as_secs_f64());
            counts = (out.stats.peak(), out.stats.total());
        }
        let mut pds_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            std::hint::black_box(pds(std::hint::black_box(&input), f)?);
            pds_times.push(t.elapsed().as_secs_f64());
        }
        let pds_t = median(pds_times).max(1e-12);
        rows.push(BenchRow {
            factors: f,
            patch,
            repetitions: reps,
            median_fwd_bwd_s: median(times),
            peak_activation: counts.0,
            total_activation: counts.1,
            pds_elements_per_s: input.len() as f64 / pds_t,
        });
    }
    Ok(rows)
}

/// Ratios are relative to the `(1,1,1)` row when present, else the first.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "factors,patch,repetitions,median_fwd_bwd_s,time_ratio,peak_activation,peak_ratio,total_activation,total_ratio,pds_elements_per_s\n",
    );
    let Some(base) = rows.iter().find(|r| r.factors.is_identity()).or(rows.first()) else {
        return out;
    };
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.4},{},{},{},{},{:.4e}",
            r.factors.to_string().replace(',', "x"),
            r.patch.map(|p| p.to_string()).join("x"),
            r.repetitions,
            r.median_fwd_bwd_s,
            base.median_fwd_bwd_s / r.median_fwd_bwd_s,
            r.peak_activation,
            base.peak_activation as f64 / r.peak_activation as f64,
            r.total_activation,
            base.total_activation as f64 / r.total_activation as f64,
            r.pds_elements_per_s,
        );
    }
    out
}

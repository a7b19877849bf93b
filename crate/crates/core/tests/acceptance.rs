//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::cell::RefCell;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use hdc::checkpoint;
use hdc::config::TrainConfig;
use hdc::data::{gen_synthetic, Sample, SyntheticSpec};
use hdc::inference::{plan_tiling, predict_tiles, predict_volume};
use hdc::metrics::{dice, extract_surface, surface_distances, BinaryMask};
use hdc::nn::{BackboneSpec, Init, Model, Network, PatchPredictor};
use hdc::train::{train, validate, Predictor};
use hdc::{pds, pds_oracle, pus, Graph, Result, Rng, Shape4, ShuffleFactors, Tensor4};

type Verdict = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn shape(x: usize, y: usize, z: usize, c: usize) -> Shape4 {
    Shape4::new(x, y, z, c).unwrap()
}

fn random_case(rng: &mut Rng) -> (Tensor4, ShuffleFactors) {
    let f = ShuffleFactors::new(1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)).unwrap();
    let s = shape(f.nx * (1 + rng.below(4)), f.ny * (1 + rng.below(4)), f.nz * (1 + rng.below(4)), 1 + rng.below(3));
    (Tensor4::gaussian(s, 0.0, 1.0, rng).unwrap(), f)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn shuffle_correctness() -> Verdict {
    let mut rng = Rng::seeded(11);
    let cases = 200;
    for i in 0..cases {
        let (x, f) = random_case(&mut rng);
        let down = pds(&x, f).unwrap();
        if down != pds_oracle(&x, f).unwrap() {
            return Err(format!("case {i}: pds differs from the index-formula oracle ({} / {f})", x.shape()));
        }
        if pus(&down, f).unwrap() != x {
            return Err(format!("case {i}: pus(pds(x)) != x"));
        }
        let y = Tensor4::gaussian(down.shape(), 0.0, 1.0, &mut rng).unwrap();
        if pds(&pus(&y, f).unwrap(), f).unwrap() != y {
            return Err(format!("case {i}: pds(pus(y)) != y"));
        }
        if sorted(down.data()) != sorted(x.data()) {
            return Err(format!("case {i}: value multiset changed"));
        }
    }
    Ok(format!("{cases} random cases: oracle match, both round trips and multiset conservation exact"))
}

/// Dot product summed in ascending order of the products. Both sides of
/// the adjoint law hold the same multiset of products, so a canonical
/// summation order makes the comparison exact for arbitrary floats.
fn canonical_dot(a: &Tensor4, b: &Tensor4) -> f64 {
    let products: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    sorted(&products).iter().sum()
}

fn adjoint_law() -> Verdict {
    let mut rng = Rng::seeded(12);
    let cases = 100;
    let mut naive_gap: f64 = 0.0;
    for i in 0..cases {
        let (x, f) = random_case(&mut rng);
        let y = Tensor4::gaussian(f.down_shape(x.shape()).unwrap(), 0.0, 1.0, &mut rng).unwrap();
        let px = pds(&x, f).unwrap();
        let uy = pus(&y, f).unwrap();
        let gap = canonical_dot(&px, &y) - canonical_dot(&x, &uy);
        if gap != 0.0 {
            return Err(format!("case {i}: <pds x, y> - <x, pus y> = {gap:e}"));
        }
        naive_gap = naive_gap.max((px.dot(&y).unwrap() - x.dot(&uy).unwrap()).abs());
    }
    Ok(format!(
        "{cases} random cases: gap exactly 0 (layout-order dot products differ by at most {naive_gap:.1e} from summation order alone)"
    ))
}

fn gradient_suite() -> Verdict {
    let outcomes = common::cases::all();
    let mut detail = Vec::new();
    let mut ok = true;
    for o in &outcomes {
        ok &= o.pass();
        detail.push(format!("{} {:.1e}/{:.0e}", o.name, o.error, o.tolerance));
    }
    check(ok, detail.join("; "))
}

fn backbone_counts(spec: &BackboneSpec, patch: [usize; 3]) -> Vec<(String, usize)> {
    let net = Network::build(spec).unwrap();
    let params = net.init_params(Init::He, &mut Rng::seeded(1)).unwrap();
    let x = Tensor4::gaussian(shape(patch[0], patch[1], patch[2], 1), 0.0, 1.0, &mut Rng::seeded(2)).unwrap();
    net.forward(&mut Graph::new(), &params, &x).unwrap().stats.backbone
}

fn cost_law() -> Verdict {
    let template = BackboneSpec { hdc_features: 16, widths: vec![16, 32], convs_per_level: 2, ..Default::default() };
    let patch = [32, 32, 32];
    let base = backbone_counts(&template, patch);
    let peak = |v: &[(String, usize)]| v.iter().map(|e| e.1).max().unwrap();
    let total = |v: &[(String, usize)]| v.iter().map(|e| e.1).sum::<usize>();
    let mut detail = vec![format!("(1,1,1) peak {} total {}", peak(&base), total(&base))];
    for f in [(2, 2, 2), (4, 4, 2)] {
        let factors = ShuffleFactors::new(f.0, f.1, f.2).unwrap();
        let counts = backbone_counts(&BackboneSpec { factors, ..template.clone() }, patch);
        let n = factors.product();
        if counts.len() != base.len() {
            return Err(format!("{factors}: backbone has {} tensors, baseline {}", counts.len(), base.len()));
        }
        if let Some((a, b)) = base.iter().zip(&counts).find(|(a, b)| a.1 != n * b.1) {
            return Err(format!("{factors}: tensor {} has {} elements vs baseline {}", b.0, b.1, a.1));
        }
        if peak(&base) != n * peak(&counts) || total(&base) != n * total(&counts) {
            return Err(format!("{factors}: peak/total not reduced by exactly {n}"));
        }
        detail.push(format!("({factors}) peak {} total {} = 1/{n} exactly", peak(&counts), total(&counts)));
    }
    Ok(detail.join("; "))
}

const DATA_SEED: u64 = 2024;

fn synthetic_split() -> (Vec<Sample>, Vec<Sample>) {
    let spec = SyntheticSpec { extent: [48, 48, 48], class_count: 2, ..Default::default() };
    let mut all = gen_synthetic(DATA_SEED, 13, &spec).unwrap();
    let test = all.split_off(10);
    (all, test)
}

fn desk_config(pairs: &[(&str, &str)]) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("seed", "7"),
        ("hdc_features", "16"),
        ("widths", "16,32"),
        ("convs_per_level", "2"),
        ("init", "he"),
        ("lr_period", "3000"),
        ("momentum", "0.9"),
        ("weight_decay", "0.005"),
    ]
    .iter()
    .chain(pairs)
    {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn end_to_end() -> Verdict {
    let (train_set, test_set) = synthetic_split();
    let cfg = desk_config(&[
        ("factors", "2,2,2"),
        ("patch", "32,32,32"),
        ("lr", "0.001"),
        ("iterations", "2000"),
        ("val_every", "100"),
        ("stop_dice", "0.9"),
    ]);
    let t = Instant::now();
    let out = train(&cfg, &train_set, &test_set, &mut |_| {}).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let hit = out.log.val.iter().find(|r| r.mean_dice() >= 0.90);
    let best = out.log.val.iter().map(|r| r.mean_dice()).fold(0.0, f64::max);
    match hit {
        Some(r) => check(
            elapsed < Duration::from_secs(30 * 60),
            format!("held-out Dice {:.4} at iteration {} ({:.0} s)", r.mean_dice(), r.iteration, elapsed.as_secs_f64()),
        ),
        None => Err(format!("best held-out Dice {best:.4} within {} iterations", cfg.iterations)),
    }
}

/// Trains without validation so only optimisation time is measured, then
/// validates the final model on stitched held-out predictions.
fn train_and_score(cfg: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<(f64, f64)> {
    let t = Instant::now();
    let out = train(cfg, train_set, &[], &mut |_| {})?;
    let secs = t.elapsed().as_secs_f64();
    let predictor = Predictor { net: &out.net, params: &out.params, patch: cfg.patch };
    Ok((validate(&predictor, cfg, test_set, cfg.iterations)?.loss, secs))
}

fn faster_convergence() -> Verdict {
    let (train_set, test_set) = synthetic_split();
    // Equal backbone cost: HDC (2,2,2) on 32^3 patches and the plain U-net
    // on 16^3 patches both run the backbone at 16^3.
    let hdc = desk_config(&[("factors", "2,2,2"), ("patch", "32,32,32"), ("lr", "auto"), ("iterations", "500")]);
    let base = desk_config(&[("factors", "1,1,1"), ("patch", "16,16,16"), ("lr", "auto"), ("iterations", "500")]);
    let (l_hdc, t_hdc) = train_and_score(&hdc, &train_set, &test_set).map_err(|e| e.to_string())?;
    let (l_base, t_base) = train_and_score(&base, &train_set, &test_set).map_err(|e| e.to_string())?;
    check(
        l_hdc <= 1.10 * l_base,
        format!(
            "val loss @500: (2,2,2) {l_hdc:.4} vs (1,1,1) {l_base:.4} (tolerance 10%); train time {t_hdc:.1} s vs {t_base:.1} s"
        ),
    )
}

const GRID: usize = 4;

fn point(i: usize) -> [usize; 3] {
    [i % GRID, (i / GRID) % GRID, i / (GRID * GRID)]
}

/// The 48 rigid symmetries of the cube grid (axis permutations with flips).
fn symmetries() -> Vec<([usize; 3], [bool; 3])> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for flips in 0..8 {
            out.push((p, [flips & 1 != 0, flips & 2 != 0, flips & 4 != 0]));
        }
    }
    out
}

fn transform(i: usize, (perm, flip): &([usize; 3], [bool; 3])) -> usize {
    let p = point(i);
    let q = [0, 1, 2].map(|a| if flip[a] { GRID - 1 - p[perm[a]] } else { p[perm[a]] });
    q[0] + GRID * (q[1] + GRID * q[2])
}

/// Independent reference: explicit neighbour test for the surface and an
/// all-pairs scan for distances, summing in the same (layout) order.
struct Oracle {
    extent: [usize; 3],
    spacing: [f64; 3],
}

impl Oracle {
    fn surface(&self, fg: &[bool]) -> Vec<[usize; 3]> {
        let [ex, ey, ez] = self.extent;
        let at = |x: isize, y: isize, z: isize| {
            x >= 0 && y >= 0 && z >= 0 && (x as usize) < ex && (y as usize) < ey && (z as usize) < ez && fg[x as usize + ex * (y as usize + ey * z as usize)]
        };
        let mut out = Vec::new();
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                    if !at(xi, yi, zi) {
                        continue;
                    }
                    let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if nbrs.iter().any(|(dx, dy, dz)| !at(xi + dx, yi + dy, zi + dz)) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    fn dist(&self, p: [usize; 3], q: [usize; 3]) -> f64 {
        let dx = (p[0] as f64 - q[0] as f64) * self.spacing[0];
        let dy = (p[1] as f64 - q[1] as f64) * self.spacing[1];
        let dz = (p[2] as f64 - q[2] as f64) * self.spacing[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn directed(&self, from: &[[usize; 3]], to: &[[usize; 3]]) -> Vec<f64> {
        from.iter().map(|&p| to.iter().map(|&q| self.dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
    }

    /// `(dice, asd, hd)`; the distances are `None` when a mask is empty.
    fn metrics(&self, a: &Prepared, b: &Prepared) -> (f64, Option<(f64, f64)>) {
        let (na, nb) = (a.count, b.count);
        let inter = a.fg.iter().zip(&b.fg).filter(|(x, y)| **x && **y).count();
        let d = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        if na == 0 || nb == 0 {
            return (d, None);
        }
        let (ab, ba) = (self.directed(&a.surface, &b.surface), self.directed(&b.surface, &a.surface));
        let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        let hd = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
        (d, Some((asd, hd)))
    }

    fn prepare(&self, fg: Vec<bool>) -> Prepared {
        Prepared {
            mask: BinaryMask::new(self.extent, self.spacing, fg.clone()).unwrap(),
            surface: self.surface(&fg),
            count: fg.iter().filter(|&&v| v).count(),
            fg,
        }
    }
}

/// A mask with its oracle-side surface computed once.
struct Prepared {
    fg: Vec<bool>,
    count: usize,
    surface: Vec<[usize; 3]>,
    mask: BinaryMask,
}

fn compare(oracle: &Oracle, a: &Prepared, b: &Prepared) -> std::result::Result<(), String> {
    let (d, dist) = oracle.metrics(a, b);
    let got_d = dice(&a.mask, &b.mask).unwrap();
    let got = surface_distances(&a.mask, &b.mask).ok();
    if got_d != d || got != dist {
        return Err(format!("dice {got_d} vs {d}, (asd, hd) {got:?} vs {dist:?}"));
    }
    Ok(())
}

fn metrics_oracle() -> Verdict {
    // Every mask with at most three foreground voxels on the 4^3 grid.
    let n = GRID * GRID * GRID;
    let mut masks: Vec<Vec<usize>> = vec![vec![]];
    for a in 0..n {
        masks.push(vec![a]);
        for b in a + 1..n {
            masks.push(vec![a, b]);
            for c in b + 1..n {
                masks.push(vec![a, b, c]);
            }
        }
    }
    let syms = symmetries();
    let canonical = |m: &Vec<usize>| {
        syms.iter()
            .map(|s| {
                let mut t: Vec<usize> = m.iter().map(|&i| transform(i, s)).collect();
                t.sort_unstable();
                t
            })
            .min()
            .unwrap()
    };
    let dense = |m: &[usize]| {
        let mut v = vec![false; n];
        for &i in m {
            v[i] = true;
        }
        v
    };
    let oracle = Oracle { extent: [GRID; 3], spacing: [1.0; 3] };
    let prepared: Vec<Prepared> = masks.iter().map(|m| oracle.prepare(dense(m))).collect();
    let reps: Vec<&Prepared> = masks.iter().zip(&prepared).filter(|(m, _)| canonical(m) == **m).map(|(_, p)| p).collect();

    let mut pairs = 0usize;
    for a in &reps {
        for b in &prepared {
            compare(&oracle, a, b).map_err(|e| format!("4^3 pair {pairs}: {e}"))?;
            pairs += 1;
        }
    }

    // Random 8^3 pairs with anisotropic spacing and larger masks.
    let oracle8 = Oracle { extent: [8; 3], spacing: [0.7, 1.0, 1.6] };
    let mut rng = Rng::seeded(13);
    for i in 0..50 {
        let fill_a = rng.uniform(0.05, 0.6);
        let fill_b = rng.uniform(0.05, 0.6);
        let a: Vec<bool> = (0..512).map(|_| rng.uniform(0.0, 1.0) < fill_a).collect();
        let b: Vec<bool> = (0..512).map(|_| rng.uniform(0.0, 1.0) < fill_b).collect();
        let (pa, pb) = (oracle8.prepare(a), oracle8.prepare(b));
        compare(&oracle8, &pa, &pb).map_err(|e| format!("8^3 pair {i}: {e}"))?;
        if extract_surface(&pa.mask) != pa.surface {
            return Err(format!("8^3 pair {i}: surface differs"));
        }
    }
    Ok(format!(
        "{} masks (<=3 voxels) on 4^3, {} symmetry classes x all masks = {pairs} pairs exact; 50 random 8^3 pairs exact",
        masks.len(),
        reps.len()
    ))
}

/// Returns the queued outputs in call order.
struct Scripted {
    patch: [usize; 3],
    classes: usize,
    outputs: RefCell<Vec<Tensor4>>,
}

impl PatchPredictor for Scripted {
    fn patch_extent(&self) -> [usize; 3] {
        self.patch
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn predict(&self, _: &Tensor4) -> Result<Tensor4> {
        Ok(self.outputs.borrow_mut().remove(0))
    }
}

fn random_distributions(s: Shape4, rng: &mut Rng) -> Tensor4 {
    let mut t = Tensor4::uniform(s, 0.01, 1.0, rng).unwrap();
    for f in t.data_mut().chunks_exact_mut(s.c) {
        let sum: f64 = f.iter().sum();
        f.iter_mut().for_each(|v| *v /= sum);
    }
    t
}

fn stitching() -> Verdict {
    let mut rng = Rng::seeded(14);
    // Hand-built two-patch overlap along x: origins 0 and 2 of a 6-wide volume.
    let (p, k) = ([4, 4, 4], 3);
    let t1 = random_distributions(shape(4, 4, 4, k), &mut rng);
    let t2 = random_distributions(shape(4, 4, 4, k), &mut rng);
    let net = Scripted { patch: p, classes: k, outputs: RefCell::new(vec![t1.clone(), t2.clone()]) };
    let plan = plan_tiling([6, 4, 4], p, [2, 4, 4]).unwrap();
    if plan.origins != vec![[0, 0, 0], [2, 0, 0]] {
        return Err(format!("unexpected plan {:?}", plan.origins));
    }
    let img = Tensor4::zeros(shape(6, 4, 4, 1)).unwrap();
    let out = predict_tiles(&net, &img, &plan).map_err(|e| e.to_string())?;
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..k {
                    let expected = match x {
                        0 | 1 => t1.get(x, y, z, c),
                        2 | 3 => (t1.get(x, y, z, c) + t2.get(x - 2, y, z, c)) / 2.0,
                        _ => t2.get(x - 2, y, z, c),
                    };
                    if out.get(x, y, z, c) != expected {
                        return Err(format!("voxel ({x},{y},{z}) class {c}: {} vs mean {expected}", out.get(x, y, z, c)));
                    }
                }
            }
        }
    }

    // Channel sums on heavily overlapped tilings, scripted and with a real model.
    let mut worst: f64 = 0.0;
    let vol = shape(10, 9, 7, 1);
    let plan = plan_tiling(vol.spatial(), p, [3, 2, 1]).unwrap();
    let outputs = (0..plan.origins.len()).map(|_| random_distributions(shape(4, 4, 4, k), &mut rng)).collect();
    let net = Scripted { patch: p, classes: k, outputs: RefCell::new(outputs) };
    let probs = predict_tiles(&net, &Tensor4::zeros(vol).unwrap(), &plan).map_err(|e| e.to_string())?;
    let spec = BackboneSpec { factors: ShuffleFactors::new(2, 2, 2).unwrap(), hdc_features: 4, widths: vec![4, 8], convs_per_level: 1, ..Default::default() };
    let network = Network::build(&spec).unwrap();
    let params = network.init_params(Init::He, &mut rng).unwrap();
    let model = Model::new(network, params, [8, 8, 8]).unwrap();
    let image = Tensor4::gaussian(shape(20, 13, 11, 1), 0.0, 1.0, &mut rng).unwrap();
    let real = predict_volume(&model, &image, [3, 4, 5]).map_err(|e| e.to_string())?;
    for t in [&probs, &real] {
        for f in t.data().chunks_exact(t.shape().c) {
            if f.iter().any(|&v| v < 0.0) {
                return Err("negative probability".into());
            }
            worst = worst.max((f.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst <= 1e-9, format!("two-patch mean exact; max |sum - 1| = {worst:.1e} over {} voxels", probs.shape().voxels() + real.shape().voxels()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn determinism() -> Verdict {
    let spec = SyntheticSpec { extent: [24, 24, 24], ..Default::default() };
    let data = gen_synthetic(5, 4, &spec).unwrap();
    let cfg = desk_config(&[
        ("factors", "2,2,2"),
        ("patch", "16,16,16"),
        ("hdc_features", "8"),
        ("widths", "8,16"),
        ("iterations", "40"),
        ("val_every", "20"),
        ("augment_count", "1"),
        ("batch_size", "2"),
        ("lr", "auto"),
    ]);
    let run = || {
        let out = train(&cfg, &data[..3], &data[3..], &mut |_| {}).unwrap();
        [checkpoint::to_bytes(&out.params), out.log.train_csv().into_bytes(), out.log.val_csv(cfg.classes).into_bytes()].map(|b| sha256_hex(&b))
    };
    let (a, b) = (run(), run());
    check(a == b, format!("checkpoint {}..., train log {}..., val log {}...", &a[0][..12], &a[1][..12], &a[2][..12]))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("shuffle correctness", shuffle_correctness),
        ("adjoint law", adjoint_law),
        ("gradient suite", gradient_suite),
        ("cost-reduction law", cost_law),
        ("end-to-end learning", end_to_end),
        ("faster convergence", faster_convergence),
        ("metrics oracle", metrics_oracle),
        ("inference stitching", stitching),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS  {name} [{secs:.1} s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1} s]: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Measurements shared by the integration tests and the acceptance runner.
//! Each returns the observed quantity; callers decide pass or fail.

use m2f_core::model::{masked_attention, AttentionWeights, KeyValueSource, ParamStore};
use m2f_core::{Tape, Tensor, Var};
use rand::Rng as _;

use super::{affine, naive_attention, rng, uniform_tensor};

/// Largest absolute difference between masked attention with an all-zero
/// bias and a from-scratch cross-attention, over `trials` random shapes.
pub fn zero_bias_reduction(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let c = heads * r.gen_range(1..=4);
        let n = r.gen_range(1..=6);
        let m = r.gen_range(1..=30);
        let mut store = ParamStore::default();
        let weights = AttentionWeights::new(&mut store, "ca", c, &mut r);
        for e in store.entries_mut() {
            e.value = uniform_tensor(e.value.shape(), -1.0, 1.0, &mut r);
        }
        let x = uniform_tensor(&[n, c], -2.0, 2.0, &mut r);
        let qpos = uniform_tensor(&[n, c], -1.0, 1.0, &mut r);
        let mem = uniform_tensor(&[m, c], -2.0, 2.0, &mut r);
        let kpos = uniform_tensor(&[m, c], -1.0, 1.0, &mut r);

        let run = |bias: Option<&Tensor>| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let qv = tape.constant(qpos.clone()).unwrap();
            let source = KeyValueSource {
                memory: tape.constant(mem.clone()).unwrap(),
                key_pos: tape.constant(kpos.clone()).unwrap(),
            };
            let (out, _) = masked_attention(&mut tape, &p, &weights, xv, qv, source, bias, heads).unwrap();
            tape.value(out).clone()
        };
        let zero = Tensor::zeros(&[n, m]);
        let masked = run(Some(&zero));
        let unbiased = run(None);

        let get = |id| store.get(id);
        let add = |a: &Tensor, b: &Tensor| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect() };
        let q = affine(&add(&x, &qpos), n, get(weights.q.weight), get(weights.q.bias));
        let k = affine(&add(&mem, &kpos), m, get(weights.k.weight), get(weights.k.bias));
        let v = affine(mem.data(), m, get(weights.v.weight), get(weights.v.bias));
        let a = naive_attention(&q, &k, &v, n, m, c, heads);
        let o = affine(&a, n, get(weights.out.weight), get(weights.out.bias));
        for i in 0..n * c {
            let reference = x.data()[i] + o[i];
            worst = worst.max((masked.data()[i] - reference).abs());
            worst = worst.max((masked.data()[i] - unbiased.data()[i]).abs());
        }
    }
    worst
}

/// Number of random matrices whose Hungarian cost differs from the
/// brute-force optimum. Entries are small integers so sums are exact.
pub fn hungarian_mismatches(trials: usize, seed: u64) -> usize {
    use m2f_core::criterion::{assignment_cost, hungarian};
    let mut r = rng(seed);
    let mut bad = 0;
    for t in 0..trials {
        let rows = r.gen_range(1..=6);
        let cols = r.gen_range(0..=rows);
        // Mix fine and coarse ranges; coarse ones force many ties.
        let hi = if t % 3 == 0 { 3 } else { 1000 };
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-hi..=hi) as f64).collect();
        let cost = Tensor::new(vec![rows, cols], data.clone()).unwrap();
        let m = hungarian(&cost).unwrap();
        let mut seen_rows: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        seen_rows.sort_unstable();
        seen_rows.dedup();
        let valid = m.pairs.len() == cols && seen_rows.len() == cols && m.unmatched.len() == rows - cols;
        if !valid || assignment_cost(&cost, &m) != super::brute_force_assignment(&data, rows, cols) {
            bad += 1;
        }
    }
    bad
}

#[derive(Debug)]
pub struct PointLossCheck {
    /// Largest gap between cell-center point losses and dense losses.
    pub max_loss_diff: f64,
    /// Largest gap between the cell-center matching cost and a dense one.
    pub max_cost_diff: f64,
    /// Whether every instrumented read count equals its closed form.
    pub counts_exact: bool,
}

/// Cell-center point losses against dense full-mask losses on 16×16 masks,
/// plus read counters on uniform point sets.
pub fn point_loss_consistency(trials: usize, seed: u64) -> PointLossCheck {
    use m2f_core::criterion::{
        matching_cost, matching_cost_with_stats, sample_points_uniform, total_loss, LossConfig, LossWeights, PointMode,
        PointSet,
    };
    use m2f_core::model::SegmentPrediction;

    let (h, w) = (16, 16);
    let mut r = rng(seed);
    let mut out = PointLossCheck {
        max_loss_diff: 0.0,
        max_cost_diff: 0.0,
        counts_exact: true,
    };
    for _ in 0..trials {
        let n = r.gen_range(2..=6);
        let classes = 4;
        let gt = super::random_gt(h, w, n.min(4), classes, 2, &mut r);
        let g = gt.segments.len();
        let class_logits = uniform_tensor(&[n, classes + 1], -2.0, 2.0, &mut r);
        let mask_logits = uniform_tensor(&[n, h, w], -4.0, 4.0, &mut r);
        let targets: Vec<Vec<f64>> = gt
            .segments
            .iter()
            .map(|s| s.mask.data().iter().map(|&b| b as u8 as f64).collect())
            .collect();
        let row = |i: usize| &mask_logits.data()[i * h * w..(i + 1) * h * w];

        // Dense matching cost.
        let wts = LossWeights::default();
        let cost = matching_cost(&class_logits, &mask_logits, &gt, &PointSet::grid_centers(h, w), &wts).unwrap();
        for i in 0..n {
            let cl = class_logits.row(i);
            let z: f64 = cl.iter().map(|v| v.exp()).sum();
            for (j, t) in targets.iter().enumerate() {
                let p = cl[gt.segments[j].class].exp() / z;
                let dense = -wts.cls * p + wts.ce * super::dense_bce(row(i), t) + wts.dice * super::dense_dice(row(i), t);
                out.max_cost_diff = out.max_cost_diff.max((cost.data()[i * g + j] - dense).abs());
            }
        }

        // Final loss with every cell center as a point.
        let mut tape = Tape::new();
        let pred = SegmentPrediction {
            class_logits: tape.leaf(class_logits.clone(), true).unwrap(),
            mask_logits: tape.leaf(mask_logits.clone(), true).unwrap(),
        };
        let cfg = LossConfig {
            points: PointMode::Mask,
            ..LossConfig::default()
        };
        let loss = total_loss(&mut tape, &[pred], &gt, &cfg, &mut rng(1)).unwrap();
        let terms = loss.layers[0].unwrap();
        let pairs = &loss.matches[0].as_ref().unwrap().pairs;
        if !pairs.is_empty() {
            let ce: f64 = pairs.iter().map(|&(p, j)| super::dense_bce(row(p), &targets[j])).sum::<f64>() / pairs.len() as f64;
            let dice: f64 = pairs.iter().map(|&(p, j)| super::dense_dice(row(p), &targets[j])).sum::<f64>() / pairs.len() as f64;
            out.max_loss_diff = out.max_loss_diff.max((terms.ce - ce).abs()).max((terms.dice - dice).abs());
        }
        if loss.stats.matching.pair_point_evals != n * g * h * w || loss.stats.loss_point_evals != g * h * w {
            out.counts_exact = false;
        }

        // Read counts on a sampled point set.
        let k = r.gen_range(1..=300);
        let pts = sample_points_uniform(k, &mut r);
        let (_, stats) = matching_cost_with_stats(&class_logits, &mask_logits, &gt, &pts, &wts).unwrap();
        if stats.pair_point_evals != n * g * k || stats.prediction_reads != n * k || stats.target_reads != g * k {
            out.counts_exact = false;
        }
    }
    out
}

/// Largest disagreement between the library metrics and the naive
/// evaluators over `scenes` random tiny scenes.
pub fn metric_oracle_gap(scenes: usize, seed: u64) -> f64 {
    use m2f_core::eval::{ap, ar_at_k, miou, pq, MiouAccumulator, PqAccumulator, COCO_IOU_THRESHOLDS};
    use m2f_core::scene::Mask;

    let (classes, things) = (5, 3);
    let mut r = rng(seed);
    let mut gap: f64 = 0.0;
    let mut gts = Vec::new();
    let mut pans = Vec::new();
    let mut sems = Vec::new();
    let mut insts = Vec::new();
    let mut props = Vec::new();
    for _ in 0..scenes {
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let gt = super::random_gt(h, w, 4, classes, things, &mut r);
        let pan = super::random_panoptic(&gt, classes, things, &mut r);
        let sem: Vec<usize> = pan
            .label_map()
            .into_iter()
            .map(|c| if r.gen_bool(0.2) { r.gen_range(0..classes) } else { c })
            .collect();
        let inst_gt = gt.instance_view();
        let inst = super::random_instances(&inst_gt, classes, &mut r);
        let prop: Vec<Mask> = inst.instances.iter().map(|i| i.mask.clone()).collect();

        let single = pq(&pan, &gt, classes, |c| c < things);
        let (p, pt, ps) = super::naive_pq(&[(&pan, &gt)], classes, things);
        gap = gap.max((single.pq - p).abs()).max((single.pq_things - pt).abs()).max((single.pq_stuff - ps).abs());
        gap = gap.max((miou(&sem, &gt.label_map(), classes) - super::naive_miou(&[(&sem, &gt)], classes)).abs());
        let ap1 = ap(&[(&inst, &inst_gt)], classes, &COCO_IOU_THRESHOLDS);
        gap = gap.max((ap1 - super::naive_ap(&[(&inst, &inst_gt)], classes, &COCO_IOU_THRESHOLDS)).abs());
        for k in [0, 1, 2, 100] {
            let a = ar_at_k(&[(&prop, &inst_gt)], k);
            gap = gap.max((a - super::naive_ar(&[(&prop, &inst_gt)], k)).abs());
        }
        gts.push(gt);
        pans.push(pan);
        sems.push(sem);
        insts.push(inst);
        props.push(prop);
    }
    // Dataset-level accumulation.
    let mut pq_acc = PqAccumulator::new(classes);
    let mut mi_acc = MiouAccumulator::new(classes);
    for i in 0..scenes {
        pq_acc.add(&pans[i], &gts[i]);
        mi_acc.add(&sems[i], &gts[i].label_map());
    }
    let pairs: Vec<_> = pans.iter().zip(&gts).collect();
    let (p, _, _) = super::naive_pq(&pairs, classes, things);
    gap = gap.max((pq_acc.report(|c| c < things).pq - p).abs());
    let sem_pairs: Vec<(&[usize], _)> = sems.iter().map(|s| s.as_slice()).zip(&gts).collect();
    gap = gap.max((mi_acc.miou() - super::naive_miou(&sem_pairs, classes)).abs());
    let inst_gts: Vec<_> = gts.iter().map(|g| g.instance_view()).collect();
    let ap_pairs: Vec<_> = insts.iter().zip(&inst_gts).collect();
    gap = gap.max((ap(&ap_pairs, classes, &COCO_IOU_THRESHOLDS) - super::naive_ap(&ap_pairs, classes, &COCO_IOU_THRESHOLDS)).abs());
    let ar_pairs: Vec<(&[Mask], _)> = props.iter().map(|p| p.as_slice()).zip(&inst_gts).collect();
    gap = gap.max((ar_at_k(&ar_pairs, 100) - super::naive_ar(&ar_pairs, 100)).abs());
    gap
}

#[derive(Debug)]
pub struct HandCases {
    pub pq: f64,
    pub miou: f64,
    pub ap: f64,
    pub ap_brute_force: f64,
}

/// The hand-computed metric cases on 1-pixel-tall strips.
pub fn metric_hand_cases() -> HandCases {
    use m2f_core::eval::{ap, miou, pq, Instance, InstanceOutput, PanopticOutput, PanopticSegment};
    use m2f_core::scene::{GroundTruthScene, Mask, Segment};

    let strip = |f: fn(usize) -> bool| Mask::from_fn(1, 10, |_, x| f(x));
    let thing = |mask| Segment {
        mask,
        class: 0,
        is_thing: true,
    };

    // Truth: class 0 on x < 5, void elsewhere. Segment 1 covers x in 2..=5:
    // intersection 3, union 5 once its void pixel is left out, IoU 0.6.
    // Segment 2 on x < 2 has IoU 0.4 and is a false positive.
    let gt = GroundTruthScene::new(1, 10, vec![thing(strip(|x| x < 5))]).unwrap();
    let pred = PanopticOutput {
        height: 1,
        width: 10,
        ids: (0..10).map(|x| if (2..=5).contains(&x) { 1 } else if x < 2 { 2 } else { 0 }).collect(),
        segments: vec![
            PanopticSegment { id: 1, class: 0, is_thing: true },
            PanopticSegment { id: 2, class: 0, is_thing: true },
        ],
    };
    let pq_value = pq(&pred, &gt, 2, |c| c == 0).pq;

    // Each class region overlaps its prediction in 1 of 3 pixels.
    let miou_value = miou(&[1, 0, 0, 1], &[0, 0, 1, 1], 2);

    // One truth; a confident detection at IoU 0.3 then a weaker one at 0.9.
    let gt = GroundTruthScene::new(1, 10, vec![thing(strip(|_| true))]).unwrap();
    let det = |mask, score, query| Instance {
        mask,
        class: 0,
        score,
        query,
    };
    let out = InstanceOutput {
        instances: vec![det(strip(|x| x < 3), 0.9, 0), det(strip(|x| x < 9), 0.5, 1)],
    };
    HandCases {
        pq: pq_value,
        miou: miou_value,
        ap: ap(&[(&out, &gt)], 1, &[0.5]),
        ap_brute_force: super::naive_ap(&[(&out, &gt)], 1, &[0.5]),
    }
}

pub const GRAD_EPS: f64 = 1e-5;

type OpFn = dyn Fn(&mut Tape, &[Var]) -> m2f_core::Result<Var>;

/// Finite-difference check of `f` with respect to each of its inputs. The
/// output is reduced with fixed random weights so no entry cancels.
fn check_op(inputs: &[Tensor], f: &OpFn, r: &mut m2f_core::rng::Rng) -> f64 {
    use m2f_core::tensor::grad_check;
    let numel = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).numel()
    };
    let weights: Vec<f64> = (0..numel).map(|_| r.gen_range(0.5..1.5)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let report = grad_check(
            |tape, xv| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { Ok(xv) } else { tape.constant(t.clone()) })
                    .collect::<m2f_core::Result<_>>()?;
                let out = f(tape, &vars)?;
                let weighted = tape.mul_const(out, weights.clone())?;
                tape.sum(weighted)
            },
            &inputs[i],
            GRAD_EPS,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

/// Worst relative finite-difference error per differentiable op over
/// `trials` random instances, inputs drawn from `[-2, 2]`.
pub fn op_gradient_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use m2f_core::tensor::MASKED;
    let mut r = rng(seed);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => results.push((name, err)),
    };
    for _ in 0..trials {
        let u = |shape: &[usize], r: &mut m2f_core::rng::Rng| uniform_tensor(shape, -2.0, 2.0, r);
        let (m, n, k) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=6), r.gen_range(2..=6));

        let a = u(&[m, n], &mut r);
        let b = u(&[m, n], &mut r);
        record("add", check_op(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), &mut r));
        record("mul", check_op(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), &mut r));
        let bias = u(&[n], &mut r);
        record("add_row", check_op(&[a.clone(), bias.clone()], &|t, v| t.add_row(v[0], v[1]), &mut r));
        let cst: Vec<f64> = (0..m * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        record("mul_const", check_op(&[a.clone()], &move |t, v| t.mul_const(v[0], cst.clone()), &mut r));
        let s = r.gen_range(-2.0..2.0);
        record("scale", check_op(&[a.clone()], &move |t, v| t.scale(v[0], s), &mut r));
        let bm = u(&[n, k], &mut r);
        record("matmul", check_op(&[a.clone(), bm], &|t, v| t.matmul(v[0], v[1]), &mut r));
        let bt = u(&[k, n], &mut r);
        record("matmul_nt", check_op(&[a.clone(), bt], &|t, v| t.matmul_nt(v[0], v[1]), &mut r));
        let wl = u(&[n, k], &mut r);
        let bl = u(&[k], &mut r);
        record("linear", check_op(&[a.clone(), wl, bl], &|t, v| t.linear(v[0], v[1], v[2]), &mut r));
        record("transpose", check_op(&[a.clone()], &|t, v| t.transpose(v[0]), &mut r));
        record("softmax_last", check_op(&[a.clone()], &|t, v| t.softmax_last(v[0]), &mut r));
        record("relu", check_op(&[a.clone()], &|t, v| t.relu(v[0]), &mut r));
        record("gelu", check_op(&[a.clone()], &|t, v| t.gelu(v[0]), &mut r));
        record("sigmoid", check_op(&[a.clone()], &|t, v| t.sigmoid(v[0]), &mut r));
        let nn = n.max(2);
        let ln_x = u(&[m, nn], &mut r);
        let ln_g = u(&[nn], &mut r);
        let ln_b = u(&[nn], &mut r);
        record("layer_norm", check_op(&[ln_x, ln_g, ln_b], &|t, v| t.layer_norm(v[0], v[1], v[2]), &mut r));
        record("sum", check_op(&[a.clone()], &|t, v| t.sum(v[0]), &mut r));
        record("mean", check_op(&[a.clone()], &|t, v| t.mean(v[0]), &mut r));
        record("sum_last", check_op(&[a.clone()], &|t, v| t.sum_last(v[0]), &mut r));
        record("reshape", check_op(&[a.clone()], &move |t, v| t.reshape(v[0], &[n, m]), &mut r));
        let extra = u(&[r.gen_range(1..=3), n], &mut r);
        record("concat", check_op(&[a.clone(), extra], &|t, v| t.concat(&[v[0], v[1]], 0), &mut r));
        let start = r.gen_range(0..n);
        let len = r.gen_range(1..=n - start);
        record("narrow", check_op(&[a.clone()], &move |t, v| t.narrow(v[0], 1, start, len), &mut r));

        let img = u(&[c, h, w], &mut r);
        let kk = [1, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..=2);
        let pad = if kk == 3 { r.gen_range(0..=1) } else { 0 };
        let co = r.gen_range(1..=3);
        let cw = u(&[co, c, kk, kk], &mut r);
        let cb = u(&[co], &mut r);
        if h + 2 * pad >= kk && w + 2 * pad >= kk {
            record(
                "conv2d",
                check_op(&[img.clone(), cw, cb], &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), &mut r),
            );
        }
        record("max_pool2", check_op(&[img.clone()], &|t, v| t.max_pool2(v[0]), &mut r));
        record("avg_pool", check_op(&[img.clone()], &|t, v| t.avg_pool(v[0], 2), &mut r));
        let (oh, ow) = (r.gen_range(1..=8), r.gen_range(1..=8));
        record("resize", check_op(&[img.clone()], &move |t, v| t.resize(v[0], oh, ow), &mut r));
        let kp = r.gen_range(1..=6);
        let rows: Vec<usize> = (0..r.gen_range(1..=3)).map(|_| r.gen_range(0..c)).collect();
        let pts: Vec<Vec<(f64, f64)>> = rows.iter().map(|_| (0..kp).map(|_| (r.gen(), r.gen())).collect()).collect();
        record(
            "point_sample",
            check_op(
                &[img.clone()],
                &move |t, v| {
                    let refs: Vec<&[(f64, f64)]> = pts.iter().map(|p| p.as_slice()).collect();
                    t.point_sample(v[0], &rows, &refs)
                },
                &mut r,
            ),
        );
        let target: Vec<f64> = (0..m * n).map(|_| if r.gen_bool(0.5) { 1.0 } else { r.gen_range(0.0..1.0) }).collect();
        let t2 = target.clone();
        record("bce_rows", check_op(&[a.clone()], &move |t, v| t.bce_rows(v[0], target.clone()), &mut r));
        record("dice_rows", check_op(&[a.clone()], &move |t, v| t.dice_rows(v[0], t2.clone()), &mut r));
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
        let weights: Vec<f64> = (0..m).map(|_| r.gen_range(0.1..1.0)).collect();
        record(
            "cross_entropy",
            check_op(&[a.clone()], &move |t, v| t.cross_entropy(v[0], &targets, &weights), &mut r),
        );

        let heads = r.gen_range(1..=2);
        let ch = heads * r.gen_range(1..=3);
        let (nq, nk) = (r.gen_range(1..=4), r.gen_range(1..=6));
        let q = u(&[nq, ch], &mut r);
        let kx = u(&[nk, ch], &mut r);
        let vx = u(&[nk, ch], &mut r);
        let mut bias = Tensor::zeros(&[nq, nk]);
        for i in 0..nq {
            for j in 0..nk {
                // Keep at least the first key visible in every row.
                if j > 0 && r.gen_bool(0.3) {
                    bias.set(&[i, j], MASKED);
                }
            }
        }
        record(
            "attention",
            check_op(&[q, kx, vx], &move |t, v| t.attention(v[0], v[1], v[2], Some(&bias), heads), &mut r),
        );
    }
    results
}

/// Finite-difference check of the full model's loss with respect to a few
/// random coordinates of every parameter tensor (2 queries, 2 classes,
/// 32×32 input, dense mask loss).
pub fn full_model_gradient_error(seed: u64, coords_per_tensor: usize) -> FullModelCheck {
    use m2f_core::criterion::{total_loss, LossConfig, PointMode};
    use m2f_core::model::{BoundParams, ForwardCtx, Mask2Former, ModelConfig};
    use m2f_core::scene::{GroundTruthScene, Mask, Segment};
    use m2f_core::tensor::grad_check_coords;

    let cfg = ModelConfig {
        num_queries: 2,
        num_classes: 2,
        thing_classes: 1,
        ..ModelConfig::default()
    };
    let model = Mask2Former::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let image = uniform_tensor(&[3, 32, 32], 0.0, 1.0, &mut r);
    let blob = Mask::from_fn(32, 32, |y, x| (8..20).contains(&y) && (6..22).contains(&x));
    let rest = Mask::from_fn(32, 32, |y, x| !((8..20).contains(&y) && (6..22).contains(&x)));
    let gt = GroundTruthScene::new(
        32,
        32,
        vec![
            Segment { mask: blob, class: 0, is_thing: true },
            Segment { mask: rest, class: 1, is_thing: false },
        ],
    )
    .unwrap();
    let loss_cfg = LossConfig {
        points: PointMode::Mask,
        ..LossConfig::default()
    };
    // Zero-initialised biases put some ReLU inputs exactly on the kink, so
    // the check runs at a slightly jittered point instead of the raw init.
    let values: Vec<Tensor> = model
        .params()
        .entries()
        .iter()
        .map(|e| {
            let mut v = e.value.clone();
            v.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.02..0.02));
            v
        })
        .collect();
    let names: Vec<String> = model.params().entries().iter().map(|e| e.name.clone()).collect();
    // The attention biases are thresholded predictions and carry no
    // gradient, so they are recorded once and held fixed while probing.
    let biases: Vec<Option<Tensor>> = {
        let mut tape = Tape::new();
        let vars = values.iter().map(|v| tape.constant(v.clone()).unwrap()).collect();
        let p = BoundParams::from_vars(vars);
        let img = tape.constant(image.clone()).unwrap();
        let fwd = model.forward(&mut tape, &p, img, &mut ForwardCtx::inference()).unwrap();
        fwd.attention.into_iter().map(|a| a.bias).collect()
    };
    let mut out = FullModelCheck::default();
    for (pi, (name, value)) in names.iter().zip(&values).enumerate() {
        let n = value.numel();
        let coords: Vec<usize> = (0..coords_per_tensor.min(n)).map(|_| r.gen_range(0..n)).collect();
        let report = grad_check_coords(
            |tape, xv| {
                let vars = values
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j == pi { Ok(xv) } else { tape.constant(v.clone()) })
                    .collect::<m2f_core::Result<Vec<_>>>()?;
                let p = BoundParams::from_vars(vars);
                let img = tape.constant(image.clone())?;
                let mut ctx = ForwardCtx {
                    fixed_biases: Some(&biases),
                    ..ForwardCtx::inference()
                };
                let out = model.forward(tape, &p, img, &mut ctx)?;
                let loss = total_loss(tape, &out.predictions, &gt, &loss_cfg, &mut rng(0))?;
                Ok(loss.total)
            },
            value,
            GRAD_EPS,
            &coords,
        )
        .unwrap();
        if std::env::var_os("GRAD_TRACE").is_some() {
            eprintln!("{} {:e} {:e}", name, report.max_rel_error, report.max_abs_error);
        }
        if report.max_rel_error > out.max_rel_error {
            out.max_rel_error = report.max_rel_error;
            out.worst_param = name.clone();
        }
        out.checked += report.checked;
    }
    out
}

#[derive(Debug, Default)]
pub struct FullModelCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

//! Finite-difference checks of every tape primitive and of the composed
//! detector paths, all in f64.

use metarcnn::datagen::{generate_scene, SceneConfig};
use metarcnn::detector::{
    backbone_forward, detection_losses, init_params, mask_features, mask_targets, predictor_head,
    remodel_mask_features, rpn_forward, rpn_losses, rpn_targets, BBox, Bound, DetectorConfig, HeadKind, ModelSpec,
    Params, RoiTarget,
};
use metarcnn::meta_train::{episode_objective, Episode, ObjectiveOptions};
use metarcnn::datagen::Phase;
use metarcnn::prn::{build_meta_input, meta_loss, object_vectors, remodel_rois, stack_meta_inputs, FusionMode};
use metarcnn::tensor::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so ReLU kinks are not probed.
pub fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> metarcnn::error::Result<Var> {
    let w = g.constant(rand_tensor(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn primitive_checks() -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(
            grad_check(
                "conv2d",
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    weighted_sum(g, y, 9)
                },
                &[rand_tensor(&[2, 3, 6, 5], 3), rand_tensor(&[4, 3, 3, 3], 4), rand_tensor(&[4], 5)],
                EPS,
                TOL,
            )
            .unwrap(),
        );
    }
    out.push(
        grad_check(
            "relu",
            |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, 7)
            },
            &[rand_away_from_zero(&[3, 4], 6)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    // distinct values keep the max unique under perturbation
    let distinct = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| ((i * 7) % 32) as f64 * 0.1).collect());
    out.push(
        grad_check(
            "max_pool2d",
            |g, v| {
                let y = g.max_pool2d(v[0], 2, 2)?;
                weighted_sum(g, y, 8)
            },
            &[distinct],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "avg_pool2d",
            |g, v| {
                let y = g.avg_pool2d(v[0], 2, 2)?;
                weighted_sum(g, y, 10)
            },
            &[rand_tensor(&[2, 3, 5, 4], 11)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "global_avg_pool",
            |g, v| {
                let y = g.global_avg_pool(v[0])?;
                weighted_sum(g, y, 12)
            },
            &[rand_tensor(&[2, 3, 4, 5], 13)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "linear_transpose_reshape",
            |g, v| {
                let y = g.linear_cols(v[0], v[1], Some(v[2]))?;
                let t = g.transpose(y)?;
                let s = g.shape(t).to_vec();
                let flat = g.reshape(t, &[s[0] * s[1]])?;
                weighted_sum(g, flat, 14)
            },
            &[rand_tensor(&[4, 3], 15), rand_tensor(&[3, 6], 16), rand_tensor(&[4], 17)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    let boxes = [[3.1, 2.2, 27.5, 30.9], [0.0, 0.0, 40.0, 40.0], [10.3, 12.7, 14.9, 20.2]];
    out.push(
        grad_check(
            "roi_align",
            |g, v| {
                let y = g.roi_align(v[0], &boxes, 8.0, 3)?;
                weighted_sum(g, y, 18)
            },
            &[rand_tensor(&[2, 5, 5], 19)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(grad_check("sigmoid", |g, v| Ok(g.sigmoid(v[0])), &[rand_tensor(&[7], 20)], EPS, TOL).unwrap());
    out.push(
        grad_check(
            "cross_entropy_cols",
            |g, v| g.cross_entropy_cols(v[0], &[0, 2, 1, 2], &[1.0, 0.5, 0.25, 2.0]),
            &[rand_tensor(&[3, 4], 22).map(|x| 3.0 * x)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    // residuals kept away from the ±beta switch points
    let target = vec![0.0, 0.3, -0.2, 1.5, -2.0, 0.05];
    let pred = Tensor::from_vec(&[6], vec![0.5, 0.1, 1.2, 0.2, -0.4, 0.01]);
    out.push(
        grad_check("smooth_l1", |g, v| g.smooth_l1(v[0], &target, &[1.0; 6], 1.0 / 9.0), &[pred], EPS, TOL).unwrap(),
    );
    let t = vec![1.0, 0.0, 1.0, 0.0, 1.0];
    out.push(
        grad_check(
            "bce_with_logits",
            |g, v| g.bce_with_logits(v[0], &t, &[1.0, 2.0, 0.5, 1.0, 1.0]),
            &[rand_tensor(&[5], 23).map(|x| 4.0 * x)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "add_mul_scale",
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let m = g.mul(a, v[1])?;
                let s = g.scale(m, 0.7);
                Ok(g.sum(s))
            },
            &[rand_tensor(&[3, 2], 24), rand_tensor(&[3, 2], 25)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "concat",
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 0)?;
                let c2 = g.concat(&[c, c], 1)?;
                weighted_sum(g, c2, 26)
            },
            &[rand_tensor(&[2, 3], 27), rand_tensor(&[4, 3], 28)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "scale_axis",
            |g, v| {
                let y = g.scale_axis(v[0], v[1], 0)?;
                weighted_sum(g, y, 37)
            },
            &[rand_tensor(&[6, 4], 29), rand_tensor(&[6], 30)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out.push(
        grad_check(
            "broadcast_index_select",
            |g, v| {
                let b = g.broadcast_along(v[0], &[2, 4, 3], 1)?;
                let s = g.index_select(b, 2, &[2, 0, 2])?;
                weighted_sum(g, s, 31)
            },
            &[rand_tensor(&[4], 32)],
            EPS,
            TOL,
        )
        .unwrap(),
    );
    out
}

/// A small detector: 32×32 input, 8 channels, mask branch optional.
pub fn tiny_spec(head: HeadKind, mask: bool, fusion: FusionMode) -> ModelSpec {
    ModelSpec {
        detector: DetectorConfig {
            channels: 8,
            stem_channels: 4,
            mid_channels: 6,
            anchor_sizes: vec![8.0, 16.0],
            rpn_pre_nms_top: 32,
            rpn_post_nms_top: 8,
            rpn_test_post_nms_top: 8,
            rpn_batch: 16,
            rois_per_image: 8,
            head_hidden: 6,
            mask,
            mask_size: 4,
            mask_channels: 3,
            fusion,
            meta_input_size: 16,
            ..DetectorConfig::default()
        },
        num_classes: 3,
        head,
        prn: head == HeadKind::Binary,
    }
}

fn tiny_params(spec: &ModelSpec) -> Params<f64> {
    // small biases so ReLU units sit away from their kinks
    let mut p = init_params::<f64>(spec, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (n, t) in p.iter_mut() {
        if n.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    p
}

fn probe(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        eps: EPS,
        tol,
        abs_floor: 1e-5,
        max_coords_per_input: 24,
    }
}

/// Binds `params` frozen, then swaps in the given variables.
fn bind_with(g: &mut Graph<f64>, params: &Params<f64>, names: &[&str], vars: &[Var]) -> Bound {
    let mut p = Bound::bind_frozen(g, params);
    for (n, v) in names.iter().zip(vars) {
        p.set(n, *v);
    }
    p
}

fn targets_for(rois: &[BBox], gts: &[(usize, BBox)]) -> Vec<Option<RoiTarget>> {
    rois.iter()
        .map(|r| {
            gts.iter()
                .find(|(_, g)| g.iou(r) >= 0.5)
                .map(|&(c, gt)| RoiTarget { class_id: c, gt })
        })
        .collect()
}

/// meta input → object vector → channel attention → head loss (+ meta loss),
/// differentiating with respect to the meta input, PRN and head weights, and
/// the RoI features.
pub fn composed_meta_path(fusion: FusionMode) -> GradCheckReport {
    let spec = tiny_spec(HeadKind::Binary, false, fusion);
    let params = tiny_params(&spec);
    let scene = generate_scene(2, &[0, 1], (32, 32), 11, &SceneConfig::default()).unwrap();
    let inputs: Vec<_> = (0..2).map(|j| build_meta_input(&scene, j, 16, true).unwrap()).collect();
    let batch: Tensor<f64> = stack_meta_inputs(&inputs).unwrap();
    let labels: Vec<usize> = inputs.iter().map(|m| m.class_id).collect();
    let rois = vec![BBox::new(2.0, 2.0, 20.0, 18.0), BBox::new(10.0, 8.0, 30.0, 30.0), BBox::new(0.0, 0.0, 12.0, 12.0)];
    let targets = targets_for(&rois, &[(labels[0], BBox::new(2.0, 3.0, 19.0, 18.0)), (labels[1], BBox::new(11.0, 8.0, 30.0, 29.0))]);
    let z = rand_away_from_zero(&[8, 3], 40);
    let names = ["prn.stem.w", "head.fc.w", "head.cls.w", "prn.meta_cls.w"];
    let mut ins = vec![batch, z];
    ins.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
    let name = format!("meta_path_{fusion:?}").to_lowercase();
    grad_check_with(
        &name,
        |g, v| {
            let p = bind_with(g, &params, &names, &v[2..]);
            let vecs = object_vectors(g, &p, &spec, v[0])?;
            let mut terms = vec![meta_loss(g, &p, vecs, &labels)?];
            for (m, &c) in labels.iter().enumerate() {
                let col = g.index_select(vecs, 1, &[m])?;
                let feats = remodel_rois(g, v[1], col, fusion)?;
                let out = predictor_head(g, &p, feats, None)?;
                let l = detection_losses(g, &out, HeadKind::Binary, Some(c), &rois, &targets, None, [0.1, 0.1, 0.2, 0.2])?;
                terms.push(l.cls);
                terms.push(l.reg);
            }
            g.add_all(&terms)
        },
        &ins,
        probe(TOL),
    )
    .unwrap()
}

/// image → backbone → RPN losses, with respect to the image and the
/// backbone and RPN weights.
pub fn composed_rpn_path() -> GradCheckReport {
    let spec = tiny_spec(HeadKind::Softmax, false, FusionMode::Channelwise);
    let params = tiny_params(&spec);
    let scene = generate_scene(2, &[0, 1], (32, 32), 12, &SceneConfig::default()).unwrap();
    let image: Tensor<f64> = scene.image.to_tensor().reshape(&[1, 3, 32, 32]).unwrap();
    let gts: Vec<BBox> = scene.annotations.iter().map(|a| a.bbox).collect();
    let names = ["backbone.stem.w", "trunk.3.w", "rpn.conv.w", "rpn.obj.w", "rpn.delta.w"];
    let mut ins = vec![image];
    ins.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
    grad_check_with(
        "image_to_rpn_loss",
        |g, v| {
            let p = bind_with(g, &params, &names, &v[1..]);
            let fm = backbone_forward(g, &p, v[0])?;
            let out = rpn_forward(g, &p, &fm, &spec.detector)?;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let t = rpn_targets(&out.anchors, fm.height * fm.width, &gts, &[], &spec.detector, &mut rng)?;
            let (c, r) = rpn_losses(g, &out, &t)?;
            g.add_all(&[c, r])
        },
        &ins,
        probe(TOL),
    )
    .unwrap()
}

/// RoI-aligned mask features → (attention) → mask head → per-pixel BCE,
/// with respect to the feature map, the attentive vector and mask weights.
pub fn composed_mask_path(fusion: FusionMode) -> GradCheckReport {
    let spec = tiny_spec(HeadKind::Binary, true, fusion);
    let params = tiny_params(&spec);
    let scene = generate_scene(2, &[0, 1], (32, 32), 13, &SceneConfig::default()).unwrap();
    let rois: Vec<BBox> = scene.annotations.iter().map(|a| a.bbox).collect();
    let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.to_array()).collect();
    let mt: Vec<Vec<f64>> = scene.annotations.iter().zip(&rois).map(|(a, r)| mask_targets(&a.mask, r, 4)).collect();
    let fm = rand_tensor(&[1, 8, 4, 4], 41);
    let v = rand_tensor(&[8, 1], 42).map(|x| 0.5 + 0.4 * x);
    let names = ["mask.conv.w", "mask.out.w", "mask.out.b"];
    let mut ins = vec![fm, v];
    ins.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
    let name = format!("mask_path_{fusion:?}").to_lowercase();
    grad_check_with(
        &name,
        |g, x| {
            let p = bind_with(g, &params, &names, &x[2..]);
            let fm = metarcnn::detector::FeatureMap {
                var: x[0],
                stride: 8,
                height: 4,
                width: 4,
            };
            let feats = mask_features(g, &fm, &boxes, &spec.detector)?;
            let feats = remodel_mask_features(g, feats, x[1], fusion)?;
            let logits = metarcnn::detector::mask_head(g, &p, feats)?;
            let flat: Vec<f64> = mt.iter().flatten().copied().collect();
            let w = vec![1.0 / flat.len() as f64; flat.len()];
            g.bce_with_logits(logits, &flat, &w)
        },
        &ins,
        probe(TOL),
    )
    .unwrap()
}

/// The full training objective of one episode (RPN, head, mask and meta
/// terms) with respect to weights that do not move the proposals.
pub fn composed_episode(mask: bool) -> GradCheckReport {
    let spec = tiny_spec(HeadKind::Binary, mask, FusionMode::Channelwise);
    let params = tiny_params(&spec);
    let scene = generate_scene(2, &[0, 1], (32, 32), 14, &SceneConfig::default()).unwrap();
    let meta_inputs: Vec<_> = (0..2).map(|j| build_meta_input(&scene, j, 16, true).unwrap()).collect();
    let mut c_meta: Vec<usize> = scene.annotations.iter().map(|a| a.class_id).collect();
    c_meta.sort_unstable();
    c_meta.dedup();
    let mut meta_inputs = meta_inputs;
    meta_inputs.sort_by_key(|m| m.class_id);
    let ep = Episode {
        sample: &scene,
        phase: Phase::One,
        targets: vec![0, 1],
        ignored: vec![],
        c_meta,
        meta_inputs,
    };
    let mut names = vec!["prn.stem.w", "prn.meta_cls.w", "roi.fc.w", "head.fc.w", "head.cls.w", "head.box.w"];
    if mask {
        names.extend(["mask.conv.w", "mask.out.w"]);
    }
    let ins: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let name = if mask { "episode_objective_mask" } else { "episode_objective" };
    grad_check_with(
        name,
        |g, v| {
            let p = bind_with(g, &params, &names, v);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let l = episode_objective(g, &p, &spec, &ep, &ObjectiveOptions::default(), &mut rng)?;
            Ok(l.total)
        },
        &ins,
        probe(TOL),
    )
    .unwrap()
}

pub fn composed_checks() -> Vec<GradCheckReport> {
    let mut out: Vec<GradCheckReport> = [FusionMode::Channelwise, FusionMode::Concat, FusionMode::Plus]
        .into_iter()
        .map(composed_meta_path)
        .collect();
    out.push(composed_rpn_path());
    out.push(composed_episode(false));
    out
}

pub fn mask_checks() -> Vec<GradCheckReport> {
    let mut out: Vec<GradCheckReport> = [FusionMode::Channelwise, FusionMode::Concat]
        .into_iter()
        .map(composed_mask_path)
        .collect();
    out.push(composed_episode(true));
    out
}

pub fn print_report(r: &GradCheckReport) {
    println!(
        "  {:<28} max_rel_err={:.3e} tol={:.0e} coords={} {}",
        r.op_name,
        r.max_rel_error,
        r.tolerance,
        r.coords_checked,
        if r.passed { "ok" } else { "FAILED" }
    );
}

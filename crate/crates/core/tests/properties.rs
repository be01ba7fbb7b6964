mod common;

use blendfield::blending::{
    blend_color_alpha, blend_density, blend_smooth, render_blended, smooth_blend_weight, BlendMode, BlendSampling,
    BlendSettings, DensitySum,
};
use blendfield::fields::{checkpoint, Activation, FieldCotangent, FieldInput, FieldSample, MlpField, RadianceField};
use blendfield::geometry::{
    camera_distance, near_far_planes, project_box_edges, ray_box_intersect, sample_pose, CameraPose,
    PoseSamplingConfig, Ray, RoiBox, SceneType,
};
use blendfield::guidance::{
    anneal_weights, depth_loss, directional_prompt_for_angles, similarity_loss, strip_view_suffix,
    transmittance_loss, LossConfig, MockScorer, Scorer, ViewBucket,
};
use blendfield::math::Vec3;
use blendfield::metrics::{direction_consistency, direction_similarity, r_precision};
use blendfield::raster::{Image, Resolution, ScalarMap};
use blendfield::renderer::{composite, render_roi, render_view, RawSample, RenderSettings};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit_vec3() -> impl Strategy<Value = Vec3> {
    vec3(1.0).prop_filter_map("degenerate direction", |v| v.try_normalize())
}

fn roi_box() -> impl Strategy<Value = RoiBox> {
    (vec3(2.0), (0.05f64..2.0, 0.05f64..2.0, 0.05f64..2.0))
        .prop_map(|(c, (x, y, z))| RoiBox::new(c, Vec3::new(x, y, z)).unwrap())
}

fn raw_sample(max_density: f64) -> impl Strategy<Value = RawSample> {
    (-5.0..max_density, prop::array::uniform3(-6.0f64..6.0), 1e-3f64..1.0).prop_map(
        |(raw_density, raw_color, delta)| RawSample {
            raw_density,
            raw_color,
            delta,
        },
    )
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Softplus)]
}

fn image(res: Resolution) -> impl Strategy<Value = Image> {
    prop::collection::vec(prop::array::uniform3(0.0f64..1.0), res.pixel_count()).prop_map(move |pixels| Image {
        width: res.width,
        height: res.height,
        pixels,
    })
}

fn permute(v: Vec3, p: [usize; 3]) -> Vec3 {
    Vec3::new(v[p[0]], v[p[1]], v[p[2]])
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

proptest! {
    #[test]
    fn ray_box_midpoint_is_inside(origin in vec3(5.0), dir in unit_vec3(), roi in roi_box()) {
        let ray = Ray::new(origin, dir, 0.0, 50.0).unwrap();
        if let Some((t0, t1)) = ray_box_intersect(&ray, &roi) {
            prop_assert!(t0 < t1);
            let m = ray.at(0.5 * (t0 + t1));
            let (lo, hi) = (roi.min(), roi.max());
            for a in 0..3 {
                let slack = 1e-9 * (1.0 + m[a].abs());
                prop_assert!(m[a] >= lo[a] - slack && m[a] <= hi[a] + slack, "axis {a}: {m:?}");
            }
        }
    }

    #[test]
    fn ray_box_is_symmetric_under_axis_permutation(origin in vec3(5.0), dir in unit_vec3(), roi in roi_box()) {
        let ray = Ray::new(origin, dir, 0.0, 50.0).unwrap();
        let base = ray_box_intersect(&ray, &roi);
        for p in PERMUTATIONS {
            let r = Ray { origin: permute(origin, p), direction: permute(ray.direction, p), ..ray };
            let b = RoiBox::new(permute(roi.center(), p), permute(roi.dims(), p)).unwrap();
            let hit = ray_box_intersect(&r, &b);
            match (base, hit) {
                (Some((a0, a1)), Some((b0, b1))) => {
                    prop_assert!((a0 - b0).abs() <= 1e-12 * a0.abs().max(1.0));
                    prop_assert!((a1 - b1).abs() <= 1e-12 * a1.abs().max(1.0));
                }
                (None, None) => {}
                other => prop_assert!(false, "permutation {p:?} changed hit: {other:?}"),
            }
        }
    }

    #[test]
    fn camera_distance_fills_the_fov(afov in 0.05f64..3.0, e_max in 1e-3f64..100.0) {
        let d = camera_distance(afov, e_max).unwrap();
        let half = (0.5 * afov).tan() * d;
        prop_assert!((half - 0.5 * e_max).abs() <= 1e-12 * e_max.max(1.0));
    }

    #[test]
    fn near_far_contains_the_box(d in 0.0f64..50.0, diag in 1e-3f64..20.0, min_near in 1e-4f64..0.5) {
        let (n, f) = near_far_planes(d, diag, min_near);
        prop_assert!(f - n >= diag - 1e-12 * f.max(1.0));
        prop_assert!(n >= min_near);
        prop_assert!(n <= (d - 0.5 * diag).max(min_near));
        prop_assert!(f >= d + 0.5 * diag);
    }

    #[test]
    fn sample_pose_is_deterministic(seed in any::<u64>(), roi in roi_box(), forward in any::<bool>(), com in vec3(1.0)) {
        let cfg = PoseSamplingConfig {
            scene_type: if forward { SceneType::ForwardFacing } else { SceneType::FullOrbit },
            ..Default::default()
        };
        let target = roi.center() + com.mul_elem(roi.dims()) * 0.4;
        let draw = |s| sample_pose(&cfg, &roi, 1.0, target, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let (a, b) = (draw(seed), draw(seed));
        prop_assert_eq!(a.pose, b.pose);
        prop_assert_eq!(a.look_target, b.look_target);
        prop_assert!(a.pose.is_orthonormal(1e-9));
    }

    #[test]
    fn edges_without_occluders_follow_the_frustum(
        roi in roi_box(),
        position in vec3(6.0),
        target in vec3(1.0),
        afov in 0.3f64..2.0,
        w in 4usize..40,
        h in 4usize..40,
    ) {
        let Ok(pose) = CameraPose::look_at(position, target, Vec3::new(0.0, 1.0, 0.0), afov) else {
            return Ok(());
        };
        let depth = ScalarMap::filled(Resolution::new(w, h), f64::INFINITY);
        let samples = project_box_edges(&roi, &pose, &depth, 9);
        prop_assert!(samples.iter().all(|s| s.visible));
        let tan = (0.5 * afov).tan();
        let aspect = h as f64 / w as f64;
        let mut in_frustum = 0;
        for (a, b) in roi.edges() {
            for k in 0..9 {
                let rel = a.lerp(b, k as f64 / 8.0) - pose.position;
                let z = rel.dot(pose.forward);
                if z <= 1e-12 {
                    continue;
                }
                let (x, y) = (rel.dot(pose.right) / z, rel.dot(pose.up) / z);
                if (-tan..tan).contains(&x) && y > -tan * aspect && y <= tan * aspect {
                    in_frustum += 1;
                }
            }
        }
        prop_assert_eq!(samples.len(), in_frustum);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clone_mutation_leaves_source_alone(seed in any::<u64>(), index in any::<prop::sample::Index>(), v in -1.0f32..1.0) {
        let source = MlpField::new(common::small_arch(), seed).unwrap();
        let before = source.checksum();
        let mut copy = source.clone();
        let i = index.index(copy.param_count());
        copy.update_params(|p| p[i] += v + 0.5);
        prop_assert_eq!(source.checksum(), before);
        prop_assert_ne!(copy.checksum(), before);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise(seed in any::<u64>(), probes in prop::collection::vec((vec3(2.0), unit_vec3()), 1..16)) {
        let field = MlpField::new(common::small_arch(), seed).unwrap();
        let (back, _) = checkpoint::decode(&checkpoint::encode(&field, Default::default())).unwrap();
        for (p, d) in probes {
            let (a, b) = (field.eval(p, d), back.eval(p, d));
            prop_assert_eq!(a.raw_density.to_bits(), b.raw_density.to_bits());
            for c in 0..3 {
                prop_assert_eq!(a.raw_color[c].to_bits(), b.raw_color[c].to_bits());
            }
        }
    }
}

/// `sum_i <cotangent_i, field(x_i)>` for fixed probes.
fn probe_objective(field: &MlpField, inputs: &[FieldInput], cts: &[FieldCotangent]) -> f64 {
    inputs
        .iter()
        .zip(cts)
        .map(|(i, ct)| {
            let s = field.eval(i.position, i.direction);
            ct.raw_density * s.raw_density + (0..3).map(|c| ct.raw_color[c] * s.raw_color[c]).sum::<f64>()
        })
        .sum()
}

#[test]
fn field_gradient_matches_finite_differences_on_every_parameter() {
    let field = MlpField::new(common::small_arch(), 17).unwrap();
    let inputs: Vec<FieldInput> = (0..4)
        .map(|k| {
            let t = k as f64 * 0.7;
            FieldInput {
                position: Vec3::new(0.3 * t.sin(), -0.2 + 0.1 * t, 0.4 * t.cos()),
                direction: Vec3::new(t.cos(), 0.3, t.sin()).try_normalize().unwrap(),
            }
        })
        .collect();
    let cts: Vec<FieldCotangent> = (0..4)
        .map(|k| FieldCotangent {
            raw_density: 0.5 - 0.3 * k as f64,
            raw_color: [0.2 * k as f64, -0.7, 0.4],
        })
        .collect();
    let mut grad = vec![0.0; field.param_count()];
    field.eval_with_gradient(&inputs, &cts, &mut grad).unwrap();
    let h = 1e-4f32;
    let mut worst = (0.0f64, 0usize);
    for i in 0..field.param_count() {
        let base = field.params()[i];
        let shifted = |d: f32| {
            let mut f = field.clone();
            f.update_params(|p| p[i] = base + d);
            (f.params()[i] as f64, probe_objective(&f, &inputs, &cts))
        };
        let ((xp, lp), (xm, lm)) = (shifted(h), shifted(-h));
        let fd = (lp - lm) / (xp - xm);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(common::GRAD_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    assert!(worst.0 < 1e-3, "param {} rel err {}", worst.1, worst.0);
}

proptest! {
    #[test]
    fn weights_and_transmittance_partition_unity(
        samples in prop::collection::vec(raw_sample(20.0), 1..40),
        act in activation(),
        bg in prop::array::uniform3(0.0f64..1.0),
    ) {
        let out = composite(&samples, act, bg);
        let sum: f64 = out.weights.iter().sum();
        prop_assert!((sum + out.final_transmittance - 1.0).abs() < 1e-6);
        // T_i = 1 - sum_{j<i} w_j is nonincreasing.
        let mut t = 1.0;
        for w in &out.weights {
            prop_assert!(*w >= 0.0);
            let next = t - w;
            prop_assert!(next <= t);
            t = next;
        }
    }

    #[test]
    fn splitting_a_segment_changes_nothing(
        samples in prop::collection::vec(raw_sample(20.0), 1..20),
        index in any::<prop::sample::Index>(),
        act in activation(),
        bg in prop::array::uniform3(0.0f64..1.0),
    ) {
        let i = index.index(samples.len());
        let mut split = samples.clone();
        let half = RawSample { delta: 0.5 * samples[i].delta, ..samples[i] };
        split.splice(i..=i, [half, half]);
        let (a, b) = (composite(&samples, act, bg), composite(&split, act, bg));
        for c in 0..3 {
            prop_assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-9);
        }
        prop_assert!((a.final_transmittance - b.final_transmittance).abs() < 1e-9);
    }

    #[test]
    fn opaque_pixels_ignore_the_background(
        samples in prop::collection::vec(raw_sample(40.0), 1..30),
        act in activation(),
        bg in prop::array::uniform3(0.0f64..1.0),
        other in prop::array::uniform3(0.0f64..1.0),
    ) {
        let a = composite(&samples, act, bg);
        prop_assume!(a.final_transmittance < 1e-6);
        let b = composite(&samples, act, other);
        for c in 0..3 {
            prop_assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-5);
        }
    }
}

/// A sphere with a smoothly varying color.
struct Blob;

impl RadianceField for Blob {
    fn eval(&self, p: Vec3, d: Vec3) -> FieldSample {
        FieldSample {
            raw_density: 4.0 - 6.0 * p.length(),
            raw_color: [p.x * 2.0, p.y - d.z, 1.0 - p.z],
        }
    }
}

/// The same sphere, shifted and recolored.
struct OtherBlob;

impl RadianceField for OtherBlob {
    fn eval(&self, p: Vec3, _d: Vec3) -> FieldSample {
        FieldSample {
            raw_density: 3.0 - 5.0 * (p - Vec3::new(0.2, 0.1, 0.0)).length(),
            raw_color: [-1.0, p.x, 2.0],
        }
    }
}

fn orbit_pose(az: f64, el: f64, afov: f64) -> CameraPose {
    let pos = Vec3::new(3.0 * el.cos() * az.sin(), 3.0 * el.sin(), 3.0 * el.cos() * az.cos());
    CameraPose::look_at(pos, Vec3::new(0.05, -0.03, 0.02), Vec3::new(0.0, 1.0, 0.0), afov).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covering_box_roi_render_equals_full_render(az in -3.1f64..3.1, el in -1.2f64..1.2, afov in 0.4f64..1.5, act in activation()) {
        let pose = orbit_pose(az, el, afov);
        let settings = RenderSettings {
            resolution: Resolution::new(7, 5),
            near: 0.5,
            far: 6.0,
            samples_per_ray: 48,
            activation: act,
            ..Default::default()
        };
        let bg = Image::filled(settings.resolution, [0.2, 0.5, 0.9]);
        let cover = RoiBox::new(Vec3::ZERO, Vec3::splat(40.0)).unwrap();
        let a = render_view(&Blob, &pose, &settings, &bg).unwrap();
        let b = render_roi(&Blob, &cover, &pose, &settings, &bg).unwrap();
        prop_assert!(a.rgb.max_abs_diff(&b.rgb) < 1e-6);
    }

    #[test]
    fn covering_box_replace_equals_generated_render(az in -3.1f64..3.1, el in -1.2f64..1.2, act in activation()) {
        let pose = orbit_pose(az, el, 0.9);
        let settings = RenderSettings {
            resolution: Resolution::new(6, 6),
            near: 0.5,
            far: 6.0,
            samples_per_ray: 48,
            activation: act,
            ..Default::default()
        };
        let bg = Image::filled(settings.resolution, [1.0; 3]);
        let cover = RoiBox::new(Vec3::ZERO, Vec3::splat(40.0)).unwrap();
        let blend = BlendSettings { mode: BlendMode::Replace, center: Vec3::ZERO, sampling: BlendSampling::Uniform };
        let a = render_blended(&Blob, &OtherBlob, &cover, &blend, &pose, &settings, &bg).unwrap();
        let b = render_view(&OtherBlob, &pose, &settings, &bg).unwrap();
        prop_assert!(a.rgb.max_abs_diff(&b.rgb) < 1e-6);
    }
}

proptest! {
    /// Kept to `alpha * d / diag <= 30`, where `1 - exp(-x)` is still
    /// distinguishable from 1 in double precision.
    #[test]
    fn smooth_weight_range_and_monotonicity(
        roi in roi_box(),
        offset in vec3(1.5),
        alpha in 1e-3f64..10.0,
        bump in 1e-3f64..1.0,
    ) {
        let x = roi.center() + offset * roi.diagonal();
        let (c, diag) = (roi.center(), roi.diagonal());
        let f = smooth_blend_weight(x, c, diag, alpha);
        prop_assert!((0.0..1.0).contains(&f));
        prop_assert_eq!(smooth_blend_weight(x, c, diag, 0.0), 0.0);
        if x.distance(c) > 1e-9 * diag {
            prop_assert!(smooth_blend_weight(x, c, diag, alpha * (1.0 + bump)) > f);
        }
    }

    #[test]
    fn smooth_blend_stays_in_the_convex_hull(
        o in (-20.0f64..20.0, prop::array::uniform3(-20.0f64..20.0)),
        g in (-20.0f64..20.0, prop::array::uniform3(-20.0f64..20.0)),
        f in 0.0f64..=1.0,
    ) {
        let so = FieldSample { raw_density: o.0, raw_color: o.1 };
        let sg = FieldSample { raw_density: g.0, raw_color: g.1 };
        let b = blend_smooth(so, sg, f);
        let inside = |v: f64, a: f64, c: f64| v >= a.min(c) - 1e-12 && v <= a.max(c) + 1e-12;
        prop_assert!(inside(b.raw_density, o.0, g.0));
        for k in 0..3 {
            prop_assert!(inside(b.raw_color[k], o.1[k], g.1[k]));
        }
    }

    /// Raw colors within +-30 keep the sigmoid away from rounding to 0 or 1.
    #[test]
    fn alpha_blended_color_is_in_the_open_unit_interval(
        co in prop::array::uniform3(-30.0f64..30.0),
        cg in prop::array::uniform3(-30.0f64..30.0),
        ao in 0.0f64..=1.0,
        ag in 0.0f64..=1.0,
        eps in 1e-12f64..1e-3,
    ) {
        for v in blend_color_alpha(co, cg, ao, ag, eps) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn out_activation_density_dominates_under_relu(o in -1e3f64..1e3, g in -1e3f64..1e3) {
        let inside = blend_density(DensitySum::InActivation, o, g, Activation::Relu);
        let outside = blend_density(DensitySum::OutActivation, o, g, Activation::Relu);
        prop_assert!(outside >= inside);
    }
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| v.into_iter().map(|x| x / n).collect())
}

proptest! {
    #[test]
    fn similarity_of_unit_vectors_is_bounded(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let (Some(a), Some(b)) = (unit(a), unit(b)) else { return Ok(()) };
        prop_assert!(similarity_loss(&a, &b).unwrap().abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn auxiliary_losses_are_nonpositive_and_nonincreasing(
        m1 in 0.0f64..=1.0,
        m2 in 0.0f64..=1.0,
        tau in 0.01f64..=1.0,
        values in prop::collection::vec(0.0f64..3.0, 2..20),
        s1 in 0.0f64..3.0,
        s2 in 0.0f64..3.0,
        rho in 0.01f64..2.0,
    ) {
        let (lo, hi) = (m1.min(m2), m1.max(m2));
        prop_assert!(transmittance_loss(lo, tau) <= 0.0);
        prop_assert!(transmittance_loss(hi, tau) <= transmittance_loss(lo, tau));
        let map = |s: f64| ScalarMap { width: values.len(), height: 1, values: values.iter().map(|v| v * s).collect() };
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let (dl, dh) = (depth_loss(&map(lo), rho), depth_loss(&map(hi), rho));
        prop_assert!(dl <= 0.0 && dh <= 0.0);
        prop_assert!(dh <= dl + 1e-15);
    }

    #[test]
    fn anneal_weights_never_decrease(total in 1u64..2000, start in 0.0f64..=1.0, len in 0.0f64..=1.0) {
        let cfg = LossConfig { ramp_start: start * 0.5, ramp_end: (start * 0.5 + len * 0.5).min(1.0), ..Default::default() };
        let mut prev = (0.0, 0.0);
        for step in 0..=total {
            let w = anneal_weights(step, total, &cfg);
            prop_assert!(w.0 >= prev.0 && w.1 >= prev.1);
            prev = w;
        }
        prop_assert_eq!(prev, (cfg.lambda_t, cfg.lambda_d));
    }

    #[test]
    fn every_view_gets_exactly_one_suffix(az in -180.0f64..=180.0, el in -90.0f64..=90.0, forward in any::<bool>()) {
        let st = if forward { SceneType::ForwardFacing } else { SceneType::FullOrbit };
        let prompt = directional_prompt_for_angles("a vase", az, el, st).unwrap();
        let matches = ViewBucket::ALL.iter().filter(|b| prompt.ends_with(b.suffix())).count();
        prop_assert_eq!(matches, 1);
        prop_assert_eq!(strip_view_suffix(&prompt), "a vase");
        prop_assert!(!(forward && prompt.ends_with(ViewBucket::Back.suffix())));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mock_scorer_is_minimized_only_by_its_target(
        target in image(Resolution::square(4)),
        seed in any::<u64>(),
        index in any::<prop::sample::Index>(),
        channel in 0usize..3,
        step in 1.0f64..40.0,
    ) {
        let s = MockScorer::with_target(&target, "a lamp", seed);
        let text = s.embed_text("a lamp, side view").unwrap();
        let exact = similarity_loss(&s.embed_image(&target).unwrap(), &text).unwrap();
        prop_assert!((exact + 1.0).abs() < 1e-12);
        let mut other = target.clone();
        let i = index.index(other.pixels.len());
        let v = other.pixels[i][channel];
        let d = step / 255.0;
        other.pixels[i][channel] = if v + d <= 1.0 { v + d } else { v - d };
        let changed = similarity_loss(&s.embed_image(&other).unwrap(), &text).unwrap();
        prop_assert!(changed > -1.0);
    }

    #[test]
    fn metrics_are_bounded_deterministic_and_reversible(
        a in prop::collection::vec(image(Resolution::square(3)), 2..6),
        noise in prop::collection::vec(image(Resolution::square(3)), 6),
        seed in any::<u64>(),
    ) {
        let s = MockScorer::new(Resolution::square(3), seed);
        let b: Vec<Image> = a.iter().zip(&noise).map(|(x, n)| Image::from_fn(x.resolution(), |c, r| {
            let (p, q) = (x.get(c, r), n.get(c, r));
            std::array::from_fn(|k| 0.5 * (p[k] + q[k]))
        })).collect();
        let c = direction_consistency(&s, &a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.mean));
        prop_assert_eq!(c, direction_consistency(&s, &a, &b).unwrap());
        let (ra, rb): (Vec<Image>, Vec<Image>) = (a.iter().rev().cloned().collect(), b.iter().rev().cloned().collect());
        let rev = direction_consistency(&s, &ra, &rb).unwrap();
        prop_assert!((rev.mean - c.mean).abs() < 1e-12);

        let sim = direction_similarity(&s, &a[0], &b[0], "a room", "a room with a lamp").unwrap();
        prop_assert!((-1.0..=1.0).contains(&sim));
        let pool = ["x", "y", "z"];
        let truth: Vec<&str> = (0..a.len()).map(|i| pool[i % 3]).collect();
        let r = r_precision(&s, &a, &truth, &pool).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

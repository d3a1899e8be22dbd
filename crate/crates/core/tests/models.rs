use rdet_core::analysis::{cost_for_config, count_params};
use rdet_core::backbone::{cspdarknet_forward, repvgg_backbone_forward};
use rdet_core::exec::{Exec, Meter};
use rdet_core::head::{decoupled_head_forward, tood_head_forward, Head};
use rdet_core::model_io::config::{ConvKind, NeckKind};
use rdet_core::model_io::{init_random, init_zeros, ModelConfig, WeightStore};
use rdet_core::neck::{asff_fuse, gsconv_forward, gsconv_neck_forward, pafpn_forward};
use rdet_core::reparam::fuse_model;
use rdet_core::tensor::Shape;
use rdet_core::{Detector, Error, Tensor};

const SIZE: usize = 64;

fn configs() -> Vec<(&'static str, ModelConfig)> {
    let pai = ModelConfig::pai_yolox_s;
    vec![
        ("yolox_s", ModelConfig::yolox_s()),
        ("pai_yolox_s", pai()),
        ("asff", ModelConfig::pai_yolox_s_asff()),
        ("asff_sim", ModelConfig::pai_yolox_s_asff_sim()),
        ("gsconv_all", ModelConfig { neck: NeckKind::GsConvAll, ..pai() }),
        ("gsconv_part", ModelConfig { neck: NeckKind::GsConvPart, ..pai() }),
        ("tood2", pai().with_tood(2)),
        ("tood6", pai().with_tood(6)),
        (
            "tood_rep",
            ModelConfig {
                tood_conv_kind: ConvKind::Rep,
                tood_final_kind: ConvKind::Rep,
                ..pai().with_tood(3)
            },
        ),
    ]
    .into_iter()
    .map(|(n, c)| (n, c.with_input(SIZE, SIZE)))
    .collect()
}

fn input(seed: u64) -> Tensor {
    let img = rdet_core::image::Image::synthetic(SIZE, SIZE, seed);
    rdet_core::predictor::preprocess_letterbox(&img, (SIZE, SIZE)).unwrap().0
}

fn max_diff(a: &rdet_core::head::HeadOutputs, b: &rdet_core::head::HeadOutputs) -> f32 {
    a.levels
        .iter()
        .zip(&b.levels)
        .flat_map(|(x, y)| [x.cls.max_abs_diff(&y.cls), x.reg.max_abs_diff(&y.reg), x.obj.max_abs_diff(&y.obj)])
        .fold(0.0, f32::max)
}

#[test]
fn every_config_builds_and_exports_its_store() {
    for (name, cfg) in configs() {
        let store = init_random(&cfg, 1).unwrap();
        let schema = Detector::schema(&cfg).unwrap();
        assert_eq!(store.len(), schema.len(), "{name}");
        let model = Detector::load(&cfg, &store).unwrap();
        assert!(model.export().bit_identical(&store), "{name}");
        assert!(model.fusable_nodes() > 0, "{name}");
        Detector::load(&cfg, &init_zeros(&cfg).unwrap()).unwrap();
    }
}

#[test]
fn init_is_deterministic_and_size_independent() {
    let cfg = ModelConfig::pai_yolox_s().with_input(SIZE, SIZE);
    let a = init_random(&cfg, 5).unwrap();
    assert!(a.bit_identical(&init_random(&cfg, 5).unwrap()));
    assert!(!a.bit_identical(&init_random(&cfg, 6).unwrap()));
    let big = cfg.clone().with_input(128, 96);
    assert!(a.bit_identical(&init_random(&big, 5).unwrap()));
    for (name, t) in a.iter() {
        if name.ends_with("running_var") {
            assert!(t.data.iter().all(|&v| v >= 0.0 && v.is_finite()), "{name}");
        }
    }
}

#[test]
fn random_model_activations_stay_bounded() {
    let cfg = ModelConfig::pai_yolox_s().with_input(SIZE, SIZE);
    let model = Detector::load(&cfg, &init_random(&cfg, 2).unwrap()).unwrap();
    let pyr = model.features(&input(9)).unwrap();
    for level in pyr.levels() {
        assert!(level.max_abs() < 100.0, "{}", level.max_abs());
    }
}

#[test]
fn load_rejects_missing_extra_and_misshaped_weights() {
    let cfg = ModelConfig::yolox_s().with_input(SIZE, SIZE);
    let store = init_zeros(&cfg).unwrap();
    let (first, _) = store.iter().next().unwrap();
    let first = first.to_string();

    let mut missing = WeightStore::new();
    for (n, t) in store.iter().filter(|(n, _)| *n != first) {
        missing.insert(n, t.dims.clone(), t.data.clone()).unwrap();
    }
    assert!(matches!(Detector::load(&cfg, &missing), Err(Error::MissingWeight(n)) if n == first));

    let mut extra = store.clone();
    extra.insert("head.bogus", vec![1], vec![0.0]).unwrap();
    assert!(matches!(Detector::load(&cfg, &extra), Err(Error::UnusedWeights(v)) if v == ["head.bogus"]));

    let mut misshaped = WeightStore::new();
    for (n, t) in store.iter() {
        if n == first {
            misshaped.insert(n, vec![t.numel() + 1], vec![0.0; t.numel() + 1]).unwrap();
        } else {
            misshaped.insert(n, t.dims.clone(), t.data.clone()).unwrap();
        }
    }
    assert!(matches!(Detector::load(&cfg, &misshaped), Err(Error::WeightShape { .. })));
}

#[test]
fn fusion_is_equivalent_idempotent_and_reloadable() {
    let x = input(3);
    for (name, cfg) in configs() {
        let model = Detector::load(&cfg, &init_random(&cfg, 11).unwrap()).unwrap();
        let fused = fuse_model(&model).unwrap();
        assert_eq!(fused.fusable_nodes(), 0, "{name}");
        assert_eq!(fuse_model(&fused).unwrap(), fused, "{name}");

        let reloaded = Detector::load(&cfg, &fused.export()).unwrap();
        assert_eq!(reloaded, fused, "{name}");

        let d = max_diff(&model.forward(&x).unwrap(), &fused.forward(&x).unwrap());
        assert!(d < 1e-4, "{name}: {d}");

        let (raw, deploy) = (count_params(&model)[3], count_params(&fused)[3]);
        assert!(deploy <= raw, "{name}: {deploy} > {raw}");
    }
}

#[test]
fn flops_scale_quadratically_and_sections_sum() {
    for (name, cfg) in configs() {
        let at = |s: usize| cost_for_config(&cfg.clone().with_input(s, s), true).unwrap();
        let (small, big) = (at(640), at(1280));
        let ratio = big.total.flops as f64 / small.total.flops as f64;
        assert!((3.9..=4.1).contains(&ratio), "{name}: {ratio}");
        for r in [&small, &big] {
            let sum = r.sections().iter().fold([0u64; 4], |mut acc, (_, s)| {
                for (a, v) in acc.iter_mut().zip([s.params, s.macs, s.flops, s.ops]) {
                    *a += v;
                }
                acc
            });
            assert_eq!(sum, [r.total.params, r.total.macs, r.total.flops, r.total.ops], "{name}");
        }
    }
}

#[test]
fn single_conv_closed_forms() {
    use rdet_core::conv::ConvParams;
    let p = ConvParams::square(Tensor::zeros(Shape::new(16, 3, 3, 3).unwrap()), Some(vec![0.0; 16]), 1, 1).unwrap();
    assert_eq!(p.param_count(), 448);

    let p = ConvParams::square(Tensor::zeros(Shape::new(16, 16, 3, 3).unwrap()), None, 1, 1).unwrap();
    let mut m = Meter::new();
    let out = m.conv(&Shape::new(1, 16, 32, 32).unwrap(), &p).unwrap();
    assert_eq!((out.h, out.w), (32, 32));
    assert_eq!(m.macs, 2_359_296);
}

#[test]
fn module_forwards_have_pyramid_shapes() {
    let x = input(4);
    let expect = |c: [usize; 3]| {
        [(c[0], SIZE / 8), (c[1], SIZE / 16), (c[2], SIZE / 32)].map(|(c, s)| Shape::new(1, c, s, s).unwrap())
    };

    let cfg = ModelConfig::yolox_s().with_input(SIZE, SIZE);
    let store = init_random(&cfg, 1).unwrap();
    let chans = Detector::load(&cfg, &store).unwrap().pyramid_channels().unwrap();
    assert_eq!(chans, [128, 256, 512]);
    let pyr = cspdarknet_forward(&x, &store, &cfg).unwrap();
    assert_eq!(pyr.levels().map(|t| t.shape()), expect(chans));
    let neck = pafpn_forward(&pyr, &store, &cfg).unwrap();
    assert_eq!(neck.levels().map(|t| t.shape()), expect(chans));
    let outs = decoupled_head_forward(&neck, &store, &cfg).unwrap();
    for (l, s) in outs.levels.iter().zip(expect(chans)) {
        assert_eq!(l.cls.shape(), s.with_c(80));
        assert_eq!(l.reg.shape(), s.with_c(4));
        assert_eq!(l.obj.shape(), s.with_c(1));
    }
    // the standalone entry points agree with the assembled model
    let model = Detector::load(&cfg, &store).unwrap();
    assert_eq!(model.forward(&x).unwrap(), outs);

    let cfg = ModelConfig::pai_yolox_s().with_input(SIZE, SIZE);
    let store = init_random(&cfg, 1).unwrap();
    let pyr = repvgg_backbone_forward(&x, &store, &cfg).unwrap();
    assert_eq!(pyr.levels().map(|t| t.shape()), expect(chans));

    let cfg = ModelConfig { neck: NeckKind::GsConvAll, ..cfg };
    let store = init_random(&cfg, 1).unwrap();
    let neck = gsconv_neck_forward(&pyr, &store, &cfg, true).unwrap();
    assert_eq!(neck.levels().map(|t| t.shape()), expect(chans));
    let lateral = gsconv_forward(&pyr.p5, &store, "neck.lateral_conv0", 256, 1, 1).unwrap();
    assert_eq!(lateral.shape(), pyr.p5.shape().with_c(256));

    let cfg = ModelConfig::pai_yolox_s_asff().with_input(SIZE, SIZE);
    let store = init_random(&cfg, 1).unwrap();
    for level in 0..3 {
        let fused = asff_fuse(&pyr, level, &store).unwrap();
        assert_eq!(fused.shape(), expect(chans)[level]);
    }
    assert!(asff_fuse(&pyr, 3, &store).is_err());
}

#[test]
fn tood_attention_weights_are_open_unit_interval() {
    let cfg = ModelConfig::pai_yolox_s().with_tood(4).with_input(SIZE, SIZE);
    let model = Detector::load(&cfg, &init_random(&cfg, 8).unwrap()).unwrap();
    let Head::Tood(head) = &model.head else { panic!("expected a TOOD head") };
    assert_eq!(head.stack(), 4);
    let pyr = model.features(&input(2)).unwrap();
    for (level, x) in pyr.levels().into_iter().enumerate() {
        let trace = head.task_features(&mut rdet_core::exec::Eval, level, x).unwrap();
        for w in [&trace.cls_weights, &trace.reg_weights] {
            assert_eq!(w.shape().c, 4);
            assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
    let outs = tood_head_forward(&pyr, head).unwrap();
    assert_eq!(outs, model.forward(&input(2)).unwrap());
}

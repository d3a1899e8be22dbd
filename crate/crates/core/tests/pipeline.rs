use std::sync::Arc;

use rdet_core::image::Image;
use rdet_core::model_io::config::NmsMode;
use rdet_core::model_io::{init_random, ExportConfig, ModelConfig};
use rdet_core::postprocess::Detection;
use rdet_core::predictor::{benchmark_grid, export_grid, Pipeline};
use rdet_core::Detector;

fn model() -> Detector {
    let cfg = ModelConfig::pai_yolox_s().with_input(128, 128);
    Detector::load(&cfg, &init_random(&cfg, 21).unwrap()).unwrap()
}

fn export() -> ExportConfig {
    ExportConfig {
        score_thresh: 0.5,
        ..Default::default()
    }
}

fn images() -> Vec<Image> {
    [(128, 128), (90, 160), (200, 70), (33, 33)]
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| Image::synthetic(h, w, i as u64 + 40))
        .collect()
}

fn close(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.class_id == y.class_id
                && (x.score - y.score).abs() < 1e-4
                && x.bbox.iter().zip(y.bbox).all(|(p, q)| (p - q).abs() < 1e-3)
        })
}

#[test]
fn export_switches_do_not_change_detections() {
    let model = model();
    let base = Pipeline::build(&model, export()).unwrap();
    let mut seen = 0;
    for img in images() {
        let (want, _) = base.predict(&img).unwrap();
        seen += want.len();
        for cfg in export_grid(&export()) {
            let (got, _) = Pipeline::build(&model, cfg.clone()).unwrap().predict(&img).unwrap();
            if cfg.fuse_reparam {
                assert!(close(&got, &want), "{cfg:?}");
            } else {
                // preprocess fusion and NMS mode are bit-exact
                assert_eq!(got, want, "{cfg:?}");
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn predictions_are_deterministic_and_bounded() {
    let pipe = Pipeline::build(&model(), export()).unwrap();
    for img in images() {
        let (a, _) = pipe.predict(&img).unwrap();
        assert_eq!(a, pipe.predict(&img).unwrap().0);
        for d in &a {
            let [x1, y1, x2, y2] = d.bbox;
            assert!(0.0 <= x1 && x1 <= x2 && x2 <= img.w as f32);
            assert!(0.0 <= y1 && y1 <= y2 && y2 <= img.h as f32);
            assert!(d.score > 0.5 && d.score <= 1.0);
        }
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
    }
    let capped = Pipeline::build(&model(), ExportConfig { max_detections: 2, ..export() }).unwrap();
    assert!(capped.predict(&images()[0]).unwrap().0.len() <= 2);
    assert!(pipe.predict(&Image::filled(0, 5, [0; 3])).is_err());
}

#[test]
fn overlapped_stages_match_sequential() {
    let model = model();
    let imgs = images();
    let seq = Pipeline::build(&model, export()).unwrap().predict_many(&imgs).unwrap();
    let ovl = Pipeline::build(&model, ExportConfig { overlap: true, ..export() })
        .unwrap()
        .predict_many(&imgs)
        .unwrap();
    assert_eq!(seq.len(), imgs.len());
    for ((a, _), (b, _)) in seq.iter().zip(&ovl) {
        assert_eq!(a, b);
    }
}

#[test]
fn pipeline_is_shareable_across_threads() {
    let pipe = Arc::new(Pipeline::build(&model(), export()).unwrap());
    let imgs = images();
    let want: Vec<_> = imgs.iter().map(|i| pipe.predict(i).unwrap().0).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let (pipe, imgs) = (Arc::clone(&pipe), &imgs);
                s.spawn(move || imgs.iter().cycle().skip(t).take(8).map(|i| pipe.predict(i).unwrap().0).collect::<Vec<_>>())
            })
            .collect();
        for (t, h) in handles.into_iter().enumerate() {
            for (k, got) in h.join().unwrap().into_iter().enumerate() {
                assert_eq!(got, want[(t + k) % imgs.len()]);
            }
        }
    });
}

#[test]
fn stage_timings_add_up() {
    let pipe = Pipeline::build(&model(), export()).unwrap();
    let img = &images()[0];
    pipe.predict(img).unwrap();
    let (_, t) = pipe.predict(img).unwrap();
    let sum = t.preprocess_ms + t.inference_ms + t.postprocess_ms;
    assert!(t.values().iter().all(|&v| v >= 0.0));
    assert!(t.end2end_ms >= sum, "{t:?}");
    assert!(t.end2end_ms <= 1.2 * sum + 0.5, "{t:?}");
}

#[test]
fn export_config_serde_round_trip() {
    let cfg = ExportConfig {
        fuse_reparam: true,
        nms_mode: NmsMode::Batched,
        max_detections: 17,
        ..export()
    };
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ExportConfig>(&json).unwrap(), cfg);
}

#[test]
fn bench_grid_reports_every_configuration() {
    let report = benchmark_grid(&model(), &export(), &images()[..1], 0, 2).unwrap();
    assert_eq!(report.configs.len(), 8);
    let mut keys: Vec<_> = report
        .configs
        .iter()
        .map(|r| (r.fuse_reparam, r.fuse_preprocess, r.nms_mode.to_string()))
        .collect();
    keys.dedup();
    assert_eq!(keys.len(), 8);
    let table = report.table();
    assert_eq!(table.lines().count(), 9);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["configs"].as_array().unwrap().len(), 8);
    for row in &report.configs {
        let s = row.stage("end2end");
        assert!(s.median > 0.0 && s.p95 >= s.median);
    }
}

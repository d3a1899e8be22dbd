//! End-to-end prediction: letterbox preprocess, network inference and
//! postprocess, with export-time fusion switches and per-stage timing.

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::HeadOutputs;
use crate::image::Image;
use crate::model::Detector;
use crate::postprocess::{
    batched_nms, decode_single, filter_candidates, nms, scale_coords, Detection, LetterboxMeta,
};
use crate::reparam::fuse_model;
use crate::tensor::{Shape, Tensor};

pub use crate::model_io::config::{ExportConfig, NmsMode};

/// Letterbox fill value.
pub const PAD_VALUE: f32 = 114.0;

/// Wall-clock milliseconds spent in each stage for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub preprocess_ms: f64,
    pub inference_ms: f64,
    pub postprocess_ms: f64,
    pub end2end_ms: f64,
}

impl StageTiming {
    pub const STAGES: [&'static str; 4] = ["preprocess", "inference", "postprocess", "end2end"];

    pub fn values(&self) -> [f64; 4] {
        [self.preprocess_ms, self.inference_ms, self.postprocess_ms, self.end2end_ms]
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Scale and resized extent for fitting `(h, w)` into `target`.
fn letterbox_geometry(h: usize, w: usize, target: (usize, usize)) -> Result<(f64, usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("cannot letterbox an empty {h}x{w} image")));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Input(format!("empty letterbox target {th}x{tw}")));
    }
    let scale = (th as f64 / h as f64).min(tw as f64 / w as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, th);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, tw);
    Ok((scale, nh, nw))
}

fn meta_for(image: &Image, scale: f64) -> LetterboxMeta {
    LetterboxMeta {
        scale,
        pad: (0.0, 0.0),
        original_size: (image.h, image.w),
    }
}

/// Reference letterbox: converts the whole image to floats, resizes with
/// nearest sampling into a padded float canvas, then transposes to CHW.
///
/// The resized image sits at the top-left; the rest is [`PAD_VALUE`].
/// Values are raw RGB intensities.
pub fn preprocess_letterbox(image: &Image, target: (usize, usize)) -> Result<(Tensor, LetterboxMeta)> {
    let (scale, nh, nw) = letterbox_geometry(image.h, image.w, target)?;
    let (th, tw) = target;
    let src: Vec<f32> = image.data.iter().map(|&b| f32::from(b)).collect();
    let mut canvas = vec![PAD_VALUE; th * tw * 3];
    for y in 0..nh {
        let sy = y * image.h / nh;
        for x in 0..nw {
            let sx = x * image.w / nw;
            let (d, s) = ((y * tw + x) * 3, (sy * image.w + sx) * 3);
            canvas[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    let shape = Shape::new(1, 3, th, tw)?;
    let t = Tensor::from_fn(shape, |_, c, y, x| canvas[(y * tw + x) * 3 + c]);
    Ok((t, meta_for(image, scale)))
}

/// Same result as [`preprocess_letterbox`], written straight from the image
/// bytes into the CHW tensor through precomputed source-index tables.
pub fn preprocess_letterbox_fused(image: &Image, target: (usize, usize)) -> Result<(Tensor, LetterboxMeta)> {
    let (scale, nh, nw) = letterbox_geometry(image.h, image.w, target)?;
    let (th, tw) = target;
    let sx: Vec<usize> = (0..nw).map(|x| x * image.w / nw * 3).collect();
    let mut data = vec![PAD_VALUE; 3 * th * tw];
    data.par_chunks_mut(th * tw).enumerate().for_each(|(c, plane)| {
        for (y, row) in plane.chunks_mut(tw).take(nh).enumerate() {
            let src = &image.data[(y * image.h / nh) * image.w * 3 + c..];
            for (dst, &off) in row.iter_mut().zip(&sx) {
                *dst = f32::from(src[off]);
            }
        }
    });
    Ok((Tensor::from_dims(1, 3, th, tw, data)?, meta_for(image, scale)))
}

/// An immutable, shareable preprocess -> inference -> postprocess chain.
#[derive(Clone, Debug)]
pub struct Pipeline {
    model: Arc<Detector>,
    export: ExportConfig,
}

impl Pipeline {
    /// Builds a pipeline; with `fuse_reparam` the model is run through the
    /// fusion passes first. `model` itself is never modified.
    pub fn build(model: &Detector, export: ExportConfig) -> Result<Self> {
        let model = if export.fuse_reparam { fuse_model(model)? } else { model.clone() };
        Self::from_shared(Arc::new(model), export)
    }

    /// Uses an already prepared model as is.
    pub fn from_shared(model: Arc<Detector>, export: ExportConfig) -> Result<Self> {
        export.validate()?;
        Ok(Self { model, export })
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn export(&self) -> &ExportConfig {
        &self.export
    }

    pub fn preprocess(&self, image: &Image) -> Result<(Tensor, LetterboxMeta)> {
        let target = self.model.cfg.input_size;
        if self.export.fuse_preprocess {
            preprocess_letterbox_fused(image, target)
        } else {
            preprocess_letterbox(image, target)
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<HeadOutputs> {
        self.model.forward(x)
    }

    pub fn postprocess(&self, outs: &HeadOutputs, meta: &LetterboxMeta) -> Result<Vec<Detection>> {
        let cands = decode_single(outs)?;
        let dets = filter_candidates(&cands, self.export.score_thresh);
        let mut kept = match self.export.nms_mode {
            NmsMode::Standard => nms(&dets, self.export.iou_thresh),
            NmsMode::Batched => batched_nms(&dets, self.export.iou_thresh),
        };
        kept.truncate(self.export.max_detections);
        Ok(scale_coords(&kept, meta))
    }

    /// Runs all three stages on one image, timing each.
    pub fn predict(&self, image: &Image) -> Result<(Vec<Detection>, StageTiming)> {
        let start = Instant::now();
        let (x, meta) = self.preprocess(image)?;
        let preprocess_ms = ms_since(start);
        let t = Instant::now();
        let outs = self.infer(&x)?;
        let inference_ms = ms_since(t);
        let t = Instant::now();
        let dets = self.postprocess(&outs, &meta)?;
        let postprocess_ms = ms_since(t);
        Ok((
            dets,
            StageTiming {
                preprocess_ms,
                inference_ms,
                postprocess_ms,
                end2end_ms: ms_since(start),
            },
        ))
    }

    /// Predicts a sequence of images. With `overlap` the three stages run on
    /// their own threads joined by one-slot queues, so consecutive images
    /// are in flight at once; otherwise images are processed one by one.
    pub fn predict_many(&self, images: &[Image]) -> Result<Vec<(Vec<Detection>, StageTiming)>> {
        if !self.export.overlap {
            return images.iter().map(|img| self.predict(img)).collect();
        }
        std::thread::scope(|s| {
            let (pre_tx, pre_rx) = sync_channel(1);
            let (inf_tx, inf_rx) = sync_channel(1);
            s.spawn(move || {
                for img in images {
                    let start = Instant::now();
                    let r = self.preprocess(img).map(|(x, m)| (x, m, ms_since(start)));
                    let failed = r.is_err();
                    if pre_tx.send((start, r)).is_err() || failed {
                        break;
                    }
                }
            });
            s.spawn(move || {
                for (start, r) in pre_rx {
                    let r = r.and_then(|(x, meta, pre)| {
                        let t = Instant::now();
                        let outs = self.infer(&x)?;
                        Ok((outs, meta, pre, ms_since(t)))
                    });
                    let failed = r.is_err();
                    if inf_tx.send((start, r)).is_err() || failed {
                        break;
                    }
                }
            });
            let mut out = Vec::with_capacity(images.len());
            for (start, r) in inf_rx {
                let (outs, meta, preprocess_ms, inference_ms) = r?;
                let t = Instant::now();
                let dets = self.postprocess(&outs, &meta)?;
                out.push((
                    dets,
                    StageTiming {
                        preprocess_ms,
                        inference_ms,
                        postprocess_ms: ms_since(t),
                        end2end_ms: ms_since(start),
                    },
                ));
            }
            Ok(out)
        })
    }
}

/// Predicts one image with `pipe`.
pub fn predict_end2end(pipe: &Pipeline, image: &Image) -> Result<(Vec<Detection>, StageTiming)> {
    pipe.predict(image)
}

/// Summary of one stage's samples, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

fn round_ms(v: f64) -> f64 {
    (v * 1e3).round() / 1e3
}

impl StageStats {
    /// Nearest-rank p95; values rounded to microseconds.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            mean: round_ms(s.iter().sum::<f64>() / n as f64),
            median: round_ms(median),
            p95: round_ms(p95),
        }
    }
}

/// Timing of one export configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub fuse_reparam: bool,
    pub fuse_preprocess: bool,
    pub nms_mode: NmsMode,
    pub stages_ms: BTreeMap<String, StageStats>,
}

impl BenchRow {
    pub fn stage(&self, name: &str) -> StageStats {
        self.stages_ms.get(name).copied().unwrap_or_default()
    }
}

/// Runs `warmup` untimed and `iters` timed predictions, cycling through
/// `images`.
pub fn benchmark(pipe: &Pipeline, images: &[Image], warmup: usize, iters: usize) -> Result<BenchRow> {
    if images.is_empty() || iters == 0 {
        return Err(Error::Input("benchmark needs at least one image and one iteration".into()));
    }
    let cycle = || images.iter().cycle();
    for img in cycle().take(warmup) {
        pipe.predict(img)?;
    }
    let timings: Vec<StageTiming> = if pipe.export.overlap {
        let batch: Vec<Image> = cycle().take(iters).cloned().collect();
        pipe.predict_many(&batch)?.into_iter().map(|(_, t)| t).collect()
    } else {
        cycle().take(iters).map(|img| pipe.predict(img).map(|(_, t)| t)).collect::<Result<_>>()?
    };
    let stages_ms = StageTiming::STAGES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let samples: Vec<f64> = timings.iter().map(|t| t.values()[i]).collect();
            (name.to_string(), StageStats::from_samples(&samples))
        })
        .collect();
    let e = &pipe.export;
    Ok(BenchRow {
        fuse_reparam: e.fuse_reparam,
        fuse_preprocess: e.fuse_preprocess,
        nms_mode: e.nms_mode,
        stages_ms,
    })
}

/// All eight `fuse_reparam x fuse_preprocess x nms_mode` combinations in a
/// fixed order, other settings taken from `base`.
pub fn export_grid(base: &ExportConfig) -> Vec<ExportConfig> {
    let mut out = Vec::with_capacity(8);
    for fuse_reparam in [false, true] {
        for fuse_preprocess in [false, true] {
            for &nms_mode in NmsMode::ALL {
                out.push(ExportConfig {
                    fuse_reparam,
                    fuse_preprocess,
                    nms_mode,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Pipelines for every grid configuration; the model is fused only once.
pub fn grid_pipelines(model: &Detector, base: &ExportConfig) -> Result<Vec<Pipeline>> {
    let raw = Arc::new(model.clone());
    let fused = Arc::new(fuse_model(model)?);
    export_grid(base)
        .into_iter()
        .map(|e| Pipeline::from_shared(if e.fuse_reparam { fused.clone() } else { raw.clone() }, e))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub configs: Vec<BenchRow>,
}

impl BenchReport {
    /// Aligned table: one row per configuration, median and p95 per stage.
    pub fn table(&self) -> String {
        let mut out = format!("{:<7} {:<6} {:<9}", "reparam", "prep", "nms");
        for s in StageTiming::STAGES {
            out.push_str(&format!(" {:>12} {:>12} {:>12}", format!("{s}.mean"), format!("{s}.med"), format!("{s}.p95")));
        }
        out.push('\n');
        for r in &self.configs {
            out.push_str(&format!("{:<7} {:<6} {:<9}", r.fuse_reparam, r.fuse_preprocess, r.nms_mode));
            for s in StageTiming::STAGES {
                let st = r.stage(s);
                out.push_str(&format!(" {:>12.3} {:>12.3} {:>12.3}", st.mean, st.median, st.p95));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Benchmarks every export configuration.
pub fn benchmark_grid(
    model: &Detector,
    base: &ExportConfig,
    images: &[Image],
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    let configs = grid_pipelines(model, base)?
        .iter()
        .map(|p| benchmark(p, images, warmup, iters))
        .collect::<Result<_>>()?;
    Ok(BenchReport { configs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{init_zeros, ModelConfig};

    #[test]
    fn identity_letterbox() {
        let img = Image::synthetic(64, 64, 1);
        let (t, meta) = preprocess_letterbox(&img, (64, 64)).unwrap();
        assert_eq!(meta.scale, 1.0);
        for (i, &v) in img.data.iter().enumerate() {
            let (p, c) = (i / 3, i % 3);
            assert_eq!(t.at(0, c, p / 64, p % 64), f32::from(v));
        }
    }

    #[test]
    fn pads_bottom_rows() {
        let img = Image::synthetic(48, 64, 2);
        let (t, meta) = preprocess_letterbox(&img, (64, 64)).unwrap();
        assert_eq!(meta.scale, 1.0);
        for c in 0..3 {
            for y in 48..64 {
                assert!((0..64).all(|x| t.at(0, c, y, x) == 114.0));
            }
        }
    }

    #[test]
    fn downscale_pad_mean() {
        let img = Image::synthetic(96, 128, 3);
        let (t, meta) = preprocess_letterbox(&img, (64, 64)).unwrap();
        assert_eq!(meta.scale, 0.5);
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 48..64 {
                for x in 0..64 {
                    sum += f64::from(t.at(0, c, y, x));
                    n += 1;
                }
            }
            // nearest sampling picks even source pixels
            assert_eq!(t.at(0, c, 5, 7), f32::from(img.pixel(10, 14)[c]));
        }
        assert_eq!(sum / n as f64, 114.0);
    }

    #[test]
    fn fused_preprocess_is_identical() {
        for (h, w, th, tw) in [(37, 91, 64, 32), (100, 50, 64, 64), (5, 5, 32, 96), (64, 64, 64, 64)] {
            let img = Image::synthetic(h, w, (h * w) as u64);
            let a = preprocess_letterbox(&img, (th, tw)).unwrap();
            let b = preprocess_letterbox_fused(&img, (th, tw)).unwrap();
            assert_eq!(a, b);
        }
        assert!(preprocess_letterbox(&Image::filled(0, 4, [0; 3]), (32, 32)).is_err());
        assert!(preprocess_letterbox_fused(&Image::filled(4, 0, [0; 3]), (32, 32)).is_err());
    }

    #[test]
    fn stats() {
        let s = StageStats::from_samples(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.mean, s.median, s.p95), (2.5, 2.5, 4.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(StageStats::from_samples(&v).p95, 95.0);
    }

    #[test]
    fn zero_model_has_no_detections_above_quarter() {
        let cfg = ModelConfig::yolox_s().with_input(64, 64);
        let model = Detector::load(&cfg, &init_zeros(&cfg).unwrap()).unwrap();
        let mut export = ExportConfig {
            score_thresh: 0.3,
            ..Default::default()
        };
        let pipe = Pipeline::build(&model, export.clone()).unwrap();
        let (dets, t) = pipe.predict(&Image::synthetic(50, 70, 9)).unwrap();
        assert!(dets.is_empty());
        assert!(t.values().iter().all(|&v| v > 0.0));
        // every score is exactly 0.5 * 0.5
        export.score_thresh = 0.2;
        let pipe = Pipeline::build(&model, export).unwrap();
        let (dets, _) = pipe.predict(&Image::synthetic(50, 70, 9)).unwrap();
        assert!(!dets.is_empty() && dets.iter().all(|d| d.score == 0.25));
    }

    #[test]
    fn grid_has_eight_distinct_rows() {
        let g = export_grid(&ExportConfig::default());
        assert_eq!(g.len(), 8);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| a != b));
        }
    }
}

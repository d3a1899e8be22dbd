//! Parameter and operation accounting.
//!
//! Parameters are the stored scalars of the model in its current form
//! (conv weights, biases, batch-norm scale and shift; running statistics are
//! buffers and excluded). A fused model therefore counts its fused form.
//!
//! `macs` counts convolution multiply-accumulates. `flops` counts two
//! operations per MAC plus one per output value of every elementwise,
//! normalization, activation, pooling and reduction op.

use serde::Serialize;

use crate::error::Result;
use crate::exec::Meter;
use crate::model::{learned_scalars, Detector, SECTIONS};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SectionCost {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// Runtime operations (kernel launches) in one forward pass.
    pub ops: u64,
}

impl SectionCost {
    fn add(&mut self, other: &SectionCost) {
        self.params += other.params;
        self.macs += other.macs;
        self.flops += other.flops;
        self.ops += other.ops;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input_size: (usize, usize),
    pub backbone: SectionCost,
    pub neck: SectionCost,
    pub head: SectionCost,
    pub total: SectionCost,
}

impl CostReport {
    pub fn sections(&self) -> [(&'static str, &SectionCost); 3] {
        [("backbone", &self.backbone), ("neck", &self.neck), ("head", &self.head)]
    }

    /// Aligned text table, millions of parameters and G(ops).
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>12} {:>10} {:>10} {:>8}\n",
            "section", "params(M)", "GMACs", "GFLOPs", "ops"
        );
        let rows = self.sections().into_iter().chain([("total", &self.total)]);
        for (name, c) in rows {
            out.push_str(&format!(
                "{:<10} {:>12.4} {:>10.3} {:>10.3} {:>8}\n",
                name,
                c.params as f64 / 1e6,
                c.macs as f64 / 1e9,
                c.flops as f64 / 1e9,
                c.ops
            ));
        }
        out
    }
}

/// Learned parameters per section and in total.
pub fn count_params(model: &Detector) -> [u64; 4] {
    let store = model.export();
    let mut out = [0u64; 4];
    for (i, section) in SECTIONS.iter().enumerate() {
        let prefix = format!("{section}.");
        out[i] = learned_scalars(
            store
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(n, t)| (n, t.numel())),
        ) as u64;
    }
    out[3] = out[..3].iter().sum();
    out
}

fn meter_cost(m: &Meter) -> SectionCost {
    SectionCost {
        params: 0,
        macs: m.macs,
        flops: m.flops(),
        ops: m.ops,
    }
}

/// Full cost of one forward pass on a single `h x w` image.
pub fn cost_report(model: &Detector, input_size: (usize, usize)) -> Result<CostReport> {
    let (h, w) = input_size;
    let input = Shape::new(1, 3, h, w)?;
    model.check_input(input)?;

    let mut m = Meter::new();
    let pyr = model.backbone.run(&mut m, &input)?;
    let mut backbone = meter_cost(&m);

    let mut m = Meter::new();
    let pyr = model.neck.run(&mut m, &pyr)?;
    let mut neck = meter_cost(&m);

    let mut m = Meter::new();
    model.head.run(&mut m, &pyr)?;
    let mut head = meter_cost(&m);

    let [pb, pn, ph, _] = count_params(model);
    backbone.params = pb;
    neck.params = pn;
    head.params = ph;
    let mut total = SectionCost::default();
    for s in [&backbone, &neck, &head] {
        total.add(s);
    }
    Ok(CostReport {
        input_size,
        backbone,
        neck,
        head,
        total,
    })
}

/// Total flops (2 per MAC plus elementwise work) at `input_size`.
pub fn count_flops(model: &Detector, input_size: (usize, usize)) -> Result<u64> {
    Ok(cost_report(model, input_size)?.total.flops)
}

/// Cost of a model that only needs its structure: built from a zero store.
pub fn cost_for_config(cfg: &crate::model_io::ModelConfig, fused: bool) -> Result<CostReport> {
    let model = Detector::load(cfg, &crate::model_io::init_zeros(cfg)?)?;
    let model = if fused { crate::reparam::fuse_model(&model)? } else { model };
    cost_report(&model, cfg.input_size)
}

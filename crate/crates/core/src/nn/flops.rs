//! Analytic FLOP accounting.
//!
//! Layers report their multiply–accumulate count while a profiling scope is
//! active on the current thread; outside a scope recording is a no-op.
//! Convention: one MAC counts as two FLOPs; pooling and resampling report
//! their additions directly as FLOPs.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; pooling and bilinear sampling count one FLOP per tap; normalisation and activations excluded";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    GroupedConv,
    DeformConv,
    Linear,
    AvgPool,
    MaxPool,
    Resize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub macs: u64,
    pub extra_flops: u64,
}

impl LayerRecord {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.extra_flops
    }
}

/// Per-layer breakdown of one profiled forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub macs: u64,
    pub flops: u64,
    pub convention: String,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

#[derive(Default)]
struct Recorder {
    layers: Vec<LayerRecord>,
    unsupported: Vec<String>,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

pub(crate) fn record(kind: LayerKind, input: &[usize], output: &[usize], macs: u64, extra_flops: u64) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.layers.push(LayerRecord {
                kind,
                input: input.to_vec(),
                output: output.to_vec(),
                macs,
                extra_flops,
            });
        }
    });
}

/// Marks a layer whose cost has no analytic formula; any such layer makes the
/// enclosing [`profile`] call fail.
pub fn record_unsupported(name: &str) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.unsupported.push(name.to_string());
        }
    });
}

struct Scope;

impl Drop for Scope {
    fn drop(&mut self) {
        RECORDER.with(|r| r.borrow_mut().take());
    }
}

/// Runs `forward` with recording enabled and sums the reported layer costs.
pub fn profile<T>(input_shape: &[usize], forward: impl FnOnce() -> Result<T>) -> Result<FlopReport> {
    RECORDER.with(|r| {
        let mut slot = r.borrow_mut();
        if slot.is_some() {
            return Err(Error::Precondition("FLOP profiling scopes cannot nest".into()));
        }
        *slot = Some(Recorder::default());
        Ok(())
    })?;
    let scope = Scope;
    forward()?;
    let rec = RECORDER.with(|r| r.borrow_mut().take()).unwrap_or_default();
    drop(scope);
    if !rec.unsupported.is_empty() {
        return Err(Error::UnsupportedLayer(rec.unsupported.join(", ")));
    }
    let macs = rec.layers.iter().map(|l| l.macs).sum();
    let flops = rec.layers.iter().map(LayerRecord::flops).sum();
    Ok(FlopReport {
        input_shape: input_shape.to_vec(),
        layers: rec.layers,
        macs,
        flops,
        convention: CONVENTION.to_string(),
    })
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Condition, EvalRecord};
use crate::corruption::NoiseKind;
use crate::engine::StepRecord;
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.md";

const FONT_DIR: &str = "/usr/share/fonts/truetype/dejavu";
const FONT_FAMILY: &str = "sans-serif";

/// Where and with what the numbers were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub backend: String,
    pub version: String,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            backend: "candle cpu, f32".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// A named training log to summarise alongside the evaluation records.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub run: String,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Serialize)]
struct TrainingSummary<'a> {
    run: &'a str,
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    min_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Results<'a> {
    environment: Environment,
    metric_notes: BTreeMap<&'static str, &'static str>,
    intensity_semantics: BTreeMap<&'static str, &'static str>,
    records: &'a [EvalRecord],
    training: Vec<TrainingSummary<'a>>,
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub noise_kind: String,
    pub intensity: f64,
    #[serde(rename = "mDS")]
    pub mds: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub n: usize,
}

impl From<&EvalRecord> for SweepRow {
    fn from(r: &EvalRecord) -> Self {
        Self {
            model: r.model.clone(),
            noise_kind: r.condition.kind_label().into(),
            intensity: r.condition.intensity(),
            mds: r.mds,
            miou: r.miou,
            n: r.n_images,
        }
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub sweep: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn metric_notes() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("averaging", "mDS and mIoU are means of per-image scores, in percent"),
        ("eval_dice", "hard Dice on thresholded predictions; an image with empty prediction and empty mask scores 1"),
        ("train_dice", "soft Dice on probabilities with smoothing 1"),
        ("binarisation", "pixel is positive where sigmoid(logit) > threshold"),
        ("flops", crate::nn::flops::CONVENTION),
        ("corruption_seed", "per image: first 8 bytes of sha256(run seed, image id)"),
    ])
}

/// Writes `results.json`, `sweep.csv`, `summary.md` and one `mds_<kind>.png`
/// per noise kind found in `records`.
pub fn emit_report(records: &[EvalRecord], logs: &[TrainingLog], out_dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let results = Results {
        environment: Environment::capture(),
        metric_notes: metric_notes(),
        intensity_semantics: NoiseKind::ALL.iter().map(|k| (k.as_str(), k.intensity_semantics())).collect(),
        records,
        training: logs
            .iter()
            .map(|l| TrainingSummary {
                run: &l.run,
                steps: l.records.len(),
                first_loss: l.records.first().map(|r| r.total),
                final_loss: l.records.last().map(|r| r.total),
                min_loss: l.records.iter().map(|r| r.total).min_by(f64::total_cmp),
            })
            .collect(),
    };
    let results_path = out_dir.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(&results)?;
    std::fs::write(&results_path, json).map_err(|e| Error::io(&results_path, e))?;

    let sweep_path = out_dir.join(SWEEP_FILE);
    let mut wr = csv::Writer::from_path(&sweep_path)?;
    for r in records {
        wr.serialize(SweepRow::from(r))?;
    }
    wr.flush().map_err(|e| Error::io(&sweep_path, e))?;

    let summary_path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, summary_table(records)).map_err(|e| Error::io(&summary_path, e))?;

    let kinds: BTreeSet<NoiseKind> = records
        .iter()
        .filter_map(|r| match r.condition {
            Condition::Noise(s) => Some(s.kind),
            Condition::Clean => None,
        })
        .collect();
    let mut plots = Vec::new();
    for kind in kinds {
        let path = out_dir.join(format!("mds_{}.png", kind.as_str()));
        plot_kind(records, kind, &path)?;
        plots.push(path);
    }
    Ok(ReportFiles {
        results: results_path,
        sweep: sweep_path,
        summary: summary_path,
        plots,
    })
}

fn summary_table(records: &[EvalRecord]) -> String {
    let mut s = String::from("| model | condition | intensity | mDS | mIoU | params | GFLOPs | ms | n |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in records {
        let ms = r.inference_ms.map_or("-".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} | {} | {:.3} | {} | {} |",
            r.model,
            r.condition.kind_label(),
            r.condition.intensity(),
            r.mds,
            r.miou,
            r.params,
            r.flops_g,
            ms,
            r.n_images
        );
    }
    s
}

/// Registers DejaVu Sans once; `false` means text cannot be drawn.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let Ok(bytes) = std::fs::read(Path::new(FONT_DIR).join("DejaVuSans.ttf")) else {
            log::warn!("no font under {FONT_DIR}; plots will have no labels");
            return false;
        };
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes).is_ok()
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Report(e.to_string())
}

fn plot_kind(records: &[EvalRecord], kind: NoiseKind, path: &Path) -> Result<()> {
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let Condition::Noise(s) = r.condition {
            if s.kind == kind {
                series.entry(&r.model).or_default().push((s.intensity, r.mds));
            }
        }
    }
    let x_max = series
        .values()
        .flatten()
        .map(|p| p.0)
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let labelled = font_available();

    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labelled {
        builder
            .caption(format!("mDS vs {} intensity", kind.as_str()), (FONT_FAMILY, 22))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(0.0..x_max, 0.0..100.0).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if labelled {
        mesh.x_desc("intensity").y_desc("mDS (%)").label_style((FONT_FAMILY, 14));
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;

    for (i, (model, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let colour = Palette99::pick(i).to_rgba();
        let drawn = chart
            .draw_series(LineSeries::new(pts.clone(), colour.stroke_width(2)))
            .map_err(plot_err)?;
        if labelled {
            drawn
                .label(model.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
        }
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, colour.filled())))
            .map_err(plot_err)?;
    }
    if labelled {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FONT_FAMILY, 14))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

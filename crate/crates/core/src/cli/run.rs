//! Train and evaluate on a [`BenchData`], shared by the commands and tests.

use super::bench::BenchData;
use crate::datagen::ImageSample;
use crate::detector::Model;
use crate::error::Result;
use crate::eval::{
    attentive_vector_report, build_bank, evaluate, time_inference, Attending, ClassFilter, Detection, EvalReport,
    InferenceOptions, TimingReport, VectorReport,
};
use crate::meta_train::{DataView, Event, LogEntry, Strategy, TrainData, TrainState};
use crate::prn::{build_meta_input, infer_object_vectors, AttentiveVector, ClassAttentiveBank};

/// Test objects per class fed to the vector report.
pub const VECTOR_REPORT_OBJECTS: usize = 20;

pub fn train_data(bench: &BenchData, k: usize) -> Result<TrainData<'_>> {
    TrainData::new(DataView::new(&bench.train), &bench.split, &bench.phase1, bench.registry(k)?)
}

/// Continues `state` to `stop_at` (or completion), collecting the log.
pub fn train(
    state: &mut TrainState,
    bench: &BenchData,
    stop_at: Option<usize>,
    on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LogEntry>> {
    let data = train_data(bench, state.config.k)?;
    let mut log = Vec::new();
    state.run(&data, stop_at, &mut |e| match e {
        Event::Step(entry) => {
            if entry.iter % 500 == 0 {
                log::info!("iter {} phase {} loss {:.4}", entry.iter, u8::from(entry.phase), entry.losses.total);
            }
            log.push(entry.clone());
            Ok(())
        }
        Event::Checkpoint(s) => on_checkpoint(s),
    })?;
    Ok(log)
}

/// Everything `eval` reports for one model and K.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    pub bank: Option<ClassAttentiveBank>,
    /// Object vectors of up to [`VECTOR_REPORT_OBJECTS`] test objects per class.
    pub vectors: Vec<AttentiveVector>,
    pub vector_report: Option<VectorReport>,
}

/// Inference options for `strategy`: the full-image variant attends a
/// pooled image feature.
pub fn inference_options(strategy: Strategy, base: &InferenceOptions) -> InferenceOptions {
    InferenceOptions {
        full_image: strategy == Strategy::FullImageMeta,
        ..*base
    }
}

/// Builds the K-shot bank (meta strategies), runs the test set, and scores
/// the classes picked by `filter`. `use_mask` fills the fourth meta-input
/// channel as in training.
pub fn evaluate_model(
    model: &Model,
    strategy: Strategy,
    use_mask: bool,
    bench: &BenchData,
    k: usize,
    filter: ClassFilter,
    opts: &InferenceOptions,
    settings: serde_json::Value,
) -> Result<Evaluation> {
    let classes = filter.select(&bench.split);
    let samples: Vec<&ImageSample> = bench.test.samples.iter().collect();
    let opts = inference_options(strategy, opts);
    let bank = if model.spec.prn {
        Some(build_bank(model, &DataView::new(&bench.train), bench.registry(k)?, k, use_mask)?)
    } else {
        None
    };
    let attending = bank.as_ref().map_or(Attending::Plain, Attending::Bank);
    let (detections, report) = evaluate(model, &samples, attending, &bench.split, &classes, &opts, settings)?;
    let (vectors, vector_report) = if model.spec.prn {
        let v = test_object_vectors(model, &samples, &classes, use_mask)?;
        let r = attentive_vector_report(&v).ok();
        (v, r)
    } else {
        (Vec::new(), None)
    };
    Ok(Evaluation {
        report,
        detections,
        bank,
        vectors,
        vector_report,
    })
}

/// Object vectors of the first test objects of each class.
pub fn test_object_vectors(model: &Model, samples: &[&ImageSample], classes: &[usize], use_mask: bool) -> Result<Vec<AttentiveVector>> {
    let size = model.spec.detector.meta_input_size;
    let mut inputs = Vec::new();
    for &c in classes {
        let mut n = 0;
        'outer: for s in samples {
            for (j, a) in s.annotations.iter().enumerate() {
                if a.class_id == c {
                    inputs.push(build_meta_input(s, j, size, use_mask)?);
                    n += 1;
                    if n == VECTOR_REPORT_OBJECTS {
                        break 'outer;
                    }
                }
            }
        }
    }
    infer_object_vectors(&model.params, &model.spec, &inputs)
}

/// Per-image wall time with the bank against one unattended pass of the
/// same model over the first `images` test images.
pub fn time_model(
    model: &Model,
    bank: &ClassAttentiveBank,
    bench: &BenchData,
    classes: &[usize],
    opts: &InferenceOptions,
    images: usize,
    repeats: usize,
) -> Result<TimingReport> {
    let samples: Vec<&ImageSample> = bench.test.samples.iter().take(images).collect();
    time_inference(model, &samples, Attending::Bank(bank), (model, Attending::Plain), classes, opts, repeats)
}

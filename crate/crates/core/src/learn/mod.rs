//! Frame-wise dataset assembly, classifiers and cross-validation.
//!
//! A deposited drop yields one region; each post-deposit frame of that
//! region becomes one 8×8 training patch. Cross-validation keeps all frames
//! of a region in the same fold by default, so a classifier is never tested
//! on frames of a drop it has already seen.

pub mod cnn;
pub mod forest;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cnn::{fit_cnn, Cnn, CnnConfig, EpochStats, ReduceOnPlateau, SchedulerConfig, TrainConfig};
pub use forest::{train_forest, ForestConfig, RandomForest};

use crate::calibration::{apply_compensation, CompensationMap};
use crate::detection::{
    container_features, detect_deposit_events, detect_droplets, extract_patch, BBox, ContainerFeatures,
    DetectionParams, DropRegion, TriggerParams,
};
use crate::error::{Error, Result};
use crate::heatmap::{temporal_average, Frame, Session};

/// Metadata key holding a session's class label.
pub const LABEL_KEY: &str = "label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub patch: Vec<f64>,
    pub label: usize,
    pub region: usize,
    /// Frame index within the source session.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub session: String,
    pub label: String,
    pub deposit_frame: usize,
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDataset {
    pub classes: Vec<String>,
    pub patch_size: usize,
    pub samples: Vec<PatchSample>,
    /// Manifest of the sessions the samples came from.
    pub sources: Vec<SourceEntry>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn regions(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.region).collect()
    }

    pub fn region_count(&self) -> usize {
        self.samples.iter().map(|s| s.region).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleOptions {
    pub frames_per_region: usize,
    pub patch_size: usize,
    pub trigger: TriggerParams,
    /// Post-deposit frames averaged before detection.
    pub detect_window: usize,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            frames_per_region: 50,
            patch_size: 8,
            trigger: TriggerParams::default(),
            detect_window: 10,
        }
    }
}

fn session_name(session: &Session, index: usize) -> String {
    session
        .label("id")
        .map(str::to_string)
        .unwrap_or_else(|| format!("session-{index}"))
}

fn mean_frame(frames: &[Frame]) -> Result<Frame> {
    temporal_average(frames, frames.len())
}

/// Measured frames re-based on the mean of the pre-deposit frames and
/// optionally compensated, plus the deposit frame index.
pub fn rebased_frames(
    session: &Session,
    trigger: &TriggerParams,
    compensation: Option<&CompensationMap>,
    name: &str,
) -> Result<(Vec<Frame>, usize)> {
    let events = detect_deposit_events(session, trigger)?;
    let deposit = *events
        .first()
        .ok_or_else(|| Error::NoDetections(format!("{name}: no deposit event")))?;
    let measured: Vec<Frame> = (0..session.len()).map(|n| session.measured(n)).collect::<Result<_>>()?;
    let base = mean_frame(&measured[..deposit])?;
    let mut out = Vec::with_capacity(measured.len());
    for f in &measured {
        let d = f.zip_with(&base, |a, b| a - b)?;
        out.push(match compensation {
            Some(map) => apply_compensation(&d, map)?,
            None => d,
        });
    }
    Ok((out, deposit))
}

/// Builds the frame-wise patch dataset. Each session must carry a `label`
/// and show a deposit; every region detected on the first post-deposit
/// frames contributes up to `frames_per_region` patches.
pub fn assemble_framewise(
    sessions: &[Session],
    params: &DetectionParams,
    opts: &AssembleOptions,
    compensation: Option<&CompensationMap>,
) -> Result<PatchDataset> {
    params.validate()?;
    if opts.frames_per_region == 0 || opts.patch_size == 0 || opts.detect_window == 0 {
        return Err(Error::InvalidParameter(
            "frames_per_region, patch_size and detect_window must be >= 1".into(),
        ));
    }
    if sessions.is_empty() {
        return Err(Error::InsufficientData("no sessions".into()));
    }
    let mut labels = Vec::with_capacity(sessions.len());
    for (i, s) in sessions.iter().enumerate() {
        let l = s
            .label(LABEL_KEY)
            .ok_or_else(|| Error::MissingLabel(format!("{} has no {LABEL_KEY:?} metadata", session_name(s, i))))?;
        labels.push(l.to_string());
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut samples = Vec::new();
    let mut sources = Vec::new();
    let mut next_region = 0;
    for (i, s) in sessions.iter().enumerate() {
        let name = session_name(s, i);
        let (frames, deposit) = rebased_frames(s, &opts.trigger, compensation, &name)?;
        let window_end = (deposit + opts.detect_window).min(frames.len());
        let detect_frame = mean_frame(&frames[deposit..window_end])?;
        let regions = detect_droplets(&detect_frame, params)?;
        if regions.is_empty() {
            return Err(Error::NoDetections(format!("{name}: no droplet after frame {deposit}")));
        }
        let label = classes.binary_search(&labels[i]).expect("label collected above");
        let end = (deposit + opts.frames_per_region).min(frames.len());
        let mut ids = Vec::new();
        for region in &regions {
            for (k, f) in frames.iter().enumerate().take(end).skip(deposit) {
                samples.push(PatchSample {
                    patch: extract_patch(f, region.centroid, opts.patch_size),
                    label,
                    region: next_region,
                    frame: k,
                });
            }
            ids.push(next_region);
            next_region += 1;
        }
        sources.push(SourceEntry {
            session: name,
            label: labels[i].clone(),
            deposit_frame: deposit,
            regions: ids,
        });
    }
    Ok(PatchDataset {
        classes,
        patch_size: opts.patch_size,
        samples,
        sources,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub folds: Vec<FoldSummary>,
}

impl EvalReport {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Accuracy, per-class precision and recall, and the confusion matrix. A
/// class that is never predicted gets precision 0; one that never occurs
/// gets recall 0.
pub fn metrics(predictions: &[usize], labels: &[usize], classes: &[String]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = classes.len();
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::InvalidParameter(format!("class index {bad} out of range")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = (0..k).map(|c| ratio(confusion[c][c], (0..k).map(|t| confusion[t][c]).sum())).collect();
    let recall = (0..k).map(|c| ratio(confusion[c][c], confusion[c].iter().sum())).collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        classes: classes.to_vec(),
        accuracy: ratio(correct, predictions.len()),
        precision,
        recall,
        confusion,
        folds: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    /// All frames of one region share a fold.
    Region,
    /// Frames are split independently.
    Sample,
}

/// Stratified fold index per sample. With `groups`, whole groups are
/// assigned; each class needs at least `k` units.
pub fn stratified_folds(labels: &[usize], groups: Option<&[usize]>, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need k >= 2 folds, got {k}")));
    }
    let unit_of: Vec<usize> = match groups {
        Some(g) if g.len() != labels.len() => {
            return Err(Error::InvalidParameter("one group per sample required".into()));
        }
        Some(g) => g.to_vec(),
        None => (0..labels.len()).collect(),
    };
    // unit -> class, checking each group is single-class
    let mut unit_class = std::collections::BTreeMap::new();
    for (i, &u) in unit_of.iter().enumerate() {
        if let Some(&c) = unit_class.get(&u) {
            if c != labels[i] {
                return Err(Error::InvalidParameter(format!("group {u} mixes classes")));
            }
        } else {
            unit_class.insert(u, labels[i]);
        }
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit_fold = std::collections::BTreeMap::new();
    let mut offset = 0;
    for c in 0..n_classes {
        let mut units: Vec<usize> = unit_class.iter().filter(|(_, &cc)| cc == c).map(|(&u, _)| u).collect();
        if units.is_empty() {
            continue;
        }
        if units.len() < k {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} units, fewer than {k} folds",
                units.len()
            )));
        }
        units.shuffle(&mut rng);
        for (j, u) in units.into_iter().enumerate() {
            unit_fold.insert(u, (j + offset) % k);
        }
        offset += 1;
    }
    Ok(unit_of.iter().map(|u| unit_fold[u]).collect())
}

/// Runs `fit_predict(fold, train, test)` for every fold in parallel and
/// scatters the held-out predictions back into sample order.
pub fn kfold_predict<F>(labels: &[usize], folds: &[usize], k: usize, fit_predict: F) -> Result<(Vec<usize>, Vec<FoldSummary>)>
where
    F: Fn(usize, &[usize], &[usize]) -> Result<Vec<usize>> + Sync,
{
    let results: Vec<Result<(Vec<usize>, Vec<usize>)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| folds[i] == fold);
            let preds = fit_predict(fold, &train, &test)?;
            if preds.len() != test.len() {
                return Err(Error::InvalidParameter("one prediction per test sample required".into()));
            }
            Ok((test, preds))
        })
        .collect();
    let mut predictions = vec![usize::MAX; labels.len()];
    let mut summaries = Vec::with_capacity(k);
    for (fold, r) in results.into_iter().enumerate() {
        let (test, preds) = r?;
        let correct = test.iter().zip(&preds).filter(|(&i, &p)| labels[i] == p).count();
        for (&i, &p) in test.iter().zip(&preds) {
            predictions[i] = p;
        }
        summaries.push(FoldSummary {
            fold,
            test_count: test.len(),
            accuracy: if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 },
        });
    }
    Ok((predictions, summaries))
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Cross-validated CNN evaluation with `tc.folds` folds.
pub fn kfold_evaluate(dataset: &PatchDataset, cnn: &CnnConfig, tc: &TrainConfig, mode: FoldMode) -> Result<EvalReport> {
    tc.validate()?;
    let labels = dataset.labels();
    let groups = dataset.regions();
    let folds = stratified_folds(
        &labels,
        (mode == FoldMode::Region).then_some(groups.as_slice()),
        tc.folds,
        tc.seed,
    )?;
    let (preds, summaries) = kfold_predict(&labels, &folds, tc.folds, |fold, train, test| {
        let xs: Vec<&[f64]> = train.iter().map(|&i| dataset.samples[i].patch.as_slice()).collect();
        let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let fold_tc = TrainConfig {
            seed: fold_seed(tc.seed, fold),
            ..tc.clone()
        };
        let (model, _) = fit_cnn(&xs, &ys, dataset.classes.clone(), cnn, &fold_tc)?;
        test.iter().map(|&i| model.predict(&dataset.samples[i].patch)).collect()
    })?;
    let mut report = metrics(&preds, &labels, &dataset.classes)?;
    report.folds = summaries;
    Ok(report)
}

/// Cross-validated forest evaluation on feature rows.
pub fn kfold_forest(x: &[Vec<f64>], y: &[usize], classes: &[String], cfg: &ForestConfig, k: usize) -> Result<EvalReport> {
    let folds = stratified_folds(y, None, k, cfg.seed)?;
    let (preds, summaries) = kfold_predict(y, &folds, k, |fold, train, test| {
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let fold_cfg = ForestConfig {
            seed: fold_seed(cfg.seed, fold),
            ..*cfg
        };
        let model = train_forest(&tx, &ty, classes.to_vec(), &fold_cfg)?;
        test.iter().map(|&i| model.predict(&x[i])).collect()
    })?;
    let mut report = metrics(&preds, y, classes)?;
    report.folds = summaries;
    Ok(report)
}

/// Copy of the cells inside `bbox` grown by `margin` and clipped to the grid.
pub fn crop(frame: &Frame, bbox: &BBox, margin: usize) -> Frame {
    let r0 = bbox.row0.saturating_sub(margin);
    let c0 = bbox.col0.saturating_sub(margin);
    let r1 = (bbox.row1 + margin).min(frame.rows() - 1);
    let c1 = (bbox.col1 + margin).min(frame.cols() - 1);
    Frame::from_fn(r1 - r0 + 1, c1 - c0 + 1, frame.timestamp_s, |r, c| frame.get(r0 + r, c0 + c))
}

/// The strongest positive region, taken to be a container rim.
pub fn locate_container(frame: &Frame, params: &DetectionParams) -> Result<DropRegion> {
    let negated = frame.map(|v| -v);
    detect_droplets(&negated, params)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::NoDetections("no positive rim response".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContainerOptions {
    pub trigger: TriggerParams,
    pub detection: DetectionParams,
    /// Cells added around the rim's bounding box before computing features.
    pub margin: usize,
}

impl Default for ContainerOptions {
    fn default() -> Self {
        Self {
            trigger: TriggerParams::default(),
            detection: DetectionParams::default(),
            margin: 1,
        }
    }
}

/// Container statistics from a session: post-placement frames are averaged,
/// the rim is located, and features are computed on the crop around it.
pub fn container_features_from_session(
    session: &Session,
    opts: &ContainerOptions,
    compensation: Option<&CompensationMap>,
) -> Result<ContainerFeatures> {
    let (frames, deposit) = rebased_frames(session, &opts.trigger, compensation, "container session")?;
    let avg = mean_frame(&frames[deposit..])?;
    let rim = locate_container(&avg, &opts.detection)?;
    Ok(container_features(&crop(&avg, &rim.bbox, opts.margin)))
}

//! LBP boosted cascade: dataset synthesis, AdaBoost stage training with
//! negative bootstrapping, multi-scale sliding-window detection, hard
//! negative mining and detection metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::{BBox, RasterImage};
use crate::scene::{
    generate_scenario, head_bbox_truth, render_panel_image, valve_roi, GenParams, Intrinsics, RenderOptions,
};
use crate::seed;
use crate::valve::{valve_rig, VALVE_BASELINE_M, VALVE_CAMERA_DEPTH_M};
use crate::vision::{cell_span, lbp_code_image, lbp_features, LBP_WINDOW};
use crate::wrench::{wrench_camera, WRENCH_CAMERA_DEPTH_M};

pub const CASCADE_FORMAT: &str = "panelbot-lbp-cascade";
pub const CASCADE_VERSION: u32 = 1;
const BINS: usize = 256;

/// Weak learner on one histogram bin: votes `+weight` when
/// `(count ≥ threshold) == (polarity > 0)`, `−weight` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    /// `cell · 256 + code`.
    pub feature: usize,
    pub threshold: u16,
    pub polarity: i8,
    pub weight: f64,
}

impl Stump {
    #[inline]
    pub fn vote(&self, value: u8) -> f64 {
        if (value as u16 >= self.threshold) == (self.polarity > 0) {
            self.weight
        } else {
            -self.weight
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub stumps: Vec<Stump>,
    /// A window passes when the summed votes reach this value.
    pub threshold: f64,
    /// Rates reached on the stage's training set.
    pub detection_rate: f64,
    pub false_positive_rate: f64,
}

impl CascadeStage {
    /// Summed votes; `feature` returns the clipped bin count.
    #[inline]
    pub fn score(&self, mut feature: impl FnMut(usize) -> u8) -> f64 {
        let mut s = 0.0;
        for st in &self.stumps {
            s += st.vote(feature(st.feature));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub format: String,
    pub version: u32,
    pub window: usize,
    pub grid: usize,
    /// Fraction of the window the object spans on each axis.
    pub object_span: (f64, f64),
    pub stages: Vec<CascadeStage>,
}

impl Cascade {
    pub fn feature_count(&self) -> usize {
        self.grid * self.grid * BINS
    }

    /// Sum over stages of `score − threshold` when every stage passes.
    pub fn evaluate(&self, mut feature: impl FnMut(usize) -> u8) -> Option<f64> {
        self.evaluate_stages(self.stages.len(), &mut feature)
    }

    fn evaluate_stages(&self, upto: usize, feature: &mut impl FnMut(usize) -> u8) -> Option<f64> {
        let mut margin = 0.0;
        for st in &self.stages[..upto] {
            let s = st.score(&mut *feature);
            if s < st.threshold {
                return None;
            }
            margin += s - st.threshold;
        }
        Some(margin)
    }

    /// Number of stages a window passes before rejection.
    pub fn stages_passed(&self, features: &[u8]) -> usize {
        self.stages
            .iter()
            .take_while(|st| st.score(|f| features[f]) >= st.threshold)
            .count()
    }

    /// Cascade margin of a 100×100 window, `None` when rejected.
    pub fn window_score(&self, window: &RasterImage) -> Result<Option<f64>> {
        let f = window_features(window, self.grid)?;
        Ok(self.evaluate(|i| f[i]))
    }

    pub fn classify(&self, window: &RasterImage) -> Result<bool> {
        Ok(self.window_score(window)?.is_some())
    }

    /// Object box inside a window box.
    pub fn object_box(&self, window: &BBox) -> BBox {
        let (a, b) = self.object_span;
        let (x, y) = (window.x as f64 + a * window.w as f64, window.y as f64 + a * window.h as f64);
        let (w, h) = ((b - a) * window.w as f64, (b - a) * window.h as f64);
        BBox::new(x.round() as i32, y.round() as i32, w.round().max(1.0) as i32, h.round().max(1.0) as i32)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Cascade> {
        let c: Cascade = serde_json::from_str(text).map_err(|e| Error::Parse(format!("cascade: {e}")))?;
        if c.format != CASCADE_FORMAT {
            return Err(Error::Parse(format!("not a cascade document (format {:?})", c.format)));
        }
        if c.version != CASCADE_VERSION {
            return Err(Error::Parse(format!("unsupported cascade version {}", c.version)));
        }
        if c.window != LBP_WINDOW || c.grid == 0 || c.grid > LBP_WINDOW {
            return Err(Error::Parse("cascade window/grid out of range".into()));
        }
        let n = c.feature_count();
        if c.stages.iter().flat_map(|s| &s.stumps).any(|s| s.feature >= n || !s.weight.is_finite()) {
            return Err(Error::Parse("cascade stump out of range".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Cascade> {
        Cascade::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Cell-major LBP bin counts of a 100×100 window, clipped to 255.
pub fn window_features(window: &RasterImage, grid: usize) -> Result<Vec<u8>> {
    let h = lbp_features(window, grid)?;
    Ok(h.bins.iter().map(|&c| c.min(255) as u8).collect())
}

/// A full image whose windows are negatives unless they overlap one of
/// the exclusion boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSource {
    pub image: RasterImage,
    pub exclusions: Vec<BBox>,
}

/// Window boxes whose object box overlaps an exclusion this much are not
/// negatives.
pub const EXCLUSION_IOU: f64 = 0.3;

impl NegativeSource {
    pub fn admits(&self, object_box: &BBox) -> bool {
        self.exclusions.iter().all(|e| e.iou(object_box) < EXCLUSION_IOU)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    /// 100×100 windows.
    pub positives: Vec<RasterImage>,
    /// Relative boosting weight of each positive.
    pub positive_weights: Vec<f64>,
    /// 100×100 windows.
    pub negatives: Vec<RasterImage>,
    /// Images for drawing further negatives.
    pub sources: Vec<NegativeSource>,
}

impl Dataset {
    pub fn new(positives: Vec<RasterImage>, negatives: Vec<RasterImage>, sources: Vec<NegativeSource>) -> Self {
        let positive_weights = vec![1.0; positives.len()];
        Dataset { positives, positive_weights, negatives, sources }
    }

    /// Seeded shuffle of the windows into a training share `train_fraction`
    /// and the rest. Negative sources stay with the training part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = seed::rng_for(seed, "split");
        let mut pi: Vec<usize> = (0..self.positives.len()).collect();
        let mut ni: Vec<usize> = (0..self.negatives.len()).collect();
        pi.shuffle(&mut rng);
        ni.shuffle(&mut rng);
        let pc = (self.positives.len() as f64 * train_fraction).round() as usize;
        let nc = (self.negatives.len() as f64 * train_fraction).round() as usize;
        let take = |idx: &[usize], all: &[RasterImage]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
        let train = Dataset {
            positives: take(&pi[..pc], &self.positives),
            positive_weights: pi[..pc].iter().map(|&i| self.positive_weights[i]).collect(),
            negatives: take(&ni[..nc], &self.negatives),
            sources: self.sources.clone(),
        };
        let test = Dataset {
            positives: take(&pi[pc..], &self.positives),
            positive_weights: pi[pc..].iter().map(|&i| self.positive_weights[i]).collect(),
            negatives: take(&ni[nc..], &self.negatives),
            sources: Vec::new(),
        };
        (train, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub grid: usize,
    pub max_stages: usize,
    pub min_detection_rate: f64,
    pub max_false_positive_rate: f64,
    pub max_stumps: usize,
    /// Side range (source pixels) of bootstrapped negative windows.
    pub negative_window_px: (f64, f64),
    /// Random draws per wanted negative when topping up the initial set.
    pub bootstrap_attempts: usize,
    /// Training stops once fewer negatives than this survive.
    pub min_negatives: usize,
    pub object_span: (f64, f64),
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            grid: 4,
            max_stages: 10,
            min_detection_rate: 0.995,
            max_false_positive_rate: 0.5,
            max_stumps: 50,
            negative_window_px: (70.0, 180.0),
            bootstrap_attempts: 10,
            min_negatives: 10,
            object_span: (0.1, 0.9),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid >= 1
            && self.grid <= 10
            && self.max_stages >= 1
            && (0.0..=1.0).contains(&self.min_detection_rate)
            && self.max_false_positive_rate > 0.0
            && self.max_false_positive_rate < 1.0
            && self.max_stumps >= 1
            && self.negative_window_px.0 >= 3.0
            && self.negative_window_px.1 >= self.negative_window_px.0
            && self.object_span.0 >= 0.0
            && self.object_span.1 > self.object_span.0
            && self.object_span.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training parameters {self:?}")))
        }
    }
}

/// Feature-major sample matrix: `data[f · n + i]`.
struct FeatureMatrix {
    n: usize,
    data: Vec<u8>,
}

impl FeatureMatrix {
    fn from_rows(rows: &[&[u8]], n_features: usize) -> Self {
        let n = rows.len();
        let mut data = vec![0u8; n * n_features];
        for (i, r) in rows.iter().enumerate() {
            for (f, &v) in r.iter().enumerate() {
                data[f * n + i] = v;
            }
        }
        FeatureMatrix { n, data }
    }

    #[inline]
    fn column(&self, f: usize) -> &[u8] {
        &self.data[f * self.n..(f + 1) * self.n]
    }
}

/// Lowest weighted error stump over every feature; ties go to the lowest
/// (feature, threshold, polarity).
fn best_stump(m: &FeatureMatrix, labels: &[bool], weights: &[f64], n_features: usize) -> (f64, Stump) {
    let total: f64 = weights.iter().sum();
    (0..n_features)
        .into_par_iter()
        .map(|f| {
            let col = m.column(f);
            let mut wp = [0.0f64; BINS];
            let mut wn = [0.0f64; BINS];
            for i in 0..m.n {
                if labels[i] {
                    wp[col[i] as usize] += weights[i];
                } else {
                    wn[col[i] as usize] += weights[i];
                }
            }
            let pos_total: f64 = wp.iter().sum();
            // polarity +1 predicts positive for x ≥ t
            let mut below_p = 0.0;
            let mut below_n = 0.0;
            let mut best = (f64::INFINITY, 0u16, 1i8);
            let neg_total = total - pos_total;
            for t in 1..BINS {
                below_p += wp[t - 1];
                below_n += wn[t - 1];
                let err_pos = below_p + (neg_total - below_n);
                let err_neg = total - err_pos;
                if err_pos < best.0 {
                    best = (err_pos, t as u16, 1);
                }
                if err_neg < best.0 {
                    best = (err_neg, t as u16, -1);
                }
            }
            (best.0, f, best.1, best.2)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)))
        .map(|(err, f, t, p)| (err / total.max(1e-300), Stump { feature: f, threshold: t, polarity: p, weight: 0.0 }))
        .expect("at least one feature")
}

fn train_stage(
    pos: &[&[u8]],
    pos_weights: &[f64],
    neg: &[&[u8]],
    n_features: usize,
    params: &TrainParams,
    stage_index: usize,
) -> Result<CascadeStage> {
    let rows: Vec<&[u8]> = pos.iter().chain(neg.iter()).copied().collect();
    let labels: Vec<bool> = (0..rows.len()).map(|i| i < pos.len()).collect();
    let m = FeatureMatrix::from_rows(&rows, n_features);
    let pw: f64 = pos_weights.iter().sum();
    let mut weights: Vec<f64> = pos_weights
        .iter()
        .map(|w| 0.5 * w / pw)
        .chain(std::iter::repeat_n(0.5 / neg.len() as f64, neg.len()))
        .collect();
    let mut scores = vec![0.0f64; rows.len()];
    let mut stumps = Vec::new();
    let allowed_misses = ((1.0 - params.min_detection_rate) * pos.len() as f64 + 1e-9).floor() as usize;
    while stumps.len() < params.max_stumps {
        let (err, mut stump) = best_stump(&m, &labels, &weights, n_features);
        let e = err.clamp(1e-10, 1.0 - 1e-10);
        stump.weight = 0.5 * ((1.0 - e) / e).ln();
        if !(stump.weight > 0.0) {
            break;
        }
        let col = m.column(stump.feature);
        let mut sum = 0.0;
        for i in 0..rows.len() {
            let v = stump.vote(col[i]);
            scores[i] += v;
            let y = if labels[i] { 1.0 } else { -1.0 };
            weights[i] *= (-y * v).exp();
            sum += weights[i];
        }
        for w in &mut weights {
            *w /= sum;
        }
        stumps.push(stump);

        let mut ps: Vec<f64> = scores[..pos.len()].to_vec();
        ps.sort_by(f64::total_cmp);
        let threshold = ps[allowed_misses.min(ps.len() - 1)];
        let passed_pos = ps.iter().filter(|&&s| s >= threshold).count();
        let fp = scores[pos.len()..].iter().filter(|&&s| s >= threshold).count();
        let fp_rate = fp as f64 / neg.len() as f64;
        if fp_rate <= params.max_false_positive_rate {
            return Ok(CascadeStage {
                stumps,
                threshold,
                detection_rate: passed_pos as f64 / pos.len() as f64,
                false_positive_rate: fp_rate,
            });
        }
    }
    Err(Error::TrainingFailure {
        stage: stage_index,
        reason: format!("false-positive target not met with {} stumps", stumps.len()),
    })
}

/// One attempted bootstrap window: source index and window box.
fn sample_window<R: rand::Rng>(rng: &mut R, sources: &[NegativeSource], range: (f64, f64)) -> Option<(usize, f64, f64, f64)> {
    let si = rng.random_range(0..sources.len());
    let img = &sources[si].image;
    let max_side = range.1.min(img.width as f64).min(img.height as f64);
    if max_side < range.0 {
        return None;
    }
    let s = rng.random_range(range.0..=max_side);
    let x = rng.random_range(0.0..=(img.width as f64 - s));
    let y = rng.random_range(0.0..=(img.height as f64 - s));
    Some((si, x, y, s))
}

/// Draws up to `want` windows from the sources that the partial cascade
/// accepts: random windows while the cascade is empty, afterwards a coarse
/// detector scan of the sources in shuffled order.
fn bootstrap_negatives(
    cascade: &Cascade,
    sources: &[NegativeSource],
    want: usize,
    params: &TrainParams,
    rng: &mut seed::Rng,
) -> Vec<Vec<u8>> {
    let mut found = Vec::new();
    if sources.is_empty() || want == 0 {
        return found;
    }
    if cascade.stages.is_empty() {
        let budget = want * params.bootstrap_attempts.max(1);
        let mut attempts = 0;
        while found.len() < want && attempts < budget {
            attempts += 1;
            let Some((si, x, y, s)) = sample_window(rng, sources, params.negative_window_px) else {
                continue;
            };
            let wbox = BBox::new(x.round() as i32, y.round() as i32, s.round() as i32, s.round() as i32);
            if sources[si].admits(&cascade.object_box(&wbox)) {
                let win = sources[si].image.resample_region(x, y, s, s, LBP_WINDOW, LBP_WINDOW);
                if let Ok(f) = window_features(&win, cascade.grid) {
                    found.push(f);
                }
            }
        }
        return found;
    }
    let scan = DetectParams {
        min_neighbors: 1,
        min_size: params.negative_window_px.0,
        max_size: params.negative_window_px.1,
        ..DetectParams::default()
    };
    let per_source = (2 * want).div_ceil(sources.len()).max(1);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(rng);
    for si in order {
        if found.len() >= want {
            break;
        }
        let src = &sources[si];
        let Ok(mut hits) = raw_hits(&src.image, cascade, &scan) else {
            continue;
        };
        hits.retain(|h| src.admits(&cascade.object_box(&h.bbox)));
        hits.shuffle(rng);
        hits.truncate(per_source);
        let accepted: Vec<Vec<u8>> = hits
            .par_iter()
            .filter_map(|h| {
                let b = h.bbox;
                let win = src.image.resample_region(b.x as f64, b.y as f64, b.w as f64, b.h as f64, LBP_WINDOW, LBP_WINDOW);
                let f = window_features(&win, cascade.grid).ok()?;
                cascade.evaluate(|i| f[i]).map(|_| f)
            })
            .collect();
        found.extend(accepted.into_iter().take(want - found.len()));
    }
    found
}

/// AdaBoost stages until the stage budget runs out or negatives are
/// exhausted. Positives rejected by earlier stages leave the training set.
pub fn train_cascade(data: &Dataset, params: &TrainParams, seed: u64) -> Result<Cascade> {
    params.validate()?;
    if data.positives.len() < 50 {
        return Err(Error::InsufficientData(format!("{} positives, need 50", data.positives.len())));
    }
    if data.negatives.len() < 200 && data.sources.is_empty() {
        return Err(Error::InsufficientData(format!("{} negative windows, need 200", data.negatives.len())));
    }
    if data.positive_weights.len() != data.positives.len() {
        return Err(Error::ContractViolation("one weight per positive".into()));
    }
    let mut rng = seed::rng_for(seed, "bootstrap");
    let n_features = params.grid * params.grid * BINS;
    let feats = |w: &[RasterImage]| -> Result<Vec<Vec<u8>>> { w.par_iter().map(|x| window_features(x, params.grid)).collect() };
    let mut pos = feats(&data.positives)?;
    let mut pos_w = data.positive_weights.clone();
    let mut neg = feats(&data.negatives)?;
    let target_neg = neg.len().max(200);
    if neg.len() < target_neg {
        let empty = Cascade {
            format: CASCADE_FORMAT.into(),
            version: CASCADE_VERSION,
            window: LBP_WINDOW,
            grid: params.grid,
            object_span: params.object_span,
            stages: Vec::new(),
        };
        neg.extend(bootstrap_negatives(&empty, &data.sources, target_neg - neg.len(), params, &mut rng));
    }
    let mut cascade = Cascade {
        format: CASCADE_FORMAT.into(),
        version: CASCADE_VERSION,
        window: LBP_WINDOW,
        grid: params.grid,
        object_span: params.object_span,
        stages: Vec::new(),
    };
    for k in 0..params.max_stages {
        if neg.len() < params.min_negatives.max(1) || pos.is_empty() {
            break;
        }
        let pr: Vec<&[u8]> = pos.iter().map(|v| v.as_slice()).collect();
        let nr: Vec<&[u8]> = neg.iter().map(|v| v.as_slice()).collect();
        let stage = train_stage(&pr, &pos_w, &nr, n_features, params, k)?;
        let keep_pos: Vec<bool> = pos.iter().map(|f| stage.score(|i| f[i]) >= stage.threshold).collect();
        neg.retain(|f| stage.score(|i| f[i]) >= stage.threshold);
        let mut it = keep_pos.iter();
        pos.retain(|_| *it.next().unwrap());
        let mut it = keep_pos.iter();
        pos_w.retain(|_| *it.next().unwrap());
        cascade.stages.push(stage);
        let survived = neg.len();
        if k + 1 < params.max_stages {
            let want = target_neg.saturating_sub(neg.len());
            neg.extend(bootstrap_negatives(&cascade, &data.sources, want, params, &mut rng));
        }
        log::debug!("stage {k}: {survived} negatives survive, {} after bootstrap", neg.len());
    }
    if cascade.stages.is_empty() {
        return Err(Error::TrainingFailure { stage: 0, reason: "no negatives to train against".into() });
    }
    Ok(cascade)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub scale_factor: f64,
    /// Window step in pyramid-level pixels.
    pub stride: usize,
    pub min_neighbors: usize,
    /// Smallest and largest window side, image pixels.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams { scale_factor: 1.1, stride: 4, min_neighbors: 2, min_size: 70.0, max_size: 180.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Object box (the window's object span), image pixels.
    pub bbox: BBox,
    pub score: f64,
    /// Raw window hits merged into this detection.
    pub neighbors: usize,
}

/// Codes whose counts are served from integral images.
const INTEGRAL_CODES: usize = 24;

struct Level {
    codes: RasterImage,
    /// Integral image per fast code, `(w+1)·(h+1)`.
    integrals: Vec<(u8, Vec<u32>)>,
    sx: f64,
    sy: f64,
}

impl Level {
    fn build(image: &RasterImage, side: f64, cascade: &Cascade) -> Option<Level> {
        let r = side / LBP_WINDOW as f64;
        let (w, h) = ((image.width as f64 / r).round() as usize, (image.height as f64 / r).round() as usize);
        if w < LBP_WINDOW || h < LBP_WINDOW {
            return None;
        }
        let codes = lbp_code_image(&image.resize_area(w, h));
        let mut fast: Vec<u8> = Vec::new();
        'outer: for st in &cascade.stages {
            for s in &st.stumps {
                let c = (s.feature % BINS) as u8;
                if !fast.contains(&c) {
                    if fast.len() == INTEGRAL_CODES {
                        break 'outer;
                    }
                    fast.push(c);
                }
            }
        }
        let integrals = fast
            .into_iter()
            .map(|c| {
                let mut ii = vec![0u32; (w + 1) * (h + 1)];
                for y in 0..h {
                    let mut row = 0u32;
                    for x in 0..w {
                        row += u32::from(codes.data[y * w + x] == c);
                        ii[(y + 1) * (w + 1) + x + 1] = ii[y * (w + 1) + x + 1] + row;
                    }
                }
                (c, ii)
            })
            .collect();
        Some(Level { codes, integrals, sx: image.width as f64 / w as f64, sy: image.height as f64 / h as f64 })
    }
}

/// Lazy per-window feature lookup on a level.
struct WindowProbe<'a> {
    level: &'a Level,
    x0: usize,
    y0: usize,
    grid: usize,
    spans: &'a [(usize, usize)],
    hist: Vec<u16>,
    filled: Vec<bool>,
}

impl WindowProbe<'_> {
    fn value(&mut self, feature: usize) -> u8 {
        let cell = feature / BINS;
        let code = (feature % BINS) as u8;
        let (cx, cy) = (cell % self.grid, cell / self.grid);
        let (xs, xe) = self.spans[cx];
        let (ys, ye) = self.spans[cy];
        let w = self.level.codes.width;
        if let Some((_, ii)) = self.level.integrals.iter().find(|(c, _)| *c == code) {
            let (x0, x1, y0, y1) = (self.x0 + xs, self.x0 + xe, self.y0 + ys, self.y0 + ye);
            let at = |x: usize, y: usize| ii[y * (w + 1) + x] as i64;
            let n = at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0);
            return n.min(255) as u8;
        }
        if !self.filled[cell] {
            let base = cell * BINS;
            self.hist[base..base + BINS].fill(0);
            for y in ys..ye {
                let row = (self.y0 + y) * w + self.x0;
                for x in xs..xe {
                    self.hist[base + self.level.codes.data[row + x] as usize] += 1;
                }
            }
            self.filled[cell] = true;
        }
        self.hist[cell * BINS + code as usize].min(255) as u8
    }
}

/// Effective pixel span of each cell, skipping the window border.
fn cell_spans(grid: usize) -> Vec<(usize, usize)> {
    (0..grid)
        .map(|c| {
            let (s, e) = cell_span(LBP_WINDOW, grid, c);
            (s.max(1), e.min(LBP_WINDOW - 1).max(s.max(1)))
        })
        .collect()
}

/// Window sides of the pyramid, smallest first.
pub fn pyramid_sides(params: &DetectParams) -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = params.min_size;
    while s <= params.max_size + 1e-9 && out.len() < 200 {
        out.push(s);
        s *= params.scale_factor;
    }
    out
}

/// Every accepted window, in (level, row, column) order; boxes are window
/// boxes in image pixels and scores the cascade margins.
pub fn raw_hits(image: &RasterImage, cascade: &Cascade, params: &DetectParams) -> Result<Vec<Detection>> {
    if !(params.scale_factor > 1.0) || params.stride == 0 || !(params.min_size > 0.0) {
        return Err(Error::Config(format!("invalid detection parameters {params:?}")));
    }
    if cascade.stages.is_empty() {
        return Ok(Vec::new());
    }
    let spans = cell_spans(cascade.grid);
    let mut hits = Vec::new();
    for side in pyramid_sides(params) {
        let Some(level) = Level::build(image, side, cascade) else {
            continue;
        };
        let (w, h) = (level.codes.width, level.codes.height);
        let rows: Vec<usize> = (0..=h - LBP_WINDOW).step_by(params.stride).collect();
        let level_hits: Vec<Detection> = rows
            .par_iter()
            .flat_map_iter(|&y| {
                let mut probe = WindowProbe {
                    level: &level,
                    x0: 0,
                    y0: y,
                    grid: cascade.grid,
                    spans: &spans,
                    hist: vec![0; cascade.grid * cascade.grid * BINS],
                    filled: vec![false; cascade.grid * cascade.grid],
                };
                let mut out = Vec::new();
                for x in (0..=w - LBP_WINDOW).step_by(params.stride) {
                    probe.x0 = x;
                    probe.filled.fill(false);
                    if let Some(m) = cascade.evaluate(|f| probe.value(f)) {
                        let b = BBox::new(
                            (x as f64 * level.sx).round() as i32,
                            (y as f64 * level.sy).round() as i32,
                            (LBP_WINDOW as f64 * level.sx).round() as i32,
                            (LBP_WINDOW as f64 * level.sy).round() as i32,
                        );
                        out.push(Detection { bbox: b, score: m, neighbors: 1 });
                    }
                }
                out
            })
            .collect();
        hits.extend(level_hits);
    }
    Ok(hits)
}

/// Connected components of hits under `IoU ≥ 0.3`; each component with at
/// least `min_neighbors` members becomes its score-weighted mean box.
pub fn group_hits(hits: &[Detection], min_neighbors: usize) -> Vec<Detection> {
    let n = hits.len();
    let mut comp = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let g = groups.len();
        comp[s] = g;
        let mut stack = vec![s];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if comp[j] == usize::MAX && hits[i].bbox.iou(&hits[j].bbox) >= 0.3 {
                    comp[j] = g;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    let mut out: Vec<Detection> = groups
        .into_iter()
        .filter(|m| m.len() >= min_neighbors.max(1))
        .map(|m| {
            let wsum: f64 = m.iter().map(|&i| hits[i].score + 1e-6).sum();
            let avg = |f: &dyn Fn(&BBox) -> i32| m.iter().map(|&i| f(&hits[i].bbox) as f64 * (hits[i].score + 1e-6)).sum::<f64>() / wsum;
            Detection {
                bbox: BBox::new(
                    avg(&|b| b.x).round() as i32,
                    avg(&|b| b.y).round() as i32,
                    avg(&|b| b.w).round() as i32,
                    avg(&|b| b.h).round() as i32,
                ),
                score: m.iter().map(|&i| hits[i].score).sum(),
                neighbors: m.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.y.cmp(&b.bbox.y))
            .then(a.bbox.x.cmp(&b.bbox.x))
    });
    out
}

/// Multi-scale detection; boxes are object boxes clipped to the image,
/// sorted by score.
pub fn detect(image: &RasterImage, cascade: &Cascade, params: &DetectParams) -> Result<Vec<Detection>> {
    let hits = raw_hits(image, cascade, params)?;
    let bounds = image.bounds();
    Ok(group_hits(&hits, params.min_neighbors)
        .into_iter()
        .filter_map(|d| {
            let b = cascade.object_box(&d.bbox).intersect(&bounds)?;
            Some(Detection { bbox: b, ..d })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningRound {
    pub false_positives: usize,
    pub missed_positives: usize,
    pub negatives_after: usize,
}

/// Rounds of: detect on the negative images, append false-positive windows
/// to the negatives, double the weight of positives the cascade misses,
/// retrain with the same seed. A round without false positives ends the
/// loop and leaves the dataset as it is.
pub fn hard_negative_mine(
    cascade: &Cascade,
    data: &Dataset,
    negative_images: &[NegativeSource],
    rounds: usize,
    train: &TrainParams,
    detect_params: &DetectParams,
    seed: u64,
) -> Result<(Dataset, Cascade, Vec<MiningRound>)> {
    if rounds == 0 {
        return Err(Error::Config("mining needs at least one round".into()));
    }
    let mut data = data.clone();
    let mut cascade = cascade.clone();
    let mut log = Vec::new();
    for _ in 0..rounds {
        let mut fps = Vec::new();
        for src in negative_images {
            for hit in raw_hits(&src.image, &cascade, detect_params)? {
                if src.admits(&cascade.object_box(&hit.bbox)) {
                    let b = hit.bbox;
                    fps.push(src.image.resample_region(b.x as f64, b.y as f64, b.w as f64, b.h as f64, LBP_WINDOW, LBP_WINDOW));
                }
            }
        }
        if fps.is_empty() {
            break;
        }
        let mut missed = 0;
        for (p, w) in data.positives.iter().zip(data.positive_weights.iter_mut()) {
            if !cascade.classify(p)? {
                *w *= 2.0;
                missed += 1;
            }
        }
        let n_fp = fps.len();
        data.negatives.extend(fps);
        cascade = train_cascade(&data, train, seed)?;
        log.push(MiningRound { false_positives: n_fp, missed_positives: missed, negatives_after: data.negatives.len() });
    }
    Ok((data, cascade, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

/// `(1 + β²)·P·R / (β²·P + R)`, 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

impl MetricsReport {
    /// Ratios from counts; a ratio with a zero denominator is 0.
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<Self> {
        let total = tp + tn + fp + fn_;
        if total == 0 {
            return Err(Error::UndefinedMetric("no samples".into()));
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Ok(MetricsReport {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f2: f_beta(precision, recall, 2.0),
        })
    }
}

pub fn evaluate(predictions: &[bool], labels: &[bool]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::ContractViolation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    MetricsReport::from_counts(tp, tn, fp, fn_)
}

/// Classifies every window of a dataset and scores it.
pub fn evaluate_cascade(cascade: &Cascade, data: &Dataset) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(data.positives.len() + data.negatives.len());
    let mut labels = Vec::with_capacity(preds.capacity());
    for (set, label) in [(&data.positives, true), (&data.negatives, false)] {
        let p: Vec<bool> = set.par_iter().map(|w| cascade.classify(w)).collect::<Result<_>>()?;
        labels.extend(std::iter::repeat_n(label, p.len()));
        preds.extend(p);
    }
    evaluate(&preds, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    WrenchHead,
    Valve,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: ObjectKind,
    pub scenes: usize,
    pub negatives_per_scene: usize,
    pub render: RenderOptions,
    /// Camera distance jitter around the nominal depth, meters.
    pub depth_jitter_m: f64,
    /// Lateral camera jitter, meters.
    pub offset_jitter_m: f64,
    /// Positive window center and size jitter, fraction of the window.
    pub window_jitter: f64,
    pub object_span: (f64, f64),
    pub negative_window_px: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: ObjectKind::WrenchHead,
            scenes: 56,
            negatives_per_scene: 20,
            render: RenderOptions::default(),
            depth_jitter_m: 0.05,
            offset_jitter_m: 0.02,
            window_jitter: 0.04,
            object_span: (0.1, 0.9),
            negative_window_px: (70.0, 180.0),
        }
    }
}

/// Window around `object` so that the object spans `span` of it, with
/// seeded center and size jitter.
pub fn object_window<R: rand::Rng>(image: &RasterImage, object: &BBox, span: (f64, f64), jitter: f64, rng: &mut R) -> RasterImage {
    let (cx, cy) = object.center();
    let side = object.w.max(object.h) as f64 / (span.1 - span.0);
    let j = |r: &mut R| if jitter > 0.0 { r.random_range(-jitter..=jitter) } else { 0.0 };
    let s = side * (1.0 + j(rng));
    let (dx, dy) = (j(rng) * side, j(rng) * side);
    // box center sits half a pixel right/below the pixel-center coordinates
    let (x0, y0) = (cx + dx - s / 2.0, cy + dy - s / 2.0);
    image.resample_region(x0, y0, s, s, LBP_WINDOW, LBP_WINDOW)
}

/// One rendered frame with its object boxes, for datasets and probes.
pub fn render_object_frame(kind: ObjectKind, spec: &DatasetSpec, seed: u64) -> Result<(RasterImage, Vec<BBox>)> {
    let sc = generate_scenario(&GenParams::default(), seed::derive(seed, "scene"))?;
    let scene = &sc.scene;
    let intr = Intrinsics::default();
    let mut rng = seed::rng_for(seed, "camera");
    let mut jit = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let offset = Vec3::new(jit(spec.offset_jitter_m), jit(spec.offset_jitter_m), jit(spec.depth_jitter_m));
    let (camera, boxes) = match kind {
        ObjectKind::WrenchHead => {
            let cam = wrench_camera(scene, &intr, WRENCH_CAMERA_DEPTH_M, offset)?;
            let boxes: Vec<BBox> = (0..scene.wrenches.len()).filter_map(|i| head_bbox_truth(scene, i, &cam)).collect();
            (cam, boxes)
        }
        ObjectKind::Valve => {
            let cam = valve_rig(scene, &intr, VALVE_CAMERA_DEPTH_M, VALVE_BASELINE_M, offset)?.left;
            let boxes: Vec<BBox> = valve_roi(scene, &cam, 0.0).into_iter().collect();
            (cam, boxes)
        }
    };
    let image = render_panel_image(scene, scene.wrench_side, &camera, (intr.width, intr.height), &spec.render, seed::derive(seed, "render"))?;
    let bounds = image.bounds();
    let boxes = boxes.into_iter().filter(|b: &BBox| b.intersect(&bounds) == Some(*b)).collect();
    Ok((image, boxes))
}

/// Renders `spec.scenes` random panels: one positive per visible object,
/// `negatives_per_scene` random windows away from the objects, and each
/// frame kept as a negative source.
pub fn synthesize_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let frames: Vec<(RasterImage, Vec<BBox>)> = (0..spec.scenes)
        .into_par_iter()
        .map(|k| render_object_frame(spec.kind, spec, seed::derive_indexed(seed, "dataset-frame", k as u64)))
        .collect::<Result<_>>()?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut sources = Vec::new();
    for (k, (image, boxes)) in frames.into_iter().enumerate() {
        let mut rng = seed::rng(seed::derive_indexed(seed, "dataset-windows", k as u64));
        for b in &boxes {
            positives.push(object_window(&image, b, spec.object_span, spec.window_jitter, &mut rng));
        }
        let src = NegativeSource { image, exclusions: boxes };
        let mut taken = 0;
        let mut attempts = 0;
        while taken < spec.negatives_per_scene && attempts < 100 * spec.negatives_per_scene.max(1) {
            attempts += 1;
            let Some((_, x, y, s)) = sample_window(&mut rng, std::slice::from_ref(&src), spec.negative_window_px) else {
                break;
            };
            let wbox = BBox::new(x.round() as i32, y.round() as i32, s.round() as i32, s.round() as i32);
            let span = spec.object_span;
            let obj = BBox::new(
                (x + span.0 * s).round() as i32,
                (y + span.0 * s).round() as i32,
                ((span.1 - span.0) * s).round() as i32,
                ((span.1 - span.0) * s).round() as i32,
            );
            if src.admits(&obj) && wbox.w > 0 {
                negatives.push(src.image.resample_region(x, y, s, s, LBP_WINDOW, LBP_WINDOW));
                taken += 1;
            }
        }
        sources.push(src);
    }
    Ok(Dataset::new(positives, negatives, sources))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_window(rng: &mut seed::Rng, bright: bool) -> RasterImage {
        let cx = 50.0 + rng.random_range(-5.0..5.0);
        let cy = 50.0 + rng.random_range(-5.0..5.0);
        let noise: Vec<u8> = (0..LBP_WINDOW * LBP_WINDOW).map(|_| rng.random_range(90..110)).collect();
        RasterImage::from_fn(LBP_WINDOW, LBP_WINDOW, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if bright && d2 < 900.0 {
                230
            } else {
                noise[y * LBP_WINDOW + x]
            }
        })
    }

    fn separable(n_pos: usize, n_neg: usize) -> Dataset {
        let mut rng = seed::rng(3);
        let pos = (0..n_pos).map(|_| blob_window(&mut rng, true)).collect();
        let neg = (0..n_neg).map(|_| blob_window(&mut rng, false)).collect();
        Dataset::new(pos, neg, Vec::new())
    }

    #[test]
    fn separable_set_needs_one_stage() {
        let data = separable(60, 200);
        let c = train_cascade(&data, &TrainParams::default(), 1).unwrap();
        assert_eq!(c.stages.len(), 1);
        let m = evaluate_cascade(&c, &data).unwrap();
        assert_eq!((m.fp, m.fn_), (0, 0));
    }

    #[test]
    fn training_is_reproducible_and_round_trips() {
        let data = separable(60, 200);
        let a = train_cascade(&data, &TrainParams::default(), 9).unwrap();
        let b = train_cascade(&data, &TrainParams::default(), 9).unwrap();
        assert_eq!(a, b);
        let text = a.to_json().unwrap();
        assert_eq!(Cascade::from_json(&text).unwrap(), a);
        assert!(Cascade::from_json(&text.replace(CASCADE_FORMAT, "other")).is_err());
    }

    #[test]
    fn too_few_samples() {
        let data = separable(10, 200);
        assert!(matches!(train_cascade(&data, &TrainParams::default(), 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn blank_image_gives_nothing() {
        let mut data = separable(60, 200);
        data.negatives.extend((0..40).map(|k| RasterImage::new(LBP_WINDOW, LBP_WINDOW, 60 + 4 * k as u8)));
        let c = train_cascade(&data, &TrainParams::default(), 1).unwrap();
        let img = RasterImage::new(300, 240, 100);
        assert!(detect(&img, &c, &DetectParams::default()).unwrap().is_empty());
    }

    #[test]
    fn probe_features_match_window_features() {
        let mut rng = seed::rng(11);
        let img = RasterImage::from_fn(260, 220, |x, y| ((x * 7 + y * 13) % 50) as u8 + rng_byte(x, y));
        fn rng_byte(x: usize, y: usize) -> u8 {
            (((x * 2654435761usize) ^ (y * 40503)) % 97) as u8
        }
        let _ = rng.random::<u8>();
        let cascade = Cascade {
            format: CASCADE_FORMAT.into(),
            version: CASCADE_VERSION,
            window: LBP_WINDOW,
            grid: 4,
            object_span: (0.1, 0.9),
            stages: vec![CascadeStage {
                stumps: (0..40).map(|k| Stump { feature: k * 97 % 4096, threshold: 3, polarity: 1, weight: 1.0 }).collect(),
                threshold: -100.0,
                detection_rate: 1.0,
                false_positive_rate: 1.0,
            }],
        };
        let level = Level::build(&img, 100.0, &cascade).unwrap();
        let spans = cell_spans(4);
        for (x0, y0) in [(0, 0), (37, 12), (160, 120)] {
            let window = img.crop(BBox::new(x0 as i32, y0 as i32, 100, 100));
            let f = window_features(&window, 4).unwrap();
            let mut probe = WindowProbe {
                level: &level,
                x0,
                y0,
                grid: 4,
                spans: &spans,
                hist: vec![0; 16 * BINS],
                filled: vec![false; 16],
            };
            for feat in (0..4096).step_by(7) {
                assert_eq!(probe.value(feat), f[feat], "feature {feat} at {x0},{y0}");
            }
        }
    }

    #[test]
    fn metric_examples() {
        let m = MetricsReport::from_counts(97, 93, 3, 7).unwrap();
        assert!((m.precision - 0.97).abs() < 1e-12);
        assert!((m.recall - 97.0 / 104.0).abs() < 1e-12);
        assert!((m.f2 - 0.939_93).abs() < 1e-4);
        let all = evaluate(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall, all.f2), (1.0, 1.0, 1.0, 1.0));
        assert!(matches!(evaluate(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn grouping_merges_overlaps() {
        let d = |x: i32, s: f64| Detection { bbox: BBox::new(x, 10, 50, 50), score: s, neighbors: 1 };
        let g = group_hits(&[d(0, 1.0), d(4, 3.0), d(300, 2.0)], 2);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].neighbors, 2);
        assert_eq!(g[0].bbox.x, 3);
        assert_eq!(group_hits(&[d(0, 1.0), d(300, 2.0)], 1).len(), 2);
    }
}

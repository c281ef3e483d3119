//! Droplet segmentation, deposit-event triggering and spatial features.
//!
//! Droplets push the reading negative (device units are sign-inverted), so a
//! cell is a candidate when it lies strictly below `μ − z·σ` of its own frame.
//! Candidates are grouped with 8-connectivity, then filtered by size and by
//! the difference between bounding-box height and width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Frame, Session};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub z: f64,
    pub min_size: usize,
    pub aspect_diff_max: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            z: 2.0,
            min_size: 1,
            aspect_diff_max: 2,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z.is_finite() && self.z > 0.0) {
            return Err(Error::InvalidParameter(format!("z must be > 0, got {}", self.z)));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidParameter("min_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Conservative minimum region size for a deposited volume. Drops of
    /// 50 µL or less cover a single cell.
    pub fn min_size_for_volume(volume_ul: f64) -> usize {
        match volume_ul {
            v if v <= 50.0 => 1,
            v if v <= 200.0 => 2,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerParams {
    pub alpha: f64,
}

impl Default for TriggerParams {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.row0 as f64 && row <= self.row1 as f64 && col >= self.col0 as f64 && col <= self.col1 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRegion {
    /// Member cells as `(row, col)`, sorted row-major.
    pub cells: Vec<(usize, usize)>,
    /// `(row, col)`, weighted by negative magnitude.
    pub centroid: (f64, f64),
    pub bbox: BBox,
    pub sum_device_units: f64,
    pub negative_magnitude: f64,
}

impl DropRegion {
    fn from_cells(frame: &Frame, mut cells: Vec<(usize, usize)>) -> Self {
        cells.sort_unstable();
        let mut bbox = BBox {
            row0: usize::MAX,
            col0: usize::MAX,
            row1: 0,
            col1: 0,
        };
        let mut sum = 0.0;
        let mut neg = 0.0;
        let (mut wr, mut wc) = (0.0, 0.0);
        for &(r, c) in &cells {
            bbox.row0 = bbox.row0.min(r);
            bbox.col0 = bbox.col0.min(c);
            bbox.row1 = bbox.row1.max(r);
            bbox.col1 = bbox.col1.max(c);
            let v = frame.get(r, c);
            sum += v;
            if v < 0.0 {
                neg -= v;
                wr += -v * r as f64;
                wc += -v * c as f64;
            }
        }
        let centroid = if neg > 0.0 {
            // clamp away rounding drift so the centroid stays inside the box
            (
                (wr / neg).clamp(bbox.row0 as f64, bbox.row1 as f64),
                (wc / neg).clamp(bbox.col0 as f64, bbox.col1 as f64),
            )
        } else {
            let n = cells.len() as f64;
            (
                cells.iter().map(|c| c.0 as f64).sum::<f64>() / n,
                cells.iter().map(|c| c.1 as f64).sum::<f64>() / n,
            )
        };
        Self {
            cells,
            centroid,
            bbox,
            sum_device_units: sum,
            negative_magnitude: neg,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Population mean and standard deviation of a slice.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Labels 8-connected components of `mask` (row-major) with a two-pass
/// union-find scan. Returns components in order of their first cell.
pub(crate) fn label_components(mask: &[bool], rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    let mut sets = DisjointSet::new(mask.len());
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !mask[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            if c > 0 && mask[i - 1] {
                sets.union(i, i - 1);
            }
            if r > 0 {
                let up = i - cols;
                if mask[up] {
                    sets.union(i, up);
                }
                if c > 0 && mask[up - 1] {
                    sets.union(i, up - 1);
                }
                if c + 1 < cols && mask[up + 1] {
                    sets.union(i, up + 1);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; mask.len()];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for (i, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let root = sets.find(i);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push((i / cols, i % cols));
    }
    components
}

/// Detects droplet regions in a baseline-subtracted frame, strongest first.
pub fn detect_droplets(frame: &Frame, params: &DetectionParams) -> Result<Vec<DropRegion>> {
    params.validate()?;
    if !frame.is_finite() {
        return Err(Error::NonFinite("detection frame".into()));
    }
    let (mean, std) = mean_std(frame.values());
    let threshold = mean - params.z * std;
    let mask: Vec<bool> = frame.values().iter().map(|&v| v < threshold).collect();
    let mut regions: Vec<DropRegion> = label_components(&mask, frame.rows(), frame.cols())
        .into_iter()
        .filter(|cells| cells.len() >= params.min_size)
        .map(|cells| DropRegion::from_cells(frame, cells))
        .filter(|reg| reg.bbox.height().abs_diff(reg.bbox.width()) <= params.aspect_diff_max)
        .collect();
    regions.sort_by(|a, b| {
        b.negative_magnitude
            .total_cmp(&a.negative_magnitude)
            .then_with(|| a.cells[0].cmp(&b.cells[0]))
    });
    Ok(regions)
}

/// Frame-to-frame change metric `d_t = max |H_t − H_{t−1}|` for `t ≥ 1`.
/// Index `i` of the result corresponds to frame `i + 1`.
pub fn change_series(frames: &[Frame]) -> Result<Vec<f64>> {
    frames
        .windows(2)
        .map(|w| {
            w[1].ensure_same_dims(&w[0])?;
            Ok(w[1]
                .values()
                .iter()
                .zip(w[0].values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

fn session_frames(session: &Session) -> Result<Vec<Frame>> {
    (0..session.len()).map(|n| session.measured(n)).collect()
}

/// Frames where `d_t > mean(d) + α·std(d)`, with statistics over the whole
/// session's change series.
pub fn detect_deposit_events(session: &Session, params: &TriggerParams) -> Result<Vec<usize>> {
    deposit_events_in(&session_frames(session)?, params)
}

pub fn deposit_events_in(frames: &[Frame], params: &TriggerParams) -> Result<Vec<usize>> {
    if !(params.alpha.is_finite() && params.alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", params.alpha)));
    }
    if frames.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "deposit trigger needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    let d = change_series(frames)?;
    let (mean, std) = mean_std(&d);
    let tau = mean + params.alpha * std;
    Ok(d
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > tau)
        .map(|(i, _)| i + 1)
        .collect())
}

/// Change values that only seed the running statistics of the streaming
/// trigger. Fewer gives an unreliable std and spurious early events.
pub const STREAMING_WARMUP: usize = 5;

/// Causal variant for live streams: `d_t` is compared against the mean and
/// std of the earlier values `d_1..d_{t−1}` only. The first
/// [`STREAMING_WARMUP`] change values only seed the statistics.
pub fn deposit_events_streaming(frames: &[Frame], params: &TriggerParams) -> Result<Vec<usize>> {
    if !(params.alpha.is_finite() && params.alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", params.alpha)));
    }
    if frames.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "deposit trigger needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    let d = change_series(frames)?;
    let mut events = Vec::new();
    for t in STREAMING_WARMUP.min(d.len())..d.len() {
        let (mean, std) = mean_std(&d[..t]);
        if d[t] > mean + params.alpha * std {
            events.push(t + 1);
        }
    }
    Ok(events)
}

/// `size × size` patch centred on the rounded centroid `(row, col)`; cells
/// outside the grid are zero. For even sizes the centre sits at index
/// `size / 2`.
pub fn extract_patch(frame: &Frame, centroid: (f64, f64), size: usize) -> Vec<f64> {
    let cr = centroid.0.round() as isize;
    let cc = centroid.1.round() as isize;
    let half = (size / 2) as isize;
    let mut patch = Vec::with_capacity(size * size);
    for dr in 0..size as isize {
        for dc in 0..size as isize {
            patch.push(frame.try_get(cr - half + dr, cc - half + dc).unwrap_or(0.0));
        }
    }
    patch
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerFeatures {
    pub positive_mean: f64,
    pub positive_median: f64,
    pub positive_p75: f64,
    pub positive_cell_count: usize,
}

impl ContainerFeatures {
    /// False when the frame had no positive cells and the statistics are
    /// placeholders.
    pub fn is_present(&self) -> bool {
        self.positive_cell_count > 0
    }

    pub fn as_vector(&self) -> [f64; 3] {
        [self.positive_mean, self.positive_median, self.positive_p75]
    }
}

/// Percentile with linear interpolation between order statistics of a
/// sorted slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean, median and 75th percentile over all cells with a positive reading.
pub fn container_features(frame: &Frame) -> ContainerFeatures {
    let mut positive: Vec<f64> = frame.values().iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return ContainerFeatures {
            positive_mean: 0.0,
            positive_median: 0.0,
            positive_p75: 0.0,
            positive_cell_count: 0,
        };
    }
    positive.sort_by(f64::total_cmp);
    ContainerFeatures {
        positive_mean: positive.iter().sum::<f64>() / positive.len() as f64,
        positive_median: percentile_sorted(&positive, 0.5),
        positive_p75: percentile_sorted(&positive, 0.75),
        positive_cell_count: positive.len(),
    }
}

/// `Σ |v|` over the region's cells with a negative reading.
pub fn region_magnitude(frame: &Frame, region: &DropRegion) -> Result<f64> {
    let mut total = 0.0;
    for &(r, c) in &region.cells {
        if r >= frame.rows() || c >= frame.cols() {
            return Err(Error::IndexOutOfRange {
                index: r * frame.cols() + c,
                len: frame.len(),
            });
        }
        let v = frame.get(r, c);
        if v < 0.0 {
            total -= v;
        }
    }
    Ok(total)
}

/// Detection output for one frame, as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub regions: Vec<DropRegion>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::DeviceProfile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet, VecDeque};

    /// Threshold + BFS flood fill, written independently of the union-find path.
    fn oracle(frame: &Frame, p: &DetectionParams) -> BTreeSet<Vec<(usize, usize)>> {
        let n = frame.len() as f64;
        let mean = frame.values().iter().sum::<f64>() / n;
        let std = (frame.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let thr = mean - p.z * std;
        let (rows, cols) = frame.dims();
        let mut seen = vec![vec![false; cols]; rows];
        let mut out = BTreeSet::new();
        for r in 0..rows {
            for c in 0..cols {
                if seen[r][c] || !(frame.get(r, c) < thr) {
                    continue;
                }
                let mut comp = vec![];
                let mut q = VecDeque::from([(r, c)]);
                seen[r][c] = true;
                while let Some((a, b)) = q.pop_front() {
                    comp.push((a, b));
                    for da in -1i32..=1 {
                        for db in -1i32..=1 {
                            let (na, nb) = (a as i32 + da, b as i32 + db);
                            if na < 0 || nb < 0 || na >= rows as i32 || nb >= cols as i32 {
                                continue;
                            }
                            let (na, nb) = (na as usize, nb as usize);
                            if !seen[na][nb] && frame.get(na, nb) < thr {
                                seen[na][nb] = true;
                                q.push_back((na, nb));
                            }
                        }
                    }
                }
                let h = comp.iter().map(|x| x.0).max().unwrap() - comp.iter().map(|x| x.0).min().unwrap() + 1;
                let w = comp.iter().map(|x| x.1).max().unwrap() - comp.iter().map(|x| x.1).min().unwrap() + 1;
                if comp.len() >= p.min_size && (h as i64 - w as i64).unsigned_abs() as usize <= p.aspect_diff_max {
                    comp.sort();
                    out.insert(comp);
                }
            }
        }
        out
    }

    fn region_set(regions: &[DropRegion]) -> BTreeSet<Vec<(usize, usize)>> {
        regions.iter().map(|r| r.cells.clone()).collect()
    }

    #[test]
    fn constant_frame_has_no_regions() {
        let f = Frame::filled(32, 52, -40.0, 0.0);
        assert!(detect_droplets(&f, &DetectionParams::default()).unwrap().is_empty());
    }

    #[test]
    fn single_cell_drop() {
        let mut f = Frame::zeros(32, 52, 0.0);
        f.set(10, 20, -500.0);
        let regions = detect_droplets(&f, &DetectionParams::default()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].cells, vec![(10, 20)]);
        assert_eq!(regions[0].centroid, (10.0, 20.0));
        assert_eq!(regions[0].negative_magnitude, 500.0);
        assert_eq!(region_set(&regions), oracle(&f, &DetectionParams::default()));
    }

    #[test]
    fn elongated_component_rejected() {
        let mut f = Frame::zeros(32, 52, 0.0);
        for r in 5..10 {
            f.set(r, 30, -400.0);
        }
        let p = DetectionParams::default();
        assert!(detect_droplets(&f, &p).unwrap().is_empty());
        assert!(oracle(&f, &p).is_empty());
        let loose = DetectionParams { aspect_diff_max: 4, ..p };
        assert_eq!(detect_droplets(&f, &loose).unwrap().len(), 1);
    }

    #[test]
    fn min_size_and_diagonal_connectivity() {
        let mut f = Frame::zeros(32, 52, 0.0);
        f.set(3, 3, -300.0);
        f.set(4, 4, -300.0); // diagonal neighbour
        f.set(20, 40, -300.0);
        let p = DetectionParams { min_size: 2, ..Default::default() };
        let regions = detect_droplets(&f, &p).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].cells, vec![(3, 3), (4, 4)]);
        assert!(regions[0].bbox.contains(regions[0].centroid.0, regions[0].centroid.1));
    }

    #[test]
    fn regions_sorted_by_magnitude() {
        let mut f = Frame::zeros(32, 52, 0.0);
        f.set(2, 2, -300.0);
        f.set(20, 20, -600.0);
        f.set(20, 21, -100.0);
        let regions = detect_droplets(&f, &DetectionParams::default()).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].negative_magnitude, 700.0);
        assert!((regions[0].centroid.1 - (20.0 * 600.0 + 21.0 * 100.0) / 700.0).abs() < 1e-12);
    }

    #[test]
    fn matches_flood_fill_oracle_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let rows = rng.gen_range(1..=32);
            let cols = rng.gen_range(1..=52);
            let mut f = Frame::from_fn(rows, cols, 0.0, |_, _| rng.gen_range(-20.0..20.0));
            for _ in 0..rng.gen_range(0..6) {
                let (r0, c0) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
                for r in r0..(r0 + h).min(rows) {
                    for c in c0..(c0 + w).min(cols) {
                        f.set(r, c, rng.gen_range(-400.0..-100.0));
                    }
                }
            }
            let p = DetectionParams {
                z: rng.gen_range(0.5..3.0),
                min_size: rng.gen_range(1..4),
                aspect_diff_max: rng.gen_range(0..4),
            };
            let got = detect_droplets(&f, &p).unwrap();
            assert_eq!(region_set(&got), oracle(&f, &p));
        }
    }

    fn session_of(frames: Vec<Frame>) -> Session {
        let (rows, cols) = frames[0].dims();
        let profile = DeviceProfile { rows, cols, ..Default::default() };
        Session::new(profile, Frame::zeros(rows, cols, 0.0), frames, BTreeMap::new()).unwrap()
    }

    #[test]
    fn trigger_cases() {
        let flat: Vec<Frame> = (0..10).map(|t| Frame::filled(4, 4, 5.0, t as f64)).collect();
        assert!(detect_deposit_events(&session_of(flat), &TriggerParams::default()).unwrap().is_empty());

        let step: Vec<Frame> = (0..50)
            .map(|t| {
                let mut f = Frame::zeros(8, 8, t as f64);
                if t >= 25 {
                    f.set(3, 3, -300.0);
                }
                f
            })
            .collect();
        let d = change_series(&step).unwrap();
        let (m, s) = {
            let n = d.len() as f64;
            let m = d.iter().sum::<f64>() / n;
            (m, (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        let oracle: Vec<usize> = d.iter().enumerate().filter(|(_, &x)| x > m + 2.0 * s).map(|(i, _)| i + 1).collect();
        assert_eq!(oracle, vec![25]);
        assert_eq!(detect_deposit_events(&session_of(step), &TriggerParams::default()).unwrap(), vec![25]);

        let two: Vec<Frame> = (0..100)
            .map(|t| {
                let mut f = Frame::zeros(8, 8, t as f64);
                if t >= 10 {
                    f.set(1, 1, -250.0);
                }
                if t >= 40 {
                    f.set(6, 6, -250.0);
                }
                f
            })
            .collect();
        assert_eq!(detect_deposit_events(&session_of(two), &TriggerParams::default()).unwrap(), vec![10, 40]);

        let short: Vec<Frame> = (0..2).map(|t| Frame::zeros(2, 2, t as f64)).collect();
        assert!(matches!(
            detect_deposit_events(&session_of(short), &TriggerParams::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn trigger_offsets() {
        // a uniform offset shared by every frame changes nothing
        let base: Vec<Frame> = (0..30)
            .map(|t| {
                let mut f = Frame::zeros(6, 6, t as f64);
                if t >= 12 {
                    f.set(2, 2, -200.0);
                }
                f
            })
            .collect();
        let shifted: Vec<Frame> = base.iter().map(|f| f.map(|v| v + 77.0)).collect();
        let p = TriggerParams::default();
        assert_eq!(deposit_events_in(&base, &p).unwrap(), deposit_events_in(&shifted, &p).unwrap());
        // an offset that switches on mid-stream is itself an event
        let stepped: Vec<Frame> = base
            .iter()
            .enumerate()
            .map(|(t, f)| if t >= 20 { f.map(|v| v + 200.0) } else { f.clone() })
            .collect();
        assert_eq!(deposit_events_in(&stepped, &p).unwrap(), vec![12, 20]);
    }

    #[test]
    fn streaming_trigger_finds_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Frame> = (0..60)
            .map(|t| {
                let mut f = Frame::from_fn(8, 8, t as f64, |_, _| rng.gen_range(-8.0..8.0));
                if t >= 30 {
                    f.set(4, 4, f.get(4, 4) - 300.0);
                }
                f
            })
            .collect();
        let ev = deposit_events_streaming(&frames, &TriggerParams::default()).unwrap();
        assert!(ev.contains(&30));
        assert!(ev.iter().all(|&e| e > STREAMING_WARMUP));
        assert_eq!(deposit_events_in(&frames, &TriggerParams::default()).unwrap(), vec![30]);
    }

    #[test]
    fn patch_cases() {
        let zero = Frame::zeros(32, 52, 0.0);
        assert_eq!(extract_patch(&zero, (16.0, 26.0), 8), vec![0.0; 64]);

        let ones = Frame::filled(32, 52, 1.0, 0.0);
        let corner = extract_patch(&ones, (0.0, 0.0), 8);
        for r in 0..8 {
            for c in 0..8 {
                let expect = if r >= 4 && c >= 4 { 1.0 } else { 0.0 };
                assert_eq!(corner[r * 8 + c], expect);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let f = Frame::from_fn(32, 52, 0.0, |_, _| rng.gen_range(-100.0..100.0));
            let cen = (rng.gen_range(-2.0..34.0), rng.gen_range(-2.0..54.0));
            let size = rng.gen_range(1..10);
            let p = extract_patch(&f, cen, size);
            assert_eq!(p.len(), size * size);
            let (r0, c0) = (cen.0.round() as i64 - size as i64 / 2, cen.1.round() as i64 - size as i64 / 2);
            for i in 0..size {
                for j in 0..size {
                    let (r, c) = (r0 + i as i64, c0 + j as i64);
                    let expect = if r >= 0 && c >= 0 && r < 32 && c < 52 { f.get(r as usize, c as usize) } else { 0.0 };
                    assert_eq!(p[i * size + j], expect);
                }
            }
        }
    }

    #[test]
    fn container_feature_cases() {
        let neg = Frame::filled(3, 3, -5.0, 0.0);
        let f = container_features(&neg);
        assert_eq!(f.positive_cell_count, 0);
        assert!(!f.is_present());

        let mut g = Frame::filled(3, 3, -1.0, 0.0);
        for (i, v) in [2.0, 4.0, 6.0, 8.0].iter().enumerate() {
            g.set(i / 3, i % 3, *v);
        }
        let f = container_features(&g);
        assert_eq!(f.positive_cell_count, 4);
        assert_eq!(f.positive_mean, 5.0);
        assert_eq!(f.positive_median, 5.0);
        assert_eq!(f.positive_p75, 6.5);

        let u = container_features(&Frame::filled(4, 4, 12.5, 0.0));
        assert_eq!((u.positive_mean, u.positive_median, u.positive_p75), (12.5, 12.5, 12.5));
    }

    #[test]
    fn region_magnitude_cases() {
        let mut f = Frame::filled(4, 4, 3.0, 0.0);
        let region = DropRegion::from_cells(&f, vec![(0, 0), (0, 1)]);
        assert_eq!(region_magnitude(&f, &region).unwrap(), 0.0);
        f.set(2, 2, -500.0);
        let single = DropRegion::from_cells(&f, vec![(2, 2)]);
        assert_eq!(region_magnitude(&f, &single).unwrap(), 500.0);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = Frame::from_fn(6, 6, 0.0, |_, _| rng.gen_range(-50.0..50.0));
        let cells: Vec<(usize, usize)> = (0..6).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let reg = DropRegion::from_cells(&f, cells.clone());
        let expect: f64 = cells.iter().map(|&(r, c)| f.get(r, c)).filter(|v| *v < 0.0).map(f64::abs).sum();
        assert!((region_magnitude(&f, &reg).unwrap() - expect).abs() < 1e-12);
        assert!((reg.negative_magnitude - expect).abs() < 1e-12);

        let outside = DropRegion { cells: vec![(9, 9)], ..single };
        assert!(region_magnitude(&f, &outside).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn frame_strategy() -> impl Strategy<Value = Frame> {
            (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
                proptest::collection::vec(prop_oneof![3 => -10.0f64..10.0, 1 => -400.0f64..-100.0], r * c)
                    .prop_map(move |v| Frame::from_vec(r, c, v, 0.0).unwrap())
            })
        }

        proptest! {
            #[test]
            fn shift_invariant(f in frame_strategy(), k in -500.0f64..500.0) {
                let p = DetectionParams::default();
                let a = region_set(&detect_droplets(&f, &p).unwrap());
                let b = region_set(&detect_droplets(&f.map(|v| v + k), &p).unwrap());
                // the threshold moves with the shift up to rounding at the boundary
                let (m, s) = mean_std(f.values());
                let near = f.values().iter().any(|v| (v - (m - 2.0 * s)).abs() < 1e-6);
                prop_assume!(!near);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn disjoint_maximal_components(f in frame_strategy()) {
                let p = DetectionParams { min_size: 1, aspect_diff_max: 100, ..Default::default() };
                let regions = detect_droplets(&f, &p).unwrap();
                let mut seen = BTreeSet::new();
                for r in &regions {
                    for c in &r.cells {
                        prop_assert!(seen.insert(*c));
                    }
                    prop_assert!(r.bbox.contains(r.centroid.0, r.centroid.1));
                }
                prop_assert_eq!(region_set(&regions), oracle(&f, &p));
            }

            #[test]
            fn patch_translation(dr in -3i32..3, dc in -3i32..3, seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = Frame::from_fn(32, 52, 0.0, |_, _| rng.gen_range(-50.0..50.0));
                let moved = Frame::from_fn(32, 52, 0.0, |r, c| {
                    f.try_get(r as isize - dr as isize, c as isize - dc as isize).unwrap_or(0.0)
                });
                let cen = (16.0, 26.0);
                let a = extract_patch(&f, cen, 8);
                let b = extract_patch(&moved, (cen.0 + dr as f64, cen.1 + dc as f64), 8);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn percentile_ordering(vals in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
                let f = Frame::from_vec(1, vals.len(), vals.clone(), 0.0).unwrap();
                let feats = container_features(&f);
                if feats.is_present() {
                    let min_pos = vals.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
                    prop_assert!(feats.positive_p75 >= feats.positive_median);
                    prop_assert!(feats.positive_median >= min_pos);
                }
            }
        }
    }
}

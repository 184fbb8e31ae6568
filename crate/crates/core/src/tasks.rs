//! Synthetic shapes benchmark.
//!
//! Each image holds one to three shapes (circle, square, triangle, cross).
//! The largest shape is the *dominant* one and is always drawn last, so it
//! is never occluded. Three tasks read different labels off the same images:
//!
//! * `classify`: class of the dominant shape (cross-entropy, accuracy)
//! * `detect_grid`: per-cell occupancy on a `grid x grid` partition
//!   (per-cell binary cross-entropy, micro cell-F1)
//! * `keypoint`: centroid of the dominant shape in `[0, 1]^2`
//!   (squared error, mean Euclidean centroid error)

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, PruneMask};
use crate::nn::{predict, Loss, NetworkSpec, ParameterSet, Tensor};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_CLASSES] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    pub fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up at -r, flat base at +0.8r, half-width r at the base
                dy >= -r && dy <= 0.8 * r && dx.abs() <= (dy + r) / 1.8
            }
            ShapeKind::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Scale bucket of the dominant shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Relative frequency of each dominant class; normalised on use.
    pub class_freq: [f64; NUM_CLASSES],
    pub max_shapes: usize,
    /// Radius range as a fraction of the image side.
    pub min_radius_frac: f32,
    pub max_radius_frac: f32,
    /// Uniform pixel noise amplitude.
    pub noise: f32,
    pub grid: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 2000,
            n_val: 500,
            class_freq: [0.25; NUM_CLASSES],
            max_shapes: 3,
            min_radius_frac: 0.12,
            max_radius_frac: 0.35,
            noise: 0.05,
            grid: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let size = self.image_size as f32;
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("empty split".into()));
        }
        if !(self.min_radius_frac > 0.0 && self.min_radius_frac <= self.max_radius_frac) {
            return Err(Error::Config(format!(
                "radius range [{}, {}]",
                self.min_radius_frac, self.max_radius_frac
            )));
        }
        if 2.0 * self.max_radius_frac * size > size {
            return Err(Error::Config(format!(
                "shapes of radius {} do not fit a {}px image",
                self.max_radius_frac * size,
                self.image_size
            )));
        }
        if self.max_shapes == 0 {
            return Err(Error::Config("max_shapes must be >= 1".into()));
        }
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "grid {} does not divide image size {}",
                self.grid, self.image_size
            )));
        }
        let total: f64 = self.class_freq.iter().sum();
        if self.class_freq.iter().any(|&f| f < 0.0 || !f.is_finite()) || !(total > 0.0) {
            return Err(Error::Config(format!("class frequencies {:?}", self.class_freq)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {}", self.noise)));
        }
        Ok(())
    }
}

/// Labels of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeLabels {
    pub class: ShapeKind,
    /// Row-major occupancy of the `grid x grid` cells.
    pub cells: Vec<bool>,
    /// Centroid `(x, y)` of the dominant shape, normalised to `[0, 1]`.
    pub centroid: [f32; 2],
    pub radius: f32,
    pub bucket: SizeBucket,
    pub n_shapes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<ShapeLabels>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
}

impl ShapesDataset {
    pub fn split(&self, which: SplitKind) -> &Split {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
        }
    }
}

/// A shape placed in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
    pub color: [f32; 3],
}

fn sample_class(rng: &mut ChaCha8Rng, freq: &[f64; NUM_CLASSES]) -> ShapeKind {
    let total: f64 = freq.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &f) in freq.iter().enumerate() {
        acc += f;
        if u < acc {
            return ShapeKind::ALL[i];
        }
    }
    // u == total only through rounding; take the last non-empty class
    let last = freq.iter().rposition(|&f| f > 0.0).unwrap_or(0);
    ShapeKind::ALL[last]
}

fn bucket_of(config: &DatasetConfig, r: f32) -> SizeBucket {
    let (dom_lo, r_hi) = dominant_range(config);
    let third = (r_hi - dom_lo) / 3.0;
    if r < dom_lo + third {
        SizeBucket::Small
    } else if r < dom_lo + 2.0 * third {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Radius range of the dominant shape: the upper part of the configured
/// range, leaving room for smaller distractors.
fn dominant_range(config: &DatasetConfig) -> (f32, f32) {
    let sizef = config.image_size as f32;
    let r_lo = config.min_radius_frac * sizef;
    let r_hi = config.max_radius_frac * sizef;
    (r_lo + 0.4 * (r_hi - r_lo), r_hi)
}

/// Draw `shapes` in order over a flat background into `pixels`
/// (`[3, H, W]`) and derive the labels. The last shape is the dominant one.
pub fn rasterize(
    config: &DatasetConfig,
    shapes: &[PlacedShape],
    background: [f32; 3],
    pixels: &mut [f32],
) -> ShapeLabels {
    let size = config.image_size;
    let plane = size * size;
    for c in 0..3 {
        pixels[c * plane..(c + 1) * plane].fill(background[c]);
    }
    let mut covered = vec![false; plane];
    let mut dom_sum = [0.0f64; 2];
    let mut dom_count = 0usize;
    for (si, s) in shapes.iter().enumerate() {
        let dominant = si + 1 == shapes.len();
        for y in 0..size {
            let dy = y as f32 + 0.5 - s.cy;
            for x in 0..size {
                let dx = x as f32 + 0.5 - s.cx;
                if !s.kind.covers(dx, dy, s.r) {
                    continue;
                }
                let p = y * size + x;
                covered[p] = true;
                for c in 0..3 {
                    pixels[c * plane + p] = s.color[c];
                }
                if dominant {
                    dom_sum[0] += x as f64 + 0.5;
                    dom_sum[1] += y as f64 + 0.5;
                    dom_count += 1;
                }
            }
        }
    }
    let cell = size / config.grid;
    let mut cells = vec![false; config.grid * config.grid];
    for (p, _) in covered.iter().enumerate().filter(|(_, &c)| c) {
        let (y, x) = (p / size, p % size);
        cells[(y / cell) * config.grid + x / cell] = true;
    }
    let dom = shapes.last().expect("at least one shape");
    let centroid = if dom_count > 0 {
        [
            (dom_sum[0] / dom_count as f64 / size as f64) as f32,
            (dom_sum[1] / dom_count as f64 / size as f64) as f32,
        ]
    } else {
        [dom.cx / size as f32, dom.cy / size as f32]
    };
    ShapeLabels {
        class: dom.kind,
        cells,
        centroid,
        radius: dom.r,
        bucket: bucket_of(config, dom.r),
        n_shapes: shapes.len(),
    }
}

fn render(config: &DatasetConfig, rng: &mut ChaCha8Rng, pixels: &mut [f32]) -> ShapeLabels {
    let sizef = config.image_size as f32;
    let r_lo = config.min_radius_frac * sizef;
    let (dom_lo, r_hi) = dominant_range(config);
    let class = sample_class(rng, &config.class_freq);
    let dom_r = rng.gen_range(dom_lo..=r_hi);
    let n_shapes = rng.gen_range(1..=config.max_shapes);
    let place = |rng: &mut ChaCha8Rng, kind: ShapeKind, r: f32| -> PlacedShape {
        let cx = rng.gen_range(r..=sizef - r);
        let cy = rng.gen_range(r..=sizef - r);
        let color = [
            rng.gen_range(0.45..1.0),
            rng.gen_range(0.45..1.0),
            rng.gen_range(0.45..1.0),
        ];
        PlacedShape { kind, cx, cy, r, color }
    };
    let mut shapes = Vec::with_capacity(n_shapes);
    let small_hi = (0.75 * dom_r).max(r_lo);
    for _ in 1..n_shapes {
        let kind = ShapeKind::ALL[rng.gen_range(0..NUM_CLASSES)];
        let r = rng.gen_range(r_lo..=small_hi).min(0.75 * dom_r);
        shapes.push(place(rng, kind, r));
    }
    shapes.push(place(rng, class, dom_r));
    let background = [
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.0..0.25),
    ];
    let labels = rasterize(config, &shapes, background, pixels);
    if config.noise > 0.0 {
        for v in pixels.iter_mut() {
            *v = (*v + rng.gen_range(-config.noise..=config.noise)).clamp(0.0, 1.0);
        }
    }
    labels
}

fn generate_split(config: &DatasetConfig, rng: &mut ChaCha8Rng, n: usize) -> Result<Split> {
    let per = 3 * config.image_size * config.image_size;
    let mut data = vec![0.0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(render(config, rng, &mut data[i * per..(i + 1) * per]));
    }
    Ok(Split {
        images: Tensor::new(vec![n, 3, config.image_size, config.image_size], data)?,
        labels,
    })
}

/// Generate train and validation splits from one seeded stream.
pub fn generate(config: &DatasetConfig, seed: u64) -> Result<ShapesDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate_split(config, &mut rng, config.n_train)?;
    let val = generate_split(config, &mut rng, config.n_val)?;
    Ok(ShapesDataset {
        config: config.clone(),
        seed,
        train,
        val,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    DetectGrid,
    Keypoint,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Classify, TaskKind::DetectGrid, TaskKind::Keypoint];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::DetectGrid => "detect_grid",
            TaskKind::Keypoint => "keypoint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s}")))
    }

    pub fn loss(self) -> Loss {
        match self {
            TaskKind::Classify => Loss::CrossEntropy,
            TaskKind::DetectGrid => Loss::BinaryCrossEntropy,
            TaskKind::Keypoint => Loss::SquaredError,
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskKind::Classify => MetricKind::Accuracy,
            TaskKind::DetectGrid => MetricKind::CellF1,
            TaskKind::Keypoint => MetricKind::CentroidError,
        }
    }

    pub fn output_dim(self, grid: usize) -> usize {
        match self {
            TaskKind::Classify => NUM_CLASSES,
            TaskKind::DetectGrid => grid * grid,
            TaskKind::Keypoint => 2,
        }
    }

    /// Training targets for the given rows, in the layout [`Self::loss`] expects.
    pub fn targets(self, labels: &[ShapeLabels], rows: &[usize]) -> Tensor {
        match self {
            TaskKind::Classify => {
                Tensor::from_vec(rows.iter().map(|&i| labels[i].class.index() as f32).collect())
            }
            TaskKind::DetectGrid => {
                let k = labels[0].cells.len();
                let data = rows
                    .iter()
                    .flat_map(|&i| labels[i].cells.iter().map(|&c| c as u8 as f32))
                    .collect();
                Tensor::new(vec![rows.len(), k], data).expect("consistent cell count")
            }
            TaskKind::Keypoint => {
                let data = rows.iter().flat_map(|&i| labels[i].centroid).collect();
                Tensor::new(vec![rows.len(), 2], data).expect("two coordinates")
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    CellF1,
    CentroidError,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::CellF1 => "cell_f1",
            MetricKind::CentroidError => "centroid_error",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::CentroidError)
    }

    /// Metric mapped so that larger is always better.
    pub fn score(self, value: f64) -> f64 {
        if self.higher_is_better() {
            value
        } else {
            -value
        }
    }
}

/// A task bound to the head that serves it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub head: String,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            head: kind.name().to_string(),
        }
    }

    pub fn loss(&self) -> Loss {
        self.kind.loss()
    }

    pub fn metric(&self) -> MetricKind {
        self.kind.metric()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub label: String,
    pub count: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: MetricKind,
    pub value: f64,
    pub loss: f64,
    /// Per dominant class (classification and detection only).
    pub per_class: Vec<BreakdownRow>,
    /// Per dominant-shape size bucket.
    pub per_size: Vec<BreakdownRow>,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    count: usize,
    correct: usize,
    tp: usize,
    fp: usize,
    fneg: usize,
    err_sum: f64,
}

impl Tally {
    fn value(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Accuracy => {
                if self.count == 0 {
                    0.0
                } else {
                    self.correct as f64 / self.count as f64
                }
            }
            MetricKind::CellF1 => {
                let denom = 2 * self.tp + self.fp + self.fneg;
                if denom == 0 {
                    1.0
                } else {
                    2.0 * self.tp as f64 / denom as f64
                }
            }
            MetricKind::CentroidError => {
                if self.count == 0 {
                    0.0
                } else {
                    self.err_sum / self.count as f64
                }
            }
        }
    }
}

/// Score raw head outputs `[N, K]` against labels.
pub fn score_outputs(kind: TaskKind, outputs: &Tensor, labels: &[ShapeLabels]) -> Result<Evaluation> {
    let n = labels.len();
    if outputs.shape().len() != 2 || outputs.shape()[0] != n {
        return Err(Error::Shape(format!(
            "{} outputs for {n} labels",
            outputs.shape().first().copied().unwrap_or(0)
        )));
    }
    let k = outputs.shape()[1];
    let grid_cells = labels.first().map(|l| l.cells.len()).unwrap_or(0);
    let expected_k = kind.output_dim((grid_cells as f64).sqrt() as usize);
    if k != expected_k {
        return Err(Error::Spec(format!(
            "head emits {k} outputs, task {kind} needs {expected_k}"
        )));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let loss = kind.loss().value(outputs, &kind.targets(labels, &all_rows))?;
    let metric = kind.metric();
    let mut total = Tally::default();
    let mut per_class = [Tally::default(); NUM_CLASSES];
    let mut per_size = [Tally::default(); 3];
    for (i, lab) in labels.iter().enumerate() {
        let row = &outputs.data()[i * k..(i + 1) * k];
        let mut t = Tally {
            count: 1,
            ..Tally::default()
        };
        match kind {
            TaskKind::Classify => {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                t.correct = (best == lab.class.index()) as usize;
            }
            TaskKind::DetectGrid => {
                for (&z, &truth) in row.iter().zip(&lab.cells) {
                    match (z > 0.0, truth) {
                        (true, true) => t.tp += 1,
                        (true, false) => t.fp += 1,
                        (false, true) => t.fneg += 1,
                        (false, false) => {}
                    }
                }
            }
            TaskKind::Keypoint => {
                let dx = (row[0] - lab.centroid[0]) as f64;
                let dy = (row[1] - lab.centroid[1]) as f64;
                t.err_sum = (dx * dx + dy * dy).sqrt();
            }
        }
        for acc in [
            &mut total,
            &mut per_class[lab.class.index()],
            &mut per_size[lab.bucket as usize],
        ] {
            acc.count += t.count;
            acc.correct += t.correct;
            acc.tp += t.tp;
            acc.fp += t.fp;
            acc.fneg += t.fneg;
            acc.err_sum += t.err_sum;
        }
    }
    let per_class = if kind == TaskKind::Keypoint {
        Vec::new()
    } else {
        ShapeKind::ALL
            .iter()
            .map(|c| BreakdownRow {
                label: c.name().to_string(),
                count: per_class[c.index()].count,
                value: per_class[c.index()].value(metric),
            })
            .collect()
    };
    let per_size = SizeBucket::ALL
        .iter()
        .map(|b| BreakdownRow {
            label: b.name().to_string(),
            count: per_size[*b as usize].count,
            value: per_size[*b as usize].value(metric),
        })
        .collect();
    Ok(Evaluation {
        metric,
        value: total.value(metric),
        loss,
        per_class,
        per_size,
    })
}

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 250;

/// Head outputs for a whole split, evaluated in fixed-size chunks.
pub fn split_outputs(
    params: &ParameterSet,
    spec: &NetworkSpec,
    head: &str,
    split: &Split,
) -> Result<Tensor> {
    let n = split.len();
    let mut data = Vec::new();
    let mut k = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let rows: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let out = predict(params, spec, &split.images.rows(&rows), head)?;
        k = out.shape()[1];
        data.extend_from_slice(out.data());
    }
    Tensor::new(vec![n, k], data)
}

/// Evaluate `mask ⊙ params` on a split.
pub fn evaluate(
    params: &ParameterSet,
    mask: Option<&PruneMask>,
    spec: &NetworkSpec,
    task: &TaskSpec,
    data: &ShapesDataset,
    split: SplitKind,
) -> Result<Evaluation> {
    let expected = task.kind.output_dim(data.config.grid);
    let got = spec.output_shape(&task.head)?.numel();
    if got != expected {
        return Err(Error::Spec(format!(
            "head {} emits {got} outputs, task {} needs {expected}",
            task.head, task.kind
        )));
    }
    let masked;
    let params = match mask {
        Some(m) => {
            let mut p = params.clone();
            apply_mask(&mut p, m)?;
            masked = p;
            &masked
        }
        None => params,
    };
    let split = data.split(split);
    let outputs = split_outputs(params, spec, &task.head, split)?;
    score_outputs(task.kind, &outputs, &split.labels)
}

/// Hex digest identifying a dataset by its config and seed.
pub fn cache_key(config: &DatasetConfig, seed: u64) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(seed.to_le_bytes());
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

const LABEL_FIXED: usize = 6;

fn split_tensors(name: &str, split: &Split, out: &mut ParameterSet) -> Result<()> {
    out.insert(format!("{name}/images"), split.images.clone());
    let g = split.labels.first().map_or(0, |l| l.cells.len());
    let mut rows = Vec::with_capacity(split.len() * (LABEL_FIXED + g));
    for l in &split.labels {
        rows.extend([
            l.class.index() as f32,
            l.centroid[0],
            l.centroid[1],
            l.radius,
            l.bucket as usize as f32,
            l.n_shapes as f32,
        ]);
        rows.extend(l.cells.iter().map(|&c| c as u8 as f32));
    }
    out.insert(
        format!("{name}/labels"),
        Tensor::new(vec![split.len(), LABEL_FIXED + g], rows)?,
    );
    Ok(())
}

fn split_from(name: &str, params: &ParameterSet) -> Result<Split> {
    let images = params.get(&format!("{name}/images"))?.clone();
    let raw = params.get(&format!("{name}/labels"))?;
    let width = raw.shape()[1];
    let bad = || Error::Format {
        tensor: format!("{name}/labels"),
        reason: "label out of range".into(),
    };
    let labels = raw
        .data()
        .chunks_exact(width)
        .map(|r| {
            Ok(ShapeLabels {
                class: *ShapeKind::ALL.get(r[0] as usize).ok_or_else(bad)?,
                centroid: [r[1], r[2]],
                radius: r[3],
                bucket: *SizeBucket::ALL.get(r[4] as usize).ok_or_else(bad)?,
                n_shapes: r[5] as usize,
                cells: r[LABEL_FIXED..].iter().map(|&c| c != 0.0).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if images.shape()[0] != labels.len() {
        return Err(bad());
    }
    Ok(Split { images, labels })
}

/// Load the dataset from `dir` when cached, otherwise generate and cache it.
/// The file lives at `dir/shapes-<key>.ltht` in the dense checkpoint format.
pub fn load_or_generate(config: &DatasetConfig, seed: u64, dir: &std::path::Path) -> Result<ShapesDataset> {
    config.validate()?;
    let path = dir.join(format!("shapes-{}.ltht", cache_key(config, seed)?));
    if path.exists() {
        let ck = crate::metrics::load(&path)?;
        let params = ck.params();
        return Ok(ShapesDataset {
            config: config.clone(),
            seed,
            train: split_from("train", &params)?,
            val: split_from("val", &params)?,
        });
    }
    let data = generate(config, seed)?;
    let mut params = ParameterSet::new();
    split_tensors("train", &data.train, &mut params)?;
    split_tensors("val", &data.val, &mut params)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // write then rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    crate::metrics::store(&tmp, &params, None)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(data)
}

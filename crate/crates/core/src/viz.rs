//! Representation export, 2-D t-SNE embedding and static scatter plots.

use std::io::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use procbert_nn::ParamStore;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Built, Checkpoint};
use crate::error::{contract, Error, Result};
use crate::ingest::{derive_labels, Block, NormalizedDataset};
use crate::irt::BehaviorNet;
use crate::model::EventSeq;
use crate::provenance::Provenance;
use crate::transfer::{visit_inputs, StudentLevelModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorLevel {
    Question,
    Student,
}

impl std::str::FromStr for VectorLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "question" => Ok(VectorLevel::Question),
            "student" => Ok(VectorLevel::Student),
            other => Err(Error::Config(format!("unknown vector level `{other}`"))),
        }
    }
}

pub const STUDENT_MARK: &str = "STUDENT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRow {
    pub student_id: String,
    /// Question id, or `STUDENT` for student-level rows.
    pub question_id: String,
    pub vector: Vec<f64>,
    pub correct: Option<bool>,
    pub behavior: Option<f64>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    pub provenance: Provenance,
    pub rows: Vec<VectorRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl VectorTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.vector.len())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("# {}\n", self.provenance.header()).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["student_id".to_string(), "question_id".to_string()];
            header.extend((0..self.dim()).map(|i| format!("v{i}")));
            header.extend(["correct", "behavior", "label"].map(String::from));
            w.write_record(&header).map_err(csv_err)?;
            for r in &self.rows {
                let mut rec = vec![r.student_id.clone(), r.question_id.clone()];
                rec.extend(r.vector.iter().map(f64::to_string));
                rec.push(r.correct.map(|c| u8::from(c).to_string()).unwrap_or_default());
                rec.push(opt(&r.behavior));
                rec.push(opt(&r.label));
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(String::from_utf8(out).expect("utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut provenance = Provenance::default();
        if let Some(first) = text.lines().next().and_then(|l| l.strip_prefix("# ")) {
            for part in first.split_whitespace() {
                match part.split_once('=') {
                    Some(("config_hash", v)) => provenance.config_hash = v.to_string(),
                    Some(("seed", v)) => provenance.seed = v.parse().unwrap_or_default(),
                    _ => {}
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_err)?.clone();
        let dim = header.iter().filter(|h| h.starts_with('v') && h[1..].parse::<usize>().is_ok()).count();
        if header.len() != dim + 5 {
            return Err(Error::Data("vector table header is malformed".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |col: &str| Error::Parse {
                row: i + 1,
                column: col.to_string(),
                message: "not a number".into(),
            };
            let vector = (0..dim)
                .map(|j| rec[2 + j].parse::<f64>().map_err(|_| bad(&header[2 + j])))
                .collect::<Result<Vec<_>>>()?;
            let field = |j: usize| Some(&rec[j]).filter(|s| !s.is_empty());
            rows.push(VectorRow {
                student_id: rec[0].to_string(),
                question_id: rec[1].to_string(),
                vector,
                correct: field(dim + 2).map(|s| s == "1"),
                behavior: field(dim + 3).map(|s| s.parse().map_err(|_| bad("behavior"))).transpose()?,
                label: field(dim + 4).map(|s| s.parse().map_err(|_| bad("label"))).transpose()?,
            });
        }
        Ok(Self { provenance, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("vector table: {e}"))
}

/// One row per visited (student, question) pair: pooled vector, `B_ij` and correctness.
pub fn question_vectors(
    store: &ParamStore,
    net: &BehaviorNet,
    dataset: &NormalizedDataset,
    students: &[usize],
    provenance: Provenance,
) -> Result<VectorTable> {
    let mut keys = Vec::new();
    let mut seqs = Vec::new();
    for &s in students {
        let student = &dataset.students[s];
        for q in 0..dataset.questions.len() {
            let events = student.question_events(q);
            if !events.is_empty() {
                keys.push((s, q));
                seqs.push(EventSeq::from_events(&events, dataset));
            }
        }
    }
    let (vectors, scalars) = net.represent(store, &seqs)?;
    let rows = keys
        .iter()
        .zip(vectors)
        .zip(scalars)
        .map(|((&(s, q), vector), b)| VectorRow {
            student_id: dataset.students[s].id.clone(),
            question_id: dataset.questions[q].id.clone(),
            vector,
            correct: Some(dataset.students[s].outcomes[q].is_correct()),
            behavior: Some(b),
            label: None,
        })
        .collect();
    Ok(VectorTable { provenance, rows })
}

/// One row per student: final GRU state over block-A visits and the score label.
pub fn student_vectors(
    store: &ParamStore,
    model: &StudentLevelModel,
    dataset: &NormalizedDataset,
    students: &[usize],
    provenance: Provenance,
) -> Result<VectorTable> {
    let labels = derive_labels(dataset);
    let inputs = visit_inputs(dataset, students, Block::A);
    let reps = model.represent(store, &inputs)?;
    let rows = students
        .iter()
        .zip(reps)
        .map(|(&s, vector)| VectorRow {
            student_id: dataset.students[s].id.clone(),
            question_id: STUDENT_MARK.into(),
            vector,
            correct: None,
            behavior: None,
            label: Some(labels.score[s]),
        })
        .collect();
    Ok(VectorTable { provenance, rows })
}

/// Vectors of every student in `dataset` from a checkpoint of the matching variant.
pub fn export_vectors(checkpoint: &Checkpoint, dataset: &NormalizedDataset, level: VectorLevel) -> Result<VectorTable> {
    checkpoint.check_dataset(dataset)?;
    let (store, built) = checkpoint.build()?;
    let students: Vec<usize> = (0..dataset.students.len()).collect();
    let prov = checkpoint.provenance.clone();
    match (level, built) {
        (VectorLevel::Question, Built::Behavior(net, _)) => question_vectors(&store, &net, dataset, &students, prov),
        (VectorLevel::Student, Built::StudentLevel(model)) => student_vectors(&store, &model, dataset, &students, prov),
        (level, _) => Err(contract(format!(
            "{level:?} vectors need a {} checkpoint, got {}",
            if level == VectorLevel::Question { "behavior" } else { "student_level" },
            checkpoint.architecture.name()
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    /// `None` uses 30, capped at `(rows − 1) / 3`.
    pub perplexity: Option<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: None,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Conditional affinities with per-row precision found by bisection on entropy.
/// Sums run in order of increasing distance so identical rows get bitwise
/// identical affinities.
fn affinities(d: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d[i][a].total_cmp(&d[i][b]));
        let min_d = d[i][order[0]];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for &j in &order {
                // shifting by the nearest distance keeps the exponentials representable
                let e = (-beta * (d[i][j] - min_d)).exp();
                p[i][j] = e;
                sum += e;
                weighted += (d[i][j] - min_d) * e;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in p[i].iter_mut() {
                *v /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
    }
    p
}

/// Exact t-SNE to two dimensions. The start layout is a seeded Gaussian random
/// projection of the inputs, so identical rows start, and stay, together.
pub fn embed_2d(vectors: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    let cap = (n as f64 - 1.0) / 3.0;
    let perplexity = match config.perplexity {
        Some(p) if p > cap => {
            return Err(Error::Config(format!(
                "perplexity {p} needs at least {} rows, got {n}",
                (3.0 * p).ceil() as usize + 1
            )))
        }
        Some(p) => p,
        None => 30f64.min(cap),
    };
    if !(perplexity >= 1.0) {
        return Err(Error::Config(format!("t-SNE needs at least 4 rows, got {n}")));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(contract("vectors must share a dimension and be finite"));
    }
    let cond = affinities(&sq_distances(vectors), perplexity);
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let proj: Vec<[f64; 2]> = (0..dim)
        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect();
    let mut y: Vec<[f64; 2]> = vectors
        .iter()
        .map(|v| {
            let mut out = [0.0; 2];
            for (x, r) in v.iter().zip(&proj) {
                out[0] += x * r[0];
                out[1] += x * r[1];
            }
            out
        })
        .collect();
    let spread = {
        let m = [0, 1].map(|c| y.iter().map(|p| p[c]).sum::<f64>() / n as f64);
        let var = y.iter().map(|p| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sum::<f64>() / n as f64;
        for p in y.iter_mut() {
            p[0] -= m[0];
            p[1] -= m[1];
        }
        var.sqrt()
    };
    let scale = if spread > 0.0 { 1e-4 / spread } else { 0.0 };
    for p in y.iter_mut() {
        p[0] *= scale;
        p[1] *= scale;
    }

    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![vec![0.0; n]; n];
    for iter in 0..config.iterations {
        let exaggerate = if iter < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[i][j] = v;
                num[j][i] = v;
                z += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggerate * p[i][j] - num[i][j] / z) * num[i][j];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let same_sign = (grad[c] > 0.0) == (velocity[i][c] > 0.0);
                gains[i][c] = if same_sign { (gains[i][c] * 0.8f64).max(0.01) } else { gains[i][c] + 0.2 };
                velocity[i][c] = momentum * velocity[i][c] - config.learning_rate * gains[i][c] * grad[c];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Divergence {
            phase: "tsne".into(),
            epoch: config.iterations,
            detail: "non-finite coordinates".into(),
        });
    }
    Ok(y)
}

/// Colour groups by the sign of `B`, then above or below the median within that sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BehaviorGroup {
    NegativeLow,
    NegativeHigh,
    PositiveLow,
    PositiveHigh,
}

impl BehaviorGroup {
    pub fn color(self) -> [u8; 3] {
        match self {
            BehaviorGroup::NegativeLow => [178, 24, 43],
            BehaviorGroup::NegativeHigh => [244, 165, 130],
            BehaviorGroup::PositiveLow => [146, 197, 222],
            BehaviorGroup::PositiveHigh => [33, 102, 172],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorGroup::NegativeLow => "negative, below median",
            BehaviorGroup::NegativeHigh => "negative, above median",
            BehaviorGroup::PositiveLow => "positive, below median",
            BehaviorGroup::PositiveHigh => "positive, above median",
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Group of each scalar. Zero counts as positive; values equal to the group
/// median count as below it.
pub fn behavior_groups(b: &[f64]) -> Vec<BehaviorGroup> {
    let neg = median(b.iter().copied().filter(|&x| x < 0.0).collect());
    let pos = median(b.iter().copied().filter(|&x| x >= 0.0).collect());
    b.iter()
        .map(|&x| match (x < 0.0, x > if x < 0.0 { neg } else { pos }) {
            (true, false) => BehaviorGroup::NegativeLow,
            (true, true) => BehaviorGroup::NegativeHigh,
            (false, false) => BehaviorGroup::PositiveLow,
            (false, true) => BehaviorGroup::PositiveHigh,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorBy {
    Behavior,
    Label,
    None,
}

impl std::str::FromStr for ColorBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavior" => Ok(ColorBy::Behavior),
            "label" => Ok(ColorBy::Label),
            "none" => Ok(ColorBy::None),
            other => Err(Error::Config(format!("cannot colour by `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotStyle {
    pub width: u32,
    pub height: u32,
    pub marker_radius: i32,
    pub color_by: ColorBy,
    /// Share of points drawn, chosen at random with `seed`.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self {
            width: 800,
            height: 800,
            marker_radius: 4,
            color_by: ColorBy::Behavior,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    /// Row indices drawn, ascending.
    pub drawn: Vec<usize>,
    pub legend: Vec<(String, [u8; 3])>,
}

const LABEL_COLORS: [[u8; 3]; 2] = [[202, 0, 32], [5, 113, 176]];
const PLAIN: [u8; 3] = [60, 60, 60];

/// Row indices kept by the seeded subsample.
pub fn subsample(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Scatter plot: filled discs for correct rows, crosses for incorrect ones and
/// hollow squares when correctness is unknown. Legend swatches sit top left.
pub fn render_plot(coords: &[[f64; 2]], rows: &[VectorRow], style: &PlotStyle, path: &Path) -> Result<PlotSummary> {
    if coords.len() != rows.len() {
        return Err(contract("one coordinate pair per row is required"));
    }
    let colors: Vec<[u8; 3]>;
    let mut legend: Vec<(String, [u8; 3])> = Vec::new();
    match style.color_by {
        ColorBy::Behavior => {
            let b: Option<Vec<f64>> = rows.iter().map(|r| r.behavior).collect();
            let b = b.ok_or_else(|| Error::Config("rows lack a behavior column to colour by".into()))?;
            let groups = behavior_groups(&b);
            let mut present: Vec<BehaviorGroup> = groups.clone();
            present.sort_unstable();
            present.dedup();
            legend = present.iter().map(|g| (g.name().to_string(), g.color())).collect();
            colors = groups.iter().map(|g| g.color()).collect();
        }
        ColorBy::Label => {
            let l: Option<Vec<u8>> = rows.iter().map(|r| r.label).collect();
            let l = l.ok_or_else(|| Error::Config("rows lack a label column to colour by".into()))?;
            for v in [0u8, 1] {
                if l.contains(&v) {
                    legend.push((format!("label {v}"), LABEL_COLORS[v as usize]));
                }
            }
            colors = l.iter().map(|&v| LABEL_COLORS[usize::from(v > 0)]).collect();
        }
        ColorBy::None => colors = vec![PLAIN; rows.len()],
    }
    let drawn = subsample(rows.len(), style.subsample, style.seed)?;
    let mut img = RgbImage::from_pixel(style.width, style.height, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &i in &drawn {
        for c in 0..2 {
            lo[c] = lo[c].min(coords[i][c]);
            hi[c] = hi[c].max(coords[i][c]);
        }
    }
    let margin = 4 * style.marker_radius + 10;
    let to_px = |v: f64, c: usize, size: u32| -> i32 {
        let span = (hi[c] - lo[c]).max(1e-12);
        margin + ((v - lo[c]) / span * (size as i32 - 2 * margin) as f64).round() as i32
    };
    let put = |img: &mut RgbImage, x: i32, y: i32, col: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < style.width && (y as u32) < style.height {
            img.put_pixel(x as u32, y as u32, Rgb(col));
        }
    };
    let r = style.marker_radius;
    for &i in &drawn {
        let x = to_px(coords[i][0], 0, style.width);
        let y = style.height as i32 - to_px(coords[i][1], 1, style.height);
        let col = colors[i];
        match rows[i].correct {
            Some(true) => {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy <= r * r {
                            put(&mut img, x + dx, y + dy, col);
                        }
                    }
                }
            }
            Some(false) => {
                for d in -r..=r {
                    for w in 0..2 {
                        put(&mut img, x + d + w, y + d, col);
                        put(&mut img, x + d + w, y - d, col);
                    }
                }
            }
            None => {
                for d in -r..=r {
                    put(&mut img, x + d, y - r, col);
                    put(&mut img, x + d, y + r, col);
                    put(&mut img, x - r, y + d, col);
                    put(&mut img, x + r, y + d, col);
                }
            }
        }
    }
    for (k, (_, col)) in legend.iter().enumerate() {
        let top = 6 + 14 * k as i32;
        for dy in 0..10 {
            for dx in 0..10 {
                put(&mut img, 6 + dx, top + dy, *col);
            }
        }
    }
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(PlotSummary { drawn, legend })
}

//! Measurement tools: FLOPs accounting, latency, selection frequency,
//! reference-point export and the center-distance mAP evaluator.

use crate::detector::{select_topk, Detection, Detector, ModelConfig, QueryBank, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// FLOPs charged per softmax element.
pub const SOFTMAX_FLOPS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsConfig {
    pub num_queries: u64,
    pub num_keys: u64,
    pub embed_dim: u64,
    pub value_dim: u64,
    pub ffn_dim: u64,
    pub heads: u64,
    pub layers: u64,
    pub num_classes: u64,
    pub frequencies: u64,
}

impl FlopsConfig {
    /// Counts for `model` running with `num_queries` queries.
    pub fn from_model(config: &ModelConfig, num_queries: usize) -> Self {
        FlopsConfig {
            num_queries: num_queries as u64,
            num_keys: config.num_keys() as u64,
            embed_dim: config.embed_dim as u64,
            value_dim: config.embed_dim as u64,
            ffn_dim: config.ffn_dim as u64,
            heads: config.heads as u64,
            layers: config.layers as u64,
            num_classes: config.num_classes as u64,
            frequencies: config.frequencies as u64,
        }
    }

    pub fn with_queries(self, num_queries: u64) -> Self {
        FlopsConfig { num_queries, ..self }
    }
}

/// FLOPs per submodule, summed over all decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsReport {
    pub self_attention: u64,
    pub cross_attention: u64,
    pub ffn: u64,
    pub heads: u64,
    pub query_embed: u64,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.self_attention + self.cross_attention + self.ffn + self.heads + self.query_embed
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    pub fn parts(&self) -> [(&'static str, u64); 5] {
        [
            ("self_attention", self.self_attention),
            ("cross_attention", self.cross_attention),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("query_embed", self.query_embed),
        ]
    }

    /// `submodule,count` rows followed by the total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("submodule,count\n");
        for (name, n) in self.parts() {
            writeln!(out, "{name},{n}").unwrap();
        }
        writeln!(out, "total,{}", self.total()).unwrap();
        out
    }
}

/// Relative reduction `1 - after / before` of the total count.
pub fn flops_reduction(before: &FlopsReport, after: &FlopsReport) -> f64 {
    1.0 - after.total() as f64 / before.total() as f64
}

/// Closed-form count of matrix-product (`2mnk`) and softmax FLOPs.
///
/// Per layer, with `Nq` queries, `Nk` keys, width `E`, value width `Dv` and
/// FFN width `h`:
/// - self-attention: four projections `2 Nq E^2` each, scores and weighted
///   sum `2 Nq^2 E` each, softmax `5 Nq^2`;
/// - cross-attention: query/output projections `2 Nq E^2`, `2 Nq Dv^2`,
///   key/value projections `2 Nk E^2`, `2 Nk Dv^2`, scores `2 Nq Nk E`,
///   weighted sum `2 Nq Nk Dv`, softmax `5 Nq Nk`;
/// - FFN: `2 Nq E h` twice;
/// - heads: two-layer class and box MLPs on every layer's output.
///
/// The query MLP (sinusoid of `4F` features to `E`) runs once.
pub fn count_flops(c: &FlopsConfig) -> Result<FlopsReport> {
    let dims = [
        c.num_queries,
        c.num_keys,
        c.embed_dim,
        c.value_dim,
        c.ffn_dim,
        c.heads,
        c.layers,
        c.num_classes,
        c.frequencies,
    ];
    if dims.contains(&0) {
        return Err(Error::InvalidArgument("all FLOPs dimensions must be positive".into()));
    }
    let (nq, nk, e, dv, h, n) = (c.num_queries, c.num_keys, c.embed_dim, c.value_dim, c.ffn_dim, c.layers);
    let self_attention = 2 * nq * e * e * 2 + 2 * nq * dv * dv * 2 + 2 * nq * nq * e + 2 * nq * nq * dv + SOFTMAX_FLOPS * nq * nq;
    let cross_attention = 2 * nq * e * e
        + 2 * nq * dv * dv
        + 2 * nk * e * e
        + 2 * nk * dv * dv
        + 2 * nq * nk * e
        + 2 * nq * nk * dv
        + SOFTMAX_FLOPS * nq * nk;
    let ffn = 2 * nq * e * h * 2;
    let heads = 2 * nq * (e * e + e * c.num_classes) + 2 * nq * (e * e + e * 4);
    let query_embed = 2 * nq * (4 * c.frequencies * e + e * e);
    Ok(FlopsReport {
        self_attention: n * self_attention,
        cross_attention: n * cross_attention,
        ffn: n * ffn,
        heads: n * heads,
        query_embed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub trials: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let pick = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(LatencyStats {
            trials: n,
            median_ms: median,
            p90_ms: pick(0.9).max(median),
            samples_ms,
        })
    }
}

pub const MIN_TRIALS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Times `trials` decoder-and-head forward passes over pre-encoded
/// features, cycling through `features`. Encoding is not timed; `warmup`
/// runs (at least 5) precede the measurement.
pub fn measure_latency(model: &Detector, features: &[Tensor], trials: usize, warmup: usize) -> Result<LatencyStats> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if features.is_empty() {
        return Err(Error::InvalidArgument("no inputs to time".into()));
    }
    for i in 0..warmup.max(MIN_WARMUP) {
        std::hint::black_box(model.forward_features(&features[i % features.len()])?);
    }
    let mut samples = Vec::with_capacity(trials);
    for i in 0..trials {
        let f = &features[i % features.len()];
        let start = Instant::now();
        let out = model.forward_features(f)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    LatencyStats::from_samples(samples)
}

/// Encodes every scene; the result feeds [`measure_latency`].
pub fn encode_scenes(model: &Detector, scenes: &[Scene]) -> Result<Vec<Tensor>> {
    scenes.iter().map(|s| model.encoder.encode(s)).collect()
}

/// `(original_query_index, count)` of top-`k` appearances over `scenes`,
/// sorted by ascending count (then index).
pub fn selection_frequency(model: &Detector, scenes: &[Scene], k: usize) -> Result<Vec<(usize, u64)>> {
    let alive = model.bank.alive();
    let mut counts = vec![0u64; alive.len()];
    for s in scenes {
        let pred = model.predict(s)?;
        for d in select_topk(&pred, k)? {
            counts[d.query_index] += 1;
        }
    }
    let mut out: Vec<(usize, u64)> = alive.iter().copied().zip(counts).collect();
    out.sort_by_key(|&(idx, c)| (c, idx));
    Ok(out)
}

pub fn frequency_csv(counts: &[(usize, u64)]) -> String {
    let mut out = String::from("query_index,count\n");
    for (q, c) in counts {
        writeln!(out, "{q},{c}").unwrap();
    }
    out
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Detections kept per scene (clamped to `Nq * C`).
    pub top_k: usize,
    /// Detections scoring below this are dropped.
    pub score_floor: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            top_k: 32,
            score_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// AP per class averaged over thresholds; `None` for classes without
    /// ground truth.
    pub per_class: Vec<Option<f64>>,
    /// `(class, threshold, ap)` for every class with ground truth.
    pub table: Vec<(usize, f64, f64)>,
}

impl MapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,threshold,ap\n");
        for (c, t, ap) in &self.table {
            writeln!(out, "{c},{t},{ap}").unwrap();
        }
        for (c, ap) in self.per_class.iter().enumerate() {
            if let Some(ap) = ap {
                writeln!(out, "{c},mean,{ap}").unwrap();
            }
        }
        writeln!(out, "all,mean,{}", self.map).unwrap();
        out
    }
}

/// Average precision from a ranked list of hit flags by 101-point
/// interpolated precision.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Running maximum from the right gives the interpolated precision.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j < recall.len() {
            total += precision[j];
        }
    }
    total / 101.0
}

/// mAP of per-scene detections against `scenes` under center-distance
/// matching. For each class and threshold, detections across the set are
/// ranked by score and greedily matched to the nearest unmatched ground
/// truth of that class in the same scene within the threshold.
pub fn map_from_detections(
    detections: &[Vec<Detection>],
    scenes: &[Scene],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<MapReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if detections.len() != scenes.len() {
        return Err(Error::shape("eval_map", "one detection list per scene"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("thresholds must be positive".into()));
    }
    let mut per_class = vec![None; num_classes];
    let mut table = Vec::new();
    for (c, slot) in per_class.iter_mut().enumerate() {
        let num_gt: usize = scenes
            .iter()
            .map(|s| s.objects.iter().filter(|o| o.class_id == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(si, ds)| ds.iter().filter(|d| d.class_id == c).map(move |d| (si, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut sum = 0.0;
        for &tau in thresholds {
            let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.objects.len()]).collect();
            let hits: Vec<bool> = ranked
                .iter()
                .map(|&(si, d)| {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, o) in scenes[si].objects.iter().enumerate() {
                        if o.class_id != c || taken[si][gi] {
                            continue;
                        }
                        let dx = f64::from(d.box_[0]) - f64::from(o.center[0]);
                        let dy = f64::from(d.box_[1]) - f64::from(o.center[1]);
                        let dist = (dx * dx + dy * dy).sqrt();
                        if dist < tau && best.is_none_or(|b| dist < b.1) {
                            best = Some((gi, dist));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[si][gi] = true;
                    }
                    best.is_some()
                })
                .collect();
            let ap = average_precision(&hits, num_gt);
            table.push((c, tau, ap));
            sum += ap;
        }
        *slot = Some(sum / thresholds.len() as f64);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapReport { map, per_class, table })
}

/// Runs `model` on every scene, keeps the top-k final-layer detections and
/// scores them with [`map_from_detections`].
pub fn eval_map(model: &Detector, scenes: &[Scene], config: &EvalConfig) -> Result<MapReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let k = config.top_k.min(model.num_queries() * model.config.num_classes).max(1);
    let mut detections = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pred = model.predict(s)?;
        let mut d = select_topk(&pred, k)?;
        d.retain(|d| d.score >= config.score_floor);
        detections.push(d);
    }
    map_from_detections(&detections, scenes, model.config.num_classes, &config.thresholds)
}

pub fn reference_points_csv(bank: &QueryBank) -> String {
    let mut out = String::from("index,x,y,alive\n");
    for (idx, [x, y], alive) in bank.all_points() {
        writeln!(out, "{idx},{x},{y},{}", u8::from(alive)).unwrap();
    }
    out
}

pub fn parse_reference_points(text: &str) -> Result<Vec<(usize, [f32; 2], bool)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse { line: n + 1, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        let alive = match f[3] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("alive flag `{other}`"))),
        };
        out.push((
            f[0].parse().map_err(|e| bad(format!("index: {e}")))?,
            [
                f[1].parse().map_err(|e| bad(format!("x: {e}")))?,
                f[2].parse().map_err(|e| bad(format!("y: {e}")))?,
            ],
            alive,
        ));
    }
    Ok(out)
}

/// Writes the `index,x,y,alive` table of every original query.
pub fn export_reference_points(bank: &QueryBank, path: &Path) -> Result<()> {
    write_atomic(path, reference_points_csv(bank).as_bytes())
}

/// Writes `bytes` to a temporary sibling of `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

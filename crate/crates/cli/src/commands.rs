use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use motpipe::dataflow::{self, fixtures as flow_fixtures, StreamGraph, DEFAULT_CYCLE_CAP};
use motpipe::decode::{self, HeadMap, DecodeError};
use motpipe::io::{self, IoError, MotRow, RunConfig, Tensor};
use motpipe::metrics::{self, MetricsError, MotAccumulator, MotTotals};
use motpipe::streamline::{self, OpGraph, Pass, StreamlineError};
use motpipe::synthetic::{self, SyntheticConfig, SyntheticSequence};
use motpipe::tracker::TrackerError;
use motpipe::{BoundingBox, Sort};

use crate::{heads, ConfigArgs};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 1.
    Io(String),
    /// Exit code 2.
    Invalid(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) | CliError::Invalid(m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Invalid(e.to_string())
            }
        })*
    };
}

invalid_from!(DecodeError, MetricsError, StreamlineError, dataflow::DataflowError, TrackerError);

fn write_out(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => Ok(io::write_bytes(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.score_thresh {
            cfg.score_thresh = v;
        }
        if let Some(v) = self.nms_iou {
            cfg.nms_iou = v;
        }
        if let Some(v) = self.iou_min {
            cfg.iou_min = v;
        }
        if let Some(v) = self.max_age {
            cfg.max_age = v;
        }
        if let Some(v) = self.min_hits {
            cfg.min_hits = v;
        }
        if let Some(v) = self.mot_gate {
            cfg.mot_gate = v;
        }
        if self.no_warmup {
            cfg.emit_warmup = false;
        }
        if self.class_agnostic {
            cfg.class_aware_nms = false;
        }
        if let Some(c) = &self.classes {
            cfg.classes = c.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Score threshold, NMS, then class filter.
fn filter_frame(boxes: &[BoundingBox], cfg: &RunConfig) -> Vec<BoundingBox> {
    let confident: Vec<BoundingBox> = boxes.iter().filter(|b| b.score >= cfg.score_thresh).copied().collect();
    let mut kept = decode::nms(&confident, cfg.nms_iou, cfg.class_aware_nms);
    kept.retain(|b| cfg.keeps_class(b.class_id));
    kept
}

/// Frames `1..=last` with empty frames filled in, so the tracker ages its
/// tracks across gaps.
fn dense_frames(mut frames: BTreeMap<u64, Vec<BoundingBox>>) -> Vec<(u64, Vec<BoundingBox>)> {
    let last = frames.keys().next_back().copied().unwrap_or(0);
    (1..=last).map(|f| (f, frames.remove(&f).unwrap_or_default())).collect()
}

fn decode_frames(
    maps: BTreeMap<u64, Vec<HeadMap>>,
    cfg: &RunConfig,
    mut report: impl FnMut(u64, usize, usize),
) -> Result<BTreeMap<u64, Vec<BoundingBox>>, CliError> {
    let mut out = BTreeMap::new();
    for (frame, maps) in maps {
        let (w, h) = heads::input_size(&maps)?;
        let all = decode::candidates(&maps, w, h).map_err(|e| CliError::Invalid(format!("frame {frame}: {e}")))?;
        let kept = filter_frame(&all, cfg);
        report(frame, all.len(), kept.len());
        out.insert(frame, kept);
    }
    Ok(out)
}

fn parse_synthetic(v: &[String]) -> Result<SyntheticConfig, CliError> {
    let bad = |what: &str, s: &str| CliError::Invalid(format!("--synthetic {what}: cannot parse {s:?}"));
    let [objects, frames, noise, seed] = v else {
        return Err(CliError::Invalid("--synthetic takes 4 values".into()));
    };
    let cfg = SyntheticConfig::new(
        objects.parse().map_err(|_| bad("objects", objects))?,
        frames.parse().map_err(|_| bad("frames", frames))?,
        noise.parse().map_err(|_| bad("noise", noise))?,
        seed.parse().map_err(|_| bad("seed", seed))?,
    );
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(CliError::Invalid(format!("--synthetic noise {} must be >= 0", cfg.noise)));
    }
    Ok(cfg)
}

fn synthetic_rows(seq: &SyntheticSequence) -> (Vec<MotRow>, Vec<MotRow>) {
    let mut gt = Vec::new();
    let mut dets = Vec::new();
    for (i, (g, d)) in seq.ground_truth.iter().zip(&seq.detections).enumerate() {
        let frame = i as u64 + 1;
        gt.extend(g.iter().map(|(id, b)| MotRow::from_box(frame, *id as i64, &b.with_score(1.0))));
        dets.extend(d.iter().map(|b| MotRow::from_box(frame, -1, b)));
    }
    (gt, dets)
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["detections", "heads", "synthetic"])))]
pub struct TrackArgs {
    /// MOT detection file (id column -1).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Directory of head-map dumps named `{frame:06}_s{stride}.tnsr`.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Generated sequence instead of input files.
    #[arg(long, num_args = 4, value_names = ["OBJECTS", "FRAMES", "NOISE", "SEED"], allow_hyphen_values = true)]
    synthetic: Option<Vec<String>>,
    /// Head maps carry raw DFL logits with this many bins per side.
    #[arg(long, requires = "heads")]
    dfl_bins: Option<usize>,
    /// Result file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the synthetic ground truth here.
    #[arg(long, requires = "synthetic")]
    gt_out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

pub fn track(a: &TrackArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    let frames = if let Some(p) = &a.detections {
        let rows = io::read_mot(p)?;
        io::group_by_frame(&rows)
            .into_iter()
            .map(|(f, rows)| (f, rows.iter().map(MotRow::to_box).collect()))
            .collect()
    } else if let Some(dir) = &a.heads {
        decode_frames(heads::load_dir(dir, a.dfl_bins)?, &cfg, |_, _, _| {})?
    } else {
        let seq = synthetic::generate(&parse_synthetic(a.synthetic.as_deref().unwrap_or_default())?);
        let (gt, _) = synthetic_rows(&seq);
        if let Some(p) = &a.gt_out {
            io::write_mot(&gt, p)?;
        }
        seq.detections
            .into_iter()
            .enumerate()
            .map(|(i, d)| (i as u64 + 1, d))
            .collect()
    };

    let mut sort = Sort::new(cfg.sort_config())?;
    let mut rows = Vec::new();
    for (frame, boxes) in dense_frames(frames) {
        let dets = if a.heads.is_some() { boxes } else { filter_frame(&boxes, &cfg) };
        for t in sort.step(&dets, frame)? {
            rows.push(MotRow::from_box(frame, t.id as i64, &t.bbox.with_score(1.0)));
        }
    }
    write_out(a.out.as_deref(), &io::format_mot(&rows))
}

#[derive(Args)]
pub struct EvalMotArgs {
    /// Ground-truth file, or a directory of `<sequence>.txt` files.
    #[arg(long)]
    gt: PathBuf,
    /// Result file, or a directory holding a result per ground-truth sequence.
    #[arg(long)]
    res: PathBuf,
    /// Also write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn score_sequence(gt: &Path, res: &Path, gate: f64) -> Result<MotAccumulator, CliError> {
    let gt = io::group_by_frame(&io::read_mot(gt)?);
    let res = io::group_by_frame(&io::read_mot(res)?);
    let mut frames: Vec<u64> = gt.keys().chain(res.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();
    let mut acc = MotAccumulator::new(gate)?;
    for f in frames {
        let g = io::identified(gt.get(&f).map_or(&[][..], Vec::as_slice))?;
        let h = io::identified(res.get(&f).map_or(&[][..], Vec::as_slice))?;
        acc.step(&g, &h)
            .map_err(|e| CliError::Invalid(format!("frame {f}: {e}")))?;
    }
    Ok(acc)
}

fn sequence_pairs(gt: &Path, res: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let stem = |p: &Path| p.file_stem().map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned());
    if !gt.is_dir() {
        return Ok(vec![(stem(gt), gt.to_path_buf(), res.to_path_buf())]);
    }
    if !res.is_dir() {
        return Err(CliError::Invalid(format!("{} is a directory but {} is not", gt.display(), res.display())));
    }
    let entries = std::fs::read_dir(gt).map_err(|e| CliError::Io(format!("{}: {e}", gt.display())))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let r = res.join(path.file_name().expect("file name"));
            if !r.is_file() {
                return Err(CliError::Io(format!("no result file {}", r.display())));
            }
            pairs.push((stem(&path), path, r));
        }
    }
    if pairs.is_empty() {
        return Err(CliError::Invalid(format!("no .txt ground-truth files in {}", gt.display())));
    }
    pairs.sort();
    Ok(pairs)
}

fn mota_cell(t: &MotTotals, precision: usize) -> String {
    match t.mota() {
        Ok(m) => format!("{m:.precision$}"),
        Err(_) => "undefined".into(),
    }
}

pub fn eval_mot(a: &EvalMotArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    let pairs = sequence_pairs(&a.gt, &a.res)?;
    // Sequences are independent; scoring runs one thread per sequence and
    // results are merged in name order.
    let scored: BTreeMap<String, Result<MotAccumulator, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|(name, g, r)| (name.clone(), s.spawn(move || score_sequence(g, r, cfg.mot_gate))))
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| (name, h.join().expect("scoring thread panicked")))
            .collect()
    });
    let mut pooled = MotAccumulator::new(cfg.mot_gate)?;
    let mut table: Vec<(String, MotTotals)> = Vec::new();
    for (name, acc) in scored {
        let acc = acc.map_err(|e| match e {
            CliError::Io(m) => CliError::Io(format!("{name}: {m}")),
            CliError::Invalid(m) => CliError::Invalid(format!("{name}: {m}")),
        })?;
        pooled.merge(&acc);
        table.push((name, acc.totals()));
    }
    let overall = pooled.totals();
    table.push(("OVERALL".into(), overall));

    let mut text = format!(
        "{:<16} {:>7} {:>8} {:>8} {:>7} {:>7} {:>6} {:>9}\n",
        "sequence", "frames", "gt", "matches", "FN", "FP", "IDSW", "MOTA"
    );
    let mut csv = String::from("sequence,frames,gt,matches,fn,fp,idsw,mota\n");
    for (name, t) in &table {
        let _ = writeln!(
            text,
            "{:<16} {:>7} {:>8} {:>8} {:>7} {:>7} {:>6} {:>9}",
            name, t.frames, t.gt, t.matches, t.misses, t.false_positives, t.id_switches, mota_cell(t, 4)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            name, t.frames, t.gt, t.matches, t.misses, t.false_positives, t.id_switches, mota_cell(t, 6)
        );
    }
    print!("{text}");
    if let Some(p) = &a.csv {
        io::write_bytes(p, csv.as_bytes())?;
    }
    overall.mota()?;
    Ok(())
}

#[derive(Args)]
pub struct EvalDetArgs {
    /// COCO ground truth (`images` and `annotations`).
    #[arg(long)]
    gt: PathBuf,
    /// COCO results list.
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn eval_det(a: &EvalDetArgs) -> Result<(), CliError> {
    let gt = io::parse_coco_gt(&io::read_text(&a.gt)?)?;
    let dets = io::parse_coco_dets(&io::read_text(&a.dets)?, &gt)?;
    let s = metrics::coco_summary(&dets, &gt.boxes)?;
    let mut text = String::new();
    let mut csv = String::from("metric,value\n");
    for (name, v) in [("mAP@[.50:.95]", s.map), ("mAP@.50", s.map50), ("mAP@.75", s.map75)] {
        let _ = writeln!(text, "{name:<16} {v:.4}");
        let _ = writeln!(csv, "{name},{v:.6}");
    }
    for (c, ap) in &s.per_class {
        let _ = writeln!(text, "{:<16} {ap:.4}", format!("class {c}"));
        let _ = writeln!(csv, "class {c},{ap:.6}");
    }
    print!("{text}");
    if let Some(p) = &a.csv {
        io::write_bytes(p, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Directory of head-map dumps named `{frame:06}_s{stride}.tnsr`.
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    dfl_bins: Option<usize>,
    /// MOT detection file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

pub fn decode(a: &DecodeArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    let frames = decode_frames(heads::load_dir(&a.heads, a.dfl_bins)?, &cfg, |f, n, k| {
        eprintln!("frame {f}: {n} candidates, {k} kept");
    })?;
    let rows: Vec<MotRow> = frames
        .iter()
        .flat_map(|(&f, boxes)| boxes.iter().map(move |b| MotRow::from_box(f, -1, b)))
        .collect();
    write_out(a.out.as_deref(), &io::format_mot(&rows))
}

#[derive(Args)]
pub struct StreamlineArgs {
    /// Operator graph JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Comma-separated passes, run in order until nothing changes.
    #[arg(long, value_delimiter = ',', default_value = "move-scale,fork,join,absorb")]
    passes: Vec<String>,
    /// Output graph JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn streamline(a: &StreamlineArgs) -> Result<(), CliError> {
    let pipeline = a
        .passes
        .iter()
        .map(|n| Pass::parse(n).ok_or_else(|| CliError::Invalid(format!("unknown pass {n:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let g = OpGraph::from_json(&io::read_text(&a.graph)?)?;
    // Shared-scale requirements describe the trained graph, so they are
    // checked before any rewriting.
    let violations = streamline::validate_scale_groups(&g, &g.scale_groups)?;
    for v in &violations {
        eprintln!(
            "scale group {}: edge {} has scale {:?}, expected {:?}",
            v.group, v.edge, v.found, v.expected
        );
    }
    let out = streamline::run_pipeline(&g, &pipeline)?;
    for d in &out.diagnostics {
        eprintln!("{d}");
    }
    let left = streamline::standalone_affines(&out.graph);
    if !left.is_empty() {
        eprintln!("standalone affine nodes remain: {}", left.join(", "));
    }
    write_out(a.out.as_deref(), &(out.graph.to_json() + "\n"))?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{} scale-group violation(s)", violations.len())))
    }
}

#[derive(Args)]
pub struct SimFifoArgs {
    /// Stream graph JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Tokens each source emits.
    #[arg(long, default_value_t = 80)]
    workload: u64,
    #[arg(long, default_value_t = DEFAULT_CYCLE_CAP)]
    cycle_cap: u64,
    /// Size the FIFOs: probe with unbounded depths, then verify.
    #[arg(long)]
    probe: bool,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sim_fifo(a: &SimFifoArgs) -> Result<(), CliError> {
    let g = StreamGraph::from_json(&io::read_text(&a.graph)?)?;
    let json = if a.probe {
        let s = dataflow::size_fifos(&g, a.workload, a.cycle_cap)?;
        eprintln!(
            "probe {:?} in {} cycles; verification {:?} in {} cycles",
            s.probe.outcome, s.probe.cycles, s.verification.outcome, s.verification.cycles
        );
        serde_json::to_string_pretty(&s)
    } else {
        let r = dataflow::simulate(&g, a.workload, a.cycle_cap)?;
        eprintln!("{:?} after {} cycles", r.outcome, r.cycles);
        serde_json::to_string_pretty(&r)
    }
    .expect("report serializes");
    write_out(a.out.as_deref(), &(json + "\n"))
}

#[derive(Args)]
pub struct FixturesArgs {
    /// Directory to write into; created if missing.
    #[arg(long)]
    out: PathBuf,
}

/// Three frames of 320x192 head maps with one confident cell moving right.
fn head_fixture(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    for frame in 1..=3u64 {
        for stride in decode::STRIDES {
            let (w, h) = ((320 / stride) as usize, (192 / stride) as usize);
            let mut m = HeadMap::zeros(stride, 6, h, w);
            for y in 0..h {
                for x in 0..w {
                    m.set(4, y, x, -10.0);
                    m.set(5, y, x, -10.0);
                }
            }
            if stride == 16 {
                let (cx, cy) = (4 + frame as usize, 5);
                for c in 0..4 {
                    m.set(c, cy, cx, 2.0);
                }
                m.set(5, cy, cx, 3.0);
            }
            io::write_tensor(&Tensor::from_head_map(&m), &dir.join(heads::file_name(frame, stride)))?;
        }
    }
    Ok(())
}

pub fn fixtures(a: &FixturesArgs) -> Result<(), CliError> {
    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let put = |name: &str, text: String| io::write_bytes(&dir.join(name), text.as_bytes());
    let graph = |g: OpGraph| g.to_json() + "\n";
    let flow = |g: StreamGraph| serde_json::to_string_pretty(&g).expect("graph serializes") + "\n";

    put("conv_block.json", graph(streamline::conv_block()))?;
    put("conv_block_streamlined.json", graph(streamline::conv_block_streamlined()))?;
    put("residual.json", graph(streamline::residual(0.5)))?;
    put("c2f.json", graph(streamline::c2f()))?;
    put("fork_join.json", flow(flow_fixtures::fork_join(2)))?;
    put("burst_chain.json", flow(flow_fixtures::burst_chain(2)))?;
    put("matrix_node.json", flow(flow_fixtures::matrix_node(1, 1)))?;

    let seq = synthetic::generate(&SyntheticConfig::new(5, 50, 0.0, 1));
    let (gt, dets) = synthetic_rows(&seq);
    put("synthetic_gt.txt", io::format_mot(&gt))?;
    put("synthetic_det.txt", io::format_mot(&dets))?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut results = Vec::new();
    for (i, frame) in seq.ground_truth.iter().take(5).enumerate() {
        images.push(serde_json::json!({ "id": i + 1 }));
        for (id, b) in frame {
            let bbox = [b.x_min, b.y_min, b.width(), b.height()];
            let class = id % 2;
            annotations.push(serde_json::json!({ "image_id": i + 1, "bbox": bbox, "category_id": class }));
            results.push(serde_json::json!({ "image_id": i + 1, "bbox": bbox, "category_id": class, "score": 0.9 }));
        }
    }
    let pretty = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("json") + "\n";
    put("coco_gt.json", pretty(serde_json::json!({ "images": images, "annotations": annotations })))?;
    put("coco_dets.json", pretty(serde_json::Value::Array(results)))?;

    head_fixture(&dir.join("heads"))
}

//! Latency and storage measurements as the dictionaries grow.
//!
//! History grows in releases: every release updates each object with fresh
//! bytes and tags a snapshot. At geometrically spaced total leaf counts the
//! selected operation is sampled.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use plotters::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use rollguard_core::config::Config;
use rollguard_core::monitor::{Change, Monitor, PruneRequest, RollbackRequest, SnapshotRequest, UpdateRequest};
use rollguard_core::records::{ObjectId, PruneReason, PruneReasonKind, VersionRef};
use rollguard_core::state::HeadTracking;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Update,
    Snapshot,
    Rollback,
    Prune,
    /// Eligibility query for one version.
    Query,
    /// Full lineage of one object.
    Lineage,
}

impl BenchOp {
    pub const ALL: [BenchOp; 6] = [
        BenchOp::Update,
        BenchOp::Snapshot,
        BenchOp::Rollback,
        BenchOp::Prune,
        BenchOp::Query,
        BenchOp::Lineage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Update => "update",
            BenchOp::Snapshot => "snapshot",
            BenchOp::Rollback => "rollback",
            BenchOp::Prune => "prune",
            BenchOp::Query => "query",
            BenchOp::Lineage => "lineage",
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown operation {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub op: BenchOp,
    /// Objects changed per release.
    pub objects: usize,
    /// Stop once the dictionaries hold this many leaves in total.
    pub until_leaves: u64,
    /// Number of scale points, spaced geometrically.
    pub points: usize,
    /// Timed samples per scale point.
    pub samples: usize,
    /// Operations per timed sample; the sample is their mean.
    pub batch: usize,
    pub object_bytes: usize,
    /// Keep only this many snapshots, pruning older versions.
    pub retention: Option<usize>,
    pub head_tracking: HeadTracking,
    pub seed: u64,
}

impl BenchPlan {
    pub fn new(op: BenchOp, objects: usize, until_leaves: u64) -> Self {
        Self {
            op,
            objects,
            until_leaves,
            points: 12,
            samples: 15,
            batch: 1,
            object_bytes: 256,
            retention: None,
            head_tracking: HeadTracking::VersionMetadata,
            seed: 1,
        }
    }
}

/// One (operation, scale) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub operation: String,
    pub pad_leaves: u64,
    pub catalog_leaves: u64,
    pub releases: u64,
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    /// Divisor applied to get per-object latency.
    pub objects_per_op: usize,
    /// Longest inclusion proof seen, in hashes.
    pub max_proof_hashes: Option<usize>,
    /// Lineage events returned.
    pub lineage_events: Option<usize>,
    pub metadata_bytes: u64,
    pub content_bytes: u64,
}

fn obj(i: usize) -> ObjectId {
    ObjectId::new(format!("obj{i}")).expect("generated id")
}

struct Run {
    m: Monitor,
    rng: StdRng,
    plan: BenchPlan,
    releases: u64,
}

impl Run {
    fn leaves(&self) -> anyhow::Result<(u64, u64)> {
        let c = self.m.checkpoint()?;
        Ok((c.pad_sizes.total(), c.pad_sizes.catalog))
    }

    fn bytes(&mut self) -> Vec<u8> {
        let mut b = vec![0u8; self.plan.object_bytes];
        self.rng.fill_bytes(&mut b);
        b
    }

    fn release(&mut self) -> anyhow::Result<()> {
        let changes = (0..self.plan.objects).map(|i| Change::new(obj(i), self.bytes())).collect();
        let tag = format!("rel{}", self.releases);
        self.m
            .state_update(UpdateRequest::new("bench", changes).justify("release").with_snapshot(tag, vec![]))?;
        if let Some(keep) = self.plan.retention {
            self.m.apply_retention(keep, "retention")?;
        }
        self.releases += 1;
        Ok(())
    }

    fn live_versions(&self, object: &ObjectId) -> anyhow::Result<(Vec<u64>, Option<u64>)> {
        Ok(self.m.view(|store, at| {
            let head = store.current_head(object, at)?.map(|(v, _)| v);
            let live = store
                .versions_of(object)
                .iter()
                .copied()
                .filter(|&v| !store.is_tombstoned(&VersionRef::new(object.clone(), v)))
                .collect::<Vec<_>>();
            Ok::<_, rollguard_core::Error>((live, head))
        })??)
    }

    /// Runs one operation and returns (seconds, proof hashes, events).
    fn once(&mut self, n: u64) -> anyhow::Result<(f64, Option<usize>, Option<usize>)> {
        let o = obj(self.rng.random_range(0..self.plan.objects));
        let (live, head) = self.live_versions(&o)?;
        let t = Instant::now();
        let mut proof = None;
        let mut events = None;
        match self.plan.op {
            BenchOp::Update => {
                let body = self.bytes();
                let t = Instant::now();
                self.m.state_update(UpdateRequest::new("bench", vec![Change::new(o, body)]))?;
                return Ok((t.elapsed().as_secs_f64(), None, None));
            }
            BenchOp::Snapshot => {
                self.m.take_snapshot(SnapshotRequest::new("bench", format!("b{}-{n}", self.rng.next_u64()), vec![o]))?;
            }
            BenchOp::Rollback => {
                let v = *live.first().context("no live version to roll back to")?;
                self.m.rollback(RollbackRequest::selective("bench", vec![VersionRef::new(o, v)]))?;
            }
            BenchOp::Prune => {
                let Some(&v) = live.iter().find(|&&v| Some(v) != head) else {
                    bail!("no prunable version of {o}");
                };
                self.m.prune(PruneRequest::selective(
                    "bench",
                    vec![VersionRef::new(o, v)],
                    PruneReason::new(PruneReasonKind::RetentionExpired, "bench"),
                ))?;
            }
            BenchOp::Query => {
                let v = live[self.rng.random_range(0..live.len())];
                let target = VersionRef::new(o, v);
                let r = self.m.audit(|a| a.check_eligibility(&target, None))?;
                proof = r.catalog_proof.map(|p| p.proof.path.len());
            }
            BenchOp::Lineage => {
                let e = self.m.audit(|a| a.reconstruct_lineage(&o))?;
                events = Some(e.len());
            }
        }
        Ok((t.elapsed().as_secs_f64(), proof, events))
    }

    /// One batched sample in microseconds per operation.
    fn sample(&mut self, n: u64, acc: &mut Acc) -> anyhow::Result<()> {
        let batch = self.plan.batch.max(1);
        let mut total = 0.0;
        for _ in 0..batch {
            let (s, p, e) = self.once(n)?;
            total += s;
            acc.max_proof = acc.max_proof.max(p);
            acc.events = acc.events.max(e);
        }
        acc.lat.push(total / batch as f64 * 1e6);
        Ok(())
    }

    fn record(&self, size: (u64, u64), mut acc: Acc) -> anyhow::Result<BenchRecord> {
        let lat = &mut acc.lat;
        lat.sort_by(f64::total_cmp);
        let usage = self.m.storage_usage()?;
        let pick = |q: f64| lat[((lat.len() - 1) as f64 * q).round() as usize];
        Ok(BenchRecord {
            operation: self.plan.op.name().into(),
            pad_leaves: size.0,
            catalog_leaves: size.1,
            releases: self.releases,
            samples: lat.len(),
            mean_us: lat.iter().sum::<f64>() / lat.len() as f64,
            median_us: pick(0.5),
            p95_us: pick(0.95),
            min_us: lat[0],
            max_us: lat[lat.len() - 1],
            objects_per_op: 1,
            max_proof_hashes: acc.max_proof,
            lineage_events: acc.events,
            metadata_bytes: usage.metadata_bytes,
            content_bytes: usage.content_bytes,
        })
    }
}

#[derive(Default)]
struct Acc {
    lat: Vec<f64>,
    max_proof: Option<usize>,
    events: Option<usize>,
}

/// Leaf counts at which to sample: geometric from `first` to `last`.
pub fn scale_points(first: u64, last: u64, points: usize) -> Vec<u64> {
    if points <= 1 || last <= first {
        return vec![last];
    }
    let ratio = (last as f64 / first.max(1) as f64).powf(1.0 / (points - 1) as f64);
    let mut out: Vec<u64> = (0..points)
        .map(|i| (first.max(1) as f64 * ratio.powi(i as i32)).round() as u64)
        .collect();
    out.dedup();
    *out.last_mut().expect("non-empty") = last;
    out
}

/// Store used for the `i`th scale point of [`run`].
pub fn point_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("p{i:02}"))
}

/// Grows one store per scale point under `dir`, all from the same seed so
/// each is a prefix of the next, then samples them in interleaved rounds.
pub fn run(plan: &BenchPlan, dir: &Path) -> anyhow::Result<Vec<BenchRecord>> {
    if plan.objects == 0 || plan.samples == 0 {
        bail!("objects and samples must be positive");
    }
    let open = |i: usize| -> anyhow::Result<Run> {
        let config = Config::for_root(point_dir(dir, i)).with_head_tracking(plan.head_tracking);
        Ok(Run {
            m: Monitor::open(config).context("opening bench store")?,
            rng: StdRng::seed_from_u64(plan.seed),
            plan: plan.clone(),
            releases: 0,
        })
    };
    let mut probe = open(0)?;
    probe.release()?;
    let first = probe.leaves()?.0;
    let points = scale_points(first, plan.until_leaves.max(first), plan.points);
    let mut runs = vec![probe];
    for i in 1..points.len() {
        runs.push(open(i)?);
    }
    let mut sizes = Vec::with_capacity(points.len());
    for (run, &point) in runs.iter_mut().zip(&points) {
        while run.leaves()?.0 < point {
            run.release()?;
        }
        sizes.push(run.leaves()?);
    }
    let mut accs: Vec<Acc> = points.iter().map(|_| Acc::default()).collect();
    for _ in 0..plan.samples {
        for ((run, acc), size) in runs.iter_mut().zip(&mut accs).zip(&sizes) {
            run.sample(size.0, acc)?;
        }
    }
    runs.iter().zip(accs).zip(sizes).map(|((run, acc), size)| run.record(size, acc)).collect()
}

/// Storage after each release under a retention window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRecord {
    pub release: u64,
    pub pad_leaves: u64,
    pub metadata_bytes: u64,
    pub content_bytes: u64,
}

pub fn storage_growth(plan: &BenchPlan, releases: u64, dir: &Path) -> anyhow::Result<Vec<StorageRecord>> {
    let config = Config::for_root(dir).with_head_tracking(plan.head_tracking);
    let mut run = Run {
        m: Monitor::open(config)?,
        rng: StdRng::seed_from_u64(plan.seed),
        plan: plan.clone(),
        releases: 0,
    };
    let mut out = Vec::new();
    for _ in 0..releases {
        run.release()?;
        let usage = run.m.storage_usage()?;
        out.push(StorageRecord {
            release: run.releases,
            pad_leaves: run.leaves()?.0,
            metadata_bytes: usage.metadata_bytes,
            content_bytes: usage.content_bytes,
        });
    }
    Ok(out)
}

/// Least-squares line `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

pub fn fit_linear(points: &[(f64, f64)]) -> Fit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let a = my - b * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Fit { a, b, r2 }
}

/// Which per-point latency a fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    /// Fastest batch. Scheduler noise only adds time, so this tracks the
    /// intrinsic cost most closely.
    Min,
    Median,
}

impl Stat {
    pub fn of(self, r: &BenchRecord) -> f64 {
        match self {
            Stat::Min => r.min_us,
            Stat::Median => r.median_us,
        }
    }
}

/// Fit of latency against `ln(pad_leaves)`.
pub fn fit_log(records: &[BenchRecord], stat: Stat) -> Fit {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| ((r.pad_leaves as f64).ln(), stat.of(r))).collect();
    fit_linear(&pts)
}

/// Fit of latency against `k * log2(n)` for lineage records.
pub fn fit_k_log_n(records: &[BenchRecord], stat: Stat) -> Fit {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| {
            let k = r.lineage_events.unwrap_or(0) as f64;
            (k * (r.catalog_leaves.max(2) as f64).log2(), stat.of(r))
        })
        .collect();
    fit_linear(&pts)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Median latency against leaf count, one line per operation.
pub fn plot_latency(records: &[BenchRecord], path: &Path, title: &str) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let max_x = records.iter().map(|r| r.pad_leaves).max().unwrap_or(1) as f64;
    let max_y = records.iter().map(|r| r.median_us).fold(1.0, f64::max) * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..max_x * 1.05, 0.0..max_y)?;
    chart
        .configure_mesh()
        .x_desc("leaves in the dictionaries")
        .y_desc("median latency (us)")
        .draw()?;
    for (i, op) in BenchOp::ALL.iter().enumerate() {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.operation == op.name())
            .map(|r| (r.pad_leaves as f64, r.median_us))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
            .label(op.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
    }
    chart.configure_series_labels().border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

/// Content and metadata bytes per release.
pub fn plot_storage(rows: &[StorageRecord], path: &Path) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let max_x = rows.iter().map(|r| r.release).max().unwrap_or(1) as f64;
    let max_y = rows
        .iter()
        .map(|r| r.content_bytes.max(r.metadata_bytes))
        .max()
        .unwrap_or(1) as f64
        / 1024.0
        * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption("storage under a retention window", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..max_x, 0.0..max_y)?;
    chart.configure_mesh().x_desc("release").y_desc("KiB").draw()?;
    type Series = (&'static str, fn(&StorageRecord) -> u64, RGBColor);
    let series: [Series; 2] = [
        ("content", |r| r.content_bytes, BLUE),
        ("metadata", |r| r.metadata_bytes, RED),
    ];
    for (name, get, color) in series {
        chart
            .draw_series(LineSeries::new(
                rows.iter().map(|r| (r.release as f64, get(r) as f64 / 1024.0)),
                color.stroke_width(2),
            ))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Condition, HarnessError, Result};
use crate::agent::EpsilonPolicy;

pub const CSV_HEADER: &str = "seed,epoch,phase,condition,epsilon_policy,normalized_reward_mean,ci95";

/// One evaluation: mean normalized reward over the evaluation episodes at
/// the end of an epoch. Epochs and phases count from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub epoch: u64,
    pub phase: usize,
    pub condition: Condition,
    pub epsilon_policy: EpsilonPolicy,
    pub normalized_reward_mean: f64,
    pub ci95: f64,
}

pub fn write_csv<W: Write>(records: &[EvalRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    write_csv(records, File::create(path)?)
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(HarnessError::Plan(format!("unexpected CSV header `{header}`")));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn parse_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    read_csv(File::open(path)?)
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 45.0;

fn color(c: Condition) -> &'static str {
    match c {
        Condition::None => "#d62728",
        Condition::Types => "#1f77b4",
        Condition::TypesFacts => "#2ca02c",
    }
}

struct Point {
    epoch: u64,
    mean: f64,
    half: f64,
}

/// Seed-averaged curve. With several seeds the band is the normal 95%
/// interval of the seed means; with one seed it is that run's interval.
fn curve(records: &[&EvalRecord]) -> Vec<Point> {
    let mut by_epoch: BTreeMap<u64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.normalized_reward_mean).sum::<f64>() / n;
            let half = if rs.len() == 1 {
                rs[0].ci95
            } else {
                let var = rs.iter().map(|r| (r.normalized_reward_mean - mean).powi(2)).sum::<f64>() / (n - 1.0);
                1.96 * var.sqrt() / n.sqrt()
            };
            Point { epoch, mean, half }
        })
        .collect()
}

/// Line chart of mean normalized reward against epoch: one polyline and CI
/// band per condition, dashed rules where the phase changes.
pub fn render_svg(records: &[EvalRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut series: BTreeMap<Condition, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        series.entry(r.condition).or_default().push(r);
    }
    let curves: Vec<(Condition, Vec<Point>)> = series.into_iter().map(|(c, rs)| (c, curve(&rs))).collect();

    let max_epoch = records.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let lo = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.mean - p.half))
        .fold(0.0_f64, f64::min)
        .floor();
    let hi = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.mean + p.half))
        .fold(1.0_f64, f64::max)
        .ceil();
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |e: f64| LEFT + e / max_epoch * pw;
    let sy = |v: f64| TOP + (hi - v) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    // axes and ticks
    let (x0, x1, y0, y1) = (sx(0.0), sx(max_epoch), sy(lo), sy(hi));
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let steps = ((hi - lo) / 0.5).round() as i64;
    for i in 0..=steps {
        let v = lo + i as f64 * 0.5;
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            x0 - 6.0,
            y + 4.0
        );
    }
    let xticks = 5.min(max_epoch as u64).max(1);
    for i in 0..=xticks {
        let e = (max_epoch * i as f64 / xticks as f64).round();
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{e}</text>"#, sx(e), y0 + 16.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">normalized reward</text>"#,
        TOP + ph / 2.0
    );

    // phase boundaries: last epoch before the phase index changes
    let mut phase_of: BTreeMap<u64, usize> = BTreeMap::new();
    for r in records {
        phase_of.insert(r.epoch, r.phase);
    }
    let boundaries: BTreeSet<u64> = phase_of
        .iter()
        .zip(phase_of.iter().skip(1))
        .filter(|((_, a), (_, b))| a != b)
        .map(|((e, _), _)| *e)
        .collect();
    for e in boundaries {
        let x = sx(e as f64);
        let _ = writeln!(
            s,
            r##"<line class="phase-boundary" x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="#555" stroke-dasharray="4 3"/>"##
        );
    }

    for (i, (cond, pts)) in curves.iter().enumerate() {
        let col = color(*cond);
        let mut band: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean + p.half)))
            .collect();
        band.extend(
            pts.iter()
                .rev()
                .map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean - p.half))),
        );
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.epoch as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon class="ci-band" data-condition="{cond}" points="{}" fill="{col}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-condition="{cond}" points="{}" fill="none" stroke="{col}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{col}" stroke-width="2"/><text x="{}" y="{}">{cond}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg(records: &[EvalRecord], path: &Path) -> Result<()> {
    let svg = render_svg(records)?;
    std::fs::write(path, svg)?;
    Ok(())
}

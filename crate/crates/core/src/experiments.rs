//! Experiment protocols on the synthetic world: lateral offset, photometric
//! "weather" perturbation and the node-spacing sweep, plus CSV and SVG output.

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::mapping::{self, MapBuildParams, MapError, MapStats, TopoMetricMap};
use crate::pipeline::{
    evaluate, localize_queries, LocalizationParams, LocalizationResult, QueryFrame, StageTimings,
    TrajectoryMetrics,
};
use crate::synthworld::{generate_world, Sequence, SequenceConfig, World, WorldConfig};

pub const OFFSETS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 3.0];
pub const SWEEP_THRESHOLDS: [f64; 5] = [5.0, 10.0, 20.0, 40.0, 80.0];
/// Node spacing of the offset and weather maps. The largest offset, 3 m,
/// is half of it.
pub const BENCHMARK_D_THRESH: f64 = 6.0;

/// A world, the sequence it is mapped from and the parameters of both stages.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub world: World,
    pub intrinsics: CameraIntrinsics,
    pub mapping: SequenceConfig,
    /// Base configuration of query sequences; experiments vary the
    /// offset and photometric fields.
    pub query: SequenceConfig,
    pub map_params: MapBuildParams,
    pub localization: LocalizationParams,
}

impl Benchmark {
    pub fn new(world: &WorldConfig) -> Self {
        Self {
            world: generate_world(world),
            intrinsics: CameraIntrinsics::default(),
            mapping: SequenceConfig::default(),
            query: SequenceConfig {
                frame_spacing: 1.0,
                start: 0.25,
                seed: 1,
                ..SequenceConfig::default()
            },
            map_params: MapBuildParams {
                policy: mapping::NodeSpacingPolicy {
                    d_thresh: BENCHMARK_D_THRESH,
                    ..Default::default()
                },
                ..MapBuildParams::default()
            },
            localization: LocalizationParams::default(),
        }
    }

    pub fn mapping_sequence(&self) -> Sequence<'_> {
        Sequence::new(&self.world, self.intrinsics, self.mapping)
    }

    pub fn build_map(&self, params: &MapBuildParams) -> Result<TopoMetricMap, MapError> {
        mapping::build_map(self.mapping_sequence().frames(), self.intrinsics, params)
    }

    /// Renders `seq` and prepares every frame for localization.
    pub fn prepare_queries(&self, seq: &SequenceConfig) -> PreparedQueries {
        let seq = Sequence::new(&self.world, self.intrinsics, *seq);
        let pre = &self.localization.preprocessing;
        let mut frames = Vec::with_capacity(seq.len());
        let mut poses = Vec::with_capacity(seq.len());
        for f in seq.frames() {
            frames.push(QueryFrame::prepare(f.id, &f.image, pre));
            poses.push(f.pose);
        }
        PreparedQueries { frames, poses }
    }

    pub fn localize(&self, map: &TopoMetricMap, queries: &PreparedQueries) -> Run {
        let (results, timings) = localize_queries(map, &queries.frames, &self.localization);
        let truth: Vec<(Pose, u32)> = queries
            .poses
            .iter()
            .map(|p| (*p, map.nearest_node(p)))
            .collect();
        Run {
            metrics: evaluate(&results, &truth),
            results,
            timings,
        }
    }
}

/// Map-independent query work, reusable across maps built with the same
/// preprocessing.
#[derive(Clone, Debug)]
pub struct PreparedQueries {
    pub frames: Vec<QueryFrame>,
    pub poses: Vec<Pose>,
}

#[derive(Clone, Debug)]
pub struct Run {
    pub results: Vec<LocalizationResult>,
    pub metrics: TrajectoryMetrics,
    pub timings: StageTimings,
}

#[derive(Clone, Debug)]
pub struct OffsetRow {
    pub offset: f64,
    pub metrics: TrajectoryMetrics,
    pub timings: StageTimings,
}

/// Maps the default sequence once, then localizes queries shifted sideways
/// by each offset.
pub fn run_offset(bench: &Benchmark, offsets: &[f64]) -> Result<Vec<OffsetRow>, MapError> {
    let map = bench.build_map(&bench.map_params)?;
    let mut rows = Vec::new();
    for &offset in offsets {
        log::info!("offset {offset} m");
        let q = bench.prepare_queries(&SequenceConfig {
            lateral_offset: offset,
            ..bench.query
        });
        let run = bench.localize(&map, &q);
        rows.push(OffsetRow {
            offset,
            metrics: run.metrics,
            timings: run.timings,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherCondition {
    pub name: &'static str,
    pub lighting_gain: f64,
    pub lighting_bias: f64,
    pub landmark_dropout: f64,
    pub pixel_noise_sigma: f64,
}

impl WeatherCondition {
    pub fn apply(&self, seq: &SequenceConfig) -> SequenceConfig {
        SequenceConfig {
            lighting_gain: self.lighting_gain,
            lighting_bias: self.lighting_bias,
            landmark_dropout: self.landmark_dropout,
            pixel_noise_sigma: self.pixel_noise_sigma,
            ..*seq
        }
    }
}

pub const WEATHER: [WeatherCondition; 3] = [
    WeatherCondition {
        name: "baseline",
        lighting_gain: 1.0,
        lighting_bias: 0.0,
        landmark_dropout: 0.0,
        pixel_noise_sigma: 0.0,
    },
    WeatherCondition {
        name: "lighting",
        lighting_gain: 0.6,
        lighting_bias: 0.15,
        landmark_dropout: 0.0,
        pixel_noise_sigma: 0.0,
    },
    WeatherCondition {
        name: "lighting+dropout+jitter",
        lighting_gain: 0.6,
        lighting_bias: 0.15,
        landmark_dropout: 0.3,
        pixel_noise_sigma: 1.0,
    },
];

#[derive(Clone, Debug)]
pub struct WeatherRow {
    pub condition: WeatherCondition,
    pub normalization: bool,
    pub metrics: TrajectoryMetrics,
    pub timings: StageTimings,
}

/// Runs every condition with patch normalization on and off. Each setting
/// gets its own map, built with the same preprocessing as its queries.
pub fn run_weather(
    bench: &Benchmark,
    conditions: &[WeatherCondition],
) -> Result<Vec<WeatherRow>, MapError> {
    let mut rows = Vec::new();
    for normalization in [true, false] {
        let mut b = bench.clone();
        b.map_params.preprocessing.normalize = normalization;
        b.localization.preprocessing.normalize = normalization;
        let map = b.build_map(&b.map_params)?;
        for c in conditions {
            log::info!("weather {} normalization={normalization}", c.name);
            let q = b.prepare_queries(&c.apply(&b.query));
            let run = b.localize(&map, &q);
            rows.push(WeatherRow {
                condition: *c,
                normalization,
                metrics: run.metrics,
                timings: run.timings,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub d_thresh: f64,
    pub stats: MapStats,
    pub metrics: TrajectoryMetrics,
    pub timings: StageTimings,
}

/// Builds one map per distance threshold and localizes the same prepared
/// queries against each.
pub fn run_sweep(bench: &Benchmark, thresholds: &[f64]) -> Result<Vec<SweepRow>, MapError> {
    let queries = bench.prepare_queries(&bench.query);
    let mut rows = Vec::new();
    for &d_thresh in thresholds {
        log::info!("sweep d_thresh {d_thresh} m");
        let mut params = bench.map_params;
        params.policy = mapping::NodeSpacingPolicy::new(d_thresh, params.policy.lambda)?;
        let map = bench.build_map(&params)?;
        let run = bench.localize(&map, &queries);
        rows.push(SweepRow {
            d_thresh,
            stats: mapping::map_stats(&map),
            metrics: run.metrics,
            timings: run.timings,
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn metric_fields(m: &TrajectoryMetrics) -> String {
    format!(
        "{},{},{},{:.6},{:.6},{},{},{}",
        opt(m.median_translation_error),
        opt(m.median_rotation_error),
        opt(m.median_translation_error_all),
        m.topological_accuracy,
        m.localization_rate,
        m.frames,
        m.localized,
        m.jump_rejected
    )
}

const METRIC_HEADER: &str = "median_translation_error_m,median_rotation_error_deg,median_translation_error_all_m,topological_accuracy,localization_rate,frames,localized,jump_rejected";

pub fn write_offset_csv(mut w: impl Write, rows: &[OffsetRow]) -> io::Result<()> {
    writeln!(w, "offset_m,{METRIC_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{}", r.offset, metric_fields(&r.metrics))?;
    }
    Ok(())
}

pub fn write_weather_csv(mut w: impl Write, rows: &[WeatherRow]) -> io::Result<()> {
    writeln!(
        w,
        "condition,normalization,gain,bias,dropout,jitter_px,{METRIC_HEADER}"
    )?;
    for r in rows {
        let c = &r.condition;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.name,
            if r.normalization { "on" } else { "off" },
            c.lighting_gain,
            c.lighting_bias,
            c.landmark_dropout,
            c.pixel_noise_sigma,
            metric_fields(&r.metrics)
        )?;
    }
    Ok(())
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "d_thresh_m,nodes,landmarks,map_bytes,{METRIC_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.d_thresh,
            r.stats.nodes,
            r.stats.landmarks,
            r.stats.bytes,
            metric_fields(&r.metrics)
        )?;
    }
    Ok(())
}

/// One polyline of a chart. Points with a non-finite coordinate are skipped.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Renders stacked line charts sharing one x axis, each panel scaled to its
/// own series.
pub fn svg_chart(title: &str, x_label: &str, panels: &[(String, Vec<Series>)]) -> String {
    let (w, panel_h, left, top, gap) = (640.0, 220.0, 70.0, 40.0, 50.0);
    let plot_w = w - left - 20.0;
    let height = top + panels.len() as f64 * (panel_h + gap);
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let xs: Vec<f64> = panels
        .iter()
        .flat_map(|(_, s)| s.iter())
        .flat_map(|s| s.points.iter().filter(finite).map(|p| p.0))
        .collect();
    let (x0, x1) = padded_range(&xs);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (pi, (y_label, series)) in panels.iter().enumerate() {
        let oy = top + pi as f64 * (panel_h + gap);
        let ys: Vec<f64> = series
            .iter()
            .flat_map(|s| s.points.iter().filter(finite).map(|p| p.1))
            .collect();
        let (y0, y1) = padded_range(&ys);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| oy + panel_h - (y - y0) / (y1 - y0) * panel_h;
        let _ = writeln!(
            out,
            r#"<rect x="{left}" y="{oy}" width="{plot_w}" height="{panel_h}" fill="none" stroke="black"/>"#
        );
        for t in 0..=4 {
            let fy = y0 + (y1 - y0) * t as f64 / 4.0;
            let fx = x0 + (x1 - x0) * t as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                sy(fy) + 4.0,
                tick(fy)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                sx(fx),
                oy + panel_h + 14.0,
                tick(fx)
            );
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            oy + panel_h / 2.0,
            escape(y_label)
        );
        for (si, s) in series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(finite)
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(out, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                left + 8.0,
                oy + 16.0 + 14.0 * si as f64,
                escape(&s.label)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        height - 8.0,
        escape(x_label)
    );
    out.push_str("</svg>\n");
    out
}

/// Node-count chart: median errors and map size against node count.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let nodes = |r: &SweepRow| r.stats.nodes as f64;
    let series = |label: &str, f: &dyn Fn(&SweepRow) -> Option<f64>| Series {
        label: label.into(),
        points: rows
            .iter()
            .map(|r| (nodes(r), f(r).unwrap_or(f64::NAN)))
            .collect(),
    };
    svg_chart(
        "Effect of the number of nodes",
        "nodes",
        &[
            (
                "median translation error (m)".into(),
                vec![
                    series("localized frames", &|r| r.metrics.median_translation_error),
                    series("all frames", &|r| r.metrics.median_translation_error_all),
                ],
            ),
            (
                "median rotation error (deg)".into(),
                vec![series("rotation", &|r| r.metrics.median_rotation_error)],
            ),
            (
                "map size (kB)".into(),
                vec![series("bytes / 1000", &|r| Some(r.stats.bytes as f64 / 1000.0))],
            ),
        ],
    )
}

pub fn offset_svg(rows: &[OffsetRow]) -> String {
    let pts = |f: &dyn Fn(&TrajectoryMetrics) -> Option<f64>| {
        rows.iter()
            .map(|r| (r.offset, f(&r.metrics).unwrap_or(f64::NAN)))
            .collect()
    };
    svg_chart(
        "Lateral offset",
        "offset (m)",
        &[
            (
                "median translation error (m)".into(),
                vec![Series {
                    label: "translation".into(),
                    points: pts(&|m| m.median_translation_error),
                }],
            ),
            (
                "fraction".into(),
                vec![
                    Series {
                        label: "topological accuracy".into(),
                        points: pts(&|m| Some(m.topological_accuracy)),
                    },
                    Series {
                        label: "localization rate".into(),
                        points: pts(&|m| Some(m.localization_rate)),
                    },
                ],
            ),
        ],
    )
}

fn padded_range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(t: Option<f64>) -> TrajectoryMetrics {
        TrajectoryMetrics {
            median_translation_error: t,
            median_rotation_error: t,
            median_translation_error_all: None,
            topological_accuracy: 1.0,
            localization_rate: 0.5,
            frames: 4,
            localized: 2,
            jump_rejected: 0,
        }
    }

    #[test]
    fn csv_rows_and_missing_values() {
        let rows = vec![
            OffsetRow {
                offset: 0.0,
                metrics: metrics(Some(0.01)),
                timings: StageTimings::default(),
            },
            OffsetRow {
                offset: 3.0,
                metrics: metrics(None),
                timings: StageTimings::default(),
            },
        ];
        let mut buf = Vec::new();
        write_offset_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("offset_m,median_translation_error_m"));
        assert_eq!(lines[1], "0,0.010000,0.010000,,1.000000,0.500000,4,2,0");
        assert_eq!(lines[2], "3,,,,1.000000,0.500000,4,2,0");
        let n = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == n));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let svg = svg_chart(
            "a < b",
            "x",
            &[(
                "y".into(),
                vec![
                    Series {
                        label: "one".into(),
                        points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)],
                    },
                    Series {
                        label: "flat".into(),
                        points: vec![(0.0, 2.0), (2.0, 2.0)],
                    },
                ],
            )],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("NaN"));
    }
}

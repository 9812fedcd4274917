//! Acceptance suite. Runs every criterion, prints one line each, and fails
//! the process if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use gputrace::analysis::{
    extrapolate, fit_linear, growth, headroom, speedup, threshold_crossing, unit_cost,
    ScalingMetric, ScalingPoint,
};
use gputrace::clock::SimClock;
use gputrace::device::{DeviceInfo, SimBackend, SimProfile, SimSegment};
use gputrace::procmon::{parse_top_batch, TopOptions};
use gputrace::profile::{parse_profile, simulate_session};
use gputrace::report::{self, plot, render_scaling, render_table, render_usage};
use gputrace::sampler::{Sampler, SamplerConfig};
use gputrace::schema::{EVENTS_FILE, META_FILE, METRICS_FILE};
use gputrace::trace::{
    attribute_steps, parse_session, serialize_session, summarize, Session, PRE_STEP_LABEL,
};
use gputrace::units::{format_percent, gb_to_bytes};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn reference_session(root: &Path) -> Result<Session, String> {
    let text = fs::read_to_string(fixture("h200_run.profile")).map_err(|e| e.to_string())?;
    let spec = parse_profile(&text).map_err(|e| e.to_string())?;
    let dir = root.join("h200_run");
    simulate_session(&spec, &dir, 1.0).map_err(|e| e.to_string())?;
    parse_session(&dir).map_err(|e| e.to_string())
}

const STEP_OFFSETS_S: [u64; 10] = [0, 62, 66, 73, 74, 76, 86, 106, 114, 134];
const STEP_RUNTIMES_S: [u64; 10] = [62, 4, 7, 1, 2, 10, 20, 8, 20, 18];

fn ac1_table_reproduction(root: &Path) -> Outcome {
    let s = reference_session(root)?;
    let offsets: Vec<u64> = s.markers.iter().map(|m| m.elapsed_ms).collect();
    let expected: Vec<u64> = STEP_OFFSETS_S.iter().map(|t| t * 1000).collect();
    ensure!(offsets == expected, "marker offsets {offsets:?}");
    ensure!(s.duration_ms == 152_000, "duration {} ms", s.duration_ms);
    let steps = attribute_steps(&s).map_err(|e| e.to_string())?.steps;
    ensure!(
        steps.iter().all(|st| st.label != PRE_STEP_LABEL),
        "unexpected pre step"
    );
    let runtimes: Vec<u64> = steps.iter().map(|st| st.runtime_ms()).collect();
    let want: Vec<u64> = STEP_RUNTIMES_S.iter().map(|t| t * 1000).collect();
    ensure!(runtimes == want, "runtimes {runtimes:?}");
    let total: u64 = runtimes.iter().sum();
    ensure!(total == 152_000, "total {total} ms");
    let table = render_table(&summarize(&s, &steps));
    let last: Vec<&str> = table
        .lines()
        .last()
        .unwrap_or("")
        .split_whitespace()
        .collect();
    ensure!(last == ["Total", "152"], "table total row {last:?}");
    Ok("runtimes 62,4,7,1,2,10,20,8,20,18 s; Total 152".into())
}

fn ac2_peak(root: &Path) -> Outcome {
    let s = reference_session(root)?;
    let peak = s.peak_gpu_mem().ok_or("no memory samples")?;
    ensure!(peak == gb_to_bytes(101.3), "peak {peak} bytes");
    // The first sample at or above the peak lies after 60 s.
    let first_peak = s
        .samples
        .iter()
        .find(|x| x.mem_used_bytes == Some(peak))
        .map(|x| x.elapsed_ms)
        .unwrap_or(0);
    ensure!(first_peak > 60_000, "peak first reached at {first_peak} ms");
    let share = headroom(peak, s.device.memory_total).map_err(|e| e.to_string())?;
    let shown = format_percent(share);
    let value: f64 = shown
        .trim_end_matches('%')
        .parse()
        .map_err(|_| shown.clone())?;
    // 101.3 / 140 computed independently.
    let oracle = 101.3 / 140.0 * 100.0;
    ensure!((value - 72.4).abs() <= 0.5, "displayed {shown}");
    ensure!((share * 100.0 - oracle).abs() < 1e-9, "share {share}");
    Ok(format!(
        "peak 101.3 GB at {} s; headroom {shown} of 140 GB",
        first_peak / 1000
    ))
}

/// Slope and intercept from the 2x2 normal equations in raw cell units.
fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

fn linear_series(y0: f64, y1: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| (100_000.0 * (i + 1) as f64, y0 + (y1 - y0) * i as f64 / 9.0))
        .collect()
}

fn to_points(raw: &[(f64, f64)]) -> Vec<ScalingPoint> {
    raw.iter()
        .map(|&(s, v)| ScalingPoint::new(s, v).expect("valid point"))
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn ac3_scaling_fit() -> Outcome {
    let mut notes = Vec::new();
    for (y0, y1, expected, unit) in [(64.1, 151.8, "9.7", "s"), (11.5, 102.5, "10.1", "GB")] {
        let raw = linear_series(y0, y1);
        let fit = fit_linear(&to_points(&raw)).map_err(|e| e.to_string())?;
        let (slope, intercept) = normal_equations(&raw);
        ensure!(
            rel(fit.slope, slope) <= 1e-9,
            "slope {} vs oracle {slope}",
            fit.slope
        );
        ensure!(
            rel(fit.intercept, intercept) <= 1e-9,
            "intercept {} vs oracle {intercept}",
            fit.intercept
        );
        let cost = unit_cost(&fit, 100_000.0);
        let exact = (y1 - y0) / 9.0;
        ensure!(rel(cost, exact) <= 1e-9, "unit cost {cost} vs {exact}");
        ensure!(
            format!("{cost:.1}") == expected,
            "unit cost {cost:.1} vs {expected}"
        );
        ensure!((fit.r2 - 1.0).abs() <= 1e-12, "r2 {}", fit.r2);
        notes.push(format!("{cost:.3} {unit}"));
    }
    Ok(format!(
        "unit costs {} per 100k cells; r2 = 1",
        notes.join(" and ")
    ))
}

fn ac4_ratios() -> Outcome {
    let s = speedup(4659.48, 152.0).map_err(|e| e.to_string())?;
    ensure!((s - 30.65).abs() <= 0.01, "speedup {s}");
    let rt = growth(64.1, 151.8).map_err(|e| e.to_string())?;
    let mem = growth(11.5, 102.5).map_err(|e| e.to_string())?;
    ensure!((rt - 2.37).abs() < 0.005, "runtime growth {rt}");
    ensure!((mem - 8.91).abs() < 0.005, "memory growth {mem}");
    ensure!(
        format!("{rt:.1}") == "2.4",
        "runtime growth rounds to {rt:.1}"
    );
    ensure!(
        format!("{mem:.1}") == "8.9",
        "memory growth rounds to {mem:.1}"
    );
    ensure!(
        format!("{s:.0}") != "32",
        "speedup unexpectedly rounds to 32"
    );
    Ok(format!(
        "speedup {s:.2}x (published 32x not reproduced); growth {rt:.2}x and {mem:.2}x"
    ))
}

fn ac5_bottleneck() -> Outcome {
    let raw = linear_series(11.5, 102.5);
    let fit = fit_linear(&to_points(&raw)).map_err(|e| e.to_string())?;
    let cross = threshold_crossing(&fit, 140.0).ok_or("fit never reaches 140 GB")?;
    let (slope, intercept) = normal_equations(&raw);
    let oracle = (140.0 - intercept) / slope;
    ensure!(
        rel(cross, oracle) <= 1e-9,
        "crossing {cross} vs oracle {oracle}"
    );
    ensure!((1.2e6..=1.5e6).contains(&cross), "crossing {cross}");
    let at = extrapolate(&fit, cross);
    ensure!(
        at.extrapolated && (at.value - 140.0).abs() < 1e-6,
        "value {}",
        at.value
    );
    Ok(format!("140 GB reached at {:.0} cells", cross))
}

fn sim_sampler(
    profile: SimProfile,
    dir: &Path,
    period_s: f64,
    failure: Option<(Duration, Duration)>,
) -> (Arc<SimClock>, Sampler) {
    let clock = Arc::new(SimClock::new());
    let mut backend = SimBackend::new(profile, clock.clone());
    if let Some((a, b)) = failure {
        backend = backend.with_failure_window(a, b);
    }
    let mut config = SamplerConfig::new(dir).period(period_s);
    config.watch_mark_file = false;
    let sampler = Sampler::start(config, Arc::new(backend), clock.clone()).expect("sampler starts");
    (clock, sampler)
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn ac6_cadence(root: &Path) -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    for trial in 0..100 {
        let d_ms: u64 = [1000, 2000, 5000][rng.gen_range(0..3)];
        let p_ms: u64 = [50, 100, 500][rng.gen_range(0..3)];
        let dir = root.join(format!("cadence-{trial}"));
        let (clock, sampler) = sim_sampler(SimProfile::idle(), &dir, p_ms as f64 / 1000.0, None);
        clock.run_until(Duration::from_millis(d_ms));
        let paths = sampler.stop();
        let times: Vec<u64> = data_rows(&paths.metrics_csv)
            .iter()
            .map(|r| {
                r.split(',')
                    .next()
                    .unwrap_or("")
                    .parse()
                    .unwrap_or(u64::MAX)
            })
            .collect();
        let n = times.len() as u64;
        let lo = d_ms / p_ms;
        ensure!(
            (lo..=lo + 2).contains(&n),
            "trial {trial}: D={d_ms} ms p={p_ms} ms gave {n} rows"
        );
        ensure!(
            times.windows(2).all(|w| w[0] < w[1]),
            "trial {trial}: timestamps not strictly increasing"
        );
    }
    Ok("100 trials within [floor(D/p), floor(D/p)+2] rows, strictly increasing".into())
}

const LABEL_ALPHABET: &[&str] = &[
    "a", "Z", "7", " ", ",", "\"", "é", "相", "-", "(", "/", "\n",
];

fn random_label(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..12);
    let label: String = (0..len)
        .map(|_| LABEL_ALPHABET[rng.gen_range(0..LABEL_ALPHABET.len())])
        .collect();
    label
}

/// Records a random session with the real sampler on a virtual clock.
fn random_session(rng: &mut StdRng, dir: &Path) -> Result<PathBuf, String> {
    let names = ["Sim GPU", "GPU, \"quoted\" name", "Ускоритель 1"];
    let device = DeviceInfo::new(
        0,
        names[rng.gen_range(0..names.len())],
        gb_to_bytes(rng.gen_range(1.0..200.0)),
    )
    .map_err(|e| e.to_string())?;
    let segments: Vec<SimSegment> = (0..rng.gen_range(1..=4))
        .map(|_| SimSegment {
            duration: Duration::from_millis(rng.gen_range(100..3000)),
            gpu_utilization: rng.gen_range(0..=100),
            memory_used: rng.gen_range(0..=device.memory_total),
            temperature: rng.gen_range(-10..95),
            power_draw: rng.gen_range(0..700_000),
        })
        .collect();
    let profile = SimProfile::new(device, segments).map_err(|e| e.to_string())?;
    let total = profile.total_duration().as_millis() as u64;
    let failure = rng.gen_bool(0.3).then(|| {
        let a = rng.gen_range(0..total);
        (
            Duration::from_millis(a),
            Duration::from_millis(a + rng.gen_range(1..500)),
        )
    });
    let period = [0.05, 0.1, 0.25, 0.5][rng.gen_range(0..4)];
    let (clock, sampler) = sim_sampler(profile, dir, period, failure);

    ensure!(sampler.mark("").is_err(), "empty label accepted");
    let mut times: Vec<u64> = (0..rng.gen_range(1..=8))
        .map(|_| rng.gen_range(0..=total))
        .collect();
    if rng.gen_bool(0.5) {
        let dup = times[rng.gen_range(0..times.len())];
        times.push(dup);
    }
    times.sort_unstable();
    for t in times {
        clock.run_until(Duration::from_millis(t));
        sampler
            .mark(&random_label(rng))
            .map_err(|e| e.to_string())?;
    }
    clock.run_until(Duration::from_millis(total));
    Ok(sampler.stop().session_dir)
}

fn ac7_round_trip(root: &Path) -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let mut gaps = 0;
    for i in 0..200 {
        let dir = random_session(&mut rng, &root.join(format!("rt-{i}")))?;
        let session = parse_session(&dir).map_err(|e| format!("session {i}: {e}"))?;
        gaps += session.samples.iter().filter(|s| s.is_gap()).count();
        let files = serialize_session(&session);
        for (name, text) in [
            (METRICS_FILE, &files.metrics),
            (EVENTS_FILE, &files.events),
            (META_FILE, &files.meta),
        ] {
            let on_disk = fs::read_to_string(dir.join(name)).map_err(|e| e.to_string())?;
            ensure!(
                &on_disk == text,
                "session {i}: {name} differs after round trip"
            );
        }
        ensure!(
            files.process.is_none(),
            "session {i}: unexpected process file"
        );
    }
    Ok(format!(
        "200 sessions byte-identical ({gaps} gap rows exercised)"
    ))
}

fn ac8_attribution(root: &Path) -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let mut checked = 0usize;
    for i in 0..200 {
        let dir = random_session(&mut rng, &root.join(format!("attr-{i}")))?;
        let s = parse_session(&dir).map_err(|e| e.to_string())?;
        let steps = attribute_steps(&s).map_err(|e| e.to_string())?.steps;
        let first = s.markers[0].elapsed_ms;
        let marked: Vec<_> = steps.iter().filter(|st| !st.is_pre()).collect();

        // Tiling of [first marker, duration).
        let mut cursor = first;
        for st in &marked {
            ensure!(
                st.start_ms == cursor,
                "session {i}: gap or overlap at {cursor} ms"
            );
            ensure!(st.end_ms > st.start_ms, "session {i}: empty step kept");
            cursor = st.end_ms;
        }
        ensure!(
            cursor == s.duration_ms,
            "session {i}: steps end at {cursor} ms"
        );
        let sum: u64 = marked.iter().map(|st| st.runtime_ms()).sum();
        ensure!(
            sum == s.duration_ms - first,
            "session {i}: runtimes sum to {sum}"
        );

        // Brute-force membership over every step, owner by latest marker.
        for sample in s.samples.iter().filter(|x| x.elapsed_ms >= first) {
            let t = sample.elapsed_ms;
            let members: Vec<_> = steps
                .iter()
                .filter(|st| {
                    st.start_ms <= t
                        && (t < st.end_ms || (t == s.duration_ms && st.end_ms == s.duration_ms))
                })
                .collect();
            ensure!(
                members.len() == 1,
                "session {i}: sample at {t} ms in {} steps",
                members.len()
            );
            if t < s.duration_ms {
                let owner = s
                    .markers
                    .iter()
                    .rev()
                    .find(|m| m.elapsed_ms <= t)
                    .expect("t >= first");
                ensure!(
                    members[0].label == owner.label && members[0].start_ms == owner.elapsed_ms,
                    "session {i}: sample at {t} ms attributed to `{}`",
                    members[0].label
                );
            }
            checked += 1;
        }
    }
    Ok(format!(
        "200 sessions tile exactly; {checked} samples each in one step"
    ))
}

fn ac9_top_batch() -> Outcome {
    let text = fs::read_to_string(fixture("top_batch.txt")).map_err(|e| e.to_string())?;
    let parsed = parse_top_batch(
        &text,
        TopOptions {
            interval_s: 1.0,
            pid: Some(31337),
        },
    );
    ensure!(parsed.snapshots == 6, "{} snapshots", parsed.snapshots);
    ensure!(parsed.malformed == 1, "skipped tally {}", parsed.malformed);
    let one_and_half_gib: u64 = 3 << 29;
    let expected: [(u64, f64, u64); 5] = [
        (0, 99.7, one_and_half_gib),
        (1000, 100.0, one_and_half_gib),
        (2000, 398.0, one_and_half_gib),
        (4000, 101.3, 9 << 28),
        (5000, 12.0, 3145728 * 1024),
    ];
    let got: Vec<(u64, f64, u64)> = parsed
        .samples
        .iter()
        .map(|s| (s.elapsed_ms, s.cpu_pct, s.rss_bytes))
        .collect();
    ensure!(got == expected, "parsed {got:?}");
    ensure!(one_and_half_gib == 1_610_612_736, "constant");
    Ok("6 snapshots: 1.5g/1536m/1572864 all 1610612736 bytes, 1 skipped".into())
}

fn count_class(doc: &roxmltree::Document, class: &str) -> usize {
    doc.descendants()
        .filter(|n| n.attribute("class") == Some(class))
        .count()
}

fn ac10_rendering(root: &Path) -> Outcome {
    let s = reference_session(root)?;
    let steps = attribute_steps(&s).map_err(|e| e.to_string())?.steps;
    let usage = render_usage(&s, &steps).map_err(|e| e.to_string())?;
    ensure!(
        usage == render_usage(&s, &steps).map_err(|e| e.to_string())?,
        "usage plot differs"
    );
    let doc = roxmltree::Document::parse(&usage).map_err(|e| format!("usage: {e}"))?;
    ensure!(
        count_class(&doc, "marker") == 10,
        "{} marker lines",
        count_class(&doc, "marker")
    );
    let labels: Vec<String> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("marker-label"))
        .map(|n| n.text().unwrap_or("").to_string())
        .collect();
    let expected: Vec<String> = s.markers.iter().map(|m| m.label.clone()).collect();
    ensure!(labels == expected, "marker labels {labels:?}");

    // Top of the memory polyline inverts to 101.3 GB within 1 px.
    let mem = doc
        .descendants()
        .find(|n| n.attribute("data-name") == Some(report::GPU_MEM_SERIES))
        .ok_or("no memory series")?;
    let min_y = mem
        .descendants()
        .filter_map(|n| n.attribute("points"))
        .flat_map(|p| {
            p.split(' ')
                .filter_map(|xy| xy.split(',').nth(1)?.parse::<f64>().ok())
        })
        .fold(f64::INFINITY, f64::min);
    let plot_h = f64::from(plot::DEFAULT_HEIGHT) - plot::MARGIN_TOP - plot::MARGIN_BOTTOM;
    let want_y = plot::MARGIN_TOP + plot_h * (1.0 - 101.3 / 110.0);
    ensure!((min_y - want_y).abs() <= 1.0, "peak y {min_y} vs {want_y}");

    for (y0, y1, metric, text) in [
        (64.1, 151.8, ScalingMetric::Runtime, "9.7 s per 100k cells"),
        (
            11.5,
            102.5,
            ScalingMetric::PeakGpuMem,
            "10.1 GB per 100k cells",
        ),
    ] {
        let points = to_points(&linear_series(y0, y1));
        let fit = fit_linear(&points).map_err(|e| e.to_string())?;
        let a = render_scaling(&points, &fit, metric, 1e5).map_err(|e| e.to_string())?;
        let b = render_scaling(&points, &fit, metric, 1e5).map_err(|e| e.to_string())?;
        ensure!(a == b, "{} scaling plot differs", metric.name());
        let doc = roxmltree::Document::parse(&a).map_err(|e| format!("scaling: {e}"))?;
        ensure!(
            count_class(&doc, "point") == 10,
            "{} scatter marks",
            count_class(&doc, "point")
        );
        ensure!(
            count_class(&doc, "trend") == 1,
            "{} trend lines",
            count_class(&doc, "trend")
        );
        ensure!(a.contains(text), "annotation lacks `{text}`");
    }
    Ok(
        "byte-identical; 10 marker lines, 10 scatter marks, 1 trend line; peak y within 1 px"
            .into(),
    )
}

fn main() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let sub = |name: &str| {
        let p = root.join(name);
        fs::create_dir_all(&p).expect("create dir");
        p
    };
    let criteria: Vec<(&str, Check)> = vec![
        (
            "AC1 table reproduction",
            Box::new(|| ac1_table_reproduction(&sub("ac1"))),
        ),
        ("AC2 peak and headroom", Box::new(|| ac2_peak(&sub("ac2")))),
        ("AC3 scaling fit", Box::new(ac3_scaling_fit)),
        ("AC4 ratio checks", Box::new(ac4_ratios)),
        ("AC5 extrapolation bottleneck", Box::new(ac5_bottleneck)),
        ("AC6 sampler cadence", Box::new(|| ac6_cadence(&sub("ac6")))),
        ("AC7 round trip", Box::new(|| ac7_round_trip(&sub("ac7")))),
        ("AC8 attribution", Box::new(|| ac8_attribution(&sub("ac8")))),
        ("AC9 top batch parser", Box::new(ac9_top_batch)),
        (
            "AC10 rendering determinism",
            Box::new(|| ac10_rendering(&sub("ac10"))),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({} ms)", t.elapsed().as_millis()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    let elapsed = started.elapsed();
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        elapsed.as_secs_f64()
    );
    if elapsed > Duration::from_secs(60) {
        println!("FAIL suite exceeded 60 s");
        failed += 1;
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

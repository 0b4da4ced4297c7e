//! CTC decoding cost grows about linearly with input length.

use mtasr::harness::{measure_rtf, Routing, RtfMode, RTF_WARMUP};
use mtasr::mixtures::{generate_split, DatasetManifest, MixtureSample, Split};
use mtasr::model::{ModelConfig, MtModel};
use mtasr::tch::TalkerCount;

/// Least-squares slope and coefficient of determination.
fn fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, slope * sxy / syy)
}

#[test]
fn ctc_time_per_utterance_is_linear_in_frames() {
    // one talker count, so every utterance runs the same branch
    let mut data: Vec<MixtureSample> = generate_split(&DatasetManifest::with_counts(31, 0, 60, 0), Split::Dev)
        .unwrap()
        .into_iter()
        .filter(|s| s.talker_count == TalkerCount::TWO)
        .collect();
    data.sort_by_key(MixtureSample::frames);
    let model = MtModel::new(ModelConfig::default(), 31).unwrap();

    let third = data.len() / 3;
    let mut points = Vec::new();
    let mut rtfs = Vec::new();
    for bucket in data.chunks(third).take(3) {
        // best of three passes to shed scheduling noise
        let best = (0..3)
            .map(|_| measure_rtf(&model, bucket, RtfMode::CtcGreedy, Routing::Oracle).unwrap())
            .min_by(|a, b| a.total_seconds.total_cmp(&b.total_seconds))
            .unwrap();
        let n = (bucket.len() - RTF_WARMUP) as f64;
        points.push((best.total_frames as f64 / n, best.total_seconds / n));
        rtfs.push(best.rtf);
    }
    let (slope, r2) = fit(&points);
    assert!(slope > 0.0, "{points:?}");
    assert!(r2 > 0.9, "r2 {r2} for {points:?}");
    let spread = rtfs.iter().copied().fold(0.0, f64::max) / rtfs.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(spread < 2.0, "per-frame cost varies {spread}x across buckets: {rtfs:?}");
}

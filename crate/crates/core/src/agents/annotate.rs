//! Template annotator: renders a prompt from metadata and a statistical
//! report. Numbers reach the text only through these rendered fields.

use super::scenario::{clock, Kind, Scenario, Shape, Weather};
use super::stats::StatReport;

/// Every word the templates can emit.
pub const LEXICON: &[&str] = &[
    "a",
    "an",
    "and",
    "around",
    "at",
    "day",
    "with",
    "output",
    "peaking",
    "shape",
    "load",
    "sunny",
    "clouds",
    "cloudy",
    "rainy",
    "stormy",
    "stable",
    "moderate",
    "high",
    "low",
    "industrial",
    "residential",
    "bell",
    "plateau",
    "evening",
    "double",
    "peak",
    "sudden",
    "dip",
    "morning",
    "afternoon",
    "dawn",
    "volatility",
    "solar",
    "power",
    "profile",
    "the",
    "of",
    "in",
    "on",
];

fn weather_words(w: Weather) -> &'static str {
    match w {
        Weather::Sunny => "sunny",
        Weather::SunnyWithClouds => "sunny with clouds",
        Weather::Cloudy => "cloudy",
        Weather::Rainy => "rainy",
        Weather::Stormy => "stormy",
    }
}

fn shape_words(s: Shape) -> &'static str {
    match s {
        Shape::Bell => "bell",
        Shape::Plateau => "plateau",
        Shape::EveningPeak => "evening peak",
        Shape::DoublePeak => "double peak",
    }
}

/// Deterministic prompt for a scenario. The peak value comes from the
/// report; categorical fields and times come from the metadata.
pub fn annotate(s: &Scenario, report: &StatReport) -> String {
    let m = &s.metadata;
    let len = s.series.len();
    let tail = format!(
        "peaking at {:.2} around {}.",
        report.global.max,
        clock(m.peak_time_index, len)
    );
    let mut text = match (s.kind, m.weather, m.user_type) {
        (Kind::Pv, Some(w), _) => {
            format!(
                "A {} day with {} output, {tail}",
                weather_words(w),
                m.volatility
            )
        }
        (_, _, user) => {
            let who = user.map_or(String::new(), |u| format!("{u} "));
            let shape = shape_words(m.shape);
            let article = if shape.starts_with(['a', 'e', 'i', 'o', 'u']) {
                "an"
            } else {
                "a"
            };
            format!(
                "A {who}load day with {} output and {article} {shape} shape, {tail}",
                m.volatility
            )
        }
    };
    if let Some(e) = m.event {
        text.push_str(&format!(" A sudden dip at {}.", clock(e.dip_at, len)));
    }
    text
}

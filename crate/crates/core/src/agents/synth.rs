//! Parametric PV and load scenario generator with ground-truth metadata.
//!
//! Each scenario is drawn from its own stream `derive(seed, SYNTH, i)`, so a
//! dataset's prefix does not depend on its size. The volatility class is
//! imposed by scaling the noise until the residual ramp rate lands inside a
//! target band; metadata is measured from the finished series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::annotate::annotate;
use super::judge::shape_correlation;
use super::scenario::{Event, Kind, Metadata, Scenario, Shape, UserType, Volatility, Weather};
use super::stats::{classify_volatility, moving_average, residual_marr, stat_report};
use crate::error::{Error, Result};
use crate::seed::{self, purpose};

pub const MIN_LEN: usize = 16;
const MAX_ATTEMPTS: usize = 200;
/// Smoothed correlation with the shape template below which the label no longer describes the draw.
const SHAPE_MIN_CORR: f64 = 0.8;
/// Residual dip depth an event must show to be labelled.
pub const EVENT_MIN_DEPTH: f64 = 0.25;

/// Optional constraints on a generated scenario; unset fields are drawn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioSpec {
    pub weather: Option<Weather>,
    pub volatility: Option<Volatility>,
    pub peak: Option<f64>,
    pub user_type: Option<UserType>,
    pub shape: Option<Shape>,
    /// `Some(false)` forbids an event, `Some(true)` forces one (PV only).
    pub event: Option<bool>,
}

fn hour(i: usize, len: usize) -> f64 {
    i as f64 * 24.0 / len as f64
}

fn gauss(h: f64, centre: f64, width: f64) -> f64 {
    (-(h - centre).powi(2) / (2.0 * width * width)).exp()
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Daylight window: zero before `rise` and after `set`, one-hour ramps.
fn daylight(h: f64, rise: f64, set: f64) -> f64 {
    smoothstep(h - rise) * smoothstep(set - h)
}

/// Class-typical curve used as the shape reference, scaled to peak 1.
pub fn template(shape: Shape, len: usize) -> Vec<f64> {
    let curve: Vec<f64> = (0..len)
        .map(|i| {
            let h = hour(i, len);
            match shape {
                Shape::Bell => daylight(h, 6.0, 18.0) * gauss(h, 12.5, 2.1),
                Shape::Plateau => {
                    0.35 + 0.65 * logistic((h - 8.0) / 0.45) * logistic((18.0 - h) / 0.45)
                }
                Shape::EveningPeak => {
                    0.35 + 0.15 * gauss(h, 7.5, 1.0) + 0.65 * gauss(h, 20.25, 1.6)
                }
                Shape::DoublePeak => {
                    0.35 + 0.38 * gauss(h, 7.75, 1.05) + 0.65 * gauss(h, 20.25, 1.6)
                }
            }
        })
        .collect();
    let max = curve.iter().copied().fold(f64::MIN, f64::max);
    curve.iter().map(|v| v / max).collect()
}

/// Relative depth of the deepest local dip within one sample of `at`,
/// measured on a 3-point average against flanks three samples away.
pub fn dip_depth(x: &[f64], at: usize) -> f64 {
    let s = moving_average(x, 3);
    let n = s.len() as isize;
    let get = |i: isize| s[i.clamp(0, n - 1) as usize];
    let mut best = 0.0f64;
    for j in at as isize - 1..=at as isize + 1 {
        if j < 0 || j >= n {
            continue;
        }
        let flank = 0.5 * (get(j - 3) + get(j + 3));
        if flank > 0.0 {
            best = best.max(1.0 - get(j) / flank);
        }
    }
    best
}

fn band(v: Volatility) -> (f64, f64) {
    match v {
        Volatility::Stable => (0.002, 0.006),
        Volatility::Moderate => (0.018, 0.030),
        Volatility::High => (0.055, 0.090),
    }
}

fn pv_volatility(w: Weather, rng: &mut ChaCha8Rng) -> Volatility {
    match w {
        Weather::Sunny => Volatility::Stable,
        Weather::SunnyWithClouds | Weather::Cloudy => Volatility::Moderate,
        Weather::Rainy if rng.random_bool(0.5) => Volatility::Moderate,
        Weather::Rainy | Weather::Stormy => Volatility::High,
    }
}

fn dip_count(w: Weather, rng: &mut ChaCha8Rng) -> usize {
    match w {
        Weather::Sunny => 0,
        Weather::SunnyWithClouds => rng.random_range(1..=2),
        Weather::Cloudy => rng.random_range(2..=3),
        Weather::Rainy => rng.random_range(2..=4),
        Weather::Stormy => rng.random_range(3..=5),
    }
}

fn pick<T: Copy>(all: &[T], rng: &mut ChaCha8Rng) -> T {
    all[rng.random_range(0..all.len())]
}

/// Smooth profile, noise envelope and labels before the noise is scaled.
struct Draft {
    base: Vec<f64>,
    envelope: Vec<f64>,
    weather: Option<Weather>,
    volatility: Volatility,
    shape: Shape,
    user_type: Option<UserType>,
    event: Option<usize>,
    peak: f64,
}

fn draft_pv(spec: &ScenarioSpec, len: usize, rng: &mut ChaCha8Rng) -> Draft {
    let weather = spec.weather.unwrap_or_else(|| pick(Weather::ALL, rng));
    let volatility = spec
        .volatility
        .unwrap_or_else(|| pv_volatility(weather, rng));
    let peak = spec.peak.unwrap_or_else(|| rng.random_range(0.2..=1.0));
    let rise = rng.random_range(5.5..6.5);
    let set = rng.random_range(17.5..18.5);
    let centre = rng.random_range(11.5..13.5);
    let width = rng.random_range(1.6..2.6);
    let bell: Vec<f64> = (0..len)
        .map(|i| {
            let h = hour(i, len);
            daylight(h, rise, set) * gauss(h, centre, width)
        })
        .collect();
    let top = bell.iter().copied().fold(0.0, f64::max);
    let mut base: Vec<f64> = bell.iter().map(|v| v / top).collect();
    let envelope = base.clone();

    let per_hour = len as f64 / 24.0;
    let dips = if volatility == Volatility::Stable {
        0
    } else {
        dip_count(weather, rng)
    };
    for _ in 0..dips {
        let at = rng.random_range((centre - 2.0 * width)..(centre + 2.0 * width)) * per_hour;
        let depth = rng.random_range(0.15..0.35);
        let w = rng.random_range(0.6..1.2);
        for (i, v) in base.iter_mut().enumerate() {
            *v *= 1.0 - depth * gauss(i as f64, at, w);
        }
    }
    let want_event = spec.event.unwrap_or_else(|| rng.random_bool(0.25));
    let event = want_event.then(|| {
        let core: Vec<usize> = (0..len).filter(|&i| envelope[i] >= 0.75).collect();
        let k = core[rng.random_range(0..core.len())];
        for (i, v) in base.iter_mut().enumerate() {
            *v *= 1.0 - 0.7 * gauss(i as f64, k as f64, 0.8);
        }
        k
    });
    Draft {
        base,
        envelope,
        weather: Some(weather),
        volatility,
        shape: Shape::Bell,
        user_type: None,
        event,
        peak,
    }
}

fn draft_load(spec: &ScenarioSpec, len: usize, rng: &mut ChaCha8Rng) -> Draft {
    let user = spec.user_type.unwrap_or_else(|| pick(UserType::ALL, rng));
    let shape = spec.shape.unwrap_or(match user {
        UserType::Industrial => Shape::Plateau,
        UserType::Residential if rng.random_bool(0.5) => Shape::EveningPeak,
        UserType::Residential => Shape::DoublePeak,
    });
    let volatility = spec
        .volatility
        .unwrap_or_else(|| pick(Volatility::ALL, rng));
    let peak = spec.peak.unwrap_or_else(|| rng.random_range(0.3..=1.0));
    let floor = rng.random_range(0.25..0.45);
    let lift = 1.0 - floor;
    let base: Vec<f64> = match shape {
        Shape::Plateau | Shape::Bell => {
            let on = rng.random_range(7.0..9.0);
            let off = rng.random_range(17.0..19.0);
            let edge = rng.random_range(0.3..0.6);
            (0..len)
                .map(|i| {
                    let h = hour(i, len);
                    floor + lift * logistic((h - on) / edge) * logistic((off - h) / edge)
                })
                .collect()
        }
        Shape::EveningPeak | Shape::DoublePeak => {
            let (m_at, m_w) = (rng.random_range(7.0..8.5), rng.random_range(0.8..1.3));
            let m_height = if shape == Shape::DoublePeak {
                lift * rng.random_range(0.45..0.7)
            } else {
                0.15 * lift
            };
            let (e_at, e_w) = (rng.random_range(19.5..21.0), rng.random_range(1.2..2.0));
            (0..len)
                .map(|i| {
                    let h = hour(i, len);
                    floor + m_height * gauss(h, m_at, m_w) + lift * gauss(h, e_at, e_w)
                })
                .collect()
        }
    };
    Draft {
        envelope: vec![1.0; len],
        base,
        weather: None,
        volatility,
        shape,
        user_type: Some(user),
        event: None,
        peak,
    }
}

/// Adds `scale`-weighted noise, clips at zero and rescales to the target
/// peak.
fn finish(d: &Draft, noise: &[f64], scale: f64) -> Vec<f64> {
    let y: Vec<f64> = d
        .base
        .iter()
        .zip(noise)
        .zip(&d.envelope)
        .map(|((b, n), e)| (b + scale * n * e).max(0.0))
        .collect();
    let top = y.iter().copied().fold(0.0, f64::max);
    y.iter().map(|v| (v * d.peak / top).min(1.0)).collect()
}

/// Smallest noise scale whose residual ramp rate reaches `target`, by
/// bracketing and bisection.
fn fit_noise(d: &Draft, noise: &[f64], target: f64) -> Result<Option<f64>> {
    let f = |s: f64| residual_marr(&finish(d, noise, s));
    if f(0.0)? > target {
        return Ok(None);
    }
    let mut hi = 0.01;
    let mut grow = 0;
    while f(hi)? < target {
        hi *= 2.0;
        grow += 1;
        if grow > 30 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// One scenario under `spec`; labels are measured from the final series.
pub fn synth_scenario(
    kind: Kind,
    spec: &ScenarioSpec,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Scenario> {
    if len < MIN_LEN {
        return Err(Error::Argument(format!(
            "series length {len} below {MIN_LEN}"
        )));
    }
    if let Some(p) = spec.peak {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Argument(format!("peak {p} outside (0, 1]")));
        }
    }
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let d = match kind {
            Kind::Pv => draft_pv(spec, len, rng),
            Kind::Load => draft_load(spec, len, rng),
        };
        let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let (lo, hi) = band(d.volatility);
        let target = rng.random_range(lo..hi);
        let series = match fit_noise(&d, &noise, target)? {
            Some(s) => finish(&d, &noise, s),
            None => {
                last = Some((finish(&d, &noise, 0.0), d));
                continue;
            }
        };
        let peak_at = argmax(&series);
        let evening_ok =
            !matches!(d.shape, Shape::EveningPeak | Shape::DoublePeak) || peak_at >= 3 * len / 4;
        let event_ok = d
            .event
            .is_none_or(|k| dip_depth(&series, k) >= EVENT_MIN_DEPTH);
        let shape_ok = shape_correlation(&series, &template(d.shape, len)) >= SHAPE_MIN_CORR;
        if evening_ok && event_ok && shape_ok {
            return Ok(label(kind, series, d));
        }
        last = Some((series, d));
    }
    let (series, mut d) = last.expect("at least one attempt");
    d.volatility = classify_volatility(residual_marr(&series)?);
    d.event = d
        .event
        .filter(|&k| dip_depth(&series, k) >= EVENT_MIN_DEPTH);
    Ok(label(kind, series, d))
}

fn label(kind: Kind, series: Vec<f64>, d: Draft) -> Scenario {
    let peak_time_index = argmax(&series);
    Scenario {
        id: String::new(),
        kind,
        metadata: Metadata {
            weather: d.weather,
            peak: series[peak_time_index],
            peak_time_index,
            volatility: d.volatility,
            shape: d.shape,
            user_type: d.user_type,
            event: d.event.map(|dip_at| Event { dip_at }),
        },
        series,
        prompt: None,
    }
}

/// `n` scenarios with ids `{kind}-{index:06}`. Prompts are rendered when
/// `len` is a multiple of 4 (the statistical report needs quarters).
pub fn synth_dataset(kind: Kind, n: usize, len: usize, seed: u64) -> Result<Vec<Scenario>> {
    synth_dataset_with(kind, &ScenarioSpec::default(), n, len, seed)
}

pub fn synth_dataset_with(
    kind: Kind,
    spec: &ScenarioSpec,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Scenario>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be positive".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, purpose::SYNTH, i as u64));
            let mut s = synth_scenario(kind, spec, len, &mut rng)?;
            s.id = format!("{kind}-{i:06}");
            if len % 4 == 0 {
                s.prompt = Some(annotate(&s, &stat_report(&s.series)?));
            }
            Ok(s)
        })
        .collect()
}

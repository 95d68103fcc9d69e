//! Rule-based judge: scores a series against the metadata of the prompt it
//! was meant to follow.

use serde::{Deserialize, Serialize};

use super::scenario::Metadata;
use super::stats::{classify_volatility, moving_average, residual_marr, TREND_WINDOW};
use super::synth::{dip_depth, template};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub peak_score: u8,
    pub volatility_score: u8,
    pub shape_score: u8,
    /// Present only when the prompt names an event.
    pub event_score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    pub components: Components,
    pub justification: String,
}

/// Score for an absolute peak error.
pub fn peak_band(delta: f64) -> u8 {
    match delta {
        d if d <= 0.05 => 5,
        d if d <= 0.10 => 4,
        d if d <= 0.20 => 3,
        d if d <= 0.35 => 2,
        _ => 1,
    }
}

fn correlation_band(r: f64) -> u8 {
    match r {
        r if r >= 0.8 => 5,
        r if r >= 0.6 => 4,
        r if r >= 0.4 => 3,
        r if r >= 0.2 => 2,
        _ => 1,
    }
}

fn depth_band(d: f64) -> u8 {
    match d {
        d if d >= 0.25 => 5,
        d if d >= 0.15 => 4,
        d if d >= 0.08 => 3,
        d if d >= 0.03 => 2,
        _ => 1,
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Best correlation of the smoothed series with the template under circular
/// shifts of up to an eighth of a day.
pub fn shape_correlation(x: &[f64], reference: &[f64]) -> f64 {
    let s = moving_average(x, TREND_WINDOW);
    let n = s.len();
    let reach = (n / 8) as isize;
    let mut shifted = vec![0.0; n];
    let mut best = f64::NEG_INFINITY;
    for k in -reach..=reach {
        for (i, v) in shifted.iter_mut().enumerate() {
            *v = reference[(i as isize + k).rem_euclid(n as isize) as usize];
        }
        best = best.max(pearson(&s, &shifted));
    }
    best
}

pub fn judge(x: &[f64], target: Option<&Metadata>) -> Result<JudgeVerdict> {
    let m = target.ok_or_else(|| Error::Argument("prompt carries no metadata".into()))?;
    if x.len() < 4 {
        return Err(Error::Argument(format!(
            "series of length {} is too short",
            x.len()
        )));
    }
    m.validate(x.len())?;
    let measured_peak = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let peak_score = peak_band((measured_peak - m.peak).abs());

    let rmarr = residual_marr(x)?;
    let class = classify_volatility(rmarr);
    let volatility_score = match class.rank().abs_diff(m.volatility.rank()) {
        0 => 5,
        1 => 3,
        _ => 1,
    };

    let corr = shape_correlation(x, &template(m.shape, x.len()));
    let shape_score = correlation_band(corr);

    let event = m.event.map(|e| (e.dip_at, dip_depth(x, e.dip_at)));
    let event_score = event.map(|(_, d)| depth_band(d));

    let mut parts = vec![peak_score, volatility_score, shape_score];
    parts.extend(event_score);
    let mean = parts.iter().map(|&p| p as f64).sum::<f64>() / parts.len() as f64;
    let mut justification = format!(
        "peak {measured_peak:.3} vs target {:.3} ({peak_score}); \
         residual ramp rate {rmarr:.4} reads {class} vs {} ({volatility_score}); \
         {} correlation {corr:.3} ({shape_score})",
        m.peak, m.volatility, m.shape
    );
    if let (Some((at, depth)), Some(score)) = (event, event_score) {
        justification.push_str(&format!("; dip depth {depth:.3} at index {at} ({score})"));
    }
    Ok(JudgeVerdict {
        score: mean.round() as u8,
        components: Components {
            peak_score,
            volatility_score,
            shape_score,
            event_score,
        },
        justification,
    })
}

/// Mean judge score over samples.
pub fn mjas(verdicts: &[JudgeVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::Argument("no verdicts to average".into()));
    }
    Ok(verdicts.iter().map(|v| v.score as f64).sum::<f64>() / verdicts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::scenario::{Kind, Shape, Volatility, Weather};
    use crate::agents::synth::{synth_dataset, synth_scenario, ScenarioSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn verdict(score: u8) -> JudgeVerdict {
        JudgeVerdict {
            score,
            components: Components {
                peak_score: score,
                volatility_score: score,
                shape_score: score,
                event_score: None,
            },
            justification: String::new(),
        }
    }

    #[test]
    fn bands() {
        assert_eq!(peak_band(0.0), 5);
        assert_eq!(peak_band(0.05), 5);
        assert_eq!(peak_band(0.07), 4);
        assert_eq!(peak_band(0.2), 3);
        assert_eq!(peak_band(0.3), 2);
        assert_eq!(peak_band(0.8), 1);
    }

    #[test]
    fn generator_samples_score_five() {
        for kind in [Kind::Pv, Kind::Load] {
            for s in synth_dataset(kind, 40, 64, 11).unwrap() {
                let v = judge(&s.series, Some(&s.metadata)).unwrap();
                assert_eq!(v.score, 5, "{}: {}", s.id, v.justification);
            }
        }
    }

    #[test]
    fn flat_series_misses_the_peak() {
        let s = synth_dataset(Kind::Pv, 1, 64, 2).unwrap().remove(0);
        let mut m = s.metadata.clone();
        m.peak = 0.8;
        let v = judge(&[0.0; 64], Some(&m)).unwrap();
        assert_eq!(v.components.peak_score, 1);
    }

    #[test]
    fn stable_series_against_high_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ScenarioSpec {
            weather: Some(Weather::Sunny),
            ..Default::default()
        };
        let s = synth_scenario(Kind::Pv, &spec, 64, &mut rng).unwrap();
        assert_eq!(s.metadata.volatility, Volatility::Stable);
        let mut m = s.metadata.clone();
        m.volatility = Volatility::High;
        assert!(
            judge(&s.series, Some(&m))
                .unwrap()
                .components
                .volatility_score
                <= 2
        );
    }

    #[test]
    fn missing_metadata_is_an_argument_error() {
        assert!(matches!(judge(&[0.0; 8], None), Err(Error::Argument(_))));
    }

    #[test]
    fn shape_tracks_template() {
        let bell = template(Shape::Bell, 64);
        assert!(shape_correlation(&bell, &bell) > 0.99);
        let plateau = template(Shape::Plateau, 64);
        assert!(shape_correlation(&bell, &plateau) < shape_correlation(&bell, &bell));
    }

    #[test]
    fn mjas_examples() {
        assert_eq!(mjas(&[verdict(5), verdict(5)]).unwrap(), 5.0);
        assert_eq!(mjas(&[verdict(5), verdict(3)]).unwrap(), 4.0);
        assert_eq!(mjas(&[verdict(2)]).unwrap(), 2.0);
        assert!(mjas(&[]).is_err());
    }
}

//! Scenario records, ground-truth metadata and the dataset file format.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Snake-case label as used in files.
            pub fn label(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.label() == s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

label_enum!(Kind { Pv => "pv", Load => "load" });

label_enum!(Weather {
    Sunny => "sunny",
    SunnyWithClouds => "sunny_with_clouds",
    Cloudy => "cloudy",
    Rainy => "rainy",
    Stormy => "stormy",
});

label_enum!(
    /// Ordered from calm to volatile.
    Volatility { Stable => "stable", Moderate => "moderate", High => "high" }
);

label_enum!(Shape {
    Bell => "bell",
    Plateau => "plateau",
    EveningPeak => "evening_peak",
    DoublePeak => "double_peak",
});

label_enum!(UserType { Industrial => "industrial", Residential => "residential" });

impl Volatility {
    pub fn rank(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub dip_at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<Weather>,
    pub peak: f64,
    pub peak_time_index: usize,
    pub volatility: Volatility,
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_type: Option<UserType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<Event>,
}

impl Metadata {
    /// Checks ranges against a series length.
    pub fn validate(&self, len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(0.0..=1.0).contains(&self.peak) {
            return bad(format!("peak {} outside [0, 1]", self.peak));
        }
        if self.peak_time_index >= len {
            return bad(format!(
                "peak index {} beyond length {len}",
                self.peak_time_index
            ));
        }
        if let Some(e) = self.event {
            if e.dip_at >= len {
                return bad(format!("dip index {} beyond length {len}", e.dip_at));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub kind: Kind,
    pub series: Vec<f64>,
    pub metadata: Metadata,
    #[serde(default)]
    pub prompt: Option<String>,
}

impl Scenario {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.series.is_empty() {
            return Err("empty series".into());
        }
        if let Some(i) = self.series.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("value {} at {i} outside [0, 1]", self.series[i]));
        }
        self.metadata
            .validate(self.series.len())
            .map_err(|e| e.to_string())
    }
}

/// Writes one JSON record per line.
pub fn write_dataset(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a dataset file; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scenario = serde_json::from_str(&line).map_err(|e| Error::Format {
            record: format!("line {}", n + 1),
            reason: e.to_string(),
        })?;
        s.validate().map_err(|reason| Error::Format {
            record: s.id.clone(),
            reason,
        })?;
        out.push(s);
    }
    Ok(out)
}

/// `HH:MM` of sample `index` in a day of `len` samples.
pub fn clock(index: usize, len: usize) -> String {
    let minutes = index * 1440 / len.max(1);
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> Scenario {
        Scenario {
            id: "pv-1".into(),
            kind: Kind::Pv,
            series: vec![0.0, 0.5, 0.8, 0.1],
            metadata: Metadata {
                weather: Some(Weather::SunnyWithClouds),
                peak: 0.8,
                peak_time_index: 2,
                volatility: Volatility::Moderate,
                shape: Shape::Bell,
                user_type: None,
                event: Some(Event { dip_at: 1 }),
            },
            prompt: Some("A day.".into()),
        }
    }

    #[test]
    fn labels_round_trip() {
        for w in Weather::ALL {
            assert_eq!(Weather::parse(w.label()), Some(*w));
            let json = serde_json::to_string(w).unwrap();
            assert_eq!(json, format!("\"{}\"", w.label()));
        }
        assert!(Volatility::Stable.rank() < Volatility::High.rank());
        assert_eq!(Shape::parse("evening_peak"), Some(Shape::EveningPeak));
        assert_eq!(Shape::parse("spiky"), None);
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        let s = scenario();
        write_dataset(&p, &[s.clone(), s.clone()]).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    #[test]
    fn invalid_records_name_themselves() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        let mut s = scenario();
        s.series[0] = 1.5;
        write_dataset(&p, &[s]).unwrap();
        match read_dataset(&p) {
            Err(Error::Format { record, .. }) => assert_eq!(record, "pv-1"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "{\"id\": 3}\n").unwrap();
        match read_dataset(&p) {
            Err(Error::Format { record, .. }) => assert_eq!(record, "line 1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clock_examples() {
        assert_eq!(clock(32, 64), "12:00");
        assert_eq!(clock(0, 64), "00:00");
        assert_eq!(clock(63, 64), "23:37");
        assert_eq!(clock(30, 96), "07:30");
    }
}

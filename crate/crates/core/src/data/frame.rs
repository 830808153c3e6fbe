use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDateTime, TimeZone, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical channel names accepted by the ingestion schema.
pub const CANONICAL_CHANNELS: [&str; 11] = [
    "ghi",
    "dni",
    "dhi",
    "temp",
    "pressure",
    "rh",
    "dew_point",
    "wind_dir",
    "wind_speed",
    "albedo",
    "power_kw",
];

pub const POWER_CHANNEL: &str = "power_kw";

/// Maps CSV headers onto canonical channel names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Header of the timestamp column.
    pub timestamp: String,
    /// CSV header → canonical channel name, in output order.
    pub columns: IndexMap<String, String>,
    /// Canonical channel name → unit string.
    #[serde(default)]
    pub units: IndexMap<String, String>,
    /// Offset applied to timestamps that carry no zone, in minutes east of UTC.
    #[serde(default)]
    pub utc_offset_minutes: i32,
}

impl CsvSchema {
    /// Schema for a file whose headers already are canonical channel names.
    pub fn identity<'a>(timestamp: &str, channels: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            timestamp: timestamp.to_string(),
            columns: channels
                .into_iter()
                .map(|c| (c.to_string(), c.to_string()))
                .collect(),
            units: IndexMap::new(),
            utc_offset_minutes: 0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::invalid("schema maps no channel columns"));
        }
        for channel in self.columns.values() {
            if !CANONICAL_CHANNELS.contains(&channel.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown channel {channel:?}; expected one of {CANONICAL_CHANNELS:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Timestamped rows of named numeric channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<DateTime<Utc>>,
    channels: IndexMap<String, Vec<f64>>,
    units: IndexMap<String, String>,
}

impl TimeSeriesFrame {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        channels: IndexMap<String, Vec<f64>>,
        units: IndexMap<String, String>,
    ) -> Result<Self> {
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "timestamps not strictly increasing at {}",
                w[1]
            )));
        }
        for (name, values) in &channels {
            if values.len() != timestamps.len() {
                return Err(Error::invalid(format!(
                    "channel {name} has {} values for {} timestamps",
                    values.len(),
                    timestamps.len()
                )));
            }
        }
        Ok(Self {
            timestamps,
            channels,
            units,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    pub fn channels(&self) -> &IndexMap<String, Vec<f64>> {
        &self.channels
    }

    pub fn units(&self) -> &IndexMap<String, String> {
        &self.units
    }

    /// Spacing between the first two rows.
    pub fn step(&self) -> Option<Duration> {
        (self.timestamps.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn is_uniform(&self) -> bool {
        match self.step() {
            Some(step) => self.timestamps.windows(2).all(|w| w[1] - w[0] == step),
            None => true,
        }
    }

    /// Rows `start..end` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            channels: self
                .channels
                .iter()
                .map(|(k, v)| (k.clone(), v[start..end].to_vec()))
                .collect(),
            units: self.units.clone(),
        }
    }

    fn select_rows(&self, keep: &[usize]) -> Self {
        Self {
            timestamps: keep.iter().map(|&i| self.timestamps[i]).collect(),
            channels: self
                .channels
                .iter()
                .map(|(k, v)| (k.clone(), keep.iter().map(|&i| v[i]).collect()))
                .collect(),
            units: self.units.clone(),
        }
    }

    /// Writes the frame as CSV with a `timestamp` column in RFC 3339 form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(w, "timestamp").map_err(io)?;
        for name in self.channels.keys() {
            write!(w, ",{name}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for (i, ts) in self.timestamps.iter().enumerate() {
            write!(w, "{}", ts.format("%Y-%m-%dT%H:%M:%SZ")).map_err(io)?;
            for values in self.channels.values() {
                write!(w, ",{}", values[i]).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn parse_timestamp(raw: &str, offset: FixedOffset) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%dT%H:%M:%S",
    ];
    FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(raw, fmt)
            .ok()
            .and_then(|naive| offset.from_local_datetime(&naive).single())
            .map(|dt| dt.with_timezone(&Utc))
    })
}

fn parse_value(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    raw.parse().ok()
}

/// Reads a CSV file into a frame, sorting rows by timestamp.
///
/// Empty cells and `NaN`/`NA` become NaN; any other non-numeric value is an
/// error naming its line.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesFrame> {
    schema.validate()?;
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(format!("missing mapped column {name:?}")))
    };
    let ts_col = find(&schema.timestamp)?;
    let mapped: Vec<(usize, &str)> = schema
        .columns
        .iter()
        .map(|(header, channel)| find(header).map(|i| (i, channel.as_str())))
        .collect::<Result<_>>()?;
    let offset = FixedOffset::east_opt(schema.utc_offset_minutes * 60)
        .ok_or_else(|| Error::invalid("utc_offset_minutes out of range"))?;

    let mut rows: Vec<(DateTime<Utc>, usize, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let raw_ts = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts, offset).ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp {raw_ts:?}"),
        })?;
        let mut values = Vec::with_capacity(mapped.len());
        for &(col, channel) in &mapped {
            let raw = record.get(col).unwrap_or("");
            let v = parse_value(raw).ok_or_else(|| Error::Parse {
                line,
                message: format!("non-numeric value {raw:?} in column {channel}"),
            })?;
            values.push(v);
        }
        rows.push((ts, line, values));
    }
    rows.sort_by_key(|(ts, _, _)| *ts);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Parse {
            line: w[1].1,
            message: format!("duplicate timestamp {}", w[1].0),
        });
    }

    let mut channels: IndexMap<String, Vec<f64>> = mapped
        .iter()
        .map(|&(_, c)| (c.to_string(), Vec::with_capacity(rows.len())))
        .collect();
    if channels.len() != mapped.len() {
        return Err(Error::invalid("schema maps two columns onto one channel"));
    }
    let mut timestamps = Vec::with_capacity(rows.len());
    for (ts, _, values) in rows {
        timestamps.push(ts);
        for (slot, v) in channels.values_mut().zip(values) {
            slot.push(v);
        }
    }
    let units = schema
        .units
        .iter()
        .filter(|(k, _)| channels.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    TimeSeriesFrame::new(timestamps, channels, units)
}

/// Averages consecutive windows of `target_step / native_step` rows.
///
/// Windows start at the first timestamp; each output row carries its window's
/// start time. A trailing partial window is dropped.
pub fn resample_mean(frame: &TimeSeriesFrame, target_step: Duration) -> Result<TimeSeriesFrame> {
    let native = frame
        .step()
        .ok_or_else(|| Error::invalid("resampling needs at least two rows"))?;
    if !frame.is_uniform() {
        return Err(Error::invalid("resampling needs uniformly spaced rows"));
    }
    let (n_ms, t_ms) = (native.num_milliseconds(), target_step.num_milliseconds());
    if t_ms <= 0 || t_ms % n_ms != 0 {
        return Err(Error::invalid(format!(
            "target step {t_ms} ms is not an integer multiple of native step {n_ms} ms"
        )));
    }
    let k = (t_ms / n_ms) as usize;
    let windows = frame.len() / k;
    if windows * k != frame.len() {
        log::warn!(
            "resample_mean: dropping {} trailing rows of a partial window",
            frame.len() - windows * k
        );
    }
    let timestamps = (0..windows).map(|w| frame.timestamps[w * k]).collect();
    let mut channels = IndexMap::new();
    for (name, values) in &frame.channels {
        let mut out = Vec::with_capacity(windows);
        for w in 0..windows {
            let window = &values[w * k..(w + 1) * k];
            if window.iter().any(|v| v.is_nan()) {
                return Err(Error::invalid(format!(
                    "NaN in channel {name} within window starting {}",
                    frame.timestamps[w * k]
                )));
            }
            out.push(window.iter().sum::<f64>() / k as f64);
        }
        channels.insert(name.clone(), out);
    }
    TimeSeriesFrame::new(timestamps, channels, frame.units.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JoinReport {
    pub dropped_weather: usize,
    pub dropped_solar: usize,
}

impl JoinReport {
    pub fn dropped(&self) -> usize {
        self.dropped_weather + self.dropped_solar
    }
}

/// Inner join on timestamps; weather channels first, then solar channels.
pub fn align_join(
    weather: &TimeSeriesFrame,
    solar: &TimeSeriesFrame,
) -> Result<(TimeSeriesFrame, JoinReport)> {
    if let (Some(a), Some(b)) = (weather.step(), solar.step()) {
        if a != b {
            return Err(Error::invalid(format!(
                "step mismatch: weather {a}, solar {b}; resample first"
            )));
        }
    }
    if let Some(dup) = solar.channel_names().find(|c| weather.channels.contains_key(*c)) {
        return Err(Error::invalid(format!("channel {dup} present in both frames")));
    }
    let (mut i, mut j) = (0, 0);
    let (mut keep_w, mut keep_s) = (Vec::new(), Vec::new());
    while i < weather.len() && j < solar.len() {
        match weather.timestamps[i].cmp(&solar.timestamps[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                keep_w.push(i);
                keep_s.push(j);
                i += 1;
                j += 1;
            }
        }
    }
    if keep_w.is_empty() {
        return Err(Error::invalid("weather and solar frames share no timestamps"));
    }
    let report = JoinReport {
        dropped_weather: weather.len() - keep_w.len(),
        dropped_solar: solar.len() - keep_s.len(),
    };
    let w = weather.select_rows(&keep_w);
    let s = solar.select_rows(&keep_s);
    let mut channels = w.channels;
    channels.extend(s.channels);
    let mut units = w.units;
    units.extend(s.units);
    Ok((TimeSeriesFrame::new(w.timestamps, channels, units)?, report))
}

/// Drops every row with a NaN in any channel; returns the drop count.
pub fn drop_missing(frame: &TimeSeriesFrame) -> (TimeSeriesFrame, usize) {
    let keep: Vec<usize> = (0..frame.len())
        .filter(|&i| frame.channels.values().all(|v| !v[i].is_nan()))
        .collect();
    let dropped = frame.len() - keep.len();
    (frame.select_rows(&keep), dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ts(minute: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2006, 1, 1, 0, 0, 0).unwrap() + Duration::minutes(minute)
    }

    fn frame(step_min: i64, channel: &str, values: Vec<f64>) -> TimeSeriesFrame {
        let stamps = (0..values.len() as i64).map(|i| ts(i * step_min)).collect();
        let mut ch = IndexMap::new();
        ch.insert(channel.to_string(), values);
        TimeSeriesFrame::new(stamps, ch, IndexMap::new()).unwrap()
    }

    fn ghi_schema() -> CsvSchema {
        let mut columns = IndexMap::new();
        columns.insert("GHI".to_string(), "ghi".to_string());
        CsvSchema {
            timestamp: "Time".into(),
            columns,
            units: IndexMap::new(),
            utc_offset_minutes: 0,
        }
    }

    #[test]
    fn ingests_two_rows() {
        let f = write_tmp("Time,GHI\n2006-01-01 00:30,5.5\n2006-01-01 00:00,1\n");
        let frame = ingest_csv(f.path(), &ghi_schema()).unwrap();
        assert_eq!(frame.len(), 2);
        assert_eq!(frame.channel("ghi").unwrap(), &[1.0, 5.5]);
        assert_eq!(frame.step(), Some(Duration::minutes(30)));
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let f = write_tmp("Time,GHI\n2006-01-01 00:00,1\n2006-01-01 00:30,abc\n");
        match ingest_csv(f.path(), &ghi_schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_timestamp_and_missing_column_rejected() {
        let f = write_tmp("Time,GHI\n2006-01-01T00:00:00Z,1\n2006-01-01 00:00,2\n");
        assert!(matches!(ingest_csv(f.path(), &ghi_schema()), Err(Error::Parse { .. })));
        let f = write_tmp("Time,DNI\n2006-01-01 00:00,1\n");
        assert!(matches!(ingest_csv(f.path(), &ghi_schema()), Err(Error::Csv { .. })));
    }

    #[test]
    fn utc_offset_applies_to_naive_timestamps() {
        let mut schema = ghi_schema();
        schema.utc_offset_minutes = -300;
        let f = write_tmp("Time,GHI\n2006-01-01 00:00,1\n");
        let frame = ingest_csv(f.path(), &schema).unwrap();
        assert_eq!(frame.timestamps()[0], ts(300));
    }

    #[test]
    fn resample_to_thirty_minutes() {
        let f = frame(5, "power_kw", vec![0.0, 0.0, 0.0, 6.0, 6.0, 6.0]);
        let r = resample_mean(&f, Duration::minutes(30)).unwrap();
        assert_eq!(r.channel("power_kw").unwrap(), &[3.0]);
        assert_eq!(r.timestamps()[0], ts(0));
    }

    #[test]
    fn resample_matches_reference_means() {
        let vals = vec![0.3, 1.7, 2.2, 9.1, 4.4, 0.0, 3.3, 8.8, 1.1, 0.5, 7.7, 2.6];
        let f = frame(5, "ghi", vals.clone());
        let r = resample_mean(&f, Duration::minutes(30)).unwrap();
        let reference: Vec<f64> = vals.chunks(6).map(|c| c.iter().sum::<f64>() / 6.0).collect();
        assert_eq!(r.channel("ghi").unwrap(), reference.as_slice());
        assert_eq!(r.timestamps()[1], ts(30));
    }

    #[test]
    fn resample_errors() {
        let f = frame(5, "ghi", vec![1.0; 12]);
        assert!(resample_mean(&f, Duration::minutes(7)).is_err());
        let f = frame(5, "ghi", vec![1.0, f64::NAN, 1.0]);
        assert!(resample_mean(&f, Duration::minutes(15)).is_err());
    }

    #[test]
    fn join_drops_unmatched_rows() {
        let w = frame(30, "ghi", vec![1.0, 2.0, 3.0]);
        let s = frame(30, "power_kw", vec![5.0, 6.0, 7.0]);
        let (j, rep) = align_join(&w, &s).unwrap();
        assert_eq!(j.len(), 3);
        assert_eq!(rep.dropped(), 0);

        let s2 = s.slice(1, 3);
        let (j, rep) = align_join(&w, &s2).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(rep.dropped(), 1);
        assert_eq!(j.channel("ghi").unwrap(), &[2.0, 3.0]);
        assert_eq!(j.channel("power_kw").unwrap(), &[6.0, 7.0]);
    }

    #[test]
    fn join_without_overlap_is_an_error() {
        let w = frame(30, "ghi", vec![1.0, 2.0]);
        let s = frame(30, "power_kw", vec![1.0, 2.0, 3.0, 4.0]).slice(2, 4);
        assert!(align_join(&w, &s).is_err());
    }

    #[test]
    fn shuffled_csv_joins_like_sorted_csv() {
        let sorted = "Time,GHI\n2006-01-01 00:00,1\n2006-01-01 00:30,2\n2006-01-01 01:00,3\n";
        let shuffled = "Time,GHI\n2006-01-01 01:00,3\n2006-01-01 00:00,1\n2006-01-01 00:30,2\n";
        let a = ingest_csv(write_tmp(sorted).path(), &ghi_schema()).unwrap();
        let b = ingest_csv(write_tmp(shuffled).path(), &ghi_schema()).unwrap();
        let s = frame(30, "power_kw", vec![0.0, 1.0, 2.0]);
        assert_eq!(align_join(&a, &s).unwrap(), align_join(&b, &s).unwrap());
    }

    #[test]
    fn drop_missing_counts() {
        let f = frame(30, "ghi", vec![1.0, f64::NAN, 3.0]);
        let (clean, dropped) = drop_missing(&f);
        assert_eq!(dropped, 1);
        assert_eq!(clean.channel("ghi").unwrap(), &[1.0, 3.0]);
    }

    #[test]
    fn csv_round_trip() {
        let f = frame(30, "ghi", vec![1.25, 0.1, 3.0]);
        let out = tempfile::NamedTempFile::new().unwrap();
        f.write_csv(out.path()).unwrap();
        let back = ingest_csv(out.path(), &CsvSchema::identity("timestamp", ["ghi"])).unwrap();
        assert_eq!(back, f);
    }

    proptest::proptest! {
        #[test]
        fn resampling_preserves_totals(vals in proptest::collection::vec(0.0f64..1000.0, 6..60)) {
            let n = vals.len() / 6 * 6;
            let f = frame(5, "ghi", vals[..n].to_vec());
            let r = resample_mean(&f, Duration::minutes(30)).unwrap();
            let before: f64 = vals[..n].iter().sum();
            let after: f64 = r.channel("ghi").unwrap().iter().sum::<f64>() * 6.0;
            proptest::prop_assert!((before - after).abs() <= 1e-9 * before.abs().max(1.0));
        }
    }
}

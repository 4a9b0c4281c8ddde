//! Check-in parsing, sessionization into daily trajectories, and user
//! filtering.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeZone, Timelike};
use thiserror::Error;

/// Number of half-hour bins in a civil day.
pub const TIME_BINS: usize = 48;

/// Minimum trajectories a user needs to be retained.
pub const MIN_TRAJECTORIES: usize = 3;

/// Minimum visits a day needs to count as a trajectory.
pub const MIN_VISITS: usize = 2;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("required column `{0}` missing from header")]
    MissingColumn(String),
    #[error("line {line}: {reason}")]
    InvalidLine { line: u64, reason: String },
    #[error("category map line {line}: {reason}")]
    CategoryMap { line: u64, reason: String },
    #[error("trajectory store line {line}: {reason}")]
    Store { line: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckinRecord {
    pub user_id: String,
    pub timestamp: DateTime<FixedOffset>,
    pub latitude: f64,
    pub longitude: f64,
    pub venue_id: Option<String>,
    pub raw_category: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimestampFormat {
    /// Integer epoch seconds if the field is all digits, RFC 3339 or a naive
    /// ISO-8601 date-time otherwise.
    #[default]
    Auto,
    Iso8601,
    EpochSeconds,
}

/// Column layout of a delimiter-separated check-in file.
#[derive(Clone, Debug)]
pub struct FormatConfig {
    pub delimiter: u8,
    pub user_column: String,
    pub timestamp_column: String,
    pub latitude_column: String,
    pub longitude_column: String,
    pub venue_column: Option<String>,
    pub category_column: Option<String>,
    pub timestamp_format: TimestampFormat,
    /// Offset applied to timestamps that carry none (naive or epoch).
    pub default_offset: FixedOffset,
    /// Fail on the first invalid line instead of counting it.
    pub strict: bool,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            delimiter: b',',
            user_column: "user_id".into(),
            timestamp_column: "timestamp".into(),
            latitude_column: "latitude".into(),
            longitude_column: "longitude".into(),
            venue_column: Some("venue_id".into()),
            category_column: Some("category".into()),
            timestamp_format: TimestampFormat::Auto,
            default_offset: FixedOffset::east_opt(0).expect("zero offset"),
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvalidLine {
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCheckins {
    pub records: Vec<CheckinRecord>,
    pub invalid: Vec<InvalidLine>,
}

impl ParsedCheckins {
    pub fn total_lines(&self) -> usize {
        self.records.len() + self.invalid.len()
    }
}

fn parse_timestamp(
    raw: &str,
    format: TimestampFormat,
    default_offset: FixedOffset,
) -> Result<DateTime<FixedOffset>, String> {
    let raw = raw.trim();
    let epoch = |s: &str| -> Result<DateTime<FixedOffset>, String> {
        let secs: i64 = s.parse().map_err(|_| format!("bad epoch seconds `{s}`"))?;
        default_offset
            .timestamp_opt(secs, 0)
            .single()
            .ok_or_else(|| format!("epoch seconds out of range `{s}`"))
    };
    let iso = |s: &str| -> Result<DateTime<FixedOffset>, String> {
        if let Ok(t) = DateTime::parse_from_rfc3339(s) {
            return Ok(t);
        }
        for fmt in [
            "%Y-%m-%dT%H:%M:%S%.f",
            "%Y-%m-%d %H:%M:%S%.f",
            "%Y-%m-%dT%H:%M",
        ] {
            if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
                return default_offset
                    .from_local_datetime(&n)
                    .single()
                    .ok_or_else(|| format!("ambiguous local time `{s}`"));
            }
        }
        Err(format!("unparseable timestamp `{s}`"))
    };
    match format {
        TimestampFormat::EpochSeconds => epoch(raw),
        TimestampFormat::Iso8601 => iso(raw),
        TimestampFormat::Auto => {
            let digits = raw.strip_prefix('-').unwrap_or(raw);
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                epoch(raw)
            } else {
                iso(raw)
            }
        }
    }
}

fn parse_coordinate(raw: &str, name: &str, bound: f64) -> Result<f64, String> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("bad {name} `{raw}`"))?;
    if !v.is_finite() || v.abs() > bound {
        return Err(format!("{name} {v} outside [-{bound}, {bound}]"));
    }
    Ok(v)
}

fn non_empty(s: Option<&str>) -> Option<String> {
    s.map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
}

/// Reads a headed, delimiter-separated check-in stream.
///
/// Invalid lines are collected with their line number unless
/// `cfg.strict` is set, in which case the first one aborts the parse.
pub fn parse_checkins<R: Read>(
    reader: R,
    cfg: &FormatConfig,
) -> Result<ParsedCheckins, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
    };
    let optional = |name: &Option<String>| -> Result<Option<usize>, IngestError> {
        match name {
            Some(n) => Ok(headers.iter().position(|h| h.trim() == n)),
            None => Ok(None),
        }
    };
    let user = column(&cfg.user_column)?;
    let ts = column(&cfg.timestamp_column)?;
    let lat = column(&cfg.latitude_column)?;
    let lon = column(&cfg.longitude_column)?;
    let venue = optional(&cfg.venue_column)?;
    let category = optional(&cfg.category_column)?;

    let mut out = ParsedCheckins::default();
    let mut row = csv::StringRecord::new();
    loop {
        let mut line = rdr.position().line();
        let parsed = match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => (|| -> Result<CheckinRecord, String> {
                line = row.position().map_or(line, |p| p.line());
                let field = |i: usize| row.get(i).ok_or_else(|| format!("missing field {}", i + 1));
                let user_id = field(user)?.trim();
                if user_id.is_empty() {
                    return Err("empty user id".into());
                }
                Ok(CheckinRecord {
                    user_id: user_id.to_owned(),
                    timestamp: parse_timestamp(
                        field(ts)?,
                        cfg.timestamp_format,
                        cfg.default_offset,
                    )?,
                    latitude: parse_coordinate(field(lat)?, "latitude", 90.0)?,
                    longitude: parse_coordinate(field(lon)?, "longitude", 180.0)?,
                    venue_id: non_empty(venue.and_then(|i| row.get(i))),
                    raw_category: non_empty(category.and_then(|i| row.get(i))),
                })
            })(),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) if cfg.strict => return Err(IngestError::InvalidLine { line, reason }),
            Err(reason) => out.invalid.push(InvalidLine { line, reason }),
        }
    }
    Ok(out)
}

/// Reads the public Foursquare NYC/TKY dump: tab-separated, no header,
/// columns user, venue, category id, category name, latitude, longitude,
/// timezone offset in minutes, UTC time (`Tue Apr 03 18:00:09 +0000 2012`).
pub fn parse_foursquare_tsv<R: Read>(
    reader: R,
    strict: bool,
) -> Result<ParsedCheckins, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_reader(reader);
    let mut out = ParsedCheckins::default();
    let mut row = csv::StringRecord::new();
    loop {
        let mut line = rdr.position().line();
        let parsed = match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => (|| -> Result<CheckinRecord, String> {
                line = row.position().map_or(line, |p| p.line());
                if row.len() < 8 {
                    return Err(format!("expected 8 fields, got {}", row.len()));
                }
                let offset_min: i32 = row[6]
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad offset `{}`", &row[6]))?;
                let offset = FixedOffset::east_opt(offset_min * 60).ok_or("offset out of range")?;
                let utc = DateTime::parse_from_str(row[7].trim(), "%a %b %d %H:%M:%S %z %Y")
                    .map_err(|e| format!("bad time `{}`: {e}", &row[7]))?;
                Ok(CheckinRecord {
                    user_id: row[0].trim().to_owned(),
                    timestamp: utc.with_timezone(&offset),
                    latitude: parse_coordinate(&row[4], "latitude", 90.0)?,
                    longitude: parse_coordinate(&row[5], "longitude", 180.0)?,
                    venue_id: non_empty(Some(&row[1])),
                    raw_category: non_empty(Some(&row[3])),
                })
            })(),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) if strict => return Err(IngestError::InvalidLine { line, reason }),
            Err(reason) => out.invalid.push(InvalidLine { line, reason }),
        }
    }
    Ok(out)
}

/// Writes records in the headed comma-separated layout `parse_checkins`
/// reads with the default [`FormatConfig`].
pub fn write_checkins<W: Write>(writer: W, records: &[CheckinRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "user_id",
        "timestamp",
        "latitude",
        "longitude",
        "venue_id",
        "category",
    ])?;
    for r in records {
        w.write_record([
            r.user_id.as_str(),
            &r.timestamp.to_rfc3339(),
            &r.latitude.to_string(),
            &r.longitude.to_string(),
            r.venue_id.as_deref().unwrap_or(""),
            r.raw_category.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Identity of a place: the venue id when present, otherwise the coordinates
/// rounded to four decimals (about 11 m) as `"lat:lon"`.
pub fn assign_location_key(record: &CheckinRecord) -> String {
    match &record.venue_id {
        Some(v) => v.clone(),
        None => grid_key(record.latitude, record.longitude),
    }
}

fn fixed4(x: f64) -> String {
    let q = (x * 1e4).round() as i64;
    let sign = if q < 0 { "-" } else { "" };
    let a = q.unsigned_abs();
    format!("{sign}{}.{:04}", a / 10_000, a % 10_000)
}

pub fn grid_key(latitude: f64, longitude: f64) -> String {
    format!("{}:{}", fixed4(latitude), fixed4(longitude))
}

/// Half-hour slot of the local civil day, `0..48`.
pub fn time_bin(timestamp: &DateTime<FixedOffset>) -> usize {
    ((timestamp.hour() * 60 + timestamp.minute()) / 30) as usize
}

/// Ten semantic place classes; unmapped raw categories land in the last one.
pub const DEFAULT_CLASSES: [&str; 10] = [
    "residential",
    "education",
    "food",
    "transportation",
    "medical",
    "office",
    "personal services",
    "government",
    "outdoor and recreation",
    "others",
];

const DEFAULT_TABLE: &str = include_str!("../data/default_categories.csv");

/// Raw category string to class index.
#[derive(Clone, Debug)]
pub struct CategoryMap {
    classes: Vec<String>,
    table: HashMap<String, usize>,
    others: usize,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

impl CategoryMap {
    /// Parses a two-column table `raw_category,class`. `#` starts a comment
    /// line; an optional header naming `raw_category` is skipped.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let classes: Vec<String> = DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect();
        let mut table = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            table.insert(normalize(c), i);
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 2 {
                return Err(IngestError::CategoryMap {
                    line,
                    reason: format!("expected 2 columns, got {}", row.len()),
                });
            }
            let (raw, class) = (row[0].trim(), row[1].trim());
            if raw.eq_ignore_ascii_case("raw_category") {
                continue;
            }
            let idx = classes
                .iter()
                .position(|c| c.eq_ignore_ascii_case(class))
                .ok_or_else(|| IngestError::CategoryMap {
                    line,
                    reason: format!("unknown class `{class}`"),
                })?;
            table.insert(normalize(raw), idx);
        }
        let others = classes.len() - 1;
        Ok(Self {
            classes,
            table,
            others,
        })
    }

    pub fn default_table() -> &'static str {
        DEFAULT_TABLE
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn others(&self) -> usize {
        self.others
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn map_category(&self, raw: Option<&str>) -> usize {
        raw.and_then(|r| self.table.get(&normalize(r)).copied())
            .unwrap_or(self.others)
    }
}

impl Default for CategoryMap {
    fn default() -> Self {
        Self::from_reader(DEFAULT_TABLE.as_bytes()).expect("bundled category table is valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub location_key: String,
    pub category: usize,
    pub timestamp: DateTime<FixedOffset>,
    pub latitude: f64,
    pub longitude: f64,
}

impl Visit {
    pub fn bin(&self) -> usize {
        time_bin(&self.timestamp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DailyTrajectory {
    pub user_id: String,
    pub date: NaiveDate,
    pub visits: Vec<Visit>,
}

impl DailyTrajectory {
    pub fn movements(&self) -> usize {
        self.visits.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub trajectories: Vec<DailyTrajectory>,
}

impl UserHistory {
    pub fn movement_count(&self) -> usize {
        self.trajectories
            .iter()
            .map(DailyTrajectory::movements)
            .sum()
    }
}

/// Where each record of a sessionized user ended up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionCounts {
    pub kept: usize,
    pub collapsed: usize,
    pub dropped_singleton_day: usize,
}

impl SessionCounts {
    pub fn total(&self) -> usize {
        self.kept + self.collapsed + self.dropped_singleton_day
    }

    fn add(&mut self, other: SessionCounts) {
        self.kept += other.kept;
        self.collapsed += other.collapsed;
        self.dropped_singleton_day += other.dropped_singleton_day;
    }
}

/// Splits one user's records into daily trajectories.
///
/// Records are ordered by instant, ties broken by offset, location key,
/// raw category and coordinates, so input order never matters. A record at the same
/// location and time bin as the previous kept visit, or at the same instant,
/// is collapsed into it. Days left with fewer than two visits are dropped.
pub fn sessionize(
    records: &[&CheckinRecord],
    categories: &CategoryMap,
) -> (Vec<DailyTrajectory>, SessionCounts) {
    let mut sorted: Vec<&CheckinRecord> = records.to_vec();
    sorted.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| {
                a.timestamp
                    .offset()
                    .local_minus_utc()
                    .cmp(&b.timestamp.offset().local_minus_utc())
            })
            .then_with(|| assign_location_key(a).cmp(&assign_location_key(b)))
            .then_with(|| a.raw_category.cmp(&b.raw_category))
            .then_with(|| a.latitude.total_cmp(&b.latitude))
            .then_with(|| a.longitude.total_cmp(&b.longitude))
    });
    let mut counts = SessionCounts::default();
    let mut days: Vec<DailyTrajectory> = Vec::new();
    let mut current: Option<DailyTrajectory> = None;

    let close =
        |day: DailyTrajectory, counts: &mut SessionCounts, days: &mut Vec<DailyTrajectory>| {
            if day.visits.len() >= MIN_VISITS {
                counts.kept += day.visits.len();
                days.push(day);
            } else {
                counts.dropped_singleton_day += day.visits.len();
            }
        };

    for r in sorted {
        let date = r.timestamp.date_naive();
        let visit = Visit {
            location_key: assign_location_key(r),
            category: categories.map_category(r.raw_category.as_deref()),
            timestamp: r.timestamp,
            latitude: r.latitude,
            longitude: r.longitude,
        };
        match current.as_mut() {
            Some(day) if day.date == date => {
                let last = day.visits.last().expect("days start with a visit");
                let duplicate = (last.location_key == visit.location_key
                    && last.bin() == visit.bin())
                    || last.timestamp == visit.timestamp;
                if duplicate {
                    counts.collapsed += 1;
                } else {
                    day.visits.push(visit);
                }
            }
            _ => {
                if let Some(day) = current.take() {
                    close(day, &mut counts, &mut days);
                }
                current = Some(DailyTrajectory {
                    user_id: r.user_id.clone(),
                    date,
                    visits: vec![visit],
                });
            }
        }
    }
    if let Some(day) = current.take() {
        close(day, &mut counts, &mut days);
    }
    (days, counts)
}

/// Keeps users with at least three trajectories of at least two visits.
pub fn filter_users(histories: Vec<UserHistory>) -> Vec<UserHistory> {
    histories
        .into_iter()
        .filter_map(|mut h| {
            h.trajectories.retain(|t| t.visits.len() >= MIN_VISITS);
            (h.trajectories.len() >= MIN_TRAJECTORIES).then_some(h)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub input_records: usize,
    pub invalid: usize,
    pub sessions: SessionCounts,
    pub users_seen: usize,
    pub users_kept: usize,
    pub trajectories_kept: usize,
}

impl IngestReport {
    /// kept + collapsed + dropped + invalid == input.
    pub fn is_conserved(&self) -> bool {
        self.sessions.total() + self.invalid == self.input_records
    }
}

/// Groups parsed records by user (first-appearance order), sessionizes and
/// filters them.
pub fn ingest(
    parsed: &ParsedCheckins,
    categories: &CategoryMap,
) -> (Vec<UserHistory>, IngestReport) {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&CheckinRecord>> = HashMap::new();
    for r in &parsed.records {
        by_user
            .entry(r.user_id.as_str())
            .or_insert_with(|| {
                order.push(r.user_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    let mut report = IngestReport {
        input_records: parsed.total_lines(),
        invalid: parsed.invalid.len(),
        users_seen: order.len(),
        ..IngestReport::default()
    };
    let mut histories = Vec::with_capacity(order.len());
    for user in order {
        let (trajectories, counts) = sessionize(&by_user[user], categories);
        report.sessions.add(counts);
        histories.push(UserHistory {
            user_id: user.to_owned(),
            trajectories,
        });
    }
    let histories = filter_users(histories);
    report.users_kept = histories.len();
    report.trajectories_kept = histories.iter().map(|h| h.trajectories.len()).sum();
    (histories, report)
}

const STORE_HEADER: [&str; 8] = [
    "user_id",
    "date",
    "visit",
    "location_key",
    "category",
    "timestamp",
    "latitude",
    "longitude",
];

/// Writes histories as one row per visit.
pub fn write_trajectories<W: Write>(
    writer: W,
    histories: &[UserHistory],
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(STORE_HEADER)?;
    for h in histories {
        for t in &h.trajectories {
            for (i, v) in t.visits.iter().enumerate() {
                w.write_record([
                    h.user_id.as_str(),
                    &t.date.to_string(),
                    &i.to_string(),
                    &v.location_key,
                    &v.category.to_string(),
                    &v.timestamp.to_rfc3339(),
                    &v.latitude.to_string(),
                    &v.longitude.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_trajectories`].
pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<UserHistory>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != STORE_HEADER {
        return Err(IngestError::Store {
            line: 1,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut histories: Vec<UserHistory> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |what: &str| IngestError::Store {
            line,
            reason: format!("bad {what}"),
        };
        let user = &row[0];
        let date: NaiveDate = row[1].parse().map_err(|_| bad("date"))?;
        let visit_index: usize = row[2].parse().map_err(|_| bad("visit index"))?;
        let visit = Visit {
            location_key: row[3].to_owned(),
            category: row[4].parse().map_err(|_| bad("category"))?,
            timestamp: DateTime::parse_from_rfc3339(&row[5]).map_err(|_| bad("timestamp"))?,
            latitude: row[6].parse().map_err(|_| bad("latitude"))?,
            longitude: row[7].parse().map_err(|_| bad("longitude"))?,
        };
        if histories.last().is_none_or(|h| h.user_id != user) {
            histories.push(UserHistory {
                user_id: user.to_owned(),
                trajectories: Vec::new(),
            });
        }
        let h = histories.last_mut().expect("pushed above");
        if visit_index == 0 {
            h.trajectories.push(DailyTrajectory {
                user_id: user.to_owned(),
                date,
                visits: Vec::new(),
            });
        }
        let t = h
            .trajectories
            .last_mut()
            .ok_or_else(|| bad("visit order"))?;
        if t.date != date || t.visits.len() != visit_index {
            return Err(bad("visit order"));
        }
        t.visits.push(visit);
    }
    Ok(histories)
}

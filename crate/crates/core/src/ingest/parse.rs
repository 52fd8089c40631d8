use std::io::Read;

use csv::{ReaderBuilder, StringRecord, Trim};
use serde::{Deserialize, Serialize};

use super::timestamp::{parse_timestamp, TimestampFormat};
use super::{EmissionStandard, FuelType, IngestError, IssueKind, ObmRecord, ParseIssue, RsdPass};

/// Column names of an OBM file. Every field is remappable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObmColumns {
    pub vehicle_id: String,
    pub timestamp: String,
    pub speed: String,
    pub nox_out: String,
    pub q_maf: String,
    pub q_fr: String,
    pub lat: String,
    pub lon: String,
    pub scr_temp: String,
    pub tank_level: String,
}

impl Default for ObmColumns {
    fn default() -> Self {
        Self {
            vehicle_id: "vehicle_id".into(),
            timestamp: "timestamp".into(),
            speed: "speed_kmh".into(),
            nox_out: "nox_ppm".into(),
            q_maf: "maf_kgh".into(),
            q_fr: "fuel_rate_lh".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            scr_temp: "scr_temp_c".into(),
            tank_level: "tank_pct".into(),
        }
    }
}

/// Column names of a remote-sensing file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsdColumns {
    pub vehicle_id: String,
    pub timestamp: String,
    pub site_id: String,
    pub speed: String,
    pub accel: String,
    pub no_ppm: String,
    pub q1: String,
    pub q2: String,
    pub q3_raw: String,
    pub emission_standard: String,
    pub fuel_type: String,
}

impl Default for RsdColumns {
    fn default() -> Self {
        Self {
            vehicle_id: "vehicle_id".into(),
            timestamp: "timestamp".into(),
            site_id: "site_id".into(),
            speed: "speed_kmh".into(),
            accel: "accel_ms2".into(),
            no_ppm: "no_ppm".into(),
            q1: "co_co2".into(),
            q2: "hc_co2".into(),
            q3_raw: "no_co2".into(),
            emission_standard: "standard".into(),
            fuel_type: "fuel".into(),
        }
    }
}

/// Result of parsing one file. `records.len() + issues.len() == rows_read`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutput<T> {
    pub records: Vec<T>,
    pub issues: Vec<ParseIssue>,
    pub rows_read: usize,
}

struct Table {
    header: StringRecord,
    rows: Vec<(u64, Result<StringRecord, String>)>,
}

fn read_table<R: Read>(source: R) -> Result<Table, IngestError> {
    let mut reader = ReaderBuilder::new()
        .flexible(true)
        .trim(Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(IngestError::EmptyFile);
    }
    let mut rows = Vec::new();
    let mut record = StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                if record.iter().all(str::is_empty) {
                    continue;
                }
                let line = record.position().map_or(0, |p| p.line());
                rows.push((line, Ok(record.clone())));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if e.is_io_error() {
                    return Err(e.into());
                }
                rows.push((line, Err(e.to_string())));
            }
        }
    }
    Ok(Table { header, rows })
}

fn column(header: &StringRecord, name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

fn required(header: &StringRecord, name: &str) -> Result<usize, IngestError> {
    column(header, name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

/// Field accessor for one row that turns failures into issues.
struct Row<'a> {
    record: &'a StringRecord,
}

impl Row<'_> {
    fn text(&self, idx: usize, name: &str) -> Result<&str, IssueKind> {
        self.record.get(idx).ok_or_else(|| IssueKind::MissingField {
            column: name.to_string(),
        })
    }

    fn non_empty(&self, idx: usize, name: &str) -> Result<&str, IssueKind> {
        let s = self.text(idx, name)?;
        if s.is_empty() {
            Err(IssueKind::MalformedRow {
                column: name.to_string(),
                value: String::new(),
            })
        } else {
            Ok(s)
        }
    }

    fn number(&self, idx: usize, name: &str) -> Result<f64, IssueKind> {
        let s = self.non_empty(idx, name)?;
        s.parse::<f64>().map_err(|_| IssueKind::MalformedRow {
            column: name.to_string(),
            value: s.to_string(),
        })
    }

    fn non_negative(&self, idx: usize, name: &str) -> Result<f64, IssueKind> {
        let v = self.number(idx, name)?;
        if v < 0.0 {
            Err(IssueKind::NegativeValue {
                column: name.to_string(),
                value: v,
            })
        } else {
            Ok(v)
        }
    }

    fn optional_number(&self, idx: Option<usize>, name: &str) -> Result<Option<f64>, IssueKind> {
        match idx.and_then(|i| self.record.get(i)) {
            None | Some("") => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| IssueKind::MalformedRow {
                    column: name.to_string(),
                    value: s.to_string(),
                }),
        }
    }

    fn timestamp(&self, idx: usize, name: &str, format: TimestampFormat) -> Result<i64, IssueKind> {
        let s = self.non_empty(idx, name)?;
        parse_timestamp(s, format).ok_or_else(|| IssueKind::MalformedRow {
            column: name.to_string(),
            value: s.to_string(),
        })
    }
}

fn detect_format(table: &Table, idx: usize) -> TimestampFormat {
    table
        .rows
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .filter_map(|r| r.get(idx))
        .find(|s| !s.is_empty())
        .map_or(TimestampFormat::EpochSeconds, TimestampFormat::detect)
}

fn collect<T>(
    table: Table,
    mut parse_row: impl FnMut(&Row<'_>) -> Result<T, IssueKind>,
) -> ParseOutput<T> {
    let rows_read = table.rows.len();
    let mut records = Vec::with_capacity(rows_read);
    let mut issues = Vec::new();
    for (line, row) in &table.rows {
        let outcome = match row {
            Ok(record) => parse_row(&Row { record }),
            Err(message) => Err(IssueKind::Unreadable {
                message: message.clone(),
            }),
        };
        match outcome {
            Ok(r) => records.push(r),
            Err(kind) => issues.push(ParseIssue { line: *line, kind }),
        }
    }
    ParseOutput {
        records,
        issues,
        rows_read,
    }
}

/// Parses a delimiter-separated OBM file with a header row.
///
/// Missing required columns and empty input are hard errors; every other
/// problem is reported per row. Parsed records start out valid, range checks
/// happen in [`super::validate_record`].
pub fn parse_obm_file<R: Read>(
    source: R,
    cols: &ObmColumns,
) -> Result<ParseOutput<ObmRecord>, IngestError> {
    let table = read_table(source)?;
    let h = &table.header;
    let vehicle = required(h, &cols.vehicle_id)?;
    let ts = required(h, &cols.timestamp)?;
    let speed = required(h, &cols.speed)?;
    let nox = required(h, &cols.nox_out)?;
    let maf = required(h, &cols.q_maf)?;
    let fr = required(h, &cols.q_fr)?;
    let lat = required(h, &cols.lat)?;
    let lon = required(h, &cols.lon)?;
    let scr = column(h, &cols.scr_temp);
    let tank = column(h, &cols.tank_level);
    let format = detect_format(&table, ts);

    Ok(collect(table, |row| {
        Ok(ObmRecord {
            vehicle_id: row.non_empty(vehicle, &cols.vehicle_id)?.to_string(),
            timestamp: row.timestamp(ts, &cols.timestamp, format)?,
            speed: row.number(speed, &cols.speed)?,
            nox_out: row.number(nox, &cols.nox_out)?,
            q_maf: row.number(maf, &cols.q_maf)?,
            q_fr: row.number(fr, &cols.q_fr)?,
            lat: row.number(lat, &cols.lat)?,
            lon: row.number(lon, &cols.lon)?,
            scr_temp: row.optional_number(scr, &cols.scr_temp)?,
            tank_level: row.optional_number(tank, &cols.tank_level)?,
            valid: true,
        })
    }))
}

/// Parses a delimiter-separated remote-sensing file with a header row.
///
/// Negative speeds, concentrations and gas ratios are row issues. Unknown
/// emission standards and fuels are kept as `Other`.
pub fn parse_rsd_file<R: Read>(
    source: R,
    cols: &RsdColumns,
) -> Result<ParseOutput<RsdPass>, IngestError> {
    let table = read_table(source)?;
    let h = &table.header;
    let vehicle = required(h, &cols.vehicle_id)?;
    let ts = required(h, &cols.timestamp)?;
    let site = required(h, &cols.site_id)?;
    let speed = required(h, &cols.speed)?;
    let accel = required(h, &cols.accel)?;
    let no = required(h, &cols.no_ppm)?;
    let q1 = required(h, &cols.q1)?;
    let q2 = required(h, &cols.q2)?;
    let q3 = required(h, &cols.q3_raw)?;
    let standard = required(h, &cols.emission_standard)?;
    let fuel = required(h, &cols.fuel_type)?;
    let format = detect_format(&table, ts);

    Ok(collect(table, |row| {
        let accel_value = row.number(accel, &cols.accel)?;
        if !accel_value.is_finite() {
            return Err(IssueKind::MalformedRow {
                column: cols.accel.clone(),
                value: accel_value.to_string(),
            });
        }
        Ok(RsdPass {
            vehicle_id: row.non_empty(vehicle, &cols.vehicle_id)?.to_string(),
            timestamp: row.timestamp(ts, &cols.timestamp, format)?,
            site_id: row.text(site, &cols.site_id)?.to_string(),
            speed: row.non_negative(speed, &cols.speed)?,
            accel: accel_value,
            no_ppm: row.non_negative(no, &cols.no_ppm)?,
            q1: row.non_negative(q1, &cols.q1)?,
            q2: row.non_negative(q2, &cols.q2)?,
            q3_raw: row.non_negative(q3, &cols.q3_raw)?,
            emission_standard: EmissionStandard::parse_lenient(
                row.text(standard, &cols.emission_standard)?,
            ),
            fuel_type: FuelType::parse_lenient(row.text(fuel, &cols.fuel_type)?),
        })
    }))
}

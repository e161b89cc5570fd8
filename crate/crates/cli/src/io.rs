//! File formats: metadata headers, atomic writes, and the CSV readers and
//! writers shared by the subcommands.
//!
//! Every output begins with a `#` comment block recording the tool version,
//! the command, the configuration hash and the stage seeds — never a
//! timestamp, so reruns stay byte-identical.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stareal_core::fusion::{
    aggregate_events, EeCount, EventAggregate, EventRecord, IncomeBracket, IncomeBracketTable,
    PointRecord, RegionIncome, ServiceCategory,
};
use stareal_core::glm::{PanelDataset, PanelRow};

use crate::error::{io_input, io_internal, CliError, CliResult};

pub const TOOL: &str = concat!("stareal ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// Metadata block
// ---------------------------------------------------------------------------

/// The provenance block prepended to every output file.
#[derive(Debug, Clone)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seeds: String,
    /// Extra per-file keys (e.g. the log-transformed covariates of a panel).
    pub extras: Vec<(String, String)>,
}

impl Meta {
    pub fn new(command: &str, config_hash: &str, seeds: &str) -> Self {
        Meta {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seeds: seeds.to_string(),
            extras: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.extras.push((key.to_string(), value.to_string()));
        self
    }

    /// `#`-comment rendering for CSV, TOML and plain-text outputs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {TOOL}");
        let _ = writeln!(out, "# command: {}", self.command);
        let _ = writeln!(out, "# config-sha256: {}", self.config_hash);
        let _ = writeln!(out, "# seeds: {}", self.seeds);
        for (key, value) in &self.extras {
            let _ = writeln!(out, "# {key}: {value}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

/// Write through a temp file and rename, so readers never observe a
/// partially written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_internal(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_internal(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_internal(path, e))?;
    Ok(())
}

/// One CSV file: metadata block, header row, data rows.
pub fn write_csv<S: AsRef<str>>(
    path: &Path,
    meta: &Meta,
    header: &[&str],
    rows: &[Vec<S>],
) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)
        .map_err(|e| io_internal(path, e))?;
    for row in rows {
        wtr.write_record(row.iter().map(|f| f.as_ref()))
            .map_err(|e| io_internal(path, e))?;
    }
    let body = wtr
        .into_inner()
        .map_err(|e| io_internal(path, e.to_string()))?;
    let mut bytes = meta.render().into_bytes();
    bytes.extend_from_slice(&body);
    write_atomic(path, &bytes)
}

/// One plain-text file with the metadata block on top.
pub fn write_text(path: &Path, meta: &Meta, body: &str) -> CliResult<()> {
    let mut bytes = meta.render().into_bytes();
    bytes.extend_from_slice(body.as_bytes());
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// CSV reading helpers
// ---------------------------------------------------------------------------

fn csv_reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_input(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_index(path: &Path, headers: &csv::StringRecord, name: &str) -> CliResult<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        CliError::input(format_args!(
            "{}: missing column {name:?} (found: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })
}

/// An input error pinned to the file and line of the offending record.
fn row_err(path: &Path, record: &csv::StringRecord, msg: impl Display) -> CliError {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    CliError::Input(format!("{}:{line}: {msg}", path.display()))
}

fn field<'r>(
    path: &Path,
    record: &'r csv::StringRecord,
    index: usize,
    name: &str,
) -> CliResult<&'r str> {
    record
        .get(index)
        .ok_or_else(|| row_err(path, record, format_args!("missing {name} field")))
}

fn parse_field<T: core::str::FromStr>(
    path: &Path,
    record: &csv::StringRecord,
    index: usize,
    name: &str,
) -> CliResult<T> {
    let raw = field(path, record, index, name)?;
    raw.parse().map_err(|_| {
        row_err(
            path,
            record,
            format_args!("cannot parse {name} from {raw:?}"),
        )
    })
}

// ---------------------------------------------------------------------------
// Service points
// ---------------------------------------------------------------------------

pub fn parse_category(raw: &str) -> Option<ServiceCategory> {
    ServiceCategory::ALL
        .into_iter()
        .find(|c| raw.eq_ignore_ascii_case(c.name()))
}

/// `longitude,latitude,category,source_id`
pub fn read_points(path: &Path) -> CliResult<Vec<PointRecord>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| io_input(path, e))?.clone();
    let c_lon = header_index(path, &headers, "longitude")?;
    let c_lat = header_index(path, &headers, "latitude")?;
    let c_cat = header_index(path, &headers, "category")?;
    let c_id = header_index(path, &headers, "source_id")?;

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| io_input(path, e))?;
        let longitude: f64 = parse_field(path, &record, c_lon, "longitude")?;
        let latitude: f64 = parse_field(path, &record, c_lat, "latitude")?;
        let raw_cat = field(path, &record, c_cat, "category")?;
        let category = parse_category(raw_cat).ok_or_else(|| {
            let names: Vec<&str> = ServiceCategory::ALL.iter().map(|c| c.name()).collect();
            row_err(
                path,
                &record,
                format_args!(
                    "unknown category {raw_cat:?} (expected one of: {})",
                    names.join(", ")
                ),
            )
        })?;
        let source_id = field(path, &record, c_id, "source_id")?.to_string();
        let point = PointRecord::new(longitude, latitude, category, source_id)
            .map_err(|e| row_err(path, &record, e))?;
        out.push(point);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Income tables
// ---------------------------------------------------------------------------

/// Brackets file `region_id,lower,upper,frequency` (empty `upper` marks the
/// open-top bracket) joined with the special-categories file
/// `region_id,negative,nil,not_stated`.
pub fn read_income(brackets_path: &Path, special_path: &Path) -> CliResult<IncomeBracketTable> {
    let mut per_region: BTreeMap<String, Vec<IncomeBracket>> = BTreeMap::new();
    {
        let mut rdr = csv_reader(brackets_path)?;
        let headers = rdr.headers().map_err(|e| io_input(brackets_path, e))?.clone();
        let c_id = header_index(brackets_path, &headers, "region_id")?;
        let c_lower = header_index(brackets_path, &headers, "lower")?;
        let c_upper = header_index(brackets_path, &headers, "upper")?;
        let c_freq = header_index(brackets_path, &headers, "frequency")?;
        for record in rdr.records() {
            let record = record.map_err(|e| io_input(brackets_path, e))?;
            let id = field(brackets_path, &record, c_id, "region_id")?.to_string();
            let lower: f64 = parse_field(brackets_path, &record, c_lower, "lower")?;
            let raw_upper = field(brackets_path, &record, c_upper, "upper")?;
            let upper = if raw_upper.is_empty() {
                None
            } else {
                Some(raw_upper.parse::<f64>().map_err(|_| {
                    row_err(
                        brackets_path,
                        &record,
                        format_args!("cannot parse upper from {raw_upper:?}"),
                    )
                })?)
            };
            let frequency: u64 = parse_field(brackets_path, &record, c_freq, "frequency")?;
            per_region.entry(id).or_default().push(IncomeBracket {
                lower,
                upper,
                frequency,
            });
        }
    }

    let mut special: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    {
        let mut rdr = csv_reader(special_path)?;
        let headers = rdr.headers().map_err(|e| io_input(special_path, e))?.clone();
        let c_id = header_index(special_path, &headers, "region_id")?;
        let c_neg = header_index(special_path, &headers, "negative")?;
        let c_nil = header_index(special_path, &headers, "nil")?;
        let c_ns = header_index(special_path, &headers, "not_stated")?;
        for record in rdr.records() {
            let record = record.map_err(|e| io_input(special_path, e))?;
            let id = field(special_path, &record, c_id, "region_id")?.to_string();
            let negative: u64 = parse_field(special_path, &record, c_neg, "negative")?;
            let nil: u64 = parse_field(special_path, &record, c_nil, "nil")?;
            let not_stated: u64 = parse_field(special_path, &record, c_ns, "not_stated")?;
            if special.insert(id.clone(), (negative, nil, not_stated)).is_some() {
                return Err(row_err(
                    special_path,
                    &record,
                    format_args!("region {id:?} listed twice"),
                ));
            }
        }
    }

    let mut ids: Vec<&String> = per_region.keys().chain(special.keys()).collect();
    ids.sort();
    ids.dedup();
    let ids: Vec<String> = ids.into_iter().cloned().collect();

    let mut table = IncomeBracketTable::new();
    for id in ids {
        let brackets = per_region.remove(&id).unwrap_or_default();
        let (negative, nil, not_stated) = special.get(&id).copied().unwrap_or((0, 0, 0));
        let income = RegionIncome::new(brackets, negative, nil, not_stated).map_err(|e| {
            CliError::input(format_args!(
                "{}: region {id:?}: {e}",
                brackets_path.display()
            ))
        })?;
        table.insert(id, income)?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Event records
// ---------------------------------------------------------------------------

/// Events arrive either pre-aggregated (`region_id,year,count`) or as raw
/// rows (`region_id,date[,indigenous_status][,age_band]`); the header
/// decides.
#[derive(Debug, Clone)]
pub enum EventsInput {
    Raw(Vec<EventRecord>),
    Aggregated(Vec<EeCount>),
}

impl EventsInput {
    /// Roll up to the standard aggregate. Pre-aggregated inputs carry no
    /// status information, so their status series is empty.
    pub fn aggregate(&self) -> CliResult<EventAggregate> {
        match self {
            EventsInput::Raw(rows) => Ok(aggregate_events(rows)?),
            EventsInput::Aggregated(cells) => {
                let mut by_cell: BTreeMap<(String, i32), u64> = BTreeMap::new();
                let mut annual: BTreeMap<i32, u64> = BTreeMap::new();
                for cell in cells {
                    *by_cell
                        .entry((cell.region_id.clone(), cell.year))
                        .or_insert(0) += cell.count;
                    *annual.entry(cell.year).or_insert(0) += cell.count;
                }
                Ok(EventAggregate {
                    cell_counts: by_cell
                        .into_iter()
                        .map(|((region_id, year), count)| EeCount {
                            region_id,
                            year,
                            count,
                        })
                        .collect(),
                    annual_totals: annual.into_iter().collect(),
                    status_counts: Vec::new(),
                })
            }
        }
    }

}

/// Year of an event date: `YYYY` or `YYYY-MM-DD`.
fn event_year(raw: &str) -> Option<i32> {
    let (head, rest) = raw.split_at_checked(4)?;
    let year: i32 = head.parse().ok()?;
    if rest.is_empty() {
        return Some(year);
    }
    let bytes = rest.as_bytes();
    if bytes.len() != 6 || bytes[0] != b'-' || bytes[3] != b'-' {
        return None;
    }
    let month: u32 = rest[1..3].parse().ok()?;
    let day: u32 = rest[4..6].parse().ok()?;
    ((1..=12).contains(&month) && (1..=31).contains(&day)).then_some(year)
}

pub fn read_events(path: &Path) -> CliResult<EventsInput> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| io_input(path, e))?.clone();
    let c_id = header_index(path, &headers, "region_id")?;
    let has = |name: &str| headers.iter().position(|h| h == name);

    if let Some(c_count) = has("count") {
        let c_year = header_index(path, &headers, "year")?;
        let mut out = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| io_input(path, e))?;
            let region_id = field(path, &record, c_id, "region_id")?.to_string();
            if region_id.is_empty() {
                return Err(row_err(path, &record, "empty region id"));
            }
            let year: i32 = parse_field(path, &record, c_year, "year")?;
            let count: u64 = parse_field(path, &record, c_count, "count")?;
            out.push(EeCount {
                region_id,
                year,
                count,
            });
        }
        return Ok(EventsInput::Aggregated(out));
    }

    let Some(c_date) = has("date") else {
        return Err(CliError::input(format_args!(
            "{}: events need either a count column (region_id,year,count) or a \
             date column (region_id,date[,indigenous_status][,age_band])",
            path.display()
        )));
    };
    let c_status = has("indigenous_status");
    let c_age = has("age_band");
    let optional = |record: &csv::StringRecord, col: Option<usize>| -> Option<String> {
        let raw = col.and_then(|c| record.get(c)).unwrap_or("");
        (!raw.is_empty()).then(|| raw.to_string())
    };

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| io_input(path, e))?;
        let region_id = field(path, &record, c_id, "region_id")?.to_string();
        if region_id.is_empty() {
            return Err(row_err(path, &record, "empty region id"));
        }
        let raw_date = field(path, &record, c_date, "date")?;
        let year = event_year(raw_date).ok_or_else(|| {
            row_err(
                path,
                &record,
                format_args!("cannot parse date {raw_date:?} (expected YYYY or YYYY-MM-DD)"),
            )
        })?;
        out.push(EventRecord {
            region_id,
            year,
            indigenous_status: optional(&record, c_status),
            age_band: optional(&record, c_age),
        });
    }
    Ok(EventsInput::Raw(out))
}

// ---------------------------------------------------------------------------
// Exclusion lists
// ---------------------------------------------------------------------------

/// One region id per line; `#` starts a comment.
pub fn read_exclusions(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_input(path, e))?;
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if !line.is_empty() && !out.iter().any(|seen| seen == line) {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Panel round-trip
// ---------------------------------------------------------------------------

/// `region_id,year,count,offset,<covariate columns>`, with the count-like
/// covariates (those log-transformed downstream) recorded in the metadata
/// block. Floats use the shortest round-trip rendering, so a written panel
/// reloads bit-for-bit.
pub fn write_panel(
    path: &Path,
    meta: &Meta,
    panel: &PanelDataset,
    region_ids: &[String],
    base_year: i32,
) -> CliResult<()> {
    if panel.transform.is_some() {
        return Err(CliError::internal(
            "refusing to write a standardised panel; write the raw covariates",
        ));
    }
    for name in &panel.covariate_names {
        if name.contains(',') {
            return Err(CliError::internal(format_args!(
                "covariate name {name:?} contains a comma"
            )));
        }
    }
    let log_names: Vec<&str> = panel
        .covariate_names
        .iter()
        .zip(&panel.transform_log)
        .filter(|(_, &flag)| flag)
        .map(|(name, _)| name.as_str())
        .collect();
    let meta = meta
        .clone()
        .with("log-covariates", log_names.join(","));

    let mut header = vec!["region_id", "year", "count", "offset"];
    header.extend(panel.covariate_names.iter().map(|n| n.as_str()));

    let mut rows = Vec::with_capacity(panel.rows.len());
    for row in &panel.rows {
        let id = region_ids.get(row.region_index).ok_or_else(|| {
            CliError::internal(format_args!(
                "panel row references region index {} but only {} ids are known",
                row.region_index,
                region_ids.len()
            ))
        })?;
        let mut record = vec![
            id.clone(),
            (base_year + row.year_index as i32).to_string(),
            row.count.to_string(),
            format!("{}", row.offset),
        ];
        record.extend(row.covariates.iter().map(|v| format!("{v}")));
        rows.push(record);
    }
    write_csv(path, &meta, &header, &rows)
}

/// A panel read back from disk, with its year origin.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: PanelDataset,
    /// Calendar year of `year_index` 0.
    pub base_year: i32,
}

impl LoadedPanel {
    pub fn year_of(&self, year_index: usize) -> i32 {
        self.base_year + year_index as i32
    }
}

/// Read a panel written by [`write_panel`] (or assembled by hand in the
/// same layout). Region ids map to indices via `region_ids`, the geometry
/// order, so panel rows align with the contiguity graph.
pub fn read_panel(path: &Path, region_ids: &[String]) -> CliResult<LoadedPanel> {
    let text = fs::read_to_string(path).map_err(|e| io_input(path, e))?;

    let mut log_names: Vec<String> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# log-covariates:") {
            log_names = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| io_input(path, e))?.clone();
    for (pos, expected) in ["region_id", "year", "count", "offset"].iter().enumerate() {
        if headers.get(pos) != Some(expected) {
            return Err(CliError::input(format_args!(
                "{}: expected column {pos} to be {expected:?}, found {:?}",
                path.display(),
                headers.get(pos).unwrap_or("<missing>")
            )));
        }
    }
    let covariate_names: Vec<String> = headers.iter().skip(4).map(|h| h.to_string()).collect();
    for name in &log_names {
        if !covariate_names.iter().any(|c| c == name) {
            return Err(CliError::input(format_args!(
                "{}: log-covariates metadata names unknown column {name:?}",
                path.display()
            )));
        }
    }
    let transform_log: Vec<bool> = covariate_names
        .iter()
        .map(|c| log_names.iter().any(|l| l == c))
        .collect();

    let index: BTreeMap<&str, usize> = region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut raw_rows: Vec<(usize, i32, u64, f64, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| io_input(path, e))?;
        let id = field(path, &record, 0, "region_id")?;
        let &region_index = index.get(id).ok_or_else(|| {
            row_err(
                path,
                &record,
                format_args!("region {id:?} is not in the geometry"),
            )
        })?;
        let year: i32 = parse_field(path, &record, 1, "year")?;
        let count: u64 = parse_field(path, &record, 2, "count")?;
        let offset: f64 = parse_field(path, &record, 3, "offset")?;
        let mut covariates = Vec::with_capacity(covariate_names.len());
        for (j, name) in covariate_names.iter().enumerate() {
            covariates.push(parse_field(path, &record, 4 + j, name)?);
        }
        raw_rows.push((region_index, year, count, offset, covariates));
    }
    let base_year = raw_rows
        .iter()
        .map(|r| r.1)
        .min()
        .ok_or_else(|| CliError::input(format_args!("{}: panel has no rows", path.display())))?;

    let rows: Vec<PanelRow> = raw_rows
        .into_iter()
        .map(|(region_index, year, count, offset, covariates)| PanelRow {
            region_index,
            year_index: (year - base_year) as usize,
            count,
            offset,
            covariates,
        })
        .collect();
    let panel = PanelDataset::new(rows, covariate_names, transform_log)
        .map_err(|e| CliError::input(format_args!("{}: {e}", path.display())))?;
    Ok(LoadedPanel { panel, base_year })
}

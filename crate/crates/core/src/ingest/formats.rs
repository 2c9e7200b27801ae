//! Delimited text formats. Every file starts with the line
//! `#nextloc-format v1`, followed by a CSV header and records.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::staypoints::RawPing;
use super::{
    CityDataset, CoordKind, DatasetOptions, IngestError, Location, LocationId, UserTrajectory, VisitRecord,
};
use crate::geo::{self, GeoPoint, MercatorPoint};
use crate::poi::{PoiCatalog, PoiCategory, PoiProfile};

pub const FORMAT_HEADER: &str = "#nextloc-format v1";

pub const PINGS_HEADER: &[&str] = &["user_id", "timestamp", "lon", "lat"];
pub const VISITS_HEADER: &[&str] = &["user_id", "location_id", "arrive_ts", "day_of_week", "hour", "duration_min"];
pub const LOCATIONS_GEO_HEADER: &[&str] = &["location_id", "center_lon", "center_lat", "grid_row", "grid_col"];
pub const LOCATIONS_GRID_HEADER: &[&str] = &["location_id", "grid_row", "grid_col"];
pub const LOCATIONS_PLANAR_HEADER: &[&str] = &["location_id", "x_m", "y_m", "grid_row", "grid_col"];
pub const CATALOG_HEADER: &[&str] = &["category_id", "name", "description"];
pub const PROFILES_HEADER: &[&str] = &["location_id", "category_id", "count"];

pub const LOCATIONS_FILE: &str = "locations.csv";
pub const VISITS_FILE: &str = "visits.csv";
pub const CATALOG_FILE: &str = "poi_catalog.csv";
pub const PROFILES_FILE: &str = "poi_profiles.csv";

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, line: usize, msg: impl Into<String>) -> IngestError {
    IngestError::Format { path: path.display().to_string(), line, msg: msg.into() }
}

/// Checks the version line and returns the CSV header plus the body reader.
fn open(path: &Path) -> Result<(Vec<String>, csv::Reader<std::io::Cursor<String>>), IngestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim_end() != FORMAT_HEADER {
        return Err(IngestError::MissingHeader(path.display().to_string()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::Cursor::new(rest.to_string()));
    let header = rdr
        .headers()
        .map_err(|e| fmt_err(path, 2, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    Ok((header, rdr))
}

fn read_rows<T: DeserializeOwned>(path: &Path, expect: &[&str]) -> Result<Vec<T>, IngestError> {
    let (header, mut rdr) = open(path)?;
    if header != expect {
        return Err(fmt_err(path, 2, format!("expected header {}", expect.join(","))));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| fmt_err(path, i + 3, e.to_string())))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| fmt_err(path, 2, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| fmt_err(path, 0, e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| fmt_err(path, 0, e.to_string()))?;
    let mut out = format!("{FORMAT_HEADER}\n").into_bytes();
    out.extend(body);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct PingRow {
    user_id: String,
    timestamp: i64,
    lon: f64,
    lat: f64,
}

/// Parses a ping file. Structurally broken lines are errors; pings with
/// invalid coordinates are passed through for the staypoint stage to count.
pub fn read_pings(path: &Path) -> Result<Vec<RawPing>, IngestError> {
    let rows: Vec<PingRow> = read_rows(path, PINGS_HEADER)?;
    Ok(rows
        .into_iter()
        .map(|r| RawPing { user_id: r.user_id, timestamp: r.timestamp, position: GeoPoint { lon: r.lon, lat: r.lat } })
        .collect())
}

pub fn write_pings(path: &Path, pings: &[RawPing]) -> Result<(), IngestError> {
    write_rows(
        path,
        PINGS_HEADER,
        pings.iter().map(|p| PingRow {
            user_id: p.user_id.clone(),
            timestamp: p.timestamp,
            lon: p.position.lon,
            lat: p.position.lat,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct VisitRow {
    user_id: String,
    location_id: LocationId,
    arrive_ts: i64,
    day_of_week: u8,
    hour: u8,
    duration_min: f64,
}

/// Visits grouped per user (ordered by user id), each sorted by arrival.
pub fn read_visits(path: &Path) -> Result<Vec<UserTrajectory>, IngestError> {
    let rows: Vec<VisitRow> = read_rows(path, VISITS_HEADER)?;
    let mut by_user: BTreeMap<String, Vec<VisitRecord>> = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let v = VisitRecord {
            location_id: r.location_id,
            day_of_week: r.day_of_week,
            hour: r.hour,
            duration_min: r.duration_min,
            arrive_ts: r.arrive_ts,
        };
        v.validate().map_err(|e| fmt_err(path, i + 3, e.to_string()))?;
        by_user.entry(r.user_id).or_default().push(v);
    }
    Ok(by_user
        .into_iter()
        .map(|(user_id, mut visits)| {
            visits.sort_by_key(|v| v.arrive_ts);
            UserTrajectory { user_id, visits }
        })
        .collect())
}

pub fn write_visits(path: &Path, users: &[UserTrajectory]) -> Result<(), IngestError> {
    write_rows(
        path,
        VISITS_HEADER,
        users.iter().flat_map(|u| {
            u.visits.iter().map(move |v| VisitRow {
                user_id: u.user_id.clone(),
                location_id: v.location_id,
                arrive_ts: v.arrive_ts,
                day_of_week: v.day_of_week,
                hour: v.hour,
                duration_min: v.duration_min,
            })
        }),
    )
}

/// Grid geometry of datasets shipped as grid indices only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationRow {
    pub id: LocationId,
    pub center: MercatorPoint,
    pub grid_row: i64,
    pub grid_col: i64,
}

/// Reads any of the three location layouts. Grid-index tables are placed
/// on a virtual grid centered on the origin; when `grid` is `None` its
/// dimensions are inferred from the largest indices and `default_cell_m`.
pub fn read_locations(
    path: &Path,
    grid: Option<VirtualGrid>,
    default_cell_m: f64,
) -> Result<(Vec<LocationRow>, CoordKind), IngestError> {
    let (header, _) = open(path)?;
    if header == LOCATIONS_GEO_HEADER {
        #[derive(Deserialize)]
        struct Row {
            location_id: LocationId,
            center_lon: f64,
            center_lat: f64,
            grid_row: i64,
            grid_col: i64,
        }
        let rows: Vec<Row> = read_rows(path, LOCATIONS_GEO_HEADER)?;
        let out = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let p = GeoPoint { lon: r.center_lon, lat: r.center_lat };
                let center = geo::to_mercator(p).map_err(|e| fmt_err(path, i + 3, e.to_string()))?;
                Ok(LocationRow { id: r.location_id, center, grid_row: r.grid_row, grid_col: r.grid_col })
            })
            .collect::<Result<_, IngestError>>()?;
        Ok((out, CoordKind::Geographic))
    } else if header == LOCATIONS_PLANAR_HEADER {
        #[derive(Deserialize)]
        struct Row {
            location_id: LocationId,
            x_m: f64,
            y_m: f64,
            grid_row: i64,
            grid_col: i64,
        }
        let rows: Vec<Row> = read_rows(path, LOCATIONS_PLANAR_HEADER)?;
        Ok((
            rows.into_iter()
                .map(|r| LocationRow {
                    id: r.location_id,
                    center: MercatorPoint::new(r.x_m, r.y_m),
                    grid_row: r.grid_row,
                    grid_col: r.grid_col,
                })
                .collect(),
            CoordKind::Virtual,
        ))
    } else if header == LOCATIONS_GRID_HEADER {
        #[derive(Deserialize)]
        struct Row {
            location_id: LocationId,
            grid_row: i64,
            grid_col: i64,
        }
        let rows: Vec<Row> = read_rows(path, LOCATIONS_GRID_HEADER)?;
        if rows.iter().any(|r| r.grid_row < 0 || r.grid_col < 0) {
            return Err(fmt_err(path, 0, "grid indices must be non-negative"));
        }
        let grid = grid.unwrap_or_else(|| VirtualGrid {
            rows: rows.iter().map(|r| r.grid_row as usize + 1).max().unwrap_or(1),
            cols: rows.iter().map(|r| r.grid_col as usize + 1).max().unwrap_or(1),
            cell_m: default_cell_m,
        });
        Ok((
            rows.into_iter()
                .map(|r| LocationRow {
                    id: r.location_id,
                    center: super::virtual_center(grid.rows, grid.cols, grid.cell_m, r.grid_row, r.grid_col),
                    grid_row: r.grid_row,
                    grid_col: r.grid_col,
                })
                .collect(),
            CoordKind::Virtual,
        ))
    } else {
        Err(fmt_err(path, 2, format!("unrecognized location header {}", header.join(","))))
    }
}

pub fn write_locations(path: &Path, locations: &[Location], kind: CoordKind) -> Result<(), IngestError> {
    match kind {
        CoordKind::Geographic => {
            let rows = locations.iter().map(|l| {
                let g = geo::from_mercator(l.center);
                (l.id, g.lon, g.lat, l.grid_row, l.grid_col)
            });
            write_rows(path, LOCATIONS_GEO_HEADER, rows)
        }
        CoordKind::Virtual => {
            let rows = locations.iter().map(|l| (l.id, l.center.x, l.center.y, l.grid_row, l.grid_col));
            write_rows(path, LOCATIONS_PLANAR_HEADER, rows)
        }
    }
}

pub fn read_catalog(path: &Path) -> Result<PoiCatalog, IngestError> {
    #[derive(Deserialize)]
    struct Row {
        category_id: usize,
        name: String,
        description: String,
    }
    let rows: Vec<Row> = read_rows(path, CATALOG_HEADER)?;
    PoiCatalog::new(
        rows.into_iter()
            .map(|r| PoiCategory { id: r.category_id, name: r.name, description: r.description })
            .collect(),
    )
    .map_err(|e| fmt_err(path, 0, e.to_string()))
}

pub fn write_catalog(path: &Path, catalog: &PoiCatalog) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_writer(Vec::new());
    w.write_record(CATALOG_HEADER).map_err(|e| fmt_err(path, 2, e.to_string()))?;
    for c in &catalog.categories {
        w.serialize((c.id, &c.name, &c.description)).map_err(|e| fmt_err(path, 0, e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| fmt_err(path, 0, e.to_string()))?;
    let mut out = format!("{FORMAT_HEADER}\n").into_bytes();
    out.extend(body);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Sparse `(location, category, count)` triples into dense profiles.
pub fn read_profiles(path: &Path, categories: usize) -> Result<HashMap<LocationId, PoiProfile>, IngestError> {
    #[derive(Deserialize)]
    struct Row {
        location_id: LocationId,
        category_id: usize,
        count: f64,
    }
    let rows: Vec<Row> = read_rows(path, PROFILES_HEADER)?;
    let mut out: HashMap<LocationId, PoiProfile> = HashMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        if r.category_id >= categories {
            return Err(fmt_err(path, i + 3, format!("category {} outside catalog", r.category_id)));
        }
        if !(r.count >= 0.0 && r.count.is_finite()) {
            return Err(fmt_err(path, i + 3, "count must be finite and >= 0"));
        }
        out.entry(r.location_id).or_insert_with(|| PoiProfile::zeros(categories)).freq[r.category_id] += r.count;
    }
    Ok(out)
}

pub fn write_profiles(path: &Path, locations: &[Location]) -> Result<(), IngestError> {
    let rows = locations.iter().flat_map(|l| {
        l.poi.freq.iter().enumerate().filter(|(_, c)| **c > 0.0).map(move |(j, c)| (l.id, j, *c))
    });
    write_rows(path, PROFILES_HEADER, rows)
}

/// Loads `locations.csv` and `visits.csv`, plus the optional POI catalog
/// and profiles, from `dir` and assembles the dataset.
pub fn load_dataset_dir(
    dir: &Path,
    options: DatasetOptions,
    grid: Option<VirtualGrid>,
    default_cell_m: f64,
) -> Result<CityDataset, IngestError> {
    let (rows, kind) = read_locations(&dir.join(LOCATIONS_FILE), grid, default_cell_m)?;
    let catalog_path = dir.join(CATALOG_FILE);
    let catalog = if catalog_path.exists() { read_catalog(&catalog_path)? } else { PoiCatalog::xian_chengdu() };
    let profiles_path = dir.join(PROFILES_FILE);
    let mut profiles =
        if profiles_path.exists() { read_profiles(&profiles_path, catalog.len())? } else { HashMap::new() };
    let locations = rows
        .into_iter()
        .map(|r| Location {
            id: r.id,
            center: r.center,
            grid_row: r.grid_row,
            grid_col: r.grid_col,
            poi: profiles.remove(&r.id).unwrap_or_else(|| PoiProfile::zeros(catalog.len())),
        })
        .collect();
    if let Some(id) = profiles.keys().min() {
        return Err(IngestError::UnknownLocation(*id));
    }
    let users = read_visits(&dir.join(VISITS_FILE))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "city".into());
    CityDataset::assemble(name, kind, locations, catalog, users, options)
}

pub fn write_dataset_dir(dir: &Path, ds: &CityDataset) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_locations(&dir.join(LOCATIONS_FILE), &ds.locations, ds.coord_kind)?;
    write_visits(&dir.join(VISITS_FILE), &ds.users)?;
    write_catalog(&dir.join(CATALOG_FILE), &ds.catalog)?;
    write_profiles(&dir.join(PROFILES_FILE), &ds.locations)
}

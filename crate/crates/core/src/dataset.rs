//! OD records, hidden ground-truth routes, and their CSV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::roadnet::EdgeId;

pub const NUM_WEATHER: usize = 4;
pub const NUM_HOLIDAY: usize = 2;

/// Day-level context codes attached to every OD record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Context {
    pub weather: usize,
    pub holiday: usize,
}

impl Context {
    /// Scales congestion: bad weather adds up to 10%, holidays remove 7%.
    pub fn congestion_multiplier(self) -> f64 {
        (1.0 + 0.1 * self.weather as f64 / (NUM_WEATHER - 1) as f64) * (1.0 - 0.07 * self.holiday as f64)
    }
}

/// One weakly labeled sample: an OD pair with its observed total time.
#[derive(Debug, Clone, PartialEq)]
pub struct ODRecord {
    pub record_index: usize,
    pub origin_edge: EdgeId,
    pub dest_edge: EdgeId,
    pub slot: usize,
    pub weather: usize,
    pub holiday: usize,
    /// Seconds.
    pub observed_t: f64,
}

impl ODRecord {
    pub fn context(&self) -> Context {
        Context { weather: self.weather, holiday: self.holiday }
    }

    pub fn validate(&self, num_edges: usize, slots: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("record {}: {msg}", self.record_index)));
        if self.origin_edge >= num_edges || self.dest_edge >= num_edges {
            return fail(format!("edge out of range ({} / {})", self.origin_edge, self.dest_edge));
        }
        if self.origin_edge == self.dest_edge {
            return fail("origin equals destination".into());
        }
        if self.slot >= slots {
            return fail(format!("slot {} >= {slots}", self.slot));
        }
        if self.weather >= NUM_WEATHER || self.holiday >= NUM_HOLIDAY {
            return fail(format!("context code out of range ({}, {})", self.weather, self.holiday));
        }
        if !(self.observed_t > 0.0 && self.observed_t.is_finite()) {
            return fail(format!("observed time must be > 0, got {}", self.observed_t));
        }
        Ok(())
    }
}

/// Route actually driven for a record; evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripGroundTruth {
    pub record_index: usize,
    pub edges: Vec<EdgeId>,
}

pub const OD_HEADER: [&str; 7] =
    ["record_index", "origin_edge", "dest_edge", "slot", "weather", "holiday", "observed_T"];
pub const ROUTE_HEADER: [&str; 2] = ["record_index", "edges"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

fn field<T: std::str::FromStr>(path: &Path, row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = row.get(i).ok_or_else(|| Error::Parse(format!("{}: missing column {name}", path.display())))?;
    raw.trim().parse().map_err(|_| {
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse(format!("{}: line {line}: bad {name} {raw:?}", path.display()))
    })
}

pub fn write_od_csv(path: impl AsRef<Path>, records: &[ODRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(OD_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.record_index.to_string(),
            r.origin_edge.to_string(),
            r.dest_edge.to_string(),
            r.slot.to_string(),
            r.weather.to_string(),
            r.holiday.to_string(),
            format!("{:.6}", r.observed_t),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_od_csv(path: impl AsRef<Path>) -> Result<Vec<ODRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(OD_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.records()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            Ok(ODRecord {
                record_index: field(path, &row, 0, "record_index")?,
                origin_edge: field(path, &row, 1, "origin_edge")?,
                dest_edge: field(path, &row, 2, "dest_edge")?,
                slot: field(path, &row, 3, "slot")?,
                weather: field(path, &row, 4, "weather")?,
                holiday: field(path, &row, 5, "holiday")?,
                observed_t: field(path, &row, 6, "observed_T")?,
            })
        })
        .collect()
}

/// `record_index,edge|edge|...` rows; shared by ground truth and recovered
/// route exports.
pub fn write_routes_csv(path: impl AsRef<Path>, routes: &[TripGroundTruth]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(ROUTE_HEADER).map_err(|e| csv_err(path, e))?;
    for t in routes {
        let edges = t.edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("|");
        w.write_record([t.record_index.to_string(), edges]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_routes_csv(path: impl AsRef<Path>) -> Result<Vec<TripGroundTruth>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.records()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            let record_index = field(path, &row, 0, "record_index")?;
            let edges = row
                .get(1)
                .unwrap_or("")
                .split('|')
                .map(|e| e.trim().parse().map_err(|_| Error::Parse(format!("{}: bad edge id {e:?}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            Ok(TripGroundTruth { record_index, edges })
        })
        .collect()
}

/// Deterministic train/validation split by hashed record index.
pub fn is_train_record(record_index: usize, train_fraction: f64) -> bool {
    let mut z = (record_index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ((z >> 11) as f64 / (1u64 << 53) as f64) < train_fraction
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("od.csv");
        let recs = vec![
            ODRecord {
                record_index: 0,
                origin_edge: 3,
                dest_edge: 9,
                slot: 1,
                weather: 2,
                holiday: 0,
                observed_t: 123.456789,
            },
            ODRecord {
                record_index: 7,
                origin_edge: 1,
                dest_edge: 0,
                slot: 0,
                weather: 0,
                holiday: 1,
                observed_t: 5.0,
            },
        ];
        write_od_csv(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("record_index,origin_edge,dest_edge,slot,weather,holiday,observed_T\n"));
        assert!(text.contains("0,3,9,1,2,0,123.456789\n"));
        assert_eq!(read_od_csv(&p).unwrap(), recs);
    }

    #[test]
    fn routes_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        let routes = vec![TripGroundTruth { record_index: 4, edges: vec![1, 5, 9] }];
        write_routes_csv(&p, &routes).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("4,1|5|9\n"));
        assert_eq!(read_routes_csv(&p).unwrap(), routes);
    }

    #[test]
    fn record_validation() {
        let mut r = ODRecord {
            record_index: 2,
            origin_edge: 1,
            dest_edge: 1,
            slot: 0,
            weather: 0,
            holiday: 0,
            observed_t: 3.0,
        };
        assert!(r.validate(10, 4).unwrap_err().to_string().contains("record 2"));
        r.dest_edge = 2;
        assert!(r.validate(10, 4).is_ok());
        r.slot = 4;
        assert!(r.validate(10, 4).is_err());
        r.slot = 0;
        r.observed_t = 0.0;
        assert!(r.validate(10, 4).is_err());
    }

    #[test]
    fn split_is_deterministic_and_roughly_balanced() {
        let train = (0..10_000).filter(|&i| is_train_record(i, 0.8)).count();
        assert!((7_700..8_300).contains(&train), "{train}");
        assert_eq!(is_train_record(42, 0.8), is_train_record(42, 0.8));
    }

    #[test]
    fn context_multiplier_range() {
        assert_eq!(Context::default().congestion_multiplier(), 1.0);
        let hi = Context { weather: 3, holiday: 0 }.congestion_multiplier();
        let lo = Context { weather: 0, holiday: 1 }.congestion_multiplier();
        assert!((hi - 1.1).abs() < 1e-12 && (lo - 0.93).abs() < 1e-12);
    }
}

use std::collections::HashMap;
use std::fmt::Write as _;

use csv::{ErrorKind, ReaderBuilder, StringRecord, Trim};

use super::{Coords, Dataset, Fingerprint, PositionLabel, Record, MAX_RSSI_DBM, MIN_RSSI_DBM, SENTINEL_DBM};
use crate::error::{Error, Result};

const LABEL_COLUMNS: [&str; 4] = ["LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID"];

/// `WAP001`, `WAP002`, ... for 1-based access point numbers.
pub fn wap_column_name(index: usize) -> String {
    format!("WAP{index:03}")
}

struct Layout {
    wap: Vec<usize>,
    longitude: usize,
    latitude: usize,
    floor: usize,
    building: usize,
    names: Vec<String>,
}

impl Layout {
    fn from_header(header: &StringRecord) -> Result<Self> {
        let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
        let position: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

        let wap_count = names
            .iter()
            .filter(|n| n.len() > 3 && n.starts_with("WAP") && n[3..].bytes().all(|b| b.is_ascii_digit()))
            .count();
        if wap_count == 0 {
            return Err(Error::MissingColumn {
                column: wap_column_name(1),
            });
        }
        let mut wap = Vec::with_capacity(wap_count);
        for i in 1..=wap_count {
            let name = wap_column_name(i);
            match position.get(name.as_str()) {
                Some(&col) => wap.push(col),
                None => return Err(Error::MissingColumn { column: name }),
            }
        }

        let column = |name: &str| {
            position.get(name).copied().ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
        };
        let [longitude, latitude, floor, building] = LABEL_COLUMNS.map(column);
        Ok(Self {
            wap,
            longitude: longitude?,
            latitude: latitude?,
            floor: floor?,
            building: building?,
            names,
        })
    }
}

fn cell<T: std::str::FromStr>(row: &StringRecord, col: usize, line: u64, layout: &Layout) -> Result<T> {
    let raw = row.get(col).unwrap_or("");
    raw.parse::<T>().map_err(|_| Error::Parse {
        line,
        column: layout.names[col].clone(),
        message: format!("cannot parse `{raw}` as a number"),
    })
}

/// Parses UJIIndoorLoc-format CSV text. The access-point count is the number
/// of `WAPnnn` columns, which must be numbered contiguously from `WAP001`.
/// `SPACEID`, `RELATIVEPOSITION`, `USERID`, `PHONEID`, `TIMESTAMP` and any
/// other extra columns are ignored. Record ids are 0-based data-row indices.
pub fn parse_ujiindoorloc(csv_text: &str) -> Result<Dataset> {
    let mut reader = ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(Trim::All)
        .from_reader(csv_text.as_bytes());
    let layout = Layout::from_header(reader.headers()?)?;

    let mut records = Vec::new();
    let (mut max_floor, mut max_building) = (0u32, 0u32);
    for (row_index, row) in reader.records().enumerate() {
        let row = row.map_err(|e| match e.kind() {
            ErrorKind::UnequalLengths { pos, expected_len, len } => Error::RaggedRow {
                line: pos.as_ref().map_or(row_index as u64 + 2, |p| p.line()),
                expected: *expected_len as usize,
                found: *len as usize,
            },
            _ => Error::Csv(e),
        })?;
        let line = row.position().map_or(row_index as u64 + 2, |p| p.line());

        let mut rssi = Vec::with_capacity(layout.wap.len());
        for &col in &layout.wap {
            let v: f64 = cell(&row, col, line, &layout)?;
            if v != SENTINEL_DBM && !(MIN_RSSI_DBM..=MAX_RSSI_DBM).contains(&v) {
                return Err(Error::Parse {
                    line,
                    column: layout.names[col].clone(),
                    message: format!(
                        "RSSI {v} outside [{MIN_RSSI_DBM}, {MAX_RSSI_DBM}] and not the sentinel {SENTINEL_DBM}"
                    ),
                });
            }
            rssi.push(v);
        }
        let longitude: f64 = cell(&row, layout.longitude, line, &layout)?;
        let latitude: f64 = cell(&row, layout.latitude, line, &layout)?;
        for (v, col) in [(longitude, layout.longitude), (latitude, layout.latitude)] {
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    column: layout.names[col].clone(),
                    message: "coordinate is not finite".into(),
                });
            }
        }
        let floor: u32 = cell(&row, layout.floor, line, &layout)?;
        let building: u32 = cell(&row, layout.building, line, &layout)?;
        max_floor = max_floor.max(floor);
        max_building = max_building.max(building);

        records.push(Record {
            id: row_index as u64,
            fingerprint: Fingerprint::new(rssi),
            label: PositionLabel {
                position: Coords::new(longitude, latitude),
                floor,
                building,
            },
        });
    }

    let (floors, buildings) = if records.is_empty() {
        (0, 0)
    } else {
        (max_floor + 1, max_building + 1)
    };
    Dataset::new(records, layout.wap.len(), floors, buildings)
}

/// Canonical re-serialization in the UJIIndoorLoc column layout:
/// `WAP001..WAPnnn,LONGITUDE,LATITUDE,FLOOR,BUILDINGID`, shortest
/// round-tripping decimal formatting, LF line endings. Only raw (dBm)
/// datasets can be written.
pub fn to_ujiindoorloc_csv(dataset: &Dataset) -> Result<String> {
    if let Some(scheme) = dataset.normalization() {
        return Err(Error::State(format!(
            "cannot write a {}-normalized dataset in the dBm schema",
            scheme.as_str()
        )));
    }
    let mut out = String::new();
    for i in 1..=dataset.num_aps() {
        out.push_str(&wap_column_name(i));
        out.push(',');
    }
    out.push_str(&LABEL_COLUMNS.join(","));
    out.push('\n');
    for r in dataset.records() {
        for v in r.fingerprint.values() {
            write!(out, "{v},").unwrap();
        }
        let l = &r.label;
        writeln!(
            out,
            "{},{},{},{}",
            l.position.longitude, l.position.latitude, l.floor, l.building
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(w: usize, extra: &str) -> String {
        let mut cols: Vec<String> = (1..=w).map(wap_column_name).collect();
        cols.extend(LABEL_COLUMNS.iter().map(|s| s.to_string()));
        if !extra.is_empty() {
            cols.push(extra.to_string());
        }
        cols.join(",")
    }

    #[test]
    fn all_sentinel_row() {
        let row = vec!["100"; 520].join(",") + ",-7541.26,4864921.0,2,1";
        let ds = parse_ujiindoorloc(&format!("{}\n{row}\n", header(520, ""))).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_aps(), 520);
        assert!(ds.records()[0].fingerprint.values().iter().all(|&v| v == SENTINEL_DBM));
        assert_eq!((ds.num_floors(), ds.num_buildings()), (3, 2));
    }

    #[test]
    fn missing_label_column_is_named() {
        let text = "WAP001,WAP002,LONGITUDE,LATITUDE,FLOOR\n-50,100,1,2,0\n";
        match parse_ujiindoorloc(text) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "BUILDINGID"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_in_wap_numbering_is_missing_column() {
        let text = "WAP001,WAP003,LONGITUDE,LATITUDE,FLOOR,BUILDINGID\n-50,100,1,2,0,0\n";
        match parse_ujiindoorloc(text) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "WAP002"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_line_and_column() {
        let text = format!("{}\n-50,100,1,2,0,0\n-50,abc,1,2,0,0\n", header(2, ""));
        match parse_ujiindoorloc(&text) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "WAP002");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_rejected() {
        let text = format!("{}\n-50,100,1,2,0\n", header(2, ""));
        assert!(matches!(
            parse_ujiindoorloc(&text),
            Err(Error::RaggedRow {
                line: 2,
                expected: 6,
                found: 5
            })
        ));
    }

    #[test]
    fn out_of_range_rssi_is_rejected() {
        let text = format!("{}\n-105,100,1,2,0,0\n", header(2, ""));
        assert!(matches!(parse_ujiindoorloc(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn extra_columns_are_ignored() {
        let text = format!("{}\n-50,100,1.5,2.5,0,0,17\n", header(2, "USERID"));
        let ds = parse_ujiindoorloc(&text).unwrap();
        assert_eq!(ds.records()[0].label.position, Coords::new(1.5, 2.5));
    }

    #[test]
    fn normalized_dataset_cannot_be_written() {
        let text = format!("{}\n-50,100,1,2,0,0\n", header(2, ""));
        let ds = super::super::normalize_rssi(
            parse_ujiindoorloc(&text).unwrap(),
            super::super::NormalizationScheme::ZeroPenalty,
        )
        .unwrap();
        assert!(matches!(to_ujiindoorloc_csv(&ds), Err(Error::State(_))));
    }
}

use std::collections::BTreeSet;

use confloc::dataset::{
    generate_synthetic, normalize_rssi, parse_ujiindoorloc, split_dataset, to_ujiindoorloc_csv, wap_column_name,
    Coords, Dataset, Fingerprint, NormalizationScheme, PositionLabel, Record, SplitSpec, SyntheticWorldConfig,
    SENTINEL_DBM,
};
use proptest::prelude::*;

/// Splits on commas and newlines without any CSV machinery.
fn naive_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().parse::<f64>().unwrap()).collect())
        .collect()
}

fn header(w: usize) -> String {
    let mut cols: Vec<String> = (1..=w).map(wap_column_name).collect();
    cols.extend(["LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID"].map(String::from));
    cols.join(",")
}

#[test]
fn hand_written_rows_match_independent_reader() {
    let text = format!(
        "{}\n-45,100,-104,0,-7632.1435,4864982.217,0,1\n100,100,-61.5,-99,-7533.89,4864890.4,3,2\n-1,-2,-3,-4,12.5,-7.25,1,0\n",
        header(4)
    );
    let ds = parse_ujiindoorloc(&text).unwrap();
    let rows = naive_rows(&text);
    assert_eq!(ds.len(), 3);
    for (r, expected) in ds.records().iter().zip(&rows) {
        assert_eq!(r.fingerprint.values(), &expected[..4]);
        assert_eq!(r.label.position, Coords::new(expected[4], expected[5]));
        assert_eq!(f64::from(r.label.floor), expected[6]);
        assert_eq!(f64::from(r.label.building), expected[7]);
    }
    assert_eq!((ds.num_floors(), ds.num_buildings()), (4, 3));
}

#[test]
fn extra_uji_columns_are_ignored() {
    let text = "WAP001,WAP002,LONGITUDE,LATITUDE,FLOOR,BUILDINGID,SPACEID,RELATIVEPOSITION,USERID,PHONEID,TIMESTAMP\n\
                -70,100,1.5,2.5,0,0,106,2,1,23,1371713733\n";
    let ds = parse_ujiindoorloc(text).unwrap();
    assert_eq!(ds.num_aps(), 2);
    assert_eq!(ds.records()[0].fingerprint.values(), &[-70.0, SENTINEL_DBM]);
}

#[test]
fn parse_errors_name_their_location() {
    let missing = "WAP001,LONGITUDE,LATITUDE,FLOOR\n-50,1,2,0\n";
    let err = parse_ujiindoorloc(missing).unwrap_err().to_string();
    assert!(err.contains("BUILDINGID"), "{err}");

    let bad_cell = format!("{}\n-50,abc,1,2,0,0\n", header(2));
    let err = parse_ujiindoorloc(&bad_cell).unwrap_err().to_string();
    assert!(err.contains("WAP002") && err.contains('2'), "{err}");

    let ragged = format!("{}\n-50,-60,1,2,0\n", header(2));
    assert!(parse_ujiindoorloc(&ragged).is_err());
}

fn arbitrary_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 10usize..40).prop_flat_map(|(w, n)| {
        let cell = prop_oneof![Just(SENTINEL_DBM), (-104i32..=0).prop_map(f64::from), -104.0f64..0.0];
        let record = (
            prop::collection::vec(cell, w),
            -8000.0f64..-7000.0,
            4_864_700.0f64..4_865_100.0,
            0u32..5,
            0u32..3,
        );
        prop::collection::vec(record, n).prop_map(move |rows| {
            let records: Vec<Record> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (rssi, lon, lat, floor, building))| Record {
                    id: i as u64,
                    fingerprint: Fingerprint::new(rssi),
                    label: PositionLabel {
                        position: Coords::new(lon, lat),
                        floor,
                        building,
                    },
                })
                .collect();
            let floors = records.iter().map(|r| r.label.floor).max().unwrap() + 1;
            let buildings = records.iter().map(|r| r.label.building).max().unwrap() + 1;
            Dataset::new(records, w, floors, buildings).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialization_round_trips(ds in arbitrary_dataset()) {
        let text = to_ujiindoorloc_csv(&ds).unwrap();
        let back = parse_ujiindoorloc(&text).unwrap();
        prop_assert_eq!(back.records(), ds.records());
        prop_assert_eq!(to_ujiindoorloc_csv(&back).unwrap(), text);
    }

    #[test]
    fn split_partitions_the_records(ds in arbitrary_dataset(), seed in any::<u64>()) {
        let spec = SplitSpec::new(0.6, 0.2, 0.2, seed).unwrap();
        let (train, cal, test) = split_dataset(&ds, &spec).unwrap();
        prop_assert_eq!(train.len() + cal.len() + test.len(), ds.len());
        let ids = |d: &Dataset| d.records().iter().map(|r| r.id).collect::<BTreeSet<_>>();
        let (a, b, c) = (ids(&train), ids(&cal), ids(&test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let union: BTreeSet<u64> = a.union(&b).chain(c.iter()).copied().collect();
        prop_assert_eq!(union, ids(&ds));
        let n = ds.len() as f64;
        prop_assert_eq!(cal.len(), (n * 0.2 + 1e-9).floor() as usize);
        prop_assert_eq!(test.len(), (n * 0.2 + 1e-9).floor() as usize);
    }

    #[test]
    fn zero_penalty_maps_into_unit_interval(ds in arbitrary_dataset()) {
        let raw = ds.clone();
        let norm = normalize_rssi(ds, NormalizationScheme::ZeroPenalty).unwrap();
        prop_assert!(norm.is_normalized());
        for (r, n) in raw.records().iter().zip(norm.records()) {
            for (v, x) in r.fingerprint.values().iter().zip(n.fingerprint.values()) {
                prop_assert!((0.0..=1.0).contains(x));
                if *v == SENTINEL_DBM {
                    prop_assert_eq!(*x, 0.0);
                } else {
                    prop_assert!((x - (v + 104.0) / 104.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn minmax_maps_into_unit_interval(ds in arbitrary_dataset()) {
        let norm = normalize_rssi(ds, NormalizationScheme::MinMaxUnit).unwrap();
        for r in norm.records() {
            prop_assert!(r.fingerprint.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn minmax_three_value_example() {
    // sentinel -> -91, then (v + 91) / 51
    let record = |id, rssi: Vec<f64>| Record {
        id,
        fingerprint: Fingerprint::new(rssi),
        label: PositionLabel {
            position: Coords::new(0.0, 0.0),
            floor: 0,
            building: 0,
        },
    };
    let ds = Dataset::new(vec![record(0, vec![-90.0, -40.0, SENTINEL_DBM])], 3, 1, 1).unwrap();
    let norm = normalize_rssi(ds, NormalizationScheme::MinMaxUnit).unwrap();
    let got = norm.records()[0].fingerprint.values();
    let expected = [1.0 / 51.0, 1.0, 0.0];
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{got:?}");
    }
}

#[test]
fn uji_split_sizes_follow_floor_plus_remainder() {
    let n = 19_937usize;
    let cal = n / 10;
    let test = n / 5;
    assert_eq!((n - cal - test, cal, test), (13_957, 1_993, 3_987));
    assert_eq!(SplitSpec::standard(1).sizes(n), (13_957, 1_993, 3_987));
}

#[test]
fn noise_free_world_is_a_function_of_its_geometry() {
    let config = SyntheticWorldConfig {
        noise_sigma_db: 0.0,
        num_samples: 50,
        seed: 5,
        ..SyntheticWorldConfig::default()
    };
    let a = generate_synthetic(&config).unwrap();
    let b = generate_synthetic(&config).unwrap();
    assert_eq!(a, b);
    let other = generate_synthetic(&SyntheticWorldConfig { seed: 6, ..config }).unwrap();
    assert_ne!(a.records(), other.records());
}

#[test]
fn synthetic_output_uses_the_uji_schema() {
    let ds = generate_synthetic(&SyntheticWorldConfig {
        num_samples: 30,
        num_aps: 12,
        ..SyntheticWorldConfig::default()
    })
    .unwrap();
    let text = to_ujiindoorloc_csv(&ds).unwrap();
    assert!(text.starts_with("WAP001,WAP002,"));
    assert!(text
        .lines()
        .next()
        .unwrap()
        .contains("WAP012,LONGITUDE,LATITUDE,FLOOR,BUILDINGID"));
    assert_eq!(parse_ujiindoorloc(&text).unwrap().records(), ds.records());
}

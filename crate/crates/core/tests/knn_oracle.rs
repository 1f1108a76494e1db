use confloc::dataset::{normalize_rssi, Coords, Dataset, Fingerprint, NormalizationScheme, PositionLabel, Record};
use confloc::predictor::{export_predictions, fit_knn, import_predictions, KnnConfig, PredictionSource, Weighting};
use proptest::prelude::*;

/// Full sort of all training points by (distance, index), then a plain
/// weighted average of the first k.
fn brute_force(train: &[Record], x: &[f64], k: usize, inverse: bool, floors: usize) -> (f64, f64, Vec<f64>) {
    let mut all: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d2: f64 = r
                .fingerprint
                .values()
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let chosen = &all[..k];
    let w: Vec<f64> = chosen
        .iter()
        .map(|(d, _)| if inverse { 1.0 / (d.sqrt() + 1e-9) } else { 1.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut lon = 0.0;
    let mut lat = 0.0;
    let mut floor = vec![0.0; floors];
    for ((_, i), wi) in chosen.iter().zip(&w) {
        lon += wi * train[*i].label.position.longitude;
        lat += wi * train[*i].label.position.latitude;
        floor[train[*i].label.floor as usize] += wi;
    }
    (lon / total, lat / total, floor.iter().map(|f| f / total).collect())
}

fn dataset(rows: Vec<(Vec<f64>, f64, f64, u32)>, w: usize) -> Dataset {
    let records = rows
        .into_iter()
        .enumerate()
        .map(|(i, (rssi, lon, lat, floor))| Record {
            id: i as u64,
            fingerprint: Fingerprint::new(rssi),
            label: PositionLabel {
                position: Coords::new(lon, lat),
                floor,
                building: 0,
            },
        })
        .collect();
    Dataset::new(records, w, 3, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn knn_matches_brute_force(
        rows in prop::collection::vec(
            (prop::collection::vec(prop_oneof![Just(100.0), (-104i32..=0).prop_map(f64::from)], 4),
             0.0f64..50.0, 0.0f64..50.0, 0u32..3),
            5..40),
        query in prop::collection::vec(prop_oneof![Just(100.0), (-104i32..=0).prop_map(f64::from)], 4),
        k in 1usize..6,
        inverse in any::<bool>(),
    ) {
        let train = normalize_rssi(dataset(rows, 4), NormalizationScheme::ZeroPenalty).unwrap();
        let weighting = if inverse { Weighting::InverseDistance } else { Weighting::Uniform };
        let model = fit_knn(&train, &KnnConfig::new(k, weighting)).unwrap();
        let out = model.predict_raw(&Fingerprint::new(query.clone())).unwrap();
        let normalized = train.normalizer().unwrap().apply(&Fingerprint::new(query));
        let (lon, lat, floors) = brute_force(train.records(), normalized.values(), k, inverse, 3);
        prop_assert!((out.coords.longitude - lon).abs() < 1e-9);
        prop_assert!((out.coords.latitude - lat).abs() < 1e-9);
        for (a, b) in out.floor_probs.iter().zip(&floors) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((out.floor_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn export_then_import_round_trips() {
    let rows = (0..12)
        .map(|i| {
            (
                vec![-40.0 - i as f64, 100.0],
                i as f64 * 1.5,
                3.25 - i as f64,
                (i % 3) as u32,
            )
        })
        .collect();
    let ds = normalize_rssi(dataset(rows, 2), NormalizationScheme::ZeroPenalty).unwrap();
    let model = fit_knn(&ds, &KnnConfig::new(3, Weighting::InverseDistance)).unwrap();
    let table = model.predict_dataset(&ds).unwrap();
    let text = export_predictions(&table);
    let back = import_predictions(&text, &ds).unwrap();
    assert_eq!(back, table);
    for r in ds.records() {
        assert_eq!(back.prediction_for(r).unwrap(), model.prediction_for(r).unwrap());
    }
}

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use rsgcir_core::panel::*;

proptest! {
    #[test]
    fn write_then_ingest_round_trips(
        raw in proptest::collection::vec(proptest::option::weighted(0.9, -0.04f64..0.4), 3 * 5),
        shifts in proptest::collection::vec(-2i64..=2, 5),
    ) {
        let start = NaiveDate::from_ymd_opt(2015, 6, 5).unwrap();
        let dates: Vec<NaiveDate> = (0..5)
            .map(|w| start.checked_add_days(Days::new(14 + 7 * w as u64)).unwrap() + chrono::Duration::days(shifts[w]))
            .collect();
        prop_assume!(check_weekly(&dates).is_ok());
        let series = vec![
            Series { segment: Segment::Cgb, maturity: 1.0 },
            Series { segment: Segment::Cgb, maturity: 2.5 },
            Series { segment: Segment::AaPlus, maturity: 10.0 },
        ];
        let values: Vec<Vec<Option<f64>>> = raw.chunks(3).map(|c| c.to_vec()).collect();
        let panel = CurvePanel::new(dates, series, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        panel.write_csv(&path).unwrap();
        let (back, report) = ingest_panel(&path).unwrap();
        prop_assert_eq!(report.unparsable, 0);
        prop_assert_eq!(back, panel);
    }
}

#[test]
fn spread_identity_reconstructs_corporate_yields() {
    let d = NaiveDate::from_ymd_opt(2020, 1, 3).unwrap();
    let series = vec![
        Series { segment: Segment::Cgb, maturity: 3.0 },
        Series { segment: Segment::Cdb, maturity: 3.0 },
        Series { segment: Segment::Aa, maturity: 3.0 },
    ];
    let p = CurvePanel::new(vec![d], series, vec![vec![Some(0.0271), Some(0.0303), Some(0.0419)]]).unwrap();
    let s = build_spreads(&p).unwrap();
    let (cgb, cdb_spread, corp_spread) = (0.0271, s.values[0][0].unwrap(), s.values[0][1].unwrap());
    assert_eq!(cgb + cdb_spread + corp_spread, 0.0419);
    let same = CurvePanel::new(vec![d], p.series.clone(), vec![vec![Some(0.03); 3]]).unwrap();
    assert!(build_spreads(&same).unwrap().values[0].iter().all(|v| *v == Some(0.0)));
}

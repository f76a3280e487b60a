//! Weekly zero-coupon yield panels: types, CSV ingest/export, and spreads.
//!
//! The CSV schema is long format with header `date,segment,maturity_years,yield`,
//! ISO-8601 dates, and decimal yields (`0.0347` is 3.47%). Empty cells and
//! `NA` mark missing observations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

pub const HEADER: [&str; 4] = ["date", "segment", "maturity_years", "yield"];
pub const DEFAULT_MATURITIES: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0];
/// Allowed deviation of consecutive dates from seven days.
pub const WEEK_TOLERANCE_DAYS: i64 = 2;
/// Yields outside this band are kept but reported.
pub const SANITY_BAND: (f64, f64) = (-0.05, 0.50);

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dates are not weekly: {0}")]
    NonWeeklyGrid(String),
    #[error("duplicate observations: {}", .0.join("; "))]
    Duplicate(Vec<String>),
    #[error("maturity mismatch: {0}")]
    MaturityMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Cgb,
    Cdb,
    Aaa,
    AaPlus,
    Aa,
    AaMinus,
}

impl Segment {
    pub const ALL: [Segment; 6] =
        [Segment::Cgb, Segment::Cdb, Segment::Aaa, Segment::AaPlus, Segment::Aa, Segment::AaMinus];
    pub const CORPORATE: [Segment; 4] = [Segment::Aaa, Segment::AaPlus, Segment::Aa, Segment::AaMinus];

    pub fn label(self) -> &'static str {
        match self {
            Segment::Cgb => "CGB",
            Segment::Cdb => "CDB",
            Segment::Aaa => "AAA",
            Segment::AaPlus => "AA+",
            Segment::Aa => "AA",
            Segment::AaMinus => "AA-",
        }
    }

    /// Accepts the labels above, case-insensitively, with `−` as a minus.
    pub fn parse(s: &str) -> Option<Segment> {
        let norm = s.trim().replace('\u{2212}', "-").to_ascii_uppercase();
        Segment::ALL.into_iter().find(|seg| seg.label() == norm)
    }

    /// Position in the coarse rating scale for corporate segments.
    pub fn rating_index(self) -> Option<usize> {
        Segment::CORPORATE.iter().position(|s| *s == self)
    }

    pub fn is_corporate(self) -> bool {
        self.rating_index().is_some()
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One observed curve point: a segment at a maturity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Series {
    pub segment: Segment,
    pub maturity: f64,
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}y", self.segment, self.maturity)
    }
}

fn series_order(a: &Series, b: &Series) -> std::cmp::Ordering {
    a.segment.cmp(&b.segment).then(a.maturity.total_cmp(&b.maturity))
}

/// Yields by date and series; `values[t][j]` is `None` when missing.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePanel {
    pub dates: Vec<NaiveDate>,
    pub series: Vec<Series>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Counts of soft problems found while ingesting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub unparsable: usize,
    pub out_of_band: usize,
}

pub fn check_weekly(dates: &[NaiveDate]) -> Result<(), PanelError> {
    for (k, w) in dates.windows(2).enumerate() {
        let gap = (w[1] - w[0]).num_days();
        if (gap - 7).abs() > WEEK_TOLERANCE_DAYS {
            return Err(PanelError::NonWeeklyGrid(format!(
                "{} -> {} is {gap} days (dates {k} and {})",
                w[0],
                w[1],
                k + 1
            )));
        }
    }
    Ok(())
}

impl CurvePanel {
    /// Validates shapes, weekly spacing, and series order.
    pub fn new(dates: Vec<NaiveDate>, series: Vec<Series>, values: Vec<Vec<Option<f64>>>) -> Result<Self, PanelError> {
        if values.len() != dates.len() || values.iter().any(|row| row.len() != series.len()) {
            return Err(PanelError::Schema("value table does not match dates and series".into()));
        }
        if series.windows(2).any(|w| series_order(&w[0], &w[1]) != std::cmp::Ordering::Less) {
            return Err(PanelError::Schema("series must be unique and ordered by segment, maturity".into()));
        }
        check_weekly(&dates)?;
        Ok(Self { dates, series, values })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn column(&self, segment: Segment, maturity: f64) -> Option<usize> {
        self.series.iter().position(|s| s.segment == segment && s.maturity == maturity)
    }

    pub fn maturities(&self, segment: Segment) -> Vec<f64> {
        self.series.iter().filter(|s| s.segment == segment).map(|s| s.maturity).collect()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut segs: Vec<Segment> = self.series.iter().map(|s| s.segment).collect();
        segs.dedup();
        segs
    }

    /// Sub-panel with the listed segments only.
    pub fn select(&self, segments: &[Segment]) -> CurvePanel {
        let keep: Vec<usize> = (0..self.series.len()).filter(|&j| segments.contains(&self.series[j].segment)).collect();
        CurvePanel {
            dates: self.dates.clone(),
            series: keep.iter().map(|&j| self.series[j]).collect(),
            values: self.values.iter().map(|row| keep.iter().map(|&j| row[j]).collect()).collect(),
        }
    }

    /// Observed values of one series.
    pub fn series_values(&self, j: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|row| row[j]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), PanelError> {
        w.write_record(HEADER)?;
        for (t, date) in self.dates.iter().enumerate() {
            for (j, s) in self.series.iter().enumerate() {
                let y = self.values[t][j].map_or_else(|| "NA".to_string(), |v| v.to_string());
                w.write_record([date.to_string(), s.segment.label().to_string(), s.maturity.to_string(), y])?;
            }
        }
        Ok(())
    }
}

fn parse_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("NA")
}

/// Reads and validates a long-format panel.
pub fn ingest_panel(path: &Path) -> Result<(CurvePanel, IngestReport), PanelError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<(CurvePanel, IngestReport), PanelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.len() == 1 && headers[0].is_empty() {
        return Err(PanelError::Schema("empty file".into()));
    }
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(PanelError::Schema(format!("expected header {:?}, found {:?}", HEADER, headers)));
    }
    let mut report = IngestReport::default();
    let mut cells: BTreeMap<(NaiveDate, Segment, u64), Option<f64>> = BTreeMap::new();
    let mut duplicates = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 2;
        if record.len() != 4 {
            return Err(PanelError::Schema(format!("row {row}: expected 4 fields")));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| PanelError::Schema(format!("row {row}: date {:?}: {e}", &record[0])))?;
        let segment = Segment::parse(&record[1])
            .ok_or_else(|| PanelError::Schema(format!("row {row}: unknown segment {:?}", &record[1])))?;
        let maturity: f64 = record[2]
            .parse()
            .ok()
            .filter(|m: &f64| *m > 0.0 && m.is_finite())
            .ok_or_else(|| PanelError::Schema(format!("row {row}: maturity {:?}", &record[2])))?;
        let value = if parse_missing(&record[3]) {
            None
        } else {
            match record[3].parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if !(SANITY_BAND.0 < v && v < SANITY_BAND.1) {
                        report.out_of_band += 1;
                    }
                    Some(v)
                }
                _ => {
                    report.unparsable += 1;
                    None
                }
            }
        };
        report.rows += 1;
        if cells.insert((date, segment, maturity.to_bits()), value).is_some() {
            duplicates.push(format!("{date},{segment},{maturity}"));
        }
    }
    if report.rows == 0 {
        return Err(PanelError::Schema("no observations".into()));
    }
    if !duplicates.is_empty() {
        return Err(PanelError::Duplicate(duplicates));
    }
    if report.unparsable > 0 {
        log::warn!("{} unparsable yields treated as missing", report.unparsable);
    }
    if report.out_of_band > 0 {
        log::warn!("{} yields outside the sanity band {:?}", report.out_of_band, SANITY_BAND);
    }
    let mut dates: Vec<NaiveDate> = cells.keys().map(|k| k.0).collect();
    dates.dedup();
    let mut series: Vec<Series> =
        cells.keys().map(|k| Series { segment: k.1, maturity: f64::from_bits(k.2) }).collect();
    series.sort_by(series_order);
    series.dedup();
    let mut values = vec![vec![None; series.len()]; dates.len()];
    for ((date, segment, m), v) in &cells {
        let t = dates.binary_search(date).expect("date collected above");
        let j = series
            .iter()
            .position(|s| s.segment == *segment && s.maturity.to_bits() == *m)
            .expect("series collected above");
        values[t][j] = *v;
    }
    Ok((CurvePanel::new(dates, series, values)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpreadKind {
    /// CDB minus CGB.
    PolicyBank,
    /// Corporate segment minus CDB.
    Corporate(Segment),
}

impl fmt::Display for SpreadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpreadKind::PolicyBank => f.write_str("CDB-CGB"),
            SpreadKind::Corporate(s) => write!(f, "{s}-CDB"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadPanel {
    pub dates: Vec<NaiveDate>,
    pub series: Vec<(SpreadKind, f64)>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Matched-maturity spreads: CDB over CGB and each corporate segment over CDB.
pub fn build_spreads(panel: &CurvePanel) -> Result<SpreadPanel, PanelError> {
    let mut pairs: Vec<(SpreadKind, f64, usize, usize)> = Vec::new();
    for (j, s) in panel.series.iter().enumerate() {
        let (kind, base) = match s.segment {
            Segment::Cgb => continue,
            Segment::Cdb => (SpreadKind::PolicyBank, Segment::Cgb),
            seg => (SpreadKind::Corporate(seg), Segment::Cdb),
        };
        let b = panel.column(base, s.maturity).ok_or_else(|| {
            PanelError::MaturityMismatch(format!("{} at {}y has no {} match", s.segment, s.maturity, base))
        })?;
        pairs.push((kind, s.maturity, j, b));
    }
    let values =
        panel.values.iter().map(|row| pairs.iter().map(|&(_, _, j, b)| Some(row[j]? - row[b]?)).collect()).collect();
    Ok(SpreadPanel { dates: panel.dates.clone(), series: pairs.iter().map(|&(k, m, _, _)| (k, m)).collect(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn parses_segments() {
        assert_eq!(Segment::parse("aa+"), Some(Segment::AaPlus));
        assert_eq!(Segment::parse("AA\u{2212}"), Some(Segment::AaMinus));
        assert_eq!(Segment::parse("BBB"), None);
        assert_eq!(Segment::Aa.rating_index(), Some(2));
        assert_eq!(Segment::Cdb.rating_index(), None);
    }

    #[test]
    fn single_row_is_one_observation() {
        let csv = "date,segment,maturity_years,yield\n2014-04-18,AAA,3,0.0347\n";
        let (p, r) = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(r.rows, 1);
        assert_eq!(p.series, vec![Series { segment: Segment::Aaa, maturity: 3.0 }]);
        assert_eq!(p.values, vec![vec![Some(0.0347)]]);
    }

    #[test]
    fn empty_and_malformed_files_are_schema_errors() {
        assert!(matches!(ingest_reader("".as_bytes()), Err(PanelError::Schema(_))));
        assert!(matches!(ingest_reader("date,segment,maturity_years,yield\n".as_bytes()), Err(PanelError::Schema(_))));
        assert!(matches!(ingest_reader("a,b\n1,2\n".as_bytes()), Err(PanelError::Schema(_))));
    }

    #[test]
    fn duplicates_are_listed() {
        let csv = "date,segment,maturity_years,yield\n2014-04-18,CGB,1,0.03\n2014-04-18,CGB,1,0.031\n";
        match ingest_reader(csv.as_bytes()) {
            Err(PanelError::Duplicate(d)) => assert_eq!(d, vec!["2014-04-18,CGB,1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unparsable_yields_become_missing() {
        let csv =
            "date,segment,maturity_years,yield\n2014-04-18,CGB,1,abc\n2014-04-25,CGB,1,NA\n2014-05-02,CGB,1,0.9\n";
        let (p, r) = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!((r.unparsable, r.out_of_band), (1, 1));
        assert_eq!(p.values, vec![vec![None], vec![None], vec![Some(0.9)]]);
    }

    #[test]
    fn weekly_grid_tolerates_holiday_shifts_only() {
        assert!(check_weekly(&[date("2020-01-03"), date("2020-01-09"), date("2020-01-17")]).is_ok());
        assert!(matches!(check_weekly(&[date("2020-01-03"), date("2020-01-17")]), Err(PanelError::NonWeeklyGrid(_))));
    }

    #[test]
    fn spreads_match_by_maturity() {
        let d = vec![date("2020-01-03")];
        let series = vec![
            Series { segment: Segment::Cgb, maturity: 1.0 },
            Series { segment: Segment::Cdb, maturity: 1.0 },
            Series { segment: Segment::Aaa, maturity: 1.0 },
        ];
        let p = CurvePanel::new(d.clone(), series, vec![vec![Some(0.030), Some(0.032), Some(0.039)]]).unwrap();
        let s = build_spreads(&p).unwrap();
        assert_eq!(s.series, vec![(SpreadKind::PolicyBank, 1.0), (SpreadKind::Corporate(Segment::Aaa), 1.0)]);
        assert!((s.values[0][0].unwrap() - 0.002).abs() < 1e-15);
        assert!((s.values[0][1].unwrap() - 0.007).abs() < 1e-15);
        let bad = CurvePanel::new(
            d,
            vec![Series { segment: Segment::Cgb, maturity: 1.0 }, Series { segment: Segment::Cdb, maturity: 2.0 }],
            vec![vec![Some(0.03), Some(0.03)]],
        )
        .unwrap();
        assert!(matches!(build_spreads(&bad), Err(PanelError::MaturityMismatch(_))));
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adaptive::{Condition, ECCENTRICITIES_DEG};
use crate::backbone::TapId;
use crate::error::{Error, Result};
use crate::synthesis::Direction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ThresholdRecord {
    pub subject_id: String,
    pub condition: Condition,
    pub threshold_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AggregateRow {
    pub tap: TapId,
    pub eccentricity_deg: u32,
    pub mean: f64,
    /// Sample standard deviation of subject means; 0 when only one subject
    /// contributes.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
    pub subset: bool,
}

impl AggregateTable {
    pub fn row(&self, tap: TapId, eccentricity_deg: u32) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.tap == tap && r.eccentricity_deg == eccentricity_deg)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tap,eccentricity_deg,mean,std,n\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.tap, r.eccentricity_deg, r.mean, r.std, r.n).unwrap();
        }
        out
    }
}

/// Averages each subject's cells over components and directions per
/// (tap, eccentricity), then takes the mean and sample std across subjects.
///
/// Without `allow_subset` every subject must supply all 54 conditions. With
/// it, subjects contribute to a (tap, eccentricity) row only through the
/// cells they have.
pub fn aggregate_thresholds(records: &[ThresholdRecord], allow_subset: bool) -> Result<AggregateTable> {
    let mut cells: BTreeMap<&str, BTreeMap<Condition, f64>> = BTreeMap::new();
    for r in records {
        if !r.threshold_value.is_finite() {
            return Err(Error::Config(format!(
                "non-finite threshold for {} {}",
                r.subject_id,
                r.condition.label()
            )));
        }
        if cells
            .entry(&r.subject_id)
            .or_default()
            .insert(r.condition, r.threshold_value)
            .is_some()
        {
            return Err(Error::Config(format!(
                "duplicate record for {} {}",
                r.subject_id,
                r.condition.label()
            )));
        }
    }
    if !allow_subset {
        let all: BTreeSet<Condition> = Condition::all().into_iter().collect();
        let mut missing = Vec::new();
        for (subject, have) in &cells {
            let n = all.iter().filter(|c| !have.contains_key(c)).count();
            if n > 0 {
                missing.push(format!("{subject} lacks {n} of 54"));
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing.join(", ")));
        }
    }

    let mut rows = Vec::new();
    for tap in TapId::ALL {
        for ecc in ECCENTRICITIES_DEG {
            let subject_means: Vec<f64> = cells
                .values()
                .filter_map(|have| {
                    let vals: Vec<f64> = have
                        .iter()
                        .filter(|(c, _)| c.tap == tap && c.eccentricity_deg == ecc)
                        .map(|(_, v)| *v)
                        .collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            if subject_means.is_empty() {
                continue;
            }
            let n = subject_means.len();
            let mean = subject_means.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (subject_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(AggregateRow {
                tap,
                eccentricity_deg: ecc,
                mean,
                std,
                n,
            });
        }
    }
    Ok(AggregateTable {
        rows,
        subset: allow_subset,
    })
}

/// Group thresholds published for eight human observers, as
/// `(tap, eccentricity, mean, std)`. Units follow each tap's target scale.
pub const PUBLISHED_THRESHOLD_TABLE: [(TapId, u32, f64, f64); 9] = [
    (TapId::Early, 4, 47.915, 8.8166),
    (TapId::Early, 8, 63.0404, 11.8613),
    (TapId::Early, 12, 63.7918, 8.5024),
    (TapId::Mid, 4, 0.486, 0.1275),
    (TapId::Mid, 8, 0.5983, 0.0686),
    (TapId::Mid, 12, 0.6407, 0.0533),
    (TapId::Late, 4, 0.1538, 0.0182),
    (TapId::Late, 8, 0.153, 0.0253),
    (TapId::Late, 12, 0.1688, 0.0203),
];

/// Per-subject records constructed to aggregate to
/// [`PUBLISHED_THRESHOLD_TABLE`]; the construction is in the file header.
pub const PUBLISHED_SUBJECT_FIXTURE: &str = include_str!("../../testdata/v1/table1_subjects.csv");

const RECORD_HEADER: &str = "subject_id,tap,component,direction,eccentricity_deg,threshold";

pub fn records_to_csv(records: &[ThresholdRecord]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in records {
        let c = &r.condition;
        let dir = if c.direction == Direction::Positive { "+" } else { "-" };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.subject_id, c.tap, c.component, dir, c.eccentricity_deg, r.threshold_value
        )
        .unwrap();
    }
    out
}

/// Parses [`records_to_csv`] output. Blank lines and lines starting with `#`
/// are skipped.
pub fn read_records_csv(text: &str) -> Result<Vec<ThresholdRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == RECORD_HEADER {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("threshold csv line {}: {what}: {line}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let tap: TapId = f[1].parse().map_err(|_| bad("unknown tap"))?;
        let component: usize = f[2].parse().map_err(|_| bad("bad component"))?;
        let direction = match f[3] {
            "+" => Direction::Positive,
            "-" => Direction::Negative,
            _ => return Err(bad("bad direction")),
        };
        let eccentricity_deg: u32 = f[4].parse().map_err(|_| bad("bad eccentricity"))?;
        if component >= 3 || !ECCENTRICITIES_DEG.contains(&eccentricity_deg) {
            return Err(bad("condition off the grid"));
        }
        let threshold_value: f64 = f[5].parse().map_err(|_| bad("bad threshold"))?;
        out.push(ThresholdRecord {
            subject_id: f[0].to_string(),
            condition: Condition {
                tap,
                component,
                direction,
                eccentricity_deg,
            },
            threshold_value,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_subject(id: &str, value: impl Fn(&Condition) -> f64) -> Vec<ThresholdRecord> {
        Condition::all()
            .into_iter()
            .map(|c| ThresholdRecord {
                subject_id: id.into(),
                threshold_value: value(&c),
                condition: c,
            })
            .collect()
    }

    #[test]
    fn identical_subjects_have_zero_std() {
        let mut recs = full_subject("a", |_| 2.5);
        recs.extend(full_subject("b", |_| 2.5));
        let t = aggregate_thresholds(&recs, false).unwrap();
        assert_eq!(t.rows.len(), 9);
        assert!(t.rows.iter().all(|r| r.mean == 2.5 && r.std == 0.0 && r.n == 2));
    }

    #[test]
    fn missing_cells_need_subset_flag() {
        let mut recs = full_subject("a", |_| 1.0);
        recs.pop();
        assert!(matches!(aggregate_thresholds(&recs, false), Err(Error::MissingCells(_))));
        let t = aggregate_thresholds(&recs, true).unwrap();
        assert_eq!(t.rows.len(), 9);
    }

    #[test]
    fn duplicates_rejected() {
        let mut recs = full_subject("a", |_| 1.0);
        recs.push(recs[0].clone());
        assert!(aggregate_thresholds(&recs, false).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = full_subject("s1", |c| c.index() as f64 * 0.1 + 1.0 / 3.0);
        assert_eq!(read_records_csv(&records_to_csv(&recs)).unwrap(), recs);
        assert!(read_records_csv("s,early,0,+,5,1.0").is_err());
    }
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::{average_probs, FrozenMember};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::numerics::{DenseArray, Scalar};
use crate::weightgen::MemberId;

/// Exhaustive enumeration is limited to this many members.
pub const MAX_ANYTIME_MEMBERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Bit `i` set when the `i`-th member is part of the subset.
    pub mask: u32,
    pub members: Vec<MemberId>,
    /// Multiply-accumulate count per sample.
    pub cost: u64,
    pub accuracy: f64,
}

/// Every non-empty member subset, by ascending cost (ties by mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnytimeSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl AnytimeSchedule {
    /// Builds the schedule from member costs and a subset scorer.
    pub fn from_scores(ids: &[MemberId], costs: &[u64], mut accuracy: impl FnMut(u32) -> Result<f64>) -> Result<Self> {
        if ids.is_empty() || ids.len() != costs.len() {
            return Err(Error::EmptySubset);
        }
        if ids.len() > MAX_ANYTIME_MEMBERS {
            return Err(Error::Member(format!(
                "{} members exceed the anytime enumeration limit of {MAX_ANYTIME_MEMBERS}",
                ids.len()
            )));
        }
        let mut entries = Vec::with_capacity((1usize << ids.len()) - 1);
        for mask in 1u32..(1u32 << ids.len()) {
            let picked: Vec<usize> = (0..ids.len()).filter(|i| mask >> i & 1 == 1).collect();
            entries.push(ScheduleEntry {
                mask,
                members: picked.iter().map(|&i| ids[i]).collect(),
                cost: picked.iter().map(|&i| costs[i]).sum(),
                accuracy: accuracy(mask)?,
            });
        }
        entries.sort_by_key(|e| (e.cost, e.mask));
        Ok(Self { entries })
    }

    /// Rows `mask,cost,accuracy`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mask", "cost", "accuracy"])?;
        for e in &self.entries {
            w.write_record([e.mask.to_string(), e.cost.to_string(), format!("{:?}", e.accuracy)])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Scores every member subset on held-out data.
pub fn enumerate_anytime_schedule<T: Scalar>(
    members: &[FrozenMember<T>],
    x: &DenseArray<T>,
    labels: &[usize],
) -> Result<AnytimeSchedule> {
    let probs = members.iter().map(|m| m.predict_proba(x)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<MemberId> = members.iter().map(|m| m.spec().member_id).collect();
    let costs: Vec<u64> = members.iter().map(|m| m.spec().macs()).collect();
    AnytimeSchedule::from_scores(&ids, &costs, |mask| {
        let subset: Vec<DenseArray<T>> =
            (0..probs.len()).filter(|i| mask >> i & 1 == 1).map(|i| probs[i].clone()).collect();
        Ok(evaluate(&average_probs(&subset)?, labels)?.0)
    })
}

/// The most accurate entry costing at most `budget`; accuracy ties go to the
/// cheaper entry.
pub fn select_under_budget(schedule: &AnytimeSchedule, budget: u64) -> Result<&ScheduleEntry> {
    let cheapest = schedule.entries.iter().map(|e| e.cost).min().ok_or(Error::EmptySubset)?;
    schedule
        .entries
        .iter()
        .filter(|e| e.cost <= budget)
        .fold(None, |best: Option<&ScheduleEntry>, e| match best {
            Some(b) if b.accuracy >= e.accuracy => Some(b),
            _ => Some(e),
        })
        .ok_or(Error::NoEntryWithinBudget { budget, minimum: cheapest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> AnytimeSchedule {
        let acc = [0.0, 0.7, 0.6, 0.75];
        AnytimeSchedule::from_scores(&[MemberId(0), MemberId(1)], &[10, 20], |m| Ok(acc[m as usize])).unwrap()
    }

    #[test]
    fn hand_enumerated_selection() {
        let s = synthetic();
        assert_eq!(s.entries.iter().map(|e| e.cost).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(select_under_budget(&s, 25).unwrap().mask, 0b01);
        assert_eq!(select_under_budget(&s, 10).unwrap().mask, 0b01);
        assert_eq!(select_under_budget(&s, 1000).unwrap().mask, 0b11);
        assert!(matches!(
            select_under_budget(&s, 9),
            Err(Error::NoEntryWithinBudget { budget: 9, minimum: 10 })
        ));
    }

    #[test]
    fn cardinality_and_additivity() {
        for m in 1..=5usize {
            let ids: Vec<MemberId> = (0..m as u32).map(MemberId).collect();
            let costs: Vec<u64> = (0..m as u64).map(|i| 3 + 2 * i).collect();
            let s = AnytimeSchedule::from_scores(&ids, &costs, |_| Ok(0.5)).unwrap();
            assert_eq!(s.entries.len(), (1 << m) - 1);
            for a in &s.entries {
                for b in &s.entries {
                    if a.mask != b.mask && a.mask & b.mask == a.mask {
                        assert!(a.cost < b.cost);
                    }
                }
            }
        }
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        synthetic().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(1).unwrap(), "1,10,0.7");
    }
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::search::{CoefficientSplit, SimilarityRecord};
use crate::weightgen::{LayerId, SharingPlan};

/// Rows `layer_i,layer_j,slots,psi`; slots are `;`-separated.
pub fn write_similarity_csv<W: Write>(out: W, records: &[SimilarityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer_i", "layer_j", "slots", "psi"])?;
    for r in records {
        let slots: Vec<String> = r.slots.iter().map(|s| s.to_string()).collect();
        w.write_record([r.layer_i.to_string(), r.layer_j.to_string(), slots.join(";"), format!("{:?}", r.psi)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanEventKind {
    Initial,
    Search,
    Refine,
}

/// A change of the sharing plan, logged as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEvent {
    pub kind: PlanEventKind,
    pub epoch: usize,
    pub clusters_before: Vec<Vec<LayerId>>,
    pub clusters_after: Vec<Vec<LayerId>>,
    pub coefficient_sets_before: usize,
    pub coefficient_sets_after: usize,
    pub splits: Vec<CoefficientSplit>,
}

impl PlanEvent {
    pub fn diff(kind: PlanEventKind, epoch: usize, before: &SharingPlan, after: &SharingPlan, splits: Vec<CoefficientSplit>) -> Self {
        Self {
            kind,
            epoch,
            clusters_before: before.cluster_groups(),
            clusters_after: after.cluster_groups(),
            coefficient_sets_before: before.coefficient_sets.len(),
            coefficient_sets_after: after.coefficient_sets.len(),
            splits,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanEventLog {
    pub events: Vec<PlanEvent>,
}

impl PlanEventLog {
    pub fn push(&mut self, event: PlanEvent) {
        log::info!(
            "plan {:?} at epoch {}: {} -> {} clusters, {} -> {} coefficient sets",
            event.kind,
            event.epoch,
            event.clusters_before.len(),
            event.clusters_after.len(),
            event.coefficient_sets_before,
            event.coefficient_sets_after
        );
        self.events.push(event);
    }

    pub fn to_json_lines(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightgen::SlotId;

    #[test]
    fn csv_rows() {
        let records = vec![SimilarityRecord {
            layer_i: LayerId(0),
            layer_j: LayerId(3),
            slots: vec![SlotId(1), SlotId(2)],
            psi: -0.25,
        }];
        let mut buf = Vec::new();
        write_similarity_csv(&mut buf, &records).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layer_i,layer_j,slots,psi\n0,3,1;2,-0.25\n");
    }
}

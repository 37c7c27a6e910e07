use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::EfficiencySpec;
use crate::brain::MapperKind;
use crate::error::{Error, Result};
use crate::metrics::{render_table, MetricReport, Protocol, TableGroup};

/// Ratio of a baseline's token-grid size to ours.
pub fn dimensional_efficiency(baseline: (u64, u64), ours_dim: u64) -> Result<f64> {
    let (tokens, dim) = baseline;
    if ours_dim == 0 {
        return Err(Error::Validation("our embedding dimension must be positive".into()));
    }
    if tokens == 0 || dim == 0 {
        return Err(Error::Validation("baseline dimensions must be positive".into()));
    }
    Ok((tokens as f64 * dim as f64) / ours_dim as f64)
}

/// Per-subject metrics of one run, written to `report/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub mapper: MapperKind,
    pub protocol: Protocol,
    pub subjects: BTreeMap<String, MetricReport>,
    pub mean: MetricReport,
    pub efficiency: EfficiencySpec,
    pub dimensional_efficiency: f64,
}

impl RunReport {
    pub fn new(mapper: MapperKind, subjects: BTreeMap<String, MetricReport>, efficiency: EfficiencySpec) -> Result<Self> {
        let all: Vec<MetricReport> = subjects.values().cloned().collect();
        let mean = MetricReport::mean(&all)?;
        Ok(RunReport {
            mapper,
            protocol: mean.protocol,
            subjects,
            mean,
            efficiency,
            dimensional_efficiency: dimensional_efficiency(
                (efficiency.baseline_tokens, efficiency.baseline_dim),
                efficiency.ours_dim,
            )?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Caption-evaluation table: one column per subject, plus their mean
    /// when there is more than one.
    pub fn render(&self) -> String {
        let mut columns: Vec<(String, Option<MetricReport>)> =
            self.subjects.iter().map(|(s, r)| (s.clone(), Some(r.clone()))).collect();
        if columns.len() > 1 {
            columns.push(("Mean".into(), Some(self.mean.clone())));
        }
        let groups = [TableGroup {
            heading: self.protocol.heading().to_string(),
            columns,
        }];
        let mut out = render_table(
            &format!("Evaluation of captions from fMRI ({} mapper)", self.mapper.label()),
            &groups,
        );
        out.push_str(&efficiency_line(&self.efficiency, self.dimensional_efficiency));
        out
    }
}

fn efficiency_line(e: &EfficiencySpec, ratio: f64) -> String {
    format!(
        "Prefix source: {} values vs {}x{} = {} (1/{ratio:.2} of the space)\n",
        e.ours_dim,
        e.baseline_tokens,
        e.baseline_dim,
        e.baseline_tokens * e.baseline_dim
    )
}

/// Mapper comparison: one column per mapper kind, each cell the mean over
/// every subject reported for that kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub protocol: Protocol,
    pub columns: Vec<(MapperKind, MetricReport)>,
    pub subjects: usize,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let groups = [TableGroup {
            heading: self.protocol.heading().to_string(),
            columns: self
                .columns
                .iter()
                .map(|(k, r)| (k.label().to_string(), Some(r.clone())))
                .collect(),
        }];
        render_table(
            &format!(
                "Evaluation of mapping networks from fMRI, averaged over {} subject{}",
                self.subjects,
                if self.subjects == 1 { "" } else { "s" }
            ),
            &groups,
        )
    }
}

/// Reads `report/report.json` from each run directory.
pub fn ablation_report(run_dirs: &[PathBuf]) -> Result<AblationTable> {
    let reports = run_dirs
        .iter()
        .map(|d| RunReport::load(&d.join("report").join("report.json")))
        .collect::<Result<Vec<_>>>()?;
    ablation_from_reports(&reports)
}

pub fn ablation_from_reports(reports: &[RunReport]) -> Result<AblationTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no run reports given".into()))?;
    let mut by_kind: BTreeMap<u8, (MapperKind, Vec<MetricReport>)> = BTreeMap::new();
    let mut subjects = std::collections::BTreeSet::new();
    for r in reports {
        if r.protocol != first.protocol {
            return Err(Error::Validation(format!(
                "runs use different protocols: {} and {}",
                first.protocol.as_str(),
                r.protocol.as_str()
            )));
        }
        let order = match r.mapper {
            MapperKind::Ridge => 0,
            MapperKind::Shallow => 1,
            MapperKind::Wide => 2,
        };
        let slot = by_kind.entry(order).or_insert_with(|| (r.mapper, Vec::new()));
        slot.1.extend(r.subjects.values().cloned());
        subjects.extend(r.subjects.keys().cloned());
    }
    let columns = by_kind
        .into_values()
        .map(|(k, rs)| Ok((k, MetricReport::mean(&rs)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        protocol: first.protocol,
        columns,
        subjects: subjects.len(),
    })
}

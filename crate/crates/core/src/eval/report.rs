//! Run summaries, comparison tables and loss-reduction curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{mean_scores, SlotMetrics, SlotScores};
use super::stats::{aggregate_seeds, format1, mean, significance, SigTest, Tier};
use crate::error::{Error, Result};

/// Seed-level results of one configuration on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub per_seed_jga: Vec<f64>,
    pub mean_jga: f64,
    pub per_seed_slots: Vec<SlotMetrics>,
    /// Seed-averaged slot scores.
    pub overall: SlotScores,
    pub high_oov: Option<SlotScores>,
    pub per_slot: BTreeMap<String, SlotScores>,
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub diff: f64,
    pub test: SigTest,
    pub p_value: f64,
    pub tier: Tier,
}

impl RunReport {
    pub fn new(
        name: &str,
        dataset: &str,
        seeds: Vec<u64>,
        per_seed_jga: Vec<f64>,
        per_seed_slots: Vec<SlotMetrics>,
    ) -> Result<Self> {
        if per_seed_jga.is_empty() || per_seed_jga.len() != seeds.len() || per_seed_slots.len() != seeds.len() {
            return Err(Error::Invalid(format!(
                "{name}: {} seeds, {} JGA values, {} slot reports",
                seeds.len(),
                per_seed_jga.len(),
                per_seed_slots.len()
            )));
        }
        let overall = mean_scores(&per_seed_slots.iter().map(|m| m.overall).collect::<Vec<_>>()).unwrap_or_default();
        let subset: Vec<SlotScores> = per_seed_slots.iter().filter_map(|m| m.high_oov).collect();
        let mut per_slot = BTreeMap::new();
        for slot in per_seed_slots[0].per_slot.keys() {
            let runs: Vec<SlotScores> = per_seed_slots
                .iter()
                .filter_map(|m| m.per_slot.get(slot).copied())
                .collect();
            if let Some(s) = mean_scores(&runs) {
                per_slot.insert(slot.clone(), s);
            }
        }
        Ok(RunReport {
            name: name.to_string(),
            dataset: dataset.to_string(),
            seeds,
            mean_jga: mean(&per_seed_jga),
            per_seed_jga,
            per_seed_slots,
            overall,
            high_oov: mean_scores(&subset),
            per_slot,
            comparison: None,
        })
    }

    /// Attach the difference and significance against `baseline`.
    pub fn compare(&mut self, baseline: &RunReport, test: SigTest) -> Result<()> {
        let agg = aggregate_seeds(
            std::slice::from_ref(&self.per_seed_jga),
            std::slice::from_ref(&baseline.per_seed_jga),
        )?;
        let p_value = significance(&baseline.per_seed_jga, &self.per_seed_jga, test)?;
        self.comparison = Some(Comparison {
            baseline: baseline.name.clone(),
            diff: agg.average_diff,
            test,
            p_value,
            tier: Tier::of(p_value),
        });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Itft,
    Mtl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Itft => "ITFT",
            Method::Mtl => "MTL",
        }
    }
}

/// JGA per seed of one auxiliary task and method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRuns {
    pub aux: String,
    pub method: Method,
    pub dataset: String,
    pub jga: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Cell {
    pub mean: f64,
    pub diff: f64,
    pub p_value: f64,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub aux: String,
    /// Indexed `[method][dataset]`, methods in `Table1::methods` order.
    pub cells: Vec<Vec<Option<Table1Cell>>>,
    /// Mean diff over the datasets a method has results for.
    pub average_diff: Vec<Option<f64>>,
}

/// Auxiliary tasks against datasets and methods, JGA in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub datasets: Vec<String>,
    pub methods: Vec<Method>,
    pub baseline: Vec<f64>,
    pub rows: Vec<Table1Row>,
}

/// Build the comparison table. Values are fractions in `[0, 1]` and are
/// shown as percentages. Every dataset with results needs a baseline.
pub fn build_table1(baselines: &BTreeMap<String, Vec<f64>>, runs: &[MethodRuns], test: SigTest) -> Result<Table1> {
    let mut datasets: Vec<String> = Vec::new();
    for r in runs {
        if !baselines.contains_key(&r.dataset) {
            return Err(Error::Invalid(format!("no baseline for dataset `{}`", r.dataset)));
        }
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
    }
    if datasets.is_empty() {
        datasets = baselines.keys().cloned().collect();
    }
    let methods = vec![Method::Itft, Method::Mtl];
    let pct = |v: &[f64]| v.iter().map(|x| 100.0 * x).collect::<Vec<_>>();
    let baseline: Vec<f64> = datasets.iter().map(|d| mean(&pct(&baselines[d]))).collect();
    let mut auxes: Vec<String> = Vec::new();
    for r in runs {
        if !auxes.contains(&r.aux) {
            auxes.push(r.aux.clone());
        }
    }
    let mut rows = Vec::new();
    for aux in auxes {
        let mut cells = Vec::new();
        let mut average_diff = Vec::new();
        for &m in &methods {
            let mut row = Vec::new();
            let (mut ms, mut bs) = (Vec::new(), Vec::new());
            for d in &datasets {
                let found: Vec<&MethodRuns> = runs
                    .iter()
                    .filter(|r| r.aux == aux && r.method == m && &r.dataset == d)
                    .collect();
                if found.len() > 1 {
                    return Err(Error::Invalid(format!(
                        "duplicate results for {aux} {} on {d}",
                        m.as_str()
                    )));
                }
                let Some(r) = found.first() else {
                    row.push(None);
                    continue;
                };
                let (mv, bv) = (pct(&r.jga), pct(&baselines[d]));
                let agg = aggregate_seeds(std::slice::from_ref(&mv), std::slice::from_ref(&bv))?;
                let p_value = significance(&bv, &mv, test)?;
                row.push(Some(Table1Cell {
                    mean: agg.method_means[0],
                    diff: agg.diffs[0],
                    p_value,
                    tier: Tier::of(p_value),
                }));
                ms.push(mv);
                bs.push(bv);
            }
            average_diff.push(if ms.is_empty() {
                None
            } else {
                Some(aggregate_seeds(&ms, &bs)?.average_diff)
            });
            cells.push(row);
        }
        rows.push(Table1Row {
            aux,
            cells,
            average_diff,
        });
    }
    Ok(Table1 {
        datasets,
        methods,
        baseline,
        rows,
    })
}

fn render_grid(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

impl Table1 {
    fn grid(&self) -> Vec<Vec<String>> {
        let mut header = vec!["aux".to_string()];
        for m in &self.methods {
            for d in &self.datasets {
                header.push(format!("{} {d}", m.as_str()));
            }
            header.push(format!("{} avg diff", m.as_str()));
        }
        let mut base = vec!["baseline".to_string()];
        for _ in &self.methods {
            base.extend(self.baseline.iter().map(|&b| format1(b)));
            base.push("-".into());
        }
        let mut grid = vec![header, base];
        for row in &self.rows {
            let mut line = vec![row.aux.clone()];
            for (cells, avg) in row.cells.iter().zip(&row.average_diff) {
                for c in cells {
                    line.push(match c {
                        Some(c) => format!("{}{}", format1(c.mean), c.tier.stars()),
                        None => "-".into(),
                    });
                }
                line.push(avg.map_or("-".into(), |a| format!("{:+.1}", super::stats::round1(a))));
            }
            grid.push(line);
        }
        grid
    }

    pub fn render(&self) -> String {
        render_grid(&self.grid())
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.grid())
    }
}

fn to_csv(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

/// Which group a run contributes to in the accuracy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    Baseline,
    Classification,
    Span,
}

/// Accuracy breakdown with rows baseline, all auxiliary tasks averaged,
/// classification tasks averaged, span tasks averaged; columns SA, SGA, SPA
/// over all slots then over high-OOV slots. Values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    pub rows: Vec<(String, [Option<f64>; 6])>,
}

pub const TABLE3_ROWS: [&str; 4] = ["baseline", "avg-all-aux", "avg-classification-aux", "span-aux"];

pub fn build_table3(runs: &[(AuxKind, SlotMetrics)]) -> Table3 {
    let group = |pick: &dyn Fn(AuxKind) -> bool| -> [Option<f64>; 6] {
        let chosen: Vec<&SlotMetrics> = runs.iter().filter(|(k, _)| pick(*k)).map(|(_, m)| m).collect();
        let all = mean_scores(&chosen.iter().map(|m| m.overall).collect::<Vec<_>>());
        let oov = mean_scores(&chosen.iter().filter_map(|m| m.high_oov).collect::<Vec<_>>());
        let cols = |s: Option<SlotScores>| match s {
            Some(s) => [Some(100.0 * s.sa), Some(100.0 * s.sga), s.spa.map(|x| 100.0 * x)],
            None => [None; 3],
        };
        let [a, b, c] = cols(all);
        let [d, e, f] = cols(oov);
        [a, b, c, d, e, f]
    };
    let picks: [&dyn Fn(AuxKind) -> bool; 4] = [
        &|k| k == AuxKind::Baseline,
        &|k| k != AuxKind::Baseline,
        &|k| k == AuxKind::Classification,
        &|k| k == AuxKind::Span,
    ];
    Table3 {
        rows: TABLE3_ROWS
            .iter()
            .zip(picks)
            .map(|(n, p)| (n.to_string(), group(p)))
            .collect(),
    }
}

impl Table3 {
    fn grid(&self) -> Vec<Vec<String>> {
        let mut grid = vec![["", "SA", "SGA", "SPA", "SA oov", "SGA oov", "SPA oov"]
            .map(String::from)
            .to_vec()];
        for (name, vals) in &self.rows {
            let mut line = vec![name.clone()];
            line.extend(vals.iter().map(|v| v.map_or("-".into(), format1)));
            grid.push(line);
        }
        grid
    }

    pub fn render(&self) -> String {
        render_grid(&self.grid())
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.grid())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReductionRow {
    pub group: String,
    pub epoch: usize,
    pub reduction: f64,
}

/// Per epoch and group, mean baseline dev loss minus mean method dev loss.
/// Histories of unequal length are cut to the shortest; the second value
/// reports whether that happened.
pub fn loss_reduction(
    baseline: &[Vec<f64>],
    groups: &[(String, Vec<Vec<f64>>)],
) -> Result<(Vec<LossReductionRow>, bool)> {
    if baseline.is_empty() {
        return Err(Error::Invalid("loss reduction needs baseline histories".into()));
    }
    if let Some((g, _)) = groups.iter().find(|(_, runs)| runs.is_empty()) {
        return Err(Error::Invalid(format!("group `{g}` has no runs")));
    }
    let lens = baseline.iter().chain(groups.iter().flat_map(|(_, r)| r)).map(Vec::len);
    let (min, max) = lens.fold((usize::MAX, 0), |(a, b), l| (a.min(l), b.max(l)));
    let truncated = min != max;
    if truncated {
        log::warn!("loss histories differ in length ({min} to {max} epochs); using the first {min}");
    }
    let at = |runs: &[Vec<f64>], e: usize| runs.iter().map(|r| r[e]).sum::<f64>() / runs.len() as f64;
    let mut rows = Vec::new();
    for (name, runs) in groups {
        for e in 0..min {
            rows.push(LossReductionRow {
                group: name.clone(),
                epoch: e + 1,
                reduction: at(baseline, e) - at(runs, e),
            });
        }
    }
    Ok((rows, truncated))
}

pub fn loss_reduction_csv(rows: &[LossReductionRow]) -> Result<String> {
    let mut grid = vec![vec!["group".to_string(), "epoch".into(), "reduction".into()]];
    grid.extend(
        rows.iter()
            .map(|r| vec![r.group.clone(), r.epoch.to_string(), format!("{:.6}", r.reduction)]),
    );
    to_csv(&grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_reduction_shape_and_gap() {
        let base = vec![vec![1.0; 10]];
        let groups = vec![
            ("small".to_string(), vec![vec![0.95; 10]]),
            ("large".to_string(), vec![vec![1.0; 10]]),
        ];
        let (rows, cut) = loss_reduction(&base, &groups).unwrap();
        assert_eq!(rows.len(), 20);
        assert!(!cut);
        let csv = loss_reduction_csv(&rows).unwrap();
        assert!(csv.contains("small,1,0.050000"));
        assert!(csv.contains("large,10,0.000000"));
        let (rows, cut) = loss_reduction(&base, &[("x".into(), vec![vec![1.0; 7]])]).unwrap();
        assert!(cut && rows.len() == 7);
    }

    #[test]
    fn table1_two_rows_and_stars() {
        let baselines: BTreeMap<String, Vec<f64>> = [("synth".to_string(), vec![0.5, 0.51, 0.49, 0.5, 0.52])].into();
        let runs = vec![MethodRuns {
            aux: "squad".into(),
            method: Method::Mtl,
            dataset: "synth".into(),
            jga: vec![0.6, 0.61, 0.59, 0.6, 0.62],
        }];
        let t = build_table1(&baselines, &runs, SigTest::Permutation).unwrap();
        assert_eq!(t.rows.len(), 1);
        let text = t.render();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("60.4**"));
        assert!(text.contains("+10.0"));
        let missing = build_table1(&BTreeMap::new(), &runs, SigTest::Permutation);
        assert!(missing.unwrap_err().to_string().contains("no baseline"));
    }
}

//! Leaderboard aggregation: group-wise min-max Normalized Overall Score,
//! fractional average rank, and Pearson correlation.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// A normalization group; the baseline row takes part in every group that
/// names it.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Group {
    pub name: String,
    pub baseline: String,
    pub members: Vec<String>,
}

impl Group {
    /// Baseline first, then members, without duplicates.
    pub fn participants(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        std::iter::once(self.baseline.as_str())
            .chain(self.members.iter().map(String::as_str))
            .filter(|m| seen.insert(*m))
            .collect()
    }
}

/// Sidecar configuration for a metric table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    #[serde(default, rename = "group")]
    pub groups: Vec<Group>,
    #[serde(default)]
    pub lower_is_better: Vec<String>,
}

impl GroupConfig {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: source.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    methods: Vec<String>,
    metrics: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
    higher_is_better: Vec<bool>,
    groups: Vec<Group>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "-" | "--")
}

impl MetricTable {
    /// Columns with no values at all are dropped.
    pub fn new(methods: Vec<String>, metrics: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if values.len() != methods.len() {
            return Err(Error::dim(format!(
                "{} methods but {} value rows",
                methods.len(),
                values.len()
            )));
        }
        if let Some((i, row)) = values.iter().enumerate().find(|(_, r)| r.len() != metrics.len()) {
            return Err(Error::dim(format!(
                "row `{}` has {} cells for {} metrics",
                methods[i],
                row.len(),
                metrics.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = methods.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(Error::invalid(format!("duplicate method `{dup}`")));
        }
        if let Some(v) = values.iter().flatten().flatten().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("metric value {v}")));
        }

        let keep: Vec<usize> = (0..metrics.len())
            .filter(|&m| {
                let any = values.iter().any(|row| row[m].is_some());
                if !any {
                    log::warn!("dropping metric `{}`: no values", metrics[m]);
                }
                any
            })
            .collect();
        let metrics: Vec<String> = keep.iter().map(|&m| metrics[m].clone()).collect();
        let values = values
            .into_iter()
            .map(|row| keep.iter().map(|&m| row[m]).collect())
            .collect();
        Ok(Self {
            methods,
            higher_is_better: vec![true; metrics.len()],
            metrics,
            values,
            groups: Vec::new(),
        })
    }

    /// Header row names the metrics after a leading method column;
    /// `-`, `--` and empty cells are missing.
    pub fn parse_csv<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: source.to_path_buf(),
            detail,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(fmt("header needs a method column and at least one metric".into()));
        }
        let metrics: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut methods = Vec::new();
        let mut values = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| fmt(e.to_string()))?;
            let mut cells = record.iter();
            let method = cells.next().unwrap_or_default().to_owned();
            let row = cells
                .enumerate()
                .map(|(m, cell)| {
                    if is_missing(cell) {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| {
                            fmt(format!("row {} metric `{}`: bad number `{cell}`", line + 2, metrics[m]))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            methods.push(method);
            values.push(row);
        }
        Self::new(methods, metrics, values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(file, path)
    }

    pub fn with_config(self, config: &GroupConfig) -> Result<Self> {
        let mut table = self.with_groups(config.groups.clone())?;
        for name in &config.lower_is_better {
            let m = table
                .metric_index(name)
                .ok_or_else(|| Error::invalid(format!("unknown metric `{name}` in lower_is_better")))?;
            table.higher_is_better[m] = false;
        }
        Ok(table)
    }

    pub fn with_groups(mut self, groups: Vec<Group>) -> Result<Self> {
        for g in &groups {
            for m in g.participants() {
                if self.method_index(m).is_none() {
                    return Err(Error::invalid(format!("group `{}` names unknown method `{m}`", g.name)));
                }
            }
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn set_higher_is_better(&mut self, metric: usize, higher: bool) {
        self.higher_is_better[metric] = higher;
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn value(&self, method: usize, metric: usize) -> Option<f64> {
        self.values[method][metric]
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == name)
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == name)
    }

    /// Rows reordered by `order` (indices into the current rows).
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            methods: order.iter().map(|&i| self.methods[i].clone()).collect(),
            values: order.iter().map(|&i| self.values[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Copy with one column replaced by `a·x + b`.
    pub fn rescaled(&self, metric: usize, a: f64, b: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.values {
            row[metric] = row[metric].map(|x| a * x + b);
        }
        out
    }

    pub fn with_value(&self, method: usize, metric: usize, value: Option<f64>) -> Self {
        let mut out = self.clone();
        out.values[method][metric] = value;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNos {
    pub group: String,
    /// Baseline first.
    pub methods: Vec<String>,
    pub nos: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Columns with `max == min`; they contribute 0 to every method.
    pub degenerate: Vec<bool>,
}

impl GroupNos {
    pub fn get(&self, method: &str) -> Option<f64> {
        self.methods.iter().position(|m| m == method).map(|i| self.nos[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NosResult {
    pub groups: Vec<GroupNos>,
}

impl NosResult {
    pub fn get(&self, group: &str, method: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.group == group)?.get(method)
    }
}

/// Normalized Overall Score per group: every metric is min-max scaled over
/// the group's rows (baseline included), then averaged and expressed in
/// percent.
pub fn nos(table: &MetricTable) -> Result<NosResult> {
    if table.groups.is_empty() {
        return Err(Error::invalid("NOS needs at least one group"));
    }
    let n_metrics = table.metrics.len();
    if n_metrics == 0 {
        return Err(Error::invalid("metric table has no metrics"));
    }
    let groups = table
        .groups
        .iter()
        .map(|group| {
            let names = group.participants();
            let rows: Vec<usize> = names
                .iter()
                .map(|m| table.method_index(m).expect("validated in with_groups"))
                .collect();
            let mut x = vec![vec![0.0; n_metrics]; rows.len()];
            for (r, &row) in rows.iter().enumerate() {
                for m in 0..n_metrics {
                    x[r][m] = table.values[row][m].ok_or_else(|| Error::MissingCell {
                        method: table.methods[row].clone(),
                        metric: table.metrics[m].clone(),
                    })?;
                }
            }
            let mut min = vec![f64::INFINITY; n_metrics];
            let mut max = vec![f64::NEG_INFINITY; n_metrics];
            for row in &x {
                for m in 0..n_metrics {
                    min[m] = min[m].min(row[m]);
                    max[m] = max[m].max(row[m]);
                }
            }
            let degenerate: Vec<bool> = (0..n_metrics).map(|m| max[m] == min[m]).collect();
            for m in (0..n_metrics).filter(|&m| degenerate[m]) {
                log::warn!(
                    "group `{}`: metric `{}` is constant; normalized to 0",
                    group.name,
                    table.metrics[m]
                );
            }
            let nos = x
                .iter()
                .map(|row| {
                    let total: f64 = (0..n_metrics)
                        .filter(|&m| !degenerate[m])
                        .map(|m| {
                            let span = max[m] - min[m];
                            if table.higher_is_better[m] {
                                (row[m] - min[m]) / span
                            } else {
                                (max[m] - row[m]) / span
                            }
                        })
                        .sum();
                    100.0 * total / n_metrics as f64
                })
                .collect();
            Ok(GroupNos {
                group: group.name.clone(),
                methods: names.iter().map(|s| s.to_string()).collect(),
                nos,
                min,
                max,
                degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NosResult { groups })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub method: String,
    /// `None` when the method has no values at all.
    pub average: Option<f64>,
    pub ranks: Vec<Option<f64>>,
}

impl RankEntry {
    pub fn available(&self) -> usize {
        self.ranks.iter().flatten().count()
    }
}

/// 1-based fractional ranks of `values`, best first; ties share the mean of
/// the positions they occupy.
pub fn fractional_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        if higher_is_better {
            ord.reverse()
        } else {
            ord
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end, averaged.
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Average rank of every method over the metrics it reports.
pub fn avg_rank(table: &MetricTable) -> Result<Vec<RankEntry>> {
    if table.methods.len() < 2 {
        return Err(Error::invalid("ranking needs at least 2 methods"));
    }
    let mut ranks = vec![vec![None; table.metrics.len()]; table.methods.len()];
    for m in 0..table.metrics.len() {
        let present: Vec<usize> = (0..table.methods.len())
            .filter(|&r| table.values[r][m].is_some())
            .collect();
        let vals: Vec<f64> = present.iter().map(|&r| table.values[r][m].expect("present")).collect();
        for (&r, rank) in present.iter().zip(fractional_ranks(&vals, table.higher_is_better[m])) {
            ranks[r][m] = Some(rank);
        }
    }
    Ok(table
        .methods
        .iter()
        .zip(ranks)
        .map(|(method, ranks)| {
            let got: Vec<f64> = ranks.iter().flatten().copied().collect();
            let average = if got.is_empty() {
                log::warn!("method `{method}` has no metrics; excluded from ranking");
                None
            } else {
                Some(got.iter().sum::<f64>() / got.len() as f64)
            };
            RankEntry {
                method: method.clone(),
                average,
                ranks,
            }
        })
        .collect())
}

/// Sample Pearson correlation, accumulated in one pass with running
/// co-moments.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!("{} x values vs {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance("x".into()));
    }
    if !(syy > 0.0) {
        return Err(Error::ZeroVariance("y".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

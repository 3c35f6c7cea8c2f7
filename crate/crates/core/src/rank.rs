//! Sensitivity probing and proportional rank allocation.
//!
//! Each layer is decomposed alone at a small constant rank, the network is
//! briefly fine-tuned, and the resulting accuracy drop is its sensitivity.
//! A group's rank budget is then split in proportion to those drops.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::network::{decompose_layer, LayerKind, NetworkSpec};

/// Layer name → rank.
pub type RankMap = BTreeMap<String, usize>;

pub const DEFAULT_PROBE_RANK: usize = 5;
pub const DEFAULT_PROBE_EPOCHS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Conv,
    Fc,
}

impl Group {
    pub fn of(kind: &LayerKind) -> Option<Group> {
        match kind {
            LayerKind::Conv { .. } | LayerKind::DecomposedConv { .. } => Some(Group::Conv),
            LayerKind::Fc { .. } | LayerKind::DecomposedFc { .. } => Some(Group::Fc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Conv => "conv",
            Group::Fc => "fc",
        }
    }

    pub fn parse(s: &str) -> Result<Group> {
        match s {
            "conv" => Ok(Group::Conv),
            "fc" => Ok(Group::Fc),
            other => invalid(format!("unknown layer group `{other}` (conv | fc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub group: Group,
    pub layer: String,
    pub probe_accuracy: f64,
    /// `baseline − probe_accuracy`, clamped at zero.
    pub loss: f64,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline: f64,
    pub rows: Vec<SensitivityRow>,
}

const TABLE_HEADER: &str = "group\tlayer\tprobe_accuracy\tloss\trank";

impl SensitivityReport {
    pub fn from_accuracies(baseline: f64, probes: impl IntoIterator<Item = (Group, String, f64)>) -> Self {
        let rows = probes
            .into_iter()
            .map(|(group, layer, acc)| SensitivityRow {
                group,
                layer,
                probe_accuracy: acc,
                loss: (baseline - acc).max(0.0),
                rank: None,
            })
            .collect();
        Self { baseline, rows }
    }

    /// Report built directly from losses, e.g. published measurements.
    pub fn from_losses(probes: impl IntoIterator<Item = (Group, String, f64)>) -> Self {
        let rows = probes
            .into_iter()
            .map(|(group, layer, loss)| SensitivityRow {
                group,
                layer,
                probe_accuracy: f64::NAN,
                loss: loss.max(0.0),
                rank: None,
            })
            .collect();
        Self { baseline: f64::NAN, rows }
    }

    /// Tab-separated table with a `# baseline` comment line; unknown
    /// accuracies and ranks print as `-`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let num = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{v:.6}") };
        writeln!(out, "# baseline\t{}", num(self.baseline)).unwrap();
        writeln!(out, "{TABLE_HEADER}").unwrap();
        for r in &self.rows {
            let rank = r.rank.map_or("-".to_string(), |v| v.to_string());
            writeln!(out, "{}\t{}\t{}\t{}\t{}", r.group.as_str(), r.layer, num(r.probe_accuracy), num(r.loss), rank).unwrap();
        }
        out
    }

    /// Parses [`to_table`](Self::to_table) output. The baseline line is
    /// optional.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut baseline = f64::NAN;
        let mut rows = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            let perr = |message: String| Error::Parse { offset: at, message };
            let num = |s: &str| -> Result<f64> {
                if s == "-" {
                    Ok(f64::NAN)
                } else {
                    s.parse().map_err(|_| perr(format!("`{s}` is not a number")))
                }
            };
            if let Some(rest) = line.strip_prefix("# baseline") {
                baseline = num(rest.trim())?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') || line == TABLE_HEADER {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(perr(format!("expected 5 tab-separated columns, got {}", cols.len())));
            }
            let loss = num(cols[3])?;
            if !(loss.is_finite()) {
                return Err(perr(format!("loss for `{}` must be a finite number", cols[1])));
            }
            rows.push(SensitivityRow {
                group: Group::parse(cols[0]).map_err(|e| perr(e.to_string()))?,
                layer: cols[1].to_string(),
                probe_accuracy: num(cols[2])?,
                loss: loss.max(0.0),
                rank: match cols[4] {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| perr(format!("`{s}` is not a rank")))?),
                },
            });
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                offset: 0,
                message: "sensitivity report has no rows".into(),
            });
        }
        Ok(Self { baseline, rows })
    }

    /// Copies allocated ranks into the report's rank column.
    pub fn with_ranks(mut self, ranks: &RankMap) -> Self {
        for r in &mut self.rows {
            r.rank = ranks.get(&r.layer).copied();
        }
        self
    }
}

/// Accuracy of `net` after decomposing only `layer` at `probe_rank` and
/// passing the result through `finetune`. `net` itself is left untouched.
pub fn probe_sensitivity(
    net: &NetworkSpec,
    layer: &str,
    probe_rank: usize,
    seed: u64,
    finetune: impl FnOnce(NetworkSpec) -> Result<NetworkSpec>,
    eval: impl FnOnce(&NetworkSpec) -> Result<f64>,
) -> Result<f64> {
    if probe_rank == 0 {
        return invalid("probe rank must be positive");
    }
    let probed = decompose_layer(net, layer, probe_rank, seed)?;
    eval(&finetune(probed)?)
}

/// Largest-remainder apportionment of `budget` over non-negative `weights`,
/// ties broken by position. All-zero weights split uniformly.
pub fn apportion(weights: &[f64], budget: usize) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Ok(Vec::new());
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return invalid("weights must be finite and non-negative");
    }
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if total == 0.0 {
        vec![budget as f64 / weights.len() as f64; weights.len()]
    } else {
        weights
            .iter()
            .map(|w| {
                let q = budget as f64 * (w / total);
                // Quotas that are integers up to rounding must not lose a
                // seat to floating-point noise.
                let r = q.round();
                if (q - r).abs() <= 1e-9 * budget as f64 {
                    r
                } else {
                    q
                }
            })
            .collect()
    };
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps layer order among equal remainders.
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite remainders")
    });
    for &i in order.iter().cycle().take(budget.saturating_sub(assigned)) {
        seats[i] += 1;
    }
    Ok(seats)
}

/// Per-group rank budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub conv: usize,
    pub fc: usize,
}

impl Budgets {
    pub fn get(&self, g: Group) -> usize {
        match g {
            Group::Conv => self.conv,
            Group::Fc => self.fc,
        }
    }
}

/// Splits each group's budget across its layers in proportion to their
/// sensitivity losses. Ranks in a group sum exactly to its budget and are
/// all at least 1.
pub fn allocate_ranks(report: &SensitivityReport, budgets: Budgets) -> Result<RankMap> {
    let mut ranks = RankMap::new();
    for group in [Group::Conv, Group::Fc] {
        let rows: Vec<&SensitivityRow> = report.rows.iter().filter(|r| r.group == group).collect();
        if rows.is_empty() {
            continue;
        }
        let budget = budgets.get(group);
        if budget < rows.len() {
            return invalid(format!(
                "{} budget {budget} is smaller than its {} layers",
                group.as_str(),
                rows.len()
            ));
        }
        let losses: Vec<f64> = rows.iter().map(|r| r.loss.max(0.0)).collect();
        let mut seats = apportion(&losses, budget)?;
        if seats.contains(&0) {
            // Every layer needs at least one rank: reserve one each and
            // apportion the rest, which keeps the split monotone in loss.
            seats = apportion(&losses, budget - rows.len())?.into_iter().map(|s| s + 1).collect();
        }
        for (row, s) in rows.iter().zip(seats) {
            if ranks.insert(row.layer.clone(), s).is_some() {
                return invalid(format!("layer `{}` appears twice in the report", row.layer));
            }
        }
    }
    Ok(ranks)
}

/// Largest rank each decomposable layer can usefully take: `S·D²` for conv
/// (the depthwise stage's input width) and `min(M, N)` for fc.
pub fn full_ranks(net: &NetworkSpec) -> RankMap {
    net.layers()
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::Conv { spec, .. } => Some((l.name.clone(), spec.in_channels * spec.kernel_size * spec.kernel_size)),
            LayerKind::Fc { weights, .. } => Some((l.name.clone(), weights.shape()[0].min(weights.shape()[1]))),
            _ => None,
        })
        .collect()
}

/// `fraction` of [`full_ranks`], rounded, at least 1.
pub fn scaled_ranks(net: &NetworkSpec, fraction: f64) -> RankMap {
    full_ranks(net)
        .into_iter()
        .map(|(k, r)| (k, ((r as f64 * fraction).round() as usize).max(1)))
        .collect()
}

/// `layer = rank` lines; `#` starts a comment.
pub fn parse_rank_file(text: &str) -> Result<RankMap> {
    let mut ranks = RankMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { offset: at, message };
        let (name, value) = body.split_once('=').ok_or_else(|| perr(format!("expected `layer = rank`, got `{body}`")))?;
        let name = name.trim().trim_matches('"').to_string();
        let rank: usize = value.trim().parse().map_err(|_| perr(format!("`{}` is not a rank", value.trim())))?;
        if rank == 0 {
            return invalid(format!("rank for `{name}` must be positive"));
        }
        if ranks.insert(name.clone(), rank).is_some() {
            return Err(perr(format!("duplicate rank for `{name}`")));
        }
    }
    Ok(ranks)
}

pub fn format_rank_file(ranks: &RankMap) -> String {
    ranks.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

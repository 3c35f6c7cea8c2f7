use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cpcomp::network::{alexnet, count_params, decompose_layer, format, NetworkSpec};
use cpcomp::rank::{
    allocate_ranks, format_rank_file, full_ranks, parse_rank_file, probe_sensitivity, scaled_ranks, Budgets, Group,
    RankMap, SensitivityReport,
};
use cpcomp::train::data::{PATTERN_CLASSES, PATTERN_SHAPE};
use cpcomp::train::{
    evaluate, iterative_compress, oneshot_compress, synthetic_patterns, toy_network, train_baseline, Split, StageLog,
    TrainConfig,
};
use cpcomp::verify;

use crate::config::Config;
use crate::{AllocateArgs, Arch, DecomposeArgs, InitArgs, InitKind, ProbeArgs, RankSource, ReportArgs, Schedule, TrainArgs, VerifyArgs};

/// Ranks that do not fit the network or their budget.
#[derive(Debug)]
pub struct InvalidRanks(pub String);

impl fmt::Display for InvalidRanks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid ranks: {}", self.0)
    }
}

impl std::error::Error for InvalidRanks {}

#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(cpcomp::Error::Diverged(_)) = cause.downcast_ref::<cpcomp::Error>() {
            return 3;
        }
        if cause.is::<InvalidRanks>() {
            return 2;
        }
        if cause.is::<VerifyFailed>() {
            return 4;
        }
    }
    1
}

/// Library results of rank handling: argument errors become [`InvalidRanks`].
fn rank_step<T>(r: cpcomp::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        cpcomp::Error::InvalidArgument(m) => InvalidRanks(m).into(),
        other => other.into(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_model(path: &Path) -> Result<NetworkSpec> {
    format::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn save_model(net: &NetworkSpec, path: &Path) -> Result<()> {
    format::save(net, path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn read_ranks(path: &Path) -> Result<RankMap> {
    rank_step(parse_rank_file(&read_text(path)?)).with_context(|| format!("in ranks file {}", path.display()))
}

/// `conv=N,fc=M`; a group left out gets a zero budget.
pub fn parse_budgets(text: &str) -> Result<Budgets> {
    let mut budgets = Budgets { conv: 0, fc: 0 };
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (group, value) = part.split_once('=').with_context(|| format!("expected `group=N`, got `{part}`"))?;
        let value: usize = value.trim().parse().with_context(|| format!("`{}` is not a budget", value.trim()))?;
        match Group::parse(group.trim())? {
            Group::Conv => budgets.conv = value,
            Group::Fc => budgets.fc = value,
        }
    }
    Ok(budgets)
}

fn task(cfg: &Config, seed: u64) -> Result<Split> {
    Ok(synthetic_patterns(cfg.data.train, cfg.data.test, seed)?)
}

fn check_task_model(net: &NetworkSpec) -> Result<()> {
    if net.input_shape() != PATTERN_SHAPE || net.output_shape() != [PATTERN_CLASSES] {
        bail!(
            "model maps {:?} to {:?}; the built-in task needs {:?} to [{PATTERN_CLASSES}]",
            net.input_shape(),
            net.output_shape(),
            PATTERN_SHAPE
        );
    }
    Ok(())
}

fn trained_reference(tc: &TrainConfig, data: &Split) -> Result<NetworkSpec> {
    let (net, _) = train_baseline(&toy_network(tc.seed)?, &data.train, tc)?;
    eprintln!("baseline test accuracy {:.4}", evaluate(&net, &data.test)?.accuracy);
    Ok(net)
}

pub fn init(cfg: &Config, a: InitArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let net = match a.kind {
        InitKind::Random => verify::random_model(seed)?,
        InitKind::Toy => toy_network(seed)?,
        InitKind::Trained => {
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            trained_reference(&tc, &task(cfg, seed)?)?
        }
    };
    save_model(&net, &a.out)
}

/// Evenly weighted report over the given layers, for budgets without a probe.
fn uniform_report(layers: impl IntoIterator<Item = (Group, String)>) -> SensitivityReport {
    SensitivityReport::from_losses(layers.into_iter().map(|(g, l)| (g, l, 0.0)))
}

fn budget_ranks(budget: &str, sensitivity: Option<&Path>, layers: Vec<(Group, String)>) -> Result<RankMap> {
    let budgets = parse_budgets(budget)?;
    let report = match sensitivity {
        Some(p) => SensitivityReport::from_table(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => uniform_report(layers),
    };
    rank_step(allocate_ranks(&report, budgets))
}

pub fn decompose(cfg: &Config, a: DecomposeArgs) -> Result<()> {
    if a.arch == Some(Arch::Alexnet) {
        return decompose_alexnet(cfg, &a);
    }
    let path = a.model.as_deref().expect("clap requires --model without --arch");
    let mut net = load_model(path)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let ranks = match &a.source {
        RankSource { ranks: Some(p), .. } => read_ranks(p)?,
        RankSource { rank_budget: Some(b), .. } => {
            let layers = net
                .layers()
                .iter()
                .filter_map(|l| Group::of(&l.kind).filter(|_| l.kind.is_decomposable()).map(|g| (g, l.name.clone())))
                .collect();
            budget_ranks(b, a.sensitivity.as_deref(), layers)?
        }
        RankSource { full_rank: true, .. } => RankMap::new(),
        _ => bail!("one of --ranks, --rank-budget or --full-rank is required"),
    };
    let decomposable = net.decomposable_layers();
    if let Some(name) = ranks.keys().find(|k| !decomposable.contains(k)) {
        return Err(InvalidRanks(format!("`{name}` is not an undecomposed conv or fc layer of {}", path.display())).into());
    }
    for (i, name) in decomposable.iter().enumerate() {
        if let Some(&r) = ranks.get(name) {
            net = rank_step(decompose_layer(&net, name, r, seed.wrapping_add(i as u64))).with_context(|| format!("decomposing `{name}`"))?;
        }
    }
    print!("{}", count_params(&net).to_table());
    match &a.out {
        Some(out) => save_model(&net, out),
        None => {
            eprintln!("no --out given; decomposed model not written");
            Ok(())
        }
    }
}

fn decompose_alexnet(cfg: &Config, a: &DecomposeArgs) -> Result<()> {
    let convention = alexnet::Convention::parse(a.convention.as_deref().unwrap_or(&cfg.alexnet.convention))?;
    let ranks: RankMap = match &a.source {
        RankSource { full_rank: true, .. } => {
            print!("{}", alexnet::original_report().to_table());
            return Ok(());
        }
        RankSource { ranks: Some(p), .. } => read_ranks(p)?,
        RankSource { rank_budget: Some(b), .. } => {
            let layers = alexnet::layers()
                .iter()
                .map(|g| {
                    let group = if matches!(g, alexnet::Geometry::Conv { .. }) { Group::Conv } else { Group::Fc };
                    (group, g.name().to_string())
                })
                .collect();
            budget_ranks(b, a.sensitivity.as_deref(), layers)?
        }
        _ => alexnet::REFERENCE_RANKS.iter().map(|&(n, r)| (n.to_string(), r)).collect(),
    };
    let known: Vec<&str> = alexnet::layers().iter().map(|g| g.name()).collect();
    if let Some(name) = ranks.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(InvalidRanks(format!("AlexNet has no layer `{name}`")).into());
    }
    let pairs: Vec<(&str, usize)> = ranks.iter().map(|(n, &r)| (n.as_str(), r)).collect();
    print!("{}", rank_step(alexnet::compressed_report(&pairs, convention))?.to_table());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let table = match (&a.model, a.arch) {
        (Some(p), _) => count_params(&load_model(p)?).to_table(),
        (None, Some(Arch::Alexnet)) => alexnet::original_report().to_table(),
        (None, None) => unreachable!("clap requires --model or --arch"),
    };
    print!("{table}");
    Ok(())
}

pub fn probe(cfg: &Config, a: ProbeArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    check_task_model(&net)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let probe_rank = a.probe_rank.unwrap_or(cfg.probe.rank);
    let epochs = a.probe_epochs.unwrap_or(cfg.probe.epochs);
    if probe_rank == 0 {
        return Err(InvalidRanks("probe rank must be positive".into()).into());
    }
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    tc.validate()?;
    let data = task(cfg, seed)?;
    let baseline = evaluate(&net, &data.test)?.accuracy;
    let limits = full_ranks(&net);
    let mut probes = Vec::new();
    for layer in net.layers().iter().filter(|l| l.kind.is_decomposable()) {
        let group = Group::of(&layer.kind).expect("decomposable layers have a group");
        let rank = probe_rank.min(limits[&layer.name]);
        let acc = probe_sensitivity(
            &net,
            &layer.name,
            rank,
            seed,
            |n| Ok(cpcomp::train::train(&n, &data.train, &tc, epochs)?.0),
            |n| Ok(evaluate(n, &data.test)?.accuracy),
        )
        .with_context(|| format!("probing `{}`", layer.name))?;
        eprintln!("probed {} at rank {rank}: accuracy {acc:.4}", layer.name);
        probes.push((group, layer.name.clone(), acc));
    }
    print!("{}", SensitivityReport::from_accuracies(baseline, probes).to_table());
    Ok(())
}

pub fn allocate(a: AllocateArgs) -> Result<()> {
    let report = SensitivityReport::from_table(&read_text(&a.sensitivity)?).with_context(|| format!("in {}", a.sensitivity.display()))?;
    let ranks = rank_step(allocate_ranks(&report, parse_budgets(&a.rank_budget)?))?;
    let text = format_rank_file(&ranks);
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("cannot write {}", out.display()))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn log_table(log: &StageLog) -> String {
    let mut out = String::from("stage\tlayer\trank\tepochs\tpre_loss\tpre_accuracy\tpost_loss\tpost_accuracy\n");
    for r in &log.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\n",
            r.stage,
            r.layer,
            r.rank.map_or("-".to_string(), |v| v.to_string()),
            r.epochs,
            r.pre.loss,
            r.pre.accuracy,
            r.post.loss,
            r.post.accuracy
        ));
    }
    out
}

fn write_log(log: &StageLog, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, log.to_json_lines()).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

pub fn train(cfg: &Config, a: TrainArgs) -> Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.epochs_per_stage {
        tc.epochs_per_stage = v;
    }
    if let Some(v) = a.lr_step {
        tc.lr_step = v;
    }
    tc.validate()?;
    let fraction = cfg.schedule.rank_fraction;
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!("schedule.rank_fraction must lie in (0, 1], got {fraction}");
    }
    let ranks = a.ranks.as_deref().map(read_ranks).transpose()?;
    let data = task(cfg, tc.seed)?;
    let net = match &a.model {
        Some(p) => {
            let net = load_model(p)?;
            check_task_model(&net)?;
            net
        }
        None => trained_reference(&tc, &data)?,
    };
    let ranks = ranks.unwrap_or_else(|| scaled_ranks(&net, fraction));
    let result = match a.schedule {
        Schedule::Iterative => iterative_compress(&net, &data, &ranks, &tc),
        Schedule::Oneshot => oneshot_compress(&net, &data, &ranks, &tc),
    };
    match result {
        Ok((out, log)) => {
            print!("{}", log_table(&log));
            write_log(&log, a.log.as_deref())?;
            if let Some(p) = &a.out {
                save_model(&out, p)?;
            }
            Ok(())
        }
        Err(aborted) => {
            print!("{}", log_table(&aborted.log));
            write_log(&aborted.log, a.log.as_deref())?;
            let context = format!("{} schedule", a.schedule);
            match aborted.error {
                cpcomp::Error::InvalidArgument(m) => Err(InvalidRanks(m)).context(context),
                _ => Err(anyhow::Error::new(*aborted)).context(context),
            }
        }
    }
}

pub fn verify(cfg: &Config, a: VerifyArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let net = match &a.model {
        Some(p) => load_model(p)?,
        None => verify::random_model(seed)?,
    };
    let results = verify::verify_model(&net, a.cases.unwrap_or(cfg.verify.cases), seed)?;
    println!("check\tstatus\tcases\tworst\ttolerance");
    let mut failed = 0;
    for r in &results {
        println!("{}", r.summary());
        for f in &r.failures {
            eprintln!("{}: {f}", r.name);
        }
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_parse() {
        assert_eq!(parse_budgets("conv=750,fc=900").unwrap(), Budgets { conv: 750, fc: 900 });
        assert_eq!(parse_budgets("fc=900").unwrap(), Budgets { conv: 0, fc: 900 });
        assert!(parse_budgets("conv750").is_err());
        assert!(parse_budgets("pool=3").is_err());
        assert!(parse_budgets("fc=-1").is_err());
    }

    #[test]
    fn exit_codes_follow_the_cause() {
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
        assert_eq!(exit_code(&anyhow::Error::new(InvalidRanks("x".into())).context("outer")), 2);
        assert_eq!(exit_code(&anyhow::Error::new(cpcomp::Error::Diverged("nan".into()))), 3);
        assert_eq!(exit_code(&VerifyFailed(1).into()), 4);
    }
}

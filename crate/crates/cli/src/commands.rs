use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use psm::checkpoint::load_checkpoint;
use psm::data::{augment_batch, load_dataset, ClusterSpec, Dataset, Split};
use psm::diagnostics::{gradient_profile, knn_probe, linear_probe, purity, PurityReport};
use psm::memory_bank::MemoryBank;
use psm::network::{forward_online, forward_target, BnMode, NetworkParams};
use psm::numerics::l2_normalize_rows;
use psm::pnsm::{mine_negatives, MiningConfig, StreamKey};
use psm::trainer::{
    component_grid, pretrain, pretrain_baseline, representations, run_ablation_suite,
    strategy_grid, sweep_grid, write_ablation_csv, TrainConfig,
};

use crate::args::{
    AblateArgs, DataArgs, DiagnoseArgs, Diagnostic, Grid, MineArgs, MineMode, Overrides,
    PretrainArgs, ProbeArgs, ProbeMode,
};
use crate::error::{bad_data, usage, CliResult, Context};

const TAG_DIAGNOSE: u64 = 0x4447;
const TAG_MINE: u64 = 0x4D4E;

/// Parses `c4,d32,n512,sep6[,t128][,s7]`. The test split defaults to a
/// quarter of the train rows per class, the data seed to `seed`.
pub fn parse_synthetic(spec: &str, seed: u64) -> CliResult<ClusterSpec> {
    let bad = |why: String| usage(format!("--synthetic {spec:?}: {why}"));
    let (mut c, mut d, mut n, mut sep, mut t, mut s) = (None, None, None, None, None, None);
    for part in spec.split(',').map(str::trim) {
        let (key, value) = if let Some(v) = part.strip_prefix("sep") {
            ("sep", v)
        } else {
            let split = part
                .find(|ch: char| !ch.is_ascii_alphabetic())
                .unwrap_or(part.len());
            part.split_at(split)
        };
        let int = || {
            value
                .parse::<u64>()
                .map_err(|_| bad(format!("bad value in {part:?}")))
        };
        let slot_taken = match key {
            "c" => c.replace(int()? as usize).is_some(),
            "d" => d.replace(int()? as usize).is_some(),
            "n" => n.replace(int()? as usize).is_some(),
            "t" => t.replace(int()? as usize).is_some(),
            "s" => s.replace(int()?).is_some(),
            "sep" => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| bad(format!("bad value in {part:?}")))?;
                sep.replace(v).is_some()
            }
            _ => return Err(bad(format!("unknown field {part:?}"))),
        };
        if slot_taken {
            return Err(bad(format!("{key} given twice")));
        }
    }
    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| bad(format!("missing {name}")));
    let (classes, dim, train_per_class) = (need(c, "c")?, need(d, "d")?, need(n, "n")?);
    let separation = sep.ok_or_else(|| bad("missing sep".into()))?;
    if classes == 0 || dim == 0 || train_per_class == 0 {
        return Err(bad("c, d and n must be positive".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(bad("sep must be finite and nonnegative".into()));
    }
    let test_per_class = t.unwrap_or((train_per_class / 4).max(1));
    if test_per_class == 0 {
        return Err(bad("t must be positive".into()));
    }
    Ok(ClusterSpec {
        classes,
        dim,
        train_per_class,
        test_per_class,
        separation,
        seed: s.unwrap_or(seed),
    })
}

/// Rows `i % 5 == 4` form the held-out split.
fn holdout_split(data: &Dataset) -> CliResult<(Dataset, Dataset)> {
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 5 == 4);
    if test_idx.is_empty() {
        return Err(usage(
            "need at least 5 rows to split off a probe set; pass --test",
        ));
    }
    let mut test = data.select(&test_idx);
    test.split = Split::Test;
    Ok((data.select(&train_idx), test))
}

struct LoadedData {
    train: Dataset,
    test: Option<Dataset>,
}

impl LoadedData {
    fn with_test(self) -> CliResult<(Dataset, Dataset)> {
        match self.test {
            Some(test) => Ok((self.train, test)),
            None => holdout_split(&self.train),
        }
    }
}

fn load_data(args: &DataArgs, seed: u64) -> CliResult<LoadedData> {
    match (&args.data, &args.synthetic) {
        (Some(path), None) => {
            let train = load_dataset(path, Split::Train).data_at(path)?;
            let test = match &args.test {
                Some(p) => {
                    let test = load_dataset(p, Split::Test).data_at(p)?;
                    if test.dim() != train.dim() {
                        return Err(bad_data(format!(
                            "{}: dimension {} does not match the training data ({})",
                            p.display(),
                            test.dim(),
                            train.dim()
                        )));
                    }
                    Some(test)
                }
                None => None,
            };
            Ok(LoadedData { train, test })
        }
        (None, Some(spec)) => {
            let (train, test) = parse_synthetic(spec, seed)?
                .generate()
                .usage_err("--synthetic")?;
            Ok(LoadedData {
                train,
                test: Some(test),
            })
        }
        (None, None) => Err(usage("give exactly one data source: --data or --synthetic")),
        (Some(_), Some(_)) => Err(usage("--data and --synthetic are mutually exclusive")),
    }
}

fn read_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).usage_err(&p.display().to_string())?;
            TrainConfig::from_json(&text).usage_err(&p.display().to_string())
        }
        None => Ok(TrainConfig::default()),
    }
}

fn apply_overrides(cfg: &mut TrainConfig, o: &Overrides) {
    macro_rules! set {
        ($($field:ident <- $flag:ident),* $(,)?) => {
            $(if let Some(v) = o.$flag { cfg.$field = v; })*
        };
    }
    set!(
        seed <- seed, k <- k, a <- a, lambda <- lambda, t <- t, batch_size <- batch, epochs <- epochs,
        warmup_epochs <- warmup, bank_capacity <- bank_capacity, strategy <- strategy, probe_every <- probe_every,
    );
    cfg.use_pnsm &= !o.no_pnsm;
    cfg.use_soft &= !o.no_soft;
    cfg.use_hard &= !o.no_hard;
    cfg.symmetrize |= o.symmetrize;
    cfg.baseline |= o.baseline;
}

fn check_run(cfg: &TrainConfig, train: &Dataset) -> CliResult<()> {
    cfg.validate().usage_err("invalid config")?;
    cfg.arch(train.dim())
        .validate()
        .usage_err("invalid config")?;
    if train.len() < cfg.batch_size {
        return Err(usage(format!(
            "invalid config: batch size {} exceeds the {} training rows",
            cfg.batch_size,
            train.len()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).data_at(dir)
}

pub fn cmd_pretrain(args: &PretrainArgs) -> CliResult<()> {
    let mut cfg = read_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args.overrides);
    cfg.validate().usage_err("invalid config")?;
    let data = load_data(&args.data, cfg.seed)?;
    check_run(&cfg, &data.train)?;
    create_dir(&args.out)?;

    let test = data.test.as_ref();
    let run = if cfg.baseline {
        pretrain_baseline(&cfg, &data.train, test, cfg.use_pnsm)
    } else {
        pretrain(&cfg, &data.train, test)
    }
    .data_err("training failed")?;
    run.save(&args.out).data_at(&args.out)?;

    let last = run.metrics.last().expect("at least one epoch");
    print!("epochs {} loss {:.6}", run.metrics.len(), last.loss_total);
    if let Some(p) = last.purity_top1 {
        print!(" purity {p:.4}");
    }
    if let (Some(init), Some(knn)) = (run.initial_knn, run.final_knn()) {
        print!(" knn {knn:.4} (init {init:.4})");
    }
    println!();
    Ok(())
}

fn load_params(path: &Path) -> CliResult<NetworkParams> {
    load_checkpoint(path).data_at(path)
}

fn check_dim(params: &NetworkParams, data: &Dataset) -> CliResult<()> {
    if params.arch.input_dim != data.dim() {
        return Err(bad_data(format!(
            "data has dimension {}, the checkpoint expects {}",
            data.dim(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

pub fn cmd_probe(args: &ProbeArgs) -> CliResult<()> {
    if args.knn_k == 0 {
        return Err(usage("--knn-k must be at least 1"));
    }
    if args.mode == ProbeMode::Linear && !(args.probe_lr > 0.0 && args.probe_lr.is_finite()) {
        return Err(usage("--probe-lr must be positive"));
    }
    let params = load_params(&args.checkpoint)?;
    let (train, test) = load_data(&args.data, 0)?.with_test()?;
    check_dim(&params, &train)?;
    let branch = &params.online.branch;
    let rt = representations(branch, &train.features).data_err("encoding")?;
    let rs = representations(branch, &test.features).data_err("encoding")?;
    match args.mode {
        ProbeMode::Knn => {
            let acc =
                knn_probe(&rt, &train.labels, &rs, &test.labels, args.knn_k).data_err("probe")?;
            println!("knn@{} top1 {acc:.4}", args.knn_k);
        }
        ProbeMode::Linear => {
            let r = linear_probe(
                &rt,
                &train.labels,
                &rs,
                &test.labels,
                args.probe_epochs,
                args.probe_lr,
            )
            .data_err("probe")?;
            println!("linear top1 {:.4}", r.top1);
            println!("linear top{} {:.4}", r.k, r.topk);
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let config_path = args.config.clone().or_else(|| {
        let p = sibling(&args.checkpoint, "config.json");
        p.exists().then_some(p)
    });
    let cfg = read_config(config_path.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    if args.what == Diagnostic::Gradients && args.depth == 0 {
        return Err(usage("--depth must be positive"));
    }
    let params = load_params(&args.checkpoint)?;
    let bank_path = args
        .bank
        .clone()
        .unwrap_or_else(|| sibling(&args.checkpoint, "bank.psmb"));
    let bank = MemoryBank::load(&bank_path).data_at(&bank_path)?;
    let data = load_data(&args.data, seed)?.train;
    check_dim(&params, &data)?;
    if bank.dim() != params.arch.projection_dim() {
        return Err(bad_data(format!(
            "{}: bank dimension {} does not match the checkpoint projection ({})",
            bank_path.display(),
            bank.dim(),
            params.arch.projection_dim()
        )));
    }

    let (x1, x2) = augment_batch(&data.features, &cfg.augment, seed, &[TAG_DIAGNOSE])
        .usage_err("augmentation")?;
    let z2 = forward_target(&params.target, &x2, BnMode::Running).data_err("target forward")?;
    match args.what {
        Diagnostic::Gradients => {
            if bank.len() < args.depth {
                return Err(bad_data(format!(
                    "{}: bank holds {} entries, --depth is {}",
                    bank_path.display(),
                    bank.len(),
                    args.depth
                )));
            }
            let out =
                forward_online(&params.online, &x1, BnMode::Running).data_err("online forward")?;
            let q = l2_normalize_rows(&out.q1_raw).matrix;
            let profile =
                gradient_profile(&q, &z2, &bank, args.depth).data_err("gradient profile")?;
            create_dir(&args.out)?;
            let path = args.out.join("gradient_profile.csv");
            profile.save_csv(&path).data_at(&path)?;
            println!(
                "ranks {} positive_rank {:.2}",
                args.depth, profile.positive_rank
            );
        }
        Diagnostic::Purity => {
            if !bank.has_labels() || bank.is_empty() {
                return Err(bad_data(format!(
                    "{}: purity needs a nonempty labelled bank",
                    bank_path.display()
                )));
            }
            if cfg.k == 0 {
                return Err(usage("purity needs k >= 1"));
            }
            let epoch = params.optimizer.epoch as usize;
            let mut report = PurityReport::new(cfg.k);
            let rows: Vec<usize> = (0..data.len()).collect();
            for (b, chunk) in rows.chunks(cfg.batch_size.max(1)).enumerate() {
                let mined = chunk
                    .iter()
                    .map(|&i| {
                        bank.query_topk(z2.row(i), cfg.k)
                            .map(|s| s.mined_labels(&bank).unwrap_or_default())
                    })
                    .collect::<psm::Result<Vec<_>>>()
                    .data_err("bank query")?;
                let labels: Vec<i64> = chunk.iter().map(|&i| data.labels[i]).collect();
                report.push(epoch, b, purity(&mined, &labels).data_err("purity")?);
            }
            create_dir(&args.out)?;
            let path = args.out.join("purity.csv");
            report.save_csv(&path).data_at(&path)?;
            let mean = report.epoch_mean(epoch).unwrap_or(0.0);
            println!("batches {} mean_purity {mean:.4}", report.records.len());
        }
    }
    Ok(())
}

pub fn cmd_mine(args: &MineArgs) -> CliResult<()> {
    let mining = MiningConfig::new(args.a).usage_err("--a")?;
    if let Some(s) = args.s_pos {
        if !(-1.0..=1.0).contains(&s) {
            return Err(usage("--s-pos must lie in [-1, 1]"));
        }
    }
    let bank = MemoryBank::load(&args.bank).data_at(&args.bank)?;
    let queries = load_dataset(&args.query, Split::Test).data_at(&args.query)?;
    if queries.dim() != bank.dim() {
        return Err(bad_data(format!(
            "{}: query dimension {} does not match the bank ({})",
            args.query.display(),
            queries.dim(),
            bank.dim()
        )));
    }
    if bank.is_empty() {
        return Err(bad_data(format!("{}: bank is empty", args.bank.display())));
    }
    let q = l2_normalize_rows(&queries.features).matrix;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e: std::io::Error| bad_data(format!("stdout: {e}"));
    match args.mode {
        MineMode::Positive => {
            writeln!(out, "query\trank\tindex\tsimilarity").map_err(io)?;
            for (i, row) in q.iter_rows().enumerate() {
                let set = bank.query_topk(row, args.k).data_err("bank query")?;
                for (r, (&j, s)) in set
                    .bank_indices
                    .iter()
                    .zip(&set.similarities[1..])
                    .enumerate()
                {
                    writeln!(out, "{i}\t{}\t{j}\t{s:.6}", r + 1).map_err(io)?;
                }
            }
        }
        MineMode::Negative => {
            let candidates = bank.entries();
            let key = StreamKey {
                seed: args.seed,
                tag: TAG_MINE,
                epoch: 0,
                step: 0,
            };
            writeln!(out, "query\tindex\tprobability").map_err(io)?;
            for (i, row) in q.iter_rows().enumerate() {
                let s_pos = match args.s_pos {
                    Some(s) => s,
                    None => bank
                        .similarities(row)
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max),
                };
                let mined = mine_negatives(row, s_pos, &candidates, &mining, &mut key.query_rng(i))
                    .data_err("negative mining")?;
                for &j in &mined.retained {
                    writeln!(out, "{i}\t{j}\t{:.6}", mined.probabilities[j]).map_err(io)?;
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let mut base = read_config(args.config.as_deref())?;
    apply_overrides(&mut base, &args.overrides);
    let grid = match args.grid {
        Grid::Strategies => strategy_grid(&base),
        Grid::Components => component_grid(&base),
        Grid::Sweep => {
            let param = args
                .param
                .as_deref()
                .ok_or_else(|| usage("--grid sweep needs --param"))?;
            if args.values.is_empty() {
                return Err(usage("--grid sweep needs --values"));
            }
            sweep_grid(&base, param, &args.values).usage_err("sweep")?
        }
    };
    let seeds = if args.seeds.is_empty() {
        vec![base.seed]
    } else {
        args.seeds.clone()
    };
    let cells: Vec<_> = seeds
        .iter()
        .flat_map(|&seed| {
            grid.iter().cloned().map(move |mut c| {
                c.config.seed = seed;
                c
            })
        })
        .collect();
    let (train, test) = load_data(&args.data, base.seed)?.with_test()?;
    for c in &cells {
        check_run(&c.config, &train).usage_err(&format!("cell {}", c.name))?;
    }
    create_dir(&args.out)?;
    let rows = run_ablation_suite(&cells, &train, &test).data_err("ablation")?;
    let path = args.out.join("ablation.csv");
    let file = fs::File::create(&path).data_at(&path)?;
    write_ablation_csv(&rows, file).data_at(&path)?;
    write_ablation_csv(&rows, std::io::stdout()).data_err("stdout")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spec_parses_in_any_order() {
        let s = parse_synthetic("c4,d32,n512,sep6", 7).unwrap();
        assert_eq!(
            (s.classes, s.dim, s.train_per_class, s.test_per_class),
            (4, 32, 512, 128)
        );
        assert_eq!((s.separation, s.seed), (6.0, 7));
        let s = parse_synthetic("sep2.5, n10, s3, t4, d8, c2", 7).unwrap();
        assert_eq!(
            (s.classes, s.dim, s.train_per_class, s.test_per_class),
            (2, 8, 10, 4)
        );
        assert_eq!((s.separation, s.seed), (2.5, 3));
    }

    #[test]
    fn synthetic_spec_rejects_nonsense() {
        for bad in [
            "",
            "c4,d32,n512",
            "c4,d32,n512,sep6,c3",
            "c4,d32,n512,sepx",
            "c0,d2,n1,sep1",
            "q4",
        ] {
            assert!(parse_synthetic(bad, 0).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_only_touch_given_fields() {
        let mut cfg = TrainConfig::default();
        let o = Overrides {
            k: Some(3),
            no_soft: true,
            ..Overrides::default()
        };
        apply_overrides(&mut cfg, &o);
        assert_eq!(cfg.k, 3);
        assert!(!cfg.use_soft && cfg.use_hard && cfg.use_pnsm);
        assert_eq!(cfg.t, TrainConfig::default().t);
    }
}

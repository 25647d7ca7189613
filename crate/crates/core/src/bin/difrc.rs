use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use difrc::analysis::{cluster_purity, holdout_split, convergence_bound, kmeans, linear_probe, write_assignments_csv, BoundInputs, ProbeConfig};
use difrc::harness::{prepare, run_ablation_matrix, run_experiment, ExperimentConfig, KEYS};
use difrc::representation::{PcaBasis, PromptId, RepresentationDump, RepresentationKind};
use difrc::rng::{stream, Stream};
use difrc::{Error, Result};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// `--config` plus one flag per configuration key.
fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("key = value configuration file; flags override it"),
    );
    for &k in KEYS {
        let mut arg = Arg::new(k).long(flag_name(k)).value_name("VALUE").help(format!("override `{k}`"));
        if k == "out_dir" {
            arg = arg.visible_alias("out");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    Command::new("difrc")
        .about("Federated learning steered by diffusion representations")
        .subcommand_required(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more log output (repeatable)"),
        )
        .subcommand(config_args(Command::new("run").about("Run one federated experiment")))
        .subcommand(config_args(
            Command::new("ablate").about("Run baseline / tdcl_only / ndcr_only / full on one backbone"),
        ))
        .subcommand(config_args(
            Command::new("extract")
                .about("Dump fused denoising representations of the test split")
                .arg(
                    Arg::new("reps")
                        .long("reps")
                        .required(true)
                        .value_parser(value_parser!(PathBuf))
                        .help("output representation dump"),
                )
                .arg(
                    Arg::new("labels")
                        .long("labels")
                        .value_parser(value_parser!(PathBuf))
                        .help("optional output CSV of labels"),
                )
                .arg(
                    Arg::new("step")
                        .long("step")
                        .value_parser(value_parser!(usize))
                        .help("noising step (default: round(t_frac * T))"),
                ),
        ))
        .subcommand(
            Command::new("bound")
                .about("Evaluate the convergence bound")
                .args(
                    [
                        ("l0", "initial loss"),
                        ("lstar", "optimal loss"),
                        ("l1", "smoothness constant L1"),
                        ("l2", "Lipschitz constant L2"),
                        ("b", "representation bound B"),
                        ("sigma2", "gradient variance"),
                        ("eta", "learning rate"),
                        ("xi", "target gradient norm"),
                    ]
                    .map(|(n, h)| Arg::new(n).long(n).required(true).value_parser(value_parser!(f64)).help(h)),
                )
                .arg(Arg::new("classes").long("classes").required(true).value_parser(value_parser!(usize)))
                .arg(Arg::new("epochs").long("epochs").required(true).value_parser(value_parser!(usize))),
        )
        .subcommand(
            Command::new("probe")
                .about("Linear-probe accuracy and k-means purity of a representation dump")
                .arg(Arg::new("reps").long("reps").required(true).value_parser(value_parser!(PathBuf)))
                .arg(
                    Arg::new("labels")
                        .long("labels")
                        .value_parser(value_parser!(PathBuf))
                        .help("CSV whose last column is the label (overrides the dump's class ids)"),
                )
                .arg(Arg::new("clusters").long("clusters").value_parser(value_parser!(PathBuf)))
                .arg(Arg::new("k").long("k").value_parser(value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64))),
        )
}

fn build_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut explicit = Vec::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        explicit = cfg.apply_text(&text)?;
    }
    for &k in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
            explicit.push(k.to_string());
        }
    }
    cfg.finish(explicit.iter().any(|k| k == "clients"))?;
    Ok(cfg)
}

fn cmd_run(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    let r = run_experiment(&cfg)?;
    println!(
        "final_acc={:.4} best_acc={:.4} best_round={} -> {}",
        r.summary.final_acc,
        r.summary.best_acc,
        r.summary.best_round,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    for (ab, r) in run_ablation_matrix(&cfg)? {
        println!("{:<10} final_acc={:.4} best_acc={:.4}", ab.as_str(), r.summary.final_acc, r.summary.best_acc);
    }
    Ok(())
}

fn cmd_extract(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    let prep = prepare(&cfg)?;
    let f = &prep.frozen;
    let step = m.get_one::<usize>("step").copied().unwrap_or_else(|| cfg.t_step());
    let test = &prep.splits.test;
    let images: Vec<_> = test.images.iter().collect();
    let prompts = vec![PromptId::GenericObject; images.len()];
    let mut rng = stream(cfg.seed, Stream::Eval, &[step as u64]);
    let taps = difrc::representation::denoising_taps(&f.net, &images, &prompts, step, &f.schedule, &f.table, &mut rng)?;
    let basis = PcaBasis::fit_taps(&[&taps], cfg.d)?;
    let vectors = basis.fuse_batch(&taps)?;
    let dump = RepresentationDump {
        d: cfg.d,
        kind: RepresentationKind::Denoising,
        records: test.labels.iter().map(|&l| l as u32).zip(vectors).collect(),
    };
    dump.write_to(BufWriter::new(File::create(m.get_one::<PathBuf>("reps").expect("required"))?))?;
    if let Some(p) = m.get_one::<PathBuf>("labels") {
        let mut s = String::from("index,label\n");
        for (i, l) in test.labels.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        fs::write(p, s)?;
    }
    println!("wrote {} representations (t = {step})", test.len());
    Ok(())
}

fn cmd_bound(m: &ArgMatches) -> Result<()> {
    let g = |k: &str| *m.get_one::<f64>(k).expect("required");
    let inputs = BoundInputs {
        l0: g("l0"),
        lstar: g("lstar"),
        l1: g("l1"),
        l2: g("l2"),
        b: g("b"),
        sigma2: g("sigma2"),
        classes: *m.get_one::<usize>("classes").expect("required"),
        epochs: *m.get_one::<usize>("epochs").expect("required"),
        eta: g("eta"),
        xi: g("xi"),
    };
    let r = convergence_bound(&inputs).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Config(msg),
        other => other,
    })?;
    println!("omega1={}\nomega2={}\ndenominator={}", r.omega1, r.omega2, r.denominator);
    match r.r_min {
        Some(v) => println!("r_min={v}"),
        None => println!("r_min=infeasible"),
    }
    println!("eta_max={}", r.eta_max);
    Ok(())
}

fn read_label_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let last = line.rsplit(',').next().unwrap_or("").trim();
        match last.parse::<usize>() {
            Ok(v) => out.push(v),
            Err(_) if no == 0 => continue, // header
            Err(_) => return Err(Error::Corrupt(format!("{}: line {}: bad label `{last}`", path.display(), no + 1))),
        }
    }
    Ok(out)
}

fn cmd_probe(m: &ArgMatches) -> Result<()> {
    let dump = RepresentationDump::read_from(BufReader::new(File::open(m.get_one::<PathBuf>("reps").expect("required"))?))?;
    let labels: Vec<usize> = match m.get_one::<PathBuf>("labels") {
        Some(p) => read_label_csv(p)?,
        None => dump.records.iter().map(|(c, _)| *c as usize).collect(),
    };
    if labels.len() != dump.records.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} representations",
            labels.len(),
            dump.records.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let vectors: Vec<Vec<f64>> = dump.records.iter().map(|(_, v)| v.clone()).collect();
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let (train_idx, test_idx) = holdout_split(&labels, 0.2, seed)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        idx.iter().map(|&i| (vectors[i].clone(), labels[i])).unzip()
    };
    let (train, train_labels) = pick(&train_idx);
    let (test, test_labels) = pick(&test_idx);
    let acc = linear_probe(&train, &train_labels, &test, &test_labels, classes, &ProbeConfig::default())?;
    let k = m.get_one::<usize>("k").copied().unwrap_or(classes);
    let clusters = kmeans(&vectors, k, 100, seed)?;
    let purity = cluster_purity(&clusters.assignments, &labels)?;
    if let Some(p) = m.get_one::<PathBuf>("clusters") {
        write_assignments_csv(BufWriter::new(File::create(p)?), &clusters.assignments, &labels)?;
    }
    println!("probe_acc={acc}\npurity={purity}\nk={k}\ninertia={}", clusters.inertia);
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match matches.get_count("verbose") {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("extract", m)) => cmd_extract(m),
        Some(("bound", m)) => cmd_bound(m),
        Some(("probe", m)) => cmd_probe(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

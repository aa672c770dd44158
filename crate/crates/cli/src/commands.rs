use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use hiproto::classifier::{predict, DistanceKind, PredictOptions};
use hiproto::corpus::{stratified_split, synth_generate, FoldAssignment, Manifest, Recordings, ToyShape};
use hiproto::dsp::{log_mel, loudest_segment, read_wav_file, sample_segment, write_feature_cache};
use hiproto::encoder::{forward, gradcheck, load_weights, save_weights, EncoderConfig, EncoderParams};
use hiproto::evaluator::{eer_protocol, evaluate_episodes, Report};
use hiproto::protostore::{aggregate_meta, enroll, load_bank, save_bank, SupportSet};
use hiproto::seed::derive_seed;
use hiproto::trainer::{fit, sample_episode, EpisodeInputs, EpisodeObjective, EpisodeSpec, LossSpec, RunConfig};
use hiproto::{ClassId, Embedding, TaxonomyTree};
use rayon::prelude::*;

use crate::settings::Settings;
use crate::{
    BankCmd, ClassifyArgs, Cli, Command, CorpusCmd, DescribeArgs, Distance, EnrollArgs, EpisodeFlags, EvalCmd,
    EvalInputs, FeaturesCmd, Format, GradcheckArgs, LossMode, TaxonomyCmd, TrainArgs,
};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Taxonomy(TaxonomyCmd::Validate { file }) => taxonomy_validate(file),
        Command::Corpus(CorpusCmd::Synth {
            out,
            per_class,
            shape,
            seed,
        }) => corpus_synth(out, *per_class, shape, *seed),
        Command::Corpus(CorpusCmd::Split {
            manifest,
            out,
            folds,
            seed,
            config,
        }) => corpus_split(manifest, out, *folds, *seed, config.as_deref()),
        Command::Features(FeaturesCmd::Extract { manifest, out, seed }) => features_extract(manifest, out, *seed),
        Command::Train(args) => train(args),
        Command::Bank(BankCmd::Build {
            taxonomy,
            manifest,
            weights,
            out,
        }) => bank_build(taxonomy, manifest, weights, out),
        Command::Enroll(args) => enroll_cmd(args),
        Command::Classify(args) => classify(args, cli.format),
        Command::Eval(EvalCmd::Accuracy {
            inputs,
            episode,
            episodes,
            min_accuracy,
            max_hm,
        }) => eval_accuracy(inputs, episode, *episodes, *min_accuracy, *max_hm, cli.format),
        Command::Eval(EvalCmd::Eer {
            inputs,
            trials,
            pairs,
            max_eer,
        }) => eval_eer(inputs, *trials, *pairs, *max_eer, cli.format),
        Command::Gradcheck(args) => gradcheck_cmd(args, cli.format),
        Command::Describe(args) => describe(args, cli.format),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_tree(path: &Path) -> Result<TaxonomyTree> {
    TaxonomyTree::parse(&read_text(path)?).with_context(|| format!("taxonomy {}", path.display()))
}

fn load_manifest(path: &Path, tree: Option<&TaxonomyTree>) -> Result<Manifest> {
    let m = Manifest::load(path).with_context(|| format!("manifest {}", path.display()))?;
    if let Some(tree) = tree {
        m.validate(tree)?;
    }
    Ok(m)
}

fn load_params(path: &Path) -> Result<EncoderParams> {
    load_weights(&read_bytes(path)?, None).with_context(|| format!("weights {}", path.display()))
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad {what} `{s}` in `{text}`")))
        .collect()
}

fn parse_shape(text: &str) -> Result<ToyShape> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|s| s.parse().map_err(|_| anyhow!("bad shape `{text}`, expected TOPxMIDxLEAVES")))
        .collect::<Result<_>>()?;
    let [top, mid, leaves] = parts[..] else {
        bail!("bad shape `{text}`, expected TOPxMIDxLEAVES");
    };
    Ok(ToyShape { top, mid, leaves })
}

fn emit(report: &Report, format: Format) {
    match format {
        Format::Tsv => print!("{}", report.to_tsv()),
        Format::Pretty => print!("{}", report.to_pretty()),
    }
}

fn gate_failed(msg: String) -> Result<ExitCode> {
    eprintln!("gate failed: {msg}");
    Ok(ExitCode::from(1))
}

/// Applies episode-shape flags on top of `spec`.
fn apply_episode_flags(spec: &mut EpisodeSpec, flags: &EpisodeFlags) -> Result<()> {
    if let Some(v) = flags.ways {
        spec.ways = v;
    }
    if let Some(v) = flags.shots {
        spec.shots = v;
    }
    if let Some(v) = flags.queries {
        spec.queries = v;
    }
    if let Some(mix) = &flags.mix {
        let w: Vec<u32> = parse_list(mix, "mix weight")?;
        spec.weights = w
            .try_into()
            .map_err(|_| anyhow!("--mix takes three weights, got `{mix}`"))?;
    }
    Ok(())
}

/// Manifest entries of the requested folds, or all of them without a fold file.
fn select_folds(manifest: Manifest, folds: Option<&Path>, keep: impl Fn(u8) -> bool) -> Result<Manifest> {
    let Some(path) = folds else {
        return Ok(manifest);
    };
    let asg = FoldAssignment::parse(&read_text(path)?, &manifest)?;
    let wanted: Vec<u8> = (0..asg.fold_count).map(|f| f as u8).filter(|&f| keep(f)).collect();
    ensure!(!wanted.is_empty(), "no folds selected from {}", path.display());
    Ok(manifest.subset(&asg, &wanted)?)
}

/// Embedding of the loudest one-second window of a file.
fn embed_file(params: &EncoderParams, path: &Path) -> Result<Embedding> {
    let w = read_wav_file(path).with_context(|| format!("audio {}", path.display()))?;
    let seg = loudest_segment(&w)?;
    Ok(forward(params, &log_mel(&seg.waveform)?)?.0)
}

fn seeded(seed: u64) -> Settings {
    Settings {
        seed: Some(seed),
        ..Settings::default()
    }
}

fn taxonomy_validate(file: &Path) -> Result<ExitCode> {
    let tree = load_tree(file)?;
    let counts: Vec<String> = (0..tree.level_count()).map(|h| tree.node_count(h).to_string()).collect();
    println!(
        "ok\tlevels={}\tnodes={}\tspeakers={}",
        tree.level_count(),
        counts.join(","),
        tree.speaker_leaves().count()
    );
    Ok(ExitCode::SUCCESS)
}

fn corpus_synth(out: &Path, per_class: usize, shape: &str, seed: u64) -> Result<ExitCode> {
    ensure!(per_class > 0, "--per-class must be positive");
    let (tree, manifest) = synth_generate(parse_shape(shape)?, per_class, seed, out)?;
    seeded(seed).persist(out)?;
    println!(
        "wrote {} recordings of {} leaves under {}",
        manifest.len(),
        tree.node_count(tree.height()),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn corpus_split(manifest: &Path, out: &Path, folds: Option<usize>, seed: u64, config: Option<&Path>) -> Result<ExitCode> {
    let mut settings = Settings::load(config)?;
    settings.seed = Some(seed);
    if let Some(f) = folds {
        settings.folds.count = f;
    }
    let m = load_manifest(manifest, None)?;
    let asg = stratified_split(&m, settings.folds.count, seed)?;
    write_file(&out.join("folds.tsv"), asg.to_tsv(&m))?;
    settings.persist(out)?;
    Ok(ExitCode::SUCCESS)
}

fn features_extract(manifest: &Path, out: &Path, seed: u64) -> Result<ExitCode> {
    let m = load_manifest(manifest, None)?;
    let rows = m
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let w = read_wav_file(&m.resolve(e)).with_context(|| format!("audio {}", e.path.display()))?;
            let seg = sample_segment(&w, derive_seed(seed, i as u64))?;
            let rel = PathBuf::from("features").join(e.path.with_extension("logmel"));
            write_file(&out.join(&rel), write_feature_cache(&log_mel(&seg.waveform)?))?;
            Ok(format!(
                "{}\t{}\t{}\t{}\t{}\n",
                rel.display(),
                e.path.display(),
                e.leaf,
                seg.offset,
                seg.below_gate
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index = String::from("feature\tsource\tleaf\toffset\tbelow_gate\n");
    index.extend(rows);
    write_file(&out.join("features.tsv"), index)?;
    seeded(seed).persist(out)?;
    Ok(ExitCode::SUCCESS)
}

fn train_settings(args: &TrainArgs) -> Result<Settings> {
    let mut s = Settings::load(args.config.as_deref())?;
    s.seed = Some(args.seed);
    apply_episode_flags(&mut s.episode, &args.episode)?;
    if let Some(v) = args.epochs {
        s.episode.epochs = v;
    }
    if let Some(v) = args.episodes_per_epoch {
        s.episode.episodes_per_epoch = v;
    }
    match (args.loss, args.alpha) {
        (Some(LossMode::Flat), Some(_)) => bail!("--alpha has no effect with --loss flat"),
        (Some(LossMode::Flat), None) => s.loss = LossSpec::Flat,
        (_, Some(alpha)) => s.loss = LossSpec::Hierarchical { alpha },
        (Some(LossMode::Hierarchical), None) => {
            if s.loss == LossSpec::Flat {
                s.loss = LossSpec::default();
            }
        }
        (None, None) => {}
    }
    if let Some(v) = args.lr {
        s.adam.learning_rate = v;
    }
    if let Some(v) = args.l2 {
        s.adam.l2 = v;
    }
    if let Some(d) = args.distance {
        s.encoder.angular = d == Distance::Angular;
    }
    if let Some(w) = &args.widths {
        s.encoder.widths = parse_list(w, "width")?;
    }
    if let Some(v) = args.embedding_dim {
        s.encoder.embedding_dim = v;
    }
    if args.no_augment {
        s.augment.enabled = false;
    }
    if let Some(v) = args.checkpoint_every {
        s.train.checkpoint_every = v;
    }
    s.validate()?;
    Ok(s)
}

fn train(args: &TrainArgs) -> Result<ExitCode> {
    let s = train_settings(args)?;
    let tree = load_tree(&args.taxonomy)?;
    let manifest = load_manifest(&args.manifest, Some(&tree))?;
    let manifest = select_folds(manifest, args.folds.as_deref(), |f| !s.folds.eval.contains(&f))?;
    s.persist(&args.out)?;
    let recordings = Recordings::load(&manifest)?;
    let run = RunConfig {
        seed: args.seed,
        adam: s.adam,
        augment: s.augment.spec(),
        checkpoint_every: s.train.checkpoint_every,
        out_dir: Some(args.out.clone()),
    };
    let (params, log) = fit(&recordings, &tree, &s.encoder, &s.episode, s.loss, &run)?;
    write_file(&args.out.join("weights.hpw"), save_weights(&params))?;
    if let Some(last) = log.epochs.last() {
        let acc: Vec<String> = last.accuracy.iter().map(|a| format!("{a:.4}")).collect();
        println!("epoch {}\tloss {:.6}\taccuracy {}", last.epoch, last.loss, acc.join(","));
    }
    Ok(ExitCode::SUCCESS)
}

fn bank_build(taxonomy: &Path, manifest: &Path, weights: &Path, out: &Path) -> Result<ExitCode> {
    let tree = load_tree(taxonomy)?;
    let m = load_manifest(manifest, Some(&tree))?;
    let params = load_params(weights)?;
    let pairs = m
        .entries
        .par_iter()
        .map(|e| Ok((e.leaf.clone(), embed_file(&params, &m.resolve(e))?)))
        .collect::<Result<Vec<_>>>()?;
    let bank = aggregate_meta(&tree, &SupportSet::from_pairs(pairs)?)?;
    write_file(&out.join("bank.hpb"), save_bank(&bank))?;
    Ok(ExitCode::SUCCESS)
}

fn enroll_cmd(args: &EnrollArgs) -> Result<ExitCode> {
    let tree = load_tree(&args.taxonomy)?;
    let bank = load_bank(&read_bytes(&args.bank)?, &tree).with_context(|| format!("bank {}", args.bank.display()))?;
    let params = load_params(&args.weights)?;
    let leaf = ClassId::new(args.leaf.as_str())?;
    let tree = if tree.is_leaf(&leaf) {
        ensure!(args.parent.is_none(), "{leaf} is already a leaf; drop --parent");
        tree
    } else {
        let parent = args
            .parent
            .as_deref()
            .ok_or_else(|| anyhow!("{leaf} is not in the taxonomy; pass --parent to add it"))?;
        tree.with_leaf(leaf.clone(), &ClassId::new(parent)?, args.speaker)?
    };
    let embeddings = args
        .wavs
        .par_iter()
        .map(|p| embed_file(&params, p))
        .collect::<Result<Vec<_>>>()?;
    let bank = enroll(&bank, &tree, &leaf, &embeddings)?;
    write_file(&args.out.join("bank.hpb"), save_bank(&bank))?;
    write_file(&args.out.join("taxonomy.tsv"), tree.serialize())?;
    Ok(ExitCode::SUCCESS)
}

fn classify(args: &ClassifyArgs, format: Format) -> Result<ExitCode> {
    let tree = load_tree(&args.taxonomy)?;
    let bank = load_bank(&read_bytes(&args.bank)?, &tree).with_context(|| format!("bank {}", args.bank.display()))?;
    let params = load_params(&args.weights)?;
    let levels = tree.level_count();
    let thresholds = match (&args.thresholds, args.threshold) {
        (Some(t), _) => {
            let t: Vec<f64> = parse_list(t, "threshold")?;
            ensure!(t.len() == levels, "{} thresholds for {levels} levels", t.len());
            t
        }
        (None, Some(t)) => vec![t; levels],
        (None, None) => vec![f64::INFINITY; levels],
    };
    let options = PredictOptions {
        thresholds,
        consistent: args.consistent,
    };
    let q = embed_file(&params, &args.wav)?;
    let pred = predict(&q, &bank, &tree, DistanceKind::for_params(&params), &options)?;
    let mut out = String::new();
    match format {
        Format::Tsv => {
            out.push_str("level\tdecision\tposterior\tmin_distance\n");
            for l in &pred.levels {
                let _ = writeln!(out, "L{}\t{}\t{:.6}\t{:.6}", l.level + 1, l.decision, l.posterior, l.min_distance);
            }
        }
        Format::Pretty => {
            for l in &pred.levels {
                let _ = writeln!(
                    out,
                    "L{:<3} {:<24} p={:.3}  d={:.4}",
                    l.level + 1,
                    l.decision.to_string(),
                    l.posterior,
                    l.min_distance
                );
            }
        }
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

/// Loads what both evaluation commands share and persists the merged settings.
fn eval_setup(inputs: &EvalInputs, settings: &Settings) -> Result<(TaxonomyTree, Recordings, EncoderParams)> {
    settings.validate()?;
    let tree = load_tree(&inputs.taxonomy)?;
    let manifest = load_manifest(&inputs.manifest, Some(&tree))?;
    let manifest = select_folds(manifest, inputs.folds.as_deref(), |f| settings.folds.eval.contains(&f))?;
    let params = load_params(&inputs.weights)?;
    if let Some(out) = &inputs.out {
        settings.persist(out)?;
    }
    Ok((tree, Recordings::load(&manifest)?, params))
}

fn finish_report(report: &Report, inputs: &EvalInputs, name: &str, format: Format) -> Result<()> {
    emit(report, format);
    if let Some(out) = &inputs.out {
        write_file(&out.join(name), report.to_tsv())?;
    }
    Ok(())
}

fn eval_accuracy(
    inputs: &EvalInputs,
    episode: &EpisodeFlags,
    episodes: Option<usize>,
    min_accuracy: Option<f64>,
    max_hm: Option<f64>,
    format: Format,
) -> Result<ExitCode> {
    let mut s = Settings::load(inputs.config.as_deref())?;
    s.seed = Some(inputs.seed);
    apply_episode_flags(&mut s.episode, episode)?;
    if let Some(e) = episodes {
        s.eval.episodes = e;
    }
    ensure!(s.eval.episodes > 0, "--episodes must be positive");
    let (tree, recordings, params) = eval_setup(inputs, &s)?;
    let run = evaluate_episodes(
        &params,
        &recordings,
        &tree,
        &s.episode,
        s.eval.episodes,
        &PredictOptions::open(tree.level_count()),
        inputs.seed,
    )?;
    let report = Report::accuracy(&run, &tree)?;
    finish_report(&report, inputs, "accuracy.tsv", format)?;
    if let Some(min) = min_accuracy {
        for l in 0..tree.level_count() {
            if let Some(v) = report.get("accuracy", Some(l)).and_then(|r| r.value) {
                if v.mean < min {
                    return gate_failed(format!("L{} accuracy {:.4} below {min}", l + 1, v.mean));
                }
            }
        }
    }
    if let Some(max) = max_hm {
        if let Some(v) = report.get("hierarchical_mistake", None).and_then(|r| r.value) {
            if v.mean > max {
                return gate_failed(format!("hierarchical mistake {:.4} above {max}", v.mean));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_eer(
    inputs: &EvalInputs,
    trials: Option<usize>,
    pairs: Option<usize>,
    max_eer: Option<f64>,
    format: Format,
) -> Result<ExitCode> {
    let mut s = Settings::load(inputs.config.as_deref())?;
    s.seed = Some(inputs.seed);
    if let Some(t) = trials {
        s.eval.trials = t;
    }
    if let Some(p) = pairs {
        s.eval.pairs = p;
    }
    ensure!(s.eval.trials > 0 && s.eval.pairs >= 2, "need at least one trial of two pairs");
    let (tree, recordings, params) = eval_setup(inputs, &s)?;
    let run = eer_protocol(&params, &recordings, &tree, &s.eer(), inputs.seed)?;
    let report = Report::eer(&run)?;
    finish_report(&report, inputs, "eer.tsv", format)?;
    if let Some(max) = max_eer {
        let mean = run.summary()?.mean;
        if mean > max {
            return gate_failed(format!("EER {mean:.4} above {max}"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(args: &GradcheckArgs, format: Format) -> Result<ExitCode> {
    ensure!(args.samples > 0, "--samples must be positive");
    ensure!(args.epsilon > 0.0, "--epsilon must be positive");
    let (tree, items) = hiproto::corpus::synth_waveforms(ToyShape::default(), 4, derive_seed(args.seed, 0))?;
    let spec = EpisodeSpec {
        ways: 4,
        shots: 2,
        queries: 2,
        weights: [0, 100, 0],
        ..Default::default()
    };
    let ep = sample_episode(&Recordings::new(items), &tree, &spec, None, derive_seed(args.seed, 1))?;
    let inputs = EpisodeInputs::from_episode(&ep);
    let distances = match args.distance {
        Some(d) => vec![d],
        None => vec![Distance::Euclidean, Distance::Angular],
    };
    let alphas = args.alpha.map_or_else(|| vec![-1.0, 0.0, 1.0], |a| vec![a]);
    let mut worst = 0.0f64;
    let mut out = String::new();
    if format == Format::Tsv {
        out.push_str("distance\talpha\tmax_rel_error\tchecked\tshrunk\tkink_skips\n");
    }
    for (i, &d) in distances.iter().enumerate() {
        let cfg = EncoderConfig {
            angular: d == Distance::Angular,
            ..EncoderConfig::test_config()
        };
        let params = EncoderParams::init(&cfg, derive_seed(args.seed, 2 + i as u64))?;
        for (k, &alpha) in alphas.iter().enumerate() {
            let obj = EpisodeObjective {
                inputs: &inputs,
                tree: &tree,
                loss: LossSpec::Hierarchical { alpha },
            };
            let seed = derive_seed(args.seed, 100 + (i * alphas.len() + k) as u64);
            let rep = gradcheck(&params, &obj, args.epsilon, args.samples, seed)?;
            worst = worst.max(rep.max_relative_error);
            let name = format!("{d:?}").to_lowercase();
            let _ = match format {
                Format::Tsv => writeln!(
                    out,
                    "{name}\t{alpha}\t{:.3e}\t{}\t{}\t{}",
                    rep.max_relative_error, rep.checked, rep.shrunk, rep.kink_skips
                ),
                Format::Pretty => writeln!(
                    out,
                    "{name:<10} α={alpha:<4} max rel error {:.3e} over {} scalars ({} smaller steps, {} redraws)",
                    rep.max_relative_error, rep.checked, rep.shrunk, rep.kink_skips
                ),
            };
        }
    }
    print!("{out}");
    println!("max_rel_error\t{worst:.3e}");
    if worst >= GRADCHECK_TOLERANCE {
        return gate_failed(format!("relative error {worst:.3e} not below {GRADCHECK_TOLERANCE}"));
    }
    Ok(ExitCode::SUCCESS)
}

fn describe(args: &DescribeArgs, format: Format) -> Result<ExitCode> {
    let params = match &args.weights {
        Some(w) => load_params(w)?,
        None => {
            let s = Settings::load(args.config.as_deref())?;
            EncoderParams::zeros(&s.encoder)?
        }
    };
    let d = params.describe();
    let cfg = params.config();
    let rows = [
        ("widths", format!("{:?}", cfg.widths)),
        ("embedding_dim", cfg.embedding_dim.to_string()),
        ("distance", if cfg.angular { "angular" } else { "euclidean" }.to_string()),
        ("parameters", d.parameters.to_string()),
        ("multiply_accumulates", d.multiply_accumulates.to_string()),
    ];
    for (k, v) in rows {
        match format {
            Format::Tsv => println!("{k}\t{v}"),
            Format::Pretty => println!("{k:<22}{v}"),
        }
    }
    Ok(ExitCode::SUCCESS)
}

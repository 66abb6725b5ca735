use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idreveal::feature::{read_sequence, DatasetManifest, FeatureSequence};
use idreveal::identifier::{
    evaluate, evaluate_by_group, export_distances, export_embeddings, parse_scores, run_protocol,
    verify_against, LabeledVideo, ReferenceSet, DEFAULT_THRESHOLD_SQ,
};
use idreveal::par::Exec;
use idreveal::synth::{
    build_benchmark, BenchmarkConfig, Label, TestLabels, WorldParams, TEST_LABELS, TEST_MANIFEST,
    TRAIN_MANIFEST, VAL_MANIFEST,
};
use idreveal::trainer::{LogRecord, Model, TrainConfig, Trainer, LOG_FILE};

/// Exit status for a video judged fake.
const EXIT_FAKE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "idreveal", version, about = "Identity-aware forgery detection on 3DMM feature sequences")]
struct Cli {
    /// Worker threads for data generation and batch scoring (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark: train/val/test feature files and manifests.
    GenData(GenDataArgs),
    /// Train the temporal network, and optionally the adversarial phase.
    Train(TrainArgs),
    /// Check one video against reference videos of the claimed identity.
    Verify(VerifyArgs),
    /// Score a labelled test manifest with leave-one-context-out references.
    Evaluate(EvaluateArgs),
    /// Write per-frame embeddings of every video in a manifest.
    Embed(EmbedArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training identities.
    #[arg(long, default_value_t = 16)]
    ids: usize,
    /// Validation identities.
    #[arg(long, default_value_t = 8)]
    val_ids: usize,
    /// Test identities.
    #[arg(long, default_value_t = 8)]
    test_ids: usize,
    /// Videos per identity.
    #[arg(long, default_value_t = 8)]
    vids: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Recording contexts; video v of every identity uses context v mod contexts.
    #[arg(long, default_value_t = 4)]
    contexts: usize,
    /// Face-swap fakes per test identity.
    #[arg(long, default_value_t = 4)]
    swaps: usize,
    /// Reenactment fakes per test identity.
    #[arg(long, default_value_t = 4)]
    reenactments: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    shape_scale: Option<f64>,
    #[arg(long)]
    context_shape_scale: Option<f64>,
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by gen-data (uses its train.tsv and val.tsv).
    #[arg(long, required_unless_present_all = ["train", "val"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "val")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, logs and resumable state.
    #[arg(long)]
    out: PathBuf,
    /// Base configuration (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the adversarial phase after phase 1.
    #[arg(long)]
    adversarial: bool,
    /// Continue from the state saved in --out.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    batch_ids: Option<usize>,
    #[arg(long)]
    batch_vids: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    lr_tid: Option<f64>,
    #[arg(long)]
    lr_gen: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    lambda_inv: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    val_batches: Option<usize>,
    #[arg(long)]
    tid_hidden: Option<usize>,
    #[arg(long)]
    gen_hidden: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(batch_ids => identities_per_batch, batch_vids => videos_per_identity, frames => frames,
             lr_tid => lr_tid, lr_gen => lr_gen, lambda_cycle => lambda_cycle,
             lambda_inv => lambda_inv, tau => tau, phase1_epochs => phase1_epochs,
             phase2_epochs => phase2_epochs, iterations => iterations_per_epoch,
             val_batches => validation_batches, tid_hidden => tid_hidden,
             gen_hidden => gen_hidden, groups => groupnorm_groups, seed => seed);
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Model checkpoint written by `train` (its .toml layout must sit alongside).
    #[arg(long)]
    model: PathBuf,
    /// Feature file of the video under test.
    #[arg(long)]
    test: PathBuf,
    /// Feature files of pristine reference videos.
    #[arg(long, num_args = 1.., required = true)]
    refs: Vec<PathBuf>,
    /// Squared-distance threshold above which a video is fake.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_SQ)]
    threshold_sq: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "scores_file")]
    model: Option<PathBuf>,
    /// Test manifest (defaults to test.tsv in --data).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Ground-truth table (defaults to test_labels.tsv next to the manifest).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Precomputed `distance<TAB>label` rows; skips embedding entirely.
    #[arg(long, conflicts_with_all = ["model", "manifest", "data"])]
    scores_file: Option<PathBuf>,
    /// Where to write distances.tsv and summary.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_SQ)]
    threshold_sq: f64,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output table: video_id, frame, then the embedding coordinates.
    #[arg(long)]
    out: PathBuf,
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("{}: no such file", p.display());
    }
    Ok(())
}

fn require_model(p: &Path) -> Result<()> {
    require_file(p)?;
    require_file(&p.with_extension("toml"))
}

fn kv(key: &str, value: impl std::fmt::Display) {
    println!("{key}\t{value}");
}

fn gen_data(a: &GenDataArgs, exec: Exec) -> Result<()> {
    let defaults = WorldParams::default();
    let cfg = BenchmarkConfig {
        train_ids: a.ids,
        val_ids: a.val_ids,
        test_ids: a.test_ids,
        vids_per_id: a.vids,
        frames: a.frames,
        contexts: a.contexts,
        swaps_per_id: a.swaps,
        reenactments_per_id: a.reenactments,
        seed: a.seed,
        world: WorldParams {
            shape_scale: a.shape_scale.unwrap_or(defaults.shape_scale),
            context_shape_scale: a.context_shape_scale.unwrap_or(defaults.context_shape_scale),
            noise_level: a.noise_level.unwrap_or(defaults.noise_level),
            ..defaults
        },
    };
    let bench = build_benchmark(&cfg, exec)?;
    let files = bench.write(&a.out)?;
    kv("train_videos", bench.train.len());
    kv("val_videos", bench.val.len());
    kv("test_videos", bench.test.len());
    kv("feature_files", files.feature_files);
    kv("train_manifest", files.train.display());
    kv("val_manifest", files.val.display());
    kv("test_manifest", files.test.display());
    kv("test_labels", files.labels.display());
    Ok(())
}

fn load_manifest(p: &Path) -> Result<Vec<FeatureSequence>> {
    let m = DatasetManifest::read(p).with_context(|| format!("reading manifest {}", p.display()))?;
    Ok(m.load()?)
}

fn train(a: &TrainArgs) -> Result<()> {
    let (train_path, val_path) = match (&a.data, &a.train, &a.val) {
        (_, Some(t), Some(v)) => (t.clone(), v.clone()),
        (Some(d), _, _) => (d.join(TRAIN_MANIFEST), d.join(VAL_MANIFEST)),
        _ => unreachable!("clap enforces a data source"),
    };
    require_file(&train_path)?;
    require_file(&val_path)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let mut config = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut config);
    config.validate()?;

    let train = load_manifest(&train_path)?;
    let val = load_manifest(&val_path)?;
    let state = a.out.join("state");
    let mut trainer = if a.resume {
        if !state.is_dir() {
            bail!("--resume given but {} holds no saved state", state.display());
        }
        Trainer::resume(&state, config, &train, &val)?
    } else {
        Trainer::new(config, &train, &val)?
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let report = |r: &LogRecord| {
        let adv = r.val_adv.map(|v| format!("\tval_adv\t{v:.4}")).unwrap_or_default();
        println!(
            "epoch\t{}\tphase\t{}\tval_accuracy\t{:.6}{adv}",
            r.epoch,
            r.phase,
            r.val_accuracy.unwrap_or(f64::NAN)
        );
    };
    while let Some(r) = trainer.phase1_epoch()? {
        report(&r);
        trainer.save_state(&state)?;
    }
    trainer.model().save(&a.out.join("phase1_model.idrc"))?;
    if a.adversarial {
        while let Some(r) = trainer.phase2_epoch()? {
            report(&r);
            trainer.save_state(&state)?;
        }
        idreveal::autodiff::write_checkpoint(&a.out.join("generator.idrc"), &trainer.gen.params)?;
    }
    trainer.save_state(&state)?;
    let model = trainer.model();
    model.save(&a.out.join("model.idrc"))?;
    trainer.log.write(&a.out.join(LOG_FILE))?;
    trainer.config.write(&a.out.join("config.toml"))?;
    if let Some((acc, _)) = &trainer.best {
        kv("best_phase1_val_accuracy", acc);
    }
    kv("model", a.out.join("model.idrc").display());
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<u8> {
    require_model(&a.model)?;
    require_file(&a.test)?;
    for r in &a.refs {
        require_file(r)?;
    }
    let model = Model::load(&a.model)?;
    let test = model.embed(&read_sequence(&a.test)?)?;
    let mut refs = Vec::new();
    for p in &a.refs {
        let mut e = model.embed(&read_sequence(p)?)?;
        e.identity_id = None;
        e.video_id = p.display().to_string();
        refs.push(e);
    }
    let n = refs.len();
    let set = ReferenceSet::new("claimed", refs, vec![None; n])?;
    let v = verify_against(&test, &set, a.threshold_sq)?;
    let fake = v.label == Label::Fake;
    kv("verdict", if fake { "FAKE" } else { "REAL" });
    kv("distance", v.distance);
    kv("threshold_sq", v.threshold_sq);
    for (p, d) in a.refs.iter().zip(&v.per_reference) {
        kv(&format!("reference\t{}", p.display()), d);
    }
    Ok(if fake { EXIT_FAKE } else { 0 })
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn evaluate_cmd(a: &EvaluateArgs, exec: Exec) -> Result<()> {
    if let Some(p) = &a.scores_file {
        require_file(p)?;
        let scores = parse_scores(&fs::read_to_string(p)?)?;
        let e = evaluate(&scores, a.threshold_sq)?;
        kv("videos", scores.len());
        kv("accuracy", e.accuracy);
        kv("auc", e.auc);
        if let Some(out) = &a.out {
            write_out(out, "summary.tsv", &format!("metric\tvalue\naccuracy\t{}\nauc\t{}\n", e.accuracy, e.auc))?;
        }
        return Ok(());
    }
    let model_path = a.model.as_ref().expect("clap requires --model without --scores-file");
    let manifest = match (&a.manifest, &a.data) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join(TEST_MANIFEST),
        (None, None) => bail!("give --manifest or --data"),
    };
    let labels = a
        .labels
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new("")).join(TEST_LABELS));
    require_model(model_path)?;
    require_file(&manifest)?;
    require_file(&labels)?;

    let model = Model::load(model_path)?;
    let seqs = load_manifest(&manifest)?;
    let truth = TestLabels::read(&labels)?;
    let mut gt = Vec::with_capacity(seqs.len());
    for s in &seqs {
        gt.push(truth.get(&s.video_id).with_context(|| format!("no label for video `{}`", s.video_id))?);
    }
    let embs = model.embed_all(&seqs, exec)?;
    let items: Vec<LabeledVideo> = seqs
        .iter()
        .zip(&embs)
        .zip(&gt)
        .map(|((seq, embedding), &(label, kind))| LabeledVideo { seq, embedding, label, kind })
        .collect();
    let scored = run_protocol(&items, a.threshold_sq, exec)?;
    let groups = evaluate_by_group(&scored, a.threshold_sq)?;
    let mut summary = String::from("metric\tvalue\n");
    for (g, e) in &groups {
        let prefix = if g == "all" { String::new() } else { format!("{g}_") };
        for (k, v) in [("accuracy", e.accuracy), ("auc", e.auc)] {
            kv(&format!("{prefix}{k}"), v);
            summary.push_str(&format!("{prefix}{k}\t{v}\n"));
        }
    }
    kv("videos", scored.len());
    if let Some(out) = &a.out {
        write_out(out, "distances.tsv", &export_distances(&scored))?;
        write_out(out, "summary.tsv", &summary)?;
    }
    Ok(())
}

fn embed(a: &EmbedArgs, exec: Exec) -> Result<()> {
    require_model(&a.model)?;
    require_file(&a.manifest)?;
    let model = Model::load(&a.model)?;
    let seqs = load_manifest(&a.manifest)?;
    let embs = model.embed_all(&seqs, exec)?;
    fs::write(&a.out, export_embeddings(&embs)).with_context(|| format!("writing {}", a.out.display()))?;
    kv("videos", embs.len());
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        Exec::set_threads(n).map_err(anyhow::Error::msg)?;
    }
    let exec = Exec::default_for_build();
    match &cli.command {
        Command::GenData(a) => gen_data(a, exec).map(|_| 0),
        Command::Train(a) => train(a).map(|_| 0),
        Command::Verify(a) => verify(a),
        Command::Evaluate(a) => evaluate_cmd(a, exec).map(|_| 0),
        Command::Embed(a) => embed(a, exec).map(|_| 0),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

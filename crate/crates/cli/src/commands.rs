use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use gacl::apps::{
    attribute, cleanse, pair_compare, rank, AttributeParams, Better, CleanseThresholds,
    CleanseVerdict,
};
use gacl::datagen::{
    bin_ratings, gen_gaussians, gen_sketch_corpus, inject_label_noise, read_jsonl,
    read_ratings_csv, write_jsonl, Arrangement, BinPolicy, GaussianMixtureSpec, LabeledSet,
    Samples, SketchCorpusSpec,
};
use gacl::head::{HeadConfig, Instantiation};
use gacl::recipes::{pseudo_label_config, pseudo_label_toy, sketch_config, toy_config};
use gacl::sketch::{gen_sketch, ShapeClass, FEATURE_DIM};
use gacl::steer::{steer, train_vae, SequenceNoise, SteerParams, VaeConfig, COMPONENTS, STEPS};
use gacl::trainer::{load_checkpoint, save_checkpoint, train, Evaluation, TrainConfig, TrainedModel};
use gacl::verify::verify_config;

use crate::output::{create, emit, open};
use crate::{
    AttributeArgs, BinRatingsArgs, CleanseArgs, Cli, Command, ExportArgs, GenDataArgs, PairArgs,
    ScoreArgs, SteerArgs, ToyArgs, TrainArgs, TrainOverrides, VerifyArgs,
};

/// A check ran to completion and did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Bad arguments detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(g) = e.downcast_ref::<gacl::Error>() {
        if matches!(g, gacl::Error::Config(_)) {
            return 2;
        }
    }
    1
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Verify(a) => cmd_verify(a, cli.seed),
        Command::Score(a) => cmd_score(a, out),
        Command::Rank(a) => cmd_rank(a, out),
        Command::Pair(a) => cmd_pair(a),
        Command::Cleanse(a) => cmd_cleanse(a, out),
        Command::Attribute(a) => cmd_attribute(a, out),
        Command::Steer(a) => cmd_steer(a, cli.seed, out),
        Command::Toy(a) => cmd_toy(a, cli.seed, out),
        Command::GenData(a) => cmd_gen_data(a, cli.seed, out),
        Command::BinRatings(a) => cmd_bin_ratings(a, out),
        Command::Export(a) => cmd_export(a, out),
    }
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string(v)?;
    s.push('\n');
    Ok(s)
}

fn apply_overrides(cfg: &mut TrainConfig, ov: &TrainOverrides, seed: Option<u64>) -> Result<()> {
    if let Some(p) = &ov.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_kv(&text)?;
    }
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = &ov.preset {
        cfg.set("preset", p)?;
    }
    if let Some(e) = ov.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = ov.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = ov.lr {
        cfg.lr = lr;
    }
    if ov.no_binning {
        cfg.binning = None;
    }
    if let Some(p) = ov.pseudo_label_period {
        cfg.pseudo_label_period = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(())
}

/// Defaults by data kind: the sketch recipe for sketches, the toy recipe
/// (feature dim = class count, at least 2) for points.
fn default_config(set: &LabeledSet) -> TrainConfig {
    let c = set.class_count;
    match set.samples {
        Samples::Sketches(_) => {
            let mut cfg = sketch_config(0);
            cfg.head = HeadConfig::preset(Instantiation::Cosine, c, cfg.head.feature_dim);
            cfg
        }
        Samples::Points(_) => {
            let mut cfg = toy_config(0);
            cfg.head = HeadConfig::preset(Instantiation::Cosine, c, c.max(2));
            cfg
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    samples: usize,
    epochs: usize,
    final_loss: f64,
    final_accuracy: f64,
    model: &'a str,
    log: &'a str,
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let (set, _) = read_jsonl(open(&a.data)?, None)?;
    let mut cfg = default_config(&set);
    apply_overrides(&mut cfg, &a.overrides, seed)?;
    if cfg.head.class_count != set.class_count {
        bail!(usage(format!(
            "config has {} classes but the data has {}",
            cfg.head.class_count, set.class_count
        )));
    }
    let (model, log) = train(&cfg, &set)?;
    let mut w = create(out, &a.model)?;
    save_checkpoint(&model, &mut w)?;
    w.flush()?;
    emit(out, Some(&a.log), &log.to_csv())?;
    let last = log.epochs.last().ok_or_else(|| anyhow!("no epochs were run"))?;
    let summary = TrainSummary {
        samples: set.len(),
        epochs: log.epochs.len(),
        final_loss: last.mean_loss,
        final_accuracy: last.accuracy,
        model: &a.model.to_string_lossy(),
        log: &a.log.to_string_lossy(),
    };
    emit(out, None, &json_line(&summary)?)
}

fn cmd_verify(a: &VerifyArgs, seed: Option<u64>) -> Result<()> {
    let insts: Vec<Instantiation> = if a.preset == "all" {
        Instantiation::ALL.to_vec()
    } else {
        vec![a.preset.parse()?]
    };
    let mut text = String::new();
    let mut failed = Vec::new();
    for inst in insts {
        let mut cfg = HeadConfig::preset(inst, a.classes, a.feature_dim);
        if let Some(l) = a.lambda_g {
            cfg.lambda_g = l;
        }
        let rep = verify_config(&cfg, a.xi, a.fd_trials, seed.unwrap_or(0))?;
        if !rep.passed {
            failed.push(inst.name());
        }
        text.push_str(&json_line(&rep)?);
    }
    emit(Path::new("."), None, &text)?;
    if !failed.is_empty() {
        bail!(CheckFailed(format!("constraints violated for {}", failed.join(", "))));
    }
    Ok(())
}

struct Scored {
    model: TrainedModel,
    set: LabeledSet,
    ids: Vec<String>,
    ev: Evaluation,
}

fn load_scored(model: &Path, data: &Path) -> Result<Scored> {
    let model = load_checkpoint(open(model)?)?;
    let (set, ids) = read_jsonl(open(data)?, Some(model.head.class_count))?;
    if set.input_dim() != model.input_dim() {
        bail!(usage(format!(
            "model expects {}-dim inputs, data has {}",
            model.input_dim(),
            set.input_dim()
        )));
    }
    let ev = model.evaluate(&set)?;
    Ok(Scored { model, set, ids, ev })
}

fn verdict_csv(s: &Scored, verdicts: &[CleanseVerdict]) -> String {
    let mut text = String::from("id,q,theta,verdict\n");
    for i in 0..s.ids.len() {
        let _ = writeln!(text, "{},{},{},{}", s.ids[i], s.ev.q_norm[i], s.ev.theta[i], verdicts[i].name());
    }
    text
}

fn scored_pairs(ev: &Evaluation) -> Vec<(f64, f64)> {
    ev.q_norm.iter().copied().zip(ev.theta.iter().copied()).collect()
}

fn cmd_score(a: &ScoreArgs, out: &Path) -> Result<()> {
    let s = load_scored(&a.model, &a.data)?;
    let v = cleanse(&scored_pairs(&s.ev), &CleanseThresholds::default())?;
    emit(out, a.out.as_deref(), &verdict_csv(&s, &v))
}

fn cmd_rank(a: &ScoreArgs, out: &Path) -> Result<()> {
    let s = load_scored(&a.model, &a.data)?;
    let mut text = String::from("rank,id,q,theta\n");
    for (r, i) in rank(&s.ev.q_norm).into_iter().enumerate() {
        let _ = writeln!(text, "{},{},{},{}", r + 1, s.ids[i], s.ev.q_norm[i], s.ev.theta[i]);
    }
    emit(out, a.out.as_deref(), &text)
}

fn cmd_pair(a: &PairArgs) -> Result<()> {
    let s = load_scored(&a.model, &a.data)?;
    let find = |id: &str| {
        s.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| usage(format!("no sample with id '{id}'")))
    };
    let (i, j) = (find(&a.a)?, find(&a.b)?);
    let v = pair_compare(s.ev.q_norm[i], s.ev.q_norm[j]);
    let better = match v.better {
        Better::A => &a.a,
        Better::B => &a.b,
    };
    let text = format!("a,b,q_a,q_b,better,tie\n{},{},{},{},{},{}\n", a.a, a.b, v.q_a, v.q_b, better, v.tie);
    emit(Path::new("."), None, &text)
}

fn cmd_cleanse(a: &CleanseArgs, out: &Path) -> Result<()> {
    let th = CleanseThresholds {
        q_hi: a.q_hi,
        theta_hi: a.theta_hi,
        q_lo: a.q_lo,
    };
    th.validate()?;
    let s = load_scored(&a.io.model, &a.io.data)?;
    let v = cleanse(&scored_pairs(&s.ev), &th)?;
    if let Some(truth) = &s.set.truth_labels {
        let noisy: Vec<bool> = truth.iter().zip(&s.set.labels).map(|(t, l)| t != l).collect();
        let flagged = v.iter().filter(|&&x| x == CleanseVerdict::NoisyLabel).count();
        let hits = v
            .iter()
            .zip(&noisy)
            .filter(|&(&x, &n)| x == CleanseVerdict::NoisyLabel && n)
            .count();
        let total = noisy.iter().filter(|&&n| n).count();
        log::info!("cleanse: flagged {flagged}, of which {hits} noisy; {total} noisy labels in total");
    }
    emit(out, a.io.out.as_deref(), &verdict_csv(&s, &v))
}

fn cmd_attribute(a: &AttributeArgs, out: &Path) -> Result<()> {
    let params = AttributeParams {
        q_tau: a.q_tau,
        q_max: a.q_max,
        delta: a.delta,
    };
    params.validate()?;
    let s = load_scored(&a.io.model, &a.io.data)?;
    let sketches = s
        .set
        .sketches()
        .ok_or_else(|| usage("attribute needs a sketch dataset"))?;
    let mut text = String::from("id,q,theta,verdict,best_q,removed\n");
    for (i, sk) in sketches.iter().enumerate() {
        let at = attribute(sk, &s.model, &params)?;
        let removed: Vec<String> = at.removals.iter().map(|(k, _)| k.to_string()).collect();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            s.ids[i],
            at.q_full,
            s.ev.theta[i],
            at.verdict.name(),
            at.best_q,
            removed.join(";")
        );
    }
    emit(out, a.io.out.as_deref(), &text)
}

fn cmd_steer(a: &SteerArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let model = load_checkpoint(open(&a.model)?)?;
    if model.input_dim() != FEATURE_DIM {
        bail!(usage("steer needs a scorer trained on sketches"));
    }
    let params = SteerParams {
        alpha: a.alpha,
        lambda: a.lambda,
        q_max: a.q_max,
        tau: a.tau,
        iters: a.iters,
        checkpoint_every: a.checkpoint_every,
    };
    params.validate()?;
    let class: ShapeClass = a.class.parse()?;
    let corpus = gen_sketch_corpus(&SketchCorpusSpec::uniform(a.vae_per_class, seed))?;
    let vcfg = VaeConfig {
        epochs: a.vae_epochs,
        seed,
        ..VaeConfig::default()
    };
    let (vae, history) = train_vae(&vcfg, corpus.sketches().unwrap_or_default())?;
    if let Some(h) = history.last() {
        log::info!("vae: final objective {:.4}", h.objective);
    }
    let start = gen_sketch(class, a.distortion, seed)?;
    let (z0, _) = vae.encode(&start)?;
    let noise = SequenceNoise::draw(STEPS, COMPONENTS, seed);
    let traj = steer(&vae, &model, &z0, &params, &noise)?;
    if traj.skipped_steps > 0 {
        log::warn!("steer: {} steps skipped on non-finite gradients", traj.skipped_steps);
    }
    let mut text = String::new();
    for p in &traj.points {
        text.push_str(&json_line(p)?);
    }
    emit(out, Some(&a.out), &text)?;
    #[derive(Serialize)]
    struct SteerSummary {
        q_start: f64,
        q_end: f64,
        checkpoints: usize,
        skipped_steps: usize,
    }
    let summary = SteerSummary {
        q_start: traj.first().q_norm,
        q_end: traj.last().q_norm,
        checkpoints: traj.points.len(),
        skipped_steps: traj.skipped_steps,
    };
    emit(out, None, &json_line(&summary)?)
}

fn cmd_toy(a: &ToyArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let arrangements = match a.arrangement.as_str() {
        "both" => vec![Arrangement::Circle, Arrangement::Grid],
        other => vec![other.parse::<Arrangement>()?],
    };
    let mut cfg = pseudo_label_config(0);
    apply_overrides(&mut cfg, &a.overrides, seed)?;
    if cfg.pseudo_label_period == 0 {
        bail!(usage("the toy trains on pseudo-labels; pseudo_label_period must be positive"));
    }
    let mut text = String::new();
    for arr in arrangements {
        let (rep, _, log) = pseudo_label_toy(arr, a.samples, &cfg)?;
        emit(out, Some(Path::new(&format!("toy_{arr}.csv"))), &rep.rows_csv())?;
        emit(out, Some(Path::new(&format!("toy_{arr}_log.csv"))), &log.to_csv())?;
        #[derive(Serialize)]
        struct ToySummary<'a> {
            arrangement: Arrangement,
            seed: u64,
            purity: f64,
            cluster_spearman: &'a [Option<f64>],
        }
        text.push_str(&json_line(&ToySummary {
            arrangement: arr,
            seed: rep.seed,
            purity: rep.purity,
            cluster_spearman: &rep.cluster_spearman,
        })?);
    }
    emit(out, None, &text)
}

fn cmd_gen_data(a: &GenDataArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let set = match a.kind.as_str() {
        "gaussians" => gen_gaussians(&GaussianMixtureSpec::nine(a.arrangement.parse()?, a.samples, seed))?,
        "sketches" => gen_sketch_corpus(&SketchCorpusSpec {
            per_class: a.samples,
            distortion_range: (a.distortion_min, a.distortion_max),
            levels: if a.levels.is_empty() { None } else { Some(a.levels.clone()) },
            turned_share: a.turned_share,
            seed,
        })?,
        other => bail!(usage(format!("unknown data kind '{other}' (gaussians|sketches)"))),
    };
    let set = if a.noise > 0.0 {
        inject_label_noise(&set, a.noise, seed.wrapping_add(1))?
    } else {
        set
    };
    let mut w = create(out, &a.out)?;
    write_jsonl(&set, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_bin_ratings(a: &BinRatingsArgs, out: &Path) -> Result<()> {
    let policy = match a.policy.as_str() {
        "equal-width" => BinPolicy::EqualWidth,
        "equal-frequency" => BinPolicy::EqualFrequency,
        other => bail!(usage(format!("unknown policy '{other}' (equal-width|equal-frequency)"))),
    };
    let rows = read_ratings_csv(open(&a.ratings)?)?;
    let scores: Vec<f64> = rows.iter().map(|(_, s)| *s).collect();
    let bins = bin_ratings(&scores, a.bins, policy)?;
    let mut text = String::from("id,rating,bin,bin_centre\n");
    for ((id, s), &b) in rows.iter().zip(&bins.labels) {
        let c = bins.centre(b).unwrap_or(f64::NAN);
        let _ = writeln!(text, "{id},{s},{b},{c}");
    }
    emit(out, a.out.as_deref(), &text)
}

fn cmd_export(a: &ExportArgs, out: &Path) -> Result<()> {
    if let Some(data) = &a.data {
        let s = load_scored(&a.model, data)?;
        let mut text = String::from("id,label,predicted,q,magnitude,theta,margin\n");
        for i in 0..s.ids.len() {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{}",
                s.ids[i],
                s.set.labels[i],
                s.ev.predicted[i],
                s.ev.q_norm[i],
                s.ev.magnitude[i],
                s.ev.theta[i],
                s.ev.margin[i]
            );
        }
        return emit(out, a.out.as_deref(), &text);
    }
    let model = load_checkpoint(open(&a.model)?)?;
    #[derive(Serialize)]
    struct ModelSummary<'a> {
        head: &'a HeadConfig,
        layer_dims: Vec<usize>,
        parameters: usize,
        prototypes: &'a gacl::head::ClassPrototypes,
        calibration: &'a gacl::head::QualityCalibration,
    }
    let summary = ModelSummary {
        head: &model.head,
        layer_dims: model.model.layer_dims(),
        parameters: model.model.param_count(),
        prototypes: &model.prototypes,
        calibration: &model.calibration,
    };
    emit(out, a.out.as_deref(), &json_line(&summary)?)
}

//! `twinformer` command-line driver.
//!
//! Exit codes: 0 success, 1 user error (bad input, config or arguments),
//! 2 internal error.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use twinformer::checkpoint;
use twinformer::cost::CostReport;
use twinformer::tracking::io::{
    read_groundtruth, read_results, read_sequence, save_gray, write_results, write_sequence, GROUNDTRUTH,
};
use twinformer::tracking::metrics::mean_metrics;
use twinformer::tracking::simmap::write_map_csv;
use twinformer::tracking::{
    crop_region, metrics, similarity_map, synth_sequence, track_all, Metrics, Sequence, SynthSpec,
};
use twinformer::train::{make_pairs, train, write_loss_csv, TrainData};
use twinformer::{ModelConfig, TrackMode, Twinformer};

use config::{RunConfig, SynthKind};

#[derive(Debug, Parser)]
#[command(name = "twinformer", version, about = "Dual-branch transformer tracker")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and FLOP counts of a configuration.
    Info {
        #[arg(long)]
        gab_depth: Option<usize>,
        /// Also write `cost.csv` to the output directory.
        #[arg(long)]
        csv: bool,
    },
    /// Write synthetic sequences.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum)]
        kind: Option<SynthKind>,
    },
    /// Train a small model; writes `model.twck`, `model.toml` and `loss.csv`.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Track sequences; writes one results file per sequence.
    Track {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long)]
        mode: Option<TrackMode>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score results against ground truth; writes `metrics.csv`.
    Eval {
        /// A results file, or a directory of `<sequence>.txt` files.
        #[arg(long)]
        results: PathBuf,
        /// A ground-truth file, a sequence directory, or a directory of sequences.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Template-to-search similarity map; writes `simmap.csv` and `simmap.png`.
    Simmap {
        /// Without a checkpoint the model is freshly initialized from the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequence: PathBuf,
        /// Search frame index.
        #[arg(long, default_value_t = 1)]
        frame: usize,
    },
}

/// Marks an error as the caller's fault.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<twinformer::Error>() {
            return match e {
                twinformer::Error::Shape { .. } | twinformer::Error::NonFinite(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
    seed_flag: Option<u64>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let cfg = RunConfig::load_or_default(common.config.as_deref())?;
        let out = common.out.clone().unwrap_or_else(|| cfg.paths.output.clone());
        let seed = common.seed.unwrap_or(cfg.training.seed);
        Ok(Self {
            cfg,
            out,
            seed,
            seed_flag: common.seed,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn model_config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

/// Config from the run file, else the one saved next to the checkpoint.
fn load_model(ctx: &Ctx, ckpt: Option<&Path>, fallback: fn() -> ModelConfig) -> Result<Twinformer> {
    let config = match (&ctx.cfg.model, ckpt) {
        (Some(m), _) => m.clone(),
        (None, Some(c)) => {
            let path = model_config_path(c);
            let text = fs::read_to_string(&path).with_context(|| format!("reading model config {}", path.display()))?;
            ModelConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, None) => fallback(),
    };
    let mut model = Twinformer::new(config, ctx.seed)?;
    if let Some(c) = ckpt {
        let store = checkpoint::load(c).with_context(|| format!("loading {}", c.display()))?;
        model.load_params(&store)?;
    }
    Ok(model)
}

/// A single sequence directory, or every sequence directory inside `dir`.
fn load_sequences(dir: &Path) -> Result<Vec<Sequence>> {
    if dir.join(GROUNDTRUTH).is_file() {
        return Ok(vec![
            read_sequence(dir).with_context(|| format!("reading {}", dir.display()))?
        ]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|d| d.join(GROUNDTRUTH).is_file());
    dirs.sort();
    if dirs.is_empty() {
        return Err(user(format!("no sequences under {}", dir.display())));
    }
    dirs.iter()
        .map(|d| read_sequence(d).with_context(|| format!("reading {}", d.display())))
        .collect()
}

fn synth_specs(kind: SynthKind, seed: u64, count: usize) -> Vec<SynthSpec> {
    (0..count as u64)
        .map(|i| match kind {
            SynthKind::Easy => SynthSpec::easy(seed + i),
            SynthKind::Varied => SynthSpec::varied(seed + i),
        })
        .collect()
}

fn cmd_info(ctx: &Ctx, gab_depth: Option<usize>, csv: bool) -> Result<()> {
    let mut model = ctx.cfg.model.clone().unwrap_or_default();
    if let Some(d) = gab_depth {
        model.gab_depth = d;
    }
    model.validate()?;
    let report = CostReport::new(&model)?;
    write!(std::io::stdout().lock(), "{report}")?;
    if csv {
        let path = ctx.out_dir()?.join("cost.csv");
        let mut text = String::from("section,item,value\n");
        for (section, item, value) in report.rows() {
            text += &format!("{section},{item},{value}\n");
        }
        fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_synth(ctx: &Ctx, count: Option<usize>, kind: Option<SynthKind>) -> Result<()> {
    let data = &ctx.cfg.data;
    let count = count.unwrap_or(data.sequences);
    let kind = kind.unwrap_or(data.kind);
    let seed = ctx.seed_flag.unwrap_or(data.seed);
    let out = ctx.out_dir()?;
    for (i, spec) in synth_specs(kind, seed, count).iter().enumerate() {
        let name = format!("seq{i:03}");
        let seq = synth_sequence(spec, name.as_str())?;
        write_sequence(out.join(&name), &seq)?;
        println!(
            "{name}: {} frames{}",
            seq.len(),
            if seq.clamped { " (clamped)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, steps: Option<usize>) -> Result<()> {
    let mut cfg = ctx.cfg.training.clone();
    cfg.seed = ctx.seed;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let seqs = match &ctx.cfg.paths.sequences {
        Some(dir) => load_sequences(dir)?,
        None => {
            let d = &ctx.cfg.data;
            synth_specs(d.kind, d.seed, d.sequences)
                .iter()
                .enumerate()
                .map(|(i, s)| synth_sequence(s, format!("seq{i:03}")))
                .collect::<twinformer::Result<_>>()?
        }
    };
    let mut model = Twinformer::new(ctx.cfg.model.clone().unwrap_or_else(ModelConfig::toy), ctx.seed)?;
    eprintln!("model: {} parameters, {} sequences", model.num_params(), seqs.len());
    let pairs = match ctx.cfg.data.pairs {
        Some(n) => Some(make_pairs(&seqs, n, model.config(), &cfg.sampling, ctx.seed)?),
        None => None,
    };
    let data = pairs.as_deref().map_or(TrainData::Sequences(&seqs), TrainData::Pairs);
    let every = (cfg.steps / 20).max(1);
    let logs = train(&mut model, data, &cfg, |l| {
        if l.step % every == 0 || l.step + 1 == cfg.steps {
            eprintln!(
                "step {:>6}  loss {:.5}  cls {:.5}  giou {:.5}  l1 {:.5}",
                l.step, l.total, l.cls, l.giou, l.l1
            );
        }
    })?;
    let out = ctx.out_dir()?;
    let ckpt = out.join("model.twck");
    checkpoint::save(model.params(), &ckpt)?;
    fs::write(model_config_path(&ckpt), model.config().to_toml())?;
    write_loss_csv(out.join("loss.csv"), &logs)?;
    if let Some(last) = logs.last() {
        println!("final loss {:.6}", last.total);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn print_metrics(rows: &[(String, Metrics)]) {
    for (name, m) in rows {
        println!("{name}: AO {:.4} SR50 {:.4} SR75 {:.4}", m.ao, m.sr50, m.sr75);
    }
    let all: Vec<Metrics> = rows.iter().map(|r| r.1.clone()).collect();
    if let Some((ao, sr50, sr75)) = mean_metrics(&all) {
        println!(
            "mean over {} sequences: AO {ao:.4} SR50 {sr50:.4} SR75 {sr75:.4}",
            all.len()
        );
    }
}

fn cmd_track(
    ctx: &Ctx,
    ckpt: Option<PathBuf>,
    sequences: Option<PathBuf>,
    mode: Option<TrackMode>,
    jobs: usize,
) -> Result<()> {
    let ckpt = ckpt
        .or_else(|| ctx.cfg.paths.checkpoint.clone())
        .ok_or_else(|| user("no checkpoint given (--checkpoint or paths.checkpoint)"))?;
    let dir = sequences
        .or_else(|| ctx.cfg.paths.sequences.clone())
        .ok_or_else(|| user("no sequences given (--sequences or paths.sequences)"))?;
    let mut options = ctx.cfg.tracking;
    if let Some(m) = mode {
        options.mode = m;
    }
    let model = load_model(ctx, Some(&ckpt), ModelConfig::toy)?;
    let seqs = load_sequences(&dir)?;
    let results = track_all(&model, &seqs, &options, jobs)?;
    let out = ctx.out_dir()?;
    let mut rows = Vec::new();
    for (seq, r) in seqs.iter().zip(&results) {
        write_results(out.join(format!("{}.txt", seq.name)), r)?;
        let preds: Vec<_> = r.iter().map(|x| x.0).collect();
        rows.push((seq.name.clone(), metrics(&preds, &seq.gt)?));
    }
    println!("mode {}", options.mode);
    print_metrics(&rows);
    Ok(())
}

fn gt_path(gt: &Path, name: &str) -> PathBuf {
    if gt.is_file() {
        gt.to_path_buf()
    } else if gt.join(GROUNDTRUTH).is_file() {
        gt.join(GROUNDTRUTH)
    } else {
        gt.join(name).join(GROUNDTRUTH)
    }
}

fn cmd_eval(ctx: &Ctx, results: &Path, gt: &Path) -> Result<()> {
    let files = if results.is_dir() {
        let mut f: Vec<PathBuf> = fs::read_dir(results)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        f.retain(|p| p.extension().is_some_and(|e| e == "txt"));
        f.sort();
        f
    } else {
        vec![results.to_path_buf()]
    };
    if files.is_empty() {
        return Err(user(format!("no results under {}", results.display())));
    }
    let mut rows = Vec::new();
    for file in &files {
        let name = file
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let preds: Vec<_> = read_results(file)?.into_iter().map(|r| r.0).collect();
        let gts = read_groundtruth(gt_path(gt, &name))?;
        if preds.len() != gts.len() {
            return Err(user(format!(
                "{name}: {} results for {} ground-truth boxes",
                preds.len(),
                gts.len()
            )));
        }
        rows.push((name, metrics(&preds, &gts)?));
    }
    print_metrics(&rows);
    let path = ctx.out_dir()?.join("metrics.csv");
    let mut text = String::from("sequence,ao,sr50,sr75\n");
    for (name, m) in &rows {
        text += &format!("{name},{},{},{}\n", m.ao, m.sr50, m.sr75);
    }
    fs::write(&path, text)?;
    Ok(())
}

fn cmd_simmap(ctx: &Ctx, ckpt: Option<PathBuf>, dir: &Path, frame: usize) -> Result<()> {
    let ckpt = ckpt.or_else(|| ctx.cfg.paths.checkpoint.clone());
    let seq = read_sequence(dir).with_context(|| format!("reading {}", dir.display()))?;
    if frame >= seq.len() {
        bail!(user(format!("frame {frame} out of range for {} frames", seq.len())));
    }
    let model = load_model(ctx, ckpt.as_deref(), ModelConfig::default)?;
    let c = model.config();
    let o = &ctx.cfg.tracking;
    let (template, _) = crop_region(&seq.frames[0], &seq.gt[0], o.template_factor, c.template_size)?;
    let (search, _) = crop_region(&seq.frames[frame], &seq.gt[frame], o.search_factor, c.search_size)?;
    let map = similarity_map(&model, &template, &search)?;
    let out = ctx.out_dir()?;
    write_map_csv(out.join("simmap.csv"), &map)?;
    save_gray(out.join("simmap.png"), &map, -1.0, 1.0, 16)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let peak = map.data().iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
    );
    println!(
        "{h}x{w} map, peak {:.4} at row {} col {}",
        peak.1,
        peak.0 / w,
        peak.0 % w
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.common)?;
    match cli.command {
        Command::Info { gab_depth, csv } => cmd_info(&ctx, gab_depth, csv),
        Command::Synth { count, kind } => cmd_synth(&ctx, count, kind),
        Command::TrainToy { steps } => cmd_train(&ctx, steps),
        Command::Track {
            checkpoint,
            sequences,
            mode,
            jobs,
        } => cmd_track(&ctx, checkpoint, sequences, mode, jobs),
        Command::Eval { results, gt } => cmd_eval(&ctx, &results, &gt),
        Command::Simmap {
            checkpoint,
            sequence,
            frame,
        } => cmd_simmap(&ctx, checkpoint, &sequence, frame),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

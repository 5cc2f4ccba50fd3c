//! Command-line surface: `synth`, `train`, `eval`, `embed`, `eval-external`
//! and `grid`. Every command is deterministic given its config and seed.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    cold_split, filter_users, load_dataset, synth_generate, write_synth, ColdSplit, Dataset, RawPayload, SplitName,
    SynthConfig, SynthProvenance, RATING_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::eval::{validate_ks, Metric, MetricReport, DEFAULT_KS};
use crate::fusion::FusionKind;
use crate::model::{AttributeConfig, Item, ItemTable, Model, ModelSpec};
use crate::pipeline::{Prepared, SplitConfig};
use crate::tensor::io::{read_tensor, write_tensor, Precision};
use crate::tensor::Tensor;
use crate::train::{evaluate_table, history_tsv, train_loop_with, train_user_table, EpochRecord, TrainConfig};

pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Ratings at or above this are positives.
    pub threshold: f64,
    /// Whether `interactions.tsv` starts with a header line.
    pub header: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            threshold: RATING_THRESHOLD,
            header: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Clips sampled per video item at inference.
    pub segments: usize,
    /// Clip seed at inference.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            segments: crate::model::DEFAULT_SEGMENTS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    /// Candidate item-embedding widths `D`.
    pub item_dims: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            item_dims: vec![16, 32, 64],
        }
    }
}

fn default_user_table() -> TrainConfig {
    TrainConfig {
        lr_peak: 1e-2,
        epochs: 30,
        warmup_epochs: 0.0,
        ..TrainConfig::default()
    }
}

/// The full run description. Every section is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
    /// Optimizer settings for fitting a fresh user table against frozen
    /// item embeddings.
    pub user_table: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
            user_table: default_user_table(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Parser)]
#[command(name = "coldrec", version, about = "Cold-start recommendation from multimodal item content")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Alignment loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = ["late", "early"])]
    pub fusion: Option<String>,
    /// Drop known positives from the in-batch negatives.
    #[arg(long)]
    pub filter_false_negatives: bool,
    /// Cutoffs to report; repeatable.
    #[arg(long = "k")]
    pub ks: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history and config echo.
    Train {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a split's items with a checkpoint and report metrics.
    Eval {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export `N × D` item embeddings plus an id sidecar.
    Embed {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate imported item embeddings; without a checkpoint a fresh user
    /// table is fitted on the training split.
    EvalExternal {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Take the user table from this checkpoint instead of fitting one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the alignment weight and item-embedding width.
    Grid {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Overrides {
    /// Config file (or `fallback`, or defaults) with command-line overrides.
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            _ => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.split.seed = s;
            cfg.train.seed = s;
            cfg.user_table.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.train.loss.lambda = l;
        }
        if let Some(f) = &self.fusion {
            cfg.model.fusion.kind = f.parse::<FusionKind>()?;
        }
        if self.filter_false_negatives {
            cfg.train.loss.filter_false_negatives = true;
            cfg.user_table.loss.filter_false_negatives = true;
        }
        if !self.ks.is_empty() {
            cfg.eval.ks = self.ks.clone();
        }
        cfg.eval.ks = validate_ks(&cfg.eval.ks)?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn load(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    load_dataset(dir, cfg.data.threshold, 0, cfg.data.header)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthProvenance> {
    let data = synth_generate(&cfg.synth)?;
    write_synth(out, &data)?;
    Ok(data.provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    pub best_val_ndcg10: Option<f64>,
    pub users: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    pub train_interactions: usize,
    pub parameters: usize,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    cmd_train_with(cfg, data, out, &mut |_| {})
}

/// [`cmd_train`] reporting every finished epoch to `on_epoch`.
pub fn cmd_train_with(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let ds = load(cfg, data)?;
    let prep = Prepared::new(&ds.interactions, &ds.content, &cfg.model, &cfg.split)?;
    let model = prep.model(cfg.train.seed)?;
    std::fs::create_dir_all(out)?;
    write_file(&out.join(CONFIG_ECHO), cfg.to_json())?;
    let outcome = train_loop_with(model, prep.data(), &cfg.train, on_epoch)?;
    outcome.model.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(HISTORY_FILE), history_tsv(&outcome.history))?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_val_ndcg10: outcome.best_val_ndcg10,
        users: prep.split.users.len(),
        train_items: prep.split.train_items.len(),
        val_items: prep.split.val_items.len(),
        test_items: prep.split.test_items.len(),
        train_interactions: prep.split.train.len(),
        parameters: outcome.model.params.num_scalars(),
    };
    write_file(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// The checkpoint must accept the dataset's attributes and payload shapes.
pub fn check_compat(model: &Model, ds: &Dataset) -> Result<()> {
    let want = model.cfg.modalities();
    if want != ds.modalities {
        return Err(Error::schema(
            "attributes",
            format!("checkpoint has {want:?}, dataset has {:?}", ds.modalities),
        ));
    }
    let Some(payloads) = ds.content.values().next() else {
        return Ok(());
    };
    for (c, (a, p)) in model.cfg.attributes.iter().zip(payloads).enumerate() {
        let dims = |t: &Tensor| {
            let s = t.shape();
            (s[s.len() - 3], s[s.len() - 2])
        };
        let (want, got) = match (a, p) {
            (AttributeConfig::Image(ic), RawPayload::Image(t)) => ((ic.height, ic.width), dims(t)),
            (AttributeConfig::Video(vc), RawPayload::Video(t)) => ((vc.frame.height, vc.frame.width), dims(t)),
            _ => continue,
        };
        if want != got {
            return Err(Error::schema(
                format!("attr{c}.height/width"),
                format!("checkpoint expects {want:?}, dataset has {got:?}"),
            ));
        }
    }
    Ok(())
}

/// Dataset items tokenized with the checkpoint's own vocabulary.
fn model_items(model: &Model, ds: &Dataset) -> Result<HashMap<String, Item>> {
    let max_len = model
        .cfg
        .attributes
        .iter()
        .find_map(|a| match a {
            AttributeConfig::Text(t) => Some(t.max_len),
            _ => None,
        })
        .unwrap_or(0);
    ds.items(model.vocabulary.as_ref(), max_len)
}

fn lookup<'a>(items: &'a HashMap<String, Item>, ids: &[String]) -> Result<Vec<&'a Item>> {
    ids.iter()
        .map(|id| items.get(id).ok_or_else(|| Error::Data(format!("item `{id}` has no content"))))
        .collect()
}

fn write_report(out: &Path, name: &str, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_file(&out.join(format!("{name}.json")), report.to_json() + "\n")?;
    write_file(&out.join(format!("{name}.tsv")), report.to_tsv())?;
    Ok(())
}

fn checkpoint_dir_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join(CONFIG_ECHO))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: SplitName, out: &Path) -> Result<MetricReport> {
    let model = Model::load(checkpoint)?;
    let ds = load(cfg, data)?;
    check_compat(&model, &ds)?;
    let cold = split_of(&ds, cfg)?;
    let items = model_items(&model, &ds)?;
    let candidates = lookup(&items, cold.items(split))?;
    let table = model.item_table(&candidates, cfg.eval.segments, cfg.eval.seed)?;
    let report = evaluate_table(&table, &cold.positives(split), &cfg.eval.ks, |u| {
        model.user_index(u).map(|i| model.user_vector(i))
    })?;
    write_report(out, &format!("metrics_{}", split_name(split)), &report)?;
    Ok(report)
}

/// The same split `train` used, for commands that take the model from a
/// checkpoint.
fn split_of(ds: &Dataset, cfg: &RunConfig) -> Result<ColdSplit> {
    let xs = filter_users(&ds.interactions, cfg.split.min_ratings);
    cold_split(&xs, cfg.split.ratios, cfg.split.seed)
}

fn split_name(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

/// `<path>` holds the `N × D` f64 matrix; `<path>.ids` one item id per line.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_embeddings(path: &Path, ids: &[String], matrix: &Tensor) -> Result<()> {
    if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
        return Err(Error::shape("write_embeddings", matrix.shape(), &[ids.len()]));
    }
    let mut buf = Vec::new();
    write_tensor(&mut buf, matrix, Precision::F64)?;
    write_file(path, buf)?;
    let mut sidecar = String::new();
    for id in ids {
        sidecar.push_str(id);
        sidecar.push('\n');
    }
    write_file(&ids_path(path), sidecar)
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let (matrix, _) = read_tensor(&mut f)?;
    let ids: Vec<String> = BufReader::new(std::fs::File::open(ids_path(path))?)
        .lines()
        .collect::<std::io::Result<_>>()?;
    if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
        return Err(Error::schema(
            "embeddings",
            format!("{} ids for a {:?} matrix", ids.len(), matrix.shape()),
        ));
    }
    Ok((ids, matrix))
}

/// Embeds every dataset item (sorted by id) with the checkpoint's tower.
pub fn cmd_embed(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(Vec<String>, Tensor)> {
    let model = Model::load(checkpoint)?;
    let ds = load(cfg, data)?;
    check_compat(&model, &ds)?;
    let items = model_items(&model, &ds)?;
    let ids: Vec<String> = ds.content.keys().cloned().collect();
    let table = model.item_table(&lookup(&items, &ids)?, cfg.eval.segments, cfg.eval.seed)?;
    let matrix = table.first_segments()?;
    write_embeddings(out, &ids, &matrix)?;
    Ok((ids, matrix))
}

pub fn cmd_eval_external(
    cfg: &RunConfig,
    embeddings: &Path,
    data: &Path,
    checkpoint: Option<&Path>,
    split: SplitName,
    out: &Path,
) -> Result<MetricReport> {
    let (ids, matrix) = read_embeddings(embeddings)?;
    let ds = load(cfg, data)?;
    let cold = split_of(&ds, cfg)?;
    let row: HashMap<&str, usize> = ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
    if row.len() != ids.len() {
        return Err(Error::schema("embeddings.ids", "duplicate item id in sidecar"));
    }
    let needed = cold.train_items.iter().chain(cold.items(split));
    if let Some(missing) = needed.clone().find(|id| !row.contains_key(id.as_str())) {
        return Err(Error::schema(
            "embeddings.ids",
            format!("dataset item `{missing}` has no embedding"),
        ));
    }
    let select = |wanted: &[String]| -> Result<Tensor> {
        let d = matrix.cols();
        let mut data = Vec::with_capacity(wanted.len() * d);
        for id in wanted {
            data.extend_from_slice(matrix.row(row[id.as_str()]));
        }
        Tensor::new(vec![wanted.len(), d], data)
    };
    let candidates = cold.items(split).to_vec();
    let table = ItemTable::from_matrix(candidates.clone(), &select(&candidates)?)?;
    let positives = cold.positives(split);
    let report = match checkpoint {
        Some(ckpt) => {
            let model = Model::load(ckpt)?;
            evaluate_table(&table, &positives, &cfg.eval.ks, |u| {
                model.user_index(u).map(|i| model.user_vector(i))
            })?
        }
        None => {
            let users = &cold.users;
            let uidx: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
            let tidx: HashMap<&str, usize> = cold
                .train_items
                .iter()
                .enumerate()
                .map(|(j, i)| (i.as_str(), j))
                .collect();
            let pairs: Vec<(usize, usize)> = cold
                .train
                .iter()
                .map(|x| (uidx[x.user.as_str()], tidx[x.item.as_str()]))
                .collect();
            let train_vectors = select(&cold.train_items)?;
            let table_u = train_user_table(
                users.len(),
                &train_vectors,
                &pairs,
                &cfg.user_table,
                cfg.model.init_std,
                cfg.user_table.seed,
            )?;
            evaluate_table(&table, &positives, &cfg.eval.ks, |u| uidx.get(u).map(|&i| table_u.row(i)))?
        }
    };
    write_report(out, &format!("external_{}", split_name(split)), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub item_dim: usize,
    pub best_epoch: Option<usize>,
    pub val_ndcg10: Option<f64>,
    pub test_recall10: f64,
    pub test_ndcg10: f64,
}

pub const GRID_HEADER: &str = "lambda\titem_dim\tbest_epoch\tval_ndcg10\ttest_recall10\ttest_ndcg10";

/// Trains one model per `(λ, D)` pair, sequentially, and scores each best
/// checkpoint on the test split.
pub fn cmd_grid(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<GridPoint>> {
    let ds = load(cfg, data)?;
    std::fs::create_dir_all(out)?;
    write_file(&out.join(CONFIG_ECHO), cfg.to_json())?;
    let mut points = Vec::new();
    let mut tsv = format!("{GRID_HEADER}\n");
    for &item_dim in &cfg.grid.item_dims {
        let mut spec = cfg.model.clone();
        spec.fusion.item_dim = item_dim;
        let prep = Prepared::new(&ds.interactions, &ds.content, &spec, &cfg.split)?;
        for &lambda in &cfg.grid.lambdas {
            let mut train = cfg.train.clone();
            train.loss.lambda = lambda;
            let outcome = train_loop_with(prep.model(train.seed)?, prep.data(), &train, &mut |_| {})?;
            let test = crate::train::evaluate_split(
                &outcome.model,
                prep.data(),
                SplitName::Test,
                &[10],
                cfg.eval.segments,
                cfg.eval.seed,
            )?;
            let p = GridPoint {
                lambda,
                item_dim,
                best_epoch: outcome.best_epoch,
                val_ndcg10: outcome.best_val_ndcg10,
                test_recall10: test.get(Metric::Recall, 10).unwrap_or(f64::NAN),
                test_ndcg10: test.get(Metric::Ndcg, 10).unwrap_or(f64::NAN),
            };
            eprintln!(
                "grid: lambda {lambda} D {item_dim}: val ndcg@10 {:?}, test recall@10 {:.4}",
                p.val_ndcg10, p.test_recall10
            );
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                p.lambda,
                p.item_dim,
                p.best_epoch.map_or(String::new(), |e| e.to_string()),
                p.val_ndcg10.map_or(String::new(), |v| v.to_string()),
                p.test_recall10,
                p.test_ndcg10
            ));
            points.push(p);
        }
    }
    write_file(&out.join("grid.tsv"), tsv)?;
    Ok(points)
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { opts, out } => {
            let p = cmd_synth(&opts.resolve(None)?, &out)?;
            eprintln!(
                "synth: {} users, {} items, {} positives (density {:.4}) → {}",
                p.users,
                p.items,
                p.positives,
                p.density,
                out.display()
            );
            Ok(())
        }
        Command::Train { opts, data, out } => {
            cmd_train_with(&opts.resolve(None)?, &data, &out, &mut |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  rating {:.4}  alignment {:.4}  val ndcg@10 {}  lr {:.2e}",
                    r.epoch,
                    r.loss,
                    r.rating_loss,
                    r.alignment_loss,
                    r.val_ndcg10.map_or("-".into(), |v| format!("{v:.4}")),
                    r.lr
                )
            })
            .map(|_| ())
        }
        Command::Eval {
            opts,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = opts.resolve(checkpoint_dir_config(&checkpoint).as_deref())?;
            let report = cmd_eval(&cfg, &checkpoint, &data, split.parse()?, &out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Embed {
            opts,
            checkpoint,
            data,
            out,
        } => {
            let cfg = opts.resolve(checkpoint_dir_config(&checkpoint).as_deref())?;
            cmd_embed(&cfg, &checkpoint, &data, &out).map(|_| ())
        }
        Command::EvalExternal {
            opts,
            embeddings,
            data,
            checkpoint,
            split,
            out,
        } => {
            let fallback = checkpoint.as_deref().and_then(checkpoint_dir_config);
            let cfg = opts.resolve(fallback.as_deref())?;
            let report = cmd_eval_external(&cfg, &embeddings, &data, checkpoint.as_deref(), split.parse()?, &out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Grid { opts, data, out } => cmd_grid(&opts.resolve(None)?, &data, &out).map(|_| ()),
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("COLDREC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage, 2 data validation, 3 schema mismatch.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `ltc` — command-line front end for the compression-aware reranking engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ltc_core::bench::{
    attention_cost_model, linear_cost_model, measure_qps, sweep_grid, SweepData, SweepSettings,
    WorkItem,
};
use ltc_core::checkpoint;
use ltc_core::compress::LtcConfig;
use ltc_core::error::Error;
use ltc_core::eval::{evaluate_run, paired_deltas, paired_t_test, write_report};
use ltc_core::model::{ModelConfig, Parameters, K_MAX};
use ltc_core::rank::{rerank_pointwise, sliding_window_rerank, ModelListwise, ModelPointwise};
use ltc_core::tensor::{RngSeed, WeightRng};
use ltc_core::train::{finite_diff_check, synth_task_gen, train, TrainConfig};
use ltc_core::trec::{
    load_corpus, load_qrels, load_queries, load_run, tokenize, write_run, Candidate, RunEntry,
};

mod synthdata;

/// Gradient checks beyond this max relative error count as numeric failures.
const GRAD_TOL: f64 = 1e-4;

/// Write a line to stdout, staying quiet when the pipe has been closed
/// (e.g. piping into `head`).
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "ltc", version, about = "Rerank, train, and benchmark with layer-wise token compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic relevance task and save a checkpoint.
    Train(TrainCmd),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckCmd),
    /// Generate a synthetic corpus, queries, first-stage run, and qrels.
    Synth(SynthCmd),
    /// Rerank a first-stage run pointwise with a trained checkpoint.
    Rerank(RerankCmd),
    /// Rerank with listwise sliding windows over candidate groups.
    ListwiseRerank(ListwiseCmd),
    /// Score a run against qrels (nDCG@10), optionally versus a baseline run.
    Eval(EvalCmd),
    /// Evaluate the full (rate x target-layer) grid and write a CSV.
    Sweep(SweepCmd),
    /// Report the analytical cost model, optionally with measured throughput.
    Bench(BenchCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// 8 layers, hidden size 64 — the desk-scale default.
    Desk,
    /// 2 layers, hidden size 8 — for tests and gradient checks.
    Tiny,
}

impl ModelKind {
    fn config(self) -> ModelConfig {
        match self {
            ModelKind::Desk => ModelConfig::desk_default(),
            ModelKind::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Args)]
struct LtcFlags {
    /// First layer (1-based) that runs on the compressed sequence.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Fraction of tokens kept, in (0, 1]; omit to disable compression.
    #[arg(long)]
    rate: Option<f64>,
}

impl LtcFlags {
    fn config(&self) -> Result<LtcConfig, Error> {
        match self.rate {
            None => Ok(LtcConfig::Disabled),
            Some(rate) => LtcConfig::enabled(self.layer, rate),
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Checkpoint path to write.
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch training log (tab-separated); stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    learning_rate: f64,
    /// Hard negatives per query (group size is this plus one).
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    /// Training queries to synthesize.
    #[arg(long, default_value_t = 256)]
    queries: usize,
    /// Held-out queries for the per-epoch accuracy column.
    #[arg(long, default_value_t = 128)]
    heldout: usize,
    #[arg(long, default_value_t = 16)]
    doc_len: usize,
    #[arg(long, value_enum, default_value_t = ModelKind::Tiny)]
    model: ModelKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    ltc: LtcFlags,
}

#[derive(Args)]
struct GradcheckCmd {
    /// Central-difference step size, in [1e-6, 1e-3].
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    ltc: LtcFlags,
}

#[derive(Args)]
struct SynthCmd {
    /// Directory for corpus.jsonl, queries.tsv, run.txt, and qrels.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    queries: usize,
    #[arg(long, default_value_t = 16)]
    doc_len: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct RerankCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Candidates per query to rescore; the rest keep first-stage order.
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    max_doc_tokens: usize,
    #[arg(long, default_value = "ltc")]
    tag: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    ltc: LtcFlags,
}

#[derive(Args)]
struct ListwiseCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Sliding-window size (documents per model call).
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Positions the window moves up between calls.
    #[arg(long, default_value_t = 10)]
    step: usize,
    #[arg(long, default_value_t = 128)]
    max_doc_tokens: usize,
    /// Instruction text prefixed to every listwise prompt.
    #[arg(long, default_value = "rank the passages by relevance to the query")]
    instruction: String,
    #[arg(long, default_value = "ltc-listwise")]
    tag: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    ltc: LtcFlags,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Second run for a paired significance test against --run.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV path for the grid.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
    rates: Vec<f64>,
    /// Target layers to sweep; every layer of the model when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    max_doc_tokens: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Sequence length for the predicted-cost column; the model's context
    /// window when omitted.
    #[arg(long)]
    predicted_n: Option<usize>,
}

#[derive(Args)]
struct BenchCmd {
    /// Layers assumed by the analytical table.
    #[arg(long, default_value_t = 8)]
    num_layers: usize,
    /// Sequence length assumed by the analytical table.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Also measure wall-clock QPS for --layer/--rate vs an uncompressed
    /// baseline on a synthetic workload.
    #[arg(long)]
    measure: bool,
    /// Checkpoint for the measured run; a seeded desk model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    ltc: LtcFlags,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Shape { .. } => 3,
        Error::Parse { .. } | Error::Io { .. } | Error::Input(_) => 2,
        Error::InvalidArgument(_) | Error::Config(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let ok = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(cmd) => cmd_train(cmd),
        Command::Gradcheck(cmd) => cmd_gradcheck(cmd),
        Command::Synth(cmd) => cmd_synth(cmd),
        Command::Rerank(cmd) => cmd_rerank(cmd),
        Command::ListwiseRerank(cmd) => cmd_listwise(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::Sweep(cmd) => cmd_sweep(cmd),
        Command::Bench(cmd) => cmd_bench(cmd),
    }
}

fn cmd_train(cmd: TrainCmd) -> Result<(), Error> {
    let model_cfg = cmd.model.config();
    let ltc = cmd.ltc.config()?;
    ltc.validate_for(model_cfg.num_layers)?;
    let train_cfg = TrainConfig {
        epochs: cmd.epochs,
        batch_size: cmd.batch_size,
        learning_rate: cmd.learning_rate,
        negatives_per_query: cmd.negatives,
        ltc,
        seed: RngSeed(cmd.seed),
    };
    let train_set = synth_task_gen(
        RngSeed(cmd.seed),
        cmd.queries,
        cmd.doc_len,
        cmd.negatives,
        &model_cfg,
    )?;
    let heldout = synth_task_gen(
        RngSeed(cmd.seed ^ 0x4845_4C44),
        cmd.heldout,
        cmd.doc_len,
        cmd.negatives,
        &model_cfg,
    )?;
    let (params, stats) = match &cmd.log {
        Some(path) => {
            let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
            train(&train_cfg, &model_cfg, &train_set, &heldout, cmd.threads, Some(&mut file))?
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            train(&train_cfg, &model_cfg, &train_set, &heldout, cmd.threads, Some(&mut lock))?
        }
    };
    checkpoint::save(&cmd.output, &model_cfg, &params)?;
    if let Some(last) = stats.last() {
        outln!(
            "saved {} after epoch {} (loss {:.6}, held-out accuracy {:.4})",
            cmd.output.display(),
            last.epoch,
            last.mean_loss,
            last.heldout_acc
        );
    }
    Ok(())
}

fn cmd_gradcheck(cmd: GradcheckCmd) -> Result<(), Error> {
    let cfg = ModelConfig::tiny();
    let ltc = cmd.ltc.config()?;
    ltc.validate_for(cfg.num_layers)?;
    let err = finite_diff_check(&cfg, &ltc, RngSeed(cmd.seed), cmd.epsilon)?;
    outln!("max_rel_err {err:.3e}");
    if err >= GRAD_TOL {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {err:.3e} >= {GRAD_TOL:.0e}"
        )));
    }
    Ok(())
}

fn cmd_synth(cmd: SynthCmd) -> Result<(), Error> {
    std::fs::create_dir_all(&cmd.out_dir).map_err(|e| Error::io(&cmd.out_dir, e))?;
    let files = synthdata::generate(
        &cmd.out_dir,
        cmd.seed,
        cmd.queries,
        cmd.doc_len,
        cmd.negatives,
    )?;
    for p in [&files.corpus, &files.queries, &files.run, &files.qrels] {
        outln!("wrote {}", p.display());
    }
    Ok(())
}

/// Load the shared rerank inputs: checkpoint, tokenized queries, first-stage
/// run, and tokenized candidate documents (truncated to `max_doc_tokens`).
struct RerankInputs {
    cfg: ModelConfig,
    params: Parameters<f32>,
    run: Vec<(String, Vec<Candidate>)>,
    query_tokens: HashMap<String, Vec<u32>>,
    docs: HashMap<String, Vec<u32>>,
}

fn load_rerank_inputs(
    checkpoint_path: &Path,
    corpus_path: &Path,
    queries_path: &Path,
    run_path: &Path,
    max_doc_tokens: usize,
) -> Result<RerankInputs, Error> {
    let (cfg, params) = checkpoint::load(checkpoint_path)?;
    let corpus = load_corpus(corpus_path)?;
    let queries = load_queries(queries_path)?;
    let run = load_run(run_path)?;
    let query_tokens: HashMap<String, Vec<u32>> = queries
        .into_iter()
        .map(|(qid, text)| (qid, tokenize(&text, &cfg)))
        .collect();
    for (qid, _) in &run {
        if !query_tokens.contains_key(qid) {
            return Err(Error::Input(format!("run references query {qid} with no query text")));
        }
    }
    let mut docs = HashMap::new();
    for (_, cands) in &run {
        for c in cands {
            if let Some(text) = corpus.get(&c.doc_id) {
                let mut toks = tokenize(text, &cfg);
                toks.truncate(max_doc_tokens);
                docs.insert(c.doc_id.clone(), toks);
            }
        }
    }
    Ok(RerankInputs { cfg, params, run, query_tokens, docs })
}

/// Run one closure per query, optionally across a thread pool, preserving
/// query order in the output.
fn per_query_entries<F>(
    inputs: &RerankInputs,
    threads: usize,
    score_query: F,
) -> Result<Vec<RunEntry>, Error>
where
    F: Fn(&str, &[u32], &[Candidate]) -> Result<Vec<RunEntry>, Error> + Send + Sync,
{
    let score_one = |(qid, cands): &(String, Vec<Candidate>)| -> Result<Vec<RunEntry>, Error> {
        score_query(qid, &inputs.query_tokens[qid], cands)
    };
    let per_query: Vec<Result<Vec<RunEntry>, Error>> = if threads > 1 {
        std::thread::scope(|scope| {
            let chunk = inputs.run.len().div_ceil(threads);
            let handles: Vec<_> = inputs
                .run
                .chunks(chunk.max(1))
                .map(|part| scope.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    } else {
        inputs.run.iter().map(score_one).collect()
    };
    let mut entries = Vec::new();
    for group in per_query {
        entries.extend(group?);
    }
    Ok(entries)
}

fn cmd_rerank(cmd: RerankCmd) -> Result<(), Error> {
    let ltc = cmd.ltc.config()?;
    let inputs = load_rerank_inputs(
        &cmd.checkpoint,
        &cmd.corpus,
        &cmd.queries,
        &cmd.run,
        cmd.max_doc_tokens,
    )?;
    ltc.validate_for(inputs.cfg.num_layers)?;
    let entries = per_query_entries(&inputs, cmd.threads, |qid, qtoks, cands| {
        let mut scorer = ModelPointwise { params: &inputs.params, cfg: &inputs.cfg, ltc };
        rerank_pointwise(qid, qtoks, cands, &inputs.docs, cmd.depth, &mut scorer)
    })?;
    write_run(&entries, &cmd.output, &cmd.tag)?;
    outln!("wrote {}", cmd.output.display());
    Ok(())
}

fn cmd_listwise(cmd: ListwiseCmd) -> Result<(), Error> {
    let ltc = cmd.ltc.config()?;
    if cmd.window > K_MAX {
        return Err(Error::InvalidArgument(format!(
            "window ({}) exceeds the identifier budget ({K_MAX})",
            cmd.window
        )));
    }
    let inputs = load_rerank_inputs(
        &cmd.checkpoint,
        &cmd.corpus,
        &cmd.queries,
        &cmd.run,
        cmd.max_doc_tokens,
    )?;
    ltc.validate_for(inputs.cfg.num_layers)?;
    let instruction_tokens = tokenize(&cmd.instruction, &inputs.cfg);
    let entries = per_query_entries(&inputs, cmd.threads, |qid, qtoks, cands| {
        let mut scorer = ModelListwise {
            params: &inputs.params,
            cfg: &inputs.cfg,
            ltc,
            instruction_tokens: instruction_tokens.clone(),
            max_doc_tokens: cmd.max_doc_tokens,
        };
        sliding_window_rerank(qid, qtoks, cands, &inputs.docs, cmd.window, cmd.step, &mut scorer)
    })?;
    write_run(&entries, &cmd.output, &cmd.tag)?;
    outln!("wrote {}", cmd.output.display());
    Ok(())
}

fn cmd_eval(cmd: EvalCmd) -> Result<(), Error> {
    let run = load_run(&cmd.run)?;
    let qrels = load_qrels(&cmd.qrels)?;
    let report = evaluate_run(&run, &qrels);
    let mut out = String::new();
    {
        let mut buf = Vec::new();
        write_report(&report, &mut buf).map_err(|e| Error::io(&cmd.run, e))?;
        out.push_str(&String::from_utf8(buf).expect("report is UTF-8"));
    }
    if let Some(baseline_path) = &cmd.baseline {
        let baseline = evaluate_run(&load_run(baseline_path)?, &qrels);
        let deltas = paired_deltas(&report, &baseline);
        let test = paired_t_test(&deltas)?;
        out.push_str(&format!("t_stat\t{:.6}\np_value\t{:.6}\n", test.t, test.p));
    }
    match &cmd.output {
        Some(path) => std::fs::write(path, out).map_err(|e| Error::io(path, e))?,
        None => {
            use std::io::Write as _;
            let _ = std::io::stdout().write_all(out.as_bytes());
        }
    }
    Ok(())
}

fn cmd_sweep(cmd: SweepCmd) -> Result<(), Error> {
    let inputs = load_rerank_inputs(
        &cmd.checkpoint,
        &cmd.corpus,
        &cmd.queries,
        &cmd.run,
        cmd.max_doc_tokens,
    )?;
    let qrels = load_qrels(&cmd.qrels)?;
    let layers: Vec<usize> = match cmd.layers {
        Some(ls) => ls,
        None => (1..=inputs.cfg.num_layers).collect(),
    };
    let data = SweepData {
        run: &inputs.run,
        query_tokens: &inputs.query_tokens,
        docs: &inputs.docs,
        qrels: &qrels,
    };
    let settings = SweepSettings {
        depth: cmd.depth,
        warmup: cmd.warmup,
        repeats: cmd.repeats,
        predicted_n: cmd.predicted_n,
    };
    let cells = sweep_grid(
        &cmd.rates,
        &layers,
        &data,
        &inputs.params,
        &inputs.cfg,
        &settings,
        &cmd.output,
    )?;
    outln!("wrote {} ({} cells)", cmd.output.display(), cells.len());
    Ok(())
}

fn cmd_bench(cmd: BenchCmd) -> Result<(), Error> {
    let rates = [0.2, 0.4, 0.6, 0.8, 1.0];
    outln!("target_layer\trate\tattn_speedup\tlinear_speedup");
    for layer in 1..=cmd.num_layers {
        for rate in rates {
            let attn = attention_cost_model(cmd.num_layers, cmd.n, layer, rate)?;
            let lin = linear_cost_model(cmd.num_layers, cmd.n, layer, rate)?;
            outln!(
                "{layer}\t{rate}\t{:.3}\t{:.3}",
                attn.speedup_ratio, lin.speedup_ratio
            );
        }
    }
    if !cmd.measure {
        return Ok(());
    }
    let ltc = match cmd.ltc.config()? {
        LtcConfig::Disabled => LtcConfig::enabled(2, 0.4)?,
        enabled => enabled,
    };
    let (cfg, params) = match &cmd.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => {
            let cfg = ModelConfig::desk_default();
            let params = Parameters::<f32>::init(&cfg, RngSeed(cmd.seed))?;
            (cfg, params)
        }
    };
    ltc.validate_for(cfg.num_layers)?;
    if cmd.n + 1 > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} does not fit the model's context window {}",
            cmd.n, cfg.max_seq
        )));
    }
    let mut rng = WeightRng::new(RngSeed(cmd.seed));
    let query_len = 4usize;
    let doc_len = cmd.n - query_len - 1;
    let word = |rng: &mut WeightRng| 2 + (rng.next_below(cfg.word_id_range() as u64)) as u32;
    let mut docs = HashMap::new();
    let items: Vec<WorkItem> = (0..cmd.queries)
        .map(|qi| {
            let candidates: Vec<Candidate> = (0..cmd.candidates)
                .map(|ci| {
                    let id = format!("q{qi}d{ci}");
                    docs.insert(id.clone(), (0..doc_len).map(|_| word(&mut rng)).collect());
                    Candidate {
                        doc_id: id,
                        first_stage_rank: ci + 1,
                        first_stage_score: (cmd.candidates - ci) as f32,
                    }
                })
                .collect();
            WorkItem {
                query_id: format!("q{qi}"),
                query_tokens: (0..query_len).map(|_| word(&mut rng)).collect(),
                candidates,
            }
        })
        .collect();
    let baseline_qps = measure_qps(
        &items,
        &docs,
        &params,
        &cfg,
        &LtcConfig::Disabled,
        cmd.candidates,
        cmd.warmup,
        cmd.repeats,
    )?;
    let ltc_qps = measure_qps(
        &items,
        &docs,
        &params,
        &cfg,
        &ltc,
        cmd.candidates,
        cmd.warmup,
        cmd.repeats,
    )?;
    outln!("baseline_qps\t{baseline_qps:.3}");
    outln!("compressed_qps\t{ltc_qps:.3}");
    outln!("measured_speedup\t{:.3}", ltc_qps / baseline_qps);
    Ok(())
}

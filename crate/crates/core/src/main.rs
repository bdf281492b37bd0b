//! Pipeline entrypoint: gen-data → train-crq → tokenize → pretrain →
//! align → infer / eval / bench, all driven by one TOML config and a run
//! directory with a fixed layout (config.resolved, checkpoints/, metrics/,
//! data/).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use higr::checkpoint;
use higr::config::RunConfig;
use higr::crqvae::train::{assign_sids, train_crq};
use higr::crqvae::SemanticID;
use higr::error::{HigrError, Result};
use higr::evalbench::{
    bench_efficiency, evaluate, write_bench_csv, write_metrics_csv, BenchTruth, EvalRecord,
    TruthKind,
};
use higr::formats::{read_jsonl, write_jsonl, CorpusRecord, SampleRecord, SidRecord};
use higr::gsbi::{Engine, SidIndex};
use higr::hsd::train::pretrain;
use higr::hsd::{HsdModel, ModelKind, SlateSample, UserContext};
use higr::orpo::pairs::build_pairs;
use higr::orpo::train::{align, mean_margin};
use higr::synthdata::{generate_world, simulate_sessions, SessionRecord};

#[derive(Parser)]
#[command(name = "higr", about = "hierarchical generative slate recommendation pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Run directory for checkpoints, metrics, and data.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Override the world seed (re-seeds every stage coherently).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker count (execution is single-threaded and deterministic; the
    /// flag is accepted for interface stability).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic item corpus and user sessions.
    GenData,
    /// Train the semantic-ID tokenizer on the corpus.
    TrainCrq,
    /// Assign semantic IDs and build decoder training samples.
    Tokenize,
    /// Pretrain the slate decoder on teacher-forced NLL.
    Pretrain,
    /// Preference-align the pretrained decoder.
    Align,
    /// Decode slates for a sample of users.
    Infer,
    /// Ranking metrics against held-out session truth.
    Eval,
    /// Decoding-efficiency sweep (modes x beam widths x cache settings).
    Bench,
}

fn error_kind(e: &HigrError) -> &'static str {
    match e {
        HigrError::Dim(_) => "dim",
        HigrError::Index(_) => "index",
        HigrError::Contract(_) => "contract",
        HigrError::Vocab(_) => "vocab",
        HigrError::NonFinite { .. } => "non_finite",
        HigrError::Config(_) => "config",
        HigrError::Data(_) => "data",
        HigrError::Generation(_) => "generation",
        HigrError::Checkpoint(_) => "checkpoint",
        HigrError::Io(_) => "io",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let code = e.exit_code();
        eprintln!("error code={} kind={} msg={:?}", code, error_kind(&e), e.to_string());
        std::process::exit(code);
    }
}

/// Fixed run-directory layout.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn prepare(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "metrics", "data"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }
    fn corpus(&self) -> PathBuf {
        self.root.join("data/corpus.jsonl")
    }
    fn sessions(&self) -> PathBuf {
        self.root.join("data/sessions.jsonl")
    }
    fn sids(&self) -> PathBuf {
        self.root.join("data/sids.jsonl")
    }
    fn samples(&self) -> PathBuf {
        self.root.join("data/samples.jsonl")
    }
    fn pairs(&self) -> PathBuf {
        self.root.join("data/pairs.jsonl")
    }
    fn slates(&self) -> PathBuf {
        self.root.join("data/slates.jsonl")
    }
    fn crq_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/crq.ckpt")
    }
    fn hsd_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/hsd.ckpt")
    }
    fn aligned_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/hsd_aligned.ckpt")
    }
    fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }
}

fn require_absent(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(HigrError::Config(format!(
            "{} already exists; refusing to overwrite (use a fresh --run-dir)",
            path.display()
        )));
    }
    Ok(())
}

fn require_present(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(HigrError::Data(format!(
            "{} is missing; run `{produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(HigrError::Config("--workers must be >= 1".into()));
    }
    let mut cfg = RunConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed)?;
    }
    let dir = RunDir::prepare(&cli.run_dir)?;
    let resolved = cfg.to_resolved_toml()?;
    // one config per run directory: first writer pins it, later stages
    // must match it exactly
    let resolved_path = dir.resolved_config();
    if resolved_path.exists() {
        let existing = fs::read_to_string(&resolved_path)?;
        if existing != resolved {
            return Err(HigrError::Config(format!(
                "{} differs from the current configuration; refusing to mix configs in one run directory",
                resolved_path.display()
            )));
        }
    } else {
        fs::write(&resolved_path, &resolved)?;
    }
    println!("resolved configuration:\n{resolved}");
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, &dir),
        Cmd::TrainCrq => cmd_train_crq(&cfg, &dir),
        Cmd::Tokenize => cmd_tokenize(&cfg, &dir),
        Cmd::Pretrain => cmd_pretrain(&cfg, &dir),
        Cmd::Align => cmd_align(&cfg, &dir),
        Cmd::Infer => cmd_infer(&cfg, &dir),
        Cmd::Eval => cmd_eval(&cfg, &dir),
        Cmd::Bench => cmd_bench(&cfg, &dir),
    }
}

fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.corpus())?;
    require_absent(&dir.sessions())?;
    let world = generate_world(&cfg.world)?;
    let sessions = simulate_sessions(&world);
    write_jsonl(&dir.corpus(), &world.corpus_records())?;
    write_jsonl(&dir.sessions(), &sessions)?;
    println!(
        "gen-data: {} items, {} users, {} sessions",
        world.items.len(),
        world.users.len(),
        sessions.len()
    );
    Ok(())
}

fn load_corpus(dir: &RunDir) -> Result<Vec<higr::crqvae::ItemEmbedding>> {
    require_present(&dir.corpus(), "gen-data")?;
    let records: Vec<CorpusRecord> = read_jsonl(&dir.corpus())?;
    Ok(records
        .into_iter()
        .map(|r| higr::crqvae::ItemEmbedding {
            item_id: r.item_id,
            x: r.embedding,
        })
        .collect())
}

fn cmd_train_crq(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.crq_ckpt())?;
    let corpus = load_corpus(dir)?;
    let (model, logs) = train_crq(&corpus, cfg.crq.clone(), &cfg.crq_train)?;
    checkpoint::save_crq(&dir.crq_ckpt(), &model)?;
    let mut csv = String::from("step,total,recon,layer_quant,global_quant,contrastive\n");
    for l in &logs {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            l.step, l.parts.total, l.parts.recon, l.parts.layer_quant, l.parts.global_quant,
            l.parts.contrastive
        ));
    }
    fs::write(dir.metrics("crq_train.csv"), csv)?;
    println!(
        "train-crq: {} steps, final loss {:.6}",
        logs.len(),
        logs.last().map(|l| l.parts.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_tokenize(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.sids())?;
    require_absent(&dir.samples())?;
    require_present(&dir.crq_ckpt(), "train-crq")?;
    require_present(&dir.sessions(), "gen-data")?;
    let corpus = load_corpus(dir)?;
    let model = checkpoint::load_crq(&dir.crq_ckpt())?;
    let sids = assign_sids(&model, &corpus)?;
    let sid_records: Vec<SidRecord> = corpus
        .iter()
        .zip(&sids)
        .map(|(it, sid)| SidRecord {
            item_id: it.item_id.clone(),
            codes: sid.codes.clone(),
        })
        .collect();
    write_jsonl(&dir.sids(), &sid_records)?;
    let sessions: Vec<SessionRecord> = read_jsonl(&dir.sessions())?;
    let item_ids: Vec<String> = corpus.iter().map(|it| it.item_id.clone()).collect();
    let samples = higr::synthdata::sessions_to_sample_records(
        &sessions,
        &sids,
        &item_ids,
        cfg.model.max_history,
    )?;
    write_jsonl(&dir.samples(), &samples)?;
    println!("tokenize: {} items, {} samples", sids.len(), samples.len());
    Ok(())
}

fn load_samples(dir: &RunDir) -> Result<Vec<SlateSample>> {
    require_present(&dir.samples(), "tokenize")?;
    let records: Vec<SampleRecord> = read_jsonl(&dir.samples())?;
    Ok(records.iter().map(SlateSample::from_record).collect())
}

fn cmd_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.hsd_ckpt())?;
    let samples = load_samples(dir)?;
    let (model, logs) = pretrain(&samples, cfg.model.clone(), &cfg.pretrain)?;
    checkpoint::save_hsd(&dir.hsd_ckpt(), &model)?;
    let mut csv = String::from("step,loss\n");
    for l in &logs {
        csv.push_str(&format!("{},{:.9}\n", l.step, l.loss));
    }
    fs::write(dir.metrics("pretrain.csv"), csv)?;
    println!(
        "pretrain: {} samples, final loss {:.6}",
        samples.len(),
        logs.last().map(|l| l.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_align(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.aligned_ckpt())?;
    require_present(&dir.hsd_ckpt(), "pretrain")?;
    let samples = load_samples(dir)?;
    let mut model = checkpoint::load_hsd(&dir.hsd_ckpt())?;
    let align_cfg = cfg.align.config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pair_seed());
    let pairs = build_pairs(&samples, &model, &align_cfg, &mut rng)?;
    let pair_records: Vec<_> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.to_record(i))
        .collect();
    write_jsonl(&dir.pairs(), &pair_records)?;
    let margin_before = mean_margin(&model, &pairs)?;
    let logs = align(&mut model, &pairs, &align_cfg, &cfg.align_opts())?;
    let margin_after = mean_margin(&model, &pairs)?;
    checkpoint::save_hsd(&dir.aligned_ckpt(), &model)?;
    let mut csv = String::from("step,loss\n");
    for l in &logs {
        csv.push_str(&format!("{},{:.9}\n", l.step, l.loss));
    }
    csv.push_str(&format!("margin_before,{margin_before:.9}\n"));
    csv.push_str(&format!("margin_after,{margin_after:.9}\n"));
    fs::write(dir.metrics("align.csv"), csv)?;
    println!(
        "align: {} pairs, margin {margin_before:.4} -> {margin_after:.4}",
        pairs.len()
    );
    Ok(())
}

/// Final per-user state reconstructed from the session log.
struct UserState {
    features: Vec<f32>,
    viewed: Vec<usize>,
    impressed: BTreeSet<usize>,
}

fn user_states(sessions: &[SessionRecord], n_users: usize) -> Result<Vec<UserState>> {
    let mut states: Vec<Option<UserState>> = (0..n_users).map(|_| None).collect();
    for s in sessions {
        let slot = states
            .get_mut(s.user)
            .ok_or_else(|| HigrError::Data(format!("sessions: user {} out of range", s.user)))?;
        let st = slot.get_or_insert_with(|| UserState {
            features: s.user_features.clone(),
            viewed: Vec::new(),
            impressed: BTreeSet::new(),
        });
        for (&item, &viewed) in s.slate.iter().zip(&s.effective_view) {
            st.impressed.insert(item);
            if viewed {
                st.viewed.push(item);
            }
        }
    }
    states
        .into_iter()
        .enumerate()
        .map(|(u, s)| s.ok_or_else(|| HigrError::Data(format!("sessions: no sessions for user {u}"))))
        .collect()
}

/// Everything needed to decode and ground slates for the first
/// `n_contexts` users.
struct DecodeSetup {
    model: HsdModel,
    contexts: Vec<UserContext>,
    index: SidIndex,
    item_ids: Vec<String>,
    truth_effective: Vec<BTreeSet<String>>,
    truth_impressed: Vec<BTreeSet<String>>,
}

fn decode_setup(cfg: &RunConfig, dir: &RunDir) -> Result<DecodeSetup> {
    let ckpt = if dir.aligned_ckpt().exists() {
        dir.aligned_ckpt()
    } else {
        dir.hsd_ckpt()
    };
    require_present(&ckpt, "pretrain")?;
    require_present(&dir.sids(), "tokenize")?;
    require_present(&dir.sessions(), "gen-data")?;
    let model = checkpoint::load_hsd(&ckpt)?;
    let sid_records: Vec<SidRecord> = read_jsonl(&dir.sids())?;
    let sessions: Vec<SessionRecord> = read_jsonl(&dir.sessions())?;
    let states = user_states(&sessions, cfg.world.n_users)?;
    let item_ids: Vec<String> = sid_records.iter().map(|r| r.item_id.clone()).collect();
    let sids: Vec<SemanticID> = sid_records
        .iter()
        .map(|r| SemanticID::new(r.codes.clone()))
        .collect();
    // grounding prior: effective-view popularity across all sessions
    let mut popularity = vec![0.0f32; item_ids.len()];
    for st in &states {
        for &item in &st.viewed {
            if item < popularity.len() {
                popularity[item] += 1.0;
            }
        }
    }
    let catalog: Vec<(String, SemanticID, f32)> = item_ids
        .iter()
        .zip(&sids)
        .zip(&popularity)
        .map(|((id, sid), &p)| (id.clone(), sid.clone(), p))
        .collect();
    let index = SidIndex::build(&catalog);
    let n = cfg.bench.n_contexts.min(states.len());
    let contexts = states[..n]
        .iter()
        .map(|st| {
            let start = st.viewed.len().saturating_sub(cfg.model.max_history);
            UserContext {
                features: st.features.clone(),
                history: st.viewed[start..].iter().map(|&i| sids[i].clone()).collect(),
            }
        })
        .collect();
    let truth_effective = states[..n]
        .iter()
        .map(|st| st.viewed.iter().map(|&i| item_ids[i].clone()).collect())
        .collect();
    let truth_impressed = states[..n]
        .iter()
        .map(|st| st.impressed.iter().map(|&i| item_ids[i].clone()).collect())
        .collect();
    Ok(DecodeSetup {
        model,
        contexts,
        index,
        item_ids,
        truth_effective,
        truth_impressed,
    })
}

#[derive(Serialize, Deserialize)]
struct SlateOut {
    user: usize,
    item_ids: Vec<String>,
    codes: Vec<Vec<usize>>,
}

fn cmd_infer(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require_absent(&dir.slates())?;
    let setup = decode_setup(cfg, dir)?;
    let engine = Engine::new(&setup.model, true).with_catalog(&setup.index);
    let mut out = Vec::with_capacity(setup.contexts.len());
    for (u, ctx) in setup.contexts.iter().enumerate() {
        let decoded = engine.generate(ctx, cfg.model.beam_width)?;
        let grounded = setup.index.ground_slate(&decoded.beams)?;
        out.push(SlateOut {
            user: u,
            item_ids: grounded,
            codes: decoded.slate.iter().map(|s| s.codes.clone()).collect(),
        });
    }
    write_jsonl(&dir.slates(), &out)?;
    println!(
        "infer: {} slates over a catalog of {} items",
        out.len(),
        setup.item_ids.len()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let out_path = dir.metrics("eval.csv");
    require_absent(&out_path)?;
    let setup = decode_setup(cfg, dir)?;
    let engine = Engine::new(&setup.model, true).with_catalog(&setup.index);
    let mut records = Vec::with_capacity(setup.contexts.len());
    for (u, ctx) in setup.contexts.iter().enumerate() {
        let decoded = engine.generate(ctx, cfg.model.beam_width)?;
        let predicted = setup.index.ground_slate(&decoded.beams)?;
        records.push(EvalRecord {
            predicted,
            truth_effective: setup.truth_effective[u].clone(),
            truth_impressed: setup.truth_impressed[u].clone(),
        });
    }
    let rows = evaluate(
        &records,
        &cfg.bench.eval_ks,
        &[TruthKind::Effective, TruthKind::Impressed],
    )?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    fs::write(&out_path, buf)?;
    for r in &rows {
        println!(
            "eval: k={} truth={} hit={:.4} recall={:.4} ndcg={:.4}",
            r.k, r.truth, r.hit, r.recall, r.ndcg
        );
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let out_path = dir.metrics("bench.csv");
    require_absent(&out_path)?;
    let setup = decode_setup(cfg, dir)?;
    let truth = BenchTruth {
        index: &setup.index,
        truth_effective: &setup.truth_effective,
    };
    let hier_models = vec![("hierarchical".to_string(), &setup.model)];
    let mut rows = bench_efficiency(
        &hier_models,
        &setup.contexts,
        &cfg.bench.beam_widths,
        &cfg.bench.kv_cache,
        Some(&truth),
    )?;
    // depth-matched flat baseline (fresh weights; efficiency comparison
    // only, so no grounding/recall)
    let flat_cfg = higr::hsd::ModelConfig {
        kind: ModelKind::Flat,
        l_slate: cfg.model.l_slate + cfg.model.l_item,
        l_item: 0,
        ..cfg.model.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_init_seed());
    let flat = HsdModel::init(flat_cfg, &mut rng)?;
    let flat_models = vec![("flat".to_string(), &flat)];
    rows.extend(bench_efficiency(
        &flat_models,
        &setup.contexts,
        &cfg.bench.beam_widths,
        &cfg.bench.kv_cache,
        None,
    )?);
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows)?;
    fs::write(&out_path, buf)?;
    for r in &rows {
        println!(
            "bench: mode={} b={} kv={} samples_per_minute={:.1} attention_flops={}",
            r.mode, r.beam_width, r.kv_cache, r.samples_per_minute, r.attention_flops
        );
    }
    Ok(())
}

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use deltaswitch::analytics::{cumulative_energy_report, energy_csv, parse_m_range, ratio_csv, ratio_curve, SizeModel};
use deltaswitch::compress::{
    compress_expert, compressed_size_bytes, deserialize_artifact, extract_delta, serialize_artifact, CompressionConfig,
    DistillConfig,
};
use deltaswitch::infer::{bench_decode, DeltaSet};
use deltaswitch::registry::{Registry, RegistryConfig};
use deltaswitch::router::{evaluate_router, load_dataset, save_dataset, RouterModel, SyntheticRouting, STANDARD_DOMAINS};
use deltaswitch::salient::SalientMetric;
use deltaswitch::serve::{spawn_server, Client, ServeRequest, ServeState};
use deltaswitch::toylm::{calibration_set, load_sequences, save_sequences, synthesize_expert, ExpertSpec, ToyConfig, ToyLm};

use deltaswitch::numerics::SEED_ENV;

#[derive(Parser)]
#[command(name = "deltaswitch", version, about = "Compress fine-tuning deltas and serve many experts over one base")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a fine-tuned toy model against its base into a .mesw artifact.
    Compress(CompressArgs),
    /// Print the manifest and per-layer layout of an artifact.
    Inspect { artifact: PathBuf },
    /// Train the n-gram domain router on a JSONL dataset.
    RouteTrain(RouteTrainArgs),
    /// Evaluate a router on a JSONL dataset.
    RouteEval {
        #[arg(long)]
        router: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the JSONL-over-TCP daemon.
    Serve(ServeArgs),
    /// Time the base GEMM and delta stages of a batched forward.
    Bench(BenchArgs),
    /// Compression-ratio curve or singular-value energy CSV.
    Report {
        #[command(subcommand)]
        what: ReportCmd,
    },
    /// Write a seeded base model.
    ToyBase(ToyBaseArgs),
    /// Write a synthetic fine-tuned expert of a base.
    ToyExpert(ToyExpertArgs),
    /// Write random calibration token sequences.
    Calib(CalibArgs),
    /// Write a synthetic routing dataset.
    GenRoutingData(GenRoutingArgs),
    /// Add an artifact to a registry directory.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Send one request to a running daemon.
    Query(QueryArgs),
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    #[arg(long, default_value_t = 8)]
    salient_k: usize,
    #[arg(long, default_value = "reconstruction")]
    metric: SalientMetric,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    distill_epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value = "expert")]
    model_id: String,
    #[arg(long, default_value = "general")]
    domain: String,
    /// Seed for the random metric.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RouteTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated label order; defaults to first appearance in the data.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    budget_mb: f64,
    #[arg(long)]
    router: PathBuf,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    /// Sequences per pass; defaults to one per expert.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    #[arg(long, default_value_t = 8)]
    salient_k: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// `m,ratio` CSV. Sizes come from the flags or, when given, from files.
    Ratio {
        #[arg(long)]
        psi: Option<f64>,
        #[arg(long)]
        psit: Option<f64>,
        #[arg(long)]
        phi: Option<f64>,
        /// Base model; Ψ becomes its FP16 byte count.
        #[arg(long, conflicts_with = "psi")]
        base: Option<PathBuf>,
        /// Artifact; Ψ̃ becomes its exact byte size.
        #[arg(long, conflicts_with = "psit")]
        artifact: Option<PathBuf>,
        /// Router; Φ becomes its serialized byte size.
        #[arg(long, conflicts_with = "phi")]
        router: Option<PathBuf>,
        #[arg(long, default_value = "1..16")]
        m_range: String,
    },
    /// `layer,rank,energy` CSV of the deltas between two models.
    Energy {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
    },
}

#[derive(Args)]
struct ToyBaseArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    dead_channels: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ToyExpertArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.01)]
    sigma: f32,
    #[arg(long, default_value_t = 4)]
    planted_rows: usize,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f32,
    #[arg(long, default_value_t = 0)]
    misleading_rows: usize,
}

#[derive(Args)]
struct CalibArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenRoutingArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    #[arg(long, default_value_t = 100)]
    per_domain: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the keyword pools for non-standard domains.
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    addr: String,
    #[arg(long)]
    query: String,
    #[arg(long)]
    expert: Option<String>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long, default_value = "0")]
    id: String,
}

fn seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn load_artifact(path: &Path) -> anyhow::Result<deltaswitch::compress::ExpertArtifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(deserialize_artifact(&bytes)?)
}

fn open_registry(dir: &Path, base: &ToyLm, budget_bytes: usize) -> anyhow::Result<Registry> {
    std::fs::create_dir_all(dir)?;
    Ok(Registry::open(RegistryConfig {
        root: dir.to_path_buf(),
        budget_bytes,
        base_digest: base.digest(),
    })?)
}

fn cmd_compress(a: CompressArgs) -> anyhow::Result<()> {
    let base = ToyLm::load(&a.base)?;
    let ft = ToyLm::load(&a.finetuned)?;
    let calib = load_sequences(&a.calib)?;
    let cfg = CompressionConfig {
        bits: a.bits,
        salient_k: a.salient_k,
        metric: a.metric,
        distill: DistillConfig {
            epochs: a.distill_epochs,
            lr: a.lr,
            batch: a.batch,
            ..DistillConfig::default()
        },
        seed: seed(a.seed)?,
    };
    let out = compress_expert(&base, &ft, &calib, &cfg, &a.model_id, &a.domain)?;
    std::fs::write(&a.out, serialize_artifact(&out.artifact))?;
    print_sizes(&out.artifact);
    if let Some(r) = &out.distill {
        println!("initial_loss={:.6e}", r.initial_loss);
        println!("final_loss={:.6e}", r.final_loss);
    }
    Ok(())
}

fn print_sizes(artifact: &deltaswitch::compress::ExpertArtifact) {
    let size = compressed_size_bytes(artifact);
    for (l, (s, c)) in size.layers.iter().zip(&artifact.layers).enumerate() {
        println!(
            "layer={l} m={} n={} bits={} k={} codes={} salient={} steps={} indices={} header={} total={}",
            c.rows(),
            c.cols(),
            c.bits(),
            c.salient().len(),
            s.codes,
            s.salient,
            s.steps,
            s.indices,
            s.header,
            s.total()
        );
    }
    println!("file_header={}", size.header);
    println!("total_bytes={}", size.total);
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let artifact = deserialize_artifact(&bytes)?;
    println!("manifest={}", serde_json::to_string(&artifact.manifest)?);
    print_sizes(&artifact);
    for (l, c) in artifact.layers.iter().enumerate() {
        println!("layer={l} salient_indices={:?}", c.salient().indices());
    }
    println!("base_digest={}", artifact.manifest.base_digest);
    println!("digest={}", artifact.digest());
    Ok(())
}

fn domains_of(records: &[deltaswitch::router::RoutingRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    records.iter().filter(|r| seen.insert(r.domain.clone())).map(|r| r.domain.clone()).collect()
}

fn cmd_route_train(a: RouteTrainArgs) -> anyhow::Result<()> {
    let records = load_dataset(&a.data)?;
    let domains = a.domains.unwrap_or_else(|| domains_of(&records));
    let router = RouterModel::train(&records, &domains, seed(a.seed)?)?;
    router.save(&a.out)?;
    println!("domains={}", domains.join(","));
    println!("records={}", records.len());
    println!("size_bytes={}", router.size_bytes());
    Ok(())
}

fn cmd_route_eval(router: &Path, data: &Path) -> anyhow::Result<()> {
    let router = RouterModel::load(router)?;
    let records = load_dataset(data)?;
    let eval = evaluate_router(&router, &records)?;
    println!("accuracy={:.6}", eval.accuracy);
    println!("count={}", eval.count);
    for (d, acc) in router.domains().iter().zip(&eval.per_domain) {
        println!("domain={d} accuracy={acc:.6}");
    }
    for (d, row) in router.domains().iter().zip(&eval.confusion) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("confusion {d} {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    if !(a.budget_mb.is_finite() && a.budget_mb > 0.0) {
        bail!("budget-mb must be positive");
    }
    let base = ToyLm::load(&a.base)?;
    let budget = (a.budget_mb * 1024.0 * 1024.0) as usize;
    let registry = open_registry(&a.registry, &base, budget)?;
    let router = RouterModel::load(&a.router)?;
    let state = Arc::new(ServeState::new(base, registry, router)?);
    let handle = spawn_server(state, (a.host.as_str(), a.port))?;
    println!("listening={}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.experts == 0 {
        bail!("bench needs at least one expert");
    }
    let s = seed(a.seed)?;
    let base = ToyLm::base(
        ToyConfig {
            vocab: 256,
            width: a.width,
            depth: a.depth,
            dead_channels: 0,
        },
        s,
    )?;
    let calib = calibration_set(256, 16, 8, s);
    let cfg = CompressionConfig {
        bits: a.bits,
        salient_k: a.salient_k,
        distill: DistillConfig {
            epochs: 0,
            ..DistillConfig::default()
        },
        ..CompressionConfig::default()
    };
    let providers = (0..a.experts)
        .map(|e| {
            let ex = synthesize_expert(&base, &ExpertSpec::new(format!("d{e}"), s + 1 + e as u64))?;
            let out = compress_expert(&base, &ex.model, &calib, &cfg, &format!("e{e}"), &format!("d{e}"))?;
            Ok(DeltaSet::from_artifact(&out.artifact))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let batch = a.batch.unwrap_or(a.experts);
    let r = bench_decode(&base, &providers, a.seq, batch, a.reps)?;
    println!("stage,median_ms,p90_ms");
    println!("base_gemm,{:.4},{:.4}", r.base_gemm_ms.median_ms, r.base_gemm_ms.p90_ms);
    println!("delta_stage,{:.4},{:.4}", r.delta_stage_ms.median_ms, r.delta_stage_ms.p90_ms);
    println!("total,{:.4},{:.4}", r.total_ms.median_ms, r.total_ms.p90_ms);
    if r.no_variance {
        eprintln!("note: a single timed repetition, p90 equals median");
    }
    Ok(())
}

fn cmd_report(what: ReportCmd) -> anyhow::Result<()> {
    match what {
        ReportCmd::Ratio {
            psi,
            psit,
            phi,
            base,
            artifact,
            router,
            m_range,
        } => {
            let psi = match (psi, base) {
                (Some(v), _) => v,
                (None, Some(p)) => (ToyLm::load(&p)?.parameter_count() * 2) as f64,
                (None, None) => bail!("give --psi or --base"),
            };
            let psit = match (psit, artifact) {
                (Some(v), _) => v,
                (None, Some(p)) => compressed_size_bytes(&load_artifact(&p)?).total as f64,
                (None, None) => bail!("give --psit or --artifact"),
            };
            let phi = match (phi, router) {
                (Some(v), _) => v,
                (None, Some(p)) => RouterModel::load(&p)?.size_bytes() as f64,
                (None, None) => bail!("give --phi or --router"),
            };
            let range = parse_m_range(&m_range)?;
            let sz = SizeModel::new(psi, psit, phi, *range.start())?;
            print!("{}", ratio_csv(&ratio_curve(&sz, range)?));
        }
        ReportCmd::Energy { base, finetuned } => {
            let base = ToyLm::load(&base)?;
            let ft = ToyLm::load(&finetuned)?;
            if base.config() != ft.config() {
                bail!("models differ in shape");
            }
            let deltas = (0..base.depth())
                .map(|l| extract_delta(ft.layer(l), base.layer(l)))
                .collect::<deltaswitch::Result<Vec<_>>>()?;
            print!("{}", energy_csv(&cumulative_energy_report(&deltas)?));
        }
    }
    Ok(())
}

fn cmd_toy_base(a: ToyBaseArgs) -> anyhow::Result<()> {
    let cfg = ToyConfig {
        vocab: a.vocab,
        width: a.width,
        depth: a.depth,
        dead_channels: a.dead_channels,
    };
    let m = ToyLm::base(cfg, seed(a.seed)?)?;
    m.save(&a.out)?;
    println!("digest={}", m.digest());
    Ok(())
}

fn cmd_toy_expert(a: ToyExpertArgs) -> anyhow::Result<()> {
    let base = ToyLm::load(&a.base)?;
    let spec = ExpertSpec {
        dense_sigma: a.sigma,
        planted_rows: a.planted_rows,
        planted_amplitude: a.amplitude,
        misleading_rows: a.misleading_rows,
        ..ExpertSpec::new(a.domain, seed(a.seed)?)
    };
    let e = synthesize_expert(&base, &spec)?;
    e.model.save(&a.out)?;
    println!("digest={}", e.model.digest());
    Ok(())
}

fn cmd_calib(a: CalibArgs) -> anyhow::Result<()> {
    if a.vocab == 0 {
        bail!("vocab must be positive");
    }
    save_sequences(&a.out, &calibration_set(a.vocab, a.count, a.len, seed(a.seed)?))?;
    Ok(())
}

fn cmd_gen_routing(a: GenRoutingArgs) -> anyhow::Result<()> {
    let domains = a.domains.unwrap_or_else(|| STANDARD_DOMAINS.iter().map(|s| s.to_string()).collect());
    let records = SyntheticRouting::new(&domains, a.pool_seed).sample(a.per_domain, seed(a.seed)?);
    save_dataset(&a.out, &records)?;
    println!("records={}", records.len());
    Ok(())
}

fn cmd_register(registry: &Path, base: &Path, id: &str, artifact: &Path) -> anyhow::Result<()> {
    let base = ToyLm::load(base)?;
    let reg = open_registry(registry, &base, usize::MAX)?;
    let meta = reg.register(id, artifact)?;
    println!("id={} domain={} size_bytes={}", meta.id, meta.domain, meta.size_bytes);
    Ok(())
}

fn cmd_query(a: QueryArgs) -> anyhow::Result<()> {
    let mut client = Client::connect(a.addr.as_str())?;
    let resp = client.send(&ServeRequest {
        id: a.id,
        query: a.query,
        expert: a.expert,
        max_new: a.max_new,
    })?;
    println!("{}", serde_json::to_string(&resp)?);
    if let Some(e) = resp.error {
        bail!("server: {e}");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Inspect { artifact } => cmd_inspect(&artifact),
        Cmd::RouteTrain(a) => cmd_route_train(a),
        Cmd::RouteEval { router, data } => cmd_route_eval(&router, &data),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Report { what } => cmd_report(what),
        Cmd::ToyBase(a) => cmd_toy_base(a),
        Cmd::ToyExpert(a) => cmd_toy_expert(a),
        Cmd::Calib(a) => cmd_calib(a),
        Cmd::GenRoutingData(a) => cmd_gen_routing(a),
        Cmd::Register {
            registry,
            base,
            id,
            artifact,
        } => cmd_register(&registry, &base, &id, &artifact),
        Cmd::Query(a) => cmd_query(a),
    }
}

/// `error: <kind>: <message>` on one line.
fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| {
            c.downcast_ref::<deltaswitch::Error>()
                .map(|d| d.kind())
                .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .unwrap_or("failed");
    let msg = format!("{e:#}").replace(['\n', '\r'], " ");
    format!("error: {kind}: {msg}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

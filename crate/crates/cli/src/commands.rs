use crate::error::{CliError, CliResult};
use crate::input::{
    derived_seed, load_input, resolve_table, stream, ModelArgs, SplitArgs, TableSource, WeightArgs,
};
use crate::output::{csv_text, hex, text_table, Format, Outputs};
use clap::Args;
use serde::Serialize;
use splitwire::channel::{payload_bits, sigma_from_snr, ChannelProfile, PayloadDtype};
use splitwire::cost::{beta_sweep, log_grid, total_task_time, write_cost_csv, write_sweep_csv, CostReport, CostRow, DeviceProfile};
use splitwire::engine::run_graph;
use splitwire::engine::ops::argmax;
use splitwire::graph::{apply_split, count_flops, count_params_with, BnCounting, SplitPoint};
use splitwire::planner::{self, load_accuracy_table, min_nc, AccuracyTable, FlopCatalog};
use splitwire::wire::{digest_values, simulate_local, EdgeClient, Server, ServerConfig, SessionConfig};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

/// Settings every subcommand receives.
#[derive(Debug, Clone, Serialize)]
pub struct Global {
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    #[serde(skip)]
    pub format: Format,
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    seed: u64,
    #[serde(flatten)]
    args: &'a T,
}

fn outputs<T: Serialize>(g: &Global, command: &str, args: &T) -> CliResult<Outputs> {
    Outputs::new(g.output_dir.as_deref(), command, Echo { seed: g.seed, args })
}

fn emit(format: Format, header: &[&str], rows: &[Vec<String>], json: &impl Serialize) -> CliResult<()> {
    let text = match format {
        Format::Text => text_table(header, rows),
        Format::Csv => csv_text(header, rows),
        Format::Json => serde_json::to_string_pretty(json)? + "\n",
    };
    print!("{text}");
    Ok(())
}

fn parse_splits(s: &str) -> CliResult<Vec<SplitPoint>> {
    let splits: Vec<SplitPoint> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse())
        .collect::<Result<_, _>>()?;
    if splits.is_empty() {
        return Err(CliError::usage("no split points given"));
    }
    Ok(splits)
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::usage(format!("invalid {what} value `{t}`")))
        })
        .collect()
}

fn load_table(arg: &str, model_id: &str) -> CliResult<AccuracyTable> {
    let table = match resolve_table(arg) {
        TableSource::Bundled => AccuracyTable::bundled(),
        TableSource::File(p) => {
            let f = std::fs::File::open(&p)
                .map_err(|e| CliError::Io(format!("cannot open {}: {e}", p.display())))?;
            load_accuracy_table(f, &p.display().to_string())?
        }
    };
    let models = table.models().iter().map(|m| m.to_string()).collect::<Vec<_>>();
    let filtered = table.for_model(model_id);
    if filtered.records.is_empty() {
        return Err(CliError::usage(format!(
            "table {} has no rows for model `{model_id}` (available: {})",
            table.source,
            models.join(", ")
        )));
    }
    Ok(filtered)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LinkArgs {
    /// Transmitter device seconds per FLOP.
    #[arg(long)]
    pub alpha_t: Option<f64>,
    /// Receiver device seconds per FLOP.
    #[arg(long)]
    pub alpha_r: Option<f64>,
    /// Link rate in bits per second.
    #[arg(long)]
    pub rate: Option<f64>,
}

impl LinkArgs {
    /// All three or none.
    fn profiles(
        &self,
        snr_db: Option<f64>,
        dtype: PayloadDtype,
    ) -> CliResult<Option<(DeviceProfile, DeviceProfile, ChannelProfile)>> {
        match (self.alpha_t, self.alpha_r, self.rate) {
            (None, None, None) => Ok(None),
            (Some(t), Some(r), Some(rate)) => {
                let snr_db = snr_db.ok_or_else(|| CliError::usage("--snr is required for a cost prediction"))?;
                Ok(Some((
                    DeviceProfile::new(t)?,
                    DeviceProfile::new(r)?,
                    ChannelProfile::new(snr_db, rate, dtype)?,
                )))
            }
            _ => Err(CliError::usage("--alpha-t, --alpha-r and --rate must be given together")),
        }
    }
}

// ---------------------------------------------------------------- profile

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Profile one split point.
    #[arg(long, conflicts_with = "all_splits")]
    pub split: Option<SplitPoint>,
    /// Profile SP-1 through SP-5.
    #[arg(long)]
    pub all_splits: bool,
    #[arg(long = "n-c", default_value_t = 1024, value_parser = crate::input::parse_nc)]
    pub n_c: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stages: u8,
    /// Batch-norm parameters per channel: 4 (with running statistics) or 2.
    #[arg(long, default_value = "running", value_parser = parse_bn)]
    pub bn_counting: BnCounting,
}

fn parse_bn(s: &str) -> Result<BnCounting, String> {
    match s {
        "running" | "4" => Ok(BnCounting::WithRunningStats),
        "affine" | "2" => Ok(BnCounting::AffineOnly),
        _ => Err(format!("`{s}`: expected `running` or `affine`")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub split: String,
    pub n_c: Option<usize>,
    pub flops_t: u64,
    pub flops_r: u64,
    pub flops_total: u64,
    pub flops_tx_percent: f64,
    pub flops_rx_percent: f64,
    pub params_t: u64,
    pub params_r: u64,
    pub params_total: u64,
    pub params_tx_percent: f64,
    pub params_rx_percent: f64,
}

const PROFILE_HEADER: [&str; 12] = [
    "split", "n_c", "flops_t", "flops_r", "flops_total", "flops_tx_pct", "flops_rx_pct", "params_t",
    "params_r", "params_total", "params_tx_pct", "params_rx_pct",
];

impl ProfileRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.split.clone(),
            self.n_c.map(|n| n.to_string()).unwrap_or_default(),
            self.flops_t.to_string(),
            self.flops_r.to_string(),
            self.flops_total.to_string(),
            format!("{:.2}", self.flops_tx_percent),
            format!("{:.2}", self.flops_rx_percent),
            self.params_t.to_string(),
            self.params_r.to_string(),
            self.params_total.to_string(),
            format!("{:.2}", self.params_tx_percent),
            format!("{:.2}", self.params_rx_percent),
        ]
    }
}

pub fn profile(g: &Global, args: &ProfileArgs) -> CliResult<()> {
    let graph = args.model.graph()?;
    let splits: Vec<SplitPoint> = match (args.split, args.all_splits) {
        (Some(s), _) => vec![s],
        (None, true) => SplitPoint::INNER.to_vec(),
        (None, false) => Vec::new(),
    };
    let mut rows = Vec::new();
    let description;
    if splits.is_empty() {
        let f = count_flops(&graph);
        let p = count_params_with(&graph, args.bn_counting);
        rows.push(ProfileRow {
            split: "none".into(),
            n_c: None,
            flops_t: f.f_m,
            flops_r: 0,
            flops_total: f.f_m,
            flops_tx_percent: 100.0,
            flops_rx_percent: 0.0,
            params_t: p.params_total,
            params_r: 0,
            params_total: p.params_total,
            params_tx_percent: 100.0,
            params_rx_percent: 0.0,
        });
        description = graph.describe();
    } else {
        let mut last = None;
        for &sp in &splits {
            let m = apply_split(&graph, sp, args.n_c, args.stages)?;
            let f = count_flops(&m);
            let p = count_params_with(&m, args.bn_counting);
            rows.push(ProfileRow {
                split: sp.to_string(),
                n_c: Some(m.n_c),
                flops_t: f.f_m_t,
                flops_r: f.f_m_r,
                flops_total: f.split_total(),
                flops_tx_percent: f.tx_percent(),
                flops_rx_percent: f.rx_percent(),
                params_t: p.params_t,
                params_r: p.params_r,
                params_total: p.params_total,
                params_tx_percent: p.tx_percent(),
                params_rx_percent: p.rx_percent(),
            });
            last = Some(m);
        }
        description = last.expect("at least one split").monolithic().describe();
    }
    let cells: Vec<_> = rows.iter().map(ProfileRow::cells).collect();
    emit(g.format, &PROFILE_HEADER, &cells, &rows)?;
    let mut out = outputs(g, "profile", args)?;
    out.write("profile.csv", csv_text(&PROFILE_HEADER, &cells).as_bytes())?;
    out.write_json("graph.json", &description)?;
    out.finish()
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Beta,
    Nc,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Comma-separated split points.
    #[arg(long, default_value = "SP-1,SP-2,SP-3,SP-4,SP-5")]
    pub splits: String,
    #[arg(long = "n-c", default_value_t = 1024, value_parser = crate::input::parse_nc)]
    pub n_c: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stages: u8,
    /// Explicit comma-separated beta values; overrides the log grid.
    #[arg(long)]
    pub betas: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    /// Accuracy table for the n_c sweep: a CSV path or `bundled`.
    #[arg(long)]
    pub table: Option<String>,
    /// Model id of the table rows to use.
    #[arg(long, default_value = "resnet34")]
    pub table_model: String,
    /// Comma-separated SNR values in dB.
    #[arg(long, default_value = "0,3,5")]
    pub snr: String,
    #[arg(long, default_value_t = 0.66)]
    pub floor: f64,
}

pub fn sweep(g: &Global, args: &SweepArgs) -> CliResult<()> {
    let splits = parse_splits(&args.splits)?;
    match args.kind {
        SweepKind::Beta => sweep_beta(g, args, &splits),
        SweepKind::Nc => sweep_nc(g, args, &splits),
    }
}

fn sweep_beta(g: &Global, args: &SweepArgs, splits: &[SplitPoint]) -> CliResult<()> {
    let grid = match &args.betas {
        Some(list) => parse_list(list, "beta")?,
        None => {
            if !(args.beta_min > 0.0 && args.beta_max >= args.beta_min) {
                return Err(CliError::usage("beta range must satisfy 0 < --beta-min <= --beta-max"));
            }
            log_grid(args.beta_min, args.beta_max, args.points)
        }
    };
    if grid.is_empty() {
        return Err(CliError::usage("beta grid is empty"));
    }
    let graph = args.model.graph()?;
    let mut rows = Vec::new();
    for &sp in splits {
        let m = apply_split(&graph, sp, args.n_c, args.stages)?;
        rows.extend(beta_sweep(sp, &count_flops(&m), &grid)?);
    }
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows).map_err(|e| CliError::Io(e.to_string()))?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{:.6e}", r.beta), r.split.to_string(), format!("{:.6}", r.normalized_tcomp)])
        .collect();
    match g.format {
        Format::Csv => print!("{}", String::from_utf8_lossy(&csv)),
        f => emit(f, &["beta", "split", "normalized_tcomp"], &cells, &rows)?,
    }
    let mut out = outputs(g, "sweep", args)?;
    out.write("sweep_beta.csv", &csv)?;
    out.finish()
}

#[derive(Debug, Clone, Serialize)]
struct NcRow {
    split: SplitPoint,
    snr_db: f64,
    floor: f64,
    min_n_c: Option<usize>,
}

fn sweep_nc(g: &Global, args: &SweepArgs, splits: &[SplitPoint]) -> CliResult<()> {
    let Some(source) = &args.table else {
        return Err(CliError::usage(
            "the n_c sweep needs an accuracy source: pass --table <csv> (or --table bundled \
             for the shipped table), or produce a table with the trainer's eval-grid command \
             and pass its CSV",
        ));
    };
    if !(0.0..=1.0).contains(&args.floor) {
        return Err(CliError::usage(format!("--floor must be in [0, 1], got {}", args.floor)));
    }
    let snrs = parse_list(&args.snr, "SNR")?;
    if snrs.is_empty() {
        return Err(CliError::usage("SNR grid is empty"));
    }
    let table = load_table(source, &args.table_model)?;
    let mut rows = Vec::new();
    for &snr in &snrs {
        for &sp in splits {
            rows.push(NcRow {
                split: sp,
                snr_db: snr,
                floor: args.floor,
                min_n_c: min_nc(&table, sp, snr, args.floor),
            });
        }
    }
    let header = ["split", "snr_db", "floor", "min_n_c"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.split.to_string(),
                r.snr_db.to_string(),
                r.floor.to_string(),
                r.min_n_c.map(|n| n.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    emit(g.format, &header, &cells, &rows)?;
    let mut out = outputs(g, "sweep", args)?;
    out.write("sweep_nc.csv", csv_text(&header, &cells).as_bytes())?;
    out.finish()
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    /// PNG or raw CHW f32 file; a seeded random input otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Channel SNR in dB; omit for a noiseless link.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long, default_value = "f32")]
    pub dtype: PayloadDtype,
    /// Noise seed; derived from --seed when omitted.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Clone, Serialize)]
struct SimulateReport {
    split: SplitPoint,
    n_c: usize,
    snr_db: Option<f64>,
    sigma: f64,
    noise_seed: u64,
    input_seed: Option<u64>,
    weights_fingerprint: String,
    label: usize,
    /// Label of the joined encoder and decoder without a channel.
    reference_label: usize,
    z_digest: String,
    z_hat_digest: String,
    payload_bytes: usize,
    payload_bits: u64,
    logits: Vec<f32>,
    cost: Option<CostReport>,
}

pub fn simulate(g: &Global, args: &SimulateArgs) -> CliResult<()> {
    let graph = args.model.graph()?;
    let model = args.split.apply(&graph)?;
    let weights = args.weights.load(&model, g.seed)?;
    let input_seed = derived_seed(g.seed, stream::INPUT, 0);
    let input = load_input(args.input.as_deref(), model.encoder.input_shape, input_seed)?;
    let sigma = match args.snr {
        Some(s) if !s.is_finite() => return Err(CliError::usage("--snr must be finite")),
        Some(s) => sigma_from_snr(s),
        None => 0.0,
    };
    let noise_seed = args
        .noise_seed
        .unwrap_or_else(|| derived_seed(g.seed, stream::NOISE, 0));
    let run = simulate_local(&model, &weights, &input, args.dtype, sigma, noise_seed)?;
    let reference = run_graph(&model.monolithic(), &weights, &input)?;
    let reference_label = if model.split == SplitPoint::Sp6 {
        reference.data()[0] as usize
    } else {
        argmax(reference.data()).unwrap_or(0)
    };
    let bits = payload_bits(model.n_c, args.dtype, model.split);
    let cost = args
        .link
        .profiles(args.snr, args.dtype)?
        .map(|(dt, dr, ch)| total_task_time(&count_flops(&model), dt, dr, bits, &ch));
    let report = SimulateReport {
        split: model.split,
        n_c: model.n_c,
        snr_db: args.snr,
        sigma,
        noise_seed: run.reception.seed,
        input_seed: args.input.is_none().then_some(input_seed),
        weights_fingerprint: weights.fingerprint_hex(),
        label: run.label(),
        reference_label,
        z_digest: hex(&digest_values(&run.transmission.values)),
        z_hat_digest: hex(&digest_values(&run.reception.z_hat)),
        payload_bytes: run.transmission.payload.len(),
        payload_bits: bits,
        logits: run.reception.output.clone(),
        cost,
    };
    match g.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        _ => {
            println!("label            {}", report.label);
            println!("reference label  {}", report.reference_label);
            println!("split            {} (n_c {})", report.split, report.n_c);
            println!("sigma            {:.6} (noise seed {})", report.sigma, report.noise_seed);
            println!("payload          {} bytes, {} bits", report.payload_bytes, report.payload_bits);
            println!("z_hat digest     {}", report.z_hat_digest);
            if let Some(c) = &report.cost {
                println!(
                    "t_task           {:.6} s (t_m_t {:.6}, t_m_r {:.6}, t_comm {:.6})",
                    c.t_task, c.breakdown.t_m_t, c.breakdown.t_m_r, c.t_comm
                );
            }
        }
    }
    let z_hat: Vec<u8> = run.reception.z_hat.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut out = outputs(g, "simulate", args)?;
    out.write_json("simulate.json", &report)?;
    out.write("z_hat.f32", &z_hat)?;
    out.finish()
}

// ---------------------------------------------------------------- plan

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Accuracy table: a CSV path or `bundled`.
    #[arg(long, default_value = "bundled")]
    pub table: String,
    #[arg(long, default_value = "resnet34")]
    pub table_model: String,
    /// Decompression stages used when counting FLOPs for the table rows.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stages: u8,
    #[arg(long)]
    pub snr: f64,
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub alpha_t: f64,
    #[arg(long)]
    pub alpha_r: f64,
    #[arg(long, default_value = "f32")]
    pub dtype: PayloadDtype,
    #[arg(long)]
    pub floor: f64,
}

pub fn plan(g: &Global, args: &PlanArgs) -> CliResult<()> {
    let table = load_table(&args.table, &args.table_model)?;
    let graph = args.model.graph()?;
    let options = splitwire::graph::SplitOptions {
        decompress_stages: args.stages,
        ..Default::default()
    };
    let catalog = FlopCatalog::covering(&table, &graph, options)?;
    let dev_t = DeviceProfile::new(args.alpha_t)?;
    let dev_r = DeviceProfile::new(args.alpha_r)?;
    let channel = ChannelProfile::new(args.snr, args.rate, args.dtype)?;
    let result = planner::plan(&table, &catalog, dev_t, dev_r, &channel, args.floor)?;
    let candidates = planner::candidates(&table, &catalog, dev_t, dev_r, &channel)?;
    let rows: Vec<CostRow> = candidates
        .iter()
        .map(|c| CostRow {
            split: c.split,
            n_c: c.n_c,
            snr_db: c.snr_db,
            cost: c.cost,
        })
        .collect();
    let mut csv = Vec::new();
    write_cost_csv(&mut csv, &rows).map_err(|e| CliError::Io(e.to_string()))?;
    match g.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&result)?),
        Format::Csv => print!("{}", String::from_utf8_lossy(&csv)),
        Format::Text => println!("{result}"),
    }
    let mut out = outputs(g, "plan", args)?;
    out.write_json("plan.json", &result)?;
    out.write("candidates.csv", &csv)?;
    out.finish()?;
    if result.feasible {
        Ok(())
    } else {
        Err(CliError::Infeasible(format!(
            "no configuration reaches top-1 {} at {} dB",
            args.floor, args.snr
        )))
    }
}

// ---------------------------------------------------------------- serve / send

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Channel SNR applied to received features; omit for a noiseless link.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Idle connection timeout in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    /// Stop after answering this many inference requests.
    #[arg(long)]
    pub exit_after: Option<u64>,
}

pub fn serve(g: &Global, args: &ServeArgs) -> CliResult<()> {
    let graph = args.model.graph()?;
    let model = args.split.apply(&graph)?;
    let weights = args.weights.load(&model, g.seed)?;
    let config = ServerConfig {
        snr_db: args.snr,
        timeout: Duration::from_millis(args.timeout_ms),
        ..Default::default()
    };
    let fingerprint = weights.fingerprint_hex();
    let server = Server::bind(args.addr.as_str(), Arc::new(model), Arc::new(weights), config)?;
    let addr = server.local_addr()?;
    println!("listening on {addr}");
    eprintln!("weights fingerprint {fingerprint}");
    std::io::stdout().flush()?;
    match args.exit_after {
        None => server.run()?,
        Some(n) => {
            let handle = server.spawn()?;
            while handle.served() < n {
                std::thread::sleep(Duration::from_millis(5));
            }
            handle.shutdown();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SendArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[arg(long)]
    pub addr: String,
    #[arg(long, default_value = "f32")]
    pub dtype: PayloadDtype,
    /// PNG or raw CHW f32 file sent on every request; seeded random inputs
    /// otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Base noise seed; request i uses base + i. 0 lets the receiver choose.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long, default_value_t = 5_000)]
    pub timeout_ms: u64,
    /// Link SNR used for the predicted cost.
    #[arg(long)]
    pub snr: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Clone, Serialize)]
struct TranscriptRow {
    index: usize,
    label: usize,
    seed: u64,
    z_hat_digest: String,
}

pub fn send(g: &Global, args: &SendArgs) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be positive"));
    }
    if args.timeout_ms == 0 {
        return Err(CliError::usage("--timeout-ms must be positive"));
    }
    let graph = args.model.graph()?;
    let model = args.split.apply(&graph)?;
    let weights = args.weights.load(&model, g.seed)?;
    let shape = model.encoder.input_shape;
    let session = SessionConfig::new(args.dtype, Duration::from_millis(args.timeout_ms))?;
    let prediction = args
        .link
        .profiles(args.snr, args.dtype)?;
    let mut client = EdgeClient::connect(args.addr.as_str(), Arc::new(model), Arc::new(weights), session)?;
    if let Some((dt, dr, ch)) = prediction {
        client = client.with_prediction(dt, dr, ch);
    }
    let fixed = match &args.input {
        Some(p) => Some(load_input(Some(p), shape, 0)?),
        None => None,
    };
    let mut transcript = Vec::new();
    let mut timing = Vec::new();
    for i in 0..args.count {
        let input = match &fixed {
            Some(t) => t.clone(),
            None => load_input(None, shape, derived_seed(g.seed, stream::INPUT, i as u64))?,
        };
        let seed = match args.noise_seed {
            Some(0) => 0,
            Some(base) => base.wrapping_add(i as u64),
            None => derived_seed(g.seed, stream::NOISE, i as u64),
        };
        let reply = client.infer(&input, seed)?;
        transcript.push(TranscriptRow {
            index: i,
            label: reply.label,
            seed: reply.seed,
            z_hat_digest: hex(&reply.z_hat_digest),
        });
        let t = &reply.timing;
        timing.push(vec![
            i.to_string(),
            format!("{:.9}", t.t_m_t),
            format!("{:.9}", t.t_m_r),
            format!("{:.9}", t.transfer),
            format!("{:.9}", t.round_trip),
            t.payload_bytes.to_string(),
            t.payload_bits.to_string(),
            t.predicted.map(|p| format!("{:.9}", p.t_task)).unwrap_or_default(),
        ]);
    }
    let header = ["index", "label", "seed", "z_hat_digest"];
    let cells: Vec<Vec<String>> = transcript
        .iter()
        .map(|r| vec![r.index.to_string(), r.label.to_string(), r.seed.to_string(), r.z_hat_digest.clone()])
        .collect();
    emit(g.format, &header, &cells, &transcript)?;
    let timing_header = [
        "index", "t_m_t", "t_m_r", "transfer", "round_trip", "payload_bytes", "payload_bits", "predicted_t_task",
    ];
    let mut out = outputs(g, "send", args)?;
    out.write("transcript.csv", csv_text(&header, &cells).as_bytes())?;
    out.write_nondeterministic("timing.csv", csv_text(&timing_header, &timing).as_bytes())?;
    out.finish()
}

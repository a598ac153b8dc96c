use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use rbm_core::harness::{self, Prepared, RunConfig, ScoreBoard, TrainingView};
use rbm_core::poswalk;
use rbm_core::split::{self, SplitMode, SplitSpec};
use rbm_core::students::{StudentCheckpoint, StudentKind};
use rbm_core::teacher::{self, TeacherCheckpoint, TeacherKind, CHECKPOINT_VERSION};
use rbm_core::{load_bundle, NdArray, SparseGraph};

const TEACHER_FILE: &str = "teacher.json";
const SOFT_FILE: &str = "soft_labels.csv";
const RELIABILITY_FILE: &str = "reliability.csv";
const POSITIONAL_FILE: &str = "positional.csv";
const RESULTS_FILE: &str = "results.jsonl";

#[derive(Parser)]
#[command(name = "rbm", version, about = "Distill graph neural network teachers into routing-by-memory students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GCN or GraphSAGE teacher; writes the checkpoint, soft labels and reliability.
    TrainTeacher(TrainTeacherArgs),
    /// Compute DeepWalk positional encodings for every node.
    Poswalk(PoswalkArgs),
    /// Train a student from a teacher directory and append its result line.
    Distill(DistillArgs),
    /// Evaluate a student checkpoint on the split of its teacher.
    Evaluate(EvaluateArgs),
    /// Run the loss ablations of the RbM student over several seeds.
    Ablate(AblateArgs),
    /// Render a results file as a Markdown table.
    Summarize(SummarizeArgs),
    /// Write router-space representations of a routed student as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset bundle directory (edges.tsv, features.csv, labels.csv).
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct WalkFlags {
    #[arg(long)]
    pos_dim: Option<usize>,
    #[arg(long)]
    pos_walks: Option<usize>,
    #[arg(long)]
    pos_length: Option<usize>,
    #[arg(long)]
    pos_window: Option<usize>,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "gcn")]
    kind: TeacherKind,
    #[arg(long, default_value = "trans")]
    mode: SplitMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoswalkArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Teacher directory whose split decides which nodes are visible; the
    /// table is written there unless --out is given.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    walk: WalkFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Teacher directory written by train-teacher.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value = "rbm")]
    student: StudentKind,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    active: Option<usize>,
    #[arg(long)]
    members: Option<usize>,
    /// Student seed; defaults to the teacher's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    walk: WalkFlags,
    /// Output directory for the student checkpoint and results.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Record wall time in the result line (breaks byte-identical reruns).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint.
    #[arg(long)]
    student: PathBuf,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "trans")]
    mode: SplitMode,
    #[arg(long, default_value = "gcn")]
    kind: TeacherKind,
    /// First seed; seeds run from here.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    runs: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    /// results.jsonl to read.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    /// Layer whose router input is written.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

/// The teacher checkpoint a command depends on is absent (exit code 2).
#[derive(Debug)]
struct MissingTeacher(PathBuf);

impl fmt::Display for MissingTeacher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "teacher checkpoint not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingTeacher {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Poswalk(a) => poswalk_cmd(a),
        Command::Distill(a) => distill(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Summarize(a) => summarize(a),
        Command::DumpEmbeddings(a) => dump_embeddings(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{:#}", e).replace('\n', " ");
            eprintln!("error: {}", msg);
            if e.downcast_ref::<MissingTeacher>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn apply_walk_flags(cfg: &mut RunConfig, w: &WalkFlags) {
    if let Some(v) = w.pos_dim {
        cfg.walk.dim = v;
    }
    if let Some(v) = w.pos_walks {
        cfg.walk.walks_per_node = v;
    }
    if let Some(v) = w.pos_length {
        cfg.walk.walk_length = v;
    }
    if let Some(v) = w.pos_window {
        cfg.walk.window = v;
    }
}

fn load_data(dir: &Path) -> anyhow::Result<SparseGraph> {
    load_bundle(dir).with_context(|| format!("dataset {}", dir.display()))
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".to_string())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Rows keyed by original node id: `node,<cols...>`.
fn write_node_table(path: &Path, header: &[String], ids: &[usize], table: &NdArray) -> anyhow::Result<()> {
    let mut s = String::from("node");
    for h in header {
        s.push(',');
        s.push_str(h);
    }
    s.push('\n');
    for (i, &id) in ids.iter().enumerate() {
        s.push_str(&id.to_string());
        for v in table.row(i) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn class_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|c| format!("{}{}", prefix, c)).collect()
}

fn split_for_cli(g: &SparseGraph, data: &Path, mode: SplitMode, cfg: &RunConfig, seed: u64) -> anyhow::Result<SplitSpec> {
    if mode == SplitMode::Transductive {
        if let Some(s) = split::load_split_file(data, g.num_nodes())? {
            info!("using splits.json from {}", data.display());
            return Ok(s);
        }
    }
    Ok(harness::split_for(g, mode, cfg, seed)?)
}

fn train_teacher(a: TrainTeacherArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.data.config.as_deref())?.seeded(a.seed);
    cfg.teacher.kind = a.kind;
    let g = load_data(&a.data.data)?;
    let split = split_for_cli(&g, &a.data.data, a.mode, &cfg, a.seed)?;
    let view = harness::view_for(&g, &split)?;
    let (model, trace) = teacher::train_teacher(&view.graph, &view.split, &cfg.teacher)?;
    let soft = teacher::soft_labels(&model, &view.graph, view.graph.features())?;
    let rel = rbm_core::distill::node_reliability(
        &model,
        &view.graph,
        view.graph.features(),
        cfg.distill.delta,
        cfg.distill.mc_draws,
        cfg.distill.seed,
    )?;
    let logits = teacher::teacher_forward(&model, &g, g.features())?;
    let test = harness::accuracy(&logits, g.labels(), split.eval_nodes())?;
    create_dir(&a.out)?;
    let ck = TeacherCheckpoint {
        version: CHECKPOINT_VERSION.to_string(),
        model,
        config: cfg.teacher.clone(),
        split,
        labeled_per_class: cfg.labeled_per_class,
        val_size: cfg.val_size,
    };
    ck.save(a.out.join(TEACHER_FILE))?;
    write_node_table(&a.out.join(SOFT_FILE), &class_header("p", g.num_classes()), &view.global, &soft)?;
    let rho = NdArray::matrix(rel.rho.len(), 1, rel.rho.clone())?;
    write_node_table(&a.out.join(RELIABILITY_FILE), &["rho".to_string()], &view.global, &rho)?;
    println!(
        "teacher {} {} seed {}: best val {:.4} at epoch {}, test {:.4} -> {}",
        a.kind.name(),
        a.mode.short(),
        a.seed,
        trace.best_val,
        trace.best_epoch,
        test,
        a.out.display()
    );
    Ok(())
}

fn load_teacher(dir: &Path) -> anyhow::Result<TeacherCheckpoint> {
    let path = dir.join(TEACHER_FILE);
    if !path.exists() {
        return Err(MissingTeacher(path).into());
    }
    Ok(TeacherCheckpoint::load(&path)?)
}

/// Positional table for every node: read from the teacher directory when
/// present, otherwise computed from the training view.
fn positions(g: &SparseGraph, view: &TrainingView, dir: &Path, cfg: &RunConfig) -> anyhow::Result<NdArray> {
    let path = dir.join(POSITIONAL_FILE);
    if path.exists() {
        let pos = poswalk::read_table_csv(&path)?;
        if pos.rows() != g.num_nodes() {
            bail!("{} has {} rows, graph has {} nodes", path.display(), pos.rows(), g.num_nodes());
        }
        return Ok(pos);
    }
    info!("no {} in {}; running DeepWalk", POSITIONAL_FILE, dir.display());
    let walk = poswalk::deepwalk(&view.graph, &cfg.walk)?;
    Ok(harness::full_positions(g, view, &walk, &cfg.walk)?)
}

fn poswalk_cmd(a: PoswalkArgs) -> anyhow::Result<()> {
    let ck = load_teacher(&a.teacher)?;
    let mut cfg = load_config(a.data.config.as_deref())?.seeded(ck.config.seed);
    apply_walk_flags(&mut cfg, &a.walk);
    cfg.walk.validate()?;
    let g = load_data(&a.data.data)?;
    let view = harness::view_for(&g, &ck.split)?;
    let walk = poswalk::deepwalk(&view.graph, &cfg.walk)?;
    let pos = harness::full_positions(&g, &view, &walk, &cfg.walk)?;
    let out = a.out.unwrap_or_else(|| a.teacher.join(POSITIONAL_FILE));
    poswalk::write_table_csv(&pos, &out)?;
    println!("positional encodings {}x{} -> {}", pos.rows(), pos.cols(), out.display());
    Ok(())
}

/// Rebuilds the per-seed state of a teacher directory.
fn prepared_from_teacher(data: &Path, teacher_dir: &Path, cfg: &RunConfig) -> anyhow::Result<(Prepared, TeacherCheckpoint)> {
    let ck = load_teacher(teacher_dir)?;
    let g = load_data(data)?;
    let teacher_seed = ck.config.seed;
    let mut cfg = cfg.seeded(teacher_seed);
    cfg.teacher = ck.config.clone();
    cfg.labeled_per_class = ck.labeled_per_class;
    cfg.val_size = ck.val_size;
    let view = harness::view_for(&g, &ck.split)?;
    let pos_full = positions(&g, &view, teacher_dir, &cfg)?;
    let pos_view = pos_full.select_rows(&view.global)?;
    let arts = harness::artifacts_from_teacher(&view, ck.model.clone(), pos_view, &cfg)?;
    let prep = Prepared::assemble(&g, &dataset_name(data), ck.split.clone(), view, arts, &pos_full, cfg, teacher_seed)?;
    Ok((prep, ck))
}

fn distill(a: DistillArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.data.config.as_deref())?;
    apply_walk_flags(&mut cfg, &a.walk);
    if !a.student.has_router() && (a.experts.is_some() || a.active.is_some()) {
        warn!("--experts/--active are ignored for a {} student", a.student.name());
    }
    if a.student.has_router() {
        if let Some(e) = a.experts {
            cfg.arch.experts = e;
        }
        if let Some(k) = a.active {
            cfg.arch.active = k;
        }
    }
    if let Some(m) = a.members {
        cfg.arch.members = m;
    }
    let mut problems = cfg.distill.problems();
    problems.extend(cfg.arch.validate(a.student));
    if let Err(e) = cfg.walk.validate() {
        problems.push(e.to_string());
    }
    if !problems.is_empty() {
        return Err(rbm_core::Error::Config(problems).into());
    }
    let (mut prep, _) = prepared_from_teacher(&a.data.data, &a.teacher, &cfg)?;
    let seed = a.seed.unwrap_or(prep.seed);
    prep.seed = seed;
    let (model, result) = harness::train_and_evaluate(&prep, a.student, &cfg.arch, &cfg.distill, "full", a.timing)?;
    create_dir(&a.out)?;
    let ck_path = a.out.join(format!("student-{}-seed{}.json", a.student.name(), seed));
    StudentCheckpoint::new(model, seed).save(&ck_path)?;
    harness::append_results(a.out.join(RESULTS_FILE), std::slice::from_ref(&result))?;
    println!(
        "{} seed {}: test {:.4} val {:.4} (teacher {:.4}) -> {}",
        a.student.name(),
        seed,
        result.test_acc,
        result.val_acc,
        result.teacher_test_acc,
        ck_path.display()
    );
    Ok(())
}

fn load_student(path: &Path) -> anyhow::Result<StudentCheckpoint> {
    StudentCheckpoint::load(path).with_context(|| format!("student {}", path.display()))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.data.config.as_deref())?;
    let ck = load_student(&a.student)?;
    let (prep, _) = prepared_from_teacher(&a.data.data, &a.teacher, &cfg)?;
    if ck.input_dim != prep.inputs_full.cols() {
        bail!(
            "student expects {} input columns, data and positional table give {}",
            ck.input_dim,
            prep.inputs_full.cols()
        );
    }
    let (logits, _) = rbm_core::students::student_forward(&ck.model, &prep.inputs_full)?;
    let report = serde_json::json!({
        "student": ck.kind.name(),
        "mode": prep.split.mode,
        "seed": ck.seed,
        "test_acc": harness::accuracy(&logits, &prep.labels, prep.split.eval_nodes())?,
        "val_acc": harness::accuracy(&logits, &prep.labels, &prep.split.val)?,
        "teacher_test_acc": prep.teacher_test,
    });
    let line = report.to_string();
    match a.out {
        Some(p) => fs::write(&p, line + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{}", line),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.data.config.as_deref())?;
    cfg.teacher.kind = a.kind;
    let g = load_data(&a.data.data)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.runs).collect();
    let (results, table) = harness::ablation_suite(
        &g,
        &dataset_name(&a.data.data),
        a.mode,
        &cfg,
        &seeds,
        harness::threads_from_env(),
        a.timing,
    )?;
    create_dir(&a.out)?;
    harness::append_results(a.out.join(RESULTS_FILE), &results)?;
    let mut md = String::from("| Variant | Accuracy | Runs |\n|---|---|---|\n");
    for row in &table {
        md.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {} |\n",
            row.variant,
            100.0 * row.mean,
            100.0 * row.std,
            row.runs
        ));
    }
    fs::write(a.out.join("ablation.md"), &md)?;
    print!("{}", md);
    Ok(())
}

fn summarize(a: SummarizeArgs) -> anyhow::Result<()> {
    let results = harness::read_results(&a.results)?;
    if results.is_empty() {
        bail!("{} holds no results", a.results.display());
    }
    let md = ScoreBoard::from_results(&results).to_markdown();
    match a.out {
        Some(p) => fs::write(&p, md).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", md),
    }
    Ok(())
}

fn dump_embeddings(a: DumpArgs) -> anyhow::Result<()> {
    let ck = load_student(&a.student)?;
    if !ck.kind.has_router() {
        bail!("{} student has no router", ck.kind.name());
    }
    let cfg = load_config(a.data.config.as_deref())?;
    let (prep, _) = prepared_from_teacher(&a.data.data, &a.teacher, &cfg)?;
    let net = &ck.model.members[0];
    if a.layer >= net.layers.len() {
        bail!("layer {} out of range for {} layers", a.layer, net.layers.len());
    }
    let (_, routes, inputs) = net.predict(&prep.inputs_full)?;
    let h = &inputs[a.layer];
    let top = routes[a.layer].top_expert();
    let mut s: String = (0..h.cols()).map(|c| format!("h{},", c)).collect();
    s.push_str("top_expert,label\n");
    for v in 0..h.rows() {
        for x in h.row(v) {
            s.push_str(&x.to_string());
            s.push(',');
        }
        s.push_str(&format!("{},{}\n", top[v], prep.labels[v]));
    }
    fs::write(&a.out, s).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} rows, {} columns -> {}", h.rows(), h.cols() + 2, a.out.display());
    Ok(())
}

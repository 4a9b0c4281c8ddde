use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use trajgraph::autodiff::Coverage;
use trajgraph::eval::{
    correlation_report, embedding_stats, frequency_distributions, index_st1_corpus, index_st2,
    response_matrix, write_embedding_stats, write_embeddings, write_metrics, write_pairs,
    write_response_matrix, MetricsReport,
};
use trajgraph::exec::{configure_threads, Exec};
use trajgraph::graph::{deserialize_graphs, graph_stats, serialize_graphs, write_histogram, MobilityGraph};
use trajgraph::ingest::{
    ingest, parse_checkins, parse_foursquare_tsv, read_trajectories, write_checkins,
    write_trajectories, CategoryMap, FormatConfig, UserHistory,
};
use trajgraph::model::ModelParams;
use trajgraph::pipeline::{
    build_graphs, embeddings, evaluate_heads, gradient_check, three_node_graph, Split, Thresholds,
};
use trajgraph::synth::{default_profiles, generate, write_labels};
use trajgraph::train::{
    load_checkpoint, load_state, resume, save_checkpoint, save_state, Example, TrainConfig,
    TrainState,
};

use crate::error::CliError;
use crate::{Command, Common, InputFormat, CONFIG_ENV};

type Result<T> = std::result::Result<T, CliError>;

pub const CHECKPOINT: &str = "checkpoint.txt";
pub const STATE: &str = "state.txt";
pub const SPLIT: &str = "split.csv";
pub const RUN_CONFIG: &str = "config.txt";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            users_per_profile,
            days,
            common,
        } => synth(&out, users_per_profile, days, &common),
        Command::Ingest {
            input,
            out,
            format,
            categories,
            strict,
            common,
        } => ingest_cmd(&input, &out, format, categories.as_deref(), strict, &common),
        Command::BuildGraph {
            input,
            out,
            categories,
            common,
        } => build_graph_cmd(&input, &out, categories.as_deref(), &common),
        Command::Stats { input, out, common } => stats(&input, out.as_deref(), &common),
        Command::Train {
            input,
            out,
            resume,
            common,
        } => train_cmd(&input, &out, resume, &common),
        Command::Eval {
            input,
            model,
            out,
            threshold,
            bins,
            trajectories,
            common,
        } => eval_cmd(&input, &model, &out, threshold, bins, trajectories.as_deref(), &common),
        Command::ExportEmbeddings {
            input,
            model,
            out,
            common,
        } => export(&input, &model, &out, &common),
        Command::Gradcheck {
            threshold,
            step,
            sample,
            common,
        } => gradcheck(threshold, step, sample, &common),
    }
}

// ---------------------------------------------------------------- setup

struct Setup {
    cfg: TrainConfig,
    exec: Exec,
}

/// Loads the config (flag, then environment, then a fallback such as a run
/// directory, then defaults), applies `--seed` and `--jobs`, and prints
/// the result.
fn setup(common: &Common, fallback: Option<&Path>) -> Result<Setup> {
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let path = common
        .config
        .clone()
        .or(env)
        .or_else(|| fallback.filter(|p| p.exists()).map(Path::to_path_buf));
    let mut cfg = match &path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::from(e).at(p))?;
            TrainConfig::parse(&text).map_err(|e| CliError::from(e).at(p))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let exec = match common.jobs {
        1 => Exec::Sequential,
        0 => Exec::Parallel,
        n => {
            configure_threads(n);
            Exec::Parallel
        }
    };
    match &path {
        Some(p) => println!("config: {}", p.display()),
        None => println!("config: built-in defaults"),
    }
    for line in cfg.to_text().lines() {
        println!("  {line}");
    }
    println!("seed: {}", cfg.seed);
    println!("jobs: {}", common.jobs);
    Ok(Setup { cfg, exec })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::from(e).at(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::from(e).at(dir))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::from(e).at(path))
}

/// Writes `path` through `f` and flushes it.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|()| w.flush())
        .map_err(|e| CliError::from(e).at(path))
}

fn category_map(path: Option<&Path>) -> Result<CategoryMap> {
    match path {
        Some(p) => CategoryMap::from_reader(open(p)?).map_err(|e| CliError::from(e).at(p)),
        None => Ok(CategoryMap::default()),
    }
}

fn load_graphs(path: &Path) -> Result<Vec<MobilityGraph>> {
    let graphs = deserialize_graphs(open(path)?).map_err(|e| CliError::from(e).at(path))?;
    if graphs.is_empty() {
        return Err(CliError::data("no graphs").at(path));
    }
    Ok(graphs)
}

fn examples(graphs: &[MobilityGraph], cfg: &TrainConfig) -> Result<Vec<Example>> {
    let d = &cfg.dims;
    if let Some(g) = graphs
        .iter()
        .find(|g| g.num_categories != d.categories || g.num_bins != d.bins)
    {
        return Err(CliError::usage(format!(
            "graph {} has {} categories and {} bins but the config expects {} and {}",
            g.user_id, g.num_categories, g.num_bins, d.categories, d.bins
        )));
    }
    Ok(graphs.iter().map(Example::from_graph).collect())
}

fn load_model(dir: &Path) -> Result<ModelParams> {
    let path = dir.join(CHECKPOINT);
    load_checkpoint(&path).map_err(|e| CliError::from(e).at(&path))
}

// ------------------------------------------------------------- commands

fn synth(out: &Path, users_per_profile: usize, days: usize, common: &Common) -> Result<()> {
    let Setup { cfg, .. } = setup(common, None)?;
    let corpus = generate(&default_profiles(), users_per_profile, days, cfg.seed)?;
    let checkins = out.join("checkins.csv");
    write_file(&checkins, |w| {
        write_checkins(w, &corpus.records).map_err(|e| std::io::Error::other(e.to_string()))
    })?;
    write_file(&out.join("labels.csv"), |w| write_labels(w, &corpus.labels))?;
    println!(
        "wrote {} check-ins for {} users to {}",
        corpus.records.len(),
        corpus.labels.len(),
        checkins.display()
    );
    Ok(())
}

fn ingest_cmd(
    input: &Path,
    out: &Path,
    format: InputFormat,
    categories: Option<&Path>,
    strict: bool,
    common: &Common,
) -> Result<()> {
    setup(common, None)?;
    let map = category_map(categories)?;
    let parsed = match format {
        InputFormat::Checkins => {
            let fmt = FormatConfig {
                strict,
                ..FormatConfig::default()
            };
            parse_checkins(open(input)?, &fmt)
        }
        InputFormat::Foursquare => parse_foursquare_tsv(open(input)?, strict),
    }
    .map_err(|e| CliError::from(e).at(input))?;
    for bad in parsed.invalid.iter().take(5) {
        eprintln!("{}: line {}: {}", input.display(), bad.line, bad.reason);
    }
    let (histories, report) = ingest(&parsed, &map);
    println!(
        "records {} invalid {} kept {} collapsed {} dropped-singleton-day {}",
        report.input_records,
        report.invalid,
        report.sessions.kept,
        report.sessions.collapsed,
        report.sessions.dropped_singleton_day
    );
    println!(
        "users seen {} kept {} trajectories {}",
        report.users_seen, report.users_kept, report.trajectories_kept
    );
    if histories.is_empty() {
        return Err(CliError::data("no user has enough trajectories").at(input));
    }
    write_file(out, |w| {
        write_trajectories(w, &histories).map_err(|e| std::io::Error::other(e.to_string()))
    })
}

fn build_graph_cmd(input: &Path, out: &Path, categories: Option<&Path>, common: &Common) -> Result<()> {
    let Setup { exec, .. } = setup(common, None)?;
    let map = category_map(categories)?;
    let histories = read_trajectories(open(input)?).map_err(|e| CliError::from(e).at(input))?;
    let graphs = build_graphs(&histories, map.num_classes(), exec)?;
    write_file(out, |w| serialize_graphs(w, &graphs))?;
    let stats = graph_stats(&graphs);
    println!("graphs {} nodes {} edges {}", stats.graphs, stats.nodes, stats.edges);
    Ok(())
}

fn stats(input: &Path, out: Option<&Path>, common: &Common) -> Result<()> {
    setup(common, None)?;
    let graphs = load_graphs(input)?;
    let s = graph_stats(&graphs);
    let n = s.graphs as f64;
    let summary = format!(
        "graphs\t{}\nnodes\t{}\nedges\t{}\nmovements\t{}\nmean_nodes\t{:.3}\nmean_edges\t{:.3}\n",
        s.graphs,
        s.nodes,
        s.edges,
        s.movements,
        s.nodes as f64 / n,
        s.edges as f64 / n
    );
    print!("{summary}");
    if let Some(dir) = out {
        write_file(&dir.join("stats.tsv"), |w| w.write_all(summary.as_bytes()))?;
        write_file(&dir.join("nodes_histogram.tsv"), |w| {
            write_histogram(w, "nodes", &s.node_histogram)
        })?;
        write_file(&dir.join("outdegree_histogram.tsv"), |w| {
            write_histogram(w, "max_outdegree", &s.outdegree_histogram)
        })?;
    }
    Ok(())
}

fn train_cmd(input: &Path, out: &Path, resume_run: bool, common: &Common) -> Result<()> {
    let fallback = resume_run.then(|| out.join(RUN_CONFIG));
    let Setup { cfg, exec } = setup(common, fallback.as_deref())?;
    let graphs = load_graphs(input)?;
    let all = examples(&graphs, &cfg)?;
    let ids: Vec<String> = all.iter().map(|e| e.id.clone()).collect();
    let state_path = out.join(STATE);
    let split_path = out.join(SPLIT);
    let (split, state) = if resume_run && state_path.exists() {
        let split = Split::read(open(&split_path)?, &ids).map_err(|e| CliError::from(e).at(&split_path))?;
        let state = load_state(open(&state_path)?).map_err(|e| CliError::from(e).at(&state_path))?;
        println!("resuming after epoch {}", state.epochs_done);
        (split, state)
    } else {
        (Split::new(all.len(), &cfg)?, TrainState::new(&cfg)?)
    };
    let (tr, va) = (Split::pick(&all, &split.train), Split::pick(&all, &split.val));
    println!(
        "users: train {} validation {} test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let started = Instant::now();
    let outcome = resume(state, &tr, &va, &cfg, exec, None)?;
    let secs = started.elapsed().as_secs_f64();

    fs::create_dir_all(out).map_err(|e| CliError::from(e).at(out))?;
    write_file(&out.join(RUN_CONFIG), |w| w.write_all(cfg.to_text().as_bytes()))?;
    write_file(&split_path, |w| split.write(w, &ids))?;
    let ckpt = out.join(CHECKPOINT);
    save_checkpoint(&outcome.params, &ckpt).map_err(|e| CliError::from(e).at(&ckpt))?;
    write_file(&state_path, |w| save_state(w, &outcome.state))?;
    write_file(&out.join("train_log.csv"), |w| outcome.log.write_csv(w))?;
    write_file(&out.join("train_timing.csv"), |w| outcome.log.write_timing_csv(w))?;
    if let Some(last) = outcome.log.epochs.last() {
        println!(
            "epochs {} train loss {:.6} validation loss {:.6} best {:.6}{} in {secs:.1} s",
            last.epoch,
            last.train_loss,
            last.val_loss,
            outcome.state.best_loss,
            if outcome.stopped_early { " (early stop)" } else { "" }
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn summary_line(head: &str, m: &MetricsReport) -> String {
    format!(
        "{head}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
        m.accuracy,
        m.precision,
        m.recall,
        m.f1,
        m.per_user.len(),
        m.excluded
    )
}

fn eval_cmd(
    input: &Path,
    model: &Path,
    out: &Path,
    threshold: Option<f64>,
    bins: usize,
    trajectories: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let Setup { cfg, exec } = setup(common, Some(&model.join(RUN_CONFIG)))?;
    if let Some(t) = threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::usage(format!("--threshold must lie in (0, 1), got {t}")));
        }
    }
    if bins < 1 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let graphs = load_graphs(input)?;
    let all = examples(&graphs, &cfg)?;
    let ids: Vec<String> = all.iter().map(|e| e.id.clone()).collect();
    let split_path = model.join(SPLIT);
    let split = Split::read(open(&split_path)?, &ids).map_err(|e| CliError::from(e).at(&split_path))?;
    let params = load_model(model)?;
    let (tr, te) = (Split::pick(&all, &split.train), Split::pick(&all, &split.test));
    let tau = match threshold {
        Some(t) => Thresholds::uniform(t),
        None => Thresholds::standard(cfg.dims.joint()),
    };
    println!(
        "thresholds: spatial {} temporal {} joint {}",
        tau.spatial, tau.temporal, tau.joint
    );
    let heads = evaluate_heads(&params, &tr, &te, tau, exec)?;

    let test_ids: Vec<String> = te.iter().map(|e| e.id.clone()).collect();
    let test_emb = embeddings(&params, &te, exec)?;
    let freqs: Vec<_> = split
        .test
        .iter()
        .map(|&i| frequency_distributions(&graphs[i]))
        .collect();
    let corr = correlation_report(&test_emb, &freqs, exec)?;

    let mut summary = String::from("head\taccuracy\tprecision\trecall\tf1\tusers\texcluded\n");
    for (name, m) in [
        ("spatial", &heads.spatial),
        ("temporal", &heads.temporal),
        ("joint", &heads.joint),
        ("joint_baseline", &heads.joint_baseline),
    ] {
        summary.push_str(&summary_line(name, m));
        write_file(&out.join(format!("metrics_{name}.csv")), |w| write_metrics(w, name, m))?;
    }
    summary.push_str(&format!(
        "\nbaseline_k\t{}\nr_s\t{:.6}\nr_t\t{:.6}\nr_st\t{:.6}\npairs\t{}\n",
        heads.baseline_k, corr.r_s, corr.r_t, corr.r_st, corr.pair_count
    ));
    write_file(&out.join("pairs.csv"), |w| write_pairs(w, &test_ids, &corr))?;

    let all_emb = embeddings(&params, &all, exec)?;
    let stats = embedding_stats(&all_emb)?;
    write_file(&out.join("embedding_stats.csv"), |w| write_embedding_stats(w, &stats))?;

    if let Some(path) = trajectories {
        let histories = read_trajectories(open(path)?).map_err(|e| CliError::from(e).at(path))?;
        let by_id: HashMap<&str, &UserHistory> =
            histories.iter().map(|h| (h.user_id.as_str(), h)).collect();
        let ordered: Vec<UserHistory> = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|h| (*h).clone())
                    .ok_or_else(|| CliError::data(format!("user {id} missing from the trajectory store")).at(path))
            })
            .collect::<Result<_>>()?;
        let st1 = index_st1_corpus(&ordered);
        let st2 = ordered
            .iter()
            .map(|h| index_st2(h, cfg.dims.categories, cfg.dims.bins))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        write_file(&out.join("indices.csv"), |w| {
            writeln!(w, "user_id,index_st1,index_st2")?;
            for ((id, a), b) in ids.iter().zip(&st1).zip(&st2) {
                writeln!(w, "{id},{a},{b}")?;
            }
            Ok(())
        })?;
        for (name, index) in [("st1", &st1), ("st2", &st2)] {
            let m = response_matrix(&all_emb, index, bins)?;
            write_file(&out.join(format!("response_{name}.tsv")), |w| write_response_matrix(w, &m))?;
        }
    }
    write_file(&out.join("summary.tsv"), |w| w.write_all(summary.as_bytes()))?;
    print!("{summary}");
    Ok(())
}

fn export(input: &Path, model: &Path, out: &Path, common: &Common) -> Result<()> {
    let Setup { cfg, exec } = setup(common, Some(&model.join(RUN_CONFIG)))?;
    let graphs = load_graphs(input)?;
    let all = examples(&graphs, &cfg)?;
    let params = load_model(model)?;
    let emb = embeddings(&params, &all, exec)?;
    let ids: Vec<String> = all.iter().map(|e| e.id.clone()).collect();
    write_file(out, |w| write_embeddings(w, &ids, &emb))?;
    println!("wrote {} embeddings to {}", emb.len(), out.display());
    Ok(())
}

fn gradcheck(threshold: f64, step: f64, sample: Option<usize>, common: &Common) -> Result<()> {
    let Setup { cfg, exec } = setup(common, None)?;
    if !(step > 0.0) {
        return Err(CliError::usage(format!("--step must be positive, got {step}")));
    }
    let dims = cfg.dims;
    let graph = three_node_graph(dims.categories, dims.bins)?;
    let coverage = match sample {
        Some(per_param) => Coverage::Sampled {
            per_param,
            seed: cfg.seed,
        },
        None => Coverage::All,
    };
    let started = Instant::now();
    let r = gradient_check(&graph, dims, cfg.seed, &cfg.loss, step, coverage, exec)?;
    let secs = started.elapsed().as_secs_f64();
    let over: Vec<_> = r.checks.iter().filter(|c| c.relative_error > threshold).collect();
    println!("entries checked: {}", r.entries_checked);
    println!("max relative error: {:e}", r.max_relative_error);
    if let Some((p, k)) = r.worst {
        let names = trajgraph::model::init_params(cfg.seed, dims)?.names;
        println!("worst entry: {}[{k}]", names[p]);
    }
    println!("entries above {threshold:e}: {}", over.len());
    if let Some(big) = over
        .iter()
        .map(|c| c.analytic.abs().max(c.numeric.abs()))
        .max_by(f64::total_cmp)
    {
        println!("largest gradient among them: {big:e}");
    }
    println!("seconds: {secs:.1}");
    if r.max_relative_error > threshold {
        return Err(CliError::numeric(format!(
            "max relative error {:e} exceeds {threshold:e}",
            r.max_relative_error
        )));
    }
    Ok(())
}

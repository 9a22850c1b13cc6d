use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context as _};
use serde::Serialize;

use rnnt_core::bench::{run_bench, DecodeSettings, Method};
use rnnt_core::fsa::{
    best_path, ngram_graph_from_arpa, parse_fsa_text, sample_nbest, serialize_fsa_text, serialize_fsa_text_with_header,
    total_logprob, trivial_graph, Fsa, Label,
};
use rnnt_core::fsa_search::{fsa_beam_search, lattice_to_best_seq, FsaSearchParams};
use rnnt_core::loss::Variant;
use rnnt_core::model::{
    init_model, load_checkpoint, load_dataset, save_checkpoint, save_dataset, synth_dataset, token_accuracy,
    Matrix, ModelConfig, SynthConfig, ToyTransducer, TrainConfig,
};
use rnnt_core::search::{beam_search, greedy_search, greedy_search_batch, MaxSymbols, MergeOp, SearchParams};

use crate::{
    BenchArgs, Cli, DecodeArgs, GraphCommand, LatticeCommand, MergeArg, MethodArg, ToygenArgs, TrainArgs,
    UsageError, VariantArg,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn format_tokens(tokens: &[Label]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn toygen(cli: &Cli, a: &ToygenArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: cli.seed,
        num_items: a.num,
        vocab_size: a.vocab,
        feat_dim: a.feat_dim,
        min_len: a.min_len,
        max_len: a.max_len,
        frames_per_token: a.frames_per_token,
        noise_std: a.noise_std,
        lead_frames: a.lead_frames,
    };
    let dataset = synth_dataset(&cfg)?;
    save_dataset(&cli.out_dir, &dataset)?;
    println!("wrote {} utterances to {}", dataset.len(), cli.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
}

pub fn train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let model_cfg = ModelConfig {
        vocab_size: data.config.vocab_size,
        feat_dim: data.config.feat_dim,
        enc_dim: a.enc_dim,
        emb_dim: a.emb_dim,
        joiner_dim: a.joiner_dim,
        seed: cli.seed,
        ..Default::default()
    };
    let cfg = TrainConfig {
        variant: match a.variant {
            VariantArg::Regular => Variant::Regular,
            VariantArg::Modified => Variant::Modified,
            VariantArg::Constrained => Variant::Constrained,
        },
        lm_scale: a.lm_scale,
        lambda_simple: a.lambda_simple,
        lr: a.lr,
        epochs: a.epochs,
        accum: a.accum,
        seed: cli.seed,
    };
    let init = init_model(&model_cfg)?;
    let (model, report) = rnnt_core::model::train(&init, &data.items, &cfg)?;
    save_checkpoint(&model, &cli.out_dir.join("model.ckpt"))?;
    let mut history = Vec::new();
    for (i, &loss) in report.epoch_losses.iter().enumerate() {
        serde_json::to_writer(&mut history, &EpochRecord { epoch: i + 1, loss })?;
        history.push(b'\n');
        println!("epoch {:>3}  loss {loss:.6}", i + 1);
    }
    write_file(&cli.out_dir.join("loss_history.jsonl"), history)?;
    if report.skipped > 0 {
        println!("skipped {} utterances with more targets than frames", report.skipped);
    }
    Ok(())
}

fn parse_max_symbols(s: &str) -> anyhow::Result<MaxSymbols> {
    if s == "inf" {
        return Ok(MaxSymbols::UNLIMITED);
    }
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(MaxSymbols::Limit(n)),
        _ => Err(usage(format!("--max-symbols must be a positive integer or inf, got {s:?}"))),
    }
}

fn load_graph(spec: &str, vocab: usize) -> anyhow::Result<Fsa> {
    if spec == "trivial" {
        return Ok(trivial_graph(vocab)?);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading graph {spec}"))?;
    parse_fsa_text(&text).with_context(|| format!("parsing graph {spec}"))
}

/// Everything `decode` needs besides the model and data, checked for
/// conflicts before anything is loaded.
struct DecodePlan {
    method: MethodArg,
    max_symbols: MaxSymbols,
    beam: SearchParams,
    fsa: FsaSearchParams,
    merge: MergeOp,
    nbest: usize,
    seed: u64,
    batched: bool,
    batch_size: usize,
    graph: Option<Fsa>,
}

fn plan_decode(cli: &Cli, a: &DecodeArgs) -> anyhow::Result<DecodePlan> {
    let max_symbols = parse_max_symbols(&a.max_symbols)?;
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    if a.batched {
        match a.method {
            MethodArg::Greedy if max_symbols != MaxSymbols::Limit(1) => {
                return Err(usage("--batched greedy search supports only --max-symbols 1"));
            }
            MethodArg::Beam => return Err(usage("beam search has no batched form; drop --batched")),
            _ => {}
        }
    }
    if a.method == MethodArg::FsaBeam && max_symbols != MaxSymbols::Limit(1) {
        return Err(usage("fsa-beam emits at most one symbol per frame; use --max-symbols 1"));
    }
    if a.method != MethodArg::FsaBeam && a.graph != "trivial" {
        return Err(usage("--graph applies only to --method fsa-beam"));
    }
    let merge = match a.merge_op {
        MergeArg::Max => MergeOp::Max,
        MergeArg::LogAdd => MergeOp::LogAdd,
    };
    Ok(DecodePlan {
        method: a.method,
        max_symbols,
        beam: SearchParams {
            max_symbols,
            beam_size: a.beam_size,
            merge_op: merge,
            length_norm: a.length_norm,
        },
        fsa: FsaSearchParams {
            beam: a.beam,
            max_states: a.max_states,
            max_contexts: a.max_contexts,
        },
        merge,
        nbest: a.nbest,
        seed: cli.seed,
        batched: a.batched,
        batch_size: a.batch_size,
        graph: None,
    })
}

/// Transcripts, plus a lattice per utterance for fsa-beam.
fn decode_slice(model: &ToyTransducer, utts: &[&Matrix], plan: &DecodePlan) -> anyhow::Result<Vec<(Vec<Label>, Option<Fsa>)>> {
    let mut out = Vec::with_capacity(utts.len());
    let chunk = if plan.batched { plan.batch_size } else { 1 };
    match plan.method {
        MethodArg::Greedy if plan.batched => {
            for part in utts.chunks(chunk) {
                out.extend(greedy_search_batch(model, part).into_iter().map(|t| (t, None)));
            }
        }
        MethodArg::Greedy => {
            for f in utts {
                out.push((greedy_search(model, f, plan.max_symbols)?, None));
            }
        }
        MethodArg::Beam => {
            for f in utts {
                out.push((beam_search(model, f, &plan.beam)?, None));
            }
        }
        MethodArg::FsaBeam => {
            let graph = plan.graph.as_ref().expect("graph loaded for fsa-beam");
            for part in utts.chunks(chunk) {
                let graphs = vec![graph; part.len()];
                for lat in fsa_beam_search(model, part, &graphs, plan.fsa)? {
                    let tokens = lattice_to_best_seq(&lat, plan.merge, plan.nbest, plan.seed)?;
                    out.push((tokens, Some(lat)));
                }
            }
        }
    }
    Ok(out)
}

/// Splits the utterances into `threads` contiguous slices decoded in
/// parallel; output order matches input order.
fn decode_parallel(
    model: &ToyTransducer,
    utts: &[&Matrix],
    plan: &DecodePlan,
    threads: usize,
) -> anyhow::Result<Vec<(Vec<Label>, Option<Fsa>)>> {
    if threads <= 1 || utts.len() <= 1 {
        return decode_slice(model, utts, plan);
    }
    let per = utts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(per)
            .map(|part| s.spawn(move || decode_slice(model, part, plan)))
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Serialize)]
struct DecodeSummary {
    method: &'static str,
    utterances: usize,
    token_accuracy: f64,
}

pub fn decode(cli: &Cli, a: &DecodeArgs) -> anyhow::Result<()> {
    let mut plan = plan_decode(cli, a)?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if plan.method == MethodArg::FsaBeam {
        plan.graph = Some(load_graph(&a.graph, model.cfg.vocab_size)?);
    }
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    if data.config.feat_dim != model.cfg.feat_dim {
        bail!(
            "dataset feature dimension {} does not match the model's {}",
            data.config.feat_dim,
            model.cfg.feat_dim
        );
    }
    let feats: Vec<&Matrix> = data.items.iter().map(|u| &u.features).collect();
    let results = decode_parallel(&model, &feats, &plan, cli.threads)?;

    let mut transcripts = String::new();
    for (tokens, _) in &results {
        transcripts += &format_tokens(tokens);
        transcripts.push('\n');
    }
    write_file(&cli.out_dir.join("transcripts.txt"), transcripts)?;
    if plan.method == MethodArg::FsaBeam {
        let dir = cli.out_dir.join("lattices");
        fs::create_dir_all(&dir)?;
        for (i, (_, lat)) in results.iter().enumerate() {
            let lat = lat.as_ref().expect("fsa-beam returns lattices");
            write_file(&dir.join(format!("utt_{i:05}.fsa")), serialize_fsa_text(lat))?;
        }
    }
    let hyps: Vec<Vec<Label>> = results.into_iter().map(|(t, _)| t).collect();
    let refs: Vec<Vec<Label>> = data.items.iter().map(|u| u.targets.clone()).collect();
    let summary = DecodeSummary {
        method: match plan.method {
            MethodArg::Greedy => "greedy",
            MethodArg::Beam => "beam",
            MethodArg::FsaBeam => "fsa-beam",
        },
        utterances: hyps.len(),
        token_accuracy: token_accuracy(&hyps, &refs),
    };
    write_file(
        &cli.out_dir.join("decode_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "decoded {} utterances, token accuracy {:.2}%",
        summary.utterances,
        100.0 * summary.token_accuracy
    );
    Ok(())
}

/// `symbol id` per line; blank lines and id 0 are skipped.
fn parse_tokens(text: &str) -> anyhow::Result<HashMap<String, Label>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            [sym, id] => {
                let id: Label = id
                    .parse()
                    .with_context(|| format!("tokens line {}: bad id {id:?}", i + 1))?;
                if id != 0 {
                    map.insert(sym.to_string(), id);
                }
            }
            _ => bail!("tokens line {}: expected `symbol id`", i + 1),
        }
    }
    Ok(map)
}

pub fn graph(cli: &Cli, g: &GraphCommand) -> anyhow::Result<()> {
    let (fsa, header) = match g {
        GraphCommand::Trivial { vocab } => (trivial_graph(*vocab)?, vec![("kind", "trivial".to_string())]),
        GraphCommand::Ngram { arpa, tokens } => {
            let arpa_text = fs::read_to_string(arpa).with_context(|| format!("reading {}", arpa.display()))?;
            let tokens_text = fs::read_to_string(tokens).with_context(|| format!("reading {}", tokens.display()))?;
            let map = parse_tokens(&tokens_text)?;
            (ngram_graph_from_arpa(&arpa_text, &map)?, vec![("kind", "ngram".to_string())])
        }
    };
    let path = cli.out_dir.join("graph.fsa");
    write_file(&path, serialize_fsa_text_with_header(&fsa, &header))?;
    println!("wrote {} states, {} arcs to {}", fsa.num_states(), fsa.num_arcs(), path.display());
    Ok(())
}

fn read_lattice(path: &Path) -> anyhow::Result<Fsa> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_fsa_text(&text).with_context(|| format!("parsing lattice {}", path.display()))
}

pub fn lattice(cli: &Cli, l: &LatticeCommand) -> anyhow::Result<()> {
    let (name, text) = match l {
        LatticeCommand::BestPath { lattice } => {
            let p = best_path(&read_lattice(lattice)?)?;
            ("best_path.txt", format!("{}\t{}\n", p.score, format_tokens(&p.tokens())))
        }
        LatticeCommand::Total { lattice } => ("total.txt", format!("{}\n", total_logprob(&read_lattice(lattice)?)?)),
        LatticeCommand::Nbest { n, lattice } => {
            let paths = sample_nbest(&read_lattice(lattice)?, *n, cli.seed)?;
            let mut out = String::new();
            for p in paths {
                out += &format!("{}\t{}\n", p.score, format_tokens(&p.tokens()));
            }
            ("nbest.txt", out)
        }
    };
    print!("{text}");
    write_file(&cli.out_dir.join(name), text)
}

pub fn bench(cli: &Cli, a: &BenchArgs) -> anyhow::Result<()> {
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let feats: Vec<&Matrix> = data.items.iter().map(|u| &u.features).collect();
    let methods: Vec<Method> = a
        .methods
        .iter()
        .map(|m| match m {
            MethodArg::Greedy => Method::Greedy,
            MethodArg::Beam => Method::Beam,
            MethodArg::FsaBeam => Method::FsaBeam,
        })
        .collect();
    let report = run_bench(&model, &feats, &methods, a.batch_size, a.repeats, &DecodeSettings::default())?;
    let mut lines = Vec::new();
    println!("{:<9} {:>7} {:>6} {:>12} {:>10} {:>10}", "method", "batched", "batch", "wall_s", "audio_s", "rtf");
    for row in &report.rows {
        println!(
            "{:<9} {:>7} {:>6} {:>12.6} {:>10.2} {:>10.6}",
            row.method.name(),
            row.batched,
            row.batch_size,
            row.wall_seconds,
            row.audio_seconds,
            row.rtf
        );
        serde_json::to_writer(&mut lines, row)?;
        lines.push(b'\n');
    }
    let path = cli.out_dir.join("bench.jsonl");
    let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(&lines)?;
    Ok(())
}

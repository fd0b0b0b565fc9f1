use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scanents::annotation::{parse_annotations, GroundedUtterance};
use scanents::autodiff::Checkpoint;
use scanents::harness::eval::evaluate_speaker;
use scanents::harness::generate::{generate_corpus, Corpus, GenConfig};
use scanents::harness::gradcheck::{gradcheck_all, GradcheckReport};
use scanents::harness::train::{train_listener, train_speaker, TrainConfig, TrainReport};
use scanents::harness::{evaluate, knockout, KnockoutMode};
use scanents::listener::{AuxFlags, Listener, ListenerConfig};
use scanents::relations::{extract_relations, relation_breakdown, RelationInstance, DEFAULT_VIEWPOINT};
use scanents::scene::{read_scenes, Scene};
use scanents::speaker::{Speaker, SpeakerAux, SpeakerConfig};
use scanents::stats::{compute_stats, emit_report};
use scanents::Error;

type Model = f32;

#[derive(Parser)]
#[command(name = "scanents", version, about = "Scan-entity grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with any of the sections `generate`, `listener`, `speaker`, `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Data {
    /// Directory holding `scenes.jsonl` and `annotations.jsonl`; a corpus is
    /// generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Corpus statistics.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Pairwise spatial relations between the entities of every utterance.
    Relations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
    },
    TrainListener {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Auxiliary losses, a subset of anc,attn,dis,rel.
        #[arg(long, default_value = "")]
        aux: String,
    },
    TrainSpeaker {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Auxiliary losses, a subset of ent,men.
        #[arg(long, default_value = "")]
        aux: String,
        #[arg(long)]
        init_from_listener: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Listener accuracy under anchor lesioning.
    Knockout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One mode; all three when omitted.
        #[arg(long)]
        mode: Option<KnockoutMode>,
    },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    generate: GenConfig,
    listener: ListenerConfig,
    speaker: SpeakerConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(common: &Common) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).map_err(Error::from)?
            }
            None => RunConfig::default(),
        };
        cfg.generate.seed = common.seed;
        cfg.generate.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn corpus(&self, data: &Data) -> anyhow::Result<Corpus> {
        Ok(match &data.data {
            Some(dir) => Corpus::read(dir)?,
            None => generate_corpus(&self.generate)?,
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn load_annotations(path: &Path) -> anyhow::Result<Vec<GroundedUtterance>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_annotations(BufReader::new(f))?)
}

/// Scenes from a file, from `scenes.jsonl` inside a directory, or else from
/// every `.json`/`.jsonl` file in the directory except the annotations.
fn load_scenes(path: &Path, skip: &Path) -> anyhow::Result<HashMap<String, Scene>> {
    let files = if path.join("scenes.jsonl").is_file() {
        vec![path.join("scenes.jsonl")]
    } else if path.is_dir() {
        let skip = skip.canonicalize().ok();
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| {
            matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")) && p.canonicalize().ok() != skip
        });
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut scenes = HashMap::new();
    for f in files {
        let reader = BufReader::new(fs::File::open(&f).with_context(|| format!("opening {}", f.display()))?);
        for s in read_scenes(reader).with_context(|| format!("reading scenes from {}", f.display()))? {
            scenes.insert(s.scene_id.clone(), s);
        }
    }
    Ok(scenes)
}

fn epochs_csv(report: &TrainReport) -> String {
    let keys: Vec<&String> = report
        .epochs
        .first()
        .map(|e| e.terms.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("epoch,loss");
    for k in &keys {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for e in &report.epochs {
        let _ = write!(out, "{},{}", e.epoch, e.loss);
        for k in &keys {
            let _ = write!(out, ",{}", e.terms[*k]);
        }
        out.push('\n');
    }
    out
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn checkpoint_kind(ck: &Checkpoint) -> &str {
    ck.meta.get("model").and_then(|m| m.as_str()).unwrap_or("")
}

#[derive(Serialize)]
struct GenerateSummary {
    seed: u64,
    n_scenes: usize,
    n_utterances: usize,
    n_view_dependent: usize,
}

#[derive(Serialize)]
struct RelationRecord<'a> {
    utterance_id: &'a str,
    scene_id: &'a str,
    #[serde(flatten)]
    relation: RelationInstance,
}

#[derive(Serialize)]
struct KnockoutReport {
    overall_acc: f64,
    modes: BTreeMap<String, KnockoutResult>,
}

#[derive(Serialize)]
struct KnockoutResult {
    acc: f64,
    delta: f64,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = RunConfig::load(&common)?;
            let corpus = generate_corpus(&cfg.generate)?;
            let dir = out_dir(&common)?;
            corpus.write(dir)?;
            let summary = GenerateSummary {
                seed: common.seed,
                n_scenes: corpus.scenes.len(),
                n_utterances: corpus.utterances.len(),
                n_view_dependent: corpus.utterances.iter().filter(|u| u.view_dependent).count(),
            };
            write_json(&dir.join("generate.json"), &summary)?;
            write_text(
                &dir.join("generate.csv"),
                &format!(
                    "metric,value\nn_scenes,{}\nn_utterances,{}\nn_view_dependent,{}\n",
                    summary.n_scenes, summary.n_utterances, summary.n_view_dependent
                ),
            )?;
        }
        Command::Stats {
            common,
            annotations,
            scenes,
        } => {
            let corpus = load_annotations(&annotations)?;
            let scenes = load_scenes(&scenes, &annotations)?;
            let stats = compute_stats(&corpus, &scenes)?;
            emit_report(&stats, out_dir(&common)?)?;
        }
        Command::Relations {
            common,
            annotations,
            scenes,
        } => {
            let corpus = load_annotations(&annotations)?;
            let scenes = load_scenes(&scenes, &annotations)?;
            let mut lines = String::new();
            for u in &corpus {
                let s = scenes
                    .get(&u.scene_id)
                    .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
                for relation in extract_relations(u, s, DEFAULT_VIEWPOINT)? {
                    let rec = RelationRecord {
                        utterance_id: &u.id,
                        scene_id: &u.scene_id,
                        relation,
                    };
                    lines.push_str(&serde_json::to_string(&rec)?);
                    lines.push('\n');
                }
            }
            let counts = relation_breakdown(&corpus, &scenes)?;
            let path = &common.out;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_text(path, &lines)?;
            let named = counts
                .iter()
                .map(|(r, n)| Ok((serde_json::to_value(r)?.as_str().unwrap_or_default().to_owned(), *n)))
                .collect::<Result<BTreeMap<String, usize>, serde_json::Error>>()?;
            let mut csv = String::from("relation,count\n");
            for (r, n) in &named {
                let _ = writeln!(csv, "{r},{n}");
            }
            write_json(&path.with_extension("breakdown.json"), &named)?;
            write_text(&path.with_extension("breakdown.csv"), &csv)?;
        }
        Command::TrainListener { common, data, aux } => {
            let cfg = RunConfig::load(&common)?;
            let flags = AuxFlags::parse(&aux)?;
            let (train, _) = cfg.corpus(&data)?.split();
            let (model, report) = train_listener::<Model>(
                &train,
                &cfg.listener,
                cfg.generate.n_classes,
                &cfg.train,
                flags,
                common.seed,
            )?;
            let dir = out_dir(&common)?;
            model.to_checkpoint()?.save(&dir.join("listener.ckpt.json"))?;
            write_json(&dir.join("train.json"), &report)?;
            write_text(&dir.join("train.csv"), &epochs_csv(&report))?;
        }
        Command::TrainSpeaker {
            common,
            data,
            aux,
            init_from_listener,
        } => {
            let cfg = RunConfig::load(&common)?;
            let flags = SpeakerAux::parse(&aux)?;
            let init = match &init_from_listener {
                Some(p) => Some(Listener::<Model>::from_checkpoint(&load_checkpoint(p)?)?),
                None => None,
            };
            let (train, _) = cfg.corpus(&data)?.split();
            let (model, report) = train_speaker::<Model>(
                &train,
                &cfg.speaker,
                cfg.generate.n_classes,
                &cfg.train,
                flags,
                common.seed,
                init.as_ref(),
            )?;
            let dir = out_dir(&common)?;
            model.to_checkpoint()?.save(&dir.join("speaker.ckpt.json"))?;
            write_json(&dir.join("train.json"), &report)?;
            write_text(&dir.join("train.csv"), &epochs_csv(&report))?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = RunConfig::load(&common)?;
            let (_, test) = cfg.corpus(&data)?.split();
            let ck = load_checkpoint(&checkpoint)?;
            let dir = out_dir(&common)?;
            match checkpoint_kind(&ck) {
                "listener" => {
                    let model = Listener::<Model>::from_checkpoint(&ck)?;
                    let report = scanents::harness::evaluate_with_knockouts(&model, &test)?;
                    write_json(&dir.join("eval.json"), &report)?;
                    write_text(&dir.join("eval.csv"), &report.to_csv())?;
                }
                "speaker" => {
                    let model = Speaker::<Model>::from_checkpoint(&ck)?;
                    let (report, captions) = evaluate_speaker(&model, &test, model.cfg.max_len)?;
                    write_json(&dir.join("eval.json"), &report)?;
                    write_text(&dir.join("eval.csv"), &report.to_csv())?;
                    let mut lines = String::new();
                    for c in &captions {
                        lines.push_str(&serde_json::to_string(c)?);
                        lines.push('\n');
                    }
                    write_text(&dir.join("captions.jsonl"), &lines)?;
                }
                other => bail!(Error::CheckpointMismatch(format!("unknown model kind {other:?}"))),
            }
        }
        Command::Knockout {
            common,
            data,
            checkpoint,
            mode,
        } => {
            let cfg = RunConfig::load(&common)?;
            let (_, test) = cfg.corpus(&data)?.split();
            let model = Listener::<Model>::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let base = evaluate(&model, &test)?.overall_acc;
            let modes = match mode {
                Some(m) => vec![m],
                None => KnockoutMode::ALL.to_vec(),
            };
            let mut report = KnockoutReport {
                overall_acc: base,
                modes: BTreeMap::new(),
            };
            for m in modes {
                let acc = knockout(&model, &test, m)?;
                report
                    .modes
                    .insert(m.name().into(), KnockoutResult { acc, delta: acc - base });
            }
            let dir = out_dir(&common)?;
            let mut csv = format!("mode,acc,delta\nnone,{base},0\n");
            for (m, r) in &report.modes {
                let _ = writeln!(csv, "{m},{},{}", r.acc, r.delta);
            }
            write_json(&dir.join("knockout.json"), &report)?;
            write_text(&dir.join("knockout.csv"), &csv)?;
        }
        Command::Gradcheck { common, instances } => {
            if instances == 0 {
                bail!(Error::Config("instances must be positive".into()));
            }
            let report: GradcheckReport = gradcheck_all(common.seed, instances)?;
            let dir = out_dir(&common)?;
            write_json(&dir.join("gradcheck.json"), &report)?;
            write_text(&dir.join("gradcheck.csv"), &report.to_csv())?;
            for c in &report.checks {
                println!(
                    "{} {:<12} max_rel_err={:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.loss,
                    c.max_rel_err
                );
            }
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                c.downcast_ref::<Error>().is_some_and(Error::is_validation)
                    || c.downcast_ref::<serde_json::Error>().is_some()
            });
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

//! `pnsc`: command-line front end for the personalized speech codec
//! pipeline. Exit codes: 0 success, 2 bad usage or configuration, 3 runtime
//! failure (missing prerequisites, bad data, divergence).

use clap::{Parser, Subcommand};
use pnsc_core::bitstream::{bitrate, quantize_features, read_stream, write_stream, StreamHeader};
use pnsc_core::config::PipelineConfig;
use pnsc_core::corpus::{
    default_specs, generate_synthetic_corpus, load_manifest, load_utterance, save_manifest,
    Manifest,
};
use pnsc_core::dsp::features::extract_features;
use pnsc_core::dsp::wav::{read_wav, write_wav};
use pnsc_core::embed::{
    encode_utterance, mean_speaker_embedding, train_embedder, EmbedTrainConfig, EmbedderModel,
    SpeakerEmbedding, UtteranceFeatures, EMBED_DIM,
};
use pnsc_core::eval::evaluate;
use pnsc_core::grouping::ClusterModel;
use pnsc_core::nn::checkpoint::{write_file_atomic, Checkpoint};
use pnsc_core::nn::AdamConfig;
use pnsc_core::plpcnet::{
    average_superframes, synthesize, train_bank, DecoderBank, DecoderTrainConfig,
    DecoderTrainItem, SynthesisMode,
};
use pnsc_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "pnsc", about = "personalized neural speech codec toolkit", version)]
struct Cli {
    /// Pipeline configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed; overrides the config file and PNSC_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic speaker corpus.
    GenCorpus {
        /// Output directory for WAV files and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 2)]
        speakers_per_group: usize,
        #[arg(long, default_value_t = 3)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Train the Siamese speaker embedder.
    TrainEmbedder {
        #[arg(long)]
        manifest: PathBuf,
        /// Embedder checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Export per-utterance embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the k-means speaker grouping from mean speaker embeddings.
    Cluster {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        /// Cluster model path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bank of group decoders.
    TrainBank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        /// Bank path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a WAV file into a packet stream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a packet stream back into a WAV file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Excitation mode: argmax, sample, or zero.
        #[arg(long, default_value = "argmax")]
        mode: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Compare the bank against a generic decoder on held-out data.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Single-decoder baseline bank (train with group_count = 1).
        #[arg(long)]
        generic_bank: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run(cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {}", e);
    match e {
        Error::InvalidArgument(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(command: Command, config: &PipelineConfig) -> Result<()> {
    match command {
        Command::GenCorpus { out, groups, speakers_per_group, utterances, seconds } => {
            cmd_gen_corpus(config, &out, groups, speakers_per_group, utterances, seconds)
        }
        Command::TrainEmbedder { manifest, out, log } => {
            cmd_train_embedder(config, &manifest, &out, log.as_deref())
        }
        Command::ExportEmbeddings { manifest, embedder, out } => {
            cmd_export_embeddings(config, &manifest, &embedder, &out)
        }
        Command::Cluster { manifest, embedder, out } => {
            cmd_cluster(config, &manifest, &embedder, &out)
        }
        Command::TrainBank { manifest, clusters, out, log } => {
            cmd_train_bank(config, &manifest, &clusters, &out, log.as_deref())
        }
        Command::Encode { input, embedder, clusters, out } => {
            cmd_encode(config, &input, &embedder, &clusters, &out)
        }
        Command::Decode { input, bank, clusters, out, mode, temperature } => {
            cmd_decode(config, &input, &bank, &clusters, &out, &mode, temperature)
        }
        Command::Evaluate { manifest, clusters, bank, generic_bank, out } => {
            cmd_evaluate(&manifest, &clusters, &bank, &generic_bank, &out)
        }
    }
}

/// A produced-by-an-earlier-stage input; absence is a pipeline-order error.
fn require_file(path: &Path, producing_command: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingPrerequisite {
            command: producing_command.to_string(),
            detail: format!("{} does not exist", path.display()),
        });
    }
    Ok(())
}

/// Appends `{"step":..,"loss":..,"elapsed_ms":..}` lines.
fn write_run_log(path: &Path, history: &[f64], started: Instant) -> Result<()> {
    let elapsed_ms = started.elapsed().as_millis() as u64;
    let mut out = String::new();
    for (step, loss) in history.iter().enumerate() {
        let line = serde_json::json!({ "step": step, "loss": loss, "elapsed_ms": elapsed_ms });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    write_file_atomic(path, out.as_bytes())
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.push_str(".log.jsonl");
    out.with_file_name(name)
}

fn cmd_gen_corpus(
    config: &PipelineConfig,
    out: &Path,
    groups: usize,
    speakers_per_group: usize,
    utterances: usize,
    seconds: f64,
) -> Result<()> {
    let specs = default_specs(groups, speakers_per_group, config.seed);
    let manifest = generate_synthetic_corpus(&specs, utterances, seconds, out)?;
    save_manifest(&out.join("manifest.tsv"), &manifest)?;
    println!(
        "wrote {} utterances for {} speakers to {}",
        manifest.entries.len(),
        groups * speakers_per_group,
        out.display()
    );
    Ok(())
}

/// Loads every manifest utterance and extracts frame features, tracking the
/// speaker index in manifest speaker order.
fn load_utterance_features(manifest: &Manifest) -> Result<(Vec<UtteranceFeatures>, Vec<String>)> {
    let speakers = manifest.speakers();
    let index: BTreeMap<&str, usize> =
        speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut utterances = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let buf = load_utterance(entry)?;
        let frames = extract_features(&buf)?.iter().map(|f| f.to_vector()).collect();
        utterances.push(UtteranceFeatures { speaker: index[entry.speaker_id.as_str()], frames });
    }
    Ok((utterances, speakers))
}

fn cmd_train_embedder(
    config: &PipelineConfig,
    manifest_path: &Path,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    require_file(manifest_path, "pnsc gen-corpus")?;
    let manifest = load_manifest(manifest_path)?;
    let (utterances, _) = load_utterance_features(&manifest)?;
    let train_config = EmbedTrainConfig {
        batch_size: config.embed_batch,
        steps: config.embed_steps,
        adam: AdamConfig { lr: config.learning_rate, ..AdamConfig::default() },
        clip_threshold: config.clip_threshold,
        seed: config.seed,
        max_frames: config.embed_max_frames,
    };
    let started = Instant::now();
    let outcome = train_embedder(&utterances, &train_config)?;
    write_run_log(log.unwrap_or(&default_log_path(out)), &outcome.history, started)?;
    if outcome.diverged {
        outcome.model.to_checkpoint().save(out)?;
        return Err(Error::Divergence(format!(
            "embedder training diverged after {} steps; last good checkpoint kept at {}",
            outcome.history.len(),
            out.display()
        )));
    }
    outcome.model.to_checkpoint().save(out)?;
    println!(
        "trained embedder over {} steps (final loss {:.4}) -> {}",
        outcome.history.len(),
        outcome.history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_embedder(path: &Path) -> Result<EmbedderModel> {
    require_file(path, "pnsc train-embedder")?;
    EmbedderModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Per-utterance embeddings plus per-speaker means, in manifest order.
fn embed_manifest(
    model: &EmbedderModel,
    manifest: &Manifest,
    max_frames: usize,
) -> Result<(Vec<SpeakerEmbedding>, Vec<(String, SpeakerEmbedding)>)> {
    let mut per_utterance = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let buf = load_utterance(entry)?;
        let frames: Vec<_> = extract_features(&buf)?.iter().map(|f| f.to_vector()).collect();
        let take = frames.len().min(max_frames);
        per_utterance.push(encode_utterance(model, &frames[..take])?);
    }
    let mut speaker_means = Vec::new();
    for speaker in manifest.speakers() {
        let own: Vec<SpeakerEmbedding> = manifest
            .entries
            .iter()
            .zip(&per_utterance)
            .filter(|(e, _)| e.speaker_id == speaker)
            .map(|(_, z)| z.clone())
            .collect();
        speaker_means.push((speaker, mean_speaker_embedding(&own)?));
    }
    Ok((per_utterance, speaker_means))
}

fn cmd_export_embeddings(
    config: &PipelineConfig,
    manifest_path: &Path,
    embedder: &Path,
    out: &Path,
) -> Result<()> {
    require_file(manifest_path, "pnsc gen-corpus")?;
    let manifest = load_manifest(manifest_path)?;
    let model = load_embedder(embedder)?;
    let (per_utterance, _) = embed_manifest(&model, &manifest, config.embed_max_frames)?;

    let mut csv = String::from("speaker_id,utterance_id");
    for d in 0..EMBED_DIM {
        csv.push_str(&format!(",z{}", d));
    }
    csv.push('\n');
    for (entry, z) in manifest.entries.iter().zip(&per_utterance) {
        csv.push_str(&entry.speaker_id);
        csv.push(',');
        csv.push_str(&entry.utterance_id);
        for v in &z.values {
            csv.push_str(&format!(",{:.8}", v));
        }
        csv.push('\n');
    }
    write_file_atomic(out, csv.as_bytes())?;
    println!("wrote {} embeddings to {}", per_utterance.len(), out.display());
    Ok(())
}

fn cmd_cluster(
    config: &PipelineConfig,
    manifest_path: &Path,
    embedder: &Path,
    out: &Path,
) -> Result<()> {
    require_file(manifest_path, "pnsc gen-corpus")?;
    let manifest = load_manifest(manifest_path)?;
    let model = load_embedder(embedder)?;
    let (_, speaker_means) = embed_manifest(&model, &manifest, config.embed_max_frames)?;
    let clusters = ClusterModel::fit(&speaker_means, config.group_count, config.seed)?;
    clusters.save(out)?;
    println!(
        "clustered {} speakers into {} groups (sizes {:?}) -> {}",
        speaker_means.len(),
        clusters.num_groups(),
        clusters.group_sizes(),
        out.display()
    );
    Ok(())
}

/// Training items for every manifest utterance, bucketed by the cluster
/// model's fit-time speaker assignment.
fn group_train_items(
    manifest: &Manifest,
    clusters: &ClusterModel,
) -> Result<Vec<Vec<DecoderTrainItem>>> {
    let mut groups = vec![Vec::new(); clusters.num_groups()];
    for entry in &manifest.entries {
        let group = clusters.group_of(&entry.speaker_id).ok_or_else(|| {
            Error::MissingPrerequisite {
                command: "pnsc cluster".to_string(),
                detail: format!(
                    "speaker '{}' is not in the cluster model; re-run clustering on this manifest",
                    entry.speaker_id
                ),
            }
        })?;
        groups[group].push(DecoderTrainItem::prepare(&load_utterance(entry)?)?);
    }
    Ok(groups)
}

fn decoder_train_config(config: &PipelineConfig) -> DecoderTrainConfig {
    DecoderTrainConfig {
        preset: config.decoder_preset,
        steps: config.decoder_steps,
        batch_chunks: config.decoder_batch_chunks,
        adam: AdamConfig { lr: config.learning_rate, ..AdamConfig::default() },
        clip_threshold: config.clip_threshold,
        seed: config.seed,
    }
}

fn cmd_train_bank(
    config: &PipelineConfig,
    manifest_path: &Path,
    clusters_path: &Path,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    require_file(manifest_path, "pnsc gen-corpus")?;
    require_file(clusters_path, "pnsc cluster")?;
    let manifest = load_manifest(manifest_path)?;
    let clusters = ClusterModel::load(clusters_path)?;
    let groups = group_train_items(&manifest, &clusters)?;
    let train_config = decoder_train_config(config);
    let started = Instant::now();
    let bank = train_bank(&groups, clusters.hash(), config.leakage, &train_config)?;
    // the bank API reports per-group models only; log the per-group sizes
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    write_run_log(log.unwrap_or(&default_log_path(out)), &sizes, started)?;
    bank.save(out)?;
    println!(
        "trained a {}-group decoder bank ({} params each) -> {}",
        bank.num_groups(),
        bank.arch.param_count(),
        out.display()
    );
    Ok(())
}

fn cmd_encode(
    config: &PipelineConfig,
    input: &Path,
    embedder: &Path,
    clusters_path: &Path,
    out: &Path,
) -> Result<()> {
    require_file(clusters_path, "pnsc cluster")?;
    let buf = read_wav(input)?;
    let model = load_embedder(embedder)?;
    let clusters = ClusterModel::load(clusters_path)?;

    let frames = extract_features(&buf)?;
    let vectors: Vec<_> = frames.iter().map(|f| f.to_vector()).collect();
    let take = vectors.len().min(config.embed_max_frames);
    let z = encode_utterance(&model, &vectors[..take])?;
    let classified = clusters.classify(&z);

    let packets: Vec<_> = average_superframes(&frames)
        .iter()
        .enumerate()
        .map(|(i, sf)| quantize_features(i as u32, sf).0)
        .collect();
    let header = StreamHeader::new(clusters.num_groups() as u16, classified.group as u16)?;
    write_stream(out, &header, &packets)?;
    println!(
        "encoded {:.2}s as {} packets (group {}, {:.0} bps) -> {}",
        buf.duration_secs(),
        packets.len(),
        classified.group,
        bitrate(&packets)?,
        out.display()
    );
    Ok(())
}

fn cmd_decode(
    _config: &PipelineConfig,
    input: &Path,
    bank_path: &Path,
    clusters_path: &Path,
    out: &Path,
    mode: &str,
    temperature: f64,
) -> Result<()> {
    require_file(input, "pnsc encode")?;
    require_file(bank_path, "pnsc train-bank")?;
    require_file(clusters_path, "pnsc cluster")?;
    let (header, packets) = read_stream(input)?;
    let bank = DecoderBank::load(bank_path)?;
    let clusters = ClusterModel::load(clusters_path)?;
    bank.check_cluster(&clusters.hash())?;
    if header.group_count as usize != bank.num_groups() {
        return Err(Error::StreamDecode(format!(
            "stream was encoded against {} groups, bank has {}",
            header.group_count,
            bank.num_groups()
        )));
    }
    let model = bank.dispatch(header.group_index)?;
    let synth_mode = match mode {
        "argmax" => SynthesisMode::Argmax,
        "sample" => SynthesisMode::Sample { temperature, seed: _config.seed },
        "zero" => SynthesisMode::ZeroExcitation,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown synthesis mode '{}' (argmax, sample, zero)",
                other
            )))
        }
    };
    let audio = synthesize(model, &packets, synth_mode)?;
    write_wav(out, &audio)?;
    println!(
        "decoded {} packets ({:.2}s, group {}) -> {}",
        packets.len(),
        audio.duration_secs(),
        header.group_index,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    manifest_path: &Path,
    clusters_path: &Path,
    bank_path: &Path,
    generic_path: &Path,
    out: &Path,
) -> Result<()> {
    require_file(manifest_path, "pnsc gen-corpus")?;
    require_file(clusters_path, "pnsc cluster")?;
    require_file(bank_path, "pnsc train-bank")?;
    require_file(generic_path, "pnsc train-bank")?;
    let manifest = load_manifest(manifest_path)?;
    let clusters = ClusterModel::load(clusters_path)?;
    let bank = DecoderBank::load(bank_path)?;
    bank.check_cluster(&clusters.hash())?;
    let generic = DecoderBank::load(generic_path)?;
    if generic.num_groups() != 1 {
        return Err(Error::InvalidArgument(format!(
            "generic baseline must be a 1-group bank, got {} groups",
            generic.num_groups()
        )));
    }
    let groups = group_train_items(&manifest, &clusters)?;
    let sizes = clusters.group_sizes();
    let report = evaluate(&bank, &generic.models[0], &groups, &sizes)?;
    report.save_csv(out)?;
    println!(
        "weighted CE: bank {:.4} vs generic {:.4} ({:+.2}% relative) -> {}",
        report.weighted_bank,
        report.weighted_generic,
        100.0 * report.relative_improvement,
        out.display()
    );
    Ok(())
}

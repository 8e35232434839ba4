//! Corpus handling: manifest TSV files, speaker-disjoint splits, and a
//! deterministic synthetic multi-group corpus generator (impulse-train
//! source shaped by per-speaker formant filters).

use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::nn::checkpoint::write_file_atomic;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    pub path: PathBuf,
    pub duration_secs: f64,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn by_speaker(&self) -> BTreeMap<String, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.speaker_id.clone()).or_default().push(e);
        }
        map
    }

    pub fn filter_speakers(&self, keep: &BTreeSet<String>) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| keep.contains(&e.speaker_id)).cloned().collect(),
        }
    }
}

/// Tab-separated, UTF-8, one utterance per line:
/// speaker_id, utterance_id, path, duration_secs, split.
/// A 4-column form without duration is also accepted.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 && cols.len() != 5 {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("expected 4 or 5 tab-separated columns, got {}", cols.len()),
            });
        }
        let (duration_secs, split) = if cols.len() == 5 {
            let d = cols[3].parse::<f64>().map_err(|_| Error::Manifest {
                line: i + 1,
                reason: format!("bad duration '{}'", cols[3]),
            })?;
            (d, cols[4])
        } else {
            (0.0, cols[3])
        };
        if !seen.insert(cols[1].to_string()) {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("duplicate utterance id '{}'", cols[1]),
            });
        }
        entries.push(ManifestEntry {
            speaker_id: cols[0].to_string(),
            utterance_id: cols[1].to_string(),
            path: PathBuf::from(cols[2]),
            duration_secs,
            split: split.to_string(),
        });
    }
    Ok(Manifest { entries })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.speaker_id,
            e.utterance_id,
            e.path.display(),
            e.duration_secs,
            e.split
        ));
    }
    write_file_atomic(path, out.as_bytes())
}

/// A formant resonance: center frequency and bandwidth in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Formant {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeakerSpec {
    pub speaker_id: String,
    pub group: usize,
    /// Fundamental-frequency range in Hz; disjoint ranges across groups
    /// plant recoverable structure.
    pub f0_range: (f64, f64),
    pub formants: Vec<Formant>,
    /// Relative per-period F0 jitter, e.g. 0.02.
    pub jitter: f64,
    /// Source mix in [0, 1]: 1.0 is a pure impulse train (modal voice),
    /// lower values blend in pre-formant noise (breathy voice).
    pub voicing: f64,
    pub seed: u64,
}

/// Two-pole resonator cascade applied in place.
fn apply_formants(x: &mut [f64], formants: &[Formant]) {
    let fs = SAMPLE_RATE as f64;
    for f in formants {
        let r = (-std::f64::consts::PI * f.bandwidth_hz / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * f.freq_hz / fs;
        let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// One deterministic utterance: jittered impulse train at the speaker's F0,
/// shaped by the formant cascade, plus low-level noise.
pub fn synthesize_utterance(spec: &SynthSpeakerSpec, utterance_index: usize, seconds: f64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (utterance_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let f0 = rng.gen_range(spec.f0_range.0..=spec.f0_range.1);
    let mut x = vec![0.0f64; n];
    let mut t = 0.0f64;
    while (t as usize) < n {
        x[t as usize] = spec.voicing;
        let jitter = 1.0 + spec.jitter * rng.gen_range(-1.0..1.0);
        t += SAMPLE_RATE as f64 / (f0 * jitter);
    }
    if spec.voicing < 1.0 {
        // pre-formant aspiration noise, scaled so the source keeps
        // roughly constant energy as voicing drops
        let noise_gain = (1.0 - spec.voicing) * 0.15;
        for v in x.iter_mut() {
            *v += noise_gain * rng.gen_range(-1.0..1.0);
        }
    }
    apply_formants(&mut x, &spec.formants);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = 0.5 / peak;
    for v in x.iter_mut() {
        *v = *v * gain + 0.002 * rng.gen_range(-1.0..1.0);
    }
    AudioBuffer::new(x, SAMPLE_RATE)
}

/// Default planted-group speaker specs: disjoint F0 bands and slightly
/// shifted formants per group.
pub fn default_specs(groups: usize, speakers_per_group: usize, seed: u64) -> Vec<SynthSpeakerSpec> {
    let bands = [(85.0, 105.0), (130.0, 155.0), (185.0, 215.0), (250.0, 290.0), (320.0, 360.0)];
    let mut specs = Vec::new();
    for g in 0..groups {
        let band = bands[g % bands.len()];
        for s in 0..speakers_per_group {
            let shift = 1.0 + 0.06 * g as f64 + 0.01 * s as f64;
            specs.push(SynthSpeakerSpec {
                speaker_id: format!("spk{:02}", g * speakers_per_group + s),
                group: g,
                f0_range: band,
                formants: vec![
                    Formant { freq_hz: 500.0 * shift, bandwidth_hz: 80.0 },
                    Formant { freq_hz: 1500.0 * shift, bandwidth_hz: 120.0 },
                    Formant { freq_hz: 2500.0 * shift, bandwidth_hz: 180.0 },
                ],
                jitter: 0.02,
                voicing: 1.0,
                seed: seed ^ ((g * speakers_per_group + s) as u64).wrapping_mul(0xD134_2543_DE82_EF95),
            });
        }
    }
    specs
}

/// Generates WAV files under `out_dir` and returns the manifest.
pub fn generate_synthetic_corpus(
    specs: &[SynthSpeakerSpec],
    utterances_per_speaker: usize,
    seconds_per_utterance: f64,
    out_dir: &Path,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("need at least one speaker spec".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for spec in specs {
        for u in 0..utterances_per_speaker {
            let buf = synthesize_utterance(spec, u, seconds_per_utterance);
            let name = format!("{}_u{:02}.wav", spec.speaker_id, u);
            let path = out_dir.join(&name);
            write_wav(&path, &buf)?;
            entries.push(ManifestEntry {
                speaker_id: spec.speaker_id.clone(),
                utterance_id: format!("{}_u{:02}", spec.speaker_id, u),
                path,
                duration_secs: buf.duration_secs(),
                split: "train".into(),
            });
        }
    }
    Ok(Manifest { entries })
}

/// Splits by explicit speaker lists; splits must be disjoint by speaker.
pub fn split_corpus(
    manifest: &Manifest,
    val_speakers: &[String],
    test_speakers: &[String],
) -> Result<(Manifest, Manifest, Manifest)> {
    let val: BTreeSet<String> = val_speakers.iter().cloned().collect();
    let test: BTreeSet<String> = test_speakers.iter().cloned().collect();
    if let Some(overlap) = val.intersection(&test).next() {
        return Err(Error::InvalidArgument(format!(
            "speaker '{}' requested in both validation and test splits",
            overlap
        )));
    }
    let all: BTreeSet<String> = manifest.speakers().into_iter().collect();
    for s in val.union(&test) {
        if !all.contains(s) {
            return Err(Error::InvalidArgument(format!("unknown speaker '{}'", s)));
        }
    }
    let train: BTreeSet<String> = all.difference(&val).cloned().collect();
    let train: BTreeSet<String> = train.difference(&test).cloned().collect();
    let tag = |m: Manifest, tag: &str| Manifest {
        entries: m.entries.into_iter().map(|mut e| {
            e.split = tag.to_string();
            e
        }).collect(),
    };
    Ok((
        tag(manifest.filter_speakers(&train), "train"),
        tag(manifest.filter_speakers(&val), "val"),
        tag(manifest.filter_speakers(&test), "test"),
    ))
}

/// Seed-driven choice of validation/test speakers.
pub fn choose_split(manifest: &Manifest, n_val: usize, n_test: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut speakers = manifest.speakers();
    if n_val + n_test > speakers.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {} val + {} test speakers from {}",
            n_val,
            n_test,
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the sorted list for determinism
    for i in (1..speakers.len()).rev() {
        let j = rng.gen_range(0..=i);
        speakers.swap(i, j);
    }
    let val = speakers[..n_val].to_vec();
    let test = speakers[n_val..n_val + n_test].to_vec();
    Ok((val, test))
}

/// Loads an utterance's audio.
pub fn load_utterance(entry: &ManifestEntry) -> Result<AudioBuffer> {
    read_wav(&entry.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::features::extract_features;

    #[test]
    fn empty_manifest_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().entries.is_empty());
    }

    #[test]
    fn duplicate_utterance_id_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a\tu1\tx.wav\ttrain\nb\tu1\ty.wav\ttrain\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn three_line_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a\tu1\tx.wav\t4.0\ttrain\na\tu2\ty.wav\t3.5\tval\nb\tu3\tz.wav\t2.0\ttest\n")
            .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].duration_secs, 3.5);
        assert_eq!(m.entries[2].split, "test");
        assert_eq!(m.speakers(), vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn fixed_f0_speaker_has_expected_pitch() {
        let spec = SynthSpeakerSpec {
            speaker_id: "s".into(),
            group: 0,
            f0_range: (150.0, 150.0),
            formants: vec![Formant { freq_hz: 500.0, bandwidth_hz: 80.0 }],
            jitter: 0.0,
            voicing: 1.0,
            seed: 42,
        };
        let buf = synthesize_utterance(&spec, 0, 1.0);
        let feats = extract_features(&buf).unwrap();
        // 16000 / 150 = 106.7 samples
        let mid = &feats[20..60];
        for f in mid {
            assert!((f.pitch_period - 106.7).abs() <= 2.0, "period {}", f.pitch_period);
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let specs = default_specs(2, 1, 7);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic_corpus(&specs, 2, 0.5, d1.path()).unwrap();
        let m2 = generate_synthetic_corpus(&specs, 2, 0.5, d2.path()).unwrap();
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let entries: Vec<ManifestEntry> = (0..10)
            .map(|i| ManifestEntry {
                speaker_id: format!("s{}", i),
                utterance_id: format!("u{}", i),
                path: PathBuf::from("x.wav"),
                duration_secs: 1.0,
                split: "train".into(),
            })
            .collect();
        let m = Manifest { entries };
        let (val, test) = choose_split(&m, 2, 2, 5).unwrap();
        let (tr, va, te) = split_corpus(&m, &val, &test).unwrap();
        assert_eq!(tr.entries.len(), 6);
        assert_eq!(va.entries.len(), 2);
        assert_eq!(te.entries.len(), 2);
        let (val2, test2) = choose_split(&m, 2, 2, 5).unwrap();
        assert_eq!(val, val2);
        assert_eq!(test, test2);
    }

    #[test]
    fn overlapping_split_is_an_error() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                speaker_id: "a".into(),
                utterance_id: "u".into(),
                path: PathBuf::from("x.wav"),
                duration_secs: 1.0,
                split: "train".into(),
            }],
        };
        assert!(split_corpus(&m, &["a".into()], &["a".into()]).is_err());
    }
}

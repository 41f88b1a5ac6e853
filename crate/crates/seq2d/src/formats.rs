//! Plain-text corpus files: vocabularies, datasets, transcripts and the
//! metric log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use seq2d_core::model::Vocabulary;
use seq2d_core::synth::SyntheticSample;
use seq2d_core::train::CheckpointMetrics;
use seq2d_core::Tensor;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// One symbol per line; the line number is the id.
pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let symbols = read_text(path)?
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Vocabulary::new(symbols).map_err(|e| Error::parse(path, 1, e.to_string()))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut s = vocab.symbols().join("\n");
    s.push('\n');
    write_text(path, &s)
}

/// Serializes samples as blocks of `T N F id`, `T` frame lines and one
/// label line. Floats use the shortest representation that reads back
/// exactly.
pub fn format_dataset(samples: &[SyntheticSample], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let t = s.frames.rows();
        let f = s.frames.row_len();
        writeln!(out, "{t} {} {f} {}", s.labels.len(), s.id).unwrap();
        for r in 0..t {
            let row: Vec<String> = s.frames.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        let mut syms = Vec::with_capacity(s.labels.len());
        for &l in &s.labels {
            syms.push(vocab.symbol(l).ok_or(seq2d_core::Error::LabelOutOfRange {
                id: l,
                size: vocab.len(),
            })?);
        }
        writeln!(out, "{}", syms.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[SyntheticSample], vocab: &Vocabulary) -> Result<()> {
    write_text(path, &format_dataset(samples, vocab)?)
}

pub fn parse_dataset(text: &str, path: &Path, vocab: &Vocabulary) -> Result<Vec<SyntheticSample>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut samples = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let header_line = i + 1;
        let mut parts = lines[i].trim().splitn(4, char::is_whitespace);
        let mut num = |what: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::parse(path, header_line, format!("bad or missing {what} in header")))
        };
        let (t, n, f) = (num("T")?, num("N")?, num("F")?);
        let id = parts
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::parse(path, header_line, "missing sample id"))?
            .to_string();
        // an empty label line may be missing at end of file
        if i + 1 + t + usize::from(n > 0) > lines.len() {
            return Err(Error::parse(path, header_line, format!("sample {id} is truncated")));
        }
        let mut data = Vec::with_capacity(t * f);
        for k in 0..t {
            let ln = i + 1 + k;
            let before = data.len();
            for tok in lines[ln].split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::parse(path, ln + 1, format!("bad number {tok:?}")))?,
                );
            }
            if data.len() - before != f {
                return Err(Error::parse(
                    path,
                    ln + 1,
                    format!("expected {f} values, found {}", data.len() - before),
                ));
            }
        }
        let label_ln = i + 1 + t;
        let label_text = lines.get(label_ln).copied().unwrap_or("");
        let mut labels = Vec::with_capacity(n);
        for sym in label_text.split_whitespace() {
            labels.push(
                vocab
                    .id(sym)
                    .ok_or_else(|| Error::parse(path, label_ln + 1, format!("unknown symbol {sym:?}")))?,
            );
        }
        if labels.len() != n {
            return Err(Error::parse(
                path,
                label_ln + 1,
                format!("expected {n} labels, found {}", labels.len()),
            ));
        }
        samples.push(SyntheticSample {
            id,
            frames: Tensor::new(&[t, f], data)?,
            labels,
        });
        i = label_ln + 1;
    }
    Ok(samples)
}

pub fn read_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<SyntheticSample>> {
    parse_dataset(&read_text(path)?, path, vocab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptLine {
    pub id: String,
    pub symbols: Vec<String>,
    pub log_prob: f64,
}

pub fn format_transcripts(lines: &[TranscriptLine]) -> String {
    let mut out = String::new();
    for l in lines {
        writeln!(out, "{}\t{}\t{}", l.id, l.symbols.join(" "), l.log_prob).unwrap();
    }
    out
}

pub fn parse_transcripts(text: &str, path: &Path) -> Result<Vec<TranscriptLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected id<TAB>symbols<TAB>log_prob"));
        }
        let log_prob = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad log_prob {:?}", fields[2])))?;
        out.push(TranscriptLine {
            id: fields[0].to_string(),
            symbols: fields[1].split_whitespace().map(String::from).collect(),
            log_prob,
        });
    }
    Ok(out)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptLine>> {
    parse_transcripts(&read_text(path)?, path)
}

/// `step  train_loss  dev_ppl  dev_fer  lr`, tab-separated, one line per
/// checkpoint.
pub fn format_metric_log(history: &[CheckpointMetrics]) -> String {
    let mut out = String::new();
    for m in history {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            m.step, m.train_loss, m.dev_ppl, m.dev_fer, m.lr
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use seq2d_core::synth::{generate_dataset, SyntheticTaskConfig};

    #[test]
    fn dataset_round_trip_is_exact() {
        let cfg = SyntheticTaskConfig::default();
        let data = generate_dataset(&cfg, 25).unwrap();
        let vocab = cfg.vocabulary();
        let text = format_dataset(&data, &vocab).unwrap();
        let back = parse_dataset(&text, Path::new("x"), &vocab).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn empty_label_line_and_blank_separators() {
        let vocab = Vocabulary::synthetic(3);
        let text = "2 0 2 first\n1 2\n3 4\n\n\n1 2 1 second id\n0.5\na c\n";
        let s = parse_dataset(text, Path::new("x"), &vocab).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0].labels.is_empty());
        assert_eq!(s[1].id, "second id");
        assert_eq!(s[1].labels, [4, 6]);
    }

    #[test]
    fn dataset_errors_carry_line_numbers() {
        let vocab = Vocabulary::synthetic(3);
        let err = parse_dataset("1 1 2 a\n1 x\na\n", Path::new("d.txt"), &vocab).unwrap_err();
        assert_eq!(err.to_string(), "d.txt:2: bad number \"x\"");
        let err = parse_dataset("1 1 2 a\n1 2\nzz\n", Path::new("d.txt"), &vocab).unwrap_err();
        assert!(err.to_string().contains("unknown symbol"));
        let err = parse_dataset("3 1 2 a\n1 2\n", Path::new("d.txt"), &vocab).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = parse_dataset("1 1 2\n1 2\na\n", Path::new("d.txt"), &vocab).unwrap_err();
        assert!(err.to_string().contains("missing sample id"));
    }

    #[test]
    fn transcripts_round_trip() {
        let lines = vec![
            TranscriptLine {
                id: "s0-00001".into(),
                symbols: vec!["a".into(), "b".into()],
                log_prob: -0.123456789012345,
            },
            TranscriptLine {
                id: "empty".into(),
                symbols: vec![],
                log_prob: -3.0,
            },
        ];
        let text = format_transcripts(&lines);
        assert_eq!(text.lines().next().unwrap(), "s0-00001\ta b\t-0.123456789012345");
        assert_eq!(parse_transcripts(&text, Path::new("t")).unwrap(), lines);
        assert!(parse_transcripts("a\tb\n", Path::new("t")).is_err());
    }
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::corpus::Example;
use crate::error::{Error, Result};

/// Reads one [`Example`] per non-blank line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, GeneratorSpec};

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let ex = generate_corpus(&GeneratorSpec {
            n_examples: 50,
            ..GeneratorSpec::default()
        })
        .unwrap();
        save_jsonl(&ex, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), ex);
    }

    #[test]
    fn bad_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"body":"b","original":"o","edited":"e","domain":null}"#;
        let mut text = String::new();
        for _ in 0..6 {
            text.push_str(good);
            text.push('\n');
        }
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }
}

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StoreError, EMPTY_TEXT_ID};

/// Retrieval task class of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "CIR")]
    Cir,
    #[serde(rename = "SBIR")]
    Sbir,
    #[serde(rename = "CSTBIR")]
    Cstbir,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Cir, Task::Sbir, Task::Cstbir];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cir => "CIR",
            Task::Sbir => "SBIR",
            Task::Cstbir => "CSTBIR",
        }
    }

    /// Accepts `SBTIR` as an alias for `CSTBIR`.
    pub fn parse(tag: &str) -> Option<Task> {
        match tag {
            "CIR" => Some(Task::Cir),
            "SBIR" => Some(Task::Sbir),
            "CSTBIR" | "SBTIR" => Some(Task::Cstbir),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (reference, optional text, targets) example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripletRecord {
    pub task: Task,
    pub ref_id: String,
    pub text: Option<String>,
    pub text_id: Option<String>,
    pub target_ids: Vec<String>,
}

impl TripletRecord {
    /// Text embedding id to fuse with; image-only queries use the empty prompt.
    pub fn text_key(&self) -> &str {
        self.text_id.as_deref().unwrap_or(EMPTY_TEXT_ID)
    }

    pub fn is_image_only(&self) -> bool {
        self.text_id.is_none()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    task: String,
    ref_id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    text_id: Option<String>,
    target_ids: Vec<String>,
}

/// Parses JSON-lines triplets; `origin` names the source in error messages.
/// Blank lines are skipped.
pub fn parse_triplets(content: &str, origin: &str) -> Result<Vec<TripletRecord>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| StoreError::Triplet {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
        let task = Task::parse(&raw.task).ok_or_else(|| err(format!("unknown task tag {:?}", raw.task)))?;
        if raw.target_ids.is_empty() {
            return Err(err("target_ids is empty".to_string()));
        }
        out.push(TripletRecord {
            task,
            ref_id: raw.ref_id,
            text: raw.text,
            text_id: raw.text_id,
            target_ids: raw.target_ids,
        });
    }
    Ok(out)
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>, StoreError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    parse_triplets(&content, &path.display().to_string())
}

pub fn write_triplets(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<(), StoreError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| StoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cir_record_with_text() {
        let line = r#"{"task":"CIR","ref_id":"img1","text":"make it red","text_id":"t1","target_ids":["g1","g2"]}"#;
        let recs = parse_triplets(line, "mem").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].task, Task::Cir);
        assert_eq!(recs[0].text.as_deref(), Some("make it red"));
        assert_eq!(recs[0].text_key(), "t1");
        assert_eq!(recs[0].target_ids, vec!["g1", "g2"]);
    }

    #[test]
    fn sbir_record_without_text_uses_empty_prompt() {
        let line = r#"{"task":"SBIR","ref_id":"sk1","text":null,"text_id":null,"target_ids":["g1"]}"#;
        let recs = parse_triplets(line, "mem").unwrap();
        assert!(recs[0].is_image_only());
        assert_eq!(recs[0].text_key(), EMPTY_TEXT_ID);
    }

    #[test]
    fn unknown_task_reports_line() {
        let content = "{\"task\":\"CIR\",\"ref_id\":\"a\",\"text\":null,\"text_id\":null,\"target_ids\":[\"g\"]}\n\
                       {\"task\":\"FOO\",\"ref_id\":\"a\",\"text\":null,\"text_id\":null,\"target_ids\":[\"g\"]}";
        match parse_triplets(content, "f.jsonl").unwrap_err() {
            StoreError::Triplet { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("FOO"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty_targets_rejected() {
        assert!(matches!(
            parse_triplets("{not json", "f").unwrap_err(),
            StoreError::Triplet { line: 1, .. }
        ));
        let line = r#"{"task":"CIR","ref_id":"a","text":null,"text_id":null,"target_ids":[]}"#;
        assert!(matches!(parse_triplets(line, "f").unwrap_err(), StoreError::Triplet { line: 1, .. }));
    }

    #[test]
    fn unknown_fields_ignored_and_alias_accepted() {
        let line = r#"{"task":"SBTIR","ref_id":"a","text":"x","text_id":"t","target_ids":["g"],"extra":42}"#;
        assert_eq!(parse_triplets(line, "f").unwrap()[0].task, Task::Cstbir);
    }

    #[test]
    fn write_then_load_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let recs = vec![
            TripletRecord {
                task: Task::Cstbir,
                ref_id: "s".into(),
                text: Some("with a hat".into()),
                text_id: Some("t".into()),
                target_ids: vec!["g".into()],
            },
            TripletRecord {
                task: Task::Sbir,
                ref_id: "s2".into(),
                text: None,
                text_id: None,
                target_ids: vec!["g2".into(), "g3".into()],
            },
        ];
        write_triplets(&path, &recs).unwrap();
        assert_eq!(load_triplets(&path).unwrap(), recs);
    }
}

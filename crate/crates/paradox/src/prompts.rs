//! Built-in prompt templates and the override mechanism.
//!
//! Templates ship as TOML assets compiled into the binary; a run may shadow
//! any of them by pointing `templates_dir` at a directory of same-named TOML
//! files. Each file declares `required` placeholders so an edited template
//! cannot silently drop a slot the pipeline depends on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gateway::PromptTemplate;

/// Canonical template names used by the pipeline.
pub mod names {
    pub const WRONG_ANSWER: &str = "wrong_answer";
    pub const PARAPHRASE: &str = "paraphrase";
    pub const DECOMPOSE: &str = "decompose";
    pub const RATIONALE: &str = "rationale";
    pub const GENERATE_POISON: &str = "generate_poison";
    pub const PREPEND_CORPUS: &str = "prepend_corpus";
    pub const NES_JUDGE: &str = "nes_judge";
    pub const QA_OPEN: &str = "qa_open";
    pub const QA_MULTIPLE_CHOICE: &str = "qa_multiple_choice";
}

const BUILTIN: &[(&str, &str)] = &[
    (names::WRONG_ANSWER, include_str!("../templates/wrong_answer.toml")),
    (names::PARAPHRASE, include_str!("../templates/paraphrase.toml")),
    (names::DECOMPOSE, include_str!("../templates/decompose.toml")),
    (names::RATIONALE, include_str!("../templates/rationale.toml")),
    (names::GENERATE_POISON, include_str!("../templates/generate_poison.toml")),
    (names::PREPEND_CORPUS, include_str!("../templates/prepend_corpus.toml")),
    (names::NES_JUDGE, include_str!("../templates/nes_judge.toml")),
    (names::QA_OPEN, include_str!("../templates/qa_open.toml")),
    (names::QA_MULTIPLE_CHOICE, include_str!("../templates/qa_multiple_choice.toml")),
];

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(default)]
    system: String,
    user: String,
    #[serde(default)]
    required: Vec<String>,
}

fn parse_template(name: &str, source: &str) -> Result<PromptTemplate> {
    let file: TemplateFile = toml::from_str(source)
        .map_err(|e| Error::Config(format!("template {name}: {e}")))?;
    let required: Vec<&str> = file.required.iter().map(|s| s.as_str()).collect();
    PromptTemplate::new(name, file.system, file.user, &required)
}

/// All templates for one run: builtins, possibly shadowed by files on disk.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    /// The compiled-in defaults. Panics only if a bundled asset is malformed,
    /// which the test suite rules out.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for (name, source) in BUILTIN {
            let parsed = parse_template(name, source)
                .unwrap_or_else(|e| panic!("bundled template {name} is invalid: {e}"));
            templates.insert((*name).to_string(), parsed);
        }
        TemplateSet { templates }
    }

    /// Replaces templates with same-named `.toml` files from `dir`. Returns
    /// how many were loaded. Unknown names are accepted (custom strategies
    /// may use them); malformed files are errors.
    pub fn load_overrides(&mut self, dir: &Path) -> Result<usize> {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "templates_dir {} is not a directory",
                dir.display()
            )));
        }
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
            .collect();
        entries.sort();
        let mut loaded = 0;
        for path in entries {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad template filename {}", path.display())))?
                .to_string();
            let source = std::fs::read_to_string(&path)?;
            let parsed = parse_template(&name, &source)?;
            self.templates.insert(name, parsed);
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("template {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::bindings;

    #[test]
    fn all_builtin_templates_parse() {
        let set = TemplateSet::builtin();
        for (name, _) in BUILTIN {
            assert!(set.get(name).is_ok(), "missing builtin {name}");
        }
    }

    #[test]
    fn qa_open_template_has_exact_byte_layout() {
        let set = TemplateSet::builtin();
        let t = set.get(names::QA_OPEN).unwrap();
        let r = t
            .render(&bindings([("documents", "D1\nD2"), ("question", "Q?")]))
            .unwrap();
        assert_eq!(
            r.user,
            "[INST] Documents: D1\nD2\n\nAnswer the following question with a very short phrase.\n\nQuestion: Q? [/INST]\n\nAnswer:"
        );
        assert!(r.system.is_empty());
    }

    #[test]
    fn qa_multiple_choice_template_has_exact_byte_layout() {
        let set = TemplateSet::builtin();
        let t = set.get(names::QA_MULTIPLE_CHOICE).unwrap();
        let r = t
            .render(&bindings([
                ("documents", "D"),
                ("question", "Q?"),
                ("options", "A) x\nB) y"),
            ]))
            .unwrap();
        assert_eq!(
            r.user,
            "[INST] Documents: D\n\nChoose the correct answer from the following options.\n\nQuestion: Q?\n\nOptions: A) x\nB) y [/INST]\n\nAnswer:"
        );
    }

    #[test]
    fn wrong_answer_template_matches_reference_wording() {
        let set = TemplateSet::builtin();
        let t = set.get(names::WRONG_ANSWER).unwrap();
        let r = t
            .render(&bindings([("question", "Q?"), ("answer", "A")]))
            .unwrap();
        assert_eq!(r.user, "Question: Q?\n\nCorrect Answer: A\n\nWrong Answer:");
        assert!(r.system.starts_with("You are a quiz assistant."));
        assert!(r.system.contains("must *not* be the correct answer"));
    }

    #[test]
    fn nes_judge_embeds_both_criteria_and_no_penalty_rule() {
        let set = TemplateSet::builtin();
        let t = set.get(names::NES_JUDGE).unwrap();
        let r = t
            .render(&bindings([("question", "Q?"), ("document", "D")]))
            .unwrap();
        assert!(r.system.contains("Information independence"));
        assert!(r.system.contains("Naturalness and plausibility"));
        assert!(r.system.contains("Do not penalize a verbatim appearance"));
    }

    #[test]
    fn overrides_shadow_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("wrong_answer.toml"),
            "required = [\"question\", \"answer\"]\nsystem = \"s\"\nuser = \"{question}/{answer}\"\n",
        )
        .unwrap();
        let mut set = TemplateSet::builtin();
        assert_eq!(set.load_overrides(dir.path()).unwrap(), 1);
        let r = set
            .get(names::WRONG_ANSWER)
            .unwrap()
            .render(&bindings([("question", "q"), ("answer", "a")]))
            .unwrap();
        assert_eq!(r.user, "q/a");
    }

    #[test]
    fn override_missing_required_slot_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("wrong_answer.toml"),
            "required = [\"question\"]\nuser = \"no slot\"\n",
        )
        .unwrap();
        let mut set = TemplateSet::builtin();
        assert!(set.load_overrides(dir.path()).is_err());
    }
}

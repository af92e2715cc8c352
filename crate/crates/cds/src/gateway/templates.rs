//! Prompt templates with `{placeholder}` substitution.
//!
//! A store starts from the builtin set compiled into the binary (one file
//! per template under `templates/`) and can be overlaid with `.txt` files
//! from a directory, so deployments can edit prompts without rebuilding.
//! Template ids are `role.task_kind` (for example `evaluate.math`), plus
//! the task-agnostic `consolidate_kcs`.
//!
//! Rendering is strict: a placeholder with no binding is an error, as is
//! a stray unescaped brace. `{{` and `}}` escape literal braces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::TaskKind;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {template}: no binding for placeholder {{{name}}}")]
    UnboundPlaceholder { template: String, name: String },
    #[error("template {template}: {message}")]
    Malformed { template: String, message: String },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

macro_rules! builtin {
    ($($id:literal),+ $(,)?) => {
        &[$(($id, include_str!(concat!("../../templates/", $id, ".txt")))),+]
    };
}

static BUILTIN: &[(&str, &str)] = builtin![
    "annotate_stage1.math",
    "annotate_stage1.code",
    "annotate_stage1.exam",
    "annotate_stage2.math",
    "annotate_stage2.code",
    "annotate_stage2.exam",
    "consolidate_kcs",
    "evaluate.math",
    "evaluate.code",
    "evaluate.exam",
    "diagnose.math",
    "diagnose.code",
    "diagnose.exam",
    "synthesize_global.math",
    "synthesize_global.code",
    "synthesize_global.exam",
    "synthesize_fine.math",
    "synthesize_fine.code",
    "synthesize_fine.exam",
    "rewrite.math",
    "rewrite.code",
    "rewrite.exam",
    "fuse.math",
    "fuse.code",
    "fuse.exam",
    "score.math",
    "score.code",
    "score.exam",
];

/// `role.kind` id for per-task-kind templates.
pub fn template_id(role: &str, kind: TaskKind) -> String {
    format!("{role}.{}", kind.as_str())
}

/// Named prompt templates, renderable against string bindings.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl TemplateStore {
    /// The compiled-in default prompts.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| (id.to_string(), text.to_string()))
            .collect();
        Self { templates }
    }

    /// Replace or add templates from `dir/*.txt`; the file stem is the id.
    /// Returns how many files were loaded.
    pub fn overlay_dir(&mut self, dir: &Path) -> Result<usize, TemplateError> {
        let entries = fs::read_dir(dir).map_err(|source| TemplateError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut loaded = 0;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.clone(),
                source,
            })?;
            if text.trim().is_empty() {
                return Err(TemplateError::Malformed {
                    template: stem.to_string(),
                    message: "template file is empty".into(),
                });
            }
            self.templates.insert(stem.to_string(), text);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Write every template to `dir/<id>.txt` as an editable starting point.
    pub fn write_all(&self, dir: &Path) -> Result<(), TemplateError> {
        fs::create_dir_all(dir).map_err(|source| TemplateError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (id, text) in &self.templates {
            let path = dir.join(format!("{id}.txt"));
            fs::write(&path, text).map_err(|source| TemplateError::Io { path, source })?;
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Result<&str, TemplateError> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::UnknownTemplate(id.to_string()))
    }

    /// Render template `id` with the given bindings.
    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, TemplateError> {
        render_str(self.get(id)?, bindings).map_err(|e| match e {
            RenderError::Unbound(name) => TemplateError::UnboundPlaceholder {
                template: id.to_string(),
                name,
            },
            RenderError::Malformed(message) => TemplateError::Malformed {
                template: id.to_string(),
                message,
            },
        })
    }
}

enum RenderError {
    Unbound(String),
    Malformed(String),
}

/// Substitute `{name}` placeholders; `{{`/`}}` produce literal braces.
fn render_str(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, RenderError> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                if chars.peek() == Some(&'{') {
                    chars.next();
                    out.push('{');
                    continue;
                }
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) if c.is_ascii_alphanumeric() || c == '_' => name.push(c),
                        Some(c) => {
                            return Err(RenderError::Malformed(format!(
                                "unexpected {c:?} in placeholder"
                            )))
                        }
                        None => {
                            return Err(RenderError::Malformed("unterminated placeholder".into()))
                        }
                    }
                }
                if name.is_empty() {
                    return Err(RenderError::Malformed("empty placeholder".into()));
                }
                match bindings.get(name.as_str()) {
                    Some(value) => out.push_str(value),
                    None => return Err(RenderError::Unbound(name)),
                }
            }
            '}' => {
                if chars.peek() == Some(&'}') {
                    chars.next();
                    out.push('}');
                } else {
                    return Err(RenderError::Malformed("unescaped '}'".into()));
                }
            }
            c => out.push(c),
        }
    }
    Ok(out)
}

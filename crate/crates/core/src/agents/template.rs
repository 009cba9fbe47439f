use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::domain::Screenshot;
use crate::gateway::{ChatMessage, ContentPart, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{role}`: {reason}")]
    Invalid { role: String, reason: String },
    #[error("template `{role}`: cannot read {path}: {message}")]
    Io { role: String, path: String, message: String },
}

/// Model-backed roles and the slots each template may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentRole {
    Operator,
    Explorer,
    Progressor,
    ActionReflector,
    TrajectoryReflector,
    GlobalReflector,
    Summary,
    Critic,
}

impl AgentRole {
    pub const ALL: [AgentRole; 8] = [
        AgentRole::Operator,
        AgentRole::Explorer,
        AgentRole::Progressor,
        AgentRole::ActionReflector,
        AgentRole::TrajectoryReflector,
        AgentRole::GlobalReflector,
        AgentRole::Summary,
        AgentRole::Critic,
    ];

    /// File stem and request tag.
    pub fn name(self) -> &'static str {
        match self {
            AgentRole::Operator => "operator",
            AgentRole::Explorer => "explorer",
            AgentRole::Progressor => "progressor",
            AgentRole::ActionReflector => "action_reflector",
            AgentRole::TrajectoryReflector => "trajectory_reflector",
            AgentRole::GlobalReflector => "global_reflector",
            AgentRole::Summary => "summary",
            AgentRole::Critic => "critic",
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            AgentRole::Operator => &["instruction", "knowledge", "progress", "history", "feedback", "screen", "images"],
            AgentRole::Explorer => &["app", "guidance", "knowledge", "history", "screen", "images"],
            AgentRole::Progressor => &["instruction", "progress", "history", "action", "feedback"],
            AgentRole::ActionReflector => &["instruction", "action", "regions", "images"],
            AgentRole::TrajectoryReflector => &["instruction", "progress", "triggers", "window"],
            AgentRole::GlobalReflector => &["instruction", "progress", "history", "window", "images"],
            AgentRole::Summary => &["app", "segment", "images"],
            AgentRole::Critic => &["app", "knowledge", "history", "images"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            AgentRole::Operator => include_str!("../../templates/operator.txt"),
            AgentRole::Explorer => include_str!("../../templates/explorer.txt"),
            AgentRole::Progressor => include_str!("../../templates/progressor.txt"),
            AgentRole::ActionReflector => include_str!("../../templates/action_reflector.txt"),
            AgentRole::TrajectoryReflector => include_str!("../../templates/trajectory_reflector.txt"),
            AgentRole::GlobalReflector => include_str!("../../templates/global_reflector.txt"),
            AgentRole::Summary => include_str!("../../templates/summary.txt"),
            AgentRole::Critic => include_str!("../../templates/critic.txt"),
        }
    }
}

const IMAGES: &str = "{{images}}";

/// A role's system text and user layout. `{{images}}` in the user section
/// marks where screenshots go; other `{{slot}}`s are replaced by text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: AgentRole,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(role: AgentRole, text: &str) -> Result<Self, TemplateError> {
        let invalid = |reason: String| TemplateError::Invalid { role: role.name().into(), reason };
        let text = text.replace("\r\n", "\n");
        let sys_at = find_header(&text, "[system]").ok_or_else(|| invalid("missing [system] section".into()))?;
        let user_at = find_header(&text, "[user]").ok_or_else(|| invalid("missing [user] section".into()))?;
        if user_at < sys_at {
            return Err(invalid("[system] must come before [user]".into()));
        }
        let system = text[sys_at + "[system]".len()..user_at].trim().to_string();
        let user = text[user_at + "[user]".len()..].trim().to_string();
        for slot in slot_names(&system).iter().chain(&slot_names(&user)) {
            if !role.slots().contains(&slot.as_str()) {
                return Err(invalid(format!("unknown slot `{{{{{slot}}}}}`")));
            }
        }
        if system.contains(IMAGES) {
            return Err(invalid("`{{images}}` belongs in the [user] section".into()));
        }
        Ok(Self { role, system, user })
    }

    /// System and user messages with `slots` substituted and `images`
    /// placed at the marker (or first when the layout has none).
    pub fn render(&self, slots: &BTreeMap<&str, String>, images: &[Screenshot]) -> Vec<ChatMessage> {
        let fill = |s: &str| substitute(s, slots);
        let (before, after) = match self.user.split_once(IMAGES) {
            Some((b, a)) => (fill(b), fill(a)),
            None => (String::new(), fill(&self.user)),
        };
        let mut parts = Vec::new();
        if !before.trim().is_empty() {
            parts.push(ContentPart::Text(before.trim().to_string()));
        }
        parts.extend(images.iter().cloned().map(ContentPart::image));
        if !after.trim().is_empty() {
            parts.push(ContentPart::Text(after.trim().to_string()));
        }
        vec![
            ChatMessage::text(Role::System, fill(&self.system)),
            ChatMessage { role: Role::User, parts },
        ]
    }
}

fn find_header(text: &str, header: &str) -> Option<usize> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim() == header {
            return Some(offset + line.find('[').unwrap_or(0));
        }
        offset += line.len();
    }
    None
}

fn slot_names(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else { break };
        out.push(after[..end].trim().to_string());
        rest = &after[end + 2..];
    }
    out
}

fn substitute(text: &str, slots: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        if let Some(value) = slots.get(after[..end].trim()) {
            out.push_str(value);
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// One template per role.
#[derive(Debug, Clone)]
pub struct TemplateCatalog {
    templates: BTreeMap<AgentRole, PromptTemplate>,
}

impl TemplateCatalog {
    pub fn builtin() -> Self {
        let templates = AgentRole::ALL
            .iter()
            .map(|&r| (r, PromptTemplate::parse(r, r.builtin()).expect("built-in templates are valid")))
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by any `<role>.txt` present in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut catalog = Self::builtin();
        for role in AgentRole::ALL {
            let path = dir.join(format!("{}.txt", role.name()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                role: role.name().into(),
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            catalog.templates.insert(role, PromptTemplate::parse(role, &text)?);
        }
        Ok(catalog)
    }

    pub fn get(&self, role: AgentRole) -> &PromptTemplate {
        &self.templates[&role]
    }
}

impl Default for TemplateCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

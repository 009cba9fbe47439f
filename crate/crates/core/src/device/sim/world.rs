//! The app-graph file format and its validation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Rgb, RunResult};
use crate::perception::BoundingBox;

/// Screen id of the built-in home launcher.
pub const LAUNCHER: &str = "launcher";
/// Transition target that pops the screen history instead of pushing.
pub const BACK_TARGET: &str = "@back";

pub const DEFAULT_WIDTH: u32 = 360;
pub const DEFAULT_HEIGHT: u32 = 720;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("world file: {0}")]
    Parse(String),
    #[error("invalid world: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateValue {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl fmt::Display for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateValue::Bool(b) => write!(f, "{b}"),
            StateValue::Int(i) => write!(f, "{i}"),
            StateValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for StateValue {
    fn from(s: &str) -> Self {
        StateValue::Str(s.to_string())
    }
}

pub type SimState = BTreeMap<String, StateValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Display {
    pub width: u32,
    pub height: u32,
}

impl Default for Display {
    fn default() -> Self {
        Self { width: DEFAULT_WIDTH, height: DEFAULT_HEIGHT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    pub home: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<String>,
    /// Header and launcher icon color, `#rrggbb`.
    #[serde(default = "default_accent")]
    pub color: String,
}

fn default_accent() -> String {
    "#3a6ea5".into()
}

fn default_background() -> String {
    "#ffffff".into()
}

/// What an interaction does: move to a screen and/or mutate state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// String values may reference state as `{{var}}`, read before any change.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub set: BTreeMap<String, StateValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub toggle: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwipeSpec {
    /// Direction the finger travels.
    pub direction: Direction,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub set: BTreeMap<String, StateValue>,
    #[serde(default)]
    pub toggle: Vec<String>,
}

impl SwipeSpec {
    pub fn transition(&self) -> Transition {
        Transition { target: self.target.clone(), set: self.set.clone(), toggle: self.toggle.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSpec {
    pub id: String,
    pub app: String,
    #[serde(default = "default_background")]
    pub background: String,
    /// Rendered in a header bar across the top.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default)]
    pub on_swipe: Vec<SwipeSpec>,
    /// Keyed by lowercase key name; `back`, `menu` and `enter` also catch the
    /// matching system buttons.
    #[serde(default)]
    pub on_key: BTreeMap<String, Transition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Button,
    TextField,
    ListItem,
    Toggle,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSpec {
    pub id: String,
    pub screen: String,
    pub kind: ElementKind,
    /// `[x, y, width, height]`.
    pub bounds: [u32; 4],
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub on_click: Option<Transition>,
    #[serde(default)]
    pub on_long_press: Option<Transition>,
    /// State variable edited by a text field or flipped by a toggle.
    #[serde(default)]
    pub field: Option<String>,
    /// Shown only while every listed variable has the given value.
    #[serde(default)]
    pub visible_if: Option<BTreeMap<String, StateValue>>,
}

impl ElementSpec {
    pub fn rect(&self) -> BoundingBox {
        let [x, y, w, h] = self.bounds;
        BoundingBox::new(x, y, w, h)
    }

    pub fn visible(&self, state: &SimState) -> bool {
        self.visible_if.as_ref().is_none_or(|cond| {
            cond.iter().all(|(k, v)| state.get(k).is_some_and(|s| s.to_string() == v.to_string()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessPredicate {
    #[serde(default)]
    pub state: BTreeMap<String, StateValue>,
    /// Expected answer, compared trimmed and case-insensitively.
    #[serde(default)]
    pub answer: Option<String>,
}

impl SuccessPredicate {
    pub fn holds(&self, state: &SimState, answer: Option<&str>) -> bool {
        let state_ok = self
            .state
            .iter()
            .all(|(k, v)| state.get(k).is_some_and(|s| s.to_string() == v.to_string()));
        let answer_ok = match &self.answer {
            None => true,
            Some(want) => answer.is_some_and(|got| got.trim().eq_ignore_ascii_case(want.trim())),
        };
        state_ok && answer_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTask {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub app: Option<String>,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub initial: BTreeMap<String, StateValue>,
    pub success: SuccessPredicate,
}

/// Whether `result` completed `task`, judged on the final device state and
/// the run's answer.
pub fn check_success(task: &SimTask, state: &SimState, result: &RunResult) -> bool {
    task.success.holds(state, result.answer.as_deref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    #[serde(default)]
    display: Display,
    apps: Vec<AppSpec>,
    screens: Vec<ScreenSpec>,
    #[serde(default)]
    elements: Vec<ElementSpec>,
    #[serde(default)]
    state: SimState,
    #[serde(default)]
    tasks: Vec<SimTask>,
}

/// A validated app graph.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub display: Display,
    pub apps: Vec<AppSpec>,
    pub screens: Vec<ScreenSpec>,
    pub elements: Vec<ElementSpec>,
    pub state: SimState,
    pub tasks: Vec<SimTask>,
}

impl World {
    pub fn from_toml(text: &str) -> Result<Self, WorldError> {
        let file: WorldFile = toml::from_str(text).map_err(|e| WorldError::Parse(e.to_string()))?;
        let world = World {
            display: file.display,
            apps: file.apps,
            screens: file.screens,
            elements: file.elements,
            state: file.state,
            tasks: file.tasks,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| WorldError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn screen(&self, id: &str) -> Option<&ScreenSpec> {
        self.screens.iter().find(|s| s.id == id)
    }

    pub fn app(&self, name: &str) -> Option<&AppSpec> {
        let name = name.trim();
        self.apps.iter().find(|a| {
            a.name.eq_ignore_ascii_case(name) || a.package.as_deref().is_some_and(|p| p == name)
        })
    }

    pub fn task(&self, id: &str) -> Option<&SimTask> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Elements on `screen` in declaration order; later ones are on top.
    pub fn elements_on<'a>(&'a self, screen: &'a str) -> impl Iterator<Item = &'a ElementSpec> + 'a {
        self.elements.iter().filter(move |e| e.screen == screen)
    }

    fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Invalid(m));
        let Display { width, height } = self.display;
        if width == 0 || height == 0 {
            return bad("display dimensions must be positive".into());
        }
        if self.apps.is_empty() {
            return bad("at least one app is required".into());
        }

        let mut names = HashSet::new();
        for app in &self.apps {
            if app.name.trim().is_empty() || !names.insert(app.name.to_lowercase()) {
                return bad(format!("app name `{}` is empty or duplicated", app.name));
            }
            if Rgb::from_hex(&app.color).is_none() {
                return bad(format!("app `{}`: color `{}` is not #rrggbb", app.name, app.color));
            }
            match self.screen(&app.home) {
                Some(s) if s.app == app.name => {}
                Some(_) => return bad(format!("app `{}`: home `{}` belongs to another app", app.name, app.home)),
                None => return bad(format!("app `{}`: home screen `{}` does not exist", app.name, app.home)),
            }
        }

        let mut ids = HashSet::new();
        for s in &self.screens {
            if s.id == LAUNCHER || !ids.insert(s.id.as_str()) {
                return bad(format!("screen id `{}` is reserved or duplicated", s.id));
            }
            if !self.apps.iter().any(|a| a.name == s.app) {
                return bad(format!("screen `{}`: unknown app `{}`", s.id, s.app));
            }
            if Rgb::from_hex(&s.background).is_none() {
                return bad(format!("screen `{}`: background `{}` is not #rrggbb", s.id, s.background));
            }
            for sw in &s.on_swipe {
                self.check_transition(&format!("screen `{}` on_swipe", s.id), &sw.transition())?;
            }
            for (key, t) in &s.on_key {
                if key.to_lowercase() != *key {
                    return bad(format!("screen `{}`: on_key name `{key}` must be lowercase", s.id));
                }
                self.check_transition(&format!("screen `{}` on_key.{key}", s.id), t)?;
            }
        }

        let mut element_ids = HashSet::new();
        for e in &self.elements {
            let ctx = format!("element `{}`", e.id);
            if !element_ids.insert(e.id.as_str()) {
                return bad(format!("{ctx} is duplicated"));
            }
            if self.screen(&e.screen).is_none() {
                return bad(format!("{ctx}: unknown screen `{}`", e.screen));
            }
            if !e.rect().fits_within(width, height) {
                return bad(format!("{ctx}: bounds {:?} exceed the {width}x{height} display", e.bounds));
            }
            for t in e.on_click.iter().chain(&e.on_long_press) {
                self.check_transition(&ctx, t)?;
            }
            match (&e.field, e.kind) {
                (None, ElementKind::TextField) => return bad(format!("{ctx}: text fields need a `field`")),
                (Some(f), _) => self.check_var(&ctx, f)?,
                _ => {}
            }
            for v in template_vars(&e.label) {
                self.check_var(&ctx, &v)?;
            }
            for v in e.visible_if.iter().flat_map(|m| m.keys()) {
                self.check_var(&ctx, v)?;
            }
        }

        let mut task_ids = HashSet::new();
        for t in &self.tasks {
            let ctx = format!("task `{}`", t.id);
            if !task_ids.insert(t.id.as_str()) {
                return bad(format!("{ctx} is duplicated"));
            }
            if t.instruction.trim().is_empty() {
                return bad(format!("{ctx}: empty instruction"));
            }
            if let Some(app) = &t.app {
                if self.app(app).is_none() {
                    return bad(format!("{ctx}: unknown app `{app}`"));
                }
            }
            for v in t.initial.keys().chain(t.success.state.keys()) {
                self.check_var(&ctx, v)?;
            }
        }
        Ok(())
    }

    fn check_transition(&self, ctx: &str, t: &Transition) -> Result<(), WorldError> {
        if let Some(target) = &t.target {
            if target != BACK_TARGET && target != LAUNCHER && self.screen(target).is_none() {
                return Err(WorldError::Invalid(format!("{ctx}: unknown target screen `{target}`")));
            }
        }
        for v in t.set.keys().chain(&t.toggle) {
            self.check_var(ctx, v)?;
        }
        for v in t.set.values() {
            if let StateValue::Str(s) = v {
                for var in template_vars(s) {
                    self.check_var(ctx, &var)?;
                }
            }
        }
        Ok(())
    }

    fn check_var(&self, ctx: &str, var: &str) -> Result<(), WorldError> {
        if self.state.contains_key(var) {
            Ok(())
        } else {
            Err(WorldError::Invalid(format!("{ctx}: undeclared state variable `{var}`")))
        }
    }
}

/// Names referenced as `{{name}}` in `text`.
pub fn template_vars(text: &str) -> Vec<String> {
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

/// Replaces `{{name}}` with the variable's value; unknown names render empty.
pub fn interpolate(text: &str, state: &SimState) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        if let Some(v) = state.get(after[..end].trim()) {
            out.push_str(&v.to_string());
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}
